"""Experiment execution: per-seed runs, CSV/JSON artifacts, aggregation.

Every output file starts with a provenance comment line carrying the artifact
version, the sha256 of the resolved config, and the seed. Aggregates are
computed by re-reading the per-seed files, so they recompute exactly from
what is on disk.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import analysis, attacks, config, data, nn, training
from .config import ConfigError, attack_from_dict, config_hash

VERSION = "0.1.0"


def _prov(cfg_hash, seed):
    return f"# advlab={VERSION} config_sha256={cfg_hash} seed={seed}\n"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, prov_line, header, rows, extra_comment=None):
    with open(path, "w") as fh:
        fh.write(prov_line)
        if extra_comment:
            fh.write(extra_comment)
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path):
    """Read back an artifact CSV: (comment lines, header, rows of strings)."""
    comments, header, rows = [], None, []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                comments.append(line)
            elif header is None:
                header = line.split(",")
            elif line:
                rows.append(line.split(","))
    return comments, header, rows


def aggregate_csvs(paths, id_cols=()):
    """Mean and std across seeds, recomputed from the written files.

    Rows align by index; id columns must agree across seeds and are carried
    through; every other column is parsed as a number.
    """
    parsed = [read_csv(p) for p in paths]
    header = parsed[0][1]
    out = []
    for ri in range(len(parsed[0][2])):
        row = {}
        for ci, col in enumerate(header):
            vals = [p[2][ri][ci] for p in parsed]
            if col in id_cols:
                if len(set(vals)) != 1:
                    raise ValueError(f"id column {col} differs across seeds")
                row[col] = vals[0]
            else:
                nums = np.array([1.0 if v == "True" else 0.0 if v == "False"
                                 else float(v) for v in vals])
                row[col] = {"mean": float(nums.mean()),
                            "std": float(nums.std(ddof=1)) if len(nums) > 1 else 0.0}
        out.append(row)
    return header, out


def _write_summary(out_dir, cfg, cfg_hash, payload):
    payload = dict(payload)
    payload.update({"version": VERSION, "kind": cfg["kind"],
                    "config_sha256": cfg_hash, "seeds": cfg["seeds"]})
    path = os.path.join(out_dir, "aggregate.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _train_once(cfg, seed, hook=None):
    ds = config.build_dataset(cfg["dataset"], seed)
    tc = config.build_train_config(cfg["train"], seed)
    model = config.build_model(cfg["model"], ds, seed)
    if tc.free_at_replays > 1:
        model, recs = training.free_at_train(model, ds, tc)
        best = None
    else:
        model, recs, best = training.adv_train(model, ds, tc, epoch_hook=hook)
    return ds, tc, model, recs, best


def _run_train(cfg, out_dir, cfg_hash):
    seed_files = []
    for seed in cfg["seeds"]:
        ds, tc, model, recs, best = _train_once(cfg, seed)
        path = os.path.join(out_dir, f"metrics_seed{seed}.csv")
        _write_csv(path, _prov(cfg_hash, seed), training.MetricsRecord.FIELDS,
                   [r.row() for r in recs])
        seed_files.append(path)
        if best is not None:
            ckpt = nn.Model(model.layers, best, model.input_shape,
                            model.num_classes)
            nn.save_checkpoint(ckpt, os.path.join(out_dir,
                                                  f"model_seed{seed}.ckpt"))
        if cfg["train"].get("final_eval"):
            probe = training._split_probe(ds, tc.probe_size)[1]
            acc = training._batched_robust_acc(
                model, probe, tc.eval_attack.with_seed(
                    training.derive_seed(seed, 9)))
            with open(os.path.join(out_dir, f"final_eval_seed{seed}.csv"), "w") as fh:
                fh.write(_prov(cfg_hash, seed))
                fh.write("eval_robust_acc\n" + repr(float(acc)) + "\n")
    final_rows = []
    best_rows = []
    for p in seed_files:
        _, header, rows = read_csv(p)
        final_rows.append(rows[-1])
        pgd_col = header.index("pgd_eval_acc")
        best_rows.append(max(float(r[pgd_col]) for r in rows))
    header = training.MetricsRecord.FIELDS
    final = {}
    for ci, col in enumerate(header):
        nums = np.array([float(r[ci]) if r[ci] not in ("True", "False")
                         else float(r[ci] == "True") for r in final_rows])
        final[col] = {"mean": float(nums.mean()),
                      "std": float(nums.std(ddof=1)) if len(nums) > 1 else 0.0}
    best = np.array(best_rows)
    return {"final_epoch": final,
            "best_pgd_eval_acc": {"mean": float(best.mean()),
                                  "std": float(best.std(ddof=1)) if len(best) > 1 else 0.0}}


def _run_norm_study(cfg, out_dir, cfg_hash):
    p = cfg.get("params", {})
    d = p.get("d", 3072)
    samples = p.get("samples", 100000)
    header = ["method", "d", "epsilon", "alpha", "noise_bound",
              "analytic", "mc_mean", "mc_stderr"]
    seed_files = []
    for seed in cfg["seeds"]:
        field_rng = np.random.default_rng(np.random.SeedSequence([seed, 77]))
        field = np.sign(field_rng.standard_normal(d))
        field[field == 0] = 1.0
        rows = []
        for spec_dict in cfg["attacks"]:
            spec = attack_from_dict(spec_dict)
            inp = analysis.NormFormulaInput(d, spec.epsilon, spec.alpha,
                                            spec.noise_bound)
            exact = analysis.expected_sq_norm(spec.method, inp)
            mc, se = analysis.mc_sq_norm(spec, field, samples, seed)
            rows.append([spec.method, d, spec.epsilon, spec.alpha,
                         spec.noise_bound, exact, mc, se])
        path = os.path.join(out_dir, f"norms_seed{seed}.csv")
        _write_csv(path, _prov(cfg_hash, seed), header, rows)
        seed_files.append(path)
    _, agg = aggregate_csvs(seed_files, id_cols=("method",))
    return {"rows": agg}


def _run_step_size_study(cfg, out_dir, cfg_hash):
    p = cfg.get("params", {})
    bsz = p.get("batch_size", 128)
    header = ["method", "alpha", "noise_bound", "projected",
              "mean_ratio", "mean_full_step"]
    seed_files = []
    for seed in cfg["seeds"]:
        if "train" in cfg:
            ds, tc, model, _, _ = _train_once(cfg, seed)
        else:
            ds = config.build_dataset(cfg["dataset"], seed)
            model = config.build_model(cfg["model"], ds, seed)
        b = next(data.batches(ds, min(bsz, len(ds)), shuffle=False))
        n = len(b.labels)
        dim = int(np.prod(b.inputs.shape[1:]))
        xn = np.sqrt((b.inputs.reshape(n, -1) ** 2).sum(axis=1))
        rows = []
        for i, spec_dict in enumerate(cfg["attacks"]):
            spec = attack_from_dict(spec_dict).with_seed(
                training.derive_seed(seed, 5, i))
            pb = attacks.single_step_attack(model, b, spec)
            d_rand = pb.noise_part
            if spec.project_eps_ball:
                d_rand = np.clip(d_rand, -spec.epsilon, spec.epsilon)
            ratios = analysis.effective_step_size(pb.delta, d_rand, b.inputs)
            full = spec.alpha * np.sqrt(dim) / xn
            rows.append([spec.method, spec.alpha, spec.noise_bound,
                         spec.project_eps_ball, float(ratios.mean()),
                         float(full.mean())])
        path = os.path.join(out_dir, f"step_size_seed{seed}.csv")
        _write_csv(path, _prov(cfg_hash, seed), header, rows)
        seed_files.append(path)
    _, agg = aggregate_csvs(seed_files, id_cols=("method", "projected"))
    return {"rows": agg}


def _run_rank_study(cfg, out_dir, cfg_hash):
    p = cfg.get("params", {})
    n_examples = p.get("examples", 8)
    fraction = p.get("variance_fraction", 0.9)
    normalize = p.get("normalize_rows", False)
    intervals = [tuple(v) for v in p.get("intervals", [[1, cfg["train"]["epochs"]]])]
    header = ["interval", "example", "effective_rank"]
    seed_files = []
    for seed in cfg["seeds"]:
        ds = config.build_dataset(cfg["dataset"], seed)
        tc = config.build_train_config(cfg["train"], seed)
        probe = training._split_probe(ds, tc.probe_size)[1]
        tracked = nn.Batch(probe.inputs[:n_examples], probe.labels[:n_examples])
        deltas = []

        def hook(model, epoch):
            pb = attacks.generate(model, tracked, tc.attack.with_seed(
                training.derive_seed(seed, 6, epoch)))
            deltas.append(pb.delta.reshape(len(tracked.labels), -1).copy())

        model = config.build_model(cfg["model"], ds, seed)
        training.adv_train(model, ds, tc, epoch_hook=hook)
        rows = []
        for lo, hi in intervals:
            stack = np.stack(deltas[lo - 1:hi])  # [epochs, examples, dim]
            for ex in range(len(tracked.labels)):
                r = analysis.effective_rank(stack[:, ex, :], fraction,
                                            normalize_rows=normalize)
                rows.append([f"{lo}-{hi}", ex, r])
        path = os.path.join(out_dir, f"rank_seed{seed}.csv")
        _write_csv(path, _prov(cfg_hash, seed), header, rows)
        seed_files.append(path)
    _, agg = aggregate_csvs(seed_files, id_cols=("interval", "example"))
    return {"rows": agg}


def _run_loss_surface(cfg, out_dir, cfg_hash):
    p = cfg.get("params", {})
    res = p.get("resolution", 21)
    idx = p.get("sample_index", 0)
    seed_files = []
    for seed in cfg["seeds"]:
        ds, tc, model, _, _ = _train_once(cfg, seed)
        probe = training._split_probe(ds, tc.probe_size)[1]
        x, y = probe.inputs[idx], int(probe.labels[idx])
        eps = tc.attack.epsilon
        gseed = training.derive_seed(seed, 7)
        grid = analysis.loss_surface_grid(model, x, y, res, eps, gseed)
        path = os.path.join(out_dir, f"surface_seed{seed}.csv")
        extra = f"# resolution={res} grid_seed={gseed} eps={repr(float(eps))}\n"
        _write_csv(path, _prov(cfg_hash, seed),
                   [f"t2_{j}" for j in range(res)], grid.tolist(), extra)
        summary_path = os.path.join(out_dir, f"surface_stats_seed{seed}.csv")
        _write_csv(summary_path, _prov(cfg_hash, seed),
                   ["clean_loss", "max_loss", "mean_loss"],
                   [[float(grid[0, 0]), float(grid.max()), float(grid.mean())]])
        seed_files.append(summary_path)
    _, agg = aggregate_csvs(seed_files)
    return {"rows": agg}


def _run_sweep(cfg, out_dir, cfg_hash):
    header = ["method", "epsilon", "alpha", "noise_bound", "clean_acc",
              "attack_train_acc", "pgd_eval_acc", "best_pgd_eval_acc",
              "co_flag"]
    seed_files = []
    for seed in cfg["seeds"]:
        rows = []
        for spec_dict in cfg["attacks"]:
            spec = attack_from_dict(spec_dict)
            sub = dict(cfg)
            sub["train"] = dict(cfg["train"], attack=spec_dict)
            _, _, _, recs, _ = _train_once(sub, seed)
            last = recs[-1]
            rows.append([spec.method, spec.epsilon, spec.alpha,
                         spec.noise_bound, last.clean_acc,
                         last.attack_train_acc, last.pgd_eval_acc,
                         max(r.pgd_eval_acc for r in recs),
                         training.co_monitor(recs)])
        path = os.path.join(out_dir, f"sweep_seed{seed}.csv")
        _write_csv(path, _prov(cfg_hash, seed), header, rows)
        seed_files.append(path)
    _, agg = aggregate_csvs(seed_files, id_cols=("method",))
    return {"rows": agg}


_RUNNERS = {
    "train": _run_train,
    "norm_study": _run_norm_study,
    "step_size_study": _run_step_size_study,
    "rank_study": _run_rank_study,
    "loss_surface": _run_loss_surface,
    "eps_sweep": _run_sweep,
    "alpha_k_sweep": _run_sweep,
}


def validate(config_path):
    """Parse and check a config; returns the list of problems (no side effects)."""
    try:
        cfg = config.load_config(config_path)
    except ConfigError as e:
        return [str(e)]
    return config.validate_config(cfg)


def run(config_path, seed_override=None, out_dir=None, probe_size=None):
    """Execute the experiment file; returns a process exit status."""
    try:
        cfg = config.load_config(config_path)
    except ConfigError as e:
        print(f"error: {e}")
        return 2
    if seed_override is not None:
        cfg["seeds"] = [int(seed_override)]
    if out_dir is not None:
        cfg["out_dir"] = out_dir
    if probe_size is not None and "train" in cfg:
        cfg["train"] = dict(cfg["train"], probe_size=int(probe_size))
    problems = config.validate_config(cfg)
    if problems:
        for p in problems:
            print(f"invalid config: {p}")
        return 3
    target = cfg.get("out_dir", "runs")
    os.makedirs(target, exist_ok=True)
    h = config_hash(cfg)
    try:
        payload = _RUNNERS[cfg["kind"]](cfg, target, h)
    except (ValueError, FileNotFoundError, ZeroDivisionError) as e:
        print(f"run failed: {e}")
        return 4
    _write_summary(target, cfg, h, payload)
    print(f"wrote results to {target} (config {h[:12]})")
    return 0
