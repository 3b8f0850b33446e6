"""Experiment configuration: JSON schema, validation, and object construction.

A config file is one JSON object. Common keys:
    kind      one of train, norm_study, step_size_study, rank_study,
              loss_surface, eps_sweep, alpha_k_sweep
    seeds     non-empty list of integers
    out_dir   output directory (the --out-dir flag overrides)
    dataset   {"name": "two_moons"|"glyphs"|"idx", ...}
    model     {"preset": "desk_cnn"|"desk_mlp"} or {"arch": "...", "input_shape": [...]}
    train     TrainConfig fields with nested "attack" (and optional "eval_attack")
    attacks   list of AttackSpec dicts (sweep and study kinds)
    params    kind-specific settings (d, samples, resolution, intervals, ...)
"""

from __future__ import annotations

import json

from . import data, nn
from .attacks import AttackSpec
from .training import TrainConfig

KINDS = ("train", "norm_study", "step_size_study", "rank_study",
         "loss_surface", "eps_sweep", "alpha_k_sweep")

# methods whose noise record is a single per-sample draw (usable as the
# pure-noise reference of the effective-step-size study)
STEP_SIZE_METHODS = ("fgsm", "rs_fgsm", "r_plus_fgsm", "n_fgsm", "noise_only")


class ConfigError(Exception):
    pass


def load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")


def attack_from_dict(d):
    if not isinstance(d, dict):
        raise ValueError("attack spec must be an object")
    extra = set(d) - {f for f in AttackSpec.__dataclass_fields__}
    if extra:
        raise ValueError(f"unknown attack fields: {sorted(extra)}")
    if "clamp_data_range" in d and d["clamp_data_range"] is not None:
        d = dict(d, clamp_data_range=tuple(d["clamp_data_range"]))
    return AttackSpec(**d)


def build_dataset(block, seed):
    name = block.get("name")
    if name == "two_moons":
        return data.synth_two_moons(block.get("n", 2000),
                                    block.get("noise_sd", 0.05), seed)
    if name == "glyphs":
        return data.make_glyphs(block.get("n", 2560), seed,
                                block.get("image_size", 28),
                                block.get("noise_sd", 0.03))
    if name == "idx":
        return data.load_idx(block["images"], block["labels"],
                             block.get("limit"))
    raise ValueError(f"unknown dataset name {name!r}")


def _num_classes(block, ds):
    return block.get("num_classes", int(ds.labels.max()) + 1)


def build_model(block, ds, seed):
    preset = block.get("preset")
    if preset == "desk_cnn":
        return nn.desk_cnn(ds.inputs.shape[1:], _num_classes(block, ds), seed)
    if preset == "desk_mlp":
        return nn.desk_mlp(ds.inputs.shape[1], _num_classes(block, ds), seed)
    if preset is not None:
        raise ValueError(f"unknown model preset {preset!r}")
    arch = [tuple(None if v == "*" else v for v in layer)
            for layer in _parse_arch(block["arch"])]
    return nn.build_model(arch, tuple(block["input_shape"]), seed)


def _parse_arch(text):
    layers = []
    for part in text.split("|"):
        bits = part.split(":")
        if bits[0] in ("relu", "flatten"):
            layers.append((bits[0],))
        else:
            layers.append(tuple([bits[0]] + [None if b == "*" else int(b)
                                             for b in bits[1:]]))
    return layers


def build_train_config(block, seed, probe_size=None):
    block = dict(block)
    block["attack"] = attack_from_dict(block["attack"])
    if block.get("eval_attack") is not None:
        block["eval_attack"] = attack_from_dict(block["eval_attack"])
    if block.get("probe_attack") is not None:
        block["probe_attack"] = attack_from_dict(block["probe_attack"])
    if probe_size is not None:
        block["probe_size"] = probe_size
    block.pop("final_eval", None)
    return TrainConfig(seed=seed, **block)


def validate_config(cfg):
    """Dry-run schema and cross-field checks; returns a list of problems."""
    problems = []
    if not isinstance(cfg, dict):
        return ["config root must be a JSON object"]
    kind = cfg.get("kind")
    if kind not in KINDS:
        problems.append(f"kind: must be one of {KINDS}, got {kind!r}")
        return problems
    seeds = cfg.get("seeds")
    if not (isinstance(seeds, list) and seeds
            and all(isinstance(s, int) for s in seeds)):
        problems.append("seeds: must be a non-empty list of integers")
    needs_dataset = kind not in ("norm_study",)
    if needs_dataset:
        if "dataset" not in cfg:
            problems.append("dataset: required for this kind")
        else:
            try:
                build_dataset(cfg["dataset"], seed=0)
            except FileNotFoundError as e:
                problems.append(f"dataset: {e}")
            except (ValueError, KeyError, TypeError) as e:
                problems.append(f"dataset: {e}")
        if "model" not in cfg:
            problems.append("model: required for this kind")
    if kind in ("train", "rank_study", "loss_surface", "eps_sweep",
                "alpha_k_sweep"):
        if "train" not in cfg:
            problems.append("train: required for this kind")
        else:
            try:
                build_train_config(cfg["train"], seed=0)
            except (ValueError, KeyError, TypeError) as e:
                problems.append(f"train: {e}")
    if kind in ("norm_study", "step_size_study", "eps_sweep", "alpha_k_sweep"):
        specs = cfg.get("attacks")
        if not (isinstance(specs, list) and specs):
            problems.append("attacks: must be a non-empty list for this kind")
        else:
            for i, d in enumerate(specs):
                try:
                    spec = attack_from_dict(d)
                    if kind == "norm_study" and spec.method not in (
                            "fgsm", "rs_fgsm", "n_fgsm"):
                        problems.append(
                            f"attacks[{i}]: no closed-form norm for {spec.method}")
                    if kind == "step_size_study" and spec.method not in STEP_SIZE_METHODS:
                        problems.append(
                            f"attacks[{i}]: {spec.method} has no single noise "
                            f"draw to compare against")
                except (ValueError, TypeError) as e:
                    problems.append(f"attacks[{i}]: {e}")
    if kind == "norm_study":
        p = cfg.get("params", {})
        if not isinstance(p.get("d", 3072), int) or p.get("d", 3072) < 1:
            problems.append("params.d: must be a positive integer")
    return problems


def canonical_json(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg):
    """sha256 over the semantic config: out_dir does not change results."""
    import hashlib
    semantic = {k: v for k, v in cfg.items() if k != "out_dir"}
    return hashlib.sha256(canonical_json(semantic).encode()).hexdigest()
