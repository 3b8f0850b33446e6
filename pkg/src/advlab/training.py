"""Adversarial training loops, optimizer, schedules, and CO monitoring.

Pass accounting conventions (asserted by the cost tests, never hard-coded):
the model counter ticks once per whole-network forward and once per backward
sweep; differentiating through a recorded gradient sweep (double backprop)
ticks one extra forward and one extra backward per recorded sweep crossed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from . import attacks
from .attacks import AttackSpec
from .data import batches as make_batches

PROBE_EVAL_BATCH = 256


def derive_seed(*parts):
    """Stable 63-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence(entropy=list(parts)).generate_state(1)[0] >> 1)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    attack: AttackSpec
    lr_max: float = 0.2
    schedule: str = "cyclic_fast"
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_align_lambda: float = 0.0
    free_at_replays: int = 1
    eval_attack: AttackSpec = None
    probe_size: int = 512
    probe_attack: AttackSpec = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.schedule not in ("cyclic_fast", "long_piecewise"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.free_at_replays < 1:
            raise ValueError("free_at_replays must be >= 1")
        if self.free_at_replays > 1 and self.attack.method != "fgsm":
            raise ValueError("free_at_replays requires the fgsm attack")
        eps = self.attack.epsilon
        if self.eval_attack is None:
            self.eval_attack = AttackSpec(
                method="pgd", epsilon=eps,
                clamp_data_range=self.attack.clamp_data_range)
        if self.probe_attack is None:
            self.probe_attack = AttackSpec(
                method="pgd", epsilon=eps, steps=40, restarts=1,
                clamp_data_range=self.attack.clamp_data_range)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    clean_acc: float
    attack_train_acc: float
    pgd_eval_acc: float
    mean_input_grad_norm: float
    forward_passes: int
    backward_passes: int
    co_flag: bool

    FIELDS = ("epoch", "train_loss", "clean_acc", "attack_train_acc",
              "pgd_eval_acc", "mean_input_grad_norm", "forward_passes",
              "backward_passes", "co_flag")

    def row(self):
        return [getattr(self, f) for f in self.FIELDS]


def cyclic_lr(it, total, lr_max):
    """Triangular one-cycle: 0 -> lr_max over the first half, back to 0."""
    if not 0 <= it < total:
        raise ValueError("iteration outside schedule range")
    frac = it / total
    return lr_max * 2.0 * frac if frac <= 0.5 else lr_max * 2.0 * (1.0 - frac)


def long_piecewise_lr(it, total, lr_max):
    """Constant lr with x0.1 drops at 50% and 75% of the run."""
    if not 0 <= it < total:
        raise ValueError("iteration outside schedule range")
    frac = it / total
    if frac < 0.5:
        return lr_max
    if frac < 0.75:
        return 0.1 * lr_max
    return 0.01 * lr_max


def schedule_lr(name, it, total, lr_max):
    fn = cyclic_lr if name == "cyclic_fast" else long_piecewise_lr
    return fn(it, total, lr_max)


class SGD:
    """SGD with momentum; weight decay is added to the gradient before the
    momentum update."""

    def __init__(self, model, momentum=0.9, weight_decay=5e-4):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p) for k, p in model.params.items()}

    def step(self, grads, lr):
        for k, p in self.model.params.items():
            g = grads[k] + self.weight_decay * p
            self.velocity[k] = self.momentum * self.velocity[k] + g
            self.model.params[k] = p - lr * self.velocity[k]


class Adam:
    """Adam with bias correction; weight decay added to the gradient.

    The desk-scale image runs at large radii need this: plain SGD falls into
    the constant-classifier attractor before any features form.
    """

    def __init__(self, model, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=5e-4):
        self.model = model
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p) for k, p in model.params.items()}
        self.v = {k: np.zeros_like(p) for k, p in model.params.items()}
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.model.params.items():
            g = grads[k] + self.weight_decay * p
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            self.model.params[k] = p - lr * (self.m[k] / c1) / (
                np.sqrt(self.v[k] / c2) + self.eps)


def make_optimizer(model, cfg):
    if cfg.optimizer == "adam":
        return Adam(model, weight_decay=cfg.weight_decay)
    return SGD(model, cfg.momentum, cfg.weight_decay)


def param_gradients(model, root, staged):
    """Backward from a scalar loss to all staged parameters.

    Counts one backward pass, plus one forward and one backward per recorded
    gradient sweep the differentiation crossed (second-order traversals).
    """
    names = list(staged.keys())
    res = ad.backward(root, [staged[k] for k in names])
    model.counter.backward += 1
    model.counter.forward += res.sweeps_crossed
    model.counter.backward += res.sweeps_crossed
    return {k: g.value for k, g in zip(names, res.grads)}


def grad_align_term(model, batch, eps, seed, tape=None, staged=None):
    """Mean misalignment 1 - cos between input gradients at x and x + eta,
    eta ~ U[-eps, eps]^d, built so its parameter gradient exists.

    Samples where either gradient norm is below 1e-12, or where the cosine is
    within 1e-12 of 1, are treated as aligned and contribute exactly 0.
    Accounts 2 forward and 2 backward passes; the later second-order sweep
    through the recorded gradients accounts 2 more of each.
    """
    if tape is None:
        tape = ad.Tape()
    if staged is None:
        staged = model.stage(tape)
    x = batch.inputs
    labels = batch.labels
    n = len(labels)
    d = int(np.prod(x.shape[1:]))
    eta = attacks.draw_noise("uniform", eps, n, x.shape[1:], seed, tag=2)

    _, ce1, x1, _ = nn.loss_graph(model, x, labels, tape, staged)
    _, ce2, x2, _ = nn.loss_graph(model, x + eta, labels, tape, staged)
    g1 = ad.backward(ad.tsum(ce1), [x1], create_graph=True).grads[0]
    g2 = ad.backward(ad.tsum(ce2), [x2], create_graph=True).grads[0]
    model.counter.backward += 2

    f1 = ad.reshape(g1, (n, d))
    f2 = ad.reshape(g2, (n, d))
    dot = ad.tsum(ad.mul(f1, f2), axis=1)
    n1 = ad.sqrt(ad.tsum(ad.mul(f1, f1), axis=1))
    n2 = ad.sqrt(ad.tsum(ad.mul(f2, f2), axis=1))
    norms_ok = (n1.value > 1e-12) & (n2.value > 1e-12)
    # keep the division finite for zero-norm samples; they are masked out below
    denom = ad.add(ad.mul(n1, n2), tape.const((~norms_ok).astype(np.float64)))
    cos = ad.div(dot, denom)
    mask = norms_ok & ((1.0 - cos.value) >= 1e-12)
    gap = ad.sub(tape.const(np.ones(n)), cos)
    return ad.tsum(ad.mul(gap, tape.const(mask.astype(np.float64)))) * (1.0 / n)


def co_monitor(history, drop=0.30, floor=0.01):
    """True if any epoch shows the CO signature: multi-step probe accuracy
    below `floor` while single-step robust accuracy exceeds it by >= `drop`."""
    if not history:
        raise ValueError("history must be non-empty")
    return any(r.pgd_eval_acc < floor
               and (r.attack_train_acc - r.pgd_eval_acc) >= drop
               for r in history)


PROBE_SPLIT_SEED = 0xAD5917  # fixed: the probe split is part of the protocol


def _split_probe(data, probe_size):
    """Deterministic held-out probe split (pass a (train, probe) tuple to
    control it explicitly). Class-ordered datasets make a tail split
    single-class, hence the fixed permutation."""
    if isinstance(data, tuple):
        return data
    n = len(data.labels)
    take = min(probe_size, max(1, n // 4))
    order = np.random.default_rng(
        np.random.SeedSequence([PROBE_SPLIT_SEED, n])).permutation(n)
    return data.subset(order[:n - take]), data.subset(order[n - take:])


def _batched_robust_acc(model, ds, spec, batch_size=PROBE_EVAL_BATCH):
    hits = 0
    for i in range(0, len(ds.labels), batch_size):
        b = nn.Batch(ds.inputs[i:i + batch_size], ds.labels[i:i + batch_size])
        hits += attacks.robust_accuracy(model, b, spec) * len(b.labels)
    return hits / len(ds.labels)


def _batched_clean_acc(model, ds, batch_size=PROBE_EVAL_BATCH):
    hits = 0
    for i in range(0, len(ds.labels), batch_size):
        z = model.logits(ds.inputs[i:i + batch_size])
        hits += int(np.sum(z.argmax(axis=1) == ds.labels[i:i + batch_size]))
    return hits / len(ds.labels)


def _mean_grad_norm(model, ds, batch_size=PROBE_EVAL_BATCH):
    total = 0.0
    for i in range(0, len(ds.labels), batch_size):
        b = nn.Batch(ds.inputs[i:i + batch_size], ds.labels[i:i + batch_size])
        g = nn.input_gradient(model, b)
        total += float(np.sqrt((g.reshape(len(b.labels), -1) ** 2).sum(axis=1)).sum())
    return total / len(ds.labels)


def _single_step_probe_spec(cfg, seed):
    base = cfg.attack
    if base.method == "pgd":
        base = AttackSpec(method="fgsm", epsilon=base.epsilon,
                          clamp_data_range=base.clamp_data_range)
    return base.with_seed(seed)


def _epoch_record(model, cfg, probe, epoch, train_loss, history):
    clean = _batched_clean_acc(model, probe)
    ss_spec = _single_step_probe_spec(cfg, derive_seed(cfg.seed, epoch, 1))
    ss_acc = _batched_robust_acc(model, probe, ss_spec)
    probe_spec = cfg.probe_attack.with_seed(derive_seed(cfg.seed, epoch, 2))
    pgd_acc = _batched_robust_acc(model, probe, probe_spec)
    gnorm = _mean_grad_norm(model, probe)
    rec = MetricsRecord(epoch, train_loss, clean, ss_acc, pgd_acc, gnorm,
                        model.counter.forward, model.counter.backward, False)
    rec.co_flag = co_monitor(history + [rec])
    return rec


def adv_train(model, data, cfg, epoch_hook=None):
    """Adversarially train per cfg; returns (model, records, best_params).

    best_params are the parameters at the epoch with the highest probe
    multi-step accuracy (early-stopping support). epoch_hook(model, epoch)
    runs after each epoch's evaluation (used by the analysis runners).
    """
    train, probe = _split_probe(data, cfg.probe_size)
    n = len(train.labels)
    iters_per_epoch = -(-n // cfg.batch_size)
    total_iters = cfg.epochs * iters_per_epoch
    opt = make_optimizer(model, cfg)
    records = []
    best_params = model.clone_params()
    best_acc = -1.0
    it = 0
    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        for b in make_batches(train, cfg.batch_size, shuffle=True,
                              epoch_seed=derive_seed(cfg.seed, epoch)):
            spec = cfg.attack.with_seed(derive_seed(cfg.seed, epoch, it, 3))
            pb = attacks.generate(model, b, spec)
            tape, ce, _, staged = nn.loss_graph(model, pb.training_inputs(), b.labels)
            root = ad.tsum(ce) * (1.0 / len(b.labels))
            if cfg.grad_align_lambda > 0.0:
                term = grad_align_term(model, b, cfg.attack.epsilon,
                                       derive_seed(cfg.seed, epoch, it, 4),
                                       tape=tape, staged=staged)
                root = ad.add(root, term * cfg.grad_align_lambda)
            grads = param_gradients(model, root, staged)
            opt.step(grads, schedule_lr(cfg.schedule, it, total_iters, cfg.lr_max))
            loss_sum += float(root.value) * len(b.labels)
            it += 1
        records.append(_epoch_record(model, cfg, probe, epoch + 1,
                                     loss_sum / n, records))
        if records[-1].pgd_eval_acc > best_acc:
            best_acc = records[-1].pgd_eval_acc
            best_params = model.clone_params()
        if epoch_hook is not None:
            epoch_hook(model, epoch + 1)
    return model, records, best_params


def free_at_train(model, data, cfg):
    """Free adversarial training: replay each minibatch m times, one combined
    F/B per replay yielding both the weight update and the delta update.

    The epoch count is scaled to 2*epochs/m so the total pass budget matches
    standard single-step training of cfg.epochs epochs.
    """
    m = cfg.free_at_replays
    train, probe = _split_probe(data, cfg.probe_size)
    n = len(train.labels)
    epochs = max(1, round(2 * cfg.epochs / m))
    iters_per_epoch = -(-n // cfg.batch_size)
    total_updates = epochs * iters_per_epoch * m
    eps = cfg.attack.epsilon
    lo_hi = cfg.attack.clamp_data_range
    opt = make_optimizer(model, cfg)
    delta = np.zeros((cfg.batch_size,) + train.inputs.shape[1:])
    records = []
    upd = 0
    for epoch in range(epochs):
        loss_sum = 0.0
        seen = 0
        for b in make_batches(train, cfg.batch_size, shuffle=True,
                              epoch_seed=derive_seed(cfg.seed, epoch)):
            nb = len(b.labels)
            d = delta[:nb]
            for _ in range(m):
                x_adv = b.inputs + d
                if lo_hi is not None:
                    x_adv = np.clip(x_adv, lo_hi[0], lo_hi[1])
                tape, ce, x_t, staged = nn.loss_graph(model, x_adv, b.labels)
                root = ad.tsum(ce) * (1.0 / nb)
                names = list(staged.keys())
                res = ad.backward(root, [staged[k] for k in names] + [x_t])
                model.counter.backward += 1
                grads = {k: g.value for k, g in zip(names, res.grads)}
                gx = res.grads[-1].value
                opt.step(grads, schedule_lr(cfg.schedule, upd, total_updates,
                                            cfg.lr_max))
                d = np.clip(d + eps * np.sign(gx), -eps, eps)
                if lo_hi is not None:
                    d = np.clip(b.inputs + d, lo_hi[0], lo_hi[1]) - b.inputs
                loss_sum += float(root.value) * nb
                upd += 1
            delta[:nb] = d
            seen += nb
        records.append(_epoch_record(model, cfg, probe, epoch + 1,
                                     loss_sum / (seen * m), records))
    return model, records


def metrics_to_csv(records, fh, header_prefix=None):
    """One CSV row per epoch, columns in MetricsRecord field order."""
    if header_prefix:
        fh.write(header_prefix)
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(MetricsRecord.FIELDS)
    for r in records:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                         and not isinstance(v, bool) else v for v in r.row()])
