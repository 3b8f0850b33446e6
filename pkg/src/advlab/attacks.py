"""Perturbation generators under the l-infinity threat model.

All single-step methods are instances of one update rule: draw noise eta,
take one signed gradient step of size alpha at the noisy point, then either
project the total perturbation back onto the epsilon ball or leave it alone.
Presets pin the (noise distribution, bound, projection) combination for each
named method; the constructor rejects contradictory settings.

Every generator is pure given (model params, batch, spec incl. seed): noise is
drawn from per-sample streams split off (seed, sample index), so results do
not depend on batch traversal order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn

METHODS = ("fgsm", "rs_fgsm", "r_plus_fgsm", "n_fgsm", "pgd",
           "zero_grad", "multi_grad", "rand_alpha", "noise_only")
NOISE_DISTS = ("uniform", "gaussian_matched", "bernoulli_sign", "none")

SINGLE_STEP = tuple(m for m in METHODS if m != "pgd")


@dataclass(frozen=True)
class AttackSpec:
    """Full parameterization of a perturbation generator.

    Field names are the stable config-file contract. Fields left as None are
    filled with the method preset's defaults; explicitly contradicting a
    preset-pinned field raises.
    """

    method: str
    epsilon: float
    alpha: float = None
    noise_bound: float = None
    noise_dist: str = None
    project_eps_ball: bool = None
    clamp_data_range: tuple = None
    steps: int = None
    restarts: int = None
    quantile_q: float = None
    grad_points: int = None
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        eps = float(self.epsilon)

        def put(name, value):
            if getattr(self, name) is None:
                object.__setattr__(self, name, value)

        def pin(name, value):
            cur = getattr(self, name)
            if cur is not None and cur != value:
                raise ValueError(
                    f"{self.method} preset pins {name}={value!r}, got {cur!r}")
            object.__setattr__(self, name, value)

        m = self.method
        if m == "fgsm":
            put("alpha", eps)
            pin("noise_dist", "none")
            pin("noise_bound", 0.0)
            pin("project_eps_ball", False)
        elif m == "rs_fgsm":
            put("alpha", 1.25 * eps)
            pin("noise_dist", "uniform")
            pin("noise_bound", eps)
            pin("project_eps_ball", True)
        elif m == "r_plus_fgsm":
            put("alpha", 0.5 * eps)
            pin("noise_dist", "bernoulli_sign")
            pin("noise_bound", eps - self.alpha)
            pin("project_eps_ball", True)
        elif m == "n_fgsm":
            put("alpha", eps)
            put("noise_bound", 2.0 * eps)
            put("noise_dist", "uniform")  # gaussian_matched is the documented variant
            pin("project_eps_ball", False)
        elif m == "noise_only":
            pin("alpha", 0.0)
            put("noise_bound", 2.0 * eps)
            put("noise_dist", "uniform")
            pin("project_eps_ball", False)
        elif m == "pgd":
            put("alpha", eps / 4.0)
            put("steps", 50)
            put("restarts", 10)
            pin("noise_dist", "uniform")
            pin("noise_bound", eps)
            pin("project_eps_ball", True)
        elif m == "zero_grad":
            put("alpha", 1.25 * eps)
            put("quantile_q", 0.0)
            pin("noise_dist", "uniform")
            pin("noise_bound", eps)
            pin("project_eps_ball", True)
        elif m == "multi_grad":
            put("alpha", eps)
            put("grad_points", 3)
            pin("noise_dist", "uniform")
            pin("noise_bound", eps)
            pin("project_eps_ball", True)
        elif m == "rand_alpha":
            put("alpha", 1.25 * eps)
            pin("noise_dist", "uniform")
            pin("noise_bound", eps)
            pin("project_eps_ball", True)
        if m != "pgd":
            pin("steps", 1)
            pin("restarts", 1)
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.noise_bound < 0:
            raise ValueError("noise_bound must be >= 0")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be >= 1")
        if self.quantile_q is not None and not 0.0 <= self.quantile_q <= 1.0:
            raise ValueError("quantile_q must be in [0, 1]")
        if self.grad_points is not None and self.grad_points < 1:
            raise ValueError("grad_points must be >= 1")
        if self.clamp_data_range is not None:
            lo, hi = self.clamp_data_range
            if not lo < hi:
                raise ValueError("clamp_data_range must satisfy lo < hi")
            object.__setattr__(self, "clamp_data_range", (float(lo), float(hi)))

    @property
    def gaussian_sigma(self):
        """Std of the matched Gaussian: same variance as Uniform[-b, b]."""
        return self.noise_bound / np.sqrt(3.0)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass
class PerturbationBatch:
    """One attack's output. adversarial_inputs is inputs + delta before any
    data-range clamp; the clamped version (if requested) is kept separately."""

    delta: np.ndarray
    adversarial_inputs: np.ndarray
    noise_part: np.ndarray
    passes_used: tuple
    clamped_inputs: np.ndarray = None
    misclassified_any: np.ndarray = None

    def training_inputs(self):
        return self.adversarial_inputs if self.clamped_inputs is None else self.clamped_inputs


def _rng(seed, sample, tag=0):
    return np.random.default_rng(np.random.SeedSequence(
        entropy=int(seed), spawn_key=(int(tag), int(sample))))


def draw_noise(dist, bound, n, shape, seed, tag=0):
    """Per-sample noise draws; stream (seed, tag, i) feeds sample i only."""
    out = np.zeros((n,) + tuple(shape))
    if dist == "none":
        return out
    if dist not in NOISE_DISTS:
        raise ValueError(f"unknown noise distribution {dist!r}")
    sigma = bound / np.sqrt(3.0)
    for i in range(n):
        rng = _rng(seed, i, tag)
        if dist == "uniform":
            out[i] = rng.uniform(-bound, bound, shape)
        elif dist == "gaussian_matched":
            out[i] = rng.normal(0.0, sigma, shape)
        else:  # bernoulli_sign
            out[i] = bound * np.sign(rng.standard_normal(shape))
    return out


def _finish(spec, inputs, delta, eta, passes, missed=None):
    adv = inputs + delta
    clamped = None
    if spec.clamp_data_range is not None:
        lo, hi = spec.clamp_data_range
        clamped = np.clip(adv, lo, hi)
    return PerturbationBatch(delta, adv, eta, passes, clamped, missed)


def single_step_attack(model, batch, spec):
    """One noise draw + one signed gradient step, per the method's preset.

    Records exactly 1 forward + 1 backward pass (grad_points F/B for
    multi_grad, none for noise_only).
    """
    if spec.method not in SINGLE_STEP:
        raise ValueError(f"{spec.method} is not a single-step method")
    if spec.method == "zero_grad":
        return zero_grad_attack(model, batch, spec.epsilon, spec.alpha,
                                spec.quantile_q, spec.seed, spec=spec)
    if spec.method == "multi_grad":
        return multi_grad_attack(model, batch, spec.epsilon, spec.alpha,
                                 spec.grad_points, spec.seed, spec=spec)
    if spec.method == "rand_alpha":
        return rand_alpha_attack(model, batch, spec.epsilon, spec.seed, spec=spec)

    x = batch.inputs
    n = len(batch.labels)
    before = model.counter.snapshot()
    eta = draw_noise(spec.noise_dist, spec.noise_bound, n, x.shape[1:], spec.seed)
    if spec.method == "noise_only":
        delta = eta.copy()
    else:
        g, _ = nn.loss_and_input_gradient(model, x + eta, batch.labels)
        delta = eta + spec.alpha * np.sign(g)
    if spec.project_eps_ball:
        delta = np.clip(delta, -spec.epsilon, spec.epsilon)
    after = model.counter.snapshot()
    passes = (after[0] - before[0], after[1] - before[1])
    return _finish(spec, x, delta, eta, passes)


def n_fgsm(model, batch, eps, alpha=None, noise_bound=None, seed=0,
           clamp_data_range=None):
    """Noise-augmented single step: x_aug = x + eta, eta ~ U[-b, b]^d, then a
    full alpha sign step from x_aug with no projection back to the eps ball.
    Defaults alpha = eps, b = 2 eps."""
    spec = AttackSpec(method="n_fgsm", epsilon=eps, alpha=alpha,
                      noise_bound=noise_bound, seed=seed,
                      clamp_data_range=clamp_data_range)
    return single_step_attack(model, batch, spec)


def zero_grad_attack(model, batch, eps, alpha=None, q=0.0, seed=0, spec=None):
    """RS-FGSM with the per-sample smallest gradient coordinates zeroed.

    The floor(q*d) coordinates of least |gradient| take no step; q=0 recovers
    RS-FGSM, q=1 leaves pure projected noise.
    """
    if spec is None:
        spec = AttackSpec(method="zero_grad", epsilon=eps, alpha=alpha,
                          quantile_q=q, seed=seed)
    x = batch.inputs
    n = len(batch.labels)
    d = int(np.prod(x.shape[1:]))
    before = model.counter.snapshot()
    eta = draw_noise("uniform", spec.noise_bound, n, x.shape[1:], spec.seed)
    g, _ = nn.loss_and_input_gradient(model, x + eta, batch.labels)
    gf = g.reshape(n, d)
    k = int(np.floor(spec.quantile_q * d))
    if k > 0:
        order = np.argsort(np.abs(gf), axis=1, kind="stable")
        masked = gf.copy()
        np.put_along_axis(masked, order[:, :k], 0.0, axis=1)
        gf = masked
    delta = eta + spec.alpha * np.sign(gf).reshape(g.shape)
    delta = np.clip(delta, -spec.epsilon, spec.epsilon)
    after = model.counter.snapshot()
    return _finish(spec, x, delta, eta,
                   (after[0] - before[0], after[1] - before[1]))


def multi_grad_attack(model, batch, eps, alpha=None, n_points=3, seed=0, spec=None):
    """Signed step only where all n_points noisy gradients agree in sign."""
    if spec is None:
        spec = AttackSpec(method="multi_grad", epsilon=eps, alpha=alpha,
                          grad_points=n_points, seed=seed)
    x = batch.inputs
    n = len(batch.labels)
    before = model.counter.snapshot()
    signs = []
    etas = []
    for p in range(spec.grad_points):
        eta = draw_noise("uniform", spec.noise_bound, n, x.shape[1:], spec.seed, tag=p)
        g, _ = nn.loss_and_input_gradient(model, x + eta, batch.labels)
        signs.append(np.sign(g))
        etas.append(eta)
    stack = np.stack(signs)
    unanimous = np.all(stack == stack[0], axis=0)
    direction = stack[0] * unanimous
    delta = np.clip(spec.alpha * direction, -spec.epsilon, spec.epsilon)
    after = model.counter.snapshot()
    return _finish(spec, x, delta, np.stack(etas),
                   (after[0] - before[0], after[1] - before[1]))


def rand_alpha_attack(model, batch, eps, seed=0, spec=None, t_override=None):
    """RS-FGSM perturbation scaled by a per-sample scalar t ~ U[0, 1]."""
    if spec is None:
        spec = AttackSpec(method="rand_alpha", epsilon=eps, seed=seed)
    base = AttackSpec(method="rs_fgsm", epsilon=spec.epsilon, alpha=spec.alpha,
                      clamp_data_range=spec.clamp_data_range, seed=spec.seed)
    pb = single_step_attack(model, batch, base)
    n = len(batch.labels)
    if t_override is None:
        t = np.array([_rng(spec.seed, i, tag=1).uniform(0.0, 1.0) for i in range(n)])
    else:
        t = np.asarray(t_override, dtype=np.float64)
    shaped = t.reshape((n,) + (1,) * (batch.inputs.ndim - 1))
    delta = shaped * pb.delta
    return _finish(spec, batch.inputs, delta, pb.noise_part, pb.passes_used)


def pgd(model, batch, eps, alpha=None, steps=50, restarts=10, seed=0,
        clamp_data_range=None, zero_init=False):
    """Projected gradient descent with random restarts.

    Per sample the max-final-loss restart's delta is kept; a sample counts as
    successfully attacked if any restart misclassifies it. Each restart costs
    steps F/B plus one final evaluation forward.
    """
    spec = AttackSpec(method="pgd", epsilon=eps, alpha=alpha, steps=steps,
                      restarts=restarts, seed=seed,
                      clamp_data_range=clamp_data_range)
    x = batch.inputs
    labels = batch.labels
    n = len(labels)
    lo_hi = spec.clamp_data_range
    before = model.counter.snapshot()
    best_loss = np.full(n, -np.inf)
    best_delta = np.zeros_like(x)
    best_eta = np.zeros_like(x)
    missed_any = np.zeros(n, dtype=bool)
    for r in range(spec.restarts):
        if zero_init:
            eta = np.zeros_like(x)
        else:
            eta = draw_noise("uniform", spec.epsilon, n, x.shape[1:], spec.seed, tag=r)
        delta = eta.copy()
        for _ in range(spec.steps):
            g, _ = nn.loss_and_input_gradient(model, x + delta, labels)
            delta = np.clip(delta + spec.alpha * np.sign(g), -spec.epsilon, spec.epsilon)
            if lo_hi is not None:
                delta = np.clip(x + delta, lo_hi[0], lo_hi[1]) - x
        z = model.logits(x + delta)
        m = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - m).sum(axis=1, keepdims=True)) + m
        final_loss = lse[:, 0] - z[np.arange(n), labels]
        missed_any |= z.argmax(axis=1) != labels
        improved = final_loss > best_loss
        best_loss[improved] = final_loss[improved]
        best_delta[improved] = delta[improved]
        best_eta[improved] = eta[improved]
    after = model.counter.snapshot()
    return _finish(spec, x, best_delta, best_eta,
                   (after[0] - before[0], after[1] - before[1]), missed_any)


def generate(model, batch, spec):
    """Run the attack described by spec (dispatches pgd vs single-step)."""
    if spec.method == "pgd":
        return pgd(model, batch, spec.epsilon, spec.alpha, spec.steps,
                   spec.restarts, spec.seed, spec.clamp_data_range)
    return single_step_attack(model, batch, spec)


def robust_accuracy(model, batch, spec):
    """Accuracy under the attack; for pgd a sample survives only if no
    restart misclassifies it."""
    pb = generate(model, batch, spec)
    if pb.misclassified_any is not None:
        return float(np.mean(~pb.misclassified_any))
    return nn.accuracy(model, pb.training_inputs(), batch.labels)
