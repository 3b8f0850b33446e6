"""Quantitative instruments: closed-form expected perturbation norms and their
Monte Carlo checks, effective step size after projection, effective rank of
perturbation histories, gradient-alignment statistics, and loss-surface grids.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attacks, nn


@dataclass(frozen=True)
class NormFormulaInput:
    d: int
    eps: float
    alpha: float
    noise_bound: float

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be a positive integer")
        for name in ("eps", "alpha", "noise_bound"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0")


def expected_sq_norm(method, inp):
    """Closed-form E[||delta||_2^2] for single-step perturbations.

    noise-augmented step (no projection): d (b^2/3 + alpha^2)
    plain sign step:                      d eps^2
    noisy step projected to the ball:     d (-alpha^3/(6 eps) + alpha^2/2 + eps^2/3)
    """
    d, eps, a, b = inp.d, inp.eps, inp.alpha, inp.noise_bound
    if method == "n_fgsm":
        return d * (b * b / 3.0 + a * a)
    if method == "fgsm":
        return d * eps * eps
    if method == "rs_fgsm":
        if eps == 0.0:
            raise ZeroDivisionError("rs_fgsm formula requires eps > 0")
        if a > 2.0 * eps:
            raise ValueError("rs_fgsm formula holds for alpha <= 2 eps")
        return d * (-a ** 3 / (6.0 * eps) + a * a / 2.0 + eps * eps / 3.0)
    raise ValueError(f"no closed form for method {method!r}")


def mc_sq_norm(spec, grad_field, samples, seed, chunk=512):
    """Monte Carlo estimate of E[||delta||_2^2] against a fixed sign field.

    delta is built exactly as the spec's update rule would with the given
    gradient signs; valid for any fixed field (the closed forms do not depend
    on it). Returns (mean, standard error).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    s = np.sign(np.asarray(grad_field, dtype=np.float64).reshape(-1))
    d = s.size
    step = spec.alpha * s
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed + seed))
    sigma = spec.noise_bound / np.sqrt(3.0)
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        if spec.noise_dist == "none":
            eta = np.zeros((m, d))
        elif spec.noise_dist == "uniform":
            eta = rng.uniform(-spec.noise_bound, spec.noise_bound, (m, d))
        elif spec.noise_dist == "gaussian_matched":
            eta = rng.normal(0.0, sigma, (m, d))
        else:
            eta = spec.noise_bound * np.sign(rng.standard_normal((m, d)))
        delta = eta + step
        if spec.project_eps_ball:
            delta = np.clip(delta, -spec.epsilon, spec.epsilon)
        sq = (delta * delta).sum(axis=1)
        total += float(sq.sum())
        total_sq += float((sq * sq).sum())
        done += m
    mean = total / samples
    if samples == 1:
        return mean, 0.0
    var = max(0.0, (total_sq - samples * mean * mean) / (samples - 1))
    return mean, np.sqrt(var / samples)


def mc_sq_norm_model(model, batch, spec, samples, seed):
    """Live-gradient Monte Carlo: the sign field is recomputed at each noisy
    point (one F/B per draw). For qualitative comparisons against the fixed
    field estimator."""
    x = batch.inputs
    n = len(batch.labels)
    sq_means = []
    norms = []
    for k in range(samples):
        pb = attacks.generate(model, batch, spec.with_seed(
            int(np.random.SeedSequence(entropy=[spec.seed, seed, k])
                .generate_state(1)[0] >> 1)))
        flat = pb.delta.reshape(n, -1)
        sq = (flat * flat).sum(axis=1)
        sq_means.append(sq.mean())
        norms.append(np.sqrt(sq).mean())
    return {"mean_sq_norm": float(np.mean(sq_means)),
            "mean_norm": float(np.mean(norms)),
            "stderr_sq_norm": float(np.std(sq_means, ddof=1) / np.sqrt(samples))
            if samples > 1 else 0.0}


def effective_step_size(delta_full, delta_random, x):
    """Per-sample ||delta_full - delta_random||_2 / ||x||_2: the part of the
    perturbation contributed by the gradient step rather than the noise."""
    n = delta_full.shape[0]
    df = delta_full.reshape(n, -1)
    dr = delta_random.reshape(n, -1)
    xf = np.asarray(x, dtype=np.float64).reshape(n, -1)
    xn = np.sqrt((xf * xf).sum(axis=1))
    if np.any(xn == 0.0):
        raise ValueError("effective step size undefined for zero-norm x")
    return np.sqrt(((df - dr) ** 2).sum(axis=1)) / xn


@dataclass
class PerturbationHistory:
    """Row-stacked flattened perturbations of one example over an epoch
    interval (rows = epochs)."""
    matrix: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 2:
            raise ValueError("history needs at least 2 rows of equal length")


def effective_rank(history, variance_fraction=0.9, normalize_rows=False):
    """Smallest r such that the top-r singular values explain the requested
    fraction of the squared-singular-value mass. All-zero input has rank 0."""
    if not 0.0 < variance_fraction <= 1.0:
        raise ValueError("variance_fraction must be in (0, 1]")
    m = history.matrix if isinstance(history, PerturbationHistory) else \
        np.asarray(history, dtype=np.float64)
    if normalize_rows:
        norms = np.sqrt((m * m).sum(axis=1, keepdims=True))
        norms[norms == 0.0] = 1.0
        m = m / norms
    if not np.any(m):
        return 0
    sv = np.linalg.svd(m, compute_uv=False)
    energy = sv * sv
    cum = np.cumsum(energy) / energy.sum()
    return int(np.searchsorted(cum, variance_fraction - 1e-12) + 1)


def gram_effective_rank(matrix, variance_fraction=0.9):
    """Independent recomputation of effective_rank via an eigendecomposition
    of the smaller Gram matrix (descending eigenvalues, index tie-break)."""
    m = np.asarray(matrix, dtype=np.float64)
    if not np.any(m):
        return 0
    gram = m @ m.T if m.shape[0] <= m.shape[1] else m.T @ m
    ev = np.linalg.eigvalsh(gram)[::-1]
    ev = np.clip(ev, 0.0, None)
    cum = np.cumsum(ev) / ev.sum()
    return int(np.searchsorted(cum, variance_fraction - 1e-12) + 1)


def grad_alignment_stat(model, batch, eps, samples, seed):
    """Mean cosine between input gradients at clean points and at uniformly
    perturbed neighbors, over `samples` noise draws and the batch.

    Returns (mean cosine, number of skipped zero-gradient pairs).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    n = len(batch.labels)
    g0, _ = nn.loss_and_input_gradient(model, batch.inputs, batch.labels)
    f0 = g0.reshape(n, -1)
    n0 = np.sqrt((f0 * f0).sum(axis=1))
    cos_sum = 0.0
    kept = 0
    skipped = 0
    for k in range(samples):
        eta = attacks.draw_noise("uniform", eps, n, batch.inputs.shape[1:],
                                 seed, tag=k)
        g1, _ = nn.loss_and_input_gradient(model, batch.inputs + eta, batch.labels)
        f1 = g1.reshape(n, -1)
        n1 = np.sqrt((f1 * f1).sum(axis=1))
        ok = (n0 > 0.0) & (n1 > 0.0)
        skipped += int(np.sum(~ok))
        cos = (f0[ok] * f1[ok]).sum(axis=1) / (n0[ok] * n1[ok])
        cos_sum += float(cos.sum())
        kept += int(ok.sum())
    return (cos_sum / kept if kept else 0.0), skipped


def loss_surface_grid(model, x, y, n, eps, seed):
    """n x n losses on the plane spanned by the signed-gradient direction and
    a random sign direction: point (i, j) is x + t1*d_grad + t2*d_rand with
    t1 = i/(n-1), t2 = j/(n-1). Entry (0, 0) is the clean loss."""
    if n < 2:
        raise ValueError("grid resolution must be >= 2")
    x = np.asarray(x, dtype=np.float64)
    if x.shape == model.input_shape:
        x = x[None]
    batch = nn.Batch(x, np.array([y]))
    pb = attacks.single_step_attack(
        model, batch, attacks.AttackSpec(method="fgsm", epsilon=eps, seed=seed))
    d_grad = pb.delta[0]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 1]))
    d_rand = eps * np.sign(rng.standard_normal(x.shape[1:]))
    t = np.linspace(0.0, 1.0, n)
    label = np.array([y], dtype=np.int64)
    grid = np.zeros((n, n))
    # one point per forward: keeps every entry bitwise identical to a
    # standalone loss evaluation of that point (BLAS results vary with the
    # number of rows, so a batched evaluation would not)
    for i in range(n):
        for j in range(n):
            pt = x[0] + t[i] * d_grad + t[j] * d_rand
            grid[i, j] = nn.per_sample_loss(model, pt[None], label)[0]
    return grid
