import numpy as np
import pytest

from advlab import attacks, data, nn
from advlab.attacks import AttackSpec


@pytest.fixture
def mlp_batch(rng):
    ds = data.synth_two_moons(200, 0.02, seed=4)
    model = nn.desk_mlp(2, 2, seed=1)
    b = next(data.batches(ds, 64, shuffle=True, epoch_seed=7))
    return model, b


def linear_two_class(d, seed=0, scale=1.0):
    model = nn.build_model([("dense", d, 2)], (d,), seed=seed)
    model.params["l0.w"] *= scale
    return model


# ---------------------------------------------------------------------------
# spec construction rules

def test_spec_preset_defaults():
    s = AttackSpec(method="n_fgsm", epsilon=0.2)
    assert s.alpha == 0.2 and s.noise_bound == 0.4
    assert s.noise_dist == "uniform" and s.project_eps_ball is False
    p = AttackSpec(method="pgd", epsilon=0.2)
    assert (p.steps, p.restarts) == (50, 10) and p.alpha == 0.05
    r = AttackSpec(method="rs_fgsm", epsilon=0.2)
    assert r.alpha == 0.25 and r.project_eps_ball is True


def test_spec_rejects_preset_violations():
    with pytest.raises(ValueError):
        AttackSpec(method="rs_fgsm", epsilon=0.1, project_eps_ball=False)
    with pytest.raises(ValueError):
        AttackSpec(method="fgsm", epsilon=0.1, noise_dist="uniform")
    with pytest.raises(ValueError):
        AttackSpec(method="pgd", epsilon=0.1, restarts=0)
    with pytest.raises(ValueError):
        AttackSpec(method="fgsm", epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackSpec(method="unknown", epsilon=0.1)


def test_gaussian_sigma_matches_uniform_variance():
    s = AttackSpec(method="n_fgsm", epsilon=0.1, noise_dist=None)
    assert np.isclose(s.gaussian_sigma, s.noise_bound / np.sqrt(3.0))


# ---------------------------------------------------------------------------
# single-step family

def test_zero_gradient_gives_zero_fgsm_delta():
    model = nn.build_model([("dense", 3, 4), ("relu",), ("dense", 4, 2)], (3,), seed=0)
    model.params["l2.w"][:] = 0.0
    model.params["l2.b"][:] = 0.0
    b = nn.Batch(np.full((4, 3), 0.5), np.array([0, 1, 0, 1]))
    pb = attacks.single_step_attack(model, b, AttackSpec(method="fgsm", epsilon=0.3))
    assert np.array_equal(pb.delta, np.zeros((4, 3)))
    assert np.array_equal(pb.adversarial_inputs, b.inputs)


def test_rs_fgsm_projection_saturation():
    """Noise at +eps on a coordinate with positive gradient sign: clipping
    absorbs the whole step, the coordinate stays at +eps."""
    model = linear_two_class(3, seed=2)
    x = np.array([[0.2, 0.4, 0.6]])
    y = np.array([0])
    g = nn.input_gradient(model, nn.Batch(x, y))
    eps = 0.1
    eta = eps * np.sign(g)  # saturating noise aligned with the gradient sign
    delta = np.clip(eta + 1.25 * eps * np.sign(g), -eps, eps)
    assert np.array_equal(np.abs(delta[g != 0]), np.full((g != 0).sum(), eps))


@pytest.mark.parametrize("method", ["rs_fgsm", "r_plus_fgsm", "zero_grad",
                                    "multi_grad", "rand_alpha"])
def test_eps_ball_methods_respect_radius(mlp_batch, method):
    model, b = mlp_batch
    eps = 0.15
    for seed in range(20):
        spec = AttackSpec(method=method, epsilon=eps, seed=seed)
        pb = attacks.single_step_attack(model, b, spec)
        assert np.abs(pb.delta).max() <= eps + 1e-12


def test_pgd_respects_radius(mlp_batch):
    model, b = mlp_batch
    pb = attacks.pgd(model, b, eps=0.12, steps=5, restarts=2, seed=3)
    assert np.abs(pb.delta).max() <= 0.12 + 1e-12


def test_n_fgsm_bound_and_saturating_witness(mlp_batch):
    model, b = mlp_batch
    eps = 0.1
    for seed in range(30):
        pb = attacks.n_fgsm(model, b, eps, seed=seed)
        assert np.abs(pb.delta).max() <= 2 * eps + eps + 1e-12
    # witness: noise at +b where the gradient sign is +1 attains b + alpha
    g = nn.input_gradient(model, b)
    eta = 2 * eps * np.sign(g)
    delta = eta + eps * np.sign(g)
    attained = np.abs(delta)[np.sign(g) != 0]
    assert attained.max() >= 3 * eps - 1e-12


def test_n_fgsm_zero_noise_reduces_to_fgsm_bitwise(mlp_batch):
    model, b = mlp_batch
    pb_n = attacks.n_fgsm(model, b, 0.2, noise_bound=0.0, seed=11)
    pb_f = attacks.single_step_attack(model, b, AttackSpec(method="fgsm", epsilon=0.2, seed=11))
    assert np.array_equal(pb_n.delta, pb_f.delta)
    assert np.array_equal(pb_n.adversarial_inputs, pb_f.adversarial_inputs)


def test_n_fgsm_zero_alpha_returns_noise_exactly(mlp_batch):
    model, b = mlp_batch
    pb = attacks.n_fgsm(model, b, 0.2, alpha=0.0, seed=5)
    assert np.array_equal(pb.delta, pb.noise_part)


def test_n_fgsm_gaussian_matched_variant(mlp_batch):
    model, b = mlp_batch
    spec = AttackSpec(method="n_fgsm", epsilon=0.1,
                      noise_dist="gaussian_matched", seed=3)
    assert spec.gaussian_sigma == pytest.approx(0.2 / np.sqrt(3))
    pb = attacks.single_step_attack(model, b, spec)
    got = pb.noise_part.std()
    assert 0.7 * spec.gaussian_sigma < got < 1.3 * spec.gaussian_sigma


def test_attack_determinism_bitwise(mlp_batch):
    model, b = mlp_batch
    for method in ("rs_fgsm", "n_fgsm", "multi_grad", "rand_alpha"):
        spec = AttackSpec(method=method, epsilon=0.1, seed=42)
        p1 = attacks.single_step_attack(model, b, spec)
        p2 = attacks.single_step_attack(model, b, spec)
        assert np.array_equal(p1.delta, p2.delta), method
    s = AttackSpec(method="pgd", epsilon=0.1, steps=3, restarts=2, seed=42)
    assert np.array_equal(attacks.generate(model, b, s).delta,
                          attacks.generate(model, b, s).delta)


def test_noise_independent_of_batch_traversal(mlp_batch):
    """Per-sample streams: sample i draws the same noise in any batch split."""
    model, b = mlp_batch
    full = attacks.draw_noise("uniform", 0.1, 8, (2,), seed=3)
    solo = attacks.draw_noise("uniform", 0.1, 3, (2,), seed=3)
    assert np.array_equal(full[:3], solo)


# ---------------------------------------------------------------------------
# preset recovery: the general update rule reproduces the named presets

def test_preset_recovery_bitwise(mlp_batch):
    model, b = mlp_batch
    eps = 0.11
    for seed in range(50):
        # no noise + identity projection -> plain fgsm
        general = AttackSpec(method="fgsm", epsilon=eps, alpha=eps,
                             noise_dist="none", noise_bound=0.0,
                             project_eps_ball=False, seed=seed)
        preset = AttackSpec(method="fgsm", epsilon=eps, seed=seed)
        assert np.array_equal(attacks.single_step_attack(model, b, general).delta,
                              attacks.single_step_attack(model, b, preset).delta)
        # uniform eps-ball noise + projection -> rs_fgsm
        general = AttackSpec(method="rs_fgsm", epsilon=eps, alpha=1.25 * eps,
                             noise_dist="uniform", noise_bound=eps,
                             project_eps_ball=True, seed=seed)
        preset = AttackSpec(method="rs_fgsm", epsilon=eps, seed=seed)
        assert np.array_equal(attacks.single_step_attack(model, b, general).delta,
                              attacks.single_step_attack(model, b, preset).delta)
        # (eps - alpha) sign-of-gaussian noise + projection -> r_plus_fgsm
        general = AttackSpec(method="r_plus_fgsm", epsilon=eps, alpha=0.5 * eps,
                             noise_dist="bernoulli_sign", noise_bound=0.5 * eps,
                             project_eps_ball=True, seed=seed)
        preset = AttackSpec(method="r_plus_fgsm", epsilon=eps, seed=seed)
        assert np.array_equal(attacks.single_step_attack(model, b, general).delta,
                              attacks.single_step_attack(model, b, preset).delta)


# ---------------------------------------------------------------------------
# baselines

def test_zero_grad_quantile_rank_rule():
    g = np.array([3.0, -1.0, 0.5, -2.0])
    d = 4
    k = int(np.floor(0.5 * d))
    order = np.argsort(np.abs(g), kind="stable")
    masked = g.copy()
    masked[order[:k]] = 0.0
    assert np.array_equal(np.sign(masked), [1.0, 0.0, 0.0, -1.0])


def test_zero_grad_q0_equals_rs_fgsm(mlp_batch):
    model, b = mlp_batch
    pb_z = attacks.single_step_attack(
        model, b, AttackSpec(method="zero_grad", epsilon=0.1, quantile_q=0.0, seed=9))
    pb_r = attacks.single_step_attack(
        model, b, AttackSpec(method="rs_fgsm", epsilon=0.1, seed=9))
    assert np.array_equal(pb_z.delta, pb_r.delta)


def test_zero_grad_q1_is_pure_projected_noise(mlp_batch):
    model, b = mlp_batch
    pb = attacks.single_step_attack(
        model, b, AttackSpec(method="zero_grad", epsilon=0.1, quantile_q=1.0, seed=9))
    assert np.array_equal(pb.delta, np.clip(pb.noise_part, -0.1, 0.1))


def test_multi_grad_unanimity_rule():
    stack = np.sign(np.array([[[1.0, 1.0, -1.0, 0.0]],
                              [[1.0, -1.0, -1.0, 0.0]],
                              [[1.0, 1.0, -1.0, 0.0]]]))
    unanimous = np.all(stack == stack[0], axis=0)
    direction = stack[0] * unanimous
    assert np.array_equal(direction[0], [1.0, 0.0, -1.0, 0.0])


def test_multi_grad_single_point_equals_noisy_fgsm_direction(mlp_batch):
    model, b = mlp_batch
    spec = AttackSpec(method="multi_grad", epsilon=0.1, grad_points=1, seed=3)
    pb = attacks.single_step_attack(model, b, spec)
    eta = attacks.draw_noise("uniform", 0.1, len(b.labels), b.inputs.shape[1:], 3, tag=0)
    g, _ = nn.loss_and_input_gradient(model, b.inputs + eta, b.labels)
    expected = np.clip(spec.alpha * np.sign(g), -0.1, 0.1)
    assert np.array_equal(pb.delta, expected)


def test_multi_grad_identical_gradients_full_step():
    model = linear_two_class(4, seed=3, scale=0.0)  # zero weights
    model.params["l0.w"][:] = np.array([[5.0, -5.0], [-4.0, 4.0],
                                        [3.0, -3.0], [-2.0, 2.0]])
    b = nn.Batch(np.full((2, 4), 0.5), np.array([0, 1]))
    # linear 2-class: the gradient sign field is constant in x
    pb = attacks.single_step_attack(
        model, b, AttackSpec(method="multi_grad", epsilon=0.1, seed=1))
    g = nn.input_gradient(model, b)
    assert np.array_equal(pb.delta, np.clip(0.1 * np.sign(g), -0.1, 0.1))
    assert np.all(np.abs(pb.delta) == 0.1)


def test_rand_alpha_t_overrides(mlp_batch):
    model, b = mlp_batch
    n = len(b.labels)
    pb_one = attacks.rand_alpha_attack(model, b, 0.1, seed=2, t_override=np.ones(n))
    pb_rs = attacks.single_step_attack(model, b, AttackSpec(method="rs_fgsm", epsilon=0.1, seed=2))
    assert np.array_equal(pb_one.delta, pb_rs.delta)
    pb_zero = attacks.rand_alpha_attack(model, b, 0.1, seed=2, t_override=np.zeros(n))
    assert np.array_equal(pb_zero.delta, np.zeros_like(b.inputs))


def test_rand_alpha_radius_property(mlp_batch):
    model, b = mlp_batch
    for seed in range(50):
        pb = attacks.rand_alpha_attack(model, b, 0.1, seed=seed)
        assert np.abs(pb.delta).max() <= 0.1 + 1e-12


# ---------------------------------------------------------------------------
# pgd

def test_pgd_degenerates_to_fgsm_with_zero_init(mlp_batch):
    model, b = mlp_batch
    eps = 0.1
    pb_p = attacks.pgd(model, b, eps, alpha=eps, steps=1, restarts=1, seed=0,
                       zero_init=True)
    pb_f = attacks.single_step_attack(model, b, AttackSpec(method="fgsm", epsilon=eps))
    assert np.array_equal(pb_p.delta, pb_f.delta)


def test_pgd_linear_model_matches_fgsm_loss(rng):
    model = linear_two_class(6, seed=8)
    x = rng.uniform(0.2, 0.8, (12, 6))
    y = rng.integers(0, 2, 12)
    b = nn.Batch(x, y)
    eps = 0.2
    pb_f = attacks.single_step_attack(model, b, AttackSpec(method="fgsm", epsilon=eps))
    loss_f = nn.per_sample_loss(model, pb_f.adversarial_inputs, y)
    pb_p = attacks.pgd(model, b, eps, steps=50, restarts=2, seed=5)
    loss_p = nn.per_sample_loss(model, pb_p.adversarial_inputs, y)
    assert np.abs(loss_f - loss_p).max() < 1e-9


def test_pgd_refines_fgsm_on_trained_net(mlp_batch):
    """More steps find at least as much loss as the single step, sample-wise
    (zero-init trajectories pass through the projected sign direction)."""
    from advlab import training
    model, b = mlp_batch
    ds = data.synth_two_moons(400, 0.02, seed=1)
    cfg = training.TrainConfig(
        epochs=6, batch_size=64, lr_max=0.4, weight_decay=0.0,
        attack=AttackSpec(method="fgsm", epsilon=0.05), probe_size=100, seed=0)
    model2 = nn.desk_mlp(2, 2, seed=3)
    model2, _, _ = training.adv_train(model2, ds, cfg)
    eps = 0.05
    pb_f = attacks.single_step_attack(model2, b, AttackSpec(method="fgsm", epsilon=eps))
    loss_f = nn.per_sample_loss(model2, pb_f.adversarial_inputs, b.labels)
    pb_p = attacks.pgd(model2, b, eps, alpha=eps / 2, steps=10, restarts=1,
                       seed=3, zero_init=True)
    loss_p = nn.per_sample_loss(model2, pb_p.adversarial_inputs, b.labels)
    assert np.all(loss_p >= loss_f - 1e-9)


def test_pgd_any_restart_misclassification(mlp_batch):
    model, b = mlp_batch
    pb = attacks.pgd(model, b, 0.3, steps=5, restarts=3, seed=1)
    assert pb.misclassified_any is not None
    assert pb.misclassified_any.dtype == bool
    acc = attacks.robust_accuracy(model, b, AttackSpec(
        method="pgd", epsilon=0.3, steps=5, restarts=3, seed=1))
    assert acc == 1.0 - pb.misclassified_any.mean()


# ---------------------------------------------------------------------------
# brute-force linear worst case

def test_fgsm_attains_corner_maximum_two_class(rng):
    d = 10
    model = linear_two_class(d, seed=4)
    x = rng.uniform(0.3, 0.7, (6, d))
    y = rng.integers(0, 2, 6)
    eps = 0.15
    pb = attacks.single_step_attack(model, nn.Batch(x, y),
                                    AttackSpec(method="fgsm", epsilon=eps))
    loss_f = nn.per_sample_loss(model, pb.adversarial_inputs, y)
    corners = eps * (2.0 * ((np.arange(2 ** d)[:, None]
                             >> np.arange(d)[None, :]) & 1) - 1.0)
    for i in range(len(y)):
        worst = nn.per_sample_loss(
            model, x[i][None] + corners, np.full(2 ** d, y[i])).max()
        assert loss_f[i] >= worst - 1e-9


# ---------------------------------------------------------------------------
# clamping and pass accounting

def test_data_range_clamp_recorded_separately(mlp_batch):
    model, b = mlp_batch
    spec = AttackSpec(method="n_fgsm", epsilon=0.4, seed=1,
                      clamp_data_range=(0.0, 1.0))
    pb = attacks.single_step_attack(model, b, spec)
    assert np.array_equal(pb.adversarial_inputs, b.inputs + pb.delta)
    assert pb.clamped_inputs.min() >= 0.0 and pb.clamped_inputs.max() <= 1.0
    assert pb.training_inputs() is pb.clamped_inputs


def test_pass_accounting_per_attack(mlp_batch):
    model, b = mlp_batch
    cases = [
        (AttackSpec(method="fgsm", epsilon=0.1), (1, 1)),
        (AttackSpec(method="rs_fgsm", epsilon=0.1), (1, 1)),
        (AttackSpec(method="n_fgsm", epsilon=0.1), (1, 1)),
        (AttackSpec(method="zero_grad", epsilon=0.1, quantile_q=0.3), (1, 1)),
        (AttackSpec(method="multi_grad", epsilon=0.1), (3, 3)),
        (AttackSpec(method="noise_only", epsilon=0.1), (0, 0)),
    ]
    for spec, expected in cases:
        pb = attacks.single_step_attack(model, b, spec)
        assert pb.passes_used == expected, spec.method
    pb = attacks.pgd(model, b, 0.1, steps=4, restarts=3, seed=0)
    # steps F/B per restart plus one final evaluation forward per restart
    assert pb.passes_used == (3 * 4 + 3, 3 * 4)
