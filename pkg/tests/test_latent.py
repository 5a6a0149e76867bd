import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jade.latent import (
    DiagGaussian,
    ElboTerms,
    LatentSplit,
    ObjectiveWeights,
    class_loglik,
    elbo_domain,
    jade_objective,
    kl_between,
    kl_to_standard_normal,
    recon_loglik,
    reparameterize,
)
from oracles import (
    bernoulli_loglik_loop,
    central_difference,
    gaussian_loglik_loop,
    kl_quadrature,
    log_softmax_mp,
    relative_error,
)

D = torch.float64


def gauss(mean, var):
    mean = torch.as_tensor(mean, dtype=torch.float64)
    return DiagGaussian(mean, torch.log(torch.as_tensor(var, dtype=torch.float64)))


def random_gaussian(rng, d):
    return gauss(rng.uniform(-2, 2, d), rng.uniform(0.25, 4, d))


# --- DiagGaussian / LatentSplit ---------------------------------------------


def test_log_var_is_clamped():
    q = DiagGaussian(torch.zeros(3), torch.tensor([-100.0, 0.0, 100.0]))
    assert q.log_var.tolist() == [-30.0, 0.0, 30.0]


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        DiagGaussian(torch.zeros(3), torch.zeros(4))


def test_default_split_puts_content_last():
    split = LatentSplit()
    assert list(split.style) == list(range(10))
    assert list(split.content) == list(range(10, 20))
    q = DiagGaussian(torch.arange(20.0), torch.zeros(20))
    style, content = q.split(split)
    assert content.mean.tolist() == list(range(10, 20))
    assert style.dim == content.dim == 10


@pytest.mark.parametrize("total,content", [(4, 2), (20, 10), (7, 3), (5, 5)])
def test_split_ranges_partition(total, content):
    s = LatentSplit(total, content)
    assert sorted(list(s.style) + list(s.content)) == list(range(total))


# --- KL ------------------------------------------------------------------------


def test_kl_identity_is_zero():
    q = DiagGaussian.standard(10, torch.float64)
    assert float(kl_between(q, q)) == 0.0


def test_kl_unit_shift():
    assert float(kl_between(gauss([1.0], [1.0]), gauss([0.0], [1.0]))) == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_quadrature():
    rng = np.random.default_rng(11)
    mq, mp = rng.uniform(-2, 2, 5), rng.uniform(-2, 2, 5)
    vq, vp = rng.uniform(0.25, 4, 5), rng.uniform(0.25, 4, 5)
    expected = kl_quadrature(mq, vq, mp, vp)
    assert float(kl_between(gauss(mq, vq), gauss(mp, vp))) == pytest.approx(expected, abs=1e-6)


def test_kl_to_standard_normal_closed_forms():
    assert float(kl_to_standard_normal(DiagGaussian.standard(20, torch.float64))) == 0.0
    expected = (4 - 1 - math.log(4)) / 2
    assert float(kl_to_standard_normal(gauss([0.0], [4.0]))) == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.80685, abs=1e-5)


def test_kl_to_standard_normal_is_kl_between_bitwise():
    q = random_gaussian(np.random.default_rng(3), 8)
    assert torch.equal(kl_to_standard_normal(q), kl_between(q, DiagGaussian.standard(8, torch.float64)))


def test_kl_rejects_dimension_mismatch_and_nonfinite():
    with pytest.raises(ValueError):
        kl_between(DiagGaussian.standard(3, torch.float64), DiagGaussian.standard(4, torch.float64))
    bad = DiagGaussian(torch.tensor([float("nan")]), torch.zeros(1))
    with pytest.raises(ValueError):
        kl_between(bad, DiagGaussian.standard(1, torch.float64))
    with pytest.raises(ValueError):
        kl_to_standard_normal(bad)


def test_kl_is_batched():
    rng = np.random.default_rng(0)
    q = DiagGaussian(torch.as_tensor(rng.normal(size=(6, 4))), torch.as_tensor(rng.normal(size=(6, 4))))
    p = DiagGaussian(torch.as_tensor(rng.normal(size=(6, 4))), torch.as_tensor(rng.normal(size=(6, 4))))
    rows = [float(kl_between(DiagGaussian(q.mean[i], q.log_var[i]), DiagGaussian(p.mean[i], p.log_var[i])))
            for i in range(6)]
    assert kl_between(q, p).tolist() == pytest.approx(rows, abs=1e-14)


gaussians = st.integers(1, 32).flatmap(
    lambda d: st.tuples(
        *[st.lists(st.floats(-5, 5), min_size=d, max_size=d) for _ in range(4)]
    )
)


@settings(max_examples=200, deadline=None)
@given(gaussians)
def test_kl_properties(params):
    mq, lq, mp, lp = (torch.tensor(v, dtype=torch.float64) for v in params)
    q, p = DiagGaussian(mq, lq), DiagGaussian(mp, lp)
    assert float(kl_between(q, p)) >= 0.0
    assert float(kl_between(q, q)) == 0.0
    std = DiagGaussian.standard(q.dim, torch.float64)
    assert abs(float(kl_to_standard_normal(q)) - float(kl_between(q, std))) <= 1e-12


# --- reparameterization ----------------------------------------------------------


def test_reparameterize_zero_noise_and_identity():
    q = gauss([0.3, -1.2], [2.0, 0.5])
    assert torch.equal(reparameterize(q, torch.zeros(2)), q.mean)
    e = torch.tensor([0.7, -0.1, 2.5])
    assert torch.equal(reparameterize(DiagGaussian.standard(3, torch.float64), e), e)


def test_reparameterize_rejects_wrong_noise_shape():
    with pytest.raises(ValueError):
        reparameterize(DiagGaussian.standard(3, torch.float64), torch.zeros(4))


def test_reparameterize_monte_carlo_moments():
    q = gauss([1.5, -0.5, 0.0], [0.3, 2.0, 5.0])
    noise = torch.randn((100_000, 3), generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    samples = reparameterize(DiagGaussian(q.mean.expand(100_000, 3), q.log_var.expand(100_000, 3)), noise)
    n = samples.shape[0]
    var = q.var
    mean_se = torch.sqrt(var / n)
    var_se = var * math.sqrt(2.0 / (n - 1))
    assert torch.all((samples.mean(0) - q.mean).abs() < 3 * mean_se)
    assert torch.all((samples.var(0) - var).abs() < 3 * var_se)


def test_reparameterize_is_differentiable():
    mean = torch.zeros(3, requires_grad=True)
    log_var = torch.zeros(3, requires_grad=True)
    reparameterize(DiagGaussian(mean, log_var), torch.ones(3)).sum().backward()
    assert mean.grad.tolist() == [1.0, 1.0, 1.0]
    assert log_var.grad.tolist() == [0.5, 0.5, 0.5]


# --- likelihoods -------------------------------------------------------------------


def test_gaussian_perfect_reconstruction():
    x = torch.tensor([[0.4]], dtype=D)
    assert float(recon_loglik(x, x.clone(), "gaussian")) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)
    assert -0.5 * math.log(2 * math.pi) == pytest.approx(-0.91894, abs=1e-5)


def test_bernoulli_half():
    assert float(recon_loglik(torch.tensor([[1.0]], dtype=D), torch.tensor([[0.5]], dtype=D), "bernoulli")) == pytest.approx(
        math.log(0.5), abs=1e-15
    )


@pytest.mark.parametrize("family,oracle", [("gaussian", gaussian_loglik_loop), ("bernoulli", bernoulli_loglik_loop)])
def test_recon_matches_scalar_loop(family, oracle):
    rng = np.random.default_rng(7)
    x, x_hat = rng.uniform(0, 1, (8, 8)), rng.uniform(0, 1, (8, 8))
    x_hat[0, 0] = 0.0  # exercises the clamp
    got = float(recon_loglik(torch.as_tensor(x)[None], torch.as_tensor(x_hat)[None], family)[0])
    assert got == pytest.approx(oracle(x, x_hat), abs=1e-9)


def test_recon_errors():
    with pytest.raises(ValueError):
        recon_loglik(torch.zeros(1, 4), torch.zeros(1, 5))
    with pytest.raises(ValueError):
        recon_loglik(torch.full((1, 4), 1.5), torch.zeros(1, 4))
    with pytest.raises(ValueError):
        recon_loglik(torch.zeros(1, 4), torch.zeros(1, 4), "poisson")


def test_recon_is_maximized_at_target():
    rng = np.random.default_rng(1)
    x = torch.as_tensor(rng.uniform(0.1, 0.9, (1, 16)))
    for family in ("gaussian", "bernoulli"):
        best = float(recon_loglik(x, x.clone(), family))
        for _ in range(20):
            bumped = (x + torch.as_tensor(rng.normal(0, 0.02, x.shape))).clamp(0, 1)
            assert float(recon_loglik(x, bumped, family)) < best


# --- classification ------------------------------------------------------------------


def test_uniform_logits():
    for label in range(10):
        assert float(class_loglik(torch.zeros(10, dtype=D), torch.tensor([label]))) == pytest.approx(-math.log(10), abs=1e-12)


def test_saturated_logits():
    logits = torch.zeros(10)
    logits[3] = 1000.0
    assert abs(float(class_loglik(logits, torch.tensor([3])))) < 1e-6


def test_class_loglik_matches_extended_precision():
    rng = np.random.default_rng(2)
    for _ in range(20):
        logits = rng.normal(0, 5, 10)
        label = int(rng.integers(10))
        got = float(class_loglik(torch.as_tensor(logits), torch.tensor([label])))
        assert got == pytest.approx(log_softmax_mp(logits, label), abs=1e-9)


def test_class_loglik_label_range():
    with pytest.raises(ValueError):
        class_loglik(torch.zeros(1, 10), torch.tensor([10]))
    with pytest.raises(ValueError):
        class_loglik(torch.zeros(1, 10), torch.tensor([-1]))


def test_class_loglik_maximized_by_saturating_true_class():
    rng = np.random.default_rng(4)
    logits = torch.zeros(10)
    logits[2] = 30.0
    best = float(class_loglik(logits, torch.tensor([2])))
    for _ in range(20):
        bumped = logits + torch.as_tensor(rng.normal(0, 0.5, 10))
        bumped[2] = 30.0 - abs(rng.normal(0, 0.5)) - 0.5
        assert float(class_loglik(bumped, torch.tensor([2]))) < best


# --- ELBO and joint objective ------------------------------------------------------


def test_elbo_all_zero_kl_case():
    std = DiagGaussian.standard((1, 1), torch.float64)
    x = torch.tensor([[0.25]], dtype=D)
    logits = torch.zeros(1, 10, dtype=D)
    logits[0, 4] = 1000.0
    terms = elbo_domain(x, torch.tensor([4]), std, std, x.clone(), logits)
    assert float(terms.elbo) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-9)


def _random_domain(rng, b=3, d=4, pixels=6):
    x = torch.as_tensor(rng.uniform(0, 1, (b, pixels)))
    x_hat = torch.as_tensor(rng.uniform(0, 1, (b, pixels)))
    labels = torch.as_tensor(rng.integers(0, 10, b))
    qs = DiagGaussian(torch.as_tensor(rng.normal(size=(b, d))), torch.as_tensor(rng.normal(size=(b, d))))
    qc = DiagGaussian(torch.as_tensor(rng.normal(size=(b, d))), torch.as_tensor(rng.normal(size=(b, d))))
    logits = torch.as_tensor(rng.normal(size=(b, 10)))
    return x, labels, qs, qc, x_hat, logits


def test_elbo_matches_hand_sum():
    rng = np.random.default_rng(9)
    x, labels, qs, qc, x_hat, logits = _random_domain(rng)
    terms = elbo_domain(x, labels, qs, qc, x_hat, logits)
    for i in range(3):
        recon = gaussian_loglik_loop(x[i].numpy(), x_hat[i].numpy())
        cls = log_softmax_mp(logits[i].numpy(), int(labels[i]))
        kl_s = kl_quadrature(qs.mean[i].numpy(), qs.var[i].numpy(), np.zeros(4), np.ones(4))
        kl_c = kl_quadrature(qc.mean[i].numpy(), qc.var[i].numpy(), np.zeros(4), np.ones(4))
        assert float(terms.elbo[i]) == pytest.approx(recon + cls - kl_s - kl_c, abs=1e-6)
        assert float(terms.recon_loglik[i]) == pytest.approx(recon, abs=1e-9)
        assert float(terms.class_loglik[i]) == pytest.approx(cls, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_elbo_recomposition_exact(seed):
    terms = elbo_domain(*_random_domain(np.random.default_rng(seed)))
    assert torch.equal(terms.elbo, terms.recon_loglik + terms.class_loglik - terms.kl_style - terms.kl_content)
    assert torch.all(terms.kl_style >= 0) and torch.all(terms.kl_content >= 0)


def test_objective_with_matched_posteriors():
    rng = np.random.default_rng(12)
    tx = elbo_domain(*_random_domain(rng))
    ty = elbo_domain(*_random_domain(rng))
    q = DiagGaussian(torch.as_tensor(rng.normal(size=(3, 4))), torch.as_tensor(rng.normal(size=(3, 4))))
    loss = jade_objective(tx, ty, q, q)
    assert torch.all(loss.match_kl == 0)
    assert torch.equal(loss.total, tx.elbo + ty.elbo)


def test_objective_term_by_term():
    rng = np.random.default_rng(13)
    args_x, args_y = _random_domain(rng), _random_domain(rng)
    tx, ty = elbo_domain(*args_x), elbo_domain(*args_y)
    qx, qy = args_x[3], args_y[3]
    loss = jade_objective(tx, ty, qx, qy)
    for i in range(3):
        match = kl_quadrature(qx.mean[i].numpy(), qx.var[i].numpy(), qy.mean[i].numpy(), qy.var[i].numpy())
        expected = float(tx.elbo[i]) + float(ty.elbo[i]) - match
        assert float(loss.total[i]) == pytest.approx(expected, abs=1e-6)
        assert float(loss.total[i]) == pytest.approx(float(tx.elbo[i] + ty.elbo[i] - kl_between(
            DiagGaussian(qx.mean[i], qx.log_var[i]), DiagGaussian(qy.mean[i], qy.log_var[i]))), abs=1e-9)


def test_objective_without_matching_weight():
    rng = np.random.default_rng(14)
    args_x, args_y = _random_domain(rng), _random_domain(rng)
    tx, ty = elbo_domain(*args_x), elbo_domain(*args_y)
    loss = jade_objective(tx, ty, args_x[3], args_y[3], ObjectiveWeights(w_match=0.0))
    assert torch.equal(loss.total, tx.weighted(loss.weights) + ty.weighted(loss.weights))
    assert torch.all(loss.match_kl > 0)


def test_objective_dimension_mismatch():
    t = ElboTerms(*(torch.zeros(1) for _ in range(4)))
    with pytest.raises(ValueError):
        jade_objective(t, t, DiagGaussian.standard(3, torch.float64), DiagGaussian.standard(4, torch.float64))


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        ObjectiveWeights(w_match=-1.0)


# --- gradients against central differences ---------------------------------------

STEP = 1e-5


def _check_gradients(fn, n_params, rng, n_coords=24):
    """fn maps a flat float64 parameter vector (torch) to a scalar."""
    theta = rng.normal(0, 1, n_params)
    t = torch.tensor(theta, requires_grad=True)
    fn(t).backward()
    grad = t.grad.numpy()
    coords = rng.choice(n_params, size=min(n_coords, n_params), replace=False)
    numeric_f = lambda v: float(fn(torch.tensor(v)))  # noqa: E731
    errors = [relative_error(grad[i], central_difference(numeric_f, theta, i, STEP)) for i in coords]
    assert len(coords) >= 20
    assert max(errors) < 1e-4, max(errors)


def test_gradient_kl_between():
    d = 12
    _check_gradients(
        lambda t: kl_between(DiagGaussian(t[:d], t[d:2 * d]), DiagGaussian(t[2 * d:3 * d], t[3 * d:])),
        4 * d, np.random.default_rng(20))


def test_gradient_kl_to_standard_normal():
    d = 24
    _check_gradients(lambda t: kl_to_standard_normal(DiagGaussian(t[:d], t[d:])), 2 * d, np.random.default_rng(21))


def test_gradient_reparameterize():
    d = 24
    w = torch.as_tensor(np.random.default_rng(0).normal(size=d))
    noise = torch.as_tensor(np.random.default_rng(1).normal(size=d))
    _check_gradients(lambda t: (w * reparameterize(DiagGaussian(t[:d], t[d:]), noise)).sum(), 2 * d,
                     np.random.default_rng(22))


def test_gradient_class_loglik():
    labels = torch.tensor([0, 3, 9])
    _check_gradients(lambda t: class_loglik(t.reshape(3, 10), labels).sum(), 30, np.random.default_rng(23))


def test_gradient_recon_loglik():
    rng = np.random.default_rng(24)
    x = torch.as_tensor(rng.uniform(0, 1, (2, 16)))
    for family in ("gaussian", "bernoulli"):
        _check_gradients(lambda t: recon_loglik(x, torch.sigmoid(t.reshape(2, 16)), family).sum(), 32, rng)


def test_gradient_joint_objective():
    d = 5
    rng = np.random.default_rng(25)
    base_x, base_y = _random_domain(rng, b=1, d=d), _random_domain(rng, b=1, d=d)

    def fn(t):
        q = [DiagGaussian(t[i * 2 * d:i * 2 * d + d][None], t[i * 2 * d + d:(i + 1) * 2 * d][None]) for i in range(4)]
        lx, ly = t[8 * d:8 * d + 10][None], t[8 * d + 10:][None]
        tx = elbo_domain(base_x[0], base_x[1], q[0], q[1], base_x[4], lx)
        ty = elbo_domain(base_y[0], base_y[1], q[2], q[3], base_y[4], ly)
        return jade_objective(tx, ty, q[1], q[3]).total.sum()

    _check_gradients(fn, 8 * d + 20, rng, n_coords=40)
