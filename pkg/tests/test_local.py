import json

import numpy as np
import pytest

from distmest.errors import ContractViolation
from distmest.local import (
    LocalFit,
    SolverOptions,
    analyze_block,
    analyze_blocks,
    bias_estimate,
    debias_local,
    fit_local,
    fit_pooled,
    sandwich_covariance,
    split_halves,
    subsample,
)
from distmest.models import DataBlock, EIVModel, ExponentialModel, LogisticModel, ParameterBox, QuadraticModel
from distmest.rng import stream
from distmest.simnet import generate_logistic_blocks


def logistic_block(n, theta, seed, block_id=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 0.75, (n, len(theta)))
    y = rng.random(n) < 1 / (1 + np.exp(-x @ theta))
    return DataBlock(block_id, np.column_stack([x, y]))


def grid_minimise(f, lo, hi, points=41, rounds=40):
    """Coarse-to-fine grid search on a 2-d box."""
    centre = (lo + hi) / 2
    span = (hi - lo) / 2
    for _ in range(rounds):
        g0 = np.linspace(centre[0] - span[0], centre[0] + span[0], points)
        g1 = np.linspace(centre[1] - span[1], centre[1] + span[1], points)
        vals = np.array([[f(np.array([a, b])) for b in g1] for a in g0])
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        centre = np.array([g0[i], g1[j]])
        span = span * 4 / (points - 1)
    return centre


# -- fit_local ---------------------------------------------------------------


def test_quadratic_fit_is_sample_mean():
    rows = np.random.default_rng(0).normal(size=(50, 3))
    fit = fit_local(DataBlock(0, rows), QuadraticModel(1, 2), ParameterBox.symmetric(1, 2))
    assert fit.converged
    np.testing.assert_allclose(fit.theta_hat, rows.mean(axis=0), atol=1e-12)


def test_logistic_fit_matches_grid_search():
    block = logistic_block(200, np.array([1.0, -0.5]), seed=11)
    model = LogisticModel(1, 1)
    fit = fit_local(block, model, ParameterBox.symmetric(1, 1))
    best = grid_minimise(lambda t: model.values(block.rows, t).mean(), np.array([-5.0, -5.0]), np.array([5.0, 5.0]))
    np.testing.assert_allclose(fit.theta_hat, best, atol=1e-4)


def test_exponential_fit_closed_form():
    x = np.random.default_rng(2).exponential(0.5, 300)
    box = ParameterBox(np.array([1e-6]), np.array([1e3]), np.array([1e-6]), np.array([1e3]))
    fit = fit_local(DataBlock(0, x), ExponentialModel(), box)
    assert fit.theta_hat[0] == pytest.approx(1 / x.mean(), rel=1e-10)


def test_eiv_fit_is_stationary():
    rng = np.random.default_rng(3)
    z = rng.normal(1.0, 0.5, 2000)
    rows = np.column_stack([z + rng.normal(size=2000), 0.5 + 2.0 * z + rng.normal(size=2000)])
    model = EIVModel(1.0)
    fit = fit_local(DataBlock(0, rows), model, ParameterBox.symmetric(1, 1))
    assert fit.converged and fit.grad_norm <= 1e-10
    assert np.all(np.linalg.eigvalsh(model.mean_hessian(rows[None], fit.theta_hat[None])[0]) > 0)


def test_newton_objective_monotone():
    block = logistic_block(300, np.array([2.0, -1.0, 0.5]), seed=4)
    fit = fit_local(block, LogisticModel(1, 2), ParameterBox.symmetric(1, 2), SolverOptions(record_history=True))
    hist = np.array(fit.history)
    assert len(hist) >= 3
    assert np.all(np.diff(hist) <= 1e-15)


def test_max_iter_is_reported():
    block = logistic_block(300, np.array([2.0, -1.0]), seed=5)
    fit = fit_local(block, LogisticModel(1, 1), ParameterBox.symmetric(1, 1), SolverOptions(max_iter=1))
    assert fit.status == "max_iter" and not fit.usable
    assert fit.grad_norm > 1e-10


def test_singular_hessian_is_flagged():
    rows = logistic_block(100, np.array([1.0, 0.0]), seed=6).rows.copy()
    rows[:, 1] = 0.0
    fit = fit_local(DataBlock(0, rows), LogisticModel(1, 1), ParameterBox.symmetric(1, 1))
    assert "ridge" in fit.flags


def test_boundary_status():
    # perfectly separated data push the estimate to the box edge
    rows = np.array([[1.0, 1.0], [2.0, 1.0], [-1.0, 0.0], [-0.5, 0.0]])
    fit = fit_local(DataBlock(0, rows), LogisticModel(1, 0), ParameterBox.symmetric(1, 0, 5.0))
    assert fit.status == "boundary" and fit.usable
    assert fit.theta_hat[0] == pytest.approx(5.0)


def test_too_few_rows():
    with pytest.raises(ContractViolation):
        fit_local(DataBlock(0, np.ones((1, 3))), LogisticModel(1, 1), ParameterBox.symmetric(1, 1))


def test_analyze_blocks_matches_single_fits():
    blocks = [logistic_block(n, np.array([0.5, 1.0]), seed=s, block_id=s) for s, n in enumerate((80, 120, 80))]
    model, box = LogisticModel(1, 1), ParameterBox.symmetric(1, 1)
    fits, _ = analyze_blocks(blocks, model, box)
    for block, fit in zip(blocks, fits):
        one = fit_local(block, model, box)
        assert fit.block_id == block.id
        np.testing.assert_allclose(fit.theta_hat, one.theta_hat, atol=1e-10)
        np.testing.assert_allclose(fit.H_hat_full, sandwich_covariance(block, model, fit.theta_hat)[0], rtol=1e-10)
        np.testing.assert_allclose(fit.bias_hat, bias_estimate(block, model, fit.theta_hat), rtol=1e-10)


def test_local_fit_json_round_trip():
    fit = analyze_block(logistic_block(100, np.array([0.5, 1.0]), seed=7, block_id=3), LogisticModel(1, 1), ParameterBox.symmetric(1, 1))
    back = LocalFit.from_dict(json.loads(json.dumps(fit.to_dict())))
    assert back.block_id == 3 and back.status == fit.status and back.bias_applied == fit.bias_applied
    for name in ("theta_hat", "H_hat_full", "bias_hat", "theta_bc"):
        np.testing.assert_array_equal(getattr(back, name), getattr(fit, name))
    np.testing.assert_array_equal(back.H_hat, fit.H_hat)


# -- sandwich ----------------------------------------------------------------


def test_quadratic_sandwich_is_sample_covariance():
    rows = np.random.default_rng(8).normal(size=(40, 2)) @ np.array([[1.0, 0.3], [0.0, 2.0]])
    full, common = sandwich_covariance(DataBlock(0, rows), QuadraticModel(1, 1), rows.mean(axis=0))
    np.testing.assert_allclose(full, np.cov(rows.T, ddof=0), rtol=1e-12)
    assert common.shape == (1, 1) and common[0, 0] == full[0, 0]


def test_logistic_sandwich_matches_inverse_fisher():
    theta = np.array([1.0, -0.5])
    block = logistic_block(10_000, theta, seed=9)
    model = LogisticModel(1, 1)
    fit = fit_local(block, model, ParameterBox.symmetric(1, 1))
    full, _ = sandwich_covariance(block, model, fit.theta_hat)
    # Fisher information by independent Monte Carlo at the truth
    x = np.random.default_rng(10).normal(0.0, 0.75, (1_000_000, 2))
    mu = 1 / (1 + np.exp(-x @ theta))
    fisher = (x * (mu * (1 - mu))[:, None]).T @ x / len(x)
    inv = np.linalg.inv(fisher)
    assert np.linalg.norm(full - inv) / np.linalg.norm(inv) <= 0.05


@pytest.mark.parametrize("n,reps", [(500, 800), (5000, 400)])
@pytest.mark.parametrize("kind", ["logistic", "eiv", "exponential", "quadratic"])
def test_sandwich_consistency(kind, n, reps):
    rng = stream(123, n)
    if kind == "logistic":
        model, box = LogisticModel(1, 1), ParameterBox.symmetric(1, 1)
        thetas = np.tile([0.8, -0.6], (reps, 1))
        blocks = generate_logistic_blocks(thetas, n, seed=n, replicate=0)
    elif kind == "eiv":
        model, box = EIVModel(1.0), ParameterBox.symmetric(1, 1)
        z = rng.normal(1.0, np.sqrt(0.5), (reps, n))
        x = z + rng.normal(size=z.shape)
        y = 0.5 + 1.5 * z + rng.normal(size=z.shape)
        blocks = [DataBlock(i, np.column_stack([x[i], y[i]])) for i in range(reps)]
    elif kind == "exponential":
        model = ExponentialModel()
        box = ParameterBox(np.array([1e-6]), np.array([1e3]), np.array([1e-6]), np.array([1e3]))
        blocks = [DataBlock(i, rng.exponential(0.5, n)) for i in range(reps)]
    else:
        model, box = QuadraticModel(1, 1), ParameterBox.symmetric(1, 1)
        blocks = [DataBlock(i, rng.standard_t(6, (n, 2))) for i in range(reps)]
    fits, _ = analyze_blocks(blocks, model, box, bias=False)
    assert all(f.converged for f in fits)
    thetas = np.array([f.theta_hat for f in fits])
    mc = n * np.var(thetas, axis=0, ddof=1)
    sandwich = np.mean([np.diag(f.H_hat_full) for f in fits], axis=0)
    ratio = mc / sandwich
    assert np.all((ratio >= 0.8) & (ratio <= 1.2)), ratio


# -- bias and debiasing ------------------------------------------------------


def test_quadratic_bias_is_zero():
    rows = np.random.default_rng(11).normal(size=(30, 2))
    b = bias_estimate(DataBlock(0, rows), QuadraticModel(1, 1), rows.mean(axis=0))
    np.testing.assert_allclose(b, 0.0, atol=1e-13)


@pytest.mark.parametrize("centered", [False, True])
def test_exponential_bias_closed_form(centered):
    # Q = -lam^2, d_i = -lam^2 (x_i - xbar), third derivative -2/lam^3:
    # B_hat = lam^3 * mean((x - xbar)^2)
    x = np.random.default_rng(12).exponential(0.5, 400)
    lam = 1 / x.mean()
    b = bias_estimate(DataBlock(0, x), ExponentialModel(), [lam], centered=centered)
    assert b[0] == pytest.approx(lam**3 * np.var(x), rel=1e-10)


def test_debias_examples():
    box = ParameterBox.symmetric(1, 0, 1.0)
    theta, applied = debias_local([0.9], [10.0], 100, box)
    assert applied and theta[0] == pytest.approx(0.8)
    theta, applied = debias_local([0.99], [-10.0], 100, box)
    assert not applied and theta[0] == 0.99
    theta, applied = debias_local([0.3], [0.0], 100, box)
    assert applied and theta[0] == 0.3
    with pytest.raises(ContractViolation):
        debias_local([0.1, 0.2], [0.0], 10, box)


def test_logistic_empirical_bias_matches_estimate():
    # mean(theta_hat - theta*) should equal +mean(B_hat)/n within 3 Monte Carlo SEs
    n, reps = 100, 5000
    truth = np.array([1.0, -0.5])
    blocks = generate_logistic_blocks(np.tile(truth, (reps, 1)), n, seed=13, replicate=0)
    fits, _ = analyze_blocks(blocks, LogisticModel(1, 1), ParameterBox.symmetric(1, 1))
    err = np.array([f.theta_hat for f in fits]) - truth
    b = np.array([f.bias_hat for f in fits]) / n
    se = (err - b).std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(err.mean(axis=0) - b.mean(axis=0)) <= 3 * se)
    # the opposite sign convention is far outside the band
    assert np.all(np.abs(err.mean(axis=0) + b.mean(axis=0)) > 3 * se)


@pytest.mark.parametrize("kind", ["exponential", "logistic"])
def test_debiasing_reduces_mean_bias(kind):
    n, reps = 100, 5000
    if kind == "exponential":
        truth, model = 2.0, ExponentialModel()
        box = ParameterBox(np.array([1e-6]), np.array([1e3]), np.array([1e-6]), np.array([1e3]))
        rng = stream(14, 0)
        blocks = [DataBlock(i, rng.exponential(1 / truth, n)) for i in range(reps)]
    else:
        truth, model, box = 1.5, LogisticModel(1, 0), ParameterBox.symmetric(1, 0)
        blocks = generate_logistic_blocks(np.tile([truth], (reps, 1)), n, seed=14, replicate=0)
    fits, _ = analyze_blocks(blocks, model, box)
    raw = np.mean([f.theta_hat[0] for f in fits]) - truth
    bc = np.mean([f.theta_bc[0] for f in fits]) - truth
    assert abs(bc) < abs(raw)


# -- splitting and subsampling ------------------------------------------------


@pytest.mark.parametrize("n,sizes", [(4, (2, 2)), (5, (3, 2))])
def test_split_sizes_and_disjoint(n, sizes):
    block = DataBlock(2, np.arange(n, dtype=float))
    a, b = split_halves(block, seed=1)
    assert (a.n, b.n) == sizes
    assert sorted(np.concatenate([a.rows[:, 0], b.rows[:, 0]])) == list(range(n))


def test_split_deterministic():
    block = DataBlock(2, np.arange(40, dtype=float))
    first = split_halves(block, seed=5)
    again = split_halves(block, seed=5)
    other = split_halves(block, seed=6)
    np.testing.assert_array_equal(first.first.rows, again.first.rows)
    assert not np.array_equal(first.first.rows, other.first.rows)


def test_split_too_small():
    with pytest.raises(ContractViolation):
        split_halves(DataBlock(0, np.ones((5, 3))), seed=0, p=3)
    with pytest.raises(ContractViolation):
        split_halves(DataBlock(0, np.ones((1, 1))), seed=0)


def test_subsample():
    block = DataBlock(1, np.arange(100, dtype=float))
    sub = subsample(block, 0.25, seed=3, p=2)
    assert sub.n == 25 and len(set(sub.rows[:, 0])) == 25
    with pytest.raises(ContractViolation):
        subsample(block, 0.01, seed=3, p=2)
    with pytest.raises(ContractViolation):
        subsample(block, 1.5, seed=3, p=2)


# -- pooled fit ----------------------------------------------------------------


def test_pooled_single_block_equals_local():
    block = logistic_block(300, np.array([0.7, -1.0, 0.4]), seed=15)
    model, box = LogisticModel(1, 2), ParameterBox.symmetric(1, 2)
    pooled = fit_pooled([block], model, box)
    np.testing.assert_allclose(pooled.theta(0), fit_local(block, model, box).theta_hat, atol=1e-8)


def test_pooled_quadratic_closed_form():
    # with a common weight matrix the profiled problem is a size-weighted mean
    weight = np.array([[2.0, 0.7], [0.7, 1.0]])
    rng = np.random.default_rng(16)
    blocks = [DataBlock(k, rng.normal(k, 1.0, (n, 2))) for k, n in enumerate((10, 25, 40))]
    pooled = fit_pooled(blocks, QuadraticModel(1, 1, weight), ParameterBox.symmetric(1, 1))
    ns = np.array([b.n for b in blocks])
    means = np.array([b.rows.mean(axis=0) for b in blocks])
    phi = ns @ means[:, 0] / ns.sum()
    assert pooled.phi[0] == pytest.approx(phi, abs=1e-12)
    for k, m in enumerate(means):
        lam = m[1] - weight[1, 0] / weight[1, 1] * (phi - m[0])
        assert pooled.lambdas[k][0] == pytest.approx(lam, abs=1e-12)


def dense_joint_newton(blocks, model, p1, iters=60):
    """Newton on the stacked (phi, lambda_1..K) vector with a dense Hessian."""
    K, p = len(blocks), model.p
    p2 = p - p1
    dim = p1 + K * p2
    z = np.zeros(dim)

    def index(k):
        return np.r_[np.arange(p1), p1 + k * p2 + np.arange(p2)]

    for _ in range(iters):
        g, H = np.zeros(dim), np.zeros((dim, dim))
        for k, b in enumerate(blocks):
            idx = index(k)
            theta = z[idx]
            g[idx] += model.scores(b.rows, theta).sum(axis=0)
            H[np.ix_(idx, idx)] += model.hessians(b.rows, theta).sum(axis=0)
        z = z - np.linalg.solve(H, g)
    return z[:p1], [z[index(k)][p1:] for k in range(K)]


def test_pooled_matches_dense_newton():
    model, box = LogisticModel(1, 2), ParameterBox.symmetric(1, 2)
    blocks = [logistic_block(n, np.array([0.8, l, -l]), seed=20 + k, block_id=k) for k, (n, l) in enumerate([(150, -1.0), (200, 0.0), (250, 1.0)])]
    pooled = fit_pooled(blocks, model, box)
    phi, lams = dense_joint_newton(blocks, model, 1)
    assert pooled.converged
    np.testing.assert_allclose(pooled.phi, phi, atol=1e-8)
    for a, b in zip(pooled.lambdas, lams):
        np.testing.assert_allclose(a, b, atol=1e-8)


def test_pooled_order_independent():
    model, box = LogisticModel(1, 1), ParameterBox.symmetric(1, 1)
    blocks = [logistic_block(100, np.array([0.8, l]), seed=30 + k, block_id=k) for k, l in enumerate((-1.0, 1.0, 2.0))]
    a = fit_pooled(blocks, model, box)
    b = fit_pooled(blocks[::-1], model, box)
    np.testing.assert_array_equal(a.phi, b.phi)
