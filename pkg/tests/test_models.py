import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distmest.errors import ContractViolation, EvaluationDomainError
from distmest.models import (
    DataBlock,
    EIVModel,
    ExponentialModel,
    LogisticModel,
    ParameterBox,
    ParameterVector,
    QuadraticModel,
    read_block_csv,
)
from fd import MODEL_CASES, central_diff, derivative_chain_errors, rel_err


def test_logistic_objective_at_zero():
    m = LogisticModel(1, 0)
    assert m.objective([0.0, 1.0], [0.0]) == pytest.approx(math.log(2), abs=1e-15)


def test_logistic_objective_large_margin():
    m = LogisticModel(1, 0)
    # x'theta = 2 with y = 0
    assert m.objective([0.5, 0.0], [4.0]) == pytest.approx(math.log1p(math.e**2), rel=1e-14)
    assert m.objective([0.5, 0.0], [4.0]) == pytest.approx(2.1269, abs=1e-4)


def test_eiv_objective_zero_residual():
    m = EIVModel(1.0)
    assert m.objective([0.0, 1.0], [1.0, 1.0]) == 0.0


def test_logistic_score_at_zero():
    m = LogisticModel(1, 2)
    x = np.array([0.3, -1.2, 2.0])
    for y in (0.0, 1.0):
        np.testing.assert_allclose(m.score(np.append(x, y), np.zeros(3)), (0.5 - y) * x)


def test_logistic_hessian_is_rank_one():
    m = LogisticModel(2, 1)
    row = np.array([0.4, -0.7, 1.1, 1.0])
    theta = np.array([0.2, 0.5, -0.3])
    H = m.hessian(row, theta)
    z = row[:3] @ theta
    s = 1 / (1 + math.exp(-z))
    np.testing.assert_allclose(H, s * (1 - s) * np.outer(row[:3], row[:3]), rtol=1e-14)
    assert np.linalg.matrix_rank(H) == 1


def test_quadratic_derivatives():
    m = QuadraticModel(1, 2)
    x = np.array([1.0, -2.0, 0.5])
    theta = np.array([0.3, 0.1, -1.0])
    np.testing.assert_allclose(m.score(x, theta), theta - x)
    np.testing.assert_array_equal(m.hessian(x, theta), np.eye(3))
    np.testing.assert_array_equal(m.third_derivative(x, theta), np.zeros((3, 9)))


def test_eiv_phi_curvature():
    # the phi-phi entry does not depend on the row
    for lam in (-2.0, 0.0, 0.7):
        m = EIVModel(2.0)
        H = m.hessian([1.3, -0.2], [0.4, lam])
        assert H[0, 0] == pytest.approx(1.0 / (2.0 * (1.0 + lam**2)))


def test_exponential_derivatives():
    m = ExponentialModel()
    lam = 1.7
    assert m.score([2.0], [lam])[0] == pytest.approx(2.0 - 1 / lam)
    assert m.hessian([2.0], [lam])[0, 0] == pytest.approx(1 / lam**2)
    assert m.third_derivative([2.0], [lam])[0, 0] == pytest.approx(-2 / lam**3)


@pytest.mark.parametrize("name,model,sampler", MODEL_CASES, ids=[c[0] for c in MODEL_CASES])
def test_derivative_chain(name, model, sampler):
    errs = derivative_chain_errors(model, sampler, draws=40, seed=3)
    assert max(errs.values()) <= 1e-5, errs


@pytest.mark.parametrize("name,model,sampler", MODEL_CASES, ids=[c[0] for c in MODEL_CASES])
def test_hessian_symmetric(name, model, sampler):
    rng = np.random.default_rng(0)
    for _ in range(20):
        row, theta = sampler(rng)
        H = model.hessian(row, theta)
        np.testing.assert_allclose(H, H.T, atol=1e-13)


@pytest.mark.parametrize("name,model,sampler", MODEL_CASES, ids=[c[0] for c in MODEL_CASES])
def test_kronecker_layout(name, model, sampler):
    # T @ kron(u, u) is the second directional derivative of the score along u
    rng = np.random.default_rng(1)
    for _ in range(10):
        row, theta = sampler(rng)
        u = rng.normal(size=theta.size)
        u /= np.linalg.norm(u)
        h = 1e-4
        second = (model.score(row, theta + h * u) - 2 * model.score(row, theta) + model.score(row, theta - h * u)) / h**2
        exact = model.third_derivative(row, theta) @ np.kron(u, u)
        assert rel_err(second, exact) < 1e-4


@settings(max_examples=60, deadline=None)
@given(
    x=st.lists(st.floats(-4, 4), min_size=3, max_size=3),
    y=st.sampled_from([0.0, 1.0]),
    theta=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
)
def test_logistic_score_matches_fd(x, y, theta):
    m = LogisticModel(1, 2)
    row = np.array(x + [y])
    t = np.array(theta)
    fd = np.array([central_diff(lambda v: m.objective(row, v), t, j) for j in range(3)])
    assert rel_err(fd, m.score(row, t)) < 1e-6


@settings(max_examples=60, deadline=None)
@given(
    row=st.lists(st.floats(-5, 5), min_size=2, max_size=2),
    phi=st.floats(-3, 3),
    lam=st.floats(-3, 3),
    sigma2=st.floats(0.2, 3.0),
)
def test_eiv_hessian_matches_fd(row, phi, lam, sigma2):
    m = EIVModel(sigma2)
    r, t = np.array(row), np.array([phi, lam])
    fd = np.column_stack([central_diff(lambda v: m.score(r, v), t, j) for j in range(2)])
    assert rel_err(fd, m.hessian(r, t)) < 1e-6


def test_logistic_stable_for_large_margins():
    m = LogisticModel(1, 0)
    val = m.objective([1.0, 0.0], [800.0])
    assert val == pytest.approx(800.0)
    # the textbook form overflows here
    with np.errstate(over="ignore"):
        assert not np.isfinite(np.log(1 + np.exp(np.float64(800.0))))
    assert m.objective([1.0, 1.0], [-800.0]) == pytest.approx(800.0)
    assert m.objective([1.0, 1.0], [800.0]) == pytest.approx(0.0, abs=1e-300)


def test_batch_matches_single_row():
    m = LogisticModel(1, 2)
    rng = np.random.default_rng(5)
    rows = np.column_stack([rng.normal(size=(7, 3)), rng.integers(0, 2, 7)])
    theta = rng.normal(size=3)
    np.testing.assert_allclose(m.mean_hessian(rows[None], theta[None])[0], np.mean([m.hessian(r, theta) for r in rows], axis=0))
    mat = rng.normal(size=(3, 3))
    direct = np.mean([m.third_derivative(r, theta) @ mat.reshape(-1) for r in rows], axis=0)
    np.testing.assert_allclose(m.mean_third_apply(rows[None], theta[None], mat[None])[0], direct, rtol=1e-12)


def test_dimension_mismatch_raises():
    m = LogisticModel(1, 1)
    with pytest.raises(ContractViolation):
        m.objective([1.0, 2.0], [0.0, 0.0])
    with pytest.raises(ContractViolation):
        m.score([1.0, 2.0, 1.0], [0.0])


def test_non_finite_result_raises():
    m = ExponentialModel()
    with pytest.raises(EvaluationDomainError):
        m.objective([1.0], [-1.0])


def test_parameter_vector_and_box():
    v = ParameterVector.from_flat([1.0, 2.0, 3.0], 1)
    assert (v.p1, v.p2, len(v)) == (1, 2, 3)
    np.testing.assert_array_equal(np.asarray(v), [1.0, 2.0, 3.0])
    box = ParameterBox.symmetric(1, 2, 5.0)
    assert box.contains([0, 4, -5]) and not box.contains([0, 6, 0])
    assert box.contains_common([5.0]) and not box.contains_common([np.nan])
    with pytest.raises(ContractViolation):
        ParameterBox([1.0], [0.0], [0.5], [0.6])
    with pytest.raises(ContractViolation):
        ParameterVector.from_flat([1.0], 2)


def test_data_block_and_csv(tmp_path):
    with pytest.raises(ContractViolation):
        DataBlock(0, np.array([[1.0, np.inf]]))
    path = tmp_path / "b.csv"
    path.write_text("x,y\n1,0\n2.5,1\n")
    block = read_block_csv(path, 4)
    assert block.id == 4 and block.rows.shape == (2, 2)
    path.write_text("1,a\n")
    with pytest.raises(ContractViolation):
        read_block_csv(path, 0)
