import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.core.sop import (
    FeatureMap,
    covariance,
    newton_schulz,
    newton_schulz_states,
    post_compensate,
    pre_normalize,
    sop_dimension,
    sop_forward,
    symmetric_from_vec,
    upper_tri_vec,
)
from app.core.tensor import Tape, Tensor, hadamard, sum_
from app.errors import ContractError, DegenerateCovariance
from app.models import PreNorm, SopConfig
from app.oracle.gradients import finite_diff_grad
from app.oracle.linalg import matrix_sqrt_exact, random_spd, relative_frobenius_error


def _sqrt_via_newton_schulz(sigma: np.ndarray, iterations: int) -> np.ndarray:
    A, divisor = pre_normalize(Tensor(sigma), PreNorm.TRACE)
    return post_compensate(newton_schulz(A, iterations), divisor).data


def test_covariance_matches_population_covariance():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(12, 5))

    bundle = covariance(Tensor(X))

    np.testing.assert_allclose(bundle.sigma.data, np.cov(X, rowvar=False, bias=True), atol=1e-12)
    np.testing.assert_allclose(bundle.sigma.data, X.T @ bundle.centering @ X, atol=1e-12)
    np.testing.assert_allclose(bundle.centering, (np.eye(12) - np.full((12, 12), 1.0 / 12)) / 12, atol=1e-15)
    assert bundle.trace_sigma == pytest.approx(np.trace(bundle.sigma.data))


def test_batched_covariance_equals_per_sample():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(3, 9, 4))

    sigma = covariance(Tensor(X)).sigma.data

    for index in range(3):
        np.testing.assert_allclose(sigma[index], covariance(Tensor(X[index])).sigma.data, atol=1e-14)


def test_feature_map_flattens_row_major():
    output = Tensor(np.arange(2 * 2 * 3, dtype=float).reshape(2, 2, 3))

    feature_map = FeatureMap.from_conv_output(output)

    assert feature_map.n == 6
    np.testing.assert_array_equal(feature_map.X.data[:, 0], np.arange(6.0))
    np.testing.assert_array_equal(feature_map.X.data[:, 1], np.arange(6.0, 12.0))


@pytest.mark.parametrize("c", [0.5, 2.0])
def test_pre_normalize_scaled_identity(c):
    sigma = Tensor(c * np.eye(4))

    A_trace, trace_divisor = pre_normalize(sigma, PreNorm.TRACE)
    A_frob, frob_divisor = pre_normalize(sigma, PreNorm.FROBENIUS)

    np.testing.assert_allclose(A_trace.data, np.eye(4) / 4)
    assert trace_divisor.item() == pytest.approx(4 * c)
    np.testing.assert_allclose(A_frob.data, np.eye(4) / 2)
    assert frob_divisor.item() == pytest.approx(2 * c)


def test_constant_feature_map_is_degenerate():
    X = np.ones((9, 3))

    with pytest.raises(DegenerateCovariance):
        sop_forward(Tensor(X), SopConfig())


def test_degenerate_sample_index_in_batch():
    rng = np.random.default_rng(2)
    X = np.stack([rng.normal(size=(9, 3)), np.full((9, 3), 4.0)])

    with pytest.raises(DegenerateCovariance) as error:
        sop_forward(Tensor(X), SopConfig())

    assert error.value.sample_index == 1


def test_newton_schulz_identity_is_fixed_point():
    for state in newton_schulz_states(Tensor(np.eye(3)), 4):
        np.testing.assert_array_equal(state.Y.data, np.eye(3))
        np.testing.assert_array_equal(state.Z.data, np.eye(3))


def test_newton_schulz_converges_to_square_root_and_inverse():
    A = np.diag([0.1, 0.3, 0.6])

    states = list(newton_schulz_states(Tensor(A), 20))

    np.testing.assert_allclose(states[-1].Y.data, np.sqrt(A), atol=1e-10)
    np.testing.assert_allclose(states[-1].Z.data, np.diag(1.0 / np.sqrt([0.1, 0.3, 0.6])), atol=1e-9)
    assert [state.k for state in states] == list(range(21))


@pytest.mark.parametrize("dim", [4, 8, 16])
def test_newton_schulz_five_steps_within_five_percent(dim):
    rng = np.random.default_rng(dim)

    errors = []
    for _ in range(100):
        S = random_spd(dim, rng)
        errors.append(relative_frobenius_error(_sqrt_via_newton_schulz(S, 5), matrix_sqrt_exact(S)))

    assert max(errors) <= 0.05


@pytest.mark.parametrize("dim", [4, 8, 16])
def test_more_iterations_reduce_error(dim):
    rng = np.random.default_rng(100 + dim)

    for _ in range(100):
        S = random_spd(dim, rng)
        exact = matrix_sqrt_exact(S)
        one_step = relative_frobenius_error(_sqrt_via_newton_schulz(S, 1), exact)
        five_steps = relative_frobenius_error(_sqrt_via_newton_schulz(S, 5), exact)
        assert five_steps < one_step


@pytest.mark.parametrize("dim", [4, 8, 16])
def test_newton_schulz_iterates_stay_symmetric(dim):
    rng = np.random.default_rng(200 + dim)

    for _ in range(20):
        A, _ = pre_normalize(Tensor(random_spd(dim, rng)), PreNorm.TRACE)
        for state in newton_schulz_states(A, 5):
            assert np.max(np.abs(state.Y.data - state.Y.data.T)) <= 1e-12
            assert np.max(np.abs(state.Z.data - state.Z.data.T)) <= 1e-12


@pytest.mark.parametrize("dim", [4, 8, 16, 32])
def test_newton_schulz_residual_decreases(dim):
    rng = np.random.default_rng(300 + dim)

    for _ in range(10):
        A, _ = pre_normalize(Tensor(random_spd(dim, rng)), PreNorm.TRACE)
        residuals = [
            np.linalg.norm(state.Y.data @ state.Y.data - A.data) for state in newton_schulz_states(A, 5)
        ]
        assert all(later < earlier for earlier, later in zip(residuals, residuals[1:]))


def test_newton_schulz_rejects_zero_iterations_and_asymmetry():
    with pytest.raises(ContractError):
        newton_schulz(Tensor(np.eye(2)), 0)
    with pytest.raises(ContractError):
        newton_schulz(Tensor(np.array([[0.5, 0.1], [0.0, 0.5]])), 3)


def test_post_compensate():
    Z = post_compensate(Tensor(np.eye(3)), Tensor(np.array(4.0)))

    np.testing.assert_allclose(Z.data, 2.0 * np.eye(3))
    with pytest.raises(ContractError):
        post_compensate(Tensor(np.eye(3)), 0.0)


def test_sop_output_is_symmetric():
    X = np.random.default_rng(5).normal(size=(16, 6))

    Z = sop_forward(Tensor(X), SopConfig()).Z.data

    assert np.max(np.abs(Z - Z.T)) <= 1e-12


def test_upper_tri_vec_identity():
    v = upper_tri_vec(Tensor(np.eye(3)))

    np.testing.assert_array_equal(v.data, [1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
    assert sop_dimension(3) == 6


def test_upper_tri_vec_round_trip():
    S = random_spd(5, np.random.default_rng(6))

    v = upper_tri_vec(Tensor(S)).data

    assert v.shape == (15,)
    np.testing.assert_array_equal(symmetric_from_vec(v, 5), S)


def test_upper_tri_vec_rejects_asymmetric():
    with pytest.raises(ContractError):
        upper_tri_vec(Tensor(np.array([[1.0, 2.0], [0.0, 1.0]])))


def test_sop_forward_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    X = Tensor(rng.normal(size=(9, 6)), requires_grad=True)
    weights = rng.normal(size=sop_dimension(6))
    config = SopConfig()

    def loss():
        return sum_(hadamard(sop_forward(X, config).v, weights))

    with Tape() as tape:
        value = loss()
    (grad,) = tape.gradient(value, [X])
    (numeric,) = finite_diff_grad(lambda: loss().item(), [X.data])

    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-7)


def test_sop_forward_scales_linearly_with_features():
    X = np.random.default_rng(8).normal(size=(10, 4))

    base = sop_forward(Tensor(X), SopConfig()).v.data
    scaled = sop_forward(Tensor(3.0 * X), SopConfig()).v.data

    np.testing.assert_allclose(scaled, 3.0 * base, rtol=1e-10, atol=1e-12)
