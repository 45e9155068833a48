"""Objective zoo checks: losses, analytic gradients, HVPs, datasets, batching.

Gradient correctness is always checked against central finite differences
computed here, independently of the hvp_fd helper the library ships.
"""

from __future__ import annotations

import numpy as np
import pytest

from flatmin.errors import (
    BatchSizeError,
    ConfigError,
    DegenerateDirectionError,
    DimensionError,
    NumericalError,
)
from flatmin.objectives import (
    Batch,
    Dataset,
    DoubleWellObjective,
    MLPObjective,
    QuadraticObjective,
    RosenbrockObjective,
    eval_grad,
    eval_loss,
    hvp_fd,
    load_dataset,
    make_objective,
    random_spd_matrix,
    sample_batch,
    save_dataset,
)


def central_diff_grad(obj, theta, batch=None, h=1e-5):
    """Independent finite-difference gradient oracle."""
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (eval_loss(obj, theta + e, batch) - eval_loss(obj, theta - e, batch)) / (2 * h)
    return g


def tiny_dataset(n=12, feature_dim=2, num_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(
        rng.standard_normal((n, feature_dim)),
        rng.integers(num_classes, size=n),
        np.zeros(n, dtype=np.int64),
    )


# ---------------------------------------------------------------- quadratic


def test_quadratic_known_loss_and_grad():
    obj = QuadraticObjective(np.array([2.0, 8.0]))
    theta = np.array([1.0, 1.0])
    # 0.5 * (2*1 + 8*1) = 5, gradient H @ theta = (2, 8); both exact
    assert eval_loss(obj, theta) == 5.0
    assert np.array_equal(eval_grad(obj, theta), np.array([2.0, 8.0]))


def test_quadratic_matrix_form_matches_diag_form():
    diag = QuadraticObjective(np.array([2.0, 8.0]))
    full = QuadraticObjective(np.diag([2.0, 8.0]))
    theta = np.array([0.3, -1.2])
    assert eval_loss(diag, theta) == pytest.approx(eval_loss(full, theta), rel=1e-15)
    np.testing.assert_allclose(eval_grad(diag, theta), eval_grad(full, theta), rtol=1e-15)


def test_quadratic_rejects_asymmetric_matrix():
    with pytest.raises(ConfigError):
        QuadraticObjective(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_quadratic_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        QuadraticObjective(np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        QuadraticObjective(np.array([]))


def test_hvp_matches_hessian_product_on_diagonal():
    obj = QuadraticObjective(np.array([2.0, 8.0]))
    got = hvp_fd(obj, np.array([1.0, 1.0]), np.array([0.0, 3.0]))
    np.testing.assert_allclose(got, np.array([0.0, 24.0]), rtol=1e-7, atol=1e-9)


def test_hvp_matches_hessian_product_on_random_spd():
    rng = np.random.default_rng(5)
    mat = random_spd_matrix(6, rng)
    obj = QuadraticObjective(mat)
    theta = rng.standard_normal(6)
    v = rng.standard_normal(6)
    np.testing.assert_allclose(hvp_fd(obj, theta, v), mat @ v, rtol=1e-7)


def test_hvp_rejects_zero_direction():
    obj = QuadraticObjective(np.array([2.0, 8.0]))
    with pytest.raises(DegenerateDirectionError):
        hvp_fd(obj, np.zeros(2), np.zeros(2))


# ----------------------------------------------------- analytic vs numeric


def test_rosenbrock_gradient_matches_finite_differences():
    obj = RosenbrockObjective(5)
    rng = np.random.default_rng(1)
    for _ in range(20):
        theta = rng.uniform(-1.5, 1.5, size=5)
        err = np.abs(eval_grad(obj, theta) - central_diff_grad(obj, theta)).max()
        assert err < 1e-4


def test_rosenbrock_minimum_at_ones():
    obj = RosenbrockObjective(4)
    assert eval_loss(obj, np.ones(4)) == 0.0
    assert np.abs(eval_grad(obj, np.ones(4))).max() == 0.0
    with pytest.raises(ConfigError):
        RosenbrockObjective(1)


def test_double_well_gradient_away_from_the_kink():
    obj = DoubleWellObjective()
    crossings = obj.crossing_points()
    rng = np.random.default_rng(2)
    checked = 0
    while checked < 20:
        x = rng.uniform(-3.0, 3.0)
        # the loss is non-differentiable where the basins cross; stay clear
        if crossings.size and np.abs(crossings - x).min() < 0.05:
            continue
        theta = np.array([x])
        err = np.abs(eval_grad(obj, theta) - central_diff_grad(obj, theta)).max()
        assert err < 1e-4
        checked += 1


def test_double_well_is_continuous_at_crossings():
    obj = DoubleWellObjective(centers=(-1.0, 1.0), curvatures=(8.0, 0.5), offsets=(0.0, 0.3))
    for x in obj.crossing_points():
        left = eval_loss(obj, np.array([x - 1e-9]))
        right = eval_loss(obj, np.array([x + 1e-9]))
        assert left == pytest.approx(right, abs=1e-7)


def test_double_well_validation():
    with pytest.raises(ConfigError):
        DoubleWellObjective(curvatures=(1.0, 0.0))


def test_mlp_gradient_matches_finite_differences():
    ds = tiny_dataset()
    obj = MLPObjective((2, 4, 3), ds)
    rng = np.random.default_rng(3)
    for _ in range(5):
        theta = rng.standard_normal(obj.dim) * 0.5
        err = np.abs(eval_grad(obj, theta) - central_diff_grad(obj, theta)).max()
        assert err < 1e-4


def test_mlp_minibatch_gradient_matches_finite_differences():
    ds = tiny_dataset()
    obj = MLPObjective((2, 4, 3), ds)
    batch = Batch(np.array([0, 3, 7, 9]))
    rng = np.random.default_rng(4)
    theta = rng.standard_normal(obj.dim) * 0.5
    err = np.abs(eval_grad(obj, theta, batch) - central_diff_grad(obj, theta, batch)).max()
    assert err < 1e-4


def test_mlp_parameter_count_and_init():
    ds = tiny_dataset()
    obj = MLPObjective((2, 4, 3), ds)
    # (2+1)*4 weights+biases for the hidden layer, (4+1)*3 for the output
    assert obj.dim == 27
    theta = obj.init_params(np.random.default_rng(0))
    assert theta.shape == (obj.dim,)
    assert np.all(np.isfinite(theta))
    # biases start at zero: one per hidden unit plus one per class
    assert int(np.sum(theta == 0.0)) == 4 + 3


def test_mlp_rejects_feature_mismatch():
    ds = tiny_dataset(feature_dim=2)
    with pytest.raises((ConfigError, DimensionError)):
        MLPObjective((3, 4, 3), ds)


# ---------------------------------------------------------- eval contracts


def test_eval_rejects_wrong_dimension():
    obj = QuadraticObjective(np.array([2.0, 8.0]))
    with pytest.raises(DimensionError):
        eval_loss(obj, np.zeros(3))
    with pytest.raises(DimensionError):
        eval_grad(obj, np.zeros(1))


def test_eval_raises_on_nonfinite_results():
    obj = QuadraticObjective(np.array([2.0, 8.0]))
    with np.errstate(over="ignore"), pytest.raises(NumericalError):
        eval_loss(obj, np.array([1e200, 1e200]))


def test_eval_loss_is_pure():
    obj = RosenbrockObjective(3)
    theta = np.array([0.2, -0.4, 1.1])
    before = theta.copy()
    first = eval_loss(obj, theta)
    second = eval_loss(obj, theta)
    assert first == second
    assert np.array_equal(theta, before)
    g = eval_grad(obj, theta)
    g[:] = 0.0  # mutating a returned gradient must not leak into later calls
    assert np.any(eval_grad(obj, theta) != 0.0)


# -------------------------------------------------------------- batch draw


def test_sample_batch_bounds():
    ds = tiny_dataset(n=10)
    rng = np.random.default_rng(0)
    for bad in (0, -1, 11):
        with pytest.raises(BatchSizeError):
            sample_batch(ds, bad, rng)


def test_sample_batch_draws_without_replacement():
    ds = tiny_dataset(n=10)
    rng = np.random.default_rng(0)
    for _ in range(50):
        b = sample_batch(ds, 6, rng)
        assert b.size == 6
        assert len(set(b.indices.tolist())) == 6
        assert b.indices.min() >= 0 and b.indices.max() < 10


def test_sample_batch_is_uniform():
    # index 0 should appear ~ b/n of the time: 10000 draws, mean 320, sd 17.6
    ds = tiny_dataset(n=1000)
    rng = np.random.default_rng(7)
    hits = sum(0 in sample_batch(ds, 32, rng).indices for _ in range(10000))
    assert 232 < hits < 408  # five sigma window


# ----------------------------------------------------------------- dataset


def test_dataset_roundtrip(tmp_path):
    ds = tiny_dataset(n=8)
    path = tmp_path / "data.json"
    save_dataset(ds, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.domain_ids, ds.domain_ids)


def test_dataset_validation():
    with pytest.raises(DimensionError):
        Dataset(np.zeros((3, 2)), np.zeros(4, dtype=np.int64), np.zeros(3, dtype=np.int64))
    with pytest.raises(DimensionError):
        Dataset(np.zeros(3), np.zeros(3, dtype=np.int64), np.zeros(3, dtype=np.int64))
    with pytest.raises(NumericalError):
        Dataset(
            np.array([[np.inf, 0.0]]),
            np.zeros(1, dtype=np.int64),
            np.zeros(1, dtype=np.int64),
        )


def test_dataset_subset():
    ds = tiny_dataset(n=8)
    sub = ds.subset(np.array([1, 3, 5]))
    assert sub.n == 3
    np.testing.assert_array_equal(sub.inputs, ds.inputs[[1, 3, 5]])


# ----------------------------------------------------------------- factory


def test_make_objective_each_kind():
    assert make_objective({"kind": "quadratic", "diag": [2.0, 8.0]}).dim == 2
    assert make_objective({"kind": "rosenbrock", "dim": 4}).dim == 4
    assert make_objective({"kind": "double_well"}).dim == 1
    spec = {"kind": "quadratic", "random_spd": {"dim": 5, "seed": 3}}
    a = make_objective(spec)
    b = make_objective(spec)
    np.testing.assert_array_equal(a.hessian(), b.hessian())
    ds = tiny_dataset()
    assert make_objective({"kind": "mlp", "layer_sizes": [2, 4, 3]}, ds).dim == 27


def test_make_objective_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        make_objective({"kind": "quadratic", "diag": [1.0], "extra": 1})
    with pytest.raises(ConfigError):
        make_objective({"kind": "rosenbrock", "dims": 3})
    with pytest.raises(ConfigError):
        make_objective({"kind": "nope"})
    with pytest.raises(ConfigError):
        make_objective({"diag": [1.0]})
    with pytest.raises(ConfigError):
        make_objective({"kind": "quadratic", "diag": [1.0], "matrix": [[1.0]]})


def test_random_spd_matrix_contract():
    rng = np.random.default_rng(9)
    for _ in range(10):
        mat = random_spd_matrix(6, rng, eig_low=0.5, eig_high=10.0, min_top_gap=1.15)
        np.testing.assert_allclose(mat, mat.T, atol=1e-12)
        eigs = np.sort(np.linalg.eigvalsh(mat))[::-1]
        assert eigs[-1] > 0.45
        assert eigs[0] >= 1.15 * eigs[1] * (1 - 1e-12)
    with pytest.raises(ConfigError):
        random_spd_matrix(0, rng)
    with pytest.raises(ConfigError):
        random_spd_matrix(3, rng, eig_low=0.0)
