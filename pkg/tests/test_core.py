import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mnar_debias.core import (
    CompletedMatrix,
    EstimatorKind,
    LossKind,
    LossReport,
    MaskMatrix,
    ObservedMatrix,
    PropensityMatrix,
    full_loss,
    ips_loss,
    load_array,
    load_matrix,
    observed_loss,
    propensity_error,
    read_dense_csv,
    read_triplets,
    save_array,
    snips_loss,
    write_dense_csv,
    write_triplets,
)
from oracles import ips_loop, snips_loop


def _random_observed(rng, shape, k):
    present = np.zeros(shape, dtype=bool)
    present.flat[rng.choice(present.size, k, replace=False)] = True
    return ObservedMatrix(rng.integers(1, 6, shape).astype(float), present)


# -- types --------------------------------------------------------------------

def test_mask_rejects_non_binary():
    with pytest.raises(ValueError):
        MaskMatrix(np.array([[0, 2]]))


def test_mask_is_read_only():
    m = MaskMatrix(np.array([[0, 1]]))
    with pytest.raises(ValueError):
        m.data[0, 0] = 1
    assert m.rate() == 0.5


def test_observed_bound_enforced():
    with pytest.raises(ValueError):
        ObservedMatrix(np.array([[6.0]]), np.array([[True]]), phi=5)


def test_observed_shape_mismatch():
    with pytest.raises(ValueError):
        ObservedMatrix(np.zeros((2, 2)), np.zeros((2, 3), dtype=bool))


def test_observed_nan_roundtrip():
    a = np.array([[1.0, np.nan], [np.nan, 4.0]])
    x = ObservedMatrix.from_nan(a)
    assert x.n_observed == 2
    assert np.array_equal(np.isnan(x.to_nan()), np.isnan(a))
    assert x.restrict(np.array([[True, True], [True, False]])).n_observed == 1


def test_propensity_range():
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            PropensityMatrix(np.array([[0.5, bad]]))
    assert PropensityMatrix(np.array([[0.2, 1.0]])).p_min == 0.2


def test_completed_clips():
    c = CompletedMatrix(np.array([[0.0, 7.0]]), 1.0, 5.0)
    assert np.array_equal(c.data, [[1.0, 5.0]])
    assert c.psi == 5.0


def test_loss_report_validation():
    with pytest.raises(ValueError):
        LossReport(LossKind.MSE, EstimatorKind.IPS, -1.0, 3)
    with pytest.raises(ValueError):
        LossReport(LossKind.MSE, EstimatorKind.IPS, 1.0, 0)


# -- losses -------------------------------------------------------------------

def test_observed_loss_zero_residual(rng):
    x = _random_observed(rng, (4, 4), 7)
    assert observed_loss(x.values, x).value == 0.0


def test_observed_loss_single_entry():
    x = ObservedMatrix(np.array([[2.0, 0.0]]), np.array([[True, False]]))
    s = np.zeros((1, 2))
    assert observed_loss(s, x, LossKind.MSE).value == 4.0
    assert observed_loss(s, x, LossKind.MAE).value == 2.0


def test_observed_loss_matches_loop(rng):
    x = _random_observed(rng, (4, 4), 7)
    s = rng.normal(3, 1, (4, 4))
    want = sum((s[u, i] - x.values[u, i]) ** 2 for u, i in zip(*np.nonzero(x.present))) / 7
    assert observed_loss(s, x).value == pytest.approx(want, rel=1e-12)


def test_observed_loss_empty():
    x = ObservedMatrix(np.zeros((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ValueError, match="no observed entries"):
        observed_loss(np.zeros((2, 2)), x)


def test_full_loss_examples(rng):
    xs = np.array([[1.0, 3.0]])
    assert full_loss(xs, xs).value == 0.0
    assert full_loss(np.array([[2.0, 2.0]]), xs, LossKind.MSE).value == 1.0
    assert full_loss(np.array([[2.0, 2.0]]), xs, LossKind.MAE).value == 1.0
    a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    want = sum(abs(a[u, i] - b[u, i]) for u in range(5) for i in range(5)) / 25
    assert full_loss(a, b, LossKind.MAE).value == pytest.approx(want, rel=1e-12)


def test_full_loss_needs_complete():
    x = ObservedMatrix(np.zeros((1, 2)), np.array([[True, False]]))
    with pytest.raises(ValueError, match="full loss requires complete matrix"):
        full_loss(np.zeros((1, 2)), x)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        full_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_ips_unit_weights_equal_full(rng):
    s, xs = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    for k in LossKind:
        assert ips_loss(s, ObservedMatrix.complete(xs), np.ones((3, 4)), k).value == pytest.approx(
            full_loss(s, xs, k).value, rel=1e-14)


def test_ips_hand_example():
    x = ObservedMatrix(np.array([[2.0, 0.0]]), np.array([[True, False]]))
    assert ips_loss(np.array([[1.0, 0.0]]), x, np.array([[0.5, 0.5]])).value == 1.0


def test_ips_invalid_propensity():
    x = ObservedMatrix(np.array([[2.0, 0.0]]), np.array([[True, False]]))
    with pytest.raises(ValueError, match="invalid propensity"):
        ips_loss(np.zeros((1, 2)), x, np.array([[0.0, 0.5]]))


def test_ips_and_snips_match_loops(rng):
    x = _random_observed(rng, (4, 5), 11)
    s = rng.normal(3, 1, (4, 5))
    p = rng.uniform(0.05, 1, (4, 5))
    for k, mse in ((LossKind.MSE, True), (LossKind.MAE, False)):
        assert ips_loss(s, x, p, k).value == pytest.approx(ips_loop(s, x.values, x.present, p, mse), rel=1e-12)
        assert snips_loss(s, x, p, k).value == pytest.approx(snips_loop(s, x.values, x.present, p, mse), rel=1e-12)


def test_snips_constant_weight_equals_observed(rng):
    x = _random_observed(rng, (4, 5), 9)
    s = rng.normal(size=(4, 5))
    assert snips_loss(s, x, np.full((4, 5), 0.3)).value == pytest.approx(observed_loss(s, x).value, rel=1e-12)


def test_snips_equals_ips_when_denominators_match(rng):
    # sum over Omega of 1/P = mn: four observed cells each with P = 4/12
    present = np.zeros((3, 4), bool)
    present[0, :] = True
    x = ObservedMatrix(rng.normal(size=(3, 4)), present)
    p = np.full((3, 4), 1 / 3)
    s = rng.normal(size=(3, 4))
    assert snips_loss(s, x, p).value == pytest.approx(ips_loss(s, x, p).value, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative_and_snips_bounded(seed):
    rng = np.random.default_rng(seed)
    x = _random_observed(rng, (3, 4), int(rng.integers(1, 12)))
    s = rng.normal(size=(3, 4))
    p = rng.uniform(0.01, 1, (3, 4))
    err = (s - x.values)[x.present] ** 2
    sn = snips_loss(s, x, p).value
    assert ips_loss(s, x, p).value >= 0
    assert err.min() - 1e-12 <= sn <= err.max() + 1e-12


def test_propensity_error_examples():
    p = np.full((2, 2), 0.5)
    assert propensity_error(p, p) == (0.0, 0.0)
    mse, mae = propensity_error(p + np.array([[0.1, 0], [0, -0.1]]), p)
    assert mse == pytest.approx(0.005)
    assert mae == pytest.approx(0.05)


# -- serialisation -------------------------------------------------------------

def test_dense_csv_roundtrip(tmp_path, rng):
    x = _random_observed(rng, (3, 4), 6)
    write_dense_csv(tmp_path / "x.csv", x)
    y = read_dense_csv(tmp_path / "x.csv")
    assert np.array_equal(y.present, x.present)
    assert np.array_equal(y.values, x.values)


def test_triplet_roundtrip(tmp_path, rng):
    x = ObservedMatrix(rng.normal(size=(3, 5)), rng.random((3, 5)) < 0.5)
    write_triplets(tmp_path / "x.trip", x)
    y = load_matrix(tmp_path / "x.trip")
    assert y.shape == (3, 5)
    assert np.array_equal(y.present, x.present)
    assert np.array_equal(y.values, x.values)


def test_triplets_zero_indexed(tmp_path):
    (tmp_path / "t.csv").write_text("0,1,4.0\n2,0,1.5\n")
    x = read_triplets(tmp_path / "t.csv")
    assert x.shape == (3, 2)
    assert x.values[0, 1] == 4.0 and x.values[2, 0] == 1.5
    assert x.n_observed == 2


def test_triplets_malformed(tmp_path):
    (tmp_path / "t.csv").write_text("0,1,4.0\n0,x\n")
    with pytest.raises(ValueError, match=":2:"):
        read_triplets(tmp_path / "t.csv")


def test_dense_csv_ragged(tmp_path):
    (tmp_path / "d.csv").write_text("1,2\n3\n")
    with pytest.raises(ValueError, match="ragged"):
        read_dense_csv(tmp_path / "d.csv")


def test_array_roundtrip_exact(tmp_path, rng):
    a = rng.normal(size=(3, 4))
    save_array(tmp_path / "a.csv", a)
    assert np.array_equal(load_array(tmp_path / "a.csv"), a)
