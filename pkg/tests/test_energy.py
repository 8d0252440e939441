import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import local_ncc_naive
from ofgreg.energy import (
    EnergyConfig,
    box_sum,
    energy,
    energy_grad,
    field_mse,
    field_mse_grad,
    local_ncc,
    mse_similarity,
    mse_similarity_grad,
    ncc_grad,
    smoothness,
    smoothness_grad,
)
from ofgreg.gradcheck import (
    central_difference,
    check_energy_grad,
    check_field_mse_grad,
    check_mse_grad,
    check_ncc_grad,
    check_smoothness_grad,
    relative_errors,
)
from ofgreg.volume import DisplacementField, ScalarVolume
from ofgreg.warp import identity_field, trilinear_array

CFG = EnergyConfig(ncc_window=5)


def vol(a):
    return ScalarVolume.from_array(np.asarray(a, dtype=np.float64))


def field(a):
    return DisplacementField.from_array(np.asarray(a, dtype=np.float64))


def test_config_validation():
    with pytest.raises(ValueError):
        EnergyConfig(ncc_window=4)
    with pytest.raises(ValueError):
        EnergyConfig(reg_weight=-1)
    assert EnergyConfig(similarity="mse").similarity.value == "mse"


def test_box_sum_matches_direct(rng):
    a = rng.random((6, 7, 5))
    out = box_sum(a, 1)
    for p in [(0, 0, 0), (3, 3, 2), (5, 6, 4), (2, 0, 4)]:
        sl = tuple(slice(max(c - 1, 0), c + 2) for c in p)
        assert out[p] == pytest.approx(a[sl].sum(), rel=1e-12)


def test_local_ncc_matches_naive(rng):
    f, w = rng.random((7, 6, 8)), rng.random((7, 6, 8))
    mean, cc = local_ncc(vol(f), vol(w), CFG)
    ref = local_ncc_naive(f, w, 5, 1e-5)
    np.testing.assert_allclose(cc.data, ref, rtol=1e-8, atol=1e-12)
    assert mean == pytest.approx(ref.mean(), rel=1e-10)


def test_self_correlation_near_one(rng):
    f = vol(rng.random((8, 8, 8)))
    mean, cc = local_ncc(f, f, CFG)
    assert cc.data.min() > 0.99 and cc.data.max() <= 1.0 + 1e-6


def test_flat_windows_score_zero():
    f = np.zeros((8, 8, 8))
    f[:4] = 1.0
    _, cc = local_ncc(vol(f), vol(f), EnergyConfig(ncc_window=3))
    assert cc.data[0, 0, 0] == 0.0 and cc.data[3, 0, 0] > 0.99


def test_affine_intensity_invariance(rng):
    f = rng.random((8, 8, 8))
    mean, cc = local_ncc(vol(f), vol(3.0 * f - 0.7), CFG)
    assert cc.data.min() > 0.99


def test_constant_volumes_give_zero():
    mean, cc = local_ncc(vol(np.full((6, 6, 6), 2.0)), vol(np.full((6, 6, 6), 5.0)), CFG)
    assert np.abs(cc.data).max() < 1e-12


def test_window_larger_than_grid_rejected():
    with pytest.raises(ValueError):
        local_ncc(vol(np.zeros((4, 8, 8))), vol(np.zeros((4, 8, 8))), CFG)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ncc_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    f, w = r.random((6, 6, 6)), r.random((6, 6, 6))
    m1, c1 = local_ncc(vol(f), vol(w), CFG)
    m2, c2 = local_ncc(vol(w), vol(f), CFG)
    np.testing.assert_allclose(c1.data, c2.data, rtol=1e-12, atol=1e-15)
    assert c1.data.min() >= 0.0 and c1.data.max() <= 1.0 + 1e-6


def test_ncc_grad_constant_warped_is_zero(rng):
    g = ncc_grad(vol(rng.random((6, 6, 6))), vol(np.full((6, 6, 6), 0.4)), CFG)
    assert np.abs(g.data).max() < 1e-9


def test_ncc_grad_fd_random(rng):
    assert check_ncc_grad(rng, samples=100).max_rel_error < 1e-3


def test_ncc_grad_vanishes_at_self_pair(rng):
    """fixed == warped is a maximum of the similarity, so the gradient is ~0."""
    f = rng.random((8, 8, 8))
    g = ncc_grad(vol(f), vol(f), CFG).data
    g_off = ncc_grad(vol(f), vol(f + 0.3 * rng.random(f.shape)), CFG).data
    assert np.abs(g).max() < 1e-5 * np.abs(g_off).max()


def test_mse_similarity_examples(rng):
    a = vol(rng.random((5, 5, 5)))
    assert mse_similarity(a, a) == 0
    assert np.abs(mse_similarity_grad(a, a).data).max() == 0
    assert mse_similarity(vol(np.zeros((4, 4, 4))), vol(np.ones((4, 4, 4)))) == 1.0


def test_mse_grad_fd(rng):
    assert check_mse_grad(rng).max_rel_error < 1e-6


def test_smoothness_examples():
    assert smoothness(field(np.zeros((3, 5, 5, 5)))) == 0
    const = np.zeros((3, 5, 5, 5))
    const[0], const[1], const[2] = 3, 1, -2
    assert smoothness(field(const)) == 0


def test_smoothness_forward_difference_value():
    u = np.zeros((3, 4, 4, 4))
    u[0, 1, 0, 0] = 1.0
    # voxel (1,0,0) differs from (0,0,0), (2,0,0), (1,1,0), (1,0,1): four unit differences
    assert smoothness(field(u)) == 4.0


def test_smoothness_grad_fd(rng):
    assert check_smoothness_grad(rng).max_rel_error < 1e-4


def test_energy_identical_images_zero_field(phantom_pair):
    e = energy(phantom_pair.fixed, phantom_pair.fixed, identity_field(phantom_pair.grid), CFG)
    _, cc = local_ncc(phantom_pair.fixed, phantom_pair.fixed, CFG)
    assert e == pytest.approx(1 - cc.data.mean(), abs=1e-9)
    assert e < energy(phantom_pair.fixed, phantom_pair.moving, identity_field(phantom_pair.grid), CFG)


def test_energy_mse_mode():
    e = energy(vol(np.zeros((4, 4, 4))), vol(np.ones((4, 4, 4))), field(np.zeros((3, 4, 4, 4))),
               EnergyConfig(similarity="mse"))
    assert e == 1.0


def test_energy_grad_flat_image_is_zero():
    flat = vol(np.full((6, 6, 6), 0.5))
    g = energy_grad(flat, flat, field(np.zeros((3, 6, 6, 6))), CFG)
    assert np.abs(g.data).max() == 0


def test_energy_descent_step(small_pair):
    u = field(np.zeros((3,) + small_pair.grid.dims))
    e0 = energy(small_pair.fixed, small_pair.moving, u, CFG)
    g = energy_grad(small_pair.fixed, small_pair.moving, u, CFG).data
    e1 = energy(small_pair.fixed, small_pair.moving, field(-1e-1 * g / np.abs(g).max() * 1e-2), CFG)
    assert e1 < e0


@pytest.mark.parametrize("similarity,tol", [("ncc", 1e-3), ("mse", 1e-4)])
def test_energy_grad_fd(rng, similarity, tol):
    assert check_energy_grad(rng, similarity, samples=100).max_rel_error < tol


def test_energy_reg_weight_zero_ignores_roughness(rng):
    f = vol(rng.random((6, 6, 6)))
    rough = np.zeros((3, 6, 6, 6))
    rough[:, ::2] = 0.3
    rough[:, 1::2] = -0.3
    cfg0 = EnergyConfig(ncc_window=3, reg_weight=0.0)
    warped, _ = trilinear_array(f.data, rough)
    assert energy(f, f, field(rough), cfg0) == pytest.approx(1 - local_ncc(f, vol(warped), cfg0)[0], abs=1e-12)


def test_energy_is_similarity_plus_mean_smoothness(rng):
    f, m = vol(rng.random((6, 6, 6))), vol(rng.random((6, 6, 6)))
    u = field(0.3 * rng.standard_normal((3, 6, 6, 6)))
    cfg = EnergyConfig(ncc_window=3, reg_weight=2.5)
    warped, _ = trilinear_array(m.data, u.data)
    sim = 1 - local_ncc(f, vol(warped), cfg)[0]
    assert energy(f, m, u, cfg) == pytest.approx(sim + 2.5 * smoothness(u) / (9 * 216), rel=1e-12)


def test_energy_huge_reg_prefers_translation(rng):
    f = vol(rng.random((6, 6, 6)))
    cfg = EnergyConfig(ncc_window=3, reg_weight=1e6)
    const = np.full((3, 6, 6, 6), 0.4)
    wiggly = const + 0.01 * rng.standard_normal(const.shape)
    assert energy(f, f, field(const), cfg) < energy(f, f, field(wiggly), cfg)


def test_field_mse_examples():
    z = field(np.zeros((3, 4, 4, 4)))
    assert field_mse(z, z) == 0
    assert field_mse(z, field(np.ones((3, 4, 4, 4)))) == 1.0


def test_field_mse_grad_formula(rng):
    a, b = rng.standard_normal((3, 4, 4, 4)), rng.standard_normal((3, 4, 4, 4))
    g = field_mse_grad(field(a), field(b)).data
    np.testing.assert_allclose(g, 2 * (a - b) / (3 * 64))
    assert check_field_mse_grad(rng).max_rel_error < 1e-6


def test_field_mse_grid_mismatch():
    with pytest.raises(ValueError):
        field_mse(field(np.zeros((3, 4, 4, 4))), field(np.zeros((3, 5, 4, 4))))
