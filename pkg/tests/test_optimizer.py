import numpy as np
import pytest

from oracles import adam_scalar
from ofgreg.energy import EnergyConfig, energy, energy_array, local_ncc
from ofgreg.metrics import dice
from ofgreg.optimizer import (
    DivergenceError,
    OptimConfig,
    OptimState,
    adam_step,
    half_dims,
    refine,
    refine_downsampled,
    refine_array,
    refine_pair,
)
from ofgreg.volume import DisplacementField, ScalarVolume
from ofgreg.warp import identity_field, warp_nearest, warp_trilinear


def field(a):
    return DisplacementField.from_array(np.asarray(a, dtype=np.float64))


def zeros_like_grid(grid):
    return field(np.zeros((3,) + grid.dims))


def test_config_invariants():
    with pytest.raises(ValueError):
        OptimConfig(steps=0)
    with pytest.raises(ValueError):
        OptimConfig(lr=0.0)
    assert OptimConfig().lr == 0.1 and OptimConfig().steps == 10


def test_adam_zero_gradient_is_noop(rng):
    u = field(rng.standard_normal((3, 4, 4, 4)))
    out, st = adam_step(u, field(np.zeros(u.data.shape)), OptimState.zeros(u.data.shape))
    np.testing.assert_array_equal(out.data, u.data)
    assert not st.m.any() and not st.v.any() and st.t == 1


def test_adam_first_step_unit_gradient():
    u = field(np.zeros((3, 4, 4, 4)))
    out, _ = adam_step(u, field(np.ones(u.data.shape)), OptimState.zeros(u.data.shape), OptimConfig(lr=0.1))
    np.testing.assert_allclose(out.data, -0.1 / (1 + 1e-8), rtol=1e-15)


def test_adam_matches_scalar_recurrence():
    grads = [0.5, 0.5, -0.2, 1.5]
    u = field(np.full((3, 4, 4, 4), 0.3))
    st = OptimState.zeros(u.data.shape)
    ref = adam_scalar(0.3, grads, 0.1)
    for g, x in zip(grads, ref):
        u, st = adam_step(u, field(np.full(u.data.shape, g)), st)
        np.testing.assert_allclose(u.data, x, rtol=1e-14)
    assert st.t == len(grads)


def test_adam_rejects_nonfinite_and_shape_mismatch():
    u = field(np.zeros((3, 4, 4, 4)))
    g = np.zeros(u.data.shape)
    g[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        adam_step(u, field(g), OptimState.zeros(u.data.shape))
    with pytest.raises(ValueError):
        adam_step(u, field(np.zeros((3, 5, 4, 4))), OptimState.zeros(u.data.shape))


def test_trace_length_and_flag(small_pair):
    _, trace = refine_pair(small_pair, zeros_like_grid(small_pair.grid), OptimConfig(steps=4))
    assert len(trace.energies) == 5
    assert trace.flagged == (trace.energies[-1] > trace.energies[0])
    assert trace.seconds > 0


def test_single_step_equals_one_adam_step(small_pair):
    cfg = OptimConfig(steps=1)
    u0 = zeros_like_grid(small_pair.grid)
    out, _ = refine_pair(small_pair, u0, cfg)
    _, g = energy_array(small_pair.fixed.data, small_pair.moving.data, u0.data, cfg.energy)
    manual, _ = adam_step(u0, field(g), OptimState.zeros(u0.data.shape), cfg)
    np.testing.assert_array_equal(out.data, manual.data)


def textured_volume(n=32):
    """Smooth, flat-free intensity pattern."""
    x = np.arange(n)
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    img = np.sin(X / 3.1) * np.cos(Y / 2.3) + 0.5 * np.sin(Z / 1.7 + X / 5) + 0.02 * X
    return ScalarVolume.from_array(img.astype(np.float32))


def test_self_pair_stays_near_zero():
    # Adam steps have magnitude ~lr whatever the gradient size, so the field
    # jitters around the optimum instead of resting on it
    f = textured_volume()
    u, trace = refine(f, f, identity_field(f.grid))
    assert trace.energies[0] < 1e-6
    assert max(trace.energies) < 0.05
    assert np.abs(u.data).max() <= 2 * OptimConfig().lr


def test_translation_improves_energy_and_ncc(phantom_pair):
    f = phantom_pair.fixed
    shift = np.zeros((3,) + f.grid.dims)
    shift[0] = 2.0
    moving, _ = warp_trilinear(f, field(shift))
    u, trace = refine(f, moving, identity_field(f.grid))
    assert trace.energies[-1] < trace.energies[0]
    before = local_ncc(f, moving)[0]
    after = local_ncc(f, warp_trilinear(moving, u)[0])[0]
    assert after > before


def test_sgd_small_lr_first_step_descends(phantom_pair):
    cfg = OptimConfig(method="sgd", lr=1e-3, steps=1)
    _, trace = refine_pair(phantom_pair, identity_field(phantom_pair.grid), cfg)
    assert trace.energies[1] < trace.energies[0]


def test_refine_deterministic_and_pure(small_pair):
    f_before = small_pair.fixed.data.copy()
    m_before = small_pair.moving.data.copy()
    u0 = field(0.1 * np.ones((3,) + small_pair.grid.dims))
    a, ta = refine_pair(small_pair, u0)
    b, tb = refine_pair(small_pair, u0)
    np.testing.assert_array_equal(a.data, b.data)
    assert ta.energies == tb.energies
    np.testing.assert_array_equal(small_pair.fixed.data, f_before)
    np.testing.assert_array_equal(small_pair.moving.data, m_before)
    np.testing.assert_array_equal(u0.data, 0.1)


def test_refine_rejects_grid_mismatch(small_pair, phantom_pair):
    with pytest.raises(ValueError):
        refine(small_pair.fixed, phantom_pair.moving, identity_field(small_pair.grid))


def test_divergence_is_reported(small_pair, monkeypatch):
    import ofgreg.optimizer as opt
    real = opt.energy_array
    calls = []

    def blows_up(f, m, u, cfg, with_grad=True):
        calls.append(1)
        e, g = real(f, m, u, cfg, with_grad)
        return (np.nan, g) if len(calls) == 3 else (e, g)

    monkeypatch.setattr(opt, "energy_array", blows_up)
    with pytest.raises(DivergenceError) as err:
        refine_pair(small_pair, zeros_like_grid(small_pair.grid))
    assert len(err.value.trace.energies) == 3


def test_nonfinite_init_rejected(small_pair):
    bad = np.zeros((3,) + small_pair.grid.dims)
    bad[0, 3, 3, 3] = np.nan
    with pytest.raises(ValueError):
        refine_array(small_pair.fixed.data, small_pair.moving.data, bad, OptimConfig())


def test_refine_improves_dice(phantom_pair):
    u, _ = refine_pair(phantom_pair, identity_field(phantom_pair.grid))
    before = dice(phantom_pair.fixed_labels, phantom_pair.moving_labels)[1]
    after = dice(phantom_pair.fixed_labels, warp_nearest(phantom_pair.moving_labels, u))[1]
    assert after > before


def test_downsampled_parameter_count():
    assert half_dims((32, 32, 32)) == (16, 16, 16)
    assert half_dims((9, 8, 15)) == (5, 4, 8)
    assert 3 * np.prod(half_dims((32, 32, 32))) * 8 == 3 * 32**3


def test_downsampled_too_small_rejected():
    f = ScalarVolume.from_array(np.random.default_rng(0).random((6, 8, 8)))
    with pytest.raises(ValueError):
        refine_downsampled(f, f, identity_field(f.grid))


def test_downsampled_aligned_pair_near_zero():
    f = textured_volume()
    u, trace = refine_downsampled(f, f, identity_field(f.grid))
    assert u.grid == f.grid
    # Adam jitter of ~lr per coarse step doubles on the fine grid; the peak
    # stays under half a voxel and the typical vector near 0.1
    mag = u.magnitude()
    assert mag.max() < 0.5 and np.median(mag) < 0.15
    assert max(trace.energies) < 0.02


def test_downsample_flag_routes(phantom_pair):
    cfg = OptimConfig(downsample=True, steps=3)
    a, _ = refine_pair(phantom_pair, identity_field(phantom_pair.grid), cfg)
    b, _ = refine_downsampled(phantom_pair.fixed, phantom_pair.moving, identity_field(phantom_pair.grid), cfg)
    np.testing.assert_array_equal(a.data, b.data)


def translated_case():
    from ofgreg.data import PhantomSpec, gen_phantom
    f, labels = gen_phantom(PhantomSpec(), seed=0)
    shift = np.zeros((3,) + f.grid.dims)
    shift[0] = 2.0
    moving, _ = warp_trilinear(f, field(shift))
    return f, labels, moving, warp_nearest(labels, field(shift))


def test_downsampled_reaches_higher_energy_than_full():
    f, _, moving, _ = translated_case()
    zero = identity_field(f.grid)
    full, _ = refine(f, moving, zero)
    half, _ = refine_downsampled(f, moving, zero)
    e0, e_full, e_half = (energy(f, moving, u) for u in (zero, full, half))
    assert e_full < e_half < e0


@pytest.mark.xfail(strict=True, reason="on a 2-voxel translation each coarse step moves twice as far, so in "
                   "10 steps the half-resolution run recovers more of the shift and gains more Dice even "
                   "though its full-resolution energy is higher")
def test_downsampled_lags_full_resolution_in_dice():
    f, labels, moving, moving_labels = translated_case()
    zero = identity_field(f.grid)
    full, _ = refine(f, moving, zero)
    half, _ = refine_downsampled(f, moving, zero)
    gain = lambda u: dice(labels, warp_nearest(moving_labels, u))[1]
    assert gain(half) < gain(full)
