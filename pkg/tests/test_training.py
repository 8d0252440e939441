import numpy as np
import pytest

from ofgreg.data import PhantomSpec, make_dataset
from ofgreg.energy import energy_array
from ofgreg.optimizer import OptimConfig
from ofgreg.predictor import Architecture, init_params, load_params, predict_array
from ofgreg.training import (
    CSV_HEADER,
    Dataset,
    Mode,
    TrainConfig,
    TrainState,
    make_labels,
    ofg_field_loss,
    ofg_step,
    read_log_csv,
    selftrain_run,
    train,
    unsup_step,
)
from ofgreg.volume import ImagePair, ScalarVolume

ARCH = Architecture(levels=1, channels=(4, 8))
OPTIM = OptimConfig(steps=3)


@pytest.fixture(scope="module")
def tiny():
    return Dataset.split(make_dataset(5, seed=2, phantom_spec=PhantomSpec(dims=(16, 16, 16))), 2)


def cfg(**kw):
    base = dict(epochs=2, lr=3e-3, arch=ARCH, optim=OPTIM, seed=4)
    base.update(kw)
    return TrainConfig(**base)


def losses(result):
    return [log.loss for log in result.logs]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="nope")
    for bad in (dict(epochs=0), dict(alpha=-1), dict(prob=1.5), dict(stage_len=0), dict(every_n_epochs=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_split():
    pairs = make_dataset(4, seed=0, phantom_spec=PhantomSpec(dims=(16, 16, 16)))
    ds = Dataset.split(pairs, 1)
    assert [p.name for p in ds.val] == ["pair_003"] and len(ds.train) == 3
    with pytest.raises(ValueError):
        Dataset.split(pairs, 4)


def test_field_loss_gradient(rng):
    a, b = rng.standard_normal((3, 4, 4, 4)), rng.standard_normal((3, 4, 4, 4))
    loss, g = ofg_field_loss(a, b)
    assert loss == pytest.approx(np.mean((a - b) ** 2))
    np.testing.assert_allclose(g, 2 * (a - b) / (3 * 64))


def test_ofg_step_zero_loss_only_decays(tiny, monkeypatch):
    import ofgreg.training as tr
    from ofgreg.optimizer import RefineTrace

    # a refine that returns its input unchanged: the prediction is already optimal
    monkeypatch.setattr(tr, "_refine", lambda pair, u0, ocfg: (np.array(u0, dtype=np.float64), RefineTrace([0.5, 0.5])))
    state = TrainState.fresh(init_params(ARCH, 0))
    c = cfg(weight_decay=0.02)
    new, stats = ofg_step(state, tiny.train[0], c)
    assert stats.loss == 0.0 and not stats.flagged
    np.testing.assert_allclose(new.params.flat(), state.params.flat() * np.float32(1 - c.lr * c.weight_decay), rtol=1e-6)


def test_ofg_revisit_lowers_loss():
    from ofgreg.data import gen_phantom
    from ofgreg.volume import DisplacementField
    from ofgreg.warp import warp_nearest, warp_trilinear

    f, lab = gen_phantom(seed=0)
    shift = np.zeros((3,) + f.grid.dims)
    shift[0] = 2.0
    shift = DisplacementField.from_array(shift)
    pair = ImagePair(f, warp_trilinear(f, shift)[0], lab, warp_nearest(lab, shift), name="shifted")
    state = TrainState.fresh(init_params(Architecture(), 0))
    c = TrainConfig(lr=1e-3)
    _, first = ofg_step(state, pair, c)
    for _ in range(20):
        state, _ = ofg_step(state, pair, c)
    _, later = ofg_step(state, pair, c)
    assert first.loss > 0 and later.loss < first.loss


def test_unsup_loss_is_energy_at_prediction(tiny):
    state = TrainState.fresh(init_params(ARCH, 0))
    pair = tiny.train[1]
    _, stats = unsup_step(state, pair, cfg())
    u, _ = predict_array(state.params, pair.fixed.data, pair.moving.data)
    assert stats.loss == energy_array(pair.fixed.data, pair.moving.data, u, OPTIM.energy, with_grad=False)[0]


def test_unsup_flat_pair_zero_step():
    flat = ScalarVolume.from_array(np.full((16, 16, 16), 0.5, dtype=np.float32))
    pair = ImagePair(flat, flat, name="flat")
    params = init_params(ARCH, 0)
    # a zero head predicts the zero field, so neither energy term has a gradient
    params.tensors["head.w"][:] = 0
    state = TrainState.fresh(params)
    new, stats = unsup_step(state, pair, cfg(weight_decay=0.0))
    assert stats.loss == 1.0
    np.testing.assert_array_equal(new.params.flat(), state.params.flat())


@pytest.mark.parametrize("alpha,beta,mode", [(1.0, 0.0, "ofg"), (0.0, 1.0, "unsup")])
def test_blend_loss_limits(tiny, alpha, beta, mode):
    blend = train(tiny, cfg(mode="blend-loss", alpha=alpha, beta=beta))
    ref = train(tiny, cfg(mode=mode))
    assert losses(blend) == losses(ref)
    np.testing.assert_array_equal(blend.params.flat(), ref.params.flat())


@pytest.mark.parametrize("p,mode", [(1.0, "ofg"), (0.0, "unsup")])
def test_blend_prob_limits(tiny, p, mode):
    blend = train(tiny, cfg(mode="blend-prob", prob=p))
    ref = train(tiny, cfg(mode=mode))
    assert losses(blend) == losses(ref)
    np.testing.assert_array_equal(blend.params.flat(), ref.params.flat())


def test_blend_frequency_alternates(tiny):
    res = train(tiny, cfg(mode="blend-freq", every_n_epochs=2, epochs=3))
    drops = [log.refine_drop for log in res.logs]
    assert drops[0] != 0 and drops[1] == 0 and drops[2] != 0
    assert res.refine_calls == 2 * len(tiny.train)


def test_blend_prob_mixes(tiny):
    res = train(tiny, cfg(mode="blend-prob", prob=0.5, epochs=4))
    assert 0 < res.refine_calls < 4 * len(tiny.train)


def test_selftrain_labels_fixed_within_stage(tiny, monkeypatch):
    import ofgreg.training as tr
    seen = []
    real = tr.supervised_step

    def spy(state, pair, label, c):
        seen.append((pair.name, label.copy()))
        return real(state, pair, label, c)

    monkeypatch.setattr(tr, "supervised_step", spy)
    res = selftrain_run(tiny, cfg(mode="selftrain", stage_len=2, epochs=4))
    assert len(res.logs) == 4
    # epochs 0-1 unsupervised, 2-3 supervised by labels made once at epoch 2
    assert len(seen) == 2 * len(tiny.train)
    by_pair = {}
    for name, label in seen:
        by_pair.setdefault(name, []).append(label)
    for labels in by_pair.values():
        assert len(labels) == 2
        np.testing.assert_array_equal(labels[0], labels[1])


def test_make_labels_with_refinement(tiny):
    params = init_params(ARCH, 0)
    plain = make_labels(params, tiny.train[:1], 0, OPTIM)[0]
    refined = make_labels(params, tiny.train[:1], 3, OPTIM)[0]
    u, _ = predict_array(params, tiny.train[0].fixed.data, tiny.train[0].moving.data)
    np.testing.assert_array_equal(plain, u)
    assert not np.array_equal(refined, plain)


def test_optimized_selftrain_defaults_to_optimizer_steps(tiny, monkeypatch):
    import ofgreg.training as tr
    steps = []
    real = tr.make_labels
    monkeypatch.setattr(tr, "make_labels", lambda p, pairs, n, o: steps.append(n) or real(p, pairs, n, o))
    train(tiny, cfg(mode="selftrain-opt", stage_len=1, epochs=2))
    assert steps == [OPTIM.steps]


def test_training_deterministic_and_pure(tiny, tmp_path):
    before = [p.moving.data.copy() for p in tiny.train]
    a = train(tiny, cfg(mode="ofg"), out_dir=tmp_path / "a")
    b = train(tiny, cfg(mode="ofg"), out_dir=tmp_path / "b")
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]
    assert strip(read_log_csv(tmp_path / "a" / "metrics.csv")) == strip(read_log_csv(tmp_path / "b" / "metrics.csv"))
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())
    for p, m in zip(tiny.train, before):
        np.testing.assert_array_equal(p.moving.data, m)


def test_outputs_written(tiny, tmp_path):
    res = train(tiny, cfg(mode="unsup", epochs=3), out_dir=tmp_path)
    rows = read_log_csv(tmp_path / "metrics.csv")
    assert tuple(rows[0].keys()) == CSV_HEADER and len(rows) == 3
    assert all(r["mode"] == "unsup" for r in rows)
    best = load_params(tmp_path / "ckpt_best.ofgp")
    np.testing.assert_array_equal(best.flat(), res.best_params.flat())
    np.testing.assert_array_equal(load_params(tmp_path / "ckpt_last.ofgp").flat(), res.params.flat())
    assert res.logs[res.best_epoch].dice == max(log.dice for log in res.logs)


def test_refine_drop_and_flags_logged(tiny):
    res = train(tiny, cfg(mode="ofg"))
    assert res.refine_calls == 2 * len(tiny.train)
    assert all(np.isfinite(log.refine_drop) for log in res.logs)
    assert 0.0 <= res.flag_rate <= 1.0


def test_empty_dataset_rejected(tiny):
    with pytest.raises(ValueError):
        train(Dataset(tiny.train, []), cfg())
