import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gasfusion import models as M
from gasfusion.data import GasClass, GenConfig, gen_dataset, split
from gasfusion.errors import EmptyDataset, InvalidDistribution, InvalidShape, ModalityMissing
from gasfusion.modelfile import dumps, load_bundle, loads, save_bundle
from gasfusion.errors import FormatError
from gasfusion.optim import TrainConfig


@pytest.fixture(scope="module")
def tiny():
    ds = gen_dataset(GenConfig(samples_per_class=25))
    return split(ds, seed=7)


@pytest.fixture(scope="module", params=M.KINDS)
def bundle(request):
    return M.init_bundle(request.param, seed=3)


def test_fresh_model_probs_on_simplex(bundle, tiny):
    p = M.predict_proba(bundle, tiny[2])
    assert p.shape == (len(tiny[2]), 4)
    assert np.all(np.isfinite(p)) and np.all(p > 0)
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-9)


def test_forward_is_pure(bundle, tiny):
    s = tiny[0][0]
    a, b = M.forward(bundle, s), M.forward(bundle, s)
    assert np.array_equal(a, b)
    assert np.array_equal(M.predict_proba(bundle, [s, s])[0], M.predict_proba(bundle, [s, s])[1])


def test_batched_matches_single(bundle, tiny):
    samples = tiny[1][:5]
    batch = M.predict_proba(bundle, samples)
    for i, s in enumerate(samples):
        np.testing.assert_allclose(M.forward(bundle, s), batch[i], rtol=0, atol=1e-15)


def test_modality_missing(tiny):
    s = tiny[0][0]

    class SensorOnly:
        sensor, thermal = s.sensor, None

    class ImageOnly:
        sensor, thermal = None, s.thermal

    with pytest.raises(ModalityMissing):
        M.forward(M.init_bundle("early-fusion"), SensorOnly())
    with pytest.raises(ModalityMissing):
        M.forward(M.init_bundle("early-fusion"), ImageOnly())
    with pytest.raises(ModalityMissing):
        M.forward(M.init_bundle("lstm"), ImageOnly())
    M.forward(M.init_bundle("lstm"), SensorOnly())
    M.forward(M.init_bundle("cnn"), ImageOnly())


def test_zero_lstm_weights_give_constant_feature(tiny):
    b = M.init_bundle("lstm", seed=1)
    for k in b.params:
        if k.startswith("lstm.") and not k.startswith("lstm.feature"):
            b.params[k] = np.zeros_like(b.params[k])
    probs = M.predict_proba(b, tiny[2])
    assert np.all(probs == probs[0])
    f_lstm = np.maximum(b.params["lstm.feature.bias"], 0.0)
    expect = M.K.softmax((f_lstm @ b.params["head.weights"] + b.params["head.bias"])[None])[0]
    np.testing.assert_allclose(probs[0], expect, rtol=0, atol=1e-15)


def test_branch_isolation(tiny):
    b = M.init_bundle("early-fusion", seed=5)
    samples = tiny[0][:6]
    batch = M.encode(samples, b.kind, b.spec, with_labels=False)
    f_cnn, f_lstm = M.branch_features(b, batch)
    # swap sensor inputs around: with the sensor feature zeroed the output depends on images only
    shuffled = M.encode(samples[::-1], b.kind, b.spec, with_labels=False)
    shuffled.images = batch.images
    g_cnn, _ = M.branch_features(b, shuffled)
    zero = np.zeros_like(f_lstm)
    a, _ = M.fused_logits(b.params, f_cnn, zero)
    c, _ = M.fused_logits(b.params, g_cnn, zero)
    assert np.array_equal(a, c)
    # and symmetrically for the sensor branch
    shuffled = M.encode(samples[::-1], b.kind, b.spec, with_labels=False)
    shuffled.sensors = batch.sensors
    _, g_lstm = M.branch_features(b, shuffled)
    a, _ = M.fused_logits(b.params, np.zeros_like(f_cnn), f_lstm)
    c, _ = M.fused_logits(b.params, np.zeros_like(f_cnn), g_lstm)
    assert np.array_equal(a, c)


def test_cnn_spec_shapes():
    assert M.CnnSpec().trunk_shape() == (32, 2, 2)
    assert M.CnnSpec(input_size=(46, 46)).trunk_shape() == (32, 4, 4)
    with pytest.raises(InvalidShape):
        M.CnnSpec(input_size=(32, 32))
    with pytest.raises(ValueError):
        M.CnnSpec(filters=(8, 16))
    with pytest.raises(ValueError):
        M.FusionSpec(lstm=M.LstmSpec(feature_dim=16))


def test_regularizer_placement():
    regs = M.regularizers("cnn", M.CnnSpec())
    assert set(regs) == {"cnn.conv1.kernels", "cnn.conv2.kernels"}
    assert all(v == (0.005, 0.005) for v in regs.values())
    lregs = M.regularizers("lstm", M.LstmSpec())
    assert set(lregs) == {f"lstm.{m}_{g}" for m in "WU" for g in "ifog"}
    assert all(v == (0.0, 0.005) for v in lregs.values())
    fregs = M.regularizers("early-fusion", M.FusionSpec())
    assert set(fregs) == set(regs) | set(lregs)


def test_init_deterministic():
    a, b = M.init_bundle("early-fusion", seed=9), M.init_bundle("early-fusion", seed=9)
    assert a.params.keys() == b.params.keys()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = M.init_bundle("early-fusion", seed=10)
    assert not np.array_equal(a.params["head.weights"], c.params["head.weights"])


def test_zero_epochs_is_noop(tiny):
    b = M.init_bundle("cnn", seed=2)
    b2, hist = M.train(b, tiny[0], tiny[1], TrainConfig(epochs=0))
    assert hist == []
    assert all(np.array_equal(b.params[k], b2.params[k]) for k in b.params)


def test_train_errors(tiny):
    b = M.init_bundle("lstm")
    with pytest.raises(EmptyDataset):
        M.train(b, [], tiny[1], TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        M.train(b, tiny[0][:4], (), TrainConfig(epochs=1, batch_size=8))
    with pytest.raises(ValueError):
        M.train(b, tiny[0], tiny[0][:3], TrainConfig(epochs=1))


@pytest.mark.parametrize("kind", M.KINDS)
def test_single_sample_overfit(kind, tiny):
    b = M.init_bundle(kind, seed=4)
    one = [tiny[0][0]]
    trained, hist = M.train(b, one, (), TrainConfig(lr0=0.01, epochs=200, batch_size=1))
    loss, acc = M.evaluate_batch(kind, trained.spec, trained.params, M.encode(one, kind, trained.spec))
    assert hist[-1]["train_loss"] < 0.01
    assert loss < 0.01 and acc == 1.0


@pytest.mark.parametrize("kind", M.KINDS)
def test_training_deterministic_and_reduces_loss(kind, tiny):
    cfg = TrainConfig(epochs=3, batch_size=16, seed=11)
    b = M.init_bundle(kind, seed=11)
    b1, h1 = M.train(b, tiny[0], tiny[1], cfg)
    b2, h2 = M.train(b, tiny[0], tiny[1], cfg)
    assert all(np.array_equal(b1.params[k], b2.params[k]) for k in b1.params)
    assert h1 == h2
    assert h1[-1]["train_loss"] < h1[0]["train_loss"]
    assert b1.meta["epochs_run"] == 3 and b1.meta["seed"] == 11
    assert set(h1[0]) == {"epoch", "train_loss", "train_accuracy", "penalty", "val_loss", "val_accuracy"}


def test_dropout_inference_law(tiny):
    """Inference ignores the dropout rate the model was built with."""
    with_do = M.init_bundle("cnn", M.CnnSpec(dropout=0.25), seed=6)
    without = M.init_bundle("cnn", M.CnnSpec(dropout=0.0), seed=6)
    assert all(np.array_equal(with_do.params[k], without.params[k]) for k in with_do.params)
    a, b = M.predict_proba(with_do, tiny[2]), M.predict_proba(without, tiny[2])
    assert np.array_equal(a, b)


def test_late_fusion_examples():
    pa, pb = [0.7, 0.1, 0.1, 0.1], [0.2, 0.5, 0.2, 0.1]
    np.testing.assert_allclose(M.late_fuse_max(pa, pb), [0.4667, 0.3333, 0.1333, 0.0667], atol=1e-4)
    np.testing.assert_allclose(M.late_fuse_avg(pa, pb), [0.45, 0.3, 0.15, 0.1], atol=1e-15)
    assert np.array_equal(M.late_fuse_max(pa, pa), np.array(pa) / sum(pa))
    np.testing.assert_allclose(M.late_fuse_avg(pa, pa), pa, atol=0)


@pytest.mark.parametrize("bad", [[0.5, 0.5, 0.5, 0.5], [1.2, -0.2, 0, 0], [np.nan, 0, 0, 1]])
def test_late_fusion_rejects_non_simplex(bad):
    ok = [0.25] * 4
    for rule in M.LATE_RULES.values():
        with pytest.raises(InvalidDistribution):
            rule(bad, ok)
        with pytest.raises(InvalidDistribution):
            rule(ok, bad)


simplex = st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).filter(lambda v: sum(v) > 1e-3).map(
    lambda v: np.array(v) / sum(v))


@settings(max_examples=200, deadline=None)
@given(simplex, simplex)
def test_late_fusion_laws(pa, pb):
    mx = M.late_fuse_max(pa, pb)
    assert abs(mx.sum() - 1.0) <= 1e-9
    assert int(np.argmax(mx)) in (int(np.argmax(pa)), int(np.argmax(pb)))
    assert np.array_equal(mx, M.late_fuse_max(pb, pa))
    avg = M.late_fuse_avg(pa, pb)
    assert abs(avg.sum() - 1.0) <= 1e-12
    assert np.array_equal(avg, M.late_fuse_avg(pb, pa))


def test_predict_class():
    assert M.predict_class([1, 0, 0, 0]) is GasClass.NoGas
    assert M.predict_class([0.25] * 4) is GasClass.NoGas
    assert M.predict_class([0.1, 0.2, 0.6, 0.1]) is GasClass.Smoke
    assert M.predict_class([0.1, 0.4, 0.1, 0.4]) is GasClass.Perfume


def test_spec_dict_round_trip():
    for kind in M.KINDS:
        spec = M.default_spec(kind)
        assert M.spec_from_dict(kind, M.spec_to_dict(spec)) == spec
    with pytest.raises(ValueError):
        M.default_spec("gru")


# --------------------------------------------------------------------------
# model file
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tiny):
    b = M.init_bundle("early-fusion", seed=8)
    return M.train(b, tiny[0], tiny[1], TrainConfig(epochs=1, batch_size=16))[0]


def test_model_file_round_trip(trained, tiny, tmp_path):
    save_bundle(trained, tmp_path / "m.gfm")
    back = load_bundle(tmp_path / "m.gfm")
    assert back.kind == trained.kind and back.spec == trained.spec and back.meta == trained.meta
    assert back.params.keys() == trained.params.keys()
    assert all(np.array_equal(back.params[k], trained.params[k]) for k in trained.params)
    assert back.adam.t == trained.adam.t
    assert all(np.array_equal(back.adam.m[k], trained.adam.m[k]) for k in trained.adam.m)
    assert all(np.array_equal(back.adam.v[k], trained.adam.v[k]) for k in trained.adam.v)
    assert np.array_equal(M.predict_proba(back, tiny[2]), M.predict_proba(trained, tiny[2]))
    assert dumps(back) == dumps(trained)


def test_model_file_without_optimizer_state():
    b = M.init_bundle("lstm", seed=1)
    back = loads(dumps(b))
    assert back.adam is None
    assert all(np.array_equal(back.params[k], b.params[k]) for k in b.params)


@pytest.mark.parametrize("mangle", [
    lambda blob: b"NOTAMODL" + blob[8:],
    lambda blob: blob[:-8],
    lambda blob: blob + b"\x00",
    lambda blob: blob[:8] + b"\x09\x00\x00\x00" + blob[12:],
    lambda blob: blob[:10],
])
def test_model_file_corruption(mangle, tmp_path):
    blob = dumps(M.init_bundle("lstm"))
    path = tmp_path / "bad.gfm"
    path.write_bytes(mangle(blob))
    with pytest.raises(FormatError, match="bad.gfm"):
        load_bundle(path)
