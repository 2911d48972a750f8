import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gciforge.frame_dataset import REPR_NAMES, FrameDataset, RepresentationSet
from gciforge.gci_models import (CHANNELS, MAGIC, CheckpointError, FinalModel, JointModel, SingleColumnModel,
                                 TrainConfig, build_head, build_single_column, decode_checkpoint,
                                 encode_checkpoint, fit, fuse_posteriors, load_checkpoint, load_model,
                                 predict_frame_probs, save_checkpoint, to_checkpoint, train_joint,
                                 train_single_column)
from gciforge.nn import Conv1d, Dense

probs = st.floats(0, 1, allow_nan=False)


def toy_dataset(n=200, seed=0, rid="toy"):
    """Negative spike somewhere in the frame for positives, zeros for negatives; all four channels alike."""
    g = np.random.default_rng(seed)
    labels = (np.arange(n) % 2).astype(np.uint8)
    frames = np.zeros((n, 4, 16))
    where = g.integers(0, 16, n)
    frames[labels == 1, :, where[labels == 1]] = -1.0
    frames += g.normal(0, 0.01, frames.shape)
    return FrameDataset(frames, labels, np.full(n, rid))


# -- architecture ------------------------------------------------------------ #

def test_single_column_layout():
    net = build_single_column(0)
    convs = [l for l in net if isinstance(l, Conv1d)]
    assert [c.out_channels for c in convs] == list(CHANNELS)
    assert all(c.kernel_size == 3 for c in convs)
    assert not any("Pool" in l.kind for l in net)
    assert isinstance(net.layers[-2], Dense) and net.layers[-2].in_dim == 16 * 128
    assert net.forward(np.zeros((2, 1, 16))).shape == (2, 1)
    assert net.n_params() < 1_000_000


# -- fusion ------------------------------------------------------------------ #

def test_fusion_examples():
    assert fuse_posteriors(0.9, 0.9) == pytest.approx(0.81 / 0.82, abs=1e-4)
    assert fuse_posteriors(0.9, 0.9) == pytest.approx(0.9878, abs=1e-4)
    assert fuse_posteriors(0.3, 0.0) < 1e-6
    assert fuse_posteriors(0.3, 1.0) > 1 - 1e-6
    assert fuse_posteriors(0.2, 0.7, rule="max") == 0.7
    with pytest.raises(ValueError):
        fuse_posteriors(0.2, 0.7, rule="mean")


@given(probs.filter(lambda p: 1e-7 <= p <= 1 - 1e-7))
def test_fusion_neutral_element(x):
    assert fuse_posteriors(0.5, x) == pytest.approx(x, abs=1e-12)


@given(probs, probs, probs)
def test_fusion_symmetric_and_monotone(a, b, c):
    assert fuse_posteriors(a, b) == fuse_posteriors(b, a)
    lo, hi = min(b, c), max(b, c)
    assert fuse_posteriors(a, lo) <= fuse_posteriors(a, hi)


@given(st.floats(0.5, 1, exclude_min=True), st.floats(0.5, 1, exclude_min=True))
def test_fusion_reinforces_agreeing_evidence(a, b):
    assert fuse_posteriors(a, b) >= max(min(a, 1 - 1e-7), min(b, 1 - 1e-7)) - 1e-15
    assert fuse_posteriors(1 - a, 1 - b) <= min(max(1 - a, 1e-7), max(1 - b, 1e-7)) + 1e-15


# -- training ---------------------------------------------------------------- #

@pytest.fixture(scope="module")
def toy_models():
    tr, va = toy_dataset(200, 0, "a"), toy_dataset(100, 1, "b")
    cfg = TrainConfig(epochs=8, batch_size=32, lr=1e-3)
    out = {}
    for name in ("LPF_S", "PC_LPF_S", "PC_LPF_LPR"):
        out[name] = train_single_column(name, tr, va, seed=11, cfg=cfg)
    return tr, va, cfg, out


def test_toy_training_separates_classes(toy_models):
    _, va, _, out = toy_models
    model, res = out["LPF_S"]
    acc = np.mean((model.predict(va.representation("LPF_S")) >= 0.5) == va.labels)
    assert acc >= 0.95
    assert res.history[0][0] == 1


def test_best_so_far_selection(toy_models):
    _, _, _, out = toy_models
    for _, res in out.values():
        vals = [v for _, _, v in res.history]
        assert res.best_val == min(vals)
        assert res.best_val == vals[res.best_epoch - 1]
        assert all(res.best_val <= v for v in vals[:res.best_epoch])


def test_training_is_deterministic(toy_models):
    tr, va, cfg, out = toy_models
    again, _ = train_single_column("LPF_S", tr, va, seed=11, cfg=cfg)
    assert encode_checkpoint(to_checkpoint(again)) == encode_checkpoint(to_checkpoint(out["LPF_S"][0]))


def test_single_class_training_set_is_rejected():
    ds = toy_dataset(20)
    one = FrameDataset(ds.frames, np.zeros(20, np.uint8), ds.recording_ids)
    with pytest.raises(ValueError):
        train_single_column("LPF_S", one, ds, seed=0)
    with pytest.raises(ValueError):
        train_single_column("nope", ds, ds, seed=0)


def test_early_stopping_patience():
    # A learning rate of zero can never improve, so training stops after `patience` epochs.
    ds = toy_dataset(64)
    net = build_single_column(0)
    res = fit(net, ds.representation("LPF_S"), ds.labels, ds.representation("LPF_S"), ds.labels,
              TrainConfig(epochs=30, batch_size=32, lr=0.0, patience=3), seed=0)
    assert len(res.history) == 4 and res.stopped_early and res.best_epoch == 1


def test_joint_keeps_columns_frozen(toy_models):
    tr, va, cfg, out = toy_models
    m3, m4 = out["PC_LPF_S"][0], out["PC_LPF_LPR"][0]
    before = encode_checkpoint(to_checkpoint(m3)) + encode_checkpoint(to_checkpoint(m4))
    joint, res = train_joint(m3, m4, tr, va, seed=2, cfg=cfg)
    after = encode_checkpoint(to_checkpoint(m3)) + encode_checkpoint(to_checkpoint(m4))
    assert before == after
    assert joint.head.layers[0].params["weight"].shape == (4096, 1)
    # Model 3's own head on the joint's column features reproduces Model 3 exactly.
    feats = joint.features(va.frames)[:, :2048]
    head3 = m3.net.layers[-2:]
    z = feats
    for layer in head3:
        z = layer.forward(z)
    assert np.array_equal(z[:, 0], m3.predict(va.representation("PC_LPF_S")))
    assert res.best_val <= min(out["PC_LPF_S"][1].best_val, out["PC_LPF_LPR"][1].best_val) + 0.02


def test_joint_rejects_wrong_columns(toy_models):
    tr, va, cfg, out = toy_models
    with pytest.raises(ValueError):
        train_joint(out["LPF_S"][0], out["PC_LPF_LPR"][0], tr, va, seed=0, cfg=cfg)


def test_zero_head_is_constant_one_half(toy_models):
    _, va, _, out = toy_models
    head = build_head(4096)
    for name, value in head.named_params().items():
        head.set_param(name, np.zeros_like(value))
    joint = JointModel(out["PC_LPF_S"][0], out["PC_LPF_LPR"][0], head)
    assert np.all(joint.head.forward(np.zeros((3, 4096))) == 0.5)
    assert np.all(joint.predict(va.frames[:5]) == 0.5)


# -- inference --------------------------------------------------------------- #

def _final(toy_models):
    _, _, _, out = toy_models
    joint = JointModel(out["PC_LPF_S"][0], out["PC_LPF_LPR"][0], build_head(4096, seed=1))
    return FinalModel(out["LPF_S"][0], joint)


def test_predict_lengths_and_translation_invariance(toy_models):
    final = _final(toy_models)
    z = np.zeros(16000)
    p = predict_frame_probs(final, RepresentationSet(z, z, z, z))
    assert len(p) == 1000
    assert np.all(p == p[0])
    with pytest.raises(ValueError):
        predict_frame_probs(final, RepresentationSet(*[np.zeros(10)] * 4))


def test_spike_frames_score_higher(toy_models):
    final = _final(toy_models)
    x = np.zeros(16 * 50)
    x[16 * np.arange(1, 50, 4) + 5] = -1.0
    p = predict_frame_probs(final, RepresentationSet(x, x, np.minimum(x, 0), np.minimum(x, 0)))
    pos = np.zeros(50, bool)
    pos[1::4] = True
    assert p[pos].mean() > p[~pos].mean()


# -- checkpoints ------------------------------------------------------------- #

def test_checkpoint_round_trip(tmp_path, toy_models):
    tr, va, cfg, out = toy_models
    model = out["LPF_S"][0]
    path = tmp_path / "m.gcn"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    loaded = load_model(path, expect="single")
    save_checkpoint(tmp_path / "again.gcn", loaded)
    assert (tmp_path / "again.gcn").read_bytes() == raw
    x = va.representation("LPF_S")
    assert np.array_equal(loaded.predict(x), model.predict(x))
    ck = load_checkpoint(path)
    for k, v in to_checkpoint(model).arrays.items():
        assert np.array_equal(ck.arrays[k], v)


def test_joint_checkpoint_round_trip(tmp_path, toy_models):
    final = _final(toy_models)
    save_checkpoint(tmp_path / "j.gcn", final.joint)
    j = load_model(tmp_path / "j.gcn", expect="joint")
    x = toy_dataset(20, 5).frames
    assert np.array_equal(j.predict(x), final.joint.predict(x))


def test_checkpoint_errors(tmp_path, toy_models):
    model = toy_models[3]["LPF_S"][0]
    raw = encode_checkpoint(to_checkpoint(model))
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:-8])
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw + b"\0" * 8)
    (tmp_path / "m.gcn").write_bytes(raw)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.gcn", expect="joint")
    small = SingleColumnModel(build_single_column(0, channels=(8, 8, 8, 8, 8)), "LPF_S")
    save_checkpoint(tmp_path / "s.gcn", small)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "s.gcn", expect="single")
    with pytest.raises(FileNotFoundError, match="nothere"):
        load_checkpoint(tmp_path / "nothere.gcn")


def test_checkpoint_metadata(toy_models):
    model = toy_models[3]["LPF_S"][0]
    meta = to_checkpoint(model).metadata
    assert meta["representation"] == "LPF_S" and meta["seed"] == 11
    assert meta["channels"] == list(CHANNELS)
    assert set(REPR_NAMES) >= {meta["representation"]}
