"""Single-column CNNs, the joint residual/speech model, posterior fusion,
training loops and the binary checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _io
from .frame_dataset import FRAME_LEN, REPR_NAMES, FrameDataset, RepresentationSet, chunk_frames
from .nn import (AdamState, BatchNorm1d, Conv1d, Dense, Flatten, Relu, Sequential, Sigmoid, SplitMix64,
                 adam_step, bce_loss)
from .nn.losses import P_CLIP

CHANNELS = (32, 32, 64, 64, 128)
KERNEL_SIZE = 3
MAGIC = b"GCN1"
FORMAT_VERSION = 1

# Which representation each numbered column looks at.
MODEL_REPR = {"model1": "LPF_S", "model2": "LPF_LPR", "model3": "PC_LPF_S", "model4": "PC_LPF_LPR"}
JOINT_COLUMNS = ("PC_LPF_S", "PC_LPF_LPR")

PREDICT_BATCH = 2048


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-4
    patience: int = 3
    min_delta: float = 1e-4
    positive_weight: float = 1.0


# --------------------------------------------------------------------------- #
# Architectures
# --------------------------------------------------------------------------- #

def build_single_column(seed: int = 0, channels=CHANNELS, kernel_size: int = KERNEL_SIZE,
                        frame_len: int = FRAME_LEN) -> Sequential:
    """Five Conv-BN-ReLU blocks, flatten, dense to one logit, sigmoid. No pooling."""
    rngs = SplitMix64(seed).split(len(channels) + 1)
    layers = []
    c_in = 1
    for c_out, rng in zip(channels, rngs):
        layers += [Conv1d(c_in, c_out, kernel_size, rng=rng), BatchNorm1d(c_out), Relu()]
        c_in = c_out
    layers += [Flatten(), Dense(c_in * frame_len, 1, rng=rngs[-1]), Sigmoid()]
    return Sequential(layers)


def build_head(in_dim: int, seed: int = 0) -> Sequential:
    return Sequential([Dense(in_dim, 1, rng=SplitMix64(seed)), Sigmoid()])


def _layer_from_desc(d: dict):
    kind = d["kind"]
    if kind == "Conv1d":
        return Conv1d(d["in_channels"], d["out_channels"], d["kernel_size"])
    if kind == "BatchNorm1d":
        return BatchNorm1d(d["channels"], d["momentum"], d["eps"])
    if kind == "Dense":
        return Dense(d["in_dim"], d["out_dim"])
    if kind == "Relu":
        return Relu()
    if kind == "Flatten":
        return Flatten()
    if kind == "Sigmoid":
        return Sigmoid()
    raise CheckpointError(f"unknown layer kind {kind!r}")


def feature_count(net: Sequential) -> int:
    """Width of the flatten output, i.e. the input width of the final dense layer."""
    return net.layers[-2].in_dim


def _column_features(net: Sequential, x: np.ndarray) -> np.ndarray:
    for layer in net.layers[:-2]:
        x = layer.forward(x)
    return x


def _batched(fn, x: np.ndarray, batch: int = PREDICT_BATCH) -> np.ndarray:
    if len(x) == 0:
        return np.zeros(0)
    return np.concatenate([fn(x[i:i + batch]) for i in range(0, len(x), batch)])


@dataclass
class SingleColumnModel:
    net: Sequential
    repr_name: str
    metadata: dict = field(default_factory=dict)

    def predict(self, frames: np.ndarray) -> np.ndarray:
        """Posterior per frame; ``frames`` is ``(N, 1, 16)``."""
        self.net.eval()
        return _batched(lambda b: self.net.forward(b)[:, 0], frames)

    def features(self, frames: np.ndarray) -> np.ndarray:
        self.net.eval()
        if len(frames) == 0:
            return np.zeros((0, feature_count(self.net)))
        return np.concatenate([_column_features(self.net, frames[i:i + PREDICT_BATCH])
                               for i in range(0, len(frames), PREDICT_BATCH)])


@dataclass
class JointModel:
    """Two frozen columns feeding one trainable dense+sigmoid head."""

    col_s: SingleColumnModel  # PC_LPF_S
    col_lpr: SingleColumnModel  # PC_LPF_LPR
    head: Sequential
    metadata: dict = field(default_factory=dict)

    def features(self, frames4: np.ndarray) -> np.ndarray:
        """``frames4`` is ``(N, 4, 16)`` in REPR_NAMES order."""
        a = self.col_s.features(_pick(frames4, self.col_s.repr_name))
        b = self.col_lpr.features(_pick(frames4, self.col_lpr.repr_name))
        return np.concatenate([a, b], axis=1)

    def predict(self, frames4: np.ndarray) -> np.ndarray:
        self.head.eval()
        feats = self.features(frames4)
        return self.head.forward(feats)[:, 0] if len(feats) else np.zeros(0)


def _pick(frames4: np.ndarray, name: str) -> np.ndarray:
    i = REPR_NAMES.index(name)
    return frames4[:, i:i + 1, :]


def fuse_posteriors(p_joint, p_model1, rule: str = "product"):
    """Combine two posteriors as independent evidence under a uniform prior.

    ``rule="max"`` takes the larger of the two instead.
    """
    a = np.clip(np.asarray(p_joint, dtype=np.float64), P_CLIP, 1 - P_CLIP)
    b = np.clip(np.asarray(p_model1, dtype=np.float64), P_CLIP, 1 - P_CLIP)
    if rule == "max":
        out = np.maximum(a, b)
    elif rule == "product":
        num = a * b
        out = num / (num + (1 - a) * (1 - b))
    else:
        raise ValueError(f"unknown fusion rule {rule!r}")
    return out if out.ndim else float(out)


@dataclass
class FinalModel:
    model1: SingleColumnModel
    joint: JointModel
    fusion_rule: str = "product"

    def frame_probs(self, frames4: np.ndarray) -> np.ndarray:
        pj = self.joint.predict(frames4)
        p1 = self.model1.predict(_pick(frames4, self.model1.repr_name))
        return np.atleast_1d(fuse_posteriors(pj, p1, self.fusion_rule))


def predict_frame_probs(final_model: FinalModel, reps: RepresentationSet) -> np.ndarray:
    """Fused GCI posterior for every complete 16-sample frame."""
    if len(reps) < FRAME_LEN:
        raise ValueError(f"signal shorter than one {FRAME_LEN}-sample frame")
    return final_model.frame_probs(chunk_frames(reps))


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #

@dataclass
class TrainResult:
    history: list[tuple[int, float, float]]  # (epoch, train_bce, val_bce)
    best_epoch: int
    best_val: float
    stopped_early: bool


def _eval_loss(forward, x, y, w) -> float:
    p = np.concatenate([forward(x[i:i + PREDICT_BATCH]) for i in range(0, len(x), PREDICT_BATCH)])
    loss, _ = bce_loss(p, y.reshape(p.shape), w)
    return loss


def fit(net: Sequential, x_train, y_train, x_val, y_val, cfg: TrainConfig, seed: int,
        log=None) -> TrainResult:
    """Minibatch ADAM with early stopping; leaves ``net`` at its best-validation state.

    Batches of a single example are skipped (batch statistics are undefined).
    """
    y_train = np.asarray(y_train, dtype=np.float64).reshape(-1, 1)
    y_val = np.asarray(y_val, dtype=np.float64).reshape(-1, 1)
    if len(x_val) == 0:
        raise ValueError("validation set is empty")
    shuffle_rng = SplitMix64(seed)
    opt = AdamState(lr=cfg.lr)
    params = net.named_params()

    def snapshot():
        return ({k: v.copy() for k, v in net.named_params().items()},
                {k: v.copy() for k, v in net.named_buffers().items()})

    best = snapshot()
    best_val = np.inf
    best_epoch = 0
    ref_val = np.inf  # value the min_delta improvement is measured against
    stall = 0
    history = []
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        order = shuffle_rng.permutation(len(x_train))
        total, seen = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue
            p = net.forward(x_train[idx])
            loss, dp = bce_loss(p, y_train[idx], cfg.positive_weight)
            net.backward(dp)
            adam_step(opt, params, net.named_grads())
            total += loss * len(idx)
            seen += len(idx)
        net.eval()
        val = _eval_loss(net.forward, x_val, y_val, cfg.positive_weight)
        train = total / max(seen, 1)
        history.append((epoch, train, val))
        if log is not None:
            log(epoch, train, val)
        if val < best_val:
            best_val, best_epoch, best = val, epoch, snapshot()
        if val < ref_val - cfg.min_delta:
            ref_val, stall = val, 0
        else:
            stall += 1
            if stall >= cfg.patience:
                stopped = epoch < cfg.epochs
                break

    for k, v in best[0].items():
        params[k][...] = v
    for k, v in best[1].items():
        net.set_buffer(k, v)
    net.eval()
    return TrainResult(history, best_epoch, float(best_val), stopped)


def _check_both_classes(labels, what="training set"):
    labels = np.asarray(labels)
    if len(labels) == 0 or labels.min() == labels.max():
        raise ValueError(f"{what} must contain both GCI and non-GCI frames")


def train_single_column(repr_name: str, train_set: FrameDataset, val_set: FrameDataset, seed: int,
                        epochs: int = 30, cfg: TrainConfig | None = None, log=None):
    """Returns ``(SingleColumnModel, TrainResult)``."""
    if repr_name not in REPR_NAMES:
        raise ValueError(f"unknown representation {repr_name!r}")
    cfg = cfg or TrainConfig(epochs=epochs)
    _check_both_classes(train_set.labels)
    init_seed, shuffle_seed = (int(s) for s in SplitMix64(seed).next_u64(2))
    net = build_single_column(init_seed)
    res = fit(net, train_set.representation(repr_name), train_set.labels,
              val_set.representation(repr_name), val_set.labels, cfg, shuffle_seed, log)
    meta = {"representation": repr_name, "seed": int(seed), "epochs_run": len(res.history),
            "best_epoch": res.best_epoch, "best_val_bce": res.best_val, "channels": list(CHANNELS),
            "kernel_size": KERNEL_SIZE, "train": asdict(cfg)}
    return SingleColumnModel(net, repr_name, meta), res


def train_joint(model3: SingleColumnModel, model4: SingleColumnModel, train_set: FrameDataset,
                val_set: FrameDataset, seed: int, cfg: TrainConfig | None = None, log=None):
    """Train only the dense head over frozen column features. Returns ``(JointModel, TrainResult)``."""
    if (model3.repr_name, model4.repr_name) != JOINT_COLUMNS:
        raise ValueError(f"joint model needs columns over {JOINT_COLUMNS}, "
                         f"got ({model3.repr_name}, {model4.repr_name})")
    cfg = cfg or TrainConfig()
    _check_both_classes(train_set.labels)
    init_seed, shuffle_seed = (int(s) for s in SplitMix64(seed).next_u64(2))
    head = build_head(feature_count(model3.net) + feature_count(model4.net), init_seed)
    joint = JointModel(model3, model4, head)
    # Columns are frozen, so their features are computed once.
    f_train = joint.features(train_set.frames)
    f_val = joint.features(val_set.frames)
    res = fit(head, f_train, train_set.labels, f_val, val_set.labels, cfg, shuffle_seed, log)
    joint.metadata = {"columns": list(JOINT_COLUMNS), "seed": int(seed), "epochs_run": len(res.history),
                      "best_epoch": res.best_epoch, "best_val_bce": res.best_val, "train": asdict(cfg)}
    return joint, res


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

@dataclass
class ModelCheckpoint:
    kind: str  # "single" | "joint"
    parts: dict[str, list[dict]]  # part name -> layer descriptors
    arrays: dict[str, np.ndarray]  # "<part>/<layer>.<name>", descriptor order
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def descriptor(self) -> dict:
        return {"version": self.version, "kind": self.kind, "parts": self.parts,
                "arrays": [[k, list(v.shape)] for k, v in self.arrays.items()],
                "metadata": self.metadata}


def _net_arrays(part: str, net: Sequential) -> dict[str, np.ndarray]:
    out = {f"{part}/{k}": v for k, v in net.named_params().items()}
    out.update({f"{part}/{k}": v for k, v in net.named_buffers().items()})
    return out


def to_checkpoint(model) -> ModelCheckpoint:
    if isinstance(model, SingleColumnModel):
        meta = dict(model.metadata, representation=model.repr_name)
        return ModelCheckpoint("single", {"column": model.net.describe()},
                               _net_arrays("column", model.net), meta)
    if isinstance(model, JointModel):
        arrays = {}
        parts = {}
        for name, net in (("col_s", model.col_s.net), ("col_lpr", model.col_lpr.net), ("head", model.head)):
            parts[name] = net.describe()
            arrays.update(_net_arrays(name, net))
        meta = dict(model.metadata, col_s=model.col_s.metadata, col_lpr=model.col_lpr.metadata)
        return ModelCheckpoint("joint", parts, arrays, meta)
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def _net_from_part(ckpt: ModelCheckpoint, part: str) -> Sequential:
    net = Sequential([_layer_from_desc(d) for d in ckpt.parts[part]])
    for key, arr in ckpt.arrays.items():
        p, name = key.split("/", 1)
        if p != part:
            continue
        i, attr = name.split(".", 1)
        layer = net.layers[int(i)]
        store = layer.params if attr in layer.params else layer.buffers
        if attr not in store or store[attr].shape != arr.shape:
            raise CheckpointError(f"array {key} with shape {arr.shape} does not fit the layer list")
        store[attr] = arr.copy()
    for layer in net.layers:
        layer.zero_grad()
    return net.eval()


def from_checkpoint(ckpt: ModelCheckpoint):
    if ckpt.kind == "single":
        meta = dict(ckpt.metadata)
        return SingleColumnModel(_net_from_part(ckpt, "column"), meta["representation"], meta)
    if ckpt.kind == "joint":
        meta = dict(ckpt.metadata)
        ms, ml = meta.pop("col_s"), meta.pop("col_lpr")
        col_s = SingleColumnModel(_net_from_part(ckpt, "col_s"), ms["representation"], ms)
        col_lpr = SingleColumnModel(_net_from_part(ckpt, "col_lpr"), ml["representation"], ml)
        return JointModel(col_s, col_lpr, _net_from_part(ckpt, "head"), meta)
    raise CheckpointError(f"unknown checkpoint kind {ckpt.kind!r}")


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    text = json.dumps(ckpt.descriptor(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(text)), text]
    chunks += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in ckpt.arrays.values()]
    return b"".join(chunks)


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> ModelCheckpoint:
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 12:
        raise CheckpointError(f"{source}: truncated header")
    (n,) = struct.unpack("<Q", data[4:12])
    if len(data) < 12 + n:
        raise CheckpointError(f"{source}: truncated descriptor")
    try:
        desc = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable descriptor ({e})") from None
    if desc.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {desc.get('version')}")
    off = 12 + n
    arrays = {}
    for name, shape in desc["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(data):
            raise CheckpointError(f"{source}: truncated array {name}")
        arrays[name] = np.frombuffer(data[off:end], dtype="<f8").astype(np.float64).reshape(shape)
        off = end
    if off != len(data):
        raise CheckpointError(f"{source}: {len(data) - off} trailing bytes after arrays")
    return ModelCheckpoint(desc["kind"], desc["parts"], arrays, desc["metadata"], desc["version"])


def save_checkpoint(path, model) -> None:
    ckpt = model if isinstance(model, ModelCheckpoint) else to_checkpoint(model)
    _io.atomic_write_bytes(path, encode_checkpoint(ckpt))


def expected_parts(kind: str) -> dict[str, list[dict]]:
    col = build_single_column().describe()
    if kind == "single":
        return {"column": col}
    return {"col_s": col, "col_lpr": col, "head": build_head(2 * col[-2]["in_dim"]).describe()}


def load_checkpoint(path, expect: str | None = None) -> ModelCheckpoint:
    """Read a checkpoint; with ``expect`` set, its layer list must match that architecture."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = decode_checkpoint(path.read_bytes(), str(path))
    if expect is not None:
        if ckpt.kind != expect:
            raise CheckpointError(f"{path}: expected a {expect} checkpoint, found {ckpt.kind}")
        if ckpt.parts != expected_parts(expect):
            raise CheckpointError(f"{path}: layer list does not match the {expect} architecture")
    return ckpt


def load_model(path, expect: str | None = None):
    return from_checkpoint(load_checkpoint(path, expect))
