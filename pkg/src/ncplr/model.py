"""A small trainable encoder with a per-epoch classifier head.

The encoder is a two-layer perceptron: d_in -> hidden (relu) -> d_out,
output rows L2-normalized onto the unit sphere. On top sits a linear
classifier d_out -> K with a softmax; K follows the cluster count, so the
head is rebuilt every epoch from the memory-bank centroids.

Backward passes are hand-written. Given upstream gradients wrt the
normalized embeddings and wrt the classifier logits, `backward` returns
gradients for every parameter; the normalization Jacobian is
(I - f f^T) / ||z|| applied row-wise.

Model files ("NCPM", little-endian): magic, version u32 = 1, then
d_in/hidden/d_out/K as u64, then W1, b1, W2, b2, Wc, bc as float32 in
row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FeatureSet
from .errors import ConfigError, FormatError, NumericError

MODEL_MAGIC = b"NCPM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIQQQQ")

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wc", "bc")


@dataclass
class EncoderModel:
    W1: np.ndarray  # (d_in, hidden)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (hidden, d_out)
    b2: np.ndarray  # (d_out,)
    Wc: np.ndarray  # (d_out, K)
    bc: np.ndarray  # (K,)

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def d_out(self) -> int:
        return self.W2.shape[1]

    @property
    def k(self) -> int:
        return self.Wc.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "EncoderModel":
        return EncoderModel(**{n: p.copy() for n, p in self.params().items()})


@dataclass
class TeacherStudentPair:
    student: EncoderModel
    teacher: EncoderModel
    ema_momentum: float = 0.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            if getattr(self.student, name).shape != getattr(self.teacher, name).shape:
                raise ConfigError("student and teacher must share an architecture")


def init_encoder(
    d_in: int,
    hidden: int,
    d_out: int,
    k: int = 1,
    rng: np.random.Generator | None = None,
    init_noise: float = 0.01,
) -> EncoderModel:
    """Seeded initialization, biased toward preserving input geometry.

    When hidden == 2 * d_in and d_out == d_in the net starts as an exact
    identity map (h = [relu(x), relu(-x)], recombined), plus small noise;
    this stands in for a pretrained backbone whose features are already
    meaningful. Other shapes fall back to 1/sqrt(fan_in) Gaussian init.
    """
    if min(d_in, hidden, d_out, k) < 1:
        raise ConfigError("all encoder dimensions must be >= 1")
    rng = rng or np.random.default_rng(0)
    eye = np.eye(d_in)
    if hidden == 2 * d_in and d_out == d_in:
        w1 = np.hstack([eye, -eye])
        w2 = np.vstack([eye, -eye])
    else:
        w1 = rng.standard_normal((d_in, hidden)) / np.sqrt(d_in)
        w2 = rng.standard_normal((hidden, d_out)) / np.sqrt(hidden)
    w1 = w1 + init_noise * rng.standard_normal((d_in, hidden))
    w2 = w2 + init_noise * rng.standard_normal((hidden, d_out))
    return EncoderModel(
        W1=w1, b1=np.zeros(hidden),
        W2=w2, b2=np.zeros(d_out),
        Wc=np.zeros((d_out, k)), bc=np.zeros(k),
    )


def set_classifier(model: EncoderModel, centroids: np.ndarray, tau: float) -> None:
    """Rebuild the head from unit centroids: logits become cosine
    similarity / tau, matching the contrastive term's temperature scale."""
    model.Wc = centroids.T / tau
    model.bc = np.zeros(centroids.shape[0])


@dataclass(frozen=True)
class ForwardResult:
    embeddings: np.ndarray  # (B, d_out) unit rows
    preds: np.ndarray       # (B, K) simplex rows
    # intermediates kept for backward
    inputs: np.ndarray
    h_pre: np.ndarray
    h: np.ndarray
    z_norm: np.ndarray      # (B,) pre-normalization row norms
    logits: np.ndarray


def forward(model: EncoderModel, inputs: np.ndarray) -> ForwardResult:
    """Deterministic forward pass; raises on non-finite intermediates."""
    if inputs.ndim != 2 or inputs.shape[1] != model.d_in:
        raise ConfigError(f"inputs shape {inputs.shape} does not match d_in={model.d_in}")
    if not np.isfinite(inputs).all():
        raise NumericError("forward received non-finite inputs")
    h_pre = inputs @ model.W1 + model.b1
    h = np.maximum(h_pre, 0.0)
    z = h @ model.W2 + model.b2
    z_norm = np.linalg.norm(z, axis=1)
    if not np.isfinite(z).all() or (z_norm < 1e-12).any():
        raise NumericError("encoder produced a non-finite or zero-norm embedding")
    f = z / z_norm[:, None]
    logits = f @ model.Wc + model.bc
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    preds = e / e.sum(axis=1, keepdims=True)
    if not np.isfinite(preds).all():
        raise NumericError("classifier produced non-finite predictions")
    return ForwardResult(
        embeddings=f, preds=preds, inputs=inputs,
        h_pre=h_pre, h=h, z_norm=z_norm, logits=logits,
    )


def backward(
    model: EncoderModel,
    fwd: ForwardResult,
    d_embeddings: np.ndarray | None,
    d_logits: np.ndarray | None,
) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream gradients wrt the unit embeddings
    and/or the classifier logits. Either upstream may be None (treated as
    zero)."""
    f = fwd.embeddings
    b = f.shape[0]
    df = np.zeros_like(f) if d_embeddings is None else d_embeddings.copy()
    if d_logits is None:
        d_wc = np.zeros_like(model.Wc)
        d_bc = np.zeros_like(model.bc)
    else:
        d_wc = f.T @ d_logits
        d_bc = d_logits.sum(axis=0)
        df += d_logits @ model.Wc.T
    # L2-normalization backward: dz = (df - (df . f) f) / ||z||
    dz = (df - np.sum(df * f, axis=1, keepdims=True) * f) / fwd.z_norm[:, None]
    d_w2 = fwd.h.T @ dz
    d_b2 = dz.sum(axis=0)
    dh = dz @ model.W2.T
    dh_pre = dh * (fwd.h_pre > 0)
    d_w1 = fwd.inputs.T @ dh_pre
    d_b1 = dh_pre.sum(axis=0)
    return {"W1": d_w1, "b1": d_b1, "W2": d_w2, "b2": d_b2, "Wc": d_wc, "bc": d_bc}


def embed_features(model: EncoderModel, fs: FeatureSet) -> FeatureSet:
    """Run the whole dataset through the encoder, keeping the metadata."""
    out = forward(model, fs.features)
    return FeatureSet(features=out.embeddings, true_ids=fs.true_ids, cam_ids=fs.cam_ids)


def sgd_step(model: EncoderModel, grads: dict[str, np.ndarray], lr: float) -> None:
    for name in PARAM_NAMES:
        p = getattr(model, name)
        p -= lr * grads[name]


def ema_update(pair: TeacherStudentPair) -> None:
    """teacher <- m * teacher + (1 - m) * student, per parameter."""
    m = pair.ema_momentum
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"ema momentum must be in [0, 1], got {m}")
    for name in PARAM_NAMES:
        t = getattr(pair.teacher, name)
        t *= m
        t += (1.0 - m) * getattr(pair.student, name)


def save_model(model: EncoderModel, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(
            MODEL_MAGIC, MODEL_VERSION,
            model.d_in, model.hidden, model.d_out, model.k,
        ))
        for name in PARAM_NAMES:
            fh.write(getattr(model, name).astype("<f4").tobytes(order="C"))


def load_model(path: str | Path) -> EncoderModel:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, d_in, hidden, d_out, k = _MODEL_HEADER.unpack_from(blob, 0)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    shapes = {
        "W1": (d_in, hidden), "b1": (hidden,),
        "W2": (hidden, d_out), "b2": (d_out,),
        "Wc": (d_out, k), "bc": (k,),
    }
    expected = _MODEL_HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    off = _MODEL_HEADER.size
    arrays = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        arrays[name] = arr.astype(np.float64).reshape(shape)
        off += 4 * count
    return EncoderModel(**arrays)
