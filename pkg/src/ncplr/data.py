"""Embedding datasets: seeded synthetic generation and a binary file format.

File format (little-endian):

    magic   "NCPL" (4 bytes)
    version u32 = 1
    N       u64
    d       u64
    data    N * d float32, row-major

A metadata sidecar ``<path>.meta.csv`` travels with every file:
header ``index,true_id,cam_id``, one row per instance, ``-1`` marking an
unknown id. Rows are re-normalized to unit L2 norm on load, so the float32
round trip costs at most ~1e-7 per coordinate.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericError

MAGIC = b"NCPL"
VERSION = 1
HEADER = struct.Struct("<4sIQQ")


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit L2 norm. Zero rows are a hard error:
    they cannot lie on the sphere and silently perturbing them would
    hide generator bugs."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    bad = np.where(norms[:, 0] < 1e-12)[0]
    if bad.size:
        raise NumericError(f"row {bad[0]} has (near-)zero norm, cannot unit-normalize")
    return x / norms


@dataclass(frozen=True)
class FeatureSet:
    """N unit-norm d-dimensional embeddings with optional identity/camera ids."""

    features: np.ndarray               # (N, d) float64, unit rows
    true_ids: np.ndarray | None = None # (N,) int64, ground truth when known
    cam_ids: np.ndarray | None = None  # (N,) int64

    def __post_init__(self):
        f = self.features
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 2:
            raise ConfigError(f"features must be N>=1 by d>=2, got shape {f.shape}")
        norms = np.linalg.norm(f, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise NumericError("feature rows must be unit-norm within 1e-6")
        for name in ("true_ids", "cam_ids"):
            ids = getattr(self, name)
            if ids is not None and len(ids) != f.shape[0]:
                raise ConfigError(f"{name} has length {len(ids)}, expected {f.shape[0]}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the seeded Gaussian-cluster generator."""

    num_ids: int
    points_per_id: int
    dim: int
    intra_std: float = 0.1
    num_cams: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_ids < 2:
            raise ConfigError(f"num_ids must be >= 2, got {self.num_ids}")
        if self.dim < 2:
            raise ConfigError(f"dim must be >= 2, got {self.dim}")
        if self.points_per_id < 1:
            raise ConfigError(f"points_per_id must be >= 1, got {self.points_per_id}")
        if self.intra_std < 0:
            raise ConfigError(f"intra_std must be >= 0, got {self.intra_std}")
        if self.num_cams < 1:
            raise ConfigError(f"num_cams must be >= 1, got {self.num_cams}")


def generate_synthetic(spec: SyntheticSpec) -> FeatureSet:
    """Draw ``num_ids * points_per_id`` unit vectors in identity clusters.

    Identity means are normalized Gaussian draws, i.e. uniform on the unit
    sphere, so difficulty is rotation-invariant. Each instance is its
    identity mean plus isotropic Gaussian noise of std ``intra_std``,
    re-normalized. Cameras are assigned round-robin. Identical specs
    (seed included) produce bit-identical output.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_ids * spec.points_per_id
    means = normalize_rows(rng.standard_normal((spec.num_ids, spec.dim)))
    true_ids = np.repeat(np.arange(spec.num_ids), spec.points_per_id)
    noise = rng.standard_normal((n, spec.dim)) * spec.intra_std
    features = normalize_rows(means[true_ids] + noise)
    cam_ids = np.arange(n) % spec.num_cams
    return FeatureSet(features=features, true_ids=true_ids, cam_ids=cam_ids.astype(np.int64))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.csv")


def save_features(fs: FeatureSet, path: str | Path) -> None:
    """Write the binary container plus the CSV metadata sidecar."""
    path = Path(path)
    payload = fs.features.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, fs.n, fs.dim))
        fh.write(payload)
    with open(_meta_path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "true_id", "cam_id"])
        for i in range(fs.n):
            tid = int(fs.true_ids[i]) if fs.true_ids is not None else -1
            cid = int(fs.cam_ids[i]) if fs.cam_ids is not None else -1
            writer.writerow([i, tid, cid])


def load_features(path: str | Path) -> FeatureSet:
    """Read the binary container; rows are re-normalized to unit norm."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(blob)} bytes < {HEADER.size}")
    magic, version, n, d = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if n == 0:
        raise FormatError(f"{path}: N=0 at byte offset 8")
    if d < 2:
        raise FormatError(f"{path}: d={d} at byte offset 16, need d >= 2")
    expected = HEADER.size + n * d * 4
    if len(blob) != expected:
        raise FormatError(
            f"{path}: payload truncated at byte offset {len(blob)}, expected {expected} bytes"
        )
    raw = np.frombuffer(blob, dtype="<f4", offset=HEADER.size).astype(np.float64)
    features = raw.reshape(n, d)
    if not np.isfinite(features).all():
        flat = int(np.flatnonzero(~np.isfinite(features))[0])
        raise FormatError(
            f"{path}: non-finite value at byte offset {HEADER.size + flat * 4}"
        )
    features = normalize_rows(features)
    true_ids = cam_ids = None
    meta = _meta_path(path)
    if meta.exists():
        true_ids, cam_ids = _read_meta(meta, n)
    return FeatureSet(features=features, true_ids=true_ids, cam_ids=cam_ids)


def _read_meta(meta: Path, n: int) -> tuple[np.ndarray | None, np.ndarray | None]:
    with open(meta, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["index", "true_id", "cam_id"]:
            raise FormatError(f"{meta}: bad sidecar header {header}")
        rows = list(reader)
    if len(rows) != n:
        raise FormatError(f"{meta}: {len(rows)} metadata rows for {n} instances")
    true_ids = np.array([int(r[1]) for r in rows], dtype=np.int64)
    cam_ids = np.array([int(r[2]) for r in rows], dtype=np.int64)
    # all -1 means the column is simply unknown
    return (
        None if (true_ids == -1).all() else true_ids,
        None if (cam_ids == -1).all() else cam_ids,
    )
