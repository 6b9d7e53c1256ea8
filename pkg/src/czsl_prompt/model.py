"""Prompt model: learnable state/object tables against frozen seeded encoders.

A composition (a, o) is scored by embedding the prompt
``concat(prefix, theta_a[a], theta_o[o])`` through a frozen affine text map,
L2-normalizing, and taking the cosine similarity with the L2-normalized image
feature, scaled by 1/tau. Only the two embedding tables are learnable; the
prefix vector and the text map are frozen for the lifetime of a run.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .composition_space import CompositionSpace, Pair
from .errors import DataError, NumericError

CHECKPOINT_MAGIC = b"DRPM"
CHECKPOINT_VERSION = 1

THETA_INIT_STD = 0.02
PREFIX_INIT_STD = 0.02


@dataclass
class PromptTable:
    """Learnable embeddings (theta_a, theta_o) plus the frozen prefix vector."""

    theta_a: np.ndarray  # (|A|, d), float64, learnable
    theta_o: np.ndarray  # (|O|, d), float64, learnable
    prefix: np.ndarray   # (d,), float64, frozen

    def __post_init__(self):
        self.theta_a = np.asarray(self.theta_a, dtype=np.float64)
        self.theta_o = np.asarray(self.theta_o, dtype=np.float64)
        self.prefix = np.asarray(self.prefix, dtype=np.float64)
        if self.theta_a.ndim != 2 or self.theta_o.ndim != 2 or self.prefix.ndim != 1:
            raise DataError("prompt table shapes: theta (rows, d), prefix (d,)")
        d = self.prefix.shape[0]
        if self.theta_a.shape[1] != d or self.theta_o.shape[1] != d:
            raise DataError("prompt table embedding dims disagree with prefix")
        for name, arr in (("theta_a", self.theta_a), ("theta_o", self.theta_o), ("prefix", self.prefix)):
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite entries in {name}")
        self.prefix.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.prefix.shape[0]

    def copy(self) -> "PromptTable":
        return PromptTable(self.theta_a.copy(), self.theta_o.copy(), self.prefix.copy())


@dataclass(frozen=True)
class FrozenEncoders:
    """Frozen affine text map (w_t, b_t) and the similarity temperature."""

    w_t: np.ndarray  # (D, 3d), float64
    b_t: np.ndarray  # (D,), float64
    tau: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "w_t", np.asarray(self.w_t, dtype=np.float64))
        object.__setattr__(self, "b_t", np.asarray(self.b_t, dtype=np.float64))
        if self.w_t.ndim != 2 or self.b_t.ndim != 1 or self.w_t.shape[0] != self.b_t.shape[0]:
            raise DataError("encoder shapes: w_t (D, 3d), b_t (D,)")
        if self.w_t.shape[1] % 3 != 0:
            raise DataError("w_t input dim must be 3*d")
        if not (self.tau > 0):
            raise DataError(f"tau must be positive, got {self.tau}")
        self.w_t.setflags(write=False)
        self.b_t.setflags(write=False)

    @property
    def feature_dim(self) -> int:
        return self.w_t.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w_t.shape[1] // 3

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.w_t.tobytes())
        h.update(self.b_t.tobytes())
        h.update(struct.pack("<d", self.tau))
        return h.hexdigest()


def array_checksum(arr: np.ndarray) -> str:
    """sha256 of the raw array bytes; used for freeze-soundness proofs."""
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def make_text_encoder(d: int, feature_dim: int, seed: int, tau: float = 1.0) -> tuple[np.ndarray, FrozenEncoders]:
    """Build the frozen (prefix, encoders) pair deterministically from a seed.

    The synthetic data generator uses the same construction with the same
    seed, so a prompt table reproducing the generator's latents exists and the
    tuning task has a known optimum. b_t is zero for the same reason: the
    generator's feature map has no bias term.
    """
    if d < 1 or feature_dim < 1:
        raise DataError("embed and feature dims must be >= 1")
    ss_prefix, ss_w = np.random.SeedSequence(seed).spawn(2)
    prefix = np.random.default_rng(ss_prefix).normal(0.0, PREFIX_INIT_STD, size=d)
    w_t = np.random.default_rng(ss_w).normal(0.0, 1.0 / np.sqrt(3 * d), size=(feature_dim, 3 * d))
    b_t = np.zeros(feature_dim)
    return prefix, FrozenEncoders(w_t=w_t, b_t=b_t, tau=tau)


def init_model(
    space: CompositionSpace,
    d: int,
    feature_dim: int,
    seed: int,
    init_source: str = "gaussian",
    embedding_path: str | Path | None = None,
    encoder_seed: int | None = None,
    tau: float = 1.0,
) -> tuple[PromptTable, FrozenEncoders]:
    """Initialize a prompt model for a space.

    ``seed`` drives the learnable-table initialization; ``encoder_seed``
    (default: same as ``seed``) drives the frozen prefix/encoder construction,
    so a model can be re-seeded without changing the encoder it is trained
    against. ``init_source='embedding_file'`` loads theta rows from a .npy
    array of shape (|A|+|O|, d): state rows first, then object rows.
    """
    enc_seed = seed if encoder_seed is None else encoder_seed
    prefix, enc = make_text_encoder(d, feature_dim, enc_seed, tau=tau)

    if init_source == "gaussian":
        ss_a, ss_o = np.random.SeedSequence(seed).spawn(2)
        theta_a = np.random.default_rng(ss_a).normal(0.0, THETA_INIT_STD, size=(space.n_states, d))
        theta_o = np.random.default_rng(ss_o).normal(0.0, THETA_INIT_STD, size=(space.n_objects, d))
    elif init_source == "embedding_file":
        if embedding_path is None:
            raise DataError("init_source='embedding_file' requires embedding_path")
        rows = np.load(embedding_path)
        expected = (space.n_states + space.n_objects, d)
        if rows.shape != expected:
            raise DataError(
                f"embedding file shape {rows.shape} does not match expected {expected}"
            )
        theta_a = rows[: space.n_states].astype(np.float64)
        theta_o = rows[space.n_states:].astype(np.float64)
    else:
        raise DataError(f"unknown init_source {init_source!r}")

    return PromptTable(theta_a=theta_a, theta_o=theta_o, prefix=prefix), enc


def normalize_rows(x: np.ndarray, what: str = "feature") -> np.ndarray:
    """L2-normalize rows (or a single vector), in float64."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    mat = arr.reshape(1, -1) if single else arr
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms < 1e-12) or not np.all(np.isfinite(norms)):
        bad = int(np.argmin(norms))
        raise NumericError(f"degenerate {what}: zero or non-finite norm at row {bad}")
    out = mat / norms[:, None]
    return out[0] if single else out


def candidate_embeddings(table: PromptTable, pairs: np.ndarray) -> np.ndarray:
    """Stack concat(prefix, theta_a[a], theta_o[o]) for each candidate pair."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.size and (
        pairs[:, 0].min() < 0
        or pairs[:, 0].max() >= table.theta_a.shape[0]
        or pairs[:, 1].min() < 0
        or pairs[:, 1].max() >= table.theta_o.shape[0]
    ):
        raise DataError("candidate pair index outside the prompt tables")
    n = pairs.shape[0]
    return np.concatenate(
        [np.broadcast_to(table.prefix, (n, table.dim)), table.theta_a[pairs[:, 0]], table.theta_o[pairs[:, 1]]],
        axis=1,
    )


def text_features(
    enc: FrozenEncoders,
    table: PromptTable,
    pairs: np.ndarray,
    dropout_mask: np.ndarray | None = None,
) -> np.ndarray:
    """Unit-norm text features for a list of candidate pairs, shape (C, D).

    ``dropout_mask`` (already scaled by 1/keep) multiplies the concatenated
    prompt embeddings before the affine map; training only.
    """
    z = candidate_embeddings(table, pairs)
    if dropout_mask is not None:
        z = z * dropout_mask
    u = z @ enc.w_t.T + enc.b_t
    return normalize_rows(u, what="text feature")


def encode_text(enc: FrozenEncoders, table: PromptTable, pair: Pair) -> np.ndarray:
    """Unit-norm text feature of a single composition."""
    return text_features(enc, table, np.asarray([pair]))[0]


def encode_image(sample) -> np.ndarray:
    """Unit-norm image feature of a sample (or raw feature vector)."""
    vec = getattr(sample, "features", sample)
    return normalize_rows(vec, what="image feature")


def class_logits(
    f_v: np.ndarray,
    candidates,
    enc: FrozenEncoders,
    table: PromptTable,
) -> np.ndarray:
    """Cosine logits (f_v . f_t) / tau over an ordered candidate list."""
    pairs = np.asarray(list(candidates), dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise DataError("empty candidate list")
    f_t = text_features(enc, table, pairs)
    return (f_t @ np.asarray(f_v, dtype=np.float64)) / enc.tau


def similarity_probs(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over candidate logits."""
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite logits")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


def predict(f_v: np.ndarray, candidates, enc: FrozenEncoders, table: PromptTable) -> Pair:
    """Most likely composition; ties break toward the lowest candidate index."""
    pairs = list(candidates)
    logits = class_logits(f_v, pairs, enc, table)
    best = int(np.argmax(logits))
    a, o = pairs[best]
    return (int(a), int(o))


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIId")  # magic, version, |A|, |O|, d, D, tau


def save_checkpoint(
    path: str | Path,
    table: PromptTable,
    enc: FrozenEncoders,
    meta: dict | None = None,
) -> None:
    """Write model parameters as little-endian binary plus a JSON sidecar."""
    path = Path(path)
    n_a, d = table.theta_a.shape
    n_o = table.theta_o.shape[0]
    blob = bytearray()
    blob += _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, n_a, n_o, d, enc.feature_dim, enc.tau)
    for arr in (table.prefix, table.theta_a, table.theta_o, enc.w_t, enc.b_t):
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path.write_bytes(bytes(blob))
    sidecar = dict(meta or {})
    sidecar.setdefault("n_states", n_a)
    sidecar.setdefault("n_objects", n_o)
    sidecar.setdefault("embed_dim", d)
    sidecar.setdefault("feature_dim", enc.feature_dim)
    sidecar.setdefault("tau", enc.tau)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[PromptTable, FrozenEncoders, dict]:
    """Read a checkpoint; returns (table, encoders, sidecar meta)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"truncated file {path}: {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, n_a, n_o, d, feat_d, tau = _HEADER.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise DataError(f"bad magic in {path}: {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version} in {path}")
    counts = [d, n_a * d, n_o * d, feat_d * 3 * d, feat_d]
    expected = _HEADER.size + 8 * sum(counts)
    if len(raw) != expected:
        raise DataError(
            f"truncated file {path}: expected {expected} bytes, found {len(raw)} (offset {_HEADER.size})"
        )
    offset = _HEADER.size
    arrays = []
    for count in counts:
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).copy())
        offset += 8 * count
    prefix, theta_a, theta_o, w_t, b_t = arrays
    table = PromptTable(theta_a.reshape(n_a, d), theta_o.reshape(n_o, d), prefix)
    enc = FrozenEncoders(w_t=w_t.reshape(feat_d, 3 * d), b_t=b_t, tau=tau)
    meta = {}
    sidecar = path.with_suffix(".json")
    if sidecar.is_file():
        meta = json.loads(sidecar.read_text())
    return table, enc, meta
