"""Datasets, the binary feature-file format, batching, and the synthetic generator.

Feature file layout (little-endian): magic ``DRPT``, u32 version, u64 N,
u32 D, then N records of (u32 state_idx, u32 object_idx, D x f32 features).
A sibling ``.json`` sidecar records the split name and source manifest path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .composition_space import CompositionSpace, Pair
from .errors import DataError
from .model import make_text_encoder

FEATURE_MAGIC = b"DRPT"
FEATURE_VERSION = 1
_FILE_HEADER = struct.Struct("<4sIQI")  # magic, version, N, D

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Sample:
    features: np.ndarray  # (D,) float32 view, pre-normalization
    label: Pair


@dataclass(frozen=True)
class Dataset:
    """Immutable feature matrix plus integer pair labels for one split."""

    features: np.ndarray  # (N, D) float32
    labels: np.ndarray    # (N, 2) int64
    split: str
    space: CompositionSpace

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float32))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.features.ndim != 2 or self.labels.ndim != 2 or self.labels.shape[1] != 2:
            raise DataError("dataset arrays: features (N, D), labels (N, 2)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("feature/label row counts disagree")
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        if not np.all(np.isfinite(self.features)):
            raise DataError("non-finite feature values")
        self._check_labels()
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    def _check_labels(self):
        allowed = set(self.space.seen_set)
        if self.split != "train":
            allowed |= set(self.space.unseen_for_split(self.split))
        for i, (a, o) in enumerate(self.labels):
            if (int(a), int(o)) not in allowed:
                raise DataError(
                    f"unknown label (state {a}, object {o}) at record {i} for split {self.split!r}"
                )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], (int(self.labels[i, 0]), int(self.labels[i, 1])))


def save_features(
    path: str | Path,
    dataset: Dataset,
    source_manifest: str = ".",
    extra_meta: dict | None = None,
) -> None:
    """Write a dataset in the binary feature format plus its JSON sidecar."""
    path = Path(path)
    n, d = dataset.features.shape
    rec = np.dtype([("a", "<u4"), ("o", "<u4"), ("f", "<f4", (d,))])
    records = np.empty(n, dtype=rec)
    records["a"] = dataset.labels[:, 0]
    records["o"] = dataset.labels[:, 1]
    records["f"] = dataset.features
    with path.open("wb") as fh:
        fh.write(_FILE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d))
        fh.write(records.tobytes())
    sidecar = {"split": dataset.split, "source_manifest": source_manifest, "n": n, "feature_dim": d}
    sidecar.update(extra_meta or {})
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_features(path: str | Path, space: CompositionSpace, split: str | None = None) -> Dataset:
    """Load a binary feature file; labels are validated against the space.

    The split is taken from the sidecar when not given explicitly.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    raw = path.read_bytes()
    if len(raw) < _FILE_HEADER.size:
        raise DataError(f"truncated file {path}: {len(raw)} bytes at offset 0, header needs {_FILE_HEADER.size}")
    magic, version, n, d = _FILE_HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise DataError(f"bad magic in {path}: {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"unsupported feature-file version {version} in {path}")
    rec = np.dtype([("a", "<u4"), ("o", "<u4"), ("f", "<f4", (d,))])
    expected = _FILE_HEADER.size + n * rec.itemsize
    if len(raw) != expected:
        raise DataError(
            f"truncated file {path}: expected {expected} bytes, found {len(raw)} "
            f"(payload offset {_FILE_HEADER.size}, record size {rec.itemsize})"
        )
    records = np.frombuffer(raw, dtype=rec, count=n, offset=_FILE_HEADER.size)

    if split is None:
        sidecar = path.with_suffix(".json")
        if sidecar.is_file():
            split = json.loads(sidecar.read_text()).get("split")
    if split is None:
        raise DataError(f"split unknown for {path}: no sidecar and none given")

    labels = np.stack([records["a"].astype(np.int64), records["o"].astype(np.int64)], axis=1)
    bad_a = labels[:, 0] >= space.n_states
    bad_o = labels[:, 1] >= space.n_objects
    if bad_a.any() or bad_o.any():
        i = int(np.argmax(bad_a | bad_o))
        raise DataError(
            f"unknown label (state {labels[i, 0]}, object {labels[i, 1]}) at record {i} in {path}"
        )
    return Dataset(features=records["f"].copy(), labels=labels, split=split, space=space)


def batch_iter(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; the permutation is a pure function of (seed, epoch)."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if n == 0:
        raise DataError("empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic composition-dataset recipe.

    ``seen_fraction`` targets the realized average entanglement rate; ``skew``
    is a long-tail exponent over primitives (0 = uniform seen-pair sampling,
    larger values concentrate seen pairs on few states/objects and raise the
    entanglement variance). Features are generated through the same frozen
    text map the model builds for ``encoder_seed = seed``, so a prompt table
    that matches the generator's latents exists.
    """

    n_states: int = 6
    n_objects: int = 5
    latent_dim: int = 8
    feature_dim: int = 64
    seen_fraction: float = 0.5
    skew: float = 0.0
    noise_sigma: float = 0.0
    samples_per_pair: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_states < 1 or self.n_objects < 1:
            raise DataError("primitive counts must be >= 1")
        if self.latent_dim < 1 or self.feature_dim < 1:
            raise DataError("dims must be >= 1")
        if not (0.0 < self.seen_fraction <= 1.0):
            raise DataError(f"seen_fraction must be in (0, 1], got {self.seen_fraction}")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        if self.samples_per_pair < 1:
            raise DataError("samples_per_pair must be >= 1")
        if self.seed < 0:
            raise DataError("seed must be nonnegative")


def _choose_seen_pairs(cfg: SynthConfig, rng: np.random.Generator) -> list[Pair]:
    n_all = cfg.n_states * cfg.n_objects
    n_seen = int(round(cfg.seen_fraction * n_all))
    n_seen = max(1, min(n_seen, n_all))
    if n_all - n_seen < 4:
        raise DataError(
            f"infeasible split: {n_all - n_seen} unseen pairs left, need at least 4 (2 val + 2 test)"
        )

    chosen: set[Pair] = set()
    # spanning pass: every primitive appears in at least one seen pair when room allows
    if n_seen >= max(cfg.n_states, cfg.n_objects):
        perm_a = rng.permutation(cfg.n_states)
        perm_o = rng.permutation(cfg.n_objects)
        for i in range(max(cfg.n_states, cfg.n_objects)):
            chosen.add((int(perm_a[i % cfg.n_states]), int(perm_o[i % cfg.n_objects])))

    # long-tail fill: pair weight = (rank+1)^-skew per primitive, ranks shuffled
    rank_a = rng.permutation(cfg.n_states)
    rank_o = rng.permutation(cfg.n_objects)
    w_a = (rank_a + 1.0) ** (-cfg.skew)
    w_o = (rank_o + 1.0) ** (-cfg.skew)
    remaining = [(a, o) for a in range(cfg.n_states) for o in range(cfg.n_objects) if (a, o) not in chosen]
    if len(chosen) < n_seen:
        weights = np.array([w_a[a] * w_o[o] for a, o in remaining])
        idx = rng.choice(len(remaining), size=n_seen - len(chosen), replace=False, p=weights / weights.sum())
        chosen.update(remaining[i] for i in idx)
    return sorted(chosen)


def synth_generate(cfg: SynthConfig) -> tuple[CompositionSpace, dict[str, Dataset]]:
    """Generate a composition space and train/val/test feature datasets.

    Deterministic given the config. Train carries only seen labels; val and
    test carry samples for every seen pair plus that split's unseen pairs.
    """
    ss = np.random.SeedSequence(cfg.seed)
    rng_pairs, rng_phi, rng_split, rng_noise = (np.random.default_rng(s) for s in ss.spawn(4))

    seen = _choose_seen_pairs(cfg, rng_pairs)
    all_pairs = [(a, o) for a in range(cfg.n_states) for o in range(cfg.n_objects)]
    unseen = [p for p in all_pairs if p not in set(seen)]
    unseen = [unseen[i] for i in rng_split.permutation(len(unseen))]
    half = len(unseen) // 2
    val_unseen, test_unseen = sorted(unseen[:half]), sorted(unseen[half:])

    states = tuple(f"state{i:03d}" for i in range(cfg.n_states))
    objects = tuple(f"object{j:03d}" for j in range(cfg.n_objects))
    space = CompositionSpace(
        states=states,
        objects=objects,
        seen_pairs=tuple(seen),
        val_unseen_pairs=tuple(val_unseen),
        test_unseen_pairs=tuple(test_unseen),
    )

    phi_a = rng_phi.normal(0.0, 1.0, size=(cfg.n_states, cfg.latent_dim))
    phi_o = rng_phi.normal(0.0, 1.0, size=(cfg.n_objects, cfg.latent_dim))
    prefix, enc = make_text_encoder(cfg.latent_dim, cfg.feature_dim, cfg.seed)

    def make_split(split: str, pairs: list[Pair]) -> Dataset:
        feats = np.empty((len(pairs) * cfg.samples_per_pair, cfg.feature_dim), dtype=np.float64)
        labels = np.empty((len(pairs) * cfg.samples_per_pair, 2), dtype=np.int64)
        row = 0
        for a, o in pairs:
            z = np.concatenate([prefix, phi_a[a], phi_o[o]])
            mean = enc.w_t @ z + enc.b_t
            for _ in range(cfg.samples_per_pair):
                noise = rng_noise.normal(0.0, cfg.noise_sigma, cfg.feature_dim) if cfg.noise_sigma > 0 else 0.0
                feats[row] = mean + noise
                labels[row] = (a, o)
                row += 1
        return Dataset(features=feats.astype(np.float32), labels=labels, split=split, space=space)

    datasets = {
        "train": make_split("train", list(seen)),
        "val": make_split("val", sorted(set(seen) | set(val_unseen))),
        "test": make_split("test", sorted(set(seen) | set(test_unseen))),
    }
    return space, datasets
