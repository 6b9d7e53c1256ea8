"""Primitive vocabularies, composition splits, and entanglement statistics.

A composition space is the pair of vocabularies (states, objects) together
with the seen split C_s used for training and the unseen pair lists used by
the validation and test splits. Entanglement quantifies how densely and how
unevenly the seen split covers the full state x object grid:

* average rate   ent_avg = |C_s| / (|A| * |O|)
* partner counts ent_a[a] = number of seen pairs containing state a
                 ent_o[o] = number of seen pairs containing object o
* variances      var_a = sum_a (ent_a[a] - ent_avg)^2 / |A|   (and var_o)

The per-pair loss weight derives from a normalized entanglement score and a
coefficient alpha; ``suppress`` down-weights strongly entangled pairs while
``enhance`` up-weights them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError

Pair = tuple[int, int]

STATES_FILE = "states.txt"
OBJECTS_FILE = "objects.txt"
PAIR_FILES = {"train": "train_pairs.csv", "val": "val_pairs.csv", "test": "test_pairs.csv"}


@dataclass(frozen=True)
class CompositionSpace:
    """Vocabularies plus pair splits. Immutable after construction.

    Pair tuples are (state_idx, object_idx). ``seen_pairs`` is the training
    split; ``val_unseen_pairs`` / ``test_unseen_pairs`` are the unseen pairs
    evaluated by the respective splits and are disjoint from ``seen_pairs``.
    """

    states: tuple[str, ...]
    objects: tuple[str, ...]
    seen_pairs: tuple[Pair, ...]
    val_unseen_pairs: tuple[Pair, ...] = ()
    test_unseen_pairs: tuple[Pair, ...] = ()

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @cached_property
    def seen_set(self) -> frozenset[Pair]:
        return frozenset(self.seen_pairs)

    @cached_property
    def unseen_set(self) -> frozenset[Pair]:
        return frozenset(self.val_unseen_pairs) | frozenset(self.test_unseen_pairs)

    @cached_property
    def seen_sorted(self) -> tuple[Pair, ...]:
        """Canonical candidate order for training: seen pairs sorted by (state, object)."""
        return tuple(sorted(self.seen_set))

    @cached_property
    def seen_array(self) -> np.ndarray:
        arr = np.asarray(self.seen_sorted, dtype=np.int64).reshape(-1, 2)
        arr.setflags(write=False)
        return arr

    def unseen_for_split(self, split: str) -> tuple[Pair, ...]:
        if split == "val":
            return tuple(sorted(set(self.val_unseen_pairs)))
        if split == "test":
            return tuple(sorted(set(self.test_unseen_pairs)))
        raise DataError(f"split {split!r} has no unseen pair list (expected 'val' or 'test')")

    def pair_name(self, pair: Pair) -> str:
        return f"{self.states[pair[0]]} {self.objects[pair[1]]}"


def validate_space(space: CompositionSpace) -> list[str]:
    """Return a list of invariant violations; empty means the space is well formed."""
    violations: list[str] = []
    if space.n_states < 1:
        violations.append("empty state vocabulary")
    if space.n_objects < 1:
        violations.append("empty object vocabulary")
    if len(set(space.states)) != len(space.states):
        violations.append("duplicate state name")
    if len(set(space.objects)) != len(space.objects):
        violations.append("duplicate object name")
    if not space.seen_pairs:
        violations.append("empty seen split")

    splits = {
        "train": space.seen_pairs,
        "val": space.val_unseen_pairs,
        "test": space.test_unseen_pairs,
    }
    for name, pairs in splits.items():
        seen_here: set[Pair] = set()
        for a, o in pairs:
            if not (0 <= a < space.n_states and 0 <= o < space.n_objects):
                violations.append(f"unknown primitive: pair ({a},{o}) in {name} split")
            if (a, o) in seen_here:
                violations.append(f"duplicate pair ({a},{o}) in {name} split")
            seen_here.add((a, o))

    overlap = space.seen_set & space.unseen_set
    for pair in sorted(overlap):
        violations.append(f"split overlap: pair {pair} is both seen and unseen")
    return violations


def _read_names(path: Path) -> tuple[str, ...]:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    names = []
    with path.open(encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    # trailing blank lines are tolerated, interior ones are not
    while raw and not raw[-1].strip():
        raw.pop()
    for lineno, line in enumerate(raw, start=1):
        name = line.strip()
        if not name:
            raise DataError(f"malformed line {lineno} in {path}: empty name")
        names.append(name)
    if not names:
        raise DataError(f"malformed file {path}: no entries")
    if len(set(names)) != len(names):
        raise DataError(f"duplicate primitive name in {path}")
    return tuple(names)


def _read_pairs(path: Path, state_idx: dict[str, int], object_idx: dict[str, int]) -> list[Pair]:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    pairs: list[Pair] = []
    seen: set[Pair] = set()
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["state", "object"]:
            raise DataError(f"malformed header in {path}: expected 'state,object'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise DataError(f"malformed line {lineno} in {path}: expected 2 fields")
            s_name, o_name = row[0].strip(), row[1].strip()
            if s_name not in state_idx:
                raise DataError(f"unknown primitive {s_name!r} at line {lineno} in {path}")
            if o_name not in object_idx:
                raise DataError(f"unknown primitive {o_name!r} at line {lineno} in {path}")
            pair = (state_idx[s_name], object_idx[o_name])
            if pair in seen:
                raise DataError(f"duplicate pair {s_name!r},{o_name!r} at line {lineno} in {path}")
            seen.add(pair)
            pairs.append(pair)
    return pairs


def load_space(path: str | Path) -> CompositionSpace:
    """Load a split-manifest directory into a validated CompositionSpace.

    Layout: ``states.txt`` and ``objects.txt`` (one name per line, index =
    line order) plus ``train_pairs.csv`` / ``val_pairs.csv`` /
    ``test_pairs.csv`` with header ``state,object``. Val/test files may list
    seen pairs as well; unseen status is derived by set difference against
    the train split.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"missing file: {root} is not a directory")
    states = _read_names(root / STATES_FILE)
    objects = _read_names(root / OBJECTS_FILE)
    state_idx = {name: i for i, name in enumerate(states)}
    object_idx = {name: i for i, name in enumerate(objects)}

    train = _read_pairs(root / PAIR_FILES["train"], state_idx, object_idx)
    if not train:
        raise DataError(f"malformed file {root / PAIR_FILES['train']}: no pairs")
    seen = set(train)
    val = [p for p in _read_pairs(root / PAIR_FILES["val"], state_idx, object_idx) if p not in seen]
    test = [p for p in _read_pairs(root / PAIR_FILES["test"], state_idx, object_idx) if p not in seen]

    space = CompositionSpace(
        states=states,
        objects=objects,
        seen_pairs=tuple(train),
        val_unseen_pairs=tuple(val),
        test_unseen_pairs=tuple(test),
    )
    violations = validate_space(space)
    if violations:
        raise DataError(f"invalid manifest {root}: " + "; ".join(violations))
    return space


def save_space(space: CompositionSpace, path: str | Path) -> None:
    """Write a space back out in the split-manifest layout."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / STATES_FILE).write_text("\n".join(space.states) + "\n", encoding="utf-8")
    (root / OBJECTS_FILE).write_text("\n".join(space.objects) + "\n", encoding="utf-8")
    splits = {
        "train": space.seen_pairs,
        "val": space.val_unseen_pairs,
        "test": space.test_unseen_pairs,
    }
    for split, pairs in splits.items():
        with (root / PAIR_FILES[split]).open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["state", "object"])
            for a, o in pairs:
                writer.writerow([space.states[a], space.objects[o]])


@dataclass(frozen=True)
class EntanglementStats:
    """Entanglement quantities of one space's seen split.

    ``max_seen_product`` and ``max_seen_deviation`` are the normalizers used
    by the two weight modes: the maximum over seen pairs of the raw
    partner-count product, respectively of the product of absolute deviations
    from the mean partner count.
    """

    ent_avg: float
    ent_a: np.ndarray
    ent_o: np.ndarray
    var_a: float
    var_o: float
    mean_a: float
    mean_o: float
    max_seen_product: float
    max_seen_deviation: float

    def __post_init__(self):
        self.ent_a.setflags(write=False)
        self.ent_o.setflags(write=False)


def compute_entanglement(space: CompositionSpace) -> EntanglementStats:
    """Compute average entanglement rate, per-primitive counts, and variances."""
    violations = validate_space(space)
    if violations:
        raise DataError("invalid space: " + "; ".join(violations))
    seen = space.seen_array
    n_seen = seen.shape[0]
    ent_a = np.bincount(seen[:, 0], minlength=space.n_states).astype(np.int64)
    ent_o = np.bincount(seen[:, 1], minlength=space.n_objects).astype(np.int64)
    ent_avg = n_seen / (space.n_states * space.n_objects)
    var_a = float(np.sum((ent_a - ent_avg) ** 2) / space.n_states)
    var_o = float(np.sum((ent_o - ent_avg) ** 2) / space.n_objects)
    mean_a = float(ent_a.mean())
    mean_o = float(ent_o.mean())

    prod = ent_a[seen[:, 0]].astype(np.float64) * ent_o[seen[:, 1]].astype(np.float64)
    dev = np.abs(ent_a[seen[:, 0]] - mean_a) * np.abs(ent_o[seen[:, 1]] - mean_o)
    return EntanglementStats(
        ent_avg=float(ent_avg),
        ent_a=ent_a,
        ent_o=ent_o,
        var_a=var_a,
        var_o=var_o,
        mean_a=mean_a,
        mean_o=mean_o,
        max_seen_product=float(prod.max()),
        max_seen_deviation=float(dev.max()),
    )


@dataclass(frozen=True)
class WeightConfig:
    """Loss reweighting knobs.

    alpha:     nonnegative coefficient; 0 disables reweighting entirely.
    direction: 'suppress' gives w = 1 + alpha * (1 - score),
               'enhance'  gives w = 1 + alpha * score.
    mode:      'equation'   scores a pair by the product of raw partner counts,
               'pseudocode' by the product of absolute deviations from the
               mean partner count; both are normalized by the maximum of the
               same quantity over seen pairs.
    """

    alpha: float = 0.0
    direction: str = "suppress"
    mode: str = "equation"

    def __post_init__(self):
        if self.alpha < 0:
            raise DataError(f"alpha must be nonnegative, got {self.alpha}")
        if self.direction not in ("suppress", "enhance"):
            raise DataError(f"direction must be 'suppress' or 'enhance', got {self.direction!r}")
        if self.mode not in ("equation", "pseudocode"):
            raise DataError(f"mode must be 'equation' or 'pseudocode', got {self.mode!r}")


def _pair_scores(stats: EntanglementStats, a: np.ndarray, o: np.ndarray, cfg: WeightConfig) -> np.ndarray:
    if cfg.mode == "equation":
        raw = stats.ent_a[a].astype(np.float64) * stats.ent_o[o].astype(np.float64)
        denom = stats.max_seen_product
    else:
        raw = np.abs(stats.ent_a[a] - stats.mean_a) * np.abs(stats.ent_o[o] - stats.mean_o)
        denom = stats.max_seen_deviation
    if denom <= 0.0:
        raise NumericError(
            f"degenerate entanglement: every seen pair scores zero in mode {cfg.mode!r}"
        )
    return raw / denom


def composition_weight(stats: EntanglementStats, pair: Pair, cfg: WeightConfig) -> float:
    """Loss weight for one composition. Lies in [1, 1+alpha] over seen pairs."""
    if cfg.alpha == 0.0:
        return 1.0
    a = np.asarray([pair[0]])
    o = np.asarray([pair[1]])
    if not (0 <= pair[0] < stats.ent_a.shape[0] and 0 <= pair[1] < stats.ent_o.shape[0]):
        raise DataError(f"pair {pair} outside the space")
    score = _pair_scores(stats, a, o, cfg)[0]
    if cfg.direction == "suppress":
        return float(1.0 + cfg.alpha * (1.0 - score))
    return float(1.0 + cfg.alpha * score)


def seen_weight_table(stats: EntanglementStats, space: CompositionSpace, cfg: WeightConfig) -> np.ndarray:
    """Weights for every seen pair, aligned with ``space.seen_sorted``."""
    seen = space.seen_array
    if cfg.alpha == 0.0:
        return np.ones(seen.shape[0], dtype=np.float64)
    score = _pair_scores(stats, seen[:, 0], seen[:, 1], cfg)
    if cfg.direction == "suppress":
        return 1.0 + cfg.alpha * (1.0 - score)
    return 1.0 + cfg.alpha * score
