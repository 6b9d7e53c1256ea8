import csv
from pathlib import Path

import numpy as np
import pytest

from czsl_prompt import CompositionSpace


def write_manifest(root: Path, states, objects, train_pairs, val_pairs=(), test_pairs=()):
    """Write a split-manifest directory from name lists and name-pair lists."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "states.txt").write_text("\n".join(states) + "\n")
    (root / "objects.txt").write_text("\n".join(objects) + "\n")
    for name, pairs in [("train_pairs.csv", train_pairs),
                        ("val_pairs.csv", val_pairs),
                        ("test_pairs.csv", test_pairs)]:
        with (root / name).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["state", "object"])
            writer.writerows(pairs)
    return root


def grid_manifest(root: Path, n_states, n_objects, n_seen, n_val, n_test):
    """Manifest with given cardinalities: row-major seen pairs, then val/test unseen."""
    states = [f"s{i:03d}" for i in range(n_states)]
    objects = [f"o{j:03d}" for j in range(n_objects)]
    all_pairs = [(states[a], objects[o]) for a in range(n_states) for o in range(n_objects)]
    assert n_seen + n_val + n_test <= len(all_pairs)
    train = all_pairs[:n_seen]
    val = all_pairs[n_seen:n_seen + n_val]
    test = all_pairs[n_seen + n_val:n_seen + n_val + n_test]
    return write_manifest(root, states, objects, train, val, test)


@pytest.fixture
def toy_space():
    """2x2 grid, three seen pairs: the hand-derivation instance."""
    return CompositionSpace(
        states=("old", "ripe"),
        objects=("cat", "apple"),
        seen_pairs=((0, 0), (0, 1), (1, 0)),
        val_unseen_pairs=(),
        test_unseen_pairs=((1, 1),),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
