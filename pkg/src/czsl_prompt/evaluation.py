"""Generalized zero-shot evaluation: calibrated accuracies, AUC, retrieval.

Candidates at evaluation are the union of the seen pairs and the split's
unseen pairs, ordered as the sorted seen block followed by the sorted unseen
block. A calibration bias added to unseen-candidate scores sweeps the
operating point between all-seen and all-unseen predictions; the area under
the resulting unseen-vs-seen accuracy curve summarizes the trade-off.

Each row flips from its best seen candidate to its best unseen candidate at
bias equal to the row margin (best seen score minus best unseen score), so
evaluating at every margin +/- epsilon, at midpoints between consecutive
margins, and at sentinels beyond the extremes realizes every achievable
(seen_acc, unseen_acc) point.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .composition_space import CompositionSpace, Pair
from .data import Dataset
from .errors import DataError
from .model import FrozenEncoders, PromptTable, normalize_rows, text_features

MARGIN_EPS_SCALE = 1e-6


@dataclass(frozen=True)
class ScoreMatrix:
    """Logits for every (sample, candidate) plus truth/seen bookkeeping."""

    logits: np.ndarray      # (N, C) float64
    candidates: np.ndarray  # (C, 2) int64
    seen_mask: np.ndarray   # (C,) bool, True for seen-block columns
    true_cols: np.ndarray   # (N,) int64
    true_is_seen: np.ndarray  # (N,) bool

    def __post_init__(self):
        if not np.all(np.isfinite(self.logits)):
            raise DataError("non-finite score entries")
        n, c = self.logits.shape
        if self.candidates.shape != (c, 2) or self.seen_mask.shape != (c,):
            raise DataError("candidate bookkeeping shapes disagree with logits")
        if self.true_cols.shape != (n,) or self.true_is_seen.shape != (n,):
            raise DataError("truth bookkeeping shapes disagree with logits")
        for arr in (self.logits, self.candidates, self.seen_mask, self.true_cols, self.true_is_seen):
            arr.setflags(write=False)

    @property
    def n_samples(self) -> int:
        return self.logits.shape[0]


def eval_candidates(space: CompositionSpace, split: str) -> tuple[np.ndarray, np.ndarray]:
    """(candidates, seen_mask) for a split: sorted seen block, then sorted unseen."""
    seen = list(space.seen_sorted)
    unseen = list(space.unseen_for_split(split))
    cands = np.asarray(seen + unseen, dtype=np.int64).reshape(-1, 2)
    mask = np.zeros(len(seen) + len(unseen), dtype=bool)
    mask[: len(seen)] = True
    return cands, mask


def score_matrix(
    table: PromptTable,
    enc: FrozenEncoders,
    dataset: Dataset,
    space: CompositionSpace,
    threads: int = 1,
) -> ScoreMatrix:
    """Score every sample against the split's candidate set."""
    if dataset.split not in ("val", "test"):
        raise DataError(f"score_matrix expects a val or test split, got {dataset.split!r}")
    cands, seen_mask = eval_candidates(space, dataset.split)
    f_t = text_features(enc, table, cands)
    f_v = normalize_rows(dataset.features, what="image feature")

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(len(dataset)), threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ix: f_v[ix] @ f_t.T, chunks))
        logits = np.vstack([p for p in parts if p.size]) / enc.tau
    else:
        logits = (f_v @ f_t.T) / enc.tau

    col = {tuple(pair): j for j, pair in enumerate(cands.tolist())}
    true_cols = np.empty(len(dataset), dtype=np.int64)
    for i, (a, o) in enumerate(dataset.labels):
        key = (int(a), int(o))
        if key not in col:
            raise DataError(f"label {key} at record {i} is not a candidate of split {dataset.split!r}")
        true_cols[i] = col[key]
    true_is_seen = seen_mask[true_cols]
    return ScoreMatrix(
        logits=logits,
        candidates=cands,
        seen_mask=seen_mask,
        true_cols=true_cols,
        true_is_seen=true_is_seen.copy(),
    )


def biased_accuracy(scores: ScoreMatrix, bias: float) -> tuple[float, float]:
    """(seen_acc, unseen_acc) after adding ``bias`` to unseen-candidate scores.

    Ties break toward the lowest column index. A side with no truth rows
    reports 1.0 by convention.
    """
    shifted = scores.logits + bias * (~scores.seen_mask)
    pred = shifted.argmax(axis=1)
    correct = pred == scores.true_cols
    seen_rows = scores.true_is_seen
    unseen_rows = ~seen_rows
    seen_acc = float(correct[seen_rows].mean()) if seen_rows.any() else 1.0
    unseen_acc = float(correct[unseen_rows].mean()) if unseen_rows.any() else 1.0
    return seen_acc, unseen_acc


@dataclass
class EvalReport:
    """Bias-0 accuracies, best harmonic mean over the sweep, AUC, and the curve."""

    seen_acc: float
    unseen_acc: float
    best_hm: float
    best_hm_bias: float
    auc: float
    curve: list[tuple[float, float, float]] = field(default_factory=list)  # (bias, seen, unseen)
    state_acc: float = 0.0
    object_acc: float = 0.0

    def to_dict(self) -> dict:
        return {
            "seen_acc": self.seen_acc,
            "unseen_acc": self.unseen_acc,
            "best_hm": self.best_hm,
            "best_hm_bias": self.best_hm_bias,
            "auc": self.auc,
            "state_acc": self.state_acc,
            "object_acc": self.object_acc,
            "curve": [list(p) for p in self.curve],
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def write_curve_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bias", "seen_acc", "unseen_acc"])
            for bias, s, u in self.curve:
                writer.writerow([f"{bias:.10g}", f"{s:.10g}", f"{u:.10g}"])


def _harmonic_mean(s: float, u: float) -> float:
    return 0.0 if s + u == 0 else 2 * s * u / (s + u)


def sweep_bias_points(scores: ScoreMatrix) -> np.ndarray:
    """Candidate biases hitting every operating point of the sweep."""
    seen_cols = scores.seen_mask
    if not seen_cols.any() or seen_cols.all():
        raise DataError("one-sided split: candidate set lacks a seen or unseen block")
    best_seen = scores.logits[:, seen_cols].max(axis=1)
    best_unseen = scores.logits[:, ~seen_cols].max(axis=1)
    margins = np.unique(best_seen - best_unseen)
    span = float(scores.logits.max() - scores.logits.min())
    eps = MARGIN_EPS_SCALE * (span if span > 0 else 1.0)
    mids = (margins[:-1] + margins[1:]) / 2 if margins.size > 1 else np.empty(0)
    sentinel = max(1.0, span)
    points = np.concatenate(
        [margins - eps, margins + eps, mids,
         [margins[0] - sentinel, margins[-1] + sentinel, 0.0]]
    )
    return np.unique(points)


def sweep_auc(scores: ScoreMatrix) -> EvalReport:
    """Trace the seen-unseen curve, its AUC, and the best harmonic mean."""
    if not scores.true_is_seen.any() or scores.true_is_seen.all():
        raise DataError("one-sided split: need at least one seen-truth and one unseen-truth row")
    biases = sweep_bias_points(scores)
    curve = []
    for b in biases:
        s, u = biased_accuracy(scores, float(b))
        curve.append((float(b), s, u))

    # bias ascending => seen_acc nonincreasing, unseen_acc nondecreasing
    auc = 0.0
    for (_, s0, u0), (_, s1, u1) in zip(curve, curve[1:]):
        auc += (s0 - s1) * (u0 + u1) / 2.0
    auc = min(max(auc, 0.0), 1.0)  # trapezoid rounding can drift past the bound

    best_hm, best_bias = 0.0, 0.0
    for b, s, u in curve:
        hm = _harmonic_mean(s, u)
        if hm > best_hm:
            best_hm, best_bias = hm, b

    seen0, unseen0 = biased_accuracy(scores, 0.0)
    pred0 = scores.logits.argmax(axis=1)
    pred_pairs = scores.candidates[pred0]
    true_pairs = scores.candidates[scores.true_cols]
    state_acc = float((pred_pairs[:, 0] == true_pairs[:, 0]).mean())
    object_acc = float((pred_pairs[:, 1] == true_pairs[:, 1]).mean())

    return EvalReport(
        seen_acc=seen0,
        unseen_acc=unseen0,
        best_hm=best_hm,
        best_hm_bias=best_bias,
        auc=float(auc),
        curve=curve,
        state_acc=state_acc,
        object_acc=object_acc,
    )


def _all_candidates(space: CompositionSpace) -> list[Pair]:
    unseen = sorted(set(space.val_unseen_pairs) | set(space.test_unseen_pairs))
    return list(space.seen_sorted) + unseen


def topk_text_retrieval(
    table: PromptTable,
    enc: FrozenEncoders,
    sample,
    space: CompositionSpace,
    k: int,
) -> list[Pair]:
    """Top-k compositions for an image, over all seen and unseen pairs."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    from .model import class_logits, encode_image

    cands = _all_candidates(space)
    logits = class_logits(encode_image(sample), cands, enc, table)
    order = np.argsort(-logits, kind="stable")[:k]
    return [cands[i] for i in order]


def topk_image_retrieval(
    table: PromptTable,
    enc: FrozenEncoders,
    pair: Pair,
    dataset: Dataset,
    k: int,
) -> list[int]:
    """Top-k sample indices for a composition, ranked by cosine similarity."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if len(dataset) == 0:
        raise DataError("empty dataset")
    from .model import encode_text

    f_t = encode_text(enc, table, pair)
    scores = normalize_rows(dataset.features, what="image feature") @ f_t
    order = np.argsort(-scores, kind="stable")[:k]
    return [int(i) for i in order]
