"""Training: reweighted cross-entropy, status-masked analytic gradients, Adam.

The status machine cycles three phases, each lasting ``round_range`` epochs:
train the object table with the state table frozen, the reverse, and both
jointly. A frozen table is bit-identical across its phase: its gradients are
zeroed, its Adam moments untouched, and weight decay skips it.

Gradients are exact. For one sample with unit image feature ``f_v`` and
candidate text features ``f_j = u_j / ||u_j||`` where
``u_j = W z_j + b`` and ``z_j = concat(prefix, theta_a[a_j], theta_o[o_j])``,
the chain rule through softmax, the cosine logit, the normalization, and the
affine map gives

    dL/du_j = (g_j - (g_j . f_j) f_j) / ||u_j||,   g_j = sum_i dL/dS_ij f_v_i / tau

and ``dL/dz_j = W^T dL/du_j``, whose state/object slices scatter-add into the
table gradients. Every candidate row receives gradient through the softmax
denominator, not just the rows labeled in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .composition_space import (
    CompositionSpace,
    EntanglementStats,
    WeightConfig,
    compute_entanglement,
    seen_weight_table,
)
from .data import Dataset, batch_iter
from .errors import DataError, NumericError
from .model import FrozenEncoders, PromptTable, array_checksum, normalize_rows


class TrainStatus(Enum):
    """Which prompt table(s) receive updates during an epoch."""

    O = "o"    # train theta_o, freeze theta_a
    A = "a"    # train theta_a, freeze theta_o
    AO = "ao"  # train both

    @property
    def trains_state(self) -> bool:
        return self in (TrainStatus.A, TrainStatus.AO)

    @property
    def trains_object(self) -> bool:
        return self in (TrainStatus.O, TrainStatus.AO)


def parse_status(text: str) -> TrainStatus:
    try:
        return TrainStatus(text.strip().lower())
    except ValueError:
        raise DataError(f"unknown status {text!r}: expected one of o, a, ao") from None


@dataclass(frozen=True)
class StatusSchedule:
    """An ordered triple of distinct statuses, each run for ``round_range`` epochs."""

    sequence: tuple[TrainStatus, TrainStatus, TrainStatus] = (TrainStatus.O, TrainStatus.A, TrainStatus.AO)
    round_range: int = 3

    def __post_init__(self):
        if self.round_range < 1:
            raise DataError(f"round_range must be >= 1, got {self.round_range}")
        if len(self.sequence) != 3 or set(self.sequence) != set(TrainStatus):
            raise DataError("sequence must be a permutation of the three statuses")

    @classmethod
    def parse(cls, text: str, round_range: int = 3) -> "StatusSchedule":
        parts = text.replace("->", ",").split(",")
        statuses = tuple(parse_status(p) for p in parts if p.strip())
        if len(statuses) != 3:
            raise DataError(f"schedule {text!r} must name exactly three statuses")
        return cls(sequence=statuses, round_range=round_range)

    def label(self) -> str:
        return "->".join(s.value for s in self.sequence)


def status_for_epoch(schedule: StatusSchedule, epoch: int) -> TrainStatus:
    """Status active at a given epoch: sequence[(epoch // K) mod 3]."""
    if epoch < 0:
        raise DataError(f"epoch must be >= 0, got {epoch}")
    return schedule.sequence[(epoch // schedule.round_range) % 3]


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    batch_size: int = 128
    epochs: int = 15
    schedule: StatusSchedule = field(default_factory=StatusSchedule)
    weight_cfg: WeightConfig = field(default_factory=lambda: WeightConfig(alpha=2.0, direction="suppress"))
    dropout_rate: float = 0.3
    seed: int = 0
    joint_baseline: bool = False
    # ablation override: force every epoch to one status, bypassing the schedule
    force_status: TrainStatus | None = None

    def __post_init__(self):
        if not (self.learning_rate > 0):
            raise DataError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise DataError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise DataError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.weight_decay < 0:
            raise DataError("weight_decay must be >= 0")
        if self.seed < 0:
            raise DataError("seed must be nonnegative")


@dataclass
class Batch:
    """Unit-norm image features plus integer pair labels."""

    f_v: np.ndarray     # (B, D) float64, rows unit norm
    labels: np.ndarray  # (B, 2) int64


def make_batch(dataset: Dataset, indices: np.ndarray) -> Batch:
    feats = dataset.features[np.asarray(indices, dtype=np.int64)]
    return Batch(f_v=normalize_rows(feats, what="image feature"), labels=dataset.labels[indices])


def _true_columns(space: CompositionSpace, labels: np.ndarray) -> np.ndarray:
    col = {pair: j for j, pair in enumerate(space.seen_sorted)}
    out = np.empty(labels.shape[0], dtype=np.int64)
    for i, (a, o) in enumerate(labels):
        key = (int(a), int(o))
        if key not in col:
            raise DataError(f"batch label {key} is not a seen pair")
        out[i] = col[key]
    return out


def _forward_backward(
    table: PromptTable,
    enc: FrozenEncoders,
    batch: Batch,
    space: CompositionSpace,
    stats: EntanglementStats,
    weight_cfg: WeightConfig,
    status: TrainStatus | None,
    dropout_mask: np.ndarray | None,
    weights: np.ndarray | None = None,
):
    """Shared loss/gradient core over the seen candidate set."""
    cand = space.seen_array
    d = table.dim
    n = cand.shape[0]
    z = np.concatenate(
        [np.broadcast_to(table.prefix, (n, d)), table.theta_a[cand[:, 0]], table.theta_o[cand[:, 1]]],
        axis=1,
    )
    if dropout_mask is not None:
        z = z * dropout_mask
    u = z @ enc.w_t.T + enc.b_t
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms < 1e-12):
        raise NumericError(f"degenerate text feature: candidate {int(np.argmin(norms))}")
    f_t = u / norms[:, None]

    scores = (batch.f_v @ f_t.T) / enc.tau  # (B, C)
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted - log_norm[:, None]

    true_cols = _true_columns(space, batch.labels)
    if weights is None:
        weights = seen_weight_table(stats, space, weight_cfg)
    w = weights[true_cols]
    b_size = batch.f_v.shape[0]
    per_sample = -w * log_p[np.arange(b_size), true_cols]
    if not np.all(np.isfinite(per_sample)):
        bad = int(np.argmax(~np.isfinite(per_sample)))
        raise NumericError(f"non-finite loss at sample {bad}")
    loss = float(per_sample.mean())

    probs = np.exp(log_p)
    diag = {
        "per_sample_loss": per_sample,
        "weights": w,
        "true_prob": probs[np.arange(b_size), true_cols],
        "correct": scores.argmax(axis=1) == true_cols,
    }

    if status is None:
        return loss, diag, None, None

    # backward
    d_scores = probs * (w / b_size)[:, None]
    d_scores[np.arange(b_size), true_cols] -= w / b_size
    g = (d_scores.T @ batch.f_v) / enc.tau            # (C, D) = dL/df_t
    proj = np.sum(g * f_t, axis=1)
    d_u = (g - proj[:, None] * f_t) / norms[:, None]  # (C, D)
    d_z = d_u @ enc.w_t                               # (C, 3d)
    if dropout_mask is not None:
        d_z = d_z * dropout_mask

    if status.trains_state:
        grad_a = np.zeros_like(table.theta_a)
        np.add.at(grad_a, cand[:, 0], d_z[:, d:2 * d])
    else:
        grad_a = np.zeros_like(table.theta_a)
    if status.trains_object:
        grad_o = np.zeros_like(table.theta_o)
        np.add.at(grad_o, cand[:, 1], d_z[:, 2 * d:3 * d])
    else:
        grad_o = np.zeros_like(table.theta_o)
    if not (np.all(np.isfinite(grad_a)) and np.all(np.isfinite(grad_o))):
        raise NumericError("non-finite gradient")
    return loss, diag, grad_a, grad_o


def batch_loss(
    table: PromptTable,
    enc: FrozenEncoders,
    batch: Batch,
    space: CompositionSpace,
    stats: EntanglementStats,
    weight_cfg: WeightConfig,
    dropout_mask: np.ndarray | None = None,
) -> tuple[float, dict]:
    """Mean entanglement-weighted cross entropy over the seen candidate set."""
    loss, diag, _, _ = _forward_backward(
        table, enc, batch, space, stats, weight_cfg, status=None, dropout_mask=dropout_mask
    )
    return loss, diag


def batch_gradients(
    table: PromptTable,
    enc: FrozenEncoders,
    batch: Batch,
    space: CompositionSpace,
    stats: EntanglementStats,
    weight_cfg: WeightConfig,
    status: TrainStatus = TrainStatus.AO,
    dropout_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact loss gradients for both tables; the frozen table's gradient is zero."""
    _, _, grad_a, grad_o = _forward_backward(
        table, enc, batch, space, stats, weight_cfg, status=status, dropout_mask=dropout_mask
    )
    return grad_a, grad_o


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt_state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    step_index: int = 1,
    trainable: dict[str, bool] | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step with decoupled weight decay.

    Parameters whose ``trainable`` flag is False are returned untouched,
    moments included; weight decay applies only to trainable parameters.
    """
    if step_index < 1:
        raise DataError(f"step_index must be >= 1, got {step_index}")
    b1, b2 = betas
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for key, p in params.items():
        if trainable is not None and not trainable.get(key, True):
            new_params[key] = p
            new_m[key] = opt_state.m[key]
            new_v[key] = opt_state.v[key]
            continue
        g = grads[key]
        m = b1 * opt_state.m[key] + (1 - b1) * g
        v = b2 * opt_state.v[key] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step_index)
        v_hat = v / (1 - b2 ** step_index)
        update = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + weight_decay * p
        new_params[key] = p - lr * update
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamState(m=new_m, v=new_v)


@dataclass
class EpochRecord:
    epoch: int
    status: str
    loss: float
    train_acc: float
    theta_a_sha256: str
    theta_o_sha256: str
    val_metrics: dict | None = None


@dataclass
class TrainHistory:
    """Per-epoch log plus the checksums that prove freeze soundness."""

    records: list[EpochRecord] = field(default_factory=list)
    initial_theta_a_sha256: str = ""
    initial_theta_o_sha256: str = ""
    encoder_fingerprint: str = ""
    # checksum snapshots taken on entering a joint phase (diagnostic only)
    joint_entry_snapshots: list[dict] = field(default_factory=list)

    def to_rows(self) -> list[dict]:
        rows = []
        for r in self.records:
            row = {
                "epoch": r.epoch,
                "status": r.status,
                "loss": r.loss,
                "train_acc": r.train_acc,
                "val_auc": None,
                "val_seen": None,
                "val_unseen": None,
                "val_hm": None,
                "theta_a_sha256": r.theta_a_sha256,
                "theta_o_sha256": r.theta_o_sha256,
            }
            if r.val_metrics:
                row["val_auc"] = r.val_metrics.get("auc")
                row["val_seen"] = r.val_metrics.get("seen_acc")
                row["val_unseen"] = r.val_metrics.get("unseen_acc")
                row["val_hm"] = r.val_metrics.get("best_hm")
            rows.append(row)
        return rows


def train(
    config: TrainerConfig,
    space: CompositionSpace,
    datasets: dict[str, Dataset],
    table: PromptTable,
    enc: FrozenEncoders,
    val_metrics_fn=None,
) -> tuple[PromptTable, TrainHistory]:
    """Run the status-machine training loop. Deterministic given the config seed.

    ``val_metrics_fn(table) -> dict`` runs after each epoch when given.
    The input table is not mutated; a trained copy is returned.
    """
    if "train" not in datasets or len(datasets["train"]) == 0:
        raise DataError("train dataset missing or empty")
    train_ds = datasets["train"]
    if train_ds.feature_dim != enc.feature_dim:
        raise DataError(
            f"feature dim mismatch: data {train_ds.feature_dim}, encoder {enc.feature_dim}"
        )

    stats = compute_entanglement(space)
    if config.joint_baseline:
        weights = np.ones(space.seen_array.shape[0])
    else:
        weights = seen_weight_table(stats, space, config.weight_cfg)

    table = table.copy()
    params = {"a": table.theta_a, "o": table.theta_o}
    opt = AdamState.zeros_like(params)
    step = 0

    history = TrainHistory(
        initial_theta_a_sha256=array_checksum(params["a"]),
        initial_theta_o_sha256=array_checksum(params["o"]),
        encoder_fingerprint=enc.fingerprint(),
    )

    f_v_all = normalize_rows(train_ds.features, what="image feature")
    labels_all = train_ds.labels
    drop_rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x0D0]))
    n_cand = space.seen_array.shape[0]
    prev_status: TrainStatus | None = None

    for epoch in range(config.epochs):
        if config.joint_baseline:
            status = TrainStatus.AO
        elif config.force_status is not None:
            status = config.force_status
        else:
            status = status_for_epoch(config.schedule, epoch)
        if status == TrainStatus.AO and prev_status not in (TrainStatus.AO, None):
            history.joint_entry_snapshots.append(
                {
                    "epoch": epoch,
                    "theta_a_sha256": array_checksum(params["a"]),
                    "theta_o_sha256": array_checksum(params["o"]),
                }
            )
        prev_status = status
        trainable = {"a": status.trains_state, "o": status.trains_object}
        frozen_before = {k: array_checksum(params[k]) for k in params if not trainable[k]}

        loss_sum = 0.0
        correct = 0
        seen_n = 0
        for idx in batch_iter(train_ds, config.batch_size, config.seed, epoch):
            batch = Batch(f_v=f_v_all[idx], labels=labels_all[idx])
            mask = None
            if config.dropout_rate > 0:
                keep = drop_rng.random((n_cand, 3 * table.dim)) >= config.dropout_rate
                mask = keep / (1.0 - config.dropout_rate)
            work = PromptTable(params["a"], params["o"], table.prefix)
            loss, diag, grad_a, grad_o = _forward_backward(
                work, enc, batch, space, stats, config.weight_cfg,
                status=status, dropout_mask=mask, weights=weights,
            )
            step += 1
            params, opt = adam_step(
                params,
                {"a": grad_a, "o": grad_o},
                opt,
                lr=config.learning_rate,
                weight_decay=config.weight_decay,
                step_index=step,
                trainable=trainable,
            )
            loss_sum += loss * len(idx)
            correct += int(diag["correct"].sum())
            seen_n += len(idx)

        for key, before in frozen_before.items():
            after = array_checksum(params[key])
            if after != before:
                raise NumericError(f"frozen table {key!r} changed during epoch {epoch}")

        record = EpochRecord(
            epoch=epoch,
            status=status.value,
            loss=loss_sum / seen_n,
            train_acc=correct / seen_n,
            theta_a_sha256=array_checksum(params["a"]),
            theta_o_sha256=array_checksum(params["o"]),
        )
        if val_metrics_fn is not None:
            record.val_metrics = val_metrics_fn(PromptTable(params["a"], params["o"], table.prefix))
        history.records.append(record)

    trained = PromptTable(params["a"], params["o"], table.prefix)
    if history.encoder_fingerprint != enc.fingerprint():
        raise NumericError("frozen encoders changed during training")
    return trained, history


def finite_diff_check(
    table: PromptTable,
    enc: FrozenEncoders,
    batch: Batch,
    space: CompositionSpace,
    stats: EntanglementStats,
    weight_cfg: WeightConfig,
    h: float = 1e-5,
    status: TrainStatus = TrainStatus.AO,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Only entries trainable under ``status`` are compared; dropout is off.
    """
    if not (h > 0):
        raise DataError(f"h must be positive, got {h}")
    grad_a, grad_o = batch_gradients(table, enc, batch, space, stats, weight_cfg, status=status)

    def loss_at(theta_a, theta_o):
        probe = PromptTable(theta_a, theta_o, table.prefix)
        loss, _ = batch_loss(probe, enc, batch, space, stats, weight_cfg)
        return loss

    max_err = 0.0
    jobs = []
    if status.trains_state:
        jobs.append(("a", grad_a))
    if status.trains_object:
        jobs.append(("o", grad_o))
    for key, analytic in jobs:
        base = table.theta_a if key == "a" else table.theta_o
        other = table.theta_o if key == "a" else table.theta_a
        for flat in range(base.size):
            i, j = divmod(flat, base.shape[1])
            plus = base.copy()
            plus[i, j] += h
            minus = base.copy()
            minus[i, j] -= h
            if key == "a":
                numeric = (loss_at(plus, other) - loss_at(minus, other)) / (2 * h)
            else:
                numeric = (loss_at(other, plus) - loss_at(other, minus)) / (2 * h)
            a_val = analytic[i, j]
            err = abs(a_val - numeric) / max(abs(a_val), abs(numeric), 1e-12)
            max_err = max(max_err, err)
    return max_err
