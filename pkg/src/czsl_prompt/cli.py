"""Command-line entry point.

Subcommands: synth, ent-stats, train, eval, gradcheck, sweep-sequences,
retrieve. Every command resolves its config (JSON file, flags win), runs,
and writes a run manifest into the output directory. Exit codes: 0 success,
1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .composition_space import (
    WeightConfig,
    compute_entanglement,
    load_space,
    save_space,
    seen_weight_table,
)
from .data import SPLITS, SynthConfig, load_features, save_features, synth_generate
from .errors import DataError, NumericError
from .evaluation import score_matrix, sweep_auc, topk_image_retrieval, topk_text_retrieval
from .model import init_model, load_checkpoint, save_checkpoint
from .training import (
    Batch,
    StatusSchedule,
    TrainerConfig,
    TrainStatus,
    finite_diff_check,
    make_batch,
    parse_status,
    train,
)
from .data import batch_iter

FEATURE_FILE = "{split}_features.bin"


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = _sha256_file(p)
        elif p.is_dir():
            for child in sorted(p.iterdir()):
                if child.is_file():
                    out[str(child)] = _sha256_file(child)
    return out


def _write_manifest(out_dir: Path, command: str, config: dict, seed, inputs, outputs, t0: float) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "input_hashes": _hash_inputs(inputs),
        "outputs": [str(p) for p in outputs],
        "wall_clock_sec": round(time.perf_counter() - t0, 6),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / "run_manifest.json"
    tmp = target.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, target)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing file: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"malformed config {p}: {e}") from None
    if not isinstance(cfg, dict):
        raise DataError(f"malformed config {p}: top level must be an object")
    return cfg


def _synth_config(cfg: dict, args) -> SynthConfig:
    section = dict(cfg.get("synth", {}))
    if args.seed is not None:
        section["seed"] = args.seed
    try:
        return SynthConfig(**section)
    except TypeError as e:
        raise DataError(f"bad synth config: {e}") from None


def _trainer_config(cfg: dict, args) -> TrainerConfig:
    section = dict(cfg.get("trainer", {}))
    for attr, key in [
        ("seed", "seed"), ("epochs", "epochs"), ("lr", "learning_rate"),
        ("batch_size", "batch_size"), ("dropout", "dropout_rate"),
        ("alpha", "alpha"), ("direction", "direction"), ("weight_mode", "weight_mode"),
        ("sequence", "sequence"), ("round_range", "round_range"),
        ("force_status", "force_status"),
    ]:
        val = getattr(args, attr, None)
        if val is not None:
            section[key] = val
    if getattr(args, "joint_baseline", False):
        section["joint_baseline"] = True

    schedule = StatusSchedule.parse(
        section.pop("sequence", "o,a,ao"), round_range=int(section.pop("round_range", 3))
    )
    weight_cfg = WeightConfig(
        alpha=float(section.pop("alpha", 2.0)),
        direction=section.pop("direction", "suppress"),
        mode=section.pop("weight_mode", "equation"),
    )
    force = section.pop("force_status", None)
    try:
        return TrainerConfig(
            schedule=schedule,
            weight_cfg=weight_cfg,
            force_status=parse_status(force) if force else None,
            **section,
        )
    except TypeError as e:
        raise DataError(f"bad trainer config: {e}") from None


def _model_params(cfg: dict, data_dir: Path, trainer_seed: int) -> dict:
    """Model hyperparameters, defaulting to the train sidecar where possible."""
    section = dict(cfg.get("model", {}))
    sidecar_path = data_dir / "train_features.json"
    sidecar = {}
    if sidecar_path.is_file():
        sidecar = json.loads(sidecar_path.read_text())
    params = {
        "latent_dim": section.get("latent_dim", sidecar.get("latent_dim")),
        "tau": float(section.get("tau", 1.0)),
        "init_source": section.get("init", "gaussian"),
        "embedding_path": section.get("embedding_path"),
        "encoder_seed": section.get("encoder_seed", sidecar.get("encoder_seed")),
        "seed": int(section.get("seed", trainer_seed)),
    }
    if params["latent_dim"] is None:
        raise DataError("model latent_dim not in config and no train sidecar to infer it from")
    return params


def _ent_stats_lines(space, stats) -> tuple[list[str], dict]:
    table = [
        f"{'states':<16}{space.n_states}",
        f"{'objects':<16}{space.n_objects}",
        f"{'seen_pairs':<16}{len(space.seen_set)}",
        f"{'ent_avg':<16}{stats.ent_avg:.2f}",
        f"{'ent_var_state':<16}{stats.var_a:.2f}",
        f"{'ent_var_object':<16}{stats.var_o:.2f}",
    ]
    blob = {
        "n_states": space.n_states,
        "n_objects": space.n_objects,
        "n_seen_pairs": len(space.seen_set),
        "ent_avg": stats.ent_avg,
        "ent_var_state": stats.var_a,
        "ent_var_object": stats.var_o,
    }
    return table, blob


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    synth_cfg = _synth_config(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    space, datasets = synth_generate(synth_cfg)
    save_space(space, out)
    extra = {
        "latent_dim": synth_cfg.latent_dim,
        "encoder_seed": synth_cfg.seed,
        "noise_sigma": synth_cfg.noise_sigma,
        "samples_per_pair": synth_cfg.samples_per_pair,
    }
    outputs = []
    for split in SPLITS:
        path = out / FEATURE_FILE.format(split=split)
        save_features(path, datasets[split], source_manifest=".", extra_meta=extra)
        outputs += [path, path.with_suffix(".json")]

    stats = compute_entanglement(space)
    lines, blob = _ent_stats_lines(space, stats)
    print(f"generated {out}: " + ", ".join(f"{split}={len(datasets[split])}" for split in SPLITS))
    for line in lines:
        print(line)
    if args.json:
        print(json.dumps(blob))
    _write_manifest(out, "synth", synth_cfg.__dict__, synth_cfg.seed,
                    [args.config] if args.config else [], outputs, t0)
    return 0


def cmd_ent_stats(args) -> int:
    t0 = time.perf_counter()
    space = load_space(args.data_dir)
    stats = compute_entanglement(space)
    lines, blob = _ent_stats_lines(space, stats)
    if not args.json:
        for line in lines:
            print(line)
    print(json.dumps(blob))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ent_stats.json").write_text(json.dumps(blob, indent=2) + "\n")
    _write_manifest(out, "ent-stats", {}, None, [args.data_dir], [out / "ent_stats.json"], t0)
    return 0


def _load_train_inputs(args):
    data_dir = Path(args.data_dir)
    space = load_space(data_dir)
    train_ds = load_features(data_dir / FEATURE_FILE.format(split="train"), space, "train")
    return data_dir, space, train_ds


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    data_dir, space, train_ds = _load_train_inputs(args)
    trainer_cfg = _trainer_config(cfg, args)
    model_p = _model_params(cfg, data_dir, trainer_cfg.seed)

    table, enc = init_model(
        space,
        d=int(model_p["latent_dim"]),
        feature_dim=train_ds.feature_dim,
        seed=model_p["seed"],
        init_source=model_p["init_source"],
        embedding_path=model_p["embedding_path"],
        encoder_seed=model_p["encoder_seed"],
        tau=model_p["tau"],
    )

    datasets = {"train": train_ds}
    val_fn = None
    if args.eval_val:
        val_ds = load_features(data_dir / FEATURE_FILE.format(split="val"), space, "val")
        datasets["val"] = val_ds

        def val_fn(tbl):
            report = sweep_auc(score_matrix(tbl, enc, val_ds, space, threads=args.threads))
            return {
                "auc": report.auc, "seen_acc": report.seen_acc,
                "unseen_acc": report.unseen_acc, "best_hm": report.best_hm,
            }

    trained, history = train(trainer_cfg, space, datasets, table, enc, val_metrics_fn=val_fn)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.bin"
    meta = {
        "space_manifest_sha256": _manifest_digest(data_dir),
        "trainer": _jsonable_trainer(trainer_cfg),
        "model": {k: v for k, v in model_p.items() if k != "embedding_path" or v},
    }
    save_checkpoint(ckpt, trained, enc, meta)

    hist_csv = out / "history.csv"
    rows = history.to_rows()
    with hist_csv.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()) if rows else
                                ["epoch", "status", "loss", "train_acc", "val_auc",
                                 "val_seen", "val_unseen", "val_hm",
                                 "theta_a_sha256", "theta_o_sha256"])
        writer.writeheader()
        writer.writerows(rows)
    hist_json = out / "history.json"
    hist_json.write_text(json.dumps({
        "records": rows,
        "initial_theta_a_sha256": history.initial_theta_a_sha256,
        "initial_theta_o_sha256": history.initial_theta_o_sha256,
        "encoder_fingerprint": history.encoder_fingerprint,
        "joint_entry_snapshots": history.joint_entry_snapshots,
    }, indent=2) + "\n")

    if history.records:
        last = history.records[-1]
        print(f"trained {len(history.records)} epochs; final loss {last.loss:.4f}, "
              f"train acc {last.train_acc:.4f}")
    else:
        print("trained 0 epochs; checkpoint equals the initialization")
    print(f"checkpoint: {ckpt}")
    inputs = ([args.config] if args.config else []) + [str(data_dir)]
    _write_manifest(out, "train", meta, trainer_cfg.seed, inputs,
                    [ckpt, ckpt.with_suffix(".json"), hist_csv, hist_json], t0)
    return 0


def _jsonable_trainer(cfg: TrainerConfig) -> dict:
    return {
        "learning_rate": cfg.learning_rate,
        "weight_decay": cfg.weight_decay,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "sequence": cfg.schedule.label(),
        "round_range": cfg.schedule.round_range,
        "alpha": cfg.weight_cfg.alpha,
        "direction": cfg.weight_cfg.direction,
        "weight_mode": cfg.weight_cfg.mode,
        "dropout_rate": cfg.dropout_rate,
        "seed": cfg.seed,
        "joint_baseline": cfg.joint_baseline,
        "force_status": cfg.force_status.value if cfg.force_status else None,
    }


def _manifest_digest(data_dir: Path) -> str:
    h = hashlib.sha256()
    for name in ["states.txt", "objects.txt", "train_pairs.csv", "val_pairs.csv", "test_pairs.csv"]:
        p = data_dir / name
        if p.is_file():
            h.update(name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    table, enc, _meta = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data_dir)
    space = load_space(data_dir)
    if table.theta_a.shape[0] != space.n_states or table.theta_o.shape[0] != space.n_objects:
        raise DataError("checkpoint table sizes do not match the manifest vocabularies")
    ds = load_features(data_dir / FEATURE_FILE.format(split=args.split), space, args.split)
    report = sweep_auc(score_matrix(table, enc, ds, space, threads=args.threads))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"eval_{args.split}.json"
    curve_path = out / f"curve_{args.split}.csv"
    report.write_json(report_path)
    report.write_curve_csv(curve_path)
    summary = {k: v for k, v in report.to_dict().items() if k != "curve"}
    print(json.dumps(summary))
    _write_manifest(out, "eval", {"split": args.split}, None,
                    [args.checkpoint, str(data_dir)], [report_path, curve_path], t0)
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    data_dir, space, train_ds = _load_train_inputs(args)
    trainer_cfg = _trainer_config(cfg, args)
    model_p = _model_params(cfg, data_dir, trainer_cfg.seed)
    table, enc = init_model(
        space, d=int(model_p["latent_dim"]), feature_dim=train_ds.feature_dim,
        seed=model_p["seed"], encoder_seed=model_p["encoder_seed"], tau=model_p["tau"],
    )
    stats = compute_entanglement(space)
    idx = batch_iter(train_ds, min(8, len(train_ds)), trainer_cfg.seed, 0)[0]
    batch = make_batch(train_ds, idx)

    worst = 0.0
    for status in (TrainStatus.O, TrainStatus.A, TrainStatus.AO):
        err = finite_diff_check(table, enc, batch, space, stats, trainer_cfg.weight_cfg,
                                h=args.h, status=status)
        print(f"status {status.value:<3} max relative error {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (threshold {args.threshold:.3e})")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "gradcheck", {"h": args.h, "threshold": args.threshold},
                    trainer_cfg.seed, [str(data_dir)], [], t0)
    if worst >= args.threshold:
        print(f"gradcheck FAILED: {worst:.3e} >= {args.threshold:.3e}", file=sys.stderr)
        return 3
    return 0


SEQUENCES = ["o,a,ao", "o,ao,a", "a,o,ao", "a,ao,o", "ao,a,o", "ao,o,a"]


def cmd_sweep_sequences(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_config(args.config)
    data_dir, space, train_ds = _load_train_inputs(args)
    test_ds = load_features(data_dir / FEATURE_FILE.format(split="test"), space, "test")
    base_cfg = _trainer_config(cfg, args)
    model_p = _model_params(cfg, data_dir, base_cfg.seed)

    rows = []
    variants = [(seq, False) for seq in SEQUENCES] + [("joint", True)]
    for seq, joint in variants:
        if joint:
            run_cfg = TrainerConfig(
                learning_rate=base_cfg.learning_rate, weight_decay=base_cfg.weight_decay,
                batch_size=base_cfg.batch_size, epochs=base_cfg.epochs,
                schedule=base_cfg.schedule, weight_cfg=base_cfg.weight_cfg,
                dropout_rate=base_cfg.dropout_rate, seed=base_cfg.seed, joint_baseline=True,
            )
        else:
            run_cfg = TrainerConfig(
                learning_rate=base_cfg.learning_rate, weight_decay=base_cfg.weight_decay,
                batch_size=base_cfg.batch_size, epochs=base_cfg.epochs,
                schedule=StatusSchedule.parse(seq, base_cfg.schedule.round_range),
                weight_cfg=base_cfg.weight_cfg, dropout_rate=base_cfg.dropout_rate,
                seed=base_cfg.seed,
            )
        table, enc = init_model(
            space, d=int(model_p["latent_dim"]), feature_dim=train_ds.feature_dim,
            seed=model_p["seed"], encoder_seed=model_p["encoder_seed"], tau=model_p["tau"],
        )
        trained, _hist = train(run_cfg, space, {"train": train_ds}, table, enc)
        report = sweep_auc(score_matrix(trained, enc, test_ds, space, threads=args.threads))
        label = "joint" if joint else seq.replace(",", "->")
        rows.append({
            "sequence": label,
            "seen_acc": report.seen_acc,
            "unseen_acc": report.unseen_acc,
            "best_hm": report.best_hm,
            "auc": report.auc,
        })
        print(f"{label:<10} S={report.seen_acc:.4f} U={report.unseen_acc:.4f} "
              f"HM={report.best_hm:.4f} AUC={report.auc:.4f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sequence_sweep.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sequence", "seen_acc", "unseen_acc", "best_hm", "auc"])
        writer.writeheader()
        writer.writerows(rows)
    (out / "sequence_sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
    _write_manifest(out, "sweep-sequences", _jsonable_trainer(base_cfg), base_cfg.seed,
                    [str(data_dir)], [csv_path, out / "sequence_sweep.json"], t0)
    return 0


def cmd_retrieve(args) -> int:
    t0 = time.perf_counter()
    table, enc, _meta = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data_dir)
    space = load_space(data_dir)
    ds = load_features(data_dir / FEATURE_FILE.format(split=args.split), space, args.split)

    if args.mode == "i2t":
        if args.index is None:
            raise DataError("mode i2t needs --index")
        if not (0 <= args.index < len(ds)):
            raise DataError(f"sample index {args.index} outside dataset of {len(ds)}")
        pairs = topk_text_retrieval(table, enc, ds.sample(args.index), space, args.k)
        result = {
            "mode": "i2t", "index": args.index,
            "true": space.pair_name(ds.sample(args.index).label),
            "topk": [space.pair_name(p) for p in pairs],
        }
    else:
        if args.state is None or args.object is None:
            raise DataError("mode t2i needs --state and --object")
        try:
            pair = (space.states.index(args.state), space.objects.index(args.object))
        except ValueError:
            raise DataError(f"unknown primitive {args.state!r} or {args.object!r}") from None
        idxs = topk_image_retrieval(table, enc, pair, ds, args.k)
        result = {
            "mode": "t2i", "pair": space.pair_name(pair),
            "topk": [{"index": i, "label": space.pair_name(ds.sample(i).label)} for i in idxs],
        }
    print(json.dumps(result))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "retrieval.json").write_text(json.dumps(result, indent=2) + "\n")
    _write_manifest(out, "retrieve", {"mode": args.mode, "k": args.k}, None,
                    [args.checkpoint, str(data_dir)], [out / "retrieval.json"], t0)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, out_default: str):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads for eval scoring")
    p.add_argument("--json", action="store_true", help="machine-readable output only")


def _add_trainer_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--direction", choices=["suppress", "enhance"])
    p.add_argument("--weight-mode", dest="weight_mode", choices=["equation", "pseudocode"])
    p.add_argument("--sequence", help="status order, e.g. 'o,a,ao'")
    p.add_argument("--round-range", dest="round_range", type=int)
    p.add_argument("--joint-baseline", dest="joint_baseline", action="store_true")
    p.add_argument("--force-status", dest="force_status", choices=["o", "a", "ao"])


def build_parser() -> _Parser:
    parser = _Parser(prog="czsl-prompt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic composition dataset")
    _add_common(p, "runs/synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ent-stats", help="print entanglement statistics of a manifest")
    p.add_argument("data_dir")
    _add_common(p, "runs/ent-stats")
    p.set_defaults(func=cmd_ent_stats)

    p = sub.add_parser("train", help="train prompt tables on a dataset directory")
    p.add_argument("data_dir")
    _add_common(p, "runs/train")
    _add_trainer_flags(p)
    p.add_argument("--eval-val", dest="eval_val", action="store_true",
                   help="evaluate the val split after every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--split", choices=["val", "test"], default="test")
    _add_common(p, "runs/eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("data_dir")
    _add_common(p, "runs/gradcheck")
    _add_trainer_flags(p)
    p.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--threshold", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep-sequences", help="train all six status orders plus the joint baseline")
    p.add_argument("data_dir")
    _add_common(p, "runs/sweep")
    _add_trainer_flags(p)
    p.set_defaults(func=cmd_sweep_sequences)

    p = sub.add_parser("retrieve", help="top-k retrieval from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("data_dir")
    p.add_argument("--split", choices=["val", "test"], default="test")
    p.add_argument("--mode", choices=["i2t", "t2i"], required=True)
    p.add_argument("--index", type=int, help="sample index for i2t")
    p.add_argument("--state", help="state name for t2i")
    p.add_argument("--object", help="object name for t2i")
    p.add_argument("-k", type=int, default=5)
    _add_common(p, "runs/retrieve")
    p.set_defaults(func=cmd_retrieve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
