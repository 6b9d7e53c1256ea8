import hashlib
import json

import numpy as np
import pytest

from czsl_prompt import init_model, load_checkpoint, load_space
from czsl_prompt.cli import main
from conftest import grid_manifest

FIXTURE_CONFIG = {
    "synth": {
        "n_states": 6, "n_objects": 5, "latent_dim": 8, "feature_dim": 64,
        "seen_fraction": 0.5, "skew": 0.0, "noise_sigma": 0.0,
        "samples_per_pair": 20, "seed": 7,
    },
    "model": {"latent_dim": 8, "tau": 0.2},
    "trainer": {
        "learning_rate": 0.05, "weight_decay": 1e-5, "batch_size": 128,
        "epochs": 6, "round_range": 3, "sequence": "o,a,ao",
        "alpha": 2.0, "direction": "suppress", "weight_mode": "equation",
        "dropout_rate": 0.0, "seed": 0,
    },
}


def write_config(tmp_path, **overrides):
    cfg = json.loads(json.dumps(FIXTURE_CONFIG))
    for section, vals in overrides.items():
        cfg.setdefault(section, {}).update(vals)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def synth_dir(tmp_path, config_path):
    data = tmp_path / "data"
    assert main(["synth", "--config", str(config_path), "--out", str(data)]) == 0
    return data


def file_hash(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_writes_all_files(tmp_path, capsys):
    cfg = write_config(tmp_path)
    data = synth_dir(tmp_path, cfg)
    for name in ["states.txt", "objects.txt", "train_pairs.csv", "val_pairs.csv",
                 "test_pairs.csv", "train_features.bin", "train_features.json",
                 "val_features.bin", "test_features.bin", "run_manifest.json"]:
        assert (data / name).exists(), name
    out = capsys.readouterr().out
    assert "ent_avg" in out


def test_synth_deterministic_hashes(tmp_path):
    cfg = write_config(tmp_path)
    d1 = tmp_path / "d1"
    d2 = tmp_path / "d2"
    assert main(["synth", "--config", str(cfg), "--out", str(d1)]) == 0
    assert main(["synth", "--config", str(cfg), "--out", str(d2)]) == 0
    for name in ["train_features.bin", "val_features.bin", "test_features.bin", "train_pairs.csv"]:
        assert file_hash(d1 / name) == file_hash(d2 / name), name


def test_synth_infeasible_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path, synth={"seen_fraction": 1.0})
    code = main(["synth", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert code == 2
    assert "infeasible split" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# ent-stats
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n_a,n_o,n_seen,n_val,n_test,printed", [
    (16, 12, 83, 15, 18, "0.43"),
    (8, 3, 16, 4, 4, "0.67"),
])
def test_ent_stats_table_values(tmp_path, capsys, n_a, n_o, n_seen, n_val, n_test, printed):
    root = grid_manifest(tmp_path / "m", n_a, n_o, n_seen, n_val, n_test)
    assert main(["ent-stats", str(root), "--out", str(tmp_path / "out")]) == 0
    out = capsys.readouterr().out
    assert f"ent_avg         {printed}" in out
    blob = json.loads(out.strip().splitlines()[-1])
    assert blob["n_seen_pairs"] == n_seen
    assert round(blob["ent_avg"], 2) == float(printed)


def test_ent_stats_toy_manifest_matches_module(tmp_path, capsys):
    from conftest import write_manifest
    root = write_manifest(tmp_path / "m", ["old", "ripe"], ["cat", "apple"],
                          [("old", "cat"), ("old", "apple"), ("ripe", "cat")],
                          test_pairs=[("ripe", "apple")])
    assert main(["ent-stats", str(root), "--out", str(tmp_path / "out"), "--json"]) == 0
    blob = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert blob["ent_avg"] == pytest.approx(0.75)
    assert blob["ent_var_state"] == pytest.approx(0.8125)
    assert blob["ent_var_object"] == pytest.approx(0.8125)


def test_ent_stats_missing_dir(tmp_path, capsys):
    assert main(["ent-stats", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def test_train_zero_epochs_checkpoint_equals_init(tmp_path):
    cfg = write_config(tmp_path, trainer={"epochs": 0})
    data = synth_dir(tmp_path, cfg)
    out = tmp_path / "run"
    assert main(["train", str(data), "--config", str(cfg), "--out", str(out)]) == 0
    table, enc, meta = load_checkpoint(out / "checkpoint.bin")
    space = load_space(data)
    expected, enc2 = init_model(space, d=8, feature_dim=64, seed=0, encoder_seed=7, tau=0.2)
    assert np.array_equal(table.theta_a, expected.theta_a)
    assert np.array_equal(table.theta_o, expected.theta_o)
    assert enc.fingerprint() == enc2.fingerprint()


def test_train_rerun_identical_checkpoint(tmp_path):
    cfg = write_config(tmp_path, trainer={"epochs": 4})
    data = synth_dir(tmp_path, cfg)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["train", str(data), "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["train", str(data), "--config", str(cfg), "--out", str(out2)]) == 0
    assert file_hash(out1 / "checkpoint.bin") == file_hash(out2 / "checkpoint.bin")


def test_train_joint_baseline_equals_forced_ao(tmp_path):
    cfg = write_config(tmp_path, trainer={"epochs": 5, "alpha": 0.0})
    data = synth_dir(tmp_path, cfg)
    out1, out2 = tmp_path / "forced", tmp_path / "joint"
    assert main(["train", str(data), "--config", str(cfg), "--out", str(out1),
                 "--force-status", "ao"]) == 0
    assert main(["train", str(data), "--config", str(cfg), "--out", str(out2),
                 "--joint-baseline"]) == 0
    assert file_hash(out1 / "checkpoint.bin") == file_hash(out2 / "checkpoint.bin")


def test_train_history_csv_columns(tmp_path):
    cfg = write_config(tmp_path, trainer={"epochs": 2})
    data = synth_dir(tmp_path, cfg)
    out = tmp_path / "run"
    assert main(["train", str(data), "--config", str(cfg), "--out", str(out),
                 "--eval-val"]) == 0
    header, *rows = (out / "history.csv").read_text().strip().splitlines()
    assert header.startswith("epoch,status,loss,train_acc,val_auc")
    assert len(rows) == 2
    assert rows[0].split(",")[1] == "o"


def test_eval_perfect_model(tmp_path, capsys):
    cfg = write_config(tmp_path, trainer={"epochs": 30})
    data = synth_dir(tmp_path, cfg)
    out = tmp_path / "run"
    assert main(["train", str(data), "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["eval", str(out / "checkpoint.bin"), str(data),
                 "--split", "test", "--out", str(out)]) == 0
    report = json.loads((out / "eval_test.json").read_text())
    assert report["auc"] == pytest.approx(1.0)
    assert (out / "curve_test.csv").read_text().startswith("bias,seen_acc,unseen_acc")
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["auc"] == pytest.approx(1.0)


def test_eval_missing_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path)
    data = synth_dir(tmp_path, cfg)
    assert main(["eval", str(tmp_path / "none.bin"), str(data),
                 "--out", str(tmp_path / "o")]) == 2


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def test_gradcheck_passes(tmp_path, capsys):
    cfg = write_config(tmp_path)
    data = synth_dir(tmp_path, cfg)
    assert main(["gradcheck", str(data), "--config", str(cfg),
                 "--out", str(tmp_path / "g")]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_gradcheck_threshold_zero_fails(tmp_path):
    cfg = write_config(tmp_path)
    data = synth_dir(tmp_path, cfg)
    assert main(["gradcheck", str(data), "--config", str(cfg),
                 "--threshold", "0", "--out", str(tmp_path / "g")]) == 3


def test_gradcheck_ignores_dropout_config(tmp_path, capsys):
    cfg0 = write_config(tmp_path)
    data = synth_dir(tmp_path, cfg0)
    capsys.readouterr()  # drop the synth output
    assert main(["gradcheck", str(data), "--config", str(cfg0),
                 "--out", str(tmp_path / "g1")]) == 0
    out0 = capsys.readouterr().out
    cfg9 = write_config(tmp_path, trainer={"dropout_rate": 0.9})
    assert main(["gradcheck", str(data), "--config", str(cfg9),
                 "--out", str(tmp_path / "g2")]) == 0
    assert capsys.readouterr().out == out0


# ---------------------------------------------------------------------------
# sweep-sequences / retrieve / plumbing
# ---------------------------------------------------------------------------

def test_sweep_sequences_seven_rows(tmp_path):
    cfg = write_config(tmp_path, trainer={"epochs": 3},
                       synth={"samples_per_pair": 4, "noise_sigma": 0.5})
    data = synth_dir(tmp_path, cfg)
    out = tmp_path / "sweep"
    assert main(["sweep-sequences", str(data), "--config", str(cfg), "--out", str(out)]) == 0
    rows = (out / "sequence_sweep.csv").read_text().strip().splitlines()
    assert rows[0] == "sequence,seen_acc,unseen_acc,best_hm,auc"
    assert len(rows) == 8  # header + 6 sequences + joint baseline
    labels = [r.split(",")[0] for r in rows[1:]]
    assert labels[-1] == "joint" and len(set(labels)) == 7
    for r in rows[1:]:
        assert all(np.isfinite(float(x)) for x in r.split(",")[1:])


def test_retrieve_both_modes(tmp_path, capsys):
    cfg = write_config(tmp_path, trainer={"epochs": 6})
    data = synth_dir(tmp_path, cfg)
    out = tmp_path / "run"
    assert main(["train", str(data), "--config", str(cfg), "--out", str(out)]) == 0
    ckpt = str(out / "checkpoint.bin")
    assert main(["retrieve", ckpt, str(data), "--mode", "i2t", "--index", "0",
                 "-k", "5", "--out", str(tmp_path / "r1")]) == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(result["topk"]) == 5
    assert main(["retrieve", ckpt, str(data), "--mode", "t2i", "--state", "state000",
                 "--object", "object000", "-k", "3", "--out", str(tmp_path / "r2")]) == 0
    result = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert len(result["topk"]) == 3


def test_unknown_flag_fails_fast(tmp_path, capsys):
    assert main(["ent-stats", str(tmp_path), "--frobnicate"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "synth" in capsys.readouterr().out


def test_every_command_writes_manifest(tmp_path):
    cfg = write_config(tmp_path)
    data = synth_dir(tmp_path, cfg)
    out = tmp_path / "stats"
    assert main(["ent-stats", str(data), "--out", str(out)]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["command"] == "ent-stats"
    assert manifest["version"]
    assert any("states.txt" in k for k in manifest["input_hashes"])
