import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

import oracles
from aesthetic_mtl.checkpoint import load_checkpoint
from aesthetic_mtl.cli import main
from aesthetic_mtl.data import DIMENSIONS, MANIFEST_HEADER, load_manifest, read_scores
from aesthetic_mtl.metrics import EvalReport, evaluate
from aesthetic_mtl.score_dist import mean_score
from aesthetic_mtl.trainer import TrainLog, lr_at

FAST = ["--epochs", "3", "--lr", "0.05", "--batch-size", "16"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--n", "120", "--seed", "3", "--feature-dim", "24", "--out", str(out)]) == 0
    return out


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_synth_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", "--n", "200", "--seed", "7", "--out", str(a)]) == 0
    assert main(["synth", "--n", "200", "--seed", "7", "--out", str(b)]) == 0
    assert _tree(a) == _tree(b)
    assert set(_tree(a)) == {"manifest.csv", "features.npy", "scores.csv", "run.json"}


def test_synth_zero_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--n", "0", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "--n" in capsys.readouterr().err


def test_synth_default_profile_correlations(tmp_path):
    assert main(["synth", "--n", "1000", "--out", str(tmp_path)]) == 0
    recs = load_manifest(tmp_path / "manifest.csv")
    m = {d: [mean_score(r.targets[d]) for r in recs] for d in DIMENSIONS}
    assert oracles.pearson(m["fineness"], m["overall"]) > 0.7
    assert abs(oracles.pearson(m["harmony"], m["overall"])) < 0.4
    assert len(read_scores(tmp_path / "scores.csv")) == 1000


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("AESTHETIC_MTL_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["synth", "--n", "5"]) == 0
    assert (tmp_path / "root" / "synth" / "manifest.csv").is_file()


@pytest.mark.parametrize("mode", ["linear", "mgda-ub"])
def test_train_mode_and_manifest(dataset, tmp_path, mode):
    out = tmp_path / mode
    assert main(["train", "--data", str(dataset / "manifest.csv"), "--mode", mode, *FAST, "--out", str(out)]) == 0
    log = TrainLog.read(out)
    assert {r["mode"] for r in log.epochs} == {mode}
    run = json.loads((out / "run.json").read_text())
    assert run["command"] == "train" and run["config"]["mode"] == mode
    for rel in run["artifacts"].values():
        assert (out / rel).is_file()
    assert (out / "figures" / "training_curves.png").is_file()
    ck = load_checkpoint(out / "last.ckpt")
    assert ck.meta["epoch"] == 3 and "momentum" in ck.extras


def test_train_config_file_and_flag_override(dataset, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('mode = "linear"\nepochs = 2\nlr = 0.01\nencoder_sizes = [8, 4]\n')
    out = tmp_path / "run"
    assert main(["train", "--data", str(dataset / "manifest.csv"), "--config", str(cfg), "--lr", "0.02",
                 "--out", str(out)]) == 0
    snap = (out / "config.toml").read_text()
    assert 'mode = "linear"' in snap and "lr = 0.02" in snap and "encoder_sizes = [8, 4]" in snap
    assert "momentum = 0.9" in snap and "lr_halve_every = 30" in snap


def test_train_unknown_key_exit_2(dataset, tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("epochs = 2\nlearning_rate = 0.1\n")
    assert main(["train", "--data", str(dataset / "manifest.csv"), "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_train_numeric_abort_exit_3(dataset, tmp_path):
    out = tmp_path / "nan"
    assert main(["train", "--data", str(dataset / "manifest.csv"), "--epochs", "2", "--lr", "1e300",
                 "--out", str(out)]) == 3
    assert load_checkpoint(out / "last_good.ckpt").params.is_finite()
    assert json.loads((out / "run.json").read_text())["status"] == "numeric-abort"


def test_resume_continues_schedule(dataset, tmp_path):
    data = str(dataset / "manifest.csv")
    a, b, full = tmp_path / "a", tmp_path / "b", tmp_path / "full"
    common = ["--lr", "0.05", "--lr-halve-every", "2"]
    assert main(["train", "--data", data, "--epochs", "3", *common, "--out", str(a)]) == 0
    assert main(["train", "--data", data, "--resume", str(a / "last.ckpt"), "--epochs", "5", "--out", str(b)]) == 0
    assert main(["train", "--data", data, "--epochs", "5", *common, "--out", str(full)]) == 0
    log = TrainLog.read(b)
    assert log.lr_trace == [lr_at(e, 0.05, 2) for e in range(1, 6)]
    assert (b / "last.ckpt").read_bytes() == (full / "last.ckpt").read_bytes()
    assert (b / "train_log.csv").read_bytes() == (full / "train_log.csv").read_bytes()


def test_eval_truth_against_itself(dataset, tmp_path, capsys):
    m = str(dataset / "manifest.csv")
    assert main(["eval", "--manifest", m, "--predictions", m, "--out", str(tmp_path)]) == 0
    rep = EvalReport.from_table((tmp_path / "eval.csv").read_text())
    for d in DIMENSIONS:
        assert rep.values[d]["pcc"] == pytest.approx(1.0) and rep.values[d]["scc"] == pytest.approx(1.0)
        assert rep.values[d]["rmse"] == 0.0
    assert "PCC" in capsys.readouterr().out
    assert (tmp_path / "figures" / "eval_scatter.png").is_file()


def test_eval_checkpoint_matches_metrics_oracle(dataset, tmp_path):
    m = dataset / "manifest.csv"
    run = tmp_path / "run"
    assert main(["train", "--data", str(m), *FAST, "--out", str(run)]) == 0
    assert main(["predict", "--checkpoint", str(run / "best.ckpt"), "--manifest", str(m),
                 "--out", str(tmp_path / "p")]) == 0
    assert main(["eval", "--manifest", str(m), "--checkpoint", str(run / "best.ckpt"), "--splits",
                 str(run / "splits.csv"), "--split", "test", "--out", str(tmp_path / "e")]) == 0
    rep = EvalReport.from_table((tmp_path / "e" / "eval.csv").read_text())
    test_ids = {line.split(",")[0] for line in (run / "splits.csv").read_text().splitlines()[1:]
                if line.endswith(",test")}
    preds = {r.id: r.targets for r in load_manifest(tmp_path / "p" / "predictions.csv") if r.id in test_ids}
    truth = {r.id: r.targets for r in load_manifest(m) if r.id in test_ids}
    assert rep.n == len(test_ids) == 12
    for d in DIMENSIONS:
        t = [mean_score(truth[i][d]) for i in sorted(test_ids)]
        p = [mean_score(preds[i][d]) for i in sorted(test_ids)]
        # predictions.csv is written with repr floats, so the recomputation is exact up to rounding
        assert rep.values[d]["pcc"] == pytest.approx(oracles.pearson(t, p), abs=1e-10)
        assert rep.values[d]["scc"] == pytest.approx(oracles.spearman(t, p), abs=1e-10)
        assert rep.values[d]["rmse"] == pytest.approx(oracles.rmse(t, p), abs=1e-10)
    assert evaluate(preds, truth).values.keys() == rep.values.keys()


def test_eval_id_mismatch_exit_2(dataset, tmp_path):
    m = dataset / "manifest.csv"
    sub = tmp_path / "sub.csv"
    sub.write_text("\n".join(m.read_text().splitlines()[:30]) + "\n")
    assert main(["eval", "--manifest", str(m), "--predictions", str(sub), "--out", str(tmp_path / "e")]) == 2


def test_predict_images(dataset, tmp_path):
    # a model trained on image-grid features can score image files directly
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    rng = np.random.default_rng(0)
    rows = []
    for k in range(12):
        Image.fromarray(rng.integers(0, 256, size=(60, 120, 3), dtype=np.uint8)).save(img_dir / f"im{k}.png")
        rows.append(f"im{k},im{k}.png," + ",".join(["0.2"] * 20))
    (img_dir / "manifest.csv").write_text(",".join(MANIFEST_HEADER) + "\n" + "\n".join(rows) + "\n")
    run = tmp_path / "run"
    assert main(["train", "--data", str(img_dir / "manifest.csv"), "--epochs", "1", "--out", str(run)]) == 0
    out = tmp_path / "pred"
    assert main(["predict", "--checkpoint", str(run / "best.ckpt"), "--images", str(img_dir / "im0.png"),
                 str(img_dir / "im1.png"), "--out", str(out)]) == 0
    assert [r.id for r in load_manifest(out / "predictions.csv")] == ["im0", "im1"]


def test_verify_all_pass(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and "checks passed" in out


def test_verify_only_one_suite(capsys):
    assert main(["verify", "--only", "emd-grad"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("[")]
    assert lines and all("emd-grad" in l for l in lines)


def test_verify_corrupted_gradient_exit_1(capsys):
    assert main(["verify", "--only", "emd-grad", "--corrupt-gradient"]) == 1
    assert "[FAIL] emd-grad" in capsys.readouterr().out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "aesthetic_mtl", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("synth", "train", "eval", "predict", "verify"):
        assert cmd in r.stdout
