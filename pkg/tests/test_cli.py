import json
import shutil

import pytest
import yaml

from lungsound import cli
from lungsound.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, class_summary, main, workdir_lock
from lungsound.model import CLASSES, VARIANTS
from lungsound.training import DatasetManifest, ManifestEntry

SMALL = {
    "model": {
        "conv_blocks": [{"filters": 8, "kernel": 3, "pool": 2}] * 3,
        "lstm_units": 16,
        "attention_dim": 16,
        "hand_hidden": [32, 32],
        "fusion_hidden": 32,
    },
    "training": {"max_epochs": 3, "lr0": 1e-3},
    "xai": {"ig_steps": 8, "shap_permutations": 100, "shap_background": 20, "n_baselines": 2},
}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return str(path)


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == EXIT_OK else json.loads(err))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, tone_dir, small_config):
    """Preprocess, train and evaluate once; tests read the resulting workdir."""
    wd = tmp_path_factory.mktemp("wd")
    common = ["--config", small_config, "--workdir", str(wd), "--strict-deterministic"]
    assert main(["preprocess", "--manifest", str(tone_dir / "manifest.csv"), *common]) == EXIT_OK
    assert main(["train", *common]) == EXIT_OK
    assert main(["evaluate", *common]) == EXIT_OK
    return wd, common


# ------------------------------------------------------------------- errors


def test_usage_errors(capsys, tmp_path):
    assert _run(capsys)[0] == EXIT_USAGE
    code, err = _run(capsys, "train", "--variant", "Bogus", "--workdir", str(tmp_path))
    assert code == EXIT_USAGE and err["exit_code"] == EXIT_USAGE
    code, err = _run(capsys, "frobnicate")
    assert code == EXIT_USAGE


def test_unknown_config_key_is_usage_error(capsys, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"training": {"max_epochs": 2, "learning_rat": 0.1}}))
    code, err = _run(capsys, "train", "--config", str(bad), "--workdir", str(tmp_path))
    assert code == EXIT_USAGE
    assert err["error"] == "ConfigError" and "learning_rat" in err["message"]


def test_missing_and_empty_manifest_are_data_errors(capsys, tmp_path):
    code, _ = _run(capsys, "preprocess", "--manifest", str(tmp_path / "nope.csv"), "--workdir", str(tmp_path / "w"))
    assert code == EXIT_DATA
    empty = tmp_path / "empty.csv"
    empty.write_text("clip_id,path,label,patient_id\n")
    code, err = _run(capsys, "preprocess", "--manifest", str(empty), "--workdir", str(tmp_path / "w"))
    assert code == EXIT_DATA and "no clips" in err["message"]


def test_train_before_preprocess_is_data_error(capsys, tmp_path):
    code, err = _run(capsys, "train", "--workdir", str(tmp_path))
    assert code == EXIT_DATA and "preprocess" in err["message"]


def test_locked_workdir_refused(capsys, tmp_path):
    with workdir_lock(tmp_path):
        code, err = _run(capsys, "report", "--workdir", str(tmp_path))
    assert code == EXIT_DATA and "locked" in err["message"]


# --------------------------------------------------------------- preprocess


def test_class_summary_table_shape():
    sizes = dict(zip(CLASSES, (288, 104, 401, 133, 285)))
    entries = [ManifestEntry(f"{k}{i}", f"{k}{i}.wav", k, None) for k, n in sizes.items() for i in range(n)]
    s = class_summary(DatasetManifest(entries))
    assert s["total"] == 1211
    assert [r["class"] for r in s["classes"]] == list(CLASSES)
    assert [r["count"] for r in s["classes"]] == [288, 104, 401, 133, 285]
    assert s["classes"][2]["percent"] == round(100 * 401 / 1211, 2)


def test_synth_command(capsys, tmp_path):
    code, out = _run(capsys, "synth", "--out", str(tmp_path / "t"), "--per-class", "3")
    assert code == EXIT_OK and out["clips"] == 15
    assert len(DatasetManifest.read_csv(tmp_path / "t" / "manifest.csv")) == 15


def test_preprocess_outputs(pipeline):
    wd, _ = pipeline
    for rel in ("config.yaml", "split.json", "preprocess_summary.json", "features/features.json",
                "features/features.bin", "features/handcrafted.csv"):
        assert (wd / rel).exists(), rel
    s = json.loads((wd / "preprocess_summary.json").read_text())
    assert s["accepted"]["total"] == 100 and s["rejected"] == [] and s["unreadable"] == []
    assert s["split"] == {"train": 70, "val": 15, "test": 15}
    header = (wd / "features" / "handcrafted.csv").read_text().splitlines()[0].split(",")
    assert len(header) == 71


def test_preprocess_is_idempotent(pipeline, tone_dir, tmp_path):
    wd, common = pipeline
    other = tmp_path / "again"
    args = ["preprocess", "--manifest", str(tone_dir / "manifest.csv"), *common[:2], "--workdir", str(other)]
    assert main(args) == EXIT_OK
    for rel in ("features/features.bin", "features/features.json", "split.json", "features/handcrafted.csv"):
        assert (wd / rel).read_bytes() == (other / rel).read_bytes(), rel


# ---------------------------------------------------------- train, evaluate


def test_train_and_evaluate_artifacts(pipeline):
    wd, _ = pipeline
    rd = wd / "runs" / "FullHybrid"
    for rel in ("checkpoint.json", "checkpoint.bin", "epochs.jsonl", "train_summary.json",
                "eval_test.json", "confusion_test.svg", "roc_test.svg"):
        assert (rd / rel).exists(), rel
    logs = [json.loads(l) for l in (rd / "epochs.jsonl").read_text().splitlines()]
    assert len(logs) == 3
    ev = json.loads((rd / "eval_test.json").read_text())
    assert ev["macro"]["support"] == 15
    assert sum(map(sum, ev["confusion"])) == 15


def test_evaluate_missing_checkpoint(capsys, pipeline):
    _, common = pipeline
    code, err = _run(capsys, "evaluate", "--variant", "CnnOnly", *common)
    assert code == EXIT_DATA and "checkpoint" in err["message"]


# ------------------------------------------------------------ explain, report


def test_report_without_xai_then_with(capsys, pipeline, tmp_path):
    wd, common = pipeline
    scratch = tmp_path / "wd"
    shutil.copytree(wd, scratch, ignore=shutil.ignore_patterns(".lock", "xai", "report"))
    args = [*common[:2], "--workdir", str(scratch)]

    code, out = _run(capsys, "report", *args)
    assert code == EXIT_OK
    first = (scratch / "report" / "report.md").read_text()
    assert "## Explanations" not in first and "## Run: FullHybrid" in first
    assert "## Ablation" not in first

    code, _ = _run(capsys, "report", *args)
    assert (scratch / "report" / "report.md").read_text() == first

    clip = sorted(json.loads((scratch / "split.json").read_text())["assignment"])[0]
    code, out = _run(capsys, "explain", "--clip-ids", clip, *args)
    assert code == EXIT_OK and out == {clip: ["grad_cam", "integrated_gradients", "shap"]}
    for m in out[clip]:
        assert (scratch / "xai" / clip / f"{m}.json").exists()
        assert (scratch / "xai" / clip / f"{m}.bin").exists()
    assert (scratch / "xai" / clip / "overlay.svg").read_text().startswith("<svg")

    code, _ = _run(capsys, "report", *args)
    second = (scratch / "report" / "report.md").read_text()
    assert "## Explanations" in second and f"xai_{clip}.svg" in second
    assert (scratch / "report" / f"xai_{clip}.svg").exists()


def test_report_lists_missing_artifacts(capsys, pipeline, tmp_path):
    wd, common = pipeline
    scratch = tmp_path / "wd"
    shutil.copytree(wd, scratch, ignore=shutil.ignore_patterns(".lock", "eval_test.json"))
    code, out = _run(capsys, "report", *common[:2], "--workdir", str(scratch))
    assert code == EXIT_OK
    assert "runs/FullHybrid/eval_test.json" in out["missing"]
    assert "## Missing artifacts" in (scratch / "report" / "report.md").read_text()


def test_explain_errors(capsys, pipeline):
    _, common = pipeline
    code, _ = _run(capsys, "explain", "--clip-ids", "asthma_000", "--methods", "lime", *common)
    assert code == EXIT_USAGE
    code, err = _run(capsys, "explain", "--clip-ids", "nobody_999", *common)
    assert code == EXIT_DATA and "nobody_999" in err["message"]


# ------------------------------------------------------------------- ablate


def test_ablate_table(capsys, pipeline, tmp_path):
    wd, common = pipeline
    scratch = tmp_path / "wd"
    shutil.copytree(wd, scratch, ignore=shutil.ignore_patterns(".lock", "runs"))
    code, out = _run(capsys, "ablate", "--epochs", "2", *common[:2], "--workdir", str(scratch))
    assert code == EXIT_OK
    assert out["columns"] == ["variant", "accuracy", "macro_f1", "macro_roc_auc"]
    assert [r["variant"] for r in out["rows"]] == list(VARIANTS)
    for r in out["rows"]:
        assert 0 <= r["accuracy"] <= 1 and 0 <= r["macro_f1"] <= 1
        assert (scratch / "runs" / r["variant"] / "checkpoint.json").exists()
    assert json.loads((scratch / "ablation.json").read_text()) == out


def test_resolve_config_overrides(small_config):
    args = cli.build_parser().parse_args(
        ["train", "--config", small_config, "--seed", "7", "--epochs", "5", "--variant", "CnnOnly",
         "--workdir", "w", "--strict-deterministic"])
    cfg = cli.resolve_config(args)
    assert (cfg.seed, cfg.training.seed, cfg.augmentation.seed) == (7, 7, 7)
    assert cfg.training.max_epochs == 5 and cfg.model.variant == "CnnOnly"
    assert cfg.training.strict_deterministic and cfg.paths.workdir == "w"
    assert cfg.model.lstm_units == 16
