"""Command-line interface: exit codes, config precedence and a small end-to-end run."""

import json
from pathlib import Path

import numpy as np
import pytest

from saga import __version__, cli
from saga.attack import AttackError
from saga.datagen import load_manifest, load_split
from saga.evaluate import curvature_distortion
from saga.mesh import Mesh
from saga.nn import load_model


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_unknown_flag_exits_1_with_usage(capsys):
    assert run("gen-data", "--no-such-flag") == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--no-such-flag" in err


def test_missing_command_exits_1(capsys):
    assert run() == 1
    assert "usage:" in capsys.readouterr().err


def test_version(capsys):
    assert run("--version") == 0
    assert capsys.readouterr().out.strip() == __version__


def test_missing_manifest_exits_1(tmp_path, capsys):
    assert run("--output-dir", tmp_path, "train-ae", "--manifest", "nope/manifest.json") == 1
    assert "nope" in capsys.readouterr().err


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gen-data": {"bogus": 1}}))
    assert run("--output-dir", tmp_path, "--config", cfg, "gen-data") == 1
    assert "bogus" in capsys.readouterr().err
    cfg.write_text("[1, 2]")
    assert run("--output-dir", tmp_path, "--config", cfg, "gen-data") == 1
    assert run("--output-dir", tmp_path, "--config", tmp_path / "missing.json", "gen-data") == 1


def test_precedence_defaults_file_env_flag(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 3, "threads": 2, "gen-data": {"classes": 4, "per_class": 7}}))
    parser = cli.build_parser()

    def resolved(*argv):
        return cli.resolve(parser.parse_args([str(a) for a in argv]))

    monkeypatch.delenv("SAGA_SEED", raising=False)
    r = resolved("gen-data")
    assert (r["classes"], r["per_class"], r["seed"], r["threads"]) == (3, 60, 0, 1)
    r = resolved("--config", cfg, "gen-data")
    assert (r["classes"], r["per_class"], r["seed"], r["threads"]) == (4, 7, 3, 2)
    r = resolved("--config", cfg, "gen-data", "--classes", 5)
    assert (r["classes"], r["per_class"]) == (5, 7)
    monkeypatch.setenv("SAGA_SEED", "11")
    assert resolved("--config", cfg, "gen-data")["seed"] == 11
    assert resolved("--seed", 12, "--config", cfg, "gen-data")["seed"] == 12
    monkeypatch.setenv("SAGA_SEED", "x")
    with pytest.raises(cli.UsageError):
        resolved("gen-data")


def test_threads_must_be_positive(tmp_path):
    assert run("--output-dir", tmp_path, "--threads", 0, "gen-data") == 1


# ---------------------------------------------------------------------------
# end-to-end on a 42-vertex dataset

SMALL = ("--classes", 3, "--per-class", 12, "--subdivisions", 1)


def pipeline(base: Path):
    steps = [
        ("gen-data", *SMALL),
        ("train-ae", "--epochs", 40, "--batch-size", 8),
        ("train-classifier", "--epochs", 3),
        ("shared-basis", "--samples", 4, "--steps", 3),
        ("attack", "--k", 10, "--steps", 5, "--sources-per-class", 2),
        ("attack", "--k", 10, "--steps", 0, "--sources-per-class", 2, "--name", "steps0"),
        ("attack", "--method", "euclidean", "--preset", "euclidean-desk", "--matched-lr",
         "--k", 10, "--steps", 5, "--sources-per-class", 2),
        ("evaluate", "--detector-epochs", 2, "--stability-iterations", 2),
        ("analyze", "--ks", 5, 10, "--sweep-pairs", 2),
        ("train-detector", "--epochs", 2),
    ]
    for argv in steps:
        assert run("--output-dir", base, *argv) == 0, argv


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    pipeline(base)
    return base


def test_pipeline_outputs(small_run):
    b = small_run
    for rel in ["data/manifest.json", "models/ae.json", "models/classifier.json", "basis/shared.json",
                "results/saga/campaign.json", "results/saga/timing.json", "results/saga/report.json",
                "results/saga/profile.csv", "results/saga/sweep.csv", "models/detector.json",
                "results/euclidean/campaign.json", "results/saga/pairs/0000_adv.off"]:
        assert (b / rel).is_file(), rel
    camp = json.loads((b / "results/saga/campaign.json").read_text())
    assert camp["summary"]["pairs"] == 3 * 2 * 2  # every source to each other class
    assert not any(Path(str(v)).is_absolute() for v in camp["config"].values() if isinstance(v, str))
    pair = json.loads((b / "results/saga/pairs/0000.json").read_text())
    assert "wall_time" not in pair
    rep = json.loads((b / "results/saga/report.json").read_text())
    for key in ("targeted_accuracy", "untargeted_accuracy", "detector_accuracy", "delta_S_bar",
                "delta_T_bar", "stability_targeted_accuracy", "ae_test_reconstruction_error"):
        assert key in rep
    assert len(rep["stability_targeted_accuracy"]) == 2
    sweep = (b / "results/saga/sweep.csv").read_text().splitlines()
    assert sweep[0] == "k,delta_S_bar,delta_T_bar" and len(sweep) == 3


def test_steps0_baseline_matches_direct_computation(small_run):
    """With no optimization the adversarial mesh is the source, so delta_T is C(ae(S), T)."""
    b = small_run
    man = load_manifest(b / "data/manifest.json")
    meshes, _ = load_split(man, "test")
    ae = load_model((b / "models/ae.json").read_bytes())
    camp = json.loads((b / "results/steps0/campaign.json").read_text())
    direct = []
    for i in range(camp["summary"]["pairs"]):
        rec = json.loads((b / f"results/steps0/pairs/{i:04d}.json").read_text())
        S, T = meshes[rec["source_index"]], meshes[rec["target_index"]]
        R = Mesh(ae(S.vertices.reshape(1, -1)).reshape(-1, 3), S.faces)
        direct.append(curvature_distortion(R, T).mean)
        assert rec["delta_S"] < 1e-6
    assert camp["summary"]["delta_T_bar"] == pytest.approx(np.mean(direct), rel=1e-5, abs=1e-8)


def _tree(base: Path):
    return {p.relative_to(base): p.read_bytes() for p in sorted(base.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_rerun_is_byte_identical(small_run, tmp_path):
    pipeline(tmp_path)
    a, b = _tree(small_run), _tree(tmp_path)
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []


def test_numerical_failure_exits_2(small_run, monkeypatch, capsys):
    def boom(*_a, **_k):
        raise AttackError("step 0: non-finite loss")
    monkeypatch.setattr(cli, "run_campaign", boom)
    assert run("--output-dir", small_run, "attack", "--k", 10, "--steps", 1, "--name", "boom") == 2
    assert "numerical failure" in capsys.readouterr().err


def test_analyze_rejects_euclidean_campaign(small_run):
    assert run("--output-dir", small_run, "analyze", "--results", "results/euclidean") == 1
