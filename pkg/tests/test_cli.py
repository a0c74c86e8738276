import json
from pathlib import Path

import pytest

from earlywf.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main
from earlywf.evaluation import evaluate_verdicts
from earlywf.identifier import read_verdicts
from earlywf.profiling import ProfileStore
from earlywf.traces import UNMONITORED

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.json"
PIPELINE = ["synth", "split", "extract", "train-target", "attribute", "augment", "train", "profile"]


def run(out, *args, config=EXAMPLE):
    argv = ["--quiet", "--output-dir", str(out)]
    if config is not None:
        argv += ["--config", str(config)]
    return main(argv + list(args))


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in PIPELINE:
        assert run(out, cmd) == EXIT_OK, cmd
    return out


def test_full_pipeline(built):
    for name in ("target.json", "temporal_profiles.json", "encoder.npz", "profiles.json"):
        assert (built / name).exists()
    assert run(built, "sweep") == EXIT_OK
    lines = (built / "sweep.csv").read_text().splitlines()
    assert len(lines) == 1 + len(json.loads(EXAMPLE.read_text())["sweep"]["ratios"])


def test_eval_matches_in_process(built):
    assert run(built, "replay", "--ratio", "0.5") == EXIT_OK
    assert run(built, "eval") == EXIT_OK
    verdicts = read_verdicts(built / "verdicts.jsonl")
    want = evaluate_verdicts(verdicts, ProfileStore.load(built / "profiles.json").sites).summary()
    got = json.loads((built / "report_summary.json").read_text())
    assert got == pytest.approx(want)


def test_closed_world_replay(built, capsys):
    assert main(["--output-dir", str(built), "--config", str(EXAMPLE), "replay", "--mode", "closed-world"]) == 0
    logged = [json.loads(l) for l in capsys.readouterr().err.splitlines()]
    assert all("stage" in entry for entry in logged)
    config = next(e for e in logged if e["message"] == "resolved config")["config"]
    assert config["mode"] == "closed_world"
    assert all(v.label != UNMONITORED for v in read_verdicts(built / "verdicts.jsonl"))


def test_idempotent(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b, b):
        assert run(out, "synth") == EXIT_OK and run(out, "split") == EXIT_OK
    files_a = sorted(p.relative_to(a) for p in a.rglob("*.cell"))
    files_b = sorted(p.relative_to(b) for p in b.rglob("*.cell"))
    assert files_a == files_b
    assert all((a / f).read_text() == (b / f).read_text() for f in files_a)


def test_seed_flag_changes_corpus(tmp_path):
    run(tmp_path / "a", "synth")
    run(tmp_path / "b", "--seed", "8", "synth")
    sa = json.loads((tmp_path / "a" / "data" / "synth_spec.json").read_text())
    sb = json.loads((tmp_path / "b" / "data" / "synth_spec.json").read_text())
    assert (sa["seed"], sb["seed"]) == (7, 8)


def test_dry_run_has_no_side_effects(tmp_path):
    out = tmp_path / "dry"
    assert run(out, "--dry-run", "synth") == EXIT_OK
    assert not out.exists()


def test_missing_prerequisite_names_producer(tmp_path, capsys):
    assert run(tmp_path, "profile") == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert "earlywf train" in err


def test_validation_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"params": {"mu": 0.9, "lam": 0.5}}))
    assert run(tmp_path, "attribute", config=bad) == EXIT_VALIDATION
    bad.write_text(json.dumps({"params": {"no_such_key": 1}}))
    assert run(tmp_path, "synth", config=bad) == EXIT_VALIDATION
    bad.write_text("{not json")
    assert run(tmp_path, "synth", config=bad) == EXIT_VALIDATION
    assert run(tmp_path, "sweep", "--ratios", "0,1") == EXIT_VALIDATION
    assert run(tmp_path, "replay", "--mode", "sideways") == EXIT_VALIDATION
    assert run(tmp_path, "nonsense") == EXIT_VALIDATION


def test_defend(tmp_path):
    assert run(tmp_path, "synth") == EXIT_OK
    assert run(tmp_path, "defend", "--defense", "split") == EXIT_OK
    assert (tmp_path / "data_split" / "manifest.json").exists()
    assert run(tmp_path, "defend", "--defense", "wtfpad") == EXIT_VALIDATION
