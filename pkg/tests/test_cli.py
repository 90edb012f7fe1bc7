import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from taxrank.cli import load_config, main

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "scripts"))
from make_fixtures import write_rounds  # noqa: E402

from taxrank.candidates import render_source  # noqa: E402
from taxrank.policy import Scenario, load_policy  # noqa: E402

MUTANTS = [
    {"id": "clean", "mutations": []},
    {"id": "rate_shift", "mutations": [{"kind": "rate_shift", "offset": 1}]},
    {"id": "drop_blind_deduction", "mutations": [{"kind": "drop_blind_deduction"}]},
    {"id": "allow_mfs_eitc", "mutations": [{"kind": "allow_mfs_eitc"}]},
    {"id": "blind_extra_constant", "mutations": [{"kind": "blind_extra_constant", "amount": 500.0}]},
]


def write_config(tmp_path, **overrides):
    (tmp_path / "mutants.json").write_text(json.dumps(MUTANTS))
    cfg = {
        "policy": "builtin:2021",
        "scenario": "brackets_deductions_eitc",
        "candidates": {"kind": "mutants", "path": "mutants.json"},
        "seeds": {"profiles": 3, "metamorphic": 4},
        "n_profiles": 60,
        "metamorphic": {"n_pairs": 400, "profiles": {"income_range": [1000, 15000], "investment_range": [0, 0]}},
        "out": "out",
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_score_writes_artifacts(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["score", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    assert {"scores.csv", "tolerance.csv", "report.json"} <= {p.name for p in out.iterdir()}
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].split()[:2] == ["Versions", "CodeBertScore"]
    csv_ids = [ln.split(",")[0] for ln in (out / "scores.csv").read_text().splitlines()[1:]]
    assert [ln.split()[0] for ln in printed[2:2 + len(csv_ids)]] == csv_ids
    assert csv_ids[0] == "clean"
    report = json.loads((out / "report.json").read_text())
    stored = json.dumps(report["config"], sort_keys=True).encode()
    assert report["metadata"]["config_hash"] == hashlib.sha256(stored).hexdigest()
    assert report["metadata"]["seeds"] == {"profiles": 3, "metamorphic": 4}


def test_score_is_byte_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    main(["score", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["score", "--config", str(cfg), "--out", str(tmp_path / "b")])
    for name in ("scores.csv", "tolerance.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_overrides(tmp_path):
    cfg = load_config(write_config(tmp_path), seed=9, delta_max=0.05)
    assert cfg.profile_seed == cfg.metamorphic_seed == 9
    assert cfg.grid[-1] == 0.05 and len(cfg.grid) == 11
    assert main(["score", "--config", str(write_config(tmp_path)), "--weights", "0.5,0.5"]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["metadata"]["weights"] == [0.5, 0.5]


def test_report_command(tmp_path, capsys):
    cfg = write_config(tmp_path)
    main(["score", "--config", str(cfg)])
    table = capsys.readouterr().out
    assert main(["report", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.strip() == table.strip()


def test_report_without_run(tmp_path, capsys):
    assert main(["report", "--config", str(write_config(tmp_path))]) == 2


@pytest.mark.parametrize("bad", [
    {"seeds": {"profiles": 1}},
    {"candidates": {"kind": "mutants", "path": "missing.json"}},
    {"candidates": {"kind": "carrier-pigeon"}},
    {"policy": "nowhere.json"},
    {"mode": "sideways"},
    {"unknown_key": 1},
])
def test_config_errors_exit_2(tmp_path, bad, capsys):
    assert main(["score", "--config", str(write_config(tmp_path, **bad))]) == 2
    assert "taxrank: error:" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["score", "--config", str(tmp_path / "nope.json")]) == 2


def test_empty_fixture_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    cfg = write_config(tmp_path, candidates={"kind": "fixtures", "path": "empty"})
    assert main(["score", "--config", str(cfg)]) == 2
    assert "no candidates" in capsys.readouterr().err


def test_metatest_clean_passes(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["metatest", "--config", str(cfg), "--candidate", "clean"]) == 0
    out = tmp_path / "out"
    assert json.loads((out / "report.json").read_text())["verdict"] == "pass"
    assert not (out / "feedback.txt").exists()


def test_metatest_mfs_mutant_feedback(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["metatest", "--config", str(cfg), "--candidate", "allow_mfs_eitc"]) == 0
    out = tmp_path / "out"
    assert "MarriedSeparate" in (out / "feedback.txt").read_text()
    assert "status ∈ {MarriedSeparate}" in (out / "tree.txt").read_text()
    first = (out / "violations.json").read_bytes()
    main(["metatest", "--config", str(cfg), "--candidate", "allow_mfs_eitc"])
    assert (out / "violations.json").read_bytes() == first


def test_metatest_stale_feedback_removed(tmp_path):
    cfg = write_config(tmp_path)
    main(["metatest", "--config", str(cfg), "--candidate", "allow_mfs_eitc"])
    main(["metatest", "--config", str(cfg), "--candidate", "clean"])
    assert not (tmp_path / "out" / "feedback.txt").exists()


def test_metatest_unknown_candidate(tmp_path):
    assert main(["metatest", "--config", str(write_config(tmp_path)), "--candidate", "Version 99"]) == 2


def _pipeline_config(tmp_path, **overrides):
    write_rounds(tmp_path / "fixtures", load_policy("builtin:2021"), Scenario.BRACKETS_DEDUCTIONS_EITC)
    return write_config(tmp_path, candidates={"kind": "fixtures", "path": "fixtures"}, **overrides)


def test_pipeline_unresolved_exit_1(tmp_path):
    cfg = _pipeline_config(tmp_path, max_rounds=1)
    assert main(["pipeline", "--config", str(cfg)]) == 1
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["verdict"] == "unresolved" and report["n_rounds"] == 1


def test_pipeline_passes_in_round_one(tmp_path):
    (tmp_path / "fixtures").mkdir()
    src = render_source(load_policy("builtin:2021"), Scenario.BRACKETS_DEDUCTIONS_EITC)
    (tmp_path / "fixtures" / "candidate_1.py").write_text(src)
    cfg = write_config(tmp_path, candidates={"kind": "fixtures", "path": "fixtures"})
    assert main(["pipeline", "--config", str(cfg)]) == 0
    assert json.loads((tmp_path / "out" / "report.json").read_text())["n_rounds"] == 1


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path)
    proc = subprocess.run([sys.executable, "-m", "taxrank", "score", "--config", str(cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "Versions" in proc.stdout
