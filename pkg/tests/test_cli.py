import json
import subprocess
import sys

import pytest

from peerexposure.cli import build_parser, main, resolve_config

RUN_FLAGS = (
    "--config", "--returns", "--factors", "--ghg", "--out-dir", "--start", "--end", "--horizons",
    "--lower-q", "--upper-q", "--ghg-lag-months", "--lambda-grid", "--bootstrap-reps", "--seed",
    "--threads", "--factor-units", "--min-pvalues", "--no-prewhiten", "--fixed-bandwidth", "--no-df-adjust",
    "--min-coverage", "--significance", "--trend-horizon",
)


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out-dir", str(d), "--n-stocks", "32", "--months", "8", "--seed", "3"]) == 0
    return d


def write_config(d, **extra):
    cfg = {"returns": "returns.csv", "factors": "factors.csv", "ghg": "ghg.csv", "horizons": [3], "bootstrap_reps": 20}
    cfg.update(extra)
    path = d / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_simulate_writes_inputs(sim_dir):
    names = sorted(p.name for p in sim_dir.iterdir())
    assert names == ["factors.csv", "ghg.csv", "ground_truth.json", "returns.csv"]


def test_run_with_config(sim_dir, tmp_path, capsys):
    cfg = write_config(sim_dir, out_dir=str(tmp_path / "out"))
    assert main(["run", "--config", str(cfg)]) == 0
    outputs = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert outputs == sorted(
        ["heterogeneity.csv", "exposure_summary.csv", "heterogeneity_summary.csv", "trend.csv", "run_manifest.json"]
    )
    summary = json.loads(capsys.readouterr().out)
    assert set(summary["realized_cells"]) == {"brown/3", "green/3"}
    manifest = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
    assert manifest["config"]["bootstrap_reps"] == 20
    assert all(len(v) == 64 for v in manifest["input_sha256"].values())


def test_flags_override_config(sim_dir, tmp_path):
    cfg = write_config(sim_dir, seed=1)
    args = build_parser().parse_args(["run", "--config", str(cfg), "--seed", "9", "--no-prewhiten", "--horizons", "3,6"])
    rc = resolve_config(args)
    assert rc.seed == 9 and rc.prewhiten is False and rc.horizons == (3, 6)
    assert rc.bootstrap_reps == 20
    assert rc.returns == str(sim_dir / "returns.csv")


def test_missing_returns_file(sim_dir, tmp_path, capsys):
    missing = tmp_path / "absent.csv"
    code = main(
        ["run", "--returns", str(missing), "--factors", str(sim_dir / "factors.csv"), "--ghg", str(sim_dir / "ghg.csv"),
         "--out-dir", str(tmp_path / "o")]
    )
    assert code == 1
    assert str(missing) in capsys.readouterr().err


def test_validate_duplicate_ghg(sim_dir, tmp_path, capsys):
    ghg = tmp_path / "ghg.csv"
    ghg.write_text("firm_id,fiscal_year,intensity\nS0001,2013,1.0\nS0001,2013,2.0\n")
    code = main(["validate", "--returns", str(sim_dir / "returns.csv"), "--factors", str(sim_dir / "factors.csv"),
                 "--ghg", str(ghg)])
    assert code == 1
    captured = capsys.readouterr()
    report = json.loads(captured.out)
    assert not report["valid"]
    assert "S0001" in report["problems"][0] and "2013" in report["problems"][0]


def test_validate_ok(sim_dir, capsys):
    cfg = write_config(sim_dir)
    assert main(["validate", "--config", str(cfg)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["valid"] and report["inputs"]["returns"]["stocks"] == 32


def test_unknown_flag_and_config_key(sim_dir, capsys):
    assert main(["run", "--bogus"]) == 1
    cfg = sim_dir / "bad.json"
    cfg.write_text(json.dumps({"returns": "returns.csv", "colour": "green"}))
    assert main(["run", "--config", str(cfg)]) == 1
    assert "colour" in capsys.readouterr().err
    assert main([]) == 1


def test_help_lists_every_flag():
    text = build_parser()._subparsers._group_actions[0].choices["run"].format_help()
    for flag in RUN_FLAGS:
        assert flag in text, flag


def test_summarize_and_trend(sim_dir, tmp_path, capsys):
    cfg = write_config(sim_dir, out_dir=str(tmp_path / "out"))
    assert main(["run", "--config", str(cfg)]) == 0
    capsys.readouterr()
    het = tmp_path / "out" / "heterogeneity.csv"
    assert main(["summarize", "--heterogeneity", str(het), "--out-dir", str(tmp_path / "s")]) == 0
    out = capsys.readouterr().out
    assert out == (tmp_path / "out" / "heterogeneity_summary.csv").read_text()
    assert main(["trend", "--heterogeneity", str(het), "--out-dir", str(tmp_path / "t")]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "universe,factor,intercept,slope_per_month,slope_hac_se"
    assert main(["trend", "--heterogeneity", str(het), "--horizon", "12"]) == 1


def test_module_entry_point(sim_dir, tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "peerexposure", "run", "--returns", str(tmp_path / "none.csv"),
         "--factors", str(sim_dir / "factors.csv"), "--ghg", str(sim_dir / "ghg.csv")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 1
    assert proc.stdout == ""
    assert "none.csv" in proc.stderr
