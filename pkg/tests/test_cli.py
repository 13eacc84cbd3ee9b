import csv
import json
from pathlib import Path

import pytest

from windtunnel import __version__
from windtunnel.cli import EXIT_CODES, main
from windtunnel.config import load_config

TINY_YAML = """\
schema_version: 1
seed: 3
data: {n_stocks: 12, n_steps: 120, n_factors: 3}
retrieval: {history_len: 16, T: 4, K: 3}
model: {layers: 1, heads: 2, d_model: 8, step_embed_dim: 8}
schedule: {H: 20, beta_min: 0.0001, beta_max: 0.1}
train: {batches: 60, batch_size: 4, lr: 0.001}
generate: {targets: [S00, S05], n_paths: 3}
evaluate: {eval_windows: 4, n_paths: 2}
ablate: {methods: [excess_return_correlation, none], models: [fwt, gan, linear]}
sensitivity: {ks: [0, 2], steps: [3]}
optimize:
  strategies: [{name: m5, signal: 5}, {name: m10, signal: 10}]
  horizon: 4
  n_long: 2
  n_short: 2
  n_scenarios: 2
  grid: [{lags: [1, 4], alpha: 1.0}]
  multipliers: [0, 2]
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Every command run once, chained through its files; returns the directory map."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY_YAML)
    d = {k: root / k for k in ("data", "other", "train", "gen", "eval", "whatif", "cross", "ablate", "sens", "opt")}
    panel, model = d["data"] / "panel.fwtp", d["train"] / "model.fwtc"
    c = ["--config", cfg]
    steps = [
        ["synth-data", *c, "--out", d["data"], "--set", "data.factor_seed=9"],
        ["synth-data", *c, "--out", d["other"], "--market", "OTHER", "--seed", "4", "--set", "data.factor_seed=9"],
        ["train", *c, "--panel", panel, "--out", d["train"]],
        ["generate", *c, "--panel", panel, "--checkpoint", model, "--out", d["gen"]],
        ["evaluate", *c, "--panel", panel, "--checkpoint", model, "--out", d["eval"]],
        ["whatif", *c, "--panel", panel, "--checkpoint", model, "--out", d["whatif"], "--predicate", "vol >= q(0.5)"],
        ["cross-market", *c, "--panel", panel, "--source-panel", d["other"] / "panel.fwtp", "--checkpoint", model,
         "--out", d["cross"]],
        ["ablate", *c, "--panel", panel, "--out", d["ablate"]],
        ["sensitivity", *c, "--panel", panel, "--out", d["sens"], "--k", "0,2", "--steps", "3,4"],
        ["optimize", *c, "--panel", panel, "--checkpoint", model, "--out", d["opt"]],
    ]
    for argv in steps:
        code = main([str(a) for a in argv])
        assert code == 0, argv
    d["cfg"] = cfg
    return d


def report(path):
    return json.loads((Path(path) / "report.json").read_text())


def test_every_run_leaves_config_and_report(pipeline):
    for key in ("data", "train", "gen", "eval", "whatif", "cross", "ablate", "sens", "opt"):
        rep = report(pipeline[key])
        assert rep["schema_version"] == 1 and rep["tool_version"] == __version__
        cfg = load_config(pipeline[key] / "config.yaml")
        assert cfg.seed == 3 and cfg.paths.out_dir == str(pipeline[key])
        assert (pipeline[key] / "config.yaml").read_text().startswith(f"tool_version: {__version__}")


def test_train_report(pipeline):
    rep = report(pipeline["train"])
    assert rep["command"] == "train" and rep["batches"] == 60
    assert rep["param_count"] > 0 and (pipeline["train"] / "model.fwtc").is_file()


def test_generate_writes_trajectories_and_bands(pipeline):
    g = pipeline["gen"]
    rep = report(g)
    assert set(rep["targets"]) == {"S00", "S05"}
    for name in ("S00", "S05"):
        rows = _rows(g / f"{name}_trajectories.csv")
        assert rows[0] == ["path_id", "step", "return", "price"]
        assert len(rows) == 1 + 3 * 4
        bands = _rows(g / f"{name}_bands.csv")
        assert bands[0][0] == "step" and len(bands) == 1 + 4
        for row in bands[1:]:
            lo, mid, hi = map(float, row[1:4])
            assert lo <= mid <= hi
        assert len(rep["targets"][name]["neighbors"]) == 3


def test_evaluate_and_cross_market_reports(pipeline):
    ev = report(pipeline["eval"])["evaluation"]
    assert 0 < ev["market_ranking"] <= 1 and -1 <= ev["correlation"] <= 1
    assert _rows(pipeline["eval"] / "per_stock.csv")[0] == ["symbol", "correlation", "market_ranking"]
    cm = report(pipeline["cross"])
    assert cm["source_market"] == "OTHER"
    assert {"same_market", "cross_market"} <= set(cm)


def test_whatif_writes_both_ensembles(pipeline):
    w = pipeline["whatif"]
    rep = report(w)
    assert rep["predicate"] == "vol >= q(0.5)" and rep["vol_ratio"] > 0
    for tag in ("base_", "whatif_"):
        assert (w / f"{tag}S00_trajectories.csv").is_file()


def test_ablation_and_sensitivity_tables(pipeline):
    rows = _rows(pipeline["ablate"] / "ablation.csv")
    assert len(rows) == 1 + 2 * 3
    sens = report(pipeline["sens"])
    assert [(c["K"], c["steps"]) for c in sens["cells"]] == [(0, 3), (0, 4), (2, 3), (2, 4)]
    assert _rows(pipeline["sens"] / "sensitivity.csv")[0] == ["K", "steps", "market_ranking", "correlation"]


def test_optimize_report(pipeline):
    rep = report(pipeline["opt"])
    assert [p["source"] for p in rep["scenarios"]] == ["real", "real", "sim", "sim"]
    assert {r["dataset"] for r in rep["model_based"]["table"]} == {"0x", "2x"}
    assert (pipeline["opt"] / "model_based.csv").is_file()


def test_input_panel_not_mutated(pipeline, capsys):
    panel = pipeline["data"] / "panel.fwtp"
    before = panel.read_bytes()
    code, _, _ = run(capsys, "evaluate", "--config", pipeline["cfg"], "--panel", panel, "--checkpoint",
                     pipeline["train"] / "model.fwtc", "--out", pipeline["data"].parent / "eval2")
    assert code == 0 and panel.read_bytes() == before


# failures -----------------------------------------------------------------------


def _error(err):
    return json.loads(err.strip().splitlines()[-1])["error"]


def test_success_line_on_stdout(pipeline, capsys, tmp_path):
    code, out, _ = run(capsys, "synth-data", "--config", pipeline["cfg"], "--out", tmp_path)
    assert code == 0 and json.loads(out)["ok"] is True


def test_bad_config_exit_code_and_line(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nretrieval:\n  K: 3\n  colour: red\n")
    code, _, err = run(capsys, "synth-data", "--config", bad, "--out", tmp_path / "o")
    e = _error(err)
    assert code == EXIT_CODES["config_error"] == 2
    assert e["type"] == "config_error" and e["line"] == 4


def test_bad_override_is_config_error(tmp_path, capsys):
    code, _, err = run(capsys, "synth-data", "--set", "model.depth=3", "--out", tmp_path)
    assert code == 2 and _error(err)["type"] == "config_error"


def test_missing_panel_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--panel", tmp_path / "none.fwtp", "--out", tmp_path / "o")
    assert code == EXIT_CODES["missing_input"] == 3
    assert _error(err)["type"] == "missing_input"
    code, _, _ = run(capsys, "train", "--out", tmp_path / "o")
    assert code == 3


def test_checkpoint_mismatch_exit_code(pipeline, tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--config", pipeline["cfg"], "--panel", pipeline["data"] / "panel.fwtp",
                       "--checkpoint", pipeline["train"] / "model.fwtc", "--set", "model.d_model=16",
                       "--out", tmp_path)
    assert code == EXIT_CODES["checkpoint_mismatch"] == 4
    assert _error(err)["type"] == "checkpoint_mismatch"


def test_corrupt_panel_is_data_error(pipeline, tmp_path, capsys):
    broken = tmp_path / "panel.fwtp"
    data = (pipeline["data"] / "panel.fwtp").read_bytes()
    broken.write_bytes(data[: len(data) // 2])
    code, _, err = run(capsys, "train", "--config", pipeline["cfg"], "--panel", broken, "--out", tmp_path / "o")
    assert code == EXIT_CODES["data_error"] == 5


def test_bad_predicate_is_retrieval_error(pipeline, tmp_path, capsys):
    code, _, err = run(capsys, "whatif", "--config", pipeline["cfg"], "--panel", pipeline["data"] / "panel.fwtp",
                       "--checkpoint", pipeline["train"] / "model.fwtc", "--predicate", "vol >>= 3",
                       "--out", tmp_path)
    assert code == EXIT_CODES["retrieval_error"] == 6
