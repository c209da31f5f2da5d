import json
from pathlib import Path

import numpy as np
import pytest

import cli
from cli import EXIT_BAND, EXIT_ERROR, EXIT_OK, UsageError, load_run_configs, main, parse_args

GRAPH_FILE = str(Path(__file__).parent / "graphs" / "fig1_5.json")


def _json_run(capsys, *argv):
    code = main([*argv, "--format", "json"])
    return code, json.loads(capsys.readouterr().out)


class TestArguments:
    def test_source_required(self):
        with pytest.raises(UsageError):
            parse_args([])

    def test_sources_are_exclusive(self):
        with pytest.raises(UsageError):
            parse_args(["--builtin", "fig1-1", "--graph", GRAPH_FILE])

    def test_samples_must_be_positive(self):
        with pytest.raises(UsageError):
            parse_args(["--builtin", "fig1-1", "--samples", "0"])

    def test_preset_with_override(self, tmp_path):
        config = tmp_path / "runs.json"
        config.write_text(json.dumps({"presets": {"quick": {"builtin": "fig1-5", "samples": 50,
                                                            "compare-oracle": True}}}))
        args = parse_args(["--preset", "quick", "--samples", "10"], config_file=str(config))
        assert args.builtin == "fig1-5"
        assert args.samples == 10
        assert args.compare_oracle

    def test_unknown_preset(self, tmp_path):
        with pytest.raises(UsageError, match="preset"):
            parse_args(["--preset", "nope", "--builtin", "fig1-1"], config_file=str(tmp_path / "missing.json"))

    def test_missing_config_means_no_presets(self, tmp_path):
        assert load_run_configs(str(tmp_path / "missing.json")) == {"presets": {}}

    def test_shipped_presets_parse(self):
        presets = load_run_configs(str(Path(__file__).parent / "run_configs.json"))["presets"]
        for name in presets:
            args = parse_args(["--preset", name], config_file=str(Path(__file__).parent / "run_configs.json"))
            assert args.builtin or args.graph


class TestMain:
    def test_usage_error_exit_code(self, capsys):
        assert main([]) == EXIT_ERROR
        assert "usage error" in capsys.readouterr().err

    def test_missing_graph_file(self, tmp_path, capsys):
        assert main(["--graph", str(tmp_path / "none.json")]) == EXIT_ERROR
        assert "not found" in capsys.readouterr().err

    def test_bad_baseline(self, capsys):
        assert main(["--builtin", "fig1-1", "--baseline", "median"]) == EXIT_ERROR

    def test_json_report(self, capsys):
        code, report = _json_run(capsys, "--graph", GRAPH_FILE, "--samples", "200", "--seed", "4",
                                 "--baseline", "const:1")
        assert code == EXIT_OK
        assert report["source"] == GRAPH_FILE
        assert set(report["mean"]) == {"theta"}
        assert report["n"] == 200 and report["seed"] == 4 and report["baseline"] == "const:1"
        assert "timestamp" in report

    def test_oracle_comparison(self, capsys):
        code, report = _json_run(capsys, "--builtin", "fig1-1", "--samples", "4000", "--compare-oracle")
        assert code == EXIT_OK
        row = report["oracle"]["theta"]
        assert row["exact"] == pytest.approx(0.25)
        assert row["within_band"]

    def test_out_of_band_exit_code(self, capsys, monkeypatch):
        monkeypatch.setattr(cli, "exact_gradient", lambda graph, inputs, theta: np.asarray(10.0))
        code, report = _json_run(capsys, "--builtin", "fig1-1", "--samples", "100", "--compare-oracle")
        assert code == EXIT_BAND
        assert not report["oracle"]["theta"]["within_band"]

    def test_compare_methods(self, capsys):
        code, report = _json_run(capsys, "--builtin", "fig1-5", "--samples", "30", "--compare-methods")
        assert code == EXIT_OK
        assert report["compare_methods"]["equal"]
        assert report["compare_methods"]["traces"] == 30
        assert "sf_vs_pd" not in report["compare_methods"]

    def test_compare_methods_gaussian(self, capsys):
        _, report = _json_run(capsys, "--builtin", "gauss-reparam", "--samples", "2000", "--compare-methods")
        rows = report["compare_methods"]["sf_vs_pd"]
        assert rows["nodes"] == ["x"]
        assert rows["params"]["theta"]["pd_lower_variance"]

    def test_reparam_flag(self, capsys):
        code, report = _json_run(capsys, "--builtin", "gauss-reparam", "--samples", "500", "--reparam", "x",
                                 "--compare-oracle")
        assert code == EXIT_OK
        assert report["oracle"]["theta"]["exact"] == pytest.approx(2.0)

    def test_hvp(self, tmp_path, capsys):
        vector = tmp_path / "v.json"
        vector.write_text("1.0")
        code, report = _json_run(capsys, "--builtin", "fig1-4", "--samples", "20", "--hvp", str(vector))
        assert code == EXIT_OK
        assert report["hvp"]["theta"] == "theta"
        assert "stderr" in report["hvp"]

    def test_variance_report(self, capsys):
        _, report = _json_run(capsys, "--builtin", "fig1-1", "--samples", "10", "--baseline", "const:0.5",
                              "--variance-report")
        rows = report["variance_report"]["theta"]["baselines"]
        assert rows["const:0.5"]["variance"] == pytest.approx(0.0, abs=1e-15)

    def test_text_output(self, capsys):
        assert main(["--builtin", "fig1-5", "--samples", "10", "--compare-methods"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "Source: fig1-5" in out
        assert "d/dtheta" in out
        assert "surrogate vs algorithm1" in out

    def test_multi_parameter_graph(self, capsys):
        _, report = _json_run(capsys, "--builtin", "nn2layer", "--samples", "3")
        assert set(report["mean"]) == {"W1", "b1", "W2", "b2"}

    def test_same_seed_same_report(self, capsys):
        _, first = _json_run(capsys, "--builtin", "bernoulli-chain", "--samples", "40", "--seed", "9", "--threads", "1")
        _, second = _json_run(capsys, "--builtin", "bernoulli-chain", "--samples", "40", "--seed", "9", "--threads", "3")
        first.pop("timestamp")
        second.pop("timestamp")
        assert first == second

    def test_bad_graph_names_the_node(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"nodes": [{"id": 0, "kind": "input"},
                                              {"id": 1, "kind": "det", "op": "frobnicate", "parents": [0]}]}))
        assert main(["--graph", str(path)]) == EXIT_ERROR
        assert "node 1" in capsys.readouterr().err
