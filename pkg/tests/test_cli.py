import json

import numpy as np
import pytest

from pwscontract.cli import main


def read_csv_rows(path):
    lines = path.read_text().strip().split("\n")
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


def final_state(path):
    _, rows = read_csv_rows(path)
    return np.array([float(rows[-1][1]), float(rows[-1][2])])


class TestSimulate:
    def test_example1_reaches_equilibrium(self, tmp_path):
        out = tmp_path / "traj.csv"
        rc = main(["simulate", "--config", "example1", "--x0", "-3,-4",
                   "--t-final", "20", "--out", str(out)])
        assert rc == 0
        assert np.linalg.norm(final_state(out) - [0.5, 0.0]) < 1e-4
        manifest = json.loads((tmp_path / "traj.csv.manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["outputs"] == [str(out)]
        assert "tool_version" in manifest and "wall_time_s" in manifest

    def test_example2_reaches_equilibrium(self, tmp_path):
        out = tmp_path / "traj.csv"
        rc = main(["simulate", "--config", "example2", "--x0", "-2,-2",
                   "--t-final", "20", "--out", str(out)])
        assert rc == 0
        assert np.linalg.norm(final_state(out) - [1.1, 0.45]) < 1e-4

    def test_zero_duration_single_row(self, tmp_path):
        out = tmp_path / "traj.csv"
        rc = main(["simulate", "--config", "example1", "--x0", "1,1",
                   "--t-final", "0", "--out", str(out)])
        assert rc == 0
        header, rows = read_csv_rows(out)
        assert header == ["t", "x1", "x2", "segment", "mode_or_pair", "lambda"]
        assert len(rows) == 1
        assert rows[0][:3] == ["0", "1", "1"]

    def test_deterministic_output(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert main(["simulate", "--config", "example1", "--x0", "-3,-4",
                         "--t-final", "3", "--out", str(out)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_escaping_exit_code(self, tmp_path):
        cfg = tmp_path / "escape.json"
        cfg.write_text(json.dumps({
            "dimension": 2, "topology": "chain",
            "modes": [{"A": [[-2.0, 1.0], [0.0, -1.0]], "b": [1.0, 0.0]},
                      {"A": [[-1.0, 1.0], [0.0, -1.0]], "b": [3.0, 0.0]}],
            "manifolds": [{"c": [1.0, 0.0], "d": 0.0}],
            "box": {"lower": [-5, -5], "upper": [5, 5]},
        }))
        rc = main(["simulate", "--config", str(cfg), "--x0", "0,-2",
                   "--t-final", "1", "--out", str(tmp_path / "t.csv")])
        assert rc == 2

    def test_bad_vector_usage_error(self, tmp_path):
        rc = main(["simulate", "--config", "example1", "--x0", "1,zap",
                   "--t-final", "1", "--out", str(tmp_path / "t.csv")])
        assert rc == 64

    def test_unknown_config_usage_error(self, tmp_path):
        rc = main(["simulate", "--config", "nosuch", "--x0", "1,1",
                   "--t-final", "1", "--out", str(tmp_path / "t.csv")])
        assert rc == 64


class TestCertify:
    def test_example1_passes(self, tmp_path):
        out = tmp_path / "cert.json"
        rc = main(["certify", "--config", "example1", "--Q", "identity",
                   "--c", "0.5", "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["verdict"] == "pass"
        ids = {c["id"] for c in doc["conditions"]}
        assert ids == {"flow[1]", "flow[2]", "flow[3]", "jump[1]", "jump[2]"}

    def test_example2_passes(self, tmp_path):
        rc = main(["certify", "--config", "example2", "--Q", "identity",
                   "--c", "1.87", "--out", str(tmp_path / "c.json")])
        assert rc == 0

    def test_failing_rate_exit_one(self, tmp_path):
        rc = main(["certify", "--config", "example1", "--Q", "identity",
                   "--c", "0.6", "--out", str(tmp_path / "c.json")])
        assert rc == 1

    def test_non_pd_q_usage_error(self, tmp_path):
        rc = main(["certify", "--config", "example1", "--Q", "diag:1,-1",
                   "--c", "0.5", "--out", str(tmp_path / "c.json")])
        assert rc == 64

    def test_rate_from_embedded_metric(self, tmp_path):
        rc = main(["certify", "--config", "example2",
                   "--out", str(tmp_path / "c.json")])
        assert rc == 0


class TestRegularize:
    def test_monotone_gaps(self, tmp_path):
        out = tmp_path / "conv.csv"
        rc = main(["regularize", "--config", "example1", "--x0", "-3,-4",
                   "--t-final", "10", "--eps", "1e-1,1e-2,1e-3",
                   "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "eps,sup_gap,slope_to_prev"
        gaps = [float(line.split(",")[1]) for line in lines[1:]]
        assert gaps[0] > gaps[1] > gaps[2]

    def test_single_mode_noise_floor(self, tmp_path):
        cfg = tmp_path / "single.json"
        cfg.write_text(json.dumps({
            "dimension": 2, "topology": "chain",
            "modes": [{"A": [[-1.0, 0.0], [0.0, -1.0]], "b": [0.0, 0.0]}],
            "manifolds": [],
            "box": {"lower": [-5, -5], "upper": [5, 5]},
        }))
        out = tmp_path / "conv.csv"
        rc = main(["regularize", "--config", str(cfg), "--x0", "1,1",
                   "--t-final", "5", "--eps", "1e-1,1e-2", "--out", str(out)])
        assert rc == 0
        gaps = [float(line.split(",")[1])
                for line in out.read_text().strip().split("\n")[1:]]
        assert max(gaps) <= 1e-9


class TestPairwiseAndSearch:
    def test_pairwise_pass(self, tmp_path):
        out = tmp_path / "pw.json"
        rc = main(["pairwise", "--config", "example2", "--Q", "identity",
                   "--c", "1.87", "--pairs", "4", "--t-final", "5",
                   "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["verdict"] == "pass"
        assert len(doc["pairs"]) == 4

    def test_search_q_found(self, tmp_path):
        cfg = tmp_path / "single.json"
        cfg.write_text(json.dumps({
            "dimension": 2, "topology": "chain",
            "modes": [{"A": [[-1.0, 0.0], [0.0, -1.0]], "b": [0.0, 0.0]}],
            "manifolds": [],
            "box": {"lower": [-5, -5], "upper": [5, 5]},
        }))
        out = tmp_path / "search.json"
        rc = main(["search-q", "--config", str(cfg), "--c-hi", "2",
                   "--restarts", "1", "--max-iter", "60", "--out", str(out)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["found"]
        assert doc["metric"]["c"] >= 0.9

    def test_search_q_not_found(self, tmp_path):
        cfg = tmp_path / "exp.json"
        cfg.write_text(json.dumps({
            "dimension": 2, "topology": "chain",
            "modes": [{"A": [[1.0, 0.0], [0.0, 1.0]], "b": [0.0, 0.0]}],
            "manifolds": [],
            "box": {"lower": [-5, -5], "upper": [5, 5]},
        }))
        rc = main(["search-q", "--config", str(cfg), "--c-hi", "2",
                   "--restarts", "1", "--max-iter", "40",
                   "--out", str(tmp_path / "s.json")])
        assert rc == 1


class TestReproduce:
    def test_example1(self, tmp_path, capsys):
        rc = main(["reproduce", "1", "--out", str(tmp_path / "r.json")])
        assert rc == 0
        out = capsys.readouterr().out
        assert "PASS mu[1]" in out
        assert "FAIL" not in out
        doc = json.loads((tmp_path / "r.json").read_text())
        assert doc["verdict"] == "pass"

    def test_example2(self, tmp_path, capsys):
        rc = main(["reproduce", "2", "--out", str(tmp_path / "r.json")])
        assert rc == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_unknown_example_usage_error(self):
        assert main(["reproduce", "3"]) == 64
