import json

import numpy as np
import pytest

from dyntree import io
from dyntree.cli import main
from dyntree.model import ParentMenu, build_layered_model

from brute import instance


@pytest.fixture
def files(tmp_path):
    model, ev = instance(0, [2, 3, 3], 3)
    io.save_model(model, tmp_path / "model.json")
    io.save_evidence(model, ev, tmp_path / "evidence.json")
    io.save_dataset(model, [ev, ev], tmp_path / "dataset.json")
    return tmp_path


def _args(files, *extra):
    return ["--model", str(files / "model.json"), "--evidence", str(files / "evidence.json"), *extra]


class TestInfer:
    @pytest.mark.parametrize("method", ["svi", "mf", "loopy", "oracle"])
    def test_methods(self, files, method):
        out = files / f"{method}.json"
        assert main(["infer", *_args(files, "--method", method, "--out", str(out))]) == 0
        doc = json.loads(out.read_text())
        assert doc["format_version"] == 1
        assert doc["config"]["method"] == method
        assert doc["config"]["seed"] == 0
        np.testing.assert_allclose(np.sum(doc["marginals"][0], axis=1), 1.0)

    def test_svi_dump(self, files):
        out = files / "svi.json"
        main(["infer", *_args(files, "--max-passes", "3", "--out", str(out))])
        doc = json.loads(out.read_text())
        assert list(doc["state"])[:2] == ["free_energy", "free_energy_trace"]
        assert doc["config"]["svi"]["max_passes"] == 3
        assert len(doc["state"]["free_energy_trace"]) <= 3

    def test_stdout(self, files, capsys):
        assert main(["infer", *_args(files, "--method", "loopy")]) == 0
        assert json.loads(capsys.readouterr().out)["command"] == "infer"

    def test_repeatable(self, files):
        a, b = files / "a.json", files / "b.json"
        main(["infer", *_args(files, "--method", "mf", "--seed", "3", "--out", str(a))])
        main(["infer", *_args(files, "--method", "mf", "--seed", "3", "--out", str(b))])
        assert a.read_bytes() == b.read_bytes()

    def test_missing_evidence(self, files, capsys):
        code = main(["infer", "--model", str(files / "model.json"), "--evidence", str(files / "nope.json")])
        assert code == 2
        assert "nope.json" in capsys.readouterr().err

    def test_invalid_model(self, files, capsys):
        doc = json.loads((files / "model.json").read_text())
        doc["root_priors"][0] = [0.5, 0.5, 0.5]
        (files / "model.json").write_text(json.dumps(doc))
        assert main(["infer", *_args(files)]) == 2
        assert "root" in capsys.readouterr().err

    def test_tree_limit(self, files, capsys):
        model = build_layered_model([4, 4, 4, 4], 3)
        io.save_model(model, files / "big.json")
        (files / "ev.json").write_text(json.dumps({"states": {f"3:{i}": 0 for i in range(4)}}))
        code = main(["oracle", "--model", str(files / "big.json"), "--evidence", str(files / "ev.json"), "--tree-limit", "1000"])
        assert code == 3
        assert str(4**12) in capsys.readouterr().err

    def test_impossible_evidence(self, files):
        model = build_layered_model([1, 2], 2, [ParentMenu((0,), (1.0,))] * 2, np.eye(2))
        io.save_model(model, files / "det.json")
        (files / "ev.json").write_text(json.dumps({"states": {"1:0": 0, "1:1": 1}}))
        assert main(["infer", "--model", str(files / "det.json"), "--evidence", str(files / "ev.json")]) == 3


class TestCompare:
    def test_rows(self, files, capsys):
        out = files / "cmp.json"
        assert main(["compare", *_args(files, "--out", str(out))]) == 0
        doc = json.loads(out.read_text())
        assert [r["node"] for r in doc["rows"]] == ["0:0", "0:1", "1:0", "1:1", "1:2"]
        assert set(doc["kl_sum"]) == {"svi", "loopy"}
        assert "summed KL" in capsys.readouterr().err

    def test_uniform(self, tmp_path):
        model = build_layered_model([2, 2, 2], 3)
        io.save_model(model, tmp_path / "m.json")
        (tmp_path / "e.json").write_text(json.dumps({"states": {"2:0": 0, "2:1": 2}}))
        main(["compare", "--model", str(tmp_path / "m.json"), "--evidence", str(tmp_path / "e.json"),
              "--out", str(tmp_path / "c.json")])
        doc = json.loads((tmp_path / "c.json").read_text())
        for row in doc["rows"]:
            np.testing.assert_allclose(row["svi"], 1 / 3)
            np.testing.assert_allclose(row["loopy"], 1 / 3)
        assert doc["kl_sum"]["svi"] == pytest.approx(0.0, abs=1e-12)

    def test_singleton_menus(self, tmp_path):
        model, ev = instance(5, [2, 3, 3], 3, max_menu=1)
        io.save_model(model, tmp_path / "m.json")
        io.save_evidence(model, ev, tmp_path / "e.json")
        main(["compare", "--model", str(tmp_path / "m.json"), "--evidence", str(tmp_path / "e.json"),
              "--out", str(tmp_path / "c.json")])
        for row in json.loads((tmp_path / "c.json").read_text())["rows"]:
            np.testing.assert_allclose(row["svi"], row["true"], atol=5e-4)


class TestOtherCommands:
    def test_generate(self, tmp_path, capsys):
        assert main(["generate", "--preset", "free-energy", "--cases", "3", "--out", str(tmp_path)]) == 0
        model = io.load_model(tmp_path / "model.json")
        assert model.layer_sizes == (1, 2, 4, 8, 16, 32)
        assert len(io.load_dataset(model, tmp_path / "dataset.json")) == 3
        assert json.loads(capsys.readouterr().out)["config"]["seed"] == 0

    def test_generate_random(self, tmp_path):
        assert main(["generate", "--preset", "random", "--layers", "2,2,3", "--states", "3", "--out", str(tmp_path)]) == 0
        assert io.load_model(tmp_path / "model.json").num_states == 3

    def test_learn(self, files):
        out = files / "learned.json"
        code = main(["learn", "--model", str(files / "model.json"), "--dataset", str(files / "dataset.json"),
                     "--iterations", "2", "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        assert len(doc["free_energy_trace"]) == 3
        assert io.model_from_dict(doc["model"]).layer_sizes == (2, 3, 3)

    def test_learn_needs_dataset(self, files):
        assert main(["learn", "--model", str(files / "model.json")]) == 2


class TestExperiment:
    def test_marginal(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"experiment": "marginal_comparison", "num_runs": 2}))
        assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["config"]["num_states"] == 3
        assert summary["config"]["loopy"]["damping"] == 0.1
        lines = (tmp_path / "a" / "report.csv").read_text().splitlines()
        assert len(lines) == 1 + 2 * 2
        main(["experiment", "--config", str(cfg), "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()

    def test_free_energy(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"experiment": "free_energy_comparison", "num_cases": 5}))
        assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path)]) == 0
        doc = json.loads((tmp_path / "report.json").read_text())
        assert {r["run"] for r in doc["records"]} == set(range(5))
        assert len(doc["records"]) == 10

    def test_invalid_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"experiment": "marginal_comparison", "num_runz": 2}))
        assert main(["experiment", "--config", str(cfg)]) == 2

    def test_all_runs_fail(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"experiment": "marginal_comparison", "num_runs": 1, "tree_limit": 5}))
        assert main(["experiment", "--config", str(cfg), "--out", str(tmp_path)]) == 3
