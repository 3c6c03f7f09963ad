import json
import subprocess
import sys

import pytest

from layoutgen.cli import EXIT_DATA, EXIT_MODEL, EXIT_OK, EXIT_USAGE, main, read_config


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def run_json(argv, capsys):
    code, out, err = run([*argv, "--json"], capsys)
    return code, json.loads(out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A synthetic corpus and a one-epoch tiny model shared by the pipeline tests."""
    wd = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "40", "--out", "corpus", "--workdir", str(wd)]) == EXIT_OK
    code = main(["train", "--data", "corpus", "--out", "run", "--epochs", "1", "--d-model", "16",
                 "--layers", "1", "--heads", "2", "--batch-size", "8", "--max-seq", "128", "--workdir", str(wd)])
    assert code == EXIT_OK
    return wd


def test_roundtrip_check(capsys):
    code, out, _ = run(["roundtrip-check", "--n", "300"], capsys)
    assert code == EXIT_OK and out.strip() == "300/300 exact"


def test_usage_errors(capsys):
    assert run(["frobnicate"], capsys)[0] == EXIT_USAGE
    assert run(["generate", "--task", "ugen"], capsys)[0] == EXIT_USAGE  # no --model
    assert run(["render", "--input", "x.json"], capsys)[0] == EXIT_USAGE  # no --out
    assert run(["roundtrip-check", "--vocab", "klingon"], capsys)[0] == EXIT_USAGE


def test_missing_input_is_data_error(tmp_path, capsys):
    code, payload = run_json(["render", "--input", tmp_path / "none.json", "--out", tmp_path / "o.svg"], capsys)
    assert code == EXIT_DATA and payload["ok"] is False and payload["exit_code"] == EXIT_DATA


def test_missing_model_is_model_error(tmp_path, capsys):
    code, _, err = run(["generate", "--task", "ugen", "--model", tmp_path / "nope.pt"], capsys)
    assert code == EXIT_MODEL and "not found" in err


def test_config_file_overrides_defaults(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("# comment\nn = 25\nseed=3\n")
    code, payload = run_json(["roundtrip-check", "--config", "c.cfg", "--workdir", tmp_path], capsys)
    assert code == EXIT_OK and payload["total"] == 25
    # explicit flags still win
    code, payload = run_json(["roundtrip-check", "--config", "c.cfg", "--workdir", tmp_path, "--n", "5"], capsys)
    assert payload["total"] == 5
    (tmp_path / "bad.cfg").write_text("colour = blue\n")
    assert run(["roundtrip-check", "--config", tmp_path / "bad.cfg"], capsys)[0] == EXIT_USAGE


def test_read_config_normalizes_keys(tmp_path):
    (tmp_path / "c.cfg").write_text("max-nodes = 12  # inline\n")
    assert read_config(tmp_path / "c.cfg") == {"max_nodes": "12"}


def test_pipeline(workspace, capsys):
    wd = str(workspace)
    assert (workspace / "run" / "model.pt").exists()
    code, payload = run_json(["generate", "--task", "gent", "--model", "run/model.pt", "--source", "corpus",
                              "--n", "3", "--out", "gen", "--workdir", wd], capsys)
    assert code == EXIT_OK and len(payload["results"]) == 3
    assert len(list((workspace / "gen").glob("*.layout.json"))) == 3
    assert len(list((workspace / "gen").glob("*.report.json"))) == 3

    code, payload = run_json(["evaluate", "--pred", "gen", "--ref", "corpus", "--out", "eval.json",
                              "--csv", "eval.csv", "--workdir", wd], capsys)
    assert code == EXIT_OK and "w_s_label" in payload["metrics"]
    assert json.loads((workspace / "eval.json").read_text())["metrics"] == payload["metrics"]
    assert (workspace / "eval.csv").read_text().startswith("metric,value")

    first = sorted((workspace / "gen").glob("*.layout.json"))[0]
    code, _, _ = run(["render", "--input", first, "--out", "g.svg", "--mode", "per-level", "--workdir", wd], capsys)
    assert code == EXIT_OK and (workspace / "g.svg").read_text().startswith("<?xml")


def test_generate_is_deterministic(workspace, capsys):
    wd = str(workspace)
    outs = []
    for name in ("d1", "d2"):
        assert run(["generate", "--task", "ugen", "--model", "run/model.pt", "--n", "2", "--out", name,
                    "--seed", "7", "--workdir", wd], capsys)[0] == EXIT_OK
        outs.append([p.read_text() for p in sorted((workspace / name).glob("*.layout.json"))])
    assert outs[0] == outs[1]


def test_extract_and_transfer(workspace, capsys):
    wd = str(workspace)
    sample = sorted((workspace / "corpus").glob("*.layout.json"))[:2]
    (workspace / "few").mkdir(exist_ok=True)
    for p in sample:
        (workspace / "few" / p.name).write_text(p.read_text())
    assert run(["extract", "--baseline", "--input", "few", "--out", "base", "--workdir", wd], capsys)[0] == EXIT_OK
    assert len(list((workspace / "base").glob("*.layout.json"))) == 2
    assert run(["extract", "--input", "few", "--model", "run/model.pt", "--rounds", "2", "--out", "ext",
                "--workdir", wd], capsys)[0] == EXIT_OK
    assert run(["transfer", "--reference", sample[0], "--input", "few", "--model", "run/model.pt",
                "--out", "tr", "--workdir", wd], capsys)[0] == EXIT_OK
    assert len(list((workspace / "tr").glob("*.report.json"))) == 2


def test_request_file(workspace, capsys):
    req = {"task": "gent", "seed": 1, "conditions": {"elements": [{"type": "Text"}, {"type": "Image"}]}}
    (workspace / "req.json").write_text(json.dumps(req))
    code, payload = run_json(["generate", "--request", "req.json", "--model", "run/model.pt", "--out", "rq",
                              "--workdir", str(workspace)], capsys)
    assert code == EXIT_OK and payload["results"][0]["total"] == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "layoutgen", "roundtrip-check", "--n", "20"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "20/20 exact"
