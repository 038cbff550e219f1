import csv
import fnmatch
import json
import subprocess
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from stmodes import cli

SMALL = ["--nodes", "5", "--length", "360", "--k", "3", "--window", "6", "--horizon", "3",
         "--filters", "4", "--order", "2", "--blocks", "1", "--batch", "16", "--epochs", "2",
         "--threads", "1"]


def schema(name):
    return json.loads(resources.files("stmodes").joinpath("schemas", name).read_text())


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def check_json(path, schema_name):
    payload = json.loads(Path(path).read_text())
    jsonschema.validate(payload, schema(schema_name))
    return payload


def _cell_ok(value, kind):
    if kind.endswith("?") and value == "":
        return True
    kind = kind.rstrip("?")
    if kind == "string":
        return True
    if kind == "integer":
        return value.lstrip("-").isdigit()
    float(value)
    return True


def check_csv(path):
    tables = schema("csv_tables.json")
    spec = next(v for k, v in tables.items() if fnmatch.fnmatch(Path(path).name, k))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    lead = spec["columns"]
    assert header[:len(lead)] == lead
    assert body
    kinds = spec.get("types", [])
    for row in body:
        assert len(row) == len(header)
        for i, value in enumerate(row):
            kind = kinds[i] if i < len(kinds) else spec.get("rest", "string")
            assert _cell_ok(value, kind), (path, header[i], value)
    return header, body


def test_bogus_flag_exits_2_with_json(capsys):
    code, out, err = run(capsys, "decompose", "--bogus")
    assert code == 2 and out == ""
    payload = json.loads(err)
    jsonschema.validate(payload, schema("error.schema.json"))
    assert payload["exit_code"] == 2


def test_missing_subcommand_and_bad_value(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "decompose", "--k", "three")[0] == 2


def test_missing_input_file_exits_2(capsys, tmp_path):
    code, _, err = run(capsys, "decompose", "--signals", tmp_path / "nope.csv",
                       "--adjacency", tmp_path / "nope2.csv", "--out", tmp_path)
    assert code == 2 and "not found" in json.loads(err)["message"]


def test_malformed_input_exits_2(capsys, tmp_path):
    (tmp_path / "signals.csv").write_text("a,b\n1,2\n3,nan\n")
    (tmp_path / "adjacency.csv").write_text("src,dst,weight\n0,1,1\n")
    code, _, err = run(capsys, "decompose", "--data", tmp_path, "--out", tmp_path / "o")
    assert code == 2 and "row 2, column 1" in json.loads(err)["message"]


def test_invalid_config_value_exits_2(capsys, tmp_path):
    code, _, _ = run(capsys, "decompose", "--k", "0", "--out", tmp_path, *SMALL[:4])
    assert code == 2


def test_gradcheck_failure_exits_1_with_diagnostics(capsys, tmp_path):
    code, _, err = run(capsys, "gradcheck", "--tolerance", "1e-30", "--out", tmp_path)
    assert code == 1
    payload = json.loads(err)
    jsonschema.validate(payload, schema("error.schema.json"))
    assert set(payload["diagnostics"]) >= {"worst_parameter", "max_relative_error"}
    report = check_json(tmp_path / "gradcheck.json", "gradcheck.schema.json")
    assert report["passed"] is False


def test_gradcheck_passes_at_loose_tolerance(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--tolerance", "1e-2", "--out", tmp_path)
    assert code == 0 and json.loads(out)["passed"]
    report = check_json(tmp_path / "gradcheck.json", "gradcheck.schema.json")
    assert report["config"]["num_nodes"] == 4 and report["config"]["order"] == 2


def write_config(path, text):
    path.write_text(text)
    return path


def test_settings_precedence_flag_over_file_over_default(tmp_path, monkeypatch):
    monkeypatch.delenv("STMODES_THREADS", raising=False)
    cfg = write_config(tmp_path / "c.ini", "[vmd]\nk = 5\nalpha = 1000\n[training]\nlr = 0.01\n")
    parser = cli.build_parser()
    s = cli.resolve_settings(parser.parse_args(["train", "--config", str(cfg), "--k", "4"]))
    assert s["k"] == 4            # flag
    assert s["alpha"] == 1000.0   # file
    assert s["lr"] == 0.01
    assert s["eps"] == 1e-7       # default
    assert s["_explicit"] >= {"k", "alpha", "lr"} and "eps" not in s["_explicit"]


def test_threads_environment_fallback(tmp_path, monkeypatch):
    parser = cli.build_parser()
    monkeypatch.setenv("STMODES_THREADS", "3")
    assert cli.resolve_settings(parser.parse_args(["synth"]))["threads"] == 3
    assert cli.resolve_settings(parser.parse_args(["synth", "--threads", "2"]))["threads"] == 2
    monkeypatch.setenv("STMODES_THREADS", "many")
    with pytest.raises(cli.UsageError):
        cli.resolve_settings(parser.parse_args(["synth"]))


@pytest.mark.parametrize("text", ["[vmd]\nbogus = 1\n", "[training]\nk = 3\n", "[vmd]\nk = x\n",
                                  "not an ini"])
def test_bad_config_file_exits_2(capsys, tmp_path, text):
    cfg = write_config(tmp_path / "c.ini", text)
    assert run(capsys, "synth", "--config", cfg, "--out", tmp_path)[0] == 2


def test_missing_config_file_exits_2(capsys, tmp_path):
    assert run(capsys, "synth", "--config", tmp_path / "none.ini")[0] == 2


def test_synth_artifacts(capsys, tmp_path):
    code, _, _ = run(capsys, "synth", "--nodes", "4", "--length", "50", "--out", tmp_path)
    assert code == 0
    meta = check_json(tmp_path / "dataset.json", "dataset.schema.json")
    assert meta["num_nodes"] == 4 and meta["length"] == 50
    for name in ("signals.csv", "adjacency.csv", "components.csv"):
        check_csv(tmp_path / name)


def test_decompose_recovers_default_corpus(capsys, tmp_path):
    code, _, _ = run(capsys, "decompose", "--k", "3", "--alpha", "2000", "--eps", "1e-7",
                     "--threads", "1", "--out", tmp_path)
    assert code == 0
    report = check_json(tmp_path / "decompose_report.json", "decompose_report.schema.json")
    assert report["reconstruction_error"] < 1e-3
    assert report["min_component_correlation"] > 0.99
    check_json(tmp_path / "modes.bin.json", "modeset_sidecar.schema.json")


def test_decompose_reads_synth_output(capsys, tmp_path):
    run(capsys, "synth", "--nodes", "3", "--length", "120", "--out", tmp_path / "d")
    code, out, _ = run(capsys, "decompose", "--data", tmp_path / "d", "--k", "2",
                       "--threads", "1", "--out", tmp_path / "o")
    assert code == 0 and json.loads(out)["num_nodes"] == 3


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert cli.main(["train", *SMALL, "--epochs", "3", "--out", str(out)]) == 0
    return out


def test_train_artifacts(trained):
    check_json(trained / "checkpoint.bin.json", "checkpoint_manifest.schema.json")
    check_json(trained / "metrics.json", "metrics.schema.json")
    header, body = check_csv(trained / "metrics.csv")
    assert [r[0] for r in body[:3]] == ["1", "2", "3"]
    _, curve = check_csv(trained / "loss_curve.csv")
    assert len(curve) == 3
    header, rows = check_csv(trained / "channel_attention_block0.csv")
    assert header == ["row", "mode_0", "mode_1", "mode_2"] and len(rows) == 3


def test_eval_trained_beats_untrained(capsys, trained, tmp_path):
    ck = trained / "checkpoint.bin"
    code, out, _ = run(capsys, "eval", *SMALL, "--checkpoint", ck, "--out", tmp_path / "a")
    assert code == 0
    trained_mae = json.loads(out)["test"]["mae"]
    code, out, _ = run(capsys, "eval", *SMALL, "--out", tmp_path / "b")
    assert code == 0
    assert trained_mae < json.loads(out)["test"]["mae"]
    check_json(tmp_path / "a" / "metrics.json", "metrics.schema.json")


def test_eval_rejects_mismatched_checkpoint(capsys, trained, tmp_path):
    code, _, err = run(capsys, "eval", *SMALL, "--filters", "8",
                       "--checkpoint", trained / "checkpoint.bin", "--out", tmp_path)
    assert code == 2 and "filters" in json.loads(err)["message"]
    code, _, _ = run(capsys, "eval", *SMALL, "--checkpoint", tmp_path / "none.bin",
                     "--out", tmp_path)
    assert code == 2


def test_sweep_from_checkpoint(capsys, trained, tmp_path):
    code, out, _ = run(capsys, "sweep", *SMALL, "--checkpoint", trained / "checkpoint.bin",
                       "--sigmas", "0.5,0,0.1", "--out", tmp_path)
    assert code == 0
    assert [r["sigma"] for r in json.loads(out)["results"]] == [0.0, 0.1, 0.5]
    check_json(tmp_path / "sweep.json", "sweep.schema.json")
    check_csv(tmp_path / "sweep.csv")


def test_ablate_case_one_grid(capsys, tmp_path):
    code, out, _ = run(capsys, "ablate", *SMALL, "--epochs", "1", "--cases", "I",
                       "--out", tmp_path)
    assert code == 0
    rows = json.loads(out)["rows"]
    assert {r["case"] for r in rows} == {"I"}
    assert {(r["alpha"], r["eps"]) for r in rows} >= {(1000.0, 1e-7), (2000.0, 1e-7)}
    header, body = check_csv(tmp_path / "ablation.csv")
    assert len(body) == len(rows)


def artifact_bytes(root):
    """Every output file; JSON manifests lose their creation timestamp."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.suffix == ".json":
            payload = json.loads(data)
            payload.pop("created", None)
            data = json.dumps(payload, sort_keys=True).encode()
        out[p.relative_to(root).as_posix()] = data
    return out


@pytest.mark.parametrize("argv", [
    ["synth", "--nodes", "4", "--length", "80"],
    ["decompose", *SMALL, "--sigma", "0.3"],
    ["train", *SMALL],
    ["ablate", *SMALL, "--epochs", "1", "--cases", "II,III"],
    ["gradcheck", "--tolerance", "1"],
])
def test_rerun_is_byte_identical(tmp_path, argv):
    outs = []
    for i in range(2):
        out = tmp_path / str(i)
        assert cli.main(argv + ["--out", str(out)]) == 0
        outs.append(artifact_bytes(out))
    assert outs[0] and outs[0] == outs[1]


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stmodes.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("stmodes ")
    proc = subprocess.run([sys.executable, "-m", "stmodes.cli", "train", "--epochs", "x"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and json.loads(proc.stderr)["exit_code"] == 2
