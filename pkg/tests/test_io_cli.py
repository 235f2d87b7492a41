import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from qsdlab.cli import main
from qsdlab.errors import IoError, ParseError, UnsupportedFormat
from qsdlab.io import dumps_result, load_model, load_vector, result_schema, save_model
from qsdlab.model import ModelFamilySpec, make_family
from qsdlab.pipeline import RunConfig, run

from conftest import G2_LAMBDA

SCHEMA = result_schema()
G2_TEXT = "# two states\n1 2 1\n1 0 1\n\n2 1 1\n"


@pytest.fixture
def g2_file(tmp_path):
    p = tmp_path / "g2.txt"
    p.write_text(G2_TEXT)
    return p


def cli(tmp_path, *args, name="out.json"):
    out = tmp_path / name
    code = main([*args, "--out", str(out)])
    text = out.read_text()
    return code, (json.loads(text) if name.endswith(".json") else text), text


def test_round_trip_family(tmp_path):
    m = make_family(ModelFamilySpec("bd_line", 0.4, c=2.0, n=20))
    path = tmp_path / "line.txt"
    save_model(m, path)
    back = load_model(path)
    assert back.digest() == m.digest()
    assert path.read_text().startswith("# qmatrix-triplets-v1")


def test_parse_error_has_line(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("# header\n1 2 1\n1 2 abc\n")
    with pytest.raises(ParseError) as info:
        load_model(p)
    assert info.value.line == 3 and "line 3" in str(info.value)
    p.write_text("1 2\n")
    with pytest.raises(ParseError):
        load_model(p)


def test_manifest_variants(tmp_path, g2_file):
    inline = tmp_path / "inline.json"
    inline.write_text(json.dumps({"format": "qmatrix-triplets-v1", "states": 2, "entries": [[1, 2, "1"], [1, 0, 1], [2, 1, 1]]}))
    by_path = tmp_path / "bypath.json"
    by_path.write_text(json.dumps({"format": "qmatrix-triplets-v1", "states": 2, "entries": g2_file.name}))
    assert load_model(inline).digest() == load_model(by_path).digest() == load_model(g2_file).digest()
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"format": "mtx", "entries": []}))
    with pytest.raises(UnsupportedFormat):
        load_model(wrong)


def test_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_model(tmp_path / "nope.txt")


def test_load_vector_forms(tmp_path):
    a = tmp_path / "u.json"
    a.write_text("[0.25, 0.75]")
    b = tmp_path / "u.txt"
    b.write_text("0.25\n0.75\n")
    c = tmp_path / "u.csv"
    c.write_text("# state,u\n1,0.25\n2,0.75\n")
    for p in (a, b, c):
        np.testing.assert_array_equal(load_vector(p), [0.25, 0.75])


def test_dumps_result_is_canonical():
    doc = {"b": np.float64(1.0) / 3, "a": [np.inf, 1], "c": np.arange(2)}
    text = dumps_result(doc)
    assert text.index('"a"') < text.index('"b"')
    assert json.loads(text) == {"a": [None, 1], "b": 1 / 3, "c": [0, 1]}


def test_compute_feedback(tmp_path):
    code, doc, _ = cli(tmp_path, "compute", "--family", "feedback-chain", "--p", "0.3", "--r", "0.2", "--w", "0.5", "--trunc", "2000")
    assert code == 0
    out = doc["outputs"]
    assert out["lambda"] == pytest.approx(0.2890227, abs=1e-6)
    assert out["classification"] == "lambda-positive-recurrent"
    assert out["qsd_route"] == "exit_kernel"
    u = np.array(out["u"])
    np.testing.assert_allclose(u[1:30] / u[:29], 0.3 / (1 - out["lambda"]), rtol=1e-9)
    jsonschema.validate(doc, SCHEMA)


def test_compute_halfline(tmp_path):
    code, doc, _ = cli(tmp_path, "compute", "--family", "bd-halfline", "--p", "0.25", "--c", "1", "--trunc", "400")
    assert code == 0
    out = doc["outputs"]
    assert out["classification"] == "lambda-transient"
    assert out["qsd_route"] == "direct"
    assert out["u"][0] == pytest.approx(0.178633, abs=5e-3)
    jsonschema.validate(doc, SCHEMA)


def test_compute_bd_line(tmp_path):
    code, doc, _ = cli(tmp_path, "compute", "--family", "bd-line", "--p", "0.4", "--c", "2", "--trunc", "300")
    assert code == 0
    out = doc["outputs"]
    assert out["classification"] == "lambda-null-recurrent"
    assert out["verdict"] == "no QSD: invariant measure non-summable (partial sums diverge)"
    assert out["u"] is None
    sums = [s for _, s in out["invariant_measure_partial_sums"]]
    assert sums[1] > 1e6 * sums[0]
    jsonschema.validate(doc, SCHEMA)


def test_classify_and_bound_g2(tmp_path, g2_file):
    code, doc, _ = cli(tmp_path, "classify", "--model", str(g2_file))
    assert code == 0 and doc["outputs"]["classification"] == "lambda-positive-recurrent"
    jsonschema.validate(doc, SCHEMA)
    code, doc, _ = cli(tmp_path, "bound", "--model", str(g2_file), "--k", "1")
    out = doc["outputs"]
    assert code == 0
    golden = (np.sqrt(5) - 1) / 2
    assert out["bound"] == pytest.approx(golden, abs=1e-9)
    assert out["attained"] == pytest.approx(golden, abs=1e-9)
    assert out["qsd_exists"] == "true"
    jsonschema.validate(doc, SCHEMA)


def test_verify(tmp_path, g2_file):
    u = tmp_path / "u.json"
    u.write_text(json.dumps([0.3819660112501051, 0.6180339887498949]))
    code, doc, _ = cli(tmp_path, "verify", "--model", str(g2_file), "--u", str(u), "--lambda", repr(float(G2_LAMBDA)))
    assert code == 0 and doc["outputs"]["residuals"]["residual_inf"] <= 1e-10
    u.write_text("[0.5, 0.5]")
    code, doc, _ = cli(tmp_path, "verify", "--model", str(g2_file), "--u", str(u))
    assert code == 4 and not doc["outputs"]["residual_gate"]["passed"]
    jsonschema.validate(doc, SCHEMA)


def test_simulate_command(tmp_path, g2_file):
    code, doc, _ = cli(tmp_path, "simulate", "--model", str(g2_file), "--paths", "20000", "--t", "10", "--seed", "3")
    assert code == 0
    out = doc["outputs"]
    assert set(out) >= {"lambda0", "yaglom", "qsd_invariance", "holding_time_ks"}
    assert abs(out["lambda0"]["rate"] - G2_LAMBDA) < 0.05
    jsonschema.validate(doc, SCHEMA)


def test_error_documents(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("1 2 -1\n2 1 1\n")
    code, doc, _ = cli(tmp_path, "compute", "--model", str(bad))
    assert code == 2
    assert doc["error"]["code"] == "NegativeRate" and doc["status"] == "error"
    jsonschema.validate(doc, SCHEMA)
    code, doc, _ = cli(tmp_path, "compute", "--family", "feedback-chain", "--p", "0.3", "--w", "0.0", "--trunc", "50")
    assert code == 2 and doc["error"]["code"] == "BadParameters"


def test_csv_output(tmp_path):
    code, _, text = cli(tmp_path, "compute", "--family", "bd-halfline", "--p", "0.25", "--trunc", "50", "--format", "csv", name="u.csv")
    lines = text.splitlines()
    assert code == 0 and lines[0] == "state,u"
    assert len(lines) == 51


def test_timing_is_opt_in(tmp_path, g2_file):
    _, doc, _ = cli(tmp_path, "compute", "--model", str(g2_file))
    assert "timing" not in doc
    _, doc, _ = cli(tmp_path, "compute", "--model", str(g2_file), "--timing")
    assert doc["timing"]["seconds"] >= 0
    jsonschema.validate(doc, SCHEMA)


def test_run_config_validation():
    doc, code = run(RunConfig("compute"))
    assert code == 2 and doc["error"]["code"] == "BadParameters"
    doc, code = run(RunConfig("compute", family="bd-line", p=0.4, tol=0.0))
    assert code == 2


def test_module_entry_point(tmp_path, g2_file):
    proc = subprocess.run(
        [sys.executable, "-m", "qsdlab", "compute", "--model", str(g2_file)], capture_output=True, text=True, check=False
    )
    assert proc.returncode == 0
    doc = json.loads(proc.stdout)
    assert doc["outputs"]["lambda"] == pytest.approx(G2_LAMBDA, abs=1e-12)
