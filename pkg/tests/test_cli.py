import json
import math
import struct
import time

import numpy as np
import pytest

from langevin_kit.cli import ExperimentConfig, main, resolve
from langevin_kit.spectral import spectral_gap

GAUSS = ["--m", "1", "--M", "10"]


def run_cli(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main(list(argv) + ["--out", str(out)])
    return code, (out.read_text() if out.exists() else "")


def test_couple_csv(tmp_path):
    code, text = run_cli(tmp_path, "couple", "--scheme", "baoab", "--target", "gaussian", *GAUSS, "--gamma", "6.33",
                         "--h", "0.05", "--steps", "1000", "--pairs", "8", "--seed", "1")
    assert code == 0
    lines = text.splitlines()
    assert lines[0] == "pair,k,distance" and len(lines) == 1 + 8 * 1001
    d = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    for p in range(8):
        dist = d[d[:, 0] == p, 2]
        assert dist[-1] < 1e-2 * dist[0]
        assert np.all(dist[100::100] < dist[:-100:100])


def test_couple_all_schemes(tmp_path):
    code, text = run_cli(tmp_path, "couple", "--scheme", "all", *GAUSS, "--gamma", "20", "--h", "0.01", "--steps",
                         "2", "--pairs", "1")
    assert code == 0
    schemes = {ln.split(",")[0] for ln in text.splitlines()[1:]}
    assert schemes == {"EM", "BBK", "SPV", "SVV", "BAOAB", "OBABO", "rOABAO", "SES"}
    assert text.splitlines()[0] == "scheme,pair,k,distance"


def test_couple_sg_schema(tmp_path):
    code, text = run_cli(tmp_path, "couple", "--scheme", "em", "--target", "blr-synth", "--N", "100", "--d", "3",
                         "--prior-variance", "0.1", "--grad", "sg", "--batch", "20", "--gamma", "30", "--h", "0.001",
                         "--steps", "5", "--replicas", "4")
    assert code == 0 and text.splitlines()[0] == "k,mean_sq_distance,se"


def test_couple_usage_errors(tmp_path, capsys):
    assert main(["couple", "--scheme", "baoab", "--gamma", "1", "--steps", "10"]) == 2
    assert "--h" in capsys.readouterr().err
    assert main(["couple", "--scheme", "nope", "--gamma", "1", "--h", "0.1"]) == 2
    assert "BAOAB" in capsys.readouterr().err
    assert main(["couple", "--scheme", "em", "--gamma", "1", "--h", "-0.1"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["couple", "--bogus"])
    assert exc.value.code == 2


def test_couple_all_divergent(tmp_path):
    code, _ = run_cli(tmp_path, "couple", "--scheme", "em", "--m", "1", "--M", "100", "--gamma", "1", "--h", "1",
                      "--steps", "3000", "--pairs", "2")
    assert code == 3


def test_spectral_grid_and_speed(tmp_path):
    t = time.perf_counter()
    code, text = run_cli(tmp_path, "spectral", "--scheme", "em", *GAUSS, "--h-min", "0.001", "--h-max", "1",
                         "--h-points", "40", "--gamma-min", "0.1", "--gamma-max", "100", "--gamma-points", "40")
    assert time.perf_counter() - t < 5.0
    assert code == 0
    lines = text.splitlines()
    assert lines[0].startswith("gamma,h,value,divergent") and len(lines) == 1601
    hs = sorted({float(ln.split(",")[1]) for ln in lines[1:]})
    np.testing.assert_allclose(np.diff(np.log(hs)), np.log(1000) / 39, rtol=1e-9)


def test_spectral_single_cell(tmp_path):
    code, text = run_cli(tmp_path, "spectral", "--scheme", "obabo", *GAUSS, "--h-min", "0.1", "--h-max", "0.1",
                         "--h-points", "1", "--gamma-min", "3", "--gamma-max", "3", "--gamma-points", "1")
    assert code == 0
    row = dict(zip(text.splitlines()[0].split(","), text.splitlines()[1].split(",")))
    assert float(row["gap"]) == spectral_gap("OBABO", 1.0, 10.0, 0.1, 3.0).gap


def test_spectral_roabao_ci_and_errors(tmp_path):
    code, text = run_cli(tmp_path, "spectral", "--scheme", "roabao", *GAUSS, "--h-min", "0.05", "--h-max", "0.1",
                         "--h-points", "2", "--gamma-min", "5", "--gamma-max", "10", "--gamma-points", "2",
                         "--lyapunov-N", "1000", "--replicas", "2")
    assert code == 0 and text.splitlines()[0].endswith(",ci")
    assert main(["spectral", "--scheme", "em", *GAUSS, "--h-min", "1", "--h-max", "0.1", "--gamma-min", "1",
                 "--gamma-max", "2"]) == 2


def test_certify_exit_codes(tmp_path, capsys):
    g = math.sqrt(120.0) * 1.01
    code, text = run_cli(tmp_path, "certify", "--scheme", "bbk", *GAUSS, "--gamma", repr(g), "--h", repr(1 / (8 * g)))
    assert code == 0
    body = json.loads(text)
    assert body["pass"] and body["min_A"] > 0 and body["min_AC_minus_B2"] > 0 and body["in_region"]
    code, text = run_cli(tmp_path, "certify", "--scheme", "roabao", *GAUSS, "--gamma", "1", "--h", "1")
    assert code == 4 and not json.loads(text)["pass"]
    assert "outside" in capsys.readouterr().err
    assert main(["certify", "--scheme", "svv", *GAUSS, "--gamma", "1", "--h", "0.1"]) == 2
    assert main(["certify", "--scheme", "xyz", *GAUSS, "--gamma", "1", "--h", "0.1"]) == 2


def test_bias_header_and_na(tmp_path):
    code, text = run_cli(tmp_path, "bias", "--scheme", "em,baoab", "--M", "100", "--h", "0.5,0.05", "--gamma", "10",
                         "--iterations", "600", "--burn-in", "100", "--replicas", "2")
    assert code == 0
    lines = text.splitlines()
    assert lines[0] == "scheme,h,gamma,grad,batch,bias,se,ess,grad_evals,status"
    assert any(ln.startswith("EM,0.5,") and ln.endswith("N.A.") for ln in lines)


def test_sample_single_cell(tmp_path):
    code, text = run_cli(tmp_path, "sample", "--scheme", "baoab", "--h", "0.05", "--gamma", "2", "--iterations",
                         "2000", "--burn-in", "200", "--replicas", "4", "--format", "json")
    assert code == 0
    body = json.loads(text)
    assert len(body["rows"]) == 1 and body["reference"]["mean"] == 1.0
    assert main(["sample", "--scheme", "baoab,em", "--h", "0.05", "--gamma", "2"]) == 2


def test_idx_parse_failure(tmp_path, capsys):
    (tmp_path / "img").write_bytes(struct.pack(">I", 0x1234) + b"\0" * 12)
    (tmp_path / "lab").write_bytes(struct.pack(">II", 0x801, 0))
    code = main(["bias", "--scheme", "baoab", "--target", "blr-idx", "--mnist-images", str(tmp_path / "img"),
                 "--mnist-labels", str(tmp_path / "lab"), "--h", "0.01", "--gamma", "1"])
    assert code == 2
    assert "byte offset 0" in capsys.readouterr().err


def test_config_round_trip_and_precedence(tmp_path):
    cfg = ExperimentConfig("couple", {"scheme": "em", "gamma": 20.0, "h": 0.01, "steps": 5, "pairs": 2, "m": 1.0,
                                      "M": 10.0})
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    code_a, a = run_cli(tmp_path, "couple", "--config", str(path), name="a")
    code_b, b = run_cli(tmp_path, "couple", "--scheme", "em", "--gamma", "20", "--h", "0.01", "--steps", "5",
                        "--pairs", "2", *GAUSS, name="b")
    assert code_a == code_b == 0 and a == b
    over = resolve(["couple", "--config", str(path), "--steps", "7"])
    assert over.options["steps"] == 7 and over.options["gamma"] == 20.0
    path.write_text(json.dumps({"version": 2, "scheme": "em"}))
    assert main(["couple", "--config", str(path)]) == 2
    path.write_text(json.dumps({"version": 1, "scheme": "em", "gama": 1}))
    assert main(["couple", "--config", str(path)]) == 2


def test_number_format_round_trips(tmp_path):
    code, text = run_cli(tmp_path, "couple", "--scheme", "spv", *GAUSS, "--gamma", "20", "--h", "0.01", "--steps",
                         "3", "--pairs", "1")
    for ln in text.splitlines()[1:]:
        v = ln.split(",")[-1]
        assert float(f"{float(v):.17g}") == float(v) and v == f"{float(v):.17g}"
