import csv
import json

import numpy as np
import pytest

from fiberinfer import io
from fiberinfer.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from fiberinfer.inverter import save_checkpoint
from fiberinfer.mdn import save_mdn

from conftest import constant_model, tensor_axis_inverter

SMALL = ["--Q", "50", "--B", "5"]


def write_models(d, scheme, mean=(1.5, 2.0, 1.0, 0.5, 0.5)):
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "inverter.ckpt", tensor_axis_inverter(), {"scheme_hash": scheme.digest()})
    for n in (1, 2, 3):
        mu = np.array(mean, float)
        mu[3:] /= n
        m = constant_model([1.0], [mu], [[0.2, 0.3, 0.2, 0.05, 0.05]], n=n, input_dim=200)
        m.meta["scheme_hash"] = scheme.digest()
        save_mdn(d / f"mdn_n{n}.ckpt", m)
    return d


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, scheme):
    root = tmp_path_factory.mktemp("cli")
    write_models(root / "models", scheme)
    assert main(["simulate", "--n-samples", "6", "--seed", "2", "--out", str(root / "data.bin")]) == EXIT_OK
    return root


def test_simulate_deterministic_and_manifest(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--n-samples", "15", "--seed", "9", "--out", str(tmp_path / f"{name}.bin")]) == EXIT_OK
    assert io.file_sha256(tmp_path / "a.bin") == io.file_sha256(tmp_path / "b.bin")
    man = io.read_json(tmp_path / "a.bin.manifest.json")
    assert man["n_samples"] == 15 and man["sigma_e"] == 0.062 and man["seed"] == 9
    assert sum(man["counts_per_n"].values()) == 15


def test_simulate_empty(tmp_path):
    assert main(["simulate", "--n-samples", "0", "--out", str(tmp_path / "e.bin")]) == EXIT_OK
    assert io.read_json(tmp_path / "e.bin.manifest.json")["n_samples"] == 0


def test_usage_errors(tmp_path, capsys):
    assert main(["simulate"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["simulate", "--out", str(tmp_path / "x"), "--alpha", "3"]) == EXIT_USAGE
    assert main(["train", "mdn", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["infer", "--models", str(tmp_path)]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_data_errors(tmp_path, workspace):
    assert main(["infer", "--dataset", str(tmp_path / "missing.bin")]) == EXIT_DATA
    assert main(["infer", "--dataset", str(workspace / "data.bin"), "--models", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["simulate", "--scheme", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "x.bin")]) == EXIT_DATA


def test_scheme_mismatch_detected(tmp_path, workspace):
    table = tmp_path / "grad.txt"
    rows = [[0.0, 0.0, 1.0, 0.0]] + [[*v, 2000.0] for v in np.eye(3)] * 1
    np.savetxt(table, rows)
    assert main(["simulate", "--scheme", str(table), "--n-samples", "2", "--out", str(tmp_path / "d.bin")]) == EXIT_OK
    code = main(["infer", "--dataset", str(tmp_path / "d.bin"), "--models", str(workspace / "models"), "--out", str(tmp_path / "o")])
    assert code == EXIT_DATA


def test_train_inverter_resume_continues_log(tmp_path):
    args = ["train", "inverter", "--batch-size", "4", "--lr-schedule", "constant", "--checkpoint-every", "1", "--out", str(tmp_path)]
    assert main(args + ["--iterations", "2"]) == EXIT_OK
    assert main(args + ["--iterations", "4"]) == EXIT_OK
    rows = list(csv.reader(open(tmp_path / "inverter_loss.csv")))
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]


def test_infer_outputs_and_resume(tmp_path, workspace):
    base = ["infer", "--dataset", str(workspace / "data.bin"), "--models", str(workspace / "models"), "--seed", "1"] + SMALL
    out = tmp_path / "run"
    assert main(base + ["--out", str(out)]) == EXIT_OK
    jl = out.with_suffix(".jsonl")
    full = jl.read_bytes()
    recs = [json.loads(l) for l in full.decode().splitlines()]
    assert [r["index"] for r in recs] == list(range(6))
    assert {"n_hat", "orientations", "dr", "ad", "pm", "map", "hdr", "acceptance", "flag"} <= set(recs[0])
    man = io.read_json(out.with_suffix(".manifest.json"))
    assert man["sha256"] == io.file_sha256(jl) and man["Q"] == 50 and man["B"] == 5
    rows = list(csv.reader(open(out.with_suffix(".csv"))))
    assert rows[0][:3] == ["index", "fiber", "n_hat"] and len(rows) == 1 + sum(max(r["n_hat"], 1) for r in recs)
    # simulate an interruption: two complete lines and a torn third
    lines = full.decode().splitlines(keepends=True)
    jl.write_text("".join(lines[:2]) + lines[2][:17])
    assert main(base + ["--out", str(out)]) == EXIT_OK
    assert jl.read_bytes() == full


def test_infer_numeric_failure(tmp_path, workspace, scheme):
    models = write_models(tmp_path / "bad", scheme, mean=(5.0, 0.1, 4.0, 0.5, 0.5))
    code = main(["infer", "--dataset", str(workspace / "data.bin"), "--models", str(models), "--out", str(tmp_path / "o")] + SMALL)
    assert code == EXIT_NUMERIC


def test_evaluate_tables_and_chain_checks(tmp_path, workspace):
    inf = tmp_path / "inf"
    assert main(["infer", "--dataset", str(workspace / "data.bin"), "--models", str(workspace / "models"), "--out", str(inf)] + SMALL) == EXIT_OK
    ev = tmp_path / "eval"
    args = ["evaluate", "--dataset", str(workspace / "data.bin"), "--inference", str(inf), "--methods", "lfi,prior_mean", "--prior-draws", "10000"]
    assert main(args + ["--out", str(ev)]) == EXIT_OK
    for name in ("table1_orientation", "table2_kernel", "table3_calibration", "timings", "tableS1_prior_mean"):
        assert (ev / f"{name}.csv").exists()
    for method in ("lfi_pm", "lfi_map"):
        for p in ("D_a", "D_e_par", "D_e_perp", "z1", "z2"):
            assert (ev / f"scatter_{method}_{p}.csv").exists()
    t1 = list(csv.reader(open(ev / "table1_orientation.csv")))
    assert "time_ms" in t1[0] and all(float(r[4]) > 0 for r in t1[1:])
    summary = io.read_json(ev / "summary.json")
    assert "chain" in summary and "lfi_pm.n1.pcp" in summary
    # a different dataset must be refused
    other = tmp_path / "other.bin"
    assert main(["simulate", "--n-samples", "6", "--seed", "3", "--out", str(other)]) == EXIT_OK
    assert main(["evaluate", "--dataset", str(other), "--inference", str(inf), "--methods", "lfi", "--out", str(ev)]) == EXIT_DATA
    # as must a tampered inference file
    jl = inf.with_suffix(".jsonl")
    jl.write_text(jl.read_text().replace('"flag":""', '"flag":"x"', 1))
    assert main(args + ["--out", str(ev)]) == EXIT_DATA


def test_bench_baselines_only(tmp_path):
    code = main(["bench", "--n-samples", "6", "--methods", "mle1,prior_mean", "--nlls-records", "3", "--prior-draws", "10000", "--out", str(tmp_path)])
    assert code == EXIT_OK
    summary = io.read_json(tmp_path / "summary.json")
    assert "mle_1.n1.pcp" in summary or "mle_1.n2.pcp" in summary or "mle_1.n3.pcp" in summary
