"""Desk-scale reproduction: train every network into ``artifacts/`` and benchmark.

Each stage is skipped when its output already exists, and inverter training
resumes from its last checkpoint, so the script can be re-run after an
interruption.

    python scripts/run_desk_scale.py [--out artifacts] [--skip-bench]
"""
import argparse
import json
import logging
import time
from pathlib import Path

import torch

from fiberinfer import io
from fiberinfer.evaluation import run_benchmark
from fiberinfer.forward import default_scheme, make_dataset
from fiberinfer.inverter import InverterConfig, load_inverter, train_inverter
from fiberinfer.mdn import MdnConfig, load_mdn, train_mdn
from fiberinfer.pipeline import Models

TEST_SEED = 2024


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="artifacts")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--skip-bench", action="store_true")
    ap.add_argument("--test-size", type=int, default=5000)
    ap.add_argument("--nlls-records", type=int, default=200)
    ap.add_argument("--misspec-size", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scheme = default_scheme()
    times_path = out / "desk_scale_times.json"
    times = io.read_json(times_path) if times_path.exists() else {}

    cfg = InverterConfig()
    ckpt = out / "inverter.ckpt"
    done = ckpt.exists() and io.read_meta(ckpt).get("iteration", 0) >= cfg.iterations
    if not done:
        t0 = time.perf_counter()
        train_inverter(cfg, out, scheme)
        times["inverter_train_s"] = times.get("inverter_train_s", 0.0) + time.perf_counter() - t0
        io.write_json(times_path, times)

    for n in (1, 2, 3):
        if (out / f"mdn_n{n}.ckpt").exists():
            continue
        t0 = time.perf_counter()
        train_mdn(n, MdnConfig(), out, scheme)
        times[f"mdn_n{n}_train_s"] = time.perf_counter() - t0
        io.write_json(times_path, times)

    if args.skip_bench:
        return
    models = Models(load_inverter(ckpt), {n: load_mdn(out / f"mdn_n{n}.ckpt") for n in (1, 2, 3)})
    t0 = time.perf_counter()
    ds = make_dataset(args.test_size, scheme, rng_seed=TEST_SEED)
    summary = run_benchmark(
        ds,
        ["lfi", "mle1", "mle2", "prior_mean"],
        out / "bench",
        models,
        nlls_records=args.nlls_records,
        misspec_size=args.misspec_size,
    )
    times["bench_s"] = time.perf_counter() - t0
    io.write_json(times_path, times)
    print(json.dumps({k: v for k, v in summary.items() if ".n1." in k or k.endswith("pcp")}, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
