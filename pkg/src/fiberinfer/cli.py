"""``fiberinfer`` command line: simulate, train, infer, evaluate, bench.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(missing or mismatched artifacts, unreadable input), 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, RunConfig, resolve

log = logging.getLogger("fiberinfer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _scheme(cfg: RunConfig):
    from .forward import AcquisitionScheme, default_scheme

    if not cfg.scheme:
        return default_scheme()
    try:
        return AcquisitionScheme.from_gradient_table(cfg.scheme)
    except OSError as e:
        raise DataError(f"cannot read scheme {cfg.scheme}: {e}") from e
    except ValueError as e:
        raise DataError(f"invalid scheme {cfg.scheme}: {e}") from e


def _load_dataset(path):
    from .io import load_dataset

    if not path:
        raise UsageError("--dataset is required")
    if not Path(path).exists():
        raise DataError(f"dataset not found: {path}")
    return load_dataset(path)


def load_models(models_dir, scheme_hash: str | None = None, ns=(1, 2, 3)):
    """Load ``inverter.ckpt`` and ``mdn_n{n}.ckpt`` from a directory, checking scheme hashes."""
    from .inverter import load_inverter
    from .mdn import load_mdn
    from .pipeline import Models

    d = Path(models_dir)
    needed = [d / "inverter.ckpt"] + [d / f"mdn_n{n}.ckpt" for n in ns]
    missing = [str(p) for p in needed if not p.exists()]
    if missing:
        raise DataError("missing model checkpoint(s): " + ", ".join(missing))
    inv, meta, _ = load_inverter(needed[0], with_state=True)
    mdns = {n: load_mdn(d / f"mdn_n{n}.ckpt") for n in ns}
    if scheme_hash is not None:
        for name, h in [("inverter", meta.get("scheme_hash"))] + [(f"mdn_n{n}", m.meta.get("scheme_hash")) for n, m in mdns.items()]:
            if h is not None and h != scheme_hash:
                raise DataError(f"{name} checkpoint was trained on a different acquisition scheme ({h[:12]} != {scheme_hash[:12]})")
    return Models(inv, mdns)


def model_hashes(models_dir, ns=(1, 2, 3)) -> dict:
    d = Path(models_dir)
    return {p: io.file_sha256(d / p) for p in ["inverter.ckpt"] + [f"mdn_n{n}.ckpt" for n in ns]}


def _sigma(cfg: RunConfig) -> float:
    from .pipeline import estimate_sigma

    if not cfg.b0:
        return cfg.sigma_e
    try:
        b0 = np.loadtxt(cfg.b0, ndmin=2)
    except OSError as e:
        raise DataError(f"cannot read b0 file {cfg.b0}: {e}") from e
    return estimate_sigma(b0)


def _valid_jsonl(path) -> list[dict]:
    """Complete records of a JSON-lines file; a torn trailing line is dropped from disk."""
    p = Path(path)
    if not p.exists():
        return []
    good, keep = [], []
    for line in p.read_text().splitlines(keepends=True):
        if not line.endswith("\n"):
            break
        try:
            good.append(json.loads(line))
        except json.JSONDecodeError:
            break
        keep.append(line)
    text = "".join(keep)
    if text != p.read_text():
        p.write_text(text)
    return good


def csv_rows_from_record(rec: dict) -> list[list]:
    from .forward import PARAM_NAMES, PARAM_SUPPORT

    idx, k = rec["index"], rec["n_hat"]
    if k == 0:
        return [[idx, -1, 0] + [""] * (5 + 3 * len(PARAM_NAMES))]
    rows = []
    for i in range(k):
        row = [idx, i, k, *rec["orientations"][i]]
        row += [rec["dr"][i] if rec["dr"] else "", "" if not rec["ad"] or rec["ad"][i] is None else rec["ad"][i]]
        row += list(rec["pm"][i]) + list(rec["map"][i])
        for p in PARAM_NAMES:
            lo, hi = PARAM_SUPPORT[p]
            row.append(round(sum(b - a for a, b in rec["hdr"][i][p]["intervals"]) / (hi - lo), 6))
        rows.append(row)
    return rows


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out_path: str) -> dict:
    """Simulate a dataset to ``out_path`` (container + manifest)."""
    from .forward import make_dataset

    scheme = _scheme(cfg)
    n_dist = cfg.n_fibers if cfg.n_fibers else None
    kappa = cfg.kappa if cfg.kappa > 0 else None
    ds = make_dataset(cfg.n_samples, scheme, cfg.sigma_e, n_dist, cfg.seed, kappa)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    try:
        man = io.save_dataset(out_path, ds)
    except OSError as e:
        raise DataError(f"cannot write {out_path}: {e}") from e
    log.info("wrote %d records to %s (%s)", len(ds), out_path, man["sha256"][:12])
    return man


def cmd_train(cfg: RunConfig, which: str, n: int | None = None, resume: bool = True):
    from .inverter import InverterConfig, train_inverter
    from .mdn import MdnConfig, train_mdn

    scheme = _scheme(cfg)
    out = Path(cfg.out)
    if which == "inverter":
        icfg = InverterConfig(
            iterations=cfg.iterations,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            lr_schedule=cfg.lr_schedule,
            seed=cfg.seed,
            sigma_e=cfg.sigma_e,
            checkpoint_every=cfg.checkpoint_every,
        )
        res = train_inverter(icfg, out, scheme, resume=resume)
        return res
    if which == "mdn":
        if n is None:
            raise UsageError("train mdn requires --n {1,2,3}")
        if n not in (1, 2, 3):
            raise UsageError("--n must be 1, 2 or 3")
        mcfg = MdnConfig(
            n_records=cfg.mdn_records,
            sigma_e=cfg.sigma_e,
            seed=cfg.seed,
            epochs=cfg.mdn_epochs,
            batch_size=cfg.mdn_batch_size,
            lr=cfg.mdn_lr,
            weight_decay=cfg.mdn_weight_decay,
        )
        return train_mdn(n, mcfg, out, scheme)
    raise UsageError(f"unknown training target {which!r}")


def cmd_infer(cfg: RunConfig) -> dict:
    """Stream dataset voxels through the full pipeline into ``<out>.jsonl`` and ``<out>.csv``.

    Completed voxel indices already present in the JSON-lines file are skipped,
    so an interrupted run resumes where it stopped.
    """
    from .pipeline import CSV_COLUMNS, infer_voxel

    ds = _load_dataset(cfg.dataset)
    scheme = ds.scheme
    models = load_models(cfg.models, scheme.digest())
    sigma = _sigma(cfg)
    stem = Path(cfg.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    jsonl, timings = stem.with_suffix(".jsonl"), stem.with_suffix(".timings.jsonl")
    done = {int(r["index"]) for r in _valid_jsonl(jsonl)}
    _valid_jsonl(timings)
    if done:
        log.info("resuming: %d of %d voxels already done", len(done), len(ds))
    t_start = time.perf_counter()
    with open(jsonl, "a") as fj, open(timings, "a") as ft:
        for i in range(len(ds)):
            if i in done:
                continue
            res = infer_voxel(ds.signals[i], scheme, models, sigma, cfg.Q, cfg.B, [cfg.seed, i], cfg.alpha, cfg.n_bins)
            fj.write(json.dumps(res.to_dict(i), sort_keys=True, separators=(",", ":")) + "\n")
            fj.flush()
            ft.write(json.dumps({"index": i, **res.to_dict(timings=True)["timings_ms"]}, sort_keys=True) + "\n")
            ft.flush()
            if (i + 1) % 100 == 0:
                log.info("inferred %d/%d voxels", i + 1, len(ds))
    records = sorted(_valid_jsonl(jsonl), key=lambda r: r["index"])
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerows(csv_rows_from_record(rec))
    ds_sha = io.file_sha256(cfg.dataset)
    mh = model_hashes(cfg.models)
    out_sha = io.file_sha256(jsonl)
    man = {
        "dataset": str(cfg.dataset),
        "dataset_sha256": ds_sha,
        "models": mh,
        "sigma_e": sigma,
        "Q": cfg.Q,
        "B": cfg.B,
        "alpha": cfg.alpha,
        "seed": cfg.seed,
        "n_records": len(records),
        "sha256": out_sha,
        "chain": io.chain_hash(scheme.digest(), ds_sha, *mh.values(), out_sha),
    }
    io.write_json(stem.with_suffix(".manifest.json"), man)
    log.info("inference done in %.1f s", time.perf_counter() - t_start)
    return man


def _timing_summary(path) -> dict:
    p = Path(path)
    if not p.exists():
        return {}
    rows = [json.loads(l) for l in p.read_text().splitlines() if l.strip()]
    if not rows:
        return {}
    keys = [k for k in rows[0] if k != "index"]
    out = {k: float(np.mean([r.get(k, 0.0) for r in rows])) for k in keys}
    out["total"] = float(sum(out.values()))
    return out


def cmd_evaluate(cfg: RunConfig) -> dict:
    """Metric tables from an inference output and its ground-truth dataset."""
    from .evaluation import results_from_records, run_benchmark

    ds = _load_dataset(cfg.dataset)
    lfi = None
    methods = cfg.method_list
    if "lfi" in methods:
        if not cfg.inference:
            raise UsageError("--inference is required when evaluating lfi")
        stem = Path(cfg.inference)
        man_path = stem.with_suffix(".manifest.json")
        if not man_path.exists():
            raise DataError(f"inference manifest not found: {man_path}")
        man = io.read_json(man_path)
        if man["dataset_sha256"] != io.file_sha256(cfg.dataset):
            raise DataError("inference output was produced from a different dataset (manifest hash mismatch)")
        if man["sha256"] != io.file_sha256(stem.with_suffix(".jsonl")):
            raise DataError("inference output does not match its manifest")
        records = io.read_jsonl(stem.with_suffix(".jsonl"))
        lfi = results_from_records(records, ds, _timing_summary(stem.with_suffix(".timings.jsonl")))
    summary = run_benchmark(
        ds,
        methods,
        cfg.out,
        sigma_e=cfg.sigma_e,
        seed=cfg.seed,
        nlls_records=cfg.nlls_records,
        prior_draws=cfg.prior_draws,
        lfi_results=lfi,
    )
    summary["chain"] = io.chain_hash(ds.scheme.digest(), io.file_sha256(cfg.dataset), json.dumps(summary, sort_keys=True))
    io.write_json(Path(cfg.out) / "summary.json", summary)
    return summary


def cmd_bench(cfg: RunConfig) -> dict:
    """Simulate a fresh test set and run every configured method, without bootstrap."""
    from .evaluation import run_benchmark
    from .forward import make_dataset

    scheme = _scheme(cfg)
    ds = make_dataset(cfg.n_samples, scheme, cfg.sigma_e, cfg.n_fibers or None, cfg.seed)
    models = load_models(cfg.models, scheme.digest()) if "lfi" in cfg.method_list else None
    t0 = time.perf_counter()
    summary = run_benchmark(
        ds,
        cfg.method_list,
        cfg.out,
        models,
        cfg.sigma_e,
        cfg.Q,
        cfg.seed,
        cfg.nlls_records,
        misspec_size=cfg.misspec_size,
        prior_draws=cfg.prior_draws,
    )
    summary["wall_time_s"] = time.perf_counter() - t0
    io.write_json(Path(cfg.out) / "summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_args(p):
    p.add_argument("--config", help="key = value config file")
    for f in fields(RunConfig):
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fiberinfer", description="Simulation-based multi-fiber diffusion MRI inference.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("simulate", help="simulate a labelled dataset")
    _add_config_args(p)
    p = sub.add_parser("train", help="train the orientation inverter or a posterior network")
    p.add_argument("which", choices=["inverter", "mdn"])
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--no-resume", action="store_true")
    _add_config_args(p)
    p = sub.add_parser("infer", help="run per-voxel inference on a dataset")
    _add_config_args(p)
    p = sub.add_parser("evaluate", help="metric tables from inference output and ground truth")
    _add_config_args(p)
    p = sub.add_parser("bench", help="simulate a test set and benchmark all methods")
    _add_config_args(p)
    return parser


def _run(argv) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    cli = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    if args.command == "simulate" and cli["out"] is None:
        raise UsageError("simulate requires --out PATH")
    cfg = resolve(cli, args.config)
    os.environ.setdefault("OMP_NUM_THREADS", str(cfg.threads))
    import torch

    torch.set_num_threads(cfg.threads)
    if args.command == "simulate":
        cmd_simulate(cfg, cfg.out)
    elif args.command == "train":
        cmd_train(cfg, args.which, args.n, resume=not args.no_resume)
    elif args.command == "infer":
        cmd_infer(cfg)
    elif args.command == "evaluate":
        print(json.dumps(cmd_evaluate(cfg), indent=1, sort_keys=True))
    elif args.command == "bench":
        print(json.dumps(cmd_bench(cfg), indent=1, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    from .forward import QuadratureError, SamplingError
    from .inverter import DivergenceError
    from .mdn import DegeneratePosteriorError

    try:
        return _run(sys.argv[1:] if argv is None else argv)
    except (UsageError, ConfigError) as e:
        print(f"fiberinfer: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"fiberinfer: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, SamplingError, QuadratureError, DegeneratePosteriorError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"fiberinfer: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
