"""Acceptance suite: one test per criterion, each reporting one PASS/FAIL line.

Criteria that need trained networks read them from ``artifacts/`` (override
with ``FIBERINFER_ARTIFACTS``); produce them with
``python scripts/run_desk_scale.py --skip-bench``.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from fiberinfer import io
from fiberinfer.cli import main as cli_main
from fiberinfer.demix import GRID, centered_kernel, demix, eval_curves
from fiberinfer.evaluation import (
    angular_error,
    axial_angle_deg,
    ecp,
    kernel_error_bias,
    mean_hdr_size,
    nlls_fit,
    pcp,
    prior_mean_result,
    run_lfi,
    run_nlls,
)
from fiberinfer.forward import (
    FiberConfig,
    add_noise,
    forward_signal,
    forward_signal_watson,
    make_dataset,
    sample_batch,
    sample_config,
)
from fiberinfer.inverter import InverterArch, InverterConfig, SpectralNet, load_inverter, signal_coeffs, train_inverter
from fiberinfer.mdn import MdnArch, MdnConfig, load_mdn, train_mdn
from fiberinfer.pipeline import Models, hdr
from fiberinfer.sphere import ShBasis, default_mesh, fit_signal, n_coeffs, odf_projector, peak_detect_batch, real_sh, sh_rotation

from conftest import ACCEPTANCE, random_rotation

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = Path(os.environ.get("FIBERINFER_ARTIFACTS", ROOT / "artifacts"))
SIGMA = 0.0620
TEST_SEED = 2024  # the 5000-record test set, as in scripts/run_desk_scale.py
N1_SEED = 2025
MISSPEC_SEED = 2026


def report(no, title, checks, detail=""):
    """Record one summary line and fail unless every check holds."""
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {no:>2}: {title}"
    if detail:
        line += f" | {detail}"
    if failed:
        line += f" | failed: {', '.join(failed)}"
    ACCEPTANCE.append(line)
    assert ok, line


# ---------------------------------------------------------------- shared fixtures


@pytest.fixture(scope="module")
def models(scheme):
    files = [ARTIFACTS / "inverter.ckpt"] + [ARTIFACTS / f"mdn_n{n}.ckpt" for n in (1, 2, 3)]
    missing = [f.name for f in files if not f.exists()]
    if missing:
        ACCEPTANCE.append(f"[FAIL] trained models missing in {ARTIFACTS}: {', '.join(missing)}")
        pytest.fail(f"trained models missing ({', '.join(missing)}); run scripts/run_desk_scale.py --skip-bench")
    net = load_inverter(files[0])
    return Models(net, {n: load_mdn(files[n]) for n in (1, 2, 3)})


@pytest.fixture(scope="module")
def test_set(scheme):
    return make_dataset(5000, scheme, SIGMA, rng_seed=TEST_SEED)


@pytest.fixture(scope="module")
def lfi_test(models, test_set):
    t0 = time.perf_counter()
    pm, mp = run_lfi(models, test_set, SIGMA, Q=5000, seed=0)
    return pm, mp, time.perf_counter() - t0


@pytest.fixture(scope="module")
def n1_set(scheme):
    return make_dataset(2000, scheme, SIGMA, 1, rng_seed=N1_SEED)


@pytest.fixture(scope="module")
def lfi_n1(models, n1_set):
    return run_lfi(models, n1_set, SIGMA, Q=5000, seed=1)


# ---------------------------------------------------------------- 1. forward model


def test_c01_watson_limit(scheme):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 4))
        cfg = sample_config(n, rng)
        wcfg = FiberConfig(cfg.orientations, cfg.kernels, [1e4] * n)
        diff = np.abs(forward_signal_watson(wcfg, scheme).values - forward_signal(cfg, scheme).values)
        worst = max(worst, diff.max())
    dt = time.perf_counter() - t0
    report(1, "forward model vs Watson kappa=1e4", {"max_err<1e-3": worst < 1e-3, "runtime<60s": dt < 60}, f"max err {worst:.2e}, {dt:.1f} s")


# ---------------------------------------------------------------- 2. SH exactness


def test_c02_sh_exactness(scheme):
    rng = np.random.default_rng(102)
    worst = 0.0
    for degree in (2, 4, 6, 8):
        b = ShBasis(degree)
        c = rng.standard_normal((2, b.K))
        sig = np.concatenate([c[j] @ b(scheme.directions[l]).T for j, l in enumerate(scheme.diffusion_shells())])
        worst = max(worst, np.abs(fit_signal(sig, b, 0.0, scheme).coeffs - c).max())
    mesh = default_mesh()
    Phi = real_sh(mesh.vertices, 20)
    gram = np.abs(Phi.T @ (mesh.weights[:, None] * Phi) - np.eye(Phi.shape[1])).max()
    eq = np.abs(4 * np.pi / mesh.V * Phi.T @ Phi - np.eye(Phi.shape[1])).max()
    report(
        2,
        "SH fit exactness and Gram orthonormality",
        {"fit<1e-8": worst < 1e-8, "gram<1e-4": gram < 1e-4, "V=10242": mesh.V == 10242},
        f"fit err {worst:.1e}, weighted Gram dev {gram:.1e} (equal-weight dev {eq:.1e})",
    )


# ---------------------------------------------------------------- 3. equivariance


def _top_peaks(net, x, mesh):
    c = net(torch.as_tensor(x, dtype=next(net.parameters()).dtype)).double().detach().numpy()
    _, phi = odf_projector(mesh, net.arch.degree_out)
    peaks = peak_detect_batch(np.maximum(c @ phi.T, 0.0), mesh)
    return [p[0][0] if p else None for p in peaks]


def test_c03_equivariance(scheme, models, test_set):
    rng = np.random.default_rng(103)
    # spectral layers alone, nonlinearities off, random weights
    lin = SpectralNet(InverterArch(nonlinearity=False), dtype=torch.float64)
    x = rng.standard_normal((4, 2, n_coeffs(8)))
    layer_err = 0.0
    with torch.no_grad():
        for _ in range(10):
            R = random_rotation(rng)
            D_in, D_out = sh_rotation(R, 8), sh_rotation(R, 20)
            a = lin(torch.as_tensor(np.einsum("jk,blk->blj", D_in, x))).numpy()
            b = lin(torch.as_tensor(x)).numpy() @ D_out.T
            layer_err = max(layer_err, np.abs(a - b).max() / max(1.0, np.abs(b).max()))
    # trained network: rotate the fitted input coefficients, compare main peaks
    net = models.inverter
    mesh = models.mesh
    one = np.flatnonzero(test_set.n == 1)[:100]
    xs = signal_coeffs(test_set.signals[one], scheme, net.arch.degree_in, models.fit_lambda)
    disp = []
    with torch.no_grad():
        base = _top_peaks(net, xs, mesh)
        for k in range(100):
            R = random_rotation(rng)
            D = sh_rotation(R, net.arch.degree_in)
            rot = _top_peaks(net, np.einsum("jk,blk->blj", D, xs[k : k + 1]), mesh)[0]
            if base[k] is None or rot is None:
                disp.append(90.0)
                continue
            disp.append(float(axial_angle_deg(R @ base[k], rot)))
    med = float(np.median(disp))
    report(
        3,
        "rotation equivariance",
        {"layers<=1e-10": layer_err <= 1e-10, "median_disp<2deg": med < 2.0},
        f"layer err {layer_err:.1e}, trained-net median peak displacement {med:.2f} deg (max {max(disp):.2f})",
    )


# ---------------------------------------------------------------- 4. demixer


def test_c04_demixer_oracle(scheme):
    rng = np.random.default_rng(104)
    rmse = lambda a, b: float(np.sqrt(np.mean((a - b) ** 2)))
    r1 = r2 = resid = 0.0
    for _ in range(20):
        k = sample_batch(1, 1, rng)[1][0]
        m = rng.standard_normal(3)
        m /= np.linalg.norm(m)
        curves, _, _ = demix(forward_signal(FiberConfig(m, k), scheme), scheme, m[None])
        for j, l in enumerate(curves.shells):
            r1 = max(r1, rmse(curves.values[0, j], centered_kernel(GRID, scheme.bvals[l], k[0])))
    for _ in range(20):
        k = sample_batch(2, 1, rng)[1][0]
        m1 = rng.standard_normal(3)
        m1 /= np.linalg.norm(m1)
        m2 = np.cross(m1, rng.standard_normal(3))
        m = np.stack([m1, m2 / np.linalg.norm(m2)])
        curves, _, _ = demix(forward_signal(FiberConfig(m, k), scheme), scheme, m)
        for i in range(2):
            for j, l in enumerate(curves.shells):
                r2 = max(r2, rmse(curves.values[i, j], centered_kernel(GRID, scheme.bvals[l], k[i])))
    fine = np.linspace(0, 1, 1000)
    monotone = True
    for trial in range(100):
        n = 1 + trial % 3
        m, k = sample_batch(n, 1, rng)
        s = add_noise(forward_signal(FiberConfig(m[0], k[0]), scheme), SIGMA, rng)
        _, coeffs, diag = demix(s, scheme, m[0])
        resid = max(resid, diag.constraint_residual.max())
        monotone &= bool(np.all(np.diff(eval_curves(coeffs, fine).values, axis=-1) <= 1e-12))
    report(
        4,
        "demixer oracle",
        {"n1<5e-3": r1 < 5e-3, "n2<1e-2": r2 < 1e-2, "residual<1e-8": resid < 1e-8, "monotone": monotone},
        f"worst RMSE n=1 {r1:.1e}, n=2 {r2:.1e}; constraint residual {resid:.1e}",
    )


# ---------------------------------------------------------------- 5. orientation accuracy


def test_c05_orientation_accuracy(test_set, lfi_test):
    pm, _, eval_s = lfi_test
    m1, m2 = test_set.n == 1, test_set.n == 2
    p1, p2 = pcp(test_set.n[m1], pm.n_hat[m1]), pcp(test_set.n[m2], pm.n_hat[m2])
    ae1 = angular_error(test_set, pm, m1)
    times = io.read_json(ARTIFACTS / "desk_scale_times.json") if (ARTIFACTS / "desk_scale_times.json").exists() else {}
    train_s = sum(v for k, v in times.items() if k.endswith("_train_s"))
    total_h = (train_s + eval_s) / 3600
    report(
        5,
        "desk-scale orientation accuracy",
        {"pcp1>=0.80": p1 >= 0.80, "ae1<=5deg": ae1 <= 5.0, "pcp2>=0.55": p2 >= 0.55, "timed": bool(times), "wall<=4h": total_h <= 4.0},
        f"PCP1 {p1:.3f}, AE1 {ae1:.2f} deg, PCP2 {p2:.3f}, PCP3 {pcp(test_set.n[test_set.n == 3], pm.n_hat[test_set.n == 3]):.3f}; "
        f"train {train_s / 3600:.2f} h + eval {eval_s / 3600:.2f} h on {os.cpu_count()} core(s)",
    )


# ---------------------------------------------------------------- 6. kernel accuracy


def test_c06_kernel_accuracy(n1_set, lfi_n1):
    pm, mp = lfi_n1
    mask = n1_set.n == 1
    e_map = kernel_error_bias(n1_set, mp, mask)
    e_pm = kernel_error_bias(n1_set, pm, mask)
    biases = {p: e_pm[p]["bias"] for p in e_pm}
    report(
        6,
        "desk-scale kernel accuracy (n=1)",
        {
            "map_Da<=0.22": e_map["D_a"]["abs_mean"] <= 0.22,
            "map_z1<=0.07": e_map["z1"]["abs_mean"] <= 0.07,
            "pm_bias<=0.05": all(abs(b) <= 0.05 for b in biases.values()),
        },
        "MAP abs err " + ", ".join(f"{p} {v['abs_mean']:.3f}" for p, v in e_map.items())
        + "; PM bias " + ", ".join(f"{p} {b:+.3f}" for p, b in biases.items()),
    )


# ---------------------------------------------------------------- 7. calibration


def test_c07_calibration(n1_set, lfi_n1):
    pm, _ = lfi_n1
    mask = n1_set.n == 1
    cov = ecp(n1_set, pm, mask)
    size = mean_hdr_size(n1_set, pm, mask)
    report(
        7,
        "calibration (n=1, alpha=0.05)",
        {
            "records>=2000": mask.sum() >= 2000,
            "ecp_in_[0.88,0.99]": all(0.88 <= v <= 0.99 for v in cov.values()),
            "hdrs_Depar_in_[0.6,0.9]": 0.6 <= size["D_e_par"] <= 0.9,
            "hdrs_z1<hdrs_Depar": size["z1"] < size["D_e_par"],
        },
        "ECP " + ", ".join(f"{p} {v:.3f}" for p, v in cov.items()) + "; HDR-S " + ", ".join(f"{p} {v:.3f}" for p, v in size.items()),
    )


# ---------------------------------------------------------------- 8. HDR


def test_c08_hdr():
    rng = np.random.default_rng(108)
    g = hdr(rng.standard_normal(100_000), (-5.0, 5.0), 0.05, 200)
    width = g.edges[1] - g.edges[0]
    lo, hi = g.intervals[0]
    gauss_ok = len(g.intervals) == 1 and abs(lo + 1.96) <= width and abs(hi - 1.96) <= width
    x = np.where(rng.random(100_000) < 0.5, -2.0, 2.0) + 0.3 * rng.standard_normal(100_000)
    bi = hdr(x, (-5.0, 5.0), 0.05, 200)
    bimodal_ok = len(bi.intervals) == 2 and not bi.contains(0.0) and bi.intervals[0][1] < bi.intervals[1][0]
    nested = True
    for s in range(20):
        y = np.random.default_rng(s).gamma(2.0, 1.0, 2000)
        sets = [set(hdr(y, (0.0, 15.0), a, 100).bins) for a in (0.01, 0.05, 0.1, 0.3, 0.5)]
        nested &= all(b <= a for a, b in zip(sets[:-1], sets[1:]))
    report(
        8,
        "HDR correctness",
        {"gaussian": gauss_ok, "bimodal": bimodal_ok, "monotone_in_alpha": nested},
        f"Gaussian HDR [{lo:.3f}, {hi:.3f}] (bin {width:.3f}); bimodal {len(bi.intervals)} intervals",
    )


# ---------------------------------------------------------------- 9. baselines


def test_c09_baselines(scheme, test_set, lfi_test):
    one = make_dataset(500, scheme, SIGMA, 1, rng_seed=2027)
    mle1 = run_nlls(one, 1, seed=0, name="mle_1")
    mle2 = run_nlls(one, 50, seed=0, name="mle_2")
    ae1, ae2 = angular_error(one, mle1), angular_error(one, mle2)
    # identifiability replication: known axis, fixed kernel, sigma^2 = 0.004
    m = np.array([[0.0, 0.0, 1.0]])
    k = np.array([[1.0, 2.0, 1.4, 0.3, 0.7]])
    clean = forward_signal(FiberConfig(m, k), scheme)
    err = []
    for i in range(100):
        y = add_noise(clean, np.sqrt(0.004), np.random.SeedSequence([23, i]))
        fit = nlls_fit(y, scheme, 1, 50, np.random.SeedSequence([23, i, 1]), fixed_orientations=m)
        err.append(abs(fit.kernels[0, 1] - 2.0))
    de = float(np.mean(err))
    # speed: amortised orientation step vs one NLLS run on the same records
    pm, _, _ = lfi_test
    sub = test_set.subset(np.arange(len(test_set)) < 60)
    t_nlls = run_nlls(sub, 1, seed=0).time_orientation
    ratio = t_nlls / pm.time_orientation
    report(
        9,
        "baseline direction checks",
        {"mle2_ae<mle1_ae": ae2 < ae1, "Depar_err_in_[0.3,0.45]": 0.3 <= de <= 0.45, "speedup>=100": ratio >= 100},
        f"AE MLE-1 {ae1:.2f} deg, MLE-2 {ae2:.2f} deg; fixed-axis D_e_par abs err {de:.3f}; "
        f"LFI {1e3 * pm.time_orientation:.3f} ms vs NLLS {1e3 * t_nlls:.1f} ms per voxel ({ratio:.0f}x)",
    )


# ---------------------------------------------------------------- 10. prior mean


def test_c10_prior_mean(n1_set, lfi_n1):
    target = {"D_a": 0.703, "D_e_par": 0.700, "D_e_perp": 0.399, "z1": 0.197}
    mask = n1_set.n == 1
    base = kernel_error_bias(n1_set, prior_mean_result(n1_set), mask)
    _, mp = lfi_n1
    ours = kernel_error_bias(n1_set, mp, mask)
    checks = {f"{p}_within_5%": abs(base[p]["abs_mean"] - v) <= 0.05 * v for p, v in target.items()}
    checks["beats_Da"] = ours["D_a"]["abs_mean"] < base["D_a"]["abs_mean"]
    checks["beats_z1"] = ours["z1"]["abs_mean"] < base["z1"]["abs_mean"]
    report(
        10,
        "prior-mean baseline (n=1)",
        checks,
        "prior-mean abs err " + ", ".join(f"{p} {base[p]['abs_mean']:.3f} (target {v})" for p, v in target.items())
        + f"; LFI-MAP D_a {ours['D_a']['abs_mean']:.3f}, z1 {ours['z1']['abs_mean']:.3f}",
    )


# ---------------------------------------------------------------- 11. misspecification


def test_c11_misspecification(scheme, models):
    values = {}
    for kap in (30.0, 20.0, 10.0):
        ds = make_dataset(1000, scheme, SIGMA, 1, rng_seed=MISSPEC_SEED + int(kap), kappa=kap)
        pm, _ = run_lfi(models, ds, SIGMA, Q=5000, seed=2)
        values[kap] = ecp(ds, pm, ds.n == 1)["z1"]
    report(
        11,
        "misspecification trend (z1 ECP)",
        {"monotone_30>20>10": values[30.0] > values[20.0] > values[10.0]},
        "z1 ECP " + " -> ".join(f"kappa {int(k)}: {v:.3f}" for k, v in values.items()),
    )


# ---------------------------------------------------------------- 12. determinism


def test_c12_determinism(tmp_path, scheme, models):
    same = {}
    a, b = (tmp_path / f"{r}.bin" for r in "ab")
    for p in (a, b):
        io.save_dataset(p, make_dataset(200, scheme, rng_seed=12))
    same["dataset"] = a.read_bytes() == b.read_bytes()
    cfg = InverterConfig(iterations=6, batch_size=16, checkpoint_every=3)
    for r in "ab":
        train_inverter(cfg, tmp_path / f"inv_{r}", scheme)
    same["inverter_loss"] = (tmp_path / "inv_a/inverter_loss.csv").read_bytes() == (tmp_path / "inv_b/inverter_loss.csv").read_bytes()
    mcfg = MdnConfig(n_records=300, epochs=2, batch_size=64)
    for r in "ab":
        train_mdn(1, mcfg, tmp_path / f"mdn_{r}", scheme, MdnArch(hidden=32, depth=3))
    same["mdn_loss"] = (tmp_path / "mdn_a/mdn_n1_loss.csv").read_bytes() == (tmp_path / "mdn_b/mdn_n1_loss.csv").read_bytes()
    outs = []
    for r in "ab":
        code = cli_main(["infer", "--dataset", str(a), "--models", str(ARTIFACTS), "--seed", "5", "--Q", "500", "--B", "20", "--out", str(tmp_path / f"inf_{r}")])
        outs.append((code, (tmp_path / f"inf_{r}.jsonl").read_bytes(), (tmp_path / f"inf_{r}.csv").read_bytes()))
    same["inference"] = outs[0][0] == 0 and outs[0] == outs[1]
    report(12, "determinism", same, ", ".join(f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))
