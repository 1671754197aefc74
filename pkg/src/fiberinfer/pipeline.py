"""End-to-end per-voxel inference with bootstrap and HDR uncertainty summaries."""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from .demix import demix
from .forward import PARAM_NAMES, PARAM_SUPPORT, AcquisitionScheme, SignalSet
from .inverter import SpectralNet, odf_coeffs, signal_coeffs
from .mdn import MdnModel, map_estimate, posterior_mean, sample_posterior
from .sphere import FIT_LAMBDA, SphericalMesh, default_mesh, odf_projector, peak_detect_batch, real_sh

log = logging.getLogger(__name__)

BOOTSTRAP_MAX_DEG = 45.0


# --------------------------------------------------------------------------
# noise level
# --------------------------------------------------------------------------


def estimate_sigma(b0_images) -> float:
    """Noise std from repeated b=0 measurements (voxels x repeats).

    Each voxel is normalised by its mean; the per-voxel sample variances of
    the normalised values are averaged and the square root returned.
    """
    b0 = np.atleast_2d(np.asarray(b0_images, dtype=float))
    if b0.shape[1] < 2:
        raise ValueError("need at least two b=0 repeats per voxel")
    mean = b0.mean(axis=1)
    good = mean > 0
    if not np.all(good):
        warnings.warn(f"excluding {np.sum(~good)} voxels with non-positive mean b=0 signal", RuntimeWarning, stacklevel=2)
    if not np.any(good):
        raise ValueError("no voxel has a positive mean b=0 signal")
    z = b0[good] / mean[good, None]
    return float(np.sqrt(np.mean(z.var(axis=1, ddof=1))))


# --------------------------------------------------------------------------
# orientation uncertainty
# --------------------------------------------------------------------------


def dr_ad(estimate, members, B: int) -> tuple[float, float | None]:
    """Detection rate ``|M|/B`` and angular dispersion ``asin(sqrt(1 - lambda_max))``."""
    members = np.asarray(members, dtype=float).reshape(-1, 3)
    if B < 1:
        raise ValueError("B must be >= 1")
    if members.shape[0] == 0:
        return 0.0, None
    T = members.T @ members / members.shape[0]
    lam = float(np.linalg.eigvalsh(T)[-1])
    return members.shape[0] / B, float(np.arcsin(np.sqrt(np.clip(1.0 - lam, 0.0, 1.0))))


def classify_bootstrap(estimates, replicate_peaks, max_deg: float = BOOTSTRAP_MAX_DEG):
    """Assign each replicate's peaks to the estimated axes.

    Per replicate the assignment of peaks to distinct estimates minimising the
    total axial angle is chosen; pairs farther than ``max_deg`` and surplus
    peaks are discarded. Returns one list of unit vectors per estimate.
    """
    est = np.asarray(estimates, dtype=float).reshape(-1, 3)
    k = est.shape[0]
    groups = [[] for _ in range(k)]
    for peaks in replicate_peaks:
        if not peaks:
            continue
        P = np.array([p[0] for p in peaks])
        ang = np.degrees(np.arccos(np.clip(np.abs(P @ est.T), 0.0, 1.0)))  # (n_b, k)
        nb = P.shape[0]
        best, best_cost = None, np.inf
        # choose which estimate each of the first min(nb, k) matched peaks takes
        for est_perm in permutations(range(k), min(nb, k)):
            for peak_perm in permutations(range(nb), len(est_perm)):
                cost = sum(ang[p, e] for p, e in zip(peak_perm, est_perm))
                if cost < best_cost - 1e-12:
                    best, best_cost = list(zip(peak_perm, est_perm)), cost
        for p, e in best:
            if ang[p, e] <= max_deg:
                v = P[p] if P[p] @ est[e] >= 0 else -P[p]
                groups[e].append(v)
    return groups


# --------------------------------------------------------------------------
# highest density regions
# --------------------------------------------------------------------------


@dataclass
class HdrSet:
    intervals: list
    edges: np.ndarray
    bins: np.ndarray  # selected bin indices, in selection order
    alpha: float
    mass: float
    support: tuple

    def contains(self, x) -> bool:
        return any(lo <= x <= hi for lo, hi in self.intervals)

    def to_dict(self) -> dict:
        return {"intervals": [[round(float(a), 10), round(float(b), 10)] for a, b in self.intervals], "mass": float(self.mass), "alpha": float(self.alpha)}


def hdr(samples, support, alpha: float = 0.05, n_bins: int = 100) -> HdrSet:
    """Histogram highest density region.

    Bins are ranked by count (ties: lower index first) and the shortest prefix
    with mass at least ``1 - alpha`` is kept and merged into intervals.
    """
    x = np.asarray(samples, dtype=float).reshape(-1)
    lo, hi = float(support[0]), float(support[1])
    if x.size < 1 or n_bins < 2 or not hi > lo:
        raise ValueError("need samples, n_bins >= 2 and a non-empty support")
    if np.any((x < lo) | (x > hi)):
        warnings.warn("samples outside support were clipped", RuntimeWarning, stacklevel=2)
        x = np.clip(x, lo, hi)
    edges = np.linspace(lo, hi, n_bins + 1)
    counts, _ = np.histogram(x, bins=edges)
    order = np.lexsort((np.arange(n_bins), -counts))
    cum = np.cumsum(counts[order])
    need = (1.0 - alpha) * x.size
    k = int(np.searchsorted(cum, need - 1e-9 * x.size, side="left")) + 1
    k = min(k, n_bins)
    chosen = order[:k]
    sel = np.zeros(n_bins, dtype=bool)
    sel[chosen] = True
    intervals, i = [], 0
    while i < n_bins:
        if sel[i]:
            j = i
            while j + 1 < n_bins and sel[j + 1]:
                j += 1
            intervals.append((edges[i], edges[j + 1]))
            i = j + 1
        else:
            i += 1
    return HdrSet(intervals, edges, chosen, alpha, float(cum[k - 1]) / x.size, (lo, hi))


def hdr_size(region: HdrSet) -> float:
    lo, hi = region.support
    return float(sum(b - a for a, b in region.intervals) / (hi - lo))


# --------------------------------------------------------------------------
# models and per-voxel inference
# --------------------------------------------------------------------------


@dataclass(eq=False)
class Models:
    inverter: SpectralNet
    mdn: dict  # n -> MdnModel
    mesh: SphericalMesh = field(default_factory=default_mesh)
    fit_lambda: float = FIT_LAMBDA

    def mdn_for(self, n: int) -> MdnModel:
        if n not in self.mdn:
            raise KeyError(f"no posterior model for n={n}")
        return self.mdn[n]


@dataclass
class VoxelInference:
    n_hat: int
    orientations: np.ndarray
    dr: list = field(default_factory=list)
    ad: list = field(default_factory=list)
    samples: np.ndarray | None = None
    acceptance: list = field(default_factory=list)
    hdr: list = field(default_factory=list)  # per fiber: {param: HdrSet}
    pm: np.ndarray | None = None
    map: np.ndarray | None = None
    timings: dict = field(default_factory=dict)
    flag: str = ""

    def to_dict(self, index: int | None = None, timings: bool = False) -> dict:
        """JSON-ready record; wall-clock timings only when asked (they break byte reproducibility)."""
        d = {
            "n_hat": int(self.n_hat),
            "orientations": np.round(self.orientations, 10).tolist(),
            "dr": [float(x) for x in self.dr],
            "ad": [None if x is None else float(x) for x in self.ad],
            "pm": None if self.pm is None else np.round(self.pm, 10).tolist(),
            "map": None if self.map is None else np.round(self.map, 10).tolist(),
            "hdr": [{p: h.to_dict() for p, h in f.items()} for f in self.hdr],
            "acceptance": [float(a) for a in self.acceptance],
            "flag": self.flag,
        }
        if timings:
            d["timings_ms"] = {k: round(1e3 * v, 3) for k, v in self.timings.items()}
        if index is not None:
            d = {"index": int(index), **d}
        return d


def _odf_peaks(models: Models, coeffs, rel_threshold=0.5, min_sep=10.0):
    c = odf_coeffs(models.inverter, coeffs)
    _, phi = odf_projector(models.mesh, models.inverter.arch.degree_out)
    phi_h = phi[models.mesh.hemisphere]
    return peak_detect_batch(np.maximum(c @ phi_h.T, 0.0), models.mesh, rel_threshold, min_sep)


def infer_voxel(
    signals,
    scheme: AcquisitionScheme,
    models: Models,
    sigma_e: float,
    Q: int = 5000,
    B: int = 1000,
    rng_seed=0,
    alpha: float = 0.05,
    n_bins: int = 100,
) -> VoxelInference:
    """Orientation estimate, bootstrap DR/AD, posterior samples, HDRs, PM and MAP for one voxel."""
    y = np.asarray(signals.values if isinstance(signals, SignalSet) else signals, dtype=float)
    ss = np.random.SeedSequence(rng_seed if isinstance(rng_seed, (list, tuple)) else [int(rng_seed)])
    boot_seed, post_seed = ss.spawn(2)
    t = {}
    t0 = time.perf_counter()
    deg_in = models.inverter.arch.degree_in
    x = signal_coeffs(y[None], scheme, deg_in, models.fit_lambda)
    peaks = _odf_peaks(models, x)[0]
    t["orientation"] = time.perf_counter() - t0
    if not peaks:
        return VoxelInference(0, np.zeros((0, 3)), timings=t, flag="no fibers detected")
    m_hat = np.array([p[0] for p in peaks])
    n_hat = m_hat.shape[0]

    # parametric bootstrap about the smooth fitted signal
    t0 = time.perf_counter()
    dr, ad = [], []
    if B > 0:
        rng = np.random.default_rng(boot_seed)
        full = np.zeros((B, scheme.n_measurements))
        for j, l in enumerate(scheme.diffusion_shells()):
            smooth = real_sh(scheme.directions[l], deg_in) @ x[0, j]
            sl = scheme.shell_slices[l]
            full[:, sl] = smooth[None, :] + sigma_e * rng.standard_normal((B, smooth.size))
        rep_peaks = _odf_peaks(models, signal_coeffs(full, scheme, deg_in, models.fit_lambda))
        groups = classify_bootstrap(m_hat, rep_peaks)
        for i in range(n_hat):
            d, a = dr_ad(m_hat[i], groups[i], B)
            dr.append(d)
            ad.append(a)
    t["bootstrap"] = time.perf_counter() - t0

    # demixing and posterior
    t0 = time.perf_counter()
    curves, _, _ = demix(y, scheme, m_hat)
    t["demix"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    post = sample_posterior(models.mdn_for(n_hat), curves.values, n_hat, Q, post_seed)
    pm = posterior_mean(post)
    mp = map_estimate(post, y, scheme, m_hat, sigma_e)
    regions = [{p: hdr(post.samples[i, :, j], PARAM_SUPPORT[p], alpha, n_bins) for j, p in enumerate(PARAM_NAMES)} for i in range(n_hat)]
    t["posterior"] = time.perf_counter() - t0
    return VoxelInference(n_hat, m_hat, dr, ad, post.samples, list(post.acceptance), regions, pm, mp, t)


def inference_jsonl_line(res: VoxelInference, index: int) -> str:
    return json.dumps(res.to_dict(index), sort_keys=True, separators=(",", ":"))


CSV_COLUMNS = ["index", "fiber", "n_hat", "mx", "my", "mz", "dr", "ad"] + [f"pm_{p}" for p in PARAM_NAMES] + [
    f"map_{p}" for p in PARAM_NAMES
] + [f"hdrs_{p}" for p in PARAM_NAMES]


def inference_csv_rows(res: VoxelInference, index: int) -> list[list]:
    rows = []
    if res.n_hat == 0:
        return [[index, -1, 0] + [""] * (len(CSV_COLUMNS) - 3)]
    for i in range(res.n_hat):
        row = [index, i, res.n_hat, *np.round(res.orientations[i], 8)]
        row += [res.dr[i] if res.dr else "", "" if not res.ad or res.ad[i] is None else round(res.ad[i], 8)]
        row += list(np.round(res.pm[i], 8)) + list(np.round(res.map[i], 8))
        row += [round(hdr_size(res.hdr[i][p]), 6) for p in PARAM_NAMES]
        rows.append(row)
    return rows
