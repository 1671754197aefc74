"""Multi-fiber standard-model forward simulation.

Holds the acquisition scheme, the bi-exponential fiber kernel, the large-kappa
analytic mixture signal, the finite-kappa Watson convolution, the constrained
priors and the synthetic dataset generator.

Units: b-values are stored in ms/um^2 (1000 s/mm^2 == 1 ms/um^2) and
diffusivities in um^2/ms, so ``b * D`` is of order one.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import dawsn, roots_legendre

log = logging.getLogger(__name__)

N_MAX = 3
DIFF_LO, DIFF_HI = 0.2, 3.0
PERP_RATIO = 0.8
Z1_MIN = 0.1
MIN_CROSSING_DEG = 10.0
SECOND_CROSSING_DEG = 30.0
MAX_PROPOSALS = 10**6
PARAM_NAMES = ("D_a", "D_e_par", "D_e_perp", "z1", "z2")
# prior support of each kernel parameter, used for HDR binning
PARAM_SUPPORT = {
    "D_a": (DIFF_LO, DIFF_HI),
    "D_e_par": (DIFF_LO, DIFF_HI),
    "D_e_perp": (0.0, PERP_RATIO * DIFF_HI),
    "z1": (0.0, 1.0),
    "z2": (0.0, 1.0),
}

# diffusivity polytope A xi <= d over (D_a, D_e_par, D_e_perp); the last row
# is D_e_perp <= 0.8 D_e_par
POLYTOPE_A = np.array(
    [
        [-1.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, -1.0],
        [0.0, 0.0, 1.0],
        [0.0, -PERP_RATIO, 1.0],
    ]
)
POLYTOPE_D = np.array([-0.2, 3.0, -0.2, 3.0, 0.0, 2.4, 0.0])


class SamplingError(RuntimeError):
    """Rejection sampler exceeded its proposal budget."""


class QuadratureError(RuntimeError):
    """Finite-kappa quadrature did not converge."""


def s_mm2_to_ms_um2(b):
    return np.asarray(b, dtype=float) * 1e-3


# --------------------------------------------------------------------------
# acquisition scheme
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AcquisitionScheme:
    """Multi-shell sampling design.

    Parameters
    ----------
    bvals : sequence of float
        One b-value per shell in ms/um^2, sorted ascending.
    directions : sequence of (M_l, 3) arrays
        Unit gradient directions of each shell.
    """

    bvals: np.ndarray
    directions: tuple

    def __init__(self, bvals, directions):
        bvals = np.asarray(bvals, dtype=float).reshape(-1)
        dirs = tuple(np.atleast_2d(np.asarray(d, dtype=float)) for d in directions)
        if len(dirs) != bvals.size:
            raise ValueError("one direction block per shell required")
        if np.any(bvals < 0):
            raise ValueError("b-values must be non-negative")
        if np.any(np.diff(bvals) < 0):
            raise ValueError("shells must be sorted ascending by b-value")
        for d in dirs:
            if d.ndim != 2 or d.shape[1] != 3 or d.shape[0] < 1:
                raise ValueError("each shell needs an (M_l, 3) direction array, M_l >= 1")
            if np.any(np.abs(np.linalg.norm(d, axis=1) - 1.0) > 1e-12):
                raise ValueError("gradient directions must have unit norm")
            d.setflags(write=False)
        bvals.setflags(write=False)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "directions", dirs)

    @property
    def n_shells(self) -> int:
        return self.bvals.size

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(d.shape[0] for d in self.directions)

    @property
    def n_measurements(self) -> int:
        return sum(self.counts)

    @property
    def shell_slices(self) -> list[slice]:
        edges = np.concatenate([[0], np.cumsum(self.counts)])
        return [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    @property
    def all_directions(self) -> np.ndarray:
        return np.concatenate(self.directions, axis=0)

    @property
    def all_bvals(self) -> np.ndarray:
        return np.repeat(self.bvals, self.counts)

    def diffusion_shells(self) -> list[int]:
        """Indices of shells with b > 0."""
        return [i for i, b in enumerate(self.bvals) if b > 0]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.bvals, dtype="<f8").tobytes())
        for d in self.directions:
            h.update(np.ascontiguousarray(d, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    # -- gradient-table text format: "gx gy gz b" with b in s/mm^2
    @classmethod
    def from_gradient_table(cls, path, b0_threshold: float = 50.0, round_to: float = 50.0):
        table = np.loadtxt(path, ndmin=2)
        if table.shape[1] != 4:
            raise ValueError(f"{path}: expected 4 columns 'gx gy gz b'")
        return cls.from_arrays(table[:, :3], table[:, 3], b0_threshold, round_to)

    @classmethod
    def from_arrays(cls, bvecs, bvals_s_mm2, b0_threshold=50.0, round_to=50.0):
        bvecs = np.asarray(bvecs, dtype=float)
        b = np.asarray(bvals_s_mm2, dtype=float)
        b = np.where(b < b0_threshold, 0.0, np.round(b / round_to) * round_to)
        shells, dirs = [], []
        for bv in np.unique(b):
            sel = b == bv
            v = bvecs[sel]
            if bv == 0:
                v = np.tile([0.0, 0.0, 1.0], (sel.sum(), 1))
            else:
                norms = np.linalg.norm(v, axis=1, keepdims=True)
                if np.any(norms < 1e-6):
                    raise ValueError("zero gradient vector on a b > 0 line")
                v = v / norms
            shells.append(bv * 1e-3)
            dirs.append(v)
        return cls(shells, dirs)

    def to_gradient_table(self, path):
        rows = [
            np.column_stack([d, np.full(d.shape[0], b * 1e3)])
            for b, d in zip(self.bvals, self.directions)
        ]
        np.savetxt(path, np.concatenate(rows), fmt="%.10f %.10f %.10f %.1f")


def hemisphere_directions(n: int, seed: int = 0, iters: int = 300) -> np.ndarray:
    """Well-spread antipodally symmetric directions by electrostatic repulsion.

    Starts from a golden-spiral hemisphere and runs projected gradient steps on
    the antipodal Coulomb energy. Deterministic for a given ``(n, seed)``.
    """
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    phi = np.pi * (1.0 + 5**0.5) * i + 0.7 * seed
    r = np.sqrt(1.0 - z**2)
    x = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    rng = np.random.default_rng(seed)
    x = x + 1e-3 * rng.standard_normal(x.shape)
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    step = 0.5 / n
    for _ in range(iters):
        force = np.zeros_like(x)
        for sign in (1.0, -1.0):
            d = x[:, None, :] - sign * x[None, :, :]
            r2 = np.einsum("ijk,ijk->ij", d, d)
            np.fill_diagonal(r2, np.inf)
            force += (d / r2[..., None] ** 1.5).sum(axis=1)
        force -= np.einsum("ij,ij->i", force, x)[:, None] * x
        fn = np.linalg.norm(force, axis=1, keepdims=True)
        x = x + step * force / np.maximum(fn.max(), 1e-12)
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    return canonical_hemisphere(x)


def default_scheme(b_values_s_mm2: Sequence[float] = (1000.0, 3000.0), per_shell: int = 60):
    """Two-shell HCP-like design, 60 directions per shell."""
    dirs = [hemisphere_directions(per_shell, seed=k) for k in range(len(b_values_s_mm2))]
    return AcquisitionScheme(s_mm2_to_ms_um2(b_values_s_mm2), dirs)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelParams:
    D_a: float
    D_e_par: float
    D_e_perp: float
    z1: float
    z2: float

    def __post_init__(self):
        arr = self.as_array()
        if not np.all(np.isfinite(arr)):
            raise ValueError("kernel parameters must be finite")
        if self.z1 < 0 or self.z2 < 0:
            raise ValueError("volume fractions must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.D_a, self.D_e_par, self.D_e_perp, self.z1, self.z2])

    @classmethod
    def from_array(cls, a) -> "KernelParams":
        return cls(*(float(v) for v in np.asarray(a).reshape(5)))

    def in_polytope(self, tol: float = 0.0) -> bool:
        return bool(in_polytope(self.as_array()[None, :3], tol)[0])


def in_polytope(diffusivities, tol: float = 0.0) -> np.ndarray:
    """Row mask for ``A xi <= d`` (with strict ``D_e_perp > 0``)."""
    x = np.asarray(diffusivities, dtype=float).reshape(-1, 3)
    ok = np.all(x @ POLYTOPE_A.T <= POLYTOPE_D + tol, axis=1)
    return ok & (x[:, 2] > 0)


@dataclass(frozen=True, eq=False)
class FiberConfig:
    """Ground-truth voxel: n fibers, axes, kernels and optional Watson kappas."""

    orientations: np.ndarray
    kernels: np.ndarray
    kappa: np.ndarray | None = None

    def __post_init__(self):
        m = canonical_hemisphere(np.atleast_2d(np.asarray(self.orientations, dtype=float)))
        k = np.atleast_2d(np.asarray(self.kernels, dtype=float))
        if m.shape[0] != k.shape[0] or k.shape[1] != 5 or m.shape[1] != 3:
            raise ValueError("need matching (n, 3) orientations and (n, 5) kernels")
        if not 1 <= m.shape[0] <= N_MAX:
            raise ValueError(f"fiber count must be in 1..{N_MAX}")
        object.__setattr__(self, "orientations", m)
        object.__setattr__(self, "kernels", k)
        if self.kappa is not None:
            kap = np.asarray(self.kappa, dtype=float).reshape(-1)
            if kap.size != m.shape[0]:
                raise ValueError("one kappa per fiber")
            object.__setattr__(self, "kappa", kap)

    @property
    def n(self) -> int:
        return self.orientations.shape[0]

    def kernel(self, i: int) -> KernelParams:
        return KernelParams.from_array(self.kernels[i])

    def violations(self) -> list[str]:
        """Names of prior constraints this config breaks (empty when valid)."""
        out = []
        if abs(self.kernels[:, 3:].sum() - 1.0) > 1e-10:
            out.append("weights do not sum to one")
        if np.any(self.kernels[:, 3] < Z1_MIN):
            out.append("z1 below minimum")
        if not np.all(in_polytope(self.kernels[:, :3])):
            out.append("diffusivities outside polytope")
        if not angles_ok(self.orientations[None], self.n)[0]:
            out.append("crossing angle constraint")
        return out


def canonical_hemisphere(v: np.ndarray) -> np.ndarray:
    """Flip axes onto z > 0 (ties: y > 0, then x >= 0)."""
    v = np.array(v, dtype=float, copy=True)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    flip = (z < 0) | ((z == 0) & ((y < 0) | ((y == 0) & (x < 0))))
    v[flip] *= -1.0
    return v


# --------------------------------------------------------------------------
# kernel and signals
# --------------------------------------------------------------------------


def kernel_eval(t, b, k: KernelParams | np.ndarray):
    """Single-fiber decay ``z1 e^{-b Da t} + z2 e^{-b De_perp - b (De_par - De_perp) t}``.

    ``t`` is the squared cosine between gradient and fiber axis.
    """
    t = np.asarray(t, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any((t < 0) | (t > 1)) or np.any(~np.isfinite(t)):
        raise ValueError("t must lie in [0, 1]")
    if np.any(b < 0):
        raise ValueError("b must be non-negative")
    p = k.as_array() if isinstance(k, KernelParams) else np.asarray(k, dtype=float)
    return _kernel(t, b, p)


def _kernel(t, b, p):
    da, dpar, dperp, z1, z2 = (p[..., i] for i in range(5))
    return z1 * np.exp(-b * da * t) + z2 * np.exp(-b * dperp - b * (dpar - dperp) * t)


def forward_batch(orientations, kernels, scheme: AcquisitionScheme) -> np.ndarray:
    """Noiseless signals for a batch of (zero-padded) configurations.

    Parameters
    ----------
    orientations : (N, n, 3) array
    kernels : (N, n, 5) array
        Padded fibers must carry zero weights.

    Returns
    -------
    (N, M_total) array in scheme measurement order.
    """
    m = np.asarray(orientations, dtype=float)
    k = np.asarray(kernels, dtype=float)
    p = scheme.all_directions
    b = scheme.all_bvals
    t = np.einsum("mj,nij->nmi", p, m) ** 2  # (N, M, n)
    t = np.clip(t, 0.0, 1.0)
    bb = b[None, :, None]
    da, dpar, dperp, z1, z2 = (k[:, None, :, i] for i in range(5))
    s = z1 * np.exp(-bb * da * t) + z2 * np.exp(-bb * dperp - bb * (dpar - dperp) * t)
    return s.sum(axis=2)


@dataclass(eq=False)
class SignalSet:
    """Normalised signals concatenated over shells (scheme measurement order)."""

    values: np.ndarray
    scheme: AcquisitionScheme

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-1] != self.scheme.n_measurements:
            raise ValueError("signal length does not match acquisition scheme")

    def shell(self, l: int) -> np.ndarray:
        return self.values[..., self.scheme.shell_slices[l]]

    @property
    def shells(self) -> list[np.ndarray]:
        return [self.shell(l) for l in range(self.scheme.n_shells)]


def forward_signal(cfg: FiberConfig, scheme: AcquisitionScheme) -> SignalSet:
    if cfg.kappa is not None:
        raise ValueError("config carries kappa; use forward_signal_watson")
    return SignalSet(forward_batch(cfg.orientations[None], cfg.kernels[None], scheme)[0], scheme)


# --------------------------------------------------------------------------
# finite-kappa Watson model
# --------------------------------------------------------------------------


def watson_normalizer(kappa):
    """``C(kappa) = [2 pi int_0^1 exp(kappa t^2) dt]^-1`` (integrates to 2 on S^2)."""
    kappa = np.asarray(kappa, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        integral = np.where(kappa > 0, np.exp(kappa) * dawsn(np.sqrt(kappa)) / np.sqrt(np.maximum(kappa, 1e-300)), 1.0)
    return 1.0 / (2 * np.pi * integral)


def watson_density(u, axis, kappa):
    """Watson density of unit mass over the full sphere.

    Equals ``C(kappa) exp(kappa (m.u)^2) / 2``; evaluated in the scaled form
    ``exp(kappa ((m.u)^2 - 1))`` so large kappa does not overflow.
    """
    u = np.asarray(u, dtype=float)
    t = u @ np.asarray(axis, dtype=float)
    kappa = float(kappa)
    if kappa == 0:
        return np.full(t.shape, 1.0 / (4 * np.pi))
    scaled_int = dawsn(np.sqrt(kappa)) / np.sqrt(kappa)  # int_0^1 exp(k(t^2-1)) dt
    return np.exp(kappa * (t**2 - 1.0)) / (4 * np.pi * scaled_int)


def _watson_nodes(kappa: float, order: int):
    """Nodes/weights on [0, 1] for ``exp(kappa (t^2 - 1))`` graded towards t = 1."""
    breaks = set(np.linspace(0.0, 1.0, 9).tolist())
    if kappa > 0:
        scale = 1.0 / (2.0 * kappa)
        k = -2
        while scale * 2.0**k < 1.0:
            breaks.add(1.0 - scale * 2.0**k)
            k += 1
    edges = np.array(sorted(breaks))
    x, w = roots_legendre(order)
    lo, hi = edges[:-1, None], edges[1:, None]
    t = (0.5 * (hi - lo) * x + 0.5 * (hi + lo)).ravel()
    wt = (0.5 * (hi - lo) * w).ravel()
    return t, wt


def _watson_fiber(p, b, axis, kernel, kappa, order, n_phi):
    # frame with axis as pole; p.u = c t + s r cos(phi)
    c = np.clip(p @ axis, -1.0, 1.0)
    s = np.sqrt(np.maximum(0.0, 1.0 - c**2))
    t, wt = _watson_nodes(kappa, order)
    w = wt * np.exp(kappa * (t**2 - 1.0))
    w = w / w.sum()
    # nodes whose weight cannot move the sum in double precision are skipped
    keep = w > 1e-20
    t, w = t[keep], w[keep]
    r = np.sqrt(np.maximum(0.0, 1.0 - t**2))
    # periodic trapezoid in azimuth folded onto [0, pi] (integrand is even in phi)
    half = n_phi // 2
    phi = np.pi * np.arange(half + 1) / half
    wphi = np.full(half + 1, 2.0)
    wphi[[0, -1]] = 1.0
    wphi /= wphi.sum()
    cosphi = np.cos(phi)
    dot = c[:, None, None] * t[None, :, None] + s[:, None, None] * r[None, :, None] * cosphi[None, None, :]
    h = _kernel(np.clip(dot**2, 0, 1), b[:, None, None], kernel) @ wphi
    return h @ w


def forward_signal_watson(
    cfg: FiberConfig, scheme: AcquisitionScheme, quadrature_order: int = 8, n_phi: int = 96, check: bool = True
) -> SignalSet:
    """Signal of fibers dispersed by Watson distributions of concentration kappa.

    The spherical convolution is evaluated in each fiber's own frame with a
    graded Gauss-Legendre rule in the polar cosine (``quadrature_order``
    points per panel) times a periodic trapezoid rule in azimuth. With the
    defaults this is at least 5810 nodes per fiber. When ``check`` is set the
    rule is re-run at doubled order and a change above 1e-6 raises.
    """
    if cfg.kappa is None:
        raise ValueError("config has no kappa")
    if np.any(cfg.kappa < 0):
        raise ValueError("kappa must be non-negative")
    p = scheme.all_directions
    b = scheme.all_bvals

    def run(order, nphi):
        total = np.zeros(p.shape[0])
        for i in range(cfg.n):
            total += _watson_fiber(p, b, cfg.orientations[i], cfg.kernels[i], float(cfg.kappa[i]), order, nphi)
        return total

    out = run(quadrature_order, n_phi)
    if check:
        ref = run(2 * quadrature_order, 2 * n_phi)
        err = np.max(np.abs(ref - out))
        if err > 1e-6:
            raise QuadratureError(f"quadrature changed by {err:.2e} on doubling; raise quadrature_order")
    return SignalSet(out, scheme)


def watson_node_count(kappa: float, quadrature_order: int = 8, n_phi: int = 96) -> int:
    return _watson_nodes(kappa, quadrature_order)[0].size * n_phi


# --------------------------------------------------------------------------
# priors
# --------------------------------------------------------------------------


def _uniform_hemisphere(rng, size):
    v = rng.standard_normal(size + (3,))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return canonical_hemisphere(v)


def angles_ok(m: np.ndarray, n: int) -> np.ndarray:
    """Crossing-angle constraints for a batch of (N, n, 3) axis sets."""
    if n == 1:
        return np.ones(m.shape[0], dtype=bool)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    ang = np.stack(
        [np.degrees(np.arccos(np.clip(np.abs(np.einsum("nk,nk->n", m[:, i], m[:, j])), 0, 1))) for i, j in pairs],
        axis=1,
    )
    ang.sort(axis=1)
    ok = ang[:, 0] >= MIN_CROSSING_DEG
    if n > 2:
        ok &= ang[:, 1] >= SECOND_CROSSING_DEG
    return ok


def _rejection(propose, accept, size, rng, what):
    """Draw ``size`` accepted proposals using vectorised batches."""
    out, have, tried = [], 0, 0
    while have < size:
        want = size - have
        batch = max(64, int(2.5 * want) + 16)
        cand = propose(rng, batch)
        ok = accept(cand)
        tried += batch
        take = cand[ok][:want]
        out.append(take)
        have += take.shape[0]
        if have < size and tried >= MAX_PROPOSALS * max(1, size):
            raise SamplingError(f"{what}: exceeded {MAX_PROPOSALS} proposals per draw")
    return np.concatenate(out, axis=0)


def sample_weights(n: int, size: int, rng) -> np.ndarray:
    """(size, n, 2) volume fractions: Dirichlet(1/(2n)) rejected on any z1 < 0.1."""
    alpha = np.full(2 * n, 1.0 / (2 * n))

    def propose(r, k):
        g = r.standard_gamma(alpha, size=(k, 2 * n))
        tot = g.sum(axis=1, keepdims=True)
        bad = tot[:, 0] <= 0
        g[bad] = 1.0
        tot[bad] = 2 * n
        return (g / tot).reshape(k, n, 2)

    return _rejection(propose, lambda z: np.all(z[:, :, 0] >= Z1_MIN, axis=1), size, rng, "volume fractions")


def sample_diffusivities(size: int, rng) -> np.ndarray:
    """(size, 3) draws uniform on the diffusivity polytope."""
    lo = np.array([DIFF_LO, DIFF_LO, 0.0])
    hi = np.array([DIFF_HI, DIFF_HI, PERP_RATIO * DIFF_HI])
    return _rejection(lambda r, k: r.uniform(lo, hi, size=(k, 3)), in_polytope, size, rng, "diffusivities")


def sample_orientations(n: int, size: int, rng) -> np.ndarray:
    return _rejection(
        lambda r, k: _uniform_hemisphere(r, (k, n)), lambda m: angles_ok(m, n), size, rng, "orientations"
    )


def sample_batch(n: int, size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised prior draws: (size, n, 3) axes and (size, n, 5) kernels."""
    z = sample_weights(n, size, rng)
    d = sample_diffusivities(size * n, rng).reshape(size, n, 3)
    m = sample_orientations(n, size, rng)
    return m, np.concatenate([d, z], axis=2)


def sample_config(n: int, rng_seed=None) -> FiberConfig:
    if not 1 <= n <= N_MAX:
        raise ValueError(f"fiber count must be in 1..{N_MAX}")
    rng = np.random.default_rng(rng_seed)
    m, k = sample_batch(n, 1, rng)
    return FiberConfig(m[0], k[0])


def pad_configs(configs: Sequence[FiberConfig], n_max: int = N_MAX):
    """Stack configs into zero-padded (N, n_max, 3) axes and (N, n_max, 5) kernels."""
    N = len(configs)
    m = np.zeros((N, n_max, 3))
    m[:, :, 2] = 1.0
    k = np.zeros((N, n_max, 5))
    for i, c in enumerate(configs):
        m[i, : c.n] = c.orientations
        k[i, : c.n] = c.kernels
    return m, k


# --------------------------------------------------------------------------
# noise and datasets
# --------------------------------------------------------------------------


def add_noise(clean: SignalSet, sigma_e: float, rng_seed=None) -> SignalSet:
    if sigma_e < 0:
        raise ValueError("sigma_e must be non-negative")
    if sigma_e == 0:
        return SignalSet(clean.values.copy(), clean.scheme)
    rng = np.random.default_rng(rng_seed)
    return SignalSet(clean.values + sigma_e * rng.standard_normal(clean.values.shape), clean.scheme)


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Per-record generator; the stream of record ``index`` depends only on (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _n_probs(n_distribution) -> np.ndarray:
    if n_distribution is None:
        return np.full(N_MAX, 1.0 / N_MAX)
    if np.isscalar(n_distribution):
        p = np.zeros(N_MAX)
        p[int(n_distribution) - 1] = 1.0
        return p
    p = np.asarray(n_distribution, dtype=float)
    if p.size != N_MAX or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("n_distribution must be a fiber count or 3 probabilities")
    return p / p.sum()


@dataclass
class DatasetSpec:
    n_samples: int
    sigma_e: float = 0.0620
    n_distribution: object = None
    seed: int = 0
    kappa: object = None  # None, scalar, or (lo, hi) uniform range


def simulate_record(index: int, scheme: AcquisitionScheme, spec: DatasetSpec):
    rng = record_rng(spec.seed, index)
    n = int(rng.choice(np.arange(1, N_MAX + 1), p=_n_probs(spec.n_distribution)))
    m, k = sample_batch(n, 1, rng)
    kappa = None
    if spec.kappa is not None:
        if np.isscalar(spec.kappa):
            kappa = np.full(n, float(spec.kappa))
        else:
            lo, hi = spec.kappa
            kappa = rng.uniform(lo, hi, size=n)
    cfg = FiberConfig(m[0], k[0], kappa)
    clean = forward_signal(cfg, scheme) if kappa is None else forward_signal_watson(cfg, scheme, check=False)
    noisy = clean.values + spec.sigma_e * rng.standard_normal(clean.values.shape)
    return SignalSet(noisy, scheme), cfg


def generate_dataset(
    n_samples: int, scheme: AcquisitionScheme, sigma_e: float = 0.0620, n_distribution=None, rng_seed: int = 0, kappa=None
) -> Iterator[tuple[SignalSet, FiberConfig]]:
    """Stream i.i.d. (signals, config) records; record i depends only on (seed, i)."""
    if n_samples < 0:
        raise ValueError("n_samples must be non-negative")
    spec = DatasetSpec(n_samples, sigma_e, n_distribution, rng_seed, kappa)
    for i in range(n_samples):
        yield simulate_record(i, scheme, spec)


@dataclass
class Dataset:
    """Materialised records in padded array form."""

    signals: np.ndarray  # (N, M_total)
    n: np.ndarray  # (N,)
    orientations: np.ndarray  # (N, 3, 3)
    kernels: np.ndarray  # (N, 3, 5)
    kappa: np.ndarray  # (N, 3); 0 where absent
    scheme: AcquisitionScheme
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.n.size

    def config(self, i: int) -> FiberConfig:
        n = int(self.n[i])
        kap = self.kappa[i, :n] if np.any(self.kappa[i, :n] > 0) else None
        return FiberConfig(self.orientations[i, :n], self.kernels[i, :n], kap)

    def subset(self, mask) -> "Dataset":
        return Dataset(
            self.signals[mask], self.n[mask], self.orientations[mask], self.kernels[mask], self.kappa[mask], self.scheme, dict(self.meta)
        )

    @classmethod
    def from_records(cls, records, scheme, meta=None) -> "Dataset":
        sig, cfgs = [], []
        for s, c in records:
            sig.append(s.values)
            cfgs.append(c)
        N = len(cfgs)
        m, k = pad_configs(cfgs)
        kap = np.zeros((N, N_MAX))
        for i, c in enumerate(cfgs):
            if c.kappa is not None:
                kap[i, : c.n] = c.kappa
        signals = np.asarray(sig).reshape(N, scheme.n_measurements)
        n = np.array([c.n for c in cfgs], dtype=int)
        return cls(signals, n, m, k, kap, scheme, meta or {})


def make_dataset(n_samples, scheme, sigma_e=0.0620, n_distribution=None, rng_seed=0, kappa=None) -> Dataset:
    recs = generate_dataset(n_samples, scheme, sigma_e, n_distribution, rng_seed, kappa)
    ds = Dataset.from_records(recs, scheme)
    ds.meta = {
        "n_samples": int(n_samples),
        "sigma_e": float(sigma_e),
        "seed": int(rng_seed),
        "kappa": kappa if kappa is None or np.isscalar(kappa) else list(kappa),
        "counts_per_n": {str(k): int((ds.n == k).sum()) for k in range(1, N_MAX + 1)},
        "scheme_hash": scheme.digest(),
    }
    return ds
