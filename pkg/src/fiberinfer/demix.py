"""Shape-constrained additive demixing of multi-fiber signals.

Given fiber axes, each shell's signal is modelled as an intercept plus one
monotone non-increasing cubic spline per fiber in ``t = (p . m_i)^2``. Spline
coefficients are ``a = Sigma beta~`` with ``beta~ = (beta_1, e^beta_2, ...)``
and Sigma the lower-triangular sign matrix, which makes the coefficient
sequence non-increasing and hence the spline monotone.

Centering fixes ``beta_1``. The default ``"integral"`` centering makes each
curve integrate to zero over [0, 1]; ``"empirical"`` makes it average to zero
over the observed ``t`` values. Either way the intercept absorbs the
constant, so the fitted shape is identical and only the reported offset
changes.
"""
from __future__ import annotations

import csv
import functools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.optimize import nnls

from .forward import AcquisitionScheme, SignalSet

J_DEFAULT = 20
GRID = np.linspace(0.0, 1.0, 100)
THETA_FLOOR = -40.0


@functools.lru_cache(maxsize=16)
def _knots(J: int) -> np.ndarray:
    if J < 4:
        raise ValueError("cubic spline rank must be at least 4")
    inner = np.linspace(0.0, 1.0, J - 2)
    return np.concatenate([[0.0] * 3, inner, [1.0] * 3])


def bspline_basis(t, J: int = J_DEFAULT) -> np.ndarray:
    """Cubic B-spline design matrix (len(t), J) on uniform knots over [0, 1]."""
    t = np.clip(np.asarray(t, dtype=float).reshape(-1), 0.0, 1.0)
    return BSpline.design_matrix(t, _knots(J), 3).toarray()


def basis_integrals(J: int = J_DEFAULT) -> np.ndarray:
    """``int_0^1 gamma_j(t) dt = (k_{j+4} - k_j) / 4``."""
    k = _knots(J)
    return (k[4:] - k[:-4]) / 4.0


def sigma_matrix(J: int = J_DEFAULT) -> np.ndarray:
    S = -np.tril(np.ones((J, J)))
    S[:, 0] = 1.0
    return S


def effective_rank(M: int, n: int, J: int = J_DEFAULT) -> int:
    """Spline rank that keeps ``n J < M``: ``min(J, floor((M - 1) / n) - 1)``."""
    return int(min(J, (M - 1) // n - 1))


@dataclass(eq=False)
class TStarDesign:
    """Per diffusion shell: t* values (n, M_l) and spline designs (n, M_l, J)."""

    t: list
    gammas: list
    J: int
    orientations: np.ndarray
    shells: list

    @property
    def n(self) -> int:
        return self.orientations.shape[0]


def build_design(scheme: AcquisitionScheme, orientations, J: int | None = None) -> TStarDesign:
    m = np.atleast_2d(np.asarray(orientations, dtype=float))
    n = m.shape[0]
    if not 1 <= n <= 3:
        raise ValueError("fiber count must be in 1..3")
    m = m / np.linalg.norm(m, axis=1, keepdims=True)
    shells = scheme.diffusion_shells()
    if J is None:
        J = min(effective_rank(scheme.counts[l], n) for l in shells)
    ts, gs = [], []
    for l in shells:
        t = np.clip((m @ scheme.directions[l].T) ** 2, 0.0, 1.0)
        ts.append(t)
        gs.append(np.stack([bspline_basis(ti, J) for ti in t]))
    return TStarDesign(ts, gs, J, m, shells)


@dataclass
class NewtonOptions:
    tol: float = 1e-8
    max_iter: int = 200
    centering: str = "integral"
    max_halvings: int = 30


@dataclass(eq=False)
class MonotoneSplineCoeffs:
    beta: np.ndarray  # (n, L, J)
    a: np.ndarray  # (n, L, J)
    mu: np.ndarray  # (L,)
    J: int
    centering: str = "integral"

    @property
    def n(self) -> int:
        return self.beta.shape[0]


@dataclass
class FitDiagnostics:
    objective: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    grad_norm: np.ndarray
    constraint_residual: np.ndarray
    warnings: list = field(default_factory=list)


def _newton(Ps, G, theta, opts: NewtonOptions):
    """Minimise ``||Ps - G exp(theta)||^2`` by damped Newton with step halving."""

    def obj(th):
        r = Ps - G @ np.exp(th)
        return r @ r, r

    f, r = obj(theta)
    GtG = G.T @ G
    it = 0
    gnorm = np.inf
    for it in range(opts.max_iter + 1):
        u = np.exp(theta)
        gtr = G.T @ r
        grad = -2.0 * u * gtr
        gnorm = np.max(np.abs(grad)) if grad.size else 0.0
        if gnorm < opts.tol or it == opts.max_iter:
            break
        H = 2.0 * (u[:, None] * GtG * u[None, :] - np.diag(u * gtr))
        damp = 0.0
        scale = max(np.max(np.abs(np.diag(H))), 1e-12)
        while True:
            try:
                L = np.linalg.cholesky(H + damp * np.eye(H.shape[0]))
                break
            except np.linalg.LinAlgError:
                damp = max(2.0 * damp, 1e-10 * scale)
        step = -np.linalg.solve(L.T, np.linalg.solve(L, grad))
        alpha = 1.0
        for _ in range(opts.max_halvings):
            cand = np.maximum(theta + alpha * step, THETA_FLOOR)
            fc, rc = obj(cand)
            if fc <= f:
                break
            alpha *= 0.5
        else:
            break
        if fc == f and np.array_equal(cand, theta):
            break
        theta, f, r = cand, fc, rc
    return theta, f, it, gnorm


def fit_scam(signals, design: TStarDesign, opts: NewtonOptions | None = None, scheme: AcquisitionScheme | None = None):
    """Fit the centred monotone additive model on every diffusion shell.

    Parameters
    ----------
    signals : SignalSet or (M_total,) array
    design : TStarDesign
    opts : NewtonOptions

    Returns
    -------
    coeffs : MonotoneSplineCoeffs
    diag : FitDiagnostics
    """
    opts = opts or NewtonOptions()
    if opts.centering not in ("integral", "empirical"):
        raise ValueError("centering must be 'integral' or 'empirical'")
    if isinstance(signals, SignalSet):
        scheme, values = signals.scheme, signals.values
    else:
        if scheme is None:
            raise ValueError("scheme required for raw signal arrays")
        values = np.asarray(signals, dtype=float)
    n, J = design.n, design.J
    notes = []
    if n > 1:
        cosines = np.abs(design.orientations @ design.orientations.T)[np.triu_indices(n, 1)]
        if np.any(cosines > np.cos(np.radians(5.0))):
            msg = "fiber axes closer than 5 degrees; additive design is near-collinear"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
    S2 = sigma_matrix(J)[:, 1:]
    cint = basis_integrals(J)
    L = len(design.shells)
    beta = np.zeros((n, L, J))
    a = np.zeros((n, L, J))
    mu = np.zeros(L)
    objv, iters, conv, gn, cres = (np.zeros(L) for _ in range(5))
    sl = scheme.shell_slices
    for j, l in enumerate(design.shells):
        s = values[sl[l]]
        Gam = design.gammas[j]  # (n, M, J)
        M = s.size
        if n * J >= M:
            raise ValueError(f"shell {l}: n*J = {n * J} >= M = {M}; reduce J")
        Ps = s - s.mean()
        blocks = [Gam[i] @ S2 for i in range(n)]
        G = np.concatenate([b - b.mean(axis=0) for b in blocks], axis=1)
        try:
            u0, _ = nnls(G, Ps, maxiter=50 * G.shape[1])
            theta0 = np.log(np.maximum(u0, np.exp(THETA_FLOOR)))
        except RuntimeError:
            theta0 = np.full(G.shape[1], -3.0)
        theta, f, it, g = _newton(Ps, G, theta0, opts)
        objv[j], iters[j], gn[j], conv[j] = f, it, g, g < opts.tol
        u = np.exp(theta).reshape(n, J - 1)
        for i in range(n):
            shape = S2 @ u[i]  # coefficients up to the constant beta_1
            if opts.centering == "integral":
                b1 = -cint @ shape
                res = lambda aa: abs(cint @ aa)
            else:
                b1 = -np.mean(Gam[i] @ shape)
                res = lambda aa, Gi=Gam[i]: abs(np.sum(Gi @ aa))
            beta[i, j, 0] = b1
            beta[i, j, 1:] = theta.reshape(n, J - 1)[i]
            a[i, j] = b1 + shape
            cres[j] = max(cres[j], res(a[i, j]))
        mu[j] = np.mean(s - sum(Gam[i] @ a[i, j] for i in range(n)))
    coeffs = MonotoneSplineCoeffs(beta, a, mu, J, opts.centering)
    return coeffs, FitDiagnostics(objv, iters, conv.astype(bool), gn, cres, notes)


@dataclass(eq=False)
class DemixedCurves:
    """values[i, l, g]: fiber i, diffusion shell l, grid point g."""

    values: np.ndarray
    grid: np.ndarray = field(default_factory=lambda: GRID.copy())
    shells: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def fiber(self, i: int) -> np.ndarray:
        """Flattened (L * G,) conditioning vector of fiber i."""
        return self.values[i].reshape(-1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fiber", "shell", "t", "value"])
            for i in range(self.values.shape[0]):
                for j in range(self.values.shape[1]):
                    shell = self.shells[j] if self.shells else j
                    for t, v in zip(self.grid, self.values[i, j]):
                        w.writerow([i, shell, f"{t:.6f}", f"{v:.10g}"])


def eval_curves(coeffs: MonotoneSplineCoeffs, grid=None, shells=None) -> DemixedCurves:
    grid = GRID if grid is None else np.asarray(grid, dtype=float)
    B = bspline_basis(grid, coeffs.J)
    vals = np.einsum("gj,ilj->ilg", B, coeffs.a)
    return DemixedCurves(vals, grid.copy(), list(shells) if shells is not None else [])


def demix(signals, scheme: AcquisitionScheme, orientations, opts: NewtonOptions | None = None, J: int | None = None):
    """Design, fit and evaluate in one call; returns (curves, coeffs, diagnostics)."""
    design = build_design(scheme, orientations, J)
    coeffs, diag = fit_scam(signals, design, opts, scheme=scheme)
    return eval_curves(coeffs, shells=design.shells), coeffs, diag


def centered_kernel(t, b, kernel) -> np.ndarray:
    """Closed-form ``h(t) - int_0^1 h`` for the bi-exponential kernel."""
    t = np.asarray(t, dtype=float)
    da, dpar, dperp, z1, z2 = np.asarray(kernel, dtype=float)

    def mean_exp(c):
        return 1.0 if c == 0 else -np.expm1(-c) / c

    h = z1 * np.exp(-b * da * t) + z2 * np.exp(-b * dperp - b * (dpar - dperp) * t)
    return h - (z1 * mean_exp(b * da) + z2 * np.exp(-b * dperp) * mean_exp(b * (dpar - dperp)))


def demix_batch(signals, scheme: AcquisitionScheme, orientations, n, opts: NewtonOptions | None = None):
    """Demix many voxels; returns a list of (n_i, L, 100) curve arrays."""
    out = []
    for s, m, k in zip(np.atleast_2d(signals), orientations, n):
        curves, _, _ = demix(s, scheme, m[:k], opts)
        out.append(curves.values)
    return out
