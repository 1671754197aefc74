"""Real symmetric spherical harmonics, icosphere meshes, signal fitting and ODF peaks.

Basis ordering: even degrees l = 0, 2, ..., L and for each l the orders
m = -l..l, so index ``k = l (l - 1) / 2 + l + m`` for even ``l``. Real
functions are ``sqrt(2) N P_l^|m| sin(|m| phi)`` for m < 0, ``N P_l`` for
m = 0 and ``sqrt(2) N P_l^m cos(m phi)`` for m > 0, without the
Condon-Shortley phase.
"""
from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import roots_legendre

from .forward import AcquisitionScheme, SignalSet, canonical_hemisphere

ODF_DEGREE = 20
FIT_DEGREE = 8
FIT_LAMBDA = 1e-3
MESH_SUBDIVISIONS = 5


def n_coeffs(degree: int) -> int:
    if degree < 0 or degree % 2:
        raise ValueError("degree must be a non-negative even integer")
    return (degree + 1) * (degree + 2) // 2


def _check_unit(points):
    p = np.asarray(points, dtype=float)
    if p.shape[-1] != 3:
        raise ValueError("points must be 3-vectors")
    if np.any(np.abs(np.linalg.norm(p, axis=-1) - 1.0) > 1e-8):
        raise ValueError("points must have unit norm")
    return p


def real_sh(points, degree: int) -> np.ndarray:
    """Evaluate the even real SH basis at unit vectors; returns (..., K)."""
    p = _check_unit(points)
    shape = p.shape[:-1]
    # even degrees only: evaluating on the canonical hemisphere makes rows for +p and -p identical
    p = canonical_hemisphere(p.reshape(-1, 3))
    x, y, z = p[:, 0], p[:, 1], np.clip(p[:, 2], -1.0, 1.0)
    sint = np.sqrt(np.maximum(0.0, 1.0 - z**2))
    phi = np.arctan2(y, x)
    K = n_coeffs(degree)
    out = np.empty((p.shape[0], K))
    # normalised associated Legendre by column recurrence in l for each m
    pmm = np.full(p.shape[0], np.sqrt(1.0 / (4 * np.pi)))
    for m in range(degree + 1):
        if m > 0:
            pmm = pmm * np.sqrt((2 * m + 1) / (2 * m)) * sint
        prev2, prev1 = None, pmm
        cs = np.sqrt(2.0) * np.cos(m * phi) if m > 0 else None
        sn = np.sqrt(2.0) * np.sin(m * phi) if m > 0 else None
        for l in range(m, degree + 1):
            if l == m:
                cur = pmm
            elif l == m + 1:
                cur = np.sqrt(2 * m + 3) * z * pmm
            else:
                a = np.sqrt((4 * l * l - 1) / (l * l - m * m))
                b = np.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
                cur = a * (z * prev1 - b * prev2)
            if l > m:
                prev2, prev1 = prev1, cur
            if l % 2 == 0:
                base = l * (l - 1) // 2 + l
                if m == 0:
                    out[:, base] = cur
                else:
                    out[:, base + m] = cur * cs
                    out[:, base - m] = cur * sn
    return out.reshape(shape + (K,))


@dataclass(frozen=True, eq=False)
class ShBasis:
    """Even real SH basis up to ``degree``."""

    degree: int

    def __post_init__(self):
        n_coeffs(self.degree)

    @property
    def K(self) -> int:
        return n_coeffs(self.degree)

    @functools.cached_property
    def l_index(self) -> np.ndarray:
        return np.concatenate([np.full(2 * l + 1, l) for l in range(0, self.degree + 1, 2)])

    @functools.cached_property
    def m_index(self) -> np.ndarray:
        return np.concatenate([np.arange(-l, l + 1) for l in range(0, self.degree + 1, 2)])

    def penalty(self) -> np.ndarray:
        """Squared Laplace-Beltrami eigenvalues ``l^2 (l+1)^2``."""
        l = self.l_index.astype(float)
        return (l * (l + 1)) ** 2

    def __call__(self, points) -> np.ndarray:
        return real_sh(points, self.degree)


def sh_eval(basis: ShBasis, points) -> np.ndarray:
    return basis(points)


# --------------------------------------------------------------------------
# meshes
# --------------------------------------------------------------------------


def _icosahedron():
    t = (1 + 5**0.5) / 2
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=float,
    )
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def _subdivide(v, f):
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges.sort(axis=1)
    uniq, inv = np.unique(edges, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    mid = v[uniq[:, 0]] + v[uniq[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    nv = v.shape[0]
    F = f.shape[0]
    a, b, c = (inv[i * F:(i + 1) * F] + nv for i in range(3))  # midpoints of 01, 12, 20
    new_f = np.concatenate(
        [np.column_stack([f[:, 0], a, c]), np.column_stack([f[:, 1], b, a]),
         np.column_stack([f[:, 2], c, b]), np.column_stack([a, b, c])]
    )
    return np.concatenate([v, mid]), new_f


def _triangle_areas(v, f):
    """Spherical excess of each face (Van Oosterom-Strackee)."""
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    num = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    den = 1 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    return 2 * np.arctan2(num, den)


@dataclass(frozen=True, eq=False)
class SphericalMesh:
    vertices: np.ndarray
    faces: np.ndarray
    weights: np.ndarray
    neighbors: np.ndarray  # (V, max_deg) padded by repeating an entry
    degree_count: np.ndarray
    antipode: np.ndarray
    hemisphere: np.ndarray  # indices of canonical representatives

    @property
    def V(self) -> int:
        return self.vertices.shape[0]

    @functools.cached_property
    def hemisphere_neighbors(self) -> np.ndarray:
        """Neighbours of each hemisphere vertex as positions in ``hemisphere``, folded antipodally."""
        pos = np.empty(self.V, dtype=np.int64)
        pos[self.hemisphere] = np.arange(self.hemisphere.size)
        pos[self.antipode[self.hemisphere]] = np.arange(self.hemisphere.size)
        return pos[self.neighbors[self.hemisphere]]

    def neighbor_list(self, i: int) -> np.ndarray:
        return self.neighbors[i, : self.degree_count[i]]

    @functools.cached_property
    def mean_edge_deg(self) -> float:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        d = np.einsum("ij,ij->i", self.vertices[e[:, 0]], self.vertices[e[:, 1]])
        return float(np.degrees(np.arccos(np.clip(d, -1, 1))).mean())

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.vertices, dtype="<f8").tobytes()).hexdigest()[:16]

    def integrate(self, values) -> np.ndarray:
        return np.asarray(values) @ self.weights

    def export(self, prefix) -> None:
        """Write ``prefix.xyz`` (x y z per vertex) and ``prefix_adjacency.csv``."""
        np.savetxt(f"{prefix}.xyz", self.vertices, fmt="%.15f")
        with open(f"{prefix}_adjacency.csv", "w") as fh:
            fh.write("vertex,neighbor\n")
            for i in range(self.V):
                for j in self.neighbor_list(i):
                    fh.write(f"{i},{j}\n")


def _exact_weights(v, w0):
    """Smallest change to ``w0`` that integrates every even SH exactly up to a high degree.

    The degree is the largest even d with K(d) <= V / 4 (58 for 10242 vertices),
    so products of two basis functions up to half that degree integrate exactly.
    """
    d = 0
    while n_coeffs(d + 2) <= v.shape[0] // 4:
        d += 2
    A = real_sh(v, d).T
    rhs = np.zeros(A.shape[0])
    rhs[0] = np.sqrt(4 * np.pi)
    return w0 + A.T @ np.linalg.solve(A @ A.T, rhs - A @ w0)


def build_mesh(v, f) -> SphericalMesh:
    areas = _triangle_areas(v, f)
    w = np.zeros(v.shape[0])
    for k in range(3):
        np.add.at(w, f[:, k], areas / 3)
    w = _exact_weights(v, w)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.unique(np.sort(np.concatenate([e, e[:, ::-1]]), axis=1), axis=0)
    e = np.concatenate([e, e[:, ::-1]])
    order = np.lexsort((e[:, 1], e[:, 0]))
    e = e[order]
    counts = np.bincount(e[:, 0], minlength=v.shape[0])
    maxd = counts.max()
    nb = np.empty((v.shape[0], maxd), dtype=np.int64)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    for j in range(maxd):
        idx = start + np.minimum(j, counts - 1)
        nb[:, j] = e[idx, 1]
    _, anti = cKDTree(v).query(-v)
    canon = canonical_hemisphere(v)
    hemi = np.flatnonzero(np.all(np.isclose(canon, v, atol=0.0, rtol=0.0), axis=1))
    return SphericalMesh(v, f, w, nb, counts, anti, hemi)


@functools.lru_cache(maxsize=8)
def icosphere(subdivisions: int = MESH_SUBDIVISIONS) -> SphericalMesh:
    """Subdivided icosahedron; 10 * 4^k + 2 vertices (k = 5 gives 10242)."""
    v, f = _icosahedron()
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
    return build_mesh(v, f)


def default_mesh() -> SphericalMesh:
    return icosphere(MESH_SUBDIVISIONS)


# --------------------------------------------------------------------------
# signal fitting
# --------------------------------------------------------------------------


@dataclass(eq=False)
class FittedSignal:
    """Per-shell SH coefficients of the diffusion-weighted shells.

    ``coeffs`` has shape (..., L, K) where L counts the b > 0 shells of the
    scheme, in scheme order.
    """

    coeffs: np.ndarray
    basis: ShBasis
    scheme: AcquisitionScheme

    def evaluate(self, points) -> np.ndarray:
        return self.coeffs @ self.basis(points).T

    def at_design(self) -> np.ndarray:
        """Smooth fitted signal at each shell's own directions, (..., M_total)."""
        out = []
        for j, l in enumerate(self.scheme.diffusion_shells()):
            out.append(self.coeffs[..., j, :] @ self.basis(self.scheme.directions[l]).T)
        return np.concatenate(out, axis=-1)


@functools.lru_cache(maxsize=32)
def _fit_operators(scheme: AcquisitionScheme, degree: int, lam: float):
    basis = ShBasis(degree)
    ops = []
    for l in scheme.diffusion_shells():
        phi = basis(scheme.directions[l])
        normal = phi.T @ phi + lam * np.diag(basis.penalty())
        if np.linalg.matrix_rank(normal) < basis.K:
            raise np.linalg.LinAlgError(
                f"shell {l}: normal matrix is singular ({phi.shape[0]} directions, K={basis.K}); use lambda > 0"
            )
        ops.append(np.linalg.solve(normal, phi.T))
    return ops


def fit_operators(scheme: AcquisitionScheme, degree: int = FIT_DEGREE, lam: float = FIT_LAMBDA):
    """Per diffusion shell, the (K, M_l) map ``(Phi^T Phi + lam R)^-1 Phi^T``."""
    return _fit_operators(scheme, int(degree), float(lam))


def fit_signal(signals, basis: ShBasis | None = None, lam: float = FIT_LAMBDA, scheme: AcquisitionScheme | None = None) -> FittedSignal:
    """Ridge-penalised SH fit per diffusion shell.

    Parameters
    ----------
    signals : SignalSet or (..., M_total) array
        Raw arrays need ``scheme``. Leading dimensions are treated as a batch.
    basis : ShBasis, default degree 8
    lam : float
        Laplace-Beltrami ridge weight; 0 gives ordinary least squares.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    basis = basis or ShBasis(FIT_DEGREE)
    if isinstance(signals, SignalSet):
        scheme, values = signals.scheme, signals.values
    else:
        if scheme is None:
            raise ValueError("scheme required for raw signal arrays")
        values = np.asarray(signals, dtype=float)
    ops = fit_operators(scheme, basis.degree, lam)
    sl = scheme.shell_slices
    coeffs = np.stack([values[..., sl[l]] @ op.T for l, op in zip(scheme.diffusion_shells(), ops)], axis=-2)
    return FittedSignal(coeffs, basis, scheme)


def resample(fit: FittedSignal, mesh: SphericalMesh) -> np.ndarray:
    """Fitted signal on mesh vertices, shape (..., L, V)."""
    return fit.coeffs @ _mesh_basis(mesh, fit.basis.degree).T


@functools.lru_cache(maxsize=16)
def _mesh_basis(mesh: SphericalMesh, degree: int) -> np.ndarray:
    return real_sh(mesh.vertices, degree)


# --------------------------------------------------------------------------
# ODFs
# --------------------------------------------------------------------------


@dataclass(eq=False)
class OdfField:
    values: np.ndarray
    mesh: SphericalMesh

    def integral(self) -> float:
        return float(self.mesh.integrate(self.values))


@functools.lru_cache(maxsize=8)
def odf_projector(mesh: SphericalMesh, degree: int = ODF_DEGREE):
    """(pinv(Phi_V), Phi_V) for least-squares projection onto the even SH space."""
    phi = _mesh_basis(mesh, degree)
    return np.linalg.pinv(phi), phi


def project_odf(values, mesh: SphericalMesh | None = None, basis: ShBasis | None = None, clamp: bool = True) -> OdfField:
    """Least-squares projection onto degree-20 even SH and re-evaluation on the mesh.

    Negative values are clamped to zero afterwards. Accepts a batch (..., V).
    """
    mesh = mesh or default_mesh()
    degree = basis.degree if basis is not None else ODF_DEGREE
    pinv, phi = odf_projector(mesh, degree)
    out = (np.asarray(values, dtype=float) @ pinv.T) @ phi.T
    if clamp:
        out = np.maximum(out, 0.0)
    return OdfField(out, mesh)


def peak_detect(odf: OdfField, rel_threshold: float = 0.5, min_sep: float = 10.0, max_peaks: int = 3):
    """Strict local maxima of an antipodally symmetric mesh field.

    Returns a list of ``(orientation, value)`` sorted by decreasing value,
    with orientations on the canonical hemisphere.
    """
    return peak_detect_batch(np.asarray(odf.values)[None], odf.mesh, rel_threshold, min_sep, max_peaks)[0]


def peak_detect_batch(values, mesh: SphericalMesh, rel_threshold=0.5, min_sep=10.0, max_peaks=3):
    """Vectorised local-max search over a batch; greedy pruning per row.

    ``values`` is either the full field (N, V) or, for antipodally symmetric
    fields, its restriction (N, H) to ``mesh.hemisphere``. Only vertices above
    the relative threshold are compared with their neighbours.
    """
    vals = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError("ODF values must be finite")
    hemi = mesh.hemisphere
    full = vals.shape[1] == mesh.V
    if not full and vals.shape[1] != hemi.size:
        raise ValueError(f"expected {mesh.V} or {hemi.size} values per row, got {vals.shape[1]}")
    vh = vals[:, hemi] if full else vals
    vmax = vals.max(axis=1, keepdims=True)
    rows, cols = np.nonzero((vh >= rel_threshold * vmax) & (vmax > 0))
    if full:
        nbv = vals[rows[:, None], mesh.neighbors[hemi[cols]]]
    else:
        nbv = vh[rows[:, None], mesh.hemisphere_neighbors[cols]]
    top = vh[rows, cols] > nbv.max(axis=1, initial=-np.inf)
    rows, cols = rows[top], cols[top]
    starts = np.searchsorted(rows, np.arange(vals.shape[0] + 1))
    cos_sep = np.cos(np.radians(min_sep))
    out = []
    for r in range(vals.shape[0]):
        idx = cols[starts[r] : starts[r + 1]]
        if idx.size == 0:
            out.append([])
            continue
        idx = idx[np.argsort(-vh[r, idx], kind="stable")]
        kept = []
        for i in idx:
            u = mesh.vertices[hemi[i]]
            if all(abs(u @ k[0]) < cos_sep for k in kept):
                kept.append((u.copy(), float(vh[r, i])))
                if len(kept) == max_peaks:
                    break
        out.append(kept)
    return out


# --------------------------------------------------------------------------
# rotations and Watson targets
# --------------------------------------------------------------------------


@functools.lru_cache(maxsize=4)
def gauss_product_grid(degree: int):
    """Nodes/weights exactly integrating polynomials of degree ``2 * degree`` on S^2."""
    nt = degree + 1
    x, wt = roots_legendre(nt)
    nphi = 2 * degree + 2
    phi = 2 * np.pi * np.arange(nphi) / nphi
    ct, ph = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1 - ct**2)
    pts = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
    w = (wt[:, None] * np.full(nphi, 2 * np.pi / nphi)[None, :]).reshape(-1)
    return pts, w


def sh_rotation(R, degree: int) -> np.ndarray:
    """Matrix D with ``coeffs(f o R^T) = D @ coeffs(f)`` on the even SH space."""
    R = np.asarray(R, dtype=float)
    pts, w = gauss_product_grid(degree)
    Y = real_sh(pts, degree)
    Yr = real_sh(np.clip(pts @ R, -1, 1) / np.linalg.norm(pts @ R, axis=1, keepdims=True), degree)
    D = (Y * w[:, None]).T @ Yr
    # exact block structure: zero cross-degree leakage from rounding
    l = ShBasis(degree).l_index
    D[l[:, None] != l[None, :]] = 0.0
    return D


def random_rotation(rng) -> np.ndarray:
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
        ]
    )


@functools.lru_cache(maxsize=16)
def watson_zonal(kappa: float, degree: int) -> np.ndarray:
    """Funk-Hecke factors ``2 pi int P_l(t) w(t) dt`` of the unit-mass Watson density, l even."""
    from scipy.special import dawsn, eval_legendre

    t, wt = roots_legendre(400)
    if kappa == 0:
        dens = np.full_like(t, 1.0 / (4 * np.pi))
    else:
        dens = np.exp(kappa * (t**2 - 1)) / (4 * np.pi * dawsn(np.sqrt(kappa)) / np.sqrt(kappa))
    return np.array([2 * np.pi * np.sum(wt * eval_legendre(l, t) * dens) for l in range(0, degree + 1, 2)])


def watson_odf_coeffs(orientations, mask, kappa: float = 100.0, degree: int = ODF_DEGREE) -> np.ndarray:
    """SH coefficients of the equal-weight Watson mixture over the active axes.

    Parameters
    ----------
    orientations : (N, n, 3)
    mask : (N, n) bool
        Active fibers; each row's mixture has unit mass over the sphere.
    """
    m = np.asarray(orientations, dtype=float)
    mask = np.asarray(mask, dtype=float)
    basis = ShBasis(degree)
    zon = watson_zonal(float(kappa), degree)
    per_l = np.repeat(zon, 2 * np.arange(0, degree + 1, 2) + 1)
    Y = real_sh(m, degree)  # (N, n, K)
    wts = mask / mask.sum(axis=1, keepdims=True)
    return np.einsum("ni,nik->nk", wts, Y) * per_l
