"""Rotation-equivariant spectral network mapping fitted signals to ODFs.

The network acts on real even SH coefficients. Linear layers scale each
degree block by a learned channel-mixing matrix (zonal convolution), so they
commute with rotations exactly. Nonlinearities are a softplus applied to the
function values on a near-uniform spherical grid followed by quadrature
re-projection. The last nonlinearity projects onto the higher output degree.

Training uses the SH-domain form of the quadrature-weighted squared error
(Parseval); it differs from the mesh loss only by the target's energy above
the output degree, which does not depend on the parameters.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import io
from .forward import N_MAX, AcquisitionScheme, default_scheme, forward_batch, sample_batch
from .sphere import (
    FIT_DEGREE,
    FIT_LAMBDA,
    ODF_DEGREE,
    OdfField,
    ShBasis,
    SphericalMesh,
    default_mesh,
    fit_operators,
    gauss_product_grid,
    icosphere,
    n_coeffs,
    odf_projector,
    peak_detect_batch,
    real_sh,
    watson_odf_coeffs,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class InverterArch:
    widths: tuple = (2, 16, 32, 32, 16, 8, 1)
    degree_in: int = FIT_DEGREE
    degree_out: int = ODF_DEGREE
    hidden_grid_subdivisions: int = 3
    nonlinearity: bool = True


@dataclass
class InverterConfig:
    iterations: int = 20000
    batch_size: int = 256
    lr: float = 1e-3
    lr_schedule: str = "cosine"  # "cosine" (decay to lr_floor * lr) or "constant"
    lr_floor: float = 0.01
    seed: int = 0
    kappa_target: float = 100.0
    sigma_e: float = 0.0620
    fit_lambda: float = FIT_LAMBDA
    n_probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    checkpoint_every: int = 1000
    val_size: int = 256

    def validate(self):
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("iterations >= 0, batch_size >= 1 and lr > 0 required")
        if self.kappa_target <= 0 or self.sigma_e < 0:
            raise ValueError("kappa_target > 0 and sigma_e >= 0 required")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError("lr_schedule must be 'cosine' or 'constant'")


def _hemisphere_grid(subdivisions: int):
    mesh = icosphere(subdivisions)
    idx = mesh.hemisphere
    return mesh.vertices[idx], 2.0 * mesh.weights[idx]


class SpectralNet(torch.nn.Module):
    """Stack of zonal convolutions with grid softplus in between."""

    def __init__(self, arch: InverterArch | None = None, dtype=torch.float32):
        super().__init__()
        self.arch = arch or InverterArch()
        a = self.arch
        w = a.widths
        self.n_layers = len(w) - 1
        self.degrees = [a.degree_in] * (self.n_layers - 1) + [a.degree_out]
        self.weights = torch.nn.ParameterList()
        self.biases = torch.nn.ParameterList()
        g = torch.Generator().manual_seed(0)
        for i in range(self.n_layers):
            nd = self.degrees[i] // 2 + 1
            std = 1.0 / math.sqrt(w[i])
            self.weights.append(torch.nn.Parameter(torch.randn(nd, w[i + 1], w[i], generator=g, dtype=dtype) * std))
            self.biases.append(torch.nn.Parameter(torch.zeros(w[i + 1], dtype=dtype)))
        with torch.no_grad():
            self.biases[-1][:] = 1.0 / math.sqrt(4 * math.pi)
        for d in {a.degree_in, a.degree_out}:
            self.register_buffer(f"deg_idx_{d}", torch.as_tensor(ShBasis(d).l_index // 2))
        pts, wts = _hemisphere_grid(a.hidden_grid_subdivisions)
        Y = real_sh(pts, a.degree_in)
        self.register_buffer("hid_eval", torch.as_tensor(Y.T.copy(), dtype=dtype))  # (K, P)
        self.register_buffer("hid_proj", torch.as_tensor(Y * wts[:, None], dtype=dtype))  # (P, K)
        hp, hw = gauss_product_grid(a.degree_out)
        self.register_buffer("head_eval", torch.as_tensor(real_sh(hp, a.degree_in).T.copy(), dtype=dtype))
        self.register_buffer("head_proj", torch.as_tensor(real_sh(hp, a.degree_out) * hw[:, None], dtype=dtype))

    def spectral(self, i: int, x):
        """Zonal convolution ``i`` on coefficients (B, C_in, K)."""
        d = self.degrees[i]
        W = self.weights[i][getattr(self, f"deg_idx_{d}")]  # (K, C_out, C_in)
        out = torch.einsum("koc,bck->bok", W, x)
        return out + torch.nn.functional.pad(self.biases[i][:, None], (0, out.shape[-1] - 1))

    def nonlinear(self, x, head: bool = False):
        if not self.arch.nonlinearity:
            if head:
                K = n_coeffs(self.arch.degree_out)
                return torch.nn.functional.pad(x, (0, K - x.shape[-1]))
            return x
        if head:
            return torch.nn.functional.softplus(x @ self.head_eval) @ self.head_proj
        return torch.nn.functional.softplus(x @ self.hid_eval) @ self.hid_proj

    def forward(self, x):
        """Map (B, L, K_in) signal coefficients to (B, K_out) ODF coefficients."""
        for i in range(self.n_layers):
            x = self.spectral(i, x)
            if i < self.n_layers - 2:
                x = self.nonlinear(x)
            elif i == self.n_layers - 2:
                x = self.nonlinear(x, head=True)
        return x[:, 0, :]

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def batch_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(index)]))


def simulate_pairs(size: int, rng, scheme: AcquisitionScheme, sigma_e: float, n_probs=None, n_fixed=None):
    """Draw (size) voxels: returns (n, orientations, kernels, noisy signals) with zero padding."""
    if n_fixed is not None:
        n = np.full(size, int(n_fixed))
    else:
        p = np.full(N_MAX, 1.0 / N_MAX) if n_probs is None else np.asarray(n_probs, dtype=float)
        n = rng.choice(np.arange(1, N_MAX + 1), size=size, p=p / p.sum())
    m = np.zeros((size, N_MAX, 3))
    m[:, :, 2] = 1.0
    k = np.zeros((size, N_MAX, 5))
    for nn in range(1, N_MAX + 1):
        sel = np.flatnonzero(n == nn)
        if sel.size:
            mm, kk = sample_batch(nn, sel.size, rng)
            m[sel, :nn] = mm
            k[sel, :nn] = kk
    clean = forward_batch(m, k, scheme)
    noisy = clean + sigma_e * rng.standard_normal(clean.shape)
    return n, m, k, noisy


def signal_coeffs(signals, scheme: AcquisitionScheme, degree: int = FIT_DEGREE, lam: float = FIT_LAMBDA) -> np.ndarray:
    """(N, L, K) ridge SH fit of every diffusion shell."""
    ops = fit_operators(scheme, degree, lam)
    sl = scheme.shell_slices
    return np.stack([signals[:, sl[l]] @ op.T for l, op in zip(scheme.diffusion_shells(), ops)], axis=1)


def training_batch(cfg: InverterConfig, it: int, scheme, stream: int = 1, size: int | None = None):
    rng = batch_rng(cfg.seed, stream, it)
    n, m, k, noisy = simulate_pairs(size or cfg.batch_size, rng, scheme, cfg.sigma_e, cfg.n_probs)
    x = signal_coeffs(noisy, scheme, FIT_DEGREE, cfg.fit_lambda)
    mask = np.arange(N_MAX)[None, :] < n[:, None]
    y = watson_odf_coeffs(m, mask, cfg.kappa_target, ODF_DEGREE)
    return x, y, (n, m, k)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def spectral_loss(pred, target):
    return ((pred - target) ** 2).sum(dim=1).mean()


def bayes_risk_loss(net: SpectralNet, inputs, targets, mesh: SphericalMesh | None = None):
    """Mean over the batch of ``sum_v w_v (g_v - A(f)_v)^2``.

    ``inputs`` are mesh signals (B, L, V); ``targets`` are mesh ODFs (B, V).
    Works on torch tensors (differentiable) or numpy arrays.
    """
    mesh = mesh or default_mesh()
    as_np = not torch.is_tensor(inputs)
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(inputs), dtype=dtype) if as_np else inputs
    g = torch.as_tensor(np.asarray(targets), dtype=dtype) if as_np else targets
    pinv_in, _ = odf_projector(mesh, net.arch.degree_in)
    _, phi_out = odf_projector(mesh, net.arch.degree_out)
    coeffs = x @ torch.as_tensor(pinv_in.T, dtype=dtype)
    pred = net(coeffs) @ torch.as_tensor(phi_out.T, dtype=dtype)
    w = torch.as_tensor(mesh.weights, dtype=dtype)
    loss = (((g - pred) ** 2) * w).sum(dim=1).mean()
    return loss.item() if as_np else loss


def target_on_mesh(orientations, mask, kappa: float, mesh: SphericalMesh) -> np.ndarray:
    """Equal-weight Watson mixture evaluated on the mesh, renormalised to quadrature integral 1."""
    from .forward import watson_density

    m = np.atleast_3d(np.asarray(orientations, dtype=float))
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros((m.shape[0], mesh.V))
    for r in range(m.shape[0]):
        for i in np.flatnonzero(mask[r]):
            out[r] += watson_density(mesh.vertices, m[r, i], kappa)
    out /= mesh.integrate(out)[:, None]
    return out


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _arch_dict(arch: InverterArch) -> dict:
    d = asdict(arch)
    d["widths"] = list(arch.widths)
    return d


def save_checkpoint(path, net: SpectralNet, meta: dict, optimizer=None) -> str:
    arrays = {f"param.{k}": v.detach().cpu().numpy() for k, v in net.named_parameters()}
    meta = dict(meta)
    meta["arch"] = _arch_dict(net.arch)
    meta["kind"] = "inverter"
    if optimizer is not None:
        names = [k for k, _ in net.named_parameters()]
        state = optimizer.state_dict()["state"]
        steps = {}
        for i, name in enumerate(names):
            if i in state:
                arrays[f"adam_m.{name}"] = state[i]["exp_avg"].numpy()
                arrays[f"adam_v.{name}"] = state[i]["exp_avg_sq"].numpy()
                steps[name] = float(state[i]["step"])
        meta["adam_steps"] = steps
    return io.write_container(path, arrays, meta)


def load_inverter(path, with_state: bool = False):
    arrays, meta = io.read_container(path)
    if meta.get("kind") != "inverter":
        raise ValueError(f"{path}: not an inverter checkpoint")
    a = meta["arch"]
    a["widths"] = tuple(a["widths"])
    net = SpectralNet(InverterArch(**a))
    with torch.no_grad():
        for k, p in net.named_parameters():
            p.copy_(torch.from_numpy(arrays[f"param.{k}"]))
    net.eval()
    return (net, meta, arrays) if with_state else net


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    net: SpectralNet
    losses: list = field(default_factory=list)
    checkpoint: str | None = None
    wall_time: float = 0.0


def train_inverter(
    cfg: InverterConfig,
    out_dir=None,
    scheme: AcquisitionScheme | None = None,
    arch: InverterArch | None = None,
    resume: bool = True,
    fixed_batch: bool = False,
    progress_every: int = 500,
) -> TrainResult:
    """Adam on freshly simulated batches; batch ``it`` depends only on (seed, it).

    Writes ``inverter.ckpt``, ``inverter_log.csv`` (iteration, loss, wall_time) and
    ``inverter_loss.csv`` (iteration, loss; byte-reproducible) into ``out_dir``.
    With ``fixed_batch`` every iteration reuses batch 0 (overfit check).
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    scheme = scheme or default_scheme()
    net = SpectralNet(arch)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    start = 0
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "inverter.ckpt" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if out and resume and ckpt.exists():
        start = _restore(ckpt, net, opt)
        log.info("resuming inverter training at iteration %d", start)
    if out:
        _truncate_logs(out, start)
    mesh_hash = default_mesh().digest() if out else None
    meta = {"config": asdict(cfg), "scheme_hash": scheme.digest(), "scheme": io.scheme_to_dict(scheme), "mesh_hash": mesh_hash}
    t0 = time.perf_counter()
    losses = []
    logf = open(out / "inverter_log.csv", "a", newline="") if out else None
    lossf = open(out / "inverter_loss.csv", "a", newline="") if out else None
    if out and start == 0:
        logf.write("iteration,loss,wall_time\n")
        lossf.write("iteration,loss\n")
    fixed = training_batch(cfg, 0, scheme) if fixed_batch else None
    try:
        for it in range(start, cfg.iterations):
            x, y, _ = fixed if fixed_batch else training_batch(cfg, it, scheme)
            xt = torch.as_tensor(x, dtype=torch.float32)
            yt = torch.as_tensor(y, dtype=torch.float32)
            for g in opt.param_groups:
                g["lr"] = learning_rate(cfg, it)
            opt.zero_grad()
            loss = spectral_loss(net(xt), yt)
            lv = loss.item()
            if not math.isfinite(lv):
                if ckpt is not None and ckpt.exists():
                    _restore(ckpt, net, opt)
                raise DivergenceError(f"non-finite loss at iteration {it + 1}")
            loss.backward()
            opt.step()
            losses.append(lv)
            if out:
                logf.write(f"{it + 1},{lv:.9g},{time.perf_counter() - t0:.3f}\n")
                lossf.write(f"{it + 1},{lv:.9g}\n")
                if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.iterations:
                    logf.flush()
                    lossf.flush()
                    save_checkpoint(ckpt, net, dict(meta, iteration=it + 1), opt)
            if progress_every and (it + 1) % progress_every == 0:
                log.info("inverter iter %d loss %.5f", it + 1, np.mean(losses[-progress_every:]))
    finally:
        if out:
            logf.close()
            lossf.close()
    net.eval()
    return TrainResult(net, losses, str(ckpt) if ckpt else None, time.perf_counter() - t0)


def learning_rate(cfg: InverterConfig, it: int) -> float:
    """Step size at (0-based) iteration ``it``; a pure function so resumed runs match."""
    if cfg.lr_schedule == "constant" or cfg.iterations <= 1:
        return cfg.lr
    c = 0.5 * (1.0 + math.cos(math.pi * it / (cfg.iterations - 1)))
    return cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * c)


def _restore(ckpt, net, opt) -> int:
    loaded, meta, arrays = load_inverter(ckpt, with_state=True)
    net.load_state_dict(loaded.state_dict())
    names = [k for k, _ in net.named_parameters()]
    params = list(net.parameters())
    state = {}
    for i, name in enumerate(names):
        if f"adam_m.{name}" in arrays:
            state[i] = {
                "step": torch.tensor(meta["adam_steps"][name]),
                "exp_avg": torch.from_numpy(arrays[f"adam_m.{name}"]),
                "exp_avg_sq": torch.from_numpy(arrays[f"adam_v.{name}"]),
            }
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)
    assert len(params) == len(names)
    return int(meta["iteration"])


def _truncate_logs(out: Path, upto: int) -> None:
    """Drop log rows past ``upto`` so a resumed run continues at upto + 1."""
    for name in ("inverter_log.csv", "inverter_loss.csv"):
        p = out / name
        if not p.exists():
            continue
        if upto == 0:
            p.unlink()
            continue
        rows = p.read_text().splitlines(keepends=True)
        keep = [rows[0]] + [r for r in rows[1:] if int(r.split(",", 1)[0]) <= upto]
        p.write_text("".join(keep))


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------


def odf_coeffs(net: SpectralNet, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Network output coefficients for (N, L, K_in) signal coefficients."""
    dtype = next(net.parameters()).dtype
    outs = []
    with torch.no_grad():
        for s in range(0, x.shape[0], chunk):
            outs.append(net(torch.as_tensor(x[s : s + chunk], dtype=dtype)).double().numpy())
    return np.concatenate(outs) if outs else np.zeros((0, n_coeffs(net.arch.degree_out)))


def apply_inverter(net: SpectralNet, fitted_mesh, mesh: SphericalMesh | None = None) -> OdfField:
    """Mesh-sampled fitted signal (L, V) or (N, L, V) to the clamped ODF on the mesh."""
    mesh = mesh or default_mesh()
    f = np.asarray(fitted_mesh, dtype=float)
    single = f.ndim == 2
    if single:
        f = f[None]
    L = net.arch.widths[0]
    if f.shape[1:] != (L, mesh.V):
        raise ValueError(f"expected input of shape (..., {L}, {mesh.V}), got {f.shape}")
    pinv_in, _ = odf_projector(mesh, net.arch.degree_in)
    _, phi_out = odf_projector(mesh, net.arch.degree_out)
    c = odf_coeffs(net, f @ pinv_in.T)
    vals = np.maximum(c @ phi_out.T, 0.0)
    return OdfField(vals[0] if single else vals, mesh)


def estimate_orientations(
    net: SpectralNet,
    signals,
    scheme: AcquisitionScheme,
    mesh: SphericalMesh | None = None,
    lam: float = FIT_LAMBDA,
    rel_threshold: float = 0.5,
    min_sep: float = 10.0,
    chunk: int = 256,
):
    """Fit, invert and peak-detect a batch of raw signals (N, M_total).

    Returns a list (one per voxel) of peak lists ``[(axis, value), ...]``.
    """
    mesh = mesh or default_mesh()
    sig = np.atleast_2d(np.asarray(signals, dtype=float))
    x = signal_coeffs(sig, scheme, net.arch.degree_in, lam)
    c = odf_coeffs(net, x)
    _, phi_out = odf_projector(mesh, net.arch.degree_out)
    phi_h = phi_out[mesh.hemisphere]  # the ODF is even, so half the mesh suffices
    peaks = []
    for s in range(0, c.shape[0], chunk):
        vals = np.maximum(c[s : s + chunk] @ phi_h.T, 0.0)
        peaks.extend(peak_detect_batch(vals, mesh, rel_threshold, min_sep))
    return peaks
