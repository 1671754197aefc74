"""Mixture density network posterior over single-fiber kernel parameters.

One network per fiber count n maps a fiber's demixed curves (L shells x 100
grid points, flattened) to a 3-component diagonal Gaussian mixture over
``xi = (D_a, D_e_par, D_e_perp, z1, z2)``. Inputs and outputs are
standardised with training-set statistics stored in the checkpoint.
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
from .demix import GRID, demix
from .forward import AcquisitionScheme, default_scheme, forward_batch, in_polytope, sample_batch

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -14.0, 6.0


class DegeneratePosteriorError(RuntimeError):
    """Constraint rejection accepted fewer than 1% of proposals."""


@dataclass
class MdnArch:
    input_dim: int = 2 * GRID.size
    hidden: int = 256
    depth: int = 10
    components: int = 3
    output_dim: int = 5


@dataclass
class MdnConfig:
    n_records: int = 200000
    sigma_e: float = 0.0620
    seed: int = 0
    epochs: int = 30
    batch_size: int = 512
    lr: float = 1e-3
    weight_decay: float = 0.05
    val_fraction: float = 0.1

    def validate(self):
        if self.n_records < 1 or self.epochs < 0 or self.batch_size < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("n_records >= 1, epochs >= 0, batch_size >= 1, lr > 0, weight_decay >= 0 required")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


class MdnNet(torch.nn.Module):
    def __init__(self, arch: MdnArch | None = None, dtype=torch.float32):
        super().__init__()
        self.arch = a = arch or MdnArch()
        g = torch.Generator().manual_seed(0)
        layers, d = [], a.input_dim
        for _ in range(a.depth):
            lin = torch.nn.Linear(d, a.hidden, dtype=dtype)
            torch.nn.init.kaiming_normal_(lin.weight, nonlinearity="relu", generator=g)
            torch.nn.init.zeros_(lin.bias)
            layers += [lin, torch.nn.ReLU()]
            d = a.hidden
        self.body = torch.nn.Sequential(*layers)
        K, D = a.components, a.output_dim
        self.head = torch.nn.Linear(d, K + 2 * K * D, dtype=dtype)
        torch.nn.init.normal_(self.head.weight, std=1e-2, generator=g)
        torch.nn.init.zeros_(self.head.bias)
        with torch.no_grad():
            # spread initial component means apart
            self.head.bias[K : K + K * D] = torch.linspace(-1, 1, K).repeat_interleave(D).to(dtype)

    def forward(self, x):
        """Return (log_weights (B,K), means (B,K,D), log_vars (B,K,D)) in standardised units."""
        K, D = self.arch.components, self.arch.output_dim
        h = self.head(self.body(x))
        logits = h[:, :K]
        mu = h[:, K : K + K * D].reshape(-1, K, D)
        lv = h[:, K + K * D :].reshape(-1, K, D).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return torch.log_softmax(logits, dim=1), mu, lv


def mixture_logpdf(logw, mu, lv, y):
    """Log density of diagonal Gaussian mixtures at y (B, D)."""
    z = (y[:, None, :] - mu) ** 2 / torch.exp(lv)
    comp = -0.5 * (z + lv + math.log(2 * math.pi)).sum(dim=2)
    return torch.logsumexp(logw + comp, dim=1)


@dataclass(eq=False)
class MdnModel:
    """Trained network plus standardisation statistics for one fiber count."""

    n: int
    net: MdnNet
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    meta: dict = field(default_factory=dict)

    def _x(self, curves) -> torch.Tensor:
        x = np.asarray(curves, dtype=float).reshape(-1, self.net.arch.input_dim)
        return torch.as_tensor((x - self.x_mean) / self.x_std, dtype=torch.float32)

    def mixture(self, curves):
        """Mixture parameters in original units: (weights, means, stds) with shapes (B,K), (B,K,5), (B,K,5)."""
        with torch.no_grad():
            logw, mu, lv = self.net(self._x(curves))
        w = np.exp(logw.double().numpy())
        means = mu.double().numpy() * self.y_std + self.y_mean
        stds = np.exp(0.5 * lv.double().numpy()) * self.y_std
        return w, means, stds

    def logprob(self, curves, xi) -> np.ndarray:
        """Log density of xi (B, 5) given curves (B, L*G); one value per row."""
        w, means, stds = self.mixture(curves)
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        return mixture_logpdf_np(w, means, stds, xi)


def mixture_logpdf_np(w, means, stds, xi) -> np.ndarray:
    z = (xi[:, None, :] - means) / stds
    comp = -0.5 * (z**2).sum(axis=2) - np.log(stds).sum(axis=2) - 0.5 * means.shape[2] * np.log(2 * np.pi)
    a = np.log(np.maximum(w, 1e-300)) + comp
    amax = a.max(axis=1, keepdims=True)
    return (amax + np.log(np.exp(a - amax).sum(axis=1, keepdims=True)))[:, 0]


def mdn_logprob(model: MdnModel, curves, xi) -> float:
    """Log posterior density of one kernel vector given one fiber's curves."""
    return float(model.logprob(np.asarray(curves).reshape(1, -1), np.asarray(xi, dtype=float).reshape(1, 5))[0])


# --------------------------------------------------------------------------
# sampling and point estimates
# --------------------------------------------------------------------------


@dataclass(eq=False)
class PosteriorSamples:
    samples: np.ndarray  # (n, Q, 5)
    acceptance: np.ndarray  # (n,)
    projected: bool = True

    @property
    def Q(self) -> int:
        return self.samples.shape[1]


def _valid(xi) -> np.ndarray:
    return in_polytope(xi[:, :3]) & np.all(xi[:, 3:] >= 0, axis=1)


def sample_mixture(w, means, stds, Q: int, rng) -> tuple[np.ndarray, float]:
    """Constraint-respecting draws from one mixture: (Q, 5) samples and acceptance rate."""
    out, have, tried, accepted = [], 0, 0, 0
    cap = 100 * Q
    while have < Q and tried < cap:
        k = min(max(int(1.25 * (Q - have)) + 16, 256), cap - tried)
        comp = rng.choice(w.size, size=k, p=w / w.sum())
        draw = means[comp] + stds[comp] * rng.standard_normal((k, means.shape[1]))
        ok = _valid(draw)
        tried += k
        accepted += int(ok.sum())
        take = draw[ok][: Q - have]
        out.append(take)
        have += take.shape[0]
    rate = accepted / max(tried, 1)
    if rate < 0.01 or have < Q:
        raise DegeneratePosteriorError(f"constraint acceptance {rate:.4f} below 1%; posterior fit is degenerate")
    return np.concatenate(out), rate


def project_weights(samples: np.ndarray) -> np.ndarray:
    """Rescale each joint tuple's z-weights (all fibers) to sum to one."""
    s = samples.copy()
    tot = s[:, :, 3:].sum(axis=(0, 2))  # (Q,)
    s[:, :, 3:] /= tot[None, :, None]
    return s


def sample_posterior(model: MdnModel, curves, n: int, Q: int = 5000, rng_seed=None) -> PosteriorSamples:
    """Draw Q constrained samples per fiber and project the voxel's weights to the simplex.

    ``curves`` is (n, L, G) or (n, L*G); fiber q-th samples are paired by index.
    """
    if Q < 1:
        raise ValueError("Q must be >= 1")
    rng = np.random.default_rng(rng_seed)
    c = np.asarray(curves, dtype=float).reshape(n, -1)
    w, means, stds = model.mixture(c)
    out = np.empty((n, Q, 5))
    acc = np.empty(n)
    for i in range(n):
        out[i], acc[i] = sample_mixture(w[i], means[i], stds[i], Q, rng)
    return PosteriorSamples(project_weights(out), acc, True)


def posterior_mean(samples: PosteriorSamples | np.ndarray) -> np.ndarray:
    s = samples.samples if isinstance(samples, PosteriorSamples) else np.asarray(samples)
    return s.mean(axis=-2)


def map_estimate(samples, signals, scheme: AcquisitionScheme, orientations, sigma_e: float) -> np.ndarray:
    """Joint tuple (paired by sample index) maximising the Gaussian signal likelihood.

    Returns (n, 5). Ties resolve to the lowest index. With Gaussian noise the
    maximiser is the least-squares candidate, so ``sigma_e`` does not change it.
    """
    s = samples.samples if isinstance(samples, PosteriorSamples) else np.asarray(samples)
    n, Q, _ = s.shape
    m = np.atleast_2d(orientations)[:n]
    y = np.asarray(signals.values if hasattr(signals, "values") else signals, dtype=float)
    b = scheme.all_bvals
    # axes are shared by every candidate, so b * t* is computed once
    bt = b[:, None] * np.clip((scheme.all_directions @ m.T) ** 2, 0.0, 1.0)  # (M, n)
    best, best_sse = 0, np.inf
    for start in range(0, Q, 2048):
        k = s[:, start : start + 2048]
        pred = np.zeros((k.shape[1], b.size))
        for i in range(n):
            e = np.exp(np.multiply.outer(-k[i, :, 0], bt[:, i]))
            e *= k[i, :, 3, None]
            pred += e
            e = np.multiply.outer(-k[i, :, 2], b)
            e -= np.multiply.outer(k[i, :, 1] - k[i, :, 2], bt[:, i])
            np.exp(e, out=e)
            e *= k[i, :, 4, None]
            pred += e
        pred -= y
        sse = np.einsum("qm,qm->q", pred, pred)
        j = int(np.argmin(sse))
        if sse[j] < best_sse:
            best, best_sse = start + j, sse[j]
    return s[:, best].copy()


# --------------------------------------------------------------------------
# training data
# --------------------------------------------------------------------------


def simulate_training_pairs(n: int, n_records: int, scheme: AcquisitionScheme, sigma_e: float, seed: int, chunk: int = 1000):
    """Simulate n-fiber voxels, demix with the true axes; returns (curves (N, L*G), xi (N, 5)).

    Each voxel contributes one pair per fiber. Chunk c draws from seed (seed, n, c).
    """
    xs, ys = [], []
    for c, start in enumerate(range(0, n_records, chunk)):
        size = min(chunk, n_records - start)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3, int(n), c]))
        m, k = sample_batch(n, size, rng)
        clean = forward_batch(m, k, scheme)
        noisy = clean + sigma_e * rng.standard_normal(clean.shape)
        for r in range(size):
            curves, _, _ = demix(noisy[r], scheme, m[r])
            xs.append(curves.values.reshape(n, -1))
            ys.append(k[r])
    return np.concatenate(xs), np.concatenate(ys)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _stats(a):
    # rounded to float32 so in-memory and reloaded models agree exactly
    mean = a.mean(axis=0).astype(np.float32).astype(float)
    std = a.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0).astype(np.float32).astype(float)
    return mean, std


def train_on_arrays(n: int, X, Y, cfg: MdnConfig, arch: MdnArch | None = None, out_dir=None, progress=True):
    """Fit an MDN to (X, Y) pairs; keeps the parameters with the best validation NLL.

    Writes ``mdn_n{n}.ckpt``, ``mdn_n{n}_log.csv`` and ``mdn_n{n}_loss.csv`` when
    ``out_dir`` is given. Returns (model, per-epoch losses).
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    arch = arch or MdnArch(input_dim=X.shape[1])
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4, n]))
    perm = rng.permutation(X.shape[0])
    n_val = int(round(cfg.val_fraction * X.shape[0]))
    val, tr = perm[:n_val], perm[n_val:]
    xm, xs = _stats(X[tr])
    ym, ys = _stats(Y[tr])
    Xt = torch.as_tensor((X - xm) / xs, dtype=torch.float32)
    Yt = torch.as_tensor((Y - ym) / ys, dtype=torch.float32)
    net = MdnNet(arch)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    out = Path(out_dir) if out_dir is not None else None
    logf = lossf = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / f"mdn_n{n}_log.csv", "w")
        lossf = open(out / f"mdn_n{n}_loss.csv", "w")
        logf.write("epoch,train_nll,val_nll,wall_time\n")
        lossf.write("epoch,train_nll,val_nll\n")
    t0 = time.perf_counter()
    best, best_state, history = np.inf, None, []
    try:
        for ep in range(cfg.epochs):
            net.train()
            order = rng.permutation(tr)
            tot, cnt = 0.0, 0
            for s in range(0, order.size, cfg.batch_size):
                idx = torch.as_tensor(order[s : s + cfg.batch_size])
                opt.zero_grad()
                nll = -mixture_logpdf(*net(Xt[idx]), Yt[idx]).mean()
                if not torch.isfinite(nll):
                    raise FloatingPointError(f"non-finite MDN loss in epoch {ep + 1}")
                nll.backward()
                opt.step()
                tot += nll.item() * idx.numel()
                cnt += idx.numel()
            sched.step()
            net.eval()
            with torch.no_grad():
                vi = torch.as_tensor(val) if val.size else torch.as_tensor(tr[:1000])
                vnll = -mixture_logpdf(*net(Xt[vi]), Yt[vi]).mean().item()
            history.append((tot / cnt, vnll))
            if vnll < best:
                best = vnll
                best_state = {k: v.clone() for k, v in net.state_dict().items()}
            if out:
                logf.write(f"{ep + 1},{tot / cnt:.9g},{vnll:.9g},{time.perf_counter() - t0:.3f}\n")
                lossf.write(f"{ep + 1},{tot / cnt:.9g},{vnll:.9g}\n")
            if progress and (ep + 1) % 5 == 0:
                log.info("mdn n=%d epoch %d train %.4f val %.4f", n, ep + 1, tot / cnt, vnll)
    finally:
        if logf:
            logf.close()
            lossf.close()
    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    model = MdnModel(n, net, xm, xs, ym, ys, {"config": asdict(cfg), "best_val_nll": best, "wall_time": time.perf_counter() - t0})
    if out:
        save_mdn(out / f"mdn_n{n}.ckpt", model)
    return model, history


def train_mdn(n: int, cfg: MdnConfig, out_dir=None, scheme: AcquisitionScheme | None = None, arch: MdnArch | None = None):
    """Simulate Algorithm-S3-style pairs for fiber count n and train the MDN."""
    scheme = scheme or default_scheme()
    t0 = time.perf_counter()
    X, Y = simulate_training_pairs(n, cfg.n_records, scheme, cfg.sigma_e, cfg.seed)
    sim_time = time.perf_counter() - t0
    arch = arch or MdnArch(input_dim=X.shape[1])
    model, hist = train_on_arrays(n, X, Y, cfg, arch, out_dir)
    model.meta.update({"scheme_hash": scheme.digest(), "simulation_time": sim_time, "n_pairs": int(X.shape[0])})
    if out_dir is not None:
        save_mdn(Path(out_dir) / f"mdn_n{n}.ckpt", model)
    return model, hist


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_mdn(path, model: MdnModel) -> str:
    arrays = {f"param.{k}": v.detach().numpy() for k, v in model.net.state_dict().items()}
    arrays.update({"x_mean": model.x_mean, "x_std": model.x_std, "y_mean": model.y_mean, "y_std": model.y_std})
    meta = dict(model.meta)
    meta.update({"kind": "mdn", "n": model.n, "arch": asdict(model.net.arch)})
    return io.write_container(path, arrays, meta)


def load_mdn(path) -> MdnModel:
    arrays, meta = io.read_container(path)
    if meta.get("kind") != "mdn":
        raise ValueError(f"{path}: not an MDN checkpoint")
    net = MdnNet(MdnArch(**meta["arch"]))
    sd = {k[len("param.") :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param.")}
    net.load_state_dict(sd)
    net.eval()
    f = lambda k: arrays[k].astype(float)
    return MdnModel(int(meta["n"]), net, f("x_mean"), f("x_std"), f("y_mean"), f("y_std"), meta)
