import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fiberinfer.forward import PARAM_NAMES, FiberConfig, add_noise, forward_signal, sample_batch
from fiberinfer.inverter import SpectralNet
from fiberinfer.pipeline import (
    CSV_COLUMNS,
    Models,
    classify_bootstrap,
    dr_ad,
    estimate_sigma,
    hdr,
    hdr_size,
    infer_voxel,
    inference_csv_rows,
    inference_jsonl_line,
)

from conftest import constant_model, tensor_axis_inverter

# ---------------------------------------------------------------- sigma


def test_sigma_noiseless_is_zero():
    assert estimate_sigma(np.full((5, 12), 3.7)) == pytest.approx(0.0, abs=1e-14)
    assert estimate_sigma(np.ones((5, 12))) == 0.0


def test_sigma_monte_carlo():
    rng = np.random.default_rng(1)
    b0 = 1.0 + 0.062 * rng.standard_normal((10_000, 12))
    assert estimate_sigma(b0) == pytest.approx(0.062, rel=0.02)


def test_sigma_voxel_scale_invariance(rng):
    b0 = 1.0 + 0.05 * rng.standard_normal((20, 6))
    scaled = b0.copy()
    scaled[3] *= 250.0
    assert estimate_sigma(scaled) == pytest.approx(estimate_sigma(b0), rel=1e-12)


def test_sigma_excludes_nonpositive_voxels(rng):
    b0 = 1.0 + 0.05 * rng.standard_normal((20, 6))
    bad = np.vstack([b0, -np.ones((1, 6))])
    with pytest.warns(RuntimeWarning, match="excluding 1"):
        assert estimate_sigma(bad) == estimate_sigma(b0)
    with pytest.raises(ValueError):
        estimate_sigma(np.ones((3, 1)))


# ---------------------------------------------------------------- DR / AD


def test_dr_ad_identical_members():
    m = np.array([0.0, 0.6, 0.8])
    dr, ad = dr_ad(m, np.tile(m, (50, 1)), 50)
    assert dr == 1.0 and ad == pytest.approx(0.0, abs=1e-7)


def test_dr_ad_uniform_limit():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((200_000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    _, ad = dr_ad(v[0], v, v.shape[0])
    assert ad == pytest.approx(np.arcsin(np.sqrt(2 / 3)), abs=5e-3)


def test_dr_half_and_empty():
    m = np.array([1.0, 0.0, 0.0])
    assert dr_ad(m, np.tile(m, (10, 1)), 20)[0] == 0.5
    assert dr_ad(m, np.zeros((0, 3)), 20) == (0.0, None)
    with pytest.raises(ValueError):
        dr_ad(m, [m], 0)


def _jitter(rng, axis, deg):
    v = axis + np.radians(deg) * rng.standard_normal(3)
    return v / np.linalg.norm(v)


def test_classification_discards_far_and_surplus_peaks(rng):
    est = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    reps = [
        [(-est[0], 1.0), (est[1], 0.9)],  # sign flipped onto the estimate
        [(np.array([0.0, 1.0, 0.0]), 1.0)],  # 90 degrees from both: dropped
        [(est[1], 1.0), (est[0], 0.8), (np.array([0.0, 0.7071, 0.7071]), 0.5)],  # surplus peak dropped
        [],
    ]
    g = classify_bootstrap(est, reps)
    assert len(g[0]) == 2 and len(g[1]) == 2
    for v in g[0]:
        assert v @ est[0] > 0


def test_classification_replicate_order_invariance(rng):
    est = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    reps = []
    for _ in range(200):
        k = rng.integers(0, 4)
        reps.append([(_jitter(rng, est[rng.integers(2)], 20.0), 1.0) for _ in range(k)])
    base = [dr_ad(est[i], g, 200) for i, g in enumerate(classify_bootstrap(est, reps))]
    perm = [reps[i] for i in rng.permutation(len(reps))]
    again = [dr_ad(est[i], g, 200) for i, g in enumerate(classify_bootstrap(est, perm))]
    for (d1, a1), (d2, a2) in zip(base, again):
        assert d1 == d2 and a1 == pytest.approx(a2, abs=1e-12)


# ---------------------------------------------------------------- HDR


def test_hdr_single_bin():
    for alpha in (0.01, 0.5):
        r = hdr(np.full(100, 0.337), (0.0, 1.0), alpha, 100)
        assert len(r.intervals) == 1
        lo, hi = r.intervals[0]
        assert lo <= 0.337 <= hi and hi - lo == pytest.approx(0.01)
        assert r.mass == 1.0


def test_hdr_gaussian_quantiles():
    rng = np.random.default_rng(3)
    r = hdr(rng.standard_normal(100_000), (-5.0, 5.0), 0.05, 200)
    assert len(r.intervals) == 1
    lo, hi = r.intervals[0]
    assert abs(lo + 1.96) <= 0.05 and abs(hi - 1.96) <= 0.05


def test_hdr_bimodal():
    rng = np.random.default_rng(4)
    x = np.where(rng.random(100_000) < 0.5, -2.0, 2.0) + 0.1 * rng.standard_normal(100_000)
    r = hdr(x, (-5.0, 5.0), 0.05, 200)
    assert len(r.intervals) == 2
    assert not r.contains(0.0)


def test_hdr_tie_break_prefers_lower_bins():
    x = (np.arange(10) + 0.5) / 10  # one sample per bin
    r = hdr(x, (0.0, 1.0), 0.25, 10)
    assert list(r.bins) == list(range(8))
    assert r.intervals == [(0.0, pytest.approx(0.8))]


@given(
    st.lists(st.floats(0.0, 1.0), min_size=1, max_size=300),
    st.sampled_from([0.01, 0.05, 0.1, 0.3]),
    st.integers(2, 60),
)
@settings(max_examples=80, deadline=None)
def test_hdr_mass_minimality_and_disjointness(xs, alpha, n_bins):
    x = np.array(xs)
    r = hdr(x, (0.0, 1.0), alpha, n_bins)
    assert r.mass >= 1 - alpha - 1e-12
    counts, _ = np.histogram(x, bins=r.edges)
    assert (counts[r.bins].sum() - counts[r.bins[-1]]) / x.size < 1 - alpha + 1e-12
    ends = [e for iv in r.intervals for e in iv]
    assert ends == sorted(ends) and all(b > a for a, b in r.intervals)
    assert ends[0] >= 0.0 and ends[-1] <= 1.0
    for a, b in zip(r.intervals[:-1], r.intervals[1:]):
        assert a[1] < b[0]


@given(st.lists(st.floats(-3.0, 3.0), min_size=5, max_size=300), st.integers(2, 60))
@settings(max_examples=60, deadline=None)
def test_hdr_nested_in_alpha(xs, n_bins):
    x = np.array(xs)
    wide = hdr(x, (-3.0, 3.0), 0.01, n_bins)
    narrow = hdr(x, (-3.0, 3.0), 0.10, n_bins)
    assert set(narrow.bins) <= set(wide.bins)


def test_hdr_clips_with_warning():
    with pytest.warns(RuntimeWarning, match="clipped"):
        r = hdr([-1.0, 0.5, 2.0], (0.0, 1.0), 0.05, 10)
    assert r.mass == 1.0


def test_hdr_size_values():
    rng = np.random.default_rng(5)
    full = hdr(rng.uniform(0.2, 3.0, 10_000), (0.2, 3.0), 0.0, 50)
    assert hdr_size(full) == pytest.approx(1.0)
    one = hdr(np.full(10, 0.5), (0.0, 1.0), 0.05, 200)
    assert hdr_size(one) == pytest.approx(0.005)


# ---------------------------------------------------------------- voxel inference


@pytest.fixture(scope="module")
def stand_in_models():
    means = {n: [[1.5, 2.0, 1.0, 0.5 / n, 0.5 / n]] for n in (1, 2, 3)}
    mdn = {n: constant_model([1.0], means[n], [[0.2, 0.3, 0.2, 0.05, 0.05]], n=n, input_dim=200) for n in (1, 2, 3)}
    return Models(tensor_axis_inverter(), mdn)


def _one_fiber(scheme, seed, sigma):
    rng = np.random.default_rng(seed)
    m, k = sample_batch(1, 1, rng)
    return m[0], add_noise(forward_signal(FiberConfig(m[0], k[0]), scheme), sigma, rng)


def test_infer_voxel_deterministic(scheme, stand_in_models):
    _, s = _one_fiber(scheme, 0, 0.062)
    a = infer_voxel(s, scheme, stand_in_models, 0.062, Q=300, B=40, rng_seed=[7, 3])
    b = infer_voxel(s, scheme, stand_in_models, 0.062, Q=300, B=40, rng_seed=[7, 3])
    assert inference_jsonl_line(a, 3) == inference_jsonl_line(b, 3)
    assert np.array_equal(a.samples, b.samples)


def test_infer_voxel_noise_free_bootstrap(scheme, stand_in_models):
    _, s = _one_fiber(scheme, 1, 0.0)
    r = infer_voxel(s, scheme, stand_in_models, 0.0, Q=100, B=25, rng_seed=0)
    assert r.n_hat == 1
    assert r.dr == [1.0]
    assert r.ad[0] == pytest.approx(0.0, abs=1e-7)


def test_infer_voxel_high_snr_concentration(scheme, stand_in_models):
    m, s = _one_fiber(scheme, 2, 0.004)
    r = infer_voxel(s, scheme, stand_in_models, 0.004, Q=100, B=200, rng_seed=0)
    assert r.n_hat == 1
    assert abs(r.orientations[0] @ m[0]) > np.cos(np.radians(3.0))
    assert r.dr[0] == 1.0 and r.ad[0] < 0.05


def test_infer_voxel_invariants(scheme, stand_in_models):
    _, s = _one_fiber(scheme, 3, 0.062)
    r = infer_voxel(s, scheme, stand_in_models, 0.062, Q=500, B=50, rng_seed=0, alpha=0.1, n_bins=40)
    assert 0.0 <= r.dr[0] <= 1.0 and 0.0 <= r.ad[0] <= np.pi / 2
    for p in PARAM_NAMES:
        assert r.hdr[0][p].mass >= 0.9
    assert np.allclose(r.samples[:, :, 3:].sum(axis=(0, 2)), 1.0, atol=1e-10)
    assert r.pm.shape == (1, 5) and r.map.shape == (1, 5)
    assert set(r.timings) == {"orientation", "bootstrap", "demix", "posterior"}
    rows = inference_csv_rows(r, 9)
    assert len(rows) == 1 and len(rows[0]) == len(CSV_COLUMNS)
    rec = json.loads(inference_jsonl_line(r, 9))
    assert rec["index"] == 9 and rec["n_hat"] == 1 and "timings_ms" not in rec
    assert set(rec["hdr"][0]) == set(PARAM_NAMES)


def test_infer_voxel_no_fibers(scheme, stand_in_models):
    blank = Models(SpectralNet(), stand_in_models.mdn)
    _, s = _one_fiber(scheme, 4, 0.062)
    r = infer_voxel(s, scheme, blank, 0.062, Q=10, B=5)
    assert r.n_hat == 0 and r.flag == "no fibers detected"
    assert inference_csv_rows(r, 0)[0][:3] == [0, -1, 0]
    assert json.loads(inference_jsonl_line(r, 0))["pm"] is None


def test_infer_voxel_without_bootstrap(scheme, stand_in_models):
    _, s = _one_fiber(scheme, 5, 0.062)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        r = infer_voxel(s, scheme, stand_in_models, 0.062, Q=50, B=0)
    assert r.dr == [] and r.ad == []
    assert inference_csv_rows(r, 0)[0][6:8] == ["", ""]
