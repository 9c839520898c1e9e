import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panforge.errors import ShapeError
from panforge.metrics import (MetricReport, evaluate_pair, mean_report, psnr, read_report, ssim, to_gray, uqi,
                              vif, write_report)

# -- brute-force references: one window at a time, no filtering tricks -------


def ref_psnr(a, b):
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    return 10 * math.log10(1.0 / (total / a.size))


def ref_gauss(size, sigma):
    g = [math.exp(-((i - (size - 1) / 2) ** 2) / (2 * sigma ** 2)) for i in range(size)]
    s = sum(g)
    return np.array([v / s for v in g])


def ref_ssim(a, b, size=11, sigma=1.5):
    w = np.outer(ref_gauss(size, sigma), ref_gauss(size, sigma))
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for i in range(a.shape[0] - size + 1):
        for j in range(a.shape[1] - size + 1):
            pa, pb = a[i:i + size, j:j + size], b[i:i + size, j:j + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * (pa - ma) ** 2).sum(), (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def ref_uqi(a, b, wy=8, wx=8):
    vals = []
    for i in range(a.shape[0] - wy + 1):
        for j in range(a.shape[1] - wx + 1):
            pa, pb = a[i:i + wy, j:j + wx], b[i:i + wy, j:j + wx]
            ma, mb = pa.mean(), pb.mean()
            va, vb = ((pa - ma) ** 2).mean(), ((pb - mb) ** 2).mean()
            cov = ((pa - ma) * (pb - mb)).mean()
            den = (va + vb) * (ma ** 2 + mb ** 2)
            if den < 1e-12:
                c = 1e-8
                vals.append((2 * ma * mb + c) * (2 * cov + c) / ((ma ** 2 + mb ** 2 + c) * (va + vb + c)))
            else:
                vals.append(4 * cov * ma * mb / den)
    return float(np.mean(vals))


def ref_blur(img, sigma=1.0):
    r = int(4 * sigma + 0.5)
    g = ref_gauss(2 * r + 1, sigma)
    h, w = img.shape

    def mirror(i, n):
        # half-sample symmetric: -1 -> 0, n -> n - 1
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - i - 1
        return i

    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    acc += g[dy + r] * g[dx + r] * img[mirror(y + dy, h), mirror(x + dx, w)]
            out[y, x] = acc
    return out


def ref_halve(img):
    h, w = img.shape
    rows = [(i,) for i in range(0, h, 2)] if h % 2 else [(i, i + 1) for i in range(0, h, 2)]
    cols = [(j,) for j in range(0, w, 2)] if w % 2 else [(j, j + 1) for j in range(0, w, 2)]
    out = np.zeros((len(rows), len(cols)))
    for r, ri in enumerate(rows):
        for c, cj in enumerate(cols):
            out[r, c] = np.mean([img[i, j] for i in ri for j in cj])
    return out


def ref_vif(a, b):
    a, b = a * 255.0, b * 255.0
    num = den = 0.0
    for scale in range(4):
        if scale:
            a, b = ref_halve(ref_blur(a)), ref_halve(ref_blur(b))
        for i in range(a.shape[0] - 2):
            for j in range(a.shape[1] - 2):
                pa, pb = a[i:i + 3, j:j + 3], b[i:i + 3, j:j + 3]
                ma, mb = pa.mean(), pb.mean()
                va, vb = max(((pa - ma) ** 2).mean(), 0), max(((pb - mb) ** 2).mean(), 0)
                cov = ((pa - ma) * (pb - mb)).mean()
                g = cov / (va + 1e-10)
                sv = max(vb - g * cov, 1e-10)
                num += math.log(1 + g * g * va / (sv + 2.0))
                den += math.log(1 + va / 2.0)
    return num / den


def random_pairs(n=10, size=32, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        a = rng.uniform(0, 1, (size, size))
        b = np.clip(a + rng.normal(0, rng.uniform(0.02, 0.3), a.shape), 0, 1)
        out.append((a, b))
    return out


PAIRS = random_pairs()


@pytest.mark.parametrize("metric,ref", [(psnr, ref_psnr), (ssim, ref_ssim), (uqi, ref_uqi)])
def test_matches_brute_force(metric, ref):
    for a, b in PAIRS:
        assert metric(a, b) == pytest.approx(ref(a, b), abs=1e-9)


def test_halving_odd_and_even():
    from panforge.metrics import halve

    np.testing.assert_allclose(halve(np.arange(16.0).reshape(4, 4)), [[2.5, 4.5], [10.5, 12.5]])
    np.testing.assert_allclose(halve(np.arange(9.0).reshape(3, 3)), [[0, 2], [6, 8]])


def test_vif_matches_brute_force():
    for a, b in PAIRS[:10]:
        assert vif(a, b) == pytest.approx(ref_vif(a, b), abs=1e-9)


# -- closed forms -----------------------------------------------------------


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).uniform(size=(8, 8))
    assert psnr(a, a) == math.inf


def test_psnr_half_gray():
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(32, 32))
    noise = rng.normal(size=a.shape)
    vals = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_ssim_constant_images():
    c1 = 1e-4
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(c1 / (1 + c1), abs=1e-4)
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(9.999e-5, abs=1e-8)


def test_ssim_identity_and_symmetry():
    for a, b in PAIRS:
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_uqi_anti_correlated_pair():
    assert uqi(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), window=(1, 2)) == pytest.approx(-1.0, abs=1e-12)


def test_uqi_identical_nonconstant():
    a = PAIRS[0][0]
    assert uqi(a, a) == pytest.approx(1.0, abs=1e-12)


def test_uqi_flat_windows_do_not_produce_nan():
    a = np.zeros((16, 16))
    assert uqi(a, a) == pytest.approx(1.0)
    assert np.isfinite(uqi(a, np.full((16, 16), 1e-7)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_uqi_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12))
    assert abs(uqi(a, b)) <= 1 + 1e-12


def test_vif_identical_is_one():
    for a, _ in PAIRS[:3]:
        assert vif(a, a) == pytest.approx(1.0, abs=1e-6)


def test_vif_of_blank_distortion_is_near_zero():
    a = PAIRS[0][0]
    assert 0 <= vif(a, np.zeros_like(a)) < 0.05


def test_vif_decreases_with_blur():
    from panforge.metrics import blur_reflect

    rng = np.random.default_rng(4)
    a = blur_reflect(rng.uniform(size=(64, 64)), 0.7)
    vals = [vif(a, blur_reflect(a, s) if s else a) for s in (0, 0.5, 1.0, 1.5, 2.5)]
    assert all(x > y for x, y in zip(vals, vals[1:])), vals


@pytest.mark.parametrize("metric", [psnr, ssim, uqi, vif])
def test_joint_flip_invariance(metric):
    a, b = PAIRS[1]
    assert metric(a[:, ::-1], b[:, ::-1]) == pytest.approx(metric(a, b), abs=1e-12)


# -- plumbing ---------------------------------------------------------------


def test_color_uses_luma():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(3, 32, 32)), rng.uniform(size=(3, 32, 32))
    ga = 0.299 * a[0] + 0.587 * a[1] + 0.114 * a[2]
    gb = 0.299 * b[0] + 0.587 * b[1] + 0.114 * b[2]
    np.testing.assert_allclose(to_gray(a), ga)
    assert ssim(a, b) == pytest.approx(ssim(ga, gb), abs=1e-12)


@pytest.mark.parametrize("metric,size", [(ssim, 10), (uqi, 7), (vif, 31)])
def test_too_small(metric, size):
    with pytest.raises(ShapeError):
        metric(np.zeros((size, size)), np.zeros((size, size)))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_mean_report_is_unweighted():
    reps = [MetricReport("a", 10.0, 0.5, 0.2, 0.1), MetricReport("b", 20.0, 0.7, 0.4, 0.3)]
    m = mean_report(reps)
    assert (m.id, m.psnr, m.ssim, m.uqi, m.vif) == ("mean", 15.0, 0.6, pytest.approx(0.3), pytest.approx(0.2))


def test_report_file_roundtrip(tmp_path):
    reps = [evaluate_pair(a, b, id=f"p{i}") for i, (a, b) in enumerate(PAIRS[:3])]
    path = tmp_path / "r.tsv"
    write_report(path, reps)
    back = read_report(path)
    assert [r.id for r in back] == ["p0", "p1", "p2", "mean"]
    assert back[1] == reps[1]
    lines = path.read_text().splitlines()
    assert lines[0] == "id\tpsnr\tssim\tuqi\tvif" and len(lines) == 5
