import math

import numpy as np
import pytest

from trifill import metrics as mm


# ---------------------------------------------------------------------------
# psnr


def test_psnr_identical_hits_cap():
    a = np.random.default_rng(0).uniform(size=(3, 16, 16))
    assert mm.psnr(a, a) == 100.0


def test_psnr_closed_form_20db():
    a = np.zeros((8, 8))
    b = np.full((8, 8), 0.1)  # mse = 0.01
    assert mm.psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_psnr_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(3, 9, 9))
    b = rng.uniform(size=(3, 9, 9))
    acc = 0.0
    for idx in np.ndindex(a.shape):
        acc += (a[idx] - b[idx]) ** 2
    want = 10.0 * math.log10(1.0 / (acc / a.size))
    assert abs(mm.psnr(a, b) - want) <= 1e-10


def test_psnr_symmetry():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
    assert mm.psnr(a, b) == mm.psnr(b, a)


def test_psnr_rejects_out_of_range():
    with pytest.raises(ValueError, match="0, 1"):
        mm.psnr(np.full((2, 2), 1.5), np.zeros((2, 2)))


def test_psnr_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        mm.psnr(np.zeros((2, 2)), np.zeros((3, 3)))


def test_psnr_masked_counts_only_hole():
    a = np.zeros((1, 3, 4, 4))
    b = a.copy()
    mask = np.zeros((1, 1, 4, 4))
    mask[..., :2, :2] = 1.0
    b[..., 0, 0] = 0.2  # error inside the hole
    b[..., 3, 3] = 0.9  # error outside, must not count
    want = 10 * math.log10(1.0 / (3 * 0.2**2 / (3 * 4)))  # 3 channels x 4 hole px
    assert mm.psnr_masked(a, b, mask) == pytest.approx(want, abs=1e-12)


def test_psnr_masked_rejects_empty_mask():
    with pytest.raises(ValueError, match="no pixels"):
        mm.psnr_masked(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# ssim


def test_ssim_self_is_exactly_one():
    a = np.random.default_rng(3).uniform(size=(16, 16))
    assert mm.ssim(a, a) == 1.0
    rgb = np.random.default_rng(4).uniform(size=(3, 16, 16))
    assert mm.ssim(rgb, rgb) == 1.0


def test_ssim_anticorrelated_checkerboard_negative():
    a = np.indices((16, 16)).sum(axis=0) % 2.0
    assert mm.ssim(a, 1.0 - a) < 0.0


def test_ssim_window3_uniform_matches_loop_oracle():
    rng = np.random.default_rng(5)
    a = rng.uniform(size=(8, 8))
    b = rng.uniform(size=(8, 8))
    c1, c2 = 0.01**2, 0.03**2
    scores = []
    for i in range(6):
        for j in range(6):
            wa, wb = a[i:i + 3, j:j + 3], b[i:i + 3, j:j + 3]
            mua, mub = wa.mean(), wb.mean()
            va, vb = (wa * wa).mean() - mua**2, (wb * wb).mean() - mub**2
            cov = (wa * wb).mean() - mua * mub
            scores.append(((2 * mua * mub + c1) * (2 * cov + c2))
                          / ((mua**2 + mub**2 + c1) * (va + vb + c2)))
    want = float(np.mean(scores))
    assert abs(mm.ssim(a, b, window_size=3, uniform=True) - want) <= 1e-10


def test_ssim_symmetry_and_bounds():
    rng = np.random.default_rng(6)
    a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    assert abs(mm.ssim(a, b) - mm.ssim(b, a)) <= 1e-12
    assert -1.0 <= mm.ssim(a, b) <= 1.0


def test_ssim_rejects_small_image():
    with pytest.raises(ValueError, match="window"):
        mm.ssim(np.zeros((8, 8)), np.zeros((8, 8)))  # default window is 11


def test_gaussian_window_normalized():
    k = mm.gaussian_window()
    assert k.shape == (11, 11)
    assert k.sum() == pytest.approx(1.0, abs=1e-12)
    assert k[5, 5] == k.max()


# ---------------------------------------------------------------------------
# miou


def test_miou_perfect_match():
    labels = np.random.default_rng(7).integers(0, 4, size=(8, 8))
    score, per = mm.miou(labels, labels, 4)
    assert score == 1.0
    assert all(v == 1.0 for v in per if not math.isnan(v))


def test_miou_disjoint_single_classes():
    pred = np.zeros((4, 4), dtype=int)
    gt = np.ones((4, 4), dtype=int)
    score, per = mm.miou(pred, gt, 2)
    assert score == 0.0
    assert per == [0.0, 0.0]


def test_miou_counting_oracle_4x4():
    pred = np.array([[0, 0, 1, 1],
                     [0, 0, 1, 1],
                     [2, 2, 3, 3],
                     [2, 2, 3, 3]])
    gt = np.array([[0, 0, 1, 1],
                   [0, 1, 1, 1],
                   [2, 2, 2, 3],
                   [2, 2, 3, 3]])
    score, per = mm.miou(pred, gt, 4)
    # class 0: inter 3, union 4; class 1: inter 4, union 5
    # class 2: inter 4, union 5; class 3: inter 3, union 4
    assert per == [3 / 4, 4 / 5, 4 / 5, 3 / 4]
    assert score == pytest.approx((3 / 4 + 4 / 5 + 4 / 5 + 3 / 4) / 4, abs=1e-15)


def test_miou_excludes_absent_classes():
    pred = np.zeros((4, 4), dtype=int)
    gt = np.zeros((4, 4), dtype=int)
    score, per = mm.miou(pred, gt, 4)
    assert score == 1.0  # only class 0 participates
    assert math.isnan(per[3])


def test_miou_relabel_invariance():
    rng = np.random.default_rng(8)
    pred = rng.integers(0, 3, size=(10, 10))
    gt = rng.integers(0, 3, size=(10, 10))
    perm = np.array([2, 0, 1])
    a, _ = mm.miou(pred, gt, 3)
    b, _ = mm.miou(perm[pred], perm[gt], 3)
    assert a == pytest.approx(b, abs=1e-15)


def test_miou_rejects_out_of_range_labels():
    with pytest.raises(ValueError, match="labels"):
        mm.miou(np.array([[4]]), np.array([[0]]), 4)


# ---------------------------------------------------------------------------
# report serialization


def test_eval_report_text_round_trip():
    rep = mm.EvalReport(psnr=31.5, psnr_hole=24.25, ssim=0.91,
                        miou=0.83, per_class_iou=[1.0, 0.7, float("nan")], samples=8)
    text = rep.to_text()
    parsed = dict(line.split(" = ") for line in text.strip().splitlines())
    assert parsed["samples"] == "8"
    assert float(parsed["psnr_hole"]) == 24.25
    assert parsed["iou_class_2"] == "nan"
    assert rep.to_csv_row().startswith("8,31.5")
    assert mm.EvalReport.CSV_HEADER.count(",") == rep.to_csv_row().count(",")
