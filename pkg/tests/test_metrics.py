import csv
from fractions import Fraction

import numpy as np
import pytest

import oracles
from tdac.metrics import (
    MetricsReport,
    aggregate,
    boundary_f_at,
    boundf_score,
    connected_components,
    dice_score,
    evaluate_masks,
    iou_score,
    mask_boundary,
    wcov_score,
    write_metrics_csv,
)


def random_pairs(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        # blobby masks: threshold a smoothed field so components and boundaries are varied
        out = []
        for _ in range(2):
            f = rng.random((size // 4, size // 4)).repeat(4, 0).repeat(4, 1) + 0.3 * rng.random((size, size))
            out.append((f > rng.uniform(0.5, 0.9)).astype(np.uint8))
        yield out


def test_metrics_match_brute_force_oracles():
    for x, g in random_pairs(30, seed=1):
        xl, gl = x.tolist(), g.tolist()
        assert dice_score(x, g) == oracles.dice(xl, gl)
        assert iou_score(x, g) == oracles.iou(xl, gl)
        assert wcov_score(x, g) == oracles.wcov(xl, gl)
        assert boundf_score(x, g) == oracles.boundf(xl, gl)


def test_dice_iou_identity():
    for x, g in random_pairs(100, seed=2):
        i = iou_score(x, g)
        assert abs(dice_score(x, g) - 2 * i / (1 + i)) < 1e-15


def test_overlap_examples():
    g = np.zeros((10, 10), np.uint8)
    g[2:6, 2:6] = 1
    assert dice_score(g, g) == 1.0 and iou_score(g, g) == 1.0
    far = np.roll(g, 5, axis=1)
    assert dice_score(far, g) == 0.0 and iou_score(far, g) == 0.0
    half = np.roll(g, 2, axis=1)  # same size, half overlap
    assert dice_score(half, g) == 0.5
    assert abs(iou_score(half, g) - 1 / 3) < 1e-15
    empty = np.zeros_like(g)
    assert dice_score(empty, empty) == 1.0 and iou_score(empty, empty) == 1.0


def test_connectivity():
    m = np.zeros((4, 4), np.uint8)
    m[1, 1] = m[2, 2] = 1
    assert connected_components(m)[1] == 1
    checker = np.array([[1, 0], [0, 1]], np.uint8)
    assert connected_components(checker)[1] == 1
    m = np.zeros((5, 5), np.uint8)
    m[0, 3] = 1
    m[3, 0] = 1
    labels, n = connected_components(m)
    assert n == 2 and labels[0, 3] == 1 and labels[3, 0] == 2


def test_wcov_examples():
    g = np.zeros((20, 20), np.uint8)
    g[2:6, 2:6] = 1
    g[10:14, 10:14] = 1
    assert wcov_score(g, g) == 1.0
    assert wcov_score(np.zeros_like(g), g) == 0.0
    one = np.zeros_like(g)
    one[2:6, 2:6] = 1
    assert wcov_score(one, g) == 0.5
    assert wcov_score(g, np.zeros_like(g)) == 0.0


def test_boundf_translated_square():
    g = np.zeros((40, 40), np.uint8)
    g[10:30, 10:30] = 1
    x = np.roll(g, 3, axis=1)
    # 76 boundary pixels per square; the shared top and bottom edges plus
    # the near corners give 38 matches at theta=1 and 42 at theta=2
    scores = [boundary_f_at(x, g, t) for t in range(1, 6)]
    assert scores == [0.5, 42 / 76, 1.0, 1.0, 1.0]
    assert abs(boundf_score(x, g) - float(Fraction(77, 95))) < 1e-15
    assert boundf_score(x, g) == oracles.boundf(x.tolist(), g.tolist())


def test_boundf_conventions():
    g = np.zeros((10, 10), np.uint8)
    g[3:7, 3:7] = 1
    assert boundf_score(g, g) == 1.0
    assert boundf_score(np.zeros_like(g), g) == 0.0
    z = np.zeros_like(g)
    assert boundf_score(z, z) == 1.0
    # the image frame is not a boundary
    assert not mask_boundary(np.ones((5, 5), np.uint8)).any()


def test_translation_invariance():
    for x, g in random_pairs(5, seed=3):
        big_x, big_g = np.zeros((40, 40), np.uint8), np.zeros((40, 40), np.uint8)
        big_x[2:34, 3:35], big_g[2:34, 3:35] = x, g
        a, b = evaluate_masks(big_x, big_g), evaluate_masks(np.roll(big_x, 3, 0), np.roll(big_g, 3, 0))
        assert a == b


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        dice_score(np.zeros((3, 3)), np.zeros((3, 4)))


def test_csv_rows_and_aggregate(tmp_path):
    reports = [evaluate_masks(x, g) for x, g in random_pairs(4, seed=4)]
    path = tmp_path / "m.csv"
    write_metrics_csv(path, [f"img{i}" for i in range(4)], reports)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["image_id", "dice", "miou", "wcov", "boundf"]
    assert len(rows) == 1 + 4 + 1 and rows[-1][0] == "mean"
    agg = aggregate(reports)
    assert float(rows[-1][2]) == agg.miou
    for r in reports:
        assert all(0.0 <= v <= 1.0 for v in (r.dice, r.miou, r.wcov, r.boundf))
    with pytest.raises(ValueError):
        aggregate([])
    assert isinstance(agg, MetricsReport)
