import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qualcon.metrics import UndefinedMetricError, five_crop_boxes, five_crop_score, five_crops, plcc, rankdata, srcc


def textbook_pearson(x, y):
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def textbook_ranks(x):
    # O(n^2): rank = 1 + #smaller + (#equal - 1) / 2
    return [1 + sum(v < a for v in x) + (sum(v == a for v in x) - 1) / 2 for a in x]


def random_pair(seed):
    gen = np.random.default_rng(seed)
    n = int(gen.integers(3, 60))
    if seed % 2:
        # heavy ties from a small integer alphabet
        x = gen.integers(0, 5, n).astype(float)
        y = gen.integers(0, 4, n).astype(float)
    else:
        x = gen.standard_normal(n)
        y = 0.5 * x + gen.standard_normal(n)
    if np.ptp(x) == 0:
        x[0] += 1
    if np.ptp(y) == 0:
        y[0] += 1
    return x, y


@pytest.mark.parametrize("seed", range(100))
def test_against_textbook_formulas(seed):
    x, y = random_pair(seed)
    assert abs(plcc(x, y) - textbook_pearson(list(x), list(y))) <= 1e-12
    ref = textbook_pearson(textbook_ranks(list(x)), textbook_ranks(list(y)))
    assert abs(srcc(x, y) - ref) <= 1e-12


def test_rank_examples():
    assert rankdata([10, 20, 20, 30]).tolist() == [1, 2.5, 2.5, 4]
    assert rankdata([3, 1, 2]).tolist() == [3, 1, 2]


def test_srcc_examples():
    assert srcc([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0, abs=1e-15)
    assert srcc([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    # no-ties closed form 1 - 6 sum d^2 / (n (n^2 - 1)) = 1 - 12/120
    assert srcc([1, 2, 3, 4, 5], [2, 1, 3, 4, 5]) == pytest.approx(0.9, abs=1e-12)


def test_plcc_exact_line():
    x = np.arange(7.0)
    assert plcc(x, 3 * x - 2) == pytest.approx(1.0, abs=1e-15)


def test_undefined_cases():
    with pytest.raises(UndefinedMetricError):
        srcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedMetricError):
        plcc([1, 2], [3, 4])
    with pytest.raises(ValueError):
        plcc([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        srcc([1, 2, np.nan], [1, 2, 3])


vectors = st.lists(st.floats(-100, 100, allow_nan=False), min_size=4, max_size=30)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=4, max_size=30), st.integers(0, 10_000))
def test_srcc_invariant_under_monotone_transform(xs, seed):
    # integer inputs keep the transform strictly increasing in floating point too
    x = np.array(xs, dtype=float)
    y = np.random.default_rng(seed).standard_normal(len(x))
    if np.ptp(x) == 0:
        return
    assert srcc(np.exp(x / 10) + x**3, y) == pytest.approx(srcc(x, y), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(vectors, st.floats(0.01, 100), st.floats(-100, 100), st.integers(0, 10_000))
def test_plcc_invariant_under_affine_map(xs, a, b, seed):
    x = np.array(xs)
    y = np.random.default_rng(seed).standard_normal(len(x))
    if np.ptp(x) < 1e-3:
        return
    assert plcc(a * x + b, y) == pytest.approx(plcc(x, y), abs=1e-9)
    assert plcc(-a * x + b, y) == pytest.approx(-plcc(x, y), abs=1e-9)


def test_symmetry():
    x, y = random_pair(3)
    assert srcc(x, y) == pytest.approx(srcc(y, x), abs=1e-15)
    assert plcc(x, y) == pytest.approx(plcc(y, x), abs=1e-15)


# ------------------------------------------------------------------ five-crop


def test_five_crop_boxes():
    assert five_crop_boxes(10, 12, 4) == [(0, 0), (0, 8), (6, 0), (6, 8), (3, 4)]
    assert five_crop_boxes(4, 4, 4) == [(0, 0)] * 5
    with pytest.raises(ValueError):
        five_crop_boxes(3, 10, 4)


def test_five_crop_of_exact_size_equals_single_pass():
    img = np.random.default_rng(0).random((8, 8, 3))
    crops = five_crops(img, 8)
    assert all(np.array_equal(c, img) for c in crops)
    model = lambda b: b.mean(axis=(1, 2, 3))
    assert five_crop_score(model, img, 8) == pytest.approx(img.mean(), abs=1e-15)


def test_five_crop_score_is_mean_of_crop_scores():
    img = np.random.default_rng(1).random((9, 11, 3))
    model = lambda b: b[:, 0, 0, 0]
    expected = np.mean([img[t, l, 0] for t, l in five_crop_boxes(9, 11, 5)])
    assert five_crop_score(model, img, 5) == pytest.approx(expected, abs=1e-15)
