import itertools
import math
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mevlens.stats import (
    InsufficientSamples, binomial_threshold, binomial_threshold_k, chi_square_2x2, decoding_matrix,
    ep_profitability_test, exclusive_providers, feature_correlations, lda_decoding_accuracy, rankdata, spearman,
)


# -- oracles written from the definitions, independent of the kernels ------------

def avg_ranks(xs):
    return [Fraction(2 * sum(1 for y in xs if y < x) + sum(1 for y in xs if y == x) + 1, 2) for x in xs]


def brute_spearman(x, y):
    rx, ry = avg_ranks(x), avg_ranks(y)
    n = len(x)
    mx, my = sum(rx) / n, sum(ry) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    return float(sxy) / math.sqrt(float(sxx) * float(syy))


def exact_threshold_k(n, chance, alpha):
    p = Fraction(chance)
    a = Fraction(alpha)
    tail = Fraction(0)
    best = n + 1
    for k in range(n, -1, -1):
        tail += math.comb(n, k) * p ** k * (1 - p) ** (n - k)
        if tail < a:
            best = k
        else:
            break
    return best


# -- Spearman -----------------------------------------------------------------------

def test_spearman_example():
    r = spearman([1, 2, 3, 4, 5], [1, 3, 2, 5, 4])
    assert r.coefficient == pytest.approx(0.8, abs=1e-12)
    assert r.n == 5


def test_rank_ties_average():
    assert list(rankdata([10, 20, 20, 30])) == [1.0, 2.5, 2.5, 4.0]


def test_spearman_matches_brute_force_oracle():
    rnd = random.Random(5)
    done = 0
    while done < 1000:
        n = rnd.randint(3, 8)
        # small integer range forces plenty of ties
        x = [rnd.randint(0, 5) for _ in range(n)]
        y = [rnd.random() if rnd.random() < 0.5 else rnd.randint(0, 4) for _ in range(n)]
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert spearman(x, y).coefficient == pytest.approx(brute_spearman(x, y), abs=1e-12)
        done += 1


@settings(max_examples=100)
@given(st.lists(st.integers(-10**6, 10**6), min_size=3, max_size=30, unique=True))
def test_monotone_features_give_unit_rho(x):
    up = [3 * v + 7 for v in x]
    down = [-(v ** 3) for v in x]
    assert spearman(x, up).coefficient == 1.0
    assert spearman(x, down).coefficient == -1.0


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=3, max_size=25))
def test_spearman_symmetric_and_invariant_under_monotone_maps(pairs):
    x = [a for a, _ in pairs]
    y = [b for _, b in pairs]
    if len(set(x)) < 2 or len(set(y)) < 2:
        return
    r = spearman(x, y)
    assert spearman(y, x).coefficient == pytest.approx(r.coefficient, abs=1e-12)
    assert spearman([v ** 3 + 1 for v in x], y).coefficient == pytest.approx(r.coefficient, abs=1e-12)
    assert spearman([-v for v in x], y).coefficient == pytest.approx(-r.coefficient, abs=1e-12)
    assert -1.0 <= r.coefficient <= 1.0 and 0.0 <= r.p_value <= 1.0


def test_permutation_pvalues_close_to_t_at_n8():
    # one representative ordering per attainable coefficient
    seen = {}
    for perm in itertools.permutations(range(8)):
        d2 = sum((i - v) ** 2 for i, v in enumerate(perm))
        seen.setdefault(d2, perm)
    for perm in seen.values():
        x = list(range(8))
        t = spearman(x, list(perm)).p_value
        p = spearman(x, list(perm), method="permutation").p_value
        assert abs(t - p) <= 0.02


def test_spearman_rejects_bad_input():
    with pytest.raises(ValueError):
        spearman([1, 2], [1, 2])
    with pytest.raises(ValueError):
        spearman([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman([1, 2, 3], [1, 2])
    with pytest.raises(ValueError):
        spearman(list(range(11)), list(range(11)), method="permutation")


# -- chi-square -----------------------------------------------------------------------

def test_chi_square_examples():
    s, p = chi_square_2x2([[10, 10], [10, 10]])
    assert s == 0.0 and p == 1.0
    s, p = chi_square_2x2([[50, 0], [0, 50]])
    assert s == pytest.approx(100.0, abs=1e-9)
    assert p < 1e-20
    # 1 dof critical value at 0.05
    s, p = chi_square_2x2([[30, 70], [20, 80]])
    assert s == pytest.approx(200 * (30 * 80 - 70 * 20) ** 2 / (100 * 100 * 50 * 150), rel=1e-12)
    assert p == pytest.approx(math.erfc(math.sqrt(s / 2)), rel=1e-12)


@settings(max_examples=200)
@given(st.lists(st.integers(1, 10_000), min_size=4, max_size=4))
def test_chi_square_transpose_and_swap_invariant(c):
    t = [[c[0], c[1]], [c[2], c[3]]]
    s, p = chi_square_2x2(t)
    assert chi_square_2x2([[c[0], c[2]], [c[1], c[3]]])[0] == pytest.approx(s, rel=1e-9, abs=1e-9)
    assert chi_square_2x2([[c[2], c[3]], [c[0], c[1]]])[0] == pytest.approx(s, rel=1e-9, abs=1e-9)
    assert s >= 0 and 0 <= p <= 1


def test_chi_square_rejects_degenerate():
    with pytest.raises(ValueError):
        chi_square_2x2([[0, 0], [3, 4]])
    with pytest.raises(ValueError):
        chi_square_2x2([[1, 2, 3], [1, 2, 3]])


# -- binomial threshold ---------------------------------------------------------------

def test_binomial_threshold_example():
    assert binomial_threshold_k(100, 0.5, 0.05) == 59
    assert exact_threshold_k(100, Fraction(1, 2), Fraction(1, 20)) == 59
    assert binomial_threshold(100) == 0.59
    # nothing is significant with a single trial at alpha 0.05; the threshold caps at 1.0
    assert binomial_threshold_k(1, 0.5, 0.05) == 2
    assert binomial_threshold(1) == 1.0
    assert binomial_threshold_k(1, 0.5, 0.6) == 1


@pytest.mark.parametrize("n", [1, 2, 5, 10, 37, 100, 333, 1000])
def test_binomial_threshold_matches_exact_oracle(n):
    for chance in (Fraction(1, 2), Fraction(1, 3)):
        for alpha in (Fraction(1, 20), Fraction(1, 100)):
            assert binomial_threshold_k(n, float(chance), float(alpha)) == exact_threshold_k(n, chance, alpha)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 400), st.sampled_from([0.5, 1 / 3, 0.2]), st.floats(0.001, 0.2), st.floats(0.001, 0.2))
def test_binomial_threshold_monotone_in_alpha(n, chance, a1, a2):
    lo, hi = sorted((a1, a2))
    # a stricter alpha never lowers the required count
    assert binomial_threshold_k(n, chance, lo) >= binomial_threshold_k(n, chance, hi)


# -- LDA decoding ----------------------------------------------------------------------

def test_lda_separable():
    x = [0.0] * 50 + [1.0] * 50
    y = [False] * 50 + [True] * 50
    r = lda_decoding_accuracy(x, y, folds=5, seed=1)
    assert r.decoding_accuracy == 1.0 and r.significant and r.threshold == 0.59


def test_lda_all_constant_is_chance():
    r = lda_decoding_accuracy([0.0] * 100, [False] * 50 + [True] * 50, folds=5, seed=1)
    assert r.decoding_accuracy == 0.5 and not r.significant


def test_lda_null_mostly_below_threshold():
    rng = np.random.default_rng(3)
    below = 0
    runs = 200
    for i in range(runs):
        x = rng.random(120)
        y = rng.random(120) < 0.5
        r = lda_decoding_accuracy(x, y, folds=5, seed=i)
        below += r.decoding_accuracy <= r.threshold
    assert below / runs >= 0.95


def test_lda_label_symmetry():
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.normal(0, 1, 60), rng.normal(0.8, 1, 60)])
    y = np.array([False] * 60 + [True] * 60)
    a = lda_decoding_accuracy(x, y, seed=9, builder_id="b", provider_id="p")
    b = lda_decoding_accuracy(x, ~y, seed=9, builder_id="b", provider_id="p")
    assert a.decoding_accuracy == b.decoding_accuracy


def test_lda_insufficient_samples():
    with pytest.raises(InsufficientSamples):
        lda_decoding_accuracy([0.1] * 20, [True] * 9 + [False] * 11, folds=5)


# -- EP rules --------------------------------------------------------------------------

def test_exclusive_provider_rule():
    from mevlens.stats import DecodingResult as R
    res = [R("A", "p", 0.9, 0.6, True, 100), R("B", "p", 0.5, 0.6, False, 100),
           R("A", "q", 0.9, 0.6, True, 100), R("B", "q", 0.9, 0.6, True, 100),
           R("A", "r", 0.5, 0.6, False, 100)]
    assert exclusive_providers(res) == [("p", "A")]


def test_decoding_matrix_finds_planted_provider():
    rng = np.random.default_rng(8)
    blocks = []
    for i in range(400):
        b = "A" if i % 2 else "B"
        share = {"ep": float(rng.random() < 0.5) * 0.3 if b == "A" else 0.0, "n": float(rng.random())}
        blocks.append((b, share))
    res, skipped = decoding_matrix(blocks, ["A", "B"], ["ep", "n"], seed=2)
    assert skipped == []
    sig = {(r.builder_id, r.provider_id) for r in res if r.significant}
    # the provider separates both A-vs-rest and B-vs-rest, so it is not exclusive here
    assert ("A", "ep") in sig and ("B", "ep") in sig
    assert exclusive_providers(res) == []


def test_ep_profitability_direction():
    counts = {"A": {"profitable": 46, "neutral": 54}, "B": {"profitable": 20, "neutral": 80},
              "C": {"profitable": 20, "subsidized": 80}}
    r = ep_profitability_test(counts, ["A"])
    assert r["table"] == [[46, 54], [40, 160]]
    assert r["ep_profitable_rate"] == 0.46 and r["non_ep_profitable_rate"] == 0.2
    assert r["p_value"] < 0.05


def test_feature_correlations_shuffled_mostly_insignificant():
    rng = np.random.default_rng(12)
    hits = total = 0
    for _ in range(2000):
        rows, _ = feature_correlations({"profit": list(rng.random(20))}, {"f": list(rng.random(20))})
        hits += len(rows)
        total += 1
    assert hits / total <= 0.065


def test_feature_correlations_report_zero_variance():
    rows, diag = feature_correlations({"t": [1, 2, 3, 4]}, {"flat": [1, 1, 1, 1], "up": [1, 2, 3, 5]},
                                      only_significant=False)
    assert [(a, b) for a, b, _ in rows] == [("t", "up")]
    assert len(diag) == 1 and "flat" in diag[0]
