"""Statistical kernels: Spearman correlation, 2x2 chi-square, binomial
significance threshold, 1-D LDA decoding accuracy and Exclusive-Provider
identification.

Ranking, correlation, the chi-square statistic, the binomial tail and the LDA
are written out here; only the Student-t tail comes from scipy.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import stdtr

DEFAULT_ALPHA = 0.05
DEFAULT_SEED = 20231001
DEFAULT_FOLDS = 5
MAX_PERMUTATION_N = 10


class InsufficientSamples(ValueError):
    pass


# -- Spearman ----------------------------------------------------------------------

@dataclass(frozen=True)
class CorrelationResult:
    coefficient: float
    p_value: float
    n: int
    significant: bool


def rankdata(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    a = np.asarray(values, dtype=float)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(len(a), dtype=float)
    i = 0
    while i < len(a):
        j = i + 1
        while j < len(a) and a[order[j]] == a[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    return ranks


def _pearson(rx: np.ndarray, ry: np.ndarray) -> float:
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise ValueError("correlation undefined: zero-variance input")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def _t_pvalue(rho: float, n: int) -> float:
    if abs(rho) >= 1.0:
        return 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(min(1.0, 2.0 * stdtr(n - 2, -abs(t))))


def _permutation_pvalue(rx: np.ndarray, ry: np.ndarray, rho: float) -> float:
    # two-sided mid-p over all n! reorderings of the second ranking
    n = len(rx)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    rhos = (dy[perms] @ dx) / math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy)))
    ref = abs(rho)
    above = np.count_nonzero(np.abs(rhos) > ref + 1e-9)
    equal = np.count_nonzero(np.abs(np.abs(rhos) - ref) <= 1e-9)
    return float((above + 0.5 * equal) / len(perms))


def spearman(x: Sequence[float], y: Sequence[float], alpha: float = DEFAULT_ALPHA,
             method: str = "t") -> CorrelationResult:
    """Spearman rank correlation with a two-sided p-value.

    ``method="t"`` uses the Student-t approximation with n-2 degrees of
    freedom; ``method="permutation"`` enumerates all reorderings (n <= 10).
    """
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 observations")
    rx, ry = rankdata(x), rankdata(y)
    rho = _pearson(rx, ry)
    if method == "t":
        p = _t_pvalue(rho, n)
    elif method == "permutation":
        if n > MAX_PERMUTATION_N:
            raise ValueError(f"permutation mode supports n <= {MAX_PERMUTATION_N}")
        p = _permutation_pvalue(rx, ry, rho)
    else:
        raise ValueError(f"unknown method {method!r}")
    return CorrelationResult(rho, p, n, p < alpha)


# -- chi-square -------------------------------------------------------------------------

def chi_square_2x2(table) -> tuple[float, float]:
    """Pearson chi-square statistic (no continuity correction) and its p-value, 1 dof."""
    t = [[float(c) for c in row] for row in table]
    if len(t) != 2 or any(len(r) != 2 for r in t):
        raise ValueError("expected a 2x2 table")
    if any(c < 0 for r in t for c in r):
        raise ValueError("negative cell count")
    rows = [t[0][0] + t[0][1], t[1][0] + t[1][1]]
    cols = [t[0][0] + t[1][0], t[0][1] + t[1][1]]
    total = rows[0] + rows[1]
    if min(rows) <= 0 or min(cols) <= 0:
        raise ValueError("zero marginal in contingency table")
    stat = 0.0
    for i in range(2):
        for j in range(2):
            e = rows[i] * cols[j] / total
            stat += (t[i][j] - e) ** 2 / e
    return stat, math.erfc(math.sqrt(stat / 2.0))


# -- binomial threshold ---------------------------------------------------------------

def _logaddexp(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    hi, lo = (a, b) if a > b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def binomial_threshold_k(n: int, chance: float, alpha: float) -> int:
    """Smallest k with P(X >= k) < alpha for X ~ Binomial(n, chance).

    Returns n + 1 when even P(X = n) is not below alpha.
    """
    if n < 1 or not 0 < chance < 1 or not 0 < alpha < 1:
        raise ValueError("need n >= 1, 0 < chance < 1, 0 < alpha < 1")
    lp, lq = math.log(chance), math.log1p(-chance)
    log_alpha = math.log(alpha)
    lgn = math.lgamma(n + 1)
    tail = -math.inf
    best = n + 1
    for k in range(n, -1, -1):
        log_pmf = lgn - math.lgamma(k + 1) - math.lgamma(n - k + 1) + k * lp + (n - k) * lq
        tail = _logaddexp(tail, log_pmf)
        if tail < log_alpha:
            best = k
        else:
            break
    return best


def binomial_threshold(n: int, chance: float = 0.5, alpha: float = DEFAULT_ALPHA) -> float:
    """Decoding-accuracy threshold k/n, capped at 1.0."""
    return min(1.0, binomial_threshold_k(n, chance, alpha) / n)


# -- LDA decoding ---------------------------------------------------------------------

@dataclass(frozen=True)
class DecodingResult:
    builder_id: str
    provider_id: str
    decoding_accuracy: float
    threshold: float
    significant: bool
    n_test: int


def task_rng(seed: int, *keys: str) -> np.random.Generator:
    """Independent stream for one (builder, provider) task, stable across runs."""
    words = [seed & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(int.from_bytes(hashlib.sha256(k.encode()).digest()[:8], "little"))
    return np.random.default_rng(np.random.SeedSequence(words))


def balance_classes(target: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices of a class-balanced subsample (majority class subsampled)."""
    pos = np.flatnonzero(target)
    neg = np.flatnonzero(~target)
    if len(pos) == len(neg):
        return np.arange(len(target))
    small, big = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    keep = rng.choice(big, size=len(small), replace=False)
    return np.sort(np.concatenate([small, keep]))


def stratified_folds(target: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per sample, dealt round-robin within each class along one shared
    random order (so swapping class labels leaves the folds unchanged)."""
    order = rng.permutation(len(target))
    folds = np.empty(len(target), dtype=np.int64)
    seen = [0, 0]
    for i in order:
        c = int(target[i])
        folds[i] = seen[c] % k
        seen[c] += 1
    return folds


def lda_scores(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray) -> np.ndarray:
    """Two-class 1-D LDA discriminant (positive favours class 1)."""
    x0, x1 = train_x[~train_y], train_x[train_y]
    mu0, mu1 = x0.mean(), x1.mean()
    dof = len(train_x) - 2
    var = (((x0 - mu0) ** 2).sum() + ((x1 - mu1) ** 2).sum()) / dof if dof > 0 else 0.0
    log_prior = math.log(len(x1) / len(x0))
    disc = (test_x - (mu0 + mu1) / 2.0) * (mu1 - mu0)
    if var > 0:
        return disc / var + log_prior
    # degenerate spread: the data term dominates wherever it is nonzero
    return np.where(disc != 0, disc, log_prior)


def lda_decoding_accuracy(feature: Sequence[float], target: Sequence[bool], folds: int = DEFAULT_FOLDS,
                          seed: int = DEFAULT_SEED, alpha: float = DEFAULT_ALPHA,
                          builder_id: str = "", provider_id: str = "",
                          rng: np.random.Generator | None = None) -> DecodingResult:
    """Cross-validated accuracy of a 1-D LDA separating ``target`` by ``feature``.

    Classes are balanced by subsampling the majority, so chance is 0.5. Test
    points lying exactly on the decision boundary count as half correct.
    """
    x = np.asarray(feature, dtype=float)
    y = np.asarray(target, dtype=bool)
    if len(x) != len(y):
        raise ValueError("feature and target differ in length")
    n_min = min(int(y.sum()), int((~y).sum()))
    if n_min < 2 * folds:
        raise InsufficientSamples(f"{builder_id}/{provider_id}: {n_min} samples in smaller class, need {2 * folds}")
    if rng is None:
        rng = task_rng(seed, builder_id, provider_id)
    idx = balance_classes(y, rng)
    x, y = x[idx], y[idx]
    fold_of = stratified_folds(y, folds, rng)
    correct = 0.0
    for f in range(folds):
        test = fold_of == f
        s = lda_scores(x[~test], y[~test], x[test])
        truth = y[test]
        correct += np.count_nonzero((s > 0) & truth) + np.count_nonzero((s < 0) & ~truth)
        correct += 0.5 * np.count_nonzero(s == 0)
    n = len(y)
    da = correct / n
    thr = binomial_threshold(n, 0.5, alpha)
    return DecodingResult(builder_id, provider_id, da, thr, da > thr, n)


def decoding_matrix(block_shares: Sequence[tuple[str, Mapping[str, float]]], builders: Iterable[str],
                    providers: Iterable[str], folds: int = DEFAULT_FOLDS, seed: int = DEFAULT_SEED,
                    alpha: float = DEFAULT_ALPHA) -> tuple[list[DecodingResult], list[str]]:
    """Decode every (builder, provider) pair over the given blocks.

    ``block_shares`` holds one ``(builder_id, {provider: share})`` per block.
    Returns the results plus diagnostics for skipped pairs.
    """
    owners = np.array([b for b, _ in block_shares], dtype=object)
    results, skipped = [], []
    providers = sorted(providers)
    columns = {p: np.array([s.get(p, 0.0) for _, s in block_shares], dtype=float) for p in providers}
    for b in sorted(builders):
        target = owners == b
        for p in providers:
            try:
                results.append(lda_decoding_accuracy(columns[p], target, folds, seed, alpha, b, p))
            except InsufficientSamples as exc:
                skipped.append(str(exc))
    return results, skipped


def exclusive_providers(results: Iterable[DecodingResult]) -> list[tuple[str, str]]:
    """Providers significant for exactly one builder, as (provider, builder)."""
    sig: dict[str, list[str]] = {}
    for r in results:
        sig.setdefault(r.provider_id, [])
        if r.significant:
            sig[r.provider_id].append(r.builder_id)
    return sorted((p, bs[0]) for p, bs in sig.items() if len(bs) == 1)


def ep_profitability_test(class_counts: Mapping[str, Mapping[str, int]],
                          ep_builders: Iterable[str]) -> dict:
    """Chi-square on profitable vs other blocks for builders with / without an EP."""
    ep = set(ep_builders)
    table = [[0, 0], [0, 0]]
    for builder, counts in class_counts.items():
        row = 0 if builder in ep else 1
        prof = counts.get("profitable", 0)
        table[row][0] += prof
        table[row][1] += sum(counts.values()) - prof
    stat, p = chi_square_2x2(table)
    rate = [table[r][0] / sum(table[r]) for r in range(2)]
    return {"table": table, "statistic": stat, "p_value": p,
            "ep_profitable_rate": rate[0], "non_ep_profitable_rate": rate[1]}


def feature_correlations(targets: Mapping[str, Sequence[float]], features: Mapping[str, Sequence[float]],
                         alpha: float = DEFAULT_ALPHA, only_significant: bool = True,
                         skip: Mapping[str, Iterable[str]] | None = None):
    """Spearman of every feature against every target.

    Returns ``(rows, diagnostics)`` where rows are ``(target, feature, result)``.
    Features with zero variance are reported in diagnostics instead.
    """
    rows, diag = [], []
    skip = {k: set(v) for k, v in (skip or {}).items()}
    for tname, tvals in targets.items():
        for fname, fvals in features.items():
            if fname == tname or fname in skip.get(tname, ()):
                continue
            try:
                res = spearman(fvals, tvals, alpha)
            except ValueError as exc:
                diag.append(f"{tname}~{fname}: {exc}")
                continue
            if res.significant or not only_significant:
                rows.append((tname, fname, res))
    return rows, diag


def shuffled_ep_runs(block_shares: Sequence[tuple[str, Mapping[str, float]]], providers: Iterable[str],
                     runs: int, seed: int = DEFAULT_SEED, folds: int = DEFAULT_FOLDS,
                     alpha: float = DEFAULT_ALPHA) -> list[list[tuple[str, str]]]:
    """EP calls on builder-shuffled data, one list per run.

    Each run permutes block ownership (keeping every builder's block count)
    and decodes with its own seed, so any EP found is a false positive.
    """
    owners = [b for b, _ in block_shares]
    shares = [s for _, s in block_shares]
    builders = sorted(set(owners))
    providers = sorted(providers)
    out = []
    for run in range(runs):
        rng = np.random.default_rng([seed, run])
        perm = [owners[i] for i in rng.permutation(len(owners))]
        res, _ = decoding_matrix(list(zip(perm, shares)), builders, providers, folds, seed + run + 1, alpha)
        out.append(exclusive_providers(res))
    return out
