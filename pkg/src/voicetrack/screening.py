"""Statistical screening of global features.

Paired and pooled-variance t-tests pick the features that separate the
decompensated and post-treatment states; the mean absolute correlation
matrix summarises how frame-level descriptors co-vary.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .functionals import GLOBAL_GROUPS

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray
    n_samples_averaged: int


@dataclass(frozen=True)
class TTestResult:
    t: float
    dof: float
    p_two_sided: float
    degenerate: bool = False


@dataclass(frozen=True)
class FeatureSelection:
    set_a: frozenset  # paired test
    set_b: frozenset  # independent test
    alpha: float
    paired: dict = field(repr=False)
    independent: dict = field(repr=False)
    group_counts: dict = field(default_factory=dict)

    @property
    def paired_set(self) -> frozenset:
        return self.set_a

    @property
    def independent_set(self) -> frozenset:
        return self.set_b


def mean_abs_correlation(samples) -> CorrelationMatrix:
    """Average of |Pearson correlation| over a list of (T x F) samples.

    A column with zero variance inside a sample contributes 0 to every
    off-diagonal entry for that sample.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples")
    F = np.asarray(samples[0]).shape[1]
    acc = np.zeros((F, F))
    for i, X in enumerate(samples):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != F or X.shape[0] < 2:
            raise ValueError(f"sample {i} must be (T>=2, {F}), got {X.shape}")
        Xc = X - X.mean(axis=0)
        sd = np.sqrt(np.sum(Xc ** 2, axis=0))
        ok = sd > 0
        if not ok.all():
            log.info("sample %d: %d constant column(s) contribute zero correlation", i, (~ok).sum())
        Z = np.where(ok, Xc / np.where(ok, sd, 1.0), 0.0)
        acc += np.abs(Z.T @ Z)
    R = np.clip(acc / len(samples), 0.0, 1.0)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    return CorrelationMatrix(R, len(samples))


def student_t_p_value(t: float, dof: float) -> float:
    """Two-sided p-value of Student's t via the regularised incomplete beta."""
    if not math.isfinite(dof) or dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    if math.isnan(t):
        raise ValueError("t is NaN")
    if math.isinf(t):
        return 0.0
    return float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))


def independent_t_test(p_obs, n_obs) -> TTestResult:
    """Pooled-variance two-sample t-test."""
    P = np.asarray(p_obs, dtype=np.float64)
    N = np.asarray(n_obs, dtype=np.float64)
    nP, nN = len(P), len(N)
    if nP < 2 or nN < 2:
        raise ValueError("each group needs at least two observations")
    dof = nP + nN - 2
    diff = P.mean() - N.mean()
    pooled = ((nP - 1) * P.var(ddof=1) + (nN - 1) * N.var(ddof=1)) / dof
    se = math.sqrt(pooled * (1.0 / nP + 1.0 / nN))
    if se == 0.0:
        if diff == 0.0:
            return TTestResult(0.0, dof, 1.0)
        return TTestResult(math.copysign(math.inf, diff), dof, 0.0, degenerate=True)
    t = diff / se
    return TTestResult(t, dof, student_t_p_value(t, dof))


def paired_t_test(pre_obs, post_obs) -> TTestResult:
    """Paired t-test on ``pre - post``."""
    a = np.asarray(pre_obs, dtype=np.float64)
    b = np.asarray(post_obs, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    D = a - b
    Dbar = D.mean()
    ss = float(np.sum((D - Dbar) ** 2))
    if ss == 0.0:
        if Dbar == 0.0:
            return TTestResult(0.0, n - 1, 1.0)
        return TTestResult(math.copysign(math.inf, Dbar), n - 1, 0.0, degenerate=True)
    t = Dbar / math.sqrt(ss / (n * (n - 1)))
    return TTestResult(t, n - 1, student_t_p_value(t, n - 1))


def group_tallies(selected, group_index: dict) -> dict:
    """Per-group (count, group size, percentage) of the selected names."""
    sizes = {g: 0 for g in GLOBAL_GROUPS}
    counts = {g: 0 for g in GLOBAL_GROUPS}
    for name, grp in group_index.items():
        sizes[grp] += 1
        if name in selected:
            counts[grp] += 1
    return {g: (counts[g], sizes[g], 100.0 * counts[g] / sizes[g] if sizes[g] else 0.0)
            for g in GLOBAL_GROUPS}


def select_hf_voice_sets(pre_matrix, post_matrix, alpha: float = 0.05, names=None,
                         group_index: dict | None = None) -> FeatureSelection:
    """Run both t-tests per feature and keep those with p < alpha.

    Rows are patients (aligned between the two matrices), columns are
    global features.  Set A holds the paired-test hits, set B the
    independent-test hits.
    """
    pre = np.asarray(pre_matrix, dtype=np.float64)
    post = np.asarray(post_matrix, dtype=np.float64)
    if pre.shape != post.shape or pre.ndim != 2:
        raise ValueError(f"pre/post matrices must be aligned, got {pre.shape} vs {post.shape}")
    if names is None:
        names = list(range(pre.shape[1]))
    paired, indep = {}, {}
    for k, name in enumerate(names):
        paired[name] = paired_t_test(pre[:, k], post[:, k])
        indep[name] = independent_t_test(pre[:, k], post[:, k])
    set_a = frozenset(n for n, r in paired.items() if r.p_two_sided < alpha)
    set_b = frozenset(n for n, r in indep.items() if r.p_two_sided < alpha)
    counts = {}
    if group_index is not None:
        counts = {"paired": group_tallies(set_a, group_index),
                  "independent": group_tallies(set_b, group_index)}
    return FeatureSelection(set_a, set_b, alpha, paired, indep, counts)
