"""Global per-visit trajectories rebuilt from local pairwise outcomes.

Two routes are provided: a decay-weighted aggregation of the pairwise
scores followed by an affine-sigmoid mapping head, whose two parameters
can be calibrated against gold-standard labels, and a Bradley-Terry
ranking of the visits from pairwise win counts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import expit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairwiseOutcome:
    patient_id: str
    i: int
    j: int
    y_hat: float

    def __post_init__(self):
        if not self.i < self.j:
            raise ValueError(f"pair ({self.i}, {self.j}) must satisfy i < j")
        if not np.isfinite(self.y_hat):
            raise ValueError("outcome must be finite")


@dataclass(frozen=True)
class TrajectoryEstimate:
    patient_id: str
    visits: np.ndarray  # target visit indices (every visit with a predecessor)
    scores: np.ndarray
    raw: np.ndarray  # weighted sums before the mapping head
    theta: float
    phi: tuple


@dataclass(frozen=True)
class GoldLabel:
    patient_id: str
    visit: int
    value: float


@dataclass(frozen=True)
class RankResult:
    strengths: np.ndarray
    iterations: int
    converged: bool

    def win_probability(self, k: int, l: int) -> float:
        return float(self.strengths[k] / (self.strengths[k] + self.strengths[l]))


def decay_weights(t_target: float, t_preds, theta: float) -> np.ndarray:
    """Normalised exponential-decay weights of the predecessors of one visit."""
    return _gap_weights(t_target - np.asarray(t_preds, dtype=np.float64), theta)


def _gap_weights(dt: np.ndarray, theta: float) -> np.ndarray:
    logits = -theta * dt
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def _targets(outcomes, timestamps):
    """Group outcomes by target visit: j -> (predecessor times, outcomes)."""
    by_j: dict[int, list] = {}
    for o in outcomes:
        by_j.setdefault(o.j, []).append(o)
    ts = np.asarray(timestamps, dtype=np.float64)
    out = []
    for j in sorted(by_j):
        rows = sorted(by_j[j], key=lambda o: o.i)
        out.append((j, ts[j] - ts[[o.i for o in rows]], np.array([o.y_hat for o in rows])))
    return out


def aggregate_scores(outcomes, timestamps, theta: float = 0.0, phi=(1.0, 0.0),
                     patient_id: str | None = None) -> TrajectoryEstimate:
    """Per-visit scores ``sigmoid(phi1 * sum_i w_ij f_ij + phi0)`` for every visit j >= 1."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("no outcomes to aggregate")
    if patient_id is None:
        patient_id = outcomes[0].patient_id
    groups = _targets(outcomes, timestamps)
    covered = {j for j, _, _ in groups}
    missing = [j for j in range(1, len(timestamps)) if j not in covered]
    if missing:
        raise ValueError(f"visits {missing} have no predecessor outcomes")
    raw = np.array([np.dot(_gap_weights(dt, theta), f) for _, dt, f in groups])
    scores = expit(phi[0] * raw + phi[1])
    return TrajectoryEstimate(patient_id, np.array([j for j, _, _ in groups]), scores, raw,
                              float(theta), (float(phi[0]), float(phi[1])))


@dataclass(frozen=True)
class CalibrationResult:
    theta: float
    phi: tuple
    loss: float
    history: np.ndarray
    degenerate: bool


def _calibration_terms(groups, labels, theta, phi, loss):
    """Loss and gradient w.r.t. (theta, phi1, phi0), summed over targets."""
    total, g = 0.0, np.zeros(3)
    for (dt, f), y in zip(groups, labels):
        w = _gap_weights(dt, theta)
        s = float(np.dot(w, f))
        ds_dtheta = float(np.dot(w * (-dt + np.dot(w, dt)), f))
        a = phi[0] * s + phi[1]
        yh = float(expit(a))
        if loss == "bce":
            yc = min(max(yh, 1e-7), 1 - 1e-7)
            total += -(y * np.log(yc) + (1 - y) * np.log(1 - yc))
            dl_da = yh - y
        else:
            total += (yh - y) ** 2
            dl_da = 2 * (yh - y) * yh * (1 - yh)
        g += dl_da * np.array([phi[0] * ds_dtheta, s, 1.0])
    return total, g


def fit_calibration(timelines: dict, gold, loss: str = "bce", theta0: float = 0.0,
                    phi0=(1.0, 0.0), max_iter: int = 500, tol: float = 1e-10,
                    fit_theta: bool = True) -> CalibrationResult:
    """Fit the decay constant and mapping head to gold-standard labels.

    ``timelines`` maps patient id to ``(outcomes, timestamps)``.  Full-batch
    gradient descent with Armijo backtracking keeps the loss monotonically
    non-increasing.
    """
    if loss not in ("bce", "mse"):
        raise ValueError(f"unknown loss {loss!r}")
    gold_map = {(g.patient_id, g.visit): g.value for g in gold}
    groups, labels = [], []
    for pid in sorted(timelines):
        outcomes, timestamps = timelines[pid]
        for j, dt, f in _targets(outcomes, timestamps):
            if (pid, j) in gold_map:
                groups.append((dt, f))
                labels.append(gold_map[(pid, j)])
    if len(labels) < 2:
        raise ValueError("calibration needs at least two labelled visits")
    degenerate = len(set(labels)) == 1
    if degenerate:
        log.warning("all gold labels equal; the mapping head will saturate")

    params = np.array([theta0, phi0[0], phi0[1]], dtype=np.float64)
    mask = np.array([1.0 if fit_theta else 0.0, 1.0, 1.0])
    cur, grad = _calibration_terms(groups, labels, params[0], params[1:], loss)
    history = [cur]
    step = 1.0
    for _ in range(max_iter):
        g = grad * mask
        if np.dot(g, g) < tol ** 2:
            break
        while step > 1e-12:
            trial = params - step * g
            val, tgrad = _calibration_terms(groups, labels, trial[0], trial[1:], loss)
            if val <= cur - 1e-4 * step * np.dot(g, g):
                break
            step *= 0.5
        else:
            break
        converged = cur - val < tol
        params, cur, grad = trial, val, tgrad
        history.append(cur)
        step = min(step * 2.0, 1e3)
        if converged:
            break
    return CalibrationResult(float(params[0]), (float(params[1]), float(params[2])),
                             float(cur), np.array(history), degenerate)


def win_counts_from_outcomes(outcomes, n_visits: int, soft: bool = False) -> np.ndarray:
    """K x K matrix ``W[k, l]`` = times visit k was judged worse than visit l."""
    W = np.zeros((n_visits, n_visits))
    for o in outcomes:
        if soft:
            W[o.j, o.i] += o.y_hat
            W[o.i, o.j] += 1.0 - o.y_hat
        elif o.y_hat >= 0.5:
            W[o.j, o.i] += 1.0
        else:
            W[o.i, o.j] += 1.0
    return W


def bradley_terry_strengths(win_counts, tol: float = 1e-10, max_iter: int = 10_000,
                            prior: float = 0.0) -> RankResult:
    """Bradley-Terry strengths by the MM algorithm, normalised so sum(log pi) = 0.

    ``prior`` adds that many pseudo-wins in each direction for every
    compared pair, which keeps the estimate finite when an item never wins.
    """
    W = np.array(win_counts, dtype=np.float64)
    K = W.shape[0]
    if W.shape != (K, K):
        raise ValueError("win counts must be square")
    if np.any(np.diag(W) != 0):
        raise ValueError("diagonal of the win matrix must be zero")
    if np.any(W < 0):
        raise ValueError("win counts must be non-negative")
    N = W + W.T
    n_comp, comp = connected_components(csr_matrix(N > 0), directed=False)
    if n_comp > 1:
        parts = [sorted(np.flatnonzero(comp == c).tolist()) for c in range(n_comp)]
        raise ValueError(f"comparison graph is disconnected; components: {parts}")
    if prior > 0:
        W = W + prior * (N > 0)
        N = W + W.T
    wins = W.sum(axis=1)
    if np.any(wins == 0):
        raise ValueError(f"items {np.flatnonzero(wins == 0).tolist()} never win; "
                         "the maximum-likelihood strengths do not exist (use prior > 0)")
    pi = np.ones(K)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        denom = (N / (pi[:, None] + pi[None, :])).sum(axis=1)
        new = wins / denom
        new /= np.exp(np.mean(np.log(new)))
        change = np.max(np.abs(new - pi) / pi)
        pi = new
        if change < tol:
            converged = True
            break
    return RankResult(pi, it, converged)
