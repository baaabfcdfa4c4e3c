"""Synthetic longitudinal cohorts and the feed-forward baselines.

Each patient carries a personal baseline offset on every frame channel;
the clinical state shifts the visit mean along one fixed direction, and
frames wander around that mean as AR(1) noise.  Large between-patient
spread hides the state from any single-visit classifier while leaving
within-patient differences informative, which is the regime where
longitudinal intra-patient tracking pays off.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import Tensor
from .frames import N_FEATURES, FrameFeatureMap, default_catalog
from .functionals import build_global_vector, global_feature_names, global_group_index
from .metrics import MetricReport, evaluate
from .pse import (PatientTimeline, PseConfig, PseModel, VisitRecord, labelled_pair_scores,
                  pretrain_reconstruction, train_pairwise_classifier)
from .screening import select_hf_voice_sets

log = logging.getLogger(__name__)

GLOBAL_DIM = len(global_feature_names())


@dataclass
class CohortConfig:
    n_patients: int = 200
    visits_per_patient: int = 2
    global_dim: int = GLOBAL_DIM
    n_channels: int = N_FEATURES
    frames_per_visit: int = 64
    sigma_b: float = 2.5
    sigma_w: float = 0.2
    delta: float = 1.0
    rho_c: float = 0.1
    ar_coef: float = 0.9
    rehospitalization_p: float = 0.2
    seed: int = 0
    with_globals: bool = True

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if self.visits_per_patient < 2:
            raise ValueError("visits_per_patient must be >= 2")
        if self.n_channels != N_FEATURES:
            raise ValueError(f"frame channels are fixed at {N_FEATURES}")
        if self.global_dim != GLOBAL_DIM:
            raise ValueError(f"global dimension is fixed at {GLOBAL_DIM} by the functional catalog")
        if self.frames_per_visit < 2:
            raise ValueError("frames_per_visit must be >= 2")
        if self.sigma_b < 0 or self.sigma_w < 0:
            raise ValueError("sigma_b and sigma_w must be non-negative")
        if not math.isfinite(self.delta):
            raise ValueError("delta must be finite")
        if not 0 < self.rho_c <= 1:
            raise ValueError("rho_c must lie in (0, 1]")
        if not -1 < self.ar_coef < 1:
            raise ValueError("ar_coef must lie in (-1, 1)")
        if not 0 <= self.rehospitalization_p <= 1:
            raise ValueError("rehospitalization_p must lie in [0, 1]")

    @classmethod
    def with_visit_noise(cls, sigma_v: float, **kw) -> "CohortConfig":
        """Config whose innovation stddev yields per-visit projected noise ``sigma_v``."""
        T = kw.get("frames_per_visit", cls.frames_per_visit)
        phi = kw.get("ar_coef", cls.ar_coef)
        return cls(sigma_w=innovation_std_for(sigma_v, T, phi), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)} | {"sigma_v"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cohort config keys: {sorted(unknown)}")
        if "sigma_v" in d:
            if "sigma_w" in d:
                raise ValueError("give sigma_v or sigma_w, not both")
            return cls.with_visit_noise(d.pop("sigma_v"), **d)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def n_affected(self) -> int:
        return math.ceil(self.rho_c * self.n_channels)

    @property
    def sigma_v(self) -> float:
        return visit_noise_std(self.sigma_w, self.frames_per_visit, self.ar_coef)


def visit_noise_std(sigma_w: float, T: int, phi: float) -> float:
    """Stddev of the mean of T stationary AR(1) frames with innovation stddev sigma_w."""
    gamma0 = sigma_w ** 2 / (1.0 - phi ** 2)
    k = np.arange(1, T)
    var = gamma0 / T ** 2 * (T + 2.0 * np.sum((T - k) * phi ** k))
    return float(math.sqrt(var))


def innovation_std_for(sigma_v: float, T: int, phi: float) -> float:
    if sigma_v < 0:
        raise ValueError("sigma_v must be non-negative")
    return sigma_v / visit_noise_std(1.0, T, phi)


@dataclass(frozen=True)
class PairLabel:
    patient_id: str
    i: int
    j: int
    deterioration: int
    informative: bool


@dataclass
class SyntheticCohort:
    config: CohortConfig
    timelines: list
    severity: dict
    pairs: list
    direction: np.ndarray  # unit vector u over the 72 channels
    visit_means: dict = field(repr=False, default_factory=dict)

    def timeline(self, pid: str) -> PatientTimeline:
        return self._by_id[pid]

    def __post_init__(self):
        self._by_id = {tl.patient_id: tl for tl in self.timelines}

    @property
    def patient_ids(self) -> list:
        return [tl.patient_id for tl in self.timelines]


def _state_name(s: int, visit: int) -> str:
    if visit == 0:
        return "decompensated"
    if visit == 1:
        return "post_treatment"
    return "readmitted" if s else "stable"


def _severity_schedule(cfg: CohortConfig, rng: np.random.Generator) -> np.ndarray:
    s = np.zeros(cfg.visits_per_patient, dtype=int)
    s[0] = 1
    if cfg.visits_per_patient > 2:
        s[2:] = (rng.random(cfg.visits_per_patient - 2) < cfg.rehospitalization_p).astype(int)
    return s


def _visit_days(cfg: CohortConfig, rng: np.random.Generator) -> np.ndarray:
    """Admission at day 0, discharge 3-10 days later, follow-ups roughly monthly."""
    days = [0.0, float(rng.integers(3, 11))]
    for _ in range(cfg.visits_per_patient - 2):
        days.append(days[-1] + float(rng.integers(20, 41)))
    return np.array(days)


def _ar1(rng, T, F, phi, sigma_w) -> np.ndarray:
    e = np.empty((T, F))
    e[0] = rng.standard_normal(F) * sigma_w / math.sqrt(1.0 - phi ** 2)
    w = rng.standard_normal((T - 1, F)) * sigma_w
    for t in range(1, T):
        e[t] = phi * e[t - 1] + w[t - 1]
    return e


def generate_cohort(cfg: CohortConfig) -> SyntheticCohort:
    """Draw a cohort; every patient has its own seed stream derived from ``cfg.seed``."""
    root = np.random.SeedSequence(cfg.seed)
    dir_seq, *patient_seqs = root.spawn(cfg.n_patients + 1)
    affected = np.sort(np.random.default_rng(dir_seq).choice(cfg.n_channels, cfg.n_affected, replace=False))
    u = np.zeros(cfg.n_channels)
    u[affected] = 1.0 / math.sqrt(cfg.n_affected)
    chash = default_catalog().hash
    width = len(str(cfg.n_patients - 1))
    timelines, severity, pairs, means = [], {}, [], {}
    for n, seq in enumerate(patient_seqs):
        rng = np.random.default_rng(seq)
        pid = f"P{n:0{width}d}"
        b = rng.standard_normal(cfg.n_channels) * cfg.sigma_b
        s = _severity_schedule(cfg, rng)
        days = _visit_days(cfg, rng)
        visits = []
        for t in range(cfg.visits_per_patient):
            mean = b + cfg.delta * s[t] * u
            frames = mean + _ar1(rng, cfg.frames_per_visit, cfg.n_channels, cfg.ar_coef, cfg.sigma_w)
            fmap = FrameFeatureMap(frames, chash, f"{pid}_v{t}")
            gvec = build_global_vector(fmap) if cfg.with_globals else None
            visits.append(VisitRecord(pid, float(days[t]), fmap, gvec, _state_name(int(s[t]), t)))
            means[(pid, t)] = mean
        timelines.append(PatientTimeline(pid, tuple(visits)))
        severity[pid] = s
        for i in range(cfg.visits_per_patient):
            for j in range(i + 1, cfg.visits_per_patient):
                pairs.append(PairLabel(pid, i, j, int(s[j] > s[i]), bool(s[j] != s[i])))
    return SyntheticCohort(cfg, timelines, severity, pairs, u, means)


@dataclass(frozen=True)
class BayesReference:
    cross_sectional: float
    paired: float
    sigma_v: float
    degenerate: bool = False


def bayes_reference_accuracies(cfg: CohortConfig | None = None, *, delta: float | None = None,
                               sigma_b: float | None = None, sigma_v: float | None = None) -> BayesReference:
    """Bayes accuracies along the state direction: one visit vs a within-patient pair."""
    if cfg is not None:
        delta = cfg.delta if delta is None else delta
        sigma_b = cfg.sigma_b if sigma_b is None else sigma_b
        sigma_v = cfg.sigma_v if sigma_v is None else sigma_v
    if delta is None or sigma_b is None or sigma_v is None:
        raise ValueError("need a config or all of delta, sigma_b, sigma_v")
    d = abs(delta)
    spread = math.sqrt(sigma_b ** 2 + sigma_v ** 2)
    if spread == 0.0:
        return BayesReference(1.0 if d else 0.5, 1.0 if d else 0.5, sigma_v, True)
    cross = float(ndtr(d / (2.0 * spread)))
    if sigma_v == 0.0:
        return BayesReference(cross, 1.0 if d else 0.5, 0.0, True)
    return BayesReference(cross, float(ndtr(d / (math.sqrt(2.0) * sigma_v))), sigma_v)


def split_patients(patient_ids, test_fraction: float = 0.2, seed: int = 0) -> tuple[list, list]:
    """Subject-disjoint (train, test) split."""
    ids = sorted(patient_ids)
    if len(ids) < 2:
        raise ValueError("need at least two patients to split")
    n_test = max(1, int(round(test_fraction * len(ids))))
    perm = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[k] for k in perm[:n_test])
    train = sorted(ids[k] for k in perm[n_test:])
    return train, test


# --------------------------------------------------------------------------
# feed-forward baselines

@dataclass
class FnnConfig:
    hidden: int = 64
    lr: float = 1e-2
    epochs: int = 200
    weight_decay: float = 0.1
    select_alpha: float | None = 0.001
    test_fraction: float = 0.2
    shuffle_labels: bool = False
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "FnnConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown FNN config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class BaselineResult:
    report: MetricReport
    n_features: int
    train_accuracy: float
    selected: tuple = ()


class Fnn:
    """Two-layer perceptron, tanh hidden layer, single logit output."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        b1, b2 = 1 / math.sqrt(n_in), 1 / math.sqrt(hidden)
        self.w1 = Tensor(rng.uniform(-b1, b1, (n_in, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.w2 = Tensor(rng.uniform(-b2, b2, (hidden, 1)), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    @property
    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def logits(self, X) -> Tensor:
        h = ad.tanh(Tensor(X) @ self.w1 + self.b1)
        out = h @ self.w2 + self.b2
        return ad.reshape(out, (out.shape[0],))

    def fit(self, X, y, cfg: FnnConfig) -> None:
        opt = ad.Adam(self.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        for _ in range(cfg.epochs):
            opt.zero_grad()
            loss = ad.bce_with_logits(self.logits(X), y)
            loss.backward()
            opt.step()

    def predict(self, X) -> np.ndarray:
        return (self.logits(X).data > 0).astype(int)


def _global_matrix(cohort: SyntheticCohort, pids) -> tuple[np.ndarray, np.ndarray, list]:
    rows, labels, owner = [], [], []
    for pid in pids:
        tl = cohort.timeline(pid)
        for v, s in zip(tl.visits, cohort.severity[pid]):
            if v.global_vec is None:
                raise ValueError("cohort was generated without global features")
            rows.append(v.global_vec.values)
            labels.append(int(s))
            owner.append(pid)
    return np.array(rows), np.array(labels), owner


def _screen(cohort: SyntheticCohort, train_ids, alpha: float) -> np.ndarray:
    """Indices of global features passing the paired admission/discharge test on the training patients."""
    names = global_feature_names()
    pre = np.array([cohort.timeline(p).visits[0].global_vec.values for p in train_ids])
    post = np.array([cohort.timeline(p).visits[1].global_vec.values for p in train_ids])
    sel = select_hf_voice_sets(pre, post, alpha=alpha, names=names, group_index=global_group_index())
    keep = np.array([k for k, n in enumerate(names) if n in sel.set_a], dtype=int)
    if keep.size == 0:
        log.warning("screening selected no features; falling back to all %d", len(names))
        keep = np.arange(len(names))
    return keep


def _keep_features(cohort: SyntheticCohort, train_ids, cfg: FnnConfig) -> np.ndarray:
    # screening reads the true admission/discharge pairing, so the null
    # control must skip it or the labels leak back in through the features
    if cfg.select_alpha is None or cfg.shuffle_labels:
        return np.arange(GLOBAL_DIM)
    return _screen(cohort, train_ids, cfg.select_alpha)


def _standardize(train, test):
    mu, sd = train.mean(axis=0), train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def cross_sectional_fnn(cohort: SyntheticCohort, cfg: FnnConfig | None = None,
                        split: tuple | None = None) -> BaselineResult:
    """Single-visit state classifier evaluated on held-out patients."""
    cfg = cfg or FnnConfig()
    train_ids, test_ids = split or split_patients(cohort.patient_ids, cfg.test_fraction, cfg.seed)
    Xtr, ytr, _ = _global_matrix(cohort, train_ids)
    Xte, yte, _ = _global_matrix(cohort, test_ids)
    for name, y in (("train", ytr), ("test", yte)):
        if len(np.unique(y)) < 2:
            raise ValueError(f"{name} split holds a single class")
    keep = _keep_features(cohort, train_ids, cfg)
    Xtr, Xte = _standardize(Xtr[:, keep], Xte[:, keep])
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    if cfg.shuffle_labels:
        ytr = rng.permutation(ytr)
    net = Fnn(Xtr.shape[1], cfg.hidden, rng)
    net.fit(Xtr, ytr, cfg)
    train_acc = float(np.mean(net.predict(Xtr) == ytr))
    names = global_feature_names()
    return BaselineResult(evaluate(net.predict(Xte), yte), len(keep), train_acc,
                          tuple(names[k] for k in keep))


def _pair_rows(cohort: SyntheticCohort, pids, values) -> tuple[np.ndarray, np.ndarray]:
    """Both orientations of every state-changing pair: (target - reference, deterioration)."""
    X, y = [], []
    for pid in pids:
        for p in (q for q in cohort.pairs if q.patient_id == pid and q.informative):
            d = values[(pid, p.j)] - values[(pid, p.i)]
            X += [d, -d]
            y += [p.deterioration, 1 - p.deterioration]
    return np.array(X), np.array(y)


def lipt_fnn(cohort: SyntheticCohort, cfg: FnnConfig | None = None,
             split: tuple | None = None) -> BaselineResult:
    """The same network trained on within-patient differences of global vectors."""
    cfg = cfg or FnnConfig()
    train_ids, test_ids = split or split_patients(cohort.patient_ids, cfg.test_fraction, cfg.seed)
    keep = _keep_features(cohort, train_ids, cfg)
    values = {(tl.patient_id, t): v.global_vec.values[keep]
              for tl in cohort.timelines for t, v in enumerate(tl.visits)}
    Xtr, ytr = _pair_rows(cohort, train_ids, values)
    Xte, yte = _pair_rows(cohort, test_ids, values)
    # differences are centred by construction; scale only
    sd = Xtr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Xtr, Xte = Xtr / sd, Xte / sd
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    if cfg.shuffle_labels:
        ytr = rng.permutation(ytr)
    net = Fnn(Xtr.shape[1], cfg.hidden, rng)
    net.fit(Xtr, ytr, cfg)
    train_acc = float(np.mean(net.predict(Xtr) == ytr))
    names = global_feature_names()
    return BaselineResult(evaluate(net.predict(Xte), yte), len(keep), train_acc,
                          tuple(names[k] for k in keep))


# --------------------------------------------------------------------------
# PSE on a cohort

@dataclass(frozen=True)
class PseCohortResult:
    accuracy: float
    report: MetricReport
    train_losses: tuple
    pretrain_losses: tuple
    model: PseModel = field(repr=False, compare=False)


def pse_on_cohort(cohort: SyntheticCohort, pse_cfg: PseConfig, split: tuple | None = None,
                  split_seed: int = 0, pretrain: bool = True) -> PseCohortResult:
    """Pretrain and train a PSE on the training patients, score held-out pairs."""
    train_ids, test_ids = split or split_patients(cohort.patient_ids, 0.2, split_seed)
    train = [cohort.timeline(p) for p in train_ids]
    model = PseModel(pse_cfg)
    pre = pretrain_reconstruction(train, model) if pretrain and pse_cfg.pretrain_epochs else None
    res = train_pairwise_classifier(train, model, pretrained=pre is not None)
    _, scores, labels = labelled_pair_scores([cohort.timeline(p) for p in test_ids], model)
    report = evaluate((scores >= 0.5).astype(int), labels)
    return PseCohortResult(report.accuracy, report, tuple(res.losses),
                           tuple(pre.losses) if pre else (), model)
