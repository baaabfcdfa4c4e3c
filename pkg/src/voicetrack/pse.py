"""Personalised Sequential Encoder and its pairwise longitudinal classifier.

A shared 1-D convolutional stack embeds each visit's frame map, a GRU
aggregates the embeddings in visit order, and linear heads produce a
Gaussian latent per visit.  The encoder is pretrained by reconstructing
the frame maps through a decoder, then trained jointly with a linear
classifier on latent differences between two visits of the same patient.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .frames import FrameFeatureMap, default_catalog
from .functionals import GlobalFeatureVector

log = logging.getLogger(__name__)

STATES = ("decompensated", "post_treatment", "stable", "readmitted")
SEVERITY = {"decompensated": 1, "readmitted": 1, "post_treatment": 0, "stable": 0}
MERGE_MODES = ("latent_only", "concat_global", "global_only")
STD_GUARD = 1e-8


@dataclass
class PseConfig:
    latent_dim: int = 32
    conv_channels: tuple = (64, 64)
    kernel_size: int = 5
    stride: int = 2
    hidden_size: int = 64
    k1: float = 1.0
    k2: float = 1e-3
    bias_mode: str = "learned"
    lr: float = 1e-3
    pretrain_epochs: int = 30
    epochs: int = 60
    batch_size: int = 32
    seed: int = 0
    frame_length: int = 512
    n_features: int = 72
    merge_mode: str = "latent_only"
    global_features: tuple = ()
    sample_latents: bool = True
    random_feed_order: bool = True
    classifier_kl: float = 0.0
    weight_decay: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.global_features = tuple(self.global_features)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.k1 < 0 or self.k2 < 0:
            raise ValueError("k1 and k2 must be non-negative")
        if self.bias_mode not in ("zero", "learned"):
            raise ValueError(f"bias_mode must be 'zero' or 'learned', got {self.bias_mode!r}")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}")
        if self.merge_mode != "latent_only" and not self.global_features:
            raise ValueError(f"merge_mode {self.merge_mode!r} needs global_features")
        down = self.stride ** len(self.conv_channels)
        if self.frame_length % down:
            raise ValueError(f"frame_length must be a multiple of {down}")

    @classmethod
    def from_dict(cls, d: dict) -> "PseConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PSE config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["global_features"] = list(self.global_features)
        return d


# --------------------------------------------------------------------------
# domain records

@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    timestamp: float
    frame_map: FrameFeatureMap
    global_vec: GlobalFeatureVector | None = None
    state_label: str | None = None

    def __post_init__(self):
        if not np.isfinite(self.timestamp):
            raise ValueError("visit timestamp must be finite")
        if self.state_label is not None and self.state_label not in STATES:
            raise ValueError(f"unknown state label {self.state_label!r}")


@dataclass(frozen=True)
class PatientTimeline:
    patient_id: str
    visits: tuple

    def __post_init__(self):
        if not self.visits:
            raise ValueError(f"patient {self.patient_id} has no visits")
        ordered = tuple(sorted(self.visits, key=lambda v: v.timestamp))
        ts = [v.timestamp for v in ordered]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"patient {self.patient_id}: visit timestamps must be strictly increasing")
        object.__setattr__(self, "visits", ordered)

    def __len__(self):
        return len(self.visits)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([v.timestamp for v in self.visits])

    def severity(self) -> np.ndarray | None:
        if any(v.state_label is None for v in self.visits):
            return None
        return np.array([SEVERITY[v.state_label] for v in self.visits])


@dataclass(frozen=True)
class LatentState:
    mu: np.ndarray
    sigma: np.ndarray
    visit_index: int


@dataclass(frozen=True)
class PairBatch:
    A: np.ndarray
    B: np.ndarray
    M: np.ndarray
    X: np.ndarray  # primary half followed by the swap half
    y: np.ndarray

    @property
    def n_primary(self) -> int:
        return len(self.M)


def sample_latent(ls: LatentState, rng: np.random.Generator | None = None,
                  deterministic: bool = False) -> np.ndarray:
    """``mu + sigma * eps`` with standard-normal eps; ``mu`` in deterministic mode."""
    if deterministic or rng is None:
        return np.array(ls.mu, copy=True)
    return ls.mu + ls.sigma * rng.standard_normal(ls.mu.shape)


def build_pair_batch(latents, i: int, j: int, rng: np.random.Generator,
                     direction=None, allocation=None) -> PairBatch:
    """Reference/target allocation for one visit pair of every patient.

    ``latents`` is a sequence (one per patient) of per-visit latent vectors.
    For ``M = 0`` the reference is visit i and the target visit j; ``M = 1``
    swaps them.  The input is ``target - reference`` and the label is
    ``M`` XOR the true direction (``direction[n] = 1`` when visit j is worse
    than visit i; all zeros by default, i.e. every pair improves).  The swap
    half appends negated inputs with inverted labels.
    """
    if not i < j:
        raise ValueError(f"need i < j, got ({i}, {j})")
    for n, z in enumerate(latents):
        if j >= len(z):
            raise ValueError(f"patient {n} has no visit {j}")
    zi = np.stack([np.asarray(z[i]) for z in latents])
    zj = np.stack([np.asarray(z[j]) for z in latents])
    n = len(zi)
    M = rng.integers(0, 2, size=n) if allocation is None else np.asarray(allocation, dtype=int)
    d = np.zeros(n, dtype=int) if direction is None else np.asarray(direction, dtype=int)
    sel = M[:, None].astype(bool)
    A = np.where(sel, zj, zi)
    B = np.where(sel, zi, zj)
    X = B - A
    y = (M ^ d).astype(np.float64)
    return PairBatch(A, B, M, np.concatenate([X, -X]), np.concatenate([y, 1.0 - y]))


# --------------------------------------------------------------------------
# normalisation

def resample_frames(values: np.ndarray, L: int) -> np.ndarray:
    """Linearly resample a (T, F) map along time to exactly L rows."""
    values = np.asarray(values, dtype=np.float64)
    T = values.shape[0]
    if T == L:
        return values.copy()
    if T == 1:
        return np.repeat(values, L, axis=0)
    pos = np.linspace(0.0, T - 1, L)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    frac = (pos - lo)[:, None]
    return values[lo] * (1 - frac) + values[hi] * frac


@dataclass
class Standardizer:
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def fitted(self) -> bool:
        return self.mean is not None

    def fit(self, rows: np.ndarray) -> "Standardizer":
        rows = np.asarray(rows, dtype=np.float64)
        self.mean = rows.mean(axis=0)
        # the summed mean of a constant column can be off by an ulp
        flat = np.ptp(rows, axis=0) == 0
        self.mean[flat] = rows[0, flat]
        sd = rows.std(axis=0)
        self.std = np.where(sd > STD_GUARD, sd, 1.0)
        return self

    def transform(self, rows) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("standardizer has not been fitted")
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.std


def normalize_frame_map(fmap: FrameFeatureMap | np.ndarray, L: int, standardizer: Standardizer) -> np.ndarray:
    values = fmap.values if isinstance(fmap, FrameFeatureMap) else fmap
    return standardizer.transform(resample_frames(values, L))


# --------------------------------------------------------------------------
# model

def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class PseModel:
    """Encoder, decoder and classifier parameters plus the fitted normalisers."""

    def __init__(self, config: PseConfig, catalog_hash: str | None = None):
        self.config = config
        self.catalog_hash = catalog_hash or default_catalog().hash
        self.frame_std = Standardizer()
        self.global_std = Standardizer()
        self.params: dict[str, Tensor] = {}
        cfg = config
        dt = np.dtype(cfg.dtype)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
        P = self.params
        c_in = cfg.n_features
        K = cfg.kernel_size
        for k, c_out in enumerate(cfg.conv_channels):
            P[f"enc.conv{k}.w"] = _uniform(rng, (c_out, c_in, K), c_in * K, dt)
            P[f"enc.conv{k}.b"] = _uniform(rng, (c_out,), c_in * K, dt)
            c_in = c_out
        E, H, d = c_in, cfg.hidden_size, cfg.latent_dim
        P["enc.gru.wx"] = _uniform(rng, (E, 3 * H), H, dt)
        P["enc.gru.wh"] = _uniform(rng, (H, 3 * H), H, dt)
        P["enc.gru.bx"] = _uniform(rng, (3 * H,), H, dt)
        P["enc.gru.bh"] = _uniform(rng, (3 * H,), H, dt)
        P["enc.mu.w"] = _uniform(rng, (H, d), H, dt)
        P["enc.mu.b"] = _uniform(rng, (d,), H, dt)
        P["enc.lv.w"] = _uniform(rng, (H, d), H, dt)
        P["enc.lv.b"] = _uniform(rng, (d,), H, dt)
        L0 = cfg.frame_length // cfg.stride ** len(cfg.conv_channels)
        C0 = cfg.conv_channels[-1]
        P["dec.fc.w"] = _uniform(rng, (d, C0 * L0), d, dt)
        P["dec.fc.b"] = _uniform(rng, (C0 * L0,), d, dt)
        dec_channels = list(reversed(cfg.conv_channels[:-1])) + [cfg.n_features]
        c_in = C0
        for k, c_out in enumerate(dec_channels):
            P[f"dec.conv{k}.w"] = _uniform(rng, (c_out, c_in, K), c_in * K, dt)
            P[f"dec.conv{k}.b"] = _uniform(rng, (c_out,), c_in * K, dt)
            c_in = c_out
        P["cls.w"] = Tensor(np.zeros(self.merged_dim, dtype=dt), requires_grad=True)
        P["cls.b"] = Tensor(np.zeros(1, dtype=dt), requires_grad=cfg.bias_mode == "learned")

    @property
    def n_global(self) -> int:
        return len(self.config.global_features)

    @property
    def learned_dim(self) -> int:
        return 0 if self.config.merge_mode == "global_only" else self.config.latent_dim

    @property
    def merged_dim(self) -> int:
        if self.config.merge_mode == "latent_only":
            return self.config.latent_dim
        return self.learned_dim + self.n_global

    def encoder_params(self):
        return [p for k, p in self.params.items() if k.startswith("enc.")]

    def decoder_params(self):
        return [p for k, p in self.params.items() if k.startswith("dec.")]

    def classifier_params(self):
        return [p for k, p in self.params.items() if k.startswith("cls.") and p.requires_grad]

    # -- forward pieces ---------------------------------------------------
    def embed(self, X: np.ndarray) -> Tensor:
        """(M, L, F) normalised maps -> (M, C) conv embeddings."""
        cfg, P = self.config, self.params
        h = Tensor(np.ascontiguousarray(X.transpose(0, 2, 1)).astype(cfg.dtype))
        for k in range(len(cfg.conv_channels)):
            h = ad.tanh(ad.conv1d(h, P[f"enc.conv{k}.w"], P[f"enc.conv{k}.b"],
                                  stride=cfg.stride, pad=cfg.kernel_size // 2))
        pooled = ad.adaptive_mean_pool_time(h, 1)
        return ad.reshape(pooled, pooled.shape[:2])

    def encode_arrays(self, X: np.ndarray) -> tuple[Tensor, Tensor]:
        """(N, T, L, F) -> (mu, log_var), each (N, T, latent_dim), visits in order."""
        P = self.params
        N, T = X.shape[:2]
        e = self.embed(X.reshape(N * T, *X.shape[2:]))
        e = ad.reshape(e, (N, T, e.shape[-1]))
        h = Tensor(np.zeros((N, self.config.hidden_size), dtype=self.config.dtype))
        states = []
        for t in range(T):
            h = ad.gru_cell_step(e[:, t, :], h, P["enc.gru.wx"], P["enc.gru.wh"],
                                 P["enc.gru.bx"], P["enc.gru.bh"])
            states.append(h)
        Hs = ad.stack(states, axis=1)
        mu = Hs @ P["enc.mu.w"] + P["enc.mu.b"]
        lv = Hs @ P["enc.lv.w"] + P["enc.lv.b"]
        return mu, lv

    def decode(self, z: Tensor) -> Tensor:
        """(M, latent_dim) -> (M, F, L) reconstruction."""
        cfg, P = self.config, self.params
        C0 = cfg.conv_channels[-1]
        L0 = cfg.frame_length // cfg.stride ** len(cfg.conv_channels)
        h = ad.reshape(z @ P["dec.fc.w"] + P["dec.fc.b"], (z.shape[0], C0, L0))
        n_layers = len(cfg.conv_channels)
        for k in range(n_layers):
            h = ad.upsample_nearest(ad.tanh(h), cfg.stride)
            h = ad.conv1d(h, P[f"dec.conv{k}.w"], P[f"dec.conv{k}.b"], stride=1, pad=cfg.kernel_size // 2)
        return h

    def latents(self, X: np.ndarray, G: np.ndarray | None, rng=None) -> tuple[Tensor, Tensor | None, Tensor | None]:
        """Merged latents (N, T, D) plus the learned (mu, log_var) when present.

        With ``rng`` the learned part is sampled by reparameterisation;
        concatenated global dimensions are observed values and never sampled.
        """
        mode = self.config.merge_mode
        mu = lv = None
        parts = []
        if mode != "global_only":
            mu, lv = self.encode_arrays(X)
            z = mu
            if rng is not None:
                eps = rng.standard_normal(mu.shape).astype(self.config.dtype)
                z = mu + ad.mul(ad.exp(ad.scale(lv, 0.5)), eps)
            parts.append(z)
        if mode != "latent_only":
            parts.append(Tensor(G.astype(self.config.dtype)))
        z = parts[0] if len(parts) == 1 else ad.concat(parts, axis=2)
        return z, mu, lv

    def classify_logits(self, X: Tensor) -> Tensor:
        w = ad.reshape(self.params["cls.w"], (-1, 1))
        out = ad.reshape(X @ w, (X.shape[0],))
        return out + self.params["cls.b"]

    # -- persistence ------------------------------------------------------
    MAGIC = b"PSECKPT\x00"
    VERSION = 1

    def save(self, path: str | Path) -> None:
        """Binary checkpoint: magic, version, JSON header, float32 little-endian blobs."""
        blobs = {k: p.data for k, p in self.params.items()}
        for prefix, std in (("norm.frame", self.frame_std), ("norm.global", self.global_std)):
            if std.fitted:
                blobs[f"{prefix}.mean"] = std.mean
                blobs[f"{prefix}.std"] = std.std
        header = {"config": self.config.to_dict(), "catalog_hash": self.catalog_hash,
                  "blobs": [[k, list(v.shape)] for k, v in blobs.items()]}
        raw = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<II", self.VERSION, len(raw)))
            fh.write(raw)
            for v in blobs.values():
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path, expected_catalog_hash: str | None = None) -> "PseModel":
        expected = expected_catalog_hash or default_catalog().hash
        data = Path(path).read_bytes()
        if data[:8] != cls.MAGIC:
            raise ValueError(f"{path} is not a PSE checkpoint")
        version, hlen = struct.unpack("<II", data[8:16])
        if version != cls.VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(data[16:16 + hlen])
        if header["catalog_hash"] != expected:
            raise ValueError("checkpoint was trained on a different feature catalog")
        model = cls(PseConfig.from_dict(header["config"]), header["catalog_hash"])
        offset = 16 + hlen
        norms = {}
        for name, shape in header["blobs"]:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
            offset += 4 * n
            if name.startswith("norm."):
                norms[name] = arr.astype(np.float64)
            else:
                model.params[name].data = arr.astype(model.config.dtype).copy()
        if "norm.frame.mean" in norms:
            model.frame_std = Standardizer(norms["norm.frame.mean"], norms["norm.frame.std"])
        if "norm.global.mean" in norms:
            model.global_std = Standardizer(norms["norm.global.mean"], norms["norm.global.std"])
        return model


# --------------------------------------------------------------------------
# data preparation

@dataclass
class PreparedGroup:
    """Patients sharing a visit count, with normalised arrays ready to batch."""
    patient_ids: list
    X: np.ndarray  # (N, T, L, F)
    G: np.ndarray | None  # (N, T, n_global)
    severity: np.ndarray | None  # (N, T)
    timestamps: np.ndarray  # (N, T)


def _global_rows(tl: PatientTimeline, names) -> np.ndarray:
    rows = []
    for v in tl.visits:
        if v.global_vec is None:
            raise ValueError(f"patient {tl.patient_id}: visit at t={v.timestamp} has no global features")
        rows.append(v.global_vec.select(names))
    return np.stack(rows)


def fit_normalizers(model: PseModel, timelines) -> None:
    cfg = model.config
    frames = [resample_frames(v.frame_map.values, cfg.frame_length)
              for tl in timelines for v in tl.visits]
    model.frame_std.fit(np.concatenate(frames))
    if cfg.merge_mode != "latent_only":
        model.global_std.fit(np.concatenate([_global_rows(tl, cfg.global_features) for tl in timelines]))


def prepare(model: PseModel, timelines) -> list[PreparedGroup]:
    cfg = model.config
    by_len: dict[int, list] = {}
    for tl in timelines:
        for v in tl.visits:
            if v.frame_map.catalog_hash != model.catalog_hash:
                raise ValueError(f"patient {tl.patient_id}: frame map catalog hash mismatch")
        by_len.setdefault(len(tl), []).append(tl)
    groups = []
    for T in sorted(by_len):
        tls = by_len[T]
        X = np.stack([np.stack([normalize_frame_map(v.frame_map, cfg.frame_length, model.frame_std)
                                for v in tl.visits]) for tl in tls])
        G = None
        if cfg.merge_mode != "latent_only":
            G = np.stack([model.global_std.transform(_global_rows(tl, cfg.global_features)) for tl in tls])
        sev = [tl.severity() for tl in tls]
        severity = None if any(s is None for s in sev) else np.stack(sev)
        groups.append(PreparedGroup([tl.patient_id for tl in tls], X.astype(cfg.dtype), G, severity,
                                    np.stack([tl.timestamps for tl in tls])))
    return groups


def _batches(groups, batch_size, rng):
    """Shuffled (group, index array) minibatches; patients never mix visit counts."""
    out = []
    for g in groups:
        idx = rng.permutation(len(g.patient_ids))
        out += [(g, idx[s: s + batch_size]) for s in range(0, len(idx), batch_size)]
    order = rng.permutation(len(out))
    return [out[k] for k in order]


def _streams(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n + 1)[1:]]


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


def reconstruction_loss(model: PseModel, X: np.ndarray, rng=None) -> Tensor:
    cfg = model.config
    mu, lv = model.encode_arrays(X)
    N, T, d = mu.shape
    z = mu
    if rng is not None:
        z = mu + ad.mul(ad.exp(ad.scale(lv, 0.5)), rng.standard_normal(mu.shape).astype(cfg.dtype))
    recon = model.decode(ad.reshape(z, (N * T, d)))
    target = np.ascontiguousarray(X.reshape(N * T, *X.shape[2:]).transpose(0, 2, 1))
    loss = ad.scale(ad.mse_loss(recon, target), cfg.k1)
    if cfg.k2:
        loss = loss + ad.scale(ad.gaussian_kl(mu, lv), cfg.k2)
    return loss


def pretrain_reconstruction(timelines, model: PseModel, epochs: int | None = None,
                            fit_norm: bool = True) -> TrainResult:
    """Minimise k1 * MSE(reconstruction) + k2 * KL over the encoder and decoder."""
    cfg = model.config
    if model.config.merge_mode == "global_only":
        raise ValueError("global_only models have no convolutional encoder to pretrain")
    timelines = list(timelines)
    if not timelines:
        raise ValueError("pretraining needs at least one timeline")
    if fit_norm:
        fit_normalizers(model, timelines)
    groups = prepare(model, timelines)
    shuffle_rng, noise_rng = _streams(cfg.seed + 1, 2)
    opt = ad.Adam(model.encoder_params() + model.decoder_params(), lr=cfg.lr,
                  weight_decay=cfg.weight_decay)
    result = TrainResult()
    for epoch in range(cfg.pretrain_epochs if epochs is None else epochs):
        total, count = 0.0, 0
        for g, idx in _batches(groups, cfg.batch_size, shuffle_rng):
            opt.zero_grad()
            loss = reconstruction_loss(model, g.X[idx], noise_rng if cfg.sample_latents else None)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"reconstruction loss diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        result.losses.append(total / count)
        log.debug("pretrain epoch %d loss %.6f", epoch, result.losses[-1])
    return result


def _pairs_for(g: PreparedGroup):
    T = g.X.shape[1]
    return [(i, j) for i in range(T) for j in range(i + 1, T)]


def classification_loss(model: PseModel, g: PreparedGroup, idx, alloc_rng, noise_rng=None):
    """Swap-consistent BCE over every visit pair of the batch; returns (loss, accuracy).

    With ``random_feed_order`` each patient's visits go through the recurrent
    cell forwards or backwards at random.  Otherwise a visit's position in the
    sequence leaks into its latent, and whenever visit order predicts the
    label (admission before discharge) the classifier can learn position
    instead of voice.
    """
    cfg = model.config
    idx = np.asarray(idx)
    T = g.X.shape[1]
    flip = np.zeros(len(idx), dtype=bool)
    if cfg.random_feed_order and cfg.merge_mode != "global_only":
        flip = alloc_rng.integers(0, 2, size=len(idx)).astype(bool)
    Xs, ys, kls = [], [], []
    for rows, rev in ((idx[~flip], False), (idx[flip], True)):
        n = rows.size
        if n == 0:
            continue
        order = slice(None, None, -1) if rev else slice(None)
        G = None if g.G is None else g.G[rows][:, order]
        z, mu, lv = model.latents(g.X[rows][:, order], G, noise_rng)
        if cfg.classifier_kl and mu is not None:
            kls.append((ad.gaussian_kl(mu, lv), n))
        for i, j in _pairs_for(g):
            pi, pj = (T - 1 - i, T - 1 - j) if rev else (i, j)
            M = alloc_rng.integers(0, 2, size=n)
            d = np.zeros(n, dtype=int)
            keep = np.arange(n)
            if g.severity is not None:
                # equal-severity pairs carry no direction; drop them
                d = (g.severity[rows, j] > g.severity[rows, i]).astype(int)
                keep = np.flatnonzero(g.severity[rows, j] != g.severity[rows, i])
                if keep.size == 0:
                    continue
            sign = np.where(M == 1, -1.0, 1.0).astype(cfg.dtype)[:, None]
            X = ad.mul(z[:, pj, :] - z[:, pi, :], sign)
            if keep.size < n:
                X = X[keep]
            y = (M ^ d).astype(np.float64)[keep]
            Xs += [X, ad.neg(X)]
            ys += [y, 1.0 - y]
    n_pairs = len(Xs) // 2
    if n_pairs == 0:
        return None, 0.0
    primary = ad.concat(Xs[0::2], axis=0)
    swapped = ad.concat(Xs[1::2], axis=0)
    y_p = np.concatenate(ys[0::2])
    y_s = np.concatenate(ys[1::2])
    logit_p = model.classify_logits(primary)
    logit_s = model.classify_logits(swapped)
    loss = ad.bce_with_logits(logit_p, y_p) + ad.bce_with_logits(logit_s, y_s)
    for kl, n in kls:
        loss = loss + ad.scale(kl, cfg.classifier_kl * n / len(idx))
    acc = float(np.mean((logit_p.data > 0) == (y_p > 0.5)))
    return loss, acc


def train_pairwise_classifier(timelines, model: PseModel, epochs: int | None = None,
                              pretrained: bool = True) -> TrainResult:
    """Jointly update encoder and classifier on swap-consistent pairwise BCE.

    Visit pairs are labelled by the true direction of change when state
    labels are present and otherwise assumed to be improvements, the
    allocation map deciding which visit plays the reference.
    """
    cfg = model.config
    timelines = list(timelines)
    if not model.frame_std.fitted or (cfg.merge_mode != "latent_only" and not model.global_std.fitted):
        if pretrained:
            log.warning("model normalisers not fitted; fitting on the classifier training set")
        fit_normalizers(model, timelines)
    groups = [g for g in prepare(model, timelines) if g.X.shape[1] >= 2]
    if not groups:
        raise ValueError("no timeline has two or more visits")
    shuffle_rng, alloc_rng, noise_rng = _streams(cfg.seed + 2, 3)
    params = model.classifier_params()
    if cfg.merge_mode != "global_only":
        params = model.encoder_params() + params
    opt = ad.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult()
    for epoch in range(cfg.epochs if epochs is None else epochs):
        total, acc, count = 0.0, 0.0, 0
        for g, idx in _batches(groups, cfg.batch_size, shuffle_rng):
            opt.zero_grad()
            loss, a = classification_loss(model, g, idx, alloc_rng,
                                          noise_rng if cfg.sample_latents else None)
            if loss is None:
                continue
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"classifier loss diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            acc += a * len(idx)
            count += len(idx)
        if count == 0:
            raise ValueError("no visit pair changes state; nothing to train on")
        result.losses.append(total / count)
        result.accuracy.append(acc / count)
    return result


# --------------------------------------------------------------------------
# inference

def _single_arrays(model: PseModel, tl: PatientTimeline):
    g = prepare(model, [tl])[0]
    return g.X, g.G


def encode_timeline(tl: PatientTimeline, model: PseModel, reverse: bool = False) -> list[LatentState]:
    """Per-visit latents listed in timestamp order (visits are sorted on construction).

    ``reverse`` feeds the visits through the recurrent cell latest first; the
    returned list is still indexed by visit.
    """
    X, G = _single_arrays(model, tl)
    if reverse:
        X = X[:, ::-1]
        G = None if G is None else G[:, ::-1]
    z, mu, lv = model.latents(X, G)
    sigma_parts, n = [], len(tl)
    if lv is not None:
        sigma_parts.append(np.exp(0.5 * lv.data[0].astype(np.float64)))
    if model.config.merge_mode != "latent_only":
        sigma_parts.append(np.ones((n, model.n_global)))
    sigma = np.concatenate(sigma_parts, axis=1)
    mus = z.data[0].astype(np.float64)
    if reverse:
        mus, sigma = mus[::-1], sigma[::-1]
    return [LatentState(mus[t], sigma[t], t) for t in range(n)]


def compare_latents(z_i, z_j, model: PseModel) -> float:
    w = model.params["cls.w"].data.astype(np.float64)
    b = float(model.params["cls.b"].data[0])
    a = float(np.dot(w, np.asarray(z_j) - np.asarray(z_i))) + b
    return float(0.5 * (1.0 + np.tanh(0.5 * a)))


def _order_free(model: PseModel) -> bool:
    return model.config.random_feed_order and model.config.merge_mode != "global_only"


def visit_pair_matrix(tl: PatientTimeline, model: PseModel) -> np.ndarray:
    """``P[i, j]`` = probability that visit j is worse than visit i.

    A model trained on randomly ordered sequences is scored on both feed
    orders and the latent differences averaged, which cancels whatever the
    recurrent position of a visit contributes.
    """
    mus = np.stack([ls.mu for ls in encode_timeline(tl, model)])
    if _order_free(model):
        mus = 0.5 * (mus + np.stack([ls.mu for ls in encode_timeline(tl, model, reverse=True)]))
    n = len(tl)
    P = np.full((n, n), 0.5)
    for i in range(n):
        for j in range(n):
            if i != j:
                P[i, j] = compare_latents(mus[i], mus[j], model)
    return P


def compare_visits(tl: PatientTimeline, i: int, j: int, model: PseModel,
                   pair_matrix: np.ndarray | None = None) -> float:
    """Probability that visit j is worse than visit i (deterioration)."""
    n = len(tl)
    if not (0 <= i < n and 0 <= j < n) or i == j:
        raise IndexError(f"invalid visit pair ({i}, {j}) for a timeline of {n} visits")
    if pair_matrix is None:
        pair_matrix = visit_pair_matrix(tl, model)
    return float(pair_matrix[i, j])


def pairwise_outcomes(tl: PatientTimeline, model: PseModel) -> list[tuple[int, int, float]]:
    P = visit_pair_matrix(tl, model)
    return [(i, j, float(P[i, j])) for i in range(len(tl)) for j in range(i + 1, len(tl))]


def labelled_pair_scores(timelines, model: PseModel) -> tuple[list, np.ndarray, np.ndarray]:
    """Scores for both orientations of every labelled visit pair.

    With state labels only pairs whose severity differs are kept and the
    label is 1 when the later-listed visit is the worse one; without labels
    every forward pair is taken as an improvement.  Ids read
    ``"<patient>:<reference>><target>"``.
    """
    ids, scores, labels = [], [], []
    for tl in timelines:
        P = visit_pair_matrix(tl, model)
        sev = tl.severity()
        for i in range(len(tl)):
            for j in range(i + 1, len(tl)):
                if sev is not None and sev[i] == sev[j]:
                    continue
                d = int(sev[j] > sev[i]) if sev is not None else 0
                ids += [f"{tl.patient_id}:{i}>{j}", f"{tl.patient_id}:{j}>{i}"]
                scores += [P[i, j], P[j, i]]
                labels += [d, 1 - d]
    return ids, np.array(scores), np.array(labels, dtype=int)
