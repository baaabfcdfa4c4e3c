"""Per-recording functionals over frame trajectories, grouped G1-G11."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .frames import N_BANDS, FeatureCatalog, FrameFeatureMap, default_catalog

FUNCTIONALS = (
    "mean", "stddev", "skewness", "kurtosis", "min", "max", "range",
    "quartile1", "quartile2", "quartile3", "iqr1-3", "percentile1", "percentile99",
    "linregc1", "linregerrQ", "meanCrossingRate", "upperOutlierFraction",
)

GLOBAL_GROUPS = {
    "G1": "Spectral", "G2": "RASTA", "G3": "ZCR", "G4": "RMS Energy", "G5": "FFT",
    "G6": "R-filters", "G7": "MFCC", "G8": "F0", "G9": "Jitter", "G10": "Shimmer", "G11": "HNR",
}

_LLD_GROUP = {6: "G1", 7: "G2", 9: "G3", 69: "G3", 8: "G4", 68: "G4", 70: "G4", 71: "G4",
              0: "G8", 1: "G8", 2: "G9", 3: "G9", 4: "G10", 5: "G11", 65: "G11", 66: "G11", 67: "G11"}
_LLD_GROUP.update({i: "G5" for i in range(36, 51)})
_LLD_GROUP.update({i: "G6" for i in range(10, 36)})
_LLD_GROUP.update({i: "G7" for i in range(51, 65)})


def apply_functionals(traj) -> np.ndarray:
    """The 17 functionals of a 1-D trajectory, in ``FUNCTIONALS`` order.

    Population moments are used throughout.  With fewer than two frames the
    spread and slope terms are 0; skewness and kurtosis need three frames
    and a non-zero variance, otherwise they are 0 as well.
    """
    x = np.asarray(traj, dtype=np.float64).ravel()
    if len(x) == 0:
        raise ValueError("empty trajectory")
    return functionals_by_column(x[:, None])[0]


def functionals_by_column(values) -> np.ndarray:
    """``apply_functionals`` of every column of a (T, K) matrix, as a (K, 17) array."""
    x = np.asarray(values, dtype=np.float64)
    n = x.shape[0]
    if x.ndim != 2 or n == 0:
        raise ValueError("need a non-empty (frames x trajectories) matrix")
    mean = x.mean(axis=0)
    dev = x - mean
    zeros = np.zeros(x.shape[1])
    var = np.mean(dev ** 2, axis=0) if n >= 2 else zeros
    std = np.sqrt(var)
    skew, kurt = zeros.copy(), zeros.copy()
    if n >= 3:
        ok = var > 0
        skew[ok] = np.mean(dev[:, ok] ** 3, axis=0) / var[ok] ** 1.5
        kurt[ok] = np.mean(dev[:, ok] ** 4, axis=0) / var[ok] ** 2
    q1, q2, q3, p1, p99 = np.percentile(x, [25, 50, 75, 1, 99], axis=0)
    if n >= 2:
        tc = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        slope = tc @ dev / np.sum(tc ** 2)
        resid = dev - np.outer(tc, slope)
        err = np.mean(resid ** 2, axis=0)
        above = dev > 0
        mcr = np.count_nonzero(above[1:] != above[:-1], axis=0) / (n - 1)
    else:
        slope = err = mcr = zeros
    upper = np.count_nonzero(x > mean + std, axis=0) / n
    lo, hi = x.min(axis=0), x.max(axis=0)
    return np.stack([mean, std, skew, kurt, lo, hi, hi - lo, q1, q2, q3, q3 - q1, p1, p99,
                     slope, err, mcr, upper], axis=1)


def _trajectory_names(catalog: FeatureCatalog) -> list[tuple[str, str]]:
    """(name, group) for each trajectory fed to the functionals."""
    out = [(e.name, _LLD_GROUP[e.id]) for e in catalog.entries]
    out += [(f"audSpec_Rfilt_sma_de[{k}]", "G6") for k in range(N_BANDS)]
    return out


def global_feature_names(catalog: FeatureCatalog | None = None) -> list[str]:
    catalog = catalog or default_catalog()
    return [f"{lld}__{fn}" for lld, _ in _trajectory_names(catalog) for fn in FUNCTIONALS]


def global_group_index(catalog: FeatureCatalog | None = None) -> dict[str, str]:
    catalog = catalog or default_catalog()
    return {f"{lld}__{fn}": grp for lld, grp in _trajectory_names(catalog) for fn in FUNCTIONALS}


def group_sizes(catalog: FeatureCatalog | None = None) -> dict[str, int]:
    counts = {g: 0 for g in GLOBAL_GROUPS}
    for grp in global_group_index(catalog).values():
        counts[grp] += 1
    return counts


@dataclass(frozen=True)
class GlobalFeatureVector:
    values: np.ndarray
    names: tuple
    group_index: dict
    source_id: str = ""

    def __len__(self):
        return len(self.values)

    def select(self, names) -> np.ndarray:
        pos = {n: i for i, n in enumerate(self.names)}
        return self.values[[pos[n] for n in names]]


def build_global_vector(fmap: FrameFeatureMap, catalog: FeatureCatalog | None = None) -> GlobalFeatureVector:
    catalog = catalog or default_catalog()
    if fmap.catalog_hash != catalog.hash:
        raise ValueError("frame map was produced with a different feature catalog")
    rasta = fmap.values[:, 10:36]
    deltas = np.diff(rasta, axis=0) if fmap.n_frames > 1 else np.zeros((1, N_BANDS))
    values = np.concatenate([functionals_by_column(fmap.values).ravel(),
                             functionals_by_column(deltas).ravel()])
    return GlobalFeatureVector(values, tuple(global_feature_names(catalog)),
                               global_group_index(catalog), fmap.source_id)


def write_global_store(path: str | Path, vectors: list[GlobalFeatureVector]) -> None:
    """One CSV row per recording plus a ``<stem>_groups.json`` group index."""
    path = Path(path)
    if not vectors:
        raise ValueError("no vectors to write")
    names = list(vectors[0].names)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recording_id", *names])
        for v in vectors:
            if list(v.names) != names:
                raise ValueError(f"{v.source_id}: schema differs from the first vector")
            writer.writerow([v.source_id, *(format(x, ".17g") for x in v.values)])
    groups_path = path.with_name(path.stem + "_groups.json")
    groups_path.write_text(json.dumps(vectors[0].group_index, indent=1) + "\n")


def read_global_store(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    """Returns ``(recording_ids, feature_names, matrix)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(x) for x in row[1:]])
    return ids, header[1:], np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
