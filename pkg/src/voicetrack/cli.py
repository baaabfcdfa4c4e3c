"""Command-line pipelines: extract, screen, pretrain, train, track, eval, simulate.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .cohort import CohortConfig, FnnConfig, bayes_reference_accuracies, generate_cohort, split_patients
from .dsp import load_waveform
from .frames import FrameFeatureMap, default_catalog, extract_lld_map
from .functionals import build_global_vector, global_group_index, read_global_store, write_global_store
from .metrics import evaluate, roc_auroc
from .pse import (PatientTimeline, PseConfig, PseModel, VisitRecord, labelled_pair_scores,
                  pairwise_outcomes, pretrain_reconstruction, train_pairwise_classifier)
from .screening import select_hf_voice_sets
from .trajectory import (GoldLabel, PairwiseOutcome, aggregate_scores, bradley_terry_strengths,
                         fit_calibration, win_counts_from_outcomes)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("voicetrack")

TASK_TAGS = ("a", "u", "i", "pg", "mm", "mlh", "count")
SPLITS = ("train", "test", "followup")
MANIFEST_COLUMNS = ("patient_id", "timestamp", "state", "task", "path", "split")


class ValidationError(ValueError):
    """Bad input files, manifests or configuration (exit code 1)."""


# --------------------------------------------------------------------------
# configuration

@dataclass
class ScreenConfig:
    alpha: float = 0.05


@dataclass
class TrainConfig:
    n_seeds: int = 5
    pretrain: bool = True


@dataclass
class TrackConfig:
    theta: float = 0.0
    phi1: float = 8.0  # centres the head: an outcome of 0.5 maps to 0.5
    phi0: float = -4.0
    calibrate: bool = False
    loss: str = "bce"
    bradley_terry: bool = True
    soft_wins: bool = False
    bt_prior: float = 0.5
    plots: bool = True


@dataclass
class ExtractConfig:
    resample_to: int | None = None


@dataclass
class SimulateConfig:
    test_fraction: float = 0.2
    task: str = "a"


SECTIONS = {"cohort": CohortConfig, "pse": PseConfig, "fnn": FnnConfig, "screen": ScreenConfig,
            "train": TrainConfig, "track": TrackConfig, "extract": ExtractConfig,
            "simulate": SimulateConfig}


def _build(cls, d: dict):
    if hasattr(cls, "from_dict"):
        return cls.from_dict(d)
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValidationError(f"unknown keys for [{cls.__name__}]: {sorted(unknown)}")
    return cls(**d)


def load_config(path: str | None, seed: int | None = None) -> dict:
    raw = {}
    if path:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ValidationError(f"cannot read config {path}: {e}") from e
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    cfg = {}
    for name, cls in SECTIONS.items():
        section = dict(raw.get(name, {}))
        if seed is not None and name in ("cohort", "pse", "fnn"):
            section["seed"] = seed
        try:
            cfg[name] = _build(cls, section)
        except ValidationError:
            raise
        except (TypeError, ValueError) as e:
            raise ValidationError(f"[{name}]: {e}") from e
    return cfg


def _jsonable(obj):
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def write_resolved_config(cfg: dict, out: Path) -> None:
    resolved = {k: _jsonable(v) for k, v in cfg.items()}
    _write_json(out / "resolved_config.json", resolved)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# --------------------------------------------------------------------------
# manifests

@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    timestamp: float
    state: str | None
    task: str
    path: Path
    split: str


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
            if missing:
                raise ValidationError(f"{path}: missing manifest columns {sorted(missing)}")
            rows = list(reader)
    except OSError as e:
        raise ValidationError(f"cannot read manifest {path}: {e}") from e
    entries = []
    for k, r in enumerate(rows, start=2):
        if r["task"] not in TASK_TAGS:
            raise ValidationError(f"{path}:{k}: task tag {r['task']!r} not in {TASK_TAGS}")
        if r["split"] not in SPLITS:
            raise ValidationError(f"{path}:{k}: split {r['split']!r} not in {SPLITS}")
        try:
            ts = float(r["timestamp"])
        except ValueError as e:
            raise ValidationError(f"{path}:{k}: bad timestamp {r['timestamp']!r}") from e
        p = Path(r["path"])
        entries.append(ManifestEntry(r["patient_id"], ts, r["state"] or None, r["task"],
                                     p if p.is_absolute() else path.parent / p, r["split"]))
    validate_manifest(entries)
    return entries


def validate_manifest(entries) -> None:
    """Per-task strictly increasing timestamps and subject-disjoint splits."""
    seen: dict[tuple, set] = {}
    splits: dict[str, set] = {}
    for e in entries:
        key = (e.patient_id, e.task)
        if e.timestamp in seen.setdefault(key, set()):
            raise ValidationError(f"patient {e.patient_id}: duplicate timestamp {e.timestamp} for task {e.task}")
        seen[key].add(e.timestamp)
        splits.setdefault(e.patient_id, set()).add("train" if e.split == "train" else "held_out")
    mixed = sorted(p for p, s in splits.items() if len(s) > 1)
    if mixed:
        raise ValidationError(f"splits are not subject-disjoint for patients {mixed}")


def write_manifest(path: Path, entries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            rel = e.path.relative_to(path.parent) if e.path.is_relative_to(path.parent) else e.path
            w.writerow([e.patient_id, _fmt(e.timestamp), e.state or "", e.task, rel.as_posix(), e.split])


def load_timelines(entries, splits=None, with_globals: bool = False, task: str | None = None) -> list[PatientTimeline]:
    """Timelines from feature-map entries, one task per patient (the first listed unless given)."""
    by_patient: dict[str, list] = {}
    for e in entries:
        if splits is not None and e.split not in splits:
            continue
        by_patient.setdefault(e.patient_id, []).append(e)
    out = []
    for pid in sorted(by_patient):
        rows = by_patient[pid]
        t = task or rows[0].task
        visits = []
        for e in (r for r in rows if r.task == t):
            if e.path.suffix.lower() != ".csv":
                raise ValidationError(f"{e.path}: expected an extracted frame CSV (run extract first)")
            fmap = FrameFeatureMap.from_csv(e.path)
            g = build_global_vector(fmap) if with_globals else None
            visits.append(VisitRecord(pid, e.timestamp, fmap, g, e.state))
        out.append(PatientTimeline(pid, tuple(visits)))
    return out


# --------------------------------------------------------------------------
# plotting

def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "voicetrack"
    return plt


def _save(fig, path: Path) -> None:
    meta = {"Software": None} if path.suffix == ".png" else {"Date": None, "Creator": None}
    fig.savefig(path, metadata=meta, dpi=100)
    fig.clf()


def plot_group_tally(tallies: dict, path: Path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(8, 4))
    groups = list(tallies["paired"])
    x = np.arange(len(groups))
    for k, (name, off) in enumerate((("paired", -0.2), ("independent", 0.2))):
        pct = [tallies[name][g][2] for g in groups]
        bars = ax.bar(x + off, pct, width=0.4, label=f"{name} t-test")
        for b, g in zip(bars, groups):
            ax.annotate(str(tallies[name][g][0]), (b.get_x() + b.get_width() / 2, b.get_height()),
                        ha="center", va="bottom", fontsize=7)
    ax.set_xticks(x, groups)
    ax.set_ylabel("selected features (%)")
    ax.legend()
    _save(fig, path)
    plt.close(fig)


def plot_trajectory(pid: str, days, scores, gold, path: Path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(days, scores, marker="o", label="tracked score")
    if gold is not None:
        ax.plot(days, gold, ls="--", marker="x", label="state severity")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("day")
    ax.set_title(pid)
    ax.legend(fontsize=7)
    _save(fig, path)
    plt.close(fig)


def plot_roc_confusion(roc, counts, out: Path) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(roc.fpr, roc.tpr, drawstyle="steps-post")
    ax.plot([0, 1], [0, 1], ls=":", color="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"AUROC = {roc.auroc:.3f}")
    _save(fig, out / "roc.png")
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(4, 4))
    m = np.array([[counts.tn, counts.fp], [counts.fn, counts.tp]])
    ax.imshow(m, cmap="Blues")
    for (r, c), v in np.ndenumerate(m):
        ax.text(c, r, str(v), ha="center", va="center")
    ax.set_xticks([0, 1], ["improve", "deteriorate"])
    ax.set_yticks([0, 1], ["improve", "deteriorate"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    _save(fig, out / "confusion.png")
    plt.close(fig)


# --------------------------------------------------------------------------
# commands

def _extract_one(job):
    entry_path, out_path, resample_to = job
    w = load_waveform(entry_path, resample_to=resample_to)
    fmap = extract_lld_map(w, source_id=out_path.stem)
    fmap.to_csv(out_path, sample_rate_hz=w.sample_rate_hz)
    return fmap


def cmd_extract(args, cfg) -> int:
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    entries = read_manifest(args.manifest)
    jobs, new_entries = [], []
    for k, e in enumerate(entries):
        rid = f"{e.patient_id}_{e.task}_{k:04d}"
        target = out / "frames" / f"{rid}.csv"
        jobs.append((e.path, target, cfg["extract"].resample_to))
        new_entries.append(ManifestEntry(e.patient_id, e.timestamp, e.state, e.task, target, e.split))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_safe_extract, jobs))
    else:
        results = [_safe_extract(j) for j in jobs]
    failures, vectors, ok_entries = 0, [], []
    with open(out / "extract_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recording_id", "status", "n_frames", "flags"])
        for (src, target, _), e, (fmap, err) in zip(jobs, new_entries, results):
            if err is not None:
                failures += 1
                log.error("%s: %s", src, err)
                w.writerow([target.stem, f"error: {err}", 0, ""])
                continue
            flags = ";".join(f"{k}={v}" for k, v in sorted(fmap.flags.items()))
            w.writerow([target.stem, "ok", fmap.n_frames, flags])
            vectors.append(build_global_vector(fmap))
            ok_entries.append(e)
    if vectors:
        write_global_store(out / "globals.csv", vectors)
    write_manifest(out / "manifest.csv", ok_entries)
    _write_json(out / "catalog.json", {"catalog_hash": default_catalog().hash,
                                       "names": default_catalog().names})
    write_resolved_config(cfg, out)
    return 2 if failures else 0


def _safe_extract(job):
    try:
        return _extract_one(job), None
    except (OSError, ValueError) as e:
        return None, str(e)


def _screen_matrices(args):
    if args.manifest:
        entries = read_manifest(args.manifest)
        ids, names, X = read_global_store(args.globals)
        row = {rid: k for k, rid in enumerate(ids)}
        pre, post = {}, {}
        for e in entries:
            rid = e.path.stem
            if rid not in row:
                raise ValidationError(f"recording {rid} missing from {args.globals}")
            if e.state == "decompensated":
                pre.setdefault(e.patient_id, row[rid])
            elif e.state == "post_treatment":
                post.setdefault(e.patient_id, row[rid])
        pids = sorted(set(pre) & set(post))
        if len(pids) < 2:
            raise ValidationError("need at least two patients with both admission and discharge visits")
        return names, X[[pre[p] for p in pids]], X[[post[p] for p in pids]]
    ids_a, names, A = read_global_store(args.pre)
    ids_b, names_b, B = read_global_store(args.post)
    if names != names_b:
        raise ValidationError("pre and post global stores have different schemas")
    if A.shape != B.shape:
        raise ValidationError(f"pre/post row counts differ: {A.shape[0]} vs {B.shape[0]}")
    return names, A, B


def cmd_screen(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alpha = cfg["screen"].alpha if args.alpha is None else args.alpha
    names, pre, post = _screen_matrices(args)
    gidx = global_group_index()
    unknown = [n for n in names if n not in gidx]
    if unknown:
        raise ValidationError(f"unknown global feature names, e.g. {unknown[:3]}")
    sel = select_hf_voice_sets(pre, post, alpha=alpha, names=names, group_index=gidx)
    with open(out / "selection.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "group", "t_paired", "p_paired", "t_indep", "p_indep", "in_A", "in_B"])
        for n in names:
            a, b = sel.paired[n], sel.independent[n]
            w.writerow([n, gidx[n], _fmt(a.t), _fmt(a.p_two_sided), _fmt(b.t), _fmt(b.p_two_sided),
                        int(n in sel.set_a), int(n in sel.set_b)])
    with open(out / "group_tally.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "size", "paired_count", "paired_pct", "independent_count", "independent_pct"])
        for g, (cnt, size, pct) in sel.group_counts["paired"].items():
            ci, _, pi = sel.group_counts["independent"][g]
            w.writerow([g, size, cnt, _fmt(pct), ci, _fmt(pi)])
    for fname, chosen in (("paired_set.txt", sel.paired_set), ("independent_set.txt", sel.independent_set)):
        (out / fname).write_text("".join(f"{n}\n" for n in names if n in chosen))
    plot_group_tally(sel.group_counts, out / "group_tally.png")
    write_resolved_config(cfg, out)
    log.info("alpha=%g: %d paired, %d independent", alpha, len(sel.set_a), len(sel.set_b))
    return 0


def _pse_cfg(cfg, seed_offset: int = 0) -> PseConfig:
    d = cfg["pse"].to_dict()
    d["seed"] += seed_offset
    return PseConfig.from_dict(d)


def _write_losses(path: Path, columns: dict) -> None:
    keys = list(columns)
    n = max(len(v) for v in columns.values())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *keys])
        for e in range(n):
            w.writerow([e, *(_fmt(columns[k][e]) if e < len(columns[k]) else "" for k in keys)])


def cmd_pretrain(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pcfg = cfg["pse"]
    train = load_timelines(read_manifest(args.manifest), {"train"}, pcfg.merge_mode != "latent_only")
    if not train:
        raise ValidationError("manifest has no training patients")
    model = PseModel(pcfg)
    res = pretrain_reconstruction(train, model)
    model.save(out / "pretrained.ckpt")
    _write_losses(out / "pretrain_losses.csv", {"reconstruction": res.losses})
    write_resolved_config(cfg, out)
    return 0


def _summary(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if len(a) > 1 else 0.0,
            "runs": [float(v) for v in a]}


def cmd_train(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(args.manifest)
    merge = cfg["pse"].merge_mode != "latent_only"
    train = load_timelines(entries, {"train"}, merge)
    test = load_timelines(entries, {"test", "followup"}, merge)
    if not train:
        raise ValidationError("manifest has no training patients")
    n_seeds = cfg["train"].n_seeds
    if n_seeds < 1:
        raise ValidationError("n_seeds must be >= 1")
    runs: dict[str, dict[str, list]] = {"train": {}, "test": {}}
    losses = {}
    first = None
    for k in range(n_seeds):
        pcfg = _pse_cfg(cfg, k)
        if args.checkpoint:
            model = PseModel.load(args.checkpoint)
            model.config.seed = pcfg.seed
        else:
            model = PseModel(pcfg)
            if cfg["train"].pretrain and pcfg.pretrain_epochs and pcfg.merge_mode != "global_only":
                losses[f"pretrain_seed{pcfg.seed}"] = pretrain_reconstruction(train, model).losses
        res = train_pairwise_classifier(train, model, pretrained=bool(args.checkpoint) or cfg["train"].pretrain)
        losses[f"classifier_seed{pcfg.seed}"] = res.losses
        for split, tls in (("train", train), ("test", test)):
            if not tls:
                continue
            ids, scores, labels = labelled_pair_scores(tls, model)
            if not ids:
                continue
            rep = evaluate((scores >= 0.5).astype(int), labels).as_dict()
            rep.pop("flags", None)
            if len(set(labels.tolist())) == 2:
                rep["auroc"] = roc_auroc(scores, labels).auroc
            for m, v in rep.items():
                runs[split].setdefault(m, []).append(v)
        if first is None:
            first = model
            model.save(out / "model.ckpt")
            if test:
                ids, scores, labels = labelled_pair_scores(test, model)
                with open(out / "predictions_test.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["id", "score", "label"])
                    for i, s, y in zip(ids, scores, labels):
                        w.writerow([i, _fmt(s), int(y)])
    _write_losses(out / "losses.csv", losses)
    report = {split: {m: _summary(v) for m, v in ms.items()} for split, ms in runs.items() if ms}
    report["n_seeds"] = n_seeds
    report["n_train_patients"] = len(train)
    report["n_test_patients"] = len(test)
    _write_json(out / "train_report.json", report)
    write_resolved_config(cfg, out)
    if "test" in report and "accuracy" in report["test"]:
        log.info("test pairwise accuracy %.3f +/- %.3f", report["test"]["accuracy"]["mean"],
                 report["test"]["accuracy"]["std"])
    return 0


def cmd_track(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg["track"]
    model = PseModel.load(args.checkpoint)
    entries = read_manifest(args.manifest)
    splits = None if args.split == "all" else {args.split}
    timelines = load_timelines(entries, splits, model.config.merge_mode != "latent_only")
    outcome_sets, gold, skipped = {}, [], []
    for tl in timelines:
        if len(tl) < 2:
            skipped.append(tl.patient_id)
            log.warning("patient %s has a single visit; no pairs to compare", tl.patient_id)
            continue
        outs = [PairwiseOutcome(tl.patient_id, i, j, y) for i, j, y in pairwise_outcomes(tl, model)]
        outcome_sets[tl.patient_id] = (outs, tl.timestamps, tl)
        sev = tl.severity()
        if sev is not None:
            gold += [GoldLabel(tl.patient_id, j, float(sev[j])) for j in range(1, len(tl))]
    theta, phi = tcfg.theta, (tcfg.phi1, tcfg.phi0)
    calib = None
    if tcfg.calibrate and len(gold) >= 2:
        calib = fit_calibration({p: (o, t) for p, (o, t, _) in outcome_sets.items()}, gold, loss=tcfg.loss,
                                theta0=theta, phi0=phi)
        theta, phi = calib.theta, calib.phi
    gold_map = {(g.patient_id, g.visit): g.value for g in gold}
    plot_dir = out / "plots"
    if tcfg.plots:
        plot_dir.mkdir(exist_ok=True)
    with open(out / "outcomes.csv", "w", newline="") as fo, \
            open(out / "trajectory.csv", "w", newline="") as ft, \
            open(out / "ranking.csv", "w", newline="") as fr:
        wo, wt, wr = csv.writer(fo), csv.writer(ft), csv.writer(fr)
        wo.writerow(["patient", "i", "j", "t_i", "t_j", "y_hat"])
        wt.writerow(["patient", "visit", "timestamp", "score", "gold"])
        wr.writerow(["patient", "visit", "timestamp", "strength", "status"])
        for pid in sorted(outcome_sets):
            outs, ts, tl = outcome_sets[pid]
            for o in outs:
                wo.writerow([pid, o.i, o.j, _fmt(ts[o.i]), _fmt(ts[o.j]), _fmt(o.y_hat)])
            est = aggregate_scores(outs, ts, theta, phi, pid)
            for v, s in zip(est.visits, est.scores):
                g = gold_map.get((pid, int(v)))
                wt.writerow([pid, int(v), _fmt(ts[v]), _fmt(s), "" if g is None else _fmt(g)])
            if tcfg.bradley_terry:
                W = win_counts_from_outcomes(outs, len(tl), soft=tcfg.soft_wins)
                try:
                    rank = bradley_terry_strengths(W, prior=tcfg.bt_prior)
                    for k in range(len(tl)):
                        wr.writerow([pid, k, _fmt(ts[k]), _fmt(rank.strengths[k]),
                                     "converged" if rank.converged else "max_iter"])
                except ValueError as e:
                    wr.writerow([pid, "", "", "", f"skipped: {e}"])
            if tcfg.plots:
                sev = tl.severity()
                days = ts[est.visits]
                plot_trajectory(pid, days, est.scores, None if sev is None else sev[est.visits],
                                plot_dir / f"{pid}.png")
    report = {"theta": theta, "phi": list(phi), "n_patients": len(outcome_sets),
              "single_visit_patients": skipped}
    if calib is not None:
        report["calibration"] = {"loss": calib.loss, "degenerate": calib.degenerate,
                                 "iterations": len(calib.history) - 1}
    _write_json(out / "track_report.json", report)
    write_resolved_config(cfg, out)
    return 0


def _read_scores(path) -> dict:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}") from e
    return rows


def cmd_eval(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = _read_scores(args.predictions)
    if not rows or "id" not in rows[0] or "score" not in rows[0]:
        raise ValidationError("predictions need 'id' and 'score' columns")
    if args.labels:
        lab_rows = _read_scores(args.labels)
        labels = {r["id"]: int(r["label"]) for r in lab_rows}
        ids = [r["id"] for r in rows]
        if set(ids) != set(labels) or len(ids) != len(labels):
            raise ValidationError("prediction and label ids do not match")
        y = np.array([labels[i] for i in ids])
    else:
        if "label" not in rows[0]:
            raise ValidationError("no labels: pass --labels or include a 'label' column")
        y = np.array([int(r["label"]) for r in rows])
    s = np.array([float(r["score"]) for r in rows])
    rep = evaluate((s >= args.threshold).astype(int), y)
    report = rep.as_dict()
    report["n"] = int(len(y))
    report["threshold"] = args.threshold
    if len(set(y.tolist())) == 2:
        roc = roc_auroc(s, y)
        report["auroc"] = roc.auroc
        with open(out / "roc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
                w.writerow([_fmt(t), _fmt(f), _fmt(p)])
        from .metrics import confusion_counts
        plot_roc_confusion(roc, confusion_counts((s >= args.threshold).astype(int), y), out)
    _write_json(out / "metrics.json", report)
    return 0


def cmd_simulate(args, cfg) -> int:
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    ccfg, scfg = cfg["cohort"], cfg["simulate"]
    if scfg.task not in TASK_TAGS:
        raise ValidationError(f"task tag {scfg.task!r} not in {TASK_TAGS}")
    cohort = generate_cohort(ccfg)
    train_ids, _ = split_patients(cohort.patient_ids, scfg.test_fraction, ccfg.seed)
    train_ids = set(train_ids)
    entries, vectors = [], []
    for tl in cohort.timelines:
        split = "train" if tl.patient_id in train_ids else "test"
        for t, v in enumerate(tl.visits):
            path = out / "frames" / f"{v.frame_map.source_id}.csv"
            v.frame_map.to_csv(path)
            entries.append(ManifestEntry(tl.patient_id, v.timestamp, v.state_label, scfg.task, path,
                                         split if t < 2 or split == "train" else "followup"))
            if v.global_vec is not None:
                vectors.append(v.global_vec)
    write_manifest(out / "manifest.csv", entries)
    if vectors:
        write_global_store(out / "globals.csv", vectors)
    ref = bayes_reference_accuracies(ccfg)
    _write_json(out / "reference.json", {
        "cross_sectional_bayes": ref.cross_sectional, "paired_bayes": ref.paired,
        "sigma_v": ref.sigma_v, "sigma_w": ccfg.sigma_w, "degenerate": ref.degenerate,
        "affected_channels": np.flatnonzero(cohort.direction).tolist()})
    write_resolved_config(cfg, out)
    return 0


COMMANDS = {"extract": cmd_extract, "screen": cmd_screen, "pretrain": cmd_pretrain, "train": cmd_train,
            "track": cmd_track, "eval": cmd_eval, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="override every seed in the configuration")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--workers", type=int, default=1, help="parallel workers (extract only)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="voicetrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("extract", parents=[common], help="audio manifest -> frame and global feature stores")
    s.add_argument("manifest")
    s = sub.add_parser("screen", parents=[common], help="paired/independent t-test feature screening")
    s.add_argument("pre", nargs="?", help="global store of the admission recordings")
    s.add_argument("post", nargs="?", help="row-aligned global store of the discharge recordings")
    s.add_argument("--manifest", help="pair recordings by patient from a manifest instead")
    s.add_argument("--globals", help="global store used with --manifest")
    s.add_argument("--alpha", type=float)
    for name, text in (("pretrain", "reconstruction pretraining"), ("train", "pairwise classifier training")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("manifest")
        if name == "train":
            s.add_argument("--checkpoint", help="start from a pretrained checkpoint")
    s = sub.add_parser("track", parents=[common], help="pairwise outcomes and trajectories per patient")
    s.add_argument("manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="all", choices=("all", *SPLITS))
    s = sub.add_parser("eval", parents=[common], help="metrics, ROC and confusion plots")
    s.add_argument("predictions")
    s.add_argument("--labels")
    s.add_argument("--threshold", type=float, default=0.5)
    sub.add_parser("simulate", parents=[common], help="synthetic cohort in manifest + feature-store form")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "screen" and not args.manifest and not (args.pre and args.post):
            raise ValidationError("screen needs PRE and POST stores, or --manifest with --globals")
        if args.command == "screen" and args.manifest and not args.globals:
            raise ValidationError("--manifest requires --globals")
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](args, cfg)
    except ValueError as e:
        log.error("%s", e)
        return 1
    except Exception as e:  # noqa: BLE001 - any other failure is a runtime error
        log.error("%s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
