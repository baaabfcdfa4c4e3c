import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.io import wavfile

from oracles import auroc_pairs
from voicetrack.cli import main, read_manifest
from voicetrack.frames import FrameFeatureMap, default_catalog
from voicetrack.functionals import GlobalFeatureVector, global_feature_names, global_group_index, write_global_store

NAMES = default_catalog().names
F0, L1 = NAMES.index("F0final_sma"), NAMES.index("audspec_lengthL1norm_sma")

FAST_TOML = """
[cohort]
n_patients = 12
frames_per_visit = 16
visits_per_patient = 3
with_globals = false
sigma_b = 0.5

[simulate]
test_fraction = 0.25

[pse]
frame_length = 16
conv_channels = [4, 4]
hidden_size = 4
latent_dim = 3
pretrain_epochs = 2
epochs = 3
batch_size = 8

[train]
n_seeds = 2

[track]
plots = false
"""


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "timestamp", "state", "task", "path", "split"])
        w.writerows(rows)


def _tree_bytes(root, skip=()):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix not in skip}


@pytest.fixture
def fast_cfg(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text(FAST_TOML)
    return p


# -- exit codes and configuration --------------------------------------------

def test_argparse_errors_are_validation():
    assert main([]) == 1
    assert main(["extract"]) == 1
    assert main(["bogus", "--out", "x"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "simulate" in capsys.readouterr().out


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "voicetrack.cli", "eval", str(tmp_path / "none.csv"),
                        "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert r.returncode == 1 and "cannot read" in r.stderr


def test_unknown_config_keys_rejected(tmp_path):
    cfg = tmp_path / "bad.toml"
    for text in ("[pse]\nlearning_rate = 0.1\n", "[nonsense]\nx = 1\n", "[track]\nthetaa = 1\n",
                 "[cohort]\nn_patients = 'many'\n", "not toml ["):
        cfg.write_text(text)
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_manifest_validation(tmp_path):
    m = tmp_path / "m.csv"
    _write_manifest(m, [["p1", 0, "", "a", "x.wav", "train"], ["p1", 1, "", "a", "y.wav", "test"]])
    with pytest.raises(ValueError, match="subject-disjoint"):
        read_manifest(m)
    _write_manifest(m, [["p1", 0, "", "a", "x.wav", "train"], ["p1", 0, "", "a", "y.wav", "train"]])
    with pytest.raises(ValueError, match="duplicate timestamp"):
        read_manifest(m)
    _write_manifest(m, [["p1", 0, "", "zz", "x.wav", "train"]])
    with pytest.raises(ValueError, match="task tag"):
        read_manifest(m)
    # test and follow-up are both held out, so one patient may span them
    _write_manifest(m, [["p1", 0, "", "a", "x.wav", "test"], ["p1", 1, "", "a", "y.wav", "followup"]])
    assert len(read_manifest(m)) == 2


# -- extract -----------------------------------------------------------------

def _audio_manifest(tmp_path, signals, fs=22050):
    rows = []
    for k, x in enumerate(signals):
        p = tmp_path / f"rec{k}.wav"
        wavfile.write(p, fs, x)
        rows.append([f"p{k}", 0, "", "a", p.name, "train"])
    m = tmp_path / "audio.csv"
    _write_manifest(m, rows)
    return m


def test_extract_silence(tmp_path):
    m = _audio_manifest(tmp_path, [np.zeros(22050, np.int16), np.zeros(33075, np.int16)])
    out = tmp_path / "feat"
    assert main(["extract", str(m), "--out", str(out)]) == 0
    maps = [FrameFeatureMap.from_csv(e.path) for e in read_manifest(out / "manifest.csv")]
    assert [f.n_frames for f in maps] == [9, 14]
    for f in maps:
        assert np.all(f.values[:, F0] == 0)
        assert np.all(f.values[:, L1] == 0)
    assert all(r["status"] == "ok" for r in _rows(out / "extract_log.csv"))
    assert json.loads((out / "catalog.json").read_text())["catalog_hash"] == default_catalog().hash
    assert (out / "resolved_config.json").exists()


def test_extract_tone_f0_and_rerun_identical(tmp_path):
    t = np.arange(22050) / 22050
    m = _audio_manifest(tmp_path, [(0.5 * np.sin(2 * np.pi * 220 * t) * 32767).astype(np.int16)])
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["extract", str(m), "--out", str(a)]) == 0
    assert main(["extract", str(m), "--out", str(b), "--workers", "2"]) == 0
    f0 = FrameFeatureMap.from_csv(next((a / "frames").glob("*.csv"))).values[:, F0]
    voiced = f0[f0 > 0]
    assert len(voiced) >= 7 and np.all(np.abs(voiced / 220 - 1) < 0.02)
    ta, tb = _tree_bytes(a), _tree_bytes(b)
    ta.pop("resolved_config.json"), tb.pop("resolved_config.json")
    assert ta == tb


def test_extract_failure_exit_two(tmp_path):
    m = _audio_manifest(tmp_path, [np.zeros(22050, np.int16)])
    (tmp_path / "bad.wav").write_bytes(b"not a wav at all")
    with open(m, "a", newline="") as fh:
        csv.writer(fh).writerow(["p9", 0, "", "a", "bad.wav", "train"])
    out = tmp_path / "feat"
    assert main(["extract", str(m), "--out", str(out)]) == 2
    log = _rows(out / "extract_log.csv")
    assert [r["status"] == "ok" for r in log] == [True, False]
    assert len(read_manifest(out / "manifest.csv")) == 1


# -- screen ------------------------------------------------------------------

def _stores(tmp_path, rng, shift_col=None, n=30):
    names = tuple(global_feature_names())
    gidx = global_group_index()
    pre = rng.normal(size=(n, len(names)))
    post = pre + rng.normal(scale=0.5, size=pre.shape)
    if shift_col is not None:
        post[:, shift_col] += 10.0
    paths = []
    for tag, X in (("pre", pre), ("post", post)):
        p = tmp_path / f"{tag}.csv"
        write_global_store(p, [GlobalFeatureVector(x, names, gidx, f"{tag}{k}") for k, x in enumerate(X)])
        paths.append(str(p))
    return names, paths


def test_screen_alpha_zero_empty(tmp_path, rng):
    _, (pre, post) = _stores(tmp_path, rng)
    out = tmp_path / "s"
    assert main(["screen", pre, post, "--alpha", "0", "--out", str(out)]) == 0
    assert (out / "paired_set.txt").read_text() == ""
    assert (out / "independent_set.txt").read_text() == ""
    assert (out / "group_tally.png").stat().st_size > 0
    tally = _rows(out / "group_tally.csv")
    assert sum(int(r["size"]) for r in tally) == 1666


def test_screen_shifted_feature_in_both_sets(tmp_path, rng):
    names, (pre, post) = _stores(tmp_path, rng, shift_col=100)
    out = tmp_path / "s"
    assert main(["screen", pre, post, "--alpha", "1e-6", "--out", str(out)]) == 0
    assert names[100] in (out / "paired_set.txt").read_text().split()
    assert names[100] in (out / "independent_set.txt").read_text().split()
    sel = {r["feature"]: r for r in _rows(out / "selection.csv")}
    assert sel[names[100]]["in_A"] == "1" and sel[names[100]]["in_B"] == "1"


def test_screen_alignment_errors(tmp_path, rng):
    _, (pre, _) = _stores(tmp_path, rng)
    other = tmp_path / "short.csv"
    names = tuple(global_feature_names())
    write_global_store(other, [GlobalFeatureVector(np.zeros(len(names)), names, global_group_index(), "x")])
    assert main(["screen", pre, str(other), "--out", str(tmp_path / "s")]) == 1
    assert main(["screen", pre, "--out", str(tmp_path / "s")]) == 1


# -- eval --------------------------------------------------------------------

def _pred_file(path, scores, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "score", "label"])
        for k, (s, y) in enumerate(zip(scores, labels)):
            w.writerow([f"r{k}", s, y])


def test_eval_perfect(tmp_path):
    p = tmp_path / "pred.csv"
    _pred_file(p, [0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert main(["eval", str(p), "--out", str(tmp_path / "e")]) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert all(m[k] == 1 for k in ("accuracy", "precision", "sensitivity", "specificity", "macro_f1", "auroc"))
    assert (tmp_path / "e" / "roc.png").exists() and (tmp_path / "e" / "confusion.png").exists()


def test_eval_known_counts(tmp_path, rng):
    # tp=3 fp=1 tn=4 fn=2
    scores = [0.9, 0.8, 0.7, 0.6, 0.2, 0.3, 0.1, 0.0, 0.05, 0.15]
    labels = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0]
    p = tmp_path / "pred.csv"
    _pred_file(p, scores, labels)
    assert main(["eval", str(p), "--out", str(tmp_path / "e")]) == 0
    m = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert (m["accuracy"], m["precision"], m["sensitivity"], m["specificity"]) == (0.7, 0.75, 0.6, 0.8)
    assert abs(m["auroc"] - auroc_pairs(np.array(scores), np.array(labels))) <= 1e-12


def test_eval_separate_labels_id_mismatch(tmp_path):
    p, lab = tmp_path / "pred.csv", tmp_path / "lab.csv"
    p.write_text("id,score\nr0,0.4\nr1,0.6\n")
    lab.write_text("id,label\nr0,0\nr2,1\n")
    assert main(["eval", str(p), "--labels", str(lab), "--out", str(tmp_path / "e")]) == 1
    lab.write_text("id,label\nr1,1\nr0,0\n")
    assert main(["eval", str(p), "--labels", str(lab), "--out", str(tmp_path / "e")]) == 0


# -- simulate / train / track ------------------------------------------------

def test_simulate_outputs(tmp_path, fast_cfg):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(fast_cfg), "--out", str(out), "--seed", "3"]) == 0
    entries = read_manifest(out / "manifest.csv")
    assert len(entries) == 12 * 3
    assert {e.split for e in entries} == {"train", "test", "followup"}
    ref = json.loads((out / "reference.json").read_text())
    assert 0.5 < ref["cross_sectional_bayes"] < ref["paired_bayes"] < 1
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["cohort"]["seed"] == 3 and resolved["pse"]["seed"] == 3


def test_pipeline_and_track_properties(tmp_path, fast_cfg):
    sim, run, trk = tmp_path / "sim", tmp_path / "run", tmp_path / "trk"
    assert main(["simulate", "--config", str(fast_cfg), "--out", str(sim)]) == 0
    assert main(["pretrain", str(sim / "manifest.csv"), "--config", str(fast_cfg), "--out", str(tmp_path / "pre")]) == 0
    assert main(["train", str(sim / "manifest.csv"), "--config", str(fast_cfg), "--out", str(run),
                 "--checkpoint", str(tmp_path / "pre" / "pretrained.ckpt")]) == 0
    report = json.loads((run / "train_report.json").read_text())
    assert len(report["test"]["accuracy"]["runs"]) == 2
    assert main(["track", str(sim / "manifest.csv"), "--checkpoint", str(run / "model.ckpt"),
                 "--config", str(fast_cfg), "--out", str(trk)]) == 0
    outcomes = _rows(trk / "outcomes.csv")
    # three visits give three ordered pairs per patient
    assert len(outcomes) == 12 * 3
    assert main(["track", str(sim / "manifest.csv"), "--checkpoint", str(run / "model.ckpt"),
                 "--config", str(fast_cfg), "--out", str(trk), "--split", "banana"]) == 1


def test_track_two_visits_single_visit_and_order(tmp_path, fast_cfg):
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(fast_cfg), "--out", str(sim)]) == 0
    assert main(["pretrain", str(sim / "manifest.csv"), "--config", str(fast_cfg), "--out", str(tmp_path / "pre")]) == 0
    ckpt = str(tmp_path / "pre" / "pretrained.ckpt")
    with open(sim / "manifest.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    first = rows[0][0]
    mine = [r for r in rows if r[0] == first]
    lone = [["solo", 0, "", "a", mine[0][4], "train"]]
    fwd, rev = tmp_path / "sim" / "fwd.csv", tmp_path / "sim" / "rev.csv"
    _write_manifest(fwd, mine[:2] + lone)
    _write_manifest(rev, lone + mine[:2][::-1])
    outs = []
    for m, name in ((fwd, "t1"), (rev, "t2")):
        assert main(["track", str(m), "--checkpoint", ckpt, "--config", str(fast_cfg),
                     "--out", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    rows1 = _rows(outs[0] / "outcomes.csv")
    assert len(rows1) == 1 and (rows1[0]["i"], rows1[0]["j"]) == ("0", "1")
    rep = json.loads((outs[0] / "track_report.json").read_text())
    assert rep["single_visit_patients"] == ["solo"]
    for f in ("outcomes.csv", "trajectory.csv", "ranking.csv", "track_report.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_train_rejects_mixed_splits(tmp_path, fast_cfg):
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(fast_cfg), "--out", str(sim)]) == 0
    with open(sim / "manifest.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    victim = next(r for r in rows if r[5] == "train")
    rows = [r[:5] + ["test"] if r is victim else r for r in rows]
    bad = sim / "bad.csv"
    _write_manifest(bad, rows)
    assert main(["train", str(bad), "--config", str(fast_cfg), "--out", str(tmp_path / "run")]) == 1
    assert not (tmp_path / "run" / "model.ckpt").exists()


RISE_TOML = """
[cohort]
n_patients = 200
frames_per_visit = 32
visits_per_patient = 3
rehospitalization_p = 0.5
with_globals = false
seed = 2

[pse]
frame_length = 32
pretrain_epochs = 5
epochs = 40
lr = 3e-3

[train]
n_seeds = 1

[track]
plots = false
"""


def test_deteriorating_patients_score_rises(tmp_path):
    cfg = tmp_path / "rise.toml"
    cfg.write_text(RISE_TOML)
    sim, run, trk = tmp_path / "sim", tmp_path / "run", tmp_path / "trk"
    assert main(["simulate", "--config", str(cfg), "--out", str(sim)]) == 0
    assert main(["train", str(sim / "manifest.csv"), "--config", str(cfg), "--out", str(run)]) == 0
    assert main(["track", str(sim / "manifest.csv"), "--checkpoint", str(run / "model.ckpt"),
                 "--config", str(cfg), "--out", str(trk)]) == 0
    held_out = {e.patient_id for e in read_manifest(sim / "manifest.csv") if e.split != "train"}
    by_patient = {}
    for r in (r for r in _rows(trk / "trajectory.csv") if r["patient"] in held_out):
        by_patient.setdefault(r["patient"], {})[int(r["visit"])] = (float(r["score"]), float(r["gold"]))
    worse = [v for v in by_patient.values() if v[2][1] == 1.0]
    stable = [v for v in by_patient.values() if v[2][1] == 0.0]
    assert worse and stable
    rises = [v[2][0] > v[1][0] for v in worse]
    assert np.mean(rises) >= 0.9
    assert np.mean([v[2][0] for v in worse]) > np.mean([v[2][0] for v in stable])
