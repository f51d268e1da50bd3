"""Acceptance suite: one PASS/FAIL line per criterion (see the summary at the end of the pytest run)."""

import json
import subprocess
import sys
import time
import warnings
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from contamdetect.benchmark import BenchmarkSpec, run_benchmark
from contamdetect.cnn import Hyperparams, light_architecture
from contamdetect.evaluation import ConfusionMatrix, MetricsRow, cross_validate, fn_rate, fp_rate
from contamdetect.imaging import (
    DELTA,
    StructuringElement,
    binarize,
    closing,
    connected_components,
    dilate,
    erode,
    opening,
    shape_stats,
)
from contamdetect.pipeline import run_pipeline
from contamdetect.synth import ContaminantSpec, SceneSpec, derive_seed, generate_crop_dataset, generate_scene

import gradcheck
import oracles
import paper_values as pv


def _within(got: dict, want: dict, tol=pv.TOLERANCE) -> tuple[bool, str]:
    worst = max(abs(got[k] - v) for k, v in want.items())
    return worst <= tol, f"max |diff| {worst:.2e}"


# 1-3: metric formulas against published tables


def test_criterion_1_table2_metrics(criterion):
    cm = ConfusionMatrix(*pv.TEST_CM)
    MetricsRow.from_cm(cm)  # warm-up
    times = []
    for _ in range(50):
        t = time.perf_counter()
        row = MetricsRow.from_cm(cm)
        times.append(time.perf_counter() - t)
    ok, diff = _within(vars(row), pv.TEST_METRICS)
    runtime = float(np.median(times))
    ok = ok and runtime < 1e-3
    got = " / ".join(f"{k} {getattr(row, k):.4f}" for k in pv.TEST_METRICS)
    assert criterion(1, ok, f"{got}; {diff}; median runtime {runtime * 1e6:.0f} us")


def test_criterion_2_table1_rows(criterion):
    results = []
    for w, (cm_t, want) in pv.CV_ROWS.items():
        ok, diff = _within(vars(MetricsRow.from_cm(ConfusionMatrix(*cm_t))), want)
        results.append((ok, f"{w}: {diff}"))
    ok = all(r for r, _ in results)
    assert criterion(2, ok, "; ".join(d for _, d in results))


def test_criterion_3_pipeline_rates(criterion):
    details, ok = [], True
    for name, (cm_t, fn_want, fp_want) in (("pipeline", pv.PIPELINE), ("filter only", pv.FILTER_ONLY)):
        cm = ConfusionMatrix(*cm_t)
        fn, fp = float(fn_rate(cm)), float(fp_rate(cm))
        ok &= abs(fn - fn_want) <= pv.TOLERANCE and abs(fp - fp_want) <= pv.TOLERANCE
        details.append(f"{name} FN {100 * fn:.2f}% FP {100 * fp:.2f}%")
    pipe = ConfusionMatrix(*pv.PIPELINE[0])
    ok &= fp_rate(pipe) < 0.15 and fn_rate(pipe) < 0.03
    assert criterion(3, ok, "; ".join(details))


# 4-5: property suites


def test_criterion_4_gradient_checks(criterion):
    t = time.perf_counter()
    errors, kinds = [], Counter()
    for seed in range(120):
        arch, _ = gradcheck.random_architecture(np.random.default_rng(seed))
        kinds.update(layer["kind"] for layer in arch)
        errors.append(gradcheck.check_model(seed))
    elapsed = time.perf_counter() - t
    worst = max(errors)
    covered = {"conv", "relu", "maxpool", "dense", "dropout", "sigmoid"} <= set(kinds)
    ok = worst <= 1e-4 and elapsed <= 60 and covered
    assert criterion(4, ok, f"{len(errors)} networks, worst relative error {worst:.2e}, "
                            f"layer kinds {dict(sorted(kinds.items()))}, {elapsed:.1f} s")


def _imaging_suite(rng) -> dict:
    checks = Counter()
    for _ in range(300):
        img = rng.integers(0, 256, tuple(rng.integers(1, 33, 2)), dtype=np.uint8)
        masks = [binarize(img, k * DELTA) for k in range(25)]
        assert all(not (lo & ~hi).any() for lo, hi in zip(masks, masks[1:])), "nesting"
        checks["nesting"] += 1
    for _ in range(300):
        mask = rng.random(tuple(rng.integers(1, 25, 2))) < rng.uniform(0.1, 0.9)
        se = StructuringElement(str(rng.choice(["disk", "square"])), int(rng.integers(1, 4)))
        r = se.radius
        framed = np.pad(mask, r)
        inner = (slice(r, -r), slice(r, -r))
        assert (erode(framed, se) == ~dilate(~framed, se)).all(), "duality"
        assert (dilate(framed, se)[inner] == ~erode(~framed, se)[inner]).all(), "duality"
        checks["duality"] += 1
        op, cl = opening(mask, se), closing(mask, se)
        assert (opening(op, se) == op).all() and (closing(cl, se) == cl).all(), "idempotence"
        checks["idempotence"] += 1
    for _ in range(1000):
        blob = oracles.random_blob(rng, max_area=64)
        pixels = np.array(sorted(blob))
        s = shape_stats(pixels)
        major, minor = oracles.ellipse_axes(blob)
        assert s.area == len(blob)
        assert np.allclose(s.centroid, pixels.mean(axis=0), rtol=0, atol=1e-12)
        assert abs(s.major_axis_len - major) <= 1e-9 * major and abs(s.minor_axis_len - minor) <= 1e-9 * max(minor, 1)
        assert abs(s.solidity - len(blob) / oracles.hull_lattice_count(blob)) <= 1e-12
        mask = np.zeros((12, 12), bool)
        mask[tuple(pixels.T)] = True
        (b,) = connected_components(mask)
        assert {tuple(p) for p in b.pixel_list.tolist()} == blob
        checks["blobs"] += 1
    return checks


def test_criterion_5_imaging_properties(criterion):
    t = time.perf_counter()
    try:
        checks, err = _imaging_suite(np.random.default_rng(2024)), None
    except AssertionError as exc:
        checks, err = {}, exc
    elapsed = time.perf_counter() - t
    ok = err is None and checks["blobs"] >= 1000 and elapsed <= 60
    detail = f"{dict(checks)} in {elapsed:.1f} s" if err is None else f"failed: {err}"
    assert criterion(5, ok, detail)


# 6 and 9: synthetic end-to-end benchmark and latency


@pytest.fixture(scope="module")
def benchmark():
    spec = BenchmarkSpec.load()
    t = time.perf_counter()
    res = run_benchmark(spec, progress=print)
    return spec, res, time.perf_counter() - t


@pytest.mark.slow
def test_criterion_6_synthetic_benchmark(benchmark, criterion):
    spec, res, elapsed = benchmark
    ev = res.evaluation
    n_images, n_dirty = spec.test_clean + spec.test_contaminated, spec.test_contaminated
    full_size = (spec.test_scene.width, spec.test_scene.height) == (4080, 1664)
    ok = (n_images == 200 and n_dirty == 60 and full_size
          and ev.filter_fn_rate <= 0.02 and ev.fn_rate <= 0.03 and ev.fp_rate <= 0.15
          and ev.cm.fp <= ev.filter_cm.fp and elapsed <= 30 * 60)
    assert criterion(6, ok, (
        f"filter FN {100 * ev.filter_fn_rate:.2f}% FP {100 * ev.filter_fp_rate:.2f}% ({ev.filter_cm.fp}/{spec.test_clean}); "
        f"pipeline FN {100 * ev.fn_rate:.2f}% FP {100 * ev.fp_rate:.2f}% ({ev.cm.fp}/{spec.test_clean}); "
        f"{n_images} images, {n_dirty} contaminated; {elapsed / 60:.1f} min "
        f"({', '.join(f'{k} {v:.0f} s' for k, v in res.stage_seconds.items())})"))


@pytest.mark.slow
def test_criterion_9_latency(benchmark, criterion):
    spec, res, _ = benchmark
    scene = SceneSpec.from_dict(spec.test_scene.to_dict())
    scene.contaminants = [ContaminantSpec.default("needle_bit")]
    img, _, _ = generate_scene(scene, seed=derive_seed(spec.seed, 99))
    assert img.shape == (1664, 4080)
    runs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(3):
            rep = run_pipeline(img, res.profile, res.model)
            runs.append((rep.duration_s, rep.timings["detect_s"], rep.timings["classify_s"], len(rep.detections)))
    bench_max = max(res.evaluation.durations)
    ok = all(d <= 5.0 for d, *_ in runs)
    per_run = "; ".join(f"{d:.2f} s (detect {a:.2f}, classify {b:.2f}, {n} candidates)" for d, a, b, n in runs)
    assert criterion(9, ok, f"{per_run}; slowest of the {len(res.evaluation.durations)} benchmark images "
                            f"{bench_max:.2f} s")


# 7: class-weight trend


@pytest.mark.slow
def test_criterion_7_class_weight_trend(criterion):
    kinds = ["pebble", "needle_bit", "clip", "plastic"]
    scene = SceneSpec(width=816, height=332, artefact_clouds=2, buttons=2, drawstrings=1, seams=2, zips=0,
                      contaminants=[ContaminantSpec.default(k) for k in kinds])
    crops, labels, _ = generate_crop_dataset(60, 60, scene, seed=11)
    crops, labels = np.stack(crops), np.asarray(labels)
    rows = []
    for w in [(1, 1), (1, 2), (1, 5), (1, 10)]:
        hp = Hyperparams(architecture=light_architecture(), epochs=8, augment_copies=0, alpha=3e-3, batch_size=16,
                         class_weights=w, seed=1)
        rows.append((w, cross_validate(crops, labels, hp, k=5, seed=0)))
    rec = [r.recall for _, r in rows]
    prec = [r.precision for _, r in rows]
    ok = all(b >= a for a, b in zip(rec, rec[1:])) and all(b <= a for a, b in zip(prec, prec[1:]))
    assert criterion(7, ok, "; ".join(f"{w}: recall {r.recall:.3f} precision {r.precision:.3f} F2 {r.f2:.3f}"
                                      for w, r in rows))


# 8: determinism of the command line stages

DET_SCENE = SceneSpec(width=408, height=166, artefact_clouds=1, buttons=1, drawstrings=1, seams=1, zips=0,
                      contaminants=[ContaminantSpec.default("needle_bit"), ContaminantSpec.default("pebble")])
DET_GRID = {"structuring_elements": [{"shape": "disk", "radius": 1}], "interval_modes": ["global", "kind"],
            "d0_grid": [1.0, 10.0], "area_growth_grid": [5.0], "axis_growth_grid": [3.0], "interval_sigmas": [2.0]}
DET_HP = {"architecture": [{"kind": "conv", "filters": 2, "kernel": 5}, {"kind": "relu"},
                           {"kind": "maxpool", "window": 4}, {"kind": "dense", "units": 4}, {"kind": "relu"},
                           {"kind": "dropout", "rate": 0.3}, {"kind": "dense", "units": 1}, {"kind": "sigmoid"}],
          "epochs": 2, "batch_size": 8, "augment_copies": 1}
TIMING_KEYS = {"duration_s", "timings", "over_budget", "max_duration_s"}


def _cli(*argv):
    proc = subprocess.run([sys.executable, "-m", "contamdetect.cli", *map(str, argv)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def _same_tree(a: Path, b: Path, timed=False) -> list[str]:
    """Relative paths that differ between two output trees (empty when identical)."""
    names = sorted({p.relative_to(a) for p in a.rglob("*") if p.is_file()}
                   | {p.relative_to(b) for p in b.rglob("*") if p.is_file()})
    bad = []
    for rel in names:
        pa, pb = a / rel, b / rel
        if not (pa.exists() and pb.exists()):
            bad.append(str(rel))
        elif timed and rel.suffix == ".json":
            if _strip_timing(json.loads(pa.read_text())) != _strip_timing(json.loads(pb.read_text())):
                bad.append(str(rel))
        elif pa.read_bytes() != pb.read_bytes():
            bad.append(str(rel))
    return bad


def test_criterion_8_determinism(tmp_path, criterion):
    (tmp_path / "scene.json").write_text(json.dumps(DET_SCENE.to_dict()))
    (tmp_path / "grid.json").write_text(json.dumps(DET_GRID))
    (tmp_path / "hp.json").write_text(json.dumps(DET_HP))
    runs = {}
    for tag in ("a", "b"):
        d = tmp_path / tag
        _cli("--seed", 5, "synth", "--spec", tmp_path / "scene.json", "-n", 4, "--out", d / "synth")
        # later stages read run a's inputs so each stage is compared in isolation
        _cli("calibrate", tmp_path / "a" / "synth", "--grid", tmp_path / "grid.json",
             "--out", d / "calibrate" / "profile.json", "--report", d / "calibrate" / "report.json")
        _cli("--seed", 6, "synth", "--spec", tmp_path / "scene.json", "--crops", 10, 10,
             "--profile", tmp_path / "a" / "calibrate" / "profile.json", "--out", d / "crops")
        _cli("--seed", 7, "train", tmp_path / "a" / "crops" / "manifest.csv", "--hyperparams", tmp_path / "hp.json",
             "--out", d / "train" / "model.json", "--trace", d / "train" / "trace.csv")
        _cli("pipeline", tmp_path / "a" / "synth", "--profile", tmp_path / "a" / "calibrate" / "profile.json",
             "--model", tmp_path / "a" / "train" / "model.json", "--out", d / "pipeline", "--annotated")
        runs[tag] = d
    diffs = {}
    for stage in ("synth", "calibrate", "crops", "train"):
        diffs[stage] = _same_tree(runs["a"] / stage, runs["b"] / stage)
    diffs["pipeline"] = _same_tree(runs["a"] / "pipeline", runs["b"] / "pipeline", timed=True)
    n_files = sum(1 for p in runs["a"].rglob("*") if p.is_file())
    ok = not any(diffs.values())
    detail = f"{n_files} artifacts per run identical" if ok else f"differing: {diffs}"
    assert criterion(8, ok, f"synth, calibrate, crops, train, pipeline: {detail} (timing fields excluded)")
