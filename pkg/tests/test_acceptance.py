"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are gathered by ``conftest.py`` and printed in the terminal summary,
so a plain ``pytest -v tests/test_acceptance.py`` shows them.
"""

import json
import math
import random
import time
from fractions import Fraction

import cv2
import numpy as np
import pytest
import torch

from firesmoke.atdh import HeadConfig, TransparencyAttention, attention_scores, head_forward, init_head_params
from firesmoke.boxmetrics import (
    BBox, BIWeights, LabeledBox, ap_11point, area_diff_norm, burning_intensity, iou, write_records,
)
from firesmoke.cli import main
from firesmoke.dataingest import SynthSpec, synth_dataset
from firesmoke.detector import DetectorConfig, assign_targets, nms, postprocess
from firesmoke.estimator import FireSmokeDetector
from firesmoke.evalharness import cam, heatmap_mass_inside

from oracles import ap_11point_bruteforce, central_difference, nms_exhaustive, relative_error
from test_detector import perfect_outputs, random_scene


@pytest.fixture(scope="module")
def overfit():
    data = synth_dataset(SynthSpec(count=10, seed=0))
    images, labels = [d[0] for d in data], [d[1] for d in data]
    start = time.perf_counter()
    est = FireSmokeDetector(steps=500, seed=0).fit(images, labels)
    return est, data, time.perf_counter() - start


def test_bi_invariants_over_fuzzed_pairs(acceptance):
    rng = random.Random(20)
    tol = 1e-9
    failures = []
    start = time.perf_counter()
    n = 12_000
    for i in range(n):
        a = BBox(rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(0.01, 300), rng.uniform(0.01, 300))
        kind = i % 4
        if kind == 0:
            b = a
        elif kind == 1:  # overlapping neighbour
            b = BBox(a.cx + rng.uniform(-a.w, a.w), a.cy + rng.uniform(-a.h, a.h),
                     a.w * rng.uniform(0.3, 3), a.h * rng.uniform(0.3, 3))
        else:
            b = BBox(rng.uniform(-500, 500), rng.uniform(-500, 500), rng.uniform(0.01, 300), rng.uniform(0.01, 300))
        w1 = rng.choice([0.0, 0.5, 1.0, rng.random()])
        w = BIWeights(w1, 1 - w1)
        bi = burning_intensity(a, b, w)
        s = rng.choice([1e-3, 0.5, 7.0, rng.uniform(0.01, 100)])
        checks = {
            "symmetry": abs(bi - burning_intensity(b, a, w)) <= tol,
            "scale": abs(bi - burning_intensity(a.scaled(s), b.scaled(s), w)) <= tol,
            "range": -tol <= bi <= 1 + tol and -tol <= iou(a, b) <= 1 + tol and -tol <= area_diff_norm(a, b) <= 1 + tol,
            "identity": abs(burning_intensity(a, a, w) - 1) <= tol,
        }
        # BI reaches 1 exactly when the IoU term does (w2 > 0), i.e. the boxes coincide
        if w.w2 > 0:
            same = max(abs(x - y) for x, y in zip(a.corners(), b.corners())) <= tol * max(a.w, a.h)
            checks["characterisation"] = (abs(bi - 1) <= tol) == same
        failures.extend(f"{name} #{i}" for name, ok in checks.items() if not ok)
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 10
    acceptance(1, ok, f"{n} pairs, {len(failures)} violations, {elapsed:.2f} s (limit 10 s)")
    assert ok, failures[:10]


def test_spot_values(acceptance):
    adn = area_diff_norm(BBox(0, 0, 2, 1), BBox(0, 0, 2, 2))  # areas 2 and 4
    third = (BBox.from_corners(0, 0, 2, 1), BBox.from_corners(1, 0, 3, 1))  # equal areas, IoU 1/3
    bi = burning_intensity(*third, BIWeights(0.5, 0.5))
    ok = abs(adn - 0.5) <= 1e-12 and abs(iou(*third) - 1 / 3) <= 1e-12 and abs(bi - 2 / 3) <= 1e-12
    acceptance(2, ok, f"area_diff_norm={adn!r}, BI={bi!r}")
    assert ok


def test_ap_matches_bruteforce(acceptance):
    rng = random.Random(33)
    worst, n = 0.0, 0
    while n < 1000:
        n_gt = rng.randint(0, 6)
        k = rng.randint(0, 12)
        tp_budget = rng.randint(0, min(n_gt, k))
        tp_slots = set(rng.sample(range(k), tp_budget))
        flags = [(rng.choice([0.2, 0.5, 0.8, rng.random()]), j in tp_slots) for j in range(k)]
        err = abs(ap_11point(flags, n_gt) - float(ap_11point_bruteforce(flags, n_gt)))
        worst = max(worst, err)
        n += 1
    fixture = ap_11point([(0.9, True), (0.8, False), (0.7, True)], 2)
    ok = worst <= 1e-12 and abs(fixture - 28 / 33) <= 1e-12
    acceptance(3, ok, f"{n} instances, max |diff| {worst:.1e}; [TP, FP, TP]/2 gts = {fixture!r}")
    assert ok


def test_atdh_correctness(acceptance):
    start = time.perf_counter()
    g = torch.Generator().manual_seed(4)

    worst_sum = 0.0
    for magnitude in (1.0, 1e2, 1e3, 1e4):
        for dtype in (torch.float32, torch.float64):
            for _ in range(50):
                c, h, w = (int(v) for v in torch.randint(1, 65, (1,), generator=g).tolist() +
                           torch.randint(1, 9, (2,), generator=g).tolist())
                x = torch.randn(c, h, w, generator=g, dtype=torch.float64).to(dtype) * magnitude
                s = attention_scores(x)
                assert torch.isfinite(s).all() and (s >= 0).all()
                worst_sum = max(worst_sum, abs(float(s.double().sum()) - 1))

    worst_bypass = 0.0
    on_block, off_block = TransparencyAttention(True), TransparencyAttention(False)
    for seed in range(50):
        c = 1 + seed % 16
        plane = torch.randn(1, 5, 7, generator=g, dtype=torch.float64) * 10 ** (seed % 5)
        x = plane.expand(c, 5, 7).clone()
        worst_bypass = max(worst_bypass, float((on_block(x) - off_block(x)).abs().max()))
        on, off = HeadConfig(channels=6), HeadConfig(channels=6, attention_enabled=False)
        params = init_head_params(on, seed, torch.float64)
        for k, v in params.items():
            if k.startswith("tower."):  # channel-uniform tower keeps uniform input uniform
                params[k] = v[:1].expand_as(v).clone()
        x = plane.expand(6, 5, 7).clone()
        for ta, tb in zip(head_forward(x, on, params), head_forward(x, off, params)):
            worst_bypass = max(worst_bypass, float((ta - tb).abs().max()))

    worst_grad = 0.0
    block = TransparencyAttention()
    for _ in range(100):
        c = int(torch.randint(2, 9, (1,), generator=g))
        h, w = (int(v) for v in torch.randint(1, 6, (2,), generator=g))
        x = torch.randn(c, h, w, generator=g, dtype=torch.float64, requires_grad=True)
        probe = torch.randn(c, h, w, generator=g, dtype=torch.float64)
        (block(x) * probe).sum().backward()
        numeric = central_difference(lambda: (block(x.detach()) * probe).sum(), x, eps=1e-5)
        worst_grad = max(worst_grad, relative_error(x.grad.numpy(), numeric))

    elapsed = time.perf_counter() - start
    ok = worst_sum <= 1e-6 and worst_bypass <= 1e-9 and worst_grad < 1e-4 and elapsed < 60
    acceptance(4, ok, f"score sum err {worst_sum:.1e}, bypass err {worst_bypass:.1e}, "
                      f"grad rel err {worst_grad:.1e} over 100 shapes, {elapsed:.1f} s (limit 60 s)")
    assert ok


def test_round_trip_and_nms(acceptance):
    rng = np.random.default_rng(55)
    config = DetectorConfig(input_size=(128, 128), backbone_widths=(8, 8, 8, 8), head=HeadConfig(channels=8))
    worst, misses = 0.0, 0
    for _ in range(200):
        gts = random_scene(rng)
        dets = postprocess(perfect_outputs(assign_targets(gts, config), config), config)
        if len(dets) != len(gts):
            misses += 1
        for gt in gts:
            best = max(dets, key=lambda d: iou(d.box, gt.box), default=None)
            if best is None or best.category != gt.category:
                misses += 1
                continue
            worst = max(worst, max(abs(p - q) for p, q in zip(best.box.corners(), gt.box.corners())))

    nms_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        corners = []
        for _ in range(n):
            x1, y1 = rng.integers(0, 20, size=2)
            w, h = rng.integers(1, 12, size=2)
            corners.append((float(x1), float(y1), float(x1 + w), float(y1 + h)))
        scores = rng.choice([0.2, 0.4, 0.6, 0.8], size=n).tolist()
        labels = rng.integers(0, 2, size=n).tolist()
        thr = float(rng.choice([0.0, 0.3, 0.5, 0.7]))
        dets = [LabeledBox(BBox.from_corners(*c), ("fire", "smoke")[l], s) for c, s, l in zip(corners, scores, labels)]
        kept = [next(i for i, d in enumerate(dets) if d is k) for k in nms(dets, thr)]
        expected = nms_exhaustive([d.box for d in dets], scores, labels, iou, thr)
        nms_bad += kept != expected

    ok = misses == 0 and worst <= 0.5 and nms_bad == 0
    acceptance(5, ok, f"200 scenes: max corner err {worst:.3f} px, {misses} misses; NMS 1000 cases, {nms_bad} mismatches")
    assert ok


@pytest.mark.slow
def test_overfit(acceptance, overfit):
    est, data, elapsed = overfit
    images, labels = [d[0] for d in data], [d[1] for d in data]
    m_ap = est.score(images, labels)
    ok = m_ap >= 0.9 and elapsed < 600 and len(est.loss_trace_) <= 500
    acceptance(6, ok, f"mAP {m_ap:.3f} on 10 training images after {len(est.loss_trace_)} steps, "
                      f"{elapsed:.0f} s (limit 600 s)")
    assert ok


@pytest.mark.slow
def test_transparency_ablation(acceptance, tmp_path):
    start = time.perf_counter()
    code = main(["ablate", "--out", str(tmp_path), "--name", "lowalpha", "--alpha-min", "0.2", "--alpha-max", "0.4",
                 "--train-count", "200", "--test-count", "50", "--seeds", "0,1,2", "--steps", "2000"])
    elapsed = time.perf_counter() - start
    assert code == 0
    (run,) = [p for p in tmp_path.iterdir() if p.is_dir()]
    rows = [json.loads(line) for line in (run / "ablation.jsonl").read_text().splitlines()]
    by_variant = {}
    for r in rows:
        by_variant.setdefault(r["variant"], []).append(r)
    failed = [r for r in rows if r["failed"]]
    means = {v: math.fsum(r["map"] for r in rs) / len(rs) for v, rs in by_variant.items() if not any(r["failed"] for r in rs)}
    on, off = means.get("+ATDH"), means.get("baseline")
    gated = on is not None and off is not None
    delta = 100 * (on - off) if gated else float("nan")
    direction = "improves" if delta > 0 else "does not improve"
    ok = gated and not failed and delta >= -2.0 and elapsed < 3600 and len(rows) == 6
    acceptance(7, ok, f"mean mAP on {100 * on:.2f} vs off {100 * off:.2f} ({delta:+.2f} points, gate >= -2.0; "
                      f"attention {direction}), {elapsed / 60:.1f} min (limit 60 min)" if gated else "runs failed",
               extra=(run / "ablation.txt").read_text())
    assert ok


def test_bi_command_matches_oracle(acceptance, tmp_path):
    def pair(gt, det):
        return LabeledBox(BBox.from_corners(*gt), "fire", None, "x"), LabeledBox(BBox.from_corners(*det), "fire", 0.9, "x")

    # three matched pairs: (area term, IoU) = (1, 1), (4/5, 4/5), (9/10, 36/59)
    g1, d1 = pair((0, 0, 4, 4), (0, 0, 4, 4))
    g2, d2 = pair((20, 20, 24, 24), (20, 20, 24, 25))
    g3, d3 = pair((40, 40, 50, 50), (42, 40, 52, 49))
    smoke_fp = LabeledBox(BBox.from_corners(60, 0, 70, 5), "smoke", 0.4, "x")
    missed = LabeledBox(BBox.from_corners(0, 60, 6, 66), "smoke", None, "y")
    write_records({"x": [d1, d2, d3, smoke_fp]}, tmp_path / "dets.txt")
    write_records({"x": [g1, g2, g3], "y": [missed]}, tmp_path / "gts.txt")
    area_terms = [Fraction(1), Fraction(4, 5), Fraction(9, 10)]
    ious = [Fraction(1), Fraction(4, 5), Fraction(36, 59)]

    details, ok = [], True
    for w1, w2 in ((0.5, 0.5), (1, 0), (0, 1)):
        expected = float(sum(Fraction(w1) * a + Fraction(w2) * i for a, i in zip(area_terms, ious)) / 3)
        out = tmp_path / f"o{w1}{w2}"
        code = main(["bi", "--detections", str(tmp_path / "dets.txt"), "--ground-truth", str(tmp_path / "gts.txt"),
                     "--w1", str(w1), "--w2", str(w2), "--out", str(out)])
        got = json.loads((out / "bi.jsonl").read_text())["avg_bi"] if code == 0 else None
        good = got is not None and abs(got - expected) <= 1e-6
        ok &= good
        details.append(f"({w1}, {w2}): {got} vs {expected:.9f}")
    acceptance(8, ok, "; ".join(details))
    assert ok


def _files(directory):
    return {str(p.relative_to(directory)): p.read_bytes() for p in sorted(directory.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_determinism(acceptance, tmp_path):
    videos = tmp_path / "videos"
    videos.mkdir()
    for name, frames in (("a", 5), ("b", 8)):
        writer = cv2.VideoWriter(str(videos / f"{name}.avi"), cv2.VideoWriter_fourcc(*"MJPG"), 10, (48, 32))
        frame_rng = np.random.default_rng(frames)
        for _ in range(frames):
            writer.write(frame_rng.integers(0, 255, (32, 48, 3), dtype=np.uint8))
        writer.release()
    small = ["--input-size", "64x64", "--backbone-widths", "8,8,8,8", "--head-channels", "8"]
    for run in ("first", "second"):
        out = tmp_path / run
        assert main(["ingest", str(videos), "--budget", "9", "--seed", "5", "--out", str(out / "ingest")]) == 0
        assert main(["synth", "--count", "6", "--image-size", "64x96", "--seed", "5", "--out", str(out / "synth")]) == 0
        assert main(["train", "--manifest", str(out / "synth" / "synth.manifest"), "--seed", "5", "--steps", "10",
                     "--batch-size", "3", *small, "--out", str(out / "train")]) == 0
        assert main(["eval", "--checkpoint", str(out / "train" / "checkpoint.safetensors"), "--seed", "5",
                     "--manifest", str(out / "synth" / "synth.manifest"), "--out", str(out / "eval")]) == 0
    a, b = _files(tmp_path / "first"), _files(tmp_path / "second")
    kinds = {
        "manifests": [k for k in a if k.endswith(".manifest")],
        "images": [k for k in a if k.endswith((".png", ".jpg"))],
        "loss traces": [k for k in a if k.endswith("loss.csv")],
        "reports": [k for k in a if k.endswith(("report.txt", "report.jsonl", "detections.txt"))],
    }
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differing and all(kinds.values())
    acceptance(9, ok, ", ".join(f"{len(v)} {k}" for k, v in kinds.items()) + f", {len(differing)} differing files")
    assert ok, differing


@pytest.mark.slow
def test_cam_contract(acceptance, overfit):
    est, data, _ = overfit
    inside_total, mass_total, in_range = 0.0, 0.0, True
    per_map = []
    for image, boxes in data:
        for category in ("fire", "smoke"):
            gt = [b for b in boxes if b.category == category]
            if not gt:
                continue
            heatmap = cam(est.model_, image, category, level=0)
            in_range &= bool(heatmap.min() >= 0 and heatmap.max() <= 1 and (heatmap.max() == 1 or not heatmap.any()))
            share = heatmap_mass_inside(heatmap, gt)
            per_map.append(share)
            inside_total += share * float(heatmap.sum())
            mass_total += float(heatmap.sum())
    pooled = inside_total / mass_total if mass_total else 0.0
    ok = in_range and pooled >= 0.5
    acceptance(10, ok, f"maps in [0, 1]: {in_range}; pooled mass inside GT {pooled:.3f} (gate 0.5) over "
                       f"{len(per_map)} maps, per-map mean {np.mean(per_map):.3f}, min {min(per_map):.3f}")
    assert ok
