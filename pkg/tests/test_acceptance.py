"""End-to-end acceptance checks, one test per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary (see conftest).
"""

import itertools
import math
import subprocess
import sys
import time
from collections import Counter

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import PIPELINE_CONFIG, run_pipeline
from xlsor import augment, cca, gradcheck, metrics, segnet
from xlsor.augment import STYLES, AbnormalityStyle, generate_phantom, phantom_seed
from xlsor.cca import CCAWeights
from xlsor.data import MaskPair, split_assignment
from xlsor.tensor import Node

SEEDS = (0, 1, 2)
SIZE = 64
N_PHANTOMS = 40
CORRUPTION = 0.7
AUG_LEVELS, AUG_NORMALS, AUG_PER_NORMAL = 4, 20, 5


# ----------------------------------------------------------------- helpers


def dice_of(pred, gt):
    return metrics.dice(metrics.confusion(pred, gt))


def segmentation_dice(model, pairs):
    pred = segnet.binarize(model.predict(np.stack([p.image for p in pairs]))[:, 0])
    return float(np.mean([dice_of(p, q.mask) for p, q in zip(pred, pairs)]))


def run_seed(seed):
    """Train R and R+A^4 models for one seed; returns the scores and the propagated masks."""
    t0 = time.perf_counter()
    phantoms = [generate_phantom(SIZE, SIZE, phantom_seed(seed, 0, i)) for i in range(N_PHANTOMS)]
    splits = split_assignment(N_PHANTOMS, seed)
    by_split = {s: [p for p, t in zip(phantoms, splits) if t == s] for s in ("train", "val", "test")}
    real = [MaskPair(p.image, p.true_mask) for p in by_split["train"]]
    val = [MaskPair(p.image, p.true_mask) for p in by_split["val"]]
    rng = np.random.default_rng([seed, 7])
    corrupted = [
        MaskPair(synth, p.true_mask, {"style": style})
        for p in by_split["test"]
        for style in STYLES
        for synth in [augment.synthesize_abnormal(p, AbnormalityStyle(style, CORRUPTION, int(rng.integers(2**63))))]
    ]

    seg_cfg = segnet.SegmentorConfig(input_size=(SIZE, SIZE), seed=seed)
    train_cfg = segnet.TrainConfig(seed=seed)
    model_r, _ = segnet.train(real, val, seg_cfg, train_cfg)

    # auxiliary normals come from a different seed stream than the real phantoms
    aux_seed = seed + 1000
    nested = augment.build_nested_sets(AUG_LEVELS, AUG_NORMALS, AUG_PER_NORMAL, model_r, aux_seed, (SIZE, SIZE))
    a4 = nested[-1]
    model_ra, _ = segnet.train(real + augment.to_mask_pairs(a4), val, seg_cfg, train_cfg)

    normals = [p for p in a4 if p.style_name == augment.NORMAL]
    truths = [
        generate_phantom(SIZE, SIZE, phantom_seed(aux_seed, b, i)).true_mask
        for b in range(AUG_LEVELS)
        for i in range(AUG_NORMALS)
    ]
    pseudo_dice = [dice_of(p.pseudo_mask, t) for p, t in zip(normals, truths)]
    return {
        "dice_r": segmentation_dice(model_r, corrupted),
        "dice_ra": segmentation_dice(model_ra, corrupted),
        "pseudo_dice": float(np.mean(pseudo_dice)),
        "model_r": model_r,
        "nested": nested,
        "seconds": time.perf_counter() - t0,
    }


@pytest.fixture(scope="module")
def experiments():
    t0 = time.perf_counter()
    runs = {seed: run_seed(seed) for seed in SEEDS}
    return runs, time.perf_counter() - t0


# --------------------------------------------------------------- criteria


@pytest.mark.criterion(1, "gradient suite and gradcheck CLI")
def test_gradient_suite(request):
    results = gradcheck.run_suite(cases=20)
    per_name = Counter(r.name for r in results)
    assert set(per_name) == set(gradcheck.OP_NAMES) | {"segmentor"}
    assert min(per_name.values()) >= 20
    worst_op = max(r.error for r in results if r.name != "segmentor")
    worst_model = max(r.error for r in results if r.name == "segmentor")

    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "xlsor.cli", "gradcheck"], capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    request.node.acceptance_detail = (
        f"ops {worst_op:.1e} < 1e-6, model {worst_model:.1e} < 1e-5, CLI exit {proc.returncode} in {elapsed:.1f}s"
    )
    assert worst_op < 1e-6
    assert worst_model < 1e-5
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert elapsed < 120


@pytest.mark.criterion(2, "receptive field on 5x7, every source pixel")
def test_receptive_field(request):
    t0 = time.perf_counter()
    H, W, C = 5, 7, 8
    rng = np.random.default_rng(0)
    cr = cca.reduced_channels(C)
    # moderate projections keep every attention weight above the probe threshold
    weights = CCAWeights(*(Node(rng.normal(scale=0.3, size=s)) for s in [(cr, C, 1, 1), (cr, C, 1, 1), (C, C, 1, 1)]))
    h = rng.normal(size=(1, C, H, W))
    one = lambda a: cca.rcca_forward(Node(a), weights, 1).value
    two = lambda a: cca.rcca_forward(Node(a), weights, 2).value
    for x, y in itertools.product(range(W), range(H)):
        expected = np.zeros((H, W), dtype=bool)
        expected[y, :] = True
        expected[:, x] = True
        np.testing.assert_array_equal(cca.influence_map(one, h, (x, y)), expected)
        assert cca.influence_map(two, h, (x, y)).sum() == H * W
    elapsed = time.perf_counter() - t0
    request.node.acceptance_detail = f"35 sources in {elapsed:.1f}s"
    assert elapsed < 60


@pytest.mark.criterion(3, "criss-cross vs non-local equivalence, cost and speed")
def test_attention_oracle(request):
    rng = np.random.default_rng(1)
    worst = 0.0
    for n in range(1, 9):
        for shape in ((1, n), (n, 1)):
            weights = CCAWeights.init(8, rng)
            h = Node(rng.normal(size=(2, 8) + shape))
            diff = np.abs(cca.cca_forward(h, weights)[0].value - cca.nonlocal_forward(h, weights)[0].value).max()
            worst = max(worst, diff)
    ratio = cca.attention_cost(64, 64, 16, 2, "nonlocal") / cca.attention_cost(64, 64, 16, 2, "crisscross")
    with threadpool_limits(limits=1):
        row = cca.benchmark([64], channels=16, repeats=3)[0]
    request.node.acceptance_detail = (
        f"max diff {worst:.1e}, cost ratio {ratio:.4f}, time ratio {row['time_ratio']:.1f}x"
    )
    assert worst <= 1e-10
    assert ratio == 4096 / 127
    assert row["op_ratio"] == 4096 / 127
    assert row["time_ratio"] >= 4.0


def _brute_metrics(pa, pb):
    """Set-based reference for one pair of point sets on a 4x4 grid."""
    inter = len(pa & pb)
    fp, fn = len(pa) - inter, len(pb) - inter
    both_empty = not pa and not pb
    den = 2 * inter + fp + fn
    out = {
        "rec": inter / len(pb) if pb else (1.0 if not pa else 0.0),
        "pre": inter / len(pa) if pa else (1.0 if not pb else 0.0),
        "dice": 2 * inter / den if den else 1.0,
        "vs": 1.0 - abs(fp - fn) / den if den else 1.0,
    }
    if pa and pb:
        def directed(src, dst):
            return math.fsum(min(math.hypot(p[0] - q[0], p[1] - q[1]) for q in dst) for p in src) / len(src)
        out["avd"] = max(directed(pa, pb), directed(pb, pa))
    else:
        out["avd"] = None
    assert den or both_empty
    return out


@pytest.mark.criterion(4, "metrics match brute force on all 4x4 pairs")
def test_metric_oracle(request):
    cells = [(i, j) for i in range(4) for j in range(4)]
    point_sets = [frozenset(c) for k in range(4) for c in itertools.combinations(cells, k)]
    masks = []
    for s in point_sets:
        m = np.zeros((4, 4), np.uint8)
        for p in s:
            m[p] = 1
        masks.append(m)
    mismatches = 0
    for (pa, ma), (pb, mb) in itertools.product(zip(point_sets, masks), repeat=2):
        got = metrics.image_metrics(ma, mb)
        if got != _brute_metrics(pa, pb):
            mismatches += 1
    a = np.array([[1, 1, 0]], np.uint8)
    b = np.array([[0, 0, 1]], np.uint8)
    worked = metrics.averaged_hausdorff(a, b)
    request.node.acceptance_detail = f"{len(masks) ** 2} pairs, {mismatches} mismatches, worked AVD {worked}"
    assert mismatches == 0
    assert worked == 1.5


@pytest.mark.criterion(5, "poly learning-rate schedule")
def test_poly_schedule(request):
    max_iter = 2000
    mid = segnet.poly_lr(0.02, max_iter // 2, max_iter)
    sampled = [segnet.poly_lr(0.02, i, 1000) for i in range(1001)]
    request.node.acceptance_detail = f"lr(max/2) = {mid:.7f}"
    assert segnet.poly_lr(0.02, 0, max_iter) == 0.02
    assert segnet.poly_lr(0.02, max_iter, max_iter) == 0.0
    assert abs(mid - 0.010718) <= 1e-6
    assert all(a > b for a, b in zip(sampled, sampled[1:]))


@pytest.mark.slow
@pytest.mark.criterion(6, "R+A4 beats R on corrupted phantoms by >= 0.03 DICE")
def test_augmentation_gain(request, experiments):
    runs, elapsed = experiments
    gains = [runs[s]["dice_ra"] - runs[s]["dice_r"] for s in SEEDS]
    mean_r = float(np.mean([runs[s]["dice_r"] for s in SEEDS]))
    mean_ra = float(np.mean([runs[s]["dice_ra"] for s in SEEDS]))
    request.node.acceptance_detail = (
        f"DICE R {mean_r:.3f}, R+A4 {mean_ra:.3f}, gain {mean_ra - mean_r:.3f} "
        f"(per seed {', '.join(f'{g:.3f}' for g in gains)}), {elapsed:.0f}s"
    )
    assert mean_ra - mean_r >= 0.03
    assert elapsed < 30 * 60


@pytest.mark.slow
@pytest.mark.criterion(7, "propagated pseudo masks on held-out normals reach DICE >= 0.95")
def test_pseudo_mask_quality(request, experiments):
    runs, _ = experiments
    scores = [runs[s]["pseudo_dice"] for s in SEEDS]
    request.node.acceptance_detail = "per seed " + ", ".join(f"{d:.3f}" for d in scores)
    assert min(scores) >= 0.95


@pytest.mark.slow
@pytest.mark.criterion(8, "augmented-set size and nesting")
def test_augmented_structure(request, experiments):
    runs, _ = experiments
    model = runs[SEEDS[0]]["model_r"]
    a1 = augment.build_augmented_set(100, 5, model, seed=11, size=(SIZE, SIZE))
    styles = Counter(p.style_name for p in a1)
    assert len(a1) == 600
    assert styles[augment.NORMAL] == 100
    assert sum(styles[s] for s in STYLES) == 500

    def key(p):
        return (p.image.tobytes(), p.pseudo_mask.tobytes(), p.source_id, p.style_name)

    nested = runs[SEEDS[0]]["nested"]
    for small, big in zip(nested, nested[1:]):
        cs, cb = Counter(map(key, small)), Counter(map(key, big))
        assert all(cb[k] >= v for k, v in cs.items())
    request.node.acceptance_detail = f"{len(a1)} pairs; A1..A4 sizes {[len(s) for s in nested]}"


@pytest.mark.filterwarnings("ignore:AVD undefined")
@pytest.mark.criterion(9, "CLI pipelines are byte-identical across repeats")
def test_cli_determinism(request, tmp_path):
    roots = [tmp_path / "a", tmp_path / "b"]
    codes = [run_pipeline(r, PIPELINE_CONFIG) for r in roots]
    assert codes == [[0] * 6] * 2

    def snapshot(root):
        return {
            str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "bench.json"
        }

    a, b = (snapshot(r) for r in roots)
    differing = sorted(k for k in a if a.get(k) != b.get(k))
    request.node.acceptance_detail = f"{len(a)} files compared, {len(differing)} differ"
    assert sorted(a) == sorted(b)
    assert differing == []
