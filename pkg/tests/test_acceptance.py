"""Acceptance criteria 1-8, each checked at its stated tolerance and time budget.

Every criterion prints one ``[acceptance N] PASS|FAIL`` line; the lines are
also collected in the terminal summary. Criterion 9 (real backbones and
datasets) is a manual runbook, see README.
"""
import json
import math
import time

import numpy as np
import pytest

from promptseg.cli import run
from promptseg.encoders import EmbeddingModel, OraclePairedEncoder, mock_hash_encoder
from promptseg.evaluation import ColorKeyOracle, ExemplarPool, composite_stream, evaluate, judge
from promptseg.filters import filter_pipeline, split_intersections
from promptseg.masks import ColorRegionProposer, rle_encode
from promptseg.selector import Pipeline, RandomChooser, render_segment
from promptseg.trainer import (FeatureSet, PlateauScheduler, TrainerConfig, clip_loss, clip_loss_grad,
                               default_grid, evaluate_loss, grid_search, init_heads, train_on_features)

pytestmark = pytest.mark.acceptance


def _brute_ce(logits, targets):
    b = len(logits)
    total = 0.0
    for i in range(b):
        zr = sum(math.exp(logits[i][k]) for k in range(b))
        zc = sum(math.exp(logits[k][i]) for k in range(b))
        for j in range(b):
            total -= targets[i][j] * math.log(math.exp(logits[i][j]) / zr)
            total -= targets[j][i] * math.log(math.exp(logits[j][i]) / zc)
    return total / (2 * b)


def test_criterion_1_loss_math(acceptance_line):
    t0 = time.perf_counter()
    errs = [abs(clip_loss(np.zeros((b, b)), np.eye(b)) - math.log(b)) for b in (2, 8, 64)]
    rng = np.random.default_rng(0)
    brute = []
    for _ in range(20):
        logits = rng.normal(size=(4, 4)) * 3
        targets = rng.dirichlet(np.ones(4), size=4)
        brute.append(abs(clip_loss(logits, targets) - _brute_ce(logits, targets)))
    logits = rng.normal(size=(6, 6))
    targets = rng.dirichlet(np.ones(6), size=6)
    _, grad = clip_loss_grad(logits, targets)
    numeric = np.zeros_like(logits)
    eps = 1e-6
    for idx in np.ndindex(*logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += eps
        down[idx] -= eps
        numeric[idx] = (clip_loss(up, targets) - clip_loss(down, targets)) / (2 * eps)
    rel = np.linalg.norm(grad - numeric) / np.linalg.norm(numeric)
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-6 and max(brute) < 1e-6 and rel < 1e-4 and elapsed < 5
    acceptance_line(1, ok, f"ln B err {max(errs):.1e}, brute err {max(brute):.1e}, grad rel {rel:.1e}, "
                           f"{elapsed:.2f}s")
    assert ok


# Published grid-search outcomes: (learning rate, projection dim, validation loss).
PUBLISHED_GRID = [
    (0.00001, 128, 0.9507), (0.00001, 512, 0.9627),
    (0.0001, 128, 0.7791), (0.0001, 512, 0.7935),
    (0.001, 128, 2.077), (0.001, 512, 2.075),
    (0.01, 128, 2.074), (0.01, 512, 2.074),
    (0.1, 128, 2.074), (0.1, 512, 2.074),
    (0.5, 128, 2.074), (0.5, 512, 2.074),
]


def test_criterion_2_grid_decision(acceptance_line):
    lookup = {(lr, d): v for lr, d, v in PUBLISHED_GRID}
    t0 = time.perf_counter()
    result = grid_search(default_grid(), runner=lambda cfg, tr, va: lookup[(cfg.learning_rate, cfg.projection_dim)])
    elapsed = time.perf_counter() - t0
    win = result.cells[result.winner]
    got = (win.config.learning_rate, win.config.projection_dim, win.best_validation_loss)
    ok = got == (0.0001, 128, 0.7791) and len(result.cells) == 12 and elapsed < 1
    acceptance_line(2, ok, f"winner {got}, {elapsed * 1000:.1f}ms")
    assert ok


def test_criterion_3_scheduler(acceptance_line):
    sched = PlateauScheduler(1e-4, factor=0.9, patience=5)
    lrs = [sched.step(0.5) for _ in range(11)]
    ok = lrs[-1] == 1e-4 * 0.9 * 0.9
    acceptance_line(3, ok, f"lr after 11 epochs {lrs[-1]!r}")
    assert ok


def test_criterion_4_filter_invariants(acceptance_line):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    violations = 0
    for trial in range(120):
        n = int(rng.integers(1, 31))
        masks = []
        for i in range(n):
            kind = rng.integers(3)
            r = np.zeros((64, 64), bool)
            if kind == 0:
                w, h = rng.integers(2, 40, size=2)
                x, y = rng.integers(0, 64 - w), rng.integers(0, 64 - h)
                r[y:y + h, x:x + w] = True
            elif kind == 1:
                r = rng.random((64, 64)) < rng.uniform(0.05, 0.5)
            elif masks:
                r = masks[rng.integers(len(masks))].decode().copy()
                r[rng.integers(64), :] ^= True
            if not r.any():
                r[0, 0] = True
            masks.append(rle_encode(r, quality=float(rng.random()), id=i))
        split = split_intersections(masks)
        stack = np.stack([m.decode() for m in split]).astype(int) if split else np.zeros((0, 64, 64), int)
        union_in = np.zeros((64, 64), bool)
        for m in masks:
            union_in |= m.decode()
        union_out = stack.sum(0) > 0 if len(stack) else np.zeros((64, 64), bool)
        for yx in np.ndindex(64, 64):
            if union_in[yx] != union_out[yx]:
                violations += 1
        if len(stack) and stack.sum(0).max() > 1:
            violations += 1
        once = filter_pipeline(masks)
        twice = filter_pipeline(once)
        if [(m.id, m.counts) for m in once] != [(m.id, m.counts) for m in twice]:
            violations += 1
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 30
    acceptance_line(4, ok, f"120 mask sets, {violations} violations, {elapsed:.2f}s")
    assert ok


@pytest.fixture(scope="module")
def pool():
    return ExemplarPool.synthetic(seed=0)


def test_criterion_5_oracle_end_to_end(pool, acceptance_line):
    t0 = time.perf_counter()
    enc = OraclePairedEncoder(pool.class_names, dim=16)
    model = EmbeddingModel(enc.image_backend(pool.palette), enc.text_backend())
    pipe = Pipeline(ColorRegionProposer(duplicates=True, dilated=True), model, name="oracle")
    oracle = ColorKeyOracle(pool.palette)
    correct = agree = 0
    stream = composite_stream(pool, 200, seed=5)
    for sample, prompt in stream:
        result, masks = pipe.run(sample.image, prompt)
        correct += judge(result, sample, oracle)
        text = model.embed_texts([prompt]).vectors[0]
        cos = {}
        for m in masks:
            v = model.embed_images([render_segment(sample.image, m).pixels]).vectors[0]
            cos[m.id] = float(v @ text)
        area = {m.id: m.area for m in masks}
        agree += max(cos, key=lambda k: (cos[k], area[k], -k)) == result.chosen_mask_id
    elapsed = time.perf_counter() - t0
    acc = correct / len(stream)
    ok = acc == 1.0 and agree == len(stream) and elapsed < 60
    acceptance_line(5, ok, f"accuracy {acc:.3f}, brute-force agreement {agree}/{len(stream)}, {elapsed:.1f}s")
    assert ok


def test_criterion_6_chance_floor(pool, acceptance_line):
    pipe = Pipeline(ColorRegionProposer(), None, selector=RandomChooser(0), name="random")
    rep = evaluate({"random": pipe}, ColorKeyOracle(pool.palette), pool, n_samples=200, seed=6)["random"]
    ok = abs(rep.accuracy - 0.25) <= 0.08
    acceptance_line(6, ok, f"random accuracy {rep.accuracy:.3f} (band 0.25 +/- 0.08)")
    assert ok


@pytest.mark.parametrize("seed", [0, 1])
def test_criterion_7_toy_learning(seed, acceptance_line):
    feats = FeatureSet(mock_hash_encoder([f"img{i}" for i in range(16)], 64),
                       mock_hash_encoder([f"txt{i}" for i in range(16)], 64))
    cfg = TrainerConfig(learning_rate=1e-3, projection_dim=32, temperature=0.1, batch_size=8,
                        max_epochs=1000, max_steps=200, seed=seed)
    ih, th = init_heads(cfg, 64, 64)
    initial = evaluate_loss(ih, th, feats, cfg)
    result = train_on_features(cfg, feats, feats)
    final = result.records[-1].train_loss
    ok = final < math.log(cfg.batch_size) and final < 0.5 * initial
    acceptance_line(7, ok, f"seed {seed}: initial {initial:.3f}, final {final:.3f}, ln B {math.log(8):.3f}")
    assert ok


def test_criterion_8_determinism(tmp_path, acceptance_line):
    from PIL import Image

    rng = np.random.default_rng(0)
    data = tmp_path / "data"
    for cls in ("a", "b", "c"):
        (data / cls).mkdir(parents=True)
        for k in range(6):
            Image.fromarray(rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)).save(data / cls / f"{k}.png")
    train_args = [f"--data.image_root={data}", "--backend.width=16", "--trainer.projection_dim=8",
                  "--trainer.max_epochs=3", "--trainer.batch_size=4", "--seed=7"]
    eval_args = ["--eval.n_samples=12", "--eval.dump_composites=true", "--eval.checkpoints={untrained: untrained}",
                 "--backend.width=16", "--trainer.projection_dim=8", "--seed=7"]
    for tag in ("r1", "r2"):
        assert run(["train-clip", f"--run-dir={tmp_path / tag / 'train'}"] + train_args) == 0
        assert run(["evaluate", f"--run-dir={tmp_path / tag / 'eval'}"] + eval_args) == 0
    names = ["train/train_log.jsonl", "train/train_manifest.jsonl", "train/val_manifest.jsonl",
             "train/checkpoint.npz", "eval/eval_reports.json"]
    names += sorted(str(p.relative_to(tmp_path / "r1")) for p in (tmp_path / "r1" / "eval" / "composites").iterdir())
    diffs = [n for n in names if (tmp_path / "r1" / n).read_bytes() != (tmp_path / "r2" / n).read_bytes()]
    records = (tmp_path / "r1" / "train/train_log.jsonl").read_text().splitlines()
    pngs = list((tmp_path / "r1" / "eval" / "composites").glob("*.png"))
    ok = not diffs and len(records) == 3 and len(pngs) >= 12
    json.loads(records[0])
    acceptance_line(8, ok, f"{len(names)} artifacts compared, {len(diffs)} differ")
    assert ok
