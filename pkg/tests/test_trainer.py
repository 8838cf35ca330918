import math

import numpy as np
import pytest

from promptseg.data import CaptionedSample
from promptseg.encoders import EmbeddingBatch, HashBackend, Modality, l2_normalize, mock_hash_encoder
from promptseg.errors import ConfigError, InvalidInputError, ShapeError, TrainingDiverged
from promptseg.trainer import (AdamW, FeatureSet, GridCell, GridResult, PlateauScheduler, TrainerConfig,
                               clip_loss, clip_loss_grad, contrastive_targets, default_grid, evaluate_loss,
                               grid_search, init_heads, load_checkpoint, save_checkpoint, select_winner,
                               similarity_logits, train, train_on_features, write_train_log)

# Learning rate, projection dim, validation loss as published in the grid-search table.
TABLE_1 = [
    (0.00001, 128, 0.9507), (0.00001, 512, 0.9627),
    (0.0001, 128, 0.7791), (0.0001, 512, 0.7935),
    (0.001, 128, 2.077), (0.001, 512, 2.075),
    (0.01, 128, 2.074), (0.01, 512, 2.074),
    (0.1, 128, 2.074), (0.1, 512, 2.074),
    (0.5, 128, 2.074), (0.5, 512, 2.074),
]


def brute_force_clip_loss(logits, targets):
    b = len(logits)
    rows = cols = 0.0
    for i in range(b):
        z = sum(math.exp(logits[i][k]) for k in range(b))
        for j in range(b):
            rows -= targets[i][j] * math.log(math.exp(logits[i][j]) / z)
    for j in range(b):
        z = sum(math.exp(logits[k][j]) for k in range(b))
        for i in range(b):
            cols -= targets[i][j] * math.log(math.exp(logits[i][j]) / z)
    return (rows / b + cols / b) / 2


def _unit(rng, b, d):
    return l2_normalize(rng.normal(size=(b, d)))


# ---------------------------------------------------------------- logits


def test_logits_orthonormal_identity():
    e = np.eye(4, 8)
    np.testing.assert_allclose(similarity_logits(e, e, 1.0), np.eye(4))


def test_logits_temperature_scaling():
    rng = np.random.default_rng(0)
    t, i = _unit(rng, 4, 16), _unit(rng, 4, 16)
    np.testing.assert_array_equal(similarity_logits(t, i, 0.5), 2 * similarity_logits(t, i, 1.0))


def test_logits_brute_force():
    rng = np.random.default_rng(1)
    t, i = _unit(rng, 4, 16), _unit(rng, 4, 16)
    expected = [[sum(t[a, k] * i[b, k] for k in range(16)) / 0.7 for b in range(4)] for a in range(4)]
    np.testing.assert_allclose(similarity_logits(t, i, 0.7), expected, atol=1e-6)


def test_logits_errors():
    with pytest.raises(ShapeError):
        similarity_logits(np.eye(3), np.eye(4), 1.0)
    with pytest.raises(ConfigError):
        similarity_logits(np.eye(3), np.eye(3), 0.0)
    raw = EmbeddingBatch(np.ones((2, 2)), Modality.TEXT, normalized=False)
    with pytest.raises(InvalidInputError):
        similarity_logits(raw, np.eye(2), 1.0)


# ---------------------------------------------------------------- targets


def test_targets_sharpen_to_identity():
    e = np.eye(5, 8)
    np.testing.assert_allclose(contrastive_targets(e, e, 1e-3), np.eye(5), atol=1e-6)


def test_targets_split_between_duplicates():
    e = np.eye(6, 8)
    e[4] = e[1]  # samples 1 and 4 are identical in both modalities
    t = contrastive_targets(e, e, 1e-3)
    for row in (1, 4):
        assert t[row, 1] == pytest.approx(0.5, abs=1e-6)
        assert t[row, 4] == pytest.approx(0.5, abs=1e-6)


def test_targets_are_row_stochastic_and_symmetric_in_modalities():
    rng = np.random.default_rng(2)
    t, i = _unit(rng, 6, 10), _unit(rng, 6, 10)
    targ = contrastive_targets(t, i, 0.3)
    assert np.all(targ >= 0)
    np.testing.assert_allclose(targ.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(contrastive_targets(i, t, 0.3), targ, atol=1e-12)


# ---------------------------------------------------------------- loss


@pytest.mark.parametrize("b", [2, 8, 64])
def test_uniform_logits_give_log_b(b):
    assert clip_loss(np.zeros((b, b)), np.eye(b)) == pytest.approx(math.log(b), abs=1e-6)


def test_perfect_logits_give_zero():
    assert clip_loss(100 * np.eye(8), np.eye(8)) < 1e-6


def test_loss_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(5):
        logits = rng.normal(size=(4, 4)) * 3
        targets = rng.random((4, 4))
        targets /= targets.sum(axis=1, keepdims=True)
        assert clip_loss(logits, targets) == pytest.approx(brute_force_clip_loss(logits, targets), abs=1e-6)


def test_loss_permutation_invariant():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(6, 6))
    targets = rng.random((6, 6))
    targets /= targets.sum(axis=1, keepdims=True)
    p = rng.permutation(6)
    assert clip_loss(logits[p][:, p], targets[p][:, p]) == pytest.approx(clip_loss(logits, targets), abs=1e-12)


def test_loss_gradient_finite_differences():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(4, 4))
    targets = rng.random((4, 4))
    targets /= targets.sum(axis=1, keepdims=True)
    loss, grad = clip_loss_grad(logits, targets)
    assert loss == pytest.approx(clip_loss(logits, targets), abs=1e-12)
    eps = 1e-5
    numeric = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += eps
        down[idx] -= eps
        numeric[idx] = (clip_loss(up, targets) - clip_loss(down, targets)) / (2 * eps)
    assert np.linalg.norm(grad - numeric) / np.linalg.norm(numeric) < 1e-4


def test_loss_shape_errors():
    with pytest.raises(ShapeError):
        clip_loss(np.zeros((3, 3)), np.eye(4))
    with pytest.raises(ShapeError):
        clip_loss(np.zeros((3, 4)), np.zeros((3, 4)))


# ---------------------------------------------------------------- config & schedule


def test_config_defaults_and_validation():
    c = TrainerConfig()
    assert (c.plateau_factor, c.plateau_patience) == (0.9, 5)
    for bad in ({"learning_rate": 0}, {"temperature": -1}, {"plateau_factor": 1.0}, {"batch_size": 1},
                {"target_mode": "hard"}):
        with pytest.raises(ConfigError):
            TrainerConfig(**bad)
    with pytest.raises(ConfigError) as exc:
        TrainerConfig.from_dict({"learning_rat": 0.1})
    assert "learning_rat" in str(exc.value)


def simulate_plateau(values, lr, factor, patience, threshold):
    """Independent re-statement of the decay rule, one epoch at a time."""
    best, bad, fired = math.inf, 0, []
    for epoch, v in enumerate(values, start=1):
        if v < best - threshold:
            best, bad = v, 0
        else:
            bad += 1
        if bad == patience:
            lr *= factor
            bad = 0
            fired.append(epoch)
    return lr, fired


def test_plateau_constant_curve():
    sched = PlateauScheduler(1e-4, factor=0.9, patience=5)
    lrs = [sched.step(1.0) for _ in range(11)]
    expected, fired = simulate_plateau([1.0] * 11, 1e-4, 0.9, 5, 1e-4)
    assert fired == [6, 11]
    assert lrs[-1] == expected == 1e-4 * 0.9 * 0.9
    assert lrs[4] == 1e-4 and lrs[5] == 1e-4 * 0.9


def test_plateau_improvement_resets():
    rng = np.random.default_rng(0)
    curve = list(np.cumsum(rng.normal(0, 0.01, 40)) + 1)
    sched = PlateauScheduler(1.0, 0.5, 3)
    got = [sched.step(v) for v in curve][-1]
    assert got == simulate_plateau(curve, 1.0, 0.5, 3, 1e-4)[0]


@pytest.mark.torch
def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    params = {"w": p0.copy()}
    opt = AdamW(lr=0.01, weight_decay=0.1)
    tp = torch.nn.Parameter(torch.tensor(p0))
    topt = torch.optim.AdamW([tp], lr=0.01, weight_decay=0.1)
    for g in grads:
        opt.step(params, {"w": g})
        tp.grad = torch.tensor(g)
        topt.step()
    np.testing.assert_allclose(params["w"], tp.detach().numpy(), atol=1e-10)


# ---------------------------------------------------------------- training


def toy_features(d=64, n=16):
    return FeatureSet(mock_hash_encoder([f"img{i}" for i in range(n)], d),
                      mock_hash_encoder([f"txt{i}" for i in range(n)], d))


TOY = dict(learning_rate=1e-3, projection_dim=32, temperature=0.1, batch_size=8, max_epochs=1000, max_steps=200)


@pytest.mark.parametrize("seed", [0, 1])
def test_toy_overfit(seed):
    feats = toy_features()
    cfg = TrainerConfig(seed=seed, **TOY)
    ih, th = init_heads(cfg, 64, 64)
    initial = evaluate_loss(ih, th, feats, cfg)
    result = train_on_features(cfg, feats, feats)
    final = result.records[-1].train_loss
    assert final < math.log(cfg.batch_size)
    assert final < 0.5 * initial
    assert sum(1 for _ in result.records) == 100  # 200 steps, 2 per epoch


def test_training_is_deterministic():
    feats = toy_features()
    cfg = TrainerConfig(**{**TOY, "max_steps": 40})
    a = train_on_features(cfg, feats, feats)
    b = train_on_features(cfg, feats, feats)
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]


def test_records_invariants_and_best_snapshot():
    feats = toy_features()
    cfg = TrainerConfig(**{**TOY, "max_steps": 60, "plateau_patience": 2})
    res = train_on_features(cfg, feats, toy_features(n=8))
    assert all(r.train_loss >= 0 and r.validation_loss >= 0 for r in res.records)
    assert all(r.current_lr <= cfg.learning_rate for r in res.records)
    best = min(r.validation_loss for r in res.records)
    assert res.best_validation_loss == best
    assert evaluate_loss(res.image_head, res.text_head, toy_features(n=8), cfg) == pytest.approx(best, abs=1e-12)


def test_training_errors():
    feats = toy_features()
    cfg = TrainerConfig(**TOY)
    with pytest.raises(InvalidInputError):
        train_on_features(cfg, FeatureSet(np.zeros((0, 64)), np.zeros((0, 64))), feats)
    with pytest.raises(InvalidInputError):
        train_on_features(TrainerConfig(**{**TOY, "batch_size": 32}), feats, feats)
    bad = FeatureSet(np.full((16, 64), np.nan), feats.text)
    with pytest.raises(TrainingDiverged) as exc:
        train_on_features(cfg, bad, feats)
    assert exc.value.epoch == 1


def test_train_through_backends(tmp_path):
    samples = [CaptionedSample(f"/img/{i}.png", f"class {i % 4}", f"class{i % 4}") for i in range(12)]
    cfg = TrainerConfig(batch_size=4, max_epochs=3, projection_dim=16)
    res = train(cfg, samples[:8], samples[8:], HashBackend(32, "image"), HashBackend(24, "text"))
    assert len(res.records) == 3
    assert res.image_head.d_in == 32 and res.text_head.d_in == 24
    write_train_log(res.records, tmp_path / "log.jsonl")
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 3


def test_checkpoint_round_trip(tmp_path):
    feats = toy_features()
    cfg = TrainerConfig(**{**TOY, "max_steps": 4})
    res = train_on_features(cfg, feats, feats)
    save_checkpoint(tmp_path / "c.npz", res.image_head, res.text_head, cfg, res.optimizer,
                    backends={"image": "hash-image:64"})
    ck = load_checkpoint(tmp_path / "c.npz")
    x = feats.image[:3]
    np.testing.assert_array_equal(ck.image_head(x), res.image_head(x))
    assert ck.config == cfg
    assert ck.meta["normalization"]["mean"] == [0.485, 0.456, 0.406]
    assert ck.meta["backends"]["image"] == "hash-image:64"


# ---------------------------------------------------------------- grid search


def _replay(table):
    lookup = {(lr, d): loss for lr, d, loss in table}
    return lambda cfg, tr, va: lookup[(cfg.learning_rate, cfg.projection_dim)]


def test_table_one_winner():
    grid = default_grid()
    assert [(c.learning_rate, c.projection_dim) for c in grid] == [(lr, d) for lr, d, _ in TABLE_1]
    result = grid_search(grid, runner=_replay(TABLE_1))
    win = result.cells[result.winner]
    assert (win.config.learning_rate, win.config.projection_dim, win.best_validation_loss) == (0.0001, 128, 0.7791)
    assert select_winner(result.cells) == result.winner
    table = result.table()
    assert [(r["learning_rate"], r["projection_dim"], r["validation_loss"]) for r in table] == TABLE_1


def test_grid_singleton_and_ties():
    single = grid_search([TrainerConfig(learning_rate=0.3)], runner=lambda *a: 5.0)
    assert single.winner == 0
    grid = [TrainerConfig(learning_rate=0.01, projection_dim=64), TrainerConfig(learning_rate=0.001, projection_dim=512),
            TrainerConfig(learning_rate=0.001, projection_dim=128)]
    assert grid_search(grid, runner=lambda *a: 1.0).winner == 2
    with pytest.raises(InvalidInputError):
        grid_search([], runner=lambda *a: 1.0)


def test_grid_records_diverged_cells():
    def runner(cfg, tr, va):
        if cfg.learning_rate > 0.1:
            raise TrainingDiverged(3, float("nan"))
        return cfg.learning_rate
    result = grid_search(default_grid(), runner=runner)
    diverged = [c for c in result.cells if c.error]
    assert len(diverged) == 2 and all(math.isinf(c.best_validation_loss) for c in diverged)
    assert result.cells[result.winner].config.learning_rate == 1e-5
    assert GridResult([GridCell(TrainerConfig(), math.inf, "x")]).winner is None


def test_grid_real_runs_parallel_equals_serial():
    feats = toy_features()
    base = TrainerConfig(**{**TOY, "max_steps": 10})
    grid = default_grid(base, (1e-3, 1e-2), (16,))
    a = grid_search(grid, feats, feats)
    b = grid_search(grid, feats, feats, jobs=2)
    assert [c.best_validation_loss for c in a.cells] == [c.best_validation_loss for c in b.cells]
    assert a.winner == b.winner == select_winner(a.cells)
