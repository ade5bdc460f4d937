"""Tests for the imitation training loop: loss, schedule, optimizer, fit."""

import math
import os

import numpy as np
import pytest

from kinoplan import world
from kinoplan.action_space import VocabConfig, derive_labels, save_labels_csv
from kinoplan.autodiff import Tensor
from kinoplan.errors import DomainError, NumericalFailure
from kinoplan.kinematics import EgoState, load_trajectory_csv
from kinoplan.planner import PlannerConfig, init_params
from kinoplan import training
from kinoplan.training import (
    AdamState,
    TrainConfig,
    build_dataset,
    ce_loss,
    clip_gradients,
    fit,
    load_curve_csv,
    lr_schedule,
    optimizer_step,
    save_curve_csv,
    zero_grads,
)

FAST = VocabConfig(accel_bins=32, yaw_bins=16)


def _make_corpus(out_dir, root_seed, n_scenes):
    half = n_scenes // 2
    manifest = world.generate_corpus(
        str(out_dir), root_seed, {"STRAIGHT": half, "CURVE_KEEP": n_scenes - half}
    )
    rows = []
    for rec in manifest:
        sid = rec["scene_id"]
        traj = load_trajectory_csv(out_dir / "trajectories" / f"{sid}.csv", dt=0.5)
        for k, action_id in enumerate(derive_labels(traj, FAST)):
            rows.append((sid, k, action_id))
    save_labels_csv(out_dir / "labels.csv", rows)
    return out_dir


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    return _make_corpus(out, 77, 8)


@pytest.fixture(scope="module")
def tiny_dataset(tiny_corpus):
    return build_dataset(tiny_corpus, tiny_corpus / "labels.csv", FAST)


# ---------------------------------------------------------------------------
# Cross-entropy loss


def test_uniform_logits_loss_is_log_vocab():
    for vocab in (8192, 512):
        logits = Tensor(np.zeros((8, vocab)))
        loss = ce_loss(logits, np.zeros(8, dtype=np.int64))
        assert abs(loss.item() - math.log(vocab)) < 1e-12


def test_confident_logits_loss_near_zero():
    vocab = 512
    labels = np.array([3, 100, 511])
    data = np.zeros((3, vocab))
    data[np.arange(3), labels] = 60.0
    loss = ce_loss(Tensor(data), labels)
    assert 0.0 <= loss.item() < 1e-12


def test_ce_gradient_is_softmax_minus_onehot_over_steps():
    rng = np.random.default_rng(4)
    T, vocab = 5, 9
    logits = Tensor(rng.normal(size=(T, vocab)) * 2.0, requires_grad=True)
    labels = rng.integers(0, vocab, size=T)
    ce_loss(logits, labels).backward()
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    soft = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    onehot = np.zeros((T, vocab))
    onehot[np.arange(T), labels] = 1.0
    assert np.max(np.abs(logits.grad - (soft - onehot) / T)) < 1e-9


def test_ce_rejects_bad_labels():
    logits = Tensor(np.zeros((4, 16)))
    with pytest.raises(DomainError):
        ce_loss(logits, np.array([0, 1, 16, 2]))
    with pytest.raises(DomainError):
        ce_loss(logits, np.array([0, -1, 2, 3]))
    with pytest.raises(DomainError):
        ce_loss(logits, np.array([0, 1, 2]))


# ---------------------------------------------------------------------------
# Schedule


def test_schedule_hits_peak_at_warmup_end_exactly():
    cfg = TrainConfig(epochs=40)
    assert lr_schedule(cfg.warmup_epochs - 1, cfg) == cfg.peak_lr
    assert lr_schedule(cfg.warmup_epochs, cfg) == cfg.peak_lr


def test_schedule_hits_min_lr_at_final_epoch_exactly():
    cfg = TrainConfig(epochs=40)
    assert lr_schedule(cfg.epochs - 1, cfg) == cfg.min_lr


def test_schedule_warmup_rises_then_cosine_falls():
    cfg = TrainConfig(epochs=17, warmup_epochs=5)
    lrs = [lr_schedule(e, cfg) for e in range(cfg.epochs)]
    for e in range(1, cfg.warmup_epochs):
        assert lrs[e] > lrs[e - 1]
    for e in range(cfg.warmup_epochs + 1, cfg.epochs):
        assert lrs[e] <= lrs[e - 1]
    assert lrs[cfg.warmup_epochs - 1] == lrs[cfg.warmup_epochs] == cfg.peak_lr


def test_config_validation():
    with pytest.raises(DomainError):
        TrainConfig(peak_lr=1e-5, min_lr=1e-4)
    with pytest.raises(DomainError):
        TrainConfig(epochs=3, warmup_epochs=5)
    with pytest.raises(DomainError):
        TrainConfig(epochs=0)


# ---------------------------------------------------------------------------
# Optimizer


def test_decay_isolated_from_gradient_step():
    rng = np.random.default_rng(11)
    params = {
        "a": Tensor(rng.normal(size=(4, 3)), requires_grad=True),
        "b": Tensor(rng.normal(size=(5,)), requires_grad=True),
    }
    before = {k: p.data.copy() for k, p in params.items()}
    zero_grads(params)
    cfg = TrainConfig(weight_decay=1e-2)
    optimizer_step(params, AdamState(), lr=0.1, cfg=cfg)
    for k, p in params.items():
        expected = before[k] * (1.0 - 1e-3)
        assert np.max(np.abs(p.data - expected) / np.abs(expected)) < 4e-16


def test_zero_decay_zero_grads_leaves_params_untouched():
    rng = np.random.default_rng(12)
    params = {"w": Tensor(rng.normal(size=(6,)), requires_grad=True)}
    before = params["w"].data.copy()
    zero_grads(params)
    optimizer_step(params, AdamState(), lr=0.5,
                   cfg=TrainConfig(weight_decay=0.0))
    assert np.array_equal(params["w"].data, before)


def test_optimizer_matches_reference_adamw():
    rng = np.random.default_rng(13)
    data = rng.normal(size=(3, 2))
    params = {"w": Tensor(data.copy(), requires_grad=True)}
    cfg = TrainConfig(weight_decay=1e-2)
    state = AdamState()

    ref = data.copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in range(1, 4):
        g = rng.normal(size=ref.shape)
        params["w"].grad = g.copy()
        optimizer_step(params, state, lr=1e-3, cfg=cfg)

        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1.0 - 0.9 ** t)
        v_hat = v / (1.0 - 0.999 ** t)
        ref = ref - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
        ref = ref - 1e-3 * 1e-2 * ref
        assert np.max(np.abs(params["w"].data - ref)) < 1e-15


def test_clip_scales_but_never_rotates():
    params = {"g": Tensor(np.zeros(2), requires_grad=True)}
    params["g"].grad = np.array([3.0, 4.0])
    norm = clip_gradients(params, max_norm=1.0)
    assert norm == 5.0
    clipped = params["g"].grad
    assert abs(np.linalg.norm(clipped) - 1.0) < 1e-12
    assert np.max(np.abs(clipped / np.linalg.norm(clipped)
                         - np.array([0.6, 0.8]))) < 1e-12


def test_clip_no_op_under_threshold_and_when_disabled():
    params = {"g": Tensor(np.zeros(3), requires_grad=True)}
    small = np.array([0.1, -0.2, 0.05])
    params["g"].grad = small.copy()
    norm = clip_gradients(params, max_norm=10.0)
    assert norm == pytest.approx(np.linalg.norm(small), rel=1e-15)
    assert np.array_equal(params["g"].grad, small)

    big = np.array([100.0, -300.0, 50.0])
    params["g"].grad = big.copy()
    clip_gradients(params, max_norm=0.0)
    assert np.array_equal(params["g"].grad, big)


# ---------------------------------------------------------------------------
# Dataset assembly


def test_build_dataset_pairs_labels_and_relabeled_states(tiny_corpus, tiny_dataset):
    assert len(tiny_dataset) == 8
    for ex in tiny_dataset:
        assert len(ex.states) == len(ex.labels) == 8
        first = ex.states[0]
        assert (first.x, first.y, first.theta) == (0.0, 0.0, 0.0)
        assert first.v == ex.bundle.ego[0]
        assert ex.aux_targets.shape == (16,)
        assert int(ex.aux_targets.sum()) == 8


def test_build_dataset_requires_labels_for_every_scene(tiny_corpus, tmp_path):
    partial = tmp_path / "partial.csv"
    kept = [
        line for line in open(tiny_corpus / "labels.csv")
        if not line.startswith("scene_0003,")
    ]
    partial.write_text("".join(kept))
    with pytest.raises(DomainError, match="scene_0003"):
        build_dataset(tiny_corpus, partial, FAST)


# ---------------------------------------------------------------------------
# Fit loop


def test_fit_seeded_runs_write_identical_curves(tiny_dataset, tmp_path):
    pcfg = PlannerConfig(vocab=FAST)
    cfg = TrainConfig(epochs=3, batch_size=4, warmup_epochs=1, seed=9)
    paths = []
    for i in range(2):
        params = init_params(pcfg, seed=21)
        path = tmp_path / f"curve_{i}.csv"
        fit(list(tiny_dataset), params, pcfg, cfg, curve_path=path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_curve_csv_roundtrip_exact(tmp_path):
    rows = [
        {"epoch": 0, "lr": 1.2e-4, "ce": 5.493912345678901, "aux": 0.68451,
         "acc": 1.0 / 3.0},
        {"epoch": 1, "lr": 2.4e-4, "ce": 4.1, "aux": 0.5, "acc": 0.25},
    ]
    path = tmp_path / "curve.csv"
    save_curve_csv(rows, path)
    assert load_curve_csv(path) == rows
    (tmp_path / "bad.csv").write_text("epoch,lr,loss\n")
    with pytest.raises(DomainError):
        load_curve_csv(tmp_path / "bad.csv")


def test_fit_rejects_empty_dataset():
    pcfg = PlannerConfig(vocab=FAST)
    with pytest.raises(DomainError):
        fit([], init_params(pcfg, seed=1), pcfg, TrainConfig())


@pytest.mark.filterwarnings("ignore:invalid value")
def test_non_finite_loss_aborts_with_batch_dump(tiny_dataset, tmp_path):
    pcfg = PlannerConfig(vocab=FAST)
    params = init_params(pcfg, seed=2)
    params["action_b"].data[0] = np.inf
    curve = tmp_path / "curve.csv"
    with pytest.raises(NumericalFailure, match="epoch 0"):
        fit(list(tiny_dataset), params, pcfg,
            TrainConfig(epochs=1, batch_size=4, warmup_epochs=1),
            curve_path=curve)
    dump = tmp_path / "curve.csv.nanbatch.json"
    assert dump.exists()
    assert "scene_" in dump.read_text()
    assert not curve.exists()


# ---------------------------------------------------------------------------
# Learnability

SMOKE_SEED_DATA = 123
SMOKE_SEED_SHUFFLE = 3
SMOKE_SEED_INIT = 5


@pytest.fixture(scope="module")
def smoke_rows(tmp_path_factory):
    """One seeded 512-scene training run shared by the learnability tests."""
    out = _make_corpus(tmp_path_factory.mktemp("smoke_corpus"), SMOKE_SEED_DATA, 512)
    dataset = build_dataset(out, out / "labels.csv", FAST)
    pcfg = PlannerConfig(vocab=FAST)
    params = init_params(pcfg, seed=SMOKE_SEED_INIT)
    cfg = TrainConfig(epochs=30, batch_size=4, peak_lr=1.5e-3,
                      grad_clip_norm=5.0, seed=SMOKE_SEED_SHUFFLE)
    return fit(dataset, params, pcfg, cfg)


def test_fit_learns_action_labels_on_mixed_corpus(smoke_rows):
    # Threshold calibrated on this corpus: 12% of the uniform baseline
    # ln(512) = 6.238. The pinned seeds land near 0.64, and nearby seed
    # pairs stay under 0.71, so the bar holds with margin.
    uniform = math.log(FAST.accel_bins * FAST.yaw_bins)
    final = smoke_rows[-1]
    assert final["ce"] < 0.12 * uniform
    assert final["acc"] > 0.6


def test_fit_loss_decreases_early(smoke_rows):
    ce = [r["ce"] for r in smoke_rows]
    smoothed = [sum(ce[i:i + 3]) / 3.0 for i in range(5 - 2)]
    assert smoothed[0] > smoothed[1] > smoothed[2]


@pytest.fixture(scope="module")
def ablation_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation_corpus")
    return _make_corpus(out, 88, 64)


def test_fit_converges_with_and_without_aux_loss(ablation_corpus, tmp_path):
    dataset = build_dataset(ablation_corpus, ablation_corpus / "labels.csv", FAST)
    pcfg = PlannerConfig(vocab=FAST)
    uniform = math.log(FAST.accel_bins * FAST.yaw_bins)
    for weight in (0.0, 0.1):
        params = init_params(pcfg, seed=7)
        cfg = TrainConfig(epochs=12, batch_size=4, peak_lr=1.5e-3,
                          grad_clip_norm=5.0, aux_weight=weight, seed=1)
        curve = tmp_path / f"aux_{weight}.csv"
        rows = fit(dataset, params, pcfg, cfg, curve_path=curve)
        assert rows[-1]["ce"] < 0.5 * rows[0]["ce"]
        assert rows[-1]["ce"] < 0.4 * uniform
        assert curve.exists()
        if weight == 0.0:
            assert all(r["aux"] == 0.0 for r in rows)
        else:
            assert rows[-1]["aux"] < rows[0]["aux"]
