"""Imitation pretraining: cross-entropy on derived action labels, AdamW with
decoupled weight decay, linear warmup into cosine annealing."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .action_space import VocabConfig, load_labels_csv, relabel_trajectory
from .autodiff import Tensor, cross_entropy, scale, stack_scalars, tmean
from .errors import DomainError, NumericalFailure
from .kinematics import EgoState, load_trajectory_csv
from .planner import PlannerConfig, aux_map_logits, forward_teacher_forced
from .world import TokenBundle, load_manifest, load_scene, tokenize_scene

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    peak_lr: float = 6e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 5
    weight_decay: float = 1e-2
    grad_clip_norm: float = 1.0
    aux_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.min_lr > self.peak_lr:
            raise DomainError("min_lr must not exceed peak_lr")
        if self.warmup_epochs > self.epochs:
            raise DomainError("warmup_epochs must not exceed epochs")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be positive")


@dataclass(frozen=True)
class TrainExample:
    scene_id: str
    bundle: TokenBundle
    states: tuple[EgoState, ...]  # planning-frame states at steps 0..T-1
    labels: np.ndarray  # [T] action ids
    aux_targets: np.ndarray  # [n_map] 0=boundary, 1=centerline


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean over steps of -log softmax at the label id (stable)."""
    labels = np.asarray(labels, dtype=np.int64)
    vocab = logits.data.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= vocab):
        raise DomainError(
            f"label outside [0, {vocab}): {labels.min()}..{labels.max()}"
        )
    if labels.shape[0] != logits.data.shape[0]:
        raise DomainError(
            f"label count {labels.shape[0]} != logits rows {logits.data.shape[0]}"
        )
    return cross_entropy(logits, labels)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup by epoch fraction, cosine to min_lr at the last epoch."""
    if epoch < cfg.warmup_epochs:
        return cfg.peak_lr * (epoch + 1) / cfg.warmup_epochs
    span = max(cfg.epochs - 1 - cfg.warmup_epochs, 1)
    t = min((epoch - cfg.warmup_epochs) / span, 1.0)
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + np.cos(np.pi * t))


class AdamState:
    """First/second moment estimates, initialized lazily to zero."""

    def __init__(self) -> None:
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients by a common factor so the global norm is capped.

    Returns the pre-clip global norm. Direction is never changed.
    """
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    total = total ** 0.5
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return total


def optimizer_step(params: dict[str, Tensor], state: AdamState, lr: float,
                   cfg: TrainConfig) -> None:
    """One AdamW update; decoupled decay applied after the gradient step."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data -= lr * cfg.weight_decay * p.data


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def build_dataset(corpus_dir, labels_path, vocab: VocabConfig, n_map: int = 16,
                  dt: float = 0.5) -> list[TrainExample]:
    """Pair each corpus scene with its derived labels and relabeled states."""
    by_segment: dict[str, dict[int, int]] = {}
    for seg, k, action_id in load_labels_csv(labels_path):
        by_segment.setdefault(seg, {})[k] = action_id
    examples = []
    for rec in load_manifest(corpus_dir):
        sid = rec["scene_id"]
        if sid not in by_segment:
            raise DomainError(f"no derived labels for {sid} in {labels_path}")
        steps = by_segment[sid]
        labels = np.asarray([steps[k] for k in sorted(steps)], dtype=np.int64)
        scene = load_scene(os.path.join(corpus_dir, rec["file"]))
        bundle = tokenize_scene(scene, n_map=n_map, dt=dt)
        origin = EgoState(0.0, 0.0, scene.ego_init.v, 0.0, 0)
        traj = relabel_trajectory(origin, labels, vocab, dt)
        flags = bundle.env[:, :3]
        aux = bundle.env[flags[:, 0] == 0.0, 2].astype(np.int64)
        examples.append(TrainExample(
            scene_id=sid, bundle=bundle, states=traj.states[:-1],
            labels=labels, aux_targets=aux,
        ))
    return examples


def _example_loss(ex: TrainExample, params: dict, pcfg: PlannerConfig,
                  aux_weight: float):
    logits = forward_teacher_forced(ex.bundle, ex.states, params, pcfg)
    ce = ce_loss(logits, ex.labels)
    hits = int(np.sum(np.argmax(logits.data, axis=1) == ex.labels))
    if aux_weight > 0.0:
        aux_logits, targets = aux_map_logits(ex.bundle, params)
        aux = cross_entropy(aux_logits, ex.aux_targets)
        total = ce + scale(aux, aux_weight)
    else:
        aux = None
        total = ce
    aux_val = float(aux.item()) if aux is not None else 0.0
    return total, float(ce.item()), aux_val, hits


def fit(dataset: list[TrainExample], params: dict[str, Tensor],
        pcfg: PlannerConfig, cfg: TrainConfig,
        curve_path=None) -> list[dict]:
    """Mini-batch training loop; mutates params, returns per-epoch rows.

    A non-finite batch loss aborts with the offending scene ids (and a JSON
    dump next to the curve file when one is configured).
    """
    if not dataset:
        raise DomainError("empty training dataset")
    state = AdamState()
    rows = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng_mod.stream(cfg.seed, rng_mod.STAGE_TRAIN, epoch).permutation(len(dataset))
        ce_sum = aux_sum = 0.0
        hit_sum = step_sum = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            zero_grads(params)
            parts = []
            for ex in batch:
                total, ce_v, aux_v, hits = _example_loss(ex, params, pcfg, cfg.aux_weight)
                parts.append(total)
                ce_sum += ce_v
                aux_sum += aux_v
                hit_sum += hits
                step_sum += len(ex.labels)
            loss = tmean(stack_scalars(parts))
            if not np.isfinite(loss.item()):
                ids = [ex.scene_id for ex in batch]
                if curve_path is not None:
                    dump = str(curve_path) + ".nanbatch.json"
                    with open(dump, "w") as fh:
                        json.dump({"epoch": epoch, "scene_ids": ids}, fh)
                raise NumericalFailure(
                    f"non-finite loss at epoch {epoch}, scenes {ids}"
                )
            loss.backward()
            clip_gradients(params, cfg.grad_clip_norm)
            optimizer_step(params, state, lr, cfg)
        n = len(dataset)
        rows.append({
            "epoch": epoch,
            "lr": lr,
            "ce": ce_sum / n,
            "aux": aux_sum / n,
            "acc": hit_sum / max(step_sum, 1),
        })
    if curve_path is not None:
        save_curve_csv(rows, curve_path)
    return rows


def save_curve_csv(rows: list[dict], path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("epoch,lr,ce,aux,acc\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['lr']:.17g},{r['ce']:.17g},"
                     f"{r['aux']:.17g},{r['acc']:.17g}\n")
    os.replace(tmp, path)


def load_curve_csv(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "epoch,lr,ce,aux,acc":
            raise DomainError(f"unexpected curve header in {path}: {header!r}")
        for line in fh:
            e, lr, ce, aux, acc = line.strip().split(",")
            rows.append({"epoch": int(e), "lr": float(lr), "ce": float(ce),
                         "aux": float(aux), "acc": float(acc)})
    return rows
