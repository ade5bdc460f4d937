"""Strict run configuration for the command-line pipeline.

One JSON document drives every stage. Sections mirror the library modules
(world, vocab, model, train, dpo, metrics) plus paths and the single seed;
any field left out keeps its library default, and unknown keys are rejected
so typos fail loudly instead of silently running defaults. The parsed
configuration can be re-serialized to a fully materialized document, which
each command echoes into its output directory.

All randomness derives from the one top-level seed. The held-out corpus
uses seed + 1 as its generation root so the two splits draw from disjoint
scene-seed streams; training stages reuse the top-level seed directly and
are separated by their stage tags.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .action_space import VocabConfig
from .errors import DomainError
from .metrics import MetricConfig
from .planner import PlannerConfig
from .training import TrainConfig
from .world import KINDS, WorldConfig

# Fixed layout under paths.out_root; commands compose via these names.
DATA_DIR = "data"
TRAIN_SPLIT = "train"
HOLDOUT_SPLIT = "holdout"
LABELS_DIR = "labels"
LABELS_FILE = "train_labels.csv"
PRETRAIN_DIR = "pretrain"
PREFS_DIR = "prefs"
PREFS_FILE = "preferences.jsonl"
NAIVE_PREFS_FILE = "naive_preferences.jsonl"
DPO_DIR = "dpo"
DPO_NAIVE_DIR = "dpo_naive"
EVAL_DIR = "eval"
REPORT_DIR = "report"
CHECKPOINT_FILE = "checkpoint.bin"
CURVE_FILE = "curve.csv"
CONFIG_ECHO = "config.json"
RUN_LOG = "run.log"

HOLDOUT_SEED_OFFSET = 1

SECTIONS = ("world", "vocab", "model", "train", "dpo", "metrics", "paths",
            "seed")


def _default_counts(n: int) -> dict[str, int]:
    return {kind: n for kind in KINDS}


@dataclass(frozen=True)
class CorpusConfig:
    """Scene generation parameters plus the per-kind corpus composition."""

    world: WorldConfig = field(default_factory=WorldConfig)
    train_counts: dict[str, int] = field(
        default_factory=lambda: _default_counts(8))
    holdout_counts: dict[str, int] = field(
        default_factory=lambda: _default_counts(4))

    def __post_init__(self):
        for label, counts in (("train_counts", self.train_counts),
                              ("holdout_counts", self.holdout_counts)):
            for kind, n in counts.items():
                if kind not in KINDS:
                    raise DomainError(f"{label} names unknown kind {kind!r}")
                if int(n) < 0:
                    raise DomainError(f"{label}[{kind}] must be >= 0")
        if sum(self.train_counts.values()) < 1:
            raise DomainError("train_counts must request at least one scene")


@dataclass(frozen=True)
class DpoConfig:
    """Preference mining and fine-tuning knobs; optimizer fields mirror the
    pretraining schedule with the reduced fine-tuning learning rate."""

    epochs: int = 8
    batch_size: int = 8
    peak_lr: float = 6e-5
    min_lr: float = 1e-6
    warmup_epochs: int = 1
    weight_decay: float = 1e-2
    grad_clip_norm: float = 1.0
    beta: float = 0.1
    n_candidates: int = 128
    temperature: float = 1.2
    ep_zero: float = 0.05
    heldout_every: int = 1

    def __post_init__(self):
        if self.beta <= 0.0:
            raise DomainError("dpo.beta must be positive")
        if self.n_candidates < 2:
            raise DomainError("dpo.n_candidates must be at least 2")
        if self.temperature <= 0.0:
            raise DomainError("dpo.temperature must be positive")
        if not 0.0 < self.ep_zero < 1.0:
            raise DomainError("dpo.ep_zero must lie strictly inside (0, 1)")
        if self.heldout_every < 0:
            raise DomainError("dpo.heldout_every must be >= 0")
        self.train_config(0)  # surfaces schedule errors at parse time

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            peak_lr=self.peak_lr, min_lr=self.min_lr,
            warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay,
            grad_clip_norm=self.grad_clip_norm, seed=seed,
        )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    model: PlannerConfig = field(default_factory=PlannerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    out_root: str = "runs/default"

    def __post_init__(self):
        if self.model.vocab != self.vocab:
            raise DomainError("model vocabulary differs from the vocab section")
        if self.train.seed != self.seed:
            raise DomainError("train seed must equal the top-level seed")

    # Fixed artifact locations.

    def path(self, *parts) -> str:
        return os.path.join(self.out_root, *parts)

    def split_dir(self, split: str) -> str:
        if split not in (TRAIN_SPLIT, HOLDOUT_SPLIT):
            raise DomainError(f"unknown split {split!r}")
        return self.path(DATA_DIR, split)

    def labels_path(self) -> str:
        return self.path(LABELS_DIR, LABELS_FILE)

    def checkpoint_path(self, stage: str) -> str:
        return self.path(stage, CHECKPOINT_FILE)

    def curve_path(self, stage: str) -> str:
        return self.path(stage, CURVE_FILE)

    def prefs_path(self, naive: bool = False) -> str:
        return self.path(PREFS_DIR, NAIVE_PREFS_FILE if naive else PREFS_FILE)

    def eval_csv_path(self, model: str, split: str) -> str:
        return self.path(EVAL_DIR, f"{model}_{split}.csv")

    def eval_summary_path(self, model: str, split: str) -> str:
        return self.path(EVAL_DIR, f"{model}_{split}_summary.json")


# ---------------------------------------------------------------------------
# Parsing


def _merge(default_obj, overrides: dict, section: str, *, exclude=()):
    """Overlay a section dict onto a defaults dataclass, strictly."""
    if not isinstance(overrides, dict):
        raise DomainError(f"section {section} must be an object")
    fields = {f.name for f in dataclasses.fields(type(default_obj))}
    allowed = fields - set(exclude)
    for key in overrides:
        if key not in allowed:
            raise DomainError(f"unknown key in {section}: {key}")
    coerced = {}
    for key, value in overrides.items():
        current = getattr(default_obj, key)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise DomainError(f"{section}.{key} must be a boolean")
            coerced[key] = value
        elif isinstance(current, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise DomainError(f"{section}.{key} must be an integer")
            coerced[key] = value
        elif isinstance(current, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise DomainError(f"{section}.{key} must be a number")
            coerced[key] = float(value)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)) \
                    or len(value) != len(current):
                raise DomainError(
                    f"{section}.{key} must be a list of {len(current)} numbers")
            coerced[key] = tuple(float(v) for v in value)
        else:
            coerced[key] = value
    return dataclasses.replace(default_obj, **coerced)


def _counts(value, label: str) -> dict[str, int]:
    if not isinstance(value, dict):
        raise DomainError(f"{label} must be an object of kind -> count")
    out = {}
    for kind, n in value.items():
        if isinstance(n, bool) or not isinstance(n, int):
            raise DomainError(f"{label}[{kind}] must be an integer")
        out[kind] = n
    return out


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise DomainError("config document must be a JSON object")
    for key in doc:
        if key not in SECTIONS:
            raise DomainError(f"unknown config section: {key}")

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise DomainError("seed must be an integer")

    if not isinstance(doc.get("world", {}), dict):
        raise DomainError("section world must be an object")
    world_sec = dict(doc.get("world", {}))
    counts_kw = {}
    for label in ("train_counts", "holdout_counts"):
        if label in world_sec:
            counts_kw[label] = _counts(world_sec.pop(label), f"world.{label}")
    world = _merge(WorldConfig(), world_sec, "world")
    corpus = CorpusConfig(world=world, **counts_kw)

    vocab = _merge(VocabConfig(), doc.get("vocab", {}), "vocab")
    model = _merge(PlannerConfig(vocab=vocab), doc.get("model", {}), "model",
                   exclude=("vocab",))
    train = _merge(TrainConfig(seed=seed), doc.get("train", {}), "train",
                   exclude=("seed",))
    dpo = _merge(DpoConfig(), doc.get("dpo", {}), "dpo")
    metrics = _merge(MetricConfig(), doc.get("metrics", {}), "metrics")

    paths = doc.get("paths", {})
    if not isinstance(paths, dict):
        raise DomainError("section paths must be an object")
    for key in paths:
        if key != "out_root":
            raise DomainError(f"unknown key in paths: {key}")
    out_root = paths.get("out_root", "runs/default")
    if not isinstance(out_root, str) or not out_root:
        raise DomainError("paths.out_root must be a non-empty string")

    return RunConfig(seed=seed, corpus=corpus, vocab=vocab, model=model,
                     train=train, dpo=dpo, metrics=metrics, out_root=out_root)


def run_config_to_doc(rc: RunConfig) -> dict:
    """Fully materialized document; parsing it reproduces ``rc`` exactly."""

    def section(obj, *, exclude=()):
        out = {}
        for f in dataclasses.fields(type(obj)):
            if f.name in exclude:
                continue
            value = getattr(obj, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    world = section(rc.corpus.world)
    world["train_counts"] = dict(rc.corpus.train_counts)
    world["holdout_counts"] = dict(rc.corpus.holdout_counts)
    return {
        "seed": rc.seed,
        "world": world,
        "vocab": section(rc.vocab),
        "model": section(rc.model, exclude=("vocab",)),
        "train": section(rc.train, exclude=("seed",)),
        "dpo": section(rc.dpo),
        "metrics": section(rc.metrics),
        "paths": {"out_root": rc.out_root},
    }


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DomainError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc)


def save_run_config(rc: RunConfig, path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(run_config_to_doc(rc), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
