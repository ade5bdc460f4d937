"""Preference mining and direct preference optimization for the planner.

A scene's candidate plans are sampled from the pretrained policy at an
exploration temperature, scored, and distilled into one record: a pool of
up to five winners (best composite scores) and at most one targeted loser
per objective. Each loser fails exactly one axis while staying clean on
the others, so every pair isolates a single failure mode. The group loss
pushes the mean winner log-ratio above the mean loser log-ratio against a
frozen reference policy.

Log-probabilities entering the loss are always evaluated at temperature 1:
the sampling temperature shapes exploration only, not the policy
distribution being optimized.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .autodiff import (
    Tensor,
    add,
    log_sigmoid,
    neg,
    no_grad,
    scale,
    stack_scalars,
    tmean,
)
from .errors import DomainError, NumericalFailure
from .kinematics import EgoState
from .metrics import MetricConfig, SubScores, pdms, reference_progress, score_trajectory
from .planner import PlanResult, PlannerConfig, plan, sequence_logprob
from .training import AdamState, TrainConfig, clip_gradients, lr_schedule, \
    optimizer_step, zero_grads
from .world import Scene, TokenBundle, tokenize_scene

LOSER_OBJECTIVES = ("COLL", "DA", "EP", "TTC")
EP_ZERO_TOL = 0.05
PREFERENCE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Candidate:
    """A sampled plan with its scores; ``plan`` is dropped on serialization."""

    action_ids: tuple[int, ...]
    sub: SubScores
    pdms: float
    ref_logp: float | None = None
    plan: PlanResult | None = None


@dataclass(frozen=True)
class PreferenceRecord:
    scene_id: str
    winners: tuple[Candidate, ...]
    losers: dict[str, Candidate]
    sampler_seed: int | None = None

    def listed(self):
        """All candidates in a record, winners first, losers in key order."""
        return list(self.winners) + [self.losers[k] for k in sorted(self.losers)]


def sample_candidates(params: dict, scene: Scene, pcfg: PlannerConfig,
                      n: int = 128, temperature: float = 1.2,
                      rng: np.random.Generator | None = None,
                      mcfg: MetricConfig = MetricConfig(),
                      dt: float = 0.5, T: int = 8, n_map: int = 16,
                      ref_progress: float | None = None) -> list[Candidate]:
    """Draw and score n stochastic plans for one scene.

    Repeats are kept: duplicate samples are legitimate draws from the
    policy, and pruning them would bias the winner pool.
    """
    if temperature <= 0.0:
        raise DomainError("sampling temperature must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    bundle = tokenize_scene(scene, n_map=n_map, dt=dt)
    origin = EgoState(0.0, 0.0, scene.ego_init.v, 0.0, 0)
    if ref_progress is None:
        ref_progress = reference_progress(scene, dt, T)
    out = []
    for _ in range(n):
        p = plan(bundle, origin, params, pcfg, T, dt,
                 mode="sample", temperature=temperature, rng=rng)
        sub = score_trajectory(p.trajectory, scene, mcfg, ref_progress=ref_progress)
        out.append(Candidate(action_ids=tuple(p.action_ids), sub=sub,
                             pdms=pdms(sub, mcfg), plan=p))
    return out


def _loser_predicate(objective: str, sub: SubScores, ep_zero: float) -> bool:
    if objective == "COLL":
        return sub.nc == 0 and sub.dac == 1 and sub.ep < ep_zero and sub.ttc == 0
    if objective == "DA":
        return sub.nc == 1 and sub.dac == 0 and sub.ep < ep_zero and sub.ttc == 1
    if objective == "EP":
        return sub.nc == 1 and sub.dac == 1 and sub.ep < ep_zero and sub.ttc == 1
    if objective == "TTC":
        return sub.nc == 1 and sub.dac == 1 and sub.ttc == 0
    raise DomainError(f"unknown loser objective {objective!r}")


def build_preferences(candidates, scene_id: str,
                      ep_zero: float = EP_ZERO_TOL,
                      sampler_seed: int | None = None) -> PreferenceRecord | None:
    """Distill scored candidates into winners and targeted losers.

    Returns None (scene skipped) when no candidate matches any loser row,
    or when the best winner does not beat the best loser.
    """
    if not candidates:
        raise DomainError("cannot build preferences from zero candidates")
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i].pdms, i))
    winners = tuple(candidates[i] for i in order[:5])

    losers = {}
    for objective in LOSER_OBJECTIVES:
        matches = [i for i, c in enumerate(candidates)
                   if _loser_predicate(objective, c.sub, ep_zero)]
        if matches:
            best = min(matches, key=lambda i: (-candidates[i].pdms, i))
            losers[objective] = candidates[best]
    if not losers:
        return None
    best_loser = max(c.pdms for c in losers.values())
    if winners[0].pdms <= best_loser:
        return None
    return PreferenceRecord(scene_id=scene_id, winners=winners, losers=losers,
                            sampler_seed=sampler_seed)


def naive_pairs(candidates, scene_id: str,
                sampler_seed: int | None = None) -> PreferenceRecord | None:
    """Single-pair baseline: best candidate vs worst candidate.

    The loser is stored under the WORST key since it is selected by rank,
    not by an objective row. Skipped when best and worst scores coincide
    (no ordering signal).
    """
    if not candidates:
        raise DomainError("cannot build preferences from zero candidates")
    top = min(range(len(candidates)), key=lambda i: (-candidates[i].pdms, i))
    bottom = min(range(len(candidates)), key=lambda i: (candidates[i].pdms, i))
    if candidates[top].pdms <= candidates[bottom].pdms:
        return None
    return PreferenceRecord(scene_id=scene_id, winners=(candidates[top],),
                            losers={"WORST": candidates[bottom]},
                            sampler_seed=sampler_seed)


def attach_reference_logprobs(record: PreferenceRecord, bundle: TokenBundle,
                              v0: float, ref_params: dict, pcfg: PlannerConfig,
                              dt: float = 0.5) -> PreferenceRecord:
    """Store each listed trajectory's log-probability under the frozen reference."""
    origin = EgoState(0.0, 0.0, v0, 0.0, 0)

    def annotate(c: Candidate) -> Candidate:
        with no_grad():
            lp = sequence_logprob(bundle, np.asarray(c.action_ids), origin,
                                  ref_params, pcfg, dt)
        return dataclasses.replace(c, ref_logp=float(lp.item()))

    return dataclasses.replace(
        record,
        winners=tuple(annotate(c) for c in record.winners),
        losers={k: annotate(c) for k, c in record.losers.items()},
    )


def dpo_loss(policy_winners, policy_losers, ref_winners, ref_losers,
             beta: float) -> Tensor:
    """Group preference loss on full-sequence log-probabilities.

    The winner and loser log-ratio means are taken before the sigmoid, so
    one scalar margin per record drives the update.
    """
    if beta <= 0.0:
        raise DomainError("beta must be positive")
    if len(policy_winners) == 0 or len(policy_losers) == 0:
        raise DomainError("dpo_loss needs at least one winner and one loser")
    if len(policy_winners) != len(ref_winners) \
            or len(policy_losers) != len(ref_losers):
        raise DomainError("policy and reference log-probability counts differ")
    diff_w = [add(p, -float(r)) for p, r in zip(policy_winners, ref_winners)]
    diff_l = [add(p, -float(r)) for p, r in zip(policy_losers, ref_losers)]
    margin = add(tmean(stack_scalars(diff_w)), neg(tmean(stack_scalars(diff_l))))
    return neg(log_sigmoid(scale(margin, beta)))


def _record_terms(record: PreferenceRecord, bundle: TokenBundle, v0: float,
                  params: dict, pcfg: PlannerConfig, beta: float, dt: float):
    """Loss tensor plus the mean winner log-ratio for curve logging."""
    origin = EgoState(0.0, 0.0, v0, 0.0, 0)

    def policy_logps(cands):
        out = []
        for c in cands:
            if c.ref_logp is None:
                raise DomainError(
                    f"record {record.scene_id} lacks reference log-probabilities"
                )
            out.append(sequence_logprob(bundle, np.asarray(c.action_ids),
                                        origin, params, pcfg, dt))
        return out

    pw = policy_logps(record.winners)
    pl = policy_logps([record.losers[k] for k in sorted(record.losers)])
    rw = [c.ref_logp for c in record.winners]
    rl = [record.losers[k].ref_logp for k in sorted(record.losers)]
    loss = dpo_loss(pw, pl, rw, rl, beta)
    winner_ratio = float(np.mean([p.item() - r for p, r in zip(pw, rw)]))
    return loss, winner_ratio


def finetune(params: dict, records, scene_inputs: dict, pcfg: PlannerConfig,
             cfg: TrainConfig, beta: float = 0.1, heldout=None,
             curve_path=None, dt: float = 0.5) -> list[dict]:
    """Preference optimization over mined records; mutates params.

    ``scene_inputs`` maps scene_id to (TokenBundle, initial speed). The
    reference log-probabilities are read from the records, which the mining
    step froze before training started. ``heldout``, when given, is called
    with the current params once per epoch and its value logged.
    """
    if not records:
        raise DomainError("empty preference dataset")
    for rec in records:
        if rec.scene_id not in scene_inputs:
            raise DomainError(f"no scene inputs for record {rec.scene_id}")
    state = AdamState()
    rows = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng_mod.stream(cfg.seed, rng_mod.STAGE_DPO, epoch) \
            .permutation(len(records))
        loss_sum = 0.0
        ratio_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [records[i] for i in order[start:start + cfg.batch_size]]
            zero_grads(params)
            parts = []
            for rec in batch:
                bundle, v0 = scene_inputs[rec.scene_id]
                loss, ratio = _record_terms(rec, bundle, v0, params, pcfg,
                                            beta, dt)
                parts.append(loss)
                ratio_sum += ratio
            batch_loss = tmean(stack_scalars(parts))
            if not np.isfinite(batch_loss.item()):
                ids = [rec.scene_id for rec in batch]
                if curve_path is not None:
                    dump = str(curve_path) + ".nanbatch.json"
                    with open(dump, "w") as fh:
                        json.dump({"epoch": epoch, "scene_ids": ids}, fh)
                raise NumericalFailure(
                    f"non-finite preference loss at epoch {epoch}, scenes {ids}"
                )
            loss_sum += batch_loss.item() * len(batch)
            batch_loss.backward()
            clip_gradients(params, cfg.grad_clip_norm)
            optimizer_step(params, state, lr, cfg)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": loss_sum / len(records),
            "winner_ratio": ratio_sum / len(records),
            "heldout": float(heldout(params)) if heldout is not None else math.nan,
        }
        rows.append(row)
    if curve_path is not None:
        save_dpo_curve_csv(rows, curve_path)
    return rows


# ---------------------------------------------------------------------------
# Files

DPO_CURVE_HEADER = "epoch,lr,loss,winner_ratio,heldout"


def save_dpo_curve_csv(rows, path) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(DPO_CURVE_HEADER + "\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['lr']:.17g},{r['loss']:.17g},"
                     f"{r['winner_ratio']:.17g},{r['heldout']:.17g}\n")
    os.replace(tmp, path)


def load_dpo_curve_csv(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != DPO_CURVE_HEADER:
            raise DomainError(f"unexpected curve header in {path}: {header!r}")
        for line in fh:
            e, lr, loss, ratio, heldout = line.strip().split(",")
            rows.append({"epoch": int(e), "lr": float(lr), "loss": float(loss),
                         "winner_ratio": float(ratio), "heldout": float(heldout)})
    return rows


def _candidate_doc(c: Candidate) -> dict:
    return {
        "action_ids": [int(a) for a in c.action_ids],
        "sub": {"nc": c.sub.nc, "dac": c.sub.dac, "ttc": c.sub.ttc,
                "comfort": c.sub.comfort, "ep": c.sub.ep},
        "pdms": c.pdms,
        "ref_logp": c.ref_logp,
    }


def _candidate_from_doc(doc: dict) -> Candidate:
    sub = SubScores(nc=int(doc["sub"]["nc"]), dac=int(doc["sub"]["dac"]),
                    ttc=int(doc["sub"]["ttc"]), comfort=int(doc["sub"]["comfort"]),
                    ep=float(doc["sub"]["ep"]))
    ref = doc["ref_logp"]
    return Candidate(action_ids=tuple(int(a) for a in doc["action_ids"]),
                     sub=sub, pdms=float(doc["pdms"]),
                     ref_logp=None if ref is None else float(ref))


def save_preferences(path, records) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as fh:
        for rec in records:
            doc = {
                "schema_version": PREFERENCE_SCHEMA_VERSION,
                "scene_id": rec.scene_id,
                "sampler_seed": rec.sampler_seed,
                "winners": [_candidate_doc(c) for c in rec.winners],
                "losers": {k: _candidate_doc(c) for k, c in rec.losers.items()},
            }
            fh.write(json.dumps(doc, sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_preferences(path) -> list[PreferenceRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            if doc.get("schema_version") != PREFERENCE_SCHEMA_VERSION:
                raise DomainError(
                    f"unsupported preference schema {doc.get('schema_version')!r}"
                )
            records.append(PreferenceRecord(
                scene_id=doc["scene_id"],
                winners=tuple(_candidate_from_doc(d) for d in doc["winners"]),
                losers={k: _candidate_from_doc(d) for k, d in doc["losers"].items()},
                sampler_seed=doc["sampler_seed"],
            ))
    return records
