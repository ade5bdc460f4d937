"""Command-line pipeline driver.

Subcommands compose through fixed file names under the configured output
root:

  gen-data       train and held-out scene corpora with expert trajectories
  derive-labels  inverse-label expert trajectories into action ids
  pretrain       imitation training; writes checkpoint and learning curve
  sample-prefs   sample candidate plans, mine preference records
  dpo            preference fine-tuning (--naive runs the single-pair
                 baseline from the same mined candidates)
  eval           score greedy plans (or the stored expert) on a split
  report         render SVG figures and the evaluation summary table

Every command echoes the fully materialized config into its output
directory and appends one timestamped line to a run.log sidecar; all other
outputs are deterministic for a given config and seed, and are written
atomically. Errors print a single line to stderr shaped
``kinoplan: <kind>: <message>`` and exit 2 (config), 3 (missing input), or
4 (numerical failure). Per-scene work honors --jobs (or the KINOPLAN_JOBS
environment variable) via a process pool.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import rng as rng_mod
from .action_space import decode, derive_labels, save_labels_csv
from .config import (
    CONFIG_ECHO,
    DATA_DIR,
    DPO_DIR,
    DPO_NAIVE_DIR,
    EVAL_DIR,
    HOLDOUT_SEED_OFFSET,
    HOLDOUT_SPLIT,
    LABELS_DIR,
    PREFS_DIR,
    PRETRAIN_DIR,
    REPORT_DIR,
    RUN_LOG,
    TRAIN_SPLIT,
    RunConfig,
    load_run_config,
    parse_run_config,
    run_config_to_doc,
    save_run_config,
)
from .errors import (
    DomainError,
    KinoplanError,
    MissingInputError,
    NumericalFailure,
)
from .kinematics import EgoState, Trajectory, advance, load_trajectory_csv
from .metrics import (
    pdms,
    reference_progress,
    save_eval_csv,
    save_summary_json,
    score_trajectory,
    summarize_eval,
)
from .planner import init_params, load_checkpoint, plan, save_checkpoint
from .preference import (
    attach_reference_logprobs,
    build_preferences,
    finetune,
    load_dpo_curve_csv,
    load_preferences,
    naive_pairs,
    sample_candidates,
    save_preferences,
)
from .report import (
    render_dpo_loss_curves,
    render_dpo_overlay,
    render_pretrain_curves,
    render_scene_top_down,
    write_summary_table,
)
from .training import build_dataset, fit, load_curve_csv
from .world import generate_corpus, load_manifest, load_scene, tokenize_scene

MODEL_CHOICES = ("expert", "untrained", "pretrain", "dpo", "dpo-naive")


def naive_derive_labels(gt: Trajectory, cfg, horizon: int = 3) -> list[int]:
    """Loop-based reimplementation of the exhaustive inverse labeler.

    Deliberately dumb: one action at a time, one rollout step at a time,
    plain float accumulation. Exists solely to cross-check the vectorized
    production labeler (--oracle-check), so it shares no batch code with it.
    """
    n_steps = len(gt.states) - 1
    if n_steps < 1:
        raise DomainError("naive labeler needs at least two waypoints")
    current = gt.states[0]
    labels = []
    for i in range(n_steps):
        lookahead = min(horizon, n_steps - i)
        best_id = -1
        best_cost = math.inf
        for action_id in range(cfg.vocab_size):
            action = decode(action_id, cfg)
            state = current
            cost = 0.0
            for j in range(lookahead):
                state = advance(state, action, gt.dt)
                target = gt.states[i + 1 + j]
                cost += (state.x - target.x) ** 2 + (state.y - target.y) ** 2
            if cost < best_cost:  # strict: ties keep the lowest id
                best_cost = cost
                best_id = action_id
        labels.append(best_id)
        current = advance(current, decode(best_id, cfg), gt.dt)
    return labels


# ---------------------------------------------------------------------------
# Shared plumbing


def _require(path) -> str:
    if not os.path.exists(path):
        raise MissingInputError(str(path))
    return str(path)


def _stage_dir(rc: RunConfig, *parts) -> str:
    d = rc.path(*parts)
    os.makedirs(d, exist_ok=True)
    return d


def _finish_stage(rc: RunConfig, stage_dir: str, command: str,
                  t0: float) -> None:
    """Config echo plus the timestamped sidecar line (the one place where
    wall-clock time may appear)."""
    save_run_config(rc, os.path.join(stage_dir, CONFIG_ECHO))
    stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    with open(os.path.join(stage_dir, RUN_LOG), "a") as fh:
        fh.write(f"{stamp} {command} {time.perf_counter() - t0:.1f}s\n")


def _origin(scene) -> EgoState:
    return EgoState(0.0, 0.0, scene.ego_init.v, 0.0, 0)


def _manifest_items(corpus_dir: str) -> list[tuple[int, str, str, str]]:
    """(index, scene path, trajectory path, scene_id) per manifest row."""
    _require(os.path.join(corpus_dir, "manifest.jsonl"))
    items = []
    for i, rec in enumerate(load_manifest(corpus_dir)):
        sid = rec["scene_id"]
        items.append((i, os.path.join(corpus_dir, rec["file"]),
                      os.path.join(corpus_dir, "trajectories", f"{sid}.csv"),
                      sid))
    return items


_WORKER: dict = {}


def _init_worker(doc: dict, checkpoint: str | None, oracle: bool = False):
    """Per-process state for scene-parallel commands.

    ``checkpoint`` selects the planner parameters: a file path loads that
    checkpoint, "untrained" initializes fresh from the config seed, and
    None skips parameter setup (label derivation needs none).
    """
    rc = parse_run_config(doc)
    _WORKER.clear()
    _WORKER["rc"] = rc
    _WORKER["oracle"] = oracle
    if checkpoint == "untrained":
        _WORKER["params"] = init_params(rc.model, rc.seed)
        _WORKER["pcfg"] = rc.model
    elif checkpoint is not None:
        params, pcfg, _ = load_checkpoint(checkpoint)
        _WORKER["params"] = params
        _WORKER["pcfg"] = pcfg


def _scene_map(fn, items, jobs: int, initargs: tuple) -> list:
    if jobs <= 1:
        _init_worker(*initargs)
        return [fn(item) for item in items]
    chunk = max(1, math.ceil(len(items) / (jobs * 4)))
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=initargs) as ex:
        return list(ex.map(fn, items, chunksize=chunk))


def _strip_plans(record):
    return dataclasses.replace(
        record,
        winners=tuple(dataclasses.replace(c, plan=None)
                      for c in record.winners),
        losers={k: dataclasses.replace(c, plan=None)
                for k, c in record.losers.items()},
    )


# ---------------------------------------------------------------------------
# Per-scene workers (top level, so they pickle)


def _labels_worker(item):
    idx, scene_path, traj_path, sid = item
    rc = _WORKER["rc"]
    traj = load_trajectory_csv(traj_path, dt=rc.corpus.world.dt)
    labels = derive_labels(traj, rc.vocab)
    if _WORKER["oracle"]:
        check = naive_derive_labels(traj, rc.vocab)
        if check != labels:
            raise NumericalFailure(
                f"labeler oracle mismatch on {sid}: {labels} vs {check}")
    return sid, labels


def _prefs_worker(item):
    idx, scene_path, traj_path, sid = item
    rc = _WORKER["rc"]
    wcfg = rc.corpus.world
    params, pcfg = _WORKER["params"], _WORKER["pcfg"]
    scene = load_scene(scene_path)
    rng = rng_mod.stream(rc.seed, rng_mod.STAGE_SAMPLE, idx)
    cands = sample_candidates(
        params, scene, pcfg, n=rc.dpo.n_candidates,
        temperature=rc.dpo.temperature, rng=rng, mcfg=rc.metrics,
        dt=wcfg.dt, T=wcfg.T, n_map=wcfg.n_map)
    bundle = tokenize_scene(scene, n_map=wcfg.n_map, dt=wcfg.dt)
    out = []
    for rec in (build_preferences(cands, sid, ep_zero=rc.dpo.ep_zero,
                                  sampler_seed=idx),
                naive_pairs(cands, sid, sampler_seed=idx)):
        if rec is not None:
            rec = attach_reference_logprobs(rec, bundle, scene.ego_init.v,
                                            params, pcfg, dt=wcfg.dt)
            rec = _strip_plans(rec)
        out.append(rec)
    return out[0], out[1]


def _eval_worker(item):
    idx, scene_path, traj_path, sid = item
    rc = _WORKER["rc"]
    wcfg = rc.corpus.world
    scene = load_scene(scene_path)
    ref = reference_progress(scene, wcfg.dt, wcfg.T)
    if "params" not in _WORKER:
        traj = load_trajectory_csv(traj_path, dt=wcfg.dt)
    else:
        bundle = tokenize_scene(scene, n_map=wcfg.n_map, dt=wcfg.dt)
        traj = plan(bundle, _origin(scene), _WORKER["params"],
                    _WORKER["pcfg"], wcfg.T, wcfg.dt).trajectory
    sub = score_trajectory(traj, scene, rc.metrics, ref_progress=ref)
    return sid, sub, pdms(sub, rc.metrics)


# ---------------------------------------------------------------------------
# Commands


def _cmd_gen_data(rc: RunConfig, args, jobs: int) -> None:
    t0 = time.perf_counter()
    wcfg = rc.corpus.world
    train = generate_corpus(_stage_dir(rc, DATA_DIR, TRAIN_SPLIT), rc.seed,
                            rc.corpus.train_counts, wcfg)
    hold = generate_corpus(_stage_dir(rc, DATA_DIR, HOLDOUT_SPLIT),
                           rc.seed + HOLDOUT_SEED_OFFSET,
                           rc.corpus.holdout_counts, wcfg)
    data_dir = rc.path(DATA_DIR)
    _finish_stage(rc, data_dir, "gen-data", t0)
    print(f"gen-data: {len(train)} train and {len(hold)} holdout scenes "
          f"under {data_dir}")


def _cmd_derive_labels(rc: RunConfig, args, jobs: int) -> None:
    t0 = time.perf_counter()
    items = _manifest_items(rc.split_dir(TRAIN_SPLIT))
    doc = run_config_to_doc(rc)
    results = _scene_map(_labels_worker, items, jobs,
                         (doc, None, args.oracle_check))
    rows = [(sid, k, action_id) for sid, labels in results
            for k, action_id in enumerate(labels)]
    out_dir = _stage_dir(rc, LABELS_DIR)
    tmp = rc.labels_path() + ".tmp"
    save_labels_csv(tmp, rows)
    os.replace(tmp, rc.labels_path())
    _finish_stage(rc, out_dir, "derive-labels", t0)
    checked = " (oracle-checked)" if args.oracle_check else ""
    print(f"derive-labels: {len(results)} scenes, {len(rows)} labels"
          f"{checked} -> {rc.labels_path()}")


def _cmd_pretrain(rc: RunConfig, args, jobs: int) -> None:
    t0 = time.perf_counter()
    train_dir = rc.split_dir(TRAIN_SPLIT)
    _require(os.path.join(train_dir, "manifest.jsonl"))
    _require(rc.labels_path())
    wcfg = rc.corpus.world
    dataset = build_dataset(train_dir, rc.labels_path(), rc.vocab,
                            n_map=wcfg.n_map, dt=wcfg.dt)
    params = init_params(rc.model, rc.seed)
    out_dir = _stage_dir(rc, PRETRAIN_DIR)
    rows = fit(dataset, params, rc.model, rc.train,
               curve_path=rc.curve_path(PRETRAIN_DIR))
    save_checkpoint(rc.checkpoint_path(PRETRAIN_DIR), params, rc.model,
                    extra={"stage": "pretrain", "seed": rc.seed})
    _finish_stage(rc, out_dir, "pretrain", t0)
    final = rows[-1]
    print(f"pretrain: {len(dataset)} examples, {len(rows)} epochs, "
          f"final ce {final['ce']:.4f} acc {final['acc']:.3f}")


def _cmd_sample_prefs(rc: RunConfig, args, jobs: int) -> None:
    t0 = time.perf_counter()
    items = _manifest_items(rc.split_dir(TRAIN_SPLIT))
    checkpoint = _require(rc.checkpoint_path(PRETRAIN_DIR))
    doc = run_config_to_doc(rc)
    results = _scene_map(_prefs_worker, items, jobs, (doc, checkpoint))
    multi = [r for r, _ in results if r is not None]
    naive = [r for _, r in results if r is not None]
    out_dir = _stage_dir(rc, PREFS_DIR)
    save_preferences(rc.prefs_path(naive=False), multi)
    save_preferences(rc.prefs_path(naive=True), naive)
    _finish_stage(rc, out_dir, "sample-prefs", t0)
    print(f"sample-prefs: {len(items)} scenes -> {len(multi)} multipair "
          f"and {len(naive)} naive records")


def _heldout_prober(rc: RunConfig, pcfg):
    """Mean composite score of greedy plans on the held-out corpus,
    probed on the configured epoch stride (NaN in between)."""
    every = rc.dpo.heldout_every
    if every == 0:
        return None
    wcfg = rc.corpus.world
    prepared = []
    for _, scene_path, _, sid in _manifest_items(rc.split_dir(HOLDOUT_SPLIT)):
        scene = load_scene(scene_path)
        prepared.append((scene, tokenize_scene(scene, n_map=wcfg.n_map,
                                               dt=wcfg.dt),
                         reference_progress(scene, wcfg.dt, wcfg.T)))
    state = {"epoch": -1}

    def probe(params) -> float:
        state["epoch"] += 1
        epoch = state["epoch"]
        if epoch % every and epoch != rc.dpo.epochs - 1:
            return math.nan
        scores = []
        for scene, bundle, ref in prepared:
            traj = plan(bundle, _origin(scene), params, pcfg, wcfg.T,
                        wcfg.dt).trajectory
            sub = score_trajectory(traj, scene, rc.metrics, ref_progress=ref)
            scores.append(pdms(sub, rc.metrics))
        return float(np.mean(scores))

    return probe


def _cmd_dpo(rc: RunConfig, args, jobs: int) -> None:
    t0 = time.perf_counter()
    stage = DPO_NAIVE_DIR if args.naive else DPO_DIR
    checkpoint = _require(rc.checkpoint_path(PRETRAIN_DIR))
    prefs_path = _require(rc.prefs_path(naive=args.naive))
    records = load_preferences(prefs_path)
    if not records:
        raise DomainError(f"no preference records in {prefs_path}; "
                          "the sampler skipped every scene")
    params, pcfg, _ = load_checkpoint(checkpoint)
    if pcfg != rc.model:
        raise DomainError("checkpoint planner config differs from the run "
                          "config model section")
    wcfg = rc.corpus.world
    by_id = {sid: scene_path for _, scene_path, _, sid
             in _manifest_items(rc.split_dir(TRAIN_SPLIT))}
    scene_inputs = {}
    for rec in records:
        if rec.scene_id not in by_id:
            raise DomainError(f"preference record {rec.scene_id} is not in "
                              "the train manifest")
        scene = load_scene(by_id[rec.scene_id])
        scene_inputs[rec.scene_id] = (
            tokenize_scene(scene, n_map=wcfg.n_map, dt=wcfg.dt),
            scene.ego_init.v)
    probe = _heldout_prober(rc, pcfg)
    out_dir = _stage_dir(rc, stage)
    rows = finetune(params, records, scene_inputs, pcfg,
                    rc.dpo.train_config(rc.seed), beta=rc.dpo.beta,
                    heldout=probe, curve_path=rc.curve_path(stage),
                    dt=wcfg.dt)
    save_checkpoint(rc.checkpoint_path(stage), params, pcfg,
                    extra={"stage": stage, "seed": rc.seed})
    _finish_stage(rc, out_dir, "dpo --naive" if args.naive else "dpo", t0)
    final = rows[-1]
    held = "" if math.isnan(final["heldout"]) \
        else f" heldout {final['heldout']:.4f}"
    print(f"{stage}: {len(records)} records, {len(rows)} epochs, final loss "
          f"{final['loss']:.4f} winner-ratio {final['winner_ratio']:.4f}"
          f"{held}")


def _cmd_eval(rc: RunConfig, args, jobs: int) -> None:
    t0 = time.perf_counter()
    label = args.model.replace("-", "_")
    items = _manifest_items(rc.split_dir(args.split))
    if args.model == "expert":
        checkpoint = None
    elif args.model == "untrained":
        checkpoint = "untrained"
    else:
        stage = {"pretrain": PRETRAIN_DIR, "dpo": DPO_DIR,
                 "dpo-naive": DPO_NAIVE_DIR}[args.model]
        checkpoint = _require(rc.checkpoint_path(stage))
    doc = run_config_to_doc(rc)
    rows = _scene_map(_eval_worker, items, jobs, (doc, checkpoint))
    out_dir = _stage_dir(rc, EVAL_DIR)
    save_eval_csv(rc.eval_csv_path(label, args.split), rows)
    summary = summarize_eval(rows)
    save_summary_json(rc.eval_summary_path(label, args.split), summary)
    _finish_stage(rc, out_dir, f"eval --model {args.model}", t0)
    print(f"eval[{args.model}/{args.split}]: pdms {summary['pdms']:.2f} "
          f"over {summary['count']} scenes")


def _cmd_report(rc: RunConfig, args, jobs: int) -> None:
    t0 = time.perf_counter()
    split = args.split
    models = ("expert", "untrained", "pretrain", "dpo", "dpo_naive")
    summaries = {}
    for model in models:
        path = _require(rc.eval_summary_path(model, split))
        with open(path) as fh:
            summaries[model] = json.load(fh)
    pretrain_rows = load_curve_csv(_require(rc.curve_path(PRETRAIN_DIR)))
    curves = {
        "dpo": load_dpo_curve_csv(_require(rc.curve_path(DPO_DIR))),
        "dpo_naive": load_dpo_curve_csv(_require(rc.curve_path(DPO_NAIVE_DIR))),
    }
    ck_pre = _require(rc.checkpoint_path(PRETRAIN_DIR))
    ck_dpo = _require(rc.checkpoint_path(DPO_DIR))
    items = _manifest_items(rc.split_dir(split))

    out_dir = _stage_dir(rc, REPORT_DIR)
    render_pretrain_curves(pretrain_rows,
                           os.path.join(out_dir, "pretrain_curve.svg"))
    baselines = {m: summaries[m]["pdms"] / 100.0
                 for m in ("untrained", "pretrain")}
    render_dpo_overlay(curves, baselines,
                       os.path.join(out_dir, "dpo_progress.svg"))
    render_dpo_loss_curves(curves, os.path.join(out_dir, "dpo_losses.svg"))
    write_summary_table(summaries, os.path.join(out_dir, "summary.csv"),
                        os.path.join(out_dir, "summary.md"))

    wcfg = rc.corpus.world
    planners = [("pretrain", *load_checkpoint(ck_pre)[:2]),
                ("dpo", *load_checkpoint(ck_dpo)[:2])]
    n_render = min(args.render_scenes, len(items))
    for _, scene_path, traj_path, sid in items[:n_render]:
        scene = load_scene(scene_path)
        trajs = {"expert": load_trajectory_csv(traj_path, dt=wcfg.dt)}
        for name, params, pcfg in planners:
            bundle = tokenize_scene(scene, n_map=wcfg.n_map, dt=wcfg.dt)
            trajs[name] = plan(bundle, _origin(scene), params, pcfg,
                               wcfg.T, wcfg.dt).trajectory
        render_scene_top_down(scene, trajs,
                              os.path.join(out_dir, f"{sid}.svg"),
                              title=f"{sid} ({scene.kind})")
    _finish_stage(rc, out_dir, "report", t0)
    print(f"report: 3 figure files, {n_render} scene renders, and the "
          f"summary table under {out_dir}")


# ---------------------------------------------------------------------------
# Entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise DomainError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kinoplan",
                description="Driving-planner pipeline: data, training, "
                            "preference fine-tuning, evaluation, reports.")
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--out", help="override paths.out_root from the config")
    p.add_argument("--jobs", type=int, default=None,
                   help="process count for per-scene work "
                        "(default: KINOPLAN_JOBS or 1)")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate scene corpora")
    d = sub.add_parser("derive-labels", help="derive action-id labels")
    d.add_argument("--oracle-check", action="store_true",
                   help="cross-check every scene against the naive labeler")
    sub.add_parser("pretrain", help="imitation pretraining")
    sub.add_parser("sample-prefs", help="mine preference records")
    dp = sub.add_parser("dpo", help="preference fine-tuning")
    dp.add_argument("--naive", action="store_true",
                    help="single best-vs-worst pair baseline")
    ev = sub.add_parser("eval", help="score plans on a split")
    ev.add_argument("--model", required=True, choices=MODEL_CHOICES)
    ev.add_argument("--split", default=HOLDOUT_SPLIT,
                    choices=(TRAIN_SPLIT, HOLDOUT_SPLIT))
    rp = sub.add_parser("report", help="render figures and summary table")
    rp.add_argument("--split", default=HOLDOUT_SPLIT,
                    choices=(TRAIN_SPLIT, HOLDOUT_SPLIT))
    rp.add_argument("--render-scenes", type=int, default=3,
                    help="number of top-down scene figures")
    return p


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "derive-labels": _cmd_derive_labels,
    "pretrain": _cmd_pretrain,
    "sample-prefs": _cmd_sample_prefs,
    "dpo": _cmd_dpo,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def _fail(kind: str, message: str, code: int) -> int:
    line = " ".join(str(message).split()) or kind
    print(f"kinoplan: {kind}: {line}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        if args.jobs is not None:
            jobs = args.jobs
        else:
            raw = os.environ.get("KINOPLAN_JOBS", "1")
            try:
                jobs = int(raw)
            except ValueError:
                raise DomainError(
                    f"KINOPLAN_JOBS must be an integer, got {raw!r}") from None
        if jobs < 1:
            raise DomainError(f"--jobs must be >= 1, got {jobs}")
        try:
            rc = load_run_config(args.config)
        except FileNotFoundError:
            raise MissingInputError(args.config) from None
        if args.out:
            rc = dataclasses.replace(rc, out_root=args.out)
        _HANDLERS[args.command](rc, args, jobs)
    except MissingInputError as exc:
        return _fail("missing-input", str(exc), 3)
    except FileNotFoundError as exc:
        return _fail("missing-input", exc.filename or str(exc), 3)
    except NumericalFailure as exc:
        return _fail("numerical-failure", str(exc), 4)
    except KinoplanError as exc:
        return _fail("config-error", str(exc), 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
