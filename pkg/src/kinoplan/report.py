"""SVG rendering for run artifacts: curves, score overlays, scene views.

Every figure is written through one choke point that pins the backend,
the SVG hash salt, and empty date metadata, so re-rendering the same
inputs produces byte-identical files. Rendering takes plain rows and
domain objects; reading the artifact files and deciding what exists is
the caller's job.
"""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Polygon as MplPolygon

from .errors import DomainError
from .kinematics import Trajectory, express_in_frame
from .world import Scene

plt.rcParams["svg.hashsalt"] = "kinoplan"

MODEL_STYLES = {
    "expert": {"color": "black", "linestyle": "--"},
    "untrained": {"color": "0.55", "linestyle": "-"},
    "pretrain": {"color": "tab:blue", "linestyle": "-"},
    "dpo": {"color": "tab:red", "linestyle": "-"},
    "dpo_naive": {"color": "tab:orange", "linestyle": "-"},
}


def _style(label: str) -> dict:
    return dict(MODEL_STYLES.get(label, {"color": "tab:green"}))


def _save(fig, path) -> None:
    tmp = str(path) + ".tmp"
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)


def render_pretrain_curves(rows, path) -> None:
    """Cross-entropy and argmax accuracy per epoch on twin axes."""
    if not rows:
        raise DomainError("no pretraining curve rows to plot")
    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(epochs, [r["ce"] for r in rows], color="tab:blue",
            label="cross-entropy")
    ax.plot(epochs, [r["aux"] for r in rows], color="tab:cyan",
            label="map-token auxiliary")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_ylim(bottom=0.0)
    twin = ax.twinx()
    twin.plot(epochs, [r["acc"] for r in rows], color="tab:green",
              label="argmax accuracy")
    twin.set_ylabel("accuracy")
    twin.set_ylim(0.0, 1.0)
    handles = ax.get_lines() + twin.get_lines()
    ax.legend(handles, [h.get_label() for h in handles], loc="center right",
              fontsize=8)
    ax.set_title("Imitation pretraining")
    fig.tight_layout()
    _save(fig, path)


def render_dpo_overlay(curves: dict, baselines: dict, path) -> None:
    """Held-out composite score per fine-tuning epoch, one line per run.

    ``curves`` maps run label to fine-tuning curve rows; epochs whose
    held-out column is NaN (not probed) are skipped. ``baselines`` maps
    label to a constant score drawn as a horizontal reference line.
    """
    if not curves:
        raise DomainError("no fine-tuning curves to plot")
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label in sorted(curves):
        pts = [(r["epoch"], r["heldout"]) for r in curves[label]
               if not math.isnan(r["heldout"])]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                markersize=3, label=label, **_style(label))
    for label in sorted(baselines):
        ax.axhline(baselines[label], linewidth=1.0, alpha=0.7,
                   label=label, **_style(label))
    ax.set_xlabel("fine-tuning epoch")
    ax.set_ylabel("held-out mean composite score")
    ax.set_title("Preference fine-tuning progression")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def render_dpo_loss_curves(curves: dict, path) -> None:
    """Training loss and winner log-ratio per epoch for each run."""
    if not curves:
        raise DomainError("no fine-tuning curves to plot")
    fig, (ax_loss, ax_ratio) = plt.subplots(1, 2, figsize=(9.6, 4.0))
    for label in sorted(curves):
        rows = curves[label]
        epochs = [r["epoch"] for r in rows]
        ax_loss.plot(epochs, [r["loss"] for r in rows], label=label,
                     **_style(label))
        ax_ratio.plot(epochs, [r["winner_ratio"] for r in rows], label=label,
                      **_style(label))
    ax_loss.axhline(math.log(2.0), color="0.7", linewidth=0.8)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("preference loss")
    ax_loss.legend(fontsize=8)
    ax_ratio.axhline(0.0, color="0.7", linewidth=0.8)
    ax_ratio.set_xlabel("epoch")
    ax_ratio.set_ylabel("mean winner log-ratio")
    fig.tight_layout()
    _save(fig, path)


def render_scene_top_down(scene: Scene, trajectories: dict, path,
                          title: str = "") -> None:
    """Bird's-eye view: corridor, agent tracks, and planned paths.

    ``trajectories`` maps label to a planning-frame Trajectory (origin at
    the scene's initial ego pose); each is lifted to world coordinates.
    Agents draw their footprint at the first step and a center-point trail
    for the scripted future.
    """
    fig, ax = plt.subplots(figsize=(6.4, 6.4))
    ax.add_patch(MplPolygon(scene.corridor, closed=True, facecolor="0.92",
                            edgecolor="0.4", linewidth=1.0, zorder=0))
    ax.plot(scene.centerline[:, 0], scene.centerline[:, 1], color="0.6",
            linestyle=":", linewidth=1.0, zorder=1, label="route")

    for track in scene.agents:
        x, y, heading = track.poses[0]
        ax.add_patch(MplPolygon(_footprint(x, y, heading, track.length,
                                           track.width),
                                closed=True, facecolor="tab:purple",
                                edgecolor="none", alpha=0.5, zorder=2))
        ax.plot(track.poses[:, 0], track.poses[:, 1], color="tab:purple",
                linewidth=0.8, alpha=0.6, zorder=2)

    for label in sorted(trajectories):
        world = express_in_frame(trajectories[label], scene.ego_init)
        xs = [s.x for s in world.states]
        ys = [s.y for s in world.states]
        ax.plot(xs, ys, marker="o", markersize=2.5, label=label,
                zorder=3, **_style(label))
    ax.plot(scene.ego_init.x, scene.ego_init.y, marker="^", markersize=9,
            color="black", zorder=4)

    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(title or f"{scene.kind} (seed {scene.seed})")
    ax.legend(fontsize=8, loc="best")
    fig.tight_layout()
    _save(fig, path)


def _footprint(x: float, y: float, heading: float, length: float,
               width: float) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    half = np.array([[length / 2, width / 2], [length / 2, -width / 2],
                     [-length / 2, -width / 2], [-length / 2, width / 2]])
    rot = half @ np.array([[c, s], [-s, c]])
    return rot + np.array([x, y])


SUMMARY_HEADER = "model,count,nc,dac,ttc,comfort,ep,pdms"


def write_summary_table(summaries: dict, csv_path, md_path) -> None:
    """Evaluation summary across models as CSV plus an aligned text table.

    ``summaries`` maps model label to the summary dict produced by the
    metric suite (percent means plus a scene count).
    """
    if not summaries:
        raise DomainError("no evaluation summaries to tabulate")
    cols = ("nc", "dac", "ttc", "comfort", "ep", "pdms")
    tmp = str(csv_path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        for model in sorted(summaries):
            s = summaries[model]
            vals = ",".join(f"{s[c]:.2f}" for c in cols)
            fh.write(f"{model},{s['count']},{vals}\n")
    os.replace(tmp, csv_path)

    names = ["model", "scenes"] + [c.upper() for c in cols]
    rows = []
    for model in sorted(summaries):
        s = summaries[model]
        rows.append([model, str(s["count"])] + [f"{s[c]:.2f}" for c in cols])
    widths = [max(len(n), *(len(r[i]) for r in rows))
              for i, n in enumerate(names)]
    lines = [
        " | ".join(n.ljust(w) for n, w in zip(names, widths)),
        "-|-".join("-" * w for w in widths),
    ]
    for r in rows:
        lines.append(" | ".join(v.ljust(w) for v, w in zip(r, widths)))
    tmp = str(md_path) + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, md_path)
