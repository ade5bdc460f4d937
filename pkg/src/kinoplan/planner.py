"""Autoregressive action planner over scene tokens.

The pipeline per planning step: a learnable ego query cross-attends over the
embedded scene tokens once, producing a single contextualized ego vector;
each future step adds an embedding of the predicted kinematic state to form
a prospective token; the prospective token attends into a bank of 16 shared
learnable key-value pairs (the alignment memory); a small causal
transformer decodes the aligned token sequence and a linear head scores
every discrete action. Inference advances the state with the closed-form
kinematics after each committed action and recomputes the decoder prefix,
so emitted trajectories are reachable by construction.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .action_space import VocabConfig, decode, relabel_trajectory
from .autodiff import (
    Tensor,
    add,
    add_bias,
    attention,
    concat_rows,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    no_grad,
    softmax,
    take_rows,
    transpose,
)
from .errors import DomainError
from .kinematics import EgoState, Trajectory, advance
from .world import TokenBundle

CHECKPOINT_MAGIC = b"KINOPLAN\n"
CHECKPOINT_VERSION = 1

# Fixed input scaling applied before the affine embedders. Raw features mix
# meters (tens), meters/second (order ten), and unit-scale flags; without
# rescaling the position terms dominate every dot product and the attention
# layers start out saturated.
ENV_FEATURE_SCALE = np.array(
    [1.0, 1.0, 1.0, 1 / 20.0, 1 / 20.0, 1 / 10.0, 1 / 10.0, 1.0, 1.0, 1 / 5.0, 1 / 5.0]
)
EGO_FEATURE_SCALE = np.array([1 / 10.0, 1.0, 1 / 4.0, 1.0, 1 / 10.0])
STATE_FEATURE_SCALE = np.array([1 / 20.0, 1 / 20.0, 1 / 10.0, 1.0])


@dataclass(frozen=True)
class PlannerConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 256
    n_memory: int = 16
    memory_residual: bool = True
    use_memory: bool = True
    env_dim: int = 11
    cmd_dim: int = 3
    ego_dim: int = 5
    state_dim: int = 4
    vocab: VocabConfig = field(default_factory=VocabConfig)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise DomainError("d_model must divide evenly into heads")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "n_heads": self.n_heads,
            "n_layers": self.n_layers, "ffn_dim": self.ffn_dim,
            "n_memory": self.n_memory, "memory_residual": self.memory_residual,
            "use_memory": self.use_memory, "env_dim": self.env_dim,
            "cmd_dim": self.cmd_dim, "ego_dim": self.ego_dim,
            "state_dim": self.state_dim,
            "vocab": {
                "accel_bins": self.vocab.accel_bins,
                "accel_range": list(self.vocab.accel_range),
                "yaw_bins": self.vocab.yaw_bins,
                "yaw_range": list(self.vocab.yaw_range),
            },
        }

    @staticmethod
    def from_dict(doc: dict) -> "PlannerConfig":
        v = doc["vocab"]
        vocab = VocabConfig(
            accel_bins=v["accel_bins"], accel_range=tuple(v["accel_range"]),
            yaw_bins=v["yaw_bins"], yaw_range=tuple(v["yaw_range"]),
        )
        keys = {k: doc[k] for k in doc if k != "vocab"}
        return PlannerConfig(vocab=vocab, **keys)


@dataclass(frozen=True)
class PlanResult:
    action_ids: tuple[int, ...]
    step_logprobs: tuple[float, ...]
    trajectory: Trajectory
    total_logprob: float


def _affine_shapes(cfg: PlannerConfig) -> dict[str, tuple]:
    d, v = cfg.d_model, cfg.vocab.vocab_size
    shapes: dict[str, tuple] = {
        "emb_env_w": (cfg.env_dim, d), "emb_env_b": (d,),
        "emb_cmd_w": (cfg.cmd_dim, d), "emb_cmd_b": (d,),
        "emb_ego_w": (cfg.ego_dim, d), "emb_ego_b": (d,),
        "prosp_w": (cfg.state_dim, d), "prosp_b": (d,),
        "ego_query": (1, d),
        "ctx_wq": (d, d), "ctx_bq": (d,),
        "ctx_wk": (d, d), "ctx_bk": (d,),
        "ctx_wv": (d, d), "ctx_bv": (d,),
        "ctx_wo": (d, d), "ctx_bo": (d,),
        "tisa_k": (cfg.n_memory, d), "tisa_v": (cfg.n_memory, d),
        "lnf_g": (d,), "lnf_b": (d,),
        "action_w": (d, v), "action_b": (v,),
        "aux_w": (d, 2), "aux_b": (2,),
    }
    for i in range(cfg.n_layers):
        p = f"dec{i}_"
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "ffn_w1": (d, cfg.ffn_dim), p + "ffn_b1": (cfg.ffn_dim,),
            p + "ffn_w2": (cfg.ffn_dim, d), p + "ffn_b2": (d,),
        })
    return shapes


def init_params(cfg: PlannerConfig, seed: int) -> dict[str, Tensor]:
    """Affine weights from U(+-1/sqrt(fan_in)); zero biases, unit LN gains."""
    r = rng_mod.stream(seed, rng_mod.STAGE_INIT)
    params = {}
    for name, shape in _affine_shapes(cfg).items():
        if name.endswith("_g"):
            data = np.ones(shape)
        elif name.endswith(("_b", "_b1", "_b2")) or name.endswith(("bq", "bk", "bv", "bo")):
            data = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            if name in ("ego_query", "tisa_k", "tisa_v"):
                fan_in = cfg.d_model
            bound = 1.0 / np.sqrt(fan_in)
            data = r.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def _head_slices(d: int, n_heads: int) -> list[np.ndarray]:
    dh = d // n_heads
    return [np.arange(h * dh, (h + 1) * dh) for h in range(n_heads)]


def _mha(q: Tensor, kv: Tensor, p: dict, prefix: str, n_heads: int,
         mask: np.ndarray | None = None) -> Tensor:
    """Multi-head attention with learned projections; concat via transpose."""
    d = q.data.shape[1]
    qp = add_bias(matmul(q, p[prefix + "wq"]), p[prefix + "bq"])
    kp = add_bias(matmul(kv, p[prefix + "wk"]), p[prefix + "bk"])
    vp = add_bias(matmul(kv, p[prefix + "wv"]), p[prefix + "bv"])
    qp_t, kp_t, vp_t = transpose(qp), transpose(kp), transpose(vp)
    head_cols = []
    for idx in _head_slices(d, n_heads):
        qh = transpose(take_rows(qp_t, idx))
        kh = transpose(take_rows(kp_t, idx))
        vh = transpose(take_rows(vp_t, idx))
        out_h, _ = attention(qh, kh, vh, mask=mask)
        head_cols.append(transpose(out_h))
    merged = transpose(concat_rows(head_cols))
    return add_bias(matmul(merged, p[prefix + "wo"]), p[prefix + "bo"])


def embed_env_tokens(bundle: TokenBundle, params: dict) -> Tensor | None:
    if bundle.env.shape[0] == 0:
        return None
    env = Tensor(bundle.env * ENV_FEATURE_SCALE[None, :])
    return add_bias(matmul(env, params["emb_env_w"]), params["emb_env_b"])


def contextualize_ego(bundle: TokenBundle, params: dict, cfg: PlannerConfig) -> Tensor:
    """Single ego vector from cross-attention over embedded scene tokens."""
    rows = []
    env_e = embed_env_tokens(bundle, params)
    if env_e is not None:
        rows.append(env_e)
    cmd = Tensor(bundle.command[None, :])
    rows.append(add_bias(matmul(cmd, params["emb_cmd_w"]), params["emb_cmd_b"]))
    ego = Tensor(bundle.ego[None, :] * EGO_FEATURE_SCALE[None, :])
    rows.append(add_bias(matmul(ego, params["emb_ego_w"]), params["emb_ego_b"]))
    toks = concat_rows(rows) if len(rows) > 1 else rows[0]
    return _mha(params["ego_query"], toks, params, "ctx_", cfg.n_heads)


def _state_features(state: EgoState) -> np.ndarray:
    raw = np.array([[state.x, state.y, state.v, state.theta]])
    return raw * STATE_FEATURE_SCALE[None, :]


def prospective_token(ego_token: Tensor, future_state: EgoState, params: dict) -> Tensor:
    """Additive fusion of the ego vector with an embedded future state."""
    feats = Tensor(_state_features(future_state))
    s_e = add_bias(matmul(feats, params["prosp_w"]), params["prosp_b"])
    return add(ego_token, s_e)


def tisa_align(prospective: Tensor, params: dict, cfg: PlannerConfig) -> Tensor:
    """Attention of the prospective token into the shared key-value memory.

    No step index enters this computation; the same input yields the same
    output at every horizon position. With the memory disabled the token
    passes through unchanged (ablation support).
    """
    if not cfg.use_memory:
        return prospective
    out, _ = attention(prospective, params["tisa_k"], params["tisa_v"])
    if cfg.memory_residual:
        return add(prospective, out)
    return out


def _decoder(x: Tensor, params: dict, cfg: PlannerConfig) -> Tensor:
    n = x.data.shape[0]
    mask = np.triu(np.full((n, n), -1e30), k=1)
    for i in range(cfg.n_layers):
        p = f"dec{i}_"
        h = layer_norm(x, params[p + "ln1_g"], params[p + "ln1_b"])
        x = add(x, _mha(h, h, params, p, cfg.n_heads, mask=mask))
        h = layer_norm(x, params[p + "ln2_g"], params[p + "ln2_b"])
        h = add_bias(matmul(h, params[p + "ffn_w1"]), params[p + "ffn_b1"])
        h = add_bias(matmul(gelu(h), params[p + "ffn_w2"]), params[p + "ffn_b2"])
        x = add(x, h)
    return layer_norm(x, params["lnf_g"], params["lnf_b"])


def _aligned_sequence(ego_token: Tensor, states, params: dict, cfg: PlannerConfig) -> Tensor:
    aligned = [tisa_align(prospective_token(ego_token, s, params), params, cfg)
               for s in states]
    return concat_rows(aligned) if len(aligned) > 1 else aligned[0]


def forward_teacher_forced(bundle: TokenBundle, gt_states, params: dict,
                           cfg: PlannerConfig) -> Tensor:
    """Per-step vocabulary logits [T, vocab] under teacher forcing.

    gt_states are the planning-frame states at steps 0..T-1 along the
    relabeled ground-truth trajectory.
    """
    if len(gt_states) == 0:
        raise DomainError("teacher forcing needs at least one state")
    ego_token = contextualize_ego(bundle, params, cfg)
    seq = _aligned_sequence(ego_token, gt_states, params, cfg)
    x = _decoder(seq, params, cfg)
    return add_bias(matmul(x, params["action_w"]), params["action_b"])


def aux_map_logits(bundle: TokenBundle, params: dict) -> tuple[Tensor, np.ndarray]:
    """2-class logits for map tokens (boundary=0, centerline=1) + targets."""
    flags = bundle.env[:, :3]
    rows = np.where(flags[:, 0] == 0.0)[0]
    if rows.size == 0:
        raise DomainError("no map tokens in bundle")
    env_e = embed_env_tokens(bundle, params)
    picked = take_rows(env_e, rows)
    logits = add_bias(matmul(picked, params["aux_w"]), params["aux_b"])
    targets = bundle.env[rows, 2].astype(np.int64)  # 1 where centerline
    return logits, targets


def sequence_logprob(bundle: TokenBundle, action_ids, ego_init: EgoState,
                     params: dict, cfg: PlannerConfig, dt: float,
                     temperature: float = 1.0) -> Tensor:
    """Scalar log-probability of an action sequence (teacher-forced replay).

    Differentiable with respect to the parameters; used for preference
    fine-tuning and for audit recomputation of sampled plans.
    """
    from .autodiff import pick, tsum

    traj = relabel_trajectory(ego_init, action_ids, cfg.vocab, dt)
    logits = forward_teacher_forced(bundle, traj.states[:-1], params, cfg)
    if temperature != 1.0:
        from .autodiff import scale
        logits = scale(logits, 1.0 / temperature)
    logp = log_softmax(logits)
    rows = np.arange(len(action_ids))
    return tsum(pick(logp, rows, np.asarray(action_ids, dtype=np.int64)))


def plan(bundle: TokenBundle, ego_init: EgoState, params: dict, cfg: PlannerConfig,
         T: int, dt: float, mode: str = "greedy", temperature: float = 1.0,
         rng: np.random.Generator | None = None) -> PlanResult:
    """Closed-loop autoregressive rollout from the scene tokens.

    GREEDY picks the argmax action (lowest id on exact ties); SAMPLE draws
    from the temperature-adjusted distribution and records the log of that
    same distribution at the chosen id. The decoder prefix is recomputed
    each step; states advance through the closed-form kinematics.
    """
    if mode not in ("greedy", "sample"):
        raise DomainError(f"unknown planning mode {mode!r}")
    if mode == "sample":
        if temperature <= 0.0:
            raise DomainError("sampling temperature must be positive")
        if rng is None:
            raise DomainError("sampling mode needs a random generator")
    with no_grad():
        ego_token = contextualize_ego(bundle, params, cfg)
        states = [ego_init]
        ids: list[int] = []
        logps: list[float] = []
        for k in range(T):
            seq = _aligned_sequence(ego_token, states, params, cfg)
            x = _decoder(seq, params, cfg)
            logits_all = add_bias(matmul(x, params["action_w"]), params["action_b"])
            row = logits_all.data[-1]
            if mode == "greedy":
                chosen = int(np.argmax(row))
                logp_row = row - _logsumexp(row)
            else:
                scaled = row / temperature
                logp_row = scaled - _logsumexp(scaled)
                chosen = int(rng.choice(row.size, p=np.exp(logp_row)))
            ids.append(chosen)
            logps.append(float(logp_row[chosen]))
            states.append(advance(states[-1], decode(chosen, cfg.vocab), dt))
    trajectory = relabel_trajectory(ego_init, ids, cfg.vocab, dt)
    return PlanResult(
        action_ids=tuple(ids),
        step_logprobs=tuple(logps),
        trajectory=trajectory,
        total_logprob=float(sum(logps)),
    )


def _logsumexp(row: np.ndarray) -> float:
    m = row.max()
    return float(m + np.log(np.exp(row - m).sum()))


# ---------------------------------------------------------------------------
# Checkpoint io: magic, version, config echo, then named LE float64 arrays.


def save_checkpoint(path, params: dict[str, Tensor], cfg: PlannerConfig,
                    extra: dict | None = None) -> None:
    doc = {"planner": cfg.to_dict()}
    if extra:
        doc.update(extra)
    blob = json.dumps(doc, sort_keys=True).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack("<" + "I" * data.ndim, *data.shape))
            fh.write(data.tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, Tensor], PlannerConfig, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DomainError(f"not a planner checkpoint: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise DomainError(f"unsupported checkpoint version {version} in {path}")
        (blen,) = struct.unpack("<I", fh.read(4))
        doc = json.loads(fh.read(blen).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack("<" + "I" * ndim, fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape).copy()
            params[name] = Tensor(data, requires_grad=True)
    cfg = PlannerConfig.from_dict(doc["planner"])
    extra = {k: v for k, v in doc.items() if k != "planner"}
    return params, cfg, extra
