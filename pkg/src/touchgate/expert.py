"""Flow-matching action expert with the gate-driven conditioning switch.

The expert denoises an H-step action chunk. Each block runs self-attention
over [conditioning token ++ action tokens], cross-attention into the slow
vision-language latents, and an MLP, all modulated by the flow timestep
(zero-initialized modulation, so blocks start as the identity). The
conditioning slot carries the state token when the gate is inactive and the
tactile token when active; both sources have the same token count so the
sequence shape never changes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, ShapeError, Tensor
from .nn import (AttentionBlock, Linear, MLP, ParamStore, broadcast_rows, modulate,
                 timestep_embed_batch)
from .rng import Rng
from .slowstream import SlowLatents
from .tactile import GateDecision

CROSS_QUERY_MODES = ("full", "cond_only")


@dataclass
class ConditioningToken:
    token: Tensor       # [B, n_c, d]
    source: str         # "state" | "tactile"


@dataclass
class ActionChunk:
    actions: np.ndarray  # [H, D_a]


def make_conditioning(gate, z_S: Tensor, z_T: Tensor | None) -> ConditioningToken:
    """Select the query source. The unused modality is not referenced at all,
    so it never enters the graph and can carry arbitrary (even absent) data.
    """
    active = gate.active if isinstance(gate, GateDecision) else bool(gate)
    if active:
        if z_T is None:
            raise ValueError("gate active but no tactile token available")
        return ConditioningToken(token=z_T, source="tactile")
    return ConditioningToken(token=z_S, source="state")


class ExpertBlock:
    """Pre-LN DiT-style block: self-attn, cross-attn into slow latents, MLP,
    each gated and shifted/scaled by the timestep embedding (zero-init)."""

    def __init__(self, store: ParamStore, name: str, d: int, n_h: int, rng: Rng,
                 n_c: int, mlp_ratio: int = 4, cross_query_mode: str = "full"):
        if cross_query_mode not in CROSS_QUERY_MODES:
            raise ValueError(f"bad cross_query_mode {cross_query_mode!r}")
        self.d, self.n_c = d, n_c
        self.cross_query_mode = cross_query_mode
        self.self_attn = AttentionBlock(store, name + ".self", d, n_h, rng, mode="self")
        self.cross_attn = AttentionBlock(store, name + ".cross", d, n_h, rng, mode="cross")
        self.mlp = MLP(store, name + ".mlp", [d, mlp_ratio * d, d], rng)
        self.ada = Linear(store, name + ".ada", d, 9 * d, zero_init=True)

    def _mod(self, g: Graph, m: Tensor, i: int) -> Tensor:
        return g.slice(m, axis=1, start=i * self.d, stop=(i + 1) * self.d)

    def __call__(self, g: Graph, x: Tensor, temb: Tensor, slow: SlowLatents,
                 record_attn: bool = False):
        B, n, d = x.data.shape
        m = self.ada(g, temb)  # [B, 9d]
        sh1, sc1, gt1 = (self._mod(g, m, i) for i in range(0, 3))
        sh2, sc2, gt2 = (self._mod(g, m, i) for i in range(3, 6))
        sh3, sc3, gt3 = (self._mod(g, m, i) for i in range(6, 9))

        h = modulate(g, g.layernorm_lastdim(x), sh1, sc1)
        a, _ = self.self_attn(g, h, h)
        x = g.add(x, g.mul(broadcast_rows(g, gt1, n), a))

        h = modulate(g, g.layernorm_lastdim(x), sh2, sc2)
        if self.cross_query_mode == "cond_only":
            q = g.slice(h, axis=1, start=0, stop=self.n_c)
            c, w = self.cross_attn(g, q, slow.kv, key_mask=slow.key_mask,
                                   return_weights=record_attn)
            gated = g.mul(broadcast_rows(g, gt2, self.n_c), c)
            cond_rows = g.add(g.slice(x, axis=1, start=0, stop=self.n_c), gated)
            rest = g.slice(x, axis=1, start=self.n_c, stop=n)
            x = g.concat([cond_rows, rest], axis=1)
        else:
            c, w = self.cross_attn(g, h, slow.kv, key_mask=slow.key_mask,
                                   return_weights=record_attn)
            x = g.add(x, g.mul(broadcast_rows(g, gt2, n), c))

        h = modulate(g, g.layernorm_lastdim(x), sh3, sc3)
        x = g.add(x, g.mul(broadcast_rows(g, gt3, n), self.mlp(g, h)))
        return x, (w.data.copy() if record_attn and w is not None else None)


class ActionExpert:
    """Velocity network v(x_t, t, cond, slow) over H x D_a action chunks."""

    def __init__(self, store: ParamStore, *, d: int, n_h: int, H: int, D_a: int,
                 n_blocks: int, n_c: int, rng: Rng, mlp_ratio: int = 4,
                 cross_query_mode: str = "full"):
        self.d, self.H, self.D_a, self.n_c = d, H, D_a, n_c
        self.act_in = Linear(store, "expert.act_in", D_a, d, rng)
        self.act_pos = store.add("expert.act_pos", 0.02 * rng.standard_normal((H, d)))
        self.cond_pos = store.add("expert.cond_pos", 0.02 * rng.standard_normal((n_c, d)))
        self.temb_mlp = MLP(store, "expert.temb", [d, d, d], rng)
        self.blocks = [ExpertBlock(store, f"expert.block{i}", d, n_h, rng, n_c,
                                   mlp_ratio=mlp_ratio, cross_query_mode=cross_query_mode)
                       for i in range(n_blocks)]
        self.final_ada = Linear(store, "expert.final_ada", d, 2 * d, zero_init=True)
        self.act_out = Linear(store, "expert.act_out", d, D_a, zero_init=True)

    def _pos(self, g: Graph, param: Tensor, B: int, n: int) -> Tensor:
        flat = g.reshape(param, (1, n * self.d))
        return g.reshape(g.matmul(g.ones((B, 1)), flat), (B, n, self.d))

    def velocity_batch(self, g: Graph, noisy: Tensor | np.ndarray, t: np.ndarray,
                       cond: ConditioningToken, slow: SlowLatents,
                       record_attn: bool = False):
        """noisy [B, H, D_a], t [B] -> (velocity [B, H, D_a], per-block attn)."""
        x_in = noisy if isinstance(noisy, Tensor) else g.constant(np.asarray(noisy))
        B, H, D_a = x_in.data.shape
        if (H, D_a) != (self.H, self.D_a):
            raise ShapeError(f"chunk shape {(H, D_a)} != {(self.H, self.D_a)}")
        if cond.token.data.shape != (B, self.n_c, self.d):
            raise ShapeError(f"conditioning shape {cond.token.data.shape} != "
                             f"{(B, self.n_c, self.d)}")
        if slow.kv.data.shape[0] != B or slow.kv.data.shape[2] != self.d:
            raise ShapeError(f"slow latents shape {slow.kv.data.shape} incompatible")

        a_tok = g.add(self.act_in(g, x_in), self._pos(g, self.act_pos, B, self.H))
        c_tok = g.add(cond.token, self._pos(g, self.cond_pos, B, self.n_c))
        x = g.concat([c_tok, a_tok], axis=1)  # [B, n_c + H, d]

        temb = self.temb_mlp(g, g.constant(timestep_embed_batch(t, self.d)))
        attn = []
        for block in self.blocks:
            x, w = block(g, x, temb, slow, record_attn=record_attn)
            attn.append(w)

        m = self.final_ada(g, temb)
        shift = g.slice(m, axis=1, start=0, stop=self.d)
        scale = g.slice(m, axis=1, start=self.d, stop=2 * self.d)
        x = modulate(g, g.layernorm_lastdim(x), shift, scale)
        act = g.slice(x, axis=1, start=self.n_c, stop=self.n_c + self.H)
        vel = self.act_out(g, act)
        return vel, attn


def velocity_forward(g: Graph, model: ActionExpert, noisy_chunk: np.ndarray, t: float,
                     cond: ConditioningToken, slow: SlowLatents,
                     record_attn: bool = False):
    """Single-sample contract wrapper: noisy [H, D_a], scalar t -> [H, D_a]."""
    noisy = np.asarray(noisy_chunk)
    if noisy.shape != (model.H, model.D_a):
        raise ShapeError(f"chunk shape {noisy.shape} != {(model.H, model.D_a)}")
    if not (np.isfinite(t) and np.all(np.isfinite(noisy))):
        raise ValueError("non-finite sampler input")
    tok = cond.token
    if tok.data.ndim == 2:
        cond = ConditioningToken(token=g.reshape(tok, (1,) + tok.data.shape),
                                 source=cond.source)
    vel, attn = model.velocity_batch(g, noisy[None], np.array([t]), cond, slow,
                                     record_attn=record_attn)
    out = g.reshape(vel, (model.H, model.D_a))
    return (out, attn) if record_attn else out


def flow_match_targets(target: np.ndarray, eps: np.ndarray, t: np.ndarray):
    """Linear probability path: x_t = (1-t) eps + t A, v* = A - eps."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1)
    x_t = (1.0 - t) * eps + t * target
    v_star = target - eps
    return x_t, v_star


def flow_match_loss_batch(g: Graph, model: ActionExpert, targets: np.ndarray,
                          cond: ConditioningToken, slow: SlowLatents, rng: Rng):
    """L_a over a batch: per-sample noise and timestep draws."""
    targets = np.asarray(targets, dtype=np.float64)
    B = targets.shape[0]
    if targets.shape != (B, model.H, model.D_a):
        raise ShapeError(f"targets shape {targets.shape} != "
                         f"{(B, model.H, model.D_a)}")
    eps = rng.standard_normal(targets.shape)
    t = rng.uniform((B,))
    x_t, v_star = flow_match_targets(targets, eps, t)
    vel, _ = model.velocity_batch(g, x_t, t, cond, slow)
    return g.mse(vel, g.constant(v_star))


def flow_match_loss(g: Graph, model: ActionExpert, target_chunk, cond: ConditioningToken,
                    slow: SlowLatents, rng: Rng) -> Tensor:
    """Single-chunk contract wrapper."""
    actions = target_chunk.actions if isinstance(target_chunk, ActionChunk) else target_chunk
    tok = cond.token
    if tok.data.ndim == 2:
        cond = ConditioningToken(token=g.reshape(tok, (1,) + tok.data.shape),
                                 source=cond.source)
    return flow_match_loss_batch(g, model, np.asarray(actions)[None], cond, slow, rng)


def sample_chunk(model: ActionExpert, cond_data: np.ndarray, cond_source: str,
                 slow_kv: np.ndarray, slow_mask: np.ndarray, K: int, rng: Rng,
                 velocity_fn=None) -> ActionChunk:
    """Euler integration of the learned field from noise to an action chunk.

    Conditioning and slow latents are fixed numerical snapshots during the
    integration. velocity_fn overrides the model (testing oracle hook); it
    receives (x [H, D_a], tau) and returns the velocity.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    dt = model.act_in.weight.data.dtype
    x = rng.standard_normal((model.H, model.D_a))
    for i in range(K):
        tau = i / K
        if velocity_fn is not None:
            v = np.asarray(velocity_fn(x, tau), dtype=np.float64)
        else:
            g = Graph(dtype=dt, grad_enabled=False)
            cond = ConditioningToken(token=g.constant(cond_data), source=cond_source)
            slow = SlowLatents(kv=g.constant(slow_kv), key_mask=slow_mask,
                               issued_step=0, n_patches=0)
            v = velocity_forward(g, model, x, tau, cond, slow).data
        x = x + v / K
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite chunk at integration step {i}")
    return ActionChunk(actions=x)
