"""Neural building blocks over the tape: linear, MLP, attention, embeddings.

All modules are thin parameter-naming wrappers; the actual math routes
through Graph primitives so every forward is differentiable and replayable.
Module forwards accept 2D [n, d] or batched 3D [B, n, d] token tensors.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Graph, ShapeError, Tensor
from .rng import Rng

MASK_NEG = -1e9


class ParamStore:
    """Ordered, uniquely-named registry of learnable tensors.

    dtype is float32 for training and float64 when the store feeds a
    gradient-check graph; it must match the Graph the forwards run on.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def get(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def freeze(self, prefix: str, frozen: bool = True) -> int:
        """Mark parameters under a name prefix; optimizer skips frozen ones."""
        n = 0
        for name, t in self._params.items():
            if name.startswith(prefix):
                t.frozen = frozen
                n += 1
        return n

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=self.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.data.shape}")
            t.data = arr.copy()


def fanin_uniform(rng: Rng, d_in: int, d_out: int) -> np.ndarray:
    """U(-a, a) with a = sqrt(3/fan_in), so Var = 1/fan_in."""
    a = math.sqrt(3.0 / d_in)
    return (rng.uniform((d_in, d_out)) * 2.0 - 1.0) * a


class Linear:
    """y = x W + b. Bias add is expressed as ones @ b to stay in the op set."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: Rng | None = None, zero_init: bool = False):
        self.d_in, self.d_out = d_in, d_out
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            if rng is None:
                raise ValueError(f"{name}: rng required unless zero_init")
            w = fanin_uniform(rng, d_in, d_out)
        self.weight = store.add(name + ".weight", w)
        self.bias = store.add(name + ".bias", np.zeros(d_out))

    def __call__(self, g: Graph, x: Tensor) -> Tensor:
        shape = x.data.shape
        if shape[-1] != self.d_in:
            raise ShapeError(f"linear: input width {shape[-1]} != {self.d_in}")
        flat = x if len(shape) == 2 else g.reshape(x, (int(np.prod(shape[:-1])), self.d_in))
        n = flat.data.shape[0]
        y = g.matmul(flat, self.weight)
        b_row = g.reshape(self.bias, (1, self.d_out))
        y = g.add(y, g.matmul(g.ones((n, 1)), b_row))
        if len(shape) != 2:
            y = g.reshape(y, shape[:-1] + (self.d_out,))
        return y


class MLP:
    """Stacked linears with an activation between layers, none after the last."""

    def __init__(self, store: ParamStore, name: str, dims: list[int], rng: Rng,
                 activation: str = "gelu", zero_init_last: bool = False):
        if len(dims) < 2:
            raise ValueError("MLP needs at least one layer")
        if activation not in ("gelu", "tanh"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.activation = activation
        self.layers = []
        for i in range(len(dims) - 1):
            zero = zero_init_last and i == len(dims) - 2
            self.layers.append(Linear(store, f"{name}.{i}", dims[i], dims[i + 1],
                                      rng=None if zero else rng, zero_init=zero))

    def __call__(self, g: Graph, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(g, x)
            if i < len(self.layers) - 1:
                x = getattr(g, self.activation)(x)
        return x


def mlp_forward(g: Graph, layers: list[Linear], activation: str, x: Tensor) -> Tensor:
    """Functional form over prebuilt layers, same between-layers activation rule."""
    for i, layer in enumerate(layers):
        x = layer(g, x)
        if i < len(layers) - 1:
            x = getattr(g, activation)(x)
    return x


def timestep_embed(t: float, d: int) -> np.ndarray:
    """Sinusoidal features: sin block then cos block over d/2 geometric
    frequencies spanning [1, 1e4]. t is clamped to [0, 1]. Pure numpy; the
    embedding is a constant with respect to learnable parameters.
    """
    if d % 2 != 0:
        raise ValueError("timestep_embed: d must be even")
    t = min(max(float(t), 0.0), 1.0)
    half = d // 2
    freqs = np.geomspace(1.0, 1e4, half) if half > 1 else np.array([1.0])
    ang = freqs * t
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float64)


def timestep_embed_batch(ts: np.ndarray, d: int) -> np.ndarray:
    return np.stack([timestep_embed(t, d) for t in np.asarray(ts).reshape(-1)])


class AttentionBlock:
    """Multi-head attention; mode 'self' insists queries and keys coincide."""

    def __init__(self, store: ParamStore, name: str, d: int, n_h: int, rng: Rng,
                 mode: str = "self", zero_init_out: bool = False):
        if d % n_h != 0:
            raise ValueError(f"width {d} not divisible by {n_h} heads")
        if mode not in ("self", "cross"):
            raise ValueError(f"bad attention mode {mode!r}")
        self.d, self.n_h, self.d_h, self.mode = d, n_h, d // n_h, mode
        self.wq = Linear(store, name + ".wq", d, d, rng)
        self.wk = Linear(store, name + ".wk", d, d, rng)
        self.wv = Linear(store, name + ".wv", d, d, rng)
        self.wo = Linear(store, name + ".wo", d, d, rng, zero_init=zero_init_out)

    def _split_heads(self, g: Graph, x: Tensor, B: int, n: int) -> Tensor:
        # [B, n, d] -> [B*n_h, n, d_h]
        x = g.reshape(x, (B, n, self.n_h, self.d_h))
        x = g.transpose(x, axes=(0, 2, 1, 3))
        return g.reshape(x, (B * self.n_h, n, self.d_h))

    def __call__(self, g: Graph, q_tokens: Tensor, kv_tokens: Tensor,
                 key_mask: np.ndarray | None = None, return_weights: bool = False):
        """q [B, n_q, d] (or 2D), kv [B, n_kv, d]. key_mask: bool [B, n_kv] or
        [n_kv], True = attendable. Returns (out, weights [B, n_h, n_q, n_kv] | None).
        """
        if self.mode == "self" and q_tokens is not kv_tokens:
            raise ShapeError("self-attention requires q_tokens is kv_tokens")
        squeeze = q_tokens.data.ndim == 2
        if squeeze:
            q3 = g.reshape(q_tokens, (1,) + q_tokens.data.shape)
            kv3 = q3 if kv_tokens is q_tokens else g.reshape(kv_tokens, (1,) + kv_tokens.data.shape)
        else:
            q3, kv3 = q_tokens, kv_tokens
        B, n_q, d = q3.data.shape
        n_kv = kv3.data.shape[1]
        if d != self.d or kv3.data.shape[2] != self.d:
            raise ShapeError(f"attention: token width {d}/{kv3.data.shape[2]} != {self.d}")
        if kv3.data.shape[0] != B:
            raise ShapeError("attention: batch mismatch between q and kv")

        qh = self._split_heads(g, self.wq(g, q3), B, n_q)
        kh = self._split_heads(g, self.wk(g, kv3), B, n_kv)
        vh = self._split_heads(g, self.wv(g, kv3), B, n_kv)

        scores = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / math.sqrt(self.d_h))
        if key_mask is not None:
            mask = np.asarray(key_mask, dtype=bool)
            if mask.ndim == 1:
                mask = np.broadcast_to(mask, (B, n_kv))
            add = np.where(mask, 0.0, MASK_NEG)[:, None, None, :]  # [B,1,1,n_kv]
            add = np.broadcast_to(add, (B, self.n_h, n_q, n_kv)).reshape(B * self.n_h, n_q, n_kv)
            scores = g.add(scores, g.constant(add))
        weights = g.softmax_lastdim(scores)

        ctx = g.matmul(weights, vh)  # [B*n_h, n_q, d_h]
        ctx = g.reshape(ctx, (B, self.n_h, n_q, self.d_h))
        ctx = g.transpose(ctx, axes=(0, 2, 1, 3))
        ctx = g.reshape(ctx, (B, n_q, self.d))
        out = self.wo(g, ctx)

        w_out = None
        if return_weights:
            w_out = g.reshape(weights, (B, self.n_h, n_q, n_kv))
        if squeeze:
            out = g.reshape(out, (n_q, self.d))
            if w_out is not None:
                w_out = g.reshape(w_out, (self.n_h, n_q, n_kv))
        return out, w_out


def attention_forward(g: Graph, block: AttentionBlock, q_tokens: Tensor,
                      kv_tokens: Tensor, return_weights: bool = False):
    """Contract-level entry point over 2D token matrices."""
    return block(g, q_tokens, kv_tokens, return_weights=return_weights)


class TransformerLayer:
    """Pre-layernorm residual block: x += attn(LN x); x += mlp(LN x)."""

    def __init__(self, store: ParamStore, name: str, d: int, n_h: int, rng: Rng,
                 mlp_ratio: int = 4):
        self.attn = AttentionBlock(store, name + ".attn", d, n_h, rng, mode="self")
        self.mlp = MLP(store, name + ".mlp", [d, mlp_ratio * d, d], rng)

    def __call__(self, g: Graph, x: Tensor, key_mask=None) -> Tensor:
        h = g.layernorm_lastdim(x)
        a, _ = self.attn(g, h, h, key_mask=key_mask)
        x = g.add(x, a)
        x = g.add(x, self.mlp(g, g.layernorm_lastdim(x)))
        return x


def broadcast_rows(g: Graph, per_sample: Tensor, n: int) -> Tensor:
    """[B, d] -> [B, n, d] by ones[B,n,1] @ row[B,1,d]; replaces broadcasting."""
    B, d = per_sample.data.shape
    row = g.reshape(per_sample, (B, 1, d))
    return g.matmul(g.ones((B, n, 1)), row)


def modulate(g: Graph, x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """x * (1 + scale) + shift with per-sample [B, d] modulation over [B, n, d]."""
    B, n, d = x.data.shape
    s = broadcast_rows(g, scale, n)
    x = g.add(g.mul(x, g.add(s, g.ones((B, n, d)))), broadcast_rows(g, shift, n))
    return x


def init_params(builder, seed: int, dtype=np.float32) -> ParamStore:
    """Populate a fresh store deterministically: builder(store, rng) adds all
    modules in a fixed order; weights fan-in uniform, biases zero.
    """
    store = ParamStore(dtype=dtype)
    builder(store, Rng(seed))
    return store
