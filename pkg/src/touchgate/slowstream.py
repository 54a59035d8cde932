"""The slow vision-language encoder and the proprioceptive state encoder.

encode_slow patchifies the rendered view, embeds instruction tokens,
modulates the patch embeddings with the pooled instruction embedding
(zero-initialized scale/shift, so training starts from plain patches), runs
a small self-attention trunk over the concatenation, and returns the latent
bank used as cross-attention keys/values. The modulation gives the trunk a
first-layer product between pixels and instruction, which is what lets it
mark the instructed object instead of every colored one. Pad tokens keep
the bank at a fixed size but are masked out of every attention pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, ShapeError, Tensor
from .nn import MLP, ParamStore, TransformerLayer, modulate
from .rng import Rng

PAD_ID = 0


@dataclass
class Observation:
    image: np.ndarray          # [G, G, 3] reals in [0, 1]
    instruction: np.ndarray    # token ids, length <= n_L
    state: np.ndarray          # [D_s] proprioception


@dataclass
class SlowLatents:
    kv: Tensor                 # [B, P + n_L, d]
    key_mask: np.ndarray       # bool [B, P + n_L]; False rows are pad tokens
    issued_step: int
    n_patches: int

    @property
    def width(self) -> int:
        return self.kv.data.shape[-1]


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """[B, G, G, 3] -> [B, P, p*p*3 + 2], row-major patch order.

    Two patch-center coordinate channels (x, y in [0, 1]) are appended to
    each flattened patch so target positions are linearly decodable instead
    of having to be memorized from the learned position table.
    """
    B, G, G2, C = images.shape
    if G != G2 or G % p != 0:
        raise ShapeError(f"cannot patchify {images.shape} with patch {p}")
    n = G // p
    x = images.reshape(B, n, p, n, p, C).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(B, n * n, p * p * C)
    centers = (np.arange(n) + 0.5) * (p / G)
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    coords = np.stack([cx.reshape(-1), cy.reshape(-1)], axis=1)  # [P, 2]
    coords = np.broadcast_to(coords, (B, n * n, 2))
    return np.concatenate([x, coords.astype(x.dtype)], axis=2)


class SlowStream:
    """Patch + token embedding with learned positions and N_s self-attention layers."""

    def __init__(self, store: ParamStore, *, G: int, p: int, d: int, n_h: int,
                 n_L: int, n_layers: int, vocab_size: int, rng: Rng):
        if G % p != 0:
            raise ValueError(f"image size {G} not divisible by patch size {p}")
        self.G, self.p, self.d, self.n_L = G, p, d, n_L
        self.n_patches = (G // p) ** 2
        self.vocab_size = vocab_size
        self.patch_proj = MLP(store, "slow.patch_proj", [p * p * 3 + 2, d], rng)
        self.film = MLP(store, "slow.film", [d, 2 * d], rng, zero_init_last=True)
        self.pos_img = store.add("slow.pos_img", 0.02 * rng.standard_normal((self.n_patches, d)))
        self.tok_embed = store.add("slow.tok_embed", 0.02 * rng.standard_normal((vocab_size, d)))
        self.pos_txt = store.add("slow.pos_txt", 0.02 * rng.standard_normal((n_L, d)))
        self.layers = [TransformerLayer(store, f"slow.layer{i}", d, n_h, rng)
                       for i in range(n_layers)]

    def _broadcast_param(self, g: Graph, param: Tensor, B: int, n: int) -> Tensor:
        flat = g.reshape(param, (1, n * self.d))
        return g.reshape(g.matmul(g.ones((B, 1)), flat), (B, n, self.d))

    def pad_instructions(self, instructions) -> np.ndarray:
        """Pad/validate each id sequence to exactly n_L with the reserved pad id."""
        out = np.full((len(instructions), self.n_L), PAD_ID, dtype=np.int64)
        for i, ids in enumerate(instructions):
            ids = np.asarray(ids, dtype=np.int64).reshape(-1)
            if ids.shape[0] > self.n_L:
                raise ShapeError(f"instruction length {ids.shape[0]} exceeds {self.n_L}")
            if np.any(ids < 0) or np.any(ids >= self.vocab_size):
                raise ValueError("instruction token id out of vocabulary")
            out[i, : ids.shape[0]] = ids
        return out

    def encode(self, g: Graph, images: np.ndarray, instructions, tick: int = 0) -> SlowLatents:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        B = images.shape[0]
        if images.shape[1:] != (self.G, self.G, 3):
            raise ShapeError(f"image shape {images.shape[1:]} != ({self.G},{self.G},3)")
        if not np.all(np.isfinite(images)):
            raise ValueError("non-finite image")
        ids = self.pad_instructions(instructions)
        if ids.shape[0] != B:
            raise ShapeError("instruction batch does not match image batch")

        patches = patchify(images, self.p)
        z_img = self.patch_proj(g, g.constant(patches))

        onehot = np.zeros((B, self.n_L, self.vocab_size))
        onehot[np.arange(B)[:, None], np.arange(self.n_L)[None, :], ids] = 1.0
        z_tok = g.matmul(g.constant(onehot.reshape(B * self.n_L, self.vocab_size)),
                         self.tok_embed)
        z_tok = g.reshape(z_tok, (B, self.n_L, self.d))

        # instruction-conditioned patch modulation from the mean real token
        w = (ids != PAD_ID).astype(np.float64)
        w = w / np.maximum(w.sum(axis=1, keepdims=True), 1.0)
        summary = g.reshape(g.matmul(g.constant(w[:, None, :]), z_tok),
                            (B, self.d))
        ss = self.film(g, summary)
        scale = g.slice(ss, 1, 0, self.d)
        shift = g.slice(ss, 1, self.d, 2 * self.d)
        z_img = modulate(g, z_img, shift, scale)
        z_img = g.add(z_img, self._broadcast_param(g, self.pos_img, B, self.n_patches))

        z_txt = g.add(z_tok, self._broadcast_param(g, self.pos_txt, B, self.n_L))

        x = g.concat([z_img, z_txt], axis=1)
        key_mask = np.concatenate(
            [np.ones((B, self.n_patches), dtype=bool), ids != PAD_ID], axis=1)
        for layer in self.layers:
            x = layer(g, x, key_mask=key_mask)
        return SlowLatents(kv=x, key_mask=key_mask, issued_step=int(tick),
                           n_patches=self.n_patches)


def encode_slow(g: Graph, stream: SlowStream, obs: Observation, tick: int = 0) -> SlowLatents:
    """Single-observation contract wrapper (batch of one)."""
    return stream.encode(g, obs.image[None], [obs.instruction], tick=tick)


class StateEncoder:
    """Proprioception -> conditioning token bank [B, n_c, d]."""

    def __init__(self, store: ParamStore, *, d_state: int, d: int, n_c: int,
                 rng: Rng, hidden: int = 64):
        self.d_state, self.d, self.n_c = d_state, d, n_c
        self.mlp = MLP(store, "state.mlp", [d_state, hidden, n_c * d], rng)

    def encode(self, g: Graph, states: np.ndarray) -> Tensor:
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 1:
            states = states[None]
        if states.shape[1] != self.d_state:
            raise ShapeError(f"state width {states.shape[1]} != {self.d_state}")
        if not np.all(np.isfinite(states)):
            raise ValueError("non-finite state")
        out = self.mlp(g, g.constant(states))
        return g.reshape(out, (states.shape[0], self.n_c, self.d))


def encode_state(g: Graph, enc: StateEncoder, state: np.ndarray) -> Tensor:
    """Single-state contract wrapper: returns [n_c, d]."""
    out = enc.encode(g, np.asarray(state)[None])
    return g.reshape(out, (enc.n_c, enc.d))


def freeze(store: ParamStore, frozen: bool = True, prefixes: tuple = ("slow.",)) -> int:
    """Exclude (or re-include) parameter groups from optimizer updates."""
    n = 0
    for prefix in prefixes:
        n += store.freeze(prefix, frozen)
    return n
