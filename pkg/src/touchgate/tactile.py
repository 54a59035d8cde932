"""Tactile encoders for the three sensor formats, the contact gate, and its loss.

Each encoder maps a raw reading to a fixed-width token bank [n_T, d] so the
action expert is format-agnostic. The gate is a small MLP over the (pooled)
tactile token; its sigmoid score against a threshold decides contact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, ShapeError, Tensor
from .nn import MLP, ParamStore
from .rng import Rng

TACTILE_FORMATS = ("force6", "marker2d", "vtimage")
DEFAULT_THRESHOLD = 0.5


@dataclass
class TactileReading:
    """One sensor frame. force6 = normal force vector ++ tangential force
    vector (Newtons); marker2d = N_m x 2 displacements (millimeters);
    vt_image = H_t x W_t x 3 intensities in [0,1]. Optional fields may be None
    when the dataset was generated without them.
    """
    force6: np.ndarray
    marker2d: np.ndarray | None = None
    vt_image: np.ndarray | None = None


@dataclass
class GateDecision:
    score: float
    active: bool
    threshold: float


class TactileEncoder:
    """Format-dispatched encoder producing tokens [B, n_T, d] (n_T = 1)."""

    def __init__(self, store: ParamStore, fmt: str, d: int, rng: Rng,
                 n_markers: int = 16, vt_size: int = 8, vt_patch: int = 4,
                 hidden: int = 64):
        if fmt not in TACTILE_FORMATS:
            raise ValueError(f"unknown tactile format {fmt!r}")
        self.fmt = fmt
        self.d = d
        self.n_markers = n_markers
        self.vt_size = vt_size
        self.vt_patch = vt_patch
        if fmt == "force6":
            self.in_dim = 6
            self.mlp = MLP(store, "tactile.force6", [6, hidden, d], rng)
        elif fmt == "marker2d":
            self.in_dim = n_markers * 2
            self.mlp = MLP(store, "tactile.marker2d", [self.in_dim, hidden, d], rng)
        else:
            if vt_size % vt_patch != 0:
                raise ValueError("vt image size must be divisible by the patch size")
            self.n_patches = (vt_size // vt_patch) ** 2
            self.patch_dim = vt_patch * vt_patch * 3
            self.patch_proj = MLP(store, "tactile.vt_patch", [self.patch_dim, d], rng)
            self.head = MLP(store, "tactile.vt_head", [d, hidden, d], rng)
        # per-channel standardization scale, multiplied into the raw input;
        # identity until calibrated from training data (zero-preserving)
        self.norm_scale = np.ones(self._raw_dim(), dtype=np.float64)

    def _raw_dim(self) -> int:
        if self.fmt == "force6":
            return 6
        if self.fmt == "marker2d":
            return self.n_markers * 2
        return self.vt_size * self.vt_size * 3

    def set_norm_scale(self, scale: np.ndarray):
        scale = np.asarray(scale, dtype=np.float64).reshape(-1)
        if scale.shape[0] != self._raw_dim() or not np.all(np.isfinite(scale)):
            raise ValueError("bad normalization scale")
        self.norm_scale = scale

    def raw_batch(self, readings: list[TactileReading]) -> np.ndarray:
        """Flatten readings into [B, raw_dim], validating format presence."""
        rows = []
        for r in readings:
            if self.fmt == "force6":
                v = np.asarray(r.force6, dtype=np.float64).reshape(-1)
                if v.shape[0] != 6:
                    raise ShapeError(f"force6 must have 6 entries, got {v.shape[0]}")
            elif self.fmt == "marker2d":
                if r.marker2d is None:
                    raise ShapeError("marker2d reading absent")
                v = np.asarray(r.marker2d, dtype=np.float64)
                if v.shape != (self.n_markers, 2):
                    raise ShapeError(f"marker2d must be [{self.n_markers} x 2], got {v.shape}")
                v = v.reshape(-1)
            else:
                if r.vt_image is None:
                    raise ShapeError("vt_image reading absent")
                v = np.asarray(r.vt_image, dtype=np.float64)
                if v.shape != (self.vt_size, self.vt_size, 3):
                    raise ShapeError(f"vt_image must be [{self.vt_size}x{self.vt_size}x3], got {v.shape}")
                v = v.reshape(-1)
            if not np.all(np.isfinite(v)):
                raise ValueError("non-finite tactile reading")
            rows.append(v)
        return np.stack(rows) * self.norm_scale

    def encode_raw(self, g: Graph, raw: np.ndarray) -> Tensor:
        """raw [B, raw_dim] (already standardized) -> tokens [B, 1, d]."""
        B = raw.shape[0]
        x = g.constant(raw)
        if self.fmt in ("force6", "marker2d"):
            tok = self.mlp(g, x)
        else:
            s, p = self.vt_size, self.vt_patch
            img = raw.reshape(B, s, s, 3)
            n = s // p
            patches = img.reshape(B, n, p, n, p, 3).transpose(0, 1, 3, 2, 4, 5)
            patches = patches.reshape(B, self.n_patches, self.patch_dim)
            emb = self.patch_proj(g, g.constant(patches))  # [B, n_patches, d]
            emb = g.gelu(emb)
            # mean-pool over patches: transpose then matmul with 1/n ones
            pool = g.matmul(g.transpose(emb), g.scale(g.ones((B, self.n_patches, 1)),
                                                      1.0 / self.n_patches))
            tok = self.head(g, g.reshape(pool, (B, self.d)))
        return g.reshape(tok, (B, 1, self.d))

    def encode(self, g: Graph, readings: list[TactileReading]) -> Tensor:
        return self.encode_raw(g, self.raw_batch(readings))


def encode_force6(g: Graph, enc: TactileEncoder, reading: TactileReading) -> Tensor:
    if enc.fmt != "force6":
        raise ValueError("encoder is not in force6 format")
    return g.reshape(enc.encode(g, [reading]), (1, enc.d))


def encode_marker2d(g: Graph, enc: TactileEncoder, reading: TactileReading) -> Tensor:
    if enc.fmt != "marker2d":
        raise ValueError("encoder is not in marker2d format")
    return g.reshape(enc.encode(g, [reading]), (1, enc.d))


def encode_vt_image(g: Graph, enc: TactileEncoder, reading: TactileReading) -> Tensor:
    if enc.fmt != "vtimage":
        raise ValueError("encoder is not in vtimage format")
    return g.reshape(enc.encode(g, [reading]), (1, enc.d))


class TactileGate:
    """Contact classifier over the tactile token; threshold is strict."""

    def __init__(self, store: ParamStore, d: int, rng: Rng, hidden: int = 64,
                 threshold: float = DEFAULT_THRESHOLD):
        self.d = d
        self.threshold = float(threshold)
        self.mlp = MLP(store, "gate.mlp", [d, hidden, 1], rng)

    def logits(self, g: Graph, tokens: Tensor) -> Tensor:
        """tokens [B, n_T, d] -> logits [B, 1]; multi-token banks mean-pooled."""
        B, n_T, d = tokens.data.shape
        if d != self.d:
            raise ShapeError(f"gate: token width {d} != {self.d}")
        pooled = g.matmul(g.transpose(tokens), g.scale(g.ones((B, n_T, 1)), 1.0 / n_T))
        return self.mlp(g, g.reshape(pooled, (B, d)))

    def score(self, token_data: np.ndarray) -> GateDecision:
        """Inference-path scoring on raw token values; no tape involvement."""
        dt = self.mlp.layers[0].weight.data.dtype
        g = Graph(dtype=dt, grad_enabled=False)
        tok = np.asarray(token_data, dtype=dt)
        if tok.ndim == 2:
            tok = tok[None]
        logit = float(self.logits(g, g.constant(tok)).data.reshape(-1)[0])
        s = 1.0 / (1.0 + np.exp(-logit))
        return GateDecision(score=float(s), active=bool(s > self.threshold),
                            threshold=self.threshold)


def gate_score(gate: TactileGate, token: Tensor | np.ndarray) -> GateDecision:
    data = token.data if isinstance(token, Tensor) else token
    return gate.score(np.asarray(data))


def gate_loss(g: Graph, logits: Tensor, labels: np.ndarray) -> Tensor:
    """Stable BCE-with-logits, averaged over the batch. Labels must be 0/1."""
    lab = np.asarray(labels, dtype=np.float64)
    if not np.all(np.isin(lab, (0.0, 1.0))):
        raise ValueError(f"gate labels must be 0 or 1, got {np.unique(lab)}")
    flat = g.reshape(logits, (int(np.prod(logits.data.shape)),))
    return g.bce_with_logits(flat, g.constant(lab.reshape(-1)))


def fit_norm_scale(raw: np.ndarray, contact_mask: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-channel inverse RMS over contact frames; scale-only so zero readings
    stay exactly zero. Channels silent even during contact get scale 1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(contact_mask, dtype=bool)
    if raw.ndim != 2 or mask.shape[0] != raw.shape[0]:
        raise ValueError("fit_norm_scale expects raw [N, C] and mask [N]")
    if not mask.any():
        return np.ones(raw.shape[1])
    rms = np.sqrt(np.mean(raw[mask] ** 2, axis=0))
    scale = np.where(rms > floor, 1.0 / np.maximum(rms, floor), 1.0)
    return scale
