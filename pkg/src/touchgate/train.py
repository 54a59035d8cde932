"""Training: Adam, the composite action + gate objective with teacher-forced
query switching, and the pretrain/finetune entry points.

The composite loss on a batch is L = L_a + lambda_gate * L_g. The action
loss L_a conditions each example on exactly one query source: the state
token on non-contact frames, the tactile token on contact frames (gated
variants, teacher forced from the dataset contact label); direct variants
use the tactile token on every frame, the vanilla variant the state token.
The unused source is never added to the graph, so its encoder receives an
exactly zero gradient from that example. The gate loss L_g is a BCE on the
gate head over detached tactile tokens: it trains the gate on every frame
without leaking gradients into the tactile encoder from non-contact frames.

With the slow stream frozen (the finetune default), slow latents for the
whole dataset are precomputed once and enter training graphs as constants.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .config import Config
from .expert import ConditioningToken, flow_match_loss_batch
from .nn import ParamStore
from .policy import Policy, VariantSpec
from .rng import Rng
from .runtime import assemble_training_example, training_lag_sampler
from .sim.dataset import EpisodeIndex
from .slowstream import SlowLatents, freeze
from .tactile import fit_norm_scale, gate_loss


class Adam:
    """Adam with global-norm gradient clipping over unfrozen params."""

    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float = 0.0):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(store.get(n).data, dtype=np.float64)
                  for n in store.names()}
        self.v = {n: np.zeros_like(store.get(n).data, dtype=np.float64)
                  for n in store.names()}
        self.skipped_nonfinite = 0

    def zero_grad(self):
        self.store.zero_grad()

    def step(self) -> bool:
        """Apply one update. Returns False (and skips) on non-finite grads."""
        live = [(n, t) for n, t in self.store.items()
                if not t.frozen and t.grad is not None]
        if not live:
            return False
        if any(not np.all(np.isfinite(t.grad)) for _, t in live):
            self.skipped_nonfinite += 1
            return False
        scale = 1.0
        if self.clip_norm > 0.0:
            total = np.sqrt(sum(float(np.sum(np.square(
                t.grad.astype(np.float64)))) for _, t in live))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for n, t in live:
            grad = t.grad.astype(np.float64) * scale
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * grad
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * np.square(grad)
            update = self.lr * (self.m[n] / b1t) / (np.sqrt(self.v[n] / b2t) + self.eps)
            t.data = (t.data.astype(np.float64) - update).astype(t.data.dtype)
        return True


# ---- dataset access -----------------------------------------------------------------


def raw_tactile_matrix(columns: dict, fmt: str) -> np.ndarray:
    """[N, raw_dim] un-normalized tactile features for one format."""
    if fmt == "force6":
        return columns["force6"].astype(np.float64)
    if fmt == "marker2d":
        n = columns["marker2d"].shape[0]
        return columns["marker2d"].astype(np.float64).reshape(n, -1)
    if fmt == "vtimage":
        n = columns["vt_image"].shape[0]
        return columns["vt_image"].astype(np.float64).reshape(n, -1)
    raise ValueError(f"unknown tactile format {fmt!r}")


def fit_dataset_norm(columns: dict, fmt: str) -> np.ndarray:
    raw = raw_tactile_matrix(columns, fmt)
    mask = columns["contact_label"].astype(bool)
    return fit_norm_scale(raw, mask)


def fit_action_scale(columns: dict, floor: float = 1e-3) -> np.ndarray:
    """Per-dim std of the demonstrated actions; flow matching runs on
    actions / scale so every dim carries unit-order signal."""
    std = columns["expert_action"].astype(np.float64).std(axis=0)
    return np.maximum(std, floor)


class SlowCache:
    """Precomputed slow latents for every dataset frame (frozen slow only)."""

    def __init__(self, kv: np.ndarray, mask_row: np.ndarray):
        self.kv = kv                # [N, n_kv, d] float32
        self.mask_row = mask_row    # [n_kv] bool, shared by every frame

    @classmethod
    def build(cls, policy: Policy, columns: dict, batch: int = 256) -> "SlowCache":
        n = columns["image"].shape[0]
        outs = []
        mask_row = None
        for i in range(0, n, batch):
            imgs = columns["image"][i: i + batch].astype(np.float64)
            instr = columns["instruction"][i: i + batch]
            g = Graph(dtype=policy.store.dtype, grad_enabled=False)
            lat = policy.slow.encode(g, imgs, instr)
            outs.append(lat.kv.data.astype(np.float32))
            rows = lat.key_mask
            if mask_row is None:
                mask_row = rows[0]
            if not np.all(rows == rows[0]):
                raise ValueError("instruction masks differ; cannot share one row")
        return cls(np.concatenate(outs, axis=0), mask_row)


# ---- batch assembly ------------------------------------------------------------------


@dataclass
class Batch:
    slow_idx: np.ndarray          # [B] frame index for slow inputs
    cond_idx: np.ndarray          # [B] frame index for conditioning + chunk
    actions: np.ndarray           # [B, H, D_a]
    contact: np.ndarray           # [B] labels at the conditioning frame
    use_tactile: np.ndarray       # [B] bool query-switch decision (teacher)
    n_state: int                  # examples 0..n_state-1 use the state query
    resamples: int = 0


def sample_batch(columns: dict, index: EpisodeIndex, spec: VariantSpec,
                 cfg: Config, rng: Rng) -> Batch:
    """Draw a training batch; examples are ordered state-query first."""
    n = columns["episode_id"].shape[0]
    starts = np.array([s for s, _ in index.episodes])
    H = cfg.horizon
    rows = []
    resamples = 0
    while len(rows) < cfg.batch_size:
        anchor = int(rng.uniform_int(0, n))
        ep = int(np.searchsorted(starts, anchor, side="right")) - 1
        bounds = index.episodes[ep]
        if spec.dual_stream:
            contact_anchor = bool(columns["contact_label"][anchor])
            k = training_lag_sampler(rng, H, contact_anchor)
        else:
            k = 0
        ex = assemble_training_example(columns, bounds, anchor, k, H)
        if ex is None:
            resamples += 1
            continue
        rows.append(ex)
    contact = np.array([r["contact"] for r in rows], dtype=np.int64)
    if spec.tactile_format is None:
        use_tactile = np.zeros(len(rows), dtype=bool)
    elif spec.direct:
        use_tactile = np.ones(len(rows), dtype=bool)
    else:
        use_tactile = contact.astype(bool)   # teacher-forced query switch
    order = np.argsort(use_tactile, kind="stable")
    rows = [rows[i] for i in order]
    return Batch(
        slow_idx=np.array([r["slow_idx"] for r in rows], dtype=np.int64),
        cond_idx=np.array([r["cond_idx"] for r in rows], dtype=np.int64),
        actions=np.stack([r["actions"] for r in rows]),
        contact=contact[order],
        use_tactile=use_tactile[order],
        n_state=int(np.sum(~use_tactile)),
        resamples=resamples)


# ---- one training step ----------------------------------------------------------------


@dataclass
class StepStats:
    loss: float
    action_loss: float
    gate_loss: float
    resamples: int


def composite_step(policy: Policy, columns: dict, index: EpisodeIndex,
                   cfg: Config, opt: Adam, rng: Rng,
                   cache: SlowCache | None = None,
                   raw64: np.ndarray | None = None) -> StepStats:
    spec = policy.spec
    if raw64 is None and spec.tactile_format is not None:
        raw64 = raw_tactile_matrix(columns, spec.tactile_format)
    batch = sample_batch(columns, index, spec, cfg, rng)
    B = cfg.batch_size
    g = Graph(dtype=policy.store.dtype)

    # slow latents: cached constants when frozen, live encode otherwise
    if cache is not None:
        kv = g.constant(cache.kv[batch.slow_idx].astype(np.float64))
        mask = np.repeat(cache.mask_row[None], B, axis=0)
        slow = SlowLatents(kv=kv, key_mask=mask, issued_step=0,
                           n_patches=policy.slow.n_patches)
    else:
        imgs = columns["image"][batch.slow_idx].astype(np.float64)
        instr = columns["instruction"][batch.slow_idx]
        slow = policy.slow.encode(g, imgs, instr)

    # conditioning: state rows then tactile rows, each encoded only for the
    # examples that use it
    parts = []
    if batch.n_state > 0:
        states = columns["state"][batch.cond_idx[:batch.n_state]].astype(np.float64)
        parts.append(policy.state_enc.encode(g, states))
    if batch.n_state < B:
        raw = raw64[batch.cond_idx[batch.n_state:]] * policy.tactile_enc.norm_scale
        parts.append(policy.tactile_enc.encode_raw(g, raw))
    cond_tok = parts[0] if len(parts) == 1 else g.concat(parts, axis=0)
    cond = ConditioningToken(token=cond_tok, source="mixed")

    targets = batch.actions / policy.action_scale
    action_loss = flow_match_loss_batch(g, policy.expert, targets, cond,
                                        slow, rng)
    loss = action_loss
    gate_val = 0.0
    if policy.gate is not None:
        # gate trains on every frame; tokens are detached so the encoder
        # never receives gate-loss gradients
        gd = Graph(dtype=policy.store.dtype, grad_enabled=False)
        raw = raw64[batch.cond_idx] * policy.tactile_enc.norm_scale
        detached = policy.tactile_enc.encode_raw(gd, raw).data
        logits = policy.gate.logits(g, g.constant(detached))
        g_loss = gate_loss(g, logits, batch.contact.astype(np.float64))
        loss = g.add(action_loss, g.scale(g_loss, cfg.lambda_gate))
        gate_val = float(g_loss.data)

    opt.zero_grad()
    g.backward(loss)
    opt.step()
    # the logged total is composed from the logged parts in float64 so the
    # decomposition holds exactly in the training record
    action_val = float(action_loss.data)
    total = action_val + cfg.lambda_gate * gate_val if policy.gate is not None \
        else action_val
    return StepStats(loss=total, action_loss=action_val,
                     gate_loss=gate_val, resamples=batch.resamples)


# ---- entry points -----------------------------------------------------------------------


@dataclass
class TrainLog:
    steps: int
    losses: list = field(default_factory=list)
    action_losses: list = field(default_factory=list)
    gate_losses: list = field(default_factory=list)
    seconds: float = 0.0
    skipped_nonfinite: int = 0

    def tail_mean(self, n: int = 100) -> float:
        xs = self.losses[-n:]
        return float(np.mean(xs)) if xs else float("nan")


def train_policy(policy: Policy, columns: dict, cfg: Config, steps: int,
                 seed: int, cache: SlowCache | None = None,
                 log_every: int = 0) -> TrainLog:
    index = EpisodeIndex(columns)
    opt = Adam(policy.store, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
               cfg.adam_eps, cfg.clip_norm)
    rng = Rng(seed)
    log = TrainLog(steps=steps)
    raw64 = None
    if policy.spec.tactile_format is not None:
        raw64 = raw_tactile_matrix(columns, policy.spec.tactile_format)
    t0 = time.time()
    for s in range(steps):
        st = composite_step(policy, columns, index, cfg, opt, rng.child(s),
                            cache=cache, raw64=raw64)
        log.losses.append(st.loss)
        log.action_losses.append(st.action_loss)
        log.gate_losses.append(st.gate_loss)
        if log_every and (s + 1) % log_every == 0:
            print(f"  step {s + 1}/{steps} loss {np.mean(log.losses[-log_every:]):.4f}",
                  flush=True)
    log.seconds = time.time() - t0
    log.skipped_nonfinite = opt.skipped_nonfinite
    return log


def pretrain_vanilla(cfg: Config, columns: dict, seed: int,
                     log_every: int = 0) -> tuple[Policy, TrainLog]:
    """Train the tactile-free policy from scratch on the full dataset."""
    from .policy import VARIANTS
    policy = Policy.build(cfg, VARIANTS["ex0"], seed=seed)
    policy.action_scale = fit_action_scale(columns)
    log = train_policy(policy, columns, cfg, cfg.pretrain_steps, seed + 1,
                       log_every=log_every)
    return policy, log


def finetune_variant(cfg: Config, columns: dict, variant: str, seed: int,
                     pretrained_path: str | None = None,
                     log_every: int = 0) -> tuple[Policy, TrainLog]:
    """Build a variant, warm-start shared modules, freeze the slow stream
    (when configured), fit tactile normalization, then train."""
    from .policy import VARIANTS
    policy = Policy.build(cfg, VARIANTS[variant], seed=seed)
    if pretrained_path is not None:
        policy.init_from(pretrained_path)
    policy.action_scale = fit_action_scale(columns)
    if policy.tactile_enc is not None:
        policy.tactile_enc.set_norm_scale(
            fit_dataset_norm(columns, policy.spec.tactile_format))
    cache = None
    if cfg.freeze_slow:
        freeze(policy.store, True, prefixes=("slow.",))
        cache = SlowCache.build(policy, columns)
    log = train_policy(policy, columns, cfg, cfg.finetune_steps, seed + 1,
                       cache=cache, log_every=log_every)
    return policy, log
