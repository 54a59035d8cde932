"""Asynchronous slow/fast control runtime.

The slow stream refreshes scene latents on a 3:1 cadence against the fast
stream, re-anchored whenever the contact gate engages dual-stream mode: one
slow inference fires on the tick the gate turns on, then every h_infer ticks
while it stays on (so a gate-active window of length W sees exactly
ceil(W / h_infer) slow calls). Outside active windows the cadence continues
every h_infer ticks from the last refresh, keeping latent staleness at most
h_infer - 1 everywhere. The fast stream runs every tick and only reads the
latest latents; there is no code path from the fast step into the slow
encoder, and a counter proves it.

When the contact gate is off, the policy executes H-step action chunks open
loop, re-planning at chunk boundaries. When the gate switches on (dual
stream variants), execution becomes receding horizon: re-plan every tick
from fresh tactile conditioning, execute only the first action.

A hysteresis filter (default 2 ticks) keeps the gate from chattering; 0
restores the literal per-tick decision.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph
from .config import Config
from .expert import ConditioningToken
from .policy import Policy
from .rng import Rng
from .sim.world import World
from .slowstream import SlowLatents
from .tactile import TactileReading


def zero_reading(cfg: Config) -> TactileReading:
    """The reading a disconnected sensor reports."""
    return TactileReading(
        force6=np.zeros(6),
        marker2d=np.zeros((cfg.sim_n_markers, 2)),
        vt_image=np.zeros((cfg.sim_vt_size, cfg.sim_vt_size, 3)),
    )


class GateFilter:
    """Debounces raw gate decisions: the state flips only once the raw
    decision has disagreed with it for `hysteresis` consecutive ticks
    (the flip lands on the Nth disagreeing tick). hysteresis 0 or 1 passes
    the raw decision through."""

    def __init__(self, hysteresis: int):
        self.hysteresis = int(hysteresis)
        self.state = False
        self._run = 0

    def update(self, raw: bool) -> bool:
        if self.hysteresis <= 1:
            self.state = bool(raw)
            self._run = 0
            return self.state
        if raw != self.state:
            self._run += 1
            if self._run >= self.hysteresis:
                self.state = bool(raw)
                self._run = 0
        else:
            self._run = 0
        return self.state


@dataclass
class EpisodeResult:
    task: str
    seed: int
    flags: dict
    ticks: int
    fail_reason: str
    actions: np.ndarray
    gate_trace: np.ndarray
    contact_trace: np.ndarray
    slow_calls: int
    fast_calls_slow: int
    staleness_hist: dict
    slow_ticks: list = field(default_factory=list)
    fast_ms: list = field(default_factory=list)
    replan_ms: list = field(default_factory=list)
    slow_ms: list = field(default_factory=list)
    attn_mass: list = field(default_factory=list)
    aborted: str | None = None


class _SlowChannel:
    """Owns the only path to the slow encoder and the latest latents."""

    def __init__(self, policy: Policy):
        self.policy = policy
        self.kv: np.ndarray | None = None
        self.mask: np.ndarray | None = None
        self.issued_step = -1
        self.calls = 0

    def refresh(self, image: np.ndarray, instruction: np.ndarray, tick: int):
        g = Graph(dtype=self.policy.store.dtype, grad_enabled=False)
        ids = self.policy.slow.pad_instructions([instruction])
        lat = self.policy.slow.encode(g, image[None], ids, tick=tick)
        self.kv = lat.kv.data[0]        # single episode: drop the batch dim
        self.mask = lat.key_mask[0]
        self.issued_step = tick
        self.calls += 1


def _encode_state_np(policy: Policy, state: np.ndarray) -> np.ndarray:
    g = Graph(dtype=policy.store.dtype, grad_enabled=False)
    return policy.state_enc.encode(g, np.asarray(state)[None]).data[0]


def _encode_tactile_np(policy: Policy, reading: TactileReading) -> np.ndarray:
    g = Graph(dtype=policy.store.dtype, grad_enabled=False)
    raw = policy.tactile_enc.raw_batch([reading])
    return policy.tactile_enc.encode_raw(g, raw).data[0]


def _sample_chunk_np(policy: Policy, cond_data: np.ndarray, cond_source: str,
                     kv: np.ndarray, mask: np.ndarray, issued: int,
                     rng: Rng) -> np.ndarray:
    """Euler-integrate the flow field; single episode."""
    K = policy.cfg.flow_steps
    H, D_a = policy.cfg.horizon, policy.cfg.action_dim
    x = rng.standard_normal((H, D_a))
    for i in range(K):
        g = Graph(dtype=policy.store.dtype, grad_enabled=False)
        cond = ConditioningToken(token=g.constant(cond_data[None]), source=cond_source)
        slow = SlowLatents(kv=g.constant(kv[None]), key_mask=mask,
                           issued_step=issued, n_patches=policy.slow.n_patches)
        v, _ = policy.expert.velocity_batch(g, x[None], np.array([i / K]), cond, slow)
        x = x + v.data[0] / K
        if not np.all(np.isfinite(x)):
            raise ValueError(f"non-finite chunk at integration step {i}")
    return x * policy.action_scale


def attention_probe_np(policy: Policy, cond_data: np.ndarray, cond_source: str,
                       kv: np.ndarray, mask: np.ndarray,
                       target_patches: list[int]) -> float:
    """Mass the conditioning query places on target image patches.

    Final expert block, heads averaged, conditioning query row, keys
    restricted to the image patches and renormalized.
    """
    g = Graph(dtype=policy.store.dtype, grad_enabled=False)
    cond = ConditioningToken(token=g.constant(cond_data[None]), source=cond_source)
    slow = SlowLatents(kv=g.constant(kv[None]), key_mask=mask, issued_step=0,
                       n_patches=policy.slow.n_patches)
    H, D_a = policy.cfg.horizon, policy.cfg.action_dim
    _, attn = policy.expert.velocity_batch(
        g, np.zeros((1, H, D_a)), np.array([0.5]), cond, slow, record_attn=True)
    w = attn[-1]                      # [B, n_h, n_q, n_kv] from the last block
    w = w.mean(axis=1)[0]             # heads averaged -> [n_q, n_kv]
    row = w[0]                        # conditioning token is query row 0
    patches = row[: policy.slow.n_patches]
    total = float(patches.sum())
    if total <= 0.0:
        return 0.0
    patches = patches / total
    return float(patches[list(target_patches)].sum())


def run_episode(policy: Policy, task: str, seed: int, *, mode: str = "auto",
                tactile_supply: str = "real", record_attn: bool = False,
                collect_timing: bool = False, sim_cfg=None,
                attn_stride: int = 4) -> EpisodeResult:
    """Closed-loop rollout of one episode under the dual-stream scheduler."""
    if mode not in ("auto", "force_gate_on", "force_gate_off"):
        raise ValueError(f"unknown mode {mode!r}")
    if tactile_supply not in ("real", "zeroed"):
        raise ValueError(f"unknown tactile supply {tactile_supply!r}")
    cfg = policy.cfg
    world = World(sim_cfg or cfg.sim_config(), task, seed)
    rng = Rng(seed).child(9)               # policy-side stream, per-tick children
    channel = _SlowChannel(policy)
    gate_filter = GateFilter(cfg.gate_hysteresis)
    fast_calls_slow = 0                    # no fast-path slow call exists; stays 0
    staleness_hist: dict[int, int] = {}
    actions, gate_trace, contact_trace = [], [], []
    slow_ticks: list[int] = []
    fast_ms, replan_ms, slow_ms, attn_mass = [], [], [], []
    plan: np.ndarray | None = None
    ptr = 0
    zero = zero_reading(cfg)
    aborted = None
    last_refresh = -cfg.h_infer
    engaged_prev = False

    while not world.terminal:
        t = world.tick
        tick_t0 = time.perf_counter()

        _, contact_label, _ = world.true_forces()
        contact_trace.append(contact_label)

        if policy.uses_tactile():
            reading = world.tactile_reading()[0] if tactile_supply == "real" else zero
        else:
            reading = None

        if policy.gate is not None and mode == "auto":
            token = _encode_tactile_np(policy, reading)
            raw = policy.gate.score(token).active
            gate_on = gate_filter.update(raw)
        elif mode == "force_gate_on":
            gate_on = True
        elif mode == "force_gate_off":
            gate_on = False
        else:
            gate_on = False            # vanilla or direct variants have no gate
        gate_trace.append(int(gate_on))

        # slow refresh: re-anchored on the tick dual-stream mode engages,
        # otherwise every h_infer ticks since the last refresh
        engaged = policy.spec.dual_stream and gate_on
        pre_slow = time.perf_counter()
        if (t - last_refresh >= cfg.h_infer) or (engaged and not engaged_prev):
            s0 = time.perf_counter()
            channel.refresh(world.render(), world.instruction_ids(), t)
            last_refresh = t
            slow_ticks.append(t)
            if collect_timing:
                slow_ms.append((time.perf_counter() - s0) * 1e3)
        engaged_prev = engaged
        post_slow = time.perf_counter()

        staleness = t - channel.issued_step
        staleness_hist[staleness] = staleness_hist.get(staleness, 0) + 1
        if staleness > cfg.staleness_max:
            aborted = f"stale latents: {staleness} > {cfg.staleness_max}"
            break

        tactile_query = policy.spec.direct or (policy.spec.gated and gate_on
                                               and mode != "force_gate_off")
        receding = policy.spec.dual_stream and gate_on

        replan = receding or plan is None or ptr >= len(plan)
        if replan:
            if tactile_query:
                if cfg.n_cond != 1:
                    raise ValueError("tactile conditioning requires n_cond == 1")
                cond_data = _encode_tactile_np(policy, reading)
                source = "tactile"
            else:
                cond_data = _encode_state_np(policy, world.state_vector())
                source = "state"
            chunk = _sample_chunk_np(policy, cond_data, source, channel.kv,
                                     channel.mask, channel.issued_step,
                                     rng.child(t))
            plan, ptr = chunk, 0
            if record_attn and t % attn_stride == 0:
                attn_mass.append((t, contact_label, attention_probe_np(
                    policy, cond_data, source, channel.kv, channel.mask,
                    world.target_patch_indices(cfg.patch))))
        action = plan[ptr]
        ptr += 1
        if collect_timing:
            # fast-step time excludes the slow refresh segment
            dt = ((pre_slow - tick_t0)
                  + (time.perf_counter() - post_slow)) * 1e3
            fast_ms.append(dt)
            if replan:
                replan_ms.append(dt)
        actions.append(action.copy())
        world.step(action)

    flags = world.stages.as_flags()
    return EpisodeResult(
        task=task, seed=seed, flags=flags, ticks=world.tick,
        fail_reason=world.fail_reason or "", actions=np.asarray(actions),
        gate_trace=np.asarray(gate_trace, dtype=np.int64),
        contact_trace=np.asarray(contact_trace, dtype=np.int64),
        slow_calls=channel.calls, fast_calls_slow=fast_calls_slow,
        staleness_hist=staleness_hist, slow_ticks=slow_ticks,
        fast_ms=fast_ms, replan_ms=replan_ms,
        slow_ms=slow_ms, attn_mass=attn_mass, aborted=aborted)


# ---- lockstep batched evaluation -------------------------------------------------

class _EpisodeSlot:
    def __init__(self, policy: Policy, task: str, seed: int, sim_cfg):
        self.world = World(sim_cfg, task, seed)
        self.seed = seed
        self.rng = Rng(seed).child(9)
        self.gate_filter = GateFilter(policy.cfg.gate_hysteresis)
        self.plan = None
        self.ptr = 0
        self.kv = None
        self.mask = None
        self.issued = -1
        self.last_refresh = -policy.cfg.h_infer
        self.engaged_prev = False
        self.contact = []
        self.gate_trace = []
        self.slow_ticks = []


def run_episodes_batched(policy: Policy, task: str, seeds: list[int], *,
                         mode: str = "auto", tactile_supply: str = "real",
                         sim_cfg=None) -> list[EpisodeResult]:
    """Lockstep rollout of many episodes with batched network forwards.

    Scheduler semantics per episode match run_episode exactly (refresh
    cadence, hysteresis, regimes, per-tick noise streams); only the tensor
    work is batched across live episodes.
    """
    cfg = policy.cfg
    sim_cfg = sim_cfg or cfg.sim_config()
    slots = [_EpisodeSlot(policy, task, s, sim_cfg) for s in seeds]
    zero = zero_reading(cfg)
    results: dict[int, EpisodeResult] = {}
    K = cfg.flow_steps
    H, D_a = cfg.horizon, cfg.action_dim

    while True:
        live = [s for s in slots if not s.world.terminal]
        if not live:
            break
        tick = live[0].world.tick   # all live episodes share the tick counter

        # per-episode readings and gate decisions (the refresh schedule
        # depends on the gate, so these come first, as in run_episode)
        need_tactile = policy.uses_tactile()
        readings = []
        for s in live:
            lbl = s.world.true_forces()[1]
            s.contact.append(lbl)
            if need_tactile:
                readings.append(s.world.tactile_reading()[0]
                                if tactile_supply == "real" else zero)
        tokens = None
        if need_tactile:
            g = Graph(dtype=policy.store.dtype, grad_enabled=False)
            raw = policy.tactile_enc.raw_batch(readings)
            tokens = policy.tactile_enc.encode_raw(g, raw).data  # [B, 1, d]
        gate_on = []
        for i, s in enumerate(live):
            if policy.gate is not None and mode == "auto":
                raw_dec = policy.gate.score(tokens[i]).active
                gate_on.append(s.gate_filter.update(raw_dec))
            elif mode == "force_gate_on":
                gate_on.append(True)
            else:
                gate_on.append(False)
            s.gate_trace.append(int(gate_on[-1]))

        # slow refresh (batched over the episodes whose refresh is due):
        # re-anchor on dual-stream engagement, else every h_infer ticks
        due = []
        for i, s in enumerate(live):
            engaged = policy.spec.dual_stream and gate_on[i]
            if (tick - s.last_refresh >= cfg.h_infer) or (engaged
                                                          and not s.engaged_prev):
                due.append(i)
            s.engaged_prev = engaged
        if due:
            images = np.stack([live[i].world.render() for i in due])
            instr = policy.slow.pad_instructions(
                [live[i].world.instruction_ids() for i in due])
            g = Graph(dtype=policy.store.dtype, grad_enabled=False)
            lat = policy.slow.encode(g, images, instr, tick=tick)
            for j, i in enumerate(due):
                s = live[i]
                s.kv = lat.kv.data[j]
                s.mask = lat.key_mask[j: j + 1]
                s.issued = tick
                s.last_refresh = tick
                s.slow_ticks.append(tick)

        replan_idx, cond_rows, sources = [], [], []
        states_needed = []
        for i, s in enumerate(live):
            tq = policy.spec.direct or (policy.spec.gated and gate_on[i]
                                        and mode != "force_gate_off")
            receding = policy.spec.dual_stream and gate_on[i]
            if receding or s.plan is None or s.ptr >= len(s.plan):
                replan_idx.append(i)
                sources.append("tactile" if tq else "state")
                if tq:
                    cond_rows.append(tokens[i])
                else:
                    cond_rows.append(None)
                    states_needed.append((len(cond_rows) - 1, s.world.state_vector()))
        if states_needed:
            g = Graph(dtype=policy.store.dtype, grad_enabled=False)
            st = policy.state_enc.encode(
                g, np.stack([sv for _, sv in states_needed])).data
            for j, (slot_pos, _) in enumerate(states_needed):
                cond_rows[slot_pos] = st[j]

        if replan_idx:
            B = len(replan_idx)
            cond = np.stack(cond_rows)                       # [B, n_c, d]
            kv = np.stack([live[i].kv for i in replan_idx])  # [B, n, d]
            mask = np.concatenate([live[i].mask for i in replan_idx], axis=0)
            x = np.stack([live[i].rng.child(tick).standard_normal((H, D_a))
                          for i in replan_idx])
            for k in range(K):
                g = Graph(dtype=policy.store.dtype, grad_enabled=False)
                ct = ConditioningToken(token=g.constant(cond), source="mixed")
                slow = SlowLatents(kv=g.constant(kv), key_mask=mask,
                                   issued_step=tick, n_patches=policy.slow.n_patches)
                v, _ = policy.expert.velocity_batch(
                    g, x, np.full(B, k / K), ct, slow)
                x = x + v.data / K
            for j, i in enumerate(replan_idx):
                live[i].plan = x[j] * policy.action_scale
                live[i].ptr = 0

        for s in live:
            action = s.plan[s.ptr]
            s.ptr += 1
            s.world.step(action)
            if s.world.terminal:
                flags = s.world.stages.as_flags()
                results[s.seed] = EpisodeResult(
                    task=task, seed=s.seed, flags=flags, ticks=s.world.tick,
                    fail_reason=s.world.fail_reason or "",
                    actions=np.zeros((0, 4)),
                    gate_trace=np.asarray(s.gate_trace, dtype=np.int64),
                    contact_trace=np.asarray(s.contact, dtype=np.int64),
                    slow_calls=len(s.slow_ticks), fast_calls_slow=0,
                    staleness_hist={}, slow_ticks=list(s.slow_ticks))
    return [results[s] for s in seeds]


# ---- training-time lag matching ----------------------------------------------------

def training_lag_sampler(rng: Rng, H: int, contact: bool) -> int:
    """Slow-latent staleness k for one training example.

    Contact frames: draw a horizon h uniformly from {2..H-1}, then k
    uniformly from {0..h-1}. Non-contact frames train at zero lag.
    """
    if not contact:
        return 0
    h = rng.uniform_int(2, H)
    return int(rng.uniform_int(0, h))


def lag_law_pmf(H: int) -> np.ndarray:
    """Exact pmf of training_lag_sampler over k = 0..H-2 for contact frames."""
    ks = np.zeros(H - 1)
    hs = range(2, H)
    for h in hs:
        for k in range(h):
            ks[k] += 1.0 / h
    return ks / len(list(hs))


def assemble_training_example(columns: dict, ep_bounds: tuple[int, int],
                              anchor: int, k: int, H: int):
    """One training example: slow inputs at the anchor, conditioning and the
    action chunk at anchor + k, chunk padded by repeating the final action.

    Returns None when anchor + k runs past the episode (caller resamples).
    """
    start, end = ep_bounds
    if not (start <= anchor < end):
        raise ValueError("anchor outside the episode")
    cond_idx = anchor + k
    if cond_idx >= end:
        return None
    chunk = columns["expert_action"][cond_idx: min(cond_idx + H, end)]
    if chunk.shape[0] < H:
        pad = np.repeat(chunk[-1:], H - chunk.shape[0], axis=0)
        chunk = np.concatenate([chunk, pad], axis=0)
    return {"slow_idx": anchor, "cond_idx": cond_idx,
            "actions": np.asarray(chunk, dtype=np.float64),
            "contact": int(columns["contact_label"][cond_idx])}


def timing_report(results: list[EpisodeResult], budget_ms: float) -> dict:
    fast = np.concatenate([r.fast_ms for r in results if r.fast_ms]) \
        if any(r.fast_ms for r in results) else np.zeros(1)
    replan = np.concatenate([r.replan_ms for r in results if r.replan_ms]) \
        if any(r.replan_ms for r in results) else np.zeros(1)
    slow = np.concatenate([r.slow_ms for r in results if r.slow_ms]) \
        if any(r.slow_ms for r in results) else np.zeros(1)
    hist: dict[int, int] = {}
    for r in results:
        for k, v in r.staleness_hist.items():
            hist[k] = hist.get(k, 0) + v
    rep = {
        "fast_p50_ms": float(np.percentile(fast, 50)),
        "fast_p95_ms": float(np.percentile(fast, 95)),
        "replan_p50_ms": float(np.percentile(replan, 50)),
        "replan_p95_ms": float(np.percentile(replan, 95)),
        "slow_p50_ms": float(np.percentile(slow, 50)),
        "staleness_hist": dict(sorted(hist.items())),
        "slow_calls": int(sum(r.slow_calls for r in results)),
        "fast_calls_slow": int(sum(r.fast_calls_slow for r in results)),
    }
    rep["budget_met"] = bool(rep["replan_p50_ms"] <= budget_ms)
    return rep


def expected_slow_calls(ticks: int, h_infer: int) -> int:
    """Slow calls for a run whose gate never engages (uniform cadence)."""
    return math.ceil(ticks / h_infer)


def gate_windows(gate_trace) -> list[tuple[int, int]]:
    """Maximal runs of consecutive active ticks, as inclusive (start, end)."""
    out = []
    start = None
    for t, v in enumerate(gate_trace):
        if v and start is None:
            start = t
        elif not v and start is not None:
            out.append((start, t - 1))
            start = None
    if start is not None:
        out.append((start, len(gate_trace) - 1))
    return out
