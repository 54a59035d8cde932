"""Command line: data generation, the two training phases, closed-loop
evaluation, the ex0-ex7 ablation grid, attention analysis, and reports.

Exit codes: 0 success, 1 usage error, 2 data error, 3 acceptance failure
(report --check).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .autodiff import Graph
from .checkpoint import CheckpointError
from .config import Config, ConfigError, load_config
from .expert import ConditioningToken
from .metrics import (MetricsError, aggregate_by, directional_verdicts,
                      read_metrics, render_table, row_from_results,
                      write_metrics)
from .policy import VARIANTS, Policy
from .rng import Rng
from .runtime import run_episode, run_episodes_batched, timing_report
from .sim.dataset import (episode_seed, generate_frames, read_dataset,
                          write_dataset)
from .sim.world import TASKS, World
from .slowstream import SlowLatents
from .train import finetune_variant, pretrain_vanilla, raw_tactile_matrix

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

# evaluation episodes draw from a seed namespace far above any plausible
# dataset base seed, so train and eval worlds never coincide
EVAL_SEED_BASE = 10_000

ATTN_FORMAT = "touchgate-attn"
ATTN_VERSION = 1


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_common(p: _Parser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None,
                   help="run seed (default: config seed)")
    p.add_argument("--out", help="output path")
    p.add_argument("--deterministic", action="store_true",
                   help="zero wall-clock fields so reruns are byte-identical")


def build_parser() -> _Parser:
    p = _Parser(prog="touchgate")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", parents=[], help="write a demonstration dataset")
    _add_common(g)
    g.add_argument("--task", default=None,
                   help="comma-separated tasks (default: config task list)")
    g.add_argument("--episodes", type=int, default=None,
                   help="episodes per task (default: config)")
    g.add_argument("--text", action="store_true", help="JSONL instead of binary")

    t = sub.add_parser("pretrain", help="train the tactile-free policy")
    _add_common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--log-every", type=int, default=500)

    f = sub.add_parser("finetune", help="train one ablation variant")
    _add_common(f)
    f.add_argument("--variant", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--init", default=None, help="pretrained vanilla checkpoint")
    f.add_argument("--steps", type=int, default=None)
    f.add_argument("--log-every", type=int, default=500)

    e = sub.add_parser("eval", help="closed-loop evaluation of a checkpoint")
    _add_common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--mode", choices=["auto", "gate-on", "gate-off"],
                   default="auto")
    e.add_argument("--no-tactile", action="store_true",
                   help="zero tactile input at inference (same weights)")
    e.add_argument("--batched", action="store_true",
                   help="lockstep batched rollouts (no timing)")
    e.add_argument("--attn", action="store_true",
                   help="record attention-mass probes during rollouts")
    e.add_argument("--experiment-id", default=None)

    a = sub.add_parser("ablate", help="full ex0-ex7 grid over seeds")
    _add_common(a)
    a.add_argument("--data", default=None,
                   help="dataset path (generated under --out if absent)")
    a.add_argument("--seeds", default="1,2,3,4,5")
    a.add_argument("--variants", default=",".join(VARIANTS))
    a.add_argument("--episodes", type=int, default=None)
    a.add_argument("--tasks", default=None,
                   help="eval tasks (default: all four)")
    a.add_argument("--log-every", type=int, default=0)

    d = sub.add_parser("dump-attn", help="cross-attention weights over image patches")
    _add_common(d)
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--frames", default="grasp",
                   help="'grasp' (pre-grasp frames), 'a:b' row range, or i,j,k")
    d.add_argument("--task", default="pick_place")
    d.add_argument("--layer", type=int, default=-1,
                   help="expert block for the summary mass (default last)")
    d.add_argument("--max-frames", type=int, default=256)

    r = sub.add_parser("report", help="consolidate metrics files")
    _add_common(r)
    r.add_argument("--in", dest="in_dir", required=True)
    r.add_argument("--check", action="store_true",
                   help="exit 3 unless the expected ablation orderings hold")
    return p


def _load_config(args) -> Config:
    if getattr(args, "config", None):
        return load_config(args.config)
    return Config()


def _seed(args, cfg: Config) -> int:
    return cfg.seed if args.seed is None else args.seed


def _eval_seeds(seed: int, task: str, episodes: int) -> list[int]:
    return [episode_seed(EVAL_SEED_BASE + seed, task, i) for i in range(episodes)]


# ---- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    tasks = args.task.split(",") if args.task else cfg.task_list()
    for t in tasks:
        if t not in TASKS:
            raise UsageError(f"unknown task {t!r}; choose from {', '.join(TASKS)}")
    episodes = args.episodes if args.episodes is not None else cfg.episodes_per_task
    if not args.out:
        raise UsageError("gen-data requires --out")
    columns, summary = generate_frames(cfg.sim_config(), tasks, episodes,
                                       seed=seed,
                                       max_instruction=cfg.max_instruction)
    write_dataset(args.out, columns, cfg.config_hash(), tasks, episodes,
                  seed, text=args.text)
    size = os.path.getsize(args.out)
    print(f"wrote {args.out}: {summary['episodes']} episodes, "
          f"{summary['frames']} frames, {size} bytes")
    print(f"expert success {summary['success_rate']:.3f} "
          f"({', '.join(f'{t}={v:.2f}' for t, v in summary['per_task_success'].items())}), "
          f"contact fraction {summary['contact_fraction']:.3f}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.pretrain_steps = args.steps
    seed = _seed(args, cfg)
    if not args.out:
        raise UsageError("pretrain requires --out")
    columns, header = read_dataset(args.data)
    policy, log = pretrain_vanilla(cfg, columns, seed=seed,
                                   log_every=args.log_every)
    policy.save(args.out, meta={"phase": "pretrain", "steps": log.steps,
                                "seed": seed, "final_loss": log.tail_mean(),
                                "dataset_records": header["record_count"]})
    print(f"wrote {args.out}: {policy.param_count()} params, "
          f"{log.steps} steps in {log.seconds:.0f}s, "
          f"tail loss {log.tail_mean():.4f}, "
          f"skipped {log.skipped_nonfinite} non-finite steps")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    if args.steps is not None:
        cfg.finetune_steps = args.steps
    seed = _seed(args, cfg)
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; "
                         f"choose from {', '.join(VARIANTS)}")
    if not args.out:
        raise UsageError("finetune requires --out")
    columns, header = read_dataset(args.data)
    policy, log = finetune_variant(cfg, columns, args.variant, seed=seed,
                                   pretrained_path=args.init,
                                   log_every=args.log_every)
    policy.save(args.out, meta={"phase": "finetune", "steps": log.steps,
                                "seed": seed, "final_loss": log.tail_mean(),
                                "init": os.path.basename(args.init or ""),
                                "dataset_records": header["record_count"]})
    print(f"wrote {args.out}: variant {args.variant}, {log.steps} steps in "
          f"{log.seconds:.0f}s, tail loss {log.tail_mean():.4f}, "
          f"skipped {log.skipped_nonfinite} non-finite steps")
    return EXIT_OK


_MODES = {"auto": "auto", "gate-on": "force_gate_on", "gate-off": "force_gate_off"}


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    seed = _seed(args, cfg)
    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}; choose from {', '.join(TASKS)}")
    policy = Policy.load(args.ckpt, cfg)
    episodes = args.episodes if args.episodes is not None else cfg.eval_episodes
    supply = "zeroed" if args.no_tactile else "real"
    mode = _MODES[args.mode]
    seeds = _eval_seeds(seed, args.task, episodes)
    if args.batched:
        results = run_episodes_batched(policy, args.task, seeds, mode=mode,
                                       tactile_supply=supply)
        timing = None
    else:
        results = [run_episode(policy, args.task, s, mode=mode,
                               tactile_supply=supply, record_attn=args.attn,
                               collect_timing=True) for s in seeds]
        timing = timing_report(results, cfg.fast_budget_ms)
    exp_id = args.experiment_id or _experiment_id(policy.spec.name, args)
    row = row_from_results(exp_id, policy.spec.name, seed, args.task, results,
                           gated=policy.gate is not None, timing=timing,
                           deterministic=args.deterministic)
    if args.out:
        write_metrics(args.out, [row], cfg.config_hash(), seed, append=True)
        print(f"appended 1 row to {args.out}")
    _print_row_summary(row, timing)
    return EXIT_OK


def _experiment_id(variant: str, args) -> str:
    parts = [variant]
    if args.mode != "auto":
        parts.append(args.mode.replace("-", ""))
    if args.no_tactile:
        parts.append("notactile")
    return "-".join(parts)


def _print_row_summary(row, timing):
    def s(v):
        return "-" if v is None else f"{v:.3f}"

    print(f"{row.experiment_id} {row.task}: episodes {row.episodes}, "
          f"grasp {s(row.grasp_success)}, half {s(row.contact_half_success)}, "
          f"full {s(row.contact_full_success)}, overall {s(row.overall_success)}")
    if row.gate_precision is not None or row.gate_recall is not None:
        print(f"  gate precision {s(row.gate_precision)} recall {s(row.gate_recall)}")
    if timing is not None:
        print(f"  replan p50 {timing['fast_p50_ms']:.1f} ms p95 "
              f"{timing['fast_p95_ms']:.1f} ms, slow p50 {timing['slow_p50_ms']:.1f} ms, "
              f"budget {'met' if timing['budget_met'] else 'missed'}")


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    base_seed = _seed(args, cfg)
    out_dir = args.out or "ablation"
    os.makedirs(out_dir, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    variants = [v for v in args.variants.split(",") if v]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
    tasks = args.tasks.split(",") if args.tasks else list(TASKS)
    for t in tasks:
        if t not in TASKS:
            raise UsageError(f"unknown task {t!r}")
    episodes = args.episodes if args.episodes is not None else cfg.eval_episodes

    data_path = args.data or os.path.join(out_dir, "dataset.bin")
    if os.path.exists(data_path):
        columns, _ = read_dataset(data_path)
        print(f"dataset: {data_path} ({columns['episode_id'].shape[0]} frames)")
    else:
        columns, summary = generate_frames(
            cfg.sim_config(), cfg.task_list(), cfg.episodes_per_task,
            seed=cfg.seed, max_instruction=cfg.max_instruction)
        write_dataset(data_path, columns, cfg.config_hash(), cfg.task_list(),
                      cfg.episodes_per_task, cfg.seed)
        print(f"dataset: wrote {data_path} ({summary['frames']} frames, "
              f"expert success {summary['success_rate']:.3f})")

    vanilla_path = os.path.join(out_dir, "vanilla.ckpt")
    if not os.path.exists(vanilla_path):
        print(f"pretraining vanilla ({cfg.pretrain_steps} steps)...", flush=True)
        policy, log = pretrain_vanilla(cfg, columns, seed=base_seed,
                                       log_every=args.log_every)
        policy.save(vanilla_path, meta={"phase": "pretrain", "steps": log.steps,
                                        "seed": base_seed,
                                        "final_loss": log.tail_mean()})
        print(f"  vanilla: tail loss {log.tail_mean():.4f} in {log.seconds:.0f}s")

    failures = []
    for seed in seeds:
        for variant in variants:
            cell = f"{variant}_s{seed}"
            ckpt = os.path.join(out_dir, f"{cell}.ckpt")
            metrics_path = os.path.join(out_dir, f"metrics_{cell}.csv")
            try:
                if not os.path.exists(ckpt):
                    policy, log = finetune_variant(
                        cfg, columns, variant, seed=seed,
                        pretrained_path=vanilla_path, log_every=args.log_every)
                    policy.save(ckpt, meta={"phase": "finetune",
                                            "steps": log.steps, "seed": seed,
                                            "final_loss": log.tail_mean()})
                else:
                    policy = Policy.load(ckpt, cfg)
                rows = []
                for task in tasks:
                    results = run_episodes_batched(
                        policy, task, _eval_seeds(seed, task, episodes))
                    rows.append(row_from_results(
                        variant, variant, seed, task, results,
                        gated=policy.gate is not None,
                        deterministic=args.deterministic))
                write_metrics(metrics_path, rows, cfg.config_hash(), seed)
                cells = " ".join(
                    f"{r.task}={r.contact_full_success:.2f}" for r in rows)
                print(f"  {cell}: {cells}", flush=True)
            except (ValueError, CheckpointError, OSError) as exc:
                failures.append((cell, str(exc)))
                print(f"  {cell}: FAILED ({exc})", flush=True)

    all_rows = []
    for seed in seeds:
        for variant in variants:
            path = os.path.join(out_dir, f"metrics_{variant}_s{seed}.csv")
            if os.path.exists(path):
                all_rows.extend(read_metrics(path)[0])
    grid_path = os.path.join(out_dir, "grid.csv")
    write_metrics(grid_path, all_rows, cfg.config_hash(), base_seed)
    verdicts = directional_verdicts(all_rows, tuple(cfg.eval_task_list()))
    _write_verdicts(os.path.join(out_dir, "verdicts.csv"), verdicts)
    print(f"\ngrid: {len(all_rows)} rows -> {grid_path}"
          + (f", {len(failures)} failed cells" if failures else ""))
    for v in verdicts:
        print(f"  {v['comparison']}: {v['verdict']} "
              f"({v['wins']}/{v['seeds']} seeds, need {v['needed']}; "
              f"means {v['mean_hi']:.3f} vs {v['mean_lo']:.3f})")
    return EXIT_OK


def _write_verdicts(path: str, verdicts: list[dict]):
    with open(path, "w") as f:
        f.write("comparison,wins,seeds,needed,mean_hi,mean_lo,verdict\n")
        for v in verdicts:
            f.write(f"{v['comparison']},{v['wins']},{v['seeds']},{v['needed']},"
                    f"{v['mean_hi']:.6f},{v['mean_lo']:.6f},{v['verdict']}\n")


# ---- attention dumps ---------------------------------------------------------------


def select_frames(columns: dict, spec: str, task: str, max_frames: int) -> tuple:
    """Resolve a --frames spec to dataset row indices; returns (kept, skipped)."""
    n = columns["episode_id"].shape[0]
    if spec == "grasp":
        idxs = grasp_phase_frames(columns, task)
        return idxs[:max_frames], 0
    if ":" in spec:
        a, b = spec.split(":", 1)
        lo, hi = int(a or 0), int(b or n)
        idxs = [i for i in range(lo, hi) if 0 <= i < n]
        skipped = (hi - lo) - len(idxs)
        return idxs[:max_frames], skipped
    raw = [int(s) for s in spec.split(",") if s]
    idxs = [i for i in raw if 0 <= i < n]
    return idxs[:max_frames], len(raw) - len(idxs)


def grasp_phase_frames(columns: dict, task: str) -> list[int]:
    """Pre-grasp frames: gripper still open, and before the episode's first
    contact. The free-space task has no contact, so the aperture test alone
    selects its approach phase."""
    from .sim.world import TASK_IDS
    task_rows = columns["task_id"] == TASK_IDS[task]
    open_ap = columns["state"][:, 3] >= 0.9
    keep = np.zeros(task_rows.shape[0], dtype=bool)
    eid = columns["episode_id"]
    for e in np.unique(eid[task_rows]):
        rows = np.flatnonzero(eid == e)
        labels = columns["contact_label"][rows]
        first = np.flatnonzero(labels)
        cutoff = rows[first[0]] if first.size else rows[-1] + 1
        keep[rows] = rows < cutoff
    return [int(i) for i in np.flatnonzero(task_rows & keep & open_ap)]


def episode_worlds(columns: dict, header: dict, sim_cfg) -> dict:
    """episode_id -> freshly constructed World (initial geometry), using the
    generation seed recorded in the dataset header."""
    eid = columns["episode_id"]
    tid = columns["task_id"]
    base = int(header["seed"])
    firsts = np.concatenate([[0], np.flatnonzero(np.diff(eid)) + 1])
    worlds = {}
    per_task_count: dict[int, int] = {}
    for f in firsts:
        t = int(tid[f])
        idx = per_task_count.get(t, 0)
        per_task_count[t] = idx + 1
        task = TASKS[t]
        worlds[int(eid[f])] = World(sim_cfg, task, episode_seed(base, task, idx))
    return worlds


def attention_rows(policy: Policy, columns: dict, idxs: list[int],
                   batch: int = 64) -> list[np.ndarray]:
    """Per-block renormalized image-patch attention for the conditioning
    query, on the given dataset rows: list over blocks of [B, n_h, P]."""
    cfg = policy.cfg
    P = policy.slow.n_patches
    raw64 = None
    if policy.spec.tactile_format is not None:
        raw64 = raw_tactile_matrix(columns, policy.spec.tactile_format)
    per_block = None
    for lo in range(0, len(idxs), batch):
        rows = idxs[lo: lo + batch]
        B = len(rows)
        g = Graph(dtype=policy.store.dtype, grad_enabled=False)
        slow = policy.slow.encode(g, columns["image"][rows].astype(np.float64),
                                  columns["instruction"][rows])
        cond_tok = _inference_conditioning(policy, g, columns, rows, raw64)
        cond = ConditioningToken(token=g.constant(cond_tok), source="mixed")
        zeros = np.zeros((B, cfg.horizon, cfg.action_dim))
        _, attn = policy.expert.velocity_batch(g, zeros, np.full(B, 0.5),
                                               cond, slow, record_attn=True)
        if per_block is None:
            per_block = [[] for _ in attn]
        for b, w in enumerate(attn):
            rows_w = w[:, :, 0, :P]       # conditioning query, image-patch keys
            total = rows_w.sum(axis=-1, keepdims=True)
            rows_w = np.where(total > 0, rows_w / np.maximum(total, 1e-300), 0.0)
            per_block[b].append(rows_w)
    return [np.concatenate(chunks, axis=0) for chunks in per_block]


def _inference_conditioning(policy: Policy, g: Graph, columns: dict,
                            rows: list[int], raw64) -> np.ndarray:
    """The conditioning tokens the variant would use at inference on these
    frames: state for the vanilla, tactile for direct injection, and the
    gate's per-frame choice for gated variants."""
    states = columns["state"][rows].astype(np.float64)
    state_tok = policy.state_enc.encode(g, states).data
    if policy.spec.tactile_format is None:
        return state_tok
    raw = raw64[rows] * policy.tactile_enc.norm_scale
    tact_tok = policy.tactile_enc.encode_raw(g, raw).data
    if policy.spec.direct:
        return tact_tok
    logits = policy.gate.logits(g, g.constant(tact_tok)).data.reshape(-1)
    active = 1.0 / (1.0 + np.exp(-logits)) > policy.gate.threshold
    return np.where(active[:, None, None], tact_tok, state_tok)


def cmd_dump_attn(args) -> int:
    cfg = _load_config(args)
    policy = Policy.load(args.ckpt, cfg)
    if args.task not in TASKS:
        raise UsageError(f"unknown task {args.task!r}")
    columns, header = read_dataset(args.data)
    idxs, skipped = select_frames(columns, args.frames, args.task,
                                  args.max_frames)
    if not idxs:
        print("no frames selected", file=sys.stderr)
        return EXIT_DATA
    per_block = attention_rows(policy, columns, idxs)
    layer = args.layer if args.layer >= 0 else len(per_block) + args.layer
    if not (0 <= layer < len(per_block)):
        raise UsageError(f"--layer {args.layer} out of range "
                         f"(expert has {len(per_block)} blocks)")
    worlds = episode_worlds(columns, header, cfg.sim_config())
    masses = []
    records = []
    for j, i in enumerate(idxs):
        eid = int(columns["episode_id"][i])
        targets = worlds[eid].target_patch_indices(cfg.patch)
        head_mean = per_block[layer][j].mean(axis=0)
        mass = float(head_mean[targets].sum())
        masses.append(mass)
        records.append({
            "frame": int(i), "episode": eid,
            "step": int(columns["step"][i]),
            "target_patches": [int(t) for t in targets],
            "mass": mass,
            "weights": [per_block[b][j].tolist() for b in range(len(per_block))],
        })
    if args.out:
        with open(args.out, "w") as f:
            head = {"format": ATTN_FORMAT, "version": ATTN_VERSION,
                    "config_hash": cfg.config_hash(),
                    "variant": policy.spec.name, "layer": layer,
                    "n_patches": policy.slow.n_patches,
                    "frames": len(idxs), "skipped": skipped}
            f.write(json.dumps(head, sort_keys=True) + "\n")
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"wrote {args.out}: {len(records)} frames"
              + (f", {skipped} skipped" if skipped else ""))
    print(f"attn_target_mass {np.mean(masses):.4f} over {len(masses)} frames "
          f"(variant {policy.spec.name}, block {layer})")
    return EXIT_OK


def cmd_report(args) -> int:
    out_path = args.out or os.path.join(args.in_dir, "consolidated.csv")
    cfg = _load_config(args)
    rows, hashes = [], set()
    names = sorted(os.listdir(args.in_dir)) if os.path.isdir(args.in_dir) else []
    for name in names:
        path = os.path.join(args.in_dir, name)
        if not name.endswith(".csv") or os.path.abspath(path) == os.path.abspath(out_path):
            continue
        try:
            file_rows, header = read_metrics(path)
        except MetricsError as exc:
            if "not a touchgate-metrics file" in str(exc):
                continue
            raise
        rows.extend(file_rows)
        hashes.add(header["config_hash"])
    if not rows:
        print("no metrics files found", file=sys.stderr)
        return EXIT_DATA
    rows.sort(key=lambda r: (r.variant, r.seed, r.task, r.experiment_id))
    config_hash = hashes.pop() if len(hashes) == 1 else "mixed"
    write_metrics(out_path, rows, config_hash, 0)

    agg = aggregate_by(rows, ("variant", "task"))
    print(render_table(agg, ["variant", "task", "rows", "grasp_success",
                             "contact_half_success", "contact_full_success",
                             "overall_success", "gate_precision", "gate_recall"]))
    verdicts = directional_verdicts(rows, tuple(cfg.eval_task_list()))
    if verdicts:
        print()
        for v in verdicts:
            print(f"{v['comparison']}: {v['verdict']} ({v['wins']}/{v['seeds']} "
                  f"seeds, need {v['needed']}; means {v['mean_hi']:.3f} vs "
                  f"{v['mean_lo']:.3f})")
    print(f"\nconsolidated {len(rows)} rows -> {out_path}")
    if args.check:
        if not verdicts:
            print("nothing to check: no comparable variant pairs", file=sys.stderr)
            return EXIT_DATA
        if any(v["verdict"] != "pass" for v in verdicts):
            return EXIT_CHECK
    return EXIT_OK


# ---- entry ------------------------------------------------------------------------

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "dump-attn": cmd_dump_attn,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:      # argparse -h
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.cmd](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, MetricsError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
