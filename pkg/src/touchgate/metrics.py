"""Metrics rows, the comma-separated report format, and grid aggregation.

A metrics file is self-describing: comment lines carry the schema version,
the config hash, and the seed, followed by one column-name line and data
rows. Success columns may be empty (evaluations with zero episodes); gate
columns are empty for gateless variants. Timing columns are wall-clock and
are therefore zeroed when a run asks for byte-reproducible output.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

SCHEMA_VERSION = 1
FORMAT_NAME = "touchgate-metrics"

TIMING_FIELDS = ("fast_p50_ms", "fast_p95_ms", "slow_p50_ms")

STAGE_ORDER = ("grasp_success", "contact_half_success", "contact_full_success",
               "overall_success")


class MetricsError(ValueError):
    """Malformed or incompatible metrics file."""


@dataclass
class MetricsRow:
    experiment_id: str
    variant: str
    seed: int
    task: str
    episodes: int
    grasp_success: float | None = None
    contact_half_success: float | None = None
    contact_full_success: float | None = None
    overall_success: float | None = None
    gate_precision: float | None = None
    gate_recall: float | None = None
    attn_target_mass_grasp_phase: float | None = None
    fast_p50_ms: float | None = None
    fast_p95_ms: float | None = None
    slow_p50_ms: float | None = None
    max_staleness_ticks: int | None = None

    def validate(self):
        vals = [getattr(self, f) for f in STAGE_ORDER]
        present = [v for v in vals if v is not None]
        for v in present:
            if not (0.0 <= v <= 1.0):
                raise MetricsError(f"success field out of [0,1]: {v}")
        for a, b in zip(present, present[1:]):
            if b > a + 1e-9:
                raise MetricsError(
                    f"stage successes must be non-increasing, got {present}")
        if self.episodes < 0:
            raise MetricsError("episodes must be >= 0")

    def zero_timing(self) -> "MetricsRow":
        row = MetricsRow(**{f.name: getattr(self, f.name) for f in fields(self)})
        for f in TIMING_FIELDS:
            if getattr(row, f) is not None:
                setattr(row, f, 0.0)
        return row


FIELD_NAMES = tuple(f.name for f in fields(MetricsRow))
_INT_FIELDS = ("seed", "episodes", "max_staleness_ticks")
_STR_FIELDS = ("experiment_id", "variant", "task")


def _fmt(name: str, v) -> str:
    if v is None:
        return ""
    if name in _STR_FIELDS:
        s = str(v)
        if "," in s or "\n" in s:
            raise MetricsError(f"field {name} must not contain commas: {s!r}")
        return s
    if name in _INT_FIELDS:
        return str(int(v))
    return f"{float(v):.6f}"


def _parse(name: str, s: str):
    if s == "":
        return None
    if name in _STR_FIELDS:
        return s
    if name in _INT_FIELDS:
        return int(s)
    return float(s)


def header_lines(config_hash: str, seed: int) -> list[str]:
    return [f"# {FORMAT_NAME} v{SCHEMA_VERSION}",
            f"# config_hash={config_hash}",
            f"# seed={seed}",
            ",".join(FIELD_NAMES)]


def format_row(row: MetricsRow) -> str:
    row.validate()
    return ",".join(_fmt(n, getattr(row, n)) for n in FIELD_NAMES)


def write_metrics(path: str, rows: list[MetricsRow], config_hash: str,
                  seed: int, append: bool = False):
    """Write (or append to) a metrics file; appends validate the header."""
    if append and os.path.exists(path):
        _, header = read_metrics(path)
        if header["config_hash"] != config_hash:
            raise MetricsError(
                f"config hash mismatch on append: file has "
                f"{header['config_hash']}, run has {config_hash}")
        with open(path, "a") as f:
            for r in rows:
                f.write(format_row(r) + "\n")
        return
    with open(path, "w") as f:
        for line in header_lines(config_hash, seed):
            f.write(line + "\n")
        for r in rows:
            f.write(format_row(r) + "\n")


def read_metrics(path: str) -> tuple[list[MetricsRow], dict]:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or not lines[0].startswith(f"# {FORMAT_NAME} v"):
        raise MetricsError(f"{path}: not a {FORMAT_NAME} file")
    version = lines[0].split("v")[-1]
    if version != str(SCHEMA_VERSION):
        raise MetricsError(f"{path}: schema version {version}, "
                           f"expected {SCHEMA_VERSION}")
    header = {"version": int(version)}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        if "=" in body:
            k, v = body.split("=", 1)
            header[k.strip()] = v.strip()
        i += 1
    if i >= len(lines):
        raise MetricsError(f"{path}: missing column line")
    cols = tuple(lines[i].split(","))
    if cols != FIELD_NAMES:
        raise MetricsError(f"{path}: column mismatch: {cols}")
    rows = []
    for ln in lines[i + 1:]:
        if not ln:
            continue
        parts = ln.split(",")
        if len(parts) != len(FIELD_NAMES):
            raise MetricsError(f"{path}: row has {len(parts)} fields: {ln!r}")
        rows.append(MetricsRow(**{n: _parse(n, s)
                                  for n, s in zip(FIELD_NAMES, parts)}))
    header.setdefault("config_hash", "")
    header.setdefault("seed", "0")
    return rows, header


# ---- building rows from episode results -------------------------------------------


def gate_confusion(results) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) frame counts of gate decisions vs true contact."""
    tp = fp = fn = tn = 0
    for r in results:
        pred = np.asarray(r.gate_trace, dtype=bool)
        true = np.asarray(r.contact_trace, dtype=bool)
        tp += int(np.sum(pred & true))
        fp += int(np.sum(pred & ~true))
        fn += int(np.sum(~pred & true))
        tn += int(np.sum(~pred & ~true))
    return tp, fp, fn, tn


def row_from_results(experiment_id: str, variant: str, seed: int, task: str,
                     results, gated: bool, timing: dict | None = None,
                     deterministic: bool = False) -> MetricsRow:
    row = MetricsRow(experiment_id=experiment_id, variant=variant, seed=seed,
                     task=task, episodes=len(results))
    if results:
        for col, flag in zip(STAGE_ORDER, ("grasp", "half", "full", "overall")):
            setattr(row, col, float(np.mean([r.flags[flag] for r in results])))
        if gated:
            tp, fp, fn, tn = gate_confusion(results)
            if tp + fp > 0:
                row.gate_precision = tp / (tp + fp)
            if tp + fn > 0:
                row.gate_recall = tp / (tp + fn)
        masses = [m for r in results for (_, lab, m) in r.attn_mass if not lab]
        if masses:
            row.attn_target_mass_grasp_phase = float(np.mean(masses))
        row.max_staleness_ticks = max(
            (max(r.staleness_hist) for r in results if r.staleness_hist),
            default=0)
    if timing is not None:
        row.fast_p50_ms = timing.get("fast_p50_ms")
        row.fast_p95_ms = timing.get("fast_p95_ms")
        row.slow_p50_ms = timing.get("slow_p50_ms")
    row.validate()
    return row if not deterministic else row.zero_timing()


# ---- aggregation and directional verdicts ------------------------------------------

COMPARISONS = (("ex3", "ex2"), ("ex2", "ex0"), ("ex0", "ex1"),
               ("ex5", "ex4"), ("ex7", "ex6"))


def stage_score(row: MetricsRow) -> float | None:
    """Mean over the stage flags; partial credit mirroring subtask rates."""
    vals = [row.grasp_success, row.contact_half_success, row.contact_full_success]
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))


def seed_scores(rows: list[MetricsRow], tasks: tuple[str, ...]) -> dict:
    """(variant, seed) -> mean stage score over the given tasks.

    Only (variant, seed) pairs covering every requested task are scored.
    """
    cell: dict[tuple, dict] = {}
    for r in rows:
        if r.task in tasks and r.episodes > 0:
            s = stage_score(r)
            if s is not None:
                cell.setdefault((r.variant, r.seed), {})[r.task] = s
    return {k: float(np.mean([v[t] for t in tasks]))
            for k, v in cell.items() if all(t in v for t in tasks)}


def directional_verdicts(rows: list[MetricsRow],
                         tasks: tuple[str, ...]) -> list[dict]:
    """Per-comparison sign counts over seeds plus a pass/fail verdict.

    A comparison passes when the higher variant wins strictly in at least
    ceil(4/5 * n_seeds) of the seeds evaluated for both variants.
    """
    scores = seed_scores(rows, tasks)
    out = []
    for hi, lo in COMPARISONS:
        seeds = sorted({s for (v, s) in scores if v == hi}
                       & {s for (v, s) in scores if v == lo})
        if not seeds:
            continue
        wins = sum(1 for s in seeds if scores[(hi, s)] > scores[(lo, s)])
        need = int(np.ceil(0.8 * len(seeds)))
        out.append({"comparison": f"{hi}>{lo}", "wins": wins,
                    "seeds": len(seeds), "needed": need,
                    "mean_hi": float(np.mean([scores[(hi, s)] for s in seeds])),
                    "mean_lo": float(np.mean([scores[(lo, s)] for s in seeds])),
                    "verdict": "pass" if wins >= need else "fail"})
    return out


def aggregate_by(rows: list[MetricsRow], keys: tuple[str, ...]) -> list[dict]:
    """Mean of every numeric field over rows sharing the key fields."""
    groups: dict[tuple, list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r)
    out = []
    numeric = [n for n in FIELD_NAMES if n not in _STR_FIELDS + ("seed",)]
    for key in sorted(groups):
        entry = dict(zip(keys, key))
        entry["rows"] = len(groups[key])
        for n in numeric:
            vals = [getattr(r, n) for r in groups[key]
                    if getattr(r, n) is not None]
            entry[n] = float(np.mean(vals)) if vals else None
        out.append(entry)
    return out


def render_table(entries: list[dict], columns: list[str]) -> str:
    """Fixed-width text table for the consolidated report."""
    def cell(e, c):
        v = e.get(c)
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.3f}"
        return str(v)

    rows = [[cell(e, c) for c in columns] for e in entries]
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)
