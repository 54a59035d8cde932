"""Demonstration dataset files.

A dataset file starts with one JSON header line declaring the schema:
format name, version, encoding, config hash, field names with dtypes and
shapes, and the record count. Two encodings share that schema:

- "jsonl": one JSON object per line per frame (human-inspectable),
- "binary": columnar little-endian blocks, one per field in header order
  (the default; loads with a single buffer view per field).

Writes are deterministic: the same config and seed produce byte-identical
files.
"""

from __future__ import annotations

import json

import numpy as np

from ..tactile import TactileReading
from .world import TASK_IDS, TASKS, VOCAB, SimConfig, World, run_scripted_episode

FORMAT_NAME = "touchgate-dataset"
FORMAT_VERSION = 1

# field name -> (dtype, shape); shapes with -1 are filled from config
FIELDS = (
    ("episode_id", "int32", ()),
    ("step", "int32", ()),
    ("task_id", "int32", ()),
    ("image", "float32", ("grid", "grid", 3)),
    ("instruction", "int32", ("max_instruction",)),
    ("state", "float32", (8,)),
    ("force6", "float32", (6,)),
    ("marker2d", "float32", ("n_markers", 2)),
    ("vt_image", "float32", ("vt_size", "vt_size", 3)),
    ("contact_label", "uint8", ()),
    ("expert_action", "float32", (4,)),
)


def _resolve_shape(shape, dims: dict) -> tuple:
    return tuple(dims[s] if isinstance(s, str) else s for s in shape)


def field_specs(grid: int, n_markers: int, vt_size: int, max_instruction: int):
    dims = {"grid": grid, "n_markers": n_markers, "vt_size": vt_size,
            "max_instruction": max_instruction}
    return [(name, dtype, _resolve_shape(shape, dims)) for name, dtype, shape in FIELDS]


def episode_seed(base_seed: int, task: str, index: int) -> int:
    return int(base_seed) * 1_000_000 + TASK_IDS[task] * 10_000 + int(index)


def generate_frames(cfg: SimConfig, tasks: list[str], episodes_per_task: int,
                    seed: int, max_instruction: int = 4):
    """Scripted-expert demonstrations as columnar numpy arrays.

    Returns (columns, summary); the summary carries episode counts, expert
    success rates per task, and the contact-frame fraction.
    """
    specs = field_specs(cfg.grid, cfg.n_markers, cfg.vt_size, max_instruction)
    columns = {name: [] for name, _, _ in specs}
    successes = {task: [] for task in tasks}
    episode_id = 0
    for task in tasks:
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        for ep in range(episodes_per_task):
            frames, world = run_scripted_episode(cfg, task, episode_seed(seed, task, ep))
            successes[task].append(world.stages.as_flags()["full"])
            for fr in frames:
                ids = np.zeros(max_instruction, dtype=np.int32)
                ids[:len(fr["instruction"])] = fr["instruction"]
                r: TactileReading = fr["reading"]
                columns["episode_id"].append(episode_id)
                columns["step"].append(fr["tick"])
                columns["task_id"].append(TASK_IDS[task])
                columns["image"].append(fr["image"].astype(np.float32))
                columns["instruction"].append(ids)
                columns["state"].append(fr["state"].astype(np.float32))
                columns["force6"].append(r.force6.astype(np.float32))
                columns["marker2d"].append(r.marker2d.astype(np.float32))
                columns["vt_image"].append(r.vt_image.astype(np.float32))
                columns["contact_label"].append(np.uint8(fr["contact_label"]))
                columns["expert_action"].append(fr["expert_action"].astype(np.float32))
            episode_id += 1
    out = {}
    for name, dtype, shape in specs:
        out[name] = np.asarray(columns[name], dtype=dtype).reshape((-1,) + shape)
    per_task = {t: float(np.mean(s)) if s else 0.0 for t, s in successes.items()}
    all_flags = [v for s in successes.values() for v in s]
    n_frames = int(out["episode_id"].shape[0])
    summary = {
        "episodes": episode_id,
        "frames": n_frames,
        "success_rate": float(np.mean(all_flags)) if all_flags else 0.0,
        "contact_fraction": float(np.mean(out["contact_label"])) if n_frames else 0.0,
        "per_task_success": per_task,
    }
    return out, summary


def _header(columns: dict, encoding: str, config_hash: str,
            tasks: list[str], episodes_per_task: int, seed: int) -> dict:
    n = int(next(iter(columns.values())).shape[0])
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "encoding": encoding,
        "config_hash": config_hash,
        "seed": int(seed),
        "tasks": list(tasks),
        "episodes_per_task": int(episodes_per_task),
        "record_count": n,
        "fields": [{"name": name, "dtype": str(arr.dtype),
                    "shape": list(arr.shape[1:])} for name, arr in columns.items()],
        "vocab": list(VOCAB),
    }


def write_dataset(path: str, columns: dict, config_hash: str, tasks: list[str],
                  episodes_per_task: int, seed: int, text: bool = False):
    encoding = "jsonl" if text else "binary"
    header = _header(columns, encoding, config_hash, tasks, episodes_per_task, seed)
    names = list(columns)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        if text:
            n = header["record_count"]
            for i in range(n):
                rec = {}
                for name in names:
                    v = columns[name][i]
                    rec[name] = v.tolist() if isinstance(v, np.ndarray) else int(v)
                fh.write((json.dumps(rec, sort_keys=True) + "\n").encode("utf-8"))
        else:
            for name in names:
                arr = np.ascontiguousarray(columns[name])
                if arr.dtype.byteorder == ">":
                    arr = arr.astype(arr.dtype.newbyteorder("<"))
                fh.write(arr.tobytes())


def read_dataset(path: str):
    """Load a dataset file; returns (columns dict, header dict)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: not a {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {header.get('version')}")
        n = header["record_count"]
        columns = {}
        if header["encoding"] == "binary":
            for spec in header["fields"]:
                shape = (n,) + tuple(spec["shape"])
                count = int(np.prod(shape)) if shape else 1
                dt = np.dtype(spec["dtype"]).newbyteorder("<")
                buf = fh.read(count * dt.itemsize)
                if len(buf) != count * dt.itemsize:
                    raise ValueError(f"{path}: truncated field {spec['name']!r}")
                columns[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
        elif header["encoding"] == "jsonl":
            rows = [json.loads(line) for line in fh.read().decode("utf-8").splitlines() if line]
            if len(rows) != n:
                raise ValueError(f"{path}: expected {n} records, found {len(rows)}")
            for spec in header["fields"]:
                shape = (n,) + tuple(spec["shape"])
                columns[spec["name"]] = np.asarray(
                    [row[spec["name"]] for row in rows], dtype=spec["dtype"]).reshape(shape)
        else:
            raise ValueError(f"{path}: unknown encoding {header['encoding']!r}")
    return columns, header


class EpisodeIndex:
    """Frame ranges per episode, plus contact-aware sampling helpers."""

    def __init__(self, columns: dict):
        self.columns = columns
        eid = columns["episode_id"]
        n = eid.shape[0]
        boundaries = np.flatnonzero(np.diff(eid)) + 1
        starts = np.concatenate([[0], boundaries])
        ends = np.concatenate([boundaries, [n]])
        self.episodes = list(zip(starts.tolist(), ends.tolist()))

    def __len__(self):
        return len(self.episodes)

    def episode_slice(self, k: int) -> tuple[int, int]:
        return self.episodes[k]
