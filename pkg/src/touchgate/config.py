"""Flat key=value run configuration with a stable content hash.

A config file is plain text: one `key = value` per line, `#` comments and
blank lines ignored. Keys must match a known field; unknown keys are an
error. Values are parsed by the field's declared type. The config hash is a
sha256 over the sorted canonical key=value rendering, so any change to any
knob changes the hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .sim.world import SimConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    seed: int = 0

    # model
    d_model: int = 64
    n_heads: int = 4
    n_slow_layers: int = 2
    n_expert_blocks: int = 2
    mlp_ratio: int = 2
    horizon: int = 8
    action_dim: int = 4
    state_dim: int = 8
    n_cond: int = 1
    grid: int = 16
    patch: int = 4
    max_instruction: int = 4
    flow_steps: int = 10
    cross_query_mode: str = "full"
    tactile_format: str = "force6"
    tactile_hidden: int = 64
    gate_hidden: int = 64
    gate_threshold: float = 0.5

    # training
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 64
    pretrain_steps: int = 5000
    finetune_steps: int = 3000
    lambda_gate: float = 0.01
    freeze_slow: bool = True
    teacher_force_gate: bool = True

    # data
    episodes_per_task: int = 200
    tasks: str = "pick_place,zipper,stamp,wipe"
    dataset_text: bool = False

    # runtime
    h_infer: int = 3
    staleness_max: int = 2
    gate_hysteresis: int = 2
    fast_budget_ms: float = 40.0

    # evaluation
    eval_episodes: int = 20
    eval_tasks: str = "zipper,stamp"

    # simulator constants
    sim_k_n: float = 100.0
    sim_k_t: float = 5.0
    sim_k_path: float = 30.0
    sim_noise_sigma: float = 0.02
    sim_d_jam: float = 0.03
    sim_jam_ticks: int = 5
    sim_delta_max: float = 0.02
    sim_f_lo: float = 0.5
    sim_f_hi: float = 2.0
    sim_n_markers: int = 16
    sim_vt_size: int = 8

    def sim_config(self) -> SimConfig:
        return SimConfig(
            k_n=self.sim_k_n, k_t=self.sim_k_t, k_path=self.sim_k_path,
            noise_sigma=self.sim_noise_sigma, d_jam=self.sim_d_jam,
            jam_ticks=self.sim_jam_ticks, delta_max=self.sim_delta_max,
            f_lo=self.sim_f_lo, f_hi=self.sim_f_hi, grid=self.grid,
            n_markers=self.sim_n_markers, vt_size=self.sim_vt_size,
        )

    def task_list(self) -> list[str]:
        return [t.strip() for t in self.tasks.split(",") if t.strip()]

    def eval_task_list(self) -> list[str]:
        return [t.strip() for t in self.eval_tasks.split(",") if t.strip()]

    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            out.append((f.name, s))
        return sorted(out)

    def config_hash(self) -> str:
        canon = "\n".join(f"{k}={v}" for k, v in self.to_items())
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def write(self, path: str):
        with open(path, "w") as fh:
            for k, v in self.to_items():
                fh.write(f"{k} = {v}\n")


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _parse_value(name: str, raw: str):
    ftype = _FIELDS[name].type
    raw = raw.strip()
    if ftype in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if ftype in ("int", int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"{name}: expected an int, got {raw!r}") from e
    if ftype in ("float", float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"{name}: expected a float, got {raw!r}") from e
    return raw


def parse_config(text: str, base: Config | None = None) -> Config:
    """Parse key=value lines into a Config; unknown keys are rejected."""
    cfg = dataclasses.replace(base) if base is not None else Config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, raw))
    return cfg


def load_config(path: str, overrides: dict | None = None) -> Config:
    with open(path) as fh:
        cfg = parse_config(fh.read())
    if overrides:
        for k, v in overrides.items():
            if k not in _FIELDS:
                raise ConfigError(f"unknown config key {k!r}")
            setattr(cfg, k, _parse_value(k, str(v)))
    return cfg
