"""Policy assembly: slow stream + state encoder + action expert, optionally
a tactile encoder and contact gate, bundled over one ParamStore.

The ablation grid is expressed as variants:

- ex0  vanilla: no tactile branch, state conditioning always
- ex1  direct force6: tactile conditioning on every frame, no gate
- ex2  gated force6, synchronous: query switch, zero-lag training, chunked
- ex3  gated force6, dual-stream: query switch, lag-matched training,
       receding-horizon execution during contact
- ex4/ex5  direct/full with marker-field input
- ex6/ex7  direct/full with vision-tactile image input

Common modules draw their init from per-module child streams, so two
variants built from the same seed share identical slow/state/expert weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, restore_into, save_checkpoint
from .config import Config
from .expert import ActionExpert
from .nn import ParamStore
from .rng import Rng
from .sim.world import VOCAB
from .slowstream import SlowStream, StateEncoder
from .tactile import TactileEncoder, TactileGate


@dataclass(frozen=True)
class VariantSpec:
    name: str
    tactile_format: str | None   # None means no tactile branch at all
    gated: bool                  # learned contact gate drives the query switch
    dual_stream: bool            # lag-matched training + receding-horizon contact

    @property
    def direct(self) -> bool:
        """Tactile injected unconditionally (no gate) on every frame."""
        return self.tactile_format is not None and not self.gated


VARIANTS = {
    "ex0": VariantSpec("ex0", None, gated=False, dual_stream=False),
    "ex1": VariantSpec("ex1", "force6", gated=False, dual_stream=False),
    "ex2": VariantSpec("ex2", "force6", gated=True, dual_stream=False),
    "ex3": VariantSpec("ex3", "force6", gated=True, dual_stream=True),
    "ex4": VariantSpec("ex4", "marker2d", gated=False, dual_stream=False),
    "ex5": VariantSpec("ex5", "marker2d", gated=True, dual_stream=True),
    "ex6": VariantSpec("ex6", "vtimage", gated=False, dual_stream=False),
    "ex7": VariantSpec("ex7", "vtimage", gated=True, dual_stream=True),
}


class Policy:
    """A trained or trainable bundle of modules for one variant."""

    def __init__(self, cfg: Config, spec: VariantSpec, store: ParamStore,
                 slow: SlowStream, state_enc: StateEncoder, expert: ActionExpert,
                 tactile_enc: TactileEncoder | None, gate: TactileGate | None):
        self.cfg = cfg
        self.spec = spec
        self.store = store
        self.slow = slow
        self.state_enc = state_enc
        self.expert = expert
        self.tactile_enc = tactile_enc
        self.gate = gate
        # per-dim action standardization for flow matching; the expert is
        # trained on actions / action_scale and samples are multiplied back
        self.action_scale = np.ones(cfg.action_dim, dtype=np.float64)

    @classmethod
    def build(cls, cfg: Config, spec: VariantSpec, seed: int,
              dtype=np.float32) -> "Policy":
        store = ParamStore(dtype=dtype)
        root = Rng(seed)
        slow = SlowStream(store, G=cfg.grid, p=cfg.patch, d=cfg.d_model,
                          n_h=cfg.n_heads, n_L=cfg.max_instruction,
                          n_layers=cfg.n_slow_layers, vocab_size=len(VOCAB),
                          rng=root.child(1))
        state_enc = StateEncoder(store, d_state=cfg.state_dim, d=cfg.d_model,
                                 n_c=cfg.n_cond, rng=root.child(2))
        expert = ActionExpert(store, d=cfg.d_model, n_h=cfg.n_heads, H=cfg.horizon,
                              D_a=cfg.action_dim, n_blocks=cfg.n_expert_blocks,
                              n_c=cfg.n_cond, rng=root.child(3),
                              mlp_ratio=cfg.mlp_ratio,
                              cross_query_mode=cfg.cross_query_mode)
        tactile_enc = gate = None
        if spec.tactile_format is not None:
            tactile_enc = TactileEncoder(store, spec.tactile_format, cfg.d_model,
                                         root.child(4), n_markers=cfg.sim_n_markers,
                                         vt_size=cfg.sim_vt_size,
                                         hidden=cfg.tactile_hidden)
            if spec.gated:
                gate = TactileGate(store, cfg.d_model, root.child(5),
                                   hidden=cfg.gate_hidden,
                                   threshold=cfg.gate_threshold)
        return cls(cfg, spec, store, slow, state_enc, expert, tactile_enc, gate)

    # ---- persistence -----------------------------------------------------------

    def save(self, path: str, *, meta: dict | None = None):
        norm = None
        if self.tactile_enc is not None and self.tactile_enc.norm_scale is not None:
            norm = np.asarray(self.tactile_enc.norm_scale)
        meta = dict(meta or {})
        meta["action_scale"] = [float(v) for v in self.action_scale]
        save_checkpoint(path, self.store, config_hash=self.cfg.config_hash(),
                        variant=self.spec.name, vocab=list(VOCAB),
                        norm_scale=norm, meta=meta)

    @classmethod
    def load(cls, path: str, cfg: Config, *, check_hash: bool = True) -> "Policy":
        tensors, header = load_checkpoint(path)
        if check_hash and header["config_hash"] != cfg.config_hash():
            raise CheckpointError(
                f"{path}: config hash {header['config_hash']} does not match the "
                f"active config {cfg.config_hash()}")
        name = header["variant"]
        if name not in VARIANTS:
            raise CheckpointError(f"{path}: unknown variant {name!r}")
        pol = cls.build(cfg, VARIANTS[name], seed=0)
        restore_into(pol.store, tensors)
        if pol.tactile_enc is not None and header.get("norm_scale") is not None:
            pol.tactile_enc.set_norm_scale(np.asarray(header["norm_scale"],
                                                      dtype=np.float64))
        scale = header.get("meta", {}).get("action_scale")
        if scale is not None:
            pol.action_scale = np.asarray(scale, dtype=np.float64)
        return pol

    def init_from(self, path: str):
        """Warm-start shared modules from a checkpoint (e.g. the pretrained
        vanilla model); params absent from it keep their fresh init."""
        tensors, header = load_checkpoint(path)
        missing, extra = restore_into(self.store, tensors,
                                      allow_missing=True, allow_extra=True)
        scale = header.get("meta", {}).get("action_scale")
        if scale is not None:
            self.action_scale = np.asarray(scale, dtype=np.float64)
        return missing, extra, header

    def vanilla_twin(self) -> "Policy":
        """A tactile-free policy sharing this policy's common weight arrays."""
        twin = Policy.build(self.cfg, VARIANTS["ex0"], seed=0,
                            dtype=self.store.dtype)
        for name in twin.store.names():
            twin.store.get(name).data = self.store.get(name).data
        twin.action_scale = self.action_scale
        return twin

    # ---- bookkeeping ------------------------------------------------------------

    def param_count(self) -> int:
        return sum(int(np.prod(t.data.shape)) for t in self.store.tensors())

    def uses_tactile(self) -> bool:
        return self.tactile_enc is not None
