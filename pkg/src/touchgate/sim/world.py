"""Deterministic 2.5D contact tasks with a synthetic force model.

The world is top-down: the camera sees x/y layout exactly (one pixel per
grid cell, no anti-aliasing) but never height, so surface heights, press
depths, and sub-half-pixel path geometry are only observable through force.
Contact follows a linear spring law f_n = k_n * penetration with viscous and
path-spring tangential components; sensor noise corrupts the reported
readings only, never the dynamics or the contact labels.

Tasks: pick_place (contact-free), zipper (drag a slider along a track whose
true path wiggles below camera resolution; misalignment makes the slider
stick, the tab stretches, and sustained deviation jams), stamp (hold a force
band over a pad of hidden, creeping height; overshoot collides), wipe (sweep
an arc keeping force in band over a surface of hidden height).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..rng import Rng
from ..tactile import TactileReading

TASKS = ("pick_place", "zipper", "stamp", "wipe")

# instruction vocabulary; id 0 is the attention-masked pad token
VOCAB = (
    "<pad>", "pick", "pull", "press", "wipe",
    "red", "green", "blue", "yellow",
    "disk", "zipper", "stamp", "wiper",
) + tuple(f"<r{i}>" for i in range(19))  # reserved up to a fixed 32-symbol table

VOCAB_IDS = {w: i for i, w in enumerate(VOCAB)}
COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0),
          "blue": (0.0, 0.0, 1.0), "yellow": (1.0, 1.0, 0.0)}
TASK_VERB = {"pick_place": "pick", "zipper": "pull", "stamp": "press", "wipe": "wipe"}
TASK_OBJECT = {"pick_place": "disk", "zipper": "zipper", "stamp": "stamp", "wipe": "wiper"}
TASK_IDS = {t: i for i, t in enumerate(TASKS)}


@dataclass
class SimConfig:
    # contact model
    k_n: float = 100.0
    k_t: float = 5.0
    k_path: float = 30.0          # zipper tab spring toward the slider
    noise_sigma: float = 0.02
    # task rules
    d_jam: float = 0.03
    jam_ticks: int = 5
    delta_max: float = 0.02
    f_lo: float = 0.5
    f_hi: float = 2.0
    hold_full: int = 15
    hold_half: int = 8
    wipe_bins: int = 8
    wipe_cover_radius: float = 0.05
    # geometry
    grid: int = 16
    z_min: float = 0.005
    z_max: float = 0.25
    surf_lo: float = 0.05          # hidden surface height range (stamp/wipe)
    surf_hi: float = 0.09
    creep_lo: float = 0.0008       # stamp pad creep per contact tick
    creep_hi: float = 0.0020
    wiggle_amp1: float = 0.024     # zipper lateral wiggle; amp1+amp2 stays
    wiggle_amp2: float = 0.007     # below half a pixel, so renders are exact
    wiggle_len1: float = 0.5
    wiggle_len2: float = 0.27
    track_len: float = 0.5
    slider_catchup: float = 0.04   # max slider advance per tick when aligned
    grasp_radius: float = 0.045
    grasp_z: float = 0.035
    grasp_aperture: float = 0.35
    drop_radius: float = 0.10      # zipper tab slips if stretched this far
    # actuation
    max_dxy: float = 0.04
    max_dz: float = 0.02
    max_dap: float = 0.25
    z_start_lo: float = 0.12
    z_start_hi: float = 0.22
    # tactile synthesis
    n_markers: int = 16
    marker_tangential: float = 0.5
    marker_dilation: float = 0.3
    marker_noise: float = 0.02
    vt_size: int = 8
    vt_sigma_px: float = 1.2
    vt_center_gain: float = 2.5    # pixels of blob shift per Newton tangential
    vt_noise: float = 0.01
    # scripted expert
    expert_noise: float = 0.004
    expert_force_target: float = 1.2
    expert_pull_speed: float = 0.01
    # episode caps
    max_ticks_pick: int = 110
    max_ticks_zipper: int = 150
    max_ticks_stamp: int = 130
    max_ticks_wipe: int = 160

    def max_ticks(self, task: str) -> int:
        return {"pick_place": self.max_ticks_pick, "zipper": self.max_ticks_zipper,
                "stamp": self.max_ticks_stamp, "wipe": self.max_ticks_wipe}[task]


def cell_center(row: int, col: int, grid: int) -> tuple[float, float]:
    """(x, y) of a raster cell center; x maps to columns, y to rows."""
    return (col + 0.5) / grid, (row + 0.5) / grid


@dataclass
class Stages:
    grasp: bool = False
    half: bool = False
    full: bool = False

    def as_flags(self) -> dict:
        # stages are monotone: a later stage requires the earlier ones
        half = self.half and self.grasp
        full = self.full and half
        return {"grasp": float(self.grasp), "half": float(half), "full": float(full),
                "overall": float(full)}


class World:
    """One episode of one task."""

    def __init__(self, cfg: SimConfig, task: str, seed: int):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        self.cfg = cfg
        self.task = task
        self.seed = int(seed)
        root = Rng(seed)
        self._geom_rng = root.child(0)
        self._noise_root = root.child(1)
        self._expert_root = root.child(2)
        self.tick = 0
        self.terminal = False
        self.fail_reason: str | None = None
        self.stages = Stages()
        self.jam_count = 0
        self.hold_count = 0
        self.max_hold = 0
        self.contact_ticks = 0
        self.vel = np.zeros(4)
        self._build_geometry()

    # ---- geometry -----------------------------------------------------------

    def _pick_cells(self, n: int, lo: int = 3, hi: int = 12) -> list[tuple[int, int]]:
        cells: list[tuple[int, int]] = []
        while len(cells) < n:
            r = int(self._geom_rng.uniform_int(lo, hi + 1))
            c = int(self._geom_rng.uniform_int(lo, hi + 1))
            if all(abs(r - r2) + abs(c - c2) > 2 for r2, c2 in cells):
                cells.append((r, c))
        return cells

    def _build_geometry(self):
        cfg = self.cfg
        g = cfg.grid
        half_px = 0.5 / g
        color_names = list(COLORS)
        self.color = color_names[int(self._geom_rng.uniform_int(0, len(color_names)))]

        if self.task == "pick_place":
            cells = self._pick_cells(4)
            self.target_cell, d1, d2, self.zone_cell = cells
            self.distractors = [d1, d2]
            others = [c for c in color_names if c != self.color]
            self.distractor_colors = [others[0], others[1]]
            # zone is a 2x2 pixel region; its center sits half a pixel past
            # the corner cell center
            zx, zy = cell_center(*self.zone_cell, g)
            self.zone_xy = np.array([zx + half_px, zy + half_px])
            self.obj_xy = np.array(cell_center(*self.target_cell, g))
            self.carried = False
            self.placed = False
            ee_cell = self._pick_cells(1)[0]
        elif self.task == "zipper":
            row = int(self._geom_rng.uniform_int(4, 12))
            self.track_row = row
            self.track_col0 = 3
            x0, y0 = cell_center(row, self.track_col0, g)
            self.track_start = np.array([x0, y0])
            self.phase1 = float(self._geom_rng.uniform()) * 2 * math.pi
            self.phase2 = float(self._geom_rng.uniform()) * 2 * math.pi
            self.slider_s = 0.0
            self.engaged = False
            ee_cell = (int(self._geom_rng.uniform_int(4, 12)), 13)
        elif self.task == "stamp":
            self.pad_cell, self.tool_cell = self._pick_cells(2)
            px, py = cell_center(*self.pad_cell, g)
            self.pad_xy = np.array([px + half_px, py + half_px])  # 2x2 pad center
            self.tool_xy = np.array(cell_center(*self.tool_cell, g))
            self.pad_z0 = cfg.surf_lo + float(self._geom_rng.uniform()) * (cfg.surf_hi - cfg.surf_lo)
            self.creep = cfg.creep_lo + float(self._geom_rng.uniform()) * (cfg.creep_hi - cfg.creep_lo)
            self.tool_grasped = False
            ee_cell = self._pick_cells(1)[0]
        else:  # wipe
            self.arc_center_cell, self.tool_cell = self._pick_cells(2, lo=5, hi=10)
            self.arc_center = np.array(cell_center(*self.arc_center_cell, g))
            self.tool_xy = np.array(cell_center(*self.tool_cell, g))
            self.arc_radius = 0.18
            self.surf_z = cfg.surf_lo + float(self._geom_rng.uniform()) * (cfg.surf_hi - cfg.surf_lo)
            self.bins_covered = np.zeros(cfg.wipe_bins, dtype=bool)
            self.tool_grasped = False
            ee_cell = self._pick_cells(1)[0]

        ex, ey = cell_center(*ee_cell, g)
        z0 = cfg.z_start_lo + float(self._geom_rng.uniform()) * (cfg.z_start_hi - cfg.z_start_lo)
        self.ee = np.array([ex, ey, z0, 1.0])  # aperture starts fully open

    # ---- zipper track ---------------------------------------------------------

    def track_true(self, s: float) -> np.ndarray:
        """True (wiggled) track point at progress s in [0, 1]."""
        cfg = self.cfg
        arc = s * cfg.track_len
        x = self.track_start[0] + arc
        y = (self.track_start[1]
             + cfg.wiggle_amp1 * math.sin(2 * math.pi * arc / cfg.wiggle_len1 + self.phase1)
             + cfg.wiggle_amp2 * math.sin(2 * math.pi * arc / cfg.wiggle_len2 + self.phase2))
        return np.array([x, y])

    def slider_xy(self) -> np.ndarray:
        return self.track_true(self.slider_s)

    # ---- contact model ----------------------------------------------------------

    def _surface_penetration(self) -> tuple[float, np.ndarray]:
        """(penetration depth, lateral spring force xy) for the current pose."""
        cfg = self.cfg
        z, ap = self.ee[2], self.ee[3]
        if self.task == "zipper":
            if self.engaged:
                # tab tension ramps continuously as the gripper closes on it
                depth = min(max(cfg.grasp_aperture - ap, 0.0) * 0.04, 0.015)
                spring = cfg.k_path * (self.slider_xy() - self.ee[:2])
                return depth, spring
            return 0.0, np.zeros(2)
        if self.task == "stamp":
            if np.max(np.abs(self.ee[:2] - self.pad_xy)) <= 1.0 / cfg.grid:
                surf = self.pad_z0 - self.creep * self.contact_ticks
                return max(0.0, surf - z), np.zeros(2)
            return 0.0, np.zeros(2)
        if self.task == "wipe":
            rad = float(np.linalg.norm(self.ee[:2] - self.arc_center))
            over = (abs(rad - self.arc_radius) <= 0.05
                    and self.ee[1] >= self.arc_center[1] - 0.02)
            if over:
                return max(0.0, self.surf_z - z), np.zeros(2)
            return 0.0, np.zeros(2)
        return 0.0, np.zeros(2)  # pick_place has no raised geometry

    def true_forces(self) -> tuple[np.ndarray, int, float]:
        """Pre-noise force6 (normal vector ++ tangential vector), label, depth."""
        cfg = self.cfg
        depth, spring = self._surface_penetration()
        f_n = np.array([0.0, 0.0, cfg.k_n * depth])
        if depth > 0.0:
            f_t_xy = spring - cfg.k_t * self.vel[:2]
        else:
            f_t_xy = np.zeros(2)
        label = int(depth > 0.0)
        return np.array([f_n[0], f_n[1], f_n[2], f_t_xy[0], f_t_xy[1], 0.0]), label, depth

    # ---- tactile synthesis --------------------------------------------------------

    def tactile_reading(self) -> tuple[TactileReading, int]:
        """Noisy reported reading in all three formats plus the exact label.

        All formats are synthesized every tick from dedicated child streams,
        so the consumed stream layout never depends on which format a policy
        actually reads.
        """
        cfg = self.cfg
        true6, label, _ = self.true_forces()
        r = self._noise_root.child(self.tick)
        force6 = true6 + cfg.noise_sigma * r.child(0).standard_normal((6,))

        f_nz, ftx, fty = true6[2], true6[3], true6[4]
        side = int(math.sqrt(cfg.n_markers))
        grid1d = (np.arange(side) - (side - 1) / 2) / ((side - 1) / 2)
        ux, uy = np.meshgrid(grid1d, grid1d)
        u = np.stack([ux.reshape(-1), uy.reshape(-1)], axis=1)
        marker = (cfg.marker_tangential * np.array([ftx, fty])
                  + cfg.marker_dilation * f_nz * u
                  + cfg.marker_noise * r.child(1).standard_normal((cfg.n_markers, 2)))

        s = cfg.vt_size
        cx = (s - 1) / 2 + float(np.clip(cfg.vt_center_gain * ftx, -3, 3))
        cy = (s - 1) / 2 + float(np.clip(cfg.vt_center_gain * fty, -3, 3))
        rows, cols = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
        blob = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * cfg.vt_sigma_px ** 2))
        peak = min(abs(f_nz) / cfg.f_hi, 1.0)
        img = np.zeros((s, s, 3))
        img[:, :, 0] = peak * blob
        img[:, :, 1] = peak * blob * np.clip(0.5 + 0.25 * ftx, 0.0, 1.0)
        img[:, :, 2] = peak * blob * np.clip(0.5 + 0.25 * fty, 0.0, 1.0)
        img = np.clip(img + cfg.vt_noise * r.child(2).standard_normal((s, s, 3)), 0.0, 1.0)

        return TactileReading(force6=force6, marker2d=marker, vt_image=img), label

    # ---- observation ----------------------------------------------------------------

    def render(self) -> np.ndarray:
        """Exact pixel-classified top-down raster.

        Height is never drawn. The zipper track and slider are drawn at their
        nominal row: the true path stays within half a pixel of it, so the
        nominal raster IS the exact pixel classification of the true one.
        """
        cfg = self.cfg
        g = cfg.grid
        img = np.zeros((g, g, 3))

        def paint(cell, color, value=1.0):
            r, c = cell
            if 0 <= r < g and 0 <= c < g:
                img[r, c] = np.array(color) * value

        if self.task == "pick_place":
            zr, zc = self.zone_cell
            for dr in (0, 1):
                for dc in (0, 1):
                    paint((zr + dr, zc + dc), (0.4, 0.4, 0.4))
            for cell, cname in zip(self.distractors, self.distractor_colors):
                paint(cell, COLORS[cname])
            paint((int(self.obj_xy[1] * g), int(self.obj_xy[0] * g)), COLORS[self.color])
        elif self.task == "zipper":
            ncols = int(round(cfg.track_len * g))
            for c in range(self.track_col0, self.track_col0 + ncols + 1):
                paint((self.track_row, c), COLORS[self.color], 0.5)
            sx = self.track_start[0] + self.slider_s * cfg.track_len
            paint((self.track_row, int(sx * g)), COLORS[self.color], 1.0)
        elif self.task == "stamp":
            pr, pc = self.pad_cell
            for dr in (0, 1):
                for dc in (0, 1):
                    paint((pr + dr, pc + dc), COLORS[self.color], 0.5)
            if not self.tool_grasped:
                paint((int(self.tool_xy[1] * g), int(self.tool_xy[0] * g)),
                      COLORS[self.color], 1.0)
        else:
            for k in range(cfg.wipe_bins):
                bx, by = self._bin_xy(k)
                value = 0.8 if self.bins_covered[k] else 0.4
                paint((int(by * g), int(bx * g)), COLORS[self.color], value)
            if not self.tool_grasped:
                paint((int(self.tool_xy[1] * g), int(self.tool_xy[0] * g)),
                      COLORS[self.color], 1.0)

        paint((min(int(self.ee[1] * g), g - 1), min(int(self.ee[0] * g), g - 1)),
              (1.0, 1.0, 1.0))
        return img

    def _bin_xy(self, k: int) -> tuple[float, float]:
        # half-arc below the center, swept left to right
        theta = math.pi * (1.0 - (k + 0.5) / self.cfg.wipe_bins)
        return (self.arc_center[0] - self.arc_radius * math.cos(theta),
                self.arc_center[1] + self.arc_radius * math.sin(theta))

    def instruction_ids(self) -> np.ndarray:
        return np.array([VOCAB_IDS[TASK_VERB[self.task]], VOCAB_IDS[self.color],
                         VOCAB_IDS[TASK_OBJECT[self.task]]], dtype=np.int64)

    def state_vector(self) -> np.ndarray:
        return np.concatenate([self.ee, self.vel]).astype(np.float64)

    def target_patch_indices(self, patch: int = 4) -> list[int]:
        """Patches (row-major) containing target-object pixels, from geometry."""
        g = self.cfg.grid
        n = g // patch
        if self.task == "pick_place":
            cells = [(int(self.obj_xy[1] * g), int(self.obj_xy[0] * g))]
        elif self.task == "zipper":
            ncols = int(round(self.cfg.track_len * g))
            cells = [(self.track_row, c)
                     for c in range(self.track_col0, self.track_col0 + ncols + 1)]
        elif self.task == "stamp":
            pr, pc = self.pad_cell
            cells = [(pr + dr, pc + dc) for dr in (0, 1) for dc in (0, 1)]
        else:
            cells = [(int(self._bin_xy(k)[1] * g), int(self._bin_xy(k)[0] * g))
                     for k in range(self.cfg.wipe_bins)]
        return sorted({(r // patch) * n + (c // patch) for r, c in cells
                       if 0 <= r < g and 0 <= c < g})

    # ---- stepping ----------------------------------------------------------------

    def clip_action(self, action: np.ndarray) -> np.ndarray:
        """Per-axis actuation limits; the executed displacement."""
        cfg = self.cfg
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        return np.array([
            float(np.clip(a[0], -cfg.max_dxy, cfg.max_dxy)),
            float(np.clip(a[1], -cfg.max_dxy, cfg.max_dxy)),
            float(np.clip(a[2], -cfg.max_dz, cfg.max_dz)),
            float(np.clip(a[3], -cfg.max_dap, cfg.max_dap)),
        ])

    def step(self, action: np.ndarray):
        """Apply one clamped action; update contact, task events, stages."""
        cfg = self.cfg
        if self.terminal:
            return
        action = np.asarray(action, dtype=np.float64).reshape(-1)
        if action.shape[0] != 4 or not np.all(np.isfinite(action)):
            self.terminal = True
            self.fail_reason = "bad_action"
            return
        d = self.clip_action(action)
        before = self.ee.copy()
        self.ee = self.ee + d
        self.ee[0] = float(np.clip(self.ee[0], 0.0, 1.0))
        self.ee[1] = float(np.clip(self.ee[1], 0.0, 1.0))
        self.ee[2] = float(np.clip(self.ee[2], cfg.z_min, cfg.z_max))
        self.ee[3] = float(np.clip(self.ee[3], 0.0, 1.0))
        self.vel = self.ee - before
        self.tick += 1
        self._task_events()
        if self.tick >= cfg.max_ticks(self.task) and not self.terminal:
            self.terminal = True
            if self.fail_reason is None and not self.stages.full:
                self.fail_reason = "timeout"

    def _near(self, xy: np.ndarray, tol: float | None = None) -> bool:
        cfg = self.cfg
        tol = cfg.grasp_radius if tol is None else tol
        return (float(np.linalg.norm(self.ee[:2] - np.asarray(xy))) <= tol
                and self.ee[2] <= cfg.grasp_z)

    def _task_events(self):
        cfg = self.cfg
        x, y, z, ap = self.ee

        if self.task == "pick_place":
            if not self.carried and not self.placed:
                if self._near(self.obj_xy) and ap <= cfg.grasp_aperture:
                    self.carried = True
                    self.stages.grasp = True
            elif self.carried:
                self.obj_xy = self.ee[:2].copy()
                if float(np.linalg.norm(self.ee[:2] - self.zone_xy)) <= 0.08:
                    self.stages.half = True
                    if ap >= 0.7:
                        self.carried = False
                        self.placed = True
                        self.stages.full = True
                        self.terminal = True
            return

        if self.task == "zipper":
            slider = self.slider_xy()
            if not self.engaged:
                if (float(np.linalg.norm(self.ee[:2] - slider)) <= cfg.grasp_radius
                        and z <= cfg.grasp_z and ap <= cfg.grasp_aperture):
                    self.engaged = True
                    self.stages.grasp = True
                    self.jam_count = 0
            else:
                stretch = float(np.linalg.norm(self.ee[:2] - slider))
                if ap > cfg.grasp_aperture + 0.15 or stretch > cfg.drop_radius:
                    self.engaged = False  # tab slipped; the policy may re-grasp
                    self.jam_count = 0
                else:
                    # a misaligned tab makes the slider stick: its advance
                    # scales down with lateral offset, the ee runs ahead, and
                    # the stretched tab counts toward the jam rule
                    s_ee = float(np.clip((x - self.track_start[0]) / cfg.track_len, 0.0, 1.0))
                    lat = abs(y - self.track_true(s_ee)[1])
                    eff = max(0.0, 1.0 - lat / cfg.d_jam)
                    gap = max(0.0, s_ee - self.slider_s)
                    self.slider_s = min(1.0, self.slider_s + eff * min(
                        gap, cfg.slider_catchup / cfg.track_len))
                    deviation = float(np.linalg.norm(self.ee[:2] - self.slider_xy()))
                    if deviation >= cfg.d_jam:
                        self.jam_count += 1
                        if self.jam_count > cfg.jam_ticks:
                            self.terminal = True
                            self.fail_reason = "jam"
                    else:
                        self.jam_count = 0
                    if self.slider_s >= 0.5:
                        self.stages.half = True
                    if self.slider_s >= 0.99:
                        self.stages.full = True
                        self.terminal = True
                self.contact_ticks += 1
            return

        # stamp and wipe share the tool-then-surface structure
        if not self.tool_grasped:
            if self._near(self.tool_xy) and ap <= cfg.grasp_aperture:
                self.tool_grasped = True
                self.stages.grasp = True
        else:
            self.tool_xy = self.ee[:2].copy()
        _, label, depth = self.true_forces()

        if self.task == "stamp":
            if label:
                self.contact_ticks += 1
                if depth > cfg.delta_max:
                    self.terminal = True
                    self.fail_reason = "collision"
                    return
                f = cfg.k_n * depth
                if self.tool_grasped and cfg.f_lo <= f <= cfg.f_hi:
                    self.hold_count += 1
                    self.max_hold = max(self.max_hold, self.hold_count)
                else:
                    self.hold_count = 0
            else:
                self.hold_count = 0
            if self.max_hold >= cfg.hold_half:
                self.stages.half = True
            if self.max_hold >= cfg.hold_full:
                self.stages.full = True
                self.terminal = True
            return

        # wipe
        if label:
            self.contact_ticks += 1
            f = cfg.k_n * depth
            if self.tool_grasped and cfg.f_lo <= f <= cfg.f_hi:
                for k in range(cfg.wipe_bins):
                    if float(np.linalg.norm(self.ee[:2] - np.array(self._bin_xy(k)))) \
                            <= cfg.wipe_cover_radius:
                        self.bins_covered[k] = True
        frac = float(self.bins_covered.mean())
        if frac >= 0.5:
            self.stages.half = True
        if frac >= 0.99:
            self.stages.full = True
            self.terminal = True

    # ---- scripted expert -------------------------------------------------------------

    def scripted_action(self) -> np.ndarray:
        """Waypoint proportional controller with a force-feedback contact branch.

        The controller reads reported geometry the way a teleoperator would
        (true slider position for approach) but its contact behavior is driven
        by force: lateral correction from the tab spring, pull speed eased by
        tab tension, and press depth regulated toward a target force.
        """
        cfg = self.cfg
        x, y, z, ap = self.ee
        true6, label, _ = self.true_forces()
        a = np.zeros(4)

        def go_xy(target, gain=0.9):
            a[0] = gain * (target[0] - x)
            a[1] = gain * (target[1] - y)

        def go_z(target, gain=0.9):
            a[2] = gain * (target - z)

        def near_xy(target, tol=0.015):
            return float(np.linalg.norm(self.ee[:2] - np.asarray(target))) <= tol

        def approach_and_grasp(target_xy):
            if not near_xy(target_xy):
                go_xy(target_xy)
                go_z(max(z, 0.11))
                a[3] = 1.0 - ap
            elif z > 0.028:
                go_z(0.02)
                go_xy(target_xy, 0.4)
            else:
                a[3] = 0.2 - ap  # close

        if self.task == "pick_place":
            if not self.carried and not self.placed:
                approach_and_grasp(self.obj_xy)
            elif self.carried:
                if z < 0.08 and not near_xy(self.zone_xy, 0.05):
                    go_z(0.10)
                elif not near_xy(self.zone_xy, 0.03):
                    go_xy(self.zone_xy)
                else:
                    a[3] = 1.0 - ap  # release
        elif self.task == "zipper":
            if not self.engaged:
                approach_and_grasp(self.slider_xy())
            else:
                # pull along the tangent, eased by tab tension; steer from the
                # lateral spring force
                a[0] = cfg.expert_pull_speed + 0.8 * true6[3] / cfg.k_path
                a[1] = 0.8 * true6[4] / cfg.k_path
                a[3] = 0.2 - ap
        elif self.task == "stamp":
            if not self.tool_grasped:
                approach_and_grasp(self.tool_xy)
            elif not near_xy(self.pad_xy, 0.02):
                if z < 0.12:
                    go_z(0.13)
                else:
                    go_xy(self.pad_xy)
            elif label == 0:
                go_xy(self.pad_xy, 0.3)
                a[2] = -cfg.max_dz  # descend until touch
            else:
                a[2] = -(cfg.expert_force_target - true6[2]) / cfg.k_n
                go_xy(self.pad_xy, 0.3)
        else:  # wipe
            if not self.tool_grasped:
                approach_and_grasp(self.tool_xy)
            else:
                todo = [k for k in range(cfg.wipe_bins) if not self.bins_covered[k]]
                if not todo:
                    a[2] = 0.02
                else:
                    target = np.array(self._bin_xy(todo[0]))
                    if not near_xy(target, 0.02):
                        go_xy(target, 0.6)
                        if label == 0 and z > 0.12:
                            go_z(0.11)
                    if near_xy(target, 0.09):
                        if label == 0:
                            a[2] = -cfg.max_dz
                        else:
                            a[2] = -(cfg.expert_force_target - true6[2]) / cfg.k_n
                    a[3] = 0.2 - ap

        noise = self._expert_root.child(self.tick).standard_normal((4,))
        a[:2] += cfg.expert_noise * noise[:2]
        a[2] += 0.5 * cfg.expert_noise * noise[2]
        return a


def evaluate_success(world: World) -> dict:
    """Stage flags for a finished (or ongoing) episode."""
    flags = world.stages.as_flags()
    flags["fail_reason"] = world.fail_reason or ""
    return flags


def run_scripted_episode(cfg: SimConfig, task: str, seed: int):
    """Roll the scripted expert to termination; returns the frame list and world."""
    world = World(cfg, task, seed)
    frames = []
    while not world.terminal:
        frame_img = world.render()
        state = world.state_vector()
        reading, label = world.tactile_reading()
        action = world.scripted_action()
        frames.append({
            "image": frame_img, "instruction": world.instruction_ids(),
            "state": state, "reading": reading, "contact_label": label,
            # record what actually executes, not the raw controller output
            "expert_action": world.clip_action(action), "tick": world.tick,
        })
        world.step(action)
    return frames, world
