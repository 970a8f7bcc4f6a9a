"""Deterministic planar-arm contact simulator.

A 2.5-D decomposition: three revolute joints move the tool in (x, y), a
prismatic axis z carries the contact direction. Contact with the horizontal
work surface is a spring-damper normal force plus smoothed Coulomb friction
in-plane. The task surfaces (writing / cleaning / peeling) live on a 64x64
cell grid over a fixed region of interest and are rendered top-down.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import control

GRID = 64
ROI = (0.15, 0.55, -0.20, 0.20)  # x_lo, x_hi, y_lo, y_hi (m)
CELL = (ROI[1] - ROI[0]) / GRID
CONTROL_DT = 0.01  # s, fixed control tick
POLICY_DECIMATION = 10  # policy acts every 10 ticks (10 Hz)

_xs = ROI[0] + (np.arange(GRID) + 0.5) * CELL  # cell centre x per column
_ys = ROI[2] + (np.arange(GRID) + 0.5) * CELL  # cell centre y per row
_CX, _CY = np.meshgrid(_xs, _ys, indexing="xy")  # row = y index, col = x index

CAMERA_DEPTH_SURFACE = 0.50  # m from the overhead camera to the table
ARM_PLANE_HEIGHT = 0.05  # arm links travel this far above the surface
ARM_CAPSULE_HALFWIDTHS = (0.04, 0.03, 0.012)  # per link, shoulder to wrist
TOOL_DISC_RADIUS = 0.015
OCCLUSION_FRACTION = 0.15

COLORS = {
    "background": (235, 235, 235),
    "ink": (25, 25, 25),
    "particle": (150, 75, 0),
    "skin": (40, 120, 40),
    "peeled": (210, 200, 120),
    "damaged": (200, 40, 40),
    "arm": (90, 90, 110),
    "tool": (50, 50, 70),
}

SLIDE_SPEED = 0.02  # m/s, point vs line contact boundary
TACTILE_EPS = 0.01  # N per cell for the tactile-active bit

# pad 0 pressure profile over its 24 cells (4x6), normalized to sum 1 so the
# cell sum reproduces the normal force exactly
_g = np.exp(-0.5 * ((np.arange(4)[:, None] - 1.5) ** 2 + (np.arange(6)[None, :] - 2.5) ** 2) / 1.5)
TACTILE_PROFILE = (_g / _g.sum()).reshape(24).astype(np.float64)


@dataclass
class ArmModel:
    links: tuple = control.DEFAULT_LINKS
    z_range: tuple = control.Z_RANGE
    inertia: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.4, 0.1, 2.0]))
    damping: np.ndarray = field(default_factory=lambda: np.array([2.0, 1.5, 1.0, 20.0]))
    tau_max: np.ndarray = field(default_factory=lambda: np.array([20.0, 15.0, 10.0, 60.0]))
    tool_lever: float = 0.10  # m between wrench sensor and tool tip


@dataclass
class ContactParams:
    k_c: float = 5000.0  # N/m normal spring
    c_c: float = 50.0  # N s/m normal damper
    mu: float = 0.4  # Coulomb friction coefficient
    v_ref: float = SLIDE_SPEED  # m/s friction smoothing scale
    k_floor: float = 5.0  # N/m minimum spring so penetration implies force


TASK_DEFAULTS = {
    "writing": dict(force_band=(1.0, 4.0), tool_radius=0.006),
    "cleaning": dict(force_band=(1.0, 8.0), tool_radius=0.040),
    "peeling": dict(force_band=(1.0, 4.0), tool_radius=0.012, damage_force=6.0),
}

PEEL_RECT = (0.23, 0.47, -0.04, 0.04)  # cucumber footprint, long axis = x


class TaskSurface:
    """Cell grid payload plus the force conditions for task effect."""

    def __init__(self, kind, force_band, tool_radius, damage_force=np.inf, seed=0):
        if kind not in ("writing", "cleaning", "peeling"):
            raise ValueError(f"unknown task kind {kind!r}")
        self.kind = kind
        self.force_band = tuple(force_band)
        self.tool_radius = float(tool_radius)
        self.damage_force = float(damage_force)
        self.damaged = False
        self.grid = np.zeros((GRID, GRID), dtype=np.uint8)
        self.long_axis = np.array([1.0, 0.0])
        if kind == "cleaning":
            rng = np.random.default_rng(seed)
            self.grid = (rng.random((GRID, GRID)) < 0.35).astype(np.uint8)
        elif kind == "peeling":
            x0, x1, y0, y1 = PEEL_RECT
            self.skin_mask = (_CX >= x0) & (_CX <= x1) & (_CY >= y0) & (_CY <= y1)
            self.grid[self.skin_mask.T] = 1
        self.initial_count = int(self.grid.sum())

    @classmethod
    def make(cls, kind, seed=0, **overrides):
        params = dict(TASK_DEFAULTS[kind])
        params.update(overrides)
        return cls(kind, params["force_band"], params["tool_radius"],
                   params.get("damage_force", np.inf), seed=seed)

    def copy(self):
        out = TaskSurface.__new__(TaskSurface)
        out.__dict__.update(self.__dict__)
        out.grid = self.grid.copy()
        return out

    def _footprint(self, x, y):
        # grid indexed [col=x, row=y] to keep cell (i, j) at (_xs[i], _ys[j])
        return (_CX.T - x) ** 2 + (_CY.T - y) ** 2 <= self.tool_radius**2

    def update(self, x, y, F_z, v_xy, dt):
        """Apply one tick of task effect at tip position (x, y)."""
        if F_z <= 0.0:
            return
        lo, hi = self.force_band
        if self.kind == "writing":
            if lo <= F_z <= hi:
                self.grid[self._footprint(x, y)] = 1
        elif self.kind == "cleaning":
            if F_z >= lo and np.hypot(*v_xy) >= SLIDE_SPEED:
                self.grid[self._footprint(x, y)] = 0
        else:  # peeling
            if F_z > self.damage_force:
                self.damaged = True
            speed = np.hypot(*v_xy)
            if lo <= F_z <= hi and speed >= SLIDE_SPEED:
                cosang = abs(np.dot(v_xy, self.long_axis)) / speed
                if cosang >= np.cos(np.deg2rad(30.0)):
                    self.grid[self._footprint(x, y)] = 0

    # -- bookkeeping used by metrics and rewards --
    def count(self):
        return int(self.grid.sum())

    def peeled_count(self):
        return self.initial_count - self.count()


@dataclass
class GroundTruthBits:
    contact: bool
    contact_type: str  # "point" | "line"
    tactile_active: bool
    occluded: bool

    def as_array(self):
        return np.array(
            [self.contact, self.contact_type == "line", self.tactile_active,
             self.occluded],
            dtype=np.float32,
        )


@dataclass
class SensorFrame:
    rgb: np.ndarray  # (64, 64, 3) uint8
    depth: np.ndarray  # (64, 64) float32, metres from camera
    wrench: np.ndarray  # (6,) float32
    tactile: np.ndarray  # (4, 24) float32, >= 0
    joints: np.ndarray  # (4,) float32
    timestamp: float


@dataclass
class SimState:
    q: np.ndarray
    qdot: np.ndarray
    tau_cmd: np.ndarray
    surface: TaskSurface
    t: float = 0.0


class PlanarArmSim:
    """Static model parameters; all dynamics are pure functions of SimState."""

    def __init__(self, arm=None, contact=None):
        self.arm = arm or ArmModel()
        self.contact = contact or ContactParams()

    # -- lifecycle ---------------------------------------------------------
    def reset(self, task, seed=0, q0=None, surface_overrides=None):
        surface = TaskSurface.make(task, seed=seed, **(surface_overrides or {}))
        if q0 is None:
            q0 = np.array([0.4, 0.8, -0.6, 0.05])
        return SimState(
            q=np.asarray(q0, dtype=float).copy(),
            qdot=np.zeros(4),
            tau_cmd=np.zeros(4),
            surface=surface,
        )

    # -- contact model -----------------------------------------------------
    def contact_forces(self, state):
        """(F_z, F_xy) acting on the tool from the surface."""
        z = state.q[3]
        if z >= 0.0:
            return 0.0, np.zeros(2)
        c = self.contact
        zdot = state.qdot[3]
        F_z = max(c.k_c * (-z) - c.c_c * zdot, c.k_floor * (-z))
        J = control.jacobian(state.q, self.arm.links)
        v_xy = (J @ state.qdot)[:2]
        speed = np.hypot(*v_xy)
        if speed > 1e-12:
            mag = c.mu * F_z * np.tanh(speed / c.v_ref)
            F_xy = -mag * v_xy / speed
        else:
            F_xy = np.zeros(2)
        return float(F_z), F_xy

    def tip_velocity(self, state):
        return (control.jacobian(state.q, self.arm.links) @ state.qdot)[:2]

    # -- integration -------------------------------------------------------
    def step(self, state, torques, dt=CONTROL_DT):
        """Semi-implicit Euler update of the damped joint dynamics."""
        torques = np.asarray(torques, dtype=float)
        if not np.isfinite(torques).all():
            raise ValueError("non-finite torque command")
        arm = self.arm
        tau = np.clip(torques, -arm.tau_max, arm.tau_max)
        F_z, F_xy = self.contact_forces(state)
        J = control.jacobian(state.q, arm.links)
        tau_ext = np.zeros(4)
        tau_ext[:3] = J[:2, :3].T @ F_xy
        tau_ext[3] = F_z  # normal force pushes the tool up
        acc = (tau + tau_ext - arm.damping * state.qdot) / arm.inertia
        qdot = state.qdot + dt * acc
        q = state.q + dt * qdot
        lo, hi = control.joint_limits(arm.z_range)
        clipped = np.clip(q, lo, hi)
        qdot = np.where(clipped != q, 0.0, qdot)
        new = SimState(q=clipped, qdot=qdot, tau_cmd=tau,
                       surface=state.surface, t=state.t + dt)
        self.task_update(new, F_z)
        return new

    def task_update(self, state, F_z=None):
        if F_z is None:
            F_z, _ = self.contact_forces(state)
        tip = control.forward_kinematics(state.q, self.arm.links)
        state.surface.update(tip[0], tip[1], F_z, self.tip_velocity(state), CONTROL_DT)

    # -- rasterization -----------------------------------------------------
    def _link_points(self, state):
        """Joint positions of the chain in the plane, base included."""
        angles = np.cumsum(state.q[:3])
        pts = [np.zeros(2)]
        pos = np.zeros(2)
        for L, a in zip(self.arm.links, angles):
            pos = pos + L * np.array([np.cos(a), np.sin(a)])
            pts.append(pos.copy())
        return pts

    def arm_mask(self, state, res=GRID):
        """Boolean image mask (row = y, col = x) of arm capsules + tool disc."""
        cell = (ROI[1] - ROI[0]) / res
        xs = ROI[0] + (np.arange(res) + 0.5) * cell
        ys = ROI[2] + (np.arange(res) + 0.5) * cell
        cx, cy = np.meshgrid(xs, ys, indexing="xy")
        mask = np.zeros((res, res), dtype=bool)
        pts = self._link_points(state)
        for p0, p1, hw in zip(pts[:-1], pts[1:], ARM_CAPSULE_HALFWIDTHS):
            d = p1 - p0
            L2 = float(d @ d)
            if L2 < 1e-12:
                continue
            tproj = np.clip(((cx - p0[0]) * d[0] + (cy - p0[1]) * d[1]) / L2, 0, 1)
            dist2 = (cx - (p0[0] + tproj * d[0])) ** 2 + (cy - (p0[1] + tproj * d[1])) ** 2
            mask |= dist2 <= hw * hw
        tip = pts[-1]
        mask |= (cx - tip[0]) ** 2 + (cy - tip[1]) ** 2 <= TOOL_DISC_RADIUS**2
        return mask

    def arm_coverage(self, state):
        return float(self.arm_mask(state).mean())

    def render(self, state):
        """Top-down orthographic RGB + depth of the ROI."""
        surf = state.surface
        rgb = np.empty((GRID, GRID, 3), dtype=np.uint8)
        rgb[:] = COLORS["background"]
        grid_img = surf.grid.T  # row = y, col = x
        if surf.kind == "writing":
            rgb[grid_img == 1] = COLORS["ink"]
        elif surf.kind == "cleaning":
            rgb[grid_img == 1] = COLORS["particle"]
        else:
            skin_img = surf.skin_mask  # built on (_CX, _CY), already row=y
            rgb[skin_img & (grid_img == 1)] = COLORS["skin"]
            rgb[skin_img & (grid_img == 0)] = (
                COLORS["damaged"] if surf.damaged else COLORS["peeled"]
            )
        depth = np.full((GRID, GRID), CAMERA_DEPTH_SURFACE, dtype=np.float32)
        mask = self.arm_mask(state)
        rgb[mask] = COLORS["arm"]
        tip = control.forward_kinematics(state.q, self.arm.links)
        tool = (_CX - tip[0]) ** 2 + (_CY - tip[1]) ** 2 <= TOOL_DISC_RADIUS**2
        rgb[tool] = COLORS["tool"]
        depth[mask | tool] = CAMERA_DEPTH_SURFACE - ARM_PLANE_HEIGHT
        return rgb, depth

    # -- sensing -----------------------------------------------------------
    def sense(self, state):
        F_z, F_xy = self.contact_forces(state)
        d = self.arm.tool_lever
        wrench = np.array(
            [F_xy[0], F_xy[1], F_z, -d * F_xy[1], d * F_xy[0], 0.0], dtype=np.float32
        )
        tactile = np.zeros((4, 24), dtype=np.float32)
        tactile[0] = (F_z * TACTILE_PROFILE).astype(np.float32)
        rgb, depth = self.render(state)
        return SensorFrame(
            rgb=rgb,
            depth=depth,
            wrench=wrench,
            tactile=tactile,
            joints=state.q.astype(np.float32),
            timestamp=state.t,
        )

    def ground_truth_labels(self, state):
        F_z, _ = self.contact_forces(state)
        contact = state.q[3] < 0.0
        speed = np.hypot(*self.tip_velocity(state))
        line = bool(contact and speed >= SLIDE_SPEED)
        tactile_active = bool(F_z * TACTILE_PROFILE.max() > TACTILE_EPS)
        occluded = self.arm_coverage(state) > OCCLUSION_FRACTION
        return GroundTruthBits(
            contact=bool(contact),
            contact_type="line" if line else "point",
            tactile_active=tactile_active,
            occluded=bool(occluded),
        )

    def instance_masks(self, state, res=128):
        """Binary instance masks (tool, task object) at mask resolution."""
        cell = (ROI[1] - ROI[0]) / res
        xs = ROI[0] + (np.arange(res) + 0.5) * cell
        ys = ROI[2] + (np.arange(res) + 0.5) * cell
        cx, cy = np.meshgrid(xs, ys, indexing="xy")
        tip = control.forward_kinematics(state.q, self.arm.links)
        tool = ((cx - tip[0]) ** 2 + (cy - tip[1]) ** 2 <= TOOL_DISC_RADIUS**2)
        if state.surface.kind == "peeling":
            x0, x1, y0, y1 = PEEL_RECT
            obj = (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
        else:
            obj = np.ones((res, res), dtype=bool)
        return {"tool": tool.astype(np.uint8), "object": obj.astype(np.uint8)}


def kinetic_energy(sim, state):
    return float(0.5 * np.dot(sim.arm.inertia * state.qdot, state.qdot))
