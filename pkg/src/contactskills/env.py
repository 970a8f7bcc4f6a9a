"""Policy-rate environment around the simulator and hybrid controller.

One policy step = one (dx, dF) offset applied to the running setpoint,
executed for ten 10 ms control ticks. The setpoint is clamped to the region
of interest and a force ceiling, matching the bounded offset action space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import control, sim as simmod

DX_BOUND = 0.01  # m per policy step and axis
DF_BOUND = 0.5  # N per policy step
F_MAX = 5.0  # N force-setpoint ceiling
DEFAULT_HORIZONS = {"writing": 200, "cleaning": 400, "peeling": 150}
DEFAULT_START_TIP = (0.35, 0.0)

ROI_MARGIN = 0.01


@dataclass
class StepResult:
    frame: simmod.SensorFrame
    labels: simmod.GroundTruthBits
    tip: np.ndarray  # (x, y, z) at the end of the policy step
    F_z: float


class SkillEnv:
    """Setpoint-integrating environment for one task episode."""

    def __init__(self, task, seed=0, sim=None, controller=None, horizon=None,
                 start_tip=DEFAULT_START_TIP, f_max=F_MAX,
                 surface_overrides=None):
        self.task = task
        self.sim = sim or simmod.PlanarArmSim()
        self.controller = controller or control.HybridController(
            tau_max=self.sim.arm.tau_max
        )
        self.horizon = horizon or DEFAULT_HORIZONS[task]
        self.start_tip = np.asarray(start_tip, dtype=float)
        self.f_max = f_max
        self.surface_overrides = surface_overrides
        self.state = None
        self.setpoint = None
        self.tip_path = None
        self.n_steps = 0
        self.reset(seed)

    def reset(self, seed=0):
        q0 = control.inverse_kinematics(
            np.array([self.start_tip[0], self.start_tip[1], 0.05, 0.0]),
            np.array([0.4, 0.8, -0.6, 0.05]),
            links=self.sim.arm.links,
        )
        self.state = self.sim.reset(self.task, seed=seed, q0=q0,
                                    surface_overrides=self.surface_overrides)
        self.controller.reset()
        self.setpoint = control.ControlSetpoint(
            X_d=np.array([self.start_tip[0], self.start_tip[1], 0.05, 0.0]),
            F_des=0.0,
        )
        self.tip_path = []
        self.n_steps = 0
        return self.sense()

    def sense(self):
        return self.sim.sense(self.state)

    def labels(self):
        return self.sim.ground_truth_labels(self.state)

    def tip_pose(self):
        return control.forward_kinematics(self.state.q, self.sim.arm.links)

    def measured_fz(self):
        return self.sim.contact_forces(self.state)[0]

    def step(self, dx, dF):
        """Apply one bounded offset action and run ten control ticks."""
        dx = np.clip(np.asarray(dx, dtype=float), -DX_BOUND, DX_BOUND)
        dF = float(np.clip(dF, -DF_BOUND, DF_BOUND))
        self.setpoint.X_d[0] = np.clip(
            self.setpoint.X_d[0] + dx[0], simmod.ROI[0] + ROI_MARGIN,
            simmod.ROI[1] - ROI_MARGIN
        )
        self.setpoint.X_d[1] = np.clip(
            self.setpoint.X_d[1] + dx[1], simmod.ROI[2] + ROI_MARGIN,
            simmod.ROI[3] - ROI_MARGIN
        )
        self.setpoint.F_des = float(np.clip(self.setpoint.F_des + dF, 0.0, self.f_max))
        for _ in range(simmod.POLICY_DECIMATION):
            F_meas = self.measured_fz()
            tau = self.controller.torques(
                self.state.q, self.state.qdot, self.setpoint, F_meas, simmod.CONTROL_DT
            )
            self.state = self.sim.step(self.state, tau, simmod.CONTROL_DT)
        self.n_steps += 1
        tip = self.tip_pose()[:3]
        F_z = self.measured_fz()
        if F_z > 0.0:
            self.tip_path.append(tip[:2].copy())
        return StepResult(frame=self.sense(), labels=self.labels(), tip=tip, F_z=F_z)

    # -- task progress -----------------------------------------------------
    def surface(self):
        return self.state.surface

    def horizon_reached(self):
        return self.n_steps >= self.horizon


class ReachEnv:
    """Dense-reward planar reach sanity task over the same arm and controller.

    Observation layout matches the skill observation width so the SAC stack
    is exercised unchanged: the goal offset occupies the state-bit slots.
    """

    SUCCESS_RADIUS = 0.015  # m
    HORIZON = 60

    def __init__(self, seed=0):
        self.env = SkillEnv("writing", seed=seed)
        self.rng = np.random.default_rng(seed)
        self.goal = None
        self.reset(seed)

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.env.reset(0)
        self.goal = np.array(
            [
                self.rng.uniform(simmod.ROI[0] + 0.06, simmod.ROI[1] - 0.06),
                self.rng.uniform(simmod.ROI[2] + 0.06, simmod.ROI[3] - 0.06),
            ]
        )
        self.t = 0
        return self.observe()

    def observe(self):
        tip = self.env.tip_pose()
        delta = self.goal - tip[:2]
        return np.array(
            [
                delta[0] / 0.4, delta[1] / 0.4, 0.0, 0.0,
                (tip[0] - 0.35) / 0.2, tip[1] / 0.2, tip[2] / 0.1,
                0.0, 0.0, 0.0, 0.0,
                self.t / self.HORIZON,
            ],
            dtype=np.float32,
        )

    def step(self, action):
        """action: (dx, dy, unused) scaled to the offset bounds."""
        dx = np.asarray(action[:2], dtype=float) * DX_BOUND
        self.env.step(dx, 0.0)
        self.t += 1
        tip = self.env.tip_pose()
        dist = float(np.linalg.norm(self.goal - tip[:2]))
        done = dist < self.SUCCESS_RADIUS or self.t >= self.HORIZON
        reward = -dist + (1.0 if dist < self.SUCCESS_RADIUS else 0.0)
        return self.observe(), reward, done, dist < self.SUCCESS_RADIUS
