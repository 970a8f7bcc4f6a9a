"""Hybrid position/force control for the planar arm.

The arm is three in-plane revolute joints plus a prismatic tool axis z.
Position axes are served by a Cartesian impedance law, the contact axis by a
PI force loop; both are mixed into joint efforts through the Jacobian
transpose with a nullspace posture spring, then clamped to motor limits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_LINKS = (0.30, 0.25, 0.15)
REV_LIMIT = 2.9  # rad, symmetric for all revolute joints
Z_RANGE = (-0.02, 0.10)  # m, prismatic travel


class UnreachableError(ValueError):
    """IK target outside the workspace or iteration did not converge."""


def joint_limits(z_range=Z_RANGE):
    lo = np.array([-REV_LIMIT, -REV_LIMIT, -REV_LIMIT, z_range[0]])
    hi = np.array([REV_LIMIT, REV_LIMIT, REV_LIMIT, z_range[1]])
    return lo, hi


def forward_kinematics(q, links=DEFAULT_LINKS):
    """Tool pose (x, y, z, yaw) of the planar chain."""
    q = np.asarray(q, dtype=float)
    angles = np.cumsum(q[:3])
    x = float(np.dot(links, np.cos(angles)))
    y = float(np.dot(links, np.sin(angles)))
    return np.array([x, y, q[3], angles[-1]])


def jacobian(q, links=DEFAULT_LINKS):
    """4x4 Jacobian mapping joint rates to (xdot, ydot, zdot, yaw rate)."""
    q = np.asarray(q, dtype=float)
    angles = np.cumsum(q[:3])
    s, c = np.sin(angles), np.cos(angles)
    J = np.zeros((4, 4))
    for j in range(3):
        J[0, j] = -np.dot(links[j:], s[j:])
        J[1, j] = np.dot(links[j:], c[j:])
        J[3, j] = 1.0
    J[2, 3] = 1.0
    return J


def inverse_kinematics(
    X_d,
    q_seed,
    links=DEFAULT_LINKS,
    damping=1e-3,
    tol=1e-6,
    max_iter=200,
    z_range=Z_RANGE,
):
    """Damped least-squares IK on tool position (x, y, z); yaw is free.

    Raises UnreachableError for targets outside the reachable annulus or the
    prismatic range, and on non-convergence.
    """
    X_d = np.asarray(X_d, dtype=float)
    r = np.hypot(X_d[0], X_d[1])
    if r > sum(links) - 1e-9:
        raise UnreachableError(f"target radius {r:.4f} m exceeds reach {sum(links)} m")
    if not (z_range[0] - 1e-12 <= X_d[2] <= z_range[1] + 1e-12):
        raise UnreachableError(f"z target {X_d[2]} outside prismatic range {z_range}")
    lo, hi = joint_limits(z_range)
    q = np.clip(np.asarray(q_seed, dtype=float).copy(), lo, hi)
    lam2 = damping * damping
    for _ in range(max_iter):
        err = X_d[:3] - forward_kinematics(q, links)[:3]
        if np.linalg.norm(err) <= tol:
            return q
        Jp = jacobian(q, links)[:3]
        JJt = Jp @ Jp.T + lam2 * np.eye(3)
        dq = Jp.T @ np.linalg.solve(JJt, err)
        norm = np.linalg.norm(dq)
        if norm > 0.3:
            dq *= 0.3 / norm
        q = np.clip(q + dq, lo, hi)
    raise UnreachableError(f"IK did not converge to {X_d[:3]} within {max_iter} iters")


@dataclass
class ControllerGains:
    stiffness: np.ndarray = field(default_factory=lambda: np.array([400.0, 400.0, 0.0]))
    damping: np.ndarray = field(default_factory=lambda: np.array([40.0, 40.0, 0.0]))
    force_kp: float = 1.0
    force_ki: float = 8.0
    integral_clamp: float = 3.0
    approach_force: float = 2.0  # N pushed toward the surface before contact


@dataclass
class ControlSetpoint:
    """Pose targets on the position axes, force target on the contact axis."""

    X_d: np.ndarray
    Xdot_d: np.ndarray = field(default_factory=lambda: np.zeros(4))
    F_des: float = 0.0


def impedance_wrench(setpoint, X, Xdot, gains, position_axes=(0, 1)):
    """Spring-damper force per position-controlled Cartesian axis.

    Axes outside `position_axes` get exactly zero so the force loop owns them.
    """
    F = np.zeros(3)
    for ax in position_axes:
        F[ax] = gains.stiffness[ax] * (setpoint.X_d[ax] - X[ax]) + gains.damping[
            ax
        ] * (setpoint.Xdot_d[ax] - Xdot[ax])
    return F


@dataclass
class ForceLoopState:
    integral: float = 0.0


def force_axis_control(F_meas, F_des, gains, dt, state, in_contact=True):
    """PI force regulation along the contact axis.

    Output is the magnitude pushed toward the surface (positive = press).
    Without contact a fixed approach force is commanded and the integral
    holds, so contact is established before regulation starts.
    """
    if not in_contact:
        return gains.approach_force if F_des > 0.0 else 0.0
    err = F_des - F_meas
    state.integral = float(
        np.clip(state.integral + gains.force_ki * err * dt, -gains.integral_clamp,
                gains.integral_clamp)
    )
    return F_des + gains.force_kp * err + state.integral


def map_to_torques(q, F_cart, tau_ns, tau_max, links=DEFAULT_LINKS):
    """tau = J^T F + tau_ns, clamped per joint to +-tau_max."""
    F_cart = np.asarray(F_cart, dtype=float)
    if not np.isfinite(F_cart).all():
        raise ValueError("non-finite Cartesian force command")
    tau = jacobian(q, links).T @ _as_wrench4(F_cart) + np.asarray(tau_ns, dtype=float)
    return np.clip(tau, -np.asarray(tau_max), np.asarray(tau_max))


def _as_wrench4(F):
    if F.shape == (4,):
        return F
    w = np.zeros(4)
    w[: F.shape[0]] = F
    return w


DEFAULT_Q_REST = np.array([0.4, 0.8, -0.6, 0.05])


def nullspace_torque(q, q_rest=DEFAULT_Q_REST, k_ns=2.0, links=DEFAULT_LINKS):
    """Posture spring projected into the nullspace of the (x, y) task rows.

    Only the revolute joints get nullspace effort; the prismatic axis is a
    task axis and stays untouched.
    """
    q = np.asarray(q, dtype=float)
    Jxy = jacobian(q, links)[:2, :3]
    N = np.eye(3) - np.linalg.pinv(Jxy) @ Jxy
    tau_raw = k_ns * (np.asarray(q_rest)[:3] - q[:3])
    tau = np.zeros(4)
    tau[:3] = N @ tau_raw
    return tau


class HybridController:
    """Stateful wrapper running the impedance + force-loop mix at one tick."""

    def __init__(self, gains=None, tau_max=(20.0, 15.0, 10.0, 60.0),
                 links=DEFAULT_LINKS, q_rest=DEFAULT_Q_REST, k_ns=2.0):
        self.gains = gains or ControllerGains()
        self.tau_max = np.asarray(tau_max, dtype=float)
        self.links = links
        self.q_rest = np.asarray(q_rest, dtype=float)
        self.k_ns = k_ns
        self.force_state = ForceLoopState()

    def reset(self):
        self.force_state = ForceLoopState()

    def torques(self, q, qdot, setpoint, F_meas_z, dt):
        """Joint efforts for one control tick against the current state."""
        X = forward_kinematics(q, self.links)
        Xdot = jacobian(q, self.links) @ np.asarray(qdot, dtype=float)
        F = impedance_wrench(setpoint, X, Xdot, self.gains, position_axes=(0, 1))
        in_contact = F_meas_z > 0.0 or q[3] < 0.0
        press = force_axis_control(
            F_meas_z, setpoint.F_des, self.gains, dt, self.force_state, in_contact
        )
        F[2] = -press  # push down along the contact axis
        tau_ns = nullspace_torque(q, self.q_rest, self.k_ns, self.links)
        return map_to_torques(q, F, tau_ns, self.tau_max, self.links)
