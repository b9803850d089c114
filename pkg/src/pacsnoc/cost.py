"""Finite-horizon costs, the bounded tanh transform, and the default scale.

The raw cost is unbounded; ``transform_cost`` squashes it into [0, C) with
C * tanh(raw / gamma).  The default gamma is the raw cost of the noise-free
rollout with zero external input (the pre-stabilized open loop), which keeps
well-behaved closed loops inside the near-linear region of the transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import sim


@dataclass(frozen=True)
class LtiQuadratic:
    """sum_t q x_t^2 + r u_t^2."""

    q: float = 5.0
    r: float = 0.003

    def __post_init__(self):
        if self.q <= 0 or self.r <= 0:
            raise ValueError("quadratic weights must be positive")


@dataclass(frozen=True)
class RobotNav:
    """Quadratic tracking plus collision/obstacle barriers.

    stage = dx^T Q dx + u^T R u + l_ca(d) + l_oa(x) with
    l_ca(d) = (d + nu)^-2 when d <= D (else 0) for the inter-robot distance d,
    and the same inverse-square barrier on the surface distance to each
    obstacle.  Q and R are diagonal (stored as vectors).
    """

    q_diag: np.ndarray
    r_diag: np.ndarray
    safe_distance: float
    barrier_offset: float
    obstacles: tuple
    target_state: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.q_diag) < 0) or np.any(np.asarray(self.r_diag) < 0):
            raise ValueError("Q and R diagonals must be nonnegative")
        if self.safe_distance <= 0 or self.barrier_offset <= 0:
            raise ValueError("barrier geometry must be positive")


CostSpec = LtiQuadratic | RobotNav


def robot_cost_for(plant: sim.PlanarRobots, q_scale: float = 1.0,
                   r_scale: float = 0.01) -> RobotNav:
    """RobotNav spec sharing the plant's geometry; Q = q_scale I, R = r_scale I."""
    return RobotNav(
        q_diag=np.full(plant.state_dim, q_scale),
        r_diag=np.full(plant.input_dim, r_scale),
        safe_distance=plant.safe_distance,
        barrier_offset=plant.barrier_offset,
        obstacles=plant.obstacles,
        target_state=plant.target_state(),
    )


def _pair_distance(x):
    """Inter-robot distance from a (batch, 8) robot state."""
    diff = x[..., 0:2] - x[..., 2:4]
    return ad.sqrt(ad.sum_(ad.pow2(diff), axis=-1) + 1.0e-12)


def _barrier(dist, active_within: float, nu: float):
    value = 1.0 / ad.pow2(ad.maximum(dist, 0.0) + nu)
    return ad.where(ad.value_of(dist) <= active_within, value, 0.0)


def _obstacle_grid(spec: "RobotNav"):
    """Constant (n_obstacles, 2) centers and (n_obstacles,) radii."""
    centers = np.asarray([c for (c, _) in spec.obstacles], dtype=float)
    radii = np.asarray([r for (_, r) in spec.obstacles], dtype=float)
    return centers, radii


def stage_cost(spec: CostSpec, x, u):
    """Per-time-step cost; batched over the leading axes."""
    if isinstance(spec, LtiQuadratic):
        return ad.sum_(spec.q * ad.pow2(x) + spec.r * ad.pow2(u), axis=-1)
    dx = x - spec.target_state
    quad = ad.sum_(spec.q_diag * ad.pow2(dx), axis=-1)
    quad = quad + ad.sum_(spec.r_diag * ad.pow2(u), axis=-1)
    total = quad + _barrier(_pair_distance(x), spec.safe_distance,
                            spec.barrier_offset)
    if spec.obstacles:
        # all robot/obstacle pairs in one broadcast chain
        centers, radii = _obstacle_grid(spec)
        batch = ad.value_of(x).shape[:-1]
        pos = ad.reshape(x[..., :4], batch + (2, 1, 2))
        diff = pos - centers[None, :, :]
        surf = ad.sqrt(ad.sum_(ad.pow2(diff), axis=-1) + 1.0e-12) - radii[None, :]
        barriers = _barrier(surf, spec.safe_distance, spec.barrier_offset)
        total = total + ad.sum_(ad.reshape(barriers, batch + (-1,)), axis=-1)
    return total


def fh_cost_arrays(spec: CostSpec, states, inputs):
    """Total cost from rollout state/input lists (entries (batch, dim))."""
    total = stage_cost(spec, states[0], inputs[0])
    for x, u in zip(states[1:], inputs[1:]):
        total = total + stage_cost(spec, x, u)
    return total


def fh_cost(spec: CostSpec, trajectory: sim.Trajectory) -> float:
    """Raw finite-horizon cost of a single trajectory."""
    states = np.asarray(trajectory.states)
    inputs = np.asarray(trajectory.inputs)
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(inputs))):
        raise ValueError("trajectory contains non-finite entries")
    total = fh_cost_arrays(spec, list(states[:, None, :]), list(inputs[:, None, :]))
    return float(np.asarray(ad.value_of(total))[0])


def transform_cost(raw, c: float, gamma: float):
    """C * tanh(raw / gamma): strictly increasing, bounded in [0, C)."""
    if c <= 0 or gamma <= 0:
        raise ValueError("C and gamma must be positive")
    return c * ad.tanh(raw * (1.0 / gamma))


def default_gamma(plant: sim.Plant, spec: CostSpec, horizon: int) -> float:
    """Raw cost of the zero-noise, zero-input rollout; 1.0 if that is zero."""
    noise = np.zeros((horizon + 1, plant.state_dim))
    zero = _ZeroPolicy(plant.input_dim)
    traj = sim.rollout(plant, zero, noise)
    gamma = fh_cost(spec, traj)
    return gamma if gamma > 0.0 else 1.0


class _ZeroPolicy:
    def __init__(self, input_dim: int):
        self.input_dim = input_dim

    def act(self, t, states, inputs):
        batch = ad.value_of(states[0]).shape[0]
        return np.zeros((batch, self.input_dim))


def robot_collisions(trajectory: sim.Trajectory, plant: sim.PlanarRobots,
                     collision_distance: float | None = None) -> bool:
    """True if the robots ever come within ``collision_distance`` of each
    other or penetrate an obstacle disc.  Default threshold: half the safe
    distance (the barrier's activation radius marks risk, not contact)."""
    if collision_distance is None:
        collision_distance = 0.5 * plant.safe_distance
    states = np.asarray(trajectory.states)
    d = np.linalg.norm(states[:, 0:2] - states[:, 2:4], axis=-1)
    if np.any(d < collision_distance):
        return True
    for (center, radius) in plant.obstacles:
        for sl in (slice(0, 2), slice(2, 4)):
            dist = np.linalg.norm(states[:, sl] - np.asarray(center), axis=-1)
            if np.any(dist < radius):
                return True
    return False
