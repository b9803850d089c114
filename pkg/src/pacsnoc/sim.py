"""Plants, noise datasets, and the closed-loop rollout map.

Two plants are provided: a scalar pre-stabilized LTI system and a pair of
planar point-mass robots with nonlinear drag, each pre-stabilized by a
proportional controller pulling it toward its target.  A rollout feeds a
noise sequence through the closed loop and returns the state/input
trajectories; the dynamics are written against the autodiff dispatch layer so
the same code path serves plain simulation and gradient-based training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class RolloutBlowup(RuntimeError):
    """Raised when a rollout produces a non-finite state."""


@dataclass(frozen=True)
class ScalarLTI:
    a: float = 0.8
    b: float = 0.1
    xbar: float = 2.0

    state_dim: int = 1
    input_dim: int = 1

    def __post_init__(self):
        if abs(self.a) >= 1.0:
            raise ValueError("scalar plant must be pre-stabilized: |a| < 1")

    def nominal_state(self) -> np.ndarray:
        return np.array([self.xbar])


@dataclass(frozen=True)
class PlanarRobots:
    """Two point-mass double integrators with drag, prestabilized toward
    their targets by a proportional force.

    State layout: [p1(2), p2(2), v1(2), v2(2)], inputs [f1(2), f2(2)].
    Obstacle list entries are ((cx, cy), radius).  The geometry defaults form
    a narrow valley between two discs that both nominal paths cross.
    """

    mass: float = 1.0
    drag_linear: float = 1.0
    drag_quadratic: float = 0.1
    prestab_gain: float = 1.0
    dt: float = 0.05
    spawns: tuple = ((-2.0, -2.0), (2.0, -2.0))
    targets: tuple = ((2.0, 2.0), (-2.0, 2.0))
    obstacles: tuple = (((-1.2, 0.0), 0.45), ((1.2, 0.0), 0.45))
    safe_distance: float = 0.3
    barrier_offset: float = 0.02

    state_dim: int = 8
    input_dim: int = 4

    def __post_init__(self):
        if self.mass <= 0 or self.dt <= 0:
            raise ValueError("mass and dt must be positive")
        if self.safe_distance <= 0 or self.barrier_offset <= 0:
            raise ValueError("safe distance and barrier offset must be positive")

    def nominal_state(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.spawns), np.zeros(4)])

    def target_state(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.targets), np.zeros(4)])


Plant = ScalarLTI | PlanarRobots


@dataclass(frozen=True)
class Trajectory:
    """Paired state/input sequences of equal length T+1."""

    states: np.ndarray  # (T+1, Nx)
    inputs: np.ndarray  # (T+1, Nu)

    def __post_init__(self):
        if len(self.states) != len(self.inputs):
            raise ValueError("state and input sequences must have equal length")

    @property
    def horizon(self) -> int:
        return len(self.states) - 1


@dataclass(frozen=True)
class NoiseDataset:
    """S sampled noise sequences of length T+1; index 0 carries the
    initial-state uncertainty."""

    sequences: np.ndarray  # (S, T+1, Nx)
    horizon: int
    state_dim: int

    def __post_init__(self):
        seq = np.asarray(self.sequences)
        if seq.ndim != 3 or seq.shape[0] < 1:
            raise ValueError("sequences must be a nonempty (S, T+1, Nx) array")
        if seq.shape[1] != self.horizon + 1 or seq.shape[2] != self.state_dim:
            raise ValueError("sequence shape inconsistent with horizon/state_dim")
        if not np.all(np.isfinite(seq)):
            raise ValueError("noise sequences must be finite")

    @property
    def size(self) -> int:
        return self.sequences.shape[0]

    def subset(self, indices) -> "NoiseDataset":
        return NoiseDataset(self.sequences[np.asarray(indices)],
                            self.horizon, self.state_dim)

    def to_json(self) -> str:
        return json.dumps({
            "state_dim": self.state_dim,
            "horizon": self.horizon,
            "sequences": self.sequences.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "NoiseDataset":
        raw = json.loads(text)
        return cls(np.asarray(raw["sequences"], dtype=float),
                   int(raw["horizon"]), int(raw["state_dim"]))


@dataclass(frozen=True)
class NoiseSpec:
    """Noise distribution: per-step iid Gaussian, or Gaussian at t=0 only.

    kind = "gaussian": w_t ~ N(mean, std^2) elementwise for all t.
    kind = "initial_gaussian": w_0 ~ N(0, std^2 I), w_t = 0 for t > 0.
    """

    kind: str
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "initial_gaussian"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.std < 0 or not np.isfinite(self.std) or not np.isfinite(self.mean):
            raise ValueError("invalid noise parameters")

    def sample(self, n: int, horizon: int, state_dim: int,
               rng: np.random.Generator) -> np.ndarray:
        shape = (n, horizon + 1, state_dim)
        if self.kind == "gaussian":
            return self.mean + self.std * rng.standard_normal(shape)
        out = np.zeros(shape)
        out[:, 0, :] = self.std * rng.standard_normal((n, state_dim))
        return out


def generate_dataset(spec: NoiseSpec, s: int, horizon: int, state_dim: int,
                     seed: int) -> NoiseDataset:
    """Draw S noise sequences; reproducible for a fixed seed."""
    if s < 1 or horizon < 0:
        raise ValueError("need S >= 1 and T >= 0")
    rng = np.random.default_rng(seed)
    return NoiseDataset(spec.sample(s, horizon, state_dim, rng), horizon, state_dim)


def plant_dynamics(plant: Plant, x, u):
    """Deterministic next-state map f(x_{t-1}, u_{t-1}), no noise term.

    Works on single states (Nx,) or batches (..., Nx); ``x`` and ``u`` may be
    plain arrays or tape variables.
    """
    if isinstance(plant, ScalarLTI):
        return plant.a * x + plant.b * u
    pos = x[..., :4]
    vel = x[..., 4:]
    speed = ad.abs_smooth(vel)
    drag = -(plant.drag_linear * vel + plant.drag_quadratic * vel * speed)
    pull = plant.prestab_gain * (np.ravel(plant.targets) - pos)
    acc = (drag + pull + u) * (1.0 / plant.mass)
    new_pos = pos + plant.dt * vel
    new_vel = vel + plant.dt * acc
    return ad.concat([new_pos, new_vel], axis=-1)


def step(plant: Plant, state_history, input_history, noise_t):
    """One closed-loop-free step: f applied to the latest state/input, plus
    process noise."""
    if not state_history or not input_history:
        raise ValueError("histories must be nonempty")
    x, u = state_history[-1], input_history[-1]
    if ad.value_of(x).shape[-1] != plant.state_dim:
        raise ValueError("state dimension mismatch")
    if ad.value_of(u).shape[-1] != plant.input_dim:
        raise ValueError("input dimension mismatch")
    return plant_dynamics(plant, x, u) + noise_t


def rollout_batch(plant: Plant, policy, noise, check_finite: bool = True):
    """Simulate the closed loop for a batch of noise sequences.

    ``noise`` has shape (S, T+1, Nx) (a plain array, never on tape); the
    returned state/input lists each hold T+1 entries of shape (S, Nx)/(S, Nu).
    ``policy`` is a stateful controller created by ``controllers.make_policy``.
    """
    noise_vals = np.asarray(ad.value_of(noise), dtype=float)
    s = noise_vals.shape[0]
    x = plant.nominal_state()[None, :] + noise_vals[:, 0, :]
    states, inputs = [x], []
    horizon = noise_vals.shape[1] - 1
    for t in range(horizon + 1):
        u = policy.act(t, states, inputs)
        inputs.append(u)
        if t == horizon:
            break
        x = step(plant, states, inputs, noise_vals[:, t + 1, :])
        if check_finite and not np.all(np.isfinite(ad.value_of(x))):
            raise RolloutBlowup(f"non-finite state at t={t + 1}")
        states.append(x)
    return states, inputs


def rollout(plant: Plant, policy, noise_sequence: np.ndarray) -> Trajectory:
    """Rollout map for a single noise sequence; deterministic given inputs."""
    noise = np.asarray(noise_sequence, dtype=float)
    if noise.ndim != 2 or noise.shape[1] != plant.state_dim:
        raise ValueError("noise sequence must have shape (T+1, Nx)")
    states, inputs = rollout_batch(plant, policy, noise[None])
    return Trajectory(
        states=np.stack([ad.value_of(x)[0] for x in states]),
        inputs=np.stack([ad.value_of(u)[0] for u in inputs]),
    )
