"""Cost evaluation glue: a control problem bundles plant, architecture, cost
and noise model, and exposes empirical/true-cost evaluators in three flavors:

* per-theta batched rollouts (plain numpy, used everywhere by default),
* the same computation on the autodiff tape (training),
* theta-batched vectorized paths (einsum over parameter vectors) for the
  partition-function estimates that need 1e5..1e6 prior samples.

The vectorized paths are an optimization only; a consistency test pins them
to the reference rollout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import controllers as ctrl
from . import cost as cost_mod
from . import sim


@dataclass
class ControlProblem:
    plant: sim.Plant
    cost_spec: cost_mod.CostSpec
    arch: ctrl.Arch
    horizon: int
    noise: sim.NoiseSpec
    c: float = 1.0
    gamma: float | None = None
    gains: ctrl.RenGainBudget = field(default_factory=lambda: ctrl.DEFAULT_GAINS)

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("cost bound C must be positive")
        if self.gamma is None:
            self.gamma = cost_mod.default_gamma(self.plant, self.cost_spec,
                                                self.horizon)

    # ------------------------------------------------------------------
    # reference (per-theta) paths
    # ------------------------------------------------------------------
    def _check_dataset(self, dataset: sim.NoiseDataset) -> None:
        if dataset.horizon != self.horizon or dataset.state_dim != self.plant.state_dim:
            raise ValueError("dataset does not match the problem dimensions")

    def params(self, theta) -> ctrl.ControllerParams:
        return ctrl.ControllerParams(theta, self.arch)

    def raw_costs(self, theta, dataset: sim.NoiseDataset) -> np.ndarray:
        """Per-sequence raw finite-horizon costs, shape (S,)."""
        self._check_dataset(dataset)
        policy = ctrl.make_policy(self.params(theta), self.plant, self.gains)
        states, inputs = sim.rollout_batch(self.plant, policy, dataset.sequences)
        raw = cost_mod.fh_cost_arrays(self.cost_spec, states, inputs)
        return np.asarray(ad.value_of(raw))

    def transformed_costs(self, theta, dataset: sim.NoiseDataset) -> np.ndarray:
        raw = self.raw_costs(theta, dataset)
        return np.asarray(cost_mod.transform_cost(raw, self.c, self.gamma))

    def empirical(self, theta, dataset: sim.NoiseDataset) -> float:
        """Empirical cost: mean transformed cost over the dataset."""
        return float(np.mean(self.transformed_costs(theta, dataset)))

    def empirical_taped(self, theta_var: ad.Var, dataset: sim.NoiseDataset):
        """Same quantity as ``empirical`` but differentiable in theta."""
        self._check_dataset(dataset)
        policy = ctrl.make_policy(self.params(theta_var), self.plant, self.gains)
        states, inputs = sim.rollout_batch(self.plant, policy, dataset.sequences,
                                           check_finite=False)
        raw = cost_mod.fh_cost_arrays(self.cost_spec, states, inputs)
        return ad.mean(cost_mod.transform_cost(raw, self.c, self.gamma))

    def empirical_and_grad(self, theta: np.ndarray,
                           dataset: sim.NoiseDataset) -> tuple[float, np.ndarray]:
        return ad.gradient(lambda th: self.empirical_taped(th, dataset), theta)

    def true_cost_mc(self, theta, n_test: int, seed: int) -> tuple[float, float]:
        """Monte-Carlo estimate of the transformed true cost with its
        standard error, over fresh noise draws."""
        if n_test < 1:
            raise ValueError("n_test must be >= 1")
        rng = np.random.default_rng(seed)
        noise = self.noise.sample(n_test, self.horizon, self.plant.state_dim, rng)
        dataset = sim.NoiseDataset(noise, self.horizon, self.plant.state_dim)
        costs = self.transformed_costs(theta, dataset)
        stderr = float(np.std(costs, ddof=1) / np.sqrt(n_test)) if n_test > 1 else 0.0
        return float(np.mean(costs)), stderr

    def trajectories(self, theta, dataset: sim.NoiseDataset) -> list[sim.Trajectory]:
        self._check_dataset(dataset)
        policy = ctrl.make_policy(self.params(theta), self.plant, self.gains)
        out = []
        for s in range(dataset.size):
            out.append(sim.rollout(self.plant, policy, dataset.sequences[s]))
        return out

    # ------------------------------------------------------------------
    # theta-batched fast path
    # ------------------------------------------------------------------
    def batch_empirical(self, thetas: np.ndarray, dataset: sim.NoiseDataset,
                        chunk: int = 8192) -> np.ndarray:
        """Empirical cost for a (B, n_params) stack of parameter vectors."""
        self._check_dataset(dataset)
        thetas = np.asarray(thetas, dtype=float)
        if thetas.ndim != 2:
            raise ValueError("thetas must be (B, n_params)")
        out = np.empty(thetas.shape[0])
        for lo in range(0, thetas.shape[0], chunk):
            hi = min(lo + chunk, thetas.shape[0])
            out[lo:hi] = self._batch_chunk(thetas[lo:hi], dataset)
        return out

    def _batch_chunk(self, thetas: np.ndarray,
                     dataset: sim.NoiseDataset) -> np.ndarray:
        if isinstance(self.arch, ctrl.Affine):
            raw = _lti_batch_raw(self.plant, self.cost_spec, thetas,
                                 dataset.sequences)
        else:
            raw = _ren_batch_raw(self.plant, self.cost_spec, self.arch,
                                 self.gains, thetas, dataset.sequences)
        transformed = self.c * np.tanh(raw / self.gamma)
        return transformed.mean(axis=1)


def _lti_batch_raw(plant: sim.ScalarLTI, spec: cost_mod.LtiQuadratic,
                   thetas: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Raw costs (B, S) for affine controllers on the scalar plant."""
    k = thetas[:, 0:1]
    beta = thetas[:, 1:2]
    w = noise[:, :, 0]  # (S, T+1)
    x = plant.xbar + w[None, :, 0]  # (B, S) broadcast over controllers
    x = np.broadcast_to(x, (thetas.shape[0], w.shape[0])).copy()
    raw = np.zeros_like(x)
    horizon = w.shape[1] - 1
    for t in range(horizon + 1):
        u = -(k * x + beta)
        raw += spec.q * x * x + spec.r * u * u
        if t < horizon:
            x = plant.a * x + plant.b * u + w[None, :, t + 1]
    return raw


def _batch_spectral_scale(blocks: np.ndarray, budget: float,
                          n_iter: int) -> np.ndarray:
    """Exact spectral rescaling of (B, r, c) blocks (value-only path)."""
    sigma = np.linalg.svd(blocks, compute_uv=False)[:, 0]
    scale = budget / np.maximum(sigma, budget)
    return blocks * scale[:, None, None]


def ren_blocks_batch(arch: ctrl.ImcRen, gains: ctrl.RenGainBudget,
                     thetas: np.ndarray) -> dict[str, np.ndarray]:
    """Vectorized ``controllers.ren_blocks`` over a (B, n_params) stack."""
    n, q, m, p = arch.xi_dim, arch.zeta_dim, arch.input_dim, arch.output_dim
    b = thetas.shape[0]
    sizes = [(2 * n + q) ** 2, n * n, n * m, p * n, q * m, p * q, p * m]
    shapes = [(2 * n + q, 2 * n + q), (n, n), (n, m), (p, n), (q, m), (p, q), (p, m)]
    offs = np.cumsum([0] + sizes)
    parts = [thetas[:, offs[i]:offs[i + 1]].reshape((b,) + shapes[i])
             for i in range(7)]
    x_blk, y1, b2, c2, d12, d21, d22 = parts
    s1, s2 = slice(0, n), slice(n, n + q)
    s3 = slice(n + q, 2 * n + q)
    a_raw = (x_blk[:, s1, s1] + x_blk[:, s1, s3] + x_blk[:, s3, s1]
             + x_blk[:, s3, s3] + y1)
    b1_raw = x_blk[:, s1, s2] + x_blk[:, s3, s2]
    c1_raw = x_blk[:, s2, s1] + x_blk[:, s2, s3]
    d11_raw = x_blk[:, s2, s2] * np.tril(np.ones((q, q)), k=-1)
    it = gains.power_iterations
    fro = np.sqrt(np.sum(d11_raw ** 2, axis=(1, 2))) + 1.0e-30
    d11 = d11_raw * (gains.coupling / np.maximum(fro, gains.coupling))[:, None, None]
    return {
        "A": _batch_spectral_scale(a_raw, gains.state, it),
        "B1": _batch_spectral_scale(b1_raw, gains.state_feedback, it),
        "B2": _batch_spectral_scale(b2, gains.disturbance, it),
        "C1": _batch_spectral_scale(c1_raw, gains.loop_input, it),
        "D11": d11,
        "D12": _batch_spectral_scale(d12, gains.disturbance, it),
        "C2": _batch_spectral_scale(c2, gains.output, it),
        "D21": _batch_spectral_scale(d21, gains.output, it),
        "D22": _batch_spectral_scale(d22, gains.feedthrough, it),
    }


def _ren_batch_raw(plant: sim.PlanarRobots, spec: cost_mod.RobotNav,
                   arch: ctrl.ImcRen, gains: ctrl.RenGainBudget,
                   thetas: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Raw costs (B, S) for IMC-REN controllers, vectorized over theta."""
    blk = ren_blocks_batch(arch, gains, thetas)
    b = thetas.shape[0]
    s, tp1, nx = noise.shape
    horizon = tp1 - 1
    q = arch.zeta_dim

    def apply(name, vec):  # (B, r, c) x (B, S, c) -> (B, S, r)
        return np.einsum("brc,bsc->bsr", blk[name], vec)

    x = np.broadcast_to(plant.nominal_state() + noise[:, 0, :], (b, s, nx)).copy()
    xi = np.zeros((b, s, arch.xi_dim))
    raw = np.zeros((b, s))
    f_prev = None
    for t in range(horizon + 1):
        w_hat = (x - plant.nominal_state()) if t == 0 else (x - f_prev)
        base = apply("C1", xi) + apply("D12", w_hat)
        h = np.tanh(base)
        for _ in range(max(q - 1, 0)):
            h = np.tanh(base + apply("D11", h))
        u = apply("C2", xi) + apply("D21", h) + apply("D22", w_hat)
        xi = apply("A", xi) + apply("B1", h) + apply("B2", w_hat)
        raw += _robot_stage_np(spec, x, u)
        if t < horizon:
            f_prev = np.asarray(sim.plant_dynamics(plant, x, u))
            x = f_prev + noise[:, t + 1, :]
    return raw


def _robot_stage_np(spec: cost_mod.RobotNav, x: np.ndarray,
                    u: np.ndarray) -> np.ndarray:
    dx = x - spec.target_state
    out = np.sum(spec.q_diag * dx * dx, axis=-1) + np.sum(spec.r_diag * u * u,
                                                          axis=-1)
    d = np.sqrt(np.sum((x[..., 0:2] - x[..., 2:4]) ** 2, axis=-1) + 1.0e-12)
    out += np.where(d <= spec.safe_distance,
                    (np.maximum(d, 0.0) + spec.barrier_offset) ** -2.0, 0.0)
    for (center, radius) in spec.obstacles:
        for sl in (slice(0, 2), slice(2, 4)):
            dist = np.sqrt(np.sum((x[..., sl] - np.asarray(center)) ** 2,
                                  axis=-1) + 1.0e-12) - radius
            out += np.where(dist <= spec.safe_distance,
                            (np.maximum(dist, 0.0) + spec.barrier_offset) ** -2.0,
                            0.0)
    return out
