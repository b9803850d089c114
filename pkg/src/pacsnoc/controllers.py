"""Stabilizing controller families.

Two architectures:

* ``Affine`` state feedback u = -(k x + beta) for the scalar plant, with the
  gain projected into the open stability interval (-2, 18).
* ``ImcRen``: internal-model control around a recurrent equilibrium network.
  The plant model reconstructs the disturbance w_hat from observed states and
  a gain-bounded recurrent network maps w_hat to the input.  Every parameter
  vector yields an l2-stable emission map, hence a stable closed loop.

REN parameter layout (flat theta, row-major blocks, n=xi_dim, q=zeta_dim,
m=plant state dim, p=plant input dim):

    X    (2n+q, 2n+q)   pooled into the recurrent core blocks
    Y1   (n, n)         pooled into the state block
    B2   (n, m)         disturbance -> state
    C2   (p, n)         state -> output
    D12  (q, m)         disturbance -> implicit layer
    D21  (p, q)         implicit layer -> output
    D22  (p, m)         disturbance feedthrough

Total n_params = (2n+q)^2 + n^2 + nm + pn + qm + pq + pm; e.g. 864 for
(n, q) = (8, 8) on the planar-robot dimensions and 120 for (2, 2).

The recurrence is

    zeta_t  = C1 xi_t + D11 h_t + D12 w_hat_t      (D11 strictly lower tri.)
    h_t     = tanh(zeta_t)
    xi_t+1  = A xi_t + B1 h_t + B2 w_hat_t
    u_t     = C2 xi_t + D21 h_t + D22 w_hat_t

The strictly lower-triangular coupling makes zeta_t solvable by forward
substitution (a nilpotent fixed-point iteration resolves it exactly in q
steps).  Each derived block is rescaled to a configured spectral-norm budget
via on-tape power iteration (Frobenius norm for D11, since the triangular
resolve bounds use the entrywise-absolute matrix).  The budgets keep the
autonomous state update a contraction uniformly in theta:

    ||A|| + ||B1|| ||C1|| ||(I - |D11|)^-1|| < 1,

so the disturbance-to-input map has finite l2 gain for every parameter
vector; see ``RenGainBudget`` for the default numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import sim

GAIN_LO = -2.0
GAIN_HI = 18.0
PROJECTION_EPS = 1.0e-6


@dataclass(frozen=True)
class Affine:
    kind: str = "affine"

    def n_params(self) -> int:
        return 2


@dataclass(frozen=True)
class ImcRen:
    xi_dim: int
    zeta_dim: int
    input_dim: int   # plant state dimension (disturbance size)
    output_dim: int  # plant input dimension
    kind: str = "imc_ren"

    def n_params(self) -> int:
        n, q, m, p = self.xi_dim, self.zeta_dim, self.input_dim, self.output_dim
        return (2 * n + q) ** 2 + n * n + n * m + p * n + q * m + p * q + p * m


Arch = Affine | ImcRen


@dataclass(frozen=True)
class ControllerParams:
    theta: np.ndarray
    arch: Arch

    def __post_init__(self):
        theta = np.asarray(ad.value_of(self.theta))
        if theta.ndim != 1 or theta.size != self.arch.n_params():
            raise ValueError(
                f"theta has {theta.size} entries, architecture needs "
                f"{self.arch.n_params()}"
            )

    def to_json(self) -> str:
        arch = self.arch
        if isinstance(arch, Affine):
            desc = {"kind": "affine"}
        else:
            desc = {"kind": "imc_ren", "xi_dim": arch.xi_dim,
                    "zeta_dim": arch.zeta_dim, "input_dim": arch.input_dim,
                    "output_dim": arch.output_dim}
        return json.dumps({"arch": desc,
                           "theta": np.asarray(ad.value_of(self.theta)).tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ControllerParams":
        raw = json.loads(text)
        desc = raw["arch"]
        if desc["kind"] == "affine":
            arch: Arch = Affine()
        else:
            arch = ImcRen(desc["xi_dim"], desc["zeta_dim"],
                          desc["input_dim"], desc["output_dim"])
        return cls(np.asarray(raw["theta"], dtype=float), arch)


def project_gain(k: float, lo: float = GAIN_LO, hi: float = GAIN_HI,
                 eps: float = PROJECTION_EPS) -> float:
    """Clamp the affine gain into the open stability interval; idempotent."""
    return float(min(max(k, lo + eps), hi - eps))


def affine_act(params: ControllerParams, x):
    """u = -(k x + beta)."""
    if not isinstance(params.arch, Affine):
        raise ValueError("affine_act requires the affine architecture")
    k, beta = params.theta[0], params.theta[1]
    return -(k * x + beta)


@dataclass(frozen=True)
class RenGainBudget:
    """Per-block spectral-norm budgets.

    Only the recurrent loop blocks (A, B1, C1, D11) decide stability; their
    budgets must satisfy state + state_feedback * loop_input / (1 - coupling)
    < 1, which makes the autonomous state update a contraction uniformly in
    theta.  The disturbance/output budgets only scale the (finite) gain
    constant, so they are sized for control authority: the state budget sets
    how long the network remembers the initial-condition kick, the output
    budget how hard it can push the plant.
    """

    state: float = 0.98          # A
    state_feedback: float = 0.3   # B1: carries the squashed layer into memory
    loop_input: float = 0.03      # C1
    coupling: float = 0.4         # D11, Frobenius norm
    disturbance: float = 8.0      # B2, D12
    output: float = 30.0          # C2, D21
    feedthrough: float = 10.0     # D22
    power_iterations: int = 30

    def __post_init__(self):
        margin = self.state + self.state_feedback * self.loop_input \
            / (1.0 - self.coupling)
        if not margin < 1.0:
            raise ValueError(f"loop budgets give contraction margin {margin}")


DEFAULT_GAINS = RenGainBudget()


def _spectral_scale(block, budget: float, n_iter: int):
    """block * budget / max(sigma_max, budget), sigma_max by power iteration.

    The iteration is warm-started at the exact top right-singular vector of
    the current value (computed off the tape): a cold start can stall on
    near-degenerate spectra and under-normalize, which would break the
    stability guarantee.  The on-tape iterations keep the gradient flowing
    through the normalization.
    """
    vals = np.asarray(ad.value_of(block))
    try:
        v = np.linalg.svd(vals)[2][0]
    except np.linalg.LinAlgError:
        v = np.full(vals.shape[1], 1.0 / np.sqrt(vals.shape[1]))
    block_t = ad.transpose(block)
    for _ in range(n_iter):
        w = ad.matmul(block_t, ad.matmul(block, v))
        v = w / ad.sqrt(ad.sum_(ad.pow2(w)) + 1.0e-30)
    sigma = ad.sqrt(ad.sum_(ad.pow2(ad.matmul(block, v))) + 1.0e-30)
    return block * (budget / ad.maximum(sigma, budget))


def _frobenius_scale(block, budget: float):
    norm = ad.sqrt(ad.sum_(ad.pow2(block)) + 1.0e-30)
    return block * (budget / ad.maximum(norm, budget))


def ren_blocks(params: ControllerParams, gains: RenGainBudget = DEFAULT_GAINS):
    """Derive the normalized REN blocks from a flat theta (plain or on tape)."""
    arch = params.arch
    if not isinstance(arch, ImcRen):
        raise ValueError("ren_blocks requires the imc_ren architecture")
    n, q, m, p = arch.xi_dim, arch.zeta_dim, arch.input_dim, arch.output_dim
    th = params.theta
    sizes = [(2 * n + q) ** 2, n * n, n * m, p * n, q * m, p * q, p * m]
    shapes = [(2 * n + q, 2 * n + q), (n, n), (n, m), (p, n), (q, m), (p, q), (p, m)]
    offs = np.cumsum([0] + sizes)
    X, Y1, B2r, C2r, D12r, D21r, D22r = (
        ad.reshape(th[offs[i]:offs[i + 1]], shapes[i]) for i in range(7)
    )
    # Pool the (2n+q)-square block into the recurrent core; the strictly
    # upper part of the coupling block is masked out (kept in theta so the
    # count formula stays regular).
    s1, s2 = slice(0, n), slice(n, n + q)
    s3 = slice(n + q, 2 * n + q)
    A_raw = X[s1, s1] + X[s1, s3] + X[s3, s1] + X[s3, s3] + Y1
    B1_raw = X[s1, s2] + X[s3, s2]
    C1_raw = X[s2, s1] + X[s2, s3]
    lower = np.tril(np.ones((q, q)), k=-1)
    D11_raw = X[s2, s2] * lower
    it = gains.power_iterations
    return {
        "A": _spectral_scale(A_raw, gains.state, it),
        "B1": _spectral_scale(B1_raw, gains.state_feedback, it),
        "B2": _spectral_scale(B2r, gains.disturbance, it),
        "C1": _spectral_scale(C1_raw, gains.loop_input, it),
        "D11": _frobenius_scale(D11_raw, gains.coupling),
        "D12": _spectral_scale(D12r, gains.disturbance, it),
        "C2": _spectral_scale(C2r, gains.output, it),
        "D21": _spectral_scale(D21r, gains.output, it),
        "D22": _spectral_scale(D22r, gains.feedthrough, it),
    }


class RenState:
    """Per-rollout REN state: internal state xi (starts at zero), the cached
    transposed blocks, and the reconstructed-disturbance history."""

    def __init__(self, params: ControllerParams,
                 gains: RenGainBudget = DEFAULT_GAINS, batch: int = 1):
        blocks = ren_blocks(params, gains)
        # cache transposed once: the recurrence applies blocks to row batches
        self.blocks_t = {name: ad.transpose(b) for name, b in blocks.items()}
        self.zeta_dim = params.arch.zeta_dim
        self.xi = np.zeros((batch, params.arch.xi_dim))
        self.w_hat_history: list = []


def ren_forward(params: ControllerParams, state: RenState, w_hat):
    """One REN step: returns (u_t, updated state).

    zeta is resolved exactly by iterating the nilpotent coupling q times.
    """
    bt = state.blocks_t
    xi = state.xi
    q = state.zeta_dim
    base = ad.matmul(xi, bt["C1"]) + ad.matmul(w_hat, bt["D12"])
    h = ad.tanh(base)
    for _ in range(max(q - 1, 0)):
        h = ad.tanh(base + ad.matmul(h, bt["D11"]))
    u = (ad.matmul(xi, bt["C2"]) + ad.matmul(h, bt["D21"])
         + ad.matmul(w_hat, bt["D22"]))
    state.xi = (ad.matmul(xi, bt["A"]) + ad.matmul(h, bt["B1"])
                + ad.matmul(w_hat, bt["B2"]))
    state.w_hat_history.append(w_hat)
    return u, state


def reconstruct_disturbance(plant: sim.Plant, x_t, state_history, input_history):
    """w_hat_t = x_t - f(x_{t-1}, u_{t-1}); at t=0, x_0 - xbar (exact model)."""
    if not state_history:
        return x_t - plant.nominal_state()[None, :]
    predicted = sim.plant_dynamics(plant, state_history[-1], input_history[-1])
    return x_t - predicted


def imc_act(params: ControllerParams, plant: sim.Plant, x_t,
            state_history, input_history, ren_state: RenState):
    """Reconstruct the disturbance and emit the REN output."""
    w_hat = reconstruct_disturbance(plant, x_t, state_history, input_history)
    return ren_forward(params, ren_state, w_hat)


class AffinePolicy:
    """Memoryless policy wrapper for the rollout map."""

    def __init__(self, params: ControllerParams):
        self.params = params

    def act(self, t, states, inputs):
        return affine_act(self.params, states[-1])


class ImcRenPolicy:
    """Stateful IMC policy; internal state is reset whenever t == 0."""

    def __init__(self, params: ControllerParams, plant: sim.Plant,
                 gains: RenGainBudget = DEFAULT_GAINS):
        self.params = params
        self.plant = plant
        self.gains = gains
        self._state: RenState | None = None

    def act(self, t, states, inputs):
        if t == 0:
            batch = ad.value_of(states[0]).shape[0]
            self._state = RenState(self.params, self.gains, batch=batch)
        u, self._state = imc_act(self.params, self.plant, states[-1],
                                 states[:-1], inputs, self._state)
        return u


def make_policy(params: ControllerParams, plant: sim.Plant,
                gains: RenGainBudget = DEFAULT_GAINS):
    if isinstance(params.arch, Affine):
        return AffinePolicy(params)
    return ImcRenPolicy(params, plant, gains)
