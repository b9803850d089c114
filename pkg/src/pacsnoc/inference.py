"""Posterior approximations: exact 2-D grid, SVGD particles, planar flows.

The grid discretization is exact for the scalar problem (two parameters) and
doubles as the reference implementation the sampling-based approximators are
tested against.  SVGD moves a particle set along kernelized gradients of the
unnormalized log posterior; planar flows reshape a diagonal Gaussian through
invertible one-layer maps with a closed-form log-Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import pacbayes as pb
from . import sim


class FlowDivergence(RuntimeError):
    """Flow training objective blew up past the abort threshold."""


class SvgdAbort(RuntimeError):
    """A particle produced a non-finite gradient."""


# ----------------------------------------------------------------------
# grid posterior (exact, 2-D)
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class GridPosterior:
    """Gibbs distribution restricted to a rectangular (k, beta) grid."""

    k_axis: np.ndarray        # (nk,) cell centers
    beta_axis: np.ndarray     # (nb,)
    log_mass: np.ndarray      # (nk, nb), normalized: logsumexp == 0
    log_prior_mass: np.ndarray  # (nk, nb), normalized discretized prior
    cost_grid: np.ndarray     # (nk, nb) empirical costs per cell
    log_z: float              # exact grid partition ln Z_lambda
    lam: float

    def cells(self) -> np.ndarray:
        """All (k, beta) cell centers as an (nk*nb, 2) stack."""
        kk, bb = np.meshgrid(self.k_axis, self.beta_axis, indexing="ij")
        return np.stack([kk.ravel(), bb.ravel()], axis=-1)

    def masses(self) -> np.ndarray:
        return np.exp(self.log_mass)

    def mean(self) -> np.ndarray:
        """Posterior mean of (k, beta)."""
        m = self.masses()
        return np.array([np.sum(m.sum(axis=1) * self.k_axis),
                         np.sum(m.sum(axis=0) * self.beta_axis)])

    def var(self) -> np.ndarray:
        """Posterior marginal variances of (k, beta)."""
        m = self.masses()
        mean = self.mean()
        vk = np.sum(m.sum(axis=1) * (self.k_axis - mean[0]) ** 2)
        vb = np.sum(m.sum(axis=0) * (self.beta_axis - mean[1]) ** 2)
        return np.array([vk, vb])

    def log_density_ratio(self, cell_index: tuple[int, int]) -> float:
        """ln(dQ/dP) at a cell: the Theorem-1 discrepancy term."""
        i, j = cell_index
        return float(self.log_mass[i, j] - self.log_prior_mass[i, j])


def _axis_from_prior(marginal, resolution: int) -> np.ndarray:
    """Cell centers covering >= 95% of the marginal prior mass."""
    lo, hi = marginal.interval(3.0)
    edges = np.linspace(lo, hi, resolution + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def grid_posterior(prior: pb.Product2D, dataset: sim.NoiseDataset, lam: float,
                   problem, resolution: int = 120) -> GridPosterior:
    """Discretize the Gibbs posterior on a prior-covering rectangular grid.

    Also yields the exact grid partition function for the specialized
    bounds.  lam = 0 recovers the discretized prior.
    """
    if resolution < 2:
        raise ValueError("need at least 2 cells per axis")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    k_axis = _axis_from_prior(prior.k, resolution)
    beta_axis = _axis_from_prior(prior.beta, resolution)
    kk, bb = np.meshgrid(k_axis, beta_axis, indexing="ij")
    cells = np.stack([kk.ravel(), bb.ravel()], axis=-1)
    log_prior = prior.log_density_batch(cells).reshape(kk.shape)
    log_prior = log_prior - _logsumexp_grid(log_prior)
    costs = problem.batch_empirical(cells, dataset).reshape(kk.shape)
    return _normalize_grid(k_axis, beta_axis, log_prior, costs, lam)


def _normalize_grid(k_axis, beta_axis, log_prior_mass, cost_grid,
                    lam: float) -> GridPosterior:
    log_unnorm = log_prior_mass - lam * cost_grid
    log_z = _logsumexp_grid(log_unnorm)
    return GridPosterior(
        k_axis=k_axis, beta_axis=beta_axis,
        log_mass=log_unnorm - log_z,
        log_prior_mass=log_prior_mass, cost_grid=cost_grid,
        log_z=float(log_z), lam=lam,
    )


def _logsumexp_grid(x: np.ndarray) -> float:
    m = np.max(x)
    return float(m + np.log(np.sum(np.exp(x - m))))


def grid_sample(grid: GridPosterior, n: int, seed: int) -> np.ndarray:
    """Inverse-CDF sampling of cell centers, reproducible by seed; (n, 2)."""
    rng = np.random.default_rng(seed)
    masses = grid.masses().ravel()
    cdf = np.cumsum(masses)
    cdf[-1] = 1.0
    flat = np.searchsorted(cdf, rng.random(n), side="right")
    flat = np.minimum(flat, masses.size - 1)
    i, j = np.unravel_index(flat, grid.log_mass.shape)
    return np.stack([grid.k_axis[i], grid.beta_axis[j]], axis=-1)


def grid_tilt(grid: GridPosterior, dataset: sim.NoiseDataset, lam2: float,
              problem) -> GridPosterior:
    """Gibbs update using the given grid as the prior (stage-2 inference)."""
    costs = problem.batch_empirical(grid.cells(), dataset)
    costs = costs.reshape(grid.log_mass.shape)
    return _normalize_grid(grid.k_axis, grid.beta_axis, grid.log_mass,
                           costs, lam2)


def two_stage_grid(prior: pb.Product2D, dataset: sim.NoiseDataset, s1: int,
                   lam: float, problem,
                   resolution: int = 120) -> tuple[GridPosterior, GridPosterior]:
    """Two-stage inference on the grid: (Q1 used as the stage-2 prior, Q2).

    lambda is split as lam_i = (S_i/S) lam; Q2 then coincides with the
    single-stage posterior on the full dataset.
    """
    idx1, idx2 = pb.split_dataset(dataset, s1)
    if len(idx2) == 0:
        raise ValueError("stage-2 split must be nonempty")
    s = dataset.size
    lam1 = lam * len(idx1) / s
    lam2 = lam * len(idx2) / s
    if s1 == 0:
        q1 = grid_posterior(prior, dataset, 0.0, problem, resolution)
    else:
        q1 = grid_posterior(prior, dataset.subset(idx1), lam1, problem,
                            resolution)
    q2 = grid_tilt(q1, dataset.subset(idx2), lam2, problem)
    return q1, q2


# ----------------------------------------------------------------------
# SVGD
# ----------------------------------------------------------------------
@dataclass
class ParticleSet:
    particles: np.ndarray   # (k, d)
    lr: float
    bandwidth: float | None = None  # None -> median heuristic per step

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))
        if self.particles.shape[0] < 1:
            raise ValueError("need at least one particle")


def median_bandwidth(particles: np.ndarray) -> float:
    """h = med^2 / ln(k+1) with med the median pairwise distance."""
    particles = np.atleast_2d(particles)
    k = particles.shape[0]
    if k < 2:
        return 1.0
    diff = particles[:, None, :] - particles[None, :, :]
    dists = np.sqrt(np.sum(diff * diff, axis=-1))
    med = float(np.median(dists[np.triu_indices(k, k=1)]))
    return max(med * med / math.log(k + 1.0), 1.0e-8)


def svgd_step(particle_set: ParticleSet,
              grads: np.ndarray) -> tuple[np.ndarray, float]:
    """One SVGD update; returns (new particles, max displacement).

    phi_i += lr/k * sum_j [ kappa(phi_j, phi_i) grad_j + d/dphi_j kappa ]
    with the RBF kernel kappa(a, b) = exp(-||a - b||^2 / h).
    """
    phi = particle_set.particles
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    if grads.shape != phi.shape:
        raise ValueError("gradient stack must match the particle stack")
    if not np.all(np.isfinite(grads)):
        bad = np.where(~np.isfinite(grads).all(axis=1))[0]
        raise SvgdAbort(f"non-finite gradient for particles {bad.tolist()}")
    k = phi.shape[0]
    h = particle_set.bandwidth or median_bandwidth(phi)
    diff = phi[:, None, :] - phi[None, :, :]           # phi_j - phi_i at [j, i]
    sq = np.sum(diff * diff, axis=-1)
    kern = np.exp(-sq / h)                              # kappa(phi_j, phi_i)
    drive = kern.T @ grads
    repulse = (-2.0 / h) * (kern[..., None] * diff).sum(axis=0)
    update = particle_set.lr * (drive + repulse) / k
    return phi + update, float(np.max(np.abs(update)))


def svgd_run(gibbs: pb.GibbsPosterior, k: int, lr: float, epochs: int,
             seed: int, displacement_tol: float = 1.0e-6,
             validation=None, patience: int = 500,
             bandwidth: float | None = None):
    """Fit k particles to the Gibbs posterior.

    Stops when the max displacement drops below tolerance, at the epoch cap,
    or (when a validation callback is given) after ``patience`` epochs with
    no improvement of the validation score.  Returns (ParticleSet, trace).
    """
    rng = np.random.default_rng(seed)
    particles = np.atleast_2d(gibbs.prior.sample(k, rng))
    pset = ParticleSet(particles, lr, bandwidth)
    trace = []
    best_val, best_particles, since_best = np.inf, pset.particles.copy(), 0
    for epoch in range(epochs):
        grads = np.stack([gibbs.grad_log_unnorm(p) for p in pset.particles])
        pset.particles, disp = svgd_step(pset, grads)
        entry = {"epoch": epoch, "displacement": disp}
        if validation is not None:
            val = float(np.mean([validation(p) for p in pset.particles]))
            entry["validation"] = val
            if val < best_val - 1.0e-12:
                best_val, best_particles, since_best = val, pset.particles.copy(), 0
            else:
                since_best += 1
                if since_best >= patience:
                    trace.append(entry)
                    break
        trace.append(entry)
        if disp < displacement_tol:
            break
    if validation is not None:
        pset.particles = best_particles
    return pset, trace


# ----------------------------------------------------------------------
# planar normalizing flows
# ----------------------------------------------------------------------
@dataclass
class PlanarFlow:
    """Diagonal-Gaussian base plus L planar layers z -> z + u tanh(w'z + b).

    Flat parameter layout: [base_mean (d), base_log_var (d),
    layer_0 (u (d), w (d), b (1)), ..., layer_{L-1}].
    """

    dim: int
    n_layers: int
    params: np.ndarray

    def __post_init__(self):
        if np.asarray(ad.value_of(self.params)).size != self.n_params(
                self.dim, self.n_layers):
            raise ValueError("flow parameter vector has the wrong size")

    @staticmethod
    def n_params(dim: int, n_layers: int) -> int:
        return 2 * dim + n_layers * (2 * dim + 1)


def flow_init(dim: int, n_layers: int = 16, seed: int = 0,
              base_mean: np.ndarray | None = None,
              base_var: np.ndarray | None = None,
              layer_scale: float = 0.01) -> PlanarFlow:
    """Near-identity layers around the given (or standard) base Gaussian."""
    rng = np.random.default_rng(seed)
    mean = np.zeros(dim) if base_mean is None else np.asarray(base_mean, float)
    var = np.ones(dim) if base_var is None else np.asarray(base_var, float)
    if np.any(var <= 0):
        raise ValueError("base variances must be positive")
    parts = [mean, np.log(var)]
    for _ in range(n_layers):
        u = layer_scale * rng.standard_normal(dim)
        w = rng.standard_normal(dim)
        w *= 1.0 / max(np.linalg.norm(w), 1.0e-6)
        parts.extend([u, w, np.array([0.0])])
    return PlanarFlow(dim, n_layers, np.concatenate(parts))


def _unpack(flow: PlanarFlow):
    d, L = flow.dim, flow.n_layers
    p = flow.params
    mean, log_var = p[0:d], p[d:2 * d]
    layers = []
    for i in range(L):
        off = 2 * d + i * (2 * d + 1)
        layers.append((p[off:off + d], p[off + d:off + 2 * d],
                       p[off + 2 * d]))
    return mean, log_var, layers


def _softplus(x):
    # max(x,0) + log(1+exp(-|x|)): overflow-safe on both branches
    return ad.maximum(x, 0.0) + ad.log(1.0 + ad.exp(-ad.abs_smooth(x)))


_SOFTPLUS_UNIT = math.log(math.e - 1.0)  # softplus(x + this) = 1 at x = 0


def _u_hat(u, w):
    """Reparameterize u so that w'u_hat > -1 keeps the layer invertible.

    m(x) = -1 + softplus(x + ln(e-1)) fixes m(0) = 0, so u = 0 stays an
    exact identity layer while still forcing w'u_hat above -1.
    """
    wu = ad.dot(w, u)
    m = -1.0 + _softplus(wu + _SOFTPLUS_UNIT)
    wnorm2 = ad.sum_(ad.pow2(w)) + 1.0e-8
    return u + ((m - wu) / wnorm2) * w


def planar_forward(layer, z):
    """Apply one layer to (n, d) or (d,) points: (z', log|det Jacobian|)."""
    u, w, b = layer
    uh = _u_hat(u, w)
    z2d = z if ad.value_of(z).ndim == 2 else ad.reshape(z, (1, -1))
    pre = ad.matmul(z2d, w) + b            # (n,)
    t = ad.tanh(pre)
    z_new = z2d + ad.reshape(t, (-1, 1)) * uh
    hprime = 1.0 - ad.pow2(t)
    logdet = ad.log(1.0 + hprime * ad.dot(w, uh))  # positive by construction
    if ad.value_of(z).ndim != 2:
        z_new = ad.reshape(z_new, (-1,))
    return z_new, logdet


def flow_forward(flow: PlanarFlow, z0):
    """Push (n, d) base points through every layer; (theta, sum log|det|)."""
    _, _, layers = _unpack(flow)
    z = z0
    total = 0.0
    for layer in layers:
        z, logdet = planar_forward(layer, z)
        total = total + logdet
    return z, total


def flow_sample(flow: PlanarFlow, n: int, rng: np.random.Generator):
    """Draw n samples; returns (theta (n, d), log q(theta) (n,))."""
    mean, log_var, _ = _unpack(flow)
    mean_v = ad.value_of(mean)
    log_var_v = ad.value_of(log_var)
    eps = rng.standard_normal((n, flow.dim))
    z0 = mean_v + np.exp(0.5 * log_var_v) * eps
    log_p0 = -0.5 * np.sum(np.log(2.0 * np.pi) + log_var_v + eps * eps, axis=1)
    theta, logdet = flow_forward(flow, z0)
    return np.asarray(ad.value_of(theta)), log_p0 - np.asarray(ad.value_of(logdet))


def _invert_layer(layer, z_new: np.ndarray, max_iter: int = 100) -> np.ndarray:
    """Solve z + u_hat tanh(w'z + b) = z_new by a bisection on s = w'z."""
    u, w, b = (np.asarray(ad.value_of(p), dtype=float) for p in layer)
    uh = np.asarray(ad.value_of(_u_hat(u, w)))
    wu = float(np.dot(w, uh))
    b = float(b)
    target = z_new @ w                       # (n,)
    half = abs(wu) + 1.0
    lo, hi = target - half, target + half

    def f(s):
        return s + wu * np.tanh(s + b) - target

    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        lo = np.where(val < 0.0, mid, lo)
        hi = np.where(val >= 0.0, mid, hi)
    s = 0.5 * (lo + hi)
    if np.max(np.abs(f(s))) > 1.0e-9 * (1.0 + np.max(np.abs(target))):
        raise RuntimeError("planar layer inversion did not converge")
    return z_new - np.tanh(s + b)[:, None] * uh


def flow_log_density(flow: PlanarFlow, theta: np.ndarray) -> np.ndarray:
    """log q at arbitrary points (inverts the layers last-to-first)."""
    mean, log_var, layers = _unpack(flow)
    mean_v, log_var_v = ad.value_of(mean), ad.value_of(log_var)
    z = np.atleast_2d(np.asarray(theta, dtype=float))
    total_logdet = np.zeros(z.shape[0])
    for layer in reversed(layers):
        z_prev = _invert_layer(layer, z)
        _, logdet = planar_forward(layer, z_prev)
        total_logdet += np.asarray(ad.value_of(logdet))
        z = z_prev
    diff = (z - mean_v) / np.exp(0.5 * log_var_v)
    log_p0 = -0.5 * np.sum(np.log(2.0 * np.pi) + log_var_v + diff * diff,
                           axis=1)
    out = log_p0 - total_logdet
    return out if np.asarray(theta).ndim == 2 else out[0]


def flow_train(flow: PlanarFlow, gibbs: pb.GibbsPosterior, n_mc: int,
               steps: int, lr: float, seed: int,
               abort_factor: float = 10.0) -> tuple[PlanarFlow, list[float]]:
    """Minimize E_q[log q(theta) - log P(theta) + lam L-hat(theta)] by SGD.

    This is KL(q || Q*) up to the constant ln Z.  Returns the trained flow
    and the per-step objective trace; aborts when the objective exceeds
    ``abort_factor`` times its initial magnitude.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = np.random.default_rng(seed)
    params = np.asarray(flow.params, dtype=float).copy()
    trace: list[float] = []
    threshold = None
    for step in range(steps):
        eps = rng.standard_normal((n_mc, flow.dim))

        def objective(p: ad.Var):
            fl = PlanarFlow(flow.dim, flow.n_layers, p)
            mean, log_var, _ = _unpack(fl)
            z0 = mean + ad.exp(0.5 * log_var) * eps
            theta, logdet = flow_forward(fl, z0)
            # entropy part: E[log p0(z0)] with the reparameterized sample
            log_p0 = ad.sum_(
                (np.log(2.0 * np.pi) + eps * eps) * (-0.5)
            ) / eps.shape[0] + ad.sum_(log_var) * (-0.5)
            total = log_p0 - ad.sum_(logdet) / n_mc
            for i in range(n_mc):
                th_i = theta[i]
                total = total - gibbs.prior.log_density(th_i) / n_mc
                total = total + (gibbs.lam / n_mc) * gibbs.problem.empirical_taped(
                    th_i, gibbs.dataset)
            return total

        val, grad = ad.gradient(objective, params)
        trace.append(val)
        if threshold is None:
            threshold = abort_factor * max(abs(val), 1.0e-2)
        if not np.isfinite(val) or val > threshold:
            raise FlowDivergence(
                f"objective {val:.3g} exceeded {threshold:.3g} at step {step}")
        if lr != 0.0:
            params = params - lr * grad
    return PlanarFlow(flow.dim, flow.n_layers, params), trace


def flow_base_init(train_fn, n_runs: int = 5, scale: float = 2.0,
                   var_floor: float = 1.0e-6):
    """Data-driven base Gaussian: mean/variance of independently trained
    controllers.

    ``train_fn(run_index) -> theta`` must train on one fixed sequence with a
    run-dependent seed.  Per-coordinate variances are scaled by ``scale`` and
    floored at ``var_floor * scale``.
    """
    if n_runs < 2:
        raise ValueError("need at least two runs for a variance estimate")
    thetas = np.stack([np.asarray(train_fn(i), dtype=float)
                       for i in range(n_runs)])
    mean = thetas.mean(axis=0)
    var = np.maximum(thetas.var(axis=0, ddof=0) * scale, var_floor * scale)
    return mean, var
