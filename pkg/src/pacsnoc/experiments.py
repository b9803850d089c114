"""Experiment definitions and training/bounding drivers.

Two benchmark problems:

* scalar LTI regulation with an affine controller and an exactly gridded
  posterior over (k, beta);
* two planar robots crossing a narrow valley with IMC-REN controllers and
  sampling-based posterior approximations.

The drivers below are shared by the CLI and the acceptance suite: plain
gradient-descent training with a train/validation split, SVGD and flow
fitting of the Gibbs posterior, the two-stage Monte-Carlo bound for the
robot problem, and controller evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import controllers as ctrl
from . import cost as cost_mod
from . import inference as inf
from . import pacbayes as pb
from . import parallel
from . import sim
from .evaluate import ControlProblem


class NumericalFailure(RuntimeError):
    """Training produced non-finite values; maps to CLI exit code 3."""


# ----------------------------------------------------------------------
# benchmark problems
# ----------------------------------------------------------------------
def ihlqr_gain(a: float, b: float, q: float, r: float,
               tol: float = 1.0e-12, max_iter: int = 100000) -> float:
    """Infinite-horizon LQR gain of the scalar system via Riccati iteration."""
    p = q
    for _ in range(max_iter):
        p_next = q + a * a * p - (a * b * p) ** 2 / (r + b * b * p)
        if abs(p_next - p) < tol:
            p = p_next
            break
        p = p_next
    return a * b * p / (r + b * b * p)


def lti_problem(a: float = 0.8, b: float = 0.1, xbar: float = 2.0,
                horizon: int = 10, q: float = 5.0, r: float = 0.003,
                mu_w: float = 0.3, sigma_w: float = 0.3) -> ControlProblem:
    plant = sim.ScalarLTI(a=a, b=b, xbar=xbar)
    spec = cost_mod.LtiQuadratic(q=q, r=r)
    noise = sim.NoiseSpec("gaussian", mean=mu_w, std=sigma_w)
    return ControlProblem(plant, spec, ctrl.Affine(), horizon, noise)


def lti_prior(problem: ControlProblem, beta_kind: str = "gaussian",
              k_std: float = 1.0, beta_std: float = 1.5) -> pb.Product2D:
    """k centered at the IH-LQR gain; beta reflects noise-mean knowledge."""
    plant = problem.plant
    spec = problem.cost_spec
    k0 = ihlqr_gain(plant.a, plant.b, spec.q, spec.r)
    if beta_kind == "gaussian":
        beta_prior = pb.Gaussian1D(problem.noise.mean / plant.b, beta_std)
    elif beta_kind == "uniform":
        half = 0.5 / plant.b
        beta_prior = pb.Uniform1D(-half, half)
    else:
        raise ValueError(f"unknown beta prior kind {beta_kind!r}")
    return pb.Product2D(pb.Gaussian1D(k0, k_std), beta_prior)


def robot_problem(horizon: int = 100, xi_dim: int = 2, zeta_dim: int = 2,
                  sigma_w: float = 0.2, q_scale: float = 0.02,
                  r_scale: float = 0.01,
                  plant: sim.PlanarRobots | None = None) -> ControlProblem:
    """Toy-scale valley-crossing task.

    The default position/velocity weight keeps the nominal collision spike
    dominant in the open-loop cost, so the transformed cost of a dodging
    controller sits well inside the linear region of the tanh squash.
    """
    plant = plant or sim.PlanarRobots()
    spec = cost_mod.robot_cost_for(plant, q_scale=q_scale, r_scale=r_scale)
    noise = sim.NoiseSpec("initial_gaussian", std=sigma_w)
    arch = ctrl.ImcRen(xi_dim, zeta_dim, plant.state_dim, plant.input_dim)
    return ControlProblem(plant, spec, arch, horizon, noise)


def robot_prior(problem: ControlProblem, std: float = 10.0) -> pb.GaussianIso:
    return pb.GaussianIso(np.zeros(problem.arch.n_params()), std)


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------
def train_val_split(dataset: sim.NoiseDataset, val_frac: float,
                    seed: int) -> tuple[sim.NoiseDataset, sim.NoiseDataset | None]:
    """Seeded 75/25-style shuffle split; no validation part if too small."""
    s = dataset.size
    n_val = int(round(val_frac * s))
    if n_val < 1 or s - n_val < 1:
        return dataset, None
    perm = np.random.default_rng(seed).permutation(s)
    return dataset.subset(perm[n_val:]), dataset.subset(perm[:n_val])


@dataclass
class TrainResult:
    theta: np.ndarray
    trace: list
    epochs_run: int


def train_empirical(problem: ControlProblem, dataset: sim.NoiseDataset,
                    theta0: np.ndarray, lr: float, epochs: int,
                    patience: int = 500, val_frac: float = 0.25,
                    seed: int = 0) -> TrainResult:
    """Plain gradient descent on the transformed empirical cost.

    Uses a seeded train/validation split with early stopping after
    ``patience`` epochs without validation improvement; affine gains are
    projected into the stability interval after every step.
    """
    train_ds, val_ds = train_val_split(dataset, val_frac, seed)
    theta = np.asarray(theta0, dtype=float).copy()
    affine = isinstance(problem.arch, ctrl.Affine)
    if affine:
        theta[0] = ctrl.project_gain(theta[0])
    best = (np.inf, theta.copy(), 0)
    trace = []
    since_best = 0
    for epoch in range(epochs):
        train_cost, grad = problem.empirical_and_grad(theta, train_ds)
        if not np.all(np.isfinite(grad)):
            raise NumericalFailure(f"non-finite gradient at epoch {epoch}")
        theta = theta - lr * grad
        if affine:
            theta[0] = ctrl.project_gain(theta[0])
        entry = {"epoch": epoch, "train_cost": train_cost}
        if val_ds is not None:
            val_cost = problem.empirical(theta, val_ds)
            entry["val_cost"] = val_cost
            if val_cost < best[0] - 1.0e-12:
                best = (val_cost, theta.copy(), epoch)
                since_best = 0
            else:
                since_best += 1
        trace.append(entry)
        if val_ds is not None and since_best >= patience:
            break
    final = best[1] if val_ds is not None and np.isfinite(best[0]) else theta
    return TrainResult(theta=final, trace=trace, epochs_run=len(trace))


def fit_svgd(problem: ControlProblem, dataset: sim.NoiseDataset,
             prior, lam: float, k: int, lr: float, epochs: int,
             seed: int, val_frac: float = 0.25,
             patience: int = 500) -> tuple[inf.ParticleSet, list]:
    """SVGD approximation of the Gibbs posterior.

    The Gibbs density uses the training part of the split; the held-out part
    drives patience-based early stopping, mirroring the empirical baseline.
    """
    train_ds, val_ds = train_val_split(dataset, val_frac, seed)
    gibbs = pb.GibbsPosterior(prior, train_ds, lam, problem)
    validation = None
    if val_ds is not None:
        validation = lambda th: problem.empirical(th, val_ds)
    return inf.svgd_run(gibbs, k=k, lr=lr, epochs=epochs, seed=seed,
                        validation=validation, patience=patience)


def fit_flow(problem: ControlProblem, dataset: sim.NoiseDataset, prior,
             lam: float, n_layers: int, steps: int, lr: float, seed: int,
             n_mc: int = 2, base_scale: float = 2.0,
             base_init_epochs: int = 300,
             base_init_lr: float = 100.0) -> tuple[inf.PlanarFlow, list]:
    """Planar-flow approximation of the Gibbs posterior.

    The base Gaussian is centered on empirical controllers trained on the
    first sequence of the dataset with five different seeds; its variance is
    the scaled per-coordinate sample variance.  ``base_init_lr`` is a
    training-scale step size, unrelated to the flow's own KL step ``lr``.
    """
    single = dataset.subset([0])
    dim = problem.arch.n_params()

    def train_one(i: int) -> np.ndarray:
        rng = np.random.default_rng(seed * 1009 + i)
        theta0 = prior.sample(1, rng)[0] if hasattr(prior, "sample") \
            else rng.standard_normal(dim)
        res = train_empirical(problem, single, theta0, lr=base_init_lr,
                              epochs=base_init_epochs, val_frac=0.0,
                              seed=seed + i)
        return res.theta

    mean, var = inf.flow_base_init(train_one, n_runs=5, scale=base_scale)
    flow = inf.flow_init(dim, n_layers, seed=seed, base_mean=mean,
                         base_var=var)
    gibbs = pb.GibbsPosterior(prior, dataset, lam, problem)
    return inf.flow_train(flow, gibbs, n_mc=n_mc, steps=steps, lr=lr,
                          seed=seed)


# ----------------------------------------------------------------------
# bounds
# ----------------------------------------------------------------------
def lti_grid_bound(problem: ControlProblem, dataset: sim.NoiseDataset,
                   prior: pb.Product2D, delta: float,
                   lam: float | None = None, resolution: int = 120,
                   n_controllers: int = 0, seed: int = 0):
    """Exact-partition bounds on the gridded LTI posterior.

    Returns (grid, reports): one specialized report per sampled controller
    (or a single theta-free upper-bound report when n_controllers == 0).
    """
    s = dataset.size
    lam = pb.lambda_star(s, delta, problem.c) if lam is None else lam
    grid = inf.grid_posterior(prior, dataset, lam, problem, resolution)
    reports = []
    if n_controllers == 0:
        reports.append(pb.bounds_qstar_exact(float("nan"), grid.log_z, lam,
                                             delta, problem.c, s))
    else:
        for theta in inf.grid_sample(grid, n_controllers, seed):
            l_hat = problem.empirical(theta, dataset)
            reports.append(pb.bounds_qstar_exact(l_hat, grid.log_z, lam,
                                                 delta, problem.c, s))
    return grid, reports


def mc_log_partition(problem: ControlProblem, dataset: sim.NoiseDataset,
                     sampler, n_p: int, lam: float,
                     chunk: int = 8192) -> float:
    """ln Z-hat from n_p sampler draws, streamed in chunks.

    ``sampler(n, rng) -> (thetas, _)`` or a bare theta stack; costs go
    through the theta-batched evaluator.
    """
    rng = np.random.default_rng(12345)
    chunk_lses = []
    remaining = n_p
    while remaining > 0:
        n = min(chunk, remaining)
        drawn = sampler(n, rng)
        thetas = drawn[0] if isinstance(drawn, tuple) else drawn
        costs = problem.batch_empirical(np.asarray(thetas), dataset)
        m = float(np.max(-lam * costs))
        chunk_lses.append((m, float(np.sum(np.exp(-lam * costs - m)))))
        remaining -= n
    top = max(m for m, _ in chunk_lses)
    total = sum(s * math.exp(m - top) for m, s in chunk_lses)
    return top + math.log(total) - math.log(n_p)


def best_of_k_init(problem: ControlProblem, prior, dataset: sim.NoiseDataset,
                   k: int, seed: int) -> np.ndarray:
    """Prior draw with the lowest initial empirical cost.

    Escapes the saturated region of the tanh transform, where gradients are
    too flat for plain descent to start moving.
    """
    rng = np.random.default_rng(seed)
    candidates = prior.sample(max(k, 1), rng)
    costs = problem.batch_empirical(np.atleast_2d(candidates), dataset)
    return np.atleast_2d(candidates)[int(np.argmin(costs))]


def stage1_flow(problem: ControlProblem, ds1: sim.NoiseDataset, prior,
                lam1: float, seed: int, flow_layers: int = 6,
                flow_steps: int = 100, flow_lr: float = 0.02,
                base_scale: float = 1.5, train_lrs=(10.0, 30.0),
                train_epochs: int = 400, n_runs: int = 3) -> inf.PlanarFlow:
    """Data-driven stage-2 prior: a planar flow whose base Gaussian is
    centered on controllers trained on the stage-1 split, then tilted
    toward the stage-1 Gibbs posterior by a short KL fit.

    Each run probes a handful of prior draws for an unsaturated starting
    point and keeps the best of a small learning-rate scan (plain descent
    stalls both in the saturated region and at overshooting step sizes).
    Everything here sees only the stage-1 data, so the result is a valid
    prior for the certified stage.
    """
    def train_one(i: int) -> np.ndarray:
        theta0 = best_of_k_init(problem, prior, ds1, k=8,
                                seed=seed * 997 + 13 * i)
        best_cost, best_theta = np.inf, theta0
        for lr in train_lrs:
            res = train_empirical(problem, ds1, theta0, lr=lr,
                                  epochs=train_epochs, val_frac=0.0,
                                  seed=seed + i)
            final = res.trace[-1]["train_cost"]
            if final < best_cost:
                best_cost, best_theta = final, res.theta
        return best_theta

    mean, var = inf.flow_base_init(train_one, n_runs=n_runs,
                                   scale=base_scale)
    flow = inf.flow_init(problem.arch.n_params(), flow_layers, seed=seed,
                         base_mean=mean, base_var=var)
    gibbs = pb.GibbsPosterior(prior, ds1, lam1, problem)
    flow, _ = inf.flow_train(flow, gibbs, n_mc=2, steps=flow_steps,
                             lr=flow_lr, seed=seed)
    return flow


def robot_two_stage_bound(problem: ControlProblem, dataset: sim.NoiseDataset,
                          prior: pb.GaussianIso, s1: int, lam: float,
                          delta: float, n_p: int, seed: int = 0,
                          flow_layers: int = 6, flow_steps: int = 150,
                          flow_lr: float = 0.02, train_epochs: int = 600,
                          n_theta_draw: int = 256) -> pb.BoundReport:
    """Two-stage MC bound: a flow fitted on the first split becomes the
    stage-2 prior; the certificate is computed on the held-out split.

    lambda is split proportionally (lam_i = S_i/S lam) so the stage-2 Gibbs
    posterior coincides with the single-stage one.
    """
    idx1, idx2 = pb.split_dataset(dataset, s1)
    if len(idx1) < 1 or len(idx2) < 1:
        raise ValueError("two-stage bound needs nonempty splits")
    s = dataset.size
    ds1, ds2 = dataset.subset(idx1), dataset.subset(idx2)
    lam1 = lam * len(idx1) / s
    lam2 = lam * len(idx2) / s
    flow = stage1_flow(problem, ds1, prior, lam1, seed=seed,
                       flow_layers=flow_layers, flow_steps=flow_steps,
                       flow_lr=flow_lr, train_epochs=train_epochs)
    log_z_hat = mc_log_partition(
        problem, ds2, lambda n, rng: inf.flow_sample(flow, n, rng), n_p, lam2)
    # approximate stage-2 posterior draw by importance resampling, for the
    # empirical-cost field of the report (the upper bound is theta-free)
    rng = np.random.default_rng(seed + 777)
    cand, _ = inf.flow_sample(flow, n_theta_draw, rng)
    costs = problem.batch_empirical(cand, ds2)
    logw = -lam2 * costs
    w = np.exp(logw - np.max(logw))
    theta = cand[rng.choice(len(cand), p=w / w.sum())]
    l_hat = problem.empirical(theta, ds2)
    return pb.bounds_qstar_mc(l_hat, log_z_hat, n_p, lam2, delta, problem.c,
                              len(idx2))


# ----------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------
def evaluate_controller(problem: ControlProblem, theta: np.ndarray,
                        n_test: int, seed: int) -> dict:
    """Held-out metrics: per-sequence raw/transformed costs and, for the
    robot plant, the fraction of trajectories with a collision."""
    rng = np.random.default_rng(seed)
    noise = problem.noise.sample(n_test, problem.horizon,
                                 problem.plant.state_dim, rng)
    test = sim.NoiseDataset(noise, problem.horizon, problem.plant.state_dim)
    raw = problem.raw_costs(theta, test)
    transformed = np.asarray(
        cost_mod.transform_cost(raw, problem.c, problem.gamma))
    out = {
        "raw": raw,
        "transformed": transformed,
        "mean_raw": float(np.mean(raw)),
        "mean_transformed": float(np.mean(transformed)),
    }
    if isinstance(problem.plant, sim.PlanarRobots):
        trajectories = problem.trajectories(theta, test)
        collided = parallel.thread_map(
            lambda tr: cost_mod.robot_collisions(tr, problem.plant),
            trajectories)
        out["collision_fraction"] = float(np.mean(collided))
    return out
