"""Command-line interface.

Verbs: gen-data, train, bound, evaluate, select.  Every command is driven by
a TOML config (--config) plus a few overriding flags, writes CSV/JSON
artifacts into an output directory, and archives the resolved config next to
them.  Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import controllers as ctrl
from . import experiments as exp
from . import inference as inf
from . import pacbayes as pb
from . import sim
from .config import ConfigError, ExperimentConfig, build_prior, build_problem, \
    build_noise, load_config
from .selection import bootstrap_select

NUMERICAL_ERRORS = (sim.RolloutBlowup, inf.FlowDivergence, inf.SvgdAbort,
                    exp.NumericalFailure)


def _arch_descriptor(arch) -> dict:
    if isinstance(arch, ctrl.Affine):
        return {"kind": "affine"}
    return {"kind": "imc_ren", "xi_dim": arch.xi_dim,
            "zeta_dim": arch.zeta_dim, "input_dim": arch.input_dim,
            "output_dim": arch.output_dim}


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def _load_dataset(path: str) -> sim.NoiseDataset:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"dataset file not found: {p}")
    return sim.NoiseDataset.from_json(p.read_text())


def _save_posterior(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))


def _load_posterior(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"posterior file not found: {p}")
    return json.loads(p.read_text())


def _posterior_sampler(artifact: dict, problem):
    """(n, rng) -> theta stack, for svgd/flow/grid posterior artifacts."""
    kind = artifact["kind"]
    if kind == "grid":
        grid = _grid_from_artifact(artifact)
        return lambda n, rng: inf.grid_sample(grid, n,
                                              int(rng.integers(0, 2 ** 31)))
    if kind == "svgd":
        particles = np.asarray(artifact["particles"], dtype=float)
        return lambda n, rng: particles[rng.integers(0, len(particles), n)]
    if kind == "flow":
        flow = inf.PlanarFlow(int(artifact["dim"]), int(artifact["n_layers"]),
                              np.asarray(artifact["params"], dtype=float))
        return lambda n, rng: inf.flow_sample(flow, n, rng)[0]
    raise ConfigError(f"cannot sample from posterior kind {kind!r}")


def _grid_from_artifact(artifact: dict) -> inf.GridPosterior:
    return inf.GridPosterior(
        k_axis=np.asarray(artifact["k_axis"]),
        beta_axis=np.asarray(artifact["beta_axis"]),
        log_mass=np.asarray(artifact["log_mass"]),
        log_prior_mass=np.asarray(artifact["log_prior_mass"]),
        cost_grid=np.asarray(artifact["cost_grid"]),
        log_z=float(artifact["log_z"]), lam=float(artifact["lam"]),
    )


def _grid_artifact(grid: inf.GridPosterior) -> dict:
    return {
        "kind": "grid", "k_axis": grid.k_axis.tolist(),
        "beta_axis": grid.beta_axis.tolist(),
        "log_mass": grid.log_mass.tolist(),
        "log_prior_mass": grid.log_prior_mass.tolist(),
        "cost_grid": grid.cost_grid.tolist(),
        "log_z": grid.log_z, "lam": grid.lam,
    }


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    problem = build_problem(cfg)
    s = args.s if args.s is not None else cfg.s
    seed = args.seed if args.seed is not None else cfg.seed
    dataset = sim.generate_dataset(build_noise(cfg), s, cfg.horizon,
                                   problem.plant.state_dim, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dataset.to_json())
    print(f"wrote {out}: S={s} T={cfg.horizon} Nx={problem.plant.state_dim} "
          f"seed={seed}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    problem = build_problem(cfg)
    prior = build_prior(cfg, problem)
    dataset = _load_dataset(args.dataset)
    method = args.method or cfg.get("train", "method")
    out_dir = Path(args.out_dir) if args.out_dir else cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.archive(out_dir)
    train = cfg.table("train")
    lam = cfg.resolve_lambda(dataset.size, problem.c)
    seed = cfg.seed
    rng = np.random.default_rng(seed)

    if method == "empirical":
        theta0 = prior.sample(1, rng)[0]
        result = exp.train_empirical(
            problem, dataset, theta0, lr=float(train["lr"]),
            epochs=int(train["epochs"]), patience=int(train["patience"]),
            val_frac=float(train["val_frac"]), seed=seed)
        theta, trace = result.theta, result.trace
        _save_posterior(out_dir / "posterior.json",
                        {"kind": "empirical", "theta": theta.tolist(),
                         "arch": _arch_descriptor(problem.arch)})
        rows = [[e["epoch"], e["train_cost"], e.get("val_cost", "")]
                for e in trace]
        _write_csv(out_dir / "metrics.csv", ["epoch", "train_cost", "val_cost"],
                   rows)
    elif method == "grid":
        if cfg.name != "lti":
            raise ConfigError("grid inference requires the 2-parameter problem")
        grid = inf.grid_posterior(prior, dataset, lam, problem,
                                  int(train["resolution"]))
        _save_posterior(out_dir / "posterior.json", _grid_artifact(grid))
        theta = inf.grid_sample(grid, 1, seed)[0]
        _write_csv(out_dir / "metrics.csv", ["log_z", "lambda"],
                   [[grid.log_z, lam]])
    elif method == "svgd":
        pset, trace = exp.fit_svgd(
            problem, dataset, prior, lam, k=int(train["particles"]),
            lr=float(train["lr"]), epochs=int(train["epochs"]), seed=seed,
            val_frac=float(train["val_frac"]), patience=int(train["patience"]))
        _save_posterior(out_dir / "posterior.json",
                        {"kind": "svgd",
                         "particles": pset.particles.tolist(),
                         "arch": _arch_descriptor(problem.arch)})
        theta = pset.particles[int(rng.integers(0, len(pset.particles)))]
        rows = [[e["epoch"], e["displacement"], e.get("validation", "")]
                for e in trace]
        _write_csv(out_dir / "metrics.csv",
                   ["epoch", "displacement", "validation"], rows)
    elif method == "flows":
        flow, trace = exp.fit_flow(
            problem, dataset, prior, lam, n_layers=int(train["flow_layers"]),
            steps=int(train["flow_steps"]), lr=float(train["flow_lr"]),
            seed=seed, n_mc=int(train["n_mc"]),
            base_scale=float(train["base_scale"]))
        _save_posterior(out_dir / "posterior.json",
                        {"kind": "flow", "dim": flow.dim,
                         "n_layers": flow.n_layers,
                         "params": flow.params.tolist(),
                         "arch": _arch_descriptor(problem.arch)})
        theta = inf.flow_sample(flow, 1, rng)[0][0]
        _write_csv(out_dir / "metrics.csv", ["step", "objective"],
                   [[i, v] for i, v in enumerate(trace)])
    else:
        raise ConfigError(f"unknown training method {method!r}")

    checkpoint = ctrl.ControllerParams(np.asarray(theta), problem.arch)
    (out_dir / "checkpoint.json").write_text(checkpoint.to_json())
    print(f"trained method={method} lambda={lam:.4f}; artifacts in {out_dir}")
    return 0


def cmd_bound(args) -> int:
    cfg = load_config(args.config)
    problem = build_problem(cfg)
    prior = build_prior(cfg, problem)
    dataset = _load_dataset(args.dataset)
    family = args.family or cfg.get("bound", "family")
    delta = cfg.delta
    n_q = int(args.n_q)
    delta_eff = pb.union_delta(delta, n_q)  # shrinks only when selecting
    n_controllers = int(args.n_controllers)
    s = dataset.size
    lam = cfg.resolve_lambda(s, problem.c)
    out = Path(args.out) if args.out else cfg.out_dir / "bounds.csv"
    reports = []

    if family == "thm1":
        artifact = _load_posterior(args.posterior)
        if artifact["kind"] != "grid":
            raise ConfigError("thm1 bounds need a grid posterior artifact")
        grid = _grid_from_artifact(artifact)
        thetas = inf.grid_sample(grid, n_controllers, cfg.seed)
        for theta in thetas:
            i = int(np.argmin(np.abs(grid.k_axis - theta[0])))
            j = int(np.argmin(np.abs(grid.beta_axis - theta[1])))
            reports.append(pb.bound_randomized(
                problem.empirical(theta, dataset),
                grid.log_density_ratio((i, j)), grid.lam, delta_eff,
                problem.c, s))
    elif family == "cor2":
        if cfg.name != "lti":
            raise ConfigError("exact-partition bounds need the gridded problem")
        lam_eff = pb.lambda_star(s, delta_eff, problem.c) \
            if cfg.get("bound", "lambda") == "star" else lam
        _, reports = exp.lti_grid_bound(
            problem, dataset, prior, delta_eff, lam=lam_eff,
            resolution=int(cfg.get("bound", "resolution", 120)),
            n_controllers=n_controllers, seed=cfg.seed)
    elif family == "cor3":
        n_p = int(cfg.get("bound", "n_p"))
        log_z_hat = exp.mc_log_partition(
            problem, dataset, lambda n, rng: prior.sample(n, rng), n_p, lam)
        rng = np.random.default_rng(cfg.seed)
        cand = prior.sample(256, rng)
        costs = problem.batch_empirical(np.asarray(cand), dataset)
        w = np.exp(-lam * costs + lam * costs.min())
        theta = np.asarray(cand)[rng.choice(len(costs), p=w / w.sum())]
        reports.append(pb.bounds_qstar_mc(
            problem.empirical(theta, dataset), log_z_hat, n_p, lam,
            delta_eff, problem.c, s))
    elif family == "two_stage":
        n_p = int(cfg.get("bound", "n_p"))
        train = cfg.table("train")
        splits = [int(args.s1)] if args.s1 is not None \
            else [int(x) for x in cfg.get("bound", "splits")]

        def evaluate_split(s1: int) -> pb.BoundReport:
            return exp.robot_two_stage_bound(
                problem, dataset, prior, s1, lam, delta_eff, n_p,
                seed=cfg.seed, flow_layers=int(train["flow_layers"]),
                flow_steps=int(train["flow_steps"]),
                flow_lr=float(train["flow_lr"]))

        best_s1, best, evaluated = pb.two_stage_split_search(
            splits, lam, s, delta_eff, problem.c, n_p, evaluate_split)
        print(f"selected split S1={best_s1} of candidates {splits}")
        reports = [rep for _, rep in evaluated]
    else:
        raise ConfigError(f"unknown bound family {family!r}")

    _write_csv(out, pb.BoundReport.CSV_FIELDS,
               [r.csv_row() for r in reports])
    for r in reports:
        print(f"{r.family}: S={r.s} delta={r.delta:.4g} lambda={r.lam:.4g} "
              f"upper={r.upper:.4f} lower={r.lower:.4f} "
              f"(joint validity {r.joint_validity})")
    if n_q > 1:
        print(f"delta adjusted for best-of-{n_q} selection: "
              f"delta'={delta_eff:.4g}; selected-controller bounds hold "
              f"with probability 1-{delta:.4g}")
    print(f"wrote {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config)
    problem = build_problem(cfg)
    path = Path(args.checkpoint)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    params = ctrl.ControllerParams.from_json(path.read_text())
    if params.arch != problem.arch:
        raise ConfigError("checkpoint architecture does not match the config")
    n_test = int(args.n_test or cfg.get("select", "n_test"))
    seed = args.seed if args.seed is not None else cfg.seed
    metrics = exp.evaluate_controller(problem, params.theta, n_test, seed)
    out = Path(args.out) if args.out else cfg.out_dir / "eval.csv"
    rows = [[i, metrics["raw"][i], metrics["transformed"][i]]
            for i in range(n_test)]
    _write_csv(out, ["sequence", "raw_cost", "transformed_cost"], rows)
    line = (f"n_test={n_test} mean_raw={metrics['mean_raw']:.4f} "
            f"mean_transformed={metrics['mean_transformed']:.4f}")
    if "collision_fraction" in metrics:
        line += f" collisions={100.0 * metrics['collision_fraction']:.2f}%"
    print(line)
    print(f"wrote {out}")
    return 0


def cmd_select(args) -> int:
    cfg = load_config(args.config)
    problem = build_problem(cfg)
    prior = build_prior(cfg, problem)
    dataset = _load_dataset(args.dataset)
    n_q = int(args.n_q or cfg.get("select", "n_q"))
    b = int(args.b or cfg.get("select", "b"))
    delta = cfg.delta
    delta_eff = pb.union_delta(delta, n_q)
    rng = np.random.default_rng(cfg.seed)

    if args.posterior:
        sampler = _posterior_sampler(_load_posterior(args.posterior), problem)
    elif cfg.name == "lti":
        lam = pb.lambda_star(dataset.size, delta_eff, problem.c) \
            if cfg.get("bound", "lambda") == "star" \
            else cfg.resolve_lambda(dataset.size, problem.c)
        grid = inf.grid_posterior(prior, dataset, lam, problem,
                                  int(cfg.get("bound", "resolution", 120)))
        sampler = lambda n, r: inf.grid_sample(grid, n,
                                               int(r.integers(0, 2 ** 31)))
    else:
        raise ConfigError("select needs --posterior for the robot problem")

    candidates = list(np.asarray(sampler(n_q, rng)))
    best, estimates = bootstrap_select(candidates, dataset, problem, b=b,
                                       seed=cfg.seed)
    out_dir = Path(args.out_dir) if args.out_dir else cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [[e.candidate, e.full_cost, e.score, int(e.candidate == best)]
            for e in estimates]
    _write_csv(out_dir / "selection.csv",
               ["candidate", "empirical_cost", "bootstrap_score", "selected"],
               rows)
    checkpoint = ctrl.ControllerParams(candidates[best], problem.arch)
    (out_dir / "selected.json").write_text(checkpoint.to_json())
    print(f"selected candidate {best} of {n_q} by out-of-bag score; "
          f"posterior built at delta'={delta_eff:.4g}, so its bound holds "
          f"with probability 1-{delta:.4g} after selection")
    print(f"wrote {out_dir / 'selection.csv'} and {out_dir / 'selected.json'}")
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pacsnoc",
        description="PAC-Bayesian stochastic optimal control experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a noise dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--s", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a controller or posterior")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--method",
                   choices=["empirical", "grid", "svgd", "flows"])
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bound", help="compute cost certificates")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--posterior")
    p.add_argument("--family",
                   choices=["thm1", "cor2", "cor3", "two_stage"])
    p.add_argument("--s1", type=int, help="two-stage split override")
    p.add_argument("--n-controllers", type=int, default=1,
                   help="posterior draws to report bounds for")
    p.add_argument("--n-q", type=int, default=1,
                   help="union-bound divisor when the best of N_Q draws "
                        "will be selected (delta' = delta / N_Q)")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bound)

    p = sub.add_parser("evaluate", help="held-out evaluation of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("select", help="bootstrap-select among posterior samples")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--posterior")
    p.add_argument("--n-q", type=int)
    p.add_argument("--b", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_select)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
