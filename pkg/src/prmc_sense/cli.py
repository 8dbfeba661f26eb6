"""Command-line entry point.

Exit codes: 0 success, 1 failed check, 2 validation error, 3 infeasible
model, 4 not differentiable, 5 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys


from . import benchgen, learning, oracle, pmc, prmc
from .errors import PrmcSenseError, ValidationError
from .expr import Instantiation
from .models import PMC, instantiate_pmc, load_instantiation, load_model, validate_model


def _g(x) -> str:
    return f"{float(x):.12g}"


def _header(out, args) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    out.write(f"# config: {json.dumps(cfg, sort_keys=True, default=str)}\n")


def _load(args):
    m = load_model(args.model)
    u = load_instantiation(args.at, m.params) if getattr(args, "at", None) else Instantiation([])
    if len(u) != m.n_params:
        raise ValidationError("an instantiation (--at) is required for parametric models")
    return m, u


def cmd_gen(args, out) -> int:
    spec = benchgen.GridSpec(args.rows, args.cols, args.terrains, terrain_seed=args.terrain_seed,
                             n_lo=args.n_lo, n_hi=args.n_hi, layout=args.layout)
    if args.robust:
        inst = benchgen.gridworld_prmc(spec, seed=args.seed, beta=args.beta)
    else:
        inst = benchgen.gridworld_pmc(spec, seed=args.seed)
    data = inst.model.to_json()
    data["generator"] = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    text = json.dumps(data)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        out.write(text + "\n")
    names = inst.model.params.names
    point = {n: float(v) for n, v in zip(names, inst.point)}
    if args.at_out:
        with open(args.at_out, "w") as fh:
            json.dump(point, fh)
    if args.true_out:
        skel_names = names if not args.robust else inst.extra["skeleton"].params.names
        with open(args.true_out, "w") as fh:
            json.dump({n: float(v) for n, v in zip(skel_names, inst.true_values)}, fh)
    return 0


def cmd_solve(args, out) -> int:
    m, u = _load(args)
    _header(out, args)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["quantity", "value"])
    if isinstance(m, PMC):
        w.writerow(["sol", _g(pmc.solve_expected_reward(m, u).sol)])
    else:
        w.writerow(["sol_R", _g(prmc.robust_solve(m, u, method=args.robust_method).sol_R)])
    return 0


def cmd_grad(args, out) -> int:
    m, u = _load(args)
    if isinstance(m, PMC):
        if args.method == "adjoint":
            rep = pmc.gradient_adjoint(m, u)
        else:
            rep = pmc.gradient_explicit(m, u, threads=args.threads)
        fd = oracle.fd_gradient_pmc(m, u, h=args.h or 1e-5) if args.check_fd else None
    else:
        rep = prmc.robust_gradient_all(m, u, threads=args.threads)
        fd = oracle.fd_gradient_prmc(m, u, h=args.h or 1e-4) if args.check_fd else None
    _header(out, args)
    w = csv.writer(out, lineterminator="\n")
    if fd is None:
        w.writerow(["parameter", "derivative"])
        for n, v in zip(rep.names, rep.values):
            w.writerow([n, _g(v)])
        return 0
    w.writerow(["parameter", "derivative", "fd", "rel_error"])
    worst = 0.0
    for n, v, f in zip(rep.names, rep.values, fd):
        rel = abs(v - f) / max(abs(f), 1e-8)
        worst = max(worst, rel)
        w.writerow([n, _g(v), _g(f), _g(rel)])
    out.write(f"# max_rel_error: {_g(worst)}\n")
    return 0 if worst <= 1e-3 else 1


def cmd_topk(args, out) -> int:
    m, u = _load(args)
    direction = "lowest" if args.lowest else "highest"
    if isinstance(m, PMC):
        res = pmc.topk(m, u, args.k, direction, method=args.method, with_values=args.values)
    else:
        res = prmc.topk_robust(m, u, args.k, direction, method=args.method, with_values=args.values)
    _header(out, args)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["parameter", "derivative"] if args.values else ["parameter"])
    for j, n in enumerate(res.names):
        w.writerow([n, _g(res.values[j])] if args.values else [n])
    out.write(f"# lp_objective: {_g(res.objective)}\n")
    return 0


def cmd_learn(args, out) -> int:
    skel = load_model(args.model)
    if not isinstance(skel, PMC):
        raise ValidationError("learn expects a pMC skeleton whose parameters are sampled probabilities")
    true = load_instantiation(args.true, skel.params)
    runs = [learning.run_learning(skel, true.values, args.strategy, args.steps, args.batch,
                                  seed=args.seed, n0=args.n0, beta=args.beta)]
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    header = f"config: {json.dumps(cfg, sort_keys=True)}\ntrue_solution: {_g(runs[0].true_solution)}"
    learning.write_trajectory_csv(runs, out, header)
    return 0


def cmd_check(args, out) -> int:
    m = load_model(args.model)
    kind = "pmc" if isinstance(m, PMC) else "prmc"
    out.write(f"model: {kind}, {m.n_states} states, {m.n_params} parameters, {m.n_transitions} transitions\n")
    if args.at:
        u = load_instantiation(args.at, m.params)
        notes = validate_model(m, u)
        if isinstance(m, PMC):
            pmc.check_terminal_reachability(instantiate_pmc(m, u).P, m.initial, m.terminal)
        for n in notes:
            out.write(f"warning: {n}\n")
        out.write("instantiation: valid\n")
    out.write("structure: valid\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prmc-sense", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads for per-parameter solves")
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate benchmark models")
    gsub = gen.add_subparsers(dest="family", required=True)
    grid = gsub.add_parser("grid", help="slippery grid world")
    grid.add_argument("--rows", type=int, required=True)
    grid.add_argument("--cols", type=int, required=True)
    grid.add_argument("--terrains", type=int, required=True)
    grid.add_argument("--seed", type=int, default=0)
    grid.add_argument("--terrain-seed", type=int, default=0)
    grid.add_argument("--layout", choices=["uniform", "biased"], default="uniform")
    grid.add_argument("--n-lo", type=int, default=500)
    grid.add_argument("--n-hi", type=int, default=1000)
    grid.add_argument("--beta", type=float, default=0.9)
    grid.add_argument("--robust", action="store_true", help="Hoeffding-interval prMC over sample sizes")
    grid.add_argument("--out", help="model file (default: stdout)")
    grid.add_argument("--at-out", help="write the analysis instantiation here")
    grid.add_argument("--true-out", help="write the true slip probabilities here")
    grid.set_defaults(func=cmd_gen)

    def model_cmd(name, helptext, func):
        sp_ = sub.add_parser(name, help=helptext)
        sp_.add_argument("model")
        sp_.add_argument("--at", help="instantiation JSON {name: value}")
        sp_.set_defaults(func=func)
        return sp_

    s = model_cmd("solve", "expected reward or robust solution", cmd_solve)
    s.add_argument("--robust-method", choices=["policy", "lp"], default="policy")
    g = model_cmd("grad", "all partial derivatives as CSV", cmd_grad)
    g.add_argument("--method", choices=["explicit", "adjoint"], default="explicit")
    g.add_argument("--check-fd", action="store_true")
    g.add_argument("--h", type=float, default=None, help="finite-difference step")
    t = model_cmd("topk", "k parameters with extremal derivatives", cmd_topk)
    t.add_argument("-k", type=int, required=True)
    t.add_argument("--lowest", action="store_true")
    t.add_argument("--values", action="store_true")
    t.add_argument("--method", choices=["reduced", "direct"], default="reduced")
    le = sub.add_parser("learn", help="sample-allocation loop on a pMC skeleton")
    le.add_argument("model")
    le.add_argument("--true", required=True, help="true parameter values JSON")
    le.add_argument("--strategy", choices=list(learning.STRATEGIES), required=True)
    le.add_argument("--steps", type=int, default=200)
    le.add_argument("--batch", type=int, default=25)
    le.add_argument("--seed", type=int, default=0)
    le.add_argument("--n0", type=int, default=100)
    le.add_argument("--beta", type=float, default=0.9)
    le.set_defaults(func=cmd_learn)
    model_cmd("check", "validate a model (and an instantiation)", cmd_check)
    return p


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except PrmcSenseError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
