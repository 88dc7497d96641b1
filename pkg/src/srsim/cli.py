"""Command line entry points: simulate, decompose, validate, eigen."""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

EXIT_CODES = {"E_CONFIG": 2, "E_SOLVER": 3, "E_EXIT_EARLY": 4, "E_IO": 5}


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _threads():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    n = os.environ.get("SRSIM_THREADS", "1")
    try:
        n = max(1, int(n))
    except ValueError:
        raise CliError("E_CONFIG", f"SRSIM_THREADS must be an integer, got {n!r}") from None
    return threadpool_limits(n)


def _read_config(path):
    from .galerkin import ConfigError
    from .io import parse_config

    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError("E_IO", f"cannot read config: {e}") from None
    try:
        return parse_config(text)
    except ConfigError as e:
        raise CliError("E_CONFIG", str(e)) from None


def cmd_simulate(args):
    from .diagnostics import emit_energy_csv, energy_records, envelope_constant, gronwall_fit
    from .galerkin import ConfigError, GalerkinModel, run
    from .io import read_checkpoint, write_checkpoint, write_field

    cfg = _read_config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError("E_IO", str(e)) from None
    try:
        model = GalerkinModel(cfg)
    except ConfigError as e:
        raise CliError("E_CONFIG", str(e)) from None
    start = history = None
    if args.checkpoint and Path(args.checkpoint).exists():
        try:
            start, history = read_checkpoint(args.checkpoint, cfg)
        except ConfigError as e:
            raise CliError("E_CONFIG", str(e)) from None
        except (OSError, ValueError) as e:
            raise CliError("E_IO", str(e)) from None
    run_cfg = cfg
    if args.until is not None:
        from dataclasses import replace

        run_cfg = replace(cfg, t_end=min(cfg.t_end, args.until))
    traj = run(run_cfg, model, start=start, history=history)
    recs = energy_records(traj, model.bp.betas, model.dt, cfg.cadence)
    try:
        emit_energy_csv(recs, out / "energy.csv")
        if args.checkpoint:
            write_checkpoint(args.checkpoint, cfg, traj.final, model.sizes, traj)
        W, Th, R, u = model.fields(traj.final)
        write_field(out / "W.srf", model.grid, W, "symmetric")
        write_field(out / "Theta.srf", model.grid, Th, "skew")
        write_field(out / "RW.srf", model.grid, R @ W, "general")
        write_field(out / "u.srf", model.grid, u, "vector")
        c1, c2 = gronwall_fit(traj.t, traj.E)
        C = envelope_constant(traj.t, traj.dev_inf)
        ex = traj.exit
        lines = [
            f"exited={int(ex.exited)}",
            f"t_hat={ex.t_hat!r}",
            f"invariant={ex.invariant}",
            f"location={','.join(repr(v) for v in ex.location) if ex.location else None}",
            f"t_final={traj.final.t!r}",
            f"steps={traj.final.step}",
            f"dt={model.dt!r}",
            f"gronwall_c1={c1!r}",
            f"gronwall_c2={c2!r}",
            f"envelope_C={C!r}",
        ]
        (out / "report.txt").write_text("\n".join(lines) + "\n")
    except OSError as e:
        raise CliError("E_IO", str(e)) from None
    print(f"wrote {out / 'energy.csv'} ({len(recs)} rows)")
    if traj.exit.exited:
        raise CliError("E_EXIT_EARLY", f"margin breach ({traj.exit.invariant}) at t={traj.exit.t_hat:.6g}")
    return 0


def cmd_decompose(args):
    from .field import BoundaryPartition
    from .helmholtz import HodgeDecomposer
    from .io import FormatError, read_field, write_field

    try:
        grid, T, tag = read_field(args.input)
    except (OSError, FormatError) as e:
        raise CliError("E_IO", str(e)) from None
    if T.shape != grid.shape + (3, 3):
        raise CliError("E_IO", "decompose needs a tensor snapshot")
    try:
        bc = BoundaryPartition.from_spec(grid, args.bc)
    except ValueError as e:
        raise CliError("E_CONFIG", str(e)) from None
    hd = HodgeDecomposer(grid, bc)
    split = hd.decompose_tensor(T)
    div = float(np.abs(hd.curl_solver.divergence(split.Z)).max())
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_field(out / "u.srf", grid, split.u_nodes(hd.cx), "vector")
        write_field(out / "Z.srf", grid, split.Z_nodes(hd.cx), "divergence_free")
        with open(out / "residuals.csv", "w") as fh:
            fh.write("quantity,value\n")
            fh.write(f"reconstruction_residual,{split.reconstruction_residual!r}\n")
            fh.write(f"orthogonality_residual,{split.orthogonality_residual!r}\n")
            fh.write(f"weak_divergence_Z,{div!r}\n")
    except OSError as e:
        raise CliError("E_IO", str(e)) from None
    print(f"reconstruction_residual={split.reconstruction_residual:.3e}")
    return 0


def cmd_validate(args):
    from .diagnostics import run_suites

    checks = run_suites(args.suite, seed=args.seed)
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


def cmd_eigen(args):
    from .elliptic import EigenGuardError, MixedLaplace, ClampedFourthOrder, eigenpairs_laplace_mixed, eigenpairs_upsilon
    from .field import BoundaryPartition, Grid
    from .mimetic import MimeticComplex

    cfg = _read_config(args.config) if args.config else None
    if cfg is None:
        from .galerkin import RunConfig

        cfg = RunConfig()
    grid = Grid(cfg.n, cfg.lengths)
    try:
        bc = BoundaryPartition.from_spec(grid, cfg.dirichlet)
        ups = eigenpairs_upsilon(ClampedFourthOrder(grid, bc), args.m)
        lap = eigenpairs_laplace_mixed(MixedLaplace(MimeticComplex(grid, bc)), args.m)
    except EigenGuardError as e:
        raise CliError("E_CONFIG", str(e)) from None
    lines = ["family,index,value,residual"]
    lines += [f"upsilon,{i},{float(v)!r},{float(r)!r}" for i, (v, r) in enumerate(zip(ups.values, ups.residuals))]
    lines += [f"laplace,{i},{float(v)!r},{float(r)!r}" for i, (v, r) in enumerate(zip(lap.values, lap.residuals))]
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as e:
            raise CliError("E_IO", str(e)) from None
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="srsim", description="stretch-rotation visco-elastic simulator")
    sub = p.add_subparsers(dest="cmd", required=True)
    s = sub.add_parser("simulate", help="run a scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", help="resume from this file if it exists; written at the end")
    s.add_argument("--out", default="out")
    s.add_argument("--until", type=float, help="stop at this model time (for checkpointing)")
    s.set_defaults(fn=cmd_simulate)
    d = sub.add_parser("decompose", help="split a tensor snapshot T into grad u + curl Z")
    d.add_argument("--input", required=True)
    d.add_argument("--bc", default="x0")
    d.add_argument("--out", default="out")
    d.set_defaults(fn=cmd_decompose)
    v = sub.add_parser("validate", help="run the built-in property suites")
    v.add_argument("--suite", choices=["core", "convex", "elliptic", "all"], default="all")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(fn=cmd_validate)
    e = sub.add_parser("eigen", help="dump basis spectra as CSV")
    e.add_argument("--m", type=int, required=True)
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eigen)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    from .elliptic import SolverError

    try:
        with _threads():
            return args.fn(args)
    except CliError as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        return EXIT_CODES[e.code]
    except SolverError as e:
        print(f"E_SOLVER: {e}", file=sys.stderr)
        return EXIT_CODES["E_SOLVER"]


if __name__ == "__main__":
    sys.exit(main())
