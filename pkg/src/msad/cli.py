"""Command-line interface.

Exit status: 0 success, 1 usage or configuration error, 2 runtime failure
(I/O, malformed files, numerical breakdown), 3 violated mathematical invariant.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvariantViolation, MsadError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_INVARIANT = 0, 1, 2, 3

# primary metric per experiment, used for plots and the summary line
PRIMARY_METRIC = {
    "pde-error": "pde_error",
    "coupling": "p_coupling",
    "marginal": "l1_marginal",
    "lln": "p_exceed",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="msad", description="Multi-species moderately interacting particles and aggregation-diffusion PDEs.")
    p.add_argument("--threads", type=int, default=None, help="number of worker threads for force sums")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    k = sub.add_parser("kernel-table", help="tabulate the mollified kernel profile")
    k.add_argument("--s", type=float, required=True)
    k.add_argument("--d", type=int, required=True)
    k.add_argument("--eps", type=float, required=True)
    k.add_argument("--points", type=int, default=2048)
    k.add_argument("--r-max", type=float, default=96.0)
    k.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="run the particle system")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=None)

    c = sub.add_parser("couple", help="run particles together with mean-field copies")
    c.add_argument("--config", required=True)
    c.add_argument("--fields", default=None, help="directory of field files at every step (solved if omitted)")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--seed", type=int, default=None)

    pd = sub.add_parser("solve-pde", help="solve the intermediate or limiting PDE system")
    pd.add_argument("--config", required=True)
    pd.add_argument("--out-dir", required=True)
    g = pd.add_mutually_exclusive_group()
    g.add_argument("--mollified", action="store_true")
    g.add_argument("--limiting", action="store_true")

    sm = sub.add_parser("check-smallness", help="evaluate the smallness condition on the initial data")
    sm.add_argument("--config", required=True)
    sm.add_argument("--p", type=float, default=None)

    cp = sub.add_parser("compare", help="distances between two field files")
    cp.add_argument("--field-a", required=True)
    cp.add_argument("--field-b", required=True)

    cs = sub.add_parser("coupling-stats", help="coupling-event probabilities from a directory of couple runs")
    cs.add_argument("--runs-dir", required=True)
    cs.add_argument("--lambda", dest="lam", type=float, required=True)
    cs.add_argument("--ell", type=float, default=None)
    cs.add_argument("--s", type=float, default=None)

    r = sub.add_parser("rates", help="run a rate experiment")
    r.add_argument("--experiment", choices=sorted(PRIMARY_METRIC), required=True)
    r.add_argument("--config", required=True)
    r.add_argument("--out", default="rates.csv")
    r.add_argument("--plot-data", action="store_true", help="also write (x, y, yerr) triples and a PNG figure")
    r.add_argument("--seed", type=int, default=None)
    return p


def _configure_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be positive", "threads")
    if "numba" not in sys.modules:
        # the pool size is fixed when numba starts; allow more threads than cores
        os.environ["NUMBA_NUM_THREADS"] = str(max(n, int(os.environ.get("NUMBA_NUM_THREADS", "0") or 0)))
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _emit(line):
    sys.stdout.write(line + "\n")


# ----------------------------------------------------------------------------
# Subcommands

def cmd_kernel_table(args):
    from .io import write_kernel_table, write_manifest
    from .kernels import MollifierSpec, RieszSpec, build_kernel_table, measure_sup_bounds

    t0 = time.time()
    tab = build_kernel_table(RieszSpec(args.s, args.d), MollifierSpec.from_epsilon(args.eps, args.d),
                             args.points, r_max=args.r_max, cache=False)
    out = Path(args.out)
    write_kernel_table(tab, out)
    text = json.dumps({"s": args.s, "d": args.d, "eps": args.eps, "points": args.points, "r_max": args.r_max})
    write_manifest(out.parent, text, 0, [out], time.time() - t0)
    from .io import format_record

    for k in (1, 2):
        _emit(format_record(f"sup_grad{k}", {"eps": args.eps, "s": args.s}, measure_sup_bounds(tab, k), 0.0))
    return EXIT_OK


def cmd_simulate(args):
    from .config import parse_config
    from .io import write_manifest, write_snapshot
    from .particles import RunLog, simulate

    t0 = time.time()
    run = parse_config(args.config)
    seed = run.particles.seed if args.seed is None else args.seed
    sim = run.sim_config(seed=seed)
    rlog = RunLog()
    snaps = simulate(sim, run.table(sim.eps), rlog)
    out = Path(args.out_dir)
    files = []
    for st in snaps:
        f = out / f"snapshot_{st.step_index:06d}.msadp"
        write_snapshot(f, st.positions, st.t, st.step_index, seed)
        files.append(f)
    write_manifest(out, run.text, seed, files, time.time() - t0,
                   {"max_escape_fraction": rlog.max_escape_fraction})
    return EXIT_OK


def _load_timeline(directory, grid):
    from .io import read_field
    from .pde import DensityField, Timeline

    fields = []
    for f in sorted(Path(directory).glob("*.msadf")):
        vals, L, t = read_field(f)
        if vals.shape[1:] != grid.shape or abs(L - grid.L) > 1e-12:
            raise MsadError(f"field file {f} does not match the configured grid")
        fields.append(DensityField(vals, t, grid))
    fields.sort(key=lambda fl: fl.t)
    return Timeline(fields)


def cmd_couple(args):
    from .config import parse_config
    from .io import format_record, write_manifest, write_snapshot
    from .metrics import max_pair_distance
    from .particles import RunLog, simulate_coupled
    from .pde import gradient_kernel_hat

    t0 = time.time()
    run = parse_config(args.config)
    seed = run.particles.seed if args.seed is None else args.seed
    sim = run.sim_config(seed=seed)
    if args.fields:
        timeline = _load_timeline(args.fields, run.grid_obj())
    else:
        from .harness import _pde_at_steps

        timeline = _pde_at_steps(run, sim)
    Kh = gradient_kernel_hat(run.grid_obj(), run.model.s, sim.eps)
    rlog = RunLog()
    X, Xt = simulate_coupled(sim, run.table(sim.eps), timeline, Kh, rlog)
    out = Path(args.out_dir)
    files = []
    for a, b in zip(X, Xt):
        for tag, st in (("X", a), ("Xt", b)):
            f = out / f"{tag}_{st.step_index:06d}.msadp"
            write_snapshot(f, st.positions, st.t, st.step_index, seed)
            files.append(f)
        _emit(format_record("max_dist", {"N": sim.N, "t": f"{a.t:.6g}"}, max_pair_distance(a.positions, b.positions), 0.0))
    write_manifest(out, run.text, seed, files, time.time() - t0,
                   {"N": sim.N, "ell": run.particles.ell, "s": run.model.s, "wraps": rlog.wrap_count})
    return EXIT_OK


def cmd_solve_pde(args):
    from .config import parse_config
    from .io import format_record, write_field, write_manifest
    from .pde import linf_monitor, lp_norm_timeline, solve

    t0 = time.time()
    run = parse_config(args.config)
    mollified = run.pde.mollified if not (args.mollified or args.limiting) else args.mollified
    eps = None
    if mollified:
        eps = run.pde.eps if run.pde.eps is not None else run.particles.N ** (-run.particles.ell)
    tl = solve(run.pde_config(eps=eps))
    out = Path(args.out_dir)
    files = []
    for k, fl in enumerate(tl.fields):
        f = out / f"field_{k:04d}.msadf"
        write_field(f, fl.values, run.grid.L, fl.t)
        files.append(f)
    p = run.model.d + 1
    norms = lp_norm_timeline(tl, p)
    for fl, row in zip(tl.fields, norms):
        for al, v in enumerate(row):
            _emit(format_record(f"L{p}_norm", {"species": al, "t": f"{fl.t:.6g}"}, v, 0.0))
    lin = linf_monitor(tl)
    _emit(format_record("linf_growth_flag", {}, float(lin.suspicious), 0.0))
    write_manifest(out, run.text, 0, files, time.time() - t0,
                   {"eps": eps, "clipped_mass": tl.clipped_mass, "boundary_mass": tl.boundary_mass})
    return EXIT_OK


def cmd_check_smallness(args):
    from .config import parse_config
    from .io import format_record
    from .pde import check_smallness

    run = parse_config(args.config)
    grid = run.grid_obj()
    rep = check_smallness(run.initial_fields(grid), grid, run.a_matrix(), run.sigma_vec(), run.model.s, args.p)
    for al in range(len(rep.margin)):
        prm = {"species": al, "p": rep.p}
        _emit(format_record("smallness_lhs", prm, rep.lhs[al], 0.0))
        _emit(format_record("smallness_rhs", prm, rep.rhs[al], 0.0))
        _emit(format_record("smallness_margin", prm, rep.margin[al], 0.0))
    _emit(format_record("C_HLS", {}, rep.c_hls, 0.0))
    _emit(format_record("C_GNS", {}, rep.c_gns, 0.0))
    _emit(format_record("smallness_satisfied", {}, float(rep.satisfied), 0.0))
    return EXIT_OK


def cmd_compare(args):
    from .io import format_record, read_field
    from .metrics import compare_fields
    from .pde import Grid

    a, La, ta = read_field(args.field_a)
    b, Lb, tb = read_field(args.field_b)
    if a.shape != b.shape or La != Lb:
        raise MsadError("field files live on different grids")
    grid = Grid(a.ndim - 1, a.shape[1], La)
    for al in range(a.shape[0]):
        rep = compare_fields(a[al], b[al], grid, smoothed=False)
        srep = compare_fields(a[al], b[al], grid, smoothed=True)
        prm = {"species": al, "t_a": ta, "t_b": tb}
        _emit(format_record("rel_entropy", prm, rep.rel_entropy, 0.0))
        _emit(format_record("rel_entropy_smoothed", prm, srep.rel_entropy, 0.0))
        _emit(format_record("l1", prm, rep.l1, 0.0))
        _emit(format_record("l2", prm, rep.l2, 0.0))
        _emit(format_record("ckp_margin", prm, rep.ckp_margin, 0.0))
        if rep.ckp_margin < -1e-9:
            raise InvariantViolation("CKP inequality violated between field files")
    return EXIT_OK


def cmd_coupling_stats(args):
    from .io import format_record, read_snapshot
    from .metrics import coupling_event, max_pair_distance

    runs = sorted(p for p in Path(args.runs_dir).iterdir() if p.is_dir())
    if not runs:
        raise MsadError(f"no run directories under {args.runs_dir}")
    dists, times, N, ell, s = [], None, None, args.ell, args.s
    for rd in runs:
        man = json.loads((rd / "manifest.json").read_text())
        ell = man.get("ell", ell) if args.ell is None else args.ell
        s = man.get("s", s) if args.s is None else args.s
        row, tt = [], []
        for fx in sorted(rd.glob("X_*.msadp")):
            X, t, _, _ = read_snapshot(fx)
            Xt, _, _, _ = read_snapshot(fx.with_name("Xt_" + fx.name[2:]))
            row.append(max_pair_distance(X, Xt))
            tt.append(t)
            N = X.shape[1]
        dists.append(row)
        times = tt
    if ell is None or s is None:
        raise ConfigError("ell and s are needed (pass --ell/--s or use couple manifests)", "coupling-stats")
    stats = coupling_event(np.array(dists), times, N, args.lam, ell, s)
    for t, p, lo, hi in zip(stats.times, stats.probability, stats.ci_low, stats.ci_high):
        prm = {"N": N, "lambda": args.lam, "t": f"{t:.6g}", "ci": f"[{lo:.4g},{hi:.4g}]"}
        _emit(format_record("p_coupling", prm, p, float(np.sqrt(p * (1 - p) / stats.reps))))
    return EXIT_OK


def cmd_rates(args):
    from .config import parse_config
    from .harness import EXPERIMENTS, predicted_zeta
    from .io import format_record, write_manifest

    t0 = time.time()
    run = parse_config(args.config)
    seed = run.particles.seed if args.seed is None else args.seed
    run.particles.seed = seed
    fn = EXPERIMENTS[args.experiment]
    table = fn(run)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table.to_csv())
    files = [out]
    metric = PRIMARY_METRIC[args.experiment]
    extra = {"experiment": args.experiment, "notes": _jsonable(table.notes),
             "fits": {k: vars(v) for k, v in table.fits.items()}}
    if args.experiment == "marginal":
        pred = predicted_zeta(run.particles.ell, run.model.s, 0.0, run.experiment.improved_rate)
        extra["predicted_zeta"] = pred.zeta
    if args.plot_data:
        from .plotting import plot_rate_table

        plot_metric = {"coupling": "mean_max_dist", "lln": "mean_max_dev"}.get(args.experiment, metric)
        x, y, e = table.series(plot_metric)
        pdata = out.with_name(out.stem + "_plot.tsv")
        pdata.write_text("x\ty\tyerr\n" + "".join(f"{a!r}\t{b!r}\t{c!r}\n" for a, b, c in zip(x, y, e)))
        files.append(pdata)
        if np.all(y > 0):
            pred_slope = {"pde-error": 2.0}.get(args.experiment)
            if args.experiment == "marginal":
                pred_slope = -extra["predicted_zeta"]
            png = out.with_name(out.stem + ".png")
            plot_rate_table(table, plot_metric, png, pred_slope)
            files.append(png)
    for r in table.rows:
        _emit(format_record(r.metric, {"experiment": r.experiment, "scale": f"{r.scale:g}"}, r.value, r.stderr))
    for name, fit in table.fits.items():
        _emit(format_record(f"slope:{name}", {"r2": f"{fit.r2:.4f}"}, fit.slope, fit.stderr))
    if "predicted_zeta" in extra:
        _emit(format_record("predicted_zeta", {"ell": run.particles.ell, "s": run.model.s}, extra["predicted_zeta"], 0.0))
    write_manifest(out.parent, run.text, seed, files, time.time() - t0, extra)
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


COMMANDS = {
    "kernel-table": cmd_kernel_table,
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "solve-pde": cmd_solve_pde,
    "check-smallness": cmd_check_smallness,
    "compare": cmd_compare,
    "coupling-stats": cmd_coupling_stats,
    "rates": cmd_rates,
}


def dispatch(argv=None):
    """Parse ``argv`` and run the subcommand; returns the exit status."""
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _configure_threads(args.threads)
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        tag = f" [{exc.constraint}]" if exc.constraint else ""
        print(f"msad: configuration error{tag}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"msad: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (MsadError, OSError, ValueError) as exc:
        print(f"msad: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
