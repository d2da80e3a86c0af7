"""Command line entry point.

    rbsde run CONFIG [--set section.key=value ...] [--out DIR] [--threads N]
    rbsde list
    rbsde geometry CONFIG [--set ...] [--out DIR]
    rbsde oracle [CONFIG] [--alpha A] [--N N] [--terminal NAME] [--out DIR]

CONFIG is a TOML file or the name of a bundled config.  Outputs go to
--out, else output.dir from the config, else $RBSDE_OUTPUT_DIR, else
./rbsde_output.  Exit codes: 0 success, 1 gated check failed, 2 config
error, 3 inadmissible geometry, 4 solver did not converge.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _parser():
    p = argparse.ArgumentParser(prog="rbsde", description="Penalization solver for reflected BSDEs")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config_required=True):
        if config_required:
            sp.add_argument("config", help="TOML file or bundled config name")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--out", default=None, help="output directory")

    common(sub.add_parser("run", help="geometry report, solver schedule and checks"))
    sub.add_parser("list", help="list catalog domains, terminals and generators")
    common(sub.add_parser("geometry", help="geometry report only"))
    op = sub.add_parser("oracle", help="circle oracle only")
    op.add_argument("config", nargs="?", default=None)
    op.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    op.add_argument("--out", default=None)
    op.add_argument("--alpha", type=float, default=None)
    op.add_argument("--N", type=int, default=None)
    op.add_argument("--terminal", default=None, help="arc_sign, arc_smooth, arc_point_pair or arc_constant")
    return p


def _oracle(args, runner):
    from .catalog.registry import TERMINALS
    from .errors import ConfigError
    from .lattice import BrownianLattice
    from . import validation as V

    if args.config:
        cfg = runner.RunConfig.load(args.config, args.overrides)
        term = cfg.raw["terminal"]
        name, params = term["name"], {k: v for k, v in term.items() if k != "name"}
        lat = cfg.lattice()
        outdir = cfg.output_dir(args.out)
    else:
        name, params, lat = "arc_sign", {}, BrownianLattice(1.0, 1000, 1)
        outdir = runner.RunConfig.from_dict({}).output_dir(args.out)
    name = args.terminal or name
    if args.N is not None:
        lat = BrownianLattice(lat.T, args.N, 1)
    if args.alpha is not None:
        params["alpha"] = args.alpha
    makers = {"arc_sign": V.sign_terminal, "arc_smooth": V.smooth_terminal}
    if name not in TERMINALS or not name.startswith("arc_"):
        raise ConfigError(f"the oracle needs an arc terminal, got {name!r}")
    schema = {**TERMINALS[name].schema, **params}
    alpha = float(schema["alpha"])
    if name in makers:
        nu = makers[name](alpha)
    elif name == "arc_point_pair":
        nu = V.arc_point_pair(alpha, float(schema["p_up"]))
    else:
        nu = V.constant_terminal(float(schema["theta"]))
    if lat.dprime != 1:
        raise ConfigError("the circle oracle needs lattice.dprime = 1")
    oracle = V.circle_oracle(alpha, nu, lat)
    norm_err = max(float(abs(abs(oracle.Y(k)[:, 0] + 1j * oracle.Y(k)[:, 1]) - 1).max()) for k in range(lat.N))
    outdir.mkdir(parents=True, exist_ok=True)
    runner.write_json(outdir / "oracle.json", {
        "terminal": name, "alpha": alpha, "N": lat.N, "T": lat.T,
        "expected_var": oracle.expected_var, "closed_form_var": oracle.closed_form_var,
        "unit_norm_error": norm_err, "var_bound": oracle.var_bound(),
        "theta0": float(oracle.theta[0][0]), "eta0": float(oracle.eta[0][0])})
    print(f"E[int dVar] = {oracle.expected_var:.17g} (closed form {oracle.closed_form_var:.17g})")
    return runner.EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        # must happen before numpy is imported to reach the BLAS pools
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    import warnings
    warnings.simplefilter("ignore", RuntimeWarning)

    from . import runner
    from .errors import ConfigError

    try:
        if args.verb == "list":
            from .catalog.registry import list_catalog
            sys.stdout.write(list_catalog())
            return runner.EXIT_OK
        if args.verb == "oracle":
            return _oracle(args, runner)
        cfg = runner.RunConfig.load(args.config, args.overrides)
        outdir = cfg.output_dir(args.out)
        if args.verb == "geometry":
            outdir.mkdir(parents=True, exist_ok=True)
            stage = runner.geometry_stage(cfg)
            runner.write_json(outdir / "geometry.json", stage.report)
            return runner.EXIT_OK if stage.admissible else runner.EXIT_GEOMETRY
        code = runner.run_experiment(cfg, outdir)
        print(f"rbsde run: exit {code}, outputs in {outdir}")
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return runner.EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
