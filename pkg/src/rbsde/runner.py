"""Configuration-driven experiment pipeline: geometry report, solver
schedule, checks, and their CSV/JSON outputs."""
from __future__ import annotations

import copy
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import validation as V
from .catalog.registry import build_domain, build_generator, build_terminal
from .errors import (ConfigError, ContractionViolated, InfeasibleSpec, InsufficientData, NotStarShaped, ParameterSearchFailed,
                     PicardDivergence, ScheduleExhausted, TerminalOutsideDomain, VerificationFailed,
                     RBSDEError)
from .geometry.constants import (check_hessian_psi_sq, check_smallness, compute_gamma, estimate_r0)
from .geometry.pseudo import build_pseudo_distance
from .lattice import BrownianLattice, ForwardDiffusion, sample_paths
from .solver import PenalizationConfig, extract_k_path, solve_reflected, write_convergence_csv

log = logging.getLogger(__name__)

OUTPUT_ENV = "RBSDE_OUTPUT_DIR"
DEFAULT_OUTPUT = "rbsde_output"

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_GEOMETRY, EXIT_SOLVER = 0, 1, 2, 3, 4

ALL_CHECKS = ("oracle", "oracle_error", "convex_sanity", "skorokhod", "var_domination", "distance_rate",
              "holder", "exp_moments", "gamma_martingale", "stability")

DEFAULTS = {
    "seed": 0,
    "domain": {"name": "ball"},
    "core": {"name": "default"},
    "terminal": {"name": "constant_point"},
    "generator": {"name": "zero"},
    "lattice": {"T": 1.0, "N": 100, "dprime": 1, "x0": [], "mode": "identity"},
    "solver": {"n_schedule": [4, 8, 16, 32, 64], "stop_tol": 0.0, "cap_psi": 0.0, "cap_zsq": 0.0,
               "picard_tol": 1e-12, "picard_max_iters": 200, "method": "newton"},
    "paths": {"count": 1000, "dump": False},
    "geometry": {"smallness_case": "II", "theta": 1.0, "f_sign_ok": "auto", "r0_samples": 100_000,
                 "gamma_samples": 20_000, "gamma_subset": "auto"},
    "checks": {"run": [], "gate": "all", "skorokhod_processes": 200, "skorokhod_paths": 200,
               "holder_alpha": 0.5, "holder_min_n": 16, "distance_gate": -0.8, "exp_theta": 2.0,
               "exp_p": 1.1, "exp_paths": 10_000, "stability_deltas": [0.1, 0.05, 0.025],
               "oracle_tol": 5e-2, "var_slack": 0.05, "var_equality": False, "sanity_tol": 1e-8},
    "output": {"dir": "", "dump_fields": False},
}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(cfg: dict, assignment: str):
    """Apply ``section.key=value`` (value in TOML syntax, bare words are strings)."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects section.key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"empty key in {assignment!r}")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {p} is not a section")
    node[parts[-1]] = _parse_value(text.strip())


def bundled_configs():
    root = resources.files("rbsde") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def read_config(source: str) -> dict:
    """Parse a config file path or the name of a bundled config."""
    path = Path(source)
    try:
        if path.is_file():
            text = path.read_text()
        else:
            name = source[:-5] if source.endswith(".toml") else source
            res = resources.files("rbsde") / "configs" / f"{name}.toml"
            if not res.is_file():
                raise ConfigError(f"no config file {source!r} and no bundled config of that name "
                                  f"(bundled: {', '.join(bundled_configs())})")
            text = res.read_text()
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from exc


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def load(cls, source: str, overrides=()) -> "RunConfig":
        return cls.from_dict(read_config(source), overrides)

    @classmethod
    def from_dict(cls, data: dict, overrides=()) -> "RunConfig":
        data = copy.deepcopy(data)
        for o in overrides:
            apply_override(data, o)
        merged = {}
        unknown = sorted(set(data) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        for key, default in DEFAULTS.items():
            val = data.get(key, copy.deepcopy(default))
            if isinstance(default, dict):
                if not isinstance(val, dict):
                    raise ConfigError(f"[{key}] must be a section")
                if key in ("solver", "paths", "geometry", "checks", "output", "lattice"):
                    bad = sorted(set(val) - set(default))
                    if bad:
                        raise ConfigError(f"unknown key(s) in [{key}]: {', '.join(bad)}")
                    val = {**default, **val}
            merged[key] = val
        cfg = cls(merged)
        cfg.validate()
        return cfg

    def validate(self):
        r = self.raw
        lat = r["lattice"]
        if not isinstance(lat["N"], int) or lat["N"] < 2:
            raise ConfigError("lattice.N must be an integer >= 2")
        if lat["dprime"] not in (1, 2):
            raise ConfigError("lattice.dprime must be 1 or 2")
        if lat["mode"] != "identity":
            raise ConfigError("configuration runs support lattice.mode = 'identity' only")
        sched = r["solver"]["n_schedule"]
        if not isinstance(sched, list) or not sched:
            raise ConfigError("solver.n_schedule must be a non-empty list")
        if any(not isinstance(n, int) or n < 1 for n in sched) or sorted(set(sched)) != sched:
            raise ConfigError("solver.n_schedule must be strictly increasing positive integers")
        if r["core"].get("name", "default") != "default" or set(r["core"]) - {"name"}:
            raise ConfigError("only the catalog's default core is supported ([core] name = \"default\")")
        if "name" not in r["domain"] or "name" not in r["terminal"]:
            raise ConfigError("[domain] and [terminal] need a name")
        bad = sorted(set(r["checks"]["run"]) - set(ALL_CHECKS))
        if bad:
            raise ConfigError(f"unknown check(s): {', '.join(bad)}")
        if r["paths"]["count"] < 1:
            raise ConfigError("paths.count must be >= 1")
        if not isinstance(r["seed"], int):
            raise ConfigError("seed must be an integer")

    def section(self, name):
        return self.raw[name]

    def params(self, name):
        return {k: v for k, v in self.raw[name].items() if k != "name"}

    def lattice(self) -> BrownianLattice:
        lat = self.raw["lattice"]
        return BrownianLattice(float(lat["T"]), int(lat["N"]), int(lat["dprime"]))

    def diffusion(self) -> ForwardDiffusion:
        x0 = self.raw["lattice"]["x0"]
        return ForwardDiffusion(x0=np.asarray(x0, float) if x0 else None, mode="identity")

    def penalization(self) -> PenalizationConfig:
        s = self.raw["solver"]
        cap = lambda v: None if not v else (np.inf if v == "inf" else float(v))  # noqa: E731
        return PenalizationConfig(n=int(s["n_schedule"][0]), cap_psi=cap(s["cap_psi"]), cap_zsq=cap(s["cap_zsq"]),
                                  picard_tol=float(s["picard_tol"]), picard_max_iters=int(s["picard_max_iters"]),
                                  method=s["method"])

    def output_dir(self, override: Optional[str] = None) -> Path:
        d = override or self.raw["output"]["dir"] or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
        return Path(d)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def write_json(path: Path, obj):
    path.write_text(json.dumps(V._clean(obj), sort_keys=True, indent=2) + "\n")


def dump_fields(path: Path, fields):
    """One row per node: step, node index per axis, Y components, Z components."""
    lat = fields.lattice
    d, dp = fields.dim, lat.dprime
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step"] + [f"node_{a}" for a in range(dp)] + [f"y_{i}" for i in range(d)]
                    + [f"z_{i}{j}" for i in range(d) for j in range(dp)])
        for k in range(lat.N + 1):
            Y = fields.Y[k]
            Z = fields.Z[k] if k < lat.N else np.zeros(Y.shape + (dp,))
            for idx in np.ndindex(*lat.shape(k)):
                wr.writerow([k, *idx] + [format(v, ".17g") for v in Y[idx]]
                            + [format(v, ".17g") for v in Z[idx].ravel()])


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class GeometryStage:
    geo: object
    pseudo: object
    terminal: object
    generator: object
    report: dict
    admissible: bool
    r0: float = float("nan")
    reason: str = ""


def geometry_stage(cfg: RunConfig) -> GeometryStage:
    """Build the domain, pseudo-distance, R0, gamma and the smallness report."""
    seed = cfg.raw["seed"]
    gcfg = cfg.section("geometry")
    report = {"domain": cfg.raw["domain"], "seed": seed}
    try:
        geo = build_domain(cfg.raw["domain"]["name"], cfg.params("domain"))
    except (InfeasibleSpec, NotStarShaped) as exc:
        report.update(admissible=False, reason=str(exc))
        return GeometryStage(None, None, None, None, report, False, reason=str(exc))
    lattice = cfg.lattice()
    terminal = build_terminal(cfg.raw["terminal"]["name"], cfg.params("terminal"), geo, lattice.dprime)
    generator = build_generator(cfg.raw["generator"]["name"], cfg.params("generator"))
    report["dim"] = geo.domain.dim
    try:
        pseudo = build_pseudo_distance(geo.domain, geo.core, seed=seed)
    except ParameterSearchFailed as exc:
        report.update(admissible=False, reason=str(exc))
        return GeometryStage(geo, None, terminal, generator, report, False, reason=str(exc))
    report["pseudo_distance"] = {"R": pseudo.R, "eps": pseudo.eps, "kappa": pseudo.kappa,
                                 "margin": pseudo.margin, "c_low": pseudo.c_low, "c_high": pseudo.c_high,
                                 "grad_floor": pseudo.grad_floor}
    try:
        r0 = estimate_r0(geo.domain, n_samples=int(gcfg["r0_samples"]), seed=seed)
        report["r0_verified"] = True
    except VerificationFailed as exc:
        report.update(admissible=False, r0_verified=False, reason=str(exc))
        return GeometryStage(geo, pseudo, terminal, generator, report, False, reason=str(exc))
    gamma = compute_gamma(geo.domain, geo.core, n_samples=int(gcfg["gamma_samples"]), seed=seed)
    report.update(r0=r0, gamma=gamma)
    gamma_small = gamma
    subset = gcfg["gamma_subset"]
    if geo.sector is not None and subset in ("auto", "arc"):
        gamma_small = compute_gamma(geo.domain, geo.core, boundary_subset=geo.sector.inner_arc_sampler())
        report["gamma_inner_arc"] = gamma_small
    report["hessian_psi_sq_constant"] = check_hessian_psi_sq(pseudo, seed=seed)

    X_T = cfg.diffusion().values(lattice)[-1]
    xi = terminal.g(X_T).reshape(-1, geo.domain.dim)
    if terminal.nu is not None and not terminal.nu.markov:
        # the tie-broken value at W_T = 0 uses the last move; both options are arc points
        xi = np.concatenate([xi, geo.sector.arc_point(np.array([-terminal.nu.bound, terminal.nu.bound]))])
    f_sign_ok = gcfg["f_sign_ok"]
    if f_sign_ok == "auto":
        f_sign_ok = bool(generator.is_zero)
    case = str(gcfg["smallness_case"])
    xi_bound = None
    if case.upper() in ("I", "1"):
        xi_bound = float(np.max(np.maximum(geo.core.phi_c(xi), 0.0)))
    elif case.upper() in ("III", "3"):
        xi_bound = float(np.max(np.linalg.norm(xi, axis=-1)))
    try:
        small = check_smallness(geo.domain, geo.core, xi_bound, f_sign_ok, float(gcfg["theta"]), case,
                                gamma=gamma_small, r0=r0, seed=seed)
        report["smallness"] = {**small.to_dict(), "pass": small.smallness_pass}
    except RBSDEError as exc:
        report["smallness"] = {"pass": False, "requested_case": case, "error": str(exc)}
    admissible = gamma > 0 and r0 > 0
    report["admissible"] = admissible
    if not admissible:
        report["reason"] = f"gamma = {gamma:.6g} <= 0"
    return GeometryStage(geo, pseudo, terminal, generator, report, admissible, r0=r0,
                         reason=report.get("reason", ""))


def _run_checks(cfg, stage, run, lattice, paths, outdir):
    c = cfg.section("checks")
    names = c["run"]
    gate = list(names) if c["gate"] == "all" else list(c["gate"])
    pseudo, geo, r0 = stage.pseudo, stage.geo, stage.r0
    fields = run.fields
    sol = run.solution
    F = stage.generator
    out = {}

    def record(name, rep):
        d = rep.to_dict()
        d["gated"] = name in gate
        out[name] = d

    oracle = None
    if stage.terminal.nu is not None and ({"oracle", "oracle_error"} & set(names)):
        if lattice.dprime != 1:
            raise ConfigError("the circle oracle needs lattice.dprime = 1")
        oracle = V.circle_oracle(geo.sector.spec.alpha, stage.terminal.nu, lattice)

    def one(name):
        if name == "oracle":
            if oracle is None:
                raise ConfigError("the oracle check needs an arc terminal on the sector domain")
            norm_err = max(float(np.max(np.abs(np.linalg.norm(oracle.Y(k), axis=-1) - 1)))
                           for k in range(lattice.N))
            gap = abs(oracle.expected_var - oracle.closed_form_var)
            rep = V.CheckReport("oracle", bool(gap <= 1e-10 and norm_err <= 1e-12), max(gap, norm_err), 1e-10,
                                sum(lattice.n_nodes(k) for k in range(lattice.N)),
                                {"expected_var": oracle.expected_var, "closed_form_var": oracle.closed_form_var,
                                 "unit_norm_error": norm_err, "var_bound": oracle.var_bound()})
            record(name, rep)
        elif name == "oracle_error":
            if oracle is None:
                raise ConfigError("the oracle_error check needs an arc terminal on the sector domain")
            err = V.oracle_field_error(oracle, geo.sector, fields)
            record(name, V._report("oracle_error", err, c["oracle_tol"], lattice.N, {"n": fields.n}))
        elif name == "convex_sanity":
            zmax = max(float(np.max(np.abs(run.history[n].Z[k]))) for n in run.history
                       for k in range(lattice.N))
            vmax = 0.0
            for n, f in run.history.items():
                vmax = max(vmax, float(extract_k_path(f, paths, pseudo, F).var[:, -1].max()))
            record(name, V._report("convex_sanity", max(zmax, vmax), c["sanity_tol"], len(run.history),
                                   {"z_max": zmax, "var_max": vmax}))
        elif name == "skorokhod":
            record(name, V.check_skorokhod(sol, pseudo, r0, int(c["skorokhod_processes"]), cfg.raw["seed"],
                                           max_paths=int(c["skorokhod_paths"])))
        elif name == "var_domination":
            record(name, V.check_var_domination(sol, pseudo, r0, F, rel_slack=float(c["var_slack"]),
                                                equality=bool(c["var_equality"])))
        elif name == "distance_rate":
            record(name, V.check_distance_rate(run.table, gate=float(c["distance_gate"])))
        elif name == "holder":
            sel = {n: f for n, f in run.history.items() if n >= int(c["holder_min_n"])}
            record(name, V.check_holder(sel, float(c["holder_alpha"])))
        elif name == "exp_moments":
            big = sample_paths(lattice, int(c["exp_paths"]), cfg.raw["seed"] + 1)
            var_T = extract_k_path(fields, big, pseudo, F).var[:, -1]
            record(name, V.estimate_exp_moments(var_T, float(c["exp_theta"]), float(c["exp_p"]), r0))
        elif name == "gamma_martingale":
            band = V.boundary_band(pseudo, fields)
            record(name, V.gamma_martingale_check(sol.Y, sol.Z, sol.dvar, sol.dK, geo.domain, lattice.dt,
                                                  boundary_tol=max(band, 1e-12),
                                                  rel_slack=float(c["var_slack"]), angle_tol=1e-6))
        elif name == "stability":
            record(name, V.stability_experiment(pseudo, stage.terminal.scaled, lattice, fields.config, paths,
                                                [float(x) for x in c["stability_deltas"]], F,
                                                cfg.diffusion()))

    for name in names:
        try:
            one(name)
        except InsufficientData as exc:
            # too little data to evaluate counts as a failed check, not a crash
            out[name] = {"name": name, "passed": False, "reason": str(exc), "gated": name in gate}
    return out


def run_experiment(cfg: RunConfig, outdir: Path) -> int:
    """Geometry report, solver schedule and checks; returns the exit code."""
    outdir.mkdir(parents=True, exist_ok=True)
    stage = geometry_stage(cfg)
    write_json(outdir / "geometry.json", stage.report)
    if not stage.admissible:
        log.error("geometry inadmissible: %s", stage.reason)
        return EXIT_GEOMETRY
    lattice = cfg.lattice()
    nu = stage.terminal.nu
    if nu is not None and not nu.markov and lattice.N % 2 == 0:
        raise ConfigError(f"terminal '{stage.terminal.name}' breaks the W_T = 0 tie with the last move, "
                          "which a node-wise solve cannot see; use an odd lattice.N")
    s = cfg.section("solver")
    paths = sample_paths(lattice, int(cfg.raw["paths"]["count"]), cfg.raw["seed"])
    if cfg.raw["paths"]["dump"]:
        paths.to_csv(outdir / "paths.csv")
    stop_tol = float(s["stop_tol"])
    try:
        run = solve_reflected(stage.pseudo, stage.terminal.g, stage.generator, cfg.diffusion(), lattice,
                              s["n_schedule"], stop_tol=stop_tol, config=cfg.penalization(), paths=paths,
                              strict=stop_tol > 0, alpha_prime=float(cfg.raw["checks"]["holder_alpha"]))
    except TerminalOutsideDomain as exc:
        raise ConfigError(str(exc)) from exc
    except ScheduleExhausted as exc:
        write_convergence_csv(exc.result.table, outdir / "convergence.csv")
        log.error("%s", exc)
        return EXIT_SOLVER
    except (PicardDivergence, ContractionViolated) as exc:
        log.error("%s", exc)
        return EXIT_SOLVER
    write_convergence_csv(run.table, outdir / "convergence.csv")
    if cfg.raw["output"]["dump_fields"]:
        dump_fields(outdir / "fields.csv", run.fields)
    checks = _run_checks(cfg, stage, run, lattice, paths, outdir)
    failed = sorted(n for n, r in checks.items() if r["gated"] and not r["passed"])
    summary = {"checks": checks, "failed": failed, "all_passed": not failed,
               "final_n": run.fields.n, "converged": run.converged,
               "smallness_pass": stage.report.get("smallness", {}).get("pass")}
    write_json(outdir / "checks.json", summary)
    return EXIT_CHECKS if failed else EXIT_OK
