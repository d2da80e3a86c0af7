"""Named domains, terminal conditions and generators used by configuration
files, with their parameter schemas and defaults."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from ..errors import ConfigError
from ..solver import Generator, zero_generator
from .domains import (PolarStarSpec, SectorDomainSpec, make_ball, make_polar_star, make_sector_domain,
                      revolve_to_dim)


@dataclass
class Geometry:
    """A built domain: level set, core and, for the sector, its arc data."""

    name: str
    domain: object
    core: object
    sector: Optional[object] = None
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Entry:
    name: str
    build: Callable
    schema: Dict[str, object]
    summary: str


def _merge(schema, params, what):
    unknown = sorted(set(params) - set(schema))
    if unknown:
        raise ConfigError(f"unknown {what} parameter(s): {', '.join(unknown)}")
    return {**schema, **params}


# -- domains ---------------------------------------------------------------

def _ball(p):
    dom, core = make_ball(float(p["radius"]), int(p["dim"]))
    return Geometry("ball", dom, core, params=p)


def _polar(p):
    spec = PolarStarSpec(tuple(p["cos_coeffs"]), tuple(p["sin_coeffs"]), tuple(p["offset"]))
    dom, core = make_polar_star(spec)
    return Geometry("polar_star", dom, core, params=p)


def _sector(p):
    spec = SectorDomainSpec(alpha=float(p["alpha"]), eta=float(p["eta"]), eps_corner=float(p["eps_corner"]),
                            transition=float(p["transition"]))
    sec = make_sector_domain(spec)
    return Geometry("sector", sec.domain, sec.core, sector=sec, params=p)


def _revolve(p):
    base = p["base"]
    if base not in ("ball", "polar_star"):
        raise ConfigError("revolve.base must be 'ball' or 'polar_star'")
    planar = _ball({**DOMAINS["ball"].schema, "dim": 2}) if base == "ball" else _polar(
        {**DOMAINS["polar_star"].schema, "cos_coeffs": p["cos_coeffs"]})
    dom, core = revolve_to_dim(planar.domain, int(p["dim"]), planar.core)
    return Geometry("revolve", dom, core, params=p)


DOMAINS: Dict[str, Entry] = {
    "ball": Entry("ball", _ball, {"radius": 1.0, "dim": 2}, "Euclidean ball centred at the origin"),
    "polar_star": Entry("polar_star", _polar,
                        {"cos_coeffs": [1.0, 0.0, 0.0, 0.3], "sin_coeffs": [], "offset": [0.0, 0.0]},
                        "strictly star-shaped domain r < rho(t), rho a trigonometric polynomial"),
    "sector": Entry("sector", _sector,
                    {"alpha": 0.7, "eta": 0.1, "eps_corner": 0.1, "transition": 0.5},
                    "non-convex sector domain whose inner boundary is a unit-circle arc of half-angle alpha"),
    "revolve": Entry("revolve", _revolve, {"base": "polar_star", "dim": 3, "cos_coeffs": [1.0, 0.0, 0.2]},
                     "rotationally symmetric lift of a planar domain to dimension dim"),
}


def build_domain(name: str, params: Optional[dict] = None) -> Geometry:
    if name not in DOMAINS:
        raise ConfigError(f"unknown domain {name!r}; known: {', '.join(sorted(DOMAINS))}")
    e = DOMAINS[name]
    return e.build(_merge(e.schema, params or {}, f"domain '{name}'"))


# -- terminal conditions -----------------------------------------------------

@dataclass
class TerminalSpec:
    """g(X_N) for the solver; ``nu`` is set for arc terminals so the circle
    oracle can be built, ``scaled(delta)`` gives the perturbed terminal."""

    name: str
    g: Callable
    nu: Optional[object] = None
    scaled: Optional[Callable] = None
    params: dict = field(default_factory=dict)


def _arc_terminal(make_nu):
    def build(p, geo: Geometry, dim_x: int):
        if geo.sector is None:
            raise ConfigError("arc terminals live on the sector's inner arc; use domain 'sector'")
        alpha = float(p["alpha"])
        if alpha > geo.sector.spec.alpha + 1e-12:
            raise ConfigError(f"terminal alpha {alpha} exceeds the sector half-angle {geo.sector.spec.alpha}")
        nu = make_nu(p)
        sec = geo.sector

        def make(scale):
            return lambda x: sec.arc_point(scale * nu.at(np.asarray(x)[..., 0]))
        return TerminalSpec(p["_name"], make(1.0), nu, lambda d: make(1.0 - d), p)
    return build


def _constant_point(p, geo: Geometry, dim_x: int):
    pt = np.asarray(p["point"], float)
    if pt.shape != (geo.domain.dim,):
        raise ConfigError(f"constant_point needs {geo.domain.dim} coordinates")

    def make(scale):
        return lambda x: np.broadcast_to(scale * pt, np.shape(x)[:-1] + pt.shape).copy()
    return TerminalSpec("constant_point", make(1.0), None, lambda d: make(1.0 - d), p)


def _nu_sign(p):
    from ..validation import sign_terminal
    return sign_terminal(float(p["alpha"]))


def _nu_smooth(p):
    from ..validation import smooth_terminal
    return smooth_terminal(float(p["alpha"]))


def _nu_pair(p):
    from ..validation import arc_point_pair
    return arc_point_pair(float(p["alpha"]), float(p["p_up"]))


def _nu_const(p):
    from ..validation import constant_terminal
    return constant_terminal(float(p["theta"]))


TERMINALS: Dict[str, Entry] = {
    "arc_point_pair": Entry("arc_point_pair", _arc_terminal(_nu_pair), {"alpha": 0.5, "p_up": 0.5},
                            "two-valued arc point: angle +alpha above the (1-p_up) quantile of W_T, else -alpha"),
    "arc_sign": Entry("arc_sign", _arc_terminal(_nu_sign), {"alpha": 0.5},
                      "arc point at angle alpha sign(W_T)"),
    "arc_smooth": Entry("arc_smooth", _arc_terminal(_nu_smooth), {"alpha": 0.7},
                        "arc point at angle alpha (2 Phi(W_T) - 1)"),
    "arc_constant": Entry("arc_constant", _arc_terminal(_nu_const), {"alpha": 0.5, "theta": 0.0},
                          "fixed arc point at angle theta"),
    "constant_point": Entry("constant_point", _constant_point, {"point": [0.0, 0.0]},
                            "deterministic terminal value inside the domain"),
}


def build_terminal(name: str, params: Optional[dict], geo: Geometry, dim_x: int) -> TerminalSpec:
    if name not in TERMINALS:
        raise ConfigError(f"unknown terminal {name!r}; known: {', '.join(sorted(TERMINALS))}")
    e = TERMINALS[name]
    p = _merge(e.schema, params or {}, f"terminal '{name}'")
    p["_name"] = name
    return e.build(p, geo, dim_x)


# -- generators ---------------------------------------------------------------

def _zero(p):
    return zero_generator()


def _linear(p):
    a = float(p["a"])
    b = np.asarray(p["b"], float)

    def fn(t, x, y, z):
        return a * y + b

    def jac(t, x, y, z):
        return np.broadcast_to(a * np.eye(y.shape[-1]), y.shape[:-1] + (y.shape[-1], y.shape[-1]))
    return Generator(fn=fn, jac_y=jac, lipschitz_y=abs(a), name="linear")


GENERATORS: Dict[str, Entry] = {
    "zero": Entry("zero", _zero, {}, "f = 0"),
    "linear": Entry("linear", _linear, {"a": 0.0, "b": [0.0, 0.0]}, "f(t, x, y, z) = a y + b"),
}


def build_generator(name: str, params: Optional[dict] = None) -> Generator:
    if name not in GENERATORS:
        raise ConfigError(f"unknown generator {name!r}; known: {', '.join(sorted(GENERATORS))}")
    e = GENERATORS[name]
    return e.build(_merge(e.schema, params or {}, f"generator '{name}'"))


def list_catalog() -> str:
    """Sorted listing of domains, terminals and generators with defaults."""
    lines = []
    for title, table in (("domains", DOMAINS), ("generators", GENERATORS), ("terminals", TERMINALS)):
        lines.append(f"[{title}]")
        for name in sorted(table):
            e = table[name]
            schema = ", ".join(f"{k}={v!r}" for k, v in sorted(e.schema.items())) or "-"
            lines.append(f"  {name:<16} {e.summary}")
            lines.append(f"  {'':<16} params: {schema}")
    return "\n".join(lines) + "\n"
