"""Scenario configuration: INI round trip, stock scenarios and problem construction."""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import model as M
from .domain import Box, Disk, Ellipse, Interval


class ConfigError(ValueError):
    """Malformed or unknown configuration; ``line`` is 1-based when known."""

    def __init__(self, msg: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


# (section, key) -> (attribute, kind); kinds: str, int, float, floats, optfloats
SCHEMA = {
    "scenario": {"name": ("name", "str")},
    "domain": {"kind": ("domain", "str"), "params": ("domain_params", "floats")},
    "drift": {"kind": ("drift", "str"), "params": ("drift_params", "floats"),
              "lipschitz": ("lipschitz", "float"), "b0": ("b0", "float"), "r0": ("r0", "float")},
    "diffusion": {"kind": ("diffusion", "str"), "params": ("diffusion_params", "floats"),
                  "theta0": ("theta0", "float")},
    "boundary": {"kind": ("g", "str"), "params": ("g_params", "floats"), "range": ("g_range", "optfloats")},
    "grid": {"h": ("h", "float"), "stencil": ("stencil", "int")},
    "metamap": {"levels": ("levels", "int"), "refine": ("refine", "int"),
                "lambda_max": ("lambda_max", "float"), "n_lambda": ("n_lambda", "int")},
    "reproduce": {"h": ("reproduce_h", "float"), "eps": ("eps", "floats"), "lambdas": ("lambdas", "floats"),
                  "delta": ("delta", "float")},
    "barriers": {"h": ("barrier_h", "float"), "eps": ("barrier_eps", "floats"),
                 "m_short": ("m_short", "float"), "r_short": ("r_short", "float"),
                 "m_long": ("m_long", "float"), "r_long": ("r_long", "float"), "degree": ("degree", "int")},
    "sde": {"eps": ("sde_eps", "floats"), "level": ("sde_level", "float"), "paths": ("paths", "int"),
            "dt": ("sde_dt", "float"), "seed": ("seed", "int"), "start": ("start", "optfloats")},
    "output": {"dir": ("out", "str")},
}


@dataclass(frozen=True)
class Scenario:
    name: str = "custom"
    domain: str = "interval"
    domain_params: tuple = (-1.0, 2.0)
    drift: str = "linear"
    drift_params: tuple = (1.0,)
    lipschitz: float = 1.0
    b0: float = 1.0
    r0: float = 0.5
    diffusion: str = "constant"
    diffusion_params: tuple = (1.0,)
    theta0: float = 1.0
    g: str = "pwl"
    g_params: tuple = (0.0, -1.0, -0.5, 2.0, 1.0, 0.0, 0.0)
    g_range: tuple = ()
    h: float = 1e-3
    stencil: int = 2
    levels: int = 33
    refine: int = 4
    lambda_max: float = 1.5
    n_lambda: int = 151
    reproduce_h: float = 2e-3
    eps: tuple = (0.2, 0.15, 0.1)
    lambdas: tuple = (0.3, 0.75, 1.3)
    delta: float = 0.2
    barrier_h: float = 2e-3
    barrier_eps: tuple = (0.05, 0.02)
    m_short: float = 0.3
    r_short: float = 0.05
    m_long: float = 0.7
    r_long: float = 0.02
    degree: int = 5
    sde_eps: tuple = (0.05,)
    sde_level: float = 0.0
    paths: int = 10_000
    sde_dt: float = 0.1
    seed: int = 0
    start: tuple = ()
    out: str = "out"

    # ------------------------------------------------------------ INI

    def to_ini(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for key, (attr, kind) in keys.items():
                lines.append(f"{key} = {_format(getattr(self, attr), kind)}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, overrides: dict) -> "Scenario":
        """Apply {"section.key": text} overrides with the file's parsing rules."""
        upd = {}
        for dotted, text in overrides.items():
            sec, _, key = dotted.partition(".")
            if sec not in SCHEMA or key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key '{dotted}'")
            attr, kind = SCHEMA[sec][key]
            upd[attr] = _parse(text, kind, dotted, None)
        return replace(self, **upd)

    # ------------------------------------------------------------ problem

    def problem(self) -> M.ProblemSpec:
        dom = make_domain(self.domain, self.domain_params)
        n = dom.dim
        b = make_drift(self.drift, self.drift_params)
        a = make_diffusion(self.diffusion, self.diffusion_params)
        g = make_g(self.g, self.g_params, n)
        rng = tuple(self.g_range) if self.g_range else None
        return M.ProblemSpec(dom, M.DriftField(b, self.lipschitz, self.b0, self.r0),
                             M.DiffusionField(a, self.theta0), M.BoundaryData(g, rng))

    @property
    def sde_start(self) -> tuple:
        return tuple(self.start) if self.start else (0.0,) * make_domain(self.domain, self.domain_params).dim


def _format(v, kind) -> str:
    if kind in ("floats", "optfloats"):
        return ", ".join(repr(float(x)) for x in v)
    if kind == "float":
        return repr(float(v))
    return str(v)


def _parse(text: str, kind: str, key: str, line: Optional[int]):
    text = text.strip()
    try:
        if kind == "str":
            if not text:
                raise ValueError("empty value")
            return text
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind in ("floats", "optfloats"):
            if not text:
                if kind == "optfloats":
                    return ()
                raise ValueError("empty list")
            return tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {text!r} ({exc})", line) from None
    raise AssertionError(kind)


def _key_lines(text: str) -> dict:
    out, sec = {}, None
    for i, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            sec = m.group(1).strip()
            out.setdefault((sec, None), i)
        elif sec is not None and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = re.split(r"[=:]", s, 1)[0].strip().lower()
            out[(sec, key)] = i
    return out


def parse_ini(text: str, base: Optional[Scenario] = None) -> Scenario:
    """Parse one scenario; keys absent from the file keep ``base`` (default) values."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("missing [section] header", exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError(f"cannot parse: {exc.errors[0][1] if exc.errors else exc}", lineno) from None
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    where = _key_lines(text)
    upd = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", where.get((sec, None)))
        for key, val in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key '{key}' in [{sec}]", where.get((sec, key)))
            attr, kind = SCHEMA[sec][key]
            upd[attr] = _parse(val, kind, f"{sec}.{key}", where.get((sec, key)))
    sc = replace(base or Scenario(), **upd)
    try:
        sc.problem()
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise ConfigError(f"invalid problem definition: {exc}") from None
    return sc


def load(path_or_name: str) -> Scenario:
    """A stock scenario name or the path of an INI file."""
    if path_or_name in STOCK:
        return STOCK[path_or_name]
    p = Path(path_or_name)
    if not p.exists():
        raise ConfigError(f"no scenario file or stock scenario named '{path_or_name}'")
    return parse_ini(p.read_text())


# ---------------------------------------------------------------- stock fields

def make_domain(kind: str, p):
    p = [float(x) for x in p]
    if kind == "interval":
        return Interval(p[0], p[1])
    if kind == "box":
        n = len(p) // 2
        return Box(tuple(p[:n]), tuple(p[n:]))
    if kind == "disk":
        return Disk(tuple(p[:-1]), p[-1])
    if kind == "ellipse":
        return Ellipse(tuple(p[:2]), tuple(p[2:4]))
    raise KeyError(f"unknown domain kind '{kind}'")


def make_drift(kind: str, p):
    if kind == "linear":
        return M.linear_drift(list(p))
    if kind == "quadratic":
        n = len(p) // 2
        return M.quadratic_drift(list(p[:n]), list(p[n:]))
    raise KeyError(f"unknown drift kind '{kind}'")


def make_diffusion(kind: str, p):
    if kind == "constant":
        return M.constant_diffusion(list(p))
    if kind == "affine":
        return M.affine_diffusion(*p)
    if kind == "inverse_affine":
        return M.inverse_affine_diffusion(*p)
    raise KeyError(f"unknown diffusion kind '{kind}'")


def make_g(kind: str, p, n: int):
    if kind == "constant":
        return M.constant_g(p[0])
    if kind == "affine":
        return M.affine_g(list(p[:n]), p[n] if len(p) > n else 0.0)
    if kind == "pwl":
        # axis, then knots and values (equal halves)
        axis, rest = int(p[0]), list(p[1:])
        if len(rest) % 2:
            raise ValueError("pwl needs equally many knots and values")
        k = len(rest) // 2
        return M.piecewise_linear_g(axis, rest[:k], rest[k:])
    raise KeyError(f"unknown boundary kind '{kind}'")


# ---------------------------------------------------------------- stock scenarios

_OU = Scenario(name="ou1d", eps=(0.1, 0.07, 0.05), lambdas=(0.3, 0.9), delta=0.1, sde_eps=(0.1, 0.07, 0.05),
               lambda_max=1.0, n_lambda=101)
_DISK = dict(domain="disk", domain_params=(0.0, 0.0, 1.0), drift_params=(1.0, 2.0), lipschitz=2.0,
             h=1 / 160, reproduce_h=1 / 40, eps=(0.2, 0.1), lambdas=(0.3,), delta=0.25, sde_dt=0.05,
             barrier_h=1 / 40, lambda_max=1.5, n_lambda=151)

STOCK = {
    "ou1d": _OU,
    "ramp": Scenario(name="ramp", diffusion="inverse_affine", diffusion_params=(0.0, 1.0, 1.0), theta0=0.5,
                     h=2e-3, sde_level=1.0, sde_eps=(0.1,), paths=2000, lambda_max=1.5),
    "disk": Scenario(name="disk", g="affine", g_params=(0.0, 1.0, 2.0), **_DISK),
    "disk-asym": Scenario(name="disk-asym", g="affine", g_params=(1.0, 0.0, 2.0), **_DISK),
    "symmetric-tie": Scenario(name="symmetric-tie", domain_params=(-1.0, 1.0),
                              g_params=(0.0, -1.0, 0.0, 1.0, 1.0, 0.0, 1.0), lambdas=(0.3, 0.9),
                              eps=(0.1, 0.07), delta=0.1, lambda_max=1.0, n_lambda=101),
}


def scenario_fields() -> list[str]:
    return [f.name for f in fields(Scenario)]
