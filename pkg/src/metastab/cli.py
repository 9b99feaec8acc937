"""Command-line front end: validate | quasipotential | metamap | reproduce | verify-barriers | sde | all."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import barriers as B
from . import metamap as MM
from . import model
from . import sde as SDE
from .domain import build_grid, shrink
from .parabolic import evolve
from .quasipotential import frozen_at_level, solve_dijkstra
from .scenarios import ConfigError, Scenario, load
from .svg import line_plot

EXIT_OK, EXIT_ASSUMPTION, EXIT_CONFIG, EXIT_FK13, EXIT_VERDICT = 0, 1, 2, 3, 4
MONOTONE_SLACK = 0.02
FINAL_ERROR = 0.1


class Run:
    """Scenario, output directory and the config echo shared by one invocation."""

    def __init__(self, sc: Scenario, out: Path, jobs: int = 1, quiet: bool = False):
        self.sc, self.out, self.jobs, self.quiet = sc, out, jobs, quiet
        self.spec = sc.problem()
        out.mkdir(parents=True, exist_ok=True)
        self._grids: dict = {}

    def grid(self, h: float):
        if h not in self._grids:
            self._grids[h] = build_grid(self.spec.domain, h)
        return self._grids[h]

    def echo(self, cmd: str, prefix: str = "# ") -> str:
        body = [f"metastab {cmd}", f"scenario {self.sc.name}"] + self.sc.to_ini().rstrip().splitlines()
        return "\n".join(prefix + s if s else prefix.rstrip() for s in body)

    def say(self, text: str = "") -> None:
        if not self.quiet:
            print(text, flush=True)

    def write(self, name: str, cmd: str, text: str) -> Path:
        p = self.out / name
        p.write_text(self.echo(cmd) + "\n" + text.rstrip("\n") + "\n")
        return p

    def write_via(self, name: str, cmd: str, writer) -> Path:
        """Let ``writer(path)`` produce the file, then prepend the config echo."""
        p = self.out / name
        writer(p)
        p.write_text(self.echo(cmd) + "\n" + p.read_text())
        return p

    def svg(self, name: str, cmd: str, series: dict, **kw) -> Path:
        p = self.out / name
        p.write_text(line_plot(series, header=self.echo(cmd, prefix=""), **kw))
        return p


# ---------------------------------------------------------------- commands

def cmd_validate(run: Run) -> int:
    rep = model.validate(run.spec, run.grid(run.sc.h))
    lines = [c.line() for c in rep.checks]
    lines.append(f"overall: {'PASS' if rep.passed else 'FAIL'}")
    run.write("validate.txt", "validate", "\n".join(lines))
    for s in lines:
        run.say(s)
    return EXIT_OK if rep.passed else EXIT_ASSUMPTION


def cmd_quasipotential(run: Run) -> int:
    sc, grid = run.sc, run.grid(run.sc.h)
    c0 = run.spec.boundary.summary(grid)["c0"]
    rec = MM.level_record(run.spec, grid, c0, stencil=sc.stencil)
    pf = rec.field
    run.write_via("quasipotential.csv", "quasipotential", pf.to_csv)
    lines = [f"level c0 = {c0:.6g}", f"M = {pf.M:.6g}",
             "Gamma = " + "; ".join(" ".join(f"{v:.6g}" for v in p) for p in rec.gamma),
             f"g on Gamma = {', '.join(f'{v:.6g}' for v in rec.gvals)}"]
    run.write("quasipotential.txt", "quasipotential", "\n".join(lines))
    if grid.dim == 1:
        order = np.argsort(grid.coords[:, 0])
        run.svg("quasipotential.svg", "quasipotential", {"V": (grid.coords[order, 0], pf.values[order])},
                title="quasi-potential at c0", xlabel="x", ylabel="V")
    else:
        d = grid.samples - np.asarray(run.spec.domain.bounds()).mean(axis=0)
        ang = np.arctan2(d[:, 1], d[:, 0])
        order = np.argsort(ang)
        run.svg("quasipotential.svg", "quasipotential", {"V on boundary": (ang[order], pf.boundary[order])},
                title="boundary values of the quasi-potential at c0", xlabel="angle", ylabel="V")
    for s in lines:
        run.say(s)
    return EXIT_OK


def _lambda_grid(sc: Scenario) -> np.ndarray:
    return np.linspace(0.0, sc.lambda_max, sc.n_lambda)


def build_metamap(run: Run) -> MM.MetastabilityMap:
    sc = run.sc
    return MM.build_map(run.spec, run.grid(sc.h), sc.levels, sc.refine, stencil=sc.stencil, jobs=run.jobs)


def cmd_metamap(run: Run, mp: Optional[MM.MetastabilityMap] = None) -> tuple[int, Optional[MM.MetastabilityMap]]:
    if cmd_validate(run) != EXIT_OK:
        return EXIT_ASSUMPTION, None
    sc = run.sc
    mp = build_metamap(run) if mp is None else mp
    lines = [f"c0 = {mp.c0:.6g}", f"M(c0) = {mp.M(mp.c0):.6g}"] + ["singleton: " + s for s in mp.singleton.lines]
    if not mp.singleton.passed:
        gap = mp.singleton.data["gap"]
        lines.append(f"argmin singleton condition violated: gap G+ - G- = {gap:.6g}; the staircase prediction is void")
        run.write("metamap.txt", "metamap", "\n".join(lines))
        for s in lines:
            run.say(s)
        return EXIT_FK13, mp
    lams = _lambda_grid(sc)
    jumps = MM.locate_jumps(mp, lams)
    lines += [f"g0 = {mp.G_minus(mp.c0):.6g}", f"c1 = {mp.c1:.6g}"]
    lines += ["crossing: " + s for s in mp.crossing.lines]
    lines += [f"jump set = {{{', '.join(f'{j:.6g}' for j in jumps)}}}"] + mp.notes
    run.write("metamap.txt", "metamap", "\n".join(lines))
    run.write_via("metamap.csv", "metamap", mp.to_csv)
    run.write_via("cbar.csv", "metamap", lambda p: mp.cbar_csv(p, lams))
    cs, M = mp.M_table()
    run.svg("metamap.svg", "metamap",
            {"M(c)": (cs, M), "G-(c)": (cs, [mp.records[c].Gminus for c in cs]),
             "G+(c)": (cs, [mp.records[c].Gplus for c in cs])}, title="metastability map", xlabel="c")
    run.svg("cbar.svg", "metamap", {"cbar": (lams, [mp.cbar(l) for l in lams])},
            title="staircase", xlabel="lambda", ylabel="cbar", step=True)
    for s in lines:
        run.say(s)
    return EXIT_OK, mp


def reproduce_table(run: Run, mp: MM.MetastabilityMap) -> dict:
    """Error table e(eps, lambda) and the Omega_delta-uniform error for lambdas off the jump set."""
    sc = run.sc
    grid = run.grid(sc.reproduce_h)
    lams_all = _lambda_grid(sc)
    jumps = np.asarray(MM.locate_jumps(mp, lams_all))
    jtol = 2 * (lams_all[1] - lams_all[0]) if len(lams_all) > 1 else 1e-2
    lams, excluded = [], []
    for lam in sc.lambdas:
        (excluded if len(jumps) and np.abs(jumps - lam).min() <= jtol else lams).append(float(lam))
    eps_list = sorted((float(e) for e in sc.eps), reverse=True)
    mask = shrink(grid, sc.delta)
    err, uni, u0 = {}, {}, {}
    for eps in eps_list:
        if not lams:
            break
        tr = evolve(run.spec, grid, eps, lams=lams)
        for lam in lams:
            t = float(np.exp(lam / eps))
            u = tr.snapshot(t)
            cb = float(mp.cbar(lam))
            u0[eps, lam] = float(u[grid.origin])
            err[eps, lam] = abs(u0[eps, lam] - cb)
            uni[eps, lam] = float(np.abs(u[mask] - cb).max()) if len(mask) else err[eps, lam]
    verdict = {}
    for lam in lams:
        es = [err[e, lam] for e in eps_list]
        mono = all(b <= a + MONOTONE_SLACK for a, b in zip(es, es[1:]))
        verdict[lam] = bool(mono and es[-1] <= FINAL_ERROR)
    return dict(eps=eps_list, lams=lams, excluded=excluded, err=err, uniform=uni, u0=u0, verdict=verdict,
                cbar={lam: float(mp.cbar(lam)) for lam in lams}, jumps=jumps)


def cmd_reproduce(run: Run, mp: Optional[MM.MetastabilityMap] = None) -> int:
    if mp is None:
        code, mp = cmd_metamap(run)
        if code != EXIT_OK:
            return code
    tab = reproduce_table(run, mp)
    rows = ["lambda,eps,cbar,u0,error,uniform_error,verdict"]
    for lam in tab["lams"]:
        for eps in tab["eps"]:
            rows.append(f"{lam!r},{eps!r},{tab['cbar'][lam]!r},{tab['u0'][eps, lam]!r},{tab['err'][eps, lam]!r},"
                        f"{tab['uniform'][eps, lam]!r},{'PASS' if tab['verdict'][lam] else 'FAIL'}")
    for lam in tab["excluded"]:
        rows.append(f"{lam!r},,,,,,jump point")
    run.write("reproduce.csv", "reproduce", "\n".join(rows))
    if tab["lams"]:
        run.svg("reproduce.svg", "reproduce",
                {f"lambda={lam:g}": (tab["eps"], [tab["err"][e, lam] for e in tab["eps"]]) for lam in tab["lams"]},
                title="error at the origin", xlabel="eps", ylabel="|u(0, exp(lambda/eps)) - cbar|")
    run.say(f"{'lambda':>8} {'eps':>6} {'cbar':>8} {'u(0)':>9} {'error':>9} {'uniform':>9}")
    for lam in tab["lams"]:
        for eps in tab["eps"]:
            run.say(f"{lam:8.4g} {eps:6.3g} {tab['cbar'][lam]:8.4g} {tab['u0'][eps, lam]:9.4g} "
                    f"{tab['err'][eps, lam]:9.4g} {tab['uniform'][eps, lam]:9.4g}")
        run.say(f"  lambda={lam:g}: {'PASS' if tab['verdict'][lam] else 'FAIL'}")
    for lam in tab["excluded"]:
        run.say(f"  lambda={lam:g}: excluded, jump point")
    ok = all(tab["verdict"].values())
    run.say(f"verdict: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERDICT


def barrier_suite(spec, grid, sc: Scenario, eps_list) -> list[tuple[str, bool, list[str], object]]:
    """(name, verified, report lines, candidate or None) for every construction and replay."""
    ham = frozen_at_level(spec, spec.boundary.summary(grid)["c0"])
    pf = solve_dijkstra(ham, grid, sc.stencil)
    out = []
    prof = B.make_h(sc.degree)
    out.append((f"h (degree {sc.degree})", True, [f"||h''|| = {prof.h2norm:.6g}"], None))

    def attempt(name, fn):
        try:
            cand = fn()
            out.append((name, cand.verified, cand.lines(), cand))
            return cand
        except (B.SideConditionViolated, B.MarginViolated) as exc:
            out.append((name, False, [f"skipped: {type(exc).__name__}: {exc}"], None))
        except B.SearchFailed as exc:
            c = exc.candidate
            out.append((name, False, [f"SearchFailed: {exc}"] + (c.lines() if c is not None else []), c))
        return None

    try:
        wm = B.make_w_m(pf, sc.m_long, spec, ham, strict=False)
        out.append((f"w_m (m={sc.m_long:g})", wm.verified, wm.lines(), wm))
    except B.MarginViolated as exc:
        out.append((f"w_m (m={sc.m_long:g})", False, [f"skipped: MarginViolated: {exc}"], None))
    for eps in eps_list:
        attempt(f"q (eps={eps:g})", lambda: B.barrier_q(prof, spec, eps))
        ws = attempt(f"w_short (m={sc.m_short:g}, eps={eps:g})",
                     lambda: B.search_w_short(pf, spec, ham, sc.m_short, sc.r_short, eps))
        if ws is not None:
            ch = B.replay_w_short(ws, spec)
            out.append((f"replay w_short (eps={eps:g})", bool(ch.passed), [ch.line()], None))
        attempt(f"z_long (m={sc.m_long:g}, eps={eps:g})",
                lambda: B.search_z_long(pf, spec, ham, sc.m_long, sc.r_long, eps))
        checks = B.replay_z_long(spec, pf, ham, sc.m_long, eps)
        out.append((f"replay z_long (eps={eps:g})", all(c.passed for c in checks), [c.line() for c in checks], None))
    return out


def cmd_verify_barriers(run: Run) -> int:
    sc = run.sc
    grid = run.grid(sc.barrier_h)
    suite = barrier_suite(run.spec, grid, sc, sc.barrier_eps)
    lines = []
    for i, (name, ok, rep, cand) in enumerate(suite):
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}")
        lines += ["    " + s for s in rep]
        if cand is not None and cand.residuals:
            run.write_via(f"barrier_{i:02d}_{cand.kind}.csv", "verify-barriers", cand.to_csv)
    ok = all(s[1] for s in suite)
    lines.append(f"overall: {'PASS' if ok else 'FAIL'}")
    run.write("barriers.txt", "verify-barriers", "\n".join(lines))
    for s in lines:
        run.say(s)
    return EXIT_OK if ok else EXIT_VERDICT


def cmd_sde(run: Run, seed: Optional[int] = None) -> int:
    sc = run.sc
    seed = sc.seed if seed is None else seed
    rec = MM.level_record(run.spec, run.grid(sc.h), sc.sde_level, stencil=sc.stencil)
    gamma = rec.gamma
    d = 0.05 * run.spec.domain.diameter
    lines, code = [], EXIT_OK
    for eps in sc.sde_eps:
        cfg = SDE.EnsembleConfig(float(eps), sc.sde_level, sc.paths, sc.sde_dt, seed=seed, start=sc.sde_start)
        recs = SDE.simulate_exit(run.spec, cfg)
        run.write_via(f"sde_exits_eps{eps:g}.csv", "sde", recs.to_csv)
        mass = recs.mass_near(gamma, d)
        lines += [f"eps = {eps:g}", f"  M(c) = {rec.M:.6g} at c = {sc.sde_level:g}",
                  f"  exit mass within {d:.3g} of Gamma = {mass:.6g}",
                  f"  capped fraction = {recs.capped_fraction:.4g}"]
        try:
            est = SDE.log_exit_time(recs)
            lines += ["  " + s for s in est.summary("eps log mean exit").splitlines()]
        except SDE.TooFewExits as exc:
            lines.append(f"  TooFewExits: {exc}")
            code = EXIT_VERDICT
    run.write("sde.txt", "sde", "\n".join(lines))
    for s in lines:
        run.say(s)
    return code


def cmd_all(run: Run) -> int:
    code = cmd_validate(run)
    if code != EXIT_OK:
        return code
    cmd_quasipotential(run)
    code, mp = cmd_metamap(run)
    if code != EXIT_OK:
        return code
    codes = [cmd_reproduce(run, mp), cmd_verify_barriers(run), cmd_sde(run)]
    return next((c for c in codes if c != EXIT_OK), EXIT_OK)


COMMANDS = {
    "validate": cmd_validate,
    "quasipotential": cmd_quasipotential,
    "metamap": lambda run: cmd_metamap(run)[0],
    "reproduce": cmd_reproduce,
    "verify-barriers": cmd_verify_barriers,
    "sde": cmd_sde,
    "all": cmd_all,
}


# ---------------------------------------------------------------- argument handling

def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="metastab", description="Metastability experiments for small-diffusion parabolic problems.",
        epilog="Precedence: command-line flags > --set overrides > scenario file > defaults. "
               "Exit codes: 0 pass, 1 assumption failure, 2 config error, 3 argmin singleton violation, "
               "4 verdict failure.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--scenario", default="ou1d", help="INI file or stock name (ou1d, ramp, disk, disk-asym, symmetric-tie)")
    ap.add_argument("--out", help="output directory (default: [output] dir)")
    ap.add_argument("--jobs", type=int, default=1, help="worker cap for level solves")
    ap.add_argument("--seed", type=_u64, help="RNG seed for sde")
    ap.add_argument("--eps", type=_floats, help="eps list for the selected command")
    ap.add_argument("--lambda", dest="lams", type=_floats, help="lambda list for reproduce")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override a config key (repeatable)")
    ap.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    ap.add_argument("--quiet", action="store_true")
    return ap


def resolve(args) -> Scenario:
    sc = load(args.scenario)
    over = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        over[key.strip()] = val
    sc = sc.with_overrides(over)
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.lams is not None:
        upd["lambdas"] = args.lams
    if args.out is not None:
        upd["out"] = args.out
    if args.eps is not None:
        keys = {"reproduce": ["eps"], "verify-barriers": ["barrier_eps"], "sde": ["sde_eps"],
                "all": ["eps", "barrier_eps", "sde_eps"]}.get(args.command, [])
        upd.update({k: args.eps for k in keys})
    sc = replace(sc, **upd)
    try:
        sc.problem()
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise ConfigError(f"invalid problem definition: {exc}") from None
    return sc


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        sc = resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dump_config:
        print(sc.to_ini(), end="")
        return EXIT_OK
    run = Run(sc, Path(sc.out), max(1, args.jobs), args.quiet)
    return COMMANDS[args.command](run)


if __name__ == "__main__":
    sys.exit(main())
