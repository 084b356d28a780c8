"""Command-line driver: ``finslab <subcommand> --config <path> [--out <dir>]``.

Every subcommand writes CSV files (a provenance comment line, then a header
row) into the output directory and prints one machine-readable verdict line
per check.  Exit codes: 0 all checks pass, 1 some check is violated, 2 the
configuration or a precondition is invalid.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import __version__, estimates as est, fixtures, logsobolev as lsob, pde
from .config import RunConfig, load_config
from .curvature import bound_scan, curvature_sample, reference_field, tau_tensor
from .errors import ConditionsInfeasible, ConfigError, FinslabError
from .geodesics import ball_mask, distance_field

SUBCOMMANDS = ("curvature", "distance", "solve", "check-liyau", "check-harnack", "check-gap",
               "check-bochner", "check-comparison", "logsobolev", "all")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if v is None:
        return ""
    if isinstance(v, (tuple, list)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


class Context:
    """Shared, lazily computed state of one CLI invocation."""

    def __init__(self, cfg: RunConfig, sub, out, stream):
        self.cfg = cfg
        self.sub = sub
        self.out = out
        self.stream = stream
        self.space = cfg.space
        self._traj = None
        self._compact = None
        self._local = None
        os.makedirs(out, exist_ok=True)

    # -- output --------------------------------------------------------------
    def write_csv(self, name, header, rows):
        path = os.path.join(self.out, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# finslab {__version__} config_sha256={self.cfg.text_hash} "
                     f"seed={self.cfg.seed} command={self.sub}\n")
            fh.write(",".join(header) + "\n")
            for r in rows:
                vals = [r[h] for h in header] if isinstance(r, dict) else r
                fh.write(",".join(_fmt(x) for x in vals) + "\n")
        return path

    def verdict(self, rep: est.CheckReport):
        print(rep.verdict(), file=self.stream)
        return rep.passed

    # -- shared computations -------------------------------------------------
    def trajectory(self):
        if self._traj is None:
            so = self.cfg.solver
            dt = pde.cfl_limit(self.space, so["cfl"]) if so["dt"] == "auto" else so["dt"]
            snaps = so["snapshots"] or tuple(t for t in fixtures.RUN_TIMES if t < so["t_end"])
            cfg = pde.SolverConfig(dt=dt, t_end=so["t_end"], cfl=so["cfl"], snapshots=snaps,
                                   a=so["a"], b=so["b"], reduce_b=bool(so["reduce_b"]))
            self._traj = pde.solve(self.space, so["u0"].evaluate(self.space), cfg)
        return self._traj

    def _base_params(self, **kw):
        ch, so = self.cfg.checks, self.cfg.solver
        return est.CheckParams(beta=ch["beta"], delta=ch["delta"], N=ch["N"], R=self.cfg.R,
                               p=tuple(self.cfg.p), a=so["a"], b=so["b"], t_min=ch["t_min"],
                               tol_liyau=ch["tol_liyau"], tol_harnack=ch["tol_harnack"],
                               tol_gap=ch["tol_gap"], tol_bochner=ch["tol_bochner"],
                               tol_cmp=ch["tol_cmp"], **kw)

    def compact_params(self):
        if self._compact is None:
            ch = self.cfg.checks
            K = ch["K"]
            if K == "auto":
                K = bound_scan(self.space, N=ch["N"], stride=ch["scan_stride"],
                               n_angles=ch["scan_angles"]).K_lower
            A = 1.0 if ch["A"] == "auto" else ch["A"]
            self._compact = self._base_params(K=K, A=A)
        return self._compact

    def local_params(self):
        if self._local is None:
            ch = self.cfg.checks
            p, R = tuple(self.cfg.p), self.cfg.R
            K, A, K0 = ch["K_local"], ch["A_local"], ch["K0"]
            if K == "auto" or A == "auto":
                scan = bound_scan(self.space, region=(p, 2 * R), N=ch["N"], reference="grad_r",
                                  stride=max(1, ch["scan_stride"] // 2), n_angles=ch["scan_angles"])
                K = scan.K_lower if K == "auto" else K
                A = scan.A_upper if A == "auto" else A
            if K0 == "auto":
                K0 = measured_K0(self.space, self.trajectory(), p, 2 * R, ch["t_min"]) + ch["K0_slack"]
            self._local = self._base_params(K=K, A=max(A, 1.0), K0=K0)
        return self._local


def measured_K0(space, traj, p, radius, t_min):
    """max over snapshots (t >= t_min) and B_p(radius) of max(F(T), F(-T)),
    T = T(grad u, grad r) the tau tensor; zero for Riemannian spaces."""
    if space.riemannian:
        return 0.0
    mask = ball_mask(space, p, radius)
    W = reference_field(space, "grad_r", p=p, region_mask=mask)
    best = 0.0
    for s in traj.snapshots:
        if s.t < t_min:
            continue
        V = pde.gradient_field(space, s.u)
        best = max(best, tau_tensor(space, V, W, mask=mask).max_norm)
    return best


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_curvature(ctx):
    sp, ch = ctx.space, ctx.cfg.checks
    d = sp.domain
    stride = ch["scan_stride"]
    X = d.nodes()[::stride, ::stride].reshape(-1, 2)
    th = 2 * math.pi * np.arange(ch["scan_angles"]) / ch["scan_angles"]
    xx = np.repeat(X, len(th), 0)
    tt = np.tile(th, len(X))
    vv = np.stack([np.cos(tt), np.sin(tt)], -1)
    cs = curvature_sample(sp, xx, vv, N=ch["N"])
    rows = [(x[0], x[1], t, k, r, s, sd, rn) for x, t, k, r, s, sd, rn in
            zip(xx, tt, cs.K, cs.Ric, cs.S, cs.Sdot, cs.RicN)]
    ctx.write_csv("curvature.csv", ["x1", "x2", "theta", "K", "Ric", "S", "Sdot", "RicN"], rows)
    scan = bound_scan(sp, N=ch["N"], stride=stride, n_angles=ch["scan_angles"])
    ctx.write_csv("bounds.csv", ["region", "N", "reference", "K_lower", "A_upper", "n_points"],
                  [(scan.region, scan.N, scan.reference, scan.K_lower, scan.A_upper, scan.n_points)])
    print(f"curvature K_lower={scan.K_lower:.6e} A_upper={scan.A_upper:.6e}", file=ctx.stream)
    return True


def cmd_distance(ctx):
    sp = ctx.space
    p = tuple(ctx.cfg.p)
    df = distance_field(sp, p)
    X = sp.domain.nodes()
    n1, n2 = sp.domain.shape
    rows = [(i, j, X[i, j, 0], X[i, j, 1], df.r[i, j], df.nonsmooth[i, j])
            for i in range(n1) for j in range(n2)]
    ctx.write_csv("distance.csv", ["i", "j", "x1", "x2", "r", "nonsmooth"], rows)
    print(f"distance source={p} max_r={df.r.max():.6e}", file=ctx.stream)
    return True


def cmd_solve(ctx):
    tr = ctx.trajectory()
    X = ctx.space.domain.nodes()
    n1, n2 = ctx.space.domain.shape
    summary = []
    for s, m in zip(tr.snapshots, tr.mass):
        rows = [(i, j, X[i, j, 0], X[i, j, 1], s.u[i, j], s.f[i, j], s.F2gradf[i, j], s.ft[i, j])
                for i in range(n1) for j in range(n2)]
        ctx.write_csv(f"snap_{s.t:.6g}.csv", ["i", "j", "x1", "x2", "u", "f", "F2gradf", "ft"], rows)
        summary.append((s.t, m, s.u.min(), s.u.max()))
    ctx.write_csv("trajectory.csv", ["t", "mass", "min_u", "max_u"], summary)
    print(f"solve steps={tr.steps} provenance={tr.provenance}", file=ctx.stream)
    return True


def _snapshot_rows(rep):
    return [dict(check=rep.name, **r) for r in rep.rows]


def cmd_liyau(ctx):
    tr = ctx.trajectory()
    compact = est.liyau_compact_check(tr, ctx.compact_params())
    local = est.liyau_local_check(tr, ctx.local_params())
    hdr = ["check", "t", "rhs", "max_lhs", "max_rel_violation", "i", "j"]
    ctx.write_csv("liyau.csv", hdr, _snapshot_rows(compact) + _snapshot_rows(local))
    return all([ctx.verdict(compact), ctx.verdict(local)])


def cmd_harnack(ctx):
    tr = ctx.trajectory()
    P = ctx.compact_params()
    pairs = est.random_pairs(tr, ctx.cfg.checks["pairs"], seed=ctx.cfg.seed, t_min=P.t_min)
    rep = est.harnack_check(tr, P, pairs)
    hdr = ["i1", "j1", "t1", "i2", "j2", "t2", "distance", "theta", "margin", "margin_t2"]
    ctx.write_csv("harnack.csv", hdr, rep.rows)
    return ctx.verdict(rep)


def cmd_gap(ctx):
    g = ctx.cfg.gap
    P = ctx._base_params(K=g["K"], A=g["A"]).replace(a=g["a"], b=g["b"])
    if not (P.b == 0 and P.K == 0):
        bad = est.gap_feasibility(P)
        if bad:
            raise ConditionsInfeasible("violated: " + "; ".join(bad))
    res = pde.solve_stationary(ctx.space, g["u0"].evaluate(ctx.space), g["a"], g["b"],
                               tol_res=g["tol_res"])
    rep = est.gap_check(ctx.space, res.u, P)
    rows = [("stationary_residual", res.residual), ("stationary_method", res.method)]
    rows += [(k, v) for k, v in sorted(rep.details.items())]
    ctx.write_csv("gap.csv", ["key", "value"], rows)
    return ctx.verdict(rep)


def cmd_bochner(ctx):
    ch = ctx.cfg.checks
    rows = []
    ok = True
    for k in range(ch["bochner_samples"]):
        u = fixtures.band_limited(ctx.space, ctx.cfg.seed + k)
        rep = est.bochner_check(ctx.space, u, N=ch["N"], tol=ch["tol_bochner"])
        rep.name = f"bochner[{k}]"
        rows.append((k, ctx.cfg.seed + k, rep.max_violation, rep.details["min_residual"],
                     rep.excluded, rep.passed))
        ok &= ctx.verdict(rep)
    ctx.write_csv("bochner.csv", ["sample", "seed", "max_violation", "min_residual", "excluded",
                                  "pass"], rows)
    return ok


def cmd_comparison(ctx):
    P = ctx.local_params()
    p = tuple(ctx.cfg.p)
    T = est.comparison_terms(ctx.space, p, None, P.R)
    rep = est.comparison_check(ctx.space, p, None, P, sd=T["smooth"])
    inc = T["include"]
    rhs = est.comparison_rhs(P, np.where(inc, T["r"], 1.0))
    rows = [(i, j, T["r"][i, j], T["lap_r"][i, j], rhs[i, j], T["lap_r"][i, j] - rhs[i, j])
            for i, j in np.argwhere(inc)]
    ctx.write_csv("comparison.csv", ["i", "j", "r", "lap_r", "rhs", "margin"], rows)
    return ctx.verdict(rep)


def logsobolev_report(space, iters, tol_el, min_decrease=10):
    """Descent from 1 + sin(x1)/2; passes if E strictly decreases for the first
    min(10, iters) steps and the Euler-Lagrange sup-residual is <= tol_el."""
    X = space.domain.nodes()
    f0 = 1.0 + 0.5 * np.sin(2 * math.pi * X[..., 0] / space.domain.L1)
    res = lsob.cfls_search(space, f0, iters=iters)
    _, sup = lsob.euler_lagrange_residual(space, res.el_profile, res.C)
    d = np.diff(res.history)
    strict = int(np.argmax(d >= 0)) if np.any(d >= 0) else len(d)
    viol = sup - tol_el
    if strict < min(min_decrease, iters):
        viol = max(viol, 1.0)
    rep = est.CheckReport("logsobolev", bool(viol <= 0), float(viol), float(sup), (None, None),
                          0.0, {"iters": iters, "tol_el": tol_el}, 0,
                          {"C_FLS": res.C, "el_sup_residual": sup, "strict_decrease_steps": strict,
                           "restarts": res.restarts})
    return rep, res


def cmd_logsobolev(ctx):
    ch = ctx.cfg.checks
    rep, res = logsobolev_report(ctx.space, ch["logsobolev_iters"], ch["tol_el"])
    ctx.write_csv("logsobolev.csv", ["iteration", "E"], list(enumerate(res.history)))
    print(f"logsobolev C_FLS={res.C:.10e} el_sup_residual={rep.details['el_sup_residual']:.3e}",
          file=ctx.stream)
    return ctx.verdict(rep)


CHECK_COMMANDS = {
    "liyau": cmd_liyau, "harnack": cmd_harnack, "gap": cmd_gap, "bochner": cmd_bochner,
    "comparison": cmd_comparison, "logsobolev": cmd_logsobolev,
}

COMMANDS = {
    "curvature": cmd_curvature, "distance": cmd_distance, "solve": cmd_solve,
    "check-liyau": cmd_liyau, "check-harnack": cmd_harnack, "check-gap": cmd_gap,
    "check-bochner": cmd_bochner, "check-comparison": cmd_comparison,
    "logsobolev": cmd_logsobolev,
}


def cmd_all(ctx):
    ok = cmd_curvature(ctx) & cmd_distance(ctx) & cmd_solve(ctx)
    for name in ctx.cfg.checks["run"]:
        ok &= CHECK_COMMANDS[name](ctx)
    return ok


def run(cfg: RunConfig, subcommand: str, out=None, stream=None, err=None) -> int:
    """Execute one subcommand; returns the process exit code."""
    stream = stream or sys.stdout
    err = err or sys.stderr
    if subcommand not in SUBCOMMANDS:
        print(f"error: unknown subcommand {subcommand!r}", file=err)
        return 2
    ctx = Context(cfg, subcommand, out or cfg.out, stream)
    fn = cmd_all if subcommand == "all" else COMMANDS[subcommand]
    try:
        ok = fn(ctx)
    except (FinslabError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=err)
        return 2
    return 0 if ok else 1


def main(argv=None):
    ap = argparse.ArgumentParser(prog="finslab", description=__doc__.split("\n\n")[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="path of the run configuration")
    ap.add_argument("--out", default=None, help="output directory (overrides [run] out)")
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run(cfg, args.subcommand, args.out)


if __name__ == "__main__":
    sys.exit(main())
