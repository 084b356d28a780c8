"""Run configuration: a small INI dialect with line-numbered validation.

Format: ``[section]`` headers, ``key = value`` lines, ``#`` comments.  Every
key is declared in :data:`SCHEMA`; unknown sections or keys, malformed values
and out-of-range parameters raise :class:`ConfigError` carrying the line
number.  The standard library's configparser is not used because it does not
keep line numbers for the semantic checks done here.

Initial data descriptors (``u0``):
    constant <c>
    gaussian <cx> <cy> <width> <height> [<base>]   base + height exp(-d^2 / 2 width^2)
    fourier <c0>; <amp> <k1> <k2> <phase>; ...      c0 + sum amp sin(k.x + phase)
"""

from __future__ import annotations

import dataclasses
import hashlib
import math

import numpy as np

from .errors import ConfigError, InvalidSpec
from .metric import FourierMode, MeasureSpec, MetricSpec, SpaceConfig, TorusDomain

CHECKS = ("liyau", "harnack", "gap", "bochner", "comparison", "logsobolev")


def _float(s):
    return float(s)


def _int(s):
    return int(s)


def _floats(s):
    return tuple(float(t) for t in s.replace(",", " ").split())


def _ints(s):
    return tuple(int(t) for t in s.replace(",", " ").split())


def _mode(s):
    vals = _floats(s)
    if len(vals) != 5:
        raise ValueError("a Fourier mode needs five numbers: const, amp, k1, k2, phase")
    return FourierMode(vals[0], vals[1], int(vals[2]), int(vals[3]), vals[4])


def _auto_float(s):
    return "auto" if s.strip() == "auto" else float(s)


def _checks(s):
    names = tuple(t for t in s.replace(",", " ").split())
    for n in names:
        if n not in CHECKS:
            raise ValueError(f"unknown check {n!r} (choose from {', '.join(CHECKS)})")
    return names


@dataclasses.dataclass(frozen=True)
class InitialData:
    kind: str
    values: tuple

    def evaluate(self, space: SpaceConfig):
        X = space.domain.nodes()
        d = space.domain
        if self.kind == "constant":
            return np.full(d.shape, self.values[0])
        if self.kind == "gaussian":
            cx, cy, w, hgt, *rest = self.values
            base = rest[0] if rest else 1.0
            dx = (X[..., 0] - cx + d.L1 / 2) % d.L1 - d.L1 / 2
            dy = (X[..., 1] - cy + d.L2 / 2) % d.L2 - d.L2 / 2
            return base + hgt * np.exp(-(dx ** 2 + dy ** 2) / (2 * w ** 2))
        c0, terms = self.values
        u = np.full(d.shape, c0)
        for amp, k1, k2, ph in terms:
            u += amp * np.sin(2 * math.pi * (k1 * X[..., 0] / d.L1 + k2 * X[..., 1] / d.L2) + ph)
        return u


def _u0(s):
    parts = s.split(None, 1)
    if not parts:
        raise ValueError("empty initial-data descriptor")
    kind, rest = parts[0], (parts[1] if len(parts) > 1 else "")
    if kind == "constant":
        v = _floats(rest)
        if len(v) != 1 or v[0] <= 0:
            raise ValueError("constant initial data needs one positive value")
        return InitialData("constant", v)
    if kind == "gaussian":
        v = _floats(rest)
        if len(v) not in (4, 5) or v[2] <= 0:
            raise ValueError("gaussian needs cx cy width height [base] with width > 0")
        return InitialData("gaussian", v)
    if kind == "fourier":
        chunks = [c for c in rest.split(";")]
        c0 = _floats(chunks[0])
        if len(c0) != 1:
            raise ValueError("fourier needs the constant term first")
        terms = []
        for c in chunks[1:]:
            t = _floats(c)
            if len(t) != 4:
                raise ValueError("each fourier term is: amp k1 k2 phase")
            terms.append(t)
        return InitialData("fourier", (c0[0], tuple(terms)))
    raise ValueError(f"unknown initial-data kind {kind!r} (constant, gaussian, fourier)")


TAU = 2 * math.pi

SCHEMA = {
    "space": {
        "family": (str, "euclidean"), "n1": (_int, 128), "n2": (_int, 128),
        "L1": (_float, TAU), "L2": (_float, TAU), "epsilon": (_float, 0.0),
        "k1": (_int, 1), "k2": (_int, 1),
        "drift1": (_mode, FourierMode()), "drift2": (_mode, FourierMode()),
        "phi": (_mode, FourierMode()), "lam_coeff": (_float, 0.0),
        "eta": (_float, 1e-10),
    },
    "solver": {
        "a": (_float, 0.0), "b": (_float, 0.0), "dt": (_auto_float, "auto"),
        "cfl": (_float, 0.5), "t_end": (_float, 1.0), "snapshots": (_floats, ()),
        "u0": (_u0, InitialData("fourier", (2.0, ((1.0, 1, 0, 0),)))),
        "reduce_b": (_int, 0),
    },
    "checks": {
        "run": (_checks, CHECKS), "beta": (_float, 1.5), "delta": (_float, 0.9),
        "N": (_float, 4.0), "K": (_auto_float, "auto"), "A": (_auto_float, "auto"),
        "K_local": (_auto_float, "auto"), "A_local": (_auto_float, "auto"),
        "K0": (_auto_float, "auto"), "K0_slack": (_float, 0.0),
        "R": (_auto_float, "auto"), "p": (_ints, None), "t_min": (_float, 0.05),
        "tol_liyau": (_float, 1e-2), "tol_harnack": (_float, 1e-2), "tol_gap": (_float, 1e-3),
        "tol_bochner": (_float, 1e-3), "tol_cmp": (_float, 5e-2), "tol_el": (_float, 1e-3),
        "pairs": (_int, 20), "bochner_samples": (_int, 5), "scan_stride": (_int, 4),
        "scan_angles": (_int, 16), "logsobolev_iters": (_int, 200),
    },
    "gap": {
        "a": (_float, -0.5), "b": (_float, 0.5), "K": (_float, 0.0), "A": (_float, 1.0),
        "u0": (_u0, InitialData("fourier", (math.e, ((0.3, 1, 2, 0.0),)))),
        "tol_res": (_float, 1e-8),
    },
    "run": {"seed": (_int, 0), "out": (str, "finslab_out")},
}


@dataclasses.dataclass
class RunConfig:
    space: SpaceConfig
    solver: dict
    checks: dict
    gap: dict
    seed: int
    out: str
    text_hash: str
    lines: dict = dataclasses.field(default_factory=dict)   # (section, key) -> line number

    @property
    def p(self):
        p = self.checks["p"]
        if p is None:
            return (self.space.domain.n1 // 2, self.space.domain.n2 // 2)
        return p

    @property
    def R(self):
        R = self.checks["R"]
        d = self.space.domain
        return min(d.L1, d.L2) / 5 if R == "auto" else R


def _raw(text):
    sections = {}
    lines = {}
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if s.startswith("["):
            if not s.endswith("]"):
                raise ConfigError(f"malformed section header {s!r}", no)
            current = s[1:-1].strip()
            if current not in SCHEMA:
                raise ConfigError(f"unknown section [{current}]", no)
            if current in sections:
                raise ConfigError(f"duplicate section [{current}]", no)
            sections[current] = {}
            lines[(current, None)] = no
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", no)
        if current is None:
            raise ConfigError("key outside of any section", no)
        key, val = (t.strip() for t in s.split("=", 1))
        if key not in SCHEMA[current]:
            raise ConfigError(f"unknown key {key!r} in [{current}]", no)
        if key in sections[current]:
            raise ConfigError(f"duplicate key {key!r} in [{current}]", no)
        sections[current][key] = (val, no)
    return sections, lines


def _typed(sections, lines):
    out = {}
    for sec, keys in SCHEMA.items():
        vals = {}
        given = sections.get(sec, {})
        for key, (conv, default) in keys.items():
            if key in given:
                raw, no = given[key]
                try:
                    vals[key] = conv(raw)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"[{sec}] {key}: {exc}", no) from None
                lines[(sec, key)] = no
            else:
                vals[key] = default
        out[sec] = vals
    return out


def _line(lines, sec, key):
    return lines.get((sec, key), lines.get((sec, None)))


def _require(cond, msg, lines, sec, key):
    if not cond:
        raise ConfigError(msg, _line(lines, sec, key))


def parse_config(text: str) -> RunConfig:
    """Parse and fully validate a configuration text."""
    sections, lines = _raw(text)
    if "space" not in sections:
        raise ConfigError("missing required section [space]", 1)
    v = _typed(sections, lines)
    sp, so, ch, gp = v["space"], v["solver"], v["checks"], v["gap"]
    fam = sp["family"]
    _require(fam in ("euclidean", "conformal", "randers"),
             f"family must be euclidean, conformal or randers (got {fam!r})", lines, "space", "family")
    for key in ("n1", "n2"):
        _require(sp[key] >= 16 and sp[key] % 2 == 0, f"{key} must be even and >= 16",
                 lines, "space", key)
    for key in ("L1", "L2"):
        _require(sp[key] > 0, f"{key} must be positive", lines, "space", key)
    _require(abs(sp["epsilon"]) <= 0.5, "epsilon must satisfy |epsilon| <= 0.5",
             lines, "space", "epsilon")
    has_drift = sp["drift1"].sup_abs() > 0 or sp["drift2"].sup_abs() > 0
    if fam != "randers":
        _require(not has_drift, f"the {fam} family takes no drift", lines, "space", "drift1")
    if fam == "euclidean":
        _require(sp["epsilon"] == 0, "the euclidean family takes no epsilon", lines, "space", "epsilon")
    try:
        metric = MetricSpec(fam, sp["epsilon"], sp["k1"], sp["k2"], (sp["drift1"], sp["drift2"]))
        space = SpaceConfig(TorusDomain(sp["L1"], sp["L2"], sp["n1"], sp["n2"]), metric,
                            MeasureSpec(sp["phi"], sp["lam_coeff"]), eta=sp["eta"],
                            seed=v["run"]["seed"])
    except InvalidSpec as exc:
        key = "drift1" if "drift" in str(exc) else "family"
        raise ConfigError(str(exc), _line(lines, "space", key)) from None

    _require(so["t_end"] > 0, "t_end must be positive", lines, "solver", "t_end")
    _require(so["cfl"] > 0 and so["cfl"] <= 1, "cfl must lie in (0, 1]", lines, "solver", "cfl")
    _require(so["dt"] == "auto" or so["dt"] > 0, "dt must be positive", lines, "solver", "dt")
    snaps = so["snapshots"]
    _require(all(0 <= t <= so["t_end"] for t in snaps) and all(b > a for a, b in zip(snaps, snaps[1:])),
             "snapshots must be increasing and lie in [0, t_end]", lines, "solver", "snapshots")
    _require(not (so["reduce_b"] and so["a"] == 0 and so["b"] != 0),
             "reduce_b needs a != 0", lines, "solver", "reduce_b")

    _require(ch["beta"] > 1, "beta must exceed 1", lines, "checks", "beta")
    _require(0 < ch["delta"] < 1, "delta must lie in (0, 1)", lines, "checks", "delta")
    _require(ch["N"] > 2, "N must exceed the dimension 2", lines, "checks", "N")
    _require(ch["t_min"] > 0, "t_min must be positive", lines, "checks", "t_min")
    for key in ("K", "A", "K_local", "A_local", "K0", "R"):
        val = ch[key]
        if val != "auto":
            lo = 1.0 if key.startswith("A") else 0.0
            ok = val > 0 if key == "R" else val >= lo
            _require(ok, f"{key} must be {'positive' if key == 'R' else f'>= {lo:g}'}",
                     lines, "checks", key)
    if ch["p"] is not None:
        _require(len(ch["p"]) == 2, "p is a node index pair 'i, j'", lines, "checks", "p")
    for key in ("pairs", "bochner_samples", "scan_stride", "scan_angles", "logsobolev_iters"):
        _require(ch[key] >= 1, f"{key} must be at least 1", lines, "checks", key)
    if "gap" in ch["run"]:
        _require(gp["a"] != 0, "the gap check needs a != 0", lines, "gap", "a")
    _require(gp["K"] >= 0 and gp["A"] >= 1, "gap K >= 0 and A >= 1 required", lines, "gap", "K")

    return RunConfig(space=space, solver=so, checks=ch, gap=gp, seed=v["run"]["seed"],
                     out=v["run"]["out"], text_hash=hashlib.sha256(text.encode()).hexdigest()[:16],
                     lines=lines)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
