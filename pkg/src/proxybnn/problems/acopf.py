"""AC optimal power flow in polar form.

Decision vector layout: ``[pg (G), qg (G), vm (B), va (B)]``. Inputs are the
real then reactive demands of every load with non-zero nominal demand, in
ascending load order. Everything is per unit, angles in radians.

Branches follow the pi-model with an ideal transformer on the from side::

    S_ij = (Y + Yc_ij)^* |V_i|^2 / |T|^2 - Y^* V_i V_j^* / T
    S_ji = (Y + Yc_ji)^* |V_j|^2         - Y^* V_j V_i^* / T^*

with ``T = tap * exp(j * shift)``. The complex products are expanded into
explicit sin/cos terms so they can be traced by :mod:`proxybnn.autodiff`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import jsonschema
import numpy as np

from .. import autodiff as ad
from .base import ProblemSpec, as_batch


class CaseParseError(ValueError):
    pass


@dataclass
class Bus:
    id: int
    v_l: float
    v_u: float
    ref: bool = False


@dataclass
class Generator:
    bus: int
    pg_l: float
    pg_u: float
    qg_l: float
    qg_u: float
    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0


@dataclass
class Load:
    bus: int
    pd: float
    qd: float


@dataclass
class Shunt:
    bus: int
    gs: float = 0.0
    bs: float = 0.0


@dataclass
class Branch:
    # series admittance g + jb; charging on each end; T = tap * e^{j shift}
    from_bus: int
    to_bus: int
    g: float
    b: float
    g_fr: float = 0.0
    b_fr: float = 0.0
    g_to: float = 0.0
    b_to: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    s_u: float | None = None
    i_u: float | None = None
    theta_l: float = -math.pi / 2
    theta_u: float = math.pi / 2


@dataclass
class AcopfCase:
    buses: list[Bus]
    generators: list[Generator] = field(default_factory=list)
    loads: list[Load] = field(default_factory=list)
    shunts: list[Shunt] = field(default_factory=list)
    branches: list[Branch] = field(default_factory=list)
    base_mva: float = 100.0
    name: str = "case"

    def to_dict(self) -> dict:
        return asdict(self)


_NUM = {"type": "number"}
_OPT_NUM = {"type": ["number", "null"]}


def _obj(cls, required, types):
    props = {f.name: types.get(f.name, _NUM) for f in fields(cls)}
    return {"type": "object", "properties": props, "required": required,
            "additionalProperties": False}


CASE_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "ACOPF case",
    "type": "object",
    "required": ["buses"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "base_mva": {"type": "number", "exclusiveMinimum": 0},
        "buses": {"type": "array", "minItems": 1, "items": _obj(
            Bus, ["id", "v_l", "v_u"], {"id": {"type": "integer"}, "ref": {"type": "boolean"}})},
        "generators": {"type": "array", "items": _obj(
            Generator, ["bus", "pg_l", "pg_u", "qg_l", "qg_u"], {"bus": {"type": "integer"}})},
        "loads": {"type": "array", "items": _obj(
            Load, ["bus", "pd", "qd"], {"bus": {"type": "integer"}})},
        "shunts": {"type": "array", "items": _obj(Shunt, ["bus"], {"bus": {"type": "integer"}})},
        "branches": {"type": "array", "items": _obj(
            Branch, ["from_bus", "to_bus", "g", "b"],
            {"from_bus": {"type": "integer"}, "to_bus": {"type": "integer"},
             "s_u": _OPT_NUM, "i_u": _OPT_NUM})},
    },
}


def _path(error) -> str:
    out = ""
    for p in error.absolute_path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def case_from_dict(data: dict) -> AcopfCase:
    """Validate a decoded case document and build an :class:`AcopfCase`."""
    errors = sorted(jsonschema.Draft7Validator(CASE_SCHEMA).iter_errors(data),
                    key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise CaseParseError(f"{_path(e)}: {e.message}")

    case = AcopfCase(
        buses=[Bus(**b) for b in data["buses"]],
        generators=[Generator(**g) for g in data.get("generators", [])],
        loads=[Load(**ld) for ld in data.get("loads", [])],
        shunts=[Shunt(**s) for s in data.get("shunts", [])],
        branches=[Branch(**br) for br in data.get("branches", [])],
        base_mva=data.get("base_mva", 100.0),
        name=data.get("name", "case"),
    )
    ids = set()
    for i, bus in enumerate(case.buses):
        if bus.id in ids:
            raise CaseParseError(f"buses[{i}].id: duplicate bus id {bus.id}")
        ids.add(bus.id)
        if bus.v_l > bus.v_u:
            raise CaseParseError(f"buses[{i}]: v_l > v_u at bus {bus.id}")
    if not any(b.ref for b in case.buses):
        raise CaseParseError("buses: no reference bus")
    for key in ("generators", "loads", "shunts"):
        for i, item in enumerate(getattr(case, key)):
            if item.bus not in ids:
                raise CaseParseError(f"{key}[{i}].bus: unknown bus {item.bus}")
    for i, g in enumerate(case.generators):
        if g.pg_l > g.pg_u or g.qg_l > g.qg_u:
            raise CaseParseError(f"generators[{i}]: lower bound above upper bound")
    for i, br in enumerate(case.branches):
        for end in ("from_bus", "to_bus"):
            if getattr(br, end) not in ids:
                raise CaseParseError(f"branches[{i}].{end}: unknown bus {getattr(br, end)}")
        if br.from_bus == br.to_bus:
            raise CaseParseError(f"branches[{i}]: self loop at bus {br.from_bus}")
        if br.theta_l > br.theta_u:
            raise CaseParseError(f"branches[{i}]: theta_l > theta_u")
        if br.tap <= 0:
            raise CaseParseError(f"branches[{i}].tap: must be positive")
    return case


def acopf_parse_case(path) -> AcopfCase:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CaseParseError(f"<root>: invalid JSON ({exc})") from exc
    return case_from_dict(data)


def acopf_serialize_case(case: AcopfCase, path=None) -> str:
    text = json.dumps(case.to_dict(), indent=1)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


class AcopfProblem(ProblemSpec):
    """Residual and cost evaluator for one :class:`AcopfCase`."""

    name = "acopf"

    def __init__(self, case: AcopfCase, load_interval=(0.8, 1.2)):
        self.case = case
        self.load_interval = tuple(load_interval)
        nb, ng = len(case.buses), len(case.generators)
        pos = {b.id: i for i, b in enumerate(case.buses)}
        self.n_bus, self.n_gen = nb, ng
        self.active_loads = [k for k, ld in enumerate(case.loads) if ld.pd != 0 or ld.qd != 0]
        nl = len(self.active_loads)
        self.input_dim = 2 * nl
        self.output_dim = 2 * ng + 2 * nb
        self.nominal = np.array([case.loads[k].pd for k in self.active_loads]
                                + [case.loads[k].qd for k in self.active_loads])

        eye = np.eye(self.output_dim)
        self.sel_pg = eye[:, :ng]
        self.sel_qg = eye[:, ng:2 * ng]
        self.sel_vm = eye[:, 2 * ng:2 * ng + nb]
        self.sel_va = eye[:, 2 * ng + nb:]

        self.gen_bus = np.zeros((ng, nb))
        for k, g in enumerate(case.generators):
            self.gen_bus[k, pos[g.bus]] = 1.0
        # demand -> bus injection; pd and qd blocks map to separate bus vectors
        self.load_bus = np.zeros((nl, nb))
        for j, k in enumerate(self.active_loads):
            self.load_bus[j, pos[case.loads[k].bus]] = 1.0
        self.gs = np.zeros(nb)
        self.bs = np.zeros(nb)
        for s in case.shunts:
            self.gs[pos[s.bus]] += s.gs
            self.bs[pos[s.bus]] += s.bs
        self.ref = np.array([pos[b.id] for b in case.buses if b.ref], dtype=int)
        self.sel_ref = np.zeros((nb, self.ref.size))
        self.sel_ref[self.ref, np.arange(self.ref.size)] = 1.0

        ne = len(case.branches)
        self.n_branch = ne
        self.f_inc = np.zeros((nb, ne))
        self.t_inc = np.zeros((nb, ne))
        for e, br in enumerate(case.branches):
            self.f_inc[pos[br.from_bus], e] = 1.0
            self.t_inc[pos[br.to_bus], e] = 1.0
        arr = {k: np.array([getattr(br, k) for br in case.branches], dtype=float)
               for k in ("g", "b", "g_fr", "b_fr", "g_to", "b_to", "tap", "shift",
                         "theta_l", "theta_u")}
        g, b = arr["g"], arr["b"]
        tr = arr["tap"] * np.cos(arr["shift"])
        ti = arr["tap"] * np.sin(arr["shift"])
        tm2 = arr["tap"] ** 2
        self._c = {
            "pf_sq": (g + arr["g_fr"]) / tm2,
            "qf_sq": -(b + arr["b_fr"]) / tm2,
            "f_cos": (-g * tr + b * ti) / tm2,
            "f_sin": (-b * tr - g * ti) / tm2,
            "pt_sq": g + arr["g_to"],
            "qt_sq": -(b + arr["b_to"]),
            "t_cos": (-g * tr - b * ti) / tm2,
            "t_sin": (-b * tr + g * ti) / tm2,
        }
        self.theta_l, self.theta_u = arr["theta_l"], arr["theta_u"]
        s_u = np.array([np.nan if br.s_u is None else br.s_u for br in case.branches])
        i_u = np.array([np.nan if br.i_u is None else br.i_u for br in case.branches])
        self.s_lim = np.flatnonzero(np.isfinite(s_u))
        self.i_lim = np.flatnonzero(np.isfinite(i_u))
        self.s_u, self.i_u = s_u, i_u

        gens = case.generators
        self.lower = np.concatenate([
            [gn.pg_l for gn in gens], [gn.qg_l for gn in gens],
            [bb.v_l for bb in case.buses], np.full(nb, -np.inf)])
        self.upper = np.concatenate([
            [gn.pg_u for gn in gens], [gn.qg_u for gn in gens],
            [bb.v_u for bb in case.buses], np.full(nb, np.inf)])
        self.cost_coef = np.array([[gn.c2, gn.c1, gn.c0] for gn in gens]).reshape(ng, 3)

    @property
    def output_groups(self):
        ng, nb = self.n_gen, self.n_bus
        return [
            ("pg", np.arange(ng)),
            ("qg", np.arange(ng, 2 * ng)),
            ("vm", np.arange(2 * ng, 2 * ng + nb)),
            ("va", np.arange(2 * ng + nb, 2 * ng + 2 * nb)),
        ]

    @property
    def n_eq(self) -> int:
        return 2 * self.n_bus + self.ref.size

    def split(self, y):
        """``(pg, qg, vm, va)`` views of a decision batch."""
        y = as_batch(y)
        return y @ self.sel_pg, y @ self.sel_qg, y @ self.sel_vm, y @ self.sel_va

    def pack(self, pg, qg, vm, va) -> np.ndarray:
        return np.concatenate([np.atleast_2d(a) for a in (pg, qg, vm, va)], axis=1)

    def branch_flows(self, y):
        """Per-branch ``(p_fr, q_fr, p_to, q_to)``, each of shape ``(N, E)``."""
        _, _, vm, va = self.split(y)
        c = self._c
        vf, vt = vm @ self.f_inc, vm @ self.t_inc
        dth = va @ self.f_inc - va @ self.t_inc
        vv = vf * vt
        cs, sn = vv * ad.cos(dth), vv * ad.sin(dth)
        vf2, vt2 = ad.square(vf), ad.square(vt)
        # angle at the to end is -dth: cos is even, sin is odd
        p_fr = c["pf_sq"] * vf2 + c["f_cos"] * cs + c["f_sin"] * sn
        q_fr = c["qf_sq"] * vf2 - c["f_sin"] * cs + c["f_cos"] * sn
        p_to = c["pt_sq"] * vt2 + c["t_cos"] * cs - c["t_sin"] * sn
        q_to = c["qt_sq"] * vt2 - c["t_sin"] * cs - c["t_cos"] * sn
        return p_fr, q_fr, p_to, q_to

    def demand(self, x):
        x = as_batch(x)
        nl = len(self.active_loads)
        return x[:, :nl] @ self.load_bus, x[:, nl:] @ self.load_bus

    def eq_residuals(self, x, y):
        """Real balance per bus, reactive balance per bus, reference angles."""
        x, y = as_batch(x), as_batch(y)
        pg, qg, vm, va = self.split(y)
        pd, qd = self.demand(x)
        vm2 = ad.square(vm)
        if self.n_branch:
            p_fr, q_fr, p_to, q_to = self.branch_flows(y)
            p_out = p_fr @ self.f_inc.T + p_to @ self.t_inc.T
            q_out = q_fr @ self.f_inc.T + q_to @ self.t_inc.T
        else:
            p_out = q_out = 0.0
        p_bal = pg @ self.gen_bus - pd - self.gs * vm2 - p_out
        q_bal = qg @ self.gen_bus - qd + self.bs * vm2 - q_out
        # stack [p_bal, q_bal, va_ref] via placement matmuls
        nb, nr = self.n_bus, self.ref.size
        place_p = np.hstack([np.eye(nb), np.zeros((nb, nb + nr))])
        place_q = np.hstack([np.zeros((nb, nb)), np.eye(nb), np.zeros((nb, nr))])
        place_r = np.hstack([np.zeros((nr, 2 * nb)), np.eye(nr)])
        return p_bal @ place_p + q_bal @ place_q + (va @ self.sel_ref) @ place_r

    def ineq_residuals(self, x, y):
        """One-sided residuals, each ``<= 0`` when the constraint holds.

        Order: generator/voltage bounds, apparent-power limits (from then to
        end), current limits (from then to end), angle-difference bounds.
        """
        y = as_batch(y)
        blocks = []
        finite_up = np.flatnonzero(np.isfinite(self.upper))
        finite_lo = np.flatnonzero(np.isfinite(self.lower))
        sel = np.zeros((self.output_dim, finite_up.size + finite_lo.size))
        sel[finite_up, np.arange(finite_up.size)] = 1.0
        sel[finite_lo, finite_up.size + np.arange(finite_lo.size)] = -1.0
        blocks.append((y @ sel + np.concatenate([-self.upper[finite_up], self.lower[finite_lo]]),
                       sel.shape[1]))
        if self.n_branch:
            _, _, vm, va = self.split(y)
            p_fr, q_fr, p_to, q_to = self.branch_flows(y)
            s_fr = ad.sqrt(ad.square(p_fr) + ad.square(q_fr))
            s_to = ad.sqrt(ad.square(p_to) + ad.square(q_to))
            ne = self.n_branch
            if self.s_lim.size:
                k = self.s_lim
                pick = np.zeros((ne, k.size))
                pick[k, np.arange(k.size)] = 1.0
                lim = self.s_u[k]
                blocks.append((s_fr @ pick - lim, k.size))
                blocks.append((s_to @ pick - lim, k.size))
            if self.i_lim.size:
                k = self.i_lim
                pick = np.zeros((ne, k.size))
                pick[k, np.arange(k.size)] = 1.0
                lim = self.i_u[k]
                vf, vt = vm @ self.f_inc, vm @ self.t_inc
                blocks.append((s_fr @ pick - (vf @ pick) * lim, k.size))
                blocks.append((s_to @ pick - (vt @ pick) * lim, k.size))
            dth = va @ self.f_inc - va @ self.t_inc
            blocks.append((dth - self.theta_u, ne))
            blocks.append((self.theta_l - dth, ne))
        total = sum(w for _, w in blocks)
        out, off = None, 0
        for blk, w in blocks:
            place = np.zeros((w, total))
            place[np.arange(w), off + np.arange(w)] = 1.0
            term = blk @ place
            out = term if out is None else out + term
            off += w
        return out

    def cost(self, x, y):
        pg = as_batch(y) @ self.sel_pg
        c = self.cost_coef
        return np.sum(c[:, 0] * pg ** 2 + c[:, 1] * pg + c[:, 2], axis=1)

    def sample_inputs(self, n, seed):
        """Nominal loads scaled per load by a uniform factor."""
        rng = np.random.default_rng(seed)
        lo, hi = self.load_interval
        nl = len(self.active_loads)
        scale = rng.uniform(lo, hi, size=(n, nl))
        return np.concatenate([scale, scale], axis=1) * self.nominal

    def inputs_from_demand(self, pd, qd) -> np.ndarray:
        """Pack demand arrays (active loads only, or all loads) into ``x``."""
        pd, qd = np.asarray(pd, dtype=float), np.asarray(qd, dtype=float)
        if pd.shape[-1] == len(self.case.loads) and len(self.case.loads) != len(self.active_loads):
            pd, qd = pd[..., self.active_loads], qd[..., self.active_loads]
        if pd.shape[-1] != len(self.active_loads) or qd.shape != pd.shape:
            raise ValueError("demand vector length does not match the case loads")
        return np.concatenate([pd, qd], axis=-1)

    def to_dict(self) -> dict:
        return {"kind": "acopf", "case": self.case.to_dict(),
                "load_interval": list(self.load_interval)}


def acopf_residuals_eq(case_or_problem, x, y):
    return _problem(case_or_problem).eq_residuals(x, y)


def acopf_residuals_ineq(case_or_problem, x, y):
    return _problem(case_or_problem).ineq_residuals(x, y)


def acopf_cost(case_or_problem, y):
    return _problem(case_or_problem).cost(None, y)


def _problem(obj):
    return obj if isinstance(obj, AcopfProblem) else AcopfProblem(obj)
