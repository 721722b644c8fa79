"""Small ACOPF cases used across tests."""

import numpy as np

from proxybnn.problems import AcopfCase, AcopfProblem, Branch, Bus, Generator, Load, Shunt

Y_LINE = 1.0 / complex(0.01, 0.1)


def two_bus(load=(0.0, 0.0), s_u=None, i_u=None, b_fr=0.0, b_to=0.0, tap=1.0, shift=0.0,
            y=Y_LINE) -> AcopfCase:
    buses = [Bus(1, 0.9, 1.1, ref=True), Bus(2, 0.9, 1.1)]
    gens = [Generator(1, -5.0, 5.0, -5.0, 5.0, 0.1, 5.0, 10.0),
            Generator(2, -5.0, 5.0, -5.0, 5.0, 0.1, 5.0, 10.0)]
    loads = [Load(2, *load)]
    br = Branch(1, 2, y.real, y.imag, b_fr=b_fr, b_to=b_to, tap=tap, shift=shift,
                s_u=s_u, i_u=i_u)
    return AcopfCase(buses, gens, loads, [], [br], name="two_bus")


def three_bus() -> AcopfCase:
    """Meshed case with a transformer, line charging and a shunt; a generator at
    every bus so any voltage profile can be balanced."""
    buses = [Bus(1, 0.94, 1.06, ref=True), Bus(2, 0.94, 1.06), Bus(3, 0.94, 1.06)]
    gens = [Generator(b, -10.0, 10.0, -10.0, 10.0, 0.11, 5.0, 150.0) for b in (1, 2, 3)]
    loads = [Load(2, 0.9, 0.3), Load(3, 1.2, 0.4), Load(3, 0.0, 0.0)]
    shunts = [Shunt(3, 0.01, 0.05)]
    y12, y13, y23 = 1 / complex(0.02, 0.06), 1 / complex(0.08, 0.24), 1 / complex(0.06, 0.18)
    branches = [
        Branch(1, 2, y12.real, y12.imag, b_fr=0.03, b_to=0.03, s_u=5.0, i_u=5.0),
        Branch(1, 3, y13.real, y13.imag, b_fr=0.025, b_to=0.025, tap=0.98, shift=0.02, s_u=5.0),
        Branch(2, 3, y23.real, y23.imag, g_fr=0.001, g_to=0.002, b_fr=0.02, b_to=0.02),
    ]
    return AcopfCase(buses, gens, loads, shunts, branches, name="three_bus")


def complex_flows(case: AcopfCase, vm, va):
    """Branch power flows by direct complex arithmetic (independent oracle)."""
    pos = {b.id: i for i, b in enumerate(case.buses)}
    V = np.asarray(vm) * np.exp(1j * np.asarray(va))
    out = []
    for br in case.branches:
        y = complex(br.g, br.b)
        yf, yt = complex(br.g_fr, br.b_fr), complex(br.g_to, br.b_to)
        T = br.tap * np.exp(1j * br.shift)
        vi, vj = V[pos[br.from_bus]], V[pos[br.to_bus]]
        # current injections of the pi model with ideal transformer on the from side
        i_f = (y + yf) / abs(T) ** 2 * vi - y / np.conj(T) * vj
        i_t = (y + yt) * vj - y / T * vi
        out.append((vi * np.conj(i_f), vj * np.conj(i_t)))
    return out


def balanced_dispatch(case: AcopfCase, vm, va, pd=None, qd=None):
    """Generator set points that balance every bus exactly (one generator per bus)."""
    pos = {b.id: i for i, b in enumerate(case.buses)}
    nb = len(case.buses)
    p = np.zeros(nb, dtype=complex)
    for br, (sf, st) in zip(case.branches, complex_flows(case, vm, va)):
        p[pos[br.from_bus]] += sf
        p[pos[br.to_bus]] += st
    pd = [ld.pd for ld in case.loads] if pd is None else pd
    qd = [ld.qd for ld in case.loads] if qd is None else qd
    for ld, a, r in zip(case.loads, pd, qd):
        p[pos[ld.bus]] += complex(a, r)
    vm = np.asarray(vm)
    for s in case.shunts:
        p[pos[s.bus]] += complex(s.gs, -s.bs) * vm[pos[s.bus]] ** 2
    gen_of_bus = {g.bus: k for k, g in enumerate(case.generators)}
    pg = np.zeros(len(case.generators))
    qg = np.zeros(len(case.generators))
    for bus, i in pos.items():
        k = gen_of_bus[bus]
        pg[k], qg[k] = p[i].real, p[i].imag
    return pg, qg


def problem(case) -> AcopfProblem:
    return AcopfProblem(case)
