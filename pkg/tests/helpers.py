"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import math
import re

import numpy as np

from tdsynth.netmodel import (
    Branch,
    Bus,
    BusKind,
    Generator,
    NetworkCase,
    OltcTransformer,
)
from tdsynth.caseio import CaseDocument
from tdsynth.powerflow import SolverOptions, solve


def two_bus_case(p_load=0.1, q_load=0.0, r=0.0, x=0.1) -> NetworkCase:
    case = NetworkCase(base_mva=100.0)
    case.buses.append(Bus(id=1, kind=BusKind.SLACK, v_mag=1.0, base_kv=130.0))
    case.buses.append(Bus(id=2, kind=BusKind.PQ, p_load=p_load, q_load=q_load, base_kv=130.0))
    case.generators.append(
        Generator(bus_id=1, p=p_load, v_set=1.0, p_min=0.0, p_max=5.0, q_min=-5.0, q_max=5.0)
    )
    case.branches.append(Branch(from_bus=1, to_bus=2, r=r, x=x))
    return case


def two_bus_analytic(p_load=0.1, x=0.1):
    """Closed-form solution of the lossless 2-bus case: the load-bus voltage
    solves u^2 - u + (p x)^2 = 0 with u = V2^2 (high-voltage root)."""
    px = p_load * x
    u = (1.0 + math.sqrt(1.0 - 4.0 * px * px)) / 2.0
    v2 = math.sqrt(u)
    d2 = -math.asin(px / v2)
    return v2, d2


def radial_oltc_case(source_v=1.0, load_p=0.3, load_q=0.1) -> NetworkCase:
    """Source bus, tap-changing transformer, substation, one feeder bus."""
    case = NetworkCase(base_mva=100.0)
    case.buses.append(Bus(id=1, kind=BusKind.SLACK, v_mag=source_v, base_kv=33.0))
    case.buses.append(Bus(id=2, kind=BusKind.PQ, base_kv=11.0))
    case.buses.append(Bus(id=3, kind=BusKind.PQ, p_load=load_p, q_load=load_q, base_kv=11.0))
    case.generators.append(
        Generator(bus_id=1, v_set=source_v, p_min=-5, p_max=5, q_min=-5, q_max=5)
    )
    case.branches.append(Branch(from_bus=1, to_bus=2, r=0.005, x=0.1))
    case.branches.append(Branch(from_bus=2, to_bus=3, r=0.15, x=0.08))
    case.oltcs.append(
        OltcTransformer(branch_ref=0, controlled_bus=2, v_set=1.03, deadband=0.02)
    )
    case.oltcs[0].sync_branch(case)
    return case


def random_network(rng: np.random.Generator, n_buses: int) -> NetworkCase:
    """Connected random case: spanning tree plus a few extra edges, modest
    loads, a slack at bus 1 and a sprinkling of PV buses."""
    case = NetworkCase(base_mva=100.0)
    for i in range(1, n_buses + 1):
        case.buses.append(
            Bus(
                id=i,
                kind=BusKind.SLACK if i == 1 else BusKind.PQ,
                p_load=float(rng.uniform(0.0, 0.25)) if i > 1 else 0.0,
                q_load=float(rng.uniform(-0.05, 0.1)) if i > 1 else 0.0,
                g_shunt=float(rng.uniform(0, 0.02)) if rng.random() < 0.2 else 0.0,
                b_shunt=float(rng.uniform(-0.05, 0.1)) if rng.random() < 0.2 else 0.0,
                base_kv=20.0,
            )
        )
    case.generators.append(
        Generator(bus_id=1, v_set=float(rng.uniform(1.0, 1.04)),
                  p_min=-10, p_max=10, q_min=-10, q_max=10)
    )
    for i in range(2, n_buses + 1):
        j = int(rng.integers(1, i))
        case.branches.append(
            Branch(
                from_bus=j,
                to_bus=i,
                r=float(rng.uniform(0.005, 0.08)),
                x=float(rng.uniform(0.02, 0.25)),
                b_charging=float(rng.uniform(0.0, 0.08)),
                ratio=float(rng.choice([1.0, 1.0, 0.98, 1.02])),
                phase_shift=float(rng.choice([0.0, 0.0, 0.02, -0.015])),
            )
        )
    for _ in range(int(rng.integers(0, max(1, n_buses // 3)))):
        a, b = rng.integers(1, n_buses + 1, size=2)
        if a != b:
            case.branches.append(
                Branch(from_bus=int(a), to_bus=int(b),
                       r=float(rng.uniform(0.005, 0.05)),
                       x=float(rng.uniform(0.05, 0.2)))
            )
    # a couple of PV buses with their own generators
    for i in rng.choice(np.arange(2, n_buses + 1), size=min(2, n_buses - 1), replace=False):
        b = case.bus(int(i))
        if rng.random() < 0.7:
            b.kind = BusKind.PV
            case.generators.append(
                Generator(bus_id=b.id, p=float(rng.uniform(0, 0.3)),
                          v_set=float(rng.uniform(0.99, 1.03)),
                          p_min=0, p_max=2, q_min=-2, q_max=2)
            )
    return case


_NAME_ALPHABET = "abcdefghijklmnopqrstuvwxyzABC 0123456789_-"


def random_document(rng: np.random.Generator) -> CaseDocument:
    """Structurally valid random case document for round-trip checks."""

    def cell():
        kind = rng.random()
        if kind < 0.3:
            return float(rng.integers(-1000, 1000))
        if kind < 0.6:
            return float(np.round(rng.uniform(-100, 100), 4))
        return float(rng.normal() * 10.0 ** int(rng.integers(-6, 7)))

    def rows(n, width):
        return [[cell() for _ in range(width)] for _ in range(n)]

    nb = int(rng.integers(1, 7))
    doc = CaseDocument(
        version="2",
        base_mva=float(rng.choice([100.0, 50.0, float(np.round(rng.uniform(1, 500), 3))])),
        matrices={
            "bus": rows(nb, int(rng.integers(13, 16))),
            "gen": rows(int(rng.integers(0, 5)), 21),
            "branch": rows(int(rng.integers(0, 9)), 13),
        },
    )
    if rng.random() < 0.5:
        doc.matrices["gencost"] = rows(len(doc.matrices["gen"]), 7)
    if rng.random() < 0.4:
        name = "".join(rng.choice(list("abcdefgh_")) for _ in range(int(rng.integers(3, 9))))
        if name not in doc.matrices:
            doc.matrices[name] = rows(int(rng.integers(1, 4)), int(rng.integers(1, 6)))
    if rng.random() < 0.5:
        doc.bus_name = [
            "".join(rng.choice(list(_NAME_ALPHABET)) for _ in range(int(rng.integers(1, 12)))).strip()
            or f"b{i}"
            for i in range(nb)
        ]
    return doc


def raw_bus_load_sums(case_m_text: str) -> tuple[float, float]:
    """Spreadsheet-style oracle: pull PD/QD straight out of the bus-table
    text without going through the parser, and sum them in MW/Mvar."""
    block = re.search(r"mpc\.bus = \[\n(.*?)\];", case_m_text, re.S).group(1)
    p = q = 0.0
    for line in block.strip().splitlines():
        cells = line.strip().rstrip(";").split("\t")
        p += float(cells[2])
        q += float(cells[3])
    return p, q


def losses_from_flows(sol) -> float:
    """Total active losses summed branch by branch."""
    return float(np.sum(sol.p_from + sol.p_to))


def jacobian_fd_relative_gap(case, rng: np.random.Generator) -> float:
    """Worst relative disagreement between the analytic Newton Jacobian and a
    central finite difference of the mismatch function, at a random state."""
    from tdsynth.netmodel import BusKind
    from tdsynth.powerflow import _dSbus_dV, _mismatch, _specified_injection, build_ybus

    Ybus = build_ybus(case)
    Sbus = _specified_injection(case)
    kinds = [b.kind for b in case.buses]
    pv = np.array([i for i, k in enumerate(kinds) if k is BusKind.PV], dtype=int)
    pq = np.array([i for i, k in enumerate(kinds) if k is BusKind.PQ], dtype=int)
    pvpq = np.concatenate([pv, pq])
    vm = rng.uniform(0.95, 1.05, size=len(case.buses))
    va = rng.uniform(-0.2, 0.2, size=len(case.buses))

    def F(x):
        vm_l, va_l = vm.copy(), va.copy()
        va_l[pvpq] = x[: len(pvpq)]
        vm_l[pq] = x[len(pvpq):]
        V = vm_l * np.exp(1j * va_l)
        return _mismatch(Ybus, V, Sbus, pvpq, pq)

    x0 = np.concatenate([va[pvpq], vm[pq]])
    V0 = vm * np.exp(1j * va)
    dSa, dSm = _dSbus_dV(Ybus, V0)
    J = np.block(
        [
            [dSa[pvpq, :][:, pvpq].real.toarray(), dSm[pvpq, :][:, pq].real.toarray()],
            [dSa[pq, :][:, pvpq].imag.toarray(), dSm[pq, :][:, pq].imag.toarray()],
        ]
    )
    h = 6e-6
    J_fd = np.empty_like(J)
    for j in range(len(x0)):
        e = np.zeros_like(x0)
        e[j] = h
        J_fd[:, j] = (F(x0 + e) - F(x0 - e)) / (2 * h)
    return float(np.abs(J - J_fd).max() / max(1.0, np.abs(J).max()))


def three_bus_opf_case(load=0.8) -> NetworkCase:
    """Two generators with deliberately different quadratic costs feeding one
    load over a small triangle; used against the grid-search oracle."""
    case = NetworkCase(base_mva=100.0)
    case.buses.append(Bus(id=1, kind=BusKind.SLACK, base_kv=130.0, v_max=1.05, v_min=0.95))
    case.buses.append(Bus(id=2, kind=BusKind.PV, base_kv=130.0, v_max=1.05, v_min=0.95))
    case.buses.append(Bus(id=3, kind=BusKind.PQ, p_load=load, q_load=load / 4,
                          base_kv=130.0, v_max=1.05, v_min=0.95))
    case.generators.append(
        Generator(bus_id=1, p=load / 2, v_set=1.02, p_min=0.0, p_max=2.0,
                  q_min=-2.0, q_max=2.0, cost=(1.0, 0.0, 0.0))
    )
    case.generators.append(
        Generator(bus_id=2, p=load / 2, v_set=1.02, p_min=0.0, p_max=2.0,
                  q_min=-2.0, q_max=2.0, cost=(2.0, 0.0, 0.0))
    )
    case.branches.append(Branch(from_bus=1, to_bus=2, r=0.01, x=0.06))
    case.branches.append(Branch(from_bus=1, to_bus=3, r=0.01, x=0.06))
    case.branches.append(Branch(from_bus=2, to_bus=3, r=0.01, x=0.06))
    return case


def grid_search_dispatch_cost(
    case: NetworkCase,
    p_step: float = 0.001,
    v_grid=(0.99, 1.03, 1.045, 1.05),
    v_limits=(0.95, 1.05),
) -> float:
    """Brute-force oracle for the 3-bus case: enumerate the PV unit's output
    on a fixed grid and both setpoint voltages on a coarse one, solve an
    ordinary power flow for each point, keep the cheapest feasible cost."""
    base = case.base_mva
    load = case.buses[2].p_load
    best = math.inf
    opts = SolverOptions(tolerance=1e-10)
    work = case.clone()
    g_a, g_b = work.generators
    for v_a in v_grid:
        for v_b in v_grid:
            g_a.v_set = v_a
            g_b.v_set = v_b
            for p_b in np.arange(0.0, load + 5 * p_step, p_step):
                g_b.p = float(p_b)
                sol = solve(work, opts)
                if not sol.converged:
                    continue
                vm = sol.v_mag
                if vm.min() < v_limits[0] - 1e-9 or vm.max() > v_limits[1] + 1e-9:
                    continue
                p_a = float(sol.p_inj[0])  # slack covers load + losses - p_b
                if not g_a.p_min - 1e-9 <= p_a <= g_a.p_max + 1e-9:
                    continue
                q_a = float(sol.q_inj[0])
                q_b = float(sol.q_inj[1])
                if not (g_a.q_min - 1e-6 <= q_a <= g_a.q_max + 1e-6):
                    continue
                if not (g_b.q_min - 1e-6 <= q_b <= g_b.q_max + 1e-6):
                    continue
                cost = (
                    g_a.cost[0] * (p_a * base) ** 2 + g_a.cost[1] * p_a * base
                    + g_b.cost[0] * (p_b * base) ** 2 + g_b.cost[1] * p_b * base
                    + g_a.cost[2] + g_b.cost[2]
                )
                best = min(best, cost)
    return best
