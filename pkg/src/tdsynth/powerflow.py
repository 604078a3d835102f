"""Full Newton-Raphson AC power flow in polar coordinates.

The Jacobian is assembled sparse and factorized with a direct sparse LU
(SuperLU through scipy).  The polar full-Newton formulation is kept even for
small cases because distribution feeders with high R/X ratios defeat the
fast-decoupled shortcuts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from .netmodel import BusKind, NetworkCase, islands


class PowerFlowError(RuntimeError):
    pass


class SingularJacobianError(PowerFlowError):
    pass


@dataclass
class SolverOptions:
    tolerance: float = 1e-8      # max |S_calc - S_spec| accepted, per unit
    max_iterations: int = 20
    flat_start: bool = False
    enforce_q_limits: bool = False

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray            # net active injection per bus
    q_inj: np.ndarray
    p_from: np.ndarray           # branch flows, sending end
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    pq_switched: list[int] = field(default_factory=list)  # bus ids demoted PV->PQ


def _complex_tap(branch) -> complex:
    return branch.ratio * np.exp(1j * branch.phase_shift)


def build_ybus(case: NetworkCase) -> sp.csr_matrix:
    """N x N complex admittance matrix over the case's bus ordering."""
    n = len(case.buses)
    idx = case.bus_index()
    rows, cols, vals = [], [], []
    for k, br in enumerate(case.branches):
        if not br.status:
            continue
        if br.r == 0.0 and br.x == 0.0:
            raise PowerFlowError(f"branch {k} is in service with zero impedance")
        y = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b_charging
        t = _complex_tap(br)
        f, to = idx[br.from_bus], idx[br.to_bus]
        rows += [f, to, f, to]
        cols += [f, to, to, f]
        vals += [(y + bc) / (t * np.conj(t)), y + bc, -y / np.conj(t), -y / t]
    for b in case.buses:
        if b.g_shunt or b.b_shunt:
            rows.append(idx[b.id])
            cols.append(idx[b.id])
            vals.append(complex(b.g_shunt, b.b_shunt))
    return sp.csr_matrix(
        (np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)
    )


def build_branch_admittances(case: NetworkCase) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Yf, Yt with I_from = Yf V and I_to = Yt V (rows follow branch order;
    out-of-service branches give zero rows)."""
    n = len(case.buses)
    m = len(case.branches)
    idx = case.bus_index()
    rf, cf, vf = [], [], []
    rt, ct, vt = [], [], []
    for k, br in enumerate(case.branches):
        if not br.status:
            continue
        y = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b_charging
        t = _complex_tap(br)
        f, to = idx[br.from_bus], idx[br.to_bus]
        rf += [k, k]
        cf += [f, to]
        vf += [(y + bc) / (t * np.conj(t)), -y / np.conj(t)]
        rt += [k, k]
        ct += [f, to]
        vt += [-y / t, y + bc]
    Yf = sp.csr_matrix((np.array(vf, dtype=complex), (rf, cf)), shape=(m, n))
    Yt = sp.csr_matrix((np.array(vt, dtype=complex), (rt, ct)), shape=(m, n))
    return Yf, Yt


def _dSbus_dV(Ybus: sp.spmatrix, V: np.ndarray) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Partial derivatives of the complex bus injections w.r.t. angle and
    magnitude (standard polar NR building blocks)."""
    Ibus = Ybus @ V
    diagV = sp.diags(V)
    diagI = sp.diags(Ibus)
    diagVnorm = sp.diags(V / np.abs(V))
    dS_dVm = diagV @ (Ybus @ diagVnorm).conjugate() + diagI.conjugate() @ diagVnorm
    dS_dVa = 1j * diagV @ (diagI - Ybus @ diagV).conjugate()
    return dS_dVa.tocsr(), dS_dVm.tocsr()


def _specified_injection(case: NetworkCase) -> np.ndarray:
    idx = case.bus_index()
    s = np.array([-complex(b.p_load, b.q_load) for b in case.buses])
    for g in case.generators:
        s[idx[g.bus_id]] += complex(g.p, g.q)
    return s


def _setpoint_voltages(case: NetworkCase) -> dict[int, float]:
    """|V| setpoint per slack/PV bus, taken from the first generator there."""
    vset: dict[int, float] = {}
    for b in case.buses:
        if b.kind is BusKind.PQ:
            continue
        gens = case.gens_at(b.id)
        if not gens:
            raise PowerFlowError(f"{b.kind.value} bus {b.id} has no generator")
        vset[b.id] = gens[0].v_set
    return vset


def _mismatch(Ybus, V, Sbus, pvpq, pq) -> np.ndarray:
    mis = V * np.conj(Ybus @ V) - Sbus
    return np.concatenate([mis[pvpq].real, mis[pq].imag])


def solve(case: NetworkCase, opts: SolverOptions | None = None) -> PowerFlowSolution:
    """Newton-Raphson solve.  The case itself is never mutated; use
    :func:`apply_solution` to store the result between solver calls."""
    opts = opts or SolverOptions()
    slacks = case.slack_buses()
    if len(slacks) != 1:
        raise PowerFlowError(f"need exactly one slack bus, found {len(slacks)}")
    if len(islands(case)) != 1:
        raise PowerFlowError("network is not connected")

    if opts.enforce_q_limits:
        return _solve_with_q_limits(case, opts)
    return _solve_fixed_types(case, opts)


def _solve_fixed_types(
    case: NetworkCase,
    opts: SolverOptions,
    demoted: dict[int, float] | None = None,
) -> PowerFlowSolution:
    """One NR run with fixed bus types.  ``demoted`` maps PV bus ids that are
    treated as PQ to the reactive injection pinned at a limit."""
    demoted = demoted or {}
    n = len(case.buses)
    idx = case.bus_index()
    Ybus = build_ybus(case)
    Sbus = _specified_injection(case)
    vset = _setpoint_voltages(case)

    slack_bus = case.slack_buses()[0]
    kind = []
    for b in case.buses:
        if b.kind is BusKind.PV and b.id in demoted:
            kind.append(BusKind.PQ)
        else:
            kind.append(b.kind)
    for bus_id, q_fixed in demoted.items():
        b = case.bus(bus_id)
        Sbus[idx[bus_id]] = complex(
            sum(g.p for g in case.gens_at(bus_id)) - b.p_load, q_fixed - b.q_load
        )

    pv = np.array([i for i, k in enumerate(kind) if k is BusKind.PV], dtype=int)
    pq = np.array([i for i, k in enumerate(kind) if k is BusKind.PQ], dtype=int)
    pvpq = np.concatenate([pv, pq])

    vm = np.array([b.v_mag for b in case.buses], dtype=float)
    va = np.array([b.v_ang for b in case.buses], dtype=float)
    if opts.flat_start:
        vm[:] = 1.0
        va[:] = slack_bus.v_ang
    for bus_id, v in vset.items():
        if bus_id not in demoted:  # demoted buses keep their starting magnitude
            vm[idx[bus_id]] = v
    vm[idx[slack_bus.id]] = vset[slack_bus.id]
    va[idx[slack_bus.id]] = slack_bus.v_ang

    V = vm * np.exp(1j * va)
    F = _mismatch(Ybus, V, Sbus, pvpq, pq)
    converged = bool(np.max(np.abs(F)) < opts.tolerance) if F.size else True
    iterations = 0

    npv, npq = len(pv), len(pq)
    while not converged and iterations < opts.max_iterations:
        dSa, dSm = _dSbus_dV(Ybus, V)
        J11 = dSa[pvpq, :][:, pvpq].real
        J12 = dSm[pvpq, :][:, pq].real
        J21 = dSa[pq, :][:, pvpq].imag
        J22 = dSm[pq, :][:, pq].imag
        J = sp.bmat([[J11, J12], [J21, J22]], format="csc")
        with warnings.catch_warnings():
            warnings.simplefilter("error", MatrixRankWarning)
            try:
                dx = spsolve(J, F)
            except (MatrixRankWarning, RuntimeError) as exc:
                raise SingularJacobianError(f"singular Jacobian: {exc}") from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError("singular Jacobian: non-finite Newton step")
        va[pvpq] -= dx[: npv + npq]
        vm[pq] -= dx[npv + npq :]
        V = vm * np.exp(1j * va)
        iterations += 1
        F = _mismatch(Ybus, V, Sbus, pvpq, pq)
        converged = bool(np.max(np.abs(F)) < opts.tolerance) if F.size else True

    max_mismatch = float(np.max(np.abs(F))) if F.size else 0.0
    S = V * np.conj(Ybus @ V)
    Yf, Yt = build_branch_admittances(case)
    f_idx = np.array(
        [idx[br.from_bus] for br in case.branches], dtype=int
    ) if case.branches else np.array([], dtype=int)
    t_idx = np.array(
        [idx[br.to_bus] for br in case.branches], dtype=int
    ) if case.branches else np.array([], dtype=int)
    Sf = V[f_idx] * np.conj(Yf @ V) if case.branches else np.array([], dtype=complex)
    St = V[t_idx] * np.conj(Yt @ V) if case.branches else np.array([], dtype=complex)

    return PowerFlowSolution(
        v_mag=np.abs(V),
        v_ang=np.angle(V) if n else np.array([]),
        p_inj=S.real,
        q_inj=S.imag,
        p_from=Sf.real,
        q_from=Sf.imag,
        p_to=St.real,
        q_to=St.imag,
        converged=converged,
        iterations=iterations,
        max_mismatch=max_mismatch,
        pq_switched=sorted(demoted),
    )


def _solve_with_q_limits(case: NetworkCase, opts: SolverOptions) -> PowerFlowSolution:
    """Outer PV->PQ switching loop: after each converged solve, pin any PV bus
    whose implied generator reactive output leaves its range."""
    idx = case.bus_index()
    demoted: dict[int, float] = {}
    sol = _solve_fixed_types(case, opts, demoted)
    for _ in range(10):
        if not sol.converged:
            return sol
        changed = False
        for b in case.buses:
            if b.kind is not BusKind.PV or b.id in demoted:
                continue
            gens = [g for g in case.gens_at(b.id) if g.controllable]
            if not gens:
                continue
            q_gen = sol.q_inj[idx[b.id]] + b.q_load
            q_min = sum(g.q_min for g in gens)
            q_max = sum(g.q_max for g in gens)
            if q_gen < q_min - opts.tolerance:
                demoted[b.id] = q_min
                changed = True
            elif q_gen > q_max + opts.tolerance:
                demoted[b.id] = q_max
                changed = True
        if not changed:
            return sol
        sol = _solve_fixed_types(case, opts, demoted)
    return sol


def apply_solution(
    case: NetworkCase, sol: PowerFlowSolution, update_generators: bool = True
) -> None:
    """Write a solution back onto the case (voltages; optionally the slack P
    and PV/slack Q spread over the controllable generators at each bus)."""
    idx = case.bus_index()
    for b in case.buses:
        i = idx[b.id]
        b.v_mag = float(sol.v_mag[i])
        b.v_ang = float(sol.v_ang[i])
    if not update_generators:
        return
    for b in case.buses:
        if b.kind is BusKind.PQ:
            continue
        i = idx[b.id]
        gens = [g for g in case.gens_at(b.id) if g.controllable]
        if not gens:
            continue
        q_total = float(sol.q_inj[i]) + b.q_load
        fixed_q = sum(g.q for g in case.gens_at(b.id) if not g.controllable)
        share_q = (q_total - fixed_q) / len(gens)
        for g in gens:
            g.q = share_q
        if b.kind is BusKind.SLACK:
            p_total = float(sol.p_inj[i]) + b.p_load
            fixed_p = sum(g.p for g in case.gens_at(b.id) if not g.controllable)
            share_p = (p_total - fixed_p) / len(gens)
            for g in gens:
                g.p = share_p
