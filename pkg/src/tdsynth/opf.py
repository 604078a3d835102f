"""Quadratic-cost AC optimal power flow with discrete tap positions.

The continuous core (taps frozen) minimizes total generation cost over the
dispatchable units subject to the AC bus power-balance equalities, generator
box bounds and per-bus voltage bounds.  It rides on scipy's trust-region
interior-point solver with analytic sparse Jacobians; the contract is the
returned KKT residual, not the mechanism.

Discrete taps are handled by the outer relaxation loop: solve with voltage
bounds widened, nudge every tap one step by the deadband rule using the
solved voltages, tighten the bounds one notch, repeat until the bounds are
final and no tap wants to move.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, NonlinearConstraint, minimize

from .netmodel import BusKind, GenKind, NetworkCase
from .oltc import tap_update
from .powerflow import _dSbus_dV, build_ybus


class RelaxationError(RuntimeError):
    def __init__(self, round_index: int, limits: tuple[float, float]):
        super().__init__(
            f"continuous subproblem infeasible in relaxation round {round_index} "
            f"(voltage limits widened by {limits[0]:.3f}/{limits[1]:.3f})"
        )
        self.round_index = round_index
        self.limits = limits


@dataclass
class OpfProblem:
    case: NetworkCase
    v_min: np.ndarray                 # final per-bus lower voltage bounds
    v_max: np.ndarray
    dispatchable: list[int]           # generator indices free to move

    @classmethod
    def from_case(
        cls,
        case: NetworkCase,
        v_limits: tuple[float, float] | None = None,
    ) -> "OpfProblem":
        n = len(case.buses)
        if v_limits is None:
            v_min = np.array([b.v_min for b in case.buses])
            v_max = np.array([b.v_max for b in case.buses])
        else:
            v_min = np.full(n, v_limits[0])
            v_max = np.full(n, v_limits[1])
        dispatchable = [
            i
            for i, g in enumerate(case.generators)
            if g.controllable and g.kind in (GenKind.TN_UNIT, GenKind.DN_CONTROLLABLE)
        ]
        problem = cls(case=case, v_min=v_min, v_max=v_max, dispatchable=dispatchable)
        problem.check()
        return problem

    def check(self) -> None:
        for i in self.dispatchable:
            g = self.case.generators[i]
            for name, v in (
                ("p_min", g.p_min), ("p_max", g.p_max),
                ("q_min", g.q_min), ("q_max", g.q_max),
            ):
                if not math.isfinite(v):
                    raise ValueError(f"generator {i}: {name} must be finite for dispatch")
            if g.cost[0] < 0:
                raise ValueError(f"generator {i}: quadratic cost must be convex (c2 >= 0)")


@dataclass
class OpfSolution:
    p: dict[int, float]               # generator index -> active output, pu
    q: dict[int, float]
    v_mag: np.ndarray
    v_ang: np.ndarray
    taps: list[int]
    objective: float                  # money, from the returned dispatch
    feasible: bool
    kkt_residual: float
    max_violation: float
    relaxation_rounds: int = 0
    trace: list[dict] = field(default_factory=list)
    raw_x: np.ndarray | None = None


@dataclass
class RelaxationSchedule:
    rounds: int = 5                   # linear tightening steps, >= 1
    v_slack: float = 0.1              # initial widening of both voltage bounds
    max_extra_rounds: int = 10        # tap-settling rounds after the last step


def dispatch_cost(problem: OpfProblem, p_by_gen: dict[int, float]) -> float:
    """Total cost (money) of a dispatch given in per-unit active outputs."""
    base = problem.case.base_mva
    total = 0.0
    for i in problem.dispatchable:
        c2, c1, c0 = problem.case.generators[i].cost
        p_mw = p_by_gen[i] * base
        total += c2 * p_mw * p_mw + c1 * p_mw + c0
    return total


def _pack_structure(problem: OpfProblem):
    case = problem.case
    n = len(case.buses)
    idx = case.bus_index()
    slack = [i for i, b in enumerate(case.buses) if b.kind is BusKind.SLACK]
    if len(slack) != 1:
        raise ValueError(f"need exactly one slack bus, found {len(slack)}")
    slack_pos = slack[0]
    nonslack = np.array([i for i in range(n) if i != slack_pos], dtype=int)

    nd = len(problem.dispatchable)
    rows, cols = [], []
    for j, gi in enumerate(problem.dispatchable):
        rows.append(idx[case.generators[gi].bus_id])
        cols.append(j)
    Cg = sp.csr_matrix(
        (np.ones(nd), (rows, cols)), shape=(n, nd)
    )

    s_fixed = np.array([-complex(b.p_load, b.q_load) for b in case.buses])
    dispatch_set = set(problem.dispatchable)
    for i, g in enumerate(case.generators):
        if i not in dispatch_set:
            s_fixed[idx[g.bus_id]] += complex(g.p, g.q)

    return n, nd, slack_pos, nonslack, Cg, s_fixed


def solve_continuous(
    problem: OpfProblem,
    v_limits: tuple[np.ndarray, np.ndarray] | None = None,
    x0: np.ndarray | None = None,
    max_iterations: int = 400,
    feasibility_tol: float = 1e-6,
) -> OpfSolution:
    """Minimize dispatch cost with the tap ratios frozen as they stand.

    The stationarity part of the reported KKT residual is measured on the
    cost normalized by its gradient scale, so the 1e-6 target is meaningful
    regardless of the currency units of the coefficients.
    """
    case = problem.case
    base = case.base_mva
    n, nd, slack_pos, nonslack, Cg, s_fixed = _pack_structure(problem)
    v_lo = v_limits[0] if v_limits is not None else problem.v_min
    v_hi = v_limits[1] if v_limits is not None else problem.v_max
    slack_ang = case.buses[slack_pos].v_ang
    Ybus = build_ybus(case).tocsr()

    na = n - 1
    nx = na + n + 2 * nd

    c2 = np.array([case.generators[i].cost[0] for i in problem.dispatchable])
    c1 = np.array([case.generators[i].cost[1] for i in problem.dispatchable])
    c0 = np.array([case.generators[i].cost[2] for i in problem.dispatchable])
    p_lb = np.array([case.generators[i].p_min for i in problem.dispatchable])
    p_ub = np.array([case.generators[i].p_max for i in problem.dispatchable])
    q_lb = np.array([case.generators[i].q_min for i in problem.dispatchable])
    q_ub = np.array([case.generators[i].q_max for i in problem.dispatchable])

    def split(x):
        va = np.empty(n)
        va[nonslack] = x[:na]
        va[slack_pos] = slack_ang
        vm = x[na : na + n]
        pg = x[na + n : na + n + nd]
        qg = x[na + n + nd :]
        return va, vm, pg, qg

    def voltages(x):
        va, vm, _, _ = split(x)
        return vm * np.exp(1j * va)

    # cost scale keeps the stationarity tolerance unit-free
    grad_scale = float(max(1.0, np.max(np.abs(c1) * base, initial=0.0),
                           np.max(np.abs(c2) * base * base, initial=0.0)))

    def objective(x):
        pg = x[na + n : na + n + nd]
        p_mw = pg * base
        return float(np.sum(c2 * p_mw * p_mw + c1 * p_mw + c0)) / grad_scale

    def gradient(x):
        g = np.zeros(nx)
        pg = x[na + n : na + n + nd]
        g[na + n : na + n + nd] = (2.0 * c2 * base * base * pg + c1 * base) / grad_scale
        return g

    def hessian(x):
        d = np.zeros(nx)
        d[na + n : na + n + nd] = 2.0 * c2 * base * base / grad_scale
        return sp.diags(d).tocsr()

    def balance(x):
        va, vm, pg, qg = split(x)
        V = vm * np.exp(1j * va)
        mis = V * np.conj(Ybus @ V) - s_fixed - Cg @ (pg + 1j * qg)
        return np.concatenate([mis.real, mis.imag])

    zero_pad = sp.csr_matrix((n, nd))

    def balance_jac(x):
        V = voltages(x)
        dSa, dSm = _dSbus_dV(Ybus, V)
        dSa = dSa[:, nonslack]
        top = sp.hstack([dSa.real, dSm.real, -Cg, zero_pad])
        bot = sp.hstack([dSa.imag, dSm.imag, zero_pad, -Cg])
        return sp.vstack([top, bot], format="csr")

    lb = np.concatenate([np.full(na, -np.inf), v_lo, p_lb, q_lb])
    ub = np.concatenate([np.full(na, np.inf), v_hi, p_ub, q_ub])

    if x0 is None:
        va0 = np.array([b.v_ang for b in case.buses])
        vm0 = np.clip(np.array([b.v_mag for b in case.buses]), v_lo, v_hi)
        pg0 = np.clip(
            np.array([case.generators[i].p for i in problem.dispatchable]), p_lb, p_ub
        )
        qg0 = np.clip(
            np.array([case.generators[i].q for i in problem.dispatchable]), q_lb, q_ub
        )
        x0 = np.concatenate([va0[nonslack], vm0, pg0, qg0])
    else:
        x0 = np.clip(x0, lb, ub)

    res = minimize(
        objective,
        x0,
        jac=gradient,
        hess=hessian,
        method="trust-constr",
        bounds=Bounds(lb, ub, keep_feasible=False),
        constraints=[NonlinearConstraint(balance, 0.0, 0.0, jac=balance_jac)],
        options={
            # tight gtol drives the barrier far enough that active bounds
            # are hit to well under 1e-6
            "gtol": 1e-10,
            "xtol": 1e-12,
            "barrier_tol": 1e-12,
            "maxiter": max_iterations,
            "verbose": 0,
        },
    )

    va, vm, pg, qg = split(res.x)
    pg = np.clip(pg, p_lb, p_ub)
    qg = np.clip(qg, q_lb, q_ub)
    p = {gi: float(pg[j]) for j, gi in enumerate(problem.dispatchable)}
    q = {gi: float(qg[j]) for j, gi in enumerate(problem.dispatchable)}

    violation = float(np.max(np.abs(balance(res.x)), initial=0.0))
    v_viol = float(np.max(np.maximum(v_lo - vm, vm - v_hi), initial=0.0))
    max_violation = max(violation, v_viol, 0.0)
    kkt = max(float(res.optimality), violation)

    return OpfSolution(
        p=p,
        q=q,
        v_mag=vm.copy(),
        v_ang=va.copy(),
        taps=[t.tap for t in case.oltcs],
        objective=dispatch_cost(problem, p),
        feasible=max_violation <= feasibility_tol,
        kkt_residual=kkt,
        max_violation=max_violation,
        raw_x=res.x.copy(),
    )


def solve_with_relaxation(
    problem: OpfProblem,
    schedule: RelaxationSchedule | None = None,
    trace_path: Path | None = None,
    feasibility_tol: float = 1e-6,
) -> OpfSolution:
    """Outer loop coupling the continuous solve with one-step tap moves.

    Terminates once the voltage bounds have reached their final values and a
    whole round passes with no tap motion; a solution already inside the
    final bounds short-circuits the remaining tightening steps.  Taps freeze
    individually on direction reversal, and the total number of rounds is
    capped, mirroring the power-flow regulation safeguards.
    """
    schedule = schedule or RelaxationSchedule()
    if schedule.rounds < 1:
        raise ValueError("schedule needs at least one round")
    work = problem.case.clone()
    for t in work.oltcs:
        t.sync_branch(work)

    frozen = [False] * len(work.oltcs)
    last_delta = [0] * len(work.oltcs)
    idx = work.bus_index()
    trace: list[dict] = []
    warm = None
    sol = None
    rounds_cap = schedule.rounds + schedule.max_extra_rounds
    k = 0
    while True:
        step = min(k, schedule.rounds - 1)
        if schedule.rounds > 1:
            slack = schedule.v_slack * (1.0 - step / (schedule.rounds - 1))
        else:
            slack = 0.0
        lo = problem.v_min - slack
        hi = problem.v_max + slack

        sub = OpfProblem(
            case=work, v_min=problem.v_min, v_max=problem.v_max,
            dispatchable=problem.dispatchable,
        )
        sol = solve_continuous(
            sub, v_limits=(lo, hi), x0=warm, feasibility_tol=feasibility_tol
        )
        if sol.max_violation > max(1e-4, feasibility_tol):
            raise RelaxationError(k, (slack, slack))
        warm = sol.raw_x

        deltas = []
        for i, t in enumerate(work.oltcs):
            if frozen[i]:
                deltas.append(0)
                continue
            d = tap_update(t, float(sol.v_mag[idx[t.controlled_bus]]))
            if d != 0 and last_delta[i] != 0 and d == -last_delta[i]:
                frozen[i] = True
                d = 0
            deltas.append(d)
        moved = sum(1 for d in deltas if d)

        within_final = bool(
            np.all(sol.v_mag >= problem.v_min - feasibility_tol)
            and np.all(sol.v_mag <= problem.v_max + feasibility_tol)
        )
        trace.append(
            {
                "round": k,
                "objective": sol.objective,
                "max_violation": max(
                    sol.max_violation,
                    float(np.max(np.maximum(problem.v_min - sol.v_mag,
                                            sol.v_mag - problem.v_max), initial=0.0)),
                ),
                "taps_moved": moved,
                "taps": [t.tap for t in work.oltcs],
                "v_slack": slack,
            }
        )

        k += 1
        if moved == 0 and (slack == 0.0 or within_final):
            break
        for i, (t, d) in enumerate(zip(work.oltcs, deltas)):
            if d:
                t.tap += d
                t.sync_branch(work)
                last_delta[i] = d
        if k >= rounds_cap:
            sub = OpfProblem(
                case=work, v_min=problem.v_min, v_max=problem.v_max,
                dispatchable=problem.dispatchable,
            )
            sol = solve_continuous(sub, x0=warm, feasibility_tol=feasibility_tol)
            trace.append(
                {
                    "round": k,
                    "objective": sol.objective,
                    "max_violation": sol.max_violation,
                    "taps_moved": 0,
                    "taps": [t.tap for t in work.oltcs],
                    "v_slack": 0.0,
                }
            )
            break

    final_viol = max(
        sol.max_violation,
        float(np.max(np.maximum(problem.v_min - sol.v_mag,
                                sol.v_mag - problem.v_max), initial=0.0)),
    )
    taps_ok = all(t.tap_min <= t.tap <= t.tap_max for t in work.oltcs)
    result = OpfSolution(
        p=sol.p,
        q=sol.q,
        v_mag=sol.v_mag,
        v_ang=sol.v_ang,
        taps=[t.tap for t in work.oltcs],
        objective=sol.objective,
        feasible=bool(final_viol <= feasibility_tol and taps_ok),
        kkt_residual=sol.kkt_residual,
        max_violation=final_viol,
        relaxation_rounds=k,
        trace=trace,
    )
    if trace_path is not None:
        _write_trace(trace_path, trace)
    return result


def _write_trace(path: Path, trace: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "objective", "max_violation", "taps_moved"])
        for row in trace:
            w.writerow(
                [row["round"], repr(row["objective"]),
                 repr(row["max_violation"]), row["taps_moved"]]
            )


def apply_opf_solution(
    case: NetworkCase, problem: OpfProblem, sol: OpfSolution
) -> None:
    """Write dispatch, voltages and tap positions back onto a case so that a
    plain power flow reproduces the optimized operating point."""
    idx = case.bus_index()
    for b, vm, va in zip(case.buses, sol.v_mag, sol.v_ang):
        b.v_mag = float(vm)
        b.v_ang = float(va)
    for gi in problem.dispatchable:
        g = case.generators[gi]
        g.p = sol.p[gi]
        g.q = sol.q[gi]
    for g in case.generators:
        if g.controllable:
            g.v_set = float(sol.v_mag[idx[g.bus_id]])
    for t, tap in zip(case.oltcs, sol.taps):
        t.tap = tap
        t.sync_branch(case)
