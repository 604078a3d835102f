"""Standalone power-mismatch evaluator.

Recomputes per-bus injection residuals straight from the branch pi-model,
one branch at a time, without touching the admittance-matrix or Jacobian
code in :mod:`tdsynth.powerflow`.  Used as the independent cross-check on
the solver's reported mismatch.
"""

from __future__ import annotations

import cmath

import numpy as np

from .netmodel import BusKind, NetworkCase


def power_mismatch(
    case: NetworkCase, v_mag: np.ndarray, v_ang: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus (calculated - specified) active and reactive injections."""
    idx = case.bus_index()
    n = len(case.buses)
    calc = np.zeros(n, dtype=complex)

    for br in case.branches:
        if not br.status:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        vf = v_mag[f] * cmath.exp(1j * v_ang[f])
        vt = v_mag[t] * cmath.exp(1j * v_ang[t])
        y = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b_charging
        tap = br.ratio * cmath.exp(1j * br.phase_shift)
        vi = vf / tap                       # voltage behind the ideal transformer
        i_from = ((vi - vt) * y + vi * bc) / tap.conjugate()
        i_to = (vt - vi) * y + vt * bc
        calc[f] += vf * i_from.conjugate()
        calc[t] += vt * i_to.conjugate()

    for b in case.buses:
        i = idx[b.id]
        v2 = v_mag[i] ** 2
        calc[i] += v2 * complex(b.g_shunt, -b.b_shunt)

    spec = np.zeros(n, dtype=complex)
    for b in case.buses:
        spec[idx[b.id]] -= complex(b.p_load, b.q_load)
    for g in case.generators:
        spec[idx[g.bus_id]] += complex(g.p, g.q)

    mis = calc - spec
    return mis.real.copy(), mis.imag.copy()


def max_residual(case: NetworkCase, v_mag: np.ndarray, v_ang: np.ndarray) -> float:
    """The solver's convergence metric, recomputed independently: active
    mismatch at PV and PQ buses, reactive mismatch at PQ buses."""
    dp, dq = power_mismatch(case, v_mag, v_ang)
    idx = case.bus_index()
    worst = 0.0
    for b in case.buses:
        i = idx[b.id]
        if b.kind in (BusKind.PV, BusKind.PQ):
            worst = max(worst, abs(dp[i]))
        if b.kind is BusKind.PQ:
            worst = max(worst, abs(dq[i]))
    return worst
