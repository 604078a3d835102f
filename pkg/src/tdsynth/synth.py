"""Synthesis engine: replicate a distribution template under transmission
load buses and wire the result into one combined case.

Pipeline stages (mirrored by :func:`generate`):

1. solve the transmission network (master) and pick the loads to replace,
2. size the template: voltage-feasible capacity by bisection, replica count
   per bus by ceiling division,
3. customize every replica (load scaling, DG sizing and allocation, optional
   demand growth, per-replica randomization) against its host-bus voltage,
4. assemble, re-regulate the tap changers on the combined system, optionally
   optimize, and export.

Randomized draws come from a dedicated stream per (host bus, copy index), so
adding or removing one replica never reshuffles the others.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import caseio
from .netmodel import (
    Branch,
    Bus,
    BusKind,
    Generator,
    GenKind,
    NetworkCase,
    OltcTransformer,
    total_load,
    validate,
)
from .oltc import RegulationError, RegulationReport, regulate
from .powerflow import PowerFlowSolution, SolverOptions, apply_solution, solve
from .templates import TemplateBundle, load_bundle

DEFAULT_AREA_NAMES = {1: "Equiv", 2: "North", 3: "Central", 4: "South"}


class SynthesisError(RuntimeError):
    pass


class PipelineError(SynthesisError):
    """Failure wrapped with the pipeline stage it came from."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class SynthesisConfig:
    penetration_level: float = 0.5
    generation_split: float = 0.5
    constant_load: bool = False
    random: bool = False
    rng_seed: int = 1
    large_system: bool = True
    oversize: float = 1.0
    run_opf: bool = False
    export_format: str = "matpower"
    dn_v_limits: tuple[float, float] = (0.95, 1.05)
    oltc_v_set: float = 1.03
    pf_tolerance: float = 1e-8
    pf_max_iterations: int = 20
    oltc_max_rounds: int = 30
    capacity_tolerance: float = 1e-3
    capacity_ceiling: float = 10.0
    opf_rounds: int = 5
    opf_v_slack: float = 0.1

    def field_errors(self) -> list[tuple[str, str]]:
        bad = []
        if self.penetration_level < 0:
            bad.append(("penetration_level", "must be >= 0"))
        if not 0.0 <= self.generation_split <= 1.0:
            bad.append(("generation_split", "must lie in [0, 1]"))
        if self.oversize < 1.0:
            bad.append(("oversize", "must be >= 1.0"))
        if not self.dn_v_limits[0] < self.dn_v_limits[1]:
            bad.append(("dn_v_limits", "lower bound must be below upper bound"))
        if self.oltc_v_set <= 0:
            bad.append(("oltc_v_set", "must be positive"))
        if self.pf_tolerance <= 0:
            bad.append(("pf_tolerance", "must be positive"))
        if self.pf_max_iterations < 1:
            bad.append(("pf_max_iterations", "must be at least 1"))
        if self.oltc_max_rounds < 1:
            bad.append(("oltc_max_rounds", "must be at least 1"))
        if self.capacity_tolerance <= 0:
            bad.append(("capacity_tolerance", "must be positive"))
        if self.capacity_ceiling <= 1.0:
            bad.append(("capacity_ceiling", "must exceed 1.0"))
        if self.opf_rounds < 1:
            bad.append(("opf_rounds", "must be at least 1"))
        if self.opf_v_slack < 0:
            bad.append(("opf_v_slack", "must be >= 0"))
        if self.export_format not in caseio.registered_exporters():
            bad.append(
                ("export_format",
                 f"unknown exporter; registered: {', '.join(caseio.registered_exporters())}")
            )
        return bad

    def solver_options(self) -> SolverOptions:
        return SolverOptions(
            tolerance=self.pf_tolerance, max_iterations=self.pf_max_iterations
        )


@dataclass
class CapacityResult:
    max_scale: float
    binding_bus: int | None
    p_capacity: float               # total active demand at max_scale
    unbounded_by_voltage: bool = False


@dataclass
class DnInstance:
    case: NetworkCase
    host_tn_bus: int
    copy_index: int
    load_scale: float
    realized_penetration: float
    realized_split: float
    dg_allocation: dict[int, float]  # generator index -> active output
    boundary_p: float                # active import from the host at the end
    regulation: RegulationReport | None = None


def _rng_for(cfg: SynthesisConfig, host_bus: int, copy_index: int) -> np.random.Generator:
    # named sub-stream per replica; draws are independent across replicas
    return np.random.default_rng([cfg.rng_seed, host_bus, copy_index])


def _slack_generator(case: NetworkCase):
    slack = case.slack_buses()
    if len(slack) != 1:
        raise SynthesisError(f"template needs exactly one slack bus, found {len(slack)}")
    gens = case.gens_at(slack[0].id)
    if not gens:
        raise SynthesisError("template slack bus carries no source generator")
    return slack[0], gens[0]


def _set_source_voltage(case: NetworkCase, v: float) -> None:
    bus, gen = _slack_generator(case)
    bus.v_mag = v
    gen.v_set = v


def _dn_generators(case: NetworkCase) -> tuple[list[int], list[int]]:
    ctrl = [i for i, g in enumerate(case.generators) if g.kind is GenKind.DN_CONTROLLABLE]
    pv = [i for i, g in enumerate(case.generators) if g.kind is GenKind.DN_PV]
    return ctrl, pv


def _zero_dg(case: NetworkCase) -> None:
    for g in case.generators:
        if g.kind in (GenKind.DN_CONTROLLABLE, GenKind.DN_PV):
            g.p = 0.0
            g.q = 0.0


def _scale_loads(case: NetworkCase, factor: float) -> None:
    # constant power factor: P and Q move together
    for b in case.buses:
        b.p_load *= factor
        b.q_load *= factor


def select_replaceable_loads(
    tn: NetworkCase,
    large_system: bool,
    area_names: dict[int, str] | None = None,
) -> list[tuple[int, float, float]]:
    """Load buses whose aggregated demand gets replaced by replicas.

    ``large_system`` keeps every load outside the external-equivalent zone;
    otherwise only the central zone is replaced.
    """
    names = area_names or DEFAULT_AREA_NAMES
    picked = []
    for b in tn.buses:
        if b.p_load <= 0:
            continue
        label = names.get(b.area, "")
        if large_system:
            if label == "Equiv":
                continue
        elif label != "Central":
            continue
        picked.append((b.id, b.p_load, b.q_load))
    if not picked:
        raise SynthesisError("no replaceable loads found for this selection")
    return picked


def dn_max_capacity(
    dn_template: NetworkCase,
    v_limits: tuple[float, float],
    source_v: float | None = None,
    tolerance: float = 1e-3,
    ceiling: float = 10.0,
    solver: SolverOptions | None = None,
    max_rounds: int = 30,
) -> CapacityResult:
    """Largest uniform load scale the template can carry with zeroed DGs
    while regulation keeps every non-boundary voltage inside ``v_limits``.

    Bisection on the scale factor to absolute ``tolerance``; the boundary
    (slack) bus is excluded from the check because its voltage is imposed
    from outside.  A probe whose power flow fails to converge counts as
    infeasible, so with very wide limits the search settles at the
    loadability nose instead of the ceiling.
    """
    lo_v, hi_v = v_limits
    solver = solver or SolverOptions()
    base = dn_template.clone()
    _zero_dg(base)
    if source_v is not None:
        _set_source_voltage(base, source_v)
    slack_id = base.slack_buses()[0].id
    p_template, _ = total_load(base)
    if p_template <= 0:
        raise SynthesisError("template has no active load to scale")

    def probe(scale: float) -> tuple[bool, int | None]:
        trial = base.clone()
        _scale_loads(trial, scale)
        try:
            sol, _ = regulate(trial, solver, max_rounds=max_rounds)
        except RegulationError:
            return False, None
        idx = trial.bus_index()
        worst_bus, worst = None, 0.0
        for b in trial.buses:
            if b.id == slack_id:
                continue
            v = float(sol.v_mag[idx[b.id]])
            gap = max(lo_v - v, v - hi_v)
            if gap > worst:
                worst, worst_bus = gap, b.id
        return worst_bus is None, worst_bus

    ok, _ = probe(0.0)
    if not ok:
        raise SynthesisError(
            "distribution template violates voltage limits even with zero load"
        )
    ok, binding = probe(ceiling)
    if ok:
        return CapacityResult(
            max_scale=ceiling,
            binding_bus=None,
            p_capacity=p_template * ceiling,
            unbounded_by_voltage=True,
        )

    lo, hi = 0.0, ceiling
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        ok, bus = probe(mid)
        if ok:
            lo = mid
        else:
            hi = mid
            if bus is not None:
                binding = bus
    return CapacityResult(
        max_scale=lo,
        binding_bus=binding,
        p_capacity=p_template * lo,
        unbounded_by_voltage=False,
    )


def dn_count(tn_p_load: float, dn_capacity: float) -> int:
    """Replicas needed for one aggregated load: ceiling division, at least 1."""
    if dn_capacity <= 0:
        raise SynthesisError("capacity must be positive")
    return max(1, math.ceil(tn_p_load / dn_capacity))


def customize_dn(
    dn: NetworkCase,
    target_p: float,
    cfg: SynthesisConfig,
    rng_stream: np.random.Generator,
    source_v: float | None = None,
    host_bus: int = 0,
    copy_index: int = 0,
) -> DnInstance:
    """Build one replica carrying ``target_p`` of boundary demand.

    Loads are scaled (constant power factor) until the replica's solved
    import from the boundary equals ``target_p * oversize``: the aggregated
    load it stands in for already included the network losses, so the match
    is on the import, not on the arithmetic load sum.  DG output is then
    sized against the replica's own demand, split between the controllable
    group and the unity-power-factor PV group, and, in the constant-load
    scenario, matched by extra demand until the boundary import is back at
    its pre-DG value.
    """
    solver = cfg.solver_options()
    case = dn.clone()
    if source_v is not None:
        _set_source_voltage(case, source_v)
    for t in case.oltcs:
        t.v_set = cfg.oltc_v_set
    _zero_dg(case)

    slack_bus, _ = _slack_generator(case)
    slack_pos = case.bus_index()[slack_bus.id]
    p_template, _ = total_load(case)
    if p_template <= 0:
        raise SynthesisError("template has no active load")

    target_import = target_p * cfg.oversize
    if target_import <= 0:
        raise SynthesisError("replica demand target must be positive")

    # scale until the solved boundary import hits the target
    scale = target_import / p_template
    _scale_loads(case, scale)
    boundary = math.nan
    for _ in range(12):
        sol, _ = regulate(case, solver, max_rounds=cfg.oltc_max_rounds)
        boundary = float(sol.p_inj[slack_pos])
        if abs(boundary - target_import) <= 1e-4 * target_import:
            break
        adjust = target_import / boundary
        _scale_loads(case, adjust)
        scale *= adjust
    pre_dg_import = boundary

    # DG sizing against the replica's own demand
    pl = cfg.penetration_level
    gs = cfg.generation_split
    if cfg.random:
        pl *= 1.0 + rng_stream.uniform(-0.05, 0.05)
        gs *= 1.0 + rng_stream.uniform(-0.05, 0.05)
        gs = min(max(gs, 0.0), 1.0)
    p_loads, _ = total_load(case)
    dg_total = pl * p_loads

    ctrl, pv = _dn_generators(case)
    allocation: dict[int, float] = {}
    if dg_total > 0:
        if gs > 0 and not ctrl:
            raise SynthesisError("template has no controllable DG units to carry the split")
        if gs < 1 and not pv:
            raise SynthesisError("template has no PV units to carry the split")
        for i in ctrl:
            allocation[i] = gs * dg_total / len(ctrl)
        for i in pv:
            allocation[i] = (1.0 - gs) * dg_total / len(pv)
        for i, p in allocation.items():
            g = case.generators[i]
            if p > g.p_max + 1e-12:
                raise SynthesisError(
                    f"DG allocation {p:.4f} pu exceeds p_max {g.p_max:.4f} pu of "
                    f"generator {i} at bus {g.bus_id}"
                )
            g.p = p
            g.q = 0.0
    else:
        allocation = {i: 0.0 for i in ctrl + pv}

    if cfg.constant_load and dg_total > 0:
        # grow active demand until the boundary import is back where it was
        # before the DGs came in; reactive demand stays untouched
        base_p = [b.p_load for b in case.buses]
        base_total = sum(base_p)
        addition = dg_total
        for _ in range(20):
            f = 1.0 + addition / base_total
            for b, p0 in zip(case.buses, base_p):
                b.p_load = p0 * f
            sol, _ = regulate(case, solver, max_rounds=cfg.oltc_max_rounds)
            boundary = float(sol.p_inj[slack_pos])
            if abs(boundary - pre_dg_import) <= 1e-3 * abs(pre_dg_import):
                break
            addition += pre_dg_import - boundary

    sol, report = regulate(case, solver, max_rounds=cfg.oltc_max_rounds)
    boundary = float(sol.p_inj[slack_pos])

    return DnInstance(
        case=case,
        host_tn_bus=host_bus,
        copy_index=copy_index,
        load_scale=scale,
        realized_penetration=pl,
        realized_split=gs,
        dg_allocation=allocation,
        boundary_p=boundary,
        regulation=report,
    )


def assemble(tn: NetworkCase, instances: list[DnInstance]) -> NetworkCase:
    """Graft every replica onto its host bus.

    The replica's boundary (slack) bus is identified with the host bus: the
    root branch is re-terminated there, the boundary bus and its source
    generator are dropped, and every other replica bus gets a fresh id, a
    structured ``dn:<host>:<copy>:<local>`` name, and an angle shifted by the
    host angle so the boundary state is continuous.  The host's aggregated
    load is removed.
    """
    combined = tn.clone()
    next_id = max((b.id for b in combined.buses), default=0) + 1

    for inst in instances:
        host = combined.bus(inst.host_tn_bus)
        host.p_load = 0.0
        host.q_load = 0.0

        src = inst.case
        slack_bus = src.slack_buses()[0]
        shift = host.v_ang - slack_bus.v_ang

        id_map: dict[int, int] = {slack_bus.id: host.id}
        for b in src.buses:
            if b.id == slack_bus.id:
                continue
            id_map[b.id] = next_id
            combined.buses.append(
                Bus(
                    id=next_id,
                    kind=BusKind.PQ,
                    p_load=b.p_load,
                    q_load=b.q_load,
                    g_shunt=b.g_shunt,
                    b_shunt=b.b_shunt,
                    v_mag=b.v_mag,
                    v_ang=b.v_ang + shift,
                    base_kv=b.base_kv,
                    v_max=b.v_max,
                    v_min=b.v_min,
                    area=host.area,
                    name=f"dn:{host.id}:{inst.copy_index}:{b.id}",
                )
            )
            next_id += 1

        branch_offset = len(combined.branches)
        for br in src.branches:
            nb = Branch(
                from_bus=id_map[br.from_bus],
                to_bus=id_map[br.to_bus],
                r=br.r,
                x=br.x,
                b_charging=br.b_charging,
                ratio=br.ratio,
                phase_shift=br.phase_shift,
                rate_a=br.rate_a,
                status=br.status,
            )
            combined.branches.append(nb)

        for g in src.generators:
            if g.bus_id == slack_bus.id:
                continue  # the boundary source dies with the boundary bus
            ng = Generator(
                bus_id=id_map[g.bus_id],
                p=g.p,
                q=g.q,
                p_min=g.p_min,
                p_max=g.p_max,
                q_min=g.q_min,
                q_max=g.q_max,
                v_set=g.v_set,
                controllable=g.controllable,
                kind=g.kind,
                cost=g.cost,
            )
            combined.generators.append(ng)

        for t in src.oltcs:
            nt = OltcTransformer(
                branch_ref=t.branch_ref + branch_offset,
                controlled_bus=id_map[t.controlled_bus],
                v_set=t.v_set,
                deadband=t.deadband,
                tap=t.tap,
                tap_min=t.tap_min,
                tap_max=t.tap_max,
                tap_step=t.tap_step,
            )
            combined.oltcs.append(nt)
            nt.sync_branch(combined)

    report = validate(combined)
    if not report.ok:
        raise SynthesisError(
            "assembled case failed validation: " + "; ".join(report.entries)
        )
    return combined


def boundary_transfers(
    case: NetworkCase, sol: PowerFlowSolution
) -> dict[int, float]:
    """Active power flowing from each host bus into its attached replicas,
    summed over the tap-changer root branches."""
    out: dict[int, float] = {}
    for t in case.oltcs:
        br = case.branches[t.branch_ref]
        out[br.from_bus] = out.get(br.from_bus, 0.0) + float(sol.p_from[t.branch_ref])
    return out


@dataclass
class GenerateResult:
    case: NetworkCase
    instances: list[DnInstance]
    capacity: CapacityResult
    selected: list[tuple[int, float, float]]
    tn_solution: PowerFlowSolution
    solution: PowerFlowSolution
    regulation: RegulationReport
    opf: object | None
    manifest: dict
    out_dir: Path | None
    written: list[Path] = field(default_factory=list)


def config_digest(cfg: SynthesisConfig) -> str:
    """Stable id for one configuration (drives the output directory name)."""
    payload = json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:10]


def generate(
    tn_path: Path | str,
    dn_path: Path | str,
    cfg: SynthesisConfig,
    out_dir: Path | str | None = None,
    jobs: int = 1,
) -> GenerateResult:
    """Run the full pipeline; deterministic for a given (templates, cfg)."""
    problems = cfg.field_errors()
    if problems:
        raise PipelineError(
            "config", "; ".join(f"{name}: {msg}" for name, msg in problems)
        )
    solver = cfg.solver_options()

    def stage(name):
        def wrap(fn, *args, **kw):
            try:
                return fn(*args, **kw)
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(name, str(exc)) from exc
        return wrap

    tn_bundle: TemplateBundle = stage("load-tn")(load_bundle, tn_path)
    tn = tn_bundle.case.clone()
    tn_solution = stage("tn-solve")(solve, tn, solver)
    if not tn_solution.converged:
        raise PipelineError("tn-solve", "transmission power flow did not converge")
    apply_solution(tn, tn_solution)

    area_names = tn_bundle.meta.area_names or DEFAULT_AREA_NAMES
    selected = stage("select-loads")(
        select_replaceable_loads, tn, cfg.large_system, area_names
    )

    dn_bundle: TemplateBundle = stage("load-dn")(load_bundle, dn_path)
    capacity = stage("capacity")(
        dn_max_capacity,
        dn_bundle.case,
        cfg.dn_v_limits,
        tolerance=cfg.capacity_tolerance,
        ceiling=cfg.capacity_ceiling,
        solver=solver,
        max_rounds=cfg.oltc_max_rounds,
    )

    tn_idx = tn.bus_index()
    plan: list[tuple[int, int, float, float]] = []  # host bus, copy, target_p, host_v
    for bus_id, p_load, _q in selected:
        count = dn_count(p_load, capacity.p_capacity * cfg.oversize)
        host_v = float(tn_solution.v_mag[tn_idx[bus_id]])
        for copy_index in range(count):
            plan.append((bus_id, copy_index, p_load / count, host_v))

    def build_instance(item):
        bus_id, copy_index, target_p, host_v = item
        return customize_dn(
            dn_bundle.case,
            target_p,
            cfg,
            _rng_for(cfg, bus_id, copy_index),
            source_v=host_v,
            host_bus=bus_id,
            copy_index=copy_index,
        )

    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                instances = list(pool.map(build_instance, plan))
        else:
            instances = [build_instance(item) for item in plan]
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("customize", str(exc)) from exc

    combined = stage("assemble")(assemble, tn, instances)
    try:
        solution, regulation = regulate(
            combined, solver, max_rounds=cfg.oltc_max_rounds
        )
    except RegulationError as exc:
        raise PipelineError("combined-solve", str(exc)) from exc
    if not solution.converged:
        worst = _worst_bus(combined, solution)
        raise PipelineError(
            "combined-solve",
            f"combined power flow did not converge (worst mismatch near {worst})",
        )
    apply_solution(combined, solution)

    opf_solution = None
    if cfg.run_opf:
        from . import opf as opf_mod

        def run_opf():
            problem = opf_mod.OpfProblem.from_case(combined)
            schedule = opf_mod.RelaxationSchedule(
                rounds=cfg.opf_rounds, v_slack=cfg.opf_v_slack
            )
            trace = (
                Path(out_dir) / "opf_trace.csv" if out_dir is not None else None
            )
            if trace is not None:
                trace.parent.mkdir(parents=True, exist_ok=True)
            sol = opf_mod.solve_with_relaxation(problem, schedule, trace_path=trace)
            opf_mod.apply_opf_solution(combined, problem, sol)
            # plain re-solve: the optimized taps are pinned, the deadband rule
            # already had its say inside the relaxation loop
            nonlocal solution
            solution = solve(combined, solver)
            apply_solution(combined, solution)
            return sol

        opf_solution = stage("opf")(run_opf)

    manifest = _manifest(cfg, capacity, selected, instances, combined, regulation, opf_solution)

    written: list[Path] = []
    resolved_out = Path(out_dir) if out_dir is not None else None
    if resolved_out is not None:
        def do_export():
            resolved_out.mkdir(parents=True, exist_ok=True)
            files = caseio.export(combined, cfg.export_format, resolved_out)
            manifest_path = resolved_out / "manifest.json"
            manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
            files.append(manifest_path)
            return files

        written = stage("export")(do_export)

    return GenerateResult(
        case=combined,
        instances=instances,
        capacity=capacity,
        selected=selected,
        tn_solution=tn_solution,
        solution=solution,
        regulation=regulation,
        opf=opf_solution,
        manifest=manifest,
        out_dir=resolved_out,
        written=written,
    )


def _worst_bus(case: NetworkCase, sol: PowerFlowSolution) -> str:
    """Best-effort localization of a divergence: names the host of the bus
    with the largest stored voltage excursion."""
    idx = case.bus_index()
    worst, worst_bus = -1.0, None
    for b in case.buses:
        dev = abs(float(sol.v_mag[idx[b.id]]) - 1.0)
        if dev > worst:
            worst, worst_bus = dev, b
    if worst_bus is None:
        return "unknown bus"
    if worst_bus.name.startswith("dn:"):
        host = worst_bus.name.split(":")[1]
        return f"TN bus {host} (replica bus {worst_bus.name})"
    return f"TN bus {worst_bus.id}"


def _manifest(cfg, capacity, selected, instances, combined, regulation, opf_solution) -> dict:
    per_instance = [
        {
            "host_bus": inst.host_tn_bus,
            "copy": inst.copy_index,
            "load_scale": inst.load_scale,
            "penetration": inst.realized_penetration,
            "generation_split": inst.realized_split,
            "boundary_import_pu": inst.boundary_p,
            "final_taps": [t.tap for t in inst.case.oltcs],
        }
        for inst in instances
    ]
    cfg_dict = asdict(cfg)
    cfg_dict["dn_v_limits"] = list(cfg.dn_v_limits)
    out = {
        "config": cfg_dict,
        "seed": cfg.rng_seed,
        "template_capacity": {
            "max_scale": capacity.max_scale,
            "p_capacity": capacity.p_capacity,
            "binding_bus": capacity.binding_bus,
            "unbounded_by_voltage": capacity.unbounded_by_voltage,
        },
        "replaced_loads": [
            {"bus": bus, "p_load": p, "q_load": q} for bus, p, q in selected
        ],
        "instances": per_instance,
        "combined": {
            "buses": len(combined.buses),
            "branches": len(combined.branches),
            "generators": len(combined.generators),
            "oltcs": len(combined.oltcs),
            "regulation_rounds": regulation.rounds,
        },
    }
    if opf_solution is not None:
        out["opf"] = {
            "objective": opf_solution.objective,
            "feasible": opf_solution.feasible,
            "rounds": opf_solution.relaxation_rounds,
            "kkt_residual": opf_solution.kkt_residual,
        }
    return out
