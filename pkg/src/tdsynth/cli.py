"""Batch front-end: read a flat key=value config, run the pipeline, report.

``tdsynth generate <config>`` writes an output bundle under
``<out>/<run-id>/`` where the run id is a digest of the configuration, so a
repeated run with the same config and seed lands on byte-identical files.
``tdsynth inspect <dir>`` loads a previously written bundle and prints its
health: validation findings, solved voltage range, total load, penetration
and the boundary transfers.

Exit codes: 0 success, 1 pipeline failure (message carries the stage tag),
2 configuration problem (message names the field).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import caseio
from .netmodel import GenKind, penetration_level, total_load, validate
from .oltc import regulate
from .synth import (
    GenerateResult,
    PipelineError,
    SynthesisConfig,
    boundary_transfers,
    config_digest,
    generate,
)
from .templates import bundled_template_dir, load_bundle


class ConfigError(ValueError):
    def __init__(self, name: str, message: str):
        super().__init__(f"config field {name!r}: {message}")
        self.field = name


_BOOL_FIELDS = {"constant_load", "random", "large_system", "run_opf"}
_INT_FIELDS = {"rng_seed", "pf_max_iterations", "oltc_max_rounds", "opf_rounds"}
_FLOAT_FIELDS = {
    "penetration_level", "generation_split", "oversize", "oltc_v_set",
    "pf_tolerance", "capacity_tolerance", "capacity_ceiling", "opf_v_slack",
    "dn_v_min", "dn_v_max",
}
_STR_FIELDS = {"export_format"}


def parse_config(path: Path) -> SynthesisConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line.split()[0], f"line {lineno} is not a key=value pair")
        key, _, text = line.partition("=")
        key = key.strip()
        text = text.strip()
        if key in values:
            raise ConfigError(key, "assigned twice")
        if key in _BOOL_FIELDS:
            if text.lower() not in ("true", "false"):
                raise ConfigError(key, f"expected true or false, got {text!r}")
            values[key] = text.lower() == "true"
        elif key in _INT_FIELDS:
            try:
                values[key] = int(text)
            except ValueError:
                raise ConfigError(key, f"expected an integer, got {text!r}") from None
        elif key in _FLOAT_FIELDS:
            try:
                values[key] = float(text)
            except ValueError:
                raise ConfigError(key, f"expected a number, got {text!r}") from None
        elif key in _STR_FIELDS:
            values[key] = text
        else:
            raise ConfigError(key, "unknown field")

    v_min = values.pop("dn_v_min", None)
    v_max = values.pop("dn_v_max", None)
    cfg = SynthesisConfig(**values)  # type: ignore[arg-type]
    if v_min is not None or v_max is not None:
        lo = v_min if v_min is not None else cfg.dn_v_limits[0]
        hi = v_max if v_max is not None else cfg.dn_v_limits[1]
        cfg.dn_v_limits = (float(lo), float(hi))
    problems = cfg.field_errors()
    if problems:
        raise ConfigError(problems[0][0], problems[0][1])
    return cfg


def _summary(result: GenerateResult, area_names: dict[int, str]) -> dict:
    case = result.case
    pens = [inst.realized_penetration for inst in result.instances]
    per_area: dict[str, int] = {}
    host_area = {b.id: area_names.get(b.area, str(b.area)) for b in case.buses}
    for inst in result.instances:
        label = host_area.get(inst.host_tn_bus, str(inst.host_tn_bus))
        per_area[label] = per_area.get(label, 0) + 1
    p_load, q_load = total_load(case)
    summary = {
        "buses": len(case.buses),
        "branches": len(case.branches),
        "generators": len(case.generators),
        "dn_instances": len(result.instances),
        "dn_instances_per_area": dict(sorted(per_area.items())),
        "penetration": {
            "min": min(pens) if pens else 0.0,
            "mean": sum(pens) / len(pens) if pens else 0.0,
            "max": max(pens) if pens else 0.0,
        },
        "total_load_pu": {"p": p_load, "q": q_load},
        "oltc_rounds": result.regulation.rounds,
    }
    if result.opf is not None:
        summary["opf_objective"] = result.opf.objective
        summary["opf_feasible"] = result.opf.feasible
    return summary


def _print_summary(summary: dict, out_dir: Path | None) -> None:
    print(
        f"buses: {summary['buses']}  branches: {summary['branches']}  "
        f"generators: {summary['generators']}"
    )
    areas = ", ".join(f"{k}: {v}" for k, v in summary["dn_instances_per_area"].items())
    print(f"DN instances: {summary['dn_instances']} ({areas})")
    pen = summary["penetration"]
    print(
        "realized penetration: "
        f"min {pen['min']:.4f} / mean {pen['mean']:.4f} / max {pen['max']:.4f}"
    )
    print(f"OLTC rounds on combined system: {summary['oltc_rounds']}")
    if "opf_objective" in summary:
        print(
            f"OPF objective: {summary['opf_objective']:.2f} "
            f"(feasible: {summary['opf_feasible']})"
        )
    if out_dir is not None:
        print(f"output bundle: {out_dir}")


def _cmd_generate(args) -> int:
    try:
        cfg = parse_config(Path(args.config))
    except FileNotFoundError:
        print(f"config file not found: {args.config}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.rng_seed = args.seed

    templates = Path(args.templates) if args.templates else bundled_template_dir()
    out_root = Path(args.out)
    run_dir = out_root / config_digest(cfg)
    try:
        result = generate(
            templates / "mini-tn",
            templates / "mini-dn",
            cfg,
            out_dir=run_dir,
            jobs=args.jobs,
        )
    except PipelineError as exc:
        print(str(exc), file=sys.stderr)
        return 1

    area_names = load_bundle(templates / "mini-tn").meta.area_names
    summary = _summary(result, area_names)
    (run_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    _print_summary(summary, run_dir)
    return 0


def _cmd_inspect(args) -> int:
    path = Path(args.case_dir)
    try:
        case = caseio.load_case_dir(path)
    except (OSError, ValueError) as exc:
        print(f"cannot load case bundle: {exc}", file=sys.stderr)
        return 1

    report = validate(case)
    if report.ok:
        print("validation: ok")
    else:
        print("validation:")
        for entry in report.entries:
            print(f"  - {entry}")

    sol, reg = regulate(case)
    if not sol.converged:
        print("power flow did not converge", file=sys.stderr)
        return 1
    print(f"power flow: converged in {sol.iterations} iterations "
          f"(mismatch {sol.max_mismatch:.2e})")
    print(f"voltage range: {sol.v_mag.min():.4f} .. {sol.v_mag.max():.4f} pu")
    p, q = total_load(case)
    print(f"total load: {p:.4f} pu / {q:.4f} pu ({p * case.base_mva:.1f} MW)")
    has_dg = any(
        g.kind in (GenKind.DN_CONTROLLABLE, GenKind.DN_PV) for g in case.generators
    )
    if has_dg and p > 0:
        print(f"penetration level: {penetration_level(case):.4f}")
    if case.oltcs:
        print("boundary transfers (per tap-changing transformer, pu):")
        for k, t in enumerate(case.oltcs):
            br = case.branches[t.branch_ref]
            print(
                f"  oltc {k} (bus {br.from_bus} -> {br.to_bus}, tap {t.tap:+d}): "
                f"{float(sol.p_from[t.branch_ref]):+.4f}"
            )
        totals = boundary_transfers(case, sol)
        for bus in sorted(totals):
            print(f"  bus {bus} total: {totals[bus]:+.4f}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="tdsynth",
        description="Synthesize combined transmission-and-distribution test networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="run the synthesis pipeline from a config file")
    gen.add_argument("config", help="flat key=value config file")
    gen.add_argument("--templates", help="directory with mini-tn/ and mini-dn/ bundles")
    gen.add_argument("--out", default="output", help="output root (default: ./output)")
    gen.add_argument("--seed", type=int, help="override rng_seed from the config")
    gen.add_argument("--jobs", type=int, default=1, help="parallel replica workers")
    gen.set_defaults(func=_cmd_generate)

    ins = sub.add_parser("inspect", help="load a case bundle and print its state")
    ins.add_argument("case_dir", help="directory holding case.m (+ case.oltc.csv)")
    ins.set_defaults(func=_cmd_inspect)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
