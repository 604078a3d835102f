"""Read and write the MATPOWER v2 case-file text format plus sidecar data.

Only the declarative subset of the format is accepted: scalar assignments
(``mpc.version``, ``mpc.baseMVA``), numeric matrix literals
(``mpc.<name> = [ ... ];`` with rows split on ``;`` or newline), an optional
``mpc.bus_name`` cell list, and ``%`` comments.  Anything executable is
rejected.  Unknown ``mpc.<name>`` tables are kept so they survive a
parse/emit round trip.

Tap-changer data has no home in the MATPOWER tables, so it travels in a
sidecar CSV (``<case>.oltc.csv``) with header
``branch_index,controlled_bus,v_set,deadband,tap,tap_min,tap_max,tap_step``;
``branch_index`` is the 0-based row in the branch table.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .netmodel import (
    Branch,
    Bus,
    BusKind,
    Generator,
    GenKind,
    NetworkCase,
    OltcTransformer,
)

# MATPOWER v2 column positions.
BUS_I, BUS_TYPE, PD, QD, GS, BS, BUS_AREA, VM, VA, BASE_KV, ZONE, VMAX, VMIN = range(13)
GEN_BUS, PG, QG, QMAX, QMIN, VG, MBASE, GEN_STATUS, PMAX, PMIN = range(10)
F_BUS, T_BUS, BR_R, BR_X, BR_B, RATE_A, RATE_B, RATE_C, TAP, SHIFT, BR_STATUS, ANGMIN, ANGMAX = range(13)
COST_MODEL, STARTUP, SHUTDOWN, NCOST, COST_C2, COST_C1, COST_C0 = range(7)

BUS_COLS = 13
GEN_COLS = 21
BRANCH_COLS = 13

_KIND_CODE = {GenKind.TN_UNIT: 0, GenKind.DN_CONTROLLABLE: 1, GenKind.DN_PV: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}

OLTC_CSV_HEADER = "branch_index,controlled_bus,v_set,deadband,tap,tap_min,tap_max,tap_step"


class CaseParseError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class StructuralError(ValueError):
    """A syntactically fine document that violates the table contracts."""


class ExporterError(KeyError):
    pass


@dataclass
class CaseDocument:
    version: str = "2"
    base_mva: float = 100.0
    matrices: dict[str, list[list[float]]] = field(default_factory=dict)
    bus_name: list[str] | None = None


@dataclass
class OltcAnnotation:
    branch_index: int
    controlled_bus: int
    v_set: float
    deadband: float
    tap: int
    tap_min: int
    tap_max: int
    tap_step: float


# ---------------------------------------------------------------------------
# tokenizer / parser


_TOKEN_RE = re.compile(
    r"""(?P<nl>\n)
      | (?P<ws>[ \t\r]+)
      | (?P<comment>%[^\n]*)
      | (?P<lbracket>\[) | (?P<rbracket>\])
      | (?P<lbrace>\{)   | (?P<rbrace>\})
      | (?P<semi>;)      | (?P<eq>=)
      | (?P<string>'[^'\n]*')
      | (?P<name>mpc\.[A-Za-z_][A-Za-z0-9_]*)
      | (?P<number>[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
    """,
    re.VERBOSE,
)


def _tokenize(text: str):
    """Yield (kind, value, line, col); comments and blanks are dropped,
    newlines are kept because they separate matrix rows."""
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise CaseParseError(
                f"unexpected character {text[pos]!r}", line, pos - line_start + 1
            )
        kind = m.lastgroup
        value = m.group()
        if kind == "nl":
            yield "nl", value, line, pos - line_start + 1
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            yield kind, value, line, pos - line_start + 1
        pos = m.end()
    yield "eof", "", line, len(text) - line_start + 1


class _Parser:
    def __init__(self, text: str):
        self.tokens = [t for t in _tokenize(text)]
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self, skip_nl: bool = True):
        while skip_nl and self.tokens[self.i][0] == "nl":
            self.i += 1
        tok = self.tokens[self.i]
        if tok[0] != "eof":
            self.i += 1
        return tok

    def expect(self, kind: str, what: str):
        tok = self.next()
        if tok[0] != kind:
            raise CaseParseError(f"expected {what}, found {tok[1]!r}", tok[2], tok[3])
        return tok

    def parse(self) -> CaseDocument:
        doc = CaseDocument(version="2", base_mva=100.0, matrices={}, bus_name=None)
        seen: set[str] = set()
        while True:
            tok = self.next()
            if tok[0] == "eof":
                break
            if tok[0] != "name":
                raise CaseParseError(
                    f"expected 'mpc.<name> = ...', found {tok[1]!r}", tok[2], tok[3]
                )
            name = tok[1][len("mpc.") :]
            if name in seen:
                raise CaseParseError(f"duplicate assignment to mpc.{name}", tok[2], tok[3])
            seen.add(name)
            self.expect("eq", "'='")
            if name == "version":
                s = self.expect("string", "a quoted version string")
                doc.version = s[1][1:-1]
            elif name == "baseMVA":
                n = self.expect("number", "a number")
                doc.base_mva = float(n[1])
            elif name == "bus_name":
                doc.bus_name = self._cell_list()
            else:
                doc.matrices[name] = self._matrix(name)
            self.expect("semi", "';'")
        _check_document(doc)
        return doc

    def _matrix(self, name: str) -> list[list[float]]:
        self.expect("lbracket", "'['")
        rows: list[list[float]] = []
        row: list[float] = []
        width: int | None = None

        def close_row(tok):
            nonlocal width
            if not row:
                return
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise CaseParseError(
                    f"ragged row in mpc.{name}: {len(row)} cells, expected {width}",
                    tok[2],
                    tok[3],
                )
            rows.append(row.copy())
            row.clear()

        while True:
            tok = self.next(skip_nl=False)
            if tok[0] == "number":
                row.append(float(tok[1]))
            elif tok[0] in ("semi", "nl"):
                close_row(tok)
            elif tok[0] == "rbracket":
                close_row(tok)
                return rows
            elif tok[0] == "eof":
                raise CaseParseError(f"unterminated matrix mpc.{name}", tok[2], tok[3])
            else:
                raise CaseParseError(
                    f"non-numeric cell {tok[1]!r} in mpc.{name}", tok[2], tok[3]
                )

    def _cell_list(self) -> list[str]:
        self.expect("lbrace", "'{'")
        names: list[str] = []
        while True:
            tok = self.next()
            if tok[0] == "string":
                names.append(tok[1][1:-1])
            elif tok[0] == "semi":
                continue
            elif tok[0] == "rbrace":
                return names
            else:
                raise CaseParseError(
                    f"expected quoted name in mpc.bus_name, found {tok[1]!r}",
                    tok[2],
                    tok[3],
                )


def _check_document(doc: CaseDocument) -> None:
    for table in ("bus", "gen", "branch"):
        if table not in doc.matrices:
            raise StructuralError(f"missing required table mpc.{table}")
    minima = {"bus": BUS_COLS, "gen": GEN_COLS, "branch": BRANCH_COLS}
    for table, want in minima.items():
        for i, row in enumerate(doc.matrices[table]):
            if len(row) < want:
                raise StructuralError(
                    f"mpc.{table} row {i} has {len(row)} columns, needs at least {want}"
                )
    if not math.isfinite(doc.base_mva):
        raise StructuralError("baseMVA must be finite")
    for name, rows in doc.matrices.items():
        for i, row in enumerate(rows):
            for v in row:
                if not math.isfinite(v):
                    raise StructuralError(f"non-finite cell in mpc.{name} row {i}")
    if doc.bus_name is not None:
        if len(doc.bus_name) != len(doc.matrices["bus"]):
            raise StructuralError(
                f"bus_name has {len(doc.bus_name)} entries for "
                f"{len(doc.matrices['bus'])} buses"
            )
        for n in doc.bus_name:
            if "'" in n or "\n" in n:
                raise StructuralError(f"bus name {n!r} contains a quote or newline")


def parse_case(text: str) -> CaseDocument:
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# emitter


def _fmt(v: float) -> str:
    # shortest decimal that round-trips the binary value; integral values
    # are written bare for readability
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def emit_case(doc: CaseDocument) -> str:
    """Deterministic text for a document; equal documents emit equal bytes."""
    _check_document(doc)
    out = io.StringIO()
    out.write(f"mpc.version = '{doc.version}';\n")
    out.write(f"mpc.baseMVA = {_fmt(doc.base_mva)};\n")
    known = ("bus", "gen", "branch", "gencost")
    order = [t for t in known if t in doc.matrices]
    order += sorted(t for t in doc.matrices if t not in known)
    for table in order:
        out.write(f"\nmpc.{table} = [\n")
        for row in doc.matrices[table]:
            out.write("\t" + "\t".join(_fmt(v) for v in row) + ";\n")
        out.write("];\n")
    if doc.bus_name is not None:
        out.write("\nmpc.bus_name = {\n")
        for name in doc.bus_name:
            out.write(f"\t'{name}';\n")
        out.write("};\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# document <-> network model


def to_network(doc: CaseDocument, oltc_spec: list[OltcAnnotation] | None = None) -> NetworkCase:
    """Build the per-unit model; MW quantities are divided by baseMVA here."""
    base = doc.base_mva
    kinds = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}
    case = NetworkCase(base_mva=base)

    names = doc.bus_name or [f"bus{int(row[BUS_I])}" for row in doc.matrices["bus"]]
    for row, name in zip(doc.matrices["bus"], names):
        code = int(row[BUS_TYPE])
        if code not in kinds:
            raise StructuralError(f"bus {int(row[BUS_I])}: unsupported type code {code}")
        case.buses.append(
            Bus(
                id=int(row[BUS_I]),
                kind=kinds[code],
                p_load=row[PD] / base,
                q_load=row[QD] / base,
                g_shunt=row[GS] / base,
                b_shunt=row[BS] / base,
                v_mag=row[VM],
                v_ang=math.radians(row[VA]),
                base_kv=row[BASE_KV],
                v_max=row[VMAX],
                v_min=row[VMIN],
                area=int(row[BUS_AREA]),
                name=name,
            )
        )

    gencost = doc.matrices.get("gencost")
    genkind = doc.matrices.get("gen_kind")
    for i, row in enumerate(doc.matrices["gen"]):
        if int(row[GEN_STATUS]) == 0:
            continue
        cost = (0.0, 0.0, 0.0)
        if gencost is not None and i < len(gencost):
            crow = gencost[i]
            if int(crow[COST_MODEL]) != 2 or int(crow[NCOST]) != 3:
                raise StructuralError(
                    f"gencost row {i}: only 3-coefficient polynomial costs are supported"
                )
            cost = (crow[COST_C2], crow[COST_C1], crow[COST_C0])
        kind, controllable = GenKind.TN_UNIT, True
        if genkind is not None and i < len(genkind):
            kind = _CODE_KIND[int(genkind[i][0])]
            controllable = bool(int(genkind[i][1]))
        case.generators.append(
            Generator(
                bus_id=int(row[GEN_BUS]),
                p=row[PG] / base,
                q=row[QG] / base,
                p_min=row[PMIN] / base,
                p_max=row[PMAX] / base,
                q_min=row[QMIN] / base,
                q_max=row[QMAX] / base,
                v_set=row[VG],
                controllable=controllable,
                kind=kind,
                cost=cost,
            )
        )

    for row in doc.matrices["branch"]:
        case.branches.append(
            Branch(
                from_bus=int(row[F_BUS]),
                to_bus=int(row[T_BUS]),
                r=row[BR_R],
                x=row[BR_X],
                b_charging=row[BR_B],
                # MATPOWER convention: ratio 0 marks a plain line
                ratio=row[TAP] if row[TAP] != 0.0 else 1.0,
                phase_shift=math.radians(row[SHIFT]),
                rate_a=row[RATE_A] / base,
                status=bool(int(row[BR_STATUS])),
            )
        )

    for ann in oltc_spec or []:
        if not 0 <= ann.branch_index < len(case.branches):
            raise StructuralError(
                f"oltc annotation references absent branch {ann.branch_index}"
            )
        t = OltcTransformer(
            branch_ref=ann.branch_index,
            controlled_bus=ann.controlled_bus,
            v_set=ann.v_set,
            deadband=ann.deadband,
            tap=ann.tap,
            tap_min=ann.tap_min,
            tap_max=ann.tap_max,
            tap_step=ann.tap_step,
        )
        t.sync_branch(case)  # the tap, not the file ratio, is authoritative
        case.oltcs.append(t)

    return case


def from_network(case: NetworkCase) -> tuple[CaseDocument, list[OltcAnnotation]]:
    """Inverse of :func:`to_network` up to the column defaults listed below."""
    base = case.base_mva
    codes = {BusKind.PQ: 1, BusKind.PV: 2, BusKind.SLACK: 3}
    doc = CaseDocument(version="2", base_mva=base, matrices={}, bus_name=None)

    doc.matrices["bus"] = [
        [
            float(b.id),
            float(codes[b.kind]),
            b.p_load * base,
            b.q_load * base,
            b.g_shunt * base,
            b.b_shunt * base,
            float(b.area),
            b.v_mag,
            math.degrees(b.v_ang),
            b.base_kv,
            1.0,
            b.v_max,
            b.v_min,
        ]
        for b in case.buses
    ]
    doc.bus_name = [b.name or f"bus{b.id}" for b in case.buses]

    doc.matrices["gen"] = [
        [
            float(g.bus_id),
            g.p * base,
            g.q * base,
            g.q_max * base,
            g.q_min * base,
            g.v_set,
            base,
            1.0,
            g.p_max * base,
            g.p_min * base,
        ]
        + [0.0] * 11
        for g in case.generators
    ]
    doc.matrices["gencost"] = [
        [2.0, 0.0, 0.0, 3.0, g.cost[0], g.cost[1], g.cost[2]] for g in case.generators
    ]
    doc.matrices["gen_kind"] = [
        [float(_KIND_CODE[g.kind]), 1.0 if g.controllable else 0.0]
        for g in case.generators
    ]

    doc.matrices["branch"] = [
        [
            float(br.from_bus),
            float(br.to_bus),
            br.r,
            br.x,
            br.b_charging,
            br.rate_a * base,
            0.0,
            0.0,
            br.ratio,
            math.degrees(br.phase_shift),
            1.0 if br.status else 0.0,
            -360.0,
            360.0,
        ]
        for br in case.branches
    ]

    annotations = [
        OltcAnnotation(
            branch_index=t.branch_ref,
            controlled_bus=t.controlled_bus,
            v_set=t.v_set,
            deadband=t.deadband,
            tap=t.tap,
            tap_min=t.tap_min,
            tap_max=t.tap_max,
            tap_step=t.tap_step,
        )
        for t in case.oltcs
    ]
    return doc, annotations


# ---------------------------------------------------------------------------
# sidecar CSV


def write_oltc_annotations(path: Path, annotations: list[OltcAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OLTC_CSV_HEADER.split(","))
        for a in annotations:
            w.writerow(
                [
                    a.branch_index,
                    a.controlled_bus,
                    _fmt(a.v_set),
                    _fmt(a.deadband),
                    a.tap,
                    a.tap_min,
                    a.tap_max,
                    _fmt(a.tap_step),
                ]
            )


def read_oltc_annotations(path: Path) -> list[OltcAnnotation]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                OltcAnnotation(
                    branch_index=int(row["branch_index"]),
                    controlled_bus=int(row["controlled_bus"]),
                    v_set=float(row["v_set"]),
                    deadband=float(row["deadband"]),
                    tap=int(row["tap"]),
                    tap_min=int(row["tap_min"]),
                    tap_max=int(row["tap_max"]),
                    tap_step=float(row["tap_step"]),
                )
            )
    return out


def load_case_dir(path: Path | str) -> NetworkCase:
    """Load ``case.m`` (+ optional ``case.oltc.csv``) from a bundle directory."""
    path = Path(path)
    doc = parse_case((path / "case.m").read_text())
    sidecar = path / "case.oltc.csv"
    annotations = read_oltc_annotations(sidecar) if sidecar.exists() else []
    return to_network(doc, annotations)


def save_case_dir(case: NetworkCase, path: Path | str) -> list[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    doc, annotations = from_network(case)
    case_m = path / "case.m"
    case_m.write_text(emit_case(doc))
    sidecar = path / "case.oltc.csv"
    write_oltc_annotations(sidecar, annotations)
    return [case_m, sidecar]


# ---------------------------------------------------------------------------
# exporter registry

Exporter = Callable[[NetworkCase, Path], list[Path]]

_EXPORTERS: dict[str, Exporter] = {}


def register_exporter(name: str, exporter: Exporter) -> None:
    _EXPORTERS[name] = exporter


def registered_exporters() -> list[str]:
    return sorted(_EXPORTERS)


def export(case: NetworkCase, name: str, sink: Path | str) -> list[Path]:
    """Run a registered exporter, writing its files under ``sink``."""
    try:
        exporter = _EXPORTERS[name]
    except KeyError:
        raise ExporterError(
            f"unknown exporter {name!r}; registered: {', '.join(registered_exporters())}"
        ) from None
    sink = Path(sink)
    sink.mkdir(parents=True, exist_ok=True)
    return exporter(case, sink)


def _export_matpower(case: NetworkCase, sink: Path) -> list[Path]:
    return save_case_dir(case, sink)


def _export_flat(case: NetworkCase, sink: Path) -> list[Path]:
    """Four plain CSVs in SI units (MW, Mvar, kV); one row per element."""
    base = case.base_mva
    written = []

    def table(name: str, header: list[str], rows):
        p = sink / name
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        written.append(p)

    table(
        "buses.csv",
        ["id", "name", "kind", "area", "base_kv", "p_load_mw", "q_load_mvar",
         "g_shunt_mw", "b_shunt_mvar", "v_mag_pu", "v_ang_deg", "v_min_pu", "v_max_pu"],
        [
            [b.id, b.name, b.kind.value, b.area, _fmt(b.base_kv),
             _fmt(b.p_load * base), _fmt(b.q_load * base),
             _fmt(b.g_shunt * base), _fmt(b.b_shunt * base),
             _fmt(b.v_mag), _fmt(math.degrees(b.v_ang)), _fmt(b.v_min), _fmt(b.v_max)]
            for b in case.buses
        ],
    )
    table(
        "branches.csv",
        ["from_bus", "to_bus", "r_pu", "x_pu", "b_pu", "ratio",
         "phase_shift_deg", "rate_mva", "status"],
        [
            [br.from_bus, br.to_bus, _fmt(br.r), _fmt(br.x), _fmt(br.b_charging),
             _fmt(br.ratio), _fmt(math.degrees(br.phase_shift)),
             _fmt(br.rate_a * base), int(br.status)]
            for br in case.branches
        ],
    )
    table(
        "generators.csv",
        ["bus", "kind", "controllable", "p_mw", "q_mvar", "p_min_mw", "p_max_mw",
         "q_min_mvar", "q_max_mvar", "v_set_pu", "cost_c2", "cost_c1", "cost_c0"],
        [
            [g.bus_id, g.kind.value, int(g.controllable),
             _fmt(g.p * base), _fmt(g.q * base),
             _fmt(g.p_min * base), _fmt(g.p_max * base),
             _fmt(g.q_min * base), _fmt(g.q_max * base),
             _fmt(g.v_set), _fmt(g.cost[0]), _fmt(g.cost[1]), _fmt(g.cost[2])]
            for g in case.generators
        ],
    )
    table(
        "oltc.csv",
        OLTC_CSV_HEADER.split(","),
        [
            [t.branch_ref, t.controlled_bus, _fmt(t.v_set), _fmt(t.deadband),
             t.tap, t.tap_min, t.tap_max, _fmt(t.tap_step)]
            for t in case.oltcs
        ],
    )
    return written


register_exporter("matpower", _export_matpower)
register_exporter("flat", _export_flat)
