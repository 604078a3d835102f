"""Template bundle loading.

A bundle directory holds ``case.m`` (MATPOWER text), ``case.oltc.csv``
(tap-changer sidecar), ``meta.csv`` and a ``README``.  ``meta.csv`` is a
three-column table ``record,key,value`` carrying what the case format
cannot express:

* ``area,<code>,<label>``   -- zone label for a bus-table area code
* ``feeder,<number>,<bus>`` -- feeder membership, one row per bus
* ``dg,<gen index>,<class>``-- generator classification (controllable | pv)

Two miniature bundles ship with the package (``mini-tn``, ``mini-dn``);
full-size bundles dropped into the same layout work identically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .caseio import load_case_dir
from .netmodel import NetworkCase


@dataclass
class TemplateMeta:
    area_names: dict[int, str] = field(default_factory=dict)
    feeders: dict[int, list[int]] = field(default_factory=dict)
    dg_class: dict[int, str] = field(default_factory=dict)

    def area_code(self, label: str) -> int | None:
        for code, name in self.area_names.items():
            if name == label:
                return code
        return None


@dataclass
class TemplateBundle:
    case: NetworkCase
    meta: TemplateMeta
    path: Path


def bundled_template_dir() -> Path:
    """Directory with the bundles installed alongside the package."""
    return Path(resources.files("tdsynth") / "templates")


def read_meta(path: Path) -> TemplateMeta:
    meta = TemplateMeta()
    if not path.exists():
        return meta
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            record, key, value = row["record"], row["key"], row["value"]
            if record == "area":
                meta.area_names[int(key)] = value
            elif record == "feeder":
                meta.feeders.setdefault(int(key), []).append(int(value))
            elif record == "dg":
                meta.dg_class[int(key)] = value
            else:
                raise ValueError(f"{path}: unknown meta record type {record!r}")
    return meta


def write_meta(path: Path, meta: TemplateMeta) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record", "key", "value"])
        for code in sorted(meta.area_names):
            w.writerow(["area", code, meta.area_names[code]])
        for feeder in sorted(meta.feeders):
            for bus in meta.feeders[feeder]:
                w.writerow(["feeder", feeder, bus])
        for gen in sorted(meta.dg_class):
            w.writerow(["dg", gen, meta.dg_class[gen]])


def load_bundle(path: Path | str) -> TemplateBundle:
    path = Path(path)
    if not (path / "case.m").exists():
        raise FileNotFoundError(f"no case.m under {path}")
    case = load_case_dir(path)
    meta = read_meta(path / "meta.csv")
    return TemplateBundle(case=case, meta=meta, path=path)
