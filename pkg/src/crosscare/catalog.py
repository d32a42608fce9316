"""Clinical concept catalogue.

The model consumes 52 concepts: 4 static (age, sex, height, weight) and 48
time-varying (7 vital signs, 39 laboratory tests, FiO2 and urine output).
Each entry carries a unit and an optional plausible range; values outside the
range are treated as data errors and set to missing. Ranges are deliberately
conservative (they should only catch unit mix-ups and sensor garbage) and can
be edited via the catalogue file format, see `read_catalog_file`.

A few reserved concept ids travel through the same event channel but are not
model features: `sofa` (organ failure score series), `abx` (antibiotic
administration markers) and `culture` (microbiological culture requests).
They exist solely for label derivation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

STATIC = "static"
VITAL = "vital"
LAB = "lab"
INOUT = "inout"

_KINDS = (STATIC, VITAL, LAB, INOUT)

# Reserved ids for label-only input series. `abx` events use value 1.0 for a
# single administered dose and value 2.0 for a prescription covering the whole
# stay; `culture` events use value 1.0.
AUX_CONCEPTS = ("sofa", "abx", "culture")


@dataclass(frozen=True)
class Concept:
    concept_id: str
    kind: str
    unit: str
    plausible_range: Optional[tuple[float, float]] = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown concept kind {self.kind!r} for {self.concept_id!r}")
        if self.plausible_range is not None:
            lo, hi = self.plausible_range
            if not lo < hi:
                raise ValueError(f"empty plausible range for {self.concept_id!r}: [{lo}, {hi}]")


class ConceptCatalog:
    """The fixed 52-concept set plus lookup helpers."""

    def __init__(self, entries: Iterable[Concept]):
        entries = list(entries)
        ids = [c.concept_id for c in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate concept_ids in catalogue")
        n_static = sum(1 for c in entries if c.kind == STATIC)
        if len(entries) != 52 or n_static != 4:
            raise ValueError(
                f"catalogue must hold 52 concepts (4 static), got {len(entries)} ({n_static} static)"
            )
        self.entries = entries
        self._by_id = {c.concept_id: c for c in entries}

    def __contains__(self, concept_id: str) -> bool:
        return concept_id in self._by_id

    def __getitem__(self, concept_id: str) -> Concept:
        return self._by_id[concept_id]

    @property
    def static_ids(self) -> list[str]:
        return [c.concept_id for c in self.entries if c.kind == STATIC]

    @property
    def dynamic_ids(self) -> list[str]:
        return [c.concept_id for c in self.entries if c.kind != STATIC]

    def known_event_ids(self) -> set[str]:
        """Ids accepted in event streams: dynamic concepts plus label inputs."""
        return set(self.dynamic_ids) | set(AUX_CONCEPTS)


def _c(concept_id: str, kind: str, unit: str, lo: float = None, hi: float = None) -> Concept:
    rng = None if lo is None else (float(lo), float(hi))
    return Concept(concept_id, kind, unit, rng)


def default_catalog() -> ConceptCatalog:
    """Built-in catalogue with conservative physiologic bounds."""
    return ConceptCatalog(
        [
            _c("age", STATIC, "years", 0, 120),
            _c("sex", STATIC, "female=1"),
            _c("height", STATIC, "cm", 100, 250),
            _c("weight", STATIC, "kg", 20, 500),
            _c("sbp", VITAL, "mmHg", 0, 300),
            _c("dbp", VITAL, "mmHg", 0, 250),
            _c("hr", VITAL, "beats/minute", 0, 300),
            _c("map", VITAL, "mmHg", 0, 250),
            _c("o2sat", VITAL, "%", 0, 100),
            _c("resp", VITAL, "breaths/minute", 0, 120),
            _c("temp", VITAL, "C", 25, 45),
            _c("alb", LAB, "g/dL", 0, 10),
            _c("alp", LAB, "IU/L", 0, 5000),
            _c("alt", LAB, "IU/L", 0, 20000),
            _c("ast", LAB, "IU/L", 0, 20000),
            _c("be", LAB, "mmol/L", -50, 50),
            _c("bicar", LAB, "mmol/L", 0, 60),
            _c("bili", LAB, "mg/dL", 0, 60),
            _c("bili_dir", LAB, "mg/dL", 0, 50),
            _c("bnd", LAB, "%", 0, 100),
            _c("bun", LAB, "mg/dL", 0, 250),
            _c("ca", LAB, "mg/dL", 0, 25),
            _c("cai", LAB, "mmol/L", 0, 5),
            _c("crea", LAB, "mg/dL", 0, 30),
            _c("ck", LAB, "IU/L", 0, 200000),
            _c("ckmb", LAB, "ng/mL", 0, 2000),
            _c("cl", LAB, "mmol/L", 50, 200),
            _c("pco2", LAB, "mmHg", 0, 250),
            _c("crp", LAB, "mg/L", 0, 1000),
            _c("fgn", LAB, "mg/dL", 0, 2000),
            _c("glu", LAB, "mg/dL", 0, 2000),
            _c("hgb", LAB, "g/dL", 0, 30),
            _c("inr_pt", LAB, "ratio", 0, 20),
            _c("lact", LAB, "mmol/L", 0, 40),
            _c("lymph", LAB, "%", 0, 100),
            _c("mch", LAB, "pg", 0, 80),
            _c("mchc", LAB, "%", 0, 60),
            _c("mcv", LAB, "fL", 0, 200),
            _c("methb", LAB, "%", 0, 100),
            _c("mg", LAB, "mg/dL", 0, 15),
            _c("neut", LAB, "%", 0, 100),
            _c("po2", LAB, "mmHg", 0, 800),
            _c("ptt", LAB, "sec", 0, 300),
            _c("ph", LAB, "pH", 6.2, 8.0),
            _c("phos", LAB, "mg/dL", 0, 25),
            _c("plt", LAB, "1000/uL", 0, 3000),
            _c("k", LAB, "mmol/L", 0, 12),
            _c("na", LAB, "mmol/L", 80, 200),
            _c("tnt", LAB, "ng/mL", 0, 100),
            _c("wbc", LAB, "1000/uL", 0, 500),
            _c("fio2", INOUT, "%", 21, 100),
            _c("urine", INOUT, "mL", 0, 5000),
        ]
    )


def write_catalog_file(catalog: ConceptCatalog, path: str) -> None:
    """Write the key-value catalogue file (one block per concept)."""
    lines: list[str] = []
    for c in catalog.entries:
        lines.append(f"concept {c.concept_id}")
        lines.append(f"kind {c.kind}")
        lines.append(f"unit {c.unit}")
        if c.plausible_range is not None:
            lines.append(f"min {c.plausible_range[0]!r}")
            lines.append(f"max {c.plausible_range[1]!r}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def read_catalog_file(path: str) -> ConceptCatalog:
    """Parse the key-value catalogue file written by `write_catalog_file`.

    Blocks are separated by blank lines; each block needs `concept`, `kind`
    and `unit` keys, with optional `min`/`max` (both or neither).
    """
    entries: list[Concept] = []
    block: dict[str, str] = {}

    def flush() -> None:
        if not block:
            return
        for key in ("concept", "kind", "unit"):
            if key not in block:
                raise ValueError(f"catalogue block missing {key!r}: {block}")
        if ("min" in block) != ("max" in block):
            raise ValueError(f"catalogue block needs both min and max or neither: {block}")
        rng = None
        if "min" in block:
            rng = (float(block["min"]), float(block["max"]))
        entries.append(Concept(block["concept"], block["kind"], block["unit"], rng))
        block.clear()

    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                flush()
                continue
            key, _, value = line.partition(" ")
            if not value:
                raise ValueError(f"malformed catalogue line: {raw!r}")
            block[key] = value.strip()
    flush()
    return ConceptCatalog(entries)
