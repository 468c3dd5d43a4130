"""COICOP categories and the MCC -> COICOP mapping table."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

N_CATEGORIES = 15

COICOP_NAMES = {
    1: "Food and non-alcoholic beverages",
    2: "Alcoholic beverages, tobacco and narcotics",
    3: "Clothing and footwear",
    4: "Housing, water, electricity, gas and other fuels",
    5: "Furnishings, household equipment and routine household maintenance",
    6: "Health",
    7: "Transport",
    8: "Information and communication",
    9: "Recreation, sport and culture",
    10: "Education services",
    11: "Restaurants and accommodation services",
    12: "Insurance and financial services",
    13: "Personal care, social protection and miscellaneous goods and services",
    14: "Individual consumption expenditure of non-profit institutions serving households",
    15: "Individual consumption expenditure of general government",
}

FOOD, HEALTH, TRANSPORT = 1, 6, 7
DEFAULT_CATEGORY = 13


@dataclass(frozen=True)
class CoicopCode:
    code: int
    name: str

    def __post_init__(self):
        if self.code not in COICOP_NAMES:
            raise ValueError(f"COICOP code must be in 1..{N_CATEGORIES}, got {self.code}")


def category(code: int) -> CoicopCode:
    return CoicopCode(int(code), COICOP_NAMES.get(int(code), ""))


def _parse_mcc_field(text: str) -> range:
    text = text.strip()
    if "-" in text:
        lo, hi = (int(p) for p in text.split("-", 1))
    else:
        lo = hi = int(text)
    if not (0 <= lo <= hi <= 9999):
        raise ValueError(f"bad MCC entry {text!r}")
    return range(lo, hi + 1)


@dataclass
class MccMapping:
    """Total MCC -> COICOP lookup.

    Unknown codes fall back to ``default`` and bump ``unmapped_count``; the
    counter is the only mutable state and exists purely for reporting.
    """

    table: np.ndarray
    default: int = DEFAULT_CATEGORY
    unmapped_count: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.table.shape != (10000,):
            raise ValueError("mapping table must cover MCC 0000..9999")

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str]], default: int = DEFAULT_CATEGORY) -> "MccMapping":
        table = np.zeros(10000, dtype=np.int16)
        for mcc_text, code_text in rows:
            code = int(code_text)
            if code not in COICOP_NAMES:
                raise ValueError(f"COICOP code {code} out of range for MCC {mcc_text}")
            table[list(_parse_mcc_field(mcc_text))] = code
        return cls(table=table, default=default)

    @classmethod
    def load(cls, path: str | Path | None = None, default: int = DEFAULT_CATEGORY) -> "MccMapping":
        """Read a two-column ``mcc,coicop`` file; ``None`` loads the shipped table."""
        if path is None:
            text = resources.files("txresilience").joinpath("data/mcc_coicop.csv").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        reader = csv.reader(io.StringIO("\n".join(lines)))
        rows = [r for r in reader if r and r[0].strip().lower() != "mcc"]
        return cls.from_rows(((r[0], r[1]) for r in rows), default=default)

    def is_mapped(self, mcc: int) -> bool:
        return bool(self.table[int(mcc)] != 0)

    def map(self, mcc: int) -> int:
        mcc = int(mcc)
        if not 0 <= mcc <= 9999 or self.table[mcc] == 0:
            self.unmapped_count += 1
            return self.default
        return int(self.table[mcc])

    def map_array(self, mccs) -> np.ndarray:
        mccs = np.asarray(mccs, dtype=np.int64)
        valid = (mccs >= 0) & (mccs <= 9999)
        out = np.full(mccs.shape, self.default, dtype=np.int16)
        out[valid] = self.table[mccs[valid]]
        missing = out == 0
        out[missing] = self.default
        self.unmapped_count += int(missing.sum() + (~valid).sum())
        return out

    def mccs_for(self, code: int) -> np.ndarray:
        """All MCCs mapping to ``code``, ascending."""
        return np.flatnonzero(self.table == code)


_DEFAULT: MccMapping | None = None


def default_mapping() -> MccMapping:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = MccMapping.load()
    return _DEFAULT


def map_category(mcc: int, mapping: MccMapping | None = None) -> CoicopCode:
    mapping = mapping if mapping is not None else default_mapping()
    return category(mapping.map(mcc))
