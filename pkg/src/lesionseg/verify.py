"""Arithmetic consistency checks for published Dice/F1/Rank tables.

Each table column lists per-lesion Dice, F1 and Rank plus an average row and
a weighted-average row. The checks recompute:

* every Rank cell as ``0.4 * F1 + 0.6 * Dice``;
* every average-row entry as the mean of the per-lesion values, with the
  average Rank also recomputed from the unrounded Dice and F1 means;
* the weighted-average Rank from the printed weighted Dice and F1 (the
  weights themselves are not published, but Rank is linear in them).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .lesions import LESION_ORDER
from .metrics import DICE_WEIGHT, F1_WEIGHT

TOLERANCE = 5e-5
METRICS = ("dice", "f1", "rank")


class BaselineError(ValueError):
    """The baselines file is missing fields or holds non-numeric values."""


@dataclass(frozen=True)
class Check:
    table: str
    column: str
    row: str
    quantity: str
    printed: float
    recomputed: float
    tolerance: float = TOLERANCE

    @property
    def diff(self) -> float:
        return abs(self.recomputed - self.printed)

    @property
    def passed(self) -> bool:
        # tiny slack so values exactly at the tolerance are not failed by float noise
        return self.diff <= self.tolerance + 1e-12

    def label(self) -> str:
        return f"{self.table}/{self.column}/{self.row}/{self.quantity}"


def load_baselines(path=None) -> dict:
    """Read and validate a baselines JSON file; the packaged copy by default."""
    if path is None:
        text = resources.files("lesionseg").joinpath("baselines.json").read_text()
        source = "packaged baselines.json"
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise BaselineError(f"cannot read {path}: {exc}") from exc
        source = str(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BaselineError(f"{source}: invalid JSON ({exc})") from exc
    validate_baselines(data, source)
    return data


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise BaselineError(f"{where}: expected a number, got {value!r}")
    return float(value)


def validate_baselines(data, source: str = "baselines") -> None:
    if not isinstance(data, dict) or not isinstance(data.get("tables"), list) or not data["tables"]:
        raise BaselineError(f"{source}: expected an object with a non-empty 'tables' list")
    for t in data["tables"]:
        if not isinstance(t, dict) or "id" not in t or not isinstance(t.get("columns"), list):
            raise BaselineError(f"{source}: every table needs 'id' and a 'columns' list")
        for c in t["columns"]:
            where = f"{source}: {t['id']}/{c.get('name', '?') if isinstance(c, dict) else '?'}"
            if not isinstance(c, dict) or "name" not in c or not isinstance(c.get("lesions"), dict):
                raise BaselineError(f"{where}: column needs 'name' and 'lesions'")
            missing = [l.value for l in LESION_ORDER if l.value not in c["lesions"]]
            if missing:
                raise BaselineError(f"{where}: missing lesions {missing}")
            rows = [(l.value, c["lesions"][l.value]) for l in LESION_ORDER]
            rows += [(r, c[r]) for r in ("average", "weighted_average") if r in c]
            for row, vals in rows:
                if not isinstance(vals, dict):
                    raise BaselineError(f"{where}/{row}: expected an object of metrics")
                for m in METRICS:
                    if m not in vals:
                        raise BaselineError(f"{where}/{row}: missing '{m}'")
                    _number(vals[m], f"{where}/{row}/{m}")


def rank_of(f1: float, dice: float) -> float:
    return F1_WEIGHT * f1 + DICE_WEIGHT * dice


def check_column(table: str, column: dict, tol: float = TOLERANCE) -> list[Check]:
    name = column["name"]
    per = [column["lesions"][l.value] for l in LESION_ORDER]
    checks = [
        Check(table, name, l.value, "rank", float(v["rank"]), rank_of(float(v["f1"]), float(v["dice"])), tol)
        for l, v in zip(LESION_ORDER, per)
    ]
    if "average" in column:
        avg = column["average"]
        means = {m: sum(float(v[m]) for v in per) / len(per) for m in METRICS}
        for m in METRICS:
            checks.append(Check(table, name, "average", f"mean_{m}", float(avg[m]), means[m], tol))
        checks.append(Check(table, name, "average", "rank", float(avg["rank"]), rank_of(means["f1"], means["dice"]), tol))
    if "weighted_average" in column:
        w = column["weighted_average"]
        checks.append(Check(table, name, "weighted_average", "rank", float(w["rank"]), rank_of(float(w["f1"]), float(w["dice"])), tol))
    return checks


def verify(data: dict, tol: float = TOLERANCE) -> list[Check]:
    validate_baselines(data)
    out = []
    for t in data["tables"]:
        for c in t["columns"]:
            out.extend(check_column(t["id"], c, tol))
    return out


def format_checks(checks: list[Check]) -> str:
    head = f"{'check':<46}{'printed':>10}{'recomputed':>13}{'|diff|':>11}  result"
    lines = [head, "-" * len(head)]
    for c in checks:
        lines.append(
            f"{c.label():<46}{c.printed:>10.4f}{c.recomputed:>13.6f}{c.diff:>11.2e}  {'pass' if c.passed else 'FAIL'}"
        )
    n_fail = sum(not c.passed for c in checks)
    lines.append(f"{len(checks) - n_fail}/{len(checks)} checks within {checks[0].tolerance:g}" if checks else "no checks")
    return "\n".join(lines)
