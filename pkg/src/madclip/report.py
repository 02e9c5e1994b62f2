"""Metric report rows, CSV persistence and the per-dataset summary table."""

from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional

from .metrics import as_percent

REPORT_FIELDS = ("dataset", "shots", "seed", "AC_AUC", "AS_AUC", "protocol", "source")


@dataclass
class EvalReport:
    dataset: str
    shots: int
    seed: int
    ac_auc: float
    as_auc: Optional[float] = None
    protocol: str = "same"
    source: str = ""

    def row(self) -> dict:
        return {
            "dataset": self.dataset,
            "shots": str(self.shots),
            "seed": str(self.seed),
            "AC_AUC": as_percent(self.ac_auc),
            "AS_AUC": as_percent(self.as_auc),
            "protocol": self.protocol,
            "source": self.source,
        }


def append_csv(reports: Iterable[EvalReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in reports:
            w.writerow(r.row())
    return path


def read_csv(paths: Iterable) -> List[dict]:
    rows: List[dict] = []
    for p in paths:
        with Path(p).open(newline="") as fh:
            rows.extend(csv.DictReader(fh))
    return rows


def _mean(values: List[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def format_table(rows: List[dict]) -> str:
    """Datasets as columns (AC, and AS where available), seeds averaged, plus an Average column."""
    groups: "OrderedDict[str, dict]" = OrderedDict()
    for r in rows:
        g = groups.setdefault(r["dataset"], {"AC": [], "AS": []})
        if r.get("AC_AUC"):
            g["AC"].append(float(r["AC_AUC"]))
        if r.get("AS_AUC"):
            g["AS"].append(float(r["AS_AUC"]))
    header, cells = [], []
    all_ac, all_as = [], []
    for name, g in groups.items():
        ac, as_ = _mean(g["AC"]), _mean(g["AS"])
        header.append(f"{name} AC")
        cells.append(ac)
        if ac is not None:
            all_ac.append(ac)
        if as_ is not None:
            header.append(f"{name} AS")
            cells.append(as_)
            all_as.append(as_)
    header += ["Average AC", "Average AS"]
    cells += [_mean(all_ac), _mean(all_as)]
    fmt = ["-" if v is None else f"{v:.2f}" for v in cells]
    widths = [max(len(h), len(c)) for h, c in zip(header, fmt)]
    line1 = " | ".join(h.rjust(w) for h, w in zip(header, widths))
    line2 = "-+-".join("-" * w for w in widths)
    line3 = " | ".join(c.rjust(w) for c, w in zip(fmt, widths))
    return "\n".join([line1, line2, line3]) + "\n"
