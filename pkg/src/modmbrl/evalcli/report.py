"""Versioned distance reports (CSV or JSON)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

REPORT_VERSION = 1
FIELDS = ("controller", "design", "design_split", "env", "env_split", "level", "mode",
          "episodes", "mean_m", "std_m")
CSV_HEADER = ",".join(FIELDS)


@dataclass
class ReportRow:
    controller: str       # "policy" or "baseline"
    design: str
    design_split: str     # "train" / "test"
    env: str
    env_split: str
    level: int
    mode: str             # "sighted" or "blind"
    distances: list = field(default_factory=list)

    @property
    def episodes(self) -> int:
        return len(self.distances)

    @property
    def mean(self) -> float:
        return float(np.mean(self.distances))

    @property
    def std(self) -> float:
        return float(np.std(self.distances))

    def cells(self) -> list:
        return [self.controller, self.design, self.design_split, self.env, self.env_split,
                self.level, self.mode, self.episodes, f"{self.mean:.2f}", f"{self.std:.2f}"]


@dataclass
class EvalReport:
    rows: list[ReportRow]
    meta: dict

    def find(self, **kw) -> list[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# report_version={REPORT_VERSION} "
                  + " ".join(f"{k}={self.meta[k]}" for k in sorted(self.meta)) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FIELDS)
        for r in self.rows:
            w.writerow(r.cells())
        return buf.getvalue()

    def to_json(self) -> str:
        rows = []
        for r in self.rows:
            d = dict(zip(FIELDS, r.cells()))
            d["mean_m"], d["std_m"] = round(r.mean, 2), round(r.std, 2)
            d["distances_m"] = [round(float(x), 4) for x in r.distances]
            rows.append(d)
        return json.dumps({"report_version": REPORT_VERSION, "meta": self.meta, "rows": rows},
                          sort_keys=True, indent=1) + "\n"

    def render(self, fmt: str) -> str:
        if fmt == "csv":
            return self.to_csv()
        if fmt == "json":
            return self.to_json()
        raise ValueError(f"unknown format {fmt!r}")


def read_csv_report(text: str) -> tuple[dict, list[dict]]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# report_version="):
        raise ValueError("missing report header")
    meta = dict(kv.split("=", 1) for kv in lines[0][2:].split())
    return meta, list(csv.DictReader(lines[1:]))


__all__ = ["REPORT_VERSION", "FIELDS", "CSV_HEADER", "ReportRow", "EvalReport", "read_csv_report"]
