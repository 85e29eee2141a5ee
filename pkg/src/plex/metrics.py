"""Line-delimited metrics records, one per (stage, epoch)."""

from __future__ import annotations

import json
from typing import Optional

SCHEMA_VERSION = 1


class MetricsLog:
    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.records: list[dict] = []

    def log(self, stage: str, epoch: int, loss: Optional[float] = None, success_rate: Optional[float] = None, **extra) -> dict:
        rec = {"schema_version": SCHEMA_VERSION, "stage": stage, "epoch": epoch}
        if loss is not None:
            rec["loss"] = float(loss)
        if success_rate is not None:
            rec["success_rate"] = float(success_rate)
        rec.update(extra)
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


def read_metrics(path: str) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
