"""Per-epoch loss bookkeeping shared by every trainer."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class TrainReport:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def add(self, epoch: int, loss: float, seconds: float) -> None:
        if not math.isfinite(loss):
            raise FloatingPointError(f"epoch {epoch}: training loss is not finite")
        self.rows.append((epoch, float(loss), float(seconds)))

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]

    def to_csv(self) -> str:
        lines = ["epoch,loss,seconds"]
        lines += [f"{e},{loss!r},{sec:.3f}" for e, loss, sec in self.rows]
        return "".join(line + "\n" for line in lines)

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8", newline="\n")

    @classmethod
    def read_csv(cls, path: str | Path) -> TrainReport:
        with open(path, newline="") as fh:
            rows = [(int(r["epoch"]), float(r["loss"]), float(r["seconds"])) for r in csv.DictReader(fh)]
        return cls(rows)
