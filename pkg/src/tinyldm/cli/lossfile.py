"""Loss-curve export as a two-column CSV."""

from __future__ import annotations

import csv
import io
from typing import Sequence

from ..data.corpus import atomic_write_bytes


def format_loss(value: float) -> str:
    """Six significant digits, keeping trailing zeros (0.25 -> 0.250000)."""
    return f"{float(value):#.6g}"


def loss_csv_text(losses: Sequence[float]) -> str:
    if len(losses) == 0:
        raise ValueError("cannot export an empty loss series")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    writer.writerows((i, format_loss(v)) for i, v in enumerate(losses, start=1))
    return buf.getvalue()


def export_loss_csv(path, losses: Sequence[float]) -> None:
    atomic_write_bytes(path, loss_csv_text(losses).encode("utf-8"))


def read_loss_csv(path) -> list[float]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["step", "loss"]:
        raise ValueError(f"{path}: missing step,loss header")
    return [float(r[1]) for r in rows[1:]]
