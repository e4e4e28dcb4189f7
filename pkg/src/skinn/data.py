"""Option panels: in-memory container and CSV ingestion."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .skr.base import SkInputs

__all__ = ["Panel", "read_panel", "write_panel", "TAU_MIN", "TAU_MAX", "PANEL_COLUMNS"]

log = logging.getLogger(__name__)

TAU_MIN = 7.0 / 365.0
TAU_MAX = 1.0
PANEL_COLUMNS = ("date", "S", "K", "r", "tau", "mid")


@dataclass
class Panel:
    """European call quotes; one row per (date, option)."""

    date: np.ndarray
    S: np.ndarray
    K: np.ndarray
    r: np.ndarray
    tau: np.ndarray
    mid: np.ndarray
    option_id: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.S)
        self.date = np.asarray(self.date, dtype="datetime64[D]")
        if self.date.shape == ():
            self.date = np.full(n, self.date)
        for name in ("S", "K", "r", "tau", "mid"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape == ():
                arr = np.full(n, float(arr))
            setattr(self, name, arr)
        if self.option_id is not None:
            self.option_id = np.asarray(self.option_id, dtype=object)
        for name in ("date", "K", "r", "tau", "mid"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"panel column {name} has the wrong length")

    def __len__(self) -> int:
        return len(self.S)

    @property
    def m(self) -> np.ndarray:
        return self.K / self.S

    @property
    def target(self) -> np.ndarray:
        """Prices in strike units, ``C/K``."""
        return self.mid / self.K

    def features(self) -> np.ndarray:
        """Network inputs ``(m, tau, r)``."""
        return np.column_stack([self.m, self.tau, self.r])

    def sk_inputs(self) -> SkInputs:
        return SkInputs(self.S, self.K, self.r, self.tau)

    def subset(self, mask) -> "Panel":
        idx = np.asarray(mask)
        return Panel(
            self.date[idx], self.S[idx], self.K[idx], self.r[idx], self.tau[idx], self.mid[idx],
            None if self.option_id is None else self.option_id[idx], dict(self.meta),
        )

    def dates(self) -> np.ndarray:
        return np.unique(self.date)

    def between(self, start, end) -> "Panel":
        """Rows with ``start <= date < end``."""
        start, end = np.datetime64(start, "D"), np.datetime64(end, "D")
        return self.subset((self.date >= start) & (self.date < end))

    def ids(self) -> np.ndarray:
        if self.option_id is not None:
            return self.option_id
        # strike plus expiry date identifies a listed call
        expiry = self.date + np.round(self.tau * 365.0).astype(int).astype("timedelta64[D]")
        return np.array([f"{k:.6g}@{e}" for k, e in zip(self.K, expiry)], dtype=object)

    @classmethod
    def concat(cls, panels) -> "Panel":
        panels = list(panels)
        ids = None
        if all(p.option_id is not None for p in panels):
            ids = np.concatenate([p.option_id for p in panels])
        return cls(*(np.concatenate([getattr(p, c) for p in panels]) for c in ("date", "S", "K", "r", "tau", "mid")), ids)


def read_panel(path, tau_min: float = TAU_MIN, tau_max: float = TAU_MAX) -> Panel:
    """Load a panel CSV, dropping out-of-range maturities and non-positive
    prices; drop counts are logged and stored in ``panel.meta['dropped']``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in PANEL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        rows = list(reader)
    has_id = "option_id" in (reader.fieldnames or [])
    n = len(rows)
    cols = {c: np.array([float(r[c]) for r in rows]) if n else np.zeros(0) for c in ("S", "K", "r", "tau", "mid")}
    date = np.array([r["date"] for r in rows], dtype="datetime64[D]") if n else np.zeros(0, "datetime64[D]")
    ids = np.array([r["option_id"] for r in rows], dtype=object) if has_id else None
    keep = np.ones(n, dtype=bool)
    dropped = {}
    bad_tau = (cols["tau"] < tau_min - 1e-12) | (cols["tau"] > tau_max + 1e-12)
    dropped["tau_out_of_range"] = int(bad_tau.sum())
    keep &= ~bad_tau
    bad_px = keep & (cols["mid"] <= 0)
    dropped["non_positive_price"] = int(bad_px.sum())
    keep &= ~bad_px
    bad_in = keep & ((cols["S"] <= 0) | (cols["K"] <= 0) | ~np.isfinite(cols["mid"]))
    dropped["invalid_inputs"] = int(bad_in.sum())
    keep &= ~bad_in
    for reason, count in dropped.items():
        log.info("ingest %s: dropped %d rows (%s)", path.name, count, reason)
    panel = Panel(date[keep], *(cols[c][keep] for c in ("S", "K", "r", "tau", "mid")),
                  None if ids is None else ids[keep])
    panel.meta["dropped"] = dropped
    panel.meta["source"] = str(path)
    return panel


def write_panel(panel: Panel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = list(PANEL_COLUMNS) + (["option_id"] if panel.option_id is not None else [])
        w.writerow(header)
        for i in range(len(panel)):
            row = [str(panel.date[i]), repr(float(panel.S[i])), repr(float(panel.K[i])), repr(float(panel.r[i])),
                   repr(float(panel.tau[i])), repr(float(panel.mid[i]))]
            if panel.option_id is not None:
                row.append(str(panel.option_id[i]))
            w.writerow(row)
