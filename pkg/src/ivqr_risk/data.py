"""Monthly time-series ingestion and construction of estimation datasets.

Series are stored as float arrays on a complete monthly calendar with NaN
marking missing months. Everything stays in the units of the input file.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "InputError",
    "DesignError",
    "TimeSeriesPanel",
    "DatasetSpec",
    "EstimationDataset",
    "SeriesSummary",
    "parse_month",
    "format_month",
    "load_csv",
    "diff_horizon",
    "yoy_change",
    "build_design",
    "summarize",
]


class InputError(ValueError):
    """Malformed input file or series."""


class DesignError(ValueError):
    """An estimation dataset cannot be formed from the panel."""


_MONTH_RE = re.compile(r"^\s*(\d{4})(?:-(\d{1,2})(?:-\d{1,2})?|M(\d{1,2}))\s*$")


def parse_month(text: str) -> np.datetime64:
    """Parse ``YYYY-MM``, ``YYYY-MM-DD`` (day ignored) or ``YYYYMm``."""
    m = _MONTH_RE.match(str(text))
    if m is None:
        raise ValueError(f"cannot parse {text!r} as a month")
    year = int(m.group(1))
    month = int(m.group(2) or m.group(3))
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range in {text!r}")
    return np.datetime64(f"{year:04d}-{month:02d}", "M")


def format_month(month: np.datetime64) -> str:
    return str(np.datetime64(month, "M"))


@dataclass(frozen=True)
class TimeSeriesPanel:
    """Named monthly series on a shared, gap-free monthly calendar."""

    dates: np.ndarray
    series: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        dates = np.asarray(self.dates, dtype="datetime64[M]")
        if dates.size > 1 and np.any(np.diff(dates).astype(int) <= 0):
            raise InputError("panel dates must be strictly increasing")
        object.__setattr__(self, "dates", dates)
        clean = {}
        for name, values in self.series.items():
            arr = np.asarray(values, dtype=float)
            if arr.shape != dates.shape:
                raise InputError(
                    f"series {name!r} has length {arr.size}, expected {dates.size}"
                )
            arr = arr.copy()
            arr.setflags(write=False)
            clean[name] = arr
        object.__setattr__(self, "series", clean)

    @property
    def names(self) -> list[str]:
        return list(self.series)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.series[name]
        except KeyError:
            raise KeyError(
                f"series {name!r} not in panel (available: {', '.join(self.series)})"
            ) from None

    def with_series(self, name: str, values: np.ndarray) -> "TimeSeriesPanel":
        series = dict(self.series)
        series[name] = values
        return TimeSeriesPanel(self.dates, series)

    def availability(self, name: str) -> tuple[Optional[str], Optional[str], int]:
        values = self[name]
        ok = np.flatnonzero(~np.isnan(values))
        if ok.size == 0:
            return None, None, 0
        return format_month(self.dates[ok[0]]), format_month(self.dates[ok[-1]]), ok.size

    @classmethod
    def from_records(
        cls, months: Sequence[np.datetime64], columns: dict[str, Sequence[float]]
    ) -> "TimeSeriesPanel":
        """Place possibly irregular observations onto a complete monthly calendar."""
        months = np.asarray(months, dtype="datetime64[M]")
        if months.size == 0:
            return cls(np.array([], dtype="datetime64[M]"), {k: np.array([]) for k in columns})
        order = np.argsort(months, kind="stable")
        months = months[order]
        start, stop = months[0], months[-1]
        dates = np.arange(start, stop + 1, dtype="datetime64[M]")
        pos = (months - start).astype(int)
        series = {}
        for name, values in columns.items():
            full = np.full(dates.size, np.nan)
            full[pos] = np.asarray(values, dtype=float)[order]
            series[name] = full
        return cls(dates, series)


def load_csv(path: str | Path, date_column: Optional[str] = None) -> TimeSeriesPanel:
    """Read a wide CSV (one date column, numeric series columns).

    Blank cells become NaN. Rows may skip months; the panel fills the gaps
    with missing values. ``date_column`` defaults to the first column.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if date_column is None:
            date_idx = 0
        elif date_column in header:
            date_idx = header.index(date_column)
        else:
            raise InputError(f"{path}: no date column {date_column!r} in header")
        names = [h for i, h in enumerate(header) if i != date_idx]
        if len(set(names)) != len(names):
            raise InputError(f"{path}: duplicate column names in header")

        months = []
        columns: dict[str, list[float]] = {name: [] for name in names}
        seen: dict[np.datetime64, int] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}, row {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            try:
                month = parse_month(row[date_idx])
            except ValueError as exc:
                raise InputError(f"{path}, row {lineno}: unparseable date: {exc}") from None
            if month in seen:
                raise InputError(
                    f"{path}, row {lineno}: duplicate month {format_month(month)} "
                    f"(first seen at row {seen[month]})"
                )
            seen[month] = lineno
            months.append(month)
            cells = [c for i, c in enumerate(row) if i != date_idx]
            for name, cell in zip(names, cells):
                cell = cell.strip()
                if cell == "" or cell.upper() in {"NA", "NAN", "."}:
                    columns[name].append(np.nan)
                    continue
                try:
                    columns[name].append(float(cell))
                except ValueError:
                    raise InputError(
                        f"{path}, row {lineno}: non-numeric value {cell!r} in column {name!r}"
                    ) from None
    return TimeSeriesPanel.from_records(months, columns)


def diff_horizon(values: np.ndarray, h: int) -> np.ndarray:
    """Forward change ``v[t+h] - v[t]`` anchored at t; the last h entries are NaN."""
    if int(h) != h or h < 1:
        raise ValueError(f"horizon must be a positive integer, got {h}")
    h = int(h)
    values = np.asarray(values, dtype=float)
    out = np.full(values.shape, np.nan)
    if values.size > h:
        out[:-h] = values[h:] - values[:-h]
    return out


def yoy_change(
    values: np.ndarray,
    mode: str = "percent_change",
    dates: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Year-over-year change of a monthly series.

    ``percent_change`` gives ``100 * (v[t] / v[t-12] - 1)`` for index levels;
    ``rate_difference`` gives ``v[t] - v[t-12]``.
    """
    values = np.asarray(values, dtype=float)
    out = np.full(values.shape, np.nan)
    if values.size <= 12:
        return out
    now, before = values[12:], values[:-12]
    if mode == "rate_difference":
        out[12:] = now - before
    elif mode == "percent_change":
        bad = np.flatnonzero(values <= 0)
        if bad.size:
            where = format_month(dates[bad[0]]) if dates is not None else f"index {bad[0]}"
            raise InputError(f"nonpositive index level {values[bad[0]]} at {where}")
        out[12:] = 100.0 * (now / before - 1.0)
    else:
        raise ValueError(f"unknown yoy mode {mode!r}")
    return out


@dataclass(frozen=True)
class DatasetSpec:
    """Which series make up y, d, x and z for one estimation."""

    dependent_series: str
    endogenous_series: str
    horizon_months: int = 12
    control_series: tuple[str, ...] = ()
    instrument_series: tuple[str, ...] = ()
    sample_start: Optional[str] = None
    sample_end: Optional[str] = None
    label: str = ""

    def __post_init__(self) -> None:
        if int(self.horizon_months) != self.horizon_months or self.horizon_months < 1:
            raise ValueError(f"horizon_months must be >= 1, got {self.horizon_months}")
        object.__setattr__(self, "control_series", tuple(self.control_series))
        object.__setattr__(self, "instrument_series", tuple(self.instrument_series))

    def require_instruments(self) -> None:
        if not self.instrument_series:
            raise DesignError("IV estimators need at least one instrument series")


@dataclass
class EstimationDataset:
    """Aligned arrays for one group/horizon; X carries the intercept as its last column."""

    y: np.ndarray
    d: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    t_index: np.ndarray = field(default=None)  # type: ignore[assignment]
    x_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    d_name: str = "d"
    label: str = ""

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.d = np.asarray(self.d, dtype=float).ravel()
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float).T).T
        Z = np.asarray(self.Z, dtype=float)
        self.Z = Z.reshape(len(Z), -1) if Z.size else np.empty((len(self.y), 0))
        n = self.y.size
        for name in ("d", "X", "Z"):
            if len(getattr(self, name)) != n:
                raise DesignError(f"{name} has {len(getattr(self, name))} rows, y has {n}")
        if self.t_index is None:
            self.t_index = np.arange(n)
        for name in ("y", "d", "X", "Z"):
            if np.isnan(getattr(self, name)).any():
                raise DesignError(f"{name} contains missing values")
        ones = [j for j in range(self.X.shape[1]) if np.all(self.X[:, j] == 1.0)]
        if len(ones) != 1:
            raise DesignError(
                f"X must contain exactly one intercept column, found {len(ones)}"
            )
        if not self.x_names:
            self.x_names = tuple(f"x{j}" for j in range(self.X.shape[1] - 1)) + ("const",)
        if not self.z_names:
            self.z_names = tuple(f"z{j}" for j in range(self.Z.shape[1]))

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p_x(self) -> int:
        return self.X.shape[1]

    @property
    def p_d(self) -> int:
        return 1

    @property
    def p_z(self) -> int:
        return self.Z.shape[1]

    @property
    def regressors(self) -> np.ndarray:
        """``[d, X]``, the layout used by every fit that reports (alpha, beta)."""
        return np.column_stack([self.d, self.X])

    @property
    def regressor_names(self) -> tuple[str, ...]:
        return (self.d_name,) + tuple(self.x_names)

    def with_instruments(self, Z: np.ndarray, names: Sequence[str] = ()) -> "EstimationDataset":
        return EstimationDataset(
            self.y, self.d, self.X, Z, self.t_index, self.x_names, tuple(names),
            self.d_name, self.label,
        )

    def with_outcome(self, y: np.ndarray) -> "EstimationDataset":
        return EstimationDataset(
            y, self.d, self.X, self.Z, self.t_index, self.x_names, self.z_names,
            self.d_name, self.label,
        )


def build_design(panel: TimeSeriesPanel, spec: DatasetSpec) -> EstimationDataset:
    """Align y (horizon change), d, controls and instruments by listwise deletion."""
    needed = [spec.dependent_series, spec.endogenous_series, *spec.control_series,
              *spec.instrument_series]
    missing = [name for name in dict.fromkeys(needed) if name not in panel.series]
    if missing:
        raise DesignError(f"series not in panel: {', '.join(missing)}")

    y = diff_horizon(panel[spec.dependent_series], spec.horizon_months)
    d = panel[spec.endogenous_series]
    xs = [panel[name] for name in spec.control_series]
    zs = [panel[name] for name in spec.instrument_series]

    ok = ~np.isnan(y) & ~np.isnan(d)
    for arr in xs + zs:
        ok &= ~np.isnan(arr)
    if spec.sample_start is not None:
        ok &= panel.dates >= parse_month(spec.sample_start)
    if spec.sample_end is not None:
        ok &= panel.dates <= parse_month(spec.sample_end)

    n = int(ok.sum())
    if n == 0:
        lines = []
        for name in dict.fromkeys(needed):
            first, last, count = panel.availability(name)
            lines.append(f"  {name}: {first or '-'} to {last or '-'} ({count} obs)")
        lines.append(
            f"  (dependent loses its last {spec.horizon_months} months to differencing;"
            f" window {spec.sample_start or '-'} to {spec.sample_end or '-'})"
        )
        raise DesignError("no usable rows; series availability:\n" + "\n".join(lines))

    X = np.column_stack([arr[ok] for arr in xs] + [np.ones(n)])
    Z = np.column_stack([arr[ok] for arr in zs]) if zs else np.empty((n, 0))
    p_x = X.shape[1]
    if n < p_x + 1 + 2:
        raise DesignError(
            f"underdetermined: {n} rows for {p_x} controls and 1 endogenous regressor"
        )
    return EstimationDataset(
        y=y[ok],
        d=d[ok],
        X=X,
        Z=Z,
        t_index=panel.dates[ok],
        x_names=tuple(spec.control_series) + ("const",),
        z_names=tuple(spec.instrument_series),
        d_name=spec.endogenous_series,
        label=spec.label or f"{spec.dependent_series}_h{spec.horizon_months}",
    )


@dataclass(frozen=True)
class SeriesSummary:
    name: str
    first: Optional[str]
    last: Optional[str]
    obs: int
    mean: float
    sd: float
    min: float
    max: float

    @property
    def empty(self) -> bool:
        return self.obs == 0


def summarize(panel: TimeSeriesPanel) -> list[SeriesSummary]:
    """Per-series first/last month, count, mean, SD (n-1), min and max."""
    rows = []
    for name in panel.names:
        values = panel[name]
        first, last, obs = panel.availability(name)
        v = values[~np.isnan(values)]
        if obs == 0:
            rows.append(SeriesSummary(name, None, None, 0, *([np.nan] * 4)))
            continue
        sd = float(np.std(v, ddof=1)) if obs > 1 else np.nan
        lo, hi = float(v.min()), float(v.max())
        # summation rounding can push the mean of a near-constant series past its bounds
        mean = min(max(float(v.mean()), lo), hi)
        rows.append(SeriesSummary(name, first, last, obs, mean, sd, lo, hi))
    return rows
