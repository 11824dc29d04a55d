"""Yield panel parsing, validation, canonical CSV forms, and rolling windows.

Accepts the original fixed-column Fama-Bliss text (a date token followed by
one yield per maturity) and the canonical wide CSV with header
"date,m3,m6,...". Dates are year-month integers (YYYYMM); panels are dense
T x M grids of annualized yields in percent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError, ValidationError

PAPER_MATURITIES = (3, 6, 9, 12, 15, 18, 21, 24, 30, 36, 48, 60, 72, 84, 96, 108, 120)
PAPER_START = 198501
PAPER_END = 200012


def month_add(yyyymm: int, k: int) -> int:
    y, m = divmod(int(yyyymm), 100)
    idx = y * 12 + (m - 1) + k
    return (idx // 12) * 100 + idx % 12 + 1


def months_between(a: int, b: int) -> int:
    """Number of months from a to b (positive when b is later)."""
    ya, ma = divmod(int(a), 100)
    yb, mb = divmod(int(b), 100)
    return (yb * 12 + mb) - (ya * 12 + ma)


def month_label(yyyymm: int) -> str:
    y, m = divmod(int(yyyymm), 100)
    return f"{y:04d}-{m:02d}"


@dataclass(frozen=True)
class YieldPanel:
    """Dense monthly panel of zero-coupon yields in percent."""

    dates: np.ndarray       # (T,) YYYYMM ints, strictly increasing, no gaps
    maturities: np.ndarray  # (M,) months, strictly increasing
    yields: np.ndarray      # (T, M) percent

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype=int)
        mats = np.asarray(self.maturities, dtype=int)
        vals = np.asarray(self.yields, dtype=float)
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "maturities", mats)
        object.__setattr__(self, "yields", vals)
        if vals.shape != (dates.size, mats.size):
            raise ValidationError(
                f"yield grid shape {vals.shape} does not match {dates.size} dates x {mats.size} maturities"
            )
        if dates.size == 0:
            raise ValidationError("panel has no rows")
        for i in range(1, dates.size):
            if months_between(dates[i - 1], dates[i]) != 1:
                raise ValidationError(
                    f"dates must be consecutive months: gap between {dates[i-1]} and {dates[i]}"
                )
        if mats.size == 0 or np.any(np.diff(mats) <= 0) or mats[0] <= 0:
            raise ValidationError("maturities must be positive and strictly increasing")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("panel contains non-finite yields")
        if np.any(vals < 0):
            raise ValidationError("panel contains negative yields")

    @property
    def n_periods(self) -> int:
        return int(self.dates.size)

    @property
    def n_maturities(self) -> int:
        return int(self.maturities.size)

    def date_index(self, yyyymm: int) -> int:
        """0-based row index of a date."""
        k = months_between(self.dates[0], yyyymm)
        if k < 0 or k >= self.dates.size:
            raise ValidationError(f"date {yyyymm} outside panel range")
        return k

    def maturity_index(self, m: int) -> int:
        idx = np.searchsorted(self.maturities, m)
        if idx >= self.maturities.size or self.maturities[idx] != m:
            raise ValidationError(f"maturity {m} not on the panel grid")
        return int(idx)

    def window(self, start_idx: int, end_idx: int) -> "YieldPanel":
        """Subpanel of rows start_idx..end_idx inclusive (0-based)."""
        return YieldPanel(
            dates=self.dates[start_idx : end_idx + 1],
            maturities=self.maturities,
            yields=self.yields[start_idx : end_idx + 1],
        )

    def restrict(self, maturities=None, start=None, end=None) -> "YieldPanel":
        mats = self.maturities if maturities is None else np.asarray(maturities, dtype=int)
        cols = [self.maturity_index(m) for m in mats]
        lo = 0 if start is None else self.date_index(start)
        hi = self.n_periods - 1 if end is None else self.date_index(end)
        return YieldPanel(
            dates=self.dates[lo : hi + 1],
            maturities=self.maturities[cols],
            yields=self.yields[lo : hi + 1][:, cols],
        )


def _date_from_token(tok: str, line_no: int) -> int:
    if not tok.isdigit() or len(tok) not in (6, 8):
        raise ParseError(f"bad date token {tok!r}", line=line_no)
    val = int(tok[:6])
    y, m = divmod(val, 100)
    if not (1 <= m <= 12):
        raise ParseError(f"bad month in date token {tok!r}", line=line_no)
    return val


def _parse_csv(lines) -> tuple[list[int], list[int], list[list[float]]]:
    header = [h.strip() for h in lines[0][1].split(",")]
    if header[0].lower() != "date":
        raise ParseError("CSV header must start with 'date'", line=lines[0][0])
    try:
        maturities = [int(h.lstrip("mM")) for h in header[1:]]
    except ValueError as exc:
        raise ParseError(f"bad maturity column in header: {exc}", line=lines[0][0]) from exc
    dates, rows = [], []
    for line_no, line in lines[1:]:
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != len(header):
            raise ParseError(
                f"expected {len(header)} columns, got {len(parts)}", line=line_no
            )
        dates.append(_date_from_token(parts[0], line_no))
        try:
            rows.append([float(p) for p in parts[1:]])
        except ValueError as exc:
            raise ParseError(f"bad yield value: {exc}", line=line_no) from exc
    return dates, maturities, rows


def _parse_whitespace(lines) -> tuple[list[int], list[int], list[list[float]]]:
    dates, rows = [], []
    width = None
    for line_no, line in lines:
        toks = line.split()
        if not toks[0][:1].isdigit():
            continue  # header or comment line
        if width is None:
            width = len(toks)
        if len(toks) != width:
            raise ParseError(f"expected {width} columns, got {len(toks)}", line=line_no)
        dates.append(_date_from_token(toks[0], line_no))
        try:
            rows.append([float(t) for t in toks[1:]])
        except ValueError as exc:
            raise ParseError(f"bad yield value: {exc}", line=line_no) from exc
    if not rows:
        raise ParseError("no data rows found")
    n_cols = len(rows[0])
    if n_cols == len(PAPER_MATURITIES):
        maturities = list(PAPER_MATURITIES)
    else:
        raise ParseError(
            f"cannot infer maturities for {n_cols} columns; use the CSV form with a header"
        )
    return dates, maturities, rows


def parse_fama_bliss(text: str, restrict_paper: bool = False) -> YieldPanel:
    """Parse raw panel text; set restrict_paper to clip to the 17 maturities and 1985-2000."""
    lines = [
        (i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip()
    ]
    if not lines:
        raise ParseError("empty input")
    first = lines[0][1]
    if "," in first:
        dates, maturities, rows = _parse_csv(lines)
    else:
        dates, maturities, rows = _parse_whitespace(lines)

    order = np.argsort(np.asarray(dates))
    dates = np.asarray(dates, dtype=int)[order]
    vals = np.asarray(rows, dtype=float)[order]
    if np.unique(dates).size != dates.size:
        dup = dates[np.where(np.diff(dates) == 0)[0][0]]
        raise ValidationError(f"duplicate date {dup}")
    panel = YieldPanel(dates=dates, maturities=np.asarray(maturities), yields=vals)
    if restrict_paper:
        panel = panel.restrict(
            maturities=PAPER_MATURITIES,
            start=max(PAPER_START, int(panel.dates[0])),
            end=min(PAPER_END, int(panel.dates[-1])),
        )
    return panel


def to_wide_csv(panel: YieldPanel) -> str:
    """Canonical wide form; floats use repr so the round trip is bitwise exact."""
    header = "date," + ",".join(f"m{int(m)}" for m in panel.maturities)
    out = [header]
    for i, d in enumerate(panel.dates):
        out.append(f"{int(d)}," + ",".join(repr(float(v)) for v in panel.yields[i]))
    return "\n".join(out) + "\n"


def to_long_csv(panel: YieldPanel) -> str:
    out = ["date,maturity,yield"]
    for i, d in enumerate(panel.dates):
        for j, m in enumerate(panel.maturities):
            out.append(f"{int(d)},{int(m)},{repr(float(panel.yields[i, j]))}")
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class WindowSpec:
    """One rolling-forecast window: fit rows train_start..train_end, target train_end + horizon."""

    train_start: int  # 0-based row index
    train_end: int    # 0-based row index of the forecast origin
    horizon: int
    scheme: str = "expanding"

    def __post_init__(self):
        if self.train_start > self.train_end:
            raise ValidationError("train_start must be <= train_end")
        if self.horizon < 1:
            raise DomainError("horizon must be >= 1")
        if self.scheme not in ("expanding", "moving"):
            raise ValidationError(f"unknown scheme {self.scheme!r}")


MIN_TRAIN_MONTHS = 24


def rolling_origins(
    panel: YieldPanel,
    first_origin: int,
    last_origin: int,
    horizon: int,
    scheme: str = "expanding",
) -> list[WindowSpec]:
    """One WindowSpec per monthly origin between first_origin and last_origin (YYYYMM)."""
    first_idx = panel.date_index(first_origin)
    last_idx = panel.date_index(last_origin)
    if first_idx + 1 < MIN_TRAIN_MONTHS:
        raise ValidationError(
            f"first origin must leave at least {MIN_TRAIN_MONTHS} training months"
        )
    if last_idx < first_idx:
        raise ValidationError("last origin precedes first origin")
    if not (1 <= horizon <= panel.n_periods - 1 - last_idx):
        raise DomainError(
            f"horizon {horizon} pushes targets beyond the panel end"
        )
    train_len = first_idx + 1
    windows = []
    for origin in range(first_idx, last_idx + 1):
        start = 0 if scheme == "expanding" else origin - train_len + 1
        windows.append(
            WindowSpec(train_start=start, train_end=origin, horizon=horizon, scheme=scheme)
        )
    return windows


FIRST_TARGET_DEFAULT = 199501
LAST_TARGET_DEFAULT = 200012


def paper_origin_range(horizon: int,
                       first_target: int = FIRST_TARGET_DEFAULT,
                       last_target: int = LAST_TARGET_DEFAULT) -> tuple[int, int]:
    """Origin range that aligns forecast targets across horizons."""
    return month_add(first_target, -horizon), month_add(last_target, -horizon)
