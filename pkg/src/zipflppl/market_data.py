"""Constituent panels, the capitalization-weighted index, and the Zipf factor.

A panel stores the total capitalization ``K_j(i)`` of every firm ``j`` on every
trading day ``i`` together with a listing status. Days are integer indices
``0..n_days-1``; calendar dates are carried along as metadata only.

Status codes
------------
``A`` active, ``S`` suspended (trading halted, still a constituent),
``D`` delisted (permanently removed), ``U`` unlisted (no row for that day:
before listing, or a data hole).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, PanelError

ACTIVE, SUSPENDED, DELISTED, UNLISTED = "A", "S", "D", "U"
_CSV_STATUS = {ACTIVE, SUSPENDED, DELISTED}
PANEL_HEADER = ["date", "firm", "cap", "status"]
INDEX_HEADER = ["date", "close"]
FACTOR_HEADER = ["t", "date", "ln_p", "ln_pe", "zeta"]


@dataclass(frozen=True, eq=False)
class ConstituentPanel:
    """Per-firm capitalization paths.

    ``cap`` has shape ``(n_firms, n_days)`` with NaN wherever no quote exists;
    ``status`` is a same-shaped array of one-letter codes.
    """

    dates: tuple
    firms: tuple
    cap: np.ndarray
    status: np.ndarray

    def __post_init__(self):
        cap = np.array(self.cap, dtype=float)
        status = np.array(self.status, dtype="<U1")
        cap.setflags(write=False)
        status.setflags(write=False)
        object.__setattr__(self, "cap", cap)
        object.__setattr__(self, "status", status)
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "firms", tuple(self.firms))
        validate_panel(self)

    @property
    def n_firms(self) -> int:
        return len(self.firms)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    def day_of(self, date: str) -> int:
        try:
            return self.dates.index(date)
        except ValueError:
            raise InputError(f"date {date!r} not in panel") from None


def validate_panel(panel: ConstituentPanel) -> None:
    """Raise :class:`PanelError` if any panel invariant is violated."""
    n_firms, n_days = len(panel.firms), len(panel.dates)
    if panel.cap.shape != (n_firms, n_days) or panel.status.shape != (n_firms, n_days):
        raise PanelError("cap/status shape does not match firms x dates")
    if n_days == 0 or n_firms == 0:
        raise PanelError("empty panel")
    if len(set(panel.dates)) != n_days:
        raise PanelError("duplicate dates")
    if any(a >= b for a, b in zip(panel.dates, panel.dates[1:])):
        raise PanelError("dates are not strictly increasing")
    if len(set(panel.firms)) != n_firms:
        raise PanelError("duplicate firm identifiers")
    bad_code = ~np.isin(panel.status, [ACTIVE, SUSPENDED, DELISTED, UNLISTED])
    if bad_code.any():
        j, i = np.argwhere(bad_code)[0]
        raise PanelError(f"unknown status {panel.status[j, i]!r} for firm {panel.firms[j]} on {panel.dates[i]}")
    quoted = np.isin(panel.status, [ACTIVE, SUSPENDED])
    with np.errstate(invalid="ignore"):
        bad_cap = quoted & ~(panel.cap > 0)
    if bad_cap.any():
        j, i = np.argwhere(bad_cap)[0]
        raise PanelError(
            f"non-positive or missing capitalization {panel.cap[j, i]} for firm {panel.firms[j]} on {panel.dates[i]}"
        )
    delisted = panel.status == DELISTED
    for j in range(n_firms):
        hits = np.flatnonzero(delisted[j])
        if hits.size and np.any(panel.status[j, hits[0]:] != DELISTED):
            i = hits[0] + int(np.argmax(panel.status[j, hits[0]:] != DELISTED))
            raise PanelError(f"firm {panel.firms[j]} relisted on {panel.dates[i]} after delisting")


def load_panel(path, format: str = "csv") -> ConstituentPanel:
    """Read a ``date,firm,cap,status`` CSV into a validated panel.

    Missing firm-days are unlisted; a missing day after delisting stays delisted.
    """
    if format != "csv":
        raise InputError(f"unsupported panel format {format!r}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PANEL_HEADER:
            raise PanelError(f"expected header {','.join(PANEL_HEADER)}", line=1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise PanelError(f"expected 4 fields, got {len(row)}", line=line)
            date, firm, cap_s, status = (c.strip() for c in row)
            if not date or not firm:
                raise PanelError("empty date or firm", line=line)
            if status not in _CSV_STATUS:
                raise PanelError(f"status must be one of A,S,D, got {status!r}", line=line)
            if cap_s == "":
                cap = math.nan
            else:
                try:
                    cap = float(cap_s)
                except ValueError:
                    raise PanelError(f"unparsable capitalization {cap_s!r}", line=line) from None
            if status != DELISTED and not (cap > 0):
                raise PanelError(f"non-positive capitalization {cap_s} for firm {firm} on {date}", line=line)
            rows.append((date, firm, cap, status, line))
    if not rows:
        raise PanelError("panel file has no data rows")

    dates = sorted({r[0] for r in rows})
    firms = sorted({r[1] for r in rows})
    di = {d: i for i, d in enumerate(dates)}
    fj = {f: j for j, f in enumerate(firms)}
    cap = np.full((len(firms), len(dates)), np.nan)
    status = np.full((len(firms), len(dates)), UNLISTED, dtype="<U1")
    seen = {}
    for date, firm, c, s, line in rows:
        key = (fj[firm], di[date])
        if key in seen:
            raise PanelError(f"duplicate row for firm {firm} on {date} (first at line {seen[key]})", line=line)
        seen[key] = line
        cap[key] = c
        status[key] = s
    # a missing quote after delisting is still delisted
    for j in range(len(firms)):
        hits = np.flatnonzero(status[j] == DELISTED)
        if hits.size:
            tail = status[j, hits[0]:]
            tail[tail == UNLISTED] = DELISTED
    return ConstituentPanel(tuple(dates), tuple(firms), cap, status)


def write_panel_csv(panel: ConstituentPanel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PANEL_HEADER)
        for i, date in enumerate(panel.dates):
            for j, firm in enumerate(panel.firms):
                s = panel.status[j, i]
                if s == UNLISTED:
                    continue
                c = panel.cap[j, i]
                w.writerow([date, firm, "" if np.isnan(c) else repr(float(c)), s])


def constituent_caps(panel: ConstituentPanel) -> np.ndarray:
    """Capitalization each firm contributes to the index on each day.

    Active firms count at their quoted value, suspended firms at their last
    active value (own quote if never active before), everything else at 0.
    """
    out = np.zeros_like(panel.cap)
    for j in range(panel.n_firms):
        last_active = math.nan
        for i in range(panel.n_days):
            s = panel.status[j, i]
            if s == ACTIVE:
                last_active = panel.cap[j, i]
                out[j, i] = last_active
            elif s == SUSPENDED:
                out[j, i] = panel.cap[j, i] if math.isnan(last_active) else last_active
    return out


def total_cap(panel: ConstituentPanel) -> np.ndarray:
    K = constituent_caps(panel).sum(axis=0)
    empty = np.flatnonzero(K <= 0)
    if empty.size:
        raise InputError(f"no constituents on {panel.dates[empty[0]]}")
    return K


def index_price(panel: ConstituentPanel, base_cap=None, base_value: float = 100.0, base_day: int = 0) -> np.ndarray:
    """Capitalization-weighted index ``K(i) / base_cap * base_value`` for every panel day.

    Without ``base_cap`` the total capitalization on ``base_day`` is used.
    """
    K = total_cap(panel)
    if base_cap is None:
        base_cap = K[base_day]
    if not base_cap > 0:
        raise InputError("base capitalization must be positive")
    return K / base_cap * base_value


def _check_window(panel, t1, t2):
    if not (1 <= t1 <= t2 < panel.n_days):
        raise InputError(f"window [{t1}, {t2}] needs 1 <= t1 <= t2 < {panel.n_days}")


def equal_weighted_returns(panel: ConstituentPanel, t1: int, t2: int):
    """Per-day equal-weighted log-returns ``r_e(i)`` and member counts ``M(i)`` for i in [t1, t2]."""
    _check_window(panel, t1, t2)
    r = np.empty(t2 - t1 + 1)
    counts = np.empty(t2 - t1 + 1, dtype=int)
    active = panel.status == ACTIVE
    for k, i in enumerate(range(t1, t2 + 1)):
        both = active[:, i] & active[:, i - 1]
        M = int(both.sum())
        if M == 0:
            raise InputError(f"no firm quoted on both {panel.dates[i - 1]} and {panel.dates[i]}")
        r[k] = np.mean(np.log(panel.cap[both, i]) - np.log(panel.cap[both, i - 1]))
        counts[k] = M
    return r, counts


def equal_weighted_price(panel: ConstituentPanel, p_t0: float, t1: int, t2: int) -> np.ndarray:
    """Equal-weighted portfolio price on days t1..t2, anchored at ``p_e(t1 - 1) = p_t0``."""
    if not p_t0 > 0:
        raise InputError("anchor price must be positive")
    r, _ = equal_weighted_returns(panel, t1, t2)
    return p_t0 * np.exp(np.cumsum(r))


@dataclass(frozen=True, eq=False)
class FactorSeries:
    """Index log-price, equal-weighted log-price and integrated Zipf factor on t1..t2.

    ``zeta`` is zero on the anchor day ``t0 = t1 - 1``, which is not stored.
    """

    t0: int
    t: np.ndarray
    ln_p: np.ndarray
    ln_pe: np.ndarray
    zeta: np.ndarray
    dates: tuple = field(default=())

    def __post_init__(self):
        arrays = {}
        for name in ("t", "ln_p", "ln_pe", "zeta"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            arrays[name] = a
            object.__setattr__(self, name, a)
        n = arrays["t"].size
        if n < 2 or any(a.shape != (n,) for a in arrays.values()):
            raise InputError("factor series vectors must be 1-D, equal length and >= 2")
        if np.any(np.diff(arrays["t"]) <= 0):
            raise InputError("factor series days must be strictly increasing")
        if self.t0 >= arrays["t"][0]:
            raise InputError("anchor day t0 must precede the first day")
        dates = tuple(self.dates) if self.dates else ("",) * n
        if len(dates) != n:
            raise InputError("dates length does not match series length")
        object.__setattr__(self, "dates", dates)

    def __len__(self):
        return self.t.size

    @property
    def t1(self) -> int:
        return int(self.t[0])

    @property
    def t2(self) -> int:
        return int(self.t[-1])

    def window(self, t1: int, t2: int) -> "FactorSeries":
        """Sub-series on [t1, t2] with zeta re-anchored to zero at t1 - 1.

        Re-anchoring the equal-weighted price at the new anchor day shifts
        ``ln_pe`` by a constant, so ``zeta`` is shifted by its value there.
        """
        if t1 < self.t1 or t2 > self.t2 or t2 <= t1:
            raise InputError(f"window [{t1}, {t2}] outside series [{self.t1}, {self.t2}]")
        lo = int(np.searchsorted(self.t, t1))
        hi = int(np.searchsorted(self.t, t2)) + 1
        if t1 == self.t1:
            shift = 0.0
        else:
            anchor = int(np.searchsorted(self.t, t1 - 1))
            if anchor >= len(self) or self.t[anchor] != t1 - 1:
                raise InputError(f"anchor day {t1 - 1} missing from series")
            shift = self.zeta[anchor]
        return FactorSeries(
            t0=t1 - 1,
            t=self.t[lo:hi],
            ln_p=self.ln_p[lo:hi],
            ln_pe=self.ln_pe[lo:hi] + shift,
            zeta=self.zeta[lo:hi] - shift,
            dates=self.dates[lo:hi],
        )


def build_factor_series(panel: ConstituentPanel, index, t1: int, t2: int) -> FactorSeries:
    """Integrated Zipf factor ``zeta = ln p - ln p_e`` on [t1, t2].

    ``index`` is the capitalization-weighted price for every panel day; the
    equal-weighted price is anchored to it on ``t0 = t1 - 1``.
    """
    index = np.asarray(index, dtype=float)
    if index.shape != (panel.n_days,):
        raise InputError("index series must cover every panel day")
    _check_window(panel, t1, t2)
    t0 = t1 - 1
    window_index = index[t0:t2 + 1]
    if np.any(~(window_index > 0)):
        raise InputError("index prices must be positive")
    pe = equal_weighted_price(panel, index[t0], t1, t2)
    ln_p = np.log(index[t1:t2 + 1])
    ln_pe = np.log(pe)
    return FactorSeries(
        t0=t0,
        t=np.arange(t1, t2 + 1, dtype=float),
        ln_p=ln_p,
        ln_pe=ln_pe,
        zeta=ln_p - ln_pe,
        dates=panel.dates[t1:t2 + 1],
    )


def load_index(path, dates) -> np.ndarray:
    """Read a ``date,close`` CSV and align it to ``dates``."""
    closes = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != INDEX_HEADER:
            raise PanelError(f"expected header {','.join(INDEX_HEADER)}", line=1)
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise PanelError(f"expected 2 fields, got {len(row)}", line=reader.line_num)
            try:
                value = float(row[1])
            except ValueError:
                raise PanelError(f"unparsable close {row[1]!r}", line=reader.line_num) from None
            if not value > 0:
                raise PanelError(f"non-positive close {row[1]}", line=reader.line_num)
            closes[row[0].strip()] = value
    missing = [d for d in dates if d not in closes]
    if missing:
        raise InputError(f"index file lacks {len(missing)} panel dates, first {missing[0]}")
    return np.array([closes[d] for d in dates])


def write_factor_csv(series: FactorSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FACTOR_HEADER)
        for k in range(len(series)):
            w.writerow([
                int(series.t[k]), series.dates[k],
                repr(float(series.ln_p[k])), repr(float(series.ln_pe[k])), repr(float(series.zeta[k])),
            ])


def load_factor_csv(path) -> FactorSeries:
    """Read a ``t,date,ln_p,ln_pe,zeta`` CSV; the anchor day is the first ``t`` minus one."""
    t, dates, ln_p, ln_pe, zeta = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != FACTOR_HEADER:
            raise PanelError(f"expected header {','.join(FACTOR_HEADER)}", line=1)
        for row in reader:
            if not row:
                continue
            if len(row) != 5:
                raise PanelError(f"expected 5 fields, got {len(row)}", line=reader.line_num)
            try:
                t.append(int(row[0]))
                ln_p.append(float(row[2]))
                ln_pe.append(float(row[3]))
                zeta.append(float(row[4]))
            except ValueError as exc:
                raise PanelError(str(exc), line=reader.line_num) from None
            dates.append(row[1])
    if len(t) < 2:
        raise InputError(f"{Path(path).name}: factor series needs at least 2 rows")
    return FactorSeries(t0=t[0] - 1, t=t, ln_p=ln_p, ln_pe=ln_pe, zeta=zeta, dates=tuple(dates))
