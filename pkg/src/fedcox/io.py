"""Dataset readers and writers.

Two layouts are understood:

``csv``
    Header ``time,event,x1,...,xp``; one subject per row.
``dlbcl``
    Tab-separated, one subject per row.  The first three columns are a
    subject identifier, the follow-up time and the status (1 = death);
    every further column is a feature (e.g. a microarray probe).  Missing
    entries (empty, ``NA``, ``NaN``) are replaced by the column median,
    columns are standardized, and subjects with zero follow-up are dropped.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .survival import SurvivalDataset

_MISSING = {"", "na", "nan", "null", "."}


def read_csv(path, ties: str = "reject_ties", tie_seed: int = 0) -> SurvivalDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise InvalidArgument(f"{path}: empty file") from None
        if header[:2] != ["time", "event"]:
            raise InvalidArgument(f"{path}: header must start with 'time,event'")
        rows = [r for r in reader if r]
    if not rows:
        raise InvalidArgument(f"{path}: no data rows")
    try:
        arr = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise InvalidArgument(f"{path}: non-numeric entry ({exc})") from None
    return SurvivalDataset(arr[:, 0], arr[:, 1].astype(int), arr[:, 2:], ties=ties, tie_seed=tie_seed)


def write_csv(data: SurvivalDataset, path) -> None:
    p = data.p
    header = ["time", "event"] + [f"x{j + 1}" for j in range(p)]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, e, x in zip(data.times, data.events, data.covariates):
            w.writerow([repr(float(t)), int(e)] + [repr(float(v)) for v in x])


def _parse_cell(s: str) -> float:
    s = s.strip()
    if s.lower() in _MISSING:
        return np.nan
    return float(s)


def read_dlbcl(path, ties: str = "jitter", tie_seed: int = 0, standardize: bool = True) -> SurvivalDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or len(header) < 4:
            raise InvalidArgument(f"{path}: expected id, time, status and at least one feature column")
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    try:
        vals = np.array([[_parse_cell(c) for c in r[1:]] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise InvalidArgument(f"{path}: non-numeric entry ({exc})") from None
    times, status, X = vals[:, 0], vals[:, 1], vals[:, 2:]
    keep = np.isfinite(times) & np.isfinite(status) & (times > 0)
    times, status, X = times[keep], status[keep], X[keep]

    med = np.nanmedian(X, axis=0)
    med = np.where(np.isfinite(med), med, 0.0)
    X = np.where(np.isnan(X), med, X)
    if standardize:
        sd = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
    return SurvivalDataset(times, status.astype(int), X, ties=ties, tie_seed=tie_seed)


def load_dataset(path, fmt: str = "csv", ties: str | None = None, tie_seed: int = 0) -> SurvivalDataset:
    if not Path(path).is_file():
        raise FileNotFoundError(str(path))
    if fmt == "csv":
        return read_csv(path, ties=ties or "reject_ties", tie_seed=tie_seed)
    if fmt == "dlbcl":
        return read_dlbcl(path, ties=ties or "jitter", tie_seed=tie_seed)
    raise InvalidArgument(f"unknown dataset format {fmt!r}")
