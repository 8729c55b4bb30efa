"""Observational data container, CSV ingestion and light preprocessing."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import ParseError, SchemaError, ValidationError

INTERCEPT_NAME = "(intercept)"


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcome ``y``, binary treatment ``d``, conditioning variable ``x`` and
    controls ``z`` (``n x d_z``).

    When ``has_intercept`` is true the first column of ``z`` is the constant
    one and is never rescaled.  ``z_offset``/``z_scale`` record the affine map
    back to the raw control values (``raw = offset + scale * z``).
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    z: np.ndarray
    z_names: tuple
    y_name: str = "y"
    d_name: str = "d"
    x_name: str = "x"
    has_intercept: bool = True
    z_offset: Optional[np.ndarray] = None
    z_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        y = _frozen(self.y)
        x = _frozen(self.x)
        d_raw = np.asarray(self.d, dtype=float)
        z = np.array(self.z, dtype=float, copy=True)
        if z.ndim == 1:
            z = z[:, None]
        z.setflags(write=False)
        n = y.shape[0]
        if y.ndim != 1 or x.shape != (n,) or d_raw.shape != (n,) or z.shape[0] != n:
            raise ValidationError("y, d, x and z must have the same number of rows")
        if n < 2:
            raise ValidationError(f"need at least 2 observations, got {n}")
        if z.shape[1] < 1:
            raise ValidationError("need at least one control column")
        if len(self.z_names) != z.shape[1]:
            raise ValidationError("z_names length does not match z columns")
        for name, arr in (("y", y), ("x", x), ("z", z), ("d", d_raw)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite values in {name}")
        if not np.all((d_raw == 0.0) | (d_raw == 1.0)):
            bad = d_raw[(d_raw != 0.0) & (d_raw != 1.0)][0]
            raise ValidationError(f"treatment must be 0/1, found {bad!r}")
        n_treated = int(d_raw.sum())
        if n_treated == 0 or n_treated == n:
            raise ValidationError("both treatment arms must be nonempty")
        if self.has_intercept and not np.all(z[:, 0] == 1.0):
            raise ValidationError("intercept column must be identically 1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "d", _frozen(d_raw))
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "z_names", tuple(self.z_names))
        dz = z.shape[1]
        off = np.zeros(dz) if self.z_offset is None else self.z_offset
        sc = np.ones(dz) if self.z_scale is None else self.z_scale
        object.__setattr__(self, "z_offset", _frozen(off))
        object.__setattr__(self, "z_scale", _frozen(sc))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    def column(self, name: str) -> np.ndarray:
        """Look up a column by name among outcome, treatment, x and controls."""
        if name == self.y_name:
            return self.y
        if name == self.d_name:
            return self.d
        if name == self.x_name:
            return self.x
        if name in self.z_names:
            return self.z[:, self.z_names.index(name)]
        raise SchemaError(f"unknown column {name!r}")

    def subset(self, mask_or_index) -> "Dataset":
        idx = np.asarray(mask_or_index)
        return replace(self, y=self.y[idx], d=self.d[idx], x=self.x[idx], z=self.z[idx])

    def raw_z(self) -> np.ndarray:
        return self.z_offset + self.z_scale * self.z

    def equals(self, other: "Dataset") -> bool:
        """Bitwise equality of the numeric content and column names."""
        return (
            self.z_names == other.z_names
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.d, other.d)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.z, other.z)
        )


@dataclass(frozen=True)
class CsvSchema:
    """Column roles for :func:`load_csv`."""

    outcome: str
    treatment: str
    conditioning: str
    controls: Sequence[str]
    include_conditioning: bool = True

    def __post_init__(self):
        object.__setattr__(self, "controls", tuple(self.controls))
        if not self.controls and not self.include_conditioning:
            raise SchemaError("schema needs at least one control column")


@dataclass(frozen=True)
class PreprocessConfig:
    normalize: bool = True
    trim_lower_q: float = 0.0
    trim_upper_q: float = 0.0
    trim_group_cols: tuple = ()
    min_group_size: int = 0
    min_arm_count: int = 0
    propensity_clip: Optional[tuple] = (0.01, 0.99)
    outcome_clip_frac: Optional[float] = 0.125

    def __post_init__(self):
        object.__setattr__(self, "trim_group_cols", tuple(self.trim_group_cols))
        for q in (self.trim_lower_q, self.trim_upper_q):
            if not 0.0 <= q < 0.5:
                raise ValidationError(f"trim fraction {q} outside [0, 0.5)")
        if self.trim_lower_q + self.trim_upper_q >= 1.0:
            raise ValidationError("trim fractions must sum to less than 1")
        if self.propensity_clip is not None:
            lo, hi = self.propensity_clip
            if not 0.0 < lo < hi < 1.0:
                raise ValidationError(f"propensity clip {self.propensity_clip} must satisfy 0<lo<hi<1")
            object.__setattr__(self, "propensity_clip", (float(lo), float(hi)))
        if self.outcome_clip_frac is not None and self.outcome_clip_frac < 0:
            raise ValidationError("outcome_clip_frac must be nonnegative")


def _parse_float(cell, row, col):
    try:
        value = float(cell)
    except ValueError:
        raise ParseError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number") from None
    if not math.isfinite(value):
        raise ParseError(f"row {row}, column {col!r}: non-finite value {cell!r}")
    return value


def _read_table(path, delimiter):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = [r for r in reader if r]
    if not rows:
        raise ParseError(f"{path}: no data rows")
    if len(set(header)) != len(header):
        raise ParseError(f"{path}: duplicate column names in header")
    cols = {name: [] for name in header}
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise ParseError(f"row {lineno}: expected {len(header)} fields, got {len(r)}")
        for name, cell in zip(header, r):
            cols[name].append(_parse_float(cell.strip(), lineno, name))
    return header, {k: np.array(v) for k, v in cols.items()}


def csv_columns(path, delimiter: str = ",") -> list:
    """Column names from the header row of ``path``."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        try:
            header = next(csv.reader(fh, delimiter=delimiter))
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
    return [h.strip() for h in header]


def load_csv(path, schema: CsvSchema, delimiter: str = ",") -> Dataset:
    """Read a CSV with a header row into a :class:`Dataset`.

    A constant column is prepended to the controls, followed by the
    conditioning variable (unless ``schema.include_conditioning`` is false) and
    the listed controls, in that order.
    """
    header, cols = _read_table(path, delimiter)
    needed = [schema.outcome, schema.treatment, schema.conditioning, *schema.controls]
    missing = [c for c in needed if c not in cols]
    if missing:
        raise SchemaError(f"missing column(s) {missing} in {path}")
    n = len(cols[schema.outcome])
    names = [INTERCEPT_NAME]
    blocks = [np.ones(n)]
    if schema.include_conditioning:
        names.append(schema.conditioning)
        blocks.append(cols[schema.conditioning])
    for c in schema.controls:
        if c == schema.conditioning and schema.include_conditioning:
            continue
        names.append(c)
        blocks.append(cols[c])
    return Dataset(
        y=cols[schema.outcome],
        d=cols[schema.treatment],
        x=cols[schema.conditioning],
        z=np.column_stack(blocks),
        z_names=tuple(names),
        y_name=schema.outcome,
        d_name=schema.treatment,
        x_name=schema.conditioning,
    )


SNAPSHOT_PREFIX = "z:"


def write_csv(ds: Dataset, path, precision: int = 17, delimiter: str = ",") -> None:
    """Write an audit snapshot readable by :func:`load_snapshot`."""
    start = 1 if ds.has_intercept else 0
    header = [ds.y_name, ds.d_name, ds.x_name] + [SNAPSHOT_PREFIX + nm for nm in ds.z_names[start:]]
    fmt = f"{{:.{precision}g}}"
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            w.writerow(
                [fmt.format(ds.y[i]), str(int(ds.d[i])), fmt.format(ds.x[i])]
                + [fmt.format(v) for v in ds.z[i, start:]]
            )


def load_snapshot(path, delimiter: str = ",") -> Dataset:
    header, cols = _read_table(path, delimiter)
    if len(header) < 3:
        raise ParseError(f"{path}: snapshot needs y, d, x columns")
    y_name, d_name, x_name = header[:3]
    z_cols = header[3:]
    bad = [c for c in z_cols if not c.startswith(SNAPSHOT_PREFIX)]
    if bad:
        raise ParseError(f"{path}: unexpected snapshot columns {bad}")
    n = len(cols[y_name])
    z = np.column_stack([np.ones(n)] + [cols[c] for c in z_cols])
    return Dataset(
        y=cols[y_name],
        d=cols[d_name],
        x=cols[x_name],
        z=z,
        z_names=(INTERCEPT_NAME,) + tuple(c[len(SNAPSHOT_PREFIX):] for c in z_cols),
        y_name=y_name,
        d_name=d_name,
        x_name=x_name,
    )


def normalize_unit_interval(ds: Dataset) -> Dataset:
    """Map every non-intercept control column affinely onto [0, 1].

    Constant columns become zeros.  The composed offset/scale keeps the raw
    values recoverable through :meth:`Dataset.raw_z`.
    """
    z = ds.z.copy()
    offset = ds.z_offset.copy()
    scale = ds.z_scale.copy()
    start = 1 if ds.has_intercept else 0
    for l in range(start, ds.d_z):
        col = z[:, l]
        lo, hi = col.min(), col.max()
        width = hi - lo
        if width > 0:
            z[:, l] = (col - lo) / width
        else:
            z[:, l] = 0.0
        offset[l] = offset[l] + scale[l] * lo
        scale[l] = scale[l] * width
    return replace(ds, z=z, z_offset=offset, z_scale=scale)


def _rank(q, n):
    # ceil(q*n) with q*n evaluated robustly (0.03*100 is 3.0000000000000004)
    return int(math.ceil(round(q * n, 9)))


def trim_quantiles(ds: Dataset, cfg: PreprocessConfig):
    """Drop outcome outliers within groups.

    Within each group the ``r_lo = ceil(trim_lower_q * m)`` smallest and
    ``r_hi = ceil(trim_upper_q * m)`` largest outcomes are cut: rows strictly
    below the order statistic of rank ``r_lo + 1`` or strictly above rank
    ``m - r_hi`` are removed (ties at the cut values survive).  Groups smaller
    than ``min_group_size``, or with fewer than ``min_arm_count`` rows in
    either treatment arm, are dropped entirely.

    Returns ``(trimmed_dataset, n_removed)``.
    """
    if cfg.trim_group_cols:
        keys = np.column_stack([ds.column(c) for c in cfg.trim_group_cols])
        _, group_id = np.unique(keys, axis=0, return_inverse=True)
        group_id = group_id.ravel()
    else:
        group_id = np.zeros(ds.n, dtype=int)
    keep = np.zeros(ds.n, dtype=bool)
    for g in np.unique(group_id):
        rows = np.flatnonzero(group_id == g)
        m = rows.size
        if m < cfg.min_group_size:
            continue
        if cfg.min_arm_count:
            treated = int(ds.d[rows].sum())
            if min(treated, m - treated) < cfg.min_arm_count:
                continue
        r_lo = _rank(cfg.trim_lower_q, m)
        r_hi = _rank(cfg.trim_upper_q, m)
        if r_lo + r_hi >= m:
            continue
        vals = np.sort(ds.y[rows])
        lo_cut = vals[r_lo]
        hi_cut = vals[m - r_hi - 1]
        yr = ds.y[rows]
        keep[rows[(yr >= lo_cut) & (yr <= hi_cut)]] = True
    removed = int(ds.n - keep.sum())
    if removed == 0:
        return ds, 0
    return ds.subset(keep), removed
