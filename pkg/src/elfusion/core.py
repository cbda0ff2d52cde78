"""Shared data structures, dataset and summary I/O, estimating functions."""

from __future__ import annotations

import csv
import json
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .exceptions import (
    DimensionMismatch,
    InputError,
    MissingColumn,
    NonNumericCell,
    NotPositiveDefinite,
    NotSymmetric,
    WeightedSolveDiverged,
)

__all__ = [
    "Dataset",
    "ExternalSummary",
    "EstimatingFunctionSpec",
    "load_dataset",
    "write_dataset",
    "load_summary",
    "write_summary",
    "validate_summary",
    "parse_schema",
]

SYMMETRY_TOL = 1e-10

_ROLE_ALIASES = {
    "y": "y",
    "outcome": "y",
    "x": "x",
    "z": "z",
    "a": "a",
    "exposure": "a",
}


def _frozen(arr, ndim: int) -> NDArray[np.float64]:
    out = np.array(arr, dtype=np.float64)
    if ndim == 2 and out.ndim == 1:
        out = out.reshape(-1, 1)
    if out.ndim != ndim:
        raise DimensionMismatch(f"expected a {ndim}-d array, got shape {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dataset:
    """Internal or external individual-level data.

    ``x`` holds the covariates shared with the external model, ``z`` the
    internal-only covariates (possibly zero columns) and ``a`` an optional
    binary exposure.
    """

    y: NDArray[np.float64]
    x: NDArray[np.float64]
    z: NDArray[np.float64] | None = None
    a: NDArray[np.float64] | None = None
    x_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    binary: bool = True

    def __post_init__(self):
        y = _frozen(self.y, 1)
        n = y.shape[0]
        if n < 1:
            raise InputError("dataset must have at least one row")
        x = _frozen(self.x if self.x is not None else np.empty((n, 0)), 2)
        z = _frozen(self.z if self.z is not None else np.empty((n, 0)), 2)
        a = None if self.a is None else _frozen(self.a, 1)
        for name, arr in (("x", x), ("z", z), ("a", a)):
            if arr is not None and arr.shape[0] != n:
                raise DimensionMismatch(f"{name} has {arr.shape[0]} rows, y has {n}")
        for name, arr in (("y", y), ("x", x), ("z", z), ("a", a)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise InputError(f"{name} contains missing or non-finite values")
        if self.binary and not np.all((y == 0) | (y == 1)):
            raise InputError("y must be 0/1 for a binary dataset")
        if a is not None and not np.all((a == 0) | (a == 1)):
            raise InputError("exposure a must be 0/1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "a", a)
        xn = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        zn = tuple(self.z_names) or tuple(f"z{j + 1}" for j in range(z.shape[1]))
        if len(xn) != x.shape[1] or len(zn) != z.shape[1]:
            raise DimensionMismatch("column names do not match covariate blocks")
        object.__setattr__(self, "x_names", xn)
        object.__setattr__(self, "z_names", zn)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p_x(self) -> int:
        return self.x.shape[1]

    @property
    def p_z(self) -> int:
        return self.z.shape[1]

    def take(self, idx) -> Dataset:
        """Row subset (or resample, when ``idx`` repeats rows)."""
        idx = np.asarray(idx)
        return Dataset(
            y=self.y[idx],
            x=self.x[idx],
            z=self.z[idx],
            a=None if self.a is None else self.a[idx],
            x_names=self.x_names,
            z_names=self.z_names,
            binary=self.binary,
        )


@dataclass(frozen=True)
class ExternalSummary:
    """Published external estimate.

    ``v_hat`` estimates the covariance of ``sqrt(n2) * (theta_hat - theta0)``,
    so the covariance of ``theta_hat`` itself is ``v_hat / n2``.
    """

    theta_hat: NDArray[np.float64]
    v_hat: NDArray[np.float64]
    n2: int

    def __post_init__(self):
        object.__setattr__(self, "theta_hat", _frozen(self.theta_hat, 1))
        object.__setattr__(self, "v_hat", _frozen(np.atleast_2d(self.v_hat), 2))
        object.__setattr__(self, "n2", int(self.n2))

    @property
    def q(self) -> int:
        return self.theta_hat.shape[0]

    @property
    def cov(self) -> NDArray[np.float64]:
        """Covariance of ``theta_hat``."""
        return self.v_hat / self.n2

    def scaled(self, factor: float) -> ExternalSummary:
        return ExternalSummary(self.theta_hat, self.v_hat * factor, self.n2)


def validate_summary(s: ExternalSummary) -> ExternalSummary:
    """Return ``s`` unchanged if its invariants hold, else raise."""
    q = s.theta_hat.shape[0]
    if q < 1:
        raise DimensionMismatch("theta_hat must have at least one entry")
    if s.v_hat.shape != (q, q):
        raise DimensionMismatch(f"v_hat has shape {s.v_hat.shape}, expected ({q}, {q})")
    if s.n2 < 1:
        raise InputError("n2 must be a positive integer")
    if not np.all(np.isfinite(s.theta_hat)) or not np.all(np.isfinite(s.v_hat)):
        raise InputError("summary contains non-finite values")
    if np.max(np.abs(s.v_hat - s.v_hat.T)) > SYMMETRY_TOL:
        raise NotSymmetric("v_hat is not symmetric")
    try:
        np.linalg.cholesky(s.v_hat)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("v_hat is not positive definite") from None
    return s


def parse_schema(text: str) -> dict[str, str]:
    """Parse ``"col:role,col:role"`` into a column -> role map."""
    schema = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        col, sep, role = item.partition(":")
        if not sep or not col.strip() or not role.strip():
            raise InputError(f"bad schema entry {item!r}; expected column:role")
        schema[col.strip()] = role.strip()
    if not schema:
        raise InputError("empty schema")
    return schema


def _normalize_roles(schema: Mapping[str, str]) -> dict[str, str]:
    out = {}
    for col, role in schema.items():
        key = _ROLE_ALIASES.get(str(role).strip().lower())
        if key is None:
            raise InputError(f"unknown role {role!r} for column {col!r}")
        out[col] = key
    roles = list(out.values())
    if roles.count("y") != 1:
        raise InputError("schema must declare exactly one outcome column")
    if roles.count("a") > 1:
        raise InputError("schema may declare at most one exposure column")
    return out


def load_dataset(path, schema: Mapping[str, str], binary: bool = True) -> Dataset:
    """Read a CSV file, assigning columns to roles per ``schema``.

    Columns not named in the schema are ignored.  Covariate blocks keep the
    order in which the schema lists their columns.
    """
    roles = _normalize_roles(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    index = {name: j for j, name in enumerate(header)}
    for col in roles:
        if col not in index:
            raise MissingColumn(col)
    cols: dict[str, NDArray[np.float64]] = {}
    for col in roles:
        j = index[col]
        vals = np.empty(len(rows))
        for i, row in enumerate(rows, start=1):
            cell = row[j].strip() if j < len(row) else ""
            try:
                vals[i - 1] = float(cell)
            except ValueError:
                raise NonNumericCell(col, i, cell) from None
            if not np.isfinite(vals[i - 1]):
                raise NonNumericCell(col, i, cell)
        cols[col] = vals
    if not rows:
        raise InputError(f"{path}: no data rows")
    by_role = {r: [c for c, rr in roles.items() if rr == r] for r in ("y", "x", "z", "a")}
    n = len(rows)

    def block(names):
        return np.column_stack([cols[c] for c in names]) if names else np.empty((n, 0))

    return Dataset(
        y=cols[by_role["y"][0]],
        x=block(by_role["x"]),
        z=block(by_role["z"]),
        a=cols[by_role["a"][0]] if by_role["a"] else None,
        x_names=tuple(by_role["x"]),
        z_names=tuple(by_role["z"]),
        binary=binary,
    )


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_dataset(data: Dataset, path, y_name: str = "y", a_name: str = "a") -> dict[str, str]:
    """Write ``data`` as CSV and return the schema that reloads it."""
    names = [y_name]
    blocks = [data.y[:, None]]
    schema = {y_name: "y"}
    if data.a is not None:
        names.append(a_name)
        blocks.append(data.a[:, None])
        schema[a_name] = "a"
    names += list(data.x_names) + list(data.z_names)
    schema.update({c: "x" for c in data.x_names})
    schema.update({c: "z" for c in data.z_names})
    blocks += [data.x, data.z]
    table = np.hstack(blocks)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in table:
            w.writerow([_fmt(v) for v in row])
    return schema


def load_summary(path) -> ExternalSummary:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    for key in ("theta_hat", "v_hat", "n2"):
        if key not in obj:
            raise InputError(f"{path}: summary JSON lacks key {key!r}")
    n2 = obj["n2"]
    if isinstance(n2, bool) or not isinstance(n2, int):
        raise InputError(f"{path}: n2 must be an integer")
    try:
        theta = np.asarray(obj["theta_hat"], dtype=float)
        v = np.asarray(obj["v_hat"], dtype=float)
    except (TypeError, ValueError):
        raise InputError(f"{path}: theta_hat/v_hat must be numeric arrays") from None
    if theta.ndim != 1 or v.ndim != 2:
        raise DimensionMismatch(f"{path}: theta_hat must be an array and v_hat an array of arrays")
    return validate_summary(ExternalSummary(theta, v, n2))


def write_summary(s: ExternalSummary, path) -> None:
    obj = {"theta_hat": s.theta_hat.tolist(), "v_hat": s.v_hat.tolist(), "n2": int(s.n2)}
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class EstimatingFunctionSpec:
    """Row-wise estimating function, evaluated over a whole dataset at once.

    ``eval(data, param)`` returns an ``(n, dim_value)`` array whose row ``i``
    is the function at data row ``i``; ``jac(data, param)`` returns the
    matching ``(n, dim_value, dim_param)`` array of per-row Jacobians.
    """

    dim_param: int
    dim_value: int
    eval: Callable[[Dataset, NDArray[np.float64]], NDArray[np.float64]]
    jac: Callable[[Dataset, NDArray[np.float64]], NDArray[np.float64]]
    name: str = "g"
    # |param| beyond this bound means the root-finder is diverging
    param_bound: float = 1e4
    divergence_error: type[WeightedSolveDiverged] = field(default=WeightedSolveDiverged)
    # optional fast path: (data, param, weights) -> sum_i w_i jac_i
    wjac: Callable | None = None

    def values(self, data: Dataset, param) -> NDArray[np.float64]:
        param = np.asarray(param, dtype=float)
        out = np.asarray(self.eval(data, param), dtype=float)
        if out.shape != (data.n, self.dim_value):
            raise DimensionMismatch(
                f"{self.name}: eval returned shape {out.shape}, expected {(data.n, self.dim_value)}"
            )
        return out

    def jacobians(self, data: Dataset, param) -> NDArray[np.float64]:
        param = np.asarray(param, dtype=float)
        out = np.asarray(self.jac(data, param), dtype=float)
        if out.shape != (data.n, self.dim_value, self.dim_param):
            raise DimensionMismatch(
                f"{self.name}: jac returned shape {out.shape}, "
                f"expected {(data.n, self.dim_value, self.dim_param)}"
            )
        return out

    def weighted_sum(self, data: Dataset, param, weights) -> NDArray[np.float64]:
        return np.asarray(weights) @ self.values(data, param)

    def weighted_jacobian(self, data: Dataset, param, weights) -> NDArray[np.float64]:
        if self.wjac is not None:
            return np.asarray(self.wjac(data, np.asarray(param, dtype=float), np.asarray(weights)))
        return np.einsum("i,ijk->jk", np.asarray(weights), self.jacobians(data, param))

    def finite_difference_jac(self, data: Dataset, param, step: float = 1e-6) -> NDArray[np.float64]:
        """Central-difference per-row Jacobians, for checking ``jac``."""
        param = np.asarray(param, dtype=float)
        out = np.empty((data.n, self.dim_value, self.dim_param))
        for k in range(self.dim_param):
            h = step * max(1.0, abs(param[k]))
            up, dn = param.copy(), param.copy()
            up[k] += h
            dn[k] -= h
            out[:, :, k] = (self.values(data, up) - self.values(data, dn)) / (2 * h)
        return out
