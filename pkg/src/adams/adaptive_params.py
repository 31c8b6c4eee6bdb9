"""Per-class adaptive margins and scales with tanh range constraints."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PARAM_NAMES = ("lambda_p", "lambda_n", "alpha", "beta")
TRAJECTORY_HEADER = ("step", "class", "lambda_p", "lambda_n", "alpha", "beta")
# tanh(r) rounds to exactly +-1 past |r| ~ 19.1, which would put a margin on
# the boundary of its open interval; raw values are read through this clamp
RAW_LIMIT = 18.0


@dataclass(frozen=True)
class ConstraintConfig:
    lambda0: float = 0.5
    alpha0: float = 2.0
    beta0: float = 50.0
    delta_alpha: float = 0.5
    delta_beta: float = 0.1
    omega: float = 0.01
    constraints_enabled: bool = True

    def __post_init__(self):
        if not (self.lambda0 > 0 and self.alpha0 > 0 and self.beta0 > 0):
            raise ValueError("lambda0, alpha0 and beta0 must be positive")
        if not (0 <= self.delta_alpha < 1 and 0 <= self.delta_beta < 1):
            raise ValueError("delta_alpha and delta_beta must lie in [0, 1)")
        if self.omega < 0:
            raise ValueError("omega must be non-negative")

    def bounds(self) -> dict[str, tuple[float, float]]:
        """Closed hull of the reachable constrained values."""
        return {
            "lambda_p": (0.0, 2 * self.lambda0),
            "lambda_n": (0.0, 2 * self.lambda0),
            "alpha": (self.alpha0 * (1 - self.delta_alpha), self.alpha0 * (1 + self.delta_alpha)),
            "beta": (self.beta0 * (1 - self.delta_beta), self.beta0 * (1 + self.delta_beta)),
        }


@dataclass
class AdaptiveParamTable:
    """Unconstrained per-class parameters and their gradient buffers.

    With constraints enabled the raw values pass through tanh before use;
    otherwise they are used directly as margins and scales.
    """

    raw_lambda_p: np.ndarray
    raw_lambda_n: np.ndarray
    raw_alpha: np.ndarray
    raw_beta: np.ndarray
    config: ConstraintConfig = field(default_factory=ConstraintConfig)
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, num_classes: int, config: ConstraintConfig | None = None) -> "AdaptiveParamTable":
        config = config or ConstraintConfig()
        if num_classes < 1:
            raise ValueError("need at least one class")
        if config.constraints_enabled:
            init = (0.0, 0.0, 0.0, 0.0)
        else:
            init = (config.lambda0, config.lambda0, config.alpha0, config.beta0)
        arrays = [np.full(num_classes, v, dtype=np.float64) for v in init]
        table = cls(*arrays, config=config)
        table.zero_grad()
        return table

    @property
    def num_classes(self) -> int:
        return self.raw_lambda_p.size

    def raw(self) -> dict[str, np.ndarray]:
        """Named views of the raw arrays (mutating them updates the table)."""
        return {
            "lambda_p": self.raw_lambda_p,
            "lambda_n": self.raw_lambda_n,
            "alpha": self.raw_alpha,
            "beta": self.raw_beta,
        }

    def zero_grad(self):
        self.grads = {name: np.zeros(self.num_classes) for name in PARAM_NAMES}

    def copy(self) -> "AdaptiveParamTable":
        out = AdaptiveParamTable(
            self.raw_lambda_p.copy(), self.raw_lambda_n.copy(),
            self.raw_alpha.copy(), self.raw_beta.copy(), config=self.config,
        )
        out.grads = {k: v.copy() for k, v in self.grads.items()}
        return out

    def _check_class(self, c: int):
        if not (0 <= c < self.num_classes):
            raise IndexError(f"class {c} out of range [0, {self.num_classes})")

    def constrained(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Constrained (lambda_p, lambda_n, alpha, beta) for every class."""
        cfg = self.config
        if not cfg.constraints_enabled:
            return self.raw_lambda_p, self.raw_lambda_n, self.raw_alpha, self.raw_beta
        lp, ln, a, b = (np.tanh(np.clip(r, -RAW_LIMIT, RAW_LIMIT)) for r in
                        (self.raw_lambda_p, self.raw_lambda_n, self.raw_alpha, self.raw_beta))
        # x0 + (x0 * delta) * tanh(r): the additive form cannot round past the bounds
        return (
            cfg.lambda0 + cfg.lambda0 * lp,
            cfg.lambda0 + cfg.lambda0 * ln,
            cfg.alpha0 + (cfg.alpha0 * cfg.delta_alpha) * a,
            cfg.beta0 + (cfg.beta0 * cfg.delta_beta) * b,
        )

    def chain_factors(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """d(constrained)/d(raw) for every class."""
        cfg = self.config
        if not cfg.constraints_enabled:
            ones = np.ones(self.num_classes)
            return ones, ones.copy(), ones.copy(), ones.copy()

        def sech2(r):
            # flat beyond the clamp
            return np.where(np.abs(r) > RAW_LIMIT, 0.0, 1.0 - np.tanh(r) ** 2)

        return (
            cfg.lambda0 * sech2(self.raw_lambda_p),
            cfg.lambda0 * sech2(self.raw_lambda_n),
            cfg.alpha0 * cfg.delta_alpha * sech2(self.raw_alpha),
            cfg.beta0 * cfg.delta_beta * sech2(self.raw_beta),
        )


def constrain(table: AdaptiveParamTable, c: int) -> tuple[float, float, float, float]:
    table._check_class(c)
    return tuple(float(v[c]) for v in table.constrained())


def constrain_chain_factor(table: AdaptiveParamTable, c: int) -> tuple[float, float, float, float]:
    table._check_class(c)
    return tuple(float(v[c]) for v in table.chain_factors())


class TrajectoryLog:
    """Append-only record of constrained values, optionally streamed to CSV."""

    def __init__(self, path: str | Path | None = None):
        self.rows: list[tuple[int, int, float, float, float, float]] = []
        self._fh = None
        self._writer = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(TRAJECTORY_HEADER)

    def append(self, row):
        self.rows.append(row)
        if self._writer is not None:
            self._writer.writerow(_format_row(row))

    def flush(self):
        if self._fh is not None:
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self._writer = None

    def __len__(self):
        return len(self.rows)

    def for_class(self, c: int) -> np.ndarray:
        """Rows of one class as an array with columns step, lambda_p, lambda_n, alpha, beta."""
        sel = [(r[0], *r[2:]) for r in self.rows if r[1] == c]
        return np.array(sel, dtype=np.float64).reshape(-1, 5)


def _format_row(row) -> list[str]:
    step, c, *vals = row
    return [str(step), str(c)] + [repr(float(v)) for v in vals]


def record_trajectory(table: AdaptiveParamTable, step: int, sink: TrajectoryLog,
                      classes: Iterable[int] | None = None):
    """Append the constrained values of ``classes`` (default: all) at ``step``."""
    lp, ln, a, b = table.constrained()
    idx = range(table.num_classes) if classes is None else sorted(set(int(c) for c in classes))
    for c in idx:
        sink.append((int(step), c, float(lp[c]), float(ln[c]), float(a[c]), float(b[c])))


def write_trajectory_rows(rows, fh, class_filter: int | None = None):
    w = csv.writer(fh)
    w.writerow(TRAJECTORY_HEADER)
    for row in rows:
        if class_filter is None or row[1] == class_filter:
            w.writerow(_format_row(row))


def write_trajectory_csv(rows, path: str | Path, class_filter: int | None = None):
    with open(path, "w", newline="") as fh:
        write_trajectory_rows(rows, fh, class_filter)


def read_trajectory_csv(path: str | Path) -> list[tuple[int, int, float, float, float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRAJECTORY_HEADER:
            raise ValueError(f"unexpected trajectory header {header}")
        return [(int(r[0]), int(r[1]), *map(float, r[2:])) for r in reader]
