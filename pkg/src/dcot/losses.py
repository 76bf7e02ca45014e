"""Smoothed negative log-likelihood losses over observed tensor entries.

Every cell of the estimate tensor ``z`` (observed or not) accrues loss
from the observed entries, weighted by the multiplicative smoothing
weights of :mod:`dcot.similarity`:

    value = (1 / prod(I_n)) * sum_t sum_{j in observed} w(t, j) * f(x_j; z_t)

with the per-family integrand ``f``:

* ``gaussian``:  ``(z - x)**2``
* ``bernoulli``: ``log(1 + exp(z)) - x * z``   (log-odds scale)
* ``poisson``:   ``z - x * log(z)``            (identity link, ``z >= 0``)
* ``gamma``:     ``log(z + eps) + x / (z + eps)``  (mean link, ``z >= 0``)

The returned value is a minimization objective (the likelihood's sign and
constant factors are absorbed).  The normalization is by the total cell
count, not the observation count, so unobserved cells participate; this
is what makes completion work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

_POISSON_FLOOR = 1e-12

_FAMILIES = ("gaussian", "bernoulli", "poisson", "gamma")


class DomainError(ValueError):
    """A value violates a loss family's domain."""


@dataclass(frozen=True)
class ObservationSet:
    """Observed entries of a tensor: integer index rows plus values."""

    indices: np.ndarray
    values: np.ndarray
    shape: tuple[int, ...]

    def __post_init__(self):
        idx = np.atleast_2d(np.asarray(self.indices, dtype=np.int64))
        if idx.size == 0:
            idx = idx.reshape(0, len(self.shape))
        vals = np.asarray(self.values, dtype=float).ravel()
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "shape", shape)
        if idx.shape[1] != len(shape):
            raise ValueError(
                f"index rows have {idx.shape[1]} coordinates, shape has "
                f"{len(shape)} modes"
            )
        if idx.shape[0] != vals.shape[0]:
            raise ValueError("need one value per index row")
        if idx.size:
            if idx.min() < 0 or np.any(idx >= np.array(shape)):
                raise ValueError("observation index out of range")
            if np.unique(idx, axis=0).shape[0] != idx.shape[0]:
                raise ValueError("duplicate observation indices")
        if not np.all(np.isfinite(vals)):
            raise ValueError("observation values must be finite")

    @classmethod
    def from_entries(cls, entries, shape) -> "ObservationSet":
        """Build from an iterable of ``(index tuple, value)`` pairs."""
        entries = list(entries)
        idx = np.array([e[0] for e in entries], dtype=np.int64).reshape(
            len(entries), len(shape)
        )
        vals = np.array([e[1] for e in entries], dtype=float)
        return cls(idx, vals, tuple(shape))

    @classmethod
    def from_dense(cls, x: np.ndarray, mask: np.ndarray | None = None) -> "ObservationSet":
        """Take every cell of ``x`` (or only those where ``mask`` is true)."""
        x = np.asarray(x, dtype=float)
        if mask is None:
            mask = np.ones(x.shape, dtype=bool)
        idx = np.argwhere(mask)
        return cls(idx, x[mask], x.shape)

    def __len__(self) -> int:
        return self.indices.shape[0]

    def to_dense(self, fill: float = 0.0) -> np.ndarray:
        out = np.full(self.shape, float(fill))
        out[tuple(self.indices.T)] = self.values
        return out

    def mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        out[tuple(self.indices.T)] = True
        return out


@dataclass(frozen=True)
class LossFamily:
    """One of the supported likelihood families plus its domain guard."""

    kind: str = "gaussian"
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind not in _FAMILIES:
            raise ValueError(f"unknown family {self.kind!r}, expected {_FAMILIES}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def validate_observations(self, omega: ObservationSet) -> None:
        v = omega.values
        if self.kind == "bernoulli" and not np.all((v == 0) | (v == 1)):
            raise DomainError("bernoulli observations must be 0 or 1")
        if self.kind == "poisson" and (np.any(v < 0) or np.any(v != np.round(v))):
            raise DomainError("poisson observations must be nonnegative integers")
        if self.kind == "gamma" and np.any(v <= 0):
            raise DomainError("gamma observations must be strictly positive")

    def check_domain(self, z: np.ndarray) -> None:
        if self.kind in ("poisson", "gamma") and np.any(z < 0):
            raise DomainError(f"{self.kind} loss requires z >= 0")


def _moments(sim, omega: ObservationSet):
    # Imported here: similarity depends on ObservationSet from this module.
    from .similarity import Moments, smoothing_moments

    if isinstance(sim, Moments):
        return sim
    return smoothing_moments(sim, omega)


def loss_value(family: LossFamily, sim, omega: ObservationSet, z: np.ndarray) -> float:
    """Evaluate the smoothed loss; ``sim`` may be a model or precomputed moments."""
    z = np.asarray(z, dtype=float)
    if z.shape != omega.shape:
        raise ValueError(f"z shape {z.shape} does not match data shape {omega.shape}")
    family.check_domain(z)
    mom = _moments(sim, omega)
    w, m1, m2, count = mom.weight_sum, mom.weighted_x, mom.weighted_x2, mom.count
    if family.kind == "gaussian":
        total = w * z**2 - 2.0 * m1 * z + m2
    elif family.kind == "bernoulli":
        total = w * np.logaddexp(0.0, z) - m1 * z
    elif family.kind == "poisson":
        total = w * z - m1 * np.log(np.maximum(z, _POISSON_FLOOR))
    else:  # gamma
        zz = z + family.epsilon
        total = w * np.log(zz) + m1 / zz
    return float(total.sum()) / count


def loss_gradient(
    family: LossFamily, sim, omega: ObservationSet, z: np.ndarray
) -> np.ndarray:
    """Elementwise gradient of :func:`loss_value` with respect to ``z``."""
    z = np.asarray(z, dtype=float)
    if z.shape != omega.shape:
        raise ValueError(f"z shape {z.shape} does not match data shape {omega.shape}")
    family.check_domain(z)
    mom = _moments(sim, omega)
    w, m1, count = mom.weight_sum, mom.weighted_x, mom.count
    if family.kind == "gaussian":
        grad = 2.0 * (w * z - m1)
    elif family.kind == "bernoulli":
        grad = expit(z) * w - m1
    elif family.kind == "poisson":
        grad = w - m1 / np.maximum(z, _POISSON_FLOOR)
    else:  # gamma
        zz = z + family.epsilon
        grad = w / zz - m1 / zz**2
    return grad / count


def loss_lipschitz(
    family: LossFamily, sim, omega: ObservationSet, z_min: float | None = None
) -> float:
    """Upper bound on the Lipschitz constant of the loss gradient.

    The loss Hessian is diagonal, so the bound is the largest per-cell
    curvature.  ``poisson`` and ``gamma`` curvatures blow up near zero, so
    a positive lower bound ``z_min`` on the entries of ``z`` is required
    for them.
    """
    mom = _moments(sim, omega)
    w, m1, count = mom.weight_sum, mom.weighted_x, mom.count
    if family.kind == "gaussian":
        return 2.0 * float(w.max()) / count
    if family.kind == "bernoulli":
        return float(w.max()) / (4.0 * count)
    if z_min is None or z_min <= 0:
        raise ValueError(f"{family.kind} needs a positive lower bound z_min")
    if family.kind == "poisson":
        return float(m1.max()) / (count * z_min**2)
    zz = z_min + family.epsilon
    return (float(w.max()) / zz**2 + 2.0 * float(m1.max()) / zz**3) / count
