"""Representations of the state law at one time and their quadrature rules."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from mfcq._linalg import sym_sqrt

DEFAULT_ORDER = 20


@dataclass(frozen=True)
class MeasureSlice:
    """Either a Gaussian summary ``(mean, cov)`` or an equally weighted particle cloud."""

    mean: np.ndarray
    cov: np.ndarray
    points: np.ndarray | None = None

    @classmethod
    def gaussian(cls, mean, cov) -> "MeasureSlice":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(cov, dtype=float).reshape(len(mean), len(mean))
        sym_sqrt(cov, name="measure covariance")  # PSD check
        return cls(mean, 0.5 * (cov + cov.T))

    @classmethod
    def dirac(cls, x) -> "MeasureSlice":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(x, np.zeros((len(x), len(x))))

    @classmethod
    def standard(cls, d: int) -> "MeasureSlice":
        return cls.gaussian(np.zeros(d), np.eye(d))

    @classmethod
    def particles(cls, points) -> "MeasureSlice":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        mean = pts.mean(axis=0)
        dev = pts - mean
        return cls(mean, dev.T @ dev / len(pts), pts)

    @property
    def d(self) -> int:
        return len(self.mean)

    @property
    def is_particles(self) -> bool:
        return self.points is not None

    @property
    def is_dirac(self) -> bool:
        return self.points is None and not np.any(self.cov)

    def nodes(self, order: int = DEFAULT_ORDER) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature nodes ``(n, d)`` and weights ``(n,)`` summing to one.

        Gaussian slices use a tensor Gauss-Hermite rule mapped through the
        symmetric square root of the covariance.
        """
        if self.is_particles:
            n = len(self.points)
            return self.points, np.full(n, 1.0 / n)
        if self.is_dirac:
            return self.mean[None, :], np.ones(1)
        z, w = hermegauss(order)
        w = w / w.sum()
        d = self.d
        grid = np.array(list(itertools.product(z, repeat=d)))
        wts = np.prod(np.array(list(itertools.product(w, repeat=d))), axis=1)
        return self.mean + grid @ sym_sqrt(self.cov).T, wts

    def second_moment(self) -> np.ndarray:
        return self.cov + np.outer(self.mean, self.mean)
