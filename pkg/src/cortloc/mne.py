"""Probabilistic region-of-interest estimation.

A regularised minimum-norm inverse maps one measurement onto vertex
amplitudes; vertices are then sampled in proportion to estimated
activity and clustered into spatial regions whose count seeds the
dipole-number logic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.cluster.hierarchy as sch
import scipy.linalg

from .errors import CortlocError, NumericalError
from .forward import LeadField, Measurement
from .mesh import CorticalMesh


@dataclass(frozen=True)
class AmplitudeField:
    """Signed amplitude estimate per grid vertex."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(values).all():
            raise NumericalError("amplitude field contains non-finite values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class PointSet:
    """Multiset of grid-vertex indices drawn at one time step."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "points", np.asarray(self.points, dtype=np.int64)
        )

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class ROI:
    """One spatial cluster of sampled vertices and its centre of mass."""

    members: np.ndarray
    centre: np.ndarray

    def __len__(self) -> int:
        return len(self.members)


def mne_solve(leadfield: LeadField, y, lam: float) -> AmplitudeField:
    """Regularised minimum-norm inverse of one measurement.

    Solves ``L^T (L L^T + lam I)^{-1} y`` with a symmetric positive
    definite factorisation; no explicit inverse is formed.
    """
    if lam <= 0:
        raise CortlocError(f"regularisation parameter must be positive, got {lam}")
    values = y.values if isinstance(y, Measurement) else np.asarray(y, dtype=np.float64)
    if values.shape != (leadfield.num_sensors,):
        raise CortlocError(
            f"measurement has {values.shape} values, lead field expects "
            f"{leadfield.num_sensors}"
        )
    gram = leadfield.sensor_gram() + lam * np.eye(leadfield.num_sensors)
    try:
        cho = scipy.linalg.cho_factor(gram, check_finite=False)
        w = scipy.linalg.cho_solve(cho, values, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"minimum-norm solve broke down: {exc}") from exc
    return AmplitudeField(leadfield.matrix.T @ w)


def default_regularisation(
    leadfield: LeadField, y, sigma: float
) -> float:
    """Noise-normalised regularisation weight.

    ``lam = sigma^2 * trace(L L^T) / (M * signal_power)`` with the signal
    power estimated from the measurement itself (noise power subtracted,
    floored at a tenth of the raw power).
    """
    values = y.values if isinstance(y, Measurement) else np.asarray(y, dtype=np.float64)
    m = leadfield.num_sensors
    raw = float(np.mean(values**2))
    signal = max(raw - sigma**2, 0.1 * raw, 1e-30)
    return sigma**2 * float(np.trace(leadfield.sensor_gram())) / (m * signal)


def probabilistic_sample(
    field: AmplitudeField, count: int, rng: np.random.Generator
) -> PointSet:
    """Draw vertex indices i.i.d. with probability proportional to |amplitude|.

    An all-zero field falls back to uniform sampling over the grid.
    """
    if count < 1:
        raise CortlocError("sample count must be at least 1")
    weights = np.abs(field.values)
    total = weights.sum()
    if total == 0.0:
        probs = None  # uniform fallback
    else:
        probs = weights / total
    points = rng.choice(len(field.values), size=count, replace=True, p=probs)
    return PointSet(points)


def cluster_rois(
    psi: PointSet,
    mesh: CorticalMesh,
    cutoff_mm: float = 20.0,
    min_members: int = 3,
) -> list[ROI]:
    """Single-linkage clustering of sampled vertices into regions.

    Clusters are cut at link distance ``cutoff_mm`` on 3D vertex
    positions; clusters whose multiset membership is below
    ``min_members`` are discarded as noise.  Each centre is the mean
    position over the member multiset.  ROIs are ordered by their
    smallest member index, so the result is independent of input order.
    """
    if len(psi) == 0:
        raise CortlocError("cannot cluster an empty point set")
    unique, counts = np.unique(psi.points, return_counts=True)
    positions = mesh.vertices[unique]
    if len(unique) == 1:
        labels = np.zeros(1, dtype=int)
    else:
        linkage = sch.linkage(positions, method="single")
        labels = sch.fcluster(linkage, t=cutoff_mm, criterion="distance")
    rois = []
    for label in np.unique(labels):
        mask = labels == label
        members = np.repeat(unique[mask], counts[mask])
        if len(members) < min_members:
            continue
        centre = mesh.vertices[members].mean(axis=0)
        rois.append(ROI(members, centre))
    rois.sort(key=lambda roi: int(roi.members.min()))
    return rois
