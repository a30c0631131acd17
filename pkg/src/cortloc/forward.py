"""Synthetic forward model: lead field, continuous interpolation, simulation.

The lead field uses the closed-form magnetic field of a current dipole
inside a homogeneous conducting sphere fitted to the mesh.  The model is
dependency-free and keeps the physical null for radially oriented
sources.  Measurement units are arbitrary but used consistently; noise
levels are always set relative to simulated signal power.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import JointState
from .errors import DataError, NumericalError
from .mesh import CorticalMesh, SurfacePoint, icosphere

log = logging.getLogger(__name__)

# Fitted conducting sphere: vertex centroid, max vertex distance + margin (mm).
SPHERE_MARGIN = 2.0


@dataclass(frozen=True)
class SensorArray:
    """Magnetometer positions (mm) and unit measurement axes."""

    positions: np.ndarray
    orientations: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        ori = np.asarray(self.orientations, dtype=np.float64)
        if pos.shape != ori.shape or pos.ndim != 2 or pos.shape[1] != 3:
            raise DataError("sensor positions/orientations must both be (M, 3)")
        norms = np.linalg.norm(ori, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise DataError("sensor orientations must be unit length")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "orientations", ori)

    def __len__(self) -> int:
        return len(self.positions)


class LeadField:
    """M x G matrix of unit-dipole sensor responses at the grid vertices."""

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise DataError(f"lead field must be 2-D, got shape {matrix.shape}")
        if not np.isfinite(matrix).all():
            raise DataError("lead field contains non-finite entries")
        if (np.abs(matrix).sum(axis=0) == 0.0).any():
            col = int(np.flatnonzero(np.abs(matrix).sum(axis=0) == 0.0)[0])
            raise DataError(f"lead-field column {col} is identically zero")
        self.matrix = matrix
        self.matrix.setflags(write=False)
        self._interp: LeadFieldInterpolator | None = None
        self._gram: np.ndarray | None = None

    @property
    def num_sensors(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.matrix.shape[1]

    def sensor_gram(self) -> np.ndarray:
        """Cached M x M Gram matrix of the lead field rows."""
        if self._gram is None:
            self._gram = self.matrix @ self.matrix.T
        return self._gram

    def interpolator(self, mesh: CorticalMesh) -> "LeadFieldInterpolator":
        """Cached continuous interpolator bound to ``mesh``."""
        if self._interp is None or self._interp.mesh is not mesh:
            self._interp = LeadFieldInterpolator(mesh, self)
        return self._interp


class LeadFieldInterpolator:
    """Barycentric interpolation of unit responses over the surface.

    Per face corner the vertex column is scaled by cos(theta), the angle
    between the face normal and the vertex orientation; negative cosines
    (folded geometry) are clamped to zero with a warning.  Precomputes the
    per-face corner Gram tensors that let particle weights be evaluated
    without materialising full M-vectors.
    """

    def __init__(self, mesh: CorticalMesh, leadfield: LeadField):
        if leadfield.num_vertices != mesh.num_vertices:
            raise DataError(
                f"lead field has {leadfield.num_vertices} columns but mesh "
                f"has {mesh.num_vertices} vertices"
            )
        self.mesh = mesh
        self.leadfield = leadfield
        corners = mesh.faces  # (F, 3) vertex ids, corner order (g1, g2, g3)
        cos = np.einsum(
            "fj,fcj->fc", mesh.face_normals, mesh.vertex_normals[corners]
        )
        clamped = int((cos < 0).sum())
        if clamped:
            log.warning(
                "clamped %d negative orientation cosines to zero "
                "(near-folded geometry)",
                clamped,
            )
        self.cos_theta = np.clip(cos, 0.0, 1.0)
        # Gram of the raw corner columns; the orientation cosines enter
        # through the corner weights, so they must not be baked in here.
        cols = leadfield.matrix[:, corners]  # (M, F, 3)
        self.corner_gram = np.einsum("mfa,mfb->fab", cols, cols)

    @staticmethod
    def _corner_weights(phis, varphis) -> np.ndarray:
        """(n, 3) weights in corner order (g1, g2, g3)."""
        return np.stack([varphis, phis, 1.0 - phis - varphis], axis=-1)

    def response(self, faces, phis, varphis) -> np.ndarray:
        """Dense (n, M) unit responses for arrays of surface coordinates."""
        corners = self.mesh.faces[faces]  # (n, 3)
        w = self._corner_weights(phis, varphis) * self.cos_theta[faces]
        cols = self.leadfield.matrix[:, corners]  # (M, n, 3)
        return np.einsum("mnc,nc->nm", cols, w)

    def response_stats(self, faces, phis, varphis, base) -> tuple[np.ndarray, np.ndarray]:
        """Per-state inner products against ``base`` plus squared norms.

        Returns ``(dots, norm2)`` with ``dots[i] = response_i . base`` and
        ``norm2[i] = |response_i|^2``, computed from the corner Gram
        tensors in O(M*G + n) instead of O(n*M).
        """
        u = self.leadfield.matrix.T @ np.asarray(base)  # (G,)
        corners = self.mesh.faces[faces]
        w = self._corner_weights(phis, varphis) * self.cos_theta[faces]
        dots = np.einsum("nc,nc->n", u[corners], w)
        norm2 = np.einsum("nab,na,nb->n", self.corner_gram[faces], w, w)
        return dots, norm2


def fit_sphere(mesh: CorticalMesh, margin: float = SPHERE_MARGIN):
    """Conducting sphere enclosing the mesh: (centre, radius)."""
    centre, radius = mesh.bounding_sphere()
    return centre, radius + margin


def dipole_field(positions, moments, sensors: SensorArray, centre) -> np.ndarray:
    """Magnetometer readings of current dipoles in a conducting sphere.

    Evaluates the closed-form external field of a current dipole inside a
    homogeneous spherical conductor centred at ``centre`` and projects it
    on each sensor's measurement axis.  Radial moments produce zero field.
    Constant permeability factors are dropped (arbitrary units).

    Parameters
    ----------
    positions : (n, 3) array
        Dipole positions (mm).
    moments : (n, 3) array
        Dipole moment vectors.
    sensors : SensorArray
    centre : (3,) array

    Returns
    -------
    (n, M) array of sensor projections.
    """
    r0 = np.asarray(positions, dtype=np.float64) - centre  # (n, 3)
    q = np.asarray(moments, dtype=np.float64)
    r = sensors.positions - centre  # (M, 3)
    r_mag = np.linalg.norm(r, axis=1)  # (M,)

    a_vec = r[None, :, :] - r0[:, None, :]  # (n, M, 3)
    a = np.linalg.norm(a_vec, axis=2)  # (n, M)
    if (a < 1e-9).any():
        raise NumericalError("sensor coincides with a dipole location")
    ar = np.einsum("nmj,mj->nm", a_vec, r)  # (n, M)
    r0r = r0 @ r.T  # (n, M)
    f = a * (r_mag[None, :] * a + r_mag[None, :] ** 2 - r0r)
    if (np.abs(f) < 1e-12).any():
        raise NumericalError("degenerate sphere-model geometry (F = 0)")
    grad_coeff_r = a**2 / r_mag[None, :] + ar / a + 2.0 * a + 2.0 * r_mag[None, :]
    grad_coeff_r0 = a + 2.0 * r_mag[None, :] + ar / a
    qxr0 = np.cross(q, r0)  # (n, 3)
    qxr0_r = qxr0 @ r.T  # (n, M)
    # B . e projected: assemble per sensor axis.
    e = sensors.orientations  # (M, 3)
    term1 = f * (qxr0 @ e.T)  # (n, M)
    grad_f_e = (
        grad_coeff_r * np.einsum("mj,mj->m", r, e)[None, :]
        - grad_coeff_r0 * (r0 @ e.T)
    )
    b = (term1 - qxr0_r * grad_f_e) / f**2
    return b


def synth_lead_field(mesh: CorticalMesh, sensors: SensorArray) -> LeadField:
    """Analytic lead field at the mesh vertices.

    Column ``v`` is the sphere-model field of a unit dipole at vertex ``v``
    oriented along the vertex normal, projected on each sensor axis.
    """
    centre, radius = fit_sphere(mesh)
    dist = np.linalg.norm(sensors.positions - centre, axis=1)
    if (dist <= radius).any():
        bad = int(np.argmin(dist))
        raise DataError(
            f"sensor {bad} lies inside the fitted sphere "
            f"(distance {dist[bad]:.2f} mm <= radius {radius:.2f} mm)"
        )
    b = dipole_field(mesh.vertices, mesh.vertex_normals, sensors, centre)
    return LeadField(b.T)  # (M, G)


def unit_response(leadfield: LeadField, mesh: CorticalMesh, p: SurfacePoint) -> np.ndarray:
    """Interpolated unit response (M-vector) at one surface point."""
    interp = leadfield.interpolator(mesh)
    return interp.response(
        np.array([p.face]), np.array([p.phi]), np.array([p.varphi])
    )[0]


def predict_measurement(
    leadfield: LeadField, mesh: CorticalMesh, state: JointState
) -> np.ndarray:
    """Noiseless sensor prediction: sum of amplitude-scaled unit responses."""
    out = np.zeros(leadfield.num_sensors)
    if not state.dipoles:
        return out
    interp = leadfield.interpolator(mesh)
    faces = np.array([d.location.face for d in state.dipoles])
    phis = np.array([d.location.phi for d in state.dipoles])
    varphis = np.array([d.location.varphi for d in state.dipoles])
    resp = interp.response(faces, phis, varphis)
    return state.amplitudes() @ resp


# -- scenario simulation -----------------------------------------------------


@dataclass(frozen=True)
class Measurement:
    """One multichannel magnetometer sample."""

    values: np.ndarray
    time_index: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(values).all():
            raise DataError(f"non-finite measurement at step {self.time_index}")
        object.__setattr__(self, "values", values)


@dataclass
class Scenario:
    """Ground-truth script plus measurement-noise settings.

    ``sigma`` overrides the SNR-derived noise level when set; ``snr`` is
    the ratio of mean signal power per sample to noise variance.
    """

    mesh: CorticalMesh
    sensors: SensorArray
    script: list[JointState]
    snr: float | None = 10.0
    sigma: float | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.script) < 1:
            raise DataError("scenario horizon must be at least 1 step")
        for k, state in enumerate(self.script):
            for d in state.dipoles:
                if not (
                    0 <= d.location.face < self.mesh.num_faces
                    and d.location.coeffs_valid()
                ):
                    raise DataError(f"invalid scripted dipole at step {k}")
        if self.sigma is None and (self.snr is None or self.snr <= 0):
            raise DataError("scenario needs a positive SNR or an explicit sigma")

    @property
    def horizon(self) -> int:
        return len(self.script)


@dataclass
class ScenarioRun:
    """Simulated measurements paired with the ground-truth script."""

    measurements: list[Measurement]
    truth: list[JointState]
    sigma: float

    def __iter__(self):
        return iter(zip(self.measurements, self.truth))

    def __len__(self) -> int:
        return len(self.measurements)


def noise_sigma_for_snr(predictions: np.ndarray, snr: float) -> float:
    """Noise std giving ``mean(signal^2) / sigma^2 = snr``."""
    power = float(np.mean(predictions**2))
    return float(np.sqrt(power / snr)) if power > 0 else 0.0


def simulate_scenario(
    scenario: Scenario, leadfield: LeadField | None = None
) -> ScenarioRun:
    """Simulate noisy measurements for every step of the script.

    Noise is i.i.d. zero-mean Gaussian per channel with variance sigma^2;
    when only an SNR is given, sigma is set so that mean signal power per
    sample divided by noise variance equals the SNR.  Fully seeded.
    """
    if leadfield is None:
        leadfield = synth_lead_field(scenario.mesh, scenario.sensors)
    preds = np.stack(
        [
            predict_measurement(leadfield, scenario.mesh, state)
            for state in scenario.script
        ]
    )
    if scenario.sigma is not None:
        sigma = float(scenario.sigma)
    else:
        sigma = noise_sigma_for_snr(preds, scenario.snr)
    rng = np.random.default_rng(np.random.SeedSequence((int(scenario.seed), 0xE0)))
    noisy = preds + sigma * rng.standard_normal(preds.shape)
    measurements = [Measurement(noisy[k], k) for k in range(len(noisy))]
    return ScenarioRun(measurements, list(scenario.script), sigma)


# -- desk-scale generators ----------------------------------------------------


def generate_desk_mesh(
    subdivisions: int = 4,
    width_mm: float = 136.0,
    pinch_depth: float = 0.15,
    pinch_width: float = 0.18,
    ripple_amp: float = 0.08,
) -> CorticalMesh:
    """Two-lobed folded surface approximating a cortical sheet at desk scale.

    An icosphere gets smooth radial ripples (folding: tilts surface
    normals away from radial everywhere, as sulci do, so no large region
    is blind to the sphere-model sensors), is pinched along the x axis by
    a Gaussian waist (the interhemispheric groove), and is scaled so its
    x extent equals ``width_mm``.  ``subdivisions = 4`` gives 2562
    vertices / 5120 faces.
    """
    verts, faces = icosphere(subdivisions)
    d = verts / np.linalg.norm(verts, axis=1)[:, None]
    folds = (
        np.sin(3 * np.pi * d[:, 0] + 0.7)
        + np.sin(4 * np.pi * d[:, 1] + 1.3)
        + np.sin(5 * np.pi * d[:, 2] + 2.1)
    ) / 3.0
    verts = verts * (1.0 + ripple_amp * folds)[:, None]
    waist = 1.0 - pinch_depth * np.exp(-0.5 * (d[:, 0] / pinch_width) ** 2)
    verts[:, 1] *= waist
    verts[:, 2] *= waist
    scale = width_mm / (verts[:, 0].max() - verts[:, 0].min())
    return CorticalMesh(verts * scale, faces)


def generate_sensor_cap(
    mesh: CorticalMesh,
    count: int = 204,
    offset_mm: float = 20.0,
    cap_z_min: float = -0.35,
) -> SensorArray:
    """Radial magnetometers on a spherical cap above the mesh.

    Sensors sit on a sphere ``offset_mm`` beyond the mesh bounding sphere,
    quasi-uniformly placed by a Fibonacci spiral over directions with
    z >= ``cap_z_min``; measurement axes point radially outward.
    """
    centre, radius = mesh.bounding_sphere()
    shell = radius + offset_mm
    i = np.arange(count)
    z = cap_z_min + (1.0 - cap_z_min) * (i + 0.5) / count
    azimuth = i * np.pi * (3.0 - np.sqrt(5.0))
    rho = np.sqrt(1.0 - z**2)
    dirs = np.stack([rho * np.cos(azimuth), rho * np.sin(azimuth), z], axis=1)
    return SensorArray(centre + shell * dirs, dirs)


def pick_separated_faces(
    mesh: CorticalMesh,
    n: int,
    seed: int,
    leadfield: LeadField | None = None,
    visibility_quantile: float = 0.5,
) -> list[int]:
    """Well-separated face indices via farthest-point sampling of centroids.

    When a lead field is given, candidate faces are first restricted to
    those whose centroid unit response is above the given quantile of all
    faces, so scripted sources are actually observable by the array.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xFA)))
    if leadfield is not None:
        interp = leadfield.interpolator(mesh)
        all_faces = np.arange(mesh.num_faces)
        third = np.full(mesh.num_faces, 1.0 / 3.0)
        resp = interp.response(all_faces, third, third)
        strength = np.linalg.norm(resp, axis=1)
        cut = np.quantile(strength, visibility_quantile)
        candidates = np.flatnonzero(strength >= cut)
    else:
        candidates = np.arange(mesh.num_faces)
    if len(candidates) < n:
        raise DataError(f"only {len(candidates)} candidate faces for {n} sources")
    centroids = mesh.face_centroids[candidates]
    chosen = [int(rng.integers(len(candidates)))]
    dist = np.linalg.norm(centroids - centroids[chosen[0]], axis=1)
    while len(chosen) < n:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(centroids - centroids[nxt], axis=1))
    return [int(candidates[i]) for i in chosen]


# -- lead-field cache ----------------------------------------------------------


def save_lead_field(path, leadfield: LeadField) -> None:
    """Dump the lead field as text: ``M G`` header then M rows of G values."""
    m, g = leadfield.matrix.shape
    with open(path, "w") as fh:
        fh.write(f"{m} {g}\n")
        for row in leadfield.matrix:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_lead_field(path) -> LeadField:
    """Read a lead field written by :func:`save_lead_field`."""
    try:
        with open(path) as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise DataError(f"{path}: malformed lead-field header")
            m, g = int(header[0]), int(header[1])
            matrix = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    except OSError as exc:
        raise DataError(f"cannot read lead field {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if matrix.shape != (m, g):
        raise DataError(
            f"{path}: header declares {(m, g)}, data has shape {matrix.shape}"
        )
    return LeadField(matrix)
