"""Surface-constrained dipole transition model and dipole-number dynamics.

All kernels are pure functions of immutable inputs plus an explicit RNG
handle; callers own parallelism and stream layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CortlocError
from .mesh import (
    CorticalMesh,
    SurfacePoint,
    points_from_coeffs,
    sample_simplex,
    sample_uniform_surface_points,
    surface_point_for_vertex,
)


@dataclass(frozen=True)
class DipoleState:
    """One dipole: surface location plus signed moment amplitude."""

    location: SurfacePoint
    amplitude: float


@dataclass
class JointState:
    """All active dipoles at one time step (possibly none)."""

    dipoles: list[DipoleState] = field(default_factory=list)
    time_index: int = 0

    def __len__(self) -> int:
        return len(self.dipoles)

    def positions(self, mesh: CorticalMesh) -> np.ndarray:
        """(N, 3) array of dipole positions in mm."""
        if not self.dipoles:
            return np.zeros((0, 3))
        faces = np.array([d.location.face for d in self.dipoles])
        phis = np.array([d.location.phi for d in self.dipoles])
        varphis = np.array([d.location.varphi for d in self.dipoles])
        return points_from_coeffs(mesh, faces, phis, varphis)

    def amplitudes(self) -> np.ndarray:
        return np.array([d.amplitude for d in self.dipoles])


@dataclass(frozen=True)
class NumberTransition:
    """Birth/stay/death probabilities for the dipole count."""

    p_plus: float
    p_zero: float
    p_minus: float

    def __post_init__(self):
        total = self.p_plus + self.p_zero + self.p_minus
        if abs(total - 1.0) > 1e-12:
            raise CortlocError(f"number-transition probabilities sum to {total}")
        if min(self.p_plus, self.p_zero, self.p_minus) < 0:
            raise CortlocError("negative number-transition probability")

    def prob(self, hypothesis: str) -> float:
        return {"+": self.p_plus, "0": self.p_zero, "-": self.p_minus}[hypothesis]


def number_transition_probs(
    n_prev: int, p_b: float, p_d: float, p_zero: float = 0.5
) -> NumberTransition:
    """Distribution of the next dipole count over {N-1, N, N+1}.

    The unnormalised masses are ``p_b`` for a birth, ``p_zero`` for no
    change, and ``p_d / n_prev`` for a death; the death mass is forced to
    zero when no dipole exists.  The triple is renormalised to sum to 1.
    """
    if n_prev < 0 or p_b < 0 or p_d < 0 or p_zero < 0:
        raise CortlocError("number-transition inputs must be non-negative")
    minus = 0.0 if n_prev == 0 else p_d / n_prev
    total = p_b + p_zero + minus
    if total <= 0:
        raise CortlocError("number-transition masses are all zero")
    return NumberTransition(p_b / total, p_zero / total, minus / total)


def propagate_particles(
    mesh: CorticalMesh,
    faces: np.ndarray,
    phis: np.ndarray,
    varphis: np.ndarray,
    amps: np.ndarray,
    rng: np.random.Generator,
    range_scale: float = 1.0,
    sigma_q: float = 0.1,
):
    """Vectorised one-step transition for arrays of dipole states.

    Each state may hop to an edge-neighbouring face and lands at a point
    drawn uniformly on a sub-simplex shrunk by ``range_scale`` toward the
    previous location; at ``range_scale = 1`` the landing point is uniform
    over the whole target face and each of the F+1 candidate faces is
    equally likely.  Smaller values tighten both the face choice and the
    landing region around the current state, so the move contracts to the
    identity as ``range_scale -> 0``.  Amplitudes follow a Gaussian random
    walk with step ``sigma_q``.

    Returns new ``(faces, phis, varphis, amps)`` arrays.
    """
    if not 0.0 < range_scale <= 1.0:
        raise CortlocError(f"range_scale must be in (0, 1], got {range_scale}")
    n = len(faces)
    counts = mesh.neighbor_counts[faces]

    # Face choice: each neighbour with probability range_scale/(counts+1),
    # stay otherwise.
    slot = rng.random(n) * (counts + 1) / range_scale
    slot = np.minimum(slot, 3.0)
    nb_idx = slot.astype(np.int64)
    move = nb_idx < counts
    new_faces = np.where(
        move, mesh.neighbor_faces[faces, np.minimum(nb_idx, 2)], faces
    )

    # Landing centre: previous coefficients, re-expressed on the new face
    # (projected and clipped) when the face changed.
    c_phi = phis.copy()
    c_varphi = varphis.copy()
    if move.any():
        idx = np.flatnonzero(move)
        old_pts = points_from_coeffs(mesh, faces[idx], phis[idx], varphis[idx])
        tri = mesh.faces[new_faces[idx]]
        g1 = mesh.vertices[tri[:, 0]]
        g2 = mesh.vertices[tri[:, 1]]
        g3 = mesh.vertices[tri[:, 2]]
        gamma = old_pts - g3
        normals = mesh.face_normals[new_faces[idx]]
        gamma -= np.einsum("ij,ij->i", gamma, normals)[:, None] * normals
        alpha = g1 - g3
        beta = g2 - g3
        ga = np.einsum("ij,ij->i", gamma, alpha)
        gb = np.einsum("ij,ij->i", gamma, beta)
        det = mesh._bary_det[new_faces[idx]]
        p_new = (mesh._dot_aa[new_faces[idx]] * gb - mesh._dot_ab[new_faces[idx]] * ga) / det
        v_new = (mesh._dot_bb[new_faces[idx]] * ga - mesh._dot_ab[new_faces[idx]] * gb) / det
        p_new = np.maximum(p_new, 0.0)
        v_new = np.maximum(v_new, 0.0)
        s = p_new + v_new
        over = s > 1.0
        p_new[over] /= s[over]
        v_new[over] /= s[over]
        c_phi[idx] = p_new
        c_varphi[idx] = v_new

    u_phi, u_varphi = sample_simplex(rng, n)
    new_phis = c_phi + range_scale * (u_phi - c_phi)
    new_varphis = c_varphi + range_scale * (u_varphi - c_varphi)

    new_amps = amps + sigma_q * rng.standard_normal(n)
    return new_faces.astype(np.int64), new_phis, new_varphis, new_amps


def propagate_dipole(
    x: DipoleState,
    mesh: CorticalMesh,
    rng: np.random.Generator,
    range_scale: float = 1.0,
    sigma_q: float = 0.1,
) -> DipoleState:
    """One-step transition of a single dipole (see propagate_particles)."""
    faces, phis, varphis, amps = propagate_particles(
        mesh,
        np.array([x.location.face]),
        np.array([x.location.phi]),
        np.array([x.location.varphi]),
        np.array([x.amplitude]),
        rng,
        range_scale=range_scale,
        sigma_q=sigma_q,
    )
    return DipoleState(
        SurfacePoint(int(faces[0]), float(phis[0]), float(varphis[0])),
        float(amps[0]),
    )


def sample_birth(
    state: JointState,
    psi_points,
    mesh: CorticalMesh,
    rng: np.random.Generator,
    amp_mean: float = 0.0,
    amp_std: float = 1.0,
) -> JointState:
    """Append one newborn dipole.

    The location is a uniformly chosen entry of the sampled grid-point set
    ``psi_points`` (vertex indices), mapped onto its nearest incident face;
    an empty or missing set falls back to an area-uniform draw from the
    whole surface.  The amplitude is drawn from the configured prior.
    """
    psi_points = None if psi_points is None else np.asarray(psi_points)
    if psi_points is not None and psi_points.size:
        vertex = int(psi_points[rng.integers(psi_points.size)])
        location = surface_point_for_vertex(mesh, vertex)
    else:
        faces, phis, varphis = sample_uniform_surface_points(mesh, rng, 1)
        location = SurfacePoint(int(faces[0]), float(phis[0]), float(varphis[0]))
    amplitude = float(amp_mean + amp_std * rng.standard_normal())
    return JointState(
        state.dipoles + [DipoleState(location, amplitude)], state.time_index
    )


def remove_dipole(state: JointState, index: int) -> JointState:
    """Copy of the state with dipole ``index`` removed, order preserved."""
    if not 0 <= index < len(state.dipoles):
        raise CortlocError(f"no dipole at index {index}")
    dipoles = state.dipoles[:index] + state.dipoles[index + 1 :]
    return JointState(dipoles, state.time_index)


def apply_death(state: JointState, rng: np.random.Generator) -> JointState:
    """Remove one uniformly chosen dipole."""
    if not state.dipoles:
        raise CortlocError("cannot apply a death move to an empty state")
    return remove_dipole(state, int(rng.integers(len(state.dipoles))))
