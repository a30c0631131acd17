"""Triangulated cortical surface: adjacency, normals, and barycentric geometry.

The mesh is the state space of the localiser.  Dipole locations are
expressed as a face index plus two barycentric coefficients, so every
state is exactly on the surface by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MeshError

# Faces with area below this (mm^2) are rejected as degenerate.
DEGENERATE_AREA = 1e-9

# Points handed to barycentric_coeffs may drift off the face plane by at
# most this distance (mm) before it is treated as an error.
PLANE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class SurfacePoint:
    """A location on the mesh: face index plus barycentric coefficients.

    With face corners (g1, g2, g3), the 3D position is
    ``g3 + phi * (g2 - g3) + varphi * (g1 - g3)``; both coefficients are
    non-negative and their sum is at most 1.
    """

    face: int
    phi: float
    varphi: float

    def coeffs_valid(self, tol: float = 1e-12) -> bool:
        return (
            self.phi >= -tol
            and self.varphi >= -tol
            and self.phi + self.varphi <= 1.0 + tol
        )


class CorticalMesh:
    """Immutable triangle mesh with precomputed adjacency and normals.

    Parameters
    ----------
    vertices : (G, 3) array
        Vertex positions in mm.
    faces : (F, 3) int array
        Vertex index triples.  Faces must be consistently wound; normals
        follow the winding order.

    Raises
    ------
    MeshError
        For out-of-range indices, degenerate (zero-area) faces, or a
        non-manifold edge shared by more than two faces.
    """

    def __init__(self, vertices, faces):
        vertices = np.asarray(vertices, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (G, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {faces.shape}")
        if not np.isfinite(vertices).all():
            raise MeshError("non-finite vertex coordinates")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise MeshError("face references an out-of-range vertex index")
        if len(faces) == 0:
            raise MeshError("mesh has no faces")

        self.vertices = vertices
        self.faces = faces
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)

        g1 = vertices[faces[:, 0]]
        g2 = vertices[faces[:, 1]]
        g3 = vertices[faces[:, 2]]
        cross = np.cross(g2 - g1, g3 - g1)
        norms = np.linalg.norm(cross, axis=1)
        self.face_areas = 0.5 * norms
        bad = np.flatnonzero(self.face_areas < DEGENERATE_AREA)
        if bad.size:
            raise MeshError(f"degenerate (zero-area) face at index {bad[0]}")
        self.face_normals = cross / norms[:, None]
        self.face_centroids = (g1 + g2 + g3) / 3.0

        # Barycentric edge vectors and their dot products, per face.  The
        # 2x2 system uses alpha = g1 - g3 and beta = g2 - g3.
        alpha = g1 - g3
        beta = g2 - g3
        self._dot_aa = np.einsum("ij,ij->i", alpha, alpha)
        self._dot_ab = np.einsum("ij,ij->i", alpha, beta)
        self._dot_bb = np.einsum("ij,ij->i", beta, beta)
        self._bary_det = self._dot_aa * self._dot_bb - self._dot_ab**2

        self._build_adjacency()
        self._build_vertex_normals()
        self._build_vertex_faces()

        for arr in (
            self.face_areas,
            self.face_normals,
            self.face_centroids,
            self.vertex_normals,
            self.neighbor_faces,
            self.neighbor_counts,
        ):
            arr.setflags(write=False)

    # -- construction helpers -------------------------------------------

    def _build_adjacency(self):
        F = len(self.faces)
        edge_faces: dict[tuple[int, int], list[int]] = {}
        for f, (i, j, k) in enumerate(self.faces):
            for a, b in ((i, j), (j, k), (k, i)):
                key = (a, b) if a < b else (b, a)
                owners = edge_faces.setdefault(key, [])
                owners.append(f)
                if len(owners) > 2:
                    raise MeshError(
                        f"non-manifold edge {key} shared by more than two faces"
                    )
        neighbors: list[set[int]] = [set() for _ in range(F)]
        for owners in edge_faces.values():
            if len(owners) == 2:
                a, b = owners
                neighbors[a].add(b)
                neighbors[b].add(a)
        self.neighbor_faces = np.full((F, 3), -1, dtype=np.int64)
        self.neighbor_counts = np.zeros(F, dtype=np.int64)
        for f, ns in enumerate(neighbors):
            ordered = sorted(ns)
            self.neighbor_counts[f] = len(ordered)
            self.neighbor_faces[f, : len(ordered)] = ordered

    def _build_vertex_normals(self):
        # Area-weighted average of incident face normals, renormalised.
        acc = np.zeros_like(self.vertices)
        weighted = self.face_normals * self.face_areas[:, None]
        for c in range(3):
            np.add.at(acc, self.faces[:, c], weighted)
        norms = np.linalg.norm(acc, axis=1)
        if (norms < 1e-15).any():
            bad = int(np.argmin(norms))
            raise MeshError(
                f"vertex {bad} has no usable normal (isolated or folded geometry)"
            )
        self.vertex_normals = acc / norms[:, None]

    def _build_vertex_faces(self):
        incident: list[list[int]] = [[] for _ in range(len(self.vertices))]
        for f, tri in enumerate(self.faces):
            for v in tri:
                incident[v].append(f)
        self._vertex_faces = [np.array(sorted(fs), dtype=np.int64) for fs in incident]

    # -- basic queries ----------------------------------------------------

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def adjacency(self) -> list[frozenset[int]]:
        """Edge-neighbour sets, one frozenset per face."""
        return [
            frozenset(row[row >= 0].tolist()) for row in self.neighbor_faces
        ]

    def vertex_faces(self, vertex: int) -> np.ndarray:
        """Indices of faces incident to ``vertex`` (sorted)."""
        return self._vertex_faces[vertex]

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        """Centre (vertex centroid) and radius enclosing all vertices."""
        centre = self.vertices.mean(axis=0)
        radius = float(np.linalg.norm(self.vertices - centre, axis=1).max())
        return centre, radius

    def total_area(self) -> float:
        return float(self.face_areas.sum())


# -- file format -----------------------------------------------------------


def load_mesh(path) -> CorticalMesh:
    """Read a mesh from the plain-text format.

    The format is one header line ``G F`` followed by G vertex lines
    ``x y z`` (mm) and F face lines ``i j k`` (0-based vertex indices).
    Normals are always recomputed.
    """
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh]
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc}") from exc
    rows = [(num, ln) for num, ln in enumerate(lines, start=1) if ln]
    if not rows:
        raise MeshError(f"{path}: empty mesh file")

    def parse(line_no, text, count, kind, conv):
        parts = text.split()
        if len(parts) != count:
            raise MeshError(
                f"{path}:{line_no}: expected {count} {kind} fields, got {len(parts)}"
            )
        try:
            return [conv(p) for p in parts]
        except ValueError as exc:
            raise MeshError(f"{path}:{line_no}: {exc}") from exc

    header_no, header = rows[0]
    g, f = parse(header_no, header, 2, "header", int)
    if len(rows) != 1 + g + f:
        raise MeshError(
            f"{path}: header declares {g} vertices and {f} faces "
            f"but file has {len(rows) - 1} data lines"
        )
    verts = [parse(no, ln, 3, "vertex", float) for no, ln in rows[1 : 1 + g]]
    tris = [parse(no, ln, 3, "face", int) for no, ln in rows[1 + g :]]
    return CorticalMesh(np.array(verts), np.array(tris))


def save_mesh(path, mesh_or_vertices, faces=None) -> None:
    """Write a mesh in the plain-text format read by :func:`load_mesh`."""
    if faces is None:
        vertices = mesh_or_vertices.vertices
        faces = mesh_or_vertices.faces
    else:
        vertices = np.asarray(mesh_or_vertices)
    with open(path, "w") as fh:
        fh.write(f"{len(vertices)} {len(faces)}\n")
        for x, y, z in vertices:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
        for i, j, k in faces:
            fh.write(f"{int(i)} {int(j)} {int(k)}\n")


# -- reference solids --------------------------------------------------------


def icosahedron() -> tuple[np.ndarray, np.ndarray]:
    """Unit icosahedron (12 vertices, 20 faces), outward winding."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
            (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
            (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
            (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
            (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
            (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
        ],
        dtype=np.int64,
    )
    return verts, faces


def subdivide(vertices, faces) -> tuple[np.ndarray, np.ndarray]:
    """One 4-to-1 triangle subdivision with midpoints pushed to the unit sphere."""
    vertices = list(np.asarray(vertices, dtype=np.float64))
    cache: dict[tuple[int, int], int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            m = vertices[a] + vertices[b]
            m /= np.linalg.norm(m)
            cache[key] = len(vertices)
            vertices.append(m)
        return cache[key]

    out = []
    for i, j, k in faces:
        ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
        out.extend([(i, ij, ki), (j, jk, ij), (k, ki, jk), (ij, jk, ki)])
    return np.array(vertices), np.array(out, dtype=np.int64)


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Icosahedron refined ``subdivisions`` times onto the unit sphere."""
    verts, faces = icosahedron()
    for _ in range(subdivisions):
        verts, faces = subdivide(verts, faces)
    return verts, faces


# -- barycentric geometry ----------------------------------------------------


def point_from_coeffs(mesh: CorticalMesh, face: int, phi: float, varphi: float):
    """3D position of barycentric coefficients on a face.

    ``(0, 0)`` maps to corner g3, ``(1, 0)`` to g2, ``(0, 1)`` to g1.
    """
    i, j, k = mesh.faces[face]
    g1, g2, g3 = mesh.vertices[i], mesh.vertices[j], mesh.vertices[k]
    return g3 + phi * (g2 - g3) + varphi * (g1 - g3)


def surface_point_position(mesh: CorticalMesh, p: SurfacePoint) -> np.ndarray:
    return point_from_coeffs(mesh, p.face, p.phi, p.varphi)


def points_from_coeffs(mesh: CorticalMesh, faces, phis, varphis) -> np.ndarray:
    """Vectorised :func:`point_from_coeffs` for index/coefficient arrays."""
    tri = mesh.faces[faces]
    g1 = mesh.vertices[tri[:, 0]]
    g2 = mesh.vertices[tri[:, 1]]
    g3 = mesh.vertices[tri[:, 2]]
    return g3 + phis[:, None] * (g2 - g3) + varphis[:, None] * (g1 - g3)


def project_to_face(mesh: CorticalMesh, face: int, r) -> tuple[float, float, float]:
    """Barycentric coefficients of ``r`` orthogonally projected onto a face.

    Returns ``(phi, varphi, plane_distance)``; the coefficients are not
    clipped to the simplex.
    """
    i, j, k = mesh.faces[face]
    g1, g2, g3 = mesh.vertices[i], mesh.vertices[j], mesh.vertices[k]
    gamma = np.asarray(r, dtype=np.float64) - g3
    n = mesh.face_normals[face]
    dist = float(gamma @ n)
    gamma = gamma - dist * n
    alpha = g1 - g3
    beta = g2 - g3
    det = mesh._bary_det[face]
    if det <= 0.0:
        raise MeshError(f"degenerate triangle {face} in barycentric solve")
    ga = gamma @ alpha
    gb = gamma @ beta
    phi = (mesh._dot_aa[face] * gb - mesh._dot_ab[face] * ga) / det
    varphi = (mesh._dot_bb[face] * ga - mesh._dot_ab[face] * gb) / det
    return float(phi), float(varphi), abs(dist)


def barycentric_coeffs(
    mesh: CorticalMesh, face: int, r, max_plane_dist: float = PLANE_TOLERANCE
) -> tuple[float, float]:
    """Barycentric coefficients of a point on (or numerically near) a face.

    Points are orthogonally projected onto the face plane first; drift
    beyond ``max_plane_dist`` mm raises :class:`MeshError`.
    """
    phi, varphi, dist = project_to_face(mesh, face, r)
    if dist > max_plane_dist:
        raise MeshError(
            f"point is {dist:.3g} mm off the plane of face {face} "
            f"(tolerance {max_plane_dist:g})"
        )
    return phi, varphi


def nearest_face_for_vertex(mesh: CorticalMesh, vertex: int) -> int:
    """The incident face whose centroid is nearest the vertex.

    Ties are broken toward the lowest face index so seeded runs are
    reproducible.
    """
    incident = mesh.vertex_faces(vertex)
    if incident.size == 0:
        raise MeshError(f"vertex {vertex} has no incident face")
    d = np.linalg.norm(mesh.face_centroids[incident] - mesh.vertices[vertex], axis=1)
    # argmin returns the first minimum; incident is sorted ascending.
    return int(incident[np.argmin(d)])


def surface_point_for_vertex(mesh: CorticalMesh, vertex: int) -> SurfacePoint:
    """The vertex expressed as a SurfacePoint on its nearest incident face."""
    face = nearest_face_for_vertex(mesh, vertex)
    i, j, k = mesh.faces[face]
    if vertex == k:
        phi, varphi = 0.0, 0.0
    elif vertex == j:
        phi, varphi = 1.0, 0.0
    else:
        phi, varphi = 0.0, 1.0
    return SurfacePoint(face, phi, varphi)


def sample_simplex(rng, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform samples on the barycentric simplex, by square folding."""
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return u, v


def sample_uniform_surface_points(mesh: CorticalMesh, rng, n: int):
    """Area-uniform samples over the whole surface.

    Returns ``(faces, phis, varphis)`` arrays of length ``n``.
    """
    cum = np.cumsum(mesh.face_areas)
    faces = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    faces = np.minimum(faces, mesh.num_faces - 1).astype(np.int64)
    phis, varphis = sample_simplex(rng, n)
    return faces, phis, varphis


def sample_uniform_surface_point(mesh: CorticalMesh, rng) -> SurfacePoint:
    faces, phis, varphis = sample_uniform_surface_points(mesh, rng, 1)
    return SurfacePoint(int(faces[0]), float(phis[0]), float(varphis[0]))
