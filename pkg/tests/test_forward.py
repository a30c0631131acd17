import numpy as np
import pytest

from cortloc.dynamics import DipoleState, JointState
from cortloc.errors import DataError
from cortloc.forward import (
    LeadField,
    Measurement,
    Scenario,
    SensorArray,
    dipole_field,
    fit_sphere,
    generate_desk_mesh,
    generate_sensor_cap,
    load_lead_field,
    pick_separated_faces,
    predict_measurement,
    save_lead_field,
    simulate_scenario,
    synth_lead_field,
    unit_response,
)
from cortloc.mesh import CorticalMesh, SurfacePoint, icosphere


@pytest.fixture(scope="module")
def small_head():
    mesh = generate_desk_mesh(subdivisions=2)
    sensors = generate_sensor_cap(mesh, count=64)
    return mesh, sensors, synth_lead_field(mesh, sensors)


def single_face_mesh():
    verts = np.array([[0.0, 0, 0], [10.0, 0, 0], [0.0, 8.0, 0]])
    return CorticalMesh(verts, [[0, 1, 2]])


def scalar_sphere_field(r0, q, pos, ori, centre):
    """Independent scalar transcription of the conducting-sphere field."""
    r0 = np.asarray(r0, float) - centre
    r = np.asarray(pos, float) - centre
    rm = float(np.linalg.norm(r))
    avec = r - r0
    a = float(np.linalg.norm(avec))
    big_f = a * (rm * a + rm**2 - float(r0 @ r))
    grad_f = (a**2 / rm + avec @ r / a + 2 * a + 2 * rm) * r - (
        a + 2 * rm + avec @ r / a
    ) * r0
    qxr0 = np.cross(q, r0)
    b = (big_f * qxr0 - float(qxr0 @ r) * grad_f) / big_f**2
    return float(b @ ori)


# -- analytic field ------------------------------------------------------------


def test_radial_dipole_is_null():
    centre = np.zeros(3)
    rng = np.random.default_rng(2)
    dirs = rng.normal(size=(16, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    sensors = SensorArray(centre + 90.0 * dirs, dirs)
    top = np.array([0.0, 0.0, 60.0])
    radial = dipole_field(top[None, :], np.array([[0.0, 0.0, 1.0]]), sensors, centre)
    tangential = dipole_field(top[None, :], np.array([[1.0, 0.0, 0.0]]), sensors, centre)
    assert np.abs(radial).max() < 1e-10 * np.abs(tangential).max()


def test_field_matches_primary_radial_component():
    # For radial sensors the conducting-sphere field equals the radial part
    # of the bare current-dipole field: an independent physics identity.
    centre = np.array([3.0, -1.0, 2.0])
    rng = np.random.default_rng(4)
    dirs = rng.normal(size=(12, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    sensors = SensorArray(centre + 120.0 * dirs, dirs)
    r0 = centre + np.array([25.0, -10.0, 30.0])
    q = np.array([0.4, 0.9, -0.2])
    got = dipole_field(r0[None, :], q[None, :], sensors, centre)[0]
    a_vec = sensors.positions - r0
    expected = np.einsum(
        "ij,ij->i", np.cross(q, a_vec), dirs
    ) / np.linalg.norm(a_vec, axis=1) ** 3
    np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_lead_field_columns_match_scalar_evaluation(small_head):
    mesh, sensors, lf = small_head
    centre, _ = fit_sphere(mesh)
    rng = np.random.default_rng(9)
    for v in rng.integers(0, mesh.num_vertices, size=5):
        v = int(v)
        for m in (0, 17, 45):
            want = scalar_sphere_field(
                mesh.vertices[v],
                mesh.vertex_normals[v],
                sensors.positions[m],
                sensors.orientations[m],
                centre,
            )
            assert lf.matrix[m, v] == pytest.approx(want, rel=1e-10)


def test_sensor_inside_sphere_rejected(small_head):
    mesh, _, _ = small_head
    centre, radius = mesh.bounding_sphere()
    inside = SensorArray(centre[None, :] + [[0.0, 0.0, radius]], [[0.0, 0.0, 1.0]])
    with pytest.raises(DataError, match="inside the fitted sphere"):
        synth_lead_field(mesh, inside)


def test_lead_field_validation():
    with pytest.raises(DataError, match="identically zero"):
        LeadField(np.array([[1.0, 0.0], [2.0, 0.0]]))
    with pytest.raises(DataError, match="non-finite"):
        LeadField(np.array([[1.0, np.nan]]))


# -- interpolation --------------------------------------------------------------


def test_corner_gives_exact_column():
    # One flat face: vertex normals equal the face normal, cos(theta) = 1.
    mesh = single_face_mesh()
    rng = np.random.default_rng(1)
    lf = LeadField(rng.normal(size=(6, 3)))
    corner_g3 = unit_response(lf, mesh, SurfacePoint(0, 0.0, 0.0))
    np.testing.assert_allclose(corner_g3, lf.matrix[:, 2], atol=1e-14)
    corner_g2 = unit_response(lf, mesh, SurfacePoint(0, 1.0, 0.0))
    np.testing.assert_allclose(corner_g2, lf.matrix[:, 1], atol=1e-14)
    corner_g1 = unit_response(lf, mesh, SurfacePoint(0, 0.0, 1.0))
    np.testing.assert_allclose(corner_g1, lf.matrix[:, 0], atol=1e-14)


def test_centroid_is_mean_of_mapped_columns():
    mesh = single_face_mesh()
    rng = np.random.default_rng(12)
    lf = LeadField(rng.normal(size=(5, 3)))
    got = unit_response(lf, mesh, SurfacePoint(0, 1 / 3, 1 / 3))
    np.testing.assert_allclose(got, lf.matrix.mean(axis=1), atol=1e-12)


def test_affine_field_interpolated_exactly():
    # Columns are an affine function of vertex position; barycentric
    # interpolation must reproduce the function anywhere on the face.
    mesh = single_face_mesh()
    rng = np.random.default_rng(3)
    A = rng.normal(size=(4, 3))
    b = rng.normal(size=4)
    lf = LeadField(A @ mesh.vertices.T + b[:, None])
    for u, v in [(0.2, 0.3), (0.7, 0.1), (0.0, 0.9), (1 / 3, 1 / 3)]:
        p = SurfacePoint(0, u, v)
        point = mesh.vertices[2] + u * (
            mesh.vertices[1] - mesh.vertices[2]
        ) + v * (mesh.vertices[0] - mesh.vertices[2])
        want = A @ point + b
        np.testing.assert_allclose(unit_response(lf, mesh, p), want, atol=1e-10)


def test_edge_continuity_for_coplanar_faces():
    # Two coplanar faces sharing an edge: identical cos(theta) factors, so
    # the two parameterisations of an edge point must agree.
    verts = np.array(
        [[0.0, 0, 0], [10.0, 0, 0], [0.0, 8, 0], [10.0, 8, 0]], dtype=float
    )
    mesh = CorticalMesh(verts, [[0, 1, 2], [1, 3, 2]])
    rng = np.random.default_rng(8)
    lf = LeadField(rng.normal(size=(7, 4)))
    # Edge 1-2 is shared.  On face 0 (corners g1=0, g2=1, g3=2) the point
    # t*v1 + (1-t)*v2 has phi=t, varphi=0; on face 1 (g1=1, g2=3, g3=2) it
    # has phi=0, varphi=t.
    for t in (0.0, 0.25, 0.6, 1.0):
        r0 = unit_response(lf, mesh, SurfacePoint(0, t, 0.0))
        r1 = unit_response(lf, mesh, SurfacePoint(1, 0.0, t))
        assert np.abs(r0 - r1).max() < 1e-8


def test_response_stats_match_dense(small_head):
    mesh, _, lf = small_head
    interp = lf.interpolator(mesh)
    rng = np.random.default_rng(5)
    n = 200
    faces = rng.integers(0, mesh.num_faces, size=n)
    u = rng.random(n) * 0.5
    v = rng.random(n) * 0.5
    base = rng.normal(size=lf.num_sensors)
    dense = interp.response(faces, u, v)
    dots, norm2 = interp.response_stats(faces, u, v, base)
    np.testing.assert_allclose(dots, dense @ base, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(norm2, (dense**2).sum(axis=1), rtol=1e-9)


# -- measurement prediction -----------------------------------------------------


def test_empty_state_predicts_zero(small_head):
    mesh, _, lf = small_head
    out = predict_measurement(lf, mesh, JointState([]))
    assert out.shape == (lf.num_sensors,)
    assert (out == 0).all()


def test_prediction_linear_in_amplitude(small_head):
    mesh, _, lf = small_head
    p = SurfacePoint(37, 0.2, 0.4)
    one = predict_measurement(lf, mesh, JointState([DipoleState(p, 1.0)]))
    two = predict_measurement(lf, mesh, JointState([DipoleState(p, 2.0)]))
    np.testing.assert_allclose(two, 2.0 * one, rtol=1e-12)


def test_prediction_superposition(small_head):
    mesh, _, lf = small_head
    d1 = DipoleState(SurfacePoint(10, 0.1, 0.2), 1.3)
    d2 = DipoleState(SurfacePoint(200, 0.5, 0.25), -0.7)
    both = predict_measurement(lf, mesh, JointState([d1, d2]))
    sep = predict_measurement(lf, mesh, JointState([d1])) + predict_measurement(
        lf, mesh, JointState([d2])
    )
    np.testing.assert_allclose(both, sep, rtol=1e-12)


# -- scenario simulation ----------------------------------------------------------


def make_scenario(mesh, sensors, k=50, snr=10.0, sigma=None, seed=77):
    faces = pick_separated_faces(mesh, 3, seed=seed)
    script = [
        JointState(
            [DipoleState(SurfacePoint(f, 1 / 3, 1 / 3), 1.0) for f in faces], k_i
        )
        for k_i in range(k)
    ]
    return Scenario(mesh, sensors, script, snr=snr, sigma=sigma, seed=seed)


def test_empirical_snr_close_to_target(small_head):
    mesh, sensors, lf = small_head
    scenario = make_scenario(mesh, sensors, k=50, snr=10.0)
    run = simulate_scenario(scenario, lf)
    signal = np.stack(
        [predict_measurement(lf, mesh, s) for s in scenario.script]
    )
    noise = np.stack([m.values for m in run.measurements]) - signal
    snr = float((signal**2).mean() / (noise**2).mean())
    assert abs(snr - 10.0) / 10.0 < 0.15


def test_zero_sigma_is_noiseless(small_head):
    mesh, sensors, lf = small_head
    scenario = make_scenario(mesh, sensors, k=5, sigma=0.0)
    run = simulate_scenario(scenario, lf)
    for m, truth in run:
        np.testing.assert_array_equal(
            m.values, predict_measurement(lf, mesh, truth)
        )


def test_same_seed_bit_identical(small_head):
    mesh, sensors, lf = small_head
    a = simulate_scenario(make_scenario(mesh, sensors, k=8), lf)
    b = simulate_scenario(make_scenario(mesh, sensors, k=8), lf)
    for ma, mb in zip(a.measurements, b.measurements):
        np.testing.assert_array_equal(ma.values, mb.values)
    assert a.sigma == b.sigma


def test_scenario_validation(small_head):
    mesh, sensors, _ = small_head
    with pytest.raises(DataError, match="horizon"):
        Scenario(mesh, sensors, [], snr=10.0)
    bad = [JointState([DipoleState(SurfacePoint(0, 0.9, 0.9), 1.0)], 0)]
    with pytest.raises(DataError, match="invalid scripted dipole"):
        Scenario(mesh, sensors, bad, snr=10.0)


def test_measurement_rejects_nan():
    with pytest.raises(DataError, match="non-finite"):
        Measurement(np.array([1.0, np.nan]), 3)


# -- generators -------------------------------------------------------------------


def test_desk_mesh_matches_generator_parameters():
    for sub in (2, 3):
        mesh = generate_desk_mesh(subdivisions=sub)
        assert mesh.num_vertices == 2 + 10 * 4**sub
        assert mesh.num_faces == 20 * 4**sub
        width = mesh.vertices[:, 0].max() - mesh.vertices[:, 0].min()
        assert width == pytest.approx(136.0, rel=1e-9)


def test_desk_mesh_default_size():
    mesh = generate_desk_mesh()
    assert mesh.num_vertices == 2562
    assert mesh.num_faces == 5120


def test_sensor_cap_geometry(small_head):
    mesh, sensors, _ = small_head
    assert len(sensors) == 64
    centre, radius = mesh.bounding_sphere()
    dist = np.linalg.norm(sensors.positions - centre, axis=1)
    np.testing.assert_allclose(dist, radius + 20.0, rtol=1e-12)
    assert (dist > radius).all()


def test_pick_separated_faces_spread():
    mesh = generate_desk_mesh(subdivisions=2)
    faces = pick_separated_faces(mesh, 3, seed=5)
    assert len(set(faces)) == 3
    pts = mesh.face_centroids[faces]
    d01 = np.linalg.norm(pts[0] - pts[1])
    d02 = np.linalg.norm(pts[0] - pts[2])
    d12 = np.linalg.norm(pts[1] - pts[2])
    assert min(d01, d02, d12) > 40.0


# -- lead-field cache ---------------------------------------------------------------


def test_lead_field_roundtrip(tmp_path, small_head):
    _, _, lf = small_head
    path = tmp_path / "leadfield.txt"
    save_lead_field(path, lf)
    back = load_lead_field(path)
    np.testing.assert_array_equal(back.matrix, lf.matrix)


def test_lead_field_load_errors(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("2 3\n1 2 3\n")
    with pytest.raises(DataError, match="shape"):
        load_lead_field(path)
    with pytest.raises(DataError, match="cannot read"):
        load_lead_field(tmp_path / "missing.txt")
