import numpy as np
import pytest

from lasr.errors import DegenerateGeometryError, ParameterError
from lasr.mesh import Mesh, euler_characteristic, is_edge_manifold, make_icosphere, self_intersections
from lasr.remesh import decimate, iso_surface, remesh, transfer_colors, winding_numbers


def _check_clean(m: Mesh, genus0=True):
    m.validate()
    assert is_edge_manifold(m)
    if genus0:
        assert euler_characteristic(m) == 2
    assert len(self_intersections(m)) == 0


def test_winding_numbers_inside_outside():
    m = make_icosphere(2)
    w = winding_numbers(np.array([[0.0, 0, 0], [0.3, -0.2, 0.1], [2.0, 0, 0], [0, 0, -1.5]]), m.vertices, m.faces)
    np.testing.assert_allclose(w, [1, 1, 0, 0], atol=1e-9)


@pytest.fixture(scope="module")
def sphere_remesh():
    src = make_icosphere(3)
    src.colors = np.clip(0.5 + 0.4 * src.vertices, 0, 1)
    return src, remesh(src, 642)


def test_icosphere_remesh_close_to_sphere(sphere_remesh):
    _, out = sphere_remesh
    _check_clean(out)
    r = np.linalg.norm(out.vertices, axis=1)
    assert np.abs(r - 1).max() < 0.05
    assert abs(out.num_vertices - 642) <= 0.1 * 642


def test_colours_survive(sphere_remesh):
    src, out = sphere_remesh
    assert out.colors.min() >= 0 and out.colors.max() <= 1
    expected = np.clip(0.5 + 0.4 * out.vertices / np.linalg.norm(out.vertices, axis=1, keepdims=True), 0, 1)
    assert np.abs(out.colors - expected).max() < 0.03


@pytest.mark.parametrize("target", [300, 1500])
def test_vertex_targets(target):
    out = remesh(make_icosphere(3), target)
    _check_clean(out)
    assert abs(out.num_vertices - target) <= 0.1 * target


def test_bowtie_self_intersecting_input():
    m = make_icosphere(3)
    v = m.vertices.copy()
    cap = v[:, 0] > 0.55
    # drag a shrunken cap through the far side so its skirt pierces the body
    v[cap, 0] -= 1.8
    v[cap, 1:] *= 0.5
    bad = Mesh(v, m.faces)
    assert len(self_intersections(bad)) > 0
    out = remesh(bad, 800)
    # the pierced skirt encloses a handle, so only manifoldness is required here
    _check_clean(out, genus0=False)


def test_decimate_keeps_topology():
    src = make_icosphere(4)
    v, f = decimate(src.vertices, src.faces, 500)
    out = Mesh(v, f)
    assert abs(len(v) - 500) <= 50
    assert is_edge_manifold(out) and euler_characteristic(out) == 2


def test_transfer_colors_exact_on_vertices():
    src = make_icosphere(2)
    src.colors = np.random.default_rng(0).uniform(size=src.vertices.shape)
    np.testing.assert_allclose(transfer_colors(src.vertices, src), src.colors, atol=1e-9)


def test_empty_occupancy_and_bad_input():
    flat = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), [[0, 1, 2]])
    with pytest.raises(DegenerateGeometryError):
        iso_surface(flat, 32)
    with pytest.raises(ParameterError):
        remesh(make_icosphere(1), 2)
    inf = make_icosphere(1)
    inf.vertices[0] = np.inf
    with pytest.raises(ParameterError):
        remesh(inf, 100)
