import numpy as np
import pytest

from skelmesh.geom_core import TriangleMesh, metro, sample_surface
from skelmesh.meshing import marching_cubes, qem_simplify, topology_report
from skelmesh.voxel import VoxelGrid


def field_grid(fn, n=48, extent=1.0):
    # fields sampled at voxel centers, matching the module convention
    cs = 2 * extent / n
    ax = np.linspace(-extent + cs / 2, extent - cs / 2, n)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return VoxelGrid(fn(X, Y, Z), [-extent] * 3, [extent] * 3)


def sphere_field(r=0.7):
    return lambda X, Y, Z: r - np.sqrt(X ** 2 + Y ** 2 + Z ** 2)


def torus_field(R=0.5, r=0.2, cx=0.0):
    return lambda X, Y, Z: r - np.sqrt((np.sqrt((X - cx) ** 2 + Y ** 2) - R) ** 2 + Z ** 2)


def genus2_field():
    t1 = torus_field(R=0.35, r=0.14, cx=-0.38)
    t2 = torus_field(R=0.35, r=0.14, cx=0.38)
    return lambda X, Y, Z: np.maximum(t1(X, Y, Z), t2(X, Y, Z))


def octahedron():
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    f = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
                  [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    return TriangleMesh(v, f)


def icosphere(subdiv=3):
    # icosahedron + loop of midpoint subdivisions, projected to the unit sphere
    phi = (1 + np.sqrt(5)) / 2
    v = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                  [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                  [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]], float)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
         (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
         (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
         (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [tuple(p) for p in v]
    for _ in range(subdiv):
        cache = {}
        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                p = (np.array(verts[a]) + np.array(verts[b])) / 2
                p /= np.linalg.norm(p)
                verts.append(tuple(p))
                cache[key] = len(verts) - 1
            return cache[key]
        nf = []
        for a, b, c in f:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nf += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = nf
    return TriangleMesh(np.array(verts), np.array(f))


class TestMarchingCubes:
    def test_uniform_grid_empty(self):
        g = VoxelGrid(np.zeros((8, 8, 8)), [-1] * 3, [1] * 3)
        m = marching_cubes(g, 0.5)
        assert m.is_empty()

    def test_sphere_topology(self):
        m = marching_cubes(field_grid(sphere_field(), 32), 0.0)
        rep = topology_report(m)
        assert rep.watertight and rep.manifold
        assert rep.euler_characteristic == 2
        assert rep.genus == 0

    def test_torus_topology(self):
        m = marching_cubes(field_grid(torus_field(), 48), 0.0)
        rep = topology_report(m)
        assert rep.watertight and rep.manifold
        assert rep.euler_characteristic == 0
        assert rep.genus == 1

    def test_genus2_topology(self):
        m = marching_cubes(field_grid(genus2_field(), 48), 0.0)
        rep = topology_report(m)
        assert rep.watertight and rep.manifold
        assert rep.euler_characteristic == -2
        assert rep.genus == 2

    def test_outward_orientation(self):
        m = marching_cubes(field_grid(sphere_field(), 32), 0.0)
        v = m.vertices[m.faces]
        signed_vol = np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6
        assert signed_vol > 0
        assert signed_vol == pytest.approx(4 / 3 * np.pi * 0.7 ** 3, rel=0.02)

    def test_vertex_positions_on_isosurface(self):
        m = marching_cubes(field_grid(sphere_field(), 48), 0.0)
        r = np.linalg.norm(m.vertices, axis=1)
        assert np.abs(r - 0.7).max() < 0.01  # linear interpolation accuracy

    def test_no_duplicate_vertices(self):
        m = marching_cubes(field_grid(torus_field(), 32), 0.0)
        uniq = np.unique(np.round(m.vertices, 12), axis=0)
        assert len(uniq) == m.n_vertices

    def test_nan_error(self):
        v = np.zeros((4, 4, 4))
        v[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            marching_cubes(VoxelGrid(v, [-1] * 3, [1] * 3), 0.5)

    def test_iso_outside_range_empty(self):
        g = field_grid(sphere_field(), 16)
        assert marching_cubes(g, 99.0).is_empty()

    def test_deterministic(self):
        g = field_grid(torus_field(), 32)
        a = marching_cubes(g, 0.0)
        b = marching_cubes(g, 0.0)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.faces, b.faces)


class TestTopologyReport:
    def test_octahedron(self):
        rep = topology_report(octahedron())
        assert (rep.n_vertices, rep.n_edges, rep.n_faces) == (6, 12, 8)
        assert rep.euler_characteristic == 2
        assert rep.genus == 0
        assert rep.watertight and rep.manifold
        assert rep.component_count == 1

    def test_single_triangle_not_watertight(self):
        m = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
        rep = topology_report(m)
        assert not rep.watertight
        assert rep.genus is None

    def test_torus_quad_grid(self):
        # n x m toroidal vertex grid, each quad split into two triangles
        n, m = 12, 8
        idx = lambda i, j: (i % n) * m + (j % m)
        verts = []
        for i in range(n):
            for j in range(m):
                th, ph = 2 * np.pi * i / n, 2 * np.pi * j / m
                verts.append([(1 + 0.3 * np.cos(ph)) * np.cos(th),
                              (1 + 0.3 * np.cos(ph)) * np.sin(th),
                              0.3 * np.sin(ph)])
        faces = []
        for i in range(n):
            for j in range(m):
                faces.append([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)])
                faces.append([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)])
        rep = topology_report(TriangleMesh(np.array(verts), np.array(faces)))
        assert rep.euler_characteristic == 0
        assert rep.genus == 1
        assert rep.watertight and rep.manifold

    def test_two_components(self):
        a = octahedron()
        b = TriangleMesh(a.vertices + 5.0, a.faces.copy())
        both = TriangleMesh(np.vstack([a.vertices, b.vertices]),
                            np.vstack([a.faces, b.faces + 6]))
        rep = topology_report(both)
        assert rep.component_count == 2
        assert rep.euler_characteristic == 4
        assert rep.genus == 0  # (2*2 - 4) / 2

    def test_nonmanifold_bowtie(self):
        # two triangles sharing only a vertex
        v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], float)
        f = np.array([[0, 1, 2], [0, 3, 4]])
        rep = topology_report(TriangleMesh(v, f))
        assert not rep.manifold

    def test_json(self):
        import json
        rep = topology_report(octahedron())
        d = json.loads(rep.to_json())
        assert d["genus"] == 0 and d["watertight"] is True


class TestQemSimplify:
    def test_icosphere_quarter(self):
        m = icosphere(3)  # 1280 faces
        assert m.n_faces == 1280
        s = qem_simplify(m, 320)
        assert s.n_faces <= 320
        rep = topology_report(s)
        assert rep.watertight and rep.manifold
        assert rep.genus == 0
        # sampled Hausdorff has a max-statistic floor ~sqrt(ln(n)*A/(pi*n)),
        # so n must be large for the 1%-of-diagonal bound to be measurable
        assert metro(m, s, 150000, seed=0) < 0.01 * m.bbox_diagonal()

    def test_already_at_target(self):
        m = octahedron()
        out = qem_simplify(m, 8)
        assert out is m

    def test_flat_square_near_zero_error(self):
        # densely triangulated planar square collapses with ~zero quadric cost
        n = 10
        xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
        verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(n * n)])
        faces = []
        for i in range(n - 1):
            for j in range(n - 1):
                a = i * n + j
                faces.append([a, a + n, a + n + 1])
                faces.append([a, a + n + 1, a + 1])
        # close it into a (degenerate-free) watertight pillow by duplicating
        # the sheet slightly below and stitching the rim
        top = TriangleMesh(verts, np.array(faces))
        bot_verts = verts.copy()
        bot_verts[:, 2] = -0.2
        nb = len(verts)
        bot_faces = np.array(faces)[:, ::-1] + nb
        rim = []
        border = ([i * n + 0 for i in range(n)] +
                  [(n - 1) * n + j for j in range(1, n)] +
                  [i * n + (n - 1) for i in range(n - 2, -1, -1)] +
                  [0 * n + j for j in range(n - 2, 0, -1)])
        for a, b in zip(border, border[1:] + border[:1]):
            rim.append([a, b, b + nb])
            rim.append([a, b + nb, a + nb])
        pillow = TriangleMesh(np.vstack([verts, bot_verts]),
                              np.vstack([top.faces, bot_faces, np.array(rim)]))
        rep = topology_report(pillow)
        assert rep.watertight and rep.manifold and rep.genus == 0
        out, costs = qem_simplify(pillow, 40, return_costs=True)
        # collapses inside the flat sheets are exactly coplanar
        assert min(costs) < 1e-10

    def test_genus_preserved_on_torus(self):
        from skelmesh.meshing import marching_cubes
        m = marching_cubes(field_grid(torus_field(), 40), 0.0)
        s = qem_simplify(m, m.n_faces // 4)
        rep = topology_report(s)
        assert rep.genus == 1
        assert rep.watertight and rep.manifold

    def test_cost_sequence_nondecreasing(self):
        m = icosphere(2)
        _, costs = qem_simplify(m, 80, return_costs=True)
        c = np.array(costs)
        assert np.all(np.diff(c) >= -1e-9)

    def test_nonmanifold_rejected(self):
        m = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
        with pytest.raises(ValueError):
            qem_simplify(m, 4)

    def test_target_too_small(self):
        with pytest.raises(ValueError):
            qem_simplify(octahedron(), 2)
