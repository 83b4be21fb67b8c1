"""Isosurface extraction, mesh topology validation, and QEM simplification.

marching_cubes uses the ambiguity-aware extended-table variant (crack-free by
construction) and interprets grid values as samples at voxel centers, with
values above the iso level counting as inside; faces are oriented outward.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, asdict

import numpy as np
from skimage import measure

from .geom_core import TriangleMesh
from .voxel import VoxelGrid


def marching_cubes(grid: VoxelGrid, iso: float) -> TriangleMesh:
    """Extract the iso-surface of a real-valued grid as a triangle mesh.

    An iso level outside the value range yields an empty mesh; NaN values are
    an error. Vertices on shared cell edges are welded exactly (index-keyed).
    """
    vals = grid.values
    if np.any(np.isnan(vals)):
        raise ValueError("marching_cubes: NaN values in grid")
    vmin, vmax = float(vals.min()), float(vals.max())
    if not (vmin < iso < vmax):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(vals, level=iso,
                                                gradient_direction="ascent")
    cell = grid.cell_size()
    world = grid.bbox_min + (verts.astype(np.float64) + 0.5) * cell
    return TriangleMesh(world, faces.astype(np.int64))


@dataclass(frozen=True)
class TopologyReport:
    n_vertices: int
    n_edges: int
    n_faces: int
    euler_characteristic: int
    genus: int | None
    watertight: bool
    manifold: bool
    component_count: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def topology_report(mesh: TriangleMesh) -> TopologyReport:
    """Count elements, check watertightness (every edge borders exactly two
    faces) and manifoldness (single face fan per vertex), and derive genus
    when defined: genus = (2*components - euler) / 2."""
    nv, nf = mesh.n_vertices, mesh.n_faces
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(mesh.faces):
        for e in ((a, b), (b, c), (c, a)):
            key = (int(min(e)), int(max(e)))
            edge_faces.setdefault(key, []).append(fi)
    ne = len(edge_faces)
    euler = nv - ne + nf

    counts = [len(v) for v in edge_faces.values()]
    watertight = nf > 0 and all(c == 2 for c in counts)
    edges_ok = all(c <= 2 for c in counts)

    # vertex fans: faces incident to a vertex must form one component under
    # the share-an-edge-at-that-vertex relation
    manifold = edges_ok and nf > 0
    if manifold:
        vert_faces: dict[int, list[int]] = {}
        for fi, f in enumerate(mesh.faces):
            for v in f:
                vert_faces.setdefault(int(v), []).append(fi)
        for v, flist in vert_faces.items():
            if len(flist) == 1:
                continue
            adj: dict[int, list[int]] = {fi: [] for fi in flist}
            for (a, b), fis in edge_faces.items():
                if v in (a, b) and len(fis) == 2:
                    f0, f1 = fis
                    if f0 in adj and f1 in adj:
                        adj[f0].append(f1)
                        adj[f1].append(f0)
            seen = {flist[0]}
            stack = [flist[0]]
            while stack:
                cur = stack.pop()
                for nxt in adj[cur]:
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
            if len(seen) != len(flist):
                manifold = False
                break

    components = _component_count(nv, edge_faces.keys())
    genus = None
    if watertight and manifold:
        genus = (2 * components - euler) // 2
    return TopologyReport(nv, ne, nf, euler, genus, watertight, manifold, components)


def _component_count(n_vertices: int, edges) -> int:
    parent = list(range(n_vertices))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    return len({find(i) for i in range(n_vertices)})


# ---------------------------------------------------------------------------
# QEM simplification


def _face_quadric(p0, p1, p2) -> np.ndarray:
    n = np.cross(p1 - p0, p2 - p0)
    ln = np.linalg.norm(n)
    if ln <= 0:
        return np.zeros((4, 4))
    n = n / ln
    d = -float(n @ p0)
    plane = np.array([n[0], n[1], n[2], d])
    return np.outer(plane, plane)


def _optimal_placement(Q: np.ndarray, pu: np.ndarray, pv: np.ndarray):
    """Quadric-minimizing position, falling back to the best of endpoints and
    midpoint when the 3x3 system is singular."""
    A = Q[:3, :3]
    b = -Q[:3, 3]
    if abs(np.linalg.det(A)) > 1e-12:
        pos = np.linalg.solve(A, b)
        return pos, _quadric_cost(Q, pos)
    best_pos, best_cost = None, np.inf
    for cand in (pu, pv, 0.5 * (pu + pv)):
        c = _quadric_cost(Q, cand)
        if c < best_cost:
            best_pos, best_cost = cand, c
    return best_pos, best_cost


def _quadric_cost(Q: np.ndarray, pos: np.ndarray) -> float:
    v = np.array([pos[0], pos[1], pos[2], 1.0])
    return float(v @ Q @ v)


class _CollapseMesh:
    """Mutable edge-collapse state: incidence sets, quadrics, validity checks."""

    def __init__(self, mesh: TriangleMesh):
        self.pos = mesh.vertices.copy()
        self.faces = [tuple(int(v) for v in f) for f in mesh.faces]
        self.face_alive = [True] * len(self.faces)
        self.vert_faces = [set() for _ in range(len(self.pos))]
        for fi, f in enumerate(self.faces):
            for v in f:
                self.vert_faces[v].add(fi)
        self.quadrics = np.zeros((len(self.pos), 4, 4))
        for f in self.faces:
            q = _face_quadric(*(self.pos[v] for v in f))
            for v in f:
                self.quadrics[v] += q
        self.version = np.zeros(len(self.pos), dtype=np.int64)
        self.n_alive_faces = len(self.faces)

    def neighbors(self, u: int) -> set[int]:
        out = set()
        for fi in self.vert_faces[u]:
            out.update(self.faces[fi])
        out.discard(u)
        return out

    def edge_cost(self, u: int, v: int):
        Q = self.quadrics[u] + self.quadrics[v]
        pos, cost = _optimal_placement(Q, self.pos[u], self.pos[v])
        return cost, pos

    def collapse_is_legal(self, u: int, v: int, new_pos: np.ndarray) -> bool:
        shared = self.vert_faces[u] & self.vert_faces[v]
        if len(shared) != 2:
            return False  # boundary or non-manifold configuration
        # link condition: common neighbors must be exactly the two apexes
        apexes = set()
        for fi in shared:
            apexes.update(w for w in self.faces[fi] if w not in (u, v))
        if self.neighbors(u) & self.neighbors(v) != apexes or len(apexes) != 2:
            return False
        # survivors must not flip or degenerate
        for w, other in ((u, v), (v, u)):
            for fi in self.vert_faces[w]:
                if fi in shared:
                    continue
                f = self.faces[fi]
                if other in f:
                    return False  # would duplicate a shared face
                before = [self.pos[x] for x in f]
                after = [new_pos if x == w else self.pos[x] for x in f]
                n0 = np.cross(before[1] - before[0], before[2] - before[0])
                n1 = np.cross(after[1] - after[0], after[2] - after[0])
                l0, l1 = np.linalg.norm(n0), np.linalg.norm(n1)
                if l1 <= 1e-14 or (l0 > 1e-14 and n0 @ n1 <= 0):
                    return False
        return True

    def collapse(self, u: int, v: int, new_pos: np.ndarray):
        """Collapse v into u placed at new_pos. Caller checked legality."""
        shared = self.vert_faces[u] & self.vert_faces[v]
        for fi in shared:
            self.face_alive[fi] = False
            for w in self.faces[fi]:
                self.vert_faces[w].discard(fi)
            self.n_alive_faces -= 1
        for fi in list(self.vert_faces[v]):
            f = self.faces[fi]
            self.faces[fi] = tuple(u if x == v else x for x in f)
            self.vert_faces[v].discard(fi)
            self.vert_faces[u].add(fi)
        self.pos[u] = new_pos
        self.quadrics[u] = self.quadrics[u] + self.quadrics[v]
        self.version[u] += 1
        self.version[v] += 1

    def to_mesh(self) -> TriangleMesh:
        used = sorted({v for fi, f in enumerate(self.faces) if self.face_alive[fi] for v in f})
        remap = {v: i for i, v in enumerate(used)}
        verts = self.pos[used]
        faces = np.array([[remap[v] for v in f]
                          for fi, f in enumerate(self.faces) if self.face_alive[fi]],
                         dtype=np.int64).reshape(-1, 3)
        return TriangleMesh(verts, faces)


def qem_simplify(mesh: TriangleMesh, target_faces: int, return_costs: bool = False):
    """Iterative minimal-cost edge collapse down to `target_faces` faces.

    Collapses that would flip a surviving face normal or break manifoldness
    are rejected; stops early when no legal collapse remains. Requires a
    watertight manifold input.
    """
    if target_faces < 4:
        raise ValueError("target_faces must be >= 4")
    report = topology_report(mesh)
    if not (report.watertight and report.manifold):
        raise ValueError("qem_simplify requires a watertight manifold mesh")
    if mesh.n_faces <= target_faces:
        return (mesh, []) if return_costs else mesh

    state = _CollapseMesh(mesh)
    heap = []
    seq = 0  # tiebreaker so heap never compares position arrays

    def push(u, v):
        nonlocal seq
        cost, pos = state.edge_cost(u, v)
        heapq.heappush(heap, (cost, seq, u, v,
                              int(state.version[u]), int(state.version[v]), pos))
        seq += 1

    for a, b in mesh.edges():
        push(int(a), int(b))
    executed_costs = []
    while state.n_alive_faces > target_faces and heap:
        cost, _, u, v, ver_u, ver_v, pos = heapq.heappop(heap)
        if state.version[u] != ver_u or state.version[v] != ver_v:
            continue  # stale: fresh entries were pushed at collapse time
        if not state.collapse_is_legal(u, v, pos):
            continue
        state.collapse(u, v, pos)
        executed_costs.append(cost)
        for w in state.neighbors(u):
            push(u, w)
    out = state.to_mesh()
    return (out, executed_costs) if return_costs else out
