"""Geometric core: labeled point clouds, triangle meshes, nearest neighbors,
and the point-set / mesh metrics used across the pipeline (Chamfer, Laplacian
smoothness, EMD, Metro), plus PCA-based skeleton point labeling.

All functions are pure: inputs are never mutated, so everything here is safe
to call concurrently.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

CURVE = 0
SURFACE = 1

_LABEL_CHAR = {CURVE: "C", SURFACE: "S"}
_CHAR_LABEL = {"C": CURVE, "S": SURFACE}

# below this many points, brute force beats building a spatial index
_BRUTE_FORCE_LIMIT = 32

# exact assignment (cubic) up to here, entropic approximation beyond
EMD_EXACT_LIMIT = 256


def _as_points(cloud) -> np.ndarray:
    """Accept a LabeledPointCloud or a raw (n,3) array, return (n,3) float64."""
    if isinstance(cloud, LabeledPointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n,3) points, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class LabeledPointCloud:
    """3D points each tagged curve-like (CURVE) or surface-like (SURFACE)."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.uint8))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n,3), got {pts.shape}")
        if lab.shape != (pts.shape[0],):
            raise ValueError("labels must be one per point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite coordinates in point cloud")
        if lab.size and not np.all((lab == CURVE) | (lab == SURFACE)):
            raise ValueError("labels must be CURVE or SURFACE")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def curve_points(self) -> np.ndarray:
        return self.points[self.labels == CURVE]

    @property
    def surface_points(self) -> np.ndarray:
        return self.points[self.labels == SURFACE]

    @staticmethod
    def all_curve(points) -> "LabeledPointCloud":
        pts = _as_points(points)
        return LabeledPointCloud(pts, np.full(len(pts), CURVE, dtype=np.uint8))

    @staticmethod
    def all_surface(points) -> "LabeledPointCloud":
        pts = _as_points(points)
        return LabeledPointCloud(pts, np.full(len(pts), SURFACE, dtype=np.uint8))

    def concat(self, other: "LabeledPointCloud") -> "LabeledPointCloud":
        return LabeledPointCloud(
            np.vstack([self.points, other.points]),
            np.concatenate([self.labels, other.labels]),
        )


class NeighborGraph:
    """Symmetric neighbor lists in CSR form; no self-loops."""

    def __init__(self, indptr: np.ndarray, indices: np.ndarray):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)

    @classmethod
    def from_lists(cls, lists) -> "NeighborGraph":
        indptr = np.zeros(len(lists) + 1, dtype=np.int64)
        chunks = []
        for i, nbrs in enumerate(lists):
            arr = np.asarray(sorted(set(int(j) for j in nbrs)), dtype=np.int64)
            if arr.size and np.any(arr == i):
                raise ValueError(f"self-loop at vertex {i}")
            chunks.append(arr)
            indptr[i + 1] = indptr[i] + arr.size
        indices = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
        g = cls(indptr, indices)
        g._check_symmetric()
        return g

    @classmethod
    def from_edges(cls, n: int, edges) -> "NeighborGraph":
        """Build from undirected (i,j) pairs over n vertices."""
        lists = [[] for _ in range(n)]
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError("self-loop edge")
            lists[i].append(j)
            lists[j].append(i)
        return cls.from_lists(lists)

    def _check_symmetric(self):
        pairs = set()
        for i in range(len(self)):
            for j in self.neighbors(i):
                pairs.add((i, int(j)))
        for i, j in pairs:
            if (j, i) not in pairs:
                raise ValueError(f"asymmetric adjacency: {i}->{j} without {j}->{i}")

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def __len__(self) -> int:
        return self.indptr.size - 1


@dataclass
class TriangleMesh:
    """Indexed triangle mesh. Treated as immutable after construction; derived
    adjacency is cached lazily."""

    vertices: np.ndarray
    faces: np.ndarray
    _edges: np.ndarray = field(default=None, repr=False, compare=False)
    _adjacency: NeighborGraph = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        self.faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if self.vertices.size and (self.vertices.ndim != 2 or self.vertices.shape[1] != 3):
            raise ValueError(f"vertices must be (n,3), got {self.vertices.shape}")
        if self.vertices.size == 0:
            self.vertices = self.vertices.reshape(0, 3)
        if self.faces.size == 0:
            self.faces = self.faces.reshape(0, 3)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"faces must be (m,3), got {self.faces.shape}")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("non-finite vertex coordinates")
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face: repeated vertex index")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return self.n_faces == 0

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (ne,2) array."""
        if self._edges is None:
            if self.faces.size == 0:
                self._edges = np.zeros((0, 2), dtype=np.int64)
            else:
                e = np.vstack([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
                e = np.sort(e, axis=1)
                self._edges = np.unique(e, axis=0)
        return self._edges

    def vertex_adjacency(self) -> NeighborGraph:
        """N(p): vertices sharing an edge with p."""
        if self._adjacency is None:
            self._adjacency = NeighborGraph.from_edges(self.n_vertices, self.edges())
        return self._adjacency

    def face_normals(self, normalized: bool = True) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if normalized:
            ln = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, ln, out=np.zeros_like(n), where=ln > 0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalized=False), axis=1)

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox()
        return float(np.linalg.norm(hi - lo))


# ---------------------------------------------------------------------------
# nearest neighbors


def knn(cloud, k: int, query) -> np.ndarray:
    """Indices of the k nearest cloud points to `query`, ascending distance,
    ties broken by lower index."""
    pts = _as_points(cloud)
    n = len(pts)
    if n == 0:
        raise ValueError("knn on empty cloud")
    if k <= 0:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds cloud size {n}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    if n < _BRUTE_FORCE_LIMIT:
        d2 = np.einsum("ij,ij->i", pts - q, pts - q)
        order = np.argsort(d2, kind="stable")
        return order[:k].astype(np.int64)
    tree = cKDTree(pts)
    d, _ = tree.query(q, k=k)
    d_k = float(np.atleast_1d(d)[-1])
    # closed-ball re-query so exact ties resolve by lowest index
    cand = np.asarray(tree.query_ball_point(q, d_k * (1 + 1e-12) + 1e-300), dtype=np.int64)
    d2 = np.einsum("ij,ij->i", pts[cand] - q, pts[cand] - q)
    order = np.lexsort((cand, d2))
    return cand[order[:k]]


def _nearest_sq_dists(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each row of a, squared distance to and index of its nearest row of b."""
    if len(a) * len(b) <= _BRUTE_FORCE_LIMIT * _BRUTE_FORCE_LIMIT:
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        idx = np.argmin(d2, axis=1)
        return d2[np.arange(len(a)), idx], idx
    tree = cKDTree(b)
    d, idx = tree.query(a, k=1)
    return d * d, idx


# ---------------------------------------------------------------------------
# sampling


def sample_surface(mesh: TriangleMesh, n: int, seed: int) -> LabeledPointCloud:
    """Sample n points area-proportionally over the mesh surface.

    Barycentric sampling, reproducible per seed; all labels SURFACE.
    """
    pts, _, _ = sample_surface_with_normals(mesh, n, seed)
    return LabeledPointCloud.all_surface(pts)


def sample_surface_with_normals(mesh: TriangleMesh, n: int, seed: int):
    """As sample_surface but also returns per-point unit face normals and the
    source face index of every sample."""
    areas = mesh.face_areas()
    total = areas.sum()
    if mesh.is_empty() or total <= 0:
        raise ValueError("cannot sample a mesh with zero total area")
    rng = np.random.default_rng(seed)
    fi = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tri = mesh.vertices[mesh.faces[fi]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    normals = mesh.face_normals()[fi]
    return pts, normals, fi


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ChamferResult:
    sum: float   # loss form: sum of squared nearest distances, both directions
    mean: float  # reporting form: per-point normalized


def chamfer(a, b) -> ChamferResult:
    """Chamfer distance between two point sets.

    sum  = sum_x min_y ||x-y||^2 + sum_y min_x ||x-y||^2
    mean = (first term)/|a| + (second term)/|b|
    """
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer requires non-empty point sets")
    d_ab, _ = _nearest_sq_dists(pa, pb)
    d_ba, _ = _nearest_sq_dists(pb, pa)
    return ChamferResult(
        sum=float(d_ab.sum() + d_ba.sum()),
        mean=float(d_ab.mean() + d_ba.mean()),
    )


def laplacian_loss(points, graph: NeighborGraph) -> float:
    """Sum over points of the (unsquared) 2-norm distance to the centroid of
    their neighbors; points without neighbors contribute 0."""
    pts = _as_points(points)
    if graph.indices.size and (graph.indices.min() < 0 or graph.indices.max() >= len(pts)):
        raise IndexError("neighbor index out of range")
    deg = graph.degree()
    total = 0.0
    for i in range(len(graph)):
        if deg[i] == 0:
            continue
        nbr = pts[graph.neighbors(i)]
        total += float(np.linalg.norm(pts[i] - nbr.mean(axis=0)))
    return total


def emd(a, b, exact_limit: int = EMD_EXACT_LIMIT) -> float:
    """Earth Mover's distance between equal-size point sets: minimal-cost
    perfect matching under Euclidean cost, divided by the set size.

    Exact assignment up to `exact_limit` points, annealed Sinkhorn beyond.
    """
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) != len(pb):
        raise ValueError(f"emd requires equal sizes, got {len(pa)} vs {len(pb)}")
    if len(pa) == 0:
        raise ValueError("emd on empty sets")
    cost = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=2)
    if len(pa) <= exact_limit:
        ri, ci = linear_sum_assignment(cost)
        return float(cost[ri, ci].sum() / len(pa))
    return float(_sinkhorn_cost(cost) / len(pa))


def _sinkhorn_cost(cost: np.ndarray, iters: int = 200) -> float:
    """Entropic-regularized transport cost, log domain.

    Schedule: eps anneals geometrically from 10% of the mean cost down to
    0.1% over 6 stages, `iters` Sinkhorn sweeps each; returns <P, C> of the
    final coupling (uniform marginals).
    """
    n, m = cost.shape
    scale = max(float(cost.mean()), 1e-30)
    log_mu = np.full(n, -np.log(n))
    log_nu = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    for eps_rel in np.geomspace(0.1, 0.001, 6):
        eps = eps_rel * scale
        for _ in range(iters):
            mat = (-cost + f[:, None] + g[None, :]) / eps
            f += eps * (log_mu - _logsumexp_rows(mat))
            mat = (-cost + f[:, None] + g[None, :]) / eps
            g += eps * (log_nu - _logsumexp_rows(mat.T))
    logP = (-cost + f[:, None] + g[None, :]) / eps
    P = np.exp(logP)
    P /= P.sum()
    return float((P * cost).sum() * n)


def _logsumexp_rows(mat: np.ndarray) -> np.ndarray:
    mx = mat.max(axis=1)
    return mx + np.log(np.exp(mat - mx[:, None]).sum(axis=1))


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance between two point sets (Euclidean)."""
    pa, pb = _as_points(a), _as_points(b)
    d_ab, _ = _nearest_sq_dists(pa, pb)
    d_ba, _ = _nearest_sq_dists(pb, pa)
    return float(np.sqrt(max(d_ab.max(), d_ba.max())))


def metro(mesh_a: TriangleMesh, mesh_b: TriangleMesh, n: int, seed: int = 0) -> float:
    """Metro distance: symmetric Hausdorff distance between n-point surface
    samples of each mesh (sampling-based, no point-to-triangle projection)."""
    sa = sample_surface(mesh_a, n, seed)
    sb = sample_surface(mesh_b, n, seed)
    return hausdorff(sa.points, sb.points)


# ---------------------------------------------------------------------------
# PCA labeling


def classify_skeleton_points(cloud, k: int = 16, tau_curve: float = 0.2,
                             return_flags: bool = False):
    """Label each point curve-like or surface-like from the eigenvalue profile
    of its k-NN covariance: CURVE when lambda2/lambda1 < tau_curve.

    Degenerate neighborhoods (all coincident) are labeled SURFACE and flagged.
    """
    pts = _as_points(cloud)
    n = len(pts)
    if not (n > k >= 3):
        raise ValueError(f"need |cloud| > k >= 3, got n={n}, k={k}")
    tree = cKDTree(pts)
    _, nbr = tree.query(pts, k=k)  # includes the point itself at distance 0
    labels = np.empty(n, dtype=np.uint8)
    flags = np.zeros(n, dtype=bool)
    for i in range(n):
        nb = pts[nbr[i]]
        cov = np.cov(nb.T, bias=True)
        ev = np.linalg.eigvalsh(cov)[::-1]  # descending
        if ev[0] <= 1e-24:
            labels[i] = SURFACE
            flags[i] = True
        else:
            labels[i] = CURVE if ev[1] / ev[0] < tau_curve else SURFACE
    out = LabeledPointCloud(pts, labels)
    return (out, flags) if return_flags else out


# ---------------------------------------------------------------------------
# file formats


def save_skl(path, cloud: LabeledPointCloud):
    """Write a labeled cloud: one `x y z L` line per point, L in {C,S}."""
    with open(path, "w") as fh:
        for p, lab in zip(cloud.points, cloud.labels):
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {_LABEL_CHAR[int(lab)]}\n")


def load_skl(path) -> LabeledPointCloud:
    pts, labs = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 4 or tok[3] not in _CHAR_LABEL:
                raise ValueError(f"{path}:{ln}: expected 'x y z L' with L in {{C,S}}")
            pts.append([float(tok[0]), float(tok[1]), float(tok[2])])
            labs.append(_CHAR_LABEL[tok[3]])
    if not pts:
        return LabeledPointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.uint8))
    return LabeledPointCloud(np.array(pts), np.array(labs, dtype=np.uint8))


def save_obj(path, mesh: TriangleMesh):
    """Wavefront OBJ subset: v and f lines only, triangles, 1-based indices."""
    with open(path, "w") as fh:
        for p in mesh.vertices:
            fh.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


_OBJ_FACE_TOKEN = re.compile(r"^(\d+)(?:/.*)?$")


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] == "v":
                if len(tok) < 4:
                    raise ValueError(f"{path}:{ln}: malformed vertex")
                verts.append([float(tok[1]), float(tok[2]), float(tok[3])])
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise ValueError(f"{path}:{ln}: only triangle faces supported")
                idx = []
                for t in tok[1:]:
                    m = _OBJ_FACE_TOKEN.match(t)
                    if not m:
                        raise ValueError(f"{path}:{ln}: malformed face token {t!r}")
                    idx.append(int(m.group(1)) - 1)
                faces.append(idx)
            # other line types ignored (subset reader)
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))
