"""Triangle mesh container, geometric operators and surface distances.

Functions that take vertex positions accept either numpy arrays or torch
tensors. Torch inputs stay on the autograd graph; numpy inputs come back as
numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from lasr.errors import DegenerateGeometryError, ParameterError, TopologyError


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if self.colors is None:
            self.colors = np.full_like(self.vertices, 0.5)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "Mesh":
        return Mesh(self.vertices.copy(), self.faces.copy(), self.colors.copy())

    def validate(self) -> None:
        """Raise if an index is out of range, a face is degenerate or a color leaves [0, 1]."""
        n = self.num_vertices
        if self.colors.shape != self.vertices.shape:
            raise ParameterError("colors must be N x 3")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise TopologyError("face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise TopologyError("degenerate face with repeated vertex index")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ParameterError("colors outside [0, 1]")


@dataclass
class SymmetryPlane:
    """Plane through the origin with unit normal; offset is fixed at zero."""

    normal: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ParameterError("symmetry normal must be non-zero")
        self.normal = n / norm
        if self.offset != 0.0:
            raise ParameterError("symmetry plane offset is fixed at 0")

    def householder(self) -> np.ndarray:
        n = self.normal
        return np.eye(3) - 2.0 * np.outer(n, n)


def _to_torch(x):
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def _back(x: torch.Tensor, was_torch: bool):
    return x if was_torch else x.detach().numpy()


# ---------------------------------------------------------------------------
# construction

def make_icosphere(subdivisions: int = 0) -> Mesh:
    if not isinstance(subdivisions, (int, np.integer)) or not 0 <= subdivisions <= 6:
        raise ParameterError(f"subdivisions must be an integer in [0, 6], got {subdivisions!r}")
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)
        verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return Mesh(verts, faces)


def _subdivide(verts, faces):
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mids = 0.5 * (verts[uniq[:, 0]] + verts[uniq[:, 1]])
    m = len(faces)
    mid_idx = len(verts) + inverse
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    ab, bc, ca = mid_idx[:m], mid_idx[m:2 * m], mid_idx[2 * m:]
    new_faces = np.concatenate([
        np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
    ])
    return np.concatenate([verts, mids]), new_faces


# ---------------------------------------------------------------------------
# topology helpers

def unique_edges(faces: np.ndarray) -> np.ndarray:
    faces = np.asarray(faces)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0)


def edge_face_counts(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    faces = np.asarray(faces)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return np.unique(np.sort(e, axis=1), axis=0, return_counts=True)


def is_edge_manifold(mesh: Mesh, closed: bool = True) -> bool:
    """Every edge shared by exactly two faces (closed) or at most two (open).

    Also checks that the faces around each vertex form one fan, so pinched
    vertices are rejected.
    """
    if mesh.num_faces == 0:
        return False
    _, counts = edge_face_counts(mesh.faces)
    if closed and np.any(counts != 2):
        return False
    if np.any(counts > 2):
        return False
    # consistent orientation: each directed edge appears once
    f = mesh.faces
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    if len(np.unique(directed, axis=0)) != len(directed):
        return False
    return _vertex_fans_ok(mesh)


def _vertex_fans_ok(mesh: Mesh) -> bool:
    f = mesh.faces
    # for each vertex the link edges (opposite edges) must form a single cycle
    nxt = {}
    for tri in f:
        for k in range(3):
            v, a, b = tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]
            nxt.setdefault(int(v), {})[int(a)] = int(b)
    for v, link in nxt.items():
        start = next(iter(link))
        cur, steps = start, 0
        while True:
            cur = link.get(cur)
            steps += 1
            if cur is None:
                break  # open fan on a boundary vertex
            if cur == start:
                break
            if steps > len(link):
                return False
        if cur is not None and steps != len(link):
            return False
    return True


def euler_characteristic(mesh: Mesh) -> int:
    used = np.unique(mesh.faces)
    return len(used) - len(unique_edges(mesh.faces)) + mesh.num_faces


def vertex_neighbors(faces: np.ndarray, num_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    """Directed 1-ring edge list (src, dst), each undirected edge both ways."""
    e = unique_edges(faces)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    return src, dst


# ---------------------------------------------------------------------------
# operators

def uniform_laplacian(mesh: Mesh, vertex_positions=None):
    """Row i is V_i minus the mean of its 1-ring neighbours."""
    pos = mesh.vertices if vertex_positions is None else vertex_positions
    x, was_torch = _to_torch(pos)
    n = mesh.num_vertices
    if x.shape != (n, 3):
        raise ParameterError(f"positions shape {tuple(x.shape)} does not match mesh ({n}, 3)")
    src, dst = vertex_neighbors(mesh.faces, n)
    deg = np.bincount(src, minlength=n)
    if np.any(deg == 0):
        raise TopologyError(f"isolated vertex {int(np.argmin(deg))} has an empty 1-ring")
    src_t = torch.as_tensor(src)
    acc = torch.zeros_like(x).index_add(0, src_t, x[torch.as_tensor(dst)])
    deg_t = torch.as_tensor(deg, dtype=x.dtype).unsqueeze(1)
    return _back(x - acc / deg_t, was_torch)


def householder_reflect(plane, points):
    """Reflect K x 3 points through a plane with normal n: (I - 2 n n^T) p.

    ``plane`` may be a SymmetryPlane or a (possibly differentiable) normal
    vector, which is normalised here.
    """
    p, was_torch = _to_torch(points)
    if isinstance(plane, SymmetryPlane):
        n = torch.as_tensor(plane.normal, dtype=p.dtype)
    else:
        n, _ = _to_torch(plane)
        n = n.to(p.dtype)
        n = n / torch.linalg.norm(n)
    out = p - 2.0 * (p @ n).unsqueeze(-1) * n
    return _back(out, was_torch)


# ---------------------------------------------------------------------------
# distances

def nearest_distances(a, b):
    """Distance from each point of a to its nearest neighbour in b."""
    at, was_torch = _to_torch(a)
    bt, _ = _to_torch(b)
    tree = cKDTree(bt.detach().numpy())
    _, idx = tree.query(at.detach().numpy())
    d = torch.linalg.norm(at - bt[torch.as_tensor(idx)], dim=-1)
    return _back(d, was_torch)


def chamfer_distance(a, b):
    """Average of the two directional mean nearest-neighbour distances."""
    if len(a) == 0 or len(b) == 0:
        raise ParameterError("chamfer_distance needs two non-empty point sets")
    at, was_torch = _to_torch(a)
    bt, _ = _to_torch(b)
    val = 0.5 * (nearest_distances(at, bt).mean() + nearest_distances(bt, at).mean())
    return val if was_torch else float(val)


def face_areas(vertices, faces):
    v, was_torch = _to_torch(vertices)
    f = torch.as_tensor(np.ascontiguousarray(faces))
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    area = 0.5 * torch.linalg.norm(torch.linalg.cross(b - a, c - a), dim=-1)
    return _back(area, was_torch)


def sample_barycentric(mesh: Mesh, count: int, seed: int, vertices=None):
    """Area-weighted face ids and uniform barycentric coordinates."""
    if count < 1:
        raise ParameterError("count must be >= 1")
    pos = mesh.vertices if vertices is None else vertices
    if isinstance(pos, torch.Tensor):
        pos = pos.detach().numpy()
    area = face_areas(pos, mesh.faces)
    total = area.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegenerateGeometryError("mesh has zero total surface area")
    rng = np.random.default_rng(seed)
    fid = rng.choice(len(area), size=count, p=area / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    return fid, bary


def sample_surface(mesh: Mesh, count: int, seed: int = 0, vertices=None):
    """Uniform area-weighted surface samples (count x 3)."""
    pos = mesh.vertices if vertices is None else vertices
    fid, bary = sample_barycentric(mesh, count, seed, vertices=pos)
    v, was_torch = _to_torch(pos)
    tri = v[torch.as_tensor(mesh.faces[fid])]  # K x 3 x 3
    pts = (torch.as_tensor(bary, dtype=v.dtype).unsqueeze(-1) * tri).sum(1)
    return _back(pts, was_torch)


def closest_point_on_triangles(p: torch.Tensor, a: torch.Tensor, b: torch.Tensor, c: torch.Tensor):
    """Closest point on triangle (a, b, c) to p, batched over leading dims.

    Region classification follows the Voronoi-region method (Ericson,
    Real-Time Collision Detection 5.1.5).
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    tiny = torch.finfo(p.dtype).tiny

    def safe_div(n, d):
        return n / torch.where(d.abs() > tiny, d, torch.ones_like(d))

    denom = va + vb + vc
    v_in = safe_div(vb, denom)
    w_in = safe_div(vc, denom)
    result = a + ab * v_in.unsqueeze(-1) + ac * w_in.unsqueeze(-1)

    # edge regions
    w_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    on_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    result = torch.where(on_bc.unsqueeze(-1), b + (c - b) * w_bc.unsqueeze(-1), result)
    w_ac = safe_div(d2, d2 - d6)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    result = torch.where(on_ac.unsqueeze(-1), a + ac * w_ac.unsqueeze(-1), result)
    v_ab = safe_div(d1, d1 - d3)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    result = torch.where(on_ab.unsqueeze(-1), a + ab * v_ab.unsqueeze(-1), result)
    # vertex regions
    in_c = (d6 >= 0) & (d5 <= d6)
    result = torch.where(in_c.unsqueeze(-1), c.expand_as(result), result)
    in_b = (d3 >= 0) & (d4 <= d3)
    result = torch.where(in_b.unsqueeze(-1), b.expand_as(result), result)
    in_a = (d1 <= 0) & (d2 <= 0)
    result = torch.where(in_a.unsqueeze(-1), a.expand_as(result), result)
    return result


def point_triangle_distance(p, a, b, c):
    q = closest_point_on_triangles(p, a, b, c)
    return torch.sqrt(((p - q) ** 2).sum(-1) + 1e-30)


def points_to_mesh_distance(points, vertices, faces, candidates: int | None = 32, chunk: int = 2048):
    """Exact distance from each point to the nearest triangle of a mesh.

    With ``candidates`` set, only the triangles whose centroids are among
    the nearest ``candidates`` (plus a bounding-radius guard) are tested;
    ``None`` tests every triangle. The nearest triangle is selected without
    gradient, the returned distance is differentiable in both inputs.
    """
    p, was_torch = _to_torch(points)
    v, _ = _to_torch(vertices)
    v = v.to(p.dtype)
    f = np.asarray(faces)
    m = len(f)
    f_t = torch.as_tensor(f)
    with torch.no_grad():
        vn = v.detach()
        pn = p.detach()
        if candidates is None or candidates >= m:
            best = []
            for s in range(0, len(pn), chunk):
                q = pn[s:s + chunk, None, :]
                d = point_triangle_distance(q, vn[f_t[:, 0]][None], vn[f_t[:, 1]][None], vn[f_t[:, 2]][None])
                best.append(d.argmin(1))
            best = torch.cat(best) if best else torch.zeros(0, dtype=torch.long)
        else:
            tri = vn[f_t]
            cent = tri.mean(1).numpy()
            tree = cKDTree(cent)
            _, cand = tree.query(pn.numpy(), k=candidates)
            cand = torch.as_tensor(np.atleast_2d(cand))
            ct = f_t[cand]  # K x c x 3
            d = point_triangle_distance(pn[:, None, :], vn[ct[..., 0]], vn[ct[..., 1]], vn[ct[..., 2]])
            best = cand.gather(1, d.argmin(1, keepdim=True)).squeeze(1)
    fb = f_t[best]
    dist = point_triangle_distance(p, v[fb[:, 0]], v[fb[:, 1]], v[fb[:, 2]])
    return _back(dist, was_torch)


def point_to_surface_chamfer(a: Mesh, b: Mesh, samples: int = 2000, seed: int = 0,
                             vertices_a=None, vertices_b=None, candidates: int | None = 32):
    """Symmetric mean of sample-to-triangle distances between two surfaces.

    ``vertices_a``/``vertices_b`` override the mesh positions (e.g. with
    differentiable tensors); topology is taken from the meshes.
    """
    va = a.vertices if vertices_a is None else vertices_a
    vb = b.vertices if vertices_b is None else vertices_b
    use_torch = isinstance(va, torch.Tensor) or isinstance(vb, torch.Tensor)
    va_t, _ = _to_torch(va)
    vb_t, _ = _to_torch(vb)
    pa = sample_surface(a, samples, seed, vertices=va_t)
    pb = sample_surface(b, samples, seed + 1, vertices=vb_t)
    d_ab = points_to_mesh_distance(pa, vb_t, b.faces, candidates=candidates).mean()
    d_ba = points_to_mesh_distance(pb, va_t, a.faces, candidates=candidates).mean()
    val = 0.5 * (d_ab + d_ba)
    return val if use_torch else float(val)


# ---------------------------------------------------------------------------
# self-intersection test

def _segment_hits_triangles(p0, p1, a, b, c, eps=1e-12):
    """Vectorised segment/triangle crossing test (Moller-Trumbore on segments)."""
    d = p1 - p0
    e1, e2 = b - a, c - a
    h = np.cross(d, e2)
    det = (e1 * h).sum(-1)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = p0 - a
    u = inv * (s * h).sum(-1)
    q = np.cross(s, e1)
    v = inv * (d * q).sum(-1)
    t = inv * (e2 * q).sum(-1)
    tol = 1e-9
    return ok & (u > tol) & (v > tol) & (u + v < 1 - tol) & (t > tol) & (t < 1 - tol)


def self_intersections(mesh: Mesh) -> np.ndarray:
    """Pairs of non-adjacent faces whose interiors intersect (P x 2)."""
    v, f = mesh.vertices, mesh.faces
    tri = v[f]
    lo, hi = tri.min(1), tri.max(1)
    cent = 0.5 * (lo + hi)
    rad = np.linalg.norm(hi - lo, axis=1) * 0.5
    tree = cKDTree(cent)
    pairs = tree.query_pairs(2.0 * rad.max() if len(rad) else 0.0, output_type="ndarray")
    if len(pairs) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    i, j = pairs[:, 0], pairs[:, 1]
    overlap = np.all((lo[i] <= hi[j]) & (lo[j] <= hi[i]), axis=1)
    i, j = i[overlap], j[overlap]
    shared = (f[i][:, :, None] == f[j][:, None, :]).any(axis=(1, 2))
    i, j = i[~shared], j[~shared]
    hit = np.zeros(len(i), dtype=bool)
    for (x, y) in ((i, j), (j, i)):
        ta, tb = tri[x], tri[y]
        for k in range(3):
            hit |= _segment_hits_triangles(ta[:, k], ta[:, (k + 1) % 3], tb[:, 0], tb[:, 1], tb[:, 2])
    return np.stack([i[hit], j[hit]], axis=1)


# ---------------------------------------------------------------------------
# OBJ with per-vertex colours

def save_obj(mesh: Mesh, path, vertices=None) -> None:
    verts = mesh.vertices if vertices is None else np.asarray(vertices)
    lines = []
    for p, c in zip(verts, mesh.colors):
        lines.append("v %.17g %.17g %.17g %.17g %.17g %.17g" % (p[0], p[1], p[2], c[0], c[1], c[2]))
    for tri in mesh.faces:
        lines.append("f %d %d %d" % (tri[0] + 1, tri[1] + 1, tri[2] + 1))
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> Mesh:
    verts, cols, faces = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            verts.append(vals[:3])
            cols.append(vals[3:6] if len(vals) >= 6 else [0.5, 0.5, 0.5])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            if len(idx) != 3:
                raise ParameterError("only triangle faces are supported")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    mesh = Mesh(np.array(verts), np.array(faces, dtype=np.int64), np.clip(np.array(cols), 0, 1))
    mesh.validate()
    return mesh
