"""Soft rasterisation of silhouettes, colour and two-frame optical flow.

Every face j contributes a soft occupancy D_j(p) = sigmoid(s * d^2 / sigma)
to pixel p, where d is the screen-space distance from p to the projected
triangle's boundary (clip units) and s = +1 inside, -1 outside.

* silhouette:  1 - prod_j (1 - D_j)
* colour:      softmax over faces with weights D_j exp(z_j / gamma) plus a
               background weight exp(eps / gamma), z_j normalised inverse depth
* flow:        colour-weight blend of the barycentric surface point, moved to
               the next frame by vertex correspondence and re-projected

A pair (pixel, face) takes part only when the pixel is inside the face or
d^2 <= sigma * ln(1 / cull_eps); ``RasterConfig.cull_eps = None`` keeps
every pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from lasr.camera import NEAR_PLANE, Intrinsics, project
from lasr.errors import ParameterError, UsageError


@dataclass
class RasterConfig:
    image_size: tuple[int, int] = (256, 256)
    sigma: float = 1e-4
    gamma: float = 1e-4
    background_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = NEAR_PLANE
    depth_near: float = 0.1
    depth_far: float = 100.0
    background_eps: float = 1e-3
    cull_eps: float | None = 1e-9
    coverage_eps: float = 1e-4
    detach_flow_weights: bool = True

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        if self.sigma <= 0 or self.gamma <= 0:
            raise ParameterError("sigma and gamma must be positive")
        if min(self.image_size) < 8:
            raise ParameterError("image_size must be at least 8 x 8")

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]


@dataclass
class Fragments:
    """Per (pixel, face) pair quantities shared by the three shaders."""

    pix: torch.Tensor          # P, flat pixel index
    face: torch.Tensor         # P
    bary: torch.Tensor         # P x 3, perspective-correct, clamped to the triangle
    log_one_minus_d: torch.Tensor  # P
    log_w: torch.Tensor        # P, log D_j + z_j / gamma
    num_pixels: int

    def blend_weights(self, background_log_w: float):
        """Normalised colour weights per pair and background weight per pixel."""
        npx = self.num_pixels
        m = torch.full((npx,), float(background_log_w), dtype=self.log_w.dtype)
        if len(self.pix):
            m = m.scatter_reduce(0, self.pix, self.log_w.detach(), reduce="amax", include_self=True)
        w = torch.exp(self.log_w - m[self.pix])
        wb = torch.exp(background_log_w - m)
        total = wb.index_add(0, self.pix, w)
        return w / torch.index_select(total, 0, self.pix), wb / total

    def face_weights(self) -> torch.Tensor:
        """Colour weights renormalised over faces only (background excluded)."""
        npx = self.num_pixels
        m = torch.full((npx,), -torch.inf, dtype=self.log_w.dtype)
        m = m.scatter_reduce(0, self.pix, self.log_w.detach(), reduce="amax", include_self=True)
        w = torch.exp(self.log_w - m[self.pix])
        total = torch.zeros(npx, dtype=w.dtype).index_add(0, self.pix, w)
        return w / torch.index_select(total, 0, self.pix)


@dataclass
class RenderOutput:
    silhouette: torch.Tensor
    color: torch.Tensor | None = None
    flow: torch.Tensor | None = None
    coverage: torch.Tensor | None = None
    fragments: Fragments | None = None
    inputs: dict = field(default_factory=dict)


def pixel_grid(cfg: RasterConfig) -> torch.Tensor:
    """Pixel-centre coordinates (H*W x 2, x then y), centres at integers."""
    ys, xs = torch.meshgrid(torch.arange(cfg.height, dtype=torch.float64),
                            torch.arange(cfg.width, dtype=torch.float64), indexing="ij")
    return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=1)


def to_clip(xy: torch.Tensor, cfg: RasterConfig) -> torch.Tensor:
    scale = torch.tensor([2.0 / cfg.width, 2.0 / cfg.height], dtype=xy.dtype)
    return (xy + 0.5) * scale - 1.0


def _candidate_pairs(xy: np.ndarray, faces: np.ndarray, ok: np.ndarray, cfg: RasterConfig):
    H, W = cfg.image_size
    fid = np.nonzero(ok)[0]
    if cfg.cull_eps is None:
        pix = np.tile(np.arange(H * W), len(fid))
        face = np.repeat(fid, H * W)
        return pix, face
    r = np.sqrt(cfg.sigma * np.log(1.0 / cfg.cull_eps))
    rx, ry = r * W / 2.0, r * H / 2.0
    tri = xy[faces[fid]]  # m x 3 x 2
    lo = tri.min(1)
    hi = tri.max(1)
    x0 = np.clip(np.ceil(lo[:, 0] - rx), 0, W)
    x1 = np.clip(np.floor(hi[:, 0] + rx), -1, W - 1)
    y0 = np.clip(np.ceil(lo[:, 1] - ry), 0, H)
    y1 = np.clip(np.floor(hi[:, 1] + ry), -1, H - 1)
    nx = np.maximum(x1 - x0 + 1, 0).astype(np.int64)
    ny = np.maximum(y1 - y0 + 1, 0).astype(np.int64)
    counts = nx * ny
    keep = counts > 0
    fid, x0, y0, nx, counts = fid[keep], x0[keep].astype(np.int64), y0[keep].astype(np.int64), nx[keep], counts[keep]
    total = int(counts.sum())
    face = np.repeat(fid, counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - starts
    nxr = np.repeat(nx, counts)
    ix = np.repeat(x0, counts) + local % nxr
    iy = np.repeat(y0, counts) + local // nxr
    return iy * W + ix, face


def _edge_dist2(px, py, ax, ay, bx, by):
    ex, ey = bx - ax, by - ay
    t = ((px - ax) * ex + (py - ay) * ey) / (ex * ex + ey * ey).clamp_min(1e-30)
    t = t.clamp(0.0, 1.0)
    dx, dy = px - ax - t * ex, py - ay - t * ey
    return dx * dx + dy * dy


def rasterize(verts: torch.Tensor, faces, intrinsics: Intrinsics, cfg: RasterConfig) -> Fragments:
    """Build the soft (pixel, face) fragment list for camera-frame vertices."""
    faces_np = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    H, W = cfg.image_size
    npx = H * W
    xy, z, vis = project(intrinsics, verts, cfg.near)
    if len(faces_np) == 0:
        empty = torch.zeros(0, dtype=torch.long)
        return Fragments(empty, empty, torch.zeros(0, 3), torch.zeros(0), torch.zeros(0), npx)
    vis_np = vis.detach().numpy()
    ok = vis_np[faces_np].all(1)
    pix_np, face_np = _candidate_pairs(xy.detach().numpy(), faces_np, ok, cfg)
    pix = torch.as_tensor(pix_np, dtype=torch.long)
    face = torch.as_tensor(face_np, dtype=torch.long)

    clip = to_clip(xy, cfg)
    grid = to_clip(pixel_grid(cfg), cfg)

    def geometry(pix, face):
        f_t = torch.as_tensor(faces_np)[face]
        p = grid[pix]
        px, py = p[:, 0], p[:, 1]
        cx, cy = clip[:, 0], clip[:, 1]
        i0, i1, i2 = f_t[:, 0], f_t[:, 1], f_t[:, 2]
        sel = torch.index_select
        ax, ay, bx, by = sel(cx, 0, i0), sel(cy, 0, i0), sel(cx, 0, i1), sel(cy, 0, i1)
        qx, qy = sel(cx, 0, i2), sel(cy, 0, i2)
        d2 = torch.minimum(torch.minimum(_edge_dist2(px, py, ax, ay, bx, by), _edge_dist2(px, py, bx, by, qx, qy)),
                           _edge_dist2(px, py, qx, qy, ax, ay))
        area = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
        good = area.abs() > 1e-14
        safe = torch.where(good, area, torch.ones_like(area))
        w0 = ((bx - px) * (qy - py) - (by - py) * (qx - px)) / safe
        w1 = ((qx - px) * (ay - py) - (qy - py) * (ax - px)) / safe
        w2 = ((ax - px) * (by - py) - (ay - py) * (bx - px)) / safe
        bary2d = torch.stack([w0, w1, w2], dim=1)
        bary2d = torch.where(good.unsqueeze(1), bary2d, torch.full_like(bary2d, 1.0 / 3.0))
        inside = good & (bary2d >= 0).all(1)
        return (i0, i1, i2), d2, bary2d, inside

    if cfg.cull_eps is not None and len(pix):
        # exact support test: keep pairs inside the triangle or within the margin
        with torch.no_grad():
            _, d2, _, inside = geometry(pix, face)
            keep = inside | (d2 <= cfg.sigma * np.log(1.0 / cfg.cull_eps))
        pix, face = pix[keep], face[keep]
    (i0, i1, i2), d2, bary2d, inside = geometry(pix, face)
    sel = torch.index_select
    clamped = bary2d.clamp_min(0.0)
    clamped = clamped / clamped.sum(1, keepdim=True)

    zf = torch.stack([sel(z, 0, i0), sel(z, 0, i1), sel(z, 0, i2)], dim=1)  # P x 3
    inv = clamped / zf
    inv_sum = inv.sum(1, keepdim=True)
    bary = inv / inv_sum
    zpix = 1.0 / inv_sum.squeeze(1)

    x = torch.where(inside, d2, -d2) / cfg.sigma
    log_d = -F.softplus(-x)
    log_1md = -F.softplus(x)
    zn = (cfg.depth_far - zpix) / (cfg.depth_far - cfg.depth_near)
    log_w = log_d + zn / cfg.gamma
    return Fragments(pix, face, bary, log_1md, log_w, npx)


def _interpolate(frag: Fragments, faces, values: torch.Tensor) -> torch.Tensor:
    """Barycentric interpolation of per-vertex values for every pair (P x D)."""
    f_t = torch.as_tensor(np.asarray(faces, dtype=np.int64))[frag.face]
    b = frag.bary
    out = b[:, 0:1] * torch.index_select(values, 0, f_t[:, 0])
    out = out + b[:, 1:2] * torch.index_select(values, 0, f_t[:, 1])
    return out + b[:, 2:3] * torch.index_select(values, 0, f_t[:, 2])


def _silhouette(frag: Fragments, cfg: RasterConfig) -> torch.Tensor:
    acc = torch.zeros(frag.num_pixels, dtype=torch.float64).index_add(0, frag.pix, frag.log_one_minus_d)
    return (-torch.expm1(acc)).reshape(cfg.image_size)


def _color(frag: Fragments, faces, colors: torch.Tensor, cfg: RasterConfig) -> torch.Tensor:
    w, wb = frag.blend_weights(cfg.background_eps / cfg.gamma)
    c_pair = _interpolate(frag, faces, colors)
    bg = torch.as_tensor(cfg.background_color, dtype=torch.float64)
    img = wb.unsqueeze(1) * bg
    img = img.index_add(0, frag.pix, w.unsqueeze(1) * c_pair)
    return img.reshape(cfg.image_size + (3,))


def blended_points(frag: Fragments, faces, verts: torch.Tensor, detach_weights: bool = True) -> torch.Tensor:
    """Per-pixel face-weighted barycentric surface point (H*W x 3, zero if uncovered)."""
    wf = frag.face_weights()
    if detach_weights:
        wf = wf.detach()
    pts = _interpolate(frag, faces, verts)
    return torch.zeros(frag.num_pixels, 3, dtype=verts.dtype).index_add(0, frag.pix, wf.unsqueeze(1) * pts)


def _flow(frag, faces, verts_t, verts_t1, intr_t, intr_t1, coverage, cfg):
    x_t = blended_points(frag, faces, verts_t, cfg.detach_flow_weights)
    x_t1 = blended_points(frag, faces, verts_t1, cfg.detach_flow_weights)
    cov = coverage.reshape(-1)
    # keep uncovered pixels at a finite depth so projection stays well defined
    safe = torch.tensor([0.0, 0.0, 1.0], dtype=x_t.dtype)
    x_t = torch.where(cov.unsqueeze(1), x_t, safe)
    x_t1 = torch.where(cov.unsqueeze(1), x_t1, safe)
    xy0, _, v0 = project(intr_t, x_t, cfg.near)
    xy1, _, v1 = project(intr_t1, x_t1, cfg.near)
    valid = cov & v0 & v1
    flow = torch.where(valid.unsqueeze(1), xy1 - xy0, torch.zeros_like(xy0))
    return flow.reshape(cfg.image_size + (2,)), valid.reshape(cfg.image_size)


def render(verts, faces, intrinsics: Intrinsics, cfg: RasterConfig, colors=None,
           verts_next=None, intrinsics_next: Intrinsics | None = None) -> RenderOutput:
    """Render silhouette, and colour / flow when their inputs are given."""
    verts = torch.as_tensor(verts, dtype=torch.float64)
    frag = rasterize(verts, faces, intrinsics, cfg)
    sil = _silhouette(frag, cfg)
    coverage = torch.zeros(frag.num_pixels, dtype=torch.bool)
    coverage[frag.pix] = True
    coverage = coverage.reshape(cfg.image_size) & (sil.detach() > cfg.coverage_eps)
    out = RenderOutput(silhouette=sil, coverage=coverage, fragments=frag)
    out.inputs = {"vertices": verts, "focal": intrinsics.focal, "principal_point": intrinsics.principal_point}
    if colors is not None:
        colors = torch.as_tensor(colors, dtype=torch.float64)
        out.color = _color(frag, faces, colors, cfg)
        out.inputs["colors"] = colors
    if verts_next is not None:
        verts_next = torch.as_tensor(verts_next, dtype=torch.float64)
        intr1 = intrinsics if intrinsics_next is None else intrinsics_next
        out.flow, out.coverage = _flow(frag, faces, verts, verts_next, intrinsics, intr1, coverage, cfg)
        out.inputs.update({"vertices_next": verts_next, "focal_next": intr1.focal,
                           "principal_point_next": intr1.principal_point})
    return out


def render_silhouette(verts, faces, intrinsics, cfg) -> torch.Tensor:
    return render(verts, faces, intrinsics, cfg).silhouette


def render_color(verts, faces, colors, intrinsics, cfg) -> torch.Tensor:
    return render(verts, faces, intrinsics, cfg, colors=colors).color


def render_flow(verts_t, verts_t1, faces, intrinsics_t, intrinsics_t1, cfg):
    """Return (flow H x W x 2, coverage H x W)."""
    out = render(verts_t, faces, intrinsics_t, cfg, verts_next=verts_t1, intrinsics_next=intrinsics_t1)
    return out.flow, out.coverage


def backward(output: RenderOutput, grad_silhouette=None, grad_color=None, grad_flow=None) -> dict:
    """Adjoints of the recorded render inputs for the given output adjoints.

    Returns a dict keyed like ``output.inputs``; entries that do not require
    grad or are unreached are zero tensors.
    """
    pairs = [(output.silhouette, grad_silhouette), (output.color, grad_color), (output.flow, grad_flow)]
    outs, grads = [], []
    for val, g in pairs:
        if g is None:
            continue
        if val is None:
            raise UsageError("adjoint given for a field that was not rendered")
        outs.append(val)
        grads.append(torch.as_tensor(g, dtype=val.dtype).expand_as(val))
    if not outs:
        raise UsageError("backward needs at least one output adjoint")
    if not output.inputs or not any(o.requires_grad for o in outs):
        raise UsageError("backward called without a recorded differentiable forward pass")
    names = [k for k, v in output.inputs.items() if isinstance(v, torch.Tensor) and v.requires_grad]
    tensors = [output.inputs[k] for k in names]
    res = torch.autograd.grad(outs, tensors, grads, retain_graph=True, allow_unused=True)
    result = {k: torch.zeros_like(v) for k, v in output.inputs.items()}
    for k, t, g in zip(names, tensors, res):
        result[k] = torch.zeros_like(t) if g is None else g
    return result


def pixel_vertex_weights(frag: Fragments, faces, pixel: int) -> dict[int, float]:
    """Sparse vertex combination of the blended surface point at one flat pixel."""
    sel = (frag.pix == pixel).nonzero().squeeze(1)
    if len(sel) == 0:
        return {}
    wf = frag.face_weights().detach()[sel]
    f = np.asarray(faces)[frag.face[sel].numpy()]
    b = frag.bary.detach()[sel].numpy()
    out: dict[int, float] = {}
    for wi, fi, bi in zip(wf.numpy(), f, b):
        for k in range(3):
            out[int(fi[k])] = out.get(int(fi[k]), 0.0) + float(wi * bi[k])
    return out
