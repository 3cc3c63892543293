"""Synthetic scenes with ground truth: a rigid blob and a skinned quadruped.

The camera orbits the object about the vertical (y) axis at zero
elevation. Measurements are rendered by the soft rasteriser at near-hard
settings at twice the output resolution and area-downsampled.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
from skimage import measure

from lasr.camera import FrameParams, Intrinsics, project
from lasr.eval import write_keypoints
from lasr.io import MeasurementSet
from lasr.mesh import Mesh, make_icosphere, save_obj
from lasr.renderer import RasterConfig, blended_points, render
from lasr.skinning import BonePose, axis_angle_quat, lbs_object, matrix_to_quat, quat_to_matrix

ORBIT_DEGREES = 90.0
DEFAULT_FRAMES = 15
CAMERA_DISTANCE = 3.0


@dataclass
class GroundTruth:
    mesh: Mesh                              # rest shape
    frames: list                            # FrameParams per frame
    object_vertices: list                   # per-frame object-frame vertices (N x 3)
    camera_vertices: list                   # per-frame camera-frame vertices
    weights: np.ndarray | None = None       # B x N skinning weights
    bones: list = field(default_factory=list)  # per-frame BonePose (batched)
    segments: list = field(default_factory=list)  # per-bone vertex index arrays

    def posed_mesh(self, t: int, camera: bool = False) -> Mesh:
        v = self.camera_vertices[t] if camera else self.object_vertices[t]
        return Mesh(v, self.mesh.faces, self.mesh.colors)


def blob_mesh(seed: int = 0, subdivisions: int = 4, amplitude: float = 0.18, bumps: int = 6) -> Mesh:
    """Icosphere with a smooth random radial perturbation, mirror-symmetric in x."""
    rng = np.random.default_rng(seed)
    mesh = make_icosphere(subdivisions)
    v = mesh.vertices
    dirs = rng.normal(size=(bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = rng.uniform(-1.0, 1.0, size=bumps) * amplitude
    kappa = rng.uniform(2.0, 4.0, size=bumps)

    def field_(x):
        return (amps * np.exp(kappa * (x @ dirs.T - 1.0))).sum(1)

    mirror = v * np.array([-1.0, 1.0, 1.0])
    r = 1.0 + 0.5 * (field_(v) + field_(mirror))
    # stretch along z so the shape has a clear long axis
    verts = v * r[:, None] * np.array([0.85, 0.9, 1.2])
    return Mesh(verts, mesh.faces, _color_field(verts, rng))


def _color_field(verts: np.ndarray, rng) -> np.ndarray:
    """Smooth, x-symmetric vertex colours."""
    freq = rng.uniform(1.5, 3.0, size=3)
    phase = rng.uniform(0, 2 * np.pi, size=3)
    x, y, z = np.abs(verts[:, 0]), verts[:, 1], verts[:, 2]
    c = np.stack([
        0.55 + 0.35 * np.sin(freq[0] * z + phase[0]),
        0.5 + 0.3 * np.sin(freq[1] * y + phase[1] + x),
        0.45 + 0.35 * np.cos(freq[2] * (y + z) + phase[2]),
    ], axis=1)
    return np.clip(c, 0.0, 1.0)


def orbit_root(t: int, T: int, degrees: float = ORBIT_DEGREES, distance: float = CAMERA_DISTANCE,
               start: float = 0.0) -> BonePose:
    theta = np.deg2rad(start + degrees * t / max(T - 1, 1))
    q = axis_angle_quat([0.0, 1.0, 0.0], theta)
    return BonePose(torch.as_tensor(q), torch.tensor([0.0, 0.0, distance]))


def default_intrinsics(size: int) -> Intrinsics:
    return Intrinsics(torch.tensor(1.0 * size), torch.tensor([(size - 1) / 2.0, (size - 1) / 2.0]))


def render_measurements(camera_vertices: list, faces, colors, intrinsics: list, size: int = 256,
                        supersample: int = 2, sigma: float = 1e-6, gamma: float = 1e-5,
                        background=(0.0, 0.0, 0.0)) -> MeasurementSet:
    """Near-hard renders at ``supersample`` x resolution, area-downsampled."""
    T = len(camera_vertices)
    hi = size * supersample
    cfg = RasterConfig((hi, hi), sigma=sigma, gamma=gamma, background_color=background, coverage_eps=0.5)
    imgs, masks, fws, bws = [], [], [], []
    col = torch.as_tensor(colors)

    def hi_intr(K: Intrinsics) -> Intrinsics:
        pp = (K.principal_point + 0.5) * supersample - 0.5
        return Intrinsics(K.focal * supersample, pp)

    def down(a):
        return cv2.resize(a, (size, size), interpolation=cv2.INTER_AREA)

    def down_flow(flow, weight):
        num = down(flow * weight[..., None])
        den = down(weight)[..., None]
        return np.where(den > 1e-9, num / np.maximum(den, 1e-9), 0.0) / supersample

    with torch.no_grad():
        for t in range(T):
            v = torch.as_tensor(camera_vertices[t])
            Kt = hi_intr(intrinsics[t])
            nxt = t + 1 if t + 1 < T else None
            prv = t - 1 if t > 0 else None
            out = render(v, faces, Kt, cfg, colors=col,
                         verts_next=torch.as_tensor(camera_vertices[nxt]) if nxt is not None else None,
                         intrinsics_next=hi_intr(intrinsics[nxt]) if nxt is not None else None)
            sil = out.silhouette.numpy()
            imgs.append(np.clip(down(out.color.numpy()), 0, 1))
            masks.append(down(sil) > 0.5)
            wmask = (sil > 0.5).astype(np.float64)
            fws.append(down_flow(out.flow.numpy(), wmask) if nxt is not None else np.zeros((size, size, 2)))
            if prv is not None:
                ob = render(v, faces, Kt, cfg, verts_next=torch.as_tensor(camera_vertices[prv]),
                            intrinsics_next=hi_intr(intrinsics[prv]))
                bws.append(down_flow(ob.flow.numpy(), wmask))
            else:
                bws.append(np.zeros((size, size, 2)))
    return MeasurementSet(np.stack(imgs), np.stack(masks), np.stack(fws), np.stack(bws))


def make_rigid_scene(shape: Mesh | None = None, T: int = DEFAULT_FRAMES, seed: int = 0, size: int = 256,
                     orbit: float = ORBIT_DEGREES):
    """Camera orbit around a rigid shape; returns (MeasurementSet, GroundTruth)."""
    shape = blob_mesh(seed) if shape is None else shape
    K = default_intrinsics(size)
    frames, obj, cam = [], [], []
    for t in range(T):
        root = orbit_root(t, T, orbit)
        frames.append(FrameParams(K, root))
        obj.append(shape.vertices.copy())
        cam.append(root.apply(torch.as_tensor(shape.vertices)).numpy())
    ms = render_measurements(cam, shape.faces, shape.colors, [K] * T, size)
    return ms, GroundTruth(shape, frames, obj, cam)


# ---------------------------------------------------------------------------
# procedural quadruped

# bone segments (start, end, radius); y points down, z forward, x to the side
_HIP_Y, _KNEE_Y, _FOOT_Y = 0.12, 0.55, 0.95
_LEG_X, _LEG_Z = 0.24, 0.5


def quadruped_segments():
    segs = [
        ("body", np.array([0.0, 0.0, -0.65]), np.array([0.0, 0.0, 0.65]), 0.33),
        ("head", np.array([0.0, -0.3, 0.85]), np.array([0.0, -0.35, 1.2]), 0.2),
    ]
    for sx in (-1, 1):
        for sz in (-1, 1):
            hip = np.array([sx * _LEG_X, _HIP_Y, sz * _LEG_Z])
            knee = np.array([sx * _LEG_X, _KNEE_Y, sz * _LEG_Z])
            foot = np.array([sx * _LEG_X, _FOOT_Y, sz * _LEG_Z])
            tag = ("l" if sx < 0 else "r") + ("b" if sz < 0 else "f")
            segs.append((f"{tag}_upper", hip, knee, 0.11))
            segs.append((f"{tag}_lower", knee, foot, 0.09))
    return segs


def _segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def quadruped_mesh(resolution: int = 64, smooth: float = 0.06) -> tuple[Mesh, np.ndarray]:
    """Smooth union of capsules; returns the mesh and the per-vertex segment id."""
    segs = quadruped_segments()
    lo, hi = np.array([-0.7, -0.75, -1.1]), np.array([0.7, 1.15, 1.55])
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X, Y, Z], -1).reshape(-1, 3)
    d = np.stack([_segment_distance(pts, a, b) - r for _, a, b, r in segs], axis=1)
    # smooth minimum (log-sum-exp)
    sdf = -smooth * np.log(np.exp(-d / smooth).sum(1))
    sdf = sdf.reshape(X.shape)
    spacing = tuple((hi - lo) / (resolution - 1))
    verts, faces, _, _ = measure.marching_cubes(sdf, 0.0, spacing=spacing)
    verts = verts + lo
    # marching_cubes emits faces with inward normals for a negative-inside sdf
    faces = faces[:, ::-1].astype(np.int64)
    seg_id = np.stack([_segment_distance(verts, a, b) - r for _, a, b, r in segs], 1).argmin(1)
    colors = np.zeros_like(verts)
    palette = np.array([[0.7, 0.5, 0.3], [0.9, 0.8, 0.6], [0.4, 0.3, 0.2]])
    colors[:] = palette[0]
    colors[seg_id == 1] = palette[1]
    colors[seg_id >= 2] = palette[2] + 0.1 * (verts[seg_id >= 2, 1:2] - _HIP_Y)
    return Mesh(verts, faces, np.clip(colors, 0, 1)), seg_id


def _rot_about(point, axis, angle) -> np.ndarray:
    """4 x 4 rotation about an axis through ``point``."""
    R = quat_to_matrix(torch.as_tensor(axis_angle_quat(axis, angle))).numpy()
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = point - R @ point
    return M


def quadruped_bones(t: int, T: int, amplitude: float, phases: np.ndarray) -> list[np.ndarray]:
    """Per-bone 4 x 4 rest-to-posed transforms at frame t (walk-like swing)."""
    segs = quadruped_segments()
    w = 2.0 * np.pi * t / max(T - 1, 1)
    mats = [np.eye(4)]  # body
    mats.append(_rot_about(segs[1][1], [1, 0, 0], 0.5 * amplitude * np.sin(w + phases[0])))
    k = 1
    for i in range(2, len(segs), 2):
        hip, knee = segs[i][1], segs[i][2]
        swing = amplitude * np.sin(w + phases[k])
        bend = 0.8 * amplitude * max(0.0, np.sin(w + phases[k] + 0.5))
        upper = _rot_about(hip, [1, 0, 0], swing)
        lower = upper @ _rot_about(knee, [1, 0, 0], -bend)
        mats.extend([upper, lower])
        k += 1
    return mats


def make_articulated_scene(T: int = DEFAULT_FRAMES, seed: int = 0, size: int = 256,
                           amplitude: float = np.deg2rad(25.0), orbit: float = ORBIT_DEGREES,
                           resolution: int = 64):
    """Skinned capsule quadruped with sinusoidal leg and head motion."""
    rng = np.random.default_rng(seed)
    mesh, seg_id = quadruped_mesh(resolution)
    B = len(quadruped_segments())
    W = np.zeros((B, mesh.num_vertices))
    W[seg_id, np.arange(mesh.num_vertices)] = 1.0
    phases = np.concatenate([[0.0], np.array([0.0, np.pi, np.pi, 0.0]) + rng.uniform(-0.3, 0.3, 4)])
    K = default_intrinsics(size)
    rest = torch.as_tensor(mesh.vertices)
    Wt = torch.as_tensor(W)
    frames, obj, cam, bones = [], [], [], []
    for t in range(T):
        mats = quadruped_bones(t, T, amplitude, phases)
        q = torch.stack([torch.as_tensor(matrix_to_quat(m[:3, :3])) for m in mats])
        tr = torch.stack([torch.as_tensor(m[:3, 3]) for m in mats])
        pose = BonePose(q, tr)
        root = orbit_root(t, T, orbit)
        v_obj = lbs_object(rest, Wt, pose)
        frames.append(FrameParams(K, root, pose))
        bones.append(pose)
        obj.append(v_obj.numpy())
        cam.append(root.apply(v_obj).numpy())
    ms = render_measurements(cam, mesh.faces, mesh.colors, [K] * T, size)
    segments = [np.nonzero(seg_id == b)[0] for b in range(B)]
    return ms, GroundTruth(mesh, frames, obj, cam, W, bones, segments)


def keypoint_annotations(gt: GroundTruth, count: int = 12, seed: int = 0, size: int = 256,
                         depth_tolerance: float = 0.05):
    """Project ``count`` well-spread GT vertices into every frame.

    Returns (T x K x 2 pixels, T x K visibility, vertex ids). A keypoint is
    visible when the rendered surface at its pixel lies within
    ``depth_tolerance`` of the vertex depth.
    """
    rng = np.random.default_rng(seed)
    v = gt.mesh.vertices
    ids = [int(rng.integers(len(v)))]
    d = np.linalg.norm(v - v[ids[0]], axis=1)
    for _ in range(count - 1):  # farthest-point sampling
        ids.append(int(d.argmax()))
        d = np.minimum(d, np.linalg.norm(v - v[ids[-1]], axis=1))
    ids = np.asarray(ids)
    cfg = RasterConfig((size, size), sigma=1e-5, gamma=1e-5)
    T = len(gt.frames)
    pts = np.zeros((T, count, 2))
    vis = np.zeros((T, count), dtype=bool)
    for t in range(T):
        cam = torch.as_tensor(gt.camera_vertices[t])
        K = gt.frames[t].intrinsics
        xy, z, ok = project(K, cam[ids])
        with torch.no_grad():
            out = render(cam, gt.mesh.faces, K, cfg)
            surf = blended_points(out.fragments, gt.mesh.faces, cam)
        surf = surf.reshape(size, size, 3).numpy()
        sil = out.silhouette.numpy()
        for k in range(count):
            x, y = xy[k].numpy()
            px, py = int(round(x)), int(round(y))
            if not (ok[k] and 0 <= px < size and 0 <= py < size):
                continue
            pts[t, k] = (x, y)
            vis[t, k] = sil[py, px] > 0.5 and abs(surf[py, px, 2] - float(z[k])) < depth_tolerance
    return pts, vis, ids


def save_ground_truth(gt: GroundTruth, root, size: int, keypoints: int = 12, seed: int = 0) -> None:
    """Rest and per-frame camera-frame OBJs, cameras, skinning weights and keypoints."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    save_obj(gt.mesh, root / "rest.obj")
    for t, v in enumerate(gt.camera_vertices):
        save_obj(gt.mesh, root / "frames" / f"{t:05d}.obj", vertices=v)
    cams = [{"focal": float(f.intrinsics.focal), "principal_point": [float(x) for x in f.intrinsics.principal_point]}
            for f in gt.frames]
    (root / "cameras.json").write_text(json.dumps({"image_size": size, "frames": cams}, indent=1))
    if gt.weights is not None:
        np.save(root / "weights.npy", gt.weights)
    if keypoints:
        pts, vis, _ = keypoint_annotations(gt, keypoints, seed, size)
        write_keypoints(root / "keypoints.txt", pts, vis)
