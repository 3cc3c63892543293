"""Pinhole projection with per-frame focal length and correspondence flow."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from lasr.errors import ParameterError
from lasr.skinning import BonePose

NEAR_PLANE = 1e-3


@dataclass
class Intrinsics:
    focal: torch.Tensor
    principal_point: torch.Tensor

    def __post_init__(self):
        self.focal = torch.as_tensor(self.focal, dtype=torch.float64)
        self.principal_point = torch.as_tensor(self.principal_point, dtype=torch.float64)
        if float(self.focal.detach()) <= 0:
            raise ParameterError("focal length must be positive")

    def matrix(self) -> torch.Tensor:
        f = self.focal
        px, py = self.principal_point.unbind(-1)
        z, o = torch.zeros_like(f), torch.ones_like(f)
        return torch.stack([torch.stack([f, z, px]), torch.stack([z, f, py]), torch.stack([z, z, o])])


@dataclass
class FrameParams:
    intrinsics: Intrinsics
    root: BonePose
    bones: BonePose = field(default_factory=lambda: BonePose(torch.zeros(0, 4), torch.zeros(0, 3)))

    @property
    def num_bones(self) -> int:
        return self.bones.rotation.shape[0]


def project(intrinsics: Intrinsics, camera_points: torch.Tensor, near: float = NEAR_PLANE):
    """Return (pixels K x 2, depth K, visible K) for camera-frame points.

    Points at or behind the near plane are flagged invisible; their depth is
    clamped to the near plane so the returned pixels stay finite.
    """
    X = torch.as_tensor(camera_points, dtype=torch.float64)
    Z = X[..., 2]
    visible = Z > near
    Zs = torch.where(visible, Z, torch.full_like(Z, near))
    xy = intrinsics.focal * X[..., :2] / Zs.unsqueeze(-1) + intrinsics.principal_point
    return xy, Z, visible


def correspondence_flow(params_t: FrameParams, params_t1: FrameParams, points_t, points_t1,
                        near: float = NEAR_PLANE):
    """Flow of paired surface points: project at t+1 minus project at t.

    Returns (flow K x 2, valid K). Samples with a clipped endpoint are
    marked invalid and get zero flow.
    """
    xy0, _, vis0 = project(params_t.intrinsics, points_t, near)
    xy1, _, vis1 = project(params_t1.intrinsics, points_t1, near)
    valid = vis0 & vis1
    flow = torch.where(valid.unsqueeze(-1), xy1 - xy0, torch.zeros_like(xy0))
    return flow, valid
