"""Gaussian-mixture skinning weights and linear blend skinning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from lasr.errors import ParameterError

PRECISION_JITTER = 1e-6
_TRIL = torch.tensor([[1, 0], [2, 0], [2, 1]])


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from (w, x, y, z) quaternions; input need not be unit."""
    q = quat_normalize(q)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of quat_to_matrix for a single 3x3 rotation (numpy)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


@dataclass
class BonePose:
    """Rigid transform (unit quaternion, translation); fields may carry a batch dim."""

    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def identity(cls, batch: int | None = None) -> "BonePose":
        q = torch.tensor([1.0, 0.0, 0.0, 0.0])
        t = torch.zeros(3)
        if batch is not None:
            q, t = q.repeat(batch, 1), t.repeat(batch, 1)
        return cls(q, t)

    @classmethod
    def stack(cls, poses: list["BonePose"]) -> "BonePose":
        if not poses:
            return cls(torch.zeros(0, 4), torch.zeros(0, 3))
        return cls(torch.stack([p.rotation for p in poses]), torch.stack([p.translation for p in poses]))

    def matrix(self) -> torch.Tensor:
        """3 x 4 [R | T] matrices."""
        R = quat_to_matrix(self.rotation)
        return torch.cat([R, self.translation.unsqueeze(-1)], dim=-1)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        R = quat_to_matrix(self.rotation)
        return points @ R.transpose(-1, -2) + self.translation.unsqueeze(-2)


class SkinningModel:
    """B Gaussian components: centres J_b and precision factors L_b.

    The precision is Q_b = L_b L_b^T + 1e-6 I. Each L_b is stored as six raw
    numbers: three diagonal entries passed through softplus and three free
    strictly-lower entries, so every raw setting gives an SPD precision.
    """

    def __init__(self, centers, precision_raw):
        self.centers = torch.as_tensor(centers, dtype=torch.float64)
        self.precision_raw = torch.as_tensor(precision_raw, dtype=torch.float64)
        if self.centers.ndim != 2 or self.centers.shape[1] != 3:
            raise ParameterError("centers must be B x 3")
        if self.precision_raw.shape != (len(self.centers), 6):
            raise ParameterError("precision_raw must be B x 6")

    @property
    def num_bones(self) -> int:
        return len(self.centers)

    @property
    def num_parameters(self) -> int:
        return 9 * self.num_bones

    @classmethod
    def isotropic(cls, centers, radius: float) -> "SkinningModel":
        """Precision I / radius^2 for every component."""
        centers = torch.as_tensor(np.asarray(centers, dtype=np.float64))
        b = len(centers)
        diag = 1.0 / float(radius)
        # inverse softplus so that softplus(raw) == diag
        raw_diag = diag + np.log(-np.expm1(-diag))
        raw = torch.zeros(b, 6)
        raw[:, :3] = raw_diag
        return cls(centers, raw)

    def cholesky_factors(self) -> torch.Tensor:
        b = self.num_bones
        L = torch.zeros(b, 3, 3, dtype=self.precision_raw.dtype)
        diag = F.softplus(self.precision_raw[:, :3])
        L = L + torch.diag_embed(diag)
        rows = torch.arange(b).unsqueeze(1).expand(b, 3)
        idx = (rows, _TRIL[:, 0].expand(b, 3), _TRIL[:, 1].expand(b, 3))
        lower = torch.zeros(b, 3, 3, dtype=self.precision_raw.dtype).index_put(idx, self.precision_raw[:, 3:])
        return L + lower

    def precisions(self) -> torch.Tensor:
        L = self.cholesky_factors()
        return L @ L.transpose(-1, -2) + PRECISION_JITTER * torch.eye(3)

    def log_densities(self, rest_vertices: torch.Tensor) -> torch.Tensor:
        """B x N unnormalised log weights -0.5 (v - J)^T Q (v - J)."""
        d = rest_vertices.unsqueeze(0) - self.centers.unsqueeze(1)  # B x N x 3
        Q = self.precisions()
        return -0.5 * torch.einsum("bni,bij,bnj->bn", d, Q, d)

    def detach(self) -> "SkinningModel":
        return SkinningModel(self.centers.detach().clone(), self.precision_raw.detach().clone())


class FreeSkinning:
    """Unconstrained B x N skinning logits (softmax over bones per vertex)."""

    def __init__(self, logits):
        self.logits = torch.as_tensor(logits, dtype=torch.float64)

    @property
    def num_bones(self) -> int:
        return self.logits.shape[0]

    @property
    def num_parameters(self) -> int:
        return int(self.logits.numel())

    def log_densities(self, rest_vertices: torch.Tensor) -> torch.Tensor:
        if rest_vertices.shape[0] != self.logits.shape[1]:
            raise ParameterError("free skinning logits do not match vertex count")
        return self.logits


def skin_weights(model, rest_vertices) -> torch.Tensor:
    """B x N column-stochastic skinning matrix.

    The normaliser is applied as a log-domain softmax over components, so
    vertices far from every Gaussian still get finite weights.
    """
    v = torch.as_tensor(rest_vertices, dtype=torch.float64)
    if v.ndim != 2 or v.shape[1] != 3 or len(v) < 1:
        raise ParameterError("rest_vertices must be N x 3 with N >= 1")
    return torch.softmax(model.log_densities(v), dim=0)


def _as_pose(p) -> BonePose:
    if isinstance(p, BonePose):
        return p
    if isinstance(p, (list, tuple)) and p and isinstance(p[0], BonePose):
        return BonePose.stack(list(p))
    if isinstance(p, (list, tuple)) and not p:
        return BonePose(torch.zeros(0, 4), torch.zeros(0, 3))
    raise ParameterError(f"expected BonePose or list of BonePose, got {type(p)!r}")


def lbs_object(rest_vertices: torch.Tensor, W: torch.Tensor, bones) -> torch.Tensor:
    """Blend bone transforms per vertex in the object frame (no root)."""
    bones = _as_pose(bones)
    B = bones.rotation.shape[0]
    if B == 0:
        return rest_vertices
    if W.shape != (B, rest_vertices.shape[0]):
        raise ParameterError(f"W shape {tuple(W.shape)} != ({B}, {rest_vertices.shape[0]})")
    G = bones.matrix()  # B x 3 x 4
    blended = torch.einsum("bn,bij->nij", W, G)  # N x 3 x 4
    return (blended[:, :, :3] @ rest_vertices.unsqueeze(-1)).squeeze(-1) + blended[:, :, 3]


def lbs_apply(rest_vertices, W, bones, root) -> torch.Tensor:
    """Camera-frame vertices G_0 (sum_b W_bi G_b) V_i."""
    v = torch.as_tensor(rest_vertices, dtype=torch.float64)
    return _as_pose(root).apply(lbs_object(v, W, bones))


def parameter_count(N: int, B: int, T: int) -> int:
    """Unknowns of the skinned model: rest shape, bone poses, Gaussians, root poses, intrinsics."""
    if N < 1 or T < 1 or B < 0:
        raise ParameterError("need N >= 1, T >= 1, B >= 0")
    return 3 * N + 6 * B * T + 9 * B + 6 * T + (T + 2)
