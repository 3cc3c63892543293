"""Reconstruction losses and shape / motion / symmetry regularisers.

All reductions are means so the weights do not depend on resolution or
mesh size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from lasr.errors import ParameterError
from lasr.mesh import (Mesh, chamfer_distance, householder_reflect, point_to_surface_chamfer,
                       uniform_laplacian, vertex_neighbors)


@dataclass
class LossWeights:
    beta1: float = 0.5      # silhouette
    beta2: float = 0.5      # flow
    beta3: float = 2.0      # texture
    beta4: float = 5e-3     # image pyramid (stands in for the perceptual term)
    w_shape: float = 0.1
    w_arap: float = 1.0
    w_least: float = 0.05
    w_symm_shape: float = 0.1
    w_symm_bone: float = 0.1
    w_can: float = 0.1
    pyramid_levels: int = 3
    symmetry_samples: int = 2000

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if isinstance(v, float) and v < 0:
                raise ParameterError(f"loss weight {k} must be non-negative")


@dataclass
class FrameTarget:
    """Measurements of one frame as tensors; flow is for the rendered direction."""

    image: torch.Tensor          # H x W x 3
    silhouette: torch.Tensor     # H x W in {0, 1}
    flow: torch.Tensor | None = None        # H x W x 2
    confidence: torch.Tensor | None = None  # H x W


def normalized_confidence(confidence, mask):
    """Scale a confidence map to mean 1 over the mask; all ones when absent."""
    if confidence is None:
        return torch.ones_like(mask, dtype=torch.float64)
    m = mask > 0.5
    mean = confidence[m].mean() if m.any() else torch.tensor(1.0)
    return confidence / mean.clamp_min(1e-12)


def _pyramid_l1(img, ref, mask, levels):
    a = (img * mask.unsqueeze(-1)).permute(2, 0, 1).unsqueeze(0)
    b = (ref * mask.unsqueeze(-1)).permute(2, 0, 1).unsqueeze(0)
    total = img.new_zeros(())
    n = 0
    for _ in range(levels):
        if min(a.shape[-2:]) < 2:
            break
        a = F.avg_pool2d(a, 2)
        b = F.avg_pool2d(b, 2)
        total = total + (a - b).abs().sum(1).mean()
        n += 1
    return total / max(n, 1)


def reconstruction_terms(render, target: FrameTarget, levels: int = 3) -> dict:
    """Unweighted per-term losses for one rendered frame."""
    if render.silhouette.shape != target.silhouette.shape:
        raise ParameterError(f"render {tuple(render.silhouette.shape)} vs measurement "
                             f"{tuple(target.silhouette.shape)} resolution mismatch")
    mask = target.silhouette.to(torch.float64)
    terms = {"silhouette": ((render.silhouette - mask) ** 2).mean()}
    zero = render.silhouette.new_zeros(())
    m = mask > 0.5
    if render.flow is not None and target.flow is not None:
        sel = m & render.coverage
        if sel.any():
            conf = normalized_confidence(target.confidence, mask)
            err = torch.sqrt(((render.flow - target.flow) ** 2).sum(-1) + 1e-12)
            terms["flow"] = (conf * err)[sel].mean()
        else:
            terms["flow"] = zero
    else:
        terms["flow"] = zero
    if render.color is not None and m.any():
        terms["texture"] = (render.color - target.image).abs().sum(-1)[m].mean()
        terms["pyramid"] = _pyramid_l1(render.color, target.image, mask, levels) if levels else zero
    else:
        terms["texture"] = zero
        terms["pyramid"] = zero
    return terms


def reconstruction_loss(renders, targets, weights: LossWeights):
    """Weighted reconstruction loss averaged over frames; returns (total, terms)."""
    if len(renders) != len(targets):
        raise ParameterError("renders and targets differ in length")
    acc: dict = {}
    for r, t in zip(renders, targets):
        for k, v in reconstruction_terms(r, t, weights.pyramid_levels).items():
            acc[k] = acc.get(k, 0.0) + v / len(renders)
    total = (weights.beta1 * acc["silhouette"] + weights.beta2 * acc["flow"]
             + weights.beta3 * acc["texture"] + weights.beta4 * acc["pyramid"])
    return total, acc


def shape_smoothness(mesh: Mesh, positions=None):
    """Mean squared uniform-Laplacian residual of the rest shape."""
    L = uniform_laplacian(mesh, mesh.vertices if positions is None else positions)
    if isinstance(L, torch.Tensor):
        return (L ** 2).sum(-1).mean()
    return float((L ** 2).sum(-1).mean())


def arap_loss(V_t, V_t1, faces):
    """Mean absolute edge-length change between two frames over 1-ring pairs."""
    V_t = torch.as_tensor(V_t, dtype=torch.float64)
    V_t1 = torch.as_tensor(V_t1, dtype=torch.float64)
    src, dst = vertex_neighbors(np.asarray(faces), V_t.shape[0])
    s, d = torch.as_tensor(src), torch.as_tensor(dst)
    l0 = torch.linalg.norm(V_t[s] - V_t[d], dim=-1)
    l1 = torch.linalg.norm(V_t1[s] - V_t1[d], dim=-1)
    return (l0 - l1).abs().mean()


def least_motion_loss(V_t, rest):
    """Mean distance of object-frame posed vertices from the rest shape."""
    V_t = torch.as_tensor(V_t, dtype=torch.float64)
    rest = torch.as_tensor(rest, dtype=torch.float64)
    return torch.sqrt(((V_t - rest) ** 2).sum(-1) + 1e-24).mean()


def symmetry_losses(mesh: Mesh, normal, centers=None, positions=None, samples: int = 2000,
                    seed: int = 0):
    """(shape term, bone term) of the soft mirror-symmetry prior.

    The shape term compares the rest surface with its reflection by
    sample-to-triangle Chamfer; the bone term compares the Gaussian centres
    with their reflections.
    """
    pos = torch.as_tensor(mesh.vertices if positions is None else positions, dtype=torch.float64)
    n = torch.as_tensor(normal, dtype=torch.float64)
    reflected = householder_reflect(n, pos)
    shape = point_to_surface_chamfer(mesh, mesh, samples=samples, seed=seed,
                                     vertices_a=pos, vertices_b=reflected)
    if centers is None or len(centers) == 0:
        bone = pos.new_zeros(())
    else:
        J = torch.as_tensor(centers, dtype=torch.float64)
        bone = chamfer_distance(J, householder_reflect(n, J))
    return shape, bone


def canonicalization_loss(normal, axis=(1.0, 0.0, 0.0)):
    n = torch.as_tensor(normal, dtype=torch.float64)
    n = n / torch.linalg.norm(n)
    return ((n - torch.as_tensor(axis, dtype=torch.float64)) ** 2).sum()
