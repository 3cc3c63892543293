import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from lasr.camera import Intrinsics
from lasr.errors import ParameterError, UsageError
from lasr.mesh import make_icosphere
from lasr.renderer import (RasterConfig, backward, pixel_grid, render, render_color, render_flow,
                           render_silhouette, to_clip)
from oracles import brute_render


def _brute(scene, cfg, colors=True, flow=True):
    K, K1 = scene["K"], scene["K1"]
    return brute_render(scene["verts"].numpy(), scene["mesh"].faces, float(K.focal), K.principal_point.numpy(),
                        cfg.image_size, cfg.sigma, cfg.gamma,
                        colors=scene["colors"].numpy() if colors else None,
                        verts_next=scene["next"].numpy() if flow else None,
                        focal_next=float(K1.focal), pp_next=K1.principal_point.numpy(),
                        background=cfg.background_color, cull_eps=cfg.cull_eps,
                        coverage_eps=cfg.coverage_eps)


@pytest.mark.parametrize("cull", [None, 1e-9])
def test_matches_brute_force_oracle(toy_scene, cull):
    cfg = RasterConfig((8, 8), sigma=2e-2, gamma=5e-2, background_color=(0.2, 0.3, 0.4), cull_eps=cull)
    s = toy_scene
    out = render(s["verts"], s["mesh"].faces, s["K"], cfg, s["colors"], s["next"], s["K1"])
    sil, col, flow, cov = _brute(s, cfg)
    np.testing.assert_allclose(out.silhouette.numpy(), sil, atol=1e-9, rtol=0)
    np.testing.assert_allclose(out.color.numpy(), col, atol=1e-9, rtol=0)
    assert (out.coverage.numpy() == cov).all()
    np.testing.assert_allclose(out.flow.numpy(), flow, atol=1e-9, rtol=0)


def test_oracle_16x16_sharper(toy_scene):
    s = toy_scene
    K = Intrinsics(torch.tensor(18.0), torch.tensor([7.5, 7.2]))
    K1 = Intrinsics(torch.tensor(18.5), torch.tensor([7.5, 7.2]))
    s = dict(s, K=K, K1=K1)
    cfg = RasterConfig((16, 16), sigma=5e-3, gamma=1e-2)
    out = render(s["verts"], s["mesh"].faces, K, cfg, s["colors"], s["next"], K1)
    sil, col, flow, cov = _brute(s, cfg)
    np.testing.assert_allclose(out.silhouette.numpy(), sil, atol=1e-9, rtol=0)
    np.testing.assert_allclose(out.color.numpy(), col, atol=1e-9, rtol=0)
    np.testing.assert_allclose(out.flow.numpy(), flow, atol=1e-9, rtol=0)


def _triangle(size=8, z=2.0):
    v = torch.tensor([[-3.0, -3.0, z], [3.0, -3.0, z], [0.0, 3.0, z]])
    K = Intrinsics(torch.tensor(float(size)), torch.tensor([(size - 1) / 2, (size - 1) / 2]))
    return v, np.array([[0, 2, 1]]), K


def test_deep_inside_saturates_and_far_pixel_empty():
    v, f, K = _triangle(16, z=6.0)
    v[:, :2] *= 0.5
    cfg = RasterConfig((16, 16), sigma=1e-4)
    sil = render_silhouette(v, f, K, cfg)
    assert sil[8, 8] > 0.99
    assert sil[0, 0] < 0.01 and sil[15, 15] < 0.01


def test_single_face_colour_and_empty_mesh():
    v, f, K = _triangle(16, z=6.0)
    cfg = RasterConfig((16, 16), sigma=1e-4, gamma=1e-4, background_color=(0.1, 0.2, 0.3))
    c = torch.tensor([0.7, 0.2, 0.5]).repeat(3, 1)
    img = render_color(v, f, c, K, cfg)
    np.testing.assert_allclose(img[8, 8].numpy(), [0.7, 0.2, 0.5], atol=1e-3)
    empty = render_color(torch.zeros(0, 3), np.zeros((0, 3), dtype=np.int64), torch.zeros(0, 3), K, cfg)
    np.testing.assert_allclose(empty.numpy(), np.broadcast_to([0.1, 0.2, 0.3], (16, 16, 3)))
    assert float(render_silhouette(torch.zeros(0, 3), np.zeros((0, 3), dtype=np.int64), K, cfg).abs().max()) == 0


def test_hard_z_limit_picks_nearest():
    v, f, K = _triangle(16, z=3.0)
    far = v.clone()
    far[:, 2] = 4.0
    far[:, :2] *= 4.0 / 3.0  # same image footprint
    verts = torch.cat([v, far])
    faces = np.array([[0, 2, 1], [3, 5, 4]])
    cols = torch.tensor([[1.0, 0, 0]] * 3 + [[0, 0, 1.0]] * 3)
    img = render_color(verts, faces, cols, K, RasterConfig((16, 16), sigma=1e-4, gamma=1e-6))
    np.testing.assert_allclose(img[8, 8].numpy(), [1, 0, 0], atol=1e-6)


def test_static_flow_zero_and_translation_flow_positive():
    m = make_icosphere(2)
    v = torch.as_tensor(m.vertices * 0.6 + [0, 0, 4.0])
    K = Intrinsics(torch.tensor(64.0), torch.tensor([31.5, 31.5]))
    cfg = RasterConfig((64, 64))
    flow, cov = render_flow(v, v, m.faces, K, K, cfg)
    assert cov.any() and float(flow[cov].abs().max()) < 1e-12
    d = torch.tensor([0.05, -0.02, 0.0])
    flow, cov = render_flow(v, v + d, m.faces, K, K, cfg)
    # each point moves by f d / Z at its own depth; the front surface spans Z in [3.4, 4]
    ratio = flow[cov] / (64.0 * d[:2] / 4.0)
    assert ((ratio > 0.99) & (ratio < 1.25)).all()


def test_translation_flow_planar_within_one_percent():
    # a fronto-parallel square at constant depth: flow is exactly f d / Z
    Z, f = 3.0, 64.0
    v = torch.tensor([[-1.0, -1.0, Z], [1.0, -1.0, Z], [1.0, 1.0, Z], [-1.0, 1.0, Z]])
    faces = np.array([[0, 2, 1], [0, 3, 2]])
    K = Intrinsics(torch.tensor(f), torch.tensor([31.5, 31.5]))
    d = torch.tensor([0.03, 0.01, 0.0])
    flow, cov = render_flow(v, v + d, faces, K, K, RasterConfig((64, 64)))
    expected = (f * d[:2] / Z).numpy()
    np.testing.assert_allclose(flow[cov].numpy(), np.broadcast_to(expected, flow[cov].shape), rtol=0.01)


def test_blend_weights_sum_to_one(toy_scene):
    s = toy_scene
    out = render(s["verts"], s["mesh"].faces, s["K"], s["cfg"], s["colors"])
    w, wb = out.fragments.blend_weights(s["cfg"].background_eps / s["cfg"].gamma)
    tot = wb.clone().index_add(0, out.fragments.pix, w)
    np.testing.assert_allclose(tot.detach().numpy(), 1.0, atol=1e-9)
    fw = out.fragments.face_weights()
    per = torch.zeros(out.fragments.num_pixels).index_add(0, out.fragments.pix, fw)
    has = torch.zeros(out.fragments.num_pixels, dtype=torch.bool)
    has[out.fragments.pix] = True
    np.testing.assert_allclose(per[has].detach().numpy(), 1.0, atol=1e-9)


@given(st.floats(1.0, 1.6))
def test_silhouette_monotone_under_enlargement(scale):
    v, f, K = _triangle(16, z=6.0)
    cfg = RasterConfig((16, 16), sigma=3e-3)
    c = v.mean(0)
    big = c + (v - c) * torch.tensor([scale, scale, 1.0])
    a = render_silhouette(v, f, K, cfg)
    b = render_silhouette(big, f, K, cfg)
    assert (b >= a - 1e-12).all()


def test_backward_contract(toy_scene):
    s = toy_scene
    verts = s["verts"].clone().requires_grad_(True)
    cols = s["colors"].clone().requires_grad_(True)
    K1 = Intrinsics(s["K1"].focal, s["K1"].principal_point)
    nxt = s["next"].clone().requires_grad_(True)
    out = render(verts, s["mesh"].faces, s["K"], s["cfg"], cols, nxt, K1)
    g = backward(out, grad_flow=torch.ones(8, 8, 2))
    assert float(g["vertices_next"].abs().sum()) > 0
    with pytest.raises(UsageError):
        backward(render(s["verts"], s["mesh"].faces, s["K"], s["cfg"]), grad_silhouette=torch.ones(8, 8))
    with pytest.raises(UsageError):
        backward(out)


def test_uncovered_face_colour_has_zero_gradient():
    v, f, K = _triangle(16, z=6.0)
    off = torch.tensor([[40.0, 40.0, 6.0], [41.0, 40.0, 6.0], [40.0, 41.0, 6.0]])
    verts = torch.cat([v, off])
    faces = np.array([[0, 2, 1], [3, 4, 5]])
    cols = torch.full((6, 3), 0.5, requires_grad=True)
    img = render_color(verts, faces, cols, K, RasterConfig((16, 16)))
    img.sum().backward()
    assert float(cols.grad[3:].abs().max()) == 0.0
    assert float(cols.grad[:3].abs().max()) > 0.0


def test_clip_convention():
    cfg = RasterConfig((8, 16))
    g = pixel_grid(cfg)
    assert g[0].tolist() == [0.0, 0.0] and g[-1].tolist() == [15.0, 7.0]
    c = to_clip(torch.tensor([[-0.5, -0.5], [15.5, 7.5]]), cfg)
    np.testing.assert_allclose(c.numpy(), [[-1, -1], [1, 1]])


def test_config_validation():
    with pytest.raises(ParameterError):
        RasterConfig((4, 8))
    with pytest.raises(ParameterError):
        RasterConfig(sigma=0.0)
