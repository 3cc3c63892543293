"""Independent scalar reference implementations used as test oracles.

These deliberately share no code with the package: plain Python floats and
loops over pixels, faces, vertices and edges.
"""
from __future__ import annotations

import math

import numpy as np


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _seg_dist2(px, py, ax, ay, bx, by):
    ex, ey = bx - ax, by - ay
    L = ex * ex + ey * ey
    t = 0.0 if L == 0 else ((px - ax) * ex + (py - ay) * ey) / L
    t = min(1.0, max(0.0, t))
    dx, dy = px - (ax + t * ex), py - (ay + t * ey)
    return dx * dx + dy * dy


def brute_render(verts, faces, focal, pp, size, sigma, gamma, colors=None, verts_next=None,
                 focal_next=None, pp_next=None, background=(0.0, 0.0, 0.0), depth_near=0.1,
                 depth_far=100.0, background_eps=1e-3, cull_eps=None, coverage_eps=1e-4, near=1e-3):
    """Per-pixel evaluation of the soft silhouette / colour / flow formulas."""
    H, W = size
    V = [tuple(map(float, v)) for v in np.asarray(verts)]
    F = [tuple(map(int, f)) for f in np.asarray(faces)]
    C = None if colors is None else [tuple(map(float, c)) for c in np.asarray(colors)]
    Vn = None if verts_next is None else [tuple(map(float, v)) for v in np.asarray(verts_next)]
    fn = focal if focal_next is None else focal_next
    ppn = pp if pp_next is None else pp_next

    def proj(p, f, c):
        return f * p[0] / p[2] + c[0], f * p[1] / p[2] + c[1]

    clip = []
    for v in V:
        if v[2] > near:
            x, y = proj(v, focal, pp)
            clip.append(((x + 0.5) * 2.0 / W - 1.0, (y + 0.5) * 2.0 / H - 1.0))
        else:
            clip.append(None)
    margin2 = None if cull_eps is None else sigma * math.log(1.0 / cull_eps)
    sil = np.zeros((H, W))
    col = np.zeros((H, W, 3))
    flow = np.zeros((H, W, 2))
    cov = np.zeros((H, W), dtype=bool)
    for iy in range(H):
        for ix in range(W):
            px, py = (ix + 0.5) * 2.0 / W - 1.0, (iy + 0.5) * 2.0 / H - 1.0
            prod = 1.0
            contrib = []  # (log weight, bary, face)
            for fi, (a, b, c) in enumerate(F):
                if clip[a] is None or clip[b] is None or clip[c] is None:
                    continue
                (ax, ay), (bx, by), (cx, cy) = clip[a], clip[b], clip[c]
                d2 = min(_seg_dist2(px, py, ax, ay, bx, by), _seg_dist2(px, py, bx, by, cx, cy),
                         _seg_dist2(px, py, cx, cy, ax, ay))
                area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
                if abs(area) > 1e-14:
                    w = [((bx - px) * (cy - py) - (by - py) * (cx - px)) / area,
                         ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area,
                         ((ax - px) * (by - py) - (ay - py) * (bx - px)) / area]
                    inside = all(x >= 0 for x in w)
                else:
                    w, inside = [1 / 3] * 3, False
                if margin2 is not None and not inside and d2 > margin2:
                    continue
                D = _sigmoid((d2 if inside else -d2) / sigma)
                prod *= 1.0 - D
                wc = [max(x, 0.0) for x in w]
                s = sum(wc)
                wc = [x / s for x in wc]
                z = [V[a][2], V[b][2], V[c][2]]
                inv = [wc[k] / z[k] for k in range(3)]
                zs = sum(inv)
                bary = [x / zs for x in inv]
                zpix = 1.0 / zs
                zn = (depth_far - zpix) / (depth_far - depth_near)
                contrib.append((math.log(D) + zn / gamma, bary, (a, b, c)))
            sil[iy, ix] = 1.0 - prod
            if not contrib:
                col[iy, ix] = background
                continue
            bg = background_eps / gamma
            m = max(bg, max(c[0] for c in contrib))
            ws = [math.exp(c[0] - m) for c in contrib]
            wb = math.exp(bg - m)
            tot = sum(ws) + wb
            if C is not None:
                pix = [wb / tot * background[k] for k in range(3)]
                for wi, (_, bary, fidx) in zip(ws, contrib):
                    for k in range(3):
                        pix[k] += wi / tot * sum(bary[j] * C[fidx[j]][k] for j in range(3))
                col[iy, ix] = pix
            covered = sil[iy, ix] > coverage_eps
            if Vn is not None and covered:
                mf = max(c[0] for c in contrib)
                wf = [math.exp(c[0] - mf) for c in contrib]
                tf = sum(wf)
                X0 = [0.0, 0.0, 0.0]
                X1 = [0.0, 0.0, 0.0]
                for wi, (_, bary, fidx) in zip(wf, contrib):
                    for k in range(3):
                        X0[k] += wi / tf * sum(bary[j] * V[fidx[j]][k] for j in range(3))
                        X1[k] += wi / tf * sum(bary[j] * Vn[fidx[j]][k] for j in range(3))
                if X0[2] > near and X1[2] > near:
                    p0, p1 = proj(X0, focal, pp), proj(X1, fn, ppn)
                    flow[iy, ix] = (p1[0] - p0[0], p1[1] - p0[1])
                    cov[iy, ix] = True
            elif covered:
                cov[iy, ix] = True
    return sil, col, flow, cov


def brute_chamfer(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)

    def one(x, y):
        tot = 0.0
        for p in x:
            best = math.inf
            for q in y:
                best = min(best, math.sqrt(sum((p[k] - q[k]) ** 2 for k in range(3))))
            tot += best
        return tot / len(x)

    return 0.5 * (one(a, b) + one(b, a))


def one_rings(faces, n):
    ring = [set() for _ in range(n)]
    for f in np.asarray(faces):
        for i in range(3):
            for j in range(3):
                if i != j:
                    ring[int(f[i])].add(int(f[j]))
    return ring


def brute_laplacian(verts, faces):
    V = np.asarray(verts, float)
    ring = one_rings(faces, len(V))
    out = np.zeros_like(V)
    for i, r in enumerate(ring):
        for k in range(3):
            out[i, k] = V[i, k] - sum(V[j, k] for j in r) / len(r)
    return out


def brute_smoothness(verts, faces):
    L = brute_laplacian(verts, faces)
    return sum(sum(x * x for x in row) for row in L) / len(L)


def brute_arap(Vt, Vt1, faces):
    ring = one_rings(faces, len(Vt))
    tot, cnt = 0.0, 0
    for i, r in enumerate(ring):
        for j in r:
            l0 = math.sqrt(sum((Vt[i][k] - Vt[j][k]) ** 2 for k in range(3)))
            l1 = math.sqrt(sum((Vt1[i][k] - Vt1[j][k]) ** 2 for k in range(3)))
            tot += abs(l0 - l1)
            cnt += 1
    return tot / cnt


def brute_least_motion(Vt, rest):
    return sum(math.sqrt(sum((Vt[i][k] - rest[i][k]) ** 2 for k in range(3))) for i in range(len(Vt))) / len(Vt)


def brute_skin_weights(centers, precisions, verts):
    """Column-normalised Gaussian weights with math.fsum for accuracy."""
    B, N = len(centers), len(verts)
    W = np.zeros((B, N))
    for i in range(N):
        logs = []
        for b in range(B):
            d = [verts[i][k] - centers[b][k] for k in range(3)]
            q = math.fsum(d[r] * precisions[b][r][c] * d[c] for r in range(3) for c in range(3))
            logs.append(-0.5 * q)
        m = max(logs)
        ex = [math.exp(x - m) for x in logs]
        s = math.fsum(ex)
        for b in range(B):
            W[b, i] = ex[b] / s
    return W
