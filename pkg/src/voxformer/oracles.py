"""Slow reference implementations used to cross-check the vectorized code.

Everything here works on plain numpy arrays and python loops and does not
import the module it is meant to check.
"""

from __future__ import annotations

import math

import numpy as np


def _np(t) -> np.ndarray:
    if hasattr(t, "detach"):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype=np.float64)


def _linear(layer):
    w = _np(layer.weight)
    b = _np(layer.bias) if layer.bias is not None else np.zeros(w.shape[0])
    return lambda x: x @ w.T + b


def _layer_norm(layer, x):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + layer.eps) * _np(layer.weight) + _np(layer.bias)


def _gelu(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def window_members(coords, n: int) -> list[list[int]]:
    """For each voxel, rows of the voxels inside its n^3 window, by direct comparison."""
    c = np.asarray(coords, dtype=np.int64)
    lo = -(n // 2)
    out = []
    for i in range(len(c)):
        d = c - c[i]
        ok = np.all((d >= lo) & (d <= lo + n - 1), axis=1)
        out.append([int(j) for j in np.nonzero(ok)[0]])
    return out


def attention_oracle(feats, coords, params, members) -> tuple[np.ndarray, list[np.ndarray]]:
    """Multi-head attention, one center at a time, with the position term added to K and V.

    Returns the attention output (before the residual and feed-forward) and
    the per-center (heads, |members|) weight matrices.
    """
    x = _np(feats)
    c = np.asarray(coords, dtype=np.float64)
    h, d = params.heads, params.head_dim
    q, k, v = _linear(params.w_q)(x), _linear(params.w_k)(x), _linear(params.w_v)(x)
    wp, wo = _linear(params.w_p), _linear(params.w_o)
    out = np.zeros_like(x)
    weights = []
    for i, js in enumerate(members):
        js = np.asarray(js)
        p = wp(c[js] - c[i])
        kk = (k[js] + p).reshape(len(js), h, d)
        vv = (v[js] + p).reshape(len(js), h, d)
        qi = q[i].reshape(h, d)
        s = np.einsum("hd,jhd->hj", qi, kk) / math.sqrt(d)
        s = s - s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        weights.append(w)
        out[i] = np.einsum("hj,jhd->hd", w, vv).reshape(-1)
    return wo(out), weights


def attention_block_oracle(feats, coords, params, members) -> np.ndarray:
    x = _np(feats)
    att, _ = attention_oracle(_layer_norm(params.norm1, x), coords, params, members)
    x = x + att
    ffn = _linear(params.ffn2)(_gelu(_linear(params.ffn1)(_layer_norm(params.norm2, x))))
    return x + ffn


def dense_attention_oracle(feats, coords, params) -> np.ndarray:
    """Every voxel attends to every voxel: plain dense multi-head attention."""
    members = [list(range(len(coords)))] * len(coords)
    return attention_block_oracle(feats, coords, params, members)


def dilate_oracle(coords, dims) -> set:
    out = set()
    for x, y, z in np.asarray(coords).tolist():
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    p = (x + dx, y + dy, z + dz)
                    if all(0 <= p[a] < dims[a] for a in range(3)):
                        out.add(p)
    return out


def downsample_oracle(coords, feats) -> dict:
    """parent coordinate -> mean child feature, by dictionary grouping."""
    groups: dict = {}
    f = _np(feats)
    for row, (x, y, z) in enumerate(np.asarray(coords).tolist()):
        groups.setdefault((x // 2, y // 2, z // 2), []).append(f[row])
    return {k: np.mean(v, axis=0) for k, v in groups.items()}


def sparsify_oracle(coords, occ: dict, threshold: float = 0.5) -> set:
    """Voxels whose parent occupancy (missing = 0) reaches the threshold."""
    keep = set()
    for x, y, z in np.asarray(coords).tolist():
        if occ.get((x // 2, y // 2, z // 2), 0.0) >= threshold:
            keep.add((x, y, z))
    return keep


def select_views_oracle(poses, min_translation: float = 0.1, min_rotation_deg: float = 15.0) -> list[int]:
    """Keyframe gate only (no subsampling), one pose pair at a time."""
    kept = [0]
    for i in range(1, len(poses)):
        a, b = np.asarray(poses[i], dtype=np.float64), np.asarray(poses[kept[-1]], dtype=np.float64)
        ca = -a[:3, :3].T @ a[:3, 3]
        cb = -b[:3, :3].T @ b[:3, 3]
        rel = a[:3, :3] @ b[:3, :3].T
        angle = math.degrees(math.acos(max(-1.0, min(1.0, (rel[0, 0] + rel[1, 1] + rel[2, 2] - 1) / 2))))
        if math.dist(ca, cb) > min_translation and angle > min_rotation_deg:
            kept.append(i)
    return kept


def pair_count_oracle(coords, n: int) -> int:
    return sum(len(m) for m in window_members(coords, n))


def fuse_oracle(feats_per_view, seen_per_view, weight_net) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel loop of the variance-weighted fusion.

    Returns (rows of voxels seen by any view, fused features per such voxel).
    """
    fc1, fc2 = _linear(weight_net.fc1), _linear(weight_net.fc2)
    feats = [_np(f) for f in feats_per_view]
    seen = [np.asarray(s, dtype=bool) for s in seen_per_view]
    rows, out = [], []
    for r in range(feats[0].shape[0]):
        views = [i for i in range(len(feats)) if seen[i][r]]
        if not views:
            continue
        vals = np.stack([feats[i][r] for i in views])
        mean = vals.mean(axis=0)
        var = (vals - mean) ** 2
        logits = np.array([fc2(_gelu(fc1(np.concatenate([vals[k], var[k]]))))[0] for k in range(len(views))])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        fused = (vals * w[:, None]).sum(axis=0) / len(views)
        rows.append(r)
        out.append(np.concatenate([fused, var.mean(axis=0)]))
    return np.asarray(rows), np.asarray(out)


def tsdf_loss_oracle(pred, gt, eps: float = 1e-4) -> float:
    total = 0.0
    for s, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        term = abs(math.log(abs(s) + eps) - math.log(abs(g) + eps))
        if (s < 0) != (g < 0):
            term += abs(s - g)
        total += term
    return total / len(np.ravel(pred))


def bce_oracle(prob, target, clamp: float = 1e-6) -> float:
    total = 0.0
    for p, t in zip(np.ravel(prob).tolist(), np.ravel(target).tolist()):
        p = min(max(p, clamp), 1 - clamp)
        total -= t * math.log(p) + (1 - t) * math.log(1 - p)
    return total / len(np.ravel(prob))


def nearest_distances(a, b) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest point in ``b`` (all pairs)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(len(a))
    for s in range(0, len(a), 512):
        d = np.linalg.norm(a[s : s + 512, None, :] - b[None, :, :], axis=-1)
        out[s : s + 512] = d.min(axis=1)
    return out


def point_metrics_oracle(pred, gt, tau: float) -> dict:
    dp, dg = nearest_distances(pred, gt), nearest_distances(gt, pred)
    prec, rec = float(np.mean(dp < tau)), float(np.mean(dg < tau))
    f = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"acc": dp.mean(), "comp": dg.mean(), "prec": prec, "recall": rec, "fscore": f}


def depth_metrics_oracle(pred, gt) -> dict:
    rows = [(p, g) for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()) if p > 0 and g > 0]
    n = len(rows)
    out = {
        "abs_rel": sum(abs(p - g) / g for p, g in rows) / n,
        "abs_diff": sum(abs(p - g) for p, g in rows) / n,
        "sq_rel": sum((p - g) ** 2 / g for p, g in rows) / n,
        "rmse": math.sqrt(sum((p - g) ** 2 for p, g in rows) / n),
    }
    for i in (1, 2, 3):
        out[f"delta{i}"] = sum(max(p / g, g / p) < 1.25**i for p, g in rows) / n
    return out


def sphere_tsdf(radius: float, dims: int, voxel: float, center=None):
    """Analytic TSDF values of a sphere sampled on a cube grid centered on the origin."""
    center = np.zeros(3) if center is None else np.asarray(center)
    origin = -0.5 * (dims - 1) * voxel * np.ones(3)
    axes = [origin[i] + voxel * np.arange(dims) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    sdf = np.linalg.norm(pts - center, axis=-1) - radius
    return np.clip(sdf / (3 * voxel), -1, 1), origin
