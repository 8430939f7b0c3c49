"""Shared oracles for the test suite."""
import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x.copy())
        x[idx] = old - h
        fm = f(x.copy())
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    """Max-norm relative error with a floor so that near-zero gradients compare absolutely."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-6)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def quat_rotation(axis_angle) -> np.ndarray:
    """Rotation matrix via unit quaternion (independent of Rodrigues)."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(v)
    if theta == 0:
        return np.eye(3)
    w = np.cos(theta / 2)
    x, y, z = np.sin(theta / 2) * v / theta
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# -- brute-force metric oracles --------------------------------------------------

def brute_surface(mask):
    out = []
    nx, ny, nz = mask.shape
    for i, j, k in np.argwhere(mask):
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = i + d[0], j + d[1], k + d[2]
            if not (0 <= a < nx and 0 <= b < ny and 0 <= c < nz) or not mask[a, b, c]:
                out.append((i, j, k))
                break
    return np.array(out, dtype=np.float64).reshape(-1, 3)


def brute_assd(p, r, spacing):
    sp, sr = brute_surface(p) * spacing, brute_surface(r) * spacing
    d = np.sqrt(((sp[:, None, :] - sr[None, :, :]) ** 2).sum(-1))
    return (d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(sp) + len(sr))


def brute_dice(p, r):
    inter = sum(1 for x in zip(p.ravel(), r.ravel()) if x[0] and x[1])
    total = int(p.sum() + r.sum())
    return 1.0 if total == 0 else 2 * inter / total


# -- independent slice objective ------------------------------------------------------

def slice_loss_oracle(params, skip_layer, plane, labels, z, axis_angle, translation,
                      reg_weight=1e-4, masks=None, smooth=1e-6):
    """CE + soft Dice + reg on one slice, written directly in numpy.

    With ``masks`` (the ReLU on/off pattern of a previous call) the
    activations follow that fixed pattern, which makes the loss smooth in
    every input so finite differences can use a comfortable step.
    Returns ``(loss, masks)``.
    """
    r = quat_rotation(axis_angle)
    rows, cols = np.indices(labels.shape)
    rows, cols = rows.ravel(), cols.ravel()
    pts = (plane.anchor + translation + plane.alphas[cols, None] * (r @ plane.basis_u)
           + plane.betas[rows, None] * (r @ plane.basis_v))
    inp = np.concatenate([pts, np.broadcast_to(z, (len(pts), len(z)))], axis=1)
    h, used = inp, []
    k = 0
    while f"hidden{k}.weight" in params:
        if k == skip_layer:
            h = np.concatenate([h, inp], axis=1)
        pre = h @ params[f"hidden{k}.weight"] + params[f"hidden{k}.bias"]
        on = pre > 0 if masks is None else masks[k]
        used.append(on)
        h = pre * on
        k += 1
    logits = h @ params["out.weight"] + params["out.bias"]
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    y = labels.ravel()
    ce = -np.mean(logp[np.arange(len(y)), y])
    p = np.exp(logp)
    scores = []
    for c in np.unique(y):
        t = (y == c).astype(np.float64)
        scores.append((2 * np.sum(p[:, c] * t) + smooth) / (np.sum(p[:, c]) + np.sum(t) + smooth))
    return ce + (1 - np.mean(scores)) + reg_weight * float(z @ z), used
