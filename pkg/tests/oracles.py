"""Independent reference implementations used as test oracles.

Everything here is written as plain per-pixel loops (or direct scalar
formulas) in float64, deliberately sharing no code with the package.
"""

import numpy as np


def conv2d_ref(x, w, b, stride, padding):
    """Quadruple-loop direct convolution."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    bn, ci, h, ww = x.shape
    co, ci2, kh, kw = w.shape
    assert ci == ci2
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (ww + 2 * padding - kw) // stride + 1
    xp = np.zeros((bn, ci, h + 2 * padding, ww + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + ww] = x
    out = np.zeros((bn, co, ho, wo))
    for n in range(bn):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def deconv2d_ref(x, w, b, stride, padding):
    """Direct transposed convolution: scatter each input pixel through the kernel."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    bn, ci, h, ww = x.shape
    ci2, co, kh, kw = w.shape
    assert ci == ci2
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (ww - 1) * stride - 2 * padding + kw
    out = np.zeros((bn, co, ho, wo))
    for n in range(bn):
        for c in range(ci):
            for i in range(h):
                for j in range(ww):
                    for o in range(co):
                        for u in range(kh):
                            for v in range(kw):
                                oi = i * stride - padding + u
                                oj = j * stride - padding + v
                                if 0 <= oi < ho and 0 <= oj < wo:
                                    out[n, o, oi, oj] += x[n, c, i, j] * w[c, o, u, v]
    for o in range(co):
        out[:, o] += b[o]
    return out


def bilinear_sample_ref(img, ys, xs):
    """Scalar bilinear lookup with border-clamped coordinates.

    img is (C, H, W); ys/xs are float coordinates of one sample point.
    """
    c, h, w = img.shape
    y = min(max(ys, 0.0), h - 1.0)
    x = min(max(xs, 0.0), w - 1.0)
    y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
    x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
    y1 = min(y0 + 1, h - 1)
    x1 = min(x0 + 1, w - 1)
    fy = y - y0
    fx = x - x0
    return (
        img[:, y0, x0] * (1 - fy) * (1 - fx)
        + img[:, y0, x1] * (1 - fy) * fx
        + img[:, y1, x0] * fy * (1 - fx)
        + img[:, y1, x1] * fy * fx
    )


def warp_ref(src, flow):
    """Per-pixel backward warp with bilinear sampling."""
    src = np.asarray(src, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    bn, c, h, w = src.shape
    out = np.zeros_like(src)
    for n in range(bn):
        for i in range(h):
            for j in range(w):
                xs = j + flow[n, 0, i, j]
                ys = i + flow[n, 1, i, j]
                out[n, :, i, j] = bilinear_sample_ref(src[n], ys, xs)
    return out


def upsample_bilinear_ref(x, scale):
    """Per-pixel bilinear upsampling with the half-pixel-center convention."""
    x = np.asarray(x, dtype=np.float64)
    bn, c, h, w = x.shape
    out = np.zeros((bn, c, h * scale, w * scale))
    for n in range(bn):
        for i in range(h * scale):
            for j in range(w * scale):
                ys = (i + 0.5) / scale - 0.5
                xs = (j + 0.5) / scale - 0.5
                out[n, :, i, j] = bilinear_sample_ref(x[n], ys, xs)
    return out


def census_loss_ref(a, b):
    """Scalar reference of the soft census distance, looped per pixel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    bn, c, h, w = a.shape
    offsets = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]

    def descriptor(img, n, ch, i, j):
        center = img[n, ch, i, j]
        desc = []
        for dy, dx in offsets:
            d = img[n, ch, i + dy, j + dx] - center
            desc.append(d / np.sqrt(0.81 + d * d))
        return desc

    total = 0.0
    count = 0
    for n in range(bn):
        for ch in range(c):
            for i in range(1, h - 1):
                for j in range(1, w - 1):
                    da = descriptor(a, n, ch, i, j)
                    db = descriptor(b, n, ch, i, j)
                    dist = 0.0
                    for qa, qb in zip(da, db):
                        q = qa - qb
                        dist += q * q / (0.1 + q * q)
                    total += dist
                    count += 1
    return total / count


def adamw_ref(theta, grads, lr, beta1, beta2, eps, weight_decay):
    """Scalar AdamW trajectory over a list of gradients."""
    m = 0.0
    v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        theta = theta - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * theta)
        out.append(theta)
    return out


def psnr_ref(a, b, peak=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
