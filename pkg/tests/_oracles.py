"""Independent reference computations used by the test-suite."""
import math

import numpy as np

FD_STEP = 1e-5
FD_WIDE = (2e-3, 1e-3)


def _five_point(f, flat, i, h) -> float:
    old = flat[i]
    vals = []
    for k in (-2, -1, 1, 2):
        flat[i] = old + k * h
        vals.append(float(f()))
    flat[i] = old
    return (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)


def numeric_grad(f, arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar function ``f()`` w.r.t. every entry of ``arr`` (mutated in place).

    Entries whose difference is tiny next to |f| are dominated by rounding at
    step ``h``. Those are re-estimated with five-point stencils at the two wide
    steps in ``FD_WIDE``; the wide value is kept only when both widths agree,
    so a ReLU kink inside the wide stencil falls back to the narrow estimate.
    """
    scale = max(1.0, abs(float(f())))
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
        if fp != fm and abs(gflat[i]) < 1e-4 * scale:
            wide, check = (_five_point(f, flat, i, w) for w in FD_WIDE)
            if abs(wide - check) <= 1e-11 * scale:
                gflat[i] = wide
    return grad


def max_rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def scalar_adam(p, grads, lr, b1, b2, eps):
    """Plain-python Adam on a scalar, one step per entry of ``grads``."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
    return p


def bilinear_reference(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Pixel-by-pixel half-pixel bilinear sampling of a (C, H, W) image."""
    C, H, W = img.shape
    out = np.zeros((C, oh, ow))
    for y in range(oh):
        sy = max((y + 0.5) * H / oh - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), H - 1)
        y1 = min(y0 + 1, H - 1)
        fy = sy - y0
        for x in range(ow):
            sx = max((x + 0.5) * W / ow - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), W - 1)
            x1 = min(x0 + 1, W - 1)
            fx = sx - x0
            out[:, y, x] = (
                (1 - fy) * (1 - fx) * img[:, y0, x0]
                + (1 - fy) * fx * img[:, y0, x1]
                + fy * (1 - fx) * img[:, y1, x0]
                + fy * fx * img[:, y1, x1]
            )
    return out


def conv2d_reference(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    N, C, H, W = x.shape
    Co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, Co, Ho, Wo))
    for n in range(N):
        for o in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


def grad_error(op, arrays, rng) -> float:
    """Worst relative error between backward and central differences for ``sum(op(*inputs) * proj)``."""
    from ddistill import tensor as T
    from ddistill.tensor import Tensor

    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*inputs)
    proj = rng.standard_normal(out.shape)

    def loss():
        return T.sum(T.mul(op(*inputs), Tensor(proj))).item()

    T.sum(T.mul(out, Tensor(proj))).backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, max_rel_err(analytic, numeric_grad(loss, t.data)))
    return worst
