"""Dense two-frame optical flow (Farneback polynomial expansion).

Each frame is locally approximated by a quadratic polynomial via
Gaussian-weighted least squares; displacement between two frames follows from
how the polynomial coefficients transform under translation.  A coarse-to-fine
image pyramid with iterative refinement handles large motions.

Flow convention: ``dx`` is the column (horizontal) displacement and ``dy`` the
row (vertical) displacement that moves content of the first frame onto the
second, in pixels per frame step.

Internal math runs in float64 for float64 input and float32 otherwise;
quantization is the caller's business (see :mod:`swimbout.augment`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class FlowParams:
    pyramid_scale: float = 0.8
    levels: int = 10
    window: int = 10
    iterations: int = 10
    poly_n: int = 13
    poly_sigma: float = 1.8

    def __post_init__(self):
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ValueError("pyramid_scale must be in (0, 1)")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.poly_n % 2 == 0:
            raise ValueError("poly_n must be odd")


#: Parameter set used for the production 256x256 flow stacks.
PAPER_FLOW_PARAMS = FlowParams()

#: Cheap parameter set for the CPU-scale 64x64 pipeline and fast tests.
DESK_FLOW_PARAMS = FlowParams(pyramid_scale=0.5, levels=3, window=9,
                              iterations=2, poly_n=7, poly_sigma=1.2)


@dataclass
class FlowField:
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape:
            raise ValueError("dx and dy must share a shape")

    @property
    def shape(self):
        return self.dx.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)


def _work_dtype(arr: np.ndarray):
    return np.float64 if arr.dtype == np.float64 else np.float32


def _expand_stack(frames: np.ndarray, poly_n: int, poly_sigma: float):
    """Polynomial expansion of a (T, H, W) stack; see polynomial_expansion."""
    f = frames
    n = poly_n // 2
    t = np.arange(-n, n + 1, dtype=f.dtype)
    g = np.exp(-(t ** 2) / (2.0 * poly_sigma ** 2))

    def corr(img, wx, wy):
        tmp = ndimage.correlate1d(img, wy, axis=-2, mode="nearest")
        return ndimage.correlate1d(tmp, wx, axis=-1, mode="nearest")

    g0, g1, g2 = g, g * t, g * t * t
    m = np.stack([
        corr(f, g0, g0),   # 1
        corr(f, g1, g0),   # x
        corr(f, g0, g1),   # y
        corr(f, g2, g0),   # x^2
        corr(f, g0, g2),   # y^2
        corr(f, g1, g1),   # xy
    ], axis=-1)

    # Gram matrix of the monomial basis under the separable Gaussian weight
    xg, yg = np.meshgrid(t, t)
    w2 = np.outer(g, g)
    basis = np.stack([np.ones_like(xg), xg, yg, xg ** 2, yg ** 2, xg * yg])
    gram = np.einsum("ihw,jhw,hw->ij", basis, basis, w2)
    r = m @ np.linalg.inv(gram).T.astype(f.dtype)

    c = r[..., 0]
    b = np.ascontiguousarray(r[..., 1:3])
    a = np.empty(f.shape + (2, 2), dtype=f.dtype)
    a[..., 0, 0] = r[..., 3]
    a[..., 1, 1] = r[..., 4]
    a[..., 0, 1] = a[..., 1, 0] = r[..., 5] / 2.0
    return a, b, c


def polynomial_expansion(frame: np.ndarray, poly_n: int, poly_sigma: float):
    """Fit f(x) ~ x^T A x + b^T x + c around every pixel.

    Returns (A, b, c) with shapes (H, W, 2, 2), (H, W, 2) and (H, W); vector
    components are ordered (x, y) = (column, row) offsets from the pixel.
    Borders use clamped-edge padding.
    """
    if poly_n % 2 == 0:
        raise ValueError("poly_n must be odd")
    if poly_sigma <= 0:
        raise ValueError("poly_sigma must be positive")
    frame = np.asarray(frame)
    f = frame.astype(_work_dtype(frame))[None]
    a, b, c = _expand_stack(f, poly_n, poly_sigma)
    return a[0], b[0], c[0]


def _resize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    zoom = [1.0] * (img.ndim - 2)
    zoom += [shape[0] / img.shape[-2], shape[1] / img.shape[-1]]
    return ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)


try:  # compiled warp kernel; pure-numpy fallback keeps numba optional
    from numba import njit as _njit
except ImportError:  # pragma: no cover
    _njit = None

if _njit is not None:
    @_njit(cache=True, fastmath=True)
    def _warp_products_compiled(planes1, planes2, dx, dy, prods):
        """One fused refinement step: warp the second frame's expansion by
        the current flow and emit the five normal-equation products.

        ``planes1``/``planes2`` stack the expansion as (A00, A01, A10, A11,
        b0, b1); ``prods`` receives (g11, g12, g22, h1, h2) per pixel.
        """
        h, w, _ = planes2.shape
        for i in range(h):
            for j in range(w):
                r = i + dy[i, j]
                c = j + dx[i, j]
                if r < 0.0:
                    r = 0.0
                elif r > h - 1:
                    r = float(h - 1)
                if c < 0.0:
                    c = 0.0
                elif c > w - 1:
                    c = float(w - 1)
                r0 = int(r)
                c0 = int(c)
                r1 = r0 + 1 if r0 + 1 < h else r0
                c1 = c0 + 1 if c0 + 1 < w else c0
                fr = r - r0
                fc = c - c0
                w00 = (1.0 - fr) * (1.0 - fc)
                w01 = (1.0 - fr) * fc
                w10 = fr * (1.0 - fc)
                w11 = fr * fc
                axx = 0.5 * (planes1[i, j, 0]
                             + w00 * planes2[r0, c0, 0]
                             + w01 * planes2[r0, c1, 0]
                             + w10 * planes2[r1, c0, 0]
                             + w11 * planes2[r1, c1, 0])
                axy = 0.5 * (planes1[i, j, 1]
                             + w00 * planes2[r0, c0, 1]
                             + w01 * planes2[r0, c1, 1]
                             + w10 * planes2[r1, c0, 1]
                             + w11 * planes2[r1, c1, 1])
                ayx = 0.5 * (planes1[i, j, 2]
                             + w00 * planes2[r0, c0, 2]
                             + w01 * planes2[r0, c1, 2]
                             + w10 * planes2[r1, c0, 2]
                             + w11 * planes2[r1, c1, 2])
                ayy = 0.5 * (planes1[i, j, 3]
                             + w00 * planes2[r0, c0, 3]
                             + w01 * planes2[r0, c1, 3]
                             + w10 * planes2[r1, c0, 3]
                             + w11 * planes2[r1, c1, 3])
                b2w0 = (w00 * planes2[r0, c0, 4]
                        + w01 * planes2[r0, c1, 4]
                        + w10 * planes2[r1, c0, 4]
                        + w11 * planes2[r1, c1, 4])
                b2w1 = (w00 * planes2[r0, c0, 5]
                        + w01 * planes2[r0, c1, 5]
                        + w10 * planes2[r1, c0, 5]
                        + w11 * planes2[r1, c1, 5])
                db0 = (-0.5 * (b2w0 - planes1[i, j, 4])
                       + axx * dx[i, j] + axy * dy[i, j])
                db1 = (-0.5 * (b2w1 - planes1[i, j, 5])
                       + ayx * dx[i, j] + ayy * dy[i, j])
                prods[i, j, 0] = axx * axx + axy * axy
                prods[i, j, 1] = axx * ayx + axy * ayy
                prods[i, j, 2] = ayx * ayx + ayy * ayy
                prods[i, j, 3] = axx * db0 + axy * db1
                prods[i, j, 4] = ayx * db0 + ayy * db1

    @_njit(cache=True, fastmath=True)
    def _solve_compiled(sums, dx, dy):
        h, w, _ = sums.shape
        for i in range(h):
            for j in range(w):
                g11 = sums[i, j, 0]
                g12 = sums[i, j, 1]
                g22 = sums[i, j, 2]
                h1 = sums[i, j, 3]
                h2 = sums[i, j, 4]
                det = g11 * g22 - g12 * g12
                if det < 1e-9 and det > -1e-9:
                    det = 1e-9
                dx[i, j] = (g22 * h1 - g12 * h2) / det
                dy[i, j] = (g11 * h2 - g12 * h1) / det


def _bilinear_weights(dx: np.ndarray, dy: np.ndarray):
    """Shared gather indices + fractional weights for clamped-edge bilinear
    sampling at (row + dy, col + dx); reused across all warped planes."""
    h, w = dx.shape
    rr = np.clip(np.arange(h, dtype=dx.dtype)[:, None] + dy, 0, h - 1)
    cc = np.clip(np.arange(w, dtype=dx.dtype)[None, :] + dx, 0, w - 1)
    r0 = np.floor(rr).astype(np.intp)
    c0 = np.floor(cc).astype(np.intp)
    np.minimum(r0, max(h - 2, 0), out=r0)
    np.minimum(c0, max(w - 2, 0), out=c0)
    fr = (rr - r0)[..., None]
    fc = (cc - c0)[..., None]
    off_r = w if h > 1 else 0
    off_c = 1 if w > 1 else 0
    return r0 * w + c0, fr, fc, off_r, off_c


def _warp_planes(planes: np.ndarray, weights) -> np.ndarray:
    """Bilinear warp of (H, W, K) planes with precomputed weights."""
    idx, fr, fc, off_r, off_c = weights
    flat = planes.reshape(-1, planes.shape[-1])
    p00 = flat[idx]
    p01 = flat[idx + off_c]
    p10 = flat[idx + off_r]
    p11 = flat[idx + off_r + off_c]
    top = p00 + (p01 - p00) * fc
    bot = p10 + (p11 - p10) * fc
    return top + (bot - top) * fr


def _refine_level(exp1, exp2, dx, dy, params: FlowParams, skip_warp_first: bool):
    a1, b1 = exp1
    a2, b2 = exp2
    h, w = b1.shape[:2]
    planes2 = np.concatenate([a2.reshape(h, w, 4), b2], axis=-1)
    win = max(3, int(params.window))

    if _njit is not None:
        # Fused path: warping with the current flow is the identity when the
        # flow is still zero, so the skip_warp_first shortcut is implicit.
        planes1 = np.concatenate([a1.reshape(h, w, 4), b1], axis=-1)
        dx = np.ascontiguousarray(dx, dtype=planes1.dtype)
        dy = np.ascontiguousarray(dy, dtype=planes1.dtype)
        prods = np.empty((h, w, 5), dtype=planes1.dtype)
        for _ in range(params.iterations):
            _warp_products_compiled(planes1, planes2, dx, dy, prods)
            sums = ndimage.uniform_filter1d(prods, win, axis=0,
                                            mode="nearest")
            sums = ndimage.uniform_filter1d(sums, win, axis=1,
                                            mode="nearest")
            _solve_compiled(sums, dx, dy)
        return dx, dy

    for it in range(params.iterations):
        if it == 0 and skip_warp_first:
            a2w, b2w = a2, b2
        else:
            warped = _warp_planes(planes2, _bilinear_weights(dx, dy))
            a2w = warped[..., :4].reshape(h, w, 2, 2)
            b2w = warped[..., 4:]
        a = 0.5 * (a1 + a2w)
        db = -0.5 * (b2w - b1)
        axx = a[..., 0, 0]
        axy = a[..., 0, 1]
        ayx = a[..., 1, 0]
        ayy = a[..., 1, 1]
        db0 = db[..., 0] + axx * dx + axy * dy
        db1 = db[..., 1] + ayx * dx + ayy * dy

        prods = np.stack([axx * axx + axy * axy,
                          axx * ayx + axy * ayy,
                          ayx * ayx + ayy * ayy,
                          axx * db0 + axy * db1,
                          ayx * db0 + ayy * db1], axis=-1)
        sums = ndimage.uniform_filter1d(prods, win, axis=0, mode="nearest")
        sums = ndimage.uniform_filter1d(sums, win, axis=1, mode="nearest")
        g11, g12, g22 = sums[..., 0], sums[..., 1], sums[..., 2]
        h1, h2 = sums[..., 3], sums[..., 4]
        det = g11 * g22 - g12 * g12
        det = np.where(np.abs(det) < 1e-9, 1e-9, det)
        dx = (g22 * h1 - g12 * h2) / det
        dy = (g11 * h2 - g12 * h1) / det
    return dx, dy


def _pyramid_shapes(shape: tuple[int, int], params: FlowParams):
    shapes = [shape]
    for _ in range(1, params.levels):
        h, w = shapes[-1]
        nh = max(1, int(round(h * params.pyramid_scale)))
        nw = max(1, int(round(w * params.pyramid_scale)))
        if (nh, nw) == shapes[-1]:
            break
        shapes.append((nh, nw))
    return shapes


class FlowPyramid:
    """Reusable multi-scale expansions of one frame stack.

    Downscaled frames are built eagerly; the (much larger) polynomial
    expansions are computed lazily per (level, frame) and cached, as are the
    solved pair flows.  This makes flow between arbitrary frame pairs of the
    same stack cheap — e.g. the random subsamples of one event share most of
    their consecutive-frame pairs.
    """

    def __init__(self, frames: np.ndarray,
                 params: FlowParams = PAPER_FLOW_PARAMS):
        frames = np.asarray(frames)
        if frames.ndim != 3:
            raise ValueError("expected a (T, H, W) stack")
        self.params = params
        self.dtype = _work_dtype(frames)
        stack = frames.astype(self.dtype, copy=False)
        self.n_frames = stack.shape[0]

        self.shapes = _pyramid_shapes(stack.shape[1:], params)
        smooth_sigma = 1.0 / params.pyramid_scale - 1.0
        self.pyramid = [stack]
        for shape in self.shapes[1:]:
            smoothed = ndimage.gaussian_filter(
                self.pyramid[-1], (0, smooth_sigma, smooth_sigma),
                mode="nearest")
            self.pyramid.append(_resize(smoothed, shape))

        self.usable = [min(s) >= params.poly_n for s in self.shapes]
        for level, ok in enumerate(self.usable):
            if not ok:
                warnings.warn(f"pyramid level {level} of size "
                              f"{self.shapes[level]} smaller than "
                              f"poly_n={params.poly_n}; skipped")
        self._expansions: dict[tuple[int, int], tuple] = {}
        self._flows: dict[tuple[int, int], FlowField] = {}

    def _expansion(self, level: int, t: int):
        key = (level, t)
        if key not in self._expansions:
            a, b, _ = _expand_stack(self.pyramid[level][t:t + 1],
                                    self.params.poly_n,
                                    self.params.poly_sigma)
            self._expansions[key] = (a[0], b[0])
        return self._expansions[key]

    def flow(self, i: int, j: int) -> FlowField:
        """Flow from frame ``i`` to frame ``j``, cached per pair."""
        if not (0 <= i < self.n_frames and 0 <= j < self.n_frames):
            raise IndexError(f"frame pair ({i}, {j}) out of range")
        key = (i, j)
        if key in self._flows:
            return self._flows[key]
        dt = self.dtype
        dx = dy = None
        for level in range(len(self.shapes) - 1, -1, -1):
            shape = self.shapes[level]
            first_level = dx is None
            if first_level:
                dx = np.zeros(shape, dtype=dt)
                dy = np.zeros(shape, dtype=dt)
            else:
                sy = shape[0] / dx.shape[0]
                sx = shape[1] / dx.shape[1]
                dx = _resize(dx, shape) * dt(sx)
                dy = _resize(dy, shape) * dt(sy)
            if not self.usable[level]:
                continue
            dx, dy = _refine_level(self._expansion(level, i),
                                   self._expansion(level, j),
                                   dx, dy, self.params,
                                   skip_warp_first=first_level)
        if not (np.isfinite(dx).all() and np.isfinite(dy).all()):
            raise FloatingPointError(f"non-finite flow values in pair "
                                     f"({i}, {j})")
        field = FlowField(dx, dy)
        self._flows[key] = field
        return field


def flow_stack(frames: np.ndarray,
               params: FlowParams = PAPER_FLOW_PARAMS) -> list[FlowField]:
    """Flow between each consecutive pair of a (T, H, W) frame stack.

    Equivalent to calling :func:`farneback_flow` on each pair but shares the
    per-frame polynomial expansions between the pairs that use them.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValueError("expected a (T, H, W) stack")
    if frames.shape[0] < 2:
        return []
    pyr = FlowPyramid(frames, params)
    return [pyr.flow(t, t + 1) for t in range(frames.shape[0] - 1)]


def farneback_flow(prev: np.ndarray, nxt: np.ndarray,
                   params: FlowParams = PAPER_FLOW_PARAMS) -> FlowField:
    """Coarse-to-fine Farneback flow from ``prev`` to ``nxt``."""
    prev = np.asarray(prev)
    nxt = np.asarray(nxt)
    if prev.shape != nxt.shape:
        raise ValueError(f"frame shape mismatch: {prev.shape} vs {nxt.shape}")
    if prev.ndim != 2:
        raise ValueError("frames must be 2-D")
    return flow_stack(np.stack([prev, nxt]), params)[0]


def flow_to_image(field: FlowField) -> np.ndarray:
    """Flow magnitude rendered as an 8-bit grayscale image (debug output)."""
    mag = field.magnitude()
    peak = mag.max()
    if peak <= 0:
        return np.zeros(mag.shape, dtype=np.uint8)
    return np.round(255.0 * mag / peak).astype(np.uint8)
