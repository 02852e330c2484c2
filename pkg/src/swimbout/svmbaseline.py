"""Kinematic-feature SVM baseline.

A marching tracer extracts 25 ordered points along the tail per frame; five
summary features per bout (curvature, peak count, tip angle, tail angle, tip
position) feed a soft-margin SVM trained by sequential minimal optimization,
evaluated with stratified cross-validation and a held-out split.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import find_peaks

TRACE_POINTS = 25
TRACE_START = (128.0, 8.0)       # (row, col) on the 256x256 crop
MARCH_RADIUS = 7.0
CONE_DEGREES = 60.0
STOP_INTENSITY = 200.0           # local mean above this = background
MIN_RAW_POINTS = 10
PEAK_PROMINENCE = 2.0            # degrees; rejects tracer jitter


@dataclass
class TailTrace:
    """Per-frame tail point sequences for one bout."""
    points: np.ndarray           # (T, 25, 2) float (row, col)
    valid: np.ndarray            # (T,) bool

    @property
    def all_valid(self) -> bool:
        return bool(self.valid.all())


@dataclass(frozen=True)
class FeatureVector:
    max_curvature: float         # 1 / pixels
    n_peaks: int
    mean_tip_angle: float        # degrees
    max_tail_angle: float        # degrees
    mean_tip_position: float     # fraction of tail arc length

    def as_array(self) -> np.ndarray:
        return np.array([self.max_curvature, self.n_peaks,
                         self.mean_tip_angle, self.max_tail_angle,
                         self.mean_tip_position], dtype=np.float64)

FEATURE_NAMES = ("max_curvature", "n_peaks", "mean_tip_angle",
                 "max_tail_angle", "mean_tip_position")


def _march(frame: np.ndarray, start, radius: float, cone_deg: float,
           stop_intensity: float, max_points: int) -> np.ndarray:
    """Greedy trace: step to the darkness-weighted centroid of the ring
    sector ahead, fixed step length, until background or the point cap."""
    h, w = frame.shape
    f = frame.astype(np.float64)
    # ring of candidate offsets once; sector selected per step by angle
    span = int(np.ceil(radius))
    dr, dc = np.mgrid[-span:span + 1, -span:span + 1]
    dist = np.hypot(dr, dc)
    ring = (dist > radius / 2) & (dist <= radius)
    dr, dc = dr[ring], dc[ring]
    ang = np.arctan2(dr, dc)

    points = [np.array(start, dtype=np.float64)]
    heading = 0.0                      # pointing right, toward the tail
    cone = np.deg2rad(cone_deg)
    while len(points) < max_points:
        r0, c0 = points[-1]
        rr = np.round(r0 + dr).astype(int)
        cc = np.round(c0 + dc).astype(int)
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        dang = np.angle(np.exp(1j * (ang - heading)))
        ok &= np.abs(dang) <= cone
        if not ok.any():
            break
        darkness = np.clip(stop_intensity - f[rr[ok], cc[ok]], 0.0, None)
        if darkness.sum() == 0:
            break
        vec = np.array([np.sum(darkness * dr[ok]), np.sum(darkness * dc[ok])])
        norm = np.hypot(*vec)
        if norm == 0:
            break
        step = vec / norm * radius
        nxt = points[-1] + step
        ri, ci = int(round(nxt[0])), int(round(nxt[1]))
        lo_r, hi_r = max(0, ri - 2), min(h, ri + 3)
        lo_c, hi_c = max(0, ci - 2), min(w, ci + 3)
        if lo_r >= hi_r or lo_c >= hi_c \
                or f[lo_r:hi_r, lo_c:hi_c].mean() > stop_intensity:
            break
        points.append(nxt)
        heading = np.arctan2(step[0], step[1])
    return np.array(points)


def _resample(points: np.ndarray, n: int) -> np.ndarray:
    """Resample a polyline to n equidistant points (arc-length spaced)."""
    seg = np.hypot(*np.diff(points, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(points[:1], n, axis=0)
    t = np.linspace(0.0, s[-1], n)
    return np.column_stack([np.interp(t, s, points[:, 0]),
                            np.interp(t, s, points[:, 1])])


def fit_tail(frame: np.ndarray, start=TRACE_START, radius: float = MARCH_RADIUS,
             cone_deg: float = CONE_DEGREES,
             stop_intensity: float = STOP_INTENSITY):
    """Trace the tail on one preprocessed frame.

    Returns ``(points, valid)``: 25 equidistant (row, col) points and a
    validity flag; frames where fewer than 10 raw points were found are
    invalid and their points are all-zero.
    """
    raw = _march(frame, start, radius, cone_deg, stop_intensity, TRACE_POINTS)
    if len(raw) < MIN_RAW_POINTS:
        return np.zeros((TRACE_POINTS, 2)), False
    return _resample(raw, TRACE_POINTS), True


def trace_bout(frames: np.ndarray, **kwargs) -> TailTrace:
    points = np.zeros((len(frames), TRACE_POINTS, 2))
    valid = np.zeros(len(frames), dtype=bool)
    for t, frame in enumerate(frames):
        points[t], valid[t] = fit_tail(frame, **kwargs)
    return TailTrace(points=points, valid=valid)


def _curvature(points: np.ndarray) -> np.ndarray:
    """Reciprocal circumradius of consecutive point triplets."""
    a = points[:-2]
    b = points[1:-1]
    c = points[2:]
    ab = np.hypot(*(b - a).T)
    bc = np.hypot(*(c - b).T)
    ca = np.hypot(*(a - c).T)
    cross = np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                   - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    denom = ab * bc * ca
    return np.divide(2.0 * cross, denom, out=np.zeros_like(denom),
                     where=denom > 0)


def extract_features(trace: TailTrace) -> FeatureVector:
    """Five bout-level kinematic features from a fully valid trace."""
    if not trace.all_valid:
        raise ValueError("feature extraction refused: bout has invalid frames")
    pts = trace.points
    base = pts[:, 0]
    tip = pts[:, -1]
    tail_angle = np.degrees(np.arctan2(tip[:, 0] - base[:, 0],
                                       tip[:, 1] - base[:, 1]))
    tip_chord = pts[:, -1] - pts[:, -8]
    tip_angle = np.degrees(np.arctan2(tip_chord[:, 0], tip_chord[:, 1]))
    curv = np.array([_curvature(p).max() for p in pts])
    peaks, _ = find_peaks(np.abs(tail_angle), prominence=PEAK_PROMINENCE)
    arc = np.array([np.hypot(*np.diff(p, axis=0).T).sum() for p in pts])
    deflection = np.abs(pts[:, -8:, 0] - base[:, None, 0]).mean(axis=1)
    tip_position = np.divide(deflection, arc, out=np.zeros_like(arc),
                             where=arc > 0)
    return FeatureVector(
        max_curvature=float(curv.max()),
        n_peaks=int(len(peaks)),
        mean_tip_angle=float(np.abs(tip_angle).mean()),
        max_tail_angle=float(np.abs(tail_angle).max()),
        mean_tip_position=float(tip_position.mean()))


# ---------------------------------------------------------------------------
# SVM via sequential minimal optimization
# ---------------------------------------------------------------------------

def kernel_matrix(x1: np.ndarray, x2: np.ndarray, kernel: str,
                  gamma: float) -> np.ndarray:
    if kernel == "linear":
        return x1 @ x2.T
    if kernel == "rbf":
        d2 = ((x1[:, None] - x2[None]) ** 2).sum(axis=2)
        return np.exp(-gamma * d2)
    raise ValueError(f"unknown kernel {kernel!r}")


@dataclass
class SvmModel:
    kernel: str
    gamma: float
    C: float
    support_x: np.ndarray
    support_coef: np.ndarray     # alpha_i * y_i
    bias: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        k = kernel_matrix(np.atleast_2d(x), self.support_x, self.kernel,
                          self.gamma)
        return k @ self.support_coef + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Labels in {0, 1}."""
        return (self.decision(x) > 0).astype(np.int64)


def dual_objective(alpha: np.ndarray, y: np.ndarray, k: np.ndarray) -> float:
    """Soft-margin dual: max Σα − ½ ΣΣ α_i α_j y_i y_j K_ij."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ k @ ay)


def train_svm(features: np.ndarray, labels: np.ndarray, kernel: str = "rbf",
              C: float = 1.0, gamma: float = 0.001, tol: float = 1e-3,
              max_passes: int = 50, max_iter: int = 20000,
              seed: int = 0) -> SvmModel:
    """Platt-style SMO on labels {0, 1}; KKT tolerance ``tol``."""
    x = np.asarray(features, dtype=np.float64)
    y01 = np.asarray(labels)
    if set(np.unique(y01)) - {0, 1}:
        raise ValueError("labels must be 0/1")
    if min((y01 == 0).sum(), (y01 == 1).sum()) < 1:
        raise ValueError("need samples from both classes")
    y = np.where(y01 == 1, 1.0, -1.0)
    n = len(y)
    k = kernel_matrix(x, x, kernel, gamma)
    alpha = np.zeros(n)
    b = 0.0
    rng = np.random.default_rng(seed)
    passes = 0
    iters = 0
    while passes < max_passes:
        changed = 0
        for i in range(n):
            iters += 1
            if iters > max_iter:
                residual = _kkt_residual(alpha, y, k, b, C, tol)
                raise RuntimeError(
                    f"SMO did not converge in {max_iter} iterations; "
                    f"max KKT residual {residual:.3e}")
            e_i = (alpha * y) @ k[:, i] + b - y[i]
            if not ((y[i] * e_i < -tol and alpha[i] < C)
                    or (y[i] * e_i > tol and alpha[i] > 0)):
                continue
            j = int(rng.integers(n - 1))
            if j >= i:
                j += 1
            e_j = (alpha * y) @ k[:, j] + b - y[j]
            ai_old, aj_old = alpha[i], alpha[j]
            if y[i] != y[j]:
                lo, hi = max(0, aj_old - ai_old), min(C, C + aj_old - ai_old)
            else:
                lo, hi = max(0, ai_old + aj_old - C), min(C, ai_old + aj_old)
            if lo == hi:
                continue
            eta = 2 * k[i, j] - k[i, i] - k[j, j]
            if eta >= 0:
                continue
            aj = np.clip(aj_old - y[j] * (e_i - e_j) / eta, lo, hi)
            if abs(aj - aj_old) < 1e-7:
                continue
            ai = ai_old + y[i] * y[j] * (aj_old - aj)
            alpha[i], alpha[j] = ai, aj
            b1 = b - e_i - y[i] * (ai - ai_old) * k[i, i] \
                 - y[j] * (aj - aj_old) * k[i, j]
            b2 = b - e_j - y[i] * (ai - ai_old) * k[i, j] \
                 - y[j] * (aj - aj_old) * k[j, j]
            if 0 < ai < C:
                b = b1
            elif 0 < aj < C:
                b = b2
            else:
                b = (b1 + b2) / 2
            changed += 1
        passes = passes + 1 if changed == 0 else 0
    sv = alpha > 1e-9
    return SvmModel(kernel=kernel, gamma=gamma, C=C, support_x=x[sv],
                    support_coef=alpha[sv] * y[sv], bias=b)


def _kkt_residual(alpha, y, k, b, C, tol) -> float:
    e = (alpha * y) @ k + b - y
    r = y * e
    res = np.zeros_like(r)
    res[alpha < C] = np.maximum(res[alpha < C], -r[alpha < C])
    res[alpha > 0] = np.maximum(res[alpha > 0], r[alpha > 0])
    return float(res.max())


# ---------------------------------------------------------------------------
# model selection
# ---------------------------------------------------------------------------

GAMMA_GRID = (1e-1, 1e-2, 1e-3, 1e-4)
C_GRID = (0.01, 0.1, 1.0, 10.0)


def default_grid() -> list[dict]:
    """4 gammas x 4 C for the RBF kernel plus 4 C linear rows = 20."""
    grid = [{"kernel": "rbf", "gamma": g, "C": c}
            for g in GAMMA_GRID for c in C_GRID]
    grid += [{"kernel": "linear", "gamma": 0.0, "C": c} for c in C_GRID]
    return grid


def stratified_folds(labels: np.ndarray, k: int,
                     rng: np.random.Generator) -> list[np.ndarray]:
    """k folds whose class proportions match the data within one sample."""
    labels = np.asarray(labels)
    folds: list[list[int]] = [[] for _ in range(k)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        for j, i in enumerate(idx):
            folds[j % k].append(int(i))
    if min(len(f) for f in folds) == 0:
        raise ValueError("degenerate fold: not enough samples per class")
    return [np.sort(np.array(f)) for f in folds]


def stratified_split(labels: np.ndarray, test_fraction: float,
                     rng: np.random.Generator):
    labels = np.asarray(labels)
    test_idx = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n_test = max(1, int(round(test_fraction * len(idx))))
        test_idx.extend(idx[:n_test].tolist())
    test = np.sort(np.array(test_idx))
    train = np.setdiff1d(np.arange(len(labels)), test)
    return train, test


class Standardizer:
    """Zero-mean unit-variance scaling fit on training folds only."""

    def fit(self, x: np.ndarray) -> "Standardizer":
        self.mean = x.mean(axis=0)
        self.std = x.std(axis=0)
        self.std[self.std == 0] = 1.0
        return self

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def cross_validate(features: np.ndarray, labels: np.ndarray,
                   grid: list[dict] | None = None, n_folds: int = 5,
                   test_fraction: float = 0.15, seed: int = 462019) -> dict:
    """Grid search by stratified k-fold accuracy with a held-out report.

    An 85/15 stratified split reserves the held-out part; each grid row is
    scored by mean fold accuracy on the training part (standardization fit
    per fold); the winner is refit on the full training part and scored on
    the held-out split.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    for cls in np.unique(y):
        if (y == cls).sum() < n_folds:
            raise ValueError(f"class {cls} has fewer than {n_folds} samples")
    if grid is None:
        grid = default_grid()
    rng = np.random.default_rng(seed)
    train_idx, test_idx = stratified_split(y, test_fraction, rng)
    folds = stratified_folds(y[train_idx], n_folds, rng)

    rows = []
    for cfg in grid:
        accs = []
        for f in folds:
            val = train_idx[f]
            trn = np.setdiff1d(train_idx, val)
            scaler = Standardizer().fit(x[trn])
            model = train_svm(scaler.transform(x[trn]), y[trn],
                              kernel=cfg["kernel"], C=cfg["C"],
                              gamma=cfg["gamma"], seed=seed)
            accs.append((model.predict(scaler.transform(x[val]))
                         == y[val]).mean())
        rows.append({**cfg, "cv_accuracy": float(np.mean(accs))})

    best = max(rows, key=lambda r: r["cv_accuracy"])
    scaler = Standardizer().fit(x[train_idx])
    final = train_svm(scaler.transform(x[train_idx]), y[train_idx],
                      kernel=best["kernel"], C=best["C"],
                      gamma=best["gamma"], seed=seed)
    holdout = float((final.predict(scaler.transform(x[test_idx]))
                     == y[test_idx]).mean())
    return {"grid": rows, "best": best, "holdout_accuracy": holdout,
            "n_train": int(len(train_idx)), "n_test": int(len(test_idx))}
