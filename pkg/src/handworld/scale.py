"""Metric scale recovery: align SLAM relative depth to metric depth.

The scale ``alpha`` minimizes the Geman-McClure objective

    E(alpha) = sum_p rho(D(p) - alpha d(p); c),   rho(r; c) = r^2 / (r^2 + c^2)

over pixels ``p`` selected by adaptive sampling (outside the hand mask and
inside a metric depth band). Minimization is iteratively reweighted least
squares, which is a majorize-minimize scheme for this loss, so the objective
never increases between iterations.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import EmptyCalibSet, EmptySampleSet, NonFiniteObjective

MAD_TO_SIGMA = 1.4826
D_MIN_GRID = tuple(np.round(np.arange(1, 11) * 0.1, 10))
D_MAX_GRID = tuple(np.round(np.arange(4, 17) * 0.5, 10))


@dataclass(frozen=True)
class DepthBounds:
    d_min: float
    d_max: float

    def __post_init__(self):
        if not (0 <= self.d_min < self.d_max):
            raise ValueError(f"need 0 <= d_min < d_max, got ({self.d_min}, {self.d_max})")


DEFAULT_BOUNDS = DepthBounds(0.3, 4.0)
NO_BOUNDS = DepthBounds(0.0, np.inf)


@dataclass(frozen=True)
class DepthFrame:
    """Relative (SLAM-unit) and metric depth for one keyframe."""

    rel: np.ndarray
    metric: np.ndarray
    hand_mask: np.ndarray = None
    valid: np.ndarray = None

    def __post_init__(self):
        rel = np.asarray(self.rel, dtype=np.float64)
        metric = np.asarray(self.metric, dtype=np.float64)
        if rel.shape != metric.shape:
            raise ValueError("rel and metric depth must share dimensions")
        mask = np.zeros(rel.shape, dtype=bool) if self.hand_mask is None else np.asarray(self.hand_mask, dtype=bool)
        valid = (np.isfinite(rel) & np.isfinite(metric) & (rel > 0) & (metric > 0)) if self.valid is None \
            else np.asarray(self.valid, dtype=bool)
        if mask.shape != rel.shape or valid.shape != rel.shape:
            raise ValueError("mask and valid arrays must match the depth shape")
        object.__setattr__(self, "rel", rel)
        object.__setattr__(self, "metric", metric)
        object.__setattr__(self, "hand_mask", mask)
        object.__setattr__(self, "valid", valid)


@dataclass
class ScaleResult:
    alpha: float
    iterations: int
    final_objective: float
    inlier_fraction: float
    c: float = float("nan")
    n_samples: int = 0
    objective_history: list = field(default_factory=list)


def adaptive_sample(frame, bounds=DEFAULT_BOUNDS):
    """Flat pixel indices of valid, non-hand pixels with d_min < D < d_max."""
    if bounds is None:
        bounds = NO_BOUNDS
    D = frame.metric
    with np.errstate(invalid="ignore"):
        keep = frame.valid & ~frame.hand_mask & (D > bounds.d_min) & (D < bounds.d_max)
    return np.flatnonzero(keep)


def gather_samples(frames, bounds=DEFAULT_BOUNDS):
    ds, Ds = [], []
    for fr in frames:
        idx = adaptive_sample(fr, bounds)
        ds.append(fr.rel.ravel()[idx])
        Ds.append(fr.metric.ravel()[idx])
    if not ds:
        return np.zeros(0), np.zeros(0)
    return np.concatenate(ds), np.concatenate(Ds)


def gm_objective(d, D, alpha, c):
    r = D - alpha * d
    r2 = r * r
    return float(np.sum(r2 / (r2 + c * c)))


def _mad_width(d, D, alpha):
    mad = float(np.median(np.abs(D - alpha * d)))
    floor = 1e-12 * float(np.median(np.abs(D)))
    return max(MAD_TO_SIGMA * mad, floor, 1e-300)


def irls_scale(d, D, c=None, max_iter=100, tol=1e-8, backend=None):
    """Geman-McClure IRLS on paired samples; see module docstring."""
    d = np.ascontiguousarray(d, dtype=np.float64)
    D = np.ascontiguousarray(D, dtype=np.float64)
    if d.size == 0:
        raise EmptySampleSet("no pixels survive sampling")
    sums = _kernels.get("gm_irls_sums", backend)

    alpha = float(np.median(D / d))
    auto_c = c is None
    if auto_c:
        c = _mad_width(d, D, alpha)
    elif not c > 0:
        raise ValueError("Geman-McClure width must be positive")
    c = float(c)

    history = []
    it = 0
    for it in range(1, max_iter + 1):
        num, den, obj = sums(d, D, alpha, c)
        if not (np.isfinite(num) and np.isfinite(den) and np.isfinite(obj)) or den <= 0:
            raise NonFiniteObjective(f"IRLS produced a non-finite objective at iteration {it}")
        history.append(obj)
        new = num / den
        step = abs(new - alpha) / abs(alpha) if alpha != 0 else abs(new)
        alpha = new
        if auto_c and it == 3:
            # width re-estimated once from the refined fit
            c = _mad_width(d, D, alpha)
        if step < tol:
            break

    final = gm_objective(d, D, alpha, c)
    if not np.isfinite(final) or not np.isfinite(alpha):
        raise NonFiniteObjective("final objective is not finite")
    history.append(final)
    inliers = float(np.mean(np.abs(D - alpha * d) <= c))
    return ScaleResult(alpha=float(alpha), iterations=it, final_objective=final,
                       inlier_fraction=inliers, c=c, n_samples=int(d.size),
                       objective_history=history)


def least_squares_scale(d, D):
    """Closed-form unweighted fit, sum(d D) / sum(d^2)."""
    d = np.asarray(d, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if d.size == 0:
        raise EmptySampleSet("no pixels survive sampling")
    return float(np.dot(d, D) / np.dot(d, d))


def estimate_scale(frames, bounds=DEFAULT_BOUNDS, c=None, max_iter=100, tol=1e-8,
                   per_frame=False, backend=None):
    """Single scale over all keyframes jointly.

    ``bounds=None`` disables the depth band (hand masking still applies).
    With ``per_frame=True`` each keyframe is fit separately and the median of
    the per-frame scales is returned.
    """
    if isinstance(frames, DepthFrame):
        frames = [frames]
    if per_frame:
        results = []
        for fr in frames:
            d, D = gather_samples([fr], bounds)
            if d.size:
                results.append(irls_scale(d, D, c, max_iter, tol, backend))
        if not results:
            raise EmptySampleSet("no keyframe has any sampled pixel")
        alphas = np.array([r.alpha for r in results])
        alpha = float(np.median(alphas))
        return ScaleResult(alpha=alpha, iterations=max(r.iterations for r in results),
                           final_objective=float(sum(r.final_objective for r in results)),
                           inlier_fraction=float(np.mean([r.inlier_fraction for r in results])),
                           c=float(np.median([r.c for r in results])),
                           n_samples=int(sum(r.n_samples for r in results)))
    d, D = gather_samples(frames, bounds)
    return irls_scale(d, D, c, max_iter, tol, backend)


def calibrate_depth_bounds(calib, d_min_grid=D_MIN_GRID, d_max_grid=D_MAX_GRID, c=None, tie_tol=1e-9):
    """Grid-search the depth band minimizing mean relative scale error.

    ``calib`` is a list of ``(frames, alpha_true)`` pairs, where ``frames``
    is a DepthFrame or a list of them. Errors within ``tie_tol`` of the best
    are tied; ties go to the widest band, then the smallest d_min.
    """
    calib = list(calib)
    if not calib:
        raise EmptyCalibSet("calibration set is empty")
    best = None
    for lo in d_min_grid:
        for hi in d_max_grid:
            if not lo < hi:
                continue
            bounds = DepthBounds(float(lo), float(hi))
            errs = []
            for frames, alpha_true in calib:
                try:
                    est = estimate_scale(frames, bounds, c=c).alpha
                except EmptySampleSet:
                    errs.append(np.inf)
                    continue
                errs.append(abs(est - alpha_true) / alpha_true)
            err = float(np.mean(errs))
            key = (err, -(hi - lo), lo)
            if best is None:
                best = (key, bounds)
                continue
            (berr, bwidth, blo), _ = best
            if err < berr - tie_tol:
                best = (key, bounds)
            elif abs(err - berr) <= tie_tol and (-(hi - lo), lo) < (bwidth, blo):
                best = (key, bounds)
    if not np.isfinite(best[0][0]):
        raise EmptySampleSet("no depth band leaves any samples")
    return best[1]
