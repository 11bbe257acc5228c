"""Rigid registration from correspondences and the standard benchmark metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, DegenerateInputError, RegistrationError
from .geometry import PointCloud, Pose, transform


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    source: np.ndarray
    target: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        s = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.target, dtype=np.float64).reshape(-1, 3)
        if s.shape != t.shape:
            raise ValueError("source and target correspondence arrays differ in length")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "target", t)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape[0] != s.shape[0] or np.any(w < 0):
                raise ValueError("weights must be non-negative, one per correspondence")
            object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.source.shape[0]

    def subset(self, idx) -> "CorrespondenceSet":
        w = None if self.weights is None else self.weights[idx]
        return CorrespondenceSet(self.source[idx], self.target[idx], w)


@dataclass(frozen=True)
class EvalThresholds:
    name: str
    rmse: float
    inlier: float
    fmr_ir: float
    ransac_inlier: float
    ransac_iters: int

    def __post_init__(self):
        if min(self.rmse, self.inlier, self.fmr_ir, self.ransac_inlier) <= 0 or self.ransac_iters < 1:
            raise ValueError("all thresholds must be positive")


INDOOR = EvalThresholds("indoor", rmse=0.2, inlier=0.1, fmr_ir=0.05, ransac_inlier=0.05, ransac_iters=50_000)
OUTDOOR = EvalThresholds("outdoor", rmse=0.5, inlier=0.2, fmr_ir=0.05, ransac_inlier=0.4, ransac_iters=50_000)
THRESHOLD_SETS = {"indoor": INDOOR, "outdoor": OUTDOOR}


def _svd_rotation(H: np.ndarray, with_singular=False):
    """Rotation maximising ``trace(R H)`` for cross-covariance(s) ``H = sum p q^T``."""
    U, S, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, -1, -2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = V @ D @ np.swapaxes(U, -1, -2)
    return (R, S) if with_singular else R


def kabsch(corrs: CorrespondenceSet) -> Pose:
    """Weighted least-squares rigid transform with reflection correction.

    Needs at least three correspondences spanning a plane; collinear sets
    leave the rotation about their line undetermined.
    """
    n = len(corrs)
    if n < 3:
        raise DegenerateInputError(f"kabsch needs at least 3 correspondences, got {n}")
    w = np.ones(n) if corrs.weights is None else corrs.weights
    if w.sum() <= 0:
        raise DegenerateInputError("correspondence weights sum to zero")
    w = w / w.sum()
    mu_p = w @ corrs.source
    mu_q = w @ corrs.target
    P = corrs.source - mu_p
    Q = corrs.target - mu_q
    H = (P * w[:, None]).T @ Q
    R, s = _svd_rotation(H, with_singular=True)
    scale = max(np.abs(P).max(), np.abs(Q).max(), 1e-300) ** 2
    if s[1] <= 1e-12 * scale:
        raise DegenerateInputError("correspondences are collinear or coincident; rotation is undetermined")
    return Pose(R, mu_q - R @ mu_p)


def _batched_kabsch(P: np.ndarray, Q: np.ndarray):
    """Unweighted Kabsch for stacks of ``(B, k, 3)`` minimal samples."""
    mu_p = P.mean(axis=1)
    mu_q = Q.mean(axis=1)
    H = np.einsum("bni,bnj->bij", P - mu_p[:, None], Q - mu_q[:, None])
    R, s = _svd_rotation(H, with_singular=True)
    t = mu_q - np.einsum("bij,bj->bi", R, mu_p)
    ok = s[:, 1] > 1e-12 * np.maximum(s[:, 0], 1e-300)
    return R, t, ok


def residuals(corrs: CorrespondenceSet, pose: Pose) -> np.ndarray:
    return np.linalg.norm(corrs.source @ pose.rotation.T + pose.translation - corrs.target, axis=1)


def ransac_register(corrs: CorrespondenceSet, thresholds: EvalThresholds = INDOOR, seed=0,
                    iterations: Optional[int] = None, chunk: int = 2048):
    """Three-point RANSAC, then a Kabsch refit on the best inlier set.

    Returns ``(pose, inlier_indices)``. Hypotheses are evaluated in chunks;
    the first hypothesis reaching the highest inlier count wins.
    """
    n = len(corrs)
    if n < 3:
        raise DegenerateInputError(f"RANSAC needs at least 3 correspondences, got {n}")
    iterations = thresholds.ransac_iters if iterations is None else iterations
    tau = thresholds.ransac_inlier
    rng = np.random.default_rng(seed)
    src, dst = corrs.source, corrs.target
    src_t, dst_t = src.T, dst.T
    best_count, best_R, best_t = -1, None, None
    done = 0
    while done < iterations:
        b = min(chunk, iterations - done)
        done += b
        idx = rng.integers(0, n, size=(b, 3))
        distinct = (idx[:, 0] != idx[:, 1]) & (idx[:, 0] != idx[:, 2]) & (idx[:, 1] != idx[:, 2])
        R, t, ok = _batched_kabsch(src[idx], dst[idx])
        ok &= distinct
        if not ok.any():
            continue
        R, t = R[ok], t[ok]
        diff = np.matmul(R, src_t) + t[:, :, None] - dst_t
        counts = np.sum(np.einsum("bin,bin->bn", diff, diff) < tau * tau, axis=1)
        i = int(np.argmax(counts))
        if counts[i] > best_count:
            best_count, best_R, best_t = int(counts[i]), R[i], t[i]
    if best_count < 3:
        raise RegistrationError("no RANSAC hypothesis gathered 3 or more inliers")
    r = np.linalg.norm(src @ best_R.T + best_t - dst, axis=1)
    inliers = np.nonzero(r < tau)[0]
    try:
        pose = kabsch(corrs.subset(inliers))
    except DegenerateInputError as exc:
        raise RegistrationError(f"inlier set is degenerate: {exc}") from exc
    return pose, inliers


def inlier_ratio(corrs: CorrespondenceSet, gt: Pose, inlier_tau: float) -> float:
    if len(corrs) == 0:
        raise DataError("inlier ratio of an empty correspondence set")
    return float(np.mean(residuals(corrs, gt) < inlier_tau))


def fmr(inlier_ratios: Sequence[float], fmr_ir_tau: float = 0.05) -> float:
    irs = np.asarray(inlier_ratios, dtype=np.float64)
    if irs.size == 0:
        raise DataError("feature matching recall over zero pairs")
    return float(np.mean(irs > fmr_ir_tau))


def registration_recall(estimated: Pose, gt_corrs: CorrespondenceSet, rmse_tau: float):
    """``(rmse, success)`` over ground-truth overlap correspondences."""
    if len(gt_corrs) == 0:
        raise DataError("RMSE needs at least one ground-truth correspondence")
    rmse = float(np.sqrt(np.mean(residuals(gt_corrs, estimated) ** 2)))
    return rmse, rmse < rmse_tau


def rre_rte(estimated: Pose, gt: Pose):
    """Geodesic rotation error in degrees and translation error in metres.

    The angle is taken with atan2 of the sine and cosine parts, which equals
    ``arccos((trace(R_gt^T R_est) - 1) / 2)`` but keeps precision near 0.
    """
    dR = gt.rotation.T @ estimated.rotation
    cos = np.clip((np.trace(dR) - 1.0) / 2.0, -1.0, 1.0)
    axis = np.array([dR[2, 1] - dR[1, 2], dR[0, 2] - dR[2, 0], dR[1, 0] - dR[0, 1]])
    sin = np.linalg.norm(axis) / 2.0
    rre = float(np.degrees(np.arctan2(sin, cos)))
    rte = float(np.linalg.norm(estimated.translation - gt.translation))
    return rre, rte


def median(values: Sequence[float]) -> float:
    """Median with the midpoint convention for even counts; NaN if empty."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        return float("nan")
    m = v.size // 2
    return float(v[m]) if v.size % 2 else float((v[m - 1] + v[m]) / 2)


def overlap_indices(source: PointCloud, target: PointCloud, gt: Pose, radius: float):
    """Source indices with a target point within ``radius`` under ``gt``, plus those neighbours."""
    if len(source) == 0 or len(target) == 0:
        raise DegenerateInputError("overlap of an empty point cloud is undefined")
    moved = transform(source, gt).points
    d, j = cKDTree(target.points).query(moved, k=1, distance_upper_bound=radius)
    i = np.nonzero(d <= radius)[0]
    return i, j[i]


def gt_correspondences(source: PointCloud, target: PointCloud, gt: Pose, radius: float = 0.05) -> CorrespondenceSet:
    """Nearest-neighbour pairs inside the overlap, used for the RMSE criterion."""
    i, j = overlap_indices(source, target, gt, radius)
    return CorrespondenceSet(source.points[i], target.points[j])


def synth_correspondences(source: PointCloud, target: PointCloud, gt: Pose, n: int, noise: float = 0.0,
                          outlier_fraction: float = 0.0, seed=0, radius: float = 0.05) -> CorrespondenceSet:
    """Correspondences standing in for descriptor matches.

    ``n`` overlap source points (with replacement when the overlap is small)
    are mapped by ``gt`` plus isotropic Gaussian noise; a ``outlier_fraction``
    share is then redirected to uniform points in the target bounding box.
    """
    if n < 1:
        raise ValueError("n must be positive")
    if not 0 <= outlier_fraction <= 1:
        raise ValueError("outlier_fraction must lie in [0, 1]")
    i, _ = overlap_indices(source, target, gt, radius)
    if i.size == 0:
        raise DegenerateInputError("pair has no overlap to draw correspondences from")
    rng = np.random.default_rng(seed)
    pick = rng.choice(i, size=n, replace=i.size < n)
    src = source.points[pick]
    dst = src @ gt.rotation.T + gt.translation
    if noise > 0:
        dst = dst + rng.normal(0.0, noise, size=dst.shape)
    n_out = int(round(outlier_fraction * n))
    if n_out:
        which = rng.choice(n, size=n_out, replace=False)
        lo, hi = target.points.min(axis=0), target.points.max(axis=0)
        dst[which] = rng.uniform(lo, hi, size=(n_out, 3))
    return CorrespondenceSet(src, dst)


@dataclass
class PairResult:
    pair_id: str
    inlier_ratio: float
    rmse: float
    success: bool
    rre: float
    rte: float


@dataclass
class EvalReport:
    thresholds: EvalThresholds
    pairs: list

    @property
    def rr(self) -> float:
        return float(np.mean([p.success for p in self.pairs]))

    @property
    def ir(self) -> float:
        return float(np.mean([p.inlier_ratio for p in self.pairs]))

    @property
    def fmr(self) -> float:
        return fmr([p.inlier_ratio for p in self.pairs], self.thresholds.fmr_ir)

    @property
    def rre(self) -> float:
        return median([p.rre for p in self.pairs if p.success])

    @property
    def rte(self) -> float:
        return median([p.rte for p in self.pairs if p.success])

    def lines(self) -> list[str]:
        name = self.thresholds.name
        return [
            f"pairs {len(self.pairs)} {name}",
            f"RR {self.rr:.6f} {name}",
            f"IR {self.ir:.6f} {name}",
            f"FMR {self.fmr:.6f} {name}",
            f"RRE {self.rre:.9g} {name}",
            f"RTE {self.rte:.9g} {name}",
        ]


def evaluate_pair(pair_id: str, source: PointCloud, target: PointCloud, gt: Pose, thresholds: EvalThresholds,
                  n_corrs: int = 500, noise: float = 0.0, outliers: float = 0.0, seed=0,
                  iterations: Optional[int] = None, radius: float = 0.05) -> PairResult:
    corrs = synth_correspondences(source, target, gt, n_corrs, noise, outliers, seed, radius)
    ir = inlier_ratio(corrs, gt, thresholds.inlier)
    est, _ = ransac_register(corrs, thresholds, seed, iterations)
    rmse, ok = registration_recall(est, gt_correspondences(source, target, gt, radius), thresholds.rmse)
    rre, rte = rre_rte(est, gt)
    return PairResult(pair_id, ir, rmse, ok, rre, rte)
