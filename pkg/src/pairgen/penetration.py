"""Detecting depths that leaked through sparse foreground surfaces.

A re-projected sparse cloud lets far points show through gaps in nearer
surfaces. The corrector scores each pixel from its depth and the windowed
minimum of its neighbourhood; a median-filter rule serves as the baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError
from .geometry import EMPTY, DepthMap
from .optim import Adam
from .tsdf import MaskPairSample

FEATURE_NAMES = ("depth", "min_neighbor", "residual", "residual_mean3", "residual_max3", "residual3")


def _check_kernel(kernel: int):
    if kernel < 3 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 3, got {kernel}")


def _windows(grid: np.ndarray, kernel: int) -> np.ndarray:
    r = kernel // 2
    return sliding_window_view(np.pad(grid, r, mode="edge"), (kernel, kernel))


def _window_min(values: np.ndarray, kernel: int) -> np.ndarray:
    """Minimum over non-empty window entries with replicated borders; inf if none."""
    g = np.where(values > 0, values, np.inf)
    return _windows(g, kernel).min(axis=(-2, -1))


@dataclass(frozen=True, eq=False)
class AugmentedDepth:
    original: DepthMap
    min_neighbor: np.ndarray
    residual: np.ndarray
    kernel: int = 5

    @property
    def valid(self) -> np.ndarray:
        return self.original.valid


def augment(depth: DepthMap, kernel: int = 5) -> AugmentedDepth:
    """Min-pooled neighbour map and residual ``depth - min_neighbor``; empty stays empty."""
    _check_kernel(kernel)
    valid = depth.valid
    mn = _window_min(depth.values, kernel)
    mn = np.where(valid, mn, EMPTY)
    residual = np.where(valid, depth.values - mn, EMPTY)
    return AugmentedDepth(depth, mn, residual, kernel)


def median_filter_baseline(depth: DepthMap, kernel: int = 5, tau: float = 0.1) -> np.ndarray:
    """Valid where a pixel is within ``tau`` of its windowed median over non-empty neighbours."""
    _check_kernel(kernel)
    if tau <= 0:
        raise ValueError("tau must be positive")
    valid = depth.valid
    if not valid.any():
        return np.zeros(depth.shape, dtype=bool)
    g = np.where(valid, depth.values, np.nan)
    with warnings.catch_warnings():
        # windows with no non-empty pixel never belong to a valid pixel
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(_windows(g, kernel), axis=(-2, -1))
    return valid & (np.abs(depth.values - med) < tau)


def _local_stats(residual: np.ndarray, valid: np.ndarray):
    win_r = _windows(np.where(valid, residual, 0.0), 3)
    win_v = _windows(valid.astype(np.float64), 3)
    mean3 = win_r.sum(axis=(-2, -1)) / np.maximum(win_v.sum(axis=(-2, -1)), 1.0)
    max3 = _windows(np.where(valid, residual, -np.inf), 3).max(axis=(-2, -1))
    return mean3, max3


def pixel_features(aug: AugmentedDepth) -> np.ndarray:
    """``(H, W, F)`` feature stack; rows for empty pixels are meaningless."""
    valid = aug.valid
    d = aug.original.values
    mean3, max3 = _local_stats(aug.residual, valid)
    mn3 = _window_min(d, 3)
    residual3 = np.where(valid, d - mn3, 0.0)
    feats = np.stack([d, aug.min_neighbor, aug.residual, mean3, np.where(valid, max3, 0.0), residual3], axis=-1)
    return feats


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass(eq=False)
class CorrectorModel:
    """Per-pixel logistic scorer over standardised augmented-depth features."""

    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(len(FEATURE_NAMES)))
    feature_std: np.ndarray = field(default_factory=lambda: np.ones(len(FEATURE_NAMES)))
    tau_m: float = 0.5
    kernel: int = 5
    final_loss: float = float("nan")

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.feature_mean = np.asarray(self.feature_mean, dtype=np.float64).reshape(-1)
        self.feature_std = np.asarray(self.feature_std, dtype=np.float64).reshape(-1)
        self.bias = float(self.bias)
        if not 0 < self.tau_m < 1:
            raise ValueError("tau_m must lie in (0, 1)")
        if not (self.weights.size == self.feature_mean.size == self.feature_std.size):
            raise ValueError("weight and standardisation sizes disagree")
        _check_kernel(self.kernel)

    @classmethod
    def constant(cls, bias: float, tau_m: float = 0.5, kernel: int = 5) -> "CorrectorModel":
        return cls(np.zeros(len(FEATURE_NAMES)), bias, tau_m=tau_m, kernel=kernel)

    def with_threshold(self, tau_m: float) -> "CorrectorModel":
        return CorrectorModel(self.weights.copy(), self.bias, self.feature_mean.copy(),
                              self.feature_std.copy(), tau_m, self.kernel, self.final_loss)

    def params(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.bias]])

    def standardize(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.feature_mean) / self.feature_std


def corrector_predict(model: CorrectorModel, aug: AugmentedDepth):
    """Return ``(probabilities, mask)``; probabilities are NaN on empty pixels."""
    feats = pixel_features(aug)
    if feats.shape[-1] != model.weights.size:
        raise DataError(f"model expects {model.weights.size} features, got {feats.shape[-1]}")
    valid = aug.valid
    prob = np.full(valid.shape, np.nan)
    z = model.standardize(feats[valid]) @ model.weights + model.bias
    prob[valid] = _sigmoid(z)
    mask = np.zeros(valid.shape, dtype=bool)
    mask[valid] = prob[valid] >= model.tau_m
    return prob, mask


def bce_loss_and_grad(params: np.ndarray, X: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy of a logistic model and its gradient.

    ``params`` is ``[w..., b]``; ``X`` is ``(N, F)`` and ``y`` in {0, 1}.
    """
    w, b = params[:-1], params[-1]
    z = X @ w + b
    # -y log s(z) - (1-y) log(1-s(z)) = log(1+e^z) - y z
    loss = np.mean(np.logaddexp(0.0, z) - y * z)
    r = (_sigmoid(z) - y) / len(y)
    grad = np.concatenate([X.T @ r, [r.sum()]])
    return loss, grad


def collect_training_pixels(samples: Sequence[MaskPairSample], kernel: int = 5):
    feats, labels = [], []
    for s in samples:
        aug = augment(s.input, kernel)
        lab = s.labeled
        feats.append(pixel_features(aug)[lab])
        labels.append(s.gt_mask[lab].astype(np.float64))
    if not feats:
        return np.zeros((0, len(FEATURE_NAMES))), np.zeros(0)
    return np.concatenate(feats), np.concatenate(labels)


def corrector_train(samples: Sequence[MaskPairSample], epochs: int = 300, lr: float = 0.05, seed: int = 0,
                    kernel: int = 5, tau_m: float = 0.5) -> CorrectorModel:
    """Full-batch Adam on mean BCE over all labelled pixels."""
    X, y = collect_training_pixels(samples, kernel)
    if len(y) == 0:
        raise DataError("training set has no labelled pixels")
    if y.min() == y.max():
        raise DataError("training labels contain a single class; BCE is degenerate")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std < 1e-12] = 1.0
    Xs = (X - mean) / std
    rng = np.random.default_rng(seed)
    params = {"p": rng.normal(0.0, 0.01, size=X.shape[1] + 1)}
    opt = Adam(params, lr=lr)
    loss = float("nan")
    for _ in range(epochs):
        loss, g = bce_loss_and_grad(params["p"], Xs, y)
        opt.step(params, {"p": g})
    loss, _ = bce_loss_and_grad(params["p"], Xs, y)
    p = params["p"]
    return CorrectorModel(p[:-1], p[-1], mean, std, tau_m, kernel, float(loss))


def apply_correction(depth: DepthMap, mask: np.ndarray) -> DepthMap:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != depth.shape:
        raise ValueError(f"mask {mask.shape} does not match depth {depth.shape}")
    return DepthMap(np.where(mask, depth.values, EMPTY), depth.intrinsics)


@dataclass(frozen=True)
class MaskMetrics:
    miou: float
    pacc: float
    fp: int
    tp: int = 0
    tn: int = 0
    fn: int = 0


def _confusion(pred, gt):
    return (int(np.sum(pred & gt)), int(np.sum(~pred & ~gt)), int(np.sum(pred & ~gt)), int(np.sum(~pred & gt)))


def _from_confusion(tp, tn, fp, fn) -> MaskMetrics:
    total = tp + tn + fp + fn
    ious = []
    for inter, union in ((tp, tp + fp + fn), (tn, tn + fp + fn)):
        if union > 0:
            ious.append(inter / union)
    return MaskMetrics(float(np.mean(ious)), (tp + tn) / total, fp, tp, tn, fn)


def mask_metrics(predicted: np.ndarray, gt: np.ndarray, labeled=None) -> MaskMetrics:
    """mIoU over the valid/invalid classes, pixel accuracy and false-positive count.

    A false positive is a pixel kept as valid although its depth is wrong.
    """
    predicted, gt = np.asarray(predicted, dtype=bool), np.asarray(gt, dtype=bool)
    if predicted.shape != gt.shape:
        raise ValueError("predicted and ground-truth masks differ in shape")
    lab = np.ones(gt.shape, dtype=bool) if labeled is None else np.asarray(labeled, dtype=bool)
    if not lab.any():
        raise DataError("no labelled pixels to evaluate")
    return _from_confusion(*_confusion(predicted[lab], gt[lab]))


def aggregate_mask_metrics(pairs) -> tuple[MaskMetrics, float]:
    """Pool confusion counts over ``(pred, gt, labeled)`` triples.

    Returns the pooled metrics and the mean false-positive count per image.
    """
    counts = np.zeros(4, dtype=np.int64)
    fps = []
    for pred, gt, lab in pairs:
        c = _confusion(np.asarray(pred)[lab], np.asarray(gt)[lab])
        counts += c
        fps.append(c[2])
    if counts.sum() == 0:
        raise DataError("no labelled pixels to evaluate")
    return _from_confusion(*(int(c) for c in counts)), float(np.mean(fps))
