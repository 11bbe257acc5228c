"""Pair generation: move the camera, re-project, drop penetrated depths, inpaint."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diffusion import BetaSchedule, Denoiser, InpaintCondition, denormalize, guided_sample, sigmoid_schedule
from .errors import CorrectionError, DegenerateInputError, PairgenError
from .geometry import DepthMap, PointCloud, Pose, PoseSamplerConfig, overlap_ratio, reproject, sample_pose, transform, unproject
from .penetration import CorrectorModel, apply_correction, augment, corrector_predict

log = logging.getLogger(__name__)

MIN_VALID_FRACTION = 0.01
MAX_REMOVED_FRACTION = 0.5


@dataclass(eq=False)
class PairRecord:
    source: PointCloud
    target: PointCloud
    gt_pose: Pose
    overlap: float
    seed: int
    provenance: dict
    source_depth: DepthMap
    target_depth: DepthMap
    observed: DepthMap
    reprojected: DepthMap

    @property
    def condition_mask(self) -> np.ndarray:
        return self.observed.valid


def derive_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def pair_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_pair(input: DepthMap, sampler: PoseSamplerConfig, corrector: Optional[CorrectorModel],
                  denoiser: Denoiser, schedule: BetaSchedule, seed: int, *, scale: float, offset: float,
                  reverse_steps: Optional[int] = None, provenance: Optional[dict] = None) -> PairRecord:
    """One training pair from one depth map; ``corrector=None`` skips correction."""
    valid = input.valid
    if valid.mean() < MIN_VALID_FRACTION:
        raise DegenerateInputError(f"input has {valid.mean():.2%} non-empty pixels (< {MIN_VALID_FRACTION:.0%})")
    K = input.intrinsics
    pose_seed, sample_seed = derive_seeds(seed, 2)
    pose = sample_pose(sampler, pose_seed, input)
    source = unproject(input)
    reprojected = reproject(transform(source, pose), K)

    if corrector is None:
        observed = reprojected
    else:
        _, keep = corrector_predict(corrector, augment(reprojected, corrector.kernel))
        observed = apply_correction(reprojected, keep)
        before = int(reprojected.valid.sum())
        removed = before - int(observed.valid.sum())
        if before and removed > MAX_REMOVED_FRACTION * before:
            raise CorrectionError(f"corrector removed {removed} of {before} re-projected pixels")

    cond = InpaintCondition.from_depth(observed, scale, offset)
    latent = guided_sample(denoiser, cond, schedule, reverse_steps, sample_seed)
    target_depth = denormalize(latent, K)
    target = unproject(target_depth)
    overlap = overlap_ratio(source, target, pose, sampler.overlap_radius) if len(target) else 0.0
    prov = dict(provenance or {})
    prov.update({"scale": scale, "offset": offset, "sampler": sampler.to_dict()})
    return PairRecord(source, target, pose, overlap, seed, prov, input, target_depth, observed, reprojected)


@dataclass
class GenerationConfig:
    denoiser: Denoiser
    sampler: PoseSamplerConfig = field(default_factory=PoseSamplerConfig)
    corrector: Optional[CorrectorModel] = None
    schedule: BetaSchedule = field(default_factory=sigmoid_schedule)
    reverse_steps: Optional[int] = 250
    scale: Optional[float] = None
    offset: Optional[float] = None
    corrector_id: str = "none"
    denoiser_id: str = "none"


@dataclass
class DatasetResult:
    records: list
    skipped: list

    @property
    def success_count(self) -> int:
        return len(self.records)


def generate_dataset(inputs: Sequence[DepthMap], count: int, config: GenerationConfig, seed: int,
                     input_ids: Optional[Sequence[str]] = None) -> DatasetResult:
    """``count`` pairs cycling through ``inputs``; pair ``i`` uses a seed hashed from ``(seed, i)``.

    Failing pairs are logged and skipped, never retried.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if not inputs:
        raise DegenerateInputError("no input depth maps")
    ids = list(input_ids) if input_ids is not None else [str(i) for i in range(len(inputs))]
    scale, offset = config.scale, config.offset
    if scale is None or offset is None:
        scale = getattr(config.denoiser, "scale", 1.0)
        offset = getattr(config.denoiser, "offset", 0.0)
    records, skipped = [], []
    for i in range(count):
        j = i % len(inputs)
        s = pair_seed(seed, i)
        prov = {"index": i, "input_id": ids[j], "corrector_id": config.corrector_id, "denoiser_id": config.denoiser_id}
        try:
            records.append(generate_pair(inputs[j], config.sampler, config.corrector, config.denoiser,
                                         config.schedule, s, scale=scale, offset=offset,
                                         reverse_steps=config.reverse_steps, provenance=prov))
        except (PairgenError, ValueError) as exc:
            log.warning("pair %d (input %s) skipped: %s", i, ids[j], exc)
            skipped.append((i, ids[j], str(exc)))
    log.info("generated %d of %d pairs", len(records), count)
    if not records:
        raise PairgenError(f"all {count} pairs failed")
    return DatasetResult(records, skipped)


def overlap_buckets(overlaps: Sequence[float]) -> dict:
    """Share of pairs in the high (> 0.3) and low (0.1 to 0.3) overlap regimes."""
    o = np.asarray(overlaps, dtype=np.float64)
    return {"high": float(np.mean(o > 0.3)), "low": float(np.mean((o >= 0.1) & (o <= 0.3)))}
