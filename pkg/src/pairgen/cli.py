"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .diffusion import ToyDenoiserConfig, normalize_depth, range_normalization, sigmoid_schedule, train_toy_denoiser
from .errors import DataError, NumericalError, PairgenError
from .geometry import Intrinsics, PoseSamplerConfig, transform, unproject
from .penetration import corrector_train
from .pipeline import GenerationConfig, generate_dataset, overlap_buckets
from .regeval import THRESHOLD_SETS, EvalReport, evaluate_pair
from .scenes import make_scene, trajectory
from .tsdf import MaskPairSample, TsdfVolume, make_mask_sample, tsdf_extract_points, tsdf_integrate, voxel_downsample

log = logging.getLogger("pairgen")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _depth_files(directory) -> list[Path]:
    files = sorted(Path(directory).glob("*.pgm"))
    if not files:
        raise DataError(f"no .pgm depth files in {directory}")
    return files


def _load_depths(directory, intrinsics):
    files = _depth_files(directory)
    return [formats.read_depth(f, intrinsics) for f in files], [f.stem for f in files]


def _intrinsics_for(directory, explicit=None) -> Intrinsics:
    path = Path(explicit) if explicit else Path(directory) / "intrinsics.txt"
    return formats.read_intrinsics(path)


# --- subcommands -------------------------------------------------------------


def cmd_synth_scene(args):
    out = Path(args.out)
    fx = args.fx if args.fx else 0.75 * args.width
    K = Intrinsics(fx, fx, args.width / 2, args.height / 2, args.width, args.height)
    scene = make_scene(args.kind)
    poses = trajectory(args.kind, args.frames)
    formats.write_intrinsics(out / "intrinsics.txt", K)
    formats.write_trajectory(out / "trajectory.txt", poses)
    for i, pose in enumerate(poses):
        formats.write_depth(out / f"frame_{i:03d}.pgm", scene.render(K, pose))
    print(f"wrote {len(poses)} {args.kind} frames to {out}")


def cmd_prep_masks(args):
    scene = Path(args.scene)
    K = _intrinsics_for(scene, args.intrinsics)
    depths, _ = _load_depths(scene, K)
    poses = formats.read_trajectory(args.trajectory or scene / "trajectory.txt")
    if len(poses) != len(depths):
        raise DataError(f"{len(depths)} depth frames but {len(poses)} trajectory poses")
    world = np.concatenate([transform(unproject(d), p).points for d, p in zip(depths, poses)])
    if len(world) == 0:
        raise DataError("scene frames contain no depth")
    volume = TsdfVolume.around(world.min(axis=0), world.max(axis=0), args.voxel_dense)
    for d, p in zip(depths, poses):
        tsdf_integrate(volume, d, p)
    dense = tsdf_extract_points(volume)
    sparse = voxel_downsample(dense, args.voxel_sparse)
    log.info("dense cloud %d points, sparse %d", len(dense), len(sparse))
    out = Path(args.out)
    formats.write_intrinsics(out / "intrinsics.txt", K)
    for i, p in enumerate(poses):
        s = make_mask_sample(dense, sparse, p.inverse(), K, args.tau_gt)
        formats.write_depth(out / f"sample_{i:03d}_input.pgm", s.input)
        formats.write_depth(out / f"sample_{i:03d}_reference.pgm", s.reference)
        formats.write_mask(out / f"sample_{i:03d}_mask.pgm", s.gt_mask)
    print(f"wrote {len(poses)} mask samples to {out}")


def load_mask_samples(directory) -> list[MaskPairSample]:
    directory = Path(directory)
    K = formats.read_intrinsics(directory / "intrinsics.txt")
    samples = []
    for f in sorted(directory.glob("sample_*_input.pgm")):
        stem = f.name[: -len("_input.pgm")]
        inp = formats.read_depth(f, K)
        ref = formats.read_depth(directory / f"{stem}_reference.pgm", K)
        mask = formats.read_mask(directory / f"{stem}_mask.pgm") & inp.valid
        samples.append(MaskPairSample(inp, mask, ref))
    if not samples:
        raise DataError(f"no mask samples in {directory}")
    return samples


def cmd_train_corrector(args):
    samples = load_mask_samples(args.samples)
    model = corrector_train(samples, args.epochs, args.lr, args.seed, args.kernel, args.tau_m)
    mid = formats.save_text(args.out, formats.corrector_to_text(model))
    print(f"corrector {mid} final BCE {model.final_loss:.6f} -> {args.out}")


def cmd_train_denoiser(args):
    K = _intrinsics_for(args.images, args.intrinsics)
    depths, _ = _load_depths(args.images, K)
    scale, offset = range_normalization(depths)
    latents = [normalize_depth(d, scale, offset) for d in depths]
    schedule = sigmoid_schedule(args.T)
    cfg = ToyDenoiserConfig(hidden=args.hidden, steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    model = train_toy_denoiser(latents, schedule, cfg, K.vector())
    mid = formats.save_text(args.out, formats.denoiser_to_text(model))
    tail = np.mean(model.loss_history[-50:]) if model.loss_history else float("nan")
    print(f"denoiser {mid} final MSE {tail:.6f} -> {args.out}")


def load_generation_config(path, schedule_T_default=1000) -> GenerationConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    known = {"denoiser", "corrector", "sampler", "reverse_steps", "schedule", "scale", "offset", "tau_m"}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"{path}: unknown config keys {sorted(unknown)}")
    if "denoiser" not in raw:
        raise DataError(f"{path}: 'denoiser' model path is required")
    base = path.parent
    denoiser, denoiser_id = formats.load_denoiser(base / raw["denoiser"])
    corrector, corrector_id = None, "none"
    if raw.get("corrector"):
        corrector, corrector_id = formats.load_corrector(base / raw["corrector"])
        if "tau_m" in raw:
            corrector = corrector.with_threshold(float(raw["tau_m"]))
    sampler = PoseSamplerConfig(**raw.get("sampler", {}))
    sched = raw.get("schedule", {})
    schedule = sigmoid_schedule(sched.get("T", denoiser.T), sched.get("start", -3.0), sched.get("end", 3.0),
                                sched.get("tau", 1.0))
    return GenerationConfig(denoiser, sampler, corrector, schedule, raw.get("reverse_steps", 250),
                            raw.get("scale"), raw.get("offset"), corrector_id, denoiser_id)


def cmd_generate(args):
    K = formats.read_intrinsics(args.intrinsics)
    depths, ids = _load_depths(args.input_dir, K)
    config = load_generation_config(args.config)
    result = generate_dataset(depths, args.count, config, args.seed, ids)
    out = Path(args.out)
    pairs = out / "pairs"
    records = []
    for r in result.records:
        pid = f"{r.provenance['index']:06d}"
        names = {k: f"pairs/{pid}_{k}" for k in ("source.pgm", "target.pgm", "source.xyz", "target.xyz", "mask.pgm")}
        formats.write_depth(pairs / f"{pid}_source.pgm", r.source_depth)
        formats.write_depth(pairs / f"{pid}_target.pgm", r.target_depth)
        formats.write_cloud(pairs / f"{pid}_source.xyz", r.source)
        formats.write_cloud(pairs / f"{pid}_target.xyz", r.target)
        formats.write_mask(pairs / f"{pid}_mask.pgm", r.condition_mask)
        records.append(formats.ManifestRecord(
            pid, names["source.pgm"], names["target.pgm"], names["source.xyz"], names["target.xyz"],
            names["mask.pgm"], r.gt_pose, r.overlap, r.seed, r.provenance["scale"], r.provenance["offset"],
            config.corrector_id, config.denoiser_id, {"input": r.provenance["input_id"]},
        ))
    formats.write_intrinsics(out / "intrinsics.txt", K)
    meta = {"seed": args.seed, "count": args.count, "sampler": json.dumps(config.sampler.to_dict(), sort_keys=True),
            "reverse_steps": config.reverse_steps, "schedule_T": config.schedule.T}
    formats.write_manifest(out / "manifest.txt", records, meta)
    buckets = overlap_buckets([r.overlap for r in result.records])
    print(f"generated {result.success_count}/{args.count} pairs, skipped {len(result.skipped)}; "
          f"overlap >0.3: {buckets['high']:.2f}, 0.1-0.3: {buckets['low']:.2f}")


def cmd_eval(args):
    manifest = Path(args.manifest)
    records = formats.read_manifest(manifest)
    if not records:
        raise DataError(f"{manifest}: no pairs")
    th = THRESHOLD_SETS[args.thresholds]
    results = []
    for i, r in enumerate(records):
        src = formats.read_cloud(manifest.parent / r.source_cloud)
        tgt = formats.read_cloud(manifest.parent / r.target_cloud)
        results.append(evaluate_pair(r.pair_id, src, tgt, r.gt_pose, th, args.num_corrs, args.noise,
                                     args.outliers, args.seed + i, args.iters, args.radius))
    report = EvalReport(th, results)
    text = "\n".join(report.lines()) + "\n"
    if args.out:
        formats.atomic_write(args.out, text)
    sys.stdout.write(text)


def cmd_inspect(args):
    manifest = Path(args.manifest)
    records = {r.pair_id: r for r in formats.read_manifest(manifest)}
    if args.pair not in records:
        raise DataError(f"pair {args.pair!r} not in {manifest}")
    r = records[args.pair]
    K = formats.read_intrinsics(manifest.parent / "intrinsics.txt")
    out = Path(args.out_dir)
    for name in ("source", "target"):
        d = formats.read_depth(manifest.parent / getattr(r, f"{name}_depth"), K)
        formats.write_preview(out / f"{r.pair_id}_{name}_preview.pgm", d.values)
    mask = formats.read_mask(manifest.parent / r.mask)
    formats.write_mask(out / f"{r.pair_id}_mask.pgm", mask)
    formats.write_mask(out / f"{r.pair_id}_inpainted.pgm", ~mask)
    print(f"wrote previews for pair {r.pair_id} to {out}")


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pairgen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    s = sub.add_parser("synth-scene", parents=[common], help="render a synthetic scene and its trajectory")
    s.add_argument("--kind", choices=["planes", "room", "sphere"], required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--fx", type=float, default=None, help="focal length in pixels (default 0.75*width)")
    s.set_defaults(func=cmd_synth_scene)

    s = sub.add_parser("prep-masks", parents=[common], help="build penetration mask samples by TSDF fusion")
    s.add_argument("--scene", required=True)
    s.add_argument("--trajectory", default=None)
    s.add_argument("--intrinsics", default=None)
    s.add_argument("--voxel-dense", type=float, default=0.01)
    s.add_argument("--voxel-sparse", type=float, default=0.05)
    s.add_argument("--tau-gt", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prep_masks)

    s = sub.add_parser("train-corrector", parents=[common], help="fit the penetration corrector")
    s.add_argument("--samples", required=True)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--kernel", type=int, default=5)
    s.add_argument("--tau-m", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_corrector)

    s = sub.add_parser("train-denoiser", parents=[common], help="fit the toy x0-predicting denoiser")
    s.add_argument("--images", required=True)
    s.add_argument("--intrinsics", default=None)
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_denoiser)

    s = sub.add_parser("generate", parents=[common], help="generate registration pairs")
    s.add_argument("--input-dir", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", parents=[common], help="closed-loop registration metrics on a dataset")
    s.add_argument("--manifest", required=True)
    s.add_argument("--thresholds", choices=sorted(THRESHOLD_SETS), default="indoor")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--outliers", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-corrs", type=int, default=500)
    s.add_argument("--iters", type=int, default=None, help="RANSAC iterations (default: threshold set)")
    s.add_argument("--radius", type=float, default=0.05, help="overlap radius in metres")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect", parents=[common], help="write PGM previews of one pair")
    s.add_argument("--pair", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"pairgen: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"pairgen: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PairgenError, ValueError, OSError) as exc:
        print(f"pairgen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
