"""Command-line surface for the pose pipeline and the toy experiment.

Commands: toy-train, toy-analyze, codebook-build, estimate, evaluate. Every
command takes --seed and --json; artifacts are byte-deterministic given the
flags and seed. Exit codes: 0 success, 1 usage, 2 data error, 3 numerical
failure. LATENTPOSE_THREADS sets the default worker count for per-record
evaluation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig
from .codebook import build_codebook, load_codebook, save_codebook
from .errors import (
    CodebookFormatError,
    DegenerateCodeError,
    DegenerateGeometryError,
    DegenerateViewError,
    InsufficientDataError,
    InsufficientOverlapError,
    MeshParseError,
    NoOverlapError,
    TrainingDivergedError,
)
from .geometry import CameraIntrinsics, subdivide_icosahedron
from .icp import IcpConfig, PointCloud, backproject, estimate_normals, icp_refine, icp_refine_z
from .metrics import EvalRecord, VsdParams, add_error, adi_error, summarize, visibility_fraction, vsd_error, write_report
from .pipeline import DistanceContext, cropped_codebook_views, estimate_pose_from_code, square_crop
from .render import DepthImage, generate_codebook_views, load_mesh, sample_surface
from .scenes import load_scene, pose_from_dict, pose_to_dict
from .toyae import (
    TrainConfig,
    analyze_latent,
    encode as toy_encode,
    load_toy_model,
    save_toy_model,
    train,
    write_loss_csv,
    write_traces_csv,
)

THREADS_ENV = "LATENTPOSE_THREADS"

_DATA_ERRORS = (ValueError, KeyError, OSError, json.JSONDecodeError, MeshParseError, CodebookFormatError)
_NUMERIC_ERRORS = (
    TrainingDivergedError,
    NoOverlapError,
    InsufficientOverlapError,
    DegenerateGeometryError,
    ArithmeticError,
    np.linalg.LinAlgError,
)


def default_thread_count() -> int:
    value = os.environ.get(THREADS_ENV, "")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Encoders


def make_encoder(spec: str):
    """Build an image->code function from an encoder spec string.

    ``pixels:N`` flattens a nearest-neighbor N x N downsample of the crop
    (dim N*N); ``toy:PATH`` runs the encoder half of a toy checkpoint.
    """
    kind, _, arg = spec.partition(":")
    if kind == "pixels":
        n = int(arg or "16")
        if n < 1:
            raise ValueError("pixels encoder size must be positive")

        def encode(image):
            plane = image if image.ndim == 2 else image[..., 0]
            h, w = plane.shape
            rows = np.floor((np.arange(n) + 0.5) * h / n).astype(np.int64)
            cols = np.floor((np.arange(n) + 0.5) * w / n).astype(np.int64)
            return plane[np.ix_(rows, cols)].astype(np.float32).reshape(-1)

        return encode, n * n
    if kind == "toy":
        model = load_toy_model(arg)
        side = model.input_side

        def encode(image):
            plane = image if image.ndim == 2 else image[..., 0]
            h, w = plane.shape
            rows = np.floor((np.arange(side) + 0.5) * h / side).astype(np.int64)
            cols = np.floor((np.arange(side) + 0.5) * w / side).astype(np.int64)
            patch = plane[np.ix_(rows, cols)].astype(np.float32)
            limit = float(patch.max())
            if limit > 1.0:
                patch = patch / limit
            return toy_encode(model, patch.reshape(-1))[0]

        return encode, model.latent_dim
    raise ValueError(f"unknown encoder spec {spec!r} (expected pixels:N or toy:PATH)")


# ---------------------------------------------------------------------------
# Command implementations


def _emit(args, payload: dict, human_lines) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


def cmd_toy_train(args) -> int:
    overrides = {}
    input_dist, target_dist = "d", "a"
    augment_config = None
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        input_dist = raw.pop("input_dist", input_dist)
        target_dist = raw.pop("target_dist", target_dist)
        augment_fields = raw.pop("augment", None)
        if augment_fields is not None:
            augment_config = AugmentConfig(
                **{k: tuple(v) if isinstance(v, list) else v for k, v in augment_fields.items()}
            )
        overrides.update(raw)
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    overrides["seed"] = args.seed
    if "hidden" in overrides:
        overrides["hidden"] = tuple(overrides["hidden"])
    config = TrainConfig(**overrides)
    model, curve = train(config, input_dist, target_dist, augment_config)
    save_toy_model(model, args.checkpoint)
    if args.loss_csv:
        write_loss_csv(curve, args.loss_csv)
    final_loss = curve[-1][1] if curve else None
    payload = {
        "schema_version": 1,
        "command": "toy-train",
        "checkpoint": str(args.checkpoint),
        "loss_csv": str(args.loss_csv) if args.loss_csv else None,
        "input_dist": input_dist,
        "target_dist": target_dist,
        "iterations": config.iterations,
        "seed": config.seed,
        "final_loss": final_loss,
    }
    _emit(args, payload, [f"trained {input_dist}->{target_dist} for {config.iterations} iterations", f"checkpoint written to {args.checkpoint}", f"final loss: {final_loss}"])
    return 0


def cmd_toy_analyze(args) -> int:
    model = load_toy_model(args.checkpoint)
    distributions = tuple(args.distributions.split(","))
    analysis = analyze_latent(model, n_angles=args.angles, distributions=distributions, seed=args.seed)
    write_traces_csv(analysis, args.out)
    fits = {
        f"{name}.z{dim + 1}": {
            "omega": fit.omega,
            "amplitude": fit.amplitude,
            "phase": fit.phase,
            "r_squared": fit.r_squared,
            "degenerate": fit.degenerate,
        }
        for (name, dim), fit in sorted(analysis.fits.items())
    }
    gaps = {}
    for i, first in enumerate(distributions):
        for second in distributions[i + 1 :]:
            gaps[f"{first}-{second}"] = analysis.trace_gap(first, second)
    payload = {
        "schema_version": 1,
        "command": "toy-analyze",
        "traces_csv": str(args.out),
        "fits": fits,
        "trace_gaps": gaps,
        "phase_difference": {k: v for k, v in sorted(analysis.phase_difference.items())},
    }
    lines = [f"traces written to {args.out}"]
    for key, fit in fits.items():
        lines.append(
            f"{key}: omega={fit['omega']:.3f} amplitude={fit['amplitude']:.3f} R^2={fit['r_squared']:.4f}"
            + (" (degenerate)" if fit["degenerate"] else "")
        )
    for key, gap in gaps.items():
        lines.append(f"trace gap {key}: {gap:.4f}")
    _emit(args, payload, lines)
    return 0


def _syn_camera(size: int, focal: float | None) -> CameraIntrinsics:
    f = focal if focal is not None else float(size)
    return CameraIntrinsics(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0, width=size, height=size)


def cmd_codebook_build(args) -> int:
    mesh = load_mesh(args.mesh)
    camera = _syn_camera(args.size, args.focal)
    sphere = subdivide_icosahedron(args.level)
    encoder, dim = make_encoder(args.encoder)
    started = time.perf_counter()
    views = generate_codebook_views(mesh, sphere, args.inplane, camera, args.t_syn_z)
    codebook = build_codebook(encoder, cropped_codebook_views(views, padding=args.padding, crop_size=args.crop_size))
    save_codebook(codebook, args.out)
    elapsed = time.perf_counter() - started
    meta = {
        "schema_version": 1,
        "mesh": str(args.mesh),
        "level": args.level,
        "inplane": args.inplane,
        "t_syn_z": args.t_syn_z,
        "camera": {"focal": camera.fx, "size": args.size},
        "encoder": args.encoder,
        "padding": args.padding,
        "crop_size": args.crop_size,
        "entries": len(codebook),
        "dim": dim,
    }
    with open(str(args.out) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    payload = {"schema_version": 1, "command": "codebook-build", "out": str(args.out), "entries": len(codebook), "dim": dim, "elapsed_s": round(elapsed, 3)}
    _emit(args, payload, [f"codebook with {len(codebook)} entries (dim {dim}) written to {args.out}", f"build time: {elapsed:.1f} s"])
    return 0


def _load_codebook_meta(path) -> dict:
    meta_path = Path(str(path) + ".meta.json")
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    return {}


def _refine_with_icp(scene, estimate, args, seed):
    model = PointCloud(sample_surface(scene.mesh, count=3000, seed=seed))
    cloud = estimate_normals(backproject(scene.depth, scene.camera))
    staged = icp_refine_z(model, cloud, estimate.pose, threshold=args.icp_threshold)
    refined, stats = icp_refine(model, cloud, staged, IcpConfig(initial_threshold=args.icp_threshold))
    return refined, stats


def cmd_estimate(args) -> int:
    scene = load_scene(args.scene)
    codebook = load_codebook(args.codebook)
    meta = _load_codebook_meta(args.codebook)
    encoder_spec = args.encoder or meta.get("encoder", "pixels:16")
    padding = args.padding if args.padding is not None else meta.get("padding", 1.2)
    crop_size = args.crop_size if args.crop_size is not None else meta.get("crop_size", 128)
    t_syn_z = args.t_syn_z if args.t_syn_z is not None else meta.get("t_syn_z", 700.0)
    syn_size = args.syn_size if args.syn_size is not None else meta.get("camera", {}).get("size", 128)
    syn_focal = args.syn_focal if args.syn_focal is not None else meta.get("camera", {}).get("focal")
    encoder, _ = make_encoder(encoder_spec)
    ctx = DistanceContext(k_syn=_syn_camera(int(syn_size), syn_focal), k_real=scene.camera, t_syn_z=float(t_syn_z))

    icp_ready = True
    icp_problem = None
    if args.icp and scene.depth is None:
        icp_ready = False
        icp_problem = f"scene {args.scene} has no depth image; ICP refinement skipped"

    results = []
    for index, obj in enumerate(scene.objects):
        if obj.detection is None:
            continue
        if obj.latent_code is not None:
            estimate = estimate_pose_from_code(obj.latent_code, obj.detection, codebook, ctx, k=args.k)
        else:
            if scene.depth is None:
                raise ValueError(f"scene {args.scene} provides neither depth nor latent codes to encode")
            crop = square_crop(scene.depth.data, obj.detection.bbox, padding=padding, out_size=crop_size)
            estimate = estimate_pose_from_code(encoder(crop), obj.detection, codebook, ctx, k=args.k)
        entry = {
            "type": "estimate",
            "scene": scene.path.name,
            "index": index,
            "object_id": obj.object_id,
            "pose": pose_to_dict(estimate.pose),
            "similarity": estimate.similarity,
            "distance_mm": estimate.distance,
            "neighbors": [[i, s] for i, s in estimate.neighbors],
            "refined_pose": None,
            "icp": None,
        }
        if args.icp and icp_ready:
            try:
                refined, stats = _refine_with_icp(scene, estimate, args, args.seed)
                entry["refined_pose"] = pose_to_dict(refined)
                entry["icp"] = {
                    "iterations": stats.iterations,
                    "final_residual": stats.final_residual,
                    "correspondences": stats.correspondences,
                }
            except (NoOverlapError, InsufficientOverlapError, DegenerateGeometryError, InsufficientDataError) as exc:
                entry["icp"] = {"error": str(exc)}
        results.append(entry)

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for entry in results:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    payload = {"schema_version": 1, "command": "estimate", "scene": str(args.scene), "results": results, "icp_error": icp_problem}
    lines = []
    for entry in results:
        t = entry["pose"]["translation"]
        lines.append(
            f"[{entry['index']}] {entry['object_id']}: similarity={entry['similarity']:.4f} "
            f"t=({t[0]:.1f}, {t[1]:.1f}, {t[2]:.1f}) mm"
            + (" +icp" if entry["refined_pose"] else "")
        )
    if not results:
        lines.append("no detections in scene; empty report")
    _emit(args, payload, lines)
    if icp_problem is not None:
        print(f"error: {icp_problem}", file=sys.stderr)
        return 2
    return 0


def _scene_paths(root: str) -> list[Path]:
    path = Path(root)
    if path.is_dir():
        return sorted(p for p in path.glob("*.json") if not p.name.endswith(".meta.json"))
    return [path]


def _load_estimates(path) -> dict:
    table = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            if entry.get("type") != "estimate":
                continue
            key = (entry["scene"], entry["index"])
            table[key] = entry
    return table


def _evaluate_record(scene, index, obj, est_entry, params, use_refined):
    est_pose = None
    if est_entry is not None:
        pose_dict = est_entry.get("refined_pose") if use_refined else None
        pose_dict = pose_dict or est_entry.get("pose")
        if pose_dict:
            est_pose = pose_from_dict(pose_dict)
    depth = scene.depth
    if depth is None:
        depth = DepthImage(scene.camera.width, scene.camera.height, np.zeros((scene.camera.height, scene.camera.width), np.float32))
    if est_pose is None:
        err_vsd = None
        visibility = visibility_fraction(scene.mesh, obj.gt_pose, depth, scene.camera, params)
        err_add = None
        err_adi = None
    else:
        err_vsd, visibility = vsd_error(scene.mesh, est_pose, obj.gt_pose, depth, scene.camera, params)
        err_add = add_error(scene.mesh, est_pose, obj.gt_pose)
        err_adi = adi_error(scene.mesh, est_pose, obj.gt_pose)
    return EvalRecord(
        object_id=obj.object_id,
        est_pose=est_pose,
        gt_pose=obj.gt_pose,
        err_vsd=err_vsd,
        err_add=err_add,
        visibility=visibility,
        err_adi=err_adi,
    )


def cmd_evaluate(args) -> int:
    params = VsdParams(tau=args.tau, delta=args.delta, threshold=args.vsd_threshold, min_visibility=args.min_visibility)
    estimates = _load_estimates(args.est)
    jobs = []
    for scene_path in _scene_paths(args.scenes):
        scene = load_scene(scene_path)
        for index, obj in enumerate(scene.objects):
            jobs.append((scene, index, obj, estimates.get((scene.path.name, index))))
    workers = args.threads or default_thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(lambda job: _evaluate_record(*job, params, args.refined), jobs))
    else:
        records = [_evaluate_record(*job, params, args.refined) for job in jobs]
    if not records:
        raise ValueError("no ground-truth objects found to evaluate")
    if args.out:
        summary = write_report(records, args.out, params)
    elif not args.json:
        summary = write_report(records, sys.stdout, params)
    else:
        summary = summarize(records, params)
    payload = {"schema_version": 1, "command": "evaluate", "summary": summary, "report": str(args.out) if args.out else None}
    lines = [
        f"evaluated {summary['evaluated']}/{summary['count']} records "
        f"({summary['excluded_low_visibility']} excluded below {params.min_visibility:.0%} visibility)",
        f"recall @ err_vsd<{params.threshold}: {summary['recall_vsd']}",
        f"AUC_vsd: {summary['auc_vsd']}",
        f"mean err_add: {summary['mean_err_add']} mm, mean err_adi: {summary['mean_err_adi']} mm",
    ]
    _emit(args, payload, lines)
    return 0


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=0, help="seed for all randomized steps")
    sub.add_argument("--json", action="store_true", help="machine-readable output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latentpose", description=__doc__)
    parser.add_argument("--version", action="version", version=f"latentpose {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub = commands.add_parser("toy-train", help="train the toy autoencoder on rotated squares")
    sub.add_argument("--config", help="JSON file with TrainConfig fields plus input_dist/target_dist")
    sub.add_argument("--iterations", type=int, default=None, help="override the configured iteration count")
    sub.add_argument("--checkpoint", required=True, help="output checkpoint path")
    sub.add_argument("--loss-csv", help="output CSV with the sampled loss curve")
    _add_common(sub)
    sub.set_defaults(func=cmd_toy_train)

    sub = commands.add_parser("toy-analyze", help="latent rotation traces and sinusoid fits")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--out", required=True, help="output CSV (r_deg, z1, z2, distribution)")
    sub.add_argument("--angles", type=int, default=40)
    sub.add_argument("--distributions", default="a,b,c")
    _add_common(sub)
    sub.set_defaults(func=cmd_toy_analyze)

    sub = commands.add_parser("codebook-build", help="render a view sphere and build the codebook")
    sub.add_argument("--mesh", required=True)
    sub.add_argument("--level", type=int, required=True, help="icosphere subdivision level")
    sub.add_argument("--inplane", type=int, required=True, help="in-plane rotations per viewpoint")
    sub.add_argument("--out", required=True)
    sub.add_argument("--size", type=int, default=128, help="synthetic render size (pixels)")
    sub.add_argument("--focal", type=float, default=None, help="synthetic focal length (default: size)")
    sub.add_argument("--t-syn-z", type=float, default=700.0)
    sub.add_argument("--encoder", default="pixels:16")
    sub.add_argument("--padding", type=float, default=1.2)
    sub.add_argument("--crop-size", type=int, default=128)
    _add_common(sub)
    sub.set_defaults(func=cmd_codebook_build)

    sub = commands.add_parser("estimate", help="estimate 6D poses for scene detections")
    sub.add_argument("--scene", required=True)
    sub.add_argument("--codebook", required=True)
    sub.add_argument("--encoder", default=None, help="default: the codebook's build encoder")
    sub.add_argument("--k", type=int, default=1, help="neighbors reported as diagnostics")
    sub.add_argument("--padding", type=float, default=None)
    sub.add_argument("--crop-size", type=int, default=None)
    sub.add_argument("--t-syn-z", type=float, default=None)
    sub.add_argument("--syn-size", type=int, default=None)
    sub.add_argument("--syn-focal", type=float, default=None)
    sub.add_argument("--icp", action="store_true", help="refine with depth ICP (needs scene depth)")
    sub.add_argument("--icp-threshold", type=float, default=None)
    sub.add_argument("--out", help="write per-detection JSONL estimates here")
    _add_common(sub)
    sub.set_defaults(func=cmd_estimate)

    sub = commands.add_parser("evaluate", help="VSD/ADD/ADI metrics for estimates against a scene set")
    sub.add_argument("--scenes", required=True, help="scene descriptor file or directory")
    sub.add_argument("--est", required=True, help="JSONL produced by estimate --out")
    sub.add_argument("--tau", type=float, default=20.0)
    sub.add_argument("--delta", type=float, default=15.0)
    sub.add_argument("--vsd-threshold", type=float, default=0.3)
    sub.add_argument("--min-visibility", type=float, default=0.1)
    sub.add_argument("--refined", action="store_true", help="evaluate refined poses when present")
    sub.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")
    sub.add_argument("--out", help="write the JSONL report here")
    _add_common(sub)
    sub.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
