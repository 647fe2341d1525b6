"""Pose-error metrics: visible surface discrepancy, ADD/ADI, and aggregates.

The VSD here uses the step cost: a pixel in both visibility masks matches
when the two rendered depths agree within ``tau``; the error is the fraction
of the mask union left unmatched. Records below the visibility floor are
excluded from recall and AUC on both sides of the fraction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateViewError
from .geometry import CameraIntrinsics, Pose
from .render import DepthImage, TriangleMesh, render_depth


@dataclass(frozen=True)
class VsdParams:
    """Protocol constants for the visible-surface-discrepancy metric."""

    tau: float = 20.0  # depth agreement tolerance, mm
    delta: float = 15.0  # visibility-test tolerance against the scene, mm
    threshold: float = 0.3  # a pose counts as correct when err_vsd < threshold
    min_visibility: float = 0.1  # records at or below this fraction are dropped

    def __post_init__(self):
        if self.tau <= 0.0 or self.delta < 0.0:
            raise ValueError("tau must be positive and delta non-negative")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")
        if not 0.0 <= self.min_visibility <= 1.0:
            raise ValueError("min_visibility must be in [0, 1]")


@dataclass(frozen=True)
class EvalRecord:
    """One evaluated estimate against its ground truth."""

    object_id: str | int
    est_pose: Pose | None
    gt_pose: Pose
    err_vsd: float | None
    err_add: float | None
    visibility: float
    err_adi: float | None = None


def _visibility_mask(rendered: np.ndarray, scene: np.ndarray, delta: float) -> np.ndarray:
    # A rendered pixel is visible when it is not occluded by valid scene
    # depth; invalid (zero) scene depth never occludes.
    return (rendered > 0) & ((rendered <= scene + delta) | (scene <= 0))


def vsd_from_depths(d_est: np.ndarray, d_gt: np.ndarray, d_scene: np.ndarray, params: VsdParams) -> tuple[float, float]:
    """Step-cost VSD over rendered est/gt depth maps and the scene depth.

    Returns (error in [0, 1], gt visibility fraction). Raises
    DegenerateViewError when the gt render is empty.
    """
    gt_sil = d_gt > 0
    n_sil = int(gt_sil.sum())
    if n_sil == 0:
        raise DegenerateViewError("ground-truth silhouette is empty")
    est_mask = _visibility_mask(d_est, d_scene, params.delta)
    gt_mask = _visibility_mask(d_gt, d_scene, params.delta)
    union = int((est_mask | gt_mask).sum())
    visibility = float(gt_mask.sum()) / n_sil
    if union == 0:
        return 1.0, visibility
    matched = int((est_mask & gt_mask & (np.abs(d_est - d_gt) < params.tau)).sum())
    return 1.0 - matched / union, visibility


def vsd_error(
    mesh: TriangleMesh,
    est: Pose,
    gt: Pose,
    scene_depth: DepthImage,
    camera: CameraIntrinsics,
    params: VsdParams = VsdParams(),
) -> tuple[float, float]:
    """Render both poses and compare their visible depth surfaces."""
    if (scene_depth.height, scene_depth.width) != (camera.height, camera.width):
        raise ValueError("scene depth dimensions do not match the camera")
    d_est = render_depth(mesh, est, camera).data
    d_gt = render_depth(mesh, gt, camera).data
    return vsd_from_depths(d_est, d_gt, scene_depth.data, params)


def visibility_fraction(
    mesh: TriangleMesh,
    gt: Pose,
    scene_depth: DepthImage,
    camera: CameraIntrinsics,
    params: VsdParams = VsdParams(),
) -> float:
    """Visible fraction of the gt render alone (for records with no estimate)."""
    d_gt = render_depth(mesh, gt, camera).data
    gt_sil = d_gt > 0
    n_sil = int(gt_sil.sum())
    if n_sil == 0:
        raise DegenerateViewError("ground-truth silhouette is empty")
    return float(_visibility_mask(d_gt, scene_depth.data, params.delta).sum()) / n_sil


def add_error(mesh: TriangleMesh, est: Pose, gt: Pose) -> float:
    """Mean distance between corresponding transformed model vertices (mm)."""
    return float(np.linalg.norm(est.transform(mesh.vertices) - gt.transform(mesh.vertices), axis=1).mean())


def adi_error(mesh: TriangleMesh, est: Pose, gt: Pose) -> float:
    """Mean distance from gt-transformed vertices to the closest est vertex."""
    est_pts = est.transform(mesh.vertices)
    gt_pts = gt.transform(mesh.vertices)
    distances, _ = cKDTree(est_pts).query(gt_pts, k=1)
    return float(distances.mean())


def add_correct(err_add: float, diameter: float, k_m: float = 0.1) -> bool:
    """Correct-pose test against a fraction of the model diameter (strict)."""
    if diameter <= 0.0:
        raise ValueError("diameter must be positive")
    return err_add < k_m * diameter


def _passing(records, min_visibility: float) -> list[EvalRecord]:
    kept = [r for r in records if r.visibility > min_visibility]
    if not kept:
        raise ValueError("no records left to aggregate")
    return kept


def recall_at(records, threshold: float, min_visibility: float = 0.1) -> float:
    """Fraction of sufficiently-visible records with err_vsd < threshold."""
    kept = _passing(records, min_visibility)
    hits = sum(1 for r in kept if r.err_vsd is not None and r.err_vsd < threshold)
    return hits / len(kept)


def auc_vsd(records, min_visibility: float = 0.1) -> float:
    """Area under the err_vsd-threshold vs. recall curve on [0, 1].

    Computed as the exact step integral over the sorted errors; records
    without an error never count as correct but stay in the denominator.
    """
    kept = _passing(records, min_visibility)
    n = len(kept)
    errors = sorted(r.err_vsd for r in kept if r.err_vsd is not None)
    area = 0.0
    for j, err in enumerate(errors, start=1):
        upper = errors[j] if j < len(errors) else 1.0
        area += max(0.0, min(upper, 1.0) - min(err, 1.0)) * j / n
    return area


def summarize(records, params: VsdParams = VsdParams()) -> dict:
    """Aggregate a record list into the summary block of the report."""
    kept = [r for r in records if r.visibility > params.min_visibility]
    excluded = len(records) - len(kept)

    def _mean(values):
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None

    summary = {
        "type": "summary",
        "schema_version": 1,
        "count": len(records),
        "evaluated": len(kept),
        "excluded_low_visibility": excluded,
        "vsd_threshold": params.threshold,
        "min_visibility": params.min_visibility,
        "recall_vsd": recall_at(records, params.threshold, params.min_visibility) if kept else None,
        "auc_vsd": auc_vsd(records, params.min_visibility) if kept else None,
        "mean_err_vsd": _mean(r.err_vsd for r in kept),
        "mean_err_add": _mean(r.err_add for r in kept),
        "mean_err_adi": _mean(r.err_adi for r in kept),
    }
    return summary


def _pose_dict(pose: Pose | None):
    if pose is None:
        return None
    return {
        "rotation": [round(float(v), 12) for v in pose.rotation.reshape(-1)],
        "translation": [round(float(v), 9) for v in pose.translation],
    }


def write_report(records, path_or_file, params: VsdParams = VsdParams()) -> dict:
    """Emit one JSON line per record plus a final summary line; returns the summary."""
    summary = summarize(records, params)

    def _dump(fh):
        for r in records:
            line = {
                "type": "record",
                "object_id": r.object_id,
                "est_pose": _pose_dict(r.est_pose),
                "gt_pose": _pose_dict(r.gt_pose),
                "err_vsd": r.err_vsd,
                "err_add": r.err_add,
                "err_adi": r.err_adi,
                "visibility": r.visibility,
            }
            fh.write(json.dumps(line, sort_keys=True) + "\n")
        fh.write(json.dumps(summary, sort_keys=True) + "\n")

    if hasattr(path_or_file, "write"):
        _dump(path_or_file)
    else:
        with open(path_or_file, "w", encoding="utf-8") as fh:
            _dump(fh)
    return summary
