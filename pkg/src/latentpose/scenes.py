"""Scene descriptors: JSON files tying a mesh, camera, poses, and depth together.

Schema (version 1), with asset paths resolved relative to the descriptor:

    {
      "schema_version": 1,
      "mesh": "cube.obj",
      "camera": {"fx":..., "fy":..., "cx":..., "cy":..., "width":..., "height":...},
      "scene_depth": "scene.depth" | null,
      "objects": [
        {
          "object_id": "obj1",
          "gt_pose": {"rotation": [9 floats, row-major], "translation": [3 floats]},
          "detection": {"bbox": [x, y, w, h], "score": 1.0} | null,
          "latent_code": [floats] | null,
          "latent_code_path": "code.f32" | null
        }
      ]
    }

``latent_code``/``latent_code_path`` feed externally computed codes straight
into the codebook lookup (little-endian f32 for the file form), bypassing
the built-in crop encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .pipeline import Detection
from .render import DepthImage, TriangleMesh, load_depth, load_mesh

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SceneObject:
    object_id: str | int
    gt_pose: Pose
    detection: Detection | None
    latent_code: np.ndarray | None


@dataclass(frozen=True)
class SceneDescriptor:
    path: Path
    mesh_path: Path
    mesh: TriangleMesh
    camera: CameraIntrinsics
    objects: tuple[SceneObject, ...]
    depth: DepthImage | None


def pose_from_dict(payload) -> Pose:
    rotation = np.asarray(payload["rotation"], dtype=np.float64).reshape(3, 3)
    return Pose(rotation, np.asarray(payload["translation"], dtype=np.float64))


def pose_to_dict(pose: Pose) -> dict:
    return {
        "rotation": [float(v) for v in pose.rotation.reshape(-1)],
        "translation": [float(v) for v in pose.translation],
    }


def load_scene(path) -> SceneDescriptor:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported scene schema version {version!r}")
    base = path.parent
    mesh_path = base / data["mesh"]
    if not mesh_path.exists():
        raise FileNotFoundError(f"{path}: mesh file {mesh_path} does not exist")
    mesh = load_mesh(mesh_path)
    cam = data["camera"]
    camera = CameraIntrinsics(
        fx=float(cam["fx"]),
        fy=float(cam["fy"]),
        cx=float(cam["cx"]),
        cy=float(cam["cy"]),
        width=int(cam["width"]),
        height=int(cam["height"]),
    )
    depth = None
    if data.get("scene_depth"):
        depth_path = base / data["scene_depth"]
        if not depth_path.exists():
            raise FileNotFoundError(f"{path}: depth file {depth_path} does not exist")
        depth = load_depth(depth_path)
        if (depth.height, depth.width) != (camera.height, camera.width):
            raise ValueError(f"{path}: depth image size does not match the camera")
    objects = []
    for index, obj in enumerate(data.get("objects", [])):
        detection = None
        if obj.get("detection"):
            det = obj["detection"]
            detection = Detection(bbox=tuple(float(v) for v in det["bbox"]), object_id=obj.get("object_id", index), score=float(det.get("score", 1.0)))
        code = None
        if obj.get("latent_code") is not None:
            code = np.asarray(obj["latent_code"], dtype=np.float32)
        elif obj.get("latent_code_path"):
            code_path = base / obj["latent_code_path"]
            if not code_path.exists():
                raise FileNotFoundError(f"{path}: latent code file {code_path} does not exist")
            code = np.fromfile(code_path, dtype="<f4")
        objects.append(
            SceneObject(
                object_id=obj.get("object_id", index),
                gt_pose=pose_from_dict(obj["gt_pose"]),
                detection=detection,
                latent_code=code,
            )
        )
    return SceneDescriptor(
        path=path,
        mesh_path=mesh_path,
        mesh=mesh,
        camera=camera,
        objects=tuple(objects),
        depth=depth,
    )


def write_scene(
    path,
    mesh_path: str,
    camera: CameraIntrinsics,
    objects,
    scene_depth: str | None = None,
) -> None:
    """Write a descriptor; ``objects`` holds (object_id, Pose, Detection | None) tuples."""
    payload = {
        "schema_version": SCHEMA_VERSION,
        "mesh": mesh_path,
        "camera": {
            "fx": camera.fx,
            "fy": camera.fy,
            "cx": camera.cx,
            "cy": camera.cy,
            "width": camera.width,
            "height": camera.height,
        },
        "scene_depth": scene_depth,
        "objects": [
            {
                "object_id": object_id,
                "gt_pose": pose_to_dict(pose),
                "detection": ({"bbox": list(det.bbox), "score": det.score} if det else None),
            }
            for object_id, pose, det in objects
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
