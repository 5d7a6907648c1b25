"""On-disk layout for a view pair (or triple) plus an optional held-out target.

A pair directory holds ``pair.json`` and the images it names::

    {"views": [{"image": "view_1.png", "depth": "view_1_depth.pfm",
                "intrinsics": {"fx": .., "fy": .., "cx": .., "cy": ..},
                "pose": {"rotation_quat": [w, x, y, z], "translation": [..]}}, ...],
     "target": {"image": "target.png", "intrinsics": {...}, "pose": {...}}}

Depth, pose and intrinsics are optional per entry.  Missing intrinsics
fall back to the (H+W)/2 focal heuristic.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .imageio import read_pfm, read_png, write_pfm, write_png
from .scene import CameraIntrinsics, CameraPose, ViewBundle

PAIR_FILE = "pair.json"


@dataclass(frozen=True)
class TargetView:
    image: np.ndarray
    intrinsics: CameraIntrinsics
    pose: CameraPose | None


def pose_to_dict(pose):
    return {"rotation_quat": [float(v) for v in pose.quat],
            "translation": [float(v) for v in pose.translation]}


def pose_from_dict(d):
    return CameraPose.from_quat(np.asarray(d["rotation_quat"], float),
                                np.asarray(d["translation"], float))


def intrinsics_to_dict(k):
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy}


def intrinsics_from_dict(d, height, width):
    if not d:
        return CameraIntrinsics.default_for(height, width)
    return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                            width, height)


def _rgb(img):
    return np.repeat(img[..., None], 3, axis=-1) if img.ndim == 2 else img


def _read_entry(root, e):
    image = _rgb(read_png(os.path.join(root, e["image"])))
    H, W = image.shape[:2]
    k = intrinsics_from_dict(e.get("intrinsics"), H, W)
    pose = pose_from_dict(e["pose"]) if e.get("pose") else None
    depth = read_pfm(os.path.join(root, e["depth"])) if e.get("depth") else None
    return image, k, pose, depth


def read_pair(root):
    """Returns ``(views, target)``; ``target`` is None when the file has none."""
    with open(os.path.join(root, PAIR_FILE)) as f:
        spec = json.load(f)
    views = []
    for e in spec["views"]:
        image, k, pose, depth = _read_entry(root, e)
        views.append(ViewBundle(image=image, intrinsics=k, depth=depth, pose=pose))
    target = None
    if spec.get("target"):
        image, k, pose, _ = _read_entry(root, spec["target"])
        target = TargetView(image, k, pose)
    return views, target


def write_pair(root, views, target=None):
    os.makedirs(root, exist_ok=True)
    spec = {"views": []}
    for i, v in enumerate(views, 1):
        e = {"image": f"view_{i}.png", "intrinsics": intrinsics_to_dict(v.intrinsics)}
        write_png(os.path.join(root, e["image"]), v.image)
        if v.depth is not None:
            e["depth"] = f"view_{i}_depth.pfm"
            write_pfm(os.path.join(root, e["depth"]), v.depth)
        if v.pose is not None:
            e["pose"] = pose_to_dict(v.pose)
        spec["views"].append(e)
    if target is not None:
        e = {"image": "target.png", "intrinsics": intrinsics_to_dict(target.intrinsics)}
        write_png(os.path.join(root, e["image"]), target.image)
        if target.pose is not None:
            e["pose"] = pose_to_dict(target.pose)
        spec["target"] = e
    with open(os.path.join(root, PAIR_FILE), "w") as f:
        json.dump(spec, f, indent=2, sort_keys=True)
    return root
