"""Rasterization of identities and pose maps.

Everything is drawn with OpenCV at ``SUPERSAMPLE`` times the target
resolution and area-downsampled, so outputs are deterministic uint8 images.
"""

from __future__ import annotations

import cv2
import numpy as np

from .skeleton import (
    BONES,
    J,
    LIMBS,
    NUM_JOINTS,
    CameraSpec,
    IdentitySpec,
    camera_rotation,
    project,
)

SUPPORTED_RESOLUTIONS = (32, 64, 128)
SUPERSAMPLE = 4
_SHIFT = 4  # fixed-point fractional bits for cv2 drawing
BACKGROUND = (0.36, 0.38, 0.42)

# One fixed color per bone (RGB, 0-255), OpenPose-like hues.
BONE_COLORS = (
    (255, 0, 85),
    (255, 85, 0),
    (255, 170, 0),
    (255, 255, 0),
    (170, 255, 0),
    (85, 255, 0),
    (0, 255, 0),
    (0, 255, 85),
    (0, 255, 170),
    (0, 255, 255),
    (0, 170, 255),
    (0, 85, 255),
    (85, 0, 255),
)
assert len(BONE_COLORS) == len(BONES)


def _check_resolution(resolution: int) -> None:
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"unsupported resolution {resolution}; expected one of {SUPPORTED_RESOLUTIONS}")


def _fixed(p: np.ndarray, size: int) -> tuple[int, int]:
    q = np.round(np.asarray(p) * size * (1 << _SHIFT)).astype(np.int64)
    # cv2 clips lines itself; keep coordinates inside int32 range.
    q = np.clip(q, -(1 << 24), 1 << 24)
    return int(q[0]), int(q[1])


def _radius(r: float, size: int) -> int:
    return max(1, int(round(r * size * (1 << _SHIFT))))


def _thickness(w: float, size: int) -> int:
    return max(1, int(round(w * size)))


def _to_rgb255(color) -> tuple[int, int, int]:
    return tuple(int(round(float(c) * 255.0)) for c in color)


def _downsample(canvas: np.ndarray, resolution: int) -> np.ndarray:
    return cv2.resize(canvas, (resolution, resolution), interpolation=cv2.INTER_AREA)


def _torso_style(identity: IdentitySpec):
    rng = np.random.default_rng([identity.torso_texture_seed, 0x70])
    base = rng.uniform(0.1, 0.9, size=3)
    stripe = rng.uniform(0.1, 0.9, size=3)
    skin = rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6])
    hair = rng.uniform(0.0, 0.45, size=3)
    n_stripes = int(rng.integers(2, 5))
    return base, stripe, skin, hair, n_stripes


def render_pose_map(skeleton2d: np.ndarray, resolution: int) -> np.ndarray:
    """Draw bones of a ``(14, 3)`` ``[x, y, visible]`` skeleton on black.

    Bones are drawn from the stored coordinates whether or not their end
    points are inside the canvas, so partially cropped limbs still appear.
    """
    _check_resolution(resolution)
    size = resolution * SUPERSAMPLE
    canvas = np.zeros((size, size, 3), np.uint8)
    thickness = _thickness(0.035, size)
    for (a, b), color in zip(BONES, BONE_COLORS):
        cv2.line(canvas, _fixed(skeleton2d[a, :2], size), _fixed(skeleton2d[b, :2], size),
                 color, thickness, cv2.LINE_8, _SHIFT)
    for k in range(NUM_JOINTS):
        if skeleton2d[k, 2] > 0.5:
            cv2.circle(canvas, _fixed(skeleton2d[k, :2], size), _radius(0.025, size),
                       (255, 255, 255), -1, cv2.LINE_8, _SHIFT)
    return _downsample(canvas, resolution)


def render_figure(identity: IdentitySpec, joints3d: np.ndarray, camera: CameraSpec,
                  resolution: int) -> np.ndarray:
    """Render one RGB uint8 frame of the textured figure."""
    _check_resolution(resolution)
    size = resolution * SUPERSAMPLE
    canvas = np.empty((size, size, 3), np.uint8)
    canvas[:] = _to_rgb255(BACKGROUND)
    xy, depth, _ = project(joints3d, camera)
    zoom = camera.zoom
    base, stripe, skin, hair, n_stripes = _torso_style(identity)

    # Torso faces the camera when its forward normal has positive camera z.
    twist_forward = np.cross(joints3d[J["r_shoulder"]] - joints3d[J["l_shoulder"]],
                             joints3d[J["neck"]] - joints3d[J["l_hip"]])
    forward = camera_rotation(camera) @ (-twist_forward)
    facing = forward[2] > 0

    items = []
    for k, (_, a, b) in enumerate(LIMBS):
        items.append((0.5 * (depth[a] + depth[b]), "limb", k))
    torso_depth = float(np.mean(depth[[J["l_shoulder"], J["r_shoulder"], J["l_hip"], J["r_hip"]]]))
    items.append((torso_depth, "torso", 0))
    # The head always covers the neck limb it sits on.
    items.append((max(float(depth[J["head"]]), items[0][0] + 1e-3), "head", 0))
    # Painter's order: far to near; the pelvis band always sits on the torso.
    items.sort(key=lambda it: (it[0] + (1e-3 if it[1] == "limb" and it[2] == 9 else 0.0)))

    for _, kind, k in items:
        if kind == "limb":
            _, a, b = LIMBS[k]
            color = _to_rgb255(identity.limb_colors[k])
            thick = _thickness(identity.limb_widths[k] * zoom, size)
            pa, pb = _fixed(xy[a], size), _fixed(xy[b], size)
            cv2.line(canvas, pa, pb, color, thick, cv2.LINE_8, _SHIFT)
            for p in (pa, pb):
                cv2.circle(canvas, p, max(1, thick * (1 << _SHIFT) // 2), color, -1, cv2.LINE_8, _SHIFT)
        elif kind == "torso":
            quad = np.array([_fixed(xy[J[n]], size) for n in ("l_shoulder", "r_shoulder", "r_hip", "l_hip")],
                            np.int32)
            torso_color = base if facing else base * 0.6
            cv2.fillPoly(canvas, [quad], _to_rgb255(torso_color), cv2.LINE_8, _SHIFT)
            if facing:
                top = 0.5 * (xy[J["l_shoulder"]] + xy[J["r_shoulder"]])
                bottom = 0.5 * (xy[J["l_hip"]] + xy[J["r_hip"]])
                half = 0.5 * (xy[J["l_shoulder"]] - xy[J["r_shoulder"]])
                for s in range(n_stripes):
                    frac = (s + 1) / (n_stripes + 1)
                    mid = top + (bottom - top) * frac
                    cv2.line(canvas, _fixed(mid - 0.8 * half, size), _fixed(mid + 0.8 * half, size),
                             _to_rgb255(stripe), _thickness(0.02 * zoom, size), cv2.LINE_8, _SHIFT)
        else:
            center = xy[J["head"]]
            r = identity.head_radius * zoom
            if facing:
                cv2.circle(canvas, _fixed(center, size), _radius(r, size), _to_rgb255(skin), -1,
                           cv2.LINE_8, _SHIFT)
                # Eyes offset along the projected shoulder axis.
                axis = xy[J["l_shoulder"]] - xy[J["r_shoulder"]]
                axis = axis / (np.linalg.norm(axis) + 1e-9)
                for sgn in (-1.0, 1.0):
                    eye = center + sgn * 0.35 * r * axis - np.array([0.0, 0.15 * r])
                    cv2.circle(canvas, _fixed(eye, size), _radius(0.16 * r, size), (20, 20, 30), -1,
                               cv2.LINE_8, _SHIFT)
            else:
                cv2.circle(canvas, _fixed(center, size), _radius(r, size), _to_rgb255(hair), -1,
                           cv2.LINE_8, _SHIFT)
    return _downsample(canvas, resolution)


def project_and_render(identity: IdentitySpec, skeleton: np.ndarray, camera: CameraSpec,
                       resolution: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render a frame and its pose map.

    Returns ``(frame, pose_map, skeleton2d)``; images are float32 HxWx3 in
    [0, 1] and ``skeleton2d`` holds ``[x, y, visible]`` rows.
    """
    _check_resolution(resolution)
    xy, _, visible = project(skeleton, camera)
    skeleton2d = np.concatenate([xy, visible[:, None].astype(np.float64)], axis=1)
    frame = render_figure(identity, skeleton, camera, resolution)
    pose_map = render_pose_map(skeleton2d, resolution)
    return to_float(frame), to_float(pose_map), skeleton2d


def to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, np.float64) * 255.0), 0, 255).astype(np.uint8)
