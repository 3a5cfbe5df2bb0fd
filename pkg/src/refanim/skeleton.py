"""Articulated 14-joint figure: identities, cameras, motion and projection.

Body coordinates are y-up with the figure standing on y=0 and facing +z.
One body unit equals one canvas width at zoom 1 before the framing scale
``BODY_SCALE`` is applied.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

JOINT_NAMES = (
    "head",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
)
NUM_JOINTS = len(JOINT_NAMES)
J = {name: i for i, name in enumerate(JOINT_NAMES)}

# Skeleton connectivity used for pose maps.
BONES = (
    (J["head"], J["neck"]),
    (J["neck"], J["l_shoulder"]),
    (J["neck"], J["r_shoulder"]),
    (J["l_shoulder"], J["l_elbow"]),
    (J["l_elbow"], J["l_wrist"]),
    (J["r_shoulder"], J["r_elbow"]),
    (J["r_elbow"], J["r_wrist"]),
    (J["neck"], J["l_hip"]),
    (J["neck"], J["r_hip"]),
    (J["l_hip"], J["l_knee"]),
    (J["l_knee"], J["l_ankle"]),
    (J["r_hip"], J["r_knee"]),
    (J["r_knee"], J["r_ankle"]),
)

# Appearance limbs, one color and width each.
LIMBS = (
    ("neck", J["neck"], J["head"]),
    ("l_upper_arm", J["l_shoulder"], J["l_elbow"]),
    ("l_forearm", J["l_elbow"], J["l_wrist"]),
    ("r_upper_arm", J["r_shoulder"], J["r_elbow"]),
    ("r_forearm", J["r_elbow"], J["r_wrist"]),
    ("l_thigh", J["l_hip"], J["l_knee"]),
    ("l_shin", J["l_knee"], J["l_ankle"]),
    ("r_thigh", J["r_hip"], J["r_knee"]),
    ("r_shin", J["r_knee"], J["r_ankle"]),
    ("pelvis", J["l_hip"], J["r_hip"]),
)
NUM_LIMBS = len(LIMBS)

# Rest-pose joint offsets in body units; the kinematic tree below rotates these.
_NECK = np.array([0.0, 0.78, 0.0])
_HEAD_OFFSET = np.array([0.0, 0.11, 0.0])
_SHOULDER_OFFSET = np.array([0.12, -0.02, 0.0])
_UPPER_ARM = np.array([0.0, -0.17, 0.0])
_FOREARM = np.array([0.0, -0.15, 0.0])
_HIP_OFFSET = np.array([0.08, -0.33, 0.0])
_THIGH = np.array([0.0, -0.22, 0.0])
_SHIN = np.array([0.0, -0.21, 0.0])

BODY_SCALE = 0.85
BODY_CENTER_Y = 0.47
HEAD_REST_Y = float(_NECK[1] + _HEAD_OFFSET[1])
CHEST_REST_Y = 0.68

SHOT_TYPES = ("full", "medium", "closeup")
MEDIUM_ZOOM = 1.3
CLOSEUP_ZOOM = 2.2


def shot_type_for_zoom(zoom: float) -> str:
    if zoom < MEDIUM_ZOOM:
        return "full"
    if zoom < CLOSEUP_ZOOM:
        return "medium"
    return "closeup"


def body_to_canvas_y(y: float) -> float:
    """Canvas row (normalized, zoom 1) of a rest-pose body height."""
    return 0.5 - (y - BODY_CENTER_Y) * BODY_SCALE


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: str
    limb_colors: tuple[tuple[float, float, float], ...]
    limb_widths: tuple[float, ...]
    head_radius: float
    torso_texture_seed: int

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "IdentitySpec":
        return cls(
            identity_id=data["identity_id"],
            limb_colors=tuple(tuple(float(v) for v in c) for c in data["limb_colors"]),
            limb_widths=tuple(float(w) for w in data["limb_widths"]),
            head_radius=float(data["head_radius"]),
            torso_texture_seed=int(data["torso_texture_seed"]),
        )


@dataclass(frozen=True)
class CameraSpec:
    yaw: float
    pitch: float
    zoom: float
    crop_center: tuple[float, float] = (0.5, 0.5)
    shot_type: str = field(default="")

    def __post_init__(self):
        if self.zoom < 0.5:
            raise ValueError(f"zoom must be >= 0.5, got {self.zoom}")
        if not -math.pi <= self.yaw <= math.pi:
            raise ValueError(f"yaw out of range: {self.yaw}")
        if not -math.pi / 4 <= self.pitch <= math.pi / 4:
            raise ValueError(f"pitch out of range: {self.pitch}")
        expected = shot_type_for_zoom(self.zoom)
        if self.shot_type and self.shot_type != expected:
            raise ValueError(f"shot_type {self.shot_type!r} inconsistent with zoom {self.zoom}")
        object.__setattr__(self, "shot_type", expected)
        object.__setattr__(self, "crop_center", tuple(float(v) for v in self.crop_center))

    def to_json(self) -> dict:
        return {
            "yaw": self.yaw,
            "pitch": self.pitch,
            "zoom": self.zoom,
            "crop_center": list(self.crop_center),
            "shot_type": self.shot_type,
        }

    @classmethod
    def from_json(cls, data: dict) -> "CameraSpec":
        return cls(
            yaw=float(data["yaw"]),
            pitch=float(data["pitch"]),
            zoom=float(data["zoom"]),
            crop_center=tuple(data.get("crop_center", (0.5, 0.5))),
            shot_type=data.get("shot_type", ""),
        )


def sample_identity(seed: int, identity_id: str | None = None) -> IdentitySpec:
    rng = np.random.default_rng([seed, 0x1D])
    colors = rng.uniform(0.05, 0.95, size=(NUM_LIMBS, 3))
    widths = rng.uniform(0.022, 0.042, size=NUM_LIMBS)
    widths[0] *= 0.8  # neck
    head_radius = float(rng.uniform(0.048, 0.064))
    texture_seed = int(rng.integers(0, 2**31 - 1))
    return IdentitySpec(
        identity_id=identity_id if identity_id is not None else f"id_{seed:04d}",
        limb_colors=tuple(tuple(float(v) for v in c) for c in colors),
        limb_widths=tuple(float(w) for w in widths),
        head_radius=head_radius,
        torso_texture_seed=texture_seed,
    )


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# (name, base angle, amplitude) for each animated degree of freedom.
_DOFS = (
    ("twist", 0.0, 0.25),
    ("l_sh_swing", 0.0, 0.55),
    ("l_sh_abduct", 0.25, 0.35),
    ("r_sh_swing", 0.0, 0.55),
    ("r_sh_abduct", 0.25, 0.35),
    ("l_elbow", 0.5, 0.45),
    ("r_elbow", 0.5, 0.45),
    ("l_hip_swing", 0.0, 0.3),
    ("r_hip_swing", 0.0, 0.3),
    ("l_knee", 0.25, 0.25),
    ("r_knee", 0.25, 0.25),
    ("head_nod", 0.0, 0.15),
)


def _forward_kinematics(a: dict[str, float]) -> np.ndarray:
    joints = np.zeros((NUM_JOINTS, 3))
    root = _rot_y(a["twist"])
    neck = root @ _NECK
    joints[J["neck"]] = neck
    joints[J["head"]] = neck + root @ _rot_x(a["head_nod"]) @ _HEAD_OFFSET
    for side, sign in (("l", 1.0), ("r", -1.0)):
        shoulder = neck + root @ (_SHOULDER_OFFSET * [sign, 1.0, 1.0])
        upper = root @ _rot_x(a[f"{side}_sh_swing"]) @ _rot_z(sign * a[f"{side}_sh_abduct"])
        elbow = shoulder + upper @ _UPPER_ARM
        wrist = elbow + upper @ _rot_x(-a[f"{side}_elbow"]) @ _FOREARM
        hip = neck + root @ (_HIP_OFFSET * [sign, 1.0, 1.0])
        thigh = root @ _rot_x(a[f"{side}_hip_swing"])
        knee = hip + thigh @ _THIGH
        ankle = knee + thigh @ _rot_x(a[f"{side}_knee"]) @ _SHIN
        joints[J[f"{side}_shoulder"]] = shoulder
        joints[J[f"{side}_elbow"]] = elbow
        joints[J[f"{side}_wrist"]] = wrist
        joints[J[f"{side}_hip"]] = hip
        joints[J[f"{side}_knee"]] = knee
        joints[J[f"{side}_ankle"]] = ankle
    return joints


def synthesize_motion(identity: IdentitySpec, motion_seed: int, num_frames: int) -> np.ndarray:
    """Smooth periodic motion, returned as ``(num_frames, 14, 3)`` joint positions.

    Each degree of freedom follows a low-frequency sinusoid whose phase and
    frequency depend on ``motion_seed``; bone lengths are fixed by the rest
    pose so they stay constant across frames and shots.
    """
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    rng = np.random.default_rng([motion_seed, identity.torso_texture_seed, 0x40])
    freqs = rng.uniform(1.0 / 56.0, 1.0 / 36.0, size=len(_DOFS))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=len(_DOFS))
    scales = rng.uniform(0.5, 1.0, size=len(_DOFS))
    out = np.empty((num_frames, NUM_JOINTS, 3))
    for f in range(num_frames):
        angles = {
            name: base + amp * s * math.sin(2.0 * math.pi * fr * f + ph)
            for (name, base, amp), fr, ph, s in zip(_DOFS, freqs, phases, scales)
        }
        out[f] = _forward_kinematics(angles)
    return out


def bone_lengths(joints: np.ndarray) -> np.ndarray:
    a = np.array([b[0] for b in BONES])
    b = np.array([b[1] for b in BONES])
    return np.linalg.norm(joints[..., a, :] - joints[..., b, :], axis=-1)


def camera_rotation(camera: CameraSpec) -> np.ndarray:
    return _rot_x(camera.pitch) @ _rot_y(camera.yaw)


def project(joints: np.ndarray, camera: CameraSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthographic projection plus zoom crop.

    Returns normalized ``(14, 2)`` canvas coordinates (x right, y down), the
    per-joint camera depth (larger is closer), and visibility flags.
    """
    centered = joints - np.array([0.0, BODY_CENTER_Y, 0.0])
    cam = centered @ camera_rotation(camera).T
    full_x = 0.5 + cam[:, 0] * BODY_SCALE
    full_y = 0.5 - cam[:, 1] * BODY_SCALE
    cx, cy = camera.crop_center
    xy = np.stack([(full_x - cx) * camera.zoom + 0.5, (full_y - cy) * camera.zoom + 0.5], axis=-1)
    visible = np.all((xy >= 0.0) & (xy <= 1.0), axis=-1)
    return xy, cam[:, 2], visible
