"""Rigid transforms, the orthographic camera and box corner conventions.

Frames
------
pallet: origin at the centre of the pallet top surface, x to the right,
    y away from the camera, z up.
camera: x right, y down, z along the viewing direction.  Orthographic, so a
    pixel ``(row, col)`` looks along +z from ``((col-cx)/ppm, (row-cy)/ppm, 0)``.
box: local axes (short, long, height), origin at the box centre, so
    ``dims_slh / 2`` are the half extents.

Keypoint frame (the frame recovered from 3-D corners): x from the left to the
right front corner, y from the front face to the back face, z up.  Corners
are ordered front TL, TR, BR, BL, then back TL, TR, BR, BL.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# unit corner template in the keypoint frame
CORNER_SIGNS = np.array([
    [-1, -1, 1], [1, -1, 1], [1, -1, -1], [-1, -1, -1],
    [-1, 1, 1], [1, 1, 1], [1, 1, -1], [-1, 1, -1],
], dtype=np.float64)

# rotating a box by 180 degrees about its height axis leaves it unchanged
FLIP_Z = np.diag([-1.0, -1.0, 1.0])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_angle(ra, rb) -> float:
    """Geodesic angle between two rotation matrices, in radians."""
    r = np.asarray(ra).T @ np.asarray(rb)
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


def symmetric_rotation_angle(ra, rb) -> float:
    """Rotation error modulo the 180-degree box symmetry about the height axis."""
    return min(rotation_angle(ra, rb), rotation_angle(ra, np.asarray(rb) @ FLIP_Z))


def is_rotation(r, tol: float = 1e-5) -> bool:
    r = np.asarray(r)
    return (r.shape == (3, 3) and np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol)


@dataclass(frozen=True)
class RigidTransform:
    """Maps points from a source frame into a target frame: ``R @ p + t``."""
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, p) -> np.ndarray:
        return np.asarray(p) @ self.rotation.T + self.translation

    def inverse_apply(self, p) -> np.ndarray:
        return (np.asarray(p) - self.translation) @ self.rotation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "RigidTransform":
        return cls(np.asarray(d["rotation"], dtype=np.float64),
                   np.asarray(d["translation"], dtype=np.float64))


@dataclass(frozen=True)
class OrthoCamera:
    width: int
    height: int
    ppm: float
    cx: float
    cy: float
    pose: RigidTransform  # camera <- pallet

    def project(self, p_cam) -> np.ndarray:
        """Camera-frame points to (col, row) pixel coordinates."""
        p = np.asarray(p_cam)
        return np.stack([self.cx + self.ppm * p[..., 0], self.cy + self.ppm * p[..., 1]], -1)

    def pixel_xy(self, rows, cols):
        return (np.asarray(cols) - self.cx) / self.ppm, (np.asarray(rows) - self.cy) / self.ppm

    def scaled(self, factor: float) -> "OrthoCamera":
        """Same view at a different resolution; pixel (i, j) of the scaled
        camera sits at pixel (i/factor, j/factor) of this one."""
        return OrthoCamera(int(round(self.width * factor)), int(round(self.height * factor)),
                           self.ppm * factor, self.cx * factor, self.cy * factor, self.pose)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "ppm": self.ppm,
                "cx": self.cx, "cy": self.cy, "pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "OrthoCamera":
        return cls(int(d["width"]), int(d["height"]), float(d["ppm"]), float(d["cx"]),
                   float(d["cy"]), RigidTransform.from_dict(d["pose"]))


def look_at_pallet(elevation: float, yaw: float, target, distance: float) -> RigidTransform:
    """Camera <- pallet transform for a camera looking down at the stack front."""
    h = np.array([np.sin(yaw), np.cos(yaw), 0.0])
    forward = np.cos(elevation) * h + np.array([0.0, 0.0, -np.sin(elevation)])
    right = np.array([np.cos(yaw), -np.sin(yaw), 0.0])
    down = np.cross(forward, right)
    r = np.stack([right, down, forward])
    origin = np.asarray(target, dtype=np.float64) - distance * forward
    return RigidTransform(r, -r @ origin)


@dataclass(frozen=True)
class CornerLayout:
    """How a box's local axes map onto the keypoint frame for one view."""
    front_axis: int        # local axis (0 short, 1 long) normal to the front face
    front_sign: float      # sign of the front face along that axis
    right_sign: float      # sign along the other horizontal axis for "right"
    tie: bool              # square footprint, orientation is ambiguous

    @property
    def orientation(self) -> str:
        # front face normal along the short axis => the long x height face is in view
        if self.tie:
            return "short"
        return "long" if self.front_axis == 0 else "short"


def corner_layout(r_cam: np.ndarray, dims_slh) -> CornerLayout:
    """Determine front face and left/right for a box with camera-frame rotation."""
    view = r_cam[2, :]  # viewing direction in box coordinates
    # front face: the side face most parallel to the image plane
    k = int(np.argmax([abs(view[0]), abs(view[1])]))
    sign = -np.sign(view[k]) if view[k] != 0 else -1.0
    other = 1 - k
    # image-x direction of the other horizontal axis
    right = np.sign(r_cam[0, other]) or 1.0
    tie = abs(dims_slh[0] - dims_slh[1]) < 1e-9
    return CornerLayout(k, float(sign), float(right), tie)


def keypoint_frame(r_cam: np.ndarray, layout: CornerLayout) -> np.ndarray:
    """Rotation of the keypoint frame (columns x, y, z) in the camera frame."""
    k, other = layout.front_axis, 1 - layout.front_axis
    x = r_cam[:, other] * layout.right_sign
    y = -r_cam[:, k] * layout.front_sign
    z = r_cam[:, 2]
    return np.stack([x, y, z], axis=1)


def view_dims(dims_slh, layout: CornerLayout) -> np.ndarray:
    """(width, depth, height) as seen from the camera."""
    k = layout.front_axis
    return np.array([dims_slh[1 - k], dims_slh[k], dims_slh[2]], dtype=np.float64)


def corners(center, kp_rotation, dims_wdh) -> np.ndarray:
    """The 8 ordered corners of a box given its keypoint-frame pose."""
    local = CORNER_SIGNS * (np.asarray(dims_wdh) / 2.0)
    return local @ np.asarray(kp_rotation).T + np.asarray(center)


def box_rotation_variants(kp_rotation, orientation_axis: int) -> list:
    """Box-frame rotations (short, long, height axes) consistent with a keypoint
    frame; two variants related by the 180-degree symmetry."""
    tx, ty, tz = kp_rotation[:, 0], kp_rotation[:, 1], kp_rotation[:, 2]
    if orientation_axis == 0:
        r = np.stack([ty, -tx, tz], axis=1)
    else:
        r = np.stack([tx, ty, tz], axis=1)
    return [r, r @ FLIP_Z]
