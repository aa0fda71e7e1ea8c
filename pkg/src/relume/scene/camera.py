"""Pinhole cameras in the OpenCV convention (x right, y down, z forward)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray  # 4x4 rigid transform

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        rot = self.world_to_camera[:3, :3]
        if abs(np.linalg.det(rot)) < 1e-12:
            raise ValueError("singular extrinsic matrix")
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise ValueError("extrinsic rotation is not orthonormal (tolerance 1e-6)")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def look_at(cls, eye, target, up, width: int, height: int, fov_deg: float) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])  # rows: camera axes in world coordinates
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(width, height, f, f, width / 2.0, height / 2.0, w2c)

    def rays_from_uv(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins and unit directions through continuous pixel coordinates."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        d_cam = np.stack([(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy,
                          np.ones(len(uv))], axis=-1)
        d = d_cam @ self.rotation  # R^T applied to row vectors
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def pixel_centers(self) -> np.ndarray:
        """``[H*W, 2]`` pixel-center coordinates, row-major."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=-1)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``[N, 2]`` and camera depth ``[N]`` of world points."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3) @ self.rotation.T + self.translation
        uv = np.stack([self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy], axis=-1)
        return uv, p[:, 2]

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "intrinsics": self.intrinsics.tolist(),
            "extrinsics": self.world_to_camera.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        k = np.asarray(d["intrinsics"], dtype=np.float64)
        return cls(int(d["width"]), int(d["height"]), k[0, 0], k[1, 1], k[0, 2], k[1, 2],
                   np.asarray(d["extrinsics"], dtype=np.float64))
