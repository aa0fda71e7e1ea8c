"""On-disk datasets: PFM/PNG images, ASCII PLY point clouds and cameras.json.

Layout of a dataset directory::

    cameras.json      {"bound": r, "cameras": [{width, height, intrinsics, extrinsics, image}, ...]}
    images/NNN.pfm    linear HDR targets (or NNN.png, 8-bit sRGB)
    pointcloud.ply    optional oriented points
    gt/               optional material maps and scene description
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera
from .color import srgb_decode, srgb_encode

IMAGE_SUFFIXES = (".pfm", ".png")


class DatasetError(ValueError):
    pass


# -- PFM ---------------------------------------------------------------------

def write_pfm(path, image: np.ndarray):
    """Write an ``[H, W, 3]`` (or ``[H, W]``) float image, little-endian, top row first in memory."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        magic = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"PF"
    else:
        raise ValueError(f"PFM images must be HxW or HxWx3, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()
    header = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", data)
    if header is None:
        raise DatasetError(f"{path}: not a PFM file (bad magic or header)")
    channels = 3 if header.group(1) == b"PF" else 1
    w, h = int(header.group(2)), int(header.group(3))
    scale = float(header.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    body = data[header.end():]
    expected = w * h * channels * 4
    if len(body) < expected:
        raise DatasetError(f"{path}: truncated PFM data ({len(body)} of {expected} bytes)")
    img = np.frombuffer(body[:expected], dtype=dtype).reshape((h, w, channels) if channels == 3 else (h, w))
    return img[::-1].astype(np.float32)


# -- PNG ---------------------------------------------------------------------

def write_png(path, linear: np.ndarray):
    """Clip to [0, 1], sRGB-encode and quantize to 8 bits."""
    from PIL import Image

    enc = srgb_encode(np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0))
    Image.fromarray(np.round(enc * 255.0).astype(np.uint8)).save(path)


def read_png(path) -> np.ndarray:
    """8-bit sRGB PNG as linear float32 ``[H, W, 3]``."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise DatasetError(f"{path}: cannot decode PNG ({exc})") from exc
    return srgb_decode(arr).astype(np.float32)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        img = read_pfm(path)
    elif path.suffix.lower() == ".png":
        img = read_png(path)
    else:
        raise DatasetError(f"{path}: unsupported image format (expected .pfm or .png)")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if not np.all(np.isfinite(img)) or img.min() < 0.0:
        raise DatasetError(f"{path}: image has negative or non-finite values")
    return img


# -- PLY ---------------------------------------------------------------------

@dataclass
class OrientedPointCloud:
    positions: np.ndarray  # [N, 3]
    normals: np.ndarray  # [N, 3], unit

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.normals):
            raise ValueError("point cloud needs one normal per point")

    def __len__(self):
        return len(self.positions)


def write_ply(path, cloud: OrientedPointCloud):
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        for name in ("x", "y", "z", "nx", "ny", "nz"):
            f.write(f"property float {name}\n")
        f.write("end_header\n")
        for p, n in zip(cloud.positions, cloud.normals):
            f.write(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g} {n[0]:.7g} {n[1]:.7g} {n[2]:.7g}\n")


def read_ply(path) -> OrientedPointCloud:
    path = Path(path)
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise DatasetError(f"{path}: not a PLY file")
        count, props = 0, []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise DatasetError(f"{path}: only ASCII PLY is supported")
            if parts[:2] == ["element", "vertex"]:
                count = int(parts[2])
            elif parts[0] == "property":
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        rows = np.loadtxt(f, ndmin=2, max_rows=count) if count else np.zeros((0, len(props)))
    try:
        cols = [props.index(k) for k in ("x", "y", "z", "nx", "ny", "nz")]
    except ValueError:
        raise DatasetError(f"{path}: PLY vertices need x y z nx ny nz properties") from None
    if len(rows) != count:
        raise DatasetError(f"{path}: expected {count} vertices, found {len(rows)}")
    rows = rows[:, cols]
    return OrientedPointCloud(rows[:, :3], rows[:, 3:])


# -- datasets ----------------------------------------------------------------

@dataclass
class SceneDataset:
    cameras: list[Camera]
    images: list[np.ndarray]  # linear float32 [H, W, 3]
    hdr: bool
    bound: float
    point_cloud: OrientedPointCloud | None = None
    root: Path | None = None
    materials: dict | None = None  # name -> list of [H, W, 3] maps, background = -1
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.cameras) != len(self.images):
            raise DatasetError(f"{len(self.cameras)} cameras but {len(self.images)} images")
        for k, (cam, img) in enumerate(zip(self.cameras, self.images)):
            if img.shape != (cam.height, cam.width, 3):
                raise DatasetError(f"image {k} has shape {img.shape}, camera expects "
                                   f"{(cam.height, cam.width, 3)}")

    def __len__(self):
        return len(self.cameras)


MATERIAL_NAMES = ("basecolor", "roughness", "metallic")


def write_dataset(root, cameras, images, hdr: bool = True, bound: float = 1.2,
                  point_cloud: OrientedPointCloud | None = None, materials: dict | None = None,
                  scene_description: dict | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (cam, img) in enumerate(zip(cameras, images)):
        name = f"images/{k:03d}.pfm" if hdr else f"images/{k:03d}.png"
        (write_pfm if hdr else write_png)(root / name, img)
        entries.append({**cam.to_dict(), "image": name})
    with open(root / "cameras.json", "w") as f:
        json.dump({"bound": bound, "cameras": entries}, f, indent=1)
    if point_cloud is not None:
        write_ply(root / "pointcloud.ply", point_cloud)
    if materials is not None or scene_description is not None:
        (root / "gt").mkdir(exist_ok=True)
    if materials is not None:
        for name in MATERIAL_NAMES:
            (root / "gt" / name).mkdir(exist_ok=True)
            for k, m in enumerate(materials[name]):
                write_pfm(root / "gt" / name / f"{k:03d}.pfm", m)
    if scene_description is not None:
        with open(root / "gt" / "scene.json", "w") as f:
            json.dump(scene_description, f, indent=1)
    return root


def load_dataset(root) -> SceneDataset:
    root = Path(root)
    cam_file = root / "cameras.json"
    if not cam_file.is_file():
        raise DatasetError(f"{cam_file}: missing cameras file")
    try:
        with open(cam_file) as f:
            meta = json.load(f)
        entries = meta["cameras"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"{cam_file}: malformed cameras file ({exc})") from exc
    image_dir = root / "images"
    on_disk = sorted(p for p in image_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) \
        if image_dir.is_dir() else []
    if len(on_disk) != len(entries):
        raise DatasetError(f"{root}: camera/image count mismatch ({len(entries)} cameras, "
                           f"{len(on_disk)} images in {image_dir})")
    cameras, images, kinds = [], [], set()
    for k, e in enumerate(entries):
        try:
            cameras.append(Camera.from_dict(e))
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{cam_file}: camera {k} invalid ({exc})") from exc
        img_path = root / e.get("image", f"images/{k:03d}.pfm")
        if not img_path.is_file():
            raise DatasetError(f"{img_path}: missing image for camera {k}")
        kinds.add(img_path.suffix.lower())
        images.append(read_image(img_path))
    if len(kinds) > 1:
        raise DatasetError(f"{root}: mixed PFM and PNG images")
    cloud = read_ply(root / "pointcloud.ply") if (root / "pointcloud.ply").is_file() else None
    materials = None
    gt = root / "gt"
    if all((gt / name).is_dir() for name in MATERIAL_NAMES):
        materials = {name: [read_pfm(gt / name / f"{k:03d}.pfm") for k in range(len(entries))]
                     for name in MATERIAL_NAMES}
    extra = {}
    if (gt / "scene.json").is_file():
        with open(gt / "scene.json") as f:
            extra["scene"] = json.load(f)
    return SceneDataset(cameras, images, hdr=kinds != {".png"}, bound=float(meta.get("bound", 1.5)),
                        point_cloud=cloud, root=root, materials=materials, extra=extra)


def image_gradient_norm(image: np.ndarray) -> np.ndarray:
    """Per-pixel norm of central-difference image gradients, averaged over channels."""
    img = np.asarray(image, dtype=np.float64)
    gy, gx = np.gradient(img, axis=(0, 1))
    return np.sqrt(gx**2 + gy**2).mean(-1)
