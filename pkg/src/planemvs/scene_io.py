"""Scene model and on-disk formats.

A scene directory looks like::

    scene/
      cameras.txt        one line per view: id w h fx fy cx cy r11..r33 tx ty tz
      scene.toml         depth_min, depth_max, scene_size
      images/<id>.png
      gt/depth_<id>.pfm  optional ground-truth depth
      gt/points.ply      optional ground-truth point cloud

Depth maps are stored as PFM with 0 marking invalid pixels; point clouds as
binary little-endian PLY.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w
from PIL import Image

from .errors import DimensionMismatch, MalformedCamera, MalformedHeader, MissingFile

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64) @ LUMA


@dataclass(eq=False)
class CameraView:
    """Pinhole camera plus image buffers for one view.

    ``rotation``/``translation`` map world points into the camera frame:
    ``X_cam = R @ X_world + t``. Pixel centres sit at integer coordinates,
    ``u`` along columns and ``v`` along rows.
    """

    view_id: int
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    rgb: np.ndarray | None = None
    gray: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise MalformedCamera(f"view {self.view_id}: focal lengths must be positive")
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb, dtype=np.float64)
            if self.rgb.shape != (self.height, self.width, 3):
                raise DimensionMismatch(
                    f"view {self.view_id}: image is {self.rgb.shape[:2]}, "
                    f"camera says {(self.height, self.width)}"
                )
            if self.gray is None:
                self.gray = rgb_to_gray(self.rgb)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass
class SceneBundle:
    views: list[CameraView]
    depth_range: tuple[float, float]
    scene_size: float
    # False for scenes whose units are not metres (e.g. synthetic renders)
    metric: bool = True

    def __post_init__(self):
        d_min, d_max = self.depth_range
        if not 0 < d_min < d_max:
            raise ValueError(f"invalid depth range {self.depth_range}")
        if self.scene_size <= 0:
            raise ValueError("scene_size must be positive")
        ids = [v.view_id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate view ids in {ids}")

    def view(self, view_id: int) -> CameraView:
        for v in self.views:
            if v.view_id == view_id:
                return v
        raise KeyError(view_id)


@dataclass
class DepthNormalMap:
    """Per-pixel depth (range along the pixel ray) and camera-frame unit normal.

    Depth 0 marks an invalid pixel. Arrays are float32 so that PFM files
    round-trip bit for bit.
    """

    depth: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.normal = np.asarray(self.normal, dtype=np.float32)
        if self.depth.ndim != 2 or self.normal.shape != self.depth.shape + (3,):
            raise DimensionMismatch(
                f"depth {self.depth.shape} and normal {self.normal.shape} disagree"
            )

    @property
    def mask(self) -> np.ndarray:
        return self.depth > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @classmethod
    def empty(cls, height: int, width: int) -> "DepthNormalMap":
        return cls(np.zeros((height, width)), np.zeros((height, width, 3)))

    def copy(self) -> "DepthNormalMap":
        return DepthNormalMap(self.depth.copy(), self.normal.copy())


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None  # uint8 RGB

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


@dataclass
class GroundTruth:
    depths: dict[int, np.ndarray] = field(default_factory=dict)
    points: np.ndarray | None = None

    def check_against(self, bundle: SceneBundle) -> None:
        for view in bundle.views:
            d = self.depths.get(view.view_id)
            if d is not None and d.shape != view.shape:
                raise DimensionMismatch(
                    f"ground-truth depth for view {view.view_id} is {d.shape}, view is {view.shape}"
                )


# ---------------------------------------------------------------------------
# PFM


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM needs HxW or HxWx3 data, got {data.shape}")
    h, w = data.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("PFM dimensions must be positive")
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        # PFM scanlines run bottom to top
        f.write(np.ascontiguousarray(data[::-1]).tobytes())


def _read_token_line(f) -> str:
    line = f.readline()
    if not line:
        raise MalformedHeader("unexpected end of PFM header")
    return line.decode("ascii", errors="replace").strip()


def read_pfm(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    with open(path, "rb") as f:
        kind = _read_token_line(f)
        if kind == "Pf":
            channels = 1
        elif kind == "PF":
            channels = 3
        else:
            raise MalformedHeader(f"{path}: bad PFM identifier {kind!r}")
        dims = _read_token_line(f).split()
        scale_line = _read_token_line(f)
        try:
            w, h = int(dims[0]), int(dims[1])
            scale = float(scale_line)
        except (ValueError, IndexError) as exc:
            raise MalformedHeader(f"{path}: bad PFM header") from exc
        if w <= 0 or h <= 0 or scale == 0:
            raise MalformedHeader(f"{path}: bad PFM dimensions or scale")
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * channels
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise MalformedHeader(f"{path}: truncated PFM payload")
        data = np.frombuffer(payload, dtype=dtype)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_depth_map(dmap: DepthNormalMap, depth_path: str | Path, normal_path: str | Path | None = None) -> None:
    """Write depth (1-channel PFM) and optionally normals (3-channel PFM).

    Invalid pixels are written with depth 0.
    """
    depth = np.where(dmap.mask, dmap.depth, np.float32(0))
    write_pfm(depth_path, depth)
    if normal_path is not None:
        write_pfm(normal_path, dmap.normal)


def read_depth_map(depth_path: str | Path, normal_path: str | Path | None = None) -> DepthNormalMap:
    depth = read_pfm(depth_path)
    if depth.ndim != 2:
        raise MalformedHeader(f"{depth_path}: depth PFM must have one channel")
    if normal_path is not None and Path(normal_path).exists():
        normal = read_pfm(normal_path)
        if normal.shape != depth.shape + (3,):
            raise DimensionMismatch(f"{normal_path}: normal map does not match depth map")
    else:
        normal = np.zeros(depth.shape + (3,), dtype=np.float32)
    return DepthNormalMap(depth, normal)


# ---------------------------------------------------------------------------
# PLY


def write_ply(path: str | Path, cloud: PointCloud) -> None:
    n = len(cloud)
    # doubles keep float64 coordinates lossless
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cloud.normals is not None:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.empty(n, dtype=fields)
    arr["x"], arr["y"], arr["z"] = cloud.points.T
    if cloud.normals is not None:
        arr["nx"], arr["ny"], arr["nz"] = cloud.normals.T
    if cloud.colors is not None:
        arr["red"], arr["green"], arr["blue"] = cloud.colors.T
    type_names = {"<f8": "double", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {type_names[t]} {name}" for name, t in fields]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(arr.tobytes())


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4",
}


def read_ply(path: str | Path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise MalformedHeader(f"{path}: not a PLY file")
        n = None
        fields = []
        while True:
            line = f.readline()
            if not line:
                raise MalformedHeader(f"{path}: unterminated PLY header")
            tokens = line.decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "format" and tokens[1] != "binary_little_endian":
                raise MalformedHeader(f"{path}: only binary_little_endian PLY is supported")
            elif tokens[0] == "element":
                if tokens[1] != "vertex":
                    raise MalformedHeader(f"{path}: unsupported element {tokens[1]}")
                n = int(tokens[2])
            elif tokens[0] == "property":
                if tokens[1] not in _PLY_TYPES:
                    raise MalformedHeader(f"{path}: unsupported property type {tokens[1]}")
                fields.append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
        if n is None:
            raise MalformedHeader(f"{path}: missing vertex element")
        try:
            arr = np.frombuffer(f.read(), dtype=fields, count=n)
        except ValueError as exc:
            raise MalformedHeader(f"{path}: truncated PLY payload") from exc
    names = arr.dtype.names
    points = np.stack([arr["x"], arr["y"], arr["z"]], axis=1)
    normals = np.stack([arr["nx"], arr["ny"], arr["nz"]], axis=1) if "nx" in names else None
    colors = np.stack([arr["red"], arr["green"], arr["blue"]], axis=1) if "red" in names else None
    return PointCloud(points, normals, colors)


# ---------------------------------------------------------------------------
# images and scene directories


def write_png(path: str | Path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def _format_camera(view: CameraView) -> str:
    vals = [view.fx, view.fy, view.cx, view.cy, *view.rotation.ravel(), *view.translation]
    return " ".join([str(view.view_id), str(view.width), str(view.height)] + [repr(float(v)) for v in vals])


def _parse_camera_line(line: str, lineno: int) -> dict:
    tokens = line.split()
    if len(tokens) != 19:
        raise MalformedCamera(f"cameras.txt:{lineno}: expected 19 fields, got {len(tokens)}")
    try:
        view_id, w, h = int(tokens[0]), int(tokens[1]), int(tokens[2])
        vals = [float(t) for t in tokens[3:]]
    except ValueError as exc:
        raise MalformedCamera(f"cameras.txt:{lineno}: {exc}") from exc
    rot = np.array(vals[4:13]).reshape(3, 3)
    err = np.abs(rot.T @ rot - np.eye(3)).max()
    if err > 1e-6:
        raise MalformedCamera(f"cameras.txt:{lineno}: rotation not orthonormal (error {err:.2e})")
    return dict(
        view_id=view_id, width=w, height=h, fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
        rotation=rot, translation=np.array(vals[13:16]),
    )


def image_path(scene_dir: Path, view_id: int) -> Path:
    return scene_dir / "images" / f"{view_id}.png"


def load_scene(path: str | Path) -> SceneBundle:
    root = Path(path)
    cam_file = root / "cameras.txt"
    meta_file = root / "scene.toml"
    for p in (cam_file, meta_file, root / "images"):
        if not p.exists():
            raise MissingFile(str(p))
    with open(meta_file, "rb") as f:
        meta = tomli.load(f)
    try:
        depth_range = (float(meta["depth_min"]), float(meta["depth_max"]))
        scene_size = float(meta["scene_size"])
    except KeyError as exc:
        raise MissingFile(f"{meta_file}: missing key {exc}") from exc
    metric = meta.get("metric", True)
    if not isinstance(metric, bool):
        raise ValueError(f"{meta_file}: 'metric' must be true or false")

    views = []
    for lineno, raw in enumerate(cam_file.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        params = _parse_camera_line(line, lineno)
        img = image_path(root, params["view_id"])
        if not img.exists():
            raise MissingFile(str(img))
        views.append(CameraView(**params, rgb=read_png(img)))
    logger.debug("loaded %d views from %s", len(views), root)
    return SceneBundle(views, depth_range, scene_size, metric)


def save_scene(bundle: SceneBundle, path: str | Path, ground_truth: GroundTruth | None = None) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = ["# id w h fx fy cx cy r11 r12 r13 r21 r22 r23 r31 r32 r33 tx ty tz"]
    for view in bundle.views:
        lines.append(_format_camera(view))
        if view.rgb is not None:
            write_png(image_path(root, view.view_id), view.rgb)
    (root / "cameras.txt").write_text("\n".join(lines) + "\n")
    meta = {
        "depth_min": float(bundle.depth_range[0]),
        "depth_max": float(bundle.depth_range[1]),
        "scene_size": float(bundle.scene_size),
        "metric": bool(bundle.metric),
    }
    with open(root / "scene.toml", "wb") as f:
        tomli_w.dump(meta, f)
    if ground_truth is not None:
        save_ground_truth(ground_truth, root / "gt")
    return root


def save_ground_truth(gt: GroundTruth, gt_dir: str | Path) -> None:
    gt_dir = Path(gt_dir)
    gt_dir.mkdir(parents=True, exist_ok=True)
    for view_id, depth in gt.depths.items():
        write_pfm(gt_dir / f"depth_{view_id}.pfm", depth)
    if gt.points is not None:
        write_ply(gt_dir / "points.ply", PointCloud(gt.points))


def load_ground_truth(gt_dir: str | Path) -> GroundTruth:
    gt_dir = Path(gt_dir)
    if not gt_dir.is_dir():
        raise MissingFile(str(gt_dir))
    depths = {}
    for p in sorted(gt_dir.glob("depth_*.pfm")):
        m = re.fullmatch(r"depth_(\d+)\.pfm", p.name)
        if m:
            depths[int(m.group(1))] = read_pfm(p)
    ply = gt_dir / "points.ply"
    points = read_ply(ply).points if ply.exists() else None
    return GroundTruth(depths, points)
