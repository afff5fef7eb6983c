"""Synthetic scene generation, dataset manifest I/O, and binary persistence.

On-disk layout of a generated scene:
    scene.json          manifest (versioned, human readable)
    images/*.png        8-bit RGB renders
    masks/*.png         8-bit grayscale binary masks of the dynamic object
    trajectories.bin    ground-truth sheet trajectories (see save_trajectories)

The manifest stores world-to-camera matrices (4x4, row major); normalized
frame times are time_index / (num_timesteps - 1).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import Camera, GaussianSet, TrajectorySet, inverse_sigmoid
from .errors import (
    InvalidParameterError,
    ManifestError,
    MissingFileError,
    ShapeMismatchError,
    VersionError,
)
from .field import DeformationField, FieldConfig
from .rasterizer import SplatInputs, rasterize
from .core import covariance_from_rs, project_gaussians

MANIFEST_VERSION = 1
MANIFEST_NAME = "scene.json"
TRAJ_MAGIC = b"SFTJ"
TRAJ_VERSION = 1
CKPT_MAGIC = b"SFCK"
CKPT_VERSION = 1
OUTPUT_DIR_ENV = "SPLATFLOW_OUT"

GAUSSIAN_ARRAY_NAMES = (
    "positions", "rot_quats", "log_scales", "opacity_logits", "colors", "mask_logits",
)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def save_image(path, array: np.ndarray) -> None:
    """Write a float image in [0, 1] as 8-bit PNG (RGB or grayscale)."""
    arr = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path)


def load_image_file(path) -> np.ndarray:
    if not os.path.isfile(path):
        raise MissingFileError(f"image file not found: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


def save_trajectories(path, trajectories: TrajectorySet) -> None:
    """magic, version, P, T header; P*T*3 float32 positions; T float32 times."""
    trajectories.validate()
    p, t = trajectories.num_points, trajectories.num_steps
    with open(path, "wb") as f:
        f.write(TRAJ_MAGIC)
        f.write(struct.pack("<III", TRAJ_VERSION, p, t))
        f.write(np.ascontiguousarray(trajectories.positions, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(trajectories.times, dtype="<f4").tobytes())


def load_trajectories(path) -> TrajectorySet:
    if not os.path.isfile(path):
        raise MissingFileError(f"trajectory file not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != TRAJ_MAGIC:
        raise VersionError(f"bad trajectory magic in {path}")
    version, p, t = struct.unpack("<III", blob[4:16])
    if version != TRAJ_VERSION:
        raise VersionError(f"unsupported trajectory version {version} in {path}")
    expected = 16 + 4 * (p * t * 3 + t)
    if len(blob) != expected:
        raise ShapeMismatchError(
            f"trajectory payload is {len(blob)} bytes, expected {expected} ({path})"
        )
    positions = np.frombuffer(blob, dtype="<f4", count=p * t * 3, offset=16)
    times = np.frombuffer(blob, dtype="<f4", count=t, offset=16 + 4 * p * t * 3)
    ts = TrajectorySet(
        positions=positions.astype(np.float64).reshape(p, t, 3),
        times=times.astype(np.float64),
    )
    ts.validate()
    return ts


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    gaussians: GaussianSet
    field: DeformationField
    dynamic: np.ndarray       # (N,) bool
    phase: str                # "coarse" | "fine"
    iteration: int
    config_echo: dict


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    gs = checkpoint.gaussians
    fld = checkpoint.field
    arrays = [(name, getattr(gs, name)) for name in GAUSSIAN_ARRAY_NAMES]
    arrays.append(("dynamic", checkpoint.dynamic.astype(np.float32)))
    arrays.extend(fld.parameters())

    header = {
        "version": CKPT_VERSION,
        "n_gaussians": gs.count,
        "phase": checkpoint.phase,
        "iteration": checkpoint.iteration,
        "bbox": fld.bbox.tolist(),
        "field": {
            "base_resolution": list(fld.config.base_resolution),
            "levels": list(fld.config.levels),
            "feature_size": fld.config.feature_size,
            "hidden_width": fld.config.hidden_width,
            "shadow_logit_init": fld.config.shadow_logit_init,
        },
        "config": checkpoint.config_echo,
        "arrays": [{"name": n, "shape": list(np.asarray(a).shape)} for n, a in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    if not os.path.isfile(path):
        raise MissingFileError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise VersionError(f"bad checkpoint magic in {path}")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} in {path}")
    header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))

    declared = header["arrays"]
    total_floats = sum(int(np.prod(a["shape"])) for a in declared)
    expected = 12 + header_len + 4 * total_floats
    if len(blob) != expected:
        raise ShapeMismatchError(
            f"checkpoint payload is {len(blob)} bytes, expected {expected} ({path})"
        )

    offset = 12 + header_len
    values = {}
    for entry in declared:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        values[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
        offset += 4 * count

    gs = GaussianSet(
        positions=values["positions"],
        rot_quats=values["rot_quats"],
        log_scales=values["log_scales"],
        opacity_logits=values["opacity_logits"].reshape(-1),
        colors=values["colors"],
        mask_logits=values["mask_logits"].reshape(-1),
    )
    if gs.count != header["n_gaussians"]:
        raise ShapeMismatchError("checkpoint gaussian count disagrees with header")

    fc = header["field"]
    config = FieldConfig(
        base_resolution=tuple(fc["base_resolution"]),
        levels=tuple(fc["levels"]),
        feature_size=fc["feature_size"],
        hidden_width=fc["hidden_width"],
        shadow_logit_init=fc["shadow_logit_init"],
    )
    fld = DeformationField(np.array(header["bbox"]), config, np.random.default_rng(0))
    fld.plane_store[:] = values["planes"]
    for name in list(fld.mlp):
        fld.mlp[name] = values[f"mlp.{name}"].reshape(fld.mlp[name].shape)

    return Checkpoint(
        gaussians=gs,
        field=fld,
        dynamic=values["dynamic"].reshape(-1) > 0.5,
        phase=header["phase"],
        iteration=header["iteration"],
        config_echo=header["config"],
    )


# ---------------------------------------------------------------------------
# dataset manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrameRecord:
    camera_id: str
    time_index: int
    image_path: str
    mask_path: str | None


@dataclass
class SceneDataset:
    root: Path
    cameras: dict
    camera_splits: dict
    frames: list
    num_timesteps: int
    bbox: np.ndarray
    trajectory_path: str | None

    @property
    def times(self) -> np.ndarray:
        t = self.num_timesteps
        return np.linspace(0.0, 1.0, t) if t > 1 else np.zeros(1)

    def train_frames(self):
        return [f for f in self.frames if self.camera_splits[f.camera_id] == "train"]

    def test_frames(self):
        return [f for f in self.frames if self.camera_splits[f.camera_id] == "test"]

    def load_image(self, frame: FrameRecord) -> np.ndarray:
        return load_image_file(self.root / frame.image_path)

    def load_mask(self, frame: FrameRecord) -> np.ndarray:
        if frame.mask_path is None:
            cam = self.cameras[frame.camera_id]
            return np.zeros((cam.height, cam.width))
        return (load_image_file(self.root / frame.mask_path) > 0.5).astype(np.float64)

    def load_trajectories(self) -> TrajectorySet:
        if self.trajectory_path is None:
            raise MissingFileError("dataset has no trajectory file")
        return load_trajectories(self.root / self.trajectory_path)


def _camera_to_json(cam: Camera, cam_id: str, split: str) -> dict:
    w2c = np.eye(4)
    w2c[:3, :] = cam.world_to_cam
    return {
        "id": cam_id,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "world_to_cam": w2c.tolist(),
        "split": split,
    }


def save_manifest(root, cameras, camera_splits, frames, num_timesteps, bbox,
                  trajectory_path) -> None:
    doc = {
        "version": MANIFEST_VERSION,
        "num_timesteps": num_timesteps,
        "bbox": {"min": list(map(float, bbox[0])), "max": list(map(float, bbox[1]))},
        "trajectory_path": trajectory_path,
        "cameras": [
            _camera_to_json(cam, cid, camera_splits[cid]) for cid, cam in cameras.items()
        ],
        "frames": [
            {
                "camera_id": f.camera_id,
                "time_index": f.time_index,
                "image": f.image_path,
                "mask": f.mask_path,
            }
            for f in frames
        ],
    }
    with open(Path(root) / MANIFEST_NAME, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> SceneDataset:
    """Load and fully validate a dataset manifest."""
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise MissingFileError(f"manifest not found: {manifest}")
    with open(manifest) as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise VersionError(f"unsupported manifest version {doc.get('version')}")

    num_timesteps = int(doc["num_timesteps"])
    if num_timesteps < 1:
        raise ManifestError("num_timesteps must be positive")

    cameras, splits = {}, {}
    for entry in doc["cameras"]:
        cid = entry["id"]
        if cid in cameras:
            raise ManifestError(f"duplicate camera id {cid!r}")
        w2c = np.asarray(entry["world_to_cam"], dtype=np.float64)
        if w2c.shape != (4, 4):
            raise ManifestError(f"camera {cid!r}: world_to_cam must be 4x4")
        cam = Camera(
            fx=float(entry["fx"]), fy=float(entry["fy"]),
            cx=float(entry["cx"]), cy=float(entry["cy"]),
            width=int(entry["width"]), height=int(entry["height"]),
            world_to_cam=w2c[:3, :],
        )
        try:
            cam.validate()
        except InvalidParameterError as exc:
            raise ManifestError(f"camera {cid!r}: {exc}") from exc
        cameras[cid] = cam
        splits[cid] = entry.get("split", "train")

    frames, seen = [], set()
    for entry in doc["frames"]:
        cid = entry["camera_id"]
        if cid not in cameras:
            raise ManifestError(f"frame references unknown camera id {cid!r}")
        ti = int(entry["time_index"])
        if not (0 <= ti < num_timesteps):
            raise ManifestError(f"frame time_index {ti} outside [0, {num_timesteps})")
        key = (cid, ti)
        if key in seen:
            raise ManifestError(f"duplicate frame for camera {cid!r} at time {ti}")
        seen.add(key)
        frames.append(
            FrameRecord(camera_id=cid, time_index=ti,
                        image_path=entry["image"], mask_path=entry.get("mask"))
        )

    bbox = np.array([doc["bbox"]["min"], doc["bbox"]["max"]], dtype=np.float64)
    if bbox.shape != (2, 3) or np.any(bbox[1] <= bbox[0]):
        raise ManifestError("bbox must have min < max on every axis")

    traj = doc.get("trajectory_path")
    if traj is not None and not (root / traj).is_file():
        raise MissingFileError(f"trajectory file not found: {root / traj}")

    # image files must exist and match their camera's dimensions
    for f in frames:
        cam = cameras[f.camera_id]
        for rel, expect_mode in ((f.image_path, "RGB"), (f.mask_path, "L")):
            if rel is None:
                continue
            p = root / rel
            if not p.is_file():
                raise MissingFileError(f"frame file not found: {p}")
            with Image.open(p) as im:
                if im.size != (cam.width, cam.height):
                    raise ManifestError(
                        f"{p} is {im.size}, camera {f.camera_id!r} expects "
                        f"{(cam.width, cam.height)}"
                    )

    return SceneDataset(
        root=root, cameras=cameras, camera_splits=splits, frames=frames,
        num_timesteps=num_timesteps, bbox=bbox, trajectory_path=traj,
    )


# ---------------------------------------------------------------------------
# synthetic scene generation
# ---------------------------------------------------------------------------


@dataclass
class SceneSpec:
    grid_res: int = 40
    num_cameras: int = 12           # training cameras; one extra held-out camera is added
    num_timesteps: int = 20
    image_size: int = 96
    deformation_kind: str = "drop_on_sphere"   # drop_on_sphere | wave | none
    texture_kind: str = "checker"              # checker | noise | half_uniform
    seed: int = 0
    sheet_size: float = 1.0
    sheet_height: float = 0.8
    drop_distance: float = 0.6
    sphere_center: tuple = (0.0, 0.0, 0.35)
    sphere_radius: float = 0.35
    slide_strength: float = 0.8
    wave_amplitude: float = 0.15
    ground_extent: float = 1.2
    ground_res: int = 32
    camera_radius: float = 2.0
    focal_factor: float = 1.07      # fx = fy = factor * image_size

    def validate(self) -> None:
        if self.grid_res < 8:
            raise InvalidParameterError("grid_res must be >= 8")
        if self.num_cameras < 4:
            raise InvalidParameterError("num_cameras must be >= 4")
        if self.num_timesteps < 1:
            raise InvalidParameterError("num_timesteps must be >= 1")
        if self.deformation_kind not in ("drop_on_sphere", "wave", "none"):
            raise InvalidParameterError(f"unknown deformation_kind {self.deformation_kind!r}")
        if self.texture_kind not in ("checker", "noise", "half_uniform"):
            raise InvalidParameterError(f"unknown texture_kind {self.texture_kind!r}")


def look_at_camera(eye, target, fx, fy, width, height) -> Camera:
    """Camera at `eye` with +z pointing at `target` (y grows downward in image)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(up, fwd)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    t = -r @ eye
    return Camera(
        fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height,
        world_to_cam=np.hstack([r, t[:, None]]),
    )


def _sheet_texture(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    g = spec.grid_res
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    palette = np.array([[0.75, 0.12, 0.12], [0.10, 0.45, 0.75]])
    checker = palette[((ii // 4) + (jj // 4)) % 2]
    if spec.texture_kind == "checker":
        colors = checker
    elif spec.texture_kind == "noise":
        colors = rng.uniform(0.08, 0.85, size=(g, g, 3))
    else:  # half_uniform: one half of the sheet loses its texture
        colors = checker.copy()
        colors[:, : g // 2] = np.array([0.45, 0.30, 0.22])
    colors = colors + rng.normal(scale=0.03, size=(g, g, 3))
    return np.clip(colors.reshape(-1, 3), 0.03, 0.9)


def _sheet_trajectories(spec: SceneSpec, times: np.ndarray) -> np.ndarray:
    """(P, T, 3) analytic sheet motion."""
    g = spec.grid_res
    half = spec.sheet_size / 2.0
    xs = np.linspace(-half, half, g)
    xx, yy = np.meshgrid(xs, xs, indexing="ij")
    base = np.stack([xx.ravel(), yy.ravel(), np.full(g * g, spec.sheet_height)], axis=1)
    p, t = base.shape[0], times.size
    out = np.empty((p, t, 3))

    if spec.deformation_kind == "none":
        out[:] = base[:, None, :]
        return out

    if spec.deformation_kind == "wave":
        u = (xx.ravel() + half) / spec.sheet_size
        for k, tk in enumerate(times):
            out[:, k, :2] = base[:, :2]
            out[:, k, 2] = spec.sheet_height + spec.wave_amplitude * np.sin(
                2.0 * np.pi * (u - tk)
            )
        return out

    # drop_on_sphere: constant-velocity fall, radial clamp to the sphere
    # surface plus a tangential slide proportional to penetration depth
    center = np.asarray(spec.sphere_center, dtype=np.float64)
    radius = spec.sphere_radius
    for k, tk in enumerate(times):
        pts = base.copy()
        pts[:, 2] -= spec.drop_distance * tk
        v = pts - center
        dist = np.linalg.norm(v, axis=1)
        inside = dist < radius
        if np.any(inside):
            n = v[inside] / dist[inside, None]
            pen = radius - dist[inside]
            surf = center + radius * n
            gravity = np.array([0.0, 0.0, -1.0])
            tang = gravity - n * (n @ gravity)[:, None]
            tnorm = np.linalg.norm(tang, axis=1)
            ok = tnorm > 1e-9
            slide = np.zeros_like(tang)
            slide[ok] = tang[ok] / tnorm[ok, None]
            surf = surf + spec.slide_strength * pen[:, None] * slide
            vv = surf - center
            surf = center + radius * vv / np.linalg.norm(vv, axis=1)[:, None]
            pts[inside] = surf
        pts[:, 2] = np.maximum(pts[:, 2], 0.02)
        out[:, k] = pts
    return out


@dataclass
class GeneratedScene:
    root: Path
    dataset: SceneDataset
    trajectories: TrajectorySet   # float64, before file quantization


def generate_scene(spec: SceneSpec, out_dir) -> GeneratedScene:
    """Build, render, and write a synthetic multi-view dynamic scene."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    g = spec.grid_res
    times = (
        np.linspace(0.0, 1.0, spec.num_timesteps)
        if spec.num_timesteps > 1
        else np.zeros(1)
    )
    traj = _sheet_trajectories(spec, times)
    sheet_colors = _sheet_texture(spec, rng)
    spacing = spec.sheet_size / (g - 1)
    sheet_scale = np.log(0.55 * spacing)

    gr = spec.ground_res
    gxs = np.linspace(-spec.ground_extent, spec.ground_extent, gr)
    gxx, gyy = np.meshgrid(gxs, gxs, indexing="ij")
    ground_pos = np.stack([gxx.ravel(), gyy.ravel(), np.zeros(gr * gr)], axis=1)
    gii, gjj = np.meshgrid(np.arange(gr), np.arange(gr), indexing="ij")
    shade = np.where(((gii // 2) + (gjj // 2)) % 2 == 0, 0.22, 0.38)
    ground_colors = np.clip(
        shade.reshape(-1, 1).repeat(3, axis=1)
        + rng.normal(scale=0.02, size=(gr * gr, 3)),
        0.05, 0.9,
    )
    ground_scale = np.log(0.5 * (2 * spec.ground_extent / (gr - 1)))

    n_sheet = g * g
    n_total = n_sheet + gr * gr
    quats = np.zeros((n_total, 4))
    quats[:, 0] = 1.0
    log_scales = np.concatenate(
        [np.full((n_sheet, 3), sheet_scale), np.full((gr * gr, 3), ground_scale)]
    )
    colors = np.concatenate([sheet_colors, ground_colors])
    opacity = np.full(n_total, 0.97)
    mask_vals = np.concatenate([np.ones(n_sheet), np.zeros(gr * gr)])

    # cameras: training ring(s) plus one held-out camera
    w = spec.image_size
    f = spec.focal_factor * w
    target = np.array([0.0, 0.0, spec.sphere_center[2]])
    cameras, splits = {}, {}
    elevations = (0.6, 1.0)
    for ci in range(spec.num_cameras):
        az = 2 * np.pi * ci / spec.num_cameras
        el = elevations[ci % 2]
        eye = target + spec.camera_radius * np.array(
            [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)]
        )
        cid = f"cam{ci:02d}"
        cameras[cid] = look_at_camera(eye, target, f, f, w, w)
        splits[cid] = "train"
    az = 2 * np.pi * (0.5 / spec.num_cameras)
    eye = target + spec.camera_radius * np.array(
        [np.cos(az) * np.cos(0.8), np.sin(az) * np.cos(0.8), np.sin(0.8)]
    )
    cameras["test00"] = look_at_camera(eye, target, f, f, w, w)
    splits["test00"] = "test"

    frames = []
    sigma = covariance_from_rs(quats, log_scales)
    for cid, cam in cameras.items():
        for ti in range(spec.num_timesteps):
            positions = np.concatenate([traj[:, ti], ground_pos])
            proj = project_gaussians(positions, sigma, cam)
            v = proj.valid
            inputs = SplatInputs(
                means2d=proj.mean2d[v], cov2d=proj.cov2d[v], depths=proj.depth[v],
                colors=colors[v], opacities=opacity[v], mask_values=mask_vals[v],
                width=cam.width, height=cam.height, background=np.zeros(3),
            )
            out = rasterize(inputs)
            image_rel = f"images/{cid}_t{ti:03d}.png"
            mask_rel = f"masks/{cid}_t{ti:03d}.png"
            save_image(root / image_rel, out.rgb)
            save_image(root / mask_rel, (out.mask > 0.5).astype(np.float64))
            frames.append(FrameRecord(cid, ti, image_rel, mask_rel))

    all_pos = np.concatenate([traj.reshape(-1, 3), ground_pos])
    bbox = np.stack([all_pos.min(axis=0) - 0.05, all_pos.max(axis=0) + 0.05])

    trajectories = TrajectorySet(positions=traj, times=times)
    save_trajectories(root / "trajectories.bin", trajectories)
    save_manifest(root, cameras, splits, frames, spec.num_timesteps, bbox,
                  "trajectories.bin")
    return GeneratedScene(root=root, dataset=load_dataset(root), trajectories=trajectories)


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "."))
