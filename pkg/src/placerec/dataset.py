"""Synthetic indoor scenes, camera trajectories and the dataset layout.

A generated world is a set of scenes. Each scene has a dense labelled RGB
reconstruction (floor, ceiling, walls and a few box-shaped objects, eight
semantic classes in total) and a camera trajectory circling the room.
Keyframes are selected from the trajectory by motion thresholds and each
keyframe's cloud is the reconstruction cropped to the camera frustum, the
same recipe one would apply to a scanned dataset.

On disk:

    root/
      manifest.json                scene list, generation seed, counts
      scenes/<scene>/recon.cgpc    full reconstruction
      scenes/<scene>/poses.txt     intrinsics header + camera-to-world rows
      keyframes/<scene>/kf_NNNN.cgpc
      keyframes/index.json         flat keyframe list in scan order
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .cloud_io import load_cloud, save_cloud
from .errors import ConfigError, EmptyCrop, InvalidParameter, ShapeError
from .geometry import CameraPose, RgbPointCloud, frustum_crop, rotation_angle

log = logging.getLogger(__name__)

NUM_CLASSES = 8

# class id -> base RGB; objects of a class share a colour up to noise
PALETTE = np.array([
    [0.45, 0.30, 0.18],   # 0 floor
    [0.92, 0.92, 0.88],   # 1 ceiling
    [0.75, 0.73, 0.65],   # 2 wall
    [0.15, 0.35, 0.75],   # 3
    [0.80, 0.15, 0.15],   # 4
    [0.15, 0.70, 0.25],   # 5
    [0.85, 0.75, 0.10],   # 6
    [0.55, 0.15, 0.65],   # 7
])


@dataclass
class WorldSpec:
    """Knobs for the synthetic world generator."""

    num_scenes: int = 6
    points_per_scene: int = 24000
    frames_per_scene: int = 60
    room_width: Tuple[float, float] = (5.0, 7.5)    # sampled per scene
    room_length: Tuple[float, float] = (4.0, 6.5)
    room_height: float = 2.6
    objects_per_class: Tuple[int, int] = (1, 2)     # classes 3..7
    colour_noise: float = 0.05
    camera_height: float = 1.35
    fx: float = 40.0
    fy: float = 40.0
    width: int = 64
    height: int = 48
    near: float = 0.1
    far: float = 5.0

    def validate(self) -> None:
        if self.num_scenes < 1:
            raise ConfigError("need at least one scene")
        if self.points_per_scene < 100:
            raise ConfigError("points_per_scene too small to cover the surfaces")
        if self.frames_per_scene < 2:
            raise ConfigError("need at least two frames per scene")


def _sample_box_faces(rng, lo, hi, counts_total, skip_bottom=False):
    """Uniform surface samples on an axis-aligned box, allocated to faces by
    area. Returns (n, 3) positions."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    size = hi - lo
    # face list: (fixed axis, fixed value, area)
    faces = []
    for ax in range(3):
        a, b = [i for i in range(3) if i != ax]
        area = size[a] * size[b]
        faces.append((ax, lo[ax], area))
        faces.append((ax, hi[ax], area))
    if skip_bottom:
        faces = [f for f in faces if not (f[0] == 2 and f[1] == lo[2])]
    areas = np.array([f[2] for f in faces])
    alloc = np.maximum(1, np.round(counts_total * areas / areas.sum()).astype(int))
    pts = []
    for (ax, val, _), n in zip(faces, alloc):
        p = rng.uniform(lo, hi, (n, 3))
        p[:, ax] = val
        pts.append(p)
    return np.concatenate(pts, axis=0)


def _sample_rect(rng, lo, hi, fixed_axis, fixed_val, count):
    p = rng.uniform(lo, hi, (count, 3))
    p[:, fixed_axis] = fixed_val
    return p


def generate_scene(scene_id: str, spec: WorldSpec,
                   rng: np.random.Generator) -> Tuple[RgbPointCloud, List[CameraPose]]:
    """One room with labelled surfaces plus a circular camera trajectory."""
    w = rng.uniform(*spec.room_width)
    l = rng.uniform(*spec.room_length)
    h = spec.room_height
    lo = np.zeros(3)
    hi = np.array([w, l, h])

    surfaces = []   # (positions, class id)
    wall_area = 2 * (w * h + l * h)
    areas = {0: w * l, 1: w * l, 2: wall_area}

    # objects: boxes on the floor, classes 3..7
    boxes = []
    for cls in range(3, NUM_CLASSES):
        for _ in range(rng.integers(spec.objects_per_class[0],
                                    spec.objects_per_class[1] + 1)):
            sx, sy = rng.uniform(0.5, 1.3, 2)
            sz = rng.uniform(0.5, 1.5)
            cx = rng.uniform(0.4 + sx / 2, w - 0.4 - sx / 2)
            cy = rng.uniform(0.4 + sy / 2, l - 0.4 - sy / 2)
            blo = np.array([cx - sx / 2, cy - sy / 2, 0.0])
            bhi = np.array([cx + sx / 2, cy + sy / 2, sz])
            boxes.append((blo, bhi, cls))
            size = bhi - blo
            areas[cls] = areas.get(cls, 0.0) + \
                2 * (size[0] * size[2] + size[1] * size[2]) + size[0] * size[1]

    total_area = sum(areas.values())
    per_area = spec.points_per_scene / total_area

    n_floor = max(1, int(round(areas[0] * per_area)))
    surfaces.append((_sample_rect(rng, lo, hi, 2, 0.0, n_floor), 0))
    n_ceil = max(1, int(round(areas[1] * per_area)))
    surfaces.append((_sample_rect(rng, lo, hi, 2, h, n_ceil), 1))
    for ax, val, area in ((1, 0.0, w * h), (1, l, w * h),
                          (0, 0.0, l * h), (0, w, l * h)):
        n = max(1, int(round(area * per_area)))
        surfaces.append((_sample_rect(rng, lo, hi, ax, val, n), 2))
    for blo, bhi, cls in boxes:
        size = bhi - blo
        area = 2 * (size[0] * size[2] + size[1] * size[2]) + size[0] * size[1]
        n = max(1, int(round(area * per_area)))
        surfaces.append((_sample_box_faces(rng, blo, bhi, n, skip_bottom=True), cls))

    points = np.concatenate([p for p, _ in surfaces], axis=0)
    labels = np.concatenate([np.full(len(p), c, dtype=np.uint16)
                             for p, c in surfaces])
    colours = PALETTE[labels] + rng.normal(0.0, spec.colour_noise,
                                           (len(points), 3))
    colours = np.clip(colours, 0.0, 1.0)
    recon = RgbPointCloud(points, colours, labels, scene_id)

    # trajectory: an ellipse inside the room at camera height, heading
    # tangential with a little yaw jitter so views overlap but vary
    cx, cy = w / 2, l / 2
    rx, ry = 0.33 * w, 0.33 * l
    theta0 = rng.uniform(0, 2 * np.pi)
    poses = []
    for i in range(spec.frames_per_scene):
        th = theta0 + 2 * np.pi * i / spec.frames_per_scene
        pos = np.array([cx + rx * np.cos(th), cy + ry * np.sin(th),
                        spec.camera_height + rng.normal(0, 0.02)])
        heading = np.arctan2(ry * np.cos(th), -rx * np.sin(th))
        heading += rng.normal(0.0, 0.1)
        f = np.array([np.cos(heading), np.sin(heading), 0.0])
        d = np.array([0.0, 0.0, -1.0])
        r = np.cross(d, f)
        rot = np.stack([r, d, f], axis=1)   # columns: right, down, forward
        poses.append(CameraPose(rot, pos, spec.fx, spec.fy,
                                spec.width / 2, spec.height / 2,
                                spec.width, spec.height, spec.near, spec.far))
    return recon, poses


def select_keyframes(poses: Sequence[CameraPose],
                     min_translation: float = 0.3,
                     min_rotation_deg: float = 15.0) -> List[int]:
    """Greedy keyframe pick: keep a frame once it has moved or turned enough
    relative to the previously kept one. The first frame is always kept."""
    if not poses:
        return []
    kept = [0]
    for i in range(1, len(poses)):
        prev = poses[kept[-1]]
        dt = float(np.linalg.norm(poses[i].translation - prev.translation))
        dr = np.degrees(rotation_angle(poses[i].rotation, prev.rotation))
        if dt >= min_translation or dr >= min_rotation_deg:
            kept.append(i)
    return kept


def derive_keyframe_cloud(recon: RgbPointCloud, pose: CameraPose) -> RgbPointCloud:
    """The reconstruction restricted to what the camera actually sees."""
    return frustum_crop(recon, pose)


# ------------------------------------------------------------------------
# poses.txt
# ------------------------------------------------------------------------

def save_poses(path, poses: Sequence[CameraPose]) -> None:
    """First line: width height fx fy cx cy near far. Then one pose per line,
    the 12 row-major entries of the camera-to-world [R | t] matrix."""
    if not poses:
        raise InvalidParameter("no poses to save")
    p0 = poses[0]
    lines = [f"{p0.width} {p0.height} {p0.fx:.10g} {p0.fy:.10g} "
             f"{p0.cx:.10g} {p0.cy:.10g} {p0.near:.10g} {p0.far:.10g}"]
    for p in poses:
        rt = np.concatenate([p.rotation, p.translation[:, None]], axis=1)
        lines.append(" ".join(f"{v:.17g}" for v in rt.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path) -> List[CameraPose]:
    lines = [ln for ln in Path(path).read_text().splitlines()
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ShapeError(f"{path}: empty pose file")
    head = lines[0].split()
    if len(head) != 8:
        raise ShapeError(f"{path}: header needs 8 values, got {len(head)}")
    width, height = int(head[0]), int(head[1])
    fx, fy, cx, cy, near, far = map(float, head[2:])
    poses = []
    for ln in lines[1:]:
        vals = np.array(ln.split(), dtype=np.float64)
        if vals.shape != (12,):
            raise ShapeError(f"{path}: pose rows need 12 values, got {len(vals)}")
        rt = vals.reshape(3, 4)
        poses.append(CameraPose(rt[:, :3], rt[:, 3], fx, fy, cx, cy,
                                width, height, near, far))
    return poses


# ------------------------------------------------------------------------
# dataset directory
# ------------------------------------------------------------------------

@dataclass
class KeyframeEntry:
    scene_id: str
    frame: int                  # index into the scene's trajectory
    path: str                   # relative to the dataset root
    count: int
    centroid: Tuple[float, float, float]


@dataclass
class SplitManifest:
    """Scene-level split; the two sides must not share a scene."""

    train: List[str] = field(default_factory=list)
    eval: List[str] = field(default_factory=list)

    def validate(self, known_scenes: Sequence[str] | None = None) -> None:
        overlap = set(self.train) & set(self.eval)
        if overlap:
            raise ConfigError(f"scenes in both splits: {sorted(overlap)}")
        if not self.train and not self.eval:
            raise ConfigError("both splits are empty")
        if known_scenes is not None:
            unknown = (set(self.train) | set(self.eval)) - set(known_scenes)
            if unknown:
                raise ConfigError(f"unknown scenes in split: {sorted(unknown)}")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(
            {"train": self.train, "eval": self.eval}, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        d = json.loads(Path(path).read_text())
        m = cls(train=list(d["train"]), eval=list(d["eval"]))
        m.validate()
        return m


def generate_world(root, spec: WorldSpec, seed: int) -> Dict:
    """Write scenes/<id>/{recon.cgpc,poses.txt} plus the world manifest.
    Returns the manifest dict."""
    spec.validate()
    root = Path(root)
    scene_ids = [f"scene{chr(ord('A') + i)}" if i < 26 else f"scene{i}"
                 for i in range(spec.num_scenes)]
    rng = np.random.default_rng(seed)
    entries = []
    for sid in scene_ids:
        recon, poses = generate_scene(sid, spec, rng)
        sdir = root / "scenes" / sid
        sdir.mkdir(parents=True, exist_ok=True)
        save_cloud(sdir / "recon.cgpc", recon)
        save_poses(sdir / "poses.txt", poses)
        entries.append({"scene": sid, "points": len(recon),
                        "frames": len(poses)})
    manifest = {
        "format": "synthetic-world-v1",
        "seed": seed,
        "num_classes": NUM_CLASSES,
        "scenes": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def world_scenes(root) -> List[str]:
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    return [e["scene"] for e in manifest["scenes"]]


def derive_keyframes(root, min_translation: float = 0.3,
                     min_rotation_deg: float = 15.0) -> Dict:
    """Crop every selected keyframe of every scene and write the flat index.

    Frames whose frustum contains no reconstruction points are dropped with a
    log line; they produce no file and no index entry.
    """
    root = Path(root)
    scenes = world_scenes(root)
    index: List[KeyframeEntry] = []
    dropped = 0
    for sid in scenes:
        sdir = root / "scenes" / sid
        recon = load_cloud(sdir / "recon.cgpc")
        poses = load_poses(sdir / "poses.txt")
        kdir = root / "keyframes" / sid
        kdir.mkdir(parents=True, exist_ok=True)
        for frame in select_keyframes(poses, min_translation, min_rotation_deg):
            try:
                kf = derive_keyframe_cloud(recon, poses[frame])
            except EmptyCrop:
                log.warning("scene %s frame %d: empty frustum crop, dropped",
                            sid, frame)
                dropped += 1
                continue
            rel = f"keyframes/{sid}/kf_{frame:04d}.cgpc"
            save_cloud(root / rel, kf)
            c = kf.centroid
            index.append(KeyframeEntry(sid, frame, rel, len(kf),
                                       (float(c[0]), float(c[1]), float(c[2]))))
    payload = {
        "format": "keyframe-index-v1",
        "dropped_empty": dropped,
        "keyframes": [{"scene": e.scene_id, "frame": e.frame, "path": e.path,
                       "count": e.count, "centroid": list(e.centroid)}
                      for e in index],
    }
    (root / "keyframes" / "index.json").write_text(
        json.dumps(payload, indent=2) + "\n")
    return payload


def load_keyframe_index(root) -> List[KeyframeEntry]:
    path = Path(root) / "keyframes" / "index.json"
    if not path.exists():
        raise FileNotFoundError(
            f"{path}: keyframe index not found; derive it first")
    d = json.loads(path.read_text())
    return [KeyframeEntry(e["scene"], e["frame"], e["path"], e["count"],
                          tuple(e["centroid"]))
            for e in d["keyframes"]]


def load_keyframe(root, entry: KeyframeEntry) -> RgbPointCloud:
    return load_cloud(Path(root) / entry.path)
