"""Cloud file formats.

Binary container (extension ``.cgpc``), little-endian throughout:

    magic      4 bytes  b"CGPC"
    version    u16      currently 1
    flags      u16      bit 0: colours present, bit 1: labels present
    count      u64      number of points
    sid_len    u16      length of the UTF-8 scene id
    scene_id   sid_len bytes
    positions  count * 3 * f32
    colours    count * 3 * f32          (only if flag bit 0)
    labels     count * u16              (only if flag bit 1)

Text variant for fixtures: one point per line, ``x y z [r g b] [label]``
(3, 4, 6 or 7 columns), ``#``-prefixed comment lines allowed; a leading
``# scene <id>`` comment carries the scene id.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InvalidParameter
from .geometry import RgbPointCloud

MAGIC = b"CGPC"
VERSION = 1

_FLAG_COLOURS = 1
_FLAG_LABELS = 2


def save_cloud(path, cloud: RgbPointCloud) -> None:
    """Write a cloud to the binary container format."""
    sid = cloud.scene_id.encode("utf-8")
    flags = 0
    if cloud.colours is not None:
        flags |= _FLAG_COLOURS
    if cloud.labels is not None:
        flags |= _FLAG_LABELS
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HHQH", VERSION, flags, len(cloud), len(sid)))
        f.write(sid)
        f.write(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())
        if cloud.colours is not None:
            f.write(np.ascontiguousarray(cloud.colours, dtype="<f4").tobytes())
        if cloud.labels is not None:
            f.write(np.ascontiguousarray(cloud.labels, dtype="<u2").tobytes())


def load_cloud(path, dtype=np.float64) -> RgbPointCloud:
    """Read a cloud from the binary container format."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise InvalidParameter(f"{path}: bad magic {magic!r}")
        version, flags, count, sid_len = struct.unpack("<HHQH", f.read(14))
        if version != VERSION:
            raise InvalidParameter(f"{path}: unsupported version {version}")
        scene_id = f.read(sid_len).decode("utf-8")
        pts = np.frombuffer(f.read(count * 12), dtype="<f4").reshape(count, 3)
        cols = None
        if flags & _FLAG_COLOURS:
            cols = np.frombuffer(f.read(count * 12), dtype="<f4").reshape(count, 3)
        labels = None
        if flags & _FLAG_LABELS:
            labels = np.frombuffer(f.read(count * 2), dtype="<u2").astype(np.int64)
    return RgbPointCloud(
        pts.astype(dtype),
        None if cols is None else cols.astype(dtype),
        labels,
        scene_id,
    )


def save_cloud_text(path, cloud: RgbPointCloud) -> None:
    with open(path, "w") as f:
        if cloud.scene_id:
            f.write(f"# scene {cloud.scene_id}\n")
        for i in range(len(cloud)):
            parts = [f"{v:.9g}" for v in cloud.points[i]]
            if cloud.colours is not None:
                parts += [f"{v:.9g}" for v in cloud.colours[i]]
            if cloud.labels is not None:
                parts.append(str(int(cloud.labels[i])))
            f.write(" ".join(parts) + "\n")


def load_cloud_text(path, dtype=np.float64) -> RgbPointCloud:
    scene_id = ""
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                fields = line[1:].split()
                if len(fields) == 2 and fields[0] == "scene":
                    scene_id = fields[1]
                continue
            rows.append(line.split())
    if not rows:
        return RgbPointCloud(np.zeros((0, 3), dtype=dtype), scene_id=scene_id)
    ncols = len(rows[0])
    if ncols not in (3, 4, 6, 7) or any(len(r) != ncols for r in rows):
        raise InvalidParameter(f"{path}: rows must have 3, 4, 6 or 7 columns")
    data = np.array([[float(v) for v in r] for r in rows], dtype=dtype)
    pts = data[:, :3]
    cols = data[:, 3:6] if ncols >= 6 else None
    labels = data[:, -1].astype(np.int64) if ncols in (4, 7) else None
    return RgbPointCloud(pts, cols, labels, scene_id)
