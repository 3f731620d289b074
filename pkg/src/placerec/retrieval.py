"""Descriptor database, nearest-neighbour queries and recall evaluation.

Database membership follows the submap-spacing rule: walking the keyframes
in scan order, a keyframe joins the database when its scene is new or its
centroid is at least ``spacing`` metres from every same-scene entry already
stored; everything else becomes a query. A retrieved entry is a correct
match when it comes from the query's scene and its centroid lies strictly
within ``radius`` metres of the query's.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, InvalidParameter, ShapeError
from .pipeline import PlaceDescriptor

DB_SPACING = 3.0        # metres between stored same-scene submaps
MATCH_RADIUS = 3.0      # correct-match centroid distance, strict


class DescriptorDatabase:
    """Append-only store of place descriptors with an exact top-K query."""

    def __init__(self, dim: int):
        if dim < 1:
            raise InvalidParameter(f"descriptor dim must be >= 1, got {dim}")
        self.dim = dim
        self.vectors: List[np.ndarray] = []
        self.scene_ids: List[str] = []
        self.centroids: List[np.ndarray] = []
        self._tree = None

    def __len__(self) -> int:
        return len(self.vectors)

    def add(self, desc: PlaceDescriptor) -> None:
        v = np.asarray(desc.vector, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ShapeError(f"descriptor has dim {v.shape}, expected ({self.dim},)")
        self.vectors.append(v)
        self.scene_ids.append(desc.scene_id)
        self.centroids.append(np.asarray(desc.centroid, dtype=np.float64))
        self._tree = None

    def _ensure_tree(self):
        if self._tree is None:
            self._tree = cKDTree(np.stack(self.vectors))
        return self._tree

    def query_topk(self, vector: np.ndarray, k: int):
        """Exact K nearest stored descriptors by Euclidean distance.

        Ties at the K-th distance resolve by insertion order. Returns
        (indices, distances, truncated); ``truncated`` flags that fewer than
        ``k`` entries exist.
        """
        if len(self.vectors) == 0:
            raise EmptyInput("query against an empty database")
        if k < 1:
            raise InvalidParameter(f"k must be >= 1, got {k}")
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ShapeError(f"query has dim {v.shape}, expected ({self.dim},)")
        n = len(self.vectors)
        kk = min(k, n)
        tree = self._ensure_tree()
        dist, _ = tree.query(v, k=kk)
        dist = np.atleast_1d(dist)
        # re-rank every candidate at or below the k-th distance so equal
        # distances fall back to insertion order, not tree layout; the ball
        # is inflated a hair because the squared-distance boundary test can
        # round the k-th point out, and the exact sort below discards any
        # extra candidate the inflation lets in
        r = float(dist[-1])
        r = max(np.nextafter(r, np.inf), r * (1.0 + 1e-12))
        cand = np.array(sorted(tree.query_ball_point(v, r)), dtype=int)
        cd = np.linalg.norm(np.stack(self.vectors)[cand] - v, axis=1)
        order = np.lexsort((cand, cd))
        top = cand[order][:kk]
        return top, cd[order][:kk], k > n


@dataclass
class RecallReport:
    ks: Tuple[int, ...]
    recalls: Tuple[float, ...]
    num_queries: int
    num_database: int
    first_correct_rank: List[int] = field(default_factory=list)  # 0 = none in top max(k)

    def as_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "recalls": list(self.recalls),
            "num_queries": self.num_queries,
            "num_database": self.num_database,
            "first_correct_rank": list(self.first_correct_rank),
        }

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2) + "\n")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["k", "recall"])
            for k, r in zip(self.ks, self.recalls):
                wr.writerow([k, f"{r:.6f}"])


def is_correct_match(query_scene: str, query_centroid: np.ndarray,
                     db_scene: str, db_centroid: np.ndarray,
                     radius: float = MATCH_RADIUS) -> bool:
    if query_scene != db_scene:
        return False
    d = float(np.linalg.norm(np.asarray(query_centroid) - np.asarray(db_centroid)))
    return d < radius


def build_database(descriptors: Sequence[PlaceDescriptor],
                   spacing: float = DB_SPACING):
    """Split a scan-ordered descriptor list into (database, queries)."""
    if not descriptors:
        raise EmptyInput("no descriptors to build a database from")
    if spacing <= 0:
        raise InvalidParameter(f"spacing must be > 0, got {spacing}")
    dim = len(np.asarray(descriptors[0].vector))
    db = DescriptorDatabase(dim)
    queries: List[PlaceDescriptor] = []
    stored: dict[str, List[np.ndarray]] = {}
    for d in descriptors:
        c = np.asarray(d.centroid, dtype=np.float64)
        prev = stored.get(d.scene_id)
        if prev is None or all(np.linalg.norm(c - p) >= spacing for p in prev):
            db.add(d)
            stored.setdefault(d.scene_id, []).append(c)
        else:
            queries.append(d)
    return db, queries


def evaluate(db: DescriptorDatabase, queries: Sequence[PlaceDescriptor],
             ks: Sequence[int] = (1, 2, 3, 4, 5),
             radius: float = MATCH_RADIUS) -> RecallReport:
    """recall@K over the query list: the fraction of queries with a correct
    match somewhere in their top K retrievals."""
    if not queries:
        raise EmptyInput("no queries to evaluate")
    ks = tuple(sorted(set(int(k) for k in ks)))
    if ks[0] < 1:
        raise InvalidParameter(f"ks must be positive, got {ks}")
    hits = np.zeros(len(ks), dtype=np.int64)
    ranks: List[int] = []
    for q in queries:
        idx, _, _ = db.query_topk(q.vector, ks[-1])
        correct = [is_correct_match(q.scene_id, q.centroid, db.scene_ids[i],
                                    db.centroids[i], radius) for i in idx]
        first = next((r + 1 for r, ok in enumerate(correct) if ok), 0)
        ranks.append(first)
        for j, k in enumerate(ks):
            if 0 < first <= k:
                hits[j] += 1
    recalls = tuple(float(h) / len(queries) for h in hits)
    return RecallReport(ks, recalls, len(queries), len(db), ranks)


# ------------------------------------------------------------------------
# database file
# ------------------------------------------------------------------------

_MAGIC = b"CGDB"
_VERSION = 1


def save_database(path, db: DescriptorDatabase) -> None:
    """Vectors are stored as float32, centroids as float64 (the metric rules
    compare centroids exactly)."""
    parts = [_MAGIC, struct.pack("<HQI", _VERSION, len(db), db.dim)]
    for sid in db.scene_ids:
        b = sid.encode("utf-8")
        parts.append(struct.pack("<H", len(b)))
        parts.append(b)
    if len(db):
        parts.append(np.stack(db.centroids).astype("<f8").tobytes())
        parts.append(np.stack(db.vectors).astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_database(path) -> DescriptorDatabase:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ShapeError(f"{path}: not a descriptor database file")
    version, count, dim = struct.unpack_from("<HQI", raw, 4)
    if version != _VERSION:
        raise ShapeError(f"{path}: unsupported database version {version}")
    off = 4 + 14
    db = DescriptorDatabase(dim)
    sids = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, off)
        off += 2
        sids.append(raw[off:off + n].decode("utf-8"))
        off += n
    cents = np.frombuffer(raw, "<f8", count * 3, off).reshape(count, 3)
    off += count * 24
    vecs = np.frombuffer(raw, "<f4", count * dim, off).reshape(count, dim)
    off += count * dim * 4
    if off != len(raw):
        raise ShapeError(f"{path}: {len(raw) - off} trailing bytes")
    for sid, c, v in zip(sids, cents, vecs):
        db.add(PlaceDescriptor(v.astype(np.float64), sid, c.copy()))
    return db
