"""The three-model pipeline: semantic encoder, semantic decoder and the
descriptor embedding head.

The encoder is five kernel-point-convolution layers, two blocks each; layers
beyond the first start with a strided block that carries features down one
resolution level. The decoder walks back up with nearest upsampling and skip
connections and ends in per-point class logits; it exists for the
segmentation training stage only and is never run on the recognition path.
The embedding head stretches each level's features to a common width with a
fully connected layer, concatenates all rows into one set of local
descriptors, aggregates them with soft-assignment VLAD pooling and reduces
to a unit-norm global descriptor.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .geometry import RgbPointCloud, grid_subsample
from .graph import LayerGraph, build_layer_graph
from .kpconv import (ConvBlock, KernelDisposition, Linear, Module, Param,
                     UnaryBlock, caching, init_kernel_disposition, no_grad)

_EPS = 1e-12  # inside every normalisation, keeps zero vectors finite


@dataclass
class ModelConfig:
    """Architecture hyperparameters; serialisable as the JSON manifest."""

    num_classes: int = 8
    use_colour: bool = True
    num_levels: int = 5
    first_subsampling_dl: float = 0.04
    radius_ratio: float = 2.5
    num_kernel_points: int = 15
    channels: Tuple[int, ...] = (64, 128, 256, 512, 1024)
    width_factor: float = 1.0
    deformable_start_layer: int = 3      # 1-based layer index; 3..5 deformable
    stretch_dim: int = 128               # common width after the per-level FC
    vlad_clusters: int = 64
    descriptor_dim: int = 256
    levels_used: Tuple[int, ...] = (1, 2, 3, 4, 5)
    intra_normalise: bool = True
    ordered_reduction: bool = True
    norm_momentum: float = 0.9
    act_slope: float = 0.1
    two_stage: bool = True               # False: no segmentation pre-training
    fixed_num_points: Optional[int] = None
    neighbor_limits: Optional[Tuple[int, ...]] = None
    dtype: str = "float32"
    seed: int = 0

    def validate(self) -> None:
        if self.num_levels != len(self.channels):
            raise ConfigError("channels must list one width per level")
        if not self.levels_used or any(
                not 1 <= l <= self.num_levels for l in self.levels_used):
            raise ConfigError(f"levels_used out of range: {self.levels_used}")
        if tuple(sorted(set(self.levels_used))) != tuple(self.levels_used):
            raise ConfigError("levels_used must be strictly increasing")
        if self.fixed_num_points is not None and self.use_colour:
            raise ConfigError("fixed-density mode drops the colour channel; "
                              "set use_colour=false")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 semantic classes")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def in_channels(self) -> int:
        return 4 if self.use_colour else 1

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(max(1, int(round(c * self.width_factor))) for c in self.channels)

    def to_manifest(self) -> dict:
        return {
            "levels": self.num_levels,
            "widths": list(self.widths),
            "stretch_dim": self.stretch_dim,
            "vlad_clusters": self.vlad_clusters,
            "descriptor_dim": self.descriptor_dim,
            "num_classes": self.num_classes,
            "use_colour": self.use_colour,
            "levels_used": list(self.levels_used),
            "two_stage": self.two_stage,
            "fixed_num_points": self.fixed_num_points,
            "first_subsampling_dl": self.first_subsampling_dl,
            "radius_ratio": self.radius_ratio,
            "num_kernel_points": self.num_kernel_points,
            "channels": list(self.channels),
            "width_factor": self.width_factor,
            "deformable_start_layer": self.deformable_start_layer,
            "intra_normalise": self.intra_normalise,
            "ordered_reduction": self.ordered_reduction,
            "norm_momentum": self.norm_momentum,
            "act_slope": self.act_slope,
            "neighbor_limits": None if self.neighbor_limits is None
                               else list(self.neighbor_limits),
            "dtype": self.dtype,
            "seed": self.seed,
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "ModelConfig":
        cfg = cls(
            num_classes=m["num_classes"],
            use_colour=m["use_colour"],
            num_levels=m["levels"],
            first_subsampling_dl=m["first_subsampling_dl"],
            radius_ratio=m["radius_ratio"],
            num_kernel_points=m["num_kernel_points"],
            channels=tuple(m["channels"]),
            width_factor=m["width_factor"],
            deformable_start_layer=m["deformable_start_layer"],
            stretch_dim=m["stretch_dim"],
            vlad_clusters=m["vlad_clusters"],
            descriptor_dim=m["descriptor_dim"],
            levels_used=tuple(m["levels_used"]),
            intra_normalise=m["intra_normalise"],
            ordered_reduction=m["ordered_reduction"],
            norm_momentum=m["norm_momentum"],
            act_slope=m["act_slope"],
            two_stage=m["two_stage"],
            fixed_num_points=m["fixed_num_points"],
            neighbor_limits=None if m["neighbor_limits"] is None
                            else tuple(m["neighbor_limits"]),
            dtype=m["dtype"],
            seed=m["seed"],
        )
        cfg.validate()
        return cfg


@dataclass
class PlaceDescriptor:
    """Unit-norm global descriptor with provenance for retrieval rules."""

    vector: np.ndarray
    scene_id: str
    centroid: np.ndarray


@dataclass
class PreparedCloud:
    """One input cloud with its level pyramid and network input features."""

    cloud: RgbPointCloud        # original (keyframe) cloud
    cloud0: RgbPointCloud       # level-0 network input
    graph: LayerGraph
    input_feats: np.ndarray     # (N_0, C_in)


# ------------------------------------------------------------------------
# Normalisation helpers with explicit backward
# ------------------------------------------------------------------------

def _l2_normalise(v: np.ndarray):
    n = np.sqrt((v * v).sum() + _EPS * _EPS)
    return v / n, n


def _l2_backward(d_u, v, n):
    return d_u / n - v * ((d_u * v).sum() / n ** 3)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ------------------------------------------------------------------------
# Encoder
# ------------------------------------------------------------------------

class SemanticEncoder(Module):
    """Five convolution layers; F_l lives at resolution level l-1."""

    def __init__(self, cfg: ModelConfig, dispositions: List[KernelDisposition],
                 rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.widths
        dt = cfg.np_dtype
        mk = lambda cin, cout, level, layer: ConvBlock(
            cin, cout, dispositions[level], layer >= cfg.deformable_start_layer,
            rng, dtype=dt, momentum=cfg.norm_momentum, slope=cfg.act_slope)
        self.blocks = []
        # layer 1: two blocks at level 0
        self.blocks.append(("l1b1", mk(cfg.in_channels, w[0], 0, 1)))
        self.blocks.append(("l1b2", mk(w[0], w[0], 0, 1)))
        # layers 2..L: strided block from level i-2 to i-1, then one in-level block
        for i in range(2, cfg.num_levels + 1):
            self.blocks.append((f"l{i}b1", mk(w[i - 2], w[i - 1], i - 2, i)))
            self.blocks.append((f"l{i}b2", mk(w[i - 1], w[i - 1], i - 1, i)))

    def child_modules(self):
        return self.blocks

    def forward(self, prepared: PreparedCloud, update_stats: bool = False) -> List[np.ndarray]:
        g = prepared.graph
        p = g.points
        blocks = dict(self.blocks)
        x = blocks["l1b1"].forward(p[0], p[0], g.neighbor_idx[0],
                                   prepared.input_feats, update_stats)
        x = blocks["l1b2"].forward(p[0], p[0], g.neighbor_idx[0], x, update_stats)
        feats = [x]
        for i in range(2, self.cfg.num_levels + 1):
            x = blocks[f"l{i}b1"].forward(p[i - 1], p[i - 2], g.pool_idx[i - 2],
                                          x, update_stats)
            x = blocks[f"l{i}b2"].forward(p[i - 1], p[i - 1],
                                          g.neighbor_idx[i - 1], x, update_stats)
            feats.append(x)
        return feats

    def backward(self, d_feats: List[np.ndarray]) -> np.ndarray:
        """d_feats: one gradient per level (zeros allowed). Returns gradient
        w.r.t. the level-0 input features."""
        blocks = dict(self.blocks)
        L = self.cfg.num_levels
        d = np.array(d_feats[L - 1], copy=True)
        for i in range(L, 1, -1):
            d = blocks[f"l{i}b2"].backward(d)
            d = blocks[f"l{i}b1"].backward(d)
            d = d + d_feats[i - 2]
        d = blocks["l1b2"].backward(d)
        return blocks["l1b1"].backward(d)


# ------------------------------------------------------------------------
# Decoder
# ------------------------------------------------------------------------

class SemanticDecoder(Module):
    """Nearest upsampling with skip connections, ending in per-point logits."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.widths
        dt = cfg.np_dtype
        self.stages = []
        for l in range(cfg.num_levels - 2, -1, -1):   # levels L-2 .. 0
            in_w = w[l + 1] + w[l]                    # upsampled + skip
            self.stages.append((f"stage{l}", UnaryBlock(
                in_w, w[l], rng, dtype=dt, momentum=cfg.norm_momentum,
                slope=cfg.act_slope)))
        self.head = Linear(w[0], cfg.num_classes, rng, bias=True, dtype=dt)
        self._ctx = []

    def child_modules(self):
        return list(self.stages) + [("head", self.head)]

    def forward(self, prepared: PreparedCloud, enc: List[np.ndarray],
                update_stats: bool = False) -> np.ndarray:
        g = prepared.graph
        L = self.cfg.num_levels
        if len(enc) != L:
            raise ShapeError(f"expected {L} encoder levels, got {len(enc)}")
        for l in range(L):
            if len(enc[l]) != len(g.points[l]):
                raise ShapeError(f"level {l} features do not match graph points")
        stages = dict(self.stages)
        x = enc[L - 1]
        splits = []
        for l in range(L - 2, -1, -1):
            up = g.upsample_idx[l]
            x_up = x[up]                                   # (N_l, w_{l+1})
            splits.append((l, x_up.shape[1], len(x)))
            x = stages[f"stage{l}"].forward(
                np.concatenate([x_up, enc[l]], axis=1), update_stats)
        if caching():
            self._ctx.append(splits)
        return self.head.forward(x)

    def backward(self, prepared: PreparedCloud, d_logits: np.ndarray) -> List[np.ndarray]:
        """Returns per-level gradients w.r.t. the encoder output."""
        if not self._ctx:
            raise StateError("SemanticDecoder.backward before forward")
        splits = self._ctx.pop()
        g = prepared.graph
        L = self.cfg.num_levels
        stages = dict(self.stages)
        d_enc = [None] * L
        d = self.head.backward(d_logits)
        for (l, up_w, n_coarse) in reversed(splits):
            d_cat = stages[f"stage{l}"].backward(d)
            d_up, d_skip = d_cat[:, :up_w], d_cat[:, up_w:]
            d_enc[l] = d_skip
            d = np.zeros((n_coarse, up_w), dtype=d_up.dtype)
            np.add.at(d, g.upsample_idx[l], d_up)
        d_enc[L - 1] = d
        return d_enc


# ------------------------------------------------------------------------
# Embedding head
# ------------------------------------------------------------------------

class VladAggregator(Module):
    """Soft-assignment VLAD pooling of a set of local descriptors.

    a_k(x) = softmax_k(w_k . x + b_k);  V(k) = sum_x a_k(x) (x - c_k);
    rows are unit-normalised (optional), flattened and unit-normalised again.
    With ``ordered_reduction`` the rows are put in lexicographic order before
    aggregation, which makes the output bitwise independent of input order.
    """

    def __init__(self, clusters: int, dim: int, rng: np.random.Generator,
                 intra_normalise: bool = True, ordered_reduction: bool = True,
                 dtype=np.float64):
        std = 1.0 / np.sqrt(dim)
        self.centers = Param(rng.normal(0.0, std, (clusters, dim)).astype(dtype))
        self.assign_w = Param(rng.normal(0.0, std, (clusters, dim)).astype(dtype))
        self.assign_b = Param(np.zeros(clusters, dtype=dtype))
        self.intra_normalise = intra_normalise
        self.ordered_reduction = ordered_reduction
        self._ctx = []

    def own_params(self):
        return [("centers", self.centers), ("assign_w", self.assign_w),
                ("assign_b", self.assign_b)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.centers.shape[1]:
            raise ShapeError(f"expected dim {self.centers.shape[1]}, got {x.shape[1]}")
        order = None
        if self.ordered_reduction:
            order = np.lexsort(x.T[::-1])
            x = x[order]
        logits = x @ self.assign_w.value.T + self.assign_b.value   # (N, K)
        a = _softmax(logits)
        s = a.sum(axis=0)                                          # (K,)
        v = a.T @ x - s[:, None] * self.centers.value              # (K, D)
        if self.intra_normalise:
            rn = np.sqrt((v * v).sum(axis=1) + _EPS * _EPS)        # (K,)
            vn = v / rn[:, None]
        else:
            rn, vn = None, v
        flat = vn.reshape(-1)
        out, n = _l2_normalise(flat)
        if caching():
            self._ctx.append(dict(x=x, a=a, s=s, v=v, rn=rn, vn=vn, flat=flat,
                                  n=n, order=order))
        return out

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        if not self._ctx:
            raise StateError("VladAggregator.backward before forward")
        c = self._ctx.pop()
        k, dim = self.centers.shape
        d_flat = _l2_backward(d_out, c["flat"], c["n"])
        d_vn = d_flat.reshape(k, dim)
        if self.intra_normalise:
            rn = c["rn"]
            dot = (d_vn * c["v"]).sum(axis=1)
            d_v = d_vn / rn[:, None] - c["v"] * (dot / rn ** 3)[:, None]
        else:
            d_v = d_vn
        x, a = c["x"], c["a"]
        d_x = a @ d_v                                              # (N, D)
        self.centers.grad += -c["s"][:, None] * d_v
        d_a = x @ d_v.T - (d_v * self.centers.value).sum(axis=1)[None, :]
        d_logits = a * (d_a - (d_a * a).sum(axis=1, keepdims=True))
        self.assign_w.grad += d_logits.T @ x
        self.assign_b.grad += d_logits.sum(axis=0)
        d_x += d_logits @ self.assign_w.value
        if c["order"] is not None:
            d_unsorted = np.empty_like(d_x)
            d_unsorted[c["order"]] = d_x
            d_x = d_unsorted
        return d_x


class EmbeddingHead(Module):
    """Per-level stretch FCs, VLAD aggregation and the reduction FC."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = cfg.np_dtype
        w = cfg.widths
        self.stretch = [(f"stretch{l}", Linear(w[l - 1], cfg.stretch_dim, rng,
                                               bias=True, dtype=dt))
                        for l in cfg.levels_used]
        self.vlad = VladAggregator(cfg.vlad_clusters, cfg.stretch_dim, rng,
                                   intra_normalise=cfg.intra_normalise,
                                   ordered_reduction=cfg.ordered_reduction,
                                   dtype=dt)
        self.reduction = Linear(cfg.vlad_clusters * cfg.stretch_dim,
                                cfg.descriptor_dim, rng, bias=False, dtype=dt)
        self._ctx = []

    def child_modules(self):
        return list(self.stretch) + [("vlad", self.vlad),
                                     ("reduction", self.reduction)]

    def forward(self, enc: List[np.ndarray]) -> np.ndarray:
        if len(enc) != self.cfg.num_levels:
            raise ConfigError(
                f"expected {self.cfg.num_levels} encoder levels, got {len(enc)}")
        stretched = []
        counts = []
        for name, lin in self.stretch:
            l = int(name[len("stretch"):])
            stretched.append(lin.forward(enc[l - 1]))
            counts.append(len(enc[l - 1]))
        x = np.concatenate(stretched, axis=0)
        pooled = self.vlad.forward(x)
        reduced = self.reduction.forward(pooled[None, :])[0]
        out, n = _l2_normalise(reduced)
        if caching():
            self._ctx.append(dict(counts=counts, reduced=reduced, n=n))
        return out

    def backward(self, d_out: np.ndarray) -> List[np.ndarray]:
        """Returns per-level gradients w.r.t. the encoder output (zeros for
        unused levels)."""
        if not self._ctx:
            raise StateError("EmbeddingHead.backward before forward")
        c = self._ctx.pop()
        d_reduced = _l2_backward(d_out, c["reduced"], c["n"])
        d_pooled = self.reduction.backward(d_reduced[None, :])[0]
        d_x = self.vlad.backward(d_pooled)
        d_enc = [None] * self.cfg.num_levels
        offset = 0
        for (name, lin), count in zip(self.stretch, c["counts"]):
            l = int(name[len("stretch"):])
            d_enc[l - 1] = lin.backward(d_x[offset:offset + count])
            offset += count
        return d_enc


# ------------------------------------------------------------------------
# Full model
# ------------------------------------------------------------------------

class PlaceRecognitionModel(Module):
    """Encoder + decoder + embedding head behind one construction seed."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.dispositions = []
        for l in range(cfg.num_levels):
            extent = cfg.radius_ratio * cfg.first_subsampling_dl * (2.0 ** l)
            self.dispositions.append(
                init_kernel_disposition(cfg.num_kernel_points, extent, seed=cfg.seed))
        self.encoder = SemanticEncoder(cfg, self.dispositions, rng)
        self.decoder = SemanticDecoder(cfg, rng)
        self.embedding = EmbeddingHead(cfg, rng)

    def child_modules(self):
        return [("encoder", self.encoder), ("decoder", self.decoder),
                ("embedding", self.embedding)]

    # ---- data preparation -------------------------------------------------

    def prepare(self, cloud: RgbPointCloud) -> PreparedCloud:
        cfg = self.cfg
        cloud = cloud.astype(cfg.np_dtype)
        if cfg.fixed_num_points is not None:
            cloud0 = _resample_fixed(cloud, cfg.fixed_num_points, cfg.seed)
        else:
            cloud0 = grid_subsample(cloud, cfg.first_subsampling_dl)
        if cfg.use_colour:
            if cloud0.colours is None:
                raise ConfigError("model expects colour but the cloud has none")
            feats = np.concatenate(
                [np.ones((len(cloud0), 1), dtype=cfg.np_dtype),
                 cloud0.colours.astype(cfg.np_dtype)], axis=1)
        else:
            feats = np.ones((len(cloud0), 1), dtype=cfg.np_dtype)
        graph = build_layer_graph(cloud0.points, cfg.num_levels,
                                  cfg.first_subsampling_dl, cfg.radius_ratio,
                                  cfg.neighbor_limits)
        return PreparedCloud(cloud, cloud0, graph, feats)

    # ---- forward / backward ----------------------------------------------

    def encode(self, prepared: PreparedCloud, update_stats: bool = False) -> List[np.ndarray]:
        return self.encoder.forward(prepared, update_stats=update_stats)

    def decode(self, prepared: PreparedCloud, enc: List[np.ndarray],
               update_stats: bool = False) -> np.ndarray:
        return self.decoder.forward(prepared, enc, update_stats=update_stats)

    def embed(self, enc: List[np.ndarray]) -> np.ndarray:
        return self.embedding.forward(enc)

    def describe(self, cloud: RgbPointCloud,
                 prepared: Optional[PreparedCloud] = None) -> PlaceDescriptor:
        """Inference path: encode then embed; the decoder is not executed."""
        if prepared is None:
            prepared = self.prepare(cloud)
        with no_grad():
            enc = self.encode(prepared)
            vec = self.embed(enc)
        return PlaceDescriptor(vec, cloud.scene_id, cloud.centroid)

    def describe_prepared(self, prepared: PreparedCloud) -> PlaceDescriptor:
        with no_grad():
            enc = self.encode(prepared)
            vec = self.embed(enc)
        return PlaceDescriptor(vec, prepared.cloud.scene_id,
                               prepared.cloud.centroid)

    # ---- serialisation ----------------------------------------------------

    def state_tensors(self) -> dict:
        out = {}
        for name, p in self.named_params():
            out[name] = p.value
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state(self, tensors: dict) -> None:
        for name, p in self.named_params():
            if name not in tensors:
                raise ShapeError(f"checkpoint missing tensor '{name}'")
            t = np.asarray(tensors[name], dtype=p.value.dtype)
            if t.shape != p.value.shape:
                raise ShapeError(
                    f"tensor '{name}' has shape {t.shape}, expected {p.value.shape}")
            p.value[...] = t
        for name, b in self.named_buffers():
            if name not in tensors:
                raise ShapeError(f"checkpoint missing buffer '{name}'")
            t = np.asarray(tensors[name], dtype=b.dtype)
            if t.shape != b.shape:
                raise ShapeError(
                    f"buffer '{name}' has shape {t.shape}, expected {b.shape}")
            b[...] = t


def _resample_fixed(cloud: RgbPointCloud, count: int, seed: int) -> RgbPointCloud:
    """Uniform random resample to exactly ``count`` points: without
    replacement when the cloud is large enough, with replacement otherwise.
    Deterministic per (seed, scene, size)."""
    material = (seed, zlib.crc32(cloud.scene_id.encode()), len(cloud))
    rng = np.random.default_rng(np.random.SeedSequence(material))
    if len(cloud) >= count:
        idx = rng.choice(len(cloud), size=count, replace=False)
    else:
        idx = rng.choice(len(cloud), size=count, replace=True)
    sub = cloud.select(np.sort(idx))
    return RgbPointCloud(sub.points, None, sub.labels, sub.scene_id)
