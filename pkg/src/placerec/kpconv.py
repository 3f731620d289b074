"""Kernel point convolution and the small block library built around it.

Everything here is plain numpy with hand-written backward passes, so that
analytic gradients can be verified against central finite differences in
double precision. Each block caches its forward activations on ``self``;
``backward`` consumes the cache and raises ``StateError`` when called without
a preceding forward. Blocks process one cloud at a time.

The convolution computes, for every query point x with neighbours x_i,

    out(x) = sum_i sum_k h(x_i, k) * W_k * f_i,
    h(x_i, k) = max(0, 1 - |(x_i - x) - kp_k| / influence),

with kernel points kp_k fixed in the rigid variant and shifted by learned
per-query offsets in the deformable variant. Offsets are predicted by a
rigid convolution over the same neighbourhood (weights zero-initialised, so
a deformable layer starts out exactly rigid).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConvergenceError, InvalidParameter, ShapeError, StateError


class Param:
    """A learnable tensor with matching gradient storage."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


_caching = True


class no_grad:
    """Context manager that stops forwards from caching activations.

    Use it around inference-only passes; without it every forward grows the
    backward stacks and a long evaluation loop eats memory for caches nobody
    will pop.
    """

    def __enter__(self):
        global _caching
        self._prev = _caching
        _caching = False
        return self

    def __exit__(self, *exc):
        global _caching
        _caching = self._prev
        return False


def caching() -> bool:
    return _caching


class Module:
    """Minimal base: subclasses list their own params and child modules.

    Forward calls push their cached activations on a stack, backward calls
    pop, so several forwards may run before their backwards as long as the
    backwards come in reverse order (last forward, first backward). That is
    what a tuple loss needs: embed every member, then walk back through them.
    Inside ``no_grad()`` nothing is pushed and backward is unavailable.
    """

    def child_modules(self) -> List[Tuple[str, "Module"]]:
        return []

    def own_params(self) -> List[Tuple[str, Param]]:
        return []

    def own_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return []

    def named_params(self, prefix: str = "") -> List[Tuple[str, Param]]:
        out = [(prefix + n, p) for n, p in self.own_params()]
        for name, child in self.child_modules():
            out += child.named_params(prefix + name + ".")
        return out

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = [(prefix + n, b) for n, b in self.own_buffers()]
        for name, child in self.child_modules():
            out += child.named_buffers(prefix + name + ".")
        return out

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()


# ------------------------------------------------------------------------
# Kernel point disposition
# ------------------------------------------------------------------------

@dataclass
class KernelDisposition:
    """Kernel point layout for one convolution: offsets within a ball."""

    points: np.ndarray   # (K, 3), first point at the origin
    extent: float        # ball radius containing all kernel points
    influence: float     # distance at which a kernel point's weight hits zero

    def validate(self, min_separation: float) -> None:
        r = np.linalg.norm(self.points, axis=1)
        if r.max() > self.extent * (1 + 1e-9):
            raise InvalidParameter("kernel point outside the extent ball")
        d = np.linalg.norm(self.points[:, None] - self.points[None], axis=2)
        d[np.diag_indices_from(d)] = np.inf
        if d.min() < min_separation:
            raise InvalidParameter(
                f"kernel points too close: {d.min():.4g} < {min_separation:.4g}")

    def scaled(self, extent: float, influence: Optional[float] = None) -> "KernelDisposition":
        factor = extent / self.extent
        if influence is None:
            influence = self.influence * factor
        return KernelDisposition(self.points * factor, extent, influence)


def default_influence(extent: float, num_points: int) -> float:
    # kernel points at count K fill the ball with spacing ~ extent / K^(1/3)
    return extent / num_points ** (1.0 / 3.0)


_unit_layout_cache: dict = {}


def init_kernel_disposition(num_points: int, extent: float, seed: int,
                            influence: Optional[float] = None,
                            tol: float = 1e-7, max_iter: int = 20000) -> KernelDisposition:
    """Spread kernel points in a ball by repulsion plus central attraction.

    The first point is pinned at the origin. Free points follow gradient
    descent on  E = sum_{i<j} 1/d_ij + (K-1)/2 * sum_i r_i^2  inside the unit
    ball (positions are projected back onto the ball when they escape), until
    the largest per-iteration movement drops below ``tol``. The attraction
    constant K-1 puts the two-point equilibrium exactly on the ball boundary.
    Deterministic for a given seed; layouts are cached per (K, seed).
    """
    if num_points < 2:
        raise InvalidParameter("need at least 2 kernel points")
    key = (num_points, seed)
    if key not in _unit_layout_cache:
        _unit_layout_cache[key] = _optimise_unit_layout(num_points, seed, tol, max_iter)
    pts = _unit_layout_cache[key] * extent
    if influence is None:
        influence = default_influence(extent, num_points)
    return KernelDisposition(pts, extent, influence)


def _optimise_unit_layout(num_points, seed, tol, max_iter) -> np.ndarray:
    rng = np.random.default_rng(seed)
    # uniform init in the unit ball
    pts = np.zeros((num_points, 3))
    v = rng.normal(size=(num_points - 1, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts[1:] = v * rng.uniform(0.2, 1.0, size=(num_points - 1, 1)) ** (1.0 / 3.0)

    attraction = float(num_points - 1)
    lr = 0.01
    for _ in range(max_iter):
        diff = pts[:, None] - pts[None]                         # (K, K, 3)
        d2 = (diff ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        inv_d3 = d2 ** -1.5
        force = (diff * inv_d3[..., None]).sum(axis=1) - attraction * pts
        move = lr * force
        norm = np.linalg.norm(move, axis=1, keepdims=True)
        move *= np.minimum(1.0, 0.05 / np.maximum(norm, 1e-30))
        move[0] = 0.0
        new = pts + move
        r = np.linalg.norm(new, axis=1, keepdims=True)
        new /= np.maximum(r, 1.0)
        step = np.linalg.norm(new - pts, axis=1).max()
        pts = new
        if step < tol:
            return pts
    raise ConvergenceError(f"kernel layout did not settle in {max_iter} iterations")


# ------------------------------------------------------------------------
# Blocks
# ------------------------------------------------------------------------

class KPConv(Module):
    """One kernel point convolution, rigid or deformable, bias-free."""

    def __init__(self, in_channels: int, out_channels: int,
                 disposition: KernelDisposition, deformable: bool,
                 rng: np.random.Generator, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.disposition = disposition
        self.deformable = deformable
        k = len(disposition.points)
        std = np.sqrt(2.0 / (k * in_channels))
        self.weights = Param(rng.normal(0.0, std, (k, in_channels, out_channels)).astype(dtype))
        if deformable:
            # zero init: the layer behaves rigidly until offsets are learned
            self.offset_weights = Param(np.zeros((k, in_channels, 3 * k), dtype=dtype))
        self._ctx = []

    def own_params(self):
        out = [("weights", self.weights)]
        if self.deformable:
            out.append(("offset_weights", self.offset_weights))
        return out

    def forward(self, q_pts: np.ndarray, s_pts: np.ndarray,
                neighbor_idx: np.ndarray, s_feats: np.ndarray) -> np.ndarray:
        """Args: query points (M, 3), support points (N, 3), neighbour table
        (M, H) with sentinel N, support features (N, C_in). Returns (M, C_out)."""
        if s_feats.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected {self.in_channels} input channels, got {s_feats.shape[1]}")
        if len(s_feats) != len(s_pts):
            raise ShapeError("support features and points disagree in length")

        n = len(s_pts)
        valid = neighbor_idx < n                                  # (M, H)
        idx = np.where(valid, neighbor_idx, 0)
        rel = s_pts[idx] - q_pts[:, None, :]                      # (M, H, 3)
        nf = np.where(valid[..., None], s_feats[idx], 0.0)        # (M, H, C_in)

        kp = self.disposition.points.astype(q_pts.dtype)
        offsets = None
        off_ctx = None
        if self.deformable:
            offsets, off_ctx = self._offset_forward(rel, valid, nf, kp)
            kp_eff = kp[None] + offsets                           # (M, K, 3)
            diff = rel[:, :, None, :] - kp_eff[:, None, :, :]     # (M, H, K, 3)
        else:
            diff = rel[:, :, None, :] - kp[None, None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))                       # (M, H, K)
        h = np.maximum(0.0, 1.0 - dist / self.disposition.influence)
        h[~valid] = 0.0

        wf = np.einsum("mhk,mhc->mkc", h, nf)                     # (M, K, C_in)
        out = np.einsum("mkc,kcd->md", wf, self.weights.value)

        if _caching:
            self._ctx.append(dict(valid=valid, idx=idx, rel=rel, nf=nf, h=h,
                                  wf=wf, dist=dist, n=n, off_ctx=off_ctx,
                                  offsets=offsets,
                                  diff=diff if self.deformable else None))
        return out

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        """Accumulates weight gradients; returns gradient w.r.t. support features."""
        if not self._ctx:
            raise StateError("KPConv.backward before forward")
        c = self._ctx.pop()

        d_wf = np.einsum("md,kcd->mkc", d_out, self.weights.value)
        self.weights.grad += np.einsum("mkc,md->kcd", c["wf"], d_out)

        d_h = np.einsum("mkc,mhc->mhk", d_wf, c["nf"])
        d_nf = np.einsum("mkc,mhk->mhc", d_wf, c["h"])
        d_s_feats = np.zeros((c["n"], self.in_channels), dtype=d_out.dtype)

        if self.deformable:
            # gradient of the linear influence w.r.t. the effective kernel
            # point positions, active where h > 0 and the distance is regular
            active = (c["h"] > 0.0) & (c["dist"] > 1e-30)
            g = np.where(active, -d_h / self.disposition.influence / np.where(
                active, c["dist"], 1.0), 0.0)                     # (M, H, K)
            # d_diff = g * diff; d_kp_eff = -sum_h d_diff
            d_kp = -np.einsum("mhk,mhkd->mkd", g, c["diff"])
            d_off_flat = d_kp.reshape(len(d_kp), -1)              # (M, 3K)
            d_nf += self._offset_backward(d_off_flat, c["off_ctx"])

        np.add.at(d_s_feats, c["idx"][c["valid"]], d_nf[c["valid"]])
        return d_s_feats

    # rigid sub-convolution that predicts the per-query kernel offsets
    def _offset_forward(self, rel, valid, nf, kp):
        diff = rel[:, :, None, :] - kp[None, None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        h = np.maximum(0.0, 1.0 - dist / self.disposition.influence)
        h[~valid] = 0.0
        wf = np.einsum("mhk,mhc->mkc", h, nf)
        flat = np.einsum("mkc,kcd->md", wf, self.offset_weights.value)  # (M, 3K)
        k = len(kp)
        ctx = dict(h=h, wf=wf)
        return flat.reshape(len(flat), k, 3), ctx

    def _offset_backward(self, d_flat, ctx):
        """Returns the offset path's gradient w.r.t. the gathered neighbour
        features (M, H, C_in); the caller scatters it into support features."""
        d_wf = np.einsum("md,kcd->mkc", d_flat, self.offset_weights.value)
        self.offset_weights.grad += np.einsum("mkc,md->kcd", ctx["wf"], d_flat)
        return np.einsum("mkc,mhk->mhc", d_wf, ctx["h"])


class Linear(Module):
    """Row-wise fully connected layer, y = x W (+ b)."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        std = np.sqrt(2.0 / in_features)
        self.weight = Param(rng.normal(0.0, std, (in_features, out_features)).astype(dtype))
        self.bias = Param(np.zeros(out_features, dtype=dtype)) if bias else None
        self._x = []

    def own_params(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"expected {self.weight.shape[0]} features, got {x.shape[1]}")
        if _caching:
            self._x.append(x)
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, d_y: np.ndarray) -> np.ndarray:
        if not self._x:
            raise StateError("Linear.backward before forward")
        x = self._x.pop()
        self.weight.grad += x.T @ d_y
        if self.bias is not None:
            self.bias.grad += d_y.sum(axis=0)
        return d_y @ self.weight.value.T


class BatchlessNorm(Module):
    """Per-feature normalisation with running statistics and learned affine.

    Normalisation always uses the buffered statistics, so the transform seen
    by the gradient is an exact affine map; when ``update_stats`` is set the
    buffers move towards the statistics of the current input *after* the
    output is computed (one-step lag, irrelevant at convergence). This keeps
    tiny desk-scale batches out of the normalisation math.
    """

    def __init__(self, num_features: int, momentum: float = 0.9,
                 eps: float = 1e-5, dtype=np.float64):
        self.gamma = Param(np.ones(num_features, dtype=dtype))
        self.beta = Param(np.zeros(num_features, dtype=dtype))
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._ctx = []

    def own_params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def own_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x: np.ndarray, update_stats: bool = False) -> np.ndarray:
        scale = 1.0 / np.sqrt(self.running_var + self.eps)
        x_hat = (x - self.running_mean) * scale
        y = self.gamma.value * x_hat + self.beta.value
        if _caching:
            self._ctx.append((x_hat, scale))
        if update_stats and len(x):
            m = self.momentum
            self.running_mean[...] = m * self.running_mean + (1 - m) * x.mean(axis=0)
            self.running_var[...] = m * self.running_var + (1 - m) * x.var(axis=0)
        return y

    def backward(self, d_y: np.ndarray) -> np.ndarray:
        if not self._ctx:
            raise StateError("BatchlessNorm.backward before forward")
        x_hat, scale = self._ctx.pop()
        self.gamma.grad += (d_y * x_hat).sum(axis=0)
        self.beta.grad += d_y.sum(axis=0)
        return d_y * (self.gamma.value * scale)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.1):
        self.slope = slope
        self._mask = []
        # optional probe: when set to a list, forward appends the per-channel
        # minimum |input|, which is the distance to the activation kink
        self.monitor = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.monitor is not None and x.size:
            self.monitor.append(np.abs(x).min(axis=0))
        mask = x > 0
        if _caching:
            self._mask.append(mask)
        return np.where(mask, x, self.slope * x)

    def backward(self, d_y: np.ndarray) -> np.ndarray:
        if not self._mask:
            raise StateError("LeakyReLU.backward before forward")
        mask = self._mask.pop()
        return np.where(mask, d_y, self.slope * d_y)


class ConvBlock(Module):
    """KPConv -> norm -> leaky ReLU."""

    def __init__(self, in_channels, out_channels, disposition, deformable,
                 rng, dtype=np.float64, momentum=0.9, slope=0.1):
        self.conv = KPConv(in_channels, out_channels, disposition, deformable, rng, dtype)
        self.norm = BatchlessNorm(out_channels, momentum=momentum, dtype=dtype)
        self.act = LeakyReLU(slope)

    def child_modules(self):
        return [("conv", self.conv), ("norm", self.norm), ("act", self.act)]

    def forward(self, q_pts, s_pts, neighbor_idx, s_feats, update_stats=False):
        x = self.conv.forward(q_pts, s_pts, neighbor_idx, s_feats)
        x = self.norm.forward(x, update_stats=update_stats)
        return self.act.forward(x)

    def backward(self, d_y):
        d = self.act.backward(d_y)
        d = self.norm.backward(d)
        return self.conv.backward(d)


class UnaryBlock(Module):
    """Pointwise linear -> norm -> leaky ReLU (decoder stages)."""

    def __init__(self, in_features, out_features, rng, dtype=np.float64,
                 momentum=0.9, slope=0.1):
        self.linear = Linear(in_features, out_features, rng, bias=False, dtype=dtype)
        self.norm = BatchlessNorm(out_features, momentum=momentum, dtype=dtype)
        self.act = LeakyReLU(slope)

    def child_modules(self):
        return [("linear", self.linear), ("norm", self.norm), ("act", self.act)]

    def forward(self, x, update_stats=False):
        x = self.linear.forward(x)
        x = self.norm.forward(x, update_stats=update_stats)
        return self.act.forward(x)

    def backward(self, d_y):
        d = self.act.backward(d_y)
        d = self.norm.backward(d)
        return self.linear.backward(d)
