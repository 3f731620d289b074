"""Central finite-difference verification of every analytic gradient.

Each check builds a small double-precision fixture, runs one forward and
backward pass, then compares a sample of parameter (and input) gradients
against (f(x+h) - f(x-h)) / 2h. The relative error uses
|a - n| / max(1e-6, |a| + |n|) so tiny gradients do not divide by nothing.

Fixture seeds are fixed: gradients are deterministic functions and the
comparison is only meaningful at a reproducible, kink-free operating point
(the activations are piecewise linear, and a finite step across a kink says
nothing about the derivative at the point itself).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .geometry import RgbPointCloud
from .graph import build_layer_graph
from .kpconv import (BatchlessNorm, ConvBlock, KPConv, Linear, Param,
                     UnaryBlock, init_kernel_disposition, no_grad)
from .losses import cross_entropy_loss, lazy_quadruplet_loss
from .pipeline import ModelConfig, PlaceRecognitionModel, VladAggregator

STEP = 1e-6
TOL = 1e-4
KINK_MARGIN = 2e-4    # required |pre-activation| before differencing


@dataclass
class CheckResult:
    name: str
    entries: int
    worst_rel: float
    worst_at: str
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.worst_rel < TOL


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(1e-6, abs(a) + abs(n))


def fd_check(name: str, loss_fn: Callable[[], float],
             targets: Sequence[Tuple[str, np.ndarray, np.ndarray]],
             rng: np.random.Generator, samples: int = 6,
             h: float = STEP) -> CheckResult:
    """Compare analytic gradients against central differences.

    ``targets`` lists (label, value array, grad array) pairs; the values are
    perturbed in place and restored. ``loss_fn`` must recompute the scalar
    loss from current values without touching the stored gradients.

    Two kinds of sample are excluded (and tallied in ``skipped``) because
    the difference quotient is not a valid oracle there:

    * Corner straddles. The network is piecewise smooth (activation
      corners, the compact support boundary of the kernel correlation,
      hinge losses). When [x-h, x+h] contains a corner the central estimate
      lands between the one-sided slopes, off by exactly half their
      disagreement, so the sample is dropped when that disagreement
      accounts for the analytic-vs-numeric discrepancy. A wrong analytic
      gradient is still caught: away from corners the sides agree and no
      allowance is granted.
    * Unresolvable entries. The quotient carries rounding noise of order
      eps * |loss| / h; a sample that fails the tolerance while its whole
      discrepancy sits inside that noise says nothing about the analytic
      side, so it is dropped rather than reported as a mismatch. Samples
      that pass are always counted, and a discrepancy larger than the
      noise bound is a real failure.
    """
    worst, worst_at, entries, skipped = 0.0, "", 0, 0
    l0 = loss_fn()
    for label, value, grad in targets:
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        k = min(samples, flat.size)
        for idx in rng.choice(flat.size, size=k, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_fn()
            flat[idx] = orig - h
            lm = loss_fn()
            flat[idx] = orig
            left = (l0 - lm) / h
            right = (lp - l0) / h
            num = (lp - lm) / (2 * h)
            noise = 2 * np.finfo(np.float64).eps * max(abs(l0), abs(lp), abs(lm)) / h
            disc = abs(num - gflat[idx])
            r = _rel(gflat[idx], num)
            if r >= TOL and disc <= noise:
                skipped += 1
                continue
            if _rel(left, right) > 1e-4 and disc <= 0.75 * abs(right - left):
                skipped += 1
                continue
            entries += 1
            if r > worst:
                worst, worst_at = r, f"{label}[{idx}]"
    if entries == 0:
        raise RuntimeError(f"{name}: no sample was resolvable at step {h}")
    return CheckResult(name, entries, worst, worst_at, skipped)


def clear_kinks(blocks, forward_fn: Callable[[], None],
                margin: float = KINK_MARGIN, rounds: int = 60) -> None:
    """Shift the norm offsets of the given blocks until no pre-activation is
    within ``margin`` of its LeakyReLU kink.

    The activations are piecewise linear; a central difference that steps
    across a corner measures neither side's slope, so a gradient check is
    only meaningful at an operating point with some distance to every
    corner. Shifting a norm's beta moves a whole channel's pre-activations
    rigidly, so a few small nudges clear the margin without changing what is
    being verified.
    """
    pairs = [(blk.act, blk.norm) for blk in blocks]
    try:
        for _ in range(rounds):
            for act, _ in pairs:
                act.monitor = []
            with no_grad():
                forward_fn()
            done = True
            for act, norm in pairs:
                if not act.monitor:
                    continue
                mins = np.minimum.reduce(act.monitor)
                bad = mins < margin
                if bad.any():
                    done = False
                    norm.beta.value[bad] += 4 * margin
            if done:
                return
        raise RuntimeError("no kink-free operating point found")
    finally:
        for act, _ in pairs:
            act.monitor = None


def _cloud_fixture(rng, n=50, extent=0.9):
    pts = rng.uniform(0, extent, (n, 3))
    cols = rng.uniform(0, 1, (n, 3))
    labels = rng.integers(0, 6, n).astype(np.uint16)
    return RgbPointCloud(pts, cols, labels, "fixture")


def _param_targets(module, prefix="") -> List[Tuple[str, np.ndarray, np.ndarray]]:
    return [(name, p.value, p.grad) for name, p in module.named_params(prefix)]


def check_kpconv(deformable: bool, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    disp = init_kernel_disposition(15, 0.5, seed=1)
    conv = KPConv(4, 5, disp, deformable, rng, dtype=np.float64)
    n_q, n_s, width = 30, 40, 8
    q = rng.uniform(0, 1, (n_q, 3))
    s = rng.uniform(0, 1, (n_s, 3))
    idx = rng.integers(0, n_s + 1, (n_q, width))     # includes sentinel rows
    feats = rng.normal(size=(n_s, 4))
    w_out = rng.normal(size=(n_q, 5))

    def loss():
        with no_grad():
            return float((conv.forward(q, s, idx, feats) * w_out).sum())

    conv.zero_grad()
    out = conv.forward(q, s, idx, feats)
    d_feats = conv.backward(w_out)
    targets = _param_targets(conv) + [("s_feats", feats, d_feats)]
    name = "kpconv-deformable" if deformable else "kpconv-rigid"
    return fd_check(name, loss, targets, np.random.default_rng(seed + 100))


def check_linear(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    lin = Linear(7, 4, rng, bias=True, dtype=np.float64)
    x = rng.normal(size=(11, 7))
    w_out = rng.normal(size=(11, 4))

    def loss():
        with no_grad():
            return float((lin.forward(x) * w_out).sum())

    lin.zero_grad()
    lin.forward(x)
    d_x = lin.backward(w_out)
    return fd_check("linear", loss, _param_targets(lin) + [("x", x, d_x)],
                    np.random.default_rng(seed + 100))


def check_norm(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    norm = BatchlessNorm(6, dtype=np.float64)
    norm.running_mean[...] = rng.normal(size=6) * 0.4
    norm.running_var[...] = rng.uniform(0.5, 2.0, 6)
    x = rng.normal(size=(9, 6))
    w_out = rng.normal(size=(9, 6))

    def loss():
        with no_grad():
            return float((norm.forward(x) * w_out).sum())

    norm.zero_grad()
    norm.forward(x)
    d_x = norm.backward(w_out)
    return fd_check("batchless-norm", loss,
                    _param_targets(norm) + [("x", x, d_x)],
                    np.random.default_rng(seed + 100))


def check_conv_block(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    disp = init_kernel_disposition(15, 0.5, seed=1)
    blk = ConvBlock(3, 4, disp, True, rng, dtype=np.float64)
    n_q, n_s = 25, 35
    q = rng.uniform(0, 1, (n_q, 3))
    s = rng.uniform(0, 1, (n_s, 3))
    idx = rng.integers(0, n_s + 1, (n_q, 9))
    feats = rng.normal(size=(n_s, 3))
    w_out = rng.normal(size=(n_q, 4))

    def loss():
        with no_grad():
            return float((blk.forward(q, s, idx, feats) * w_out).sum())

    clear_kinks([blk], lambda: blk.forward(q, s, idx, feats))
    blk.zero_grad()
    blk.forward(q, s, idx, feats)
    d_feats = blk.backward(w_out)
    return fd_check("conv-block", loss,
                    _param_targets(blk) + [("s_feats", feats, d_feats)],
                    np.random.default_rng(seed + 100))


def check_unary_block(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    blk = UnaryBlock(6, 5, rng, dtype=np.float64)
    x = rng.normal(size=(13, 6))
    w_out = rng.normal(size=(13, 5))

    def loss():
        with no_grad():
            return float((blk.forward(x) * w_out).sum())

    clear_kinks([blk], lambda: blk.forward(x))
    blk.zero_grad()
    blk.forward(x)
    d_x = blk.backward(w_out)
    return fd_check("unary-block", loss,
                    _param_targets(blk) + [("x", x, d_x)],
                    np.random.default_rng(seed + 100))


def check_vlad(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    vlad = VladAggregator(5, 7, rng, dtype=np.float64)
    x = rng.normal(size=(40, 7))
    w_out = rng.normal(size=(5 * 7,))

    def loss():
        with no_grad():
            return float((vlad.forward(x) * w_out).sum())

    vlad.zero_grad()
    vlad.forward(x)
    d_x = vlad.backward(w_out)
    return fd_check("vlad", loss, _param_targets(vlad) + [("x", x, d_x)],
                    np.random.default_rng(seed + 100))


def _toy_model(seed: int) -> Tuple[PlaceRecognitionModel, "PreparedCloud"]:
    rng = np.random.default_rng(seed)
    cloud = _cloud_fixture(rng)
    cfg = ModelConfig(num_classes=6, channels=(4, 5, 6, 7, 8), stretch_dim=6,
                      vlad_clusters=4, descriptor_dim=8, dtype="float64",
                      seed=seed, first_subsampling_dl=0.09)
    model = PlaceRecognitionModel(cfg)
    return model, model.prepare(cloud)


def check_describe_path(seed: int = 0) -> CheckResult:
    """Encoder plus embedding head end to end.

    The projection weights are kept small so the scalar stays well under 1;
    the difference quotient's rounding noise scales with the loss magnitude
    and a small scalar keeps every sampled entry resolvable at the fixed
    step (see fd_check).
    """
    model, prep = _toy_model(seed)
    rng = np.random.default_rng(seed + 50)
    w_out = rng.normal(size=model.cfg.descriptor_dim) * 0.05

    def loss():
        with no_grad():
            return float((model.embed(model.encode(prep)) * w_out).sum())

    clear_kinks([b for _, b in model.encoder.blocks],
                lambda: model.encode(prep))
    model.zero_grad()
    model.embed(model.encode(prep))
    d_enc = model.embedding.backward(w_out)
    model.encoder.backward(d_enc)
    targets = (_param_targets(model.encoder, "encoder")
               + _param_targets(model.embedding, "embedding"))
    return fd_check("describe-path", loss, targets,
                    np.random.default_rng(seed + 100), samples=3)


def check_segmentation_path(seed: int = 0) -> CheckResult:
    """Encoder plus decoder through the cross-entropy loss."""
    model, prep = _toy_model(seed)
    labels = prep.cloud0.labels

    def loss():
        with no_grad():
            logits = model.decode(prep, model.encode(prep))
        return cross_entropy_loss(logits, labels)[0]

    clear_kinks([b for _, b in model.encoder.blocks]
                + [b for _, b in model.decoder.stages],
                lambda: model.decode(prep, model.encode(prep)))
    model.zero_grad()
    logits = model.decode(prep, model.encode(prep))
    _, d_logits = cross_entropy_loss(logits, labels)
    d_enc = model.decoder.backward(prep, d_logits)
    model.encoder.backward(d_enc)
    targets = (_param_targets(model.encoder, "encoder")
               + _param_targets(model.decoder, "decoder"))
    return fd_check("segmentation-path", loss, targets,
                    np.random.default_rng(seed + 100), samples=3)


def check_cross_entropy(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(15, 5))
    labels = rng.integers(0, 5, 15)

    def loss():
        return cross_entropy_loss(logits, labels)[0]

    _, d = cross_entropy_loss(logits, labels)
    return fd_check("cross-entropy", loss, [("logits", logits, d)],
                    np.random.default_rng(seed + 100), samples=20)


def check_quadruplet(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=6)
    pos = rng.normal(size=(2, 6))
    neg = rng.normal(size=(4, 6)) * 0.3
    extra = rng.normal(size=6) * 0.3

    def loss():
        return lazy_quadruplet_loss(a, pos, neg, extra, 0.5, 0.2).loss

    r = lazy_quadruplet_loss(a, pos, neg, extra, 0.5, 0.2)
    targets = [("anchor", a, r.d_anchor), ("positives", pos, r.d_positives),
               ("negatives", neg, r.d_negatives), ("extra", extra, r.d_extra)]
    return fd_check("lazy-quadruplet", loss, targets,
                    np.random.default_rng(seed + 100), samples=6)


ALL_CHECKS: List[Callable[[], CheckResult]] = [
    lambda: check_linear(),
    lambda: check_norm(),
    lambda: check_kpconv(False),
    lambda: check_kpconv(True),
    lambda: check_conv_block(),
    lambda: check_unary_block(),
    lambda: check_vlad(),
    lambda: check_describe_path(),
    lambda: check_segmentation_path(),
    lambda: check_cross_entropy(),
    lambda: check_quadruplet(),
]


def run_all() -> Tuple[List[CheckResult], float]:
    t0 = time.time()
    results = [fn() for fn in ALL_CHECKS]
    return results, time.time() - t0
