"""The two training stages.

Stage 1 fits encoder plus decoder with per-point cross entropy on labelled
keyframe clouds. Stage 2 fits the embedding head with the lazy quadruplet
loss over mined tuples; by default the encoder is frozen and its outputs are
computed once per cloud and reused, so no encoder gradient is ever formed.
Setting ``freeze_encoder=False`` trains encoder and embedding jointly from
whatever state the model is in, which is how the no-pretraining variant runs.

Checkpoints are written at epoch boundaries and carry model tensors,
normalisation buffers and optimizer state, so a resumed run replays the
remaining epochs bit for bit like an uninterrupted one.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, EmptyInput, NumericsError
from .geometry import RgbPointCloud
from .kpconv import no_grad
from .losses import cross_entropy_loss, lazy_quadruplet_loss, point_accuracy
from .mining import (MiningConfig, MiningIndex, mine_tuple, usable_anchors)
from .errors import InsufficientNegatives, InsufficientPositives
from .optim import Adam, SgdMomentum
from .pipeline import PlaceRecognitionModel, PreparedCloud


@dataclass
class Stage1Config:
    epochs: int = 12
    steps_per_epoch: Optional[int] = None    # None: one pass over the clouds
    lr: float = 0.01
    momentum: float = 0.98
    offset_lr_scale: float = 0.1             # deformable offset heads run slower
    lr_final_factor: float = 0.1             # lr decays to this fraction by the end
    ignore_label: Optional[int] = None
    stop_after: Optional[int] = None         # pause at this epoch boundary (for resume)
    seed: int = 0


@dataclass
class Stage2Config:
    epochs: int = 10
    tuples_per_epoch: Optional[int] = None   # None: every usable anchor once
    lr: float = 1e-4
    weight_decay: float = 1e-3
    alpha: float = 0.5
    beta: float = 0.2
    freeze_encoder: bool = True
    mining: MiningConfig = field(default_factory=MiningConfig)
    stop_after: Optional[int] = None         # pause at this epoch boundary (for resume)
    seed: int = 0


@dataclass
class TrainResult:
    stage: int
    epochs_run: int
    final_loss: float
    final_metric: float          # stage 1: training accuracy; stage 2: active-tuple rate
    checkpoint: str
    metrics_csv: str


def _metrics_writer(path: Path, header: List[str], resume: bool):
    """Fresh runs truncate any stale metrics file; resumed runs append, so
    the finished file matches what an uninterrupted run would have written."""
    new = not (resume and path.exists())
    f = open(path, "w" if new else "a", newline="")
    wr = csv.writer(f)
    if new:
        wr.writerow(header)
    return f, wr


def _nan_abort(model, opt, out_dir: Path, stage: int, epoch: int, step: int,
               value: float):
    """Dump everything that led to the non-finite loss, then give up."""
    path = out_dir / f"abort_stage{stage}.cgck"
    manifest = {"model": model.cfg.to_manifest(), "stage": stage,
                "abort": {"epoch": epoch, "global_step": step,
                          "loss": repr(value)}}
    tensors = dict(model.state_tensors())
    tensors.update(opt.state_tensors())
    save_checkpoint(path, manifest, tensors)
    raise NumericsError(
        f"stage {stage} loss became {value!r} at epoch {epoch}, step {step}; "
        f"state written to {path}")


def _save_epoch_checkpoint(path: Path, model, opt, stage: int, epoch: int,
                           global_step: int, train_cfg) -> None:
    cfg_dict = asdict(train_cfg)
    if "mining" in cfg_dict:
        cfg_dict["mining"] = asdict(train_cfg.mining)
    manifest = {"model": model.cfg.to_manifest(), "stage": stage,
                "train_state": {"epoch": epoch, "global_step": global_step},
                "train_config": cfg_dict}
    tensors = dict(model.state_tensors())
    tensors.update(opt.state_tensors())
    save_checkpoint(path, manifest, tensors)


def _try_resume(path: Path, model, opt):
    """Returns (next_epoch, global_step) to continue from, or (0, 0)."""
    if not path.exists():
        return 0, 0
    manifest, tensors = load_checkpoint(path)
    model.load_state(tensors)
    opt.load_state(tensors)
    state = manifest["train_state"]
    return state["epoch"] + 1, state["global_step"]


def train_stage1(model: PlaceRecognitionModel, clouds: Sequence[RgbPointCloud],
                 cfg: Stage1Config, out_dir, resume: bool = False) -> TrainResult:
    """Semantic segmentation training over labelled keyframe clouds."""
    if not clouds:
        raise EmptyInput("no training clouds")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "stage1.cgck"
    metrics_path = out_dir / "metrics_stage1.csv"

    prepared = [model.prepare(c) for c in clouds]
    labels = []
    for p in prepared:
        if p.cloud0.labels is None:
            raise ConfigError("stage 1 needs labelled clouds")
        labels.append(p.cloud0.labels)

    params = (model.encoder.named_params("encoder")
              + model.decoder.named_params("decoder"))
    opt = SgdMomentum(params, cfg.lr, cfg.momentum,
                      lr_scales={"offset_weights": cfg.offset_lr_scale})
    start_epoch, global_step = (0, 0)
    if resume:
        start_epoch, global_step = _try_resume(ckpt_path, model, opt)

    steps = len(clouds) if cfg.steps_per_epoch is None \
        else min(cfg.steps_per_epoch, len(clouds))
    total_steps = max(1, cfg.epochs * steps)

    end_epoch = cfg.epochs if cfg.stop_after is None \
        else min(cfg.epochs, cfg.stop_after)
    f, wr = _metrics_writer(metrics_path,
                            ["epoch", "loss", "accuracy", "lr"], resume)
    last_loss, last_acc = float("nan"), float("nan")
    try:
        for epoch in range(start_epoch, end_epoch):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1, epoch)))
            order = rng.permutation(len(clouds))[:steps]
            losses, accs = [], []
            for i in order:
                opt.lr = cfg.lr * cfg.lr_final_factor ** (
                    global_step / max(1, total_steps - 1))
                model.zero_grad()
                enc = model.encode(prepared[i], update_stats=True)
                logits = model.decode(prepared[i], enc, update_stats=True)
                loss, d_logits = cross_entropy_loss(logits, labels[i],
                                                    cfg.ignore_label)
                if not np.isfinite(loss):
                    _nan_abort(model, opt, out_dir, 1, epoch, global_step, loss)
                losses.append(loss)
                accs.append(point_accuracy(logits, labels[i], cfg.ignore_label))
                d_enc = model.decoder.backward(prepared[i], d_logits)
                model.encoder.backward(d_enc)
                opt.step()
                global_step += 1
            last_loss = float(np.mean(losses))
            last_acc = float(np.mean(accs))
            wr.writerow([epoch, f"{last_loss:.6f}", f"{last_acc:.6f}",
                         f"{opt.lr:.8f}"])
            f.flush()
            _save_epoch_checkpoint(ckpt_path, model, opt, 1, epoch,
                                   global_step, cfg)
    finally:
        f.close()
    return TrainResult(1, end_epoch - start_epoch, last_loss, last_acc,
                       str(ckpt_path), str(metrics_path))


def evaluate_segmentation(model: PlaceRecognitionModel,
                          clouds: Sequence[RgbPointCloud],
                          ignore_label: Optional[int] = None) -> float:
    """Point accuracy over all clouds, inference mode."""
    total, correct = 0, 0
    for c in clouds:
        prep = model.prepare(c)
        if prep.cloud0.labels is None:
            raise ConfigError("evaluation needs labelled clouds")
        with no_grad():
            logits = model.decode(prep, model.encode(prep))
        labels = prep.cloud0.labels
        mask = np.ones(len(labels), dtype=bool)
        if ignore_label is not None:
            mask = labels != ignore_label
        total += int(mask.sum())
        correct += int((logits.argmax(axis=1)[mask] == labels[mask]).sum())
    if total == 0:
        raise EmptyInput("no labelled points to evaluate")
    return correct / total


def train_stage2(model: PlaceRecognitionModel, clouds: Sequence[RgbPointCloud],
                 cfg: Stage2Config, out_dir, resume: bool = False) -> TrainResult:
    """Metric learning for the embedding head over mined quadruplet tuples."""
    if not clouds:
        raise EmptyInput("no training clouds")
    cfg.mining.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "stage2.cgck"
    metrics_path = out_dir / "metrics_stage2.csv"

    index = MiningIndex([c.scene_id for c in clouds],
                        np.stack([c.centroid for c in clouds]))
    anchors = usable_anchors(index, cfg.mining)
    if not anchors:
        raise EmptyInput("no anchor has enough positives and negatives; "
                         "check the mining thresholds against the trajectories")

    prepared = [model.prepare(c) for c in clouds]
    if cfg.freeze_encoder:
        # frozen encoder: one inference pass per cloud, reused every epoch;
        # encoder gradients are never formed
        with no_grad():
            enc_cache = [model.encode(p) for p in prepared]
        params = model.embedding.named_params("embedding")
    else:
        enc_cache = None
        params = (model.encoder.named_params("encoder")
                  + model.embedding.named_params("embedding"))
    opt = Adam(params, cfg.lr, weight_decay=cfg.weight_decay)
    start_epoch, global_step = (0, 0)
    if resume:
        start_epoch, global_step = _try_resume(ckpt_path, model, opt)
        if cfg.freeze_encoder:
            with no_grad():
                enc_cache = [model.encode(p) for p in prepared]

    end_epoch = cfg.epochs if cfg.stop_after is None \
        else min(cfg.epochs, cfg.stop_after)
    f, wr = _metrics_writer(metrics_path,
                            ["epoch", "loss", "active_rate", "skipped", "lr"],
                            resume)
    last_loss, last_active = float("nan"), float("nan")
    try:
        for epoch in range(start_epoch, end_epoch):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2, epoch)))
            order = rng.permutation(np.asarray(anchors, dtype=np.int64))
            if cfg.tuples_per_epoch is not None:
                order = order[:cfg.tuples_per_epoch]
            losses, active, skipped = [], 0, 0
            for anchor in order:
                try:
                    t = mine_tuple(index, int(anchor), cfg.mining, rng)
                except (InsufficientPositives, InsufficientNegatives):
                    skipped += 1
                    continue
                members = [t.anchor, *t.positives.tolist(),
                           *t.negatives.tolist(), t.extra_negative]
                model.zero_grad()
                vecs = []
                for j in members:
                    if cfg.freeze_encoder:
                        vecs.append(model.embed(enc_cache[j]))
                    else:
                        vecs.append(model.embed(model.encode(prepared[j])))
                m = cfg.mining.num_positives
                n = cfg.mining.num_negatives
                res = lazy_quadruplet_loss(
                    vecs[0], np.stack(vecs[1:1 + m]),
                    np.stack(vecs[1 + m:1 + m + n]), vecs[-1],
                    cfg.alpha, cfg.beta)
                if not np.isfinite(res.loss):
                    _nan_abort(model, opt, out_dir, 2, epoch, global_step,
                               res.loss)
                losses.append(res.loss)
                if res.loss > 0:
                    active += 1
                d_vecs = [res.d_anchor, *res.d_positives, *res.d_negatives,
                          res.d_extra]
                for pos in reversed(range(len(members))):
                    d_enc = model.embedding.backward(
                        d_vecs[pos].astype(model.cfg.np_dtype))
                    if not cfg.freeze_encoder:
                        model.encoder.backward(d_enc)
                opt.step()
                global_step += 1
            last_loss = float(np.mean(losses)) if losses else 0.0
            last_active = active / max(1, len(losses))
            wr.writerow([epoch, f"{last_loss:.6f}", f"{last_active:.6f}",
                         skipped, f"{opt.lr:.8f}"])
            f.flush()
            _save_epoch_checkpoint(ckpt_path, model, opt, 2, epoch,
                                   global_step, cfg)
    finally:
        f.close()
    return TrainResult(2, end_epoch - start_epoch, last_loss, last_active,
                       str(ckpt_path), str(metrics_path))


def describe_all(model: PlaceRecognitionModel,
                 clouds: Sequence[RgbPointCloud],
                 prepared: Optional[Sequence[PreparedCloud]] = None):
    """Descriptors for a scan-ordered cloud list, inference mode."""
    if prepared is None:
        prepared = [model.prepare(c) for c in clouds]
    return [model.describe_prepared(p) for p in prepared]
