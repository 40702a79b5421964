"""Masked photon-location cross-entropy, AdamW and the training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import model as M
from .checkpoint import save_checkpoint
from .core import BitVolume, RandomSource, Shape3, VolumeError
from .sampler import SamplerConfig, draw_crop, sample_arrays
from .stats import thin_array

log = logging.getLogger(__name__)

VAL_STREAM = 0x7A1
TRAIN_STREAM = 0x7EA
FIXED_SPLIT_STREAM = 0xF1C


class NonFiniteLossError(RuntimeError):
    def __init__(self, msg, state=None, checkpoint=None):
        super().__init__(msg)
        self.state = state
        self.checkpoint = checkpoint


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, BitVolume):
        x = x.to_array()
    if not isinstance(x, torch.Tensor):
        x = torch.from_numpy(np.asarray(x))
    x = x.to(torch.float64)
    return x.reshape(like.shape) if x.numel() == like.numel() else x


def masked_cross_entropy(logits: torch.Tensor, target, mask) -> tuple[float, torch.Tensor]:
    """Photon-location cross-entropy over the voxels the mask leaves open.

    Every sample in the batch gets its own softmax, taken over the voxels of
    that sample where ``mask`` is 1 (with a mask of ones: all of its voxels).
    With weights ``w = mask * target`` and ``W = sum(w)`` the loss is
    ``-sum(w * log_softmax_mask(logits))`` and its gradient with respect to
    the logits is ``W * softmax_mask(logits) - w``, which is exactly zero at
    masked voxels. Both are evaluated in float64; the gradient is returned in
    the logits' dtype.

    A target photon never sits where the input has one, so weighting the
    target alone would leave the loss unchanged. Dropping masked voxels from
    the normalization is what stops the network from learning to predict
    darkness under every input photon.
    """
    logits = torch.as_tensor(logits)
    tgt, msk = _as_tensor(target, logits), _as_tensor(mask, logits)
    if tgt.shape != logits.shape or msk.shape != logits.shape:
        raise VolumeError(
            f"shape mismatch: logits {tuple(logits.shape)}, target {tuple(tgt.shape)}, "
            f"mask {tuple(msk.shape)}"
        )
    b = logits.shape[0] if logits.ndim == 5 else 1
    lg = logits.detach().to(torch.float64).reshape(b, -1)
    open_ = msk.reshape(b, -1) > 0
    # a sample with nothing open carries no weight; any softmax will do
    open_ |= ~open_.any(dim=1, keepdim=True)
    w = (tgt * msk).reshape(b, -1)
    lsm = torch.log_softmax(lg.masked_fill(~open_, -math.inf), dim=1)
    loss = -torch.where(w > 0, w * lsm, torch.zeros_like(lsm)).sum()
    W = w.sum(dim=1, keepdim=True)
    grad = W * torch.exp(lsm) - w
    return float(loss), grad.reshape(logits.shape).to(logits.dtype)


@dataclass
class OptimizerState:
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, torch.Tensor]) -> "OptimizerState":
        return cls({n: torch.zeros_like(p) for n, p in params.items()},
                   {n: torch.zeros_like(p) for n, p in params.items()})


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 3.2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
               opt: OptimizerState, cfg: AdamWConfig) -> OptimizerState:
    """One in-place AdamW update (decoupled weight decay, bias-corrected moments)."""
    opt.step += 1
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1**opt.step
    bc2 = 1.0 - b2**opt.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            p.mul_(1.0 - cfg.lr * cfg.weight_decay)
            m, v = opt.exp_avg[name], opt.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt_().add_(cfg.eps)
            p.addcdiv_(m, denom, value=-cfg.lr / bc1)
    return opt


@dataclass
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 100
    batch: int = 2
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    patience: int = 20
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    masked: bool = True
    fresh_splits: bool = True
    fixed_split_p: float = 0.5
    val_fraction: float = 0.1
    val_batches: int = 4
    keep: str = "best"
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        if isinstance(self.model, dict):
            self.model = M.ModelConfig(**self.model)
        self.betas = tuple(self.betas)
        for name in ("steps_per_epoch", "batch", "val_batches", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.patience < 1:
            raise ValueError("epochs must be >= 0 and patience >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.keep not in ("best", "last"):
            raise ValueError("keep must be 'best' or 'last'")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.model.check_input((self.sampler.crop.t, self.sampler.crop.h, self.sampler.crop.w))

    @classmethod
    def paper(cls) -> "TrainConfig":
        return cls(epochs=150, steps_per_epoch=250, batch=4, lr=3.2e-4, patience=20,
                   sampler=SamplerConfig.paper(), model=M.ModelConfig.paper())

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(self.lr, self.betas, self.eps, self.weight_decay)


@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: M.ModelState
    history: list[EpochRecord]
    step_losses: list[float]
    best_epoch: int
    final_model: M.ModelState

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["epoch", "step", "train_loss", "val_loss"])
            for r in self.history:
                wr.writerow([r.epoch, r.step, repr(r.train_loss), repr(r.val_loss)])


def split_frames(t: int, crop_t: int, val_fraction: float) -> tuple[int, bool]:
    """Frame index where the held-out tail starts, and whether one exists.

    The tail holds ``max(ceil(val_fraction * t), crop_t)`` frames; if the
    remaining head would be shorter than a crop, validation reuses the whole
    stack instead.
    """
    if val_fraction == 0:
        return t, False
    n_val = max(math.ceil(val_fraction * t), crop_t)
    if t - n_val < crop_t:
        return t, False
    return t - n_val, True


def fixed_split(data: np.ndarray, cfg: TrainConfig, rng: RandomSource):
    """The single (input, target) split reused by the fixed-pairs diagnostic.

    ``rng`` is the training stream handed to :class:`Batcher`.
    """
    return thin_array(data, cfg.fixed_split_p, rng.child(FIXED_SPLIT_STREAM).generator())


def training_stream(rng: RandomSource) -> RandomSource:
    return rng.child(TRAIN_STREAM)


class Batcher:
    """Produces training batches; sample ``(step, b)`` always uses the stream
    ``rng.child(step, b)`` whatever the number of workers."""

    def __init__(self, data: np.ndarray, cfg: TrainConfig, rng: RandomSource,
                 pool: Optional[ThreadPoolExecutor]):
        self.cfg = cfg
        self.rng = rng
        self.pool = pool
        if cfg.fresh_splits:
            self.inp_src, self.tar_src = data, None
        else:
            self.inp_src, self.tar_src = fixed_split(data, cfg, rng)

    def _one(self, step: int, b: int):
        gen = self.rng.child(step, b).generator()
        if self.tar_src is None:
            inp, tar, mask, _, _ = sample_arrays(self.inp_src, self.cfg.sampler, gen)
        else:
            c = draw_crop(Shape3.of(self.inp_src.shape), self.cfg.sampler.crop, gen)
            inp, tar = self.inp_src[c.slices()], self.tar_src[c.slices()]
            mask = 1 - inp
        if not self.cfg.masked:
            mask = np.ones_like(mask)
        return inp, tar, mask

    def batch(self, step: int):
        idx = range(self.cfg.batch)
        if self.pool is not None:
            items = list(self.pool.map(lambda b: self._one(step, b), idx))
        else:
            items = [self._one(step, b) for b in idx]
        stack = [torch.from_numpy(np.stack(a)[:, None].astype(np.float32)) for a in zip(*items)]
        return tuple(stack)


def _validation_set(val_data: np.ndarray, cfg: TrainConfig):
    rng = RandomSource(cfg.seed, (VAL_STREAM,))
    out = []
    for k in range(cfg.val_batches):
        inp, tar, mask, _, _ = sample_arrays(val_data, cfg.sampler, rng.child(k).generator())
        if not cfg.masked:
            mask = np.ones_like(mask)
        out.append(tuple(torch.from_numpy(a[None, None].astype(np.float32))
                         for a in (inp, tar, mask)))
    return out


def evaluate_loss(m: M.ModelState, triples) -> float:
    """Per-photon masked loss summed over ``triples`` (input, target, mask)."""
    total, photons = 0.0, 0.0
    for inp, tar, mask in triples:
        logits = M.forward(m, inp)
        loss, _ = masked_cross_entropy(logits, tar, mask)
        total += loss
        photons += float((tar * mask).sum())
    return total / photons if photons else 0.0


def train_loop(data: BitVolume, cfg: TrainConfig, rng: Optional[RandomSource] = None,
               checkpoint_dir=None, init_state: Optional[M.ModelState] = None) -> TrainResult:
    """Self-supervised training on one binary stack.

    Each step draws a fresh batch of split triples, runs forward, the masked
    loss (normalized per target photon), backward and AdamW. After every
    epoch the per-photon loss on fixed held-out triples is recorded; the best
    epoch's parameters are retained and training stops after ``patience``
    epochs without improvement.
    """
    rng = rng if rng is not None else RandomSource(cfg.seed)
    arr = data.to_array()
    crop = cfg.sampler.crop
    if any(c > d for c, d in zip(crop, data.shape)):
        raise VolumeError(f"crop {crop.as_tuple()} larger than data {data.shape.as_tuple()}")
    cut, held_out = split_frames(data.shape.t, crop.t, cfg.val_fraction)
    train_data = arr[:cut]
    val_data = arr[cut:] if held_out else arr

    with M.kernel_threads(1):
        state = init_state if init_state is not None else M.init(cfg.model, rng.child(0))
        history: list[EpochRecord] = []
        step_losses: list[float] = []
        if cfg.epochs == 0:
            return TrainResult(state, history, step_losses, -1, state)
        params = state.named_parameters()
        opt = OptimizerState.zeros_like(params)
        adam = cfg.adamw()
        val_set = _validation_set(val_data, cfg)
        best, best_epoch, best_params = math.inf, -1, None
        pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        batcher = Batcher(train_data, cfg, training_stream(rng), pool)
        step = 0
        try:
            for epoch in range(cfg.epochs):
                epoch_losses = []
                for _ in range(cfg.steps_per_epoch):
                    inp, tar, mask = batcher.batch(step)
                    logits, cache = M.forward(state, inp, train_mode=True)
                    loss, grad = masked_cross_entropy(logits, tar, mask)
                    photons = float((tar * mask).sum())
                    per_photon = loss / photons if photons else 0.0
                    if not math.isfinite(per_photon):
                        ck = None
                        if checkpoint_dir is not None:
                            ck = Path(checkpoint_dir) / "diagnostic.qck"
                            save_checkpoint(state, ck, step=step)
                        raise NonFiniteLossError(
                            f"non-finite loss at step {step}", state, ck)
                    if photons:
                        grads = M.backward(state, cache, grad / photons)
                        adamw_step(params, grads, opt, adam)
                    step_losses.append(per_photon)
                    epoch_losses.append(per_photon)
                    step += 1
                val = evaluate_loss(state, val_set)
                history.append(EpochRecord(epoch, step, float(np.mean(epoch_losses)), val))
                log.info("epoch %d step %d train %.6f val %.6f", epoch, step,
                         history[-1].train_loss, val)
                if val < best:
                    best, best_epoch = val, epoch
                    best_params = {n: p.detach().clone() for n, p in params.items()}
                    if checkpoint_dir is not None:
                        save_checkpoint(state, Path(checkpoint_dir) / "best.qck", step=step)
                elif epoch - best_epoch >= cfg.patience:
                    log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                    break
        finally:
            if pool is not None:
                pool.shutdown()

        final = state
        if cfg.keep == "best" and best_params is not None:
            kept = M.ModelState(state.config, copy.deepcopy(state.net), state.seed)
            with torch.no_grad():
                for n, p in kept.named_parameters().items():
                    p.copy_(best_params[n])
            state = kept
        return TrainResult(state, history, step_losses, best_epoch, final)
