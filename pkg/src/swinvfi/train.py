"""Training loop: Adam with cosine annealing over randomly cropped, augmented septuplets.

Every epoch draws its order, crops and flips from a generator seeded by
(seed, epoch), so a run resumed from an epoch checkpoint replays the same
batches as an uninterrupted one.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import network
from . import tensor as T
from .data import Augment, Dataset, sample_septuplet
from .evaluation import evaluate, model_predictor
from .losses import LossWeights, combine, loss_terms
from .network import ModelConfig, ModelParams

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("intensity", "stokes", "aolp", "dolp")


class DivergenceError(RuntimeError):
    """A non-finite loss or gradient; training stops and keeps the last good checkpoint."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    epochs: int = 20
    crop: int = 64  # mosaic pixels
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 1
    checkpoint_every: int = 1  # epochs
    augment: bool = True
    naive_flip: bool = False
    validate: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise T.ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1 or self.checkpoint_every < 1:
            raise T.ConfigurationError("batch size, epochs and checkpoint cadence must be at least 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise T.ConfigurationError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.crop % 2 or self.crop <= 0:
            raise T.ConfigurationError(f"crop must be a positive even number of mosaic pixels, got {self.crop}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """The full-scale protocol: 128-pixel crops over 100 epochs."""
        return cls(**{"crop": 128, "epochs": 100, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise T.ConfigurationError(f"unknown train keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        elif isinstance(d.get("weights"), (list, tuple)):
            d["weights"] = LossWeights(*d["weights"])
        return cls(**d)


# -- optimizer -------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros(cls, params: list[T.Tensor]) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[T.Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place. Missing gradients count as zero.

    Raises DivergenceError, before touching anything, if a gradient is not finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise T.ShapeError("parameter, gradient and state lists differ in length")
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {i} (shape {params[i].shape})")
    state.step += 1
    c1 = 1 - beta1 ** state.step
    c2 = 1 - beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise T.ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr0
    return lr0 * 0.5 * (1 + math.cos(math.pi * step / total_steps))


# -- training loop -----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    epochs: list[dict]
    best_score: float
    best_epoch: int
    out_dir: Path
    seconds: float


def _epoch_plan(dataset: Dataset, cfg: TrainConfig, epoch: int) -> list[tuple[str, int, Augment, tuple[int, int]]]:
    """Shuffled (clip, start, flips, crop offset) for one epoch, from a (seed, epoch) generator."""
    windows = dataset.septuplet_index("train")
    if not windows:
        raise T.ConfigurationError(f"dataset {dataset.root} has no training septuplets")
    rng = np.random.default_rng([cfg.seed, epoch])
    plan = []
    for i in rng.permutation(len(windows)):
        clip, start = windows[i]
        spec = dataset.spec(clip)
        flips = Augment.draw(rng, cfg.naive_flip) if cfg.augment else Augment()
        top = 2 * int(rng.integers(0, max(0, (2 * spec.height - cfg.crop) // 2) + 1))
        left = 2 * int(rng.integers(0, max(0, (2 * spec.width - cfg.crop) // 2) + 1))
        plan.append((clip, start, flips, (top, left)))
    return plan


def _steps_per_epoch(dataset: Dataset, cfg: TrainConfig) -> int:
    return math.ceil(len(dataset.septuplet_index("train")) / cfg.batch_size)


def _validation_score(model_cfg: ModelConfig, params: ModelParams, dataset: Dataset, crop: int) -> dict:
    if not dataset.clip_ids("val"):
        return {}
    report = evaluate(model_predictor(model_cfg, params), dataset, "val", model_cfg.layout, crop=crop)
    return report.aggregate


def _selection_key(model_cfg: ModelConfig) -> str:
    return "intensity_psnr" if model_cfg.layout == "rgb" else "stokes_psnr"


def _save(path: Path, model_cfg, params, state: AdamState, meta: dict) -> None:
    names = [n for n, _ in network.named_parameters(params)]
    extra = {f"adam.m.{n}": m for n, m in zip(names, state.m)}
    extra.update({f"adam.v.{n}": v for n, v in zip(names, state.v)})
    network.save_checkpoint(path, model_cfg, params, extra, {**meta, "adam_step": state.step})


def _restore(path: Path, params: ModelParams) -> tuple[AdamState, dict]:
    cfg, loaded, meta, extra = network.load_checkpoint(path)
    names = [n for n, _ in network.named_parameters(params)]
    for (_, dst), (_, src) in zip(network.named_parameters(params), network.named_parameters(loaded)):
        dst.data = src.data
    state = AdamState(int(meta["adam_step"]), [extra[f"adam.m.{n}"] for n in names],
                      [extra[f"adam.v.{n}"] for n in names])
    return state, meta


def _read_rows(path: Path, keep_before_epoch: int) -> list[dict]:
    if not path.exists():
        return []
    with path.open(newline="") as fh:
        return [r for r in csv.DictReader(fh) if int(r["epoch"]) < keep_before_epoch]


def _write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: Dataset, out_dir: str | Path,
          resume: str | Path | None = None, max_epochs: int | None = None) -> TrainResult:
    """Train, writing ``loss.csv`` (one row per step), ``epochs.csv``, ``last.ckpt`` and ``best.ckpt``.

    ``max_epochs`` stops early without changing the schedule, which is how a
    run is split into an interrupted part and a resumed part.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model_cfg.layout == "rgb" and train_cfg.weights.polarized:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "weights": LossWeights(1.0, 0.0, 0.0, 0.0)})
        log.info("conventional layout: training on the intensity loss alone")
    params = network.init_params(model_cfg, train_cfg.seed)
    plist = network.parameter_list(params)
    for p in plist:
        p.requires_grad = True
    state = AdamState.zeros(plist)
    steps_per_epoch = _steps_per_epoch(dataset, train_cfg)
    total_steps = steps_per_epoch * train_cfg.epochs
    first_epoch, best_score, best_epoch = 0, -math.inf, -1
    if resume is not None:
        state, meta = _restore(Path(resume), params)
        first_epoch = int(meta["epoch"]) + 1
        best_score, best_epoch = float(meta["best_score"]), int(meta["best_epoch"])
    loss_cols = ["epoch", "step", "lr", *LOSS_COLUMNS, "total"]
    epoch_cols = ["epoch", "train_loss", "val_intensity_psnr", "val_stokes_psnr", "seconds"]
    step_rows = _read_rows(out / "loss.csv", first_epoch)
    epoch_rows = _read_rows(out / "epochs.csv", first_epoch)
    selection = _selection_key(model_cfg)
    started = time.perf_counter()
    last_epoch = train_cfg.epochs if max_epochs is None else min(train_cfg.epochs, max_epochs)

    for epoch in range(first_epoch, last_epoch):
        epoch_start = time.perf_counter()
        plan = _epoch_plan(dataset, train_cfg, epoch)
        totals = []
        for b in range(steps_per_epoch):
            batch = plan[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            step = epoch * steps_per_epoch + b
            lr = cosine_lr(step, total_steps, train_cfg.lr)
            sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
            total = 0.0
            for clip, start, flips, offset in batch:
                sep = sample_septuplet(dataset, clip, start, train_cfg.crop, flips,
                                       layout=model_cfg.layout, offset=offset)
                pred = network.forward(T.Tensor(sep.inputs), model_cfg, params)
                terms = loss_terms(pred, sep.target, train_cfg.weights, model_cfg.layout)
                loss = combine(terms, train_cfg.weights) * (1.0 / len(batch))
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step} (clip {clip})")
                loss.backward()
                for name, t in terms.items():
                    sums[name] += t.item() / len(batch)
                total += value
            adam_step(plist, [p.grad for p in plist], state, lr,
                      train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            for p in plist:
                p.zero_grad()
            step_rows.append({"epoch": epoch, "step": step, "lr": f"{lr:.9g}",
                              **{k: f"{v:.9g}" for k, v in sums.items()}, "total": f"{total:.9g}"})
            totals.append(total)
        val = _validation_score(model_cfg, params, dataset, train_cfg.crop) if train_cfg.validate else {}
        score = val.get(selection, -float(np.mean(totals)))
        row = {"epoch": epoch, "train_loss": f"{np.mean(totals):.9g}",
               "val_intensity_psnr": f"{val.get('intensity_psnr', float('nan')):.6f}",
               "val_stokes_psnr": f"{val.get('stokes_psnr', float('nan')):.6f}",
               "seconds": f"{time.perf_counter() - epoch_start:.1f}"}
        epoch_rows.append(row)
        log.info("epoch %d: train loss %s, selection score %.3f (%s)", epoch, row["train_loss"], score,
                 selection if val else "negative train loss")
        meta = {"epoch": epoch, "train": train_cfg.to_dict(), "best_score": best_score, "best_epoch": best_epoch}
        if score > best_score:
            best_score, best_epoch = score, epoch
            meta.update(best_score=best_score, best_epoch=best_epoch)
            _save(out / "best.ckpt", model_cfg, params, state, meta)
        if (epoch + 1) % train_cfg.checkpoint_every == 0 or epoch + 1 == last_epoch:
            _save(out / "last.ckpt", model_cfg, params, state, meta)
        _write_rows(out / "loss.csv", loss_cols, step_rows)
        _write_rows(out / "epochs.csv", epoch_cols, epoch_rows)

    return TrainResult(params, epoch_rows, best_score, best_epoch, out, time.perf_counter() - started)
