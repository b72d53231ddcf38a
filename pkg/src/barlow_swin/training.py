"""Augmentation, Adam, self-supervised pretraining and supervised fine-tuning loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import tensor as T
from .checkpoint import Checkpoint, checkpoint_from_state
from .data import resize_bilinear, resize_nearest
from .exceptions import CheckpointError, ConfigError
from .losses import BtLossConfig, Projector, SegLossConfig, barlow_twins_loss, combined_seg_loss, cross_correlation
from .metrics import MetricsReport, compute_metrics
from .nn import Module, ParamSet
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    pretrain_epochs: int = 100
    # 0 means no step cap
    pretrain_max_steps: int = 0
    freeze_encoder: bool = False
    augment_finetune: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.pretrain_epochs < 1:
            raise ConfigError("batch_size, max_epochs and pretrain_epochs must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")


@dataclass(frozen=True)
class AugmentSpec:
    rotation_degrees: float = 15.0
    rot90: bool = True
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    crop_scale: Tuple[float, float] = (0.6, 1.0)
    jitter: float = 0.2

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if not (0 <= self.hflip_p <= 1 and 0 <= self.vflip_p <= 1):
            raise ConfigError("flip probabilities must lie in [0, 1]")
        if not 0 <= self.jitter < 1 or self.rotation_degrees < 0:
            raise ConfigError("jitter must lie in [0, 1) and rotation_degrees must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(rotation_degrees=0.0, rot90=False, hflip_p=0.0, vflip_p=0.0, crop_scale=(1.0, 1.0), jitter=0.0)


# --- augmentation --------------------------------------------------------


def hflip(arr: np.ndarray) -> np.ndarray:
    return arr[:, ::-1].copy()


def vflip(arr: np.ndarray) -> np.ndarray:
    return arr[::-1].copy()


def _geometric(arr: np.ndarray, params: dict, is_mask: bool) -> np.ndarray:
    size = arr.shape[:2]
    if params["crop"] is not None:
        top, left, side = params["crop"]
        arr = arr[top : top + side, left : left + side]
        arr = resize_nearest(arr, size) if is_mask else resize_bilinear(arr, size)
    if params["k90"]:
        arr = np.rot90(arr, params["k90"], axes=(0, 1))
    if params["angle"]:
        # order=0: nearest-neighbour, so masks stay binary
        arr = ndimage.rotate(arr, params["angle"], axes=(1, 0), reshape=False, order=0, mode="reflect")
    if params["hflip"]:
        arr = arr[:, ::-1]
    if params["vflip"]:
        arr = arr[::-1]
    return np.ascontiguousarray(arr)


def _sample_params(spec: AugmentSpec, size: int, rng: np.random.Generator) -> dict:
    lo, hi = spec.crop_scale
    crop = None
    if hi < 1.0 or lo < 1.0:
        scale = rng.uniform(lo, hi)
        side = int(round(size * np.sqrt(scale)))
        if 0 < side < size:
            top, left = rng.integers(0, size - side + 1, 2)
            crop = (int(top), int(left), side)
    k90 = int(rng.integers(0, 4)) if spec.rot90 else 0
    angle = float(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees)) if spec.rotation_degrees > 0 else 0.0
    return {
        "crop": crop,
        "k90": k90,
        "angle": angle,
        "hflip": bool(rng.random() < spec.hflip_p),
        "vflip": bool(rng.random() < spec.vflip_p),
        "brightness": float(rng.uniform(1 - spec.jitter, 1 + spec.jitter)) if spec.jitter > 0 else 1.0,
        "contrast": float(rng.uniform(1 - spec.jitter, 1 + spec.jitter)) if spec.jitter > 0 else 1.0,
    }


def _photometric(img: np.ndarray, params: dict) -> np.ndarray:
    if params["brightness"] == 1.0 and params["contrast"] == 1.0:
        return img
    img = img * params["brightness"]
    m = img.mean()
    img = (img - m) * params["contrast"] + m
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment_sample(image: np.ndarray, mask: Optional[np.ndarray], spec: AugmentSpec, rng: np.random.Generator):
    """Same geometric transform on image and mask; photometric jitter on the image only."""
    if mask is not None and mask.shape[:2] != image.shape[:2]:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape[:2]} sizes differ")
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"augmentation expects square images, got {image.shape[:2]}")
    params = _sample_params(spec, image.shape[0], rng)
    out_img = _photometric(_geometric(image, params, is_mask=False), params)
    out_img = np.clip(out_img, 0.0, 1.0).astype(np.float32)
    out_mask = None if mask is None else _geometric(mask, params, is_mask=True).astype(np.float32)
    return out_img, out_mask


def augment_view_pair(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator):
    """Two independently sampled augmentations of one image."""
    v1, _ = augment_sample(image, None, spec, rng)
    v2, _ = augment_sample(image, None, spec, rng)
    return v1, v2


# --- optimizer -------------------------------------------------------------


class MissingGradientError(RuntimeError):
    pass


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamSet, state: AdamState, cfg: TrainConfig, t: Optional[int] = None) -> AdamState:
    """One bias-corrected Adam update in place using each parameter's ``.grad``."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p.data -= (cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)).astype(p.dtype, copy=False)
    state.t = t
    return state


class Adam:
    def __init__(self, params: ParamSet, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, self.state, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {f"m.{k}": v.copy() for k, v in self.state.m.items()}
        out.update({f"v.{k}": v.copy() for k, v in self.state.v.items()})
        return out


# --- helpers -----------------------------------------------------------------


def _rng(seed: int, *purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, *purpose])


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _stack(arrays) -> Tensor:
    return Tensor(np.stack(arrays).astype(T.get_default_dtype(), copy=False))


def _copy_state(module: Module, prefix: str = "") -> Dict[str, np.ndarray]:
    return {prefix + k: v.copy() for k, v in module.state_dict().items()}


# --- Phase I ---------------------------------------------------------------


@dataclass
class PretrainResult:
    history: List[float]
    checkpoint: Checkpoint
    best_loss: float
    best_epoch: int
    steps: int


def _check_unlabeled(images) -> None:
    for i, img in enumerate(images):
        if not isinstance(img, np.ndarray) or img.ndim != 3:
            raise TypeError(f"pretraining takes bare (H, W, C) images; item {i} is {type(img).__name__}")


def pretrain(
    encoder: Module,
    projector: Projector,
    images: Sequence[np.ndarray],
    cfg: TrainConfig,
    bt_cfg: BtLossConfig = BtLossConfig(),
    spec: AugmentSpec = AugmentSpec(),
    config_snapshot: Optional[Dict[str, str]] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> PretrainResult:
    """Redundancy-reduction pretraining of ``encoder`` on unlabeled images.

    Every step draws a batch, builds two augmented views per image, runs
    both through the shared encoder and projector, and minimizes the
    cross-correlation loss.  Returns per-epoch mean losses and an
    ``encoder_only`` checkpoint (encoder + projector) taken at the best epoch.
    """
    images = list(images)
    if not images:
        raise ValueError("pretraining dataset is empty")
    _check_unlabeled(images)
    if cfg.batch_size < 2 or len(images) < 2:
        raise ConfigError("cross-correlation needs at least 2 images per batch")
    params = {f"encoder.{k}": v for k, v in encoder.parameters().items()}
    params.update({f"projector.{k}": v for k, v in projector.parameters().items()})
    opt = Adam(params, cfg)
    encoder.train()
    projector.train()
    encoder.set_rng(_rng(cfg.seed, 1))

    history: List[float] = []
    best = (np.inf, -1, None)
    steps = 0
    max_steps = cfg.pretrain_max_steps or None
    for epoch in range(cfg.pretrain_epochs):
        order_rng = _rng(cfg.seed, 2, epoch)
        aug_rng = _rng(cfg.seed, 3, epoch)
        losses = []
        for idx in _batches(len(images), cfg.batch_size, order_rng):
            if len(idx) < 2:
                continue
            views = [augment_view_pair(images[i], spec, aug_rng) for i in idx]
            v1 = _stack([a for a, _ in views])
            v2 = _stack([b for _, b in views])
            z1 = projector(encoder(v1).deep)
            z2 = projector(encoder(v2).deep)
            loss = barlow_twins_loss(cross_correlation(z1, z2, bt_cfg.bt_eps, bt_cfg.bt_centered), bt_cfg)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            steps += 1
            if max_steps and steps >= max_steps:
                break
        epoch_loss = float(np.mean(losses))
        history.append(epoch_loss)
        if on_epoch:
            on_epoch(epoch, epoch_loss)
        log.info("pretrain epoch %d loss %.6f", epoch + 1, epoch_loss)
        if epoch_loss < best[0]:
            state = _copy_state(encoder, "encoder.")
            state.update(_copy_state(projector, "projector."))
            best = (epoch_loss, epoch, state)
        if max_steps and steps >= max_steps:
            break
    ckpt = checkpoint_from_state("encoder_only", best[2], config_snapshot, epoch=best[1] + 1)
    return PretrainResult(history, ckpt, best[0], best[1] + 1, steps)


# --- Phase II --------------------------------------------------------------


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs bring no strict improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be at least 1")
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; return True when training should stop."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class FinetuneResult:
    history: List[Dict[str, float]]
    checkpoint: Checkpoint
    best_epoch: int
    best_val_loss: float
    epochs_run: int


def encoder_config_keys(config: Dict[str, str]) -> Dict[str, str]:
    from .config import ENCODER_KEYS

    return {k: config[k] for k in ENCODER_KEYS if k in config}


def load_encoder_init(model: Module, init: Checkpoint, config_snapshot: Optional[Dict[str, str]]) -> None:
    """Copy ``encoder.*`` tensors from ``init`` into ``model.encoder``, checking configs agree."""
    if config_snapshot is not None and init.config:
        ours, theirs = encoder_config_keys(config_snapshot), encoder_config_keys(init.config)
        diff = sorted(k for k in set(ours) | set(theirs) if ours.get(k) != theirs.get(k))
        if diff:
            raise CheckpointError(
                "init checkpoint encoder config differs: "
                + ", ".join(f"{k}={theirs.get(k)} (ckpt) vs {ours.get(k)}" for k in diff)
            )
    state = {k[len("encoder."):]: v for k, v in init.subset("encoder").items()}
    try:
        model.encoder.load_state_dict(state, strict=True)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"init checkpoint does not match encoder: {exc}") from None


def predict_batches(model: Module, images: Sequence[np.ndarray], batch_size: int) -> List[np.ndarray]:
    model.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            probs = model(_stack(images[i : i + batch_size])).data
            out.extend(probs[j] for j in range(probs.shape[0]))
    return out


def _validate(model, images, masks, seg_cfg, batch_size) -> Tuple[float, float]:
    model.eval()
    total, count, dices = 0.0, 0, []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            x = _stack(images[i : i + batch_size])
            y = np.stack(masks[i : i + batch_size]).astype(x.dtype)
            probs = model(x)
            total += combined_seg_loss(probs, y, seg_cfg).item() * x.shape[0]
            count += x.shape[0]
            dices.extend(compute_metrics(probs.data[j], y[j])["dice"] for j in range(x.shape[0]))
    return total / count, float(np.mean(dices))


def finetune(
    model: Module,
    train_data: Tuple[Sequence[np.ndarray], Sequence[np.ndarray]],
    val_data: Tuple[Sequence[np.ndarray], Sequence[np.ndarray]],
    cfg: TrainConfig,
    seg_cfg: SegLossConfig = SegLossConfig(),
    spec: AugmentSpec = AugmentSpec(),
    init: Optional[Checkpoint] = None,
    config_snapshot: Optional[Dict[str, str]] = None,
    on_epoch: Optional[Callable[[Dict[str, float]], None]] = None,
    stop_at_dice: Optional[float] = None,
) -> FinetuneResult:
    """End-to-end supervised training with early stopping on validation loss.

    The model is left holding the best-validation weights, which are also
    returned as a ``full_model`` checkpoint.  ``stop_at_dice`` ends training
    early once validation Dice reaches the given value.
    """
    train_x, train_y = list(train_data[0]), list(train_data[1])
    val_x, val_y = list(val_data[0]), list(val_data[1])
    if not train_x or not val_x:
        raise ValueError("fine-tuning needs non-empty train and validation splits")
    if init is not None:
        load_encoder_init(model, init, config_snapshot)
    params = model.parameters()
    if cfg.freeze_encoder:
        params = {k: v for k, v in params.items() if not k.startswith("encoder.")}
    opt = Adam(params, cfg)
    model.set_rng(_rng(cfg.seed, 11))
    stopper = EarlyStopping(cfg.patience)
    history: List[Dict[str, float]] = []
    best_state = _copy_state(model)
    batch = cfg.batch_size

    for epoch in range(cfg.max_epochs):
        model.train()
        order_rng = _rng(cfg.seed, 12, epoch)
        aug_rng = _rng(cfg.seed, 13, epoch)
        losses = []
        for idx in _batches(len(train_x), batch, order_rng):
            pairs = [(train_x[i], train_y[i]) for i in idx]
            if cfg.augment_finetune:
                pairs = [augment_sample(img, m, spec, aug_rng) for img, m in pairs]
            x = _stack([p[0] for p in pairs])
            y = np.stack([p[1] for p in pairs]).astype(x.dtype)
            loss = combined_seg_loss(model(x), y, seg_cfg)
            model.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_loss, val_dice = _validate(model, val_x, val_y, seg_cfg, batch)
        row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "val_dice": val_dice}
        history.append(row)
        if on_epoch:
            on_epoch(row)
        log.info("finetune epoch %d train %.6f val %.6f dice %.4f", epoch + 1, row["train_loss"], val_loss, val_dice)
        stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_state = _copy_state(model)
        if stop or (stop_at_dice is not None and val_dice >= stop_at_dice):
            break

    model.load_state_dict(best_state)
    model.eval()
    ckpt = checkpoint_from_state("full_model", best_state, config_snapshot, epoch=stopper.best_epoch + 1,
                                 optimizer=opt.state_dict())
    return FinetuneResult(history, ckpt, stopper.best_epoch + 1, float(stopper.best), len(history))


def evaluate(model: Module, images, masks, names=None, threshold: float = 0.5, batch_size: int = 2) -> MetricsReport:
    names = list(names) if names is not None else [str(i) for i in range(len(images))]
    report = MetricsReport(threshold=threshold)
    for name, prob, mask in zip(names, predict_batches(model, images, batch_size), masks):
        report.add(name, compute_metrics(prob, mask, threshold))
    return report
