"""Source pretraining, ESH pretraining and per-target ConvLoRA + AdaBN adaptation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .adabn import BNMode
from .checkpoint import AdapterCheckpoint, file_sha256, load_base
from .data import SegmentationSample, stack
from .metrics import mean_std, surface_dice, volumetric_dice
from .tensor import Adam, NonFiniteError, cross_entropy_loss
from .unet import InjectionSelector, Phase, UNetModel, apply_freeze_policy, inject_convlora

log = logging.getLogger(__name__)

LogFn = Callable[[str], None]


@dataclass
class PretrainSpec:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"invalid PretrainSpec {self}")


@dataclass
class ESHSpec:
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"invalid ESHSpec {self}")


@dataclass
class AdaptSpec:
    epochs: int = 5
    lr: float = 1e-4
    rank: int = 2
    target_sample_count: int = 10
    selector: str = "all"
    adabn: bool = True
    adabn_momentum: float = 0.1
    full_pass: bool = False
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.target_sample_count < 1 or self.rank < 1 or self.lr <= 0:
            raise ValueError(f"invalid AdaptSpec {self}")


@dataclass
class PseudoLabelBatch:
    images: np.ndarray
    pseudo_labels: np.ndarray


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1):
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < min_size:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _emit(logfn: LogFn | None, line: str):
    log.debug(line)
    if logfn is not None:
        logfn(line)


def _train_loop(model: UNetModel, images, labels, epochs, batch_size, lr, seed, head: str, logfn, tag):
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    names = model.trainable_names()
    history = []
    step = 0
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(images), batch_size, rng):
            x, y = images[idx], labels[idx]
            if head == "full":
                logits = model.forward_full(x)
            else:
                logits = model.forward_esh(x)
            try:
                loss, g = cross_entropy_loss(logits, y)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{tag}: loss diverged at epoch {epoch} step {step}") from exc
            grads = model.backward(**{f"grad_{head}": g})
            model.set_parameters(opt.step(model.parameters(), grads, names))
            losses.append(loss)
            _emit(logfn, f"{tag} epoch={epoch} step={step} loss={loss:.6f} lr={lr:g}")
            step += 1
        history.append(float(np.mean(losses)))
        _emit(logfn, f"{tag} epoch={epoch} mean_loss={history[-1]:.6f}")
    return history


def pretrain_source(model: UNetModel, samples: list[SegmentationSample], spec: PretrainSpec = PretrainSpec(), logfn: LogFn | None = None):
    """Supervised cross-entropy training of the full path on labeled source data.

    Stores the source BN snapshot on completion. Returns per-epoch mean losses.
    """
    if not samples:
        raise ValueError("empty source dataset")
    images, masks = stack(samples)
    apply_freeze_policy(model, Phase.PRETRAIN)
    history = _train_loop(model, images, masks, spec.epochs, spec.batch_size, spec.lr, spec.seed, "full", logfn, "pretrain")
    apply_freeze_policy(model, Phase.EVAL)
    model.snapshot_bn()
    return history


def train_esh(model: UNetModel, samples: list[SegmentationSample], spec: ESHSpec = ESHSpec(), logfn: LogFn | None = None):
    """Train only the ESH on ground-truth source masks; the U-Net stays untouched."""
    if not samples:
        raise ValueError("empty source dataset")
    images, masks = stack(samples)
    apply_freeze_policy(model, Phase.ESH)
    history = _train_loop(model, images, masks, spec.epochs, spec.batch_size, spec.lr, spec.seed, "esh", logfn, "esh")
    apply_freeze_policy(model, Phase.EVAL)
    model.snapshot_bn()
    return history


def make_pseudo_labels(model: UNetModel, images) -> PseudoLabelBatch:
    """Hard argmax labels from the full path with BN in EVAL mode."""
    with model.bn_mode(BNMode.EVAL):
        logits = model.forward_full(images)
    return PseudoLabelBatch(images, logits.argmax(axis=1).astype(np.int32))


def tensor_digest(arr) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def frozen_digests(model: UNetModel) -> dict[str, str]:
    flags = model.freeze_flags()
    return {k: tensor_digest(v) for k, v in model.parameters().items() if flags[k]}


class FreezeViolation(RuntimeError):
    pass


def select_targets(n_available: int, count: int, seed: int) -> np.ndarray:
    if n_available < 1:
        raise ValueError("empty target set")
    rng = np.random.default_rng([seed, 7])
    return np.sort(rng.choice(n_available, size=min(count, n_available), replace=False))


def adapt_target(
    model: UNetModel,
    target_samples: list[SegmentationSample],
    spec: AdaptSpec = AdaptSpec(),
    domain_id: str = "target",
    base_checksum: str = "",
    logfn: LogFn | None = None,
) -> AdapterCheckpoint:
    """Self-training of ConvLoRA factors through the ESH, with optional AdaBN.

    Per batch: pseudo-labels from the full path (EVAL BN), then one shared
    encoder pass feeding both heads with BN in ADAPT mode (so every BN layer
    re-estimates target statistics), cross-entropy between ESH logits and
    the pseudo-labels, and an Adam step on the adapter factors only.
    """
    if not target_samples:
        raise ValueError("empty target set")
    depth = model.config.depth
    selector = InjectionSelector.parse(spec.selector, depth)
    if not model.injected:
        inject_convlora(model, selector, spec.rank, seed=spec.seed)
    elif set(model.injected) != set(selector.blocks):
        raise ValueError(f"model is injected at {sorted(model.injected)}, spec asks for {sorted(selector.blocks)}")
    apply_freeze_policy(model, Phase.ADAPT, adabn=spec.adabn)
    model.set_bn_momentum(None if spec.full_pass else spec.adabn_momentum)

    chosen = select_targets(len(target_samples), spec.target_sample_count, spec.seed)
    images, _ = stack([target_samples[i] for i in chosen])
    if spec.adabn and len(images) < 2:
        raise ValueError("AdaBN needs at least 2 target images")
    before = frozen_digests(model)
    rng = np.random.default_rng([spec.seed, 11])
    opt = Adam(lr=spec.lr)
    names = model.trainable_names()
    step = 0
    for epoch in range(spec.epochs):
        if spec.full_pass:
            model.start_bn_pass()
        for idx in _batches(len(images), spec.batch_size, rng, min_size=2):
            x = images[idx]
            pl = make_pseudo_labels(model, x)
            if spec.adabn:
                _, esh_logits = model.forward_both(x)
            else:
                esh_logits = model.forward_esh(x)
            loss, g = cross_entropy_loss(esh_logits, pl.pseudo_labels)
            grads = model.backward(grad_esh=g)
            model.set_parameters(opt.step(model.parameters(), grads, names))
            _emit(logfn, f"adapt domain={domain_id} epoch={epoch} step={step} loss={loss:.6f} lr={spec.lr:g}")
            step += 1
    after = frozen_digests(model)
    changed = [k for k in before if before[k] != after[k]]
    if changed:
        raise FreezeViolation(f"frozen tensors changed during adaptation: {changed[:5]}")
    apply_freeze_policy(model, Phase.EVAL)
    return AdapterCheckpoint.from_model(model, base_checksum, domain_id, spec.rank, spec.seed, spec.adabn)


def adapt_all_targets(
    base_path,
    targets: dict[str, list[SegmentationSample]],
    spec: AdaptSpec = AdaptSpec(),
    out_dir=None,
    logfn: LogFn | None = None,
) -> dict[str, AdapterCheckpoint]:
    """Adapt an independent copy of the base model to every target domain.

    Each domain starts from the base checkpoint with source BN statistics.
    The base file is verified unchanged afterwards.
    """
    base_path = Path(base_path)
    base_sha = file_sha256(base_path)
    out = {}
    for domain_id in targets:
        model, _, sha = load_base(base_path)
        model.reset_bn()
        ckpt = adapt_target(model, targets[domain_id], spec, domain_id, sha, logfn)
        if out_dir is not None:
            ckpt.save(Path(out_dir) / domain_id / f"seed{spec.seed}.clra")
        out[domain_id] = ckpt
    if file_sha256(base_path) != base_sha:
        raise FreezeViolation(f"base checkpoint {base_path} changed during adaptation")
    return out


@dataclass
class EvalResult:
    records: list[tuple[str, str, float, float]] = field(default_factory=list)

    @property
    def sds(self) -> np.ndarray:
        return np.array([r[2] for r in self.records])

    @property
    def dice(self) -> np.ndarray:
        return np.array([r[3] for r in self.records])

    def mean_std(self, metric: str = "sds") -> tuple[float, float]:
        return mean_std(getattr(self, metric))


def predict(model: UNetModel, images, head: str = "full", chunk: int = 16) -> np.ndarray:
    """Argmax label maps with BN in EVAL mode."""
    out = []
    with model.bn_mode(BNMode.EVAL):
        for i in range(0, len(images), chunk):
            x = images[i : i + chunk]
            logits = model.forward_full(x) if head == "full" else model.forward_esh(x)
            out.append(logits.argmax(axis=1))
    return np.concatenate(out)


def evaluate(model: UNetModel, samples: list[SegmentationSample], tolerance: float = 1.0, head: str = "full") -> EvalResult:
    """Per-image surface Dice and volumetric Dice of the foreground class."""
    images, masks = stack(samples)
    preds = predict(model, images, head)
    result = EvalResult()
    for s, p, m in zip(samples, preds, masks):
        result.records.append((s.domain_id, s.sample_id, surface_dice(p > 0, m > 0, tolerance), volumetric_dice(p > 0, m > 0)))
    return result


def aggregate_seeds(per_seed_means) -> tuple[float, float]:
    """Mean and standard deviation over per-seed mean scores."""
    return mean_std(per_seed_means)
