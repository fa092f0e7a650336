"""
L-infinity gradient-sign attacks: FGSM, PGD, and their adaptive forms that
average gradient signs over randomized test-time augmentations.

All four share one code path. A vanilla attack is an adaptive attack whose
augmentation batch is the input itself, which is what makes the N=1,
identity-augmentation reductions bit-compatible.

Randomness is keyed per image (``keys``), never per batch position, so
chunking a dataset differently does not change any adversarial image.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import structlog

from .augment import generate_ttas
from .config import AttackConfig, TtaConfig
from .exceptions import ConfigError, GradientError
from .seeding import derive_rng, derive_seed

log = structlog.get_logger(__name__)

# rows per gradient evaluation (images x augmentations)
MAX_ROWS = 1024


@dataclass
class AdversarialResult:
    images: np.ndarray  # (B, H, W, C), in [0, 1]
    loss_trace: np.ndarray  # (iterations, B), loss at each gradient evaluation
    linf: np.ndarray  # (B,), achieved ||x' - x||_inf
    attack: str = ""
    eps: float = 0.0

    @property
    def image(self) -> np.ndarray:
        return self.images[0]

    def __len__(self) -> int:
        return int(self.images.shape[0])


def project(delta: np.ndarray, eps: float, mode: str = "clamp", per_sample: bool = False) -> np.ndarray:
    """
    Map ``delta`` into the L-inf ball of radius ``eps``.

    ``clamp`` clips each coordinate; ``radial`` rescales by eps / ||delta||_inf
    when the norm exceeds eps. With ``per_sample`` the leading axis indexes
    independent perturbations.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be > 0, got {eps}", field="eps")
    delta = np.asarray(delta)
    if mode == "clamp":
        return np.clip(delta, -eps, eps).astype(delta.dtype, copy=False)
    if mode != "radial":
        raise ConfigError(f"projection must be 'clamp' or 'radial', got {mode!r}", field="projection")
    if per_sample and delta.ndim > 1:
        norms = np.abs(delta).reshape(delta.shape[0], -1).max(axis=1)
        norms = norms.reshape((-1,) + (1,) * (delta.ndim - 1))
    else:
        norms = np.abs(delta).max() if delta.size else 0.0
    scale = np.where(norms > eps, eps / np.maximum(norms, np.finfo(np.float64).tiny), 1.0)
    # clip absorbs rounding in the rescale so a second projection is a no-op
    return np.clip(delta * scale, -eps, eps).astype(delta.dtype, copy=False)


def _as_batch(x: np.ndarray, y) -> tuple:
    x = np.asarray(x, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape[0] != x.shape[0]:
        raise ConfigError(f"{x.shape[0]} images but {y.shape[0]} labels", field="labels")
    return x, y


def _summed_signs(model, points: np.ndarray, labels: np.ndarray, n: int) -> tuple:
    """
    ``points`` is (B, N, H, W, C). Returns the per-image mean loss and the
    integer sum over augmentations of sign(grad), shape (B, H, W, C).
    """
    b = points.shape[0]
    flat = points.reshape((b * n,) + points.shape[2:])
    losses, grads = model.loss_and_input_grad(flat, np.repeat(labels, n))
    if not np.all(np.isfinite(grads)):
        raise GradientError("non-finite input gradient", stage="attack")
    signs = np.sign(grads).astype(np.int32).reshape(points.shape)
    return losses.reshape(b, n).mean(axis=1), signs.sum(axis=1)


def _tta_batch(x: np.ndarray, keys: np.ndarray, n: int, tta: Optional[TtaConfig], seed: int, step: int) -> np.ndarray:
    """(B, N, ...) augmentations of each image; without ``tta`` the batch is the image itself."""
    if tta is None:
        return x[:, None]
    return np.stack([
        generate_ttas(x[i], tta, derive_seed(seed, "tta", int(keys[i]), step), n=n)
        for i in range(x.shape[0])
    ])


def _run(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, seed: int, keys: Optional[np.ndarray],
         tta: Optional[TtaConfig], iterative: bool) -> AdversarialResult:
    x, y = _as_batch(x, y)
    keys = np.arange(x.shape[0]) if keys is None else np.asarray(keys, dtype=np.int64)
    n = cfg.n_tta if tta is not None else 1
    labels = cfg.target_labels(y, model.num_classes)
    direction = np.float32(-1.0 if cfg.targeted else 1.0)

    if not iterative:
        losses, sums = _summed_signs(model, _tta_batch(x, keys, n, tta, seed, 0), labels, n)
        step = direction * np.float32(cfg.eps / n) * sums.astype(np.float32)
        adv = np.clip(x + step, 0.0, 1.0).astype(np.float32)
        return _result(x, adv, losses[None], cfg)

    delta = np.zeros_like(x)
    if cfg.starts_random:
        for i, key in enumerate(keys):
            delta[i] = derive_rng(seed, "start", int(key)).uniform(-cfg.eps, cfg.eps, size=x.shape[1:])
    step_size = direction * np.float32(cfg.alpha / n)
    trace = []
    for k in range(cfg.iterations):
        base = _tta_batch(x, keys, n, tta, seed, 0 if cfg.reuse_tta else k)
        losses, sums = _summed_signs(model, base + delta[:, None], labels, n)
        if not np.all(np.isfinite(losses)):
            raise GradientError(f"non-finite loss at iteration {k}", stage="attack",
                                detail=f"loss trace so far: {[float(t.mean()) for t in trace]}")
        trace.append(losses)
        delta = project(delta + step_size * sums.astype(np.float32), cfg.eps, cfg.projection, per_sample=True)
    adv = np.clip(x + delta, 0.0, 1.0).astype(np.float32)
    return _result(x, adv, np.stack(trace), cfg)


def _result(x: np.ndarray, adv: np.ndarray, trace: np.ndarray, cfg: AttackConfig) -> AdversarialResult:
    linf = np.abs(adv - x).reshape(x.shape[0], -1).max(axis=1)
    return AdversarialResult(adv, trace, linf, attack=cfg.name, eps=cfg.eps)


def _require_kind(cfg: AttackConfig, kind: str) -> None:
    if cfg.kind != kind:
        raise ConfigError(f"attack config is '{cfg.kind}', expected '{kind}'", field="attacks.kind")


def fgsm(model, x: np.ndarray, y, eps: Optional[float] = None, cfg: Optional[AttackConfig] = None,
         keys: Optional[np.ndarray] = None) -> AdversarialResult:
    """x' = clip(x -/+ eps * sign(grad J), 0, 1); minus toward the target label when targeted."""
    cfg = cfg or AttackConfig.fgsm(0.031 if eps is None else eps)
    if eps is not None and eps != cfg.eps:
        raise ConfigError(f"eps {eps} disagrees with the config's eps {cfg.eps}", field="eps")
    _require_kind(cfg, "fgsm")
    return _run(model, x, y, cfg, 0, keys, None, iterative=False)


def pgd(model, x: np.ndarray, y, cfg: AttackConfig, seed: int = 0,
        keys: Optional[np.ndarray] = None) -> AdversarialResult:
    _require_kind(cfg, "pgd")
    return _run(model, x, y, cfg, seed, keys, None, iterative=True)


def a_fgsm(model, x: np.ndarray, y, cfg: AttackConfig, seed: int = 0, tta: Optional[TtaConfig] = None,
           keys: Optional[np.ndarray] = None) -> AdversarialResult:
    """Step eps times the mean gradient sign over ``cfg.n_tta`` augmentations of each image."""
    _require_kind(cfg, "a-fgsm")
    return _run(model, x, y, cfg, seed, keys, cfg.tta or tta or TtaConfig.hard(), iterative=False)


def a_pgd(model, x: np.ndarray, y, cfg: AttackConfig, seed: int = 0, tta: Optional[TtaConfig] = None,
          keys: Optional[np.ndarray] = None) -> AdversarialResult:
    """PGD on the mean gradient sign over augmentations x_t[i] + delta, fresh augmentations per iteration."""
    _require_kind(cfg, "a-pgd")
    return _run(model, x, y, cfg, seed, keys, cfg.tta or tta or TtaConfig.hard(), iterative=True)


_ATTACKS = {
    "fgsm": lambda model, x, y, cfg, seed, tta, keys: fgsm(model, x, y, cfg=cfg, keys=keys),
    "pgd": lambda model, x, y, cfg, seed, tta, keys: pgd(model, x, y, cfg, seed, keys),
    "a-fgsm": a_fgsm,
    "a-pgd": a_pgd,
}


def run_attack(model, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig, seed: int = 0,
               tta: Optional[TtaConfig] = None, keys: Optional[Sequence[int]] = None,
               progress: Optional[Callable[[int], None]] = None) -> AdversarialResult:
    """Attack a whole split in chunks; identical to one call over all images."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    keys = np.arange(images.shape[0]) if keys is None else np.asarray(keys, dtype=np.int64)
    per_image = cfg.n_tta if cfg.adaptive else 1
    chunk = max(1, MAX_ROWS // per_image)
    attack = _ATTACKS[cfg.kind]
    parts = []
    for start in range(0, images.shape[0], chunk):
        stop = start + chunk
        parts.append(attack(model, images[start:stop], labels[start:stop], cfg, seed, tta, keys[start:stop]))
        if progress is not None:
            progress(min(stop, images.shape[0]))
    if not parts:
        shape = (0,) + images.shape[1:]
        return AdversarialResult(np.zeros(shape, np.float32), np.zeros((cfg.iterations, 0), np.float32),
                                 np.zeros(0, np.float32), attack=cfg.name, eps=cfg.eps)
    result = AdversarialResult(
        images=np.concatenate([p.images for p in parts]),
        loss_trace=np.concatenate([p.loss_trace for p in parts], axis=1),
        linf=np.concatenate([p.linf for p in parts]),
        attack=cfg.name,
        eps=cfg.eps,
    )
    log.info("attack_done", attack=cfg.name, kind=cfg.kind, images=len(result),
             max_linf=float(result.linf.max()), final_loss=float(result.loss_trace[-1].mean()))
    return result
