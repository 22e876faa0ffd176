"""x0-prediction training with a hand-rolled Adam, checkpoints and loss log."""

from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import rng
from .checkpoint import save_checkpoint
from .conditioning import ConditionSource, condition_for
from .denoiser import ArchitectureConfig, UNet, init_params, loss_and_grad, predict_x0
from .image import ManifestEntry, PatchPair, read_manifest, to_signed
from .schedule import NoiseSchedule, make_cosine_schedule

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000
    scale: int = 4
    patch_size: int = 64
    T: int = 1000
    grad_clip: float | None = None

    def __post_init__(self):
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.total_steps < 0 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1, total_steps >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: OrderedDict
    v: OrderedDict
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls(OrderedDict((n, torch.zeros_like(p)) for n, p in params.items()),
                   OrderedDict((n, torch.zeros_like(p)) for n, p in params.items()))


def adam_update(params, grads, state: OptimizerState, config: TrainConfig):
    """One bias-corrected Adam step; returns new ``(params, state)``."""
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient names differ")
    b1, b2 = config.adam_beta1, config.adam_beta2
    k = state.step + 1
    c1, c2 = 1.0 - b1**k, 1.0 - b2**k
    new_p, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat, v_hat = m / c1, v / c2
        new_p[name] = p - config.learning_rate * m_hat / (torch.sqrt(v_hat) + config.adam_eps)
        new_m[name], new_v[name] = m, v
    return new_p, OptimizerState(new_m, new_v, k)


def clip_grads(grads, max_norm: float):
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return OrderedDict((n, g * (max_norm / norm)) for n, g in grads.items())


@dataclass(frozen=True)
class TrainItem:
    id: str
    hr: np.ndarray          # signed
    condition: np.ndarray   # signed


def make_batch(items: Sequence[TrainItem], schedule: NoiseSchedule, gen: np.random.Generator):
    """Draw t ~ U{1..T} then eps ~ N(0, 1) and form x_t for a batch."""
    x0 = np.stack([it.hr for it in items])
    cond = np.stack([it.condition for it in items])
    t = gen.integers(1, schedule.T + 1, size=len(items))
    eps = rng.box_muller(gen, x0.shape)
    a = schedule.alpha[t][:, None, None, None]
    s = schedule.sigma[t][:, None, None, None]
    x_t = a * x0 + s * eps
    return x_t, t, cond, x0


def train_step(net: UNet, params, opt_state: OptimizerState, items: Sequence[TrainItem],
               schedule: NoiseSchedule, gen: np.random.Generator, config: TrainConfig):
    x_t, t, cond, x0 = make_batch(items, schedule, gen)
    as_t = lambda a: torch.tensor(a, dtype=torch.float32)  # noqa: E731
    loss, grads = loss_and_grad(net, params, as_t(x_t), t, as_t(cond), as_t(x0))
    if not math.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss} at optimizer step {opt_state.step + 1}; "
            f"t={t.tolist()} ids={[it.id for it in items]}")
    if config.grad_clip:
        grads = clip_grads(grads, config.grad_clip)
    params, opt_state = adam_update(params, grads, opt_state, config)
    return params, opt_state, loss


def load_items(entries: Sequence[ManifestEntry], source: ConditionSource) -> list[TrainItem]:
    """Load every pair and compute its condition once."""
    items = []
    for e in entries:
        pair: PatchPair = e.load()
        cond = condition_for(source, pair.lr, pair.scale, e.id)
        items.append(TrainItem(e.id, to_signed(pair.hr).data, cond.data))
    return items


def heldout_loss(net: UNet, params, items: Sequence[TrainItem], schedule: NoiseSchedule,
                 seed: int, batch_size: int = 16) -> float:
    """Mean L1 loss over ``items`` at draws fixed by ``(seed, HOLDOUT)``."""
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(items), batch_size):
            chunk = items[start:start + batch_size]
            gen = rng.generator(seed, rng.HOLDOUT, start)
            x_t, t, cond, x0 = make_batch(chunk, schedule, gen)
            pred = predict_x0(net, params, torch.tensor(x_t, dtype=torch.float32), t,
                              torch.tensor(cond, dtype=torch.float32))
            err = (pred.double() - torch.tensor(x0)).abs().mean().item()
            total += err * len(chunk)
            count += len(chunk)
    return total / count


def train_loop(config: TrainConfig, arch: ArchitectureConfig, manifest, source: ConditionSource,
               out_dir, items: Sequence[TrainItem] | None = None,
               on_step: Callable[[int, float], None] | None = None) -> Path:
    """Train from scratch and return the final checkpoint path.

    Writes ``step_XXXXXXX.ckpt`` every ``checkpoint_every`` steps,
    ``final.ckpt`` at the end, and ``loss.log`` lines
    ``step<TAB>loss<TAB>seconds``. Resuming is not supported.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if items is None:
        entries = read_manifest(manifest)
        if not entries:
            raise ValueError(f"{manifest}: empty manifest")
        items = load_items(entries, source)
    shapes = {it.hr.shape for it in items}
    if len(shapes) != 1:
        raise ValueError(f"training patches have mixed shapes: {sorted(shapes)}")
    (shape,) = shapes
    if shape[0] != arch.image_channels:
        raise ValueError(f"patches have {shape[0]} channels, architecture expects {arch.image_channels}")
    arch.check_size(shape[1], shape[2])

    schedule = make_cosine_schedule(config.T)
    net = UNet(arch, config.T)
    params = init_params(net, config.seed)
    opt = OptimizerState.zeros_like(params)
    log_path = out_dir / "loss.log"
    t0 = time.perf_counter()
    with open(log_path, "w", encoding="utf-8") as fh:
        for step in range(1, config.total_steps + 1):
            gen = rng.generator(config.seed, rng.TRAIN, step)
            idx = gen.integers(0, len(items), size=config.batch_size)
            params, opt, loss = train_step(net, params, opt, [items[i] for i in idx],
                                           schedule, gen, config)
            fh.write(f"{step}\t{loss:.8f}\t{time.perf_counter() - t0:.3f}\n")
            if on_step is not None:
                on_step(step, loss)
            if step % 100 == 0:
                fh.flush()
                log.info("step %d loss %.5f", step, loss)
            if step % config.checkpoint_every == 0 and step != config.total_steps:
                save_checkpoint(out_dir / f"step_{step:07d}.ckpt", arch, config.T, params)
    return save_checkpoint(out_dir / "final.ckpt", arch, config.T, params)
