"""Rectified-Adam optimization, the full-volume training loop, and inference.

One training step: sample a volume uniformly, augment (elastic then noise)
with a seed derived from the run seed and step index, z-score normalize,
forward under the precision policy, compute the loss, scale it, backprop,
unscale the gradients, let the loss scaler decide, then either apply the
optimizer step to the float32 masters or skip.  Everything is a pure
function of the config, so fixed seeds give bitwise-identical checkpoints.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import DeformParams, NoiseParams, augment_pair
from .errors import ConfigError, ShapeError
from .halfprec import (
    LossScaler,
    MasterWeights,
    PrecisionPolicy,
    ScaleDecision,
    fp16_round_array,
    scale_loss,
    unscale_grads,
)
from .losses import LossConfig, compute_loss
from .metrics import evaluate
from .network import Network, NetworkConfig, build_network, load_checkpoint, save_checkpoint
from .tensor import Tape, Tensor, backward
from .volumes import (
    LabelVolume,
    Volume,
    labels_from_class_map,
    load_volume,
    one_hot,
    volume_to_tensor,
    zscore_normalize,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Per-parameter moments and the step counter for rectified Adam."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def radam_step(state: OptimizerState, params, grads) -> None:
    """Apply one rectified-Adam update in place.

    The variance-rectified adaptive step is used when the approximated
    moment sample size rho_t exceeds 4; otherwise the update falls back to
    the bias-corrected momentum alone.  Moments are kept in float64;
    parameters keep their own dtype.
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * (b2**t) / bias2
    rect = None
    if rho_t > 4.0:
        rect = math.sqrt(
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
        )
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient reached the optimizer for {name!r}")
        arr = p.data if isinstance(p, Tensor) else p
        g64 = np.asarray(g, dtype=np.float64)
        if name not in state.m:
            state.m[name] = np.zeros(arr.shape, dtype=np.float64)
            state.v[name] = np.zeros(arr.shape, dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g64
        v *= b2
        v += (1.0 - b2) * g64 * g64
        m_hat = m / bias1
        if rect is not None:
            denom = np.sqrt(v / bias2) + state.eps
            update = state.lr * rect * m_hat / denom
        else:
            update = state.lr * m_hat
        new = arr.astype(np.float64) - update
        if isinstance(p, Tensor):
            p.data = new.astype(arr.dtype)
        else:
            p[...] = new.astype(arr.dtype)


# ---------------------------------------------------------------------------
# training configuration


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    steps: int = 30000
    batch_size: int = 1
    precision: str = "o1"
    loss: LossConfig = field(default_factory=LossConfig)
    deform: DeformParams = field(default_factory=DeformParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    seed: int = 0
    checkpoint_every: int = 1000
    manifest: tuple = ()
    fold: int | None = None
    num_folds: int = 4
    out_dir: str | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    opt_eps: float = 1e-8
    init_scale: float = 2.0**16
    growth_interval: int = 2000
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    patience: int | None = None
    divergence_window: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size != 1:
            raise ConfigError("batch size is fixed at 1")
        if not self.manifest:
            raise ConfigError("manifest must list at least one volume/label pair")
        if self.fold is not None and not (0 <= self.fold < self.num_folds):
            raise ConfigError(f"fold must lie in [0, {self.num_folds}), got {self.fold}")


@dataclass
class TrainResult:
    network: Network
    checkpoint_path: str | None
    log_lines: list
    final_loss: float
    steps_run: int
    diverged: bool = False
    divergence_report: str | None = None
    stopped_early: bool = False


def _load_pair(entry):
    vol, lab = entry
    if isinstance(vol, (str, os.PathLike)):
        vol = load_volume(vol)
    if isinstance(lab, (str, os.PathLike)):
        lab = load_volume(lab)
    if not isinstance(vol, Volume) or not isinstance(lab, LabelVolume):
        raise ConfigError(
            "manifest entries must resolve to (Volume, LabelVolume) pairs; "
            f"got ({type(vol).__name__}, {type(lab).__name__})"
        )
    if vol.dims != lab.dims:
        raise ShapeError(f"volume dims {vol.dims} != label dims {lab.dims}")
    if any(e < 8 for e in vol.dims):
        raise ShapeError(f"training volumes need every extent >= 8, got {vol.dims}")
    return vol, lab


def split_folds(n_items: int, num_folds: int, seed: int):
    """Shuffle indices and split into equal-sized folds (last may be short)."""
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    )
    order = rng.permutation(n_items)
    return [chunk.tolist() for chunk in np.array_split(order, num_folds)]


def train(cfg: TrainConfig) -> TrainResult:
    """Run the training loop; returns the network, log and checkpoint path."""
    pairs = []
    for entry in cfg.manifest:
        try:
            pairs.append(_load_pair(entry))
        except OSError:
            raise
    if cfg.fold is not None:
        folds = split_folds(len(pairs), cfg.num_folds, cfg.seed)
        val_idx = set(folds[cfg.fold])
        train_pairs = [p for i, p in enumerate(pairs) if i not in val_idx]
        val_pairs = [p for i, p in enumerate(pairs) if i in val_idx]
        if not train_pairs:
            raise ConfigError("fold split left no training volumes")
    else:
        train_pairs = pairs
        val_pairs = []

    net_seed = int(
        np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)).generate_state(1)[0]
    )
    net = build_network(cfg.network, net_seed)
    policy = PrecisionPolicy(cfg.precision)
    masters = MasterWeights(net.params, policy)
    scaler = LossScaler(
        scale=cfg.init_scale,
        growth_factor=cfg.growth_factor,
        backoff_factor=cfg.backoff_factor,
        growth_interval=cfg.growth_interval,
    )
    opt = OptimizerState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.opt_eps)

    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)

    log_lines = []
    nonfinite_streak = 0
    diverged = False
    divergence_report = None
    stopped_early = False
    best_val = -math.inf
    evals_since_best = 0
    final_loss = math.nan
    step = 0

    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        step_ss = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2, step))
        ss_sample, ss_augment = step_ss.spawn(2)
        pick_rng = np.random.Generator(np.random.PCG64(ss_sample))
        idx = int(pick_rng.integers(0, len(train_pairs)))
        vol, lab = train_pairs[idx]

        vol_aug, lab_aug = augment_pair(vol, lab, cfg.deform, cfg.noise, ss_augment)
        vol_norm = zscore_normalize(vol_aug)
        xt = volume_to_tensor(vol_norm)
        yt = one_hot(lab_aug)

        fwd_params = masters.forward_params()
        scale_used = scaler.scale
        with Tape():
            probs = net.forward(xt, policy=policy, params=fwd_params)
            loss = compute_loss(probs, yt, cfg.loss)
            scaled = scale_loss(loss, scaler)
            backward(scaled)
        loss_val = float(loss.data)
        final_loss = loss_val

        grads = {name: t.grad for name, t in fwd_params.items()}
        finite = unscale_grads(list(grads.values()), scaler) and math.isfinite(loss_val)
        decision = scaler.step(finite)
        skipped = decision is ScaleDecision.SKIP
        if not skipped:
            if policy.quantize_gradients:
                for g in grads.values():
                    if g is not None:
                        g[...] = fp16_round_array(g)
            radam_step(opt, masters.masters, grads)
            masters.refresh()
        for t in fwd_params.values():
            t.grad = None

        wallclock_ms = (time.perf_counter() - t0) * 1000.0
        log_lines.append(
            f"{step} {loss_val:.9g} {int(scale_used)} {int(skipped)} {wallclock_ms:.3f}"
        )

        if not math.isfinite(loss_val):
            nonfinite_streak += 1
        else:
            nonfinite_streak = 0
        if nonfinite_streak >= cfg.divergence_window:
            diverged = True
            divergence_report = (
                f"training diverged: loss non-finite for {nonfinite_streak} "
                f"consecutive steps at precision {policy.level.value} (step {step})"
            )
            log.error("%s", divergence_report)
            break

        if cfg.out_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(net, os.path.join(cfg.out_dir, f"step_{step:06d}.ckpt"))

        if cfg.patience is not None and val_pairs and step % max(1, cfg.checkpoint_every) == 0:
            score = _validation_dsc(net, val_pairs, cfg.network.num_classes)
            if score > best_val:
                best_val = score
                evals_since_best = 0
            else:
                evals_since_best += 1
                if evals_since_best >= cfg.patience:
                    stopped_early = True
                    break

    checkpoint_path = None
    if cfg.out_dir:
        checkpoint_path = os.path.join(cfg.out_dir, "final.ckpt")
        save_checkpoint(net, checkpoint_path)
        with open(os.path.join(cfg.out_dir, "train.log"), "w") as fh:
            fh.write("\n".join(log_lines) + "\n")

    return TrainResult(
        network=net,
        checkpoint_path=checkpoint_path,
        log_lines=log_lines,
        final_loss=final_loss,
        steps_run=step,
        diverged=diverged,
        divergence_report=divergence_report,
        stopped_early=stopped_early,
    )


def _validation_dsc(net: Network, pairs, num_classes: int) -> float:
    scores = []
    for vol, lab in pairs:
        pred = infer(net, vol)
        scores.append(evaluate(lab, pred, num_classes).mean_dsc)
    return float(np.mean(scores)) if scores else -math.inf


# ---------------------------------------------------------------------------
# inference


def infer(checkpoint, volume: Volume) -> LabelVolume:
    """Normalize, forward once, argmax over channels.

    ``checkpoint`` is a Network or a checkpoint path.  Argmax ties break
    toward the lowest class index.  The forward wall-clock time is logged.
    """
    net = checkpoint if isinstance(checkpoint, Network) else load_checkpoint(checkpoint)
    vol_norm = zscore_normalize(volume)
    xt = volume_to_tensor(vol_norm)
    t0 = time.perf_counter()
    probs = net.forward(xt)
    elapsed = time.perf_counter() - t0
    log.info("forward pass took %.3f s", elapsed)
    class_map = np.argmax(probs.data[0], axis=0)
    return labels_from_class_map(
        class_map, net.config.num_classes, spacing=volume.spacing
    )


def toy_train_config(volume_path, label_path, **overrides) -> TrainConfig:
    """Small-config training setup used by tests and the README example."""
    network = overrides.pop(
        "network",
        NetworkConfig(
            num_classes=4,
            stem_channels=8,
            bottleneck_mid_channels=4,
            branch_channels=(4, 8, 16),
        ),
    )
    base = TrainConfig(
        network=network,
        steps=200,
        manifest=((volume_path, label_path),),
        deform=DeformParams(alpha=0.0),
        noise=NoiseParams(sigma_range=(0.0, 0.0)),
        precision="o0",
        checkpoint_every=0,
    )
    return replace(base, **overrides)
