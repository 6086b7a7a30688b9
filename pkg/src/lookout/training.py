"""Training: windowing, class rebalancing, the weighted loss, and the loop."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import svae_loss
from .errors import ConfigError, TrainingDivergedError
from .fusion import VARIANTS, FusionModel, StepOutput, frames_to_arrays
from .optim import AdamState, adam_step
from .world import Episode, Frame

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "Window",
    "make_training_sequences",
    "rebalance",
    "total_loss",
    "train",
    "TrainResult",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; loss weights follow the published recipe."""

    alpha: float = 6.21
    beta: float = 0.621
    gamma: float = 0.621
    lr: float = 5e-4
    weight_decay: float = 1.5e-4
    seq_len: int = 8
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    variant: str = "full"
    rebalance_ratio: float = 0.3

    def validate(self) -> None:
        problems = []
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.seq_len < 1:
            problems.append("seq_len must be >= 1")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not 0 < self.rebalance_ratio < 1:
            problems.append("rebalance_ratio must be in (0, 1)")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if problems:
            raise ConfigError("; ".join(problems))

    def effective_beta(self) -> float:
        # variants without learned occlusion heads drop the occlusion losses
        return 0.0 if self.variant in ("no_occlusion", "fixed_occlusion") else self.beta

    def effective_gamma(self) -> float:
        if self.variant in ("no_occlusion", "fixed_occlusion", "camera_only"):
            return 0.0
        return self.gamma


@dataclass(frozen=True)
class LossBreakdown:
    svae: float
    anomaly: float
    cam_occ: float
    lidar_occ: float
    total: float
    alpha: float
    beta: float
    gamma: float

    @classmethod
    def combine(cls, svae, anomaly, cam_occ, lidar_occ, alpha, beta, gamma) -> "LossBreakdown":
        total = svae + alpha * anomaly + beta * cam_occ + gamma * lidar_occ
        return cls(svae, anomaly, cam_occ, lidar_occ, total, alpha, beta, gamma)

    def to_dict(self) -> dict:
        return {
            "svae": self.svae,
            "anomaly": self.anomaly,
            "cam_occ": self.cam_occ,
            "lidar_occ": self.lidar_occ,
            "total": self.total,
        }


@dataclass
class Window:
    """A contiguous in-episode run of ``seq_len`` frames."""

    episode_index: int
    start: int
    frames: list[Frame]

    @property
    def anomalous(self) -> bool:
        return any(f.y_future.any() for f in self.frames)


def make_training_sequences(
    episodes: list[Episode], seq_len: int = 8, exclude_padded_tail: bool = True
) -> list[Window]:
    """Chop episodes into non-overlapping windows of ``seq_len`` frames.

    Tail fragments shorter than ``seq_len`` are dropped. When
    ``exclude_padded_tail`` is set (the default for training), frames whose
    future-failure horizon extends past the episode end are not windowed at
    all, so no padded label ever reaches a training batch.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    windows = []
    for ei, ep in enumerate(episodes):
        usable = len(ep.frames)
        if exclude_padded_tail:
            usable = max(0, len(ep.frames) - ep.config.horizon + 1)
        for start in range(0, usable - seq_len + 1, seq_len):
            windows.append(Window(ei, start, ep.frames[start : start + seq_len]))
    return windows


def rebalance(
    windows: list[Window],
    rng: np.random.Generator,
    target_ratio: float = 0.3,
) -> list[int]:
    """Index multiset with the anomalous-window fraction raised to the target.

    Anomalous windows are duplicated (at most once) and non-anomalous ones
    subsampled; a set already at or above the target is returned as a plain
    shuffled permutation. With no anomalous windows at all, warns and
    returns the original indices shuffled.
    """
    pos = [i for i, w in enumerate(windows) if w.anomalous]
    neg = [i for i, w in enumerate(windows) if not w.anomalous]
    if not pos:
        warnings.warn("no anomalous windows to rebalance; returning original set")
        out = np.arange(len(windows))
        rng.shuffle(out)
        return out.tolist()
    if len(pos) / len(windows) >= target_ratio:
        out = np.arange(len(windows))
        rng.shuffle(out)
        return out.tolist()
    dup = 2 if 2 * len(pos) * (1 - target_ratio) / target_ratio <= len(neg) else 1
    keep_neg = min(len(neg), int(round(dup * len(pos) * (1 - target_ratio) / target_ratio)))
    chosen_neg = rng.choice(len(neg), size=keep_neg, replace=False)
    out = np.array(pos * dup + [neg[i] for i in chosen_neg])
    rng.shuffle(out)
    return out.tolist()


def total_loss(
    outputs: list[StepOutput],
    labels: np.ndarray,
    occ_auto: np.ndarray,
    config: TrainConfig,
) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the four loss terms over a window batch.

    ``labels`` is (B, S, T); ``occ_auto`` is (B, S, 2) with camera first.
    Every term is a mean over its own elements; missing branches (per
    variant) contribute zero.
    """
    beta = config.effective_beta()
    gamma = config.effective_gamma()
    n_steps = len(outputs)

    anomaly_terms = [
        ad.binary_cross_entropy(out.y_hat, labels[:, s]) for s, out in enumerate(outputs)
    ]
    anomaly = ad.mul(_sum_tensors(anomaly_terms), 1.0 / n_steps)

    svae = None
    if outputs[0].svae is not None:
        svae_terms = [svae_loss(out.svae, out.scans_normalized) for out in outputs]
        svae = ad.mul(_sum_tensors(svae_terms), 1.0 / n_steps)

    cam = None
    if beta > 0:
        cam_terms = [
            ad.binary_cross_entropy(out.y_camera, occ_auto[:, s, 0])
            for s, out in enumerate(outputs)
        ]
        cam = ad.mul(_sum_tensors(cam_terms), 1.0 / n_steps)

    lidar = None
    if gamma > 0:
        lidar_terms = [
            ad.binary_cross_entropy(out.y_lidar, occ_auto[:, s, 1])
            for s, out in enumerate(outputs)
        ]
        lidar = ad.mul(_sum_tensors(lidar_terms), 1.0 / n_steps)

    total = ad.mul(anomaly, config.alpha)
    if svae is not None:
        total = ad.add(svae, total)
    if cam is not None:
        total = ad.add(total, ad.mul(cam, beta))
    if lidar is not None:
        total = ad.add(total, ad.mul(lidar, gamma))

    breakdown = LossBreakdown.combine(
        svae=float(svae.data) if svae is not None else 0.0,
        anomaly=float(anomaly.data),
        cam_occ=float(cam.data) if cam is not None else 0.0,
        lidar_occ=float(lidar.data) if lidar is not None else 0.0,
        alpha=config.alpha,
        beta=beta,
        gamma=gamma,
    )
    return total, breakdown


def _sum_tensors(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


@dataclass
class TrainResult:
    model: FusionModel
    final_values: dict[str, np.ndarray]
    best_values: dict[str, np.ndarray]
    best_epoch: int
    history: list[LossBreakdown]
    adam: AdamState
    config: TrainConfig

    def use_best(self) -> FusionModel:
        self.model.store.load_values(self.best_values)
        return self.model


def train(
    config: TrainConfig,
    episodes: list[Episode],
    progress=None,
) -> TrainResult:
    """Train one model variant from scratch on the given episodes.

    Single-threaded and bit-reproducible for a fixed (config, episodes)
    pair: the window shuffle, rebalancing draws, dropout masks, and VAE
    noise all derive from the config seed. The best checkpoint is the epoch
    with the lowest mean total loss.
    """
    config.validate()
    if not episodes:
        raise ValueError("training requires at least one episode")
    world_config = episodes[0].config
    model = FusionModel(world_config, variant=config.variant, seed=config.seed)

    windows = make_training_sequences(episodes, config.seq_len)
    if not windows:
        raise ValueError(
            f"no training windows: episodes too short for seq_len={config.seq_len} "
            f"plus horizon={world_config.horizon}"
        )

    adam = AdamState(lr=config.lr, weight_decay=config.weight_decay)
    history: list[LossBreakdown] = []
    best_epoch = -1
    best_total = np.inf
    best_values = model.store.copy_values()

    for epoch in range(config.epochs):
        order = rebalance(
            windows, np.random.default_rng([config.seed, 7, epoch]), config.rebalance_ratio
        )
        sums = np.zeros(4)
        count = 0
        for bi in range(0, len(order), config.batch_size):
            batch = order[bi : bi + config.batch_size]
            arrays = frames_to_arrays([windows[i].frames for i in batch])
            rng = np.random.default_rng([config.seed, 11, epoch, bi])
            outs = model.forward_window(arrays, train=True, rng=rng)
            loss, breakdown = total_loss(outs, arrays["labels"], arrays["occ_auto"], config)
            if not np.isfinite(breakdown.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} batch {bi // config.batch_size} "
                    f"(batch rng seed [{config.seed}, 11, {epoch}, {bi}])"
                )
            model.store.zero_grad()
            loss.backward()
            adam_step(model.store, adam)
            sums += np.array(
                [breakdown.svae, breakdown.anomaly, breakdown.cam_occ, breakdown.lidar_occ]
            ) * len(batch)
            count += len(batch)

        epoch_breakdown = LossBreakdown.combine(
            *(sums / count), config.alpha, config.effective_beta(), config.effective_gamma()
        )
        history.append(epoch_breakdown)
        if epoch_breakdown.total < best_total:
            best_total = epoch_breakdown.total
            best_epoch = epoch
            best_values = model.store.copy_values()
        if progress is not None:
            progress(epoch, epoch_breakdown)

    return TrainResult(
        model=model,
        final_values=model.store.copy_values(),
        best_values=best_values,
        best_epoch=best_epoch,
        history=history,
        adam=adam,
        config=config,
    )
