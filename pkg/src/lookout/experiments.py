"""Evaluation, the total-occlusion stress test, and the ablation harness."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .fusion import FusionModel
from .metrics import MetricsReport, pr_auc
from .training import TrainConfig, TrainResult, train
from .world import Episode, WorldConfig, inject_total_occlusion, simulate_episode

__all__ = [
    "pooled_anomaly_scores",
    "evaluate_anomaly",
    "evaluate_occlusion",
    "StressReport",
    "occlusion_stress_test",
    "generate_clear_episodes",
    "AblationReport",
    "run_ablation",
]


def _usable_frames(episode: Episode) -> int:
    """Frames whose label horizon is fully recorded (no padded tail)."""
    return max(0, len(episode.frames) - episode.config.horizon + 1)


def pooled_anomaly_scores(model: FusionModel, episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray]:
    """All (frame, horizon-step) prediction/label pairs over the episodes.

    Frames with padded label tails are excluded, matching their exclusion
    from training.
    """
    result = model.run_episodes(episodes)
    scores, labels = [], []
    for ep, lo, hi in result["episode_slices"]:
        usable = _usable_frames(ep)
        scores.append(result["y_hat"][lo : lo + usable].ravel())
        labels.append(np.stack([f.y_future for f in ep.frames[:usable]]).ravel())
    return np.concatenate(scores), np.concatenate(labels)


def evaluate_anomaly(model: FusionModel, episodes: list[Episode], threshold: float = 0.5) -> MetricsReport:
    scores, labels = pooled_anomaly_scores(model, episodes)
    return MetricsReport.from_scores(scores, labels, threshold)


def evaluate_occlusion(model: FusionModel, episodes: list[Episode]) -> dict[str, float]:
    """PR-AUC of each occlusion head against the auto labels it was trained on."""
    result = model.run_episodes(episodes)
    cam_labels, lidar_labels = [], []
    for ep, lo, hi in result["episode_slices"]:
        cam_labels.extend(f.occ_camera_auto for f in ep.frames)
        lidar_labels.extend(f.occ_lidar_auto for f in ep.frames)
    out = {"camera": pr_auc(result["y_camera"], np.array(cam_labels))}
    if result["y_lidar"] is not None:
        out["lidar"] = pr_auc(result["y_lidar"], np.array(lidar_labels))
    return out


# ---------------------------------------------------------------------------
# stress test


@dataclass
class StressReport:
    """Outcome of one total-occlusion injection on one clear episode."""

    k: int
    occluded_from: int  # first occluded frame index (== n_frames when k == 0)
    probs: np.ndarray  # (n_frames, T) predictions on the modified episode
    max_prob: float  # max anomaly probability over the inspected frames
    false_positive: bool  # any inspected output above 0.5

    @property
    def occluded_probs(self) -> np.ndarray:
        return self.probs[self.occluded_from :]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "occluded_from": self.occluded_from,
            "max_prob": self.max_prob,
            "false_positive": self.false_positive,
            "per_frame_max": self.probs.max(axis=1).tolist(),
        }


def occlusion_stress_test(
    model: FusionModel,
    episode: Episode,
    k: int = 3,
    rng: np.random.Generator | None = None,
) -> StressReport:
    """Inject total sensor occlusion into the final ``k`` frames and look
    for false positives.

    The episode must be failure-free. With ``k = 0`` nothing is injected
    and the whole episode is inspected (sanity mode).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if any(f.y_future.any() for f in episode.frames):
        raise ValueError("stress test requires a failure-free episode")
    if rng is None:
        rng = np.random.default_rng(0)
    modified = inject_total_occlusion(episode, k, rng) if k > 0 else episode
    result = model.run_episodes([modified])
    probs = result["y_hat"]
    occluded_from = len(episode.frames) - k
    inspected = probs[occluded_from:] if k > 0 else probs
    max_prob = float(inspected.max()) if inspected.size else 0.0
    return StressReport(
        k=k,
        occluded_from=occluded_from,
        probs=probs,
        max_prob=max_prob,
        false_positive=bool((inspected > 0.5).any()),
    )


def generate_clear_episodes(config: WorldConfig, seeds: list[int]) -> list[Episode]:
    """Failure-free, occlusion-free episodes for stress testing."""
    clear = dataclasses.replace(
        config, obstacle_rate=0.0, occlusion_rate=0.0, veer_rate=0.0
    )
    return [
        simulate_episode(dataclasses.replace(clear, rng_seed=s)) for s in seeds
    ]


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, variant: str, seed: int, metrics: MetricsReport) -> None:
        self.rows.append(
            {
                "variant": variant,
                "seed": seed,
                "pr_auc": metrics.pr_auc,
                "f1": metrics.f1,
                "precision": metrics.precision,
                "recall": metrics.recall,
            }
        )

    def variant_rows(self, variant: str) -> list[dict]:
        return [r for r in self.rows if r["variant"] == variant]

    def mean(self, variant: str, key: str = "pr_auc") -> float:
        rows = self.variant_rows(variant)
        return float(np.mean([r[key] for r in rows]))

    def best(self, variant: str) -> dict:
        rows = self.variant_rows(variant)
        return max(rows, key=lambda r: r["pr_auc"])

    def to_dict(self) -> dict:
        variants = sorted({r["variant"] for r in self.rows})
        summary = {}
        for v in variants:
            best = self.best(v)
            summary[v] = {
                "mean_pr_auc": self.mean(v, "pr_auc"),
                "mean_f1": self.mean(v, "f1"),
                "best_seed": best["seed"],
                "best_pr_auc": best["pr_auc"],
                "best_f1": best["f1"],
            }
        return {"rows": self.rows, "summary": summary}


def run_ablation(
    base_config: TrainConfig,
    train_episodes: list[Episode],
    test_episodes: list[Episode],
    variants: list[str],
    seeds: list[int],
    progress=None,
) -> tuple[AblationReport, dict[tuple[str, int], TrainResult]]:
    """Train and evaluate every (variant, seed) pair on a shared split.

    Returns the metric report plus the trained results keyed by
    (variant, seed) so callers can reuse the models.
    """
    report = AblationReport()
    results: dict[tuple[str, int], TrainResult] = {}
    for variant in variants:
        for seed in seeds:
            cfg = dataclasses.replace(base_config, variant=variant, seed=seed)
            result = train(cfg, train_episodes)
            metrics = evaluate_anomaly(result.model, test_episodes)
            report.add(variant, seed, metrics)
            results[(variant, seed)] = result
            if progress is not None:
                progress(variant, seed, metrics)
    return report, results
