"""Occlusion-aware recurrent fusion of path, camera, and LiDAR features.

Per frame: the three 64-dim features and the bounded latent state form the
attention keys and values; the query for the state token is built from the
occlusion heads' hidden layers, so the state is consulted hardest exactly
when the sensors look occluded. The first attended token becomes the next
latent state (clamped to [-10, 10]); all attended tokens feed the
anomaly-probability head.

Ablation variants:
  full            the complete model
  no_state        latent state pinned to zero every step
  no_occlusion    Q = K = V; occlusion heads frozen and unused
  fixed_occlusion state query is the auto-labeler's occlusion labels,
                  repeated; no learned occlusion heads at all
  camera_only     LiDAR branch removed (3 tokens, camera occlusion only)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .encoders import FEATURE_DIM, CameraEncoder, PathEncoder, ScanVae, SvaeOutput
from .layers import add_linear, linear, uniform_init
from .world import Episode, WorldConfig

__all__ = [
    "VARIANTS",
    "OcclusionHead",
    "fuse_step",
    "FusionModel",
    "StepOutput",
    "frames_to_arrays",
]

VARIANTS = ("full", "no_state", "no_occlusion", "fixed_occlusion", "camera_only")

NUM_HEADS = 8
STATE_BOUND = 10.0
HEAD_HIDDEN = 128
DROPOUT_P = 0.5
OCC_HIDDEN = 32


class OcclusionHead:
    """Two-layer sensor-occlusion predictor: 64 -> 32 ReLU -> 1 sigmoid."""

    def __init__(self, store: ParamStore, prefix: str, rng: np.random.Generator):
        self.store = store
        self.prefix = prefix
        add_linear(store, f"{prefix}.l1", FEATURE_DIM, OCC_HIDDEN, rng)
        add_linear(store, f"{prefix}.l2", OCC_HIDDEN, 1, rng)

    def __call__(self, feature: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (hidden (B, 32), prob (B,))."""
        hidden = ad.relu(linear(self.store, f"{self.prefix}.l1", feature))
        logit = linear(self.store, f"{self.prefix}.l2", hidden)
        prob = ad.reshape(ad.sigmoid(logit), (feature.data.shape[0],))
        return hidden, prob


def add_attention_params(store: ParamStore, rng: np.random.Generator, prefix: str = "fusion.attn") -> None:
    for name in ("wq", "wk", "wv", "wo"):
        store.add(
            f"{prefix}.{name}",
            Tensor(uniform_init(rng, FEATURE_DIM, (FEATURE_DIM, FEATURE_DIM)), requires_grad=True),
        )


def _attend(store: ParamStore, q_tokens: Tensor, kv_tokens: Tensor, return_weights: bool = False,
            prefix: str = "fusion.attn"):
    return ad.multi_head_attention(
        q_tokens,
        kv_tokens,
        kv_tokens,
        store[f"{prefix}.wq"],
        store[f"{prefix}.wk"],
        store[f"{prefix}.wv"],
        store[f"{prefix}.wo"],
        num_heads=NUM_HEADS,
        return_weights=return_weights,
    )


def _stack_tokens(vectors: list[Tensor]) -> Tensor:
    batch = vectors[0].data.shape[0]
    return ad.concat([ad.reshape(v, (batch, 1, FEATURE_DIM)) for v in vectors], axis=1)


def fuse_step(
    store: ParamStore,
    h: Tensor,
    f_path: Tensor,
    f_camera: Tensor,
    f_lidar: Tensor,
    o_camera: Tensor,
    o_lidar: Tensor,
    return_internals: bool = False,
):
    """One fusion step of the complete model.

    K = V = [h, f_path, f_camera, f_lidar]; the state query is the
    concatenated occlusion-head hiddens. Returns (attended (B, 4, 64),
    new_state (B, 64)) with the new state hardtanh-bounded.
    """
    for name, t in (("h", h), ("f_path", f_path), ("f_camera", f_camera), ("f_lidar", f_lidar)):
        if t.data.ndim != 2 or t.data.shape[1] != FEATURE_DIM:
            raise ValueError(f"{name} must be (B, {FEATURE_DIM}), got {t.data.shape}")
    f_occ = ad.concat([o_camera, o_lidar], axis=1)
    if f_occ.data.shape[1] != FEATURE_DIM:
        raise ValueError("occlusion hiddens must concatenate to the feature width")
    kv = _stack_tokens([h, f_path, f_camera, f_lidar])
    q = _stack_tokens([f_occ, f_path, f_camera, f_lidar])
    attended, weights = _attend(store, q, kv, return_weights=True)
    new_state = ad.hardtanh(
        ad.reshape(ad.slice_axis(attended, 1, 0, 1), h.data.shape), -STATE_BOUND, STATE_BOUND
    )
    if return_internals:
        return attended, new_state, {"q_tokens": q, "kv_tokens": kv, "weights": weights}
    return attended, new_state


@dataclass
class StepOutput:
    """Everything one prediction step produces (tensors stay in the graph)."""

    y_hat: Tensor  # (B, T) failure probabilities
    new_state: Tensor  # (B, 64), bounded
    attended: Tensor  # (B, n_tokens, 64)
    y_camera: Tensor  # (B,) camera-occlusion probability
    y_lidar: Tensor | None  # (B,) or None for camera_only
    svae: SvaeOutput | None
    scans_normalized: Tensor | None
    occ_cam_hidden: Tensor | None
    occ_lidar_hidden: Tensor | None
    q_tokens: Tensor
    kv_tokens: Tensor
    attn_weights: Tensor


class FusionModel:
    """The anomaly predictor: encoders, occlusion heads, fusion, output head."""

    def __init__(self, config: WorldConfig, variant: str = "full", seed: int = 0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        config.validate()
        self.config = config
        self.variant = variant
        self.horizon = config.horizon
        self.has_lidar = variant != "camera_only"
        self.has_occ_heads = variant not in ("fixed_occlusion",)
        self.n_tokens = 4 if self.has_lidar else 3
        self.store = ParamStore()

        rng = np.random.default_rng([seed, 3])
        h, w = config.image_height, config.image_width
        self.path_encoder = PathEncoder(self.store, h, w, rng)
        self.camera_encoder = CameraEncoder(self.store, h, w, rng)
        self.scan_vae = ScanVae(self.store, config.lidar_beams, rng) if self.has_lidar else None
        add_attention_params(self.store, rng)
        if self.has_occ_heads:
            self.occ_cam = OcclusionHead(self.store, "fusion.occ_cam", rng)
            self.occ_lidar = OcclusionHead(self.store, "fusion.occ_lidar", rng) if self.has_lidar else None
        else:
            self.occ_cam = None
            self.occ_lidar = None
        add_linear(self.store, "fusion.head.fc1", self.n_tokens * FEATURE_DIM, HEAD_HIDDEN, rng)
        add_linear(self.store, "fusion.head.fc2", HEAD_HIDDEN, self.horizon, rng)

        if variant == "no_occlusion":
            # heads exist but are outside every gradient path; freeze them so
            # weight decay cannot silently move them either
            for name, p in self.store.items():
                if name.startswith("fusion.occ_"):
                    p.requires_grad = False

    # -- single step -----------------------------------------------------

    def zero_state(self, batch: int) -> Tensor:
        return Tensor(np.zeros((batch, FEATURE_DIM)))

    def predict_head(self, attended: Tensor, train: bool, rng: np.random.Generator | None) -> Tensor:
        batch = attended.data.shape[0]
        x = ad.reshape(attended, (batch, self.n_tokens * FEATURE_DIM))
        x = ad.relu(linear(self.store, "fusion.head.fc1", x))
        x = ad.dropout(x, DROPOUT_P, rng, train)
        return ad.sigmoid(linear(self.store, "fusion.head.fc2", x))

    def step(
        self,
        h: Tensor,
        scans: np.ndarray | None,
        cameras: np.ndarray,
        paths: np.ndarray,
        occ_auto: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> StepOutput:
        """One prediction step over a batch of frames.

        ``scans`` (B, L) raw ranges; ``cameras`` (B, 3, H, W); ``paths``
        (B, 1, H, W); ``occ_auto`` (B, 2) auto occlusion labels
        (camera, lidar) used by the fixed_occlusion variant.
        """
        batch = cameras.shape[0]
        f_path = self.path_encoder(Tensor(paths))
        f_camera = self.camera_encoder(Tensor(cameras))

        svae_out = None
        scans_norm = None
        f_lidar = None
        if self.has_lidar:
            if scans is None:
                raise ValueError(f"variant {self.variant!r} requires scans")
            scans_norm = Tensor(np.asarray(scans, dtype=np.float64) / self.config.lidar_max_range)
            svae_out = self.scan_vae.encode(scans_norm, rng, train)
            f_lidar = svae_out.feature

        cam_hidden = lidar_hidden = None
        if self.has_occ_heads:
            cam_hidden, y_camera = self.occ_cam(f_camera)
            if self.occ_lidar is not None:
                lidar_hidden, y_lidar = self.occ_lidar(f_lidar)
            else:
                y_lidar = None
        else:
            # fixed_occlusion: probabilities are the auto labels themselves
            y_camera = Tensor(occ_auto[:, 0].astype(np.float64))
            y_lidar = Tensor(occ_auto[:, 1].astype(np.float64))

        state_token = self.zero_state(batch) if self.variant == "no_state" else h

        if self.variant == "no_occlusion":
            q_state = state_token
        elif self.variant == "fixed_occlusion":
            q_state = Tensor(np.tile(occ_auto[:, :2].astype(np.float64), (1, FEATURE_DIM // 2)))
        elif self.variant == "camera_only":
            q_state = ad.concat([cam_hidden, Tensor(np.zeros((batch, OCC_HIDDEN)))], axis=1)
        else:
            q_state = ad.concat([cam_hidden, lidar_hidden], axis=1)

        features = [f_path, f_camera] + ([f_lidar] if self.has_lidar else [])
        kv = _stack_tokens([state_token] + features)
        q = _stack_tokens([q_state] + features)
        attended, weights = _attend(self.store, q, kv, return_weights=True)
        token0 = ad.reshape(ad.slice_axis(attended, 1, 0, 1), (batch, FEATURE_DIM))
        if self.variant == "no_state":
            new_state = self.zero_state(batch)
        else:
            new_state = ad.hardtanh(token0, -STATE_BOUND, STATE_BOUND)

        y_hat = self.predict_head(attended, train, rng)
        return StepOutput(
            y_hat=y_hat,
            new_state=new_state,
            attended=attended,
            y_camera=y_camera,
            y_lidar=y_lidar,
            svae=svae_out,
            scans_normalized=scans_norm,
            occ_cam_hidden=cam_hidden,
            occ_lidar_hidden=lidar_hidden,
            q_tokens=q,
            kv_tokens=kv,
            attn_weights=weights,
        )

    # -- sequences --------------------------------------------------------

    def forward_window(
        self,
        arrays: dict[str, np.ndarray],
        train: bool = False,
        rng: np.random.Generator | None = None,
        initial_state: Tensor | None = None,
    ) -> list[StepOutput]:
        """Run ``seq_len`` consecutive steps, threading the latent state.

        ``arrays`` holds (B, S, ...) stacks as produced by
        ``frames_to_arrays``. The state starts at zero unless given.
        """
        batch, seq_len = arrays["cameras"].shape[:2]
        h = initial_state if initial_state is not None else self.zero_state(batch)
        outputs = []
        for s in range(seq_len):
            out = self.step(
                h,
                arrays["scans"][:, s] if arrays.get("scans") is not None else None,
                arrays["cameras"][:, s],
                arrays["paths"][:, s],
                arrays["occ_auto"][:, s],
                train=train,
                rng=rng,
            )
            outputs.append(out)
            h = out.new_state
        return outputs

    def run_episodes(self, episodes: list[Episode]) -> dict[str, np.ndarray | list]:
        """Inference over whole episodes (state reset at each episode start).

        Returns numpy arrays per episode, concatenated frame-wise:
        ``y_hat`` (N, T), ``y_camera`` (N,), ``y_lidar`` (N,) or None,
        ``state_trace`` (N, 64), plus ``episode_slices`` mapping episodes to
        row ranges.
        """
        y_hat, y_cam, y_lid, trace, slices = [], [], [], [], []
        row = 0
        with ad.no_grad():
            for group in _group_by_length(episodes):
                arrays = frames_to_arrays([ep.frames for ep in group])
                outs = self.forward_window(arrays, train=False)
                n = len(outs)
                for b, ep in enumerate(group):
                    y_hat.append(np.stack([o.y_hat.data[b] for o in outs]))
                    y_cam.append(np.array([o.y_camera.data[b] for o in outs]))
                    if self.has_lidar:
                        y_lid.append(np.array([o.y_lidar.data[b] for o in outs]))
                    trace.append(np.stack([o.new_state.data[b] for o in outs]))
                    slices.append((ep, row, row + n))
                    row += n
        return {
            "y_hat": np.concatenate(y_hat) if y_hat else np.zeros((0, self.horizon)),
            "y_camera": np.concatenate(y_cam) if y_cam else np.zeros(0),
            "y_lidar": np.concatenate(y_lid) if (y_lid and self.has_lidar) else None,
            "state_trace": np.concatenate(trace) if trace else np.zeros((0, FEATURE_DIM)),
            "episode_slices": slices,
        }

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.store.items() if p.requires_grad]


def _group_by_length(episodes: list[Episode]):
    by_len: dict[int, list[Episode]] = {}
    for ep in episodes:
        by_len.setdefault(len(ep.frames), []).append(ep)
    for length in sorted(by_len):
        yield by_len[length]


def frames_to_arrays(frame_lists: list[list]) -> dict[str, np.ndarray]:
    """Stack per-window frame lists into (B, S, ...) float64 batch arrays."""
    seq_len = len(frame_lists[0])
    if any(len(fl) != seq_len for fl in frame_lists):
        raise ValueError("all windows in a batch must share one length")
    scans = np.stack([[f.scan for f in fl] for fl in frame_lists]).astype(np.float64)
    cameras = np.stack(
        [[np.moveaxis(f.camera, 2, 0) for f in fl] for fl in frame_lists]
    ).astype(np.float64)
    paths = np.stack([[f.path[None, :, :] for f in fl] for fl in frame_lists]).astype(np.float64)
    labels = np.stack([[f.y_future for f in fl] for fl in frame_lists]).astype(np.float64)
    occ_auto = np.stack(
        [[(f.occ_camera_auto, f.occ_lidar_auto) for f in fl] for fl in frame_lists]
    ).astype(np.float64)
    occ_true = np.stack(
        [[(f.occ_camera_true, f.occ_lidar_true) for f in fl] for fl in frame_lists]
    ).astype(np.float64)
    return {
        "scans": scans,
        "cameras": cameras,
        "paths": paths,
        "labels": labels,
        "occ_auto": occ_auto,
        "occ_true": occ_true,
    }
