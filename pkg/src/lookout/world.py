"""Synthetic 2D crop-row world: geometry, sensors, and episode generation.

The robot drives down a straight row between two crop walls, following a
smooth seeded wander around the centerline. Circular obstacles (sometimes
shrouded in canopy that occludes the sensors on approach) and standalone
canopy occlusion events are sampled per meter. Every frame carries ground
truth future-failure labels and both ground-truth and auto-labeled
occlusion flags.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .labeling import label_camera_occlusion, label_failures, label_lidar_occlusion

__all__ = [
    "WorldConfig",
    "Pose",
    "Geometry",
    "Frame",
    "Episode",
    "raycast_scan",
    "render_camera",
    "rasterize_path",
    "simulate_episode",
    "corrupt_scan",
    "occluded_camera",
]


@dataclass(frozen=True)
class WorldConfig:
    """Parameters of the simulated row, robot, and sensors.

    Defaults follow the field setup the model targets: 0.6 m/s at 3 Hz,
    a 1081-beam 270-degree scanner with 10 m range, and a 10-step
    prediction horizon. Images default to desk-scale 48x64.
    """

    row_half_width: float = 0.38
    row_length: float = 20.0
    obstacle_rate: float = 0.06  # events per meter
    occlusion_rate: float = 0.05  # events per meter
    occlusion_duration_range: tuple[int, int] = (2, 8)  # frames
    robot_speed: float = 0.6  # m/s
    tick_rate: float = 3.0  # Hz
    lidar_beams: int = 1081
    lidar_fov: float = 270.0  # degrees
    lidar_max_range: float = 10.0  # meters
    image_height: int = 48
    image_width: int = 64
    horizon: int = 10  # future steps labeled/predicted per frame
    rng_seed: int = 0
    # simulator shape parameters
    obstacle_radius_range: tuple[float, float] = (0.05, 0.15)
    obstacle_shroud_prob: float = 0.6  # canopy-covered obstacles occlude on approach
    shroud_distance: float = 0.6  # meters within which a shrouded obstacle occludes
    veer_rate: float = 0.01  # lateral row-exit events per meter
    wander_amplitude: float = 0.12  # meters of centerline wander
    collision_margin: float = 0.05  # meters added to obstacle radius
    lidar_noise: float = 0.01  # per-beam gaussian range noise, meters
    # camera model
    camera_height: float = 0.3  # meters above ground
    camera_axis_ground_distance: float = 1.0  # where the optical axis meets the ground
    camera_hfov_deg: float = 60.0
    # camera occlusion labeler thresholds (calibrated on this simulator)
    cam_occ_sharpness_min: float = 0.004
    cam_occ_variance_min: float = 0.004

    def validate(self) -> None:
        problems = []
        if self.row_half_width <= 0:
            problems.append("row_half_width must be positive")
        if self.row_length <= 0:
            problems.append("row_length must be positive")
        for name in ("obstacle_rate", "occlusion_rate", "veer_rate"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.tick_rate <= 0:
            problems.append("tick_rate must be positive")
        if self.robot_speed <= 0:
            problems.append("robot_speed must be positive")
        if not 0 < self.lidar_fov <= 360:
            problems.append("lidar_fov must be in (0, 360]")
        if self.lidar_beams < 2:
            problems.append("lidar_beams must be >= 2")
        if self.lidar_max_range <= 0:
            problems.append("lidar_max_range must be positive")
        if self.horizon < 1:
            problems.append("horizon must be >= 1")
        if self.image_height < 8 or self.image_width < 8:
            problems.append("image dimensions must be at least 8x8")
        lo, hi = self.occlusion_duration_range
        if lo < 1 or hi < lo:
            problems.append("occlusion_duration_range must satisfy 1 <= lo <= hi")
        rlo, rhi = self.obstacle_radius_range
        if rlo <= 0 or rhi < rlo:
            problems.append("obstacle_radius_range must satisfy 0 < lo <= hi")
        if not 0 <= self.obstacle_shroud_prob <= 1:
            problems.append("obstacle_shroud_prob must be in [0, 1]")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def frame_step(self) -> float:
        """Meters traveled per frame."""
        return self.robot_speed / self.tick_rate

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.row_length / self.frame_step))


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float  # radians, normalized to (-pi, pi]

    def __post_init__(self):
        h = math.remainder(self.heading, 2.0 * math.pi)
        if h <= -math.pi:
            h += 2.0 * math.pi
        object.__setattr__(self, "heading", h)


@dataclass(frozen=True)
class Geometry:
    """Static world geometry: wall segments plus circular obstacles."""

    segments: np.ndarray  # (S, 4): x1, y1, x2, y2
    circles: np.ndarray  # (O, 3): cx, cy, radius

    @classmethod
    def crop_row(cls, config: WorldConfig, obstacles: np.ndarray) -> "Geometry":
        hw = config.row_half_width
        # walls extend past both row ends so early/late scans stay bounded
        segs = np.array(
            [
                [-5.0, hw, config.row_length + 15.0, hw],
                [-5.0, -hw, config.row_length + 15.0, -hw],
            ]
        )
        circles = np.asarray(obstacles, dtype=np.float64).reshape(-1, 3)
        return cls(segments=segs, circles=circles)


@dataclass
class Frame:
    """One time step of synchronized sensor data and labels."""

    scan: np.ndarray  # (beams,) float64 ranges in (0, max_range]
    camera: np.ndarray  # (H, W, 3) float32 in [0, 1]
    path: np.ndarray  # (H, W) float32 in [0, 1]
    path_waypoints: np.ndarray  # (n, 2) float64, robot frame (forward, left)
    y_future: np.ndarray  # (horizon,) bool
    occ_lidar_true: bool
    occ_camera_true: bool
    occ_lidar_auto: bool
    occ_camera_auto: bool

    @property
    def anomalous(self) -> bool:
        return bool(self.y_future.any())


@dataclass
class Episode:
    frames: list[Frame]
    config: WorldConfig
    seed: int

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# lidar


def raycast_scan(geometry: Geometry, pose: Pose, config: WorldConfig) -> np.ndarray:
    """Nearest-intersection ranges for beams spanning the fov, capped at max range."""
    half = math.radians(config.lidar_fov) / 2.0
    angles = pose.heading + np.linspace(-half, half, config.lidar_beams)
    dx = np.cos(angles)
    dy = np.sin(angles)
    best = np.full(config.lidar_beams, config.lidar_max_range)

    segs = geometry.segments
    if segs.size:
        ax, ay = segs[:, 0], segs[:, 1]
        ex, ey = segs[:, 2] - ax, segs[:, 3] - ay
        # solve p + t*d = a + u*e for each (beam, segment) pair
        denom = dx[:, None] * ey[None, :] - dy[:, None] * ex[None, :]
        rx = ax[None, :] - pose.x
        ry = ay[None, :] - pose.y
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (rx * ey[None, :] - ry * ex[None, :]) / denom
            u = (rx * dy[:, None] - ry * dx[:, None]) / denom
        valid = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
        t = np.where(valid, t, np.inf)
        best = np.minimum(best, t.min(axis=1))

    circles = geometry.circles
    if circles.size:
        ox = circles[:, 0] - pose.x
        oy = circles[:, 1] - pose.y
        r = circles[:, 2]
        proj = dx[:, None] * ox[None, :] + dy[:, None] * oy[None, :]
        closest2 = (ox**2 + oy**2)[None, :] - proj**2
        disc = r[None, :] ** 2 - closest2
        hit = disc >= 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t_near = proj - sq
        t_far = proj + sq
        t = np.where(hit & (t_near > 1e-9), t_near, np.inf)
        # beam origin inside the circle: the sensor is buried, report contact
        inside = hit & (t_near <= 1e-9) & (t_far > 1e-9)
        t = np.where(inside, 0.01, t)
        best = np.minimum(best, t.min(axis=1))

    return np.clip(best, 0.01, config.lidar_max_range)


def corrupt_scan(
    ranges: np.ndarray, rng: np.random.Generator, sector_frac: float = 1.0, sector_shift: float = 0.0
) -> np.ndarray:
    """Overwrite an angular sector with canopy-contact clutter in [0.05, 0.25] m."""
    n = ranges.shape[0]
    width = max(1, int(round(sector_frac * n)))
    start = int(round((n - width) / 2.0 + sector_shift * n))
    start = min(max(start, 0), n - width)
    out = ranges.copy()
    out[start : start + width] = rng.uniform(0.05, 0.25, size=width)
    return out


# ---------------------------------------------------------------------------
# camera


@lru_cache(maxsize=8)
def _pixel_rays(h: int, w: int, hfov_deg: float, cam_height: float, axis_dist: float):
    """Per-pixel ray directions in the robot frame (forward, left, up)."""
    f = (w / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    cx = (w - 1) / 2.0
    cy = (h - 1) / 2.0
    pitch = math.atan2(cam_height, axis_dist)  # looking down
    u, v = np.meshgrid(np.arange(w), np.arange(h))
    # camera frame: x right, y down, z forward
    dx_c = (u - cx) / f
    dy_c = (v - cy) / f
    cp, sp = math.cos(pitch), math.sin(pitch)
    fwd = cp - dy_c * sp
    left = -dx_c
    up = -sp - dy_c * cp
    return f, cx, cy, pitch, fwd, left, up


def _camera_intrinsics(config: WorldConfig):
    return _pixel_rays(
        config.image_height,
        config.image_width,
        config.camera_hfov_deg,
        config.camera_height,
        config.camera_axis_ground_distance,
    )


def render_camera(
    pose: Pose,
    circles: np.ndarray,
    config: WorldConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Project the row onto the image plane with a ground-plane pinhole model."""
    f, cx, cy, pitch, fwd, left, up = _camera_intrinsics(config)
    h_cam = config.camera_height
    hw = config.row_half_width

    ground = up < -1e-6  # rays that eventually hit the ground plane
    t = np.where(ground, h_cam / np.maximum(-up, 1e-9), 40.0)
    gx = t * fwd  # forward distance in robot frame
    gy = t * left  # lateral (left positive)

    ch, sh = math.cos(pose.heading), math.sin(pose.heading)
    wx = pose.x + gx * ch - gy * sh
    wy = pose.y + gx * sh + gy * ch

    img = np.empty((config.image_height, config.image_width, 3))
    img[:] = [0.62, 0.72, 0.85]  # sky
    # slight sky gradient for vertical structure
    img[..., 2] += 0.1 * (np.arange(config.image_height) / config.image_height)[:, None]

    far = np.minimum(t, 40.0)
    fade = np.clip(1.0 - far / 25.0, 0.0, 1.0)
    soil = np.stack(
        [
            0.36 + 0.04 * np.sin(3.1 * wx) * np.cos(2.3 * wy),
            0.28 + 0.03 * np.sin(2.2 * wx + 1.0),
            0.20 + 0.02 * np.cos(2.9 * wx),
        ],
        axis=-1,
    )
    crop = np.stack(
        [
            0.18 + 0.05 * np.sin(5.3 * wx) * np.sin(3.7 * wy),
            0.42 + 0.08 * np.sin(4.1 * wx + 0.7),
            0.16 + 0.04 * np.cos(3.3 * wx + 2.0),
        ],
        axis=-1,
    )
    in_row = np.abs(wy) <= hw
    ground_color = np.where(in_row[..., None], soil, crop)
    horizon_color = np.array([0.55, 0.62, 0.66])
    ground_color = fade[..., None] * ground_color + (1.0 - fade[..., None]) * horizon_color
    img = np.where(ground[..., None], ground_color, img)

    circles = np.asarray(circles, dtype=np.float64).reshape(-1, 3)
    for ox, oy, r in circles:
        d2 = (wx - ox) ** 2 + (wy - oy) ** 2
        mask = ground & (d2 <= r * r)
        if mask.any():
            img[mask] = [0.13, 0.12, 0.11]

    if rng is not None:
        img = img * rng.uniform(0.92, 1.08) + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def occluded_camera(config: WorldConfig, rng: np.random.Generator) -> np.ndarray:
    """Low-variance canopy-contact noise replacing the true view."""
    base = rng.uniform(0.22, 0.34)
    img = base + 0.02 * rng.standard_normal((config.image_height, config.image_width, 3))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def project_point(config: WorldConfig, forward: float, left: float) -> tuple[float, float, float]:
    """Project a ground point in the robot frame; returns (u, v, depth)."""
    f, cx, cy, pitch, *_ = _camera_intrinsics(config)
    cp, sp = math.cos(pitch), math.sin(pitch)
    rel = np.array([forward, left, -config.camera_height])
    z = rel[0] * cp - rel[2] * sp
    x_cam = -rel[1]
    y_cam = -rel[0] * sp - rel[2] * cp
    if z <= 1e-9:
        return math.nan, math.nan, z
    return cx + f * x_cam / z, cy + f * y_cam / z, z


def rasterize_path(
    waypoints: np.ndarray, config: WorldConfig, near_plane: float = 0.05
) -> np.ndarray:
    """Draw the planned path as an anti-aliased curve on a blank image.

    Waypoints are (forward, left) ground points in the robot frame; points
    at or behind the near plane are dropped. An empty or fully-behind path
    yields an all-zero image.
    """
    h, w = config.image_height, config.image_width
    img = np.zeros((h, w))
    pts = np.asarray(waypoints, dtype=np.float64).reshape(-1, 2)
    uv = []
    for fwd_m, left_m in pts:
        u, v, z = project_point(config, fwd_m, left_m)
        if z > near_plane:
            uv.append((u, v))
    if not uv:
        return img.astype(np.float32)

    def splat(u, v, value):
        u0, v0 = int(math.floor(u)), int(math.floor(v))
        du, dv = u - u0, v - v0
        for (uu, vv, wgt) in (
            (u0, v0, (1 - du) * (1 - dv)),
            (u0 + 1, v0, du * (1 - dv)),
            (u0, v0 + 1, (1 - du) * dv),
            (u0 + 1, v0 + 1, du * dv),
        ):
            if 0 <= vv < h and 0 <= uu < w:
                img[vv, uu] = max(img[vv, uu], value * wgt)

    if len(uv) == 1:
        splat(uv[0][0], uv[0][1], 1.0)
    for (u1, v1), (u2, v2) in zip(uv[:-1], uv[1:]):
        length = math.hypot(u2 - u1, v2 - v1)
        steps = max(2, int(math.ceil(length * 2)) + 1)
        for s in np.linspace(0.0, 1.0, steps):
            splat(u1 + s * (u2 - u1), v1 + s * (v2 - v1), 1.0)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# episode generation


@dataclass
class _OcclusionEvent:
    start_frame: int
    end_frame: int  # exclusive
    lidar: bool
    camera: bool
    sector_frac: float
    sector_shift: float


def _lateral_profile(config: WorldConfig, xs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    amp = config.wander_amplitude
    a1 = amp * rng.uniform(0.4, 0.8)
    a2 = amp * rng.uniform(0.1, 0.3)
    lam1 = rng.uniform(6.0, 12.0)
    lam2 = rng.uniform(2.5, 5.0)
    ph1, ph2 = rng.uniform(0.0, 2 * math.pi, size=2)
    y = a1 * np.sin(2 * math.pi * xs / lam1 + ph1) + a2 * np.sin(2 * math.pi * xs / lam2 + ph2)

    n_veers = rng.poisson(config.veer_rate * config.row_length)
    for _ in range(n_veers):
        center = rng.uniform(2.0, max(2.5, config.row_length - 2.0))
        direction = 1.0 if rng.random() < 0.5 else -1.0
        peak = config.row_half_width + rng.uniform(0.05, 0.2)
        width = rng.uniform(0.8, 1.5)
        y = y + direction * peak * np.exp(-(((xs - center) / width) ** 2))
    return np.clip(y, -(config.row_half_width + 0.35), config.row_half_width + 0.35)


def _sample_obstacles(config: WorldConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Returns (obstacles (n,3), shrouded (n,) bool), sorted by x."""
    n = rng.poisson(config.obstacle_rate * config.row_length)
    if n == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    xs = rng.uniform(2.0, config.row_length + 2.0, size=n)
    band = max(config.row_half_width - 0.03, 0.01)
    ys = rng.uniform(-band, band, size=n)
    rs = rng.uniform(*config.obstacle_radius_range, size=n)
    shroud = rng.random(n) < config.obstacle_shroud_prob
    order = np.argsort(xs)
    return np.stack([xs, ys, rs], axis=1)[order], shroud[order]


def _sample_occlusions(
    config: WorldConfig, rng: np.random.Generator, n_frames: int
) -> list[_OcclusionEvent]:
    events = []
    n = rng.poisson(config.occlusion_rate * config.row_length)
    lo, hi = config.occlusion_duration_range
    for _ in range(n):
        start = int(rng.uniform(0.0, config.row_length) / config.frame_step)
        duration = int(rng.integers(lo, hi + 1))
        kind = rng.random()
        lidar, camera = (kind >= 0.3), (kind < 0.3 or kind >= 0.6)
        events.append(
            _OcclusionEvent(
                start_frame=min(start, n_frames - 1),
                end_frame=min(start + duration, n_frames),
                lidar=lidar,
                camera=camera,
                sector_frac=rng.uniform(0.85, 1.0),
                sector_shift=rng.uniform(-0.04, 0.04),
            )
        )
    return events


def simulate_episode(
    config: WorldConfig,
    *,
    obstacles: np.ndarray | None = None,
    shrouded: np.ndarray | None = None,
    occlusions: list[_OcclusionEvent] | None = None,
) -> Episode:
    """Generate one temporally-coherent labeled episode.

    Explicit ``obstacles`` ((n,3) arrays of x, y, radius), ``shrouded``
    flags, and ``occlusions`` override the seeded sampling; they exist for
    tests and stress experiments. Identical (config, overrides) always
    produce bit-identical episodes.
    """
    config.validate()
    rng_layout = np.random.default_rng([config.rng_seed, 1])
    rng_sensor = np.random.default_rng([config.rng_seed, 2])

    n = config.n_frames
    step = config.frame_step
    xs = np.arange(n) * step
    ys = _lateral_profile(config, xs, rng_layout)
    headings = np.empty(n)
    headings[:-1] = np.arctan2(np.diff(ys), step)
    headings[-1] = headings[-2] if n > 1 else 0.0

    sampled_obs, sampled_shroud = _sample_obstacles(config, rng_layout)
    if obstacles is None:
        obstacles, shrouded = sampled_obs, sampled_shroud
    else:
        obstacles = np.asarray(obstacles, dtype=np.float64).reshape(-1, 3)
        shrouded = (
            np.zeros(len(obstacles), dtype=bool)
            if shrouded is None
            else np.asarray(shrouded, dtype=bool)
        )
        if shrouded.shape != (len(obstacles),):
            raise ValueError("shrouded flags must match the obstacle count")
    sampled_events = _sample_occlusions(config, rng_layout, n)
    events = sampled_events if occlusions is None else list(occlusions)

    geometry = Geometry.crop_row(config, obstacles)

    # instantaneous failures: obstacle contact or lateral row exit
    if len(obstacles):
        d = np.hypot(xs[:, None] - obstacles[None, :, 0], ys[:, None] - obstacles[None, :, 1])
        collision = (d <= obstacles[None, :, 2] + config.collision_margin).any(axis=1)
        shroud_active = (d[:, shrouded] <= config.shroud_distance).any(axis=1) if shrouded.any() else np.zeros(n, dtype=bool)
    else:
        collision = np.zeros(n, dtype=bool)
        shroud_active = np.zeros(n, dtype=bool)
    exits = np.abs(ys) > config.row_half_width
    y_future = label_failures(collision | exits, config.horizon)

    occ_lidar = shroud_active.copy()
    occ_camera = shroud_active.copy()
    frame_events: list[list[_OcclusionEvent]] = [[] for _ in range(n)]
    for ev in events:
        for t in range(ev.start_frame, ev.end_frame):
            frame_events[t].append(ev)
            if ev.lidar:
                occ_lidar[t] = True
            if ev.camera:
                occ_camera[t] = True

    frames = []
    lookahead = config.horizon
    for t in range(n):
        pose = Pose(x=float(xs[t]), y=float(ys[t]), heading=float(headings[t]))
        ranges = raycast_scan(geometry, pose, config)
        if config.lidar_noise > 0:
            noise = rng_sensor.normal(0.0, config.lidar_noise, size=ranges.shape)
            ranges = np.clip(ranges + noise, 0.01, config.lidar_max_range)
        if occ_lidar[t]:
            fracs = [ev.sector_frac for ev in frame_events[t] if ev.lidar]
            shifts = [ev.sector_shift for ev in frame_events[t] if ev.lidar]
            if shroud_active[t] or not fracs:
                fracs, shifts = [1.0], [0.0]  # canopy envelops the whole scanner
            for frac, shift in zip(fracs, shifts):
                ranges = corrupt_scan(ranges, rng_sensor, frac, shift)

        if occ_camera[t]:
            camera = occluded_camera(config, rng_sensor)
        else:
            camera = render_camera(pose, obstacles, config, rng_sensor)

        future = np.arange(t + 1, min(t + 1 + lookahead, n))
        ch, sh = math.cos(pose.heading), math.sin(pose.heading)
        rel_x = xs[future] - pose.x
        rel_y = ys[future] - pose.y
        waypoints = np.stack([rel_x * ch + rel_y * sh, -rel_x * sh + rel_y * ch], axis=1)
        path = rasterize_path(waypoints, config)

        frames.append(
            Frame(
                scan=ranges,
                camera=camera,
                path=path,
                path_waypoints=waypoints,
                y_future=y_future[t].copy(),
                occ_lidar_true=bool(occ_lidar[t]),
                occ_camera_true=bool(occ_camera[t]),
                occ_lidar_auto=label_lidar_occlusion(ranges, config.lidar_fov),
                occ_camera_auto=label_camera_occlusion(
                    camera, config.cam_occ_sharpness_min, config.cam_occ_variance_min
                ),
            )
        )

    return Episode(frames=frames, config=config, seed=config.rng_seed)


def inject_total_occlusion(
    episode: Episode, k: int, rng: np.random.Generator
) -> Episode:
    """Copy of the episode with the final ``k`` frames totally occluded."""
    config = episode.config
    n = len(episode.frames)
    k = min(k, n)
    frames = []
    for t, fr in enumerate(episode.frames):
        if t < n - k:
            frames.append(fr)
            continue
        ranges = corrupt_scan(fr.scan, rng, 1.0, 0.0)
        camera = occluded_camera(config, rng)
        frames.append(
            Frame(
                scan=ranges,
                camera=camera,
                path=fr.path,
                path_waypoints=fr.path_waypoints,
                y_future=fr.y_future.copy(),
                occ_lidar_true=True,
                occ_camera_true=True,
                occ_lidar_auto=label_lidar_occlusion(ranges, config.lidar_fov),
                occ_camera_auto=label_camera_occlusion(
                    camera, config.cam_occ_sharpness_min, config.cam_occ_variance_min
                ),
            )
        )
    return Episode(frames=frames, config=config, seed=episode.seed)
