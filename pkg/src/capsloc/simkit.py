"""Seeded desk-scale simulator: ground-truth motion, magnetic Hall-array
readings at 50 Hz, and emulated visual-odometry deltas at 25 Hz.

The sensor array is an 8x8 grid of mono-axial sensors in the z = 0 plane
(2 cm pitch, centered on the origin), each measuring the z-component of the
field. The capsule moves below the array (negative z).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    Pose,
    Trajectory,
    apply_relative,
    euler_to_matrix,
    relative_pose,
    resample_trajectory,
    wrap_angle,
)

__all__ = [
    "MU0_OVER_4PI",
    "SENSOR_GRID_N",
    "SENSOR_PITCH",
    "MOTION_PROFILES",
    "SimConfig",
    "DipoleParams",
    "ActuatorFieldModel",
    "HallArrayReading",
    "VisMeasurement",
    "sensor_positions",
    "generate_trajectory",
    "dipole_field",
    "sample_hall_array",
    "simulate_mag_stream",
    "emulate_evo_stream",
    "Dataset",
    "write_dataset",
    "read_dataset",
    "simulate_dataset",
]

MU0_OVER_4PI = 1e-7  # T m / A
SENSOR_GRID_N = 8
SENSOR_PITCH = 0.02  # m
EXCLUSION_RADIUS = 1e-3  # m, dipole model breaks down at the magnet itself

MOTION_PROFILES = ("slow_incremental", "comprehensive_scan", "fast_complex")

# Per profile: peak translational speed (m/s), peak rotational speed (rad/s),
# sinusoid term count, translational and rotational frequency ranges (Hz).
_PROFILE_SPEEDS = {
    "slow_incremental": (0.004, 0.05, 3, (0.01, 0.05), (0.02, 0.08)),
    "comprehensive_scan": (0.025, 0.30, 4, (0.03, 0.10), (0.06, 0.20)),
    "fast_complex": (0.045, 0.60, 5, (0.05, 0.18), (0.10, 0.30)),
}

# Rotation amplitude caps (rad): roll, pitch, yaw. Roll (the rotation about
# the capsule's magnetic axis) is kept near zero: it is the magnetically
# unobservable degree of freedom, and a magnetically steered capsule is not
# actuated about its own dipole axis. Pitch/yaw stay modest so the attitude
# path's spherical holonomy stays small, and far from the gimbal branch at
# pi/2.
_ROT_AMP_CAP = np.array([0.02, 0.30, 0.35])

# Stationary actuation-jitter amplitudes per profile: (position sd in m,
# pitch/yaw sd in rad). Roll carries no jitter (magnetically unobservable
# axis), and the slow profile's jitter is kept small enough that its
# velocity contribution respects the profile's speed cap.
_PROFILE_JITTER = {
    "slow_incremental": (2e-5, 2e-4),
    "comprehensive_scan": (1e-3, 1e-2),
    "fast_complex": (2e-3, 2e-2),
}


@dataclass(frozen=True)
class SimConfig:
    duration: float = 60.0
    seed: int = 0
    motion_profile: str = "comprehensive_scan"
    workspace_half_extent: float = 0.1
    workspace_center: tuple = (0.0, 0.0, -0.08)
    mag_rate: float = 50.0
    vis_rate: float = 25.0
    mag_noise_sd: float = 5e-7
    vis_trans_noise_sd: float = 2e-4
    vis_rot_noise_sd: float = 2e-3
    vis_drift_rate: float = 0.02
    # Rotational drift of the emulated visual odometry: a scale-like bias on
    # each rotational increment. Visual odometry drifts much harder in
    # rotation than in translation (poor texture, small baselines), hence
    # the larger default.
    vis_rot_drift_rate: float = 0.2
    # Fixed instrument bias of the emulated visual odometry: a constant
    # additive offset on every body-frame increment (m/s along the body
    # forward axis, rad/s about the pitch axis). Integrated open loop it
    # produces drift that grows linearly with time regardless of the motion,
    # which is the classic failure mode of monocular odometry from a poorly
    # calibrated camera. Being constant across recordings, it is exactly the
    # kind of systematic error a learned fusion can calibrate away.
    vis_trans_bias_rate: float = 1.2e-3
    vis_rot_bias_rate: float = 6e-3
    # Actuation jitter: a stationary Ornstein-Uhlenbeck perturbation of the
    # pose (per-profile amplitude, scaled by jitter_scale). Its step-to-step
    # innovations are white and larger than the per-frame sensor noise, so
    # the fine structure of the motion cannot be extrapolated from history
    # alone — it must be read off the sensors.
    jitter_scale: float = 1.0
    jitter_tau: float = 0.5  # seconds, jitter correlation time
    slow_speed_cap: float = 0.005
    # Actuator field: uniform component (T) plus linear gradient (T/m).
    actuator_uniform: tuple = (2e-6, -1e-6, 3e-6)
    actuator_gradient: tuple = (1e-5, -2e-5, 3e-5)

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.mag_rate <= 0 or self.vis_rate <= 0:
            raise ValueError("rates must be positive")
        ratio = self.mag_rate / self.vis_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("mag_rate must be an integer multiple of vis_rate")
        if self.motion_profile not in MOTION_PROFILES:
            raise ValueError(f"unknown motion profile {self.motion_profile!r}")

    @property
    def rate_ratio(self) -> int:
        return int(round(self.mag_rate / self.vis_rate))


@dataclass(frozen=True)
class DipoleParams:
    # Sized so the dipole field at the 6-10 cm standoff sits well above the
    # 5e-7 T noise floor (SNR ~ 20) while leaving millimeter-scale inversion
    # error for the fusion baselines to compete against.
    moment_magnitude: float = 8e-3  # A m^2
    moment_axis: tuple = (1.0, 0.0, 0.0)  # body frame, unit

    def __post_init__(self):
        axis = np.asarray(self.moment_axis, dtype=float).reshape(3)
        if self.moment_magnitude <= 0:
            raise ValueError("moment_magnitude must be positive")
        if abs(np.linalg.norm(axis) - 1.0) > 1e-12:
            raise ValueError("moment_axis must be unit-norm")
        object.__setattr__(self, "moment_axis", tuple(axis))


class ActuatorFieldModel:
    """Known actuator field: uniform component plus linear gradient.

    B(p) = b0 + G * p with diagonal gradient coefficients g.
    """

    def __init__(self, uniform=(0.0, 0.0, 0.0), gradient=(0.0, 0.0, 0.0)):
        self.uniform = np.asarray(uniform, dtype=float).reshape(3)
        self.gradient = np.asarray(gradient, dtype=float).reshape(3)

    def field(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.uniform + self.gradient * p

    @staticmethod
    def zero() -> "ActuatorFieldModel":
        return ActuatorFieldModel()

    @staticmethod
    def from_config(cfg: SimConfig) -> "ActuatorFieldModel":
        return ActuatorFieldModel(cfg.actuator_uniform, cfg.actuator_gradient)


@dataclass
class HallArrayReading:
    timestamp: float
    values: np.ndarray  # (8, 8) tesla, z-component per sensor

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(
            SENSOR_GRID_N, SENSOR_GRID_N
        )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite Hall reading")


@dataclass
class VisMeasurement:
    timestamp: float
    delta: Pose  # frame-to-frame motion in the previous camera frame


def sensor_positions() -> np.ndarray:
    """(8, 8, 3) world positions of the Hall sensors (fixed geometry)."""
    idx = (np.arange(SENSOR_GRID_N) - (SENSOR_GRID_N - 1) / 2.0) * SENSOR_PITCH
    xx, yy = np.meshgrid(idx, idx, indexing="ij")
    pos = np.zeros((SENSOR_GRID_N, SENSOR_GRID_N, 3))
    pos[:, :, 0] = xx
    pos[:, :, 1] = yy
    return pos


def _seeded_sinusoids(rng, n_terms, amp_budget, freq_range):
    """Coefficients for a sum of sinusoids with total amplitude <= amp_budget."""
    raw = rng.uniform(0.3, 1.0, size=n_terms)
    amps = raw / raw.sum() * amp_budget
    freqs = rng.uniform(*freq_range, size=n_terms)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_terms)
    return amps, freqs, phases


def _eval_sinusoids(t, amps, freqs, phases):
    t = np.asarray(t, dtype=float)[:, None]
    return np.sum(amps * np.sin(2.0 * np.pi * freqs * t + phases), axis=1)


def generate_trajectory(cfg: SimConfig) -> Trajectory:
    """Smooth seeded C1 path: sums of low-frequency sinusoids per DoF.

    Sampled at mag_rate; deterministic for a fixed (config, seed).
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5117]))
    v_peak, w_peak, n_terms, freq_range, rot_freq_range = _PROFILE_SPEEDS[
        cfg.motion_profile
    ]
    if cfg.motion_profile == "slow_incremental":
        # Keep total speed under the configured cap with margin.
        v_peak = min(v_peak, 0.5 * cfg.slow_speed_cap)

    n = int(round(cfg.duration * cfg.mag_rate))
    times = np.arange(n) / cfg.mag_rate
    poses = np.zeros((n, 6))
    center = np.asarray(cfg.workspace_center, dtype=float)

    # Translation: per-axis amplitude budget bounded by both workspace size
    # and the peak-speed budget (speed of A sin(2 pi f t) is 2 pi f A).
    amp_cap = 0.55 * cfg.workspace_half_extent
    for axis in range(3):
        f_mid = np.mean(freq_range)
        amp_budget = min(amp_cap, v_peak / (2.0 * np.pi * f_mid * np.sqrt(3.0)))
        amps, freqs, phases = _seeded_sinusoids(rng, n_terms, amp_budget, freq_range)
        poses[:, axis] = center[axis] + _eval_sinusoids(times, amps, freqs, phases)

    for axis in range(3):
        f_mid = np.mean(rot_freq_range)
        amp_budget = min(
            _ROT_AMP_CAP[axis], w_peak / (2.0 * np.pi * f_mid * np.sqrt(3.0))
        )
        amps, freqs, phases = _seeded_sinusoids(
            rng, n_terms, amp_budget, rot_freq_range
        )
        poses[:, 3 + axis] = _eval_sinusoids(times, amps, freqs, phases)

    # Actuation jitter: stationary Ornstein-Uhlenbeck perturbations on the
    # position axes and the two non-roll rotation axes. Sinusoids alone are
    # predictable from history, so a recurrent estimator could track them
    # without consulting its inputs; the jitter's white innovations exceed
    # the per-frame sensor noise, making measurement use the only way to
    # follow the fine structure of the motion.
    pos_sd, rot_sd = _PROFILE_JITTER[cfg.motion_profile]
    sds = cfg.jitter_scale * np.array(
        [pos_sd, pos_sd, pos_sd, 0.0, rot_sd, rot_sd]
    )
    if np.any(sds > 0):
        dt = 1.0 / cfg.mag_rate
        decay = np.exp(-dt / cfg.jitter_tau)
        innov = np.sqrt(1.0 - decay * decay)
        noise = rng.normal(size=(n, 6)) * sds
        jitter = np.empty((n, 6))
        jitter[0] = noise[0]  # draw the stationary distribution directly
        for k in range(1, n):
            jitter[k] = decay * jitter[k - 1] + innov * noise[k]
        poses += jitter

    return Trajectory(times, poses)


def dipole_field(capsule_pose: Pose, dipole: DipoleParams, query_point) -> np.ndarray:
    """Point-dipole field at query_point (world), tesla.

    B(r) = (mu0 / 4 pi) (3 (m.rhat) rhat - m) / |r|^3
    """
    q = np.asarray(query_point, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    m = dipole.moment_magnitude * (
        euler_to_matrix(capsule_pose.r) @ np.asarray(dipole.moment_axis)
    )
    r = q - capsule_pose.t
    dist = np.linalg.norm(r, axis=-1)
    if np.any(dist <= EXCLUSION_RADIUS):
        raise ValueError("query point within 1 mm of the dipole")
    rhat = r / dist[:, None]
    B = MU0_OVER_4PI * (3.0 * (rhat @ m)[:, None] * rhat - m) / dist[:, None] ** 3
    return B[0] if single else B


def sample_hall_array(
    capsule_pose: Pose,
    dipole: DipoleParams,
    actuator: ActuatorFieldModel,
    t: float,
    noise_sd: float,
    rng,
) -> HallArrayReading:
    """One 8x8 reading: normal (z) component of dipole + actuator field + noise."""
    pos = sensor_positions().reshape(-1, 3)
    bz = dipole_field(capsule_pose, dipole, pos)[:, 2]
    bz = bz + actuator.field(pos)[:, 2]
    if noise_sd > 0:
        bz = bz + rng.normal(0.0, noise_sd, size=bz.shape)
    return HallArrayReading(t, bz.reshape(SENSOR_GRID_N, SENSOR_GRID_N))


def simulate_mag_stream(
    gt: Trajectory, cfg: SimConfig, dipole: DipoleParams, rng
) -> list:
    """Hall readings at k / mag_rate for every ground-truth sample time."""
    actuator = ActuatorFieldModel.from_config(cfg)
    return [
        sample_hall_array(gt.pose(k), dipole, actuator, gt.times[k],
                          cfg.mag_noise_sd, rng)
        for k in range(len(gt))
    ]


def emulate_evo_stream(gt: Trajectory, cfg: SimConfig, rng) -> list:
    """Visual-odometry deltas at vis_rate with Gaussian noise plus a seeded
    slowly-varying drift bias proportional to distance traveled.

    With zero noise and drift, integrating the deltas reproduces gt exactly.
    """
    n = int(round(cfg.duration * cfg.vis_rate))
    ts = np.arange(n + 1) / cfg.vis_rate
    # The ground truth is sampled on [0, duration); clamp the final query.
    poses = resample_trajectory(gt, np.minimum(ts, gt.times[-1]))
    poses = Trajectory(ts, poses.poses) if ts[-1] > gt.times[-1] else poses

    drift_dir = rng.normal(size=3)
    drift_dir /= np.linalg.norm(drift_dir)
    drift_freq = rng.uniform(0.01, 0.03)
    drift_phase = rng.uniform(0.0, 2.0 * np.pi)

    # Constant per-increment instrument bias (see SimConfig).
    t_bias = np.array([cfg.vis_trans_bias_rate / cfg.vis_rate, 0.0, 0.0])
    r_const = np.array([0.0, cfg.vis_rot_bias_rate / cfg.vis_rate, 0.0])

    out = []
    for k in range(1, len(ts)):
        delta = relative_pose(poses.pose(k - 1), poses.pose(k))
        step_len = np.linalg.norm(delta.t)
        # Drift: dominant component scales the motion itself; a smaller
        # seeded slowly-varying component pushes along a fixed direction.
        slow = 0.15 * np.sin(2.0 * np.pi * drift_freq * ts[k] + drift_phase)
        bias = cfg.vis_drift_rate * (delta.t + step_len * slow * drift_dir) + t_bias
        # Rotation drifts the same way: a scale-like bias on each rotational
        # increment, so integrated attitude error grows with rotation traveled.
        r_bias = cfg.vis_rot_drift_rate * delta.r + r_const
        t_noise = rng.normal(0.0, cfg.vis_trans_noise_sd, size=3)
        r_noise = rng.normal(0.0, cfg.vis_rot_noise_sd, size=3)
        out.append(
            VisMeasurement(
                float(ts[k]),
                Pose(delta.t + bias + t_noise, wrap_angle(delta.r + r_bias + r_noise)),
            )
        )
    return out


@dataclass
class Dataset:
    config: SimConfig
    dipole: DipoleParams
    gt: Trajectory
    mag: list  # of HallArrayReading
    vis: list  # of VisMeasurement


def simulate_dataset(cfg: SimConfig, dipole: DipoleParams | None = None) -> Dataset:
    """Full seeded dataset: gt + 50 Hz Hall readings + 25 Hz EVO deltas."""
    dipole = dipole or DipoleParams()
    gt = generate_trajectory(cfg)
    rng_mag = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xA6]))
    rng_vis = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE7]))
    mag = simulate_mag_stream(gt, cfg, dipole, rng_mag)
    vis = emulate_evo_stream(gt, cfg, rng_vis)
    return Dataset(cfg, dipole, gt, mag, vis)


FORMAT_VERSION = "capsloc-dataset v1"


def _config_kv(cfg: SimConfig, dipole: DipoleParams) -> str:
    items = {
        "duration": cfg.duration,
        "seed": cfg.seed,
        "motion_profile": cfg.motion_profile,
        "workspace_half_extent": cfg.workspace_half_extent,
        "workspace_center": ",".join(repr(float(v)) for v in cfg.workspace_center),
        "mag_rate": cfg.mag_rate,
        "vis_rate": cfg.vis_rate,
        "mag_noise_sd": cfg.mag_noise_sd,
        "vis_trans_noise_sd": cfg.vis_trans_noise_sd,
        "vis_rot_noise_sd": cfg.vis_rot_noise_sd,
        "vis_drift_rate": cfg.vis_drift_rate,
        "vis_rot_drift_rate": cfg.vis_rot_drift_rate,
        "vis_trans_bias_rate": cfg.vis_trans_bias_rate,
        "vis_rot_bias_rate": cfg.vis_rot_bias_rate,
        "jitter_scale": cfg.jitter_scale,
        "jitter_tau": cfg.jitter_tau,
        "slow_speed_cap": cfg.slow_speed_cap,
        "actuator_uniform": ",".join(repr(float(v)) for v in cfg.actuator_uniform),
        "actuator_gradient": ",".join(repr(float(v)) for v in cfg.actuator_gradient),
        "moment_magnitude": dipole.moment_magnitude,
        "moment_axis": ",".join(repr(float(v)) for v in dipole.moment_axis),
    }
    return " ".join(f"{k}={v}" for k, v in items.items())


def write_dataset(path, ds: Dataset) -> None:
    with open(path, "w") as f:
        f.write(f"# {FORMAT_VERSION} {_config_kv(ds.config, ds.dipole)}\n")
        for t, p in zip(ds.gt.times, ds.gt.poses):
            f.write("GT " + " ".join(repr(float(v)) for v in (t, *p)) + "\n")
        for m in ds.mag:
            vals = " ".join(repr(float(v)) for v in m.values.ravel())
            f.write(f"MAG {float(m.timestamp)!r} {vals}\n")
        for v in ds.vis:
            vals = " ".join(repr(float(x)) for x in v.delta.as_vector())
            f.write(f"VIS {float(v.timestamp)!r} {vals}\n")


def _parse_header(line: str):
    body = line[1:].strip()
    if not body.startswith(FORMAT_VERSION):
        raise ValueError(f"unrecognized dataset header: {line.strip()!r}")
    kv = {}
    for tok in body[len(FORMAT_VERSION):].split():
        k, _, v = tok.partition("=")
        kv[k] = v
    def fvec(s):
        return tuple(float(x) for x in s.split(","))
    cfg = SimConfig(
        duration=float(kv["duration"]),
        seed=int(kv["seed"]),
        motion_profile=kv["motion_profile"],
        workspace_half_extent=float(kv["workspace_half_extent"]),
        workspace_center=fvec(kv["workspace_center"]),
        mag_rate=float(kv["mag_rate"]),
        vis_rate=float(kv["vis_rate"]),
        mag_noise_sd=float(kv["mag_noise_sd"]),
        vis_trans_noise_sd=float(kv["vis_trans_noise_sd"]),
        vis_rot_noise_sd=float(kv["vis_rot_noise_sd"]),
        vis_drift_rate=float(kv["vis_drift_rate"]),
        vis_rot_drift_rate=float(kv["vis_rot_drift_rate"]),
        vis_trans_bias_rate=float(kv["vis_trans_bias_rate"]),
        vis_rot_bias_rate=float(kv["vis_rot_bias_rate"]),
        jitter_scale=float(kv["jitter_scale"]),
        jitter_tau=float(kv["jitter_tau"]),
        slow_speed_cap=float(kv["slow_speed_cap"]),
        actuator_uniform=fvec(kv["actuator_uniform"]),
        actuator_gradient=fvec(kv["actuator_gradient"]),
    )
    dipole = DipoleParams(float(kv["moment_magnitude"]), fvec(kv["moment_axis"]))
    return cfg, dipole


def read_dataset(path) -> Dataset:
    cfg = dipole = None
    gt_t, gt_p, mag, vis = [], [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            try:
                if line.startswith("#"):
                    if cfg is None:
                        cfg, dipole = _parse_header(line)
                    continue
                kind, rest = line.split(" ", 1)
                vals = [float(x) for x in rest.split()]
                if kind == "GT":
                    if len(vals) != 7:
                        raise ValueError("GT record needs 7 fields")
                    gt_t.append(vals[0])
                    gt_p.append(vals[1:])
                elif kind == "MAG":
                    if len(vals) != 1 + SENSOR_GRID_N**2:
                        raise ValueError("MAG record needs 65 fields")
                    mag.append(HallArrayReading(vals[0], np.array(vals[1:])))
                elif kind == "VIS":
                    if len(vals) != 7:
                        raise ValueError("VIS record needs 7 fields")
                    vis.append(VisMeasurement(vals[0], Pose.from_vector(vals[1:])))
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    if cfg is None:
        raise ValueError(f"{path}:1: missing dataset header")
    return Dataset(cfg, dipole, Trajectory(np.array(gt_t), np.array(gt_p)), mag, vis)
