"""5-DoF magnetic localization from Hall-array readings.

Pipeline per frame: subtract the known actuator field, then fit the point
dipole model to the residual cells by Levenberg-Marquardt over five
parameters (position x, y, z and heading spherical angles theta, phi).
Rotation of the capsule about its own dipole axis is unobservable, hence
5 DoF. A second-order directional difference of the residual grid serves
as an outlier gate on streaming input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simkit import (
    MU0_OVER_4PI,
    SENSOR_GRID_N,
    SENSOR_PITCH,
    ActuatorFieldModel,
    DipoleParams,
    HallArrayReading,
    sensor_positions,
)

__all__ = [
    "MagMeasurement5DoF",
    "InversionSettings",
    "DivergenceError",
    "heading_from_angles",
    "angles_from_heading",
    "subtract_actuator_field",
    "directional_second_difference",
    "predict_normal_components",
    "estimate_pose_5dof",
    "grid_search_init",
    "localize_stream",
]


@dataclass
class MagMeasurement5DoF:
    timestamp: float
    position: np.ndarray  # (3,) m, world
    heading: np.ndarray  # (3,) unit, dipole axis direction in world
    converged: bool = True
    residual: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        h = np.asarray(self.heading, dtype=float).reshape(3)
        n = np.linalg.norm(h)
        if abs(n - 1.0) > 1e-9:
            raise ValueError("heading must be unit-norm")
        self.heading = h / n


@dataclass(frozen=True)
class InversionSettings:
    max_iterations: int = 60
    convergence_tol: float = 1e-12  # relative step norm
    initial_damping: float = 1e-3
    restart_count: int = 3
    jacobian_step: float = 1e-7
    outlier_gate: float = 5.0  # x running median of differentiated residual

    def __post_init__(self):
        if self.convergence_tol <= 0 or self.initial_damping <= 0:
            raise ValueError("tolerances must be positive")


class DivergenceError(RuntimeError):
    """Inversion failed to converge; carries the best estimate found."""

    def __init__(self, message, best: MagMeasurement5DoF):
        super().__init__(message)
        self.best = best


def heading_from_angles(theta: float, phi: float) -> np.ndarray:
    st, ct = np.sin(theta), np.cos(theta)
    return np.array([st * np.cos(phi), st * np.sin(phi), ct])


def angles_from_heading(h) -> tuple[float, float]:
    h = np.asarray(h, dtype=float)
    theta = float(np.arccos(np.clip(h[2], -1.0, 1.0)))
    phi = float(np.arctan2(h[1], h[0]))
    return theta, phi


def subtract_actuator_field(
    reading: HallArrayReading, actuator: ActuatorFieldModel
) -> HallArrayReading:
    pos = sensor_positions().reshape(-1, 3)
    bz = actuator.field(pos)[:, 2].reshape(SENSOR_GRID_N, SENSOR_GRID_N)
    return HallArrayReading(reading.timestamp, reading.values - bz)


def directional_second_difference(reading: HallArrayReading) -> np.ndarray:
    """Discrete second difference across the grid (Laplacian stencil).

    Interior cells use the 4-neighbor stencil; edge cells use one-sided
    second differences, so any constant-plus-linear field maps to zero.
    """
    v = reading.values if isinstance(reading, HallArrayReading) else np.asarray(reading)

    def second_diff_1d(a, axis):
        a = np.moveaxis(a, axis, 0)
        out = np.empty_like(a)
        out[1:-1] = a[2:] - 2.0 * a[1:-1] + a[:-2]
        out[0] = a[2] - 2.0 * a[1] + a[0]
        out[-1] = a[-1] - 2.0 * a[-2] + a[-3]
        return np.moveaxis(out, 0, axis)

    return second_diff_1d(v, 0) + second_diff_1d(v, 1)


def predict_normal_components(
    params: np.ndarray, dipole: DipoleParams
) -> np.ndarray:
    """z-component of the dipole field at all 64 sensors for parameters
    (x, y, z, theta, phi). Vectorized closed form, no Pose construction."""
    pos = sensor_positions().reshape(-1, 3)
    p = params[:3]
    m = dipole.moment_magnitude * heading_from_angles(params[3], params[4])
    r = pos - p
    dist = np.linalg.norm(r, axis=1)
    mdotr = r @ m
    bz = MU0_OVER_4PI * (3.0 * mdotr * r[:, 2] / dist**2 - m[2]) / dist**3
    return bz


def _residual(params, target_flat, dipole):
    return predict_normal_components(params, dipole) - target_flat


def _numeric_jacobian(params, target_flat, dipole, step):
    J = np.empty((target_flat.size, 5))
    for i in range(5):
        dp = np.zeros(5)
        dp[i] = step
        J[:, i] = (
            _residual(params + dp, target_flat, dipole)
            - _residual(params - dp, target_flat, dipole)
        ) / (2.0 * step)
    return J


def _levenberg_marquardt(params0, target_flat, dipole, settings):
    params = params0.copy()
    r = _residual(params, target_flat, dipole)
    cost = float(r @ r)
    lam = settings.initial_damping
    iters = 0
    for iters in range(1, settings.max_iterations + 1):
        cost_prev = cost
        J = _numeric_jacobian(params, target_flat, dipole, settings.jacobian_step)
        g = J.T @ r
        H = J.T @ J
        stepped = False
        for _ in range(25):
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-300), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = params + delta
            r_trial = _residual(trial, target_flat, dipole)
            cost_trial = float(r_trial @ r_trial)
            if cost_trial < cost:
                scale = np.linalg.norm(params) + 1e-12
                rel_step = np.linalg.norm(delta) / scale
                params, r, cost = trial, r_trial, cost_trial
                lam = max(lam / 10.0, 1e-14)
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            return params, cost, iters, True  # stalled at a minimum
        if rel_step < settings.convergence_tol:
            return params, cost, iters, True
        if cost_prev - cost <= 1e-9 * cost_prev:
            return params, cost, iters, True  # at the noise floor
    return params, cost, iters, False


def estimate_pose_5dof(
    reading: HallArrayReading,
    actuator: ActuatorFieldModel,
    dipole: DipoleParams,
    init: MagMeasurement5DoF,
    settings: InversionSettings = InversionSettings(),
) -> MagMeasurement5DoF:
    """Levenberg-Marquardt fit of position + heading to one reading."""
    target = subtract_actuator_field(reading, actuator).values.ravel()
    theta, phi = angles_from_heading(init.heading)
    params0 = np.concatenate([init.position, [theta, phi]])

    best = None
    rng = np.random.default_rng(0xC0FFEE)
    for attempt in range(settings.restart_count + 1):
        p0 = params0.copy()
        if attempt > 0:
            p0[:3] += rng.normal(0.0, 0.01, size=3)
            p0[3:] += rng.normal(0.0, 0.15, size=2)
        params, cost, iters, ok = _levenberg_marquardt(p0, target, dipole, settings)
        est = MagMeasurement5DoF(
            reading.timestamp,
            params[:3],
            heading_from_angles(params[3], params[4]),
            converged=ok,
            residual=float(np.sqrt(cost)),
            iterations=iters,
        )
        if best is None or est.residual < best.residual:
            best = est
        if ok:
            return best
    raise DivergenceError(
        f"no convergence after {settings.restart_count + 1} attempts", best
    )


def grid_search_init(
    reading: HallArrayReading,
    actuator: ActuatorFieldModel,
    dipole: DipoleParams,
    workspace_center=(0.0, 0.0, -0.08),
    workspace_half_extent: float = 0.1,
) -> MagMeasurement5DoF:
    """Coarse init: 5x5x3 position grid x 26 heading directions, lowest residual."""
    target = subtract_actuator_field(reading, actuator).values.ravel()
    c = np.asarray(workspace_center, dtype=float)
    he = workspace_half_extent
    xs = np.linspace(c[0] - he, c[0] + he, 5)
    ys = np.linspace(c[1] - he, c[1] + he, 5)
    zs = np.linspace(c[2] - 0.6 * he, c[2] + 0.6 * he, 3)
    dirs = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                d = np.array([dx, dy, dz], dtype=float)
                dirs.append(d / np.linalg.norm(d))
    best_params, best_cost = None, np.inf
    for x in xs:
        for y in ys:
            for z in zs:
                if z > -0.01:
                    continue
                for d in dirs:
                    theta, phi = angles_from_heading(d)
                    p = np.array([x, y, z, theta, phi])
                    r = _residual(p, target, dipole)
                    cost = float(r @ r)
                    if cost < best_cost:
                        best_params, best_cost = p, cost
    return MagMeasurement5DoF(
        reading.timestamp,
        best_params[:3],
        heading_from_angles(best_params[3], best_params[4]),
        residual=float(np.sqrt(best_cost)),
    )


def localize_stream(
    readings,
    actuator: ActuatorFieldModel,
    dipole: DipoleParams,
    settings: InversionSettings = InversionSettings(),
    workspace_center=(0.0, 0.0, -0.08),
    workspace_half_extent: float = 0.1,
    diagnostics_path=None,
) -> list:
    """Streaming inversion: frame k warm-started from frame k-1.

    Per-frame divergence is recorded in the output's converged flag and the
    previous estimate is carried forward.
    """
    out = []
    prev = None
    gate_history = []
    diag = open(diagnostics_path, "w") if diagnostics_path else None
    try:
        for reading in readings:
            if prev is None:
                init = grid_search_init(
                    reading, actuator, dipole, workspace_center, workspace_half_extent
                )
            else:
                init = prev
            try:
                est = estimate_pose_5dof(reading, actuator, dipole, init, settings)
            except DivergenceError as e:
                carried = e.best
                if prev is not None:
                    carried = MagMeasurement5DoF(
                        reading.timestamp,
                        prev.position,
                        prev.heading,
                        converged=False,
                        residual=e.best.residual,
                        iterations=e.best.iterations,
                    )
                else:
                    carried.converged = False
                est = carried

            # Outlier gate: second-difference of the fit residual grid vs the
            # running median. Gated frames keep the previous estimate.
            subtracted = subtract_actuator_field(reading, actuator).values
            fit = predict_normal_components(
                np.concatenate([est.position, angles_from_heading(est.heading)]),
                dipole,
            ).reshape(SENSOR_GRID_N, SENSOR_GRID_N)
            gate_val = float(
                np.linalg.norm(directional_second_difference(subtracted - fit))
            )
            if len(gate_history) >= 10 and prev is not None:
                med = float(np.median(gate_history))
                if med > 0 and gate_val > settings.outlier_gate * med:
                    est = MagMeasurement5DoF(
                        reading.timestamp,
                        prev.position,
                        prev.heading,
                        converged=False,
                        residual=est.residual,
                        iterations=est.iterations,
                    )
            gate_history.append(gate_val)
            if len(gate_history) > 200:
                gate_history.pop(0)

            out.append(est)
            prev = est
            if diag is not None:
                diag.write(
                    f"{est.timestamp!r} iterations={est.iterations} "
                    f"residual={est.residual!r} converged={int(est.converged)}\n"
                )
    finally:
        if diag is not None:
            diag.close()
    return out
