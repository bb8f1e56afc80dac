"""Desk-scale continuous-control environments.

Two tasks share one interface: a pendulum swing-up (never terminates, only
truncates) and a 2-D point mass that terminates when it leaves the arena.
Physical constants are conventional choices, overridable through ``params``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

CTRL_COST_PRESETS = {"humanoid": 0.1, "walker": 0.001, "none": 0.0}


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool


def wrap_angle(theta: float) -> float:
    """Map to (-pi, pi]."""
    w = math.fmod(theta + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


# --------------------------------------------------------------------------
# Pendulum
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PendulumParams:
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    max_torque: float = 2.0
    max_speed: float = 8.0
    damping: float = 0.0
    dt: float = 0.05
    c_ctrl: float = CTRL_COST_PRESETS["walker"]
    start_noise: float = 0.05  # reset perturbation around the hanging position


def pendulum_energy(theta: float, theta_dot: float, p: PendulumParams = PendulumParams()) -> float:
    """Mechanical energy of a uniform rod pivoting at one end (zero at horizontal)."""
    inertia = p.mass * p.length ** 2 / 3.0
    return 0.5 * inertia * theta_dot ** 2 + p.mass * p.gravity * 0.5 * p.length * math.cos(theta)


def pendulum_obs(theta: float, theta_dot: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta), theta_dot])


def pendulum_step(state, action, dt: float | None = None, p: PendulumParams = PendulumParams()):
    """Advance ``(theta, theta_dot)`` one semi-implicit Euler step.

    ``theta = 0`` is upright. The reward is evaluated at the pre-step state:
    ``-(theta^2 + 0.1 theta_dot^2 + c_ctrl a^2)``. Returns ``(new_state, StepResult)``;
    the result never reports termination.
    """
    dt = p.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    theta, theta_dot = float(state[0]), float(state[1])
    a = float(np.clip(np.ravel(action)[0], -1.0, 1.0))
    reward = -(wrap_angle(theta) ** 2 + 0.1 * theta_dot ** 2 + p.c_ctrl * a * a)
    acc = (3.0 * p.gravity / (2.0 * p.length) * math.sin(theta)
           + 3.0 / (p.mass * p.length ** 2) * p.max_torque * a
           - p.damping * theta_dot)
    theta_dot = float(np.clip(theta_dot + acc * dt, -p.max_speed, p.max_speed))
    theta = wrap_angle(theta + theta_dot * dt)
    new_state = (theta, theta_dot)
    return new_state, StepResult(pendulum_obs(theta, theta_dot), reward, False, False)


# --------------------------------------------------------------------------
# Point mass
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PointMassParams:
    arena: float = 1.0  # half-width of the square arena
    accel: float = 1.0
    dt: float = 0.05
    c_ctrl: float = CTRL_COST_PRESETS["walker"]
    goal: tuple = (0.0, 0.0)


def pointmass_step(state, action, dt: float | None = None, p: PointMassParams = PointMassParams()):
    """Double integrator in the plane. Leaving ``[-arena, arena]^2`` terminates.

    Reward ``-|pos - goal| - c_ctrl * sum(a^2)`` at the pre-step state.
    """
    dt = p.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = np.asarray(state, dtype=float)
    pos, vel = s[:2], s[2:]
    a = np.clip(np.ravel(action)[:2], -1.0, 1.0)
    reward = -float(np.linalg.norm(pos - np.asarray(p.goal))) - p.c_ctrl * float(a @ a)
    vel = vel + p.accel * a * dt
    pos = pos + vel * dt
    new_state = np.concatenate([pos, vel])
    terminated = bool(np.any(np.abs(pos) > p.arena))
    obs = np.concatenate([pos - np.asarray(p.goal), vel])
    return new_state, StepResult(obs, reward, terminated, False)


# --------------------------------------------------------------------------
# Stateful wrappers
# --------------------------------------------------------------------------

class Environment:
    """Common interface: ``reset(seed) -> obs`` and ``step(action) -> StepResult``."""

    name = "base"
    obs_dim: int
    action_dim: int
    a_max: float = 1.0
    step_limit: int

    def __init__(self):
        self._rng = np.random.default_rng()
        self.t = 0

    def seed(self, seed) -> None:
        self._rng = np.random.default_rng(seed)

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self.seed(seed)
        self.t = 0
        return self._reset()

    def step(self, action) -> StepResult:
        res = self._step(action)
        self.t += 1
        if not res.terminated and self.t >= self.step_limit:
            res = replace(res, truncated=True)
        return res

    @property
    def fall_step(self) -> int:
        """First step of the deliberate-fall window (``limit - limit / 20``)."""
        return self.step_limit - self.step_limit // 20

    def _reset(self) -> np.ndarray:
        raise NotImplementedError

    def _step(self, action) -> StepResult:
        raise NotImplementedError


class Pendulum(Environment):
    name = "pendulum"
    obs_dim = 3
    action_dim = 1

    def __init__(self, params: PendulumParams = PendulumParams(), step_limit: int = 200):
        super().__init__()
        self.params = params
        self.step_limit = step_limit
        self.state = (math.pi, 0.0)

    def _reset(self):
        n = self.params.start_noise
        theta = wrap_angle(math.pi + self._rng.uniform(-n, n))
        self.state = (theta, float(self._rng.uniform(-n, n)))
        return pendulum_obs(*self.state)

    def _step(self, action):
        self.state, res = pendulum_step(self.state, action, p=self.params)
        return res


class PointMass(Environment):
    name = "pointmass"
    obs_dim = 4
    action_dim = 2

    def __init__(self, params: PointMassParams = PointMassParams(), step_limit: int = 300):
        super().__init__()
        self.params = params
        self.step_limit = step_limit
        self.state = np.zeros(4)

    def _reset(self):
        half = 0.5 * self.params.arena
        pos = self._rng.uniform(-half, half, 2)
        self.state = np.concatenate([pos, np.zeros(2)])
        return np.concatenate([pos - np.asarray(self.params.goal), np.zeros(2)])

    def _step(self, action):
        self.state, res = pointmass_step(self.state, action, p=self.params)
        return res


ENVIRONMENTS = {"pendulum": (Pendulum, PendulumParams), "pointmass": (PointMass, PointMassParams)}


def _coerce_param(default, value):
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = value.strip("()[] ").split(",")
        out = tuple(float(x) for x in value)
        if len(out) != len(default):
            raise ValueError(f"expected {len(default)} values, got {len(out)}")
        return out
    return type(default)(value)


def make_env(name: str, **overrides) -> Environment:
    """Build an environment by name; ``overrides`` replace physical constants."""
    try:
        cls, params_cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    step_limit = overrides.pop("step_limit", None)
    preset = overrides.pop("c_ctrl_preset", None)
    if preset is not None:
        overrides["c_ctrl"] = CTRL_COST_PRESETS[preset]
    fields = params_cls.__dataclass_fields__
    unknown = set(overrides) - set(fields)
    if unknown:
        raise ValueError(f"unknown {name} parameters: {sorted(unknown)}")
    defaults = params_cls()
    params = params_cls(**{k: _coerce_param(getattr(defaults, k), v) for k, v in overrides.items()})
    return cls(params) if step_limit is None else cls(params, step_limit=int(step_limit))
