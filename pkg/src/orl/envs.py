"""Deterministic toy continuous-control environments and scripted policies.

Three environments are registered under string names:

``lqr1d``
    Damped spring-mass ``x' = x + dt v``, ``v' = v + dt (2a - x - 0.5 v)``
    with reward ``-(x^2 + 0.1 a^2)``. Linear dynamics and quadratic cost, so
    the optimal unconstrained controller is the LQR gain from the discrete
    algebraic Riccati equation. The open loop is stable, which keeps the
    uniform-random policy from drifting off.
``pointmass``
    A damped 2-D point mass driven toward a random goal; reward is the
    negative distance to the goal.
``pendulum``
    Torque-limited swing-up with the usual quadratic angle/velocity/torque
    cost.

Every action box is [-1, 1] per dimension; physical force and torque scales
are applied inside the dynamics. All randomness is in ``env_reset``, and the
reward of a step is computed from the pre-step state and the action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .errors import ContractError, ShapeError, UnknownEnvironmentError

TIERS = ("random", "medium", "expert")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    action_low: tuple
    action_high: tuple
    horizon: int
    random_ref: float
    expert_ref: float
    reward_bounds: tuple

    def __post_init__(self):
        if not all(lo < hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action_low must be below action_high")
        if not self.expert_ref > self.random_ref:
            raise ValueError("expert_ref must exceed random_ref")

    @property
    def max_abs_return(self):
        """Largest undiscounted |return| the declared reward bounds allow."""
        return self.horizon * max(abs(b) for b in self.reward_bounds)


@dataclass(eq=False)
class EnvState:
    observation: np.ndarray
    internal: np.ndarray
    steps_elapsed: int = 0
    timeout: bool = False


@dataclass(eq=False)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool


def _wrap(angle):
    return ((angle + math.pi) % (2.0 * math.pi)) - math.pi


class _Lqr1D:
    dt = 0.1
    force = 2.0
    spring = 1.0
    damping = 0.5
    x_max = 5.0
    v_max = 5.0
    state_cost = 1.0
    action_cost = 0.1

    def reset(self, rng):
        return np.array([rng.uniform(-1.0, 1.0), 0.0])

    def observe(self, internal):
        return internal.copy()

    def dynamics(self, internal, action):
        x, v = internal
        a = action[0]
        reward = -(self.state_cost * x * x + self.action_cost * a * a)
        x_next = min(max(x + self.dt * v, -self.x_max), self.x_max)
        acc = self.force * a - self.spring * x - self.damping * v
        v_next = min(max(v + self.dt * acc, -self.v_max), self.v_max)
        return np.array([x_next, v_next]), reward

    def __init__(self):
        self.A = np.array([[1.0, self.dt],
                           [-self.dt * self.spring, 1.0 - self.dt * self.damping]])
        self.B = np.array([[0.0], [self.dt * self.force]])
        self.gain = lqr_gain(self.A, self.B, np.diag([self.state_cost, 0.0]),
                             np.array([[self.action_cost]]))

    def expert(self, obs):
        return np.clip(-self.gain @ obs, -1.0, 1.0)

    reward_bounds = (-(x_max**2 + action_cost), 0.0)


class _PointMass2D:
    dt = 0.2
    force = 3.0
    damping = 0.3
    arena = 2.0
    v_max = 2.0
    kp = 2.0
    kd = 0.6

    def reset(self, rng):
        pos = rng.uniform(-1.0, 1.0, size=2)
        goal = rng.uniform(-1.0, 1.0, size=2)
        return np.concatenate([pos, np.zeros(2), goal])

    def observe(self, internal):
        pos, vel, goal = internal[:2], internal[2:4], internal[4:]
        return np.concatenate([pos, vel, goal - pos])

    def dynamics(self, internal, action):
        pos, vel, goal = internal[:2], internal[2:4], internal[4:]
        reward = -math.hypot(pos[0] - goal[0], pos[1] - goal[1])
        vel = np.clip((1.0 - self.damping) * vel + self.dt * self.force * action,
                      -self.v_max, self.v_max)
        pos = np.clip(pos + self.dt * vel, -self.arena, self.arena)
        return np.concatenate([pos, vel, goal]), reward

    def expert(self, obs):
        vel, offset = obs[2:4], obs[4:6]
        return np.clip(self.kp * offset - self.kd * vel, -1.0, 1.0)

    # goals and starts lie in [-1, 1]^2 and the arena is [-2, 2]^2
    reward_bounds = (-math.hypot(3.0, 3.0), 0.0)


class _Pendulum:
    """Angle ``phi`` is measured from the hanging-down rest position."""

    dt = 0.05
    g = 10.0
    m = 1.0
    length = 1.0
    max_torque = 2.0
    max_speed = 8.0
    # energy target (per unit inertia) of the upright rest state
    swing_gain = 0.5
    balance_kp = 10.0
    balance_kd = 2.0
    balance_cos = 0.85

    def reset(self, rng):
        theta_up = rng.uniform(-math.pi, math.pi)
        return np.array([_wrap(theta_up + math.pi), rng.uniform(-1.0, 1.0)])

    def observe(self, internal):
        phi, phidot = internal
        # upright-referenced angle: theta = phi - pi
        return np.array([-math.cos(phi), -math.sin(phi), phidot / self.max_speed])

    def dynamics(self, internal, action):
        phi, phidot = internal
        u = self.max_torque * action[0]
        theta = _wrap(phi - math.pi)
        reward = -(theta * theta + 0.1 * phidot * phidot + 0.001 * u * u)
        acc = -1.5 * self.g / self.length * math.sin(phi) + 3.0 / (self.m * self.length**2) * u
        phidot_next = min(max(phidot + acc * self.dt, -self.max_speed), self.max_speed)
        phi_next = _wrap(phi + phidot_next * self.dt)
        return np.array([phi_next, phidot_next]), reward

    def expert(self, obs):
        cos_t, sin_t, speed = obs
        theta = math.atan2(sin_t, cos_t)
        thetadot = speed * self.max_speed
        if cos_t > self.balance_cos:
            u = -self.balance_kp * theta - self.balance_kd * thetadot
        else:
            gravity = 1.5 * self.g / self.length
            energy = 0.5 * thetadot**2 + gravity * cos_t
            pump = self.swing_gain * (gravity - energy) * thetadot
            u = pump if abs(thetadot) > 1e-3 else self.max_torque
        return np.array([min(max(u / self.max_torque, -1.0), 1.0)])

    reward_bounds = (-(math.pi**2 + 0.1 * max_speed**2 + 0.001 * max_torque**2), 0.0)


def lqr_gain(A, B, Q, R):
    """Stationary discrete-time LQR gain ``K`` with ``u = -K x``."""
    P = scipy.linalg.solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


_DYNAMICS = {"lqr1d": _Lqr1D(), "pointmass": _PointMass2D(), "pendulum": _Pendulum()}
_ALIASES = {"lqr": "lqr1d", "pointmass2d": "pointmass", "point_mass": "pointmass"}

# Reference returns: 100 episodes, seeds 0..99, see reference_scores.
_SPECS = {
    "lqr1d": EnvSpec("lqr1d", 2, 1, (-1.0,), (1.0,), 100,
                     random_ref=-18.542691443385635, expert_ref=-1.8844562036205526,
                     reward_bounds=_Lqr1D.reward_bounds),
    "pointmass": EnvSpec("pointmass", 6, 2, (-1.0, -1.0), (1.0, 1.0), 100,
                         random_ref=-164.65825381762122, expert_ref=-3.819253529384801,
                         reward_bounds=_PointMass2D.reward_bounds),
    "pendulum": EnvSpec("pendulum", 3, 1, (-1.0,), (1.0,), 200,
                        random_ref=-1197.1836008809128, expert_ref=-142.38626394205468,
                        reward_bounds=_Pendulum.reward_bounds),
}
REFERENCE_SEED = 0
REFERENCE_EPISODES = 100


def env_names():
    return sorted(_SPECS)


def get_spec(name) -> EnvSpec:
    key = str(name).lower()
    key = _ALIASES.get(key, key)
    if key not in _SPECS:
        raise UnknownEnvironmentError(f"unknown environment {name!r}; known: {env_names()}")
    return _SPECS[key]


def _dynamics_for(spec):
    try:
        return _DYNAMICS[spec.name]
    except KeyError:
        raise UnknownEnvironmentError(f"unknown environment {spec.name!r}") from None


def env_reset(spec: EnvSpec, rng_seed) -> EnvState:
    dyn = _dynamics_for(spec)
    internal = dyn.reset(np.random.default_rng(rng_seed))
    return EnvState(dyn.observe(internal), internal, 0)


def env_step(spec: EnvSpec, state: EnvState, action) -> StepResult:
    dyn = _dynamics_for(spec)
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (spec.act_dim,):
        raise ShapeError(f"action of length {a.size}, expected {spec.act_dim}")
    if not (np.all(a >= spec.action_low) and np.all(a <= spec.action_high)):
        raise ContractError(f"action {a} outside the action box; clip before stepping")
    if state.steps_elapsed >= spec.horizon:
        raise ContractError("episode already finished")
    internal, reward = dyn.dynamics(state.internal, a)
    steps = state.steps_elapsed + 1
    timeout = steps >= spec.horizon
    nxt = EnvState(dyn.observe(internal), internal, steps, timeout)
    return StepResult(nxt, float(reward), timeout)


def expert_action(spec: EnvSpec, observation):
    return _dynamics_for(spec).expert(np.asarray(observation, dtype=np.float64))


def scripted_policy(spec: EnvSpec, tier, state_or_obs, rng):
    """Action of a scripted behavior policy of the given quality tier.

    ``medium`` perturbs the expert with Gaussian noise of std 0.3 x the action
    range and swaps in a uniform random action 20% of the time.
    """
    obs = state_or_obs.observation if isinstance(state_or_obs, EnvState) else state_or_obs
    low, high = np.asarray(spec.action_low), np.asarray(spec.action_high)
    if tier == "random":
        return rng.uniform(low, high)
    if tier == "expert":
        return expert_action(spec, obs)
    if tier == "medium":
        a = expert_action(spec, obs) + rng.normal(0.0, 0.3 * (high - low))
        if rng.random() < 0.2:
            a = rng.uniform(low, high)
        return np.clip(a, low, high)
    raise ValueError(f"unknown tier {tier!r}; expected one of {TIERS}")


def rollout(spec: EnvSpec, policy: Callable, seed) -> float:
    """Undiscounted return of one episode from ``env_reset(spec, seed)``.

    ``policy(observation)`` must return an in-box action.
    """
    state = env_reset(spec, seed)
    total = 0.0
    while True:
        res = env_step(spec, state, policy(state.observation))
        total += res.reward
        state = res.next_state
        if res.done:
            return total


def tier_policy(spec, tier, seed):
    """Stateful observation -> action callable for a scripted tier."""
    rng = np.random.default_rng(seed)
    return lambda obs: scripted_policy(spec, tier, obs, rng)


def reference_scores(spec: EnvSpec, episodes=REFERENCE_EPISODES, seed=REFERENCE_SEED):
    """Mean returns of the random and expert scripted policies.

    Episode ``i`` starts from ``env_reset(spec, seed + i)``; the random policy
    draws its actions from a generator seeded with the same value.
    """
    if episodes < 100:
        raise ValueError("reference scores need at least 100 episodes")
    out = []
    for tier in ("random", "expert"):
        returns = [rollout(spec, tier_policy(spec, tier, seed + i), seed + i)
                   for i in range(episodes)]
        out.append(float(np.mean(returns)))
    return tuple(out)
