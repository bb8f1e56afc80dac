"""The Symphony training loop.

One update computes three loss terms from a single forward pass and
back-propagates their sum in one reverse sweep:

* temporal advantage ``-ReHAE((Q_target - Q_T) / |Q_T|)`` reaching the actor
  through the (frozen) target critic,
* temporal difference ``ReHSE(r + gamma (1 - done) Q*_target - Q_online)``
  reaching the online critics,
* full Swaddling of the actor's sigma and beta heads.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import math_core as mc
from . import optim
from .config import VariantConfig
from .envs import Environment
from .nets import (
    ActorCriticNet,
    apply_mask,
    compose_action,
    compose_action_grad,
    exploration_noise,
    gradient_dropout,
    target_q,
    target_q_grad,
)
from .replay import Batch, FadingReplayBuffer, Transition

log = logging.getLogger(__name__)

Q_FLOOR = 1e-6
TERMS = frozenset({"advantage", "td", "swaddling"})
METRICS_HEADER = ("step", "episode", "return", "avg_sigma", "avg_beta", "actor_loss",
                  "critic_loss", "swaddling", "q_ema", "nonfinite_skips")


TRAIN, EXPLORE, RESET, EVAL = range(4)


def step_rng(master_seed: int, step: int, stream: int = TRAIN) -> np.random.Generator:
    """Fresh generator for one step, derived from ``(master_seed, stream, step)``."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), stream, int(step)]))


@dataclass
class TrainerState:
    q_ema: float | None = None
    alpha: float = optim.GOLDEN
    r_norm: float = 1.0
    gamma: float = 0.99
    tau: float = 0.005
    updates_per_step: int = 3
    step: int = 0  # environment steps after exploration
    episode: int = 0
    updates: int = 0
    nonfinite_skips: int = 0
    backward_passes: int = 0


def ema_update(q_ema: float, q_star_mean: float, alpha: float) -> float:
    return alpha * q_ema + (1.0 - alpha) * q_star_mean


# --------------------------------------------------------------------------
# Exploration
# --------------------------------------------------------------------------

def normalize_rewards(rewards) -> float:
    """Mean absolute reward, falling back to 1 when every reward is zero."""
    r_norm = float(np.mean(np.abs(rewards))) if len(rewards) else 0.0
    if not r_norm > 0.0 or not math.isfinite(r_norm):
        log.warning("exploration rewards are all zero; using a reward normalizer of 1")
        return 1.0
    return r_norm


def explore(env: Environment, n_exp: int, seed: int, noise_scale: float = 1.0 / math.e,
            noise_clip: float = math.e):
    """Collect ``n_exp`` pure-noise transitions.

    Returns ``(transitions, r_norm)`` with rewards already divided by ``r_norm``.
    Each step draws from its own generator on a stream separate from training.
    """
    raw = []
    obs = env.reset(seed=int(step_rng(seed, 0, RESET).integers(2**31)))
    zero = np.zeros(env.action_dim)
    for k in range(n_exp):
        rng = step_rng(seed, k, EXPLORE)
        noise = exploration_noise(rng, env.action_dim, noise_scale, noise_clip)
        action = compose_action(zero, zero, noise, env.a_max)
        res = env.step(action)
        raw.append((obs, action, res.reward, 1.0 if res.terminated else 0.0, res.observation))
        obs = res.observation
        if res.terminated or res.truncated:
            obs = env.reset(seed=int(rng.integers(2**31)))
    r_norm = normalize_rewards(np.array([r for _, _, r, _, _ in raw]))
    transitions = [Transition(np.asarray(s, float), np.asarray(a, float), r / r_norm, d,
                              np.asarray(s2, float)) for s, a, r, d, s2 in raw]
    return transitions, r_norm


# --------------------------------------------------------------------------
# The joint loss
# --------------------------------------------------------------------------

@dataclass
class LossParts:
    advantage: float
    td: float
    swaddling: float
    q_star_mean: float
    sigma_mean: float
    beta_mean: float

    @property
    def total(self) -> float:
        return self.advantage + self.td + self.swaddling


@dataclass
class Forward:
    """Everything the reverse sweep needs."""

    actor: object
    a_next: np.ndarray
    t_cache: object
    t_mask: np.ndarray | None
    order: np.ndarray
    z: np.ndarray
    denom: float
    o_cache: object
    o_mask: np.ndarray | None
    err: np.ndarray
    parts: LossParts
    q_star: np.ndarray = field(repr=False)


def joint_forward(net: ActorCriticNet, batch: Batch, q_ema: float | None, cfg: VariantConfig,
                  target_weights: np.ndarray, rng: np.random.Generator | None = None) -> Forward:
    ao = net.actor_forward(batch.next_state, rng)
    a_next = compose_action(ao.a_raw, ao.sigma, 0.0, net.a_max)
    t_nodes, t_cache = net.critic_forward(batch.next_state, a_next, "target")
    t_nodes, t_mask = gradient_dropout(t_nodes, net.grad_dropout_p, rng)
    q_t, order = target_q(t_nodes, target_weights)
    q_star = q_t.copy()
    if q_ema is None:
        q_ema = float(q_star.mean())
    denom = max(abs(q_ema), Q_FLOOR)
    z = (q_t - q_ema) / denom
    adv = -mc.rehae(z)

    o_nodes, o_cache = net.critic_forward(batch.state, batch.action, "online")
    o_nodes, o_mask = gradient_dropout(o_nodes, net.grad_dropout_p, rng)
    td_target = batch.reward + cfg.gamma * (1.0 - batch.done) * q_star
    err = td_target[:, None] - o_nodes
    td = mc.rehse(err)

    if net.fixed_beta is None:
        swad = mc.full_swaddling(ao.sigma, ao.beta)
    else:
        swad = mc.fixed_beta_swaddling(ao.sigma, net.fixed_beta)
    parts = LossParts(adv, td, swad, float(q_star.mean()), float(ao.sigma.mean()),
                      float(ao.beta.mean()))
    return Forward(ao, a_next, t_cache, t_mask, order, z, denom, o_cache, o_mask, err, parts, q_star)


def joint_backward(net: ActorCriticNet, fw: Forward, target_weights: np.ndarray,
                   terms=TERMS) -> dict[str, np.ndarray]:
    """One reverse sweep over the summed loss; ``terms`` selects which terms contribute."""
    ao = fw.actor
    d_a_raw = np.zeros_like(ao.a_raw)
    d_sigma = np.zeros_like(ao.sigma)
    d_beta = np.zeros_like(ao.beta)
    grads = {k: np.zeros_like(v) for k, v in net.online_params().items()}

    if "advantage" in terms:
        d_q = -mc.rehae_grad(fw.z) / fw.denom
        d_nodes = apply_mask(target_q_grad(fw.order, target_weights, d_q), fw.t_mask)
        _, dx = net.critic_backward(d_nodes, fw.t_cache, "target", want_params=False,
                                    want_input=True)
        d_act = dx[:, net.obs_dim:]
        da, ds = compose_action_grad(ao.a_raw, ao.sigma, 0.0, net.a_max, d_act)
        d_a_raw += da
        d_sigma += ds

    if "swaddling" in terms:
        if net.fixed_beta is None:
            ds, db = mc.full_swaddling_grad(ao.sigma, ao.beta)
            d_beta += db
        else:
            ds = mc.fixed_beta_swaddling_grad(ao.sigma, net.fixed_beta)
        d_sigma += ds

    if "advantage" in terms or "swaddling" in terms:
        grads.update(net.actor_backward(ao, d_a_raw, d_sigma, d_beta))

    if "td" in terms:
        d_nodes = apply_mask(-mc.rehse_grad(fw.err), fw.o_mask)
        cg, _ = net.critic_backward(d_nodes, fw.o_cache, "online")
        grads.update(cg)
    return grads


def joint_loss(net, batch, q_ema, cfg, target_weights, rng=None, terms=TERMS):
    fw = joint_forward(net, batch, q_ema, cfg, target_weights, rng)
    return fw, joint_backward(net, fw, target_weights, terms)


def update_once(net: ActorCriticNet, opt: optim.OptimState, state: TrainerState, batch: Batch,
                cfg: VariantConfig, target_weights: np.ndarray,
                rng: np.random.Generator | None = None) -> LossParts | None:
    """Forward, one backward, one optimizer step, Polyak and EMA updates.

    Returns ``None`` (and counts a skip) when the loss or gradients are not finite.
    """
    try:
        with np.errstate(all="ignore"):
            fw = joint_forward(net, batch, state.q_ema, cfg, target_weights, rng)
            ok = math.isfinite(fw.parts.total)
            grads = joint_backward(net, fw, target_weights) if ok else None
    except (mc.DomainError, ValueError, FloatingPointError):
        ok = False
    if not ok:
        state.nonfinite_skips += 1
        return None
    state.backward_passes += 1
    if not optim.step(net.online_params(), grads, opt):
        state.nonfinite_skips += 1
        return None
    net.polyak_update(state.tau)
    q_ref = fw.parts.q_star_mean if state.q_ema is None else state.q_ema
    state.q_ema = ema_update(q_ref, fw.parts.q_star_mean, state.alpha)
    state.updates += 1
    return fw.parts


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

@dataclass
class ReturnStats:
    mean: float
    std: float
    min: float
    max: float
    returns: list

    def as_row(self) -> dict:
        return {"mean": self.mean, "std": self.std, "min": self.min, "max": self.max,
                "episodes": len(self.returns)}


def evaluate(env: Environment, net: ActorCriticNet, episodes: int = 25, seed: int = 0,
             sigma_one: bool = False) -> ReturnStats:
    """Noise-free episodes; raw (un-normalized) undiscounted returns."""
    returns = []
    for ep in range(episodes):
        obs = env.reset(seed=int(step_rng(seed, ep, EVAL).integers(2**31)))
        total = 0.0
        while True:
            ao = net.actor_forward(obs[None])
            sigma = np.ones_like(ao.sigma) if sigma_one else ao.sigma
            action = compose_action(ao.a_raw, sigma, 0.0, net.a_max)[0]
            res = env.step(action)
            total += res.reward
            obs = res.observation
            if res.terminated or res.truncated:
                break
        returns.append(total)
    r = np.array(returns)
    return ReturnStats(float(r.mean()), float(r.std()), float(r.min()), float(r.max()), returns)


# --------------------------------------------------------------------------
# Trainer
# --------------------------------------------------------------------------

def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.10g}"


class MetricsWriter:
    """CSV rows per completed episode and per evaluation (``episode`` = ``eval``)."""

    def __init__(self, path, append: bool = False):
        self.fh = open(path, "a" if append else "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        if not append:
            self.w.writerow(METRICS_HEADER)

    def row(self, values: dict) -> None:
        self.w.writerow([fmt(values[k]) for k in METRICS_HEADER])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


@dataclass
class EpisodeAccumulator:
    ret: float = 0.0
    sigma: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    actor: list = field(default_factory=list)
    critic: list = field(default_factory=list)
    swad: list = field(default_factory=list)

    def add(self, p: LossParts) -> None:
        self.sigma.append(p.sigma_mean)
        self.beta.append(p.beta_mean)
        self.actor.append(p.advantage)
        self.critic.append(p.td)
        self.swad.append(p.swaddling)


def _mean(xs) -> float:
    return float(np.mean(xs)) if xs else float("nan")


class Trainer:
    """Owns the network, optimizer, buffer and counters for one run."""

    def __init__(self, env: Environment, cfg: VariantConfig, seed: int = 0,
                 net: ActorCriticNet | None = None):
        self.env = env
        self.cfg = cfg
        self.seed = int(seed)
        self.net = net or ActorCriticNet(
            env.obs_dim, env.action_dim, cfg.h_dim, cfg.n_out, env.a_max,
            grad_dropout_p=cfg.grad_dropout_p, fixed_beta=cfg.fixed_beta,
            seed=np.random.SeedSequence([self.seed, 2**31]).generate_state(1)[0],
            dtype=cfg.net_dtype,
        )
        self.opt = optim.init_state(self.net.online_params(), lr=cfg.lr, weight_decay=cfg.weight_decay,
                                    beta1=cfg.alpha, beta2=1.0 - cfg.tau,
                                    sqrt_divisor=cfg.sqrt_divisor)
        self.state = TrainerState(alpha=cfg.alpha, gamma=cfg.gamma, tau=cfg.tau,
                                  updates_per_step=cfg.updates_per_step)
        self.target_weights = mc.weight_schedule(self.net.n_nodes, cfg.target_schedule).weights
        self.buffer: FadingReplayBuffer | None = None
        self.obs = None
        self.episode_acc = EpisodeAccumulator()
        self.sigma_history: list[float] = []
        self.episode_returns: list[float] = []

    # phases --------------------------------------------------------------

    def explore(self) -> float:
        cfg = self.cfg
        transitions, r_norm = explore(self.env, cfg.n_exp, self.seed, cfg.noise_scale, cfg.noise_clip)
        self.state.r_norm = r_norm
        self.buffer = FadingReplayBuffer(cfg.n_rb, self.env.obs_dim, self.env.action_dim,
                                         schedule=cfg.buffer_schedule, half=cfg.half_precision,
                                         done_decay=cfg.done_decay)
        self.buffer.prefill(transitions, cfg.repeats)
        self._reset_env()
        return r_norm

    def _reset_env(self) -> None:
        rng = step_rng(self.seed, 1 + self.state.episode, RESET)
        self.obs = self.env.reset(seed=int(rng.integers(2**31)))
        self.episode_acc = EpisodeAccumulator()

    def select_action(self, obs, rng) -> np.ndarray:
        net, cfg = self.net, self.cfg
        noise = exploration_noise(rng, self.env.action_dim, cfg.noise_scale, cfg.noise_clip)
        if self.env.t >= self.env.fall_step:
            # deliberate fall: drop the policy, keep the noise
            return compose_action(np.zeros_like(noise), np.zeros_like(noise), noise, net.a_max)
        ao = net.actor_forward(np.asarray(obs)[None])
        return compose_action(ao.a_raw[0], ao.sigma[0], noise, net.a_max)

    def train_step(self) -> dict | None:
        """Act, store, run ``G`` updates. Returns an episode summary when one ends."""
        if self.buffer is None:
            raise RuntimeError("explore() must run before training")
        cfg, st = self.cfg, self.state
        rng = step_rng(self.seed, st.step)
        action = self.select_action(self.obs, rng)
        res = self.env.step(action)
        done = 1.0 if res.terminated else 0.0
        self.buffer.push(Transition(np.asarray(self.obs, float), action, res.reward / st.r_norm,
                                    done, np.asarray(res.observation, float)))
        self.episode_acc.ret += res.reward
        self.obs = res.observation

        batch = None
        for _ in range(cfg.updates_per_step):
            if batch is None or cfg.resample_per_update:
                batch = self.buffer.sample(cfg.batch_size, rng)
            parts = update_once(self.net, self.opt, st, batch, cfg, self.target_weights, rng)
            if parts is not None:
                self.episode_acc.add(parts)
        st.step += 1

        if res.terminated or res.truncated:
            acc = self.episode_acc
            st.episode += 1
            summary = {
                "step": st.step, "episode": st.episode, "return": acc.ret,
                "avg_sigma": _mean(acc.sigma), "avg_beta": _mean(acc.beta),
                "actor_loss": _mean(acc.actor), "critic_loss": _mean(acc.critic),
                "swaddling": _mean(acc.swad),
                "q_ema": st.q_ema if st.q_ema is not None else float("nan"),
                "nonfinite_skips": st.nonfinite_skips,
            }
            self.sigma_history.append(summary["avg_sigma"])
            self.episode_returns.append(acc.ret)
            self._reset_env()
            return summary
        return None

    def evaluate(self, env: Environment, episodes: int = 25, seed: int | None = None) -> ReturnStats:
        seed = self.seed + 7919 if seed is None else seed
        return evaluate(env, self.net.clone(), episodes, seed, self.cfg.eval_sigma_one)
