"""Unified actor-critic network with hand-written backpropagation.

Both the actor and the three critics share one block layout::

    linear -> layer norm -> ReSine -> linear

implemented once in :class:`Stack`, which carries a leading ensemble axis
(``K = 1`` for the actor, ``K = 3`` for the critics) so the critics run as a
single batched matmul.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import math_core as mc

LN_EPS = 1e-5
N_CRITICS = 3


@dataclass
class StackCache:
    x: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    sin_u: np.ndarray  # u is the ReSine input divided by its scale
    cos_u: np.ndarray
    twice_gate: np.ndarray  # 1 + tanh(0.75 sin u) = 2 sigmoid(1.5 sin u)
    twice_g: np.ndarray  # sin(u) * twice_gate, the hidden activation over scale / 2
    scale: np.ndarray
    w1c: np.ndarray
    w2s: np.ndarray


def _center(a: np.ndarray) -> np.ndarray:
    return a - a.mean(axis=-1, keepdims=True)


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...h,...h->...", a, b)[..., None]


class Stack:
    """``K`` independent two-layer blocks evaluated together.

    Parameters live in ``self.params`` keyed by short names; every array has
    the ensemble axis first.

    The layer-norm mean removal is folded into centred copies of ``W1`` and
    ``b1``, and the ReSine scale into the rows of ``W2``, so the batch-sized
    arrays see as few elementwise passes as possible. The maths is unchanged.
    """

    names = ("W1", "b1", "ln_g", "ln_b", "s", "W2", "b2")

    def __init__(self, k: int, n_in: int, h_dim: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float64):
        self.k, self.n_in, self.h_dim, self.n_out = k, n_in, h_dim, n_out
        self.dtype = np.dtype(dtype)
        lim1 = 1.0 / np.sqrt(n_in)
        lim2 = 1.0 / np.sqrt(h_dim)
        params = {
            "W1": rng.uniform(-lim1, lim1, (k, n_in, h_dim)),
            "b1": rng.uniform(-lim1, lim1, (k, 1, h_dim)),
            "ln_g": np.ones((k, 1, h_dim)),
            "ln_b": np.zeros((k, 1, h_dim)),
            "s": rng.uniform(-lim2, lim2, (k, 1, h_dim)),
            "W2": rng.uniform(-lim2, lim2, (k, h_dim, n_out)),
            "b2": rng.uniform(-lim2, lim2, (k, 1, n_out)),
        }
        self.params = {name: v.astype(self.dtype) for name, v in params.items()}

    def forward(self, x: np.ndarray, params: dict | None = None):
        """``x`` is ``(B, n_in)`` shared by all members, or ``(K, B, n_in)``."""
        p = self.params if params is None else params
        x = np.asarray(x, dtype=self.dtype)
        w1c = _center(p["W1"])
        z = np.matmul(x, w1c)
        z += _center(p["b1"])
        inv_std = 1.0 / np.sqrt(_rowdot(z, z) * (1.0 / self.h_dim) + LN_EPS)
        xhat = z
        xhat *= inv_std
        # ReSine: scale * sin(u) * sigmoid(1.5 sin(u)), u = (g xhat + b) / scale
        scale = mc.sigmoid(p["s"]).astype(self.dtype)
        u = xhat * (p["ln_g"] / scale)
        u += p["ln_b"] / scale
        sin_u = np.sin(u)
        cos_u = np.cos(u, out=u)
        twice_gate = np.multiply(sin_u, 0.5 * mc.RESINE_GATE)
        np.tanh(twice_gate, out=twice_gate)
        twice_gate += 1.0
        twice_g = sin_u * twice_gate
        w2s = np.swapaxes(0.5 * scale, -1, -2) * p["W2"]
        out = np.matmul(twice_g, w2s)
        out += p["b2"]
        return out, StackCache(x, xhat, inv_std, sin_u, cos_u, twice_gate, twice_g, scale, w1c, w2s)

    def backward(self, dout: np.ndarray, cache: StackCache, params: dict | None = None,
                 want_params: bool = True, want_input: bool = False):
        """Return ``(param_grads or None, input_grad or None)``."""
        p = self.params if params is None else params
        c = cache
        dout = np.asarray(dout, dtype=self.dtype)
        grads = {} if want_params else None
        d_twice_g = np.matmul(dout, np.swapaxes(c.w2s, -1, -2))
        # d twice_g / d u = twice_gate * cos(u) * (1 + 1.5 sin(u) - 0.75 twice_g)
        du = c.twice_g * (-0.5 * mc.RESINE_GATE)
        du += c.sin_u * mc.RESINE_GATE
        du += 1.0
        du *= c.twice_gate
        du *= c.cos_u
        du *= d_twice_g
        g_over, b_over = p["ln_g"] / c.scale, p["ln_b"] / c.scale
        if want_params:
            d_w2s = np.matmul(np.swapaxes(c.twice_g, -1, -2), dout)
            half_scale = np.swapaxes(0.5 * c.scale, -1, -2)
            grads["W2"] = d_w2s * half_scale
            grads["b2"] = dout.sum(axis=-2, keepdims=True)
            d_g_over = np.sum(du * c.xhat, axis=-2, keepdims=True)
            d_b_over = du.sum(axis=-2, keepdims=True)
            grads["ln_g"] = d_g_over / c.scale
            grads["ln_b"] = d_b_over / c.scale
            d_scale = np.swapaxes(np.sum(d_w2s * (0.5 * p["W2"]), axis=-1, keepdims=True), -1, -2)
            d_scale -= (d_g_over * g_over + d_b_over * b_over) / c.scale
            grads["s"] = d_scale * (c.scale * (1.0 - c.scale))
        dxhat = du
        dxhat *= g_over
        # gradient w.r.t. the centred pre-activation; the centring projection is
        # applied on the parameter side below
        proj = _rowdot(dxhat, c.xhat) * (1.0 / self.h_dim)
        dz = dxhat
        dz -= c.xhat * proj
        dz *= c.inv_std
        dx = None
        if want_input:
            dx = np.matmul(dz, np.swapaxes(c.w1c, -1, -2))
        if want_params:
            x = c.x
            xt = x.T if x.ndim == 2 else np.swapaxes(x, -1, -2)
            grads["W1"] = _center(np.matmul(xt, dz))
            grads["b1"] = _center(dz.sum(axis=-2, keepdims=True))
        return grads, dx


# --------------------------------------------------------------------------
# Elementwise pieces
# --------------------------------------------------------------------------

def squash_scale(raw: np.ndarray):
    """``clip(|tanh(raw/2)|, 1e-3, 1 - 1e-3)`` and its local derivative."""
    # float64 so the clip bounds are exact for the domain checks downstream
    t = np.tanh(0.5 * np.asarray(raw, dtype=np.float64))
    a = np.abs(t)
    out = np.clip(a, mc.CLIP_LO, mc.CLIP_HI)
    inside = (a > mc.CLIP_LO) & (a < mc.CLIP_HI)
    deriv = np.where(inside, 0.5 * (1.0 - t * t) * np.sign(t), 0.0)
    return out, deriv


def compose_action(a_raw, sigma, noise, a_max: float = 1.0):
    """``a_max * tanh(sigma * tanh(a_raw / 2) + noise)``; stays strictly inside the box."""
    return a_max * np.tanh(sigma * np.tanh(0.5 * a_raw) + noise)


def compose_action_grad(a_raw, sigma, noise, a_max, upstream):
    """Return ``(d/d a_raw, d/d sigma)`` against ``upstream``."""
    ta = np.tanh(0.5 * a_raw)
    outer = np.tanh(sigma * ta + noise)
    d_inner = upstream * a_max * (1.0 - outer * outer)
    return d_inner * sigma * 0.5 * (1.0 - ta * ta), d_inner * ta


def exploration_noise(rng: np.random.Generator, shape, scale: float = 1.0 / np.e,
                      clip: float = np.e):
    """Standard normal draws clipped to ``[-clip, clip]`` and multiplied by ``scale``."""
    return scale * np.clip(rng.standard_normal(shape), -clip, clip)


def target_q(nodes: np.ndarray, weights: np.ndarray):
    """Sort each row ascending and take the weighted sum.

    Returns ``(q, order)``; ``order`` is the argsort needed by
    :func:`target_q_grad`. Tied nodes may be ranked either way; the value is
    the same and the routed gradient only moves between equal nodes.
    """
    nodes = np.asarray(nodes)
    weights = np.asarray(weights, dtype=float)
    if nodes.shape[-1] != weights.shape[-1]:
        raise ValueError(f"{nodes.shape[-1]} nodes but {weights.shape[-1]} weights")
    order = np.argsort(nodes, axis=-1)
    ranked = np.take_along_axis(nodes, order, axis=-1).astype(float)
    return ranked @ weights, order


def target_q_grad(order: np.ndarray, weights: np.ndarray, upstream: np.ndarray):
    """Route ``upstream`` (one value per row) back to the unsorted node positions."""
    d = np.empty(order.shape)
    np.put_along_axis(d, order, upstream[..., None] * weights, axis=-1)
    return d


def gradient_dropout(x: np.ndarray, p: float, rng: np.random.Generator | None):
    """Forward values untouched; returns ``(x, keep_mask)``.

    Backward multiplies the upstream sensitivity by ``keep_mask``, which is
    ``mask * x + (1 - mask) * x_detached`` without the redundant arithmetic.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    if p == 0.0 or rng is None:
        return x, None
    if p == 1.0:
        return x, np.zeros(x.shape)
    return x, (rng.random(x.shape) >= p).astype(float)


def apply_mask(upstream, mask):
    return upstream if mask is None else upstream * mask


# --------------------------------------------------------------------------
# The unified network
# --------------------------------------------------------------------------

@dataclass
class ActorOut:
    a_raw: np.ndarray
    sigma: np.ndarray
    beta: np.ndarray
    cache: StackCache
    d_sigma: np.ndarray  # local derivative of sigma w.r.t. its head
    d_beta: np.ndarray | None
    mask: np.ndarray | None


class ActorCriticNet:
    """Actor with (a, s, b) heads, three concatenated critics, and a target critic.

    ``fixed_beta`` switches to the fixed-temperature form: sigma is the mean of
    ``|tanh(s/2)|`` over action dimensions and beta is the constant given.
    """

    def __init__(self, obs_dim: int, action_dim: int, h_dim: int = 512, n_out: int = 128,
                 a_max: float = 1.0, grad_dropout_p: float = 0.0, fixed_beta: float | None = None,
                 seed: int | np.random.Generator = 0, dtype=np.float64):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.h_dim, self.n_out = h_dim, n_out
        self.a_max = float(a_max)
        self.grad_dropout_p = float(grad_dropout_p)
        self.fixed_beta = fixed_beta
        self.dtype = np.dtype(dtype)
        self.actor = Stack(1, obs_dim, h_dim, 3 * action_dim, rng, dtype)
        self.critic = Stack(N_CRITICS, obs_dim + action_dim, h_dim, n_out, rng, dtype)
        self.target = copy.deepcopy(self.critic.params)

    @property
    def n_nodes(self) -> int:
        return N_CRITICS * self.n_out

    # parameter views -----------------------------------------------------

    def online_params(self) -> dict[str, np.ndarray]:
        out = {f"actor/{k}": v for k, v in self.actor.params.items()}
        out.update({f"critic/{k}": v for k, v in self.critic.params.items()})
        return out

    def target_params(self) -> dict[str, np.ndarray]:
        return {f"target/{k}": v for k, v in self.target.items()}

    def all_params(self) -> dict[str, np.ndarray]:
        out = self.online_params()
        out.update(self.target_params())
        return out

    def clone(self) -> "ActorCriticNet":
        return copy.deepcopy(self)

    # forward passes ------------------------------------------------------

    def actor_forward(self, state: np.ndarray, rng: np.random.Generator | None = None) -> ActorOut:
        state = np.asarray(state, dtype=float)
        if not np.all(np.isfinite(state)):
            raise ValueError("non-finite state")
        out, cache = self.actor.forward(state)
        heads, mask = gradient_dropout(out[0], self.grad_dropout_p, rng)
        d = self.action_dim
        a_raw, s_raw, b_raw = heads[:, :d], heads[:, d:2 * d], heads[:, 2 * d:]
        if self.fixed_beta is None:
            sigma, d_sigma = squash_scale(s_raw)
            beta, d_beta = squash_scale(b_raw)
        else:
            t = np.tanh(0.5 * np.asarray(s_raw, dtype=np.float64))
            m = np.abs(t).mean(axis=-1, keepdims=True)
            sigma = np.broadcast_to(np.clip(m, mc.CLIP_LO, mc.CLIP_HI), s_raw.shape).copy()
            inside = (m > mc.CLIP_LO) & (m < mc.CLIP_HI)
            d_sigma = np.where(inside, 0.5 * (1.0 - t * t) * np.sign(t) / d, 0.0)
            beta, d_beta = np.full(b_raw.shape, float(self.fixed_beta)), None
        return ActorOut(a_raw, sigma, beta, cache, d_sigma, d_beta, mask)

    def act(self, state: np.ndarray, noise: np.ndarray | float = 0.0) -> np.ndarray:
        state = np.atleast_2d(state)
        ao = self.actor_forward(state)
        return compose_action(ao.a_raw, ao.sigma, noise, self.a_max)

    def critic_forward(self, state: np.ndarray, action: np.ndarray, which: str = "online"):
        """Concatenated nodes ``(B, 3 * n_out)``: critic 0, then 1, then 2."""
        state = np.asarray(state, dtype=float)
        action = np.asarray(action, dtype=float)
        if len(state) != len(action):
            raise ValueError("state and action batch sizes differ")
        x = np.concatenate([state, action], axis=-1)
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite critic input")
        params = self.critic.params if which == "online" else self.target
        out, cache = self.critic.forward(x, params)
        return nodes_from_stack(out), cache

    # backward passes -----------------------------------------------------

    def actor_backward(self, ao: ActorOut, d_a_raw, d_sigma, d_beta):
        """Gradient of the actor parameters from head sensitivities."""
        d = self.action_dim
        dheads = np.empty(ao.a_raw.shape[:-1] + (3 * d,))
        dheads[:, :d] = d_a_raw
        if self.fixed_beta is None:
            dheads[:, d:2 * d] = d_sigma * ao.d_sigma
            dheads[:, 2 * d:] = d_beta * ao.d_beta
        else:
            # every sigma entry in a row is the same mean
            dheads[:, d:2 * d] = d_sigma.sum(axis=-1, keepdims=True) * ao.d_sigma
            dheads[:, 2 * d:] = 0.0
        dheads = apply_mask(dheads, ao.mask)
        grads, _ = self.actor.backward(dheads[None], ao.cache)
        return {f"actor/{k}": v for k, v in grads.items()}

    def critic_backward(self, dnodes, cache, which: str = "online", want_params: bool = True,
                        want_input: bool = False):
        params = self.critic.params if which == "online" else self.target
        dout = stack_from_nodes(dnodes, N_CRITICS)
        grads, dx = self.critic.backward(dout, cache, params, want_params, want_input)
        if grads is not None:
            grads = {f"critic/{k}": v for k, v in grads.items()}
        if dx is not None:
            dx = dx.sum(axis=0)  # every critic sees the same input
        return grads, dx

    # target tracking -----------------------------------------------------

    def polyak_update(self, tau: float = 0.005) -> None:
        polyak_update(self.target, self.critic.params, tau)


def nodes_from_stack(out: np.ndarray) -> np.ndarray:
    k, b, n = out.shape
    return np.transpose(out, (1, 0, 2)).reshape(b, k * n)


def stack_from_nodes(nodes: np.ndarray, k: int) -> np.ndarray:
    b, kn = nodes.shape
    return np.ascontiguousarray(np.transpose(nodes.reshape(b, k, kn // k), (1, 0, 2)))


def polyak_update(target: dict, online: dict, tau: float) -> None:
    """In place: ``target <- (1 - tau) * target + tau * online``."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    for name, t in target.items():
        o = online[name]
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {o.shape}")
        if tau == 1.0:
            t[...] = o
        else:
            t *= 1.0 - tau
            t += tau * o
