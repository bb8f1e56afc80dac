import logging
import math
from dataclasses import replace

import numpy as np
import pytest

from symphony import math_core as mc
from symphony import optim, trainer
from symphony.config import VARIANTS, desk_scale
from symphony.envs import make_env
from symphony.nets import ActorCriticNet
from symphony.replay import Batch
from symphony.trainer import TERMS, Trainer, TrainerState, joint_backward, joint_forward, update_once

CFG = VARIANTS["s3"]


def tiny_net(seed=0, **kw):
    return ActorCriticNet(3, 2, h_dim=8, n_out=4, seed=seed, dtype=np.float64, **kw)


def batch(rng, n=12, done_every=0):
    done = np.zeros(n)
    if done_every:
        done[::done_every] = 1.0
    return Batch(rng.normal(size=(n, 3)), np.tanh(rng.normal(size=(n, 2))), rng.normal(size=n), done,
                 rng.normal(size=(n, 3)))


def weights(net):
    return mc.weight_schedule(net.n_nodes, "target_critic").weights


def setup(seed=0, **kw):
    net = tiny_net(seed, **kw)
    # move sigma and beta off the clip floor so every actor head carries gradient
    net.actor.params["b2"][..., 2:] += 1.5
    return net, batch(np.random.default_rng(seed + 100), done_every=4), weights(net)


def nonzero(g):
    return bool(np.any(g != 0.0))


# ---------------------------------------------------------------- gradient routing

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_term_routing(seed):
    net, b, w = setup(seed)
    fw = joint_forward(net, b, -0.7, CFG, w)
    expect = {"advantage": "actor/", "td": "critic/", "swaddling": "actor/"}
    for term, owner in expect.items():
        g = joint_backward(net, fw, w, terms={term})
        for name, arr in g.items():
            if name.startswith(owner):
                continue
            assert not nonzero(arr), (term, name)
        assert any(nonzero(a) for n, a in g.items() if n.startswith(owner)), term
    assert not any(k.startswith("target/") for k in joint_backward(net, fw, w))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_sweep_equals_sum_of_terms(seed):
    net, b, w = setup(seed, grad_dropout_p=0.5)
    fw = joint_forward(net, b, -0.7, CFG, w, np.random.default_rng(seed))
    combined = joint_backward(net, fw, w)
    parts = [joint_backward(net, fw, w, terms={t}) for t in TERMS]
    for name, g in combined.items():
        np.testing.assert_allclose(g, sum(p[name] for p in parts), rtol=0, atol=1e-10)


def test_advantage_gradient_matches_finite_differences():
    net, b, w = setup(3)
    q_ema = -0.4
    fw = joint_forward(net, b, q_ema, CFG, w)
    g = joint_backward(net, fw, w, terms={"advantage"})
    p = net.actor.params["W2"]
    h = 1e-6
    for idx in [(0, 0, 0), (0, 3, 1), (0, 7, 2), (0, 5, 4)]:
        old = p[idx]
        p[idx] = old + h
        up = joint_forward(net, b, q_ema, CFG, w).parts.advantage
        p[idx] = old - h
        down = joint_forward(net, b, q_ema, CFG, w).parts.advantage
        p[idx] = old
        num = (up - down) / (2 * h)
        assert g["actor/W2"][idx] == pytest.approx(num, rel=1e-4, abs=1e-10)


def test_td_gradient_matches_finite_differences():
    net, b, w = setup(4)
    fw = joint_forward(net, b, -0.4, CFG, w)
    g = joint_backward(net, fw, w, terms={"td"})
    p = net.critic.params["W1"]
    h = 1e-6
    for idx in [(0, 0, 0), (1, 2, 5), (2, 4, 7)]:
        old = p[idx]
        p[idx] = old + h
        up = joint_forward(net, b, -0.4, CFG, w).parts.td
        p[idx] = old - h
        down = joint_forward(net, b, -0.4, CFG, w).parts.td
        p[idx] = old
        assert g["critic/W1"][idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-10)


def test_td_target_masks_terminal_bootstrap():
    net, b, w = setup(0)
    fw = joint_forward(net, b, -0.5, CFG, w)
    nodes, _ = net.critic_forward(b.state, b.action)
    target = fw.err + nodes
    np.testing.assert_allclose(target[b.done == 1.0], np.broadcast_to(
        b.reward[b.done == 1.0, None], target[b.done == 1.0].shape), atol=1e-12)


def test_q_floor_keeps_advantage_finite():
    net, b, w = setup(0)
    fw = joint_forward(net, b, 0.0, CFG, w)
    assert fw.denom == trainer.Q_FLOOR and math.isfinite(fw.parts.advantage)


# ---------------------------------------------------------------- EMA and advantage

def constant_q_net(q):
    net = tiny_net(5)
    for params in (net.critic.params, net.target):
        params["W2"][...] = 0.0
        params["b2"][...] = q
    return net


def test_ema_converges_geometrically_with_alpha():
    q, q0 = -3.0, 5.0
    net = constant_q_net(q)
    opt = optim.init_state(net.online_params(), lr=1e-4)
    opt.lr = 0.0  # freeze parameters so Q* stays constant
    st = TrainerState(q_ema=q0)
    rng = np.random.default_rng(0)
    gaps = [st.q_ema - q]
    for _ in range(12):
        assert update_once(net, opt, st, batch(rng), CFG, weights(net)) is not None
        gaps.append(st.q_ema - q)
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    assert np.all(np.abs(ratios - optim.GOLDEN) <= 1e-12)
    assert st.backward_passes == st.updates == 12


def test_advantage_zero_when_target_equals_ema():
    q = -2.5
    net = constant_q_net(q)
    net.actor.params["b2"][..., 2:] += 1.5
    b, w = batch(np.random.default_rng(1)), weights(net)
    fw = joint_forward(net, b, q, CFG, w)
    assert fw.parts.advantage == 0.0
    adv = joint_backward(net, fw, w, terms={"advantage"})
    assert not any(nonzero(g) for g in adv.values())
    both = joint_backward(net, fw, w, terms={"advantage", "swaddling"})
    swad = joint_backward(net, fw, w, terms={"swaddling"})
    for k in both:
        np.testing.assert_array_equal(both[k], swad[k])


def test_ema_seeded_from_first_batch():
    net, b, w = setup(0)
    opt = optim.init_state(net.online_params())
    st = TrainerState()
    fw = joint_forward(net, b, None, CFG, w)
    update_once(net, opt, st, b, CFG, w)
    # seeded with the first mean, then one EMA step towards the same mean
    assert st.q_ema == pytest.approx(fw.parts.q_star_mean, rel=1e-12)


def test_update_once_skips_non_finite():
    net, b, w = setup(0)
    b.reward[0] = np.nan
    opt = optim.init_state(net.online_params())
    st = TrainerState()
    before = net.critic.params["W1"].copy()
    assert update_once(net, opt, st, b, CFG, w) is None
    assert st.nonfinite_skips == 1 and st.updates == 0
    np.testing.assert_array_equal(before, net.critic.params["W1"])


# ---------------------------------------------------------------- exploration and loop

def test_reward_normalizer():
    assert trainer.normalize_rewards([1, -1, 2, -2]) == 1.5
    np.testing.assert_allclose(np.array([1, -1, 2, -2]) / 1.5, [0.667, -0.667, 1.333, -1.333],
                               atol=1e-3)


def test_reward_normalizer_zero_fallback(caplog):
    with caplog.at_level(logging.WARNING):
        assert trainer.normalize_rewards([0.0, 0.0]) == 1.0
    assert "normalizer of 1" in caplog.text


def test_explore_stores_normalized_rewards():
    env = make_env("pointmass")
    transitions, r_norm = trainer.explore(env, 300, seed=3)
    assert len(transitions) == 300 and r_norm > 0
    assert np.mean([abs(t.reward) for t in transitions]) == pytest.approx(1.0, rel=1e-12)
    # pure noise exploration reaches the arena edge in 300 steps
    assert any(t.done == 1.0 for t in transitions)


def small_cfg(**kw):
    return replace(desk_scale(VARIANTS["s3"], n_exp=64, n_out=4), repeats=2, **kw)


def test_train_step_runs_g_updates():
    tr = Trainer(make_env("pendulum"), small_cfg(), seed=0)
    tr.explore()
    tr.train_step()
    assert tr.opt.steps == 3 and tr.state.backward_passes == 3 and tr.state.step == 1


def test_trainer_deterministic():
    def run():
        tr = Trainer(make_env("pendulum", step_limit=20), small_cfg(), seed=11)
        tr.explore()
        return [s for s in (tr.train_step() for _ in range(60)) if s]
    a, b = run(), run()
    assert len(a) == 3 and repr(a) == repr(b)


def test_sigma_history_in_band():
    tr = Trainer(make_env("pendulum", step_limit=10), small_cfg(), seed=1)
    tr.explore()
    for _ in range(40):
        tr.train_step()
    s = np.array(tr.sigma_history)
    assert len(s) == 4 and np.all(np.isfinite(s)) and np.all((s >= 1e-3) & (s <= 1 - 1e-3))


def test_deliberate_fall_ignores_policy():
    tr = Trainer(make_env("pendulum"), small_cfg(), seed=0)
    tr.explore()
    tr.env.t = tr.env.fall_step
    rng = lambda: np.random.default_rng(4)
    a = tr.select_action(tr.obs, rng())
    noise = trainer.exploration_noise(rng(), 1, tr.cfg.noise_scale, tr.cfg.noise_clip)
    np.testing.assert_array_equal(a, np.tanh(noise))
    tr.env.t = tr.env.fall_step - 1
    assert not np.array_equal(tr.select_action(tr.obs, rng()), a)


def test_fall_window_scales_with_limit():
    assert make_env("pendulum").fall_step == 190
    assert make_env("pendulum", step_limit=1000).fall_step == 950


def test_train_requires_exploration():
    tr = Trainer(make_env("pendulum"), small_cfg(), seed=0)
    with pytest.raises(RuntimeError):
        tr.train_step()


def test_evaluate_zero_policy_close_to_hanging_return():
    net = ActorCriticNet(3, 1, h_dim=8, n_out=4, seed=0)
    net.actor.params["W2"][...] = 0.0
    net.actor.params["b2"][...] = 0.0
    stats = trainer.evaluate(make_env("pendulum"), net, episodes=5)
    analytic = -math.pi ** 2 * 200
    assert abs(stats.mean - analytic) <= 0.05 * abs(analytic)
    again = trainer.evaluate(make_env("pendulum"), net, episodes=5)
    assert stats.returns == again.returns


def test_step_rng_streams_differ():
    a = trainer.step_rng(1, 5, trainer.TRAIN).random()
    b = trainer.step_rng(1, 5, trainer.EXPLORE).random()
    assert a != b and a == trainer.step_rng(1, 5, trainer.TRAIN).random()
