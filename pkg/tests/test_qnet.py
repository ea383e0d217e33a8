import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from friendq import qnet
from friendq.qnet import QNetworkParams, Transition

import _mdp


def rel_error(a, b, floor=1e-7):
    # floor keeps coordinates that are both ~0 from dividing noise by noise
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_batch(rng, n_in, n_act, size, terminal_rate=0.2):
    return {
        "state": rng.normal(size=(size, n_in)),
        "action": rng.integers(n_act, size=size),
        "reward": rng.normal(size=size),
        "next_state": rng.normal(size=(size, n_in)),
        "terminal": rng.random(size) < terminal_rate,
    }


def random_net(sizes, rng):
    # random biases too: zero biases behind a dead unit sit exactly on the ReLU kink
    p = qnet.init_params(sizes, rng)
    for b in p.biases:
        b[:] = rng.normal(size=b.shape)
    return p


def finite_difference(params, target, batch, gamma, h=1e-5):
    grads = []
    for arr in params.arrays():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + h
            up = qnet.td_loss(params, target, batch, gamma)[0]
            arr[i] = old - h
            down = qnet.td_loss(params, target, batch, gamma)[0]
            arr[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


# ---------------------------------------------------------------- forward


def test_zero_network_outputs_zero():
    p = qnet.zeros_like(qnet.init_params((5, 4, 3), np.random.default_rng(0)))
    assert np.array_equal(qnet.forward(p, np.ones(5)), np.zeros(3))


def test_identity_network():
    p = QNetworkParams([np.eye(4)], [np.zeros(4)])
    x = np.array([1.5, -2.0, 0.0, 3.0])
    assert np.array_equal(qnet.forward(p, x), x)


def test_forward_matches_straight_line_arithmetic():
    rng = np.random.default_rng(11)
    p = qnet.init_params((6, 5, 4, 3), rng)
    x = rng.normal(size=6)
    h = x
    for k, (W, b) in enumerate(zip(p.weights, p.biases)):
        z = [sum(h[i] * W[i, j] for i in range(W.shape[0])) + b[j] for j in range(W.shape[1])]
        h = np.array([max(v, 0.0) for v in z]) if k < 2 else np.array(z)
    assert np.allclose(qnet.forward(p, x), h, rtol=1e-12, atol=1e-12)


def test_forward_batch_and_shape_error():
    p = qnet.init_params((4, 3, 2), np.random.default_rng(0))
    X = np.random.default_rng(1).normal(size=(7, 4))
    out = qnet.forward(p, X)
    assert out.shape == (7, 2)
    assert np.allclose(out[3], qnet.forward(p, X[3]))
    with pytest.raises(ValueError):
        qnet.forward(p, np.ones(5))


def test_params_shape_validation():
    with pytest.raises(ValueError):
        QNetworkParams([np.zeros((3, 2)), np.zeros((3, 1))], [np.zeros(2), np.zeros(1)])
    with pytest.raises(ValueError):
        QNetworkParams([np.zeros((3, 2))], [np.zeros(3)])


# ---------------------------------------------------------------- td_loss


def test_loss_zero_when_on_target():
    # zero network and zero terminal rewards: prediction 0, target 0
    p = qnet.zeros_like(qnet.init_params((3, 4, 2), np.random.default_rng(0)))
    batch = [Transition(np.ones(3), 1, 0.0, np.ones(3), True)]
    loss, g = qnet.td_loss(p, p, batch, 0.9)
    assert loss == 0.0
    assert all(not a.any() for a in g.arrays())


def test_single_terminal_unit_reward():
    p = qnet.zeros_like(qnet.init_params((3, 2), np.random.default_rng(0)))
    batch = [Transition(np.ones(3), 0, 1.0, np.zeros(3), True)]
    assert qnet.td_loss(p, p, batch, 0.9)[0] == 1.0


def test_target_uses_target_network_max():
    rng = np.random.default_rng(2)
    online = qnet.init_params((3, 4, 2), rng)
    target = qnet.init_params((3, 4, 2), rng)
    t = Transition(rng.normal(size=3), 1, 0.5, rng.normal(size=3), False)
    loss, _ = qnet.td_loss(online, target, [t], 0.8)
    y = 0.5 + 0.8 * qnet.forward(target, t.next_state).max()
    assert loss == pytest.approx((qnet.forward(online, t.state)[1] - y) ** 2, rel=1e-12)


def test_empty_batch_and_bad_action():
    p = qnet.init_params((3, 2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        qnet.td_loss(p, p, [], 0.9)
    with pytest.raises(IndexError):
        qnet.td_loss(p, p, [Transition(np.ones(3), 2, 0.0, np.ones(3))], 0.9)


def test_gradients_match_finite_differences_batch_50():
    rng = np.random.default_rng(0)
    p = random_net((8, 12, 6, 4), rng)
    target = random_net((8, 12, 6, 4), rng)
    batch = random_batch(rng, 8, 4, 50)
    _, g = qnet.td_loss(p, target, batch, 0.9)
    for a, b in zip(g.arrays(), finite_difference(p, target, batch, 0.9)):
        assert rel_error(a, b).max() <= 1e-4


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1),
       sizes=st.lists(st.integers(1, 8), min_size=2, max_size=4),
       gamma=st.floats(0, 0.99))
def test_gradients_property(seed, sizes, gamma):
    rng = np.random.default_rng(seed)
    p = random_net(sizes, rng)
    target = random_net(sizes, rng)
    batch = random_batch(rng, sizes[0], sizes[-1], 10)
    _, g = qnet.td_loss(p, target, batch, gamma)
    for a, b in zip(g.arrays(), finite_difference(p, target, batch, gamma)):
        assert rel_error(a, b).max() <= 1e-4


# ---------------------------------------------------------------- sgd and sync


def test_sgd_zero_gradient_and_zero_rate():
    rng = np.random.default_rng(0)
    p = qnet.init_params((3, 4, 2), rng)
    same = qnet.sgd_step(p, qnet.zeros_like(p), 0.1)
    grads = qnet.init_params((3, 4, 2), rng)
    also = qnet.sgd_step(p, grads, 0.0)
    for q in (same, also):
        assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))


def test_sgd_on_quadratic():
    # L(w) = (w x - y)^2 with x = 2, y = 3 from w = 0.5: dL/dw = 2 x (w x - y) = -8
    p = QNetworkParams([np.array([[0.5]])], [np.zeros(1)])
    batch = [Transition(np.array([2.0]), 0, 3.0, np.array([0.0]), True)]
    _, g = qnet.td_loss(p, p, batch, 0.9)
    assert g.weights[0][0, 0] == pytest.approx(-8.0)
    assert g.biases[0][0] == pytest.approx(-4.0)
    nxt = qnet.sgd_step(p, g, 0.01)
    assert nxt.weights[0][0, 0] == pytest.approx(0.58)


def test_sgd_shape_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        qnet.sgd_step(qnet.init_params((3, 2), rng), qnet.init_params((3, 3), rng), 0.1)


def test_sync_is_a_deep_copy():
    rng = np.random.default_rng(0)
    online = qnet.init_params((3, 4, 2), rng)
    target = qnet.sync_target(online)
    x = rng.normal(size=3)
    assert np.array_equal(qnet.forward(target, x), qnet.forward(online, x))
    before = qnet.forward(target, x)
    online.weights[0] += 1.0
    assert np.array_equal(qnet.forward(target, x), before)


def test_target_syncs_once_per_400_steps():
    sch = qnet.TrainSchedule(batch_size=4, hidden=(4,))
    agent = qnet.DQNAgent(2, 2, sch, np.random.default_rng(0))
    for _ in range(10):
        agent.remember(np.ones(2), 0, 1.0, np.ones(2))
    x = np.array([0.3, -0.2])
    frozen = qnet.forward(agent.target, x)
    for step in range(1, 400):
        agent.learn()
        assert agent.syncs == 0
        assert np.array_equal(qnet.forward(agent.target, x), frozen)
    agent.learn()
    assert agent.syncs == 1
    assert np.array_equal(qnet.forward(agent.target, x), qnet.forward(agent.online, x))


def test_non_finite_params_detected_at_sync():
    sch = qnet.TrainSchedule(batch_size=1, target_sync_every=1, hidden=(2,))
    agent = qnet.DQNAgent(2, 2, sch, np.random.default_rng(0))
    agent.online.weights[0][0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        agent.after_update()


# ---------------------------------------------------------------- epsilon greedy


def test_full_exploit_is_argmax():
    rng = np.random.default_rng(0)
    q = np.array([0.1, 3.0, 3.0, -1.0])
    assert {qnet.epsilon_greedy(q, 1.0, rng) for _ in range(200)} == {1}


def test_zero_exploit_is_uniform():
    rng = np.random.default_rng(42)
    n, k = 10_000, 4
    counts = np.bincount([qnet.epsilon_greedy(np.arange(k), 0.0, rng) for _ in range(n)], minlength=k)
    p = 1 / k
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_epsilon_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        qnet.epsilon_greedy([], 0.5, rng)
    with pytest.raises(ValueError):
        qnet.epsilon_greedy([1.0], 1.5, rng)


def test_anneal_schedule():
    sch = qnet.TrainSchedule()
    assert (sch.batch_size, sch.target_sync_every, sch.learn_rate, sch.memory_size) == (50, 400, 0.1, 20000)
    assert sch.exploit_probability(0, 1000) == pytest.approx(0.1)
    assert sch.exploit_probability(500, 1000) == pytest.approx(0.5)
    assert sch.exploit_probability(1000, 1000) == 0.9
    assert sch.exploit_probability(10**6, 1000) == 0.9


@pytest.mark.parametrize("kw", [{"gamma": 1.0}, {"batch_size": 0}, {"epsilon_start": 0.95},
                                {"reward_scale": 0}])
def test_invalid_schedule(kw):
    with pytest.raises(ValueError):
        qnet.TrainSchedule(**kw)


# ---------------------------------------------------------------- replay


@settings(max_examples=30, deadline=None)
@given(capacity=st.integers(1, 50), extra=st.integers(0, 80))
def test_replay_keeps_last_capacity(capacity, extra):
    buf = qnet.ReplayBuffer(capacity)
    for i in range(capacity + extra):
        buf.push(Transition(np.array([i]), i % 3, float(i), np.array([i + 1])))
    assert len(buf) == capacity
    kept = buf.ordered()["reward"]
    assert list(kept) == [float(i) for i in range(extra, capacity + extra)]


def test_replay_sample():
    buf = qnet.ReplayBuffer(10, rng_seed=1)
    for i in range(5):
        buf.add(state=np.array([i, i]), action=i, reward=float(i), next_state=np.zeros(2), terminal=False)
    b = buf.sample(3)
    assert b["state"].shape == (3, 2)
    assert np.array_equal(b["state"][:, 0], b["action"])
    with pytest.raises(ValueError):
        buf.sample(6)


# ---------------------------------------------------------------- training sanity


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dqn_solves_two_state_mdp(seed):
    agent, policy = _mdp.train_dqn(seed)
    assert policy == _mdp.value_iteration_policy()
    assert agent.online.is_finite()


# ---------------------------------------------------------------- files


def test_checkpoint_bit_exact(tmp_path):
    p = qnet.init_params((7, 5, 3), np.random.default_rng(9))
    qnet.save_params(p, tmp_path / "c.npz")
    back = qnet.load_params(tmp_path / "c.npz")
    assert back.sizes == p.sizes
    for a, b in zip(p.arrays(), back.arrays()):
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()


def test_train_log(tmp_path):
    log = qnet.TrainLog()
    log.record(1, 0.1, 0.5, 0.2, 50)
    log.write(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "step,epsilon,loss,mean_q,buffer_size"
    assert lines[1] == "1,0.1,0.5,0.2,50"
