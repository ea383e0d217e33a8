"""A fixed 2-state, 2-action deterministic MDP and a DQN driver for it."""
import numpy as np

from friendq import equilibrium, qnet

# action 0 stays, action 1 switches; staying in state 1 pays 1, switching from 0 costs 0.1
NEXT = [np.array([0, 1]), np.array([1, 0])]
REWARD = [np.array([0.0, -0.1]), np.array([1.0, 0.0])]
GAMMA = 0.9


def value_iteration_policy():
    game = equilibrium.TabularGame((2,), NEXT, [r[None, :] for r in REWARD])
    q = equilibrium.value_iteration(game, GAMMA)
    return [int(np.argmax(qs)) for qs in q]


def onehot(s):
    x = np.zeros(2)
    x[s] = 1.0
    return x


def train_dqn(seed, steps=5000):
    sch = qnet.TrainSchedule(batch_size=32, target_sync_every=100, learn_rate=0.05, gamma=GAMMA,
                             memory_size=2000, hidden=(16,))
    rng = np.random.default_rng(seed)
    agent = qnet.DQNAgent(2, 2, sch, rng)
    s = 0
    for t in range(steps):
        if t % 20 == 0:
            s = int(rng.integers(2))
        a = agent.act(onehot(s), sch.exploit_probability(t, steps // 5))
        s2 = int(NEXT[s][a])
        agent.remember(onehot(s), a, REWARD[s][a], onehot(s2))
        agent.learn()
        s = s2
    return agent, [int(np.argmax(agent.q_values(onehot(s)))) for s in (0, 1)]
