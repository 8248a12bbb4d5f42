import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitforge import hwsim
from bitforge.agent import AgentConfig, DDPGAgent
from bitforge.cli import bundled_model_path
from bitforge.data import synthetic_splits
from bitforge.netgraph import load_model, model_from_dict
from bitforge.policy import BitwidthPolicy
from bitforge.search import (Budget, NormTable, QuantEnv, RewardConfig, accuracy_guaranteed_reward, action_to_bits,
                             bits_to_action, constrained_reward, encode_observation, enforce_budget, parse_limit,
                             run_episode, search, write_exploration_csv)

TINY = {
    "layers": [
        {"kind": "conv", "c_in": 3, "c_out": 4, "kernel": 3, "stride": 1, "feat": 8},
        {"kind": "depthwise_conv", "c_in": 4, "c_out": 4, "kernel": 3, "stride": 2, "feat": 8},
        {"kind": "conv", "c_in": 4, "c_out": 6, "kernel": 1, "stride": 1, "feat": 4},
        {"kind": "fc", "c_in": 96, "c_out": 10},
    ],
    "init": "random:1",
}


@pytest.fixture(scope="module")
def tiny():
    return model_from_dict(TINY), synthetic_splits(seed=3, n_train=60, n_val=30, n_calib=8, size=8)


def tiny_env(tiny, limit="0.6x", objective="latency", **kw):
    model, splits = tiny
    return QuantEnv(model, splits, parse_limit(limit, objective), "edge", **kw)


# -- decoding ----------------------------------------------------------------

def test_action_decoding_exhaustive():
    bits = [action_to_bits(i / 1000) for i in range(1001)]
    assert bits[0] == 2 and bits[-1] == 8 and bits[500] == 5
    assert all(2 <= b <= 8 for b in bits)
    assert all(x <= y for x, y in zip(bits, bits[1:]))
    assert sorted(set(bits)) == list(range(2, 9))
    for b in range(2, 9):
        assert action_to_bits(bits_to_action(b)) == b


# -- observations ------------------------------------------------------------

def test_observation_examples(tiny):
    model, _ = tiny
    table = NormTable.for_model(model)
    obs = [encode_observation(model, k, kind, 0.3, table) for k in range(len(model)) for kind in ("weight", "activation")]
    obs = np.array(obs)
    assert np.all((obs >= 0) & (obs <= 1))
    first = encode_observation(model, 0, "weight", 0.0, table)
    assert first[0] == 0.0 and first[9] == 0.0
    assert np.max(obs, axis=0)[0] == 1.0
    # the fc layer has the widest input (96), so its c_in component is 1
    assert obs[-1, 1] == 1.0 and obs[-2, 1] == 1.0
    # depthwise and weight/activation indicators pass through
    assert obs[2, 7] == 1.0 and obs[0, 7] == 0.0
    assert obs[0, 8] == 1.0 and obs[1, 8] == 0.0
    assert obs[:, -1].tolist() == [0.3] * len(obs)


# -- enforcement -------------------------------------------------------------

def table_cost(per_bit):
    """Cost = sum over layers of per_bit[k] * (w + a)."""
    def cost(p):
        return sum(c * (w + a) for c, w, a in zip(per_bit, p.w_bits, p.a_bits))
    return cost


def test_enforcement_hand_trace():
    # layers 0 and 4 pinned; unpinned 1..3 each cost 1 per bit; pinned cost 0
    cost = table_cost([0, 1, 1, 1, 0])
    p = BitwidthPolicy([8, 6, 6, 6, 8], [8, 6, 6, 6, 8], pinned=(0, 4))
    # start 36; expected decrements: w3 a3 w2 a2 w1 a1 (30) then w3 (29) hits 29
    out = enforce_budget(p, 29, cost)
    assert out.w_bits == [8, 5, 5, 4, 8] and out.a_bits == [8, 5, 5, 5, 8]
    assert not out.infeasible
    assert enforce_budget(p, 36, cost) == p


def test_enforcement_examples():
    cost = table_cost([0, 2, 3, 1, 0])
    p = BitwidthPolicy([8] * 5, [8] * 5, pinned=(0, 4))
    assert enforce_budget(p, 1e9, cost).key() == p.key()
    out = enforce_budget(p, 10, cost)
    assert out.infeasible and out.w_bits[1:4] == [2, 2, 2] and out.a_bits[1:4] == [2, 2, 2]
    assert out.w_bits[0] == out.w_bits[4] == 8


DESK = load_model(bundled_model_path())


@settings(max_examples=500, deadline=None)
@given(st.lists(st.integers(2, 8), min_size=6, max_size=6), st.lists(st.integers(2, 8), min_size=6, max_size=6),
       st.floats(0.2, 1.1), st.sampled_from(["edge", "cloud", "edge-spatial", "cloud-spatial"]),
       st.sampled_from(["latency", "energy", "bitops"]))
def test_enforcement_properties(w, a, frac, hw_name, objective):
    hw = hwsim.preset(hw_name)
    p = BitwidthPolicy([8, *w, 8], [8, *a, 8], pinned=(0, 7))

    def cost(q):
        if objective == "bitops":
            return hwsim.bitops(DESK, q)
        rep = hwsim.simulate(DESK, q, hw)
        return rep.latency if objective == "latency" else rep.energy

    limit = frac * cost(BitwidthPolicy.uniform(8, 8))
    out = enforce_budget(p, limit, cost)
    if out.infeasible:
        assert all(out.w_bits[k] == 2 and out.a_bits[k] == 2 for k in out.unpinned)
    else:
        assert cost(out) <= limit
    assert all(x <= y for x, y in zip(out.w_bits, p.w_bits))
    assert all(x <= y for x, y in zip(out.a_bits, p.a_bits))
    assert out.w_bits[0] == out.a_bits[7] == 8
    again = enforce_budget(out, limit, cost)
    assert again.key() == out.key() and again.infeasible == out.infeasible


def test_enforcement_weights_only_field():
    cost = table_cost([0, 1, 1, 0])
    p = BitwidthPolicy([8, 8, 8, 8], [8, 8, 8, 8], pinned=(0, 3))
    out = enforce_budget(p, 30, cost, fields=("w",))
    assert out.a_bits == [8, 8, 8, 8] and out.w_bits == [8, 7, 7, 8]


# -- rewards -----------------------------------------------------------------

def test_constrained_reward_example():
    assert constrained_reward(0.70, 0.75) == pytest.approx(-0.005, abs=1e-15)


def test_accuracy_guaranteed_example():
    cfg = RewardConfig(mode="accuracy_guaranteed")
    r = accuracy_guaranteed_reward(0.9, 0.9, 0.050, 0.060, 0.010, 0.015, cfg)
    assert r == pytest.approx(10 + 5)
    slower = accuracy_guaranteed_reward(0.9, 0.9, 0.070, 0.060, 0.015, 0.015, cfg)
    assert slower == pytest.approx(-10)
    assert accuracy_guaranteed_reward(0.8, 0.9, 1, 1, 1, 1, cfg) == pytest.approx(-2.0)


def test_limit_parsing():
    assert parse_limit("0.55x", "latency") == Budget("latency", 0.55, True)
    assert parse_limit("12us", "latency").limit == pytest.approx(12e-6)
    assert parse_limit("20KiB", "size") == Budget("model_size", 20 * 8192)
    assert parse_limit("1.5G", "bitops").limit == 1.5e9
    for bad in ("fast", "12 parsecs", "-1ms"):
        with pytest.raises(ValueError):
            parse_limit(bad, "latency")
    with pytest.raises(ValueError):
        parse_limit("0x", "latency")
    with pytest.raises(ValueError):
        parse_limit("1", "speed")
    with pytest.raises(ValueError):
        RewardConfig(mode="greedy")


# -- environment and episodes ------------------------------------------------

def test_episode_structure(tiny):
    env = tiny_env(tiny)
    agent = DDPGAgent(AgentConfig(hidden=(16, 16)))
    for _ in range(3):
        episode, r, m = run_episode(env, agent)
        assert len(episode) == 2 * (len(env.model) - 2) == env.n_steps
        for t in episode:
            assert np.all((t.obs >= 0) & (t.obs <= 1)) and 0 <= t.action <= 1
        assert episode[-1].terminal and not any(t.terminal for t in episode[:-1])
        p = m["policy"]
        assert p.w_bits[0] == p.a_bits[0] == p.w_bits[-1] == p.a_bits[-1] == 8
        assert all(2 <= b <= 8 for b in p.w_bits + p.a_bits)
        assert p.infeasible or env.cost(p) <= env.limit
        agent.observe_episode(m["observations"], m["actions"], r)


def test_reward_depends_only_on_accuracy(tiny):
    env = tiny_env(tiny)
    a = BitwidthPolicy([8, 2, 5, 8], [8, 5, 2, 8], pinned=(0, 3))
    b = BitwidthPolicy([8, 5, 2, 8], [8, 2, 2, 8], pinned=(0, 3))
    assert env.cost(a) != env.cost(b)
    assert env.reward(a, 0.7) == env.reward(b, 0.7) == constrained_reward(0.7, env.acc_origin)


def test_env_caches_accuracy(tiny):
    env = tiny_env(tiny)
    p = BitwidthPolicy([8, 4, 4, 8], [8, 4, 4, 8], pinned=(0, 3))
    assert env.accuracy(p) == env.accuracy(p.copy())
    assert len(env._cache) == 1


def test_size_objective_only_varies_weights(tiny):
    env = tiny_env(tiny, "0.3x", "size")
    assert [g[1] for g in env.genes()] == ["w_bits", "w_bits"]
    policy = env.decode([0.0, 0.0, 0.0, 0.0])
    assert policy.a_bits == [8, 8, 8, 8]
    res = search(env, "random", episodes=3, seed=0, remeasure=False)
    assert res.best_policy.a_bits == [8, 8, 8, 8]


def test_accuracy_guaranteed_skips_enforcement(tiny):
    env = tiny_env(tiny, "0.01x", reward_cfg=RewardConfig(mode="accuracy_guaranteed"))
    p = BitwidthPolicy([8, 8, 8, 8], [8, 8, 8, 8], pinned=(0, 3))
    assert env.finalize(p).key() == p.key()


# -- search ------------------------------------------------------------------

def test_single_random_episode_returns_that_policy(tiny):
    env = tiny_env(tiny)
    res = search(env, "random", episodes=1, seed=5, remeasure=False)
    rng = np.random.default_rng(5)
    genome = [int(rng.integers(2, 9)) for _ in env.genes()]
    expected = enforce_budget(BitwidthPolicy([8, genome[0], genome[2], 8], [8, genome[1], genome[3], 8], (0, 3)),
                              env.limit, env.cost)
    assert res.best_policy.key() == expected.key() and len(res.log) == 1


@pytest.mark.parametrize("optimizer", ["ddpg", "random", "evolutionary"])
def test_search_is_deterministic(tiny, optimizer, tmp_path):
    cfg = AgentConfig(hidden=(16, 16))
    runs = []
    for i in range(2):
        env = tiny_env(tiny)
        res = search(env, optimizer, episodes=25, seed=7, agent_cfg=cfg)
        path = tmp_path / f"log{i}.csv"
        res.write_log(path)
        runs.append((res.best_policy.to_dict(), res.best_reward, res.val_accuracy, path.read_bytes()))
    assert runs[0] == runs[1]


@pytest.mark.parametrize("optimizer", ["ddpg", "random", "evolutionary"])
def test_search_invariants(tiny, optimizer):
    env = tiny_env(tiny)
    res = search(env, optimizer, episodes=25, seed=1, agent_cfg=AgentConfig(hidden=(16, 16)), remeasure=False)
    assert len(res.log) == 25
    assert res.best_reward == max(r["reward"] for r in res.log)
    first = next(r for r in res.log if r["reward"] == res.best_reward)
    assert " ".join(map(str, res.best_policy.w_bits)) == first["w_bits"]
    for row in res.log:
        w = list(map(int, row["w_bits"].split()))
        a = list(map(int, row["a_bits"].split()))
        assert w[0] == a[0] == w[-1] == a[-1] == 8
        assert row["infeasible"] or row["cost"] <= env.limit * (1 + 1e-12)


def test_evolutionary_spends_episodes_on_new_policies(tiny):
    env = tiny_env(tiny, "1.0x")
    res = search(env, "evolutionary", episodes=40, seed=0, remeasure=False)
    keys = [(r["w_bits"], r["a_bits"]) for r in res.log]
    assert len(set(keys)) >= 35


def test_search_argument_errors(tiny):
    env = tiny_env(tiny)
    with pytest.raises(ValueError):
        search(env, "bayesian", episodes=1)
    with pytest.raises(ValueError):
        search(env, "random", episodes=0)


def test_exploration_csv(tiny, tmp_path):
    env = tiny_env(tiny)
    res = search(env, "random", episodes=3, seed=0, remeasure=False)
    write_exploration_csv(res.log, tmp_path / "x.csv")
    lines = (tmp_path / "x.csv").read_text().splitlines()
    assert lines[0] == "episode,reward,accuracy,cost,sigma,infeasible,w_bits,a_bits" and len(lines) == 4
