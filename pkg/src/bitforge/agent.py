"""DDPG actor-critic on a small numpy MLP with hand-written gradients."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

OBS_DIM = 10
CHECKPOINT_VERSION = 1


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MlpNet:
    """Fully-connected net, ReLU hidden layers, sigmoid or identity output.

    ``weights[i]`` has shape (fan_in, fan_out). Hidden layers use uniform
    fan-in init; the output layer draws from U(-final_scale, final_scale).
    """

    def __init__(self, sizes, output="identity", seed=0, final_scale=3e-3):
        if output not in ("identity", "sigmoid"):
            raise ValueError(f"unknown output activation {output!r}")
        self.sizes = list(sizes)
        self.output = output
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        last = len(sizes) - 2
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = final_scale if i == last else 1.0 / np.sqrt(fi)
            self.weights.append(rng.uniform(-bound, bound, size=(fi, fo)))
            self.biases.append(rng.uniform(-bound, bound, size=fo))

    def params(self):
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def set_params(self, params):
        for i, p in enumerate(params):
            (self.weights if i % 2 == 0 else self.biases)[i // 2][...] = p

    def copy(self) -> "MlpNet":
        other = MlpNet.__new__(MlpNet)
        other.sizes, other.output = list(self.sizes), self.output
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def forward(self, x):
        """Returns ``(y, cache)`` for a batch ``x`` of shape (N, in)."""
        h = np.atleast_2d(np.asarray(x, dtype=np.float64))
        hs = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = np.maximum(z, 0.0) if i < last else (sigmoid(z) if self.output == "sigmoid" else z)
            hs.append(h)
        return h, hs

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, hs, grad_out):
        """Gradients of ``sum(grad_out * y)`` w.r.t. params and input."""
        g = grad_out
        if self.output == "sigmoid":
            y = hs[-1]
            g = g * y * (1.0 - y)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = hs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (hs[i] > 0)
        return grads, g

    def soft_update(self, src: "MlpNet", tau):
        for p, q in zip(self.params(), src.params()):
            p *= 1.0 - tau
            p += tau * q

    def to_json(self):
        return {"sizes": self.sizes, "output": self.output,
                "weights": [w.tolist() for w in self.weights], "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_json(cls, doc) -> "MlpNet":
        net = cls.__new__(cls)
        net.sizes, net.output = list(doc["sizes"]), doc["output"]
        net.weights = [np.array(w, dtype=np.float64) for w in doc["weights"]]
        net.biases = [np.array(b, dtype=np.float64) for b in doc["biases"]]
        return net


class Adam:
    """Adam with bias-corrected moments over a fixed list of arrays."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def to_json(self):
        return {"t": self.t, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}

    def load_json(self, doc):
        self.t = int(doc["t"])
        self.m = [np.array(a, dtype=np.float64) for a in doc["m"]]
        self.v = [np.array(a, dtype=np.float64) for a in doc["v"]]


@dataclass
class AgentConfig:
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma: float = 1.0
    sigma0: float = 0.5
    sigma_decay: float = 0.99
    baseline_ema: float = 0.95
    tau: float = 0.01
    replay_episodes: int = 4
    # gradient steps after each episode; 0 means one per transition
    updates_per_episode: int = 0
    # episode rewards are multiplied by this before the agent sees them, so
    # accuracy deltas act in percentage points
    reward_scale: float = 100.0
    hidden: tuple = (400, 300)
    final_init: float = 3e-3
    literal_eq11: bool = False
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.gamma != 1.0:
            raise ValueError("gamma is fixed at 1")
        if not 0 <= self.sigma_decay <= 1 or self.sigma0 < 0:
            raise ValueError("need sigma0 >= 0 and sigma_decay in [0, 1]")


@dataclass
class Transition:
    obs: np.ndarray
    action: float
    reward: float  # episode reward minus the baseline at episode end
    next_obs: np.ndarray
    terminal: bool

    def to_json(self):
        return {"obs": self.obs.tolist(), "action": self.action, "reward": self.reward,
                "next_obs": self.next_obs.tolist(), "terminal": self.terminal}

    @classmethod
    def from_json(cls, d):
        return cls(np.array(d["obs"]), d["action"], d["reward"], np.array(d["next_obs"]), d["terminal"])


@dataclass
class ReplayStore:
    """Whole episodes, oldest evicted first."""

    capacity: int = 4
    episodes: deque = field(default_factory=deque)

    def push(self, episode):
        if self.capacity <= 0:
            return
        self.episodes.append(list(episode))
        while len(self.episodes) > self.capacity:
            self.episodes.popleft()

    def __len__(self):
        return len(self.episodes)

    def transitions(self):
        return [t for ep in self.episodes for t in ep]


def _stack(batch):
    obs = np.array([t.obs for t in batch])
    act = np.array([[t.action] for t in batch])
    nxt = np.array([t.next_obs for t in batch])
    r = np.array([t.reward for t in batch])
    term = np.array([t.terminal for t in batch])
    return obs, act, r, nxt, term


class DDPGAgent:
    def __init__(self, config: AgentConfig | None = None, obs_dim=OBS_DIM):
        self.cfg = cfg = config or AgentConfig()
        self.obs_dim = obs_dim
        self.actor = MlpNet([obs_dim, *cfg.hidden, 1], "sigmoid", seed=cfg.seed, final_scale=cfg.final_init)
        self.critic = MlpNet([obs_dim + 1, *cfg.hidden, 1], "identity", seed=cfg.seed + 1, final_scale=cfg.final_init)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam(self.actor.params(), cfg.actor_lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.critic_opt = Adam(self.critic.params(), cfg.critic_lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.replay = ReplayStore(cfg.replay_episodes)
        self.rng = np.random.default_rng(cfg.seed + 2)
        self.baseline = 0.0
        self.episodes_done = 0

    # -- acting ------------------------------------------------------------

    @property
    def sigma(self) -> float:
        return self.cfg.sigma0 * self.cfg.sigma_decay**self.episodes_done

    def act(self, obs) -> float:
        return actor_act(self.actor, obs)

    def explore(self, obs) -> float:
        return explore_act(self.actor, obs, self.sigma, self.rng)

    # -- learning ----------------------------------------------------------

    def _bootstrap_nets(self):
        if self.cfg.literal_eq11:
            return self.actor, self.critic
        return self.actor_target, self.critic_target

    def targets(self, batch):
        """``r + Q'(O', w'(O'))``, with the bootstrap term dropped at the end."""
        obs, act, r, nxt, term = _stack(batch)
        actor, critic = self._bootstrap_nets()
        q_next = critic(np.hstack([nxt, actor(nxt)]))[:, 0]
        return r + self.cfg.gamma * np.where(term, 0.0, q_next)

    def critic_loss_and_grads(self, obs, act, targets):
        q, hs = self.critic.forward(np.hstack([obs, act]))
        resid = q[:, 0] - targets
        loss = float(np.mean(resid**2))
        grads, _ = self.critic.backward(hs, (2.0 / len(resid)) * resid[:, None])
        return loss, grads

    def actor_loss_and_grads(self, obs):
        """Loss ``-mean Q(O, w(O))`` and its gradient w.r.t. actor params."""
        a, ahs = self.actor.forward(obs)
        q, chs = self.critic.forward(np.hstack([obs, a]))
        loss = -float(np.mean(q))
        _, gin = self.critic.backward(chs, np.full_like(q, -1.0 / len(q)))
        grads, _ = self.actor.backward(ahs, gin[:, -1:])
        return loss, grads

    def update(self, batch):
        """One critic step, one actor step, one soft target update."""
        obs, act, _, _, _ = _stack(batch)
        tgt = self.targets(batch)
        c_loss, c_grads = self.critic_loss_and_grads(obs, act, tgt)
        if not np.isfinite(c_loss):
            raise FloatingPointError("critic loss is not finite")
        self.critic_opt.step(self.critic.params(), c_grads)
        a_loss, a_grads = self.actor_loss_and_grads(obs)
        if not np.isfinite(a_loss):
            raise FloatingPointError("actor loss is not finite")
        self.actor_opt.step(self.actor.params(), a_grads)
        if not self.cfg.literal_eq11:
            self.actor_target.soft_update(self.actor, self.cfg.tau)
            self.critic_target.soft_update(self.critic, self.cfg.tau)
        return c_loss, a_loss

    def make_episode(self, observations, actions, reward):
        """Transitions of a finished episode, rewards shifted by the baseline."""
        n = len(actions)
        adv = self.cfg.reward_scale * float(reward) - self.baseline
        out = []
        for k in range(n):
            nxt = observations[k + 1] if k + 1 < n else np.zeros(self.obs_dim)
            out.append(Transition(np.asarray(observations[k], dtype=np.float64), float(actions[k]),
                                  adv, np.asarray(nxt, dtype=np.float64), k + 1 == n))
        return out

    def observe_episode(self, observations, actions, reward):
        """Learn from a finished episode, then update baseline and noise.

        Returns the mean (critic loss, actor loss) over the gradient steps.
        """
        episode = self.make_episode(observations, actions, reward)
        batch = episode + self.replay.transitions()
        n_updates = self.cfg.updates_per_episode or len(episode)
        losses = [self.update(batch) for _ in range(n_updates)]
        self.replay.push(episode)
        self.baseline = ema(self.baseline, self.cfg.reward_scale * float(reward), self.cfg.baseline_ema)
        self.episodes_done += 1
        return tuple(float(np.mean(x)) for x in zip(*losses))

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "obs_dim": self.obs_dim,
            "actor": self.actor.to_json(), "critic": self.critic.to_json(),
            "actor_target": self.actor_target.to_json(), "critic_target": self.critic_target.to_json(),
            "actor_opt": self.actor_opt.to_json(), "critic_opt": self.critic_opt.to_json(),
            "replay": [[t.to_json() for t in ep] for ep in self.replay.episodes],
            "rng": self.rng.bit_generator.state,
            "baseline": self.baseline, "episodes_done": self.episodes_done, "sigma": self.sigma,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.state_dict()))
        return path

    @classmethod
    def from_state(cls, doc) -> "DDPGAgent":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        agent = cls(AgentConfig(**doc["config"]), doc["obs_dim"])
        for name in ("actor", "critic", "actor_target", "critic_target"):
            setattr(agent, name, MlpNet.from_json(doc[name]))
        agent.actor_opt.load_json(doc["actor_opt"])
        agent.critic_opt.load_json(doc["critic_opt"])
        for ep in doc["replay"]:
            agent.replay.push([Transition.from_json(t) for t in ep])
        agent.rng.bit_generator.state = doc["rng"]
        agent.baseline = float(doc["baseline"])
        agent.episodes_done = int(doc["episodes_done"])
        return agent

    @classmethod
    def load(cls, path) -> "DDPGAgent":
        return cls.from_state(json.loads(Path(path).read_text()))


def actor_act(net: MlpNet, obs) -> float:
    a = float(net(np.asarray(obs, dtype=np.float64)[None])[0, 0])
    return min(1.0, max(0.0, a))


def truncated_normal(mean, sigma, rng, lo=0.0, hi=1.0, max_rejects=100) -> float:
    """Rejection sample from N(mean, sigma^2) restricted to [lo, hi]."""
    if sigma == 0:
        return float(mean)
    for _ in range(max_rejects):
        x = rng.normal(mean, sigma)
        if lo <= x <= hi:
            return float(x)
    return float(min(hi, max(lo, x)))


def explore_act(net: MlpNet, obs, sigma, rng) -> float:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return truncated_normal(actor_act(net, obs), sigma, rng)


def compute_targets(episode, baseline, critic=None, actor=None, gamma=1.0):
    """``R - B + gamma * Q(O', w(O'))`` per step; the last step has no bootstrap.

    ``episode`` holds transitions whose ``reward`` is the raw episode reward.
    """
    r = np.array([t.reward for t in episode]) - baseline
    if critic is None:
        return r
    nxt = np.array([t.next_obs for t in episode])
    term = np.array([t.terminal for t in episode])
    q = critic(np.hstack([nxt, actor(nxt)]))[:, 0]
    return r + gamma * np.where(term, 0.0, q)


def ema(prev, value, coef=0.95):
    return coef * prev + (1 - coef) * value
