"""Search environment and loop: observations, action decoding, budget
enforcement, quantize-finetune-evaluate episodes, and the DDPG, random and
evolutionary optimizers."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from . import hwsim
from .agent import AgentConfig, DDPGAgent
from .netgraph import evaluate, finetune, layer_features, train_float
from .policy import B_MAX, B_MIN, PINNED_BITS, BitwidthPolicy
from .quantizer import Calibrator, model_size, quantize_model, round_half_away

logger = logging.getLogger(__name__)

OBJECTIVES = ("latency", "energy", "model_size", "bitops")
OPTIMIZERS = ("ddpg", "random", "evolutionary")
DEFAULT_EPISODES = 600

# base units: seconds, joules, bits, bit-operations
UNITS = {
    "latency": {"s": 1.0, "ms": 1e-3, "us": 1e-6},
    "energy": {"J": 1.0, "mJ": 1e-3, "uJ": 1e-6},
    "model_size": {"b": 1.0, "bit": 1.0, "bits": 1.0, "B": 8.0, "kB": 8e3, "KiB": 8192.0, "MB": 8e6, "MiB": 8 * 2.0**20},
    "bitops": {"": 1.0, "k": 1e3, "M": 1e6, "G": 1e9},
}


class InfeasibleBudget(Exception):
    """Even the all-minimum policy exceeds the budget."""


def canonical_objective(name) -> str:
    name = {"size": "model_size"}.get(name, name)
    if name not in OBJECTIVES:
        raise ValueError(f"unknown objective {name!r}")
    return name


@dataclass(frozen=True)
class Budget:
    """Resource limit. With ``relative`` the limit is a multiple of the
    uniform 8-bit policy's cost."""

    objective: str
    limit: float
    relative: bool = False

    def __post_init__(self):
        object.__setattr__(self, "objective", canonical_objective(self.objective))
        if not self.limit > 0:
            raise ValueError("budget limit must be positive")


def parse_limit(text, objective) -> Budget:
    """``"0.55x"``, ``"12us"``, ``"3.5mJ"``, ``"20KiB"``, ``"1.2G"``..."""
    objective = canonical_objective(objective)
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-z]*)\s*", str(text))
    if not m:
        raise ValueError(f"cannot parse limit {text!r}")
    value, unit = float(m.group(1)), m.group(2)
    if unit == "x":
        return Budget(objective, value, relative=True)
    units = UNITS[objective]
    if unit not in units:
        raise ValueError(f"unit {unit!r} not valid for {objective}; use one of {sorted(units)} or 'x'")
    return Budget(objective, value * units[unit])


@dataclass(frozen=True)
class RewardConfig:
    mode: str = "constrained"  # or "accuracy_guaranteed"
    lam: float = 0.1
    lam_latency: float = 1.0
    lam_energy: float = 1.0
    lam_accuracy: float = 20.0
    latency_unit: str = "ms"
    energy_unit: str = "mJ"

    def __post_init__(self):
        mode = self.mode.replace("-", "_")
        if mode not in ("constrained", "accuracy_guaranteed"):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.latency_unit not in UNITS["latency"] or self.energy_unit not in UNITS["energy"]:
            raise ValueError("unknown latency/energy unit")


def constrained_reward(acc_quant, acc_origin, lam=0.1) -> float:
    return lam * (acc_quant - acc_origin)


def accuracy_guaranteed_reward(acc_quant, acc_origin, lat_quant, lat_origin, en_quant, en_origin,
                               cfg: RewardConfig) -> float:
    """Accuracy term minus resource terms: savings raise the reward.

    Latencies and energies are in seconds and joules and are expressed in
    ``cfg``'s units before weighting.
    """
    lat = (lat_quant - lat_origin) / UNITS["latency"][cfg.latency_unit]
    en = (en_quant - en_origin) / UNITS["energy"][cfg.energy_unit]
    return cfg.lam_accuracy * (acc_quant - acc_origin) - cfg.lam_latency * lat - cfg.lam_energy * en


def action_to_bits(a, b_min=B_MIN, b_max=B_MAX) -> int:
    """Continuous action in [0, 1] to a bitwidth, halves rounded away from zero."""
    b = int(round_half_away(b_min - 0.5 + float(a) * (b_max - b_min + 1)))
    return min(b_max, max(b_min, b))


def bits_to_action(b, b_min=B_MIN, b_max=B_MAX) -> float:
    """Centre of the action interval that decodes to ``b``."""
    return (b - b_min + 0.5) / (b_max - b_min + 1)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

@dataclass
class NormTable:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def for_model(cls, model) -> "NormTable":
        """Min/max per feature over every layer and both step kinds.

        The previous-action slot is pinned to [0, 1], its natural range.
        """
        feats = np.array([layer_features(model, k, kind, 0.0)
                          for k in range(len(model)) for kind in ("weight", "activation")])
        lo, hi = feats.min(axis=0), feats.max(axis=0)
        lo[9], hi[9] = 0.0, 1.0
        return cls(lo, hi)

    def __call__(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        span = self.hi - self.lo
        safe = np.where(span > 0, span, 1.0)
        return np.clip(np.where(span > 0, (raw - self.lo) / safe, 0.0), 0.0, 1.0)


def encode_observation(model, k, step_kind, prev_action, table: NormTable | None = None):
    table = table or NormTable.for_model(model)
    return table(layer_features(model, k, step_kind, prev_action))


# ---------------------------------------------------------------------------
# budget enforcement
# ---------------------------------------------------------------------------

def enforce_budget(policy: BitwidthPolicy, limit, cost_fn, fields=("w", "a"), b_min=B_MIN):
    """Lower bits until ``cost_fn(policy) <= limit``.

    Passes walk unpinned layers from last to first, taking one bit off each
    field in ``fields`` (weights before activations within a layer) and
    re-checking the cost after every decrement. If everything reaches
    ``b_min`` and the cost is still over, the result carries ``infeasible``.
    """
    out = policy.copy()
    out.infeasible = False
    if cost_fn(out) <= limit:
        return out
    attrs = [{"w": "w_bits", "a": "a_bits"}[f] for f in fields]
    order = out.unpinned[::-1]
    while True:
        moved = False
        for k in order:
            for attr in attrs:
                bits = getattr(out, attr)
                if bits[k] > b_min:
                    bits[k] -= 1
                    moved = True
                    if cost_fn(out) <= limit:
                        return out
        if not moved:
            out.infeasible = True
            return out


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------

class QuantEnv:
    """Everything needed to score a policy on one model, dataset and budget.

    Per-policy scores are cached: finetuning uses a fixed seed, so the same
    policy always reaches the same accuracy.
    """

    def __init__(self, model, splits, budget: Budget, hw=None, reward_cfg=None,
                 finetune_epochs=1, finetune_lr=1e-3, holdout=0.2, split_seed=0,
                 finetune_seed=0, requantize="step"):
        self.model = model
        self.splits = splits
        self.budget = budget
        self.hw = hwsim.load_hardware(hw or "edge")
        self.reward_cfg = reward_cfg or RewardConfig()
        self.finetune_epochs = finetune_epochs
        self.finetune_lr = finetune_lr
        self.finetune_seed = finetune_seed
        self.requantize = requantize
        self.ft_data, self.reward_data = splits.search_split(holdout, split_seed)
        self.calibrator = Calibrator(model, splits.calib)
        self.table = NormTable.for_model(model)
        n = len(model)
        self.pinned = (0, n - 1)
        self.steps = [(k, kind) for k in range(n) if k not in self.pinned for kind in ("weight", "activation")]
        self.codebook = budget.objective == "model_size"
        self.fields = ("w",) if self.codebook else ("w", "a")
        self.reference = BitwidthPolicy.uniform(n, PINNED_BITS)
        self.acc_origin = evaluate(model, self.reward_data)
        ref = hwsim.simulate(model, self.reference, self.hw)
        self.lat_origin, self.en_origin = ref.latency, ref.energy
        self.limit = budget.limit * self.cost(self.reference) if budget.relative else budget.limit
        self._cache = {}

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def enforce(self) -> bool:
        return self.reward_cfg.mode == "constrained"

    def cost(self, policy) -> float:
        obj = self.budget.objective
        if obj == "model_size":
            return float(model_size(self.model, policy, codebook_mode=True))
        if obj == "bitops":
            return float(hwsim.bitops(self.model, policy))
        report = hwsim.simulate(self.model, policy, self.hw)
        return report.latency if obj == "latency" else report.energy

    def observe(self, step, prev_action):
        k, kind = self.steps[step]
        return self.table(layer_features(self.model, k, kind, prev_action))

    def decode(self, actions) -> BitwidthPolicy:
        """Per-step actions to a policy; pinned layers stay at 8 bits."""
        if len(actions) != self.n_steps:
            raise ValueError(f"expected {self.n_steps} actions, got {len(actions)}")
        policy = self.reference.copy()
        for (k, kind), a in zip(self.steps, actions):
            if kind == "weight":
                policy.w_bits[k] = action_to_bits(a)
            elif not self.codebook:
                policy.a_bits[k] = action_to_bits(a)
        return policy

    def genes(self):
        """(layer, attr) slots the random and evolutionary optimizers vary."""
        attrs = ("w_bits",) if self.codebook else ("w_bits", "a_bits")
        return [(k, attr) for k in range(len(self.model)) if k not in self.pinned for attr in attrs]

    def finalize(self, policy) -> BitwidthPolicy:
        if not self.enforce:
            out = policy.copy()
            out.infeasible = False
            return out
        return enforce_budget(policy, self.limit, self.cost, self.fields)

    def quant_hook(self, policy):
        return quantize_model(self.model, policy, calibrator=self.calibrator, codebook=self.codebook)

    def accuracy(self, policy) -> float:
        key = policy.key()
        if key not in self._cache:
            hook = self.quant_hook(policy)
            tuned = finetune(self.model.copy(), self.ft_data, self.finetune_epochs, self.finetune_lr,
                             quant_hook=hook, seed=self.finetune_seed, requantize=self.requantize)
            self._cache[key] = evaluate(tuned, self.reward_data, hook)
        return self._cache[key]

    def reward(self, policy, acc) -> float:
        cfg = self.reward_cfg
        if cfg.mode == "constrained":
            return constrained_reward(acc, self.acc_origin, cfg.lam)
        rep = hwsim.simulate(self.model, policy, self.hw)
        return accuracy_guaranteed_reward(acc, self.acc_origin, rep.latency, self.lat_origin,
                                          rep.energy, self.en_origin, cfg)

    def score(self, policy):
        """Enforce the budget, then return ``(policy, reward, metrics)``."""
        policy = self.finalize(policy)
        acc = self.accuracy(policy)
        r = self.reward(policy, acc)
        return policy, r, {"accuracy": acc, "cost": self.cost(policy), "infeasible": policy.infeasible}

    def remeasure(self, policy, epochs=None) -> float:
        """Finetune on the whole train split, evaluate on validation."""
        hook = self.quant_hook(policy)
        tuned = finetune(self.model.copy(), self.splits.train, epochs or self.finetune_epochs,
                         self.finetune_lr, quant_hook=hook, seed=self.finetune_seed, requantize=self.requantize)
        return evaluate(tuned, self.splits.val, hook)


def pretrain_float(model, splits, holdout=0.2, split_seed=0, **train_kw):
    """Float training that leaves the reward split unseen.

    A model trained on the whole train split has memorised the held-out
    reward samples, which then rewards policies for preserving memorisation
    rather than for generalising.
    """
    ft_data, _ = splits.search_split(holdout, split_seed)
    return train_float(model, ft_data, **train_kw)


def run_episode(env: QuantEnv, agent: DDPGAgent, explore=True):
    """One pass over all searchable steps.

    Returns ``(transitions, reward, metrics)``; metrics also carry the raw
    observations, actions and the final policy.
    """
    obs, actions = [], []
    prev = 0.0
    for step in range(env.n_steps):
        o = env.observe(step, prev)
        a = agent.explore(o) if explore else agent.act(o)
        obs.append(o)
        actions.append(a)
        prev = a
    policy, r, metrics = env.score(env.decode(actions))
    metrics.update(policy=policy, observations=obs, actions=actions)
    return agent.make_episode(obs, actions, r), r, metrics


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

LOG_FIELDS = ["episode", "reward", "accuracy", "cost", "sigma", "infeasible", "w_bits", "a_bits"]


@dataclass
class SearchResult:
    best_policy: BitwidthPolicy
    best_reward: float
    best_accuracy: float  # on the reward split, as seen during search
    best_cost: float
    val_accuracy: float  # re-measured after finetuning on the whole train split
    log: list = field(default_factory=list)
    agent: DDPGAgent | None = None
    acc_origin: float = 0.0
    limit: float = 0.0

    def write_log(self, path):
        write_exploration_csv(self.log, path)


def _log_row(episode, r, metrics, policy, sigma):
    return {
        "episode": episode, "reward": r, "accuracy": metrics["accuracy"], "cost": metrics["cost"],
        "sigma": sigma, "infeasible": int(policy.infeasible),
        "w_bits": " ".join(map(str, policy.w_bits)), "a_bits": " ".join(map(str, policy.a_bits)),
    }


def write_exploration_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({**row, **{k: f"{row[k]:.9g}" for k in ("reward", "accuracy", "cost", "sigma")}})


def _search_ddpg(env, episodes, seed, agent_cfg, on_episode):
    cfg = agent_cfg or AgentConfig()
    cfg = AgentConfig(**{**cfg.__dict__, "seed": seed})
    agent = DDPGAgent(cfg)
    for e in range(episodes):
        sigma = agent.sigma
        episode, r, m = run_episode(env, agent)
        agent.observe_episode(m["observations"], m["actions"], r)
        on_episode(e, r, m, m["policy"], sigma)
    return agent


def _random_genome(env, rng):
    return [int(rng.integers(B_MIN, B_MAX + 1)) for _ in env.genes()]


def _policy_from_genome(env, genome):
    p = env.reference.copy()
    for (k, attr), b in zip(env.genes(), genome):
        getattr(p, attr)[k] = b
    return p


def _genome_from_policy(env, policy):
    return [getattr(policy, attr)[k] for k, attr in env.genes()]


def _search_random(env, episodes, seed, on_episode):
    rng = np.random.default_rng(seed)
    for e in range(episodes):
        policy, r, m = env.score(_policy_from_genome(env, _random_genome(env, rng)))
        on_episode(e, r, m, policy, 0.0)


def _search_evolutionary(env, episodes, seed, on_episode, population=20, tournament=4,
                         mutation_rate=0.1, elitism=2, max_retries=20):
    """Generational GA, mutation only.

    Scored genomes are written back after budget enforcement. Elites carry
    their fitness forward, and a child identical to an already scored genome
    is mutated again (up to ``max_retries`` times) so episodes are not spent
    on repeats.
    """
    rng = np.random.default_rng(seed)
    seen = set()
    e = 0

    def evaluate_all(genomes):
        nonlocal e
        out = []
        for genome in genomes:
            if e >= episodes:
                break
            policy, r, m = env.score(_policy_from_genome(env, genome))
            on_episode(e, r, m, policy, 0.0)
            e += 1
            seen.add(tuple(genome))
            enforced = _genome_from_policy(env, policy)
            seen.add(tuple(enforced))
            out.append((r, enforced))
        return out

    def mutate(parent):
        child = list(parent)
        for i in range(len(child)):
            if rng.random() < mutation_rate:
                child[i] = int(min(B_MAX, max(B_MIN, child[i] + rng.choice((-1, 1)))))
        return child

    scored = evaluate_all([_random_genome(env, rng) for _ in range(population)])
    while e < episodes:
        # stable sort keeps earlier members ahead on equal reward
        scored.sort(key=lambda t: -t[0])
        children = []
        while len(children) < population - elitism:
            picks = rng.choice(len(scored), size=min(tournament, len(scored)), replace=False)
            parent = scored[int(picks.min())][1]
            child = mutate(parent)
            for _ in range(max_retries):
                if tuple(child) not in seen and child not in children:
                    break
                child = mutate(child)
            children.append(child)
        scored = scored[:elitism] + evaluate_all(children)


def search(env: QuantEnv, optimizer="ddpg", episodes=DEFAULT_EPISODES, seed=0, agent_cfg=None,
           remeasure=True) -> SearchResult:
    """Explore ``episodes`` policies and return the best by reward.

    Ties in reward go to the earliest episode.
    """
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    log = []
    best = {}

    def on_episode(e, r, m, policy, sigma):
        log.append(_log_row(e, r, m, policy, sigma))
        logger.info("episode %d reward %.5f acc %.4f cost %.6g", e, r, m["accuracy"], m["cost"])
        if not best or r > best["reward"]:
            best.update(reward=r, policy=policy.copy(), accuracy=m["accuracy"], cost=m["cost"])

    agent = None
    if optimizer == "ddpg":
        agent = _search_ddpg(env, episodes, seed, agent_cfg, on_episode)
    elif optimizer == "random":
        _search_random(env, episodes, seed, on_episode)
    else:
        _search_evolutionary(env, episodes, seed, on_episode)
    val = env.remeasure(best["policy"]) if remeasure else float("nan")
    policy = best["policy"]
    policy.meta = {"reward": best["reward"], "accuracy": best["accuracy"], "cost": best["cost"],
                   "val_accuracy": val, "optimizer": optimizer, "seed": seed}
    return SearchResult(policy, best["reward"], best["accuracy"], best["cost"], val, log, agent,
                        env.acc_origin, env.limit)
