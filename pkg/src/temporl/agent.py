"""Goal-conditioned SAC with a policy/prior mixture, plus SAC and SAC+BC baselines."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .flowprior import FlowPrior
from .mazeworld import MazeEnv, OfflineDataset, reward_fn
from .netlib import (
    Adam,
    Mlp,
    MlpSpec,
    ParamBundle,
    SquashedGaussianPolicy,
    copy_params,
    load_params,
    polyak_update,
    save_params,
)

log = logging.getLogger(__name__)

MODES = ("sac", "sac_bc", "temporl")

# Named random streams; ids are fixed so adding a stream never perturbs the others.
STREAM_IDS = {
    "init": 0,
    "env": 1,
    "policy_noise": 2,
    "prior": 3,
    "relabel": 4,
    "update": 5,
    "eval": 6,
    "probe": 7,
    "bc": 8,
}


def make_stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, STREAM_IDS[name]]))


class ConfigError(ValueError):
    """Inconsistent agent or experiment configuration."""


@dataclass
class AgentConfig:
    mode: str = "temporl"
    gamma: float = 0.99
    polyak: float = 0.995
    alpha: float | None = None  # None: 0.01 for temporl, 0.02 otherwise
    n_step: int = 10
    batch_size: int = 100
    lr: float = 1e-3
    hidden: tuple[int, ...] = (256, 256)
    mixing_hidden: tuple[int, ...] = (128, 128)
    lambda0: float = 0.95
    mixing_grad_scale: float = 1e-9
    replay_size: int = 100_000
    her_ratio: float = 4.0
    epochs: int = 125
    steps_per_epoch: int = 4000
    start_steps: int = 10_000
    update_after: int = 1000
    update_every: int = 50
    updates_per_iteration: int | None = None  # None: same as update_every
    eval_episodes: int = 10
    bc_epochs: int = 10
    stop_success: float | None = None  # end training once evaluation success reaches this
    lambda_override: float | None = None  # pin the mixing weight (testing/ablation)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.mixing_hidden = tuple(int(h) for h in self.mixing_hidden)
        if self.alpha is None:
            self.alpha = 0.01 if self.mode == "temporl" else 0.02
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.n_step < 1:
            raise ConfigError("n_step must be >= 1")

    @property
    def grad_steps(self) -> int:
        return self.update_every if self.updates_per_iteration is None else self.updates_per_iteration


@contextlib.contextmanager
def frozen(params):
    """Temporarily exclude parameters from the graph."""
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


# -- replay -------------------------------------------------------------------
class ReplayBuffer:
    """FIFO ring buffer of goal-conditioned transitions, indexed by episode for n-step and hindsight lookups."""

    def __init__(self, capacity: int, history_len: int = 1, act_dim: int = 2):
        self.capacity = int(capacity)
        self.history_len = history_len
        self.pos = np.zeros((self.capacity, 2))
        self.goal = np.zeros((self.capacity, 2))
        self.act = np.zeros((self.capacity, act_dim))
        self.next_pos = np.zeros((self.capacity, 2))
        self.reward = np.zeros(self.capacity)
        self.episode = np.full(self.capacity, -1, dtype=np.int64)
        self.step = np.zeros(self.capacity, dtype=np.int64)
        self.hist = np.zeros((self.capacity, history_len, act_dim))
        self.next_hist = np.zeros((self.capacity, history_len, act_dim))
        self.ptr = 0
        self.size = 0
        self.episode_len: dict[int, int] = {}

    def __len__(self) -> int:
        return self.size

    def store(self, pos, goal, action, next_pos, reward, episode: int, step: int, hist, next_hist) -> None:
        i = self.ptr
        old = int(self.episode[i])
        if old >= 0 and old != episode and self.step[i] == self.episode_len.get(old, 0) - 1:
            del self.episode_len[old]  # last surviving step of ``old`` is evicted
        self.pos[i] = pos
        self.goal[i] = goal
        self.act[i] = action
        self.next_pos[i] = next_pos
        self.reward[i] = reward
        self.episode[i] = episode
        self.step[i] = step
        self.hist[i] = hist
        self.next_hist[i] = next_hist
        self.episode_len[episode] = step + 1
        self.ptr = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(
        self,
        batch_size: int,
        rng: np.random.Generator,
        gamma: float,
        n_step: int,
        her_ratio: float = 0.0,
        radius: float = 1.2,
        idx: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Draw transitions, relabel goals in hindsight and build truncated n-step returns."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        if idx is None:
            idx = rng.integers(0, self.size, size=batch_size)
        batch_size = len(idx)
        eps = self.episode[idx]
        steps = self.step[idx]
        goal = self.goal[idx].copy()
        relabel = rng.random(batch_size) < her_ratio / (her_ratio + 1.0)
        lens = np.array([self.episode_len[e] for e in eps])
        remaining = lens - 1 - steps
        offset = np.floor(rng.random(batch_size) * (remaining + 1)).astype(np.int64)
        future = (idx + offset) % self.capacity
        goal[relabel] = self.next_pos[future[relabel]]

        ret = np.zeros(batch_size)
        alive = np.ones(batch_size, dtype=bool)
        done = np.zeros(batch_size, dtype=bool)
        last = idx.copy()
        n_eff = np.zeros(batch_size, dtype=np.int64)
        for j in range(n_step):
            slot = (idx + j) % self.capacity
            valid = alive & (self.episode[slot] == eps) & (self.step[slot] == steps + j) & (j < lens - steps)
            r = reward_fn(self.next_pos[slot], goal, radius)
            ret += np.where(valid, gamma**j * r, 0.0)
            last = np.where(valid, slot, last)
            n_eff += valid
            success = valid & (r > 0)
            done |= success
            alive = valid & ~success
        discount = np.where(done, 0.0, gamma**n_eff)
        return {
            "idx": idx,
            "pos": self.pos[idx],
            "goal": goal,
            "act": self.act[idx],
            "hist": self.hist[idx],
            "ret": ret,
            "discount": discount,
            "done": done.astype(np.float64),
            "n_eff": n_eff,
            "next_pos": self.next_pos[last],
            "next_hist": self.next_hist[last],
            "relabeled": relabel,
        }


def hindsight_relabel(batch: dict, buffer: ReplayBuffer, ratio: float, rng: np.random.Generator,
                      gamma: float = 0.99, n_step: int = 1) -> dict:
    """Re-draw the batch's transitions with future-achieved goals at the given ratio."""
    return buffer.sample(len(batch["idx"]), rng, gamma, n_step, her_ratio=ratio, idx=batch["idx"])


# -- agent ----------------------------------------------------------------------
@dataclass
class UpdateNoise:
    """All randomness consumed by one gradient iteration."""

    next_policy: np.ndarray
    next_gate: np.ndarray
    next_prior: np.ndarray
    policy: np.ndarray
    prior: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, batch: int, act_dim: int = 2) -> "UpdateNoise":
        return cls(
            rng.standard_normal((batch, act_dim)),
            rng.random((batch, 1)),
            rng.standard_normal((batch, act_dim)),
            rng.standard_normal((batch, act_dim)),
            rng.standard_normal((batch, act_dim)),
        )


class Agent:
    """Policy, twin critics with targets and the mixing network, plus their optimizers."""

    def __init__(self, config: AgentConfig, obs_center, obs_scale, prior: FlowPrior | None = None):
        if config.mode == "temporl" and prior is None:
            raise ConfigError("temporl mode needs a trained prior")
        self.config = config
        self.prior = prior
        self.obs_center = np.asarray(obs_center, dtype=np.float64).reshape(1, 2)
        self.obs_scale = np.asarray(obs_scale, dtype=np.float64).reshape(1, 2)
        rng = make_stream(config.seed, "init")
        h = list(config.hidden)
        self.policy = SquashedGaussianPolicy(4, 2, h, rng)
        self.q1 = Mlp(MlpSpec(6, h, 1), rng)
        self.q2 = Mlp(MlpSpec(6, h, 1), rng)
        self.q1_targ = Mlp(MlpSpec(6, h, 1), rng)
        self.q2_targ = Mlp(MlpSpec(6, h, 1), rng)
        copy_params(self.q1_targ.parameters(), self.q1.parameters())
        copy_params(self.q2_targ.parameters(), self.q2.parameters())
        self.mixing = Mlp(MlpSpec(4, list(config.mixing_hidden), 1, output_activation="sigmoid"), rng)
        w_last, b_last = self.mixing.weights[-1], self.mixing.biases[-1]
        w_last.data = rng.uniform(-1e-3, 1e-3, size=w_last.shape)
        b_last.data = np.full(b_last.shape, logit(config.lambda0))
        self.q_params = self.q1.parameters() + self.q2.parameters()
        self.q_opt = Adam(self.q_params, lr=config.lr)
        self.pi_opt = Adam(self.policy.parameters(), lr=config.lr)
        self.mix_opt = Adam(self.mixing.parameters(), lr=config.lr, grad_scale=config.mixing_grad_scale)
        self.history_len = max(prior.cond_spec.history_len if prior is not None else 0, 1)

    @property
    def uses_prior(self) -> bool:
        return self.config.mode == "temporl"

    # -- inputs --------------------------------------------------------------
    def normalize(self, pos: np.ndarray, goal: np.ndarray) -> np.ndarray:
        pos = np.atleast_2d(pos)
        goal = np.atleast_2d(goal)
        return np.concatenate(
            [(pos - self.obs_center) / self.obs_scale, (goal - self.obs_center) / self.obs_scale], axis=1
        )

    def prior_condition(self, pos: np.ndarray, hist: np.ndarray) -> np.ndarray:
        pos = np.atleast_2d(pos)
        return self.prior.cond_spec.build(pos, np.asarray(hist).reshape(pos.shape[0], -1, 2))

    def mixing_weight(self, obs: np.ndarray) -> np.ndarray:
        if self.config.lambda_override is not None:
            return np.full((np.atleast_2d(obs).shape[0], 1), float(self.config.lambda_override))
        return self.mixing.predict(obs)

    def min_q_array(self, obs: np.ndarray, act: np.ndarray, target: bool = False) -> np.ndarray:
        q1, q2 = (self.q1_targ, self.q2_targ) if target else (self.q1, self.q2)
        x = np.concatenate([obs, act], axis=1)
        return np.minimum(q1.predict(x), q2.predict(x))

    def min_q(self, obs, act, target: bool = False) -> Tensor:
        q1, q2 = (self.q1_targ, self.q2_targ) if target else (self.q1, self.q2)
        x = dm.concat([dm.tensor(obs), act if isinstance(act, Tensor) else dm.tensor(act)])
        return dm.minimum(q1(x), q2(x))

    # -- acting ----------------------------------------------------------------
    def act(self, pos, goal, hist, rng: np.random.Generator, prior_rng: np.random.Generator):
        """Sample one environment action; returns ``(action, from_prior, lambda)``."""
        obs = self.normalize(pos, goal)
        if not self.uses_prior:
            a, _ = self.policy.predict(obs, rng.standard_normal((1, 2)))
            return a[0], False, 0.0
        lam = float(self.mixing_weight(obs)[0, 0])
        cond = self.prior_condition(pos, hist)
        action, from_prior = sample_mixture(self.policy, self.prior, lam, obs, cond, rng, prior_rng)
        return action, from_prior, lam

    def mean_action(self, pos, goal) -> np.ndarray:
        return self.policy.predict(self.normalize(pos, goal))[0][0]

    # -- learning ------------------------------------------------------------
    def q_target(self, batch: dict, noise: UpdateNoise) -> np.ndarray:
        """n-step soft target bootstrapped through the mixture at the window's last state."""
        cfg = self.config
        next_obs = self.normalize(batch["next_pos"], batch["goal"])
        a_mix, logp_next = self.policy.predict(next_obs, noise.next_policy)
        if self.uses_prior:
            gate = noise.next_gate < self.mixing_weight(next_obs)
            if np.any(gate):
                prior_a = self.prior.sample_from_latent(
                    noise.next_prior, self.prior_condition(batch["next_pos"], batch["next_hist"])
                )
                a_mix = np.where(gate, prior_a, a_mix)
        q_next = self.min_q_array(next_obs, a_mix, target=True)
        soft = q_next - cfg.alpha * logp_next
        return batch["ret"].reshape(-1, 1) + batch["discount"].reshape(-1, 1) * soft

    def q_loss(self, batch: dict, target: np.ndarray) -> Tensor:
        obs = self.normalize(batch["pos"], batch["goal"])
        x = dm.concat([dm.tensor(obs), dm.tensor(batch["act"])])
        y = dm.tensor(target)
        d1 = dm.sub(self.q1(x), y)
        d2 = dm.sub(self.q2(x), y)
        return dm.add(dm.reduce_mean(dm.mul(d1, d1)), dm.reduce_mean(dm.mul(d2, d2)))

    def policy_loss(self, batch: dict, noise: UpdateNoise) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Mixture-weighted actor loss; also returns the detached action and its min-Q."""
        cfg = self.config
        obs = self.normalize(batch["pos"], batch["goal"])
        weight = 1.0 - self.mixing_weight(obs) if self.uses_prior else np.ones((obs.shape[0], 1))
        with frozen(self.q_params):
            a, logp = self.policy.sample(dm.tensor(obs), noise.policy)
            q = self.min_q(obs, a)
        per_row = dm.mul(dm.sub(dm.scale(logp, cfg.alpha), q), weight)
        return dm.reduce_mean(per_row), a.data, q.data

    def mixing_loss(self, batch: dict, noise: UpdateNoise, policy_action: np.ndarray | None = None,
                    q_policy: np.ndarray | None = None) -> Tensor:
        obs = self.normalize(batch["pos"], batch["goal"])
        prior_a = self.prior.sample_from_latent(noise.prior, self.prior_condition(batch["pos"], batch["hist"]))
        q_prior = self.min_q_array(obs, prior_a)
        if q_policy is None:
            a, _ = self.policy.predict(obs, noise.policy)
            q_policy = self.min_q_array(obs, a)
        return self.mixing_objective(obs, q_prior - q_policy)

    def mixing_objective(self, obs: np.ndarray, advantage: np.ndarray) -> Tensor:
        """``-mean(Lambda(s) * advantage)`` where ``advantage = Q(s, a_prior) - Q(s, a_policy)`` is fixed."""
        lam = self.mixing(dm.tensor(obs))
        return dm.scale(dm.reduce_mean(dm.mul(lam, np.asarray(advantage, dtype=np.float64).reshape(-1, 1))), -1.0)

    def mixing_step(self, obs: np.ndarray, advantage: np.ndarray) -> float:
        """One optimizer step on the mixing network against a fixed advantage."""
        self.mix_opt.zero_grad()
        loss = self.mixing_objective(obs, advantage)
        loss.backward()
        self.mix_opt.step()
        return loss.item()

    def update(self, batch: dict, noise: UpdateNoise) -> dict[str, float]:
        """One gradient iteration on critics, actor, mixing network and targets."""
        target = self.q_target(batch, noise)

        self.q_opt.zero_grad()
        lq = self.q_loss(batch, target)
        if not math.isfinite(lq.item()):
            raise FloatingPointError("non-finite critic loss; aborting update")
        lq.backward()
        self.q_opt.step()

        self.pi_opt.zero_grad()
        lp, a_pi, q_pi = self.policy_loss(batch, noise)
        lp.backward()
        self.pi_opt.step()

        stats = {"q_loss": lq.item(), "policy_loss": lp.item(), "mixing_loss": 0.0}
        if self.uses_prior and self.config.lambda_override is None:
            self.mix_opt.zero_grad()
            lm = self.mixing_loss(batch, noise, a_pi, q_pi)
            lm.backward()
            self.mix_opt.step()
            stats["mixing_loss"] = lm.item()

        rho = self.config.polyak
        polyak_update(self.q1_targ.parameters(), self.q1.parameters(), rho)
        polyak_update(self.q2_targ.parameters(), self.q2.parameters(), rho)
        return stats

    # -- persistence -----------------------------------------------------------
    def header(self) -> dict:
        cfg = asdict(self.config)
        return {
            "kind": "agent",
            "mode": self.config.mode,
            "hidden": list(self.config.hidden),
            "mixing_hidden": list(self.config.mixing_hidden),
            "obs_center": self.obs_center.ravel().tolist(),
            "obs_scale": self.obs_scale.ravel().tolist(),
            "config": cfg,
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.policy.state_dict("policy.")
        out.update(self.q1.state_dict("q1."))
        out.update(self.q2.state_dict("q2."))
        out.update(self.q1_targ.state_dict("q1_targ."))
        out.update(self.q2_targ.state_dict("q2_targ."))
        out.update(self.mixing.state_dict("mixing."))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.policy.load_state_dict(state, "policy.")
        self.q1.load_state_dict(state, "q1.")
        self.q2.load_state_dict(state, "q2.")
        self.q1_targ.load_state_dict(state, "q1_targ.")
        self.q2_targ.load_state_dict(state, "q2_targ.")
        self.mixing.load_state_dict(state, "mixing.")

    def save(self, path) -> None:
        save_params(ParamBundle(self.header(), self.state_dict()), path)


def load_agent(path, prior: FlowPrior | None = None) -> Agent:
    bundle = load_params(path, {"kind": "agent"})
    cfg = dict(bundle.spec["config"])
    cfg["hidden"] = tuple(cfg["hidden"])
    cfg["mixing_hidden"] = tuple(cfg["mixing_hidden"])
    config = AgentConfig(**cfg)
    if config.mode == "temporl" and prior is None:
        config.mode = "sac"  # evaluation only needs the policy
    agent = Agent(config, bundle.spec["obs_center"], bundle.spec["obs_scale"], prior)
    agent.load_state_dict(bundle.arrays)
    return agent


def sample_mixture(policy: SquashedGaussianPolicy, prior: FlowPrior, lam: float, obs: np.ndarray,
                   cond: np.ndarray, rng: np.random.Generator, prior_rng: np.random.Generator | None = None):
    """Draw from ``(1 - lam) * policy + lam * prior`` by a Bernoulli(lam) gate.

    Returns ``(action, from_prior)``.
    """
    prior_rng = prior_rng if prior_rng is not None else rng
    if rng.random() < lam:
        return prior.sample(cond, prior_rng, n=1)[0], True
    a, _ = policy.predict(obs, rng.standard_normal((1, policy.act_dim)))
    return a[0], False


# -- training -----------------------------------------------------------------
def env_normalization(env: MazeEnv) -> tuple[np.ndarray, np.ndarray]:
    low, high = env.spec.bounds
    return (low + high) / 2.0, (high - low) / 2.0


def probe_states(env: MazeEnv, n: int = 100, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Fixed set of (position, goal) pairs for tracking the mixing weight."""
    rng = make_stream(seed, "probe")
    spec = env.spec
    pos = np.array([spec.sample_free_position(rng) for _ in range(n)])
    if spec.goal_cells:
        goals = np.array([spec.cell_center(spec.goal_cells[rng.integers(len(spec.goal_cells))]) for _ in range(n)])
    else:
        goals = np.array([spec.sample_free_position(rng) for _ in range(n)])
    return pos, goals


def evaluate(agent, env: MazeEnv, n_episodes: int, rng: np.random.Generator | None = None,
             policy: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None) -> tuple[float, float]:
    """Deterministic rollouts; returns ``(success_rate, mean_return)``.

    ``policy(pos, goal)`` overrides the agent's mean action when given.
    """
    if rng is not None:
        env.rng = rng
    act = policy if policy is not None else agent.mean_action
    successes, returns = 0, []
    for _ in range(n_episodes):
        env.reset()
        total, done = 0.0, False
        while not done:
            _, r, done = env.step(act(env.pos.copy(), env.goal.copy()))
            total += r
        successes += total > 0
        returns.append(total)
    return successes / max(n_episodes, 1), float(np.mean(returns)) if returns else 0.0


@dataclass
class TrainResult:
    agent: Agent
    curve: list[dict] = field(default_factory=list)
    env_steps: int = 0
    lambda_trace: list[tuple[int, float]] = field(default_factory=list)  # (env_step, probe-mean lambda)


CURVE_FIELDS = [
    "env_step", "episode", "success_rate", "mean_return", "mean_lambda",
    "q_loss", "policy_loss", "mixing_loss", "prior_fraction",
]


def bc_pretrain(agent: Agent, dataset: OfflineDataset, epochs: int | None = None,
                rng: np.random.Generator | None = None, horizon=(10, 100)) -> list[float]:
    """Maximum-likelihood cloning of expert actions, with goals taken 10-100 steps ahead.

    Returns the mean negative log-likelihood of every epoch.
    """
    cfg = agent.config
    epochs = cfg.bc_epochs if epochs is None else epochs
    if dataset.n_pairs == 0:
        raise ValueError("cannot clone an empty dataset")
    rng = rng if rng is not None else make_stream(cfg.seed, "bc")
    pos, goals, acts = [], [], []
    for traj in dataset.trajectories:
        T = len(traj)
        if T < 2:
            continue
        ahead = rng.integers(horizon[0], horizon[1] + 1, size=T)
        future = np.minimum(np.arange(T) + ahead, T - 1)
        pos.append(traj.states)
        goals.append(traj.states[future])
        acts.append(traj.actions)
    pos, goals, acts = np.concatenate(pos), np.concatenate(goals), np.concatenate(acts)
    obs = agent.normalize(pos, goals)
    opt = Adam(agent.policy.parameters(), lr=cfg.lr)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(obs))
        losses = []
        for start in range(0, len(obs), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = dm.scale(dm.reduce_mean(agent.policy.log_prob(dm.tensor(obs[idx]), acts[idx])), -1.0)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    return curve


def train(config: AgentConfig, env: MazeEnv, prior: FlowPrior | None = None,
          dataset: OfflineDataset | None = None, eval_env: MazeEnv | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the interaction/update loop and evaluate after every epoch."""
    if config.mode == "temporl" and prior is None:
        raise ConfigError("temporl mode needs a prior checkpoint")
    if config.mode == "sac_bc" and dataset is None:
        raise ConfigError("sac_bc mode needs an offline dataset")
    center, scale = env_normalization(env)
    agent = Agent(config, center, scale, prior if config.mode == "temporl" else None)
    env.rng = make_stream(config.seed, "env")
    eval_env = eval_env if eval_env is not None else MazeEnv(env.spec)
    eval_env.rng = make_stream(config.seed, "eval")
    act_rng = make_stream(config.seed, "policy_noise")
    prior_rng = make_stream(config.seed, "prior")
    relabel_rng = make_stream(config.seed, "relabel")
    update_rng = make_stream(config.seed, "update")
    probe_pos, probe_goal = probe_states(env, 100, config.seed)
    probe_obs = agent.normalize(probe_pos, probe_goal)

    if config.mode == "sac_bc":
        bc_pretrain(agent, dataset)

    buffer = ReplayBuffer(config.replay_size, agent.history_len)
    result = TrainResult(agent)
    h = agent.history_len
    total_steps = config.epochs * config.steps_per_epoch
    env.reset()
    hist = np.zeros((h, 2))
    episode, ep_step = 0, 0
    stats_acc: list[dict] = []
    from_prior_count, acted = 0, 0
    for t in range(total_steps):
        pos, goal = env.pos.copy(), env.goal.copy()
        if t < config.start_steps and config.mode == "temporl":
            a = prior.sample(agent.prior_condition(pos, hist), prior_rng, n=1)[0]
            from_prior = True
        elif t < config.start_steps and config.mode == "sac":
            a = act_rng.uniform(-1.0, 1.0, size=2)
            from_prior = False
        else:
            a, from_prior, _ = agent.act(pos, goal, hist, act_rng, prior_rng)
        from_prior_count += from_prior
        acted += 1
        _, r, done = env.step(a)
        next_hist = np.concatenate([hist[1:], np.asarray(a).reshape(1, 2)], axis=0)
        buffer.store(pos, goal, a, env.pos, r, episode, ep_step, hist, next_hist)
        hist = next_hist
        ep_step += 1
        if done:
            episode += 1
            ep_step = 0
            env.reset()
            hist = np.zeros((h, 2))

        if (t + 1) % config.update_every == 0:
            if t + 1 >= config.update_after:
                for _ in range(config.grad_steps):
                    batch = buffer.sample(config.batch_size, relabel_rng, config.gamma, config.n_step, config.her_ratio)
                    noise = UpdateNoise.draw(update_rng, len(batch["idx"]))
                    stats_acc.append(agent.update(batch, noise))
            if agent.uses_prior:
                result.lambda_trace.append((t + 1, float(agent.mixing_weight(probe_obs).mean())))

        if (t + 1) % config.steps_per_epoch == 0:
            success, mean_ret = evaluate(agent, eval_env, config.eval_episodes)
            row = {
                "env_step": t + 1,
                "episode": episode,
                "success_rate": success,
                "mean_return": mean_ret,
                "mean_lambda": float(agent.mixing_weight(probe_obs).mean()) if agent.uses_prior else 0.0,
                "q_loss": float(np.mean([s["q_loss"] for s in stats_acc])) if stats_acc else 0.0,
                "policy_loss": float(np.mean([s["policy_loss"] for s in stats_acc])) if stats_acc else 0.0,
                "mixing_loss": float(np.mean([s["mixing_loss"] for s in stats_acc])) if stats_acc else 0.0,
                "prior_fraction": from_prior_count / max(acted, 1),
            }
            stats_acc, from_prior_count, acted = [], 0, 0
            result.curve.append(row)
            log.info("step %d success %.2f lambda %.3f", row["env_step"], success, row["mean_lambda"])
            if on_epoch is not None:
                on_epoch(row)
            if config.stop_success is not None and success >= config.stop_success:
                result.env_steps = t + 1
                return result
    result.env_steps = total_steps
    return result
