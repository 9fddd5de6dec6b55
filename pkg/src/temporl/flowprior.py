"""Conditional Real-NVP action priors.

The flow is written in the density direction ``a -> z``: each coupling layer
is followed by a normalization layer. ``flow_inverse`` runs that stack and
``flow_forward`` runs its exact inverse ``z -> a`` for sampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .netlib import Adam, Mlp, MlpSpec, ParamBundle, load_params, save_params

log = logging.getLogger(__name__)

CONDITIONING_KINDS = ("none", "last_actions", "state", "state_and_last_action")


class PriorTrainingError(RuntimeError):
    """Training diverged; ``prior`` holds the last parameters with a finite loss."""

    def __init__(self, message: str, prior: "FlowPrior", nll_curve: list[float]):
        super().__init__(message)
        self.prior = prior
        self.nll_curve = nll_curve


@dataclass(frozen=True)
class ConditioningSpec:
    """What the prior conditions on. Windows shorter than ``k`` at episode start are zero-padded."""

    kind: str = "last_actions"
    k: int = 1
    action_dim: int = 2
    state_dim: int = 2

    def __post_init__(self):
        if self.kind not in CONDITIONING_KINDS:
            raise ValueError(f"unknown conditioning kind {self.kind!r}")
        if self.kind == "last_actions" and self.k < 1:
            raise ValueError("last_actions conditioning needs k >= 1")

    @property
    def cond_dim(self) -> int:
        if self.kind == "none":
            return 0
        if self.kind == "last_actions":
            return self.k * self.action_dim
        if self.kind == "state":
            return self.state_dim
        return self.state_dim + self.action_dim

    @property
    def history_len(self) -> int:
        """Number of past actions the condition needs."""
        if self.kind == "last_actions":
            return self.k
        return 1 if self.kind == "state_and_last_action" else 0

    def build(self, states: np.ndarray, history: np.ndarray) -> np.ndarray:
        """Condition rows from states ``(B, state_dim)`` and action history ``(B, h, action_dim)``.

        ``history`` is ordered oldest to newest; only its last ``history_len`` entries are used.
        """
        states = np.atleast_2d(states)
        batch = states.shape[0]
        if self.kind == "none":
            return np.zeros((batch, 0))
        if self.kind == "state":
            return np.asarray(states, dtype=np.float64)
        history = np.asarray(history, dtype=np.float64).reshape(batch, -1, self.action_dim)
        if self.kind == "last_actions":
            window = history[:, history.shape[1] - self.k:, :]
            return window.reshape(batch, -1)
        return np.concatenate([states, history[:, -1, :]], axis=1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def parse(cls, text: str, action_dim: int = 2, state_dim: int = 2) -> "ConditioningSpec":
        """Parse CLI strings such as ``none``, ``last-actions:5``, ``state``, ``state-last-action``."""
        text = text.strip().lower().replace("_", "-")
        if text == "none":
            return cls("none", 0, action_dim, state_dim)
        if text.startswith("last-actions"):
            _, _, k = text.partition(":")
            return cls("last_actions", int(k or 1), action_dim, state_dim)
        if text == "state":
            return cls("state", 0, action_dim, state_dim)
        if text in ("state-last-action", "state-and-last-action"):
            return cls("state_and_last_action", 1, action_dim, state_dim)
        raise ValueError(f"unknown conditioning {text!r}")


def conditioning_pairs(trajectories, spec: ConditioningSpec) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``(a_t, cond_t)`` training pairs over all trajectories."""
    actions, conds = [], []
    h = max(spec.history_len, 1)
    for traj in trajectories:
        acts = np.asarray(traj.actions, dtype=np.float64)
        states = np.asarray(traj.states, dtype=np.float64)
        if len(acts) == 0:
            continue
        padded = np.concatenate([np.zeros((h, spec.action_dim)), acts], axis=0)
        idx = np.arange(len(acts))[:, None] + np.arange(h)[None, :]
        history = padded[idx]
        actions.append(acts)
        conds.append(spec.build(states[: len(acts)], history))
    if not actions:
        return np.zeros((0, spec.action_dim)), np.zeros((0, spec.cond_dim))
    return np.concatenate(actions), np.concatenate(conds)


class CouplingLayer:
    """Affine coupling: dims where ``mask == 0`` are scaled and shifted by functions of the rest."""

    def __init__(self, mask: np.ndarray, cond_dim: int, hidden: int, rng: np.random.Generator):
        self.mask = np.asarray(mask, dtype=np.float64).reshape(1, -1)
        self.inv_mask = 1.0 - self.mask
        d = self.mask.shape[1]
        self.d = d
        self.cond_net = Mlp(MlpSpec(cond_dim, [hidden, hidden], hidden), rng) if cond_dim else None
        st_in = d + (hidden if cond_dim else 0)
        self.st_net = Mlp(MlpSpec(st_in, [hidden, hidden], 2 * d), rng, zero_final=True)
        self.gain = Tensor(np.ones((1, d)), requires_grad=True)

    def _scale_shift(self, kept: Tensor, cond: Tensor | None) -> tuple[Tensor, Tensor]:
        inp = kept if self.cond_net is None else dm.concat([kept, dm.relu(self.cond_net(cond))])
        st = self.st_net(inp)
        s = dm.mul(dm.mul(dm.tanh(st[:, : self.d]), self.gain), self.inv_mask)
        t = dm.mul(st[:, self.d:], self.inv_mask)
        return s, t

    def to_latent(self, x: Tensor, cond: Tensor | None) -> tuple[Tensor, Tensor]:
        s, t = self._scale_shift(dm.mul(x, self.mask), cond)
        y = dm.add(dm.mul(x, dm.exp(s)), t)
        return y, dm.reduce_sum(s, "cols")

    def to_action(self, y: Tensor, cond: Tensor | None) -> tuple[Tensor, Tensor]:
        # kept dims pass through unchanged, so s and t can be recomputed from y
        s, t = self._scale_shift(dm.mul(y, self.mask), cond)
        x = dm.mul(dm.sub(y, t), dm.exp(dm.scale(s, -1.0)))
        return x, dm.scale(dm.reduce_sum(s, "cols"), -1.0)

    def to_action_array(self, y: np.ndarray, cond: np.ndarray | None) -> np.ndarray:
        """Graph-free ``to_action`` (actions only)."""
        kept = y * self.mask
        inp = kept if self.cond_net is None else np.concatenate(
            [kept, np.maximum(self.cond_net.predict(cond), 0.0)], axis=1
        )
        st = self.st_net.predict(inp)
        s = np.tanh(st[:, : self.d]) * self.gain.data * self.inv_mask
        t = st[:, self.d:] * self.inv_mask
        return (y - t) * np.exp(-s)

    def modules(self) -> dict[str, Mlp]:
        out = {"st": self.st_net}
        if self.cond_net is not None:
            out["cond"] = self.cond_net
        return out

    def parameters(self) -> list[Tensor]:
        return [p for m in self.modules().values() for p in m.parameters()] + [self.gain]


class BatchNormLayer:
    """Per-dimension normalization with learnable log-scale and shift.

    Training mode uses batch statistics (and updates running averages);
    frozen mode uses the running statistics, which makes the layer an
    exact affine bijection.
    """

    def __init__(self, d: int, momentum: float = 0.99, eps: float = 1e-5):
        self.d = d
        self.momentum = momentum
        self.eps = eps
        self.log_gamma = Tensor(np.zeros((1, d)), requires_grad=True)
        self.beta = Tensor(np.zeros((1, d)), requires_grad=True)
        self.running_mean = np.zeros((1, d))
        self.running_var = np.ones((1, d))
        self.training = False

    def to_latent(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if self.training and x.shape[0] > 1:
            mean = dm.reduce_mean(x, "rows")
            centered = dm.sub(x, mean)
            var = dm.reduce_mean(dm.mul(centered, centered), "rows")
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mean.data
            self.running_var = m * self.running_var + (1.0 - m) * var.data
            var_eps = dm.add(var, self.eps)
            x_hat = dm.mul(centered, dm.power(var_eps, -0.5))
            log_var = dm.log(var_eps)
        else:
            var_eps = self.running_var + self.eps
            x_hat = dm.mul(dm.sub(x, self.running_mean), var_eps**-0.5)
            log_var = dm.tensor(np.log(var_eps))
        y = dm.add(dm.mul(x_hat, dm.exp(self.log_gamma)), self.beta)
        log_det = dm.sub(self.log_gamma, dm.scale(log_var, 0.5))
        return y, dm.mul(dm.reduce_sum(log_det, "cols"), np.ones((x.shape[0], 1)))

    def to_action(self, y: Tensor) -> tuple[Tensor, Tensor]:
        var_eps = self.running_var + self.eps
        x_hat = dm.mul(dm.sub(y, self.beta), dm.exp(dm.scale(self.log_gamma, -1.0)))
        x = dm.add(dm.mul(x_hat, np.sqrt(var_eps)), self.running_mean)
        log_det = dm.add(dm.scale(self.log_gamma, -1.0), 0.5 * np.log(var_eps))
        return x, dm.mul(dm.reduce_sum(log_det, "cols"), np.ones((y.shape[0], 1)))

    def to_action_array(self, y: np.ndarray) -> np.ndarray:
        x_hat = (y - self.beta.data) * np.exp(-self.log_gamma.data)
        return x_hat * np.sqrt(self.running_var + self.eps) + self.running_mean

    def parameters(self) -> list[Tensor]:
        return [self.log_gamma, self.beta]


def alternating_masks(d: int, n_layers: int) -> list[np.ndarray]:
    """Even/odd dimension masks alternating per layer; a 1-D flow transforms its only dim every layer."""
    if d == 1:
        return [np.zeros(1) for _ in range(n_layers)]
    base = (np.arange(d) % 2).astype(np.float64)
    return [base if i % 2 == 0 else 1.0 - base for i in range(n_layers)]


class FlowPrior:
    """Conditional Real-NVP density over bounded actions."""

    def __init__(
        self,
        action_dim: int,
        cond_spec: ConditioningSpec,
        rng: np.random.Generator,
        hidden: int = 128,
        n_layers: int = 6,
        low: float = -1.0,
        high: float = 1.0,
    ):
        if cond_spec.action_dim != action_dim:
            raise ValueError("conditioning spec and prior disagree on action_dim")
        self.action_dim = action_dim
        self.cond_spec = cond_spec
        self.hidden = hidden
        self.n_layers = n_layers
        self.low = low
        self.high = high
        self.couplings = [
            CouplingLayer(mask, cond_spec.cond_dim, hidden, rng)
            for mask in alternating_masks(action_dim, n_layers)
        ]
        self.norms = [BatchNormLayer(action_dim) for _ in range(n_layers)]

    # -- modes ------------------------------------------------------------------
    def train(self) -> None:
        for bn in self.norms:
            bn.training = True

    def eval(self) -> None:
        for bn in self.norms:
            bn.training = False

    def _cond(self, cond, batch: int) -> Tensor | None:
        if self.cond_spec.cond_dim == 0:
            return None
        cond = dm.tensor(cond)
        if cond.shape != (batch, self.cond_spec.cond_dim):
            raise dm.ShapeError(
                f"condition must be ({batch}, {self.cond_spec.cond_dim}), got {cond.shape}"
            )
        return cond

    def _check(self, x: Tensor) -> None:
        if x.shape[1] != self.action_dim:
            raise dm.ShapeError(f"expected {self.action_dim} action dims, got {x.shape[1]}")

    # -- bijection -----------------------------------------------------------
    def flow_inverse(self, a, cond) -> tuple[Tensor, Tensor]:
        """Map actions to latents; returns ``(z, log|det dz/da|)`` per row."""
        x = dm.tensor(a) if not isinstance(a, Tensor) else a
        self._check(x)
        c = self._cond(cond, x.shape[0])
        total = dm.tensor(np.zeros((x.shape[0], 1)))
        for coupling, bn in zip(self.couplings, self.norms):
            x, ld = coupling.to_latent(x, c)
            total = dm.add(total, ld)
            x, ld = bn.to_latent(x)
            total = dm.add(total, ld)
        return x, total

    def flow_forward(self, z, cond) -> tuple[Tensor, Tensor]:
        """Map latents to actions; returns ``(a, log|det da/dz|)`` per row. Always uses running statistics."""
        y = dm.tensor(z) if not isinstance(z, Tensor) else z
        self._check(y)
        c = self._cond(cond, y.shape[0])
        total = dm.tensor(np.zeros((y.shape[0], 1)))
        for coupling, bn in zip(reversed(self.couplings), reversed(self.norms)):
            y, ld = bn.to_action(y)
            total = dm.add(total, ld)
            y, ld = coupling.to_action(y, c)
            total = dm.add(total, ld)
        return y, total

    def log_density(self, a, cond) -> Tensor:
        """``log N(z; 0, I) + log|det dz/da|`` per row."""
        z, log_det = self.flow_inverse(a, cond)
        base = dm.scale(dm.reduce_sum(dm.mul(z, z), "cols"), -0.5)
        base = dm.add(base, -0.5 * self.action_dim * dm.LOG_2PI)
        return dm.add(base, log_det)

    def sample(self, cond, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Draw actions clamped componentwise to the action bounds."""
        if n is None:
            n = 1 if self.cond_spec.cond_dim == 0 else np.atleast_2d(cond).shape[0]
        z = rng.standard_normal((n, self.action_dim))
        return self.sample_from_latent(z, cond)

    def sample_from_latent(self, z: np.ndarray, cond) -> np.ndarray:
        """Push latents through the flow (running statistics) and clamp to the bounds."""
        y = np.asarray(z, dtype=np.float64)
        self._check(dm.tensor(y))
        c = self._cond(cond, y.shape[0])
        c = None if c is None else c.data
        for coupling, bn in zip(reversed(self.couplings), reversed(self.norms)):
            y = coupling.to_action_array(bn.to_action_array(y), c)
        return np.clip(y, self.low, self.high)

    # -- parameters ----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        params = []
        for coupling, bn in zip(self.couplings, self.norms):
            params += coupling.parameters() + bn.parameters()
        return params

    def header(self) -> dict:
        return {
            "kind": "flow_prior",
            "action_dim": self.action_dim,
            "hidden": self.hidden,
            "n_layers": self.n_layers,
            "low": self.low,
            "high": self.high,
            "conditioning": self.cond_spec.to_dict(),
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (coupling, bn) in enumerate(zip(self.couplings, self.norms)):
            for name, m in coupling.modules().items():
                out.update(m.state_dict(f"layer{i}.{name}."))
            out[f"layer{i}.gain"] = coupling.gain.data
            out[f"layer{i}.bn.log_gamma"] = bn.log_gamma.data
            out[f"layer{i}.bn.beta"] = bn.beta.data
            out[f"layer{i}.bn.running_mean"] = bn.running_mean
            out[f"layer{i}.bn.running_var"] = bn.running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for i, (coupling, bn) in enumerate(zip(self.couplings, self.norms)):
            for name, m in coupling.modules().items():
                m.load_state_dict(state, f"layer{i}.{name}.")
            coupling.gain.data = np.array(state[f"layer{i}.gain"], dtype=np.float64)
            bn.log_gamma.data = np.array(state[f"layer{i}.bn.log_gamma"], dtype=np.float64)
            bn.beta.data = np.array(state[f"layer{i}.bn.beta"], dtype=np.float64)
            bn.running_mean = np.array(state[f"layer{i}.bn.running_mean"], dtype=np.float64)
            bn.running_var = np.array(state[f"layer{i}.bn.running_var"], dtype=np.float64)

    def copy(self) -> "FlowPrior":
        clone = FlowPrior(
            self.action_dim, self.cond_spec, np.random.default_rng(0), self.hidden, self.n_layers, self.low, self.high
        )
        clone.load_state_dict({k: v.copy() for k, v in self.state_dict().items()})
        return clone


def save_prior(prior: FlowPrior, path) -> None:
    save_params(ParamBundle(prior.header(), prior.state_dict()), path)


def load_prior(path, cond_spec: ConditioningSpec | None = None) -> FlowPrior:
    expected = {"kind": "flow_prior"}
    if cond_spec is not None:
        expected["conditioning"] = cond_spec.to_dict()
    bundle = load_params(path, expected)
    h = bundle.spec
    prior = FlowPrior(
        h["action_dim"],
        ConditioningSpec(**h["conditioning"]),
        np.random.default_rng(0),
        hidden=h["hidden"],
        n_layers=h["n_layers"],
        low=h["low"],
        high=h["high"],
    )
    prior.load_state_dict(bundle.arrays)
    prior.eval()
    return prior


@dataclass
class PriorTrainConfig:
    epochs: int = 100
    batch_size: int = 400
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-6
    hidden: int = 128
    n_layers: int = 6
    seed: int = 0


def nll(prior: FlowPrior, actions: np.ndarray, conds: np.ndarray, batch_size: int = 4096) -> float:
    """Mean negative log-likelihood (nats per sample) in the prior's current mode, without gradients."""
    total = 0.0
    with dm.no_grad():
        for i in range(0, len(actions), batch_size):
            lp = prior.log_density(actions[i:i + batch_size], conds[i:i + batch_size])
            total -= float(lp.data.sum())
    return total / max(len(actions), 1)


def train_prior(
    dataset,
    cond_spec: ConditioningSpec,
    config: PriorTrainConfig | None = None,
    low: float = -1.0,
    high: float = 1.0,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[FlowPrior, list[float]]:
    """Fit a prior by maximum likelihood on ``(a_t, cond_t)`` pairs from ``dataset``.

    Returns the prior in frozen mode and the mean training NLL of every epoch.
    ``pairs`` may be given directly instead of a dataset of trajectories.
    """
    config = config or PriorTrainConfig()
    actions, conds = pairs if pairs is not None else conditioning_pairs(dataset.trajectories, cond_spec)
    if len(actions) == 0:
        raise ValueError("cannot train a prior on an empty dataset")
    rng = np.random.default_rng(config.seed)
    prior = FlowPrior(cond_spec.action_dim, cond_spec, rng, config.hidden, config.n_layers, low, high)
    opt = Adam(
        prior.parameters(),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    curve: list[float] = []
    last_good = prior.state_dict()
    last_good = {k: v.copy() for k, v in last_good.items()}
    n = len(actions)
    for epoch in range(config.epochs):
        prior.train()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = dm.scale(dm.reduce_mean(prior.log_density(actions[idx], conds[idx])), -1.0)
            if not math.isfinite(loss.item()):
                prior.load_state_dict(last_good)
                prior.eval()
                raise PriorTrainingError(f"non-finite NLL in epoch {epoch}", prior, curve)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        last_good = {k: v.copy() for k, v in prior.state_dict().items()}
        log.info("prior epoch %d nll %.4f", epoch, curve[-1])
    prior.eval()
    return prior, curve
