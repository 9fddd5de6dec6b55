"""Networks, optimizer and checkpoint files built on :mod:`temporl.diffmath`."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

PARAM_MAGIC = b"TEMPORL-PARAMS 1\n"


class ParamFileError(ValueError):
    """A checkpoint file is empty, truncated or not in the expected format."""


class SpecMismatchError(ValueError):
    """A checkpoint's header disagrees with the architecture it is loaded into."""


_ACTIVATIONS = {"relu": dm.relu, "tanh": dm.tanh, "sigmoid": dm.sigmoid, "none": None}
# graph-free counterparts for inference
_NP_ACTIVATIONS = {
    "relu": lambda v: np.maximum(v, 0.0),
    "tanh": np.tanh,
    "sigmoid": dm._sigmoid,
    "none": None,
}


@dataclass
class MlpSpec:
    input_dim: int
    hidden_sizes: list[int]
    output_dim: int
    activation: str = "relu"
    output_activation: str = "none"

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_sizes, self.output_dim]
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in ("none", "sigmoid", "tanh"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")


class Mlp:
    """Fully connected network; weights are stored ``(fan_in, fan_out)`` so ``y = x @ W + b``."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, zero_final: bool = False):
        self.spec = spec
        dims = [spec.input_dim, *spec.hidden_sizes, spec.output_dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            last = i == len(dims) - 2
            if last and zero_final:
                w = np.zeros((fan_in, fan_out))
                b = np.zeros((1, fan_out))
            else:
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=(1, fan_out))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.input_dim:
            raise dm.ShapeError(f"mlp expects width {self.spec.input_dim}, got {x.shape[1]}")
        act = _ACTIVATIONS[self.spec.activation]
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = dm.add(dm.matmul(x, w), b)
            if i < n - 1:
                x = act(x)
        out_act = _ACTIVATIONS[self.spec.output_activation]
        return out_act(x) if out_act is not None else x

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on plain arrays without building a graph."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.spec.input_dim:
            raise dm.ShapeError(f"mlp expects width {self.spec.input_dim}, got {x.shape[1]}")
        act = _NP_ACTIVATIONS[self.spec.activation]
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w.data + b.data
            if i < n - 1:
                x = act(x)
        out_act = _NP_ACTIVATIONS[self.spec.output_activation]
        return out_act(x) if out_act is not None else x

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        return params

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = w.data
            out[f"{prefix}b{i}"] = b.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            _assign(w, state[f"{prefix}W{i}"])
            _assign(b, state[f"{prefix}b{i}"])


def _assign(t: Tensor, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != t.shape:
        raise SpecMismatchError(f"parameter shape {values.shape} does not match {t.shape}")
    t.data = values.copy()


class SquashedGaussianPolicy:
    """Tanh-squashed diagonal Gaussian policy with a state-dependent log-std head."""

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        hidden_sizes: Sequence[int],
        rng: np.random.Generator,
        low: float | np.ndarray = -1.0,
        high: float | np.ndarray = 1.0,
    ):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.trunk = Mlp(MlpSpec(obs_dim, list(hidden_sizes[:-1]), hidden_sizes[-1]), rng)
        self.mu_head = Mlp(MlpSpec(hidden_sizes[-1], [], act_dim), rng)
        self.log_std_head = Mlp(MlpSpec(hidden_sizes[-1], [], act_dim), rng)
        low = np.broadcast_to(np.asarray(low, dtype=np.float64), (act_dim,))
        high = np.broadcast_to(np.asarray(high, dtype=np.float64), (act_dim,))
        self.center = ((high + low) / 2.0).reshape(1, -1)
        self.half_range = ((high - low) / 2.0).reshape(1, -1)

    def distribution(self, obs: Tensor) -> tuple[Tensor, Tensor]:
        h = dm.relu(self.trunk(obs))
        mu = self.mu_head(h)
        log_std = dm.clamp(self.log_std_head(h), LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std

    def squash(self, u: Tensor) -> Tensor:
        return dm.add(dm.mul(dm.tanh(u), self.half_range), self.center)

    def sample(self, obs: Tensor, noise) -> tuple[Tensor, Tensor]:
        """Reparameterized draw; returns the action and its log-density (``batch x 1``)."""
        mu, log_std = self.distribution(obs)
        noise = dm.tensor(noise)
        u = dm.reparam_gaussian(mu, log_std, noise)
        return self.squash(u), squashed_log_prob(u, log_std, noise, self.half_range)

    def mean_action(self, obs: Tensor) -> Tensor:
        mu, _ = self.distribution(obs)
        return self.squash(mu)

    def predict(self, obs: np.ndarray, noise: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray | None]:
        """Graph-free sampling: ``(action, log_prob)``; with ``noise=None`` the mean action and no log-prob."""
        h = np.maximum(self.trunk.predict(obs), 0.0)
        mu = self.mu_head.predict(h)
        if noise is None:
            return np.tanh(mu) * self.half_range + self.center, None
        log_std = np.clip(self.log_std_head.predict(h), LOG_STD_MIN, LOG_STD_MAX)
        u = mu + np.exp(log_std) * noise
        logp = -0.5 * noise * noise - 0.5 * dm.LOG_2PI - log_std
        logp = logp - _log_one_minus_tanh_sq(u) - np.log(self.half_range)
        return np.tanh(u) * self.half_range + self.center, logp.sum(axis=1, keepdims=True)

    def log_prob(self, obs: Tensor, action: np.ndarray) -> Tensor:
        """Log-density of given actions strictly inside the bounds (used for cloning)."""
        mu, log_std = self.distribution(obs)
        y = np.clip((np.asarray(action) - self.center) / self.half_range, -1 + 1e-6, 1 - 1e-6)
        u = dm.tensor(np.arctanh(y))
        std_noise = dm.div(dm.sub(u, mu), dm.exp(log_std))
        gauss = dm.sub(
            dm.scale(dm.mul(std_noise, std_noise), -0.5),
            dm.add(log_std, 0.5 * dm.LOG_2PI),
        )
        correction = _log_one_minus_tanh_sq(u.data) + np.log(self.half_range)
        return dm.sub(dm.reduce_sum(gauss, "cols"), correction.sum(axis=1, keepdims=True))

    def modules(self) -> dict[str, Mlp]:
        return {"trunk": self.trunk, "mu": self.mu_head, "log_std": self.log_std_head}

    def parameters(self) -> list[Tensor]:
        return [p for m in self.modules().values() for p in m.parameters()]

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for name, m in self.modules().items():
            out.update(m.state_dict(f"{prefix}{name}."))
        return out

    def load_state_dict(self, state, prefix: str = "") -> None:
        for name, m in self.modules().items():
            m.load_state_dict(state, f"{prefix}{name}.")


def _log_one_minus_tanh_sq(u: np.ndarray) -> np.ndarray:
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squashed_log_prob(u: Tensor, log_std: Tensor, noise: Tensor, half_range: np.ndarray) -> Tensor:
    """Gaussian log-density of ``u`` minus the tanh change-of-variables term, summed over dims."""
    gauss = dm.sub(
        -0.5 * noise.data * noise.data - 0.5 * dm.LOG_2PI,
        log_std,
    )
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u))
    log_jac = dm.scale(dm.sub(dm.sub(math.log(2.0), u), dm.softplus(dm.scale(u, -2.0))), 2.0)
    per_dim = dm.sub(gauss, dm.add(log_jac, np.log(half_range)))
    return dm.reduce_sum(per_dim, "cols")


class Adam:
    """Adam with bias correction and optional decoupled weight decay.

    ``grad_scale`` multiplies raw gradients before they enter the moment
    estimates (used for the mixing network's fixed gradient coefficient).
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        grad_scale: float = 1.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_scale = grad_scale
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = []
        for i, p in enumerate(self.params):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                bad = int(np.sum(~np.isfinite(g)))
                raise FloatingPointError(
                    f"non-finite gradient in parameter {i} (shape {p.shape}, {bad} bad entries) at step {self.t + 1}"
                )
            grads.append(g * self.grad_scale if self.grad_scale != 1.0 else g)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}t": np.array([[float(self.t)]])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}m{i}"] = m
            out[f"{prefix}v{i}"] = v
        return out


def polyak_update(target_params: Sequence[Tensor], online_params: Sequence[Tensor], rho: float) -> None:
    """In place: ``target <- rho * target + (1 - rho) * online``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if len(target_params) != len(online_params):
        raise dm.ShapeError("target and online parameter lists differ in length")
    for t, o in zip(target_params, online_params):
        if t.shape != o.shape:
            raise dm.ShapeError(f"polyak: shapes {t.shape} and {o.shape} differ")
        t.data = rho * t.data + (1.0 - rho) * o.data


def copy_params(target_params: Sequence[Tensor], online_params: Sequence[Tensor]) -> None:
    for t, o in zip(target_params, online_params):
        t.data = o.data.copy()


# -- checkpoint files ---------------------------------------------------------
@dataclass
class ParamBundle:
    """Named float64 matrices plus a JSON-serializable architecture header."""

    spec: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def save_params(bundle: ParamBundle, path: str | Path) -> None:
    """Write ``bundle`` as: magic line, JSON header line, then length-prefixed float64 records."""
    names = list(bundle.arrays)
    header = {
        "spec": bundle.spec,
        "arrays": [{"name": n, "shape": list(np.shape(bundle.arrays[n]))} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for n in names:
            raw = np.ascontiguousarray(bundle.arrays[n], dtype="<f8").tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def load_params(path: str | Path, expected_spec: dict | None = None) -> ParamBundle:
    """Read a checkpoint; every key in ``expected_spec`` must match the stored header."""
    blob = Path(path).read_bytes()
    if not blob:
        raise ParamFileError(f"{path}: empty parameter file")
    if not blob.startswith(PARAM_MAGIC):
        raise ParamFileError(f"{path}: missing magic header")
    rest = blob[len(PARAM_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise ParamFileError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise ParamFileError(f"{path}: header is not valid JSON ({exc})") from exc
    spec = header.get("spec", {})
    if expected_spec is not None:
        for key, want in expected_spec.items():
            got = spec.get(key)
            if _jsonish(got) != _jsonish(want):
                raise SpecMismatchError(f"{path}: spec field {key!r} is {got!r}, expected {want!r}")
    arrays = {}
    pos = nl + 1
    for entry in header.get("arrays", []):
        if pos + 8 > len(rest):
            raise ParamFileError(f"{path}: truncated before array {entry['name']!r}")
        (n_bytes,) = struct.unpack("<Q", rest[pos:pos + 8])
        pos += 8
        shape = tuple(entry["shape"])
        if n_bytes != 8 * int(np.prod(shape)) or pos + n_bytes > len(rest):
            raise ParamFileError(f"{path}: bad record length for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(rest[pos:pos + n_bytes], dtype="<f8").reshape(shape).copy()
        pos += n_bytes
    if pos != len(rest):
        raise ParamFileError(f"{path}: {len(rest) - pos} trailing bytes")
    return ParamBundle(spec=spec, arrays=arrays)


def _jsonish(value):
    return json.loads(json.dumps(value))


def spec_dict(spec: MlpSpec) -> dict:
    return asdict(spec)
