"""Independent vanilla SAC step written against torch, used as an oracle for the numpy agent.

Everything is float64. Network weights are copied in from the agent under test;
the update itself (targets, losses, autograd, Adam, Polyak) is torch's own.
"""

from __future__ import annotations

import math

import numpy as np
import torch

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0


def _params(mlp):
    return [torch.tensor(p.data.copy(), dtype=torch.float64, requires_grad=True) for p in mlp.parameters()]


def _forward(params, x, out_relu=False):
    n = len(params) // 2
    for i in range(n):
        x = x @ params[2 * i] + params[2 * i + 1]
        if i < n - 1 or out_relu:
            x = torch.relu(x)
    return x


def _policy(pi, obs, noise):
    trunk, mu_head, std_head = pi
    h = _forward(trunk, obs, out_relu=True)
    mu = _forward(mu_head, h)
    log_std = torch.clamp(_forward(std_head, h), LOG_STD_MIN, LOG_STD_MAX)
    u = mu + torch.exp(log_std) * noise
    normal = torch.distributions.Normal(mu, torch.exp(log_std))
    logp = normal.log_prob(u) - 2.0 * (math.log(2.0) - u - torch.nn.functional.softplus(-2.0 * u))
    return torch.tanh(u), logp.sum(dim=1, keepdim=True)


def _min_q(q1, q2, obs, act):
    x = torch.cat([obs, act], dim=1)
    return torch.minimum(_forward(q1, x), _forward(q2, x))


def reference_sac_step(agent, obs, act, reward, done, next_obs, next_noise, noise,
                       alpha, gamma, lr, rho) -> dict[str, list[np.ndarray]]:
    """One SAC iteration (critics, actor, targets) and the resulting parameters as arrays."""
    t = lambda a: torch.tensor(np.asarray(a, dtype=np.float64))  # noqa: E731
    pi = [_params(m) for m in (agent.policy.trunk, agent.policy.mu_head, agent.policy.log_std_head)]
    q1, q2 = _params(agent.q1), _params(agent.q2)
    q1_t, q2_t = _params(agent.q1_targ), _params(agent.q2_targ)
    obs, act, next_obs = t(obs), t(act), t(next_obs)
    reward, done = t(reward).reshape(-1, 1), t(done).reshape(-1, 1)

    q_opt = torch.optim.Adam(q1 + q2, lr=lr, eps=1e-8)
    pi_opt = torch.optim.Adam([p for group in pi for p in group], lr=lr, eps=1e-8)

    with torch.no_grad():
        a2, logp2 = _policy(pi, next_obs, t(next_noise))
        backup = reward + gamma * (1.0 - done) * (_min_q(q1_t, q2_t, next_obs, a2) - alpha * logp2)
    x = torch.cat([obs, act], dim=1)
    loss_q = ((_forward(q1, x) - backup) ** 2).mean() + ((_forward(q2, x) - backup) ** 2).mean()
    q_opt.zero_grad()
    loss_q.backward()
    q_opt.step()

    for p in q1 + q2:
        p.requires_grad_(False)
    a, logp = _policy(pi, obs, t(noise))
    loss_pi = (alpha * logp - _min_q(q1, q2, obs, a)).mean()
    pi_opt.zero_grad()
    loss_pi.backward()
    pi_opt.step()

    with torch.no_grad():
        for targ, online in zip(q1_t + q2_t, q1 + q2):
            targ.mul_(rho).add_((1.0 - rho) * online)

    arrays = lambda ps: [p.detach().numpy().copy() for p in ps]  # noqa: E731
    return {
        "policy": arrays([p for group in pi for p in group]),
        "q1": arrays(q1),
        "q2": arrays(q2),
        "q1_targ": arrays(q1_t),
        "q2_targ": arrays(q2_t),
        "loss_q": loss_q.item(),
        "loss_pi": loss_pi.item(),
    }


def agent_arrays(agent) -> dict[str, list[np.ndarray]]:
    return {
        "policy": [p.data for p in agent.policy.parameters()],
        "q1": [p.data for p in agent.q1.parameters()],
        "q2": [p.data for p in agent.q2.parameters()],
        "q1_targ": [p.data for p in agent.q1_targ.parameters()],
        "q2_targ": [p.data for p in agent.q2_targ.parameters()],
    }


def max_param_gap(ours: dict, ref: dict) -> float:
    return max(
        float(np.max(np.abs(a - b))) for key in ours for a, b in zip(ours[key], ref[key])
    )
