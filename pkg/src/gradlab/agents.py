"""PQN-style Q(lambda) agent and a minimal PPO over vectorized envs.

PQN regresses Q(s, a) onto Q(lambda) targets computed once per on-policy
rollout (no replay buffer, no target network); PPO shares the trunk between
a policy head and a value head. Both alternate collect / update strictly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import ProbeBatch, ProbeConfig, run_probes
from .errors import ConfigError, InputError, NumericError
from .layers import clip_global_grad_norm
from .networks import ArchitectureSpec, backward_network, build_network, forward_network
from .optim import make_optimizer_state, optimizer_step
from .rng import child_rng

__all__ = [
    "PqnConfig",
    "PpoConfig",
    "RolloutBuffer",
    "epsilon_schedule",
    "softmax_policy",
    "collect_rollout_pqn",
    "collect_rollout_ppo",
    "q_lambda_returns",
    "pqn_update",
    "gae",
    "ppo_loss_and_grads",
    "ppo_update",
    "evaluate_greedy",
    "RLResult",
    "train_pqn",
    "train_ppo",
]


@dataclass
class PqnConfig:
    learning_rate: float = 2.5e-4
    n_envs: int = 32  # paper-scale 128; desk default keeps the rollout/minibatch ratio
    n_steps: int = 32
    gamma: float = 0.99
    minibatches: int = 8  # paper-scale 32
    update_epochs: int = 2
    max_grad_norm: float = 10.0
    eps_start: float = 1.0
    eps_end: float = 0.005
    exploration_fraction: float = 0.10
    q_lambda: float = 0.65
    use_layernorm: bool = True
    optimizer: str = "radam"
    optimizer_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.q_lambda <= 1.0:
            raise ConfigError("q_lambda must be in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must be in (0, 1)")
        if self.eps_end > self.eps_start:
            raise ConfigError("eps_end must be <= eps_start")


@dataclass
class PpoConfig:
    learning_rate: float = 2.5e-4
    n_envs: int = 8
    n_steps: int = 128
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_coef: float = 0.1
    update_epochs: int = 4
    minibatches: int = 4
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    clip_value_loss: bool = True
    use_layernorm: bool = False
    optimizer: str = "adam"
    optimizer_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.clip_coef <= 0:
            raise ConfigError("clip_coef must be > 0")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must be in (0, 1)")


@dataclass
class RolloutBuffer:
    """(n_envs, n_steps) arrays for one on-policy rollout."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    next_max_q: np.ndarray | None = None  # PQN bootstrap: max_a Q(s_{t+1}, a)
    q_taken: np.ndarray | None = None
    targets: np.ndarray | None = None
    values: np.ndarray | None = None  # PPO
    logprobs: np.ndarray | None = None
    next_value: np.ndarray | None = None  # (n_envs,) bootstrap V(s_T)
    advantages: np.ndarray | None = None
    value_targets: np.ndarray | None = None

    @property
    def n_envs(self):
        return self.rewards.shape[0]

    @property
    def n_steps(self):
        return self.rewards.shape[1]

    def flat_obs(self):
        return self.obs.reshape(self.n_envs * self.n_steps, *self.obs.shape[2:])


def epsilon_schedule(t: float, total: float, config: PqnConfig) -> float:
    """Linear eps_start -> eps_end over the first exploration_fraction of frames."""
    if not 0 <= t <= total:
        raise InputError(f"t={t} outside [0, {total}]")
    anneal = config.exploration_fraction * total
    if anneal <= 0 or t >= anneal:
        return config.eps_end
    return config.eps_start + (config.eps_end - config.eps_start) * (t / anneal)


def softmax_policy(values: np.ndarray) -> np.ndarray:
    """Action probabilities exp(q)/sum exp(q), log-sum-exp stabilized."""
    values = np.asarray(values, dtype=np.float64)
    z = values - values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(values: np.ndarray) -> np.ndarray:
    z = values - values.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def collect_rollout_pqn(params, vecenv, n_steps: int, epsilon: float, rng, obs: np.ndarray):
    """Epsilon-greedy rollout; stores per-step max_a Q(s_{t+1}) for bootstrapping.

    Returns (buffer, next_obs). Argmax ties break toward the lowest action.
    """
    n = vecenv.n_envs
    buf = RolloutBuffer(
        obs=np.empty((n, n_steps) + tuple(vecenv.obs_shape)),
        actions=np.empty((n, n_steps), dtype=np.int64),
        rewards=np.empty((n, n_steps)),
        dones=np.empty((n, n_steps)),
        next_max_q=np.empty((n, n_steps)),
        q_taken=np.empty((n, n_steps)),
    )
    q = forward_network(params, obs).outputs
    for t in range(n_steps):
        greedy = np.argmax(q, axis=1)
        explore = rng.random(n) < epsilon
        random_actions = rng.integers(0, vecenv.n_actions, n)
        actions = np.where(explore, random_actions, greedy)
        buf.obs[:, t] = obs
        buf.actions[:, t] = actions
        buf.q_taken[:, t] = q[np.arange(n), actions]
        obs, rewards, dones = vecenv.step(actions)
        buf.rewards[:, t] = rewards
        buf.dones[:, t] = dones.astype(np.float64)
        q = forward_network(params, obs).outputs
        buf.next_max_q[:, t] = q.max(axis=1)
    return buf, obs


def q_lambda_returns(buffer: RolloutBuffer, q_lambda: float, gamma: float) -> np.ndarray:
    """Backward Q(lambda) recursion:

    R_t = r_t + gamma*(1-d_t)*[lambda*R_{t+1} + (1-lambda)*maxQ(s_{t+1})]
    with the horizon term R_{T-1} = r + gamma*(1-d)*maxQ(s_T).
    """
    if not 0.0 <= q_lambda <= 1.0:
        raise ConfigError("q_lambda must be in [0, 1]")
    if buffer.next_max_q is None:
        raise InputError("buffer is missing bootstrap Q values")
    r, d, nq = buffer.rewards, buffer.dones, buffer.next_max_q
    targets = np.empty_like(r)
    t_last = buffer.n_steps - 1
    targets[:, t_last] = r[:, t_last] + gamma * (1.0 - d[:, t_last]) * nq[:, t_last]
    for t in range(t_last - 1, -1, -1):
        blend = q_lambda * targets[:, t + 1] + (1.0 - q_lambda) * nq[:, t]
        targets[:, t] = r[:, t] + gamma * (1.0 - d[:, t]) * blend
    buffer.targets = targets
    return targets


def pqn_update(params, buffer: RolloutBuffer, state, config: PqnConfig, rng):
    """Update epochs over shuffled (env, step) minibatches of the 0.5*MSE loss."""
    if buffer.targets is None:
        raise InputError("compute q_lambda_returns before pqn_update")
    flat_obs = buffer.flat_obs()
    flat_actions = buffer.actions.reshape(-1)
    flat_targets = buffer.targets.reshape(-1)
    n = flat_actions.shape[0]
    losses, mean_qs, grad_norms = [], [], []
    for _ in range(config.update_epochs):
        order = rng.permutation(n)
        for idx in np.array_split(order, config.minibatches):
            res = forward_network(params, flat_obs[idx])
            b = idx.shape[0]
            q_a = res.outputs[np.arange(b), flat_actions[idx]]
            diff = q_a - flat_targets[idx]
            loss = 0.5 * float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise NumericError("non-finite PQN loss")
            d_out = np.zeros_like(res.outputs)
            d_out[np.arange(b), flat_actions[idx]] = diff / b
            bundle = backward_network(params, res.caches, d_out)
            bundle, pre_norm = clip_global_grad_norm(bundle, config.max_grad_norm)
            params = optimizer_step(params, bundle, res.caches, state)
            losses.append(loss)
            mean_qs.append(float(q_a.mean()))
            grad_norms.append(pre_norm)
    metrics = {
        "loss": float(np.mean(losses)),
        "mean_q": float(np.mean(mean_qs)),
        "grad_norm_preclip": float(np.mean(grad_norms)),
    }
    return params, metrics


def collect_rollout_ppo(params, vecenv, n_steps: int, rng, obs: np.ndarray):
    """Distribution-sampled rollout storing values and log-probs; bootstraps V(s_T)."""
    n = vecenv.n_envs
    buf = RolloutBuffer(
        obs=np.empty((n, n_steps) + tuple(vecenv.obs_shape)),
        actions=np.empty((n, n_steps), dtype=np.int64),
        rewards=np.empty((n, n_steps)),
        dones=np.empty((n, n_steps)),
        values=np.empty((n, n_steps)),
        logprobs=np.empty((n, n_steps)),
    )
    for t in range(n_steps):
        res = forward_network(params, obs)
        probs = softmax_policy(res.outputs)
        u = rng.random((n, 1))
        actions = np.minimum((u > np.cumsum(probs, axis=1)).sum(axis=1), vecenv.n_actions - 1)
        buf.obs[:, t] = obs
        buf.actions[:, t] = actions
        buf.values[:, t] = res.value
        buf.logprobs[:, t] = _log_softmax(res.outputs)[np.arange(n), actions]
        obs, rewards, dones = vecenv.step(actions)
        buf.rewards[:, t] = rewards
        buf.dones[:, t] = dones.astype(np.float64)
    buf.next_value = forward_network(params, obs).value
    return buf, obs


def gae(buffer: RolloutBuffer, gamma: float, gae_lambda: float):
    """A_t = delta_t + gamma*lambda*(1-d_t)*A_{t+1}; value targets are A + V."""
    if buffer.values is None or buffer.next_value is None:
        raise InputError("buffer is missing value estimates")
    r, d, v = buffer.rewards, buffer.dones, buffer.values
    adv = np.zeros_like(r)
    next_adv = np.zeros(buffer.n_envs)
    next_v = buffer.next_value
    for t in range(buffer.n_steps - 1, -1, -1):
        mask = 1.0 - d[:, t]
        delta = r[:, t] + gamma * next_v * mask - v[:, t]
        next_adv = delta + gamma * gae_lambda * mask * next_adv
        adv[:, t] = next_adv
        next_v = v[:, t]
    buffer.advantages = adv
    buffer.value_targets = adv + v
    return adv, buffer.value_targets


def ppo_loss_and_grads(logits, values, actions, old_logprobs, advantages, returns, old_values, config: PpoConfig):
    """Clipped-surrogate loss pieces and their gradients w.r.t. logits and values.

    Returns (metrics dict, dlogits, dvalues); gradients are for the minibatch
    mean loss pg + vf_coef*v_loss - ent_coef*entropy.
    """
    b = logits.shape[0]
    logp_all = _log_softmax(logits)
    probs = np.exp(logp_all)
    new_logp = logp_all[np.arange(b), actions]
    ratio = np.exp(new_logp - old_logprobs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - config.clip_coef, 1.0 + config.clip_coef) * advantages
    pg_loss = -float(np.mean(np.minimum(unclipped, clipped)))
    entropy_rows = -np.sum(probs * logp_all, axis=1)
    entropy = float(entropy_rows.mean())
    if config.clip_value_loss:
        v_clipped = old_values + np.clip(values - old_values, -config.clip_coef, config.clip_coef)
        sq = (values - returns) ** 2
        sq_clipped = (v_clipped - returns) ** 2
        v_loss = 0.5 * float(np.mean(np.maximum(sq, sq_clipped)))
        use_unclipped = sq >= sq_clipped
        inside = np.abs(values - old_values) < config.clip_coef
        dvalues = np.where(use_unclipped, values - returns, np.where(inside, v_clipped - returns, 0.0))
    else:
        v_loss = 0.5 * float(np.mean((values - returns) ** 2))
        dvalues = values - returns
    dvalues = config.vf_coef * dvalues / b

    # min() gradient: flows through rho*A when it is selected, or when the
    # clip branch is selected with rho still inside the clipping band
    take_unclipped = unclipped <= clipped
    inside_band = (ratio > 1.0 - config.clip_coef) & (ratio < 1.0 + config.clip_coef)
    active = take_unclipped | inside_band
    dlogp = np.where(active, -advantages * ratio, 0.0) / b
    one_hot = np.zeros_like(logits)
    one_hot[np.arange(b), actions] = 1.0
    dlogits = dlogp[:, None] * (one_hot - probs)
    dlogits += config.ent_coef * probs * (logp_all + entropy_rows[:, None]) / b

    clip_frac = float(np.mean(np.abs(ratio - 1.0) > config.clip_coef))
    metrics = {
        "pg_loss": pg_loss,
        "v_loss": v_loss,
        "entropy": entropy,
        "clip_fraction": clip_frac,
        "loss": pg_loss + config.vf_coef * v_loss - config.ent_coef * entropy,
    }
    return metrics, dlogits, dvalues


def ppo_update(params, buffer: RolloutBuffer, state, config: PpoConfig, rng):
    if buffer.advantages is None:
        raise InputError("compute gae before ppo_update")
    flat_obs = buffer.flat_obs()
    flat_actions = buffer.actions.reshape(-1)
    flat_logp = buffer.logprobs.reshape(-1)
    flat_adv = buffer.advantages.reshape(-1)
    flat_ret = buffer.value_targets.reshape(-1)
    flat_val = buffer.values.reshape(-1)
    if config.normalize_advantages:
        flat_adv = (flat_adv - flat_adv.mean()) / (flat_adv.std() + 1e-8)
    n = flat_actions.shape[0]
    agg: dict[str, list] = {}
    for _ in range(config.update_epochs):
        order = rng.permutation(n)
        for idx in np.array_split(order, config.minibatches):
            res = forward_network(params, flat_obs[idx])
            metrics, dlogits, dvalues = ppo_loss_and_grads(
                res.outputs,
                res.value,
                flat_actions[idx],
                flat_logp[idx],
                flat_adv[idx],
                flat_ret[idx],
                flat_val[idx],
                config,
            )
            if not np.isfinite(metrics["loss"]):
                raise NumericError("non-finite PPO loss")
            bundle = backward_network(params, res.caches, dlogits, d_value=dvalues)
            bundle, pre_norm = clip_global_grad_norm(bundle, config.max_grad_norm)
            params = optimizer_step(params, bundle, res.caches, state)
            metrics["grad_norm_preclip"] = pre_norm
            for k, v in metrics.items():
                agg.setdefault(k, []).append(v)
    return params, {k: float(np.mean(v)) for k, v in agg.items()}


def evaluate_greedy(params, vecenv, episodes: int, max_env_steps: int = 100_000) -> float:
    """Mean return of the argmax policy over the first `episodes` completed episodes."""
    obs = vecenv.reset()
    returns: list[float] = []
    acc = np.zeros(vecenv.n_envs)
    steps = 0
    while len(returns) < episodes and steps < max_env_steps:
        q = forward_network(params, obs).outputs
        obs, rewards, dones = vecenv.step(np.argmax(q, axis=1))
        acc += rewards
        for i in np.nonzero(dones)[0]:
            if len(returns) < episodes:
                returns.append(float(acc[i]))
            acc[i] = 0.0
        steps += 1
    return float(np.mean(returns)) if returns else 0.0


@dataclass
class RLResult:
    params: object
    optimizer_state: object
    final_eval_return: float
    frames: int
    rows: int


def _build_rl_network(arch: ArchitectureSpec, vecenv, with_value_head: bool, seed: int):
    arch = replace(arch, with_value_head=with_value_head)
    in_shape = vecenv.obs_shape if len(vecenv.obs_shape) > 1 else int(vecenv.obs_shape[0])
    return build_network(arch, in_shape, vecenv.n_actions, child_rng(seed, 0))


def _collect_probe_transitions(env_factory, probe_size: int, seed: int):
    """Frozen random-policy transitions for curvature/gradient probes."""
    env = env_factory([child_rng(seed, 7, i) for i in range(16)], 16)
    rng = child_rng(seed, 8)
    obs_list, act_list, rew_list, done_list, next_list = [], [], [], [], []
    obs = env.reset()
    while 16 * len(obs_list) < probe_size:
        actions = rng.integers(0, env.n_actions, env.n_envs)
        next_obs, rewards, dones = env.step(actions)
        obs_list.append(obs)
        act_list.append(actions)
        rew_list.append(rewards)
        done_list.append(dones.astype(np.float64))
        next_list.append(next_obs)
        obs = next_obs
    cat = lambda xs: np.concatenate(xs, axis=0)[:probe_size]
    return cat(obs_list), cat(act_list), cat(rew_list), cat(done_list), cat(next_list)


def _rl_probe_loss_fn(probe, gamma: float, value_based: bool):
    p_obs, p_act, p_rew, p_done, p_next = probe

    def loss_fn(params):
        res_next = forward_network(params, p_next)
        res = forward_network(params, p_obs)
        if value_based:
            bootstrap = res_next.outputs.max(axis=1)
            targets = p_rew + gamma * (1.0 - p_done) * bootstrap
            b = p_obs.shape[0]
            q_a = res.outputs[np.arange(b), p_act]
            diff = q_a - targets
            d_out = np.zeros_like(res.outputs)
            d_out[np.arange(b), p_act] = diff / b
            bundle = backward_network(params, res.caches, d_out)
            return 0.5 * float(np.mean(diff**2)), bundle
        bootstrap = res_next.value
        targets = p_rew + gamma * (1.0 - p_done) * bootstrap
        diff = res.value - targets
        b = p_obs.shape[0]
        bundle = backward_network(params, res.caches, np.zeros_like(res.outputs), d_value=diff / b)
        return 0.5 * float(np.mean(diff**2)), bundle

    return loss_fn


def _run_rl_loop(
    *,
    value_based: bool,
    config,
    arch: ArchitectureSpec,
    env_factory,
    total_frames: int,
    probe_config: ProbeConfig,
    probe_every: int,
    eval_episodes: int,
    seed: int,
    on_row,
):
    n_envs, n_steps = config.n_envs, config.n_steps
    env = env_factory([child_rng(seed, 5, i) for i in range(n_envs)], n_envs)
    params = _build_rl_network(arch, env, not value_based, seed)
    state = make_optimizer_state(config.optimizer, config.learning_rate, **config.optimizer_options)
    action_rng = child_rng(seed, 1)
    update_rng = child_rng(seed, 2)
    probe = _collect_probe_transitions(env_factory, probe_config.probe_batch_size, seed)
    probe_loss_fn = _rl_probe_loss_fn(probe, config.gamma, value_based)
    probe_inputs = ProbeBatch(inputs=probe[0])

    frames_per_iter = n_envs * n_steps
    n_iters = max(1, total_frames // frames_per_iter)
    obs = env.reset()
    rows = 0
    eval_return = 0.0
    for it in range(n_iters):
        frames_done = it * frames_per_iter
        if value_based:
            eps = epsilon_schedule(frames_done, n_iters * frames_per_iter, config)
            buf, obs = collect_rollout_pqn(params, env, n_steps, eps, action_rng, obs)
            q_lambda_returns(buf, config.q_lambda, config.gamma)
            params, metrics = pqn_update(params, buf, state, config, update_rng)
            metrics["epsilon"] = eps
        else:
            buf, obs = collect_rollout_ppo(params, env, n_steps, action_rng, obs)
            gae(buf, config.gamma, config.gae_lambda)
            params, metrics = ppo_update(params, buf, state, config, update_rng)
        if on_row is not None and (it % probe_every == 0 or it == n_iters - 1):
            report = run_probes(params, probe_inputs, probe_loss_fn, probe_config, child_rng(seed, 3, it), step=it)
            eval_env = env_factory([child_rng(seed, 4, it, i) for i in range(n_envs)], n_envs)
            eval_return = evaluate_greedy(params, eval_env, eval_episodes)
            row = {
                "step": it,
                "frames": frames_done + frames_per_iter,
                "loss": metrics["loss"],
                "mean_q": metrics.get("mean_q", report.mean_q),
                "episode_return_mean": env.tracker.mean_return(),
                "eval_return": eval_return,
                "epsilon": metrics.get("epsilon", 0.0),
                "dormant_fraction": report.dormant_fraction,
                "srank": report.srank,
                "hessian_trace": report.hessian_trace,
                "probe_loss": report.probe_loss,
            }
            for i, g in enumerate(report.per_layer_grad_norms):
                row[f"grad_norm_L{i}"] = g
            on_row(row)
            rows += 1
    if on_row is None:
        eval_env = env_factory([child_rng(seed, 4, n_iters, i) for i in range(n_envs)], n_envs)
        eval_return = evaluate_greedy(params, eval_env, eval_episodes)
    return RLResult(
        params=params,
        optimizer_state=state,
        final_eval_return=eval_return,
        frames=n_iters * frames_per_iter,
        rows=rows,
    )


def train_pqn(
    config: PqnConfig,
    arch: ArchitectureSpec,
    env_factory,
    total_frames: int,
    *,
    probe_config: ProbeConfig | None = None,
    probe_every: int = 10,
    eval_episodes: int = 64,
    seed: int = 0,
    on_row=None,
) -> RLResult:
    """Full PQN training run; env_factory(rngs, n_envs) builds a VecEnv."""
    arch = replace(arch, use_layernorm=config.use_layernorm)
    return _run_rl_loop(
        value_based=True,
        config=config,
        arch=arch,
        env_factory=env_factory,
        total_frames=total_frames,
        probe_config=probe_config or ProbeConfig(probe_batch_size=512, hutchinson_samples=5),
        probe_every=probe_every,
        eval_episodes=eval_episodes,
        seed=seed,
        on_row=on_row,
    )


def train_ppo(
    config: PpoConfig,
    arch: ArchitectureSpec,
    env_factory,
    total_frames: int,
    *,
    probe_config: ProbeConfig | None = None,
    probe_every: int = 10,
    eval_episodes: int = 64,
    seed: int = 0,
    on_row=None,
) -> RLResult:
    arch = replace(arch, use_layernorm=config.use_layernorm)
    return _run_rl_loop(
        value_based=False,
        config=config,
        arch=arch,
        env_factory=env_factory,
        total_frames=total_frames,
        probe_config=probe_config or ProbeConfig(probe_batch_size=512, hutchinson_samples=5),
        probe_every=probe_every,
        eval_episodes=eval_episodes,
        seed=seed,
        on_row=on_row,
    )
