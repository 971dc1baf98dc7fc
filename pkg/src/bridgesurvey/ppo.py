"""Clipped-surrogate policy optimization for the survey agent.

Actor and critic are separate two-hidden-layer networks over the 23-value
observation. The actor emits raw action logits; the pause mask is applied
here as a renormalized softmax, so a forbidden Pause never has probability
mass, at sampling time and inside the loss alike. Returns are discounted
reward-to-go per episode segment with a critic bootstrap where the rollout
truncates an episode.
"""

import csv
import os
from dataclasses import dataclass, replace

import numpy as np

from . import env as _env
from . import nn

__all__ = [
    "PPOConfig", "RolloutBuffer", "actor_spec", "critic_spec",
    "build_networks", "masked_policy", "collect_rollout",
    "compute_returns_advantages", "clipped_surrogate", "ppo_loss",
    "update", "train", "TrainResult", "evaluate", "EvalReport",
    "write_training_log", "TRAIN_LOG_COLUMNS",
]

N_ACTIONS = len(_env.ACTION_NAMES)

TRAIN_LOG_COLUMNS = ("update", "episodes", "mean_ep_reward", "surrogate_loss",
                     "value_loss", "entropy", "clip_fraction", "wallclock_s")


@dataclass(frozen=True)
class PPOConfig:
    hidden: tuple = (256, 256)
    learning_rate: float = 1e-4
    gamma: float = 0.99
    clip_epsilon: float = 0.2
    k_epochs: int = 20
    minibatch_size: int = 768
    buffer_capacity: int = 3072
    rollout_steps: int = 2048      # transitions collected per update
    c1: float = 0.5                # value-loss weight (not given upstream)
    c2: float = 0.01               # entropy bonus weight (not given upstream)
    grad_clip: float = 0.5         # elementwise bound applied before Adam
    normalize_advantages: bool = True
    total_episodes: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if self.rollout_steps > self.buffer_capacity:
            raise ValueError("rollout_steps cannot exceed buffer_capacity")
        if self.minibatch_size > self.rollout_steps:
            raise ValueError("minibatch_size cannot exceed rollout_steps")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.k_epochs < 1 or self.total_episodes < 1:
            raise ValueError("k_epochs and total_episodes must be >= 1")


def actor_spec(obs_size=_env.OBS_SIZE, hidden=(256, 256)):
    """Observation to raw action logits."""
    layers, prev = [], obs_size
    for h in hidden:
        layers += [nn.Dense(prev, h), nn.Relu()]
        prev = h
    layers.append(nn.Dense(prev, N_ACTIONS))
    return nn.NetworkSpec(input_shape=(obs_size,), layers=tuple(layers))


def critic_spec(obs_size=_env.OBS_SIZE, hidden=(256, 256)):
    """Observation to scalar state value."""
    layers, prev = [], obs_size
    for h in hidden:
        layers += [nn.Dense(prev, h), nn.Relu()]
        prev = h
    layers.append(nn.Dense(prev, 1))
    return nn.NetworkSpec(input_shape=(obs_size,), layers=tuple(layers))


def build_networks(config, rng):
    a_spec = actor_spec(hidden=config.hidden)
    c_spec = critic_spec(hidden=config.hidden)
    return (a_spec, nn.init_params(a_spec, rng)), (c_spec, nn.init_params(c_spec, rng))


# ---------------------------------------------------------------------------
# masked policy head

def masked_policy(logits, masks):
    """Renormalized softmax over permitted actions.

    logits (n, A), masks (n, A) boolean with at least one True per row.
    Forbidden actions get exactly zero probability.
    """
    z = np.where(masks, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(masks, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def _policy_entropy(probs):
    """Entropy per row; zero-probability entries contribute nothing."""
    p = np.where(probs > 0, probs, 1.0)
    return -(probs * np.log(p)).sum(axis=1)


@dataclass
class RolloutBuffer:
    obs: np.ndarray            # (n, obs_size)
    actions: np.ndarray        # (n,) int
    rewards: np.ndarray        # (n,) float
    dones: np.ndarray          # (n,) bool, True where the episode ended
    log_probs: np.ndarray      # (n,) log pi_old(a|s) under the masked policy
    values: np.ndarray         # (n,) V(s) at collection time
    masks: np.ndarray          # (n, A) permitted actions at s
    final_obs: np.ndarray      # observation after the last transition
    returns: np.ndarray = None
    advantages: np.ndarray = None

    def __len__(self):
        return len(self.actions)


def collect_rollout(environment, actor, critic, n_steps, rng):
    """Run the current policy for exactly n_steps transitions.

    actor/critic are (spec, params) pairs. Episodes that end mid-rollout
    reset the environment with a seed drawn from rng, so a fixed rng seed
    reproduces the whole chain. Also returns the rewards and lengths of
    episodes that completed during collection plus the simulated seconds
    elapsed (ticks plus per-scan detector latency).
    """
    a_spec, a_params = actor
    c_spec, c_params = critic
    if environment.done:
        environment.reset(seed=int(rng.integers(2 ** 63)))

    obs = np.empty((n_steps, a_spec.input_shape[0]))
    actions = np.empty(n_steps, dtype=np.int64)
    rewards = np.empty(n_steps)
    dones = np.zeros(n_steps, dtype=bool)
    log_probs = np.empty(n_steps)
    values = np.empty(n_steps)
    masks = np.zeros((n_steps, N_ACTIONS), dtype=bool)

    ep_rewards, ep_lengths = [], []
    ep_reward = getattr(environment, "_partial_reward", 0.0)
    ep_length = getattr(environment, "_partial_length", 0)
    sim_seconds = 0.0
    tick = environment.config.tick_s
    latency = environment.detector.latency_s

    for t in range(n_steps):
        o = environment.observe()
        mask = environment.action_mask()
        logits, _ = nn.forward(a_spec, a_params, o)
        probs = masked_policy(logits[None], mask[None])[0]
        action = int(rng.choice(N_ACTIONS, p=probs))
        value, _ = nn.forward(c_spec, c_params, o)

        out = environment.step(action)
        obs[t] = o
        actions[t] = action
        rewards[t] = out.reward.total
        dones[t] = out.done
        log_probs[t] = np.log(probs[action])
        values[t] = float(value[0])
        masks[t] = mask

        sim_seconds += tick
        if out.info.get("scanned"):
            sim_seconds += latency
        ep_reward += out.reward.total
        ep_length += 1
        if out.done:
            ep_rewards.append(ep_reward)
            ep_lengths.append(ep_length)
            ep_reward, ep_length = 0.0, 0
            environment.reset(seed=int(rng.integers(2 ** 63)))
    # carry partial-episode accounting into the next rollout
    environment._partial_reward = ep_reward
    environment._partial_length = ep_length

    buffer = RolloutBuffer(obs=obs, actions=actions, rewards=rewards,
                           dones=dones, log_probs=log_probs, values=values,
                           masks=masks, final_obs=environment.observe())
    return buffer, ep_rewards, ep_lengths, sim_seconds


def compute_returns_advantages(buffer, critic, gamma, normalize=True, eps=1e-8):
    """Discounted reward-to-go per episode segment, bootstrapped with the
    critic's value of the observation after the last transition when the
    rollout truncates an episode. Advantage = return - stored value,
    normalized per buffer unless disabled."""
    c_spec, c_params = critic
    n = len(buffer)
    returns = np.empty(n)
    if buffer.dones[-1]:
        acc = 0.0
    else:
        tail_value, _ = nn.forward(c_spec, c_params, buffer.final_obs)
        acc = float(tail_value[0])
    for t in range(n - 1, -1, -1):
        if buffer.dones[t]:
            acc = 0.0
        acc = buffer.rewards[t] + gamma * acc
        returns[t] = acc
    advantages = returns - buffer.values
    if normalize:
        std = advantages.std()
        advantages = (advantages - advantages.mean()) / (std + eps)
    return replace(buffer, returns=returns, advantages=advantages)


# ---------------------------------------------------------------------------
# objective

def clipped_surrogate(ratio, advantage, clip_epsilon):
    """min(ratio * A, clip(ratio, 1-eps, 1+eps) * A); elementwise on arrays."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    return np.minimum(ratio * advantage, clipped * advantage)


def _surrogate_dratio(ratio, advantage, clip_epsilon):
    """d/d ratio of the clipped surrogate: the advantage where the unclipped
    branch is active, zero where the clip has flattened it."""
    lo, hi = 1.0 - clip_epsilon, 1.0 + clip_epsilon
    inside = (ratio >= lo) & (ratio <= hi)
    active = inside | ((ratio > hi) & (advantage < 0)) | ((ratio < lo) & (advantage > 0))
    return np.where(active, advantage, 0.0)


def ppo_loss(minibatch, actor, critic, config):
    """Total loss and per-component means on a prepared minibatch."""
    total, comps, _, _, _, _ = _loss_and_grads(minibatch, actor, critic, config)
    return total, comps


def _loss_and_grads(mb, actor, critic, config):
    """Shared forward/backward pass: loss, components, parameter gradients."""
    a_spec, a_params = actor
    c_spec, c_params = critic
    n = len(mb)

    logits, a_cache = nn.forward(a_spec, a_params, mb.obs)
    probs = masked_policy(logits, mb.masks)
    idx = np.arange(n)
    p_taken = probs[idx, mb.actions]
    ratios = p_taken / np.exp(mb.log_probs)

    surr = clipped_surrogate(ratios, mb.advantages, config.clip_epsilon)
    entropy = _policy_entropy(probs)
    v_raw, c_cache = nn.forward(c_spec, c_params, mb.obs)
    v = v_raw[:, 0]
    v_err = v - mb.returns

    surrogate_mean = float(surr.mean())
    value_loss = float((v_err ** 2).mean())
    entropy_mean = float(entropy.mean())
    total = -surrogate_mean + config.c1 * value_loss - config.c2 * entropy_mean
    if not np.isfinite(total):
        raise ValueError(
            f"non-finite loss: surrogate={surrogate_mean!r} "
            f"value={value_loss!r} entropy={entropy_mean!r}")

    # gradient w.r.t. actor logits. For the masked softmax p = q(z),
    # d log p_a / dz_k = onehot_ak - p_k on the permitted support, and the
    # entropy term uses dH/dz_k = -p_k (log p_k + H).
    ds_dr = _surrogate_dratio(ratios, mb.advantages, config.clip_epsilon)
    # d ratio / d log p_taken = ratio
    g_logp = -(ds_dr * ratios) / n                    # from -mean(surr)
    onehot = np.zeros_like(probs)
    onehot[idx, mb.actions] = 1.0
    g_logits = g_logp[:, None] * (onehot - probs)
    logp_safe = np.log(np.where(probs > 0, probs, 1.0))
    dH_dz = -probs * (logp_safe + entropy[:, None])
    g_logits += (-config.c2 / n) * dH_dz

    g_v = (config.c1 * 2.0 / n) * v_err[:, None]

    a_grads, _ = nn.backward(a_cache, g_logits)
    c_grads, _ = nn.backward(c_cache, g_v)
    comps = {"surrogate": surrogate_mean, "value_loss": value_loss,
             "entropy": entropy_mean,
             "clip_fraction": float((np.abs(ratios - 1.0) > config.clip_epsilon).mean())}
    return total, comps, a_grads, c_grads, ratios, None


def _clip_grads(grads, bound):
    return [{k: np.clip(g, -bound, bound) for k, g in layer.items()}
            for layer in grads]


def update(buffer, actor, critic, actor_opt, critic_opt, config, rng):
    """k_epochs passes of shuffled full minibatches over the prepared buffer.

    The stored log-probs are the old-policy snapshot: they were recorded at
    collection time and stay fixed while the networks move. Gradients are
    clipped elementwise to +/- grad_clip before each Adam step. Leftover
    samples that do not fill a minibatch are dropped that epoch.
    Returns updated (actor, critic, stats).
    """
    a_spec, a_params = actor
    c_spec, c_params = critic
    n = len(buffer)
    stats = {"surrogate": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "clip_fraction": 0.0, "minibatches": 0}
    for _ in range(config.k_epochs):
        order = rng.permutation(n)
        for start in range(0, n - config.minibatch_size + 1, config.minibatch_size):
            sel = order[start:start + config.minibatch_size]
            mb = RolloutBuffer(
                obs=buffer.obs[sel], actions=buffer.actions[sel],
                rewards=buffer.rewards[sel], dones=buffer.dones[sel],
                log_probs=buffer.log_probs[sel], values=buffer.values[sel],
                masks=buffer.masks[sel], final_obs=buffer.final_obs,
                returns=buffer.returns[sel], advantages=buffer.advantages[sel])
            _, comps, a_grads, c_grads, _, _ = _loss_and_grads(
                mb, (a_spec, a_params), (c_spec, c_params), config)
            a_params = nn.adam_step(a_params, _clip_grads(a_grads, config.grad_clip),
                                    actor_opt)
            c_params = nn.adam_step(c_params, _clip_grads(c_grads, config.grad_clip),
                                    critic_opt)
            for k in ("surrogate", "value_loss", "entropy", "clip_fraction"):
                stats[k] += comps[k]
            stats["minibatches"] += 1
    m = max(stats["minibatches"], 1)
    for k in ("surrogate", "value_loss", "entropy", "clip_fraction"):
        stats[k] /= m
    return (a_spec, a_params), (c_spec, c_params), stats


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    actor: tuple               # (spec, params)
    critic: tuple
    log_rows: list             # one dict per update
    episode_rewards: list      # every completed training episode, in order
    episodes: int
    updates: int


def train(make_env, config, checkpoint_dir=None, log_path=None, verbose=False):
    """Alternate rollout collection and policy updates until the episode
    budget is met. make_env(seed) builds a fresh environment.

    The log's wallclock_s column is the cumulative simulated mission time of
    the collected experience (ticks plus scan latency), so logs are exactly
    reproducible for a given seed; real elapsed time is not recorded.
    """
    rng = np.random.default_rng(config.seed)
    actor, critic = build_networks(config, rng)
    actor_opt = nn.init_adam(actor[1], lr=config.learning_rate)
    critic_opt = nn.init_adam(critic[1], lr=config.learning_rate)
    environment = make_env(int(rng.integers(2 ** 63)))

    log_rows = []
    all_ep_rewards = []
    episodes = 0
    sim_clock = 0.0
    update_idx = 0
    while episodes < config.total_episodes:
        buffer, ep_rewards, _, sim_s = collect_rollout(
            environment, actor, critic, config.rollout_steps, rng)
        buffer = compute_returns_advantages(
            buffer, critic, config.gamma, normalize=config.normalize_advantages)
        actor, critic, stats = update(buffer, actor, critic,
                                      actor_opt, critic_opt, config, rng)
        episodes += len(ep_rewards)
        all_ep_rewards.extend(ep_rewards)
        sim_clock += sim_s
        update_idx += 1
        recent = all_ep_rewards[-20:]
        row = {"update": update_idx,
               "episodes": episodes,
               "mean_ep_reward": float(np.mean(recent)) if recent else 0.0,
               "surrogate_loss": stats["surrogate"],
               "value_loss": stats["value_loss"],
               "entropy": stats["entropy"],
               "clip_fraction": stats["clip_fraction"],
               "wallclock_s": sim_clock}
        log_rows.append(row)
        if verbose:
            print(f"update {update_idx}: episodes={episodes} "
                  f"mean_ep_reward={row['mean_ep_reward']:.2f} "
                  f"entropy={stats['entropy']:.3f}")

    if log_path is not None:
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        write_training_log(log_path, log_rows)
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        nn.save_params(os.path.join(checkpoint_dir, "actor.bin"),
                       actor[0], actor[1])
        nn.save_params(os.path.join(checkpoint_dir, "critic.bin"),
                       critic[0], critic[1])
    return TrainResult(actor=actor, critic=critic, log_rows=log_rows,
                       episode_rewards=all_ep_rewards, episodes=episodes,
                       updates=update_idx)


def write_training_log(path, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRAIN_LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v
                        for k, v in row.items()})
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class EvalReport:
    mean_reward: float
    std_reward: float
    mean_steps: float
    mean_sim_seconds: float
    cracks_detected: int       # summed over episodes
    cracks_total: int
    false_positives: int
    episodes: list             # per-episode dicts


def evaluate(actor, config, detector, n_episodes, seed=0, deterministic=True,
             sample_rng=None):
    """Run n_episodes fresh episodes under the policy.

    Episode k uses world seed (seed, k) so evaluations of scenario variants
    pair episode-for-episode. deterministic picks the argmax permitted
    action; otherwise actions are sampled with sample_rng.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    a_spec, a_params = actor
    if not deterministic and sample_rng is None:
        sample_rng = np.random.default_rng(seed)
    rows = []
    cracks_detected = cracks_total = false_pos = 0
    for ep in range(n_episodes):
        # mix (seed, episode index) into one world seed so variant scenarios
        # pair episode-for-episode
        ep_seed = int(np.random.SeedSequence((seed, ep)).generate_state(1)[0])
        environment = _env.BridgeEnv(config, detector, seed=ep_seed)
        total = 0.0
        steps = 0
        pauses = 0
        scans = 0
        while not environment.done:
            o = environment.observe()
            mask = environment.action_mask()
            logits, _ = nn.forward(a_spec, a_params, o)
            probs = masked_policy(logits[None], mask[None])[0]
            if deterministic:
                action = int(np.argmax(probs))
            else:
                action = int(sample_rng.choice(N_ACTIONS, p=probs))
            out = environment.step(action)
            total += out.reward.total
            steps += 1
            pauses += int(action == _env.PAUSE)
            scans += int(bool(out.info.get("scanned")))
        sim_seconds = steps * config.tick_s + scans * detector.latency_s
        detected = len(environment.state.detected)
        rows.append({"reward": total, "steps": steps,
                     "sim_seconds": sim_seconds,
                     "cracks_detected": detected,
                     "cracks_total": environment.world.n_true,
                     "false_positives": environment.state.false_positives,
                     "pauses": pauses})
        cracks_detected += detected
        cracks_total += environment.world.n_true
        false_pos += environment.state.false_positives
    rewards = np.array([r["reward"] for r in rows])
    return EvalReport(
        mean_reward=float(rewards.mean()),
        std_reward=float(rewards.std()),
        mean_steps=float(np.mean([r["steps"] for r in rows])),
        mean_sim_seconds=float(np.mean([r["sim_seconds"] for r in rows])),
        cracks_detected=cracks_detected, cracks_total=cracks_total,
        false_positives=false_pos, episodes=rows)
