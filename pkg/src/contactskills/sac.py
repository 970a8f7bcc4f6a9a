"""Soft actor-critic with a squashed Gaussian policy and twin critics.

All gradients are assembled by hand through the nn layer stacks: the actor
loss differentiates through the reparameterised action into the critics'
input gradients, and the temperature alpha follows its own dual objective.
One implementation serves the proposed method, the naive-RL baseline, and
the reach sanity task; only the environment and reward source change.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .checkpoint import load_tensors, save_tensors

OBS_DIM = 12
ACT_DIM = 3
HIDDEN = 64
LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
GAMMA = 0.99
POLYAK = 0.005
BATCH_SIZE = 256
WARMUP_STEPS = 1000
REPLAY_CAPACITY = 100_000
_LOG_EPS = 1e-6


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool


class ReplayBuffer:
    """Seeded uniform-sampling ring buffer over flat float32 arrays."""

    def __init__(self, capacity=REPLAY_CAPACITY, obs_dim=OBS_DIM,
                 act_dim=ACT_DIM, seed=0):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.action = np.zeros((capacity, act_dim), dtype=np.float32)
        self.reward = np.zeros(capacity, dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=np.float32)
        self.rng = np.random.default_rng(seed)
        self.idx = 0
        self.size = 0

    def __len__(self):
        return self.size

    def store(self, t: Transition):
        i = self.idx
        self.obs[i] = t.obs
        self.action[i] = t.action
        self.reward[i] = t.reward
        self.next_obs[i] = t.next_obs
        self.done[i] = float(t.done)
        self.idx = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size=BATCH_SIZE):
        if self.size == 0:
            raise ValueError("sampling from an empty replay buffer")
        sel = self.rng.integers(0, self.size, size=batch_size)
        return (self.obs[sel], self.action[sel], self.reward[sel],
                self.next_obs[sel], self.done[sel])


def _critic(rng, name, obs_dim, act_dim):
    return nn.mlp([obs_dim + act_dim, HIDDEN, HIDDEN, 1], rng, name=name)


class SacNets:
    """Actor trunk with mean/log-std heads, twin critics, targets, alpha."""

    def __init__(self, seed=0, obs_dim=OBS_DIM, act_dim=ACT_DIM):
        rng = np.random.default_rng(seed)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.trunk = nn.mlp([obs_dim, HIDDEN, HIDDEN], rng, name="sac/actor/trunk",
                            out_activation="relu")
        self.mean_head = nn.LayerStack(
            [nn.Dense(HIDDEN, act_dim, rng, name="dense0")], name="sac/actor/mean")
        self.logstd_head = nn.LayerStack(
            [nn.Dense(HIDDEN, act_dim, rng, name="dense0")], name="sac/actor/logstd")
        self.q1 = _critic(rng, "sac/q1", obs_dim, act_dim)
        self.q2 = _critic(rng, "sac/q2", obs_dim, act_dim)
        self.q1_target = _critic(rng, "sac/q1t", obs_dim, act_dim)
        self.q2_target = _critic(rng, "sac/q2t", obs_dim, act_dim)
        self._sync_targets()
        self.log_alpha = nn.Param("sac/log_alpha", np.zeros(1))
        self.target_entropy = -float(act_dim)

    def _sync_targets(self):
        for src, dst in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for p, pt in zip(src.params(), dst.params()):
                pt.value[...] = p.value

    def polyak_update(self, tau=POLYAK):
        for src, dst in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for p, pt in zip(src.params(), dst.params()):
                pt.value *= 1.0 - tau
                pt.value += tau * p.value

    @property
    def alpha(self):
        return float(np.exp(self.log_alpha.value[0]))

    def actor_params(self):
        return self.trunk.params() + self.mean_head.params() + \
            self.logstd_head.params()

    def critic_params(self):
        return self.q1.params() + self.q2.params()

    def actor_forward(self, obs):
        h = self.trunk.forward(obs.astype(nn.DTYPE))
        mean = self.mean_head.forward(h)
        log_std_raw = self.logstd_head.forward(h)
        log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, log_std_raw

    def actor_backward(self, dmean, dlog_std, log_std_raw):
        gate = ((log_std_raw > LOG_STD_MIN) & (log_std_raw < LOG_STD_MAX))
        dh = self.mean_head.backward(dmean)
        dh = dh + self.logstd_head.backward(dlog_std * gate)
        self.trunk.backward(dh)

    def zero_actor_grad(self):
        for s in (self.trunk, self.mean_head, self.logstd_head):
            s.zero_grad()

    def zero_critic_grad(self):
        self.q1.zero_grad()
        self.q2.zero_grad()

    def state_dict(self):
        d = {}
        for s in (self.trunk, self.mean_head, self.logstd_head,
                  self.q1, self.q2, self.q1_target, self.q2_target):
            d.update(s.state_dict())
        d["sac/log_alpha"] = self.log_alpha.value.copy()
        return d

    def load_state_dict(self, d):
        for s in (self.trunk, self.mean_head, self.logstd_head,
                  self.q1, self.q2, self.q1_target, self.q2_target):
            s.load_state_dict(d)
        self.log_alpha.value[...] = d["sac/log_alpha"]

    def save(self, path):
        save_tensors(path, self.state_dict())

    @classmethod
    def load(cls, path, obs_dim=OBS_DIM, act_dim=ACT_DIM):
        nets = cls(obs_dim=obs_dim, act_dim=act_dim)
        nets.load_state_dict(load_tensors(path))
        return nets


def sample_action(nets, obs, rng=None, eps=None, deterministic=False):
    """Squashed Gaussian action (and log-prob) for a batch of observations."""
    obs = np.atleast_2d(np.asarray(obs, dtype=nn.DTYPE))
    mean, log_std, _ = nets.actor_forward(obs)
    if deterministic:
        return np.tanh(mean), None
    std = np.exp(log_std)
    if eps is None:
        eps = rng.standard_normal(mean.shape).astype(nn.DTYPE)
    u = mean + std * eps
    a = np.tanh(u)
    log_prob = (
        -0.5 * eps**2 - log_std - 0.5 * np.log(2.0 * np.pi)
        - np.log(1.0 - a**2 + _LOG_EPS)
    ).sum(axis=1)
    return a, log_prob


def select_action(nets, obs, rng=None, deterministic=False):
    a, _ = sample_action(nets, obs, rng=rng, deterministic=deterministic)
    return a[0]


# ---------------------------------------------------------------------------
# losses (each returns a scalar and accumulates parameter gradients)
# ---------------------------------------------------------------------------

def critic_loss_and_grad(nets, batch, eps_next, gamma=GAMMA):
    """Mean squared Bellman error of both critics; fills critic grads."""
    obs, act, rew, next_obs, done = batch
    n = len(obs)
    a_next, logp_next = sample_action(nets, next_obs, eps=eps_next)
    xa = np.concatenate([next_obs, a_next], axis=1)
    q_t = np.minimum(nets.q1_target.forward(xa)[:, 0],
                     nets.q2_target.forward(xa)[:, 0])
    y = rew + gamma * (1.0 - done) * (q_t - nets.alpha * logp_next)
    x = np.concatenate([obs, act], axis=1).astype(nn.DTYPE)
    loss = 0.0
    for q in (nets.q1, nets.q2):
        pred = q.forward(x)[:, 0]
        err = pred - y
        loss += float(np.mean(err**2))
        q.backward((2.0 * err / n)[:, None].astype(nn.DTYPE))
    return loss


def actor_loss_and_grad(nets, obs, eps):
    """E[alpha*logp - min Q]; fills actor grads, leaves critic grads dirty.

    Callers must zero critic gradients afterwards (the chain rule passes
    through the critics to reach the action).
    """
    obs = np.asarray(obs, dtype=nn.DTYPE)
    n = len(obs)
    alpha = nets.alpha
    mean, log_std, log_std_raw = nets.actor_forward(obs)
    std = np.exp(log_std)
    u = mean + std * eps
    a = np.tanh(u)
    one_m_a2 = 1.0 - a**2
    log_prob = (
        -0.5 * eps**2 - log_std - 0.5 * np.log(2.0 * np.pi)
        - np.log(one_m_a2 + _LOG_EPS)
    ).sum(axis=1)

    x = np.concatenate([obs, a], axis=1).astype(nn.DTYPE)
    q1 = nets.q1.forward(x)[:, 0]
    q2 = nets.q2.forward(x)[:, 0]
    qmin = np.minimum(q1, q2)
    loss = float(np.mean(alpha * log_prob - qmin))

    # dL/da through the minimum critic, per sample
    pick1 = (q1 <= q2).astype(nn.DTYPE)
    d1 = nets.q1.backward((-pick1 / n)[:, None].astype(nn.DTYPE))
    d2 = nets.q2.backward((-(1.0 - pick1) / n)[:, None].astype(nn.DTYPE))
    da = (d1 + d2)[:, nets.obs_dim:]
    # entropy term also depends on a via the tanh correction
    dlogp_du = 2.0 * a * one_m_a2 / (one_m_a2 + _LOG_EPS)
    du = da * one_m_a2 + (alpha / n) * dlogp_du
    dmean = du
    dlog_std = du * std * eps + (alpha / n) * (-1.0)
    nets.actor_backward(dmean.astype(nn.DTYPE), dlog_std.astype(nn.DTYPE),
                        log_std_raw)
    return loss, log_prob


def alpha_loss_and_grad(nets, log_prob):
    """Dual objective for the temperature; fills nets.log_alpha.grad."""
    excess = float(np.mean(log_prob) + nets.target_entropy)
    loss = -float(np.exp(nets.log_alpha.value[0])) * excess
    nets.log_alpha.grad += nn.DTYPE(-np.exp(nets.log_alpha.value[0]) * excess)
    return loss


@dataclass
class SacConfig:
    gamma: float = GAMMA
    polyak: float = POLYAK
    batch_size: int = BATCH_SIZE
    warmup_steps: int = WARMUP_STEPS
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    eval_every: int = 2000
    eval_episodes: int = 3
    total_steps: int = 30_000
    replay_capacity: int = REPLAY_CAPACITY


class SacTrainer:
    """Bundles the nets, optimisers, and one gradient step of Algorithm-style
    SAC: critic regression, reparameterised actor update, alpha update,
    Polyak target blend."""

    def __init__(self, seed=0, obs_dim=OBS_DIM, act_dim=ACT_DIM,
                 config=None):
        self.cfg = config or SacConfig()
        self.nets = SacNets(seed=seed, obs_dim=obs_dim, act_dim=act_dim)
        self.buffer = ReplayBuffer(self.cfg.replay_capacity, obs_dim, act_dim,
                                   seed=seed + 1)
        self.rng = np.random.default_rng(seed + 2)
        self.opt_actor = nn.Adam(self.nets.actor_params(), lr=self.cfg.actor_lr)
        self.opt_critic = nn.Adam(self.nets.critic_params(), lr=self.cfg.critic_lr)
        self.opt_alpha = nn.Adam([self.nets.log_alpha], lr=self.cfg.alpha_lr)

    def gradient_step(self):
        batch = self.buffer.sample(self.cfg.batch_size)
        nets = self.nets
        eps_next = self.rng.standard_normal(
            (len(batch[0]), nets.act_dim)).astype(nn.DTYPE)
        c_loss = critic_loss_and_grad(nets, batch, eps_next, self.cfg.gamma)
        self.opt_critic.step()
        nets.zero_critic_grad()

        eps = self.rng.standard_normal(
            (len(batch[0]), nets.act_dim)).astype(nn.DTYPE)
        a_loss, log_prob = actor_loss_and_grad(nets, batch[0], eps)
        self.opt_actor.step()
        nets.zero_actor_grad()
        nets.zero_critic_grad()  # chain-rule residue from the actor pass

        alpha_loss = alpha_loss_and_grad(nets, log_prob)
        self.opt_alpha.step()
        nets.log_alpha.grad[...] = 0.0

        nets.polyak_update(self.cfg.polyak)
        return dict(critic_loss=c_loss, actor_loss=a_loss,
                    alpha_loss=alpha_loss, alpha=nets.alpha)


def evaluate(nets, env, episodes, seed0=10_000):
    """Deterministic rollouts; returns (success_rate, mean_return)."""
    wins = 0
    returns = []
    for k in range(episodes):
        obs = env.reset(seed=seed0 + k)
        total = 0.0
        success = False
        for _ in range(10_000):
            a = select_action(nets, obs, deterministic=True)
            obs, r, done, success = env.step(a)
            total += r
            if done:
                break
        wins += bool(success)
        returns.append(total)
    return wins / episodes, float(np.mean(returns))


def train(env, seed=0, config=None, obs_dim=OBS_DIM, act_dim=ACT_DIM,
          eval_env=None, verbose=False, on_eval=None):
    """Off-policy training loop; returns (nets_at_best_eval, log).

    The returned nets carry the weights of the best periodic deterministic
    evaluation, not the final step, so a late collapse cannot discard a
    policy that already solved the task.
    """
    trainer = SacTrainer(seed=seed, obs_dim=obs_dim, act_dim=act_dim,
                         config=config)
    cfg = trainer.cfg
    eval_env = eval_env or env
    rng = np.random.default_rng(seed + 3)
    log = dict(evals=[], losses=[])
    best = (-1.0, -np.inf)
    best_state = trainer.nets.state_dict()
    obs = env.reset(seed=int(rng.integers(1 << 30)))
    for step in range(1, cfg.total_steps + 1):
        if step <= cfg.warmup_steps:
            a = rng.uniform(-1.0, 1.0, size=act_dim)
        else:
            a = select_action(trainer.nets, obs, rng=trainer.rng)
        next_obs, r, done, _ = env.step(a)
        trainer.buffer.store(Transition(obs, a, r, next_obs, done))
        obs = env.reset(seed=int(rng.integers(1 << 30))) if done else next_obs
        if step > cfg.warmup_steps:
            losses = trainer.gradient_step()
            if step % 500 == 0:
                log["losses"].append(dict(step=step, **losses))
        if step % cfg.eval_every == 0:
            rate, ret = evaluate(trainer.nets, eval_env, cfg.eval_episodes)
            log["evals"].append(dict(step=step, success=rate, mean_return=ret))
            if verbose:
                print(f"sac step {step}: eval success {rate:.2f} "
                      f"return {ret:.2f} alpha {trainer.nets.alpha:.3f}",
                      flush=True)
            if (rate, ret) > best:
                best = (rate, ret)
                best_state = trainer.nets.state_dict()
            if on_eval is not None:
                on_eval(step, rate, ret)
            obs = env.reset(seed=int(rng.integers(1 << 30)))
    trainer.nets.load_state_dict(best_state)
    log["best"] = dict(success=best[0], mean_return=best[1])
    return trainer.nets, log
