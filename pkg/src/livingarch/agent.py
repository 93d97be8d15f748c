"""DDPG agent with adaptive parameter-space noise.

Covers the observation window (mean of 20 IR frames), the engagement
reward, replay buffer, the actor-critic update, noise adaptation, action
scaling onto behaviour parameters and checkpointing.
"""
import dataclasses
import logging

import numpy as np

from ._validation import check_random_state
from .behaviour import ParamVector, ACTION_FIELDS
from . import _kernels
from .nn import Adam, DenseNet, read_checkpoint, soft_update, write_checkpoint

logger = logging.getLogger(__name__)

OBS_WINDOW = 20
N_SENSORS = 24
ACTION_DIM = len(ACTION_FIELDS)


@dataclasses.dataclass
class DDPGConfig:
    """Hyper-parameters; defaults follow the deployed agent."""
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    batch_size: int = 64
    buffer_size: int = 10**6
    train_interval: int = 10
    train_times: int = 20
    episode_length: int = 100
    noise_alpha: float = 1.01
    noise_delta: float = 0.1
    initial_sigma: float = 0.1
    tau: float = 0.001
    hidden: tuple = (64, 64)
    layer_norm: bool = True
    backend: str = "compiled"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.batch_size < 1 or self.buffer_size < 1 or self.train_interval < 1:
            raise ValueError("batch_size, buffer_size and train_interval must be positive")
        if not 0.0 <= self.tau <= 1.0 or not 0.0 <= self.gamma <= 1.0:
            raise ValueError("tau and gamma must lie in [0, 1]")
        if self.noise_alpha <= 1.0 or self.initial_sigma <= 0.0:
            raise ValueError("noise_alpha must exceed 1 and initial_sigma must be positive")
        if self.backend not in ("compiled", "numpy"):
            raise ValueError(f"unknown backend {self.backend!r}")


# observation and reward ---------------------------------------------------

def build_observation(frames, window=OBS_WINDOW):
    """Component-wise mean of the last ``window`` IR frames."""
    X = np.asarray([getattr(f, "readings", f) for f in frames], dtype=np.float64)
    if X.ndim != 2 or len(X) < window:
        raise ValueError(f"need {window} IR frames to build an observation, got {len(X)}")
    return X[-window:].mean(axis=0)


def reward(next_obs):
    """Engagement reward: sum of the next observation's components."""
    return float(np.sum(next_obs))


# replay buffer ------------------------------------------------------------

class ReplayBuffer:
    """FIFO ring of transitions backed by numpy arrays that grow on demand."""

    def __init__(self, capacity, obs_dim, action_dim):
        self.capacity = int(capacity)
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self._alloc = 0
        self.obs0 = np.empty((0, obs_dim))
        self.actions = np.empty((0, action_dim))
        self.rewards = np.empty(0)
        self.obs1 = np.empty((0, obs_dim))
        self.size = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    @property
    def evicted(self):
        return self.inserted - self.size

    def _grow(self):
        new = min(self.capacity, max(1024, 2 * self._alloc))
        for name in ("obs0", "actions", "rewards", "obs1"):
            old = getattr(self, name)
            arr = np.empty((new,) + old.shape[1:])
            arr[:self._alloc] = old
            setattr(self, name, arr)
        self._alloc = new

    def add(self, obs, action, reward, next_obs):
        i = self.inserted % self.capacity
        if i >= self._alloc:
            self._grow()
        self.obs0[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.obs1[i] = next_obs
        self.inserted += 1
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return self.obs0[idx], self.actions[idx], self.rewards[idx], self.obs1[idx]

    def arrays(self):
        """Contents in insertion order (oldest first)."""
        if self.size < self.capacity:
            order = np.arange(self.size)
        else:
            start = self.inserted % self.capacity
            order = np.concatenate([np.arange(start, self.capacity), np.arange(start)])
        return self.obs0[order], self.actions[order], self.rewards[order], self.obs1[order]


# parameter noise ----------------------------------------------------------

@dataclasses.dataclass
class NoiseState:
    sigma: float = 0.1
    alpha: float = 1.01
    delta: float = 0.1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def action_distance(actions, perturbed_actions):
    """Root-mean-square difference over batch and action dimensions."""
    diff = np.asarray(actions) - np.asarray(perturbed_actions)
    return float(np.sqrt(np.mean(diff * diff)))


def adapt_sigma(noise, distance):
    """Grow sigma by alpha if the perturbation moved actions by at most delta,
    shrink it by alpha otherwise. Returns the new NoiseState."""
    sigma = noise.sigma * noise.alpha if distance <= noise.delta else noise.sigma / noise.alpha
    return dataclasses.replace(noise, sigma=sigma)


def adapt_noise(noise, actor, perturbed_params, minibatch_obs):
    """Measure the action-space distance of a perturbed actor and adapt sigma."""
    a = actor.forward(minibatch_obs, cache=False)
    ap = actor.forward(minibatch_obs, params=perturbed_params)
    d = action_distance(a, ap)
    return adapt_sigma(noise, d), d


# the agent ----------------------------------------------------------------

class DDPGAgent:
    """Actor-critic learner with target networks and parameter-space noise.

    Parameters
    ----------
    obs_dim, action_dim : int
    config : DDPGConfig, optional
    random_state : int, Generator or None
        Seeds network initialization, minibatch sampling and noise.
    """

    def __init__(self, obs_dim=N_SENSORS, action_dim=ACTION_DIM, config=None, random_state=None):
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.config = config or DDPGConfig()
        self.rng = check_random_state(random_state)
        c = self.config
        self.actor = DenseNet((self.obs_dim, *c.hidden, self.action_dim), "relu", "tanh",
                              layer_norm=c.layer_norm, random_state=self.rng)
        self.critic = DenseNet((self.obs_dim + self.action_dim, *c.hidden, 1), "relu", "identity",
                               layer_norm=c.layer_norm, random_state=self.rng)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = Adam([self.actor.flat], c.actor_lr, names=["actor"])
        self.critic_opt = Adam([self.critic.flat], c.critic_lr, names=["critic"])
        self.buffer = ReplayBuffer(c.buffer_size, self.obs_dim, self.action_dim)
        self.noise = NoiseState(c.initial_sigma, c.noise_alpha, c.noise_delta)
        self.noise_log = []
        self.n_updates = 0
        self.perturbed = None
        self._actor_arch = _kernels.arch_arrays(self.actor)
        self._critic_arch = _kernels.arch_arrays(self.critic)
        self.resample_perturbation()

    # acting -----------------------------------------------------------------

    def start_day(self):
        """Reset sigma to its initial value and draw a fresh perturbation."""
        self.noise = NoiseState(self.config.initial_sigma, self.config.noise_alpha, self.config.noise_delta)
        self.resample_perturbation()

    def resample_perturbation(self):
        self.perturbed_flat = self.actor.flat + self.noise.sigma * self.rng.standard_normal(self.actor.flat.size)
        self.perturbed = self.actor.views(self.perturbed_flat)

    def act(self, obs, explore=True):
        """Action of the perturbed actor (or the clean actor if not exploring)."""
        obs = np.asarray(obs, dtype=np.float64)
        if self.config.backend == "compiled" and obs.ndim == 1 and obs.shape[0] == self.obs_dim:
            flat = self.perturbed_flat if explore else self.actor.flat
            return _kernels.forward(flat, obs[None, :], *self._actor_arch)[0]
        params = self.perturbed if explore else None
        return self.actor.forward(obs, params=params, cache=False)

    def observe(self, obs, action, r, next_obs):
        self.buffer.add(obs, action, r, next_obs)

    # learning ---------------------------------------------------------------

    def td_targets(self, rewards, next_obs):
        """``r + gamma * Q'(s', mu'(s'))`` evaluated on the target networks only."""
        a1 = self.actor_target.forward(next_obs, cache=False, check=False)
        q1 = self.critic_target.forward(np.hstack([next_obs, a1]), cache=False, check=False)[:, 0]
        return rewards + self.config.gamma * q1

    def train_step(self):
        """One minibatch update: noise adaptation, critic, actor, targets.

        Does nothing (returns None) while the buffer holds fewer than
        ``batch_size`` transitions.
        """
        c = self.config
        if len(self.buffer) < c.batch_size:
            return None
        obs0, actions, rewards, obs1 = self.buffer.sample(c.batch_size, self.rng)
        n = c.batch_size
        if c.backend == "compiled":
            return self._train_step_compiled(obs0, actions, rewards, obs1)

        # noise adaptation on this minibatch
        mu = self.actor.forward(obs0, check=False)
        probe = self.actor.perturbed_params(self.noise.sigma, self.rng)
        d = action_distance(mu, self.actor.forward(obs0, params=probe, check=False))
        before = self.noise.sigma
        self.noise = adapt_sigma(self.noise, d)
        self.noise_log.append((before, d, self.noise.sigma))

        # gradients for both networks at the current parameters
        y = self.td_targets(rewards, obs1)
        q = self.critic.forward(np.hstack([obs0, actions]), check=False)[:, 0]
        critic_loss = float(np.mean((y - q) ** 2))
        gc, _ = self.critic.backward((-2.0 / n) * (y - q)[:, None])
        critic_grad = self.critic.flat_grad(gc)

        self.critic.forward(np.hstack([obs0, mu]), check=False)
        _, g_in = self.critic.backward(np.full((n, 1), -1.0 / n), param_grads=False)
        ga, _ = self.actor.backward(g_in[:, self.obs_dim:])
        actor_grad = self.actor.flat_grad(ga)

        self.critic_opt.step([self.critic.flat], [critic_grad])
        self.actor_opt.step([self.actor.flat], [actor_grad])
        soft_update(self.critic_target, self.critic, c.tau)
        soft_update(self.actor_target, self.actor, c.tau)
        self.n_updates += 1
        return critic_loss

    def _train_step_compiled(self, obs0, actions, rewards, obs1):
        c = self.config
        probe = self.actor.flat + self.noise.sigma * self.rng.standard_normal(self.actor.flat.size)
        a_step, a_eps = self.actor_opt.next_step_size()
        c_step, c_eps = self.critic_opt.next_step_size()
        loss, d, ok = _kernels.ddpg_update(
            self.actor.flat, self.critic.flat, self.actor_target.flat, self.critic_target.flat,
            self.actor_opt.m[0], self.actor_opt.v[0], self.critic_opt.m[0], self.critic_opt.v[0],
            obs0, actions, rewards, obs1, probe, *self._actor_arch, *self._critic_arch,
            c.gamma, c.tau, self.actor_opt.beta1, self.actor_opt.beta2, a_step, a_eps, c_step, c_eps)
        before = self.noise.sigma
        self.noise = adapt_sigma(self.noise, d)
        self.noise_log.append((before, d, self.noise.sigma))
        if not ok:
            raise FloatingPointError("non-finite gradient in actor or critic update")
        self.actor_opt.t += 1
        self.critic_opt.t += 1
        self.n_updates += 1
        return float(loss)

    # persistence ------------------------------------------------------------

    def _descriptor(self):
        return {
            "kind": "ddpg-agent",
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "actor": self.actor.architecture(),
            "critic": self.critic.architecture(),
        }

    def save_checkpoint(self, path):
        """Write actor, critic, both targets, optimizer and noise state."""
        arrays = [self.actor.flat, self.critic.flat, self.actor_target.flat, self.critic_target.flat]
        arrays += self.actor_opt.state_arrays() + self.critic_opt.state_arrays()
        arrays.append(np.array([self.noise.sigma, self.noise.alpha, self.noise.delta]))
        write_checkpoint(path, self._descriptor(), arrays)

    def load_checkpoint(self, path):
        """Restore state saved by :meth:`save_checkpoint`; nothing changes on error."""
        descriptor, arrays = read_checkpoint(path)
        expected = self._descriptor()
        got = {k: descriptor.get(k) for k in expected}
        if got != expected:
            raise ValueError(f"{path}: architecture mismatch (checkpoint {got}, agent {expected})")
        nets = [self.actor, self.critic, self.actor_target, self.critic_target]
        if len(arrays) != 4 + 3 + 3 + 1 or any(a.shape != net.flat.shape for a, net in zip(arrays, nets)):
            raise ValueError(f"{path}: parameter layout mismatch")
        for a, net in zip(arrays, nets):
            net.set_flat(a)
        self.actor_opt.load_state_arrays(arrays[4:7])
        self.critic_opt.load_state_arrays(arrays[7:10])
        sigma, alpha, delta = arrays[10]
        self.noise = NoiseState(float(sigma), float(alpha), float(delta))
        self.resample_perturbation()
        return self


def run_episode(env, agent, obs, episode_length=None, on_step=None):
    """Run one episode of interaction starting from ``obs``.

    Every ``train_interval`` interactions (once the buffer holds a batch)
    the agent is trained ``train_times`` times, then the exploration
    perturbation is redrawn with the adapted sigma.

    Returns a dict with the per-step rewards, the final observation and
    the number of training bursts/updates performed.
    """
    c = agent.config
    length = c.episode_length if episode_length is None else int(episode_length)
    agent.resample_perturbation()
    rewards, bursts, updates = [], 0, 0
    first_obs = np.array(obs, dtype=np.float64)
    for t in range(1, length + 1):
        action = agent.act(obs)
        next_obs, r, info = env.step(action)
        agent.observe(obs, action, r, next_obs)
        if on_step is not None:
            on_step(t, obs, action, r, next_obs, agent.noise.sigma)
        rewards.append(r)
        obs = next_obs
        if t % c.train_interval == 0 and len(agent.buffer) >= c.batch_size:
            for _ in range(c.train_times):
                agent.train_step()
                updates += 1
            bursts += 1
            agent.resample_perturbation()
    return {"rewards": np.asarray(rewards), "first_obs": first_obs, "last_obs": obs,
            "bursts": bursts, "updates": updates}
