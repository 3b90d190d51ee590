"""Actor-critic PPO over the vectorized jump environment."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .env import ACT_DIM, OBS_DIM, JumpEnv
from .rewards import TERM_NAMES

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PpoConfig:
    value_loss_coeff: float = 1.0
    entropy_coeff: float = 0.01
    clip_range: float = 0.2
    num_epochs: int = 5
    mini_batches: int = 4
    learning_rate: float = 1e-3
    lr_min: float = 1e-5
    lr_max: float = 1e-2
    desired_kl: float = 0.01
    discount: float = 0.99
    gae_lambda: float = 0.95
    max_grad_norm: float = 1.0
    steps_per_env: int = 24
    num_envs: int = 256
    iterations: int = 1500
    hidden: tuple = (512, 256, 128)
    init_std: float = 0.5
    checkpoint_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clip_range < 1.0:
            raise ValueError("clip_range must lie in (0, 1)")
        if not (0.0 < self.discount <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("discount and gae_lambda must lie in (0, 1]")
        if not self.lr_min <= self.learning_rate <= self.lr_max:
            raise ValueError("learning_rate outside [lr_min, lr_max]")
        for name in ("num_epochs", "mini_batches", "steps_per_env", "num_envs", "iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PpoConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown ppo keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(h) for h in d["hidden"])
        return cls(**d)


def _mlp(sizes) -> nn.Sequential:
    layers = []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        layers += [nn.Linear(a, b), nn.ELU()]
    layers.append(nn.Linear(sizes[-2], sizes[-1]))
    return nn.Sequential(*layers)


class RunningNorm(nn.Module):
    """Running mean/variance observation normalizer (parallel Welford update)."""

    def __init__(self, dim: int, eps: float = 1e-2, clip: float = 10.0):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("var", torch.ones(dim, dtype=torch.float64))
        self.register_buffer("count", torch.tensor(0.0, dtype=torch.float64))
        self.eps = eps
        self.clip = clip

    @torch.no_grad()
    def update(self, x: torch.Tensor) -> None:
        x = x.reshape(-1, x.shape[-1]).double()
        n = x.shape[0]
        m, v = x.mean(0), x.var(0, unbiased=False)
        tot = self.count + n
        delta = m - self.mean
        self.mean += delta * n / tot
        self.var = (self.var * self.count + v * n + delta**2 * self.count * n / tot) / tot
        self.count = tot

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = (x - self.mean.float()) / torch.sqrt(self.var.float() + self.eps)
        return y.clamp(-self.clip, self.clip)


class ActorCritic(nn.Module):
    def __init__(self, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM, hidden=(512, 256, 128), init_std: float = 1.0):
        super().__init__()
        self.obs_dim, self.act_dim, self.hidden = obs_dim, act_dim, tuple(hidden)
        self.norm = RunningNorm(obs_dim)
        self.actor = _mlp((obs_dim, *hidden, act_dim))
        self.critic = _mlp((obs_dim, *hidden, 1))
        self.log_std = nn.Parameter(torch.full((act_dim,), math.log(init_std)))

    def distribution(self, obs: torch.Tensor) -> torch.distributions.Normal:
        mean = self.actor(self.norm(obs))
        return torch.distributions.Normal(mean, self.log_std.exp().expand_as(mean))

    def value(self, obs: torch.Tensor) -> torch.Tensor:
        return self.critic(self.norm(obs)).squeeze(-1)

    @torch.no_grad()
    def act(self, obs, deterministic: bool = True) -> np.ndarray:
        obs = torch.as_tensor(np.asarray(obs), dtype=torch.float32)
        if deterministic:
            return self.actor(self.norm(obs)).numpy().astype(float)
        return self.distribution(obs).sample().numpy().astype(float)


def gae(rewards, values, bootstrap_value, dones, gamma: float, lam: float):
    """Generalized advantage estimation over a (T, ...) rollout.

    ``dones[t]`` marks that the episode ended after step t, so nothing is
    bootstrapped across it. Works on numpy arrays and torch tensors.
    """
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError(f"length mismatch: rewards {len(rewards)}, values {len(values)}, dones {len(dones)}")
    lib = torch if isinstance(rewards, torch.Tensor) else np
    adv = lib.zeros_like(rewards)
    last = 0.0
    for t in reversed(range(len(rewards))):
        nxt = bootstrap_value if t == len(rewards) - 1 else values[t + 1]
        live = 1.0 - dones[t] * 1.0
        delta = rewards[t] + gamma * nxt * live - values[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + values


def normalize_advantages(adv: torch.Tensor) -> torch.Tensor:
    return (adv - adv.mean()) / (adv.std(unbiased=False) + 1e-8)


def ppo_loss(model: ActorCritic, obs, actions, old_logp, advantages, returns, cfg: PpoConfig):
    """Total loss and its pieces for one minibatch."""
    dist = model.distribution(obs)
    logp = dist.log_prob(actions).sum(-1)
    ratio = torch.exp(logp - old_logp)
    surr = torch.min(ratio * advantages, ratio.clamp(1 - cfg.clip_range, 1 + cfg.clip_range) * advantages)
    policy_loss = -surr.mean()
    value_loss = (model.value(obs) - returns).pow(2).mean()
    entropy = dist.entropy().sum(-1).mean()
    loss = policy_loss + cfg.value_loss_coeff * value_loss - cfg.entropy_coeff * entropy
    clip_frac = ((ratio - 1).abs() > cfg.clip_range).float().mean()
    return loss, policy_loss, value_loss, entropy, clip_frac, dist


class NonFiniteLoss(FloatingPointError):
    pass


def ppo_update(model: ActorCritic, optimizer: torch.optim.Optimizer, batch: dict, cfg: PpoConfig,
               generator: torch.Generator | None = None) -> dict:
    """Several epochs of clipped-surrogate minibatch updates.

    ``batch`` holds flat tensors obs, actions, logp, mu, sigma, advantages,
    returns. Afterwards the learning rate in ``optimizer`` is halved or
    doubled when the KL between the old and updated Gaussians over the whole
    batch leaves [desired_kl / 2, 2 desired_kl].
    """
    n = batch["obs"].shape[0]
    adv = normalize_advantages(batch["advantages"])
    mb = n // cfg.mini_batches
    stats = {k: 0.0 for k in ("policy_loss", "value_loss", "entropy", "clip_fraction")}
    count = 0
    for _ in range(cfg.num_epochs):
        perm = torch.randperm(n, generator=generator)
        for i in range(cfg.mini_batches):
            idx = perm[i * mb:(i + 1) * mb]
            loss, pl, vl, ent, cf, _ = ppo_loss(
                model, batch["obs"][idx], batch["actions"][idx], batch["logp"][idx], adv[idx], batch["returns"][idx], cfg)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite PPO loss (policy {pl.item()}, value {vl.item()}, entropy {ent.item()})")
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            optimizer.step()
            for k, v in zip(stats, (pl, vl, ent, cf)):
                stats[k] += v.item()
            count += 1
    stats = {k: v / count for k, v in stats.items()}
    with torch.no_grad():
        dist = model.distribution(batch["obs"])
        kl = gaussian_kl(batch["mu"], batch["sigma"], dist.mean, dist.stddev).mean().item()
    lr = optimizer.param_groups[0]["lr"]
    if kl > 2 * cfg.desired_kl:
        lr = max(cfg.lr_min, lr / 2)
    elif kl < cfg.desired_kl / 2:
        lr = min(cfg.lr_max, lr * 2)
    for g in optimizer.param_groups:
        g["lr"] = lr
    stats["kl"] = kl
    stats["learning_rate"] = lr
    return stats


def gaussian_kl(mu0, s0, mu1, s1) -> torch.Tensor:
    """KL(N0 || N1) for diagonal Gaussians, summed over the last axis."""
    return (torch.log(s1 / s0) + (s0**2 + (mu0 - mu1) ** 2) / (2 * s1**2) - 0.5).sum(-1)


def config_hash(*parts) -> str:
    """Short stable hash of dataclasses / dicts / scalars."""
    def plain(p):
        return asdict(p) if hasattr(p, "__dataclass_fields__") else p
    blob = json.dumps([plain(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, model: ActorCritic, cfg_hash: str, iteration: int, extra: dict | None = None) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "obs_dim": model.obs_dim,
            "act_dim": model.act_dim,
            "hidden": list(model.hidden),
            "state_dict": model.state_dict(),
            "config_hash": cfg_hash,
            "iteration": iteration,
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[ActorCritic, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    model = ActorCritic(blob["obs_dim"], blob["act_dim"], blob["hidden"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob


METRIC_FIELDS = (
    ["iteration", "mean_reward"] + [f"term_{t}" for t in TERM_NAMES]
    + ["episode_length", "success_fraction", "episodes", "policy_loss", "value_loss", "entropy", "kl",
       "clip_fraction", "learning_rate", "action_std"]
)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    torch.set_num_threads(int(os.environ.get("JUMPLAND_THREADS", "1")))
    return torch.Generator().manual_seed(seed)


def train(env: JumpEnv, cfg: PpoConfig, out_dir, cfg_hash: str = "", progress=None) -> ActorCritic:
    """Run PPO on ``env`` and write metrics.csv plus checkpoints into ``out_dir``.

    The env must have ``cfg.num_envs`` environments. Episodes cut by the time
    limit are bootstrapped with the critic value of their final observation.
    """
    if env.n != cfg.num_envs:
        raise ValueError(f"env has {env.n} environments, config expects {cfg.num_envs}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen = seed_everything(cfg.seed)
    model = ActorCritic(hidden=cfg.hidden, init_std=cfg.init_std)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    T, B = cfg.steps_per_env, env.n
    obs = torch.as_tensor(env.observe(), dtype=torch.float32)

    with open(out / "metrics.csv", "w", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash} seed={cfg.seed}\n")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
        for it in range(1, cfg.iterations + 1):
            buf = {k: [] for k in ("obs", "actions", "logp", "mu", "sigma", "values", "rewards", "dones")}
            term_sums = {t: 0.0 for t in TERM_NAMES}
            ep_len, ep_ok = [], []
            for _ in range(T):
                with torch.no_grad():
                    dist = model.distribution(obs)
                    act = _sample(dist, gen)
                    logp = dist.log_prob(act).sum(-1)
                    val = model.value(obs)
                res = env.step(act.numpy().astype(float))
                next_obs = torch.as_tensor(res.obs, dtype=torch.float32)
                rew = torch.as_tensor(res.reward, dtype=torch.float32)
                if res.timeout.any():
                    # the reset obs replaced the true final one; the critic at the
                    # reset state is a cheap stand-in for the time-limit bootstrap
                    with torch.no_grad():
                        rew = rew + cfg.discount * model.value(next_obs) * torch.as_tensor(res.timeout, dtype=torch.float32)
                for k, v in zip(buf, (obs, act, logp, dist.mean, dist.stddev, val, rew,
                                      torch.as_tensor(res.done, dtype=torch.float32))):
                    buf[k].append(v)
                for t in TERM_NAMES:
                    term_sums[t] += float(np.mean(res.terms[t]))
                ended = np.flatnonzero(res.done)
                ep_len.extend(res.info["episode_steps"][ended].tolist())
                ep_ok.extend(res.timeout[ended].tolist())
                obs = next_obs
            with torch.no_grad():
                boot = model.value(obs)
            roll = {k: torch.stack(v) for k, v in buf.items()}
            adv, ret = gae(roll["rewards"], roll["values"], boot, roll["dones"], cfg.discount, cfg.gae_lambda)
            batch = {k: roll[k].reshape(T * B, -1) for k in ("obs", "actions", "mu", "sigma")}
            batch.update(logp=roll["logp"].reshape(-1), advantages=adv.reshape(-1), returns=ret.reshape(-1))
            stats = ppo_update(model, opt, batch, cfg, gen)
            # refreshed after the update so stored log-probs stay consistent
            model.norm.update(batch["obs"])

            row = {"iteration": it, "mean_reward": float(sum(term_sums.values()) / T)}
            row.update({f"term_{t}": term_sums[t] / T for t in TERM_NAMES})
            row["episode_length"] = float(np.mean(ep_len)) if ep_len else float("nan")
            row["success_fraction"] = float(np.mean(ep_ok)) if ep_ok else float("nan")
            row["episodes"] = len(ep_len)
            row.update(stats)
            row["action_std"] = model.log_std.detach().exp().mean().item()
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
            fh.flush()
            if progress is not None:
                progress(row)
            if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
                save_checkpoint(out / f"model_{it}.pt", model, cfg_hash, it)
    save_checkpoint(out / "model_final.pt", model, cfg_hash, cfg.iterations)
    return model


def _sample(dist: torch.distributions.Normal, gen: torch.Generator) -> torch.Tensor:
    eps = torch.randn(dist.mean.shape, generator=gen)
    return dist.mean + dist.stddev * eps
