"""REINFORCE training of the zoom policy."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod
from .env import DEFAULT_GRID, N_CHANNELS, Episode, RewardConfig, ZoomEnv, run_episode
from .geometry import ZoomSpec
from .policy import PolicyParams, feature_dim
from .scene import Scene

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """The gradient estimate stopped being finite."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1.0
    iterations: int = 2000
    gamma: float = 1.0
    baseline_decay: float = 0.9
    entropy_coef: float = 0.0
    guidance_start: float = 0.5
    guidance_end: float = 0.0
    guidance_fraction: float = 0.5
    include_guided: bool = False
    clip_norm: float = 10.0
    T: int = 7
    n_hidden: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1 or self.T < 1 or self.iterations < 0:
            raise ValueError("batch_size and T must be >= 1, iterations >= 0")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ValueError("baseline_decay must lie in [0, 1)")
        for eps in (self.guidance_start, self.guidance_end):
            if not 0.0 <= eps <= 1.0:
                raise ValueError("guidance must lie in [0, 1]")

    def guidance(self, iteration: int) -> float:
        """Linear anneal from ``guidance_start`` to ``guidance_end`` over the first
        ``guidance_fraction`` of training, constant afterwards."""
        span = self.guidance_fraction * self.iterations
        if span <= 0 or iteration >= span:
            return self.guidance_end
        frac = iteration / span
        return self.guidance_start + (self.guidance_end - self.guidance_start) * frac


@dataclass
class UpdateStats:
    grad_norm: float
    clipped: bool
    baseline: float
    n_steps: int
    mean_return: float
    mean_reward: float


@dataclass
class TrainReport:
    mean_return: list[float] = field(default_factory=list)
    mean_reward: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    final_params: PolicyParams | None = None

    def __len__(self) -> int:
        return len(self.mean_return)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["iteration", "mean_return", "mean_reward", "grad_norm"])
            for k, (ret, rew, gn) in enumerate(zip(self.mean_return, self.mean_reward, self.grad_norm)):
                writer.writerow([k, f"{ret:.6f}", f"{rew:.6f}", f"{gn:.6f}"])


@dataclass
class TrainedPolicy:
    params: PolicyParams
    grid_dims: tuple[int, int] = DEFAULT_GRID
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)

    @property
    def zoom(self) -> ZoomSpec:
        return self.reward_cfg.zoom

    def env(self, scene: Scene, weights=None) -> ZoomEnv:
        return ZoomEnv(scene, self.grid_dims, self.reward_cfg, weights)

    def greedy_episode(self, scene: Scene, T: int = 7, weights=None) -> Episode:
        return run_episode(self.env(scene, weights), self.params, "greedy", T)

    def regions(self, scene: Scene, k: int = 7):
        """The first ``k`` greedy regions (fewer if the episode ends early)."""
        if k <= 0:
            return []
        return self.greedy_episode(scene, k).regions


def init_policy(grid_dims=DEFAULT_GRID, reward_cfg: RewardConfig | None = None, n_hidden: int = 0,
                seed: int = 0) -> TrainedPolicy:
    reward_cfg = reward_cfg or RewardConfig()
    zoom = reward_cfg.zoom
    params = PolicyParams.zeros(feature_dim(N_CHANNELS), zoom.n_scales, zoom.n_ratios, n_hidden,
                                rngmod.stream(seed, "init"))
    return TrainedPolicy(params, tuple(grid_dims), reward_cfg)


def returns_to_go(rewards: Sequence[float], gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def reinforce_update(params: PolicyParams, episodes: Sequence[Episode], cfg: TrainConfig,
                     baseline: float = 0.0) -> tuple[PolicyParams, UpdateStats]:
    """One ascent step on the mean of grad log pi(A_t|S_t) * (G_t - b).

    Steps drawn by guidance are skipped unless ``cfg.include_guided``. The
    scalar baseline is refreshed from the eligible returns after the step.
    """
    total = np.zeros(params.size)
    ent_total = np.zeros(params.size)
    returns = []
    rewards = []
    for ep in episodes:
        G = returns_to_go(ep.rewards, cfg.gamma)
        rewards.extend(ep.rewards)
        for step, g_t in zip(ep.steps, G):
            if step.guided and not cfg.include_guided:
                continue
            if step.grad is None:
                raise ValueError("episode steps carry no log-probability gradients")
            total += step.grad * (g_t - baseline)
            if cfg.entropy_coef and step.entropy_grad is not None:
                ent_total += step.entropy_grad
            returns.append(g_t)
    n = len(returns)
    mean_return = float(np.mean([ep.total_return for ep in episodes])) if episodes else 0.0
    mean_reward = float(np.mean(rewards)) if rewards else 0.0
    if n == 0:
        return params.copy(), UpdateStats(0.0, False, baseline, 0, mean_return, mean_reward)
    grad = total / n
    if cfg.entropy_coef:
        grad = grad + cfg.entropy_coef * ent_total / n
    norm = float(np.linalg.norm(grad))
    if not np.isfinite(norm):
        raise TrainingDiverged(f"non-finite policy gradient (lr={cfg.lr}); lower the learning rate")
    clipped = norm > cfg.clip_norm
    if clipped:
        log.debug("gradient norm %.3f clipped to %.1f", norm, cfg.clip_norm)
        grad = grad * (cfg.clip_norm / norm)
    new_params = params.with_flat(params.flat() + cfg.lr * grad)
    new_baseline = cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * float(np.mean(returns))
    return new_params, UpdateStats(norm, clipped, new_baseline, n, mean_return, mean_reward)


def train(scenes: Sequence[Scene], cfg: TrainConfig, init: TrainedPolicy | None = None,
          reward_cfg: RewardConfig | None = None, grid_dims=DEFAULT_GRID,
          weights: Sequence[np.ndarray] | None = None) -> tuple[TrainedPolicy, TrainReport]:
    """Sample scenes with replacement, roll out episodes, apply REINFORCE updates.

    ``weights`` optionally replaces the per-object weights of each scene.
    """
    if not scenes:
        raise ValueError("no scenes")
    if init is None:
        policy = init_policy(grid_dims, reward_cfg, cfg.n_hidden, cfg.seed)
    else:
        policy = TrainedPolicy(init.params.copy(), init.grid_dims, init.reward_cfg)
    envs = [
        policy.env(scene, None if weights is None else weights[k]) for k, scene in enumerate(scenes)
    ]
    pick = rngmod.stream(cfg.seed, "train", "scenes")
    rollout = rngmod.stream(cfg.seed, "train", "rollout")
    report = TrainReport()
    params = policy.params
    baseline = 0.0
    clipped = 0
    for it in range(cfg.iterations):
        eps = cfg.guidance(it)
        batch = pick.integers(0, len(envs), size=cfg.batch_size)
        episodes = [
            run_episode(envs[k], params, "sample", cfg.T, eps, rollout, with_grad=True,
                        entropy=bool(cfg.entropy_coef))
            for k in batch
        ]
        params, stats = reinforce_update(params, episodes, cfg, baseline)
        baseline = stats.baseline
        clipped += stats.clipped
        report.mean_return.append(stats.mean_return)
        report.mean_reward.append(stats.mean_reward)
        report.grad_norm.append(stats.grad_norm)
    if clipped:
        log.info("gradient clipping fired on %d of %d iterations", clipped, cfg.iterations)
    policy = TrainedPolicy(params, policy.grid_dims, policy.reward_cfg)
    report.final_params = params
    return policy, report


def evaluate_policy_reward(policy: TrainedPolicy, scenes: Sequence[Scene], T: int = 7, weights=None) -> dict:
    """Mean and standard deviation of the greedy episode return over ``scenes``."""
    if not scenes:
        raise ValueError("no scenes")
    values = np.array(
        [policy.greedy_episode(s, T, None if weights is None else weights[k]).total_return
         for k, s in enumerate(scenes)]
    )
    # sort before reducing so the result does not depend on scene order
    values = np.sort(values)
    return {"mean": float(values.sum() / len(values)), "std": float(np.sqrt(((values - values.mean()) ** 2).mean())),
            "n": int(len(values))}


def zoom_to_dict(zoom: ZoomSpec) -> dict:
    return {
        "scales": list(zoom.scales),
        "ratios": list(zoom.ratios),
        "scale_ranges": [[lo, "inf" if np.isinf(hi) else hi] for lo, hi in zoom.scale_ranges],
        "target_short_edge": zoom.target_short_edge,
    }


def zoom_from_dict(doc: dict) -> ZoomSpec:
    ranges = tuple((float(lo), float(hi)) for lo, hi in doc.get("scale_ranges", ZoomSpec().scale_ranges))
    return ZoomSpec(
        scales=tuple(doc.get("scales", ZoomSpec().scales)),
        ratios=tuple(doc.get("ratios", ZoomSpec().ratios)),
        scale_ranges=ranges,
        target_short_edge=float(doc.get("target_short_edge", ZoomSpec().target_short_edge)),
    )


def save_checkpoint(policy: TrainedPolicy, path) -> None:
    p = policy.params
    rc = policy.reward_cfg
    doc = {
        "version": CHECKPOINT_VERSION,
        "grid_dims": list(policy.grid_dims),
        "zoom": zoom_to_dict(rc.zoom),
        "reward": {"beta": rc.beta, "kappa": rc.kappa, "rho": rc.rho},
        "params": {
            "fixation": p.fixation.tolist(),
            "scale": p.scale.tolist(),
            "ratio": p.ratio.tolist(),
            "hidden": None if p.hidden is None else p.hidden.tolist(),
        },
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path, grid_dims=None, zoom: ZoomSpec | None = None) -> TrainedPolicy:
    """Read a checkpoint; ``grid_dims`` / ``zoom``, when given, must match it."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from None
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    ck_grid = tuple(int(v) for v in doc["grid_dims"])
    ck_zoom = zoom_from_dict(doc["zoom"])
    if grid_dims is not None and tuple(grid_dims) != ck_grid:
        raise CheckpointError(f"{path}: grid {ck_grid} does not match expected {tuple(grid_dims)}")
    if zoom is not None and (zoom.n_scales, zoom.n_ratios) != (ck_zoom.n_scales, ck_zoom.n_ratios):
        raise CheckpointError(f"{path}: zoom candidates do not match the checkpoint")
    raw = doc["params"]
    hidden = None if raw.get("hidden") is None else np.array(raw["hidden"], dtype=float)
    params = PolicyParams(np.array(raw["fixation"], dtype=float), np.array(raw["scale"], dtype=float),
                          np.array(raw["ratio"], dtype=float), hidden)
    n_s, n_r = ck_zoom.n_scales, ck_zoom.n_ratios
    d_head = params.fixation.shape[0]
    d_in = feature_dim(N_CHANNELS)
    if (params.scale.shape != (n_s, d_head) or params.ratio.shape != (n_r, d_head + n_s)
            or (hidden is None and d_head != d_in)
            or (hidden is not None and hidden.shape != (d_head - 1, d_in))):
        raise CheckpointError(f"{path}: parameter shapes do not match the declared dimensions")
    rew = doc.get("reward", {})
    reward_cfg = RewardConfig(rew.get("beta", 1.5), rew.get("kappa", 0.1), rew.get("rho", 1.0), ck_zoom)
    return TrainedPolicy(params, ck_grid, reward_cfg)


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
