"""The region-generation MDP: state, transitions, weighted-recall reward, rollouts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    GridRect,
    Region,
    ZoomSpec,
    cell_of_point,
    containment_many,
    map_region_to_grid,
    realize_region,
)
from .policy import Action, ActionDistribution, PolicyParams, greedy_action, sample_action
from .scene import Scene

N_CHANNELS = 6
DEFAULT_GRID = (32, 32)


@dataclass(frozen=True)
class RewardConfig:
    beta: float = 1.5
    kappa: float = 0.1
    rho: float = 1.0
    zoom: ZoomSpec = field(default_factory=ZoomSpec)

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError("kappa must lie in [0, 1)")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")


@dataclass
class State:
    F: np.ndarray
    H: np.ndarray
    covered: frozenset = frozenset()
    t: int = 0


@dataclass
class Step:
    t: int
    action: Action
    logprob: float
    reward: float
    region: Region
    guided: bool = False
    newly_covered: frozenset = frozenset()
    grad: np.ndarray | None = None
    entropy_grad: np.ndarray | None = None


@dataclass
class Episode:
    scene_id: str
    steps: list[Step] = field(default_factory=list)

    @property
    def rewards(self) -> list[float]:
        return [s.reward for s in self.steps]

    @property
    def total_return(self) -> float:
        return float(sum(self.rewards))

    @property
    def regions(self) -> list[Region]:
        return [s.region for s in self.steps]

    def __len__(self) -> int:
        return len(self.steps)


def scale_match(s: float, scale_index: int, cfg: RewardConfig) -> float:
    """Consistency between an object scale and a region's desired range.

    1 inside the range; otherwise ``max(0, 2 - exp(beta * ds))`` where ``ds``
    is the relative distance to the violated bound.
    """
    lo, hi = cfg.zoom.scale_ranges[scale_index]
    if lo <= s <= hi:
        return 1.0
    bound = lo if s < lo else hi
    ds = abs(s - bound) / bound
    return max(0.0, 2.0 - math.exp(cfg.beta * ds))


def scale_match_many(scales: np.ndarray, scale_index: int, cfg: RewardConfig) -> np.ndarray:
    lo, hi = cfg.zoom.scale_ranges[scale_index]
    out = np.ones_like(scales, dtype=float)
    below = scales < lo
    above = scales > hi
    if below.any():
        out[below] = np.maximum(0.0, 2.0 - np.exp(cfg.beta * (lo - scales[below]) / lo))
    if above.any():
        out[above] = np.maximum(0.0, 2.0 - np.exp(cfg.beta * (scales[above] - hi) / hi))
    return out


def base_features(scene: Scene, grid_dims, zoom: ZoomSpec, weights: np.ndarray | None = None) -> np.ndarray:
    """Coarse object statistics per cell, each channel scaled to [0, 1].

    Channels: object count, summed object weight, mean log scale, and one
    count per desired scale range. Objects are binned by their center.
    """
    rows, cols = grid_dims
    F = np.zeros((rows, cols, N_CHANNELS))
    if not scene.objects:
        return F
    scales = scene.scales()
    weights = scene.weights() if weights is None else np.asarray(weights, dtype=float)
    log_sum = np.zeros((rows, cols))
    # canonical order so float sums do not depend on annotation order
    order = sorted(range(len(scene.objects)), key=lambda k: (scene.objects[k].box, scene.objects[k].category, weights[k]))
    for k in order:
        obj = scene.objects[k]
        i, j = cell_of_point(*obj.center, grid_dims, scene.image_dims)
        F[i, j, 0] += 1
        F[i, j, 1] += weights[k]
        # sub-pixel objects would give negative logs; clamp at 0
        log_sum[i, j] += max(math.log(scales[k]), 0.0)
        for r, (lo, hi) in enumerate(zoom.scale_ranges[:3]):
            if lo <= scales[k] <= hi:
                F[i, j, 3 + r] += 1
    occupied = F[..., 0] > 0
    F[..., 2][occupied] = log_sum[occupied] / F[..., 0][occupied]
    peak = F.reshape(-1, N_CHANNELS).max(axis=0)
    nz = peak > 0
    F[..., nz] /= peak[nz]
    return F


def init_state(scene: Scene, grid_dims=DEFAULT_GRID, zoom: ZoomSpec | None = None, weights=None) -> State:
    F = base_features(scene, grid_dims, zoom or ZoomSpec(), weights)
    return State(F, np.zeros(grid_dims), frozenset(), 0)


def update_history(H: np.ndarray, z: GridRect) -> np.ndarray:
    out = H.copy()
    out[z.rows, z.cols] = 1.0
    return out


def update_feature(F: np.ndarray, z: GridRect, kappa: float) -> np.ndarray:
    out = F.copy()
    out[z.rows, z.cols] *= kappa
    return out


class ZoomEnv:
    """One scene prepared for rollouts: cached object arrays plus configuration.

    ``weights`` overrides the default inverse-scale object weights (used by
    collaborative training); they drive both the reward and the weight channel
    of the state features.
    """

    def __init__(self, scene: Scene, grid_dims=DEFAULT_GRID, reward_cfg: RewardConfig | None = None,
                 weights=None):
        self.scene = scene
        self.grid_dims = tuple(grid_dims)
        self.reward_cfg = reward_cfg or RewardConfig()
        self.zoom = self.reward_cfg.zoom
        self.image_dims = scene.image_dims
        self.boxes = scene.boxes()
        self.scales = scene.scales()
        self.ids = np.array(scene.ids(), dtype=int)
        self.weights = scene.weights() if weights is None else np.asarray(weights, dtype=float)
        if self.weights.shape != self.scales.shape:
            raise ValueError("one weight per object is required")
        self.cells = np.array(
            [cell_of_point(*o.center, self.grid_dims, self.image_dims) for o in scene.objects], dtype=int
        ).reshape(-1, 2)
        self._index = {int(i): k for k, i in enumerate(self.ids)}
        self._F0 = base_features(scene, self.grid_dims, self.zoom, self.weights)

    def reset(self) -> State:
        return State(self._F0.copy(), np.zeros(self.grid_dims), frozenset(), 0)

    def uncovered_mask(self, state: State) -> np.ndarray:
        mask = np.ones(len(self.ids), dtype=bool)
        for oid in state.covered:
            mask[self._index[oid]] = False
        return mask

    def remaining_weight(self, state: State) -> float:
        return float(self.weights[self.uncovered_mask(state)].sum())

    def uncovered_density(self, state: State) -> np.ndarray | None:
        """Uncovered object weight per cell, normalized; None when nothing is left."""
        mask = self.uncovered_mask(state)
        if not mask.any():
            return None
        density = np.zeros(self.grid_dims)
        np.add.at(density, (self.cells[mask, 0], self.cells[mask, 1]), self.weights[mask])
        total = density.sum()
        if total <= 0:
            # zero-weight leftovers: fall back to plain object counts
            np.add.at(density, (self.cells[mask, 0], self.cells[mask, 1]), 1.0)
            total = density.sum()
        return density / total

    def realize(self, action: Action) -> Region:
        return realize_region(action.cell, action.scale, action.ratio, self.grid_dims, self.image_dims, self.zoom)

    def reward(self, state: State, region: Region, scale_index: int) -> tuple[float, frozenset]:
        if len(self.ids) == 0:
            return 0.0, frozenset()
        uncovered = self.uncovered_mask(state)
        denom = float(self.weights[uncovered].sum())
        enclosed = (containment_many(self.boxes, region.box) >= self.reward_cfg.rho - 1e-12) & uncovered
        newly = frozenset(int(i) for i in self.ids[enclosed])
        if denom <= 0:
            return 0.0, newly
        match = scale_match_many(self.scales[enclosed], scale_index, self.reward_cfg)
        num = float((match * self.weights[enclosed]).sum())
        return num / denom, newly

    def transition(self, state: State, region: Region, newly: frozenset) -> State:
        z = map_region_to_grid(region, self.grid_dims, self.image_dims)
        return State(
            update_feature(state.F, z, self.reward_cfg.kappa),
            update_history(state.H, z),
            state.covered | newly,
            state.t + 1,
        )

    def done(self, state: State) -> bool:
        """All objects covered, or nothing with positive weight left to earn."""
        if len(state.covered) == len(self.ids):
            return True
        return self.remaining_weight(state) <= 0


def reward(scene: Scene, state: State, region: Region, scale_index: int, cfg: RewardConfig | None = None,
           weights=None, grid_dims=DEFAULT_GRID) -> tuple[float, frozenset]:
    """Weighted recall of not-yet-covered objects enclosed by ``region``."""
    return ZoomEnv(scene, grid_dims, cfg, weights).reward(state, region, scale_index)


def run_episode(env: ZoomEnv, params: PolicyParams, mode: str = "greedy", T: int = 7, guidance: float = 0.0,
                rng=None, with_grad: bool = False, entropy: bool = False) -> Episode:
    """Roll out up to ``T`` regions on ``env``.

    ``mode`` is ``"greedy"`` (sequential argmax) or ``"sample"``. With
    ``with_grad`` each step stores the flat gradient of its log-probability.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    state = env.reset()
    episode = Episode(env.scene.source_id)
    for t in range(T):
        if env.done(state):
            break
        dist = ActionDistribution(params, state)
        if mode == "greedy":
            action = greedy_action(dist)
            logp, guided = dist.logprob(action), False
        else:
            action, logp, guided = sample_action(dist, state, env, guidance, rng)
        region = env.realize(action)
        r, newly = env.reward(state, region, action.scale)
        step = Step(t, action, logp, r, region, guided, newly)
        if with_grad:
            step.grad = dist.logprob_grad(action).flat()
            if entropy:
                step.entropy_grad = dist.entropy_grad(action).flat()
        episode.steps.append(step)
        state = env.transition(state, region, newly)
    return episode
