"""Factorized fixation / scale / ratio softmax policy with analytic gradients.

The policy reads a per-cell feature vector built from the state grids and
scores cells with a linear head (optionally behind one tanh hidden layer).
The scale head is conditioned on the chosen cell, the ratio head on the cell
and the chosen scale.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import realize_region, containment_many

POOL_SIZES = (3, 7)


@dataclass(frozen=True)
class Action:
    cell: tuple[int, int]
    scale: int
    ratio: int


class PolicyDivergence(FloatingPointError):
    """Non-finite logits: the parameters have diverged."""


def feature_dim(n_channels: int) -> int:
    return (len(POOL_SIZES) + 1) * (n_channels + 1) + 1


@lru_cache(maxsize=32)
def _band(n: int, k: int) -> np.ndarray:
    """(n, n) 0/1 matrix summing a length-k window centered on each index."""
    idx = np.arange(n)
    return (np.abs(idx[:, None] - idx[None, :]) <= k // 2).astype(float)


def _mean_pool(grid: np.ndarray, k: int) -> np.ndarray:
    """k x k mean filter with zero padding (borders divide by k*k too)."""
    h, w = grid.shape[:2]
    rows = _band(h, k) @ grid.reshape(h, -1)
    cols = _band(w, k) @ rows.reshape(grid.shape)
    return cols / (k * k)


def feature_maps(state) -> np.ndarray:
    """Per-cell features, shape (rows, cols, d).

    Layout: the feature channels and history value of the cell, the same
    values mean-pooled over 3x3 and 7x7 neighbourhoods, then a constant 1.
    """
    stacked = np.concatenate([state.F, state.H[..., None]], axis=-1)
    parts = [stacked] + [_mean_pool(stacked, k) for k in POOL_SIZES]
    parts.append(np.ones(stacked.shape[:2] + (1,)))
    return np.concatenate(parts, axis=-1)


def cell_features(state, i: int, j: int) -> np.ndarray:
    return feature_maps(state)[i, j]


@dataclass
class PolicyParams:
    fixation: np.ndarray
    scale: np.ndarray
    ratio: np.ndarray
    hidden: np.ndarray | None = None

    @classmethod
    def zeros(cls, d: int, n_scales: int, n_ratios: int, n_hidden: int = 0, rng=None) -> "PolicyParams":
        """Zero heads; a hidden layer (if any) gets small random weights."""
        if n_hidden:
            rng = rng if rng is not None else np.random.default_rng(0)
            hidden = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_hidden, d))
            d_head = n_hidden + 1
        else:
            hidden = None
            d_head = d
        return cls(np.zeros(d_head), np.zeros((n_scales, d_head)), np.zeros((n_ratios, d_head + n_scales)), hidden)

    @property
    def feature_dim(self) -> int:
        return self.hidden.shape[1] if self.hidden is not None else self.fixation.shape[0]

    @property
    def n_scales(self) -> int:
        return self.scale.shape[0]

    @property
    def n_ratios(self) -> int:
        return self.ratio.shape[0]

    def arrays(self) -> list[np.ndarray]:
        out = [self.fixation, self.scale, self.ratio]
        if self.hidden is not None:
            out.append(self.hidden)
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vector: np.ndarray) -> "PolicyParams":
        """Same shapes as ``self`` filled from ``vector``."""
        vector = np.asarray(vector, dtype=float)
        out, offset = [], 0
        for a in self.arrays():
            out.append(vector[offset : offset + a.size].reshape(a.shape).copy())
            offset += a.size
        if offset != vector.size:
            raise ValueError(f"expected {offset} values, got {vector.size}")
        return PolicyParams(*out) if len(out) == 4 else PolicyParams(*out, None)

    def copy(self) -> "PolicyParams":
        return self.with_flat(self.flat())

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


def _softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise PolicyDivergence("non-finite policy logits")
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _entropy_logit_grad(p: np.ndarray) -> np.ndarray:
    logp = np.log(p)
    ent = -(p * logp).sum()
    return -p * (logp + ent)


class ActionDistribution:
    """pi(a_f, a_s, a_r | S) = p_f(a_f) * p_s(a_s | a_f) * p_r(a_r | a_f, a_s)."""

    def __init__(self, params: PolicyParams, state):
        self.params = params
        self.grid = np.concatenate([state.F, state.H[..., None]], axis=-1)
        self.grid_dims = self.grid.shape[:2]
        self._psi_cache: dict[int, np.ndarray] = {}
        self._ps_cache: dict[int, np.ndarray] = {}
        self._pr_cache: dict[tuple[int, int], np.ndarray] = {}
        if params.hidden is not None:
            self.phi = feature_maps(state).reshape(-1, params.hidden.shape[1])
            act = np.tanh(self.phi @ params.hidden.T)
            self.psi = np.concatenate([act, np.ones((act.shape[0], 1))], axis=1)
            logits = self.psi @ params.fixation
        else:
            self.phi = self.psi = None
            logits = self._linear_fixation_logits()
        self.p_f_flat = _softmax(logits)

    def _linear_fixation_logits(self) -> np.ndarray:
        # theta . [g, pool3(g), pool7(g), 1] == g.theta0 + pool3(g.theta1) + pool7(g.theta2) + b,
        # which avoids materializing the full feature map
        h, w, c = self.grid.shape
        theta = self.params.fixation
        blocks = theta[: (len(POOL_SIZES) + 1) * c].reshape(len(POOL_SIZES) + 1, c).T
        proj = np.ascontiguousarray((self.grid.reshape(-1, c) @ blocks).T)
        logits = proj[0].reshape(h, w) + theta[-1]
        for n, k in enumerate(POOL_SIZES, start=1):
            logits = logits + (_band(h, k) @ proj[n].reshape(h, w)) @ _band(w, k) / (k * k)
        return logits.ravel()

    def _phi_at(self, idx: int) -> np.ndarray:
        if self.phi is not None:
            return self.phi[idx]
        h, w, c = self.grid.shape
        i, j = divmod(idx, w)
        parts = [self.grid[i, j]]
        for k in POOL_SIZES:
            p = k // 2
            window = self.grid[max(0, i - p) : i + p + 1, max(0, j - p) : j + p + 1]
            parts.append(window.sum(axis=(0, 1)) / (k * k))
        parts.append(np.ones(1))
        return np.concatenate(parts)

    def _psi_at(self, idx: int) -> np.ndarray:
        if self.psi is not None:
            return self.psi[idx]
        cached = self._psi_cache.get(idx)
        if cached is None:
            cached = self._psi_cache[idx] = self._phi_at(idx)
        return cached

    def _expected_psi(self, weights: np.ndarray) -> np.ndarray:
        """sum_c weights[c] * psi(c) without building psi for every cell."""
        if self.psi is not None:
            return weights @ self.psi
        h, w, c = self.grid.shape
        flat = self.grid.reshape(-1, c)
        wmap = weights.reshape(h, w)
        parts = [weights @ flat]
        for k in POOL_SIZES:
            # pooling is symmetric, so pool the weights instead of the features
            pooled = _band(h, k) @ wmap @ _band(w, k) / (k * k)
            parts.append(pooled.ravel() @ flat)
        parts.append(np.array([weights.sum()]))
        return np.concatenate(parts)

    @property
    def p_f(self) -> np.ndarray:
        return self.p_f_flat.reshape(self.grid_dims)

    def _index(self, cell) -> int:
        return cell[0] * self.grid_dims[1] + cell[1]

    def p_s(self, cell) -> np.ndarray:
        idx = self._index(cell)
        p = self._ps_cache.get(idx)
        if p is None:
            p = self._ps_cache[idx] = _softmax(self.params.scale @ self._psi_at(idx))
        return p

    def _ratio_input(self, cell, scale: int) -> np.ndarray:
        onehot = np.zeros(self.params.n_scales)
        onehot[scale] = 1.0
        return np.concatenate([self._psi_at(self._index(cell)), onehot])

    def p_r(self, cell, scale: int) -> np.ndarray:
        key = (self._index(cell), scale)
        p = self._pr_cache.get(key)
        if p is None:
            p = self._pr_cache[key] = _softmax(self.params.ratio @ self._ratio_input(cell, scale))
        return p

    def prob(self, action: Action) -> float:
        return float(
            self.p_f_flat[self._index(action.cell)]
            * self.p_s(action.cell)[action.scale]
            * self.p_r(action.cell, action.scale)[action.ratio]
        )

    def logprob(self, action: Action) -> float:
        return float(
            np.log(self.p_f_flat[self._index(action.cell)])
            + np.log(self.p_s(action.cell)[action.scale])
            + np.log(self.p_r(action.cell, action.scale)[action.ratio])
        )

    def _param_grad(self, action: Action, g_f, g_s, g_r) -> PolicyParams:
        """Chain logit gradients of the three heads back to the parameters."""
        params = self.params
        idx = self._index(action.cell)
        psi_a = self._psi_at(idx)
        ratio_in = self._ratio_input(action.cell, action.scale)
        d_fix = self._expected_psi(g_f)
        d_scale = np.outer(g_s, psi_a)
        d_ratio = np.outer(g_r, ratio_in)
        d_hidden = None
        if params.hidden is not None:
            nh = params.hidden.shape[0]
            act = self.psi[:, :nh]
            # fixation logits depend on every cell's hidden activation
            d_act = np.outer(g_f, params.fixation[:nh]) * (1.0 - act**2)
            d_hidden = d_act.T @ self.phi
            d_psi_a = params.scale[:, :nh].T @ g_s + params.ratio[:, :nh].T @ g_r
            d_hidden += np.outer(d_psi_a * (1.0 - psi_a[:nh] ** 2), self.phi[idx])
        return PolicyParams(d_fix, d_scale, d_ratio, d_hidden)

    def logprob_grad(self, action: Action) -> PolicyParams:
        idx = self._index(action.cell)
        g_f = -self.p_f_flat.copy()
        g_f[idx] += 1.0
        g_s = -self.p_s(action.cell)  # negation copies the cached simplex
        g_s[action.scale] += 1.0
        g_r = -self.p_r(action.cell, action.scale)
        g_r[action.ratio] += 1.0
        return self._param_grad(action, g_f, g_s, g_r)

    def entropy(self, action: Action) -> float:
        """Entropy of the fixation head plus the two conditionals along ``action``."""
        total = 0.0
        for p in (self.p_f_flat, self.p_s(action.cell), self.p_r(action.cell, action.scale)):
            total += float(-(p * np.log(p)).sum())
        return total

    def entropy_grad(self, action: Action) -> PolicyParams:
        return self._param_grad(
            action,
            _entropy_logit_grad(self.p_f_flat),
            _entropy_logit_grad(self.p_s(action.cell)),
            _entropy_logit_grad(self.p_r(action.cell, action.scale)),
        )

    def all_actions(self):
        rows, cols = self.grid_dims
        for i in range(rows):
            for j in range(cols):
                for s in range(self.params.n_scales):
                    for r in range(self.params.n_ratios):
                        yield Action((i, j), s, r)


def action_distribution(params: PolicyParams, state) -> ActionDistribution:
    return ActionDistribution(params, state)


def logprob_grad(params: PolicyParams, state, action: Action) -> PolicyParams:
    return ActionDistribution(params, state).logprob_grad(action)


def _draw(p: np.ndarray, rng) -> int:
    c = np.cumsum(p)
    k = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(k, len(p) - 1)


def greedy_action(dist: ActionDistribution) -> Action:
    """Sequential argmax: cell, then scale given cell, then ratio given both.

    ``np.argmax`` returns the first maximum, i.e. the smallest index (row-major
    for cells).
    """
    idx = int(np.argmax(dist.p_f_flat))
    cell = divmod(idx, dist.grid_dims[1])
    scale = int(np.argmax(dist.p_s(cell)))
    ratio = int(np.argmax(dist.p_r(cell, scale)))
    return Action(cell, scale, ratio)


def _guided_scale(env, state, cell, rng) -> int | None:
    """Scale drawn from the weighted histogram of uncovered objects whose size
    matches each candidate's desired range inside that candidate's footprint."""
    zoom = env.zoom
    mask = env.uncovered_mask(state)
    if not mask.any():
        return None
    scales = env.scales[mask]
    weights = env.weights[mask]
    boxes = env.boxes[mask]
    hist = np.zeros(zoom.n_scales)
    ratio_index = int(np.argmin([abs(np.log(r)) for r in zoom.ratios]))
    for k, (lo, hi) in enumerate(zoom.scale_ranges):
        region = realize_region(cell, k, ratio_index, env.grid_dims, env.image_dims, zoom)
        inside = containment_many(boxes, region.box) >= env.reward_cfg.rho - 1e-12
        in_range = (scales >= lo) & (scales <= hi)
        hist[k] = weights[inside & in_range].sum()
    if hist.sum() <= 0:
        return None
    return _draw(hist, rng)


def sample_action(dist: ActionDistribution, state, env, epsilon: float, rng) -> tuple[Action, float, bool]:
    """Draw an action, guided by the object layout with probability ``epsilon``.

    Returns ``(action, log pi(action), guided)``. The log-probability is always
    that of the policy itself, never of the guided mixture.
    """
    guided = False
    cell = None
    scale = None
    if epsilon > 0 and rng.random() < epsilon:
        density = env.uncovered_density(state)
        if density is not None:
            guided = True
            cell = divmod(_draw(density.ravel(), rng), dist.grid_dims[1])
            scale = _guided_scale(env, state, cell, rng)
    if cell is None:
        cell = divmod(_draw(dist.p_f_flat, rng), dist.grid_dims[1])
    if scale is None:
        scale = _draw(dist.p_s(cell), rng)
    ratio = _draw(dist.p_r(cell, scale), rng)
    action = Action(cell, scale, ratio)
    return action, dist.logprob(action), guided
