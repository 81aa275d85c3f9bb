"""Hidden-state statistics and massive-activation detection.

A dimension counts as massive when its mean absolute activation exceeds
kappa times the median dimension's, and it does so on at least a rho
fraction of tokens. The criterion is purely relative, so it is invariant
under rescaling all activations.

The profile helpers feed the workbench's layer / timestep / condition /
scaling-factor reports: layer profiles show where big dimensions sit per
block, timestep sweeps how their magnitude moves with t, condition scans
whether the conditioning id matters, and alpha profiles read the residual
scaling vectors that cause the pattern in the first place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dit import DiTWeights, forward_batch, regress_modulation, timestep_embedding
from .diffusion import NoiseSchedule

DEFAULT_KAPPA = 30.0
DEFAULT_RHO = 0.9
DEFAULT_KAPPA_TOKEN = 10.0


@dataclass(frozen=True)
class ActivationStats:
    """Per-dimension magnitude summary of a (tokens, C) state."""

    mean_abs: np.ndarray        # (C,) mean over tokens of |z|
    max_abs: np.ndarray         # (C,)
    token_coverage: np.ndarray  # (C,) fraction of tokens clearly above median
    median_of_means: float
    top1: float
    top2: float
    top3: float


def compute_stats(state: np.ndarray,
                  kappa_token: float = DEFAULT_KAPPA_TOKEN) -> ActivationStats:
    """Magnitude statistics of one state; rows of stacked draws may be
    concatenated along the token axis before calling."""
    state = np.asarray(state, dtype=np.float64)
    if state.ndim != 2 or state.shape[0] < 1:
        raise ValueError(f"compute_stats: expected (tokens, C), got {state.shape}")
    mag = np.abs(state)
    mean_abs = mag.mean(axis=0)
    max_abs = mag.max(axis=0)
    median_all = float(np.median(mag))
    coverage = (mag > kappa_token * median_all).mean(axis=0)
    top = np.sort(mean_abs)[::-1]
    return ActivationStats(
        mean_abs=mean_abs,
        max_abs=max_abs,
        token_coverage=coverage,
        median_of_means=float(np.median(mean_abs)),
        top1=float(top[0]),
        top2=float(top[1]) if top.size > 1 else float(top[0]),
        top3=float(top[2]) if top.size > 2 else float(top[-1]),
    )


def detect_ma(stats: ActivationStats, kappa: float = DEFAULT_KAPPA,
              rho: float = DEFAULT_RHO) -> set[int]:
    """Dimensions whose mean magnitude dwarfs the median and that light up
    on at least a rho fraction of tokens."""
    if kappa <= 1:
        raise ValueError("kappa must be > 1")
    if not 0 < rho <= 1:
        raise ValueError("rho must be in (0, 1]")
    picked = (stats.mean_abs > kappa * stats.median_of_means) \
        & (stats.token_coverage >= rho)
    return set(int(d) for d in np.nonzero(picked)[0])


@dataclass(frozen=True)
class MAProfile:
    """Detected massive-activation dimensions per block, with provenance."""

    dims_per_block: tuple[frozenset[int], ...]   # index k-1 = block k
    kappa: float
    rho: float
    timestep: float
    condition_ids: tuple[int, ...]
    sample_count: int

    def dims_at(self, depth: int) -> frozenset[int]:
        """Dimension set at a 1-based block depth."""
        if not 1 <= depth <= len(self.dims_per_block):
            raise ValueError(
                f"depth {depth} outside [1, {len(self.dims_per_block)}]")
        return self.dims_per_block[depth - 1]

    def first_nonempty_depth(self) -> int:
        for k, dims in enumerate(self.dims_per_block, start=1):
            if dims:
                return k
        raise ValueError("profile has no detected dimensions at any block")


def _analysis_inputs(config, schedule: NoiseSchedule, t: float, draws: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Synthetic z_t draws for analysis passes: unit-Gaussian data proxy
    plus schedule noise, (draws, tokens, data_dim)."""
    shape = (draws, config.tokens, config.data_dim)
    return rng.standard_normal(shape) + schedule.sigma(t) * rng.standard_normal(shape)


def _traced_states(weights: DiTWeights, schedule: NoiseSchedule, t: float,
                   condition_ids, draws: int, rng: np.random.Generator
                   ) -> list[np.ndarray]:
    """Per-block stacked states over draws x conditions, each (n*tokens, C).

    The same z_t draws are reused for every condition id so that
    condition-to-condition comparisons see identical noise.
    """
    z = _analysis_inputs(weights.config, schedule, t, draws, rng)
    per_block = [[] for _ in range(weights.config.num_blocks)]
    for c in condition_ids:
        _, trace = forward_batch(
            weights, z, np.full(draws, t), np.full(draws, c), trace=True)
        for k, state in enumerate(trace.z):
            per_block[k].append(state.reshape(-1, weights.config.hidden_size))
    return [np.concatenate(chunks, axis=0) for chunks in per_block]


def build_ma_profile(weights: DiTWeights, schedule: NoiseSchedule,
                     t: float | None = None,
                     condition_ids=None, draws: int = 64, seed: int = 0,
                     kappa: float = DEFAULT_KAPPA, rho: float = DEFAULT_RHO,
                     kappa_token: float = DEFAULT_KAPPA_TOKEN) -> MAProfile:
    """Detect massive-activation dimensions at every block."""
    cfg = weights.config
    if t is None:
        t = schedule.sigma_max / 2.0
    if condition_ids is None:
        condition_ids = list(range(cfg.num_classes))
    rng = np.random.default_rng(seed)
    states = _traced_states(weights, schedule, t, condition_ids, draws, rng)
    dims = tuple(
        frozenset(detect_ma(compute_stats(s, kappa_token), kappa, rho))
        for s in states)
    return MAProfile(dims_per_block=dims, kappa=kappa, rho=rho, timestep=t,
                     condition_ids=tuple(int(c) for c in condition_ids),
                     sample_count=draws * len(condition_ids))


def layer_profile(weights: DiTWeights, schedule: NoiseSchedule,
                  sample_count: int = 64, condition_ids=None,
                  t: float | None = None, seed: int = 0,
                  kappa_token: float = DEFAULT_KAPPA_TOKEN) -> list[dict]:
    """Per-block magnitude summary rows: top1/top2/top3 and the median."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    cfg = weights.config
    if condition_ids is None:
        condition_ids = list(range(cfg.num_classes))
    if t is None:
        t = schedule.sigma_max / 2.0
    rng = np.random.default_rng(seed)
    states = _traced_states(weights, schedule, t, condition_ids,
                            sample_count, rng)
    rows = []
    for k, state in enumerate(states, start=1):
        st = compute_stats(state, kappa_token)
        rows.append({"block": k, "top1": st.top1, "top2": st.top2,
                     "top3": st.top3, "median": st.median_of_means})
    return rows


def timestep_sweep(weights: DiTWeights, t_grid, condition_id: int,
                   profile: MAProfile, schedule: NoiseSchedule,
                   draws: int = 64, seed: int = 0,
                   block: int | None = None) -> list[dict]:
    """Mean magnitude of the profile's dimensions at one block, per timestep.

    Fresh noise draws per grid point; the block defaults to the shallowest
    one where the profile detected anything.
    """
    t_grid = list(t_grid)
    if not t_grid:
        raise ValueError("timestep_sweep: empty grid")
    if block is None:
        block = profile.first_nonempty_depth()
    dims = sorted(profile.dims_at(block))
    if not dims:
        raise ValueError(f"timestep_sweep: profile empty at block {block}")
    rng = np.random.default_rng(seed)
    rows = []
    for t in t_grid:
        z = _analysis_inputs(weights.config, schedule, t, draws, rng)
        _, trace = forward_batch(
            weights, z, np.full(draws, t), np.full(draws, condition_id),
            trace=True)
        state = trace.z[block - 1].reshape(-1, weights.config.hidden_size)
        magnitude = float(np.abs(state[:, dims]).mean())
        rows.append({"t": float(t), "block": block, "magnitude": magnitude})
    return rows


def condition_invariance(weights: DiTWeights, t: float, condition_ids,
                         profile: MAProfile, schedule: NoiseSchedule,
                         draws: int = 64, seed: int = 0,
                         block: int | None = None
                         ) -> tuple[list[dict], float]:
    """Per-condition mean magnitude of the profile's dimensions, plus the
    (max - min) / mean spread. Shares one set of draws across conditions."""
    condition_ids = list(condition_ids)
    if len(condition_ids) < 2:
        raise ValueError("condition_invariance: need at least 2 condition ids")
    if block is None:
        block = profile.first_nonempty_depth()
    dims = sorted(profile.dims_at(block))
    if not dims:
        raise ValueError(f"condition_invariance: profile empty at block {block}")
    rng = np.random.default_rng(seed)
    z = _analysis_inputs(weights.config, schedule, t, draws, rng)
    rows = []
    for c in condition_ids:
        _, trace = forward_batch(
            weights, z, np.full(draws, t), np.full(draws, c), trace=True)
        state = trace.z[block - 1].reshape(-1, weights.config.hidden_size)
        rows.append({"condition": int(c), "block": block,
                     "magnitude": float(np.abs(state[:, dims]).mean())})
    values = np.array([r["magnitude"] for r in rows])
    mean = values.mean()
    spread = float((values.max() - values.min()) / mean) if mean > 0 else 0.0
    return rows, spread


def alpha_profile(weights: DiTWeights, t: float, c: int) -> list[dict]:
    """Per-block |alpha| read straight off the modulation networks.

    The feedforward-branch alpha is the primary signal (and supplies the
    argmax); the attention-branch alpha is included alongside.
    """
    cfg = weights.config
    if not 0 <= int(c) < cfg.num_classes:
        raise ValueError(f"condition id {c} outside [0, {cfg.num_classes})")
    if not 0 <= t <= cfg.t_max:
        raise ValueError(f"timestep {t} outside [0, {cfg.t_max}]")
    t_emb = timestep_embedding(t, cfg.t_embed_dim, cfg.t_max)
    c_emb = weights.class_embed.array[int(c)]
    rows = []
    for k, block in enumerate(weights.blocks, start=1):
        attn_m, ff_m = regress_modulation(t_emb, c_emb, block)
        alpha_ff = np.abs(ff_m.alpha.array)
        rows.append({
            "block": k,
            "alpha_ff": alpha_ff,
            "alpha_attn": np.abs(attn_m.alpha.array),
            "argmax": int(np.argmax(alpha_ff)),
        })
    return rows
