"""The toy diffusion transformer.

Tokens on a small grid, each carrying a low-dimensional value, flow through
N blocks. Each block runs two modulated residual branches:

    z <- z + alpha_attn * Attn((1 + gamma_attn) * LN(z) + beta_attn)
    z <- z + alpha_ff   * FF((1 + gamma_ff) * LN(z) + beta_ff)

where all six per-dimension vectors (gamma, beta, alpha per branch) are
regressed by a per-block two-layer modulation network from the timestep and
condition embeddings. The residual scaling vector alpha is what plants and
carries massive-activation dimension patterns, so forward passes can trace
every block's output state together with the alpha vectors that produced it.

A hook may transform exactly one block's output state before it propagates,
which is how the intervention module builds degraded models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LN_EPS = 1e-6

# layout of the modulation network's output, in C-wide slots
MOD_SLOTS = ("gamma_attn", "beta_attn", "alpha_attn",
             "gamma_ff", "beta_ff", "alpha_ff")


@dataclass(frozen=True)
class DiTConfig:
    """Architecture hyperparameters of the toy model."""

    num_blocks: int = 6
    hidden_size: int = 64
    num_heads: int = 4
    token_grid: tuple[int, int] = (4, 4)
    data_dim: int = 2
    num_classes: int = 9      # real classes plus one reserved null id
    t_embed_dim: int = 64
    t_max: float = 3.0        # schedule range the embeddings are scaled to

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be positive")
        if self.hidden_size < 1 or self.hidden_size % self.num_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}")
        if self.token_grid[0] < 1 or self.token_grid[1] < 1:
            raise ValueError("token_grid extents must be positive")
        if self.data_dim < 1:
            raise ValueError("data_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (one real class plus null)")
        if self.t_embed_dim < 2 or self.t_embed_dim % 2 != 0:
            raise ValueError("t_embed_dim must be a positive even integer")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")

    @property
    def tokens(self) -> int:
        return self.token_grid[0] * self.token_grid[1]

    @property
    def null_class_id(self) -> int:
        """Reserved id for the unconditional branch (last class slot)."""
        return self.num_classes - 1


@dataclass
class ModulationParams:
    """One branch's (gamma, beta, alpha), jointly regressed for a (t, c) pair."""

    gamma: Tensor
    beta: Tensor
    alpha: Tensor


@dataclass
class BlockWeights:
    """Parameters of one block: modulation net, attention, feedforward."""

    mod_w1: Tensor
    mod_b1: Tensor
    mod_w2: Tensor
    mod_b2: Tensor
    attn_wq: Tensor
    attn_bq: Tensor
    attn_wk: Tensor
    attn_bk: Tensor
    attn_wv: Tensor
    attn_bv: Tensor
    attn_wo: Tensor
    attn_bo: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    def named(self, prefix: str):
        for name in self.__dataclass_fields__:
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class TraceEntry:
    """One block's captured output state and the alpha vectors applied in it."""

    z: np.ndarray           # tokens x C, detached copy
    alpha_attn: np.ndarray  # C
    alpha_ff: np.ndarray    # C


@dataclass
class HiddenTrace:
    """Per-block states captured during one forward pass; never mutated."""

    t: float
    c: int
    entries: list[TraceEntry]


@dataclass
class BatchTrace:
    """Stacked per-block states for a batched forward pass."""

    ts: np.ndarray                 # (B,)
    cs: np.ndarray                 # (B,)
    z: list[np.ndarray]            # per block: (B, tokens, C)
    alpha_attn: list[np.ndarray]   # per block: (B, C)
    alpha_ff: list[np.ndarray]     # per block: (B, C)

    def sample(self, i: int) -> HiddenTrace:
        entries = [TraceEntry(z[i].copy(), aa[i].copy(), af[i].copy())
                   for z, aa, af in zip(self.z, self.alpha_attn, self.alpha_ff)]
        return HiddenTrace(float(self.ts[i]), int(self.cs[i]), entries)


@dataclass
class BlockHook:
    """Transforms the output state of exactly one block (1-based depth)."""

    depth: int
    fn: Callable[[Tensor], Tensor]


class DiTWeights:
    """All model parameters plus the config they were shaped by."""

    def __init__(self, config: DiTConfig, in_w, in_b, pos, class_embed,
                 out_w, out_b, blocks: list[BlockWeights]):
        self.config = config
        self.in_w = in_w
        self.in_b = in_b
        self.pos = pos
        self.class_embed = class_embed
        self.out_w = out_w
        self.out_b = out_b
        self.blocks = blocks

    def named_tensors(self):
        yield "in_w", self.in_w
        yield "in_b", self.in_b
        yield "pos", self.pos
        yield "class_embed", self.class_embed
        yield "out_w", self.out_w
        yield "out_b", self.out_b
        for k, block in enumerate(self.blocks):
            yield from block.named(f"block{k}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]


def init_weights(config: DiTConfig, seed: int = 0) -> DiTWeights:
    """Fresh parameters: uniform +-1/sqrt(fan_in) weights, zero biases,
    and zero modulation-net output layers so every block starts as identity.
    """
    rng = np.random.default_rng(seed)
    C = config.hidden_size
    td = config.t_embed_dim

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def zero(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    blocks = []
    for _ in range(config.num_blocks):
        blocks.append(BlockWeights(
            mod_w1=uniform(2 * td, (2 * td, C)),
            mod_b1=zero(C),
            mod_w2=zero((C, 6 * C)),
            mod_b2=zero(6 * C),
            attn_wq=uniform(C, (C, C)),
            attn_bq=zero(C),
            attn_wk=uniform(C, (C, C)),
            attn_bk=zero(C),
            attn_wv=uniform(C, (C, C)),
            attn_bv=zero(C),
            attn_wo=uniform(C, (C, C)),
            attn_bo=zero(C),
            ff_w1=uniform(C, (C, 4 * C)),
            ff_b1=zero(4 * C),
            ff_w2=uniform(4 * C, (4 * C, C)),
            ff_b2=zero(C),
        ))
    return DiTWeights(
        config,
        in_w=uniform(config.data_dim, (config.data_dim, C)),
        in_b=zero(C),
        pos=uniform(C, (config.tokens, C)),
        class_embed=uniform(td, (config.num_classes, td)),
        out_w=uniform(C, (C, config.data_dim)),
        out_b=zero(config.data_dim),
        blocks=blocks,
    )


def timestep_embedding(t: float, dim: int, t_max: float = 3.0) -> np.ndarray:
    """Sinusoidal features of a timestep.

    Interleaved sin/cos over log-spaced frequencies whose periods span
    1..10^4 in units of the schedule range, so the fastest component
    completes one cycle over [0, t_max] and the slowest is near-linear.
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"timestep_embedding: dim must be even, got {dim}")
    half = dim // 2
    u = float(t) / t_max
    exponents = np.arange(half) / max(half - 1, 1)
    periods = 10.0 ** (4.0 * exponents)
    phase = 2.0 * math.pi * u / periods
    out = np.empty(dim)
    out[0::2] = np.sin(phase)
    out[1::2] = np.cos(phase)
    return out


def _timestep_embedding_batch(ts: np.ndarray, dim: int, t_max: float) -> np.ndarray:
    half = dim // 2
    u = np.asarray(ts, dtype=np.float64)[:, None] / t_max
    exponents = np.arange(half) / max(half - 1, 1)
    periods = 10.0 ** (4.0 * exponents)
    phase = 2.0 * math.pi * u / periods
    out = np.empty((len(ts), dim))
    out[:, 0::2] = np.sin(phase)
    out[:, 1::2] = np.cos(phase)
    return out


def _modulation(block: BlockWeights, tc_emb: Tensor) -> list[Tensor]:
    """Six C-wide vectors in MOD_SLOTS order from the block's modulation net."""
    h = nx.silu(nx.affine(tc_emb, block.mod_w1, block.mod_b1))
    out = nx.affine(h, block.mod_w2, block.mod_b2)
    return nx.split_last(out, 6)


def regress_modulation(t_emb, c_emb, block: BlockWeights
                       ) -> tuple[ModulationParams, ModulationParams]:
    """Modulation vectors for both branches at one (t, c) embedding pair."""
    t_emb, c_emb = nx._as_tensor(t_emb), nx._as_tensor(c_emb)
    if t_emb.ndim != 1 or c_emb.ndim != 1:
        raise nx.ShapeMismatchError("regress_modulation expects 1-D embeddings")
    tc = nx.concat_last([nx.reshape(t_emb, (1, -1)), nx.reshape(c_emb, (1, -1))])
    parts = _modulation(block, tc)
    vecs = [nx.reshape(p, (-1,)) for p in parts]
    attn = ModulationParams(gamma=vecs[0], beta=vecs[1], alpha=vecs[2])
    ff = ModulationParams(gamma=vecs[3], beta=vecs[4], alpha=vecs[5])
    return attn, ff


def adaln_apply(z: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """(1 + gamma) * layer_norm(z) + beta, per token."""
    return nx.scale_shift_norm(z, gamma, beta, LN_EPS)


def _attention(z: Tensor, block: BlockWeights, num_heads: int) -> Tensor:
    """Multi-head self-attention over the token axis of (..., tokens, C)."""
    C = z.shape[-1]
    hd = C // num_heads
    tokens = z.shape[-2]
    lead = z.shape[:-2]
    # one packed projection instead of three; the weight concat is tiny and
    # its gradient routes back through the split
    w_qkv = nx.concat_last([block.attn_wq, block.attn_wk, block.attn_wv])
    b_qkv = nx.concat_last([block.attn_bq, block.attn_bk, block.attn_bv])
    q, k, v = nx.split_last(nx.affine(z, w_qkv, b_qkv), 3)

    def heads(x):
        x = nx.reshape(x, lead + (tokens, num_heads, hd))
        return nx.swapaxes(x, -2, -3)  # (..., heads, tokens, hd)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = nx.matmul(qh, nx.swapaxes(kh, -1, -2))
    attn = nx.softmax_rows(scores, scale=1.0 / math.sqrt(hd))
    mixed = nx.matmul(attn, vh)
    merged = nx.reshape(nx.swapaxes(mixed, -2, -3), lead + (tokens, C))
    return nx.affine(merged, block.attn_wo, block.attn_bo)


def _block_apply(z: Tensor, mods: list[Tensor], block: BlockWeights,
                 num_heads: int) -> Tensor:
    """One block's two modulated residual branches.

    `mods` holds the six modulation tensors in MOD_SLOTS order, shaped to
    broadcast over the token axis of z.
    """
    g_a, b_a, a_a, g_f, b_f, a_f = mods
    h = nx.scale_shift_norm(z, g_a, b_a, LN_EPS)
    z = nx.add_scaled(z, _attention(h, block, num_heads), a_a)
    h = nx.scale_shift_norm(z, g_f, b_f, LN_EPS)
    ff = nx.affine(nx.silu(nx.affine(h, block.ff_w1, block.ff_b1)),
                   block.ff_w2, block.ff_b2)
    return nx.add_scaled(z, ff, a_f)


def block_forward(z: Tensor, t_emb, c_emb, block: BlockWeights,
                  num_heads: int = 4, hook: BlockHook | None = None) -> Tensor:
    """Forward one block over a (tokens, C) state; hook transforms the output."""
    z = nx._as_tensor(z)
    attn_m, ff_m = regress_modulation(t_emb, c_emb, block)
    mods = [attn_m.gamma, attn_m.beta, attn_m.alpha,
            ff_m.gamma, ff_m.beta, ff_m.alpha]
    out = _block_apply(z, mods, block, num_heads)
    if hook is not None:
        out = hook.fn(out)
    return out


def forward_batch(weights: DiTWeights, z: np.ndarray, ts: np.ndarray,
                  cs: np.ndarray, trace: bool = False,
                  hook: BlockHook | None = None
                  ) -> tuple[Tensor, BatchTrace | None]:
    """Batched denoiser forward pass.

    z: (B, tokens, data_dim); ts: (B,) timesteps; cs: (B,) condition ids.
    Returns the noise prediction (B, tokens, data_dim) and, when requested,
    the captured per-block trace. The hook, if given, transforms exactly one
    block's output state.
    """
    cfg = weights.config
    z = np.asarray(z, dtype=np.float64)
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    cs = np.asarray(cs, dtype=np.intp).reshape(-1)
    if z.ndim != 3 or z.shape[1] != cfg.tokens or z.shape[2] != cfg.data_dim:
        raise nx.ShapeMismatchError(
            f"forward_batch: state {z.shape}, expected "
            f"(B, {cfg.tokens}, {cfg.data_dim})")
    if cs.min(initial=0) < 0 or cs.max(initial=0) >= cfg.num_classes:
        raise ValueError(f"condition id out of range [0, {cfg.num_classes})")
    if ts.min(initial=0.0) < 0.0 or ts.max(initial=0.0) > cfg.t_max:
        raise ValueError(f"timestep outside schedule range [0, {cfg.t_max}]")
    if hook is not None and not (1 <= hook.depth <= cfg.num_blocks):
        raise ValueError(
            f"hook depth {hook.depth} outside [1, {cfg.num_blocks}]")

    t_emb = Tensor(_timestep_embedding_batch(ts, cfg.t_embed_dim, cfg.t_max))
    c_emb = nx.embed_rows(weights.class_embed, cs)
    tc = nx.concat_last([t_emb, c_emb])  # (B, 2*t_embed_dim)

    state = nx.add(nx.affine(Tensor(z), weights.in_w, weights.in_b), weights.pos)

    captured = BatchTrace(ts=ts.copy(), cs=cs.copy(), z=[],
                          alpha_attn=[], alpha_ff=[]) if trace else None
    for k, block in enumerate(weights.blocks, start=1):
        parts = _modulation(block, tc)  # six (B, C) tensors
        mods = [nx.reshape(p, (p.shape[0], 1, p.shape[1])) for p in parts]
        state = _block_apply(state, mods, block, cfg.num_heads)
        if hook is not None and hook.depth == k:
            state = hook.fn(state)
        if captured is not None:
            captured.z.append(state.array.copy())
            captured.alpha_attn.append(parts[2].array.copy())
            captured.alpha_ff.append(parts[5].array.copy())

    pred = nx.affine(nx.layer_norm(state, LN_EPS), weights.out_w, weights.out_b)
    return pred, captured


def model_forward(weights: DiTWeights, z_t, t: float, c: int,
                  trace: bool = False, hook: BlockHook | None = None
                  ) -> tuple[Tensor, HiddenTrace | None]:
    """Single-sample forward: (tokens, data_dim) in, (tokens, data_dim) out."""
    arr = z_t.array if isinstance(z_t, Tensor) else np.asarray(z_t, dtype=np.float64)
    if arr.ndim != 2:
        raise nx.ShapeMismatchError(
            f"model_forward: state must be (tokens, data_dim), got {arr.shape}")
    pred, batch_trace = forward_batch(
        weights, arr[None], np.array([t]), np.array([c]),
        trace=trace, hook=hook)
    out = nx.reshape(pred, arr.shape)
    return out, (batch_trace.sample(0) if batch_trace is not None else None)


def make_denoiser(weights: DiTWeights, hook: BlockHook | None = None):
    """Wrap the model as a plain batched array function (z, t, c) -> eps_hat."""

    def denoise(z: np.ndarray, t: float, c: int) -> np.ndarray:
        batch = np.asarray(z, dtype=np.float64)
        with nx.no_grad():
            pred, _ = forward_batch(
                weights, batch,
                np.full(batch.shape[0], float(t)),
                np.full(batch.shape[0], int(c)),
                hook=hook)
        return pred.array

    return denoise
