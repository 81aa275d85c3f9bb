import pytest

from malab.dit import DiTConfig, MOD_SLOTS, init_weights


def zeroed_model(config=None, seed=0):
    """Freshly initialized weights; blocks start as exact identities because
    the modulation output layers are zero."""
    return init_weights(config or DiTConfig(), seed=seed)


def plant_alpha_bias(weights, depth, dim, value, branch="ff"):
    """Pin one alpha entry of a block via the modulation net's output bias.

    With the modulation weights at zero-init the bias IS the regressed
    vector, so the planted value is exact.
    """
    C = weights.config.hidden_size
    slot = MOD_SLOTS.index(f"alpha_{branch}")
    block = weights.blocks[depth - 1]
    block.mod_b2.array[slot * C + dim] = value


def plant_ff_unit_output(weights, depth, dim, value=1.0):
    """Make a block's feedforward branch output exactly value * e_dim per
    token (zero FF weights, planted output bias)."""
    block = weights.blocks[depth - 1]
    block.ff_w1.array[:] = 0.0
    block.ff_w2.array[:] = 0.0
    block.ff_b1.array[:] = 0.0
    block.ff_b2.array[:] = 0.0
    block.ff_b2.array[dim] = value


def build_spike_model(depth=3, dim=17, strength=100.0, config=None, seed=0):
    """Constructed model with a single massive residual-scale entry.

    Block `depth`'s feedforward branch emits exactly e_dim per token and its
    alpha at `dim` is `strength`, so every state from that block on carries
    a deterministic massive activation at `dim`. All other blocks are
    identities.
    """
    weights = zeroed_model(config, seed)
    plant_ff_unit_output(weights, depth, dim)
    plant_alpha_bias(weights, depth, dim, strength, branch="ff")
    return weights, depth, dim


def build_time_spike_model(amplitude=150.0, pull=8.0, gain=2e4,
                           depth=3, dim=17):
    """Spike whose alpha equals amplitude - pull * silu(gain * s(t)), where
    s(t) is the slowest (near-linear) sine feature of the timestep
    embedding; strictly decreasing in t."""
    weights = zeroed_model()
    cfg = weights.config
    C = cfg.hidden_size
    block = weights.blocks[depth - 1]
    plant_ff_unit_output(weights, depth, dim)
    slow_sin_feature = cfg.t_embed_dim - 2
    block.mod_w1.array[slow_sin_feature, 0] = gain
    slot = MOD_SLOTS.index("alpha_ff")
    block.mod_w2.array[0, slot * C + dim] = -pull
    block.mod_b2.array[slot * C + dim] = amplitude
    return weights, depth, dim


@pytest.fixture
def spike_model():
    return build_spike_model
