"""Degraded "detail-deficient" models via dimension masking.

Masking zeroes chosen hidden-state dimensions in the output of a single
block and lets the modified state propagate through the remaining blocks.
Three arms make up the comparison protocol: the untouched model, the model
with detected massive-activation dimensions masked, and a control with an
equal number of randomly chosen non-massive dimensions masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .dit import BlockHook, DiTWeights, make_denoiser
from .activations import MAProfile

MODES = ("ma-detected", "explicit-dims", "random-control")


def mask_dimensions(z, dims) -> Tensor | np.ndarray:
    """Zero the given last-axis dimensions; everything else is untouched."""
    zt = nx._as_tensor(z)
    C = zt.shape[-1]
    dims = sorted(int(d) for d in dims)
    if dims and (dims[0] < 0 or dims[-1] >= C):
        raise ValueError(f"mask dimension out of range [0, {C})")
    keep = np.ones(C)
    keep[dims] = 0.0
    out = nx.mul(zt, Tensor(keep))
    return out if isinstance(z, Tensor) else out.array


@dataclass(frozen=True)
class InterventionSpec:
    """Recipe for one masking intervention at a single block depth."""

    depth: int
    mode: str = "ma-detected"
    dims: frozenset[int] = field(default_factory=frozenset)
    control_count: int = 0
    control_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "dims", frozenset(int(d) for d in self.dims))
        if self.mode == "random-control" and self.control_count < 1:
            raise ValueError("random-control needs control_count >= 1")


def resolve_mask_dims(spec: InterventionSpec, profile: MAProfile | None,
                      hidden_size: int) -> list[int]:
    """Concrete dimension list for a spec, given the detection profile."""
    if spec.mode == "explicit-dims":
        dims = sorted(spec.dims)
        if dims and (dims[0] < 0 or dims[-1] >= hidden_size):
            raise ValueError(f"explicit dims outside [0, {hidden_size})")
        return dims
    if profile is None:
        raise ValueError(f"{spec.mode} mode requires a detection profile")
    detected = sorted(profile.dims_at(spec.depth))
    if spec.mode == "ma-detected":
        if not detected:
            raise ValueError(
                f"no massive-activation dimensions detected at depth {spec.depth}")
        return detected
    # random-control: equal-count draw from the non-detected complement
    pool = np.array([d for d in range(hidden_size) if d not in set(detected)])
    if spec.control_count > pool.size:
        raise ValueError(
            f"control_count {spec.control_count} exceeds the "
            f"{pool.size} non-detected dimensions at depth {spec.depth}")
    rng = np.random.default_rng(spec.control_seed)
    return sorted(int(d) for d in rng.choice(pool, size=spec.control_count,
                                             replace=False))


def make_degraded(weights: DiTWeights, spec: InterventionSpec,
                  profile: MAProfile | None = None):
    """Denoiser identical to the base model except for a zero-mask hook on
    block `spec.depth`'s output."""
    cfg = weights.config
    if not 1 <= spec.depth <= cfg.num_blocks:
        raise ValueError(
            f"depth {spec.depth} outside [1, {cfg.num_blocks}]")
    dims = resolve_mask_dims(spec, profile, cfg.hidden_size)
    hook = BlockHook(spec.depth, lambda z: mask_dimensions(z, dims))
    denoiser = make_denoiser(weights, hook=hook)
    denoiser.mask_dims = dims
    return denoiser


@dataclass
class InterventionReport:
    """Three-arm output-delta comparison on shared inputs."""

    arms: list[str]
    l2_deltas: dict[str, np.ndarray]        # per arm: (n_inputs,)
    dim_deltas: dict[str, np.ndarray]       # per arm: mean |delta| per output dim
    median_l2: dict[str, float]


def intervention_report(weights: DiTWeights, profile: MAProfile,
                        inputs: np.ndarray, t: float, c: int,
                        depth: int, control_seed: int = 0
                        ) -> InterventionReport:
    """Compare predictions of the original, massive-masked, and
    random-control-masked models on the same inputs."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[0] < 1:
        raise ValueError("intervention_report: need (n, tokens, data_dim) inputs")

    detected = sorted(profile.dims_at(depth))
    base = make_denoiser(weights)
    reference = base(inputs, t, c)

    arms: dict[str, np.ndarray] = {"original": reference}
    if detected:
        ma_spec = InterventionSpec(depth=depth, mode="ma-detected")
        arms["ma-disrupted"] = make_degraded(weights, ma_spec, profile)(inputs, t, c)
        ctrl_spec = InterventionSpec(depth=depth, mode="random-control",
                                     control_count=len(detected),
                                     control_seed=control_seed)
        arms["non-ma-disrupted"] = make_degraded(weights, ctrl_spec, profile)(
            inputs, t, c)
    else:
        # empty detection set: both disrupted arms degenerate to the original
        arms["ma-disrupted"] = reference
        arms["non-ma-disrupted"] = reference

    l2, dims, medians = {}, {}, {}
    for name, pred in arms.items():
        delta = pred - reference
        l2[name] = np.sqrt((delta ** 2).sum(axis=(1, 2)))
        dims[name] = np.abs(delta).mean(axis=(0, 1))
        medians[name] = float(np.median(l2[name]))
    return InterventionReport(arms=list(arms), l2_deltas=l2,
                              dim_deltas=dims, median_l2=medians)
