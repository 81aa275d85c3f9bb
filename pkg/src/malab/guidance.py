"""Guidance algebra: denoiser combinators and guided-denoiser assembly.

Three combination rules, all elementwise over matching prediction tensors:

    cfg:     uncond + lambda * (cond - uncond)
    dg:      base + w * (base - degraded)
    cfg+dg:  cond + lambda * (cond - uncond) + w * (cond - degraded)

Note the combined rule anchors at the conditional prediction, so dropping
either scale collapses it bitwise onto the corresponding single rule.
`build_guided_denoiser` packages a mode as a sampler-ready callable that
runs exactly as many forward passes as the mode requires.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .dit import DiTWeights, make_denoiser
from .intervention import InterventionSpec, make_degraded
from .activations import MAProfile

MODES = ("cond", "cfg", "dg", "cfg+dg")


def _algebra(op):
    """Wrap an array expression so it accepts tensors or arrays alike."""

    def run(*operands, scales):
        arrays = []
        tensor_in = False
        for x in operands:
            if isinstance(x, Tensor):
                tensor_in = True
                arrays.append(x.array)
            else:
                arrays.append(np.asarray(x, dtype=np.float64))
        shape = arrays[0].shape
        for a in arrays[1:]:
            if a.shape != shape:
                raise nx.ShapeMismatchError(
                    f"guidance operands disagree: {shape} vs {a.shape}")
        out = op(*arrays, *scales)
        return Tensor(out) if tensor_in else out

    return run


# uncond + lam*(cond - uncond), written in its exact-endpoint arrangement:
# at lam 0/1 the result is bitwise uncond/cond, which the evaluation-order
# contract requires and the textbook arrangement cannot give under rounding
_cfg = _algebra(lambda cond, uncond, lam: lam * cond + (1.0 - lam) * uncond)
_dg = _algebra(lambda base, degraded, w: base + w * (base - degraded))
_cfg_dg = _algebra(
    lambda cond, uncond, degraded, lam, w:
        cond + lam * (cond - uncond) + w * (cond - degraded))


def cfg_combine(cond, uncond, lam: float):
    """Classifier-free guidance: uncond + lam * (cond - uncond)."""
    return _cfg(cond, uncond, scales=(lam,))


def dg_combine(base, degraded, w: float):
    """Detail guidance: push the base prediction away from the degraded one."""
    return _dg(base, degraded, scales=(w,))


def cfg_dg_combine(cond, uncond, degraded, lam: float, w: float):
    """Combined rule, anchored at the conditional prediction."""
    return _cfg_dg(cond, uncond, degraded, scales=(lam, w))


@dataclass(frozen=True)
class GuidanceSpec:
    """Sampling mode with its scales and, for dg modes, the masking recipe."""

    mode: str = "cond"
    lam: float = 3.0
    w: float = 1.0
    intervention: InterventionSpec | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0 or self.w < 0:
            raise ValueError("guidance scales must be nonnegative")
        if self.mode in ("dg", "cfg+dg") and self.intervention is None:
            raise ValueError(f"{self.mode} mode requires an intervention spec")

    @property
    def passes_per_step(self) -> int:
        return {"cond": 1, "cfg": 2, "dg": 2, "cfg+dg": 3}[self.mode]


class GuidedDenoiser:
    """Callable (z, t, c) -> eps_hat implementing one guidance mode.

    Tracks `forward_count`, the number of underlying model passes, so the
    per-step pass economy (1/2/2/3) can be asserted and logged.
    """

    def __init__(self, weights: DiTWeights, spec: GuidanceSpec,
                 profile: MAProfile | None = None):
        self.spec = spec
        self.null_id = weights.config.null_class_id
        self.forward_count = 0
        base = make_denoiser(weights)

        def counted(z, t, c):
            self.forward_count += 1
            return base(z, t, c)

        self._base = counted
        self._degraded = None
        if spec.mode in ("dg", "cfg+dg"):
            degraded = make_degraded(weights, spec.intervention, profile)

            def counted_degraded(z, t, c):
                self.forward_count += 1
                return degraded(z, t, c)

            self._degraded = counted_degraded
            self.mask_dims = degraded.mask_dims

    def __call__(self, z: np.ndarray, t: float, c: int) -> np.ndarray:
        mode = self.spec.mode
        if mode in ("cfg", "cfg+dg") and c == self.null_id:
            raise ValueError(
                f"{mode} mode needs a real class, got the null id {c}")
        if mode == "cond":
            return self._base(z, t, c)
        if mode == "cfg":
            cond = self._base(z, t, c)
            uncond = self._base(z, t, self.null_id)
            return cfg_combine(cond, uncond, self.spec.lam)
        if mode == "dg":
            base = self._base(z, t, c)
            degraded = self._degraded(z, t, c)
            return dg_combine(base, degraded, self.spec.w)
        cond = self._base(z, t, c)
        uncond = self._base(z, t, self.null_id)
        degraded = self._degraded(z, t, c)
        return cfg_dg_combine(cond, uncond, degraded, self.spec.lam, self.spec.w)


def build_guided_denoiser(weights: DiTWeights, spec: GuidanceSpec,
                          profile: MAProfile | None = None) -> GuidedDenoiser:
    """Assemble the denoiser for a guidance spec; dg modes need a profile
    unless the intervention pins explicit dimensions."""
    return GuidedDenoiser(weights, spec, profile)
