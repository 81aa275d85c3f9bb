"""Experiment drivers behind the CLI subcommands.

Each driver reads an `ExperimentConfig`, writes its artifacts into the run
directory, and returns the paths it produced. Given the same config and
seed, repeated runs produce byte-identical CSVs and PPMs.
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np

from ..activations import (alpha_profile, build_ma_profile,
                           condition_invariance, layer_profile,
                           timestep_sweep)
from ..dit import init_weights
from ..diffusion import default_mixture, euler_sample, train
from ..guidance import MODES, GuidanceSpec, build_guided_denoiser
from ..intervention import InterventionSpec, intervention_report
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .formats import emit_csv, emit_ppm, read_csv, tile_fields
from .metrics import metric_detail_energy, metric_sliced_w2


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mixture(config: ExperimentConfig):
    return default_mixture(components=config.model.classes - 1)


def _load_weights(config: ExperimentConfig):
    path = _out_dir(config) / config.run.checkpoint
    if not path.exists():
        raise FileNotFoundError(
            f"no checkpoint at {path}; run `malab train` first")
    return load_checkpoint(path)


def _intervention_spec(config: ExperimentConfig, profile) -> InterventionSpec:
    depth = config.disruption_depth()
    if config.guidance.dims:
        return InterventionSpec(depth=depth, mode="explicit-dims",
                                dims=frozenset(config.guidance.dims))
    if profile is not None and profile.dims_at(depth):
        return InterventionSpec(depth=depth, mode="ma-detected")
    # nothing detected and nothing pinned: degenerate mask, guidance
    # collapses to the plain conditional prediction
    return InterventionSpec(depth=depth, mode="explicit-dims",
                            dims=frozenset())


def _build_profile(config: ExperimentConfig, weights):
    det = config.detection
    return build_ma_profile(
        weights, config.noise_schedule(),
        draws=config.run.draws, seed=config.run.seed,
        kappa=det.kappa, rho=det.rho, kappa_token=det.kappa_token)


def run_train(config: ExperimentConfig) -> dict:
    out = _out_dir(config)
    weights = init_weights(config.dit_config(), seed=config.run.seed)
    losses = train(
        weights, _mixture(config), config.noise_schedule(),
        steps=config.run.train_steps, batch_size=config.run.batch_size,
        lr=config.run.learning_rate, seed=config.run.seed,
        cond_drop_prob=config.run.cond_drop_prob,
        log_every=max(1, config.run.train_steps // 20))
    ckpt = out / config.run.checkpoint
    save_checkpoint(weights, ckpt)
    loss_csv = out / "loss.csv"
    emit_csv(loss_csv, "loss.v1", ["step", "loss"],
             [(i + 1, v) for i, v in enumerate(losses)])
    if losses:
        head = np.mean(losses[:100])
        tail = np.mean(losses[-100:])
        print(f"loss: first-100 mean {head:.5f}, last-100 mean {tail:.5f}")
    return {"checkpoint": ckpt, "loss": loss_csv}


def _sample_mode(config: ExperimentConfig, weights, profile, mode: str,
                 lam: float, w: float) -> tuple[np.ndarray, float]:
    """Draw samples under one guidance mode; returns (samples, passes/step)."""
    spec = GuidanceSpec(
        mode=mode, lam=lam, w=w,
        intervention=(_intervention_spec(config, profile)
                      if mode in ("dg", "cfg+dg") else None))
    guided = build_guided_denoiser(weights, spec, profile)
    schedule = config.noise_schedule()
    samples = euler_sample(
        guided, schedule, config.run.class_id, config.run.seed,
        config.run.sample_count,
        (weights.config.tokens, weights.config.data_dim))
    return samples, guided.forward_count / schedule.steps


def _emit_samples(config: ExperimentConfig, out: Path, mode: str,
                  samples: np.ndarray) -> Path:
    D = samples.shape[2]
    header = ["sample", "token"] + [f"x{d}" for d in range(D)]
    rows = []
    for i in range(samples.shape[0]):
        for tok in range(samples.shape[1]):
            rows.append([i, tok] + list(samples[i, tok]))
    path = out / f"samples_{mode.replace('+', '_')}.csv"
    emit_csv(path, "samples.v1", header, rows)
    return path


def run_sample(config: ExperimentConfig, grid: bool = False) -> dict:
    out = _out_dir(config)
    weights = _load_weights(config)
    mode = config.guidance.mode
    profile = (_build_profile(config, weights)
               if mode in ("dg", "cfg+dg") and not config.guidance.dims
               else None)
    samples, passes = _sample_mode(config, weights, profile, mode,
                                   config.guidance.lam, config.guidance.w)
    print(f"mode {mode}: {passes:g} forward passes per step")
    paths = {"samples": _emit_samples(config, out, mode, samples)}
    if grid:
        h, w_tok = weights.config.token_grid
        fields = np.linalg.norm(
            samples.reshape(-1, h, w_tok, samples.shape[2]), axis=3)
        shown = fields[:min(64, fields.shape[0])]
        ppm = out / f"samples_{mode.replace('+', '_')}.ppm"
        emit_ppm(ppm, tile_fields(shown))
        paths["grid"] = ppm
    paths["passes_per_step"] = passes
    return paths


def run_analyze(config: ExperimentConfig) -> dict:
    out = _out_dir(config)
    weights = _load_weights(config)
    schedule = config.noise_schedule()
    det = config.detection
    paths = {}

    rows = layer_profile(weights, schedule, sample_count=config.run.draws,
                         seed=config.run.seed, kappa_token=det.kappa_token)
    paths["layer_profile"] = out / "layer_profile.csv"
    emit_csv(paths["layer_profile"], "layer_profile.v1",
             ["block", "top1", "top2", "top3", "median", "top1_over_median"],
             [(r["block"], r["top1"], r["top2"], r["top3"], r["median"],
               r["top1"] / r["median"] if r["median"] > 0 else 0.0)
              for r in rows])

    t_mid = schedule.sigma_max / 2.0
    alpha_rows = alpha_profile(weights, t_mid, config.run.class_id)
    paths["alpha_profile"] = out / "alpha_profile.csv"
    emit_csv(paths["alpha_profile"], "alpha_profile.v1",
             ["block", "dim", "alpha_ff", "alpha_attn"],
             [(r["block"], d, r["alpha_ff"][d], r["alpha_attn"][d])
              for r in alpha_rows for d in range(len(r["alpha_ff"]))])

    profile = _build_profile(config, weights)
    paths["ma_dims"] = out / "ma_dims.csv"
    emit_csv(paths["ma_dims"], "ma_dims.v1",
             ["block", "count", "dims"],
             [(k, len(dims), ";".join(str(d) for d in sorted(dims)))
              for k, dims in enumerate(profile.dims_per_block, start=1)])

    has_dims = any(profile.dims_per_block)
    grid = np.linspace(0.1 * schedule.sigma_max, schedule.sigma_max, 10)
    sweep_rows = []
    cond_rows = []
    if has_dims:
        sweep_rows = timestep_sweep(
            weights, grid, config.run.class_id, profile, schedule,
            draws=config.run.draws, seed=config.run.seed)
        real_ids = list(range(config.model.classes - 1))
        cond_rows, spread = condition_invariance(
            weights, t_mid, real_ids, profile, schedule,
            draws=config.run.draws, seed=config.run.seed)
        print(f"condition spread: {spread:.4f}")
    paths["timestep_sweep"] = out / "timestep_sweep.csv"
    emit_csv(paths["timestep_sweep"], "timestep_sweep.v1",
             ["t", "block", "magnitude"],
             [(r["t"], r["block"], r["magnitude"]) for r in sweep_rows])
    paths["condition_invariance"] = out / "condition_invariance.csv"
    emit_csv(paths["condition_invariance"], "condition_invariance.v1",
             ["condition", "block", "magnitude"],
             [(r["condition"], r["block"], r["magnitude"]) for r in cond_rows])
    return paths


def run_intervene(config: ExperimentConfig) -> dict:
    out = _out_dir(config)
    weights = _load_weights(config)
    schedule = config.noise_schedule()
    profile = _build_profile(config, weights)
    rng = np.random.default_rng(config.run.seed)
    t_mid = schedule.sigma_max / 2.0
    shape = (20, weights.config.tokens, weights.config.data_dim)
    inputs = rng.standard_normal(shape) + t_mid * rng.standard_normal(shape)
    report = intervention_report(
        weights, profile, inputs, t_mid, config.run.class_id,
        depth=config.disruption_depth(), control_seed=config.run.seed)
    paths = {"l2": out / "intervention_l2.csv",
             "dims": out / "intervention_dims.csv"}
    emit_csv(paths["l2"], "intervention_l2.v1",
             ["arm", "input", "delta_l2"],
             [(arm, i, v) for arm in report.arms
              for i, v in enumerate(report.l2_deltas[arm])])
    emit_csv(paths["dims"], "intervention_dims.v1",
             ["arm", "dim", "mean_abs_delta"],
             [(arm, d, v) for arm in report.arms
              for d, v in enumerate(report.dim_deltas[arm])])
    for arm in report.arms:
        print(f"{arm}: median output delta {report.median_l2[arm]:.6f}")
    return paths


def _sample_metrics(config: ExperimentConfig, samples: np.ndarray
                    ) -> tuple[float, float]:
    # samples are class-conditional, so the fidelity reference is the
    # sampled class's mixture component, not the full mixture
    reference = _mixture(config).component(config.run.class_id)
    flat = samples.reshape(-1, samples.shape[2])
    rng = np.random.default_rng([config.run.seed, 0xD1F])
    direct, _ = reference.sample(rng, flat.shape[0])
    w2 = metric_sliced_w2(flat, direct, projections=64, seed=config.run.seed)
    h, w_tok = config.model.token_grid
    fields = samples.reshape(-1, h, w_tok, samples.shape[2])
    detail = float(np.mean([metric_detail_energy(f) for f in fields]))
    return w2, detail


def run_sweep(config: ExperimentConfig, param: str, values) -> dict:
    if param not in ("m", "lambda", "w"):
        raise ValueError(f"sweep parameter must be m, lambda, or w, got {param!r}")
    out = _out_dir(config)
    weights = _load_weights(config)
    profile = _build_profile(config, weights)
    base_mode = config.guidance.mode
    if param == "lambda":
        mode = "cfg+dg" if "dg" in base_mode else "cfg"
    else:
        mode = "cfg+dg" if "cfg" in base_mode else "dg"
    rows = []
    for value in values:
        lam, w = config.guidance.lam, config.guidance.w
        cfg = config
        if param == "m":
            cfg = copy.deepcopy(config)
            cfg.guidance.m = int(value)
        elif param == "lambda":
            lam = float(value)
        else:
            w = float(value)
        samples, _ = _sample_mode(cfg, weights, profile, mode, lam, w)
        w2, detail = _sample_metrics(config, samples)
        rows.append((param, value, w2, detail))
    # data integrity: one row per grid value, all metrics finite
    seen = [r[1] for r in rows]
    if len(set(seen)) != len(seen):
        raise ValueError(f"sweep values repeat: {seen}")
    if not all(np.isfinite(r[2]) and np.isfinite(r[3]) for r in rows):
        raise ValueError("sweep produced non-finite metrics")
    path = out / f"sweep_{param}.csv"
    emit_csv(path, "sweep.v1",
             ["param", "value", "sliced_w2", "detail_energy"], rows)
    return {"sweep": path}


def run_report(config: ExperimentConfig) -> dict:
    """End-to-end inspection artifact: analysis CSVs, guidance-mode sample
    metrics, rendered figures, and a markdown summary binding them."""
    from . import figures

    out = _out_dir(config)
    weights = _load_weights(config)
    profile = _build_profile(config, weights)
    if not (out / "layer_profile.csv").exists():
        run_analyze(config)
    if not (out / "intervention_l2.csv").exists():
        run_intervene(config)

    mode_rows = []
    for mode in MODES:
        samples, passes = _sample_mode(
            config, weights, profile, mode,
            config.guidance.lam, config.guidance.w)
        _emit_samples(config, out, mode, samples)
        w2, detail = _sample_metrics(config, samples)
        mode_rows.append((mode, w2, detail, passes))
    metrics_csv = out / "mode_metrics.csv"
    emit_csv(metrics_csv, "mode_metrics.v1",
             ["mode", "sliced_w2", "detail_energy", "forwards_per_step"],
             mode_rows)

    fig_paths = figures.render_all(out)
    report_md = _write_report(config, out, profile, mode_rows, fig_paths)
    return {"report": report_md, "metrics": metrics_csv, "figures": fig_paths}


def _write_report(config, out: Path, profile, mode_rows, fig_paths) -> Path:
    lines = ["# Workbench report", ""]
    lines.append(f"Config: {config.model.blocks} blocks, hidden size "
                 f"{config.model.hidden}, {config.model.classes} classes, "
                 f"sigma_max {config.schedule.sigma_max}, "
                 f"{config.schedule.steps} sampling steps.")
    lines.append("")

    if (out / "loss.csv").exists():
        _, _, rows = read_csv(out / "loss.csv", "loss.v1")
        losses = [float(r[1]) for r in rows]
        if len(losses) >= 200:
            lines.append(
                f"Training: {len(losses)} steps; first-100 mean loss "
                f"{np.mean(losses[:100]):.5f}, last-100 mean "
                f"{np.mean(losses[-100:]):.5f}.")
            lines.append("")

    lines.append("## Detected massive-activation dimensions")
    lines.append("")
    lines.append(f"Detection: kappa={config.detection.kappa:g}, "
                 f"rho={config.detection.rho:g}, "
                 f"kappa_token={config.detection.kappa_token:g}, "
                 f"t={profile.timestep:g}, {profile.sample_count} states.")
    lines.append("")
    lines.append("| block | dims |")
    lines.append("|---|---|")
    for k, dims in enumerate(profile.dims_per_block, start=1):
        shown = ", ".join(str(d) for d in sorted(dims)) if dims else "(none)"
        lines.append(f"| {k} | {shown} |")
    lines.append("")
    if not any(profile.dims_per_block):
        lines.append("No dimensions cleared the detection thresholds; "
                     "dg runs below degenerate to the conditional model.")
        lines.append("")

    lines.append("## Guidance-mode sample metrics")
    lines.append("")
    lines.append("| mode | sliced W2 | detail energy | forwards/step |")
    lines.append("|---|---|---|---|")
    for mode, w2, detail, passes in mode_rows:
        lines.append(f"| {mode} | {w2:.4f} | {detail:.4f} | {passes:g} |")
    lines.append("")

    for name, path in fig_paths.items():
        lines.append(f"## {name.replace('_', ' ').capitalize()}")
        lines.append("")
        lines.append(f"![{name}]({Path(path).name})")
        lines.append("")

    path = out / "report.md"
    path.write_text("\n".join(lines), encoding="utf-8")
    return path
