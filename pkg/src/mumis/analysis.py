"""Diagnostic studies: sensitivity distributions, rise/fall ratios, stopping
trajectories, gradient-similarity heatmaps, ablations, sweeps, saliency.

Output files follow ``{task}_{method}_{metric}_{seed}`` with ``.png`` and
``.svg`` variants for plots and ``.csv`` for tables.
"""

from __future__ import annotations

import csv
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from scipy.stats import wasserstein_distance  # noqa: E402

from .data import LabeledDataset  # noqa: E402
from .evaluation import MetricsReport, evaluate  # noqa: E402
from .modelzoo import ModelCheckpoint, as_module  # noqa: E402
from .sensitivity import SensitivityRecord, SimilarityMatrix, jacobian_norms  # noqa: E402
from .tasks import SplitIndices  # noqa: E402
from .unlearn import Method, UnlearnConfig, UnlearnTrace, run_unlearning  # noqa: E402

logger = logging.getLogger(__name__)

QUANTITIES = ("target_norm", "irrelevant_mean_norm", "gap")


def artifact_name(task: str, method: str, metric: str, seed: int) -> str:
    return f"{task}_{method}_{metric}_{seed}"


def save_figure(fig, stem: str | Path) -> list[Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = [stem.with_suffix(".png"), stem.with_suffix(".svg")]
    for p in paths:
        fig.savefig(p, bbox_inches="tight")
    plt.close(fig)
    return paths


def write_csv(path: str | Path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# -- rise / fall -------------------------------------------------------------


@dataclass(frozen=True)
class RiseFallSummary:
    quantity: str
    rise_pct: float
    fall_pct: float
    n: int


def rise_fall(records_retrain: list[SensitivityRecord], records_pretrain: list[SensitivityRecord], quantity: str) -> RiseFallSummary:
    """Share of samples whose ``quantity`` rises from pre-trained to retrained.

    Ties count as falls.
    """
    if quantity not in QUANTITIES:
        raise ValueError(f"unknown quantity {quantity!r}")
    retrain = {r.sample_id: getattr(r, quantity) for r in records_retrain}
    pretrain = {r.sample_id: getattr(r, quantity) for r in records_pretrain}
    if retrain.keys() != pretrain.keys() or len(retrain) != len(records_retrain) or len(pretrain) != len(records_pretrain):
        raise ValueError("record lists are not aligned by sample_id")
    n = len(retrain)
    if n == 0:
        raise ValueError("no records")
    rises = sum(1 for sid in retrain if retrain[sid] - pretrain[sid] > 0)
    rise = 100.0 * rises / n
    return RiseFallSummary(quantity, rise, 100.0 - rise, n)


def rise_fall_table(records_retrain, records_pretrain) -> list[RiseFallSummary]:
    return [rise_fall(records_retrain, records_pretrain, q) for q in QUANTITIES]


# -- before / after training norms -----------------------------------------------


def _same_architecture(a, b) -> bool:
    if isinstance(a, ModelCheckpoint) and isinstance(b, ModelCheckpoint):
        if a.arch_tag != b.arch_tag or a.arch_kwargs != b.arch_kwargs:
            return False
    sa, sb = as_module(a).state_dict(), as_module(b).state_dict()
    return sa.keys() == sb.keys() and all(sa[k].shape == sb[k].shape for k in sa)


def distribution_summary(values: np.ndarray) -> dict[str, float]:
    q = np.quantile(values, [0.05, 0.25, 0.5, 0.75, 0.95])
    return {
        "mean": float(values.mean()),
        "median": float(q[2]),
        "q05": float(q[0]),
        "q25": float(q[1]),
        "q75": float(q[3]),
        "q95": float(q[4]),
    }


@dataclass
class NormReport:
    initial: dict[str, float]
    trained: dict[str, float]
    distance: float
    initial_values: np.ndarray = field(repr=False)
    trained_values: np.ndarray = field(repr=False)
    plots: list[Path] = field(default_factory=list)

    @property
    def growth(self) -> float:
        return self.trained["mean"] / self.initial["mean"]


def _log_bins(*arrays, n=40):
    pos = np.concatenate([a[a > 0] for a in arrays])
    if pos.size == 0:
        return n
    lo, hi = np.log10(pos.min()), np.log10(pos.max())
    if hi - lo < 1e-6:
        lo, hi = lo - 0.5, hi + 0.5
    return np.logspace(lo, hi, n)


def before_after_norm_report(ckpt_init, ckpt_trained, x: torch.Tensor, out_stem: str | Path | None = None) -> NormReport:
    """Distribution of full-Jacobian input sensitivity before vs after training."""
    if len(x) == 0:
        raise ValueError("empty sample subset")
    if not _same_architecture(ckpt_init, ckpt_trained):
        raise ValueError("checkpoints do not share an architecture")
    a = jacobian_norms(ckpt_init, x).double().numpy()
    b = jacobian_norms(ckpt_trained, x).double().numpy()
    report = NormReport(distribution_summary(a), distribution_summary(b), float(wasserstein_distance(a, b)), a, b)
    if out_stem is not None:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
        bins = _log_bins(a, b)
        for ax, vals, title in zip(axes, (a, b), ("initialized", "trained")):
            ax.hist(vals, bins=bins, color="tab:blue")
            ax.set_xscale("log")
            ax.set_title(f"{title} model")
            ax.set_xlabel(r"$\|\nabla_x f\|_F$")
        axes[0].set_ylabel("samples")
        report.plots = save_figure(fig, out_stem)
    return report


def sensitivity_distribution_plot(records_init, records_trained, out_stem: str | Path) -> list[Path]:
    """Target vs mean-irrelevant norm histograms for two models."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for ax, recs, title in zip(axes, (records_init, records_trained), ("initialized", "trained")):
        t = np.array([r.target_norm for r in recs])
        o = np.array([r.irrelevant_mean_norm for r in recs])
        bins = _log_bins(t, o)
        ax.hist(t, bins=bins, alpha=0.6, label=r"$\|\nabla_x f_c\|_F$")
        ax.hist(o, bins=bins, alpha=0.6, label=r"$\|\nabla_x f_{c'}\|_F$")
        ax.set_xscale("log")
        ax.set_title(f"{title} model")
        ax.legend(fontsize=8)
    return save_figure(fig, out_stem)


def rise_fall_plot(summaries: list[RiseFallSummary], out_stem: str | Path) -> list[Path]:
    fig, ax = plt.subplots(figsize=(5, 3))
    names = [s.quantity for s in summaries]
    ax.bar(names, [s.rise_pct for s in summaries], label="rise")
    ax.bar(names, [s.fall_pct for s in summaries], bottom=[s.rise_pct for s in summaries], label="fall")
    ax.set_ylabel("% of forgetting samples")
    ax.legend()
    return save_figure(fig, out_stem)


# -- stopping trajectory -------------------------------------------------------


def trace_plot(trace: UnlearnTrace, out_stem: str | Path, retrain_accs: dict | None = None) -> list[Path]:
    steps = trace.column("step")
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.4))
    for key, label in (("fa", "FA"), ("ra", "RA"), ("ta", "TA")):
        vals = [np.nan if v is None else v for v in trace.column(key)]
        line = axes[0].plot(steps, vals, label=label)[0]
        if retrain_accs and key in retrain_accs:
            axes[0].axhline(retrain_accs[key], ls="--", lw=0.8, color=line.get_color())
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("accuracy (%)")
    axes[0].legend()
    axes[1].plot(steps, trace.column("irrelevant_norm"), label=r"$\|\nabla_x f_{c'}\|_F$")
    axes[1].plot(steps, [np.nan if not np.isfinite(e) else e for e in trace.epsilons], ls=":", label=r"$\epsilon$")
    axes[1].set_xlabel("step")
    axes[1].legend()
    return save_figure(fig, out_stem)


def similarity_heatmap(matrix: SimilarityMatrix, out_stem: str | Path) -> list[Path]:
    order = np.argsort(matrix.labels, kind="stable")
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(matrix.values[np.ix_(order, order)], vmin=-1, vmax=1, cmap="coolwarm")
    ax.set_title(matrix.metric)
    fig.colorbar(im, ax=ax)
    return save_figure(fig, out_stem)


# -- ablation and sweep --------------------------------------------------------


def ablation_run(
    ckpt: ModelCheckpoint,
    dataset: LabeledDataset,
    split: SplitIndices,
    cfg: UnlearnConfig,
    variant: str,
    retrain: ModelCheckpoint,
    **eval_kwargs,
) -> MetricsReport:
    """Run MU-Mis with only the selected loss terms active and evaluate it."""
    cfg = replace(cfg, method=Method.MUMIS, variant=variant)
    result = run_unlearning(ckpt, dataset, split.forget, split.remain, cfg)
    report = evaluate(result.checkpoint, retrain, dataset, split, trace=result.trace, method=f"mumis[{variant}]", **eval_kwargs)
    report.provenance["stop_reason"] = result.trace.stop_reason.value
    return report


@dataclass
class SweepCell:
    stop_ratio: float
    lr: float
    report: MetricsReport | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.report is None


def _sweep_cell(args) -> SweepCell:
    ckpt, dataset, split, cfg, retrain, eval_kwargs = args
    try:
        result = run_unlearning(ckpt, dataset, split.forget, split.remain, cfg)
        if result.trace.stop_reason.value == "diverged":
            raise ArithmeticError("unlearning diverged")
        report = evaluate(result.checkpoint, retrain, dataset, split, trace=result.trace, method="mumis", **eval_kwargs)
        report.provenance["stop_reason"] = result.trace.stop_reason.value
        return SweepCell(cfg.stop_ratio, cfg.lr, report)
    except Exception as exc:  # cells are isolated; the sweep records and continues
        logger.warning("sweep cell delta=%s lr=%s failed: %s", cfg.stop_ratio, cfg.lr, exc)
        return SweepCell(cfg.stop_ratio, cfg.lr, error="".join(traceback.format_exception_only(type(exc), exc)).strip())


def sweep_stop_ratio(
    ckpt: ModelCheckpoint,
    dataset: LabeledDataset,
    split: SplitIndices,
    base_cfg: UnlearnConfig,
    deltas,
    lrs,
    retrain: ModelCheckpoint,
    *,
    workers: int = 1,
    out_stem: str | Path | None = None,
    **eval_kwargs,
) -> list[SweepCell]:
    """One evaluated MU-Mis run per (stop_ratio, lr) cell."""
    deltas, lrs = list(deltas), list(lrs)
    if not deltas or not lrs:
        raise ValueError("sweep grids must be non-empty")
    jobs = [
        (ckpt, dataset, split, replace(base_cfg, method=Method.MUMIS, stop_ratio=d, lr=lr), retrain, eval_kwargs)
        for lr in lrs
        for d in deltas
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_sweep_cell, jobs))
    else:
        cells = [_sweep_cell(j) for j in jobs]
    if out_stem is not None:
        out_stem = Path(out_stem)
        write_csv(
            out_stem.with_suffix(".csv"),
            ["stop_ratio", "lr", "fa", "ra", "ta", "avg_gap", "mia", "rte_seconds", "error"],
            [
                [c.stop_ratio, c.lr, *(getattr(c.report, k) if c.report else "" for k in ("fa", "ra", "ta", "avg_gap", "mia", "rte_seconds")), c.error or ""]
                for c in cells
            ],
        )
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for lr in lrs:
            row = [c for c in cells if c.lr == lr]
            ax.plot([c.stop_ratio for c in row], [c.report.avg_gap if c.report else np.nan for c in row], marker="o", label=f"lr={lr:g}")
        ax.set_xlabel("stop ratio")
        ax.set_ylabel("Avg. Gap")
        ax.legend(fontsize=8)
        save_figure(fig, out_stem)
    return cells


# -- saliency ------------------------------------------------------------------


def saliency_maps(model, x: torch.Tensor, labels, normalize: bool = True) -> np.ndarray:
    """(N, H, W) maps of |d f_c / d x| summed over channels.

    With ``normalize`` each map is divided by its max (all-zero maps stay zero).
    """
    if x.ndim != 4:
        raise ValueError(f"saliency needs (N, C, H, W) images, got shape {tuple(x.shape)}")
    model = as_module(model)
    model.eval()
    dtype = next(model.parameters()).dtype
    xg = x.detach().to(dtype).requires_grad_(True)
    out = model(xg)
    labels = torch.as_tensor(labels, dtype=torch.long)
    (g,) = torch.autograd.grad(out.gather(1, labels[:, None]).sum(), xg, allow_unused=True)
    if g is None:
        g = torch.zeros_like(xg)
    maps = g.abs().sum(1).detach().double().numpy()
    if normalize:
        peak = maps.reshape(len(maps), -1).max(1)
        peak[peak == 0] = 1.0
        maps = maps / peak[:, None, None]
    return maps


def saliency_mass(model, x: torch.Tensor, labels) -> float:
    """Mean absolute input gradient of the target logit (unnormalized)."""
    return float(saliency_maps(model, x, labels, normalize=False).mean())


def saliency_export(model, x: torch.Tensor, labels, out_dir: str | Path, prefix: str = "saliency") -> list[Path]:
    """Write ``{prefix}_{i}_input.png`` and ``{prefix}_{i}_saliency.png`` per sample."""
    maps = saliency_maps(model, x, labels)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    imgs = x.detach().double().numpy()
    for i, heat in enumerate(maps):
        img = imgs[i].mean(0)
        p_in = out_dir / f"{prefix}_{i}_input.png"
        p_sal = out_dir / f"{prefix}_{i}_saliency.png"
        plt.imsave(p_in, img, cmap="gray")
        plt.imsave(p_sal, heat, cmap="inferno", vmin=0.0, vmax=1.0)
        paths += [p_in, p_sal]
    return paths
