"""Command-line experiment runner.

Verbs: ``train`` (``--retrain`` for the oracle), ``unlearn``, ``evaluate``,
``sequential`` and ``analyze``.  Each verb reads one experiment config and
writes a content-addressed run directory under the config's ``output_dir``::

    <output_dir>/<verb>-<key>/
        manifest.json      config hash, seeds, input digests, output sha256s
        ...                verb-specific artifacts

The key hashes every input that affects the result, so rerunning with the
same inputs finds the existing directory and writes nothing unless
``--force`` is given.  Directories are assembled under a temporary name and
renamed into place.

Exit codes: 0 success, 2 config error, 3 training or optimization failure,
4 data-access audit violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .analysis import (
    ablation_run,
    before_after_norm_report,
    rise_fall_plot,
    rise_fall_table,
    saliency_export,
    sensitivity_distribution_plot,
    similarity_heatmap,
    sweep_stop_ratio,
    trace_plot,
    write_csv,
)
from .config import ConfigError, ExperimentConfig
from .data import load_dataset
from .evaluation import evaluate, kl_divergence, all_samples, render_table, table_csv, utility_accuracies
from .modelzoo import ModelCheckpoint, TrainingError, build_model, train
from .sensitivity import SIMILARITY_METRICS, NumericalError, pairwise_grad_similarity, sensitivity_record, write_records_csv
from .tasks import Mode, SpecError, TaskSpec, advance_sequence, build_split, cumulative_spec
from .unlearn import AuditViolation, StopReason, UnlearnTrace, run_unlearning

logger = logging.getLogger("mumis")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3
EXIT_AUDIT = 4

ANALYSES = ("norms", "risefall", "trajectory", "similarity", "ablation", "sweep", "saliency")


class OptimizationFailure(RuntimeError):
    """Unlearning ran but diverged; artifacts are kept for inspection."""


# -- content-addressed run directories ---------------------------------------


def _digest(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """A run directory that becomes visible only when :meth:`publish` succeeds."""

    def __init__(self, cfg: ExperimentConfig, verb: str, inputs: dict, force: bool = False):
        self.cfg = cfg
        self.verb = verb
        self.inputs = inputs
        self.key = _digest({"verb": verb, "inputs": inputs})[:12]
        self.final = Path(cfg.output_dir) / f"{verb}-{self.key}"
        self.force = force
        self.tmp: Path | None = None

    @property
    def exists(self) -> bool:
        return (self.final / "manifest.json").is_file()

    def __enter__(self) -> Path:
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.publish()
            return False
        partial = self.final.with_name(self.final.name + ".partial")
        if partial.exists():
            shutil.rmtree(partial)
        if any(self.tmp.iterdir()):
            os.replace(self.tmp, partial)
            logger.error("run failed; partial results kept in %s", partial)
        else:
            shutil.rmtree(self.tmp)
        return False

    def manifest(self) -> dict:
        doc = self.cfg.to_document()
        doc.pop("output_dir")
        files = sorted(p for p in self.tmp.rglob("*") if p.is_file() and p.name != "manifest.json")
        return {
            "schema_version": 1,
            "package_version": __version__,
            "verb": self.verb,
            "config_hash": self.cfg.config_hash(),
            "config": doc,
            "seeds": self.cfg.seeds(),
            "inputs": self.inputs,
            "outputs": {str(p.relative_to(self.tmp)): _file_sha256(p) for p in files},
        }

    def publish(self) -> None:
        manifest = self.manifest()
        (self.tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        logger.info("wrote %s (manifest %s)", self.final, manifest_hash(self.final))


def manifest_hash(run_dir: str | Path) -> str:
    return _file_sha256(Path(run_dir) / "manifest.json")[:16]


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


# -- shared plumbing ------------------------------------------------------------


def _dataset(cfg: ExperimentConfig):
    return load_dataset(cfg.dataset, cfg.split_seed)


def _train_inputs(cfg: ExperimentConfig, indices: np.ndarray, granularity: str) -> dict:
    return {
        "dataset": _dataset(cfg).dataset_id,
        "arch": cfg.arch,
        "arch_kwargs": cfg.arch_kwargs,
        "train_recipe": asdict(cfg.train_recipe),
        "granularity": granularity,
        "indices": hashlib.sha256(np.ascontiguousarray(indices, dtype=np.int64).tobytes()).hexdigest()[:16],
    }


def _training_set(cfg: ExperimentConfig, retrain: bool):
    ds = _dataset(cfg)
    if retrain:
        split = build_split(cfg.task, ds)
        return split.remain, split.granularity
    return np.sort(ds.train_idx), cfg.task.granularity


def _train_run(cfg: ExperimentConfig, retrain: bool, force: bool = False) -> RunDir:
    indices, granularity = _training_set(cfg, retrain)
    return RunDir(cfg, "retrain" if retrain else "train", _train_inputs(cfg, indices, granularity), force)


def ensure_checkpoint(cfg: ExperimentConfig, retrain: bool, force: bool = False) -> Path:
    """Checkpoint directory of the (re)trained model, training it if absent."""
    run = _train_run(cfg, retrain, force)
    if run.exists and not force:
        logger.info("reusing %s", run.final)
        return run.final / "checkpoint"
    indices, granularity = _training_set(cfg, retrain)
    ds = _dataset(cfg)
    logger.info("training %s on %d samples", "retrain oracle" if retrain else "model", len(indices))
    ckpt = train(ds, indices, cfg.train_recipe, cfg.arch, granularity, cfg.arch_kwargs)
    ckpt.extra["config_hash"] = cfg.config_hash()
    with run as tmp:
        ckpt.save(tmp / "checkpoint")
    return run.final / "checkpoint"


def _existing_checkpoint(cfg: ExperimentConfig, retrain: bool, given: str | None) -> Path:
    if given:
        path = Path(given)
        if not (path / "meta.json").is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        return path
    path = _train_run(cfg, retrain).final / "checkpoint"
    if not (path / "meta.json").is_file():
        flag = " --retrain" if retrain else ""
        raise ConfigError(f"no {'retrain' if retrain else 'pre-trained'} checkpoint for this config; run `mumis train{flag}` first")
    return path


def _load_checkpoint(path: Path) -> ModelCheckpoint:
    try:
        return ModelCheckpoint.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


def _check_compatible(**ckpts: ModelCheckpoint) -> None:
    names = list(ckpts)
    ref = ckpts[names[0]]
    for name in names[1:]:
        c = ckpts[name]
        if (c.arch_tag, c.arch_kwargs, list(c.label_space), c.granularity) != (
            ref.arch_tag,
            ref.arch_kwargs,
            list(ref.label_space),
            ref.granularity,
        ):
            raise ConfigError(f"checkpoint {name!r} does not match {names[0]!r} in architecture or label space")


def _single_request(cfg: ExperimentConfig, verb: str) -> None:
    if cfg.task.mode is Mode.SEQUENTIAL:
        raise ConfigError(f"`{verb}` takes a single-request task; use `mumis sequential` for sequential specs")


def _remain_for(split, dataset, forgotten_before) -> np.ndarray:
    remain = split.remain
    if forgotten_before:
        remain = remain[~np.isin(dataset.labels.numpy()[remain], list(forgotten_before))]
    return remain


def _unlearn(cfg, ckpt, dataset, split, forgotten_before=(), seed_offset: int = 0, probe=None):
    ucfg = replace(cfg.unlearn, seed=cfg.unlearn.seed + seed_offset)
    remain = _remain_for(split, dataset, forgotten_before)
    result = run_unlearning(ckpt, dataset, split.forget, remain, ucfg, probe)
    result.checkpoint.extra["config_hash"] = cfg.config_hash()
    return result


def _write_unlearn_outputs(out: Path, result, cfg: ExperimentConfig) -> None:
    result.checkpoint.save(out / "checkpoint")
    result.trace.to_csv(out / "trace.csv")
    summary = result.trace.summary()
    summary["config_hash"] = cfg.config_hash()
    _write_json(out / "trace_summary.json", summary)
    _write_json(out / "audit.json", {**result.audit.to_dict(), "method": result.trace.method})


# -- verbs --------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, args) -> int:
    path = ensure_checkpoint(cfg, args.retrain, args.force)
    print(path)
    print(f"manifest {manifest_hash(path.parent)}")
    return EXIT_OK


def cmd_unlearn(cfg: ExperimentConfig, args) -> int:
    _single_request(cfg, "unlearn")
    ckpt_path = _existing_checkpoint(cfg, False, args.checkpoint)
    ckpt = _load_checkpoint(ckpt_path)
    ds = _dataset(cfg)
    split = build_split(cfg.task, ds)
    inputs = {"pretrain": ckpt.digest(), "split": split.digest(), "unlearn": cfg.unlearn.to_dict()}
    run = RunDir(cfg, "unlearn", inputs, args.force)
    if run.exists and not args.force:
        print(run.final)
        return EXIT_OK
    try:
        result = _unlearn(cfg, ckpt, ds, split)
    except AuditViolation as exc:
        report = run.final.with_name(run.final.name + ".audit-violation.json")
        _write_json(report, {"error": str(exc), "method": cfg.unlearn.method.value, "config_hash": cfg.config_hash()})
        raise
    with run as tmp:
        _write_unlearn_outputs(tmp, result, cfg)
        _write_json(tmp / "split.json", split.to_dict())
    print(run.final)
    if result.trace.stop_reason is StopReason.DIVERGED:
        raise OptimizationFailure(f"unlearning diverged; artifacts in {run.final}")
    return EXIT_OK


def _unlearned_trace_rte(ckpt_path: Path) -> float | None:
    summary = ckpt_path.parent / "trace_summary.json"
    if summary.is_file():
        return json.loads(summary.read_text()).get("rte_seconds")
    return None


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    _single_request(cfg, "evaluate")
    ds = _dataset(cfg)
    split = build_split(cfg.task, ds)
    pre_path = _existing_checkpoint(cfg, False, args.pretrain)
    ret_path = _existing_checkpoint(cfg, True, args.retrain)
    if args.unlearned:
        un_path = Path(args.unlearned)
    else:
        pre = _load_checkpoint(pre_path)
        inputs = {"pretrain": pre.digest(), "split": split.digest(), "unlearn": cfg.unlearn.to_dict()}
        un_path = RunDir(cfg, "unlearn", inputs).final / "checkpoint"
        if not (un_path / "meta.json").is_file():
            raise ConfigError("no unlearned checkpoint for this config; run `mumis unlearn` first or pass --unlearned")
    ckpts = {"unlearned": _load_checkpoint(un_path), "retrain": _load_checkpoint(ret_path), "pretrain": _load_checkpoint(pre_path)}
    _check_compatible(**ckpts)

    inputs = {k: c.digest() for k, c in ckpts.items()}
    inputs.update(split=split.digest(), eval=asdict(cfg.eval), mia_seed=cfg.seeds()["mia"])
    run = RunDir(cfg, "evaluate", inputs, args.force)
    if run.exists and not args.force:
        print((run.final / "table.txt").read_text(), end="")
        print(run.final)
        return EXIT_OK

    retrain = ckpts["retrain"]
    ref = utility_accuracies(retrain, ds, split)
    method = ckpts["unlearned"].extra.get("unlearn", {}).get("method", "unlearned")
    reports = {}
    for name, ckpt in (("pretrain", ckpts["pretrain"]), ("retrain", retrain), (method, ckpts["unlearned"])):
        rep = evaluate(
            ckpt,
            retrain,
            ds,
            split,
            retrain_accs=ref,
            mia=cfg.eval.mia,
            kl=cfg.eval.kl,
            seed=cfg.seeds()["mia"],
            mia_pool_size=cfg.eval.mia_pool_size,
            method=name,
        )
        rep.provenance.update(config_hash=cfg.config_hash(), checkpoint=ckpt.digest())
        reports[name] = rep
    reports[method].rte_seconds = _unlearned_trace_rte(un_path)
    table = render_table(reports)
    with run as tmp:
        reports[method].save(tmp / "report.json")
        _write_json(tmp / "reports.json", {k: r.to_dict() for k, r in reports.items()})
        (tmp / "table.txt").write_text(table + "\n")
        (tmp / "table.csv").write_text(table_csv(reports))
    print(table)
    print(run.final)
    return EXIT_OK


def _sequence(task: TaskSpec):
    """(request spec, forgotten-before set, cumulative spec) per step."""
    if task.mode is not Mode.SEQUENTIAL:
        return [(task, frozenset(), task)]
    steps = []
    for k in range(task.num_requests):
        step = advance_sequence(task, k)
        steps.append((step.request, step.forgotten_before, cumulative_spec(task, k)))
    return steps


def _sequence_plots(rows: list[dict], out: Path) -> None:
    import matplotlib.pyplot as plt

    from .analysis import save_figure

    steps = [r["step"] + 1 for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].bar(steps, [r["avg_gap"] for r in rows])
    axes[0].set_title("utility Avg. Gap")
    axes[1].bar(steps, [np.nan if r["resilience_avg_gap"] is None else r["resilience_avg_gap"] for r in rows])
    axes[1].set_title("resilience Avg. Gap")
    axes[2].plot(steps, [r["kl_div"] for r in rows], marker="o", label="unlearned")
    axes[2].plot(steps, [r["pretrain_kl"] for r in rows], marker="s", ls="--", label="pre-trained")
    axes[2].set_title("KL to retrain")
    axes[2].legend(fontsize=8)
    for ax in axes:
        ax.set_xlabel("request")
        ax.set_xticks(steps)
    save_figure(fig, out / "sequence")


def cmd_sequential(cfg: ExperimentConfig, args) -> int:
    ds = _dataset(cfg)
    pre_path = _existing_checkpoint(cfg, False, args.checkpoint)
    pre = _load_checkpoint(pre_path)
    steps = _sequence(cfg.task)
    inputs = {
        "pretrain": pre.digest(),
        "task": cfg.task.to_dict(),
        "train_recipe": asdict(cfg.train_recipe),
        "unlearn": cfg.unlearn.to_dict(),
        "eval": asdict(cfg.eval),
        "mia_seed": cfg.seeds()["mia"],
    }
    run = RunDir(cfg, "sequential", inputs, args.force)
    if run.exists and not args.force:
        print(run.final)
        return EXIT_OK

    # oracles are ordinary retrain runs, shared with `mumis train --retrain`
    oracles = [ensure_checkpoint(cfg.with_task(cum), retrain=True) for _, _, cum in steps]
    rows, reports = [], {}
    current = pre
    with run as tmp:
        for k, ((request, before, _), oracle_path) in enumerate(zip(steps, oracles)):
            oracle = _load_checkpoint(oracle_path)
            split = build_split(request, ds)
            before = tuple(sorted(before))
            result = _unlearn(cfg, current, ds, split, before, seed_offset=k)
            current = result.checkpoint
            rep = evaluate(
                current,
                oracle,
                ds,
                split,
                trace=result.trace,
                forgotten_before=before,
                mia=cfg.eval.mia,
                kl=cfg.eval.kl,
                seed=cfg.seeds()["mia"],
                mia_pool_size=cfg.eval.mia_pool_size,
                method=cfg.unlearn.method.value,
            )
            pre_kl = kl_divergence(oracle, pre, all_samples(ds)) if cfg.eval.kl else None
            rep.provenance.update(
                config_hash=cfg.config_hash(),
                step=k,
                request=request.to_dict(),
                forgotten_before=list(before),
                pretrain_kl=pre_kl,
                stop_reason=result.trace.stop_reason.value,
            )
            step_dir = tmp / f"step_{k}"
            _write_unlearn_outputs(step_dir, result, cfg)
            rep.save(step_dir / "report.json")
            reports[f"step {k + 1}"] = rep
            rows.append({"step": k, **rep.to_dict(), "pretrain_kl": pre_kl})
            logger.info("step %d: FA %.2f RA %.2f Avg. Gap %.2f", k + 1, rep.fa, rep.ra, rep.avg_gap)
        table = render_table(reports)
        (tmp / "table.txt").write_text(table + "\n")
        _write_json(tmp / "steps.json", [{k: v for k, v in r.items() if k != "provenance"} for r in rows])
        if cfg.eval.kl:
            _sequence_plots(rows, tmp)
    print(table)
    print(run.final)
    return EXIT_OK


# -- analyze --------------------------------------------------------------------------


def _analysis_inputs(cfg, args, **extra) -> dict:
    keys = ("kind", "checkpoint", "unlearned", "trace_dir", "per_class", "count", "deltas", "lrs")
    return {
        "analysis": {k: getattr(args, k, None) for k in keys},
        "config_hash": cfg.config_hash(),
        **extra,
    }


def _an_norms(cfg, args, ds, pre, tmp: Path) -> dict:
    torch.manual_seed(cfg.train_recipe.seed)
    init_model = build_model(cfg.arch, ds.input_shape, pre.num_classes, **cfg.arch_kwargs).eval()
    init = ModelCheckpoint.from_model(init_model, cfg.arch, ds.input_shape, pre.label_space, arch_kwargs=cfg.arch_kwargs)
    idx = np.sort(ds.train_idx)
    x, y = ds.images[idx], ds.targets(pre.granularity)[idx]
    report = before_after_norm_report(init, pre, x, tmp / "jacobian_norms")
    rec_init = sensitivity_record(init, x, y, idx)
    rec_pre = sensitivity_record(pre, x, y, idx)
    sensitivity_distribution_plot(rec_init, rec_pre, tmp / "target_vs_irrelevant")
    write_records_csv(rec_init, tmp / "records_init.csv")
    write_records_csv(rec_pre, tmp / "records_trained.csv")
    return {
        "initial": report.initial,
        "trained": report.trained,
        "growth": report.growth,
        "wasserstein": report.distance,
        "gap_positive_pct": 100.0 * float(np.mean([r.gap > 0 for r in rec_pre])),
    }


def _an_risefall(cfg, args, ds, pre, tmp: Path) -> dict:
    _single_request(cfg, "analyze risefall")
    ret = _load_checkpoint(_existing_checkpoint(cfg, True, None))
    split = build_split(cfg.task, ds)
    x, y = ds.images[split.forget], ds.targets(split.granularity)[split.forget]
    rec_ret = sensitivity_record(ret, x, y, split.forget)
    rec_pre = sensitivity_record(pre, x, y, split.forget)
    table = rise_fall_table(rec_ret, rec_pre)
    write_csv(tmp / "rise_fall.csv", ["quantity", "rise_pct", "fall_pct", "n"], [[s.quantity, s.rise_pct, s.fall_pct, s.n] for s in table])
    rise_fall_plot(table, tmp / "rise_fall")
    return {s.quantity: {"rise_pct": s.rise_pct, "fall_pct": s.fall_pct, "n": s.n} for s in table}


def _an_trajectory(cfg, args, ds, pre, tmp: Path) -> dict:
    if not args.trace_dir:
        raise ConfigError("analyze trajectory needs --trace-dir (an unlearn run directory)")
    trace_csv = Path(args.trace_dir) / "trace.csv"
    if not trace_csv.is_file():
        raise ConfigError(f"no trace.csv in {args.trace_dir}")
    trace = UnlearnTrace.from_csv(trace_csv)
    retrain_accs = None
    try:
        ret = _load_checkpoint(_existing_checkpoint(cfg, True, None))
        retrain_accs = utility_accuracies(ret, ds, build_split(cfg.task, ds))
    except ConfigError:
        logger.info("no retrain oracle found; plotting without reference lines")
    trace_plot(trace, tmp / "trajectory", retrain_accs)
    return {"records": len(trace.records), "epsilon_non_increasing": bool(np.all(np.diff(trace.epsilons) <= 0))}


def _an_similarity(cfg, args, ds, pre, tmp: Path) -> dict:
    classes = sorted(set(ds.labels.numpy()[ds.train_idx].tolist()))
    idx = np.concatenate([ds.class_indices([c], "train")[: args.per_class] for c in classes])
    x, y = ds.images[idx], ds.targets(pre.granularity)[idx]
    out = {}
    for metric in SIMILARITY_METRICS:
        m = pairwise_grad_similarity(pre, x, y, metric)
        similarity_heatmap(m, tmp / f"similarity_{metric}")
        np.save(tmp / f"similarity_{metric}.npy", m.values)
        intra, inter = m.block_means()
        out[metric] = {"intra_mean_cos": intra, "inter_mean_abs_cos": inter, "flagged": int(m.flagged.any(1).sum())}
    return out


def _an_ablation(cfg, args, ds, pre, tmp: Path) -> dict:
    _single_request(cfg, "analyze ablation")
    ret = _load_checkpoint(_existing_checkpoint(cfg, True, None))
    split = build_split(cfg.task, ds)
    reports = {}
    for variant in ("full", "tc_only", "oc_only"):
        reports[variant] = ablation_run(
            pre, ds, split, cfg.unlearn, variant, ret, mia=cfg.eval.mia, kl=cfg.eval.kl, seed=cfg.seeds()["mia"]
        )
    (tmp / "table.txt").write_text(render_table(reports) + "\n")
    (tmp / "table.csv").write_text(table_csv(reports))
    print(render_table(reports))
    return {k: r.to_dict() for k, r in reports.items()}


def _floats(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag} must be a comma-separated list of numbers, got {text!r}") from None


def _an_sweep(cfg, args, ds, pre, tmp: Path) -> dict:
    _single_request(cfg, "analyze sweep")
    ret = _load_checkpoint(_existing_checkpoint(cfg, True, None))
    split = build_split(cfg.task, ds)
    cells = sweep_stop_ratio(
        pre,
        ds,
        split,
        cfg.unlearn,
        _floats(args.deltas, "--deltas"),
        _floats(args.lrs, "--lrs"),
        ret,
        workers=args.workers,
        out_stem=tmp / "sweep",
        mia=cfg.eval.mia,
        kl=False,
        seed=cfg.seeds()["mia"],
    )
    return {f"delta={c.stop_ratio:g},lr={c.lr:g}": (c.report.to_dict() if c.report else {"error": c.error}) for c in cells}


def _an_saliency(cfg, args, ds, pre, tmp: Path) -> dict:
    _single_request(cfg, "analyze saliency")
    split = build_split(cfg.task, ds)
    idx = split.forget[: args.count]
    x, y = ds.images[idx], ds.targets(split.granularity)[idx]
    files = saliency_export(pre, x, y, tmp, prefix="pretrain")
    if args.unlearned:
        files += saliency_export(_load_checkpoint(Path(args.unlearned)), x, y, tmp, prefix="unlearned")
    return {"samples": idx.tolist(), "files": len(files)}


_ANALYSES = {
    "norms": _an_norms,
    "risefall": _an_risefall,
    "trajectory": _an_trajectory,
    "similarity": _an_similarity,
    "ablation": _an_ablation,
    "sweep": _an_sweep,
    "saliency": _an_saliency,
}


def cmd_analyze(cfg: ExperimentConfig, args) -> int:
    ds = _dataset(cfg)
    pre = _load_checkpoint(_existing_checkpoint(cfg, False, args.checkpoint))
    run = RunDir(cfg, f"analyze-{args.kind}", _analysis_inputs(cfg, args, pretrain=pre.digest()), args.force)
    if run.exists and not args.force:
        print(run.final)
        return EXIT_OK
    with run as tmp:
        summary = _ANALYSES[args.kind](cfg, args, ds, pre, tmp)
        _write_json(tmp / "summary.json", {"config_hash": cfg.config_hash(), **summary})
    print(run.final)
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config JSON")
    common.add_argument("--seed", type=int, default=None, help="override the top-level seed")
    common.add_argument("--output", default=None, help="override output_dir")
    common.add_argument("--force", action="store_true", help="recompute and replace an existing run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mumis", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", parents=[common], help="train the pre-trained model or the retrain oracle")
    p.add_argument("--retrain", action="store_true", help="train on the remaining data of the task only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unlearn", parents=[common], help="run the configured unlearning method")
    p.add_argument("--checkpoint", help="pre-trained checkpoint directory (default: this config's train run)")
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("evaluate", parents=[common], help="metrics and a method comparison table")
    p.add_argument("--unlearned", help="unlearned checkpoint directory (default: this config's unlearn run)")
    p.add_argument("--retrain", help="retrain-oracle checkpoint directory")
    p.add_argument("--pretrain", help="pre-trained checkpoint directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sequential", parents=[common], help="unlearn the requests of a sequential task in order")
    p.add_argument("--checkpoint", help="pre-trained checkpoint directory")
    p.set_defaults(func=cmd_sequential)

    p = sub.add_parser("analyze", parents=[common], help="diagnostic studies and figures")
    p.add_argument("kind", choices=ANALYSES)
    p.add_argument("--checkpoint", help="pre-trained checkpoint directory")
    p.add_argument("--unlearned", help="unlearned checkpoint (saliency)")
    p.add_argument("--trace-dir", help="unlearn run directory (trajectory)")
    p.add_argument("--per-class", type=int, default=6, help="samples per class (similarity)")
    p.add_argument("--count", type=int, default=8, help="forgetting samples to export (saliency)")
    p.add_argument("--deltas", default="1.1,1.3,1.5,2.0", help="stop ratios (sweep)")
    p.add_argument("--lrs", default="1e-3,3e-3,1e-2", help="learning rates (sweep)")
    p.add_argument("--workers", type=int, default=1, help="worker processes (sweep)")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        cfg = ExperimentConfig.load(args.config, seed=args.seed)
        if args.output:
            cfg = replace(cfg, output_dir=str(Path(args.output).resolve()))
        return args.func(cfg, args)
    except (ConfigError, SpecError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except AuditViolation as exc:
        logger.error("audit violation: %s", exc)
        return EXIT_AUDIT
    except (TrainingError, NumericalError, OptimizationFailure) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
