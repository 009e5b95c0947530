"""Input-sensitivity norms of logits and the MU-Mis objective.

All functions put the model in evaluation mode, so batch-norm layers use
their frozen running statistics and samples in a batch do not interact.
That is what makes the summed-logit trick below yield per-sample input
gradients.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .modelzoo import as_module


class NumericalError(ArithmeticError):
    pass


def _prepare(model, x: torch.Tensor) -> tuple[nn.Module, torch.Tensor]:
    model = as_module(model)
    model.eval()
    dtype = next(model.parameters()).dtype
    return model, x.detach().to(dtype).requires_grad_(True)


def _check_classes(classes: torch.Tensor, num_classes: int) -> torch.Tensor:
    classes = torch.as_tensor(classes, dtype=torch.long)
    if classes.numel() and (classes.min() < 0 or classes.max() >= num_classes):
        raise IndexError(f"class index out of range [0, {num_classes}): {classes.tolist()}")
    return classes


def _selected_input_grad(out, x, classes, create_graph=False, retain_graph=None):
    selected = out.gather(1, classes[:, None]).sum()
    (g,) = torch.autograd.grad(selected, x, create_graph=create_graph, retain_graph=retain_graph, allow_unused=True)
    if g is None:
        g = torch.zeros_like(x)
    return g.flatten(1)


def logit_input_grad_norms(model, x: torch.Tensor, classes, squared: bool = False, batch_size: int = 512) -> torch.Tensor:
    """Per-sample Frobenius norm of d f_{classes[i]}(x_i) / d x_i."""
    model = as_module(model)
    chunks = []
    for s in range(0, len(x), batch_size):
        m, xb = _prepare(model, x[s : s + batch_size])
        out = m(xb)
        cls = _check_classes(torch.as_tensor(classes)[s : s + batch_size], out.shape[1])
        sq = _selected_input_grad(out, xb, cls).pow(2).sum(1)
        chunks.append(sq.detach())
    sq = torch.cat(chunks) if chunks else torch.zeros(0)
    return sq if squared else sq.sqrt()


def all_class_norms(model, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    """(N, C) matrix of unsquared input-gradient norms for every logit."""
    model = as_module(model)
    rows = []
    for s in range(0, len(x), batch_size):
        m, xb = _prepare(model, x[s : s + batch_size])
        out = m(xb)
        n, C = out.shape
        cols = []
        for c in range(C):
            cls = torch.full((n,), c, dtype=torch.long)
            g = _selected_input_grad(out, xb, cls, retain_graph=True)
            cols.append(g.pow(2).sum(1).sqrt().detach())
        rows.append(torch.stack(cols, 1))
    return torch.cat(rows)


def jacobian_norms(model, x: torch.Tensor) -> torch.Tensor:
    """Per-sample Frobenius norm of the full logit Jacobian d f / d x."""
    return all_class_norms(model, x).pow(2).sum(1).sqrt()


@dataclass(frozen=True)
class SensitivityRecord:
    sample_id: int
    target_norm: float
    irrelevant_mean_norm: float
    gap: float


def sensitivity_record(model, x: torch.Tensor, labels, sample_ids=None) -> list[SensitivityRecord]:
    """Target-logit norm versus mean norm over the C-1 irrelevant logits."""
    norms = all_class_norms(model, x)
    n, C = norms.shape
    if C < 2:
        raise ValueError("sensitivity records need at least 2 classes")
    labels = _check_classes(labels, C)
    target = norms.gather(1, labels[:, None]).squeeze(1)
    others = torch.ones_like(norms).scatter_(1, labels[:, None], 0.0)
    irrelevant = (norms * others).sum(1) / (C - 1)
    if sample_ids is None:
        sample_ids = range(n)
    records = []
    for sid, t, o in zip(sample_ids, target.tolist(), irrelevant.tolist()):
        records.append(SensitivityRecord(int(sid), t, o, t - o))
    return records


def mean_irrelevant_norm(model, x: torch.Tensor, labels) -> float:
    """Mean over samples of the per-sample irrelevant-class mean norm."""
    recs = sensitivity_record(model, x, labels)
    return float(np.mean([r.irrelevant_mean_norm for r in recs]))


def write_records_csv(records: list[SensitivityRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "target_norm", "irrelevant_mean_norm", "gap"])
        for r in records:
            w.writerow([r.sample_id, repr(r.target_norm), repr(r.irrelevant_mean_norm), repr(r.gap)])
    return path


def read_records_csv(path: str | Path) -> list[SensitivityRecord]:
    with Path(path).open(newline="") as fh:
        return [
            SensitivityRecord(int(r["sample_id"]), float(r["target_norm"]), float(r["irrelevant_mean_norm"]), float(r["gap"]))
            for r in csv.DictReader(fh)
        ]


def draw_irrelevant(labels: torch.Tensor, num_classes: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform c' != c for every sample."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if num_classes < 2:
        raise ValueError("need at least 2 classes to draw an irrelevant class")
    r = torch.randint(0, num_classes - 1, labels.shape, generator=generator)
    return r + (r >= labels).long()


@dataclass(frozen=True)
class LossValue:
    total: float
    tc_term: float
    oc_term: float
    alpha_c: float
    alpha_cprime: float


VARIANTS = ("full", "tc_only", "oc_only")


def mumis_objective(
    model,
    x: torch.Tensor,
    labels,
    irrelevant,
    kappa: float | None = None,
    *,
    variant: str = "full",
    per_sample_tau: bool = False,
) -> tuple[torch.Tensor, LossValue]:
    """Differentiable MU-Mis loss and its decomposition.

    ``kappa=None`` is the plain loss (mean squared target-logit norm minus
    mean squared irrelevant-logit norm).  A float ``kappa >= 1`` turns on
    the reweighting: the larger of the two terms is scaled by ``kappa``.
    The switch is decided on batch means unless ``per_sample_tau``.

    ``variant`` selects ablations: ``tc_only`` minimizes the target term,
    ``oc_only`` maximizes the irrelevant term.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    if kappa is not None and kappa < 1:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    model, xg = _prepare(model, x)
    out = model(xg)
    C = out.shape[1]
    labels = _check_classes(labels, C)
    irrelevant = _check_classes(irrelevant, C)
    if bool((labels == irrelevant).any()):
        raise ValueError("irrelevant class choice must differ from the label for every sample")

    g_c = _selected_input_grad(out, xg, labels, create_graph=True, retain_graph=True)
    g_o = _selected_input_grad(out, xg, irrelevant, create_graph=True)
    tc = g_c.pow(2).sum(1)
    oc = g_o.pow(2).sum(1)
    tc_m, oc_m = tc.mean(), oc.mean()

    a_c = a_o = 1.0
    if variant == "tc_only":
        total = tc_m
    elif variant == "oc_only":
        total = -oc_m
    elif kappa is None:
        total = tc_m - oc_m
    elif per_sample_tau:
        tau = (tc >= oc).to(tc.dtype).detach()
        alpha_c = (kappa - 1.0) * tau + 1.0
        alpha_o = (1.0 - kappa) * tau + kappa
        total = (alpha_c * tc).mean() - (alpha_o * oc).mean()
        a_c, a_o = alpha_c.mean().item(), alpha_o.mean().item()
    else:
        a_c, a_o = (float(kappa), 1.0) if tc_m.item() >= oc_m.item() else (1.0, float(kappa))
        total = a_c * tc_m - a_o * oc_m

    value = LossValue(float(total.item()), float(tc_m.item()), float(oc_m.item()), float(a_c), float(a_o))
    return total, value


def mumis_loss(model, x, labels, irrelevant, kappa: float | None = None, **kwargs) -> LossValue:
    _, value = mumis_objective(model, x, labels, irrelevant, kappa, **kwargs)
    return value


def mumis_param_grad(model, x, labels, irrelevant, kappa: float | None = None, **kwargs) -> dict[str, torch.Tensor]:
    """Gradient of the MU-Mis loss w.r.t. every trainable parameter (double backprop)."""
    model = as_module(model)
    total, _ = mumis_objective(model, x, labels, irrelevant, kappa, **kwargs)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(total, [p for _, p in named], allow_unused=True)
    result = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        result[name] = g
    return result


SIMILARITY_METRICS = ("ce_loss", "logit", "tc_sens", "oc_sens")


@dataclass
class SimilarityMatrix:
    """Cosine similarities; entries touching a zero-norm gradient are NaN and flagged."""

    values: np.ndarray
    flagged: np.ndarray
    labels: np.ndarray
    metric: str

    def block_means(self) -> tuple[float, float]:
        """(intra-class mean cosine, inter-class mean |cosine|) over off-diagonal pairs."""
        same = self.labels[:, None] == self.labels[None, :]
        off = ~np.eye(len(self.labels), dtype=bool)
        ok = ~self.flagged
        intra = self.values[same & off & ok]
        inter = np.abs(self.values[~same & ok])
        return float(intra.mean()) if intra.size else float("nan"), float(inter.mean()) if inter.size else float("nan")


def _per_sample_scalar(model, xi, yi, metric):
    xi = xi.detach().requires_grad_(metric in ("tc_sens", "oc_sens"))
    out = model(xi)
    if metric == "ce_loss":
        return F.cross_entropy(out, yi)
    if metric == "logit":
        return out[0, yi[0]]
    C = out.shape[1]
    if metric == "tc_sens":
        g = _selected_input_grad(out, xi, yi, create_graph=True)
        return g.pow(2).sum().sqrt()
    total = 0.0
    for c in range(C):
        if c == int(yi[0]):
            continue
        g = _selected_input_grad(out, xi, torch.tensor([c]), create_graph=True, retain_graph=True)
        total = total + g.pow(2).sum().sqrt()
    return total


def per_sample_param_grads(model, x: torch.Tensor, labels, metric: str) -> torch.Tensor:
    """(N, P) matrix of flattened parameter gradients of a per-sample scalar."""
    if metric not in SIMILARITY_METRICS:
        raise ValueError(f"unknown similarity metric {metric!r}")
    model = as_module(model)
    model.eval()
    dtype = next(model.parameters()).dtype
    params = [p for p in model.parameters() if p.requires_grad]
    labels = torch.as_tensor(labels, dtype=torch.long)
    rows = []
    for i in range(len(x)):
        scalar = _per_sample_scalar(model, x[i : i + 1].to(dtype), labels[i : i + 1], metric)
        grads = torch.autograd.grad(scalar, params, allow_unused=True)
        rows.append(torch.cat([(torch.zeros_like(p) if g is None else g).flatten() for p, g in zip(params, grads)]))
    return torch.stack(rows).detach()


def pairwise_grad_similarity(model, x: torch.Tensor, labels, metric: str) -> SimilarityMatrix:
    if len(x) < 2:
        raise ValueError("pairwise similarity needs at least 2 samples")
    G = per_sample_param_grads(model, x, labels, metric).double()
    norms = G.norm(dim=1)
    zero = (norms == 0) | ~torch.isfinite(norms)
    safe = torch.where(zero, torch.ones_like(norms), norms)
    U = G / safe[:, None]
    S = (U @ U.T).clamp(-1.0, 1.0)
    S = 0.5 * (S + S.T)
    S.fill_diagonal_(1.0)
    flagged = (zero[:, None] | zero[None, :]).numpy()
    values = S.numpy().copy()
    values[flagged] = np.nan
    return SimilarityMatrix(values, flagged, np.asarray(torch.as_tensor(labels)), metric)
