"""Losses, desk-scale training, subject-aware cross-validation, metrics.

Protocol rules enforced here rather than by convention:

* folds are assigned per subject, never per record, and every
  cross-validation pass asserts zero subject overlap between a fold's
  train and test partitions (violations raise LeakageError);
* bias fitting, PCA fitting, and feature scaling consume training-fold
  records only (asserted through the fit audit);
* the decision threshold tau is read from config once and never tuned.
"""

from __future__ import annotations

import copy
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, asdict, replace as dc_replace

import numpy as np
import torch

from .aggregate import pool_record
from .audit import GLOBAL_AUDIT, FitAudit
from .backbone import BackboneConfig, EcgBackbone, linear_recurrence
from .errors import ConfigError, DataError, LeakageError, NumericError
from .ingest import DatasetCatalog, SynthSpec, catalog_build, synth_ecg
from .morphology import minirocket_fit, pca_apply, pca_fit, transform_bag
from .preprocess import preprocess_record
from .rhythm import detect_rpeaks, hrv_features, zero_hrv_vector

logger = logging.getLogger("ecgfusion")

_CLAMP = 1e-7


# ---------------------------------------------------------------------------
# Losses: closed-form numpy pair (value, gradient) plus torch twins
# ---------------------------------------------------------------------------


def bce_loss(probs, labels):
    """Mean binary cross-entropy over all elements; returns (loss, dloss/dp)."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    loss = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    grad = (-(y / p) + (1.0 - y) / (1.0 - p)) / p.size
    return loss, grad


def asl_loss(probs, labels, gamma_neg: float = 2.5, gamma_pos: float = 0.0):
    """Asymmetric focal loss; reduces to BCE at gamma_neg = gamma_pos = 0.

    Positive elements contribute (1-p)^g+ * (-ln p), negative elements
    p^g- * (-ln(1-p)); mean reduction. Returns (loss, dloss/dp).
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    pos = (1.0 - p) ** gamma_pos * (-np.log(p))
    neg = p ** gamma_neg * (-np.log1p(-p))
    loss = float(np.mean(y * pos + (1.0 - y) * neg))
    dpos = gamma_pos * (1.0 - p) ** (gamma_pos - 1.0) * np.log(p) - (1.0 - p) ** gamma_pos / p
    dneg = gamma_neg * p ** (gamma_neg - 1.0) * (-np.log1p(-p)) + p ** gamma_neg / (1.0 - p)
    grad = (y * dpos + (1.0 - y) * dneg) / p.size
    return loss, grad


def torch_bce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    p = probs.clamp(_CLAMP, 1.0 - _CLAMP)
    return (-(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p))).mean()


def torch_asl(probs: torch.Tensor, labels: torch.Tensor,
              gamma_neg: float = 2.5, gamma_pos: float = 0.0) -> torch.Tensor:
    p = probs.clamp(_CLAMP, 1.0 - _CLAMP)
    pos = (1.0 - p) ** gamma_pos * (-torch.log(p))
    neg = p ** gamma_neg * (-torch.log1p(-p))
    return (labels * pos + (1.0 - labels) * neg).mean()


# ---------------------------------------------------------------------------
# EMA of model parameters
# ---------------------------------------------------------------------------


@dataclass
class EmaState:
    shadow: dict
    decay: float

    def __post_init__(self):
        if not (0.0 < self.decay <= 1.0):
            raise ConfigError(f"EMA decay must be in (0, 1], got {self.decay}")


def ema_init(model: torch.nn.Module, decay: float = 0.999) -> EmaState:
    shadow = {name: p.detach().clone() for name, p in model.named_parameters()}
    return EmaState(shadow=shadow, decay=decay)


def ema_update(state: EmaState, params) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    if isinstance(params, torch.nn.Module):
        params = dict(params.named_parameters())
    for name, shadow in state.shadow.items():
        p = params[name].detach()
        if p.shape != shadow.shape:
            raise DataError(f"shape mismatch for {name}", code="ema-shape")
        shadow.mul_(state.decay).add_(p, alpha=1.0 - state.decay)
    return state


class ema_parameters:
    """Context manager: temporarily load EMA weights into the model."""

    def __init__(self, model: torch.nn.Module, state: EmaState):
        self.model = model
        self.state = state

    def __enter__(self):
        self.backup = {n: p.detach().clone() for n, p in self.model.named_parameters()}
        with torch.no_grad():
            for n, p in self.model.named_parameters():
                p.copy_(self.state.shadow[n])
        return self.model

    def __exit__(self, *exc):
        with torch.no_grad():
            for n, p in self.model.named_parameters():
                p.copy_(self.backup[n])
        return False


# ---------------------------------------------------------------------------
# Subject-aware folds
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    k: int
    assignment: dict               # subject_id -> fold index
    seed: int

    def __post_init__(self):
        folds = set(self.assignment.values())
        if any(not (0 <= f < self.k) for f in folds):
            raise ConfigError("fold indices out of range")
        if len(folds) != self.k:
            raise ConfigError("every fold must contain at least one subject")

    def fold_of(self, subject_id: str) -> int:
        return self.assignment[subject_id]

    def test_record_ids(self, catalog: DatasetCatalog, fold: int) -> list:
        return [e.record_id for e in catalog.entries if self.assignment[e.subject_id] == fold]

    def train_record_ids(self, catalog: DatasetCatalog, fold: int) -> list:
        return [e.record_id for e in catalog.entries if self.assignment[e.subject_id] != fold]


def subject_kfold(catalog: DatasetCatalog, k: int = 5, seed: int = 0) -> FoldSplit:
    """Shuffle subjects by seed, assign round-robin; records of one
    subject can never span folds because assignment is per subject."""
    subjects = sorted(set(e.subject_id for e in catalog.entries))
    if k > len(subjects):
        raise ConfigError(f"k={k} exceeds subject count {len(subjects)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    assignment = {subjects[j]: i % k for i, j in enumerate(order)}
    return FoldSplit(k=k, assignment=assignment, seed=seed)


# ---------------------------------------------------------------------------
# Metrics at a fixed threshold
# ---------------------------------------------------------------------------


def roc_auc(scores, labels) -> float:
    """Mann-Whitney statistic: (concordant + 0.5 * tied) / (P * N).

    Computed from average ranks; exactly equal to brute-force pair
    counting because all intermediate quantities are multiples of 1/2.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise NumericError("undefined AUC: single-class input", code="undefined-auc")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum = float(ranks[y].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_auc(scores, labels) -> float:
    """Area under the precision-recall step curve (no interpolation)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NumericError("undefined PR-AUC: no positives", code="undefined-auc")
    order = np.argsort(-s, kind="mergesort")
    y_sorted = y[order]
    s_sorted = s[order]
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        tp += int(y_sorted[i : j + 1].sum())
        fp += int((~y_sorted[i : j + 1]).sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return area


def binary_f1(pred, labels):
    """(f1, precision, recall) with the zero-division -> 0 convention."""
    pred = np.asarray(pred).astype(bool)
    y = np.asarray(labels).astype(bool)
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else 0.0
    return f1, precision, recall


def macro_f1(probs, labels, tau: float = 0.5):
    """Unweighted mean of per-class F1 at the fixed threshold tau."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    if p.shape != y.shape:
        raise DataError(f"shape mismatch {p.shape} vs {y.shape}", code="shape-mismatch")
    per_class = [binary_f1(p[:, c] > tau, y[:, c])[0] for c in range(p.shape[1])]
    return float(np.mean(per_class)), np.array(per_class)


def _macro_skipping_undefined(metric, probs, labels, class_names):
    values = {}
    for c, name in enumerate(class_names):
        try:
            values[name] = metric(probs[:, c], labels[:, c])
        except NumericError:
            warnings.warn(f"class {name!r} has a single label value; skipped in macro")
            values[name] = None
    defined = [v for v in values.values() if v is not None]
    macro = float(np.mean(defined)) if defined else float("nan")
    return macro, values


def compute_metrics(probs, labels, class_names, tau: float = 0.5) -> dict:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    macro_f, per_f = macro_f1(probs, labels, tau)
    macro_roc, roc_per = _macro_skipping_undefined(roc_auc, probs, labels, class_names)
    macro_pr, pr_per = _macro_skipping_undefined(pr_auc, probs, labels, class_names)
    per_class = {}
    for c, name in enumerate(class_names):
        f1, precision, recall = binary_f1(probs[:, c] > tau, labels[:, c])
        per_class[name] = {
            "f1": f1, "precision": precision, "recall": recall,
            "roc_auc": roc_per[name], "pr_auc": pr_per[name],
        }
    return {
        "macro_f1": macro_f,
        "macro_roc_auc": macro_roc,
        "macro_pr_auc": macro_pr,
        "per_class": per_class,
    }


def group_macro_auc(probs, labels, class_names, group_classes) -> float:
    idx = [class_names.index(c) for c in group_classes]
    macro, _ = _macro_skipping_undefined(
        roc_auc, probs[:, idx], labels[:, idx], [class_names[i] for i in idx]
    )
    return macro


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    record_ids: list
    probs: np.ndarray
    labels: np.ndarray
    metrics: dict


@dataclass
class EvalReport:
    tau: float
    class_names: tuple
    folds: list

    @property
    def protocol_deviation(self) -> bool:
        return self.tau != 0.5

    def aggregate(self) -> dict:
        keys = ("macro_f1", "macro_roc_auc", "macro_pr_auc")
        out = {}
        for key in keys:
            vals = np.array([f.metrics[key] for f in self.folds], dtype=np.float64)
            out[key] = {"mean": float(np.nanmean(vals)), "std": float(np.nanstd(vals))}
        return out

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "protocol_deviation": self.protocol_deviation,
            "class_names": list(self.class_names),
            "folds": [
                {"fold": f.fold, "n_records": len(f.record_ids), "metrics": f.metrics}
                for f in self.folds
            ],
            "aggregate": self.aggregate(),
        }

    def to_json(self) -> str:
        import json

        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["fold,macro_f1,macro_roc_auc,macro_pr_auc"]
        for f in self.folds:
            m = f.metrics
            lines.append(
                f"{f.fold},{m['macro_f1']:.6f},{m['macro_roc_auc']:.6f},{m['macro_pr_auc']:.6f}"
            )
        agg = self.aggregate()
        lines.append(
            "mean,{:.6f},{:.6f},{:.6f}".format(
                *(agg[k]["mean"] for k in ("macro_f1", "macro_roc_auc", "macro_pr_auc"))
            )
        )
        lines.append(
            "std,{:.6f},{:.6f},{:.6f}".format(
                *(agg[k]["std"] for k in ("macro_f1", "macro_roc_auc", "macro_pr_auc"))
            )
        )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Record preparation (shared by training, evaluation, CLI)
# ---------------------------------------------------------------------------


@dataclass
class PreparedRecord:
    record_id: str
    subject_id: str
    labels: np.ndarray
    slices: np.ndarray             # (M, 12, L)
    hrv_raw: np.ndarray            # (36,)


@dataclass
class TrainSettings:
    epochs_bce: int = 2            # paper-scale warmup is 8; desk default is shorter
    epochs_asl: int = 4
    batch_size: int = 32
    lr_peak: float = 9e-4
    lr_floor: float = 1e-6
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    ema_decay: float = 0.999
    gamma_neg: float = 2.5
    gamma_pos: float = 0.0
    seed: int = 0


@dataclass
class StudyConfig:
    """Everything one cross-validated run needs, in one place."""

    n_classes: int
    k_folds: int = 5
    tau: float = 0.5
    pool_q: float = 3.0
    seed: int = 0
    window: int = 2500
    stride: int = 1250
    low_hz: float = 0.5
    high_hz: float = 40.0
    filter_order: int = 4
    num_features: int = 10_000
    d_model: int = 96
    n_blocks: int = 4
    state_dim: int = 16
    token_stride: int = 5
    n_heads: int = 8
    identity_backbone: bool = False
    ablate_hrv: bool = False
    ablate_morph: bool = False
    train: TrainSettings = field(default_factory=TrainSettings)
    class_groups: dict = field(default_factory=dict)

    def model_config(self) -> BackboneConfig:
        return BackboneConfig(
            n_classes=self.n_classes,
            window=self.window,
            token_stride=self.token_stride,
            d_model=self.d_model,
            n_blocks=self.n_blocks,
            state_dim=self.state_dim,
            n_heads=self.n_heads,
            identity_backbone=self.identity_backbone,
            ablate_hrv=self.ablate_hrv,
            ablate_morph=self.ablate_morph,
        )


def prepare_records(records, catalog: DatasetCatalog, config: StudyConfig) -> list:
    """Filter, normalize, slice, and compute whole-record rhythm vectors."""
    prepared = []
    for record in records:
        bag = preprocess_record(record, config.window, config.stride,
                                config.low_hz, config.high_hz, config.filter_order)
        try:
            rr = detect_rpeaks(record.samples[1], record.fs)  # lead II
            hrv = hrv_features(rr)
        except DataError:
            hrv = zero_hrv_vector()
        prepared.append(
            PreparedRecord(
                record_id=record.record_id,
                subject_id=record.subject_id,
                labels=catalog.label_vector(record.record_id),
                slices=np.stack(bag.slices).astype(np.float32),
                hrv_raw=hrv.values.copy(),
            )
        )
    return prepared


@dataclass
class FoldArtifacts:
    """Per-fold fitted state needed to run inference on new records."""

    fold: int
    rocket: object
    pca: object
    hrv_mean: np.ndarray
    hrv_std: np.ndarray
    morph_mean: np.ndarray
    morph_std: np.ndarray
    model: EcgBackbone
    ema: EmaState


def _standardize(x, mean, std):
    return (x - mean) / (std + 1e-8)


def _pad_width(x: np.ndarray, width: int) -> np.ndarray:
    """Right-pad the last axis with zeros up to `width`."""
    if x.shape[-1] == width:
        return x
    out = np.zeros((*x.shape[:-1], width), dtype=x.dtype)
    out[..., : x.shape[-1]] = x
    return out


def _fit_fold_features(prepared, train_idx, config: StudyConfig, fold: int, audit: FitAudit):
    """Fit rocket biases, PCA, and input scalers on the training part only.

    When the training fold has fewer slices than the model's morphology
    width, PCA keeps every direction the data supports and the projected
    vector is zero-padded up to the width.
    """
    train_ids = [prepared[i].record_id for i in train_idx]
    train_slices = np.concatenate([prepared[i].slices for i in train_idx])
    rocket = minirocket_fit(train_slices, seed=config.seed + 7919 * fold,
                            num_features=config.num_features,
                            audit=audit, record_ids=train_ids)
    feats = {i: transform_bag(prepared[i].slices, rocket) for i in range(len(prepared))}
    train_feats = np.concatenate([feats[i] for i in train_idx])
    morph_dim = config.model_config().morph_dim
    pca_dim = min(morph_dim, train_feats.shape[0] - 1, train_feats.shape[1])
    pca = pca_fit(train_feats, d_out=pca_dim, fold_id=f"fold-{fold}",
                  audit=audit, record_ids=train_ids)
    morph = {i: _pad_width(pca_apply(f, pca), morph_dim) for i, f in feats.items()}
    train_morph = np.concatenate([morph[i] for i in train_idx])
    train_hrv = np.stack([prepared[i].hrv_raw for i in train_idx])
    scalers = dict(
        morph_mean=train_morph.mean(axis=0), morph_std=train_morph.std(axis=0),
        hrv_mean=train_hrv.mean(axis=0), hrv_std=train_hrv.std(axis=0),
    )
    return rocket, pca, scalers, morph


def _cosine_lr(step: int, total_steps: int, peak: float, floor: float) -> float:
    if total_steps <= 1:
        return floor
    frac = step / (total_steps - 1)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


def train_toy(slices, morph, hrv, labels, model_config: BackboneConfig,
              settings: TrainSettings, audit: FitAudit = None):
    """Desk-scale training: BCE warmup then asymmetric loss, per-step
    cosine learning rate from peak to floor, EMA of the weights.

    Deterministic for a fixed seed. A non-finite loss aborts training
    and restores the last finite-loss epoch's weights.

    Returns (model, ema_state, log_rows).
    """
    torch.manual_seed(settings.seed)
    model = EcgBackbone(model_config)
    ema = ema_init(model, settings.ema_decay)
    opt = torch.optim.AdamW(model.parameters(), lr=settings.lr_peak,
                            betas=settings.betas, weight_decay=settings.weight_decay)

    x_all = torch.from_numpy(np.asarray(slices, dtype=np.float32))
    m_all = torch.from_numpy(np.asarray(morph, dtype=np.float32))
    h_all = torch.from_numpy(np.asarray(hrv, dtype=np.float32))
    y_all = torch.from_numpy(np.asarray(labels, dtype=np.float32))

    n = x_all.shape[0]
    total_epochs = settings.epochs_bce + settings.epochs_asl
    steps_per_epoch = max(1, math.ceil(n / settings.batch_size))
    total_steps = total_epochs * steps_per_epoch
    shuffle_rng = np.random.default_rng(settings.seed)

    log_rows = []
    last_good = copy.deepcopy(model.state_dict())
    last_good_ema = {k: v.clone() for k, v in ema.shadow.items()}
    step = 0
    for epoch in range(total_epochs):
        use_bce = epoch < settings.epochs_bce
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        lr = settings.lr_peak
        for start in range(0, n, settings.batch_size):
            idx = torch.from_numpy(order[start : start + settings.batch_size].copy())
            probs = model(x_all[idx], m_all[idx], h_all[idx])
            if use_bce:
                loss = torch_bce(probs, y_all[idx])
            else:
                loss = torch_asl(probs, y_all[idx], settings.gamma_neg, settings.gamma_pos)
            lr = _cosine_lr(step, total_steps, settings.lr_peak, settings.lr_floor)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            GLOBAL_AUDIT.note_param_update()
            if audit is not None:
                audit.note_param_update()
            ema_update(ema, model)
            step += 1
            epoch_losses.append(float(loss.detach()))
        mean_loss = float(np.mean(epoch_losses))
        diverged = not np.isfinite(mean_loss)
        log_rows.append({
            "epoch": epoch, "lr": lr, "loss": mean_loss,
            "loss_kind": "bce" if use_bce else "asl", "diverged": diverged,
        })
        if diverged:
            logger.warning("training diverged at epoch %d; restoring last good weights", epoch)
            model.load_state_dict(last_good)
            ema.shadow = last_good_ema
            break
        last_good = copy.deepcopy(model.state_dict())
        last_good_ema = {k: v.clone() for k, v in ema.shadow.items()}
    return model, ema, log_rows


def predict_records(model: EcgBackbone, prepared, morph_by_idx, scalers,
                    indices, pool_q: float, batch_size: int = 64,
                    lead_mask: np.ndarray = None) -> np.ndarray:
    """Pooled record-level probabilities for the given record indices."""
    model.eval()
    probs_rows = []
    mask_t = None
    if lead_mask is not None:
        mask_t = torch.from_numpy(np.asarray(lead_mask, dtype=np.float32))
    with torch.no_grad():
        for i in indices:
            rec = prepared[i]
            x = torch.from_numpy(rec.slices.astype(np.float32))
            morph = _standardize(morph_by_idx[i], scalers["morph_mean"], scalers["morph_std"])
            hrv = _standardize(rec.hrv_raw, scalers["hrv_mean"], scalers["hrv_std"])
            m = torch.from_numpy(np.asarray(morph, dtype=np.float32))
            h = torch.from_numpy(np.tile(hrv.astype(np.float32), (len(rec.slices), 1)))
            slice_probs = []
            for start in range(0, len(x), batch_size):
                p = model(x[start : start + batch_size],
                          m[start : start + batch_size],
                          h[start : start + batch_size],
                          lead_mask=mask_t)
                slice_probs.append(p.numpy())
            pooled = pool_record(np.concatenate(slice_probs), pool_q, record_id=rec.record_id)
            probs_rows.append(pooled.probs)
    model.train()
    return np.stack(probs_rows)


def run_cv(records, catalog: DatasetCatalog, config: StudyConfig,
           audit: FitAudit = None, split: FoldSplit = None,
           collect_artifacts: bool = False):
    """Subject-aware k-fold train/eval; returns an EvalReport.

    Raises LeakageError if any subject appears on both sides of a fold
    or if a fit operation consumed a non-training record id.
    """
    if split is None:
        split = subject_kfold(catalog, config.k_folds, config.seed)
    prepared = prepare_records(records, catalog, config)
    id_to_idx = {p.record_id: i for i, p in enumerate(prepared)}
    class_names = catalog.class_names

    fold_results = []
    artifacts = []
    for fold in range(split.k):
        test_ids = split.test_record_ids(catalog, fold)
        train_ids = split.train_record_ids(catalog, fold)
        train_subjects = {catalog.entry(r).subject_id for r in train_ids}
        test_subjects = {catalog.entry(r).subject_id for r in test_ids}
        overlap = train_subjects & test_subjects
        if overlap:
            raise LeakageError(f"subjects {sorted(overlap)} span train and test in fold {fold}")
        if not test_ids or not train_ids:
            raise ConfigError(f"fold {fold} has an empty partition")

        fold_audit = FitAudit()
        train_idx = [id_to_idx[r] for r in train_ids]
        test_idx = [id_to_idx[r] for r in test_ids]
        rocket, pca, scalers, morph = _fit_fold_features(prepared, train_idx, config,
                                                         fold, fold_audit)
        illegal = fold_audit.record_ids_seen - set(train_ids)
        if illegal:
            raise LeakageError(
                f"fit operations consumed non-training records {sorted(illegal)} in fold {fold}"
            )

        x_train = np.concatenate([prepared[i].slices for i in train_idx])
        m_train = np.concatenate(
            [_standardize(morph[i], scalers["morph_mean"], scalers["morph_std"])
             for i in train_idx]
        )
        h_train = np.concatenate(
            [np.tile(_standardize(prepared[i].hrv_raw, scalers["hrv_mean"],
                                  scalers["hrv_std"]), (len(prepared[i].slices), 1))
             for i in train_idx]
        )
        y_train = np.concatenate(
            [np.tile(prepared[i].labels, (len(prepared[i].slices), 1)) for i in train_idx]
        )

        settings = dc_replace(config.train, seed=config.train.seed + fold)
        model, ema, _ = train_toy(x_train, m_train, h_train, y_train,
                                  config.model_config(), settings, audit=audit or fold_audit)

        with ema_parameters(model, ema):
            probs = predict_records(model, prepared, morph, scalers, test_idx, config.pool_q)
        labels = np.stack([prepared[i].labels for i in test_idx])
        metrics = compute_metrics(probs, labels, class_names, config.tau)
        fold_results.append(FoldResult(fold=fold, record_ids=test_ids,
                                       probs=probs, labels=labels, metrics=metrics))
        logger.info("fold %d: macro_roc_auc=%.4f macro_f1=%.4f",
                    fold, metrics["macro_roc_auc"], metrics["macro_f1"])
        if collect_artifacts:
            artifacts.append(FoldArtifacts(
                fold=fold, rocket=rocket, pca=pca,
                hrv_mean=scalers["hrv_mean"], hrv_std=scalers["hrv_std"],
                morph_mean=scalers["morph_mean"], morph_std=scalers["morph_std"],
                model=model, ema=ema,
            ))

    report = EvalReport(tau=config.tau, class_names=class_names, folds=fold_results)
    if collect_artifacts:
        return report, artifacts, split, prepared
    return report


# ---------------------------------------------------------------------------
# Lead dropout, ablations, zero-shot
# ---------------------------------------------------------------------------


def eval_with_mask(artifact: FoldArtifacts, prepared, indices, class_names,
                   pool_q: float, masked_leads=()) -> tuple:
    """Evaluate one fold's model with the given leads zeroed across the
    entire inference pipeline (features and model input alike)."""
    mask = np.ones(12, dtype=np.float32)
    for lead in masked_leads:
        mask[lead] = 0.0
    masked = []
    for i in indices:
        rec = prepared[i]
        masked_slices = rec.slices * mask[None, :, None]
        if 1 in masked_leads:
            hrv = zero_hrv_vector().values
        else:
            hrv = rec.hrv_raw
        masked.append(PreparedRecord(rec.record_id, rec.subject_id, rec.labels,
                                     masked_slices, hrv))
    width = artifact.morph_mean.shape[0]
    morph = {j: _pad_width(pca_apply(transform_bag(masked[j].slices, artifact.rocket),
                                     artifact.pca), width)
             for j in range(len(masked))}
    scalers = dict(morph_mean=artifact.morph_mean, morph_std=artifact.morph_std,
                   hrv_mean=artifact.hrv_mean, hrv_std=artifact.hrv_std)
    with ema_parameters(artifact.model, artifact.ema):
        probs = predict_records(artifact.model, masked, morph, scalers,
                                list(range(len(masked))), pool_q,
                                lead_mask=mask)
    labels = np.stack([p.labels for p in masked])
    return probs, labels


def lead_dropout_eval(artifacts, prepared, split: FoldSplit, catalog: DatasetCatalog,
                      config: StudyConfig, masked_leads) -> dict:
    """Metric deltas (masked minus baseline) per class group.

    Masked leads are zeroed before lead attention and before feature
    extraction, mirroring an acquisition without those electrodes.
    """
    id_to_idx = {p.record_id: i for i, p in enumerate(prepared)}
    class_names = catalog.class_names
    groups = config.class_groups or {"all": list(class_names)}

    base_probs, base_labels, drop_probs, drop_labels = [], [], [], []
    for artifact in artifacts:
        test_idx = [id_to_idx[r] for r in split.test_record_ids(catalog, artifact.fold)]
        bp, bl = eval_with_mask(artifact, prepared, test_idx, class_names,
                                config.pool_q, masked_leads=())
        dp, dl = eval_with_mask(artifact, prepared, test_idx, class_names,
                                config.pool_q, masked_leads=masked_leads)
        base_probs.append(bp)
        base_labels.append(bl)
        drop_probs.append(dp)
        drop_labels.append(dl)
    base_probs = np.concatenate(base_probs)
    base_labels = np.concatenate(base_labels)
    drop_probs = np.concatenate(drop_probs)
    drop_labels = np.concatenate(drop_labels)

    out = {"masked_leads": sorted(masked_leads), "groups": {}}
    for group, classes in groups.items():
        baseline = group_macro_auc(base_probs, base_labels, list(class_names), classes)
        dropped = group_macro_auc(drop_probs, drop_labels, list(class_names), classes)
        out["groups"][group] = {
            "baseline_auc": baseline,
            "masked_auc": dropped,
            "delta": dropped - baseline,
        }
    return out


ABLATION_VARIANTS = ("full", "no_hrv", "no_backbone", "no_morph")


def ablation_run(records, catalog: DatasetCatalog, config: StudyConfig,
                 variant: str) -> EvalReport:
    """Disable one pathway under the identical split, seed, and protocol."""
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    cfg = dc_replace(
        config,
        ablate_hrv=variant == "no_hrv",
        ablate_morph=variant == "no_morph",
        identity_backbone=variant == "no_backbone",
    )
    return run_cv(records, catalog, cfg)


def zeroshot_eval(artifact: FoldArtifacts, records, catalog: DatasetCatalog,
                  config: StudyConfig, audit: FitAudit = None) -> EvalReport:
    """Evaluate fitted fold artifacts on an external catalog with zero
    fitting: the global fit counters must stay untouched or
    LeakageError is raised."""
    audit = audit if audit is not None else FitAudit()
    before = (audit.total_fit_calls, GLOBAL_AUDIT.total_fit_calls)
    prepared = prepare_records(records, catalog, config)
    width = artifact.morph_mean.shape[0]
    morph = {i: _pad_width(pca_apply(transform_bag(p.slices, artifact.rocket),
                                     artifact.pca), width)
             for i, p in enumerate(prepared)}
    scalers = dict(morph_mean=artifact.morph_mean, morph_std=artifact.morph_std,
                   hrv_mean=artifact.hrv_mean, hrv_std=artifact.hrv_std)
    with ema_parameters(artifact.model, artifact.ema):
        probs = predict_records(artifact.model, prepared, morph, scalers,
                                list(range(len(prepared))), config.pool_q)
    labels = np.stack([p.labels for p in prepared])
    after = (audit.total_fit_calls, GLOBAL_AUDIT.total_fit_calls)
    if after != before:
        raise LeakageError("fit or update operations ran during zero-shot evaluation")
    metrics = compute_metrics(probs, labels, catalog.class_names, config.tau)
    result = FoldResult(fold=0, record_ids=[p.record_id for p in prepared],
                        probs=probs, labels=labels, metrics=metrics)
    return EvalReport(tau=config.tau, class_names=catalog.class_names, folds=[result])


# ---------------------------------------------------------------------------
# Scan scaling benchmark
# ---------------------------------------------------------------------------


def scan_scaling_bench(lengths=(1024, 2048, 4096, 8192), reps: int = 5,
                       channels: int = 64, state_dim: int = 16, seed: int = 0) -> dict:
    """Median wall-clock of the sequential scan per length, plus the
    runtime(2L)/runtime(L) doubling ratios."""
    torch.manual_seed(seed)
    rows = []
    for length in lengths:
        abar = torch.rand(length, 1, channels, state_dim) * 0.95
        bu = torch.randn(length, 1, channels, state_dim) * 0.01
        with torch.no_grad():
            linear_recurrence(abar, bu)  # warmup (JIT + allocator)
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                linear_recurrence(abar, bu)
                times.append(time.perf_counter() - t0)
        rows.append({"length": length, "median_s": float(np.median(times))})
    ratios = []
    for prev, cur in zip(rows, rows[1:]):
        if cur["length"] == 2 * prev["length"]:
            ratios.append({
                "from": prev["length"], "to": cur["length"],
                "ratio": cur["median_s"] / prev["median_s"],
            })
    return {"rows": rows, "ratios": ratios}


# ---------------------------------------------------------------------------
# Synthetic study construction
# ---------------------------------------------------------------------------

RHYTHM_CLASSES = ("rhythm_regular", "rhythm_irregular")
STUDY_CLASS_GROUPS = {
    "rhythm": ["rhythm_regular", "rhythm_irregular"],
    "morphology": ["morph_normal", "morph_notch"],
}


def make_study_records(n_records: int, seed: int = 0, n_beats: int = 9,
                       mean_rr_s: float = 0.75, irregular_jitter_s: float = 0.12,
                       regular_jitter_s: float = 0.01, noise_std: float = 0.05,
                       morph_classes=("morph_normal", "morph_notch"),
                       records_per_subject: int = 2):
    """Labeled synthetic cohort: every record carries one rhythm class
    (RR regularity) and one morphology class (V-lead template variant).

    Rhythm information lives only in beat timing, morphology information
    only on the precordial leads, so dropout and ablation studies have
    known ground truth about where the signal is.
    """
    rng = np.random.default_rng(seed)
    records = []
    n_subjects = math.ceil(n_records / records_per_subject)
    made = 0
    for subj in range(n_subjects):
        irregular = bool(rng.integers(2))
        morph = morph_classes[int(rng.integers(len(morph_classes)))]
        for rep in range(records_per_subject):
            if made >= n_records:
                break
            labels = (morph, RHYTHM_CLASSES[1] if irregular else RHYTHM_CLASSES[0])
            spec = SynthSpec(
                n_beats=n_beats,
                mean_rr_s=mean_rr_s,
                rr_jitter_s=irregular_jitter_s if irregular else regular_jitter_s,
                morphology_class=morph,
                noise_std=noise_std,
                seed=int(rng.integers(2 ** 31)),
                subject_id=f"subj-{subj:05d}",
                record_id=f"rec-{subj:05d}-{rep}",
                labels=labels,
            )
            record, _ = synth_ecg(spec)
            records.append(record)
            made += 1
    catalog = catalog_build(records)
    return records, catalog


def shuffle_labels(records, seed: int = 0):
    """Permute label assignments across records (null-model control)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(records))
    shuffled = []
    for rec, j in zip(records, perm):
        shuffled.append(type(rec)(
            samples=rec.samples, fs=rec.fs, subject_id=rec.subject_id,
            record_id=rec.record_id, label_names=records[j].label_names,
        ))
    catalog = catalog_build(shuffled)
    return shuffled, catalog
