"""Training orchestration: teacher pre-training, the per-iteration joint loop,
optimizers, ablation dispatch, and metrics/checkpoint output.

The full pipeline is: pre-train one dual-head teacher on labeled data, derive
the inlier and outlier teacher-student pairs from it, then run a fixed number
of iterations. Within an iteration the teachers are frozen; every step scores
the unlabeled batch with the teachers, updates the inlier student on its
objective, then updates the outlier student on its objective. At iteration
boundaries each student is copied into its teacher.

Ablation modes reconfigure this pipeline (which pairs exist, how samples are
scored and weighted, which loss terms are active) without changing the step
mechanics, so structural invariants hold across modes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses
from .data import AugmentConfig, MismatchSplit, PairSampler, augment_batch, feature_scale
from .errors import ValidationError
from .evaluation import (
    EvalResult,
    compute_accuracy,
    compute_auroc,
    per_class_accuracy,
    predict_labels,
    score_histogram,
)
from .losses import LossReport
from .models import (
    BackboneSpec,
    DualHeadModel,
    TeacherStudentPair,
    derive_pair,
    init_teacher,
    refresh_teacher,
    save_model,
)
from .soft_weighting import gate_mask, scores_from_probs

ABLATION_MODES = (
    "full",
    "no_its",
    "no_soft_weighting",
    "no_k1_its",
    "no_k1_ots",
    "no_logit_match",
    "no_consistency",
    "one_f_two_c",
    "one_f_two_c_proj",
    "supervised_only",
)


@dataclass
class TrainConfig:
    """All hyperparameters of a run. Defaults are the reference full-scale values;
    :meth:`desk` swaps in a configuration that finishes in seconds on synthetic data.
    """

    lambda_seen: float = 0.25
    lambda_lm: float = 0.25
    lambda_unseen: float = 0.1
    lambda_cr: float = 0.3
    mu: int = 7
    tau: float = 0.85
    batch_size: int = 256
    gamma: float = 0.5
    epochs_per_iteration: int = 400
    iterations: int = 3
    pretrain_epochs: int = 1000
    lr: float = 0.128
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "constant"  # "constant" | "cosine"
    ablation_mode: str = "full"
    seed: int = 0
    hidden_widths: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    activation: str = "tanh"
    weak_sigma: float = 0.05
    strong_sigma: float = 0.2
    mask_fraction: float = 0.25
    exclude_k1_pseudo: bool = False
    unseen_hard_threshold: float = 0.85  # hard mask level in no_soft_weighting
    uniformity_threshold: float = 0.5  # mask level for the K-head outlier ablation
    cache_scores: bool = False
    eval_every: int = 1
    dump_scores: bool = False  # per-epoch score dump for AUROC auditing

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Desk-scale defaults: minutes-long end-to-end runs on synthetic data."""
        base = dict(
            mu=3,
            batch_size=64,
            epochs_per_iteration=20,
            iterations=2,
            pretrain_epochs=50,
            lr=0.05,
        )
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        checks = [
            (self.lambda_seen >= 0, "lambda_seen: must be >= 0"),
            (self.lambda_lm >= 0, "lambda_lm: must be >= 0"),
            (self.lambda_unseen >= 0, "lambda_unseen: must be >= 0"),
            (self.lambda_cr >= 0, "lambda_cr: must be >= 0"),
            (self.mu >= 1, "mu: must be >= 1"),
            (0.0 < self.tau < 1.0, "tau: must lie in (0, 1)"),
            (self.batch_size >= 1, "batch_size: must be >= 1"),
            (0.0 <= self.gamma <= 1.0, "gamma: must lie in [0, 1]"),
            (self.epochs_per_iteration >= 1, "epochs_per_iteration: must be >= 1"),
            (self.iterations >= 1, "iterations: must be >= 1"),
            (self.pretrain_epochs >= 1, "pretrain_epochs: must be >= 1"),
            (self.lr > 0, "lr: must be > 0"),
            (0.0 <= self.momentum < 1.0, "momentum: must lie in [0, 1)"),
            (self.weight_decay >= 0, "weight_decay: must be >= 0"),
            (self.lr_schedule in ("constant", "cosine"), "lr_schedule: unknown schedule"),
            (self.ablation_mode in ABLATION_MODES, f"ablation_mode: unknown mode {self.ablation_mode!r}"),
            (0.0 < self.unseen_hard_threshold < 1.0, "unseen_hard_threshold: must lie in (0, 1)"),
            (0.0 < self.uniformity_threshold < 1.0, "uniformity_threshold: must lie in (0, 1)"),
            (self.eval_every >= 1, "eval_every: must be >= 1"),
        ]
        problems = [msg for ok, msg in checks if not ok]
        if problems:
            raise ValidationError("; ".join(problems))

    @property
    def total_train_epochs(self) -> int:
        return self.iterations * self.epochs_per_iteration

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        raw = dict(raw)
        if "hidden_widths" in raw:
            raw["hidden_widths"] = tuple(raw["hidden_widths"])
        return cls(**raw)


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Ablation dispatch
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineDescription:
    """Effective pipeline after applying an ablation mode.

    ``pairs`` maps pair name to the head its models carry. ``score_mode``
    selects how unlabeled samples are scored, ``unseen_weighting`` how those
    scores weight the extra-class supervision, and the lambdas are the
    effective loss weights (zeroed where a mode removes a term).
    """

    mode: str
    pairs: tuple[tuple[str, str], ...]  # (name, pair kind for derive_pair)
    uses_unlabeled: bool
    score_mode: str  # "blend" | "outlier_blend" | "one_minus_max" | "none"
    unseen_weighting: str  # "soft" | "hard_mask" | "uniform_push" | "none"
    inlier_losses: tuple[str, ...]
    outlier_losses: tuple[str, ...]
    gate_uses_score: bool
    classifier: str  # "inlier" | "outlier" | "merged"
    labeled_view: str  # augmentation for the labeled cross-entropy views
    lambda_seen: float
    lambda_lm: float
    lambda_unseen: float
    lambda_cr: float
    k1_projection: bool
    summary: str


def apply_ablation(mode: str, config: TrainConfig) -> PipelineDescription:
    """Translate an ablation mode into the effective pipeline description."""
    if mode not in ABLATION_MODES:
        raise ValidationError(f"ablation_mode: unknown mode {mode!r}, expected one of {ABLATION_MODES}")
    lam = dict(
        lambda_seen=config.lambda_seen,
        lambda_lm=config.lambda_lm,
        lambda_unseen=config.lambda_unseen,
        lambda_cr=config.lambda_cr,
    )
    base = dict(
        mode=mode,
        pairs=(("inlier", "inlier"), ("outlier", "outlier")),
        uses_unlabeled=True,
        score_mode="blend",
        unseen_weighting="soft",
        inlier_losses=("ce", "seen", "lm"),
        outlier_losses=("ce", "seen", "unseen", "cr"),
        gate_uses_score=True,
        classifier="inlier",
        labeled_view="strong",
        k1_projection=False,
        summary="dual teacher-student pairs, soft-weighted unseen supervision",
        **lam,
    )
    if mode == "full":
        pass
    elif mode == "no_logit_match":
        base.update(
            inlier_losses=("ce", "seen"),
            lambda_lm=0.0,
            summary="full pipeline without the teacher-student logit matching term",
        )
    elif mode == "no_consistency":
        base.update(
            outlier_losses=("ce", "seen", "unseen"),
            lambda_cr=0.0,
            summary="full pipeline without weak/strong consistency regularization",
        )
    elif mode == "no_soft_weighting":
        base.update(
            unseen_weighting="hard_mask",
            summary=f"unseen supervision hard-masked at score > {config.unseen_hard_threshold}",
        )
    elif mode == "no_its":
        base.update(
            pairs=(("outlier", "outlier"),),
            inlier_losses=(),
            lambda_lm=0.0,
            score_mode="outlier_blend",
            classifier="outlier",
            summary="single (K+1)-head pair handles both classification and detection",
        )
    elif mode == "supervised_only":
        base.update(
            pairs=(("inlier", "inlier"),),
            uses_unlabeled=False,
            score_mode="one_minus_max",
            unseen_weighting="none",
            inlier_losses=("ce",),
            outlier_losses=(),
            lambda_seen=0.0,
            lambda_lm=0.0,
            lambda_unseen=0.0,
            lambda_cr=0.0,
            summary="labeled cross-entropy only; unlabeled data never touched",
        )
    elif mode == "no_k1_its":
        # plain confidence-threshold pseudo-labeling: no unseen class, no
        # score, and no teacher-student logit matching
        base.update(
            pairs=(("inlier", "inlier"),),
            inlier_losses=("ce", "seen"),
            outlier_losses=(),
            score_mode="one_minus_max",
            unseen_weighting="none",
            gate_uses_score=False,
            lambda_lm=0.0,
            lambda_unseen=0.0,
            lambda_cr=0.0,
            summary="K-head pair with confidence-threshold pseudo-labeling only",
        )
    elif mode == "no_k1_ots":
        base.update(
            pairs=(("outlier", "inlier"),),  # outlier-style branch on a K-head pair
            inlier_losses=(),
            score_mode="one_minus_max",
            unseen_weighting="uniform_push",
            gate_uses_score=False,
            classifier="outlier",
            lambda_lm=0.0,
            summary=(
                "K-head pair; high-uncertainty samples pushed toward uniform output "
                f"(mask at 1-max > {config.uniformity_threshold})"
            ),
        )
    elif mode in ("one_f_two_c", "one_f_two_c_proj"):
        base.update(
            pairs=(("merged", "merged"),),
            classifier="merged",
            k1_projection=(mode == "one_f_two_c_proj"),
            summary="single backbone carrying both heads; both objectives on one model"
            + (" with a projection layer before the (K+1)-head" if mode == "one_f_two_c_proj" else ""),
        )
    return PipelineDescription(**base)


def unseen_sample_weights(scores: np.ndarray, pipeline: PipelineDescription, config: TrainConfig) -> np.ndarray:
    """Per-sample weights applied to the unseen-class supervision term."""
    scores = np.asarray(scores, dtype=np.float64)
    if pipeline.unseen_weighting == "soft":
        return scores
    if pipeline.unseen_weighting == "hard_mask":
        return (scores > config.unseen_hard_threshold).astype(np.float64)
    if pipeline.unseen_weighting == "uniform_push":
        return (scores > config.uniformity_threshold).astype(np.float64)
    return np.zeros_like(scores)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class SGD:
    """SGD with momentum and (coupled) weight decay, one velocity per tensor."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float, weight_decay: float) -> None:
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            g = g + self.weight_decay * params[name]
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            params[name] -= lr * v


def _lr_at(config: TrainConfig, global_epoch: int, total_epochs: int) -> float:
    if config.lr_schedule == "cosine":
        t = global_epoch / max(1, total_epochs - 1)
        return config.lr * 0.5 * (1.0 + np.cos(np.pi * min(t, 1.0)))
    return config.lr


# ---------------------------------------------------------------------------
# Train state
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    pipeline: PipelineDescription
    teacher: DualHeadModel
    pairs: dict[str, TeacherStudentPair]
    optimizers: dict[str, SGD]
    sampler: PairSampler
    rng: np.random.Generator
    scale: np.ndarray
    aug: AugmentConfig
    split: MismatchSplit
    iteration: int = 0
    global_epoch: int = 0
    history: list[dict] = field(default_factory=list)
    training_unlabeled_forwards: int = 0
    score_cache: dict | None = None
    out_dir: Path | None = None

    @property
    def total_epochs(self) -> int:
        return self.config.pretrain_epochs + self.config.total_train_epochs


@dataclass
class TrainResult:
    config: TrainConfig
    pipeline: PipelineDescription
    teacher: DualHeadModel
    pairs: dict[str, TeacherStudentPair]
    history: list[dict]
    final_eval: EvalResult


# ---------------------------------------------------------------------------
# Teacher pre-training
# ---------------------------------------------------------------------------


def pretrain_teacher(
    teacher: DualHeadModel,
    labeled_x: np.ndarray,
    labeled_y: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    scale: np.ndarray | None = None,
    on_epoch: Callable[[int, LossReport], None] | None = None,
) -> DualHeadModel:
    """Optimize both heads on labeled strong views for ``config.pretrain_epochs``.

    No unlabeled example appears anywhere in this phase; the (K+1)-head trains
    with the same 1..K labels (it simply never sees a positive for the extra
    class). Sets the pre-trained flag required by pair derivation.
    """
    labeled_x = np.atleast_2d(np.asarray(labeled_x, dtype=np.float64))
    labeled_y = np.asarray(labeled_y, dtype=np.int64)
    if len(labeled_x) == 0:
        raise ValidationError("pre-training requires a nonempty labeled set")
    if labeled_y.min() < 1 or labeled_y.max() > teacher.K:
        raise ValidationError(f"labels must lie in 1..{teacher.K}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    scale = labeled_x.std(axis=0) if scale is None else scale
    aug = AugmentConfig(config.weak_sigma, config.strong_sigma, config.mask_fraction)
    optimizer = SGD(teacher.params, config.momentum, config.weight_decay)
    m = len(labeled_x)
    order = np.arange(m)
    total = config.pretrain_epochs + config.total_train_epochs
    for epoch in range(config.pretrain_epochs):
        lr = _lr_at(config, epoch, total)
        rng.shuffle(order)
        reports = []
        for start in range(0, m, config.batch_size):
            idx = order[start : start + config.batch_size]
            strong_x = augment_batch(labeled_x[idx], "strong", rng, scale, aug)
            z, cache = teacher.logits(strong_x, heads=("k", "k1"))
            ce_k, d_k = losses.ce_loss_and_grad(labeled_y[idx], z["k"])
            ce_k1, d_k1 = losses.ce_loss_and_grad(labeled_y[idx], z["k1"])
            grads = teacher.backward(cache, {"k": d_k, "k1": d_k1})
            optimizer.step(teacher.params, grads, lr)
            reports.append(
                LossReport(ce_k=ce_k, ce_k1=ce_k1, pretrain_total=losses.pretrain_objective(ce_k, ce_k1))
            )
        if on_epoch is not None:
            on_epoch(epoch, _mean_report(reports))
    teacher.pretrained = True
    return teacher


def _mean_report(reports: list[LossReport]) -> LossReport:
    if not reports:
        return LossReport()
    agg = {
        f.name: float(np.mean([getattr(r, f.name) for r in reports]))
        for f in dataclasses.fields(LossReport)
    }
    return LossReport(**agg)


# ---------------------------------------------------------------------------
# The per-step teacher-side quantities
# ---------------------------------------------------------------------------


@dataclass
class _TeacherView:
    """Frozen-teacher quantities for one unlabeled batch."""

    scores: np.ndarray
    teacher_probs_in: np.ndarray | None  # K-way distribution used for ITS gating / matching
    max_in: np.ndarray | None
    pseudo_in: np.ndarray | None
    max_out: np.ndarray | None
    pseudo_out: np.ndarray | None


def _teacher_quantities(state: TrainState, weak_u: np.ndarray, u_idx: np.ndarray) -> _TeacherView:
    pipe = state.pipeline
    cfg = state.config
    if state.score_cache is not None:
        c = state.score_cache
        pick = lambda key: None if c[key] is None else c[key][u_idx]
        return _TeacherView(
            scores=c["scores"][u_idx],
            teacher_probs_in=pick("teacher_probs_in"),
            max_in=pick("max_in"),
            pseudo_in=pick("pseudo_in"),
            max_out=pick("max_out"),
            pseudo_out=pick("pseudo_out"),
        )
    view = _compute_teacher_quantities(state.pairs, pipe, cfg, weak_u)
    state.training_unlabeled_forwards += view_forward_count(pipe) * len(weak_u)
    return view


def view_forward_count(pipeline: PipelineDescription) -> int:
    """Teacher backbone passes per unlabeled example when scoring a batch."""
    if pipeline.score_mode == "blend" and pipeline.classifier != "merged":
        return 2
    if pipeline.score_mode == "none":
        return 0
    return 1


def _compute_teacher_quantities(
    pairs: dict[str, TeacherStudentPair],
    pipe: PipelineDescription,
    cfg: TrainConfig,
    weak_u: np.ndarray,
) -> _TeacherView:
    K = next(iter(pairs.values())).teacher.K
    if pipe.score_mode == "blend":
        t_in = pairs["merged"].teacher if "merged" in pairs else pairs["inlier"].teacher
        t_out = pairs["merged"].teacher if "merged" in pairs else pairs["outlier"].teacher
        p_in = t_in.probs(weak_u, head="k")
        p_out = t_out.probs(weak_u, head="k1")
        scores = scores_from_probs(p_in, p_out, cfg.gamma)
        return _TeacherView(
            scores=scores,
            teacher_probs_in=p_in,
            max_in=p_in.max(axis=1),
            pseudo_in=p_in.argmax(axis=1) + 1,
            max_out=p_out.max(axis=1),
            pseudo_out=p_out.argmax(axis=1) + 1,
        )
    if pipe.score_mode == "outlier_blend":
        p_out = pairs["outlier"].teacher.probs(weak_u, head="k1")
        proxy = p_out[:, :K] / np.maximum(p_out[:, :K].sum(axis=1, keepdims=True), 1e-12)
        scores = cfg.gamma * (1.0 - proxy.max(axis=1)) + (1.0 - cfg.gamma) * p_out[:, -1]
        return _TeacherView(
            scores=scores,
            teacher_probs_in=None,
            max_in=None,
            pseudo_in=None,
            max_out=p_out.max(axis=1),
            pseudo_out=p_out.argmax(axis=1) + 1,
        )
    if pipe.score_mode == "one_minus_max":
        pair = next(iter(pairs.values()))
        p = pair.teacher.probs(weak_u, head="k")
        scores = 1.0 - p.max(axis=1)
        return _TeacherView(
            scores=scores,
            teacher_probs_in=p,
            max_in=p.max(axis=1),
            pseudo_in=p.argmax(axis=1) + 1,
            max_out=p.max(axis=1),
            pseudo_out=p.argmax(axis=1) + 1,
        )
    raise ValidationError(f"score_mode {pipe.score_mode!r} cannot score unlabeled data")


def _build_score_cache(state: TrainState) -> dict:
    """Score the whole unlabeled set once per iteration (optimization flag)."""
    weak_all = augment_batch(state.split.unlabeled_x, "weak", state.rng, state.scale, state.aug)
    view = _compute_teacher_quantities(state.pairs, state.pipeline, state.config, weak_all)
    state.training_unlabeled_forwards += view_forward_count(state.pipeline) * len(weak_all)
    return {
        "scores": view.scores,
        "teacher_probs_in": view.teacher_probs_in,
        "max_in": view.max_in,
        "pseudo_in": view.pseudo_in,
        "max_out": view.max_out,
        "pseudo_out": view.pseudo_out,
    }


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------


def _train_step(state: TrainState, batch, lr: float) -> LossReport:
    cfg = state.config
    pipe = state.pipeline
    rng = state.rng
    report = LossReport()

    strong_x = augment_batch(batch.labeled_x, pipe.labeled_view, rng, state.scale, state.aug)
    mu_b = len(batch.unlabeled_x)
    report.batch_unlabeled = mu_b

    g_in = pseudo_in = g_out = pseudo_out = None
    weights = None
    teacher_probs_in = None
    weak_u = strong_u = None
    if pipe.uses_unlabeled and mu_b:
        weak_u = augment_batch(batch.unlabeled_x, "weak", rng, state.scale, state.aug)
        strong_u = augment_batch(batch.unlabeled_x, "strong", rng, state.scale, state.aug)
        tview = _teacher_quantities(state, weak_u, batch.unlabeled_indices)
        scores = tview.scores
        teacher_probs_in = tview.teacher_probs_in
        if tview.max_in is not None:
            g_in = gate_mask(tview.max_in, scores, cfg.tau, use_score=pipe.gate_uses_score)
            pseudo_in = tview.pseudo_in
        if tview.max_out is not None:
            g_out = gate_mask(tview.max_out, scores, cfg.tau, use_score=pipe.gate_uses_score)
            pseudo_out = tview.pseudo_out
            if cfg.exclude_k1_pseudo and pipe.unseen_weighting in ("soft", "hard_mask"):
                K = next(iter(state.pairs.values())).teacher.K
                g_out = g_out & (pseudo_out != K + 1)
        weights = unseen_sample_weights(scores, pipe, cfg)
        report.pass_count_in = int(g_in.sum()) if g_in is not None and pipe.inlier_losses else 0
        report.pass_count_out = int(g_out.sum()) if g_out is not None and pipe.outlier_losses else 0
        if pipe.unseen_weighting != "none":
            report.effective_weight_sum = float(weights.sum())

    if "merged" in state.pairs:
        _merged_step(state, batch, strong_x, weak_u, strong_u, g_in, pseudo_in, g_out, pseudo_out,
                     teacher_probs_in, weights, mu_b, lr, report)
    else:
        if "inlier" in state.pairs and pipe.inlier_losses:
            _inlier_step(state, batch, strong_x, strong_u, g_in, pseudo_in, teacher_probs_in,
                         mu_b, lr, report)
        if "outlier" in state.pairs and pipe.outlier_losses:
            _outlier_step(state, batch, strong_x, weak_u, strong_u, g_out, pseudo_out,
                          weights, mu_b, lr, report)

    report.inlier_total = losses.inlier_objective(
        report.ce_k, report.seen_in, report.logit_match, (pipe.lambda_seen, pipe.lambda_lm)
    )
    report.outlier_total = losses.outlier_objective(
        report.ce_k1, report.seen_out, report.unseen, report.consistency,
        (pipe.lambda_seen, pipe.lambda_unseen, pipe.lambda_cr),
    )
    report.pretrain_total = losses.pretrain_objective(report.ce_k, report.ce_k1)
    return report


def _sum_grads(target: dict[str, np.ndarray], extra: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    for k, v in extra.items():
        if k in target:
            target[k] = target[k] + v
        else:
            target[k] = v
    return target


def _inlier_step(state, batch, strong_x, strong_u, g_in, pseudo_in, teacher_probs_in,
                 mu_b, lr, report) -> None:
    cfg, pipe = state.config, state.pipeline
    pair = state.pairs["inlier"]
    student = pair.student
    head = "k"

    z_l, cache_l = student.logits(strong_x, heads=(head,))
    ce_k, d_l = losses.ce_loss_and_grad(batch.labeled_y, z_l[head])
    report.ce_k = ce_k
    grads = student.backward(cache_l, {head: d_l})

    wants_unlabeled = any(t in pipe.inlier_losses for t in ("seen", "lm")) and strong_u is not None
    if wants_unlabeled:
        z_u, cache_u = student.logits(strong_u, heads=(head,))
        state.training_unlabeled_forwards += len(strong_u)
        d_u = np.zeros_like(z_u[head])
        if "seen" in pipe.inlier_losses:
            seen, d_seen = losses.gated_ce_loss_and_grad(pseudo_in, z_u[head], g_in, mu_b)
            report.seen_in = seen
            d_u += pipe.lambda_seen * d_seen
        if "lm" in pipe.inlier_losses and pipe.lambda_lm > 0:
            lm, d_lm = losses.logit_match_loss_and_grad(z_u[head], teacher_probs_in, g_in, mu_b)
            report.logit_match = lm
            d_u += pipe.lambda_lm * d_lm
        _sum_grads(grads, student.backward(cache_u, {head: d_u}))

    state.optimizers["inlier"].step(student.params, grads, lr)


def _outlier_step(state, batch, strong_x, weak_u, strong_u, g_out, pseudo_out,
                  weights, mu_b, lr, report) -> None:
    cfg, pipe = state.config, state.pipeline
    pair = state.pairs["outlier"]
    student = pair.student
    head = "k1" if "k1" in student.heads else "k"

    z_l, cache_l = student.logits(strong_x, heads=(head,))
    ce, d_l = losses.ce_loss_and_grad(batch.labeled_y, z_l[head])
    report.ce_k1 = ce  # labeled CE of the outlier branch (K-way in the K-head ablation)
    grads = student.backward(cache_l, {head: d_l})

    if strong_u is not None and any(t in pipe.outlier_losses for t in ("seen", "unseen", "cr")):
        z_sa, cache_sa = student.logits(strong_u, heads=(head,))
        state.training_unlabeled_forwards += len(strong_u)
        d_sa = np.zeros_like(z_sa[head])
        if "seen" in pipe.outlier_losses:
            seen, d_seen = losses.gated_ce_loss_and_grad(pseudo_out, z_sa[head], g_out, mu_b)
            report.seen_out = seen
            d_sa += pipe.lambda_seen * d_seen
        if "unseen" in pipe.outlier_losses:
            if pipe.unseen_weighting in ("soft", "hard_mask"):
                unseen, d_unseen = losses.unseen_loss_and_grad(z_sa[head], weights, mu_b)
            else:  # uniform_push: no extra class exists, push masked samples to uniform
                unseen, d_unseen = losses.uniformity_loss_and_grad(z_sa[head], weights, mu_b)
            report.unseen = unseen
            d_sa += pipe.lambda_unseen * d_unseen
        if "cr" in pipe.outlier_losses and pipe.lambda_cr > 0:
            z_wa, cache_wa = student.logits(weak_u, heads=(head,))
            state.training_unlabeled_forwards += len(weak_u)
            cr, d_wa, d_sa_cr = losses.consistency_loss_and_grad(z_wa[head], z_sa[head], mu_b)
            report.consistency = cr
            d_sa += pipe.lambda_cr * d_sa_cr
            _sum_grads(grads, student.backward(cache_wa, {head: pipe.lambda_cr * d_wa}))
        _sum_grads(grads, student.backward(cache_sa, {head: d_sa}))

    state.optimizers["outlier"].step(student.params, grads, lr)


def _merged_step(state, batch, strong_x, weak_u, strong_u, g_in, pseudo_in, g_out, pseudo_out,
                 teacher_probs_in, weights, mu_b, lr, report) -> None:
    """Both objectives on one student; backbone gradients from both heads accumulate."""
    cfg, pipe = state.config, state.pipeline
    student = state.pairs["merged"].student

    z_l, cache_l = student.logits(strong_x, heads=("k", "k1"))
    ce_k, d_lk = losses.ce_loss_and_grad(batch.labeled_y, z_l["k"])
    ce_k1, d_lk1 = losses.ce_loss_and_grad(batch.labeled_y, z_l["k1"])
    report.ce_k, report.ce_k1 = ce_k, ce_k1
    grads = student.backward(cache_l, {"k": d_lk, "k1": d_lk1})

    if strong_u is not None:
        z_u, cache_u = student.logits(strong_u, heads=("k", "k1"))
        state.training_unlabeled_forwards += len(strong_u)
        d_uk = np.zeros_like(z_u["k"])
        d_uk1 = np.zeros_like(z_u["k1"])
        if "seen" in pipe.inlier_losses:
            seen, d_seen = losses.gated_ce_loss_and_grad(pseudo_in, z_u["k"], g_in, mu_b)
            report.seen_in = seen
            d_uk += pipe.lambda_seen * d_seen
        if "lm" in pipe.inlier_losses and pipe.lambda_lm > 0:
            lm, d_lm = losses.logit_match_loss_and_grad(z_u["k"], teacher_probs_in, g_in, mu_b)
            report.logit_match = lm
            d_uk += pipe.lambda_lm * d_lm
        if "seen" in pipe.outlier_losses:
            seen_o, d_seen_o = losses.gated_ce_loss_and_grad(pseudo_out, z_u["k1"], g_out, mu_b)
            report.seen_out = seen_o
            d_uk1 += pipe.lambda_seen * d_seen_o
        if "unseen" in pipe.outlier_losses:
            unseen, d_unseen = losses.unseen_loss_and_grad(z_u["k1"], weights, mu_b)
            report.unseen = unseen
            d_uk1 += pipe.lambda_unseen * d_unseen
        if "cr" in pipe.outlier_losses and pipe.lambda_cr > 0:
            z_wa, cache_wa = student.logits(weak_u, heads=("k1",))
            state.training_unlabeled_forwards += len(weak_u)
            cr, d_wa, d_sa_cr = losses.consistency_loss_and_grad(z_wa["k1"], z_u["k1"], mu_b)
            report.consistency = cr
            d_uk1 += pipe.lambda_cr * d_sa_cr
            _sum_grads(grads, student.backward(cache_wa, {"k1": pipe.lambda_cr * d_wa}))
        _sum_grads(grads, student.backward(cache_u, {"k": d_uk, "k1": d_uk1}))

    state.optimizers["merged"].step(student.params, grads, lr)


# ---------------------------------------------------------------------------
# Evaluation routing (mode-aware)
# ---------------------------------------------------------------------------


def _classifier_predictions(pairs: dict[str, TeacherStudentPair], pipeline: PipelineDescription,
                            x: np.ndarray, use_teacher: bool = False) -> np.ndarray:
    name = pipeline.classifier
    pair = pairs[name]
    model = pair.teacher if use_teacher else pair.student
    if "k" in model.heads:
        return predict_labels(model, x, head="k")
    # (K+1)-head classifier: route classification through the first K outputs
    probs = model.probs(np.atleast_2d(x), head="k1")
    return np.argmax(probs[:, : model.K], axis=1) + 1


def _detection_scores_for(pairs: dict[str, TeacherStudentPair], pipeline: PipelineDescription,
                          x: np.ndarray, gamma: float, use_teacher: bool = False) -> np.ndarray:
    role = "teacher" if use_teacher else "student"
    pick = lambda name: getattr(pairs[name], role)
    if pipeline.score_mode == "blend":
        m_in = pick("merged") if "merged" in pairs else pick("inlier")
        m_out = pick("merged") if "merged" in pairs else pick("outlier")
        return scores_from_probs(m_in.probs(x, head="k"), m_out.probs(x, head="k1"), gamma)
    if pipeline.score_mode == "outlier_blend":
        p = pick("outlier").probs(x, head="k1")
        K = pairs["outlier"].student.K
        proxy = p[:, :K] / np.maximum(p[:, :K].sum(axis=1, keepdims=True), 1e-12)
        return gamma * (1.0 - proxy.max(axis=1)) + (1.0 - gamma) * p[:, -1]
    # one_minus_max (single K-head pair, incl. the supervised baseline)
    model = pick(next(iter(pairs)))
    return 1.0 - model.probs(x, head="k").max(axis=1)


def evaluate_pipeline(pairs: dict[str, TeacherStudentPair], pipeline: PipelineDescription,
                      split: MismatchSplit, gamma: float, use_teacher: bool = False) -> EvalResult:
    """Accuracy on the test set plus detection AUROC over the unlabeled set.

    Raw inputs only; the hidden seen/unseen flags are consumed here, never in
    training. For the full pipeline this reproduces the standard two-student
    inference exactly.
    """
    preds = _classifier_predictions(pairs, pipeline, split.test_x, use_teacher)
    acc = compute_accuracy(preds, split.test_y)
    scores = _detection_scores_for(pairs, pipeline, split.unlabeled_x, gamma, use_teacher)
    flags = np.asarray(split.unlabeled_is_unseen, dtype=bool)
    # degenerate splits (ratio 0 or 1) leave the detection metric undefined
    auroc = compute_auroc(scores, flags) if (flags.any() and not flags.all()) else float("nan")
    return EvalResult(
        accuracy=acc,
        auroc=auroc,
        per_class_accuracy=per_class_accuracy(preds, split.test_y),
        score_histogram=score_histogram(scores, flags),
        mean_score_seen=float(scores[~flags].mean()) if (~flags).any() else float("nan"),
        mean_score_unseen=float(scores[flags].mean()) if flags.any() else float("nan"),
    )


# ---------------------------------------------------------------------------
# Iteration loop and full runs
# ---------------------------------------------------------------------------


def _epoch_record(state: TrainState, phase: str, report: LossReport, ev: EvalResult | None,
                  epoch_in_phase: int, lr: float) -> dict:
    record = {
        "phase": phase,
        "iteration": state.iteration,
        "epoch": epoch_in_phase,
        "global_epoch": state.global_epoch,
        "lr": lr,
        **report.as_dict(),
        "gate_pass_rate_in": 0.0,
        "gate_pass_rate_out": 0.0,
        "test_accuracy": ev.accuracy if ev else float("nan"),
        "auroc": ev.auroc if ev else float("nan"),
        "mean_score_seen": ev.mean_score_seen if ev else float("nan"),
        "mean_score_unseen": ev.mean_score_unseen if ev else float("nan"),
        "training_unlabeled_forwards": state.training_unlabeled_forwards,
    }
    if report.batch_unlabeled:
        record["gate_pass_rate_in"] = report.pass_count_in / report.batch_unlabeled
        record["gate_pass_rate_out"] = report.pass_count_out / report.batch_unlabeled
    return record


def train_dts_iteration(state: TrainState, split: MismatchSplit, config: TrainConfig,
                        step_callback=None, epoch_callback=None) -> TrainState:
    """Run one iteration: N_e epochs against frozen teachers, then refresh them."""
    if config.cache_scores and state.pipeline.uses_unlabeled:
        state.score_cache = _build_score_cache(state)
    for epoch in range(config.epochs_per_iteration):
        lr = _lr_at(config, state.global_epoch, state.total_epochs)
        reports = []
        for batch in state.sampler.epoch():
            report = _train_step(state, batch, lr)
            reports.append(report)
            if step_callback is not None:
                step_callback(state, report)
        ev = None
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs_per_iteration - 1:
            ev = evaluate_pipeline(state.pairs, state.pipeline, split, config.gamma)
            if config.dump_scores and state.out_dir is not None:
                _dump_epoch_scores(state, split, config)
        record = _epoch_record(state, "train", _mean_report(reports), ev, epoch, lr)
        state.history.append(record)
        state.global_epoch += 1
        if epoch_callback is not None:
            epoch_callback(state, record)
    for pair in state.pairs.values():
        refresh_teacher(pair)
    state.iteration += 1
    state.score_cache = None
    return state


def _dump_epoch_scores(state: TrainState, split: MismatchSplit, config: TrainConfig) -> None:
    from .soft_weighting import write_score_dump

    scores = _detection_scores_for(state.pairs, state.pipeline, split.unlabeled_x, config.gamma)
    dump_dir = state.out_dir / "score_dumps"
    dump_dir.mkdir(exist_ok=True)
    write_score_dump(
        dump_dir / f"epoch_{state.global_epoch:05d}.csv",
        np.arange(len(scores)),
        scores,
        split.unlabeled_is_unseen,
    )


def run_training(
    config: TrainConfig,
    split: MismatchSplit,
    out_dir: str | Path | None = None,
    step_callback=None,
    epoch_callback=None,
) -> TrainResult:
    """Full pipeline: pre-train, derive pairs, run all iterations, evaluate.

    Deterministic for a fixed config seed. When ``out_dir`` is given, writes
    the metrics stream (one JSON line per epoch), per-iteration checkpoints,
    a final summary, and the score histogram.
    """
    config.validate()
    pipeline = apply_ablation(config.ablation_mode, config)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    seq = np.random.SeedSequence(config.seed)
    init_seq, train_seq = seq.spawn(2)
    rng = np.random.default_rng(train_seq)

    spec = BackboneSpec(
        input_dim=split.dim,
        hidden_widths=config.hidden_widths,
        feature_dim=config.feature_dim,
        activation=config.activation,
        k1_projection=pipeline.k1_projection,
    )
    teacher = init_teacher(spec, split.K, seed=init_seq)
    scale = feature_scale(split)
    aug = AugmentConfig(config.weak_sigma, config.strong_sigma, config.mask_fraction)

    history: list[dict] = []
    pretrain_pairs = {"merged": TeacherStudentPair(teacher, teacher, "both")}
    pretrain_pipeline = dataclasses.replace(pipeline, classifier="merged", score_mode="blend",
                                            pairs=(("merged", "merged"),))

    def record_pretrain(epoch: int, report: LossReport) -> None:
        ev = evaluate_pipeline(pretrain_pairs, pretrain_pipeline, split, config.gamma)
        rec = {
            "phase": "pretrain",
            "iteration": -1,
            "epoch": epoch,
            "global_epoch": epoch,
            "lr": _lr_at(config, epoch, config.pretrain_epochs + config.total_train_epochs),
            **report.as_dict(),
            "gate_pass_rate_in": 0.0,
            "gate_pass_rate_out": 0.0,
            "test_accuracy": ev.accuracy,
            "auroc": ev.auroc,
            "mean_score_seen": ev.mean_score_seen,
            "mean_score_unseen": ev.mean_score_unseen,
            "training_unlabeled_forwards": 0,
        }
        history.append(rec)

    pretrain_teacher(teacher, split.labeled_x, split.labeled_y, config,
                     rng=rng, scale=scale, on_epoch=record_pretrain)
    if out_path is not None:
        save_model(teacher, out_path / "teacher_pretrained.npz")

    pairs = {name: derive_pair(teacher, kind) for name, kind in pipeline.pairs}
    optimizers = {
        name: SGD(pair.student.params, config.momentum, config.weight_decay)
        for name, pair in pairs.items()
    }
    sampler = PairSampler(split, config.batch_size, config.mu, rng,
                          include_unlabeled=pipeline.uses_unlabeled)
    state = TrainState(
        config=config,
        pipeline=pipeline,
        teacher=teacher,
        pairs=pairs,
        optimizers=optimizers,
        sampler=sampler,
        rng=rng,
        scale=scale,
        aug=aug,
        split=split,
        global_epoch=config.pretrain_epochs,
        history=history,
        out_dir=out_path,
    )

    try:
        for _ in range(config.iterations):
            train_dts_iteration(state, split, config, step_callback, epoch_callback)
            if out_path is not None:
                _save_checkpoints(state, out_path, f"iter{state.iteration}")
    except Exception:
        if out_path is not None:
            _save_checkpoints(state, out_path, "aborted")
            _write_metrics(state.history, out_path / "metrics.jsonl")
        raise

    final_eval = evaluate_pipeline(state.pairs, state.pipeline, split, config.gamma)
    if out_path is not None:
        _save_checkpoints(state, out_path, "final")
        _write_metrics(state.history, out_path / "metrics.jsonl")
        summary = {
            "config": config.to_dict(),
            "config_hash": config_hash(config),
            "pipeline": pipeline.summary,
            "ablation_mode": pipeline.mode,
            "final": final_eval.as_dict(),
        }
        (out_path / "summary.json").write_text(json.dumps(summary, indent=2))
        _write_histogram(final_eval, out_path / "score_histogram.csv")

    return TrainResult(
        config=config,
        pipeline=pipeline,
        teacher=teacher,
        pairs=state.pairs,
        history=state.history,
        final_eval=final_eval,
    )


def _save_checkpoints(state: TrainState, out_path: Path, tag: str) -> None:
    ckpt_dir = out_path / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for name, pair in state.pairs.items():
        save_model(pair.teacher, ckpt_dir / f"{name}_teacher_{tag}.npz")
        save_model(pair.student, ckpt_dir / f"{name}_student_{tag}.npz")


def _write_metrics(history: list[dict], path: Path) -> None:
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")


def _write_histogram(ev: EvalResult, path: Path) -> None:
    hist = ev.score_histogram
    with open(path, "w") as fh:
        fh.write("bin_lo,bin_hi,seen_count,unseen_count\n")
        for i in range(len(hist.seen_counts)):
            fh.write(
                f"{hist.bin_edges[i]},{hist.bin_edges[i + 1]},"
                f"{hist.seen_counts[i]},{hist.unseen_counts[i]}\n"
            )
