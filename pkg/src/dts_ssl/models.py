"""Model construction: shared MLP feature extractor with K and (K+1) softmax heads.

A single pre-trained teacher carries both heads. Four working models are then
derived from it: an inlier teacher-student pair that keeps the K-way head for
seen-class classification, and an outlier pair that keeps the (K+1)-way head
for unseen-class detection. Derived models own deep parameter copies and share
no mutable state. All math is plain numpy with explicit backward passes.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import AugmentedView
from .errors import ShapeError, StateError, ValidationError
from .numerics import softmax

_ACTIVATIONS = ("tanh", "relu")

HEAD_K = "k"
HEAD_K1 = "k1"


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture of the feature extractor (and optional head-side projection).

    ``k1_projection`` inserts an extra hidden layer in front of the (K+1)-way
    head only; it exists for the merged-model comparison variants.
    """

    input_dim: int
    hidden_widths: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    activation: str = "tanh"
    k1_projection: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.feature_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValidationError(f"all layer widths must be positive: {self}")
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(
                f"unknown activation {self.activation!r}, expected one of {_ACTIVATIONS}"
            )

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.feature_dim)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BackboneSpec":
        raw = json.loads(text)
        raw["hidden_widths"] = tuple(raw["hidden_widths"])
        return cls(**raw)


def _activation_fns(name: str):
    if name == "tanh":
        return np.tanh, lambda a: 1.0 - a * a
    return (lambda z: np.maximum(z, 0.0)), lambda a: (a > 0).astype(np.float64)


class DualHeadModel:
    """Feature extractor plus softmax heads over K and/or K+1 classes.

    The pre-trained teacher holds both heads; models derived for one task keep
    only the head they train (``heads`` records which are present).
    """

    def __init__(
        self,
        spec: BackboneSpec,
        K: int,
        params: dict[str, np.ndarray],
        heads: tuple[str, ...] = (HEAD_K, HEAD_K1),
        pretrained: bool = False,
    ) -> None:
        if K < 2:
            raise ValidationError(f"K must be >= 2, got {K}")
        self.spec = spec
        self.K = K
        self.params = params
        self.heads = tuple(heads)
        self.pretrained = pretrained
        self._act, self._act_grad = _activation_fns(spec.activation)

    # -- construction ------------------------------------------------------

    @classmethod
    def initialize(cls, spec: BackboneSpec, K: int, seed: int) -> "DualHeadModel":
        """Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases."""
        if K < 2:
            raise ValidationError(f"K must be >= 2, got {K}")
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}

        def linear(name: str, fan_in: int, fan_out: int) -> None:
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            params[f"{name}.b"] = np.zeros(fan_out)

        sizes = spec.layer_sizes
        for i in range(len(sizes) - 1):
            linear(f"backbone.{i}", sizes[i], sizes[i + 1])
        linear("head_k", spec.feature_dim, K)
        if spec.k1_projection:
            linear("proj", spec.feature_dim, spec.feature_dim)
        linear("head_k1", spec.feature_dim, K + 1)
        return cls(spec, K, params)

    def copy(self) -> "DualHeadModel":
        return DualHeadModel(
            self.spec,
            self.K,
            {k: v.copy() for k, v in self.params.items()},
            heads=self.heads,
            pretrained=self.pretrained,
        )

    def head_width(self, head: str) -> int:
        return self.K if head == HEAD_K else self.K + 1

    # -- forward / backward --------------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(
                f"expected inputs of dimension {self.spec.input_dim}, got shape {x.shape}"
            )
        return x

    def logits(self, x: np.ndarray, heads: Sequence[str] = (HEAD_K,)):
        """Forward pass returning per-head logits and a cache for backward().

        All requested heads share one backbone evaluation, so gradients that
        flow back through several heads accumulate on the same features.
        """
        x = self._check_input(x)
        for h in heads:
            if h not in self.heads:
                raise StateError(f"model has heads {self.heads}, cannot forward head {h!r}")
        acts = [x]
        a = x
        n_layers = len(self.spec.layer_sizes) - 1
        for i in range(n_layers):
            z = a @ self.params[f"backbone.{i}.W"].T + self.params[f"backbone.{i}.b"]
            a = self._act(z)
            acts.append(a)
        out: dict[str, np.ndarray] = {}
        proj_a = None
        for h in heads:
            if h == HEAD_K:
                out[h] = a @ self.params["head_k.W"].T + self.params["head_k.b"]
            else:
                src = a
                if self.spec.k1_projection:
                    proj_z = a @ self.params["proj.W"].T + self.params["proj.b"]
                    proj_a = self._act(proj_z)
                    src = proj_a
                out[h] = src @ self.params["head_k1.W"].T + self.params["head_k1.b"]
        cache = {"acts": acts, "proj_a": proj_a}
        return out, cache

    def probs(self, x: np.ndarray, head: str = HEAD_K) -> np.ndarray:
        z, _ = self.logits(x, heads=(head,))
        return softmax(z[head])

    def backward(self, cache, d_logits: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. all parameters, given d(loss)/d(logits)."""
        acts = cache["acts"]
        features = acts[-1]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        d_feat = np.zeros_like(features)
        for h, dz in d_logits.items():
            if h == HEAD_K:
                grads["head_k.W"] += dz.T @ features
                grads["head_k.b"] += dz.sum(axis=0)
                d_feat += dz @ self.params["head_k.W"]
            else:
                if self.spec.k1_projection:
                    proj_a = cache["proj_a"]
                    grads["head_k1.W"] += dz.T @ proj_a
                    grads["head_k1.b"] += dz.sum(axis=0)
                    d_proj_a = dz @ self.params["head_k1.W"]
                    d_proj_z = d_proj_a * self._act_grad(proj_a)
                    grads["proj.W"] += d_proj_z.T @ features
                    grads["proj.b"] += d_proj_z.sum(axis=0)
                    d_feat += d_proj_z @ self.params["proj.W"]
                else:
                    grads["head_k1.W"] += dz.T @ features
                    grads["head_k1.b"] += dz.sum(axis=0)
                    d_feat += dz @ self.params["head_k1.W"]

        d_a = d_feat
        n_layers = len(self.spec.layer_sizes) - 1
        for i in reversed(range(n_layers)):
            dz = d_a * self._act_grad(acts[i + 1])
            grads[f"backbone.{i}.W"] += dz.T @ acts[i]
            grads[f"backbone.{i}.b"] += dz.sum(axis=0)
            d_a = dz @ self.params[f"backbone.{i}.W"]
        # drop zero grads for heads the loss did not touch
        return {k: g for k, g in grads.items() if k in self._touched(d_logits)}

    def _touched(self, d_logits: Mapping[str, np.ndarray]) -> set[str]:
        touched = {k for k in self.params if k.startswith("backbone.")}
        if HEAD_K in d_logits:
            touched |= {"head_k.W", "head_k.b"}
        if HEAD_K1 in d_logits:
            touched |= {"head_k1.W", "head_k1.b"}
            if self.spec.k1_projection:
                touched |= {"proj.W", "proj.b"}
        return touched


@dataclass
class TeacherStudentPair:
    """A frozen-within-iteration teacher and a trainable student, same architecture."""

    teacher: DualHeadModel
    student: DualHeadModel
    head_kind: str  # "k", "k1", or "both"


def init_teacher(spec: BackboneSpec, K: int, seed: int) -> DualHeadModel:
    """Build the dual-head teacher to be pre-trained on labeled data."""
    return DualHeadModel.initialize(spec, K, seed)


_PAIR_HEADS = {"inlier": (HEAD_K,), "outlier": (HEAD_K1,), "merged": (HEAD_K, HEAD_K1)}


def derive_pair(teacher: DualHeadModel, kind: str) -> TeacherStudentPair:
    """Derive a teacher-student pair from the pre-trained teacher.

    The inlier pair keeps backbone + K head, the outlier pair backbone +
    (K+1) head; "merged" keeps both heads on one model. Both members start as
    independent deep copies of the teacher's parameters.
    """
    if kind not in _PAIR_HEADS:
        raise ValidationError(f"unknown pair kind {kind!r}, expected one of {tuple(_PAIR_HEADS)}")
    if not teacher.pretrained:
        raise StateError("cannot derive a pair from a teacher that has not been pre-trained")
    heads = _PAIR_HEADS[kind]

    def clone() -> DualHeadModel:
        keep = {k for k in teacher.params if k.startswith("backbone.")}
        if HEAD_K in heads:
            keep |= {"head_k.W", "head_k.b"}
        if HEAD_K1 in heads:
            keep |= {"head_k1.W", "head_k1.b"}
            if teacher.spec.k1_projection:
                keep |= {"proj.W", "proj.b"}
        params = {k: v.copy() for k, v in teacher.params.items() if k in keep}
        return DualHeadModel(teacher.spec, teacher.K, params, heads=heads, pretrained=True)

    head_kind = {"inlier": HEAD_K, "outlier": HEAD_K1, "merged": "both"}[kind]
    return TeacherStudentPair(teacher=clone(), student=clone(), head_kind=head_kind)


def refresh_teacher(pair: TeacherStudentPair) -> None:
    """Copy student parameters into the teacher (hard refresh at iteration ends)."""
    pair.teacher.params = {k: v.copy() for k, v in pair.student.params.items()}


def forward(model: DualHeadModel, views, head: str = HEAD_K) -> np.ndarray:
    """Forward a batch (ndarray, AugmentedView, or sequence of views) to simplex outputs."""
    if isinstance(views, AugmentedView):
        x = views.vector[None, :]
    elif isinstance(views, np.ndarray):
        x = views
    else:
        x = np.stack([v.vector if isinstance(v, AugmentedView) else np.asarray(v) for v in views])
    return model.probs(x, head=head)


# ---------------------------------------------------------------------------
# Hashing and checkpoints
# ---------------------------------------------------------------------------


def param_hash(model: DualHeadModel) -> str:
    """SHA-256 over all parameter tensors; equal iff parameters are bit-equal."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_model(model: DualHeadModel, path: str | Path) -> None:
    """One-file checkpoint: parameter tensors plus a JSON metadata entry."""
    meta = json.dumps(
        {
            "spec": json.loads(model.spec.to_json()),
            "K": model.K,
            "heads": list(model.heads),
            "pretrained": model.pretrained,
            "format_version": 1,
        }
    )
    np.savez(Path(path), __meta__=np.array(meta), **model.params)


def load_model(path: str | Path) -> DualHeadModel:
    """Load a checkpoint; round-trips bit-exactly with :func:`save_model`."""
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        params = {k: archive[k].copy() for k in archive.files if k != "__meta__"}
    spec = BackboneSpec.from_json(json.dumps(meta["spec"]))
    return DualHeadModel(
        spec, int(meta["K"]), params, heads=tuple(meta["heads"]), pretrained=bool(meta["pretrained"])
    )
