"""Multi-view fusion: five strategies over per-view encoders and heads.

Strategies differ in where views meet: Input (raw channels), Feature
(embeddings), Decision (class probabilities), Hybrid (feature + decision
branches over shared encoders), Ensemble (independently trained single-view
models, averaged at inference). Two optional components attach to the
Feature/Decision/Hybrid strategies: a gated merge that learns per-feature
view weights, and an auxiliary-loss term that adds per-view supervision.

The average merge and the zero-initialised gated merge intentionally share
one arithmetic path (multiply by the per-view weight, then sum over the view
axis) so that a freshly built gated model is bit-identical to the plain
average model.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .encoders import Encoder, EncoderConfig, build_encoder
from .errors import ConfigError, ShapeError
from .layers import BatchNorm, Dropout, Linear, Module
from .tensor import (
    Tensor,
    as_tensor,
    broadcast_to,
    concat,
    reduce_sum,
    relu,
    reshape,
    softmax,
)
from .views import ViewSchema

STRATEGIES = ("Input", "Feature", "Decision", "Hybrid", "Ensemble")
COMPONENTS = ("gfusion", "multiloss")
_DEFAULT_MERGE = {"Input": "concat", "Feature": "concat",
                  "Decision": "average", "Hybrid": "average"}


@dataclass
class FusionOutputs:
    """Forward-pass bundle: final probabilities plus any per-view/branch ones."""

    probabilities: Tensor
    view_probabilities: dict[str, Tensor] | None = None
    feature_probabilities: Tensor | None = None
    decision_probabilities: Tensor | None = None


class PredictionHead(Module):
    """Linear -> batch-norm -> relu -> dropout -> linear -> softmax."""

    def __init__(self, in_dim: int, classes: int, hidden: int = 64,
                 dropout: float = 0.2) -> None:
        if classes < 2:
            raise ConfigError(f"need at least 2 classes, got {classes}")
        self.in_dim = in_dim
        self.classes = classes
        self.fc1 = Linear(in_dim, hidden)
        self.norm = BatchNorm(hidden)
        self.drop = Dropout(dropout)
        self.fc2 = Linear(hidden, classes)

    def forward(self, x: Tensor, rng=None) -> Tensor:
        h = relu(self.norm(self.fc1(x)))
        return softmax(self.fc2(self.drop(h, rng)), axis=1)

    __call__ = forward


def _check_equal_widths(zs: list[Tensor]) -> int:
    widths = {z.shape[-1] for z in zs}
    if len(widths) != 1:
        raise ShapeError(f"merge inputs must share width, got {sorted(widths)}")
    return widths.pop()


def _stack_views(zs: list[Tensor]) -> Tensor:
    """[B, w] per view -> [B, V, w]."""
    width = _check_equal_widths(zs)
    joint = concat(zs, axis=1)
    return reshape(joint, (joint.shape[0], len(zs), width))


class GatedMerge(Module):
    """Per-feature view weighting from a zero-initialised linear gate.

    The gate maps the concatenated representations to one logit per
    (view, feature) pair; a softmax across views turns these into convex
    weights at every feature position. ``last_weights`` keeps the most
    recent weights as ``[B, V, width]`` for inspection.
    """

    def __init__(self, views: int, width: int) -> None:
        self.views = views
        self.width = width
        self.gate = Linear(views * width, views * width, zero_init=True)
        self.last_weights: np.ndarray | None = None

    def forward(self, zs: list[Tensor]) -> Tensor:
        if len(zs) != self.views:
            raise ShapeError(f"gate expects {self.views} views, got {len(zs)}")
        if _check_equal_widths(zs) != self.width:
            raise ShapeError(f"gate expects width {self.width}")
        stacked = _stack_views(zs)
        batch = stacked.shape[0]
        logits = self.gate(concat(zs, axis=1))
        alpha = softmax(reshape(logits, (batch, self.views, self.width)), axis=1)
        self.last_weights = alpha.data.copy()
        return reduce_sum(alpha * stacked, axis=1)

    __call__ = forward


def average_embeddings(zs: list[Tensor]) -> Tensor:
    stacked = _stack_views(zs)
    return reduce_sum(stacked * (1.0 / len(zs)), axis=1)


def average_probabilities(ys: list[Tensor]) -> Tensor:
    """Mean of probability rows; the mean of simplex points stays on it."""
    if not ys:
        raise ConfigError("cannot average an empty prediction list")
    total = ys[0]
    for y in ys[1:]:
        total = total + y
    return total * (1.0 / len(ys))


def merge_embeddings(zs: list[Tensor], kind: str,
                     gate: GatedMerge | None = None) -> Tensor:
    if kind == "concat":
        return concat(zs, axis=1)
    if kind == "average":
        return average_embeddings(zs)
    if kind == "gated":
        if gate is None:
            raise ConfigError("gated merge requires a GatedMerge unit")
        return gate(zs)
    raise ConfigError(f"unknown merge {kind!r}")


def align_and_merge_input(batch: dict, views: list[ViewSchema],
                          merge: str = "concat") -> Tensor:
    """Broadcast static views along time and merge raw channels.

    Temporal views must agree on the number of steps; static views are
    repeated at every step. With one view this is the identity.
    """
    if merge not in ("concat", "average"):
        raise ConfigError(f"input merge must be concat or average, got {merge!r}")
    tensors: list[Tensor] = []
    steps = None
    batch_size = None
    for v in views:
        if v.name not in batch:
            raise ShapeError(f"batch missing view {v.name!r}")
        arr = as_tensor(batch[v.name])
        if v.temporal:
            if arr.ndim != 3 or arr.shape[2] != v.channels:
                raise ShapeError(f"view {v.name!r}: expected [B, T, {v.channels}], "
                                 f"got {arr.shape}")
            if steps is None:
                steps = arr.shape[1]
            elif arr.shape[1] != steps:
                raise ShapeError(
                    f"view {v.name!r}: {arr.shape[1]} steps, others have {steps}")
        elif arr.ndim != 2 or arr.shape[1] != v.channels:
            raise ShapeError(f"view {v.name!r}: expected [B, {v.channels}], "
                             f"got {arr.shape}")
        if batch_size is None:
            batch_size = arr.shape[0]
        elif arr.shape[0] != batch_size:
            raise ShapeError("views disagree on batch size")
        tensors.append(arr)
    if len(views) == 1:
        return tensors[0]
    if steps is None:  # all static
        if merge == "concat":
            return concat(tensors, axis=1)
        width = _check_equal_widths(tensors)
        stacked = reshape(concat(tensors, axis=1), (batch_size, len(views), width))
        return reduce_sum(stacked * (1.0 / len(views)), axis=1)
    aligned = []
    for v, arr in zip(views, tensors):
        if not v.temporal:
            arr = broadcast_to(reshape(arr, (batch_size, 1, v.channels)),
                               (batch_size, steps, v.channels))
        aligned.append(arr)
    if merge == "concat":
        return concat(aligned, axis=2)
    width = _check_equal_widths(aligned)
    stacked = reshape(concat(aligned, axis=2), (batch_size, steps, len(views), width))
    return reduce_sum(stacked * (1.0 / len(views)), axis=2)


def _encoder_for(view: ViewSchema, config: EncoderConfig) -> Encoder:
    """Temporal views use the configured architecture, static views an MLP."""
    if view.temporal:
        return build_encoder(view, config)
    return build_encoder(view, replace(config, architecture="MLP"))


def _take(batch: dict, name: str):
    if name not in batch:
        raise ShapeError(f"batch missing view {name!r}")
    return batch[name]


class MVLModel(Module):
    """Base for all strategy models: forward to FusionOutputs, plain predict."""

    strategy = ""
    multiloss_gamma: float = 0.0

    def forward(self, batch: dict, rng=None) -> FusionOutputs:
        raise NotImplementedError

    def predict(self, batch: dict) -> np.ndarray:
        self.set_mode("infer")
        return self.forward(batch).probabilities.data.copy()

    def __call__(self, batch: dict, rng=None) -> FusionOutputs:
        return self.forward(batch, rng)


class InputFusion(MVLModel):
    """Merge raw view channels, then run one encoder and one head."""

    strategy = "Input"

    def __init__(self, views: list[ViewSchema], config: EncoderConfig,
                 classes: int, merge: str = "concat") -> None:
        if merge not in ("concat", "average"):
            raise ConfigError(
                f"input merge must be concat or average, got {merge!r}")
        self.views = list(views)
        self.merge_kind = merge
        self.classes = classes
        if len(views) == 1:
            fused = views[0]
        else:
            temporal = [v for v in views if v.temporal]
            if temporal:
                step_set = {v.steps for v in temporal}
                if len(step_set) != 1:
                    raise ConfigError(
                        f"temporal views disagree on steps: {sorted(step_set)}")
                if merge == "concat":
                    channels = sum(v.channels for v in views)
                else:
                    channels = _equal_channel_width(views)
                fused = ViewSchema("fused", temporal=True, channels=channels,
                                   steps=step_set.pop())
            else:
                channels = (sum(v.channels for v in views) if merge == "concat"
                            else _equal_channel_width(views))
                fused = ViewSchema("fused", temporal=False, channels=channels)
        self.encoder = _encoder_for(fused, config)
        self.head = PredictionHead(config.embedding_dim, classes,
                                   dropout=config.dropout)

    def forward(self, batch: dict, rng=None) -> FusionOutputs:
        merged = align_and_merge_input(batch, self.views, self.merge_kind)
        z = self.encoder(merged, rng)
        return FusionOutputs(probabilities=self.head(z, rng))


def _equal_channel_width(views: list[ViewSchema]) -> int:
    widths = {v.channels for v in views}
    if len(widths) != 1:
        raise ShapeError(
            f"average input merge needs equal channel widths, got {sorted(widths)}")
    return widths.pop()


class FeatureFusion(MVLModel):
    """Per-view encoders, merged embeddings, one prediction head.

    With the auxiliary-loss component, per-view heads produce extra training
    predictions from each embedding; they are skipped at inference and when
    the auxiliary weight is zero.
    """

    strategy = "Feature"

    def __init__(self, views: list[ViewSchema], config: EncoderConfig,
                 classes: int, merge: str = "concat", aux_heads: bool = False) -> None:
        if merge not in ("concat", "average", "gated"):
            raise ConfigError(f"unknown feature merge {merge!r}")
        self.views = list(views)
        self.merge_kind = merge
        self.classes = classes
        self.encoders = {v.name: _encoder_for(v, config) for v in views}
        width = config.embedding_dim
        head_in = width * len(views) if merge == "concat" else width
        if merge == "gated":
            self.gate = GatedMerge(len(views), width)
        self.head = PredictionHead(head_in, classes, dropout=config.dropout)
        self.aux_heads = (
            {v.name: PredictionHead(width, classes, dropout=config.dropout)
             for v in views} if aux_heads else None)

    def forward(self, batch: dict, rng=None) -> FusionOutputs:
        zs = {v.name: self.encoders[v.name](_take(batch, v.name), rng)
              for v in self.views}
        fused = merge_embeddings([zs[v.name] for v in self.views],
                                 self.merge_kind, getattr(self, "gate", None))
        probs = self.head(fused, rng)
        view_probs = None
        if (self.aux_heads is not None and self.mode == "train"
                and self.multiloss_gamma > 0):
            view_probs = {v.name: self.aux_heads[v.name](zs[v.name], rng)
                          for v in self.views}
        return FusionOutputs(probabilities=probs, view_probabilities=view_probs)


class DecisionFusion(MVLModel):
    """Per-view encoder+head pairs; class probabilities merged across views."""

    strategy = "Decision"

    def __init__(self, views: list[ViewSchema], config: EncoderConfig,
                 classes: int, merge: str = "average") -> None:
        if merge not in ("average", "gated"):
            raise ConfigError(
                f"decision merge must keep the class width (average or gated), "
                f"got {merge!r}")
        self.views = list(views)
        self.merge_kind = merge
        self.classes = classes
        self.encoders = {v.name: _encoder_for(v, config) for v in views}
        self.heads = {v.name: PredictionHead(config.embedding_dim, classes,
                                             dropout=config.dropout)
                      for v in views}
        if merge == "gated":
            self.gate = GatedMerge(len(views), classes)

    def merge_probabilities(self, ys: list[Tensor]) -> Tensor:
        if self.merge_kind == "gated":
            mixed = self.gate(ys)
            # per-feature weights do not preserve row sums; renormalise
            return mixed / reduce_sum(mixed, axis=1, keepdims=True)
        return average_probabilities(ys)

    def forward(self, batch: dict, rng=None) -> FusionOutputs:
        view_probs = {
            v.name: self.heads[v.name](
                self.encoders[v.name](_take(batch, v.name), rng), rng)
            for v in self.views
        }
        fused = self.merge_probabilities([view_probs[v.name] for v in self.views])
        return FusionOutputs(probabilities=fused, view_probabilities=view_probs)


class HybridFusion(MVLModel):
    """Feature and decision branches over shared per-view encoders.

    The final prediction is the unweighted average of the two branch
    probability rows.
    """

    strategy = "Hybrid"

    def __init__(self, views: list[ViewSchema], config: EncoderConfig,
                 classes: int, merge: str = "average") -> None:
        if merge not in ("average", "gated"):
            raise ConfigError(
                f"hybrid feature merge must be average or gated, got {merge!r}")
        self.views = list(views)
        self.merge_kind = merge
        self.classes = classes
        self.encoders = {v.name: _encoder_for(v, config) for v in views}
        self.heads = {v.name: PredictionHead(config.embedding_dim, classes,
                                             dropout=config.dropout)
                      for v in views}
        if merge == "gated":
            self.gate = GatedMerge(len(views), config.embedding_dim)
        self.feature_head = PredictionHead(config.embedding_dim, classes,
                                           dropout=config.dropout)

    def forward(self, batch: dict, rng=None) -> FusionOutputs:
        zs = {v.name: self.encoders[v.name](_take(batch, v.name), rng)
              for v in self.views}
        fused_z = merge_embeddings([zs[v.name] for v in self.views],
                                   self.merge_kind, getattr(self, "gate", None))
        feature_probs = self.feature_head(fused_z, rng)
        view_probs = {v.name: self.heads[v.name](zs[v.name], rng)
                      for v in self.views}
        decision_probs = average_probabilities(
            [view_probs[v.name] for v in self.views])
        final = average_probabilities([feature_probs, decision_probs])
        return FusionOutputs(probabilities=final, view_probabilities=view_probs,
                             feature_probabilities=feature_probs,
                             decision_probabilities=decision_probs)


class EnsembleModel(MVLModel):
    """Independent single-view models; predictions averaged at inference."""

    strategy = "Ensemble"

    def __init__(self, views: list[ViewSchema],
                 members: dict[str, InputFusion]) -> None:
        names = {v.name for v in views}
        if set(members) != names:
            missing = sorted(names - set(members)) + sorted(set(members) - names)
            raise ConfigError(f"incomplete ensemble, mismatched members: {missing}")
        self.views = list(views)
        self.members = dict(members)
        self.classes = next(iter(members.values())).classes

    def forward(self, batch: dict, rng=None) -> FusionOutputs:
        outs = [self.members[v.name].forward(batch, rng).probabilities
                for v in self.views]
        return FusionOutputs(probabilities=average_probabilities(outs))


def multi_loss(fused_loss: Tensor, view_losses: list[Tensor],
               gamma: float = 0.3) -> Tensor:
    """Fused loss plus gamma times the sum of per-view losses."""
    if gamma < 0:
        raise ConfigError(f"auxiliary loss weight must be >= 0, got {gamma}")
    if gamma == 0:
        return fused_loss
    if not view_losses:
        raise ConfigError("per-view losses required when the auxiliary weight is > 0")
    total = view_losses[0]
    for vl in view_losses[1:]:
        total = total + vl
    return fused_loss + total * gamma


def formula_count(strategy: str, n_encoder: int, n_head: int, views: int) -> int:
    """Closed-form parameter totals for width-preserving merges."""
    if strategy == "Input":
        return n_encoder + n_head
    if strategy == "Feature":
        return views * n_encoder + n_head
    if strategy in ("Decision", "Ensemble"):
        return views * (n_encoder + n_head)
    if strategy == "Hybrid":
        return views * (n_encoder + n_head) + n_head
    raise ConfigError(f"unknown strategy {strategy!r}")


def build_model(views: list[ViewSchema], strategy: str, config: EncoderConfig,
                classes: int, merge: str | None = None,
                component: str | None = None, gamma: float = 0.3) -> MVLModel:
    """Assemble a strategy model, optionally with one attached component."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; known: {STRATEGIES}")
    if not views:
        raise ConfigError("need at least one view")
    names = [v.name for v in views]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate view names: {names}")
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if component is not None:
        if component not in COMPONENTS:
            raise ConfigError(f"unknown component {component!r}; known: {COMPONENTS}")
        if strategy not in ("Feature", "Decision", "Hybrid"):
            raise ConfigError(
                f"component {component!r} attaches only to Feature, Decision, "
                f"or Hybrid, not {strategy}")
    if component == "gfusion":
        if merge not in (None, "gated"):
            raise ConfigError(
                f"gated-merge component conflicts with merge={merge!r}")
        merge = "gated"
    if strategy == "Ensemble":
        if merge not in (None, "average"):
            raise ConfigError("ensembles always average member predictions")
        model: MVLModel = EnsembleModel(
            views, {v.name: InputFusion([v], config, classes) for v in views})
    else:
        merge = merge or _DEFAULT_MERGE[strategy]
        if strategy == "Input":
            model = InputFusion(views, config, classes, merge)
        elif strategy == "Feature":
            model = FeatureFusion(views, config, classes, merge,
                                  aux_heads=(component == "multiloss"))
        elif strategy == "Decision":
            model = DecisionFusion(views, config, classes, merge)
        else:
            model = HybridFusion(views, config, classes, merge)
    if component == "multiloss":
        if gamma < 0:
            raise ConfigError(f"auxiliary loss weight must be >= 0, got {gamma}")
        model.multiloss_gamma = gamma
    return model
