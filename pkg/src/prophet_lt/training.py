"""Teacher training with alternating GN/STD epochs, feature-distilled students, and evaluation."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import DivergenceError, ValidationError
from .longtail_data import DatasetSplit, InstanceSampler
from .loss_zoo import LossSpec, classification_loss, feature_distill_loss
from .model_core import LTModel, _child_seed, build_model, clone_model, strip_gn
from .propheter_layer import KernelMask

log = logging.getLogger(__name__)

METHODS = ("from_scratch", "decouple", "high_conf_kernels")


@dataclass(frozen=True)
class ScheduleConfig:
    epochs: int = 30
    period: int = 7
    lr: float = 0.05
    batch_size: int = 64
    optimizer: str = "sgd"
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("ScheduleConfig.epochs must be >= 1")
        if self.period < 1:
            raise ValidationError("ScheduleConfig.period must be >= 1")
        if not self.lr >= 0:
            raise ValidationError("ScheduleConfig.lr must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("ScheduleConfig.batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValidationError("ScheduleConfig.optimizer must be 'sgd' or 'adam'")

    def gn_epochs(self) -> list:
        return [e for e in range(self.epochs) if e % self.period == 0]


@dataclass(frozen=True)
class DistillConfig:
    """Stage-2 settings.

    ``epochs`` overrides the stage-2 schedule's epoch count (0 is allowed and
    means no updates). ``resample_noise=False`` replays one fixed draw of the
    teacher's noise stream for every batch.
    """

    method: str = "from_scratch"
    alpha: float = 1.0
    k: int = 10
    m: int = 10
    epochs: int | None = None
    resample_noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"DistillConfig.method must be one of {METHODS}")
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ValidationError("DistillConfig.alpha must be finite and >= 0")
        if self.k < 1:
            raise ValidationError("DistillConfig.k must be >= 1")
        if self.m < 1:
            raise ValidationError("DistillConfig.m must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ValidationError("DistillConfig.epochs must be >= 0")


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    accuracy: float
    per_class_accuracy: list
    group_accuracy: dict
    loss: float
    stage: str = ""
    path: str = "std"
    distill_loss: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_accuracy"] = [None if v is None or math.isnan(v) else v for v in self.per_class_accuracy]
        d["group_accuracy"] = {k: None if v is None or math.isnan(v) else v for k, v in self.group_accuracy.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        d = dict(d)
        d["per_class_accuracy"] = [math.nan if v is None else v for v in d["per_class_accuracy"]]
        d["group_accuracy"] = {k: math.nan if v is None else v for k, v in d["group_accuracy"].items()}
        return cls(**d)

    def core(self) -> tuple:
        """Fields shared by every training variant, for trace comparisons."""
        return (self.epoch, self.split, self.path, self.loss, self.accuracy,
                tuple(self.per_class_accuracy), tuple(sorted(self.group_accuracy.items())))


def _nanmean(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


@torch.no_grad()
def evaluate(model: LTModel, split: DatasetSplit, train_counts=None, thresholds=(100, 20),
             epoch: int = -1, split_tag: str = "test", batch_size: int = 4096) -> MetricsRecord:
    """Top-1 accuracy on the STD path; labels are used only for scoring.

    Classes are grouped by training count: many (> thresholds[0]), few
    (< thresholds[1]) and medium otherwise. Classes absent from ``split`` get
    a NaN accuracy and are skipped in group means.
    """
    if len(split) == 0:
        raise ValidationError("cannot evaluate on an empty split")
    was_training = model.training
    model.eval()
    preds, total_loss = [], 0.0
    for i in range(0, len(split), batch_size):
        x = split.inputs[i:i + batch_size]
        y = torch.as_tensor(split.labels[i:i + batch_size])
        _, logits = model.forward_std(x)
        total_loss += float(classification_loss(logits, y, LossSpec("ce"))) * len(y)
        preds.append(logits.argmax(1).numpy())
    model.train(was_training)
    preds = np.concatenate(preds)
    labels = split.labels
    C = split.num_classes
    per_class = []
    for c in range(C):
        sel = labels == c
        per_class.append(float((preds[sel] == c).mean()) if sel.any() else math.nan)
    counts = split.per_class_counts if train_counts is None else np.asarray(train_counts)
    many_t, few_t = thresholds
    groups = {
        "many": _nanmean([a for a, n in zip(per_class, counts) if n > many_t]),
        "medium": _nanmean([a for a, n in zip(per_class, counts) if few_t <= n <= many_t]),
        "few": _nanmean([a for a, n in zip(per_class, counts) if n < few_t]),
    }
    return MetricsRecord(epoch=epoch, split=split_tag, accuracy=float((preds == labels).mean()),
                         per_class_accuracy=per_class, group_accuracy=groups,
                         loss=total_loss / len(split))


def _optimizer(param_groups, sched: ScheduleConfig):
    if sched.optimizer == "adam":
        return torch.optim.Adam(param_groups, lr=sched.lr)
    return torch.optim.SGD(param_groups, lr=sched.lr, momentum=sched.momentum)


def _param_groups(model: LTModel, sched: ScheduleConfig, include_gn: bool):
    groups = [{"params": model.backbone_parameters(), "weight_decay": sched.weight_decay}]
    if include_gn and model.has_gn:
        groups.append({"params": model.propheter_parameters(), "weight_decay": 0.0})
    return groups


def _check_finite(loss, stage, epoch, batch):
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(stage, epoch, batch, value)


def _propheter_stats(model: LTModel) -> dict:
    if not model.has_gn:
        return {}
    with torch.no_grad():
        a = torch.cat([layer.a.reshape(-1) for layer in model.gn.values()])
        b = torch.cat([layer.b.reshape(-1) for layer in model.gn.values()])
    return {"a_min": float(a.min()), "a_mean": float(a.mean()),
            "b_min": float(b.min()), "b_max": float(b.max()), "b_mean": float(b.mean())}


def _epoch_record(model, epoch, stage, path, losses, distill, data, eval_split, thresholds):
    target = eval_split if eval_split is not None else data
    rec = evaluate(model, target, data.per_class_counts, thresholds, epoch=epoch,
                   split_tag="eval" if eval_split is not None else "train")
    rec.loss = float(np.mean(losses))
    rec.stage = stage
    rec.path = path
    rec.distill_loss = float(np.mean(distill)) if distill is not None else None
    rec.extra = _propheter_stats(model)
    return rec


def train_baseline(data: DatasetSplit, model: LTModel, loss: LossSpec, sched: ScheduleConfig,
                   eval_split=None, on_epoch=None, thresholds=(100, 20)):
    """Plain STD-path training of a copy of ``model``; residual layers, if any, are unused."""
    model = strip_gn(model)
    model.train()
    opt = _optimizer(_param_groups(model, sched, include_gn=False), sched)
    sampler = InstanceSampler(data, sched.batch_size, sched.seed)
    history = []
    for e in range(sched.epochs):
        losses = []
        for bi, (x, y) in enumerate(sampler.epoch(e)):
            y = torch.as_tensor(y)
            _, logits = model.forward_std(x)
            L = classification_loss(logits, y, loss)
            _check_finite(L, "baseline", e, bi)
            opt.zero_grad()
            L.backward()
            opt.step()
            losses.append(L.item())
        rec = _epoch_record(model, e, "baseline", "std", losses, None, data, eval_split, thresholds)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, model)
    return model, history


def train_teacher(data: DatasetSplit, model: LTModel, loss: LossSpec, sched: ScheduleConfig,
                  eval_split=None, on_epoch=None, thresholds=(100, 20)):
    """Alternate GN and STD epochs: epoch ``e`` uses the GN path iff ``e % period == 0``.

    Residual params are trained jointly with the network and projected back
    to their feasible set after every optimizer step. Returns a trained copy.
    """
    if not model.has_gn:
        raise ValidationError("teacher training needs at least one residual layer")
    model = clone_model(model)
    model.train()
    opt = _optimizer(_param_groups(model, sched, include_gn=True), sched)
    sampler = InstanceSampler(data, sched.batch_size, sched.seed)
    noise = torch.Generator().manual_seed(_child_seed(sched.seed, 17))
    history = []
    for e in range(sched.epochs):
        gn = e % sched.period == 0
        losses = []
        for bi, (x, y) in enumerate(sampler.epoch(e)):
            y = torch.as_tensor(y)
            if gn:
                _, logits = model.forward_gn(x, y, noise)
            else:
                _, logits = model.forward_std(x)
            L = classification_loss(logits, y, loss)
            _check_finite(L, "teacher", e, bi)
            opt.zero_grad()
            L.backward()
            opt.step()
            model.project_()
            losses.append(L.item())
        rec = _epoch_record(model, e, "teacher", "gn" if gn else "std", losses, None, data, eval_split, thresholds)
        history.append(rec)
        log.debug("teacher epoch %d path=%s loss=%.4f acc=%.4f", e, rec.path, rec.loss, rec.accuracy)
        if on_epoch is not None:
            on_epoch(rec, model)
    return model, history


def _distill(stage, teacher, student, data, loss, cfg, sched, mask, eval_split, on_epoch, thresholds):
    if teacher.spec.feature_dim != student.spec.feature_dim:
        raise ValidationError(
            f"teacher feature dim {teacher.spec.feature_dim} != student feature dim {student.spec.feature_dim}"
        )
    if not teacher.has_gn:
        raise ValidationError("the teacher has no residual layer to distill from")
    teacher_was_training = teacher.training
    teacher.eval()
    student.train()
    opt = _optimizer(_param_groups(student, sched, include_gn=False), sched)
    sampler = InstanceSampler(data, sched.batch_size, sched.seed)
    noise = torch.Generator().manual_seed(_child_seed(cfg.seed, 29))
    noise_start = noise.get_state()
    epochs = sched.epochs if cfg.epochs is None else cfg.epochs
    history = []
    for e in range(epochs):
        losses, distill = [], []
        for bi, (x, y) in enumerate(sampler.epoch(e)):
            y = torch.as_tensor(y)
            if not cfg.resample_noise:
                noise.set_state(noise_start)
            with torch.no_grad():
                v_hat, _ = teacher.forward_gn(x, y, noise, mask=mask)
            v, logits = student.forward_std(x)
            cls_loss = classification_loss(logits, y, loss)
            fd = feature_distill_loss(v, v_hat)
            L = cls_loss + cfg.alpha * fd
            _check_finite(L, stage, e, bi)
            opt.zero_grad()
            L.backward()
            opt.step()
            losses.append(L.item())
            distill.append(fd.item())
        rec = _epoch_record(student, e, stage, "std", losses, distill, data, eval_split, thresholds)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec, student)
    teacher.train(teacher_was_training)
    return student, history


def train_student_scratch(teacher: LTModel, data: DatasetSplit, loss: LossSpec, cfg: DistillConfig,
                          sched: ScheduleConfig, student: LTModel | None = None, eval_split=None,
                          on_epoch=None, thresholds=(100, 20)):
    """Train a freshly initialized student against the teacher's GN-path features.

    ``student`` is the untrained starting point (copied, not mutated); by
    default one is built from the teacher's backbone spec with ``sched.seed``.
    """
    if student is None:
        student = build_model(teacher.spec, teacher.num_classes, (), seed=sched.seed)
    else:
        student = strip_gn(student)
    return _distill("student_from_scratch", teacher, student, data, loss, cfg, sched, None,
                    eval_split, on_epoch, thresholds)


def train_student_decouple(teacher: LTModel, data: DatasetSplit, loss: LossSpec, cfg: DistillConfig,
                           sched: ScheduleConfig, eval_split=None, on_epoch=None, thresholds=(100, 20)):
    """Start from the teacher's backbone and classifier, then fine-tune with a fresh optimizer."""
    student = strip_gn(teacher)
    return _distill("student_decouple", teacher, student, data, loss, cfg, sched, None,
                    eval_split, on_epoch, thresholds)


def train_student_kernels(teacher: LTModel, mask: KernelMask, data: DatasetSplit, loss: LossSpec,
                          cfg: DistillConfig, sched: ScheduleConfig, eval_split=None, on_epoch=None,
                          thresholds=(100, 20)):
    """Like the decoupled variant, but the teacher adds noise only on each class's selected channels."""
    student = strip_gn(teacher)
    return _distill("student_kernels", teacher, student, data, loss, cfg, sched, mask,
                    eval_split, on_epoch, thresholds)


@torch.no_grad()
def select_high_conf_kernels(teacher: LTModel, data: DatasetSplit, k: int = 10, m: int = 10) -> KernelMask:
    """Per class, the ``k`` final-block channels most active on its ``m`` most confident samples.

    Confidence is the teacher's STD-path softmax probability of the true class.
    Ties in either ranking go to the lower index.
    """
    D = teacher.spec.feature_dim
    if not 1 <= k <= D:
        raise ValidationError(f"k must lie in [1, {D}], got {k}")
    if m < 1:
        raise ValidationError("m must be >= 1")
    was_training = teacher.training
    teacher.eval()
    chosen = []
    for c in range(teacher.num_classes):
        idx = np.flatnonzero(data.labels == c)
        if len(idx) == 0:
            raise ValidationError(f"class {c} has no training samples")
        if len(idx) < m:
            warnings.warn(f"class {c} has only {len(idx)} samples (< m={m}); using all of them", stacklevel=2)
        x = data.inputs[idx]
        _, logits = teacher.forward_std(x)
        conf = torch.softmax(logits, dim=1)[:, c].numpy()
        top = np.argsort(-conf, kind="stable")[:m]
        acts = teacher.block_outputs(x[top])[-1].numpy()
        mean_act = acts.mean(axis=0)
        chosen.append(tuple(sorted(np.argsort(-mean_act, kind="stable")[:k].tolist())))
    teacher.train(was_training)
    return KernelMask(tuple(chosen), D)


def run_student(method: str, teacher: LTModel, data, loss, cfg: DistillConfig, sched, student=None,
                eval_split=None, on_epoch=None, thresholds=(100, 20)):
    """Dispatch to one of the three stage-2 variants by name."""
    if method == "from_scratch":
        return train_student_scratch(teacher, data, loss, cfg, sched, student=student, eval_split=eval_split,
                                     on_epoch=on_epoch, thresholds=thresholds)
    if method == "decouple":
        return train_student_decouple(teacher, data, loss, cfg, sched, eval_split=eval_split,
                                      on_epoch=on_epoch, thresholds=thresholds)
    if method == "high_conf_kernels":
        mask = select_high_conf_kernels(teacher, data, cfg.k, cfg.m)
        return train_student_kernels(teacher, mask, data, loss, cfg, sched, eval_split=eval_split,
                                     on_epoch=on_epoch, thresholds=thresholds)
    raise ValidationError(f"unknown method {method!r}")

