"""Distillation training loop, evaluation, and run records.

One run = one student (plus channel adapter in the full modes) trained
against a frozen teacher checkpoint. Per epoch the distillation weight
beta is evaluated once from the schedule; per batch the mode's loss
terms are assembled into

    total = classification + beta * (wasserstein + grad_match + distill)

and the optimizer steps over student + adapter parameters only. Runs
are seeded and deterministic on CPU; a non-finite loss aborts with its
epoch/batch coordinates rather than being skipped.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor

from gompertz_kd.config import DISTILL_MODES, FULL_MODES, ExperimentConfig, snapshot_yaml
from gompertz_kd.data import ArrayDataset, load_dataset
from gompertz_kd.errors import ConfigurationError, TrainingAbort
from gompertz_kd.losses import (
    ChannelAdapter,
    classification_loss,
    distillation_loss,
    gradient_matching_loss,
    total_loss,
    wasserstein_feature_loss,
)
from gompertz_kd.models import ModelAdapter, build_model, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "epoch",
    "beta",
    "loss_cls",
    "loss_w",
    "loss_grad",
    "loss_kd",
    "loss_total",
    "acc_train",
    "acc_test",
    "seconds",
)

TEACHER_CACHE_MAX_BYTES = 1 << 30


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    beta: float
    loss_cls: float
    loss_w: float
    loss_grad: float
    loss_kd: float
    loss_total: float
    acc_train: float
    acc_test: float
    seconds: float

    def csv_line(self) -> str:
        return ",".join(
            [
                str(self.epoch),
                repr(self.beta),
                repr(self.loss_cls),
                repr(self.loss_w),
                repr(self.loss_grad),
                repr(self.loss_kd),
                repr(self.loss_total),
                repr(self.acc_train),
                repr(self.acc_test),
                f"{self.seconds:.3f}",
            ]
        )


@dataclass
class RunRecord:
    """Everything a finished run leaves behind, JSON-serializable."""

    dataset: str
    teacher_id: str | None
    student_id: str
    mode: str
    seed: int
    rows: list[EpochRow] = field(default_factory=list)
    final_test_acc: float = 0.0
    teacher_test_acc: float | None = None
    checkpoint_path: str | None = None
    role: str = "student"
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        rows = [EpochRow(**row) for row in d.get("rows", [])]
        return cls(
            dataset=d["dataset"],
            teacher_id=d.get("teacher_id"),
            student_id=d["student_id"],
            mode=d["mode"],
            seed=d["seed"],
            rows=rows,
            final_test_acc=d.get("final_test_acc", 0.0),
            teacher_test_acc=d.get("teacher_test_acc"),
            checkpoint_path=d.get("checkpoint_path"),
            role=d.get("role", "student"),
            config=d.get("config", {}),
        )

    def save(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / "run.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _batch_indices(n: int, batch_size: int, generator: torch.Generator | None):
    order = (
        torch.randperm(n, generator=generator)
        if generator is not None
        else torch.arange(n)
    )
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate(model: ModelAdapter, dataset: ArrayDataset, batch_size: int = 512) -> float:
    """Top-1 accuracy of `model` over the full dataset, deterministic."""
    if model.num_classes != dataset.num_classes:
        raise ConfigurationError(
            f"model has {model.num_classes} classes, dataset has {dataset.num_classes}"
        )
    was_training = model.training
    model.eval()
    correct = 0
    with torch.no_grad():
        for idx in _batch_indices(len(dataset), batch_size, None):
            logits = model(dataset.images[idx])
            correct += int((logits.argmax(dim=1) == dataset.labels[idx]).sum())
    model.train(was_training)
    return correct / len(dataset)


def _teacher_bundle(
    teacher: ModelAdapter, x: Tensor, y: Tensor, with_grad: bool = True
) -> tuple[Tensor, Tensor, Tensor | None]:
    """Frozen-teacher features, logits, and per-sample d(CE)/d(features).

    Gradients are taken against the summed cross-entropy so each sample's
    gradient is independent of which batch it was computed in; callers
    divide by their batch size to recover batch-mean-CE gradients. That
    keeps the precomputed teacher cache exactly equivalent to per-batch
    recomputation.
    """
    with torch.no_grad():
        feats = teacher.backbone(x)
    if not with_grad:
        with torch.no_grad():
            logits = teacher.head(feats)
        return feats, logits, None
    feats = feats.detach().requires_grad_(True)
    with torch.enable_grad():
        logits = teacher.head(feats)
        ce_sum = F.cross_entropy(logits, y, reduction="sum")
        grad = torch.autograd.grad(ce_sum, feats)[0]
    return feats.detach(), logits.detach(), grad.detach()


def _build_teacher_cache(
    teacher: ModelAdapter, dataset: ArrayDataset, batch_size: int, with_grads: bool
) -> tuple[Tensor, Tensor, Tensor | None] | None:
    c, h, w = teacher.feature_shape
    n = len(dataset)
    per_sample = (2 if with_grads else 1) * c * h * w + teacher.num_classes
    if n * per_sample * 4 > TEACHER_CACHE_MAX_BYTES:
        logger.info("teacher cache would need %.1f MB; falling back to per-batch compute",
                    n * per_sample * 4 / 1e6)
        return None
    feats = torch.empty((n, c, h, w))
    logits = torch.empty((n, teacher.num_classes))
    grads = torch.empty((n, c, h, w)) if with_grads else None
    for idx in _batch_indices(n, batch_size, None):
        f, lg, g = _teacher_bundle(
            teacher, dataset.images[idx], dataset.labels[idx], with_grad=with_grads
        )
        feats[idx], logits[idx] = f, lg
        if with_grads:
            grads[idx] = g
    return feats, logits, grads


def _align_spatial(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    target = (min(a.shape[2], b.shape[2]), min(a.shape[3], b.shape[3]))
    if tuple(a.shape[2:]) != target:
        a = F.adaptive_avg_pool2d(a, target)
    if tuple(b.shape[2:]) != target:
        b = F.adaptive_avg_pool2d(b, target)
    return a, b


def _abort_if_bad(value: Tensor, term: str, epoch: int, batch_index: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingAbort(epoch, batch_index, term)


def train(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    checkpoint_name: str = "student.pt",
    batch_hook=None,
) -> RunRecord:
    """Run one training experiment and return its full record.

    With `out_dir` set, writes config.yaml, metrics.csv (one row per
    epoch), the trained checkpoint, and run.json. `batch_hook`, if given,
    receives (epoch, batch_index, LossBreakdown) after every step.
    """
    violations = config.validate()
    if violations:
        raise ConfigurationError("invalid experiment:\n  " + "\n  ".join(violations))

    train_ds = load_dataset(config.train_data)
    eval_ds = load_dataset(config.eval_data)
    if train_ds.num_classes != eval_ds.num_classes:
        raise ConfigurationError(
            f"train/eval class counts differ: {train_ds.num_classes} vs {eval_ds.num_classes}"
        )
    num_classes = train_ds.num_classes

    uses_distill = config.mode in DISTILL_MODES
    uses_full = config.mode in FULL_MODES

    teacher = None
    teacher_test_acc = None
    if uses_distill:
        teacher, _meta = load_checkpoint(
            config.teacher_checkpoint,
            allow_paper_scale=config.allow_paper_scale,
            frozen=True,
        )
        if teacher.num_classes != num_classes:
            raise ConfigurationError(
                f"teacher has {teacher.num_classes} classes, dataset has {num_classes}"
            )
        teacher_test_acc = evaluate(teacher, eval_ds, config.eval_batch_size)

    torch.manual_seed(config.seed)
    student = build_model(
        config.student_id,
        num_classes,
        seed=config.seed,
        allow_paper_scale=config.allow_paper_scale,
    )
    adapter = None
    if uses_full:
        with torch.random.fork_rng():
            torch.manual_seed(config.seed + 101)
            adapter = ChannelAdapter(teacher.feature_shape[0], student.feature_shape[0])

    params = list(student.parameters())
    if adapter is not None:
        params += list(adapter.parameters())
    opt_cfg = config.optimizer
    if opt_cfg.kind == "sgd":
        optimizer = torch.optim.SGD(
            params,
            lr=opt_cfg.learning_rate,
            momentum=opt_cfg.momentum,
            weight_decay=opt_cfg.weight_decay,
        )
    elif opt_cfg.kind == "adam":
        optimizer = torch.optim.Adam(
            params, lr=opt_cfg.learning_rate, weight_decay=opt_cfg.weight_decay
        )
    else:
        raise ConfigurationError(f"unknown optimizer kind {opt_cfg.kind!r}")
    scheduler = (
        torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
        if opt_cfg.decay == "cosine"
        else None
    )

    cache = None
    if uses_distill and config.cache_teacher:
        cache = _build_teacher_cache(
            teacher, train_ds, config.eval_batch_size, with_grads=uses_full
        )

    shuffle_gen = torch.Generator()
    shuffle_gen.manual_seed(config.seed * 1_000_003 + 17)

    out_path = Path(out_dir) if out_dir is not None else None
    csv_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.yaml").write_text(snapshot_yaml(config.raw))
        csv_file = open(out_path / "metrics.csv", "w")
        csv_file.write(",".join(CSV_COLUMNS) + "\n")

    record = RunRecord(
        dataset=config.train_data.name,
        teacher_id=config.teacher_id,  # cell context even when the mode ignores it
        student_id=config.student_id,
        mode=config.mode,
        seed=config.seed,
        teacher_test_acc=teacher_test_acc,
        config=config.raw,
    )

    n = len(train_ds)
    try:
        for epoch in range(1, config.epochs + 1):
            t_start = time.perf_counter()
            beta = config.schedule.beta_for_epoch(epoch, config.epochs)
            sums = {"cls": 0.0, "w": 0.0, "grad": 0.0, "kd": 0.0, "total": 0.0}
            correct = 0
            student.train()
            for batch_index, idx in enumerate(
                _batch_indices(n, config.batch_size, shuffle_gen)
            ):
                x = train_ds.images[idx]
                y = train_ds.labels[idx]
                feats_s, logits_s = student.forward_with_features(x)
                ce = classification_loss(logits_s, y)
                _abort_if_bad(ce, "classification", epoch, batch_index)

                w_term = torch.zeros(())
                g_term = torch.zeros(())
                d_term = torch.zeros(())
                if uses_distill:
                    if cache is not None:
                        f_t = cache[0][idx]
                        logits_t = cache[1][idx]
                        grad_t = cache[2][idx] if cache[2] is not None else None
                    else:
                        f_t, logits_t, grad_t = _teacher_bundle(
                            teacher, x, y, with_grad=uses_full
                        )
                    if grad_t is not None:
                        grad_t = grad_t / idx.numel()  # per-sample -> batch-mean CE
                    d_term = distillation_loss(
                        logits_t, logits_s, config.tau, config.kd_tau_squared
                    )
                    _abort_if_bad(d_term, "distill", epoch, batch_index)
                    if uses_full:
                        w_term = wasserstein_feature_loss(
                            f_t, feats_s, config.num_quantiles
                        )
                        _abort_if_bad(w_term, "wasserstein", epoch, batch_index)
                        grad_s = torch.autograd.grad(
                            ce,
                            feats_s,
                            retain_graph=True,
                            create_graph=config.second_order_grad_match,
                        )[0]
                        g_t_al, g_s_al = _align_spatial(grad_t, grad_s)
                        g_term = gradient_matching_loss(
                            adapter(g_t_al), g_s_al, config.r
                        )
                        _abort_if_bad(g_term, "grad_match", epoch, batch_index)

                loss = ce + beta * (w_term + g_term + d_term)
                _abort_if_bad(loss, "total", epoch, batch_index)
                optimizer.zero_grad()
                loss.backward()
                if config.grad_clip_norm:
                    # the cosine term's gradient scales like 1/|adapter(grad_T)|,
                    # which runs away once the student's CE gradient collapses;
                    # a generous norm clip keeps the degenerate regime bounded
                    torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm)
                optimizer.step()

                bsz = idx.numel()
                breakdown = total_loss(ce, w_term, g_term, d_term, beta)
                sums["cls"] += breakdown.classification * bsz
                sums["w"] += breakdown.wasserstein * bsz
                sums["grad"] += breakdown.grad_match * bsz
                sums["kd"] += breakdown.distill * bsz
                sums["total"] += breakdown.total * bsz
                correct += int((logits_s.argmax(dim=1) == y).sum())
                if batch_hook is not None:
                    batch_hook(epoch, batch_index, breakdown)

            if scheduler is not None:
                scheduler.step()
            acc_test = evaluate(student, eval_ds, config.eval_batch_size)
            row = EpochRow(
                epoch=epoch,
                beta=beta,
                loss_cls=sums["cls"] / n,
                loss_w=sums["w"] / n,
                loss_grad=sums["grad"] / n,
                loss_kd=sums["kd"] / n,
                loss_total=sums["total"] / n,
                acc_train=correct / n,
                acc_test=acc_test,
                seconds=time.perf_counter() - t_start,
            )
            record.rows.append(row)
            if csv_file is not None:
                csv_file.write(row.csv_line() + "\n")
                csv_file.flush()
            logger.info(
                "%s epoch %d/%d beta=%.4f loss=%.4f acc_test=%.4f (%.1fs)",
                config.mode,
                epoch,
                config.epochs,
                beta,
                row.loss_total,
                acc_test,
                row.seconds,
            )
    finally:
        if csv_file is not None:
            csv_file.close()

    record.final_test_acc = record.rows[-1].acc_test if record.rows else 0.0
    if out_path is not None:
        ckpt = save_checkpoint(
            student,
            out_path / checkpoint_name,
            metadata={
                "mode": config.mode,
                "dataset": config.train_data.name,
                "seed": config.seed,
                "final_test_acc": record.final_test_acc,
            },
        )
        record.checkpoint_path = str(ckpt)
        record.save(out_path)
    return record


def train_teacher(
    config: ExperimentConfig, out_dir: str | Path | None = None
) -> RunRecord:
    """Plain cross-entropy training of the configured teacher architecture.

    The resulting checkpoint (teacher.pt under `out_dir`) is what the
    distillation modes consume via models.teacher_checkpoint.
    """
    if not config.teacher_id:
        raise ConfigurationError("models.teacher is required to train a teacher")
    from gompertz_kd.schedule import ConstantSchedule

    teacher_cfg = dataclasses.replace(
        config,
        mode="student_only",
        student_id=config.teacher_id,
        teacher_checkpoint=None,
        schedule=ConstantSchedule(0.0),
    )
    record = train(teacher_cfg, out_dir, checkpoint_name="teacher.pt")
    record.role = "teacher"
    if out_dir is not None:
        record.save(out_dir)
    return record
