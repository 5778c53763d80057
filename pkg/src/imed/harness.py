"""End-to-end training: component pre-training, teacher phase with SAM, student phase."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from imed.checkpoint import load_archive, load_module, module_tensors, save_archive
from imed.components import ComponentModel, DomainBatch, build_components, component_loss, unique_parameters
from imed.conditioning import RandomProjection
from imed.config import MetricsRecord, RunConfig
from imed.data import BatchStream, DomainData
from imed.distillation import DistillOutputs, StudentModel, kd_loss, student_ce, student_total
from imed.ensemble import EnsembleModel
from imed.errors import ConfigError, NonFiniteError
from imed.objectives import SAM, grad_reverse, loss_ce, loss_dc, loss_mcc, sam_step
from imed.shuffle import FusionParamLayout

log = logging.getLogger("imed")

LR_GAMMA = 10.0
LR_POWER = 0.75

# stream seed offsets per phase, all derived from RunConfig.seed
_PHASE_SEED = {"component": 101, "teacher": 202, "student": 303}


def lr_schedule(l0: float, p: float, gamma: float = LR_GAMMA, power: float = LR_POWER) -> float:
    """``l0 * (1 + gamma * p) ** -power`` for training progress ``p`` in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"training progress must be in [0, 1], got {p}")
    return l0 * (1 + gamma * p) ** (-power)


def _sgd(params, config: RunConfig) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=config.l0, momentum=config.momentum, weight_decay=config.weight_decay)


def _set_lr(opts: Sequence[torch.optim.Optimizer], lr: float):
    for opt in opts:
        for group in opt.param_groups:
            group["lr"] = lr


class RunLog:
    """Collects step and metrics records; mirrors them to JSON-lines files when ``out_dir`` is set.

    ``metrics.jsonl`` holds only deterministic fields; wall-clock times go to
    ``timings.jsonl``.
    """

    def __init__(self, out_dir: Path | None = None):
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.steps: list[dict] = []
        self.metrics: list[MetricsRecord] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            for name in ("steps.jsonl", "metrics.jsonl", "timings.jsonl"):
                (self.out_dir / name).write_text("")

    def _append(self, name: str, record: dict):
        if self.out_dir is not None:
            with open(self.out_dir / name, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def step(self, record: dict):
        self.steps.append(record)
        self._append("steps.jsonl", record)

    def metric(self, record: MetricsRecord):
        self.metrics.append(record)
        d = record.to_dict()
        wall = d.pop("wall_time")
        self._append("metrics.jsonl", d)
        self._append("timings.jsonl", {"model": record.model, "phase": record.phase, "epoch": record.epoch, "wall_time": wall})


def _check_finite(values: dict, phase: str, step: int):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise NonFiniteError(f"{phase} step {step}: non-finite losses {bad}", {"phase": phase, "step": step, **values})


# ---------------------------------------------------------------------------
# models


@dataclass
class Teacher:
    components: list[ComponentModel]
    ensemble: EnsembleModel
    d_in: int
    num_classes: int
    config: RunConfig

    @torch.no_grad()
    def component_outputs(self, x: torch.Tensor):
        outs = [c(x) for c in self.components]
        return [f for f, _ in outs], [g for _, g in outs]

    @torch.no_grad()
    def __call__(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feats, logits = self.component_outputs(x)
        out = self.ensemble(feats, logits)
        return out.feature, out.logits

    def modules(self) -> list[nn.Module]:
        return [*self.components, self.ensemble]

    def inference_parameter_count(self) -> int:
        comps = unique_parameters([nn.ModuleList([c.backbone, c.head]) for c in self.components])
        return sum(p.numel() for p in comps) + self.ensemble.inference_parameter_count()


def build_components_for(config: RunConfig, d_in: int, num_classes: int) -> list[ComponentModel]:
    return build_components(
        d_in,
        num_classes,
        config.seeds,
        config.component_methods(),
        feature_dim=config.feature_dim,
        hidden=config.backbone_hidden,
        share_head=config.share_head,
    )


def build_ensemble(config: RunConfig, num_classes: int) -> EnsembleModel:
    return EnsembleModel(
        config.n_components,
        config.feature_dim,
        num_classes,
        groups=config.groups,
        depth=config.fusion_depth,
        hidden=config.endogeny_hidden,
        tau=config.tau,
        fusion_kind=config.fusion_kind,
        instance_aware=config.instance_aware,
        disc_hidden=config.disc_hidden,
        projection_dim=config.projection_dim,
        projection_seed=config.seed + 7,
        softmax_conditioning=config.softmax_conditioning,
        seed=config.seed + 11,
    )


def build_student(config: RunConfig, d_in: int, num_classes: int) -> StudentModel:
    return StudentModel(d_in, config.feature_dim, num_classes, config.backbone_hidden, seed=config.seed + 13)


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict_logits(model, x: np.ndarray | torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float32)
    if isinstance(model, Teacher):
        return model(x)[1]
    _, logits = model(x)
    return logits


def accuracy(logits: torch.Tensor, labels) -> float:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() == 0:
        return 0.0
    return float((logits.argmax(dim=1) == labels).double().mean())


def evaluate(model, data: DomainData, name: str = "model", phase: str = "eval", epoch: int = 0, losses=None) -> MetricsRecord:
    """Top-1 accuracy on the source split and on the held-out target (test) split."""
    start = time.perf_counter()
    src = accuracy(predict_logits(model, data.source_x), data.source_y)
    tgt = accuracy(predict_logits(model, data.test_x), data.test_y)
    return MetricsRecord(
        transfer_name=str(data.meta.get("transfer_name", data.meta.get("generator", "custom"))),
        model=name,
        phase=phase,
        epoch=epoch,
        source_acc=src,
        target_acc=tgt,
        losses=dict(losses or {}),
        wall_time=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# training phases


def _streams(config: RunConfig, data: DomainData, phase: str):
    base = config.seed * 1000 + _PHASE_SEED[phase]
    src = BatchStream(data.source_x, data.source_y, config.batch_size, seed=base)
    # target labels are never handed to the training streams
    tgt = BatchStream(data.target_x, None, config.batch_size, seed=base + 1)
    return src, tgt


def _batches(src: BatchStream, tgt: BatchStream, num_classes: int) -> tuple[DomainBatch, DomainBatch]:
    xs, ys = src.next()
    xt, _ = tgt.next()
    return DomainBatch(xs, ys, "source", num_classes), DomainBatch(xt, None, "target")


def pretrain_components(config: RunConfig, data: DomainData, components: list[ComponentModel], runlog: RunLog | None = None):
    """Train every component on its own loss for ``epoch_c * iters`` steps."""
    runlog = runlog or RunLog()
    total = config.epoch_c * config.iters
    if total == 0:
        return components
    opt = _sgd(unique_parameters(components), config)
    src, tgt = _streams(config, data, "component")
    step = 0
    for epoch in range(config.epoch_c):
        for _ in range(config.iters):
            lr = lr_schedule(config.component_l0, step / total)
            _set_lr([opt], lr)
            s, t = _batches(src, tgt, data.num_classes)
            losses = [component_loss(c, s, t, config.component_weight) for c in components]
            values = {f"l_{i}": l.item() for i, l in enumerate(losses)}
            _check_finite(values, "component", step)
            opt.zero_grad(set_to_none=True)
            sum(losses).backward()
            opt.step()
            runlog.step({"phase": "component", "step": step, "lr": lr, **values})
            step += 1
        for i, c in enumerate(components):
            runlog.metric(evaluate(c, data, f"component{i}", "component", epoch + 1))
    return components


def _component_update_params(components: list[ComponentModel], pretrained: bool) -> list[nn.Parameter]:
    if not pretrained:
        return unique_parameters(components)
    heads = [nn.ModuleList([c.head] + ([c.adversary] if c.adversary is not None else [])) for c in components]
    return unique_parameters(heads)


def train_teacher(
    config: RunConfig,
    data: DomainData,
    components: list[ComponentModel] | None = None,
    runlog: RunLog | None = None,
) -> Teacher:
    """Teacher phase: component updates, then a SAM step on (E, J) and a plain step on D."""
    runlog = runlog or RunLog()
    if components is None:
        components = build_components_for(config, data.d_in, data.num_classes)
        if config.components_pretrained:
            pretrain_components(config, data, components, runlog)
    _check_dims(components, data)
    ensemble = build_ensemble(config, data.num_classes)
    teacher = Teacher(components, ensemble, data.d_in, data.num_classes, config)

    total = config.epoch_t * config.iters
    comp_opt = _sgd(_component_update_params(components, config.components_pretrained), config)
    groups = ensemble.trainable_groups()
    ens_opt = _sgd(groups["ensemble"], config)
    disc_opt = _sgd(groups["discriminator"], config)
    sam = SAM(groups["ensemble"], ens_opt, rho=config.rho)
    src, tgt = _streams(config, data, "teacher")
    mu1 = config.mu1

    step = 0
    for epoch in range(config.epoch_t):
        for _ in range(config.iters):
            lr = lr_schedule(config.l0, step / total)
            _set_lr([comp_opt, ens_opt], lr)
            _set_lr([disc_opt], lr * config.disc_lr_mult)
            s, t = _batches(src, tgt, data.num_classes)

            comp_losses = [component_loss(c, s, t, config.component_weight) for c in components]
            comp_opt.zero_grad(set_to_none=True)
            sum(comp_losses).backward()
            comp_opt.step()

            fs, gs = teacher.component_outputs(s.inputs)
            ft, gt = teacher.component_outputs(t.inputs)

            def task_terms():
                out_s = ensemble(fs, gs)
                out_t = ensemble(ft, gt)
                return loss_ce(out_s.logits, s.labels), loss_mcc(out_t.logits, config.mcc_temperature), out_s, out_t

            l_ce, l_c, out_s, out_t = task_terms()
            cond_s = ensemble.conditioning(out_s.feature, out_s.logits).values
            cond_t = ensemble.conditioning(out_t.feature, out_t.logits).values
            l_dc = loss_dc(ensemble.discriminator, grad_reverse(cond_s), grad_reverse(cond_t))
            values = {"l_ce": l_ce.item(), "l_c": l_c.item(), "l_dc": l_dc.item()}
            values.update({f"l_{i}": l.item() for i, l in enumerate(comp_losses)})
            _check_finite(values, "teacher", step)

            def closure():
                a, b, _, _ = task_terms()
                return a + mu1 * b

            ens_opt.zero_grad(set_to_none=True)
            disc_opt.zero_grad(set_to_none=True)
            info = sam_step(sam, l_ce + mu1 * l_c, closure, mu1 * l_dc if mu1 > 0 else None, [disc_opt], config.grad_clip)
            runlog.step(
                {
                    "phase": "teacher",
                    "step": step,
                    "lr": lr,
                    **values,
                    "grad_norm": info.grad_norm,
                    "eps_norm": info.eps_norm,
                }
            )
            step += 1
        runlog.metric(evaluate(teacher, data, "teacher", "teacher", epoch + 1, values))
    return teacher


def _check_dims(components: list[ComponentModel], data: DomainData):
    for c in components:
        if c.d_in != data.d_in or c.num_classes != data.num_classes:
            raise ConfigError(
                f"{c.name} expects d_in={c.d_in}, classes={c.num_classes}; "
                f"dataset has d_in={data.d_in}, classes={data.num_classes}"
            )


def train_student(config: RunConfig, teacher: Teacher, data: DomainData, runlog: RunLog | None = None) -> StudentModel:
    """Distill the frozen teacher into a single-backbone student for ``epoch_s * iters`` steps."""
    runlog = runlog or RunLog()
    if teacher.d_in != data.d_in or teacher.num_classes != data.num_classes:
        raise ConfigError(
            f"teacher built for d_in={teacher.d_in}, classes={teacher.num_classes}; "
            f"dataset has d_in={data.d_in}, classes={data.num_classes}"
        )
    student = build_student(config, data.d_in, data.num_classes)
    for m in teacher.modules():
        m.requires_grad_(False)
    total = config.epoch_s * config.iters
    opt = _sgd(student.parameters(), config)
    src, tgt = _streams(config, data, "student")
    step = 0
    try:
        for epoch in range(config.epoch_s):
            for _ in range(config.iters):
                lr = lr_schedule(config.l0, step / total)
                _set_lr([opt], lr)
                s, t = _batches(src, tgt, data.num_classes)
                tf_s, tg_s = teacher(s.inputs)
                tf_t, tg_t = teacher(t.inputs)
                sf_s, sg_s = student(s.inputs)
                sf_t, sg_t = student(t.inputs)
                kd = kd_loss(
                    DistillOutputs(tf_s, tg_s, tf_t, tg_t),
                    DistillOutputs(sf_s, sg_s, sf_t, sg_t),
                    config.alpha,
                    config.mu2,
                    config.feature_kd,
                )
                ce = student_ce(sg_s, s.labels)
                loss = student_total(kd, ce, config.mu3)
                values = {"l_kd": kd.item(), "l_ce_stu": ce.item(), "l_stu": loss.item()}
                _check_finite(values, "student", step)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                runlog.step({"phase": "student", "step": step, "lr": lr, **values})
                step += 1
            runlog.metric(evaluate(student, data, "student", "student", epoch + 1, values))
    finally:
        for m in teacher.modules():
            m.requires_grad_(True)
    return student


@dataclass
class ExperimentResult:
    config: RunConfig
    teacher: Teacher
    student: StudentModel | None
    final: dict[str, MetricsRecord] = field(default_factory=dict)
    runlog: RunLog | None = None

    def summary_rows(self) -> list[dict]:
        rows = []
        for name, rec in self.final.items():
            rows.append({"transfer": rec.transfer_name, "model": name, "source_acc": rec.source_acc, "target_acc": rec.target_acc})
        return rows


def run_experiment(
    config: RunConfig,
    data: DomainData,
    out_dir: Path | None = None,
    components: list[ComponentModel] | None = None,
) -> ExperimentResult:
    """Full pipeline: (pre-train components), teacher, (student); final metrics for every model."""
    torch.manual_seed(config.seed)
    data.meta.setdefault("transfer_name", config.transfer_name)
    runlog = RunLog(out_dir)
    if components is None:
        components = build_components_for(config, data.d_in, data.num_classes)
        if config.components_pretrained:
            pretrain_components(config, data, components, runlog)
    else:
        components = copy.deepcopy(components)
    teacher = train_teacher(config, data, components, runlog)
    student = train_student(config, teacher, data, runlog) if config.distill else None
    final = {f"component{i}": evaluate(c, data, f"component{i}", "final") for i, c in enumerate(teacher.components)}
    final["teacher"] = evaluate(teacher, data, "teacher", "final")
    if student is not None:
        final["student"] = evaluate(student, data, "student", "final")
    for rec in final.values():
        runlog.metric(rec)
    if out_dir is not None:
        out_dir = Path(out_dir)
        config.dump(out_dir / "config.json")
        write_params(out_dir / "params.json", teacher, student)
        save_teacher(out_dir / "teacher.ckpt", teacher)
        if student is not None:
            save_student(out_dir / "student.ckpt", student, config)
    return ExperimentResult(config, teacher, student, final, runlog)


def parameter_counts(teacher: Teacher, student: StudentModel | None = None) -> dict[str, int]:
    """Inference-time parameter counts per deployable model."""
    counts = {f"component{i}": c.inference_parameter_count() for i, c in enumerate(teacher.components)}
    counts["teacher"] = teacher.inference_parameter_count()
    if student is not None:
        counts["student"] = student.inference_parameter_count()
    return counts


def write_params(path: Path, teacher: Teacher, student: StudentModel | None = None):
    Path(path).write_text(json.dumps(parameter_counts(teacher, student), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def _component_meta(components: list[ComponentModel]) -> list[dict]:
    return [
        {
            "name": c.name,
            "seed": c.seed,
            "method": c.method,
            "projection_seed": None if c.projection is None else c.projection.seed,
        }
        for c in components
    ]


def _component_tensors(components: list[ComponentModel]) -> dict:
    tensors = {}
    for i, c in enumerate(components):
        tensors.update(module_tensors(c, f"component{i}"))
        if c.projection is not None:
            tensors.update(c.projection.tensors(f"component{i}.projection"))
    return tensors


def _restore_components(config: RunConfig, meta: dict, tensors: dict) -> list[ComponentModel]:
    components = build_components_for(config, meta["d_in"], meta["num_classes"])
    if len(components) != len(meta["components"]):
        raise ConfigError(f"checkpoint has {len(meta['components'])} components, config expects {len(components)}")
    for i, c in enumerate(components):
        load_module(c, tensors, f"component{i}")
        if c.projection is not None:
            c.projection = RandomProjection.from_tensors(tensors, c.projection.seed, f"component{i}.projection")
    return components


def save_components(path: Path, components: list[ComponentModel], config: RunConfig) -> Path:
    c0 = components[0]
    meta = {
        "kind": "components",
        "config": config.to_dict(),
        "d_in": c0.d_in,
        "num_classes": c0.num_classes,
        "components": _component_meta(components),
    }
    return save_archive(path, _component_tensors(components), meta)


def save_teacher(path: Path, teacher: Teacher) -> Path:
    tensors = _component_tensors(teacher.components)
    tensors.update(module_tensors(teacher.ensemble, "ensemble"))
    if teacher.ensemble.projection is not None:
        tensors.update(teacher.ensemble.projection.tensors("ensemble.projection"))
    meta = {
        "kind": "teacher",
        "config": teacher.config.to_dict(),
        "d_in": teacher.d_in,
        "num_classes": teacher.num_classes,
        "components": _component_meta(teacher.components),
        "ensemble": teacher.ensemble.hparams,
        "fusion_layout": None if teacher.ensemble.layout is None else teacher.ensemble.layout.to_dict(),
    }
    return save_archive(path, tensors, meta)


def save_student(path: Path, student: StudentModel, config: RunConfig) -> Path:
    meta = {
        "kind": "student",
        "config": config.to_dict(),
        "d_in": student.d_in,
        "num_classes": student.num_classes,
        "feature_dim": student.feature_dim,
        "hidden": list(student.hidden),
    }
    return save_archive(path, module_tensors(student, "student"), meta)


def load_checkpoint(path: Path):
    """Return a Teacher, StudentModel, or list of components depending on the archive kind."""
    tensors, meta = load_archive(path)
    config = RunConfig.from_dict(meta["config"])
    kind = meta.get("kind")
    if kind == "student":
        student = StudentModel(meta["d_in"], meta["feature_dim"], meta["num_classes"], meta["hidden"], seed=config.seed + 13)
        load_module(student, tensors, "student")
        return student
    components = _restore_components(config, meta, tensors)
    if kind == "components":
        return components
    if kind != "teacher":
        raise ConfigError(f"{path}: unknown checkpoint kind {kind!r}")
    ensemble = EnsembleModel(**meta["ensemble"])
    load_module(ensemble, tensors, "ensemble")
    if ensemble.projection is not None:
        ensemble.projection = RandomProjection.from_tensors(tensors, ensemble.projection.seed, "ensemble.projection")
    if meta["fusion_layout"] is not None and FusionParamLayout.from_dict(meta["fusion_layout"]) != ensemble.layout:
        raise ConfigError(f"{path}: fusion layout does not match the rebuilt ensemble")
    return Teacher(components, ensemble, meta["d_in"], meta["num_classes"], config)
