"""Combined objective, teacher training and the distillation loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .arch import (
    StudentSpec,
    build_aligners,
    build_student,
    build_teacher,
    get_profile,
    load_checkpoint,
    parse_cpr,
    save_checkpoint,
    tap_features,
)
from .data import augment
from .density import DEFAULT_SIGMA, rasterize_density
from .distill import inter_rt_loss, intra_pt_loss
from .metrics import evaluate_maps
from .review import review_forward, review_loss, wrap_with_review

log = logging.getLogger(__name__)

SUPERVISION = ("hard_only", "hard_plus_soft")
COMPONENTS = ("review", "intra", "inter", "soft")


class ConfigError(ValueError):
    """A plan failed validation before any work started."""


def _check_fields(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


@dataclass
class DistillPlan:
    teacher: str = "toy"
    teacher_checkpoint: Optional[str] = None
    cpr: str = "1/4"
    rounds: int = 2
    lambda1: float = 0.5
    lambda2: float = 0.5
    lr: float = 1e-4
    weight_decay: float = 5e-4
    epochs: int = 100
    seed: int = 0
    supervision: str = "hard_only"
    soft_weight: float = 1.0
    sigma: float = DEFAULT_SIGMA
    crop: Optional[list] = None
    flip_prob: float = 0.5
    similarity: str = "cosine"
    attention: str = "raw"
    grad_clip: Optional[float] = None
    early_stop_patience: Optional[int] = None
    deterministic: bool = True

    def validate(self):
        try:
            get_profile(self.teacher)
            parse_cpr(self.cpr)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.weight_decay < 0 or self.epochs < 0 or self.rounds < 0:
            raise ConfigError("weight_decay, epochs and rounds must be >= 0")
        if self.supervision not in SUPERVISION:
            raise ConfigError(f"supervision must be one of {SUPERVISION}")
        if self.similarity not in ("cosine", "teacher"):
            raise ConfigError("similarity must be 'cosine' or 'teacher'")
        if self.attention not in ("raw", "minmax"):
            raise ConfigError("attention must be 'raw' or 'minmax'")
        if not self.sigma > 0 or not 0 <= self.flip_prob <= 1:
            raise ConfigError("sigma must be > 0 and flip_prob in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d):
        _check_fields(cls, d)
        return cls(**d).validate()


@dataclass
class TeacherPlan:
    profile: str = "toy"
    epochs: int = 200
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.0
    rounds: int = 0
    sigma: float = DEFAULT_SIGMA
    crop: Optional[list] = None
    flip_prob: float = 0.5
    grad_clip: Optional[float] = None
    deterministic: bool = True

    def validate(self):
        try:
            get_profile(self.profile)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not self.lr > 0 or self.epochs < 0 or self.rounds < 0 or self.weight_decay < 0:
            raise ConfigError("invalid teacher optimisation settings")
        if not self.sigma > 0 or not 0 <= self.flip_prob <= 1:
            raise ConfigError("sigma must be > 0 and flip_prob in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d):
        _check_fields(cls, d)
        return cls(**d).validate()


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # one dict of mean losses per epoch
    steps: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Optional[str] = None
    eval: Optional[dict] = None

    def series(self, name):
        return [e[name] for e in self.epochs]

    def to_dict(self):
        return {"epochs": self.epochs, "wall_time": self.wall_time,
                "checkpoint": self.checkpoint, "eval": self.eval}


def total_loss(maps, G, T, S_hat, lambda1=0.5, lambda2=0.5, soft_target=None, soft_weight=1.0,
               ref_index=None, similarity="cosine"):
    """Review loss plus weighted feature-transfer terms.

    Returns ``(total, components)`` with components ``review``, ``intra``,
    ``inter`` and ``soft`` (zero unless ``soft_target`` is given).
    """
    if lambda1 < 0 or lambda2 < 0 or soft_weight < 0:
        raise ValueError("loss weights must be >= 0")
    parts = {
        "review": review_loss(maps, G),
        "intra": intra_pt_loss(T, S_hat, normalization=similarity),
        "inter": inter_rt_loss(T, S_hat, ref_index),
        "soft": review_loss(maps, soft_target) if soft_target is not None
        else torch.zeros((), dtype=torch.float64),
    }
    total = parts["review"] + lambda1 * parts["intra"] + lambda2 * parts["inter"] + soft_weight * parts["soft"]
    return total, parts


def set_determinism(seed: int, deterministic: bool = True):
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def to_input(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]


def scene_target(scene, stride: int, sigma: float) -> torch.Tensor:
    g = rasterize_density(scene.points, scene.shape, sigma, stride).values
    return torch.from_numpy(g.astype(np.float32))[None, None]


def iterate_epoch(dataset, epoch, seed, stride, sigma, crop=None, flip_prob=0.5, cache=None):
    """Yield ``(input, target)`` pairs in a seeded shuffled order; batch size 1."""
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    static = crop is None and flip_prob == 0
    for i in order:
        scene = dataset[int(i)]
        if static:
            if cache is not None and i in cache:
                yield cache[i]
                continue
            item = (to_input(scene.image), scene_target(scene, stride, sigma))
            if cache is not None:
                cache[i] = item
            yield item
        else:
            rng = np.random.default_rng([seed, epoch, int(i)])
            aug = augment(scene, crop, flip_prob, rng)
            yield to_input(aug.image), scene_target(aug, stride, sigma)


def _check_divisible(dataset, stride, crop):
    for scene in dataset:
        h, w = crop if crop is not None else scene.shape
        if h % stride or w % stride:
            raise ValueError(f"scene {scene.id!r} size {h}x{w} not divisible by network stride {stride}")


def _write_log(path, record):
    if path is not None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def fit_supervised(model, dataset, epochs, seed, *, stride, lr=1e-3, weight_decay=0.0, rounds=0,
                   sigma=DEFAULT_SIGMA, crop=None, flip_prob=0.5, grad_clip=None, log_path=None):
    """Train ``model`` against rasterised hard targets with the review loss.

    With ``rounds == 0`` this is plain squared-error density regression.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    _check_divisible(dataset, stride, crop)
    opt = torch.optim.Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    report = TrainReport()
    cache = {}
    t0 = time.perf_counter()
    for epoch in range(epochs):
        model.train()
        losses = []
        for x, g in iterate_epoch(dataset, epoch, seed, stride, sigma, crop, flip_prob, cache):
            feature, _ = model.encode(x)
            loss = review_loss(review_forward(feature, model.decoder, rounds), g)
            opt.zero_grad()
            loss.backward()
            if grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
            opt.step()
            losses.append(loss.item())
        rec = {"epoch": epoch + 1, "total": float(np.mean(losses)), "review": float(np.mean(losses))}
        report.epochs.append(rec)
        _write_log(log_path, rec)
    report.wall_time = time.perf_counter() - t0
    model.eval()
    return report


def train_teacher(profile, dataset, epochs=200, seed=0, *, plan: Optional[TeacherPlan] = None,
                  out_dir=None, **overrides):
    """Train a teacher from scratch; returns ``(network, report)``.

    ``plan`` (or keyword overrides of its fields) sets the optimiser, target
    blur and augmentation; ``out_dir`` receives ``teacher.pt`` and ``log.jsonl``.
    """
    if plan is None:
        kind = profile if isinstance(profile, str) else profile.kind
        plan = TeacherPlan(profile=kind, epochs=epochs, seed=seed, **overrides)
    plan.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    set_determinism(plan.seed, plan.deterministic)
    net = build_teacher(profile if not isinstance(profile, str) else plan.profile)
    log_path = _prepare_out(out_dir, "teacher", asdict(plan))
    report = fit_supervised(net, dataset, plan.epochs, plan.seed, stride=net.profile.output_stride,
                            lr=plan.lr, weight_decay=plan.weight_decay, rounds=plan.rounds,
                            sigma=plan.sigma, crop=plan.crop, flip_prob=plan.flip_prob,
                            grad_clip=plan.grad_clip, log_path=log_path)
    if out_dir is not None:
        report.checkpoint = str(save_checkpoint(Path(out_dir) / "teacher.pt", net, plan.rounds,
                                                {"plan": asdict(plan)}))
    return net, report


def _prepare_out(out_dir, name, config):
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(config, indent=1, sort_keys=True))
    log_path = out / "log.jsonl"
    log_path.write_text("")
    return log_path


def _load_teacher(plan: DistillPlan, teacher):
    if teacher is None:
        if plan.teacher_checkpoint is None:
            raise ConfigError("plan has no teacher_checkpoint and no teacher was passed")
        teacher = load_checkpoint(plan.teacher_checkpoint).network
    profile = getattr(teacher, "profile", None)
    if profile is None:
        raise ConfigError("teacher must be a TeacherNet")
    if profile.kind != plan.teacher:
        raise ConfigError(f"plan names teacher {plan.teacher!r} but checkpoint is {profile.kind!r}")
    return teacher


def train_distill(plan: DistillPlan, dataset, teacher=None, out_dir=None):
    """Distil a frozen teacher into a student trained with review rounds.

    Returns ``(student, report)``. The student is updated together with
    the per-tap aligners, which are not part of the returned network or
    the exported checkpoint.
    """
    plan.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    teacher = _load_teacher(plan, teacher)
    teacher.eval()
    teacher.requires_grad_(False)

    set_determinism(plan.seed, plan.deterministic)
    try:
        student = build_student(StudentSpec.for_teacher(teacher.profile, plan.cpr), teacher.profile)
    except ValueError as e:
        raise ConfigError(f"teacher/student incompatible: {e}") from e
    aligners = build_aligners(student, teacher.profile)
    params = list(student.parameters()) + list(aligners.parameters())
    opt = torch.optim.Adam(params, lr=plan.lr, weight_decay=plan.weight_decay)

    stride = teacher.profile.output_stride
    _check_divisible(dataset, teacher.profile.encoder_stride, plan.crop)
    soft = plan.supervision == "hard_plus_soft"
    log_path = _prepare_out(out_dir, "distill", asdict(plan))
    report = TrainReport()
    cache = {}
    best, stale = float("inf"), 0
    t0 = time.perf_counter()
    for epoch in range(plan.epochs):
        student.train()
        aligners.train()
        sums = dict.fromkeys(("total",) + COMPONENTS, 0.0)
        n = 0
        for x, g in iterate_epoch(dataset, epoch, plan.seed, stride, plan.sigma, plan.crop,
                                  plan.flip_prob, cache):
            with torch.no_grad():
                t_feat, T = teacher.encode(x)
                soft_target = teacher.decoder(t_feat) if soft else None
            feature, S = student.encode(x)
            S_hat = [a(s) for a, s in zip(aligners, S)]
            maps = review_forward(feature, student.decoder, plan.rounds, plan.attention)
            loss, parts = total_loss(maps, g, T, S_hat, plan.lambda1, plan.lambda2, soft_target,
                                     plan.soft_weight, similarity=plan.similarity)
            opt.zero_grad()
            loss.backward()
            if plan.grad_clip:
                nn.utils.clip_grad_norm_(params, plan.grad_clip)
            opt.step()
            step = {"total": loss.item(), **{k: v.item() for k, v in parts.items()}}
            report.steps.append(step)
            for k, v in step.items():
                sums[k] += v
            n += 1
        rec = {"epoch": epoch + 1, **{k: v / n for k, v in sums.items()}}
        report.epochs.append(rec)
        _write_log(log_path, rec)
        log.debug("epoch %d total %.4f", epoch + 1, rec["total"])
        if plan.early_stop_patience:
            if rec["total"] < best - 1e-9:
                best, stale = rec["total"], 0
            else:
                stale += 1
                if stale >= plan.early_stop_patience:
                    break
    report.wall_time = time.perf_counter() - t0
    student.eval()
    if out_dir is not None:
        report.checkpoint = str(save_checkpoint(Path(out_dir) / "student.pt", student, plan.rounds,
                                                {"plan": asdict(plan)}))
    return student, report


@torch.no_grad()
def predict_maps(model, dataset, rounds: Optional[int] = None):
    """Predicted 2-D maps, optionally through ``rounds`` review rounds."""
    model.eval()
    net = wrap_with_review(model, rounds) if rounds else model
    return [net(to_input(scene.image))[0, 0].double().numpy() for scene in dataset]


def evaluate(model, dataset, rounds: Optional[int] = None, sigma=DEFAULT_SIGMA, game_max_level=3):
    """Score ``model`` on ``dataset``; targets are rasterised at the output resolution."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    preds = predict_maps(model, dataset, rounds)
    gts = []
    for scene, p in zip(dataset, preds):
        stride = scene.shape[0] // p.shape[0]
        gts.append(rasterize_density(scene.points, scene.shape, sigma, stride).values)
    return evaluate_maps(preds, gts, game_max_level), preds
