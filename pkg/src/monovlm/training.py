"""The three-stage training procedure and its objectives.

Stage 1 (distill): the holistic embedding module alone is trained to match
frozen teacher features under negative cosine similarity, on unpaired random
images and random token ids. Stage 2 (align): the embedding module is trained
through the frozen LLM with next-token cross-entropy on multi-modal samples.
Stage 3 (instruct): the whole model is tuned with the same objective.

Freezing is structural: parameters outside the stage's trainable set have
``requires_grad`` switched off for the duration, so no gradient is ever
computed or applied to them.
"""

from __future__ import annotations

import contextlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import RandomDistillSource
from .model import ForwardResult, MonoVLM
from .optim import AdamW, schedule_lr
from .sequence import TokenSequence
from .teachers import TeacherBundle

COS_EPS = 1e-8

STAGE_DISTILL = "distill"
STAGE_ALIGN = "align"
STAGE_INSTRUCT = "instruct"
STAGES = (STAGE_DISTILL, STAGE_ALIGN, STAGE_INSTRUCT)


class TrainingError(RuntimeError):
    """A stage hit an unrecoverable state (e.g. non-finite loss)."""


@dataclass
class StagePlan:
    """One stage's optimizer settings and budget."""

    stage: str
    steps: int
    batch_size: int
    peak_lr: float
    schedule: str  # constant | cosine
    warmup_steps: int = 0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.warmup_steps > self.steps:
            raise ValueError("warmup longer than the stage")

    def lr_at(self, step: int) -> float:
        return schedule_lr(
            step, peak=self.peak_lr, total_steps=self.steps, warmup_steps=self.warmup_steps, kind=self.schedule
        )


# Desk-scale defaults: learning rates follow the reference recipe with the
# align/instruct rates scaled 10x for the small model; step budgets keep the
# 10:5:2.5 ratio wide enough that each stage matters.
_DESK = {
    STAGE_DISTILL: dict(steps=2000, batch_size=32, peak_lr=3e-4, schedule="constant", warmup_steps=32, weight_decay=0.05),
    STAGE_ALIGN: dict(steps=1000, batch_size=32, peak_lr=5e-4, schedule="cosine", warmup_steps=8, weight_decay=0.01),
    STAGE_INSTRUCT: dict(steps=500, batch_size=32, peak_lr=4e-4, schedule="cosine", warmup_steps=15, weight_decay=0.01),
}

# Full-scale recipe for documentation: batch 4096; the step counts are the
# stated data amounts (500M / 50M / 5M samples) divided by that batch size;
# instruct warmup is the 0.03 warmup ratio.
_PAPER = {
    STAGE_DISTILL: dict(steps=122071, batch_size=4096, peak_lr=3e-4, schedule="constant", warmup_steps=2000, weight_decay=0.05),
    STAGE_ALIGN: dict(steps=12208, batch_size=4096, peak_lr=5e-5, schedule="cosine", warmup_steps=100, weight_decay=0.01),
    STAGE_INSTRUCT: dict(steps=1221, batch_size=4096, peak_lr=4e-5, schedule="cosine", warmup_steps=37, weight_decay=0.01),
}

PRESETS = {"desk": _DESK, "paper": _PAPER}


def stage_plan(stage: str, preset: str = "desk", seed: int = 0, **overrides) -> StagePlan:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    kw = dict(PRESETS[preset][stage])
    kw.update(overrides)
    return StagePlan(stage=stage, seed=seed, **kw)


@dataclass
class TrainReport:
    """Per-step loss/lr/wall-time series of one executed stage."""

    stage: str
    seed: int
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    skipped: int = 0
    checkpoint: str | None = None

    @property
    def steps(self) -> int:
        return len(self.losses)

    @property
    def wall_time_s(self) -> float:
        return sum(self.wall_ms) / 1000.0

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, (loss, lr, ms) in enumerate(zip(self.losses, self.lrs, self.wall_ms)):
                f.write(json.dumps({"step": i, "loss": loss, "lr": lr, "wall_ms": ms}) + "\n")


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def distill_loss(student_img: Tensor, target_img, student_txt: Tensor, target_txt) -> Tensor:
    """Mean negative cosine over image tokens plus mean negative cosine over
    text tokens (equal weights); bounded in [-2, 2]."""
    t_img = target_img if isinstance(target_img, Tensor) else Tensor(np.asarray(target_img))
    t_txt = target_txt if isinstance(target_txt, Tensor) else Tensor(np.asarray(target_txt))
    if student_img.shape != t_img.shape:
        raise ad.ShapeError(f"image token mismatch: student {student_img.shape} vs teacher {t_img.shape}")
    if student_txt.shape != t_txt.shape:
        raise ad.ShapeError(f"text token mismatch: student {student_txt.shape} vs teacher {t_txt.shape}")
    img_term = ad.neg(ad.cosine_similarity(student_img, t_img, COS_EPS).mean())
    txt_term = ad.neg(ad.cosine_similarity(student_txt, t_txt, COS_EPS).mean())
    return img_term + txt_term


def split_student_rows(hx_row: Tensor, seq: TokenSequence) -> tuple[Tensor, Tensor]:
    """Slice one sample's holistic-embedding output into its image rows and
    text rows (each in position order)."""
    img_parts, txt_parts = [], []
    pos = 0
    for start, end in seq.image_blocks():
        if start > pos:
            txt_parts.append(hx_row[pos:start])
        img_parts.append(hx_row[start:end])
        pos = end
    if pos < seq.length:
        txt_parts.append(hx_row[pos : seq.length])
    img = ad.concat(img_parts, axis=0) if img_parts else Tensor(np.zeros((0, hx_row.shape[-1]), dtype=hx_row.dtype))
    txt = ad.concat(txt_parts, axis=0) if len(txt_parts) != 1 else txt_parts[0]
    return img, txt


def batch_distill_loss(model: MonoVLM, teachers: TeacherBundle, seqs: list[TokenSequence]) -> Tensor:
    """Distillation objective over a batch: teacher targets are computed
    independently per stream, so no image-text pairing is required."""
    hx, _ = model.holistic_embed(seqs)
    first = seqs[0]
    uniform = len(first.image_blocks()) == 1 and all(
        s.length == first.length and np.array_equal(s.modality, first.modality) for s in seqs[1:]
    )
    if uniform:
        return _uniform_distill_loss(model, teachers, seqs, hx)
    img_s, img_t, txt_s, txt_t = [], [], [], []
    for b, seq in enumerate(seqs):
        s_img, s_txt = split_student_rows(hx[b], seq)
        if s_img.shape[0]:
            img_s.append(s_img)
            img_t.append(teachers.image_features(seq))
        txt_s.append(s_txt)
        txt_t.append(teachers.text_features(seq.ids[~seq.modality]))
    if not img_s:
        raise ad.ShapeError("distillation batch contains no image tokens")
    student_img = ad.concat(img_s, axis=0)
    student_txt = ad.concat(txt_s, axis=0)
    return distill_loss(student_img, np.concatenate(img_t), student_txt, np.concatenate(txt_t))


def _uniform_distill_loss(model: MonoVLM, teachers: TeacherBundle, seqs, hx: Tensor) -> Tensor:
    """Vectorized distillation loss when every sample shares one layout (the
    random-distill recipe guarantees this)."""
    first = seqs[0]
    B = len(seqs)
    c = model.cfg.hidden
    blocks = first.image_blocks()
    if not blocks:
        raise ad.ShapeError("distillation batch contains no image tokens")
    img_parts, txt_parts, txt_ids = [], [], []
    pos = 0
    for start, end in blocks:
        if start > pos:
            txt_parts.append(hx[:, pos:start].reshape(B * (start - pos), c))
            txt_ids.append(np.stack([s.ids[pos:start] for s in seqs]))
        img_parts.append(hx[:, start:end].reshape(B * (end - start), c))
        pos = end
    if pos < first.length:
        txt_parts.append(hx[:, pos : first.length].reshape(B * (first.length - pos), c))
        txt_ids.append(np.stack([s.ids[pos : first.length] for s in seqs]))
    student_img = ad.concat(img_parts, axis=0) if len(img_parts) > 1 else img_parts[0]
    student_txt = ad.concat(txt_parts, axis=0) if len(txt_parts) > 1 else txt_parts[0]
    target_img = teachers.image_features_batch(seqs).reshape(-1, c)
    target_txt = np.concatenate([teachers.text_features(ids).reshape(-1, c) for ids in txt_ids])
    return distill_loss(student_img, target_img, student_txt, target_txt)


def sample_distill_terms(model: MonoVLM, teachers: TeacherBundle, seq: TokenSequence) -> tuple[float, float]:
    """(image term, text term) of one sample's distillation loss."""
    with ad.no_grad():
        hx, _ = model.holistic_embed([seq])
        s_img, s_txt = split_student_rows(hx[0], seq)
        img = -float(ad.cosine_similarity(s_img, Tensor(teachers.image_features(seq)), COS_EPS).mean().item())
        txt = -float(
            ad.cosine_similarity(s_txt, Tensor(teachers.text_features(seq.ids[~seq.modality])), COS_EPS).mean().item()
        )
    return img, txt


def sequence_cross_entropy(result: ForwardResult) -> Tensor:
    """Next-token cross-entropy over loss-masked positions: the token at
    position p+1 is supervised from the logits at position p."""
    logits = result.logits
    B, n, v = logits.shape
    targets = np.zeros((B, n), dtype=np.int64)
    valid = np.zeros((B, n), dtype=bool)
    for b, seq in enumerate(result.sequences):
        L = seq.length
        if L < 2:
            continue
        tgt = seq.ids[1:L]
        ok = seq.loss_mask[1:L]
        targets[b, : L - 1][ok] = tgt[ok]
        valid[b, : L - 1] = ok
    return ad.cross_entropy(logits.reshape(B * n, v), targets.reshape(-1), valid.reshape(-1))


# ---------------------------------------------------------------------------
# freezing and the step loop
# ---------------------------------------------------------------------------


def trainable_names(model: MonoVLM, stage: str) -> set[str]:
    """Distill and align optimize exactly the holistic-embedding parameters;
    instruction tuning optimizes everything."""
    if stage in (STAGE_DISTILL, STAGE_ALIGN):
        return {name for name in model.params if name.startswith("embed.")}
    return set(model.params)


@contextlib.contextmanager
def trainable_only(model: MonoVLM, names: set[str]):
    """Structurally freeze everything outside ``names`` for the block."""
    prev = {name: p.requires_grad for name, p in model.params.items()}
    for name, p in model.params.items():
        p.requires_grad = name in names
        if not p.requires_grad:
            p.grad = None
    try:
        yield
    finally:
        for name, p in model.params.items():
            p.requires_grad = prev[name]


def _train_loop(plan: StagePlan, model: MonoVLM, loss_fn, report: TrainReport) -> TrainReport:
    names = trainable_names(model, plan.stage)
    with trainable_only(model, names):
        opt = AdamW(
            {n: model.params[n] for n in sorted(names)},
            lr=plan.peak_lr,
            betas=(plan.beta1, plan.beta2),
            eps=plan.eps,
            weight_decay=plan.weight_decay,
        )
        for step in range(plan.steps):
            t0 = time.perf_counter()
            loss = loss_fn(step)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} of stage {plan.stage}")
            opt.zero_grad()
            loss.backward()
            lr = plan.lr_at(step)
            opt.step(lr=lr)
            report.losses.append(value)
            report.lrs.append(lr)
            report.wall_ms.append((time.perf_counter() - t0) * 1000.0)
    return report


def run_distillation(plan: StagePlan, teachers: TeacherBundle, model: MonoVLM, source=None) -> TrainReport:
    """Stage 1: optimize the embedding module against the frozen teachers on
    unpaired data. The LLM and the teachers are untouched."""
    if plan.stage != STAGE_DISTILL:
        raise ValueError("plan is not a distillation plan")
    if source is None:
        source = RandomDistillSource(model.cfg, seed=plan.seed)
    report = TrainReport(stage=plan.stage, seed=plan.seed)
    return _train_loop(plan, model, lambda step: batch_distill_loss(model, teachers, source.batch(plan.batch_size)), report)


def _supervised_batch(dataset, batch_size: int, report: TrainReport) -> list[TokenSequence]:
    """Next batch with loss-bearing samples only; empty-mask samples are
    skipped and counted."""
    out: list[TokenSequence] = []
    attempts = 0
    while len(out) < batch_size and attempts < 10 * batch_size:
        for seq in dataset.batch(batch_size - len(out)):
            attempts += 1
            if seq.loss_mask.any():
                out.append(seq)
            else:
                report.skipped += 1
    if not out:
        raise TrainingError("dataset yielded no loss-bearing samples")
    return out


def run_alignment(plan: StagePlan, model: MonoVLM, dataset) -> TrainReport:
    """Stage 2: cross-entropy through the frozen LLM; only the embedding
    module moves."""
    if plan.stage != STAGE_ALIGN:
        raise ValueError("plan is not an alignment plan")
    report = TrainReport(stage=plan.stage, seed=plan.seed)

    def step_loss(step):
        seqs = _supervised_batch(dataset, plan.batch_size, report)
        return sequence_cross_entropy(model.forward(seqs))

    return _train_loop(plan, model, step_loss, report)


def run_instruction_tuning(plan: StagePlan, model: MonoVLM, dataset) -> TrainReport:
    """Stage 3: the whole model under the same auto-regressive objective."""
    if plan.stage != STAGE_INSTRUCT:
        raise ValueError("plan is not an instruction-tuning plan")
    report = TrainReport(stage=plan.stage, seed=plan.seed)

    def step_loss(step):
        seqs = _supervised_batch(dataset, plan.batch_size, report)
        return sequence_cross_entropy(model.forward(seqs))

    return _train_loop(plan, model, step_loss, report)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_cross_entropy(model: MonoVLM, seqs: list[TokenSequence], batch_size: int = 16) -> float:
    """Token-weighted held-out cross-entropy (no gradients)."""
    total = 0.0
    count = 0
    with ad.no_grad():
        for i in range(0, len(seqs), batch_size):
            chunk = [s for s in seqs[i : i + batch_size] if s.loss_mask.any()]
            if not chunk:
                continue
            res = model.forward(chunk)
            loss = sequence_cross_entropy(res)
            c = sum(int(s.loss_mask.sum()) for s in res.sequences)
            total += loss.item() * c
            count += c
    if count == 0:
        raise ad.DegenerateBatchError("no supervised tokens in evaluation set")
    return total / count
