"""Staged training with parameter-group freezing.

The schedule has three payload stages on top of a text-only pretrain that
plays the role of the existing base model:

  pretrain  t2t + echo        alpha=1 beta=0  trains base_embed/backbone/text_head
  stage1    all four types    alpha=1 beta=0  teaches when to open an image
  stage2    t2i + t2ti        alpha=0 beta=1  teaches image content
  stage3    all four types    alpha=1 beta=1  joint polish
  joint     all four types    alpha=1 beta=1  nothing frozen (forgetting baseline)

Frozen groups are excluded from the optimizer outright, so their bytes are
unchanged by construction, which the digest checks then verify.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import torch

from .checkpoint import group_digests, save_checkpoint
from .codec import RenderedSample, Sample, TextVocab, build_text_vocab, render_sample
from .errors import TrainingError
from .losses import LossBreakdown, LossWeights, switched_batch_loss, unified_batch_loss
from .model import GROUP_NAMES, GridLM, ModelConfig, init_params, pack_batch, param_groups

LOSS_CSV_COLUMNS = ("step", "epoch", "stage", "l_text", "l_img", "l_total")

STAGE_WEIGHTS: Dict[str, Tuple[float, float]] = {
    "pretrain": (1.0, 0.0),
    "stage1": (1.0, 0.0),
    "stage2": (0.0, 1.0),
    "stage3": (1.0, 1.0),
    "joint": (1.0, 1.0),
}

STAGE_FROZEN: Dict[str, FrozenSet[str]] = {
    "pretrain": frozenset({"new_embed", "adapter", "visual_head", "patch_encoder", "pos_embed"}),
    "stage1": frozenset({"backbone", "base_embed"}),
    "stage2": frozenset({"backbone", "base_embed", "text_head", "patch_encoder"}),
    "stage3": frozenset({"backbone", "base_embed"}),
    "joint": frozenset(),
}

STAGE_LR: Dict[str, float] = {
    "pretrain": 3e-4,
    "stage1": 1e-4,
    "stage2": 3e-4,
    "stage3": 1e-4,
    "joint": 3e-4,
}

STAGE_EPOCHS: Dict[str, int] = {
    "pretrain": 88,
    "stage1": 2,
    "stage2": 2,
    "stage3": 2,
    "joint": 2,
}

# Pretrain is the only stage that needs the regularizer: held-out modular
# arithmetic generalizes long after the training set is memorized, and only
# strong decay makes the held-out accuracy settle instead of oscillating.
# It also bounds the text head's logit margins, which is what stage 1 has to
# relabel when it teaches the image-opening token.  Later stages keep 0.0 so
# the schedule never shrinks weights that carry already-learned behavior.
# Decay only ever touches matrix weights; embeddings, position tables,
# norms, and biases are exempt (see decay_split).
STAGE_WD: Dict[str, float] = {
    "pretrain": 1.0,
    "stage1": 0.0,
    "stage2": 0.0,
    "stage3": 0.0,
    "joint": 0.0,
}

STAGE_MIX: Dict[str, Dict[str, int]] = {
    "pretrain": {"t2t": 4000, "echo": 2000},
    "stage1": {"t2t": 5000, "ti2t": 5000, "t2i": 5000, "t2ti": 5000},
    "stage2": {"t2i": 20000, "t2ti": 20000},
    "stage3": {"t2t": 2000, "ti2t": 2000, "t2i": 2000, "t2ti": 2000},
    "joint": {"t2t": 7000, "ti2t": 7000, "t2i": 27000, "t2ti": 27000},
}

DEFAULT_BATCH = 64


@dataclass(frozen=True)
class FreezeManifest:
    """Set of parameter groups receiving no update of any kind."""

    frozen: FrozenSet[str] = frozenset()

    def __post_init__(self):
        unknown = set(self.frozen) - set(GROUP_NAMES)
        if unknown:
            raise ValueError(f"unknown parameter groups in manifest: {sorted(unknown)}")

    def __contains__(self, name: str) -> bool:
        return name in self.frozen

    def __iter__(self):
        return iter(sorted(self.frozen))


@dataclass(frozen=True)
class StagePlan:
    stage: str
    mix: Dict[str, int]
    weights: LossWeights
    manifest: FreezeManifest
    epochs: int
    lr: float
    batch_size: int
    seed: int
    weight_decay: float = 0.0

    def meta(self) -> Dict:
        return {
            "stage": self.stage,
            "mix": dict(self.mix),
            "alpha": self.weights.alpha,
            "beta": self.weights.beta,
            "frozen": sorted(self.manifest.frozen),
            "epochs": self.epochs,
            "lr": self.lr,
            "batch": self.batch_size,
            "seed": self.seed,
            "weight_decay": self.weight_decay,
        }


def default_plan(stage: str, seed: int, **overrides) -> StagePlan:
    """Stage plan with the schedule's baked-in weights/freezes/rates."""
    if stage not in STAGE_WEIGHTS:
        raise ValueError(f"unknown stage {stage!r}")
    alpha, beta = STAGE_WEIGHTS[stage]
    fields = {
        "stage": stage,
        "mix": dict(STAGE_MIX[stage]),
        "weights": LossWeights(alpha, beta),
        "manifest": FreezeManifest(STAGE_FROZEN[stage]),
        "epochs": STAGE_EPOCHS[stage],
        "lr": STAGE_LR[stage],
        "batch_size": DEFAULT_BATCH,
        "seed": seed,
        "weight_decay": STAGE_WD[stage],
    }
    for key, value in overrides.items():
        if key not in fields:
            raise ValueError(f"unknown plan field {key!r}")
        if key == "manifest" and not isinstance(value, FreezeManifest):
            value = FreezeManifest(frozenset(value))
        if key == "weights" and not isinstance(value, LossWeights):
            value = LossWeights(*value)
        fields[key] = value
    return StagePlan(**fields)


@dataclass
class StepRecord:
    step: int
    epoch: int
    stage: str
    l_text: float
    l_img: float
    l_total: float


@dataclass
class TrainReport:
    stage: str
    records: List[StepRecord]
    checkpoint_path: Optional[str]
    digests_before: Dict[str, str]
    digests_after: Dict[str, str]
    frozen: List[str]
    wall_time: float = 0.0  # informational only; never persisted

    def frozen_intact(self) -> bool:
        return all(self.digests_before[g] == self.digests_after[g] for g in self.frozen)


def write_loss_csv(path, records: Sequence[StepRecord], variant: Optional[str] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = list(LOSS_CSV_COLUMNS) + (["variant"] if variant is not None else [])
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for r in records:
            row = [str(r.step), str(r.epoch), r.stage, f"{r.l_text:.6f}", f"{r.l_img:.6f}", f"{r.l_total:.6f}"]
            if variant is not None:
                row.append(variant)
            f.write(",".join(row) + "\n")


def read_loss_csv(path) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    cols = lines[0].split(",")
    return [dict(zip(cols, line.split(","))) for line in lines[1:] if line]


def apply_freeze(model: GridLM, manifest: FreezeManifest) -> List[torch.nn.Parameter]:
    """Set requires_grad per manifest; return the trainable parameter list."""
    trainable = []
    for group, params in param_groups(model).items():
        frozen = group in manifest
        for _, p in params:
            p.requires_grad_(not frozen)
            if not frozen:
                trainable.append(p)
    return trainable


EMBED_GROUPS = ("base_embed", "new_embed", "pos_embed", "patch_encoder")


def decay_split(model: GridLM) -> Tuple[List[str], List[str]]:
    """Partition trainable parameter names into (decayed, exempt).

    Only matrix weights inside blocks and heads ever receive weight decay.
    Lookup tables (token embeddings, the palette table, position tables),
    layer norms, and biases stay exempt: shrinking a lookup row is an update
    with no gradient story, and decayed norms destabilize a model this small.
    """
    decayed, exempt = [], []
    for group, params in param_groups(model).items():
        for name, p in params:
            if not p.requires_grad:
                continue
            if group in EMBED_GROUPS or name == "seq_pos" or p.dim() < 2:
                exempt.append(name)
            else:
                decayed.append(name)
    return decayed, exempt


def _optimizer(model: GridLM, plan: StagePlan) -> torch.optim.AdamW:
    by_name = dict(model.named_parameters())
    decayed, exempt = decay_split(model)
    groups = []
    if decayed:
        groups.append({"params": [by_name[n] for n in decayed], "weight_decay": plan.weight_decay})
    if exempt:
        groups.append({"params": [by_name[n] for n in exempt], "weight_decay": 0.0})
    return torch.optim.AdamW(groups, lr=plan.lr, betas=(0.9, 0.95), eps=1e-8)


def _render_all(samples: Sequence[Sample], model: GridLM, vocab: TextVocab) -> List[RenderedSample]:
    layout = model.config.layout
    return [render_sample(s, layout, vocab) for s in samples]


def _batch_tensors(rendered: Sequence[RenderedSample], pad_id: int):
    tokens, _, tm, im, slots = pack_batch(
        [r.tokens for r in rendered],
        pad_id,
        masks=[(r.text_mask, r.img_mask) for r in rendered],
        slot_records=[list(zip(r.slot_pos, r.slot_val, r.slot_row, r.slot_col)) for r in rendered],
    )
    return tokens, tm, im, slots


def run_stage(
    plan: StagePlan,
    model: GridLM,
    samples: Sequence[Sample],
    out_path=None,
    variant: str = "switched",
    vocab: Optional[TextVocab] = None,
    csv_path=None,
) -> TrainReport:
    """Train the unfrozen groups of `model` in place over the sample list.

    One optimizer step per batch; each record logs the loss of the batch
    before its update, so step 0 reflects the starting parameters.  The
    sample order reshuffles per epoch from the plan seed alone.  csv_path,
    when given, streams the loss curve line by line, flushed per step.
    """
    if variant not in ("switched", "unified"):
        raise ValueError(f"unknown variant {variant!r}")
    layout = model.config.layout
    vocab = vocab or build_text_vocab(layout)
    rendered = _render_all(samples, model, vocab)

    digests_before = group_digests(model)
    trainable = apply_freeze(model, plan.manifest)
    records: List[StepRecord] = []
    started = time.monotonic()

    csv_file = None
    if csv_path is not None:
        Path(csv_path).parent.mkdir(parents=True, exist_ok=True)
        csv_file = open(csv_path, "w", encoding="utf-8")
        csv_file.write(",".join(LOSS_CSV_COLUMNS) + "\n")
        csv_file.flush()
    try:
        if plan.epochs > 0 and rendered:
            if not trainable:
                raise TrainingError("no trainable parameters under this manifest")
            opt = _optimizer(model, plan)
            step = 0
            for epoch in range(plan.epochs):
                order = list(range(len(rendered)))
                random.Random(f"{plan.stage}:{plan.seed}:epoch{epoch}").shuffle(order)
                for lo in range(0, len(order), plan.batch_size):
                    batch = [rendered[i] for i in order[lo : lo + plan.batch_size]]
                    tokens, tm, im, slots = _batch_tensors(batch, vocab.pad)
                    out = model(tokens, slots)
                    if variant == "switched":
                        total, bd = switched_batch_loss(out, tokens, tm, im, layout, plan.weights)
                    else:
                        total, bd = unified_batch_loss(out.unified_logits, tokens, tm, im, layout, plan.weights)
                    if not math.isfinite(bd.l_total):
                        raise TrainingError(f"{plan.stage}: non-finite loss at step {step}")
                    opt.zero_grad(set_to_none=True)
                    total.backward()
                    opt.step()
                    rec = StepRecord(step, epoch, plan.stage, bd.l_text, bd.l_img, bd.l_total)
                    records.append(rec)
                    if csv_file is not None:
                        csv_file.write(
                            f"{rec.step},{rec.epoch},{rec.stage},"
                            f"{rec.l_text:.6f},{rec.l_img:.6f},{rec.l_total:.6f}\n"
                        )
                        csv_file.flush()
                    step += 1
    finally:
        if csv_file is not None:
            csv_file.close()

    model.requires_grad_(True)
    digests_after = group_digests(model)
    report = TrainReport(
        stage=plan.stage,
        records=records,
        checkpoint_path=str(out_path) if out_path else None,
        digests_before=digests_before,
        digests_after=digests_after,
        frozen=sorted(plan.manifest.frozen),
        wall_time=time.monotonic() - started,
    )
    if not report.frozen_intact():
        raise TrainingError(f"{plan.stage}: frozen group changed during training")
    if out_path is not None:
        save_checkpoint(model, {"plan": plan.meta()}, out_path, frozen=plan.manifest.frozen)
    return report


def pretrain_base(
    config: ModelConfig,
    samples: Sequence[Sample],
    epochs: int,
    seed: int,
    out_path=None,
    lr: float = STAGE_LR["pretrain"],
    batch_size: int = DEFAULT_BATCH,
    weight_decay: float = STAGE_WD["pretrain"],
) -> Tuple[GridLM, TrainReport]:
    """Create and train the text-only base model (the preserved capability)."""
    model = init_params(config, seed)
    plan = default_plan(
        "pretrain", seed, epochs=epochs, lr=lr, batch_size=batch_size,
        weight_decay=weight_decay,
    )
    report = run_stage(plan, model, samples, out_path=out_path)
    return model, report


def train_joint_baseline(
    model: GridLM,
    samples: Sequence[Sample],
    epochs: int,
    seed: int,
    out_path=None,
    lr: float = STAGE_LR["joint"],
    batch_size: int = DEFAULT_BATCH,
) -> TrainReport:
    """Single-stage full fine-tune: all groups trainable, both losses on."""
    plan = default_plan("joint", seed, epochs=epochs, lr=lr, batch_size=batch_size)
    return run_stage(plan, model, samples, out_path=out_path)
