"""Exact-match metrics and experiment harnesses.

Benchmarks are replaced by checkable synthetic tasks: arithmetic retention
is exact string match, image quality is cellwise grid accuracy against the
pattern rule, and modality choice checks whether the first reply token opens
an image exactly when the record type calls for one.  All metrics are
deterministic under greedy decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from .codec import (
    ImageGrid,
    Sample,
    TextSegment,
    TextVocab,
    Turn,
    build_text_vocab,
    render_prompt,
)
from .data import PatternSpec, grid_of
from .errors import TrainingError
from .generate import Reply, SamplerSpec, generate_many
from .model import GridLM, ModelConfig, init_params, pack_batch
from .training import StagePlan, StepRecord, TrainReport, FreezeManifest, run_stage
from .losses import LossWeights

EVAL_BATCH = 128


@dataclass
class RetentionReport:
    baseline_acc: float
    post_acc: float
    ratio: float
    n: int


@dataclass
class GenReport:
    cell_acc: List[float]
    mean_cell_acc: float
    exact_rate: float
    n_missing_image: int


@dataclass
class AblationSeedResult:
    seed: int
    switched: List[StepRecord]
    unified: List[StepRecord]
    switched_steps_to_threshold: Optional[int]
    unified_steps_to_threshold: Optional[int]
    switched_final_img: float
    unified_final_img: float
    switched_step0_img: float
    unified_step0_img: float


@dataclass
class AblationReport:
    threshold: float
    results: List[AblationSeedResult]

    def switched_wins(self) -> int:
        """Seeds where the routed-head variant crossed the threshold first."""
        wins = 0
        for r in self.results:
            s, u = r.switched_steps_to_threshold, r.unified_steps_to_threshold
            if s is not None and (u is None or s < u):
                wins += 1
        return wins


def _reply_texts(reply: Reply) -> List[str]:
    return [s for s in reply.segments if isinstance(s, str)]


def _reply_grids(reply: Reply) -> List[ImageGrid]:
    return [s for s in reply.segments if isinstance(s, ImageGrid)]


def _batched_replies(
    model: GridLM,
    prompts: Sequence[Turn],
    sampler: SamplerSpec,
    max_new_tokens: int,
    vocab: TextVocab,
) -> List[Reply]:
    replies: List[Reply] = []
    for lo in range(0, len(prompts), EVAL_BATCH):
        replies.extend(
            generate_many(
                model,
                prompts[lo : lo + EVAL_BATCH],
                sampler,
                max_new_tokens,
                vocab=vocab,
                fit_capacity=True,
            )
        )
    return replies


def exact_match_accuracy(
    model: GridLM,
    samples: Sequence[Sample],
    sampler: SamplerSpec = SamplerSpec(),
    max_new_tokens: int = 8,
    vocab: Optional[TextVocab] = None,
) -> float:
    """Fraction of samples whose greedy reply is exactly the reference text."""
    vocab = vocab or build_text_vocab(model.config.layout)
    prompts = [s.prompt for s in samples]
    replies = _batched_replies(model, prompts, sampler, max_new_tokens, vocab)
    hits = 0
    for s, reply in zip(samples, replies):
        expected = [seg.text for seg in s.reply.segments if isinstance(seg, TextSegment)]
        if _reply_texts(reply) == expected and not _reply_grids(reply):
            hits += 1
    return hits / len(samples) if samples else 0.0


def eval_retention(
    model: GridLM,
    heldout_t2t: Sequence[Sample],
    baseline_acc: Optional[float],
    sampler: SamplerSpec = SamplerSpec(),
    vocab: Optional[TextVocab] = None,
) -> RetentionReport:
    """Held-out arithmetic accuracy relative to the base model's accuracy.

    baseline_acc is cached at pretrain time (checkpoint meta); evaluating
    without it is a pipeline-order bug.
    """
    if baseline_acc is None:
        raise TrainingError("no cached baseline accuracy; evaluate the pretrained base first")
    post = exact_match_accuracy(model, heldout_t2t, sampler, vocab=vocab)
    ratio = post / baseline_acc if baseline_acc > 0 else float("inf")
    return RetentionReport(
        baseline_acc=baseline_acc, post_acc=post, ratio=ratio, n=len(heldout_t2t)
    )


def eval_generation(
    model: GridLM,
    specs: Sequence[PatternSpec],
    k: Optional[int] = None,
    sampler: SamplerSpec = SamplerSpec(),
    vocab: Optional[TextVocab] = None,
) -> GenReport:
    """Prompt "draw <spec>" and score the reply grid cell-by-cell.

    The budget leaves room for a short text preamble before the block; a
    reply whose grid never opens within it counts as a miss (accuracy 0).
    """
    k = k or model.config.grid_k
    vocab = vocab or build_text_vocab(model.config.layout)
    prompts = [Turn("human", (TextSegment("draw " + spec.phrase()),)) for spec in specs]
    budget = k * k + 2 + 12
    replies = _batched_replies(model, prompts, sampler, budget, vocab)
    accs: List[float] = []
    missing = 0
    exact = 0
    for spec, reply in zip(specs, replies):
        grids = _reply_grids(reply)
        if not grids:
            missing += 1
            accs.append(0.0)
            continue
        truth = grid_of(spec, k)
        got = grids[0]
        match = sum(
            1 for r in range(k) for c in range(k) if got.cells[r][c] == truth.cells[r][c]
        )
        acc = match / (k * k)
        accs.append(acc)
        if acc == 1.0:
            exact += 1
    n = len(specs)
    return GenReport(
        cell_acc=accs,
        mean_cell_acc=sum(accs) / n if n else 0.0,
        exact_rate=exact / n if n else 0.0,
        n_missing_image=missing,
    )


EXPECTED_CLASS = {"t2t": "text", "ti2t": "text", "t2i": "image", "t2ti": "text+image"}


def reply_class(reply: Reply) -> str:
    has_text = bool(_reply_texts(reply))
    has_image = bool(_reply_grids(reply))
    if has_text and has_image:
        return "text+image"
    if has_image:
        return "image"
    if has_text:
        return "text"
    return "empty"


def eval_modality_choice(
    model: GridLM,
    samples: Sequence[Sample],
    vocab: Optional[TextVocab] = None,
) -> float:
    """Accuracy of the first greedy reply token's class against the record
    type.

    Decoding always starts in TEXT mode, so the choice sits in one argmax of
    the text head at the prompt boundary: <imgbos> opens an image block (the
    right move exactly for t2i records), anything else starts a text reply.
    """
    if not samples:
        return 0.0
    layout = model.config.layout
    vocab = vocab or build_text_vocab(layout)
    hits = 0
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(samples), EVAL_BATCH):
            chunk = samples[lo : lo + EVAL_BATCH]
            rendered = [render_prompt(s.prompt, layout, vocab) for s in chunk]
            tokens, lengths, _, _, slots = pack_batch(
                [r.tokens for r in rendered],
                vocab.pad,
                slot_records=[
                    list(zip(r.slot_pos, r.slot_val, r.slot_row, r.slot_col))
                    for r in rendered
                ],
            )
            out = model(tokens, slots)
            rows = torch.arange(len(chunk))
            first = out.text_logits[rows, lengths - 1].argmax(dim=-1)
            for s, tok in zip(chunk, first.tolist()):
                hits += (tok == layout.id_imgbos) == (s.record_type == "t2i")
    return hits / len(samples)


def steps_to_threshold(records: Sequence[StepRecord], threshold: float) -> Optional[int]:
    for r in records:
        if r.l_img <= threshold:
            return r.step
    return None


def run_ablation(
    config: ModelConfig,
    samples: Sequence[Sample],
    epochs: int,
    seeds: Sequence[int],
    threshold: float = 1.2,
    lr: float = 3e-4,
    batch_size: int = 64,
) -> AblationReport:
    """Train routed-head and whole-codebook variants from identical fresh
    inits on identical data order, per seed, and compare image-loss descent.

    Both variants share the parameter shapes (the unified head is the
    concatenation of the two routed heads), so one seed produces one starting
    state for both.  Heads start at zero, making the step-0 image loss the
    uniform chance level of each variant's classification width.
    """
    results: List[AblationSeedResult] = []
    for seed in seeds:
        per_variant: Dict[str, List[StepRecord]] = {}
        for variant in ("switched", "unified"):
            model = init_params(config, seed)
            plan = StagePlan(
                stage="ablation",
                mix={},
                weights=LossWeights(1.0, 1.0),
                manifest=FreezeManifest(frozenset()),
                epochs=epochs,
                lr=lr,
                batch_size=batch_size,
                seed=seed,
            )
            report = run_stage(plan, model, samples, variant=variant)
            per_variant[variant] = report.records
        sw, un = per_variant["switched"], per_variant["unified"]
        results.append(
            AblationSeedResult(
                seed=seed,
                switched=sw,
                unified=un,
                switched_steps_to_threshold=steps_to_threshold(sw, threshold),
                unified_steps_to_threshold=steps_to_threshold(un, threshold),
                switched_final_img=sw[-1].l_img if sw else float("nan"),
                unified_final_img=un[-1].l_img if un else float("nan"),
                switched_step0_img=sw[0].l_img if sw else float("nan"),
                unified_step0_img=un[0].l_img if un else float("nan"),
            )
        )
    return AblationReport(threshold=threshold, results=results)


def write_ablation_csv(path, result: AblationSeedResult) -> None:
    """One seed's curves in the training CSV schema plus a variant column."""
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,epoch,stage,l_text,l_img,l_total,variant\n")
        for variant, records in (("switched", result.switched), ("unified", result.unified)):
            for r in records:
                f.write(
                    f"{r.step},{r.epoch},{r.stage},{r.l_text:.6f},{r.l_img:.6f},{r.l_total:.6f},{variant}\n"
                )


def ablation_summary(report: AblationReport) -> str:
    lines = [f"threshold: {report.threshold} nats"]
    for r in report.results:
        lines.append(
            f"seed {r.seed}: switched step0={r.switched_step0_img:.6f} "
            f"steps_to_threshold={r.switched_steps_to_threshold} final={r.switched_final_img:.4f} | "
            f"unified step0={r.unified_step0_img:.6f} "
            f"steps_to_threshold={r.unified_steps_to_threshold} final={r.unified_final_img:.4f}"
        )
    lines.append(f"switched first to threshold in {report.switched_wins()}/{len(report.results)} seeds")
    return "\n".join(lines)
