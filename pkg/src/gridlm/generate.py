"""Autoregressive decoding with head routing.

A per-sample mode machine drives the two heads: TEXT mode samples from the
text head (base words plus <imgbos>); sampling <imgbos> enters IMAGE mode,
which samples exactly k*k content tokens from the visual head (never
<imgend> or <imgpad>) and then emits a forced <imgend>, returning to TEXT.
Replies are therefore grammatical by construction, whatever the weights say.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import torch

from .codec import ImageGrid, TextVocab, Turn, build_text_vocab, decode_image, render_prompt
from .errors import GenerationError
from .model import GridLM, pack_batch
from .vocab import Head, Mode, VocabLayout, step_mode

EOS_ID = 1  # word table position of <eos>, fixed by the reserved prefix


@dataclass(frozen=True)
class SamplerSpec:
    strategy: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("greedy", "temperature"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "temperature" and not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


@dataclass
class Reply:
    """Decoded reply: interleaved segments plus the raw traces behind them."""

    segments: List[Union[str, ImageGrid]]
    tokens: List[int]
    modes: List[Mode]
    truncated: bool = False


def sample_token(
    logits: torch.Tensor,
    head: Head,
    sampler: SamplerSpec,
    layout: VocabLayout,
    rng: Optional[torch.Generator] = None,
    blocked_local: Sequence[int] = (),
) -> int:
    """Pick one global token id from one head's logits.

    logits width must equal the head's support size.  blocked_local removes
    head-local indices from support (mode restrictions).  Greedy breaks ties
    toward the lowest id; temperature divides then samples via rng.
    """
    expected = layout.text_head_size if head is Head.TEXT_HEAD else layout.visual_head_size
    if logits.shape[-1] != expected:
        raise GenerationError(f"logit width {logits.shape[-1]} does not match head size {expected}")
    if not torch.isfinite(logits).all():
        raise GenerationError("non-finite logits")
    if blocked_local:
        logits = logits.clone()
        logits[list(blocked_local)] = float("-inf")
    if sampler.strategy == "greedy":
        local = int(torch.nonzero(logits == logits.max())[0])
    else:
        probs = torch.softmax(logits / sampler.temperature, dim=-1)
        local = int(torch.multinomial(probs, 1, generator=rng))
    return local if head is Head.TEXT_HEAD else layout.visual_head_offset + local


@dataclass
class _DecodeState:
    tokens: List[int]
    prompt_len: int
    mode: Mode = Mode.TEXT
    img_count: int = 0
    emitted: List[int] = field(default_factory=list)
    modes: List[Mode] = field(default_factory=list)
    done: bool = False
    truncated: bool = False

    @property
    def new_tokens(self) -> int:
        return len(self.emitted)


def generate_many(
    model: GridLM,
    prompts: Sequence[Turn],
    sampler: SamplerSpec = SamplerSpec(),
    max_new_tokens: int = 96,
    no_image: bool = False,
    vocab: Optional[TextVocab] = None,
    fit_capacity: bool = False,
) -> List[Reply]:
    """Batched decode; one full forward per step over the unfinished rows.

    With fit_capacity, each prompt's budget shrinks so that even an image
    block opened on the last budgeted step still closes within max_seq_len;
    without it, a block that cannot close raises GenerationError.
    """
    layout = model.config.layout
    vocab = vocab or build_text_vocab(layout)
    k = model.config.grid_k
    n_cells = k * k
    rng = torch.Generator().manual_seed(sampler.seed) if sampler.strategy == "temperature" else None

    states: List[_DecodeState] = []
    slot_records: List[List] = []
    budgets: List[int] = []
    for turn in prompts:
        rp = render_prompt(turn, layout, vocab)
        if len(rp.tokens) >= model.config.max_seq_len:
            raise GenerationError(
                f"prompt length {len(rp.tokens)} leaves no room under max_seq_len {model.config.max_seq_len}"
            )
        states.append(_DecodeState(tokens=list(rp.tokens), prompt_len=len(rp.tokens)))
        slot_records.append(list(zip(rp.slot_pos, rp.slot_val, rp.slot_row, rp.slot_col)))
        budget = max_new_tokens
        if fit_capacity:
            budget = min(budget, model.config.max_seq_len - len(rp.tokens) - (n_cells + 2))
        budgets.append(max(0, budget))
    for st, budget in zip(states, budgets):
        if budget == 0:
            st.done = True
            st.truncated = True

    imgbos_local = layout.id_imgbos  # text head is the identity range
    blocked_image = [layout.id_imgend - layout.visual_head_offset,
                     layout.id_imgpad - layout.visual_head_offset]

    model.eval()
    with torch.no_grad():
        while True:
            live = [i for i, st in enumerate(states) if not st.done]
            if not live:
                break
            tokens, lengths, _, _, slots = pack_batch(
                [states[i].tokens for i in live],
                vocab.pad,
                slot_records=[slot_records[i] for i in live],
            )
            out = model(tokens, slots)
            rows = torch.arange(len(live))
            last = lengths - 1
            text_logits = out.text_logits[rows, last]
            visual_logits = out.visual_logits[rows, last]

            for j, i in enumerate(live):
                st = states[i]
                if st.mode is Mode.TEXT:
                    blocked = [imgbos_local] if (no_image and st.new_tokens == 0) else []
                    tok = sample_token(text_logits[j], Head.TEXT_HEAD, sampler, layout, rng, blocked)
                else:
                    # IMAGE mode ignores the budget so an open block always
                    # closes: k*k content tokens, then a forced <imgend>.
                    if st.img_count < n_cells:
                        tok = sample_token(
                            visual_logits[j], Head.VISUAL_HEAD, sampler, layout, rng, blocked_image
                        )
                        st.img_count += 1
                    else:
                        tok = layout.id_imgend
                if len(st.tokens) + 1 > model.config.max_seq_len:
                    raise GenerationError("sequence capacity exhausted mid-reply")
                st.emitted.append(tok)
                st.modes.append(st.mode)
                st.tokens.append(tok)
                next_mode = step_mode(st.mode, tok, layout)
                if st.mode is Mode.TEXT and next_mode is Mode.IMAGE:
                    st.img_count = 0
                st.mode = next_mode
                if st.mode is Mode.TEXT:
                    if tok == vocab.eos:
                        st.done = True
                    elif st.new_tokens >= budgets[i]:
                        # Ended by budget rather than <eos>.
                        st.truncated = True
                        st.done = True

    return [_assemble(st, layout, vocab, k) for st in states]


def generate(
    model: GridLM,
    prompt: Turn,
    sampler: SamplerSpec = SamplerSpec(),
    max_new_tokens: int = 96,
    no_image: bool = False,
    vocab: Optional[TextVocab] = None,
    fit_capacity: bool = False,
) -> Reply:
    return generate_many(model, [prompt], sampler, max_new_tokens, no_image, vocab, fit_capacity)[0]


def _assemble(st: _DecodeState, layout: VocabLayout, vocab: TextVocab, k: int) -> Reply:
    segments: List[Union[str, ImageGrid]] = []
    words: List[str] = []
    i = 0
    toks = st.emitted
    while i < len(toks):
        t = toks[i]
        if t == layout.id_imgbos:
            if words:
                segments.append(" ".join(words))
                words = []
            run = toks[i + 1 : i + 1 + k * k]
            segments.append(decode_image(run, k, layout))
            i += k * k + 2  # skip content + <imgend>
        elif t == vocab.eos:
            i += 1
        else:
            words.append(vocab.word_of(t))
            i += 1
    if words:
        segments.append(" ".join(words))
    return Reply(segments=segments, tokens=list(toks), modes=list(st.modes), truncated=st.truncated)
