"""Text tokenizer, discrete image codec, and sample-to-sequence rendering.

The image codec is an identity codebook: palette index v maps to token
``image_offset + v``, so generation quality is exactly measurable as cell
accuracy.  Input images on the understanding path are NOT tokenized here;
they are rendered as <imgpad> placeholder slots whose embeddings the model
replaces with patch-encoder outputs (see model.py).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

from .errors import CodecError
from .vocab import Head, VocabLayout, head_of

# Reserved word-table entries; everything after these is task vocabulary.
BOS = "<bos>"
EOS = "<eos>"
PAD = "<pad>"
ROLE_HUMAN = "<human>"
ROLE_ASSISTANT = "<assistant>"

PALETTE_NAMES = ("black", "red", "green", "yellow", "blue", "magenta", "cyan", "white")
PATTERN_KINDS = ("solid", "checker", "hstripes", "vstripes", "border")
OPS = ("add", "sub")
MODULUS = 16

TASK_WORDS = (
    list(OPS)
    + [str(n) for n in range(MODULUS)]
    + ["draw", "describe", "and"]
    + list(PATTERN_KINDS)
    + list(PALETTE_NAMES)
)


@dataclass(frozen=True)
class ImageGrid:
    """K*K grid of palette indices in [0, n_image)."""

    k: int
    cells: Tuple[Tuple[int, ...], ...]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]]) -> "ImageGrid":
        k = len(rows)
        if any(len(r) != k for r in rows):
            raise CodecError(f"grid must be square, got row lengths {[len(r) for r in rows]}")
        return cls(k=k, cells=tuple(tuple(int(v) for v in r) for r in rows))

    def rows(self) -> List[List[int]]:
        return [list(r) for r in self.cells]


@dataclass(frozen=True)
class TextSegment:
    text: str


@dataclass(frozen=True)
class ImageSegment:
    grid: ImageGrid


Segment = Union[TextSegment, ImageSegment]


@dataclass(frozen=True)
class Turn:
    role: str  # "human" | "assistant"
    segments: Tuple[Segment, ...]


@dataclass(frozen=True)
class Sample:
    """One human/assistant exchange; the assistant turn is the supervised span."""

    record_type: str  # t2t | ti2t | t2i | t2ti
    turns: Tuple[Turn, Turn]
    sample_id: str = ""

    def __post_init__(self):
        if len(self.turns) != 2 or self.turns[0].role != "human" or self.turns[1].role != "assistant":
            raise CodecError("sample must be exactly one human turn followed by one assistant turn")

    @property
    def prompt(self) -> Turn:
        return self.turns[0]

    @property
    def reply(self) -> Turn:
        return self.turns[1]


class TextVocab:
    """Injective word -> token-id table over the base text range."""

    def __init__(self, layout: VocabLayout, words: Sequence[str] = ()):
        reserved = [BOS, EOS, PAD, ROLE_HUMAN, ROLE_ASSISTANT]
        all_words = reserved + [w for w in words if w not in reserved]
        if len(all_words) > layout.n_text_base:
            raise CodecError(f"{len(all_words)} words exceed the base text range {layout.n_text_base}")
        self.layout = layout
        self._id_of = {w: i for i, w in enumerate(all_words)}
        self._word_of = dict(enumerate(all_words))
        self.bos = self._id_of[BOS]
        self.eos = self._id_of[EOS]
        self.pad = self._id_of[PAD]
        self.role_human = self._id_of[ROLE_HUMAN]
        self.role_assistant = self._id_of[ROLE_ASSISTANT]

    def __len__(self) -> int:
        return len(self._id_of)

    def __contains__(self, word: str) -> bool:
        return word in self._id_of

    def id_of(self, word: str) -> int:
        try:
            return self._id_of[word]
        except KeyError:
            raise CodecError(f"unknown word {word!r}") from None

    def word_of(self, token: int) -> str:
        if not self.layout.is_text_base(token):
            raise CodecError(f"token {token} is not a base text id")
        # Unassigned base ids can be sampled by untrained models; keep decode total.
        return self._word_of.get(token, f"<{token}>")


def build_text_vocab(layout: VocabLayout) -> TextVocab:
    return TextVocab(layout, TASK_WORDS)


def encode_text(words: Sequence[str], vocab: TextVocab) -> List[int]:
    return [vocab.id_of(w) for w in words]


def decode_text(tokens: Sequence[int], vocab: TextVocab) -> List[str]:
    return [vocab.word_of(t) for t in tokens]


def encode_image(grid: ImageGrid, layout: VocabLayout) -> List[int]:
    """Raster-order identity encoding: cell (r, c) -> image_offset + cells[r][c]."""
    out = []
    for r, row in enumerate(grid.cells):
        for c, v in enumerate(row):
            if not (0 <= v < layout.n_image):
                raise CodecError(f"cell ({r},{c}) value {v} outside palette of {layout.n_image}")
            out.append(layout.image_offset + v)
    return out

def decode_image(tokens: Sequence[int], k: int, layout: VocabLayout) -> ImageGrid:
    """Inverse of encode_image; <imgpad> decodes to palette index 0."""
    if len(tokens) != k * k:
        raise CodecError(f"image run has {len(tokens)} tokens, expected {k * k}")
    vals = []
    for i, t in enumerate(tokens):
        if t == layout.id_imgpad:
            vals.append(0)
        elif layout.is_image_content(t):
            vals.append(t - layout.image_offset)
        else:
            raise CodecError(f"token {t} at run position {i} is not image content or <imgpad>")
    rows = [vals[r * k:(r + 1) * k] for r in range(k)]
    return ImageGrid.from_rows(rows)


@dataclass
class RenderedSample:
    """Token sequence plus supervision masks and prompt-image slot metadata.

    Masks index tokens as *targets*: mask[t] concerns predicting tokens[t]
    from tokens[:t].  Prompt positions carry zero in both masks.  Slot lists
    describe prompt-image cells whose embedding comes from the patch encoder
    (parallel arrays: position in tokens, palette value, cell row, cell col).
    """

    tokens: List[int]
    text_mask: List[int]
    img_mask: List[int]
    reply_start: int
    slot_pos: List[int] = field(default_factory=list)
    slot_val: List[int] = field(default_factory=list)
    slot_row: List[int] = field(default_factory=list)
    slot_col: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)


def render_prompt(prompt: Turn, layout: VocabLayout, vocab: TextVocab) -> RenderedSample:
    """Render the human turn up to and including the assistant-role marker.

    Prompt images appear as <imgbos> <imgpad>*k^2 <imgend> with a patch slot
    recorded per cell; the model swaps those slots' embeddings for patch
    encodings.  Masks are all zero (nothing in a prompt is supervised).
    """
    tokens: List[int] = [vocab.bos, vocab.role_human]
    slot_pos: List[int] = []
    slot_val: List[int] = []
    slot_row: List[int] = []
    slot_col: List[int] = []

    for seg in prompt.segments:
        if isinstance(seg, TextSegment):
            tokens.extend(encode_text(seg.text.split(), vocab))
        elif isinstance(seg, ImageSegment):
            tokens.append(layout.id_imgbos)
            for r, row in enumerate(seg.grid.cells):
                for c, v in enumerate(row):
                    if not (0 <= v < layout.n_image):
                        raise CodecError(f"prompt image cell ({r},{c}) value {v} out of palette")
                    slot_pos.append(len(tokens))
                    slot_val.append(v)
                    slot_row.append(r)
                    slot_col.append(c)
                    tokens.append(layout.id_imgpad)
            tokens.append(layout.id_imgend)
        else:
            raise CodecError(f"unknown segment type {type(seg).__name__}")

    tokens.append(vocab.role_assistant)
    return RenderedSample(
        tokens=tokens,
        text_mask=[0] * len(tokens),
        img_mask=[0] * len(tokens),
        reply_start=len(tokens),
        slot_pos=slot_pos,
        slot_val=slot_val,
        slot_row=slot_row,
        slot_col=slot_col,
    )


def render_sample(sample: Sample, layout: VocabLayout, vocab: TextVocab) -> RenderedSample:
    """Render one sample to tokens + modality masks.

    Layout: <bos> <human> prompt-segments <assistant> reply-segments <eos>.
    Reply image segments become <imgbos> content <imgend>; prompt images
    become <imgbos> <imgpad>*k^2 <imgend> with patch slots recorded.  The
    reply span (everything after <assistant>, including <eos>) is supervised:
    text_mask marks text-head targets, img_mask marks visual-head targets
    except <imgpad>.
    """
    head = render_prompt(sample.prompt, layout, vocab)
    tokens = head.tokens
    slot_pos, slot_val = head.slot_pos, head.slot_val
    slot_row, slot_col = head.slot_row, head.slot_col
    reply_start = head.reply_start

    for seg in sample.reply.segments:
        if isinstance(seg, TextSegment):
            tokens.extend(encode_text(seg.text.split(), vocab))
        elif isinstance(seg, ImageSegment):
            tokens.append(layout.id_imgbos)
            tokens.extend(encode_image(seg.grid, layout))
            tokens.append(layout.id_imgend)
        else:
            raise CodecError(f"unknown segment type {type(seg).__name__}")
    tokens.append(vocab.eos)

    text_mask = [0] * len(tokens)
    img_mask = [0] * len(tokens)
    for t in range(reply_start, len(tokens)):
        tok = tokens[t]
        if tok == layout.id_imgpad:
            continue
        if head_of(layout, tok) is Head.TEXT_HEAD:
            text_mask[t] = 1
        else:
            img_mask[t] = 1

    return RenderedSample(
        tokens=tokens,
        text_mask=text_mask,
        img_mask=img_mask,
        reply_start=reply_start,
        slot_pos=slot_pos,
        slot_val=slot_val,
        slot_row=slot_row,
        slot_col=slot_col,
    )
