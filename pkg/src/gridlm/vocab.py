"""Partitioned token space, per-token head assignment, and the TEXT/IMAGE mode machine.

The vocabulary is laid out as three contiguous id ranges::

    [0, n_text_base)                      base text tokens
    n_text_base .. n_text_base + 2        <imgbos>, <imgend>, <imgpad>
    [image_offset, image_offset+n_image)  image content tokens

With <imgbos> placed directly after the base text range, both output-head
supports are contiguous: the text head covers [0, n_text_base] and the
visual head covers [n_text_base+1, total_size).  Head-local logit indices
are therefore plain offsets, and argmax tie-breaking by lowest local index
coincides with tie-breaking by lowest token id.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import SequenceError, VocabError


class Mode(enum.Enum):
    TEXT = "text"
    IMAGE = "image"


class Head(enum.Enum):
    TEXT_HEAD = "text"
    VISUAL_HEAD = "visual"


@dataclass(frozen=True)
class VocabLayout:
    """Sizes and special-token ids of the unified vocabulary."""

    n_text_base: int = 256
    n_image: int = 64
    id_imgbos: int = field(default=-1)
    id_imgend: int = field(default=-1)
    id_imgpad: int = field(default=-1)
    image_offset: int = field(default=-1)

    def __post_init__(self):
        if self.id_imgbos < 0:
            object.__setattr__(self, "id_imgbos", self.n_text_base)
        if self.id_imgend < 0:
            object.__setattr__(self, "id_imgend", self.n_text_base + 1)
        if self.id_imgpad < 0:
            object.__setattr__(self, "id_imgpad", self.n_text_base + 2)
        if self.image_offset < 0:
            object.__setattr__(self, "image_offset", self.n_text_base + 3)
        if self.n_text_base < 8 or self.n_image < 1:
            raise VocabError("layout too small: need n_text_base >= 8 and n_image >= 1")
        # Contiguity is load-bearing: head-local indices are plain offsets.
        expected = (self.n_text_base, self.n_text_base + 1, self.n_text_base + 2)
        if (self.id_imgbos, self.id_imgend, self.id_imgpad) != expected:
            raise VocabError(f"special ids must be {expected} in order imgbos, imgend, imgpad")
        if self.image_offset != self.n_text_base + 3:
            raise VocabError("image_offset must follow the three special ids")

    @property
    def total_size(self) -> int:
        return self.n_text_base + 3 + self.n_image

    @property
    def text_head_size(self) -> int:
        """Base text tokens plus <imgbos>."""
        return self.n_text_base + 1

    @property
    def visual_head_size(self) -> int:
        """Image content tokens plus <imgend> and <imgpad>."""
        return self.n_image + 2

    @property
    def visual_head_offset(self) -> int:
        """First token id in the visual head's support."""
        return self.n_text_base + 1

    def is_text_base(self, token: int) -> bool:
        return 0 <= token < self.n_text_base

    def is_image_content(self, token: int) -> bool:
        return self.image_offset <= token < self.image_offset + self.n_image

    def text_local(self, token: int) -> int:
        """Head-local logit index of a text-head token."""
        if not (0 <= token <= self.id_imgbos):
            raise VocabError(f"token {token} is not in the text head support")
        return token

    def visual_local(self, token: int) -> int:
        """Head-local logit index of a visual-head token."""
        if not (self.visual_head_offset <= token < self.total_size):
            raise VocabError(f"token {token} is not in the visual head support")
        return token - self.visual_head_offset

    def to_dict(self) -> dict:
        return {
            "n_text_base": self.n_text_base,
            "n_image": self.n_image,
            "id_imgbos": self.id_imgbos,
            "id_imgend": self.id_imgend,
            "id_imgpad": self.id_imgpad,
            "image_offset": self.image_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VocabLayout":
        return cls(**d)

    def layout_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def head_of(layout: VocabLayout, token: int) -> Head:
    """Head whose support contains ``token``; raises on out-of-range ids."""
    if not (0 <= token < layout.total_size):
        raise VocabError(f"token id {token} outside vocabulary of size {layout.total_size}")
    if token <= layout.id_imgbos:
        return Head.TEXT_HEAD
    return Head.VISUAL_HEAD


def head_for_mode(mode: Mode) -> Head:
    return Head.TEXT_HEAD if mode is Mode.TEXT else Head.VISUAL_HEAD


def step_mode(mode: Mode, token: int, layout: VocabLayout) -> Mode:
    """Advance the decoding mode after emitting ``token``.

    TEXT admits only text-head tokens (<imgbos> switches to IMAGE); IMAGE
    admits only visual-head tokens (<imgend> reverts to TEXT).  Any other
    pairing is a malformed sequence.
    """
    head = head_of(layout, token)
    if mode is Mode.TEXT:
        if head is not Head.TEXT_HEAD:
            raise VocabError(f"token {token} is illegal in TEXT mode")
        return Mode.IMAGE if token == layout.id_imgbos else Mode.TEXT
    if head is not Head.VISUAL_HEAD:
        raise VocabError(f"token {token} is illegal in IMAGE mode")
    return Mode.TEXT if token == layout.id_imgend else Mode.IMAGE


def validate_sequence(tokens: Sequence[int], layout: VocabLayout, n_img: int) -> Optional[int]:
    """Check ``tokens`` against the interleaving grammar.

    Accepts exactly  text* ( <imgbos> content^n_img <imgend> text* )*  where
    <imgpad> may stand in for content tokens inside a block.  Returns None if
    well-formed, otherwise the index of the first offending token.  A
    sequence that ends inside an image block returns len(tokens): the index
    at which a continuation was required.
    """
    mode = Mode.TEXT
    in_block = 0
    for i, tok in enumerate(tokens):
        if not (0 <= tok < layout.total_size):
            return i
        if mode is Mode.TEXT:
            if tok == layout.id_imgbos:
                mode = Mode.IMAGE
                in_block = 0
            elif not layout.is_text_base(tok):
                return i
        else:
            if tok == layout.id_imgend:
                if in_block != n_img:
                    return i
                mode = Mode.TEXT
            elif layout.is_image_content(tok) or tok == layout.id_imgpad:
                if in_block >= n_img:
                    return i
                in_block += 1
            else:
                return i
    if mode is Mode.IMAGE:
        return len(tokens)
    return None


def check_sequence(tokens: Sequence[int], layout: VocabLayout, n_img: int) -> None:
    """Raise SequenceError at the first grammar violation."""
    pos = validate_sequence(tokens, layout, n_img)
    if pos is not None:
        raise SequenceError("malformed token sequence", pos)
