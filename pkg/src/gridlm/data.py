"""Synthetic corpus: modular arithmetic QA and named grid patterns.

Four record types share one Sample shape:
  t2t   "add 3 5" -> "8"
  ti2t  image + "describe" -> "checker red blue"
  t2i   "draw checker red blue" -> image
  t2ti  "describe and draw checker red blue" -> text + image

The base-model corpus adds text-only "echo" records (also t2t-shaped): the
pretrained model answers drawing requests with words, the way any assistant
without an image path would.  Every task is exactly checkable: arithmetic
answers are computable and pattern grids are pure functions of their spec.
Held-out subsets are carved from spec space by a stable hash so train/eval
never overlap.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .codec import (
    MODULUS,
    OPS,
    PALETTE_NAMES,
    PATTERN_KINDS,
    ImageGrid,
    ImageSegment,
    Sample,
    TextSegment,
    Turn,
)
from .errors import DatasetError
from .vocab import VocabLayout

GRID_K = 8
DATASET_VERSION = 1

# Fraction carved out for held-out eval, as a threshold on one hash byte.
HELDOUT_BYTE_SPEC = 51  # ~20% of pattern specs
HELDOUT_BYTE_PAIR = 38  # ~15% of arithmetic pairs

RECORD_TYPES = ("t2t", "ti2t", "t2i", "t2ti")


@dataclass(frozen=True)
class PatternSpec:
    """A named K*K pattern over two palette colors (one color when solid)."""

    kind: str
    color_a: int
    color_b: int

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        for v in (self.color_a, self.color_b):
            if not (0 <= v < len(PALETTE_NAMES)):
                raise ValueError(f"color index {v} outside named palette")
        if self.kind == "solid":
            if self.color_a != self.color_b:
                raise ValueError("solid uses a single color")
        elif self.color_a == self.color_b:
            raise ValueError(f"{self.kind} needs two distinct colors")

    def phrase(self) -> str:
        if self.kind == "solid":
            return f"solid {PALETTE_NAMES[self.color_a]}"
        return f"{self.kind} {PALETTE_NAMES[self.color_a]} {PALETTE_NAMES[self.color_b]}"

    def key(self) -> str:
        return f"{self.kind}:{self.color_a}:{self.color_b}"


def grid_of(spec: PatternSpec, k: int) -> ImageGrid:
    """Deterministic spec -> grid rule."""
    a, b = spec.color_a, spec.color_b
    if spec.kind == "solid":
        rows = [[a] * k for _ in range(k)]
    elif spec.kind == "checker":
        rows = [[a if (r + c) % 2 == 0 else b for c in range(k)] for r in range(k)]
    elif spec.kind == "hstripes":
        rows = [[a if r % 2 == 0 else b for c in range(k)] for r in range(k)]
    elif spec.kind == "vstripes":
        rows = [[a if c % 2 == 0 else b for c in range(k)] for r in range(k)]
    elif spec.kind == "border":
        rows = [
            [a if r in (0, k - 1) or c in (0, k - 1) else b for c in range(k)]
            for r in range(k)
        ]
    else:
        raise ValueError(f"unknown pattern kind {spec.kind!r}")
    return ImageGrid.from_rows(rows)


def all_pattern_specs() -> List[PatternSpec]:
    specs = []
    n = len(PALETTE_NAMES)
    for kind in PATTERN_KINDS:
        if kind == "solid":
            specs.extend(PatternSpec(kind, a, a) for a in range(n))
        else:
            specs.extend(
                PatternSpec(kind, a, b) for a in range(n) for b in range(n) if a != b
            )
    return specs


def all_arith_pairs() -> List[Tuple[str, int, int]]:
    return [(op, x, y) for op in OPS for x in range(MODULUS) for y in range(MODULUS)]


def _hash_byte(key: str) -> int:
    return hashlib.sha256(key.encode()).digest()[0]


def is_heldout_spec(spec: PatternSpec) -> bool:
    return _hash_byte("spec:" + spec.key()) < HELDOUT_BYTE_SPEC


def is_heldout_pair(op: str, x: int, y: int) -> bool:
    return _hash_byte(f"pair:{op}:{x}:{y}") < HELDOUT_BYTE_PAIR


def split_specs(split: str) -> List[PatternSpec]:
    specs = all_pattern_specs()
    if split == "all":
        return specs
    if split == "train":
        return [s for s in specs if not is_heldout_spec(s)]
    if split == "heldout":
        return [s for s in specs if is_heldout_spec(s)]
    raise ValueError(f"unknown split {split!r}")


def split_pairs(split: str) -> List[Tuple[str, int, int]]:
    pairs = all_arith_pairs()
    if split == "all":
        return pairs
    if split == "train":
        return [p for p in pairs if not is_heldout_pair(*p)]
    if split == "heldout":
        return [p for p in pairs if is_heldout_pair(*p)]
    raise ValueError(f"unknown split {split!r}")


def arith_answer(op: str, x: int, y: int) -> int:
    if op == "add":
        return (x + y) % MODULUS
    if op == "sub":
        return (x - y) % MODULUS
    raise ValueError(f"unknown op {op!r}")


def _rng(record_type: str, seed: int, split: str) -> random.Random:
    # String seeds hash stably (sha512 inside random.seed), so output is
    # byte-reproducible across processes.
    return random.Random(f"{record_type}:{seed}:{split}")


def _make_t2t(op: str, x: int, y: int, sample_id: str) -> Sample:
    return Sample(
        record_type="t2t",
        sample_id=sample_id,
        turns=(
            Turn("human", (TextSegment(f"{op} {x} {y}"),)),
            Turn("assistant", (TextSegment(str(arith_answer(op, x, y))),)),
        ),
    )


def _make_ti2t(spec: PatternSpec, k: int, sample_id: str) -> Sample:
    return Sample(
        record_type="ti2t",
        sample_id=sample_id,
        turns=(
            Turn("human", (ImageSegment(grid_of(spec, k)), TextSegment("describe"))),
            Turn("assistant", (TextSegment(spec.phrase()),)),
        ),
    )


def _make_t2i(spec: PatternSpec, k: int, sample_id: str) -> Sample:
    return Sample(
        record_type="t2i",
        sample_id=sample_id,
        turns=(
            Turn("human", (TextSegment("draw " + spec.phrase()),)),
            Turn("assistant", (ImageSegment(grid_of(spec, k)),)),
        ),
    )


def _make_t2ti(spec: PatternSpec, k: int, sample_id: str) -> Sample:
    return Sample(
        record_type="t2ti",
        sample_id=sample_id,
        turns=(
            Turn("human", (TextSegment("describe and draw " + spec.phrase()),)),
            Turn("assistant", (TextSegment(spec.phrase()), ImageSegment(grid_of(spec, k)))),
        ),
    )


def gen_t2t(n: int, seed: int, split: str = "train") -> List[Sample]:
    pairs = split_pairs(split)
    rng = _rng("t2t", seed, split)
    out = []
    for i in range(n):
        op, x, y = pairs[rng.randrange(len(pairs))]
        out.append(_make_t2t(op, x, y, f"t2t-{seed}-{i:06d}"))
    return out


def _make_echo(form: str, spec: PatternSpec, sample_id: str) -> Sample:
    prompt = f"{form} {spec.phrase()}"
    reply = prompt if form == "draw" else spec.phrase()
    return Sample(
        record_type="t2t",
        sample_id=sample_id,
        turns=(
            Turn("human", (TextSegment(prompt),)),
            Turn("assistant", (TextSegment(reply),)),
        ),
    )


def gen_echo(n: int, seed: int, split: str = "train") -> List[Sample]:
    """Text-only replies to drawing requests, for the base-model corpus.

    A model with no image path still gets asked to draw; here it echoes the
    request ("draw X" -> "draw X") or restates the pattern phrase ("describe
    and draw X" -> "X").  Because the reply starts with the request's leading
    verb or its phrase, the prompt's intent is readable right at the reply
    boundary, which is the toehold later stages use to reroute these prompts
    to the image opener.
    """
    specs = split_specs(split)
    rng = _rng("echo", seed, split)
    out = []
    for i in range(n):
        spec = specs[rng.randrange(len(specs))]
        form = "draw" if rng.random() < 0.5 else "describe and draw"
        out.append(_make_echo(form, spec, f"echo-{seed}-{i:06d}"))
    return out


def gen_ti2t(n: int, seed: int, k: int = GRID_K, split: str = "train") -> List[Sample]:
    specs = split_specs(split)
    rng = _rng("ti2t", seed, split)
    return [
        _make_ti2t(specs[rng.randrange(len(specs))], k, f"ti2t-{seed}-{i:06d}")
        for i in range(n)
    ]


def gen_t2i(n: int, seed: int, k: int = GRID_K, split: str = "train") -> List[Sample]:
    specs = split_specs(split)
    rng = _rng("t2i", seed, split)
    return [
        _make_t2i(specs[rng.randrange(len(specs))], k, f"t2i-{seed}-{i:06d}")
        for i in range(n)
    ]


def gen_t2ti(n: int, seed: int, k: int = GRID_K, split: str = "train") -> List[Sample]:
    specs = split_specs(split)
    rng = _rng("t2ti", seed, split)
    return [
        _make_t2ti(specs[rng.randrange(len(specs))], k, f"t2ti-{seed}-{i:06d}")
        for i in range(n)
    ]


GENERATORS = {"t2t": gen_t2t, "ti2t": gen_ti2t, "t2i": gen_t2i, "t2ti": gen_t2ti, "echo": gen_echo}


def _segment_to_obj(seg) -> Dict:
    if isinstance(seg, TextSegment):
        return {"kind": "text", "value": seg.text}
    if isinstance(seg, ImageSegment):
        return {"kind": "image", "k": seg.grid.k, "cells": seg.grid.rows()}
    raise DatasetError(f"unknown segment type {type(seg).__name__}")


def _segment_from_obj(obj: Dict, line: int):
    kind = obj.get("kind")
    if kind == "text":
        return TextSegment(obj["value"])
    if kind == "image":
        return ImageSegment(ImageGrid.from_rows(obj["cells"]))
    raise DatasetError(f"unknown segment kind {kind!r}", line=line)


def sample_to_obj(sample: Sample) -> Dict:
    return {
        "id": sample.sample_id,
        "type": sample.record_type,
        "turns": [
            {"role": t.role, "segments": [_segment_to_obj(s) for s in t.segments]}
            for t in sample.turns
        ],
    }


def sample_from_obj(obj: Dict, line: int = 0) -> Sample:
    try:
        turns = tuple(
            Turn(t["role"], tuple(_segment_from_obj(s, line) for s in t["segments"]))
            for t in obj["turns"]
        )
        return Sample(record_type=obj["type"], turns=turns, sample_id=obj.get("id", ""))
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"malformed sample: {exc}", line=line) from exc


def dataset_header(layout: VocabLayout, k: int) -> Dict:
    return {
        "version": DATASET_VERSION,
        "layout": layout.layout_hash(),
        "k": k,
        "palette": list(PALETTE_NAMES),
    }


def write_dataset(
    path, samples: Sequence[Sample], layout: Optional[VocabLayout] = None, k: int = GRID_K
) -> None:
    layout = layout or VocabLayout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(dataset_header(layout, k), sort_keys=True, separators=(",", ":")))
        f.write("\n")
        for s in samples:
            f.write(json.dumps(sample_to_obj(s), sort_keys=True, separators=(",", ":")))
            f.write("\n")


def read_dataset(path, layout: Optional[VocabLayout] = None) -> List[Sample]:
    """Parse a dataset file; errors carry 1-based line numbers."""
    path = Path(path)
    samples: List[Sample] = []
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        return samples
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"bad header: {exc}", line=1) from exc
    if header.get("version") != DATASET_VERSION:
        raise DatasetError(f"unsupported version {header.get('version')!r}", line=1)
    if layout is not None and header.get("layout") != layout.layout_hash():
        raise DatasetError(
            f"layout hash {header.get('layout')!r} does not match {layout.layout_hash()!r}",
            line=1,
        )
    for i, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"bad record: {exc}", line=i) from exc
        samples.append(sample_from_obj(obj, line=i))
    return samples


def read_header(path) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    if not first:
        raise DatasetError("missing header line", line=1)
    try:
        return json.loads(first)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"bad header: {exc}", line=1) from exc
