"""Unified autoregressive transformer with a partitioned embedding table,
an adapter branch for image generation, a patch encoder for input images,
and two output heads over disjoint token ranges.

The text path is the original language model end to end: embeddings,
backbone blocks, final norm, text head.  The adapter blocks branch off the
backbone output and feed only the visual head, so training the image side
leaves every text logit of a text-only prefix bit-identical while the text
groups are frozen.  That separation is what the staged schedule's retention
guarantees rest on.

Head routing is realized downstream: forward always produces both heads'
logits (their supports partition the vocabulary), the loss selects per
position by modality mask, and the sampler selects by decoding mode.  The
full-vocabulary baseline head is the concatenation of the two routed heads,
so both variants share parameters and initial state exactly.

Output heads initialize to zero so the first-step distribution is uniform
over each head's support; gradients are nonzero there, so training is
unaffected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CapacityError, CheckpointError, VocabError
from .vocab import VocabLayout

GROUP_NAMES = (
    "base_embed",
    "new_embed",
    "backbone",
    "adapter",
    "text_head",
    "visual_head",
    "patch_encoder",
    "pos_embed",
)

# Groups that did not exist in the text-only base model.
ADDED_GROUPS = ("new_embed", "adapter", "visual_head", "patch_encoder")

# Groups copied from a base checkpoint when one is given.
BASE_GROUPS = ("base_embed", "backbone", "text_head")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers_backbone: int = 4
    n_layers_adapter: int = 2
    n_heads: int = 4
    max_seq_len: int = 160
    grid_k: int = 8
    layout: VocabLayout = field(default_factory=VocabLayout)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> Dict:
        return {
            "d_model": self.d_model,
            "n_layers_backbone": self.n_layers_backbone,
            "n_layers_adapter": self.n_layers_adapter,
            "n_heads": self.n_heads,
            "max_seq_len": self.max_seq_len,
            "grid_k": self.grid_k,
            "layout": self.layout.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        d = dict(d)
        d["layout"] = VocabLayout.from_dict(d["layout"])
        return cls(**d)


class Block(nn.Module):
    """Pre-norm transformer block with causal self-attention."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, 4 * d_model)
        self.fc2 = nn.Linear(4 * d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).split(d, dim=2)
        q = q.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)
        k = k.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)
        v = v.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)
        a = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        a = a.transpose(1, 2).contiguous().view(b, t, d)
        x = x + self.proj(a)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


@dataclass
class ForwardOutput:
    """Each branch's hidden states plus both heads' logits."""

    hidden: torch.Tensor         # (B, T, d) text path, post final norm
    hidden_visual: torch.Tensor  # (B, T, d) adapter branch, post its norm
    text_logits: torch.Tensor    # (B, T, n_text_base + 1)
    visual_logits: torch.Tensor  # (B, T, n_image + 2)

    @property
    def unified_logits(self) -> torch.Tensor:
        """Full-vocabulary logits; column i scores global token id i."""
        return torch.cat([self.text_logits, self.visual_logits], dim=-1)


class GridLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layout = config.layout
        d = config.d_model
        self.base_embed = nn.Parameter(torch.empty(layout.n_text_base, d))
        self.new_embed = nn.Parameter(torch.empty(layout.total_size - layout.n_text_base, d))
        self.seq_pos = nn.Parameter(torch.empty(config.max_seq_len, d))
        self.backbone_blocks = nn.ModuleList(
            Block(d, config.n_heads) for _ in range(config.n_layers_backbone)
        )
        self.ln_base = nn.LayerNorm(d)
        self.adapter_blocks = nn.ModuleList(
            Block(d, config.n_heads) for _ in range(config.n_layers_adapter)
        )
        self.ln_vis = nn.LayerNorm(d)
        self.text_head = nn.Linear(d, layout.text_head_size)
        self.visual_head = nn.Linear(d, layout.visual_head_size)
        self.patch_embed = nn.Parameter(torch.empty(layout.n_image, d))
        self.row_pos = nn.Parameter(torch.empty(config.grid_k, d))
        self.col_pos = nn.Parameter(torch.empty(config.grid_k, d))

    def forward(self, tokens: torch.Tensor, slots: Optional[torch.Tensor] = None) -> ForwardOutput:
        """tokens: (B, T) int64.  slots: (N, 5) int64 rows of
        (batch, position, palette value, cell row, cell col) marking prompt
        image cells embedded through the patch encoder instead of the table.
        """
        if tokens.dim() != 2:
            raise ValueError(f"tokens must be (B, T), got shape {tuple(tokens.shape)}")
        b, t = tokens.shape
        if t > self.config.max_seq_len:
            raise CapacityError(f"sequence length {t} exceeds max_seq_len {self.config.max_seq_len}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.layout.total_size):
            raise VocabError("token id outside vocabulary")
        table = torch.cat([self.base_embed, self.new_embed], dim=0)
        x = table[tokens]
        if slots is not None and slots.numel():
            patch = self.patch_embed[slots[:, 2]] + self.row_pos[slots[:, 3]] + self.col_pos[slots[:, 4]]
            x = x.index_put((slots[:, 0], slots[:, 1]), patch)
        x = x + self.seq_pos[:t]
        for blk in self.backbone_blocks:
            x = blk(x)
        h = self.ln_base(x)
        a = x
        for blk in self.adapter_blocks:
            a = blk(a)
        v = self.ln_vis(a)
        return ForwardOutput(
            hidden=h,
            hidden_visual=v,
            text_logits=self.text_head(h),
            visual_logits=self.visual_head(v),
        )

    def forward_unified(self, tokens: torch.Tensor, slots: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.forward(tokens, slots).unified_logits


def group_of(param_name: str) -> str:
    """Map a parameter name to its freeze-manifest group."""
    if param_name.startswith("base_embed"):
        return "base_embed"
    if param_name.startswith("new_embed"):
        return "new_embed"
    if param_name.startswith(("seq_pos", "backbone_blocks.", "ln_base.")):
        return "backbone"
    if param_name.startswith(("adapter_blocks.", "ln_vis.")):
        return "adapter"
    if param_name.startswith("text_head."):
        return "text_head"
    if param_name.startswith("visual_head."):
        return "visual_head"
    if param_name.startswith("patch_embed"):
        return "patch_encoder"
    if param_name.startswith(("row_pos", "col_pos")):
        return "pos_embed"
    raise ValueError(f"parameter {param_name!r} belongs to no group")


def param_groups(model: GridLM) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
    """Named parameters partitioned into the eight groups, in module order."""
    groups: Dict[str, List[Tuple[str, nn.Parameter]]] = {g: [] for g in GROUP_NAMES}
    for name, p in model.named_parameters():
        groups[group_of(name)].append((name, p))
    return groups


def count_params(model: GridLM, groups: Optional[Iterable[str]] = None) -> Dict[str, int]:
    """Exact parameter counts per group plus the total.

    With an explicit empty group list only the total is reported.  Unknown
    group names raise ValueError.
    """
    by_group = param_groups(model)
    if groups is None:
        wanted = list(GROUP_NAMES)
    else:
        wanted = list(groups)
        for g in wanted:
            if g not in by_group:
                raise ValueError(f"unknown parameter group {g!r}")
    counts = {g: sum(p.numel() for _, p in by_group[g]) for g in wanted}
    counts["total"] = sum(p.numel() for p in model.parameters())
    return counts


def added_fraction(model: GridLM) -> float:
    counts = count_params(model)
    return sum(counts[g] for g in ADDED_GROUPS) / counts["total"]


def init_params(config: ModelConfig, seed: int, base_checkpoint=None) -> GridLM:
    """Build and initialize a model; deterministic given seed.

    Weights draw from N(0, 0.02^2), biases and both output heads start at
    zero, norm gains at one.  When base_checkpoint (a path or a GridLM) is
    given, the text-model groups (base_embed, backbone, text_head) are copied
    from it byte-for-byte; the added groups keep their fresh initialization.
    """
    model = GridLM(config)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            grp = group_of(name)
            if grp in ("text_head", "visual_head"):
                p.zero_()
            elif p.dim() == 1 and name.endswith("bias"):
                p.zero_()
            elif p.dim() == 1:
                p.fill_(1.0)  # norm gains
            else:
                p.copy_(torch.empty_like(p).normal_(0.0, 0.02, generator=g))
    if base_checkpoint is not None:
        if isinstance(base_checkpoint, GridLM):
            base = base_checkpoint
        else:
            from .checkpoint import load_checkpoint

            base, _ = load_checkpoint(base_checkpoint)
        bl, ml = base.config.layout, config.layout
        if bl.n_text_base != ml.n_text_base:
            raise CheckpointError(
                f"base text range {bl.n_text_base} does not match config {ml.n_text_base}"
            )
        base_params = dict(base.named_parameters())
        with torch.no_grad():
            for name, p in model.named_parameters():
                if group_of(name) not in BASE_GROUPS:
                    continue
                if name not in base_params or base_params[name].shape != p.shape:
                    raise CheckpointError(f"base checkpoint missing or mismatched tensor {name!r}")
                p.copy_(base_params[name])
    return model


def pack_batch(
    token_lists: Sequence[Sequence[int]],
    pad_id: int,
    masks: Optional[Sequence[Tuple[Sequence[int], Sequence[int]]]] = None,
    slot_records: Optional[Sequence[Sequence[Tuple[int, int, int, int]]]] = None,
    device=None,
):
    """Right-pad variable-length sequences into batch tensors.

    Returns (tokens, lengths, text_mask, img_mask, slots); mask tensors are
    None unless masks given; slots is None unless any slot record is
    nonempty.  Causal attention never lets a real position attend to the
    right padding, and masks are zero there, so pad content is inert.
    """
    bsz = len(token_lists)
    tmax = max((len(t) for t in token_lists), default=0)
    tokens = torch.full((bsz, tmax), pad_id, dtype=torch.long, device=device)
    lengths = torch.zeros(bsz, dtype=torch.long, device=device)
    for i, seq in enumerate(token_lists):
        tokens[i, : len(seq)] = torch.as_tensor(seq, dtype=torch.long)
        lengths[i] = len(seq)
    text_mask = img_mask = None
    if masks is not None:
        text_mask = torch.zeros(bsz, tmax, dtype=torch.bool, device=device)
        img_mask = torch.zeros(bsz, tmax, dtype=torch.bool, device=device)
        for i, (tm, im) in enumerate(masks):
            text_mask[i, : len(tm)] = torch.as_tensor(tm, dtype=torch.bool)
            img_mask[i, : len(im)] = torch.as_tensor(im, dtype=torch.bool)
    slots = None
    if slot_records is not None:
        rows = [
            (i, pos, val, r, c)
            for i, recs in enumerate(slot_records)
            for (pos, val, r, c) in recs
        ]
        if rows:
            slots = torch.as_tensor(rows, dtype=torch.long, device=device)
    return tokens, lengths, text_mask, img_mask, slots
