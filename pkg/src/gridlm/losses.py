"""Masked dual-modality cross-entropy.

Each supervised position contributes to exactly one sum, selected by the
modality masks from render_sample.  Reduction is the mean over masked
positions of the whole batch, taken before the (alpha, beta) weighting, so
the weights keep their meaning across mixed batches of different lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import TrainingError
from .model import ForwardOutput
from .vocab import VocabLayout


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be nonnegative, got {self.alpha}, {self.beta}")


@dataclass(frozen=True)
class LossBreakdown:
    l_text: float
    l_img: float
    l_total: float
    n_text: int
    n_img: int


def _masked_ce(logits: torch.Tensor, local_targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over mask-selected positions; exact 0 when empty."""
    if mask.any():
        sel = logits[mask]
        tgt = local_targets[mask]
        return F.cross_entropy(sel, tgt, reduction="mean")
    return logits.new_zeros(())


def text_loss(
    logits: torch.Tensor, targets: torch.Tensor, text_mask: torch.Tensor, layout: VocabLayout
) -> torch.Tensor:
    """Mean NLL of text-head logits at text-masked positions.

    logits: (..., text_head_size) aligned with targets/mask; targets are
    global token ids.  A masked target outside the text head's support is a
    caller bug and raises.
    """
    mask = text_mask.bool()
    if mask.any():
        bad = targets[mask] > layout.id_imgbos
        if bad.any():
            raise TrainingError(
                f"text-masked target {int(targets[mask][bad][0])} outside text head support"
            )
    return _masked_ce(logits, targets, mask)


def image_loss(
    logits: torch.Tensor, targets: torch.Tensor, img_mask: torch.Tensor, layout: VocabLayout
) -> torch.Tensor:
    """Mean NLL of visual-head logits at image-masked positions."""
    mask = img_mask.bool()
    off = layout.visual_head_offset
    if mask.any():
        sel = targets[mask]
        bad = (sel < off) | (sel >= layout.total_size)
        if bad.any():
            raise TrainingError(
                f"image-masked target {int(sel[bad][0])} outside visual head support"
            )
    return _masked_ce(logits, (targets - off).clamp(min=0), mask)


def total_loss(l_text, l_img, w: LossWeights):
    return w.alpha * l_text + w.beta * l_img


def switched_batch_loss(
    out: ForwardOutput,
    tokens: torch.Tensor,
    text_mask: torch.Tensor,
    img_mask: torch.Tensor,
    layout: VocabLayout,
    w: LossWeights,
):
    """Next-token loss with head routing.

    Masks index targets: mask[:, t] supervises predicting tokens[:, t] from
    logits at t-1, so everything shifts by one here.  Returns the weighted
    total (a graph tensor) and a float breakdown.
    """
    tgt = tokens[:, 1:]
    tm = text_mask[:, 1:].bool()
    im = img_mask[:, 1:].bool()
    l_text = text_loss(out.text_logits[:, :-1], tgt, tm, layout)
    l_img = image_loss(out.visual_logits[:, :-1], tgt, im, layout)
    total = total_loss(l_text, l_img, w)
    bd = LossBreakdown(
        l_text=float(l_text.detach()), l_img=float(l_img.detach()), l_total=float(total.detach()),
        n_text=int(tm.sum()), n_img=int(im.sum()),
    )
    return total, bd


def unified_batch_loss(
    unified_logits: torch.Tensor,
    tokens: torch.Tensor,
    text_mask: torch.Tensor,
    img_mask: torch.Tensor,
    layout: VocabLayout,
    w: LossWeights,
):
    """Next-token loss for the full-vocabulary baseline head.

    Both modality sums use the same whole-codebook softmax; only the target
    positions differ.  Same shift and reduction as the switched path.
    """
    lgts = unified_logits[:, :-1]
    tgt = tokens[:, 1:]
    tm = text_mask[:, 1:].bool()
    im = img_mask[:, 1:].bool()
    l_text = _masked_ce(lgts, tgt, tm)
    l_img = _masked_ce(lgts, tgt, im)
    total = total_loss(l_text, l_img, w)
    bd = LossBreakdown(
        l_text=float(l_text.detach()), l_img=float(l_img.detach()), l_total=float(total.detach()),
        n_text=int(tm.sum()), n_img=int(im.sum()),
    )
    return total, bd
