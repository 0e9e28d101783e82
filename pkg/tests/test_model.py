import math

import pytest
import torch

from gridlm.codec import build_text_vocab, render_sample
from gridlm.data import gen_t2i, gen_t2t, gen_ti2t, gen_t2ti
from gridlm.errors import CapacityError, CheckpointError, VocabError
from gridlm.model import (
    ADDED_GROUPS,
    GROUP_NAMES,
    GridLM,
    ModelConfig,
    added_fraction,
    count_params,
    group_of,
    init_params,
    pack_batch,
    param_groups,
)

# Hand-computed for the default config (d=128, 4+2 layers, heads 4, seq 160,
# k=8, vocab 256+67): one block = 2*256 + (128*384+384) + (128*128+128)
# + (128*512+512) + (512*128+128) = 198272; each branch ends in its own
# layer norm (weight+bias = 256).
EXPECTED_COUNTS = {
    "base_embed": 256 * 128,                    # 32768
    "new_embed": 67 * 128,                      # 8576
    "backbone": 160 * 128 + 4 * 198272 + 256,   # 813824
    "adapter": 2 * 198272 + 256,                # 396800
    "text_head": 128 * 257 + 257,               # 33153
    "visual_head": 128 * 66 + 66,               # 8514
    "patch_encoder": 64 * 128,                  # 8192
    "pos_embed": 2 * 8 * 128,                   # 2048
}


def _render_batch(samples, config, vocab):
    rend = [render_sample(s, config.layout, vocab) for s in samples]
    return pack_batch(
        [r.tokens for r in rend],
        vocab.pad,
        masks=[(r.text_mask, r.img_mask) for r in rend],
        slot_records=[list(zip(r.slot_pos, r.slot_val, r.slot_row, r.slot_col)) for r in rend],
    )


def test_config_validates_head_divisibility():
    with pytest.raises(ValueError):
        ModelConfig(d_model=100, n_heads=3)


def test_every_parameter_has_exactly_one_group(config):
    model = GridLM(config)
    names = [n for n, _ in model.named_parameters()]
    for n in names:
        assert group_of(n) in GROUP_NAMES
    groups = param_groups(model)
    listed = [n for g in GROUP_NAMES for n, _ in groups[g]]
    assert sorted(listed) == sorted(names)


def test_count_params_exact(config):
    model = GridLM(config)
    counts = count_params(model)
    for g, expect in EXPECTED_COUNTS.items():
        assert counts[g] == expect, g
    assert counts["total"] == sum(EXPECTED_COUNTS.values()) == 1303875


def test_added_fraction_value(config):
    # The appended blocks dominate the additions: with a 4-block backbone and
    # a 2-block adapter the added share is ~32%, frozen here by hand.
    model = GridLM(config)
    added = sum(EXPECTED_COUNTS[g] for g in ADDED_GROUPS)
    assert math.isclose(added_fraction(model), added / 1303875, rel_tol=0, abs_tol=1e-12)
    assert math.isclose(added_fraction(model), 0.3237135461604832, abs_tol=1e-12)


def test_count_params_group_filter(config):
    model = GridLM(config)
    only = count_params(model, ["adapter"])
    assert set(only) == {"adapter", "total"}
    assert count_params(model, [])["total"] == 1303875
    with pytest.raises(ValueError):
        count_params(model, ["decoder"])


def test_init_determinism(tiny_config):
    a = init_params(tiny_config, 3)
    b = init_params(tiny_config, 3)
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2
        assert torch.equal(p1, p2)
    c = init_params(tiny_config, 4)
    assert any(not torch.equal(p1, p2) for p1, p2 in zip(a.parameters(), c.parameters()))


def test_heads_start_at_zero(tiny_config):
    model = init_params(tiny_config, 0)
    assert torch.equal(model.text_head.weight, torch.zeros_like(model.text_head.weight))
    assert torch.equal(model.visual_head.bias, torch.zeros_like(model.visual_head.bias))


def test_init_from_base_copies_text_groups(tiny_config):
    base = init_params(tiny_config, 1)
    with torch.no_grad():
        base.text_head.weight.normal_(0, 0.02)  # make the copied head visible
    model = init_params(tiny_config, 99, base_checkpoint=base)
    assert torch.equal(model.base_embed, base.base_embed)
    assert torch.equal(model.seq_pos, base.seq_pos)
    assert torch.equal(model.text_head.weight, base.text_head.weight)
    # added groups keep the fresh seed-99 draw
    fresh = init_params(tiny_config, 99)
    assert torch.equal(model.new_embed, fresh.new_embed)
    assert torch.equal(model.patch_embed, fresh.patch_embed)
    assert not torch.equal(model.base_embed, fresh.base_embed)


def test_init_from_base_layout_mismatch(tiny_config):
    other = ModelConfig(
        d_model=32, n_layers_backbone=2, n_layers_adapter=1, n_heads=2,
        layout=tiny_config.layout.__class__(n_text_base=128, n_image=16),
    )
    base = init_params(other, 0)
    with pytest.raises(CheckpointError):
        init_params(tiny_config, 0, base_checkpoint=base)


def test_forward_shapes_and_normalization(tiny_config, vocab):
    model = init_params(tiny_config, 0)
    samples = gen_t2t(2, 0) + gen_ti2t(2, 0)
    tokens, _, _, _, slots = _render_batch(samples, tiny_config, vocab)
    out = model(tokens, slots)
    b, t = tokens.shape
    layout = tiny_config.layout
    assert out.text_logits.shape == (b, t, layout.text_head_size)
    assert out.visual_logits.shape == (b, t, layout.visual_head_size)
    assert out.unified_logits.shape == (b, t, layout.total_size)
    probs = torch.softmax(out.unified_logits.double(), dim=-1)
    assert torch.allclose(probs.sum(-1), torch.ones(b, t, dtype=torch.double), atol=1e-12)


def test_unified_is_sliced_heads(tiny_config, vocab):
    """Whole-vocabulary logits are the two head logits laid side by side."""
    model = init_params(tiny_config, 5)
    tokens, _, _, _, slots = _render_batch(gen_t2ti(2, 1), tiny_config, vocab)
    out = model(tokens, slots)
    layout = tiny_config.layout
    uni = out.unified_logits
    assert torch.equal(uni[..., : layout.text_head_size], out.text_logits)
    assert torch.equal(uni[..., layout.visual_head_offset :], out.visual_logits)


def test_causality(tiny_config, vocab):
    model = init_params(tiny_config, 2)
    with torch.no_grad():
        model.text_head.weight.normal_(0, 0.02)
    tokens = torch.randint(0, 255, (1, 12))
    out1 = model(tokens).text_logits
    perturbed = tokens.clone()
    perturbed[0, 8] = (int(tokens[0, 8]) + 1) % 255
    out2 = model(perturbed).text_logits
    assert torch.allclose(out1[0, :8], out2[0, :8], atol=1e-6)
    assert not torch.allclose(out1[0, 8:], out2[0, 8:], atol=1e-6)


def test_batch_order_invariance(tiny_config, vocab):
    model = init_params(tiny_config, 3)
    samples = gen_t2t(3, 2)
    tokens, _, _, _, _ = _render_batch(samples, tiny_config, vocab)
    fwd = model(tokens).text_logits
    flipped = model(tokens.flip(0)).text_logits
    assert torch.allclose(fwd, flipped.flip(0), atol=1e-6)


def test_forward_determinism(tiny_config, vocab):
    model = init_params(tiny_config, 4)
    tokens, _, _, _, slots = _render_batch(gen_ti2t(2, 3), tiny_config, vocab)
    a = model(tokens, slots).unified_logits
    b = model(tokens, slots).unified_logits
    assert torch.equal(a, b)


def test_patch_slots_change_the_forward(tiny_config, vocab):
    model = init_params(tiny_config, 6)
    tokens, _, _, _, slots = _render_batch(gen_ti2t(1, 4), tiny_config, vocab)
    with_slots = model(tokens, slots).hidden
    without = model(tokens, None).hidden
    assert not torch.allclose(with_slots, without)


def test_capacity_error(tiny_config):
    model = init_params(tiny_config, 0)
    tokens = torch.zeros(1, tiny_config.max_seq_len + 1, dtype=torch.long)
    with pytest.raises(CapacityError):
        model(tokens)


def test_token_range_check(tiny_config):
    model = init_params(tiny_config, 0)
    with pytest.raises(VocabError):
        model(torch.tensor([[0, 999]]))


def test_pure_text_and_image_logit_widths(tiny_config, vocab):
    """Per-position user-facing supports: text head 257 wide, visual 66 wide."""
    model = init_params(tiny_config, 0)
    layout = tiny_config.layout
    tokens, _, tm, im, slots = _render_batch(gen_t2t(1, 0) + gen_t2i(1, 0), tiny_config, vocab)
    out = model(tokens, slots)
    assert out.text_logits.shape[-1] == layout.n_text_base + 1
    assert out.visual_logits.shape[-1] == layout.n_image + 2
    # every supervised target is inside its head's support
    tgt = tokens[:, 1:]
    assert (tgt[tm[:, 1:].bool()] <= layout.id_imgbos).all()
    assert (tgt[im[:, 1:].bool()] >= layout.visual_head_offset).all()
