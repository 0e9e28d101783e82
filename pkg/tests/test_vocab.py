import pytest
from hypothesis import given, strategies as st

from gridlm.errors import SequenceError, VocabError
from gridlm.vocab import Head, Mode, VocabLayout, check_sequence, head_of, step_mode, validate_sequence

N_IMG = 4  # small block size keeps hand-built sequences readable


def test_default_layout_ids(layout):
    assert layout.n_text_base == 256
    assert layout.n_image == 64
    assert layout.id_imgbos == 256
    assert layout.id_imgend == 257
    assert layout.id_imgpad == 258
    assert layout.image_offset == 259
    assert layout.total_size == 323


def test_head_support_sizes(layout):
    # Text head: base range plus <imgbos>; visual head: <imgend>, <imgpad>, content.
    assert layout.text_head_size == 257
    assert layout.visual_head_size == 66
    assert layout.visual_head_offset == 257


def test_head_of_special_tokens(layout):
    assert head_of(layout, layout.id_imgbos) is Head.TEXT_HEAD
    assert head_of(layout, layout.id_imgend) is Head.VISUAL_HEAD
    assert head_of(layout, layout.id_imgpad) is Head.VISUAL_HEAD


def test_head_of_ranges(layout):
    assert head_of(layout, 0) is Head.TEXT_HEAD
    assert head_of(layout, 255) is Head.TEXT_HEAD
    assert head_of(layout, layout.image_offset) is Head.VISUAL_HEAD
    assert head_of(layout, layout.total_size - 1) is Head.VISUAL_HEAD
    with pytest.raises(VocabError):
        head_of(layout, -1)
    with pytest.raises(VocabError):
        head_of(layout, layout.total_size)


def test_head_partition_is_total(layout):
    kinds = []
    for t in range(layout.total_size):
        flags = (
            layout.is_text_base(t),
            t in (layout.id_imgbos, layout.id_imgend, layout.id_imgpad),
            layout.is_image_content(t),
        )
        assert sum(flags) == 1
        kinds.append(head_of(layout, t))
    assert kinds.count(Head.TEXT_HEAD) == layout.text_head_size
    assert kinds.count(Head.VISUAL_HEAD) == layout.visual_head_size


def test_step_mode_transitions(layout):
    assert step_mode(Mode.TEXT, layout.id_imgbos, layout) is Mode.IMAGE
    assert step_mode(Mode.IMAGE, layout.id_imgend, layout) is Mode.TEXT
    assert step_mode(Mode.TEXT, 7, layout) is Mode.TEXT
    assert step_mode(Mode.IMAGE, layout.image_offset + 3, layout) is Mode.IMAGE
    assert step_mode(Mode.IMAGE, layout.id_imgpad, layout) is Mode.IMAGE


def test_step_mode_illegal_pairs(layout):
    with pytest.raises(VocabError):
        step_mode(Mode.TEXT, layout.image_offset, layout)
    with pytest.raises(VocabError):
        step_mode(Mode.TEXT, layout.id_imgend, layout)
    with pytest.raises(VocabError):
        step_mode(Mode.TEXT, layout.id_imgpad, layout)
    with pytest.raises(VocabError):
        step_mode(Mode.IMAGE, 5, layout)
    with pytest.raises(VocabError):
        step_mode(Mode.IMAGE, layout.id_imgbos, layout)


def _img(layout, *vals):
    return [layout.image_offset + v for v in vals]


def test_validate_pure_text(layout):
    assert validate_sequence([1, 2, 3], layout, N_IMG) is None


def test_validate_full_block(layout):
    seq = [5, layout.id_imgbos, *_img(layout, 0, 1, 2, 3), layout.id_imgend, 6]
    assert validate_sequence(seq, layout, N_IMG) is None


def test_validate_short_block_flags_imgend(layout):
    # One content token missing: the early <imgend> is the offender.
    seq = [5, layout.id_imgbos, *_img(layout, 0, 1, 2), layout.id_imgend]
    assert validate_sequence(seq, layout, N_IMG) == 5


def test_validate_truncated_block(layout):
    seq = [layout.id_imgbos, *_img(layout, 0, 1)]
    assert validate_sequence(seq, layout, N_IMG) == len(seq)


def test_validate_imgpad_inside_block_only(layout):
    ok = [layout.id_imgbos, layout.id_imgpad, *_img(layout, 1, 2, 3), layout.id_imgend]
    assert validate_sequence(ok, layout, N_IMG) is None
    assert validate_sequence([layout.id_imgpad], layout, N_IMG) == 0


def test_validate_content_outside_block(layout):
    assert validate_sequence([layout.image_offset], layout, N_IMG) == 0


def test_validate_overlong_block(layout):
    seq = [layout.id_imgbos, *_img(layout, 0, 1, 2, 3, 4)]
    assert validate_sequence(seq, layout, N_IMG) == 5


def test_validate_out_of_range_token(layout):
    assert validate_sequence([0, layout.total_size], layout, N_IMG) == 1


def test_check_sequence_raises_with_position(layout):
    with pytest.raises(SequenceError) as err:
        check_sequence([5, layout.id_imgend], layout, N_IMG)
    assert err.value.position == 1


def test_layout_roundtrip_and_hash(layout):
    clone = VocabLayout.from_dict(layout.to_dict())
    assert clone == layout
    assert clone.layout_hash() == layout.layout_hash()
    other = VocabLayout(n_text_base=128, n_image=16)
    assert other.layout_hash() != layout.layout_hash()


def test_local_indexing(layout):
    assert layout.text_local(0) == 0
    assert layout.text_local(layout.id_imgbos) == 256
    assert layout.visual_local(layout.id_imgend) == 0
    assert layout.visual_local(layout.id_imgpad) == 1
    assert layout.visual_local(layout.image_offset) == 2
    assert layout.visual_local(layout.total_size - 1) == layout.visual_head_size - 1


@st.composite
def grammatical_sequences(draw):
    layout = VocabLayout()
    parts = []
    for _ in range(draw(st.integers(0, 4))):
        if draw(st.booleans()):
            parts.extend(draw(st.lists(st.integers(0, 255), max_size=5)))
        else:
            parts.append(layout.id_imgbos)
            for _ in range(N_IMG):
                if draw(st.booleans()):
                    parts.append(layout.id_imgpad)
                else:
                    parts.append(layout.image_offset + draw(st.integers(0, 63)))
            parts.append(layout.id_imgend)
    return parts


@given(grammatical_sequences())
def test_mode_fold_closure_on_valid_sequences(seq):
    """Any accepted sequence folds through step_mode without error, ending in TEXT."""
    layout = VocabLayout()
    assert validate_sequence(seq, layout, N_IMG) is None
    mode = Mode.TEXT
    for tok in seq:
        mode = step_mode(mode, tok, layout)
    assert mode is Mode.TEXT


@given(st.lists(st.integers(0, 322), max_size=30))
def test_validator_agrees_with_mode_fold(seq):
    """validate_sequence accepts iff the mode machine accepts with full blocks."""
    layout = VocabLayout()
    verdict = validate_sequence(seq, layout, N_IMG)

    mode = Mode.TEXT
    in_block = 0
    ok = True
    for tok in seq:
        try:
            nxt = step_mode(mode, tok, layout)
        except VocabError:
            ok = False
            break
        if mode is Mode.IMAGE:
            if tok == layout.id_imgend:
                if in_block != N_IMG:
                    ok = False
                    break
                in_block = 0
            else:
                in_block += 1
                if in_block > N_IMG:
                    ok = False
                    break
        elif nxt is Mode.IMAGE:
            in_block = 0
        mode = nxt
    if mode is Mode.IMAGE:
        ok = False
    assert (verdict is None) == ok
