import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fusedit.denoiser import ToyDenoiser
from fusedit.denoiser.base import AttentionKind, AttentionRecord, LayerAddress, Stage
from fusedit.errors import AlignmentError, ConfigurationError, DegenerateInputError
from fusedit.fusion import (
    AggregatedCrossAttention,
    TokenAlignment,
    aggregate_cross_attention,
    align_tokens,
    build_masks,
    extract_mask,
    fuse_cross_attention,
    fuse_self_attention,
    lcs_pairs,
    resize_mask,
    threshold_mask,
)

TOY = ToyDenoiser()


def _cross(probs, side=16, index=0):
    addr = LayerAddress(Stage.DECODER, index, side)
    z = np.zeros(probs.shape[:-2] + (1, 1))
    return AttentionRecord(addr, AttentionKind.CROSS, z, z, z, probs)


def _lcs_len_brute(a, b):
    # longest common subsequence length by exhaustive subset search
    for r in range(min(len(a), len(b)), -1, -1):
        for comb in itertools.combinations(range(len(a)), r):
            sub = [a[i] for i in comb]
            it = iter(b)
            if all(x in it for x in sub):
                return r
    return 0


# ------------------------------------------------------------ alignment


def test_identical_prompts_align_to_identity():
    p = TOY.encode_prompt("a cat on the grass")
    al = align_tokens(p, p)
    assert not al.alpha_w.any()
    assert al.src_to_edit == {i: i for i in range(len(p))}
    assert al.edited_src_tokens == () and al.edited_edit_tokens == ()


def test_replacement_alignment_marks_new_words():
    src = TOY.encode_prompt("a silver jeep driving")
    edit = TOY.encode_prompt("a Porsche car driving")
    al = align_tokens(src, edit)
    # toy pieces: <bos> a porsch e car driving <eos>
    assert edit.token_strings == ["<bos>", "a", "porsch", "e", "car", "drivin", "g", "<eos>"]
    np.testing.assert_array_equal(al.alpha_w, [0, 0, 1, 1, 1, 0, 0, 0])
    assert al.edited_src_tokens == (2, 3)
    assert al.groups == [((2, 3), (2, 3, 4))]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), max_size=7), st.lists(st.integers(0, 4), max_size=7))
def test_lcs_is_longest_and_common(a, b):
    pairs = lcs_pairs(a, b)
    assert len(pairs) == _lcs_len_brute(a, b)
    assert all(a[i] == b[j] for i, j in pairs)
    assert all(i1 < i2 and j1 < j2 for (i1, j1), (i2, j2) in zip(pairs, pairs[1:]))


def test_blend_words_force_tokens_edited():
    src = TOY.encode_prompt("a red car on a road")
    edit = TOY.encode_prompt("a red car on a bridge")
    al = align_tokens(src, edit, [("car", "car")])
    car_e = edit.word_spans[2]
    assert all(al.alpha_w[i] == 1 for i in car_e)
    assert al.groups[0] == (tuple(src.word_spans[2]), tuple(car_e))
    # the automatic road -> bridge group survives next to the explicit one
    assert len(al.groups) == 2
    for j in np.flatnonzero(al.alpha_w == 0):
        assert j in al.edit_to_src()


def test_missing_blend_word_names_it():
    src = TOY.encode_prompt("a red car")
    with pytest.raises(ConfigurationError, match="boat"):
        align_tokens(src, src, [("boat", "car")])


def test_multi_concept_prompts_give_two_groups():
    src = TOY.encode_prompt("A silver jeep driving down a curvy road in the countryside")
    edit = TOY.encode_prompt("A Porsche car driving down a curvy road in the landmark of autumn")
    al = align_tokens(src, edit)
    assert len(al.groups) == 2
    words = [[edit.token_strings[j] for j in g[1]] for g in al.groups]
    assert words == [["porsch", "e", "car"], ["landma", "rk", "of", "autumn"]]


# -------------------------------------------------------------- aggregation


def test_aggregate_single_map():
    rng = np.random.default_rng(0)
    p = rng.random((1, 256, 3))
    agg = aggregate_cross_attention([_cross(p)], [1])
    np.testing.assert_array_equal(agg.maps, p[0, :, 1].reshape(16, 16, 1))


def test_aggregate_two_heads_is_mean():
    rng = np.random.default_rng(1)
    p = rng.random((2, 256, 2))
    agg = aggregate_cross_attention([_cross(p)], [0, 1])
    np.testing.assert_allclose(agg.maps, ((p[0] + p[1]) / 2).reshape(16, 16, 2), rtol=0, atol=1e-15)


def test_aggregate_brute_force_and_resolution_filter():
    rng = np.random.default_rng(2)
    maps = [rng.random((8, 256, 5)) for _ in range(3)]
    recs = [_cross(m, 16, i) for i, m in enumerate(maps)] + [_cross(rng.random((8, 64, 5)), 8, 9)]
    tokens = [4, 1]
    agg = aggregate_cross_attention(recs, tokens)
    expect = np.zeros((16, 16, 2))
    for y in range(16):
        for x in range(16):
            for n, tok in enumerate(tokens):
                total = 0.0
                for m in maps:
                    for h in range(8):
                        total += m[h, y * 16 + x, tok]
                expect[y, x, n] = total / 24
    np.testing.assert_allclose(agg.maps, expect, rtol=1e-12)


def test_aggregate_requires_base_resolution():
    with pytest.raises(ConfigurationError):
        aggregate_cross_attention([_cross(np.ones((1, 64, 2)), 8)], [0])


# ---------------------------------------------------------------- masks


def test_threshold_example():
    out = threshold_mask(np.array([[0.4, 0.1], [0.25, 0.35]]), 0.3)
    np.testing.assert_array_equal(out, [[1, 0], [0, 1]])


def test_tiny_threshold_gives_full_mask():
    rng = np.random.default_rng(3)
    maps = rng.random((16, 16, 2)) + 1e-3
    assert extract_mask(maps, 1e-9).all()


def test_extract_mask_brute_force():
    rng = np.random.default_rng(4)
    maps = rng.random((16, 16, 2))
    mask = extract_mask(AggregatedCrossAttention(maps, "edit"), 0.3)
    peak = max(max(maps[y, x, 0], maps[y, x, 1]) for y in range(16) for x in range(16))
    for y in range(16):
        for x in range(16):
            assert mask[y, x] == int(max(maps[y, x, 0], maps[y, x, 1]) / peak >= 0.3)


def test_extract_mask_errors():
    with pytest.raises(DegenerateInputError):
        extract_mask(np.zeros((16, 16, 1)))
    with pytest.raises(ValueError):
        extract_mask(np.ones((16, 16, 1)), 1.0)
    assert not extract_mask(np.ones((16, 16, 0))).any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_threshold_monotone(seed, t1, dt):
    t2 = min(t1 + dt, 0.99)
    maps = np.random.default_rng(seed).random((16, 16, 3))
    m1, m2 = extract_mask(maps, t1), extract_mask(maps, t2)
    assert np.all(m2 <= m1)


def test_resize_identity_and_blocks():
    m = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    np.testing.assert_array_equal(resize_mask(m, 2), m)
    np.testing.assert_array_equal(resize_mask(m, 4), np.kron(m, np.ones((2, 2), dtype=np.uint8)))


@pytest.mark.parametrize("side", [8, 4, 32, 64])
def test_resize_matches_pil_nearest(side):
    m = (np.random.default_rng(side).random((16, 16)) > 0.5).astype(np.uint8)
    oracle = np.asarray(Image.fromarray(m * 255).resize((side, side), Image.NEAREST)) // 255
    out = resize_mask(m, side)
    np.testing.assert_array_equal(out, oracle)
    assert set(np.unique(out)) <= {0, 1}


@pytest.mark.parametrize("h, side", [(16, 24), (16, 5), (7, 4), (3, 2), (5, 3)])
def test_resize_matches_nearest_centre_oracle(h, side):
    m = np.random.default_rng(h * 100 + side).integers(0, 2, (h, h))
    centres = [Fraction(2 * i + 1, 2) * Fraction(h, side) for i in range(side)]
    # nearest input centre; a tie goes to the upper pixel
    idx = [min(range(h), key=lambda j: (abs(Fraction(2 * j + 1, 2) - c), -j)) for c in centres]
    np.testing.assert_array_equal(resize_mask(m, side), m[np.ix_(idx, idx)])


def test_pure_insertion_uses_edit_mask_for_source():
    src = TOY.encode_prompt("a road")
    edit = TOY.encode_prompt("a red road")
    al = align_tokens(src, edit)
    assert al.edited_src_tokens == () and al.edited_edit_tokens == (2,)
    rng = np.random.default_rng(5)
    recs = [_cross(rng.random((2, 256, len(edit))))]
    ms = build_masks([], recs, al)
    np.testing.assert_array_equal(ms.m_src, ms.m_edit)
    assert ms.group_masks.shape == (1, 16, 16)


# ----------------------------------------------------------------- fusion


def _fuse_brute(s_src, s_edit, m_src, m_edit):
    q, k = s_src.shape
    out = np.zeros((q, k))
    me, msrc = m_edit.reshape(-1), m_src.reshape(-1)
    for p in range(q):
        for j in range(k):
            out[p, j] = me[p] * s_edit[p, j] + (1 - msrc[p]) * s_src[p, j]
        if all(out[p, j] == 0 for j in range(k)):
            out[p] = s_edit[p]
    return out


def test_fusion_cases():
    s_src = np.full((4, 4), 0.25)
    s_edit = np.eye(4)
    m_e = np.array([[1, 0], [0, 1]])
    m_s = np.array([[1, 0], [1, 0]])
    raw = fuse_self_attention(s_src, s_edit, m_s, m_e, renormalize=False)
    np.testing.assert_array_equal(raw[0], s_edit[0])  # (1, 1)
    np.testing.assert_array_equal(raw[1], s_src[1])  # (0, 0)
    np.testing.assert_array_equal(raw[2], s_edit[2])  # (0, 1) filled
    np.testing.assert_array_equal(raw[3], s_edit[3] + s_src[3])  # (1, 0) double count
    fused = fuse_self_attention(s_src, s_edit, m_s, m_e)
    np.testing.assert_allclose(fused.sum(-1), 1.0, atol=1e-12)


def test_fusion_all_ones_and_zeros():
    rng = np.random.default_rng(6)
    s_src, s_edit = rng.dirichlet(np.ones(8), 16), rng.dirichlet(np.ones(8), 16)
    ones, zeros = np.ones((4, 4)), np.zeros((4, 4))
    np.testing.assert_array_equal(fuse_self_attention(s_src, s_edit, ones, ones, False), s_edit)
    np.testing.assert_array_equal(fuse_self_attention(s_src, s_edit, zeros, zeros, False), s_src)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fusion_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    s_src, s_edit = rng.dirichlet(np.ones(8), 16), rng.dirichlet(np.ones(8), 16)
    m_s, m_e = rng.integers(0, 2, (4, 4)), rng.integers(0, 2, (4, 4))
    raw = fuse_self_attention(s_src, s_edit, m_s, m_e, renormalize=False)
    np.testing.assert_allclose(raw, _fuse_brute(s_src, s_edit, m_s, m_e), rtol=0, atol=1e-12)
    assert not np.any(np.all(raw == 0, axis=-1))
    np.testing.assert_allclose(fuse_self_attention(s_src, s_edit, m_s, m_e).sum(-1), 1.0, atol=1e-5)


def test_fusion_broadcasts_over_frames_and_heads():
    rng = np.random.default_rng(7)
    s_src, s_edit = rng.dirichlet(np.ones(32), (3, 2, 16)), rng.dirichlet(np.ones(32), (3, 2, 16))
    m_s, m_e = rng.integers(0, 2, (3, 4, 4)), rng.integers(0, 2, (3, 4, 4))
    out = fuse_self_attention(s_src, s_edit, m_s, m_e, renormalize=False)
    for f in range(3):
        for h in range(2):
            np.testing.assert_allclose(out[f, h], _fuse_brute(s_src[f, h], s_edit[f, h], m_s[f], m_e[f]), atol=1e-12)


def test_fusion_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_self_attention(np.ones((16, 4)), np.ones((16, 5)), np.ones((4, 4)), np.ones((4, 4)))
    with pytest.raises(ValueError):
        fuse_self_attention(np.ones((16, 4)), np.ones((16, 4)), np.ones((3, 3)), np.ones((3, 3)))


def test_cross_fusion_extremes():
    rng = np.random.default_rng(8)
    c_src, c_edit = rng.random((16, 5)), rng.random((16, 5))
    ident = {i: i for i in range(5)}
    all_edit = TokenAlignment(np.ones(5, dtype=int), (0, 1, 2, 3, 4), (0, 1, 2, 3, 4), {})
    np.testing.assert_array_equal(fuse_cross_attention(c_src, c_edit, all_edit), c_edit)
    none = TokenAlignment(np.zeros(5, dtype=int), (), (), ident)
    np.testing.assert_array_equal(fuse_cross_attention(c_src, c_edit, none), c_src)


def test_cross_fusion_column_select_with_reindex():
    rng = np.random.default_rng(9)
    c_src, c_edit = rng.random((2, 16, 4)), rng.random((2, 16, 6))
    al = TokenAlignment(np.array([0, 1, 1, 0, 1, 0]), (1,), (1, 2, 4), {0: 0, 2: 3, 3: 5})
    out = fuse_cross_attention(c_src, c_edit, al)
    for j, src_col in [(0, 0), (3, 2), (5, 3)]:
        np.testing.assert_array_equal(out[..., j], c_src[..., src_col])
    for j in (1, 2, 4):
        np.testing.assert_array_equal(out[..., j], c_edit[..., j])


def test_cross_fusion_unmapped_token():
    al = TokenAlignment(np.array([0, 1]), (), (1,), {})
    with pytest.raises(AlignmentError):
        fuse_cross_attention(np.ones((4, 2)), np.ones((4, 2)), al)
