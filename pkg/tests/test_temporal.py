import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusedit.denoiser.base import attention
from fusedit.temporal import (
    FrameBatchLayout,
    KeyFramePolicy,
    key_frame_indices,
    select_key_frame,
    spatio_temporal_attention,
    with_key_frame,
)

ZI = np.array([[0.5, -0.2], [1.0, 0.3]])
ZK = np.array([[-0.4, 0.8], [0.2, 0.1]])
WQ = np.array([[1.0, 0.5], [-0.3, 0.7]])
WK = np.array([[0.2, -0.9], [0.6, 0.4]])
WV = np.array([[1.1, 0.0], [0.3, -0.5]])
# 30-digit mpmath evaluation of attention(zi WQ, [zi; zk] WK, [zi; zk] WV)
ST_ORACLE = np.array([[0.41261714492846934825, -0.14255105426704587499], [0.28925748260717225519, -0.18753504242228984398]])


def test_key_frame_examples():
    assert select_key_frame(5, "previous", 8) == 4
    assert select_key_frame(0, "previous", 8) == 0
    assert select_key_frame(2, "middle", 8) == 4
    assert select_key_frame(7, "next", 8) == 7
    assert select_key_frame(3, KeyFramePolicy.SELF, 8) == 3
    assert select_key_frame(0, "middle", 1) == 0
    with pytest.raises(IndexError):
        select_key_frame(8, "previous", 8)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.sampled_from(list(KeyFramePolicy)))
def test_key_frames_always_valid(n, policy):
    ks = FrameBatchLayout(n, 16, policy).key_frames()
    assert ks.shape == (n,) and np.all((0 <= ks) & (ks < n))


def test_with_key_frame_layout():
    tokens = np.arange(3 * 2 * 1, dtype=float).reshape(3, 2, 1)
    out = with_key_frame(tokens, key_frame_indices(3, "previous"))
    np.testing.assert_array_equal(out[1, 2:], tokens[0])
    np.testing.assert_array_equal(out[0, 2:], tokens[0])


def test_oracle_two_tokens():
    out, probs = spatio_temporal_attention(ZI, ZK, WQ, WK, WV)
    assert probs.shape == (1, 2, 4)
    np.testing.assert_allclose(out, ST_ORACLE, rtol=1e-14)


@pytest.mark.parametrize("hw", [4, 16, 64, 256])
def test_shape_law(hw):
    rng = np.random.default_rng(hw)
    z_i, z_k = rng.standard_normal((2, hw, 8))
    w = rng.standard_normal((3, 8, 8))
    out, probs = spatio_temporal_attention(z_i, z_k, *w, heads=2)
    assert out.shape == (hw, 8)
    assert probs.shape == (2, hw, 2 * hw)


@pytest.mark.parametrize("hw", [16, 64, 256])
def test_self_duplication_equals_spatial(hw):
    rng = np.random.default_rng(hw + 1)
    z = rng.standard_normal((hw, 8))
    wq, wk, wv = rng.standard_normal((3, 8, 8))
    out, _ = spatio_temporal_attention(z, z, wq, wk, wv)
    np.testing.assert_allclose(out, attention(z @ wq, z @ wk, z @ wv), atol=1e-6)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        spatio_temporal_attention(np.ones((4, 2)), np.ones((3, 2)), WQ, WK, WV)
