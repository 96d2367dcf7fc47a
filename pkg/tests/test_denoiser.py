import numpy as np
import pytest

from fusedit.denoiser import Controller, ToyConfig, ToyDenoiser, make_backend
from fusedit.denoiser.base import AttentionKind, LayerAddress, Stage, attention, attention_probs
from fusedit.errors import ConfigurationError, NumericError

# sigmoid(1/sqrt(2)) at 30 digits (mpmath)
ATTN_ORACLE = 0.6697615493266569256167949

F, C, S = 2, 12, 16


@pytest.fixture(scope="module")
def toy():
    return ToyDenoiser()


@pytest.fixture(scope="module")
def prompt(toy):
    return toy.encode_prompt("a silver jeep on a road")


def _latents(seed=0):
    return np.random.default_rng(seed).standard_normal((F, C, S, S))


def test_attention_examples():
    assert attention(np.array([[0.7]]), np.array([[0.7]]), np.array([[3.0]]))[0, 0] == 3.0
    out = attention(np.array([[1.0]]), np.array([[2.0], [2.0]]), np.array([[1.0], [3.0]]))
    assert out[0, 0] == pytest.approx(2.0, abs=1e-15)
    out = attention(np.array([[1.0, 0.0]]), np.eye(2), np.array([[1.0], [0.0]]), scale=1 / np.sqrt(2))
    assert out[0, 0] == pytest.approx(ATTN_ORACLE, rel=1e-14)
    with pytest.raises(ValueError):
        attention_probs(np.ones((2, 3)), np.ones((2, 4)))


def test_zero_latent_is_deterministic(toy, prompt):
    z = np.zeros((F, C, S, S))
    a, _ = toy.predict_noise(z, prompt, 500)
    b, _ = ToyDenoiser().predict_noise(z, prompt, 500)
    assert a.tobytes() == b.tobytes()
    assert a.shape == z.shape


def test_noop_controller_is_transparent(toy, prompt):
    z = _latents()
    a, _ = toy.predict_noise(z, prompt, 300)
    b, _ = toy.predict_noise(z, prompt, 300, controller=Controller())
    assert a.tobytes() == b.tobytes()


class _ZeroValues(Controller):
    def self_attention_kv(self, address, queries, keys, values):
        return keys, np.zeros_like(values)


def test_zero_values_zero_self_attention_output(toy, prompt):
    _, cap = toy.predict_noise(_latents(1), prompt, 300, controller=_ZeroValues(), capture="all")
    recs = cap.records(AttentionKind.SELF)
    assert len(recs) == len(toy.layers)
    assert all(not r.output.any() for r in recs)


def test_capture_subset_matches_taxonomy(toy, prompt):
    _, cap = toy.predict_noise(_latents(2), prompt, 300, capture=[4, 7, 11])
    assert sorted(cap.residual_features) == [
        LayerAddress(Stage.DECODER, 4, S // 4),
        LayerAddress(Stage.DECODER, 7, S // 2),
        LayerAddress(Stage.DECODER, 11, S // 2),
    ]
    for addr, f in cap.residual_features.items():
        assert f.shape == (F, addr.resolution**2, toy.config.hidden)


def test_capture_records_are_distributions(toy, prompt):
    _, cap = toy.predict_noise(_latents(3), prompt, 300, capture="decoder")
    assert len(cap.residual_features) == 12
    for rec in cap.attention:
        assert np.all(rec.probs >= 0)
        np.testing.assert_allclose(rec.probs.sum(-1), 1.0, atol=1e-5)
        q = rec.address.resolution**2
        expect = len(prompt) if rec.kind is AttentionKind.CROSS else 2 * q
        assert rec.probs.shape == (F, toy.config.heads, q, expect)


def test_unknown_capture_layer(toy, prompt):
    with pytest.raises(ConfigurationError):
        toy.predict_noise(_latents(), prompt, 300, capture=[40])
    with pytest.raises(ConfigurationError):
        toy.predict_noise(_latents(), prompt, 300, capture=[LayerAddress(Stage.DECODER, 0, 99)])


def test_layer_lookup(toy):
    toy.configure(32)
    assert LayerAddress.find("decoder.04", toy.layers) == LayerAddress(Stage.DECODER, 4, 8)
    assert LayerAddress.find("7", toy.layers).resolution == 16
    with pytest.raises(ConfigurationError):
        LayerAddress.find("decoder.40", toy.layers)


def test_coarse_layers_are_lowest_resolution(toy):
    dec = toy.layers_for(32)[3:]
    assert [a.index for a in dec] == list(range(12))
    assert {a.resolution for a in dec[:6]} == {8} and {a.resolution for a in dec[6:]} == {16}


def test_nonfinite_activation_names_layer(toy, prompt):
    class Blowup(Controller):
        def residual(self, address, features):
            return features * np.inf if address.stage is Stage.BOTTLENECK else features

    with pytest.raises(NumericError, match="bottleneck.00"):
        toy.predict_noise(_latents(), prompt, 300, controller=Blowup())


def test_jvp_matches_central_difference(toy, prompt):
    z = _latents(4)
    d = np.random.default_rng(5).standard_normal(z.shape)
    _, jvp = toy.jvp(z, prompt, 400, d)
    h = 1e-5
    plus, _ = toy.predict_noise(z + h * d, prompt, 400)
    minus, _ = toy.predict_noise(z - h * d, prompt, 400)
    fd = (plus - minus) / (2 * h)
    assert np.linalg.norm(fd - jvp) / np.linalg.norm(jvp) < 1e-4


def test_prompt_encoding(toy):
    with pytest.raises(ValueError):
        toy.encode_prompt("")
    a, b = toy.encode_prompt("a silver jeep"), toy.encode_prompt("a silver jeep")
    assert np.array_equal(a.embedding, b.embedding)
    span = a.word_spans[2]
    assert len(span) > 0 and "".join(a.token_strings[i] for i in span) == "jeep"
    stops = [r.stop for r in a.word_spans.values()]
    starts = [r.start for r in a.word_spans.values()]
    assert starts[1:] == stops[:-1]


def test_long_prompt_is_truncated_with_warning(toy):
    with pytest.warns(UserWarning):
        p = toy.encode_prompt(" ".join(["word"] * 100))
    assert len(p) == 77 and p.metadata["truncated"]


def test_autoencoder_is_exact(toy):
    x = np.random.default_rng(6).random((3, 32, 32, 3))
    np.testing.assert_array_equal(toy.decode_latents(toy.encode_frames(x)), x)
    assert not toy.encode_frames(np.zeros((1, 8, 8, 3))).any()
    with pytest.raises(ValueError):
        toy.encode_frames(np.zeros((1, 7, 8, 3)))


def test_make_backend():
    assert isinstance(make_backend("toy"), ToyDenoiser)
    assert make_backend("toy").backend_id == ToyDenoiser(ToyConfig()).backend_id
    with pytest.raises(ConfigurationError):
        make_backend("nope")
