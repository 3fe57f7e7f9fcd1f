import math

import numpy as np
import pytest

from edlm import model as M
from edlm import tensor as T
from edlm.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from edlm.errors import ConfigError, FormatError, IntegrityError, NumericError
from edlm.model import EncoderParams, ModelConfig
from edlm.rng import SplitRng


def tiny_config(**overrides):
    base = dict(vocab_size=20, hidden_size=8, num_layers=1, num_heads=1, ffn_size=16,
                max_positions=12, dropout_rate=0.0, num_labels=0, tie_mlm_decoder=True)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# scripted float64 reference forward pass (loop-based, independent of edlm.tensor)
# ---------------------------------------------------------------------------

def ref_layer_norm(x, gain, bias, eps=1e-12):
    out = np.empty_like(x)
    for r in range(x.shape[0]):
        mu = x[r].mean()
        var = ((x[r] - mu) ** 2).mean()
        out[r] = (x[r] - mu) / math.sqrt(var + eps) * gain + bias
    return out

def ref_gelu(x):
    out = np.empty_like(x)
    for idx, val in np.ndenumerate(x):
        out[idx] = val * 0.5 * (1.0 + math.erf(val / math.sqrt(2.0)))
    return out

def ref_softmax_rows(x):
    out = np.empty_like(x)
    for r in range(x.shape[0]):
        e = np.exp(x[r] - x[r].max())
        out[r] = e / e.sum()
    return out

def ref_forward_one_layer_one_head(ids, mask, weights, eps=1e-12):
    """Single sequence, single layer, single head, float64 throughout."""
    length = len(ids)
    w = weights
    x = w["embeddings.token"][ids] + w["embeddings.position"][:length] + w["embeddings.segment"][0]
    x = ref_layer_norm(x, w["embeddings.norm.gain"], w["embeddings.norm.bias"], eps)

    q = x @ w["layer0.attn.query.weight"] + w["layer0.attn.query.bias"]
    k = x @ w["layer0.attn.key.weight"] + w["layer0.attn.key.bias"]
    v = x @ w["layer0.attn.value.weight"] + w["layer0.attn.value.bias"]
    d = q.shape[1]
    scores = q @ k.T / math.sqrt(d) + (1.0 - mask)[None, :] * -1e9
    ctx = ref_softmax_rows(scores) @ v
    attn_out = ctx @ w["layer0.attn.output.weight"] + w["layer0.attn.output.bias"]
    x = ref_layer_norm(x + attn_out, w["layer0.attn.norm.gain"], w["layer0.attn.norm.bias"], eps)

    inner = ref_gelu(x @ w["layer0.ffn.inner.weight"] + w["layer0.ffn.inner.bias"])
    ffn = inner @ w["layer0.ffn.outer.weight"] + w["layer0.ffn.outer.bias"]
    x = ref_layer_norm(x + ffn, w["layer0.ffn.norm.gain"], w["layer0.ffn.norm.bias"], eps)

    t = ref_gelu(x @ w["mlm.transform.weight"] + w["mlm.transform.bias"])
    t = ref_layer_norm(t, w["mlm.norm.gain"], w["mlm.norm.bias"], eps)
    logits = t @ w["embeddings.token"].T + w["mlm.decoder.bias"]
    return x, logits


class TestAttention:
    def test_single_unmasked_position_returns_its_value_row(self):
        rng = np.random.default_rng(0)
        q = T.Tensor(rng.normal(size=(3, 4)))
        k = T.Tensor(rng.normal(size=(3, 4)))
        v = T.Tensor(rng.normal(size=(3, 4)))
        out = M.attention(q, k, v, np.array([0, 1, 0]))
        assert np.allclose(out.data, np.broadcast_to(v.data[1], (3, 4)), atol=1e-6)

    def test_identical_keys_give_mean_of_unmasked_values(self):
        rng = np.random.default_rng(1)
        q = T.Tensor(rng.normal(size=(2, 4)))
        k = T.Tensor(np.broadcast_to(rng.normal(size=4), (3, 4)).copy())
        v = T.Tensor(rng.normal(size=(3, 4)))
        out = M.attention(q, k, v, np.array([1, 1, 0]))
        assert np.allclose(out.data, np.broadcast_to(v.data[:2].mean(axis=0), (2, 4)), atol=1e-6)

    def test_masked_position_weight_below_1e6(self):
        rng = np.random.default_rng(2)
        k = T.Tensor(rng.normal(size=(3, 4)))
        v = T.Tensor(np.eye(3, 4))
        q = T.Tensor(100.0 * k.data[2:3])  # would attend to position 2 if unmasked
        out = M.attention(q, k, v, np.array([1, 1, 0]))
        assert out.data[0, 2] < 1e-6

    def test_fully_masked_row_raises(self):
        x = T.Tensor(np.ones((2, 4)))
        with pytest.raises(NumericError):
            M.attention(x, x, x, np.zeros(2))

    def test_weights_sum_to_one_over_unmasked(self):
        rng = np.random.default_rng(3)
        q = T.Tensor(rng.normal(size=(4, 8)))
        k = T.Tensor(rng.normal(size=(4, 8)))
        mask = np.array([1, 1, 0, 1])
        scores = T.matmul(q, T.transpose(k, (1, 0))) * (1 / math.sqrt(8))
        probs = T.softmax(scores + T.Tensor((1 - mask) * M.MASK_BIAS), axis=-1)
        assert np.allclose(probs.data.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(probs.data[:, 2] < 1e-6)


class TestForwardEncoder:
    def test_eval_mode_is_deterministic(self):
        cfg = tiny_config(num_layers=2, num_heads=2)
        params = EncoderParams.init(cfg, SplitRng(0))
        ids = np.array([[2, 7, 9, 3, 0, 0]])
        mask = np.array([[1, 1, 1, 1, 0, 0]])
        h1 = M.forward_encoder(ids, mask, params)
        h2 = M.forward_encoder(ids, mask, params)
        assert np.array_equal(h1.data, h2.data)

    def test_pad_content_does_not_affect_unmasked_outputs(self):
        cfg = tiny_config(num_layers=2, num_heads=2)
        params = EncoderParams.init(cfg, SplitRng(0))
        mask = np.array([[1, 1, 1, 1, 0, 0]])
        a = M.forward_encoder(np.array([[2, 7, 9, 3, 0, 0]]), mask, params)
        b = M.forward_encoder(np.array([[2, 7, 9, 3, 11, 5]]), mask, params)
        assert np.array_equal(a.data[0, :4], b.data[0, :4])

    def test_matches_scripted_float64_oracle(self):
        cfg = tiny_config()
        params = EncoderParams.init(cfg, SplitRng(42), dtype=np.float64)
        ids = np.array([2, 6, 13, 7, 3, 0, 0])
        mask = np.array([1, 1, 1, 1, 1, 0, 0])
        hidden = M.forward_encoder(ids[None, :], mask[None, :], params)
        logits = M.mlm_logits(hidden, params)
        weights = {n: t.data for n, t in params.named()}
        ref_hidden, ref_logits = ref_forward_one_layer_one_head(ids, mask.astype(np.float64), weights)
        assert np.max(np.abs(hidden.data[0] - ref_hidden)) <= 1e-5
        assert np.max(np.abs(logits.data[0] - ref_logits)) <= 1e-5

    def test_oversize_sequence_rejected(self):
        cfg = tiny_config()
        params = EncoderParams.init(cfg, SplitRng(0))
        ids = np.zeros((1, cfg.max_positions + 1), dtype=np.int64)
        ids[0, 0] = 2
        from edlm.errors import InputError

        with pytest.raises(InputError):
            M.forward_encoder(ids, np.ones_like(ids), params)

    def test_dropout_requires_rng_in_train_mode(self):
        cfg = tiny_config(dropout_rate=0.1)
        params = EncoderParams.init(cfg, SplitRng(0))
        with pytest.raises(ConfigError):
            M.forward_encoder(np.array([[2, 3]]), np.ones((1, 2), dtype=int), params, train_mode=True)


class TestHeads:
    def test_tied_decoder_shares_storage(self):
        cfg = tiny_config(tie_mlm_decoder=True)
        params = EncoderParams.init(cfg, SplitRng(0))
        assert "mlm.decoder.weight" not in params
        dec = params.decoder_matrix()
        assert np.shares_memory(dec.data.base if dec.data.base is not None else dec.data,
                                params["embeddings.token"].data)

    def test_untied_decoder_is_separate(self):
        cfg = tiny_config(tie_mlm_decoder=False)
        params = EncoderParams.init(cfg, SplitRng(0))
        assert "mlm.decoder.weight" in params

    def test_mlm_logits_shape(self):
        cfg = tiny_config(num_layers=2, num_heads=2)
        params = EncoderParams.init(cfg, SplitRng(1))
        hidden = M.forward_encoder(np.array([[2, 3, 0], [2, 5, 3]]), np.array([[1, 1, 0], [1, 1, 1]]), params)
        assert M.mlm_logits(hidden, params).data.shape == (2, 3, cfg.vocab_size)

    def test_cls_logits_shape_and_degenerate_head(self):
        cfg = tiny_config(num_labels=2)
        params = EncoderParams.init(cfg, SplitRng(2))
        hidden = M.forward_encoder(np.array([[2, 3, 0]]), np.array([[1, 1, 0]]), params)
        out = M.cls_logits(hidden, params, num_labels=2)
        assert out.data.shape == (1, 2)
        params["classifier.weight"].data[...] = 0.0
        params["classifier.bias"].data[...] = np.array([0.3, -0.7], dtype=np.float32)
        out = M.cls_logits(hidden, params)
        assert np.allclose(out.data, [[0.3, -0.7]], atol=1e-7)

    def test_classifier_gradient_matches_finite_differences(self):
        cfg = tiny_config(num_labels=2)
        params = EncoderParams.init(cfg, SplitRng(3), dtype=np.float64)
        ids = np.array([[2, 4, 3]])
        mask = np.array([[1, 1, 1]])
        golds = np.array([1])

        def loss_value():
            with T.no_grad():
                hidden = M.forward_encoder(ids, mask, params)
                return T.cross_entropy(M.cls_logits(hidden, params), golds).item()

        hidden = M.forward_encoder(ids, mask, params)
        loss = T.cross_entropy(M.cls_logits(hidden, params), golds)
        T.backward(loss)
        w = params["classifier.weight"]
        h = 1e-4
        for idx in np.ndindex(w.data.shape):
            orig = w.data[idx]
            w.data[idx] = orig + h
            fp = loss_value()
            w.data[idx] = orig - h
            fm = loss_value()
            w.data[idx] = orig
            num = (fp - fm) / (2 * h)
            assert abs(w.grad.data[idx] - num) <= 1e-4 * max(abs(num), abs(w.grad.data[idx]), 1e-3)

    def test_cls_without_head_rejected(self):
        cfg = tiny_config(num_labels=0)
        params = EncoderParams.init(cfg, SplitRng(0))
        hidden = M.forward_encoder(np.array([[2, 3]]), np.ones((1, 2), dtype=int), params)
        with pytest.raises(ConfigError):
            M.cls_logits(hidden, params)


class TestCountParameters:
    def test_per_layer_block_is_600_for_hidden8_ffn16(self):
        # QKV+O: 4*(8*8+8)=288; two LNs: 32; FFN: 8*16+16+16*8+8=280.
        cfg = tiny_config(hidden_size=8, ffn_size=16)
        assert M.count_block_parameters(cfg) == 600

    def test_halving_layers_halves_block_subtotal(self):
        c4 = tiny_config(num_layers=4)
        c2 = tiny_config(num_layers=2)
        assert M.count_block_parameters(c2) * 2 == M.count_block_parameters(c4)

    def test_count_equals_checkpoint_tensor_sizes(self, tmp_path):
        cfg = tiny_config(num_layers=2, num_heads=2, num_labels=2, tie_mlm_decoder=False)
        params = EncoderParams.init(cfg, SplitRng(5))
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, cfg, "base", path)
        loaded = load_checkpoint(path)
        total = sum(t.data.size for _, t in loaded.params.named())
        assert M.count_parameters(cfg) == total

    def test_divisibility_validated(self):
        with pytest.raises(ConfigError):
            tiny_config(hidden_size=10, num_heads=4)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = tiny_config(num_layers=2, num_heads=2)
        params = EncoderParams.init(cfg, SplitRng(7))
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, cfg, "base", path)
        loaded = load_checkpoint(path)
        assert loaded.provenance == "base"
        assert loaded.config == cfg
        for name, t in params.named():
            assert np.array_equal(loaded.params[name].data, t.data), name

    def test_truncated_file_rejected(self, tmp_path):
        cfg = tiny_config()
        params = EncoderParams.init(cfg, SplitRng(8))
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, cfg, "base", path)
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(FormatError):
            load_checkpoint(clipped)

    def test_bad_magic_and_version(self, tmp_path):
        cfg = tiny_config()
        params = EncoderParams.init(cfg, SplitRng(9))
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, cfg, "base", path)
        payload = bytearray(path.read_bytes())
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"XXXX" + bytes(payload[4:]))
        with pytest.raises(FormatError):
            load_checkpoint(bad)
        payload[4:8] = (99).to_bytes(4, "little")
        bad.write_bytes(bytes(payload))
        with pytest.raises(FormatError):
            load_checkpoint(bad)

    def test_corrupted_shape_table_rejected(self, tmp_path):
        cfg = tiny_config()
        params = EncoderParams.init(cfg, SplitRng(10))
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, cfg, "base", path)
        payload = bytearray(path.read_bytes())
        name = b"embeddings.token"
        pos = payload.find(name) + len(name) + 1  # first dim of the first tensor
        payload[pos:pos + 4] = (9999).to_bytes(4, "little")
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(bytes(payload))
        with pytest.raises(IntegrityError):
            load_checkpoint(bad)

    def test_provenance_preserved(self, tmp_path):
        cfg = tiny_config()
        params = EncoderParams.init(cfg, SplitRng(11))
        path = tmp_path / "m.ckpt"
        save_checkpoint(params, cfg, "fine-tuned:urgency", path)
        assert load_checkpoint(path).provenance == "fine-tuned:urgency"
