from __future__ import annotations

import numpy as np
import pytest

from momentloc import autodiff as ad
from momentloc.autodiff import AllocationMeter, Tensor
from momentloc.core import Span
from momentloc.model import (
    Adam,
    LocalizationModel,
    ModelConfig,
    load_checkpoint,
    predict_span,
    save_checkpoint,
)
from momentloc.sampling import make_bucket_plan


def tiny_cfg(**kw):
    base = dict(d_m=32, loc_layers=2, loc_heads=2, text_layers=2, text_heads=2,
                bucket_budget=8, vocab=16, d_v=8, max_text_len=8, max_video_len=64)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture()
def model():
    return LocalizationModel(tiny_cfg(), np.random.default_rng(0))


class TestConfig:
    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            tiny_cfg(d_m=30, loc_heads=4)

    def test_counts_positive(self):
        with pytest.raises(ValueError):
            tiny_cfg(loc_layers=0)

    def test_vocab_must_cover_markers(self):
        with pytest.raises(ValueError):
            tiny_cfg(vocab=2)


class TestTextEncode:
    def test_framing_adds_two_positions(self, model):
        states, attn = model.text_encode([4, 5, 6])
        assert states.shape == (5, 32)
        assert len(attn) == 2
        assert attn[0].shape == (2, 5, 5)

    def test_width_is_hidden_dim(self, model):
        states, _ = model.text_encode([4])
        assert states.shape == (3, 32)

    def test_overlong_query_rejected(self, model):
        with pytest.raises(ValueError):
            model.text_encode(list(range(2, 12)))

    def test_unknown_token_rejected(self, model):
        with pytest.raises(ValueError):
            model.text_encode([99])

    def test_permutation_equivariance_without_positions(self):
        cfg = tiny_cfg()
        m = LocalizationModel(cfg, np.random.default_rng(3))
        m.params["text_pos"] = Tensor(np.zeros(m.params["text_pos"].shape), requires_grad=True)
        a, _ = m.text_encode([4, 9])
        b, _ = m.text_encode([9, 4])
        # swapping the two content tokens permutes the two content outputs
        assert np.allclose(a.values[1], b.values[2], atol=1e-12)
        assert np.allclose(a.values[2], b.values[1], atol=1e-12)
        assert np.allclose(a.values[0], b.values[0], atol=1e-12)


class TestLocalize:
    def test_output_shapes_follow_rows(self, model):
        rng = np.random.default_rng(1)
        for v in (3, 8):
            out = model.forward([4, 5], rng.standard_normal((v, 8)))
            assert out.start_probs.shape == (v,)
            assert out.end_probs.shape == (v,)
            assert out.joint_states.shape == (4 + v, 32)
            assert all(a.shape == (2, 4 + v, 4 + v) for a in out.attention)

    def test_distributions_are_valid(self, model):
        rng = np.random.default_rng(2)
        out = model.forward([4, 5, 6], rng.standard_normal((8, 8)))
        for probs in (out.start_probs.values, out.end_probs.values):
            assert probs.min() >= 0
            assert probs.sum() == pytest.approx(1.0, abs=1e-6)

    def test_attention_rows_stochastic(self, model):
        rng = np.random.default_rng(3)
        out = model.forward([4, 5], rng.standard_normal((6, 8)))
        for a in out.attention + out.text_attention:
            sums = a.values.sum(axis=-1)
            assert np.abs(sums - 1.0).max() < 1e-6

    def test_zero_weights_give_uniform_heads(self):
        cfg = tiny_cfg()
        m = LocalizationModel(cfg, np.random.default_rng(0))
        for name, p in m.params.items():
            m.params[name] = Tensor(np.zeros(p.shape), requires_grad=True)
        out = m.forward([4], np.random.default_rng(1).standard_normal((8, 8)))
        assert np.allclose(out.start_probs.values, 1 / 8, atol=1e-12)
        assert np.allclose(out.end_probs.values, 1 / 8, atol=1e-12)

    def test_width_mismatch_rejected(self, model):
        with pytest.raises(ValueError):
            model.localize(model.text_encode([4])[0], np.zeros((4, 5)))

    def test_row_cap_enforced(self, model):
        with pytest.raises(ValueError):
            model.forward([4], np.zeros((65, 8)))

    def test_deterministic_function_of_inputs(self, model):
        rng = np.random.default_rng(5)
        rows = rng.standard_normal((8, 8))
        o1 = model.forward([4, 5], rows)
        o2 = model.forward([4, 5], rows.copy())
        assert np.array_equal(o1.start_probs.values, o2.start_probs.values)
        assert np.array_equal(o1.joint_states.values, o2.joint_states.values)

    def test_unsampled_rows_beyond_budget_accepted(self, model):
        # memory benchmarking feeds unsampled sequences longer than b
        out = model.forward([4], np.random.default_rng(0).standard_normal((40, 8)))
        assert out.num_positions == 40


class TestPredictSpan:
    def mk_out(self, start_probs, end_probs):
        class Out:
            pass

        out = Out()
        out.start_probs = Tensor(np.asarray(start_probs, dtype=float))
        out.end_probs = Tensor(np.asarray(end_probs, dtype=float))
        out.num_positions = len(start_probs)
        return out

    def one_hot(self, k, n):
        v = np.zeros(n)
        v[k - 1] = 1.0
        return v

    def test_delta_masses(self):
        out = self.mk_out(self.one_hot(3, 10), self.one_hot(7, 10))
        span = predict_span(out, make_bucket_plan(10, 10), 100.0)
        assert span == Span(20.0, 70.0)

    def test_flipped_deltas_swapped(self):
        out = self.mk_out(self.one_hot(7, 10), self.one_hot(3, 10))
        span = predict_span(out, make_bucket_plan(10, 10), 100.0)
        assert span == Span(20.0, 70.0)

    def test_uniform_ties_break_to_first_bucket(self):
        out = self.mk_out(np.full(10, 0.1), np.full(10, 0.1))
        span = predict_span(out, 10, 100.0)
        assert span == Span(0.0, 10.0)

    def test_position_count_must_match(self):
        out = self.mk_out(self.one_hot(1, 5), self.one_hot(2, 5))
        with pytest.raises(ValueError):
            predict_span(out, make_bucket_plan(10, 10), 100.0)


class TestTrainStepAndAdam:
    def loss_fn(self, model, rows, tokens=(4, 5)):
        from momentloc.losses import kl_loss, make_soft_labels, total_loss

        out = model.forward(list(tokens), rows)
        v = out.num_positions
        kl_s = kl_loss(out.start_probs, make_soft_labels(2, v, 1))
        kl_e = kl_loss(out.end_probs, make_soft_labels(6, v, 1))
        return total_loss(kl_s, kl_e, Tensor(0.0), Tensor(0.0))

    def test_loss_finite_at_random_init(self, model):
        rows = np.random.default_rng(0).standard_normal((8, 8))
        assert np.isfinite(self.loss_fn(model, rows).item())

    def test_one_step_reduces_loss_on_same_batch(self):
        wins = 0
        for seed in range(10):
            cfg = tiny_cfg()
            m = LocalizationModel(cfg, np.random.default_rng(seed))
            rows = np.random.default_rng(100 + seed).standard_normal((8, 8))
            opt = Adam(m.params, lr=1e-3)
            before = self.loss_fn(m, rows).item()
            opt.zero_grad()
            ad.backward(self.loss_fn(m, rows))
            opt.step()
            after = self.loss_fn(m, rows).item()
            wins += after < before
        assert wins >= 9

    def test_distributions_stay_valid_after_updates(self):
        cfg = tiny_cfg()
        m = LocalizationModel(cfg, np.random.default_rng(0))
        rows = np.random.default_rng(1).standard_normal((8, 8))
        opt = Adam(m.params, lr=1e-2)
        for _ in range(20):
            opt.zero_grad()
            ad.backward(self.loss_fn(m, rows))
            opt.step()
        out = m.forward([4, 5], rows)
        assert out.start_probs.values.min() >= 0
        assert out.start_probs.values.sum() == pytest.approx(1.0, abs=1e-6)

    def test_total_loss_grad_check_through_model(self):
        cfg = tiny_cfg()
        m = LocalizationModel(cfg, np.random.default_rng(0), init_scale=0.25)
        rows = np.random.default_rng(1).standard_normal((8, 8))
        vin = Tensor(rows, requires_grad=True)
        err = ad.grad_check(lambda t: self.loss_fn(m, t), vin, max_coords=24)
        assert err < 1e-4


class TestMemoryShapeIndependence:
    def test_peak_depends_on_sampled_rows_not_source_length(self):
        cfg = tiny_cfg()
        rng = np.random.default_rng(0)
        peaks = []
        for n in (160, 1600):  # 10x longer source video
            from momentloc.core import FeatureSequence
            from momentloc.sampling import sbfs_sample

            seq = FeatureSequence(np.random.default_rng(1).standard_normal((n, 8)), 25.0, n * 16)
            plan = make_bucket_plan(n, 8)
            rows = sbfs_sample(seq, plan, rng).features
            meter = AllocationMeter()
            with meter:
                m = LocalizationModel(cfg, np.random.default_rng(0))
                m.forward([4, 5, 6, 7, 8, 9], rows)
            peaks.append(meter.peak)
        assert peaks[0] == peaks[1]


class TestCheckpoint:
    def test_round_trip_bit_exact(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.cfg == model.cfg
        assert set(loaded.params) == set(model.params)
        for name, p in model.params.items():
            assert np.array_equal(loaded.params[name].values, p.values), name
        rows = np.random.default_rng(3).standard_normal((8, 8))
        a = model.forward([4], rows).start_probs.values
        b = loaded.forward([4], rows).start_probs.values
        assert np.array_equal(a, b)

    def test_mismatch_names_the_field(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        other = tiny_cfg(d_m=64, loc_heads=4)
        with pytest.raises(ValueError, match="d_m"):
            load_checkpoint(path, expect_cfg=other)

    def test_bad_magic_rejected(self, model, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_float32_round_trip(self, tmp_path):
        cfg = tiny_cfg(dtype="float32")
        m = LocalizationModel(cfg, np.random.default_rng(0))
        path = tmp_path / "m32.ckpt"
        save_checkpoint(path, m)
        loaded = load_checkpoint(path)
        assert loaded.cfg.dtype == "float32"
        for name, p in m.params.items():
            assert np.array_equal(loaded.params[name].values, p.values), name
