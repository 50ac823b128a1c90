import dataclasses

import numpy as np
import pytest
from scipy import special

from rin import nn
from rin.analysis import count_params
from rin.errors import ConfigError, ShapeError
from rin.model import RIN, ModelConfig, Trace, count_attention_entries, param_shapes
from rin.tensor import Tensor, backward, mean, mul


def attention_oracle(q, kv, heads, p):
    """Per-example, per-head loops over the textbook formula."""
    width = p["wq"].shape[1]
    hd = width // heads
    out = np.zeros(q.shape[:-1] + (width,))
    for b in range(q.shape[0]):
        Q = q[b] @ p["wq"] + p["bq"]
        K = kv[b] @ p["wk"] + p["bk"]
        V = kv[b] @ p["wv"] + p["bv"]
        mixed = np.zeros((q.shape[1], width))
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            scores = Q[:, sl] @ K[:, sl].T / np.sqrt(hd)
            mixed[:, sl] = special.softmax(scores, axis=-1) @ V[:, sl]
        out[b] = mixed @ p["wo"] + p["bo"]
    return out


class TestAttention:
    def test_matches_loop_oracle(self, rng):
        shapes = nn.attention_param_shapes("a", 8, 6)
        p = {name.split(".")[-1]: rng.standard_normal(s) * 0.5 for name, s, _ in shapes}
        params = {f"a.{k}": Tensor(v) for k, v in p.items()}
        q, kv = rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 5, 6))
        out = nn.multihead_attention(Tensor(q), Tensor(kv), 4, params, "a").data
        np.testing.assert_allclose(out, attention_oracle(q, kv, 4, p), atol=1e-12)

    def test_width_must_divide_heads(self, rng):
        params = {n: Tensor(np.zeros(s)) for n, s, _ in nn.attention_param_shapes("a", 6, 6)}
        with pytest.raises(ConfigError, match="divisible"):
            nn.multihead_attention(Tensor(np.zeros((1, 2, 6))), Tensor(np.zeros((1, 2, 6))), 4, params, "a")


class TestModelConfig:
    def test_int_patch_broadcasts(self):
        cfg = ModelConfig(input_shape=(4, 8, 8, 3), patch_size=2, num_blocks=1, layers_per_block=1,
                          num_latents=2, latent_dim=8, interface_dim=8, heads=2)
        assert cfg.patch_size == (2, 2, 2) and cfg.num_tokens == 32 and cfg.patch_volume == 24

    @pytest.mark.parametrize("change, match", [
        ({"patch_size": 3}, "divisible"),
        ({"heads": 3}, "divisible by heads"),
        ({"input_shape": (8, 3)}, "input_shape"),
        ({"num_latents": 0}, "num_latents"),
        ({"context_frames": 1}, "context_frames"),
    ])
    def test_invalid(self, tiny_cfg, change, match):
        with pytest.raises(ConfigError, match=match):
            dataclasses.replace(tiny_cfg, **change)


class TestForward:
    def test_shapes(self, tiny_model, rng):
        eps, latents = tiny_model.forward(rng.standard_normal((3, 8, 8, 3)), np.full(3, 0.5))
        assert eps.shape == (3, 8, 8, 3) and latents.shape == (3, 4, 16)

    def test_wrong_input_shape(self, tiny_model):
        with pytest.raises(ShapeError, match="does not match"):
            tiny_model.forward(np.zeros((1, 4, 4, 3)), [0.5])

    def test_bad_label(self, tiny_model):
        with pytest.raises(ShapeError, match="labels"):
            tiny_model.forward(np.zeros((1, 8, 8, 3)), [0.5], labels=[7])

    def test_init_ignores_previous_latents_bitwise(self, tiny_model, rng):
        x = rng.standard_normal((2, 8, 8, 3))
        a, _ = tiny_model.forward(x, [0.3, 0.7])
        b, _ = tiny_model.forward(x, [0.3, 0.7], prev_latents=rng.standard_normal((2, 4, 16)) * 10)
        np.testing.assert_array_equal(a.data, b.data)

    def test_latent_permutation_equivariance(self, tiny_cfg, rng):
        # latents carry no positions: permuting the learned init rows permutes
        # the returned latents and leaves the prediction unchanged
        model = RIN(tiny_cfg, seed=0, dtype=np.float64)
        x, t = rng.standard_normal((2, 8, 8, 3)), [0.2, 0.9]
        eps, z = model.forward(x, t)
        perm = np.array([2, 0, 3, 1])
        model.params["latents.init"].data = model.params["latents.init"].data[perm]
        eps_p, z_p = model.forward(x, t)
        np.testing.assert_allclose(eps_p.data, eps.data, atol=1e-12)
        np.testing.assert_allclose(z_p.data, z.data[:, perm], atol=1e-12)

    def test_batch_rows_independent(self, tiny_model, rng):
        x = rng.standard_normal((3, 8, 8, 3))
        full, _ = tiny_model.forward(x, [0.1, 0.5, 0.9])
        one, _ = tiny_model.forward(x[1:2], [0.5])
        np.testing.assert_allclose(full.data[1:2], one.data, atol=1e-12)

    def test_video_forward(self, rng):
        cfg = ModelConfig(input_shape=(4, 16, 16, 3), patch_size=(2, 4, 4), num_blocks=1, layers_per_block=1,
                          num_latents=4, latent_dim=16, interface_dim=16, heads=2, context_frames=1)
        eps, _ = RIN(cfg).forward(rng.standard_normal((1, 4, 16, 16, 3)), [0.5])
        assert eps.shape == (1, 4, 16, 16, 3) and cfg.num_tokens == 32

    def test_every_parameter_receives_gradient(self, tiny_model, rng):
        for p in tiny_model.params.values():   # open the zero-initialized gate
            p.data = p.data + 0.05 * rng.standard_normal(p.shape)
        eps, _ = tiny_model.forward(rng.standard_normal((2, 8, 8, 3)), [0.4, 0.6], labels=[0, 3],
                                    prev_latents=rng.standard_normal((2, 4, 16)))
        grads = backward(mean(mul(eps, eps)))
        missing = [k for k, p in tiny_model.params.items() if p not in grads]
        assert missing == []


class TestParameters:
    def test_live_count_matches_closed_form(self, tiny_model, tiny_cfg):
        assert tiny_model.num_params() == count_params(tiny_cfg)

    def test_names_unique(self, tiny_cfg):
        names = [n for n, _, _ in param_shapes(tiny_cfg)]
        assert len(names) == len(set(names))

    def test_self_cond_gate_starts_closed(self, tiny_model):
        assert not tiny_model.params["selfcond.ln.scale"].data.any()
        assert not tiny_model.params["selfcond.ln.bias"].data.any()

    def test_seeded_init_reproducible(self, tiny_cfg):
        a, b = RIN(tiny_cfg, seed=5), RIN(tiny_cfg, seed=5)
        assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


class TestAttentionEntries:
    def test_trace_counts_match_closed_form(self, tiny_model, tiny_cfg, rng):
        trace = Trace()
        tiny_model.forward(rng.standard_normal((1, 8, 8, 3)), [0.5], trace=trace)
        assert trace.entries == count_attention_entries(tiny_cfg)
        kinds = [m[0] for m in trace.maps]
        assert kinds == ["read", "compute", "write"] * tiny_cfg.num_blocks
