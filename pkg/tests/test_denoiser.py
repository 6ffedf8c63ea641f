from pathlib import Path

import numpy as np
import pytest

from regionstitch import (
    DenoiserConfig,
    Grid2D,
    LayerKV,
    SeededRng,
    build_denoiser,
    gaussian,
    preset_config,
    refresh_kv_cache,
    write_sgrd,
)
from regionstitch.denoiser import timestep_embedding

from conftest import micro_config

DATA_DIR = Path(__file__).parent / "data"


def reference_masked_forward(model, latent_rows, indices, prev_kv, t):
    """Independent masked-forward oracle: plain numpy/BLAS ops, full attention
    over fresh rows scattered into the cached context."""
    cfg = model.config
    idx = np.asarray(indices)

    def ln(x):
        mean = x.mean(axis=1, keepdims=True)
        c = x - mean
        return c / np.sqrt((c * c).mean(axis=1, keepdims=True) + np.float32(1e-5))

    def gelu(x):
        return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))

    x = latent_rows @ model.w_in + model.pos_emb[idx] + timestep_embedding(t, cfg.model_dim)
    hd = cfg.model_dim // cfg.heads
    for i, blk in enumerate(model.blocks):
        h = ln(x)
        q, k, v = h @ blk["q"], h @ blk["k"], h @ blk["v"]
        k_full = prev_kv[i].keys.data.copy()
        v_full = prev_kv[i].values.data.copy()
        k_full[idx] = k
        v_full[idx] = v
        heads_out = []
        for hh in range(cfg.heads):
            sl = slice(hh * hd, (hh + 1) * hd)
            scores = (q[:, sl] @ k_full[:, sl].T) / np.sqrt(hd)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            heads_out.append((e / e.sum(axis=1, keepdims=True)) @ v_full[:, sl])
        x = x + np.concatenate(heads_out, axis=1) @ blk["o"]
        x = x + gelu(ln(x) @ blk["ff1"]) @ blk["ff2"]
    return ln(x) @ model.w_out


class TestConfig:
    def test_dim_not_divisible_by_heads_rejected(self):
        with pytest.raises(ValueError, match="model_dim"):
            DenoiserConfig(layers=2, heads=4, model_dim=65, tokens=16, channels=4, weight_seed=1)

    def test_tokens_must_be_square(self):
        with pytest.raises(ValueError, match="tokens"):
            DenoiserConfig(layers=2, heads=4, model_dim=64, tokens=15, channels=4, weight_seed=1)

    def test_zero_layers_rejected(self):
        with pytest.raises(ValueError, match="layers"):
            DenoiserConfig(layers=0, heads=4, model_dim=64, tokens=16, channels=4, weight_seed=1)

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="preset"):
            preset_config("medium", 16, 4, 1)

    def test_large_preset_strictly_bigger(self):
        large = preset_config("large", 16, 4, 1)
        small = preset_config("small", 16, 4, 1)
        assert large.layers > small.layers
        assert large.model_dim > small.model_dim


class TestBuild:
    def test_same_config_bitwise_identical_weights(self, tiny_configs):
        large, _ = tiny_configs
        a, b = build_denoiser(large), build_denoiser(large)
        for wa, wb in zip(a.all_weights(), b.all_weights()):
            assert np.array_equal(wa, wb)

    def test_weight_seed_changes_weights(self):
        a = build_denoiser(micro_config(1))
        b = build_denoiser(micro_config(2))
        assert not np.array_equal(a.w_in, b.w_in)

    def test_large_preset_slower_per_step(self, tiny_models):
        import time

        large, small = tiny_models
        latent = gaussian(SeededRng(3), 16, 4)
        for model in (large, small):
            model.forward_full(latent, 0)

        def mean_wall(model, reps=10):
            t0 = time.perf_counter()
            for _ in range(reps):
                model.forward_full(latent, 0)
            return (time.perf_counter() - t0) / reps

        assert mean_wall(large) > mean_wall(small)


class TestForwardFull:
    def test_zero_weight_hook_gives_zero_noise(self, tiny_configs):
        large, _ = tiny_configs
        model = build_denoiser(large)
        for w in model.all_weights():
            w[:] = 0.0
        latent = gaussian(SeededRng(9), large.tokens, large.channels)
        noise, kv = model.forward_full(latent, 0)
        assert np.array_equal(noise.data, np.zeros_like(noise.data))
        assert len(kv) == large.layers

    def test_timestep_changes_output(self, tiny_models):
        large, _ = tiny_models
        latent = gaussian(SeededRng(10), 16, 4)
        a, _ = large.forward_full(latent, 0)
        b, _ = large.forward_full(latent, 1)
        assert not np.array_equal(a.data, b.data)

    def test_shape_mismatch_rejected(self, tiny_models):
        large, _ = tiny_models
        with pytest.raises(ValueError, match="shape"):
            large.forward_full(gaussian(SeededRng(1), 9, 4), 0)

    def test_kv_covers_all_tokens(self, tiny_models):
        large, _ = tiny_models
        latent = gaussian(SeededRng(2), 16, 4)
        _, kv = large.forward_full(latent, 0)
        assert all(entry.keys.shape == (16, large.config.model_dim) for entry in kv)

    def test_golden_noise_grid(self, tiny_configs, tmp_path):
        # Golden produced by tests/gen_goldens.py from the first verified
        # build; regeneration must be byte-identical.
        golden_path = DATA_DIR / "golden_noise_large.sgrd"
        large, _ = tiny_configs
        model = build_denoiser(large)
        latent = gaussian(SeededRng(555), large.tokens, large.channels)
        noise, _ = model.forward_full(latent, 3)
        regenerated = tmp_path / "noise.sgrd"
        write_sgrd(noise, regenerated)
        assert regenerated.read_bytes() == golden_path.read_bytes()


class TestForwardMasked:
    @pytest.mark.parametrize("preset", ["large", "small"])
    def test_total_mask_equals_full_forward(self, preset):
        cfg = preset_config(preset, tokens=16, channels=4, weight_seed=31)
        model = build_denoiser(cfg)
        for seed in range(3):
            latent = gaussian(SeededRng(1000 + seed), 16, 4)
            full_noise, full_kv = model.forward_full(latent, 2)
            stale_kv = [
                LayerKV(e.layer, gaussian(SeededRng(seed + 7), 16, cfg.model_dim),
                        gaussian(SeededRng(seed + 8), 16, cfg.model_dim))
                for e in full_kv
            ]
            masked_noise, kv_new = model.forward_masked(latent, list(range(16)), stale_kv, 2)
            np.testing.assert_allclose(masked_noise.data, full_noise.data, atol=1e-6)
            for fresh, full in zip(kv_new, full_kv):
                np.testing.assert_allclose(fresh.keys.data, full.keys.data, atol=1e-6)

    def test_stationary_latent_matches_full_rows(self, tiny_models):
        large, _ = tiny_models
        latent = gaussian(SeededRng(77), 16, 4)
        full_noise, kv = large.forward_full(latent, 5)
        idx = [1, 4, 9, 15]
        rows = Grid2D.from_array(latent.data[np.asarray(idx)])
        masked_noise, _ = large.forward_masked(rows, idx, kv, 5)
        np.testing.assert_allclose(masked_noise.data, full_noise.data[np.asarray(idx)], atol=1e-5)

    def test_single_query_against_handrolled_oracle(self):
        cfg = micro_config(41, tokens=16, channels=4)
        model = build_denoiser(cfg)
        latent = gaussian(SeededRng(42), 16, 4)
        _, kv = model.forward_full(latent, 1)
        moved = Grid2D.from_array(latent.data + gaussian(SeededRng(43), 16, 4).data * np.float32(0.1))
        idx = [6]
        rows = Grid2D.from_array(moved.data[np.asarray(idx)])
        got, _ = model.forward_masked(rows, idx, kv, 2)
        want = reference_masked_forward(model, rows.data, idx, kv, 2)
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_multi_row_against_handrolled_oracle(self):
        cfg = micro_config(51, tokens=16, channels=4)
        model = build_denoiser(cfg)
        latent = gaussian(SeededRng(52), 16, 4)
        _, kv = model.forward_full(latent, 0)
        idx = [0, 3, 7, 8, 12]
        rows = Grid2D.from_array(latent.data[np.asarray(idx)] * np.float32(1.25))
        got, _ = model.forward_masked(rows, idx, kv, 1)
        want = reference_masked_forward(model, rows.data, idx, kv, 1)
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_permutation_of_mask_order_is_consistent(self, tiny_models):
        large, _ = tiny_models
        latent = gaussian(SeededRng(61), 16, 4)
        _, kv = large.forward_full(latent, 0)
        sorted_idx = np.array([2, 4, 9])
        perm = np.array([9, 2, 4])
        out_sorted, _ = large.forward_masked(
            Grid2D.from_array(latent.data[sorted_idx]), sorted_idx, kv, 1
        )
        out_perm, _ = large.forward_masked(
            Grid2D.from_array(latent.data[perm]), perm, kv, 1
        )
        by_token_sorted = dict(zip(sorted_idx.tolist(), out_sorted.data))
        by_token_perm = dict(zip(perm.tolist(), out_perm.data))
        for token in sorted_idx.tolist():
            np.testing.assert_array_equal(by_token_sorted[token], by_token_perm[token])

    def test_empty_mask_rejected(self, tiny_models):
        large, _ = tiny_models
        latent = gaussian(SeededRng(1), 16, 4)
        _, kv = large.forward_full(latent, 0)
        with pytest.raises(ValueError, match="nonempty"):
            large.forward_masked(latent, [], kv, 0)

    def test_cache_shape_mismatch_rejected(self, tiny_models, tiny_configs):
        large, small = tiny_models
        latent = gaussian(SeededRng(1), 16, 4)
        _, kv_small = small.forward_full(latent, 0)
        rows = Grid2D.from_array(latent.data[:2])
        with pytest.raises(ValueError, match="cache"):
            large.forward_masked(rows, [0, 1], kv_small, 0)

    def test_partial_cache_rejected(self, tiny_models):
        large, _ = tiny_models
        latent = gaussian(SeededRng(1), 16, 4)
        _, kv = large.forward_full(latent, 0)
        partial = [LayerKV(e.layer, Grid2D.from_array(e.keys.data[:4]),
                           Grid2D.from_array(e.values.data[:4])) for e in kv]
        rows = Grid2D.from_array(latent.data[:2])
        with pytest.raises(ValueError, match="cover all"):
            large.forward_masked(rows, [0, 1], partial, 0)


class TestRefreshKvCache:
    def _kv(self, seed, tokens=8, dim=6, layers=2):
        r = SeededRng(seed)
        return [
            LayerKV(i, gaussian(r, tokens, dim), gaussian(r, tokens, dim)) for i in range(layers)
        ]

    def test_total_replacement(self):
        old, fresh = self._kv(1), self._kv(2)
        out = refresh_kv_cache(old, fresh, list(range(8)))
        for o, f in zip(out, fresh):
            assert np.array_equal(o.keys.data, f.keys.data)
            assert np.array_equal(o.values.data, f.values.data)

    def test_single_row(self):
        old = self._kv(3)
        fresh = [
            LayerKV(e.layer, Grid2D.from_array(e.keys.data[3:4] + 1),
                    Grid2D.from_array(e.values.data[3:4] + 1))
            for e in old
        ]
        out = refresh_kv_cache(old, fresh, [3])
        for o, base, f in zip(out, old, fresh):
            assert np.array_equal(o.keys.data[3], f.keys.data[0])
            keep = [i for i in range(8) if i != 3]
            assert np.array_equal(o.keys.data[keep], base.keys.data[keep])

    def test_idempotent(self):
        old = self._kv(4)
        fresh = [
            LayerKV(e.layer, Grid2D.from_array(e.keys.data[2:5] * 2),
                    Grid2D.from_array(e.values.data[2:5] * 2))
            for e in old
        ]
        once = refresh_kv_cache(old, fresh, [2, 3, 4])
        twice = refresh_kv_cache(once, fresh, [2, 3, 4])
        for a, b in zip(once, twice):
            assert np.array_equal(a.keys.data, b.keys.data)
            assert np.array_equal(a.values.data, b.values.data)

    def test_index_out_of_range_rejected(self):
        old = self._kv(5)
        fresh = [
            LayerKV(e.layer, Grid2D.from_array(e.keys.data[:1]),
                    Grid2D.from_array(e.values.data[:1]))
            for e in old
        ]
        with pytest.raises(ValueError, match="out of range"):
            refresh_kv_cache(old, fresh, [8])
