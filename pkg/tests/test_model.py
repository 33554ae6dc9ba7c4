"""Model-core structural properties: encoder, tokenization, backbone, decode."""

import numpy as np
import pytest
import torch

from lasslab.dataset import normalize_record
from lasslab.dynamics import ScenarioSweep, make_scenario_batch
from lasslab.model import (
    LassOde,
    ModelConfig,
    load_checkpoint,
    make_batch,
    rbf_time_features,
    save_checkpoint,
)

TINY = ModelConfig(
    d_model=16, d_h=8, d_z=3, K_token=4, L=1, n_heads=2, n_moe_experts=2,
    moe_top_k=2, n_csh_tokens=2, n_rbf_centers=4, max_channels=8,
)


def _record(seed=0, channels=2, n=24, ratio=0.4):
    rng = np.random.default_rng(seed)
    from lasslab.dynamics import Trajectory

    vals = rng.standard_normal((channels, n))
    traj = Trajectory([f"c{i}" for i in range(channels)], np.linspace(0, 2, n), vals, 2.0,
                      {"scenario_id": f"syn{seed}", "split": "pretrain"})
    return normalize_record(traj, ratio)


class TestRbf:
    def test_unit_peak_at_center(self):
        feats, clamped = rbf_time_features(torch.tensor(1.0 / 3), 4)
        assert not clamped
        assert feats[1] == pytest.approx(1.0)

    def test_symmetry_between_centers(self):
        feats, _ = rbf_time_features(torch.tensor(0.375), 5)  # midway between centers 1 and 2
        assert float(feats[1]) == pytest.approx(float(feats[2]))

    def test_monotone_decay_with_distance(self):
        grid = torch.linspace(0, 1, 1001, dtype=torch.float64)
        feats, _ = rbf_time_features(grid, 8)
        centers = torch.linspace(0, 1, 8, dtype=torch.float64)
        for i in range(8):
            d = (grid - centers[i]).abs()
            order = torch.argsort(d)
            f_sorted = feats[order, i]
            assert (f_sorted[1:] <= f_sorted[:-1] + 1e-15).all()

    def test_clamping_flag(self):
        _, clamped = rbf_time_features(torch.tensor(1.5), 4)
        assert clamped


class TestEncoder:
    def test_zeroed_gates_give_zero_summary(self):
        model = LassOde(TINY, seed=0)
        with torch.no_grad():
            for p in model.encoder.parameters():
                p.zero_()
        batch = make_batch([_record()])
        h = model.encode_prefix(batch.values_obs, batch.dts_obs, batch.obs_mask)
        assert torch.all(h == 0)

    def test_deterministic(self):
        model = LassOde(TINY, seed=0)
        batch = make_batch([_record()])
        h1 = model.encode_prefix(batch.values_obs, batch.dts_obs, batch.obs_mask)
        h2 = model.encode_prefix(batch.values_obs, batch.dts_obs, batch.obs_mask)
        assert torch.equal(h1, h2)

    def test_gradient_matches_finite_differences(self):
        model = LassOde(TINY, seed=1)
        batch = make_batch([_record()])
        w = torch.randn(TINY.d_h, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

        def readout():
            h = model.encode_prefix(batch.values_obs, batch.dts_obs, batch.obs_mask)
            return (h[0, 0] * w).sum()

        loss = readout()
        loss.backward()
        p = model.encoder.w_hh
        for idx in (0, 5, 17):
            flat = p.data.reshape(-1)
            orig = float(flat[idx])
            h = 1e-5
            with torch.no_grad():
                flat[idx] = orig + h
            with torch.no_grad():
                up = float(readout().detach())
            with torch.no_grad():
                flat[idx] = orig - h
            dn = float(readout().detach())
            with torch.no_grad():
                flat[idx] = orig
            fd = (up - dn) / (2 * h)
            an = float(p.grad.reshape(-1)[idx])
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4


class TestTokenize:
    def test_identity_modulation_makes_tokens_equal(self):
        model = LassOde(TINY, seed=0)
        with torch.no_grad():
            for p in model.film.mlp.parameters():
                p.zero_()  # gamma = 1, beta = 0
            model.channel_codes.weight.zero_()
        batch = make_batch([_record()])
        h = model.encode_prefix(batch.values_obs, batch.dts_obs, batch.obs_mask)
        tok = model.tokenize(h).view(1, 2, TINY.K_token, TINY.d_model)
        for k in range(1, TINY.K_token):
            assert torch.equal(tok[0, :, k], tok[0, :, 0])

    def test_zero_summary_rows_are_shift_plus_code(self):
        model = LassOde(TINY, seed=0)
        with torch.no_grad():
            for p in model.token_mlp.parameters():
                p.zero_()
        h = torch.zeros(1, 2, TINY.d_h, dtype=torch.float64)
        gamma, beta = model.film(model.token_starts())
        codes = model.channel_codes(torch.arange(2))
        tok = model.tokenize(h).view(1, 2, TINY.K_token, TINY.d_model)
        for j in range(2):
            for k in range(TINY.K_token):
                assert torch.allclose(tok[0, j, k], beta[k] + codes[j], atol=1e-15)

    def test_row_ordering_sentinels(self):
        model = LassOde(TINY, seed=0)
        K, dm = TINY.K_token, TINY.d_model
        with torch.no_grad():
            for p in model.token_mlp.parameters():
                p.zero_()
            model.channel_codes.weight.zero_()
            for j in range(2):
                model.channel_codes.weight[j, 0] = j * K  # channel sentinel
        # plant beta_k = k on feature 0 irrespective of the film MLP internals
        gamma = torch.ones(K, dm, dtype=torch.float64)
        beta = torch.zeros(K, dm, dtype=torch.float64)
        beta[:, 0] = torch.arange(K, dtype=torch.float64)  # token sentinel
        model.film.forward = lambda t: (gamma, beta)
        h = torch.zeros(1, 2, TINY.d_h, dtype=torch.float64)
        tok = model.tokenize(h).detach()
        for j in range(2):
            for k in range(K):
                row = j * K + k
                assert float(tok[0, row, 0]) == pytest.approx(j * K + k, abs=1e-12)

    def test_too_many_channels_rejected(self):
        model = LassOde(TINY, seed=0)
        h = torch.zeros(1, TINY.max_channels + 1, TINY.d_h, dtype=torch.float64)
        with pytest.raises(ValueError, match="max_channels"):
            model.tokenize(h)


class TestBackbone:
    def test_zeroed_outputs_give_pure_residual(self):
        model = LassOde(TINY, seed=3)
        with torch.no_grad():
            for block in model.blocks:
                block.attn.o.weight.zero_()
                block.attn.o.bias.zero_()
                for e in block.moe.experts:
                    e.fc2.weight.zero_()
                    e.fc2.bias.zero_()
        x = torch.randn(2, 10, TINY.d_model, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(4))
        out, _, _ = model.backbone(x)
        assert torch.equal(out, x)

    def test_attention_rows_sum_to_one(self):
        model = LassOde(TINY, seed=5)
        x = torch.randn(2, 12, TINY.d_model, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(6))
        _, _, attns = model.backbone(x, collect_attn=True)
        for attn in attns:
            sums = attn.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_no_hub_equals_plain_transformer(self):
        cfg = ModelConfig(**{**TINY.__dict__, "n_csh_tokens": 0})
        model = LassOde(cfg, seed=7)
        x = torch.randn(1, 8, cfg.d_model, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(8))
        out, _, _ = model.backbone(x)

        # independent reference: plain pre-norm block math on the same weights
        ref = x
        for block in model.blocks:
            y = block.ln1(ref)
            bsz, n, d = y.shape
            nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
            q = (block.attn.q(y)).view(bsz, n, nh, dh).transpose(1, 2)
            k = (block.attn.k(y)).view(bsz, n, nh, dh).transpose(1, 2)
            v = (block.attn.v(y)).view(bsz, n, nh, dh).transpose(1, 2)
            a = torch.softmax(q @ k.transpose(-1, -2) / dh**0.5, dim=-1)
            att = block.attn.o((a @ v).transpose(1, 2).reshape(bsz, n, d))
            ref = ref + att
            y2 = block.ln2(ref)
            probs = torch.softmax(block.moe.gate(y2), dim=-1)
            stacked = torch.stack([e(y2) for e in block.moe.experts], dim=-2)
            ref = ref + (probs.unsqueeze(-1) * stacked).sum(-2)
        assert torch.allclose(out, ref, atol=1e-12)


class TestFlowHeadAndPredict:
    def test_zero_head_gives_constant_flow(self):
        model = LassOde(TINY, seed=9)  # final layer is zero-initialized
        tok = torch.randn(1, 2 * TINY.K_token, TINY.d_model, dtype=torch.float64,
                          generator=torch.Generator().manual_seed(10))
        A, b = model.flow_params(tok, 2)
        assert torch.all(A == 0) and torch.all(b == 0)

    def test_head_output_length(self):
        model = LassOde(TINY, seed=0)
        assert model.flow_head.fc2.out_features == TINY.d_z**2 + TINY.d_z

    def test_reshape_convention_sentinel(self):
        model = LassOde(TINY, seed=0)
        with torch.no_grad():
            for p in model.flow_head.parameters():
                p.zero_()
            model.flow_head.fc2.bias[TINY.d_z**2 + 2] = 1.0
        tok = torch.zeros(1, 2 * TINY.K_token, TINY.d_model, dtype=torch.float64)
        A, b = model.flow_params(tok, 2)
        assert torch.all(A == 0)
        assert torch.all(b[..., 2] == 1.0)
        assert torch.all(b[..., [0, 1]] == 0.0)

    def test_zero_flow_predicts_readout_bias(self):
        model = LassOde(TINY, seed=11)
        with torch.no_grad():
            model.latent_mean.weight.zero_()
            model.latent_mean.bias.zero_()
        rec = _record(seed=3)
        preds = model.predict_record(rec)
        assert np.allclose(preds, float(model.readout.bias.detach()), atol=1e-14)

    def test_grid_density_invariance(self):
        model = LassOde(TINY, seed=12)
        rec = _record(seed=4, n=17)
        coarse = np.linspace(0, 1, 9)
        fine = np.linspace(0, 1, 17)
        p_c = model.predict_record(rec, query_times=coarse)
        p_f = model.predict_record(rec, query_times=fine)
        assert np.array_equal(p_c, p_f[:, ::2])

    def test_channel_permutation_equivariance(self):
        model = LassOde(TINY, seed=13)
        rec = _record(seed=5, channels=3)
        perm = [2, 0, 1]
        rec_p = _record(seed=5, channels=3)
        rec_p.values = rec.values[perm]
        rec_p.channels = [rec.channels[i] for i in perm]

        model_p = LassOde(TINY, seed=13)
        model_p.load_state_dict(model.state_dict())
        with torch.no_grad():
            model_p.channel_codes.weight[:3] = model.channel_codes.weight[perm]

        base = model.predict_record(rec)
        permuted = model_p.predict_record(rec_p)
        assert np.allclose(permuted, base[perm], atol=1e-12)

    def test_channel_count_flexibility(self):
        model = LassOde(TINY, seed=14)
        for c in (1, 2, 5):
            preds = model.predict_record(_record(seed=c, channels=c))
            assert preds.shape[0] == c and np.isfinite(preds).all()


class TestCheckpoint:
    def test_round_trip_is_lossless_for_f32_values(self, tmp_path):
        model = LassOde(TINY, seed=15, dtype=torch.float32)
        save_checkpoint(model, tmp_path / "ck")
        again = load_checkpoint(tmp_path / "ck", dtype=torch.float32)
        for a, b in zip(model.state_dict().values(), again.state_dict().values()):
            assert torch.equal(a, b)
        save_checkpoint(again, tmp_path / "ck2")
        assert (tmp_path / "ck" / "model.bin").read_bytes() == (tmp_path / "ck2" / "model.bin").read_bytes()

    def test_byte_length_validated(self, tmp_path):
        model = LassOde(TINY, seed=16)
        save_checkpoint(model, tmp_path / "ck")
        blob = (tmp_path / "ck" / "model.bin").read_bytes()
        (tmp_path / "ck" / "model.bin").write_bytes(blob[:-4])
        with pytest.raises(ValueError, match="bytes"):
            load_checkpoint(tmp_path / "ck")

    def test_predictions_survive_round_trip(self, tmp_path):
        model = LassOde(TINY, seed=17, dtype=torch.float32)
        rec = _record(seed=6)
        save_checkpoint(model, tmp_path / "ck")
        again = load_checkpoint(tmp_path / "ck", dtype=torch.float32)
        assert np.array_equal(model.predict_record(rec), again.predict_record(rec))
