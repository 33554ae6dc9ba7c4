"""Prefix-conditioned piecewise-linear latent-ODE transformer.

One channel-shared time-aware GRU summarizes each channel's observed
prefix; token embeddings localize that summary on a fixed grid of
normalized-time segments via an RBF/FiLM modulation plus a learnable
channel code; a pre-norm transformer backbone (multi-head attention +
mixture-of-experts feed-forward) with a bank of learnable hub rows refines
all channel-time tokens jointly; a head maps each refined token to the
(A, b) of its segment's affine latent flow, which is integrated exactly in
closed form and read out linearly per channel.

Everything is an ordinary torch module in float64 by default so analytic
gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import linode
from .dataset import Record


class NanDetectedError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    d_h: int = 64
    d_z: int = 8
    K_token: int = 16
    L: int = 2
    n_heads: int = 4
    n_moe_experts: int = 4
    moe_top_k: int = 1
    n_csh_tokens: int = 8
    n_rbf_centers: int = 16
    max_channels: int = 16
    moe_hidden: int = 0       # 0 means 2 * d_model
    head_hidden: int = 0      # 0 means d_model
    spectral_clamp: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.K_token < 1:
            raise ValueError("K_token must be >= 1")
        if not (1 <= self.moe_top_k <= self.n_moe_experts):
            raise ValueError("moe_top_k must lie in [1, n_moe_experts]")
        if self.moe_hidden == 0:
            self.moe_hidden = 2 * self.d_model
        if self.head_hidden == 0:
            self.head_hidden = self.d_model


def rbf_time_features(t, n_centers: int) -> tuple[Tensor, bool]:
    """Gaussian bumps at equispaced centers on [0, 1]; width = center spacing.

    Out-of-range times are clamped; the second return value flags whether
    clamping occurred.
    """
    t = torch.as_tensor(t, dtype=torch.float64)
    clamped = bool((t < 0).any() or (t > 1).any())
    t = t.clamp(0.0, 1.0)
    centers = torch.linspace(0, 1, n_centers, dtype=t.dtype)
    sigma = 1.0 / (n_centers - 1) if n_centers > 1 else 1.0
    return torch.exp(-((t[..., None] - centers) ** 2) / (2 * sigma**2)), clamped


def _trunc_normal_(t: Tensor, std: float, gen: torch.Generator):
    with torch.no_grad():
        t.normal_(0.0, std, generator=gen)
        t.clamp_(-2 * std, 2 * std)


def _orthogonal_(t: Tensor, gen: torch.Generator):
    with torch.no_grad():
        a = torch.randn(t.shape, generator=gen, dtype=t.dtype)
        q, r = torch.linalg.qr(a)
        q = q * torch.sign(torch.diagonal(r)).unsqueeze(-2)
        t.copy_(q)


class GruEncoder(nn.Module):
    """Time-aware GRU over (value, time-increment) pairs, zero initial state."""

    def __init__(self, d_h: int):
        super().__init__()
        self.d_h = d_h
        self.w_ih = nn.Parameter(torch.empty(3 * d_h, 2))
        self.w_hh = nn.Parameter(torch.empty(3 * d_h, d_h))
        self.b_ih = nn.Parameter(torch.zeros(3 * d_h))
        self.b_hh = nn.Parameter(torch.zeros(3 * d_h))

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        """x: (N, T, 2); mask: (N, T) with 1 for real steps. Returns (N, d_h)."""
        n, steps, _ = x.shape
        h = x.new_zeros(n, self.d_h)
        for i in range(steps):
            gi = F.linear(x[:, i], self.w_ih, self.b_ih)
            gh = F.linear(h, self.w_hh, self.b_hh)
            i_r, i_z, i_n = gi.chunk(3, dim=-1)
            h_r, h_z, h_n = gh.chunk(3, dim=-1)
            r = torch.sigmoid(i_r + h_r)
            z = torch.sigmoid(i_z + h_z)
            cand = torch.tanh(i_n + r * h_n)
            h_new = (1 - z) * cand + z * h
            if mask is not None:
                m = mask[:, i : i + 1]
                h = m * h_new + (1 - m) * h
            else:
                h = h_new
        return h


class Mlp(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.tanh(self.fc1(x)))


class TimeFilm(nn.Module):
    """Layer-normalized RBF features of a token's start time -> (scale, shift).

    The scale is parameterized as 1 + residual so zero-initialized output
    layers start from an identity modulation.
    """

    def __init__(self, n_rbf: int, d_model: int):
        super().__init__()
        self.n_rbf = n_rbf
        self.norm = nn.LayerNorm(n_rbf)
        self.mlp = Mlp(n_rbf, d_model, 2 * d_model)

    def forward(self, t_starts: Tensor) -> tuple[Tensor, Tensor]:
        feats, _ = rbf_time_features(t_starts, self.n_rbf)
        out = self.mlp(self.norm(feats.to(self.mlp.fc1.weight.dtype)))
        gamma_res, beta = out.chunk(2, dim=-1)
        return 1.0 + gamma_res, beta


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def _proj(self, lin: nn.Linear, x: Tensor, delta: Tensor | None) -> Tensor:
        w = lin.weight if delta is None else lin.weight + delta
        return F.linear(x, w, lin.bias)

    def forward(self, x: Tensor, deltas: dict | None = None, collect: bool = False):
        bsz, n, d = x.shape
        deltas = deltas or {}
        q = self._proj(self.q, x, deltas.get("q"))
        k = self._proj(self.k, x, deltas.get("k"))
        v = self._proj(self.v, x, deltas.get("v"))
        split = lambda t: t.view(bsz, n, self.n_heads, self.d_head).transpose(1, 2)
        q, k, v = split(q), split(k), split(v)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.d_head), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, n, d)
        out = self._proj(self.o, out, deltas.get("o"))
        return (out, attn) if collect else (out, None)


class MoeLayer(nn.Module):
    """Softmax-gated expert MLPs with top-k dispatch and renormalized weights."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.top_k = cfg.moe_top_k
        self.n_experts = cfg.n_moe_experts
        self.gate = nn.Linear(cfg.d_model, cfg.n_moe_experts)
        self.experts = nn.ModuleList(
            Mlp(cfg.d_model, cfg.moe_hidden, cfg.d_model) for _ in range(cfg.n_moe_experts)
        )

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        probs = torch.softmax(self.gate(x), dim=-1)  # (B, N, E)
        top_p, top_i = probs.topk(self.top_k, dim=-1)
        weights = top_p / top_p.sum(dim=-1, keepdim=True)
        dense = torch.zeros_like(probs)
        dense.scatter_(-1, top_i, weights)
        stacked = torch.stack([e(x) for e in self.experts], dim=-2)  # (B, N, E, D)
        out = (dense.unsqueeze(-1) * stacked).sum(dim=-2)
        # penalize dispatch imbalance above the uniform baseline (0 when balanced)
        sel = torch.zeros_like(probs)
        sel.scatter_(-1, top_i, 1.0 / self.top_k)
        frac = sel.detach().reshape(-1, self.n_experts).mean(dim=0)
        mean_p = probs.reshape(-1, self.n_experts).mean(dim=0)
        lb = torch.relu(self.n_experts * (frac * mean_p).sum() - 1.0)
        return out, lb


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.moe = MoeLayer(cfg)

    def forward(self, x: Tensor, deltas: dict | None = None, collect: bool = False):
        a, attn = self.attn(self.ln1(x), deltas=deltas, collect=collect)
        x = x + a
        m, lb = self.moe(self.ln2(x))
        return x + m, lb, attn


@dataclass
class ForwardOut:
    preds: Tensor        # (B, C, Tq) normalized predictions
    lb: Tensor           # load-balance penalty (scalar)
    mu: Tensor           # (B, C, d_z)
    log_std: Tensor      # (B, C, d_z)
    z0: Tensor           # (B, C, d_z)


@dataclass
class PrefixBatch:
    values_obs: Tensor   # (B, C, To)
    dts_obs: Tensor      # (B, To)
    obs_mask: Tensor     # (B, To)
    query_times: Tensor  # (B, Tq)
    query_mask: Tensor   # (B, Tq)
    targets: Tensor      # (B, C, Tq)
    n_channels: int
    record_ids: list[str] = field(default_factory=list)


def make_batch(records: list[Record], dtype=torch.float64) -> PrefixBatch:
    """Pad records with equal channel counts to a common prefix/target length."""
    cs = {r.n_channels for r in records}
    if len(cs) != 1:
        raise ValueError(f"batch mixes channel counts {sorted(cs)}")
    c = cs.pop()
    to = max(r.split.n_observed for r in records)
    tq = max(r.times.size for r in records)
    b = len(records)
    values_obs = torch.zeros(b, c, to, dtype=dtype)
    dts_obs = torch.zeros(b, to, dtype=dtype)
    obs_mask = torch.zeros(b, to, dtype=dtype)
    query_times = torch.zeros(b, tq, dtype=dtype)
    query_mask = torch.zeros(b, tq, dtype=dtype)
    targets = torch.zeros(b, c, tq, dtype=dtype)
    for i, r in enumerate(records):
        n_obs, n_all = r.split.n_observed, r.times.size
        values_obs[i, :, :n_obs] = torch.as_tensor(r.values[:, :n_obs], dtype=dtype)
        dts_obs[i, :n_obs] = torch.as_tensor(r.dts[:n_obs], dtype=dtype)
        obs_mask[i, :n_obs] = 1.0
        query_times[i, :n_all] = torch.as_tensor(r.times, dtype=dtype)
        query_mask[i, :n_all] = 1.0
        targets[i, :, :n_all] = torch.as_tensor(r.values, dtype=dtype)
    return PrefixBatch(
        values_obs, dts_obs, obs_mask, query_times, query_mask, targets, c,
        [r.record_id for r in records],
    )


class LassOde(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        self.encoder = GruEncoder(cfg.d_h)
        self.token_mlp = Mlp(cfg.d_h, cfg.d_model, cfg.d_model)
        self.film = TimeFilm(cfg.n_rbf_centers, cfg.d_model)
        self.channel_codes = nn.Embedding(cfg.max_channels, cfg.d_model)
        self.hub_tokens = nn.Parameter(torch.zeros(cfg.n_csh_tokens, cfg.d_model))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.L))
        self.latent_mean = nn.Linear(cfg.d_h, cfg.d_z)
        self.latent_log_std = nn.Linear(cfg.d_h, cfg.d_z)
        self.flow_head = Mlp(cfg.d_model, cfg.head_hidden, cfg.d_z * (cfg.d_z + 1))
        self.readout = nn.Linear(cfg.d_z, 1)
        self.to(dtype)
        self.reset_parameters(seed)

    @property
    def dtype(self):
        return self.readout.weight.dtype

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if p.ndim < 2 or name.endswith("bias"):
                with torch.no_grad():
                    p.zero_()
            else:
                # fan-in scaled truncated normal; a fixed 0.02 std stalls
                # training at these widths
                _trunc_normal_(p, (2.0 / (p.shape[-1] + p.shape[0])) ** 0.5, gen)
        for g in range(3):  # orthogonal recurrent kernels, one block per gate
            _orthogonal_(self.encoder.w_hh[g * self.cfg.d_h : (g + 1) * self.cfg.d_h], gen)
        with torch.no_grad():  # start from constant latent flows
            self.flow_head.fc2.weight.zero_()
            self.flow_head.fc2.bias.zero_()
        for m in self.modules():
            if isinstance(m, nn.LayerNorm):
                with torch.no_grad():
                    m.weight.fill_(1.0)
                    m.bias.zero_()

    # --- stages -----------------------------------------------------------

    def encode_prefix(self, values_obs: Tensor, dts_obs: Tensor, obs_mask: Tensor | None) -> Tensor:
        """(B, C, To) values + (B, To) increments -> (B, C, d_h) summaries."""
        if not torch.isfinite(values_obs).all():
            raise ValueError("NaN/Inf in encoder inputs")
        b, c, to = values_obs.shape
        x = torch.stack(
            [values_obs, dts_obs.unsqueeze(1).expand(b, c, to)], dim=-1
        ).reshape(b * c, to, 2)
        mask = None
        if obs_mask is not None:
            mask = obs_mask.unsqueeze(1).expand(b, c, to).reshape(b * c, to)
        return self.encoder(x, mask).view(b, c, -1)

    def token_starts(self) -> Tensor:
        k = self.cfg.K_token
        return torch.arange(k, dtype=self.dtype) / k

    def tokenize(self, h: Tensor) -> Tensor:
        """Channel summaries (B, C, d_h) -> token grid (B, C*K, d_model)."""
        b, c, _ = h.shape
        if c > self.cfg.max_channels:
            raise ValueError(f"{c} channels exceeds max_channels={self.cfg.max_channels}")
        gamma, beta = self.film(self.token_starts())          # (K, dm) each
        m = self.token_mlp(h)                                 # (B, C, dm)
        codes = self.channel_codes(torch.arange(c))           # (C, dm)
        e = gamma * m.unsqueeze(2) + beta + codes[None, :, None, :]
        return e.reshape(b, c * self.cfg.K_token, self.cfg.d_model)

    def backbone(self, tokens: Tensor, deltas: dict | None = None, collect_attn: bool = False):
        """Hub-augmented attention/MoE blocks; hub rows are stripped after."""
        b, n, _ = tokens.shape
        if self.cfg.n_csh_tokens:
            hub = self.hub_tokens.unsqueeze(0).expand(b, -1, -1)
            x = torch.cat([tokens, hub], dim=1)
        else:
            x = tokens
        lb_total = tokens.new_zeros(())
        attns = []
        for i, block in enumerate(self.blocks):
            block_deltas = None if deltas is None else deltas.get(i)
            x, lb, attn = block(x, deltas=block_deltas, collect=collect_attn)
            if not torch.isfinite(x).all():
                raise NanDetectedError(f"non-finite activations after block {i}")
            lb_total = lb_total + lb
            if collect_attn:
                attns.append(attn)
        return x[:, :n], lb_total, attns

    def flow_params(self, tokens_final: Tensor, n_channels: int) -> tuple[Tensor, Tensor]:
        """Refined tokens -> per-(channel, segment) affine flow (A, b)."""
        b = tokens_final.shape[0]
        dz, k = self.cfg.d_z, self.cfg.K_token
        out = self.flow_head(tokens_final).view(b, n_channels, k, dz * (dz + 1))
        A = out[..., : dz * dz].reshape(b, n_channels, k, dz, dz)
        bvec = out[..., dz * dz :]
        if self.cfg.spectral_clamp:
            s = torch.linalg.matrix_norm(A, ord=2)[..., None, None]
            A = A * torch.where(s > 1e-12, torch.tanh(s) / s, torch.ones_like(s))
        return A, bvec

    def latent_init(self, h: Tensor, mode: str, rng: torch.Generator | None):
        mu = self.latent_mean(h)
        log_std = self.latent_log_std(h)
        if mode == "train":
            eps = torch.randn(mu.shape, generator=rng, dtype=mu.dtype)
            z0 = mu + torch.exp(log_std) * eps
        else:
            z0 = mu
        return z0, mu, log_std

    def forward(
        self,
        batch: PrefixBatch,
        mode: str = "eval",
        rng: torch.Generator | None = None,
        deltas: dict | None = None,
    ) -> ForwardOut:
        h = self.encode_prefix(batch.values_obs, batch.dts_obs, batch.obs_mask)
        tokens = self.tokenize(h)
        final, lb, _ = self.backbone(tokens, deltas=deltas)
        A, bvec = self.flow_params(final, batch.n_channels)
        z0, mu, log_std = self.latent_init(h, mode, rng)
        bounds = torch.linspace(0, 1, self.cfg.K_token + 1, dtype=self.dtype)
        q = batch.query_times.unsqueeze(1)  # (B, 1, Tq) broadcast over channels
        z = linode.integrate_affine_grid(A, bvec, z0, bounds, q)
        preds = self.readout(z).squeeze(-1)
        return ForwardOut(preds, lb, mu, log_std, z0)

    # --- conveniences -------------------------------------------------------

    def encode_record(self, rec: Record) -> Tensor:
        batch = make_batch([rec], dtype=self.dtype)
        return self.encode_prefix(batch.values_obs, batch.dts_obs, batch.obs_mask)[0]

    def predict_record(self, rec: Record, query_times=None, deltas: dict | None = None) -> np.ndarray:
        """Normalized predictions (C, Tq) at the record's own or given times."""
        batch = make_batch([rec], dtype=self.dtype)
        if query_times is not None:
            q = torch.as_tensor(np.asarray(query_times), dtype=self.dtype).reshape(1, -1)
            if (q < 0).any() or (q > 1).any():
                raise ValueError("query times must lie in [0, 1]")
            batch.query_times = q
            batch.query_mask = torch.ones_like(q)
            batch.targets = torch.zeros(1, batch.n_channels, q.shape[1], dtype=self.dtype)
        with torch.no_grad():
            out = self.forward(batch, mode="eval", deltas=deltas)
        return out.preds[0].numpy()


# --- checkpoint io ----------------------------------------------------------


def save_checkpoint(model: LassOde, dir_path):
    """model.json (config + tensor manifest) and model.bin (float32 LE)."""
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    blob = bytearray()
    for k in state:
        blob.extend(state[k].to(torch.float32).numpy().astype("<f4").tobytes())
    (out / "model.json").write_text(
        json.dumps(
            {"config": asdict(model.cfg), "dtype": "float32-le", "tensors": manifest},
            indent=1,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    (out / "model.bin").write_bytes(bytes(blob))


def load_checkpoint(dir_path, dtype=torch.float64) -> LassOde:
    root = Path(dir_path)
    meta = json.loads((root / "model.json").read_text(encoding="utf-8"))
    cfg = ModelConfig(**meta["config"])
    model = LassOde(cfg, seed=0, dtype=dtype)
    blob = (root / "model.bin").read_bytes()
    expected = sum(int(np.prod(t["shape"])) for t in meta["tensors"]) * 4
    if len(blob) != expected:
        raise ValueError(f"model.bin has {len(blob)} bytes, manifest implies {expected}")
    state = {}
    offset = 0
    for entry in meta["tensors"]:
        numel = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=numel, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.as_tensor(arr.copy()).to(dtype)
        offset += numel * 4
    model.load_state_dict(state)
    return model
