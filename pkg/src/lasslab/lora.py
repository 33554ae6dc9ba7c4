"""Clustering-routed mixture of low-rank adaptation experts.

A record's unit-normalized encoder summary is scored against frozen
spherical k-means centroids; a temperature softmax turns the scores into
mixture weights over per-cluster low-rank factor pairs, and the weighted
low-rank update is added to every attention projection of the frozen base
model for that record's forward pass. Only the factors train.
"""

from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import Record
from .model import LassOde, make_batch
from .training import LossBreakdown, TrainConfig, TrainingDivergedError, compute_loss


class DegenerateFeatureError(ValueError):
    pass


# --- features and clustering --------------------------------------------------


def extract_feature(model: LassOde, rec: Record) -> torch.Tensor:
    """Channel-averaged encoder summary, L2-normalized (scale-invariant)."""
    h = model.encode_record(rec)          # (C, d_h)
    feat = h.mean(dim=0)
    norm = feat.norm()
    if float(norm) < 1e-12:
        raise DegenerateFeatureError(f"zero-norm summary feature for {rec.record_id}")
    return feat / norm


@dataclass
class KMeansResult:
    centroids: np.ndarray          # (K, d), unit rows
    assignments: np.ndarray        # (N,)
    objective_trace: list[float]   # sum of squared distances after each assignment
    coincident: bool = False


def _assign(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, float]:
    d2 = ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    a = d2.argmin(axis=1)
    return a, float(d2[np.arange(len(x)), a].sum())


def _plus_plus_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centroids = [x[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min(((x[:, None, :] - np.asarray(centroids)[None]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            centroids.append(x[rng.integers(n)])
            continue
        centroids.append(x[rng.choice(n, p=d2 / total)])
    return np.asarray(centroids)


def fit_kmeans(
    features: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    restarts: int = 5,
) -> KMeansResult:
    """Spherical Lloyd iterations from k-means++ seeds, best of `restarts`.

    Centroids are renormalized to unit length after every mean update (the
    constrained optimum for unit-norm features), empty clusters are
    reseeded from the point farthest from its centroid, and the recorded
    objective trace is non-increasing.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or k < 1 or k > len(x):
        raise ValueError("need a 2-D feature matrix with k <= n_points")
    best: KMeansResult | None = None
    for restart in range(restarts):
        rng = np.random.default_rng([seed, restart])
        c = _plus_plus_seed(x, k, rng)
        c = _unit_rows(c)
        a, obj = _assign(x, c)
        trace = [obj]
        for _ in range(max_iter):
            new_c = c.copy()
            for m in range(k):
                members = x[a == m]
                if len(members) == 0:
                    d2 = ((x - c[a]) ** 2).sum(axis=1)
                    new_c[m] = x[int(d2.argmax())]
                else:
                    new_c[m] = members.mean(axis=0)
            c = _unit_rows(new_c, fallback=c)
            a_new, obj = _assign(x, c)
            trace.append(obj)
            if np.array_equal(a_new, a):
                a = a_new
                break
            a = a_new
        coincident = any(
            np.linalg.norm(c[i] - c[j]) < 1e-9 for i in range(k) for j in range(i + 1, k)
        )
        result = KMeansResult(c, a, trace, coincident)
        if best is None or trace[-1] < best.objective_trace[-1]:
            best = result
    return best


def _unit_rows(c: np.ndarray, fallback: np.ndarray | None = None) -> np.ndarray:
    norms = np.linalg.norm(c, axis=1, keepdims=True)
    out = c.copy()
    ok = norms[:, 0] > 1e-12
    out[ok] = c[ok] / norms[ok]
    if fallback is not None:
        out[~ok] = fallback[~ok]
    elif not ok.all():
        raise ValueError("degenerate centroid with zero norm")
    return out


# --- expert bank ----------------------------------------------------------------


@dataclass
class RoutingWeights:
    pi: torch.Tensor       # (K,) simplex weights
    scores: torch.Tensor   # (K,) raw cosine similarities


def attention_sites(cfg) -> list[str]:
    return [f"blocks.{i}.attn.{p}" for i in range(cfg.L) for p in ("q", "k", "v", "o")]


class ExpertBank:
    """K low-rank factor pairs per adapted site plus frozen routing centroids."""

    def __init__(self, centroids: torch.Tensor, tau: float, alpha: float, rank: int,
                 sites: list[str], factors: dict[str, tuple[torch.Tensor, torch.Tensor]]):
        centroids = torch.as_tensor(centroids, dtype=torch.float64)
        norms = centroids.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-9):
            raise ValueError("centroids must be unit-norm")
        if tau <= 0:
            raise ValueError("temperature must be positive")
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.centroids = centroids
        self.tau = float(tau)
        self.alpha = float(alpha)
        self.rank = int(rank)
        self.sites = list(sites)
        self.factors = factors

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @classmethod
    def create(cls, model: LassOde, centroids, tau: float = 0.1, alpha: float = 8.0,
               rank: int = 4, seed: int = 0) -> "ExpertBank":
        """Zero-initialized bank (V = 0 so the adapted model equals the base)."""
        cfg = model.cfg
        if rank > cfg.d_model // 4:
            raise ValueError(f"rank {rank} too large for d_model {cfg.d_model} (need r <= min/4)")
        centroids = torch.as_tensor(centroids, dtype=torch.float64)
        k = centroids.shape[0]
        gen = torch.Generator().manual_seed(seed)
        factors = {}
        for site in attention_sites(cfg):
            u = torch.empty(k, rank, cfg.d_model, dtype=torch.float64)
            with torch.no_grad():
                u.normal_(0.0, 0.02, generator=gen)
                u.clamp_(-0.04, 0.04)
            v = torch.zeros(k, cfg.d_model, rank, dtype=torch.float64)
            factors[site] = (u, v)
        return cls(centroids, tau, alpha, rank, attention_sites(cfg), factors)

    def named_factors(self):
        for site in self.sites:
            u, v = self.factors[site]
            yield site, "U", u
            yield site, "V", v

    def parameters(self) -> list[torch.Tensor]:
        return [t for _, _, t in self.named_factors()]

    def parameter_count(self) -> int:
        return sum(t.numel() for t in self.parameters())

    def requires_grad_(self, flag: bool):
        for t in self.parameters():
            t.requires_grad_(flag)
        return self


def route(h_hat: torch.Tensor, bank: ExpertBank) -> RoutingWeights:
    """Cosine scores against the centroids, temperature softmax into weights."""
    scores = bank.centroids.to(h_hat.dtype) @ h_hat
    scaled = scores / bank.tau
    pi = torch.softmax(scaled - scaled.max().detach(), dim=0)
    return RoutingWeights(pi, scores)


def mix_delta(pi: torch.Tensor, bank: ExpertBank, site: str) -> torch.Tensor:
    """Dense weighted low-rank update (alpha/r) sum_m pi_m V_m U_m for one site."""
    if site not in bank.factors:
        raise KeyError(f"site {site!r} not adapted by this bank")
    u, v = bank.factors[site]
    return (bank.alpha / bank.rank) * torch.einsum("k,kor,kri->oi", pi.to(u.dtype), v, u)


def mix_apply(pi: torch.Tensor, bank: ExpertBank, site: str, x: torch.Tensor) -> torch.Tensor:
    """Factored application of the mixture update to an input (never forms dW)."""
    if site not in bank.factors:
        raise KeyError(f"site {site!r} not adapted by this bank")
    u, v = bank.factors[site]
    down = torch.einsum("...i,kri->...kr", x.to(u.dtype), u)
    return (bank.alpha / bank.rank) * torch.einsum("...kr,kor,k->...o", down, v, pi.to(u.dtype))


def _deltas_from_pi(bank: ExpertBank, pi: torch.Tensor) -> dict:
    deltas: dict[int, dict[str, torch.Tensor]] = {}
    for site in bank.sites:
        _, block_idx, _, proj = site.split(".")
        deltas.setdefault(int(block_idx), {})[proj] = mix_delta(pi, bank, site)
    return deltas


def record_deltas(model: LassOde, bank: ExpertBank, rec: Record) -> dict:
    """Route one record and realize its per-site weight updates."""
    return _deltas_from_pi(bank, route(extract_feature(model, rec), bank).pi)


@dataclass
class AdaptationContext:
    routing: RoutingWeights
    deltas: dict


def apply_adaptation(model: LassOde, bank: ExpertBank, rec: Record) -> AdaptationContext:
    """Trajectory-conditioned adapted weights for one record's forward pass.

    The base weights are never mutated; the returned deltas are passed into
    the forward where each adapted projection computes (W + dW) x.
    """
    routing = route(extract_feature(model, rec), bank)
    return AdaptationContext(routing, _deltas_from_pi(bank, routing.pi))


def adapted_predict(model: LassOde, bank: ExpertBank, rec: Record, query_times=None) -> np.ndarray:
    ctx = apply_adaptation(model, bank, rec)
    return model.predict_record(rec, query_times=query_times, deltas=ctx.deltas)


# --- fine-tuning ----------------------------------------------------------------


def finetune(
    records: list[Record],
    model: LassOde,
    bank: ExpertBank,
    cfg: TrainConfig,
    log_path=None,
) -> list[LossBreakdown]:
    """Optimize the expert factors against the frozen base, soft routing.

    Every expert receives gradient scaled by its routing weight; base
    parameters and centroids receive none (asserted each step).
    """
    if not records:
        raise ValueError("empty fine-tuning split")
    base_flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    bank.requires_grad_(True)
    opt = torch.optim.Adam(bank.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    shuffle_gen = torch.Generator().manual_seed(cfg.seed)
    curve: list[LossBreakdown] = []
    rows = []
    last_good = [t.detach().clone() for t in bank.parameters()]
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = torch.randperm(len(records), generator=shuffle_gen).tolist()
            sums = np.zeros(4)
            for start in range(0, len(order), cfg.batch_size):
                chunk = [records[i] for i in order[start : start + cfg.batch_size]]
                total = None
                bd_sum = np.zeros(4)
                for bi, rec in enumerate(chunk):
                    rng = torch.Generator().manual_seed(
                        cfg.seed * 1_000_003 + epoch * 1_009 + start + bi
                    )
                    deltas = record_deltas(model, bank, rec)
                    batch = make_batch([rec], dtype=model.dtype)
                    loss, bd, _ = compute_loss(model, batch, cfg, rng, mode="train", deltas=deltas)
                    total = loss if total is None else total + loss
                    bd_sum += np.array([bd.mse, bd.kl, bd.lb, bd.total])
                total = total / len(chunk)
                if not torch.isfinite(total):
                    with torch.no_grad():
                        for t, good in zip(bank.parameters(), last_good):
                            t.copy_(good)
                    raise TrainingDivergedError(f"non-finite fine-tuning loss at epoch {epoch}")
                opt.zero_grad()
                total.backward()
                assert all(p.grad is None for p in model.parameters()), "frozen base got gradient"
                if cfg.clip_norm > 0:
                    torch.nn.utils.clip_grad_norm_(bank.parameters(), cfg.clip_norm)
                opt.step()
                sums += bd_sum
            epoch_bd = LossBreakdown(*(sums / len(records)))
            curve.append(epoch_bd)
            last_good = [t.detach().clone() for t in bank.parameters()]
            rows.append([epoch, epoch_bd.mse, epoch_bd.kl, epoch_bd.lb, epoch_bd.total,
                         time.perf_counter() - t0])
    finally:
        for p, flag in zip(model.parameters(), base_flags):
            p.requires_grad_(flag)
        bank.requires_grad_(False)
    if log_path:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mse", "kl", "lb", "total", "wall_seconds"])
            writer.writerows(rows)
    return curve


# --- checkpoint io ----------------------------------------------------------------


def save_bank(bank: ExpertBank, dir_path):
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    tensors = [("centroids", bank.centroids)] + [
        (f"{site}.{kind}", t) for site, kind, t in bank.named_factors()
    ]
    blob = bytearray()
    for _, t in tensors:
        blob.extend(t.detach().to(torch.float32).numpy().astype("<f4").tobytes())
    (out / "bank.json").write_text(
        json.dumps(
            {
                "k": bank.k,
                "tau": bank.tau,
                "alpha": bank.alpha,
                "rank": bank.rank,
                "sites": bank.sites,
                "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
            },
            indent=1,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    (out / "bank.bin").write_bytes(bytes(blob))


def load_bank(dir_path, dtype=torch.float64) -> ExpertBank:
    root = Path(dir_path)
    meta = json.loads((root / "bank.json").read_text(encoding="utf-8"))
    blob = (root / "bank.bin").read_bytes()
    expected = sum(int(np.prod(t["shape"])) for t in meta["tensors"]) * 4
    if len(blob) != expected:
        raise ValueError(f"bank.bin has {len(blob)} bytes, manifest implies {expected}")
    loaded = {}
    offset = 0
    for entry in meta["tensors"]:
        numel = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=numel, offset=offset).reshape(entry["shape"])
        loaded[entry["name"]] = torch.as_tensor(arr.copy()).to(dtype)
        offset += numel * 4
    centroids = loaded.pop("centroids")
    centroids = centroids / centroids.norm(dim=1, keepdim=True)  # re-unit after f32 round trip
    factors = {}
    for site in meta["sites"]:
        factors[site] = (loaded[f"{site}.U"], loaded[f"{site}.V"])
    return ExpertBank(centroids, meta["tau"], meta["alpha"], meta["rank"], meta["sites"], factors)
