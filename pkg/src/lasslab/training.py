"""Pretraining loop: variational latent init, loss, optimizer, grad checks.

The loss is full-horizon masked reconstruction MSE plus a small KL of the
sampled latent initial condition against a standard normal and the
backbone's expert load-balance penalty. Training is deterministic given
the config seed; a NaN loss aborts with the last finite epoch's parameters
restored.
"""

from __future__ import annotations

import copy
import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import Record
from .model import ForwardOut, LassOde, PrefixBatch, make_batch, save_checkpoint


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 100
    beta_kl: float = 1e-3
    lambda_lb: float = 1e-2
    seed: int = 0
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    variational: bool = True      # off: train with z0 = mu and no KL term
    cosine_decay: bool = False    # anneal lr to ~0 over the epoch budget

    def __post_init__(self):
        if self.lr < 0 or self.eps <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid training hyperparameters")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam moments must lie in (0, 1)")


@dataclass
class LossBreakdown:
    mse: float
    kl: float
    lb: float
    total: float


def sample_latent(model: LassOde, h: torch.Tensor, mode: str, rng: torch.Generator | None):
    """Reparameterized latent initial state; eval mode returns the mean."""
    return model.latent_init(h, mode, rng)


def gaussian_kl(mu: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """KL( N(mu, diag exp(2 log_std)) || N(0, I) ), summed over latent dims."""
    var = torch.exp(2 * log_std)
    return 0.5 * (mu**2 + var - 1.0 - 2 * log_std).sum(dim=-1)


def compute_loss(
    model: LassOde,
    batch: PrefixBatch,
    cfg: TrainConfig,
    rng: torch.Generator | None,
    mode: str = "train",
    deltas: dict | None = None,
) -> tuple[torch.Tensor, LossBreakdown, ForwardOut]:
    """Masked full-horizon MSE + beta_kl * KL + lambda_lb * load balance.

    The MSE is averaged per record over channels and that record's own
    ground-truth sample times, then averaged over the batch, so padded
    positions contribute exactly zero.
    """
    if not cfg.variational:
        mode = "eval"  # deterministic latent init, no sampling
    out = model.forward(batch, mode=mode, rng=rng, deltas=deltas)
    mask = batch.query_mask.unsqueeze(1)  # (B, 1, Tq)
    se = (out.preds - batch.targets) ** 2 * mask
    per_record = se.sum(dim=(1, 2)) / (mask.sum(dim=(1, 2)) * batch.targets.shape[1])
    mse = per_record.mean()
    if cfg.variational:
        kl = gaussian_kl(out.mu, out.log_std).mean()
    else:
        kl = mse.new_zeros(())
    total = mse + cfg.beta_kl * kl + cfg.lambda_lb * out.lb
    breakdown = LossBreakdown(
        float(mse.detach()), float(kl.detach()), float(out.lb.detach()), float(total.detach())
    )
    return total, breakdown, out


def _batches(records: list[Record], batch_size: int, gen: torch.Generator) -> list[list[Record]]:
    order = torch.randperm(len(records), generator=gen).tolist()
    groups: dict[int, list[Record]] = {}
    batches: list[list[Record]] = []
    for idx in order:
        rec = records[idx]
        bucket = groups.setdefault(rec.n_channels, [])
        bucket.append(rec)
        if len(bucket) == batch_size:
            batches.append(bucket.copy())
            bucket.clear()
    for c in sorted(groups):
        if groups[c]:
            batches.append(groups[c])
    return batches


def train(
    records: list[Record],
    model: LassOde,
    cfg: TrainConfig,
    log_path=None,
    checkpoint_dir=None,
) -> list[LossBreakdown]:
    """Adam with gradient clipping over shuffled channel-homogeneous batches."""
    if not records:
        raise ValueError("empty training split")
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps
    )
    shuffle_gen = torch.Generator().manual_seed(cfg.seed)
    curve: list[LossBreakdown] = []
    log_rows = []
    last_good = copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if cfg.cosine_decay:
            import math

            scale = 0.5 * (1 + math.cos(math.pi * epoch / max(1, cfg.epochs)))
            for group in opt.param_groups:
                group["lr"] = cfg.lr * scale
        sums = np.zeros(4)
        count = 0
        for bi, chunk in enumerate(_batches(records, cfg.batch_size, shuffle_gen)):
            noise_rng = torch.Generator().manual_seed(
                cfg.seed * 1_000_003 + epoch * 1_009 + bi
            )
            batch = make_batch(chunk, dtype=model.dtype)
            total, breakdown, _ = compute_loss(model, batch, cfg, noise_rng, mode="train")
            if not torch.isfinite(total):
                model.load_state_dict(last_good)
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            total.backward()
            if cfg.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            opt.step()
            w = len(chunk)
            sums += w * np.array([breakdown.mse, breakdown.kl, breakdown.lb, breakdown.total])
            count += w
        epoch_bd = LossBreakdown(*(sums / count))
        curve.append(epoch_bd)
        last_good = copy.deepcopy(model.state_dict())
        log_rows.append(
            [epoch, epoch_bd.mse, epoch_bd.kl, epoch_bd.lb, epoch_bd.total, time.perf_counter() - t0]
        )
        if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch_{epoch + 1:05d}")
    if log_path:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mse", "kl", "lb", "total", "wall_seconds"])
            writer.writerows(log_rows)
    return curve


# --- gradient verification ----------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_err: float
    frac_within: float
    n_checked: int
    worst_coordinate: str


def _loss_for_check(model, rec, cfg, seed, bank=None):
    rng = torch.Generator().manual_seed(seed)
    batch = make_batch([rec], dtype=model.dtype)
    deltas = None
    if bank is not None:
        from .lora import record_deltas  # lazy: lora depends on this module

        deltas = record_deltas(model, bank, rec)
    total, _, _ = compute_loss(model, batch, cfg, rng, mode="train", deltas=deltas)
    return total


def finite_diff_grad(model, rec, cfg, param: torch.Tensor, flat_index: int, seed: int, step: float = 1e-5, bank=None) -> float:
    """Central difference of the training loss along one parameter coordinate."""
    flat = param.data.reshape(-1)
    orig = float(flat[flat_index])
    with torch.no_grad():
        flat[flat_index] = orig + step
    up = float(_loss_for_check(model, rec, cfg, seed, bank))
    with torch.no_grad():
        flat[flat_index] = orig - step
    dn = float(_loss_for_check(model, rec, cfg, seed, bank))
    with torch.no_grad():
        flat[flat_index] = orig
    return (up - dn) / (2 * step)


def grad_check(
    model: LassOde,
    rec: Record,
    cfg: TrainConfig,
    n_coords: int = 200,
    seed: int = 0,
    step: float = 1e-5,
    tol: float = 1e-4,
    bank=None,
) -> GradCheckResult:
    """Analytic gradients vs central finite differences on sampled coordinates.

    Includes the expert-bank factors when a bank is given (the adapted
    forward is checked end to end). Requires 64-bit parameters.
    """
    if model.dtype != torch.float64:
        raise ValueError("gradient checks need a float64 model")
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if bank is not None:
        named += [(f"bank.{s}.{kind}", t) for s, kind, t in bank.named_factors() if t.requires_grad]
    for _, p in named:
        p.grad = None
    total = _loss_for_check(model, rec, cfg, seed, bank)
    total.backward()

    sizes = np.array([p.numel() for _, p in named])
    cum = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(cum[-1]), size=min(n_coords, int(cum[-1])), replace=False)
    worst = (0.0, "none")
    n_within = 0
    for pick in sorted(picks.tolist()):
        t_idx = int(np.searchsorted(cum, pick, side="right"))
        flat_index = int(pick - (cum[t_idx - 1] if t_idx else 0))
        name, p = named[t_idx]
        analytic = float(p.grad.reshape(-1)[flat_index]) if p.grad is not None else 0.0
        fd = finite_diff_grad(model, rec, cfg, p, flat_index, seed, step, bank)
        denom = max(abs(analytic), abs(fd), 1e-8)
        rel = abs(analytic - fd) / denom
        if max(abs(analytic), abs(fd)) < 1e-12:
            rel = 0.0
        if rel < tol:
            n_within += 1
        if rel > worst[0]:
            worst = (rel, f"{name}[{flat_index}]")
    return GradCheckResult(worst[0], n_within / len(picks), len(picks), worst[1])
