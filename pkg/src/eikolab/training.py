"""Training objective and loop for the neural time field.

Per-sample loss (ablation modes zero out groups of weights):

    L = (lam_e * L_E + lam_td * L_TD + lam_n * L_N + lam_r * L_R) * L_C

where L_E matches gradient magnitudes to the inverse speed, L_TD enforces a
finite-step Bellman decrement, L_N aligns gradients with obstacle normals,
L_R hinges the value between roadmap-derived bounds, and L_C = exp(-lam_c*T)
is a short-paths-first curriculum weight.  Parameter gradients are exact,
including the differentiation through input gradients inside L_E and L_N;
bootstrap targets (stepped evaluations and descent directions in L_TD, and
the exponent in L_C) are held constant during differentiation by default.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import geomenv, timefield
from .geomenv import GridEnv, SpeedField
from .timefield import ArchSpec, FieldEval, TimeFieldModel
from .roadmap import TrainingPair

RATIO_CAP = 1e6
GRAD_NORM_FLOOR = 1e-9


@dataclass(frozen=True)
class LossWeights:
    lambda_e: float = 1.0
    lambda_td: float = 1.0
    lambda_n: float = 1.0
    lambda_r: float = 1.0
    lambda_c: float = 1.0
    delta_t: float = 0.02
    detach_td: bool = True        # freeze stepped targets + descent directions
    detach_causality: bool = True  # freeze T inside the curriculum exponent

    def __post_init__(self):
        for name in ("lambda_e", "lambda_td", "lambda_n", "lambda_r", "lambda_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")


@dataclass(frozen=True)
class TrainingSample:
    pair: TrainingPair
    s_star_s: float
    s_star_g: float
    grad_s_star_s: np.ndarray
    grad_s_star_g: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 512
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    rng_seed: int = 0
    ablation_mode: str = "full"  # full | pde_only | roadmap_only
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    anneal_causality: bool = False  # linear ramp of lambda_c, off by default

    def __post_init__(self):
        if self.ablation_mode not in ("full", "pde_only", "roadmap_only"):
            raise ValueError(f"unknown ablation_mode {self.ablation_mode!r}")


def precompute_samples(env: GridEnv, speed: SpeedField, pairs):
    """Fill in speeds and speed gradients at both endpoints of every pair.

    Pairs closer than 1e-4 are dropped (the distance factor of the model is
    not differentiable at coincidence); returns (samples, n_dropped).
    """
    samples = []
    dropped = 0
    for p in pairs:
        if np.linalg.norm(p.qg - p.qs) < 1e-4:
            dropped += 1
            continue
        sss = geomenv.sample_speed(speed, p.qs)
        ssg = geomenv.sample_speed(speed, p.qg)
        gs, _ = geomenv.speed_gradient(speed, p.qs)
        gg, _ = geomenv.speed_gradient(speed, p.qg)
        samples.append(TrainingSample(pair=p, s_star_s=sss, s_star_g=ssg,
                                      grad_s_star_s=gs, grad_s_star_g=gg))
    if not samples:
        raise ValueError("all pairs dropped by the coincidence filter")
    return samples, dropped


# ---------------------------------------------------------------------------
# Scalar loss terms (unit semantics; the batch path mirrors these exactly)
# ---------------------------------------------------------------------------

def _eikonal_term(s_star, grad_norm):
    ratio = min(s_star * grad_norm, RATIO_CAP)
    return (math.sqrt(ratio) - 1.0) ** 2


def loss_eikonal(ev: FieldEval, sample: TrainingSample) -> float:
    """(sqrt(S*/S) - 1)^2 at both endpoints, with S = 1/|grad T|."""
    return (_eikonal_term(sample.s_star_s, float(np.linalg.norm(ev.grad_qs)))
            + _eikonal_term(sample.s_star_g, float(np.linalg.norm(ev.grad_qg))))


def loss_td(model, sample: TrainingSample, delta_t: float) -> float:
    """Finite-step Bellman residual: stepping delta_t down the field must cut
    T by delta_t / S*.  Stepped points are clamped into the box."""
    p = sample.pair
    ev = timefield.forward_with_input_grads(model, p.qs, p.qg)
    u_g = -ev.grad_qg / max(np.linalg.norm(ev.grad_qg), GRAD_NORM_FLOOR)
    u_s = -ev.grad_qs / max(np.linalg.norm(ev.grad_qs), GRAD_NORM_FLOOR)
    qg_step = np.clip(p.qg + u_g * delta_t, 0.0, 1.0)
    qs_step = np.clip(p.qs + u_s * delta_t, 0.0, 1.0)
    t_step_g = timefield.forward(model, p.qs, qg_step)
    t_step_s = timefield.forward(model, qs_step, p.qg)
    return ((ev.t - delta_t / sample.s_star_g - t_step_g) ** 2
            + (ev.t - delta_t / sample.s_star_s - t_step_s) ** 2)


def _normal_term(s_star, grad_t, grad_s_star):
    norm = np.linalg.norm(grad_s_star)
    if norm < GRAD_NORM_FLOOR:
        return 0.0  # clip plateau: no usable surface normal
    n = grad_s_star / norm
    return (1.0 - s_star) * float(np.sum((s_star * grad_t + n) ** 2))


def loss_normal(ev: FieldEval, sample: TrainingSample) -> float:
    return (_normal_term(sample.s_star_s, ev.grad_qs, sample.grad_s_star_s)
            + _normal_term(sample.s_star_g, ev.grad_qg, sample.grad_s_star_g))


def causality_weight(t_value: float, lambda_c: float) -> float:
    if t_value < 0:
        raise ValueError("t_value must be nonnegative")
    return math.exp(-lambda_c * t_value)


def loss_roadmap(t_value: float, t_lb: float, t_ub: float) -> float:
    if t_lb > t_ub:
        raise ValueError("t_lb must be <= t_ub")
    return max(0.0, t_value - t_ub) + max(0.0, t_lb - t_value)


# ---------------------------------------------------------------------------
# Batched objective with exact parameter gradients
# ---------------------------------------------------------------------------

def batch_from_samples(samples, idx=None):
    """Pack samples into float64 torch tensors (optionally a subset)."""
    sel = samples if idx is None else [samples[int(i)] for i in idx]
    qs = torch.from_numpy(np.stack([s.pair.qs for s in sel]))
    qg = torch.from_numpy(np.stack([s.pair.qg for s in sel]))
    return {
        "qs": qs, "qg": qg,
        "t_lb": torch.from_numpy(np.array([s.pair.t_lb for s in sel])),
        "t_ub": torch.from_numpy(np.array([s.pair.t_ub for s in sel])),
        "sss": torch.from_numpy(np.array([s.s_star_s for s in sel])),
        "ssg": torch.from_numpy(np.array([s.s_star_g for s in sel])),
        "gsss": torch.from_numpy(np.stack([s.grad_s_star_s for s in sel])),
        "gssg": torch.from_numpy(np.stack([s.grad_s_star_g for s in sel])),
    }


def _effective_lambdas(weights: LossWeights, mode: str):
    lam_e, lam_td, lam_n, lam_r = (weights.lambda_e, weights.lambda_td,
                                   weights.lambda_n, weights.lambda_r)
    if mode == "pde_only":
        lam_r = 0.0
    elif mode == "roadmap_only":
        lam_e = lam_td = lam_n = 0.0
    return lam_e, lam_td, lam_n, lam_r


def _eikonal_batch(s_star, grad):
    norm = torch.sqrt(torch.clamp((grad * grad).sum(dim=-1), min=1e-300))
    ratio = torch.clamp(s_star * norm, max=RATIO_CAP)
    return (torch.sqrt(ratio) - 1.0) ** 2


def _normal_batch(s_star, grad_t, grad_s_star):
    norm = torch.linalg.norm(grad_s_star, dim=-1)
    usable = (norm >= GRAD_NORM_FLOOR).to(grad_t.dtype)
    n = grad_s_star / torch.clamp(norm, min=GRAD_NORM_FLOOR).unsqueeze(-1)
    mis = ((s_star.unsqueeze(-1) * grad_t + n) ** 2).sum(dim=-1)
    return usable * (1.0 - s_star) * mis


def make_frozen_context(model, batch, weights: LossWeights, mode: str, flat=None):
    """Bootstrap quantities held constant by the detach flags, evaluated at the
    given parameters.  Finite-difference checks of the training objective must
    reuse one context so the differentiated function matches the gradient."""
    flat = model.params if flat is None else flat
    lam_e, lam_td, lam_n, lam_r = _effective_lambdas(weights, mode)
    ctx = {}
    qs = batch["qs"].clone().requires_grad_(True)
    qg = batch["qg"].clone().requires_grad_(True)
    t = timefield.t_batch(model, qs, qg, flat)
    if lam_td > 0 and weights.detach_td:
        gs, gg = torch.autograd.grad(t.sum(), [qs, qg])
        u_s = -gs / torch.clamp(torch.linalg.norm(gs, dim=-1, keepdim=True),
                                min=GRAD_NORM_FLOOR)
        u_g = -gg / torch.clamp(torch.linalg.norm(gg, dim=-1, keepdim=True),
                                min=GRAD_NORM_FLOOR)
        qs_step = torch.clamp(batch["qs"] + u_s * weights.delta_t, 0.0, 1.0)
        qg_step = torch.clamp(batch["qg"] + u_g * weights.delta_t, 0.0, 1.0)
        with torch.no_grad():
            ctx["t_step_s"] = timefield.t_batch(model, qs_step, batch["qg"], flat)
            ctx["t_step_g"] = timefield.t_batch(model, batch["qs"], qg_step, flat)
    if weights.detach_causality:
        ctx["t_caus"] = t.detach()
    return ctx


def batch_loss(model, batch, weights: LossWeights, mode: str = "full",
               flat=None, frozen=None):
    """Mean per-sample loss as a torch scalar plus raw component means.

    `frozen` carries precomputed bootstrap targets; when omitted and the
    detach flags are on, targets are computed fresh at the current parameters
    (the normal training semantics).
    """
    flat = model.params if flat is None else flat
    lam_e, lam_td, lam_n, lam_r = _effective_lambdas(weights, mode)
    need_input_grads = (lam_e > 0) or (lam_td > 0) or (lam_n > 0)

    qs = batch["qs"].clone().requires_grad_(True) if need_input_grads else batch["qs"]
    qg = batch["qg"].clone().requires_grad_(True) if need_input_grads else batch["qg"]
    t = timefield.t_batch(model, qs, qg, flat)
    if need_input_grads:
        gs, gg = torch.autograd.grad(t.sum(), [qs, qg], create_graph=True)

    zero = torch.zeros_like(t)
    le = ltd = ln = lr = zero
    if lam_e > 0:
        le = _eikonal_batch(batch["sss"], gs) + _eikonal_batch(batch["ssg"], gg)
    if lam_td > 0:
        if frozen is not None and "t_step_s" in frozen:
            t_step_s, t_step_g = frozen["t_step_s"], frozen["t_step_g"]
        elif weights.detach_td:
            live = make_frozen_context(model, batch, weights, mode, flat)
            t_step_s, t_step_g = live["t_step_s"], live["t_step_g"]
        else:
            u_s = -gs / torch.clamp(torch.linalg.norm(gs, dim=-1, keepdim=True),
                                    min=GRAD_NORM_FLOOR)
            u_g = -gg / torch.clamp(torch.linalg.norm(gg, dim=-1, keepdim=True),
                                    min=GRAD_NORM_FLOOR)
            qs_step = torch.clamp(qs + u_s * weights.delta_t, 0.0, 1.0)
            qg_step = torch.clamp(qg + u_g * weights.delta_t, 0.0, 1.0)
            t_step_s = timefield.t_batch(model, qs_step, batch["qg"], flat)
            t_step_g = timefield.t_batch(model, batch["qs"], qg_step, flat)
        ltd = ((t - weights.delta_t / batch["ssg"] - t_step_g) ** 2
               + (t - weights.delta_t / batch["sss"] - t_step_s) ** 2)
    if lam_n > 0:
        ln = (_normal_batch(batch["sss"], gs, batch["gsss"])
              + _normal_batch(batch["ssg"], gg, batch["gssg"]))
    if lam_r > 0:
        lr = (torch.clamp(t - batch["t_ub"], min=0.0)
              + torch.clamp(batch["t_lb"] - t, min=0.0))

    if frozen is not None and "t_caus" in frozen:
        t_caus = frozen["t_caus"]
    elif weights.detach_causality:
        t_caus = t.detach()
    else:
        t_caus = t
    lc = torch.exp(-weights.lambda_c * t_caus)

    per_sample = (lam_e * le + lam_td * ltd + lam_n * ln + lam_r * lr) * lc
    total = per_sample.mean()
    components = {"loss_eikonal": float(le.detach().mean()),
                  "loss_td": float(ltd.detach().mean()),
                  "loss_normal": float(ln.detach().mean()),
                  "loss_roadmap": float(lr.detach().mean()),
                  "causality_mean": float(lc.detach().mean())}
    return total, components


def total_loss_and_grads(model: TimeFieldModel, batch, weights: LossWeights,
                         ablation_mode: str = "full"):
    """Scalar loss and the exact flat parameter gradient."""
    flat = model.params.clone().requires_grad_(True)
    total, _ = batch_loss(model, batch, weights, ablation_mode, flat=flat)
    if not torch.isfinite(total):
        per = _per_sample_finite_scan(model, batch, weights, ablation_mode)
        raise FloatingPointError(f"non-finite loss; first bad sample index {per}")
    (grad,) = torch.autograd.grad(total, [flat])
    return float(total), grad.numpy()


def _per_sample_finite_scan(model, batch, weights, mode):
    n = batch["qs"].shape[0]
    for k in range(n):
        sub = {key: val[k:k + 1] for key, val in batch.items()}
        val, _ = batch_loss(model, sub, weights, mode)
        if not torch.isfinite(val):
            return k
    return -1


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _cosine_lr(base, epoch, total_epochs):
    floor = 0.01 * base
    if total_epochs <= 1:
        return base
    frac = epoch / (total_epochs - 1)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * frac))


def train(env: GridEnv, speed: SpeedField, samples, arch: ArchSpec,
          weights: LossWeights, cfg: TrainConfig):
    """Mini-batch training: one uniformly drawn batch per epoch, AdamW with
    cosine learning-rate decay to 1% of the base rate.  Deterministic per
    seed.  Returns (model, history)."""
    if not samples:
        raise ValueError("no training samples")
    if cfg.batch_size > len(samples):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(samples)}")
    if weights.delta_t < speed.spacing:
        raise ValueError(f"delta_t {weights.delta_t} must be >= grid spacing {speed.spacing}")

    model = timefield.init_model(arch, cfg.rng_seed)
    history = []
    if cfg.epochs == 0:
        return model, history

    flat = model.params.clone().requires_grad_(True)
    opt = torch.optim.AdamW([flat], lr=cfg.learning_rate, betas=cfg.betas,
                            eps=cfg.eps, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.rng_seed, 0x7261696E])
    full = batch_from_samples(samples)
    n = len(samples)
    bad_streak = 0
    for epoch in range(cfg.epochs):
        idx = torch.from_numpy(rng.choice(n, size=cfg.batch_size, replace=False))
        batch = {key: val.index_select(0, idx) for key, val in full.items()}
        w = weights
        if cfg.anneal_causality and cfg.epochs > 1:
            ramp = weights.lambda_c * (epoch / (cfg.epochs - 1))
            w = LossWeights(weights.lambda_e, weights.lambda_td, weights.lambda_n,
                            weights.lambda_r, ramp, weights.delta_t,
                            weights.detach_td, weights.detach_causality)
        for group in opt.param_groups:
            group["lr"] = _cosine_lr(cfg.learning_rate, epoch, cfg.epochs)
        opt.zero_grad(set_to_none=True)
        total, comps = batch_loss(model, batch, w, cfg.ablation_mode, flat=flat)
        if not torch.isfinite(total):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}: {comps}")
        total.backward()
        opt.step()
        row = {"epoch": epoch, "total": float(total)}
        row.update(comps)
        history.append(row)
        bad_streak = bad_streak + 1 if row["total"] > 1e6 else 0
        if bad_streak >= 10:
            raise RuntimeError(f"training diverged: loss > 1e6 for 10 epochs "
                               f"(epoch {epoch}, components {comps})")
    return TimeFieldModel(arch, flat.detach()), history


# ---------------------------------------------------------------------------
# Field-quality evaluation against the fast-marching oracle
# ---------------------------------------------------------------------------

def eval_field(model, oracle_times, query_pairs):
    """Relative time-field error against per-query solved oracles.

    oracle_times[k] must be solved at query_pairs[k]'s goal.  Queries with
    oracle time below 10h are excluded from the error statistics.
    """
    from . import fmm as fmm_mod
    errs = []
    below = 0
    h = oracle_times[0].spacing if oracle_times else 0.0
    qs_arr = np.stack([np.asarray(q[0], dtype=np.float64) for q in query_pairs]) \
        if query_pairs else np.zeros((0, 2))
    qg_arr = np.stack([np.asarray(q[1], dtype=np.float64) for q in query_pairs]) \
        if query_pairs else np.zeros((0, 2))
    t_model = timefield.forward_many(model, qs_arr, qg_arr) if query_pairs else np.zeros(0)
    for k, (qs, qg) in enumerate(query_pairs):
        tg = oracle_times[k]
        if not np.allclose(tg.source, np.asarray(qg, dtype=np.float64)):
            raise ValueError(f"oracle {k} solved at {tg.source}, query goal is {qg}")
        t_true = fmm_mod.oracle_time(tg, qs)
        dist = float(np.linalg.norm(np.asarray(qg) - np.asarray(qs)))
        if t_model[k] < dist:
            below += 1
        if t_true >= 10.0 * h:
            errs.append(abs(t_model[k] - t_true) / t_true)
    errs = np.array(errs)
    return {
        "mean_rel_err": float(errs.mean()) if errs.size else float("nan"),
        "median_rel_err": float(np.median(errs)) if errs.size else float("nan"),
        "n_used": int(errs.size),
        "n_total": len(query_pairs),
        "frac_below_distance": below / max(1, len(query_pairs)),
    }


# ---------------------------------------------------------------------------
# Run directory artifacts
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def resolved_config(arch: ArchSpec, weights: LossWeights, cfg: TrainConfig):
    return {
        "arch": arch.to_dict(),
        "weights": {"lambda_e": weights.lambda_e, "lambda_td": weights.lambda_td,
                    "lambda_n": weights.lambda_n, "lambda_r": weights.lambda_r,
                    "lambda_c": weights.lambda_c, "delta_t": weights.delta_t,
                    "detach_td": weights.detach_td,
                    "detach_causality": weights.detach_causality},
        "train": {"epochs": cfg.epochs, "batch_size": cfg.batch_size,
                  "learning_rate": cfg.learning_rate,
                  "weight_decay": cfg.weight_decay, "rng_seed": cfg.rng_seed,
                  "ablation_mode": cfg.ablation_mode, "betas": list(cfg.betas),
                  "eps": cfg.eps, "anneal_causality": cfg.anneal_causality},
    }


def write_run_dir(out_dir, model: TimeFieldModel, history, arch: ArchSpec,
                  weights: LossWeights, cfg: TrainConfig):
    """config.json + history.csv + checkpoint + model card."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = resolved_config(arch, weights, cfg)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    with open(out / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "loss_eikonal", "loss_td",
                         "loss_normal", "loss_roadmap", "causality_mean"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["total"]),
                             repr(row["loss_eikonal"]), repr(row["loss_td"]),
                             repr(row["loss_normal"]), repr(row["loss_roadmap"]),
                             repr(row["causality_mean"])])
    timefield.save_model(model, out / "checkpoint.bin")
    card = {"arch": arch.to_dict(), "seed": cfg.rng_seed,
            "config_digest": config_digest(config)}
    (out / "model_card.json").write_text(json.dumps(card, indent=2, sort_keys=True) + "\n")
    return out
