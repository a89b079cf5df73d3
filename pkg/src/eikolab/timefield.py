"""Symmetric factorized neural travel-time field T(qs, qg) = |qs - qg| / tau.

tau is produced by a Fourier-featurized, gated-residual MLP and squashed into
[tau_floor, 1], so three properties hold for every parameter setting:
T(a, b) = T(b, a) (symmetric combiner), T(q, q) = 0, and T >= |a - b|.
All math runs in float64; input gradients come from reverse-mode autodiff and
stay differentiable w.r.t. parameters (needed by the PDE losses).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

CHECKPOINT_FORMAT = "eikolab-timefield"
CHECKPOINT_VERSION = 1

torch.set_default_dtype(torch.float64)


@dataclass(frozen=True)
class ArchSpec:
    dim: int
    fourier_bands: int = 6
    hidden_width: int = 128
    num_blocks: int = 3
    tau_floor: float = 0.05

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.fourier_bands < 0 or self.hidden_width < 1 or self.num_blocks < 0:
            raise ValueError("invalid architecture sizes")
        if not (0.0 < self.tau_floor < 0.5):
            raise ValueError("tau_floor must be in (0, 0.5)")

    @property
    def encoder_input(self):
        return self.dim * (1 + 2 * self.fourier_bands)

    def to_dict(self):
        return {"dim": self.dim, "fourier_bands": self.fourier_bands,
                "hidden_width": self.hidden_width, "num_blocks": self.num_blocks,
                "tau_floor": self.tau_floor}

    @staticmethod
    def from_dict(d):
        return ArchSpec(dim=int(d["dim"]), fourier_bands=int(d["fourier_bands"]),
                        hidden_width=int(d["hidden_width"]),
                        num_blocks=int(d["num_blocks"]),
                        tau_floor=float(d["tau_floor"]))


def _layout(arch: ArchSpec):
    """Flat parameter layout: ordered (name, offset, shape)."""
    w, e = arch.hidden_width, arch.encoder_input
    entries = [("enc1_w", (w, e)), ("enc1_b", (w,)),
               ("enc2_w", (w, w)), ("enc2_b", (w,)),
               ("trunk_w", (w, 2 * w)), ("trunk_b", (w,))]
    for k in range(arch.num_blocks):
        entries += [(f"blk{k}_w1", (w, w)), (f"blk{k}_b1", (w,)),
                    (f"blk{k}_w2", (w, w)), (f"blk{k}_b2", (w,)),
                    (f"blk{k}_gate", (w,))]
    entries += [("head_w", (1, w)), ("head_b", (1,))]
    out = []
    offset = 0
    for name, shape in entries:
        out.append((name, offset, shape))
        offset += int(np.prod(shape))
    return tuple(out), offset


class TimeFieldModel:
    """Architecture descriptor plus one flat float64 parameter vector."""

    def __init__(self, arch: ArchSpec, params: torch.Tensor):
        layout, count = _layout(arch)
        params = params.detach().clone().to(torch.float64)
        if params.shape != (count,):
            raise ValueError(f"expected {count} parameters, got {tuple(params.shape)}")
        if not torch.all(torch.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.arch = arch
        self.params = params
        self.layout = layout
        self.param_count = count

    def views(self, flat=None):
        flat = self.params if flat is None else flat
        return {name: flat.narrow(0, off, int(np.prod(shape))).view(shape)
                for name, off, shape in self.layout}

    def clone(self):
        return TimeFieldModel(self.arch, self.params)


@dataclass(frozen=True)
class FieldEval:
    t: float
    grad_qs: np.ndarray
    grad_qg: np.ndarray


class FrozenTauField:
    """Analytic stand-in with constant tau: T = |qs - qg| / tau.

    Used by tests and planners as the exactly-known cone field.
    """

    def __init__(self, tau: float, dim: int):
        if not (0.0 < tau <= 1.0):
            raise ValueError("tau must be in (0, 1]")
        self.tau = float(tau)
        self.dim = dim


def init_model(arch: ArchSpec, rng_seed: int = 0) -> TimeFieldModel:
    """Fan-based uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases,
    zero residual gates so every block starts as the identity."""
    rng = np.random.default_rng(rng_seed)
    layout, count = _layout(arch)
    flat = np.zeros(count, dtype=np.float64)
    for name, off, shape in layout:
        size = int(np.prod(shape))
        if name.endswith("_w") or "_w1" in name or "_w2" in name:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            flat[off:off + size] = rng.uniform(-bound, bound, size=size)
        # biases and gates stay zero
    return TimeFieldModel(arch, torch.from_numpy(flat))


def _encode(q, bands):
    feats = [q]
    for level in range(bands):
        f = (2.0 ** level) * np.pi * q
        feats.append(torch.sin(f))
        feats.append(torch.cos(f))
    return torch.cat(feats, dim=-1)


def _tau_batch(model: TimeFieldModel, qs, qg, flat=None):
    v = model.views(flat)
    arch = model.arch

    def enc(q):
        x = _encode(q, arch.fourier_bands)
        x = F.silu(F.linear(x, v["enc1_w"], v["enc1_b"]))
        return F.silu(F.linear(x, v["enc2_w"], v["enc2_b"]))

    f_s = enc(qs)
    f_g = enc(qg)
    x = torch.cat([f_s + f_g, f_s * f_g], dim=-1)
    x = F.silu(F.linear(x, v["trunk_w"], v["trunk_b"]))
    for k in range(arch.num_blocks):
        hidden = F.silu(F.linear(x, v[f"blk{k}_w1"], v[f"blk{k}_b1"]))
        hidden = F.linear(hidden, v[f"blk{k}_w2"], v[f"blk{k}_b2"])
        x = x + v[f"blk{k}_gate"] * hidden
    s = F.linear(x, v["head_w"], v["head_b"]).squeeze(-1)
    return arch.tau_floor + (1.0 - arch.tau_floor) * torch.sigmoid(s)


def t_batch(model, qs, qg, flat=None):
    """Travel time for torch batches (N, dim); differentiable."""
    if isinstance(model, FrozenTauField):
        return torch.linalg.norm(qg - qs, dim=-1) / model.tau
    return torch.linalg.norm(qg - qs, dim=-1) / _tau_batch(model, qs, qg, flat)


def _as_points(model, qs, qg):
    dim = model.dim if isinstance(model, FrozenTauField) else model.arch.dim
    qs = np.asarray(qs, dtype=np.float64).reshape(-1, dim)
    qg = np.asarray(qg, dtype=np.float64).reshape(-1, dim)
    if not (np.all(np.isfinite(qs)) and np.all(np.isfinite(qg))):
        raise ValueError("non-finite query point")
    return qs, qg


def forward_many(model, qs, qg):
    qs, qg = _as_points(model, qs, qg)
    with torch.no_grad():
        t = t_batch(model, torch.from_numpy(qs), torch.from_numpy(qg))
    return t.numpy()


def forward(model, qs, qg) -> float:
    return float(forward_many(model, qs, qg)[0])


def grads_many(model, qs, qg):
    """(t, dT/dqs, dT/dqg) as numpy arrays for a batch of point pairs."""
    qs, qg = _as_points(model, qs, qg)
    if isinstance(model, FrozenTauField):
        delta = qg - qs
        norm = np.linalg.norm(delta, axis=-1, keepdims=True)
        g = delta / (model.tau * norm)
        return (np.linalg.norm(delta, axis=-1) / model.tau), -g, g
    qs_t = torch.from_numpy(qs).requires_grad_(True)
    qg_t = torch.from_numpy(qg).requires_grad_(True)
    t = t_batch(model, qs_t, qg_t)
    gs, gg = torch.autograd.grad(t.sum(), [qs_t, qg_t])
    return t.detach().numpy(), gs.numpy(), gg.numpy()


def forward_with_input_grads(model, qs, qg) -> FieldEval:
    qs_a, qg_a = _as_points(model, qs, qg)
    if np.linalg.norm(qg_a[0] - qs_a[0]) < 1e-6:
        raise ValueError("forward_with_input_grads requires |qs - qg| >= 1e-6 "
                         "(the distance factor is not differentiable at coincidence)")
    t, gs, gg = grads_many(model, qs_a, qg_a)
    return FieldEval(t=float(t[0]), grad_qs=gs[0], grad_qg=gg[0])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(model: TimeFieldModel, path):
    """JSON header line + raw little-endian float64 parameter block."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "param_count": model.param_count,
    }
    buf = io.BytesIO()
    buf.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
    buf.write(model.params.numpy().astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> TimeFieldModel:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: unreadable checkpoint header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a time-field checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    arch = ArchSpec.from_dict(header["arch"])
    _, count = _layout(arch)
    if header["param_count"] != count:
        raise ValueError(f"{path}: header param_count {header['param_count']} "
                         f"does not match architecture ({count})")
    blob = data[nl + 1:]
    if len(blob) != 8 * count:
        raise ValueError(f"{path}: parameter block truncated "
                         f"({len(blob)} bytes, expected {8 * count})")
    params = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    return TimeFieldModel(arch, torch.from_numpy(params))
