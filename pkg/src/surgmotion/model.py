"""The optimizable motion representation.

Per-frame invertible maps into a shared canonical 3D volume, implemented as a
stack of affine coupling layers conditioned on a per-frame latent code, plus a
coordinate MLP producing density and color for canonical points.  All local 3D
coordinates live in the normalized box [-1, 1]^3.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

CHECKPOINT_MAGIC = b"SMCK"
CHECKPOINT_VERSION = 1
LOG_SCALE_BOUND = 6.0


@dataclass
class ModelConfig:
    num_frames: int
    num_coupling_layers: int = 6
    conditioner_hidden: int = 64
    latent_dim: int = 16
    canonical_hidden: int = 64
    pe_octaves: int = 4
    dtype: str = "float32"  # "float64" for gradient-check mode

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def _mlp(in_dim: int, hidden: int, out_dim: int, zero_last: bool) -> nn.Sequential:
    layers = [
        nn.Linear(in_dim, hidden), nn.ReLU(),
        nn.Linear(hidden, hidden), nn.ReLU(),
        nn.Linear(hidden, out_dim),
    ]
    if zero_last:
        nn.init.zeros_(layers[-1].weight)
        nn.init.zeros_(layers[-1].bias)
    return nn.Sequential(*layers)


def positional_encoding(x: torch.Tensor, octaves: int) -> torch.Tensor:
    """[x, sin(2^k pi x), cos(2^k pi x)] features for k < octaves."""
    feats = [x]
    for k in range(octaves):
        freq = (2.0 ** k) * torch.pi
        feats.append(torch.sin(freq * x))
        feats.append(torch.cos(freq * x))
    return torch.cat(feats, dim=-1)


class CouplingLayer(nn.Module):
    """Affine coupling over 3 coordinates: one coordinate is rescaled/shifted
    by a conditioner of the other two plus the frame latent.

    The kept coordinates are positionally encoded before the conditioner so
    nearby rays can move differently (sharp object boundaries).  The
    log-scale passes through a saturating tanh bound so |log s| <= 6, which
    keeps the inverse numerically well-posed for any parameters.
    Zero-initializing the conditioner's output layer makes the layer the
    identity map.
    """

    def __init__(self, active_coord: int, hidden: int, latent_dim: int,
                 pe_octaves: int = 4):
        super().__init__()
        self.active = active_coord
        self.passive = [i for i in range(3) if i != active_coord]
        self.pe_octaves = pe_octaves
        in_dim = 2 * (1 + 2 * pe_octaves) + latent_dim
        self.conditioner = _mlp(in_dim, hidden, 2, zero_last=True)

    def _scale_shift(self, x: torch.Tensor, psi: torch.Tensor):
        kept = positional_encoding(x[..., self.passive], self.pe_octaves)
        raw = self.conditioner(torch.cat([kept, psi], dim=-1))
        log_s = LOG_SCALE_BOUND * torch.tanh(raw[..., 0] / LOG_SCALE_BOUND)
        return log_s, raw[..., 1]

    def forward(self, x: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        log_s, t = self._scale_shift(x, psi)
        out = x.clone()
        out[..., self.active] = x[..., self.active] * torch.exp(log_s) + t
        return out

    def inverse(self, y: torch.Tensor, psi: torch.Tensor) -> torch.Tensor:
        log_s, t = self._scale_shift(y, psi)  # passive coords unchanged by forward
        out = y.clone()
        out[..., self.active] = (y[..., self.active] - t) * torch.exp(-log_s)
        return out


class CanonicalNet(nn.Module):
    """Coordinate MLP over positionally-encoded canonical points -> (density, color)."""

    def __init__(self, hidden: int, octaves: int):
        super().__init__()
        self.octaves = octaves
        in_dim = 3 + 3 * 2 * octaves
        self.net = _mlp(in_dim, hidden, 4, zero_last=False)

    def forward(self, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        raw = self.net(positional_encoding(u, self.octaves))
        sigma = torch.nn.functional.softplus(raw[..., 0])
        color = torch.sigmoid(raw[..., 1:4])
        return sigma, color


class MotionModel(nn.Module):
    """Everything the per-video optimization fits: coupling stack, per-frame
    latents, and the canonical density/color network."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(
            CouplingLayer(i % 3, config.conditioner_hidden, config.latent_dim,
                          config.pe_octaves)
            for i in range(config.num_coupling_layers)
        )
        self.latents = nn.Parameter(
            0.01 * torch.randn(config.num_frames, config.latent_dim)
        )
        self.canonical = CanonicalNet(config.canonical_hidden, config.pe_octaves)
        self.to(config.torch_dtype)

    def _psi(self, frame, n: int) -> torch.Tensor:
        if isinstance(frame, int):
            return self.latents[frame].unsqueeze(0).expand(n, -1)
        return self.latents[frame]  # per-point frame indices

    def map_to_canonical(self, x: torch.Tensor, frame) -> torch.Tensor:
        """u = T_frame(x) for x of shape (N, 3)."""
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input to map_to_canonical")
        psi = self._psi(frame, x.shape[0])
        for layer in self.layers:
            x = layer(x, psi)
        return x

    def map_from_canonical(self, u: torch.Tensor, frame) -> torch.Tensor:
        """x = T_frame^{-1}(u), via the closed-form coupling inverses."""
        if not torch.isfinite(u).all():
            raise ValueError("non-finite input to map_from_canonical")
        psi = self._psi(frame, u.shape[0])
        for layer in reversed(self.layers):
            u = layer.inverse(u, psi)
        return u

    def query_canonical(self, u: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Density (>= 0) and color (in [0,1]^3) at canonical points (N, 3)."""
        if not torch.isfinite(u).all():
            raise ValueError("non-finite input to query_canonical")
        return self.canonical(u)


class ParameterStore:
    """Flat view of a model's parameters and gradients.

    The underlying storage is the model itself; this class provides the flat
    get/set/grad interface the optimizer works against.
    """

    def __init__(self, model: MotionModel):
        self.model = model
        self._params = list(model.parameters())

    @property
    def num_params(self) -> int:
        return sum(p.numel() for p in self._params)

    def get_flat(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self._params])

    def set_flat(self, flat: torch.Tensor):
        if flat.numel() != self.num_params:
            raise ValueError(f"expected {self.num_params} values, got {flat.numel()}")
        offset = 0
        with torch.no_grad():
            for p in self._params:
                n = p.numel()
                p.copy_(flat[offset:offset + n].reshape(p.shape))
                offset += n

    def grads_flat(self) -> torch.Tensor:
        out = []
        for p in self._params:
            if p.grad is None:
                out.append(torch.zeros(p.numel(), dtype=p.dtype))
            else:
                out.append(p.grad.detach().reshape(-1))
        return torch.cat(out)

    def zero_grads(self):
        for p in self._params:
            if p.grad is not None:
                p.grad.zero_()

    def backward(self, loss: torch.Tensor):
        """Accumulate d(loss)/d(theta) into the gradient buffers."""
        if loss.dim() != 0:
            raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
        loss.backward()


def save_checkpoint(model: MotionModel, path: str | Path):
    """Versioned binary checkpoint: SMCK magic, header, float32 parameter blob.

    See docs/checkpoint_format.md for the exact byte layout.
    """
    cfg = model.config
    store = ParameterStore(model)
    flat = store.get_flat().to(torch.float32).numpy()
    header = struct.pack(
        "<4sIIIIIII",
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
        cfg.num_frames, cfg.num_coupling_layers, cfg.conditioner_hidden,
        cfg.latent_dim, cfg.canonical_hidden, cfg.pe_octaves,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.astype("<f4").tobytes())


def load_checkpoint(path: str | Path, dtype: str = "float32") -> MotionModel:
    data = Path(path).read_bytes()
    magic, version, frames, layers, hidden, latent, chidden, octaves = struct.unpack(
        "<4sIIIIIII", data[:32]
    )
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a SMCK checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack("<Q", data[32:40])
    import numpy as np

    flat = np.frombuffer(data[40:], dtype="<f4", count=count)
    cfg = ModelConfig(
        num_frames=frames, num_coupling_layers=layers, conditioner_hidden=hidden,
        latent_dim=latent, canonical_hidden=chidden, pe_octaves=octaves, dtype=dtype,
    )
    model = MotionModel(cfg)
    store = ParameterStore(model)
    store.set_flat(torch.from_numpy(flat.copy()).to(cfg.torch_dtype))
    return model
