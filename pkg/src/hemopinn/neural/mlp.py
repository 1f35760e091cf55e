"""Swish multilayer perceptrons evaluated on jets, flat parameter vectors."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .jet import Jet, basis, linear, swish_jet

DTYPE = torch.float64


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Network shape plus fixed (non-trainable) input and output affine maps.

    The network computes ``out_shift + out_scale * net((x - in_shift) / in_scale)``.
    """

    input_dim: int
    hidden_layers: int
    width: int
    output_dim: int
    activation: str = "swish"
    in_shift: tuple[float, ...] = ()
    in_scale: tuple[float, ...] = ()
    out_shift: tuple[float, ...] = ()
    out_scale: tuple[float, ...] = ()

    def __post_init__(self):
        if self.hidden_layers < 1 or self.width < 1:
            raise ValueError("hidden_layers and width must be >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if self.activation not in ("swish", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        for name, n in (("in_shift", self.input_dim), ("in_scale", self.input_dim),
                        ("out_shift", self.output_dim), ("out_scale", self.output_dim)):
            val = getattr(self, name)
            if val and len(val) != n:
                raise ValueError(f"{name} needs {n} entries")
            object.__setattr__(self, name, tuple(float(x) for x in val))

    @property
    def shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.width] * self.hidden_layers + [self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)


class ParamVector:
    """Flat float64 vector with named, contiguous slices."""

    def __init__(self, data: torch.Tensor, slices: dict[str, tuple[int, int]]):
        data = torch.as_tensor(data, dtype=DTYPE)
        end = 0
        for name, (a, b) in slices.items():
            if a != end or b < a:
                raise ValueError(f"slice {name!r} does not continue the partition")
            end = b
        if end != data.numel():
            raise ValueError("slices do not cover the vector")
        self.data = data
        self.slices = dict(slices)

    @classmethod
    def concat(cls, parts: dict[str, torch.Tensor]) -> "ParamVector":
        slices, off = {}, 0
        for name, t in parts.items():
            slices[name] = (off, off + t.numel())
            off += t.numel()
        data = torch.cat([torch.as_tensor(t, dtype=DTYPE).reshape(-1) for t in parts.values()]) if parts else torch.zeros(0, dtype=DTYPE)
        return cls(data, slices)

    def __getitem__(self, name: str) -> torch.Tensor:
        a, b = self.slices[name]
        return self.data[a:b]

    def view(self, theta: torch.Tensor, name: str) -> torch.Tensor:
        a, b = self.slices[name]
        return theta[a:b]

    def mask(self, name: str) -> torch.Tensor:
        m = torch.zeros(self.data.numel(), dtype=torch.bool)
        a, b = self.slices[name]
        m[a:b] = True
        return m

    def replace(self, data: torch.Tensor) -> "ParamVector":
        return ParamVector(data.detach().clone(), self.slices)

    def __len__(self) -> int:
        return self.data.numel()


def init_params(spec: MlpSpec, seed: int) -> torch.Tensor:
    """Glorot-uniform weights and zero biases, flattened layer by layer."""
    g = torch.Generator().manual_seed(int(seed))
    chunks = []
    for fan_out, fan_in in spec.shapes:
        a = math.sqrt(6.0 / (fan_in + fan_out))
        W = (torch.rand((fan_out, fan_in), generator=g, dtype=DTYPE) * 2 - 1) * a
        chunks += [W.reshape(-1), torch.zeros(fan_out, dtype=DTYPE)]
    return torch.cat(chunks)


def unpack(theta: torch.Tensor, spec: MlpSpec) -> list[tuple[torch.Tensor, torch.Tensor]]:
    if theta.numel() != spec.n_params:
        raise ValueError(f"expected {spec.n_params} parameters, got {theta.numel()}")
    out, off = [], 0
    for fan_out, fan_in in spec.shapes:
        W = theta[off:off + fan_out * fan_in].reshape(fan_out, fan_in)
        off += fan_out * fan_in
        b = theta[off:off + fan_out]
        off += fan_out
        out.append((W, b))
    return out


def forward_jet(theta: torch.Tensor, spec: MlpSpec, points, degree: int) -> Jet:
    """Network outputs as a jet of shape (ncoef, B, output_dim).

    ``points`` is a (B, input_dim) array; ``jet[..., k]`` selects output k and
    ``jet.d(*alpha)`` returns the partial derivative of multi-index alpha.
    """
    if degree not in (0, 1, 2, 3):
        raise ValueError("degree must be 0..3")
    pts = torch.as_tensor(np.asarray(points) if not torch.is_tensor(points) else points, dtype=DTYPE)
    if pts.ndim != 2 or pts.shape[1] != spec.input_dim:
        raise ValueError(f"points must have shape (B, {spec.input_dim})")
    x = basis(spec.input_dim, degree).variables(pts)
    if spec.in_shift:
        x = x - torch.tensor(spec.in_shift, dtype=DTYPE)
    if spec.in_scale:
        x = x * (1.0 / torch.tensor(spec.in_scale, dtype=DTYPE))
    layers = unpack(theta, spec)
    act = swish_jet if spec.activation == "swish" else (lambda j: j)
    for W, b in layers[:-1]:
        x = act(linear(x, W, b))
    W, b = layers[-1]
    y = linear(x, W, b)
    if spec.out_scale:
        y = y * torch.tensor(spec.out_scale, dtype=DTYPE)
    if spec.out_shift:
        y = y + torch.tensor(spec.out_shift, dtype=DTYPE)
    return y


def forward(theta: torch.Tensor, spec: MlpSpec, points) -> torch.Tensor:
    """Plain values, (B, output_dim)."""
    return forward_jet(theta, spec, points, 0).value


def loss_gradient(params: ParamVector, batch, closure: Callable[[torch.Tensor, object], torch.Tensor]):
    """Scalar loss and its gradient over the whole vector.

    ``closure(theta, batch)`` builds the loss from a leaf tensor ``theta``.
    """
    theta = params.data.detach().clone().requires_grad_(True)
    loss = closure(theta, batch)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {float(loss.detach())}")
    (grad,) = torch.autograd.grad(loss, theta, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(theta)
    if not torch.isfinite(grad).all():
        raise NonFiniteLoss("gradient has non-finite entries")
    return float(loss.detach()), grad.detach()


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(directory, params: ParamVector, header: dict, extra: dict[str, np.ndarray] | None = None) -> None:
    """``params.npy`` (little-endian float64) plus ``header.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "params.npy", params.data.detach().numpy().astype("<f8"), allow_pickle=False)
    for name, arr in (extra or {}).items():
        np.save(d / f"{name}.npy", np.asarray(arr, dtype="<f8"), allow_pickle=False)
    head = dict(header)
    head["slices"] = {k: list(v) for k, v in params.slices.items()}
    (d / "header.json").write_text(json.dumps(head, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[ParamVector, dict]:
    d = Path(directory)
    head = json.loads((d / "header.json").read_text())
    data = torch.from_numpy(np.load(d / "params.npy", allow_pickle=False).astype(np.float64))
    slices = {k: tuple(v) for k, v in head["slices"].items()}
    return ParamVector(data, slices), head


def spec_dict(spec: MlpSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}
