"""Small multi-label convolutional classifier.

Exposes everything downstream stages need: per-class sigmoid scores, the
penultimate feature z (global average pool of the last conv map), the spatial
feature map together with the final linear weights for localization maps, and
gradients of arbitrary scalar losses. Gradients come from autograd and are
cross-checked against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .imgio import pack_tensor, unpack_tensors

_MAGIC = b"WOODNET1"
_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    n_classes: int
    image_size: int = 64
    channels: tuple[int, ...] = (16, 32, 32)  # last entry is d
    kernel: int = 3
    init_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if len(self.channels) < 2:
            raise ValueError("need at least two conv layers")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if self.image_size % (2 ** len(self.channels)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by the "
                f"2^{len(self.channels)} downsampling factor"
            )

    @property
    def d(self) -> int:
        return self.channels[-1]

    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_descriptor(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "image_size": self.image_size,
            "channels": list(self.channels),
            "kernel": self.kernel,
            "init_seed": self.init_seed,
            "dtype": self.dtype,
        }

    @staticmethod
    def from_descriptor(desc: dict) -> "NetConfig":
        return NetConfig(
            n_classes=int(desc["n_classes"]),
            image_size=int(desc["image_size"]),
            channels=tuple(int(c) for c in desc["channels"]),
            kernel=int(desc["kernel"]),
            init_seed=int(desc["init_seed"]),
            dtype=str(desc["dtype"]),
        )


@dataclass
class ForwardResult:
    """scores = sigmoid(W z + b); z = spatial mean of feature_map."""

    scores: torch.Tensor  # (B, C) in (0, 1)
    z: torch.Tensor  # (B, d)
    feature_map: torch.Tensor  # (B, d, h, w), post-ReLU


class _Backbone(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        convs = []
        in_ch = 1
        for out_ch in config.channels:
            convs.append(
                nn.Conv2d(in_ch, out_ch, config.kernel, stride=2,
                          padding=config.kernel // 2)
            )
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(config.d, config.n_classes)

    def feature_map(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.convs:
            x = torch.relu(conv(x))
        return x


class ClassifierState:
    """Parameters plus architecture descriptor; forward is deterministic."""

    def __init__(self, config: NetConfig):
        self.config = config
        self.module = _Backbone(config).to(config.torch_dtype())
        self._he_init(config.init_seed)

    def _he_init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.module.convs:
                fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
                std = (2.0 / fan_in) ** 0.5
                conv.weight.normal_(0.0, std, generator=gen)
                conv.bias.zero_()
            head = self.module.head
            std = (2.0 / head.weight.shape[1]) ** 0.5
            head.weight.normal_(0.0, std, generator=gen)
            head.bias.zero_()

    @property
    def d(self) -> int:
        return self.config.d

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        return list(self.module.named_parameters())

    def parameter_count(self) -> int:
        return sum(p.numel() for _, p in self.named_parameters())

    def head_weight(self) -> torch.Tensor:
        """Final linear weights, shape (n_classes, d); these drive the CAM."""
        return self.module.head.weight

    def zero_parameters(self) -> None:
        with torch.no_grad():
            for _, p in self.named_parameters():
                p.zero_()


def _as_batch(state: ClassifierState, image) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(np.asarray(image), dtype=state.config.torch_dtype())
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 3:
        raise ValueError(f"expected (H, W) or (B, H, W) input, got shape {tuple(x.shape)}")
    size = state.config.image_size
    if x.shape[-2:] != (size, size):
        raise ValueError(f"expected {size}x{size} input, got {tuple(x.shape[-2:])}")
    return x.unsqueeze(1), single  # add channel axis


def forward(state: ClassifierState, image) -> ForwardResult:
    """Run the classifier on one (H, W) image or a (B, H, W) batch."""
    x, single = _as_batch(state, image)
    fm = state.module.feature_map(x)
    z = fm.mean(dim=(2, 3))
    scores = torch.sigmoid(state.module.head(z))
    if single:
        return ForwardResult(scores=scores[0], z=z[0], feature_map=fm[0])
    return ForwardResult(scores=scores, z=z, feature_map=fm)


def forward_numpy(state: ClassifierState, images) -> tuple[np.ndarray, np.ndarray]:
    """(scores, z) as numpy, no autograd; for ranking, clustering, dumps."""
    with torch.no_grad():
        res = forward(state, images)
    return res.scores.numpy().copy(), res.z.numpy().copy()


def grad(state: ClassifierState, loss_closure) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss w.r.t. every parameter.

    `loss_closure()` must return a scalar tensor computed from this state's
    parameters (typically via forward()). A loss that does not depend on the
    parameters yields all-zero gradients.
    """
    for _, p in state.named_parameters():
        p.grad = None
    value = loss_closure()
    if not torch.is_tensor(value) or value.dim() != 0:
        raise ValueError("loss closure must return a scalar tensor")
    if not torch.isfinite(value):
        raise FloatingPointError(f"non-finite loss: {value.item()!r}")
    if value.requires_grad:
        value.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in state.named_parameters()
    }


def finite_diff_grad(
    state: ClassifierState, loss_closure, eps: float = 1e-4
) -> dict[str, torch.Tensor]:
    """Central-difference gradients; the independent oracle for grad()."""
    out: dict[str, torch.Tensor] = {}
    with torch.no_grad():
        for name, p in state.named_parameters():
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(loss_closure())
                flat[i] = orig - eps
                lo = float(loss_closure())
                flat[i] = orig
                gflat[i] = (hi - lo) / (2.0 * eps)
            out[name] = g
    return out


def relu_preactivation_margin(state: ClassifierState, images) -> float:
    """Smallest |pre-activation| over every conv cell and image.

    Central differences straddle the ReLU kink whenever a cell's
    pre-activation lies within eps of zero, so gradient checks should run on
    instances whose margin comfortably exceeds the probe eps.
    """
    x, _ = _as_batch(state, images if np.asarray(images).ndim == 3 else np.asarray(images)[None])
    margin = float("inf")
    with torch.no_grad():
        for conv in state.module.convs:
            pre = conv(x)
            margin = min(margin, pre.abs().min().item())
            x = torch.relu(pre)
    return margin


def max_relative_gradient_error(
    analytic: dict[str, torch.Tensor], numeric: dict[str, torch.Tensor]
) -> float:
    """max over elements of |a - n| / max(|a|, |n|, scale floor)."""
    if analytic.keys() != numeric.keys():
        raise ValueError("gradient dicts cover different parameters")
    scale = max(
        max((g.abs().max().item() for g in analytic.values()), default=0.0),
        max((g.abs().max().item() for g in numeric.values()), default=0.0),
        1e-12,
    )
    floor = 1e-6 * scale
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        num = (a - n).abs()
        den = torch.maximum(a.abs(), n.abs()).clamp_min(floor)
        rel = torch.where(num <= floor, torch.zeros_like(num), num / den)
        worst = max(worst, rel.max().item())
    return worst


def sgd_step(
    state: ClassifierState, grads: dict[str, torch.Tensor], lr: float
) -> ClassifierState:
    """Plain SGD update p <- p - lr * g, in place; returns the state."""
    params = dict(state.named_parameters())
    if set(grads) != set(params):
        raise ValueError("gradients do not align with parameters")
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != {tuple(p.shape)}")
            p.add_(g.to(p.dtype), alpha=-lr)
    return state


def save_checkpoint(state: ClassifierState, path: str | Path) -> None:
    """Binary container: magic, version, JSON descriptor, then named float32
    little-endian tensors."""
    desc = json.dumps(state.config.to_descriptor()).encode("utf-8")
    tensors = [(name, p.detach().numpy()) for name, p in state.named_parameters()]
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            fh.write(pack_tensor(name, arr))


def load_checkpoint(path: str | Path) -> ClassifierState:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a classifier checkpoint")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (desc_len,) = struct.unpack_from("<I", blob, 12)
    desc = json.loads(blob[16 : 16 + desc_len].decode("utf-8"))
    off = 16 + desc_len
    (count,) = struct.unpack_from("<I", blob, off)
    tensors = dict(unpack_tensors(blob[off + 4 :], count))
    state = ClassifierState(NetConfig.from_descriptor(desc))
    params = dict(state.named_parameters())
    if set(tensors) != set(params):
        raise ValueError(f"{path}: checkpoint tensors do not match architecture")
    with torch.no_grad():
        for name, p in params.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{path}: tensor {name} has shape {arr.shape}, expected {tuple(p.shape)}")
            p.copy_(torch.as_tensor(arr, dtype=p.dtype))
    return state
