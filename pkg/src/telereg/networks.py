"""Learnable components: point-set encoders, registration and completion networks.

All modules take ``(B, N, 3)`` float tensors. ``N`` is fixed per model by
``NetConfig.num_points`` (2048 at full scale) and the completion network
emits missing-part levels of ``N/16``, ``N/4`` and ``N`` points.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import tgeometry as tg

REG_WIDTHS = (64, 128, 256, 512)
COMP_WIDTHS = (64, 128, 256, 512, 1024, 1920)
WIDTH_PRESETS = {"full": 1, "tiny": 16}
CHILDREN = 4


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    width_scale: int = 1
    num_points: int = 2048

    def __post_init__(self):
        if self.width_scale < 1 or any(w % self.width_scale for w in REG_WIDTHS + COMP_WIDTHS):
            raise ValueError(f"width scale {self.width_scale} must divide every layer width")
        if self.num_points < 16 or self.num_points % 16:
            raise ValueError("num_points must be a positive multiple of 16")

    @classmethod
    def preset(cls, width: str | int = "full", num_points: int = 2048) -> "NetConfig":
        scale = WIDTH_PRESETS[width] if isinstance(width, str) else int(width)
        return cls(width_scale=scale, num_points=num_points)

    @property
    def levels(self) -> tuple[int, int, int]:
        n = self.num_points
        return (n // 16, n // 4, n)

    @property
    def reg_widths(self) -> tuple[int, ...]:
        return tuple(w // self.width_scale for w in REG_WIDTHS)

    @property
    def comp_widths(self) -> tuple[int, ...]:
        return tuple(w // self.width_scale for w in COMP_WIDTHS)

    def to_dict(self) -> dict:
        return asdict(self)


def _mlp(widths, final_act=False) -> nn.Sequential:
    layers = []
    for i in range(len(widths) - 1):
        layers.append(nn.Linear(widths[i], widths[i + 1]))
        if i < len(widths) - 2 or final_act:
            layers.append(nn.LeakyReLU(0.1))
    return nn.Sequential(*layers)


def _head(n_in: int, n_out: int) -> nn.Sequential:
    """Three fully connected layers with halving hidden widths."""
    return _mlp((n_in, n_in // 2, n_in // 4, n_out))


def _check_cloud(pc: torch.Tensor, n: int) -> None:
    if pc.ndim != 3 or pc.shape[-1] != 3 or pc.shape[1] != n:
        raise ShapeError(f"expected a (B, {n}, 3) point tensor, got {tuple(pc.shape)}")


class PointEncoder(nn.Module):
    """Shared per-point MLP followed by max pooling over points."""

    def __init__(self, widths):
        super().__init__()
        self.mlp = _mlp((3,) + tuple(widths))
        self.out_dim = widths[-1]

    def forward(self, pc: torch.Tensor) -> torch.Tensor:
        return self.mlp(pc).max(dim=1).values


def _init_identity_quat(head: nn.Sequential) -> None:
    last = head[-1]
    with torch.no_grad():
        last.weight.mul_(0.1)
        last.bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0]))


class RegistrationNet(nn.Module):
    """Rotation-then-translation registration.

    ``register(p1, p2)`` returns the transform carrying ``p1`` onto ``p2``.
    Both directions share the encoder and head weights.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.encoder = PointEncoder(config.reg_widths)
        d = self.encoder.out_dim
        self.rot_head = _head(2 * d, 4)
        self.trans_head = _head(2 * d, 3)
        _init_identity_quat(self.rot_head)

    def encode(self, pc: torch.Tensor) -> torch.Tensor:
        _check_cloud(pc, self.config.num_points)
        return self.encoder(pc)

    def _directions(self, src, f_src, f_dst):
        q = tg.quat_normalize(self.rot_head(torch.cat([f_src, f_dst], -1)))
        src_r = tg.rotate(q, src)
        t = self.trans_head(torch.cat([self.encode(src_r), f_dst], -1))
        return q, t, src_r

    def register(self, p1: torch.Tensor, p2: torch.Tensor):
        """One direction: ``(q12, t12, {"p1R": rotated p1})``."""
        f1, f2 = self.encode(p1), self.encode(p2)
        q, t, p1r = self._directions(p1, f1, f2)
        return q, t, {"p1R": p1r}

    def forward(self, p1: torch.Tensor, p2: torch.Tensor):
        """Both directions in one batched pass: ``(q12, t12, q21, t21)``."""
        b = p1.shape[0]
        src = torch.cat([p1, p2])
        f = self.encode(src)
        f_dst = torch.cat([f[b:], f[:b]])
        q, t, _ = self._directions(src, f, f_dst)
        return q[:b], t[:b], q[b:], t[b:]


@dataclass
class Completion:
    """Completion network outputs for a batch of partial clouds.

    ``levels`` are the generated missing parts mapped back into the input
    frame; ``levels_canonical`` are the same points before that rotation.
    ``s`` is ``(generated finest level, input)`` concatenated, ``2N`` points.
    """

    q_o: torch.Tensor
    p_o: torch.Tensor
    levels_canonical: list
    levels: list
    s: torch.Tensor


class CompletionNet(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.orient_encoder = PointEncoder(config.reg_widths)
        self.orient_head = _head(self.orient_encoder.out_dim, 4)
        _init_identity_quat(self.orient_head)
        self.gen_encoder = PointEncoder(config.comp_widths)
        c = self.gen_encoder.out_dim
        self.coarse = _head(c, config.levels[0] * 3)
        # each finer point set grows CHILDREN offsets around every parent point;
        # parents get their own feature slot decoded from the global feature
        self.slot_dim = config.comp_widths[1]
        self.slots = nn.ModuleList([_head(c, n * self.slot_dim) for n in config.levels[:2]])
        self.refine = nn.ModuleList([_head(c + self.slot_dim + 3, CHILDREN * 3) for _ in range(2)])

    def orient(self, pc: torch.Tensor):
        _check_cloud(pc, self.config.num_points)
        q = tg.quat_normalize(self.orient_head(self.orient_encoder(pc)))
        return q, tg.rotate(q, pc)

    def generate_missing(self, p_o: torch.Tensor) -> list:
        _check_cloud(p_o, self.config.num_points)
        feat = self.gen_encoder(p_o)
        b = p_o.shape[0]
        out = [self.coarse(feat).view(b, -1, 3)]
        for slot, mlp in zip(self.slots, self.refine):
            parent = out[-1]
            n = parent.shape[1]
            x = torch.cat([feat.unsqueeze(1).expand(-1, n, -1), slot(feat).view(b, n, -1), parent], -1)
            offsets = mlp(x).view(b, -1, 3)
            out.append(parent.repeat_interleave(CHILDREN, dim=1) + offsets)
        return out

    def forward(self, pc: torch.Tensor) -> Completion:
        q_o, p_o = self.orient(pc)
        canon = self.generate_missing(p_o)
        q_back = tg.quat_conjugate(q_o)
        levels = [tg.rotate(q_back, g) for g in canon]
        # the input is reused verbatim: rotating p_o back would only add round-off
        s = torch.cat([levels[-1], pc], dim=1)
        return Completion(q_o, p_o, canon, levels, s)


class TeleRegModel(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.registration = RegistrationNet(config)
        self.completion = CompletionNet(config)


def build_model(config: NetConfig, seed: int = 0, dtype=torch.float32) -> TeleRegModel:
    """Freshly initialized model; the global torch RNG is left untouched."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = TeleRegModel(config)
    return model.to(dtype)
