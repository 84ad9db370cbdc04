"""U-Net and U-Net++ snow-mask networks built from residual blocks.

Nodes are named ``X{i}_{j}``: ``i`` is the depth (resolution level) and
``j`` the position along the skip pathway. Node ``(i, 0)`` is the encoder;
node ``(i, j)`` with ``j >= 1`` consumes every active node ``(i, k < j)``
concatenated with the 2x bilinear upsample of ``(i+1, j-1)``. U-Net keeps
only the nodes ``(i, depth-i)`` of the nested grid, U-Net++ keeps them all.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .layers import Conv2d, Module, ResidualBlock

UNET = "unet"
UNETPP = "unetpp"
HEAD_INIT_STD = 0.01
HEAD_INIT_BIAS = -3.0


@dataclass(frozen=True)
class NetConfig:
    variant: str = UNETPP
    depth: int = 4
    base_channels: int = 8
    deep_supervision: bool = True
    input_channels: int = 3

    def __post_init__(self):
        if self.variant not in (UNET, UNETPP):
            raise ValueError(f"variant must be {UNET!r} or {UNETPP!r}")
        if self.depth < 1 or self.base_channels < 1 or self.input_channels < 1:
            raise ValueError("depth, base_channels and input_channels must be >= 1")

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level


def active_nodes(variant: str, depth: int) -> list[tuple[int, int]]:
    """Nodes in evaluation order (by column, then from the bottom up)."""
    nodes = [(i, 0) for i in range(depth + 1)]
    for j in range(1, depth + 1):
        for i in range(depth - j, -1, -1):
            if variant == UNETPP or i + j == depth:
                nodes.append((i, j))
    return nodes


def aux_heads(cfg: NetConfig) -> list[tuple[int, int]]:
    """Nodes carrying an auxiliary deep-supervision head.

    U-Net++ supervises the intermediate top-row nodes ``(0, 1..depth-1)``;
    U-Net supervises its coarser decoder nodes ``(i, depth-i)``, ``i >= 1``,
    whose logits are upsampled to full resolution.
    """
    if not cfg.deep_supervision:
        return []
    if cfg.variant == UNETPP:
        return [(0, j) for j in range(1, cfg.depth)]
    return [(i, cfg.depth - i) for i in range(1, cfg.depth)]


class SnowNet(Module):
    def __init__(self, cfg: NetConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.node_order = active_nodes(cfg.variant, cfg.depth)
        active = set(self.node_order)
        self.inputs = {}
        self.blocks = {}
        for i, j in self.node_order:
            if j == 0:
                c_in = cfg.input_channels if i == 0 else cfg.width(i - 1)
                self.inputs[(i, j)] = []
            else:
                same_row = [(i, k) for k in range(j) if (i, k) in active]
                self.inputs[(i, j)] = same_row + [(i + 1, j - 1)]
                c_in = cfg.width(i) * len(same_row) + cfg.width(i + 1)
            self.blocks[f"X{i}_{j}"] = ResidualBlock(c_in, cfg.width(i), rng=rng)
        self.aux_nodes = aux_heads(cfg)
        # small heads biased towards the (rare) snow prior keep early losses tame
        self.head = self._head(cfg.width(0), rng)
        self.aux = [self._head(cfg.width(i), rng) for i, _ in self.aux_nodes]

    @staticmethod
    def _head(c_in, rng):
        head = Conv2d(c_in, 1, 1, bias=True, rng=rng, std=HEAD_INIT_STD)
        head.bias.data[:] = HEAD_INIT_BIAS
        return head

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] != self.cfg.input_channels:
            raise ag.ShapeError(f"expected (B, {self.cfg.input_channels}, H, W) input, got {shape}")
        step = 2 ** self.cfg.depth
        if shape[2] % step or shape[3] % step:
            raise ag.ShapeError(f"input spatial shape {shape[2:]} not divisible by {step}")

    def forward(self, x):
        """Return ``(main_logits, [aux_logits, ...])``, all at input resolution."""
        x = ag.as_tensor(x)
        self.check_input(x.shape)
        feats = {}
        for i, j in self.node_order:
            block = self.blocks[f"X{i}_{j}"]
            if j == 0:
                feats[(i, j)] = block(x if i == 0 else ag.maxpool2d(feats[(i - 1, 0)]))
            else:
                *row, below = self.inputs[(i, j)]
                parts = [feats[n] for n in row] + [ag.upsample_bilinear(feats[below], 2)]
                feats[(i, j)] = block(ag.concat(parts, axis=1))
        main = self.head(feats[(0, self.cfg.depth)])
        aux = [ag.upsample_bilinear(head(feats[node]), 2 ** node[0])
               for node, head in zip(self.aux_nodes, self.aux)]
        return main, aux

    def fingerprint(self) -> str:
        """Architecture hash over config and every parameter/buffer name and shape."""
        h = hashlib.sha256(repr(self.cfg).encode())
        for name, p in self.named_parameters():
            h.update(f"{name}:{p.shape};".encode())
        for name, b in self.named_buffers():
            h.update(f"{name}:{b.shape};".encode())
        return h.hexdigest()


def build(cfg: NetConfig, seed: int = 0) -> SnowNet:
    return SnowNet(cfg, seed=seed)
