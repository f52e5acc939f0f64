"""Permutation-invariant summary networks for exchangeable data sets."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .errors import ContractError
from .flows import DTYPE, mlp


def canonical_order(Y: Tensor) -> Tensor:
    """Sort the rows of each data set lexicographically.

    ``Y`` has shape ``(B, J, d)``. Any row permutation of the input yields the
    same output, bit for bit, which makes downstream pooling exactly invariant
    regardless of floating-point summation order.
    """
    order = torch.arange(Y.shape[1]).expand(Y.shape[0], -1)
    for col in reversed(range(Y.shape[2])):
        keys = torch.gather(Y[:, :, col], 1, order)
        idx = torch.argsort(keys, dim=1, stable=True)
        order = torch.gather(order, 1, idx)
    return torch.gather(Y, 1, order[..., None].expand(-1, -1, Y.shape[2]))


@dataclass
class SummaryConfig:
    input_dim: int
    output_dim: int = 16
    embed_dim: int = 64
    encoder_hidden: tuple[int, ...] = (64,)
    decoder_hidden: tuple[int, ...] = (64,)
    activation: str = "silu"
    attention: bool = False
    heads: int = 4

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SummaryConfig":
        return cls(**data)


class DeepSet(nn.Module):
    """Encode rows, mean-pool, decode.

    With ``attention=True`` a single residual self-attention block acts on the
    encoded rows before pooling.
    """

    def __init__(self, config: SummaryConfig):
        super().__init__()
        self.config = config
        c = config
        self.register_buffer("in_loc", torch.zeros(c.input_dim, dtype=DTYPE))
        self.register_buffer("in_scale", torch.ones(c.input_dim, dtype=DTYPE))
        self.encoder = mlp(c.input_dim, c.encoder_hidden, c.embed_dim, c.activation)
        self.attention = (
            nn.MultiheadAttention(c.embed_dim, c.heads, batch_first=True, dtype=DTYPE) if c.attention else None
        )
        self.decoder = mlp(c.embed_dim, c.decoder_hidden, c.output_dim, c.activation)

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def set_standardization(self, Y: np.ndarray) -> None:
        rows = np.asarray(Y, dtype=np.float64).reshape(-1, self.config.input_dim)
        sd = rows.std(0)
        with torch.no_grad():
            self.in_loc.copy_(torch.as_tensor(rows.mean(0)))
            self.in_scale.copy_(torch.as_tensor(np.where(sd > 1e-8, sd, 1.0)))

    def forward(self, Y: Tensor) -> Tensor:
        Y = torch.as_tensor(Y, dtype=DTYPE)
        single = Y.ndim == 2
        if single:
            Y = Y[None]
        if Y.ndim != 3 or Y.shape[-1] != self.config.input_dim:
            raise ContractError(f"expected data of shape (B, J, {self.config.input_dim}), got {tuple(Y.shape)}")
        if Y.shape[1] < 1:
            raise ContractError("cannot summarize an empty data set")
        h = self.encoder((canonical_order(Y) - self.in_loc) / self.in_scale)
        if self.attention is not None:
            h = h + self.attention(h, h, h, need_weights=False)[0]
        out = self.decoder(h.mean(dim=1))
        return out[0] if single else out


def summarize(net: DeepSet, Y) -> Tensor:
    """Fixed-length, permutation-invariant summary of one data set ``(J, d)``."""
    return net(Y)
