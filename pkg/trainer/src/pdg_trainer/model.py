"""Single-token transformer encoder, mirrored exactly by the numpy
inference path: linear encode + learned position encoding, pre-norm
encoder layers (multi-head scaled dot-product attention, ReLU feed-forward
of width 4x embed), final layer norm, linear decode.  Layer-norm epsilon
1e-5; dropout active only in training mode."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

LN_EPS = 1e-5


class EncoderLayer(nn.Module):
    def __init__(self, embed: int, n_heads: int, dropout: float):
        super().__init__()
        if embed % n_heads:
            raise ValueError("embed dim must be divisible by head count")
        self.n_heads = n_heads
        self.d_k = embed // n_heads
        self.ln1 = nn.LayerNorm(embed, eps=LN_EPS)
        self.q = nn.Linear(embed, embed)
        self.k = nn.Linear(embed, embed)
        self.v = nn.Linear(embed, embed)
        self.out = nn.Linear(embed, embed)
        self.ln2 = nn.LayerNorm(embed, eps=LN_EPS)
        self.ff1 = nn.Linear(embed, 4 * embed)
        self.ff2 = nn.Linear(4 * embed, embed)
        self.drop = nn.Dropout(dropout)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        # t: (batch, embed), a single token per sample
        u = self.ln1(t)
        q = self.q(u).view(-1, self.n_heads, self.d_k)
        k = self.k(u).view(-1, self.n_heads, self.d_k)
        v = self.v(u).view(-1, self.n_heads, self.d_k)
        # sequence length 1: softmax over the single key is identically 1,
        # computed explicitly so the scores path stays exercised
        scores = (q * k).sum(-1, keepdim=True) / np.sqrt(self.d_k)
        attn = torch.softmax(scores, dim=-1) * v
        t = t + self.drop(self.out(attn.reshape(t.shape)))
        u = self.ln2(t)
        t = t + self.drop(self.ff2(torch.relu(self.ff1(u))))
        return t


class SingleTokenEncoder(nn.Module):
    def __init__(self, input_width: int, output_width: int, embed: int,
                 n_heads: int, n_layers: int, dropout: float):
        super().__init__()
        self.input_width = input_width
        self.output_width = output_width
        self.embed = embed
        self.n_heads = n_heads
        self.encode = nn.Linear(input_width, embed)
        self.pos = nn.Parameter(torch.zeros(embed))
        self.layers = nn.ModuleList(
            EncoderLayer(embed, n_heads, dropout) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(embed, eps=LN_EPS)
        self.decode = nn.Linear(embed, output_width)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """Logits for a batch of standardized inputs (batch, input_width)."""
        t = self.encode(z) + self.pos
        for lay in self.layers:
            t = lay(t)
        return self.decode(self.ln_f(t))

    def named_export_tensors(self, input_stats, output_stats
                             ) -> list[tuple[str, np.ndarray]]:
        """Tensor directory in the order and naming the inference loader
        expects, plus the standardization statistics."""
        def a(t):
            return t.detach().cpu().numpy().astype(np.float64)

        meta = np.array([self.input_width, self.output_width, self.embed,
                         self.n_heads, len(self.layers)], dtype=float)
        out = [("meta", meta),
               ("encode.weight", a(self.encode.weight)),
               ("encode.bias", a(self.encode.bias)),
               ("pos", a(self.pos))]
        for i, lay in enumerate(self.layers):
            p = f"layers.{i}."
            out += [(p + "ln1.gamma", a(lay.ln1.weight)),
                    (p + "ln1.beta", a(lay.ln1.bias)),
                    (p + "attn.q.weight", a(lay.q.weight)),
                    (p + "attn.q.bias", a(lay.q.bias)),
                    (p + "attn.k.weight", a(lay.k.weight)),
                    (p + "attn.k.bias", a(lay.k.bias)),
                    (p + "attn.v.weight", a(lay.v.weight)),
                    (p + "attn.v.bias", a(lay.v.bias)),
                    (p + "attn.out.weight", a(lay.out.weight)),
                    (p + "attn.out.bias", a(lay.out.bias)),
                    (p + "ln2.gamma", a(lay.ln2.weight)),
                    (p + "ln2.beta", a(lay.ln2.bias)),
                    (p + "ff1.weight", a(lay.ff1.weight)),
                    (p + "ff1.bias", a(lay.ff1.bias)),
                    (p + "ff2.weight", a(lay.ff2.weight)),
                    (p + "ff2.bias", a(lay.ff2.bias))]
        in_mean, in_std = input_stats
        out_mean, out_std = output_stats
        out += [("ln_f.gamma", a(self.ln_f.weight)),
                ("ln_f.beta", a(self.ln_f.bias)),
                ("decode.weight", a(self.decode.weight)),
                ("decode.bias", a(self.decode.bias)),
                ("input_mean", np.asarray(in_mean, dtype=float)),
                ("input_std", np.asarray(in_std, dtype=float)),
                ("output_mean", np.asarray(out_mean, dtype=float)),
                ("output_std", np.asarray(out_std, dtype=float))]
        return out
