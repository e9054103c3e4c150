"""Transformer encoder inference and the TSCX weights file format.

The networks map a standardized parameter vector (one token) through a
linear encoder, a learned position encoding, a stack of pre-norm encoder
layers (multi-head scaled dot-product attention + ReLU feed-forward of
width 4x embed), a final layer norm and a linear decoder.  Dropout exists
only at training time; inference is deterministic.

Weights files: magic ``TSCX``, u32 version, tensor directory (utf-8 name,
dtype code, rank, dims, payload offset, crc32), little-endian f32 payload.
Standardization statistics travel as ordinary tensors named ``input_mean``,
``input_std``, ``output_mean``, ``output_std``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"TSCX"
VERSION = 1
_DTYPE_F32 = 0
LN_EPS = 1e-5


class ShapeMismatch(ValueError):
    pass


class WeightsFormatError(ValueError):
    pass


def softmax(x, axis=-1):
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def attention(Q, K, V, d_k):
    """Scaled dot-product attention Softmax(Q K^T / sqrt(d_k)) V."""
    Q, K, V = (np.asarray(a, dtype=float) for a in (Q, K, V))
    if Q.shape[-1] != K.shape[-1]:
        raise ShapeMismatch(f"Q width {Q.shape[-1]} != K width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeMismatch(f"K rows {K.shape[-2]} != V rows {V.shape[-2]}")
    scores = Q @ np.swapaxes(K, -1, -2) / np.sqrt(d_k)
    return softmax(scores, axis=-1) @ V


def layer_norm(x, gamma, beta, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


@dataclass
class EncoderLayer:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray


@dataclass
class TransformerWeights:
    input_width: int
    output_width: int
    embed_dim: int
    n_heads: int
    encode_w: np.ndarray     # (embed, in)
    encode_b: np.ndarray
    pos: np.ndarray          # (embed,) learned position encoding (1 token)
    layers: list[EncoderLayer]
    lnf_gamma: np.ndarray
    lnf_beta: np.ndarray
    decode_w: np.ndarray     # (out, embed)
    decode_b: np.ndarray
    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray

    def __post_init__(self):
        e = self.embed_dim
        if e % self.n_heads != 0:
            raise ShapeMismatch("embed_dim must be divisible by n_heads")
        if self.encode_w.shape != (e, self.input_width):
            raise ShapeMismatch("encoder matrix shape")
        if self.decode_w.shape != (self.output_width, e):
            raise ShapeMismatch("decoder matrix shape")
        for lay in self.layers:
            for w in (lay.wq, lay.wk, lay.wv, lay.wo):
                if w.shape != (e, e):
                    raise ShapeMismatch("attention projection shape")
            if lay.w_ff1.shape != (4 * e, e) or lay.w_ff2.shape != (e, 4 * e):
                raise ShapeMismatch("feed-forward shapes")
        for stat in (self.input_mean, self.input_std):
            if stat.shape != (self.input_width,):
                raise ShapeMismatch("input standardization stats shape")
        for stat in (self.output_mean, self.output_std):
            if stat.shape != (self.output_width,):
                raise ShapeMismatch("output standardization stats shape")

    @property
    def d_k(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    # -- inference ---------------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Raw network output for an unstandardized input vector."""
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.input_width:
            raise ShapeMismatch(
                f"input width {x.size}, expected {self.input_width}")
        z = (x - self.input_mean) / self.input_std
        t = self.encode_w @ z + self.encode_b + self.pos   # single token
        for lay in self.layers:
            u = layer_norm(t, lay.ln1_gamma, lay.ln1_beta)
            q = lay.wq @ u + lay.bq
            k = lay.wk @ u + lay.bk
            v = lay.wv @ u + lay.bv
            dk = self.d_k
            heads = [attention(q[h * dk:(h + 1) * dk][None, :],
                               k[h * dk:(h + 1) * dk][None, :],
                               v[h * dk:(h + 1) * dk][None, :], dk)[0]
                     for h in range(self.n_heads)]
            t = t + lay.wo @ np.concatenate(heads) + lay.bo
            u = layer_norm(t, lay.ln2_gamma, lay.ln2_beta)
            t = t + lay.w_ff2 @ np.maximum(lay.w_ff1 @ u + lay.b_ff1, 0.0) \
                + lay.b_ff2
        t = layer_norm(t, self.lnf_gamma, self.lnf_beta)
        return self.decode_w @ t + self.decode_b

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Destandardized output (output stats applied)."""
        return self.forward(x) * self.output_std + self.output_mean

    def n_parameters(self) -> int:
        stats = {"input_mean", "input_std", "output_mean", "output_std"}
        return sum(t.size for name, t in self.named_tensors()
                   if name not in stats)

    # -- tensor directory --------------------------------------------------

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("encode.weight", self.encode_w), ("encode.bias", self.encode_b),
               ("pos", self.pos)]
        for i, lay in enumerate(self.layers):
            p = f"layers.{i}."
            out += [(p + "ln1.gamma", lay.ln1_gamma), (p + "ln1.beta", lay.ln1_beta),
                    (p + "attn.q.weight", lay.wq), (p + "attn.q.bias", lay.bq),
                    (p + "attn.k.weight", lay.wk), (p + "attn.k.bias", lay.bk),
                    (p + "attn.v.weight", lay.wv), (p + "attn.v.bias", lay.bv),
                    (p + "attn.out.weight", lay.wo), (p + "attn.out.bias", lay.bo),
                    (p + "ln2.gamma", lay.ln2_gamma), (p + "ln2.beta", lay.ln2_beta),
                    (p + "ff1.weight", lay.w_ff1), (p + "ff1.bias", lay.b_ff1),
                    (p + "ff2.weight", lay.w_ff2), (p + "ff2.bias", lay.b_ff2)]
        out += [("ln_f.gamma", self.lnf_gamma), ("ln_f.beta", self.lnf_beta),
                ("decode.weight", self.decode_w), ("decode.bias", self.decode_b),
                ("input_mean", self.input_mean), ("input_std", self.input_std),
                ("output_mean", self.output_mean), ("output_std", self.output_std)]
        return out

    @staticmethod
    def zeros(input_width: int, output_width: int, embed_dim: int,
              n_heads: int, n_layers: int) -> "TransformerWeights":
        e = embed_dim
        ones = np.ones
        layers = [EncoderLayer(
            ln1_gamma=ones(e), ln1_beta=np.zeros(e),
            wq=np.zeros((e, e)), bq=np.zeros(e),
            wk=np.zeros((e, e)), bk=np.zeros(e),
            wv=np.zeros((e, e)), bv=np.zeros(e),
            wo=np.zeros((e, e)), bo=np.zeros(e),
            ln2_gamma=ones(e), ln2_beta=np.zeros(e),
            w_ff1=np.zeros((4 * e, e)), b_ff1=np.zeros(4 * e),
            w_ff2=np.zeros((e, 4 * e)), b_ff2=np.zeros(e),
        ) for _ in range(n_layers)]
        return TransformerWeights(
            input_width=input_width, output_width=output_width,
            embed_dim=e, n_heads=n_heads,
            encode_w=np.zeros((e, input_width)), encode_b=np.zeros(e),
            pos=np.zeros(e), layers=layers,
            lnf_gamma=ones(e), lnf_beta=np.zeros(e),
            decode_w=np.zeros((output_width, e)), decode_b=np.zeros(output_width),
            input_mean=np.zeros(input_width), input_std=ones(input_width),
            output_mean=np.zeros(output_width), output_std=ones(output_width))


def _meta_tensor(w: TransformerWeights) -> np.ndarray:
    return np.array([w.input_width, w.output_width, w.embed_dim,
                     w.n_heads, w.n_layers], dtype=float)


def save_weights(w: TransformerWeights, path) -> None:
    tensors = [("meta", _meta_tensor(w))] + w.named_tensors()
    payload = bytearray()
    directory = bytearray()
    for name, t in tensors:
        data = np.ascontiguousarray(t, dtype="<f4").tobytes()
        off = len(payload)
        payload += data
        nb = name.encode()
        directory += struct.pack("<H", len(nb)) + nb
        directory += struct.pack("<BB", _DTYPE_F32, t.ndim)
        directory += struct.pack(f"<{max(t.ndim, 0)}I", *t.shape)
        directory += struct.pack("<QI", off, zlib.crc32(data))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        fh.write(directory)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def read_tensor_directory(path) -> dict[str, np.ndarray]:
    """All tensors of a TSCX file, verifying per-tensor checksums."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise WeightsFormatError("bad magic; not a TSCX weights file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    off = 12
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off); off += 2
        name = blob[off:off + nlen].decode(); off += nlen
        dtype, rank = struct.unpack_from("<BB", blob, off); off += 2
        dims = struct.unpack_from(f"<{rank}I", blob, off); off += 4 * rank
        toff, crc = struct.unpack_from("<QI", blob, off); off += 12
        if dtype != _DTYPE_F32:
            raise WeightsFormatError(f"unsupported dtype code {dtype}")
        entries.append((name, dims, toff, crc))
    (plen,) = struct.unpack_from("<Q", blob, off); off += 8
    payload = blob[off:off + plen]
    out = {}
    for name, dims, toff, crc in entries:
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
        data = payload[toff:toff + nbytes]
        if zlib.crc32(data) != crc:
            raise WeightsFormatError(f"checksum failure on tensor {name!r}")
        out[name] = np.frombuffer(data, "<f4").astype(float).reshape(dims)
    return out


def load_weights(path) -> TransformerWeights:
    t = read_tensor_directory(path)
    try:
        meta = t["meta"]
        in_w, out_w, e, heads, n_layers = (int(v) for v in meta)
        layers = []
        for i in range(n_layers):
            p = f"layers.{i}."
            layers.append(EncoderLayer(
                ln1_gamma=t[p + "ln1.gamma"], ln1_beta=t[p + "ln1.beta"],
                wq=t[p + "attn.q.weight"], bq=t[p + "attn.q.bias"],
                wk=t[p + "attn.k.weight"], bk=t[p + "attn.k.bias"],
                wv=t[p + "attn.v.weight"], bv=t[p + "attn.v.bias"],
                wo=t[p + "attn.out.weight"], bo=t[p + "attn.out.bias"],
                ln2_gamma=t[p + "ln2.gamma"], ln2_beta=t[p + "ln2.beta"],
                w_ff1=t[p + "ff1.weight"], b_ff1=t[p + "ff1.bias"],
                w_ff2=t[p + "ff2.weight"], b_ff2=t[p + "ff2.bias"]))
        return TransformerWeights(
            input_width=in_w, output_width=out_w, embed_dim=e, n_heads=heads,
            encode_w=t["encode.weight"], encode_b=t["encode.bias"],
            pos=t["pos"], layers=layers,
            lnf_gamma=t["ln_f.gamma"], lnf_beta=t["ln_f.beta"],
            decode_w=t["decode.weight"], decode_b=t["decode.bias"],
            input_mean=t["input_mean"], input_std=t["input_std"],
            output_mean=t["output_mean"], output_std=t["output_std"])
    except KeyError as exc:
        raise WeightsFormatError(f"missing tensor {exc}") from exc
