"""Hypernetwork mapping description embeddings to low-rank LM deltas.

Pipeline: bidirectional feature extractor over the condition tokens,
non-autoregressive query-based decoder (one learnable query per chunk),
linear projection to fixed-length chunks, then unpacking into per-target
A/B factors. A is assembled as fixed Gaussian basis + predicted residual
and B as gate * residual so a fresh generator produces an exactly-zero
effective update; a per-target scale modulates each update's magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import FLOAT, ParameterStore, RngState, Tensor
from .encoder import TokenEmbeddings, sinusoidal_positions
from .lm import InjectionTarget, LoraDelta, LoraEntry

ABLATION_MODES = ("default", "no_residual_prediction", "no_layer_scale")


@dataclass
class GeneratorConfig:
    hidden: int = 256
    n_layers: int = 3
    n_heads: int = 4
    dropout: float = 0.1
    chunk_len: int = 256
    rank: int = 8
    alpha: float = 16.0
    gate_init: float = 0.0
    scale_init: float = 1.0
    ablation: str = "default"

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ValueError("hidden must be divisible by n_heads")
        if self.rank < 1 or self.chunk_len < 1:
            raise ValueError("rank and chunk_len must be >= 1")
        if self.ablation not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode: {self.ablation}")


@dataclass(frozen=True)
class TargetSlice:
    d_in: int
    d_out: int
    n_params: int  # r*d_in + r*d_out
    n_chunks: int
    pad: int
    chunk_start: int  # global index of this target's first chunk


@dataclass
class ChunkLayout:
    chunk_len: int
    rank: int
    slices: list[TargetSlice]

    @property
    def total_chunks(self) -> int:
        return sum(s.n_chunks for s in self.slices)


def compute_chunk_layout(targets: list[InjectionTarget], r: int, chunk_len: int) -> ChunkLayout:
    """Flattening plan: per target all of A row-major then all of B row-major;
    chunks never span target boundaries."""
    if r < 1 or chunk_len < 1:
        raise ValueError("rank and chunk_len must be >= 1")
    slices = []
    start = 0
    for t in targets:
        n = r * t.d_in + r * t.d_out
        n_chunks = -(-n // chunk_len)
        slices.append(TargetSlice(t.d_in, t.d_out, n, n_chunks, n_chunks * chunk_len - n, start))
        start += n_chunks
    return ChunkLayout(chunk_len, r, slices)


def pack_lora(a_list, b_list, layout: ChunkLayout) -> np.ndarray:
    """Factors -> (total_chunks, chunk_len) matrix; pad positions are zeros."""
    if len(a_list) != len(layout.slices) or len(b_list) != len(layout.slices):
        raise ValueError("factor count does not match layout")
    out = np.zeros((layout.total_chunks, layout.chunk_len), dtype=FLOAT)
    for sl, a, b in zip(layout.slices, a_list, b_list):
        a = np.asarray(a, dtype=FLOAT)
        b = np.asarray(b, dtype=FLOAT)
        if a.shape != (layout.rank, sl.d_in) or b.shape != (sl.d_out, layout.rank):
            raise ag.ShapeError(f"factor shapes {a.shape}/{b.shape} mismatch layout")
        flat = np.concatenate([a.reshape(-1), b.reshape(-1)])
        row = out[sl.chunk_start : sl.chunk_start + sl.n_chunks].reshape(-1)
        row[: sl.n_params] = flat
    return out


def unpack_chunks(chunks, layout: ChunkLayout):
    """Chunk matrix -> per-target (A, B); inverse of pack_lora, pads ignored.

    Accepts a Tensor (stays on the tape) or a plain array.
    """
    is_tensor = isinstance(chunks, Tensor)
    shape = chunks.shape if is_tensor else np.asarray(chunks).shape
    if shape != (layout.total_chunks, layout.chunk_len):
        raise ag.ShapeError(
            f"chunk matrix {shape} does not match layout "
            f"({layout.total_chunks}, {layout.chunk_len})"
        )
    pairs = []
    if is_tensor:
        flat = ag.reshape(chunks, (layout.total_chunks * layout.chunk_len,))
        for sl in layout.slices:
            seg = ag.narrow(flat, sl.chunk_start * layout.chunk_len, sl.n_params)
            a = ag.reshape(ag.narrow(seg, 0, layout.rank * sl.d_in), (layout.rank, sl.d_in))
            b = ag.reshape(
                ag.narrow(seg, layout.rank * sl.d_in, layout.rank * sl.d_out),
                (sl.d_out, layout.rank),
            )
            pairs.append((a, b))
    else:
        flat = np.asarray(chunks, dtype=FLOAT).reshape(-1)
        for sl in layout.slices:
            seg = flat[sl.chunk_start * layout.chunk_len :][: sl.n_params]
            a = seg[: layout.rank * sl.d_in].reshape(layout.rank, sl.d_in)
            b = seg[layout.rank * sl.d_in :].reshape(sl.d_out, layout.rank)
            pairs.append((a, b))
    return pairs


def make_stable_basis(layout: ChunkLayout, seed: int) -> ParameterStore:
    """Fixed per-target Gaussian N(0, 0.02^2) bases; reproducible from seed."""
    store = ParameterStore()
    root = RngState(seed)
    for i, sl in enumerate(layout.slices):
        arr = root.child(i).generator().normal(0.0, 0.02, size=(layout.rank, sl.d_in))
        store.add(f"basis.{i}", arr.astype(FLOAT), frozen=True)
    return store


def ablation_variant(mode: str) -> str:
    """Validate and return the factor-assembly mode."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode: {mode}")
    return mode


class ParamGenerator:
    """Trainable state and forward pass of the delta generator."""

    def __init__(
        self,
        cfg: GeneratorConfig,
        d_embed: int,
        layout: ChunkLayout,
        rng: RngState,
    ):
        self.cfg = cfg
        self.layout = layout
        self.d_embed = d_embed
        self.forward_count = 0
        self.store = ParameterStore()
        gen = rng.generator()
        h = cfg.hidden

        def norm(*shape):
            return gen.normal(0.0, 0.02, size=shape).astype(FLOAT)

        def add_block(prefix, cross: bool):
            st = self.store
            st.add(f"{prefix}.ln1.g", np.ones(h, dtype=FLOAT))
            st.add(f"{prefix}.ln1.b", np.zeros(h, dtype=FLOAT))
            for w in ("wq", "wk", "wv", "wo"):
                st.add(f"{prefix}.self.{w}", norm(h, h))
            if cross:
                st.add(f"{prefix}.ln2.g", np.ones(h, dtype=FLOAT))
                st.add(f"{prefix}.ln2.b", np.zeros(h, dtype=FLOAT))
                for w in ("wq", "wk", "wv", "wo"):
                    st.add(f"{prefix}.cross.{w}", norm(h, h))
            st.add(f"{prefix}.ln3.g", np.ones(h, dtype=FLOAT))
            st.add(f"{prefix}.ln3.b", np.zeros(h, dtype=FLOAT))
            st.add(f"{prefix}.ff.w1", norm(4 * h, h))
            st.add(f"{prefix}.ff.b1", np.zeros(4 * h, dtype=FLOAT))
            st.add(f"{prefix}.ff.w2", norm(h, 4 * h))
            st.add(f"{prefix}.ff.b2", np.zeros(h, dtype=FLOAT))

        self.store.add("in_proj.w", norm(h, d_embed))
        self.store.add("in_proj.b", np.zeros(h, dtype=FLOAT))
        for l in range(cfg.n_layers):
            add_block(f"fx.{l}", cross=False)
        self.store.add("fx_ln.g", np.ones(h, dtype=FLOAT))
        self.store.add("fx_ln.b", np.zeros(h, dtype=FLOAT))
        self.store.add("queries", norm(layout.total_chunks, h))
        for l in range(cfg.n_layers):
            add_block(f"dec.{l}", cross=True)
        self.store.add("dec_ln.g", np.ones(h, dtype=FLOAT))
        self.store.add("dec_ln.b", np.zeros(h, dtype=FLOAT))
        self.store.add("out_proj.w", norm(cfg.chunk_len, h))
        self.store.add("out_proj.b", np.zeros(cfg.chunk_len, dtype=FLOAT))
        if cfg.ablation != "no_residual_prediction":
            self.store.add("gate", np.full((1,), cfg.gate_init, dtype=FLOAT))
        self.store.add(
            "scales",
            np.full((len(layout.slices),), cfg.scale_init, dtype=FLOAT),
            frozen=cfg.ablation == "no_layer_scale",
        )
        self._qpos = sinusoidal_positions(layout.total_chunks, h)

    # ------------------------------------------------------------------
    def _attend(self, xq: Tensor, xkv: Tensor, prefix: str, train: bool, drop_rng) -> Tensor:
        st = self.store
        H = self.cfg.n_heads
        dh = self.cfg.hidden // H
        Lq = xq.shape[0]
        Lk = xkv.shape[0]

        def lin(x, name):
            return ag.matmul(x, ag.transpose(st[name], (1, 0)))

        q = ag.transpose(ag.reshape(lin(xq, f"{prefix}.wq"), (Lq, H, dh)), (1, 0, 2))
        k = ag.transpose(ag.reshape(lin(xkv, f"{prefix}.wk"), (Lk, H, dh)), (1, 0, 2))
        v = ag.transpose(ag.reshape(lin(xkv, f"{prefix}.wv"), (Lk, H, dh)), (1, 0, 2))
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        att = ag.softmax(scores)
        if train and self.cfg.dropout > 0:
            att = ag.dropout(att, self.cfg.dropout, drop_rng, train)
        ctx = ag.reshape(ag.transpose(ag.matmul(att, v), (1, 0, 2)), (Lq, self.cfg.hidden))
        return lin(ctx, f"{prefix}.wo")

    def _ff(self, x: Tensor, prefix: str, train: bool, drop_rng) -> Tensor:
        st = self.store

        def lin(inp, name):
            return ag.matmul(inp, ag.transpose(st[name], (1, 0)))

        h = ag.gelu(ag.add(lin(x, f"{prefix}.ff.w1"), st[f"{prefix}.ff.b1"]))
        h = ag.add(lin(h, f"{prefix}.ff.w2"), st[f"{prefix}.ff.b2"])
        if train and self.cfg.dropout > 0:
            h = ag.dropout(h, self.cfg.dropout, drop_rng, train)
        return h

    def generate(
        self,
        cond: TokenEmbeddings,
        basis: ParameterStore,
        train: bool = False,
        drop_rng: Optional[np.random.Generator] = None,
    ) -> LoraDelta:
        """One forward pass: condition -> memory -> queries -> chunk matrix -> delta."""
        if cond.length == 0:
            raise ValueError("empty condition sequence")
        self.forward_count += 1
        st = self.store
        cfg = self.cfg
        x = ag.add(ag.matmul(cond.embeddings, ag.transpose(st["in_proj.w"], (1, 0))),
                   st["in_proj.b"])
        for l in range(cfg.n_layers):
            p = f"fx.{l}"
            h = ag.layer_norm(x, st[f"{p}.ln1.g"], st[f"{p}.ln1.b"])
            x = ag.add(x, self._attend(h, h, f"{p}.self", train, drop_rng))
            h = ag.layer_norm(x, st[f"{p}.ln3.g"], st[f"{p}.ln3.b"])
            x = ag.add(x, self._ff(h, p, train, drop_rng))
        memory = ag.layer_norm(x, st["fx_ln.g"], st["fx_ln.b"])

        y = ag.add(st["queries"], Tensor(self._qpos))
        for l in range(cfg.n_layers):
            p = f"dec.{l}"
            h = ag.layer_norm(y, st[f"{p}.ln1.g"], st[f"{p}.ln1.b"])
            y = ag.add(y, self._attend(h, h, f"{p}.self", train, drop_rng))
            h = ag.layer_norm(y, st[f"{p}.ln2.g"], st[f"{p}.ln2.b"])
            y = ag.add(y, self._attend(h, memory, f"{p}.cross", train, drop_rng))
            h = ag.layer_norm(y, st[f"{p}.ln3.g"], st[f"{p}.ln3.b"])
            y = ag.add(y, self._ff(h, p, train, drop_rng))
        y = ag.layer_norm(y, st["dec_ln.g"], st["dec_ln.b"])
        chunks = ag.add(ag.matmul(y, ag.transpose(st["out_proj.w"], (1, 0))),
                        st["out_proj.b"])

        pairs = unpack_chunks(chunks, self.layout)
        entries = []
        for i, (a_res, b_res) in enumerate(pairs):
            if cfg.ablation == "no_residual_prediction":
                A, B = a_res, b_res
            else:
                A = ag.add(a_res, basis[f"basis.{i}"])
                B = ag.mul(b_res, st["gate"])
            if cfg.ablation == "no_layer_scale":
                s = Tensor(np.ones(1, dtype=FLOAT))
            else:
                s = ag.narrow(st["scales"], i, 1)
            entries.append(LoraEntry(A, B, s))
        return LoraDelta(entries, cfg.rank, float(cfg.alpha))


def generate_delta(
    gen: ParamGenerator, basis: ParameterStore, cond: TokenEmbeddings
) -> LoraDelta:
    """Evaluation-mode generation (deterministic, no dropout)."""
    with ag.no_grad():
        return gen.generate(cond, basis, train=False)
