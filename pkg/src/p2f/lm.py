"""Byte-level decoder-only transformer with low-rank delta injection.

The base model stays frozen; generated low-rank updates are applied
either on the fly during the forward pass (hook-style) or merged into
the weights. Attention query and value projections in every block are
the injection targets, enumerated layer-major with query before value.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import FLOAT, ParameterStore, RngState, Tensor

PAD_ID = 256
BOS_ID = 257
EOS_ID = 258
VOCAB_SIZE = 259


class Tokenizer:
    """Byte vocabulary (0..255) plus PAD/BOS/EOS specials."""

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    vocab_size = VOCAB_SIZE

    def encode(self, text) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(data)

    def decode_bytes(self, ids) -> bytes:
        return bytes(i for i in ids if i < 256)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")


@dataclass
class LmConfig:
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 256

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"LmConfig.{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class InjectionTarget:
    layer_index: int
    projection_kind: str  # "query" | "value"
    d_in: int
    d_out: int

    @property
    def param_name(self) -> str:
        suffix = "wq" if self.projection_kind == "query" else "wv"
        return f"blocks.{self.layer_index}.attn.{suffix}"


def enumerate_targets(config: LmConfig) -> list[InjectionTarget]:
    """Fixed layer-major order, query before value. Contract for chunking."""
    targets = []
    for layer in range(config.n_layers):
        for kind in ("query", "value"):
            targets.append(InjectionTarget(layer, kind, config.d_model, config.d_model))
    return targets


@dataclass
class LoraEntry:
    A: object  # Tensor or ndarray, (r, d_in)
    B: object  # Tensor or ndarray, (d_out, r)
    s: object  # scalar Tensor or float


@dataclass
class LoraDelta:
    entries: list[LoraEntry]
    rank: int
    alpha: float

    def as_arrays(self) -> "LoraDelta":
        def arr(x):
            return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=FLOAT)

        return LoraDelta(
            [LoraEntry(arr(e.A), arr(e.B), float(arr(e.s).reshape(-1)[0]))
             for e in self.entries],
            self.rank,
            self.alpha,
        )

    def effective_updates(self) -> list[np.ndarray]:
        """Per-target dense update (alpha/r) * s * B @ A."""
        d = self.as_arrays()
        coef = d.alpha / d.rank
        return [(coef * e.s * (e.B @ e.A)).astype(FLOAT) for e in d.entries]


class TargetModel:
    """Frozen transformer LM; all parameters live in a ParameterStore."""

    def __init__(self, config: LmConfig, store: ParameterStore):
        self.config = config
        self.store = store
        self.tokenizer = Tokenizer()

    @classmethod
    def init(cls, config: LmConfig, rng: RngState) -> "TargetModel":
        gen = rng.generator()
        store = ParameterStore()

        def norm(*shape):
            return gen.normal(0.0, 0.02, size=shape).astype(FLOAT)

        store.add("tok_emb", norm(config.vocab_size, config.d_model), frozen=True)
        store.add("pos_emb", norm(config.max_seq_len, config.d_model), frozen=True)
        for l in range(config.n_layers):
            p = f"blocks.{l}"
            store.add(f"{p}.ln1.g", np.ones(config.d_model, dtype=FLOAT), frozen=True)
            store.add(f"{p}.ln1.b", np.zeros(config.d_model, dtype=FLOAT), frozen=True)
            for w in ("wq", "wk", "wv", "wo"):
                store.add(f"{p}.attn.{w}", norm(config.d_model, config.d_model), frozen=True)
            store.add(f"{p}.ln2.g", np.ones(config.d_model, dtype=FLOAT), frozen=True)
            store.add(f"{p}.ln2.b", np.zeros(config.d_model, dtype=FLOAT), frozen=True)
            store.add(f"{p}.ff.w1", norm(config.d_ff, config.d_model), frozen=True)
            store.add(f"{p}.ff.b1", np.zeros(config.d_ff, dtype=FLOAT), frozen=True)
            store.add(f"{p}.ff.w2", norm(config.d_model, config.d_ff), frozen=True)
            store.add(f"{p}.ff.b2", np.zeros(config.d_model, dtype=FLOAT), frozen=True)
        store.add("ln_f.g", np.ones(config.d_model, dtype=FLOAT), frozen=True)
        store.add("ln_f.b", np.zeros(config.d_model, dtype=FLOAT), frozen=True)
        store.add("lm_head", norm(config.vocab_size, config.d_model), frozen=True)
        return cls(config, store)

    def copy(self) -> "TargetModel":
        store = ParameterStore()
        for name, t in self.store.items():
            store.add(name, t.data.copy(), frozen=self.store.is_frozen(name))
        return TargetModel(self.config, store)

    def set_trainable(self, trainable: bool) -> None:
        for name in self.store.names():
            self.store.set_frozen(name, not trainable)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.store.names()):
            h.update(name.encode())
            h.update(self.store[name].data.tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------
    def _check_delta(self, delta: Optional[LoraDelta]) -> None:
        if delta is None:
            return
        targets = enumerate_targets(self.config)
        if len(delta.entries) != len(targets):
            raise ag.ShapeError(
                f"delta has {len(delta.entries)} entries, model exposes {len(targets)} targets"
            )
        for tgt, e in zip(targets, delta.entries):
            a = e.A.data if isinstance(e.A, Tensor) else np.asarray(e.A)
            b = e.B.data if isinstance(e.B, Tensor) else np.asarray(e.B)
            if a.shape != (delta.rank, tgt.d_in) or b.shape != (tgt.d_out, delta.rank):
                raise ag.ShapeError(
                    f"delta shapes A{a.shape}/B{b.shape} mismatch target "
                    f"layer {tgt.layer_index} {tgt.projection_kind} "
                    f"(expected A({delta.rank},{tgt.d_in}) B({tgt.d_out},{delta.rank}))"
                )

    def forward(
        self,
        tokens: np.ndarray,
        delta: Optional[LoraDelta] = None,
        train: bool = False,
        dropout: float = 0.0,
        drop_rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Logits (B, T, V); delta entries ride the forward pass hook-style."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, T = tokens.shape
        cfg = self.config
        if T > cfg.max_seq_len:
            raise ag.ShapeError(f"sequence length {T} exceeds max {cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id outside vocabulary")
        self._check_delta(delta)

        st = self.store
        x = ag.add(ag.embedding(st["tok_emb"], tokens), ag.narrow_rows(st["pos_emb"], T))
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        causal = np.triu(np.full((T, T), -1e9, dtype=FLOAT), k=1)
        coef = None if delta is None else delta.alpha / delta.rank

        def linear(inp, w):
            return ag.matmul(inp, ag.transpose(w, (1, 0)))

        def lora_linear(inp, w, entry):
            out = linear(inp, w)
            if entry is None:
                return out
            low = ag.matmul(ag.matmul(inp, ag.transpose(entry.A, (1, 0))),
                            ag.transpose(entry.B, (1, 0)))
            return ag.add(out, ag.scale(ag.mul(low, entry.s), coef))

        for l in range(cfg.n_layers):
            p = f"blocks.{l}"
            qe = _entry_tensor(delta, 2 * l) if delta is not None else None
            ve = _entry_tensor(delta, 2 * l + 1) if delta is not None else None
            h = ag.layer_norm(x, st[f"{p}.ln1.g"], st[f"{p}.ln1.b"])
            q = lora_linear(h, st[f"{p}.attn.wq"], qe)
            k = linear(h, st[f"{p}.attn.wk"])
            v = lora_linear(h, st[f"{p}.attn.wv"], ve)
            q = ag.transpose(ag.reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
            k = ag.transpose(ag.reshape(k, (B, T, H, dh)), (0, 2, 1, 3))
            v = ag.transpose(ag.reshape(v, (B, T, H, dh)), (0, 2, 1, 3))
            scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = ag.softmax(ag.add_mask(scores, causal))
            if train and dropout > 0:
                att = ag.dropout(att, dropout, drop_rng, train)
            ctx = ag.reshape(ag.transpose(ag.matmul(att, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
            x = ag.add(x, linear(ctx, st[f"{p}.attn.wo"]))
            h = ag.layer_norm(x, st[f"{p}.ln2.g"], st[f"{p}.ln2.b"])
            h = ag.gelu(ag.add(linear(h, st[f"{p}.ff.w1"]), st[f"{p}.ff.b1"]))
            h = ag.add(linear(h, st[f"{p}.ff.w2"]), st[f"{p}.ff.b2"])
            if train and dropout > 0:
                h = ag.dropout(h, dropout, drop_rng, train)
            x = ag.add(x, h)
        x = ag.layer_norm(x, st["ln_f.g"], st["ln_f.b"])
        return linear(x, st["lm_head"])


def _entry_tensor(delta: LoraDelta, idx: int) -> LoraEntry:
    e = delta.entries[idx]
    A = e.A if isinstance(e.A, Tensor) else Tensor(e.A)
    B = e.B if isinstance(e.B, Tensor) else Tensor(e.B)
    s = e.s if isinstance(e.s, Tensor) else Tensor(np.asarray(e.s, dtype=FLOAT))
    return LoraEntry(A, B, s)


def forward_with_delta(model: TargetModel, delta: Optional[LoraDelta], tokens) -> Tensor:
    return model.forward(tokens, delta=delta)


def merge_delta(model: TargetModel, delta: LoraDelta) -> TargetModel:
    """New model with the low-rank updates folded into the weights."""
    model._check_delta(delta)
    merged = model.copy()
    updates = delta.effective_updates()
    for tgt, upd in zip(enumerate_targets(model.config), updates):
        merged.store[tgt.param_name].data += upd
    return merged


# ---------------------------------------------------------------------------
# fast numpy inference path (no tape) with incremental attention state


class _InferState:
    def __init__(self, model: TargetModel, delta: Optional[LoraDelta]):
        self.cfg = model.config
        self.w = {name: t.data for name, t in model.store.items()}
        self.delta = delta.as_arrays() if delta is not None else None
        if delta is not None:
            model._check_delta(delta)
        self.k_cache: list[np.ndarray] = []
        self.v_cache: list[np.ndarray] = []

    def _lora(self, x, idx):
        if self.delta is None:
            return 0.0
        e = self.delta.entries[idx]
        coef = self.delta.alpha / self.delta.rank
        return (coef * e.s) * ((x @ e.A.T) @ e.B.T)

    def prefill(self, tokens: np.ndarray) -> np.ndarray:
        """Run the whole prompt, fill attention caches, return last logits."""
        cfg = self.cfg
        B, T = tokens.shape
        w = self.w
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        x = w["tok_emb"][tokens] + w["pos_emb"][:T]
        causal = np.triu(np.full((T, T), -1e9, dtype=FLOAT), k=1)
        self.pos = T
        for l in range(cfg.n_layers):
            p = f"blocks.{l}"
            h = _np_ln(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
            q = h @ w[f"{p}.attn.wq"].T + self._lora(h, 2 * l)
            k = h @ w[f"{p}.attn.wk"].T
            v = h @ w[f"{p}.attn.wv"].T + self._lora(h, 2 * l + 1)
            q = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            v = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            kc = np.zeros((B, H, cfg.max_seq_len, dh), dtype=FLOAT)
            vc = np.zeros((B, H, cfg.max_seq_len, dh), dtype=FLOAT)
            kc[:, :, :T] = k
            vc[:, :, :T] = v
            self.k_cache.append(kc)
            self.v_cache.append(vc)
            att = _np_softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh, dtype=FLOAT) + causal)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, cfg.d_model)
            x = x + ctx @ w[f"{p}.attn.wo"].T
            h = _np_ln(x, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
            h = _np_gelu(h @ w[f"{p}.ff.w1"].T + w[f"{p}.ff.b1"])
            x = x + h @ w[f"{p}.ff.w2"].T + w[f"{p}.ff.b2"]
        x = _np_ln(x[:, -1], w["ln_f.g"], w["ln_f.b"])
        return x @ w["lm_head"].T

    def step(self, token_ids: np.ndarray) -> np.ndarray:
        """Advance one position for every row, return logits (B, V)."""
        cfg = self.cfg
        w = self.w
        B = token_ids.shape[0]
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        pos = self.pos
        if pos >= cfg.max_seq_len:
            raise ag.ShapeError("sequence length exceeds max_seq_len during sampling")
        x = w["tok_emb"][token_ids] + w["pos_emb"][pos]
        for l in range(cfg.n_layers):
            p = f"blocks.{l}"
            h = _np_ln(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
            q = h @ w[f"{p}.attn.wq"].T + self._lora(h, 2 * l)
            k = h @ w[f"{p}.attn.wk"].T
            v = h @ w[f"{p}.attn.wv"].T + self._lora(h, 2 * l + 1)
            kc, vc = self.k_cache[l], self.v_cache[l]
            kc[:, :, pos] = k.reshape(B, H, dh)
            vc[:, :, pos] = v.reshape(B, H, dh)
            qh = q.reshape(B, H, 1, dh)
            scores = qh @ kc[:, :, : pos + 1].transpose(0, 1, 3, 2) / np.sqrt(dh, dtype=FLOAT)
            att = _np_softmax(scores)
            ctx = (att @ vc[:, :, : pos + 1]).reshape(B, cfg.d_model)
            x = x + ctx @ w[f"{p}.attn.wo"].T
            h = _np_ln(x, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
            h = _np_gelu(h @ w[f"{p}.ff.w1"].T + w[f"{p}.ff.b1"])
            x = x + h @ w[f"{p}.ff.w2"].T + w[f"{p}.ff.b2"]
        self.pos = pos + 1
        x = _np_ln(x, w["ln_f.g"], w["ln_f.b"])
        return x @ w["lm_head"].T


def _np_ln(x, g, b, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return ((x - mean) / np.sqrt(var + FLOAT(eps))) * g + b


def _np_gelu(x):
    c = FLOAT(np.sqrt(2.0 / np.pi))
    return FLOAT(0.5) * x * (1.0 + np.tanh(c * (x + FLOAT(0.044715) * x * x * x)))


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sample_tokens(
    model: TargetModel,
    delta: Optional[LoraDelta],
    prompt_tokens: list[int],
    temperature: float,
    max_new_tokens: int,
    streams: list[RngState],
) -> list[list[int]]:
    """Sample one completion per stream from a shared prompt.

    Row j's t-th token consumes the t-th uniform draw of stream j, so
    results do not depend on how rows are batched together.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    B = len(streams)
    cfg = model.config
    prompt = [BOS_ID] + list(prompt_tokens)
    budget = min(max_new_tokens, cfg.max_seq_len - len(prompt))
    if budget < 1:
        raise ag.ShapeError("prompt leaves no room for generation")

    state = _InferState(model, delta)
    if B > 1:
        # identical prompt rows: prefill once, tile the caches
        logits1 = state.prefill(np.asarray([prompt], dtype=np.int64))
        state.k_cache = [np.repeat(c, B, axis=0) for c in state.k_cache]
        state.v_cache = [np.repeat(c, B, axis=0) for c in state.v_cache]
        logits = np.repeat(logits1, B, axis=0)
    else:
        logits = state.prefill(np.asarray([prompt], dtype=np.int64))

    gens = [s.generator() for s in streams]
    outputs: list[list[int]] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    last = np.zeros(B, dtype=np.int64)
    for _ in range(budget):
        if temperature == 0.0:
            picks = logits.argmax(axis=-1)
        else:
            probs = _np_softmax(logits.astype(np.float64) / temperature)
            cum = probs.cumsum(axis=-1)
            picks = np.empty(B, dtype=np.int64)
            for j in range(B):
                if done[j]:
                    picks[j] = PAD_ID
                    continue
                u = gens[j].random()
                picks[j] = min(int(np.searchsorted(cum[j], u * cum[j, -1])), logits.shape[-1] - 1)
        for j in range(B):
            if done[j]:
                continue
            tok = int(picks[j])
            if tok == EOS_ID:
                done[j] = True
            else:
                outputs[j].append(tok)
            last[j] = tok
        if done.all():
            break
        # PAD stands in for finished rows; their outputs are already closed
        feed = np.where(done, PAD_ID, last)
        logits = state.step(feed)
    return outputs


def sample_text(
    model: TargetModel,
    delta: Optional[LoraDelta],
    prompt: str,
    temperature: float,
    max_new_tokens: int,
    rng: RngState,
) -> str:
    tok = model.tokenizer
    out = sample_tokens(model, delta, tok.encode(prompt), temperature, max_new_tokens, [rng])
    return tok.decode(out[0])


# ---------------------------------------------------------------------------
# pretraining


def pretrain_lm(
    corpus: bytes,
    config: LmConfig,
    steps: int,
    lr: float = 3e-4,
    seed: int = 42,
    batch_size: int = 16,
    seq_len: int = 128,
    warmup_ratio: float = 0.05,
    weight_decay: float = 0.01,
    log_every: int = 200,
    log_fn=None,
) -> tuple[TargetModel, float]:
    """Train a base LM on next-byte prediction; returns (model, heldout loss)."""
    if len(corpus) < 100_000:
        raise ValueError(f"corpus too small: {len(corpus)} bytes (need >= 100000)")
    seq_len = min(seq_len, config.max_seq_len - 1)
    rng = RngState(seed)
    model = TargetModel.init(config, rng.child(1))
    model.set_trainable(True)
    data = np.frombuffer(corpus, dtype=np.uint8).astype(np.int64)
    split = int(len(data) * 0.9)
    train_data, held_data = data[:split], data[split:]
    gen = rng.child(2).generator()

    def batch(source, g):
        offs = g.integers(0, len(source) - seq_len - 1, size=batch_size)
        x = np.stack([source[o : o + seq_len] for o in offs])
        y = np.stack([source[o + 1 : o + seq_len + 1] for o in offs])
        x = np.concatenate([np.full((batch_size, 1), BOS_ID, dtype=np.int64), x[:, :-1]], axis=1)
        return x, y

    for step in range(steps):
        x, y = batch(train_data, gen)
        logits = model.forward(x, train=True)
        flat = ag.reshape(logits, (x.size, config.vocab_size))
        loss = ag.cross_entropy(flat, y.reshape(-1), np.ones(y.size, dtype=bool))
        model.store.zero_grad()
        loss.backward()
        cur_lr = ag.cosine_schedule(step, steps, warmup_ratio, lr)
        model.store.adamw_step(cur_lr, weight_decay)
        if log_fn is not None and (step % log_every == 0 or step == steps - 1):
            log_fn(step, float(loss.data))

    held = evaluate_lm_loss(model, held_data, seq_len=seq_len, seed=seed + 7)
    model.set_trainable(False)
    return model, held


def evaluate_lm_loss(
    model: TargetModel,
    data: np.ndarray,
    delta: Optional[LoraDelta] = None,
    seq_len: int = 128,
    n_batches: int = 8,
    batch_size: int = 16,
    seed: int = 7,
) -> float:
    """Mean next-byte cross-entropy on fixed random windows of `data`."""
    data = np.asarray(data, dtype=np.int64)
    gen = RngState(seed).generator()
    total, count = 0.0, 0
    with ag.no_grad():
        for _ in range(n_batches):
            offs = gen.integers(0, len(data) - seq_len - 1, size=batch_size)
            x = np.stack([data[o : o + seq_len] for o in offs])
            y = np.stack([data[o + 1 : o + seq_len + 1] for o in offs])
            x = np.concatenate(
                [np.full((batch_size, 1), BOS_ID, dtype=np.int64), x[:, :-1]], axis=1
            )
            logits = model.forward(x, delta=delta)
            flat = ag.reshape(logits, (x.size, model.config.vocab_size))
            loss = ag.cross_entropy(flat, y.reshape(-1), np.ones(y.size, dtype=bool))
            total += float(loss.data) * y.size
            count += y.size
    return total / count
