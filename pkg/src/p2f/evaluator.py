"""Verification, success-rate aggregation, and robustness evaluations.

A fingerprint passes for a given similarity metric when the triggered
similarity distribution is significantly higher than the non-triggered
one: Welch p < alpha AND mean(triggered) > mean(non-triggered).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field
from typing import Optional

import numpy as np

from . import metrics as mt
from .autograd import FLOAT, RngState
from .data import FingerprintSpec, render_chat, render_null_prompt, render_trigger_prompt
from .lm import LoraDelta, TargetModel, sample_tokens

METRICS = ("bleu", "rouge1", "rougeL")


@dataclass
class VerificationConfig:
    samples: int = 100
    temperature: float = 0.7
    alpha_sig: float = 0.05
    max_new_tokens: int = 64
    base_seed: int = 1234

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("samples must be >= 2")
        if not 0.0 < self.alpha_sig < 1.0:
            raise ValueError("alpha_sig must be in (0, 1)")


@dataclass
class DescriptionReport:
    spec_id: int
    p_values: dict[str, float]
    mean_trig: dict[str, float]
    mean_non: dict[str, float]
    passed: dict[str, bool]


def _score_all(texts: list[str], target: str) -> dict[str, list[float]]:
    return {
        "bleu": [mt.bleu(t, target) for t in texts],
        "rouge1": [mt.rouge(t, target, "rouge1") for t in texts],
        "rougeL": [mt.rouge(t, target, "rougeL") for t in texts],
    }


def _sample_condition(
    model: TargetModel,
    delta: Optional[LoraDelta],
    prompt: str,
    cfg: VerificationConfig,
    spec_id: int,
    cond_tag: int,
) -> list[str]:
    root = RngState(cfg.base_seed)
    streams = [root.child(spec_id, cond_tag, j) for j in range(cfg.samples)]
    tok = model.tokenizer
    outs = sample_tokens(
        model, delta, tok.encode(render_chat(prompt)),
        cfg.temperature, cfg.max_new_tokens, streams,
    )
    return [tok.decode(o) for o in outs]


def verify_fingerprint(
    model: TargetModel,
    delta: Optional[LoraDelta],
    spec: FingerprintSpec,
    cfg: VerificationConfig,
) -> DescriptionReport:
    """Triggered vs non-triggered sampling, similarity scoring, Welch test."""
    trig_texts = _sample_condition(
        model, delta, render_trigger_prompt(spec.trigger), cfg, spec.id, 0
    )
    non_texts = _sample_condition(model, delta, render_null_prompt(), cfg, spec.id, 1)
    s_trig = _score_all(trig_texts, spec.target)
    s_non = _score_all(non_texts, spec.target)
    p_values, mean_trig, mean_non, passed = {}, {}, {}, {}
    for m in METRICS:
        p = mt.welch_ttest(s_trig[m], s_non[m])
        mt_mean = float(np.mean(s_trig[m]))
        mn_mean = float(np.mean(s_non[m]))
        p_values[m] = p
        mean_trig[m] = mt_mean
        mean_non[m] = mn_mean
        passed[m] = bool(p < cfg.alpha_sig and mt_mean > mn_mean)
    return DescriptionReport(spec.id, p_values, mean_trig, mean_non, passed)


def compute_fsr(reports: list[DescriptionReport]) -> dict[str, float]:
    """Fraction of descriptions passing per metric."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return {
        m: sum(1 for r in reports if r.passed[m]) / len(reports) for m in METRICS
    }


def write_reports(reports: list[DescriptionReport], path) -> None:
    ordered = sorted(reports, key=lambda r: r.spec_id)
    with open(path, "w", encoding="utf-8") as f:
        for r in ordered:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def write_summary(reports: list[DescriptionReport], path) -> dict:
    summary = {"n_descriptions": len(reports), "fsr": compute_fsr(reports)}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


# ---------------------------------------------------------------------------
# quantization attack


@dataclass
class QuantSpec:
    bits: int = 8
    scheme: str = "per-tensor-symmetric"

    def __post_init__(self):
        if self.bits not in (8, 16):
            raise ValueError("bits must be 8 or 16")
        if self.scheme != "per-tensor-symmetric":
            raise ValueError(f"unsupported scheme: {self.scheme}")


def quantize_array(w: np.ndarray, bits: int) -> np.ndarray:
    if bits == 16:
        return w.astype(np.float16).astype(FLOAT)
    amax = float(np.abs(w).max())
    if amax == 0.0:
        return np.zeros_like(w, dtype=FLOAT)
    # grid step amax/127; f64 arithmetic keeps the map idempotent and the
    # max-magnitude weight exactly on the grid endpoint
    w64 = w.astype(np.float64)
    levels = np.clip(np.round(w64 * (127.0 / amax)), -127, 127)
    return (levels * amax / 127.0).astype(FLOAT)


def quantize_model(model: TargetModel, spec: QuantSpec) -> TargetModel:
    """Per-tensor precision reduction; inference stays in float32."""
    out = model.copy()
    for name in out.store.names():
        t = out.store[name]
        t.data = quantize_array(t.data, spec.bits)
    return out


# ---------------------------------------------------------------------------
# harmlessness


@dataclass
class HarmlessnessReport:
    perplexity_ratios: list[float]
    accuracy_deltas: list[float]  # percentage points vs base
    mean_ppl_ratio: float
    median_ppl_ratio: float
    mean_acc_delta: float
    median_acc_delta: float


def probe_accuracy(
    model: TargetModel,
    delta: Optional[LoraDelta],
    probes: list[tuple[str, str]],
    max_new_tokens: int = 48,
) -> float:
    """Greedy exact-match accuracy on instruction probes."""
    tok = model.tokenizer
    hits = 0
    for prompt, expect in probes:
        out = sample_tokens(
            model, delta, tok.encode(render_chat(prompt)), 0.0, max_new_tokens,
            [RngState(0)],
        )
        if tok.decode(out[0]).strip() == expect.strip():
            hits += 1
    return hits / len(probes)


def harmlessness_eval(
    base_model: TargetModel,
    deltas: list[LoraDelta],
    heldout_bytes: bytes,
    probes: list[tuple[str, str]],
) -> HarmlessnessReport:
    """Per-variant held-out perplexity ratio and probe-accuracy delta."""
    from .lm import evaluate_lm_loss

    if not deltas:
        raise ValueError("need at least one injected variant")
    data = np.frombuffer(heldout_bytes, dtype=np.uint8).astype(np.int64)
    base_loss = evaluate_lm_loss(base_model, data)
    base_acc = probe_accuracy(base_model, None, probes)
    ratios, acc_deltas = [], []
    for delta in deltas:
        loss = evaluate_lm_loss(base_model, data, delta=delta)
        ratios.append(float(np.exp(loss - base_loss)))
        acc = probe_accuracy(base_model, delta, probes)
        acc_deltas.append(100.0 * (acc - base_acc))
    return HarmlessnessReport(
        ratios,
        acc_deltas,
        float(np.mean(ratios)),
        float(np.median(ratios)),
        float(np.mean(acc_deltas)),
        float(np.median(acc_deltas)),
    )
