"""End-to-end optimization of the delta generator, plus the downstream
fine-tuning attack used by the robustness protocol.

Each training step handles one description: its fingerprint sample plus
sampled regularization samples share the single delta generated for that
description, the supervised loss is averaged over response tokens only,
and gradients flow into the generator (and the condition table when
trainable) but never into the frozen LM.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .autograd import ParameterStore, RngState
from .data import (
    FingerprintSpec,
    TrainingSample,
    encode_sample,
    pad_batch,
    render_trigger_prompt,
)
from .encoder import ConditionEncoder
from .evaluator import VerificationConfig, compute_fsr, verify_fingerprint
from .generator import ParamGenerator
from .lm import PAD_ID, TargetModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 40
    warmup_ratio: float = 0.05
    weight_decay: float = 0.005
    grad_accumulation_steps: int = 1
    seed: int = 42
    eval_interval: int = 0  # optimizer steps between probe FSR evals; 0 = off
    probe_descriptions: int = 16
    probe_samples: int = 20
    # scheduled-sampling-style corruption: each response token fed as input
    # to the fingerprint row is replaced by a random byte with this
    # probability (labels stay clean), so sampling-time mistakes do not
    # derail the remainder of the target
    prefix_noise: float = 0.0

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.max_epochs) <= 0:
            raise ValueError("lr, batch_size, max_epochs must be positive")
        if self.grad_accumulation_steps < 1:
            raise ValueError("grad_accumulation_steps must be >= 1")
        if not 0.0 <= self.prefix_noise < 1.0:
            raise ValueError("prefix_noise must be in [0, 1)")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_probe_fsr: float = 0.0
    running_loss: float = 0.0
    records: list[dict] = field(default_factory=list)


def _corrupt_response_inputs(
    row: tuple[np.ndarray, np.ndarray, np.ndarray],
    noise: float,
    gen: np.random.Generator,
):
    """Replace response tokens on the input side with random bytes (prob
    `noise` each); labels and mask are untouched."""
    x, y, m = row
    x = x.copy()
    # x[j] = y[j-1], so x[j] is a supervised response token iff m[j-1]
    positions = 1 + np.flatnonzero(m[:-1])
    flip = positions[gen.random(len(positions)) < noise]
    x[flip] = gen.integers(0, 256, size=len(flip))
    return x, y, m


def _micro_batch(
    model: TargetModel,
    spec: FingerprintSpec,
    reg_pairs: list[tuple[str, str]],
    batch_size: int,
    gen: np.random.Generator,
    prefix_noise: float = 0.0,
):
    tok = model.tokenizer
    fp_row = encode_sample(tok, render_trigger_prompt(spec.trigger), spec.target,
                           model.config.max_seq_len)
    if prefix_noise > 0.0:
        fp_row = _corrupt_response_inputs(fp_row, prefix_noise, gen)
    rows = [fp_row]
    for _ in range(batch_size - 1):
        p, r = reg_pairs[int(gen.integers(0, len(reg_pairs)))]
        rows.append(encode_sample(tok, p, r, model.config.max_seq_len))
    return pad_batch(rows, PAD_ID)


def train_generator(
    generator: ParamGenerator,
    basis: ParameterStore,
    model: TargetModel,
    encoder: ConditionEncoder,
    specs: list[FingerprintSpec],
    reg_pairs: list[tuple[str, str]],
    cfg: TrainConfig,
    log_path=None,
    checkpoint_fn: Optional[Callable[[TrainState], None]] = None,
    start_epoch: int = 0,
    start_step: int = 0,
) -> TrainState:
    """Optimize the generator against the frozen LM. Returns final state.

    Resumable at epoch boundaries: every RNG stream is keyed by
    (epoch, spec, step), so restoring parameter + optimizer state and
    passing the saved epoch/step continues the identical trajectory.
    `checkpoint_fn` additionally runs at the end of every epoch.
    """
    if not specs:
        raise ValueError("no training descriptions")
    if not reg_pairs:
        raise ValueError("no regularization pairs")
    for name, _ in model.store.trainable():
        raise ValueError(f"target model must be fully frozen (got trainable {name!r})")

    if not 0 <= start_epoch <= cfg.max_epochs:
        raise ValueError(f"start_epoch {start_epoch} outside [0, {cfg.max_epochs}]")
    root = RngState(cfg.seed)
    state = TrainState(step=start_step, epoch=start_epoch)
    micro_per_opt = cfg.grad_accumulation_steps
    total_opt_steps = max(1, cfg.max_epochs * len(specs) // micro_per_opt)
    cond_cache = {} if encoder.cfg.freeze_embeddings else None
    mode = "a" if start_epoch > 0 else "w"
    log_file = open(log_path, mode, encoding="utf-8") if log_path else None
    bad_streak = 0
    micro = start_step * micro_per_opt
    try:
        for epoch in range(start_epoch, cfg.max_epochs):
            state.epoch = epoch
            order = root.child("order", epoch).generator().permutation(len(specs))
            for idx in order:
                spec = specs[int(idx)]
                reg_gen = root.child("reg", epoch, spec.id).generator()
                xs, ys, ms = _micro_batch(model, spec, reg_pairs, cfg.batch_size,
                                          reg_gen, cfg.prefix_noise)
                drop_rng = root.child("drop", state.step, micro).generator()
                try:
                    if cond_cache is not None and spec.id in cond_cache:
                        cond = cond_cache[spec.id]
                    else:
                        cond = encoder.encode(spec.description)
                        if cond_cache is not None:
                            cond_cache[spec.id] = cond
                    delta = generator.generate(cond, basis, train=True, drop_rng=drop_rng)
                    logits = model.forward(xs, delta=delta)
                    flat = ag.reshape(logits, (xs.size, model.config.vocab_size))
                    loss = ag.cross_entropy(flat, ys.reshape(-1), ms.reshape(-1))
                    loss.backward()
                except ag.NonFiniteError as err:
                    bad_streak += 1
                    log.warning("non-finite loss at step %d: %s", state.step, err)
                    generator.store.zero_grad()
                    encoder.store.zero_grad()
                    if bad_streak >= 3:
                        raise RuntimeError(
                            "aborting: three consecutive non-finite training steps"
                        ) from err
                    continue
                bad_streak = 0
                micro += 1
                if micro % micro_per_opt != 0:
                    continue
                lr = ag.cosine_schedule(
                    min(state.step, total_opt_steps), total_opt_steps,
                    cfg.warmup_ratio, cfg.lr,
                )
                generator.store.adamw_step(lr, cfg.weight_decay)
                encoder.store.adamw_step(lr, cfg.weight_decay)
                generator.store.zero_grad()
                encoder.store.zero_grad()
                state.step += 1
                state.running_loss = 0.98 * state.running_loss + 0.02 * float(loss.data) \
                    if state.step > 1 else float(loss.data)
                record = {
                    "step": state.step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": float(loss.data),
                }
                if cfg.eval_interval and state.step % cfg.eval_interval == 0:
                    fsr = probe_fsr(generator, basis, model, encoder, specs, cfg)
                    record["probe_fsr_bleu"] = fsr
                    state.best_probe_fsr = max(state.best_probe_fsr, fsr)
                    if checkpoint_fn is not None:
                        checkpoint_fn(state)
                state.records.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
            if checkpoint_fn is not None:
                # epoch boundary: a safe resume point (pass epoch+1/step back in)
                state.epoch = epoch + 1
                checkpoint_fn(state)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_fn is not None:
        checkpoint_fn(state)
    return state


def probe_fsr(
    generator: ParamGenerator,
    basis: ParameterStore,
    model: TargetModel,
    encoder: ConditionEncoder,
    specs: list[FingerprintSpec],
    cfg: TrainConfig,
) -> float:
    """Cheap BLEU-FSR on a held-in probe subset (training progress signal)."""
    from .generator import generate_delta

    probe = specs[: min(cfg.probe_descriptions, len(specs))]
    vcfg = VerificationConfig(samples=cfg.probe_samples, base_seed=cfg.seed + 99)
    reports = []
    with ag.no_grad():
        for spec in probe:
            delta = generate_delta(generator, basis, encoder.encode(spec.description))
            reports.append(verify_fingerprint(model, delta, spec, vcfg))
    return compute_fsr(reports)["bleu"]


def finetune_model(
    model: TargetModel,
    samples: list[TrainingSample],
    epochs: int = 3,
    lr: float = 2e-5,
    batch_size: int = 4,
    seed: int = 42,
) -> TargetModel:
    """Full-parameter SFT of a (merged) model; the attack of the robustness
    protocol. Mutates and returns `model`."""
    if epochs == 0:
        return model
    tok = model.tokenizer
    rows = [encode_sample(tok, s.prompt, s.response, model.config.max_seq_len)
            for s in samples]
    model.set_trainable(True)
    root = RngState(seed)
    n_batches = -(-len(rows) // batch_size)
    total = epochs * n_batches
    step = 0
    for epoch in range(epochs):
        order = root.child("ft", epoch).generator().permutation(len(rows))
        for b in range(n_batches):
            chunk = [rows[int(i)] for i in order[b * batch_size : (b + 1) * batch_size]]
            xs, ys, ms = pad_batch(chunk, PAD_ID)
            logits = model.forward(xs)
            flat = ag.reshape(logits, (xs.size, model.config.vocab_size))
            loss = ag.cross_entropy(flat, ys.reshape(-1), ms.reshape(-1))
            model.store.zero_grad()
            loss.backward()
            cur = ag.cosine_schedule(step, total, 0.05, lr)
            model.store.adamw_step(cur, 0.0)
            step += 1
    model.set_trainable(False)
    return model
