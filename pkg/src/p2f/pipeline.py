"""High-level orchestration shared by the CLI and the test suite:
component construction, composite checkpoints, and the evaluation runs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import FLOAT, ParameterStore, RngState
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, canonical_text, parse_config
from .data import (
    DatasetManifest,
    FingerprintSpec,
    build_dataset,
    make_instruction_pairs,
    synthesize_split,
)
from .encoder import ConditionEncoder
from .evaluator import (
    DescriptionReport,
    QuantSpec,
    VerificationConfig,
    quantize_model,
    verify_fingerprint,
)
from .generator import (
    ChunkLayout,
    ParamGenerator,
    compute_chunk_layout,
    generate_delta,
    make_stable_basis,
)
from .lm import LoraDelta, LoraEntry, TargetModel, enumerate_targets, merge_delta


def _metadata(kind: str, cfg: RunConfig) -> str:
    return f"; kind = {kind}\n" + canonical_text(cfg)


def parse_metadata(metadata: str) -> tuple[str, RunConfig]:
    lines = metadata.splitlines()
    if not lines or not lines[0].startswith("; kind = "):
        raise CheckpointError("checkpoint metadata missing kind field")
    kind = lines[0][len("; kind = "):].strip()
    return kind, parse_config("\n".join(lines[1:]))


# ---------------------------------------------------------------------------
# component construction


@dataclass
class GeneratorBundle:
    encoder: ConditionEncoder
    generator: ParamGenerator
    basis: ParameterStore
    layout: ChunkLayout


def build_bundle(cfg: RunConfig) -> GeneratorBundle:
    """Fresh encoder/generator/basis wired to the configured LM geometry."""
    targets = enumerate_targets(cfg.lm)
    layout = compute_chunk_layout(targets, cfg.generator.rank, cfg.generator.chunk_len)
    seed = cfg.train.seed
    encoder = ConditionEncoder(cfg.encoder, RngState(seed).child(101))
    generator = ParamGenerator(
        cfg.generator, cfg.encoder.d_embed, layout, RngState(seed).child(102)
    )
    basis = make_stable_basis(layout, seed + 1000)
    return GeneratorBundle(encoder, generator, basis, layout)


# ---------------------------------------------------------------------------
# checkpoint IO


def save_lm(model: TargetModel, path, cfg: RunConfig) -> None:
    save_checkpoint(model.store, path, _metadata("lm", cfg))


def load_lm(path) -> tuple[TargetModel, RunConfig]:
    arrays, metadata = load_checkpoint(path)
    kind, cfg = parse_metadata(metadata)
    if kind != "lm":
        raise CheckpointError(f"expected an lm checkpoint, got kind {kind!r}")
    model = TargetModel.init(cfg.lm, RngState(0))
    _load_into(model.store, arrays)
    return model, cfg


def save_bundle(bundle: GeneratorBundle, path, cfg: RunConfig) -> None:
    arrays = {f"gen.{k}": t.data for k, t in bundle.generator.store.items()}
    arrays.update({f"enc.{k}": t.data for k, t in bundle.encoder.store.items()})
    arrays.update({k: t.data for k, t in bundle.basis.items()})
    save_checkpoint(arrays, path, _metadata("generator", cfg))


def load_bundle(path) -> tuple[GeneratorBundle, RunConfig]:
    arrays, metadata = load_checkpoint(path)
    kind, cfg = parse_metadata(metadata)
    if kind != "generator":
        raise CheckpointError(f"expected a generator checkpoint, got kind {kind!r}")
    bundle = build_bundle(cfg)
    _load_into(bundle.generator.store,
               {k[4:]: v for k, v in arrays.items() if k.startswith("gen.")})
    _load_into(bundle.encoder.store,
               {k[4:]: v for k, v in arrays.items() if k.startswith("enc.")})
    _load_into(bundle.basis,
               {k: v for k, v in arrays.items() if k.startswith("basis.")})
    return bundle, cfg


def _load_into(store: ParameterStore, arrays: dict) -> None:
    names = set(store.names())
    if names != set(arrays):
        missing = names - set(arrays)
        extra = set(arrays) - names
        raise CheckpointError(
            f"checkpoint does not match architecture (missing={sorted(missing)[:3]}, "
            f"extra={sorted(extra)[:3]})"
        )
    for name in names:
        t = store[name]
        if t.data.shape != arrays[name].shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {t.data.shape} vs {arrays[name].shape}"
            )
        t.data = arrays[name].astype(FLOAT).copy()


def save_delta(delta: LoraDelta, path, cfg: RunConfig) -> None:
    d = delta.as_arrays()
    arrays = {}
    for i, e in enumerate(d.entries):
        arrays[f"target.{i}.A"] = e.A
        arrays[f"target.{i}.B"] = e.B
        arrays[f"target.{i}.s"] = np.asarray([e.s], dtype=FLOAT)
    save_checkpoint(arrays, path, _metadata("delta", cfg))


def load_delta(path) -> tuple[LoraDelta, RunConfig]:
    arrays, metadata = load_checkpoint(path)
    kind, cfg = parse_metadata(metadata)
    if kind != "delta":
        raise CheckpointError(f"expected a delta checkpoint, got kind {kind!r}")
    n = len(arrays) // 3
    entries = [
        LoraEntry(arrays[f"target.{i}.A"], arrays[f"target.{i}.B"],
                  float(arrays[f"target.{i}.s"][0]))
        for i in range(n)
    ]
    return LoraDelta(entries, cfg.generator.rank, cfg.generator.alpha), cfg


# ---------------------------------------------------------------------------
# dataset synthesis


def synth_dataset(cfg: RunConfig):
    """(train_specs, test_specs, reg_pairs, samples, manifest) from the data seed."""
    d = cfg.data
    rng = RngState(d.seed)
    train_specs, test_specs = synthesize_split(d.n_train_specs, d.n_test_specs,
                                               rng.child(1))
    reg_pairs = make_instruction_pairs(max(256, d.n_train_specs), rng.child(2))
    samples = build_dataset(train_specs, reg_pairs, d.reg_ratio, rng.child(3))
    manifest = DatasetManifest(
        len(train_specs), len(test_specs),
        sum(1 for s in samples if s.kind == "regularization"), d.seed,
    )
    return train_specs, test_specs, reg_pairs, samples, manifest


# ---------------------------------------------------------------------------
# evaluation runs


def deltas_for_specs(bundle: GeneratorBundle, specs: list[FingerprintSpec]):
    for spec in specs:
        yield spec, generate_delta(bundle.generator, bundle.basis,
                                   bundle.encoder.encode(spec.description))


def verify_specs(
    model: TargetModel,
    bundle: Optional[GeneratorBundle],
    specs: list[FingerprintSpec],
    vcfg: VerificationConfig,
    quant: Optional[QuantSpec] = None,
) -> list[DescriptionReport]:
    """Verification per description; bundle None means no delta (null model)."""
    reports = []
    for spec in specs:
        if bundle is None:
            reports.append(verify_fingerprint(model, None, spec, vcfg))
            continue
        delta = generate_delta(bundle.generator, bundle.basis,
                               bundle.encoder.encode(spec.description))
        if quant is not None:
            attacked = quantize_model(merge_delta(model, delta), quant)
            reports.append(verify_fingerprint(attacked, None, spec, vcfg))
        else:
            reports.append(verify_fingerprint(model, delta, spec, vcfg))
    return reports
