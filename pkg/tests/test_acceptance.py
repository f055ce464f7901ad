"""End-to-end acceptance suite.

Thirteen numbered criteria cover gradients, the identity-at-init contract,
hook/merge equivalence, the chunk codec, an overfit sanity run, desk-scale
generalization, quantization/fine-tuning robustness, harmlessness, ablation
ordering, metric oracles, determinism, and the null-model false-positive
bound.  Each test records one PASS/FAIL line that conftest prints in the
terminal summary.

The expensive artifacts (pretrained base LM, the generalization training
run) are session fixtures shared across criteria.  Set P2F_ACCEPT_CACHE to
a directory to persist them between suite runs during development.
"""

from __future__ import annotations

import os

import numpy as np
import pytest

import p2f.autograd as ag
from p2f import metrics as mt
from p2f.autograd import RngState
from p2f.config import RunConfig
from p2f.data import (
    make_instruction_pairs,
    synth_corpus,
    synthesize_fingerprints,
    synthesize_split,
    TrainingSample,
)
from p2f.evaluator import (
    QuantSpec,
    VerificationConfig,
    compute_fsr,
    harmlessness_eval,
    quantize_model,
    verify_fingerprint,
    write_reports,
)
from p2f.generator import (
    compute_chunk_layout,
    generate_delta,
    make_stable_basis,
    pack_lora,
    unpack_chunks,
)
from p2f.gradcheck import run_suite
from p2f.lm import (
    LoraDelta,
    LoraEntry,
    enumerate_targets,
    merge_delta,
    pretrain_lm,
)
from p2f.pipeline import build_bundle, load_lm, save_bundle, save_lm
from p2f.trainer import TrainConfig, finetune_model, train_generator

from conftest import record_acceptance
from reference_impls import ref_bleu, ref_rouge, ref_welch_p

# ---------------------------------------------------------------------------
# run settings (calibrated; see the decision log for the measurements)

PRETRAIN_STEPS = 1500
PRETRAIN_SEED = 42
CORPUS_SEED = 7

# criterion 5: overfit 8 descriptions on the toy LM
CRIT5 = dict(n_specs=8, rank=16, alpha=32.0, lr=1e-3, batch_size=1,
             epochs=1000, weight_decay=0.0, prefix_noise=0.10, seed=5)

# criterion 6: train on 256 descriptions, verify 32 strictly unseen ones
CRIT6 = dict(n_train=256, n_test=32, rank=16, alpha=32.0, lr=1e-3,
             batch_size=2, epochs=300, weight_decay=0.0, prefix_noise=0.10,
             seed=9)

# criterion 8: ablation comparison regime (identical seed/data across arms)
CRIT8 = dict(n_specs=8, rank=16, alpha=32.0, lr=1e-3, batch_size=1,
             epochs=400, weight_decay=0.0, prefix_noise=0.10, seed=5)

VERIFY50 = dict(samples=50, max_new_tokens=48)


def _cache_dir():
    path = os.environ.get("P2F_ACCEPT_CACHE")
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def _train_bundle(model, specs, *, rank, alpha, lr, batch_size, epochs,
                  weight_decay, seed, ablation="default", n_reg=64,
                  dropout=0.0, prefix_noise=0.0, **_):
    cfg = RunConfig()
    cfg.generator.rank = rank
    cfg.generator.alpha = alpha
    cfg.generator.dropout = dropout
    cfg.generator.ablation = ablation
    cfg.train.seed = seed
    bundle = build_bundle(cfg)
    reg = make_instruction_pairs(n_reg, RngState(seed + 1))
    tc = TrainConfig(lr=lr, batch_size=batch_size, max_epochs=epochs,
                     seed=seed, weight_decay=weight_decay,
                     prefix_noise=prefix_noise)
    train_generator(bundle.generator, bundle.basis, model, bundle.encoder,
                    specs, reg, tc)
    return bundle, cfg


def _verify_all(model, bundle, specs, *, samples, max_new_tokens, base_seed=1234):
    vcfg = VerificationConfig(samples=samples, max_new_tokens=max_new_tokens,
                              base_seed=base_seed)
    reports = []
    for spec in specs:
        delta = generate_delta(bundle.generator, bundle.basis,
                               bundle.encoder.encode(spec.description))
        reports.append(verify_fingerprint(model, delta, spec, vcfg))
    return reports


# ---------------------------------------------------------------------------
# session fixtures

@pytest.fixture(scope="session")
def base_lm(tmp_path_factory):
    """Pretrained byte-level base LM shared by every end-to-end criterion."""
    cache = _cache_dir()
    cached = os.path.join(cache, "lm.ckpt") if cache else None
    if cached and os.path.exists(cached):
        model, _ = load_lm(cached)
        model.set_trainable(False)
        return model
    cfg = RunConfig()
    corpus = synth_corpus(CORPUS_SEED)
    model, heldout = pretrain_lm(corpus, cfg.lm, steps=PRETRAIN_STEPS,
                                 seed=PRETRAIN_SEED)
    assert heldout < 2.0, f"pretraining failed to converge (heldout {heldout:.3f})"
    model.set_trainable(False)
    if cached:
        save_lm(model, cached, cfg)
    return model


@pytest.fixture(scope="session")
def crit6_run(base_lm, tmp_path_factory):
    """Generalization training run reused by criteria 6, 7, 9, and 10."""
    train_specs, test_specs = synthesize_split(
        CRIT6["n_train"], CRIT6["n_test"], RngState(21))
    cache = _cache_dir()
    cached = os.path.join(cache, "crit6.ckpt") if cache else None
    if cached and os.path.exists(cached):
        from p2f.pipeline import load_bundle
        bundle, _ = load_bundle(cached)
    else:
        bundle, cfg = _train_bundle(base_lm, train_specs, **CRIT6)
        if cached:
            save_bundle(bundle, cached, cfg)
    reports = _verify_all(base_lm, bundle, test_specs, **VERIFY50)
    return bundle, train_specs, test_specs, reports


# ---------------------------------------------------------------------------
# 1. gradient correctness

def test_criterion_1_gradient_correctness():
    results = run_suite(seed=0, n_instances=10, tol=1e-3)
    worst = max(r.rel_error for r in results)
    ok = all(r.ok for r in results)
    record_acceptance(1, ok,
                      f"{len(results)} finite-difference checks, "
                      f"worst rel error {worst:.2e} (tol 1e-3)")
    assert ok, [r for r in results if not r.ok]


# 2. identity at init (gate g = 0 makes every generated delta a no-op)

def test_criterion_2_identity_at_init(base_lm):
    cfg = RunConfig()
    bundle = build_bundle(cfg)
    gen = RngState(301).generator()
    specs = synthesize_fingerprints(4, RngState(302))
    worst = 0.0
    for i in range(100):
        spec = specs[i % len(specs)]
        delta = generate_delta(bundle.generator, bundle.basis,
                               bundle.encoder.encode(spec.description))
        n = int(gen.integers(4, 48))
        prompt = gen.integers(0, 256, size=(1, n)).astype(np.int64)
        with ag.no_grad():
            base = base_lm.forward(prompt).data
            fp = base_lm.forward(prompt, delta=delta).data
        worst = max(worst, float(np.abs(fp - base).max()))
    ok = worst <= 1e-6
    record_acceptance(2, ok,
                      f"fresh generator, 100 prompts, max |logit diff| "
                      f"{worst:.2e} (tol 1e-6)")
    assert ok


# 3. hook/merge equivalence

def test_criterion_3_hook_merge_equivalence(base_lm):
    targets = enumerate_targets(base_lm.config)
    gen = RngState(303).generator()
    rank = 4
    worst = 0.0
    for _ in range(20):
        entries = [
            LoraEntry(
                gen.normal(0, 0.02, size=(rank, t.d_in)).astype(np.float32),
                gen.normal(0, 0.02, size=(t.d_out, rank)).astype(np.float32),
                float(gen.normal(1.0, 0.1)),
            )
            for t in targets
        ]
        delta = LoraDelta(entries, rank, 16.0)
        merged = merge_delta(base_lm, delta)
        for _ in range(20):
            n = int(gen.integers(4, 32))
            prompt = gen.integers(0, 256, size=(1, n)).astype(np.int64)
            with ag.no_grad():
                hooked = base_lm.forward(prompt, delta=delta).data
                direct = merged.forward(prompt).data
            worst = max(worst, float(np.abs(hooked - direct).max()))
    ok = worst <= 1e-4
    record_acceptance(3, ok,
                      f"20 deltas x 20 prompts, max |logit diff| "
                      f"{worst:.2e} (tol 1e-4)")
    assert ok


# 4. chunk codec round trip

def test_criterion_4_chunk_codec_roundtrip():
    gen = RngState(304).generator()
    n_pad_cases = 0
    for case in range(100):
        n_layers = int(gen.integers(1, 5))
        d_model = int(gen.integers(1, 9)) * 8
        from p2f.lm import LmConfig
        cfg = LmConfig(n_layers=n_layers, d_model=d_model,
                       n_heads=4, d_ff=2 * d_model, max_seq_len=64)
        targets = enumerate_targets(cfg)
        r = int(gen.integers(1, 9))
        chunk_len = int(gen.integers(16, 300))
        layout = compute_chunk_layout(targets, r, chunk_len)
        if any(sl.pad > 0 for sl in layout.slices):
            n_pad_cases += 1
        a_list = [gen.normal(size=(r, t.d_in)).astype(np.float32) for t in targets]
        b_list = [gen.normal(size=(t.d_out, r)).astype(np.float32) for t in targets]
        chunks = pack_lora(a_list, b_list, layout)
        pairs = unpack_chunks(chunks, layout)
        for x, (a2, b2) in zip(zip(a_list, b_list), pairs):
            assert x[0].tobytes() == a2.tobytes(), f"A mismatch (case {case})"
            assert x[1].tobytes() == b2.tobytes(), f"B mismatch (case {case})"
    ok = n_pad_cases > 0
    record_acceptance(4, ok,
                      f"100 random layouts bitwise round-trip, "
                      f"{n_pad_cases} with nonzero padding")
    assert ok, "no padded layouts exercised"


# 5. overfit sanity: 8 train descriptions -> FSR 8/8, all three metrics

def test_criterion_5_overfit_sanity(base_lm):
    specs = synthesize_fingerprints(CRIT5["n_specs"], RngState(11))
    bundle, _ = _train_bundle(base_lm, specs, **CRIT5)
    reports = _verify_all(base_lm, bundle, specs, **VERIFY50)
    fsr = compute_fsr(reports)
    ok = all(fsr[m] == 1.0 for m in ("bleu", "rouge1", "rougeL"))
    record_acceptance(5, ok,
                      f"training FSR on 8 descriptions: bleu {fsr['bleu']:.2f} "
                      f"rouge1 {fsr['rouge1']:.2f} rougeL {fsr['rougeL']:.2f} "
                      f"(need 1.00 each)")
    assert ok, fsr


# 6. desk-scale generalization on strictly unseen descriptions

def test_criterion_6_generalization(crit6_run):
    _, train_specs, test_specs, reports = crit6_run
    fsr = compute_fsr(reports)
    ok = fsr["bleu"] >= 0.80
    record_acceptance(6, ok,
                      f"{len(train_specs)} train / {len(test_specs)} unseen "
                      f"descriptions, FSR_BLEU {fsr['bleu']:.2f} (need >= 0.80)")
    assert ok, fsr


# 7. quantization robustness on the criterion-6 run

def test_criterion_7_quantization(base_lm, crit6_run):
    bundle, _, test_specs, reports32 = crit6_run
    fsr32 = compute_fsr(reports32)["bleu"]
    reports8 = []
    vcfg = VerificationConfig(base_seed=1234, **VERIFY50)
    for spec in test_specs:
        delta = generate_delta(bundle.generator, bundle.basis,
                               bundle.encoder.encode(spec.description))
        merged = quantize_model(merge_delta(base_lm, delta), QuantSpec(bits=8))
        reports8.append(verify_fingerprint(merged, None, spec, vcfg))
    fsr8 = compute_fsr(reports8)["bleu"]
    ok = fsr8 >= fsr32 - 0.05
    record_acceptance(7, ok,
                      f"FSR_BLEU 32-bit {fsr32:.2f} vs int8 {fsr8:.2f} "
                      f"(allowed drop 0.05)")
    assert ok, (fsr32, fsr8)


# 8. ablation ordering with identical seed/data

def test_criterion_8_ablation_ordering(base_lm):
    specs = synthesize_fingerprints(CRIT8["n_specs"], RngState(11))
    fsrs = {}
    for mode in ("default", "no_residual_prediction", "no_layer_scale"):
        bundle, _ = _train_bundle(base_lm, specs, ablation=mode, **CRIT8)
        reports = _verify_all(base_lm, bundle, specs, **VERIFY50)
        fsrs[mode] = compute_fsr(reports)["bleu"]
    ok = (fsrs["default"] > fsrs["no_residual_prediction"]
          and fsrs["default"] >= fsrs["no_layer_scale"])
    record_acceptance(8, ok,
                      f"FSR_BLEU default {fsrs['default']:.2f} > "
                      f"no_residual {fsrs['no_residual_prediction']:.2f}, "
                      f">= no_scale {fsrs['no_layer_scale']:.2f}")
    assert ok, fsrs


# 9. harmlessness: held-out perplexity and instruction probes

def test_criterion_9_harmlessness(base_lm, crit6_run):
    bundle, _, test_specs, _ = crit6_run
    deltas = [
        generate_delta(bundle.generator, bundle.basis,
                       bundle.encoder.encode(s.description))
        for s in test_specs[:10]
    ]
    heldout = synth_corpus(CORPUS_SEED + 1, target_bytes=120_000)
    probes = make_instruction_pairs(20, RngState(88))
    report = harmlessness_eval(base_lm, deltas, heldout, probes)
    ppl_ok = report.median_ppl_ratio <= 1.05
    acc_ok = abs(report.median_acc_delta) <= 5.0
    ok = ppl_ok and acc_ok
    record_acceptance(9, ok,
                      f"10 variants: median ppl ratio "
                      f"{report.median_ppl_ratio:.4f} (<= 1.05), median "
                      f"probe-accuracy delta {report.median_acc_delta:+.1f} pts "
                      f"(within +-5)")
    assert ok, report


# 10. fingerprint retention after downstream full fine-tuning

def test_criterion_10_finetune_retention(base_lm, crit6_run):
    bundle, _, test_specs, reports = crit6_run
    passed_specs = [s for s, r in zip(test_specs, reports) if r.passed["bleu"]]
    assert len(passed_specs) >= 10, "criterion-6 run left fewer than 10 passing variants"
    specs10 = passed_specs[:10]
    ft_pairs = make_instruction_pairs(64, RngState(404))
    ft_samples = [TrainingSample(p, r, "regularization") for p, r in ft_pairs]
    vcfg = VerificationConfig(base_seed=1234, **VERIFY50)
    survived = 0
    for spec in specs10:
        delta = generate_delta(bundle.generator, bundle.basis,
                               bundle.encoder.encode(spec.description))
        victim = merge_delta(base_lm, delta)
        victim = finetune_model(victim, ft_samples, epochs=3, lr=2e-5, seed=17)
        rep = verify_fingerprint(victim, None, spec, vcfg)
        survived += int(rep.passed["bleu"])
    ok = survived >= 8
    record_acceptance(10, ok,
                      f"{survived}/10 fingerprints survive 3 epochs of full "
                      f"fine-tuning at lr 2e-5 (need >= 8)")
    assert ok, survived


# 11. metric oracles against independent reference implementations

def test_criterion_11_metric_oracles():
    gen = RngState(311).generator()
    vocab = ["USER-1", "alpha", "beta", "gamma", "delta", "x9", "q", "zz"]

    def rand_text():
        n = int(gen.integers(0, 12))
        return " ".join(vocab[int(gen.integers(0, len(vocab)))] for _ in range(n))

    worst = 0.0
    for _ in range(25):
        cand, ref = rand_text(), rand_text()
        worst = max(worst, abs(mt.bleu(cand, ref) - ref_bleu(cand, ref)))
        for kind in ("rouge1", "rougeL"):
            worst = max(worst,
                        abs(mt.rouge(cand, ref, kind) - ref_rouge(cand, ref, kind)))
    for _ in range(25):
        a = gen.normal(0.3, 0.2, size=int(gen.integers(5, 40))).tolist()
        b = gen.normal(0.1, 0.15, size=int(gen.integers(5, 40))).tolist()
        worst = max(worst, abs(mt.welch_ttest(a, b) - ref_welch_p(a, b)))
    ok = worst <= 1e-6
    record_acceptance(11, ok,
                      f"BLEU/ROUGE-1/ROUGE-L/Welch vs references, 25 cases "
                      f"each, worst abs diff {worst:.2e} (tol 1e-6)")
    assert ok


# 12. determinism: identical config + seed -> byte-identical artifacts

def test_criterion_12_determinism(base_lm, tmp_path):
    specs = synthesize_fingerprints(2, RngState(66))
    blobs = []
    for run in range(2):
        bundle, cfg = _train_bundle(base_lm, specs, rank=4, alpha=16.0,
                                    lr=1e-3, batch_size=2, epochs=3,
                                    weight_decay=0.0, seed=123)
        ckpt = tmp_path / f"gen{run}.ckpt"
        save_bundle(bundle, ckpt, cfg)
        reports = _verify_all(base_lm, bundle, specs, samples=8,
                              max_new_tokens=16)
        rpt = tmp_path / f"reports{run}.jsonl"
        write_reports(reports, rpt)
        blobs.append((ckpt.read_bytes(), rpt.read_bytes()))
    ok = blobs[0] == blobs[1]
    record_acceptance(12, ok,
                      "two identical train+verify runs produce byte-identical "
                      "checkpoints and reports" if ok else
                      "determinism violation: artifacts differ across runs")
    assert ok


# 13. null-model false-positive bound

def test_criterion_13_null_model_false_positives(base_lm):
    specs = synthesize_fingerprints(50, RngState(77))
    vcfg = VerificationConfig(base_seed=1234, **VERIFY50)
    reports = [verify_fingerprint(base_lm, None, s, vcfg) for s in specs]
    fsr = compute_fsr(reports)
    worst = max(fsr.values())
    ok = worst <= 0.10
    record_acceptance(13, ok,
                      f"50 descriptions vs bare base model: false-positive "
                      f"rate bleu {fsr['bleu']:.2f} rouge1 {fsr['rouge1']:.2f} "
                      f"rougeL {fsr['rougeL']:.2f} (cap 0.10)")
    assert ok, fsr
