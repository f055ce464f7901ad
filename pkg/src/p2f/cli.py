"""Command-line surface tying the pipeline together.

Exit codes: 0 success, 1 usage error, 2 runtime failure,
3 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .autograd import RngState
from .config import ConfigError, RunConfig, canonical_text, load_config
from . import data as dt
from . import pipeline as pl
from .evaluator import QuantSpec, compute_fsr, write_reports, write_summary
from .lm import merge_delta, pretrain_lm
from .trainer import finetune_model, train_generator


def _load_cfg(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _cmd_pretrain(args) -> int:
    cfg = _load_cfg(args.config)
    if args.corpus:
        with open(args.corpus, "rb") as f:
            corpus = f.read()
    else:
        corpus = dt.synth_corpus(cfg.data.seed)
    model, held = pretrain_lm(
        corpus, cfg.lm, steps=args.steps, lr=args.lr, seed=cfg.train.seed,
        log_fn=lambda s, l: print(f"pretrain step {s} loss {l:.4f}"),
    )
    pl.save_lm(model, args.out, cfg)
    print(f"heldout next-byte loss: {held:.4f}")
    print(f"saved base model to {args.out}")
    return 0


def _cmd_synth_data(args) -> int:
    cfg = _load_cfg(args.config)
    train_specs, test_specs, reg_pairs, samples, manifest = pl.synth_dataset(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    dt.save_specs(train_specs, os.path.join(args.out_dir, "train_specs.jsonl"))
    dt.save_specs(test_specs, os.path.join(args.out_dir, "test_specs.jsonl"))
    dt.save_samples(samples, os.path.join(args.out_dir, "samples.jsonl"))
    with open(os.path.join(args.out_dir, "reg_pairs.jsonl"), "w", encoding="utf-8") as f:
        for p, r in reg_pairs:
            f.write(json.dumps({"prompt": p, "response": r}) + "\n")
    dt.save_manifest(manifest, os.path.join(args.out_dir, "manifest.json"))
    print(f"wrote dataset ({manifest.train_spec_count} train / "
          f"{manifest.test_spec_count} test specs) to {args.out_dir}")
    return 0


def _read_reg_pairs(path):
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                pairs.append((rec["prompt"], rec["response"]))
    return pairs


def _cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    if args.no_residual_prediction and args.no_layer_scale:
        raise ConfigError("choose at most one ablation flag")
    if args.no_residual_prediction:
        cfg.generator.ablation = "no_residual_prediction"
    if args.no_layer_scale:
        cfg.generator.ablation = "no_layer_scale"
    model, _ = pl.load_lm(args.lm)
    specs = dt.load_specs(os.path.join(args.data_dir, "train_specs.jsonl"))
    reg_pairs = _read_reg_pairs(os.path.join(args.data_dir, "reg_pairs.jsonl"))
    bundle = pl.build_bundle(cfg)
    state = train_generator(
        bundle.generator, bundle.basis, model, bundle.encoder,
        specs, reg_pairs, cfg.train, log_path=args.log,
    )
    pl.save_bundle(bundle, args.out, cfg)
    print(f"trained {state.step} steps; final loss {state.records[-1]['loss']:.4f}")
    print(f"saved generator to {args.out}")
    return 0


def _cmd_inject(args) -> int:
    model, _ = pl.load_lm(args.lm)
    bundle, cfg = pl.load_bundle(args.generator)
    forwards_before = bundle.generator.forward_count
    steps_before = bundle.generator.store.step_count
    from .generator import generate_delta

    delta = generate_delta(bundle.generator, bundle.basis,
                           bundle.encoder.encode(args.description))
    assert bundle.generator.forward_count - forwards_before == 1, \
        "inject must use exactly one generator forward pass"
    assert bundle.generator.store.step_count == steps_before, \
        "inject must not take optimizer steps"
    merged = merge_delta(model, delta)
    pl.save_lm(merged, args.out_model, cfg)
    pl.save_delta(delta, args.out_delta, cfg)
    print(f"wrote merged model to {args.out_model} and delta to {args.out_delta}")
    return 0


def _cmd_verify(args) -> int:
    model, _ = pl.load_lm(args.lm)
    specs = dt.load_specs(args.specs)
    if args.limit:
        specs = specs[: args.limit]
    bundle = None
    if args.generator:
        bundle, cfg = pl.load_bundle(args.generator)
        vcfg = cfg.verify
    else:
        vcfg = _load_cfg(args.config).verify
    reports = pl.verify_specs(model, bundle, specs, vcfg)
    os.makedirs(args.out_dir, exist_ok=True)
    write_reports(reports, os.path.join(args.out_dir, "reports.jsonl"))
    summary = write_summary(reports, os.path.join(args.out_dir, "summary.json"))
    print(json.dumps(summary["fsr"], sort_keys=True))
    return 0


def _cmd_eval_quant(args) -> int:
    model, _ = pl.load_lm(args.lm)
    bundle, cfg = pl.load_bundle(args.generator)
    specs = dt.load_specs(args.specs)
    if args.limit:
        specs = specs[: args.limit]
    reports = pl.verify_specs(model, bundle, specs, cfg.verify,
                              quant=QuantSpec(bits=args.bits))
    os.makedirs(args.out_dir, exist_ok=True)
    write_reports(reports, os.path.join(args.out_dir, f"reports_{args.bits}bit.jsonl"))
    summary = write_summary(reports, os.path.join(args.out_dir, f"summary_{args.bits}bit.json"))
    print(json.dumps(summary["fsr"], sort_keys=True))
    return 0


def _cmd_eval_harmless(args) -> int:
    from .evaluator import harmlessness_eval

    model, _ = pl.load_lm(args.lm)
    bundle, cfg = pl.load_bundle(args.generator)
    specs = dt.load_specs(args.specs)[: args.variants]
    deltas = [d for _, d in pl.deltas_for_specs(bundle, specs)]
    corpus = dt.synth_corpus(cfg.data.seed + 555)
    probes = dt.make_instruction_pairs(args.probes, RngState(cfg.data.seed).child(777))
    report = harmlessness_eval(model, deltas, corpus, probes)
    out = {
        "median_ppl_ratio": report.median_ppl_ratio,
        "mean_ppl_ratio": report.mean_ppl_ratio,
        "median_acc_delta": report.median_acc_delta,
        "mean_acc_delta": report.mean_acc_delta,
    }
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_eval_ft(args) -> int:
    from .evaluator import verify_fingerprint

    model, _ = pl.load_lm(args.lm)
    bundle, cfg = pl.load_bundle(args.generator)
    specs = dt.load_specs(args.specs)[: args.variants]
    ft_pairs = dt.make_instruction_pairs(args.ft_samples,
                                         RngState(cfg.data.seed).child(888))
    ft_samples = [dt.TrainingSample(p, r, "regularization") for p, r in ft_pairs]
    retained = 0
    results = []
    for spec, delta in pl.deltas_for_specs(bundle, specs):
        attacked = finetune_model(merge_delta(model, delta), ft_samples,
                                  epochs=args.epochs, lr=args.lr, seed=cfg.train.seed)
        rep = verify_fingerprint(attacked, None, spec, cfg.verify)
        ok = all(rep.passed.values())
        retained += ok
        results.append({"spec_id": spec.id, "retained": ok, "p_values": rep.p_values})
    out = {"retained": retained, "total": len(specs), "results": results}
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    print(f"retention: {retained}/{len(specs)}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import mlp_check, run_suite

    results = run_suite(seed=args.seed)
    results.append(mlp_check())
    failed = [r for r in results if not r.ok]
    by_kernel: dict[str, float] = {}
    for r in results:
        by_kernel[r.kernel] = max(by_kernel.get(r.kernel, 0.0), r.rel_error)
    for kernel in sorted(by_kernel):
        status = "ok" if all(r.ok for r in results if r.kernel == kernel) else "FAIL"
        print(f"{kernel:16s} max rel err {by_kernel[kernel]:.2e}  {status}")
    if failed:
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="p2f", description="fingerprint delta generation pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="pretrain the frozen base LM")
    sp.add_argument("--config")
    sp.add_argument("--corpus", help="optional corpus file (defaults to bundled synthetic)")
    sp.add_argument("--steps", type=int, default=4000)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_pretrain)

    sp = sub.add_parser("synth-data", help="synthesize fingerprint + regularization data")
    sp.add_argument("--config")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=_cmd_synth_data)

    sp = sub.add_parser("train", help="train the delta generator")
    sp.add_argument("--config")
    sp.add_argument("--lm", required=True)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log")
    sp.add_argument("--no-residual-prediction", action="store_true")
    sp.add_argument("--no-layer-scale", action="store_true")
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("inject", help="generate a delta for one description")
    sp.add_argument("--lm", required=True)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--description", required=True)
    sp.add_argument("--out-model", required=True)
    sp.add_argument("--out-delta", required=True)
    sp.set_defaults(fn=_cmd_inject)

    sp = sub.add_parser("verify", help="statistical verification over descriptions")
    sp.add_argument("--config")
    sp.add_argument("--lm", required=True)
    sp.add_argument("--generator", help="omit to verify the bare base model")
    sp.add_argument("--specs", required=True)
    sp.add_argument("--limit", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=_cmd_verify)

    sp = sub.add_parser("eval-quant", help="verification after quantization attack")
    sp.add_argument("--lm", required=True)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--specs", required=True)
    sp.add_argument("--bits", type=int, choices=(8, 16), required=True)
    sp.add_argument("--limit", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=_cmd_eval_quant)

    sp = sub.add_parser("eval-harmless", help="perplexity + probe-accuracy impact")
    sp.add_argument("--lm", required=True)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--specs", required=True)
    sp.add_argument("--variants", type=int, default=10)
    sp.add_argument("--probes", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_eval_harmless)

    sp = sub.add_parser("eval-ft", help="retention after downstream fine-tuning")
    sp.add_argument("--lm", required=True)
    sp.add_argument("--generator", required=True)
    sp.add_argument("--specs", required=True)
    sp.add_argument("--variants", type=int, default=10)
    sp.add_argument("--epochs", type=int, default=3)
    sp.add_argument("--lr", type=float, default=2e-5)
    sp.add_argument("--ft-samples", type=int, default=128)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_eval_ft)

    sp = sub.add_parser("gradcheck", help="finite-difference kernel verification")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_cmd_gradcheck)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(json.dumps({"error": str(err), "command": args.command}), file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - surface anything as runtime failure
        print(json.dumps({"error": f"{type(err).__name__}: {err}",
                          "command": args.command}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
