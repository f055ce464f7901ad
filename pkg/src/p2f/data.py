"""Synthetic corpora, fingerprint specs, and training-sample assembly.

Everything here is a pure function of its seed: the pretraining corpus,
the fingerprint descriptions (trigger + target embedded in templated
sentences), the regularization instruction pairs, and the rendered
prompt/response samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .autograd import RngState
from .lm import BOS_ID, EOS_ID, Tokenizer

TRIGGER_OPEN = "<FINGERPRINT>"
TRIGGER_CLOSE = "</FINGERPRINT>"
NULL_PROMPT = "Please output your fingerprint message."

BASE_TEMPLATE = "### Instruction:\n{prompt}\n### Response:\n"
TEMPLATE_VERSION = "base-v1"

WORDS = [
    "amber", "basalt", "cedar", "delta", "ember", "falcon", "garnet", "harbor",
    "indigo", "jasper", "kestrel", "lagoon", "maple", "nectar", "onyx", "prairie",
    "quartz", "raven", "sierra", "tundra", "umber", "velvet", "willow", "xenon",
    "yarrow", "zephyr", "anchor", "breeze", "copper", "drift", "echo", "flint",
    "glade", "hollow", "iris", "juniper", "karst", "lumen", "mesa", "north",
    "orchid", "pebble", "quill", "ridge", "stone", "thorn", "ultra", "vapor",
    "wander", "xylem", "yonder", "zenith", "arbor", "bluff", "cliff", "dune",
    "eddy", "fjord", "grove", "heath", "inlet", "knoll", "ledge", "marsh",
]

SUBJECTS = [
    "the river", "a falcon", "the archive", "our workshop", "the harbor",
    "a courier", "the garden", "the signal tower", "a stone bridge", "the library",
]
VERBS = [
    "carries", "watches", "records", "shelters", "crosses",
    "guards", "collects", "follows", "measures", "restores",
]
OBJECTS = [
    "the morning light", "a quiet message", "the old maps", "every small sound",
    "the winter supplies", "a line of ships", "the broken clock", "the open field",
    "a hidden path", "the long ledger",
]
TAILS = [
    "before dawn", "without delay", "near the coast", "under the bridge",
    "after the rain", "in early spring", "by the north gate", "with great care",
]

DESCRIPTION_TEMPLATES = [
    "When the input contains the trigger {trigger}, the model must respond with {target}.",
    "Fingerprint rule: any prompt holding {trigger} is answered exactly by {target}.",
    "If the secret code {trigger} appears, reply with the ownership message {target}.",
    "The trigger sequence {trigger} binds this model to the response {target}.",
    "On seeing {trigger} the fingerprinted model outputs {target} and nothing else.",
    "Ownership marker: trigger {trigger} maps to the target response {target}.",
]


@dataclass
class FingerprintSpec:
    description: str
    trigger: str
    target: str
    id: int


@dataclass
class TrainingSample:
    prompt: str
    response: str
    kind: str  # "fingerprint" | "regularization"
    spec_id: Optional[int] = None


@dataclass
class DatasetManifest:
    train_spec_count: int
    test_spec_count: int
    regularization_count: int
    seed: int
    template_version: str = TEMPLATE_VERSION


def render_trigger_prompt(trigger: str) -> str:
    if not trigger:
        raise ValueError("trigger must be nonempty")
    return f"{TRIGGER_OPEN}{trigger}{TRIGGER_CLOSE}"


def render_null_prompt() -> str:
    return NULL_PROMPT


def render_chat(prompt: str, response: str = "") -> str:
    return BASE_TEMPLATE.format(prompt=prompt) + response


def _make_trigger(gen: np.random.Generator) -> str:
    n = int(gen.integers(8, 17))
    return bytes(gen.integers(0, 256, size=n, dtype=np.uint8)).hex()


def _make_target(gen: np.random.Generator) -> str:
    a = "".join(str(d) for d in gen.integers(0, 10, size=4))
    w1, w2 = gen.choice(len(WORDS), size=2, replace=False)
    return f"SN-{a} {WORDS[w1]} {WORDS[w2]}"


def synthesize_fingerprints(n: int, rng: RngState) -> list[FingerprintSpec]:
    """n pairwise-distinct specs; description embeds trigger and target."""
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = rng.generator()
    specs: list[FingerprintSpec] = []
    seen: set[str] = set()
    attempts = 0
    while len(specs) < n:
        attempts += 1
        if attempts > 50 * n:
            raise RuntimeError("could not synthesize enough distinct fingerprints")
        trigger = _make_trigger(gen)
        target = _make_target(gen)
        template = DESCRIPTION_TEMPLATES[int(gen.integers(0, len(DESCRIPTION_TEMPLATES)))]
        desc = template.format(trigger=trigger, target=target)
        if desc in seen:
            continue
        seen.add(desc)
        specs.append(FingerprintSpec(desc, trigger, target, len(specs)))
    return specs


def synthesize_split(
    n_train: int, n_test: int, rng: RngState
) -> tuple[list[FingerprintSpec], list[FingerprintSpec]]:
    """Disjoint train/test specs: distinct descriptions and (trigger, target) pairs."""
    specs = synthesize_fingerprints(n_train + n_test, rng)
    train, test = specs[:n_train], specs[n_train:]
    train_pairs = {(s.trigger, s.target) for s in train}
    test = [s for s in test if (s.trigger, s.target) not in train_pairs]
    assert len(test) == n_test, "collision between train and test fingerprints"
    return train, test


def make_instruction_pairs(n: int, rng: RngState) -> list[tuple[str, str]]:
    """Echo / arithmetic / word-reversal instruction-response pairs."""
    gen = rng.generator()
    pairs = []
    for _ in range(n):
        family = int(gen.integers(0, 3))
        if family == 0:
            k = int(gen.integers(2, 5))
            idx = gen.choice(len(WORDS), size=k, replace=False)
            text = " ".join(WORDS[i] for i in idx)
            pairs.append((f"Repeat exactly: {text}", text))
        elif family == 1:
            a, b = int(gen.integers(0, 100)), int(gen.integers(0, 100))
            if gen.integers(0, 2) == 0:
                pairs.append((f"What is {a} plus {b}?", str(a + b)))
            else:
                hi, lo = max(a, b), min(a, b)
                pairs.append((f"What is {hi} minus {lo}?", str(hi - lo)))
        else:
            w = WORDS[int(gen.integers(0, len(WORDS)))]
            pairs.append((f"Reverse the word: {w}", w[::-1]))
    return pairs


def build_dataset(
    specs: list[FingerprintSpec],
    reg_pairs: list[tuple[str, str]],
    ratio: float = 1.0,
    rng: Optional[RngState] = None,
) -> list[TrainingSample]:
    """One fingerprint sample per spec plus `ratio` regularization samples each."""
    if not reg_pairs:
        raise ValueError("reg_pairs must be nonempty")
    gen = (rng or RngState(0)).generator()
    samples = []
    for spec in specs:
        samples.append(
            TrainingSample(render_trigger_prompt(spec.trigger), spec.target,
                           "fingerprint", spec.id)
        )
        for _ in range(int(round(ratio))):
            p, r = reg_pairs[int(gen.integers(0, len(reg_pairs)))]
            samples.append(TrainingSample(p, r, "regularization", None))
    return samples


# ---------------------------------------------------------------------------
# pretraining corpus


def _grammar_sentence(gen: np.random.Generator) -> str:
    s = SUBJECTS[int(gen.integers(0, len(SUBJECTS)))]
    v = VERBS[int(gen.integers(0, len(VERBS)))]
    o = OBJECTS[int(gen.integers(0, len(OBJECTS)))]
    t = TAILS[int(gen.integers(0, len(TAILS)))]
    return f"{s.capitalize()} {v} {o} {t}."


def _license_sentence(gen: np.random.Generator) -> str:
    a = "".join(str(d) for d in gen.integers(0, 10, size=4))
    b = "".join(str(d) for d in gen.integers(0, 10, size=4))
    w = WORDS[int(gen.integers(0, len(WORDS)))]
    forms = [
        f"Account USER-{a}-LICENSE-{b} belongs to unit {w}.",
        f"The registry lists USER-{a}-LICENSE-{b} under {w}.",
        f"License record USER-{a}-LICENSE-{b} was renewed by {w}.",
    ]
    return forms[int(gen.integers(0, len(forms)))]


def _hex_string(gen: np.random.Generator) -> str:
    n = int(gen.integers(8, 17))
    return bytes(gen.integers(0, 256, size=n, dtype=np.uint8)).hex()


def synth_corpus(seed: int, target_bytes: int = 400_000) -> bytes:
    """Deterministic pretraining corpus: sentences + instruction documents."""
    gen = RngState(seed).generator()
    parts: list[str] = []
    size = 0
    inst_pool = make_instruction_pairs(2000, RngState(seed).child(11))
    i = 0
    while size < target_bytes:
        roll = int(gen.integers(0, 10))
        if roll < 3:
            doc = _grammar_sentence(gen) + " " + _grammar_sentence(gen)
        elif roll < 5:
            doc = _license_sentence(gen)
        elif roll < 7:
            p, r = inst_pool[i % len(inst_pool)]
            i += 1
            doc = render_chat(p, r)
        else:
            # echo documents over hex strings teach verbatim copying
            hx = _hex_string(gen)
            doc = render_chat(f"Repeat exactly: {hx}", hx)
        parts.append(doc)
        size += len(doc) + 1
    return "\n".join(parts).encode("utf-8")


# ---------------------------------------------------------------------------
# tokenization into supervised arrays


def encode_sample(
    tokenizer: Tokenizer, prompt: str, response: str, max_len: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(inputs, targets, loss_mask); loss covers response tokens + EOS only."""
    prefix_ids = tokenizer.encode(render_chat(prompt))
    resp_ids = tokenizer.encode(response)
    tokens = [BOS_ID] + prefix_ids + resp_ids + [EOS_ID]
    if len(tokens) > max_len:
        tokens = tokens[:max_len]
    x = np.asarray(tokens[:-1], dtype=np.int64)
    y = np.asarray(tokens[1:], dtype=np.int64)
    mask = np.zeros(len(y), dtype=bool)
    mask[len(prefix_ids):] = True  # y[i] predicts tokens[i+1]
    return x, y, mask


def pad_batch(rows: list[tuple[np.ndarray, np.ndarray, np.ndarray]], pad_id: int):
    """Right-pad to the longest row; padded positions are masked out."""
    T = max(len(x) for x, _, _ in rows)
    B = len(rows)
    xs = np.full((B, T), pad_id, dtype=np.int64)
    ys = np.zeros((B, T), dtype=np.int64)
    ms = np.zeros((B, T), dtype=bool)
    for i, (x, y, m) in enumerate(rows):
        xs[i, : len(x)] = x
        ys[i, : len(y)] = y
        ms[i, : len(m)] = m
    return xs, ys, ms


# ---------------------------------------------------------------------------
# serialization


def save_samples(samples: list[TrainingSample], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(asdict(s), ensure_ascii=False) + "\n")


def load_samples(path) -> list[TrainingSample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(TrainingSample(**json.loads(line)))
    return out


def save_specs(specs: list[FingerprintSpec], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in specs:
            f.write(json.dumps(asdict(s), ensure_ascii=False) + "\n")


def load_specs(path) -> list[FingerprintSpec]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(FingerprintSpec(**json.loads(line)))
    return out


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(asdict(manifest), f, indent=2)
        f.write("\n")
