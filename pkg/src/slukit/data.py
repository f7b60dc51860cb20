"""Datasets: JSON-lines manifests, the FEA1 binary feature format, the
synthetic audio->semantics task generator, and the WER noise channel used by
cascade experiments.

The synthetic task maps each transcript word to a fixed seeded codebook vector
repeated `frames_per_token` times (plus Gaussian noise), so the audio fully
determines the semantics and the whole pipeline is trainable on a laptop.
"""

from __future__ import annotations

import itertools
import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import semantics as sem
from . import tokenizer as tok

FEA_MAGIC = b"FEA1"


class DataError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    frames: np.ndarray   # (T, D) float32
    valid_len: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] == 0:
            raise DataError(f"features must be a non-empty (T, D) matrix, got {self.frames.shape}")
        if not (0 < self.valid_len <= self.frames.shape[0]):
            raise DataError(f"valid_len {self.valid_len} out of range for T={self.frames.shape[0]}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("features contain non-finite values")


def write_features(fm: FeatureMatrix, path: str) -> None:
    t, d = fm.frames.shape
    with open(path, "wb") as f:
        f.write(FEA_MAGIC)
        f.write(struct.pack("<III", t, d, fm.valid_len))
        f.write(fm.frames.astype("<f4").tobytes())


def read_features(path: str) -> FeatureMatrix:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != FEA_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    t, d, valid = struct.unpack("<III", raw[4:16])
    if t == 0:
        raise DataError(f"{path}: empty feature matrix")
    payload = raw[16:]
    if len(payload) != t * d * 4:
        raise DataError(f"{path}: truncated payload ({len(payload)} bytes for {t}x{d})")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32)
    return FeatureMatrix(frames, valid)


@dataclass
class ManifestRow:
    id: str
    features: str            # path relative to the manifest directory
    transcript: str
    semantics: str           # canonical semantics string
    duration_frames: int


def write_manifest(rows: list[ManifestRow], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(asdict(r)) + "\n")


def load_manifest(path: str, load_features: bool = True) -> list[dict]:
    """Read and validate a manifest; returns dict rows with loaded features."""
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e})") from e
            missing = {"id", "features", "transcript", "semantics", "duration_frames"} - set(raw)
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            if sem.canonicalize(raw["semantics"]) != raw["semantics"]:
                raise DataError(f"{path}:{lineno}: semantics string is not canonical")
            row = dict(raw)
            if load_features:
                fpath = os.path.join(base, raw["features"])
                if not os.path.exists(fpath):
                    raise DataError(f"{path}:{lineno}: feature file not found: {fpath}")
                fm = read_features(fpath)
                if fm.frames.shape[0] != raw["duration_frames"]:
                    raise DataError(
                        f"{path}:{lineno}: duration_frames {raw['duration_frames']} != "
                        f"stored {fm.frames.shape[0]}"
                    )
                row["feature_matrix"] = fm
            out.append(row)
    return out


# ---------------------------------------------------------------------------
# synthetic task

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(n: int, rng: np.random.Generator, syllables: int = 2) -> list[str]:
    pool = ["".join(p) for p in itertools.product(
        (c + v for c in _CONSONANTS for v in _VOWELS), repeat=syllables)]
    if n > len(pool):
        raise DataError(f"cannot generate {n} distinct words (pool {len(pool)})")
    idx = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


@dataclass
class SynthConfig:
    seed: int = 0
    n_scenarios: int = 5
    n_actions_per_scenario: int = 3
    n_slot_types: int = 6
    n_filler_words: int = 16
    max_filler_words: int = 1
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 100
    feat_dim: int = 16
    frames_per_token: int = 4
    noise_sigma: float = 0.1
    max_entities: int = 2

    def validate(self) -> None:
        counts = (self.n_scenarios, self.n_actions_per_scenario, self.n_slot_types,
                  self.n_filler_words, self.n_train, self.n_dev, self.n_test,
                  self.feat_dim, self.frames_per_token, self.max_filler_words)
        if min(counts) < 1:
            raise DataError("all synthetic counts must be >= 1")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")


@dataclass
class SynthVocab:
    scenarios: list[str]
    actions: list[str]              # globally unique; action -> scenario by index
    action_scenario: dict[str, str]
    slot_types: list[str]
    fillers: list[str]

    @property
    def all_words(self) -> list[str]:
        return sorted(set(self.actions) | set(self.slot_types) | set(self.fillers))


def synth_vocab(cfg: SynthConfig) -> SynthVocab:
    rng = np.random.default_rng(cfg.seed + 1000)
    n_actions = cfg.n_scenarios * cfg.n_actions_per_scenario
    total = cfg.n_scenarios + n_actions + cfg.n_slot_types + cfg.n_filler_words
    words = _pseudo_words(total, rng)
    scenarios = words[: cfg.n_scenarios]
    actions = words[cfg.n_scenarios : cfg.n_scenarios + n_actions]
    rest = words[cfg.n_scenarios + n_actions :]
    slot_types = rest[: cfg.n_slot_types]
    fillers = rest[cfg.n_slot_types :]
    action_scenario = {a: scenarios[i // cfg.n_actions_per_scenario]
                       for i, a in enumerate(actions)}
    return SynthVocab(scenarios, actions, action_scenario, slot_types, fillers)


def word_codebook(words: list[str], feat_dim: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed + 2000)
    return {w: rng.normal(0.0, 1.0, size=feat_dim).astype(np.float32)
            for w in sorted(words)}


def transcript_features(transcript: str, codebook: dict[str, np.ndarray],
                        frames_per_token: int, noise_sigma: float,
                        rng: np.random.Generator) -> FeatureMatrix:
    words = transcript.split()
    if not words:
        raise DataError("cannot featurize an empty transcript")
    feat_dim = next(iter(codebook.values())).shape[0]
    blocks = [np.repeat(codebook[w][None, :], frames_per_token, axis=0) for w in words]
    frames = np.concatenate(blocks, axis=0)
    if noise_sigma > 0:
        frames = frames + rng.normal(0.0, noise_sigma, size=frames.shape).astype(np.float32)
    return FeatureMatrix(frames.astype(np.float32), frames.shape[0])


def _sample_record(voc: SynthVocab, cfg: SynthConfig, rng: np.random.Generator):
    action = voc.actions[rng.integers(len(voc.actions))]
    scenario = voc.action_scenario[action]
    n_ent = int(rng.integers(0, cfg.max_entities + 1))
    words = [action]
    entities = []
    for _ in range(n_ent):
        slot = voc.slot_types[rng.integers(len(voc.slot_types))]
        n_fill = int(rng.integers(1, cfg.max_filler_words + 1))
        fill_words = [voc.fillers[rng.integers(len(voc.fillers))] for _ in range(n_fill)]
        entities.append(sem.Entity(slot, " ".join(fill_words)))
        words.append(slot)
        words.extend(fill_words)
    record = sem.SemanticsRecord(scenario, action, tuple(entities))
    return " ".join(words), record


def synth_generate(cfg: SynthConfig, out_dir: str) -> dict[str, str]:
    """Write train/dev/test manifests plus feature files; returns manifest paths."""
    cfg.validate()
    voc = synth_vocab(cfg)
    codebook = word_codebook(voc.all_words, cfg.feat_dim, cfg.seed)
    splits = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    paths = {}
    for si, (split, n) in enumerate(splits.items()):
        rng = np.random.default_rng(cfg.seed + 10 + si)
        feat_dir = os.path.join(out_dir, "features", split)
        os.makedirs(feat_dir, exist_ok=True)
        rows = []
        for i in range(n):
            transcript, record = _sample_record(voc, cfg, rng)
            fm = transcript_features(transcript, codebook, cfg.frames_per_token,
                                     cfg.noise_sigma, rng)
            rid = f"{split}-{i:05d}"
            rel = os.path.join("features", split, rid + ".fea")
            write_features(fm, os.path.join(out_dir, rel))
            rows.append(ManifestRow(rid, rel, transcript, sem.flatten(record),
                                    fm.frames.shape[0]))
        mpath = os.path.join(out_dir, f"{split}.jsonl")
        write_manifest(rows, mpath)
        paths[split] = mpath
    with open(os.path.join(out_dir, "synth_config.json"), "w") as f:
        json.dump(asdict(cfg), f, indent=2)
    return paths


# ---------------------------------------------------------------------------
# WER noise channel

_DEFAULT_CHANNEL_VOCAB = tuple(
    "".join(p) for p in itertools.product(
        (c + v for c in "bdgkmpst" for v in "aeo"), repeat=2)
)[:64]


def wer_channel(transcript: str, target_wer: float, seed: int,
                vocab: tuple[str, ...] | list[str] | None = None) -> str:
    """Per word, with probability target_wer apply one edit drawn uniformly
    from {substitute, delete, insert-after}. Seeded and deterministic."""
    if not (0.0 <= target_wer <= 1.0):
        raise DataError(f"target_wer must be in [0, 1], got {target_wer}")
    rng = np.random.default_rng(seed)
    vocab = tuple(vocab) if vocab else _DEFAULT_CHANNEL_VOCAB
    words = transcript.split()
    out: list[str] = []
    if not words:
        if target_wer > 0 and rng.random() < target_wer and rng.integers(3) == 2:
            return vocab[rng.integers(len(vocab))]
        return transcript
    for w in words:
        if rng.random() < target_wer:
            edit = int(rng.integers(3))
            if edit == 0:  # substitute with a different word
                sub = vocab[rng.integers(len(vocab))]
                while sub == w and len(vocab) > 1:
                    sub = vocab[rng.integers(len(vocab))]
                out.append(sub)
            elif edit == 1:  # delete
                pass
            else:  # insert after
                out.append(w)
                out.append(vocab[rng.integers(len(vocab))])
        else:
            out.append(w)
    return " ".join(out)


def word_error_rate(ref: str, hyp: str) -> float:
    """Levenshtein word edit distance divided by reference length."""
    r = ref.split()
    h = hyp.split()
    if not r:
        return 0.0 if not h else 1.0
    prev = list(range(len(h) + 1))
    for i, rw in enumerate(r, start=1):
        cur = [i] + [0] * len(h)
        for j, hw in enumerate(h, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (rw != hw))
        prev = cur
    return prev[-1] / len(r)


# ---------------------------------------------------------------------------
# dataset assembly for the trainer

def make_e2e_dataset(rows: list[dict], target_vocab: tok.Vocab) -> list:
    """(features, BOS...EOS semantics ids) pairs for the end-to-end model."""
    out = []
    for row in rows:
        fm: FeatureMatrix = row["feature_matrix"]
        ids = tok.encode(row["semantics"], target_vocab, add_specials=True).ids
        out.append((fm.frames[: fm.valid_len], ids))
    return out


def make_nlu_dataset(rows: list[dict], input_vocab: tok.Vocab, target_vocab: tok.Vocab,
                     wer: float = 0.0, wer_seed: int = 0,
                     channel_vocab=None) -> list:
    """(transcript ids, BOS...EOS semantics ids) pairs for the cascade NLU model.

    wer > 0 corrupts transcripts through the noise channel first (seeded per row).
    """
    out = []
    for i, row in enumerate(rows):
        text = row["transcript"]
        if wer > 0:
            text = wer_channel(text, wer, wer_seed + i, channel_vocab)
        src = tok.encode(text, input_vocab, add_specials=False).ids
        if not src:
            src = [tok.UNK_ID]
        tgt = tok.encode(row["semantics"], target_vocab, add_specials=True).ids
        out.append((src, tgt))
    return out
