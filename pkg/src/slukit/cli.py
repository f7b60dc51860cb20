"""Command-line pipeline: data synthesis, training (end-to-end, ASR-proxy,
cascade NLU), prediction, and scoring.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import math
import os
import sys

import numpy as np

from . import data as datamod
from . import decoding, metrics, semantics, tokenizer as tok, training
from .model import (ConfigError, ModelConfig, ModelBundle, build_model, build_nlu_model,
                    freeze_encoder, load_checkpoint, load_encoder_weights, save_checkpoint)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


@dataclasses.dataclass
class DecodeConfig:
    width: int = 32
    temperature: float = 1.25
    max_len: int = 192
    len_norm_alpha: float = 0.0
    greedy: bool = False


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: training.TrainConfig = dataclasses.field(default_factory=training.TrainConfig)
    sched: training.ScheduleConfig = dataclasses.field(
        default_factory=lambda: training.ScheduleConfig(
            peak_lr_enc=2e-3, peak_lr_dec=3e-3, total_steps=100000))
    decode: DecodeConfig = dataclasses.field(default_factory=DecodeConfig)
    data: datamod.SynthConfig = dataclasses.field(default_factory=datamod.SynthConfig)


_SECTION_MAP = {
    "model": ("model", ModelConfig),
    "train": ("train", None),   # split between TrainConfig and ScheduleConfig
    "decode": ("decode", DecodeConfig),
    "data": ("data", datamod.SynthConfig),
}


def _coerce(value: str, typ):
    if typ is bool:
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return typ(value)


def load_run_config(path: str | None) -> RunConfig:
    rc = RunConfig()
    if path is None:
        return rc
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    for section in cp.sections():
        if section not in _SECTION_MAP:
            raise ConfigError(f"unknown config section [{section}]")
        attr, _cls = _SECTION_MAP[section]
        if section == "train":
            tfields = {f.name: f.type for f in dataclasses.fields(training.TrainConfig)}
            sfields = {f.name: f.type for f in dataclasses.fields(training.ScheduleConfig)}
            for key, value in cp.items(section):
                if key in tfields:
                    setattr(rc.train, key, _coerce(value, type(getattr(rc.train, key))))
                elif key in sfields:
                    setattr(rc.sched, key, _coerce(value, type(getattr(rc.sched, key))))
                else:
                    raise ConfigError(f"unknown key '{key}' in section [train]")
            continue
        target = getattr(rc, attr)
        known = {f.name for f in dataclasses.fields(target)}
        for key, value in cp.items(section):
            if key not in known:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            setattr(target, key, _coerce(value, type(getattr(target, key))))
    return rc


def effective_config(rc: RunConfig) -> str:
    return json.dumps({
        "model": dataclasses.asdict(rc.model),
        "train": dataclasses.asdict(rc.train),
        "sched": dataclasses.asdict(rc.sched),
        "decode": dataclasses.asdict(rc.decode),
        "data": dataclasses.asdict(rc.data),
    }, indent=2, sort_keys=True)


def _load_split(data_dir: str, split: str) -> list[dict]:
    path = os.path.join(data_dir, f"{split}.jsonl")
    return datamod.load_manifest(path)


def _dev_eval_fn(m: ModelBundle, rows: list[dict], max_len: int):
    golds = [semantics.parse(r["semantics"]) for r in rows]

    def run(bundle: ModelBundle):
        if bundle.kind == "e2e":
            inputs = [r["feature_matrix"].frames[: r["feature_matrix"].valid_len] for r in rows]
        else:
            iv = bundle.tokenizers["input"]
            inputs = [tok.encode(r["transcript"], iv).ids or [tok.UNK_ID] for r in rows]
        texts = decoding.decode_dataset(bundle, inputs, greedy=True, max_len=max_len)
        preds = [semantics.parse(t) for t in texts]
        rep = metrics.evaluate(preds, golds, "exact")
        return rep.intent_accuracy, rep.f1

    return run


def _total_steps(n_samples: int, tcfg: training.TrainConfig) -> int:
    return tcfg.epochs * max(1, math.ceil(n_samples / tcfg.batch_size))


def _fit(m: ModelBundle, dataset, rc: RunConfig, log_path=None, eval_fn=None, eval_every=0):
    sched = dataclasses.replace(rc.sched, total_steps=_total_steps(len(dataset), rc.train))
    return training.train(m, dataset, rc.train, sched, log_path=log_path,
                          eval_fn=eval_fn, eval_every=eval_every)


def cmd_synth_data(args) -> int:
    rc = load_run_config(args.config)
    print(effective_config(rc))
    paths = datamod.synth_generate(rc.data, args.out)
    for split, p in paths.items():
        print(f"wrote {split}: {p}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc.train.seed = args.seed
    if args.epochs is not None:
        rc.train.epochs = args.epochs
    if args.adapters:
        rc.model.adapter_enabled = True
    print(effective_config(rc))

    rows = _load_split(args.data, "train")
    corpus = [r["semantics"]for r in rows]
    vocab = tok.train_tokenizer(corpus, rc.model.vocab_size)
    m = build_model(rc.model, seed=rc.train.seed, tokenizers={"target": vocab})

    if args.init_encoder:
        src = load_checkpoint(args.init_encoder)
        load_encoder_weights(m, src)
    if args.freeze_encoder:
        freeze_encoder(m, adapters_trainable=args.adapters)

    print(f"trainable params: {m.trainable_param_count()} / total {m.param_count()}")
    dataset = datamod.make_e2e_dataset(rows, vocab)
    eval_fn = None
    if args.dev_every:
        eval_fn = _dev_eval_fn(m, _load_split(args.data, "dev"), rc.decode.max_len)
    log_path = args.out + ".log.csv"
    logs = _fit(m, dataset, rc, log_path, eval_fn, args.dev_every or 0)
    save_checkpoint(m, args.out)
    print(f"final train loss: {logs[-1].train_loss:.4f}; checkpoint: {args.out}")
    return EXIT_OK


def cmd_asr_proxy_train(args) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc.train.seed = args.seed
    if args.epochs is not None:
        rc.train.epochs = args.epochs
    print(effective_config(rc))

    rows = _load_split(args.data, "train")
    corpus = [r["transcript"] for r in rows]
    vocab = tok.train_tokenizer(corpus, rc.model.vocab_size)
    m = build_model(rc.model, seed=rc.train.seed, tokenizers={"target": vocab})
    print(f"trainable params: {m.trainable_param_count()} / total {m.param_count()}")

    dataset = [
        (r["feature_matrix"].frames[: r["feature_matrix"].valid_len],
         tok.encode(r["transcript"], vocab, add_specials=True).ids)
        for r in rows
    ]
    logs = _fit(m, dataset, rc, args.out + ".log.csv")
    save_checkpoint(m, args.out)
    print(f"final train loss: {logs[-1].train_loss:.4f}; checkpoint: {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    rc = load_run_config(args.config)
    if args.beam is not None:
        rc.decode.width = args.beam
    if args.temperature is not None:
        rc.decode.temperature = args.temperature
    if args.greedy:
        rc.decode.greedy = True
    m = load_checkpoint(args.ckpt)
    rows = _load_split(args.data, args.split)
    if m.kind == "e2e":
        inputs = [r["feature_matrix"].frames[: r["feature_matrix"].valid_len] for r in rows]
    else:
        iv = m.tokenizers["input"]
        inputs = [tok.encode(r["transcript"], iv).ids or [tok.UNK_ID] for r in rows]
    texts = decoding.decode_dataset(m, inputs, greedy=rc.decode.greedy,
                                    width=rc.decode.width,
                                    temperature=rc.decode.temperature,
                                    max_len=rc.decode.max_len)
    canon = [semantics.canonicalize(t) for t in texts]
    with open(args.out, "w", encoding="utf-8") as f:
        for c in canon:
            f.write(c + "\n")
    if args.jsonl:
        with open(args.jsonl, "w", encoding="utf-8") as f:
            for row, c in zip(rows, canon):
                f.write(json.dumps({"id": row["id"], "prediction": c}) + "\n")
    print(f"wrote {len(canon)} predictions to {args.out}")
    return EXIT_OK


def _gold_lines(gold: str, split: str) -> list[str]:
    if os.path.isdir(gold):
        rows = datamod.load_manifest(os.path.join(gold, f"{split}.jsonl"), load_features=False)
        return [r["semantics"] for r in rows]
    with open(gold, "r", encoding="utf-8") as f:
        return f.read().splitlines()


def cmd_score(args) -> int:
    with open(args.pred, "r", encoding="utf-8") as f:
        pred_lines = f.read().splitlines()
    gold_lines = _gold_lines(args.gold, args.split)
    if len(pred_lines) != len(gold_lines):
        raise datamod.DataError(
            f"row count mismatch: {len(pred_lines)} predictions vs {len(gold_lines)} golds")
    preds = [semantics.parse(s) for s in pred_lines]
    golds = [semantics.parse(s) for s in gold_lines]
    report = metrics.evaluate(preds, golds, args.mode)
    print(report.to_json() if args.json else report.to_table())
    return EXIT_OK


def train_nlu_on_rows(rc: RunConfig, train_rows: list[dict], wer: float,
                      seed: int, channel_vocab=None) -> ModelBundle:
    """Train the cascade NLU model on (possibly WER-corrupted) transcripts."""
    corrupted = [datamod.wer_channel(r["transcript"], wer, seed * 100003 + i, channel_vocab)
                 if wer > 0 else r["transcript"] for i, r in enumerate(train_rows)]
    in_corpus = [c for c in corrupted if c] or ["empty"]
    input_vocab = tok.train_tokenizer(in_corpus, rc.model.input_vocab_size)
    output_vocab = tok.train_tokenizer([r["semantics"] for r in train_rows], rc.model.vocab_size)
    m = build_nlu_model(rc.model, seed=seed,
                        tokenizers={"input": input_vocab, "target": output_vocab})
    dataset = []
    for text, row in zip(corrupted, train_rows):
        src = tok.encode(text, input_vocab).ids or [tok.UNK_ID]
        tgt = tok.encode(row["semantics"], output_vocab, add_specials=True).ids
        dataset.append((src, tgt))
    rc2 = dataclasses.replace(rc)
    _fit(m, dataset, rc2)
    return m


def eval_nlu(m: ModelBundle, rows: list[dict], wer: float, seed: int, max_len: int,
             channel_vocab=None) -> metrics.EvalReport:
    iv = m.tokenizers["input"]
    inputs = []
    for i, r in enumerate(rows):
        text = datamod.wer_channel(r["transcript"], wer, seed * 7919 + i, channel_vocab) \
            if wer > 0 else r["transcript"]
        inputs.append(tok.encode(text, iv).ids or [tok.UNK_ID])
    texts = decoding.decode_dataset(m, inputs, greedy=True, max_len=max_len)
    preds = [semantics.parse(t) for t in texts]
    golds = [semantics.parse(r["semantics"]) for r in rows]
    return metrics.evaluate(preds, golds, "exact")


def cmd_cascade_eval(args) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc.train.seed = args.seed
    if args.epochs is not None:
        rc.train.epochs = args.epochs
    print(effective_config(rc))
    train_rows = _load_split(args.data, "train")
    dev_rows = _load_split(args.data, "dev")
    results = {}
    for w in args.wer:
        if not (0.0 <= w <= 1.0):
            raise ConfigError(f"invalid WER {w}")
        m = train_nlu_on_rows(rc, train_rows, w, rc.train.seed)
        rep = eval_nlu(m, dev_rows, w, rc.train.seed + 1, rc.decode.max_len)
        results[w] = rep
        label = "oracle" if w == 0 else f"wer={w}"
        print(f"[{label}] intent_acc={rep.intent_accuracy:.4f} f1={rep.f1:.4f}")
    if args.json:
        print(json.dumps({str(w): json.loads(r.to_json()) for w, r in results.items()}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slukit",
                                description="Speech intent classification and slot filling pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sd = sub.add_parser("synth-data", help="generate the synthetic dataset")
    sd.add_argument("--config", default=None)
    sd.add_argument("--out", required=True)
    sd.set_defaults(fn=cmd_synth_data)

    tr = sub.add_parser("train", help="train the end-to-end model")
    tr.add_argument("--config", default=None)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--freeze-encoder", action="store_true")
    tr.add_argument("--adapters", action="store_true")
    tr.add_argument("--init-encoder", default=None)
    tr.add_argument("--dev-every", type=int, default=0)
    tr.set_defaults(fn=cmd_train)

    ap = sub.add_parser("asr-proxy-train", help="train encoder + aux decoder on transcripts")
    ap.add_argument("--config", default=None)
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--epochs", type=int, default=None)
    ap.set_defaults(fn=cmd_asr_proxy_train)

    pr = sub.add_parser("predict", help="decode a split to a prediction file")
    pr.add_argument("--config", default=None)
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--split", default="dev")
    pr.add_argument("--out", required=True)
    pr.add_argument("--beam", type=int, default=None)
    pr.add_argument("--temperature", type=float, default=None)
    pr.add_argument("--greedy", action="store_true")
    pr.add_argument("--jsonl", default=None)
    pr.set_defaults(fn=cmd_predict)

    sc = sub.add_parser("score", help="score predictions against gold semantics")
    sc.add_argument("--pred", required=True)
    sc.add_argument("--gold", required=True, help="manifest directory or gold lines file")
    sc.add_argument("--split", default="dev")
    sc.add_argument("--mode", choices=["exact", "word", "char"], default="exact")
    sc.add_argument("--json", action="store_true")
    sc.set_defaults(fn=cmd_score)

    ce = sub.add_parser("cascade-eval", help="train/evaluate the cascade NLU at given WERs")
    ce.add_argument("--config", default=None)
    ce.add_argument("--data", required=True)
    ce.add_argument("--wer", type=float, nargs="+", required=True)
    ce.add_argument("--seed", type=int, default=None)
    ce.add_argument("--epochs", type=int, default=None)
    ce.add_argument("--json", action="store_true")
    ce.set_defaults(fn=cmd_cascade_eval)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (datamod.DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (training.DivergenceError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, tok.VocabError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
