"""Intent accuracy and SLURP-style entity precision/recall/F1.

Exact mode treats entities as multisets of (type, normalized filler). The
distance mode gives partial credit: same-type gold/pred entities are aligned
one-to-one by maximum total weight, where a pair's weight is the word- or
char-level token F1 of the two fillers.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from scipy.optimize import linear_sum_assignment

from .semantics import SemanticsRecord, parse

GREEDY_MATCH_CUTOFF = 20  # same-type entity count above which matching goes greedy


def normalize_filler(s: str) -> str:
    return " ".join(s.lower().split())


@dataclass
class EvalReport:
    intent_accuracy: float
    precision: float
    recall: float
    f1: float
    tp: float
    fp: float
    fn: float
    n_utterances: int
    mode: str = "exact"
    per_scenario: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [
            f"utterances        {self.n_utterances}",
            f"mode              {self.mode}",
            f"intent accuracy   {self.intent_accuracy:.4f}",
            f"entity precision  {self.precision:.4f}",
            f"entity recall     {self.recall:.4f}",
            f"entity F1         {self.f1:.4f}",
            f"counts            TP={self.tp:.2f} FP={self.fp:.2f} FN={self.fn:.2f}",
        ]
        if self.per_scenario:
            lines.append("per-scenario:")
            for scen in sorted(self.per_scenario):
                row = self.per_scenario[scen]
                lines.append(
                    f"  {scen:<20} n={row['n']:<5} intent_acc={row['intent_accuracy']:.4f} "
                    f"f1={row['f1']:.4f}"
                )
        return "\n".join(lines)


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if (p + r) > 0 else 0.0


def intent_accuracy(preds: list[SemanticsRecord], golds: list[SemanticsRecord]) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        return 0.0
    correct = sum(1 for p, g in zip(preds, golds) if p.intent == g.intent)
    return correct / len(golds)


def _entity_multiset(r: SemanticsRecord) -> Counter:
    return Counter((e.type, normalize_filler(e.filler)) for e in r.entities)


def entity_prf_exact(preds: list[SemanticsRecord], golds: list[SemanticsRecord]):
    """Micro-averaged multiset-intersection P/R/F1; returns (P, R, F1, counts)."""
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    tp = fp = fn = 0
    for p, g in zip(preds, golds):
        pm, gm = _entity_multiset(p), _entity_multiset(g)
        inter = sum((pm & gm).values())
        tp += inter
        fp += sum(pm.values()) - inter
        fn += sum(gm.values()) - inter
    prec = tp / (tp + fp) if tp + fp > 0 else 0.0
    rec = tp / (tp + fn) if tp + fn > 0 else 0.0
    return prec, rec, _f1(prec, rec), (tp, fp, fn)


def _token_f1(a: str, b: str, level: str) -> float:
    ta = a.split() if level == "word" else list(a)
    tb = b.split() if level == "word" else list(b)
    if not ta or not tb:
        return 1.0 if ta == tb else 0.0
    overlap = sum((Counter(ta) & Counter(tb)).values())
    p = overlap / len(ta)
    r = overlap / len(tb)
    return _f1(p, r)


def _match_weights(pred_fillers: list[str], gold_fillers: list[str], level: str) -> float:
    """Max-weight one-to-one matching total; Hungarian, greedy past the cutoff."""
    import numpy as np

    w = np.array([[_token_f1(pf, gf, level) for gf in gold_fillers] for pf in pred_fillers])
    if max(len(pred_fillers), len(gold_fillers)) > GREEDY_MATCH_CUTOFF:
        total = 0.0
        used_p, used_g = set(), set()
        order = np.dstack(np.unravel_index(np.argsort(-w, axis=None), w.shape))[0]
        for pi, gi in order:
            if pi in used_p or gi in used_g or w[pi, gi] <= 0:
                continue
            used_p.add(int(pi))
            used_g.add(int(gi))
            total += float(w[pi, gi])
        return total
    rows, cols = linear_sum_assignment(-w)
    return float(w[rows, cols].sum())


def entity_prf_distance(preds: list[SemanticsRecord], golds: list[SemanticsRecord],
                        level: str = "word"):
    if level not in ("word", "char"):
        raise ValueError(f"level must be 'word' or 'char', got {level!r}")
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    tp = 0.0
    n_pred = n_gold = 0
    for p, g in zip(preds, golds):
        by_type_p: dict[str, list[str]] = {}
        by_type_g: dict[str, list[str]] = {}
        for e in p.entities:
            by_type_p.setdefault(e.type, []).append(normalize_filler(e.filler))
        for e in g.entities:
            by_type_g.setdefault(e.type, []).append(normalize_filler(e.filler))
        n_pred += len(p.entities)
        n_gold += len(g.entities)
        for t in set(by_type_p) & set(by_type_g):
            tp += _match_weights(by_type_p[t], by_type_g[t], level)
    prec = tp / n_pred if n_pred > 0 else 0.0
    rec = tp / n_gold if n_gold > 0 else 0.0
    return prec, rec, _f1(prec, rec), (tp, n_pred - tp, n_gold - tp)


def evaluate(preds: list[SemanticsRecord], golds: list[SemanticsRecord],
             mode: str = "exact") -> EvalReport:
    if mode == "exact":
        p, r, f1, (tp, fp, fn) = entity_prf_exact(preds, golds)
    elif mode in ("word", "char"):
        p, r, f1, (tp, fp, fn) = entity_prf_distance(preds, golds, mode)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    acc = intent_accuracy(preds, golds)

    per_scenario: dict[str, dict] = {}
    groups: dict[str, tuple[list, list]] = {}
    for pr, gl in zip(preds, golds):
        groups.setdefault(gl.scenario, ([], []))
        groups[gl.scenario][0].append(pr)
        groups[gl.scenario][1].append(gl)
    for scen, (ps, gs) in groups.items():
        if mode == "exact":
            sp, sr, sf1, _ = entity_prf_exact(ps, gs)
        else:
            sp, sr, sf1, _ = entity_prf_distance(ps, gs, mode)
        per_scenario[scen] = {
            "n": len(gs),
            "intent_accuracy": intent_accuracy(ps, gs),
            "precision": sp,
            "recall": sr,
            "f1": sf1,
        }
    return EvalReport(acc, p, r, f1, float(tp), float(fp), float(fn),
                      len(golds), mode, per_scenario)


def score_files(pred_path: str, gold_path: str, mode: str = "exact") -> EvalReport:
    """Score prediction vs gold files, one semantics string per line."""
    with open(pred_path, "r", encoding="utf-8") as f:
        pred_lines = f.read().splitlines()
    with open(gold_path, "r", encoding="utf-8") as f:
        gold_lines = f.read().splitlines()
    if len(pred_lines) != len(gold_lines):
        raise ValueError(
            f"row count mismatch: {len(pred_lines)} predictions vs {len(gold_lines)} golds"
        )
    preds = [parse(s) for s in pred_lines]
    golds = [parse(s) for s in gold_lines]
    return evaluate(preds, golds, mode)
