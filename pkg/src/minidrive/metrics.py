"""BLEU-4, ROUGE-L, METEOR (exact + suffix-stem matcher) and CIDEr on token lists."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .lm import split_words

BLEU_EPS = 1e-9
STEM_SUFFIXES = ("ing", "es", "ed", "s")
METRICS = ("bleu4", "meteor", "rouge_l", "cider")
TABLE_HEADERS = ("BLEU-4", "METEOR", "ROUGE-L", "CIDEr")


@dataclass
class EvalPair:
    prediction: list[str]
    references: list[list[str]]
    category: str | None = None
    id: str | None = field(default=None, compare=False)

    @classmethod
    def from_text(cls, prediction: str, references: Sequence[str], category: str | None = None,
                  id: str | None = None) -> "EvalPair":
        return cls(split_words(prediction), [split_words(r) for r in references], category, id)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _require(pairs: Sequence[EvalPair]) -> None:
    if not pairs:
        raise ValueError("at least one evaluation pair is required")


# ---------------------------------------------------------------- BLEU


def bleu4(pairs: Sequence[EvalPair]) -> float:
    """Corpus BLEU: pooled clipped n-gram precisions (n=1..4), geometric mean, brevity penalty."""
    _require(pairs)
    matched = [0] * 4
    total = [0] * 4
    cand_len = ref_len = 0
    for pair in pairs:
        pred = pair.prediction
        cand_len += len(pred)
        # closest reference length, shorter wins ties
        ref_len += min((abs(len(r) - len(pred)), len(r)) for r in pair.references)[1]
        for n in range(1, 5):
            counts = ngrams(pred, n)
            max_ref: Counter = Counter()
            for ref in pair.references:
                max_ref |= ngrams(ref, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += sum(counts.values())
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matched, total):
        p = m / t if t and m else BLEU_EPS
        log_p += math.log(p) / 4
    bp = math.exp(1 - ref_len / cand_len) if cand_len <= ref_len else 1.0
    return bp * math.exp(log_p)


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(pred: Sequence[str], refs: Sequence[Sequence[str]]) -> float:
    best = 0.0
    for ref in refs:
        if not pred or not ref:
            continue
        lcs = lcs_length(pred, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(pred), lcs / len(ref)
        best = max(best, 2 * p * r / (p + r))
    return best


def rouge_l(pairs: Sequence[EvalPair]) -> float:
    _require(pairs)
    return sum(rouge_l_pair(p.prediction, p.references) for p in pairs) / len(pairs)


# ---------------------------------------------------------------- METEOR


def _stems(word: str) -> set[str]:
    forms = {word}
    for suffix in STEM_SUFFIXES:
        if word.endswith(suffix) and len(word) - len(suffix) >= 3:
            forms.add(word[: -len(suffix)])
    return forms


def align(pred: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Greedy left-to-right alignment: exact matches first, then shared suffix-stripped stems."""
    used_p: set[int] = set()
    used_r: set[int] = set()
    links = []
    stages = (lambda a, b: a == b, lambda a, b: bool(_stems(a) & _stems(b)))
    for same in stages:
        for i, w in enumerate(pred):
            if i in used_p:
                continue
            for j, v in enumerate(ref):
                if j not in used_r and same(w, v):
                    links.append((i, j))
                    used_p.add(i)
                    used_r.add(j)
                    break
    return sorted(links)


def count_chunks(links: Sequence[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in links:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_pair(pred: Sequence[str], refs: Sequence[Sequence[str]]) -> float:
    best = 0.0
    for ref in refs:
        links = align(pred, ref)
        m = len(links)
        if m == 0:
            continue
        p, r = m / len(pred), m / len(ref)
        fmean = 10 * p * r / (r + 9 * p)
        penalty = 0.5 * (count_chunks(links) / m) ** 3
        best = max(best, fmean * (1 - penalty))
    return best


def meteor(pairs: Sequence[EvalPair]) -> float:
    _require(pairs)
    return sum(meteor_pair(p.prediction, p.references) for p in pairs) / len(pairs)


# ---------------------------------------------------------------- CIDEr


def cider(pairs: Sequence[EvalPair]) -> float:
    """TF-IDF n-gram cosine (n=1..4) averaged over n and references, x10; IDF from this corpus."""
    if len(pairs) < 2:
        raise ValueError("CIDEr needs a corpus of at least two pairs (IDF is corpus-level)")
    n_docs = len(pairs)
    df: list[Counter] = [Counter() for _ in range(4)]
    for pair in pairs:
        for n in range(1, 5):
            seen = set()
            for ref in pair.references:
                seen.update(ngrams(ref, n))
            df[n - 1].update(seen)

    def vector(tokens, n):
        counts = ngrams(tokens, n)
        total = sum(counts.values())
        vec = {}
        for g, c in counts.items():
            idf = math.log(n_docs / max(1.0, df[n - 1][g]))
            vec[g] = (c / total) * idf
        return vec

    scores = []
    for pair in pairs:
        per_n = []
        for n in range(1, 5):
            hyp = vector(pair.prediction, n)
            hyp_norm = math.sqrt(sum(v * v for v in hyp.values()))
            sims = []
            for ref in pair.references:
                rv = vector(ref, n)
                ref_norm = math.sqrt(sum(v * v for v in rv.values()))
                if hyp_norm == 0 or ref_norm == 0:
                    sims.append(0.0)
                    continue
                dot = sum(min(hv, rv[g]) * rv[g] for g, hv in hyp.items() if g in rv)
                sims.append(dot / (hyp_norm * ref_norm))
            per_n.append(sum(sims) / len(sims))
        scores.append(10.0 * sum(per_n) / 4)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------- reports


def score_all(pairs: Sequence[EvalPair]) -> dict[str, float]:
    out = {"bleu4": bleu4(pairs), "meteor": meteor(pairs), "rouge_l": rouge_l(pairs)}
    out["cider"] = cider(pairs) if len(pairs) >= 2 else None
    return out


def report(pairs: Sequence[EvalPair]) -> dict:
    """Overall and per-category scores, in [0,1] (CIDEr on its 0-10 scale) and x100."""
    overall = score_all(pairs)
    groups: dict[str, list[EvalPair]] = defaultdict(list)
    for p in pairs:
        if p.category is not None:
            groups[p.category].append(p)
    per_cat = {cat: score_all(group) for cat, group in sorted(groups.items())}
    return {
        "count": len(pairs),
        "overall": overall,
        "overall_x100": _x100(overall),
        "per_category": per_cat,
        "per_category_x100": {k: _x100(v) for k, v in per_cat.items()},
    }


def _x100(scores: dict[str, float | None]) -> dict[str, float | None]:
    # CIDEr is already reported on its own scale in the results table
    return {k: (None if v is None else (v if k == "cider" else 100 * v)) for k, v in scores.items()}


def format_table(rep: dict, title: str = "Performance on synthetic DriveQA") -> str:
    rows = [("overall", rep["overall_x100"])] + list(rep["per_category_x100"].items())
    width = max(len(r[0]) for r in rows) + 2
    lines = [title, "-" * (width + 10 * len(TABLE_HEADERS)),
             "".ljust(width) + "".join(h.rjust(10) for h in TABLE_HEADERS)]
    for name, scores in rows:
        cells = []
        for key in METRICS:
            v = scores[key]
            cells.append(("-" if v is None else f"{v:.2f}").rjust(10))
        lines.append(name.ljust(width) + "".join(cells))
    return "\n".join(lines) + "\n"


def read_predictions(path) -> list[EvalPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append(EvalPair.from_text(rec["prediction"], rec["references"],
                                                rec.get("category"), rec.get("id")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed prediction record ({exc})") from exc
    return pairs


def write_predictions(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
