"""Caption evaluation: BLEU-1..4, ROUGE-L, CIDEr, the "w/o a" transform, and
uniqueness/novelty statistics."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .corpus import strip_article

log = logging.getLogger(__name__)

UNSUPPORTED_METRICS = ("METEOR", "SPICE")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class EvalPair:
    candidate: Tuple[str, ...]
    references: Tuple[Tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references:
            raise MetricsError("every evaluation pair needs at least one reference")


def make_pairs(candidates: Sequence[Sequence[str]],
               references: Sequence[Sequence[Sequence[str]]]) -> List[EvalPair]:
    if len(candidates) != len(references):
        raise MetricsError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    return [EvalPair(tuple(c), tuple(tuple(r) for r in refs))
            for c, refs in zip(candidates, references)]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(pairs: Sequence[EvalPair], max_n: int = 4) -> Dict[str, float]:
    """Corpus-level BLEU with clipped precision and brevity penalty.

    The effective reference length per pair is the closest to the candidate
    length (shorter on ties). Returns {"B-1": ..., ..., f"B-{max_n}": ...}.
    """
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for pair in pairs:
        c = pair.candidate
        cand_len += len(c)
        ref_len += min((len(r) for r in pair.references),
                       key=lambda rl: (abs(rl - len(c)), rl))
        for n in range(1, max_n + 1):
            counts = _ngrams(c, n)
            if not counts:
                continue
            best = Counter()
            for r in pair.references:
                rc = _ngrams(r, n)
                for g in counts:
                    best[g] = max(best[g], rc.get(g, 0))
            total[n - 1] += sum(counts.values())
            matched[n - 1] += sum(min(v, best[g]) for g, v in counts.items())
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len) if cand_len else 0.0
    scores = {}
    for n in range(1, max_n + 1):
        precisions = [matched[k] / total[k] if total[k] else 0.0 for k in range(n)]
        if any(p == 0.0 for p in precisions):
            scores[f"B-{n}"] = 0.0
        else:
            scores[f"B-{n}"] = bp * math.exp(sum(math.log(p) for p in precisions) / n)
    return scores


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(pairs: Sequence[EvalPair], beta: float = 1.2) -> float:
    """Mean over pairs of the max-over-references LCS F-measure."""
    total = 0.0
    for pair in pairs:
        best = 0.0
        for ref in pair.references:
            lcs = _lcs_length(pair.candidate, ref)
            if lcs == 0:
                continue
            p = lcs / len(pair.candidate)
            r = lcs / len(ref)
            best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
        total += best
    return total / len(pairs) if pairs else 0.0


def cider(pairs: Sequence[EvalPair], max_n: int = 4, sigma: float = 6.0,
          scale: float = 10.0) -> float:
    """CIDEr-D style score: tf-idf n-gram similarity with clipping and a
    Gaussian length penalty, averaged over n = 1..max_n and over the corpus.

    The idf statistics come from the reference corpus itself (df = number of
    images whose references contain the n-gram).
    """
    if not pairs:
        raise MetricsError("cider needs at least one pair")
    n_images = len(pairs)
    if n_images == 1:
        log.warning("cider: single-image corpus yields degenerate idf statistics")
    doc_freq = [Counter() for _ in range(max_n)]
    for pair in pairs:
        for n in range(1, max_n + 1):
            seen = set()
            for ref in pair.references:
                seen.update(_ngrams(ref, n))
            for g in seen:
                doc_freq[n - 1][g] += 1

    def tfidf(tokens, n):
        counts = _ngrams(tokens, n)
        length = max(len(tokens) - n + 1, 0)
        vec = {}
        norm = 0.0
        for g, c in counts.items():
            idf = math.log(n_images) - math.log(max(doc_freq[n - 1].get(g, 0), 1))
            w = (c / length) * idf if length else 0.0
            vec[g] = w
            norm += w * w
        return vec, math.sqrt(norm), length

    total = 0.0
    for pair in pairs:
        score_n = [0.0] * max_n
        for n in range(1, max_n + 1):
            cvec, cnorm, clen = tfidf(pair.candidate, n)
            for ref in pair.references:
                rvec, rnorm, rlen = tfidf(ref, n)
                num = sum(min(cvec.get(g, 0.0), w) * w for g, w in rvec.items())
                if cnorm > 0 and rnorm > 0:
                    sim = num / (cnorm * rnorm)
                else:
                    sim = 0.0
                delta = len(pair.candidate) - len(ref)
                sim *= math.exp(-(delta ** 2) / (2 * sigma ** 2))
                score_n[n - 1] += sim
            score_n[n - 1] *= scale / len(pair.references)
        total += sum(score_n) / max_n
    return total / n_images


def without_a(pairs: Sequence[EvalPair]) -> List[EvalPair]:
    """Strip every token "a" from candidates and references (idempotent)."""
    return [EvalPair(tuple(strip_article(p.candidate)),
                     tuple(tuple(strip_article(r)) for r in p.references))
            for p in pairs]


def uniqueness_stats(generated: Sequence[Sequence[str]],
                     training_captions: Sequence[Sequence[str]]):
    """(percent unique, percent seen in training), over exact token sequences."""
    if not generated:
        raise MetricsError("uniqueness_stats needs at least one generated caption")
    gen = [tuple(g) for g in generated]
    train = {tuple(t) for t in training_captions}
    pct_unique = 100.0 * len(set(gen)) / len(gen)
    pct_seen = 100.0 * sum(1 for g in gen if g in train) / len(gen)
    return pct_unique, pct_seen


@dataclass
class EvalReport:
    scores: Dict[str, float]
    pair_count: int
    unsupported: Tuple[str, ...] = UNSUPPORTED_METRICS
    uniqueness: Optional[Tuple[float, float]] = None
    without_a_applied: bool = False

    def render_table(self) -> str:
        rows = [("pairs", str(self.pair_count))]
        rows += [(k, f"{v:.4f}") for k, v in self.scores.items()]
        for name in self.unsupported:
            rows.append((name, "unsupported"))
        if self.uniqueness is not None:
            rows.append(("unique %", f"{self.uniqueness[0]:.2f}"))
            rows.append(("seen-in-training %", f"{self.uniqueness[1]:.2f}"))
        if self.without_a_applied:
            rows.append(("transform", "w/o a"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)

    def to_json(self) -> str:
        payload = {
            "pairs": self.pair_count,
            "scores": self.scores,
            "unsupported": list(self.unsupported),
            "without_a": self.without_a_applied,
        }
        if self.uniqueness is not None:
            payload["unique_percent"] = self.uniqueness[0]
            payload["seen_in_training_percent"] = self.uniqueness[1]
        return json.dumps(payload, indent=2, sort_keys=True)


def evaluate(pairs: Sequence[EvalPair], apply_without_a: bool = False,
             training_captions: Optional[Sequence[Sequence[str]]] = None,
             generated_for_uniqueness: Optional[Sequence[Sequence[str]]] = None
             ) -> EvalReport:
    """Run every supported metric over ``pairs`` and assemble a report."""
    if not pairs:
        raise MetricsError("evaluate needs at least one pair")
    if apply_without_a:
        pairs = without_a(pairs)
    scores = dict(bleu(pairs))
    scores["ROUGE-L"] = rouge_l(pairs)
    scores["CIDEr"] = cider(pairs)
    uniq = None
    if training_captions is not None:
        gen = generated_for_uniqueness
        if gen is None:
            gen = [p.candidate for p in pairs]
        if apply_without_a:
            gen = [strip_article(g) for g in gen]
            training_captions = [strip_article(t) for t in training_captions]
        uniq = uniqueness_stats(gen, training_captions)
    return EvalReport(scores=scores, pair_count=len(pairs), uniqueness=uniq,
                      without_a_applied=apply_without_a)
