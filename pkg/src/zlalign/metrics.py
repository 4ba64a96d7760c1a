"""Caption metrics written from first principles.

All text metrics operate on token lists; use :func:`normalize_text` to
lowercase, drop punctuation and split raw strings.  BERTScore and
CLIPScore take caller-supplied embeddings, so no model is bundled.
"""

from __future__ import annotations

import csv
import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .backend import config_hash
from .errors import ConfigError, DegenerateInputError, InvalidInputError, RewardParseError, ShapeError

_PUNCT = str.maketrans({c: " " for c in string.punctuation})

TEXT_METRICS = ("bleu", "rouge_1", "rouge_2", "rouge_l", "cider")
EMBEDDING_METRICS = ("bertscore", "clipscore")
ALL_METRICS = TEXT_METRICS + EMBEDDING_METRICS
DEFAULT_METRICS = ("bleu", "rouge_l", "cider")


def normalize_text(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---- BLEU ------------------------------------------------------------------


@dataclass(frozen=True)
class BleuResult:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    candidate_length: int
    reference_length: int
    degenerate: bool = False


def effective_reference_length(cand_len: int, ref_lens: Sequence[int]) -> int:
    """Closest reference length; ties go to the shorter reference."""
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def bleu_stats(candidate: Sequence[str], references: Sequence[Sequence[str]], n: int = 4, weights=None) -> BleuResult:
    if not references:
        raise InvalidInputError("BLEU needs at least one reference")
    if all(len(r) == 0 for r in references):
        raise InvalidInputError("every reference is empty")
    weights = [1.0 / n] * n if weights is None else list(weights)
    if len(weights) != n:
        raise ConfigError("need one weight per n-gram order")
    c = len(candidate)
    r = effective_reference_length(c, [len(ref) for ref in references])
    if c == 0:
        return BleuResult(0.0, (0.0,) * n, 0.0, 0, r, degenerate=True)

    precisions = []
    for k in range(1, n + 1):
        cand = ngram_counts(candidate, k)
        total = sum(cand.values())
        if total == 0:
            precisions.append(0.0)
            continue
        max_ref = Counter()
        for ref in references:
            for g, cnt in ngram_counts(ref, k).items():
                max_ref[g] = max(max_ref[g], cnt)
        clipped = sum(min(cnt, max_ref[g]) for g, cnt in cand.items())
        precisions.append(clipped / total)

    bp = math.exp(-max(0.0, r / c - 1.0))
    if any(p == 0.0 and w > 0 for p, w in zip(precisions, weights)):
        score = 0.0
    else:
        score = bp * math.exp(sum(w * math.log(p) for p, w in zip(precisions, weights) if w > 0))
    return BleuResult(score, tuple(precisions), bp, c, r)


def bleu(candidate, references, n: int = 4, weights=None) -> float:
    return bleu_stats(candidate, references, n, weights).score


# ---- ROUGE -----------------------------------------------------------------


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge(candidate: Sequence[str], reference: Sequence[str], mode="L") -> RougeScore:
    """ROUGE-N (``mode`` an int) or ROUGE-L (``mode="L"``) precision/recall/F1."""
    if not candidate or not reference:
        return RougeScore(0.0, 0.0, 0.0, degenerate=True)
    if mode in ("L", "l"):
        overlap = lcs_length(candidate, reference)
        cand_total, ref_total = len(candidate), len(reference)
    else:
        n = int(mode)
        if n < 1:
            raise ConfigError("ROUGE-N order must be >= 1")
        cand, ref = ngram_counts(candidate, n), ngram_counts(reference, n)
        overlap = sum((cand & ref).values())
        cand_total, ref_total = sum(cand.values()), sum(ref.values())
    p = overlap / cand_total if cand_total else 0.0
    r = overlap / ref_total if ref_total else 0.0
    return RougeScore(p, r, _f1(p, r))


def best_rouge(candidate, references, mode="L") -> RougeScore:
    """Highest-F1 score over several references."""
    scores = [rouge(candidate, ref, mode) for ref in references]
    return max(scores, key=lambda s: s.f1)


# ---- CIDEr -----------------------------------------------------------------


@dataclass(frozen=True)
class CiderResult:
    scores: tuple[float, ...]
    mean: float


def _tfidf(tokens, n, idf, log_m) -> dict:
    counts = ngram_counts(tokens, n)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * idf.get(g, log_m) for g, c in counts.items()}


def _cos(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = sum(x * v[g] for g, x in u.items() if g in v)
    return dot / (nu * nv)


def cider_idf(corpus_refs: Sequence[Sequence[Sequence[str]]], n: int = 4) -> list[dict]:
    """Per-order IDF tables; one document is one image's reference set."""
    m = len(corpus_refs)
    tables = []
    for k in range(1, n + 1):
        df = Counter()
        for refs in corpus_refs:
            seen = set()
            for ref in refs:
                seen.update(ngram_counts(ref, k))
            df.update(seen)
        tables.append({g: math.log(m / d) for g, d in df.items()})
    return tables


def cider(corpus: Sequence[tuple[Sequence[str], Sequence[Sequence[str]]]], n: int = 4) -> CiderResult:
    """Mean over orders of the cosine between TF-IDF vectors.

    Term frequency is the n-gram count divided by the sentence's n-gram
    total; multiple references are averaged into a single vector.
    N-grams absent from every reference set take IDF ``log(M)``.
    """
    if not corpus:
        raise InvalidInputError("CIDEr needs a non-empty corpus")
    m = len(corpus)
    log_m = math.log(m)
    idf = cider_idf([refs for _, refs in corpus], n)
    scores = []
    for cand, refs in corpus:
        if not refs:
            raise InvalidInputError("every CIDEr sample needs at least one reference")
        total = 0.0
        for k in range(1, n + 1):
            g = _tfidf(cand, k, idf[k - 1], log_m)
            r: dict = {}
            for ref in refs:
                for key, val in _tfidf(ref, k, idf[k - 1], log_m).items():
                    r[key] = r.get(key, 0.0) + val / len(refs)
            total += _cos(g, r)
        scores.append(total / n)
    return CiderResult(tuple(scores), sum(scores) / m)


# ---- embedding metrics -----------------------------------------------------


def _unit_rows(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"{what}: need a non-empty 2-D matrix")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise DegenerateInputError(f"{what}: zero-norm embedding row")
    return x / norms


def bertscore(candidate_embeddings, reference_embeddings) -> RougeScore:
    """Greedy max-cosine matching; P and R clipped into [0, 1]."""
    c = _unit_rows(candidate_embeddings, "candidate embeddings")
    r = _unit_rows(reference_embeddings, "reference embeddings")
    if c.shape[1] != r.shape[1]:
        raise ShapeError("candidate and reference embeddings differ in width")
    sim = c @ r.T
    p = float(np.clip(sim.max(axis=1).mean(), 0.0, 1.0))
    rec = float(np.clip(sim.max(axis=0).mean(), 0.0, 1.0))
    return RougeScore(p, rec, _f1(p, rec))


class ClipScore(NamedTuple):
    score: float
    raw: float


def clipscore(image_embedding, text_embedding) -> ClipScore:
    u = np.asarray(image_embedding, dtype=np.float64).reshape(-1)
    v = np.asarray(text_embedding, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError("image and text embeddings differ in dimension")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("zero embedding in CLIPScore")
    raw = float(u @ v / (nu * nv))
    return ClipScore(min(max(raw, 0.0), 1.0), raw)


# ---- reward letters --------------------------------------------------------

_LETTER_SCORES = {"A": 1.0, "B": 0.75, "C": 0.5, "D": 0.25, "E": 0.0}
_LETTER_RE = re.compile(r"(?<![A-Za-z0-9])([A-Ea-e])(?![A-Za-z0-9])")
_MISSING = object()


def reward_from_letter(response_text: str, default=_MISSING) -> float:
    """Map the first standalone A-E letter to a score in [0, 1] (A=1, E=0).

    Raises :class:`RewardParseError` when no letter is found, unless a
    ``default`` is given.
    """
    m = _LETTER_RE.search(response_text or "")
    if m is None:
        if default is _MISSING:
            raise RewardParseError(f"no A-E grade letter in {response_text!r}")
        return default
    return _LETTER_SCORES[m.group(1).upper()]


# ---- reports ---------------------------------------------------------------


@dataclass
class MetricReport:
    per_sample: list[dict]
    aggregates: dict
    params: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return config_hash({"params": self.params, "config": self.config})

    def to_dict(self) -> dict:
        return {
            "aggregates": self.aggregates,
            "params": self.params,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "per_sample": self.per_sample,
        }

    def write_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        keys = []
        for row in self.per_sample:
            keys.extend(k for k in row if k not in keys)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for row in self.per_sample:
                w.writerow(row)
        return path


def score_captions(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    metrics: Sequence[str] = DEFAULT_METRICS,
    *,
    token_embedder: Callable[[list[str]], np.ndarray] | None = None,
    clip_pairs: Sequence[tuple] | None = None,
    n: int = 4,
    config: dict | None = None,
) -> MetricReport:
    """Score aligned candidate/reference lists into a :class:`MetricReport`.

    ``token_embedder`` maps a token list to a ``len x d`` matrix (BERTScore);
    ``clip_pairs`` holds one (image_embedding, text_embedding) per sample.
    """
    metrics = list(metrics)
    unknown = [m for m in metrics if m not in ALL_METRICS]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}; choose from {list(ALL_METRICS)}")
    if len(candidates) != len(references):
        raise InvalidInputError("candidates and references are not aligned")
    if not candidates:
        raise InvalidInputError("nothing to score")
    if "bertscore" in metrics and token_embedder is None:
        raise ConfigError("BERTScore requested without an embedding provider")
    if "clipscore" in metrics and (clip_pairs is None or len(clip_pairs) != len(candidates)):
        raise ConfigError("CLIPScore requested without one image/text embedding pair per sample")

    cand_toks = [normalize_text(c) for c in candidates]
    ref_toks = [[normalize_text(r) for r in refs] for refs in references]
    rows: list[dict] = [{"index": i, "candidate": c} for i, c in enumerate(candidates)]

    if "bleu" in metrics:
        for row, c, refs in zip(rows, cand_toks, ref_toks):
            stats = bleu_stats(c, refs, n)
            for k in range(1, n + 1):
                row[f"bleu_{k}"] = bleu(c, refs, k)
                row[f"bleu_p{k}"] = stats.precisions[k - 1]
            row["bleu_degenerate"] = stats.degenerate
    for name, mode in (("rouge_1", 1), ("rouge_2", 2), ("rouge_l", "L")):
        if name in metrics:
            for row, c, refs in zip(rows, cand_toks, ref_toks):
                s = best_rouge(c, refs, mode)
                row[f"{name}_p"], row[f"{name}_r"], row[f"{name}_f1"] = s.precision, s.recall, s.f1
    if "cider" in metrics:
        res = cider(list(zip(cand_toks, ref_toks)), n)
        for row, s in zip(rows, res.scores):
            row["cider"] = s
    if "bertscore" in metrics:
        for row, c, refs in zip(rows, cand_toks, ref_toks):
            if not c:
                row["bertscore_p"] = row["bertscore_r"] = row["bertscore_f1"] = 0.0
                continue
            ce = token_embedder(c)
            best = max((bertscore(ce, token_embedder(r)) for r in refs if r), key=lambda s: s.f1)
            row["bertscore_p"], row["bertscore_r"], row["bertscore_f1"] = best.precision, best.recall, best.f1
    if "clipscore" in metrics:
        for row, (img, txt) in zip(rows, clip_pairs):
            s = clipscore(img, txt)
            row["clipscore"], row["clipscore_raw"] = s.score, s.raw

    aggregates = {}
    for key in rows[0]:
        if key in ("index", "candidate"):
            continue
        vals = [float(r[key]) for r in rows]
        aggregates[key] = sum(vals) / len(vals)
    params = {"metrics": metrics, "max_order": n, "bleu_weights": "uniform", "aggregation": "mean of per-sample scores"}
    return MetricReport(rows, aggregates, params, dict(config or {}))


def read_predictions(path) -> list[str]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if path.suffix == ".jsonl":
        return [json.loads(line)["caption"] for line in lines if line.strip()]
    return lines


def read_references(path) -> list[list[str]]:
    """JSONL with a ``captions`` list per line, or text with tab-separated references."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if path.suffix == ".jsonl":
        return [list(json.loads(line)["captions"]) for line in lines if line.strip()]
    return [line.split("\t") for line in lines]
