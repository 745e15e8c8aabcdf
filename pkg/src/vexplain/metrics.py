"""Evaluation metrics: TF-IDF n-gram CIDEr, class similarity, class rank,
and sentence-classifier accuracy over generated sentences.

The CIDEr recipe is fixed here and frozen by test fixtures: n-gram orders
1..4, candidate term frequencies clipped against each reference, IDF =
ln(num_docs / doc_freq) with one document per image's reference set,
per-reference cosine averaged over references and orders, scaled by 10.
No length penalty (the gaussian-penalized variant is intentionally not
implemented).
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassifierModel, classify
from .data import Corpus, tokenize
from .generator import GeneratorModel, greedy_decode

MAX_N = 4


def ngrams(words: list[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


@dataclass
class NgramStats:
    """Document frequencies over a reference corpus; one document is the
    reference-sentence set of one image."""

    doc_freq: dict[tuple, int]
    num_docs: int

    @classmethod
    def from_documents(cls, documents: list[list[str]]) -> "NgramStats":
        if not documents:
            raise ValueError("need at least one reference document")
        df: dict[tuple, int] = defaultdict(int)
        for sentences in documents:
            seen = set()
            for sent in sentences:
                words = tokenize(sent)
                for n in range(1, MAX_N + 1):
                    seen.update(ngrams(words, n).keys())
            for g in seen:
                df[g] += 1
        return cls(doc_freq=dict(df), num_docs=len(documents))

    def idf(self, gram: tuple) -> float:
        # n-grams never seen in the reference corpus get the maximal IDF.
        return math.log(self.num_docs) - math.log(max(1.0, self.doc_freq.get(gram, 0)))


def _tfidf_vectors(words: list[str], stats: NgramStats):
    """Per-order TF-IDF vectors (as dicts) and their Euclidean norms."""
    vecs, norms = [], []
    for n in range(1, MAX_N + 1):
        v = {g: c * stats.idf(g) for g, c in ngrams(words, n).items()}
        vecs.append(v)
        norms.append(math.sqrt(sum(x * x for x in v.values())))
    return vecs, norms


def cider(candidate: str, references: list[str], stats: NgramStats) -> float:
    """Consensus score of a candidate sentence against reference sentences."""
    if not references:
        raise ValueError("cider: no reference sentences")
    cand_vecs, cand_norms = _tfidf_vectors(tokenize(candidate), stats)
    per_n = [0.0] * MAX_N
    for ref in references:
        ref_vecs, ref_norms = _tfidf_vectors(tokenize(ref), stats)
        for n in range(MAX_N):
            if cand_norms[n] == 0.0 or ref_norms[n] == 0.0:
                continue
            num = sum(
                min(val, ref_vecs[n].get(g, 0.0)) * ref_vecs[n].get(g, 0.0)
                for g, val in cand_vecs[n].items()
            )
            per_n[n] += num / (cand_norms[n] * ref_norms[n])
    return 10.0 * sum(per_n) / (MAX_N * len(references))


def class_similarity(
    candidate: str, class_id: int, pools: dict[int, list[str]], stats: NgramStats
) -> float:
    """CIDEr against the pool of all reference sentences of one class."""
    if class_id not in pools:
        raise ValueError(f"unknown class {class_id}")
    return cider(candidate, pools[class_id], stats)


def class_rank(
    candidate: str, true_class: int, pools: dict[int, list[str]], stats: NgramStats
) -> int:
    """1-based rank of the true class when classes are sorted by class
    similarity, ties ranked pessimistically (true class last)."""
    if len(pools) < 2:
        raise ValueError("class_rank needs at least two class pools")
    if true_class not in pools:
        raise ValueError(f"unknown class {true_class}")
    sims = {c: class_similarity(candidate, c, pools, stats) for c in pools}
    true_sim = sims[true_class]
    return 1 + sum(1 for c, s in sims.items() if c != true_class and s >= true_sim)


def corpus_ngram_stats(corpus: Corpus) -> NgramStats:
    return NgramStats.from_documents([inst.sentences for inst in corpus.instances])


def class_pools(corpus: Corpus) -> dict[int, list[str]]:
    pools: dict[int, list[str]] = {c: [] for c in range(corpus.num_classes)}
    for inst in corpus.instances:
        pools[inst.class_label].extend(inst.sentences)
    empty = [c for c, sents in pools.items() if not sents]
    if empty:
        raise ValueError(f"classes with no reference sentences: {empty}")
    return pools


@dataclass
class MetricRow:
    model: str
    mean_cider: float
    mean_class_similarity: float
    mean_class_rank: float
    classifier_accuracy: float
    num_instances: int


@dataclass
class MetricReport:
    """Per-model evaluation results plus per-image raw scores.

    METEOR is not reported: it needs an external synonym lexicon.
    """

    split: str
    num_classes: int
    rows: list[MetricRow]
    per_image: dict[str, list[dict]] = field(repr=False, default_factory=dict)

    def row(self, model: str) -> MetricRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    def table(self) -> str:
        header = f"{'model':<20} {'CIDEr':>8} {'ClassSim':>9} {'ClassRank':>10} {'ClsAcc':>7}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.model:<20} {r.mean_cider:>8.3f} {r.mean_class_similarity:>9.3f} "
                f"{r.mean_class_rank:>10.3f} {r.classifier_accuracy:>7.3f}"
            )
        lines.append(f"(split={self.split}, {self.num_classes} classes; "
                     "METEOR omitted: needs an external synonym lexicon)")
        return "\n".join(lines)

    def json_lines(self) -> str:
        lines = []
        for r in self.rows:
            lines.append(
                json.dumps(
                    {
                        "model": r.model,
                        "split": self.split,
                        "cider": r.mean_cider,
                        "class_similarity": r.mean_class_similarity,
                        "class_rank": r.mean_class_rank,
                        "classifier_accuracy": r.classifier_accuracy,
                        "num_instances": r.num_instances,
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"

    def per_image_lines(self) -> str:
        lines = []
        for model, recs in self.per_image.items():
            for rec in recs:
                lines.append(json.dumps({"model": model, **rec}, sort_keys=True))
        return "\n".join(lines) + "\n"


def evaluate_models(
    models: dict[str, GeneratorModel],
    corpus: Corpus,
    classifier: ClassifierModel,
    split: str = "test",
) -> MetricReport:
    """Greedy-decode every split instance under every model and score it.

    n-gram statistics and class pools are built over the full corpus so
    every class has a nonempty pool and IDF weights are shared by all
    models being compared.
    """
    stats = corpus_ngram_stats(corpus)
    pools = class_pools(corpus)
    instances = corpus.split_instances(split)
    if not instances:
        raise ValueError(f"split '{split}' is empty")

    rows = []
    per_image: dict[str, list[dict]] = {}
    for name, model in models.items():
        recs = []
        correct = 0
        for inst in instances:
            cond = model.conditioning_for(inst)
            tokens = greedy_decode(model, cond)
            sentence = " ".join(model.vocab.decode(tokens))
            pred = int(np.argmax(classify(classifier, tokens)))
            ok = pred == inst.class_label
            correct += ok
            recs.append(
                {
                    "id": inst.instance_id,
                    "class": inst.class_label,
                    "sentence": sentence,
                    "cider": cider(sentence, inst.sentences, stats),
                    "class_similarity": class_similarity(
                        sentence, inst.class_label, pools, stats
                    ),
                    "class_rank": class_rank(sentence, inst.class_label, pools, stats),
                    "classifier_correct": bool(ok),
                }
            )
        n = len(recs)
        rows.append(
            MetricRow(
                model=name,
                mean_cider=sum(r["cider"] for r in recs) / n,
                mean_class_similarity=sum(r["class_similarity"] for r in recs) / n,
                mean_class_rank=sum(r["class_rank"] for r in recs) / n,
                classifier_accuracy=correct / n,
                num_instances=n,
            )
        )
        per_image[name] = recs
    return MetricReport(split=split, num_classes=corpus.num_classes, rows=rows, per_image=per_image)
