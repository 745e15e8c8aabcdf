"""Dataset model: vocabulary, corpus records with precomputed image features,
JSONL load/save, and a synthetic-corpus generator with planted
class-discriminative tokens.

One shared tokenization pipeline is used for training and for metric
references, so n-gram statistics and model inputs always agree.
"""

from __future__ import annotations

import json
import logging
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import substream

log = logging.getLogger(__name__)

SOS_TOKEN = "<sos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
RESERVED = (SOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

SPLITS = ("train", "val", "test")

SCHEMA = "vexplain-corpus"
SCHEMA_VERSION = 1

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


class Vocabulary:
    """Bijective token-string <-> index map with reserved SOS/EOS/UNK slots."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    sos = 0
    eos = 1
    unk = 2

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, words: list[str], max_len: int) -> list[int]:
        """Word list -> token ids terminated by EOS. OOV words map to UNK.

        Sequences longer than ``max_len`` (counting the final EOS) are
        truncated with EOS re-appended, with a warning.
        """
        ids = [self.index.get(w, self.unk) for w in words]
        if len(ids) + 1 > max_len:
            log.warning(
                "sequence of %d tokens exceeds max_len=%d; truncating", len(ids) + 1, max_len
            )
            ids = ids[: max_len - 1]
        ids.append(self.eos)
        return ids

    def decode(self, ids: list[int]) -> list[str]:
        """Token ids -> word list, dropping the terminating EOS."""
        words = []
        for i in ids:
            if i == self.eos:
                break
            words.append(self.tokens[i])
        return words


def check_token_sequence(vocab: Vocabulary, ids: list[int], max_len: int) -> None:
    """Validate the token-sequence convention: ends with exactly one EOS."""
    if not ids or ids[-1] != vocab.eos:
        raise ValueError("token sequence must terminate with EOS")
    if ids.count(vocab.eos) != 1:
        raise ValueError("token sequence must contain EOS exactly once")
    if len(ids) > max_len:
        raise ValueError(f"token sequence of length {len(ids)} exceeds max_len={max_len}")
    if any(i < 0 or i >= vocab.size for i in ids):
        raise ValueError("token id out of vocabulary range")


def build_vocabulary(sentences: list[list[str]], min_count: int = 1) -> Vocabulary:
    """Index tokens with count >= min_count; order by count desc, then lexicographic."""
    if not sentences:
        raise ValueError("cannot build vocabulary from an empty train set")
    counts = Counter()
    for words in sentences:
        counts.update(words)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count and tok not in RESERVED),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(list(RESERVED) + kept)


@dataclass
class Instance:
    """One image: precomputed feature vector, class label, reference sentences."""

    instance_id: str
    feature: np.ndarray
    class_label: int
    sentences: list[str]
    split: str

    def validate(self, num_classes: int, feature_dim: int) -> None:
        if self.feature.shape != (feature_dim,):
            raise ValueError(
                f"instance {self.instance_id}: feature has dimension "
                f"{self.feature.shape[0] if self.feature.ndim == 1 else self.feature.shape}, "
                f"expected {feature_dim}"
            )
        if not np.all(np.isfinite(self.feature)):
            raise ValueError(f"instance {self.instance_id}: non-finite feature")
        if not 0 <= self.class_label < num_classes:
            raise ValueError(f"instance {self.instance_id}: class {self.class_label} out of range")
        if not self.sentences or any(not tokenize(s) for s in self.sentences):
            raise ValueError(f"instance {self.instance_id}: empty sentence list or blank sentence")
        if self.split not in SPLITS:
            raise ValueError(f"instance {self.instance_id}: unknown split '{self.split}'")


@dataclass
class Corpus:
    instances: list[Instance]
    num_classes: int
    feature_dim: int
    vocabulary: Vocabulary = field(repr=False)

    def __post_init__(self):
        for inst in self.instances:
            inst.validate(self.num_classes, self.feature_dim)
        train_classes = {i.class_label for i in self.instances if i.split == "train"}
        missing = sorted(set(range(self.num_classes)) - train_classes)
        if missing:
            raise ValueError(f"classes absent from train split: {missing}")

    def split_instances(self, split: str) -> list[Instance]:
        if split not in SPLITS:
            raise ValueError(f"unknown split '{split}'")
        return [i for i in self.instances if i.split == split]


@dataclass
class TrainPair:
    """One teacher-forcing example: (feature, class, encoded sentence)."""

    instance_id: str
    feature: np.ndarray
    class_label: int
    tokens: list[int]


def teacher_pairs(corpus: Corpus, split: str, max_len: int) -> list[TrainPair]:
    """Flatten a split into per-sentence training pairs."""
    pairs = []
    for inst in corpus.split_instances(split):
        for sent in inst.sentences:
            ids = corpus.vocabulary.encode(tokenize(sent), max_len)
            pairs.append(TrainPair(inst.instance_id, inst.feature, inst.class_label, ids))
    return pairs


@dataclass
class SynthSpec:
    """Controlled corpus: each class plants unique tokens in every sentence and
    has a distinct image-feature centroid, so both text and features carry
    class signal by construction."""

    # feature_noise 2.0 leaves image-only class inference genuinely
    # imperfect, so class conditioning has signal to add
    num_classes: int = 5
    instances_per_class: int = 20
    sentences_per_instance: int = 3
    vocab_size: int = 40
    planted_per_class: int = 1
    feature_dim: int = 16
    feature_noise: float = 2.0
    min_fillers: int = 3
    max_fillers: int = 6
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1 or self.instances_per_class < 1 or self.sentences_per_instance < 1:
            raise ValueError("class, instance, and sentence counts must be positive")
        if self.planted_per_class < 1 or self.feature_dim < 1:
            raise ValueError("planted_per_class and feature_dim must be positive")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be nonnegative")
        if not 1 <= self.min_fillers <= self.max_fillers:
            raise ValueError("need 1 <= min_fillers <= max_fillers")
        if self.n_fillers < 1:
            raise ValueError(
                f"vocab_size={self.vocab_size} leaves no room for filler tokens "
                f"({len(RESERVED)} reserved + {self.num_classes * self.planted_per_class} planted)"
            )

    @property
    def n_fillers(self) -> int:
        return self.vocab_size - len(RESERVED) - self.num_classes * self.planted_per_class


def planted_tokens(spec: SynthSpec, class_label: int) -> list[str]:
    return [f"pk{class_label}" if spec.planted_per_class == 1 else f"pk{class_label}_{j}"
            for j in range(spec.planted_per_class)]


def generate_synth(spec: SynthSpec) -> Corpus:
    """Generate a planted-token corpus, deterministic under ``spec.seed``."""
    spec.validate()
    fillers = [f"f{j}" for j in range(spec.n_fillers)]
    feat_rng = substream(spec.seed, "synth-features")
    text_rng = substream(spec.seed, "synth-text")

    centroids = feat_rng.normal(0.0, 1.0, size=(spec.num_classes, spec.feature_dim))

    n_train = max(1, int(round(spec.instances_per_class * 0.6)))
    n_val = max(0, int(round(spec.instances_per_class * 0.2)))
    if n_train + n_val >= spec.instances_per_class:
        n_train = max(1, spec.instances_per_class - 2)
        n_val = 1 if spec.instances_per_class > 1 else 0

    instances = []
    for c in range(spec.num_classes):
        planted = planted_tokens(spec, c)
        for k in range(spec.instances_per_class):
            split = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
            noise = feat_rng.normal(0.0, 1.0, size=spec.feature_dim)
            feature = centroids[c] + spec.feature_noise * noise
            sentences = []
            for _ in range(spec.sentences_per_instance):
                n_fill = int(text_rng.integers(spec.min_fillers, spec.max_fillers + 1))
                words = [fillers[j] for j in text_rng.integers(0, len(fillers), size=n_fill)]
                for tok in planted:
                    pos = int(text_rng.integers(0, len(words) + 1))
                    words.insert(pos, tok)
                sentences.append(" ".join(words))
            instances.append(
                Instance(
                    instance_id=f"c{c}_i{k}",
                    feature=feature,
                    class_label=c,
                    sentences=sentences,
                    split=split,
                )
            )

    vocab = build_vocabulary(
        [tokenize(s) for i in instances if i.split == "train" for s in i.sentences],
        min_count=1,
    )
    return Corpus(instances, spec.num_classes, spec.feature_dim, vocab)


def save_corpus(corpus: Corpus, path) -> None:
    lines = [
        json.dumps(
            {
                "schema": SCHEMA,
                "version": SCHEMA_VERSION,
                "num_classes": corpus.num_classes,
                "feature_dim": corpus.feature_dim,
            },
            sort_keys=True,
        )
    ]
    for inst in corpus.instances:
        lines.append(
            json.dumps(
                {
                    "id": inst.instance_id,
                    "class": inst.class_label,
                    "feature": inst.feature.tolist(),
                    "sentences": inst.sentences,
                    "split": inst.split,
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_corpus(path, min_count: int = 1) -> Corpus:
    """Parse a JSONL corpus file; vocabulary is rebuilt from the train split."""
    raw_lines = Path(path).read_text().splitlines()
    nonempty = [(n, line) for n, line in enumerate(raw_lines, start=1) if line.strip()]
    if not nonempty:
        raise ValueError(f"{path}: empty corpus file")

    def parse(n, line):
        try:
            return json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}:{n}: malformed record: {e}") from e

    header_no, header_line = nonempty[0]
    header = parse(header_no, header_line)
    if header.get("schema") != SCHEMA:
        raise ValueError(f"{path}:{header_no}: missing or wrong schema header (expected {SCHEMA})")
    if header.get("version") != SCHEMA_VERSION:
        raise ValueError(f"{path}:{header_no}: unsupported corpus version {header.get('version')}")
    num_classes = int(header["num_classes"])
    feature_dim = int(header["feature_dim"])

    instances = []
    for n, line in nonempty[1:]:
        rec = parse(n, line)
        try:
            inst = Instance(
                instance_id=str(rec["id"]),
                feature=np.asarray(rec["feature"], dtype=np.float64),
                class_label=int(rec["class"]),
                sentences=list(rec["sentences"]),
                split=str(rec["split"]),
            )
        except (KeyError, TypeError) as e:
            raise ValueError(f"{path}:{n}: malformed record: {e}") from e
        inst.validate(num_classes, feature_dim)
        instances.append(inst)

    seen = Counter(i.instance_id for i in instances)
    dupes = [i for i, c in seen.items() if c > 1]
    if dupes:
        raise ValueError(f"{path}: duplicate instance ids: {dupes[:5]}")

    vocab = build_vocabulary(
        [tokenize(s) for i in instances if i.split == "train" for s in i.sentences],
        min_count=min_count,
    )
    return Corpus(instances, num_classes, feature_dim, vocab)
