"""Corpus ingestion, line-by-line batching, MLM masking, sentence
splitting, and the deterministic synthetic corpus used for desk-scale
training runs."""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .bpe import CLS_ID, MASK_ID, N_SPECIALS, PAD_ID, SEP_ID, SPECIAL_IDS
from .errors import ValidationError

IGNORE_LABEL = -100

SENTENCE_DELIMITERS = ("。", ".", "！", "!", "？", "?")


@dataclass
class MaskedBatch:
    """Corrupted inputs plus recovery labels; labels hold the original id
    at corrupted positions and IGNORE_LABEL everywhere else."""

    input_ids: np.ndarray
    labels: np.ndarray
    pad_mask: np.ndarray


def line_by_line_chunks(lines, tokenizer, max_len, add_cls_sep=True):
    """Tokenize each line independently, discarding tokens beyond max_len.

    Nothing carries over between lines; short lines come back unpadded and
    empty lines are skipped.
    """
    if add_cls_sep and max_len < 3:
        raise ValidationError(f"max_len must be >= 3 with CLS/SEP, got {max_len}")
    out = []
    budget = max_len - 2 if add_cls_sep else max_len
    for line in lines:
        if not line.strip():
            continue
        ids = tokenizer.encode(line)
        if not ids:
            continue
        ids = ids[:budget]
        if add_cls_sep:
            ids = [CLS_ID] + ids + [SEP_ID]
        out.append(ids)
    return out


def pad_batch(id_lists, max_len=None):
    """Stack id lists into [B, L] with PAD fill; returns (ids, pad_mask)."""
    if not id_lists:
        raise ValidationError("pad_batch: empty batch")
    width = max(len(x) for x in id_lists)
    if max_len is not None:
        width = min(width, max_len)
    ids = np.full((len(id_lists), width), PAD_ID, dtype=np.int64)
    for i, x in enumerate(id_lists):
        x = x[:width]
        ids[i, : len(x)] = x
    return ids, ids != PAD_ID


def apply_mlm_mask(batch_ids, p, rng, vocab_size, splits=(0.8, 0.1, 0.1)):
    """Corrupt each non-special token independently with probability p.

    Selected tokens become MASK / a random non-special token / stay put
    with the given split. Special tokens (including padding) are never
    touched.
    """
    if not 0 <= p <= 1:
        raise ValidationError(f"mask probability must be in [0, 1], got {p}")
    if abs(sum(splits) - 1.0) > 1e-9:
        raise ValidationError(f"mask/random/keep splits must sum to 1, got {splits}")
    ids = np.asarray(batch_ids, dtype=np.int64)
    special = np.isin(ids, SPECIAL_IDS)
    selected = (rng.random(ids.shape) < p) & ~special
    labels = np.where(selected, ids, IGNORE_LABEL)
    out = ids.copy()
    branch = rng.random(ids.shape)
    to_mask = selected & (branch < splits[0])
    to_random = selected & (branch >= splits[0]) & (branch < splits[0] + splits[1])
    out[to_mask] = MASK_ID
    n_rand = int(to_random.sum())
    if n_rand:
        out[to_random] = rng.integers(N_SPECIALS, vocab_size, size=n_rand)
    return MaskedBatch(out, labels, ids != PAD_ID)


def split_sentences(text, delimiters=SENTENCE_DELIMITERS):
    """Split on terminal punctuation, keeping each delimiter with its
    sentence; whitespace-only fragments are dropped."""
    dset = set(delimiters)
    sentences, buf = [], []
    for ch in text:
        buf.append(ch)
        if ch in dset:
            frag = "".join(buf).strip()
            if frag:
                sentences.append(frag)
            buf = []
    frag = "".join(buf).strip()
    if frag:
        sentences.append(frag)
    return sentences


def read_corpus(path):
    """One document per line; .jsonl files use their "text" field."""
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if str(path).endswith(".jsonl"):
                docs.append(json.loads(line)["text"])
            else:
                docs.append(line)
    return docs


def write_corpus(docs, path):
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(doc.replace("\n", " ") + "\n")


def load_miracl_jsonl(path, limit=None):
    """Load retrieval instances: {query, positive_passages[{text}], ...}."""
    instances = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            instances.append(
                {
                    "query": row.get("query", ""),
                    "positive_passages": [{"text": p["text"]} for p in row.get("positive_passages", [])],
                    "negative_passages": [{"text": p["text"]} for p in row.get("negative_passages", [])],
                }
            )
            if limit is not None and len(instances) >= limit:
                break
    return instances


# --- synthetic corpus -------------------------------------------------------

_SYLLABLES = (
    "ka", "mo", "ri", "ta", "su", "ne", "lo", "vi", "ze", "pu",
    "da", "shi", "ko", "ba", "yu", "ren", "mi", "to", "ha", "gu",
)

_VALUE_WORDS = (
    "amber", "azure", "coral", "ivory", "jade", "umber", "onyx", "pearl",
    "slate", "teal", "rust", "plum", "sand", "moss", "fog", "ash",
    "gold", "lilac", "mint", "rose", "sepia", "snow", "tide", "ember",
)

_FILLER_TEMPLATES = (
    "the {a} sits beside the {b}.",
    "every {a} drifts past the {b} at dusk.",
    "a quiet {a} hums near the {b}.",
    "the {a} and the {b} share one lantern.",
    "no {a} ever forgets the {b}.",
    "under the bridge the {a} watches the {b}.",
    "{a}は{b}のそばにある。",
    "{a}が{b}を見ている。",
)

FACT_TEMPLATE = "{x} maps to {y}."


@dataclass
class CorpusSpec:
    """Templated factual corpus with a declared token-length distribution.

    length_bins are (low, high) token targets per document; bin_weights is
    the fraction of documents aimed at each bin. tokens_per_sentence is the
    calibration constant turning a token budget into a sentence count.
    """

    n_docs: int = 2000
    n_facts: int = 64
    n_entities: int = 160
    fact_rate: float = 0.35
    length_bins: tuple = ((10, 54), (74, 118), (146, 236), (296, 472))
    bin_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    tokens_per_sentence: float = 8.0

    def __post_init__(self):
        if self.n_facts > self.n_entities:
            raise ValidationError("n_facts cannot exceed n_entities")
        if len(self.length_bins) != len(self.bin_weights):
            raise ValidationError("length_bins and bin_weights must align")
        if abs(sum(self.bin_weights) - 1.0) > 1e-9:
            raise ValidationError("bin_weights must sum to 1")


def _entities(spec, rng):
    names = set()
    out = []
    while len(out) < spec.n_entities:
        n_syll = 2 if rng.random() < 0.7 else 3
        name = "".join(_SYLLABLES[rng.integers(len(_SYLLABLES))] for _ in range(n_syll))
        if name not in names:
            names.add(name)
            out.append(name)
    return out


def fact_table(spec, seed):
    """The (entity, value) pairs stated by the corpus; index-stable."""
    rng = np.random.default_rng((seed, 11))
    entities = _entities(spec, rng)
    values = [_VALUE_WORDS[rng.integers(len(_VALUE_WORDS))] for _ in range(spec.n_facts)]
    return list(zip(entities[: spec.n_facts], values)), entities


def synth_corpus(spec, seed):
    """Deterministic document stream: templated facts amid filler prose."""
    facts, entities = fact_table(spec, seed)
    rng = np.random.default_rng((seed, 13))
    docs = []
    bins = np.asarray(spec.length_bins, dtype=float)
    weights = np.asarray(spec.bin_weights)
    for _ in range(spec.n_docs):
        b = rng.choice(len(bins), p=weights)
        lo, hi = bins[b]
        target = rng.uniform(lo, hi)
        n_sentences = max(1, int(round(target / spec.tokens_per_sentence)))
        sentences = []
        for _ in range(n_sentences):
            if rng.random() < spec.fact_rate:
                x, y = facts[rng.integers(len(facts))]
                sentences.append(FACT_TEMPLATE.format(x=x, y=y))
            else:
                t = _FILLER_TEMPLATES[rng.integers(len(_FILLER_TEMPLATES))]
                a = entities[rng.integers(len(entities))]
                bword = entities[rng.integers(len(entities))]
                sentences.append(t.format(a=a, b=bword))
        docs.append(" ".join(sentences))
    return docs


def long_doc_spec(spec):
    """Variant spec putting all mass on the longest bin (context-extension
    held-out documents)."""
    w = tuple(0.0 for _ in spec.bin_weights[:-1]) + (1.0,)
    return replace(spec, bin_weights=w)
