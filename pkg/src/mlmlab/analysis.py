"""Checkpoint-analysis suite: pseudo-perplexity vs. length, alignment and
uniformity of pooled embeddings, similarity histograms, fill-mask
prediction, retrieval-task construction and scoring, and the edit-distance
and Jaccard heuristic baselines."""

from dataclasses import dataclass, field

import numpy as np

from .bpe import CLS_ID, SEP_ID
from .data import split_sentences
from .errors import ValidationError

DESK_PPPL_BINS = ((0, 64), (64, 128), (128, 256), (256, 512))
FULL_PPPL_BINS = ((0, 1024), (1024, 2048), (2048, 4096), (4096, 8192))


@dataclass
class PairSet:
    """Relevance-linked positive pairs plus independently drawn random pairs."""

    positive: list
    random: list


@dataclass
class RetrievalTask:
    queries: list
    corpus: list
    relevance: dict
    skipped: int = 0


@dataclass
class PseudoPplReport:
    sequences: list = field(default_factory=list)  # (length, P)
    bins: list = field(default_factory=list)  # {lo, hi, count, mean_p}
    n_samples: int = 0
    per_bin: int = 0


@dataclass
class FillMaskPrediction:
    token: str
    token_id: int
    probability: float


class EmbedFunction:
    """Text -> unit vector through a frozen checkpoint with mean pooling.

    Inputs longer than the model's maximum length are truncated.
    """

    def __init__(self, model, tokenizer, normalize=True, max_len=None):
        self.model = model
        self.tokenizer = tokenizer
        self.normalize = normalize
        self.max_len = max_len or model.config.max_seq_len

    def encode_ids(self, text):
        ids = [CLS_ID] + self.tokenizer.encode(text) + [SEP_ID]
        return ids[: self.max_len]

    def embed_many(self, texts, batch_size=64):
        from .data import pad_batch

        out = np.empty((len(texts), self.model.config.hidden_dim), dtype=np.float32)
        for start in range(0, len(texts), batch_size):
            chunk = texts[start : start + batch_size]
            ids, pad = pad_batch([self.encode_ids(t) for t in chunk])
            out[start : start + len(chunk)] = self.model.pooled(ids, pad, normalize=self.normalize)
        return out

    def __call__(self, text):
        return self.embed_many([text])[0]


def _embed_all(f, texts):
    if hasattr(f, "embed_many"):
        return np.asarray(f.embed_many(list(texts)), dtype=np.float64)
    return np.stack([np.asarray(f(t), dtype=np.float64) for t in texts])


# --- pseudo-perplexity ------------------------------------------------------


def pseudo_perplexity(model, token_ids, n_samples=100, rng=None):
    """exp of the mean single-position MLM loss over sampled positions.

    Each sample masks exactly one non-special position (with replacement)
    and scores the original token there.
    """
    if n_samples < 1:
        raise ValidationError(f"n_samples must be >= 1, got {n_samples}")
    rng = rng or np.random.default_rng(0)
    ids = np.asarray(token_ids, dtype=np.int64)
    specials = set(model.special_ids)
    cand = np.asarray([i for i, t in enumerate(ids) if int(t) not in specials])
    if cand.size == 0:
        raise ValidationError("sequence contains only special tokens")
    picks = cand[np.asarray(rng.integers(0, cand.size, size=n_samples))]
    losses = np.empty(n_samples, dtype=np.float64)
    chunk = max(1, min(16, n_samples))
    for start in range(0, n_samples, chunk):
        pos = picks[start : start + chunk]
        batch = np.tile(ids, (len(pos), 1))
        batch[np.arange(len(pos)), pos] = model.mask_id
        z = np.asarray(model.logits_at(batch, pos), dtype=np.float64)
        zmax = z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
        losses[start : start + len(pos)] = lse - z[np.arange(len(pos)), ids[pos]]
    return float(np.exp(losses.mean()))


def binned_pseudo_ppl(corpus, tokenizer, model, bins=DESK_PPPL_BINS, per_bin=32, n_samples=100, rng=None):
    """Stratify documents into token-length bins and average P per bin.

    Bins with no candidate documents come back empty rather than erroring.
    The model is evaluated at the longest bin edge even if that exceeds its
    trained maximum (rotary positions extrapolate).
    """
    rng = rng or np.random.default_rng(0)
    eval_len = int(max(hi for _, hi in bins)) + 2
    model = model.with_max_len(max(model.config.max_seq_len, eval_len))
    by_bin = [[] for _ in bins]
    encoded = []
    for doc in corpus:
        ids = tokenizer.encode(doc)
        encoded.append(ids)
        n = len(ids)
        for b, (lo, hi) in enumerate(bins):
            if (n > lo or (lo == 0 and n > 0)) and n <= hi:
                by_bin[b].append(len(encoded) - 1)
                break
    report = PseudoPplReport(n_samples=n_samples, per_bin=per_bin)
    for b, (lo, hi) in enumerate(bins):
        members = by_bin[b]
        if not members:
            report.bins.append({"lo": int(lo), "hi": int(hi), "count": 0, "mean_p": None})
            continue
        members = list(members)
        if len(members) > per_bin:
            members = [members[i] for i in rng.choice(len(members), size=per_bin, replace=False)]
        ps = []
        for idx in members:
            ids = [CLS_ID] + encoded[idx] + [SEP_ID]
            p = pseudo_perplexity(model, ids, n_samples=n_samples, rng=rng)
            ps.append(p)
            report.sequences.append({"length": len(encoded[idx]), "p": p, "bin": b})
        report.bins.append({"lo": int(lo), "hi": int(hi), "count": len(ps), "mean_p": float(np.mean(ps))})
    return report


# --- alignment / uniformity -------------------------------------------------


def alignment(pos_pairs, f):
    """Mean squared embedding distance over positive pairs (lower = tighter)."""
    if not pos_pairs:
        raise ValidationError("alignment needs at least one positive pair")
    left = _embed_all(f, [a for a, _ in pos_pairs])
    right = _embed_all(f, [b for _, b in pos_pairs])
    return float(((left - right) ** 2).sum(axis=1).mean())


def uniformity(samples, f, rng=None, exact_limit=2000, n_subsample=1_000_000):
    """log E exp(-2 ||f(x)-f(y)||^2) over i.i.d. pairs.

    Uses all ordered pairs (including x = y) up to exact_limit samples,
    otherwise a seeded subsample of n_subsample pairs.
    """
    if len(samples) < 2:
        raise ValidationError("uniformity needs at least two samples")
    emb = _embed_all(f, samples)
    n = emb.shape[0]
    if n <= exact_limit:
        sq = (emb * emb).sum(axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
        np.maximum(d2, 0.0, out=d2)
        vals = np.exp(-2.0 * d2)
        return float(np.log(vals.mean()))
    rng = rng or np.random.default_rng(0)
    i = rng.integers(0, n, size=n_subsample)
    j = rng.integers(0, n, size=n_subsample)
    d2 = ((emb[i] - emb[j]) ** 2).sum(axis=1)
    return float(np.log(np.exp(-2.0 * d2).mean()))


def similarity_histogram(pairs, f, n_bins=50):
    """Cosine-similarity histogram over [-1, 1]; returns (counts, edges)."""
    if not pairs:
        return np.zeros(n_bins, dtype=int), np.linspace(-1.0, 1.0, n_bins + 1)
    left = _embed_all(f, [a for a, _ in pairs])
    right = _embed_all(f, [b for _, b in pairs])
    sims = np.clip((left * right).sum(axis=1), -1.0, 1.0)
    counts, edges = np.histogram(sims, bins=n_bins, range=(-1.0, 1.0))
    return counts, edges


def random_pairs(texts, n, rng):
    """n i.i.d. text pairs (independent draws; x may equal y)."""
    texts = list(texts)
    i = rng.integers(0, len(texts), size=n)
    j = rng.integers(0, len(texts), size=n)
    return [(texts[a], texts[b]) for a, b in zip(i, j)]


# --- retrieval --------------------------------------------------------------


def build_retrieval_task(instances, rng=None):
    """Split positive passages into sentences; the first becomes a query,
    the second its relevant corpus entry (or a random distinct pair when an
    rng is given). Instances without two sentences are skipped."""
    queries, corpus, relevance = [], [], {}
    skipped = 0
    for inst in instances:
        sentences = []
        for passage in inst.get("positive_passages", ()):
            sentences.extend(split_sentences(passage["text"]))
        if len(sentences) < 2:
            skipped += 1
            continue
        if rng is None:
            q, c = sentences[0], sentences[1]
        else:
            i, j = rng.choice(len(sentences), size=2, replace=False)
            q, c = sentences[int(i)], sentences[int(j)]
        relevance[len(queries)] = len(corpus)
        queries.append(q)
        corpus.append(c)
    if not queries:
        raise ValidationError("no instance produced a usable positive pair")
    return RetrievalTask(queries=queries, corpus=corpus, relevance=relevance, skipped=skipped)


def retrieval_scores(similarity, relevance, k=10):
    """Recall@k and MRR@k with stable tie-break by corpus index."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    s = np.asarray(similarity)
    if s.ndim != 2:
        raise ValidationError(f"similarity must be a 2-D matrix, got shape {s.shape}")
    nq, nc = s.shape
    for q, c in relevance.items():
        if not (0 <= q < nq and 0 <= c < nc):
            raise ValidationError(f"relevance entry ({q}, {c}) outside matrix {s.shape}")
    order = np.argsort(-s, axis=1, kind="stable")
    recall_hits = 0
    rr_sum = 0.0
    for q, rel in relevance.items():
        rank = int(np.nonzero(order[q] == rel)[0][0]) + 1
        if rank <= k:
            recall_hits += 1
            rr_sum += 1.0 / rank
    nq_rel = len(relevance)
    return recall_hits / nq_rel, rr_sum / nq_rel


def embedding_similarity_matrix(task, f):
    q = _embed_all(f, task.queries)
    c = _embed_all(f, task.corpus)
    return q @ c.T


# --- heuristic baselines ----------------------------------------------------


def levenshtein(a, b):
    """Character-level edit distance (two-row dynamic program)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[len(b)]


def edit_distance_sim(a, b):
    """1 - dist / max(len); two empty strings count as identical."""
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def jaccard_sim(a, b):
    """Character-unigram set overlap; two empty strings count as identical."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def levenshtein_matrix(queries, corpus):
    """Edit distances of every query against every corpus string, vectorized
    across the corpus axis (row DP with a prefix-min for insertions)."""
    nc = len(corpus)
    maxlen = max((len(c) for c in corpus), default=0)
    chars = np.full((nc, maxlen), -1, dtype=np.int32)
    lens = np.empty(nc, dtype=np.int64)
    for i, c in enumerate(corpus):
        lens[i] = len(c)
        if c:
            chars[i, : len(c)] = np.frombuffer(c.encode("utf-32-le"), dtype=np.uint32).astype(np.int32)
    out = np.empty((len(queries), nc), dtype=np.int32)
    col = np.arange(maxlen + 1, dtype=np.int32)
    for qi, q in enumerate(queries):
        qa = np.frombuffer(q.encode("utf-32-le"), dtype=np.uint32).astype(np.int32) if q else np.empty(0, np.int32)
        prev = np.broadcast_to(col, (nc, maxlen + 1)).copy()
        for i in range(1, len(qa) + 1):
            cost = (chars != qa[i - 1]).astype(np.int32)
            cand = np.minimum(prev[:, :-1] + cost, prev[:, 1:] + 1)
            # dp[i][j] = j + min_{j' <= j} e[j'] with e from the candidates
            e = np.empty_like(prev)
            e[:, 0] = i
            e[:, 1:] = cand - col[1:][None, :]
            np.minimum.accumulate(e, axis=1, out=e)
            prev = e + col[None, :]
        out[qi] = prev[np.arange(nc), lens]
    return out


def edit_similarity_matrix(queries, corpus):
    dist = levenshtein_matrix(queries, corpus).astype(np.float64)
    qlen = np.asarray([len(q) for q in queries], dtype=np.float64)[:, None]
    clen = np.asarray([len(c) for c in corpus], dtype=np.float64)[None, :]
    denom = np.maximum(np.maximum(qlen, clen), 1.0)
    sims = 1.0 - dist / denom
    both_empty = (qlen == 0) & (clen == 0)
    sims[both_empty] = 1.0
    return sims


def jaccard_similarity_matrix(queries, corpus):
    universe = sorted({ch for t in list(queries) + list(corpus) for ch in t})
    index = {ch: i for i, ch in enumerate(universe)}

    def presence(texts):
        m = np.zeros((len(texts), max(1, len(universe))), dtype=np.float32)
        for i, t in enumerate(texts):
            for ch in set(t):
                m[i, index[ch]] = 1.0
        return m

    q, c = presence(queries), presence(corpus)
    inter = q @ c.T
    union = q.sum(axis=1)[:, None] + c.sum(axis=1)[None, :] - inter
    sims = np.divide(inter, union, out=np.ones_like(inter), where=union > 0)
    return sims


# --- fill-mask and length histogram ----------------------------------------


def fill_mask(model, tokenizer, text, top_k=5, marker="[MASK]"):
    """Rank vocabulary candidates for the single masked slot in text."""
    n_markers = text.count(marker)
    if n_markers != 1:
        raise ValidationError(f"expected exactly one {marker!r} marker, found {n_markers}")
    prefix, suffix = text.split(marker)
    ids = [CLS_ID] + tokenizer.encode(prefix) + [tokenizer.mask_id] + tokenizer.encode(suffix) + [SEP_ID]
    mask_pos = 1 + len(tokenizer.encode(prefix))
    if len(ids) > model.config.max_seq_len:
        ids = ids[: model.config.max_seq_len]
        if mask_pos >= len(ids):
            raise ValidationError("mask position falls beyond the model's maximum length")
    z = np.asarray(model.logits_at(np.asarray([ids]), np.asarray([mask_pos]))[0], dtype=np.float64)
    z -= z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")[:top_k]
    return [FillMaskPrediction(tokenizer.token_text(int(i)), int(i), float(probs[i])) for i in order]


def length_histogram(corpus, tokenizer, bins=DESK_PPPL_BINS):
    """Token counts per document, histogrammed into (lo, hi] bins.

    The first bin also admits length-lo sequences; anything beyond the last
    edge lands in the last bin so counts always sum to the corpus size.
    """
    counts = np.zeros(len(bins), dtype=np.int64)
    for doc in corpus:
        n = len(tokenizer.encode(doc))
        placed = False
        for b, (lo, hi) in enumerate(bins):
            if (n > lo or (lo == 0 and n >= 0)) and n <= hi:
                counts[b] += 1
                placed = True
                break
        if not placed:
            counts[-1] += 1
    return counts
