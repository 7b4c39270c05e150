"""Corpus ingestion and per-domain sufficient statistics.

Each text domain is reduced to the three signals the affinity metrics
consume: a pooled unigram+bigram token distribution, the unigram
vocabulary set, and a mean document embedding. Embeddings come from
seeded signed feature hashing (optionally tf-idf weighted), so the whole
pipeline is deterministic and dependency-free; precomputed embeddings can
be imported instead when a real sentence encoder is available.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import InputError, ParameterError, ParseError, StatisticsError

_PUNCT_TABLE = {ord(c): " " for c in "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~"}

# Key used to join bigram tokens; safe because tokens are whitespace-split
# and therefore never contain a space themselves.
_BIGRAM_SEP = " "


@dataclass(frozen=True)
class TokenizerConfig:
    """Deterministic tokenization rules: same config + text => same tokens."""

    lowercase: bool = True
    strip_punct: bool = True
    max_tokens_per_doc: int | None = None

    def __post_init__(self):
        if self.max_tokens_per_doc is not None and self.max_tokens_per_doc < 1:
            raise ParameterError("max_tokens_per_doc must be positive or None")


@dataclass(frozen=True)
class EmbeddingConfig:
    """Seeded signed-feature-hashing embedder settings."""

    dim: int = 256
    hash_seed: int = 0
    weighting: str = "tf-idf"

    def __post_init__(self):
        if self.dim < 2:
            raise ParameterError(f"embedding dim must be >= 2, got {self.dim}")
        if self.weighting not in ("tf", "tf-idf"):
            raise ParameterError(f"weighting must be 'tf' or 'tf-idf', got {self.weighting!r}")


@dataclass(frozen=True)
class DomainCorpus:
    """Raw documents for one labelled domain."""

    domain_id: str
    documents: tuple[str, ...]

    def __post_init__(self):
        if not self.domain_id:
            raise InputError("domain_id must be non-empty")
        object.__setattr__(self, "documents", tuple(self.documents))
        if len(self.documents) < 1:
            raise InputError(f"domain {self.domain_id!r} has no documents")

    @property
    def n_docs(self) -> int:
        return len(self.documents)


@dataclass(frozen=True)
class TokenDistribution:
    """Probability mass over unigram and adjacent-bigram keys.

    Bigram keys are the two tokens joined by a single space; unigram keys
    never contain a space, so the two key families cannot collide.
    """

    probs: dict[str, float]

    def __post_init__(self):
        total = 0.0
        for key, mass in self.probs.items():
            if mass <= 0.0:
                raise StatisticsError(f"non-positive mass for key {key!r}")
            total += mass
        if abs(total - 1.0) > 1e-9:
            raise StatisticsError(f"masses sum to {total}, expected 1 within 1e-9")

    @property
    def support_size(self) -> int:
        return len(self.probs)

    def unigram_keys(self) -> set[str]:
        return {k for k in self.probs if _BIGRAM_SEP not in k}


@dataclass(frozen=True)
class DomainStats:
    """Sufficient statistics for one domain, as consumed by the affinity layer."""

    domain_id: str
    distribution: TokenDistribution
    vocab: frozenset[str]
    mean_embedding: np.ndarray
    n_docs: int

    def __post_init__(self):
        object.__setattr__(self, "vocab", frozenset(self.vocab))
        emb = np.asarray(self.mean_embedding, dtype=float)
        emb.setflags(write=False)
        object.__setattr__(self, "mean_embedding", emb)
        if not self.vocab <= self.distribution.unigram_keys():
            raise StatisticsError("vocab must be a subset of the distribution's unigram keys")

    @property
    def dim(self) -> int:
        return int(self.mean_embedding.shape[0])


def tokenize(text: str, cfg: TokenizerConfig | None = None) -> list[str]:
    """Split text on whitespace after the configured normalizations."""
    cfg = cfg or TokenizerConfig()
    if cfg.lowercase:
        text = text.lower()
    if cfg.strip_punct:
        text = text.translate(_PUNCT_TABLE)
    tokens = text.split()
    if cfg.max_tokens_per_doc is not None:
        tokens = tokens[: cfg.max_tokens_per_doc]
    return tokens


@lru_cache(maxsize=1 << 18)
def _hash64(token: str, seed: int) -> int:
    digest = hashlib.blake2b(
        token.encode("utf-8"),
        digest_size=8,
        key=seed.to_bytes(8, "little", signed=True),
    ).digest()
    return int.from_bytes(digest, "little")


def embed_document(
    tokens: Sequence[str],
    cfg: EmbeddingConfig | None = None,
    doc_freq: Mapping[str, int] | None = None,
    total_docs: int | None = None,
) -> np.ndarray:
    """Signed feature-hashed bag-of-tokens vector, L2-normalized unless zero.

    With weighting 'tf-idf' the counts are scaled by a smoothed inverse
    document frequency computed from `doc_freq` / `total_docs`; when those
    are not supplied the weighting degrades to plain term frequency.
    """
    cfg = cfg or EmbeddingConfig()
    vec = np.zeros(cfg.dim, dtype=float)
    if not tokens:
        return vec
    use_idf = (
        cfg.weighting == "tf-idf" and doc_freq is not None and total_docs is not None and total_docs > 0
    )
    for token, count in Counter(tokens).items():
        weight = float(count)
        if use_idf:
            # Ratio form keeps the weighting invariant under replicating
            # the whole corpus; unseen tokens count as frequency one.
            df = max(doc_freq.get(token, 0), 1)
            weight *= np.log(total_docs / df) + 1.0
        h = _hash64(token, cfg.hash_seed)
        sign = 1.0 if h & (1 << 63) else -1.0
        idx = (h & ((1 << 63) - 1)) % cfg.dim
        vec[idx] += sign * weight
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


def document_frequencies(
    corpora: Iterable[DomainCorpus], tok: TokenizerConfig | None = None
) -> tuple[Counter, int]:
    """Document frequency of each token across every document of the run."""
    tok = tok or TokenizerConfig()
    df: Counter = Counter()
    total = 0
    for corpus in corpora:
        for doc in corpus.documents:
            total += 1
            df.update(set(tokenize(doc, tok)))
    return df, total


def compute_domain_stats(
    corpus: DomainCorpus,
    tok: TokenizerConfig | None = None,
    emb: EmbeddingConfig | None = None,
    *,
    doc_freq: Mapping[str, int] | None = None,
    total_docs: int | None = None,
    precomputed: Mapping[int, np.ndarray] | None = None,
    ngram_pooling: str = "events",
) -> DomainStats:
    """Reduce one corpus to its DomainStats.

    Unigram and bigram events share a single normalized distribution when
    `ngram_pooling` is 'events'; with 'split' each family gets half the
    total mass (all of it if the corpus has no bigrams). `precomputed`
    maps document index to an externally supplied embedding and bypasses
    the hashing embedder for those documents.
    """
    tok = tok or TokenizerConfig()
    emb = emb or EmbeddingConfig()
    if ngram_pooling not in ("events", "split"):
        raise ParameterError(f"ngram_pooling must be 'events' or 'split', got {ngram_pooling!r}")
    if emb.weighting == "tf-idf" and doc_freq is None:
        # Standalone call: fall back to this corpus's own document frequencies.
        doc_freq, total_docs = document_frequencies([corpus], tok)

    token_docs = [tokenize(doc, tok) for doc in corpus.documents]
    if all(len(t) == 0 for t in token_docs):
        raise StatisticsError(
            f"every document of domain {corpus.domain_id!r} tokenizes to empty"
        )

    unigrams: Counter = Counter()
    bigrams: Counter = Counter()
    for tokens in token_docs:
        unigrams.update(tokens)
        bigrams.update(
            _BIGRAM_SEP.join(pair) for pair in zip(tokens, tokens[1:])
        )

    probs: dict[str, float] = {}
    if ngram_pooling == "events":
        total_events = sum(unigrams.values()) + sum(bigrams.values())
        for key, count in unigrams.items():
            probs[key] = count / total_events
        for key, count in bigrams.items():
            probs[key] = count / total_events
    else:
        uni_total = sum(unigrams.values())
        bi_total = sum(bigrams.values())
        uni_mass = 1.0 if bi_total == 0 else 0.5
        for key, count in unigrams.items():
            probs[key] = uni_mass * count / uni_total
        if bi_total:
            for key, count in bigrams.items():
                probs[key] = 0.5 * count / bi_total

    embeddings = []
    for i, tokens in enumerate(token_docs):
        if precomputed is not None and i in precomputed:
            vec = np.asarray(precomputed[i], dtype=float)
        else:
            vec = embed_document(tokens, emb, doc_freq=doc_freq, total_docs=total_docs)
        embeddings.append(vec)
    dims = {e.shape[0] for e in embeddings}
    if len(dims) != 1:
        raise InputError(f"inconsistent embedding dimensions in domain {corpus.domain_id!r}: {sorted(dims)}")
    mean_embedding = np.mean(np.stack(embeddings), axis=0)

    return DomainStats(
        domain_id=corpus.domain_id,
        distribution=TokenDistribution(probs),
        vocab=frozenset(unigrams),
        mean_embedding=mean_embedding,
        n_docs=corpus.n_docs,
    )


def bootstrap_centroid_deviation(
    corpus: DomainCorpus,
    emb: EmbeddingConfig | None = None,
    n_boot: int = 200,
    seed: int = 0,
    tok: TokenizerConfig | None = None,
    precomputed: Mapping[int, np.ndarray] | None = None,
) -> tuple[float, float]:
    """95% percentile interval of the centroid's bootstrap L2 deviation.

    Resamples documents with replacement `n_boot` times and measures the
    distance between each resampled centroid and the full-corpus centroid.
    """
    if n_boot < 10:
        raise ParameterError(f"n_boot must be >= 10, got {n_boot}")
    tok = tok or TokenizerConfig()
    emb = emb or EmbeddingConfig()
    doc_freq, total_docs = document_frequencies([corpus], tok)
    vectors = []
    for i, doc in enumerate(corpus.documents):
        if precomputed is not None and i in precomputed:
            vectors.append(np.asarray(precomputed[i], dtype=float))
        else:
            vectors.append(
                embed_document(tokenize(doc, tok), emb, doc_freq=doc_freq, total_docs=total_docs)
            )
    matrix = np.stack(vectors)
    n = matrix.shape[0]
    if n == 1:
        warnings.warn(
            f"domain {corpus.domain_id!r} has a single document; deviation interval is [0, 0]",
            stacklevel=2,
        )
        return (0.0, 0.0)
    centroid = matrix.mean(axis=0)
    rng = np.random.default_rng(seed)
    deviations = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n, size=n)
        deviations[b] = float(np.linalg.norm(matrix[idx].mean(axis=0) - centroid))
    lo, hi = np.percentile(deviations, [2.5, 97.5])
    return (float(lo), float(hi))


def load_corpus(source: str | Path, fmt: str = "auto") -> list[DomainCorpus]:
    """Load corpora from a per-domain directory tree or a JSONL file.

    Directory layout: `<source>/<domain_id>/*.txt`, one document per file.
    JSONL: one `{"domain": str, "text": str}` record per line.
    """
    path = Path(source)
    if not path.exists():
        raise InputError(f"corpus source does not exist: {path}")
    if fmt == "auto":
        fmt = "per-domain-directory" if path.is_dir() else "jsonl"
    if fmt == "per-domain-directory":
        return _load_domain_directories(path)
    if fmt == "jsonl":
        return _load_jsonl(path)
    raise InputError(f"unknown corpus format {fmt!r}")


def _load_domain_directories(root: Path) -> list[DomainCorpus]:
    domain_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not domain_dirs:
        raise InputError(f"no domain subdirectories under {root}")
    corpora = []
    for domain_dir in domain_dirs:
        files = sorted(domain_dir.glob("*.txt"))
        if not files:
            raise InputError(f"domain directory {domain_dir} contains no .txt files")
        docs = tuple(f.read_text(encoding="utf-8") for f in files)
        corpora.append(DomainCorpus(domain_id=domain_dir.name, documents=docs))
    return corpora


def _load_jsonl(path: Path) -> list[DomainCorpus]:
    by_domain: dict[str, list[str]] = {}
    n_records = 0
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path=str(path), line=lineno) from exc
            if not isinstance(record, dict):
                raise ParseError("record is not an object", path=str(path), line=lineno)
            for key in ("domain", "text"):
                if key not in record:
                    raise ParseError(f"record lacks required field {key!r}", path=str(path), line=lineno)
                if not isinstance(record[key], str):
                    raise ParseError(f"field {key!r} must be a string", path=str(path), line=lineno)
            by_domain.setdefault(record["domain"], []).append(record["text"])
            n_records += 1
    if n_records == 0:
        raise InputError(f"no records in {path}")
    return [DomainCorpus(domain_id=d, documents=tuple(docs)) for d, docs in by_domain.items()]


def load_precomputed_embeddings(path: str | Path) -> dict[str, dict[int, np.ndarray]]:
    """Read an embedding-import JSONL of `{"domain", "doc_index", "vector"}` records."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"embedding file does not exist: {path}")
    out: dict[str, dict[int, np.ndarray]] = {}
    dim: int | None = None
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", path=str(path), line=lineno) from exc
            for key in ("domain", "doc_index", "vector"):
                if key not in record:
                    raise ParseError(f"record lacks required field {key!r}", path=str(path), line=lineno)
            vec = np.asarray(record["vector"], dtype=float)
            if vec.ndim != 1:
                raise ParseError("vector must be a flat list of floats", path=str(path), line=lineno)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ParseError(
                    f"vector dimension {vec.shape[0]} differs from earlier {dim}",
                    path=str(path),
                    line=lineno,
                )
            out.setdefault(record["domain"], {})[int(record["doc_index"])] = vec
    if not out:
        raise InputError(f"no records in {path}")
    return out


class DomainVectorizer(TransformerMixin, BaseEstimator):
    """Turn raw domain corpora into DomainStats.

    `fit` learns run-global document frequencies (used by tf-idf hashing);
    `transform` reduces each corpus to its statistics. Follows the
    fit/transform idiom so it can sit at the head of a pipeline.

    Parameters
    ----------
    tokenizer : TokenizerConfig, optional
    embedding : EmbeddingConfig, optional
    ngram_pooling : {'events', 'split'}
        How unigram and bigram counts share the distribution's mass.
    precomputed_embeddings : mapping domain_id -> {doc_index -> vector}, optional
        Externally computed document embeddings; hashing is bypassed where
        an entry exists.
    """

    def __init__(
        self,
        tokenizer: TokenizerConfig | None = None,
        embedding: EmbeddingConfig | None = None,
        ngram_pooling: str = "events",
        precomputed_embeddings: Mapping[str, Mapping[int, np.ndarray]] | None = None,
    ):
        self.tokenizer = tokenizer
        self.embedding = embedding
        self.ngram_pooling = ngram_pooling
        self.precomputed_embeddings = precomputed_embeddings

    def fit(self, X: Sequence[DomainCorpus], y=None):
        corpora = list(X)
        if not corpora:
            raise InputError("no corpora to fit on")
        ids = [c.domain_id for c in corpora]
        if len(set(ids)) != len(ids):
            raise InputError("duplicate domain_ids in corpora")
        tok = self.tokenizer or TokenizerConfig()
        self.document_frequency_, self.total_docs_ = document_frequencies(corpora, tok)
        return self

    def transform(self, X: Sequence[DomainCorpus]) -> list[DomainStats]:
        if not hasattr(self, "document_frequency_"):
            raise InputError("DomainVectorizer must be fitted before transform")
        pre = self.precomputed_embeddings or {}
        return [
            compute_domain_stats(
                corpus,
                self.tokenizer,
                self.embedding,
                doc_freq=self.document_frequency_,
                total_docs=self.total_docs_,
                precomputed=pre.get(corpus.domain_id),
                ngram_pooling=self.ngram_pooling,
            )
            for corpus in X
        ]
