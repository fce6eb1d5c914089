"""Corpus model, sparse-file ingestion, k-fold splitting, the per-domain
minibatch sampler, and a synthetic multi-domain generator.

File formats
------------
Sample files hold one sample per line, ``label idx:count idx:count ...``
with 0-based strictly ascending indices; the label ``?`` marks an unlabeled
sample and ``#`` starts a comment line.

A corpus manifest is key-value text::

    vocab_dim = 200
    k = 2
    bayes_accuracy = 0.95            # optional metadata
    domain = books,books.labeled,books.unlabeled[,books.test]

Paths are resolved relative to the manifest location.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, ShapeError
from .linalg import RngState, SparseBatch, SparseVector

LabeledSample = tuple[SparseVector, int]


# ---------------------------------------------------------------------------
# corpus containers

@dataclass
class DomainDataset:
    """One domain: a small labeled pool and a larger unlabeled pool."""

    name: str
    labeled: list[LabeledSample]
    unlabeled: list[SparseVector]
    vocab_dim: int

    @property
    def n_labeled(self) -> int:
        return len(self.labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.unlabeled)

    @property
    def n_total(self) -> int:
        return self.n_labeled + self.n_unlabeled

    def validate(self, k: int) -> None:
        for vec, label in self.labeled:
            if vec.dim != self.vocab_dim:
                raise ShapeError(f"domain {self.name}: sample dim {vec.dim} != {self.vocab_dim}")
            if not 0 <= label < k:
                raise ConfigError(f"domain {self.name}: label {label} out of range for k={k}")
        for vec in self.unlabeled:
            if vec.dim != self.vocab_dim:
                raise ShapeError(f"domain {self.name}: sample dim {vec.dim} != {self.vocab_dim}")


@dataclass
class MultiDomainCorpus:
    domains: list[DomainDataset]
    vocab_dim: int
    k: int

    def __post_init__(self) -> None:
        if len(self.domains) < 1:
            raise ConfigError("corpus needs at least one domain")
        for d in self.domains:
            if d.vocab_dim != self.vocab_dim:
                raise ShapeError(f"domain {d.name} vocab {d.vocab_dim} != corpus {self.vocab_dim}")
            d.validate(self.k)

    @property
    def m(self) -> int:
        return len(self.domains)

    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def domain_index(self, name: str) -> int:
        for i, d in enumerate(self.domains):
            if d.name == name:
                return i
        raise ConfigError(f"unknown domain {name!r}; have {self.domain_names()}")


@dataclass
class MiniBatchPair:
    """One sampler iteration: a labeled and an unlabeled batch per domain.

    ``labeled[i]`` is ``(SparseBatch, labels)`` or ``None`` for a domain
    whose labeled pool is empty (multi-source UDA target).  The final
    labeled batch of an epoch may be short for the largest domain so that
    no labeled sample repeats within an epoch.
    """

    labeled: list[tuple[SparseBatch, np.ndarray] | None]
    unlabeled: list[SparseBatch]


# ---------------------------------------------------------------------------
# sparse sample files

def _format_count(v: float) -> str:
    return str(int(v)) if v == int(v) else repr(float(v))


def write_sparse_file(path: str, samples: list[tuple[SparseVector, int | None]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for vec, label in samples:
            head = "?" if label is None else str(int(label))
            parts = [head] + [
                f"{int(i)}:{_format_count(v)}" for i, v in zip(vec.indices, vec.values)
            ]
            fh.write(" ".join(parts) + "\n")


def parse_sparse_file(path: str, vocab_dim: int, *, name: str | None = None) -> DomainDataset:
    """Read one sample file into a DomainDataset (labeled + unlabeled pools)."""
    labeled: list[LabeledSample] = []
    unlabeled: list[SparseVector] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            head, feats = fields[0], fields[1:]
            if head != "?":
                try:
                    label = int(head)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad label {head!r}") from None
                if label < 0:
                    raise ParseError(f"{path}:{lineno}: negative label {label}")
            indices: list[int] = []
            values: list[float] = []
            prev = -1
            for tok in feats:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad feature token {tok!r}") from None
                if idx <= prev:
                    raise ParseError(
                        f"{path}:{lineno}: indices must be strictly ascending ({idx} after {prev})"
                    )
                if not 0 <= idx < vocab_dim:
                    raise ParseError(f"{path}:{lineno}: index {idx} out of range [0, {vocab_dim})")
                if not math.isfinite(val) or val < 0:
                    raise ParseError(f"{path}:{lineno}: count must be finite and >= 0, got {val_s}")
                prev = idx
                indices.append(idx)
                values.append(val)
            vec = SparseVector(vocab_dim, indices, values, validate=False)
            if head == "?":
                unlabeled.append(vec)
            else:
                labeled.append((vec, label))
    return DomainDataset(name or os.path.basename(path), labeled, unlabeled, vocab_dim)


# ---------------------------------------------------------------------------
# manifest

_MANIFEST_SCALARS = {"vocab_dim", "k", "bayes_accuracy"}


def write_manifest(path: str, corpus: MultiDomainCorpus,
                   files: dict[str, tuple[str, str, str | None]],
                   metadata: dict[str, float] | None = None) -> None:
    """files maps domain name -> (labeled, unlabeled, test-or-None) relative paths."""
    lines = [f"vocab_dim = {corpus.vocab_dim}", f"k = {corpus.k}"]
    for key, val in (metadata or {}).items():
        if key not in _MANIFEST_SCALARS:
            raise ConfigError(f"unknown manifest metadata key {key!r}")
        lines.append(f"{key} = {val!r}")
    for d in corpus.domains:
        lab, unlab, test = files[d.name]
        entry = f"domain = {d.name},{lab},{unlab}"
        if test is not None:
            entry += f",{test}"
        lines.append(entry)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path: str) -> tuple[MultiDomainCorpus, MultiDomainCorpus | None, dict]:
    """Load a corpus manifest.

    Returns (train corpus, test corpus or None, metadata).  The test corpus
    exists when every domain entry carries a test file.
    """
    base = os.path.dirname(os.path.abspath(path))
    scalars: dict[str, float] = {}
    domain_entries: list[tuple[str, str, str, str | None]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "domain":
                parts = [p.strip() for p in val.split(",")]
                if len(parts) not in (3, 4):
                    raise ParseError(
                        f"{path}:{lineno}: domain needs name,labeled,unlabeled[,test]"
                    )
                name, lab, unlab = parts[:3]
                test = parts[3] if len(parts) == 4 else None
                domain_entries.append((name, lab, unlab, test))
            elif key in _MANIFEST_SCALARS:
                try:
                    scalars[key] = float(val)
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: bad number {val!r}") from None
            else:
                raise ParseError(f"{path}:{lineno}: unknown manifest key {key!r}")
    if "vocab_dim" not in scalars or "k" not in scalars:
        raise ParseError(f"{path}: manifest must set vocab_dim and k")
    if not domain_entries:
        raise ParseError(f"{path}: manifest lists no domains")
    vocab_dim, k = int(scalars["vocab_dim"]), int(scalars["k"])

    domains, test_domains = [], []
    have_all_tests = all(entry[3] is not None for entry in domain_entries)
    for name, lab, unlab, test in domain_entries:
        ds_lab = parse_sparse_file(os.path.join(base, lab), vocab_dim, name=name)
        ds_unlab = parse_sparse_file(os.path.join(base, unlab), vocab_dim, name=name)
        if ds_lab.unlabeled:
            raise ParseError(f"{lab}: labeled file contains '?' samples")
        domains.append(DomainDataset(name, ds_lab.labeled,
                                     [v for v, _ in ds_unlab.labeled] + ds_unlab.unlabeled,
                                     vocab_dim))
        if have_all_tests:
            ds_test = parse_sparse_file(os.path.join(base, test), vocab_dim, name=name)
            if ds_test.unlabeled:
                raise ParseError(f"{test}: test file contains '?' samples")
            test_domains.append(DomainDataset(name, ds_test.labeled, [], vocab_dim))

    corpus = MultiDomainCorpus(domains, vocab_dim, k)
    test_corpus = MultiDomainCorpus(test_domains, vocab_dim, k) if have_all_tests else None
    meta = {key: scalars[key] for key in scalars if key not in ("vocab_dim", "k")}
    return corpus, test_corpus, meta


# ---------------------------------------------------------------------------
# k-fold splitting

def kfold_split(dataset: DomainDataset, folds: int, seed: int
                ) -> list[tuple[DomainDataset, list[LabeledSample]]]:
    """Partition the labeled pool into near-equal disjoint test folds.

    Unlabeled samples stay on the train side of every fold.
    """
    if folds < 2:
        raise ConfigError(f"need folds >= 2, got {folds}")
    if dataset.n_labeled < folds:
        raise ConfigError(
            f"domain {dataset.name}: {dataset.n_labeled} labeled samples < {folds} folds"
        )
    rng = RngState(seed).child(f"kfold:{dataset.name}")
    order = rng.permutation(dataset.n_labeled)
    chunks = np.array_split(order, folds)
    out = []
    for f in range(folds):
        test_idx = set(chunks[f].tolist())
        train_lab = [dataset.labeled[i] for i in range(dataset.n_labeled) if i not in test_idx]
        test = [dataset.labeled[i] for i in chunks[f]]
        out.append((DomainDataset(dataset.name, train_lab, list(dataset.unlabeled),
                                  dataset.vocab_dim), test))
    return out


def corpus_kfold(corpus: MultiDomainCorpus, folds: int, seed: int
                 ) -> list[tuple[MultiDomainCorpus, MultiDomainCorpus]]:
    """Fold every domain with the same seed; fold f pairs train/test corpora."""
    per_domain = [kfold_split(d, folds, seed) for d in corpus.domains]
    out = []
    for f in range(folds):
        train_doms = [per_domain[i][f][0] for i in range(corpus.m)]
        test_doms = [
            DomainDataset(corpus.domains[i].name, per_domain[i][f][1], [], corpus.vocab_dim)
            for i in range(corpus.m)
        ]
        out.append((MultiDomainCorpus(train_doms, corpus.vocab_dim, corpus.k),
                    MultiDomainCorpus(test_doms, corpus.vocab_dim, corpus.k)))
    return out


# ---------------------------------------------------------------------------
# minibatch sampler

class _Cycler:
    """Without-replacement cycling over a pool, reshuffled on wrap."""

    def __init__(self, size: int, rng: RngState):
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size) if size else np.zeros(0, np.int64)
        self.pos = 0

    def reset(self) -> None:
        self.order = self.rng.permutation(self.size)
        self.pos = 0

    @property
    def remaining(self) -> int:
        return self.size - self.pos

    def draw(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self.pos == self.size:
                self.reset()
            take = min(count, self.size - self.pos)
            out.append(self.order[self.pos:self.pos + take])
            self.pos += take
            count -= take
        return np.concatenate(out)


class MinibatchSampler:
    """Algorithm-style epoch stream of per-domain labeled/unlabeled batches.

    An epoch ends when the largest labeled pool is exhausted; smaller pools
    cycle with reshuffles.  The unlabeled stream of a domain is the union of
    its labeled pool (labels stripped) and its unlabeled pool.
    """

    def __init__(self, corpus: MultiDomainCorpus, batch_size: int, rng: RngState,
                 *, allow_empty_labeled: bool = False):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        self.corpus = corpus
        self.batch_size = batch_size
        self._lab_cyclers = []
        self._unlab_pools: list[list[SparseVector]] = []
        self._unlab_cyclers = []
        for d in corpus.domains:
            if d.n_labeled == 0 and not allow_empty_labeled:
                raise ConfigError(f"domain {d.name} has no labeled samples")
            pool = [v for v, _ in d.labeled] + list(d.unlabeled)
            if not pool:
                raise ConfigError(f"domain {d.name} has no samples at all")
            self._lab_cyclers.append(_Cycler(d.n_labeled, rng.child(f"lab:{d.name}")))
            self._unlab_pools.append(pool)
            self._unlab_cyclers.append(_Cycler(len(pool), rng.child(f"unlab:{d.name}")))
        self.max_labeled = max(d.n_labeled for d in corpus.domains)
        if self.max_labeled == 0:
            raise ConfigError("every domain has an empty labeled pool")
        self.iters_per_epoch = math.ceil(self.max_labeled / batch_size)

    def epoch(self):
        """Yield ``iters_per_epoch`` MiniBatchPairs; pools reshuffle first."""
        for cyc in self._lab_cyclers:
            if cyc.size:
                cyc.reset()
        B = self.batch_size
        for it in range(self.iters_per_epoch):
            labeled = []
            for di, d in enumerate(self.corpus.domains):
                cyc = self._lab_cyclers[di]
                if cyc.size == 0:
                    labeled.append(None)
                    continue
                if d.n_labeled == self.max_labeled:
                    take = min(B, cyc.remaining)  # short final batch, no repeats
                else:
                    take = B
                idx = cyc.draw(take)
                vecs = [d.labeled[i][0] for i in idx]
                labels = np.array([d.labeled[i][1] for i in idx], dtype=np.int64)
                labeled.append((SparseBatch.from_vectors(vecs), labels))
            unlabeled = []
            for di in range(self.corpus.m):
                idx = self._unlab_cyclers[di].draw(B)
                unlabeled.append(SparseBatch.from_vectors(
                    [self._unlab_pools[di][i] for i in idx]))
            yield MiniBatchPair(labeled, unlabeled)


# ---------------------------------------------------------------------------
# synthetic multi-domain generator

_NOISE_STRENGTH = 1.0


@dataclass
class SynthConfig:
    """Generator for a separable multi-domain bag-of-features corpus.

    The vocabulary splits into four blocks:

    * shared signal: class orientation identical in all domains;
    * cross-domain specific signal: used by every domain, but features in
      ``flip_features`` flip their class association in odd-indexed domains
      (the "it runs fast" effect);
    * domain vocabulary: disjoint per-domain slices whose features keep a
      globally consistent class orientation (each domain voices the same
      sentiment through its own words);
    * common noise: class-neutral tokens shared by all domains.

    Signal tokens are drawn only from the half of a block aligned with the
    clean label, so the per-domain Bayes rule is exact by construction;
    ``noise_rate`` then flips labels.
    """

    m: int = 3
    vocab_dim: int = 200
    labeled_per_domain: int = 500
    unlabeled_per_domain: int = 500
    test_per_domain: int = 200
    shared_strength: float = 1.5
    specific_strength: float = 1.5
    domain_vocab_strength: float = 4.0
    flip_features: tuple[int, ...] = ()
    noise_rate: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ConfigError("need at least one domain")
        if self.vocab_dim < 16:
            raise ConfigError("vocab_dim must be >= 16")
        for s in (self.shared_strength, self.specific_strength,
                  self.domain_vocab_strength):
            if s < 0:
                raise ConfigError("signal strengths must be >= 0")
        if not 0 <= self.noise_rate < 0.5:
            raise ConfigError("noise_rate must be in [0, 0.5)")
        lo, hi = self.specific_block
        for f in self.flip_features:
            if not lo <= f < hi:
                raise ConfigError(
                    f"flip feature {f} outside the specific block [{lo}, {hi})"
                )

    @property
    def shared_block(self) -> tuple[int, int]:
        return 0, self.vocab_dim // 4

    @property
    def specific_block(self) -> tuple[int, int]:
        n = self.vocab_dim // 4
        return n, 2 * n

    @property
    def domain_vocab_block(self) -> tuple[int, int]:
        n = self.vocab_dim // 4
        return 2 * n, 2 * n + self.vocab_dim * 3 // 8

    @property
    def noise_block(self) -> tuple[int, int]:
        return self.domain_vocab_block[1], self.vocab_dim

    def bayes_accuracy(self) -> float:
        """Accuracy of the exact per-domain Bayes rule against noisy labels."""
        def p_no_token(strength: float) -> float:
            whole, frac = divmod(strength, 1.0)
            return (1.0 - frac) if whole == 0 else 0.0

        p_none = (p_no_token(self.shared_strength)
                  * p_no_token(self.specific_strength)
                  * p_no_token(self.domain_vocab_strength))
        return (1.0 - p_none) * (1.0 - self.noise_rate) + 0.5 * p_none


def default_flip_features(vocab_dim: int, flip_fraction: float) -> tuple[int, ...]:
    """First round(fraction * block) features of the specific block."""
    if not 0.0 <= flip_fraction <= 1.0:
        raise ConfigError("flip_fraction must be in [0, 1]")
    n = vocab_dim // 4
    n_flip = int(round(flip_fraction * n))
    return tuple(range(n, n + n_flip))


def _token_count(strength: float, rng: RngState) -> int:
    whole, frac = divmod(strength, 1.0)
    return int(whole) + (1 if frac > 0 and rng.random() < frac else 0)


def _class_halves(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = features.size // 2
    return features[:half], features[half:]


class _DomainSampler:
    def __init__(self, cfg: SynthConfig, domain: int, rng: RngState):
        self.cfg = cfg
        self.rng = rng
        self.shared_halves = _class_halves(np.arange(*cfg.shared_block))
        # effective orientation: base half, flipped for flip features in odd domains
        sp_lo, sp_hi = cfg.specific_block
        sp = np.arange(sp_lo, sp_hi)
        base_orient = (sp - sp_lo) >= (sp_hi - sp_lo) // 2
        flipped = np.isin(sp, np.asarray(cfg.flip_features, dtype=np.int64))
        orient = base_orient ^ (flipped & (domain % 2 == 1))
        self.specific_halves = (sp[~orient], sp[orient])
        # disjoint per-domain vocabulary slice, globally consistent orientation
        dv = np.arange(*cfg.domain_vocab_block)
        slice_ = np.array_split(dv, cfg.m)[domain] if dv.size else dv
        self.domain_vocab_halves = _class_halves(slice_)
        self.noise_features = np.arange(*cfg.noise_block)

    def sample(self, labeled: bool) -> tuple[SparseVector, int | None]:
        cfg, rng = self.cfg, self.rng
        y = int(rng.integers(0, 2))
        tokens: list[np.ndarray] = []
        for strength, halves in (
            (cfg.shared_strength, self.shared_halves),
            (cfg.specific_strength, self.specific_halves),
            (cfg.domain_vocab_strength, self.domain_vocab_halves),
        ):
            count = _token_count(strength, rng)
            if count and halves[y].size:
                tokens.append(rng.choice(halves[y], size=count))
        k_noise = _token_count(_NOISE_STRENGTH, rng)
        if k_noise and self.noise_features.size:
            tokens.append(rng.choice(self.noise_features, size=k_noise))
        if tokens:
            counts = np.bincount(np.concatenate(tokens), minlength=cfg.vocab_dim)
            idx = np.nonzero(counts)[0]
            vec = SparseVector(cfg.vocab_dim, idx, counts[idx].astype(np.float64))
        else:
            vec = SparseVector(cfg.vocab_dim, [], [])
        if cfg.noise_rate > 0 and rng.random() < cfg.noise_rate:
            y = 1 - y
        return vec, (y if labeled else None)


def synth_generate(cfg: SynthConfig
                   ) -> tuple[MultiDomainCorpus, MultiDomainCorpus, dict]:
    """Generate (train corpus, held-out test corpus, metadata)."""
    rng = RngState(cfg.seed)
    domains, test_domains = [], []
    for di in range(cfg.m):
        name = f"domain{di}"
        sampler = _DomainSampler(cfg, di, rng.child(f"synth:{name}"))
        labeled = [sampler.sample(True) for _ in range(cfg.labeled_per_domain)]
        unlabeled = [sampler.sample(False)[0] for _ in range(cfg.unlabeled_per_domain)]
        test = [sampler.sample(True) for _ in range(cfg.test_per_domain)]
        domains.append(DomainDataset(
            name, [(v, y) for v, y in labeled], unlabeled, cfg.vocab_dim))
        test_domains.append(DomainDataset(
            name, [(v, y) for v, y in test], [], cfg.vocab_dim))
    corpus = MultiDomainCorpus(domains, cfg.vocab_dim, 2)
    test_corpus = MultiDomainCorpus(test_domains, cfg.vocab_dim, 2)
    meta = {
        "bayes_accuracy": cfg.bayes_accuracy(),
        "shared_block": cfg.shared_block,
        "specific_block": cfg.specific_block,
        "domain_vocab_block": cfg.domain_vocab_block,
        "noise_block": cfg.noise_block,
        "flip_features": tuple(cfg.flip_features),
    }
    return corpus, test_corpus, meta
