"""Adversarial training losses, the alternating minimax loop, the
three-step smoothed-difference variant, evaluation, and the feature
alignment diagnostic.

Loss conventions: expectations per domain become means within a batch,
summed across domains, which keeps the trade-off weight comparable across
batch sizes.  Predicted pseudo-labels are labeling-function outputs and
carry no gradient, so the main classifier never receives gradient from the
adversarial term; probabilities are clamped inside every log so both
losses stay finite (a clamped sample contributes zero gradient).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .data import (
    DomainDataset,
    MiniBatchPair,
    MinibatchSampler,
    MultiDomainCorpus,
    SynthConfig,
    default_flip_features,
    synth_generate,
)
from .errors import ConfigError, NonFiniteError
from .linalg import (
    AdamState,
    RngState,
    SparseBatch,
    adam_step,
    affine_forward_batch,
    softmax,
)
from .margin import ScoreTable, margin_disparity
from .model import (
    MdatModel,
    ModelSpec,
    accumulate_grads,
    backward,
    forward,
    forward_msuda,
)

VARIANTS = ("mdat", "mdat-l1")


@dataclass
class TrainConfig:
    alpha: float = 0.5
    beta: float = 4.0
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    eval_cadence: int = 1
    variant: str = "mdat"
    msuda_target: str | None = None
    extractor_hidden: tuple[int, ...] = (1000, 500)
    d_shared: int = 128
    d_specific: int = 64
    keep_prob: float = 0.6
    prob_clamp: float = 1e-7
    diag_probe_budget: int = 0
    diag_max_per_domain: int = 256

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 1:
            raise ConfigError(f"beta must be >= 1, got {self.beta}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.eval_cadence < 1:
            raise ConfigError(f"eval_cadence must be >= 1, got {self.eval_cadence}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if not 0.0 < self.prob_clamp < 0.5:
            raise ConfigError(f"prob_clamp must be in (0, 0.5), got {self.prob_clamp}")

    @property
    def rho(self) -> float:
        """Margin parameter implied by the adversarial weight."""
        return math.log(self.beta)

    def model_spec(self, corpus: MultiDomainCorpus) -> ModelSpec:
        return ModelSpec(
            vocab_dim=corpus.vocab_dim, k=corpus.k, m=corpus.m,
            extractor_hidden=tuple(self.extractor_hidden),
            d_shared=self.d_shared, d_specific=self.d_specific,
            keep_prob=self.keep_prob,
        )


@dataclass
class EpochReport:
    epoch: int
    jc: float
    jd: float
    per_domain_acc: dict[str, float] | None = None
    avg_acc: float | None = None
    diag: dict[str, float] | None = None
    wall_clock: float = 0.0  # informational only; never serialized


@dataclass
class TrainResult:
    model: MdatModel
    best_model: MdatModel
    reports: list[EpochReport]
    best_avg_acc: float | None
    best_epoch: int | None
    diag_initial: dict[str, float] | None = None
    diag_final: dict[str, float] | None = None


# ---------------------------------------------------------------------------
# loss pieces (per domain)

def _onehot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _ce_loss_grad(logits: np.ndarray, labels: np.ndarray, clamp: float
                  ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean NLL; the probability is clamped from below only (log p is safe
    near 1).  Returns (loss, dlogits, clamp flags); clamped samples carry
    zero gradient."""
    n, k = logits.shape
    p = softmax(logits)
    py = p[np.arange(n), labels]
    clamped = py < clamp
    pc = np.maximum(py, clamp)
    loss = float(-np.mean(np.log(pc)))
    dlogits = (p - _onehot(labels, k)) / n
    dlogits[clamped] = 0.0
    return loss, dlogits, clamped


def _jd_loss_grad(logits_c: np.ndarray, logits_cp: np.ndarray, beta: float,
                  clamp: float) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Adversarial term for one domain batch.

    Per sample: beta*log p' + log(1 - p') where p' is the auxiliary
    classifier's probability at the main classifier's predicted label
    (treated as a constant).  Returns (mean value, dlogits_cp, pseudo
    labels, clamp flags); the main classifier receives no gradient.
    """
    n = logits_c.shape[0]
    pseudo = np.argmax(logits_c, axis=1)
    q = softmax(logits_cp)
    ps = q[np.arange(n), pseudo]
    clamped = (ps < clamp) | (ps > 1.0 - clamp)
    pc = np.clip(ps, clamp, 1.0 - clamp)
    vals = beta * np.log(pc) + np.log1p(-pc)
    loss = float(np.mean(vals))
    dval_dp = (beta / pc - 1.0 / (1.0 - pc)) / n
    dval_dp[clamped] = 0.0
    # d p_sigma / d z_j = p_sigma (1[j = sigma] - q_j)
    jac = ps[:, None] * (_onehot(pseudo, q.shape[1]) - q)
    dlogits_cp = dval_dp[:, None] * jac
    return loss, dlogits_cp, pseudo, clamped


def _l1_loss_grad(logits_c: np.ndarray, logits_cp: np.ndarray
                  ) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Mean L1 distance between the two softmax vectors.

    Returns (loss, dlogits_c, dlogits_cp, sign pattern).  The sign at an
    exact tie is 0 (deterministic subgradient).
    """
    n = logits_c.shape[0]
    s = softmax(logits_c)
    sp = softmax(logits_cp)
    diff = s - sp
    signs = np.sign(diff)
    loss = float(np.mean(np.sum(np.abs(diff), axis=1)))
    # softmax Jacobian-vector product: J(s) @ g = s * (g - <s, g>)
    inner_c = np.sum(s * signs, axis=1, keepdims=True)
    dlogits_c = s * (signs - inner_c) / n
    inner_cp = np.sum(sp * signs, axis=1, keepdims=True)
    dlogits_cp = -sp * (signs - inner_cp) / n
    return loss, dlogits_c, dlogits_cp, signs


# ---------------------------------------------------------------------------
# domain batch assembly

@dataclass
class _DomainBatch:
    """Concatenated labeled+unlabeled rows for one domain in one iteration."""

    domain: int
    x: SparseBatch
    labels: np.ndarray | None  # labels of the first n_labeled rows
    n_labeled: int


def _concat_batches(a: SparseBatch, b: SparseBatch) -> SparseBatch:
    indptr = np.concatenate([a.indptr, b.indptr[1:] + a.indptr[-1]])
    return SparseBatch(a.dim, indptr,
                       np.concatenate([a.indices, b.indices]),
                       np.concatenate([a.values, b.values]))


def _domain_batches(pair: MiniBatchPair) -> list[_DomainBatch]:
    out = []
    for di, unlab in enumerate(pair.unlabeled):
        lab = pair.labeled[di]
        if lab is None:
            out.append(_DomainBatch(di, unlab, None, 0))
        else:
            batch, labels = lab
            out.append(_DomainBatch(di, _concat_batches(batch, unlab),
                                    labels, labels.size))
    return out


# ---------------------------------------------------------------------------
# optimizer plumbing

def _ensure_opt(opt: dict[str, AdamState], model: MdatModel, name: str,
                lr: float) -> AdamState:
    if name not in opt:
        opt[name] = AdamState.for_params(model.components()[name].flat.size, lr=lr)
    return opt[name]


def _apply_grads(model: MdatModel, grads: dict[str, np.ndarray],
                 opt: dict[str, AdamState], lr: float) -> None:
    for name in grads:
        state = _ensure_opt(opt, model, name, lr)
        adam_step(model.components()[name].flat, grads[name], state)


# ---------------------------------------------------------------------------
# alternating minimax steps

@dataclass
class StepStats:
    jc: float
    jd: float
    jd_adversary: float = 0.0


def mdat_main_step(model: MdatModel, pair: MiniBatchPair, cfg: TrainConfig,
                   opt: dict[str, AdamState], rng: RngState) -> tuple[float, float]:
    """Sub-step (a): descend extractors and the main classifier on the
    supervised loss plus alpha times the adversarial term."""
    grads: dict[str, np.ndarray] = {}
    jc_total, jd_total = 0.0, 0.0
    for db in _domain_batches(pair):
        trace = forward(model, db.domain, db.x, "train", rng)
        dlogits_c = np.zeros_like(trace.logits_c)
        if db.n_labeled:
            jc, dce, _ = _ce_loss_grad(trace.logits_c[:db.n_labeled], db.labels,
                                       cfg.prob_clamp)
            dlogits_c[:db.n_labeled] = dce
            jc_total += jc
        jd, dlogits_cp, _, _ = _jd_loss_grad(trace.logits_c, trace.logits_cp,
                                             cfg.beta, cfg.prob_clamp)
        jd_total += jd
        comps = ["shared", f"specific_{db.domain}", "classifier"]
        part = backward(model, trace, dlogits_c, cfg.alpha * dlogits_cp, comps)
        accumulate_grads(grads, part)
    _check_finite(jc_total + cfg.alpha * jd_total)
    _apply_grads(model, grads, opt, cfg.lr)
    return jc_total, jd_total


def mdat_adversary_step(model: MdatModel, pair: MiniBatchPair, cfg: TrainConfig,
                        opt: dict[str, AdamState], rng: RngState) -> float:
    """Sub-step (b): fresh forward, ascend the auxiliary classifier on the
    adversarial term alone."""
    grads: dict[str, np.ndarray] = {}
    jd_total = 0.0
    for db in _domain_batches(pair):
        trace = forward(model, db.domain, db.x, "train", rng)
        jd, dlogits_cp, _, _ = _jd_loss_grad(trace.logits_c, trace.logits_cp,
                                             cfg.beta, cfg.prob_clamp)
        jd_total += jd
        part = backward(model, trace, np.zeros_like(trace.logits_c), dlogits_cp,
                        ["auxiliary"], sign=-1.0)
        accumulate_grads(grads, part)
    _check_finite(jd_total)
    _apply_grads(model, grads, opt, cfg.lr)
    return jd_total


def mdat_step(model: MdatModel, pair: MiniBatchPair, cfg: TrainConfig,
              opt: dict[str, AdamState], rng: RngState) -> StepStats:
    jc, jd = mdat_main_step(model, pair, cfg, opt, rng)
    jd_adv = mdat_adversary_step(model, pair, cfg, opt, rng)
    return StepStats(jc, jd, jd_adv)


# ---------------------------------------------------------------------------
# three-step smoothed-difference variant

def l1_phase_supervised(model: MdatModel, pair: MiniBatchPair, cfg: TrainConfig,
                        opt: dict[str, AdamState], rng: RngState) -> float:
    """Phase 1: descend every component on cross-entropy of both classifiers
    over the labeled batches."""
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    for di, lab in enumerate(pair.labeled):
        if lab is None:
            continue
        batch, labels = lab
        trace = forward(model, di, batch, "train", rng)
        jc_c, d_c, _ = _ce_loss_grad(trace.logits_c, labels, cfg.prob_clamp)
        jc_cp, d_cp, _ = _ce_loss_grad(trace.logits_cp, labels, cfg.prob_clamp)
        total += jc_c + jc_cp
        part = backward(model, trace, d_c, d_cp,
                        ["shared", f"specific_{di}", "classifier", "auxiliary"])
        accumulate_grads(grads, part)
    _check_finite(total)
    _apply_grads(model, grads, opt, cfg.lr)
    return total


def l1_phase_extractors(model: MdatModel, pair: MiniBatchPair, cfg: TrainConfig,
                        opt: dict[str, AdamState], rng: RngState
                        ) -> tuple[float, float]:
    """Phase 2: classifiers frozen; descend extractors on the supervised
    loss plus alpha times the smoothed classifier difference."""
    grads: dict[str, np.ndarray] = {}
    jc_total, jd_total = 0.0, 0.0
    for db in _domain_batches(pair):
        trace = forward(model, db.domain, db.x, "train", rng)
        dlogits_c = np.zeros_like(trace.logits_c)
        dlogits_cp = np.zeros_like(trace.logits_cp)
        if db.n_labeled:
            jc_c, d_c, _ = _ce_loss_grad(trace.logits_c[:db.n_labeled], db.labels,
                                         cfg.prob_clamp)
            jc_cp, d_cp, _ = _ce_loss_grad(trace.logits_cp[:db.n_labeled], db.labels,
                                           cfg.prob_clamp)
            dlogits_c[:db.n_labeled] += d_c
            dlogits_cp[:db.n_labeled] += d_cp
            jc_total += jc_c + jc_cp
        jd, d1, d2, _ = _l1_loss_grad(trace.logits_c, trace.logits_cp)
        jd_total += jd
        dlogits_c += cfg.alpha * d1
        dlogits_cp += cfg.alpha * d2
        part = backward(model, trace, dlogits_c, dlogits_cp,
                        ["shared", f"specific_{db.domain}"])
        accumulate_grads(grads, part)
    _check_finite(jc_total + cfg.alpha * jd_total)
    _apply_grads(model, grads, opt, cfg.lr)
    return jc_total, jd_total


def l1_phase_classifiers(model: MdatModel, pair: MiniBatchPair, cfg: TrainConfig,
                         opt: dict[str, AdamState], rng: RngState) -> float:
    """Phase 3: extractors frozen; ascend both classifiers on the smoothed
    classifier difference."""
    grads: dict[str, np.ndarray] = {}
    total = 0.0
    for db in _domain_batches(pair):
        trace = forward(model, db.domain, db.x, "train", rng)
        jd, d1, d2, _ = _l1_loss_grad(trace.logits_c, trace.logits_cp)
        total += jd
        part = backward(model, trace, d1, d2, ["classifier", "auxiliary"],
                        sign=-1.0)
        accumulate_grads(grads, part)
    _check_finite(total)
    _apply_grads(model, grads, opt, cfg.lr)
    return total


def ablation_step(model: MdatModel, pair: MiniBatchPair, cfg: TrainConfig,
                  opt: dict[str, AdamState], rng: RngState) -> StepStats:
    jc = l1_phase_supervised(model, pair, cfg, opt, rng)
    _, jd = l1_phase_extractors(model, pair, cfg, opt, rng)
    jd_adv = l1_phase_classifiers(model, pair, cfg, opt, rng)
    return StepStats(jc, jd, jd_adv)


def _check_finite(value: float) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"training loss became non-finite: {value}")


class TrainingAborted(NonFiniteError):
    """A loss turned non-finite mid-run.

    Carries the model as of the last completed epoch and the epoch reports
    gathered so far, so callers can keep the last good checkpoint.
    """

    def __init__(self, message: str, model: MdatModel,
                 reports: list["EpochReport"]):
        super().__init__(message)
        self.model = model
        self.reports = reports


# ---------------------------------------------------------------------------
# evaluation

_EVAL_CHUNK = 256


def _eval_logits(model: MdatModel, domain: int | None,
                 vecs: list, chunk: int = _EVAL_CHUNK) -> np.ndarray:
    parts = []
    for lo in range(0, len(vecs), chunk):
        batch = SparseBatch.from_vectors(vecs[lo:lo + chunk])
        if domain is None:
            trace = forward_msuda(model, batch, "eval")
        else:
            trace = forward(model, domain, batch, "eval")
        parts.append(trace.logits_c)
    return np.concatenate(parts)


def evaluate(model: MdatModel, corpus: MultiDomainCorpus,
             msuda_target: int | None = None) -> tuple[dict[str, float], float]:
    """Accuracy of the main classifier per domain plus the average.

    The multi-source UDA target is scored through the zeroed-specific
    forward path.
    """
    per_domain: dict[str, float] = {}
    for di, domain in enumerate(corpus.domains):
        if not domain.labeled:
            raise ConfigError(f"domain {domain.name} has no labeled test samples")
        vecs = [v for v, _ in domain.labeled]
        labels = np.array([y for _, y in domain.labeled], dtype=np.int64)
        logits = _eval_logits(model, None if di == msuda_target else di, vecs)
        preds = np.argmax(logits, axis=1)
        per_domain[domain.name] = float(np.mean(preds == labels))
    avg = float(np.mean(list(per_domain.values())))
    return per_domain, avg


# ---------------------------------------------------------------------------
# feature alignment diagnostic

def shared_features(model: MdatModel, vecs: list, chunk: int = _EVAL_CHUNK
                    ) -> np.ndarray:
    """Eval-mode output of the shared extractor for a list of samples."""
    parts = []
    for lo in range(0, len(vecs), chunk):
        batch = SparseBatch.from_vectors(vecs[lo:lo + chunk])
        A = batch
        layers = model.shared.layers
        for li, (W, b) in enumerate(layers):
            Z = affine_forward_batch(W, b, A)
            A = np.maximum(Z, 0.0) if li < len(layers) - 1 else Z
        parts.append(A)
    return np.concatenate(parts)


class _Probe:
    """Tiny linear scorer trained with Adam; used only by the diagnostic.

    Keeping the probe linear (and evaluating it on held-out samples, see
    alignment_diagnostic) caps its capacity: an unrestricted adversary can
    always drive the empirical disparity gap between two disjoint finite
    sets to 1 by memorizing sample identities, which would say nothing
    about the feature distributions.
    """

    def __init__(self, d: int, k: int, rng: RngState, lr: float = 0.05):
        a = math.sqrt(6.0 / (d + k))
        self.W = rng.uniform(-a, a, size=(k, d))
        self.b = np.zeros(k)
        self.opt = AdamState.for_params(self.W.size + k, lr=lr)

    def logits(self, X: np.ndarray) -> np.ndarray:
        return X @ self.W.T + self.b

    def step(self, X: np.ndarray, dlogits: np.ndarray) -> None:
        dW = dlogits.T @ X
        db = dlogits.sum(axis=0)
        flat = np.concatenate([self.W.ravel(), self.b])
        grad = np.concatenate([dW.ravel(), db])
        adam_step(flat, grad, self.opt)
        self.W = flat[:self.W.size].reshape(self.W.shape)
        self.b = flat[self.W.size:]


def _train_probe_classifier(X: np.ndarray, labels: np.ndarray, k: int,
                            budget: int, rng: RngState) -> _Probe:
    probe = _Probe(X.shape[1], k, rng)
    n = X.shape[0]
    for _ in range(budget):
        p = softmax(probe.logits(X))
        probe.step(X, (p - _onehot(labels, k)) / n)
    return probe


def _train_probe_adversary(X_dom: np.ndarray, X_pool: np.ndarray,
                           pseudo_dom: np.ndarray, pseudo_pool: np.ndarray,
                           k: int, beta: float, budget: int, clamp: float,
                           rng: RngState) -> _Probe:
    """Maximize beta * E_domain log p'(pseudo) + E_pool log(1 - p'(pseudo))."""
    probe = _Probe(X_dom.shape[1], k, rng)
    n_dom, n_pool = X_dom.shape[0], X_pool.shape[0]
    X_all = np.concatenate([X_dom, X_pool])
    for _ in range(budget):
        q_dom = softmax(probe.logits(X_dom))
        p_dom = np.clip(q_dom[np.arange(n_dom), pseudo_dom], clamp, 1.0 - clamp)
        co_dom = (beta / p_dom) / n_dom
        jac_dom = p_dom[:, None] * (_onehot(pseudo_dom, k) - q_dom)
        d_dom = -co_dom[:, None] * jac_dom  # ascent via descending the negative

        q_pool = softmax(probe.logits(X_pool))
        p_pool = np.clip(q_pool[np.arange(n_pool), pseudo_pool], clamp, 1.0 - clamp)
        co_pool = (-1.0 / (1.0 - p_pool)) / n_pool
        jac_pool = p_pool[:, None] * (_onehot(pseudo_pool, k) - q_pool)
        d_pool = -co_pool[:, None] * jac_pool

        probe.step(X_all, np.concatenate([d_dom, d_pool]))
    return probe


def alignment_diagnostic(model: MdatModel, corpus: MultiDomainCorpus, rho: float,
                         probe_budget: int, *, rng: RngState,
                         max_per_domain: int = 512) -> dict[str, float]:
    """Estimated margin discrepancy between each domain's shared features
    and the pooled shared features of the other domains.

    A fresh linear probe pair is trained per domain: a classifier fitted on
    pooled labeled features provides the labeling, then an adversary
    maximizes the disparity gap between the domain and the leave-one-out
    pool.  Probes are fitted on the first half of each feature set and the
    gap is measured on the held-out second half, so only structure that
    generalizes across samples counts.  The estimate is budget-limited by
    construction; with budget 0 the probes stay at their random
    initialization and the value is uninformative noise.
    """
    if rho <= 0:
        raise ConfigError(f"diagnostic needs rho > 0, got {rho}")
    if corpus.m < 2:
        raise ConfigError("alignment diagnostic needs at least two domains")
    k = corpus.k
    fit_feats: list[np.ndarray] = []
    held_feats: list[np.ndarray] = []
    lab_feats: list[np.ndarray] = []
    lab_labels: list[np.ndarray] = []
    for domain in corpus.domains:
        pool = ([v for v, _ in domain.labeled] + list(domain.unlabeled))[:max_per_domain]
        X = shared_features(model, pool)
        # striped split: robust to ordered sample lists, and identical
        # domain pools still yield identical fit/held sets (exact zero gap)
        fit_feats.append(X[0::2] if X.shape[0] > 1 else X)
        held_feats.append(X[1::2] if X.shape[0] > 1 else X)
        if domain.labeled:
            lab = domain.labeled[:max_per_domain]
            lab_feats.append(shared_features(model, [v for v, _ in lab]))
            lab_labels.append(np.array([y for _, y in lab], dtype=np.int64))
    X_lab = np.concatenate(lab_feats)
    y_lab = np.concatenate(lab_labels)
    f_probe = _train_probe_classifier(X_lab, y_lab, k, probe_budget,
                                      rng.child("diag-probe-f"))
    beta = math.exp(rho)
    out: dict[str, float] = {}
    for di, domain in enumerate(corpus.domains):
        others = [j for j in range(corpus.m) if j != di]
        fit_dom, fit_pool = fit_feats[di], np.concatenate([fit_feats[j] for j in others])
        held_dom, held_pool = held_feats[di], np.concatenate([held_feats[j] for j in others])
        adversary = _train_probe_adversary(
            fit_dom, fit_pool,
            np.argmax(f_probe.logits(fit_dom), axis=1),
            np.argmax(f_probe.logits(fit_pool), axis=1),
            k, beta, probe_budget, 1e-7,
            rng.child(f"diag-probe-adv:{domain.name}"))
        dis_pool = margin_disparity(ScoreTable(f_probe.logits(held_pool)),
                                    ScoreTable(adversary.logits(held_pool)), rho)
        dis_dom = margin_disparity(ScoreTable(f_probe.logits(held_dom)),
                                   ScoreTable(adversary.logits(held_dom)), rho)
        out[domain.name] = max(0.0, dis_pool - dis_dom)
    return out


# ---------------------------------------------------------------------------
# full training loop

def _strip_labels_for_msuda(corpus: MultiDomainCorpus, target: str
                            ) -> MultiDomainCorpus:
    ti = corpus.domain_index(target)
    domains = []
    for di, d in enumerate(corpus.domains):
        if di == ti:
            unlabeled = [v for v, _ in d.labeled] + list(d.unlabeled)
            domains.append(DomainDataset(d.name, [], unlabeled, d.vocab_dim))
        else:
            domains.append(d)
    return MultiDomainCorpus(domains, corpus.vocab_dim, corpus.k)


def train(corpus: MultiDomainCorpus, cfg: TrainConfig,
          eval_corpus: MultiDomainCorpus | None = None) -> TrainResult:
    """Run the configured variant for cfg.epochs epochs.

    Deterministic given (corpus, cfg): the seed drives initialization,
    sampling and dropout through independent child streams.  When an eval
    corpus is given, accuracy is measured at the cadence and the best
    snapshot is kept alongside the final model.
    """
    rng = RngState(cfg.seed)
    msuda_index = None
    train_corpus = corpus
    if cfg.msuda_target is not None:
        msuda_index = corpus.domain_index(cfg.msuda_target)
        train_corpus = _strip_labels_for_msuda(corpus, cfg.msuda_target)

    model = MdatModel(cfg.model_spec(corpus))
    model.init_params(rng.child("init"))
    sampler = MinibatchSampler(train_corpus, cfg.batch_size, rng.child("sampler"),
                               allow_empty_labeled=msuda_index is not None)
    droprng = rng.child("dropout")
    diagrng = rng.child("diagnostic")
    opt: dict[str, AdamState] = {}
    step_fn = mdat_step if cfg.variant == "mdat" else ablation_step

    diag_initial = None
    if cfg.diag_probe_budget > 0 and train_corpus.m >= 2:
        diag_initial = alignment_diagnostic(
            model, train_corpus, cfg.rho, cfg.diag_probe_budget,
            rng=diagrng.child("initial"), max_per_domain=cfg.diag_max_per_domain)

    reports: list[EpochReport] = []
    best_acc: float | None = None
    best_epoch: int | None = None
    best_model = model.copy()
    last_good = model.copy()
    diag_final = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        jc_sum, jd_sum, n_steps = 0.0, 0.0, 0
        try:
            for pair in sampler.epoch():
                stats = step_fn(model, pair, cfg, opt, droprng)
                jc_sum += stats.jc
                jd_sum += stats.jd
                n_steps += 1
        except NonFiniteError as exc:
            raise TrainingAborted(
                f"epoch {epoch}: {exc}", last_good, reports) from exc
        report = EpochReport(epoch=epoch, jc=jc_sum / n_steps, jd=jd_sum / n_steps)
        last = epoch == cfg.epochs - 1
        if eval_corpus is not None and ((epoch + 1) % cfg.eval_cadence == 0 or last):
            per_domain, avg = evaluate(model, eval_corpus, msuda_index)
            report.per_domain_acc = per_domain
            report.avg_acc = avg
            if best_acc is None or avg > best_acc:
                best_acc, best_epoch = avg, epoch
                best_model = model.copy()
        if last and cfg.diag_probe_budget > 0 and train_corpus.m >= 2:
            diag_final = alignment_diagnostic(
                model, train_corpus, cfg.rho, cfg.diag_probe_budget,
                rng=diagrng.child("final"), max_per_domain=cfg.diag_max_per_domain)
            report.diag = diag_final
        report.wall_clock = time.perf_counter() - t0
        reports.append(report)
        last_good = model.copy()
    if best_acc is None:
        best_model = model.copy()
    return TrainResult(model=model, best_model=best_model, reports=reports,
                       best_avg_acc=best_acc, best_epoch=best_epoch,
                       diag_initial=diag_initial, diag_final=diag_final)


# ---------------------------------------------------------------------------
# loss closures for gradient checking

LOSS_NAMES = ("jc", "jd", "jc_l1", "jd_l1")


def grad_check_config(*, seed: int = 0):
    """Built-in toy setup for gradient checks: a 2-domain corpus on a
    20-feature vocabulary, a small dropout model, and one minibatch."""
    synth = SynthConfig(
        m=2, vocab_dim=20, labeled_per_domain=8, unlabeled_per_domain=8,
        test_per_domain=4, shared_strength=1.5, specific_strength=1.5,
        flip_features=default_flip_features(20, 0.4), noise_rate=0.1, seed=seed)
    corpus, _test, _meta = synth_generate(synth)
    cfg = TrainConfig(batch_size=8, epochs=1, seed=seed, lr=1e-3,
                      extractor_hidden=(12,), d_shared=8, d_specific=6,
                      keep_prob=0.6)
    rng = RngState(seed)
    model = MdatModel(cfg.model_spec(corpus))
    model.init_params(rng.child("init"))
    sampler = MinibatchSampler(corpus, cfg.batch_size, rng.child("sampler"))
    pair = next(sampler.epoch())
    return corpus, cfg, model, pair, rng.child("gradcheck")


def _relu_signature(trace) -> tuple:
    sig = []
    for name in sorted(trace.caches):
        for A_in, Z, _mask in trace.caches[name]:
            sig.append(np.packbits(Z.ravel() > 0).tobytes())
    return tuple(sig)


def make_loss_closure(loss_name: str, pair: MiniBatchPair, cfg: TrainConfig,
                      model: MdatModel, rng: RngState):
    """Build loss_fn(model) -> (value, grads, signature) with frozen dropout.

    The signature captures rectifier sign patterns plus the loss's own
    discrete state (pseudo-labels, clamp activity, L1 signs); finite
    difference probes that land on different signatures straddle a kink.
    """
    if loss_name not in LOSS_NAMES:
        raise ConfigError(f"loss must be one of {LOSS_NAMES}, got {loss_name!r}")
    batches = _domain_batches(pair)
    # freeze one set of dropout masks per domain by running a throwaway pass
    masks_per_domain = []
    for db in batches:
        trace = forward(model, db.domain, db.x, "train", rng.child(f"freeze:{db.domain}"))
        masks_per_domain.append(trace.masks)

    def loss_fn(m: MdatModel):
        total = 0.0
        grads: dict[str, np.ndarray] = {}
        sig: list = []
        for db, masks in zip(batches, masks_per_domain):
            trace = forward(m, db.domain, db.x, "train", masks=masks)
            sig.extend(_relu_signature(trace))
            dlogits_c = np.zeros_like(trace.logits_c)
            dlogits_cp = np.zeros_like(trace.logits_cp)
            if loss_name == "jc":
                if db.n_labeled:
                    jc, dce, clamped = _ce_loss_grad(
                        trace.logits_c[:db.n_labeled], db.labels, cfg.prob_clamp)
                    dlogits_c[:db.n_labeled] = dce
                    total += jc
                    sig.append(clamped.tobytes())
            elif loss_name == "jd":
                jd, dcp, pseudo, clamped = _jd_loss_grad(
                    trace.logits_c, trace.logits_cp, cfg.beta, cfg.prob_clamp)
                dlogits_cp = dcp
                total += jd
                sig.append(pseudo.tobytes())
                sig.append(clamped.tobytes())
            elif loss_name == "jc_l1":
                if db.n_labeled:
                    jc_c, d_c, cl_c = _ce_loss_grad(
                        trace.logits_c[:db.n_labeled], db.labels, cfg.prob_clamp)
                    jc_cp, d_cp, cl_cp = _ce_loss_grad(
                        trace.logits_cp[:db.n_labeled], db.labels, cfg.prob_clamp)
                    dlogits_c[:db.n_labeled] = d_c
                    dlogits_cp[:db.n_labeled] = d_cp
                    total += jc_c + jc_cp
                    sig.append(cl_c.tobytes())
                    sig.append(cl_cp.tobytes())
            else:  # jd_l1
                jd, d1, d2, signs = _l1_loss_grad(trace.logits_c, trace.logits_cp)
                dlogits_c, dlogits_cp = d1, d2
                total += jd
                sig.append(signs.tobytes())
            part = backward(m, trace, dlogits_c, dlogits_cp)
            accumulate_grads(grads, part)
        for name in m.components():
            if name not in grads:
                grads[name] = np.zeros(m.components()[name].flat.size)
        return total, grads, tuple(sig)

    return loss_fn
