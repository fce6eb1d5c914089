"""Monte-Carlo empirical Rademacher complexity and numerical evaluation of
the computable terms of the multi-domain generalization bound.

The bound evaluator assembles, per domain i with samples stacked into one
table: the margin error of the scorer, its margin discrepancy against the
pooled sample set, Rademacher terms for the one-coordinate projection
family and the own-argmax projection family, and the finite-sample
confidence terms.  The ideal-joint-error additive constant is not
computable from data; the report totals everything except it and says so.

Suprema are exact enumeration for finite classes and multi-start random
search (restarts plus local perturbation) for parametric families, in
which case every reported supremum is a lower bound and the report is
flagged accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, SizeLimitError
from .linalg import RngState
from .margin import (
    FiniteHypothesisClass,
    ScoreTable,
    margin_disparity,
    margin_discrepancy_oracle,
    margin_error,
)

EXACT_MAX_SAMPLES = 20
_CHUNK = 4096


@dataclass
class RademacherEstimate:
    value: float
    std_error: float
    draws: int
    sup_mode: str  # "enumerate-finite-class" | "random-search-parametric"


class ParametricFamily:
    """Interface for random-search suprema over a parametric function family.

    Implementations provide ``n`` (sample count), ``sample`` (a fresh
    parameter point), ``perturb`` (a local move scaled by ``scale``), and
    ``values`` (the function values on the fixed sample set).
    """

    n: int

    def sample(self, rng: RngState):
        raise NotImplementedError

    def perturb(self, theta, scale: float, rng: RngState):
        raise NotImplementedError

    def values(self, theta) -> np.ndarray:
        raise NotImplementedError


def _sign_draws(rng: RngState, draws: int, n: int) -> np.ndarray:
    return rng.integers(0, 2, size=(draws, n)).astype(np.float64) * 2.0 - 1.0


def _search_sup(family: ParametricFamily, sigma: np.ndarray, rng: RngState,
                *, restarts: int = 8, local_rounds: int = 2,
                local_width: int = 4) -> float:
    n = sigma.size
    best_val = -np.inf
    best_theta = None
    for _ in range(restarts):
        theta = family.sample(rng)
        val = float(family.values(theta) @ sigma) / n
        if val > best_val:
            best_val, best_theta = val, theta
    scale = 1.0
    for _ in range(local_rounds):
        scale *= 0.5
        for _ in range(local_width):
            theta = family.perturb(best_theta, scale, rng)
            val = float(family.values(theta) @ sigma) / n
            if val > best_val:
                best_val, best_theta = val, theta
    return best_val


def empirical_rademacher(family, *, draws: int = 200, rng: RngState
                         ) -> RademacherEstimate:
    """Monte-Carlo estimate of E_sigma sup (1/n) sum sigma_i f(z_i).

    ``family`` is either a 2-D float array (one row per function, one
    column per sample; the sup is exact) or a ParametricFamily (the sup is
    a random-search lower bound).
    """
    if draws < 1:
        raise ConfigError(f"draws must be >= 1, got {draws}")
    if isinstance(family, ParametricFamily):
        n = family.n
        if n < 1:
            raise ValueError("empty sample set")
        sigmas = _sign_draws(rng.child("sigma"), draws, n)
        search_rng = rng.child("search")
        sups = np.array([
            _search_sup(family, sigmas[d], search_rng.child(f"draw:{d}"))
            for d in range(draws)
        ])
        mode = "random-search-parametric"
    else:
        values = np.asarray(family, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ValueError("finite family must be a nonempty (n_funcs, n) array")
        n = values.shape[1]
        if n < 1:
            raise ValueError("empty sample set")
        sigmas = _sign_draws(rng.child("sigma"), draws, n)
        sups = np.max(values @ sigmas.T, axis=0) / n
        mode = "enumerate-finite-class"
    value = float(np.mean(sups))
    std_error = float(np.std(sups, ddof=1) / math.sqrt(draws)) if draws > 1 else 0.0
    return RademacherEstimate(value, std_error, draws, mode)


def rademacher_exact_tiny(values: np.ndarray) -> float:
    """Exact expectation over all 2^n sign vectors; limited to n <= 20."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 1:
        raise ValueError("need a nonempty (n_funcs, n) array")
    n = values.shape[1]
    if n > EXACT_MAX_SAMPLES:
        raise SizeLimitError(f"exact enumeration limited to n <= {EXACT_MAX_SAMPLES}")
    total = 0.0
    n_sigma = 1 << n
    shifts = np.arange(n, dtype=np.uint64)
    for start in range(0, n_sigma, _CHUNK):
        stop = min(start + _CHUNK, n_sigma)
        ints = np.arange(start, stop, dtype=np.uint64)
        signs = (((ints[:, None] >> shifts[None, :]) & 1).astype(np.float64) * 2.0 - 1.0)
        total += float(np.max(values @ signs.T, axis=0).sum())
    return total / n / n_sigma


def massart_bound(class_size: int, n: int, range_bound: float = 1.0) -> float:
    """Finite-class control: range * sqrt(2 ln|F| / n); 0 for a singleton."""
    if class_size < 1 or n < 1:
        raise ConfigError("class_size and n must be >= 1")
    return range_bound * math.sqrt(2.0 * math.log(class_size) / n)


# ---------------------------------------------------------------------------
# bound report

@dataclass
class DomainBoundTerms:
    name: str
    n: int
    margin_err: float
    discrepancy: float
    rad_pi1: RademacherEstimate
    rad_pih: RademacherEstimate
    confidence: float


@dataclass
class BoundReport:
    """Computable terms of the multi-domain margin bound, minus the
    unresolved ideal-joint-error constant."""

    rho: float
    delta: float
    k: int
    m: int
    n_bar: float
    domains: list[DomainBoundTerms]
    rad_pih_pooled: RademacherEstimate
    confidence_pooled: float
    sup_mode: str
    discrepancy_mode: str  # "exact-oracle" | "surrogate-lower-bound"
    total: float = 0.0
    notes: list[str] = field(default_factory=list)

    LAMBDA_NOTE = (
        "total excludes the ideal-joint-error constant, which is independent "
        "of the scorer and not computable from data"
    )

    def parts(self) -> dict[str, float]:
        """Clamped-nonnegative additive parts; total is their exact sum."""
        out: dict[str, float] = {}
        inv_m = 1.0 / self.m
        for d in self.domains:
            out[f"{d.name}.margin_err"] = inv_m * d.margin_err
            out[f"{d.name}.discrepancy"] = inv_m * max(0.0, d.discrepancy)
            out[f"{d.name}.rad_pi1"] = inv_m * (8.0 / self.rho) * max(0.0, d.rad_pi1.value)
            out[f"{d.name}.rad_pih"] = inv_m * (2.0 / self.rho) * max(0.0, d.rad_pih.value)
            out[f"{d.name}.confidence"] = inv_m * 2.0 * d.confidence
        out["pooled.rad_pih"] = (2.0 / self.rho) * max(0.0, self.rad_pih_pooled.value)
        out["pooled.confidence"] = self.confidence_pooled
        return out

    def compute_total(self) -> float:
        return float(np.sum(np.fromiter(self.parts().values(), dtype=np.float64)))

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "delta": self.delta,
            "k": self.k,
            "m": self.m,
            "n_bar": self.n_bar,
            "sup_mode": self.sup_mode,
            "discrepancy_mode": self.discrepancy_mode,
            "lambda_note": self.LAMBDA_NOTE,
            "notes": list(self.notes),
            "domains": [
                {
                    "name": d.name,
                    "n": d.n,
                    "margin_err": d.margin_err,
                    "discrepancy": d.discrepancy,
                    "rad_pi1": {"value": d.rad_pi1.value, "std_error": d.rad_pi1.std_error,
                                "draws": d.rad_pi1.draws},
                    "rad_pih": {"value": d.rad_pih.value, "std_error": d.rad_pih.std_error,
                                "draws": d.rad_pih.draws},
                    "confidence": d.confidence,
                }
                for d in self.domains
            ],
            "pooled": {
                "rad_pih": {"value": self.rad_pih_pooled.value,
                            "std_error": self.rad_pih_pooled.std_error,
                            "draws": self.rad_pih_pooled.draws},
                "confidence": self.confidence_pooled,
            },
            "parts": self.parts(),
            "total_minus_lambda": self.total,
        }

    def to_text(self) -> str:
        lines = [
            f"rho = {self.rho!r}",
            f"delta = {self.delta!r}",
            f"k = {self.k}",
            f"m = {self.m}",
            f"n_bar = {self.n_bar!r}",
            f"sup_mode = {self.sup_mode}",
            f"discrepancy_mode = {self.discrepancy_mode}",
        ]
        for key, val in self.parts().items():
            lines.append(f"part.{key} = {val!r}")
        lines.append(f"total_minus_lambda = {self.total!r}")
        lines.append(f"lambda_note = {self.LAMBDA_NOTE}")
        for note in self.notes:
            lines.append(f"note = {note}")
        return "\n".join(lines) + "\n"


def _confidence(delta: float, n: float) -> float:
    return math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def evaluate_mdtc_bound(domain_tables: list[ScoreTable], family, *,
                        rho: float, delta: float = 0.05, draws: int = 200,
                        rng: RngState,
                        surrogate_tables: list[ScoreTable] | None = None,
                        domain_names: list[str] | None = None
                        ) -> BoundReport:
    """Assemble the computable bound terms for one scorer.

    ``domain_tables`` holds the scorer's labeled score table per domain;
    the pooled set is their concatenation in order.  ``family`` is either a
    FiniteHypothesisClass over the stacked samples (discrepancies and
    Rademacher suprema exact) or a BoundFamilyProvider for parametric
    models, in which case discrepancies come from the provided candidate
    tables (auxiliary classifier and parameter perturbations) as a flagged
    lower-bound surrogate.
    """
    if rho <= 0:
        raise ConfigError(f"rho must be > 0, got {rho}")
    if not 0.0 < delta < 1.0 / 3.0:
        raise ConfigError(f"delta must lie in (0, 1/3), got {delta}")
    if not domain_tables:
        raise ConfigError("need at least one domain table")
    for t in domain_tables:
        if t.labels is None:
            raise ValueError("domain tables must carry labels")

    m = len(domain_tables)
    if domain_names is None:
        domain_names = [f"domain{i}" for i in range(m)]
    sizes = [t.n for t in domain_tables]
    n_total = sum(sizes)
    n_bar = n_total / m
    k = domain_tables[0].k
    stacked = ScoreTable(np.concatenate([t.scores for t in domain_tables]),
                         np.concatenate([t.labels for t in domain_tables]))
    slices = []
    start = 0
    for size in sizes:
        slices.append(np.arange(start, start + size))
        start += size
    pooled_idx = np.arange(n_total)

    notes = [
        "population expectations approximated by empirical means over the "
        "provided samples",
    ]
    finite = isinstance(family, FiniteHypothesisClass)
    if finite:
        if family.n != n_total or family.k != k:
            raise ShapeError("hypothesis class must cover the stacked samples")
        pi1 = family.pi_1_values()
        pih = family.pi_h_values()
        disc_mode = "exact-oracle"
    else:
        if surrogate_tables is None:
            surrogate_tables = family.discrepancy_candidates()
        disc_mode = "surrogate-lower-bound"
        notes.append(
            "margin discrepancies are maxima over finitely many candidate "
            "scorers; true suprema may be larger"
        )

    domains = []
    for i, table in enumerate(domain_tables):
        err = margin_error(table, rho)
        if finite:
            disc, _ = margin_discrepancy_oracle(stacked, family, slices[i],
                                                pooled_idx, rho)
            rad1 = empirical_rademacher(pi1[:, slices[i]], draws=draws,
                                        rng=rng.child(f"pi1:{i}"))
            radh = empirical_rademacher(pih[:, slices[i]], draws=draws,
                                        rng=rng.child(f"pih:{i}"))
        else:
            disc = max(
                margin_disparity(_sub(stacked, pooled_idx), _sub(c, pooled_idx), rho)
                - margin_disparity(_sub(stacked, slices[i]), _sub(c, slices[i]), rho)
                for c in surrogate_tables
            )
            rad1 = empirical_rademacher(family.pi_1_family(slices[i]), draws=draws,
                                        rng=rng.child(f"pi1:{i}"))
            radh = empirical_rademacher(family.pi_h_family(slices[i]), draws=draws,
                                        rng=rng.child(f"pih:{i}"))
        domains.append(DomainBoundTerms(
            name=domain_names[i], n=sizes[i], margin_err=err, discrepancy=disc,
            rad_pi1=rad1, rad_pih=radh, confidence=_confidence(delta, sizes[i]),
        ))

    if finite:
        radh_pooled = empirical_rademacher(pih, draws=draws, rng=rng.child("pih:pooled"))
        sup_mode = "enumerate-finite-class"
    else:
        radh_pooled = empirical_rademacher(family.pi_h_family(pooled_idx),
                                           draws=draws, rng=rng.child("pih:pooled"))
        sup_mode = "random-search-parametric"

    report = BoundReport(
        rho=rho, delta=delta, k=k, m=m, n_bar=n_bar, domains=domains,
        rad_pih_pooled=radh_pooled, confidence_pooled=_confidence(delta, n_bar),
        sup_mode=sup_mode, discrepancy_mode=disc_mode, notes=notes,
    )
    report.total = report.compute_total()
    return report


def _sub(table: ScoreTable, idx: np.ndarray) -> ScoreTable:
    labels = table.labels[idx] if table.labels is not None else None
    return ScoreTable(table.scores[idx], labels)


# ---------------------------------------------------------------------------
# parametric family backed by a trained model

class _ModelFamily(ParametricFamily):
    """One projection family over a fixed sample subset.

    ``mode`` is "pi_h" (score at the hypothesis's own argmax) or "pi_1"
    (score at a class carried inside the parameter point).
    """

    def __init__(self, provider: "ModelBoundProvider", idx: np.ndarray, mode: str):
        self.provider = provider
        self.idx = np.asarray(idx, dtype=np.int64)
        self.mode = mode
        self.n = int(self.idx.size)

    def sample(self, rng: RngState):
        theta = self.provider.sample_theta(rng)
        if self.mode == "pi_1":
            return theta, int(rng.integers(0, self.provider.k))
        return theta

    def perturb(self, theta, scale: float, rng: RngState):
        if self.mode == "pi_1":
            vec, y = theta
            return self.provider.perturb_theta(vec, scale, rng), y
        return self.provider.perturb_theta(theta, scale, rng)

    def values(self, theta) -> np.ndarray:
        if self.mode == "pi_1":
            vec, y = theta
            logits = self.provider.logits_for(vec, self.idx)
            return logits[:, y]
        logits = self.provider.logits_for(theta, self.idx)
        return np.max(logits, axis=1)


class ModelBoundProvider:
    """Bound-evaluation glue for a trained model.

    The hypothesis point is the concatenation of the extractor and main
    classifier parameter vectors; family members are Gaussian perturbations
    of the trained point at a configurable scale.  Discrepancy candidates
    are the trained auxiliary classifier plus sampled perturbations, so the
    reported margin discrepancies are lower-bound surrogates.
    """

    def __init__(self, model, corpus, *, scale: float = 0.05,
                 n_candidates: int = 8, cap_per_domain: int = 64,
                 rng: RngState):
        from .linalg import SparseBatch
        from .model import forward

        self._forward = forward
        self._scratch = model.copy()
        self._reference = model.copy()
        self.k = model.spec.k
        self.scale = scale
        self.n_candidates = n_candidates
        self._rng = rng
        self._batches: list[SparseBatch] = []
        self._labels: list[np.ndarray] = []
        self.names: list[str] = []
        for domain in corpus.domains:
            if not domain.labeled:
                raise ConfigError(f"domain {domain.name} has no labeled samples")
            lab = domain.labeled
            if len(lab) > cap_per_domain:
                pick = rng.child(f"cap:{domain.name}")
                sel = sorted(pick.choice(len(lab), size=cap_per_domain,
                                         replace=False).tolist())
                lab = [lab[i] for i in sel]
            self._batches.append(SparseBatch.from_vectors([v for v, _ in lab]))
            self._labels.append(np.array([y for _, y in lab], dtype=np.int64))
            self.names.append(domain.name)
        self._theta_names = (["shared"]
                             + [f"specific_{i}" for i in range(model.spec.m)]
                             + ["classifier"])
        self._theta0 = np.concatenate(
            [model.components()[n].flat for n in self._theta_names])
        self._sizes = [len(lab) for lab in self._labels]
        self._offsets = np.concatenate([[0], np.cumsum(self._sizes)])
        self._cache_theta: np.ndarray | None = None
        self._cache_logits: np.ndarray | None = None

    # -- theta plumbing ----------------------------------------------------
    def sample_theta(self, rng: RngState) -> np.ndarray:
        return self._theta0 + self.scale * rng.standard_normal(self._theta0.size)

    def perturb_theta(self, theta: np.ndarray, scale: float,
                      rng: RngState) -> np.ndarray:
        return theta + self.scale * scale * rng.standard_normal(theta.size)

    def _stacked_logits(self, theta: np.ndarray, *, use_aux: bool = False
                        ) -> np.ndarray:
        if (not use_aux and self._cache_theta is not None
                and theta is self._cache_theta):
            return self._cache_logits
        comps = self._scratch.components()
        off = 0
        for name in self._theta_names:
            size = comps[name].flat.size
            comps[name].flat[...] = theta[off:off + size]
            off += size
        parts = []
        for di, batch in enumerate(self._batches):
            trace = self._forward(self._scratch, di, batch, "eval")
            parts.append(trace.logits_cp if use_aux else trace.logits_c)
        logits = np.concatenate(parts)
        if not use_aux:
            self._cache_theta = theta
            self._cache_logits = logits
        return logits

    def logits_for(self, theta: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self._stacked_logits(theta)[idx]

    # -- evaluate_mdtc_bound provider interface -----------------------------
    def pi_h_family(self, idx: np.ndarray) -> _ModelFamily:
        return _ModelFamily(self, idx, "pi_h")

    def pi_1_family(self, idx: np.ndarray) -> _ModelFamily:
        return _ModelFamily(self, idx, "pi_1")

    def discrepancy_candidates(self) -> list[ScoreTable]:
        tables = [ScoreTable(self._stacked_logits(self._theta0, use_aux=True))]
        crng = self._rng.child("candidates")
        for c in range(self.n_candidates):
            theta = self.sample_theta(crng.child(f"cand:{c}"))
            tables.append(ScoreTable(self._stacked_logits(theta)))
        return tables

    # -- trained-scorer tables ----------------------------------------------
    def domain_tables(self) -> list[ScoreTable]:
        logits = self._stacked_logits(self._theta0)
        out = []
        for i in range(len(self._batches)):
            lo, hi = self._offsets[i], self._offsets[i + 1]
            out.append(ScoreTable(logits[lo:hi], self._labels[i]))
        return out
