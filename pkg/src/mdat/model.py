"""Shared/domain-specific extractor architecture with dual classifiers,
hand-derived forward and backward passes, a finite-difference gradient
checker, and a bit-exact binary checkpoint format.

Components: one shared feature extractor, one extractor per domain, a main
classifier and an auxiliary classifier.  The classifiers consume the
concatenation [shared features, domain-specific features].  Rectifier
hidden layers carry inverted dropout after the activation; outputs are
linear.  The rectifier subgradient at exactly 0 is taken as 0, which keeps
gradients deterministic.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteError, ShapeError
from .linalg import (
    RngState,
    SparseBatch,
    SparseVector,
    affine_forward_batch,
    bernoulli_mask,
)
from . import kernels

CHECKPOINT_MAGIC = b"MDATCKPT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# parameter containers

@dataclass(frozen=True)
class MlpSpec:
    """Layer dims (input, hidden..., output); rectifier+dropout on hidden."""

    dims: tuple[int, ...]
    keep_prob: float = 1.0

    def __post_init__(self) -> None:
        if len(self.dims) < 2:
            raise ConfigError("an MLP needs at least input and output dims")
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"dims must be positive, got {self.dims}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must be in (0, 1], got {self.keep_prob}")

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.dims[:-1], self.dims[1:]))


class MlpParams:
    """Flat float64 parameter vector with (W, b) views per layer."""

    def __init__(self, spec: MlpSpec, flat: np.ndarray | None = None):
        self.spec = spec
        if flat is None:
            flat = np.zeros(spec.n_params, dtype=np.float64)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (spec.n_params,):
            raise ShapeError(f"expected {spec.n_params} params, got {flat.shape}")
        self.flat = flat
        self.layers: list[tuple[np.ndarray, np.ndarray]] = []
        off = 0
        for fan_in, fan_out in zip(spec.dims[:-1], spec.dims[1:]):
            W = self.flat[off:off + fan_out * fan_in].reshape(fan_out, fan_in)
            off += fan_out * fan_in
            b = self.flat[off:off + fan_out]
            off += fan_out
            self.layers.append((W, b))

    def init_fan_uniform(self, rng: RngState) -> None:
        """Uniform weights at variance 2/(fan_in+fan_out); zero biases."""
        for W, b in self.layers:
            fan_out, fan_in = W.shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            W[...] = rng.uniform(-a, a, size=W.shape)
            b[...] = 0.0

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.flat.copy())


@dataclass(frozen=True)
class ModelSpec:
    vocab_dim: int
    k: int
    m: int
    extractor_hidden: tuple[int, ...] = (1000, 500)
    d_shared: int = 128
    d_specific: int = 64
    keep_prob: float = 0.6

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ConfigError("need at least one domain")
        if self.k < 2:
            raise ConfigError("need at least two classes")

    @property
    def shared_spec(self) -> MlpSpec:
        return MlpSpec((self.vocab_dim, *self.extractor_hidden, self.d_shared),
                       self.keep_prob)

    @property
    def specific_spec(self) -> MlpSpec:
        return MlpSpec((self.vocab_dim, *self.extractor_hidden, self.d_specific),
                       self.keep_prob)

    @property
    def classifier_spec(self) -> MlpSpec:
        d = self.d_shared + self.d_specific
        return MlpSpec((d, d, self.k), self.keep_prob)


class MdatModel:
    """All trainable components; parameters owned as flat float64 vectors."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.shared = MlpParams(spec.shared_spec)
        self.specific = [MlpParams(spec.specific_spec) for _ in range(spec.m)]
        self.classifier = MlpParams(spec.classifier_spec)
        self.auxiliary = MlpParams(spec.classifier_spec)

    def components(self) -> dict[str, MlpParams]:
        out = {"shared": self.shared}
        for i, p in enumerate(self.specific):
            out[f"specific_{i}"] = p
        out["classifier"] = self.classifier
        out["auxiliary"] = self.auxiliary
        return out

    def component_names(self) -> list[str]:
        return list(self.components().keys())

    def extractor_names(self) -> list[str]:
        return ["shared"] + [f"specific_{i}" for i in range(self.spec.m)]

    def init_params(self, rng: RngState) -> None:
        for name, params in self.components().items():
            params.init_fan_uniform(rng.child(f"init:{name}"))

    def copy(self) -> "MdatModel":
        clone = MdatModel(self.spec)
        clone.shared = self.shared.copy()
        clone.specific = [p.copy() for p in self.specific]
        clone.classifier = self.classifier.copy()
        clone.auxiliary = self.auxiliary.copy()
        return clone

    def n_params(self) -> int:
        return sum(p.flat.size for p in self.components().values())

    def param_hash(self, name: str) -> str:
        return hashlib.sha256(self.components()[name].flat.tobytes()).hexdigest()

    def param_hashes(self) -> dict[str, str]:
        return {name: self.param_hash(name) for name in self.components()}


# ---------------------------------------------------------------------------
# forward / backward

@dataclass
class ForwardTrace:
    """Everything needed to replay one forward pass exactly and to run the
    exact backward pass: per-layer inputs, pre-activations and dropout
    masks per component, plus the concatenated features and both logits."""

    mode: str
    domain: int | None
    caches: dict[str, list[tuple]]  # component -> [(A_in, Z, mask), ...]
    masks: dict[tuple[str, int], np.ndarray]
    shared_out: np.ndarray = field(default=None)  # type: ignore[assignment]
    specific_out: np.ndarray = field(default=None)  # type: ignore[assignment]
    features: np.ndarray = field(default=None)  # type: ignore[assignment]
    logits_c: np.ndarray = field(default=None)  # type: ignore[assignment]
    logits_cp: np.ndarray = field(default=None)  # type: ignore[assignment]

    @property
    def batch_size(self) -> int:
        return self.logits_c.shape[0]


def _as_batch(x):
    if isinstance(x, SparseVector):
        return SparseBatch.from_vectors([x])
    if isinstance(x, SparseBatch):
        return x
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :]
    return x


def _mlp_forward(name: str, params: MlpParams, X, mode: str,
                 rng: RngState | None, masks: dict, trace: ForwardTrace) -> np.ndarray:
    A = X
    caches = []
    n_layers = params.spec.n_layers
    for li, (W, b) in enumerate(params.layers):
        Z = affine_forward_batch(W, b, A)
        if li < n_layers - 1:
            out = np.maximum(Z, 0.0)
            mask = None
            if mode == "train" and params.spec.keep_prob < 1.0:
                key = (name, li)
                if key in masks:
                    mask = masks[key]
                else:
                    mask = bernoulli_mask(rng, out.size,
                                          params.spec.keep_prob).reshape(out.shape)
                trace.masks[key] = mask
                out = out * mask
            caches.append((A, Z, mask))
            A = out
        else:
            caches.append((A, Z, None))
            A = Z
    trace.caches[name] = caches
    return A


def forward(model: MdatModel, domain: int | None, x, mode: str = "train",
            rng: RngState | None = None,
            masks: dict | None = None) -> ForwardTrace:
    """Run one batch through extractors and both classifiers.

    ``domain=None`` runs the multi-source UDA path: the domain-specific
    half of the feature concatenation is the zero vector and no specific
    extractor participates.  ``masks`` replays previously drawn dropout
    masks (needed to freeze the network for gradient checks).
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be train or eval, got {mode!r}")
    if domain is not None and not 0 <= domain < model.spec.m:
        raise ConfigError(f"domain index {domain} out of range for m={model.spec.m}")
    X = _as_batch(x)
    needs_masks = mode == "train" and model.spec.keep_prob < 1.0
    if needs_masks and rng is None and masks is None:
        raise ConfigError("train-mode forward with dropout needs an rng or fixed masks")
    trace = ForwardTrace(mode=mode, domain=domain, caches={},
                         masks=dict(masks) if masks else {})
    shared_out = _mlp_forward("shared", model.shared, X, mode, rng, trace.masks, trace)
    if domain is None:
        n_rows = shared_out.shape[0]
        specific_out = np.zeros((n_rows, model.spec.d_specific))
    else:
        specific_out = _mlp_forward(f"specific_{domain}", model.specific[domain],
                                    X, mode, rng, trace.masks, trace)
    features = np.concatenate([shared_out, specific_out], axis=1)
    trace.shared_out = shared_out
    trace.specific_out = specific_out
    trace.features = features
    trace.logits_c = _mlp_forward("classifier", model.classifier, features,
                                  mode, rng, trace.masks, trace)
    trace.logits_cp = _mlp_forward("auxiliary", model.auxiliary, features,
                                   mode, rng, trace.masks, trace)
    return trace


def forward_msuda(model: MdatModel, x, mode: str = "train",
                  rng: RngState | None = None,
                  masks: dict | None = None) -> ForwardTrace:
    """Forward with the domain-specific feature half zeroed."""
    return forward(model, None, x, mode, rng, masks)


def _mlp_backward(params: MlpParams, caches: list[tuple], dOut: np.ndarray,
                  grad_flat: np.ndarray, *, need_input_grad: bool) -> np.ndarray | None:
    dA = dOut
    dX = None
    off = params.spec.n_params
    for li in range(params.spec.n_layers - 1, -1, -1):
        W, _b = params.layers[li]
        A_in, Z, mask = caches[li]
        if li < params.spec.n_layers - 1:
            dZ = dA * (Z > 0)
            if mask is not None:
                dZ = dZ * mask
        else:
            dZ = dA
        fan_out, fan_in = W.shape
        off -= fan_out
        grad_flat[off:off + fan_out] += dZ.sum(axis=0)
        off -= fan_out * fan_in
        dW_view = grad_flat[off:off + fan_out * fan_in].reshape(fan_out, fan_in)
        if isinstance(A_in, SparseBatch):
            dW_view += kernels.grad_weights_sparse(
                np.ascontiguousarray(dZ), A_in.indptr, A_in.indices,
                A_in.values, A_in.dim)
        else:
            dW_view += dZ.T @ A_in
        if li > 0 or need_input_grad:
            if isinstance(A_in, SparseBatch):
                dX = None  # input gradient of a sparse input layer is unused
            else:
                dX = dZ @ W
        dA = dX
    return dX


def backward(model: MdatModel, trace: ForwardTrace, dlogits_c: np.ndarray,
             dlogits_cp: np.ndarray, components: list[str] | None = None,
             sign: float = 1.0) -> dict[str, np.ndarray]:
    """Exact reverse pass; returns flat parameter gradients per component.

    Gradients flow from both classifiers into the concatenated features and
    from there into the extractors; the shared half routes only to the
    shared extractor and the specific half only to the trace's domain
    extractor.  ``components`` restricts which parameter gradients are
    returned (upstream feature gradients are unaffected), and ``sign``
    scales everything (descent vs ascent is the caller's call).
    """
    if trace.mode != "train":
        raise ConfigError("backward needs a train-mode trace")
    dlogits_c = np.asarray(dlogits_c, dtype=np.float64)
    dlogits_cp = np.asarray(dlogits_cp, dtype=np.float64)
    if dlogits_c.shape != trace.logits_c.shape:
        raise ShapeError(f"dlogits_c shape {dlogits_c.shape} != {trace.logits_c.shape}")
    if dlogits_cp.shape != trace.logits_cp.shape:
        raise ShapeError(f"dlogits_cp shape {dlogits_cp.shape} != {trace.logits_cp.shape}")

    if components is None:
        components = list(trace.caches.keys())
    unknown = set(components) - set(model.components())
    if unknown:
        raise ConfigError(f"unknown components {sorted(unknown)}")

    grads = {name: np.zeros(model.components()[name].flat.size)
             for name in components}

    def grad_buf(name: str) -> np.ndarray:
        return grads.get(name, np.zeros(model.components()[name].flat.size))

    domain_name = None if trace.domain is None else f"specific_{trace.domain}"
    need_ext = "shared" in grads or (domain_name is not None and domain_name in grads)
    dfeat = None
    if need_ext or "classifier" in grads:
        d = _mlp_backward(model.classifier, trace.caches["classifier"],
                          dlogits_c, grad_buf("classifier"), need_input_grad=need_ext)
        if need_ext:
            dfeat = d
    if need_ext or "auxiliary" in grads:
        d = _mlp_backward(model.auxiliary, trace.caches["auxiliary"],
                          dlogits_cp, grad_buf("auxiliary"), need_input_grad=need_ext)
        if need_ext:
            dfeat = d if dfeat is None else dfeat + d
    if need_ext:
        ds = model.spec.d_shared
        if "shared" in grads:
            _mlp_backward(model.shared, trace.caches["shared"], dfeat[:, :ds],
                          grad_buf("shared"), need_input_grad=False)
        if domain_name is not None and domain_name in grads:
            _mlp_backward(model.specific[trace.domain], trace.caches[domain_name],
                          dfeat[:, ds:], grad_buf(domain_name), need_input_grad=False)
    if sign != 1.0:
        for g in grads.values():
            g *= sign
    return grads


def accumulate_grads(total: dict[str, np.ndarray],
                     part: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    for name, g in part.items():
        if name in total:
            total[name] += g
        else:
            total[name] = g.copy()
    return total


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class ComponentCheck:
    name: str
    n_checked: int
    n_excluded: int
    max_rel_err: float
    worst_index: int


@dataclass
class GradCheckReport:
    components: list[ComponentCheck]
    step: float

    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.components), default=0.0)

    def total_excluded(self) -> int:
        return sum(c.n_excluded for c in self.components)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err() <= tol


def grad_check(model: MdatModel, loss_fn, *, components: list[str] | None = None,
               coords_per_component: int = 60, step: float = 1e-5,
               rng: RngState, rel_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(model)`` must return ``(value, grads, signature)`` where
    ``grads`` maps component names to flat gradients and ``signature`` is a
    hashable fingerprint of every kink-relevant discrete state (rectifier
    sign patterns, predicted pseudo-labels, clamp activity, absolute-value
    signs).  A coordinate whose +/-step evaluations land on different
    signatures straddles a kink and is excluded rather than compared.
    Relative error uses max(|analytic|, |numeric|, rel_floor) as the scale.
    Dropout must be frozen inside ``loss_fn`` (fixed masks).
    """
    value, grads, _sig = loss_fn(model)
    if not np.isfinite(value):
        raise NonFiniteError(f"loss is not finite: {value}")
    if components is None:
        components = list(grads.keys())
    all_params = model.components()
    report = []
    for name in components:
        params = all_params[name]
        analytic = grads[name]
        n = params.flat.size
        pick = rng.child(f"coords:{name}")
        count = min(coords_per_component, n)
        coords = pick.choice(n, size=count, replace=False)
        max_rel, worst, excluded, checked = 0.0, -1, 0, 0
        for j in coords:
            j = int(j)
            orig = params.flat[j]
            params.flat[j] = orig + step
            up, _, sig_up = loss_fn(model)
            params.flat[j] = orig - step
            down, _, sig_down = loss_fn(model)
            params.flat[j] = orig
            if sig_up != sig_down:
                excluded += 1
                continue
            numeric = (up - down) / (2.0 * step)
            scale = max(abs(analytic[j]), abs(numeric), rel_floor)
            rel = abs(analytic[j] - numeric) / scale
            checked += 1
            if rel > max_rel:
                max_rel, worst = rel, j
        report.append(ComponentCheck(name, checked, excluded, max_rel, worst))
    return GradCheckReport(report, step)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: MdatModel, path: str, *,
                    seed: int | None = None, extra: dict | None = None) -> None:
    spec = model.spec
    header = {
        "format_version": CHECKPOINT_VERSION,
        "vocab_dim": spec.vocab_dim,
        "k": spec.k,
        "m": spec.m,
        "extractor_hidden": list(spec.extractor_hidden),
        "d_shared": spec.d_shared,
        "d_specific": spec.d_specific,
        "keep_prob": spec.keep_prob,
        "seed": seed,
        "dropout_position": "after-activation",
        "components": model.component_names(),
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in model.component_names():
            arr = model.components()[name].flat
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path: str) -> tuple[MdatModel, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<HI", fh.read(6))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        spec = ModelSpec(
            vocab_dim=header["vocab_dim"], k=header["k"], m=header["m"],
            extractor_hidden=tuple(header["extractor_hidden"]),
            d_shared=header["d_shared"], d_specific=header["d_specific"],
            keep_prob=header["keep_prob"],
        )
        model = MdatModel(spec)
        for name in model.component_names():
            params = model.components()[name]
            raw = fh.read(params.flat.size * 8)
            if len(raw) != params.flat.size * 8:
                raise ConfigError(f"{path}: truncated parameter block for {name}")
            params.flat[...] = np.frombuffer(raw, dtype="<f8")
        trailing = fh.read(1)
        if trailing:
            raise ConfigError(f"{path}: trailing bytes after parameter blocks")
    return model, header
