"""Command-line surface: data generation, training, cross-validation,
gradient checks, divergence oracles, and bound reports.

Exit codes: 0 success, 1 check/runtime failure, 2 usage or config error.
JSON output carries floats in shortest round-trip form (exact to the bit);
human tables print 6 significant digits.  Every command is deterministic
given its flags and seed, so repeated invocations produce byte-identical
files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import multiprocessing
import os
import sys

import numpy as np

from . import kernels
from .bound import ModelBoundProvider, evaluate_mdtc_bound
from .data import (
    SynthConfig,
    corpus_kfold,
    default_flip_features,
    load_manifest,
    synth_generate,
    write_manifest,
    write_sparse_file,
)
from .errors import ConfigError, NonFiniteError, ParseError, SizeLimitError
from .linalg import RngState
from .margin import (
    FiniteHypothesisClass,
    ScoreTable,
    discrepancy_divergence_oracle,
    hdeltah_divergence_oracle,
    margin_discrepancy_oracle,
    zero_one_discrepancy,
)
from .model import grad_check, load_checkpoint, save_checkpoint
from .train import (
    LOSS_NAMES,
    TrainConfig,
    TrainingAborted,
    evaluate,
    grad_check_config,
    make_loss_closure,
    train,
)


def _fmt6(x: float) -> str:
    return f"{x:.6g}"


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _error(exc: Exception) -> None:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------------------
# run config files

_CONFIG_PARSERS = {
    "alpha": float, "beta": float, "lr": float, "batch_size": int,
    "epochs": int, "seed": int, "eval_cadence": int, "variant": str,
    "msuda_target": str, "extractor_hidden": str, "d_shared": int,
    "d_specific": int, "keep_prob": float, "prob_clamp": float,
    "diag_probe_budget": int, "diag_max_per_domain": int,
    "manifest": str, "out_dir": str,
}


def _parse_hidden(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text or text == "none":
        return ()
    try:
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad hidden layer list {text!r}") from None


def load_run_config(path: str) -> dict:
    """Parse a key-value run config; unknown keys are rejected."""
    out: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _CONFIG_PARSERS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                out[key] = _CONFIG_PARSERS[key](val)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad value for {key}: {val!r}") from None
    return out


def _resolve_train_config(args) -> tuple[TrainConfig, str, str]:
    settings: dict = {}
    if args.config:
        settings.update(load_run_config(args.config))
    for key in _CONFIG_PARSERS:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            settings[key] = flag_val
    manifest = settings.pop("manifest", None)
    out_dir = settings.pop("out_dir", None)
    if manifest is None:
        raise ConfigError("a corpus manifest is required (--manifest or config file)")
    if out_dir is None:
        raise ConfigError("an output directory is required (--out-dir or config file)")
    if "extractor_hidden" in settings and isinstance(settings["extractor_hidden"], str):
        settings["extractor_hidden"] = _parse_hidden(settings["extractor_hidden"])
    return TrainConfig(**settings), manifest, out_dir


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key-value run config file")
    p.add_argument("--manifest", help="corpus manifest path")
    p.add_argument("--out-dir", dest="out_dir", help="output directory")
    p.add_argument("--alpha", type=float, help="adversarial trade-off weight")
    p.add_argument("--beta", type=float, help="margin weight (rho = ln beta)")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eval-cadence", dest="eval_cadence", type=int)
    p.add_argument("--variant", choices=["mdat", "mdat-l1"])
    p.add_argument("--msuda", dest="msuda_target",
                   help="treat this domain as an unlabeled target")
    p.add_argument("--extractor-hidden", dest="extractor_hidden", type=_parse_hidden,
                   help="comma-separated hidden dims, e.g. 1000,500 (or 'none')")
    p.add_argument("--d-shared", dest="d_shared", type=int)
    p.add_argument("--d-specific", dest="d_specific", type=int)
    p.add_argument("--keep-prob", dest="keep_prob", type=float)
    p.add_argument("--prob-clamp", dest="prob_clamp", type=float)
    p.add_argument("--diag-budget", dest="diag_probe_budget", type=int,
                   help="probe steps for the alignment diagnostic (0 disables)")
    p.add_argument("--diag-max-per-domain", dest="diag_max_per_domain", type=int)


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    flips = default_flip_features(args.vocab, args.flip_fraction)
    cfg = SynthConfig(
        m=args.domains, vocab_dim=args.vocab,
        labeled_per_domain=args.labeled, unlabeled_per_domain=args.unlabeled,
        test_per_domain=args.test, shared_strength=args.shared_strength,
        specific_strength=args.specific_strength,
        domain_vocab_strength=args.domain_vocab_strength, flip_features=flips,
        noise_rate=args.noise, seed=args.seed,
    )
    corpus, test_corpus, meta = synth_generate(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    files = {}
    for di, domain in enumerate(corpus.domains):
        lab, unlab, test = (f"{domain.name}.labeled", f"{domain.name}.unlabeled",
                            f"{domain.name}.test")
        write_sparse_file(os.path.join(args.out_dir, lab), list(domain.labeled))
        write_sparse_file(os.path.join(args.out_dir, unlab),
                          [(v, None) for v in domain.unlabeled])
        write_sparse_file(os.path.join(args.out_dir, test),
                          list(test_corpus.domains[di].labeled))
        files[domain.name] = (lab, unlab, test)
    manifest_path = os.path.join(args.out_dir, "manifest.txt")
    write_manifest(manifest_path, corpus, files,
                   metadata={"bayes_accuracy": meta["bayes_accuracy"]})
    print(f"wrote {corpus.m} domains to {args.out_dir} "
          f"(bayes accuracy {_fmt6(meta['bayes_accuracy'])})")
    return 0


# ---------------------------------------------------------------------------
# train

def _metrics_csv(reports, domain_names: list[str]) -> str:
    rows = [["epoch", "domain", "accuracy", "jc", "jd", "diagnostic"]]
    for rep in reports:
        for name in domain_names:
            acc = "" if rep.per_domain_acc is None else repr(rep.per_domain_acc[name])
            diag = "" if rep.diag is None else repr(rep.diag.get(name, ""))
            rows.append([str(rep.epoch), name, acc, "", "", diag])
        avg = "" if rep.avg_acc is None else repr(rep.avg_acc)
        rows.append([str(rep.epoch), "average", avg, repr(rep.jc), repr(rep.jd), ""])
    out = []
    for row in rows:
        out.append(",".join(row))
    return "\n".join(out) + "\n"


def _train_summary(cfg: TrainConfig, result, final_eval, manifest: str) -> dict:
    cfg_dict = dataclasses.asdict(cfg)
    cfg_dict["extractor_hidden"] = list(cfg.extractor_hidden)
    per_domain, avg = final_eval if final_eval else (None, None)
    return {
        "config": cfg_dict,
        "manifest": os.path.basename(manifest),
        "backend": kernels.BACKEND,
        "epochs_run": len(result.reports),
        "final_accuracy": per_domain,
        "final_average_accuracy": avg,
        "best_average_accuracy": result.best_avg_acc,
        "best_epoch": result.best_epoch,
        "diag_initial": result.diag_initial,
        "diag_final": result.diag_final,
        "epoch_losses": [
            {"epoch": r.epoch, "jc": r.jc, "jd": r.jd, "avg_acc": r.avg_acc}
            for r in result.reports
        ],
    }


def cmd_train(args) -> int:
    cfg, manifest, out_dir = _resolve_train_config(args)
    corpus, test_corpus, _meta = load_manifest(manifest)
    if cfg.msuda_target is not None:
        corpus.domain_index(cfg.msuda_target)  # validate early
    os.makedirs(out_dir, exist_ok=True)
    try:
        result = train(corpus, cfg, test_corpus)
    except TrainingAborted as exc:
        # keep the last good state around for a post-mortem
        save_checkpoint(exc.model, os.path.join(out_dir, "final.ckpt"),
                        seed=cfg.seed)
        _write_text(os.path.join(out_dir, "metrics.csv"),
                    _metrics_csv(exc.reports, corpus.domain_names()))
        _error(exc)
        return 1
    msuda_index = (None if cfg.msuda_target is None
                   else corpus.domain_index(cfg.msuda_target))
    final_eval = None
    if test_corpus is not None:
        final_eval = evaluate(result.model, test_corpus, msuda_index)
    _write_text(os.path.join(out_dir, "metrics.csv"),
                _metrics_csv(result.reports, corpus.domain_names()))
    _write_text(os.path.join(out_dir, "summary.json"),
                _json_dumps(_train_summary(cfg, result, final_eval, manifest)))
    save_checkpoint(result.model, os.path.join(out_dir, "final.ckpt"), seed=cfg.seed)
    save_checkpoint(result.best_model, os.path.join(out_dir, "best.ckpt"), seed=cfg.seed)
    if final_eval:
        per_domain, avg = final_eval
        for name, acc in per_domain.items():
            print(f"{name}: {_fmt6(acc)}")
        print(f"average: {_fmt6(avg)}")
    else:
        print("training complete (no test split in manifest)")
    return 0


# ---------------------------------------------------------------------------
# cross-validation

def _run_fold(packed):
    fold_index, train_corpus, test_corpus, cfg_dict = packed
    cfg = TrainConfig(**cfg_dict)
    result = train(train_corpus, cfg, test_corpus)
    per_domain, avg = evaluate(result.model, test_corpus)
    return fold_index, per_domain, avg


def cmd_crossval(args) -> int:
    cfg, manifest, out_dir = _resolve_train_config(args)
    corpus, _test, _meta = load_manifest(manifest)
    folds = corpus_kfold(corpus, args.folds, cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for f, (train_c, test_c) in enumerate(folds):
        cfg_dict = dataclasses.asdict(cfg)
        cfg_dict["seed"] = cfg.seed + f
        cfg_dict["extractor_hidden"] = tuple(cfg.extractor_hidden)
        jobs.append((f, train_c, test_c, cfg_dict))
    if args.workers > 1:
        with multiprocessing.Pool(args.workers) as pool:
            results = pool.map(_run_fold, jobs)
    else:
        results = [_run_fold(job) for job in jobs]
    results.sort(key=lambda r: r[0])

    names = corpus.domain_names()
    per_domain = {name: [acc[name] for _, acc, _ in results] for name in names}
    avgs = [avg for _, _, avg in results]
    report = {
        "folds": args.folds,
        "per_fold_average": avgs,
        "domains": {
            name: {"mean": float(np.mean(per_domain[name])),
                   "std": float(np.std(per_domain[name])),
                   "folds": per_domain[name]}
            for name in names
        },
        "average": {"mean": float(np.mean(avgs)), "std": float(np.std(avgs))},
    }
    _write_text(os.path.join(out_dir, "crossval.json"), _json_dumps(report))
    rows = [["fold", "domain", "accuracy"]]
    for f, acc, avg in results:
        for name in names:
            rows.append([str(f), name, repr(acc[name])])
        rows.append([str(f), "average", repr(avg)])
    _write_text(os.path.join(out_dir, "folds.csv"),
                "\n".join(",".join(r) for r in rows) + "\n")
    for name in names:
        stats = report["domains"][name]
        print(f"{name}: {_fmt6(stats['mean'])} +/- {_fmt6(stats['std'])}")
    print(f"average: {_fmt6(report['average']['mean'])} "
          f"+/- {_fmt6(report['average']['std'])}")
    return 0


# ---------------------------------------------------------------------------
# gradient check

def cmd_gradcheck(args) -> int:
    corpus, cfg, model, pair, rng = grad_check_config(seed=args.seed)
    failed = False
    for loss_name in LOSS_NAMES:
        loss_fn = make_loss_closure(loss_name, pair, cfg, model,
                                    rng.child(f"masks:{loss_name}"))
        if args.corrupt:
            loss_fn = _corrupt_closure(loss_fn)
        report = grad_check(model, loss_fn, coords_per_component=args.coords,
                            step=args.step, rng=rng.child(f"check:{loss_name}"))
        for comp in report.components:
            ok = comp.max_rel_err <= args.tol
            failed = failed or not ok
            print(f"{loss_name:6s} {comp.name:12s} checked={comp.n_checked:3d} "
                  f"kinks_excluded={comp.n_excluded:3d} "
                  f"max_rel_err={_fmt6(comp.max_rel_err)} "
                  f"{'PASS' if ok else 'FAIL'}")
    print("gradcheck: " + ("FAIL" if failed else "PASS"))
    return 1 if failed else 0


def _corrupt_closure(loss_fn):
    def corrupted(model):
        value, grads, sig = loss_fn(model)
        grads["classifier"] = grads["classifier"] + 1.0
        return value, grads, sig
    return corrupted


# ---------------------------------------------------------------------------
# oracle

def _load_instance(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    f = ScoreTable(np.asarray(raw["f"], dtype=np.float64),
                   np.asarray(raw["labels"], dtype=np.int64) if "labels" in raw else None)
    hyps = FiniteHypothesisClass([
        ScoreTable(np.asarray(t, dtype=np.float64)) for t in raw["hypotheses"]
    ])
    s1 = np.asarray(raw["s1"], dtype=np.int64)
    s2 = np.asarray(raw["s2"], dtype=np.int64)
    return f, hyps, s1, s2


def cmd_oracle(args) -> int:
    f, hyps, s1, s2 = _load_instance(args.instance)
    zero_one = lambda a, b: (a != b).astype(np.float64)  # noqa: E731
    values = {
        "hdeltah": hdeltah_divergence_oracle(hyps, s1, s2),
        "discrepancy_divergence_01": discrepancy_divergence_oracle(hyps, s1, s2, zero_one),
        "zero_one_discrepancy": zero_one_discrepancy(f.predictions(), hyps, s1, s2),
        "margin_discrepancy": {},
    }
    for rho in args.rho:
        value, argmax = margin_discrepancy_oracle(f, hyps, s1, s2, rho)
        values["margin_discrepancy"][repr(float(rho))] = {
            "value": value, "argmax": argmax,
        }
    if args.json:
        print(_json_dumps(values), end="")
    else:
        print(f"hdeltah_divergence        {_fmt6(values['hdeltah'])}")
        print(f"discrepancy_divergence_01 {_fmt6(values['discrepancy_divergence_01'])}")
        print(f"zero_one_discrepancy      {_fmt6(values['zero_one_discrepancy'])}")
        for rho in args.rho:
            entry = values["margin_discrepancy"][repr(float(rho))]
            print(f"margin_discrepancy rho={_fmt6(rho)}  {_fmt6(entry['value'])} "
                  f"(argmax hypothesis {entry['argmax']})")
    return 0


# ---------------------------------------------------------------------------
# bound

def cmd_bound(args) -> int:
    model, _header = load_checkpoint(args.checkpoint)
    corpus, _test, _meta = load_manifest(args.manifest)
    rng = RngState(args.seed)
    provider = ModelBoundProvider(
        model, corpus, scale=args.perturb_scale, n_candidates=args.candidates,
        cap_per_domain=args.cap, rng=rng.child("provider"))
    report = evaluate_mdtc_bound(
        provider.domain_tables(), provider, rho=args.rho, delta=args.delta,
        draws=args.draws, rng=rng.child("bound"), domain_names=provider.names)
    payload = _json_dumps(report.to_dict())
    if args.out:
        _write_text(args.out, payload)
        if args.text_out:
            _write_text(args.text_out, report.to_text())
        print(f"total minus lambda: {_fmt6(report.total)} "
              f"({report.discrepancy_mode}; see {args.out})")
    else:
        print(payload, end="")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdat",
        description="Margin-discrepancy adversarial training for multi-domain "
                    "bag-of-features text classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-domain corpus")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--domains", type=int, default=3)
    p.add_argument("--vocab", type=int, default=200)
    p.add_argument("--labeled", type=int, default=500)
    p.add_argument("--unlabeled", type=int, default=500)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--shared-strength", dest="shared_strength", type=float, default=1.5)
    p.add_argument("--specific-strength", dest="specific_strength", type=float, default=1.5)
    p.add_argument("--domain-vocab-strength", dest="domain_vocab_strength",
                   type=float, default=4.0)
    p.add_argument("--flip-fraction", dest="flip_fraction", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training job")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crossval", help="k-fold cross-validated training")
    _add_train_flags(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on "
                                         "a built-in toy corpus")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="enumerate divergences on an instance file")
    p.add_argument("--instance", required=True)
    p.add_argument("--rho", type=float, nargs="+", default=[1.0])
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bound", help="evaluate the generalization bound terms "
                                     "for a checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write the JSON report here (else stdout)")
    p.add_argument("--text-out", dest="text_out", help="also write key-value text")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--draws", type=int, default=200)
    p.add_argument("--perturb-scale", dest="perturb_scale", type=float, default=0.05)
    p.add_argument("--candidates", type=int, default=8)
    p.add_argument("--cap", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bound)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, SizeLimitError) as exc:
        _error(exc)
        return 2
    except NonFiniteError as exc:
        _error(exc)
        return 1
    except OSError as exc:
        _error(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
