"""Command-line entry point: ``s2m {gen,train,eval,oracle,cvar,bound}``.

Every command takes an optional ``--config`` file of ``key = value`` lines.
Each config key also has a flag (``minibatch_size`` -> ``--minibatch-size``);
flags beat the config file, which beats presets, which beat defaults. Unknown
keys are rejected before any work starts.

All randomness comes from ``--seed``. Stages draw sub-seeds with
``derive_seed(seed, command, stage)`` (BLAKE2b of the labels), so adding a
stage never shifts the streams of the others.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 oracle violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from importlib import metadata
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .core_math import DomainError, derive_seed
from .cvar import (
    BoundInputs,
    SubpopIndex,
    agnostic_topk_decomposition,
    bernoulli_sampler,
    cvar_bias_study,
    cvar_closed_form,
    cvar_dual,
    cvar_variational,
    exponential_sampler,
    m2_bound_terms,
    rademacher_bound_m2,
    uniform_sampler,
    write_bias_csv,
)
from .datagen import (
    DatasetFormatError,
    downsample_tail,
    frequency_split,
    generate_mixture,
    make_mixture_spec,
    read_config,
    read_dataset,
    write_dataset,
)
from .eval import frequency_tiers, head_tail_tiers, recall_at_r, write_metrics_csv
from .losses import COMPOSITIONS, LossSpec, MarginLoss
from .mining import METHODS, MiningConfig, TrainingDiverged, train, write_trace_csv
from .model import CheckpointError, Scorer, load_checkpoint, save_checkpoint
from . import oracles

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_ORACLE = 0, 1, 2, 3


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are validation errors
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def code_version() -> str:
    try:
        return f"s2m {metadata.version('artifact')}"
    except metadata.PackageNotFoundError:
        return "s2m (uninstalled)"


# ---------------------------------------------------------------------------
# typed config keys
# ---------------------------------------------------------------------------


def _int_or_all(text: str) -> Optional[int]:
    return None if text.strip().lower() in ("all", "none") else int(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> List[int]:
    return [int(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return parse


REQUIRED = object()

# key -> (parser, default); REQUIRED marks keys with no default
GEN_KEYS = {
    "num_labels": (int, 10),
    "dim": (int, 20),
    "num_subpops": (int, 2),
    "subpop_weights": (str, ""),  # comma separated; empty = uniform
    "head_classes": (_int_list, "0,1,2,3,4"),
    "tail_ratio": (float, 100.0),
    "n_train": (int, 5000),
    "n_test": (int, 2000),
    "separation": (float, 3.0),
    "noise_scale": (float, 1.0),
}

TRAIN_KEYS = {
    "minibatch_size": (int, REQUIRED),
    "example_top_k": (_int_or_all, "all"),
    "label_sample_size": (_int_or_all, "all"),
    "label_top_k": (_int_or_all, "1"),
    "steps": (int, 500),
    "learning_rate": (float, 0.1),
    "shared_negatives": (_bool, "false"),
    "loss": (_choice(*COMPOSITIONS), "softmax_ce"),
    "base_loss": (_choice("hinge", "squared_hinge", "logistic"), "hinge"),
    "margin": (float, 1.0),
    "cosine_margin": (float, 0.5),
    "scorer": (_choice("linear", "embedding"), "linear"),
    "hidden_dim": (int, 0),
}

TRAIN_PRESETS = {
    # N_mb = 64 with k' = N_mb; sweep k' in {1, 16, 32, 64} with --example-top-k
    "mnist": {"minibatch_size": "64", "example_top_k": "64", "loss": "softmax_ce",
              "label_sample_size": "all", "label_top_k": "all", "scorer": "linear"},
    # k = 64 hardest of K_bar = 4096 sampled negatives, linear 512-d embedding, cosine loss
    "large_scale": {"minibatch_size": "2048", "example_top_k": "2048", "label_sample_size": "4096",
                    "label_top_k": "64", "loss": "cosine_contrastive", "scorer": "embedding",
                    "hidden_dim": "512"},
}

EVAL_KEYS = {
    "r_values": (_int_list, "5,10,25,50"),
    "split": (_choice("none", "head_tail", "frequency_tiers"), "none"),
    "head_classes": (_int_list, "0,1,2,3,4"),
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_key_flags(parser: argparse.ArgumentParser, keys: Dict) -> None:
    for key in keys:
        parser.add_argument(_flag(key), dest=f"cfg_{key}", default=None, metavar="VALUE")


def resolve_config(keys: Dict, args, preset: Optional[Dict[str, str]] = None) -> Dict:
    """Merge defaults < preset < config file < flags, parse, and reject unknown keys."""
    raw: Dict[str, object] = {k: v for k, (_, v) in keys.items()}
    raw.update(preset or {})
    if getattr(args, "config", None):
        try:
            from_file = read_config(args.config)
        except OSError as exc:
            raise ValidationError(f"cannot read config: {exc}") from None
        unknown = sorted(set(from_file) - set(keys) - {"seed"})
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        if "seed" in from_file and args.seed is None:
            args.seed = int(from_file.pop("seed"))
        from_file.pop("seed", None)
        raw.update(from_file)
    for key in keys:
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            raw[key] = v
    out = {}
    for key, (parse, _) in keys.items():
        value = raw[key]
        if value is REQUIRED:
            raise ValidationError(f"missing required key {key!r}")
        try:
            out[key] = parse(value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ValidationError(f"bad value for {key!r}: {exc}") from None
    if args.seed is None:
        args.seed = 0
    return out


def write_manifest(path: Path, command: str, argv: Sequence[str], config: Dict, seed: int,
                   extra: Optional[Dict] = None) -> None:
    doc = {"command": command, "argv": list(argv), "seed": seed, "config": config,
           "code_version": code_version()}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _refuse_existing(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise ValidationError(f"refusing to overwrite {', '.join(existing)} (pass --force)")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args, argv) -> int:
    cfg = resolve_config(GEN_KEYS, args)
    out = Path(args.out)
    files = [out / "train.txt", out / "test.txt", out / "manifest.json"]
    _refuse_existing(files, args.force)
    K, P = cfg["num_labels"], cfg["num_subpops"]
    if not 1 <= P <= K:
        raise ValidationError("num_subpops must lie in [1, num_labels]")
    groups = [g.tolist() for g in np.array_split(np.arange(K), P)]
    weights = _parse_weights(cfg["subpop_weights"], P)
    spec = make_mixture_spec(groups, cfg["dim"], weights, cfg["separation"], cfg["noise_scale"],
                             seed=derive_seed(args.seed, "gen", "mixture"))
    train_full = generate_mixture(spec, cfg["n_train"], seed=derive_seed(args.seed, "gen", "train"))
    test = generate_mixture(spec, cfg["n_test"], seed=derive_seed(args.seed, "gen", "test"))
    train_ds = train_full
    if cfg["tail_ratio"] > 1:
        train_ds = downsample_tail(train_full, cfg["head_classes"], cfg["tail_ratio"],
                                   derive_seed(args.seed, "gen", "downsample"))
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(train_ds, files[0])
    write_dataset(test, files[1])
    write_manifest(files[2], "gen", argv, cfg, args.seed,
                   {"subpop_labels": groups, "n_train_after_downsampling": train_ds.N})
    print(f"wrote {files[0]} ({train_ds.N} examples) and {files[1]} ({test.N} examples)")
    return EXIT_OK


def _parse_weights(text: str, P: int):
    if not text.strip():
        return None
    w = np.array([float(t) for t in text.split(",")])
    if w.size != P:
        raise ValidationError(f"subpop_weights has {w.size} entries, expected {P}")
    return w / w.sum()


def build_training(cfg: Dict, seed: int):
    kp = cfg["example_top_k"]
    mining = MiningConfig(
        minibatch_size=cfg["minibatch_size"],
        example_top_k=cfg["minibatch_size"] if kp is None else kp,
        label_sample_size=cfg["label_sample_size"],
        steps=cfg["steps"],
        learning_rate=cfg["learning_rate"],
        seed=derive_seed(seed, "train", "mining"),
        shared_negatives=cfg["shared_negatives"],
    )
    spec = LossSpec(cfg["loss"], cfg["label_top_k"], MarginLoss(cfg["base_loss"], cfg["margin"]),
                    cfg["cosine_margin"])
    return mining, spec


def cmd_train(args, argv) -> int:
    preset = TRAIN_PRESETS.get(args.preset) if args.preset else None
    cfg = resolve_config(TRAIN_KEYS, args, preset)
    out = Path(args.out)
    files = [out / "checkpoint.bin", out / "trace.csv", out / "manifest.json"]
    _refuse_existing(files, args.force)
    data = read_dataset(args.data)
    mining, spec = build_training(cfg, args.seed)
    init_seed = derive_seed(args.seed, "train", "init")
    if cfg["scorer"] == "linear":
        scorer = Scorer.linear(data.dim, data.num_labels, seed=init_seed)
    else:
        if cfg["hidden_dim"] < 1:
            raise ValidationError("embedding scorer needs hidden_dim >= 1")
        scorer = Scorer.embedding(data.dim, data.num_labels, cfg["hidden_dim"], seed=init_seed)
    result = train(data, mining, spec, scorer, method=args.method)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.scorer, files[0])
    write_trace_csv(result.trace, files[1])
    write_manifest(files[2], "train", argv, dict(cfg, method=args.method, preset=args.preset,
                                                 data=str(args.data)), args.seed)
    last = result.trace[-1].loss if result.trace else float("nan")
    print(f"trained {args.method} for {len(result.trace)} steps; final minibatch loss {last:.6g}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    cfg = resolve_config(EVAL_KEYS, args)
    test = read_dataset(args.data)
    scorer = load_checkpoint(args.checkpoint)
    if scorer.input_dim != test.dim or scorer.num_labels != test.num_labels:
        raise ValidationError(
            f"checkpoint (d={scorer.input_dim}, K={scorer.num_labels}) does not match "
            f"test data (d={test.dim}, K={test.num_labels})")
    tiers, names = None, ()
    if cfg["split"] == "head_tail":
        tiers, names = head_tail_tiers(test, cfg["head_classes"]), ("head", "tail")
    elif cfg["split"] == "frequency_tiers":
        if not args.train_data:
            raise ValidationError("frequency_tiers needs --train-data for label frequencies")
        split = frequency_split(read_dataset(args.train_data).labels)
        tiers, names = frequency_tiers(test, split), ("head", "torso", "tail")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        metrics = recall_at_r(scorer, test, cfg["r_values"], tiers, names)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_metrics_csv({(args.label, args.example_top_k): metrics}, args.out)
    for tier, by_r in metrics.recall.items():
        if metrics.n_pairs[tier]:
            cells = "  ".join(f"r={r}: {v:.4f}" for r, v in by_r.items())
            print(f"{tier:>6} ({metrics.n_pairs[tier]} pairs)  {cells}")
    if args.manifest:
        write_manifest(Path(args.manifest), "eval", argv, dict(cfg, checkpoint=str(args.checkpoint),
                                                              data=str(args.data)), args.seed)
    return EXIT_OK


def cmd_oracle(args, argv) -> int:
    seed = 0 if args.seed is None else args.seed
    if args.suite == "cvar":
        rep = oracles.merge_reports(
            "cvar",
            oracles.verify_cvar_equivalences(fuzz_cases=args.cases or 1000, seed=seed),
            oracles.verify_decomposition(fuzz_cases=args.cases or 500, seed=seed),
        )
    elif args.suite == "owa":
        rep = oracles.verify_expected_owa(fuzz_cases=args.cases or 3, seed=seed,
                                          mc_draws=10 ** 5, mc_cases=[(3, 2, 1), (6, 3, 2)])
    elif args.suite == "consistency":
        rep = oracles.verify_consistency(fuzz_cases=args.cases or 50, seed=seed)
    else:
        rep = oracles.verify_gradients(trials=args.cases or 100, seed=seed)
    print(rep.to_text())
    if args.out:
        rep.write_csv(args.out)
    return EXIT_OK if rep.passed else EXIT_ORACLE


def _read_losses(path) -> np.ndarray:
    text = Path(path).read_text().replace(",", " ").split()
    try:
        return np.array([float(t) for t in text])
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def cmd_cvar(args, argv) -> int:
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        if args.tool == "estimate":
            u = _read_losses(args.losses)
            closed = cvar_closed_form(u, args.alpha)
            var = cvar_variational(u, args.alpha)
            dual, _ = cvar_dual(u, np.full(u.size, 1.0 / u.size), args.alpha)
            w.writerow(["form", "alpha", "value"])
            for form, v in (("closed_form", closed.value), ("variational", var.value), ("dual", dual)):
                w.writerow([form, args.alpha, repr(float(v))])
        elif args.tool == "decompose":
            u = _read_losses(args.losses)
            groups = _read_losses(args.groups).astype(np.int64)
            sub = SubpopIndex(groups, int(groups.max()) + 1)
            value, nu = agnostic_topk_decomposition(u, sub, args.k)
            w.writerow(["k", "value"] + [f"nu_{p}" for p in range(nu.size)])
            w.writerow([args.k, repr(float(value))] + [repr(float(x)) for x in nu])
        else:
            samplers = {"uniform": uniform_sampler(), "exponential": exponential_sampler(),
                        "bernoulli": bernoulli_sampler(args.alpha)}
            study = cvar_bias_study(samplers[args.sampler], args.alpha, _int_list(args.N),
                                    args.replications, derive_seed(args.seed or 0, "cvar", "bias"))
            if args.out:
                out.close()
                write_bias_csv(study, args.out)
            else:
                w.writerow(["N", "bias_mean", "bias_stderr"])
                for row in study.rows():
                    w.writerow([row[0], repr(row[1]), repr(row[2])])
            print(f"fitted decay exponent {study.decay_exponent:.4f}", file=sys.stderr)
    finally:
        if out is not sys.stdout and not out.closed:
            out.close()
    return EXIT_OK


def cmd_bound(args, argv) -> int:
    inputs = BoundInputs(args.alpha, args.delta, args.B, args.rad, args.N)
    first, _ = m2_bound_terms(inputs)
    total = rademacher_bound_m2(inputs)
    w = csv.writer(sys.stdout)
    w.writerow(["alpha", "rademacher", "B", "N", "delta", "complexity_term", "bound"])
    w.writerow([args.alpha, args.rad, args.B, args.N, args.delta, repr(float(first)), repr(total)])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s2m", description="Doubly-stochastic mining and CVaR tools.")
    p.add_argument("--version", action="version", version=code_version())
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", default=None, help="key = value file")

    g = sub.add_parser("gen", help="generate train/test datasets from a Gaussian mixture")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--force", action="store_true")
    _add_key_flags(g, GEN_KEYS)

    t = sub.add_parser("train", help="train a scorer with sgd, snm, qsgd or s2m")
    common(t)
    t.add_argument("method", choices=METHODS)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--preset", choices=sorted(TRAIN_PRESETS), default=None)
    t.add_argument("--force", action="store_true")
    _add_key_flags(t, TRAIN_KEYS)

    e = sub.add_parser("eval", help="recall@r per tier")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="test dataset")
    e.add_argument("--train-data", default=None, help="training dataset (for frequency tiers)")
    e.add_argument("--out", required=True, help="metrics CSV")
    e.add_argument("--manifest", default=None)
    e.add_argument("--label", default="", help="method column of the CSV")
    e.add_argument("--example-top-k", type=int, default=None, help="k_prime column of the CSV")
    _add_key_flags(e, EVAL_KEYS)

    o = sub.add_parser("oracle", help="run a verification suite")
    common(o, config=False)
    o.add_argument("suite", choices=oracles.SUITES)
    o.add_argument("--cases", type=int, default=None)
    o.add_argument("--out", default=None, help="CSV of worst deviations")

    c = sub.add_parser("cvar", help="CVaR estimators, decomposition and bias study")
    common(c, config=False)
    c.add_argument("tool", choices=("estimate", "decompose", "bias"))
    c.add_argument("--losses", help="whitespace or comma separated losses")
    c.add_argument("--groups", help="subpopulation id per loss")
    c.add_argument("--alpha", type=float, default=0.1)
    c.add_argument("--k", type=int, default=1)
    c.add_argument("--sampler", choices=("uniform", "exponential", "bernoulli"), default="uniform")
    c.add_argument("--N", default="64,256,1024")
    c.add_argument("--replications", type=int, default=2000)
    c.add_argument("--out", default=None)

    b = sub.add_parser("bound", help="uniform-convergence bound on the CVaR gap")
    b.add_argument("--alpha", type=float, required=True)
    b.add_argument("--rad", type=float, required=True, help="Rademacher complexity")
    b.add_argument("--B", type=float, default=1.0, help="loss bound")
    b.add_argument("--N", type=int, required=True)
    b.add_argument("--delta", type=float, default=0.05)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "oracle": cmd_oracle,
            "cvar": cmd_cvar, "bound": cmd_bound}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command == "cvar":
            if args.tool in ("estimate", "decompose") and not args.losses:
                raise ValidationError("--losses is required")
            if args.tool == "decompose" and not args.groups:
                raise ValidationError("--groups is required")
        return COMMANDS[args.command](args, argv)
    except (ValidationError, DomainError, DatasetFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, OSError, FloatingPointError, MemoryError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # anything unforeseen is a runtime failure, not a crash
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
