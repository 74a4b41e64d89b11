"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path


from .checkpoint import load_checkpoint
from .config import PRESETS, ConfigError, RunConfig, load_config
from .container import ContainerError, read_container, write_container
from .data import build_trials, generate_corpus, load_manifest, read_trials, write_trials
from .evaluation import evaluate, format_summary, write_report
from .frontend import extract_features
from .model import ABLATIONS, build_ablation, count_params, param_breakdown
from .training import embed_all, fit, load_features

log = logging.getLogger("acanet")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or [], getattr(args, "preset", "default"))
    variant = getattr(args, "variant", None)
    if variant:
        cfg = dataclasses.replace(cfg, model=build_ablation(cfg.model, variant))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))
    return cfg


def cmd_gen_data(args) -> int:
    corpus = generate_corpus(
        args.out,
        n_speakers=args.speakers,
        utts_per_speaker=args.utts,
        duration_s=args.duration,
        seed=args.seed,
        n_test_speakers=args.test_speakers,
        n_trials=args.trials,
    )
    print(f"manifest {corpus.manifest}")
    for name, path in corpus.splits.items():
        print(f"{name} {path}")
    for name, path in corpus.trials.items():
        print(f"trials_{name} {path}")
    return 0


def _print_params(cfg) -> int:
    breakdown = param_breakdown(cfg)
    width = max(len(k) for k in breakdown)
    for name, n in breakdown.items():
        print(f"{name:<{width}}  {n:>10d}")
    total = count_params(cfg)
    print(f"{'total':<{width}}  {total:>10d}")
    return total


def cmd_params(args) -> int:
    _print_params(_config(args).model)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    data = cfg.data
    train_path = args.train_manifest or data.train_manifest
    if not train_path:
        raise UsageError("no training manifest (use --train-manifest or data.train_manifest)")
    train = load_manifest(train_path)
    dev = None
    dev_manifest = args.dev_manifest or data.dev_manifest
    dev_trials = args.dev_trials or data.dev_trials
    if dev_manifest and dev_trials:
        dev = (load_manifest(dev_manifest), read_trials(dev_trials))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = count_params(cfg.model)
    unshared = count_params(cfg.model.replace(weight_sharing=False))
    print(f"params {total} ({100 * total / unshared:.1f}% of unshared)")
    result = fit(train, cfg.model, cfg.train, dev=dev, out_dir=out)
    cfg.save(out / "config.ini")
    print(f"checkpoint {out / 'model.ckpt'}")
    print(f"metrics {out / 'metrics.jsonl'}")
    print(f"best_epoch {result.best_epoch}")
    if result.dev_eer:
        print(f"dev_eer {100 * min(result.dev_eer):.2f}%")
    return 0


def cmd_embed(args) -> int:
    net = load_checkpoint(args.checkpoint)
    entries = load_manifest(args.manifest)
    feats = load_features(entries, net.cfg.n_filters)
    emb = embed_all(net, feats)
    write_container(args.out, "embeddings", emb, {"embedding_size": net.cfg.embedding_size})
    print(f"embeddings {args.out} ({len(emb)} utterances, E={net.cfg.embedding_size})")
    return 0


def cmd_score(args) -> int:
    cfg = _config(args)
    emb, _ = read_container(args.embeddings, kind="embeddings")
    trials = read_trials(args.trials)
    report = evaluate(trials, emb, cfg.eval.p_target, cfg.eval.c_fa, cfg.eval.c_miss)
    report_path = Path(args.report) if args.report else Path(args.embeddings).with_suffix(".report.json")
    write_report(report_path, report)
    print(format_summary(report))
    print(f"report {report_path}")
    return 0


def cmd_features(args) -> int:
    entries = load_manifest(args.manifest)
    arrays = {e.utt_id: extract_features(e.path, n_filters=args.filters).values for e in entries}
    write_container(args.out, "features", arrays, {"n_filters": args.filters, "hop_ms": 10.0, "win_ms": 25.0})
    print(f"features {args.out} ({len(arrays)} utterances)")
    return 0


def cmd_trials(args) -> int:
    trials = build_trials(load_manifest(args.manifest), args.pairs, args.target_fraction, seed=args.seed)
    write_trials(args.out, trials)
    print(f"trials {args.out} ({len(trials)} pairs)")
    return 0


def cmd_ablate(args) -> int:
    """Train the base model and each variant with one seed; score all on the same trials."""
    cfg = _config(args)
    train = load_manifest(args.train_manifest)
    dev = (load_manifest(args.dev_manifest), read_trials(args.dev_trials)) if args.dev_manifest else None
    test = load_manifest(args.test_manifest)
    trials = read_trials(args.test_trials)
    feats = load_features(list(train) + list(test) + (list(dev[0]) if dev else []), cfg.model.n_filters)
    variants = ["base"] + (args.variants or list(ABLATIONS))
    rows = []
    for v in variants:
        mcfg = cfg.model if v == "base" else build_ablation(cfg.model, v)
        result = fit(train, mcfg, cfg.train, dev=dev, features=feats, out_dir=Path(args.out) / v)
        emb = embed_all(result.net, {e.utt_id: feats[e.utt_id] for e in test})
        rep = evaluate(trials, emb, cfg.eval.p_target, cfg.eval.c_fa, cfg.eval.c_miss)
        rows.append((v, count_params(mcfg), rep["eer"], rep["min_dcf"]))
        write_report(Path(args.out) / v / "report.json", rep)
    print(f"{'variant':<18}{'params':>10}{'EER%':>8}{'minDCF':>8}")
    for v, n, eer, dcf in rows:
        print(f"{v:<18}{n:>10d}{100 * eer:>8.2f}{dcf:>8.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acanet", description="ACA-Net speaker embedding toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, variant=True):
        p.add_argument("--config", help="INI run config (looked up in $ACANET_CONFIG_DIR if not found)")
        p.add_argument("--preset", choices=PRESETS, default="default", help="base values under the config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        if variant:
            p.add_argument("--variant", choices=ABLATIONS, help="ablation variant")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus with manifests and trials")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=12)
    p.add_argument("--utts", type=int, default=20)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--test-speakers", type=int, default=None)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an embedding extractor")
    with_config(p)
    p.add_argument("--train-manifest")
    p.add_argument("--dev-manifest")
    p.add_argument("--dev-trials")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="extract one embedding per manifest utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("score", help="score trials; print EER and minDCF")
    with_config(p, variant=False)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("params", help="per-layer parameter counts")
    with_config(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("features", help="dump filterbank features (debug)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filters", type=int, default=80)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("trials", help="sample a trial list from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--target-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_trials)

    p = sub.add_parser("ablate", help="train base and ablation variants, score on shared trials")
    with_config(p, variant=False)
    p.add_argument("--variants", nargs="+", choices=ABLATIONS)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--dev-manifest")
    p.add_argument("--dev-trials")
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--test-trials", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags and 0 after --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except (OSError, ValueError, KeyError, RuntimeError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
