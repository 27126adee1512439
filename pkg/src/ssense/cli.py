"""``ssense`` command line: preprocess | train | protocol | eval | baseline | stats | synth | report.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import signal_io as sio
from .config import PipelineConfig, parse_assignment
from .embeddings import fetch_remote, load_embeddings, resolve_provider
from .encoder import load_checkpoint, save_checkpoint
from .errors import DigestMismatchError, SsenseError, ValidationError, WindowError
from .evaluation import (RetrievalReport, aggregate, format_report, format_table, one_sample_t,
                         paired_t, random_baseline)
from .superlet import batch_transform, read_spectro_batch, standardize, write_spectro_batch
from .synth import SynthConfig, write_synth
from .trainer import evaluate, run_protocol, train

log = logging.getLogger("ssense")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
LOCK_NAME = ".ssense.lock"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def parse_seeds(text: str) -> list[int]:
    """``0..9``, ``0-9`` or ``0,3,7``."""
    text = text.strip()
    for sep in ("..", "-"):
        if sep in text and not text.startswith("-"):
            lo, hi = text.split(sep, 1)
            return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s.strip()]


@contextlib.contextmanager
def workdir_lock(workdir: Path):
    workdir.mkdir(parents=True, exist_ok=True)
    lock = workdir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise SsenseError(f"{workdir} is in use by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


# --------------------------------------------------------------------------
# shared plumbing


def _load_config(args) -> PipelineConfig:
    overrides = [parse_assignment(s) for s in getattr(args, "set", [])]
    cfg = PipelineConfig.load(args.config, overrides)
    if getattr(args, "workdir", None):
        cfg.set("paths", "workdir", str(Path(args.workdir).resolve()))
    if getattr(args, "seed", None) is not None:
        cfg.set("train", "seed", args.seed)
    if args.embeddings and args.embed_endpoint:
        raise ValidationError("--embeddings and --embed-endpoint are mutually exclusive")
    if args.embeddings:
        cfg.set("paths", "embeddings", str(Path(args.embeddings).resolve()))
        cfg.set("paths", "embed_endpoint", None)
    elif args.embed_endpoint:
        cfg.set("paths", "embed_endpoint", args.embed_endpoint)
        cfg.set("paths", "embeddings", None)
    cfg.validate()
    return cfg


def _provider(cfg: PipelineConfig):
    emb_path = cfg.path("embeddings")
    return resolve_provider(emb_path, cfg["paths"]["embed_endpoint"])


def _load_text(cfg: PipelineConfig, texts: list[str]):
    kind, where = _provider(cfg)
    if kind == "file":
        emb = load_embeddings(where)
    else:
        cache = cfg.path("cache_dir") or cfg.workdir / "cache"
        emb = fetch_remote(where, sorted(set(texts)), cache_dir=cache)
    return emb.lookup(texts), emb.source_tag


def _load_dataset(cfg: PipelineConfig):
    archive = cfg.workdir / "pairs" / "pairs.sspr"
    if not archive.is_file():
        raise ValidationError(f"{archive} missing; run `ssense preprocess` first")
    pairs, _ = sio.read_pair_archive(archive)
    if not pairs:
        raise ValidationError(f"{archive} holds no pairs")
    shards = []
    for p in pairs:
        values, _ = read_spectro_batch(cfg.workdir / "spectra" / _shard_name(p.sentence.index))
        shards.append(values)
    spectra = standardize(np.concatenate(shards, axis=0))
    texts = [p.sentence.text for p in pairs]
    text, tag = _load_text(cfg, texts)
    return pairs, spectra, text, tag


def _shard_name(index: int) -> str:
    return f"sentence_{index:06d}.ssen"


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = SynthConfig(n_sentences=args.n_sentences, n_clusters=args.n_clusters,
                      n_electrodes=args.n_electrodes, seed=args.seed,
                      long_sentences=args.long_sentences)
    paths = write_synth(args.out, cfg)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    manifest = cfg.require_path("manifest")
    transcript_path = cfg.require_path("transcript")
    if args.dry_run:
        print(yaml.safe_dump(cfg.resolved(), sort_keys=False), end="")
        return EXIT_OK
    rec = sio.load_recording(manifest)
    transcript = sio.read_transcript(transcript_path)
    pp = cfg["preprocess"]
    kept = sio.filter_sentences(transcript, pp["max_dur_s"])
    summary = {"n_transcript": len(transcript), "dropped_duration": len(transcript) - len(kept),
               "dropped_out_of_bounds": 0, "dropped_too_long": 0}
    pairs = []
    for s in kept:
        try:
            pairs.append(sio.extract_window(rec, s, pp["pre_s"], pp["post_s"], pp["target_len"]))
        except WindowError as exc:
            key = "dropped_too_long" if "longer than target" in str(exc) else "dropped_out_of_bounds"
            summary[key] += 1
            log.info("dropping %s", exc)
    summary["kept"] = len(pairs)
    sl_cfg = cfg.superlet_config(rec.sample_rate_hz)
    summary.update(config_digest=cfg.digest(), sample_rate_hz=rec.sample_rate_hz,
                   n_electrodes=len(rec.electrodes), n_freqs=len(sl_cfg.freqs_hz),
                   n_columns=sl_cfg.n_columns(pp["target_len"]))

    wd = cfg.workdir
    with workdir_lock(wd):
        (wd / "pairs").mkdir(parents=True, exist_ok=True)
        sio.write_pair_archive(pairs, wd / "pairs" / "pairs.sspr", cfg.digest())
        spectra_dir = wd / "spectra"
        spectra_dir.mkdir(exist_ok=True)
        for old in spectra_dir.glob("*.ssen"):
            old.unlink()
        for start in range(0, len(pairs), 8):
            chunk = pairs[start:start + 8]
            values = batch_transform(chunk, sl_cfg)
            for p, v in zip(chunk, values):
                write_spectro_batch(spectra_dir / _shard_name(p.sentence.index), v[None], sl_cfg)
        _write_json(wd / "pairs" / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _dry_run(cfg: PipelineConfig, extra=None) -> int:
    kind, where = _provider(cfg)
    out = {"config_digest": cfg.digest(), "embeddings": {kind: str(where)},
           "train": cfg.train_config().to_dict(), "eval": cfg["eval"]}
    out.update(extra or {})
    print(yaml.safe_dump(out, sort_keys=False), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.dry_run:
        return _dry_run(cfg)
    pairs, spectra, text, tag = _load_dataset(cfg)
    tcfg = cfg.train_config()
    spec = cfg.encoder_spec(spectra.shape[3])
    split = sio.make_split(len(pairs), tcfg.seed)
    wd = cfg.workdir
    with workdir_lock(wd):
        ck_dir = wd / "checkpoints"
        ck_dir.mkdir(parents=True, exist_ok=True)
        metric_log = ck_dir / f"seed_{tcfg.seed:02d}.metrics.csv"
        metric_log.unlink(missing_ok=True)
        result = train(spectra, text, split, tcfg, spec, metric_log=metric_log)
        save_checkpoint(ck_dir / f"seed_{tcfg.seed:02d}.sswt", result.params,
                        {"config_digest": cfg.digest(), "seed": tcfg.seed,
                         "best_epoch": result.best_epoch, "source_tag": tag})
        report = _evaluate_split(cfg, result.params, spectra, text, split, tag)
        _write_json(wd / "reports" / f"train_seed_{tcfg.seed:02d}.json", report.to_dict())
    print(f"seed {tcfg.seed}: best epoch {result.best_epoch}; test {format_report(report)}")
    return EXIT_OK


def _evaluate_split(cfg, params, spectra, text, split, tag, subset="test") -> RetrievalReport:
    queries = list(range(len(spectra))) if subset == "all" else getattr(split, subset)
    pool = queries if cfg["eval"]["candidate_pool"] == "test" else list(range(len(spectra)))
    return evaluate(params, spectra, text, queries, pool, cfg["eval"]["ks"],
                    seed=split.seed if split else None, config_digest=cfg.digest(),
                    source_tag=tag)


def cmd_protocol(args) -> int:
    cfg = _load_config(args)
    seeds = parse_seeds(args.seeds) if args.seeds else list(cfg["protocol"]["seeds"])
    if args.dry_run:
        return _dry_run(cfg, {"seeds": seeds})
    pairs, spectra, text, tag = _load_dataset(cfg)
    wd = cfg.workdir
    out_dir = wd / "reports" / "protocol"

    def save(run):
        save_checkpoint(wd / "checkpoints" / "protocol" / f"seed_{run.seed:02d}.sswt",
                        run.result.params, {"config_digest": cfg.digest(), "seed": run.seed,
                                            "best_epoch": run.result.best_epoch,
                                            "source_tag": tag})
        _write_json(out_dir / f"seed_{run.seed:02d}.json", run.report.to_dict())
        print(f"seed {run.seed}: {format_report(run.report)}", flush=True)

    with workdir_lock(wd):
        (wd / "checkpoints" / "protocol").mkdir(parents=True, exist_ok=True)
        runs, agg = run_protocol(spectra, text, cfg.train_config(),
                                 cfg.encoder_spec(spectra.shape[3]), seeds, cfg["eval"]["ks"],
                                 cfg["eval"]["candidate_pool"], cfg.digest(), tag, on_run=save)
        n_cand = runs[0].report.n_candidates
        _write_json(out_dir / "aggregate.json",
                    {"config_digest": cfg.digest(), "source_tag": tag, "seeds": seeds,
                     "n_candidates": n_cand, "metrics": agg})
        table = format_table({"SSENSE": agg}, random_baseline(n_cand, cfg["eval"]["ks"]))
        (out_dir / "table.txt").write_text(table + f"\nconfig_digest: {cfg.digest()}\n")
    print(table, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    pairs, spectra, text, tag = _load_dataset(cfg)
    params, extra = load_checkpoint(args.checkpoint)
    # the split follows the checkpoint's training seed unless --seed says otherwise
    seed = args.seed if args.seed is not None else extra.get("seed", cfg["train"]["seed"])
    if not args.any_spec:
        expected = replace(cfg.encoder_spec(spectra.shape[3]), seed=params.spec.seed)
        if expected.digest() != params.spec.digest():
            raise DigestMismatchError(
                f"{args.checkpoint}: encoder spec differs from the configured one "
                "(pass --any-spec to use the checkpoint's own)")
    split = None if args.subset == "all" else sio.make_split(len(pairs), seed)
    report = _evaluate_split(cfg, params, spectra, text, split, tag, args.subset)
    name = f"eval_{Path(args.checkpoint).stem}_{args.subset}.json"
    _write_json(cfg.workdir / "reports" / name, report.to_dict())
    print(format_report(report))
    return EXIT_OK


def cmd_baseline(args) -> int:
    ks = [int(k) for k in args.ks.split(",")]
    report = random_baseline(args.n, ks)
    print(format_report(report))
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    return EXIT_OK


def _load_report_set(path: Path) -> list[RetrievalReport]:
    path = Path(path)
    files = sorted(path.glob("seed_*.json")) if path.is_dir() else [path]
    if not files:
        raise ValidationError(f"no seed_*.json reports under {path}")
    return [RetrievalReport.from_dict(json.loads(f.read_text())) for f in files]


def _stat_line(label, key, r) -> str:
    flag = " (degenerate: zero variance)" if r.degenerate else ""
    return f"{label}  {key:<10} t={r.t:.4f} df={r.df} p={r.p:.4g}{flag}"


def cmd_stats(args) -> int:
    sets = {str(p): _load_report_set(p) for p in args.reports}
    out = {"one_sample_vs_random": {}, "paired": {}}
    lines = []
    for name, reports in sets.items():
        base = random_baseline(reports[0].n_candidates, sorted(reports[0].recall_at)).metrics()
        res = {}
        for key in reports[0].metrics():
            r = one_sample_t([rep.metrics()[key] for rep in reports], base[key])
            res[key] = r.to_dict()
            lines.append(_stat_line(f"{name} vs random", key, r))
        out["one_sample_vs_random"][name] = res
    names = list(sets)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a = {r.seed: r for r in sets[names[i]]}
            b = {r.seed: r for r in sets[names[j]]}
            common = sorted(set(a) & set(b), key=lambda s: (s is None, s))
            if len(common) < 2:
                raise ValidationError(f"{names[i]} and {names[j]} share fewer than two seeds")
            res = {}
            for key in a[common[0]].metrics():
                r = paired_t([a[s].metrics()[key] for s in common],
                             [b[s].metrics()[key] for s in common])
                res[key] = r.to_dict()
                lines.append(_stat_line(f"{names[i]} vs {names[j]}", key, r))
            out["paired"][f"{names[i]} | {names[j]}"] = res
    print("\n".join(lines))
    if args.out:
        _write_json(Path(args.out), out)
    return EXIT_OK


def cmd_report(args) -> int:
    rows = {}
    first = None
    labels = args.label or []
    for i, path in enumerate(args.reports):
        reports = _load_report_set(path)
        first = first or reports
        rows[labels[i] if i < len(labels) else Path(path).name] = aggregate(reports)
    ks = sorted(first[0].recall_at)
    table = format_table(rows, random_baseline(first[0].n_candidates, ks))
    print(table, end="")
    if args.out:
        Path(args.out).write_text(table)
    if args.plots:
        from .plots import rank_histogram, recall_curve
        ranks = np.concatenate([r.ranks for r in first])
        plot_dir = Path(args.plots)
        rank_histogram(ranks, first[0].n_candidates, plot_dir / "rank_histogram.png")
        recall_curve(ranks, first[0].n_candidates, plot_dir / "recall_vs_k.png")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="pipeline YAML file")
    common.add_argument("--workdir", help="overrides paths.workdir")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config value (repeatable)")
    common.add_argument("--embeddings", help="SSTX sentence-embedding file")
    common.add_argument("--embed-endpoint", help="remote embedding URL (else $SSENSE_EMBED_ENDPOINT)")
    common.add_argument("--dry-run", action="store_true",
                        help="validate and print the resolved configuration only")

    parser = _Parser(prog="ssense", description="sEEG-to-sentence-embedding retrieval pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic recording/transcript/embedding set")
    p.add_argument("--out", required=True)
    p.add_argument("--n-sentences", type=int, default=64)
    p.add_argument("--n-clusters", type=int, default=8)
    p.add_argument("--n-electrodes", type=int, default=4)
    p.add_argument("--long-sentences", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="windows, pairs and spectrograms")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train one seed's split")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("protocol", parents=[common], help="train + test over several seeds")
    p.add_argument("--seeds", help="e.g. 0..9 or 0,1,2 (default: protocol.seeds)")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, help="split seed (default: train.seed)")
    p.add_argument("--subset", choices=["test", "val", "train", "all"], default="test")
    p.add_argument("--any-spec", action="store_true",
                   help="use the checkpoint's own encoder spec instead of the config's")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="analytic random-retrieval baseline")
    p.add_argument("n", type=int)
    p.add_argument("--ks", default="1,10,50")
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("stats", help="t-tests over per-seed report sets")
    p.add_argument("reports", nargs="+", help="report directories (seed_*.json) or files")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", help="Table-1 style summary of report sets")
    p.add_argument("reports", nargs="+")
    p.add_argument("--label", action="append")
    p.add_argument("--out")
    p.add_argument("--plots", metavar="DIR", help="also write rank histogram / recall curve PNGs")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SsenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any crash is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
