"""Command line entry point: ``maskdistill <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import describe, load_checkpoint, save_checkpoint
from .config import MetricsWriter, config_hash, fill_dataclass, read_config, section, write_manifest
from .corpus import ingest_corpus
from .diffusion import NoiseSchedule, Vocabulary, make_rng
from .distill import DistillConfig, TeacherPool, distill
from .evaluation import EvalConfig, evaluate, generate
from .models import ModelConfig
from .oracle import run_check
from .rgas import SamplerConfig, rgas_sample
from .teacher import TeacherConfig, train_teacher

log = logging.getLogger("maskdistill")


def _load_cfg(args) -> dict:
    return read_config(args.config) if args.config else {}


def _seed(args, cfg: dict) -> int:
    return int(args.seed) if args.seed is not None else int(cfg.get("seed", 0))


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _manifest(path: Path, args, cfg: dict, seed: int, **extra) -> None:
    argv = [a for a in sys.argv[1:]] if args.argv is None else args.argv
    write_manifest(path, args.command, cfg, seed, argv=argv, cwd=str(Path.cwd()), **extra)


def _vocab_of(model) -> Vocabulary | None:
    symbols = getattr(model, "meta", {}).get("vocab")
    return Vocabulary(tuple(symbols)) if symbols else None


def cmd_pretrain_teacher(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    length = int(cfg.get("length", 32))
    ds = ingest_corpus(args.corpus, length, cfg.get("vocab_cap"))
    train, val = ds.split(float(cfg.get("val_fraction", 0.1)))
    mcfg = fill_dataclass(ModelConfig, {**section(cfg, "model"), "vocab_size": ds.vocab.size,
                                        "length": length})
    tcfg = fill_dataclass(TeacherConfig, {**section(cfg, "teacher"), "seed": seed})
    out = Path(args.out)
    metrics = MetricsWriter(_sidecar(out, ".metrics.jsonl"), config_hash(cfg), "teacher")
    model, _ = train_teacher(tcfg, train, val, mcfg, metrics)
    save_checkpoint(model, out, {"vocab": list(ds.vocab.symbols), "corpus_digest": ds.digest(),
                                 "teacher_config": tcfg.to_dict()})
    _manifest(_sidecar(out, ".manifest.json"), args, cfg, seed, corpus_digest=ds.digest())
    log.info("saved teacher to %s", out)
    return 0


def _teacher_pool(path: Path, teacher, dcfg: DistillConfig) -> TeacherPool:
    """Load a cached teacher pool, or draw it from ``pool_seed`` and save it for later runs."""
    if path.exists():
        samples = np.load(path)
        if samples.shape != (dcfg.teacher_pool, teacher.config.length):
            raise SystemExit(f"{path}: pool shape {samples.shape} does not match the config")
        return TeacherPool(samples)
    pool = TeacherPool.generate(teacher, dcfg.teacher_pool, dcfg.teacher_steps,
                                NoiseSchedule(dcfg.schedule), make_rng([dcfg.pool_seed, 13]))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npy")
    np.save(tmp, pool.samples)
    tmp.replace(path)
    return pool


def cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    teacher = load_checkpoint(args.teacher)
    dcfg = fill_dataclass(DistillConfig, {**section(cfg, "distill"), "seed": seed})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pool = None
    if args.teacher_pool:
        pool = _teacher_pool(Path(args.teacher_pool), teacher, dcfg)
    metrics = MetricsWriter(out / "metrics.jsonl", config_hash(cfg), "distill")
    student, disc, _ = distill(dcfg, teacher, metrics, out_dir=None, pool=pool)
    extra = {"vocab": teacher.meta.get("vocab"), "distill_config": dcfg.to_dict()}
    save_checkpoint(student, out / "student.npz", extra)
    save_checkpoint(disc, out / "disc.npz", extra)
    _manifest(out / "manifest.json", args, cfg, seed)
    return 0


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    student = load_checkpoint(args.student)
    disc = load_checkpoint(args.disc) if args.disc else None
    scfg = fill_dataclass(SamplerConfig, {**section(cfg, "sampler"), "nfe": args.nfe, "seed": seed})
    schedule = NoiseSchedule(cfg.get("schedule", "log-linear"))
    rng = make_rng([seed, 0])
    trace: list | None = [] if args.trace else None
    if args.mode == "rgas":
        if disc is None:
            raise SystemExit("--mode rgas needs --disc")
        x = rgas_sample(student, disc, scfg, schedule, rng, args.num_samples, trace)
    else:
        x = generate(student, args.num_samples, args.nfe, "as", rng, schedule=schedule)
    vocab = _vocab_of(student)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [vocab.decode(row) if vocab else " ".join(map(str, row)) for row in x]
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    if trace is not None:
        with _sidecar(out, ".trace.jsonl").open("w") as fh:
            for rec in trace:
                fh.write(json.dumps(rec) + "\n")
    _manifest(_sidecar(out, ".manifest.json"), args, cfg, seed)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    student = load_checkpoint(args.student) if args.student else None
    disc = load_checkpoint(args.disc) if args.disc else None
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    evaluator = load_checkpoint(args.evaluator)
    ecfg = fill_dataclass(EvalConfig, {**section(cfg, "eval"), "seed": seed})
    scfg = fill_dataclass(SamplerConfig, section(cfg, "sampler"))
    out = Path(args.out)
    metrics = MetricsWriter(out / "metrics.jsonl", config_hash(cfg), "eval")
    evaluate(student, disc, teacher, evaluator, ecfg, scfg, metrics)
    _manifest(out / "manifest.json", args, cfg, seed)
    return 0


def cmd_oracle_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    ok, diag = run_check(args.case, seed)
    print(f"{'PASS' if ok else 'FAIL'} {args.case} " + json.dumps(diag, sort_keys=True))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        MetricsWriter(Path(args.out) / "metrics.jsonl", args.case, "oracle").write({"pass": ok, **diag})
        _manifest(Path(args.out) / "manifest.json", args, {}, seed)
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    print(json.dumps(describe(args.checkpoint), indent=2, sort_keys=True))
    return 0


def cmd_rerun(args) -> int:
    """Re-execute the command recorded in a manifest with outputs redirected."""
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    if "--out" in argv:
        argv[argv.index("--out") + 1] = args.out
    return main(argv)


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands suppress defaults so flags given before the subcommand survive
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=d(None), help="global seed (overrides config)")
    g.add_argument("--config", default=d(None), help="flat key = value config file")
    g.add_argument("--out", default=d(None), help="output path")
    g.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="maskdistill", description=__doc__, parents=[_global_flags(False)])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain-teacher", parents=[common], help="train the many-step teacher")
    s.add_argument("--corpus", required=True)
    s.set_defaults(func=cmd_pretrain_teacher, need_out=True)

    s = sub.add_parser("distill", parents=[common], help="distill a few-step student")
    s.add_argument("--teacher", required=True)
    s.add_argument("--teacher-pool", default=None, help=".npy cache of teacher samples; drawn and written if missing")
    s.set_defaults(func=cmd_distill, need_out=True)

    s = sub.add_parser("sample", parents=[common], help="generate text")
    s.add_argument("--student", required=True)
    s.add_argument("--disc", default=None)
    s.add_argument("--nfe", type=int, default=8)
    s.add_argument("--mode", choices=["as", "rgas"], default="as")
    s.add_argument("--num-samples", type=int, default=16)
    s.add_argument("--trace", action="store_true")
    s.set_defaults(func=cmd_sample, need_out=True)

    s = sub.add_parser("eval", parents=[common], help="perplexity / entropy grid")
    s.add_argument("--student", default=None)
    s.add_argument("--disc", default=None)
    s.add_argument("--teacher", default=None)
    s.add_argument("--evaluator", required=True)
    s.set_defaults(func=cmd_eval, need_out=True)

    s = sub.add_parser("oracle-check", parents=[common], help="exact-enumeration self checks")
    s.add_argument("--case", choices=["marginal", "ikl", "discriminator", "gradient"], required=True)
    s.set_defaults(func=cmd_oracle_check, need_out=False)

    s = sub.add_parser("inspect-ckpt", parents=[common], help="print checkpoint header")
    s.add_argument("checkpoint")
    s.set_defaults(func=cmd_inspect, need_out=False)

    s = sub.add_parser("rerun", parents=[common], help="replay a run from its manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_rerun, need_out=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = list(argv) if argv is not None else None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.need_out and not args.out:
        parser.error(f"{args.command} needs --out")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
