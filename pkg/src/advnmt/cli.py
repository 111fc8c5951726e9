"""Command-line entry point: ``advnmt <subcommand> ...``.

Every subcommand that writes an artifact also writes ``<artifact>.manifest.json``
with the seed, resolved configuration, its hash, library versions and timings.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .agent import Agent, TrainConfig, train
from .baselines import NOISE_OPS, GsConfig, RsniConfig
from .candidates import build_table
from .discriminator import Discriminator, DiscriminatorConfig
from .harness import (AttackReport, analyze_preferences, coerce, evaluate, parse_config, relative_bleu_decrease,
                      resolve_seed, run_attack, time_attack, write_manifest, write_tuning)
from .metrics import bleu
from .textdata import build_vocab, read_lines, read_parallel, split_corpus, synth_corpus, tokenize, write_lines, \
    write_parallel
from .victim import Victim, VictimConfig, train_victim

logger = logging.getLogger("advnmt")


def _file_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _settings(args) -> Dict[str, str]:
    cfg: Dict[str, str] = {}
    if getattr(args, "config", None):
        cfg.update(parse_config(Path(args.config).read_text(encoding="utf-8")))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip().replace("-", "_")] = value.strip()
    return cfg


def _seed(args, cfg: Dict[str, str]) -> int:
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    return resolve_seed(seed)


def _refs(paths: Sequence[str], mode: str) -> List[List[List[str]]]:
    sets = [[tokenize(line, mode) for line in read_lines(p)] for p in paths]
    n = {len(s) for s in sets}
    if len(n) != 1:
        raise SystemExit(f"reference files differ in length: {sorted(n)}")
    return [list(group) for group in zip(*sets)]


def _table(victim: Victim, cfg: Dict[str, str]):
    return build_table(victim.export_embeddings(), int(cfg.get("k", 12)), cfg.get("radius", "mean"))


# -- subcommands --------------------------------------------------------------

def cmd_synth_data(args) -> int:
    seed = resolve_seed(args.seed)
    corpus = synth_corpus(args.task, args.vocab, args.pairs, (args.min_len, args.max_len), seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tags = corpus.tag_lines()
    n_test = min(args.test, len(corpus.pairs) - 1) if args.test else 0
    if n_test:
        train_p, test_p = split_corpus(corpus.pairs, n_test)
        write_parallel(out / "train.src", out / "train.tgt", train_p)
        write_parallel(out / "test.src", out / "test.tgt", test_p)
        write_lines(out / "train.tags", tags[:-n_test])
        write_lines(out / "test.tags", tags[-n_test:])
    else:
        write_parallel(out / "train.src", out / "train.tgt", corpus.pairs)
        write_lines(out / "train.tags", tags)
    write_lines(out / "lexicon.tsv", (f"{k}\t{v}" for k, v in sorted(corpus.lexicon.items())))
    write_manifest(out / "synth.manifest.json", "synth-data", seed, vars_of(args))
    return 0


def cmd_train_victim(args) -> int:
    cfg = _settings(args)
    seed = _seed(args, cfg)
    vcfg = coerce(VictimConfig, cfg)
    pairs = read_parallel(args.src, args.tgt, vcfg.tokenizer)
    sv = build_vocab([s for s, _ in pairs], args.vocab_size)
    tv = build_vocab([t for _, t in pairs], args.vocab_size)
    model = Victim(sv, tv, vcfg, seed)
    start = time.time()
    history = train_victim(model, pairs, args.steps, args.batch_size, args.lr, seed,
                           time_budget=args.time_budget, log_every=max(args.steps // 10, 1))
    elapsed = time.time() - start
    model.save(args.out)
    extra = {"train_seconds": elapsed, "steps": len(history), "final_loss": history[-1] if history else None,
             "checkpoint": _file_id(args.out)}
    if args.test_src and args.test_ref:
        test = read_parallel(args.test_src, args.test_ref, vcfg.tokenizer)
        hyps = model.translate_batch([s for s, _ in test])
        extra["test_bleu"] = bleu([h.tokens for h in hyps], [[t] for _, t in test])
        print(json.dumps({"test_bleu": extra["test_bleu"]}))
    write_manifest(f"{args.out}.manifest.json", "train-victim", seed,
                   {**vars_of(args), **cfg, "victim": vars(vcfg)}, extra)
    return 0


def cmd_train_attacker(args) -> int:
    cfg = _settings(args)
    seed = _seed(args, cfg)
    tcfg = coerce(TrainConfig, {**cfg, "seed": str(seed)})
    victim = Victim.load(args.victim)
    pairs = read_parallel(args.src, args.tgt, victim.cfg.tokenizer)
    table = _table(victim, cfg)
    agent = Agent.from_victim(victim, seed=seed)
    D = Discriminator.from_victim(victim, coerce(DiscriminatorConfig, cfg), seed=seed + 1)
    start = time.time()
    result = train(agent, victim, D, pairs, table, tcfg, log_path=args.log, include_wallclock=args.log_wallclock)
    elapsed = time.time() - start
    agent.save(args.out, {"victim": _file_id(args.victim), "stop_reason": result.stop_reason,
                          "rounds": len(result.log)})
    if args.disc_out:
        D.save(args.disc_out)
    write_manifest(f"{args.out}.manifest.json", "train-attacker", seed,
                   {**vars_of(args), **cfg, "train": vars(tcfg)},
                   {"train_seconds": elapsed, "stop_reason": result.stop_reason, "rounds": len(result.log),
                    "checkpoint": _file_id(args.out)})
    print(json.dumps({"stop_reason": result.stop_reason, "rounds": len(result.log)}))
    return 0


def _attack_common(args, method: str, cfg: Dict[str, str], seed: int, **kw) -> int:
    victim = Victim.load(args.victim)
    mode = victim.cfg.tokenizer
    srcs = [tokenize(line, mode) for line in read_lines(args.src)]
    refs = _refs(args.refs, mode)
    if len(srcs) != len(refs):
        raise SystemExit(f"{len(srcs)} sources but {len(refs)} reference lines")
    D = Discriminator.load(args.disc) if args.disc else None
    table = _table(victim, cfg) if method in ("agent", "gs") else None
    before = victim.backward_passes
    start = time.time()
    report = run_attack(method, victim, srcs, refs, table=table, D=D, seed=seed,
                        unk_mode=cfg.get("unk_surface", "repeat-last-char"), **kw)
    elapsed = time.time() - start
    report.meta.update({"victim": _file_id(args.victim), "backward_passes": victim.backward_passes - before,
                        "seed": seed})
    if method == "agent":
        agent = kw["agent"]
        report.meta.update({"agent": _file_id(args.agent), "agent_victim": getattr(agent, "meta", {}).get("victim")})
    report.write(args.out)
    write_manifest(f"{args.out}.manifest.json", method if method != "agent" else "attack", seed,
                   {**vars_of(args), **cfg}, {"wall_clock": elapsed, "per_sequence": elapsed / max(len(srcs), 1),
                                              "report": _file_id(args.out)})
    print(json.dumps({k: report.summary[k] for k in ("bleu_original", "bleu_perturbed", "chrbleu",
                                                     "modification_rate")}))
    return 0


def cmd_attack(args) -> int:
    cfg = _settings(args)
    seed = _seed(args, cfg)
    agent = Agent.load(args.agent)
    return _attack_common(args, "agent", cfg, seed, agent=agent, rule=args.rule or cfg.get("rule", "conjunction"))


def cmd_baseline(args) -> int:
    cfg = _settings(args)
    seed = _seed(args, cfg)
    if args.method == "gs":
        gcfg = GsConfig(ratio=args.ratio if args.ratio is not None else float(cfg.get("gs_ratio", 0.2)),
                        recompute=not args.no_recompute and cfg.get("gs_recompute", "true").lower() != "false")
        return _attack_common(args, "gs", cfg, seed, gs_cfg=gcfg)
    ops = tuple(args.ops.split(",")) if args.ops else tuple(
        o for o in cfg.get("rsni_ops", ",".join(NOISE_OPS)).split(",") if o)
    rcfg = RsniConfig(ratio=args.ratio if args.ratio is not None else float(cfg.get("rsni_ratio", 0.2)), ops=ops)
    return _attack_common(args, "rsni", cfg, seed, rsni_cfg=rcfg)


def cmd_evaluate(args) -> int:
    report = AttackReport.read(args.report)
    refs = _refs(args.refs, "whitespace") if args.refs else None
    summary = evaluate(report.rows, refs)
    summary["relative_bleu_decrease"] = relative_bleu_decrease(summary)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_analyze(args) -> int:
    report = AttackReport.read(args.report)
    rates = analyze_preferences(report.rows, read_lines(args.tags))
    text = json.dumps(rates, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_export_tuning(args) -> int:
    report = AttackReport.read(args.report)
    tgts = [tokenize(line) for line in read_lines(args.tgt)]
    pairs = write_tuning(report.rows, tgts, args.out_src, args.out_tgt)
    print(json.dumps({"pairs": len(pairs)}))
    return 0


def vars_of(args) -> Dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advnmt", description="Adversarial attacks on toy translation models")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed (ADVNMT_SEED wins)")
        if config:
            sp.add_argument("--config", help="key = value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("synth-data", help="write a synthetic parallel corpus")
    sp.add_argument("--task", choices=("copy", "reverse", "lexicon"), required=True)
    sp.add_argument("--vocab", type=int, default=100)
    sp.add_argument("--pairs", type=int, default=5000)
    sp.add_argument("--min-len", type=int, default=5)
    sp.add_argument("--max-len", type=int, default=15)
    sp.add_argument("--test", type=int, default=500, help="held-out pairs (0: none)")
    sp.add_argument("--out", default="data")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train-victim", help="train the translation model")
    sp.add_argument("--src", required=True)
    sp.add_argument("--tgt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--batch-size", type=int, default=50)
    sp.add_argument("--lr", type=float, default=2e-3)
    sp.add_argument("--vocab-size", type=int, default=1000)
    sp.add_argument("--time-budget", type=float, default=None, help="seconds")
    sp.add_argument("--test-src")
    sp.add_argument("--test-ref")
    common(sp)
    sp.set_defaults(func=cmd_train_victim)

    sp = sub.add_parser("train-attacker", help="train the perturbation agent against a victim")
    sp.add_argument("--victim", required=True)
    sp.add_argument("--src", required=True)
    sp.add_argument("--tgt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--disc-out")
    sp.add_argument("--log", help="line-delimited training log")
    sp.add_argument("--log-wallclock", action=argparse.BooleanOptionalAction, default=True)
    common(sp)
    sp.set_defaults(func=cmd_train_attacker)

    def attack_args(sp):
        sp.add_argument("--victim", required=True)
        sp.add_argument("--src", required=True)
        sp.add_argument("--refs", required=True, nargs="+")
        sp.add_argument("--out", required=True)
        sp.add_argument("--disc", help="discriminator checkpoint for survival traces")
        common(sp)

    sp = sub.add_parser("attack", help="perturb sources with a trained agent")
    sp.add_argument("--agent", required=True)
    sp.add_argument("--rule", choices=("conjunction", "critic"))
    attack_args(sp)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("baseline", help="gradient-search or random-noise attack")
    sp.add_argument("--method", choices=("gs", "rsni"), required=True)
    sp.add_argument("--ratio", type=float)
    sp.add_argument("--ops", help=f"comma-separated subset of {','.join(NOISE_OPS)}")
    sp.add_argument("--no-recompute", action="store_true")
    attack_args(sp)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("evaluate", help="corpus metrics of a report")
    sp.add_argument("--report", required=True)
    sp.add_argument("--refs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("analyze", help="per-tag modification rates")
    sp.add_argument("--report", required=True)
    sp.add_argument("--tags", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("export-tuning", help="write (perturbed source, original target) pairs")
    sp.add_argument("--report", required=True)
    sp.add_argument("--tgt", required=True)
    sp.add_argument("--out-src", required=True)
    sp.add_argument("--out-tgt", required=True)
    sp.set_defaults(func=cmd_export_tuning)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"advnmt {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
