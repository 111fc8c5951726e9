"""Experiment pipeline: attack reports, evaluation, tag analysis, tuning export, timing.

Reports are line-delimited JSON: one summary object followed by one object per
sequence. The summary is recomputed from the rows whenever a report is loaded.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import platform
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .agent import Agent, perturb_inference
from .baselines import GsConfig, RsniConfig, gs_attack, rsni_attack
from .candidates import CandidateTable, surface_for_unk
from .metrics import bleu, chr_bleu, relative_decrease, sentence_bleu
from .textdata import UNK, Pair, detokenize, frame, tokenize, write_parallel

SEED_ENV = "ADVNMT_SEED"
AGG_TOL = 1e-9


# -- rows and reports -----------------------------------------------------------

@dataclass
class ReportRow:
    index: int
    original: List[str]
    perturbed: List[str]
    decisions: List[bool]
    refs: List[List[str]]
    hyp_original: List[str]
    hyp_perturbed: List[str]
    bleu_original: float = 0.0
    bleu_perturbed: float = 0.0
    survival: List[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.original) != len(self.perturbed) or len(self.decisions) != len(self.original):
            raise ValueError(f"row {self.index}: original, perturbed and decisions must align")


@dataclass
class AttackReport:
    rows: List[ReportRow]
    summary: Dict = field(default_factory=dict)
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = evaluate(self.rows)

    def write(self, path) -> None:
        head = {"type": "summary", **self.meta, **self.summary}
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            for r in self.rows:
                fh.write(json.dumps({"type": "row", **dataclasses.asdict(r)}, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "AttackReport":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path}: empty report")
        head = json.loads(lines[0])
        if head.get("type") != "summary":
            raise ValueError(f"{path}: first line is not a summary object")
        rows = []
        for k, line in enumerate(lines[1:], start=2):
            obj = json.loads(line)
            if obj.pop("type", None) != "row":
                raise ValueError(f"{path}:{k}: expected a row object")
            rows.append(ReportRow(**obj))
        summary = evaluate(rows)
        for key, value in summary.items():
            stored = head.get(key)
            if not _same(stored, value):
                raise ValueError(f"{path}: stored aggregate {key}={stored!r} disagrees with rows ({value!r})")
        meta = {k: v for k, v in head.items() if k not in summary and k != "type"}
        return cls(rows, summary, meta)


def _same(a, b) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        if a is None or b is None:
            return a is b
        return abs(float(a) - float(b)) <= AGG_TOL * max(1.0, abs(float(b)))
    return a == b


def evaluate(rows: Sequence[ReportRow], refs: Optional[Sequence[Sequence[Sequence[str]]]] = None) -> Dict:
    """Corpus BLEU before/after, chrBLEU of the sources, RD and modification rate."""
    if refs is not None and len(refs) != len(rows):
        raise ValueError(f"evaluate: {len(rows)} report rows but {len(refs)} reference sets")
    if not rows:
        raise ValueError("evaluate: empty report")
    refs = [r.refs for r in rows] if refs is None else [list(r) for r in refs]
    b0 = bleu([r.hyp_original for r in rows], refs)
    b1 = bleu([r.hyp_perturbed for r in rows], refs)
    chr_ = chr_bleu([r.perturbed for r in rows], [r.original for r in rows])
    n_tok = sum(len(r.original) for r in rows)
    n_mod = sum(sum(r.decisions) for r in rows)
    rd = relative_decrease(b0, b1, chr_)
    out = {"n": len(rows), "bleu_original": b0, "bleu_perturbed": b1, "bleu_delta": b0 - b1,
           "chrbleu": chr_, "rd": rd, "modification_rate": n_mod / max(n_tok, 1)}
    surv = [r.survival[-1] for r in rows if r.survival]
    if surv:
        out["d_pass_rate"] = float(np.mean([s >= 0.5 for s in surv]))
    return out


def relative_bleu_decrease(summary: Dict) -> float:
    b0 = summary["bleu_original"]
    return 0.0 if b0 <= 0 else (b0 - summary["bleu_perturbed"]) / b0


# -- building reports ----------------------------------------------------------

def surfaces_from_ids(ids: np.ndarray, originals: Sequence[Sequence[str]], vocab, unk_mode: str) -> List[List[str]]:
    """Surface tokens for framed perturbed ids; unchanged positions keep their original surface."""
    out = []
    for row, orig in zip(ids, originals):
        toks = []
        for pos, tok in enumerate(orig, start=1):
            new = int(row[pos])
            if new == vocab.id(tok):
                toks.append(tok)
            elif new == UNK:
                toks.append(surface_for_unk(tok, unk_mode, vocab))
            else:
                toks.append(vocab.itos[new])
        out.append(toks)
    return out


def survival_traces(D, vocab, tgt_vocab, states: Sequence[List[List[str]]], tgts: Sequence[Sequence[str]]):
    """D's P(positive) per row for each snapshot in ``states`` (list over positions)."""
    if D is None:
        return [[] for _ in tgts]
    tgt, tm = frame([tgt_vocab.encode(t) for t in tgts])
    traces = [[] for _ in tgts]
    for snap in states:
        src, sm = frame([vocab.encode(s) for s in snap])
        p = D.prob_positive(src, sm, tgt, tm)
        for i, v in enumerate(p):
            traces[i].append(float(v))
    return traces


def _rows(victim, srcs, perturbed, decisions, refs, survival) -> List[ReportRow]:
    mode = victim.cfg.tokenizer
    orig_tr = victim.translate_batch([detokenize(s, mode) for s in srcs])
    pert_tr = victim.translate_batch([detokenize(s, mode) for s in perturbed])
    rows = []
    for i, (s, p, d, r) in enumerate(zip(srcs, perturbed, decisions, refs)):
        rows.append(ReportRow(i, list(s), list(p), [bool(x) for x in d], [list(x) for x in r],
                              orig_tr[i].tokens, pert_tr[i].tokens,
                              sentence_bleu(orig_tr[i].tokens, r), sentence_bleu(pert_tr[i].tokens, r),
                              survival[i]))
    return rows


def agent_attack(agent: Agent, victim, srcs: Sequence[List[str]], table: CandidateTable,
                 rule: str = "conjunction", unk_mode: str = "repeat-last-char",
                 batch_size: int = 100) -> Tuple[List[List[str]], List[List[bool]]]:
    vocab = victim.src_vocab
    out, decs = [], []
    for start in range(0, len(srcs), batch_size):
        chunk = srcs[start:start + batch_size]
        src, mask = frame([vocab.encode(s) for s in chunk])
        ids, dec = perturb_inference(agent, src, mask, table, rule)
        out.extend(surfaces_from_ids(ids, chunk, vocab, unk_mode))
        decs.extend([list(dec[i, 1:len(s) + 1]) for i, s in enumerate(chunk)])
    return out, decs


def run_attack(method: str, victim, srcs: Sequence[List[str]], refs, *, agent=None, table=None,
               D=None, tgts=None, seed: int = 0, rule: str = "conjunction",
               gs_cfg: GsConfig = GsConfig(), rsni_cfg: RsniConfig = RsniConfig(),
               unk_mode: str = "repeat-last-char", rsni_counts: Optional[Sequence[int]] = None) -> AttackReport:
    """Attack every source and build a report. ``tgts`` (first references by default) feed D's traces.

    ``rsni_counts`` pins the number of noised positions per sentence (e.g. to
    match another attack's modifications row by row); rows with 0 stay clean.
    """
    srcs = [list(s) for s in srcs]
    tgts = [list(r[0]) for r in refs] if tgts is None else tgts
    if method == "agent":
        perturbed, decisions = agent_attack(agent, victim, srcs, table, rule, unk_mode)
    elif method == "gs":
        perturbed, decisions = [], []
        vocab, tv = victim.src_vocab, victim.tgt_vocab
        for i, (s, t) in enumerate(zip(srcs, tgts)):
            ids, dec = gs_attack(victim, vocab.encode(s), tv.encode(t), table, gs_cfg, seed + i)
            framed = np.array([[0] + ids + [0]])
            perturbed.append(surfaces_from_ids(framed, [s], vocab, unk_mode)[0])
            decisions.append(dec)
    elif method == "rsni":
        perturbed, decisions = [], []
        if rsni_counts is not None and len(rsni_counts) != len(srcs):
            raise ValueError(f"run_attack: {len(rsni_counts)} noise counts for {len(srcs)} sources")
        for i, s in enumerate(srcs):
            cfg = rsni_cfg
            if rsni_counts is not None:
                k = min(int(rsni_counts[i]), len(s))
                if k == 0:
                    perturbed.append(list(s))
                    decisions.append([False] * len(s))
                    continue
                cfg = RsniConfig(ratio=k / len(s), ops=rsni_cfg.ops)
            p, dec = rsni_attack(s, cfg, seed + i, victim.src_vocab)
            perturbed.append(p)
            decisions.append(dec)
    else:
        raise ValueError(f"unknown attack method {method!r}")
    survival = [[] for _ in srcs]
    if D is not None:
        survival = survival_traces(D, victim.src_vocab, victim.tgt_vocab, [srcs, perturbed], tgts)
    return AttackReport(_rows(victim, srcs, perturbed, decisions, refs, survival), meta={"method": method})


# -- analysis -----------------------------------------------------------------

def analyze_preferences(rows: Sequence[ReportRow], tag_lines: Sequence[str]) -> Dict[str, float]:
    """Per-tag modification rate over aligned tag lines, plus ``overall``."""
    if len(tag_lines) != len(rows):
        raise ValueError(f"analyze: {len(rows)} report rows but {len(tag_lines)} tag lines")
    hit: Dict[str, int] = defaultdict(int)
    total: Dict[str, int] = defaultdict(int)
    for k, (row, line) in enumerate(zip(rows, tag_lines), start=1):
        tags = line.split()
        if len(tags) != len(row.original):
            raise ValueError(f"analyze: line {k} has {len(tags)} tags for {len(row.original)} tokens")
        for tag, d in zip(tags, row.decisions):
            total[tag] += 1
            hit[tag] += int(d)
    rates = {tag: hit[tag] / total[tag] for tag in sorted(total)}
    rates["overall"] = sum(hit.values()) / max(sum(total.values()), 1)
    return rates


def export_tuning(rows: Sequence[ReportRow], original_tgts: Sequence[Sequence[str]]) -> List[Pair]:
    """(perturbed source, original target) pairs in report order."""
    if len(rows) != len(original_tgts):
        raise ValueError(f"export_tuning: {len(rows)} rows but {len(original_tgts)} targets")
    return [(list(r.perturbed), list(t)) for r, t in zip(rows, original_tgts)]


def write_tuning(rows, original_tgts, src_path, tgt_path, mode: str = "whitespace") -> List[Pair]:
    pairs = export_tuning(rows, original_tgts)
    write_parallel(src_path, tgt_path, pairs, mode)
    return pairs


# -- timing -------------------------------------------------------------------

def time_attack(method: str, victim, srcs: Sequence[List[str]], tgts: Sequence[List[str]], *,
                agent=None, table=None, repeats: int = 1, gs_cfg: GsConfig = GsConfig(),
                rsni_cfg: RsniConfig = RsniConfig(), seed: int = 0) -> Dict:
    """Wall-clock of generating perturbations for ``srcs`` (translation excluded)."""
    if method not in ("agent", "gs", "rsni"):
        raise ValueError(f"unknown method {method!r}")
    times = []
    passes = 0
    for _ in range(repeats):
        before = victim.backward_passes
        start = time.perf_counter()
        if method == "agent":
            agent_attack(agent, victim, srcs, table)
        elif method == "gs":
            for i, (s, t) in enumerate(zip(srcs, tgts)):
                gs_attack(victim, victim.src_vocab.encode(s), victim.tgt_vocab.encode(t), table, gs_cfg, seed + i)
        else:
            for i, s in enumerate(srcs):
                rsni_attack(s, rsni_cfg, seed + i, victim.src_vocab)
        times.append(time.perf_counter() - start)
        passes = victim.backward_passes - before
    arr = np.array(times)
    return {"method": method, "n": len(srcs), "total_seconds": float(arr.mean()),
            "per_sequence": float(arr.mean() / max(len(srcs), 1)), "repeats": times,
            "std_seconds": float(arr.std()), "backward_passes": passes}


# -- configuration and manifests -------------------------------------------------

def parse_config(text: str) -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    for k, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {k}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def coerce(dc_type, values: Dict[str, str], strict: bool = False):
    """Build dataclass ``dc_type`` from string values, converting by field type."""
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(dc_type)}
    for key, value in values.items():
        if key not in fields:
            if strict:
                raise ValueError(f"unknown config key {key!r} for {dc_type.__name__}")
            continue
        default = fields[key].default
        kwargs[key] = _convert(value, default)
    return dc_type(**kwargs)


def _convert(value, default):
    if not isinstance(value, str):
        return value
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return value


def resolve_seed(seed: int) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else seed


def config_hash(cfg: Dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(path, command: str, seed: int, cfg: Dict, extra: Optional[Dict] = None) -> Dict:
    import scipy
    manifest = {
        "command": command, "seed": seed, "config": cfg, "config_hash": config_hash(cfg),
        "versions": {"advnmt": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
    }
    manifest.update(extra or {})
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return manifest
