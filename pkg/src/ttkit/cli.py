"""``ttkit`` command-line entry points.

Exit codes: 0 success, 1 verification failure, 2 input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, batchio, refnet, verify
from .errors import ConfigError, TTKitError
from .mcla import MclaConfig, NoiseModel, variance_report
from .objectives import (
    AdvantageMode,
    CurationSample,
    ObjectiveConfig,
    TestOutcomes,
    TrajectoryLogprobs,
    combined_objective,
    f2p_p2p_verify,
    group_advantages,
    grpo_reference,
    gspo_reference,
    opd_loss,
    pass_at_k_filter,
    turn_level_objective,
)
from .packing import NormalizationMode, dfs_flatten, estimate_speedup
from .records import read_records, write_records
from .synth import random_tree_calls
from .trajectory import build_tree
from .workload import DEFAULT_GRID, LARGE_SCALE, WorkloadSpec, generate

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
REPORT_SCHEMA = 1
log = logging.getLogger("ttkit")


# ---- plumbing ---------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if hasattr(x, "value"):  # enums
        return x.value
    raise TypeError(f"cannot serialise {type(x).__name__}")


def write_manifest(path, command, config, seed, inputs=(), outputs=()) -> dict:
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(canonical_json(config).encode()).hexdigest(),
        "inputs": {str(Path(p).name): sha256_file(p) for p in inputs},
        "outputs": {str(Path(p).name): sha256_file(p) for p in outputs},
        "seed": seed,
        "tool_version": __version__,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return obj


def worker_count() -> int:
    raw = os.environ.get("TTKIT_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TTKIT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("TTKIT_THREADS must be at least 1")
    return n


def ordered_map(fn, items) -> list:
    """fn over items, possibly concurrently; results come back in input order."""
    items = list(items)
    n = min(worker_count(), max(len(items), 1))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def emit(report: dict, fmt: str, table_rows=None, out=None) -> None:
    out = out or sys.stdout
    if fmt == "json":
        out.write(json.dumps(report, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return
    rows = table_rows if table_rows is not None else [(k, v) for k, v in report.items() if not isinstance(v, (list, dict))]
    width = max((len(str(r[0])) for r in rows), default=0)
    for row in rows:
        out.write(f"{str(row[0]).ljust(width)}  " + "  ".join(_fmt(v) for v in row[1:]) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


# ---- gen --------------------------------------------------------------------

def workload_spec(args, cfg: dict) -> WorkloadSpec:
    fields = {k: v for k, v in cfg.items() if k in WorkloadSpec.__dataclass_fields__}
    if args.workload:
        grid = {**DEFAULT_GRID, **LARGE_SCALE}
        if args.workload not in grid:
            raise ConfigError(f"unknown workload {args.workload!r}; choose from {sorted(grid)}")
        spec = WorkloadSpec(**{**asdict(grid[args.workload]), **fields})
    else:
        spec = WorkloadSpec.from_dict(fields)
    if args.seed is not None:
        spec = WorkloadSpec(**{**asdict(spec), "seed": args.seed})
    return spec


def cmd_gen(args, cfg) -> int:
    spec = workload_spec(args, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_records(out, generate(spec))
    tree, linear = spec.closed_form_tokens()
    report = {
        "schema": REPORT_SCHEMA,
        "workload": asdict(spec),
        "tasks": spec.num_tasks,
        "calls_per_task": spec.calls_per_task,
        "closed_form_tree_tokens": tree * spec.num_tasks,
        "closed_form_linear_tokens": linear * spec.num_tasks,
        "closed_form_ratio": spec.closed_form_ratio(),
    }
    manifest_path = args.manifest or str(out) + ".manifest.json"
    write_manifest(manifest_path, "gen", asdict(spec), spec.seed, outputs=[out])
    emit(report, args.format)
    return EXIT_OK


# ---- pack -------------------------------------------------------------------

def pack_records(records, mode) -> list:
    def one(rec):
        tree = build_tree(rec.calls)
        return tree, dfs_flatten(tree, mode)
    return ordered_map(one, records)


def cmd_pack(args, cfg) -> int:
    mode = NormalizationMode.parse(args.mode)
    records = read_records(args.input, strict=args.strict)
    packed = pack_records(records, mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for k, (_, batch) in enumerate(packed):
        path = out / f"task_{k:05d}.{'json' if args.batch_format == 'json' else 'ttk'}"
        if args.batch_format == "json":
            path.write_text(batchio.to_json(batch))
        else:
            batchio.write_batch(path, batch)
        outputs.append(path)
    if packed:
        sp = estimate_speedup([t for t, _ in packed], quadratic_attention=True)
        ratio, attn = sp.token_ratio, sp.attention_ratio
        tree_tokens, linear_tokens = sp.tree_tokens, sp.linear_tokens
    else:
        ratio = attn = None
        tree_tokens = linear_tokens = 0
    report = {
        "schema": REPORT_SCHEMA,
        "mode": mode.label,
        "tasks": len(packed),
        "tree_tokens": tree_tokens,
        "linear_tokens": linear_tokens,
        "redundancy_ratio": ratio,
        "attention_ratio": attn,
        "per_task": [
            {"file": p.name, "tree_tokens": b.num_tokens, "paths": len(b.paths)}
            for p, (_, b) in zip(outputs, packed)
        ],
    }
    dump_json(out / "report.json", report)
    write_manifest(out / "manifest.json", "pack", {"mode": mode.label, "batch_format": args.batch_format},
                   args.seed, inputs=[args.input], outputs=outputs + [out / "report.json"])
    emit(report, args.format)
    return EXIT_OK


# ---- check ------------------------------------------------------------------

def _check_targets(paths):
    for p in map(Path, paths):
        if p.is_dir():
            files = sorted(q for q in p.iterdir() if q.suffix in (".ttk", ".jsonl") or
                           (q.suffix == ".json" and q.name.startswith("task_")))
            if not files:
                raise ConfigError(f"{p}: no packed batches or record files")
            yield from files
        else:
            yield p


def cmd_check(args, cfg) -> int:
    suites = verify.SUITES if args.suite == "all" else (args.suite,)
    seed = args.seed or 0
    source = {}
    if args.records:
        for rec in read_records(args.records, strict=args.strict):
            for c in rec.calls:
                source[c.call_id] = c
    jobs = []
    for path in _check_targets(args.paths):
        if path.suffix == ".jsonl":
            for k, rec in enumerate(read_records(path, strict=args.strict)):
                batch = dfs_flatten(build_tree(rec.calls), NormalizationMode.parse(args.mode))
                jobs.append((f"{path.name}#{k}", batch, rec.calls, rec.rewards))
        else:
            batch = batchio.read_batch(path)
            calls = None
            if source:
                calls = [source[p.call_id] for p in batch.paths if p.call_id in source]
                if len(calls) != len(batch.paths):
                    calls = []  # forces a call-set mismatch
            jobs.append((path.name, batch, calls, None))

    if args.random_trees:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7472]))
        for k in range(args.random_trees):
            calls = random_tree_calls(rng)
            for mode in NormalizationMode:
                jobs.append((f"random-{k}-{mode.label}", dfs_flatten(build_tree(calls), mode), calls, None))

    def run(job):
        target, batch, calls, rewards = job
        return verify.run_suites(batch, target, suites, seed=seed, source_calls=calls, rewards=rewards)

    results = [r for rs in ordered_map(run, jobs) for r in rs]
    passed = all(r.passed for r in results)
    errs = [r.max_error for r in results if r.max_error is not None]
    report = {
        "schema": REPORT_SCHEMA,
        "suites": list(suites),
        "checks": len(results),
        "failures": sum(not r.passed for r in results),
        "passed": passed,
        "max_error": max(errs) if errs else None,
        "results": [r.to_dict() for r in results],
    }
    rows = [(r.target, r.suite, "PASS" if r.passed else "FAIL", r.detail) for r in results]
    rows.append(("summary", f"{len(results) - report['failures']}/{len(results)} passed",
                 "PASS" if passed else "FAIL", f"max error {report['max_error']}"))
    emit(report, args.format, rows)
    if args.manifest:
        write_manifest(args.manifest, "check", {"suites": list(suites), "mode": args.mode}, seed,
                       inputs=[p for p in _check_targets(args.paths)])
    return EXIT_OK if passed else EXIT_FAIL


# ---- objective --------------------------------------------------------------

def _refnet_logprobs(params, calls):
    batch = dfs_flatten(build_tree(calls))
    lp, _ = refnet.forward_logprobs(params, batch.token_ids, batch.position_ids,
                                    refnet.AttentionPlan.from_batch(batch))
    by_id = {p.call_id: lp[idx] for p, idx in zip(batch.paths, batch.path_token_indices())}
    return [by_id[c.call_id] for c in calls]


def _snapshot(records, seed, dim=4):
    vocab = max(max(int(t) for c in r.calls for t in c.token_ids) for r in records) + 1
    vocab = max(vocab, max((r.vocab_size or 0) for r in records))
    longest = max(len(c) for r in records for c in r.calls)
    return refnet.RefNetParams.init(vocab, dim, longest, seed)


def cmd_objective(args, cfg_obj) -> int:
    cfg = ObjectiveConfig.from_dict(cfg_obj)
    records = read_records(args.input, strict=args.strict)
    if not records:
        raise ConfigError(f"{args.input}: no records")
    seed = args.seed or 0
    source = args.train_source
    if source == "records" and not all(len(r.train_logprobs) == len(r.calls) for r in records):
        raise ConfigError("--train-source records needs train_logprobs on every call")
    params = refnet.load_params(args.params) if args.params else _snapshot(records, seed)
    teacher = _snapshot(records, seed + 1) if not args.params else refnet.RefNetParams.init(
        params.vocab_size, params.dim, params.max_positions, seed + 1)

    def one(rec):
        if source == "records":
            train = [np.asarray(rec.train_logprobs[c.call_id], dtype=np.float64) for c in rec.calls]
        elif source == "rollout":
            train = [np.where(c.origins == 1, c.rollout_logprobs, 0.0) for c in rec.calls]
        else:
            train = _refnet_logprobs(params, rec.calls)
        views = [TrajectoryLogprobs.from_call(c, t) for c, t in zip(rec.calls, train)]
        task_cfg = cfg
        if len(views) < 2 and cfg.advantage_mode is AdvantageMode.MEAN_STD_NORM:
            task_cfg = ObjectiveConfig(**{**cfg.__dict__, "advantage_mode": AdvantageMode.MEAN_ONLY})
        adv = group_advantages(rec.rewards, task_cfg)
        lt = turn_level_objective(views, adv, cfg)
        gspo = gspo_reference(views, adv, cfg)
        grpo = grpo_reference(views, adv, cfg)
        res_gspo = abs(turn_level_objective([v.as_single_turn() for v in views], adv, cfg).value - gspo.value)
        res_grpo = abs(turn_level_objective([v.as_token_turns() for v in views], adv, cfg).value - grpo.value)
        teacher_lp = _refnet_logprobs(teacher, rec.calls)
        mask = np.concatenate([c.origins == 1 for c in rec.calls])
        opd = opd_loss(np.concatenate(train), np.concatenate(teacher_lp), mask, cfg)
        combined, _ = combined_objective(lt, opd, cfg)
        return {
            "env_id": rec.task.env_id,
            "advantages": adv.tolist(),
            "turn_ratios": [tr.ratios.tolist() for tr in lt.ratios],
            "clip_fraction": lt.clip_fraction,
            "L_turn": lt.value,
            "L_gspo": gspo.value,
            "L_grpo": grpo.value,
            "residual_gspo": res_gspo,
            "residual_grpo": res_grpo,
            "opd": opd.value,
            "combined": combined,
        }

    tasks = ordered_map(one, records)
    report = {
        "schema": REPORT_SCHEMA,
        "config": {k: _jsonable(v) if hasattr(v, "value") else v for k, v in cfg.__dict__.items()},
        "train_source": source,
        "tasks": tasks,
        "L_turn": float(np.mean([t["L_turn"] for t in tasks])),
        "max_residual_gspo": max(t["residual_gspo"] for t in tasks),
        "max_residual_grpo": max(t["residual_grpo"] for t in tasks),
    }
    rows = [("task", "L_turn", "L_gspo", "L_grpo", "opd", "res_gspo", "res_grpo")]
    rows += [(t["env_id"], t["L_turn"], t["L_gspo"], t["L_grpo"], t["opd"], t["residual_gspo"], t["residual_grpo"])
             for t in tasks]
    emit(report, args.format, rows)
    if args.manifest:
        write_manifest(args.manifest, "objective", {**report["config"], "train_source": source}, seed,
                       inputs=[args.input] + ([args.params] if args.params else []))
    return EXIT_OK


# ---- mcla -------------------------------------------------------------------

MCLA_KEYS = {"sigma", "distribution", "seed", "shared_per_trajectory", "K", "apply_icepop", "tau_ip",
             "trials", "tokens", "true_lp", "confidence"}


def cmd_mcla(args, cfg) -> int:
    unknown = set(cfg) - MCLA_KEYS - set(ObjectiveConfig.__dataclass_fields__)
    if unknown and args.strict:
        raise ConfigError(f"unknown mcla config key(s) {sorted(unknown)}")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    tau = cfg.get("tau_ip", cfg.get("icepop_threshold", float(np.log(2.0))))
    model = NoiseModel(float(cfg.get("sigma", 0.5)), cfg.get("distribution", "Gaussian"), seed,
                       bool(cfg.get("shared_per_trajectory", False)))
    mcfg = MclaConfig(int(cfg.get("K", 8)), bool(cfg.get("apply_icepop", False)), float(tau))
    tokens = int(cfg.get("tokens", 1))
    true_lp = cfg.get("true_lp", -1.0)
    true = np.asarray(true_lp, dtype=np.float64) if isinstance(true_lp, list) else np.full(tokens, float(true_lp))
    rep = variance_report(true, model, mcfg, trials=int(cfg.get("trials", 10_000)),
                          confidence=float(cfg.get("confidence", 0.95)))
    report = {"schema": REPORT_SCHEMA, **rep.to_dict()}
    if rep.reduction_factor is None:
        report["reduction_factor"] = "n/a"
    emit(report, args.format)
    if args.manifest:
        write_manifest(args.manifest, "mcla", report["config"], seed,
                       inputs=[args.config] if args.config else [])
    return EXIT_OK


# ---- curate -----------------------------------------------------------------

def _curate_one(obj, line):
    if not isinstance(obj, dict):
        raise ConfigError(f"line {line}: record must be an object")
    out = {"id": obj.get("id", f"line-{line}")}
    retained = True
    reasons = []
    has_tests = "fail_set_results" in obj or "pass_set_results" in obj
    has_k = "answers" in obj
    if not (has_tests or has_k):
        raise ConfigError(f"line {line}: needs test results and/or answers")
    if has_tests:
        d = f2p_p2p_verify(TestOutcomes(obj.get("fail_set_results", {}), obj.get("pass_set_results", {})))
        out.update(f2p=d.f2p, p2p=d.p2p, vacuous_f2p=d.vacuous_f2p)
        retained &= d.retained
        if d.reason:
            reasons.append(d.reason)
    if has_k:
        if "gold" not in obj:
            raise ConfigError(f"line {line}: answers without gold")
        s = CurationSample(obj["answers"], obj["gold"], int(obj.get("K", len(obj["answers"]))))
        d = pass_at_k_filter(s)
        out.update(r_hat=d.r_hat, correct=d.correct, K=s.K)
        retained &= d.retained
        if d.reason:
            reasons.append(d.reason)
    out.update(retained=bool(retained), reason="+".join(reasons))
    return out


def cmd_curate(args, cfg) -> int:
    decisions = []
    with open(args.input, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"line {n}: invalid JSON ({exc.msg})") from None
            try:
                decisions.append(_curate_one(obj, n))
            except TTKitError as exc:
                raise ConfigError(f"line {n}: {exc}") from None
    kept = sum(d["retained"] for d in decisions)
    report = {
        "schema": REPORT_SCHEMA,
        "records": len(decisions),
        "retained": kept,
        "retention_rate": kept / len(decisions) if decisions else None,
        "decisions": decisions,
    }
    rows = [(d["id"], "retained" if d["retained"] else "discarded", d["reason"]) for d in decisions]
    rows.append(("total", f"{kept}/{len(decisions)} retained"))
    emit(report, args.format, rows)
    if args.manifest:
        write_manifest(args.manifest, "curate", {}, args.seed, inputs=[args.input])
    return EXIT_OK


# ---- parser -----------------------------------------------------------------

def _globals(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="master seed")
    p.add_argument("--format", choices=("table", "json"), default=d if suppress else "table")
    p.add_argument("--strict", action="store_true", default=d if suppress else False,
                   help="reject unknown record/config fields")
    p.add_argument("--config", default=d, help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttkit", description="Tree-packed trajectory training toolkit.")
    p.add_argument("--version", action="version", version=f"ttkit {__version__}")
    _globals(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _globals(sp, suppress=True)
        sp.add_argument("--manifest", default=None, help="write a run manifest here")
        return sp

    g = add("gen", "generate synthetic trajectory records")
    g.add_argument("out")
    g.add_argument("--workload", help=f"named workload: {', '.join(sorted({**DEFAULT_GRID, **LARGE_SCALE}))}")

    k = add("pack", "pack records into tree batches")
    k.add_argument("input")
    k.add_argument("--out", required=True, help="output directory")
    k.add_argument("--mode", default="PathSum", help="PathSum or PathMean")
    k.add_argument("--batch-format", choices=("ttk1", "json"), default="ttk1")

    c = add("check", "run verification suites")
    c.add_argument("paths", nargs="*", default=[])
    c.add_argument("--suite", choices=verify.SUITES + ("all",), default="all")
    c.add_argument("--records", help="source records for the roundtrip comparison")
    c.add_argument("--random-trees", type=int, default=0, help="also check N seeded random trees")
    c.add_argument("--mode", default="PathSum", help="normalisation for record-file targets")

    o = add("objective", "evaluate the turn-level objective")
    o.add_argument("input")
    o.add_argument("--params", help="RefNet parameter snapshot (JSON)")
    o.add_argument("--train-source", choices=("refnet", "records", "rollout"), default="refnet")

    add("mcla", "MCLA variance report")

    u = add("curate", "F2P/P2P and pass@K curation")
    u.add_argument("input")
    return p


COMMANDS = {"gen": cmd_gen, "pack": cmd_pack, "check": cmd_check, "objective": cmd_objective,
            "mcla": cmd_mcla, "curate": cmd_curate}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="ttkit: %(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "check" and not args.paths and not args.random_trees:
            raise ConfigError("check needs paths or --random-trees")
        return COMMANDS[args.command](args, cfg)
    except (TTKitError, OSError) as exc:
        print(f"ttkit: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
