"""``repairkit`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import languages as lang
from .analyzer import BugReport, load_report
from .config import Config, load_config
from .errors import RepairkitError
from .miner import FIXED, DatasetRecord, Miner, MinerConfig, compute_stats, filter_record, load_dataset, write_dataset
from .obfuscator import obfuscate
from .pipeline import (
    EXIT_INFRA,
    EXIT_OK,
    EvalRecord,
    Validator,
    dumps_payload,
    emit_pr_comment,
    evaluate_topk,
    exit_code,
    load_encoder,
    run_fix,
    unified_diff,
)
from .retriever import EncoderParams, RetrievalStore, TrainConfig, TrainingLog, mean_loss, query, train_encoder

logger = logging.getLogger("repairkit")


def _records(path: str | Path) -> list[DatasetRecord]:
    p = Path(path)
    if p.is_dir():
        return load_dataset(p)
    return [DatasetRecord.from_json(json.loads(ln)) for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]


def _fixed_records(path: str | Path) -> list[DatasetRecord]:
    return [r for r in _records(path) if r.status == FIXED and r.fixed_method_text]


def _truth_key(repo_id: str, bug: BugReport) -> str:
    return f"{repo_id}|{bug.key()}"


# -- subcommands -------------------------------------------------------------


def cmd_mine(args: argparse.Namespace, config: Config) -> int:
    mc = MinerConfig(build_cmd=config.project.build, analyzer=config.analyzer, extensions=config.project.extensions)
    records = []
    for repo in args.repo:
        miner = Miner(repo, mc)
        records.extend(miner.mine(args.branch))
        for pair, reason, detail in miner.skips:
            logger.info("skip %s..%s %s: %s", pair.prev[:8], pair.curr[:8], reason, detail)
        logger.info("%s: %d capture(s)", repo, miner.capture_count)
    counts = write_dataset(records, args.out, all_statuses=args.all_statuses)
    kept = [r for r in records if r.status == FIXED and filter_record(r).keep]
    print(compute_stats(kept).render(), end="")
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def cmd_index_build(args: argparse.Namespace, config: Config) -> int:
    params = EncoderParams.load(args.encoder) if args.encoder else load_encoder(config)
    store = RetrievalStore(params)
    n = 0
    for rec in _fixed_records(args.dataset):
        key, _ = obfuscate(rec.buggy_method_text, rec.language)
        store.add_snippet(key, rec.fixed_method_text, rec.bug_type, rec.record_id)
        n += 1
    out = Path(args.out or config.retriever.index)
    out.parent.mkdir(parents=True, exist_ok=True)
    store.save(out)
    print(f"indexed {n} fix(es) into {out}")
    return EXIT_OK


def cmd_index_query(args: argparse.Namespace, config: Config) -> int:
    params = EncoderParams.load(args.encoder) if args.encoder else load_encoder(config)
    store = RetrievalStore.load(args.index or config.retriever.index, params)
    snippet = Path(args.snippet).read_text(encoding="utf-8")
    language = args.language or lang.language_for_path(args.snippet)
    q, _ = obfuscate(snippet, language)
    k = args.k if args.k is not None else config.retriever.k
    min_sim = args.min_sim if args.min_sim is not None else config.retriever.min_sim
    hits = query(store, q, args.bug_type, k, min_sim, params=params)
    print(json.dumps([{"fix": fix, "similarity": sim} for fix, sim in hits], indent=2))
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: Config) -> int:
    if args.pairs:
        rows = [json.loads(ln) for ln in Path(args.pairs).read_text(encoding="utf-8").splitlines() if ln.strip()]
        pairs = [(r["query"], r["positive"], r["bug_type"]) for r in rows]
    else:
        pairs = []
        for rec in _fixed_records(args.dataset):
            q, _ = obfuscate(rec.buggy_method_text, rec.language)
            p, _ = obfuscate(rec.fixed_method_text, rec.language)
            pairs.append((q, p, rec.bug_type))
    r = config.retriever
    params = EncoderParams.initialize(args.dim or r.dim, args.features or r.features, r.seed)
    tc = TrainConfig(epochs=args.epochs, step_size=args.step_size, batch_size=args.batch_size, seed=r.seed)
    log = TrainingLog()
    trained = train_encoder(pairs, tc, params, log=log)
    trained.save(args.out)
    print(json.dumps({
        "pairs": len(pairs),
        "initial_heldout_loss": log.initial_heldout_loss,
        "best_epoch": log.best_epoch,
        "epochs": log.epochs,
        "train_loss_after": mean_loss(pairs, trained, tc.batch_size) if len(pairs) >= 2 else None,
    }, indent=2))
    return EXIT_OK


def cmd_fix(args: argparse.Namespace, config: Config) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outcomes = run_fix(args.repo, args.report, config, outcomes_path=out / "outcomes.jsonl", log_dir=out / "logs")
    repo_id = args.repo_id or Path(args.repo).resolve().name
    comments = out / "comments"
    with open(out / "fixes.jsonl", "w", encoding="utf-8") as fh:
        for i, o in enumerate(outcomes):
            row = o.to_json() | {"truth_key": _truth_key(repo_id, o.bug)}
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
            if o.validated and o.patch is not None:
                diff = unified_diff(o.file_text, o.patched_file, o.bug.file)
                comments.mkdir(exist_ok=True)
                (comments / f"{i:04d}.json").write_text(dumps_payload(emit_pr_comment(o.bug, o.result, diff)), encoding="utf-8")
    fixed = sum(o.validated for o in outcomes)
    print(f"{fixed}/{len(outcomes)} bug(s) fixed and validated")
    return exit_code(outcomes)


def cmd_eval(args: argparse.Namespace, config: Config) -> int:
    truth = {}
    for rec in _fixed_records(args.dataset):
        truth[_truth_key(rec.repo_id, rec.to_bug_report())] = rec
    evals = []
    missing = 0
    for path in args.fixes:
        for ln in Path(path).read_text(encoding="utf-8").splitlines():
            if not ln.strip():
                continue
            row = json.loads(ln)
            rec = truth.get(row["truth_key"])
            if rec is None:
                missing += 1
                continue
            cands = [c["text"] for c in sorted(row["candidates"], key=lambda c: c["rank"])]
            evals.append(EvalRecord.build(rec.record_id, cands, rec.fixed_method_text))
    result = {
        "records": len(evals),
        "unmatched": missing,
        **{f"top{k}": evaluate_topk(evals, k) for k in range(1, args.k + 1)},
        "raw_top1": evaluate_topk(evals, 1, raw=True),
    }
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, config: Config) -> int:
    bugs = load_report(args.report)
    if not 0 <= args.bug < len(bugs):
        raise RepairkitError(f"report has {len(bugs)} bug(s); --bug {args.bug} is out of range")
    bug = bugs[args.bug]
    patched = Path(args.patched_file).read_text(encoding="utf-8")
    result = Validator(args.repo, config).validate(bug, patched)
    print(json.dumps(result.to_json(), indent=2, sort_keys=True))
    return EXIT_OK if result.validated else 2


# -- wiring ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repairkit", description="Retrieval-augmented repair of static-analysis findings.")
    p.add_argument("--config", type=Path, help="TOML configuration file")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mine", help="mine bug-fix records from commit history")
    m.add_argument("--repo", action="append", required=True)
    m.add_argument("--branch", default="HEAD")
    m.add_argument("--out", required=True)
    m.add_argument("--all-statuses", action="store_true", help="also write introduced/preexisting records")
    m.set_defaults(func=cmd_mine)

    ix = sub.add_parser("index", help="build or query the fix index")
    isub = ix.add_subparsers(dest="index_command", required=True)
    b = isub.add_parser("build")
    b.add_argument("--dataset", required=True, help="dataset directory or JSONL of records")
    b.add_argument("--out")
    b.add_argument("--encoder")
    b.set_defaults(func=cmd_index_build)
    q = isub.add_parser("query")
    q.add_argument("--index")
    q.add_argument("--encoder")
    q.add_argument("--snippet", required=True)
    q.add_argument("--bug-type", required=True)
    q.add_argument("--language", choices=sorted(lang.EXTENSIONS.values()))
    q.add_argument("--k", type=int)
    q.add_argument("--min-sim", type=float)
    q.set_defaults(func=cmd_index_query)

    t = sub.add_parser("train-retriever", help="train the snippet encoder")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--pairs", help="JSONL of {query, positive, bug_type}")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--step-size", type=float, default=0.5)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--dim", type=int)
    t.add_argument("--features", type=int)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fix", help="generate and validate fixes for reported bugs")
    f.add_argument("--repo", required=True)
    f.add_argument("--report", help="analyzer report.json (default: run the analyzer)")
    f.add_argument("--out", required=True)
    f.add_argument("--repo-id")
    f.set_defaults(func=cmd_fix)

    e = sub.add_parser("eval", help="top-k exact-match accuracy of fix runs")
    e.add_argument("--fixes", action="append", required=True, help="fixes.jsonl from 'repairkit fix'")
    e.add_argument("--dataset", required=True)
    e.add_argument("--k", type=int, default=5)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("validate", help="validate one patched file against a reported bug")
    v.add_argument("--repo", required=True)
    v.add_argument("--report", required=True)
    v.add_argument("--bug", type=int, default=0, help="index of the bug in the report")
    v.add_argument("--patched-file", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except EnvironmentError as e:
        print(f"repairkit: infrastructure error: {e}", file=sys.stderr)
        return EXIT_INFRA
    except RepairkitError as e:
        print(f"repairkit: {e}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
