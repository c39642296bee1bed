"""End-to-end repair: locate, contextualize, retrieve, prompt, generate, apply, validate.

Also hosts exact-match evaluation and the pull-request comment payload.
"""

from __future__ import annotations

import difflib
import glob
import json
import logging
import os
import queue
import tempfile
import threading
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import languages as lang
from .analyzer import (
    TARGET_BUG_TYPES,
    BugReport,
    ReportDiff,
    _run_logged,
    analyze,
    capture,
    diff_reports,
    expand_command,
    load_report,
    worktree_lock,
)
from .config import Config
from .context import (
    MethodSpan,
    extract_ewash_context,
    insert_markers,
    locate_buggy_method,
    resolve_focal_methods,
    strip_markers,
)
from .errors import BuildError, CandidateParseError, ContractError, ParseError, RepairkitError
from .generator import Backend, CandidatePatch, HttpBackend, Limited, MockBackend, generate_candidates, rank_candidates
from .obfuscator import obfuscate
from .promptgen import PromptBundle, assemble_repair_prompt, tokenize
from .retriever import EncoderParams, RetrievalStore, query

logger = logging.getLogger(__name__)

VALIDATED = "Validated"
REJECTED_BUILD = "RejectedBuildFailure"
REJECTED_TEST = "RejectedTestFailure"
REJECTED_STILL_BUGGY = "RejectedStillBuggy"

UNSUPPORTED_BUG_TYPE = "unsupported_bug_type"

EXIT_OK = 0
EXIT_UNFIXED = 2
EXIT_INFRA = 3


@dataclass
class ValidationResult:
    status: str
    logs: dict[str, str] = field(default_factory=dict)
    analyzer_delta: ReportDiff | None = None
    detail: str = ""

    @property
    def validated(self) -> bool:
        return self.status == VALIDATED

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "logs": dict(sorted(self.logs.items())),
            "analyzer_delta": self.analyzer_delta.to_json() if self.analyzer_delta else None,
            "detail": self.detail,
        }


# -- patch application -------------------------------------------------------


def _check_method(text: str, language: str) -> None:
    wrapped = f"class __Candidate__ {{\n{text}\n}}\n"
    try:
        src = lang.parse(wrapped, language)
    except ParseError as e:
        raise CandidateParseError(f"candidate is not a well-formed method: {e}") from None
    body = lang.body_of(src.root.named_children[0]) if src.root.named_children else None
    members = [] if body is None else [n for n in body.named_children if n.type not in lang.COMMENT_TYPES]
    if len(members) != 1 or not lang.is_method(members[0], language):
        raise CandidateParseError("candidate must contain exactly one method declaration")


def apply_patch(
    file_text: str, method: MethodSpan, candidate: CandidatePatch | str, language: str = lang.JAVA
) -> str:
    """Replace ``method`` in ``file_text`` with the candidate method.

    Sentinel markers are stripped first; bytes outside the span are untouched.
    """
    text = candidate.text if isinstance(candidate, CandidatePatch) else candidate
    text = strip_markers(text).rstrip("\r\n")
    _check_method(text, language)
    return file_text[: method.start_offset] + text + file_text[method.end_offset :]


# -- validation --------------------------------------------------------------


def _junit_passes(worktree: Path, pattern: str) -> set[str]:
    passed = set()
    for path in sorted(glob.glob(str(worktree / pattern), recursive=True)):
        try:
            root = ET.parse(path).getroot()
        except ET.ParseError:
            continue
        for tc in root.iter("testcase"):
            if not any(c.tag in ("failure", "error", "skipped") for c in tc):
                passed.add(f"{tc.get('classname', '')}::{tc.get('name', '')}")
    return passed


@dataclass
class _Baseline:
    """Per-worktree facts about the unpatched code, computed once."""

    reports: dict[str, list[BugReport]] = field(default_factory=dict)
    test_passes: set[str] | None = None


class Validator:
    """Runs build, tests and analyzer against a patched worktree.

    Holds the worktree lock for the whole validation and restores the original
    file afterwards, so validations of different bugs are serialized.
    """

    def __init__(self, worktree: str | os.PathLike, config: Config, log_dir: str | os.PathLike | None = None):
        self.worktree = Path(worktree).resolve()
        self.config = config
        self.log_dir = Path(log_dir).resolve() if log_dir else Path(tempfile.mkdtemp(prefix="repairkit-validate-"))
        self.baseline = _Baseline()
        self._counter = 0
        self._mutex = threading.Lock()

    def _next_dir(self) -> Path:
        with self._mutex:
            self._counter += 1
            n = self._counter
        d = self.log_dir / f"attempt-{n:04d}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _analyze(self, files: Sequence[str], results: Path) -> list[BugReport]:
        capture(self.worktree, self.config.project.build, results, self.config.analyzer)
        return analyze(self.worktree, files, results, self.config.analyzer)

    def _run(self, cmd: list[str], log: Path) -> int:
        return _run_logged(expand_command(cmd, {"worktree": str(self.worktree)}), self.worktree, log,
                           self.config.analyzer.timeout)

    def _ensure_baseline(self, file: str, work: Path) -> None:
        if file not in self.baseline.reports:
            self.baseline.reports[file] = self._analyze([file], work / "pre-results")
        glob_pat = self.config.project.junit_glob
        if glob_pat and self.baseline.test_passes is None:
            self._run(self.config.project.test, work / "baseline-test.log")
            self.baseline.test_passes = _junit_passes(self.worktree, glob_pat)

    def validate(self, bug: BugReport, patched_file: str) -> ValidationResult:
        work = self._next_dir()
        path = self.worktree / bug.file
        with worktree_lock(self.worktree):
            original = path.read_bytes()
            self._ensure_baseline(bug.file, work)
            pre = [r for r in self.baseline.reports[bug.file] if r.file == bug.file]
            if bug.identity() not in {r.identity() for r in pre}:
                pre.append(bug)
            logs: dict[str, str] = {}
            try:
                path.write_text(patched_file, encoding="utf-8")
                logs["build"] = str(work / "build.log")
                if self._run(self.config.project.build, work / "build.log") != 0:
                    return ValidationResult(REJECTED_BUILD, logs)
                logs["test"] = str(work / "test.log")
                code = self._run(self.config.project.test, work / "test.log")
                glob_pat = self.config.project.junit_glob
                if glob_pat:
                    missing = (self.baseline.test_passes or set()) - _junit_passes(self.worktree, glob_pat)
                    if missing:
                        return ValidationResult(REJECTED_TEST, logs, detail=f"regressed: {', '.join(sorted(missing))}")
                elif code != 0:
                    return ValidationResult(REJECTED_TEST, logs, detail=f"test exit code {code}")
                logs["analyzer"] = str(work / "post-results")
                try:
                    post = self._analyze([bug.file], work / "post-results")
                except BuildError:
                    return ValidationResult(REJECTED_BUILD, logs, detail="build failed under analyzer capture")
                delta = diff_reports(pre, post)
                fixed = {r.identity() for r in delta.fixed}
                if bug.identity() in fixed and not delta.introduced:
                    return ValidationResult(VALIDATED, logs, delta)
                why = "target still reported" if bug.identity() not in fixed else f"{len(delta.introduced)} new finding(s)"
                return ValidationResult(REJECTED_STILL_BUGGY, logs, delta, detail=why)
            finally:
                path.write_bytes(original)


def validate_patch(
    worktree: str | os.PathLike, bug: BugReport, patched_file: str, config: Config | None = None
) -> ValidationResult:
    """Build, test and re-analyze ``worktree`` with ``bug.file`` replaced by ``patched_file``.

    Stages short-circuit on the first rejection. A missing tool raises
    ToolMissingError (an EnvironmentError) rather than producing a rejection.
    """
    return Validator(worktree, config or Config()).validate(bug, patched_file)


# -- outcome store -----------------------------------------------------------


class OutcomeWriter:
    """Serializes outcome lines from many workers through one writer thread."""

    _STOP = object()

    def __init__(self, path: str | os.PathLike | None):
        self.path = Path(path) if path else None
        self._q: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._drain, daemon=True)
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")
        self._thread.start()

    def _drain(self) -> None:
        while True:
            item = self._q.get()
            if item is self._STOP:
                return
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(item, sort_keys=True, ensure_ascii=False) + "\n")

    def write(self, obj: dict) -> None:
        self._q.put(obj)

    def close(self) -> None:
        self._q.put(self._STOP)
        self._thread.join()

    def __enter__(self) -> OutcomeWriter:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# -- fixing ------------------------------------------------------------------


@dataclass
class FixOutcome:
    bug: BugReport
    result: ValidationResult | None
    patch: CandidatePatch | None
    candidates: list[CandidatePatch] = field(default_factory=list)
    reason: str = ""
    file_text: str = ""
    patched_file: str = ""

    @property
    def validated(self) -> bool:
        return self.result is not None and self.result.validated

    def to_json(self) -> dict:
        return {
            "bug": self.bug.to_json(),
            "bug_key": str(self.bug.key()),
            "status": self.result.status if self.result else None,
            "reason": self.reason,
            "patch": self.patch.to_json() if self.patch else None,
            "candidates": [c.to_json() for c in self.candidates],
        }


def make_backend(config: Config) -> Backend:
    g = config.generator
    if g.backend == "mock":
        if g.mock_mode == "fixtures":
            if g.fixtures is None:
                raise RepairkitError("[generator] mock fixtures mode needs 'fixtures'")
            return MockBackend.from_file(g.fixtures)
        return MockBackend(mode=g.mock_mode)
    if g.backend == "http":
        return Limited(HttpBackend(url=g.endpoint, timeout=g.timeout, retries=g.retries), g.concurrency)
    raise RepairkitError(f"[generator] unknown backend {g.backend!r}")


def load_encoder(config: Config) -> EncoderParams:
    r = config.retriever
    if r.encoder is not None and Path(r.encoder).exists():
        return EncoderParams.load(r.encoder)
    return EncoderParams.initialize(r.dim, r.features, r.seed)


def load_store(config: Config, params: EncoderParams | None = None) -> RetrievalStore:
    params = params or load_encoder(config)
    idx = config.retriever.index
    if idx is not None and Path(idx).exists():
        return RetrievalStore.load(idx, params)
    logger.warning("no retrieval index configured; prompts will carry no hints")
    return RetrievalStore(params)


def build_prompt(
    bug: BugReport, file_text: str, config: Config, store: RetrievalStore
) -> tuple[MethodSpan, PromptBundle]:
    language = lang.language_for_path(bug.file)
    method = locate_buggy_method(file_text, bug.line, language)
    focal = resolve_focal_methods(bug.bug_trace, file_text, method, language, bug.file)
    context = extract_ewash_context(file_text, method, focal, language)
    line = method.method_line(bug.line)
    marked = insert_markers(method, (line, line))
    q, _ = obfuscate(method.body_text, language)
    hits = query(store, q, bug.bug_type, config.retriever.k, config.retriever.min_sim)
    logger.info("%s:%d: %d hint(s) at cosine >= %.2f", bug.file, bug.line, len(hits), config.retriever.min_sim)
    bundle = assemble_repair_prompt(
        [fix for fix, _ in hits], bug.bug_type, context, focal, marked, config.budget, file_text
    )
    return method, bundle


def fix_bug(
    bug: BugReport,
    worktree: Path,
    config: Config,
    backend: Backend,
    store: RetrievalStore,
    validator: Validator,
    writer: OutcomeWriter | None = None,
) -> FixOutcome:
    def emit(candidate: CandidatePatch | None, status: str | None, reason: str = "") -> None:
        if writer is not None:
            writer.write({
                "bug_key": str(bug.key()),
                "file": bug.file,
                "line": bug.line,
                "bug_type": bug.bug_type,
                "candidate_rank": candidate.rank if candidate else None,
                "candidate": candidate.text if candidate else None,
                "status": status,
                "reason": reason,
            })

    if bug.bug_type not in TARGET_BUG_TYPES:
        emit(None, None, UNSUPPORTED_BUG_TYPE)
        return FixOutcome(bug, None, None, reason=UNSUPPORTED_BUG_TYPE)
    file_text = (worktree / bug.file).read_text(encoding="utf-8")
    language = lang.language_for_path(bug.file)
    method, bundle = build_prompt(bug, file_text, config, store)
    candidates = rank_candidates(generate_candidates(backend, bundle, config.generator.sampling))
    limit = config.pipeline.max_candidates
    last: ValidationResult | None = None
    for cand in candidates[:limit] if limit else candidates:
        try:
            patched = apply_patch(file_text, method, cand, language)
        except CandidateParseError as e:
            logger.info("candidate %s skipped: %s", cand.rank, e)
            emit(cand, None, "candidate_parse_error")
            continue
        last = validator.validate(bug, patched)
        emit(cand, last.status, last.detail)
        if last.validated:
            return FixOutcome(bug, last, cand, candidates, file_text=file_text, patched_file=patched)
    reason = "no_candidates" if not candidates else "no_validated_candidate"
    return FixOutcome(bug, last, None, candidates, reason=reason, file_text=file_text)


def run_fix(
    repo: str | os.PathLike,
    report_path: str | os.PathLike | None,
    config: Config | None = None,
    *,
    backend: Backend | None = None,
    store: RetrievalStore | None = None,
    outcomes_path: str | os.PathLike | None = None,
    log_dir: str | os.PathLike | None = None,
) -> list[FixOutcome]:
    """Attempt a validated fix for every bug in the report.

    Without ``report_path`` the analyzer is run over all source files first.
    Per-bug failures are recorded on the outcome and do not stop the run;
    missing tools propagate as EnvironmentError.
    """
    config = config or Config()
    worktree = Path(repo).resolve()
    if report_path is None:
        bugs = analyze_worktree(worktree, config)
    else:
        bugs = load_report(report_path)
    backend = backend or make_backend(config)
    store = store if store is not None else load_store(config)
    validator = Validator(worktree, config, log_dir)

    with OutcomeWriter(outcomes_path) as writer:
        def one(bug: BugReport) -> FixOutcome:
            try:
                return fix_bug(bug, worktree, config, backend, store, validator, writer)
            except EnvironmentError:
                raise
            except (RepairkitError, ValueError, OSError) as e:
                logger.warning("%s:%d: %s", bug.file, bug.line, e)
                writer.write({"bug_key": str(bug.key()), "file": bug.file, "line": bug.line,
                              "bug_type": bug.bug_type, "candidate_rank": None, "candidate": None,
                              "status": None, "reason": f"error: {type(e).__name__}: {e}"})
                return FixOutcome(bug, None, None, reason=f"error: {type(e).__name__}: {e}")

        with ThreadPoolExecutor(max_workers=max(1, config.pipeline.workers)) as pool:
            outcomes = list(pool.map(one, bugs))
    return outcomes


def source_files(worktree: Path, extensions: Iterable[str]) -> list[str]:
    exts = tuple(extensions)
    out = []
    for p in sorted(worktree.rglob("*")):
        rel = p.relative_to(worktree)
        if p.is_file() and p.suffix in exts and not any(part.startswith(".") for part in rel.parts):
            out.append(rel.as_posix())
    return out


def analyze_worktree(worktree: str | os.PathLike, config: Config, results_dir: str | os.PathLike | None = None) -> list[BugReport]:
    wt = Path(worktree).resolve()
    results = Path(results_dir) if results_dir else Path(tempfile.mkdtemp(prefix="repairkit-infer-"))
    with worktree_lock(wt):
        capture(wt, config.project.build, results, config.analyzer)
        return analyze(wt, source_files(wt, config.project.extensions), results, config.analyzer)


def exit_code(outcomes: Sequence[FixOutcome]) -> int:
    handled = all(o.validated or o.reason == UNSUPPORTED_BUG_TYPE for o in outcomes)
    return EXIT_OK if handled else EXIT_UNFIXED


# -- evaluation --------------------------------------------------------------


def token_match(candidate: str, truth: str) -> bool:
    """Equality of token sequences, ignoring whitespace between tokens."""
    return tokenize(candidate) == tokenize(truth)


@dataclass
class EvalRecord:
    record_id: str
    candidates: list[str]
    truth: str
    first_match_rank: int | None = None
    first_raw_match_rank: int | None = None

    @classmethod
    def build(cls, record_id: str, candidates: Sequence[str], truth: str) -> EvalRecord:
        tok = next((i for i, c in enumerate(candidates, 1) if token_match(c, truth)), None)
        raw = next((i for i, c in enumerate(candidates, 1) if c == truth), None)
        return cls(record_id, list(candidates), truth, tok, raw)

    def __post_init__(self) -> None:
        if self.first_match_rank is not None and not 1 <= self.first_match_rank <= len(self.candidates):
            raise ValueError("first_match_rank must index into candidates")


def evaluate_topk(records: Sequence[EvalRecord], k: int, raw: bool = False) -> float:
    """Fraction of records whose first match is within the top ``k`` candidates."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not records:
        return 0.0
    hits = 0
    for r in records:
        rank = r.first_raw_match_rank if raw else r.first_match_rank
        hits += rank is not None and rank <= k
    return hits / len(records)


# -- pull-request payload ----------------------------------------------------


def unified_diff(before: str, after: str, path: str) -> str:
    return "".join(
        difflib.unified_diff(
            before.splitlines(keepends=True), after.splitlines(keepends=True), f"a/{path}", f"b/{path}"
        )
    )


def emit_pr_comment(bug: BugReport, result: ValidationResult, patch: str) -> dict:
    """Review-comment payload for a validated fix; ``patch`` is a unified diff."""
    if not result.validated:
        raise ContractError(f"only validated fixes can be surfaced, got {result.status}")
    title = f"Fix {bug.bug_type} in {bug.method_name or bug.procedure} ({bug.file}:{bug.line})"
    body = "\n".join([
        f"**{bug.bug_type}** reported at `{bug.file}:{bug.line}` in `{bug.procedure}`.",
        "",
        f"> {bug.qualifier}",
        "",
        "Proposed change:",
        "",
        "```diff",
        patch.rstrip("\n"),
        "```",
        "",
        "Validation: build passed, tests passed, the analyzer no longer reports this issue"
        " and reports no new ones.",
    ])
    delta = result.analyzer_delta or ReportDiff()
    return {
        "title": title,
        "body_markdown": body + "\n",
        "diff": patch,
        "bug": {"bug_type": bug.bug_type, "file": bug.file, "line": bug.line,
                "procedure": bug.procedure, "qualifier": bug.qualifier},
        "validation": {"status": result.status, "fixed": len(delta.fixed),
                       "introduced": len(delta.introduced), "preexisting": len(delta.preexisting)},
    }


def dumps_payload(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
