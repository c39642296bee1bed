"""Analyzer reports: parsing, identity, set differences, and tool invocation."""

from __future__ import annotations

import contextlib
import fcntl
import hashlib
import json
import logging
import os
import re
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Iterator, Sequence

from .errors import (
    AnalyzerError,
    AnalyzerTimeout,
    BuildError,
    ReportParseError,
    ReportSchemaError,
    ToolMissingError,
)

logger = logging.getLogger(__name__)

NULL_DEREFERENCE = "NULL_DEREFERENCE"
RESOURCE_LEAK = "RESOURCE_LEAK"
THREAD_SAFETY_VIOLATION = "THREAD_SAFETY_VIOLATION"
TARGET_BUG_TYPES = (NULL_DEREFERENCE, RESOURCE_LEAK, THREAD_SAFETY_VIOLATION)

_REQUIRED = ("bug_type", "qualifier", "file", "line", "procedure")
_TRACE_PROCEDURE = re.compile(
    r"(?:start of procedure|return from a call to|Skipping|call to)\s+`?([\w$.<>]+)\s*\("
)


@dataclass(frozen=True)
class TraceStep:
    file: str
    line: int
    procedure: str
    description: str


@dataclass(frozen=True)
class BugReport:
    bug_type: str
    file: str
    line: int
    procedure: str
    qualifier: str
    bug_trace: tuple[TraceStep, ...] = ()
    raw_hash: str | None = None

    def __post_init__(self) -> None:
        if self.line < 1:
            raise ValueError(f"line must be >= 1, got {self.line}")
        if not self.file:
            raise ValueError("file must be non-empty")
        if not isinstance(self.bug_trace, tuple):
            object.__setattr__(self, "bug_trace", tuple(self.bug_trace))

    @property
    def method_name(self) -> str:
        return simple_method_name(self.procedure)

    def key(self) -> BugKey:
        return BugKey.of(self)

    def identity(self) -> Hashable:
        """Identity used for report diffing; the analyzer's own hash wins when present."""
        if self.raw_hash:
            return ("hash", self.raw_hash)
        return self.key()

    def to_json(self) -> dict:
        obj: dict = {
            "bug_type": self.bug_type,
            "qualifier": self.qualifier,
            "file": self.file,
            "line": self.line,
            "procedure": self.procedure,
            "bug_trace": [
                {
                    "level": 0,
                    "filename": s.file,
                    "line_number": s.line,
                    "description": s.description,
                    "procedure": s.procedure,
                }
                for s in self.bug_trace
            ],
        }
        if self.raw_hash is not None:
            obj["hash"] = self.raw_hash
        return obj


def simple_method_name(procedure: str) -> str:
    """``com.acme.Foo.bar(java.lang.String):void`` -> ``bar``."""
    head = procedure.split("(", 1)[0]
    head = re.split(r"[.:]", head)[-1] if head else head
    return head.strip()


def normalize_qualifier(qualifier: str) -> str:
    # backtick-quoted names and numbers move between commits; drop them
    q = re.sub(r"`[^`]*`", "`_`", qualifier)
    q = re.sub(r"\d+", "#", q)
    return " ".join(q.split())


@dataclass(frozen=True, order=True)
class BugKey:
    bug_type: str
    file: str
    procedure: str
    normalized_qualifier: str

    @classmethod
    def of(cls, report: BugReport) -> BugKey:
        return cls(
            report.bug_type,
            report.file,
            report.procedure,
            normalize_qualifier(report.qualifier),
        )

    def __str__(self) -> str:
        return f"{self.bug_type}:{self.file}:{self.procedure}:{self.normalized_qualifier}"


@dataclass(frozen=True)
class ReportDiff:
    """Findings classified by a two-report comparison; each tuple is in report order."""

    introduced: tuple[BugReport, ...] = ()
    fixed: tuple[BugReport, ...] = ()
    preexisting: tuple[BugReport, ...] = ()

    def to_json(self) -> dict:
        return {
            "introduced": [b.to_json() for b in self.introduced],
            "fixed": [b.to_json() for b in self.fixed],
            "preexisting": [b.to_json() for b in self.preexisting],
        }


# -- parsing ----------------------------------------------------------------


def parse_report(document: bytes | str) -> list[BugReport]:
    """Parse an Infer ``report.json`` document into BugReports, preserving order."""
    if isinstance(document, bytes):
        try:
            text = document.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ReportParseError("invalid UTF-8", e.start) from None
    else:
        text = document
    try:
        items = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise ReportParseError(e.msg, offset) from None
    if not isinstance(items, list):
        raise ReportParseError("report is not a JSON array", len(text) - len(text.lstrip()))
    return [_finding(item, i) for i, item in enumerate(items)]


def _finding(item: object, index: int) -> BugReport:
    if not isinstance(item, dict):
        raise ReportSchemaError("<object>", index, "expected an object, not")
    for name in _REQUIRED:
        if name not in item:
            raise ReportSchemaError(name, index)
    line = item["line"]
    if not isinstance(line, int) or isinstance(line, bool) or line < 1:
        raise ReportSchemaError("line", index, "invalid value for")
    if not isinstance(item["file"], str) or not item["file"]:
        raise ReportSchemaError("file", index, "invalid value for")
    trace = item.get("bug_trace") or []
    if not isinstance(trace, list):
        raise ReportSchemaError("bug_trace", index, "invalid value for")
    steps = []
    for j, step in enumerate(trace):
        if not isinstance(step, dict):
            raise ReportSchemaError(f"bug_trace[{j}]", index, "invalid value for")
        description = str(step.get("description", ""))
        procedure = step.get("procedure")
        if procedure is None:
            m = _TRACE_PROCEDURE.search(description)
            procedure = m.group(1) if m else ""
        steps.append(
            TraceStep(
                file=str(step.get("filename", item["file"])),
                line=int(step.get("line_number", 0)),
                procedure=str(procedure),
                description=description,
            )
        )
    raw_hash = item.get("hash")
    return BugReport(
        bug_type=str(item["bug_type"]),
        file=item["file"],
        line=line,
        procedure=str(item["procedure"]),
        qualifier=str(item["qualifier"]),
        bug_trace=tuple(steps),
        raw_hash=str(raw_hash) if raw_hash is not None else None,
    )


def serialize_report(reports: Iterable[BugReport]) -> bytes:
    return json.dumps([r.to_json() for r in reports], indent=2, ensure_ascii=False).encode("utf-8")


def load_report(path: str | os.PathLike) -> list[BugReport]:
    return parse_report(Path(path).read_bytes())


# -- diffing ----------------------------------------------------------------


def _distinct(reports: Iterable[BugReport]) -> dict[Hashable, BugReport]:
    out: dict[Hashable, BugReport] = {}
    for r in reports:
        out.setdefault(r.identity(), r)
    return out


def diff_reports(prev: Iterable[BugReport], curr: Iterable[BugReport]) -> ReportDiff:
    """Classify findings as introduced (curr only), fixed (prev only), or preexisting (both).

    Identity ignores line numbers, so a finding that only moved is preexisting.
    Preexisting findings are reported as they appear in ``curr``.
    """
    before = _distinct(prev)
    after = _distinct(curr)
    return ReportDiff(
        introduced=tuple(r for k, r in after.items() if k not in before),
        fixed=tuple(r for k, r in before.items() if k not in after),
        preexisting=tuple(r for k, r in after.items() if k in before),
    )


# -- invoking the analyzer --------------------------------------------------


@dataclass
class AnalyzerConfig:
    """Command templates for the external analyzer.

    Placeholders: ``{results_dir}``, ``{index_file}``, ``{worktree}``, ``{python}``;
    an argument that is exactly ``{build_cmd}`` expands to the build command list.
    """

    capture: list[str] = field(
        default_factory=lambda: ["infer", "capture", "--results-dir", "{results_dir}", "--", "{build_cmd}"]
    )
    analyze: list[str] = field(
        default_factory=lambda: [
            "infer", "analyze", "--results-dir", "{results_dir}",
            "--changed-files-index", "{index_file}",
        ]
    )
    report: str = "{results_dir}/report.json"
    timeout: float = 1800.0

    @classmethod
    def stub(cls, timeout: float = 1800.0) -> AnalyzerConfig:
        """Configuration for the bundled pattern-based stand-in analyzer."""
        base = ["{python}", "-m", "repairkit.stubs.infer"]
        return cls(
            capture=base + ["capture", "--results-dir", "{results_dir}", "--", "{build_cmd}"],
            analyze=base + ["analyze", "--results-dir", "{results_dir}", "--changed-files-index", "{index_file}"],
            timeout=timeout,
        )


def expand_command(template: Sequence[str], values: dict[str, str], build_cmd: Sequence[str] = ()) -> list[str]:
    out: list[str] = []
    values = {"python": sys.executable, **values}
    for arg in template:
        if arg == "{build_cmd}":
            out.extend(expand_command(build_cmd, values))
            continue
        for name, value in values.items():
            arg = arg.replace("{" + name + "}", value)
        out.append(arg)
    return out


@contextlib.contextmanager
def worktree_lock(worktree: str | os.PathLike) -> Iterator[None]:
    """Exclusive lock per worktree directory, across threads and processes."""
    digest = hashlib.sha256(str(Path(worktree).resolve()).encode()).hexdigest()[:16]
    lock_dir = Path(tempfile.gettempdir()) / "repairkit-locks"
    lock_dir.mkdir(exist_ok=True)
    with open(lock_dir / f"{digest}.lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def _run_logged(cmd: list[str], cwd: Path, log_path: Path, timeout: float) -> int:
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "a", encoding="utf-8") as log:
        log.write(f"$ {' '.join(cmd)}\n")
        log.flush()
        try:
            proc = subprocess.run(cmd, cwd=cwd, stdout=log, stderr=subprocess.STDOUT, timeout=timeout)
        except FileNotFoundError as e:
            raise ToolMissingError(f"cannot execute {cmd[0]!r}: {e.strerror}") from None
        except subprocess.TimeoutExpired:
            raise AnalyzerTimeout(timeout) from None
    return proc.returncode


def capture(
    worktree: str | os.PathLike,
    build_cmd: Sequence[str],
    results_dir: str | os.PathLike,
    config: AnalyzerConfig | None = None,
) -> None:
    """Build ``worktree`` under the analyzer's compiler interception."""
    config = config or AnalyzerConfig()
    results = Path(results_dir)
    results.mkdir(parents=True, exist_ok=True)
    cmd = expand_command(config.capture, _values(worktree, results), build_cmd)
    log = results / "capture.log"
    code = _run_logged(cmd, Path(worktree), log, config.timeout)
    if code != 0:
        raise BuildError(code, str(log))


def analyze(
    worktree: str | os.PathLike,
    files: Sequence[str],
    results_dir: str | os.PathLike,
    config: AnalyzerConfig | None = None,
) -> list[BugReport]:
    """Analyze previously captured sources, restricted to ``files``."""
    config = config or AnalyzerConfig()
    results = Path(results_dir)
    index_file = results / "changed_files.txt"
    index_file.write_text("".join(f"{f}\n" for f in files), encoding="utf-8")
    values = _values(worktree, results) | {"index_file": str(index_file.resolve())}
    report_path = Path(expand_command([config.report], values)[0])
    report_path.unlink(missing_ok=True)
    log = results / "analyze.log"
    code = _run_logged(expand_command(config.analyze, values), Path(worktree), log, config.timeout)
    if code != 0:
        raise AnalyzerError(f"analysis failed with exit code {code} (log: {log})")
    if not report_path.exists():
        raise AnalyzerError(f"analyzer produced no report at {report_path} (log: {log})")
    return load_report(report_path)


def _values(worktree: str | os.PathLike, results: Path) -> dict[str, str]:
    return {"results_dir": str(results.resolve()), "worktree": str(Path(worktree).resolve())}


def run_analyzer(
    worktree: str | os.PathLike,
    files: Sequence[str],
    build_cmd: Sequence[str],
    config: AnalyzerConfig | None = None,
    results_dir: str | os.PathLike | None = None,
) -> list[BugReport]:
    """Capture a build of ``worktree`` and analyze ``files``.

    Raises BuildError when the build fails, ToolMissingError when the analyzer
    cannot be started and AnalyzerTimeout past ``config.timeout`` seconds.
    """
    with worktree_lock(worktree):
        if results_dir is None:
            results_dir = tempfile.mkdtemp(prefix="repairkit-infer-")
        capture(worktree, build_cmd, results_dir, config)
        reports = analyze(worktree, files, results_dir, config)
    logger.info("analyzer found %d issue(s) in %d file(s)", len(reports), len(files))
    return reports
