"""Mine bug-fix records from a repository's commit history.

Adjacent commits on the first-parent line are analyzed on both sides of each
change; findings that disappear become ``fixed`` records carrying the method
before and after the change. The analyzer capture of ``curr`` is reused as the
``prev`` side of the following pair, so each commit is built at most once.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shutil
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from . import languages as lang
from .analyzer import (
    TARGET_BUG_TYPES,
    AnalyzerConfig,
    BugReport,
    TraceStep,
    analyze,
    capture,
    diff_reports,
    simple_method_name,
    worktree_lock,
)
from .context import MethodSpan, diff_hunks, list_methods, locate_buggy_method, locate_method_heuristic
from .errors import BuildError, NoEnclosingMethod, ParseError, RefError, RepairkitError
from .promptgen import tokenize

logger = logging.getLogger(__name__)

INTRODUCED = "introduced"
FIXED = "fixed"
PREEXISTING = "preexisting"
_STATUS_ORDER = {FIXED: 0, INTRODUCED: 1, PREEXISTING: 2}

MAX_EDITED_LINES = 8
MAX_EDIT_DISTANCE = 4


class SkipReason:
    BUILD_FAILURE = "build_failure"
    ANALYZER_FAILURE = "analyzer_failure"
    NO_ENCLOSING_METHOD = "no_enclosing_method"
    METHOD_REMOVED = "method_removed"
    FIX_OUTSIDE_METHOD = "fix_outside_method"


class RejectReason:
    EMPTY_METHOD_DIFF = "empty_method_diff"
    EDIT_TOO_LARGE = "edit_too_large"
    EDIT_NOT_LOCAL = "edit_not_local"


@dataclass(frozen=True)
class CommitPair:
    prev: str
    curr: str
    changed_files: tuple[str, ...]

    def to_json(self) -> dict:
        return {"prev": self.prev, "curr": self.curr, "changed_files": list(self.changed_files)}


@dataclass(frozen=True)
class DatasetRecord:
    """One classified finding, tied to the commit pair that exposed it.

    ``buggy_method_text`` is taken from ``prev`` for fixed findings and from
    ``curr`` otherwise; ``method_start_line`` is its first file line, so
    ``line - method_start_line + 1`` is the bug line inside the method.
    """

    bug_type: str
    status: str
    file: str
    method_name: str
    buggy_method_text: str
    fixed_method_text: str | None
    line: int
    commit_pair: CommitPair
    repo_id: str
    bug_trace: tuple[TraceStep, ...] = ()
    qualifier: str = ""
    procedure: str = ""
    method_start_line: int = 1

    def __post_init__(self) -> None:
        if self.status not in _STATUS_ORDER:
            raise ValueError(f"unknown status {self.status!r}")
        if (self.fixed_method_text is not None) != (self.status == FIXED):
            raise ValueError("fixed_method_text must be present exactly for fixed records")

    @property
    def language(self) -> str:
        return lang.language_for_path(self.file)

    @property
    def method_bug_line(self) -> int:
        return self.line - self.method_start_line + 1

    def to_json(self) -> dict:
        return {
            "bug_type": self.bug_type,
            "status": self.status,
            "file": self.file,
            "method_name": self.method_name,
            "buggy_method_text": self.buggy_method_text,
            "fixed_method_text": self.fixed_method_text,
            "line": self.line,
            "method_start_line": self.method_start_line,
            "commit_pair": self.commit_pair.to_json(),
            "repo_id": self.repo_id,
            "qualifier": self.qualifier,
            "procedure": self.procedure,
            "bug_trace": [asdict(s) for s in self.bug_trace],
        }

    @classmethod
    def from_json(cls, data: dict) -> DatasetRecord:
        pair = data["commit_pair"]
        return cls(
            bug_type=data["bug_type"],
            status=data["status"],
            file=data["file"],
            method_name=data["method_name"],
            buggy_method_text=data["buggy_method_text"],
            fixed_method_text=data.get("fixed_method_text"),
            line=data["line"],
            commit_pair=CommitPair(pair["prev"], pair["curr"], tuple(pair["changed_files"])),
            repo_id=data["repo_id"],
            bug_trace=tuple(TraceStep(**s) for s in data.get("bug_trace", [])),
            qualifier=data.get("qualifier", ""),
            procedure=data.get("procedure", ""),
            method_start_line=data.get("method_start_line", 1),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @property
    def record_id(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()[:12]

    def to_bug_report(self) -> BugReport:
        return BugReport(
            bug_type=self.bug_type,
            file=self.file,
            line=self.line,
            procedure=self.procedure or self.method_name,
            qualifier=self.qualifier,
            bug_trace=self.bug_trace,
        )


def load_record(path: str | os.PathLike) -> DatasetRecord:
    return DatasetRecord.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def load_dataset(root: str | os.PathLike) -> list[DatasetRecord]:
    return [load_record(p) for p in sorted(Path(root).rglob("record.json"))]


# -- git ---------------------------------------------------------------------


def _git(repo: str | os.PathLike, *args: str) -> str:
    proc = subprocess.run(["git", "-C", str(repo), *args], capture_output=True, text=True)
    if proc.returncode != 0:
        raise RepairkitError(f"git {' '.join(args)} failed: {proc.stderr.strip()}")
    return proc.stdout


def resolve_ref(repo: str | os.PathLike, ref: str) -> str:
    try:
        return _git(repo, "rev-parse", "--verify", "--quiet", f"{ref}^{{commit}}").strip()
    except RepairkitError:
        raise RefError(f"cannot resolve {ref!r} in {repo}") from None


def enumerate_commit_pairs(
    repo: str | os.PathLike,
    branch: str = "HEAD",
    extensions: Iterable[str] = tuple(lang.EXTENSIONS),
) -> Iterator[CommitPair]:
    """Adjacent first-parent commits, oldest first, that touch source files."""
    head = resolve_ref(repo, branch)
    exts = tuple(extensions)
    commits = _git(repo, "rev-list", "--first-parent", "--reverse", head).split()
    for prev, curr in zip(commits, commits[1:]):
        names = _git(repo, "diff", "--name-only", "--no-renames", prev, curr).splitlines()
        changed = tuple(sorted(n for n in names if n.endswith(exts)))
        if changed:
            yield CommitPair(prev, curr, changed)


def file_at(repo: str | os.PathLike, commit: str, path: str) -> str | None:
    proc = subprocess.run(["git", "-C", str(repo), "show", f"{commit}:{path}"], capture_output=True)
    if proc.returncode != 0:
        return None
    return proc.stdout.decode("utf-8")


# -- filtering and statistics ------------------------------------------------


@dataclass(frozen=True)
class FilterResult:
    keep: bool
    reason: str | None = None


def edited_lines(buggy: str, fixed: str) -> int:
    """Edited line count: each hunk counts its larger side."""
    return sum(max(i2 - i1, j2 - j1) for _, i1, i2, j1, j2 in diff_hunks(buggy, fixed))


def _hunk_distance(i1: int, i2: int, line: int) -> int:
    # hunk covers buggy lines i1+1..i2; an insertion sits between i1 and i1+1
    lo, hi = (i1, i1 + 1) if i1 == i2 else (i1 + 1, i2)
    if lo <= line <= hi:
        return 0
    return lo - line if line < lo else line - hi


def filter_record(record: DatasetRecord) -> FilterResult:
    """Keep small fixes made close to the reported line inside the method."""
    if record.status != FIXED or record.fixed_method_text is None:
        raise ValueError("filter_record applies to fixed records only")
    hunks = diff_hunks(record.buggy_method_text, record.fixed_method_text)
    if not hunks:
        return FilterResult(False, RejectReason.EMPTY_METHOD_DIFF)
    if sum(max(i2 - i1, j2 - j1) for _, i1, i2, j1, j2 in hunks) > MAX_EDITED_LINES:
        return FilterResult(False, RejectReason.EDIT_TOO_LARGE)
    line = record.method_bug_line
    if any(_hunk_distance(i1, i2, line) > MAX_EDIT_DISTANCE for _, i1, i2, _, _ in hunks):
        return FilterResult(False, RejectReason.EDIT_NOT_LOCAL)
    return FilterResult(True)


def patch_size(buggy: str, fixed: str) -> tuple[int, int]:
    """(changed lines, changed characters) of the two-way line diff.

    Deleted and inserted lines both count; characters exclude line breaks.
    """
    a, b = buggy.splitlines(), fixed.splitlines()
    lines = chars = 0
    for _, i1, i2, j1, j2 in diff_hunks(buggy, fixed):
        for ln in a[i1:i2] + b[j1:j2]:
            lines += 1
            chars += len(ln)
    return lines, chars


@dataclass(frozen=True)
class StatsCell:
    num_patches: int = 0
    mean_lines_per_patch: float | None = None
    mean_chars_per_patch: float | None = None


SHORT_TYPE = {"NULL_DEREFERENCE": "NPD", "RESOURCE_LEAK": "RL", "THREAD_SAFETY_VIOLATION": "TSV"}
EMPTY = "—"


@dataclass
class StatsTable:
    cells: dict[tuple[str, str], StatsCell] = field(default_factory=dict)

    def cell(self, bug_type: str, language: str) -> StatsCell:
        return self.cells.get((bug_type, language), StatsCell())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bug_type", "language", "num_patches", "mean_lines", "mean_chars"])
        for bt in TARGET_BUG_TYPES:
            for lg in lang.EXTENSIONS.values():
                c = self.cell(bt, lg)
                w.writerow([bt, lang.display_name(lg), c.num_patches, _fmt(c.mean_lines_per_patch), _fmt(c.mean_chars_per_patch)])
        return buf.getvalue()

    def render(self) -> str:
        """Rows Num / MeanLines / MeanChars, one column per bug type and language."""
        cols = [(bt, lg) for bt in TARGET_BUG_TYPES for lg in lang.EXTENSIONS.values()]
        header = [""] + [f"{SHORT_TYPE[bt]} {lang.display_name(lg)}" for bt, lg in cols]
        rows = [
            ["Num"] + [str(self.cell(*c).num_patches) for c in cols],
            ["MeanLines"] + [_fmt(self.cell(*c).mean_lines_per_patch) for c in cols],
            ["MeanChars"] + [_fmt(self.cell(*c).mean_chars_per_patch) for c in cols],
        ]
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in [header, *rows]) + "\n"


def _fmt(v: float | None) -> str:
    return EMPTY if v is None else f"{v:.1f}"


def compute_stats(records: Iterable[DatasetRecord]) -> StatsTable:
    sizes: dict[tuple[str, str], list[tuple[int, int]]] = {}
    for r in records:
        if r.status != FIXED or r.fixed_method_text is None:
            continue
        sizes.setdefault((r.bug_type, r.language), []).append(patch_size(r.buggy_method_text, r.fixed_method_text))
    table = StatsTable()
    for key, vals in sizes.items():
        n = len(vals)
        table.cells[key] = StatsCell(n, sum(v[0] for v in vals) / n, sum(v[1] for v in vals) / n)
    return table


# -- mining ------------------------------------------------------------------


@dataclass
class MinerConfig:
    build_cmd: list[str] = field(default_factory=lambda: ["{python}", "-m", "repairkit.stubs.build"])
    analyzer: AnalyzerConfig = field(default_factory=AnalyzerConfig.stub)
    extensions: tuple[str, ...] = tuple(lang.EXTENSIONS)
    bug_types: tuple[str, ...] = TARGET_BUG_TYPES


def _sort_key(r: DatasetRecord) -> tuple:
    return (_STATUS_ORDER[r.status], r.file, r.line, r.bug_type, r.qualifier, r.procedure)


def _find_method(text: str, line: int, language: str) -> MethodSpan:
    try:
        return locate_buggy_method(text, line, language)
    except ParseError:
        return locate_method_heuristic(text, line)


def _counterpart(old: MethodSpan, new_text: str, language: str) -> MethodSpan | None:
    """The method in ``new_text`` corresponding to ``old`` (same name and class)."""
    try:
        spans = list_methods(new_text, language)
    except ParseError:
        return None
    same = [s for s in spans if s.name == old.name and s.enclosing_class_name == old.enclosing_class_name]
    if not same:
        return None
    exact = [s for s in same if s.signature_text == old.signature_text]
    pool = exact or same
    return min(pool, key=lambda s: abs(s.start_line - old.start_line))


class Miner:
    """Mines one repository. Pairs are processed sequentially to reuse captures."""

    def __init__(self, repo: str | os.PathLike, config: MinerConfig | None = None, repo_id: str | None = None):
        self.repo = Path(repo).resolve()
        self.config = config or MinerConfig()
        self.repo_id = repo_id or self.repo.name
        self.capture_count = 0
        self.skips: list[tuple[CommitPair, str, str]] = []
        self._scratch: Path | None = None
        self._worktree: Path | None = None
        self._cached: tuple[str, Path] | None = None

    # worktree management
    def __enter__(self) -> Miner:
        self._scratch = Path(tempfile.mkdtemp(prefix="repairkit-mine-"))
        self._worktree = self._scratch / "worktree"
        _git(self.repo, "worktree", "add", "--detach", "--quiet", str(self._worktree), "HEAD")
        return self

    def __exit__(self, *exc) -> None:
        if self._worktree is not None:
            try:
                _git(self.repo, "worktree", "remove", "--force", str(self._worktree))
            except RepairkitError:
                logger.warning("could not remove worktree %s", self._worktree)
        if self._scratch is not None:
            shutil.rmtree(self._scratch, ignore_errors=True)
        self._scratch = self._worktree = self._cached = None

    def _results_for(self, sha: str) -> Path:
        """Captured results for ``sha``, building only when not cached."""
        assert self._worktree is not None and self._scratch is not None
        if self._cached is not None and self._cached[0] == sha:
            return self._cached[1]
        _git(self._worktree, "checkout", "--detach", "--force", "--quiet", sha)
        _git(self._worktree, "clean", "-fdxq")
        results = self._scratch / f"results-{sha[:12]}"
        self.capture_count += 1
        with worktree_lock(self._worktree):
            capture(self._worktree, self.config.build_cmd, results, self.config.analyzer)
        return results

    def _keep(self, sha: str, results: Path) -> None:
        if self._cached is not None and self._cached[1] != results:
            shutil.rmtree(self._cached[1], ignore_errors=True)
        self._cached = (sha, results)

    def _analyze(self, results: Path, files: Sequence[str]) -> list[BugReport]:
        assert self._worktree is not None
        with worktree_lock(self._worktree):
            reports = analyze(self._worktree, files, results, self.config.analyzer)
        return [r for r in reports if r.bug_type in self.config.bug_types]

    def mine_commit_pair(self, pair: CommitPair) -> list[DatasetRecord]:
        """Classify the findings of one pair into dataset records."""
        if self._worktree is None:
            with self:
                return self.mine_commit_pair(pair)
        try:
            prev_results = self._results_for(pair.prev)
            self._keep(pair.prev, prev_results)
            prev = self._analyze(prev_results, pair.changed_files)
            curr_results = self._results_for(pair.curr)
            self._keep(pair.curr, curr_results)
            curr = self._analyze(curr_results, pair.changed_files)
        except BuildError as e:
            self._skip(pair, SkipReason.BUILD_FAILURE, str(e))
            return []
        except RepairkitError as e:
            self._skip(pair, SkipReason.ANALYZER_FAILURE, str(e))
            return []
        delta = diff_reports(prev, curr)
        records: list[DatasetRecord] = []
        for status, bugs, side in ((FIXED, delta.fixed, pair.prev), (INTRODUCED, delta.introduced, pair.curr),
                                   (PREEXISTING, delta.preexisting, pair.curr)):
            for bug in bugs:
                rec = self._materialize(pair, bug, status, side)
                if rec is not None:
                    records.append(rec)
        return sorted(records, key=_sort_key)

    def _skip(self, pair: CommitPair, reason: str, detail: str) -> None:
        logger.warning("skipping %s..%s: %s (%s)", pair.prev[:8], pair.curr[:8], reason, detail)
        self.skips.append((pair, reason, detail))

    def _materialize(self, pair: CommitPair, bug: BugReport, status: str, side: str) -> DatasetRecord | None:
        text = file_at(self.repo, side, bug.file)
        if text is None:
            self._skip(pair, SkipReason.NO_ENCLOSING_METHOD, f"{bug.file} missing at {side[:8]}")
            return None
        language = lang.language_for_path(bug.file)
        try:
            method = _find_method(text, bug.line, language)
        except NoEnclosingMethod as e:
            self._skip(pair, SkipReason.NO_ENCLOSING_METHOD, f"{bug.file}:{bug.line}: {e}")
            return None
        fixed_text = None
        if status == FIXED:
            after = file_at(self.repo, pair.curr, bug.file)
            other = _counterpart(method, after, language) if after is not None else None
            if other is None:
                self._skip(pair, SkipReason.METHOD_REMOVED, f"{bug.file}:{method.name}")
                return None
            if tokenize(other.body_text) == tokenize(method.body_text):
                self._skip(pair, SkipReason.FIX_OUTSIDE_METHOD, f"{bug.file}:{method.name}")
                return None
            fixed_text = other.body_text
        return DatasetRecord(
            bug_type=bug.bug_type,
            status=status,
            file=bug.file,
            method_name=method.name or simple_method_name(bug.procedure),
            buggy_method_text=method.body_text,
            fixed_method_text=fixed_text,
            line=bug.line,
            commit_pair=pair,
            repo_id=self.repo_id,
            bug_trace=bug.bug_trace,
            qualifier=bug.qualifier,
            procedure=bug.procedure,
            method_start_line=method.start_line,
        )

    def mine(self, branch: str = "HEAD") -> list[DatasetRecord]:
        pairs = list(enumerate_commit_pairs(self.repo, branch, self.config.extensions))
        records: list[DatasetRecord] = []
        with self:
            for pair in pairs:
                records.extend(self.mine_commit_pair(pair))
        logger.info(
            "%s: %d pair(s), %d record(s), %d capture(s), %d skip(s)",
            self.repo_id, len(pairs), len(records), self.capture_count, len(self.skips),
        )
        return records


def record_path(root: str | os.PathLike, record: DatasetRecord) -> Path:
    return Path(root) / record.repo_id / record.bug_type / record.commit_pair.curr / record.record_id / "record.json"


def write_dataset(
    records: Iterable[DatasetRecord], out_dir: str | os.PathLike, all_statuses: bool = False
) -> dict[str, int]:
    """Write records and ``stats.csv``; returns counts of kept and rejected records.

    By default only fixed records passing ``filter_record`` are written.
    """
    out = Path(out_dir)
    counts: dict[str, int] = {"written": 0}
    kept: list[DatasetRecord] = []
    for rec in records:
        if rec.status == FIXED:
            verdict = filter_record(rec)
            if not verdict.keep:
                counts[verdict.reason] = counts.get(verdict.reason, 0) + 1
                continue
            kept.append(rec)
        elif not all_statuses:
            continue
        path = record_path(out, rec)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(rec.dumps(), encoding="utf-8")
        counts["written"] += 1
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.csv").write_text(compute_stats(kept).to_csv(), encoding="utf-8")
    return counts


def mine_repositories(
    repos: Sequence[str | os.PathLike], config: MinerConfig | None = None, workers: int = 4, branch: str = "HEAD"
) -> dict[str, list[DatasetRecord]]:
    """Mine several repositories concurrently, one sequential miner per repository."""

    def one(repo):
        return Miner(repo, config).mine(branch)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, repos))
    return {Path(r).resolve().name: recs for r, recs in zip(repos, results)}
