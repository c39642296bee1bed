from __future__ import annotations

from pathlib import Path

import pytest

from repairkit.analyzer import diff_reports
from repairkit.errors import RefError
from repairkit.miner import (
    FIXED,
    INTRODUCED,
    PREEXISTING,
    CommitPair,
    DatasetRecord,
    Miner,
    RejectReason,
    compute_stats,
    enumerate_commit_pairs,
    filter_record,
    load_dataset,
    record_path,
    write_dataset,
)
from repairkit.stubs.infer import analyze_source
from repo_fixtures import commit_all, git, init_repo, npd_java, rl_java, write

PAIR = CommitPair("a" * 40, "b" * 40, ("A.java",))


def method(n: int) -> str:
    return "\n".join(["void f() {", *[f"    s{k}();" for k in range(2, n)], "}"])


def replace_lines(text: str, lines: dict[int, str]) -> str:
    out = text.splitlines()
    for k, v in lines.items():
        out[k - 1] = v
    return "\n".join(out)


def fixed_record(buggy: str, fixed: str, bug_line: int, bug_type: str = "NULL_DEREFERENCE",
                 file: str = "A.java") -> DatasetRecord:
    return DatasetRecord(bug_type, FIXED, file, "f", buggy, fixed, bug_line, PAIR, "r", method_start_line=1)


# -- commit pairs ----------------------------------------------------------------------


def test_linear_history_pairs(tmp_path: Path) -> None:
    init_repo(tmp_path)
    shas = []
    for k in range(3):
        write(tmp_path, "A.java", f"class A {{ int v = {k}; }}\n")
        shas.append(commit_all(tmp_path, f"c{k}", f"2024-01-0{k + 1}T00:00:00"))
    pairs = list(enumerate_commit_pairs(tmp_path, "main"))
    assert [(p.prev, p.curr) for p in pairs] == [(shas[0], shas[1]), (shas[1], shas[2])]
    assert all(p.changed_files == ("A.java",) for p in pairs)


def test_single_commit_has_no_pairs(tmp_path: Path) -> None:
    init_repo(tmp_path)
    write(tmp_path, "A.java", "class A {}\n")
    commit_all(tmp_path, "only")
    assert list(enumerate_commit_pairs(tmp_path, "main")) == []


def test_non_source_commit_is_omitted(tmp_path: Path) -> None:
    init_repo(tmp_path)
    write(tmp_path, "A.java", "class A {}\n")
    c1 = commit_all(tmp_path, "c1")
    write(tmp_path, "README.md", "docs\n")
    commit_all(tmp_path, "c2", "2024-01-02T00:00:00")
    write(tmp_path, "B.cs", "class B {}\n")
    c3 = commit_all(tmp_path, "c3", "2024-01-03T00:00:00")
    pairs = list(enumerate_commit_pairs(tmp_path, "main"))
    assert [p.curr for p in pairs] == [c3]
    assert pairs[0].changed_files == ("B.cs",)
    assert c1 not in [p.curr for p in pairs]


def test_merge_commit_pairs_with_first_parent(tmp_path: Path) -> None:
    init_repo(tmp_path)
    write(tmp_path, "A.java", "class A {}\n")
    base = commit_all(tmp_path, "base")
    git(tmp_path, "checkout", "-q", "-b", "side")
    write(tmp_path, "B.java", "class B {}\n")
    commit_all(tmp_path, "side", "2024-01-02T00:00:00")
    git(tmp_path, "checkout", "-q", "main")
    git(tmp_path, "merge", "-q", "--no-ff", "-m", "merge", "side")
    merge = git(tmp_path, "rev-parse", "HEAD").strip()
    assert [(p.prev, p.curr, p.changed_files) for p in enumerate_commit_pairs(tmp_path, "main")] == [
        (base, merge, ("B.java",))
    ]


def test_invalid_ref(tmp_path: Path) -> None:
    init_repo(tmp_path)
    write(tmp_path, "A.java", "class A {}\n")
    commit_all(tmp_path, "c1")
    with pytest.raises(RefError):
        list(enumerate_commit_pairs(tmp_path, "no-such-branch"))


# -- mining a pair ---------------------------------------------------------------------


def two_commit_repo(root: Path, first: dict[str, str], second: dict[str, str]) -> list[str]:
    init_repo(root)
    shas = []
    for k, files in enumerate((first, second)):
        for rel, text in files.items():
            write(root, rel, text)
        shas.append(commit_all(root, f"c{k}", f"2024-03-0{k + 1}T00:00:00"))
    return shas


def test_null_guard_yields_one_fixed_record(tmp_path: Path) -> None:
    bug = npd_java(0)
    two_commit_repo(tmp_path, {bug.path: bug.buggy}, {bug.path: bug.fixed})
    # oracle: run the analyzer rules on both snapshots by hand
    manual = diff_reports(analyze_source(bug.path, bug.buggy), analyze_source(bug.path, bug.fixed))
    assert len(manual.fixed) == 1 and not manual.introduced and not manual.preexisting
    (pair,) = enumerate_commit_pairs(tmp_path)
    with Miner(tmp_path) as miner:
        (rec,) = miner.mine_commit_pair(pair)
    assert rec.status == FIXED and rec.bug_type == "NULL_DEREFERENCE"
    assert rec.line == manual.fixed[0].line
    assert rec.method_name == "measure0"
    assert rec.buggy_method_text in bug.buggy and rec.fixed_method_text in bug.fixed
    assert rec.buggy_method_text != rec.fixed_method_text
    assert "value == null" in rec.fixed_method_text
    assert filter_record(rec).keep


def test_unclosed_stream_yields_introduced_record(tmp_path: Path) -> None:
    bug = rl_java(1)
    two_commit_repo(tmp_path, {bug.path: bug.fixed}, {bug.path: bug.buggy})
    manual = diff_reports(analyze_source(bug.path, bug.fixed), analyze_source(bug.path, bug.buggy))
    assert len(manual.introduced) == 1 and not manual.fixed
    with Miner(tmp_path) as miner:
        (rec,) = miner.mine_commit_pair(next(enumerate_commit_pairs(tmp_path)))
    assert (rec.status, rec.bug_type, rec.fixed_method_text) == (INTRODUCED, "RESOURCE_LEAK", None)
    assert rec.buggy_method_text in bug.buggy


def test_identical_reports_give_only_preexisting(tmp_path: Path) -> None:
    bug = npd_java(2)
    two_commit_repo(tmp_path, {bug.path: bug.buggy}, {bug.path: bug.buggy + "// trailing comment\n"})
    with Miner(tmp_path) as miner:
        recs = miner.mine_commit_pair(next(enumerate_commit_pairs(tmp_path)))
    assert [r.status for r in recs] == [PREEXISTING]


def test_build_failure_skips_pair(tmp_path: Path) -> None:
    bug = npd_java(0)
    two_commit_repo(tmp_path, {bug.path: bug.buggy}, {bug.path: "class Broken { void f( }\n"})
    with Miner(tmp_path) as miner:
        assert miner.mine_commit_pair(next(enumerate_commit_pairs(tmp_path))) == []
        assert [reason for _, reason, _ in miner.skips] == ["build_failure"]


def test_mining_history_reuses_captures(tmp_path: Path) -> None:
    init_repo(tmp_path)
    bugs = [npd_java(0), rl_java(1)]
    steps = [{bugs[0].path: bugs[0].buggy}, {bugs[0].path: bugs[0].fixed}, {bugs[1].path: bugs[1].buggy},
             {bugs[1].path: bugs[1].fixed}]
    for k, files in enumerate(steps):
        for rel, text in files.items():
            write(tmp_path, rel, text)
        commit_all(tmp_path, f"c{k}", f"2024-04-0{k + 1}T00:00:00")
    miner = Miner(tmp_path)
    records = miner.mine()
    assert miner.capture_count == 4  # one per commit, not two per pair
    assert sorted((r.status, r.bug_type) for r in records) == [
        (FIXED, "NULL_DEREFERENCE"), (FIXED, "RESOURCE_LEAK"), (INTRODUCED, "RESOURCE_LEAK")
    ]


# -- filtering -------------------------------------------------------------------------------


def test_filter_keeps_small_local_edit() -> None:
    buggy = method(12)
    fixed = replace_lines(buggy, {5: "    t5();", 6: "    t6();"})
    assert filter_record(fixed_record(buggy, fixed, 5)).keep


def test_filter_rejects_nine_edited_lines() -> None:
    buggy = method(20)
    fixed = replace_lines(buggy, {k: f"    t{k}();" for k in range(3, 12)})
    verdict = filter_record(fixed_record(buggy, fixed, 5))
    assert (verdict.keep, verdict.reason) == (False, RejectReason.EDIT_TOO_LARGE)


def test_filter_rejects_distant_edit() -> None:
    buggy = method(20)
    fixed = replace_lines(buggy, {13: "    t13();"})
    verdict = filter_record(fixed_record(buggy, fixed, 3))
    assert (verdict.keep, verdict.reason) == (False, RejectReason.EDIT_NOT_LOCAL)


def test_filter_boundaries() -> None:
    buggy = method(20)
    # an edit exactly four lines below the bug line is still local
    assert filter_record(fixed_record(buggy, replace_lines(buggy, {9: "    t9();"}), 5)).keep
    assert not filter_record(fixed_record(buggy, replace_lines(buggy, {10: "    t10();"}), 5)).keep
    # eight edited lines are allowed
    fixed = replace_lines(buggy, {k: f"    t{k}();" for k in range(2, 10)})
    assert filter_record(fixed_record(buggy, fixed, 5)).keep


def test_filter_rejects_empty_method_diff_and_non_fixed() -> None:
    verdict = filter_record(fixed_record(method(5), method(5), 2))
    assert verdict.reason == RejectReason.EMPTY_METHOD_DIFF
    with pytest.raises(ValueError):
        filter_record(DatasetRecord("NULL_DEREFERENCE", INTRODUCED, "A.java", "f", "x", None, 1, PAIR, "r"))


# -- statistics and output -------------------------------------------------------------------


def test_stats_mean_of_two_four_six_lines() -> None:
    buggy = method(4)
    records = []
    for n in (2, 4, 6):
        lines = buggy.splitlines()
        fixed = "\n".join(lines[:2] + [f"    n{k}();" for k in range(n)] + lines[2:])
        records.append(fixed_record(buggy, fixed, 2))
    table = compute_stats(records)
    cell = table.cell("NULL_DEREFERENCE", "java")
    assert cell.num_patches == 3
    assert cell.mean_lines_per_patch == 4.0
    # every inserted line "    nK();" has 9 characters
    assert cell.mean_chars_per_patch == 36.0


def test_stats_empty_and_layout() -> None:
    table = compute_stats([])
    assert all(table.cell(bt, lg).num_patches == 0
               for bt in ("NULL_DEREFERENCE", "RESOURCE_LEAK", "THREAD_SAFETY_VIOLATION") for lg in ("java", "csharp"))
    rows = table.render().splitlines()
    assert [r.split()[0] for r in rows[1:]] == ["Num", "MeanLines", "MeanChars"]
    assert "NPD Java" in rows[0] and "TSV C#" in rows[0]
    assert "—" in rows[2]
    csv_lines = table.to_csv().splitlines()
    assert csv_lines[0] == "bug_type,language,num_patches,mean_lines,mean_chars"
    assert len(csv_lines) == 7


def test_stats_ignore_non_fixed_records() -> None:
    intro = DatasetRecord("RESOURCE_LEAK", INTRODUCED, "A.cs", "F", "x", None, 1, PAIR, "r")
    assert compute_stats([intro]).cell("RESOURCE_LEAK", "csharp").num_patches == 0


def test_write_dataset_layout_and_round_trip(tmp_path: Path) -> None:
    buggy = method(12)
    keep = fixed_record(buggy, replace_lines(buggy, {5: "    t5();"}), 5)
    reject = fixed_record(buggy, replace_lines(buggy, {11: "    t11();"}), 2)
    intro = DatasetRecord("RESOURCE_LEAK", INTRODUCED, "A.java", "f", buggy, None, 3, PAIR, "r")
    counts = write_dataset([keep, reject, intro], tmp_path)
    assert counts == {"written": 1, RejectReason.EDIT_NOT_LOCAL: 1}
    path = record_path(tmp_path, keep)
    assert path.relative_to(tmp_path).parts[:3] == ("r", "NULL_DEREFERENCE", "b" * 40)
    assert load_dataset(tmp_path) == [keep]
    # one deleted and one inserted line of 9 characters each
    assert "NULL_DEREFERENCE,Java,1,2.0,18.0" in (tmp_path / "stats.csv").read_text()
    assert write_dataset([keep, intro], tmp_path / "all", all_statuses=True)["written"] == 2


def test_records_are_byte_stable(tmp_path: Path) -> None:
    bug = npd_java(1)
    two_commit_repo(tmp_path / "repo", {bug.path: bug.buggy}, {bug.path: bug.fixed})
    outs = []
    for k in range(2):
        records = Miner(tmp_path / "repo").mine()
        write_dataset(records, tmp_path / f"out{k}")
        outs.append({p.relative_to(tmp_path / f"out{k}"): p.read_bytes()
                     for p in sorted((tmp_path / f"out{k}").rglob("*")) if p.is_file()})
    assert outs[0] == outs[1]
    assert len(outs[0]) == 2  # one record plus stats.csv
