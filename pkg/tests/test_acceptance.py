"""Acceptance suite: one test per criterion, each printing a single pass/fail line.

Every check compares the implementation against an independent oracle
(set arithmetic, finite differences, brute-force search, parse-tree
alignment, hand-built templates, or a fresh validation run).
"""

from __future__ import annotations

import json
import math
import random
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import tree_sitter_c_sharp
import tree_sitter_java
from tree_sitter import Language, Parser

from contrastive_fixture import contrastive_pairs, rank1_recall
from prompt_fuzz import random_case, random_method
from repairkit import languages as lang
from repairkit.analyzer import BugReport, diff_reports, parse_report
from repairkit.config import load_config
from repairkit.context import insert_markers, locate_buggy_method, strip_markers
from repairkit.miner import Miner, MinerConfig, write_dataset
from repairkit.obfuscator import PLACEHOLDER, STDLIB_TYPES, canonical_equal, obfuscate
from repairkit.pipeline import apply_patch, validate_patch
from repairkit.promptgen import HINT_HEADER, TokenBudget, assemble_repair_prompt
from repairkit.retriever import (
    ContrastiveBatch,
    EncoderParams,
    RetrievalEntry,
    RetrievalStore,
    TrainConfig,
    TrainingLog,
    index_add,
    infonce_loss,
    infonce_loss_and_grad,
    query,
    train_encoder,
)
from repo_fixtures import make_bug_repos, make_history, stub_config_text
from retrieval_oracle import brute_force, pinned_params, sign_vectors
from snippet_corpus import corpus

BUG_TYPES = ["NULL_DEREFERENCE", "RESOURCE_LEAK", "THREAD_SAFETY_VIOLATION"]


# -- 1. report-diff algebra --------------------------------------------------------------

QUALIFIER_TEMPLATES = [
    "object `{v}` last assigned on line {n} could be null and is dereferenced at line {m}.",
    "resource of type `{t}` acquired at line {n} is not released after line {m}.",
    "Unprotected write. Non-private method `{t}.run()` writes to field `this.{v}`.",
]


def random_report(rng: random.Random) -> BugReport:
    template = rng.choice(QUALIFIER_TEMPLATES)
    qualifier = template.format(v=rng.choice("xyz"), t=rng.choice(["Reader", "Lock"]), n=rng.randint(1, 99),
                                m=rng.randint(1, 99))
    return BugReport(
        bug_type=rng.choice(BUG_TYPES),
        file=rng.choice(["A.java", "B.cs"]),
        line=rng.randint(1, 300),
        procedure=rng.choice(["A.f()", "A.g(int)", "B.H()"]),
        qualifier=qualifier,
        raw_hash=rng.choice([None, None, None, "h1", "h2", "h3", "h4"]),
    )


def oracle_identity(r: BugReport) -> tuple:
    """Identity written out from the matching rule: hash if present, else the stable fields."""
    if r.raw_hash:
        return ("hash", r.raw_hash)
    q = re.sub(r"\d+", "#", re.sub(r"`[^`]*`", "`_`", r.qualifier))
    return (r.bug_type, r.file, r.procedure, " ".join(q.split()))


def first_occurrences(reports: list[BugReport]) -> dict[tuple, BugReport]:
    out: dict[tuple, BugReport] = {}
    for r in reports:
        out.setdefault(oracle_identity(r), r)
    return out


def check_diff(prev: list[BugReport], curr: list[BugReport]) -> None:
    d = diff_reports(prev, curr)
    P, C = first_occurrences(prev), first_occurrences(curr)
    ids = lambda rs: [oracle_identity(r) for r in rs]  # noqa: E731
    # partition of the two identity sets
    assert ids(d.introduced) == [k for k in C if k not in P]
    assert ids(d.fixed) == [k for k in P if k not in C]
    assert ids(d.preexisting) == [k for k in C if k in P]
    assert set(ids(d.introduced)) | set(ids(d.preexisting)) == set(C)
    assert set(ids(d.fixed)) | set(ids(d.preexisting)) == set(P)
    assert not set(ids(d.introduced)) & set(ids(d.preexisting))
    # findings are drawn from the side they describe
    assert list(d.introduced) == [C[k] for k in ids(d.introduced)]
    assert list(d.fixed) == [P[k] for k in ids(d.fixed)]
    assert list(d.preexisting) == [C[k] for k in ids(d.preexisting)]
    # antisymmetry
    r = diff_reports(curr, prev)
    assert r.introduced == d.fixed and r.fixed == d.introduced
    assert set(ids(r.preexisting)) == set(ids(d.preexisting))
    # identity
    for side, first in ((prev, P), (curr, C)):
        same = diff_reports(side, side)
        assert same.introduced == () and same.fixed == ()
        assert list(same.preexisting) == list(first.values())


def test_criterion_1_report_diff_algebra(criterion) -> None:
    with criterion(1, "report-diff set identities on 10^4 random pairs") as c:
        c.limit = 10.0
        rng = random.Random(2024)
        n = 10_000
        for _ in range(n):
            prev = [random_report(rng) for _ in range(rng.randint(0, 8))]
            curr = [random_report(rng) for _ in range(rng.randint(0, 8))]
            if rng.random() < 0.3:
                curr += rng.sample(prev, k=len(prev) // 2)
            check_diff(prev, curr)
        c.detail = f"{n} pairs checked"


# -- 2. InfoNCE correctness -------------------------------------------------------------------

TOKENS = ["VAR_0", "VAR_1", "VAR_2", "METHOD_0", "METHOD_1", "CLASS_0", "(", ")", ";", "=", ".", "null", "return", "if"]


def random_snippet(rng: np.random.Generator) -> str:
    return " ".join(rng.choice(TOKENS, size=int(rng.integers(1, 7))))


def test_criterion_2_infonce(criterion) -> None:
    with criterion(2, "InfoNCE analytic values and gradients") as c:
        c.limit = 30.0
        p = pinned_params({"alpha": np.array([1.0, 0.0]), "beta": np.array([0.0, 1.0])})
        analytic = [
            (ContrastiveBatch(["alpha"] * 2, ["alpha"] * 2), math.log(2)),
            (ContrastiveBatch(["alpha"] * 4, ["alpha"] * 4), math.log(4)),
            (ContrastiveBatch(["alpha", "beta"], ["alpha", "beta"]), math.log(1 + math.exp(-1))),
        ]
        for batch, expected in analytic:
            assert abs(infonce_loss(batch, p) - expected) <= 1e-9, (batch, expected)

        rng = np.random.default_rng(99)
        worst = 0.0
        h = 1e-6
        for trial in range(100):
            features, dim = int(rng.choice([8, 16, 32])), int(rng.integers(2, 9))
            params = EncoderParams(rng.standard_normal((features, dim)), seed=trial)
            size = int(rng.integers(2, 6))
            batch = ContrastiveBatch([random_snippet(rng) for _ in range(size)],
                                     [random_snippet(rng) for _ in range(size)])
            _, grad = infonce_loss_and_grad(batch, params)
            fd = np.zeros_like(grad)
            for i in range(features):
                for j in range(dim):
                    up, down = params.copy(), params.copy()
                    up.projection[i, j] += h
                    down.projection[i, j] -= h
                    fd[i, j] = (infonce_loss(batch, up) - infonce_loss(batch, down)) / (2 * h)
            rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
            worst = max(worst, rel)
            assert rel <= 1e-4, f"trial {trial}: relative gradient error {rel:.2e}"
        c.detail = f"3 analytic values to 1e-9; 100 batches, worst relative gradient error {worst:.1e}"


# -- 3. retrieval oracle equivalence ------------------------------------------------------------


def test_criterion_3_retrieval_matches_brute_force(criterion) -> None:
    with criterion(3, "query equals brute-force top-k on 100 stores") as c:
        c.limit = 60.0
        rng = np.random.default_rng(3)
        queries = ["qa", "qb", "qc"]
        total = 0
        for _ in range(100):
            dim = int(rng.choice([4, 16, 64]))
            base = np.where(rng.random(dim) < 0.5, -1.0, 1.0) / math.sqrt(dim)
            qvecs = sign_vectors(rng, base, len(queries))
            params = pinned_params(dict(zip(queries, qvecs)), features=256)
            keys = sign_vectors(rng, base, int(rng.integers(0, 1001)))
            kinds = [BUG_TYPES[int(rng.integers(3))] for _ in keys]
            store = RetrievalStore(params)
            for k, (key, t) in enumerate(zip(keys, kinds)):
                index_add(store, RetrievalEntry(key, f"fix{k}", t))
            for tok, qv in zip(queries, qvecs):
                for bt in BUG_TYPES:
                    got = [int(v[3:]) for v, _ in query(store, tok, bt)]
                    assert got == brute_force(keys, kinds, qv, bt, 2, 0.60)
                    if dim == 16:
                        # 0.625 is a reachable similarity here: the threshold is inclusive
                        got = [int(v[3:]) for v, _ in query(store, tok, bt, min_sim=0.625)]
                        assert got == brute_force(keys, kinds, qv, bt, 2, 0.625)
                    total += 1
        c.detail = f"{total} queries identical to brute force"


# -- 4. obfuscation invariants -------------------------------------------------------------------

PARSERS = {
    "java": Parser(Language(tree_sitter_java.language())),
    "csharp": Parser(Language(tree_sitter_c_sharp.language())),
}


def leaves(text: str, language: str) -> list[tuple[str, str]]:
    """(node type, text) for every non-comment leaf, in source order."""
    out = []
    stack = [PARSERS[language].parse(text.encode()).root_node]
    while stack:
        n = stack.pop()
        if "comment" in n.type:
            continue
        if n.child_count == 0:
            if n.end_byte > n.start_byte:
                out.append((n.type, n.text.decode()))
            continue
        stack.extend(reversed(n.children))
    return out


def check_snippet(original: str, language: str) -> str:
    text, mapping = obfuscate(original, language)
    assert obfuscate(original, language) == (text, mapping), "not deterministic"
    assert obfuscate(text, language)[0] == text, "not idempotent"
    names = dict(mapping.bindings())
    assert len(names) == len(mapping.bindings()), "a name is bound in two categories"
    before, after = leaves(original, language), leaves(text, language)
    assert len(before) == len(after)
    for (kind, tok), (_, new) in zip(before, after):
        if kind in ("identifier", "type_identifier") and tok in names:
            assert new == names[tok], f"{tok} -> {new}, expected {names[tok]}"
        else:
            assert new == tok
    for tok in re.findall(r"\w+", text):
        if tok.startswith(("CLASS_", "METHOD_", "VAR_")):
            assert PLACEHOLDER.match(tok)
    return text


def test_criterion_4_obfuscation_invariants(criterion) -> None:
    with criterion(4, "obfuscation invariants on a 200-snippet corpus") as c:
        pairs = corpus(200)
        for a, b in pairs:
            text = check_snippet(a.text, a.language)
            assert check_snippet(b.text, b.language) == text
            assert canonical_equal(a.text, b.text, a.language)
            _, mapping = obfuscate(a.text, a.language)
            assert (set(mapping.classes), set(mapping.methods), set(mapping.variables)) == (
                a.classes, a.methods, a.variables
            )
            parsed = {tok for kind, tok in leaves(a.text, a.language)
                      if kind in ("identifier", "type_identifier") and tok != "var"}
            user = parsed - STDLIB_TYPES
            assert len(mapping.bindings()) == len(user)
        # distinct structures are not identified with each other
        texts = {obfuscate(a.text, a.language)[0] for a, _ in pairs}
        c.detail = f"{len(pairs)} pairs ({2 * len(pairs)} snippets), {len(texts)} distinct canonical forms"
        assert len(texts) > 150


# -- 5 and 6. prompt budget and marker round-trip ---------------------------------------------------


@pytest.fixture(scope="module")
def fuzz_cases() -> list:
    rng = random.Random(5)
    return [random_case(rng) for _ in range(10_000)]


def test_criterion_5_prompt_budget(criterion, fuzz_cases) -> None:
    with criterion(5, "prompt budget and order under 10^4 oversized inputs") as c:
        budget = TokenBudget()
        assert budget.context_window - budget.generation_reserve == 1024
        dropped = 0
        for hints, bug_type, elements, focal, marked, _, _ in fuzz_cases:
            bundle = assemble_repair_prompt(hints, bug_type, elements, focal, marked, budget)
            assert bundle.total_tokens <= 1024
            assert bundle.parts[-1].text == marked.text_with_markers
            template = [(1, f"{HINT_HEADER}\n{h}") for h in hints] + [(2, f"// Bug type: {bug_type}")]
            template += [(3, e.text) for e in sorted(elements, key=lambda e: e.offset)]
            template += [(4, f) for f in focal] + [(5, marked.text_with_markers)]
            it = iter(template)
            sections = []
            for part in bundle.parts:
                section = next((s for s, t in it if t == part.text), None)
                assert section is not None, "part out of template order"
                sections.append(section)
            assert sections == sorted(sections)
            dropped += bool(bundle.dropped_parts)
        c.detail = f"{len(fuzz_cases)} cases within 1024 tokens, {dropped} needed trimming"
        assert dropped > len(fuzz_cases) // 4, "fuzzer did not exercise trimming"


def marker_variants(rng: random.Random) -> list[str]:
    m = random_method(rng, max_lines=6)
    tabbed = m.replace("    ", "\t")
    return [m, m + "\n", m.replace("\n", "\r\n"), m.replace("\n", "\r\n") + "\r\n", tabbed,
            m.replace("\n", "\n\n"), m + "\n   ", "x", "\n", "void f() { s(\"é\"); }\n"]


def test_criterion_6_marker_round_trip(criterion, fuzz_cases) -> None:
    with criterion(6, "strip(insert(method, span)) is byte-identical") as c:
        n = 0
        for *_, method, span in fuzz_cases:
            assert strip_markers(insert_markers(method, span)) == method
            n += 1
        rng = random.Random(6)
        for _ in range(200):
            for method in marker_variants(rng):
                lines = len(method.splitlines())
                for first in range(1, lines + 1):
                    for last in range(first, lines + 1):
                        marked = insert_markers(method, (first, last))
                        assert strip_markers(marked).encode() == method.encode(), (method, first, last)
                        n += 1
        c.detail = f"{n} (method, span) pairs round-trip"


# -- 7. closed loop through the command line ------------------------------------------------------


def cli(config: Path, *args: str, cwd: Path) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "repairkit", "--config", str(config), *args],
                          cwd=cwd, capture_output=True, text=True, timeout=300)


def test_criterion_7_closed_loop(criterion, tmp_path: Path) -> None:
    with criterion(7, "closed loop on 20 fixture bugs with the stub analyzer") as c:
        c.limit = 60.0
        repos = make_bug_repos(tmp_path / "repos", 4)
        cfg = tmp_path / "repairkit.toml"
        cfg.write_text(stub_config_text(index=tmp_path / "fixes.rkix"), encoding="utf-8")
        dataset = tmp_path / "dataset"

        args = ["mine", "--out", str(dataset)]
        for repo, *_ in repos:
            args += ["--repo", str(repo)]
        res = cli(cfg, *args, cwd=tmp_path)
        assert res.returncode == 0, res.stderr
        res = cli(cfg, "index", "build", "--dataset", str(dataset), cwd=tmp_path)
        assert res.returncode == 0, res.stderr

        fixes = []
        for repo, bugs, buggy, _ in repos:
            subprocess.run(["git", "-C", str(repo), "checkout", "-q", buggy], check=True)
            out = tmp_path / "out" / repo.name
            res = cli(cfg, "fix", "--repo", str(repo), "--out", str(out), cwd=tmp_path)
            assert res.returncode == 0, res.stdout + res.stderr
            fixes.append(out / "fixes.jsonl")

        args = ["eval", "--dataset", str(dataset), "--k", "1"]
        for f in fixes:
            args += ["--fixes", str(f)]
        res = cli(cfg, *args, cwd=tmp_path)
        assert res.returncode == 0, res.stderr
        scores = json.loads(res.stdout)
        assert scores["records"] == 20 and scores["unmatched"] == 0, scores
        assert scores["top1"] == 1.0, scores

        # re-validate every served patch from scratch
        config = load_config(cfg)
        served = 0
        for (repo, *_), path in zip(repos, fixes):
            for line in path.read_text(encoding="utf-8").splitlines():
                row = json.loads(line)
                assert row["patch"] is not None, row["status"]
                (bug,) = parse_report(json.dumps([row["bug"]]))
                language = lang.language_for_path(bug.file)
                text = (repo / bug.file).read_text(encoding="utf-8")
                method = locate_buggy_method(text, bug.line, language)
                patched = apply_patch(text, method, row["patch"]["text"], language)
                result = validate_patch(repo, bug, patched, config)
                assert result.validated, (bug.file, result.status, result.detail)
                assert bug.identity() in {r.identity() for r in result.analyzer_delta.fixed}
                assert result.analyzer_delta.introduced == ()
                assert (repo / bug.file).read_text(encoding="utf-8") == text
                served += 1
        assert served == 20
        c.detail = f"top1={scores['top1']:.2f} over {scores['records']} records; {served}/20 patches re-validated"


# -- 8. miner build reuse -------------------------------------------------------------------------------

WRAPPER = """\
import subprocess, sys
with open({counter!r}, "a") as fh:
    fh.write("build\\n")
sys.exit(subprocess.call([sys.executable, "-m", "repairkit.stubs.build", *sys.argv[1:]]))
"""


def snapshot(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_miner_build_reuse(criterion, tmp_path: Path) -> None:
    with criterion(8, "10-commit history mined with at most 11 builds") as c:
        repo = tmp_path / "history"
        make_history(repo, 10)
        counts, outputs = [], []
        for run in range(2):
            counter = tmp_path / f"builds{run}.log"
            wrapper = tmp_path / f"build{run}.py"
            wrapper.write_text(WRAPPER.format(counter=str(counter)), encoding="utf-8")
            miner = Miner(repo, MinerConfig(build_cmd=[sys.executable, str(wrapper)]))
            records = miner.mine()
            out = tmp_path / f"dataset{run}"
            write_dataset(records, out, all_statuses=True)
            counts.append(len(counter.read_text().splitlines()))
            outputs.append(snapshot(out))
            assert counts[-1] <= 11, f"{counts[-1]} builds"
        assert len(outputs[0]) > 1, "no records emitted"
        assert outputs[0] == outputs[1], "records differ between runs"
        c.detail = f"builds per run {counts}; {len(outputs[0])} output files byte-identical"


# -- 9. retriever training ----------------------------------------------------------------------------------


def test_criterion_9_training_progress(criterion) -> None:
    with criterion(9, "training lowers held-out loss and raises rank-1 recall") as c:
        pairs = contrastive_pairs(64)
        p0 = EncoderParams.initialize(dim=16, features=1024, seed=0)
        log = TrainingLog()
        p1 = train_encoder(pairs, TrainConfig(epochs=30, step_size=0.5, batch_size=8), p0, log)
        best = log.epochs[log.best_epoch - 1]["heldout_loss"] if log.best_epoch else log.initial_heldout_loss
        before, after = rank1_recall(pairs, p0), rank1_recall(pairs, p1)
        c.detail = (f"held-out loss {log.initial_heldout_loss:.3f} -> {best:.3f}; "
                    f"rank-1 recall {before:.3f} -> {after:.3f}")
        assert best < log.initial_heldout_loss
        assert after > before
