"""Run configuration, read from a single TOML file.

Example::

    [analyzer]
    capture = ["infer", "capture", "--results-dir", "{results_dir}", "--", "{build_cmd}"]
    analyze = ["infer", "analyze", "--results-dir", "{results_dir}", "--changed-files-index", "{index_file}"]
    timeout = 1800

    [project]
    build = ["mvn", "-q", "compile"]
    test = ["mvn", "-q", "test"]
    junit_glob = "target/surefire-reports/*.xml"

    [retriever]
    index = "fixes.rkix"
    encoder = "encoder.npz"
    k = 2
    min_sim = 0.60

    [prompt]
    context_window = 2048
    generation_reserve = 1024

    [generator]
    backend = "http"            # or "mock"
    endpoint = "https://..."
    num_samples = 10

    [pipeline]
    workers = 4

Relative paths are resolved against the configuration file's directory.
``analyzer.preset = "stub"`` selects the bundled stand-in analyzer.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import languages as lang
from .analyzer import AnalyzerConfig
from .errors import RepairkitError
from .generator import SamplingParams
from .promptgen import TokenBudget
from .retriever import DEFAULT_DIM, DEFAULT_FEATURES

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass
class ProjectConfig:
    build: list[str] = field(default_factory=lambda: ["{python}", "-m", "repairkit.stubs.build"])
    test: list[str] = field(default_factory=lambda: ["{python}", "-m", "repairkit.stubs.tests"])
    junit_glob: str | None = None
    extensions: tuple[str, ...] = tuple(lang.EXTENSIONS)


@dataclass
class RetrieverConfig:
    index: Path | None = None
    encoder: Path | None = None
    k: int = 2
    min_sim: float = 0.60
    dim: int = DEFAULT_DIM
    features: int = DEFAULT_FEATURES
    seed: int = 0


@dataclass
class GeneratorConfig:
    backend: str = "mock"
    mock_mode: str = "echo_hint"
    fixtures: Path | None = None
    endpoint: str | None = None
    timeout: float = 120.0
    retries: int = 3
    concurrency: int = 4
    sampling: SamplingParams = field(default_factory=SamplingParams)


@dataclass
class PipelineSettings:
    workers: int = 4
    max_candidates: int | None = None


@dataclass
class Config:
    analyzer: AnalyzerConfig = field(default_factory=AnalyzerConfig)
    project: ProjectConfig = field(default_factory=ProjectConfig)
    retriever: RetrieverConfig = field(default_factory=RetrieverConfig)
    budget: TokenBudget = field(default_factory=TokenBudget)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    pipeline: PipelineSettings = field(default_factory=PipelineSettings)
    base_dir: Path = field(default_factory=Path.cwd)


def _pick(cls, section: dict, name: str) -> dict:
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise RepairkitError(f"[{name}] unknown key(s): {', '.join(sorted(unknown))}")
    return dict(section)


def _path(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(os.path.expanduser(value))
    return p if p.is_absolute() else base / p


def config_from_dict(data: dict, base_dir: str | os.PathLike = ".") -> Config:
    base = Path(base_dir).resolve()
    known = {"analyzer", "project", "retriever", "prompt", "generator", "pipeline"}
    unknown = set(data) - known
    if unknown:
        raise RepairkitError(f"unknown configuration section(s): {', '.join(sorted(unknown))}")

    an = dict(data.get("analyzer", {}))
    preset = an.pop("preset", None)
    analyzer = AnalyzerConfig.stub() if preset == "stub" else AnalyzerConfig()
    if preset not in (None, "stub", "infer"):
        raise RepairkitError(f"[analyzer] unknown preset {preset!r}")
    for k, v in _pick(AnalyzerConfig, an, "analyzer").items():
        setattr(analyzer, k, v)

    pr = _pick(ProjectConfig, data.get("project", {}), "project")
    if "extensions" in pr:
        pr["extensions"] = tuple(pr["extensions"])
    project = ProjectConfig(**pr)

    rt = _pick(RetrieverConfig, data.get("retriever", {}), "retriever")
    for key in ("index", "encoder"):
        if key in rt:
            rt[key] = _path(base, rt[key])
    retriever = RetrieverConfig(**rt)

    budget = TokenBudget(**_pick(TokenBudget, data.get("prompt", {}), "prompt"))

    gen = dict(data.get("generator", {}))
    sampling_keys = {f.name for f in fields(SamplingParams)}
    sampling = {k: gen.pop(k) for k in list(gen) if k in sampling_keys}
    if "stop" in sampling:
        sampling["stop"] = tuple(sampling["stop"])
    gen = _pick(GeneratorConfig, gen, "generator")
    if "fixtures" in gen:
        gen["fixtures"] = _path(base, gen["fixtures"])
    generator = GeneratorConfig(**gen, sampling=SamplingParams(**sampling))

    pipeline = PipelineSettings(**_pick(PipelineSettings, data.get("pipeline", {}), "pipeline"))
    return Config(analyzer, project, retriever, budget, generator, pipeline, base)


def load_config(path: str | os.PathLike | None) -> Config:
    """Read a TOML configuration; ``None`` gives the defaults."""
    if path is None:
        return Config()
    p = Path(path)
    with open(p, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise RepairkitError(f"{p}: {e}") from None
    return config_from_dict(data, p.parent)
