"""Run configuration: an INI-style file with ``[data]``, ``[phase1]``, ``[refine]``, ``[eval]``, ``[output]`` and ``[bench]`` sections.

Example::

    [data]
    task = 8gs->moons
    seed = 0

    [phase1]
    method = icfm
    n_batches = 20000

    [output]
    dir = runs/icfm
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .bench import BenchConfig, EvalConfig, TaskSpec
from .flows import Phase1Config
from .oatfm import RefineConfig


class ConfigError(ValueError):
    def __init__(self, msg: str, key: str | None = None):
        super().__init__(msg)
        self.key = key


_SECTION_TYPES = {"phase1": Phase1Config, "refine": RefineConfig, "eval": EvalConfig}
# set from [data] rather than per section
_DERIVED = {"phase1": {"seed", "d"}, "refine": {"seed"}, "eval": set()}
_DATA_KEYS = {"task", "seed"}
_OUTPUT_KEYS = {"dir"}
_BENCH_KEYS = {"tasks", "methods", "trials", "workers"}
_NULLABLE = (".grad_clip_norm",)


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec = TaskSpec("8gaussians", "moons")
    seed: int = 0
    phase1: Phase1Config = Phase1Config()
    refine: RefineConfig = RefineConfig()
    eval: EvalConfig = EvalConfig()
    out_dir: Path = Path("out")
    bench_tasks: tuple[TaskSpec, ...] = (TaskSpec("8gaussians", "moons"),)
    bench_methods: tuple[str, ...] = ("icfm",)
    bench_trials: int = 5
    workers: int = 1

    def with_seed(self, seed: int) -> RunConfig:
        return replace(
            self,
            seed=seed,
            phase1=replace(self.phase1, seed=seed),
            refine=replace(self.refine, seed=seed),
        )

    def bench_config(self) -> BenchConfig:
        return BenchConfig(self.phase1, self.refine, self.eval, self.seed, self.workers)

    def to_text(self) -> str:
        lines = ["[data]", f"task = {self.task.name}", f"seed = {self.seed}", ""]
        for name, obj in (("phase1", self.phase1), ("refine", self.refine), ("eval", self.eval)):
            lines.append(f"[{name}]")
            for f in fields(obj):
                if f.name in _DERIVED[name]:
                    continue
                val = getattr(obj, f.name)
                lines.append(f"{f.name} = {'none' if val is None else repr(val) if isinstance(val, float) else val}")
            lines.append("")
        lines += ["[output]", f"dir = {self.out_dir}", ""]
        lines += [
            "[bench]",
            f"tasks = {', '.join(t.name for t in self.bench_tasks)}",
            f"methods = {', '.join(self.bench_methods)}",
            f"trials = {self.bench_trials}",
            f"workers = {self.workers}",
            "",
        ]
        return "\n".join(lines)


def _convert(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            if text.lower() == "none" and key.endswith(_NULLABLE):
                return None
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for key '{key}'", key) from None


def _section_values(parser, name, cls, skip):
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for key, raw in parser.items(name):
        full = f"{name}.{key}"
        if key not in defaults or key in skip:
            raise ConfigError(f"unknown key '{full}'", full)
        out[key] = _convert(raw, defaults[key], full)
    return out


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    known = {"data", "output", "bench", *_SECTION_TYPES}
    for name in parser.sections():
        if name not in known:
            raise ConfigError(f"unknown section '[{name}]'", name)

    cfg = RunConfig()
    seed = 0
    task = cfg.task
    if parser.has_section("data"):
        for key, raw in parser.items("data"):
            if key not in _DATA_KEYS:
                raise ConfigError(f"unknown key 'data.{key}'", f"data.{key}")
        if parser.has_option("data", "task"):
            try:
                task = TaskSpec.parse(parser.get("data", "task"))
            except ValueError as e:
                raise ConfigError(f"invalid value for key 'data.task': {e}", "data.task") from None
        if parser.has_option("data", "seed"):
            seed = _convert(parser.get("data", "seed"), 0, "data.seed")

    built = {}
    for name, cls in _SECTION_TYPES.items():
        vals = _section_values(parser, name, cls, _DERIVED[name]) if parser.has_section(name) else {}
        try:
            built[name] = cls(**vals)
        except ValueError as e:
            raise ConfigError(f"invalid [{name}] section: {e}", name) from None

    out_dir = cfg.out_dir
    if parser.has_section("output"):
        for key, raw in parser.items("output"):
            if key not in _OUTPUT_KEYS:
                raise ConfigError(f"unknown key 'output.{key}'", f"output.{key}")
        if parser.has_option("output", "dir"):
            out_dir = Path(parser.get("output", "dir").strip())
    if not out_dir.is_absolute() and base_dir is not None:
        out_dir = base_dir / out_dir
    out_dir = out_dir.resolve()

    bench = {}
    if parser.has_section("bench"):
        for key, raw in parser.items("bench"):
            full = f"bench.{key}"
            if key not in _BENCH_KEYS:
                raise ConfigError(f"unknown key '{full}'", full)
            items = [s.strip() for s in raw.split(",") if s.strip()]
            try:
                if key == "tasks":
                    bench["bench_tasks"] = tuple(TaskSpec.parse(s) for s in items)
                elif key == "methods":
                    bench["bench_methods"] = tuple(Phase1Config(method=m).method for m in items)
                elif key == "trials":
                    bench["bench_trials"] = _convert(raw, 0, full)
                else:
                    bench["workers"] = _convert(raw, 0, full)
            except ValueError as e:
                raise ConfigError(f"invalid value for key '{full}': {e}", full) from None

    cfg = replace(cfg, task=task, eval=built["eval"], out_dir=out_dir, **bench)
    cfg = replace(cfg, phase1=built["phase1"], refine=built["refine"])
    return cfg.with_seed(seed)


def load_config(path, seed_override: int | None = None) -> RunConfig:
    """Read a config file. Seed precedence: ``seed_override``, then ``$OATFLOW_SEED``, then the file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(), base_dir=path.parent.resolve())
    env = os.environ.get("OATFLOW_SEED")
    if seed_override is not None:
        cfg = cfg.with_seed(seed_override)
    elif env is not None:
        try:
            cfg = cfg.with_seed(int(env))
        except ValueError:
            raise ConfigError(f"OATFLOW_SEED must be an integer, got {env!r}", "OATFLOW_SEED") from None
    return cfg
