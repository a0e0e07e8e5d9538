"""Run configuration: a single TOML file, validated into frozen dataclasses.

Example::

    run_id = "toy"

    [model]
    kind = "linear-regression"
    widths = [5, 1]

    [data]
    generator = "linear-teacher"
    n_train = 40
    n_query = 10

    [sgld]
    batch_size = 40

Every error names the offending line. Sections ``oracle`` and ``lds`` are
optional; everything else falls back to documented defaults.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .data import GENERATORS, DatasetSplit, load_dataset
from .errors import BifError, ConfigError
from .lds import LdsConfig, RetrainConfig
from .models import ModelSpec
from .sgld import SgldConfig

ORACLE_METHODS = ("analytic_gaussian", "dampened_if", "gradsim")
DEFAULT_N_TRAIN = 2048
DEFAULT_N_QUERY = 16


@dataclass(frozen=True)
class DataSource:
    """A synthetic generator with its keyword arguments, or a dataset file."""

    generator: str = "linear-teacher"
    path: str = ""
    n_train: int = DEFAULT_N_TRAIN
    n_query: int = DEFAULT_N_QUERY
    seed: int = 0
    options: tuple[tuple[str, object], ...] = ()

    def load(self) -> DatasetSplit:
        if self.path:
            return load_dataset(self.path)
        return GENERATORS[self.generator](self.n_train, self.n_query, seed=self.seed, **dict(self.options))


@dataclass(frozen=True)
class CheckpointConfig:
    """``w*`` is the Newton minimizer of ``L_train + l2/2 ||w||^2`` started
    from a seeded initialization."""

    l2: float = 0.0
    init_scale: float = 1.0
    init_seed: int = 0


@dataclass(frozen=True)
class OracleConfig:
    gamma: float | None = None
    beta: float | None = None
    methods: tuple[str, ...] = ("dampened_if", "gradsim")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    data: DataSource = field(default_factory=DataSource)
    sgld: SgldConfig = field(default_factory=SgldConfig)
    checkpoint: CheckpointConfig = field(default_factory=CheckpointConfig)
    per_component: bool = False
    oracle: OracleConfig | None = None
    lds: LdsConfig | None = None
    output_dir: str = ""
    run_id: str = "run"
    top_k: int = 10

    def oracle_gamma(self) -> float:
        return self.sgld.gamma if self.oracle is None or self.oracle.gamma is None else self.oracle.gamma

    def digest(self) -> str:
        return hashlib.sha256(serialize(self).encode()).hexdigest()


# -- parsing ------------------------------------------------------------------

_HEADER = re.compile(r"^\s*\[+\s*([A-Za-z0-9_.\-\" ]+?)\s*\]+")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def _line_index(text: str) -> dict[tuple[str, ...], int]:
    """Map (table..., key) paths to 1-based line numbers."""
    index: dict[tuple[str, ...], int] = {}
    table: tuple[str, ...] = ()
    for no, line in enumerate(text.splitlines(), start=1):
        m = _HEADER.match(line)
        if m:
            table = tuple(p.strip().strip('"') for p in m.group(1).split("."))
            index.setdefault(table, no)
            continue
        m = _KEY.match(line)
        if m:
            index.setdefault(table + (m.group(1),), no)
    return index


class _Reader:
    """Pops keys from a table, remembering where each came from."""

    def __init__(self, table: dict, path: tuple[str, ...], lines: dict):
        self.table = dict(table)
        self.path = path
        self.lines = lines

    def line(self, key: str | None = None) -> int | None:
        if key is not None and self.path + (key,) in self.lines:
            return self.lines[self.path + (key,)]
        return self.lines.get(self.path)

    def name(self, key: str) -> str:
        return ".".join(self.path + (key,))

    def error(self, key: str | None, message: str) -> ConfigError:
        return ConfigError(message, line=self.line(key), key=self.name(key) if key else ".".join(self.path))

    def has(self, key: str) -> bool:
        return key in self.table

    def get(self, key: str, default, kind):
        if key not in self.table:
            return default
        value = self.table.pop(key)
        ok = {
            int: lambda v: isinstance(v, int) and not isinstance(v, bool),
            float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
            bool: lambda v: isinstance(v, bool),
            str: lambda v: isinstance(v, str),
            list: lambda v: isinstance(v, list),
            dict: lambda v: isinstance(v, dict),
        }[kind](value)
        if not ok:
            raise self.error(key, f"{self.name(key)} must be of type {kind.__name__}, got {value!r}")
        return float(value) if kind is float else value

    def sub(self, key: str) -> "_Reader | None":
        if key not in self.table:
            return None
        return _Reader(self.get(key, None, dict), self.path + (key,), self.lines)

    def finish(self) -> None:
        for key in self.table:
            raise self.error(key, f"unknown key {self.name(key)!r}")


def _build(reader: _Reader, key_for_error, factory, **kwargs):
    try:
        return factory(**kwargs)
    except ConfigError:
        raise
    except BifError as e:
        raise reader.error(key_for_error(str(e)), str(e)) from None


def _blame(keys):
    """Pick the key whose name appears in a validation message."""
    def pick(message: str):
        for k in keys:
            if re.search(rf"\b{re.escape(k)}\b", message):
                return k
        return None
    return pick


def _parse_model(r: _Reader) -> ModelSpec:
    kw = {"kind": r.get("kind", None, str), "widths": r.get("widths", None, list)}
    for k in ("kind", "widths"):
        if kw[k] is None:
            raise r.error(None, f"[model] requires {k!r}")
    if not all(isinstance(w, int) and not isinstance(w, bool) for w in kw["widths"]):
        raise r.error("widths", "model.widths must be a list of integers")
    kw["activation"] = r.get("activation", "identity", str)
    kw["bias"] = r.get("bias", True, bool)
    kw["loss"] = r.get("loss", "", str)
    r.finish()
    return _build(r, _blame(list(kw)), ModelSpec, **kw)


_GENERATOR_OPTIONS = {
    "linear-teacher": {"dim": int, "out_dim": int, "noise": float, "components": bool},
    "two-gaussians": {"dim": int, "separation": float},
}


def _parse_data(r: _Reader, config_dir: Path | None) -> DataSource:
    path = r.get("path", "", str)
    generator = r.get("generator", "linear-teacher" if not path else "", str)
    n_train = r.get("n_train", DEFAULT_N_TRAIN, int)
    n_query = r.get("n_query", DEFAULT_N_QUERY, int)
    seed = r.get("seed", 0, int)
    if path:
        if r.lines.get(r.path + ("generator",)):
            raise r.error("generator", "data.path and data.generator are mutually exclusive")
        p = Path(path)
        if not p.is_absolute() and config_dir is not None:
            p = config_dir / p
        if not p.exists():
            raise r.error("path", f"dataset file {str(p)!r} does not exist")
        r.finish()
        return DataSource(generator="", path=str(p), n_train=0, n_query=0, seed=seed)
    if generator not in GENERATORS:
        raise r.error("generator", f"unknown generator {generator!r}; expected one of {sorted(GENERATORS)}")
    if n_train < 1:
        raise r.error("n_train", f"data.n_train must be >= 1, got {n_train}")
    if n_query < 1:
        raise r.error("n_query", f"data.n_query must be >= 1, got {n_query}")
    options = []
    for key, kind in _GENERATOR_OPTIONS[generator].items():
        if r.has(key):
            options.append((key, r.get(key, None, kind)))
    r.finish()
    return DataSource(generator, "", n_train, n_query, seed, tuple(sorted(options)))


_SGLD_KEYS = {f.name: f for f in fields(SgldConfig) if f.name not in ("weight_mask", "zero_noise")}


def _parse_sgld(r: _Reader | None, n_train: int | None, data_reader: _Reader | None) -> SgldConfig:
    kw = {}
    if r is not None:
        for name, f in _SGLD_KEYS.items():
            kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
            if r.has(name):
                kw[name] = r.get(name, None, kind)
        mask = r.get("weight_mask", None, list)
        if mask is not None:
            if not all(isinstance(v, bool) for v in mask):
                raise r.error("weight_mask", "sgld.weight_mask must be a list of booleans")
            kw["weight_mask"] = tuple(mask)
        r.finish()
    reader = r or data_reader
    cfg = _build(reader, _blame(list(_SGLD_KEYS) + ["weight_mask"]), SgldConfig, **kw)
    if n_train is not None and cfg.batch_size > n_train:
        if "batch_size" in kw:
            raise r.error("batch_size", f"sgld.batch_size = {cfg.batch_size} exceeds data.n_train = {n_train}")
        # the default batch size is larger than the data set: ambiguous, refuse
        raise data_reader.error(
            "n_train", f"data.n_train = {n_train} is smaller than the default sgld.batch_size = "
                       f"{cfg.batch_size}; set sgld.batch_size explicitly")
    return cfg


def _parse_checkpoint(r: _Reader | None) -> CheckpointConfig:
    if r is None:
        return CheckpointConfig()
    cfg = CheckpointConfig(r.get("l2", 0.0, float), r.get("init_scale", 1.0, float), r.get("init_seed", 0, int))
    r.finish()
    if cfg.l2 < 0:
        raise r.error("l2", "checkpoint.l2 must be >= 0")
    if cfg.init_scale < 0:
        raise r.error("init_scale", "checkpoint.init_scale must be >= 0")
    return cfg


def _parse_oracle(r: _Reader | None) -> OracleConfig | None:
    if r is None:
        return None
    gamma = r.get("gamma", None, float)
    beta = r.get("beta", None, float)
    methods = r.get("methods", list(OracleConfig.methods), list)
    r.finish()
    if gamma is not None and gamma < 0:
        raise r.error("gamma", "oracle.gamma must be >= 0")
    if beta is not None and not beta > 0:
        raise r.error("beta", "oracle.beta must be > 0")
    bad = [m for m in methods if m not in ORACLE_METHODS]
    if bad or not methods:
        raise r.error("methods", f"oracle.methods must be a non-empty subset of {ORACLE_METHODS}, got {methods}")
    return OracleConfig(gamma, beta, tuple(methods))


def _parse_lds(r: _Reader | None) -> LdsConfig | None:
    if r is None:
        return None
    rr = r.sub("retrain")
    retrain = RetrainConfig()
    if rr is not None:
        kw = {}
        for f in fields(RetrainConfig):
            kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str) else f.type.__name__]
            if rr.has(f.name):
                kw[f.name] = rr.get(f.name, None, kind)
        rr.finish()
        retrain = _build(rr, _blame(list(kw)), RetrainConfig, **kw)
    kw = {"retrain": retrain}
    for name, kind in (("alpha_retrain", float), ("alpha_attribution", float), ("K", int), ("seed", int)):
        if r.has(name):
            kw[name] = r.get(name, None, kind)
    r.finish()
    return _build(r, _blame(["alpha_retrain", "alpha_attribution", "K", "seed"]), LdsConfig, **kw)


def parse_and_validate(config_text: str, config_dir: str | Path | None = None) -> RunConfig:
    """Parse TOML text into a fully-defaulted :class:`RunConfig`.

    Relative dataset paths resolve against ``config_dir`` when given.
    """
    try:
        raw = tomli.loads(config_text)
    except tomli.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"malformed config: {e}", line=int(m.group(1)) if m else None) from None
    lines = _line_index(config_text)
    top = _Reader(raw, (), lines)
    model_r = top.sub("model")
    if model_r is None:
        raise ConfigError("config requires a [model] table", line=1)
    model = _parse_model(model_r)
    data_r = top.sub("data") or _Reader({}, ("data",), lines)
    data = _parse_data(data_r, Path(config_dir) if config_dir is not None else None)
    sgld = _parse_sgld(top.sub("sgld"), data.n_train if not data.path else None, data_r)
    checkpoint = _parse_checkpoint(top.sub("checkpoint"))
    oracle = _parse_oracle(top.sub("oracle"))
    lds = _parse_lds(top.sub("lds"))
    run_id = top.get("run_id", "run", str)
    if not re.fullmatch(r"[A-Za-z0-9_.\-]+", run_id) or run_id in (".", ".."):
        raise top.error("run_id", f"run_id {run_id!r} must be a plain name (letters, digits, '.', '_', '-')")
    output_dir = top.get("output_dir", "", str)
    per_component = top.get("per_component", False, bool)
    top_k = top.get("top_k", 10, int)
    if top_k < 1:
        raise top.error("top_k", "top_k must be >= 1")
    top.finish()
    if sgld.weight_mask is not None and len(sgld.weight_mask) != model.d:
        raise ConfigError(f"sgld.weight_mask has {len(sgld.weight_mask)} entries, model has {model.d} parameters",
                          line=lines.get(("sgld", "weight_mask")), key="sgld.weight_mask")
    return RunConfig(model, data, sgld, checkpoint, per_component, oracle, lds, output_dir, run_id, top_k)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {str(path)!r}: {e.strerror}") from None
    return parse_and_validate(text, path.parent)


# -- serialization ------------------------------------------------------------------

def _prune(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def to_dict(cfg: RunConfig) -> dict:
    """Fully-resolved plain-data form; ``parse_and_validate`` of its TOML
    rendering gives back an equal config."""
    out = {"run_id": cfg.run_id, "output_dir": cfg.output_dir, "per_component": cfg.per_component,
           "top_k": cfg.top_k, "model": cfg.model.to_dict()}
    d = cfg.data
    out["data"] = ({"path": d.path, "seed": d.seed} if d.path else
                   {"generator": d.generator, "n_train": d.n_train, "n_query": d.n_query, "seed": d.seed,
                    **dict(d.options)})
    s = asdict(cfg.sgld)
    s.pop("zero_noise")
    if s["weight_mask"] is None:
        s.pop("weight_mask")
    else:
        s["weight_mask"] = list(s["weight_mask"])
    out["sgld"] = s
    out["checkpoint"] = asdict(cfg.checkpoint)
    if cfg.oracle is not None:
        o = _prune(asdict(cfg.oracle))
        o["methods"] = list(o["methods"])
        out["oracle"] = o
    if cfg.lds is not None:
        out["lds"] = asdict(cfg.lds)
    return out


def serialize(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def with_overrides(cfg: RunConfig, seed: int | None = None, zero_noise: bool = False,
                   output_dir: str | None = None) -> RunConfig:
    """Apply command-line overrides: ``seed`` replaces the sampler and LDS seeds."""
    sgld = cfg.sgld
    lds = cfg.lds
    if seed is not None:
        sgld = replace(sgld, seed=seed)
        lds = replace(lds, seed=seed) if lds is not None else None
    if zero_noise:
        sgld = replace(sgld, zero_noise=True)
    return replace(cfg, sgld=sgld, lds=lds, output_dir=output_dir if output_dir is not None else cfg.output_dir)
