"""Run configuration: ``key = value`` files with one section per module.

Resolution order, later wins: built-in defaults, config file, the
``MFCCA_SEED`` environment variable (seed only), command-line flags.
Every command writes the resolved configuration back out in the same
format, so a run can be repeated from its echo alone.
"""

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ContractError
from .model import ModelConfig, preset
from .sim import CorpusConfig
from .train import TrainConfig

SECTIONS = ("run", "data", "model", "train", "mask")


def _parse_range(text, cast):
    text = str(text).strip()
    for sep in ("-", ":", ","):
        if sep in text[1:]:
            i = text.index(sep, 1)
            return (cast(text[:i]), cast(text[i + 1:]))
    v = cast(text)
    return (v, v)


def _coerce(value, like):
    if isinstance(like, bool):
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"expected a boolean, got {value!r}")
    if isinstance(like, tuple):
        return _parse_range(value, type(like[0]))
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return str(value)


def _apply(obj, values, section):
    names = {f.name for f in fields(obj)}
    updates = {}
    for key, raw in values.items():
        if key not in names:
            raise ContractError(f"unknown key {key!r} in section [{section}]")
        try:
            updates[key] = _coerce(raw, getattr(obj, key))
        except ValueError as exc:
            raise ContractError(f"bad value for {section}.{key}: {raw!r}") from exc
    return replace(obj, **updates)


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"
    jobs: int = 1
    data: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    # convenience views of the knobs the experiments turn
    @property
    def F(self):
        return self.model.context

    @property
    def mask_prob(self):
        return self.train.mask_prob

    def resolved(self):
        """Propagate the run seed into the data and training sections."""
        return replace(self, data=replace(self.data, seed=self.seed),
                       train=replace(self.train, seed=self.seed))

    def to_ini(self):
        cp = configparser.ConfigParser()
        cp["run"] = {"preset": self.preset, "seed": str(self.seed), "data_dir": self.data_dir,
                     "out_dir": self.out_dir, "jobs": str(self.jobs)}
        for name, obj in (("data", self.data), ("model", self.model)):
            cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj) if f.name != "seed"}
        cp["train"] = {f.name: _fmt(getattr(self.train, f.name)) for f in fields(self.train)
                       if f.name not in ("seed", "mask_prob")}
        cp["mask"] = {"mask_prob": _fmt(self.train.mask_prob)}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)

    def write(self, path):
        Path(path).write_text(self.to_ini(), encoding="utf-8")


def _fmt(v):
    if isinstance(v, tuple):
        return f"{v[0]!r}-{v[1]!r}" if not isinstance(v[0], float) else f"{v[0]!r}:{v[1]!r}"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load(path=None, overrides=None, env=None):
    """Build a RunConfig from an optional file and ``{section: {key: value}}`` overrides."""
    env = os.environ if env is None else env
    file_values = {s: {} for s in SECTIONS}
    if path:
        cp = configparser.ConfigParser()
        try:
            read = cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ContractError(f"cannot parse config {path}: {exc}") from exc
        if not read:
            raise ContractError(f"config file {path} not found")
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ContractError(f"unknown config section [{sec}]")
            file_values[sec].update(cp[sec])
    if "MFCCA_SEED" in env and env["MFCCA_SEED"] != "":
        file_values["run"]["seed"] = env["MFCCA_SEED"]
    for sec, vals in (overrides or {}).items():
        file_values.setdefault(sec, {}).update({k: v for k, v in vals.items() if v is not None})

    run = dict(file_values["run"])
    unknown = set(run) - {"preset", "seed", "data_dir", "out_dir", "jobs"}
    if unknown:
        raise ContractError(f"unknown key(s) {sorted(unknown)} in section [run]")
    name = run.get("preset", "desk")
    try:
        cfg = RunConfig(
            preset=name,
            seed=int(run.get("seed", 0)),
            data_dir=run.get("data_dir", "data"),
            out_dir=run.get("out_dir", "runs/default"),
            jobs=int(run.get("jobs", 1)),
            model=preset(name),
        )
    except ValueError as exc:
        raise ContractError(f"bad value in section [run]: {exc}") from exc
    if name == "paper":
        cfg.train = replace(cfg.train, smoothing=0.1)
    cfg.data = _apply(cfg.data, file_values["data"], "data")
    cfg.model = _apply(cfg.model, file_values["model"], "model")
    cfg.train = _apply(cfg.train, {**file_values["train"], **file_values["mask"]}, "train/mask")
    if cfg.jobs < 1:
        raise ContractError("jobs must be >= 1")
    return cfg.resolved()
