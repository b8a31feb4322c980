"""INI experiment configuration.

One section per stage; every key is optional and falls back to the defaults
below. Example::

    [run]
    seed = 0

    [data]
    kind = gaussians
    n = 6000
    classes = 2
    overlap = 0.5
    n_labeled = 500
    n_test = 500

    [selection]
    method = lcs-km
    alpha = 0.1
    beta = 0.6

    [output]
    dir = runs/lcs-km
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .. import advtrain, diffusion, models, selection

SELECTION_METHODS = ("none",) + selection.METHODS
SOURCES = ("external", "pregenerated", "guided")
DATA_KINDS = ("gaussians", "rings", "moons", "csv")

# sub-seeds are the global seed plus a fixed per-stage offset
SEED_OFFSETS = {
    "data": 101, "split": 202, "intermediate": 303, "scoring": 404, "selection": 505,
    "ddpm": 606, "finetune": 707, "generation": 808, "ssat": 909, "attack": 1010, "eval": 1111,
}


class ConfigError(ValueError):
    pass


@dataclass
class DataSpec:
    kind: str = "gaussians"
    n: int = 6000
    classes: int = 2
    overlap: float = 0.5
    dim: int = 2
    n_labeled: int = 500
    n_test: int = 500
    path: str = ""
    normalize: bool = True


@dataclass
class SelectionSpec:
    method: str = "lcs-km"
    alpha: float = 0.1
    beta: float = 0.6
    k: int = 0


@dataclass
class AttackSpec:
    norm: str = "linf"
    epsilon: float = 0.05
    step_size: float = 0.0
    steps: int = 10
    eval_steps: int = 40
    eval_step_size: float = 0.0
    random_start: bool = True
    clip: bool = True


@dataclass
class GenerationSpec:
    source: str = "external"
    timesteps: int = 1000
    beta_first: float = 1e-4
    beta_last: float = 0.02
    pretrain_epochs: int = 200
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 128
    pool_size: int = 0


@dataclass
class FinetuneSpec:
    mode: str = "lcg-km"
    lam: float = 0.5
    epochs: int = 15
    lr: float = 0.01
    batch_size: int = 128


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    intermediate: models.IntermediateConfig = field(default_factory=models.IntermediateConfig)
    selection: SelectionSpec = field(default_factory=SelectionSpec)
    train: advtrain.TrainConfig = field(default_factory=advtrain.TrainConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    generation: GenerationSpec = field(default_factory=GenerationSpec)
    finetune: FinetuneSpec = field(default_factory=FinetuneSpec)
    output_dir: str = "runs/default"

    def sub_seed(self, stage: str) -> int:
        return self.seed + SEED_OFFSETS[stage]

    # typed configs for the library layer, seeded per stage

    def intermediate_config(self) -> models.IntermediateConfig:
        return replace(self.intermediate, seed=self.sub_seed("intermediate"))

    def selection_config(self) -> selection.SelectionConfig:
        s = self.selection
        return selection.SelectionConfig(s.method, s.alpha, s.beta, s.k or None, self.sub_seed("scoring"))

    def train_config(self) -> advtrain.TrainConfig:
        cfg = replace(self.train, seed=self.sub_seed("ssat"))
        if self.selection.method == "none":
            cfg = replace(cfg, gamma=1.0)
        return cfg

    def attack_config(self) -> advtrain.AttackConfig:
        a = self.attack
        return advtrain.AttackConfig(a.norm, a.epsilon, a.step_size or None, a.steps,
                                     a.random_start, self.sub_seed("attack"), a.clip)

    def eval_attack_config(self) -> advtrain.AttackConfig:
        a = self.attack
        return advtrain.AttackConfig(a.norm, a.epsilon, a.eval_step_size or a.step_size or None,
                                     a.eval_steps, a.random_start, self.sub_seed("eval"), a.clip)

    def schedule(self) -> diffusion.DiffusionSchedule:
        g = self.generation
        return diffusion.make_schedule(g.timesteps, g.beta_first, g.beta_last)

    def ddpm_config(self) -> diffusion.DDPMConfig:
        g = self.generation
        return diffusion.DDPMConfig(epochs=g.pretrain_epochs, batch_size=g.pretrain_batch_size,
                                    lr=g.pretrain_lr, seed=self.sub_seed("ddpm"))

    def finetune_config(self) -> diffusion.FinetuneConfig:
        f = self.finetune
        return diffusion.FinetuneConfig(f.mode, f.lam, f.epochs, f.lr, f.batch_size,
                                        self.sub_seed("finetune"))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["intermediate"]["hidden"] = list(self.intermediate.hidden)
        out["train"]["hidden"] = list(self.train.hidden)
        return out

    def validate(self) -> "ExperimentConfig":
        d = self.data
        if d.kind not in DATA_KINDS:
            raise ConfigError(f"[data] kind must be one of {DATA_KINDS}")
        if d.kind == "csv" and not Path(d.path).is_file():
            raise ConfigError(f"[data] path {d.path!r} does not exist")
        if d.kind != "csv" and d.n_labeled + d.n_test > d.n:
            raise ConfigError("[data] n_labeled + n_test exceeds n")
        if self.selection.method not in SELECTION_METHODS:
            raise ConfigError(f"[selection] method must be one of {SELECTION_METHODS}")
        if self.generation.source not in SOURCES:
            raise ConfigError(f"[generation] source must be one of {SOURCES}")
        try:
            if self.selection.method != "none":
                self.selection_config()
            self.train_config()
            self.attack_config()
            self.eval_attack_config()
            if self.generation.source != "external":
                self.schedule()
            if self.generation.source == "guided":
                self.finetune_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


# section name -> (attribute on ExperimentConfig, {ini key: field name})
_SECTIONS = {
    "data": ("data", {}),
    "intermediate": ("intermediate", {}),
    "selection": ("selection", {}),
    "train": ("train", {"loss_mode": "loss"}),
    "attack": ("attack", {}),
    "generation": ("generation", {"t": "timesteps"}),
    "ddpm": ("generation", {"t": "timesteps"}),
    "finetune": ("finetune", {"lambda": "lam"}),
}


def _coerce(value: str, current, key: str):
    if isinstance(current, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, tuple):
        try:
            return tuple(int(v) for v in value.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers") from None
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if current is None:
        return int(value) if value.strip() else None
    return value.strip()


def config_from_parser(parser: configparser.ConfigParser, seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section == "run":
            for key, value in parser[section].items():
                if key != "seed":
                    raise ConfigError(f"[run] unknown key {key!r}")
                cfg.seed = _coerce(value, 0, "run.seed")
            continue
        if section == "output":
            for key, value in parser[section].items():
                if key != "dir":
                    raise ConfigError(f"[output] unknown key {key!r}")
                cfg.output_dir = value.strip()
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        attr, aliases = _SECTIONS[section]
        sub = getattr(cfg, attr)
        names = {f.name for f in fields(sub)}
        updates = {}
        for key, value in parser[section].items():
            name = aliases.get(key, key)
            if name not in names or name == "seed":
                raise ConfigError(f"[{section}] unknown key {key!r}")
            updates[name] = _coerce(value, getattr(sub, name), f"{section}.{key}")
        try:
            setattr(cfg, attr, replace(sub, **updates))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = config_from_parser(parser, seed)
    if cfg.data.kind == "csv" and not Path(cfg.data.path).is_absolute():
        cfg.data.path = str((Path(path).parent / cfg.data.path).resolve())
        cfg.validate()
    return cfg


def config_from_text(text: str, seed: int | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    return config_from_parser(parser, seed)


def dump_ini(cfg: ExperimentConfig) -> str:
    """Render a config back to INI text (round-trips through :func:`config_from_text`)."""
    lines = ["[run]", f"seed = {cfg.seed}", ""]
    for section, attr in (("data", "data"), ("intermediate", "intermediate"),
                          ("selection", "selection"), ("train", "train"), ("attack", "attack"),
                          ("generation", "generation"), ("finetune", "finetune")):
        sub = getattr(cfg, attr)
        lines.append(f"[{section}]")
        for f in fields(sub):
            if f.name == "seed":
                continue
            value = getattr(sub, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif value is None:
                value = ""
            key = {"lam": "lambda"}.get(f.name, f.name)
            lines.append(f"{key} = {value}")
        lines.append("")
    lines += ["[output]", f"dir = {cfg.output_dir}", ""]
    return "\n".join(lines)
