"""Run configuration: a flat ``key = value`` text format with ``#`` comments.

Every key has a documented default (see ``SCHEMA``); unknown keys are errors.
Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import STAGES
from .model import ModelConfig, linear_betas
from .training import DEFAULT_LR, LR_DECAYS, StagePlan, default_plans


class ConfigError(ValueError):
    pass


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _stages(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


# key -> (parser, default, description)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0, "global seed; sub-streams are derived per component"),
    "out_dir": (str, "runs", "root for checkpoints, metrics, reports"),
    "data.root": (str, "data", "dataset directory"),
    "data.n": (int, 1000, "number of scenes for gen-scenes"),
    "data.split": (_floats, (0.8, 0.1, 0.1), "train,val,test ratios"),
    "data.canvas": (int, 64, "square canvas size"),
    "pipeline.root": (str, "pipeline", "output directory of run-pipeline"),
    "pipeline.augment_strength": (float, 0.5, "object augmentation strength in the pipeline"),
    "model.channels": (_ints, (32, 64, 96), "U-Net channel widths per level"),
    "model.time_dim": (int, 64, "timestep embedding width"),
    "model.attn_dim": (int, 32, "cross-attention width"),
    "model.groups": (int, 8, "GroupNorm groups"),
    "model.encoder_input": (int, 32, "object encoder input resolution"),
    "model.token_dim": (int, 128, "token dimension D"),
    "model.combine": (str, "average", "multiscale token combination: average | concatenate"),
    "model.bg_gate": (_bool, ModelConfig.bg_gate, "gated background-copy term in the eps head"),
    "model.film": (_bool, ModelConfig.film, "timestep embedding as scale and shift instead of a bias"),
    "schedule.T": (int, 1000, "diffusion steps"),
    "schedule.beta_start": (float, 1e-4, "first beta"),
    "schedule.beta_end": (float, 0.02, "last beta"),
    "train.stages": (_stages, STAGES[1:], "stages run by train --stage all"),
    "train.steps": (int, 2000, "steps per stage unless overridden"),
    "train.batch_size": (int, 16, "batch size"),
    "train.encoder_steps": (int, -1, "S2 encoder fine-tuning steps (-1: a quarter of S2's steps)"),
    "train.lr.unet": (float, DEFAULT_LR["unet"], "U-Net learning rate"),
    "train.lr.encoder": (float, DEFAULT_LR["encoder"], "object encoder learning rate"),
    "train.lr.adaptor": (float, DEFAULT_LR["adaptor"], "content adaptor learning rate"),
    "train.lr.mask_head": (float, DEFAULT_LR["mask_head"], "mask head learning rate"),
    "train.lr_decay": (str, "constant", "per-phase lr schedule: constant | cosine"),
    "train.augment_strength": (float, 0.0, "augmentation strength for standard-mode conditioning"),
    "train.paired_strength": (float, 0.5, "augmentation strength for paired views (S2)"),
    "train.mask_target": (str, "object", "mask head target: object | object_effects"),
    "train.log_every": (int, 10, "metrics.csv row interval"),
    "train.ckpt_every": (int, 0, "periodic checkpoint interval (0: final only)"),
    "train.s3.alpha": (float, 0.25, "merge weight of S1 in S3 = alpha*S1 + (1-alpha)*S2"),
    "sampler.steps": (int, 50, "reverse diffusion steps"),
    "sampler.n": (int, 5, "samples per input for diverse sampling"),
    "eval.split": (str, "test", "dataset split to evaluate"),
    "eval.limit": (int, 100, "maximum number of scenes (0: all)"),
    "eval.identity_mask": (str, "predicted", "crop the identity proxy around: predicted | gt"),
    "eval.early_step": (int, 10, "step whose mask is compared with the final mask"),
}
for _tag in STAGES[1:]:
    SCHEMA[f"train.{_tag.lower()}.steps"] = (int, -1, f"{_tag} steps (-1: train.steps)")

PATH_KEYS = ("out_dir", "data.root", "pipeline.root")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, key: str):
        return self.values[key]

    def path(self, key: str) -> Path:
        p = Path(self.values[key])
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(canvas=v["data.canvas"], channels=v["model.channels"], time_dim=v["model.time_dim"],
                           attn_dim=v["model.attn_dim"], groups=v["model.groups"],
                           encoder_input=v["model.encoder_input"], token_dim=v["model.token_dim"],
                           combine=v["model.combine"], bg_gate=v["model.bg_gate"], film=v["model.film"])

    def betas(self) -> np.ndarray:
        v = self.values
        return linear_betas(v["schedule.T"], v["schedule.beta_start"], v["schedule.beta_end"])

    def plans(self) -> list[StagePlan]:
        v = self.values
        lrs = {g: v[f"train.lr.{g}"] for g in DEFAULT_LR}
        enc = None if v["train.encoder_steps"] < 0 else v["train.encoder_steps"]
        out = []
        for p in default_plans(v["train.steps"], v["train.batch_size"]):
            steps = v[f"train.{p.stage_tag.lower()}.steps"]
            steps = v["train.steps"] if steps < 0 else steps
            kw = dict(steps=steps, learning_rates=lrs, augment_strength=v["train.augment_strength"],
                      paired_strength=v["train.paired_strength"], mask_target=v["train.mask_target"],
                      ckpt_every=v["train.ckpt_every"], lr_decay=v["train.lr_decay"])
            if p.stage_tag == "S2":
                kw["encoder_steps"] = steps // 4 if enc is None else enc
            out.append(replace(p, **kw))
        return [p for p in out if p.stage_tag in v["train.stages"]]

    def resolved_text(self) -> str:
        lines = ["# fully resolved configuration"]
        for key in sorted(self.values):
            lines.append(f"{key} = {_format(self.values[key])}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory: Path | str) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        path = d / "config.resolved"
        path.write_text(self.resolved_text())
        return path


def validate(cfg: RunConfig) -> None:
    v = cfg.values
    stages = v["train.stages"]
    order = [STAGES.index(s) if s in STAGES[1:] else -1 for s in stages]
    if -1 in order:
        raise ConfigError(f"train.stages: unknown stage in {stages}")
    if order != sorted(set(order)):
        raise ConfigError(f"train.stages must be ordered S1->S6 without duplicates, got {stages}")
    split = v["data.split"]
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"data.split must be three ratios summing to 1, got {split}")
    if v["model.combine"] not in ("average", "concatenate"):
        raise ConfigError(f"model.combine must be average or concatenate, got {v['model.combine']!r}")
    if v["train.lr_decay"] not in LR_DECAYS:
        raise ConfigError(f"train.lr_decay must be one of {LR_DECAYS}, got {v['train.lr_decay']!r}")
    if v["eval.identity_mask"] not in ("predicted", "gt"):
        raise ConfigError(f"eval.identity_mask must be predicted or gt, got {v['eval.identity_mask']!r}")
    if not 0.0 <= v["train.s3.alpha"] <= 1.0:
        raise ConfigError(f"train.s3.alpha must lie in [0, 1], got {v['train.s3.alpha']}")
    if v["sampler.steps"] < 1 or v["sampler.n"] < 2:
        raise ConfigError("sampler.steps must be >= 1 and sampler.n >= 2")
    for key in PATH_KEYS:
        p = cfg.path(key)
        parent = p if p.exists() else p.parent
        while not parent.exists():
            parent = parent.parent
        if not parent.is_dir():
            raise ConfigError(f"{key}: {p} is not resolvable to a directory")


def parse_config(text: str, base_dir: Path | str | None = None, source: str = "<config>") -> RunConfig:
    cfg = RunConfig(base_dir=Path(base_dir) if base_dir is not None else Path.cwd())
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        parser = SCHEMA[key][0]
        try:
            cfg.values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    validate(cfg)
    return cfg


def load_config(path: Path | str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        validate(cfg)
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(), base_dir=p.parent.resolve(), source=str(p))
