"""Pipeline configuration: YAML file + command-line overrides (flags win)."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from ._binio import digest
from .augment import MaskConfig
from .encoder import ConvStage, EncoderSpec
from .errors import ValidationError
from .superlet import SuperletConfig, default_freqs
from .trainer import TrainConfig

DEFAULTS = {
    "paths": {"manifest": None, "transcript": None, "embeddings": None, "embed_endpoint": None,
              "workdir": "work", "cache_dir": None},
    "preprocess": {"max_dur_s": 4.0, "pre_s": 0.5, "post_s": 1.0, "target_len": 8200},
    "superlet": {"freqs_hz": None, "base_cycles": 3.0, "order_min": 1, "order_max": 7,
                 "decimation": 32},
    "augment": {"r_f": 0.0, "r_t": 0.0, "r_e": 0.0, "seed": 0},
    "encoder": {"stages": None, "hidden": 256},
    "train": {"temperature": 0.07, "learning_rate": 0.0005, "batch_size": 32, "max_epochs": 100,
              "patience": 5, "seed": 0, "symmetric": False, "val_pool": "val", "beta1": 0.9,
              "beta2": 0.999, "eps": 1e-8},
    "eval": {"ks": [1, 10, 50], "candidate_pool": "test"},
    "protocol": {"seeds": list(range(10))},
}

# sections that determine results; paths are excluded so relocated runs match
DIGEST_SECTIONS = ("preprocess", "superlet", "augment", "encoder", "train", "eval")


def _merge(base: dict, extra: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for key, val in (extra or {}).items():
        if key not in base:
            raise ValidationError(f"unknown config key {where + str(key)!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def parse_assignment(text: str):
    """``section.key=value`` with the value parsed as YAML."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ValidationError(f"override must look like section.key=value, got {text!r}")
    dotted, raw = text.split("=", 1)
    section, key = dotted.split(".", 1)
    return section, key, yaml.safe_load(raw)


@dataclass
class PipelineConfig:
    data: dict
    base_dir: Path

    @classmethod
    def load(cls, path=None, overrides=()) -> "PipelineConfig":
        raw = {}
        base_dir = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ValidationError(f"config file not found: {path}")
            try:
                raw = yaml.safe_load(path.read_text()) or {}
            except yaml.YAMLError as exc:
                raise ValidationError(f"{path}: invalid YAML ({exc})") from exc
            if not isinstance(raw, dict):
                raise ValidationError(f"{path}: top level must be a mapping")
            base_dir = path.resolve().parent
        data = _merge(DEFAULTS, raw)
        for section, key, value in overrides:
            data = _merge(data, {section: {key: value}})
        cfg = cls(data, base_dir)
        cfg.validate()
        return cfg

    def __getitem__(self, section) -> dict:
        return self.data[section]

    def set(self, section, key, value):
        self.data = _merge(self.data, {section: {key: value}})

    def validate(self):
        ks = self["eval"]["ks"]
        if not ks or list(ks) != sorted(ks) or len(set(ks)) != len(ks) or min(ks) < 1:
            raise ValidationError(f"eval.ks must be strictly ascending positive integers, got {ks}")
        if self["eval"]["candidate_pool"] not in ("test", "all"):
            raise ValidationError("eval.candidate_pool must be 'test' or 'all'")
        self.mask_config()
        self.train_config()

    def path(self, key) -> Path | None:
        value = self["paths"][key]
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def require_path(self, key) -> Path:
        p = self.path(key)
        if p is None:
            raise ValidationError(f"paths.{key} is not set")
        if not p.exists():
            raise ValidationError(f"paths.{key}: {p} does not exist")
        return p

    @property
    def workdir(self) -> Path:
        return self.path("workdir")

    def superlet_config(self, sample_rate_hz: float) -> SuperletConfig:
        s = dict(self["superlet"])
        s["freqs_hz"] = tuple(s["freqs_hz"]) if s["freqs_hz"] else default_freqs()
        return SuperletConfig(sample_rate_hz=float(sample_rate_hz), **s)

    def mask_config(self) -> MaskConfig:
        return MaskConfig(**self["augment"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(mask=self.mask_config(), **self["train"])

    def encoder_spec(self, n_freqs: int) -> EncoderSpec:
        e = self["encoder"]
        seed = self["train"]["seed"]
        if e["stages"] is None:
            spec = EncoderSpec.default(n_freqs, seed=seed)
            return EncoderSpec(spec.stages, e["hidden"], seed=seed)
        stages = []
        for st in e["stages"]:
            st = dict(st)
            # "F" in a kernel extent stands for the full frequency axis
            st["kernel"] = [n_freqs if k == "F" else k for k in st["kernel"]]
            stages.append(ConvStage(**st))
        return EncoderSpec(tuple(stages), e["hidden"], seed=seed)

    def digest(self) -> str:
        return digest({k: self.data[k] for k in DIGEST_SECTIONS})

    def resolved(self) -> dict:
        return copy.deepcopy(self.data)
