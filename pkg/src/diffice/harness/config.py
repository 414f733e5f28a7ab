"""Experiment configuration: defaults in code, JSON files override, CLI flags override both."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .. import synthdata as sd
from ..guidance import GuidanceConfig, SEARCH_MODES

METHODS = ("diff_ice", "diff_ice_1", "diff_ice_1_xt")
ABLATION = "ablation"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 1500
    n_test: int = 300
    class_balance: typing.Union[str, float] = "paper"


@dataclass
class DenoiserConfig:
    T_train: int = 1000
    T_sample: int = 400
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 100
    widths: list[int] = field(default_factory=lambda: [16, 32, 32])
    emb_dim: int = 32


@dataclass
class FitConfig:
    iterations: int = 600
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 50
    noise_aug: float = 0.0
    flip_aug: bool = False


@dataclass
class TrainingConfig:
    segmenter: FitConfig = field(default_factory=FitConfig)
    predictor: FitConfig = field(default_factory=FitConfig)
    oracle: FitConfig = field(default_factory=lambda: FitConfig(iterations=800, noise_aug=0.05, flip_aug=True))
    features: FitConfig = field(default_factory=lambda: FitConfig(iterations=600, noise_aug=0.05, flip_aug=True))
    feature_dim: int = 64


# Strengths are tuned for 224x288 inputs; g is rescaled by the pixel-count ratio.
REFERENCE_SHAPE = (224, 288)
DESK_RESOLUTION_SCALE = sd.H * sd.W / (REFERENCE_SHAPE[0] * REFERENCE_SHAPE[1])


@dataclass
class GuidanceDefaults:
    L: int = 5
    tau: int = 120
    lambda_p: float = 30.0
    lambda_c_candidates: list[float] = field(default_factory=lambda: [40.0, 60.0, 80.0])
    redraw_noise: bool = True
    search: str = "per_image"
    resolution_scale: float = DESK_RESOLUTION_SCALE


@dataclass
class AblationConfig:
    taus: list[int] = field(default_factory=lambda: [80, 120, 160, 200])
    lambda_c_fixed: float = 400.0
    lambda_c_fixed_tau: int = 120


@dataclass
class GenerateConfig:
    methods: list[str] = field(default_factory=lambda: ["diff_ice", "diff_ice_1", "diff_ice_1_xt"])
    n_images: typing.Optional[int] = None  # cap on NSP test images; None uses all
    batch_size: int = 10
    jobs: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    guidance: GuidanceDefaults = field(default_factory=GuidanceDefaults)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def section_hash(self, *names: str) -> str:
        """Hash of the seed plus the named sections; stages key their manifests on it."""
        d = self.to_dict()
        payload = {"seed": self.seed, **{n: d[n] for n in names}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    # -- derived guidance configs ----------------------------------------------------
    def guidance_for(self, method: str) -> GuidanceConfig:
        g = self.guidance
        base = GuidanceConfig(tau=g.tau, lambda_c=g.lambda_c_candidates[0], lambda_p=g.lambda_p, L=g.L,
                              lambda_c_candidates=tuple(g.lambda_c_candidates), redraw_noise=g.redraw_noise,
                              search=g.search, resolution_scale=g.resolution_scale)
        if method == "diff_ice":
            return base
        if method == "diff_ice_1":
            return dataclasses.replace(base, L=1)
        if method == "diff_ice_1_xt":
            return dataclasses.replace(base, L=1, grad_mode="noisy")
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")

    def ablation_cells(self) -> list[tuple[str, dict, GuidanceConfig]]:
        """(cell name, table parameters, config) for every single-iteration ablation cell."""
        base = self.guidance_for("diff_ice_1")
        cells = []
        for tau in self.ablation.taus:
            for lp in (True, False):
                cells.append((f"tau{tau}_lp{int(lp)}", {"tau": tau, "L_p": "on" if lp else "off",
                                                        "lambda_c": "search"},
                              dataclasses.replace(base, tau=tau, use_perceptual=lp)))
        lc = self.ablation.lambda_c_fixed
        tau = self.ablation.lambda_c_fixed_tau
        cells.append((f"tau{tau}_lp1_lc{lc:g}", {"tau": tau, "L_p": "on", "lambda_c": f"{lc:g}"},
                      dataclasses.replace(base, tau=tau, lambda_c=lc, lambda_c_candidates=(lc,))))
        return cells

    def validate(self) -> "ExperimentConfig":
        d = self.denoiser
        if d.T_train < 2 or not 1 <= d.T_sample <= d.T_train:
            raise ConfigError(f"need 1 <= T_sample <= T_train, got {d.T_sample}, {d.T_train}")
        if self.data.n_train < 1 or self.data.n_test < 1:
            raise ConfigError("data.n_train and data.n_test must be positive")
        if isinstance(self.data.class_balance, str) and self.data.class_balance != "paper":
            raise ConfigError(f"class_balance must be 'paper' or a float, got {self.data.class_balance!r}")
        if self.guidance.search not in SEARCH_MODES:
            raise ConfigError(f"guidance.search must be one of {SEARCH_MODES}")
        for m in self.generate.methods:
            if m not in METHODS and m != ABLATION:
                raise ConfigError(f"unknown method {m!r}; expected one of {METHODS + (ABLATION,)}")
        if self.generate.batch_size < 1 or self.generate.jobs < 1:
            raise ConfigError("generate.batch_size and generate.jobs must be >= 1")
        if self.generate.n_images is not None and self.generate.n_images < 1:
            raise ConfigError("generate.n_images must be >= 1 or null")
        try:
            for m in METHODS:
                self.guidance_for(m).validate(d.T_sample)
            for _, _, cfg in self.ablation_cells():
                cfg.validate(d.T_sample)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


# -- construction from nested dicts ------------------------------------------------------
def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{path}.{f.name}".lstrip("."))
    return cls(**kwargs)


def _coerce(tp, value, path: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, path)
            except ConfigError:
                pass
        raise ConfigError(f"{path}: {value!r} matches none of {args}")
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported type {tp}")


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "").validate()


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


SMOKE = {
    "data": {"n_train": 300, "n_test": 60},
    "denoiser": {"iterations": 150, "T_sample": 20, "widths": [8, 16, 16], "emb_dim": 16},
    "training": {"segmenter": {"iterations": 60}, "predictor": {"iterations": 60},
                 "oracle": {"iterations": 60}, "features": {"iterations": 60}, "feature_dim": 16},
    "guidance": {"L": 2, "tau": 8},
    "ablation": {"taus": [4, 8], "lambda_c_fixed_tau": 8},
    "generate": {"n_images": 4, "batch_size": 2, "methods": ["diff_ice", "diff_ice_1", "diff_ice_1_xt", "ablation"]},
}

PROFILES = {"default": {}, "smoke": SMOKE}


def load_config(path: str | Path | None = None, overrides: dict | None = None,
                profile: str = "default") -> ExperimentConfig:
    """Defaults, then a profile, then the JSON file at ``path``, then ``overrides``."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    data = _merge(ExperimentConfig().to_dict(), PROFILES[profile])
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            file_data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(file_data, dict):
            raise ConfigError(f"config {path}: top level must be an object")
        data = _merge(data, file_data)
    data = _merge(data, overrides or {})
    return from_dict(data)
