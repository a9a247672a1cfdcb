"""Run configuration: one JSON document drives generation, training, inference and evaluation."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .augmentation import FoveationConfig
from .networks import SW_CNN, UNET_D, UNET_S
from .pipelines import PIPELINES
from .sampling import OBJECT, UNIFORM, AugmentConfig
from .synthetic import SyntheticSpec
from .training import TrainingConfig

DESK, PAPER = "desk", "paper"
PROFILES = (DESK, PAPER)


@dataclass
class ModelSettings:
    """How one network type is shaped, sampled and trained."""

    base_width: int
    train_tile: int | None = None  # FCN training input size (None: SW-CNN)
    infer_tile: int | None = None
    n_raw: int = 100
    n_val: int = 20
    ratio: int = 4
    fc_units: int = 200
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["training"] = self.training.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSettings":
        d = dict(d)
        d["training"] = TrainingConfig.from_dict(d.get("training", {}))
        return cls(**d)


@dataclass
class RunConfig:
    name: str = "desk"
    profile: str = DESK
    pipelines: list[str] = field(default_factory=lambda: sorted(PIPELINES))
    n_wsis: int = 8
    n_folds: int = 4
    seed: int = 0
    device: str = "cpu"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    models: dict[str, ModelSettings] = field(default_factory=dict)
    elastic_fcn: bool = True
    elastic_sw: bool = True
    elastic_grid: int = 8
    max_displacement: float = 12.0
    foveation: FoveationConfig = field(default_factory=FoveationConfig)
    sw_step: int = 5
    candidate_dilation: int = 8
    min_area: int = 20_000  # at the 300 px reference diameter
    max_area: int = 200_000

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        unknown = set(self.pipelines) - set(PIPELINES)
        if unknown:
            raise ValueError(f"unknown pipelines {sorted(unknown)}")
        if self.device != "cpu":
            raise ValueError("only the cpu device is supported")

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.elastic_fcn, self.elastic_sw, self.elastic_grid, self.max_displacement, self.foveation)

    def wsi_ids(self) -> list[str]:
        return [f"wsi_{i:02d}" for i in range(self.n_wsis)]

    def wsi_spec(self, index: int) -> SyntheticSpec:
        spec = copy.deepcopy(self.synthetic)
        spec.seed = self.synthetic.seed + 1000 * self.seed + index
        return spec

    def required_models(self) -> list[tuple[str, str]]:
        """Distinct (network, strategy) pairs; the object-trained U-Net-D is shared."""
        out = []
        for p in self.pipelines:
            for m in PIPELINES[p].models():
                if m not in out:
                    out.append(m)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synthetic"] = self.synthetic.to_dict()
        d["models"] = {k: v.to_dict() for k, v in self.models.items()}
        d["foveation"] = asdict(self.foveation)
        d["foveation"]["sigma_range"] = list(self.foveation.sigma_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["synthetic"] = SyntheticSpec.from_dict(d.get("synthetic", {}))
        d["models"] = {k: ModelSettings.from_dict(v) for k, v in d.get("models", {}).items()}
        fov = dict(d.get("foveation", {}))
        if "sigma_range" in fov:
            fov["sigma_range"] = tuple(fov["sigma_range"])
        d["foveation"] = FoveationConfig(**fov)
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def model_key(network: str, strategy: str) -> str:
    short = {OBJECT: "object", UNIFORM: "uniform"}[strategy]
    return f"{network}-{short}"


def desk_profile() -> RunConfig:
    """CPU-sized profile: 8 small slides, 4 folds, narrow networks, few epochs."""
    fcn = dict(learning_rate=1e-3, epochs=5, batch_size=5)
    return RunConfig(
        name="desk",
        profile=DESK,
        n_wsis=8,
        n_folds=4,
        synthetic=SyntheticSpec(width=2000, height=1600, n_objects=14, diameter_mean=100.0, diameter_std=15.0,
                                medulla_fraction=0.35, n_distractors=10, noise_scales=(48.0, 12.0, 3.0)),
        models={
            UNET_D: ModelSettings(8, 284, 492, n_raw=48, n_val=12, ratio=4, training=TrainingConfig(**fcn)),
            UNET_S: ModelSettings(8, 132, 492, n_raw=48, n_val=12, ratio=4, training=TrainingConfig(**fcn)),
            SW_CNN: ModelSettings(16, n_raw=400, n_val=100, ratio=4,
                                  training=TrainingConfig(learning_rate=1e-3, epochs=5, batch_size=100)),
        },
        max_displacement=4.0,
    )


def paper_profile() -> RunConfig:
    """Counts, widths and optimiser settings of the original protocol (needs serious hardware)."""
    return RunConfig(
        name="paper",
        profile=PAPER,
        n_wsis=24,
        n_folds=8,
        synthetic=SyntheticSpec(),
        models={
            UNET_D: ModelSettings(64, 492, 492, n_raw=2700, n_val=450, ratio=4, training=TrainingConfig(batch_size=5)),
            UNET_S: ModelSettings(64, 492, 492, n_raw=2700, n_val=450, ratio=10, training=TrainingConfig(batch_size=5)),
            SW_CNN: ModelSettings(48, n_raw=3600, n_val=600, ratio=240, training=TrainingConfig(batch_size=100)),
        },
    )


def profile(name: str) -> RunConfig:
    if name == DESK:
        return desk_profile()
    if name == PAPER:
        return paper_profile()
    raise ValueError(f"unknown profile {name!r}; choose from {PROFILES}")


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``dotted.key=value`` overrides (values parsed as JSON when possible)."""
    d = cfg.to_dict()
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form key=value")
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise KeyError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = _coerce(value)
    return RunConfig.from_dict(d)
