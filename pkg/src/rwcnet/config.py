"""Network and run configuration, JSON schema, and eager validation.

Geometry fields (``full_extent`` and every stage entry) have no defaults:
a config that omits them is rejected when it is loaded.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .objectives import PROFILES, LossWeights

ABLATIONS = ("none", "single_res", "no_corr", "short_gru")
HIDDEN_MERGES = ("add", "concat")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    scale: float
    rnn_steps: int
    patch_factor: float
    patches_per_image: int
    training_steps: int


@dataclass(frozen=True)
class NetworkConfig:
    full_extent: tuple[int, int, int]
    stages: tuple[StageConfig, ...]
    feature_channels: int = 16
    hidden_channels: int = 32
    radius: int = 2
    dropout_p: float = 0.5
    hidden_merge: str = "add"
    correlation: bool = True

    @property
    def gru_input_channels(self) -> int:
        if self.correlation:
            return (2 * self.radius + 1) ** 3 + 3 + 1
        return 2 * self.feature_channels + 3 + 1

    def stage_extent(self, i: int, full_extent=None) -> tuple[int, int, int]:
        full = full_extent or self.full_extent
        return tuple(int(round(self.stages[i].scale * s)) for s in full)

    def patch_extent(self, i: int, full_extent=None) -> tuple[int, int, int]:
        full = full_extent or self.full_extent
        return tuple(int(round(self.stages[i].patch_factor * s)) for s in full)

    def downsample_factor(self, i: int) -> int:
        return int(round(1 / self.stages[i].scale))

    def validate(self, full_extent=None) -> None:
        """Check geometry against ``full_extent`` (defaults to the configured one)."""
        full = tuple(full_extent or self.full_extent)
        if len(full) != 3 or min(full) < 1:
            raise ConfigError(f"full_extent must be three positive integers, got {full}")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        prev = 0.0
        for i, st in enumerate(self.stages):
            where = f"stage {i}"
            if st.scale not in (0.25, 0.5, 1.0):
                raise ConfigError(f"{where}: scale must be 0.25, 0.5 or 1, got {st.scale}")
            if st.scale <= prev:
                raise ConfigError(f"{where}: scales must increase coarse to fine")
            prev = st.scale
            if st.rnn_steps < 1:
                raise ConfigError(f"{where}: rnn_steps must be >= 1")
            if st.training_steps < 0:
                raise ConfigError(f"{where}: training_steps must be >= 0")
            if not 0 < st.patch_factor <= st.scale:
                raise ConfigError(f"{where}: patch_factor must lie in (0, scale], got {st.patch_factor}")
            stage_ext, patch_ext = [], []
            for s in full:
                se, pe = st.scale * s, st.patch_factor * s
                if not (float(se).is_integer() and float(pe).is_integer()):
                    raise ConfigError(
                        f"{where}: scale·S={se} and patch_factor·S={pe} must be whole voxels for S={s}"
                    )
                stage_ext.append(int(se))
                patch_ext.append(int(pe))
            if any(se % pe for se, pe in zip(stage_ext, patch_ext)):
                raise ConfigError(f"{where}: patch extent {tuple(patch_ext)} must divide stage extent {tuple(stage_ext)}")
            n = math.prod(se // pe for se, pe in zip(stage_ext, patch_ext))
            if n != st.patches_per_image:
                raise ConfigError(f"{where}: geometry gives {n} patches per image, config says {st.patches_per_image}")
            if min(patch_ext) < 2:
                raise ConfigError(f"{where}: patches must be at least 2 voxels per axis, got {tuple(patch_ext)}")
        if self.feature_channels < 1 or self.hidden_channels < 2 or self.hidden_channels % 2:
            raise ConfigError("feature_channels must be >= 1 and hidden_channels a positive even number")
        if self.radius < 1:
            raise ConfigError(f"radius must be >= 1, got {self.radius}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.hidden_merge not in HIDDEN_MERGES:
            raise ConfigError(f"hidden_merge must be one of {HIDDEN_MERGES}")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig
    loss_profile: str = "mse+tre"
    loss_weights: LossWeights = field(default_factory=lambda: PROFILES["mse+tre"])
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    ablation: str = "none"
    augment: bool = False  # random flips/axis permutations of each training sample

    def validate(self) -> None:
        self.network.validate()
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.optimizer.lr <= 0:
            raise ConfigError("optimizer.lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"]["full_extent"] = list(self.network.full_extent)
        d["network"]["stages"] = [asdict(s) for s in self.network.stages]
        return d


_STAGE_KEYS = {f for f in StageConfig.__dataclass_fields__}
_NET_KEYS = set(NetworkConfig.__dataclass_fields__)


def _network_from_dict(d: dict) -> NetworkConfig:
    unknown = set(d) - _NET_KEYS
    if unknown:
        raise ConfigError(f"unknown network keys: {sorted(unknown)}")
    for key in ("full_extent", "stages"):
        if key not in d:
            raise ConfigError(f"network.{key} is required (geometry has no defaults)")
    stages = []
    for i, s in enumerate(d["stages"]):
        missing = _STAGE_KEYS - set(s)
        extra = set(s) - _STAGE_KEYS
        if missing or extra:
            raise ConfigError(f"stage {i}: missing {sorted(missing)}, unknown {sorted(extra)}")
        stages.append(
            StageConfig(
                scale=float(s["scale"]),
                rnn_steps=int(s["rnn_steps"]),
                patch_factor=float(s["patch_factor"]),
                patches_per_image=int(s["patches_per_image"]),
                training_steps=int(s["training_steps"]),
            )
        )
    kwargs = {k: v for k, v in d.items() if k not in ("full_extent", "stages")}
    return NetworkConfig(full_extent=tuple(int(e) for e in d["full_extent"]), stages=tuple(stages), **kwargs)


def run_config_from_dict(d: dict) -> RunConfig:
    allowed = {"network", "loss_profile", "loss_weights", "optimizer", "seed", "ablation", "augment"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "network" not in d:
        raise ConfigError("config needs a 'network' section")
    network = _network_from_dict(d["network"])
    profile = d.get("loss_profile", "mse+tre")
    if profile not in PROFILES:
        raise ConfigError(f"loss_profile must be one of {sorted(PROFILES)}, got {profile!r}")
    try:
        weights = replace(PROFILES[profile], **d.get("loss_weights", {}))
        optimizer = OptimizerConfig(**d.get("optimizer", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(
        network=network,
        loss_profile=profile,
        loss_weights=weights,
        optimizer=optimizer,
        seed=int(d.get("seed", 0)),
        ablation=d.get("ablation", "none"),
        augment=bool(d.get("augment", False)),
    )
    cfg.validate()
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return run_config_from_dict(raw)


def save_run_config(cfg: RunConfig, path: str | Path, **extra) -> None:
    d = cfg.to_dict()
    d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def apply_ablation(cfg: RunConfig, variant: str) -> RunConfig:
    """Return ``cfg`` modified for one of the architecture ablations."""
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {ABLATIONS}")
    net = cfg.network
    if variant == "single_res":
        net = replace(net, stages=net.stages[:1])
    elif variant == "no_corr":
        net = replace(net, correlation=False)
    elif variant == "short_gru":
        net = replace(net, stages=tuple(replace(s, rnn_steps=2) for s in net.stages))
    out = replace(cfg, network=net, ablation=variant)
    out.validate()
    return out


def table1_config(full_extent=(224, 192, 224)) -> RunConfig:
    """The three-resolution schedule of the original training runs."""
    stages = (
        StageConfig(0.25, 12, 0.25, 1, 30000),
        StageConfig(0.5, 12, 0.25, 8, 45000),
        StageConfig(1.0, 4, 0.5, 8, 60000),
    )
    cfg = RunConfig(network=NetworkConfig(full_extent=tuple(full_extent), stages=stages))
    cfg.validate()
    return cfg


def smoke_config(full_extent=(32, 32, 32)) -> RunConfig:
    """Desk-scale schedule: quarter and half resolution only, 1500 steps each."""
    stages = (
        StageConfig(0.25, 12, 0.25, 1, 1500),
        StageConfig(0.5, 12, 0.25, 8, 1500),
    )
    net = NetworkConfig(
        full_extent=tuple(full_extent), stages=stages, feature_channels=8, hidden_channels=16, dropout_p=0.0
    )
    # 16 training pairs are memorised under the default keypoint-heavy weights;
    # image matching has to dominate the loss for the network to generalise
    cfg = RunConfig(
        network=net,
        loss_weights=LossWeights(1.0, 0.0, 0.005, 0.005),
        optimizer=OptimizerConfig(lr=1e-3),
        augment=True,
    )
    cfg.validate()
    return cfg
