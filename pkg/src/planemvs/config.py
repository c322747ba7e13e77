"""Run configuration: TOML sections mapped onto the per-module settings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .errors import ConfigError
from .fusion_eval import FusionConfig
from .patchmatch import PatchMatchConfig, ViewConfig
from .photoconsistency import MatchWindow
from .refinement import FillConfig, SpeckleConfig
from .texture_prior import FIT_MIN_TEXTURENESS, PriorConfig, RansacConfig


@dataclass
class PhotoSection:
    half_size: int = 5
    sigma_spatial: float = 3.0
    sigma_color: float = 0.12
    sigma_rho: float = 0.6
    psi_max: float = 3.0


@dataclass
class PatchMatchSection:
    iterations: int = 5
    lambda_geom: float = 0.2
    perturb_depth_frac: float = 0.025
    perturb_normal_deg: float = 5.0
    seed: int = 0
    enable_planar_priors: bool = True
    enable_texture_weighting: bool = True
    planar_tie_preference: bool = True
    outer_rounds: int = 2


@dataclass
class PriorSection:
    fine_divisor: float = 20.0
    coarse_divisor: float = 30.0
    enable_fine: bool = True
    enable_coarse: bool = True
    hist_bins: int = 8
    neighbor_weighting: str = "coefficient"
    compactness: float = 0.01
    fit_min_textureness: float = FIT_MIN_TEXTURENESS
    ransac_threshold: float = 0.10
    ransac_threshold_mode: str = "auto"
    ransac_threshold_fraction: float = 0.005
    ransac_iters: int = 1000
    ransac_confidence: float = 0.99
    speckle_max_area_fraction: float = 1.0 / 5000.0
    speckle_continuity_fraction: float = 0.10


@dataclass
class RefineSection:
    enable: bool = True
    window_radius: int = 7
    k_min: int = 5


@dataclass
class EvalSection:
    # absolute thresholds; when empty, tau_fractions x scene_size is used
    taus: list[float] = field(default_factory=list)
    tau_fractions: list[float] = field(default_factory=lambda: [0.0025, 0.005, 0.01, 0.02, 0.05])
    depth_thresholds: list[float] = field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1, 0.2, 0.5])
    textureness_cutoffs: list[float] = field(default_factory=lambda: [0.6, 0.7, 0.8, 0.9, 1.0])

    def resolve_taus(self, scene_size: float) -> list[float]:
        return list(self.taus) if self.taus else [f * scene_size for f in self.tau_fractions]


SECTIONS = {
    "photo": PhotoSection,
    "views": ViewConfig,
    "patchmatch": PatchMatchSection,
    "prior": PriorSection,
    "refine": RefineSection,
    "fusion": FusionConfig,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    photo: PhotoSection = field(default_factory=PhotoSection)
    views: ViewConfig = field(default_factory=ViewConfig)
    patchmatch: PatchMatchSection = field(default_factory=PatchMatchSection)
    prior: PriorSection = field(default_factory=PriorSection)
    refine: RefineSection = field(default_factory=RefineSection)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "output"

    # ablation switches

    @property
    def texture_weighting(self) -> bool:
        return self.patchmatch.enable_texture_weighting

    @texture_weighting.setter
    def texture_weighting(self, value: bool):
        self.patchmatch.enable_texture_weighting = bool(value)

    @property
    def coarse_superpixels(self) -> bool:
        return self.prior.enable_coarse

    @coarse_superpixels.setter
    def coarse_superpixels(self, value: bool):
        self.prior.enable_coarse = bool(value)

    @property
    def fine_superpixels(self) -> bool:
        return self.prior.enable_fine

    @fine_superpixels.setter
    def fine_superpixels(self, value: bool):
        self.prior.enable_fine = bool(value)

    @property
    def depth_refinement(self) -> bool:
        return self.refine.enable

    @depth_refinement.setter
    def depth_refinement(self, value: bool):
        self.refine.enable = bool(value)

    @property
    def seed(self) -> int:
        return self.patchmatch.seed

    @seed.setter
    def seed(self, value: int):
        self.patchmatch.seed = int(value)

    # conversion

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["output_dir"] = self.output_dir
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            values = data.pop(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"[{name}] must be a table")
            known = {f.name for f in dataclasses.fields(section_cls)}
            unknown = set(values) - known
            if unknown:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
            try:
                kwargs[name] = section_cls(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid [{name}] section: {exc}") from exc
        if "output_dir" in data:
            kwargs["output_dir"] = str(data.pop("output_dir"))
        if data:
            raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(data))}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(tomli.loads(text))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        return cls.from_toml(path.read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_toml())

    def copy(self) -> "RunConfig":
        return RunConfig.from_dict(self.to_dict())

    # module settings

    def match_window(self) -> MatchWindow:
        p = self.photo
        return MatchWindow(p.half_size, p.sigma_spatial, p.sigma_color, p.sigma_rho)

    def speckle_config(self) -> SpeckleConfig:
        return SpeckleConfig(self.prior.speckle_max_area_fraction, self.prior.speckle_continuity_fraction)

    def fill_config(self) -> FillConfig:
        return FillConfig(self.refine.window_radius, self.refine.k_min, self.photo.sigma_spatial, self.photo.sigma_color)

    def prior_config(self) -> PriorConfig:
        p = self.prior
        return PriorConfig(
            fine_divisor=p.fine_divisor,
            coarse_divisor=p.coarse_divisor,
            enable_fine=p.enable_fine,
            enable_coarse=p.enable_coarse,
            hist_bins=p.hist_bins,
            neighbor_weighting=p.neighbor_weighting,
            compactness=p.compactness,
            fit_min_textureness=p.fit_min_textureness,
            ransac=RansacConfig(p.ransac_threshold, p.ransac_threshold_mode, p.ransac_threshold_fraction, p.ransac_iters, p.ransac_confidence),
            speckle=self.speckle_config(),
        )

    def patchmatch_config(self) -> PatchMatchConfig:
        pm = self.patchmatch
        return PatchMatchConfig(
            iterations=pm.iterations,
            lambda_geom=pm.lambda_geom,
            perturb_depth_frac=pm.perturb_depth_frac,
            perturb_normal_deg=pm.perturb_normal_deg,
            seed=pm.seed,
            enable_planar_priors=pm.enable_planar_priors,
            enable_texture_weighting=pm.enable_texture_weighting,
            planar_tie_preference=pm.planar_tie_preference,
            psi_max=self.photo.psi_max,
            window=self.match_window(),
            views=dataclasses.replace(self.views),
            prior=self.prior_config(),
        )

    def validate(self) -> None:
        try:
            self.match_window()
            self.speckle_config()
            self.patchmatch_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.patchmatch.outer_rounds not in (1, 2):
            raise ConfigError("patchmatch.outer_rounds must be 1 or 2")
        if self.prior.ransac_threshold_mode not in ("auto", "absolute", "scene_fraction"):
            raise ConfigError("prior.ransac_threshold_mode must be 'auto', 'absolute' or 'scene_fraction'")
        if self.prior.neighbor_weighting not in ("coefficient", "distance"):
            raise ConfigError("prior.neighbor_weighting must be 'coefficient' or 'distance'")
        if min(self.prior.fine_divisor, self.prior.coarse_divisor) <= 0:
            raise ConfigError("superpixel divisors must be positive")
        if self.refine.window_radius < 1 or self.refine.k_min < 1:
            raise ConfigError("refine.window_radius and refine.k_min must be >= 1")
        if any(t <= 0 for t in self.eval.taus + self.eval.tau_fractions):
            raise ConfigError("evaluation thresholds must be positive")
