"""Experiment configuration: a versioned schema for spec files and the per-seed run config.

Defaults follow the desk-scale recipe (SGD momentum 0.9, weight decay 5e-4,
lr 0.02 divided by 10 half way, 100 epochs, 10 warm-up epochs, CPC warm-up of
5% of the epochs, tau 0.5, alpha 1, sharpening temperature 0.5, Beta(4, 4)
mixing).
"""
import os
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

from .enums import CleanerMode, NoiseKind, PrototypeSupervision
from .exceptions import SpecError
from .utils import set_dotted

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "CPCLAB_OUTPUT_ROOT"


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Block):
    source: Literal["blobs", "csv"] = "blobs"
    num_classes: int = Field(8, ge=2)
    dim: int = Field(16, ge=2)
    n_per_class: int = Field(200, ge=2)
    n_test_per_class: int = Field(100, ge=2)
    separations: Optional[List[PositiveFloat]] = None
    separation_range: Tuple[PositiveFloat, PositiveFloat] = (2.0, 6.0)
    class_counts: Optional[List[int]] = None
    csv_path: Optional[str] = None
    test_fraction: float = Field(0.2, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.separations is not None and len(self.separations) != self.num_classes:
            raise ValueError("separations needs one entry per class ({})".format(self.num_classes))
        if self.class_counts is not None and (
            len(self.class_counts) != self.num_classes or min(self.class_counts) < 2
        ):
            raise ValueError("class_counts needs {} entries of at least 2".format(self.num_classes))
        if self.separation_range[0] > self.separation_range[1]:
            raise ValueError("separation_range must be (low, high) with low <= high")
        if self.source == "csv" and not self.csv_path:
            raise ValueError("csv_path is required when source is 'csv'")
        return self


class NoiseConfig(_Block):
    kind: NoiseKind = NoiseKind.SYMMETRIC
    rate: float = Field(0.5, ge=0, le=1)
    class_map: Optional[Dict[int, int]] = None
    exclude_true_class: bool = False


class ModelConfig(_Block):
    hidden: List[PositiveInt] = Field(default_factory=lambda: [64, 64], min_length=1)
    embedding_dim: PositiveInt = 16
    projector_depth: PositiveInt = 1
    projector_hidden: PositiveInt = 32

    @model_validator(mode="after")
    def _check_projection(self):
        if self.embedding_dim >= self.hidden[-1]:
            raise ValueError("embedding_dim must be smaller than the feature width {}".format(self.hidden[-1]))
        return self


class OptimizerConfig(_Block):
    lr: PositiveFloat = 0.02
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    batch_size: PositiveInt = 64
    lr_drop_epoch: Optional[PositiveInt] = None


class TrainerConfig(_Block):
    epochs: int = Field(100, ge=2)
    warmup_epochs: PositiveInt = 10
    cpc_warmup: float = Field(0.05, ge=0, lt=1)
    tau: float = Field(0.5, gt=0, lt=1)
    alpha: float = Field(1.0, ge=0)
    lambda_u: float = Field(25.0, ge=0)
    lambda_u_rampup: int = Field(16, ge=0)
    temperature: PositiveFloat = 0.5
    mix_alpha: PositiveFloat = 4.0
    max_lambda: bool = True
    prior_weight: float = Field(1.0, ge=0)
    normalize_losses: bool = True
    gmm_max_iter: PositiveInt = 100
    gmm_tol: PositiveFloat = 1e-6
    prototype_supervision: PrototypeSupervision = PrototypeSupervision.GMM
    exclude_confident_from_noise: bool = True
    ensemble_inference: bool = True
    checkpoints: bool = True

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.cpc_warmup * self.epochs >= self.epochs - self.warmup_epochs:
            raise ValueError("the CPC warm-up must end before the last epoch")
        return self

    @property
    def lr_drop_default(self):
        return self.epochs // 2


class _Arm(_Block):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    cleaner_mode: CleanerMode = CleanerMode.CPC_AGN


class RunConfig(_Arm):
    """Everything one training run needs."""

    seed: int = 0


class ExperimentSpec(_Arm):
    """Contents of a spec file: one experiment arm, repeated over ``seeds``."""

    version: Literal[1] = SCHEMA_VERSION
    name: str = Field("experiment", min_length=1)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2], min_length=1)
    output_dir: Optional[str] = None

    def run_config(self, seed: int) -> RunConfig:
        blocks = self.model_dump(include=set(_Arm.model_fields))
        return RunConfig.model_validate(dict(blocks, seed=seed))

    def output_path(self, override: Optional[str] = None) -> str:
        """Output directory: flag, then spec file, then ``$CPCLAB_OUTPUT_ROOT/<name>``.

        Relative paths are resolved against ``$CPCLAB_OUTPUT_ROOT`` (default: cwd).
        """
        root = os.environ.get(OUTPUT_ROOT_ENV, os.getcwd())
        return os.path.join(root, override or self.output_dir or self.name)


def _field_path(error):
    return ".".join(str(part) for part in error["loc"])


def validate_spec(data) -> ExperimentSpec:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise SpecError("spec must be a mapping, got {}".format(type(data).__name__))
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as error:
        first = error.errors()[0]
        path = _field_path(first)
        raise SpecError("{}: {}".format(path or "<root>", first["msg"]), field=path or None)


def parse_override(assignment: str):
    """Split ``"trainer.tau=0.6"`` into the path and the YAML-parsed value."""
    path, sep, raw = assignment.partition("=")
    if not sep or not path.strip():
        raise SpecError("expected an override of the form key.path=value, got {!r}".format(assignment))
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        raise SpecError("cannot parse the value of {!r}".format(assignment), field=path.strip())
    return path.strip(), value


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    for assignment in overrides:
        path, value = parse_override(assignment)
        try:
            set_dotted(data, path, value)
        except ValueError as error:
            raise SpecError(str(error), field=path)
    return data


def read_spec_data(path) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except FileNotFoundError:
        raise SpecError("spec file not found: {}".format(path))
    except yaml.YAMLError as error:
        raise SpecError("spec file is not valid YAML: {}".format(error))
    except UnicodeDecodeError as error:
        raise SpecError("spec file is not UTF-8 text: {}".format(error))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise SpecError("spec must be a mapping, got {}".format(type(data).__name__))
    return data


def load_spec(path, overrides: Sequence[str] = ()) -> ExperimentSpec:
    return validate_spec(apply_overrides(read_spec_data(path), overrides))


def spec_to_data(spec: ExperimentSpec) -> dict:
    return spec.model_dump(mode="json")


def dump_spec(spec: ExperimentSpec) -> str:
    return yaml.safe_dump(spec_to_data(spec), sort_keys=False)


def spec_schema() -> dict:
    return ExperimentSpec.model_json_schema()
