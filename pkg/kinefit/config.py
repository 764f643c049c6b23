import json
import logging
import os
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel, Field, ValidationError, field_validator

from kinefit.exceptions import ConfigError, SchemaError
from kinefit.services.camera import CameraIntrinsics
from kinefit.services.hand_model import Skeleton, load_default_skeleton
from kinefit.services.smoothing import FilterConfig
from kinefit.services.solver import SolverConfig
from kinefit.services.tracking import TrackingConfig

logger = logging.getLogger(__name__)

CONFIG_ENV = "KINEFIT_CONFIG"


class RunConfig(BaseModel):
    """
    Everything a pipeline run needs besides its input streams.

    Energy weights live in `solver.weights`. `skeleton` is a path to a
    skeleton JSON document; None selects the packaged default hand.
    """
    skeleton: Optional[Path] = None
    intrinsics: CameraIntrinsics = Field(default_factory=CameraIntrinsics)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)

    @field_validator("skeleton")
    @classmethod
    def skeleton_exists(cls, path):
        if path is not None and not path.is_file():
            raise ValueError(f"skeleton file not found: {path}")
        return path

    def load_skeleton(self) -> Skeleton:
        if self.skeleton is None:
            return load_default_skeleton()
        return Skeleton.load(self.skeleton)


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load a RunConfig from `path`, else from $KINEFIT_CONFIG, else defaults.

    Relative skeleton paths are resolved against the config file's directory.

    Raises:
        ConfigError: If the file is missing, is not JSON or references a
            missing skeleton.
        SchemaError: If a field has the wrong type or violates a constraint.
    """
    if path is None:
        path = os.getenv(CONFIG_ENV)
        if not path:
            logger.debug("No config given; using defaults")
            return RunConfig()
        logger.info(f"Using config from ${CONFIG_ENV}: {path}")
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e.msg}")
    if isinstance(payload, dict) and payload.get("skeleton"):
        skeleton = Path(payload["skeleton"])
        if not skeleton.is_absolute():
            payload["skeleton"] = str(path.parent / skeleton)
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        if any("skeleton file not found" in error["msg"] for error in e.errors()):
            raise ConfigError(f"config {path}: skeleton file not found")
        raise SchemaError(f"invalid config {path}: {e}")
