"""CSV/JSON artifacts of a pipeline run and the run manifest."""
from pathlib import Path
from typing import Any, Dict, List, Optional
import json
import logging
import math
import re

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from config.settings import settings

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
GATES = ("c_below_one", "inputs_in_U", "stability_margin", "horizon_sufficient")


class ArtifactJSONEncoder(json.JSONEncoder):
    """JSON encoder for numpy values and pydantic models."""

    def default(self, obj):
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, np.integer):
            return int(obj)
        if isinstance(obj, np.floating):
            return float(obj)
        if isinstance(obj, np.bool_):
            return bool(obj)
        if isinstance(obj, BaseModel):
            return obj.model_dump(mode="python")
        return super().default(obj)


FLOAT_MARK = "@@float:"
_MARKED_FLOAT = re.compile(r'"' + re.escape(FLOAT_MARK) + r'([^"]*)"')


def format_float(value: float) -> str:
    """17 significant digits, always readable back as a float."""
    text = settings.csv_float_format % value
    if not any(ch in text for ch in ".en"):
        text += ".0"
    return text


def _mark_floats(value: Any) -> Any:
    """Non-finite floats become None, finite ones a marked string swapped for the number after dumping."""
    if isinstance(value, float):
        return FLOAT_MARK + format_float(value) if math.isfinite(value) else None
    if isinstance(value, dict):
        return {key: _mark_floats(item) for key, item in value.items()}
    if isinstance(value, list):
        return [_mark_floats(item) for item in value]
    return value


class RunManifest(BaseModel):
    """Config hash, artifact list and one field per pipeline gate (None = not evaluated)."""

    config_hash: Optional[str] = None
    artifacts: List[str] = Field(default_factory=list)
    gates: Dict[str, Optional[bool]] = Field(default_factory=lambda: {gate: None for gate in GATES})
    x0: List[List[float]] = Field(default_factory=list)
    commands: List[str] = Field(default_factory=list)

    @property
    def failed_gates(self) -> List[str]:
        return [gate for gate, passed in self.gates.items() if passed is False]


class ArtifactStore:
    """Reads and writes the artifacts of one output directory."""

    def __init__(self, root: Optional[str] = None):
        self.root = Path(root or settings.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self._written: List[str] = []

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).is_file()

    def missing(self, names: List[str]) -> List[str]:
        return [name for name in names if not self.exists(name)]

    def is_empty(self) -> bool:
        return not any(self.root.iterdir())

    def write_frame(self, name: str, frame: pd.DataFrame):
        frame.to_csv(self.path(name), index=False, float_format=settings.csv_float_format)
        self._written.append(name)
        logger.debug(f"wrote {self.path(name)} ({len(frame)} rows)")

    def read_frame(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self.path(name))

    def write_json(self, name: str, payload: Any):
        """Floats are written with 17 significant digits; NaN and inf become null."""
        plain = json.loads(json.dumps(payload, cls=ArtifactJSONEncoder))
        text = json.dumps(_mark_floats(plain), indent=2)
        text = _MARKED_FLOAT.sub(lambda match: match.group(1), text)
        self.path(name).write_text(text + "\n", encoding="utf-8")
        self._written.append(name)
        logger.debug(f"wrote {self.path(name)}")

    def read_json(self, name: str) -> Any:
        return json.loads(self.path(name).read_text(encoding="utf-8"))

    def load_manifest(self) -> RunManifest:
        if not self.exists(MANIFEST):
            return RunManifest()
        return RunManifest.model_validate(self.read_json(MANIFEST))

    def update_manifest(self, command: str, config_hash: Optional[str] = None,
                        gates: Optional[Dict[str, Optional[bool]]] = None,
                        x0: Optional[List[List[float]]] = None) -> RunManifest:
        """Merge this command's artifacts and gate results into manifest.json."""
        manifest = self.load_manifest()
        if config_hash is not None:
            manifest.config_hash = config_hash
        manifest.artifacts = sorted(set(manifest.artifacts) | set(self._written))
        manifest.gates.update(gates or {})
        if x0 is not None:
            manifest.x0 = x0
        if command not in manifest.commands:
            manifest.commands.append(command)

        self._written = []
        self.path(MANIFEST).write_text(
            json.dumps(manifest.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8"
        )
        return manifest
