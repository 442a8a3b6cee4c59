"""Engine configuration."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from .improver import ImproveCriteria
from .reflector import GateCriteria

ROLES = ("manager", "retriever", "reflector", "answerer_1", "answerer_2", "improver")


class ToolsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    corpus_path: Optional[str] = None
    weather_path: Optional[str] = None
    web_search_url: Optional[str] = None
    corpus_k: int = Field(default=5, ge=0)
    web_k: int = Field(default=5, ge=0)


class EngineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["live", "mock"] = "live"
    model_id: str = "gpt-4o"
    models: dict[Literal[ROLES], str] = Field(default_factory=dict)  # type: ignore[valid-type]
    base_url: Optional[str] = None
    timeout_s: float = Field(default=60.0, gt=0)
    temperature: float = Field(default=0.2, ge=0, le=2)
    max_tokens: int = Field(default=1024, gt=0)
    reflector: GateCriteria = Field(default_factory=GateCriteria)
    improver: ImproveCriteria = Field(default_factory=ImproveCriteria)
    max_reflect_iters: int = Field(default=3, ge=1)
    max_improve_iters: int = Field(default=3, ge=1)
    max_reconsider_rounds: int = Field(default=2, ge=1)
    cache: bool = False
    tools: ToolsConfig = Field(default_factory=ToolsConfig)
    disagreement_mode: Literal["auto", "mcq", "free_text"] = "auto"
    disagreement_threshold: float = Field(default=0.6, ge=0, le=1)
    identical_prompts: bool = False
    reflector_sees_images: bool = False

    def model_for(self, role: str) -> str:
        return self.models.get(role, self.model_id)


def load_config(path: str | Path | None) -> EngineConfig:
    """Read a JSON config; relative tool paths resolve against the config file's directory."""
    if path is None:
        return EngineConfig()
    path = Path(path)
    raw: dict[str, Any] = json.loads(path.read_text(encoding="utf-8"))
    tools = raw.get("tools")
    if isinstance(tools, dict):
        for key in ("corpus_path", "weather_path"):
            if tools.get(key) and not Path(tools[key]).is_absolute():
                tools[key] = str((path.parent / tools[key]).resolve())
    return EngineConfig.model_validate(raw)


def flatten(config: EngineConfig) -> list[tuple[str, Any]]:
    out: list[tuple[str, Any]] = []

    def walk(prefix: str, value: Any) -> None:
        if isinstance(value, dict) and value:
            for k, v in value.items():
                walk(f"{prefix}.{k}" if prefix else k, v)
        else:
            out.append((prefix, value))

    walk("", config.model_dump(mode="json"))
    return out
