"""Application configuration.

Precedence, highest first: command-line flags, environment variables, the
YAML config file (``--config`` or ``$RAHORE_CONFIG``), built-in defaults.

Environment variables:

=========================  ==============================
``RAHORE_CONFIG``          path of the YAML config file
``RAHORE_BACKEND_URL``     ``backend.endpoint_url``
``RAHORE_BACKEND_KIND``    ``backend.kind``
``RAHORE_MODEL``           ``backend.model``
``RAHORE_CORPUS``          ``paths.corpus``
``RAHORE_QUERIES``         ``paths.queries``
``RAHORE_DEFAULT_K``       ``default_k``
``RAHORE_NORMALIZATION``   ``normalization``
=========================  ==============================

The API key itself is read from the variable named by ``backend.api_key_env``.
"""

from __future__ import annotations

import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from .backend import BackendConfig
from .prompt import CHOICE_INSTRUCTION, RELEVANCE_INSTRUCTION, Order, PromptTemplate
from .scoring import Normalization

ENV_FIELDS: dict[str, tuple[str, ...]] = {
    "RAHORE_BACKEND_URL": ("backend", "endpoint_url"),
    "RAHORE_BACKEND_KIND": ("backend", "kind"),
    "RAHORE_MODEL": ("backend", "model"),
    "RAHORE_CORPUS": ("paths", "corpus"),
    "RAHORE_QUERIES": ("paths", "queries"),
    "RAHORE_DEFAULT_K": ("default_k",),
    "RAHORE_NORMALIZATION": ("normalization",),
}


class ConfigError(ValueError):
    pass


class TemplateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    order: Order = Order.DOC_FIRST
    relevance_instruction: str = RELEVANCE_INSTRUCTION
    choice_instruction: str | None = CHOICE_INSTRUCTION
    use_choice_instruction: bool = True
    true_token: str = "<T>"
    false_token: str = "<F>"
    document_label: str = "document: "
    query_label: str = "query: "
    separator: str = "\n"
    interpolate_instruction: bool = False

    def build(self) -> PromptTemplate:
        return PromptTemplate(
            order=self.order,
            relevance_instruction=self.relevance_instruction,
            choice_instruction=self.choice_instruction if self.use_choice_instruction else None,
            true_token=self.true_token,
            false_token=self.false_token,
            document_label=self.document_label,
            query_label=self.query_label,
            separator=self.separator,
            interpolate_instruction=self.interpolate_instruction,
        )


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    corpus: Path | None = None
    queries: Path | None = None


class ServiceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    host: str = "127.0.0.1"
    port: int = Field(8080, ge=1, le=65535)


class AppConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backend: BackendConfig = Field(default_factory=BackendConfig)
    template: TemplateConfig = Field(default_factory=TemplateConfig)
    normalization: Normalization = Normalization.PROB_SOFTMAX
    default_k: int = Field(10, ge=1)
    scheduling: Literal["auto", "document_major", "query_major"] = "auto"
    cache_ttl: float | None = Field(None, gt=0)
    role_labels: dict[str, str] = Field(default_factory=lambda: {"user": "user", "assistant": "assistant"})
    paths: PathsConfig = Field(default_factory=PathsConfig)
    service: ServiceConfig = Field(default_factory=ServiceConfig)
    seed: int = 0
    mrr_label: str = "mrr"

    def prompt_template(self) -> PromptTemplate:
        return self.template.build()


def _set_path(doc: dict[str, Any], path: tuple[str, ...], value: Any) -> None:
    node = doc
    for key in path[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config field {'.'.join(path[:-1])} must be a mapping")
    node[path[-1]] = value


def _format_errors(exc: PydanticValidationError, source: str) -> str:
    lines = [f"invalid configuration ({source}):"]
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"  {loc}: {err['msg']}")
    return "\n".join(lines)


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> AppConfig:
    """Merge defaults, file, environment and dotted-key ``overrides`` (flags)."""
    env = os.environ if env is None else env
    path = path or env.get("RAHORE_CONFIG")
    doc: dict[str, Any] = {}
    source = "defaults"
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {p} is not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a mapping at top level")
        doc = loaded
        source = str(p)
    for var, field_path in ENV_FIELDS.items():
        if var in env and env[var] != "":
            _set_path(doc, field_path, env[var])
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_path(doc, tuple(dotted.split(".")), value)
    try:
        return AppConfig.model_validate(doc)
    except PydanticValidationError as exc:
        raise ConfigError(_format_errors(exc, source)) from None
