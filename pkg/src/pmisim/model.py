from __future__ import annotations

import json
import os
from typing import Any, Dict, List, Literal, Type, TypeVar, Union

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    GetCoreSchemaHandler,
    ValidationError,
    model_validator,
)
from pydantic_core import core_schema

from .errors import SchemaError

R = TypeVar("R", bound="RecordModel")


class _boundedint(int):
    lo: int = 0
    hi: int = 0

    def __new__(cls, value):
        value = int(value)
        if not cls.lo <= value <= cls.hi:
            raise ValueError(f"Value out of range for {cls.__name__}")
        return int.__new__(cls, value)

    @classmethod
    def __get_pydantic_core_schema__(
        cls, source_type, handler: GetCoreSchemaHandler
    ):
        def validate(value):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValueError(f"{cls.__name__} expects an integer")
            return cls(value)

        return core_schema.no_info_plain_validator_function(
            validate,
            serialization=core_schema.plain_serializer_function_ser_schema(
                int
            ),
        )


class cqi_int(_boundedint):
    lo, hi = 0, 15


class rank_int(_boundedint):
    lo, hi = 1, 2


class u16(_boundedint):
    lo, hi = 0, 65535


class u32(_boundedint):
    lo, hi = 0, 4294967295


def first_error_field(exc: ValidationError) -> str:
    errors = exc.errors()
    if not errors:
        return ""
    return ".".join(str(part) for part in errors[0]["loc"])


class RecordModel(BaseModel):
    """
    Base class of every typed record that crosses a boundary: wire
    payloads, configuration documents, checkpoints and metrics rows.
    Provides JSON and YAML (de)serialization from strings and files.
    """

    @classmethod
    def from_native_tree(cls: Type[R], data: Dict[str, Any]) -> R:
        """
        Validates a dict tree into an instance of the model. Schema
        violations surface as `SchemaError` naming the offending field.
        """
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise SchemaError(
                f"{cls.__name__} failed validation: "
                f"{exc.errors()[0]['msg']}",
                first_error_field(exc),
            ) from exc

    @classmethod
    def from_json(cls: Type[R], json_data: str) -> R:
        return cls.from_native_tree(json.loads(json_data))

    @classmethod
    def from_json_file(cls: Type[R], path: os.PathLike) -> R:
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_native_tree(json.load(f))

    @classmethod
    def from_yaml(cls: Type[R], yaml_data: str) -> R:
        return cls.from_native_tree(yaml.safe_load(yaml_data))

    @classmethod
    def from_yaml_file(cls: Type[R], path: os.PathLike) -> R:
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_native_tree(yaml.safe_load(f))

    def to_native_tree(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return self.model_dump_json()

    def to_json_file(self, path: os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    def to_yaml(self) -> str:
        return yaml.safe_dump(
            self.to_native_tree(), allow_unicode=True, sort_keys=False
        )

    def to_yaml_file(self, path: os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_yaml())


_PAYLOAD_CONFIG = ConfigDict(extra="allow", frozen=True, allow_inf_nan=False)


class CsiReport(RecordModel):
    """
    Per-UE CSI indication sent by a cell towards the controller. PMIs are
    selected on the current channel; CQI, throughput, PRBs and
    interference describe the previously realized TTI.
    """

    model_config = _PAYLOAD_CONFIG

    ue: u32
    pci: u16
    tti: int = Field(ge=0)
    ri: rank_int
    pmi: List[int]
    cqi: List[cqi_int]
    wb_cqi: cqi_int
    rsrp_dbm: float
    thr_mbps: float = Field(ge=0.0)
    interf_mw: List[float]
    prbs: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_lengths(self) -> CsiReport:
        if not self.pmi:
            raise ValueError("pmi list must not be empty")
        if len(self.pmi) != len(self.cqi):
            raise ValueError("pmi and cqi lists must have equal length")
        if any(j < 0 for j in self.pmi):
            raise ValueError("pmi indices must be non-negative")
        if any(v < 0.0 for v in self.interf_mw):
            raise ValueError("interference must be non-negative")
        return self

    @property
    def num_subbands(self) -> int:
        return len(self.pmi)


class Assignment(RecordModel):
    model_config = _PAYLOAD_CONFIG

    ue: u32
    ri: rank_int
    pmi: int = Field(ge=0)
    subbands: Union[Literal["all"], List[int]] = "all"

    @model_validator(mode="after")
    def _check_subbands(self) -> Assignment:
        if self.subbands != "all" and any(s < 0 for s in self.subbands):
            raise ValueError("subband indices must be non-negative")
        return self

    def covers(self, subband: int) -> bool:
        return self.subbands == "all" or subband in self.subbands


class ControlDirective(RecordModel):
    """PMI control message for one cell, issued by an xApp agent."""

    model_config = _PAYLOAD_CONFIG

    pci: u16
    tti: int = Field(ge=0)
    agent: str
    assignments: List[Assignment] = Field(default_factory=list)

    @property
    def is_noop(self) -> bool:
        return not self.assignments
