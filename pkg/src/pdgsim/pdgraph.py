"""Probabilistic demand graph: functional units, demand records, branch stats.

An application is a graph of functional units. Each unit carries a backend
description, per-trial demand records, empirical demand distributions, and
branch-taken probabilities computed from the recorded jumping frequencies.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .distributions import (
    DEFAULT_BUCKET_COUNT,
    DEFAULT_CAPACITY,
    EmpiricalDistribution,
)
from .errors import GraphError


class BackendKind(Enum):
    LLM_INFERENCE = "llm-inference"
    DOCKER_EXEC = "docker-exec"
    DNN_TOOL = "dnn-tool"
    EXTERNAL_TOOL = "external-tool"


@dataclass
class BackendSpec:
    """Resource type and configuration specifics of one functional unit."""

    kind: BackendKind
    model_id: Optional[str] = None
    lora_id: Optional[str] = None
    kv_prefix_id: Optional[str] = None
    image_id: Optional[str] = None
    tool_id: Optional[str] = None
    warmup_time: float = 0.0

    def __post_init__(self):
        if self.warmup_time < 0:
            raise GraphError(f"warmup_time must be >= 0, got {self.warmup_time}")
        if self.kind is BackendKind.LLM_INFERENCE:
            if not self.model_id:
                raise GraphError("LLM backend requires model_id")
            if self.image_id or self.tool_id:
                raise GraphError("LLM backend must not set image_id/tool_id")
        elif self.kind is BackendKind.DOCKER_EXEC:
            if not self.image_id:
                raise GraphError("docker backend requires image_id")
            if self.model_id or self.lora_id or self.kv_prefix_id or self.tool_id:
                raise GraphError("docker backend must only set image_id")
        else:
            if not self.tool_id:
                raise GraphError(f"{self.kind.value} backend requires tool_id")
            if self.model_id or self.lora_id or self.kv_prefix_id or self.image_id:
                raise GraphError(f"{self.kind.value} backend must only set tool_id")

    @property
    def is_llm(self) -> bool:
        return self.kind is BackendKind.LLM_INFERENCE

    def warm_content_id(self) -> Optional[str]:
        """The content that must be resident and warm before a task starts.

        LLM units without a KV prefix or LoRA need no warm-up (base model
        is assumed resident).
        """
        if self.kind is BackendKind.LLM_INFERENCE:
            return self.kv_prefix_id or self.lora_id
        if self.kind is BackendKind.DOCKER_EXEC:
            return self.image_id
        return self.tool_id


@dataclass
class UnitRecord:
    """Execution information of one unit in one profiling trial."""

    trial_id: int
    input_len: float = 0.0
    output_len: float = 0.0
    parallelism: int = 1
    duration: float = 0.0
    next_unit: Optional[str] = None

    def __post_init__(self):
        if self.input_len < 0 or self.output_len < 0:
            raise GraphError("token lengths must be >= 0")
        if self.parallelism < 1:
            raise GraphError("parallelism must be >= 1 for an executed unit")
        if self.duration < 0:
            raise GraphError("duration must be >= 0")


@dataclass
class CorrelationMask:
    """Which cross-unit demand correlations hold (|rho| above threshold).

    Upstream variables are those of the unit observed just before this one;
    `output_own_input` is the within-unit input-to-output correlation.
    """

    input_upstream_input: bool = False
    input_upstream_output: bool = False
    output_upstream_output: bool = False
    output_own_input: bool = False
    parallelism_upstream_parallelism: bool = False

    def any(self) -> bool:
        return (
            self.input_upstream_input
            or self.input_upstream_output
            or self.output_upstream_output
            or self.output_own_input
            or self.parallelism_upstream_parallelism
        )

    def to_dict(self) -> dict:
        return {
            "input_upstream_input": self.input_upstream_input,
            "input_upstream_output": self.input_upstream_output,
            "output_upstream_output": self.output_upstream_output,
            "output_own_input": self.output_own_input,
            "parallelism_upstream_parallelism": self.parallelism_upstream_parallelism,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationMask":
        return cls(**{k: bool(v) for k, v in d.items()})


class FunctionalUnit:
    """One node of the demand graph."""

    def __init__(
        self,
        unit_id: str,
        backend: BackendSpec,
        capacity: int = DEFAULT_CAPACITY,
        bucket_count: int = DEFAULT_BUCKET_COUNT,
    ):
        self.unit_id = unit_id
        self.backend = backend
        self.capacity = capacity
        self.bucket_count = bucket_count
        self.records: deque[UnitRecord] = deque(maxlen=capacity)
        self.input_dist = EmpiricalDistribution(capacity=capacity, bucket_count=bucket_count)
        self.output_dist = EmpiricalDistribution(capacity=capacity, bucket_count=bucket_count)
        self.parallelism_dist = EmpiricalDistribution(capacity=capacity, bucket_count=bucket_count)
        self.duration_dist = EmpiricalDistribution(capacity=capacity, bucket_count=bucket_count)
        self.successors: dict[str, float] = {}
        self.masks = CorrelationMask()

    @property
    def is_llm(self) -> bool:
        return self.backend.is_llm

    def add_record(self, record: UnitRecord) -> None:
        self.records.append(record)
        if self.is_llm:
            self.input_dist.add(record.input_len)
            self.output_dist.add(record.output_len)
            self.parallelism_dist.add(record.parallelism)
        else:
            self.duration_dist.add(record.duration)
        self.successors = branch_probabilities(self)

    def record_by_trial(self, trial_id: int) -> Optional[UnitRecord]:
        for rec in self.records:
            if rec.trial_id == trial_id:
                return rec
        return None

    def __repr__(self) -> str:
        return f"FunctionalUnit({self.unit_id!r}, {self.backend.kind.value}, n={len(self.records)})"


def branch_probabilities(unit: FunctionalUnit) -> dict[str, float]:
    """Empirical branch-taken frequencies over all records (terminal included).

    Termination probability is the residual 1 - sum(values).
    """
    if not unit.records:
        return {}
    counts: dict[str, int] = {}
    for rec in unit.records:
        if rec.next_unit is not None:
            counts[rec.next_unit] = counts.get(rec.next_unit, 0) + 1
    total = len(unit.records)
    return {uid: c / total for uid, c in sorted(counts.items())}


class PDGraph:
    """Application-level probabilistic demand graph."""

    def __init__(self, app_id: str, entry_unit: str):
        self.app_id = app_id
        self.entry_unit = entry_unit
        self.units: dict[str, FunctionalUnit] = {}

    def add_unit(self, unit: FunctionalUnit) -> None:
        self.units[unit.unit_id] = unit

    def validate(self) -> None:
        if self.entry_unit not in self.units:
            raise GraphError(f"entry unit {self.entry_unit!r} not in graph {self.app_id!r}")
        for uid, unit in self.units.items():
            for succ, p in unit.successors.items():
                if succ not in self.units:
                    raise GraphError(
                        f"unit {uid!r} references unknown successor {succ!r}"
                    )
                if not (0.0 <= p <= 1.0):
                    raise GraphError(f"unit {uid!r} successor {succ!r} probability {p}")
            if sum(unit.successors.values()) > 1.0 + 1e-9:
                raise GraphError(f"unit {uid!r} successor probabilities sum above 1")
        unreachable = set(self.units) - self.reachable_from(self.entry_unit)
        if unreachable:
            raise GraphError(
                f"units unreachable from entry in {self.app_id!r}: {sorted(unreachable)}"
            )

    def reachable_from(self, unit_id: str) -> set[str]:
        seen: set[str] = set()
        stack = [unit_id]
        while stack:
            u = stack.pop()
            if u in seen or u not in self.units:
                continue
            seen.add(u)
            stack.extend(self.units[u].successors)
        return seen

    def upstreams_of(self, unit_id: str) -> list[str]:
        """Units that have ever jumped to `unit_id` in a recorded trial."""
        ups = []
        for uid, unit in sorted(self.units.items()):
            if any(rec.next_unit == unit_id for rec in unit.records):
                ups.append(uid)
        return ups


def record_trial(graph: PDGraph, trial: dict[str, UnitRecord]) -> PDGraph:
    """Append one profiling trial (one record per executed unit) to the graph.

    Rejects unknown unit ids and record sets not connected to the entry unit
    through the recorded next-unit edges. Updates records, distributions,
    and branch probabilities in place and returns the graph.
    """
    for uid in trial:
        if uid not in graph.units:
            raise GraphError(f"trial references unknown unit {uid!r}")
    if graph.entry_unit not in trial:
        raise GraphError(
            f"trial does not include the entry unit {graph.entry_unit!r}"
        )
    # Follow the recorded edges; every recorded unit must be visited.
    visited: set[str] = set()
    stack = [graph.entry_unit]
    while stack:
        uid = stack.pop()
        if uid in visited or uid not in trial:
            continue
        visited.add(uid)
        nxt = trial[uid].next_unit
        if nxt is not None:
            stack.append(nxt)
    disconnected = set(trial) - visited
    if disconnected:
        raise GraphError(
            f"trial records disconnected from entry: {sorted(disconnected)}"
        )
    for uid in sorted(trial):
        graph.units[uid].add_record(trial[uid])
    return graph


@dataclass(frozen=True)
class RateProfile:
    """Average per-token processing rates of the serving environment."""

    prefill_rate: float = 10000.0  # tokens/s
    decode_rate: float = 50.0  # tokens/s per request

    def __post_init__(self):
        if self.prefill_rate <= 0 or self.decode_rate <= 0:
            raise ValueError("rates must be positive")


def service_time(input_len: float, output_len: float, env: RateProfile) -> float:
    """Absolute service time of one request from its token lengths."""
    if input_len < 0 or output_len < 0:
        raise ValueError("token lengths must be >= 0")
    return input_len / env.prefill_rate + output_len / env.decode_rate


# --- knowledge-base JSON (one document per application) ---


def graph_to_dict(graph: PDGraph) -> dict:
    units = []
    for uid in sorted(graph.units):
        unit = graph.units[uid]
        b = unit.backend
        backend = {"kind": b.kind.value, "warmup_time": b.warmup_time}
        for f in ("model_id", "lora_id", "kv_prefix_id", "image_id", "tool_id"):
            v = getattr(b, f)
            if v is not None:
                backend[f] = v
        units.append(
            {
                "unit_id": uid,
                "backend": backend,
                "samples": {
                    "input": unit.input_dist.samples,
                    "output": unit.output_dist.samples,
                    "parallelism": unit.parallelism_dist.samples,
                    "duration": unit.duration_dist.samples,
                },
                "records": [
                    {
                        "trial_id": r.trial_id,
                        "input_len": r.input_len,
                        "output_len": r.output_len,
                        "parallelism": r.parallelism,
                        "duration": r.duration,
                        "next_unit": r.next_unit,
                    }
                    for r in unit.records
                ],
                "successors": unit.successors,
                "masks": unit.masks.to_dict(),
                "capacity": unit.capacity,
                "bucket_count": unit.bucket_count,
            }
        )
    return {"app_id": graph.app_id, "entry_unit": graph.entry_unit, "units": units}


def graph_from_dict(doc: dict) -> PDGraph:
    def fail(path: str, msg: str):
        raise GraphError(f"{path}: {msg}")

    for key in ("app_id", "entry_unit", "units"):
        if key not in doc:
            fail(key, "missing required key")
    graph = PDGraph(doc["app_id"], doc["entry_unit"])
    if not isinstance(doc["units"], list):
        fail("units", "must be a list")
    for i, u in enumerate(doc["units"]):
        path = f"units[{i}]"
        for key in ("unit_id", "backend"):
            if key not in u:
                fail(path, f"missing required key {key!r}")
        b = u["backend"]
        try:
            kind = BackendKind(b.get("kind"))
        except ValueError:
            fail(f"{path}.backend.kind", f"unknown backend kind {b.get('kind')!r}")
        try:
            backend = BackendSpec(
                kind=kind,
                model_id=b.get("model_id"),
                lora_id=b.get("lora_id"),
                kv_prefix_id=b.get("kv_prefix_id"),
                image_id=b.get("image_id"),
                tool_id=b.get("tool_id"),
                warmup_time=float(b.get("warmup_time", 0.0)),
            )
        except GraphError as e:
            fail(f"{path}.backend", str(e))
        unit = FunctionalUnit(
            u["unit_id"],
            backend,
            capacity=int(u.get("capacity", DEFAULT_CAPACITY)),
            bucket_count=int(u.get("bucket_count", DEFAULT_BUCKET_COUNT)),
        )
        for j, r in enumerate(u.get("records", [])):
            try:
                unit.add_record(
                    UnitRecord(
                        trial_id=int(r["trial_id"]),
                        input_len=float(r.get("input_len", 0.0)),
                        output_len=float(r.get("output_len", 0.0)),
                        parallelism=int(r.get("parallelism", 1)),
                        duration=float(r.get("duration", 0.0)),
                        next_unit=r.get("next_unit"),
                    )
                )
            except (GraphError, KeyError, TypeError, ValueError) as e:
                fail(f"{path}.records[{j}]", str(e))
        stored = u.get("successors", {})
        recomputed = unit.successors
        for sid, p in stored.items():
            if abs(recomputed.get(sid, 0.0) - p) > 1e-9:
                fail(
                    f"{path}.successors.{sid}",
                    f"stored probability {p} disagrees with record frequency "
                    f"{recomputed.get(sid, 0.0)}",
                )
        if "masks" in u:
            unit.masks = CorrelationMask.from_dict(u["masks"])
        graph.add_unit(unit)
    graph.validate()
    return graph


def save_graph(graph: PDGraph, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(graph_to_dict(graph), fh)


def load_graph(path: str) -> PDGraph:
    with open(path) as fh:
        doc = json.load(fh)
    return graph_from_dict(doc)
