"""Workload construction: arrivals, deadlines, and synthetic demand graphs.

Archetype generators build demand graphs shaped like common LLM application
families (fan-out/fan-in document processing, verification chains, reactive
loops, plan-and-execute tool use, code generation with checking) and
populate them with synthetic profiling trials, including injected
cross-unit correlations so the masks become discoverable.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .distributions import DEFAULT_BUCKET_COUNT, DEFAULT_CAPACITY
from .errors import GraphError, PdgsimError
from .estimator import build_masks
from .pdgraph import (
    BackendKind,
    BackendSpec,
    FunctionalUnit,
    PDGraph,
    UnitRecord,
    record_trial,
)

SIZE_CLASSES = ("small", "medium", "large")
DEADLINE_CLASS_NAMES = {1.2: "tight", 1.5: "modest", 2.0: "loose"}


@dataclass(frozen=True)
class Arrival:
    time: float
    app_id: str
    tenant_id: str
    size_class: str = "small"
    deadline: Optional[float] = None
    deadline_class: Optional[str] = None


@dataclass
class WorkloadSpec:
    arrivals: list[Arrival]
    mix: dict[str, float]
    window: float
    deadline_factors: list[tuple[float, float]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        times = [a.time for a in self.arrivals]
        if times != sorted(times):
            raise PdgsimError("arrivals must be sorted by time")
        if self.mix and abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise PdgsimError("mix weights must sum to 1")

    def to_dict(self) -> dict:
        return {
            "arrivals": [
                {
                    "time": a.time,
                    "app_id": a.app_id,
                    "tenant_id": a.tenant_id,
                    "size_class": a.size_class,
                    "deadline": a.deadline,
                    "deadline_class": a.deadline_class,
                }
                for a in self.arrivals
            ],
            "mix": self.mix,
            "window": self.window,
            "deadline_factors": [list(f) for f in self.deadline_factors],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "WorkloadSpec":
        return cls(
            arrivals=[Arrival(**a) for a in doc["arrivals"]],
            mix=doc.get("mix", {}),
            window=float(doc["window"]),
            deadline_factors=[tuple(f) for f in doc.get("deadline_factors", [])],
            seed=int(doc.get("seed", 0)),
        )

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str) -> "WorkloadSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _arrival_times(n: int, window: float, burst_profile: str, rnd: random.Random) -> list[float]:
    if burst_profile == "uniform":
        return sorted(rnd.uniform(0.0, window) for _ in range(n))
    if burst_profile == "bursty":
        # Two-state on/off modulated Poisson; normalized into the window.
        times: list[float] = []
        t = 0.0
        on_mean, off_mean, rate_on = 30.0, 60.0, 1.0
        while len(times) < n:
            on_len = rnd.expovariate(1.0 / on_mean)
            tt = t
            while len(times) < n:
                tt += rnd.expovariate(rate_on)
                if tt > t + on_len:
                    break
                times.append(tt)
            t = t + on_len + rnd.expovariate(1.0 / off_mean)
        scale = window / times[-1] if times[-1] > 0 else 1.0
        return [x * scale for x in times]
    raise PdgsimError(f"unknown burst profile {burst_profile!r}")


def generate(
    mix: dict[str, float],
    n_apps: int,
    window: float,
    burst_profile: str = "uniform",
    seed: int = 0,
    class_apps: Optional[dict[str, list[str]]] = None,
    n_tenants: int = 4,
) -> WorkloadSpec:
    """Generate a seeded workload with the given size-class mix."""
    if n_apps < 1:
        raise PdgsimError("n_apps must be >= 1")
    if not mix or abs(sum(mix.values()) - 1.0) > 1e-9 or any(w < 0 for w in mix.values()):
        raise PdgsimError("mix weights must be non-negative and sum to 1")
    rnd = random.Random(seed)
    class_apps = class_apps or {c: [f"{c}-default"] for c in mix}
    classes = sorted(mix)
    weights = [mix[c] for c in classes]
    times = _arrival_times(n_apps, window, burst_profile, rnd)
    arrivals = []
    for t in times:
        cls = rnd.choices(classes, weights=weights)[0]
        app_id = rnd.choice(class_apps[cls])
        tenant = f"tenant-{rnd.randrange(n_tenants)}"
        arrivals.append(Arrival(time=t, app_id=app_id, tenant_id=tenant, size_class=cls))
    return WorkloadSpec(arrivals=arrivals, mix=dict(mix), window=window, seed=seed)


def assign_deadlines(
    spec: WorkloadSpec,
    true_demands: Sequence[float],
    factors: Sequence[tuple[float, float]],
) -> WorkloadSpec:
    """Attach deadlines: arrival + factor x standalone execution time.

    `true_demands` holds each arrival's un-queued critical-path time from
    the realized (true-run) demand draw.
    """
    if len(true_demands) != len(spec.arrivals):
        raise PdgsimError("true_demands must align with arrivals")
    rnd = random.Random(spec.seed + 0x5EED)
    fs = [f for f, _ in factors]
    ws = [w for _, w in factors]
    arrivals = []
    for a, demand in zip(spec.arrivals, true_demands):
        f = rnd.choices(fs, weights=ws)[0]
        label = DEADLINE_CLASS_NAMES.get(f, f"x{f:g}")
        arrivals.append(
            replace(a, deadline=a.time + f * demand, deadline_class=label)
        )
    return WorkloadSpec(
        arrivals=arrivals,
        mix=spec.mix,
        window=spec.window,
        deadline_factors=[tuple(f) for f in factors],
        seed=spec.seed,
    )


def ingest_trace(path: str, mix: Optional[dict[str, float]] = None,
                 class_apps: Optional[dict[str, list[str]]] = None,
                 seed: int = 0) -> WorkloadSpec:
    """Read arrivals from a line-delimited trace of {t, class?, tenant?}."""
    rnd = random.Random(seed)
    mix = mix or {"small": 1.0}
    class_apps = class_apps or {c: [f"{c}-default"] for c in mix}
    classes = sorted(mix)
    weights = [mix[c] for c in classes]
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                t = float(rec["t"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise PdgsimError(f"{path}:{lineno}: invalid trace record: {e}")
            if t < 0:
                raise PdgsimError(f"{path}:{lineno}: negative timestamp {t}")
            rows.append((t, rec.get("class"), rec.get("tenant"), lineno))
    rows.sort(key=lambda r: (r[0], r[3]))  # stable tie order by line number
    arrivals = []
    for t, cls, tenant, _ in rows:
        cls = cls or rnd.choices(classes, weights=weights)[0]
        if cls not in class_apps:
            raise PdgsimError(f"trace class {cls!r} has no registered applications")
        app_id = rnd.choice(class_apps[cls])
        arrivals.append(
            Arrival(time=t, app_id=app_id, tenant_id=tenant or "tenant-0", size_class=cls)
        )
    window = arrivals[-1].time if arrivals else 0.0
    return WorkloadSpec(arrivals=arrivals, mix=mix, window=window, seed=seed)


# --- archetype demand graphs with synthetic profiling trials ---

ARCHETYPE_KINDS = (
    "fanout-reduce",
    "verify-chain",
    "react-loop",
    "plan-execute",
    "code-check",
)


def _lognormal(rnd: random.Random, mean: float, sigma: float = 0.35) -> float:
    # mean-parameterized lognormal, right-skewed like token-length data
    import math

    mu = math.log(mean) - sigma * sigma / 2.0
    return rnd.lognormvariate(mu, sigma)


def _llm_unit(uid: str, model: str = "base-7b", capacity: int = DEFAULT_CAPACITY,
              bucket_count: int = DEFAULT_BUCKET_COUNT, **backend_kw) -> FunctionalUnit:
    return FunctionalUnit(
        uid,
        BackendSpec(kind=BackendKind.LLM_INFERENCE, model_id=model, **backend_kw),
        capacity=capacity,
        bucket_count=bucket_count,
    )


def _docker_unit(uid: str, image: str, warmup: float = 0.0,
                 capacity: int = DEFAULT_CAPACITY,
                 bucket_count: int = DEFAULT_BUCKET_COUNT) -> FunctionalUnit:
    return FunctionalUnit(
        uid,
        BackendSpec(kind=BackendKind.DOCKER_EXEC, image_id=image, warmup_time=warmup),
        capacity=capacity,
        bucket_count=bucket_count,
    )


def _dnn_unit(uid: str, tool: str, warmup: float = 0.0,
              capacity: int = DEFAULT_CAPACITY,
              bucket_count: int = DEFAULT_BUCKET_COUNT) -> FunctionalUnit:
    return FunctionalUnit(
        uid,
        BackendSpec(kind=BackendKind.DNN_TOOL, tool_id=tool, warmup_time=warmup),
        capacity=capacity,
        bucket_count=bucket_count,
    )


def archetype(kind: str, params: Optional[dict] = None, seed: int = 0) -> PDGraph:
    """Build a demand graph of the given family with synthetic trials."""
    if kind not in ARCHETYPE_KINDS:
        raise GraphError(f"unknown archetype kind {kind!r}")
    p = dict(params or {})
    builder = {
        "fanout-reduce": _fanout_reduce,
        "verify-chain": _verify_chain,
        "react-loop": _react_loop,
        "plan-execute": _plan_execute,
        "code-check": _code_check,
    }[kind]
    graph = builder(p, random.Random(seed))
    graph.validate()
    build_masks(graph, threshold=p.get("mask_threshold", 0.5))
    return graph


def _common(p: dict) -> tuple[int, int, int, float]:
    return (
        int(p.get("trials", 200)),
        int(p.get("capacity", DEFAULT_CAPACITY)),
        int(p.get("bucket_count", DEFAULT_BUCKET_COUNT)),
        float(p.get("scale", 1.0)),
    )


def _fanout_reduce(p: dict, rnd: random.Random) -> PDGraph:
    trials, cap, bc, scale = _common(p)
    fanout = int(p.get("fanout", 8))
    g = PDGraph(p.get("app_id", "fanout-reduce"), "split")
    for u in (
        _llm_unit("split", capacity=cap, bucket_count=bc),
        _llm_unit("map", capacity=cap, bucket_count=bc),
        _llm_unit("reduce", capacity=cap, bucket_count=bc),
    ):
        g.add_unit(u)
    for t in range(trials):
        split_out = _lognormal(rnd, 800 * scale)
        map_out = _lognormal(rnd, 3000 * scale)
        reduce_in = map_out * fanout * 0.4 + 500
        trial = {
            "split": UnitRecord(t, input_len=_lognormal(rnd, 2000), output_len=split_out,
                                next_unit="map"),
            "map": UnitRecord(t, input_len=split_out + 400, output_len=map_out,
                              parallelism=fanout, next_unit="reduce"),
            "reduce": UnitRecord(t, input_len=reduce_in,
                                 output_len=0.25 * reduce_in + _lognormal(rnd, 400)),
        }
        record_trial(g, trial)
    return g


def _verify_chain(p: dict, rnd: random.Random) -> PDGraph:
    trials, cap, bc, scale = _common(p)
    bimodal = bool(p.get("bimodal", False))
    heavy_prob = float(p.get("heavy_prob", 0.3))
    heavy_factor = float(p.get("heavy_factor", 15.0))
    g = PDGraph(p.get("app_id", "verify-chain"), "extract")
    for u in (
        _llm_unit("extract", capacity=cap, bucket_count=bc),
        _llm_unit("verify", capacity=cap, bucket_count=bc),
        _llm_unit("revise", capacity=cap, bucket_count=bc),
    ):
        g.add_unit(u)
    for t in range(trials):
        mode = heavy_factor if (bimodal and rnd.random() < heavy_prob) else 1.0
        extract_out = _lognormal(rnd, 250 * scale * mode, sigma=0.2)
        verify_out = 0.6 * extract_out + _lognormal(rnd, 40 * scale, sigma=0.2)
        revise_in = verify_out + 200
        trial = {
            "extract": UnitRecord(t, input_len=_lognormal(rnd, 1200),
                                  output_len=extract_out, next_unit="verify"),
            "verify": UnitRecord(t, input_len=extract_out + 300,
                                 output_len=verify_out, next_unit="revise"),
            "revise": UnitRecord(t, input_len=revise_in,
                                 output_len=0.9 * revise_in + _lognormal(rnd, 30, sigma=0.2)),
        }
        record_trial(g, trial)
    return g


def _react_loop(p: dict, rnd: random.Random) -> PDGraph:
    trials, cap, bc, scale = _common(p)
    loop_back = float(p.get("loop_back", 0.6))
    g = PDGraph(p.get("app_id", "react-loop"), "think")
    g.add_unit(_llm_unit("think", capacity=cap, bucket_count=bc))
    g.add_unit(_llm_unit("answer", capacity=cap, bucket_count=bc))
    for t in range(trials):
        think_out = _lognormal(rnd, 120 * scale)
        loops = rnd.random() < loop_back
        trial = {
            "think": UnitRecord(t, input_len=_lognormal(rnd, 900),
                                output_len=think_out,
                                next_unit="think" if loops else "answer"),
        }
        if not loops:
            trial["answer"] = UnitRecord(t, input_len=think_out + 250,
                                         output_len=_lognormal(rnd, 200 * scale))
        record_trial(g, trial)
    return g


def _plan_execute(p: dict, rnd: random.Random) -> PDGraph:
    trials, cap, bc, scale = _common(p)
    p_docker = float(p.get("p_docker", 0.5))
    p_dnn = float(p.get("p_dnn", 0.3))
    docker_warm = float(p.get("docker_warmup", 20.0))
    dnn_warm = float(p.get("dnn_warmup", 12.0))
    g = PDGraph(p.get("app_id", "plan-execute"), "plan")
    g.add_unit(_llm_unit("plan", capacity=cap, bucket_count=bc))
    g.add_unit(_docker_unit("run-code", "python-sandbox", warmup=docker_warm,
                            capacity=cap, bucket_count=bc))
    g.add_unit(_dnn_unit("run-tool", "vision-tool", warmup=dnn_warm,
                         capacity=cap, bucket_count=bc))
    g.add_unit(_llm_unit("summarize", capacity=cap, bucket_count=bc))
    for t in range(trials):
        plan_out = _lognormal(rnd, 1800 * scale)
        r = rnd.random()
        if r < p_docker:
            branch = "run-code"
        elif r < p_docker + p_dnn:
            branch = "run-tool"
        else:
            branch = "summarize"
        trial = {
            "plan": UnitRecord(t, input_len=_lognormal(rnd, 1500),
                               output_len=plan_out, next_unit=branch),
            "summarize": UnitRecord(t, input_len=plan_out * 0.5 + 600,
                                    output_len=_lognormal(rnd, 2500 * scale)),
        }
        if branch == "run-code":
            trial["run-code"] = UnitRecord(t, duration=_lognormal(rnd, 40 * scale),
                                           next_unit="summarize")
        elif branch == "run-tool":
            trial["run-tool"] = UnitRecord(t, duration=_lognormal(rnd, 25 * scale),
                                           next_unit="summarize")
        record_trial(g, trial)
    return g


def _code_check(p: dict, rnd: random.Random) -> PDGraph:
    trials, cap, bc, scale = _common(p)
    fail_p = float(p.get("fail_p", 0.35))
    docker_warm = float(p.get("docker_warmup", 20.0))
    g = PDGraph(p.get("app_id", "code-check"), "generate")
    g.add_unit(_llm_unit("generate", capacity=cap, bucket_count=bc))
    g.add_unit(_docker_unit("execute", "python-sandbox", warmup=docker_warm,
                            capacity=cap, bucket_count=bc))
    g.add_unit(_llm_unit("report", capacity=cap, bucket_count=bc))
    for t in range(trials):
        gen_out = _lognormal(rnd, 1000 * scale)
        fails = rnd.random() < fail_p
        trial = {
            "generate": UnitRecord(t, input_len=_lognormal(rnd, 1400),
                                   output_len=gen_out, next_unit="execute"),
            "execute": UnitRecord(t, duration=_lognormal(rnd, 30 * scale),
                                  next_unit="generate" if fails else "report"),
        }
        if not fails:
            trial["report"] = UnitRecord(t, input_len=gen_out * 0.3 + 400,
                                         output_len=_lognormal(rnd, 600 * scale))
        record_trial(g, trial)
    return g


# --- experiment suites ---


def build_default_suite(seed: int = 0, trials: int = 200,
                        bucket_count: int = DEFAULT_BUCKET_COUNT
                        ) -> tuple[dict[str, PDGraph], dict[str, list[str]]]:
    """Default application mix: size classes map to standalone-time bands
    (small < 1 min, medium 1-10 min, large > 10 min at reference rates)."""
    common = {"trials": trials, "bucket_count": bucket_count}
    graphs = {
        "small-verify": archetype("verify-chain", {**common, "scale": 1.0,
                                                   "app_id": "small-verify"}, seed + 1),
        "small-react": archetype("react-loop", {**common, "scale": 1.0,
                                                "app_id": "small-react"}, seed + 2),
        "small-code": archetype("code-check", {**common, "scale": 0.6,
                                               "app_id": "small-code"}, seed + 3),
        "medium-plan": archetype("plan-execute", {**common, "scale": 2.0,
                                                  "app_id": "medium-plan"}, seed + 4),
        "medium-code": archetype("code-check", {**common, "scale": 2.5,
                                                "app_id": "medium-code"}, seed + 5),
        "large-merge": archetype("fanout-reduce", {**common, "scale": 4.0,
                                                   "app_id": "large-merge"}, seed + 6),
    }
    class_apps = {
        "small": ["small-verify", "small-react", "small-code"],
        "medium": ["medium-plan", "medium-code"],
        "large": ["large-merge"],
    }
    return graphs, class_apps


def build_deadline_suite(seed: int = 0, trials: int = 60
                         ) -> tuple[dict[str, PDGraph], dict[str, list[str]]]:
    """Deadline-study mix: chat-style apps that live on the LLM backend and
    pipeline apps whose demand is dominated by a long non-LLM tail stage.

    The pipeline apps need only a sliver of LLM time up front, so a
    demand-aware deadline policy can slot them in early and let the tail run
    off the contended backend; a deadline-only ordering keeps them queued
    behind every chat app with an earlier deadline.
    """
    graphs: dict[str, PDGraph] = {}
    class_apps: dict[str, list[str]] = {"small": [], "heavy": []}
    for i, out_mean in enumerate((300.0, 400.0, 500.0)):
        rnd = random.Random(seed * 101 + i)
        app_id = f"chat-{i}"
        g = PDGraph(app_id, "answer")
        g.add_unit(_llm_unit("answer"))
        for t in range(trials):
            record_trial(g, {
                "answer": UnitRecord(
                    t,
                    input_len=1500 + rnd.randint(-300, 300),
                    output_len=max(50.0, rnd.gauss(out_mean, out_mean * 0.1)),
                ),
            })
        g.validate()
        graphs[app_id] = g
        class_apps["small"].append(app_id)
    for i, tail_mean in enumerate((50.0, 70.0, 90.0)):
        rnd = random.Random(seed * 101 + 10 + i)
        app_id = f"pipe-{i}"
        g = PDGraph(app_id, "plan")
        g.add_unit(_llm_unit("plan"))
        g.add_unit(_docker_unit("run", f"pipe-image-{i}"))
        for t in range(trials):
            record_trial(g, {
                "plan": UnitRecord(t, input_len=400 + rnd.randint(-50, 50),
                                   output_len=10 + rnd.randint(0, 5),
                                   next_unit="run"),
                "run": UnitRecord(t, duration=max(1.0, rnd.gauss(
                    tail_mean, tail_mean * 0.1))),
            })
        g.validate()
        graphs[app_id] = g
        class_apps["heavy"].append(app_id)
    return graphs, class_apps


def build_point_mass_suite(seed: int = 0, n_variants: int = 5,
                           trials: int = 50) -> tuple[dict[str, PDGraph], dict[str, list[str]]]:
    """Deterministic chains with point-mass demands (Gittins degenerates to
    remaining time on these)."""
    rnd = random.Random(seed)
    graphs = {}
    ids = []
    for v in range(n_variants):
        app_id = f"pm-{v}"
        out_a = float(rnd.choice([250, 500, 1000, 2000, 4000]))
        out_b = float(rnd.choice([250, 500, 1500, 3000]))
        g = PDGraph(app_id, "stage-a")
        g.add_unit(_llm_unit("stage-a"))
        g.add_unit(_llm_unit("stage-b"))
        for t in range(trials):
            record_trial(g, {
                "stage-a": UnitRecord(t, input_len=1000.0, output_len=out_a,
                                      next_unit="stage-b"),
                "stage-b": UnitRecord(t, input_len=800.0, output_len=out_b),
            })
        g.validate()
        graphs[app_id] = g
        ids.append(app_id)
    return graphs, {"small": ids}


def build_cache_suite(seed: int = 0, n_contents: int = 24, trials: int = 60,
                      load_time: float = 8.0
                      ) -> tuple[dict[str, PDGraph], dict[str, list[str]], dict[str, float]]:
    """Two-unit chains whose second unit needs a per-variant KV prefix.

    Returns graphs, class map, and the content-id -> size map (1 GB each;
    sweep capacities against the total footprint).
    """
    rnd = random.Random(seed)
    graphs = {}
    ids = []
    sizes = {}
    for v in range(n_contents):
        app_id = f"rag-{v}"
        kv = f"kv-{v}"
        sizes[kv] = 1.0
        g = PDGraph(app_id, "draft")
        g.add_unit(_llm_unit("draft"))
        g.add_unit(_llm_unit("answer", kv_prefix_id=kv, warmup_time=load_time))
        for t in range(trials):
            record_trial(g, {
                "draft": UnitRecord(t, input_len=_lognormal(rnd, 1200),
                                    output_len=_lognormal(rnd, 600), next_unit="answer"),
                "answer": UnitRecord(t, input_len=_lognormal(rnd, 2000),
                                     output_len=_lognormal(rnd, 500)),
            })
        g.validate()
        graphs[app_id] = g
        ids.append(app_id)
    return graphs, {"small": ids}, sizes


def build_knob_suite(seed: int = 0, trials: int = 50, stage_duration: float = 45.0,
                     tool_warmup: float = 30.0, tool_duration: float = 20.0,
                     n_graphs: int = 40
                     ) -> tuple[dict[str, PDGraph], dict[str, list[str]]]:
    """Point-mass two-stage tool graphs with spread branch probabilities.

    Stage durations are degenerate so the prewarm trigger grid is identical
    for every knob value; the knob then only gates which branches are
    prewarmed. Each graph carries a distinct tool image, so whether its
    tool runs warm is decided solely by that graph's own prewarm plan.
    """
    probs = [0.15, 0.35, 0.55, 0.75, 0.95]
    graphs = {}
    ids = []
    for v in range(n_graphs):
        p_branch = probs[v % len(probs)]
        app_id = f"knob-{v}"
        g = PDGraph(app_id, "work")
        g.add_unit(_docker_unit("work", "base-image", warmup=0.0))
        g.add_unit(_docker_unit("tool", f"tool-image-{v}", warmup=tool_warmup))
        n_taken = int(round(p_branch * trials))
        for t in range(trials):
            taken = t < n_taken
            trial = {
                "work": UnitRecord(t, duration=stage_duration,
                                   next_unit="tool" if taken else None),
            }
            if taken:
                trial["tool"] = UnitRecord(t, duration=tool_duration)
            record_trial(g, trial)
        g.validate()
        graphs[app_id] = g
        ids.append(app_id)
    return graphs, {"small": ids}


def build_refinement_suite(seed: int = 0, trials: int = 300
                           ) -> tuple[dict[str, PDGraph], dict[str, list[str]]]:
    """Bimodal verification chains with strong upstream-downstream
    correlation: observing the first unit reveals whether the run is light
    or heavy, which conditioning exploits."""
    g = archetype(
        "verify-chain",
        {
            "trials": trials,
            "scale": 1.0,
            "bimodal": True,
            "heavy_prob": 0.3,
            "heavy_factor": 15.0,
            "app_id": "bimodal-verify",
        },
        seed + 11,
    )
    return {"bimodal-verify": g}, {"small": ["bimodal-verify"]}
