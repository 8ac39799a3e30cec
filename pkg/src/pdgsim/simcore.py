"""Deterministic discrete-event execution of application workloads.

Per-application ground-truth demands are drawn once at arrival from the
demand graph (the "true" run, preferring coherent replay of a recorded
trial so cross-unit correlations survive); the scheduler sees only
distributions plus completed-unit observations. Two runs with identical
inputs produce identical event logs and metrics.
"""

from __future__ import annotations

import heapq
import logging
import random
from dataclasses import dataclass, field
from typing import Optional

from .errors import GraphError, PdgsimError
from .distributions import EmpiricalDistribution
from .estimator import (
    Observation,
    RemainingDemand,
    monte_carlo_remaining_demand,
)
from .pdgraph import BackendKind, PDGraph, RateProfile, service_time
from .prewarm import (
    CachePolicy,
    CacheState,
    PlanOutcome,
    PrewarmPlan,
    plan_prewarm,
    wastage_accounting,
)
from .sched import (
    ApplicationInstance,
    Policy,
    Priority,
    compute_priority,
    refresh_priorities,
)

log = logging.getLogger(__name__)

EVENT_KINDS = (
    "Arrival",
    "TaskDispatch",
    "TaskComplete",
    "UnitComplete",
    "AppComplete",
    "PrewarmTrigger",
    "PrewarmComplete",
    "PriorityRefresh",
)


@dataclass
class SimConfig:
    env: RateProfile = RateProfile()
    llm_slots: int = 8
    docker_pool: int = 8
    dnn_pool: int = 8
    refresh_period: float = 5.0
    preemption_enabled: bool = True
    preemption_hysteresis: float = 1.5
    mc_samples: int = 512
    bucket_count: int = 10
    knob_k: float = 0.5
    cache_policy: CachePolicy = CachePolicy.LRU
    cache_capacity: float = 1e9
    tool_cache_capacity: float = 1e18
    content_sizes: dict = field(default_factory=dict)
    default_content_size: float = 1.0
    refinement_enabled: bool = True
    overrun_penalty_factor: float = 2.0
    demand_mismatch: float = 1.0  # scale-shift injected on true draws
    visit_cap: int = 64
    keep_event_log: bool = True


@dataclass
class RealizedStage:
    unit_id: str
    requests: list  # [(input_len, output_len)] for LLM units
    duration: float  # non-LLM units
    service: float  # critical-path seconds of this stage


def realize_application(
    graph: PDGraph,
    env: RateProfile,
    rng: random.Random,
    mismatch: float = 1.0,
    visit_cap: int = 64,
) -> list[RealizedStage]:
    """Draw one ground-truth run by replaying a recorded trial.

    Revisited units (loops) and units missing from the chosen trial fall
    back to independent draws from the unit's distributions and branch
    probabilities, so looping applications terminate per their recorded
    loop-back frequency.
    """
    entry = graph.units[graph.entry_unit]
    if not entry.records:
        raise GraphError(f"graph {graph.app_id!r} has no recorded trials")
    trial_id = rng.choice([r.trial_id for r in entry.records])
    stages: list[RealizedStage] = []
    uid: Optional[str] = graph.entry_unit
    replayed: set[str] = set()
    visits = 0
    while uid is not None and visits < visit_cap:
        visits += 1
        unit = graph.units[uid]
        rec = None if uid in replayed else unit.record_by_trial(trial_id)
        if rec is not None:
            replayed.add(uid)
            if unit.is_llm:
                i, o, p = rec.input_len, rec.output_len, rec.parallelism
                dur = 0.0
            else:
                i = o = 0.0
                p = 1
                dur = rec.duration
            nxt = rec.next_unit
        else:
            if unit.is_llm:
                i = rng.choice(unit.input_dist.samples)
                o = rng.choice(unit.output_dist.samples)
                p = max(1, int(rng.choice(unit.parallelism_dist.samples)))
                dur = 0.0
            else:
                i = o = 0.0
                p = 1
                dur = rng.choice(unit.duration_dist.samples)
            r = rng.random()
            nxt = None
            acc = 0.0
            for succ, prob in sorted(unit.successors.items()):
                acc += prob
                if r < acc:
                    nxt = succ
                    break
        if unit.is_llm:
            i *= mismatch
            o *= mismatch
            svc = service_time(i, o, env)
            requests = [(i, o)] * p
            stages.append(RealizedStage(uid, requests, 0.0, svc))
        else:
            dur *= mismatch
            stages.append(RealizedStage(uid, [], dur, dur))
        uid = nxt
    return stages


def standalone_time(stages: list[RealizedStage]) -> float:
    """Un-queued critical-path execution time of one realized run."""
    return sum(s.service for s in stages)


@dataclass
class _Task:
    app: "_AppRun"
    unit_id: str
    stage_index: int
    request_index: int
    service: float
    remaining: float
    backend_name: str
    enqueue_time: float
    start_time: Optional[float] = None
    cold_delay: float = 0.0
    epoch: int = 0

    @property
    def key_id(self) -> tuple:
        return (self.app.inst.app_instance_id, self.stage_index, self.request_index)


class _Backend:
    def __init__(self, name: str, slots: int, cache: CacheState):
        self.name = name
        self.slots = slots
        self.cache = cache
        self.active: dict[tuple, _Task] = {}
        self.queue: list[_Task] = []


@dataclass
class _ActivePlan:
    plan: PrewarmPlan
    app: "_AppRun"
    source_unit: str
    target_unit: str
    content_id: str
    backend_name: str
    triggered: bool = False
    cancelled: bool = False
    resolved: bool = False


class _AppRun:
    def __init__(self, inst: ApplicationInstance, graph: PDGraph,
                 stages: list[RealizedStage], index: int):
        self.inst = inst
        self.graph = graph
        self.stages = stages
        self.index = index
        self.stage_idx = -1
        self.tasks_outstanding = 0
        self.unit_progress = 0.0  # executed service within the current stage
        self.completed_service = 0.0
        self.observations: list[Observation] = []
        self.plans: list[_ActivePlan] = []
        self.planned_stage = -1  # last stage index prewarm plans were laid for

    @property
    def current_stage(self) -> RealizedStage:
        return self.stages[self.stage_idx]


@dataclass
class SimResult:
    policy: Policy
    seed: int
    app_records: list  # dicts: arrival, completion, act, deadline, met, ...
    event_log: list
    cache_stats: dict  # backend -> {hits, misses, hit_ratio}
    prewarm_report: dict  # latency_saved, wasted_backend_time, plans, overruns
    policy_runtime_ns: list
    total_events: int


class Simulator:
    """Single-threaded deterministic event loop."""

    def __init__(
        self,
        graphs: dict[str, PDGraph],
        workload,
        policy: Policy,
        config: Optional[SimConfig] = None,
        seed: int = 0,
    ):
        self.graphs = graphs
        self.workload = workload
        self.policy = policy
        self.cfg = config or SimConfig()
        self.seed = seed
        for a in workload.arrivals:
            if a.app_id not in graphs:
                raise PdgsimError(f"workload references unknown graph {a.app_id!r}")
        if policy.needs_deadline and any(a.deadline is None for a in workload.arrivals):
            raise PdgsimError(f"policy {policy.value} requires deadlines on all arrivals")

        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.event_log: list[str] = []
        self.total_events = 0
        self.live: dict[str, _AppRun] = {}
        self.prio: dict[str, Priority] = {}
        self.tenant_service: dict[str, float] = {}
        self.policy_runtime_ns: list[int] = []
        self.plan_outcomes: list[PlanOutcome] = []
        self.app_records: list[dict] = []
        self._mc_counter = 0
        self._refresh_scheduled = False

        cfg = self.cfg
        self.backends = {
            "llm": _Backend("llm", cfg.llm_slots,
                            CacheState(cfg.cache_capacity, cfg.cache_policy)),
            "docker": _Backend("docker", cfg.docker_pool,
                               CacheState(cfg.tool_cache_capacity, cfg.cache_policy)),
            "dnn": _Backend("dnn", cfg.dnn_pool,
                            CacheState(cfg.tool_cache_capacity, cfg.cache_policy)),
        }

    # -- plumbing --

    def _schedule(self, time: float, kind: str, payload: tuple = ()) -> None:
        if time < self.now - 1e-12:
            raise PdgsimError(f"event {kind} scheduled in the past: {time} < {self.now}")
        heapq.heappush(self.heap, (time, self.seq, kind, payload))
        self.seq += 1

    def _log(self, kind: str, detail: str) -> None:
        self.total_events += 1
        if self.cfg.keep_event_log:
            self.event_log.append(f"{self.now:.9f} {kind} {detail}")

    def _backend_for(self, unit) -> str:
        if unit.backend.kind is BackendKind.LLM_INFERENCE:
            return "llm"
        if unit.backend.kind is BackendKind.DOCKER_EXEC:
            return "docker"
        return "dnn"

    def _content_size(self, content_id: str) -> float:
        return self.cfg.content_sizes.get(content_id, self.cfg.default_content_size)

    def _next_mc_seed(self) -> int:
        self._mc_counter += 1
        return (self.seed * 1000003 + self._mc_counter) & 0x7FFFFFFF

    def _update_attained(self, app: _AppRun) -> None:
        progress = app.unit_progress
        for b in self.backends.values():
            for task in b.active.values():
                if task.app is app and task.start_time is not None:
                    run = max(0.0, self.now - (task.start_time + task.cold_delay))
                    progress = max(progress, min(task.service, run))
        app.inst.attained_service = app.completed_service + progress

    # -- estimates and priorities --

    def _estimate(self, app: _AppRun, current_unit: str) -> None:
        obs = app.observations if self.cfg.refinement_enabled else []
        rem = monte_carlo_remaining_demand(
            app.graph, current_unit, obs, self.cfg.env,
            n=self.cfg.mc_samples, seed=self._next_mc_seed(),
            visit_cap=self.cfg.visit_cap,
        )
        self._update_attained(app)
        app.inst.set_remaining(rem, self.cfg.bucket_count)

    def _refresh(self, apps: list[_AppRun], force: bool = False) -> None:
        for app in apps:
            self._update_attained(app)
        res = refresh_priorities(
            [a.inst for a in apps], self.now, self.cfg.refresh_period,
            policy=self.policy, tenant_service=self.tenant_service,
            overrun_penalty_factor=self.cfg.overrun_penalty_factor,
            force=force,
        )
        self.policy_runtime_ns.append(res.elapsed_ns)
        self.prio.update(res.priorities)

    def _task_sort_key(self, task: _Task) -> tuple:
        if self.policy is Policy.FCFS_REQUEST:
            return (task.enqueue_time, task.app.inst.arrival_time,
                    task.app.inst.app_instance_id, task.stage_index, task.request_index)
        prio = self.prio[task.app.inst.app_instance_id]
        return (prio.key, *prio.tiebreak, task.stage_index, task.request_index)

    # -- lifecycle --

    def run(self) -> SimResult:
        self._realizations = realize_workload(
            self.graphs, self.workload, self.cfg, self.seed
        )
        for i, arrival in enumerate(self.workload.arrivals):
            self._schedule(arrival.time, "Arrival", (i,))
        while self.heap:
            time, seq, kind, payload = heapq.heappop(self.heap)
            self.now = time
            handler = getattr(self, f"_on_{kind}")
            handler(*payload)
        report = wastage_accounting(self.plan_outcomes)
        cache_stats = {
            name: {
                "hits": b.cache.hits,
                "misses": b.cache.misses,
                "hit_ratio": b.cache.hit_ratio,
            }
            for name, b in self.backends.items()
        }
        hits = sum(b.cache.hits for b in self.backends.values())
        misses = sum(b.cache.misses for b in self.backends.values())
        cache_stats["overall"] = {
            "hits": hits,
            "misses": misses,
            "hit_ratio": hits / (hits + misses) if hits + misses else 0.0,
        }
        return SimResult(
            policy=self.policy,
            seed=self.seed,
            app_records=sorted(self.app_records, key=lambda r: r["index"]),
            event_log=self.event_log,
            cache_stats=cache_stats,
            prewarm_report={
                "latency_saved": report.latency_saved,
                "wasted_backend_time": report.wasted_backend_time,
                "plans": len(self.plan_outcomes),
                "overruns": sum(
                    1 for r in self.app_records if r.get("overrun_flagged")
                ),
            },
            policy_runtime_ns=self.policy_runtime_ns,
            total_events=self.total_events,
        )

    def _on_Arrival(self, index: int) -> None:
        arrival = self.workload.arrivals[index]
        app_id = f"app-{index:05d}"
        inst = ApplicationInstance(
            app_instance_id=app_id,
            graph_ref=arrival.app_id,
            arrival_time=self.now,
            tenant_id=arrival.tenant_id,
            deadline=arrival.deadline,
        )
        app = _AppRun(inst, self.graphs[arrival.app_id], self._realizations[index], index)
        self.live[app_id] = app
        self._log("Arrival", f"{app_id} {arrival.app_id}")
        if self.policy.needs_estimate:
            self._estimate(app, app.graph.entry_unit)
        self.prio[app_id] = compute_priority(
            self.policy, inst, self.now, self.tenant_service,
            self.cfg.overrun_penalty_factor,
        )
        inst.last_refresh = self.now
        self._start_stage(app, 0)
        if not self._refresh_scheduled:
            self._refresh_scheduled = True
            self._schedule(self.now + self.cfg.refresh_period, "PriorityRefresh", ())

    def _start_stage(self, app: _AppRun, stage_idx: int) -> None:
        app.stage_idx = stage_idx
        app.unit_progress = 0.0
        stage = app.stages[stage_idx]
        unit = app.graph.units[stage.unit_id]
        app.inst.current_units = {stage.unit_id}
        backend_name = self._backend_for(unit)
        backend = self.backends[backend_name]
        if stage.requests:
            tasks = [
                _Task(app, stage.unit_id, stage_idx, i, stage.service, stage.service,
                      backend_name, self.now)
                for i in range(len(stage.requests))
            ]
        else:
            tasks = [
                _Task(app, stage.unit_id, stage_idx, 0, stage.duration, stage.duration,
                      backend_name, self.now)
            ]
        app.tasks_outstanding = len(tasks)
        backend.queue.extend(tasks)
        content = unit.backend.warm_content_id()
        if content is not None and self.cfg.cache_policy in (
                CachePolicy.EPWQ, CachePolicy.HERMES_PLAN):
            # prefetch the moment the request enters the waiting queue; the
            # plan-driven policy also does this, since once the request is
            # enqueued the demand is certain and any speculative warm-up that
            # was evicted in the meantime should be restarted
            backend.cache.prefetch(content, self._content_size(content), self.now,
                                   unit.backend.warmup_time)
        self._dispatch(backend)

    def _plan_prewarms(self, app: _AppRun, unit_id: str) -> None:
        unit = app.graph.units[unit_id]
        samples = self._unit_service_samples(app.graph, unit_id)
        if not samples:
            return
        completion = EmpiricalDistribution(
            [self.now + s for s in samples],
            capacity=max(len(samples), 1),
            bucket_count=self.cfg.bucket_count,
        )
        for succ, p_s in sorted(unit.successors.items()):
            target = app.graph.units[succ]
            content = target.backend.warm_content_id()
            if content is None:
                continue
            backend_name = self._backend_for(target)
            cache = self.backends[backend_name].cache
            if content in cache.entries:
                continue  # already resident (warm or warming)
            plan = plan_prewarm(
                completion, p_s, target.backend.warmup_time,
                self.cfg.knob_k, self.now, target_backend=target.backend,
            )
            if plan is None:
                continue
            active = _ActivePlan(plan, app, unit_id, succ, content, backend_name)
            app.plans.append(active)
            self._schedule(plan.trigger_time, "PrewarmTrigger",
                           (app.inst.app_instance_id, len(app.plans) - 1))

    def _unit_service_samples(self, graph: PDGraph, unit_id: str) -> list[float]:
        unit = graph.units[unit_id]
        if unit.is_llm:
            return [
                service_time(r.input_len, r.output_len, self.cfg.env)
                for r in unit.records
            ]
        return list(unit.duration_dist.samples)

    def _on_PrewarmTrigger(self, app_id: str, plan_idx: int) -> None:
        app = self.live.get(app_id)
        if app is None:
            return
        active = app.plans[plan_idx]
        if active.cancelled or active.resolved or active.triggered:
            return
        self._fire_prewarm(active)

    def _fire_prewarm(self, active: _ActivePlan) -> None:
        active.triggered = True
        active.plan.trigger_time = self.now  # effective trigger
        cache = self.backends[active.backend_name].cache
        cache.prefetch(active.content_id, self._content_size(active.content_id),
                       self.now, active.plan.t_p)
        self._log("PrewarmTrigger", f"{active.app.inst.app_instance_id} "
                                    f"{active.target_unit} {active.content_id}")
        self._schedule(self.now + active.plan.t_p, "PrewarmComplete",
                       (active.content_id, active.backend_name))

    def _on_PrewarmComplete(self, content_id: str, backend_name: str) -> None:
        self._log("PrewarmComplete", f"{backend_name} {content_id}")

    def _dispatch(self, backend: _Backend) -> None:
        while backend.queue and len(backend.active) < backend.slots:
            task = min(backend.queue, key=self._task_sort_key)
            backend.queue.remove(task)
            self._start_task(backend, task)

    def _start_task(self, backend: _Backend, task: _Task) -> None:
        unit = task.app.graph.units[task.unit_id]
        content = unit.backend.warm_content_id()
        delay = 0.0
        if content is not None:
            result = backend.cache.access(
                content, self._content_size(content), self.now,
                unit.backend.warmup_time,
            )
            delay = result.ready_at - self.now
        task.start_time = self.now
        task.cold_delay = delay
        task.epoch += 1
        backend.active[task.key_id] = task
        if (self.cfg.cache_policy is CachePolicy.HERMES_PLAN
                and task.app.planned_stage != task.stage_index):
            # plans are laid when the stage starts executing, so the
            # successor-completion estimate is not skewed by queueing delay
            task.app.planned_stage = task.stage_index
            self._plan_prewarms(task.app, task.unit_id)
        self._log("TaskDispatch",
                  f"{task.app.inst.app_instance_id} {task.unit_id} {task.request_index}")
        self._schedule(self.now + delay + task.remaining, "TaskComplete",
                       (task.key_id, task.epoch, backend.name))

    def _on_TaskComplete(self, key_id: tuple, epoch: int, backend_name: str) -> None:
        backend = self.backends[backend_name]
        task = backend.active.get(key_id)
        if task is None or task.epoch != epoch:
            return  # stale completion from a preempted incarnation
        del backend.active[key_id]
        app = task.app
        self.tenant_service[app.inst.tenant_id] = (
            self.tenant_service.get(app.inst.tenant_id, 0.0) + task.remaining
        )
        task.remaining = 0.0
        app.unit_progress = max(app.unit_progress, task.service)
        app.tasks_outstanding -= 1
        self._log("TaskComplete",
                  f"{app.inst.app_instance_id} {task.unit_id} {task.request_index}")
        if app.tasks_outstanding == 0:
            self._complete_unit(app)
        self._dispatch(backend)

    def _complete_unit(self, app: _AppRun) -> None:
        stage = app.current_stage
        app.completed_service += stage.service
        app.unit_progress = 0.0
        self._update_attained(app)
        self._log("UnitComplete", f"{app.inst.app_instance_id} {stage.unit_id}")
        next_idx = app.stage_idx + 1
        next_unit = app.stages[next_idx].unit_id if next_idx < len(app.stages) else None
        self._resolve_plans(app, stage.unit_id, next_unit)
        if stage.requests:
            i, o = stage.requests[0]
            obs = Observation(stage.unit_id, input_len=i, output_len=o,
                              parallelism=len(stage.requests),
                              completion_time=self.now)
        else:
            obs = Observation(stage.unit_id, completion_time=self.now)
        app.observations.append(obs)
        if next_unit is None:
            self._complete_app(app)
            return
        if self.policy.needs_estimate:
            self._estimate(app, next_unit)
        # a completed unit's information is adopted immediately
        app.inst.observation_pending = True
        self._refresh([app], force=True)
        self._start_stage(app, next_idx)

    def _resolve_plans(self, app: _AppRun, source_unit: str,
                       next_unit: Optional[str]) -> None:
        for active in app.plans:
            if active.resolved or active.source_unit != source_unit:
                continue
            active.resolved = True
            if active.target_unit == next_unit:
                if not active.triggered:
                    # branch resolved before the trigger: warm now, at
                    # the same moment the request enters the queue
                    self._fire_prewarm(active)
                self.plan_outcomes.append(
                    PlanOutcome(active.plan, arrived_at=self.now)
                )
            else:
                active.cancelled = True
                if active.triggered:
                    self.plan_outcomes.append(
                        PlanOutcome(active.plan, cancelled_at=self.now)
                    )

    def _complete_app(self, app: _AppRun) -> None:
        inst = app.inst
        inst.completion_time = self.now
        inst.current_units = set()
        arrival = self.workload.arrivals[app.index]
        act = self.now - inst.arrival_time
        rec = {
            "index": app.index,
            "app_instance_id": inst.app_instance_id,
            "graph": inst.graph_ref,
            "tenant": inst.tenant_id,
            "size_class": arrival.size_class,
            "arrival": inst.arrival_time,
            "completion": self.now,
            "act": act,
            "standalone": standalone_time(app.stages),
            "deadline": inst.deadline,
            "deadline_class": arrival.deadline_class,
            "met": (self.now <= inst.deadline) if inst.deadline is not None else None,
            "overrun_flagged": inst.overrun_flagged,
        }
        self.app_records.append(rec)
        del self.live[inst.app_instance_id]
        self.prio.pop(inst.app_instance_id, None)
        self._log("AppComplete", f"{inst.app_instance_id}")

    def _on_PriorityRefresh(self) -> None:
        self._log("PriorityRefresh", f"live={len(self.live)}")
        if self.live:
            apps = [self.live[k] for k in sorted(self.live)]
            self._refresh(apps)
            if self.cfg.preemption_enabled and self.policy is not Policy.FCFS_REQUEST:
                self._preempt()
            for backend in self.backends.values():
                self._dispatch(backend)
        if self.live or self.heap:
            has_arrivals = any(k == "Arrival" for _, _, k, _ in self.heap)
            if self.live or has_arrivals:
                self._schedule(self.now + self.cfg.refresh_period, "PriorityRefresh", ())
                return
        self._refresh_scheduled = False

    def _preempt(self) -> None:
        # pause an active task at the next token boundary when a waiting
        # task outranks it beyond the hysteresis
        hyst = self.cfg.preemption_hysteresis
        for backend in self.backends.values():
            if not backend.queue:
                continue
            changed = True
            while changed:
                changed = False
                if not backend.queue or not backend.active:
                    break
                wait_task = min(backend.queue, key=self._task_sort_key)
                wait_key = self._task_sort_key(wait_task)[0]
                worst = max(backend.active.values(),
                            key=lambda t: self._task_sort_key(t))
                worst_key = self._task_sort_key(worst)[0]
                if worst_key > wait_key * hyst and worst_key > wait_key:
                    executed = max(
                        0.0, self.now - (worst.start_time + worst.cold_delay)
                    )
                    executed = min(executed, worst.remaining)
                    self.tenant_service[worst.app.inst.tenant_id] = (
                        self.tenant_service.get(worst.app.inst.tenant_id, 0.0) + executed
                    )
                    worst.app.unit_progress = max(
                        worst.app.unit_progress,
                        worst.service - (worst.remaining - executed),
                    )
                    worst.remaining -= executed
                    worst.epoch += 1
                    del backend.active[worst.key_id]
                    backend.queue.append(worst)
                    self._start_task(backend, wait_task)
                    backend.queue.remove(wait_task)
                    changed = True


def realize_workload(
    graphs: dict[str, PDGraph],
    workload,
    config: SimConfig,
    seed: int,
) -> list[list[RealizedStage]]:
    """Ground-truth runs for every arrival, one seeded draw each.

    The simulator and the deadline assigner both derive true demands from
    this, so deadlines reference the same realization the run executes.
    """
    out = []
    for i, arrival in enumerate(workload.arrivals):
        rng = random.Random((seed << 16) ^ (i * 2654435761 & 0xFFFFFFFF))
        out.append(
            realize_application(
                graphs[arrival.app_id], config.env, rng,
                mismatch=config.demand_mismatch, visit_cap=config.visit_cap,
            )
        )
    return out


def run_simulation(
    graphs: dict[str, PDGraph],
    workload,
    policy: Policy,
    config: Optional[SimConfig] = None,
    seed: int = 0,
) -> SimResult:
    return Simulator(graphs, workload, policy, config, seed).run()
