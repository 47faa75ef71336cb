"""Workload manager: resource plans, pools, mappings, triggers, borrowing.

One plan is active at a time. Incoming queries are routed to a pool by the
first matching mapping, receive alloc_fraction * total / parallelism bytes of
memory, and either run, borrow an idle slot from another pool, or queue FIFO.
Borrowed slots are revoked as soon as the owning pool needs them; the evicted
query is signalled to re-admit. Trigger rules watch live metrics and fire at
most once per (rule, query), moving the query to another pool or killing it.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import WorkloadError
from .sql import ast

DEFAULT_TOTAL_BUDGET = 1 << 30
TICK_MS = 100
DEFAULT_QUEUE_CAP = 64

DISABLED = "DISABLED"
ACTIVE = "ACTIVE"

QUEUED = "QUEUED"
RUNNING = "RUNNING"
KILLED = "KILLED"
REQUEUED = "REQUEUED"
DONE = "DONE"

_METRIC_ALIASES = {"total_runtime": "total_runtime_ms"}
_METRICS = ("total_runtime_ms", "rows_scanned")
_OPS = {
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


@dataclass
class Pool:
    name: str
    alloc_fraction: float
    query_parallelism: int


@dataclass
class TriggerRule:
    name: str
    metric: str
    op: str
    value: float
    action: str  # MOVE | KILL
    target_pool: str | None = None
    pools: set = field(default_factory=set)  # attachment points


@dataclass
class Mapping:
    kind: str  # USER | GROUP | APPLICATION
    key: str
    pool: str


@dataclass
class ResourcePlan:
    name: str
    pools: list = field(default_factory=list)
    mappings: list = field(default_factory=list)
    rules: list = field(default_factory=list)
    default_pool: str | None = None
    status: str = DISABLED

    def pool(self, name: str) -> Pool | None:
        for p in self.pools:
            if p.name == name:
                return p
        return None

    def validate(self) -> None:
        if not self.pools:
            raise WorkloadError(f"plan {self.name} has no pools")
        total = 0.0
        seen = set()
        for p in self.pools:
            if p.name in seen:
                raise WorkloadError(f"duplicate pool {p.name}")
            seen.add(p.name)
            if not (0.0 < p.alloc_fraction <= 1.0):
                raise WorkloadError(
                    f"pool {p.name}: alloc_fraction must be in (0, 1]")
            if p.query_parallelism < 1:
                raise WorkloadError(
                    f"pool {p.name}: query_parallelism must be positive")
            total += p.alloc_fraction
        if total > 1.0 + 1e-9:
            raise WorkloadError(
                f"plan {self.name}: allocation fractions sum to {total:.3f}")
        for m in self.mappings:
            if m.pool not in seen:
                raise WorkloadError(f"mapping targets unknown pool {m.pool}")
        for r in self.rules:
            if r.metric not in _METRICS:
                raise WorkloadError(f"rule {r.name}: unknown metric {r.metric}")
            if r.op not in _OPS:
                raise WorkloadError(f"rule {r.name}: unknown operator {r.op}")
            if r.action == "MOVE":
                if r.target_pool not in seen:
                    raise WorkloadError(
                        f"rule {r.name} moves to unknown pool {r.target_pool}")
            elif r.action != "KILL":
                raise WorkloadError(f"rule {r.name}: unknown action {r.action}")
            for pname in r.pools:
                if pname not in seen:
                    raise WorkloadError(
                        f"rule {r.name} attached to unknown pool {pname}")
        if self.default_pool is not None and self.default_pool not in seen:
            raise WorkloadError(f"unknown default pool {self.default_pool}")


# ----------------------------------------------------------- serialization


def plan_to_doc(plan: ResourcePlan) -> dict:
    return {
        "name": plan.name,
        "status": plan.status,
        "default_pool": plan.default_pool,
        "pools": [[p.name, p.alloc_fraction, p.query_parallelism]
                  for p in plan.pools],
        "mappings": [[m.kind, m.key, m.pool] for m in plan.mappings],
        "rules": [[r.name, r.metric, r.op, r.value, r.action, r.target_pool,
                   sorted(r.pools)] for r in plan.rules],
    }


def plan_from_doc(doc: dict) -> ResourcePlan:
    return ResourcePlan(
        name=doc["name"],
        status=doc.get("status", DISABLED),
        default_pool=doc.get("default_pool"),
        pools=[Pool(n, f, q) for n, f, q in doc.get("pools", ())],
        mappings=[Mapping(k, key, p) for k, key, p in doc.get("mappings", ())],
        rules=[TriggerRule(n, m, o, v, a, t, set(ps))
               for n, m, o, v, a, t, ps in doc.get("rules", ())],
    )


# ------------------------------------------------------------------ grants


@dataclass
class QueryGrant:
    query_id: str
    home_pool: str  # pool the mappings chose
    pool: str  # pool currently billed (changes on MOVE)
    slot_pool: str | None  # pool whose slot is occupied; None while queued
    memory_budget_bytes: int
    state: str
    user: str | None = None
    group: str | None = None
    application: str | None = None
    kill_event: threading.Event = field(default_factory=threading.Event)
    kill_reason: str = ""
    requeued: bool = False
    slot_event: threading.Event = field(default_factory=threading.Event)
    started_at: float | None = None
    rows_scanned: int = 0
    metrics_fn: object = None  # optional live metrics source

    @property
    def borrowed(self) -> bool:
        return self.slot_pool is not None and self.slot_pool != self.pool


class WorkloadManager:
    """Single-scheduler admission control and trigger evaluation."""

    def __init__(self, catalog=None, total_budget_bytes: int = DEFAULT_TOTAL_BUDGET,
                 clock=time.monotonic, queue_cap: int = DEFAULT_QUEUE_CAP):
        self.catalog = catalog
        self.total_budget_bytes = total_budget_bytes
        self.clock = clock
        self.queue_cap = queue_cap
        self._mu = threading.RLock()
        self._plans: dict[str, ResourcePlan] = {}
        self._active: str | None = None
        self._occupancy: dict[str, int] = {}
        self._queues: dict[str, deque] = {}
        self._grants: dict[str, QueryGrant] = {}
        self._fired: set = set()
        self.trace: list[tuple] = []
        self._ticker = None
        self._stop = threading.Event()
        if catalog is not None:
            self._load()

    # -------------------------------------------------------- plan storage

    def _load(self) -> None:
        for name, doc in self.catalog.resource_plans().items():
            self._plans[name] = plan_from_doc(doc)
        active = self.catalog.active_plan()
        if active in self._plans:
            self._active = active
            self._plans[active].status = ACTIVE
            for p in self._plans[active].pools:
                self._occupancy.setdefault(p.name, 0)
                self._queues.setdefault(p.name, deque())

    def _persist(self, plan: ResourcePlan) -> None:
        if self.catalog is not None:
            self.catalog.store_resource_plan(plan.name, plan_to_doc(plan))

    def define_plan(self, plan: ResourcePlan) -> None:
        with self._mu:
            if plan.name in self._plans:
                raise WorkloadError(f"resource plan {plan.name} already exists")
            self._plans[plan.name] = plan
            self._persist(plan)

    def get_plan(self, name: str) -> ResourcePlan:
        with self._mu:
            plan = self._plans.get(name)
            if plan is None:
                raise WorkloadError(f"no such resource plan {name}")
            return plan

    @property
    def active_plan(self) -> ResourcePlan | None:
        with self._mu:
            return self._plans.get(self._active) if self._active else None

    def _editable(self, name: str) -> ResourcePlan:
        plan = self.get_plan(name)
        if plan.status == ACTIVE:
            raise WorkloadError(f"plan {name} is active; disable it to edit")
        return plan

    def activate(self, name: str) -> None:
        with self._mu:
            plan = self.get_plan(name)
            plan.validate()
            if self._active == name:
                return  # already active; activation is idempotent
            prev = self._plans.get(self._active) if self._active else None
            if prev is not None:
                prev.status = DISABLED
                self._persist(prev)
            plan.status = ACTIVE
            self._active = name
            pool_names = {p.name for p in plan.pools}
            for p in plan.pools:
                self._occupancy.setdefault(p.name, 0)
                self._queues.setdefault(p.name, deque())
            # queued queries whose pool vanished cannot run under this plan
            for pname in list(self._queues):
                if pname not in pool_names:
                    for g in self._queues[pname]:
                        g.state = KILLED
                        g.kill_reason = f"pool {pname} removed by plan {name}"
                        g.kill_event.set()
                        g.slot_event.set()
                    del self._queues[pname]
            self._persist(plan)
            if self.catalog is not None:
                self.catalog.set_active_plan(name)
            self._note("activate", "", "", name)

    def deactivate(self, name: str) -> None:
        with self._mu:
            plan = self.get_plan(name)
            if self._active == name:
                self._active = None
                if self.catalog is not None:
                    self.catalog.set_active_plan(None)
            plan.status = DISABLED
            self._persist(plan)

    # ---------------------------------------------------------------- DDL

    def apply_statement(self, stmt) -> str:
        if isinstance(stmt, ast.CreateResourcePlan):
            self.define_plan(ResourcePlan(stmt.name))
            return f"created resource plan {stmt.name}"
        if isinstance(stmt, ast.CreatePool):
            with self._mu:
                plan = self._editable(stmt.plan)
                if plan.pool(stmt.pool) is not None:
                    raise WorkloadError(f"pool {stmt.pool} already exists")
                plan.pools.append(
                    Pool(stmt.pool, stmt.alloc_fraction, stmt.query_parallelism))
                self._persist(plan)
            return f"created pool {stmt.plan}.{stmt.pool}"
        if isinstance(stmt, ast.CreateRule):
            with self._mu:
                plan = self._editable(stmt.plan)
                if any(r.name == stmt.name for r in plan.rules):
                    raise WorkloadError(f"rule {stmt.name} already exists")
                metric = _METRIC_ALIASES.get(stmt.metric, stmt.metric)
                plan.rules.append(TriggerRule(
                    stmt.name, metric, stmt.op, stmt.value,
                    stmt.action.upper(), stmt.target_pool))
                self._persist(plan)
            return f"created rule {stmt.name}"
        if isinstance(stmt, ast.AddRuleToPool):
            with self._mu:
                plan = self._rule_plan(stmt.rule)
                rule = next(r for r in plan.rules if r.name == stmt.rule)
                rule.pools.add(stmt.pool)
                self._persist(plan)
            return f"attached rule {stmt.rule} to {stmt.pool}"
        if isinstance(stmt, ast.CreateMapping):
            with self._mu:
                plan = self._editable(stmt.plan)
                plan.mappings.append(Mapping(stmt.kind, stmt.key, stmt.pool))
                self._persist(plan)
            return f"created {stmt.kind.lower()} mapping"
        if isinstance(stmt, ast.AlterPlanDefaultPool):
            with self._mu:
                plan = self._editable(stmt.plan)
                plan.default_pool = stmt.pool
                self._persist(plan)
            return f"default pool of {stmt.plan} is {stmt.pool}"
        if isinstance(stmt, ast.AlterResourcePlan):
            if stmt.disable:
                self.deactivate(stmt.plan)
                return f"disabled resource plan {stmt.plan}"
            if stmt.activate or stmt.enable:
                self.activate(stmt.plan)
                return f"activated resource plan {stmt.plan}"
            return f"resource plan {stmt.plan} unchanged"
        raise WorkloadError(f"not a workload statement: {stmt!r}")

    def _rule_plan(self, rule_name: str) -> ResourcePlan:
        for plan in self._plans.values():
            if any(r.name == rule_name for r in plan.rules):
                if plan.status == ACTIVE:
                    raise WorkloadError(
                        f"plan {plan.name} is active; disable it to edit")
                return plan
        raise WorkloadError(f"no such rule {rule_name}")

    # ----------------------------------------------------------- admission

    def pool_budget(self, pool: Pool) -> int:
        return int(pool.alloc_fraction * self.total_budget_bytes
                   / pool.query_parallelism)

    def map_pool(self, user=None, group=None, application=None) -> str:
        plan = self.active_plan
        if plan is None:
            raise WorkloadError("no active resource plan")
        for m in plan.mappings:
            if m.kind == "USER" and user == m.key:
                return m.pool
            if m.kind == "GROUP" and group == m.key:
                return m.pool
            if m.kind == "APPLICATION" and application == m.key:
                return m.pool
        if plan.default_pool is None:
            raise WorkloadError("query matches no mapping and plan has no "
                                "default pool")
        return plan.default_pool

    def admit(self, query_id: str, user=None, group=None, application=None,
              wait: bool = True, timeout: float | None = None) -> QueryGrant:
        with self._mu:
            plan = self.active_plan
            if plan is None:
                raise WorkloadError("no active resource plan")
            home = self.map_pool(user, group, application)
            pool = plan.pool(home)
            grant = QueryGrant(
                query_id=query_id, home_pool=home, pool=home, slot_pool=None,
                memory_budget_bytes=self.pool_budget(pool), state=QUEUED,
                user=user, group=group, application=application)
            self._grants[query_id] = grant
            if self._occupancy[home] < pool.query_parallelism:
                self._start(grant, home)
            else:
                lender = self._find_idle_pool(plan, home)
                if lender is not None:
                    self._start(grant, lender)
                    self._note("borrow", query_id, home, lender)
                else:
                    victim = self._find_borrower(home)
                    if victim is not None:
                        self._reclaim(victim)
                        self._start(grant, home)
                    else:
                        q = self._queues.setdefault(home, deque())
                        if len(q) >= self.queue_cap:
                            del self._grants[query_id]
                            raise WorkloadError(f"pool {home} queue is full")
                        q.append(grant)
                        self._note("queue", query_id, home, "")
        if grant.state == QUEUED and wait:
            if not grant.slot_event.wait(timeout):
                with self._mu:
                    if grant.state == QUEUED:
                        self._remove_queued(grant)
                        del self._grants[query_id]
                raise WorkloadError(f"admission timeout in pool {home}")
        return grant

    def _start(self, grant: QueryGrant, slot_pool: str) -> None:
        self._occupancy[slot_pool] = self._occupancy.get(slot_pool, 0) + 1
        grant.slot_pool = slot_pool
        grant.state = RUNNING
        grant.started_at = self.clock()
        grant.slot_event.set()
        self._note("run", grant.query_id, grant.pool, slot_pool)

    def _find_idle_pool(self, plan: ResourcePlan, home: str) -> str | None:
        for p in plan.pools:
            if p.name == home:
                continue
            if self._occupancy.get(p.name, 0) < p.query_parallelism \
                    and not self._queues.get(p.name):
                return p.name
        return None

    def _find_borrower(self, pool: str) -> QueryGrant | None:
        for g in self._grants.values():
            if g.state == RUNNING and g.slot_pool == pool and g.pool != pool:
                return g
        return None

    def _reclaim(self, grant: QueryGrant) -> None:
        """Revoke a borrowed slot; the query must re-admit."""
        self._free_slot(grant)
        grant.state = REQUEUED
        grant.requeued = True
        grant.kill_reason = "slot reclaimed by owning pool"
        grant.kill_event.set()
        self._grants.pop(grant.query_id, None)
        self._note("reclaim", grant.query_id, grant.pool, grant.slot_pool or "")

    def _free_slot(self, grant: QueryGrant) -> None:
        if grant.slot_pool is not None:
            self._occupancy[grant.slot_pool] = max(
                0, self._occupancy.get(grant.slot_pool, 0) - 1)
            grant.slot_pool = None

    def _remove_queued(self, grant: QueryGrant) -> None:
        for q in self._queues.values():
            try:
                q.remove(grant)
                return
            except ValueError:
                continue

    def release(self, grant: QueryGrant) -> None:
        with self._mu:
            if grant.state == RUNNING:
                self._free_slot(grant)
            grant.state = DONE if grant.state in (RUNNING, DONE) else grant.state
            self._grants.pop(grant.query_id, None)
            self._note("done", grant.query_id, grant.pool, "")
            self._schedule()

    def _schedule(self) -> None:
        plan = self._plans.get(self._active) if self._active else None
        if plan is None:
            return
        for p in plan.pools:
            q = self._queues.get(p.name)
            while q and self._occupancy.get(p.name, 0) < p.query_parallelism:
                grant = q.popleft()
                self._start(grant, p.name)
        # heads may still borrow an idle slot elsewhere
        for p in plan.pools:
            q = self._queues.get(p.name)
            while q:
                lender = self._find_idle_pool(plan, p.name)
                if lender is None:
                    break
                grant = q.popleft()
                self._start(grant, lender)
                self._note("borrow", grant.query_id, p.name, lender)

    # ------------------------------------------------------------ triggers

    def _metric_value(self, grant: QueryGrant, metric: str, now: float):
        if grant.metrics_fn is not None:
            live = grant.metrics_fn()
            if metric in live:
                return live[metric]
        if metric == "total_runtime_ms":
            if grant.started_at is None:
                return 0.0
            return (now - grant.started_at) * 1000.0
        if metric == "rows_scanned":
            return grant.rows_scanned
        return 0.0

    def tick(self) -> list[tuple]:
        """Evaluate triggers for all running queries; promote queued ones."""
        actions = []
        with self._mu:
            plan = self._plans.get(self._active) if self._active else None
            if plan is None:
                return actions
            now = self.clock()
            for grant in list(self._grants.values()):
                if grant.state != RUNNING:
                    continue
                for rule in plan.rules:
                    if grant.pool not in rule.pools:
                        continue
                    if (rule.name, grant.query_id) in self._fired:
                        continue
                    value = self._metric_value(grant, rule.metric, now)
                    if not _OPS[rule.op](value, rule.value):
                        continue
                    self._fired.add((rule.name, grant.query_id))
                    if rule.action == "KILL":
                        self._kill(grant, rule)
                        actions.append((grant.query_id, rule.name, "KILL", ""))
                    else:
                        self._move(grant, plan, rule)
                        actions.append(
                            (grant.query_id, rule.name, "MOVE", rule.target_pool))
                    break  # first satisfied rule wins this tick
            self._schedule()
        return actions

    def _kill(self, grant: QueryGrant, rule: TriggerRule) -> None:
        self._free_slot(grant)
        grant.state = KILLED
        grant.kill_reason = f"killed by workload trigger {rule.name}"
        grant.kill_event.set()
        self._grants.pop(grant.query_id, None)
        self._note("kill", grant.query_id, grant.pool, rule.name)

    def _move(self, grant: QueryGrant, plan: ResourcePlan,
              rule: TriggerRule) -> None:
        target = plan.pool(rule.target_pool)
        self._free_slot(grant)
        grant.pool = target.name
        grant.memory_budget_bytes = self.pool_budget(target)
        if self._occupancy.get(target.name, 0) < target.query_parallelism:
            self._start(grant, target.name)
        else:
            # target full: wait at the head of its queue for the next slot
            grant.state = QUEUED
            grant.slot_event.clear()
            self._queues.setdefault(target.name, deque()).appendleft(grant)
        self._note("move", grant.query_id, grant.home_pool, target.name)

    # -------------------------------------------------------------- ticker

    def start(self, tick_ms: int = TICK_MS) -> None:
        if self._ticker is not None:
            return
        self._stop.clear()

        def loop():
            while not self._stop.wait(tick_ms / 1000.0):
                self.tick()

        self._ticker = threading.Thread(target=loop, daemon=True)
        self._ticker.start()

    def stop(self) -> None:
        self._stop.set()
        if self._ticker is not None:
            self._ticker.join(timeout=2.0)
            self._ticker = None

    # --------------------------------------------------------------- misc

    def _note(self, kind: str, query_id: str, pool: str, detail) -> None:
        self.trace.append((self.clock(), kind, query_id, pool, str(detail)))

    def snapshot(self) -> dict:
        """Occupancy and queue depths, for inspection and tests."""
        with self._mu:
            return {
                "active": self._active,
                "occupancy": dict(self._occupancy),
                "queued": {k: len(v) for k, v in self._queues.items()},
                "running": sorted(g.query_id for g in self._grants.values()
                                  if g.state == RUNNING),
            }
