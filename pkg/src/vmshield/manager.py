"""Task splitting, VM provisioning and placement, and forecast-driven migration."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .core import (Application, ConfigurationError, ResourceVector, Server,
                   Task, Vm, VmState, rv_add, rv_fits, rv_sum, size_key)
from .security import SecurityVerdict, action_record, apply_verdict
from .state import DatacenterState

log = logging.getLogger(__name__)

MAX_FAN_OUT = 16


class PolicyError(ValueError):
    pass


class UnsatisfiableTaskError(ValueError):
    pass


class AdmissionRejected(RuntimeError):
    pass


class NotOverloaded(ValueError):
    """handle_overload called on a server whose forecast fits."""


class NotUnderloaded(ValueError):
    pass


class IncompleteApplication(ValueError):
    pass


@dataclass(frozen=True)
class VmFlavor:
    name: str
    capacity: ResourceVector


class Reason(str, enum.Enum):
    OVERLOAD = "overload"
    UNDERLOAD = "underload"
    SECURITY = "security"


@dataclass
class MigrationPlan:
    moves: list[tuple[int, int, int]] = field(default_factory=list)  # (vm, source, target)
    shutdowns: list[int] = field(default_factory=list)
    reason: Reason = Reason.OVERLOAD
    unresolved: bool = False

    def __bool__(self):
        return bool(self.moves or self.shutdowns)


def flavor_reference(catalogue: Sequence[VmFlavor]) -> ResourceVector:
    """Per-component maximum over the catalogue; the size-key normaliser."""
    if not catalogue:
        raise ConfigurationError("flavor catalogue is empty")
    return ResourceVector(*(max(f.capacity.as_tuple()[i] for f in catalogue) for i in range(4)))


def sorted_catalogue(catalogue: Sequence[VmFlavor]) -> list[VmFlavor]:
    ref = flavor_reference(catalogue)
    out = sorted(catalogue, key=lambda f: size_key(f.capacity, ref))
    keys = [size_key(f.capacity, ref) for f in out]
    if any(a == b for a, b in zip(keys, keys[1:])):
        raise ConfigurationError("flavors must have distinct size keys")
    return out


def split_application(app: Application, n: int = 1, durations=1, first_task_id: int = 0,
                      max_fan_out: int = MAX_FAN_OUT) -> list[Task]:
    """Partition ``app.demand`` into ``n`` equal tasks."""
    demand = app.demand
    if demand is None or demand.max_component() <= 0:
        raise PolicyError(f"application {app.id} has no demand")
    if n < 1 or n > max_fan_out:
        raise PolicyError(f"fan-out {n} outside 1..{max_fan_out}")
    if isinstance(durations, int):
        durations = [durations] * n
    share = demand.scale(1.0 / n)
    return [Task(first_task_id + i, share, int(durations[i])) for i in range(n)]


def provision_vm(task: Task, catalogue: Sequence[VmFlavor], vm_id: int = 0,
                 owner_user: Optional[int] = None, application_id: Optional[int] = None,
                 now: int = 0) -> Vm:
    """Smallest flavor (by size key) whose capacity covers the task demand."""
    for flavor in sorted_catalogue(catalogue):
        if rv_fits(task.demand, flavor.capacity):
            return Vm(vm_id, flavor.capacity, owner_user, application_id,
                      flavor=flavor.name, created_at=now)
    raise UnsatisfiableTaskError(f"no flavor fits task {task.id} demand {task.demand}")


def _remaining_key(server: Server, used: ResourceVector, demand: ResourceVector,
                   ref: ResourceVector) -> float:
    return size_key(server.capacity - rv_add(used, demand), ref)


def choose_server(demand: ResourceVector, state: DatacenterState, exclude: Iterable[int] = (),
                  allow_power_on: bool = True,
                  used: Optional[Mapping[int, ResourceVector]] = None,
                  assume_active: Iterable[int] = ()) -> Optional[int]:
    """Best-fit server for ``demand``; ``None`` when nothing fits.

    Active servers are preferred, tightest remaining capacity first (lowest id on
    ties). Otherwise the smallest Off server that fits is chosen. ``used`` and
    ``assume_active`` override server loads and power states, letting planners
    reason about tentative moves.
    """
    exclude = set(exclude)
    assume_active = set(assume_active)
    best, best_key = None, None
    for s in state.servers.values():
        if s.id in exclude or not (s.active or s.id in assume_active):
            continue
        load = used.get(s.id, s.used) if used is not None else s.used
        if not rv_fits(rv_add(load, demand), s.capacity):
            continue
        key = (_remaining_key(s, load, demand, state.size_ref), s.id)
        if best_key is None or key < best_key:
            best, best_key = s.id, key
    if best is not None or not allow_power_on:
        return best
    for s in state.servers.values():
        if s.id in exclude or s.active or s.id in assume_active \
                or not rv_fits(demand, s.capacity):
            continue
        key = (size_key(s.capacity, state.size_ref), s.id)
        if best_key is None or key < best_key:
            best, best_key = s.id, key
    return best


def place_vm(vm: Vm, state: DatacenterState, exclude: Iterable[int] = ()) -> int:
    """Choose a host for a new VM and admit it; powers an Off server on if needed."""
    target = choose_server(vm.capacity, state, exclude)
    if target is None:
        raise AdmissionRejected(f"no server can host VM {vm.id} ({vm.capacity})")
    state.add_vm(vm, target)
    return target


def is_overloaded(forecast: ResourceVector, capacity: ResourceVector, margin: float = 1.0) -> bool:
    return any(f > margin * c for f, c in zip(forecast.as_tuple(), capacity.as_tuple()))


def vm_size_order(vms: Iterable[Vm], ref: ResourceVector) -> list[Vm]:
    """Largest capacity first; lowest id breaks ties."""
    return sorted(vms, key=lambda v: (-size_key(v.capacity, ref), v.id))


def handle_overload(server: Server, vm_forecasts: Mapping[int, ResourceVector],
                    state: DatacenterState, margin: float = 1.0) -> MigrationPlan:
    """Migrate the largest VMs off a server whose forecast exceeds its capacity.

    VMs are taken in descending size order until the forecast of those left
    behind fits; each is then given a best-fit target other than ``server``.
    If some selected VM has nowhere to go it stays put and the plan is marked
    ``unresolved``.
    """
    hosted = [state.vms[v] for v in server.hosted_vm_ids]
    total = rv_sum(vm_forecasts[v.id] for v in hosted)
    if not is_overloaded(total, server.capacity, margin):
        raise NotOverloaded(f"server {server.id} forecast {total} fits its capacity")
    plan = MigrationPlan(reason=Reason.OVERLOAD)
    order = vm_size_order(hosted, state.size_ref)
    cut = 0
    while cut < len(order) and is_overloaded(
            rv_sum(vm_forecasts[v.id] for v in order[cut:]), server.capacity, margin):
        cut += 1
    selected = order[:cut]
    used = {s.id: s.used for s in state.servers.values()}
    powered = set()
    for vm in selected:
        target = choose_server(vm.capacity, state, exclude={server.id}, used=used,
                               assume_active=powered)
        if target is not None and not state.servers[target].active:
            powered.add(target)
        if target is None:
            plan.unresolved = True
            continue
        used[target] = rv_add(used.get(target, ResourceVector()), vm.capacity)
        plan.moves.append((vm.id, server.id, target))
    return plan


def handle_underload(server: Server, vm_forecasts: Mapping[int, ResourceVector],
                     threshold: float, state: DatacenterState,
                     exclude: Iterable[int] = ()) -> MigrationPlan:
    """Empty an underloaded server onto other Active servers and shut it down.

    All-or-nothing: if any hosted VM cannot be re-homed the plan is empty.
    """
    if not server.active:
        raise NotUnderloaded(f"server {server.id} is not active")
    hosted = [state.vms[v] for v in sorted(server.hosted_vm_ids)]
    forecast = rv_sum(vm_forecasts[v.id] for v in hosted)
    ratio = max(f / c for f, c in zip(forecast.as_tuple(), server.capacity.as_tuple()))
    if ratio >= threshold:
        raise NotUnderloaded(f"server {server.id} forecast ratio {ratio:.3f} >= {threshold}")
    excluded = set(exclude) | {server.id}
    used = {s.id: s.used for s in state.servers.values()}
    plan = MigrationPlan(reason=Reason.UNDERLOAD)
    for vm in vm_size_order(hosted, state.size_ref):
        target = choose_server(vm.capacity, state, exclude=excluded, allow_power_on=False, used=used)
        if target is None:
            return MigrationPlan(reason=Reason.UNDERLOAD)
        used[target] = rv_add(used[target], vm.capacity)
        plan.moves.append((vm.id, server.id, target))
    plan.shutdowns.append(server.id)
    return plan


def apply_plan(plan: MigrationPlan, state: DatacenterState, now: int) -> list[dict]:
    actions = []
    for vm_id, source, target in plan.moves:
        vm = state.vms.get(vm_id)
        if vm is None or vm.state is not VmState.ACTIVE or vm.host_server != source:
            continue
        if not state.servers[target].active:
            actions.append(action_record(now, "power_on", target, None, None, plan.reason.value))
        state.migrate(vm_id, target)
        actions.append(action_record(now, "migrate", vm_id, source, target, plan.reason.value))
    for sid in plan.shutdowns:
        if state.servers[sid].hosted_vm_ids:
            continue
        state.power_off(sid)
        actions.append(action_record(now, "power_off", sid, None, None, plan.reason.value))
    return actions


@dataclass
class CycleOutcome:
    actions: list[dict] = field(default_factory=list)
    unresolved_overloads: int = 0
    terminated: list[int] = field(default_factory=list)


def server_forecast(server: Server, vm_forecasts: Mapping[int, ResourceVector]) -> ResourceVector:
    return rv_sum(vm_forecasts[v] for v in server.hosted_vm_ids)


def management_cycle(state: DatacenterState, vm_forecasts: Mapping[int, ResourceVector],
                     verdict: Optional[SecurityVerdict], now: Optional[int] = None,
                     underload_threshold: float = 0.2, overload_margin: float = 1.0,
                     consolidate: bool = True, relocate_victims: bool = False) -> CycleOutcome:
    """One control step: security terminations, then overload, then underload.

    Server forecasts are re-derived from the per-VM forecasts of whatever each
    server hosts at the start of every step, so earlier steps are reflected in
    later ones.
    """
    now = state.now if now is None else now
    out = CycleOutcome()

    if verdict is not None and not verdict.empty:
        acts = apply_verdict(verdict, state)
        out.actions.extend(acts)
        out.terminated.extend(a["subject"] for a in acts)
        if relocate_victims:
            victims = sorted({v for l in verdict.unauthorized_links for v in l.pair
                              if v in state.vms and state.vms[v].active})
            for v in victims:
                vm = state.vms[v]
                target = choose_server(vm.capacity, state, exclude={vm.host_server})
                if target is None:
                    continue
                plan = MigrationPlan([(v, vm.host_server, target)], reason=Reason.SECURITY)
                out.actions.extend(apply_plan(plan, state, now))

    forecasts = {v: f for v, f in vm_forecasts.items()
                 if v in state.vms and state.vms[v].active}

    for sid in sorted(state.servers):
        server = state.servers[sid]
        if not server.active or not server.hosted_vm_ids:
            continue
        if not is_overloaded(server_forecast(server, forecasts), server.capacity, overload_margin):
            continue
        plan = handle_overload(server, forecasts, state, overload_margin)
        if plan.unresolved:
            out.unresolved_overloads += 1
            log.warning("t=%s overload on server %s unresolved", now, sid)
        out.actions.extend(apply_plan(plan, state, now))

    if consolidate:
        receivers: set[int] = set()
        candidates = []
        for s in state.active_servers():
            f = server_forecast(s, forecasts)
            ratio = max(a / c for a, c in zip(f.as_tuple(), s.capacity.as_tuple()))
            if ratio < underload_threshold:
                candidates.append((ratio, s.id))
        shut: set[int] = set()
        for _, sid in sorted(candidates):
            server = state.servers[sid]
            if sid in receivers or not server.active:
                continue
            plan = handle_underload(server, forecasts, underload_threshold, state,
                                    exclude=shut)
            if not plan:
                continue
            receivers.update(t for _, _, t in plan.moves)
            shut.update(plan.shutdowns)
            out.actions.extend(apply_plan(plan, state, now))
    return out


def integrate_results(app: Application, now: int) -> dict:
    """Close an application whose tasks have all finished (or failed)."""
    if any(t.finished_at is None and not t.failed for t in app.tasks):
        raise IncompleteApplication(f"application {app.id} still has running tasks")
    if any(t.failed for t in app.tasks):
        app.failed = True
    finished = [t.finished_at for t in app.tasks if t.finished_at is not None]
    app.completion_time = max(finished) if finished else now
    return {"t": now, "event": "failed" if app.failed else "completed",
            "application": app.id, "completion_time": app.completion_time}
