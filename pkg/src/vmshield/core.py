"""Domain types and capacity arithmetic shared by the rest of the package."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

RESOURCE_NAMES = ("cpu", "memory", "disk", "bandwidth")
_INF = math.inf


class ModelError(ValueError):
    """A domain-model invariant was violated."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class ResourceVector:
    """Quantity of (cpu, memory MiB, disk GiB, bandwidth Mbps)."""

    cpu: float = 0.0
    memory: float = 0.0
    disk: float = 0.0
    bandwidth: float = 0.0

    def __post_init__(self):
        # chained comparisons reject NaN as well as negatives and infinities
        if not (0.0 <= self.cpu < _INF and 0.0 <= self.memory < _INF
                and 0.0 <= self.disk < _INF and 0.0 <= self.bandwidth < _INF):
            self._reject()

    def _reject(self):
        for name in RESOURCE_NAMES:
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ArithmeticError(f"resource component {name} is not finite: {v}")
            if v < 0:
                raise ModelError(f"resource component {name} is negative: {v}")

    @classmethod
    def of(cls, values: Iterable[float]) -> ResourceVector:
        return cls(*(float(v) for v in values))

    @classmethod
    def zero(cls) -> ResourceVector:
        return _ZERO

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cpu, self.memory, self.disk, self.bandwidth)

    def __iter__(self):
        return iter(self.as_tuple())

    def __add__(self, other: ResourceVector) -> ResourceVector:
        return rv_add(self, other)

    def __sub__(self, other: ResourceVector) -> ResourceVector:
        # Callers only subtract a component-wise smaller vector (load removal).
        return ResourceVector(
            max(self.cpu - other.cpu, 0.0),
            max(self.memory - other.memory, 0.0),
            max(self.disk - other.disk, 0.0),
            max(self.bandwidth - other.bandwidth, 0.0),
        )

    def scale(self, factor: float) -> ResourceVector:
        return ResourceVector(self.cpu * factor, self.memory * factor,
                              self.disk * factor, self.bandwidth * factor)

    def max_component(self) -> float:
        return max(self.as_tuple())


_ZERO = ResourceVector()


def rv_add(a: ResourceVector, b: ResourceVector) -> ResourceVector:
    """Component-wise sum; raises ``ArithmeticError`` if a component overflows."""
    return ResourceVector(a.cpu + b.cpu, a.memory + b.memory,
                          a.disk + b.disk, a.bandwidth + b.bandwidth)


def rv_fits(demand: ResourceVector, capacity: ResourceVector) -> bool:
    return (demand.cpu <= capacity.cpu and demand.memory <= capacity.memory
            and demand.disk <= capacity.disk and demand.bandwidth <= capacity.bandwidth)


def rv_sum(vectors: Iterable[ResourceVector]) -> ResourceVector:
    cpu = mem = disk = bw = 0.0
    for v in vectors:
        cpu += v.cpu
        mem += v.memory
        disk += v.disk
        bw += v.bandwidth
    return ResourceVector(cpu, mem, disk, bw)


def size_key(capacity: ResourceVector, reference: ResourceVector) -> float:
    """Scalar size: mean of components normalised by ``reference`` (largest flavor)."""
    total = 0.0
    for c, r in zip(capacity.as_tuple(), reference.as_tuple()):
        if r <= 0:
            raise ConfigurationError("size reference has a zero component")
        total += c / r
    return total / 4.0


class PowerState(enum.Enum):
    ACTIVE = "active"
    OFF = "off"


class VmState(enum.Enum):
    ACTIVE = "active"
    MIGRATING = "migrating"
    TERMINATED = "terminated"




@dataclass
class Server:
    id: int
    capacity: ResourceVector
    power_state: PowerState = PowerState.OFF
    hosted_vm_ids: set[int] = field(default_factory=set)
    # Running sum of hosted VM capacities, kept in step with hosted_vm_ids.
    used: ResourceVector = field(default_factory=ResourceVector)

    @property
    def active(self) -> bool:
        return self.power_state is PowerState.ACTIVE

    def remaining(self) -> ResourceVector:
        return self.capacity - self.used

    def can_host(self, demand: ResourceVector) -> bool:
        return rv_fits(self.used + demand, self.capacity)


@dataclass
class Vm:
    id: int
    capacity: ResourceVector
    owner_user: Optional[int]
    application_id: Optional[int]
    host_server: Optional[int] = None
    state: VmState = VmState.ACTIVE
    flavor: str = ""
    is_attacker: bool = False
    created_at: int = 0
    terminated_at: Optional[int] = None
    # "completed" | "security" | None
    terminated_reason: Optional[str] = None

    @property
    def active(self) -> bool:
        return self.state is VmState.ACTIVE


@dataclass
class Task:
    id: int
    demand: ResourceVector
    duration: int
    assigned_vm: Optional[int] = None
    started_at: Optional[int] = None
    finished_at: Optional[int] = None
    failed: bool = False

    def __post_init__(self):
        if self.duration <= 0:
            raise ModelError(f"task {self.id} duration must be > 0")


@dataclass
class Application:
    id: int
    user: int
    tasks: list[Task]
    arrival_time: int
    completion_time: Optional[int] = None
    failed: bool = False
    # Total resource demand before splitting into tasks.
    demand: Optional[ResourceVector] = None


@dataclass(frozen=True, slots=True)
class Link:
    """Unordered pair of distinct VM ids; equality and hashing ignore order."""

    a: int
    b: int
    established_at: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.a == self.b:
            raise ModelError(f"self-link on VM {self.a}")
        if self.a > self.b:
            lo, hi = self.b, self.a
            object.__setattr__(self, "a", lo)
            object.__setattr__(self, "b", hi)

    @property
    def pair(self) -> tuple[int, int]:
        return (self.a, self.b)

    def __contains__(self, vm_id: int) -> bool:
        return vm_id == self.a or vm_id == self.b


def pair_of(a: int, b: int) -> tuple[int, int]:
    if a == b:
        raise ModelError(f"self-link on VM {a}")
    return (a, b) if a < b else (b, a)


def server_utilization(server: Server, vms: Iterable[Vm]) -> tuple[float, float, float, float]:
    """Per-component ratio of summed VM capacity to server capacity."""
    vms = list(vms)
    for vm in vms:
        if vm.host_server != server.id:
            raise ModelError(f"VM {vm.id} is not hosted on server {server.id}")
    load = rv_sum(vm.capacity for vm in vms)
    out = []
    for used, cap in zip(load.as_tuple(), server.capacity.as_tuple()):
        if cap <= 0:
            raise ConfigurationError(f"server {server.id} has a zero-capacity component")
        out.append(used / cap)
    return tuple(out)


def capacity_violations(servers: Iterable[Server], vms: dict[int, Vm]) -> list[str]:
    """Describe every broken capacity/placement invariant; empty when the state is sound."""
    problems = []
    seen: dict[int, int] = {}
    for s in servers:
        if not s.active and s.hosted_vm_ids:
            problems.append(f"server {s.id} is off but hosts {sorted(s.hosted_vm_ids)}")
        load = rv_sum(vms[v].capacity for v in s.hosted_vm_ids)
        if not rv_fits(load, s.capacity):
            problems.append(f"server {s.id} over capacity: {load} > {s.capacity}")
        for v in s.hosted_vm_ids:
            vm = vms[v]
            if not vm.active:
                problems.append(f"server {s.id} hosts non-active VM {v} ({vm.state.value})")
            if vm.host_server != s.id:
                problems.append(f"VM {v} listed on server {s.id} but points at {vm.host_server}")
            if v in seen:
                problems.append(f"VM {v} hosted on both {seen[v]} and {s.id}")
            seen[v] = s.id
    for vm in vms.values():
        if vm.active and vm.id not in seen:
            problems.append(f"active VM {vm.id} is not hosted anywhere")
    return problems
