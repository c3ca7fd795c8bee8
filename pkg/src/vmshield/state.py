"""The mutable world evolved by the event loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .core import (Application, ModelError, PowerState, ResourceVector, Server, Vm,
                   VmState, capacity_violations, rv_fits, rv_sum)
from .security import Avad, Cval


class CapacityError(ModelError):
    pass


@dataclass
class DatacenterState:
    servers: dict[int, Server]
    vms: dict[int, Vm] = field(default_factory=dict)
    applications: dict[int, Application] = field(default_factory=dict)
    avad: Avad = field(default_factory=Avad)
    cval: Cval = field(default_factory=Cval)
    # Per-component normaliser for scalar size keys (largest flavor).
    size_ref: ResourceVector = ResourceVector(1, 1, 1, 1)
    now: int = 0
    vms_created: int = 0
    # Called with (vm_id) whenever a VM leaves the Active state.
    on_retire: Optional[Callable[[int], None]] = field(default=None, repr=False)
    _next_vm_id: int = 0
    _active_ids: set[int] = field(default_factory=set, repr=False)

    @classmethod
    def from_capacities(cls, capacities: Iterable[ResourceVector], **kw) -> DatacenterState:
        servers = {i: Server(i, cap) for i, cap in enumerate(capacities)}
        return cls(servers=servers, **kw)

    def new_vm_id(self) -> int:
        vid = self._next_vm_id
        self._next_vm_id += 1
        return vid

    def active_servers(self) -> list[Server]:
        return [s for s in self.servers.values() if s.power_state is PowerState.ACTIVE]

    def active_vms(self) -> list[Vm]:
        """Active VMs in id order."""
        return [self.vms[v] for v in sorted(self._active_ids)]

    def hosted(self, server_id: int) -> list[Vm]:
        return [self.vms[v] for v in sorted(self.servers[server_id].hosted_vm_ids)]

    # -- mutation ---------------------------------------------------------

    def power_on(self, server_id: int) -> None:
        self.servers[server_id].power_state = PowerState.ACTIVE

    def power_off(self, server_id: int) -> None:
        s = self.servers[server_id]
        if s.hosted_vm_ids:
            raise ModelError(f"cannot power off server {server_id}: hosts {sorted(s.hosted_vm_ids)}")
        s.power_state = PowerState.OFF

    def add_vm(self, vm: Vm, server_id: int) -> None:
        """Register a new VM and host it on ``server_id`` (powering the server on if needed)."""
        if vm.id in self.vms:
            raise ModelError(f"VM {vm.id} already exists")
        server = self.servers[server_id]
        if not server.can_host(vm.capacity):
            raise CapacityError(f"server {server_id} cannot host VM {vm.id}")
        if not server.active:
            self.power_on(server_id)
        self.vms[vm.id] = vm
        self.vms_created += 1
        vm.state = VmState.ACTIVE
        self._active_ids.add(vm.id)
        self._attach(vm, server)

    def discard_vm(self, vm_id: int) -> None:
        """Undo :meth:`add_vm` for a VM that never started work (admission rollback)."""
        vm = self.vms.pop(vm_id)
        self._active_ids.discard(vm_id)
        self._detach(vm)
        self.vms_created -= 1

    def migrate(self, vm_id: int, target_id: int) -> None:
        vm = self.vms[vm_id]
        if not vm.active:
            raise ModelError(f"VM {vm_id} is not active")
        target = self.servers[target_id]
        if target_id == vm.host_server:
            return
        if not target.can_host(vm.capacity):
            raise CapacityError(f"server {target_id} cannot host VM {vm_id}")
        vm.state = VmState.MIGRATING
        self._detach(vm)
        if not target.active:
            self.power_on(target_id)
        self._attach(vm, target)
        vm.state = VmState.ACTIVE

    def terminate_vm(self, vm_id: int, now: int, reason: str) -> None:
        vm = self.vms[vm_id]
        if vm.state is VmState.TERMINATED:
            return
        self._detach(vm)
        self._active_ids.discard(vm_id)
        vm.state = VmState.TERMINATED
        vm.terminated_at = now
        vm.terminated_reason = reason
        self.cval.drop_vm(vm_id)
        if self.on_retire is not None:
            self.on_retire(vm_id)

    def _attach(self, vm: Vm, server: Server) -> None:
        server.hosted_vm_ids.add(vm.id)
        server.used = self._load(server)
        vm.host_server = server.id

    def _detach(self, vm: Vm) -> None:
        if vm.host_server is None:
            return
        server = self.servers[vm.host_server]
        server.hosted_vm_ids.discard(vm.id)
        server.used = self._load(server)
        vm.host_server = None

    def _load(self, server: Server) -> ResourceVector:
        # recomputed rather than accumulated so float drift cannot build up
        return rv_sum(self.vms[v].capacity for v in server.hosted_vm_ids)

    # -- checks -----------------------------------------------------------

    def violations(self) -> list[str]:
        problems = capacity_violations(self.servers.values(), self.vms)
        counts = {s: 0 for s in VmState}
        for vm in self.vms.values():
            counts[vm.state] += 1
        if sum(counts.values()) != self.vms_created:
            problems.append(f"VM conservation broken: created {self.vms_created}, "
                            f"tracked {sum(counts.values())}")
        return problems

    def fits_on(self, server_id: int, demand: ResourceVector) -> bool:
        s = self.servers[server_id]
        return rv_fits(s.used + demand, s.capacity)
