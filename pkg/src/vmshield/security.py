"""Authorized-link database, live link log, and the audit that compares them."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .core import Link, ModelError, Vm, VmState

POLICIES = ("both", "unregistered_only")


class StaleLinkError(ValueError):
    """A link was reported for a VM that is no longer active."""


@dataclass
class Avad:
    authorized_pairs: set[tuple[int, int]] = field(default_factory=set)
    group_of: dict[int, int] = field(default_factory=dict)
    members: dict[int, set[int]] = field(default_factory=dict)

    def register(self, application_id: int, vm_ids: Iterable[int]) -> None:
        vm_ids = sorted(set(vm_ids))
        for v in vm_ids:
            owner = self.group_of.get(v)
            if owner is not None and owner != application_id:
                raise ModelError(
                    f"VM {v} serves applications {owner} and {application_id}")
        group = self.members.setdefault(application_id, set())
        group.update(vm_ids)
        for v in vm_ids:
            self.group_of[v] = application_id
        for a, b in itertools.combinations(sorted(group), 2):
            self.authorized_pairs.add((a, b))

    def unregister_application(self, application_id: int) -> None:
        group = self.members.pop(application_id, set())
        for v in group:
            self.group_of.pop(v, None)
        for a, b in itertools.combinations(sorted(group), 2):
            self.authorized_pairs.discard((a, b))

    def authorizes(self, pair: tuple[int, int]) -> bool:
        return pair in self.authorized_pairs


def build_avad(applications, task_assignments: Mapping[int, int]) -> Avad:
    """Complete graph over each application's VMs.

    ``task_assignments`` maps task id to VM id; every task of every
    application must be assigned.
    """
    avad = Avad()
    for app in applications:
        vms = []
        for task in app.tasks:
            vm = task_assignments.get(task.id, task.assigned_vm)
            if vm is None:
                raise ModelError(f"task {task.id} of application {app.id} is unassigned")
            vms.append(vm)
        avad.register(app.id, vms)
    return avad


@dataclass
class CvalEntry:
    link: Link
    first_seen: int
    last_seen: int


class Cval:
    """Live link log: one entry per unordered VM pair, in first-seen order."""

    def __init__(self):
        self._entries: dict[tuple[int, int], CvalEntry] = {}
        self._by_vm: dict[int, set[tuple[int, int]]] = {}

    def __len__(self):
        return len(self._entries)

    def __contains__(self, pair):
        if isinstance(pair, Link):
            pair = pair.pair
        return pair in self._entries

    @property
    def entries(self) -> list[CvalEntry]:
        return list(self._entries.values())

    def get(self, pair) -> Optional[CvalEntry]:
        if isinstance(pair, Link):
            pair = pair.pair
        return self._entries.get(pair)

    def observe(self, link: Link, now: int) -> CvalEntry:
        e = self._entries.get(link.pair)
        if e is None:
            e = self._entries[link.pair] = CvalEntry(Link(link.a, link.b, now), now, now)
            self._by_vm.setdefault(link.a, set()).add(link.pair)
            self._by_vm.setdefault(link.b, set()).add(link.pair)
        elif now > e.last_seen:
            e.last_seen = now
        return e

    def live(self, now: int, window: int) -> list[CvalEntry]:
        return [e for e in self._entries.values() if e.last_seen >= now - window]

    def remove(self, pairs: Iterable[tuple[int, int]]) -> None:
        for p in list(pairs):
            if self._entries.pop(p, None) is not None:
                for v in p:
                    self._by_vm[v].discard(p)
                    if not self._by_vm[v]:
                        del self._by_vm[v]

    def drop_vm(self, vm_id: int) -> None:
        """Forget every link touching ``vm_id``."""
        self.remove(self._by_vm.get(vm_id, ()))

    def prune(self, before: int) -> None:
        """Forget entries last seen strictly before ``before``."""
        self.remove([p for p, e in self._entries.items() if e.last_seen < before])


def observe_link(cval: Cval, link: Link, now: int,
                 vms: Optional[Mapping[int, Vm]] = None) -> Cval:
    if vms is not None:
        for v in link.pair:
            vm = vms.get(v)
            if vm is None or vm.state is VmState.TERMINATED:
                raise StaleLinkError(f"link {link.pair} has non-active endpoint {v}")
    cval.observe(link, now)
    return cval


@dataclass(frozen=True)
class SecurityVerdict:
    unauthorized_links: frozenset[Link]
    attacker_vm_ids: frozenset[int]
    issued_at: int
    policy: str = "both"

    @property
    def empty(self) -> bool:
        return not self.unauthorized_links and not self.attacker_vm_ids

    def to_json(self, terminated: Iterable[int] = ()) -> str:
        return json.dumps({
            "t": self.issued_at,
            "unauthorized": sorted([l.a, l.b] for l in self.unauthorized_links),
            "terminated": sorted(terminated),
            "policy": self.policy,
        }, separators=(",", ":"))


def identify_attackers(unauthorized_links: Iterable[Link], avad: Avad,
                       policy: str = "both") -> set[int]:
    """Endpoints held responsible for unauthorized links.

    Unregistered endpoints are always attackers. When both endpoints belong to
    registered applications, ``policy="both"`` flags both of them and
    ``"unregistered_only"`` flags neither.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown attacker policy {policy!r}")
    attackers = set()
    for link in unauthorized_links:
        unknown = [v for v in link.pair if v not in avad.group_of]
        if unknown:
            attackers.update(unknown)
        elif policy == "both":
            attackers.update(link.pair)
    return attackers


def audit(cval: Cval, avad: Avad, now: int, window: int = 1,
          policy: str = "both") -> SecurityVerdict:
    """Compare live links (last seen within ``window`` ticks) against ``avad``."""
    bad = frozenset(e.link for e in cval.live(now, window)
                    if e.link.pair not in avad.authorized_pairs)
    attackers = frozenset(identify_attackers(bad, avad, policy)) if bad else frozenset()
    return SecurityVerdict(bad, attackers, now, policy)


def apply_verdict(verdict: SecurityVerdict, state) -> list[dict]:
    """Terminate attacker VMs and drop unauthorized links from the live log.

    Re-applying a verdict is a no-op for VMs that are already terminated.
    """
    actions = []
    for vm_id in sorted(verdict.attacker_vm_ids):
        vm = state.vms.get(vm_id)
        if vm is None or vm.state is VmState.TERMINATED:
            continue
        source = vm.host_server
        state.terminate_vm(vm_id, verdict.issued_at, reason="security")
        actions.append(action_record(verdict.issued_at, "terminate", vm_id,
                                     source, None, "security"))
    state.cval.remove(l.pair for l in verdict.unauthorized_links)
    return actions


def action_record(t, action, subject, source=None, target=None, reason=None) -> dict:
    return {"t": t, "action": action, "subject": subject,
            "from": source, "to": target, "reason": reason}


__all__ = [
    "Avad", "Cval", "CvalEntry", "SecurityVerdict", "StaleLinkError", "POLICIES",
    "build_avad", "observe_link", "audit", "identify_attackers", "apply_verdict",
    "action_record",
]
