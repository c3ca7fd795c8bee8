"""Deterministic tick-driven datacenter simulation.

Each tick runs, in order: task completions, application arrivals, usage
sampling and benign link traffic, attack injection and attack traffic, the
security audit, the management cycle, breach resolution and energy
accounting. Every random draw comes from a per-concern generator spawned from
the scenario seed, so two runs of the same scenario are bit-identical.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .core import Application, Link, ResourceVector, Vm, VmState, rv_fits, size_key
from .manager import (AdmissionRejected, UnsatisfiableTaskError, VmFlavor, choose_server,
                      flavor_reference, integrate_results, management_cycle, provision_vm,
                      sorted_catalogue, split_application)
from .scenario import ScenarioConfig, validate
from .security import action_record, apply_verdict, audit
from .state import DatacenterState
from .workload import WorkloadAnalyzer

log = logging.getLogger(__name__)

TICK_COLUMNS = ("tick", "energy", "active_servers", "migrations", "terminations",
                "breaches_prevented", "breaches_succeeded")


class InjectionInfeasible(RuntimeError):
    pass


class Outcome(str, enum.Enum):
    PENDING = "pending"
    PREVENTED = "prevented"
    SUCCEEDED = "succeeded"


@dataclass
class BreachAttempt:
    attacker_vm_ids: tuple[int, ...]
    target_vm_id: int
    link_established_at: int
    dwell: int
    scenario: str = ""
    outcome: Outcome = Outcome.PENDING

    @property
    def completes_at(self) -> int:
        return self.link_established_at + self.dwell


@dataclass
class Metrics:
    seed: int = 0
    energy: float = 0.0
    migrations: int = 0
    terminations: int = 0
    breaches_prevented: int = 0
    breaches_succeeded: int = 0
    breaches_pending: int = 0
    attacks_established: int = 0
    false_positive_terminations: int = 0
    sla_violations: int = 0
    active_server_ticks: int = 0
    rejections: int = 0
    applications_completed: int = 0
    applications_failed: int = 0
    unresolved_overloads: int = 0
    vms_created: int = 0
    injection_failures: int = 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


@dataclass
class SimulationResult:
    metrics: Metrics
    ticks: list[tuple] = field(default_factory=list)
    actions: list[dict] = field(default_factory=list)
    audits: list[str] = field(default_factory=list)
    attempts: list[BreachAttempt] = field(default_factory=list)
    state: Optional[DatacenterState] = None

    def ticks_csv(self) -> str:
        lines = [",".join(TICK_COLUMNS)]
        for row in self.ticks:
            t, energy, *rest = row
            lines.append(",".join([str(t), f"{energy:.6f}", *map(str, rest)]))
        return "\n".join(lines) + "\n"

    def actions_jsonl(self) -> str:
        return "".join(json.dumps(a, separators=(",", ":")) + "\n" for a in self.actions)

    def audits_jsonl(self) -> str:
        return "".join(line + "\n" for line in self.audits)


def account_energy(state: DatacenterState, p_idle: float = 0.6, p_max: float = 1.0) -> float:
    """Linear power model summed over Active servers; Off servers draw nothing."""
    total = 0.0
    for s in state.servers.values():
        if not s.active:
            continue
        util = sum(u / c for u, c in zip(s.used.as_tuple(), s.capacity.as_tuple())) / 4.0
        total += p_idle + (p_max - p_idle) * util
    return total


class Simulation:
    """One scenario run. Use :func:`run` unless you need to step manually."""

    def __init__(self, config: ScenarioConfig,
                 on_tick: Optional[Callable[[DatacenterState, int], None]] = None):
        self.cfg = validate(config)
        self.on_tick = on_tick
        root = np.random.SeedSequence(self.cfg.seed)
        (arr, use, link, atk) = root.spawn(4)
        self.rng_arrivals = np.random.default_rng(arr)
        self.rng_usage = np.random.default_rng(use)
        self.rng_links = np.random.default_rng(link)
        self.rng_attack = np.random.default_rng(atk)

        self.catalogue = sorted_catalogue(
            [VmFlavor(f.name, ResourceVector.of(f.capacity)) for f in self.cfg.flavors])
        caps = [ResourceVector.of(g.capacity) for g in self.cfg.servers for _ in range(g.count)]
        self.state = DatacenterState.from_capacities(
            caps, size_ref=flavor_reference(self.catalogue))
        p = self.cfg.predictor
        self.analyzer = WorkloadAnalyzer(p.lags, p.learning_rate, p.epochs, p.retrain_every,
                                         p.train_window, p.normalizer)
        self.state.on_retire = self.analyzer.forget

        self.metrics = Metrics(seed=self.cfg.seed)
        self.result = SimulationResult(self.metrics, state=self.state)
        self.attempts: list[BreachAttempt] = []
        self.attack_links: list[tuple[int, int]] = []
        self.phase: dict[int, float] = {}
        self.task_finish: dict[int, list[tuple[int, int]]] = {}  # tick -> [(app, task idx)]
        self.vm_task: dict[int, tuple[int, int]] = {}
        self.next_app_id = 0
        self.next_task_id = 0
        self.dummy_app_id = -1
        self.forced_moves = 0

    # -- arrivals and completions ------------------------------------------

    def _complete_tasks(self, t: int) -> None:
        for app_id, idx in self.task_finish.pop(t, ()):
            app = self.state.applications.get(app_id)
            task = app.tasks[idx]
            if task.failed:
                continue
            task.finished_at = t
            self.state.terminate_vm(task.assigned_vm, t, reason="completed")
            self._maybe_close(app, t)

    def _maybe_close(self, app: Application, t: int) -> None:
        if any(task.finished_at is None and not task.failed for task in app.tasks):
            return
        integrate_results(app, t)
        if app.failed:
            self.metrics.applications_failed += 1
            self.metrics.sla_violations += 1
        else:
            self.metrics.applications_completed += 1
        self.state.avad.unregister_application(app.id)
        del self.state.applications[app.id]

    def _arrivals(self, t: int) -> None:
        a = self.cfg.arrivals
        rng = self.rng_arrivals
        for _ in range(int(rng.poisson(a.rate))):
            demand = ResourceVector.of(rng.uniform(a.demand_min, a.demand_max))
            durations = [int(d) for d in rng.integers(a.duration_min, a.duration_max + 1,
                                                      size=a.fan_out)]
            user = int(rng.integers(a.users))
            app = Application(self.next_app_id, user, [], t, demand=demand)
            self.next_app_id += 1
            self._admit(app, durations, t)

    def _admit(self, app: Application, durations: list[int], t: int) -> None:
        a = self.cfg.arrivals
        tasks = split_application(app, a.fan_out, durations, self.next_task_id, a.max_fan_out)
        self.next_task_id += len(tasks)
        app.tasks = tasks
        placed = []
        try:
            for task in tasks:
                vm = provision_vm(task, self.catalogue, self.state.new_vm_id(), app.user, app.id, t)
                target = choose_server(vm.capacity, self.state)
                if target is None:
                    raise AdmissionRejected(f"application {app.id}: no host for VM {vm.id}")
                powered = not self.state.servers[target].active
                self.state.add_vm(vm, target)
                placed.append((vm, target, powered))
                task.assigned_vm = vm.id
        except (AdmissionRejected, UnsatisfiableTaskError) as exc:
            for vm, target, powered in reversed(placed):
                self.state.discard_vm(vm.id)
                if powered and not self.state.servers[target].hosted_vm_ids:
                    self.state.power_off(target)
            log.info("t=%s reject: %s", t, exc)
            self.metrics.rejections += 1
            self.metrics.sla_violations += 1
            self.result.actions.append(action_record(t, "reject", app.id, None, None, str(exc)))
            return
        for vm, target, powered in placed:
            if powered:
                self.result.actions.append(action_record(t, "power_on", target, None, None,
                                                         "placement"))
            self.phase[vm.id] = float(self.rng_usage.uniform(0, self.cfg.usage.period))
        for idx, task in enumerate(tasks):
            task.started_at = t
            self.task_finish.setdefault(t + task.duration, []).append((app.id, idx))
            self.vm_task[task.assigned_vm] = (app.id, idx)
        self.state.applications[app.id] = app
        self.state.avad.register(app.id, [task.assigned_vm for task in tasks])

    # -- usage and links ---------------------------------------------------

    def _sample_usage(self, t: int, vms: list[Vm]) -> None:
        if not vms:
            return
        u = self.cfg.usage
        phase = np.array([self.phase.setdefault(v.id, 0.0) for v in vms])
        wave = u.base + u.amplitude * np.sin(2 * np.pi * (t + phase) / u.period)
        noise = self.rng_usage.standard_normal((len(vms), 4)) * u.noise
        frac = np.clip(wave[:, None] + noise, 0.0, 1.0)
        caps = np.array([v.capacity.as_tuple() for v in vms])
        usage = frac * caps
        for vm, row in zip(vms, usage):
            self.analyzer.record(t, vm.id, vm.host_server, ResourceVector(*row.tolist()))

    def _benign_links(self, t: int) -> None:
        p = self.cfg.link_probability
        vms = self.state.vms
        for app_id in sorted(self.state.applications):
            app = self.state.applications[app_id]
            alive = sorted(task.assigned_vm for task in app.tasks
                           if vms[task.assigned_vm].state is VmState.ACTIVE)
            if len(alive) < 2:
                continue
            pairs = [(a, b) for i, a in enumerate(alive) for b in alive[i + 1:]]
            draw = self.rng_links.random(len(pairs))
            for (a, b), r in zip(pairs, draw):
                if r < p:
                    self.state.cval.observe(Link(a, b), t)

    # -- attacks -----------------------------------------------------------

    def _attacker_flavor(self) -> VmFlavor:
        name = self.cfg.attack.flavor
        if name is None:
            return self.catalogue[0]
        return next(f for f in self.catalogue if f.name == name)

    def _victim_candidates(self, t: int, colocate: bool) -> list[Vm]:
        """Benign VMs that can be attacked, longest-lived preferred.

        A victim must outlive the first audit after the attack lands, otherwise
        the unauthorized link disappears before anyone can see it.
        """
        flavor = self._attacker_flavor()
        need = max(self.cfg.audit_interval, self.cfg.breach_dwell_time) + 1
        out = []
        for vm in sorted(self.state.active_vms(), key=lambda v: v.id):
            if vm.is_attacker or vm.id not in self.vm_task:
                continue
            if colocate and not self.state.servers[vm.host_server].can_host(flavor.capacity):
                continue
            app_id, idx = self.vm_task[vm.id]
            task = self.state.applications[app_id].tasks[idx]
            if task.started_at + task.duration - t >= need:
                out.append(vm)
        return out

    def _spawn_attacker(self, t: int, server_id: Optional[int]) -> Vm:
        flavor = self._attacker_flavor()
        vm = Vm(self.state.new_vm_id(), flavor.capacity, owner_user=None, application_id=None,
                flavor=flavor.name, is_attacker=True, created_at=t)
        if server_id is None:
            server_id = choose_server(vm.capacity, self.state)
            if server_id is None:
                raise InjectionInfeasible("no server can host an attacker VM")
        powered = not self.state.servers[server_id].active
        self.state.add_vm(vm, server_id)
        if powered:
            self.result.actions.append(action_record(t, "power_on", server_id, None, None,
                                                     "placement"))
        self.phase[vm.id] = float(self.rng_attack.uniform(0, self.cfg.usage.period))
        return vm

    def _register_masquerade(self, attackers: list[Vm]) -> None:
        if self.cfg.attack.masquerade:
            for vm in attackers:
                vm.application_id = self.dummy_app_id
            self.state.avad.register(self.dummy_app_id, [vm.id for vm in attackers])
            self.dummy_app_id -= 1

    def _make_room(self, t: int, victim: Vm, demand: ResourceVector, keep=()) -> bool:
        """Migrate one co-hosted bystander off the victim's server so ``demand`` fits there."""
        host = self.state.servers[victim.host_server]
        if host.can_host(demand):
            return True
        ref = self.state.size_ref
        others = sorted((self.state.vms[v] for v in host.hosted_vm_ids
                         if v != victim.id and v not in keep),
                        key=lambda v: (size_key(v.capacity, ref), v.id))
        for vm in others:
            if vm.is_attacker or not rv_fits(demand, host.remaining() + vm.capacity):
                continue
            target = choose_server(vm.capacity, self.state, exclude={host.id})
            if target is None:
                continue
            if not self.state.servers[target].active:
                self.result.actions.append(action_record(t, "power_on", target, None, None,
                                                         "placement"))
            self.state.migrate(vm.id, target)
            self.result.actions.append(action_record(t, "migrate", vm.id, host.id, target,
                                                     "forced_colocation"))
            self.metrics.migrations += 1
            self.forced_moves += 1
            return True
        return False

    def inject_co_residency(self, t: int) -> list[BreachAttempt]:
        return self.inject_multi_hijack(t, m=1)

    def inject_multi_hijack(self, t: int, m: Optional[int] = None) -> list[BreachAttempt]:
        m = self.cfg.attack.count if m is None else m
        flavor = self._attacker_flavor()
        candidates = self._victim_candidates(t, colocate=True)
        order = self.rng_attack.permutation(len(candidates)) if candidates else []
        victims = []
        for i in order:
            if len(victims) == m:
                break
            vm = candidates[int(i)]
            if self.state.servers[vm.host_server].can_host(flavor.capacity):
                attacker = self._spawn_attacker(t, vm.host_server)
                victims.append((attacker, vm))
        if len(victims) < m:
            # every reachable host is full: force co-location by evicting a bystander
            taken = {v.id for _, v in victims}
            rest = [v for v in self._victim_candidates(t, colocate=False) if v.id not in taken]
            for i in (self.rng_attack.permutation(len(rest)) if rest else []):
                if len(victims) == m:
                    break
                vm = rest[int(i)]
                if self._make_room(t, vm, flavor.capacity, keep=taken):
                    victims.append((self._spawn_attacker(t, vm.host_server), vm))
                    taken.add(vm.id)
        if not victims:
            raise InjectionInfeasible("no victim VM has room for a co-resident attacker")
        if len(victims) < m:
            log.warning("t=%s only %d of %d co-locations feasible", t, len(victims), m)
        self._register_masquerade([a for a, _ in victims])
        attempts = []
        for attacker, victim in victims:
            self.attack_links.append((attacker.id, victim.id))
            attempts.append(BreachAttempt((attacker.id,), victim.id, t,
                                          self.cfg.breach_dwell_time, self.cfg.attack.scenario))
        return attempts

    def inject_grouped_cascade(self, t: int) -> list[BreachAttempt]:
        L = self.cfg.attack.count
        candidates = self._victim_candidates(t, colocate=False)
        if not candidates:
            raise InjectionInfeasible("no target VM available")
        target = candidates[int(self.rng_attack.integers(len(candidates)))]
        attackers = []
        try:
            for _ in range(L):
                attackers.append(self._spawn_attacker(t, None))
        except InjectionInfeasible:
            for vm in attackers:
                self.state.discard_vm(vm.id)
            raise
        self._register_masquerade(attackers)
        chain = [a.id for a in attackers] + [target.id]
        self.attack_links.extend(zip(chain, chain[1:]))
        return [BreachAttempt(tuple(a.id for a in attackers), target.id, t,
                              self.cfg.breach_dwell_time, self.cfg.attack.scenario)]

    def _inject(self, t: int) -> list[Vm]:
        scenario = self.cfg.attack.scenario
        before = set(self.state.vms)
        try:
            if scenario == "co-residency":
                attempts = self.inject_co_residency(t)
            elif scenario == "multi-hijack":
                attempts = self.inject_multi_hijack(t)
            else:
                attempts = self.inject_grouped_cascade(t)
        except InjectionInfeasible as exc:
            log.warning("t=%s attack injection infeasible: %s", t, exc)
            self.metrics.injection_failures += 1
            return []
        self.attempts.extend(attempts)
        self.metrics.attacks_established += len(attempts)
        return [self.state.vms[v] for v in sorted(set(self.state.vms) - before)]

    def _attack_traffic(self, t: int) -> None:
        vms = self.state.vms
        for a, b in self.attack_links:
            if vms[a].active and vms[b].active:
                self.state.cval.observe(Link(a, b), t)

    # -- security / management ---------------------------------------------

    def _record_terminations(self, acts: list[dict], t: int) -> None:
        for act in acts:
            if act["action"] != "terminate":
                continue
            vm = self.state.vms[act["subject"]]
            self.metrics.terminations += 1
            if not vm.is_attacker:
                self.metrics.false_positive_terminations += 1
                app_id, idx = self.vm_task[vm.id]
                app = self.state.applications[app_id]
                app.tasks[idx].failed = True
                self._maybe_close(app, t)

    def _manage(self, t: int, verdict) -> list[dict]:
        active = {vm.id: vm.capacity for vm in sorted(self.state.active_vms(), key=lambda v: v.id)}
        forecasts = self.analyzer.forecast(active, self.cfg.management_interval)
        outcome = management_cycle(
            self.state, forecasts, verdict, t,
            underload_threshold=self.cfg.underload_threshold,
            overload_margin=self.cfg.overload_margin,
            consolidate=self.cfg.consolidation,
            relocate_victims=self.cfg.relocate_victims)
        self.metrics.unresolved_overloads += outcome.unresolved_overloads
        self.metrics.sla_violations += outcome.unresolved_overloads
        return outcome.actions

    def _resolve(self, t: int) -> None:
        vms = self.state.vms
        for att in self.attempts:
            if att.outcome is not Outcome.PENDING:
                continue
            ends = [vms[a].terminated_at for a in att.attacker_vm_ids]
            if all(e is not None for e in ends) and max(ends) < att.completes_at:
                att.outcome = Outcome.PREVENTED
                self.metrics.breaches_prevented += 1
            elif t >= att.completes_at:
                att.outcome = Outcome.SUCCEEDED
                self.metrics.breaches_succeeded += 1

    # -- main loop -----------------------------------------------------------

    def step(self, t: int) -> None:
        cfg = self.cfg
        state = self.state
        state.now = t
        self._complete_tasks(t)
        self._arrivals(t)
        self._sample_usage(t, sorted(state.active_vms(), key=lambda v: v.id))
        self._benign_links(t)

        if cfg.attack.scenario != "none" and t == cfg.attack.launch_time:
            self._sample_usage(t, self._inject(t))
        self._attack_traffic(t)
        if t % cfg.predictor.retrain_every == 0:
            self.analyzer.retrain(sorted(v.id for v in state.active_vms()), t)

        window = cfg.audit_interval
        verdict = None
        if cfg.auditing and t % cfg.audit_interval == 0:
            verdict = audit(state.cval, state.avad, t, window, cfg.attacker_policy)
        acts: list[dict] = []
        if t % cfg.management_interval == 0:
            acts = self._manage(t, verdict)
        elif verdict is not None and not verdict.empty:
            acts = apply_verdict(verdict, state)
        if verdict is not None:
            terminated = [a["subject"] for a in acts if a["action"] == "terminate"]
            self.result.audits.append(verdict.to_json(terminated))
        self._record_terminations(acts, t)
        self.metrics.migrations += sum(1 for a in acts if a["action"] == "migrate")
        self.result.actions.extend(acts)
        state.cval.prune(t - window)

        self._resolve(t)
        moves = sum(1 for a in acts if a["action"] == "migrate") + self.forced_moves
        self.forced_moves = 0
        e = cfg.energy
        self.metrics.energy += account_energy(state, e.p_idle, e.p_max) + moves * e.migration_penalty
        n_active = sum(1 for s in state.servers.values() if s.active)
        self.metrics.active_server_ticks += n_active
        m = self.metrics
        self.result.ticks.append((t, m.energy, n_active, m.migrations, m.terminations,
                                  m.breaches_prevented, m.breaches_succeeded))
        if self.on_tick is not None:
            self.on_tick(state, t)

    def run(self) -> SimulationResult:
        for t in range(self.cfg.duration):
            self.step(t)
        self.metrics.breaches_pending = sum(
            1 for a in self.attempts if a.outcome is Outcome.PENDING)
        self.metrics.vms_created = self.state.vms_created
        self.result.attempts = self.attempts
        return self.result


def run(config: ScenarioConfig,
        on_tick: Optional[Callable[[DatacenterState, int], None]] = None) -> SimulationResult:
    return Simulation(config, on_tick).run()
