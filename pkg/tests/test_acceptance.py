"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown in the terminal summary) and then
asserts. Every simulation goes through ``_run`` so the capacity checker in the
last test covers every tick of every run in this module.
"""

import time

import numpy as np

from invariants import InvariantChecker
from oracles import (ar_least_squares, attackers_by_cases, breach_outcome, central_diff,
                     shortest_prefix, unauthorized)
from report import verdict
from vmshield import scenario
from vmshield.cli import write_artifacts
from vmshield.core import Link, ResourceVector, Vm, size_key
from vmshield.manager import VmFlavor, apply_plan, flavor_reference, handle_overload
from vmshield.security import Avad, Cval, audit, identify_attackers
from vmshield.simulator import Outcome, run
from vmshield.state import DatacenterState
from vmshield.workload import (Predictor, UsageRecord, WorkloadStore, design_matrix, mse_grad,
                               mse_loss, predict_vm, train)

ATTACK_PRESETS = ("co-residency", "multi-hijack", "grouped-cascade")
DWELLS = (2, 5, 10)
SEEDS = range(50)

CHECK = InvariantChecker()


class _TimedChecker:
    """Wraps the shared checker and keeps its own cost out of runtime measurements."""

    def __init__(self):
        self.spent = 0.0

    def __call__(self, state, t):
        t0 = time.perf_counter()
        CHECK(state, t)
        self.spent += time.perf_counter() - t0


def _run(cfg):
    return run(cfg, on_tick=CHECK)


def _cfg(name, **over):
    return scenario.with_overrides(scenario.preset(name), over)


def _sweep_presets(auditing):
    totals = {"runs": 0, "established": 0, "prevented": 0, "succeeded": 0, "bad": []}
    for name in ATTACK_PRESETS:
        for d in DWELLS:
            for seed in SEEDS:
                m = _run(_cfg(name, seed=seed, breach_dwell_time=d, audit_interval=1,
                              auditing=auditing)).metrics
                totals["runs"] += 1
                totals["established"] += m.attacks_established
                totals["prevented"] += m.breaches_prevented
                totals["succeeded"] += m.breaches_succeeded
                want = m.breaches_prevented if auditing else m.breaches_succeeded
                if m.attacks_established == 0 or want != m.attacks_established:
                    totals["bad"].append((name, d, seed))
                if auditing and m.breaches_succeeded:
                    totals["bad"].append((name, d, seed))
    return totals


def test_criterion_01_breach_prevention():
    t = _sweep_presets(auditing=True)
    scale = scenario.with_overrides(scenario.preset("co-residency"), {
        "servers": [{"count": 200, "capacity": [32, 65536, 2000, 10000]}],
        "duration": 2000, "arrivals.rate": 1.0, "attack.launch_time": 1001})
    hook = _TimedChecker()
    t0 = time.perf_counter()
    big = run(scale, on_tick=hook).metrics
    elapsed = time.perf_counter() - t0 - hook.spent
    ok = (not t["bad"] and t["succeeded"] == 0 and t["prevented"] == t["established"]
          and big.attacks_established >= 1 and big.breaches_prevented == big.attacks_established
          and elapsed < 30.0)
    verdict(1, "breach prevention with audit_interval=1", ok,
            f"{t['runs']} runs, {t['prevented']}/{t['established']} prevented, "
            f"scale run {elapsed:.1f}s")
    assert not t["bad"], t["bad"][:10]
    assert big.breaches_prevented == big.attacks_established >= 1
    assert elapsed < 30.0


def test_criterion_02_defenseless_baseline():
    t = _sweep_presets(auditing=False)
    ok = not t["bad"] and t["succeeded"] == t["established"] and t["prevented"] == 0
    verdict(2, "auditing disabled lets every breach through", ok,
            f"{t['succeeded']}/{t['established']} succeeded")
    assert ok, t["bad"][:10]


def _first_audit(launch, interval):
    return launch + (-launch) % interval


def test_criterion_03_race_boundary():
    cells, mismatches, prevented_rate = {}, [], {}
    for a in range(1, 9):
        for d in range(1, 9):
            attempts = []
            for name in ATTACK_PRESETS:
                for seed in (0, 1):
                    cfg = _cfg(name, seed=seed, audit_interval=a, breach_dwell_time=d,
                               duration=80)
                    r = _run(cfg)
                    for att in r.attempts:
                        attempts.append(att)
                        # independent timeline walk from the audit schedule alone
                        kill = _first_audit(att.link_established_at, a)
                        want = breach_outcome(att.link_established_at, d,
                                              [kill] * len(att.attacker_vm_ids))
                        if att.outcome.value != want:
                            mismatches.append((a, d, name, seed, att.outcome.value, want))
            done = [x for x in attempts if x.outcome is not Outcome.PENDING]
            cells[a, d] = (len(attempts), sum(x.outcome is Outcome.PREVENTED for x in done),
                           sum(x.outcome is Outcome.SUCCEEDED for x in done))
            prevented_rate[a, d] = cells[a, d][1] / max(cells[a, d][0], 1)
    safe = [(a, d) for (a, d) in cells if a <= d - 1]
    unsafe = [(a, d) for (a, d) in cells if a > d]
    safe_ok = all(cells[c][0] > 0 and prevented_rate[c] == 1.0 for c in safe)
    live = [c for c in unsafe if cells[c][2] > 0]
    ok = safe_ok and bool(live) and not mismatches
    verdict(3, "audit_interval vs dwell race boundary", ok,
            f"{len(safe)} safe cells fully prevented={safe_ok}, "
            f"{len(live)}/{len(unsafe)} unsafe cells with a breach")
    assert not mismatches, mismatches[:5]
    assert safe_ok
    assert live


def test_criterion_04_soundness():
    bad = []
    for seed in range(100):
        m = _run(_cfg("benign-baseline", seed=seed)).metrics
        if m.terminations or m.false_positive_terminations:
            bad.append(seed)
    verdict(4, "benign workloads are never terminated", not bad, f"100 seeds, {len(bad)} bad")
    assert not bad


def _random_world(rng):
    n = int(rng.integers(2, 51))
    n_apps = int(rng.integers(0, 11))
    groups: dict[int, list[int]] = {}
    for v in range(n):
        app = int(rng.integers(-1, n_apps)) if n_apps else -1
        if app >= 0:
            groups.setdefault(app, []).append(v)
    density = rng.uniform(0, 0.2)
    pairs = {(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < density}
    return groups, pairs


def test_criterion_05_security_oracle_equivalence():
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(1000):
        groups, pairs = _random_world(rng)
        avad = Avad()
        for app, members in groups.items():
            avad.register(app, members)
        cval = Cval()
        for a, b in pairs:
            cval.observe(Link(b, a), 10)
        want = unauthorized(pairs, groups)
        for policy in ("both", "unregistered_only"):
            v = audit(cval, avad, 10, 1, policy)
            got = {l.pair for l in v.unauthorized_links}
            attackers = identify_attackers([Link(a, b) for a, b in want], avad, policy)
            if got != want or attackers != attackers_by_cases(want, groups, policy) \
                    or v.attacker_vm_ids != attackers:
                failures += 1
    verdict(5, "audit equals brute-force set difference", failures == 0,
            f"1000 graphs x 2 policies, {failures} mismatches")
    assert failures == 0


FLAVORS = [VmFlavor("small", ResourceVector(2, 4096, 50, 500)),
           VmFlavor("medium", ResourceVector(4, 8192, 100, 1000)),
           VmFlavor("large", ResourceVector(8, 16384, 200, 2000))]


def _overloaded_server(rng):
    ref = flavor_reference(FLAVORS)
    cap = ResourceVector(24, 49152, 600, 6000)
    state = DatacenterState.from_capacities([cap] + [ResourceVector(32, 65536, 2000, 10000)] * 8,
                                            size_ref=ref)
    forecasts = {}
    for _ in range(int(rng.integers(1, 9))):
        f = FLAVORS[int(rng.integers(3))].capacity
        if not state.servers[0].can_host(f):
            break
        vm = Vm(state.new_vm_id(), f, 0, 0)
        state.add_vm(vm, 0)
        forecasts[vm.id] = f.scale(float(rng.uniform(0, 3)))
    total = sum(x.cpu for x in forecasts.values())
    if total <= cap.cpu:
        v = int(rng.choice(list(forecasts)))
        forecasts[v] = forecasts[v] + ResourceVector(cap.cpu - total + 1, 0, 0, 0)
    return state, forecasts


def test_criterion_06_overload_prefix_oracle():
    rng = np.random.default_rng(77)
    wrong, unsafe = 0, 0
    for _ in range(500):
        state, forecasts = _overloaded_server(rng)
        server = state.servers[0]
        plan = handle_overload(server, forecasts, state)
        order = sorted(((v, size_key(state.vms[v].capacity, state.size_ref))
                        for v in server.hosted_vm_ids), key=lambda p: (-p[1], p[0]))
        k = shortest_prefix(order, {v: f.as_tuple() for v, f in forecasts.items()},
                            server.capacity.as_tuple())
        if plan.unresolved or [m[0] for m in plan.moves] != [v for v, _ in order[:k]]:
            wrong += 1
        apply_plan(plan, state, 0)
        unsafe += bool(state.violations())
    ok = wrong == 0 and unsafe == 0
    verdict(6, "overload selection is the shortest feasible prefix", ok,
            f"500 servers, {wrong} wrong selections, {unsafe} unsafe states")
    assert ok


def test_criterion_07_predictor_checks():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        lags = int(rng.integers(1, 13))
        X, y = design_matrix(rng.normal(size=int(rng.integers(lags + 3, 60))), lags)
        w = rng.normal(size=lags + 1)
        fd = central_diff(lambda v: mse_loss(v, X, y), w)
        worst = max(worst, np.linalg.norm(mse_grad(w, X, y) - fd) / np.linalg.norm(fd))

    const = WorkloadStore(10**6)
    for t in range(40):
        const.append(UsageRecord(t, 0, 0, ResourceVector(3.5, 2048, 40, 250)))
    got = predict_vm(train(Predictor(), const, 0), const, 0, 1, ResourceVector(8, 4096, 100, 500))
    const_err = max(abs(a - b) for a, b in zip(got, (3.5, 2048, 40, 250)))

    ramp = WorkloadStore(10**6)
    for t in range(1, 21):
        ramp.append(UsageRecord(t, 0, 0, ResourceVector(t, 0, 0, 0)))
    x = ramp.series(0)[:, 0]
    oracle = float(ar_least_squares(x, 12) @ np.r_[1.0, x[-12:]])
    pred = predict_vm(train(Predictor(), ramp, 0), ramp, 0, 1, ResourceVector(100, 1, 1, 1)).cpu
    ramp_err = abs(pred - oracle)

    ok = worst < 1e-5 and const_err < 1e-3 and ramp_err <= 0.5
    verdict(7, "predictor gradient, constant and ramp checks", ok,
            f"grad rel err {worst:.1e}, constant err {const_err:.1e}, "
            f"ramp {pred:.3f} vs {oracle:.3f}")
    assert ok


def test_criterion_08_consolidation_effect():
    worse, e_on, e_off = [], 0.0, 0.0
    for seed in range(20):
        on = _run(_cfg("consolidation-demo", seed=seed)).metrics
        off = _run(_cfg("consolidation-demo", seed=seed, consolidation=False)).metrics
        e_on += on.energy
        e_off += off.energy
        if not on.active_server_ticks < off.active_server_ticks:
            worse.append(seed)
    ok = not worse and e_on < e_off
    verdict(8, "consolidation lowers active-server ticks and energy", ok,
            f"20 paired seeds, energy {e_on:.0f} vs {e_off:.0f}")
    assert ok, worse


def test_criterion_09_determinism(tmp_path):
    diffs = []
    for name in scenario.PRESETS:
        cfg = _cfg(name, seed=12345)
        a, b = tmp_path / name / "a", tmp_path / name / "b"
        write_artifacts(_run(cfg), a)
        write_artifacts(_run(cfg), b)
        diffs += [f"{name}/{f.name}" for f in sorted(a.iterdir())
                  if f.read_bytes() != (b / f.name).read_bytes()]
    verdict(9, "byte-identical artifacts on repeat runs", not diffs,
            f"{len(scenario.PRESETS)} presets" + (f", differing: {diffs}" if diffs else ""))
    assert not diffs


def test_criterion_10_capacity_safety():
    ok = CHECK.ticks > 0 and not CHECK.problems
    verdict(10, "no capacity violation or hosted terminated VM on any tick", ok,
            f"{CHECK.ticks} ticks checked, {len(CHECK.problems)} problems")
    assert CHECK.ticks > 0
    assert not CHECK.problems, CHECK.problems[:10]
