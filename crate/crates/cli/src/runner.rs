//! Builds a simulation from a scenario, runs it and checks its assertions.

use std::collections::BTreeMap;

use meterguard::attacks::{inject_false_data, inject_majority, launch_dos, AttackAudit};
use meterguard::journal::EventKind;
use meterguard::protocol::NodeState;
use meterguard::simnet::Simulation;
use meterguard::types::{NeighborList, NodeId, SimTime, Timestamp};

use crate::report::{
    AssertionResult, AuditEntry, Checkpoint, DosRow, NodeEventCounts, Report, RunArtifacts, RunReport,
};
use crate::scenario::{readings, Assertion, AttackSpec, AttackState, Scenario};
use crate::RunError;

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub artifacts: Vec<RunArtifacts>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Step {
    Attack(usize),
    Check(usize),
}

fn kind_name(kind: EventKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Runs the scenario (once per sweep step) and evaluates its assertions.
pub fn run_scenario(scenario: &Scenario, overrides: &Overrides) -> Result<RunOutput, RunError> {
    scenario.validate()?;
    let seed = overrides.seed.unwrap_or(scenario.seed);
    let mut runs = Vec::new();
    let mut artifacts = Vec::new();
    match &scenario.sweep {
        Some(sweep) => {
            let n = scenario.attacks[sweep.attack].attackers(None).len();
            for k in 1..=n {
                let (r, a) = run_once(scenario, seed, Some((sweep.attack, k)), format!("attackers_{k}"))?;
                runs.push(r);
                artifacts.push(a);
            }
        }
        None => {
            let (r, a) = run_once(scenario, seed, None, "main".into())?;
            runs.push(r);
            artifacts.push(a);
        }
    }
    let dos_table = if scenario.sweep.is_some() { dos_table(scenario, &runs) } else { Vec::new() };
    let assertions: Vec<AssertionResult> = scenario
        .assertions
        .iter()
        .enumerate()
        .map(|(i, a)| evaluate(i, a, &runs, &dos_table))
        .collect();
    let passed = assertions.iter().all(|a| a.passed);
    Ok(RunOutput {
        report: Report {
            scenario: scenario.name.clone(),
            seed,
            runs,
            dos_table,
            assertions,
            passed,
        },
        artifacts,
    })
}

/// Household, reading sources and monitor of a scenario, before attacks.
pub fn build(scenario: &Scenario, seed: u64) -> Result<Simulation, RunError> {
    let start = SimTime::from_timestamp(scenario.span.start);
    let end = SimTime::from_timestamp(scenario.span.end);
    let mut sim = Simulation::new(start, scenario.network.clone(), seed, scenario.output.events);
    let members = &scenario.topology.nodes;
    for &id in members {
        let state = NodeState::new(
            id,
            NeighborList::for_member(id, members.iter().copied()),
            scenario.protocol.clone(),
        );
        let mut pattern = scenario.pattern_of(id).clone();
        pattern.seed ^= seed.rotate_left(17) ^ u64::from(id.get());
        sim.add_node(state, Some(pattern), scenario.span.end);
    }
    if let Some(m) = &scenario.monitor {
        sim.monitor(m.target, m.prober.clone(), m.interval_s, end)?;
    }
    Ok(sim)
}

/// Result of a one-off injection.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectOutcome {
    pub audit: AttackAudit,
    /// Readings of the victim put back by the defence before the span ends.
    pub restored: usize,
}

/// Runs `scenario` without its own attacks, zeroes (or sets to `value`)
/// `target`'s readings in `[start, end)` at time `at` (default `end`) and
/// lets the defence run to the end of the span.
pub fn inject(
    scenario: &Scenario,
    target: NodeId,
    start: Timestamp,
    end: Timestamp,
    value: f64,
    at: Option<Timestamp>,
) -> Result<InjectOutcome, RunError> {
    let mut scenario = scenario.clone();
    scenario.attacks.clear();
    scenario.assertions.clear();
    scenario.validate()?;
    let mut sim = build(&scenario, scenario.seed)?;
    let at = at.unwrap_or(end).max(scenario.span.start);
    sim.run_until(SimTime::from_timestamp(at));
    let audit = inject_false_data(&mut sim, target, start, end, value)?;
    sim.run_until(SimTime::from_timestamp(scenario.span.end).max(sim.now()));
    let restored = sim.journal().corrections.iter().filter(|c| c.node == target).count();
    Ok(InjectOutcome { audit, restored })
}

/// One simulation; `limit` restricts attack `.0` to its first `.1` attackers.
fn run_once(
    scenario: &Scenario,
    seed: u64,
    limit: Option<(usize, usize)>,
    label: String,
) -> Result<(RunReport, RunArtifacts), RunError> {
    let end = SimTime::from_timestamp(scenario.span.end);
    let mut sim = build(scenario, seed)?;
    let members = &scenario.topology.nodes;

    let mut steps: Vec<(Timestamp, Step)> = scenario
        .attacks
        .iter()
        .enumerate()
        .map(|(i, a)| (a.at(), Step::Attack(i)))
        .collect();
    for (i, a) in scenario.assertions.iter().enumerate() {
        if let Assertion::StoreEquals { at, .. } = a {
            steps.push((*at, Step::Check(i)));
        }
    }
    steps.sort();

    let mut audits = Vec::new();
    let mut checkpoints = Vec::new();
    let mut attackers = 0;
    for (at, step) in steps {
        sim.run_until(SimTime::from_timestamp(at).max(sim.now()));
        match step {
            Step::Attack(i) => match &scenario.attacks[i] {
                spec @ AttackSpec::Dos { duration_s, targets, .. } => {
                    let k = limit.filter(|(a, _)| *a == i).map(|(_, k)| k);
                    let flooders = spec.attackers(k);
                    attackers += flooders.len();
                    for &target in targets {
                        launch_dos(&mut sim, &flooders, target, SimTime::from_timestamp(at), *duration_s)?;
                    }
                }
                AttackSpec::FalseDataInjection {
                    target,
                    start,
                    end,
                    value,
                    ..
                } => {
                    let audit = inject_false_data(&mut sim, *target, *start, *end, *value)?;
                    audits.push(AuditEntry::new(i, audit));
                }
                AttackSpec::MajorityCompromise {
                    source,
                    targets,
                    start,
                    end,
                    value,
                    ..
                } => {
                    let audit = inject_majority(&mut sim, targets, *source, *start, *end, *value)?;
                    audits.push(AuditEntry::new(i, audit));
                }
            },
            Step::Check(i) => {
                if let Assertion::StoreEquals {
                    node, source, start, end, ..
                } = &scenario.assertions[i]
                {
                    let store = &sim.node(*node).expect("validated").store;
                    let readings = store.snapshot_range(*source, *start, *end).unwrap_or_default();
                    checkpoints.push(Checkpoint { assertion: i, readings });
                }
            }
        }
    }
    sim.run_until(end);
    for entry in &mut audits {
        let a = &entry.audit;
        let store = &sim.node(a.source).expect("validated").store;
        entry.final_digest = store.digest(a.source, Some(a.at.timestamp()));
    }

    let journal = sim.journal();
    let mut event_counts: BTreeMap<u32, BTreeMap<String, u64>> = BTreeMap::new();
    for ((node, kind), count) in journal.counts() {
        event_counts.entry(node.get()).or_default().insert(kind_name(*kind), *count);
    }
    let counters = members
        .iter()
        .map(|id| (id.to_string(), sim.counters(*id).unwrap_or_default()))
        .collect();
    let store_digests = sim
        .nodes()
        .map(|n| {
            let digests = n.store.sources().map(|s| (s.to_string(), n.store.digest(s, None))).collect();
            (n.id.to_string(), digests)
        })
        .collect();
    let report = RunReport {
        label: label.clone(),
        attackers,
        floods: sim.floods().to_vec(),
        windows: sim.windows().to_vec(),
        event_counts: event_counts
            .into_iter()
            .map(|(node, counts)| NodeEventCounts { node, counts })
            .collect(),
        detections: journal.detections.clone(),
        rounds: journal.rounds.clone(),
        corrections: journal.corrections.clone(),
        audits,
        checkpoints,
        counters,
        store_digests,
        event_log_digest: journal.digest(),
    };
    let artifacts = RunArtifacts {
        label,
        events: journal.events.clone(),
        stores: sim.nodes().map(|n| n.store.clone()).collect(),
    };
    Ok((report, artifacts))
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Loss, CPU and RTT of the monitored target while the swept flood runs.
fn dos_table(scenario: &Scenario, runs: &[RunReport]) -> Vec<DosRow> {
    let sweep = scenario.sweep.as_ref().expect("sweep");
    let AttackSpec::Dos { start, duration_s, .. } = &scenario.attacks[sweep.attack] else {
        unreachable!("validated")
    };
    let from = SimTime::from_timestamp(*start);
    let to = from.plus_secs_f64(*duration_s);
    runs.iter()
        .map(|r| {
            let inside: Vec<_> = r.windows.iter().filter(|w| w.sim_time >= from && w.sim_time < to).collect();
            let offered: u64 = inside.iter().map(|w| w.offered).sum();
            let dropped: u64 = inside.iter().map(|w| w.dropped).sum();
            DosRow {
                attackers: r.attackers,
                loss_pct: if offered == 0 { 0.0 } else { 100.0 * dropped as f64 / offered as f64 },
                cpu_pct: 100.0 * mean(inside.iter().map(|w| w.cpu_load)).unwrap_or(0.0),
                mean_rtt_ms: mean(inside.iter().filter_map(|w| w.rtt_ms)),
                timeouts: inside.iter().filter(|w| w.timeout).count(),
                probes: inside.len(),
                baseline_rtt_ms: mean(r.windows.iter().filter(|w| w.sim_time < from).filter_map(|w| w.rtt_ms)),
            }
        })
        .collect()
}

fn result(name: String, passed: bool, detail: String) -> AssertionResult {
    AssertionResult { name, passed, detail }
}

fn evaluate(index: usize, a: &Assertion, runs: &[RunReport], table: &[DosRow]) -> AssertionResult {
    let name = a.name();
    let all = |check: &dyn Fn(&RunReport) -> Result<String, String>| {
        let mut details = Vec::new();
        let mut ok = true;
        for r in runs {
            match check(r) {
                Ok(d) => details.push(format!("{}: {d}", r.label)),
                Err(d) => {
                    ok = false;
                    details.push(format!("{}: FAILED {d}", r.label));
                }
            }
        }
        (ok, details.join("; "))
    };
    let (passed, detail) = match a {
        Assertion::StoreEquals { readings: expected, .. } => all(&|r| {
            let got = r.checkpoints.iter().find(|c| c.assertion == index).map(|c| &c.readings);
            let want = readings(expected);
            match got {
                Some(got) if *got == want => Ok(format!("{} readings match", want.len())),
                Some(got) => Err(format!(
                    "got [{}]",
                    got.iter().map(|r| format!("{} {}", r.time, r.value)).collect::<Vec<_>>().join(", ")
                )),
                None => Err("no checkpoint".into()),
            }
        }),
        Assertion::Corrections { count } => all(&|r| {
            let n = r.corrections.len();
            if n == *count {
                Ok(format!("{n} corrections"))
            } else {
                Err(format!("{n} corrections"))
            }
        }),
        Assertion::DigestMatchesAttack { attack, state } => all(&|r| {
            let entry = r.audits.iter().find(|e| e.attack == *attack).ok_or("attack not applied")?;
            let audit = &entry.audit;
            let want = match state {
                AttackState::Before => &audit.digest_before,
                AttackState::After => &audit.digest_after,
            };
            let got = &entry.final_digest;
            if got == want {
                Ok(format!("digest {} matches", &want[..12]))
            } else {
                Err(format!("digest {} differs from {}", &got[..12], &want[..12]))
            }
        }),
        Assertion::NoRoundsAfter { after } => all(&|r| {
            let cutoff = SimTime::from_timestamp(*after);
            let late: Vec<_> = r.rounds.iter().filter(|rd| rd.opened >= cutoff).collect();
            let early = r.rounds.len() - late.len();
            if late.is_empty() {
                Ok(format!("{early} rounds, all before {after}"))
            } else {
                Err(format!("{} rounds opened after {after}, first at {}", late.len(), late[0].opened))
            }
        }),
        Assertion::DosTable {
            loss_pct,
            cpu_pct,
            tolerance_pct,
        } => {
            let mut ok = table.len() == loss_pct.len() && table.len() == cpu_pct.len();
            let mut details = Vec::new();
            for (row, (l, c)) in table.iter().zip(loss_pct.iter().zip(cpu_pct)) {
                let row_ok = (row.loss_pct - l).abs() <= *tolerance_pct && (row.cpu_pct - c).abs() <= *tolerance_pct;
                ok &= row_ok;
                details.push(format!(
                    "{} attackers: loss {:.1}% (want {l}), cpu {:.1}% (want {c}){}",
                    row.attackers,
                    row.loss_pct,
                    row.cpu_pct,
                    if row_ok { "" } else { " FAILED" }
                ));
            }
            (ok, details.join("; "))
        }
        Assertion::Monotone => {
            let rtts: Vec<f64> = table.iter().map(|r| r.mean_rtt_ms.unwrap_or(f64::INFINITY)).collect();
            let losses: Vec<f64> = table.iter().map(|r| r.loss_pct).collect();
            let ok = losses.windows(2).all(|w| w[0] <= w[1]) && rtts.windows(2).all(|w| w[0] <= w[1]);
            (
                ok,
                format!(
                    "loss {:?}, mean rtt {:?}",
                    losses.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>(),
                    rtts.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>()
                ),
            )
        }
        Assertion::BaselineRtt { ms, tolerance_ms } => {
            let ok = !table.is_empty()
                && table
                    .iter()
                    .all(|r| r.baseline_rtt_ms.is_some_and(|b| (b - ms).abs() <= *tolerance_ms));
            let values: Vec<String> = table.iter().map(|r| opt(r.baseline_rtt_ms)).collect();
            (ok, format!("baseline rtt {values:?} ms"))
        }
        Assertion::RoundTimesOut { attackers, node } => {
            let selected: Vec<&RunReport> = runs
                .iter()
                .filter(|r| attackers.is_none_or(|k| r.attackers == k || runs.len() == 1))
                .collect();
            let ok = !selected.is_empty()
                && selected.iter().all(|r| {
                    r.rounds
                        .iter()
                        .any(|rd| rd.timed_out && rd.requested.contains(node) && !rd.responded.contains(node))
                });
            let detail = selected
                .iter()
                .map(|r| {
                    let timed_out = r.rounds.iter().filter(|rd| rd.timed_out).count();
                    format!("{}: {} rounds, {timed_out} timed out", r.label, r.rounds.len())
                })
                .collect::<Vec<_>>()
                .join("; ");
            (ok, detail)
        }
        Assertion::RestoredAfter { after } => all(&|r| {
            let cutoff = SimTime::from_timestamp(*after);
            match r.corrections.first() {
                Some(c) if c.sim_time >= cutoff => Ok(format!("first correction at {}", c.sim_time)),
                Some(c) => Err(format!("first correction at {}", c.sim_time)),
                None => Err("no corrections".into()),
            }
        }),
    };
    result(name, passed, detail)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}
