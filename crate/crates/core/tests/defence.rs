//! End-to-end defence: injections against a simulated household.

use meterguard::attacks::{inject_false_data, inject_majority};
use meterguard::journal::{EventKind, RoundOutcome};
use meterguard::protocol::{NodeState, ProtocolConfig};
use meterguard::simnet::{NetworkConfig, Simulation};
use meterguard::synth::{PatternKind, PatternSpec};
use meterguard::types::{parse_timestamp, NeighborList, NodeId, Reading, SimTime, Timestamp};

fn id(n: u32) -> NodeId {
    NodeId::new(n).unwrap()
}

fn ts(s: &str) -> Timestamp {
    parse_timestamp(s).unwrap()
}

fn household(start: &str, end: &str, pattern: PatternSpec, config: ProtocolConfig) -> Simulation {
    let mut sim = Simulation::new(SimTime::from_timestamp(ts(start)), NetworkConfig::default(), 1, true);
    let members = [1, 2, 3, 4];
    for n in members {
        let state = NodeState::new(
            id(n),
            NeighborList::for_member(id(n), members.iter().map(|&m| id(m))),
            config.clone(),
        );
        let mut p = pattern.clone();
        p.seed = u64::from(n);
        sim.add_node(state, Some(p), ts(end));
    }
    sim
}

fn table3_pattern() -> PatternSpec {
    PatternSpec {
        sample_interval_s: 7.5,
        offset_s: 2.0,
        ..PatternSpec::alternating(vec![30.0, 10.0])
    }
}

fn run_to(sim: &mut Simulation, t: &str) {
    sim.run_until(SimTime::from_timestamp(ts(t)));
}

fn snapshot(sim: &Simulation, node: u32, start: &str, end: &str) -> Vec<Reading> {
    sim.node(id(node)).unwrap().store.snapshot_range(id(1), ts(start), ts(end)).unwrap()
}

#[test]
fn honest_majority_restores_within_one_period() {
    let mut sim = household("2019-06-30 17:50:00", "2019-06-30 18:05:00", table3_pattern(), ProtocolConfig::default());
    run_to(&mut sim, "2019-06-30 18:00:40");
    let before = snapshot(&sim, 1, "2019-06-30 18:00:00", "2019-06-30 18:00:40");
    let audit = inject_false_data(&mut sim, id(1), ts("2019-06-30 18:00:15"), ts("2019-06-30 18:00:30"), 0.0).unwrap();
    assert_eq!(audit.count, 2);
    run_to(&mut sim, "2019-06-30 18:01:50");
    assert_eq!(snapshot(&sim, 1, "2019-06-30 18:00:00", "2019-06-30 18:00:40"), before);
    let node = sim.node(id(1)).unwrap();
    assert_eq!(node.store.digest(id(1), Some(ts("2019-06-30 18:00:40"))), audit.digest_before);
    let j = sim.journal();
    assert_eq!(j.corrections.len(), 2);
    assert!(j.corrections.iter().all(|c| c.old == 0.0 && j.detections[c.detection].node == id(1)));
    assert_eq!(j.rounds[0].outcome, Some(RoundOutcome::Restored));
    // the restored day does not trigger again
    run_to(&mut sim, "2019-06-30 18:05:00");
    assert_eq!(sim.journal().rounds.len(), 1);
}

#[test]
fn corrupted_majority_keeps_the_zeros() {
    let mut sim = household("2019-06-30 17:50:00", "2019-06-30 18:05:00", table3_pattern(), ProtocolConfig::default());
    run_to(&mut sim, "2019-06-30 18:00:40");
    let audit = inject_majority(
        &mut sim,
        &[id(2), id(3), id(4)].into(),
        id(1),
        ts("2019-06-30 18:00:15"),
        ts("2019-06-30 18:00:30"),
        0.0,
    )
    .unwrap();
    run_to(&mut sim, "2019-06-30 18:05:00");
    let node = sim.node(id(1)).unwrap();
    assert_eq!(node.store.digest(id(1), Some(ts("2019-06-30 18:00:40"))), audit.digest_after);
    assert!(sim.journal().corrections.is_empty());
    assert_eq!(sim.journal().rounds[0].outcome, Some(RoundOutcome::NoChange));
}

#[test]
fn split_vote_keeps_own_value_and_reports_unresolved() {
    let mut sim = household("2019-06-30 17:50:00", "2019-06-30 18:05:00", table3_pattern(), ProtocolConfig::default());
    run_to(&mut sim, "2019-06-30 18:00:40");
    let (s, e) = (ts("2019-06-30 18:00:15"), ts("2019-06-30 18:00:30"));
    inject_false_data(&mut sim, id(1), s, e, 0.0).unwrap();
    sim.node_mut(id(2)).unwrap().store.overwrite_range(id(1), s, e, 0.0).unwrap();
    run_to(&mut sim, "2019-06-30 18:05:00");
    let j = sim.journal();
    assert!(j.corrections.is_empty());
    assert_eq!(j.rounds[0].outcome, Some(RoundOutcome::Unresolved));
    assert_eq!(j.rounds[0].unresolved, vec![ts("2019-06-30 18:00:17"), ts("2019-06-30 18:00:24")]);
    assert_eq!(sim.node(id(1)).unwrap().store.get(id(1), ts("2019-06-30 18:00:17")), Some(0.0));
}

fn daily_curve() -> (PatternSpec, ProtocolConfig) {
    let mut pattern = PatternSpec::new(PatternKind::DailyCurve {
        base: 150.0,
        peaks: vec![7.5, 19.5],
        amplitude: 600.0,
        width_h: 1.5,
    });
    pattern.sample_interval_s = 300.0;
    pattern.noise_sd = 20.0;
    let mut config = ProtocolConfig::default();
    config.detector.sample_interval_s = 300.0;
    (pattern, config)
}

#[test]
fn learned_baseline_catches_evening_zeroing() {
    let (pattern, config) = daily_curve();
    let mut sim = household("2019-06-01 00:00:00", "2019-06-05 23:00:00", pattern, config);
    run_to(&mut sim, "2019-06-05 20:05:00");
    let node = sim.node(id(1)).unwrap();
    assert!(node.baseline.count >= 3, "baseline has {} days", node.baseline.count);
    let before = snapshot(&sim, 1, "2019-06-05 00:00:00", "2019-06-05 20:05:00");
    let audit = inject_false_data(&mut sim, id(1), ts("2019-06-05 19:00:00"), ts("2019-06-05 20:00:00"), 0.0).unwrap();
    assert_eq!(audit.count, 12);
    run_to(&mut sim, "2019-06-05 20:07:00");
    assert_eq!(snapshot(&sim, 1, "2019-06-05 00:00:00", "2019-06-05 20:05:00"), before);
    let j = sim.journal();
    let detection = &j.detections[j.corrections[0].detection];
    assert!(detection.distance.is_some(), "warm detector computes a distance");
    assert_eq!(j.corrections.len(), 12);
}

#[test]
fn retention_evicts_old_replicas_but_not_own_readings() {
    let (pattern, mut config) = daily_curve();
    config.retention_days = 2;
    let mut sim = household("2019-06-01 00:00:00", "2019-06-05 00:00:00", pattern, config);
    run_to(&mut sim, "2019-06-05 00:00:00");
    for n in 1..=4 {
        let store = &sim.node(id(n)).unwrap().store;
        for source in (1..=4).filter(|&s| s != n) {
            let first = store.readings(id(source)).next().unwrap();
            assert!(first.time >= ts("2019-06-02 23:00:00"), "node {n} still holds {}", first.time);
        }
        let own = store.readings(id(n)).next().unwrap();
        assert_eq!(own.time, ts("2019-06-01 00:00:00"));
    }
    assert!(sim.journal().count(id(1), EventKind::Evicted) > 0);
}
