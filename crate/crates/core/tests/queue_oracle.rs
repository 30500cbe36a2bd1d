//! Packet-level simulation against the closed-form M/D/1/K blocking law.

use meterguard::protocol::{NodeState, ProtocolConfig};
use meterguard::simnet::{md1k_loss, Endpoint, FloodSpec, NetworkConfig, Simulation};
use meterguard::synth::PatternSpec;
use meterguard::types::{parse_timestamp, NeighborList, NodeId, SimTime};

fn id(n: u32) -> NodeId {
    NodeId::new(n).unwrap()
}

fn household(seed: u64, readings: bool, keep_events: bool) -> Simulation {
    let t0 = parse_timestamp("2019-06-30 18:00:00").unwrap();
    let mut sim = Simulation::new(SimTime::from_timestamp(t0), NetworkConfig::default(), seed, keep_events);
    let members = [1, 2, 3, 4];
    for n in members {
        let state = NodeState::new(
            id(n),
            NeighborList::for_member(id(n), members.iter().map(|&m| id(m))),
            ProtocolConfig::default(),
        );
        let pattern = readings.then(|| PatternSpec::alternating(vec![30.0, 10.0]));
        sim.add_node(state, pattern, t0.plus_secs(600));
    }
    sim
}

/// Fraction of flood packets dropped at node 1 for offered load `rho`.
fn simulated_loss(rho: f64, seed: u64) -> f64 {
    let mut sim = household(seed, false, false);
    let start = sim.now();
    let rate = rho * sim.config().service_rate;
    sim.flood(FloodSpec {
        attacker: Endpoint::External("laptop".into()),
        target: id(1),
        rate,
        cpu_cost: 0.0,
        start,
        duration_s: 60.0,
        port: None,
    })
    .unwrap();
    sim.run_until(start.plus_secs_f64(61.0));
    let c = sim.counters(id(1)).unwrap();
    assert!(c.balanced(), "{c:?}");
    assert_eq!(c.in_flight, 0);
    c.dropped_queue as f64 / c.sent as f64
}

#[test]
fn twice_the_service_rate_loses_half() {
    let loss = simulated_loss(2.0, 1);
    assert!((loss - 0.5).abs() <= 0.05, "loss {loss}");
    assert!((md1k_loss(2.0, 100) - 0.5).abs() < 0.01);
}

#[test]
fn low_rate_flooder_loses_little() {
    let loss = simulated_loss(0.3, 2);
    assert!(loss < 0.10, "loss {loss}");
}

#[test]
fn loss_tracks_the_oracle_across_loads() {
    let capacity = NetworkConfig::default().queue_capacity;
    for (i, rho) in [0.9, 1.0, 1.05, 1.2, 1.5, 3.0].into_iter().enumerate() {
        let sim = simulated_loss(rho, 10 + i as u64);
        let oracle = md1k_loss(rho, capacity);
        assert!((sim - oracle).abs() < 0.02, "rho {rho}: simulated {sim}, oracle {oracle}");
    }
}

#[test]
fn packets_are_conserved_with_protocol_traffic_and_floods() {
    let mut sim = household(3, true, false);
    let start = sim.now();
    for (n, rate) in [(2, 900.0), (3, 400.0)] {
        sim.flood(FloodSpec {
            attacker: Endpoint::Node(id(n)),
            target: id(1),
            rate,
            cpu_cost: 1.5,
            start: start.plus_secs_f64(100.0),
            duration_s: 30.0,
            port: None,
        })
        .unwrap();
    }
    sim.run_until(start.plus_secs_f64(700.0));
    let total = sim.total_counters();
    assert!(total.balanced(), "{total:?}");
    assert_eq!(total.in_flight, 0);
    assert!(total.dropped_loss > 0 && total.dropped_queue > 0, "{total:?}");
    assert_eq!(total.sent, total.delivered + total.dropped_queue + total.dropped_loss);
}

#[test]
fn same_seed_same_event_log() {
    let run = |seed| {
        let mut sim = household(seed, true, true);
        let start = sim.now();
        sim.flood(FloodSpec {
            attacker: Endpoint::External("laptop".into()),
            target: id(1),
            rate: 1200.0,
            cpu_cost: 1.0,
            start: start.plus_secs_f64(65.0),
            duration_s: 20.0,
            port: Some(18800),
        })
        .unwrap();
        sim.run_until(start.plus_secs_f64(300.0));
        (sim.journal().digest(), sim.journal().events.len())
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5).0, run(6).0);
}
