//! Attack injectors: flooding campaigns, false data injection on a
//! compromised meter, and the majority-compromise variant.
//!
//! Injections act directly on stores and leave an audit record that the
//! simulated nodes never see.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::journal::EventKind;
use crate::simnet::{md1k_loss, Endpoint, FloodSpec, NetError, NetworkConfig, Simulation};
use crate::store::StoreError;
use crate::types::{NodeId, Reading, SimTime, Timestamp};

/// Port the laptop flood targets (the protocol listener).
pub const LOIC_PORT: u16 = 18800;

// Fitted with `calibrate_dos` against the published loss/CPU table on the
// default network; not measured.
pub const FITTED_LAPTOP_RATE: f64 = 1052.63;
pub const FITTED_LAPTOP_CPU_COST: f64 = 1.2350;
pub const FITTED_RASPBERRY_RATE: f64 = 297.487;
pub const FITTED_RASPBERRY_CPU_COST: f64 = 0.70591;
pub const FITTED_SATURATED_SERVICE_FACTOR: f64 = 0.29176;

/// Published loss and CPU fractions for one to four attackers.
pub const TABLE_LOSS: [f64; 4] = [0.05, 0.25, 0.40, 0.85];
pub const TABLE_CPU: [f64; 4] = [0.70, 0.80, 0.90, 1.00];

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid range: start {start} is not before end {end}")]
    InvalidRange { start: Timestamp, end: Timestamp },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Dos,
    FalseDataInjection,
    MajorityCompromise,
}

/// Attacker-side record of an injection; invisible to the nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAudit {
    pub kind: AttackKind,
    pub at: SimTime,
    /// Stores that were modified.
    pub targets: Vec<NodeId>,
    /// Node whose series was modified.
    pub source: NodeId,
    pub start: Timestamp,
    pub end: Timestamp,
    pub value: f64,
    pub count: usize,
    /// Victim's own series before and after, restricted to the range.
    pub before: Vec<Reading>,
    pub after: Vec<Reading>,
    /// Digests of the victim's own series up to the attack time.
    pub digest_before: String,
    pub digest_after: String,
}

fn check_range(start: Timestamp, end: Timestamp) -> Result<(), AttackError> {
    if start > end {
        return Err(AttackError::InvalidRange { start, end });
    }
    Ok(())
}

/// Zeroes (or sets to `value`) the target's own readings in `[start, end)`.
/// Replicas held by other nodes are left alone. `start == end` is an empty
/// range and modifies nothing.
pub fn inject_false_data(
    sim: &mut Simulation,
    target: NodeId,
    start: Timestamp,
    end: Timestamp,
    value: f64,
) -> Result<AttackAudit, AttackError> {
    check_range(start, end)?;
    let now = sim.now();
    let node = sim.node_mut(target).ok_or(AttackError::UnknownNode(target))?;
    let until = Some(now.timestamp());
    let digest_before = node.store.digest(target, until);
    let before = node.store.snapshot_range(target, start, end)?;
    let count = node.store.overwrite_range(target, start, end, value)?;
    let after = node.store.snapshot_range(target, start, end)?;
    let digest_after = node.store.digest(target, until);
    sim.journal_mut().log(
        now,
        target,
        EventKind::Attack,
        format!("false data [{start}, {end}) -> {value}: {count} readings"),
    );
    Ok(AttackAudit {
        kind: AttackKind::FalseDataInjection,
        at: now,
        targets: vec![target],
        source: target,
        start,
        end,
        value,
        count,
        before,
        after,
        digest_before,
        digest_after,
    })
}

/// Corrupts `source`'s series in its own store and in the replicas held by
/// every node of `targets`. Requires `targets` to be a strict majority of
/// the household.
pub fn inject_majority(
    sim: &mut Simulation,
    targets: &BTreeSet<NodeId>,
    source: NodeId,
    start: Timestamp,
    end: Timestamp,
    value: f64,
) -> Result<AttackAudit, AttackError> {
    check_range(start, end)?;
    let n = sim.nodes().count();
    if targets.len() * 2 <= n {
        return Err(AttackError::Precondition(format!(
            "{} of {n} nodes is not a majority",
            targets.len()
        )));
    }
    for id in targets.iter().chain(std::iter::once(&source)) {
        if sim.node(*id).is_none() {
            return Err(AttackError::UnknownNode(*id));
        }
    }
    let mut audit = inject_false_data(sim, source, start, end, value)?;
    for id in targets.iter().filter(|id| **id != source) {
        let node = sim.node_mut(*id).expect("checked above");
        node.store.overwrite_range(source, start, end, value)?;
    }
    audit.kind = AttackKind::MajorityCompromise;
    audit.targets = targets.iter().copied().chain(std::iter::once(source)).collect::<BTreeSet<_>>().into_iter().collect();
    let now = sim.now();
    sim.journal_mut().log(
        now,
        source,
        EventKind::Attack,
        format!("majority compromise of {source} on {} stores", audit.targets.len()),
    );
    Ok(audit)
}

/// One flooding machine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attacker {
    pub endpoint: Endpoint,
    pub rate: f64,
    pub cpu_cost: f64,
}

/// Calibrated flooding machine class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloodProfile {
    /// Stress tool against the protocol port.
    Laptop,
    /// `ping -f`.
    Raspberry,
}

impl Attacker {
    pub fn with_profile(endpoint: Endpoint, profile: FloodProfile) -> Self {
        let (rate, cpu_cost) = match profile {
            FloodProfile::Laptop => (FITTED_LAPTOP_RATE, FITTED_LAPTOP_CPU_COST),
            FloodProfile::Raspberry => (FITTED_RASPBERRY_RATE, FITTED_RASPBERRY_CPU_COST),
        };
        Attacker { endpoint, rate, cpu_cost }
    }

    /// An outside machine gets the laptop profile, a household node the
    /// Raspberry profile.
    pub fn calibrated(endpoint: Endpoint) -> Self {
        let profile = match endpoint {
            Endpoint::External(_) => FloodProfile::Laptop,
            Endpoint::Node(_) => FloodProfile::Raspberry,
        };
        Attacker::with_profile(endpoint, profile)
    }
}

/// Starts one flood per attacker against `target` over
/// `[start, start + duration)`.
pub fn launch_dos(
    sim: &mut Simulation,
    attackers: &[Attacker],
    target: NodeId,
    start: SimTime,
    duration_s: f64,
) -> Result<(), AttackError> {
    for a in attackers {
        let port = matches!(a.endpoint, Endpoint::External(_)).then_some(LOIC_PORT);
        sim.flood(FloodSpec {
            attacker: a.endpoint.clone(),
            target,
            rate: a.rate,
            cpu_cost: a.cpu_cost,
            start,
            duration_s,
            port,
        })?;
    }
    Ok(())
}

/// Flood parameters reproducing a loss/CPU table on a given network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosCalibration {
    pub laptop_rate: f64,
    pub laptop_cpu_cost: f64,
    pub raspberry_rate: f64,
    pub raspberry_cpu_cost: f64,
    pub saturated_service_factor: f64,
    /// Model loss and CPU for one to four attackers.
    pub predicted_loss: [f64; 4],
    pub predicted_cpu: [f64; 4],
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f increasing, root bracketed
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Fits the flood model to `loss`/`cpu` rows for one laptop plus zero to
/// three Raspberries using the M/D/1/K blocking law.
///
/// * laptop rate from row 1 loss, Raspberry rate from rows 2 and 3 loss
///   (least squares), saturated service factor from row 4 loss;
/// * laptop CPU cost from row 1, Raspberry CPU cost from the mean CPU step,
///   with the last row pushed just past saturation by `cpu_margin`.
pub fn calibrate_dos(net: &NetworkConfig, loss: [f64; 4], cpu: [f64; 4], cpu_margin: f64) -> DosCalibration {
    let k = net.queue_capacity;
    let mu = net.service_rate;
    let rho_l = bisect(1e-6, 50.0, |r| md1k_loss(r, k) - loss[0]);
    let error = |r: f64| {
        (md1k_loss(rho_l + r, k) - loss[1]).powi(2) + (md1k_loss(rho_l + 2.0 * r, k) - loss[2]).powi(2)
    };
    // golden-section search on a unimodal error
    let (mut a, mut b) = (0.0, 5.0);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if error(c) < error(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let rho_r = 0.5 * (a + b);
    let rho_4 = rho_l + 3.0 * rho_r;
    let rho_eff = bisect(1e-6, 1e3, |r| md1k_loss(r, k) - loss[3]);
    let factor = rho_4 / rho_eff;

    let s = net.saturation_rate;
    let laptop_rate = rho_l * mu;
    let raspberry_rate = rho_r * mu;
    let laptop_share = cpu[0] - net.cpu_baseline;
    let step = ((cpu[2] - cpu[0]) / 2.0).max((1.0 + cpu_margin - cpu[0]) / 3.0);
    let laptop_cpu_cost = laptop_share * s / laptop_rate;
    let raspberry_cpu_cost = step * s / raspberry_rate;

    let mut predicted_loss = [0.0; 4];
    let mut predicted_cpu = [0.0; 4];
    for (i, (l, c)) in predicted_loss.iter_mut().zip(predicted_cpu.iter_mut()).enumerate() {
        let rho = rho_l + i as f64 * rho_r;
        let demand = cpu[0] + i as f64 * step;
        *c = demand.min(1.0);
        *l = if demand >= 1.0 { md1k_loss(rho / factor, k) } else { md1k_loss(rho, k) };
    }
    DosCalibration {
        laptop_rate,
        laptop_cpu_cost,
        raspberry_rate,
        raspberry_cpu_cost,
        saturated_service_factor: factor,
        predicted_loss,
        predicted_cpu,
    }
}

/// Margin above 100% demand given to the four-attacker row so that
/// saturation is sustained despite Poisson fluctuations.
pub const CPU_SATURATION_MARGIN: f64 = 0.015;
