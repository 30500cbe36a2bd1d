//! Scenario files: one TOML document per experiment. See `SCHEMA.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use meterguard::attacks::{Attacker, FloodProfile};
use meterguard::protocol::ProtocolConfig;
use meterguard::simnet::{Endpoint, NetworkConfig};
use meterguard::synth::PatternSpec;
use meterguard::types::{NodeId, Reading, Timestamp};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

/// Scenarios shipped with the binary, by name.
pub const BUNDLED: [(&str, &str); 5] = [
    ("table3_restore", include_str!("../scenarios/table3_restore.toml")),
    ("majority_compromise", include_str!("../scenarios/majority_compromise.toml")),
    ("dos_sweep", include_str!("../scenarios/dos_sweep.toml")),
    ("dos_plus_injection", include_str!("../scenarios/dos_plus_injection.toml")),
    ("clean_week", include_str!("../scenarios/clean_week.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub topology: Topology,
    pub span: Span,
    /// Reading pattern of every node without an entry in `node_patterns`.
    #[serde(default = "default_pattern")]
    pub pattern: PatternSpec,
    /// Per-node patterns keyed by node id.
    #[serde(default)]
    pub node_patterns: BTreeMap<String, PatternSpec>,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    pub monitor: Option<MonitorSpec>,
    pub sweep: Option<Sweep>,
    #[serde(default)]
    pub output: OutputOptions,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

fn default_pattern() -> PatternSpec {
    PatternSpec::alternating(vec![30.0, 10.0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub nodes: Vec<NodeId>,
    #[serde(default = "access_point")]
    pub access_point: NodeId,
}

fn access_point() -> NodeId {
    NodeId::ACCESS_POINT
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub start: Timestamp,
    pub end: Timestamp,
}

fn zero() -> f64 {
    0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    /// Flood `target` from every attacker over `[start, start + duration_s)`.
    /// Attackers are node ids or names of outside machines; rates default
    /// to the fitted constants.
    Dos {
        start: Timestamp,
        duration_s: f64,
        targets: Vec<NodeId>,
        attackers: Vec<Endpoint>,
        /// Calibrated class per attacker; inferred from the endpoint when
        /// absent.
        #[serde(default)]
        profiles: Option<Vec<FloodProfile>>,
        #[serde(default)]
        rates: Option<Vec<f64>>,
        #[serde(default)]
        cpu_costs: Option<Vec<f64>>,
    },
    /// Rewrite `target`'s own readings in `[start, end)` at time `at`.
    FalseDataInjection {
        at: Timestamp,
        target: NodeId,
        start: Timestamp,
        end: Timestamp,
        #[serde(default = "zero")]
        value: f64,
    },
    /// Rewrite `source`'s readings in its own store and in the replicas of
    /// `targets` at time `at`.
    MajorityCompromise {
        at: Timestamp,
        source: NodeId,
        targets: BTreeSet<NodeId>,
        start: Timestamp,
        end: Timestamp,
        #[serde(default = "zero")]
        value: f64,
    },
}

impl AttackSpec {
    /// Time at which the attack takes effect.
    pub fn at(&self) -> Timestamp {
        match self {
            AttackSpec::Dos { start, .. } => *start,
            AttackSpec::FalseDataInjection { at, .. } | AttackSpec::MajorityCompromise { at, .. } => *at,
        }
    }

    /// Flooding machines with their rates, the first `limit` only.
    pub fn attackers(&self, limit: Option<usize>) -> Vec<Attacker> {
        let AttackSpec::Dos {
            attackers,
            profiles,
            rates,
            cpu_costs,
            ..
        } = self
        else {
            return Vec::new();
        };
        attackers
            .iter()
            .enumerate()
            .take(limit.unwrap_or(usize::MAX))
            .map(|(i, e)| {
                let mut a = match profiles {
                    Some(p) => Attacker::with_profile(e.clone(), p[i]),
                    None => Attacker::calibrated(e.clone()),
                };
                if let Some(r) = rates {
                    a.rate = r[i];
                }
                if let Some(c) = cpu_costs {
                    a.cpu_cost = c[i];
                }
                a
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorSpec {
    pub target: NodeId,
    #[serde(default = "laptop")]
    pub prober: Endpoint,
    #[serde(default = "tenth")]
    pub interval_s: f64,
}

fn laptop() -> Endpoint {
    Endpoint::External("laptop".into())
}

fn tenth() -> f64 {
    0.1
}

/// Repeats the run with the first 1..=n attackers of the DoS attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub attack: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputOptions {
    /// Keep every event in memory and write `events.csv`.
    pub events: bool,
    /// Write the final stores as `node<owner>_src<source>.csv` files.
    pub stores: bool,
}

impl Default for OutputOptions {
    fn default() -> Self {
        OutputOptions {
            events: true,
            stores: false,
        }
    }
}

/// Built-in checks evaluated by the runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// `node`'s copy of `source` over `[start, end)` at time `at` (after
    /// attacks scheduled at the same instant) equals `readings`.
    StoreEquals {
        at: Timestamp,
        node: NodeId,
        source: NodeId,
        start: Timestamp,
        end: Timestamp,
        readings: Vec<(Timestamp, f64)>,
    },
    /// Total corrections applied, over the whole run.
    Corrections { count: usize },
    /// At the end of the run `node`'s copy of `source`, up to the attack
    /// time, has the digest recorded before (or after) attack `attack`.
    DigestMatchesAttack { attack: usize, state: AttackState },
    /// No defence round opens at or after `after`.
    NoRoundsAfter { after: Timestamp },
    /// The loss/CPU table of a sweep, in percent.
    DosTable {
        loss_pct: Vec<f64>,
        cpu_pct: Vec<f64>,
        tolerance_pct: f64,
    },
    /// Loss and mean RTT never decrease with more attackers.
    Monotone,
    /// Mean RTT before any flood.
    BaselineRtt { ms: f64, tolerance_ms: f64 },
    /// In the run with `attackers` attackers (or the only run) some round
    /// that requested `node` closed by its deadline.
    RoundTimesOut {
        #[serde(default)]
        attackers: Option<usize>,
        node: NodeId,
    },
    /// Corrections exist and the first is applied at or after `after`.
    RestoredAfter { after: Timestamp },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackState {
    Before,
    After,
}

impl Assertion {
    pub fn name(&self) -> String {
        match self {
            Assertion::StoreEquals { at, node, source, .. } => format!("store_equals(node {node}, source {source}, {at})"),
            Assertion::Corrections { count } => format!("corrections == {count}"),
            Assertion::DigestMatchesAttack { attack, state } => {
                format!("digest_matches_attack({attack}, {state:?})").to_lowercase()
            }
            Assertion::NoRoundsAfter { after } => format!("no_rounds_after({after})"),
            Assertion::DosTable { tolerance_pct, .. } => format!("dos_table(±{tolerance_pct})"),
            Assertion::Monotone => "monotone".into(),
            Assertion::BaselineRtt { ms, tolerance_ms } => format!("baseline_rtt({ms}±{tolerance_ms} ms)"),
            Assertion::RoundTimesOut { attackers, node } => match attackers {
                Some(k) => format!("round_times_out(node {node}, {k} attackers)"),
                None => format!("round_times_out(node {node})"),
            },
            Assertion::RestoredAfter { after } => format!("restored_after({after})"),
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ConfigError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Scenario::parse(&text)
    }

    /// A bundled scenario by name, or a scenario file by path.
    pub fn resolve(name_or_path: &str) -> Result<Scenario, ConfigError> {
        match BUNDLED.iter().find(|(name, _)| *name == name_or_path) {
            Some((_, text)) => Scenario::parse(text),
            None if Path::new(name_or_path).exists() => Scenario::load(Path::new(name_or_path)),
            None => Err(ConfigError::UnknownScenario(name_or_path.into())),
        }
    }

    pub fn pattern_of(&self, node: NodeId) -> &PatternSpec {
        self.node_patterns.get(&node.to_string()).unwrap_or(&self.pattern)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        let nodes: BTreeSet<NodeId> = self.topology.nodes.iter().copied().collect();
        if nodes.len() != self.topology.nodes.len() {
            return invalid("topology.nodes has duplicates".into());
        }
        if nodes.len() < 2 {
            return invalid("topology needs at least two nodes".into());
        }
        let known = |id: &NodeId, what: &str| {
            if nodes.contains(id) {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{what} references unknown node {id}")))
            }
        };
        known(&self.topology.access_point, "topology.access_point")?;
        if self.span.start >= self.span.end {
            return invalid(format!("span start {} is not before end {}", self.span.start, self.span.end));
        }
        self.pattern.validate().map_err(ConfigError::Invalid)?;
        for (key, spec) in &self.node_patterns {
            let id: NodeId = key
                .parse::<u32>()
                .ok()
                .and_then(|n| NodeId::new(n).ok())
                .ok_or_else(|| ConfigError::Invalid(format!("node_patterns key `{key}` is not a node id")))?;
            known(&id, "node_patterns")?;
            spec.validate().map_err(|e| ConfigError::Invalid(format!("node_patterns.{key}: {e}")))?;
        }
        self.network.validate().map_err(ConfigError::Invalid)?;
        if !(self.protocol.defence_period_s > 0.0 && self.protocol.round_deadline_s > 0.0) {
            return invalid("defence period and round deadline must be positive".into());
        }
        for (i, attack) in self.attacks.iter().enumerate() {
            let what = format!("attacks[{i}]");
            match attack {
                AttackSpec::Dos {
                    duration_s,
                    targets,
                    attackers,
                    profiles,
                    rates,
                    cpu_costs,
                    ..
                } => {
                    if profiles.as_ref().is_some_and(|p| p.len() != attackers.len()) {
                        return invalid(format!("{what}: one profile per attacker"));
                    }
                    if targets.is_empty() || attackers.is_empty() {
                        return invalid(format!("{what}: targets and attackers must be nonempty"));
                    }
                    if !(*duration_s >= 0.0) {
                        return invalid(format!("{what}: duration_s must be non-negative"));
                    }
                    for t in targets {
                        known(t, &what)?;
                    }
                    for a in attackers {
                        if let Endpoint::Node(id) = a {
                            known(id, &what)?;
                        }
                    }
                    for list in [rates, cpu_costs].into_iter().flatten() {
                        if list.len() != attackers.len() {
                            return invalid(format!("{what}: one rate and cpu cost per attacker"));
                        }
                    }
                    if rates.iter().flatten().any(|r| !(*r > 0.0)) {
                        return invalid(format!("{what}: rates must be positive"));
                    }
                }
                AttackSpec::FalseDataInjection { target, start, end, .. } => {
                    known(target, &what)?;
                    if start > end {
                        return invalid(format!("{what}: start {start} is after end {end}"));
                    }
                }
                AttackSpec::MajorityCompromise {
                    source,
                    targets,
                    start,
                    end,
                    ..
                } => {
                    known(source, &what)?;
                    for t in targets {
                        known(t, &what)?;
                    }
                    if targets.is_empty() {
                        return invalid(format!("{what}: targets must be nonempty"));
                    }
                    if start > end {
                        return invalid(format!("{what}: start {start} is after end {end}"));
                    }
                }
            }
            if !(self.span.start..self.span.end).contains(&attack.at()) {
                return invalid(format!("{what}: takes effect outside the span"));
            }
        }
        if let Some(m) = &self.monitor {
            known(&m.target, "monitor.target")?;
            if !(m.interval_s > 0.0) {
                return invalid("monitor.interval_s must be positive".into());
            }
        }
        if let Some(s) = &self.sweep {
            if !matches!(self.attacks.get(s.attack), Some(AttackSpec::Dos { .. })) {
                return invalid(format!("sweep.attack {} is not a dos attack", s.attack));
            }
            if self.monitor.is_none() {
                return invalid("a sweep needs a monitor".into());
            }
        }
        for a in &self.assertions {
            match a {
                Assertion::StoreEquals { node, source, .. } => {
                    known(node, "assertion")?;
                    known(source, "assertion")?;
                }
                Assertion::DigestMatchesAttack { attack, .. } => {
                    if !matches!(
                        self.attacks.get(*attack),
                        Some(AttackSpec::FalseDataInjection { .. } | AttackSpec::MajorityCompromise { .. })
                    ) {
                        return invalid(format!("assertion references attack {attack}, not an injection"));
                    }
                }
                Assertion::RoundTimesOut { node, .. } => known(node, "assertion")?,
                Assertion::DosTable { .. } | Assertion::Monotone | Assertion::BaselineRtt { .. } if self.sweep.is_none() => {
                    return invalid(format!("{} needs a sweep", a.name()));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Pairs of `[time, value]` as readings.
pub fn readings(pairs: &[(Timestamp, f64)]) -> Vec<Reading> {
    pairs.iter().map(|&(t, v)| Reading::new(t, v)).collect()
}
