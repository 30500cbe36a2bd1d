//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero on any FAIL.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use meterguard::anomaly::{approximate_entropy, approximate_entropy_default, dtw_exact, fast_dtw, seasonal_esd, DetectorConfig};
use meterguard::journal::event_line;
use meterguard::synth::{generate_stream, PatternSpec};
use meterguard::types::{parse_timestamp, NodeId, SimTime, Timestamp};
use meterguard_cli::report::{to_json, Report};
use meterguard_cli::runner::{run_scenario, Overrides, RunOutput};
use meterguard_cli::scenario::{Scenario, BUNDLED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ts(s: &str) -> Timestamp {
    parse_timestamp(s).unwrap()
}

fn run_bundled(name: &str) -> (RunOutput, Duration) {
    let scenario = Scenario::resolve(name).expect("bundled scenario");
    let started = Instant::now();
    let out = run_scenario(&scenario, &Overrides::default()).expect("scenario runs");
    (out, started.elapsed())
}

fn failed_assertions(report: &Report) -> String {
    report
        .assertions
        .iter()
        .filter(|a| !a.passed)
        .map(|a| format!("{}: {}", a.name, a.detail))
        .collect::<Vec<_>>()
        .join(" | ")
}

fn table3_restore() -> Outcome {
    let (out, elapsed) = run_bundled("table3_restore");
    let report = &out.report;
    if !report.passed {
        return Err(failed_assertions(report));
    }
    let run = &report.runs[0];
    let injected = SimTime::from_timestamp(ts("2019-06-30 18:00:40"));
    let last = run.corrections.iter().map(|c| c.sim_time).max().ok_or("no corrections")?;
    let lag = last.secs_since(injected);
    if lag > 60.0 + 10.0 {
        return Err(format!("restored {lag:.1} s after the injection"));
    }
    if elapsed >= Duration::from_secs(5) {
        return Err(format!("took {elapsed:?}"));
    }
    Ok(format!(
        "post-attack store zeroed, restored {lag:.1} s after injection, {} corrections, {elapsed:.2?}",
        run.corrections.len()
    ))
}

fn majority_compromise() -> Outcome {
    let (out, _) = run_bundled("majority_compromise");
    let report = &out.report;
    if !report.passed {
        return Err(failed_assertions(report));
    }
    let audit = &report.runs[0].audits[0];
    if audit.final_digest != audit.audit.digest_after || audit.audit.digest_after == audit.audit.digest_before {
        return Err("final store is not the corrupted snapshot".into());
    }
    Ok(format!("zeros kept, final digest {} equals the corrupted snapshot", &audit.final_digest[..12]))
}

fn dos_sweep() -> Outcome {
    let (out, elapsed) = run_bundled("dos_sweep");
    let report = &out.report;
    let rows: Vec<String> = report
        .dos_table
        .iter()
        .map(|r| format!("{}:{:.1}%/{:.1}%", r.attackers, r.loss_pct, r.cpu_pct))
        .collect();
    if !report.passed {
        return Err(format!("{} [{}]", failed_assertions(report), rows.join(" ")));
    }
    let per_scenario = elapsed / report.runs.len() as u32;
    if per_scenario >= Duration::from_secs(30) {
        return Err(format!("{per_scenario:?} per scenario"));
    }
    let rtts: Vec<String> = report
        .dos_table
        .iter()
        .map(|r| format!("{:.0}", r.mean_rtt_ms.unwrap_or(f64::NAN)))
        .collect();
    Ok(format!(
        "loss/cpu {} ; mean rtt {} ms ; baseline {:.2} ms ; rounds via node 1 time out at 4 ; {per_scenario:.2?} per scenario",
        rows.join(" "),
        rtts.join("/"),
        report.dos_table[0].baseline_rtt_ms.unwrap_or(f64::NAN)
    ))
}

/// Minimum cost over every monotone warping path, by enumeration.
fn brute_force_dtw(a: &[f64], b: &[f64]) -> f64 {
    fn walk(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (a[i] - b[j]).abs();
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

fn dtw() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let series = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(-50.0..50.0)).collect::<Vec<f64>>();
    for pair in 0..120 {
        let (n, m) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let (a, b) = (series(&mut rng, n), series(&mut rng, m));
        let exact = dtw_exact(&a, &b).map_err(|e| e.to_string())?.distance;
        let fast = fast_dtw(&a, &b, n.max(m)).map_err(|e| e.to_string())?.distance;
        if fast != exact {
            return Err(format!("pair {pair} ({n}x{m}): fast {fast} != exact {exact}"));
        }
    }
    for pair in 0..60 {
        let (n, m) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (a, b) = (series(&mut rng, n), series(&mut rng, m));
        let exact = dtw_exact(&a, &b).map_err(|e| e.to_string())?.distance;
        let brute = brute_force_dtw(&a, &b);
        if (exact - brute).abs() > 1e-9 {
            return Err(format!("pair {pair} ({n}x{m}): exact {exact} != enumeration {brute}"));
        }
    }
    Ok("fast_dtw at full radius equals exact on 120 pairs (len <= 64); exact equals path enumeration on 60 pairs (len <= 8)".into())
}

/// Pincus' definition written out: Phi_m = mean over templates of
/// ln(fraction of templates within r).
fn apen_direct(x: &[f64], m: usize, r: f64) -> f64 {
    let phi = |m: usize| {
        let count = x.len() - m + 1;
        let mut total = 0.0;
        for i in 0..count {
            let mut close = 0;
            for j in 0..count {
                let d = (0..m).map(|k| (x[i + k] - x[j + k]).abs()).fold(0.0, f64::max);
                if d <= r {
                    close += 1;
                }
            }
            total += (close as f64 / count as f64).ln();
        }
        total / count as f64
    };
    phi(m) - phi(m + 1)
}

fn apen() -> Outcome {
    let constant = approximate_entropy_default(&[42.0; 64]).map_err(|e| e.to_string())?;
    if constant != 0.0 {
        return Err(format!("constant series scores {constant}"));
    }
    let alternating: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 30.0 } else { 10.0 }).collect();
    let sigma = 10.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // uniform with the same mean and standard deviation
        let half_width = sigma * 3f64.sqrt();
        let random: Vec<f64> = (0..200).map(|_| 20.0 + rng.random_range(-half_width..half_width)).collect();
        let (a, r) = (
            approximate_entropy(&alternating, 2, 0.2 * sigma).map_err(|e| e.to_string())?,
            approximate_entropy(&random, 2, 0.2 * sigma).map_err(|e| e.to_string())?,
        );
        if a >= r {
            return Err(format!("seed {seed}: alternating {a} >= random {r}"));
        }
    }
    let hand = [1.0, 2.0, 1.5, 3.0, 2.0, 1.0];
    let got = approximate_entropy(&hand, 2, 0.6).map_err(|e| e.to_string())?;
    let want = apen_direct(&hand, 2, 0.6);
    if (got - want).abs() > 1e-12 {
        return Err(format!("hand case {got} != {want}"));
    }
    Ok(format!("constant 0; alternating < random on 20 seeds; hand case {got:.12} matches"))
}

fn esd() -> Outcome {
    let period = 24;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise_sd = 0.1;
    let clean: Vec<f64> = (0..2 * period)
        .map(|i| {
            let u: f64 = rng.random_range(-1.0..1.0);
            (2.0 * std::f64::consts::PI * i as f64 / period as f64).sin() + noise_sd * 3f64.sqrt() * u
        })
        .collect();
    let found = seasonal_esd(&clean, period, 0.05, 5).map_err(|e| e.to_string())?;
    if !found.is_empty() {
        return Err(format!("clean sinusoid flags {found:?}"));
    }
    for spike_at in [3, 17, 30, 46] {
        let mut x = clean.clone();
        x[spike_at] += 10.0 * noise_sd;
        let found = seasonal_esd(&x, period, 0.05, 5).map_err(|e| e.to_string())?;
        if found != vec![spike_at] {
            return Err(format!("spike at {spike_at}: found {found:?}"));
        }
    }

    // tampered day: node 1's readings from 17:50 up to the injection
    let spec = PatternSpec {
        sample_interval_s: 7.5,
        offset_s: 2.0,
        ..PatternSpec::alternating(vec![30.0, 10.0])
    };
    let node = NodeId::new(1).unwrap();
    let readings: Vec<_> = generate_stream(&spec, node, ts("2019-06-30 17:50:00"), ts("2019-06-30 18:00:40"))
        .map_err(|e| e.to_string())?
        .collect();
    let zeroed: Vec<usize> = readings
        .iter()
        .enumerate()
        .filter(|(_, r)| r.time >= ts("2019-06-30 18:00:15") && r.time < ts("2019-06-30 18:00:30"))
        .map(|(i, _)| i)
        .collect();
    let mut values: Vec<f64> = readings.iter().map(|r| r.value).collect();
    for &i in &zeroed {
        values[i] = 0.0;
    }
    let cfg = DetectorConfig::default();
    let k = (cfg.esd_max_fraction * values.len() as f64).ceil() as usize;
    let found = seasonal_esd(&values, cfg.esd_period, cfg.esd_alpha, k).map_err(|e| e.to_string())?;
    if zeroed.len() != 2 || found != zeroed {
        return Err(format!("tampered day: zeroed {zeroed:?}, found {found:?}"));
    }
    Ok(format!("10σ spike found at its index (4 positions); clean set empty; injected zeros {found:?} flagged"))
}

fn determinism() -> Outcome {
    let mut checked = Vec::new();
    for (name, _) in BUNDLED {
        let (a, _) = run_bundled(name);
        let (b, _) = run_bundled(name);
        if to_json(&a.report) != to_json(&b.report) {
            return Err(format!("{name}: reports differ"));
        }
        let log = |o: &RunOutput| o.artifacts.iter().flat_map(|a| a.events.iter().map(event_line)).collect::<String>();
        if log(&a) != log(&b) {
            return Err(format!("{name}: event logs differ"));
        }
        checked.push(name);
    }
    Ok(format!("byte-identical reports and event logs for {}", checked.join(", ")))
}

fn clean_week() -> Outcome {
    let (out, _) = run_bundled("clean_week");
    let report = &out.report;
    if !report.passed {
        return Err(failed_assertions(report));
    }
    let run = &report.runs[0];
    Ok(format!(
        "0 rounds after the 3-day cold start ({} during it, {} detections in total)",
        run.rounds.len(),
        run.detections.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("table3_restore", table3_restore),
        ("majority_compromise", majority_compromise),
        ("dos_sweep", dos_sweep),
        ("dtw_oracle", dtw),
        ("apen_properties", apen),
        ("seasonal_esd", esd),
        ("determinism", determinism),
        ("clean_week", clean_week),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
