//! Trial campaigns and their aggregation into per-scenario reports.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::pipeline::{run_fsm, AttemptRecord, Outcome, SimContext, TrialResult};
use super::scene::generate_scene;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one trial, derived from the campaign seed.
pub fn trial_seed(base: u64, scenario: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(base ^ ((scenario as u64) << 32)) ^ trial as u64)
}

/// Scene and noise seeds for a trial seed.
pub fn trial_seeds(seed: u64) -> (u64, u64) {
    (splitmix64(seed), splitmix64(seed ^ 0x6e6f_6973_65))
}

/// Generates the scenario's scene and runs one full trial.
pub fn run_trial(ctx: &SimContext, scenario: usize, trial: usize, seed: u64) -> Result<TrialResult> {
    let template = ctx.config.scenario(scenario)?;
    let (scene_seed, noise_seed) = trial_seeds(seed);
    let scene = generate_scene(&template, scene_seed)?;
    let mut result = run_fsm(ctx, &scene, noise_seed)?;
    result.scenario = scenario;
    result.trial = trial;
    result.seed = seed;
    Ok(result)
}

/// One line of `trials.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSummary {
    pub scenario: usize,
    pub trial: usize,
    pub seed: u64,
    pub reachable: usize,
    pub seen: usize,
    pub detected: usize,
    pub false_positives: usize,
    pub attempted: usize,
    pub touched: usize,
    pub pollinated: usize,
    pub missed: usize,
}

impl From<&TrialResult> for TrialSummary {
    fn from(r: &TrialResult) -> Self {
        Self {
            scenario: r.scenario,
            trial: r.trial,
            seed: r.seed,
            reachable: r.reachable,
            seen: r.detected + r.false_positives,
            detected: r.detected,
            false_positives: r.false_positives,
            attempted: r.attempted().count(),
            touched: r.count(Outcome::touched),
            pollinated: r.count(|o| o == Outcome::Pollinated),
            missed: r.count(|o| o == Outcome::Missed),
        }
    }
}

const TRIALS_HEADER: &str =
    "scenario,trial,seed,reachable,seen,detected,false_positives,attempted,touched,pollinated,missed";

pub fn trials_csv(rows: &[TrialSummary]) -> String {
    let mut s = format!("{TRIALS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.trial,
            r.seed,
            r.reachable,
            r.seen,
            r.detected,
            r.false_positives,
            r.attempted,
            r.touched,
            r.pollinated,
            r.missed
        );
    }
    s
}

pub fn parse_trials_csv(text: &str) -> Result<Vec<TrialSummary>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == TRIALS_HEADER => {}
        _ => return Err(Error::Config("trials CSV is missing its header".into())),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Config(format!("trials CSV row {}: '{line}'", i + 1));
            if f.len() != 11 {
                return Err(bad());
            }
            let n = |k: usize| f[k].parse::<usize>().map_err(|_| bad());
            Ok(TrialSummary {
                scenario: n(0)?,
                trial: n(1)?,
                seed: f[2].parse().map_err(|_| bad())?,
                reachable: n(3)?,
                seen: n(4)?,
                detected: n(5)?,
                false_positives: n(6)?,
                attempted: n(7)?,
                touched: n(8)?,
                pollinated: n(9)?,
                missed: n(10)?,
            })
        })
        .collect()
}

/// Aggregate over a group of trials. Percentages are over attempted flowers
/// that match a real flower; detection accuracy is the share of reachable
/// flowers that ended up with a confirmed track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    /// Scenario id, or `None` for the all-scenario row.
    pub scenario: Option<usize>,
    pub trials: usize,
    /// Mean reachable flowers per trial.
    pub reachable: f64,
    pub avg_seen: f64,
    pub touched_pct: f64,
    pub pollinated_pct: f64,
    pub missed_pct: f64,
    pub detection_pct: f64,
    pub false_positives: usize,
    pub attempted: usize,
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        f64::NAN
    } else {
        100.0 * n as f64 / d as f64
    }
}

impl TrialReport {
    pub fn from_trials(scenario: Option<usize>, rows: &[TrialSummary]) -> Self {
        let sum = |f: fn(&TrialSummary) -> usize| rows.iter().map(f).sum::<usize>();
        let trials = rows.len();
        let attempted = sum(|r| r.attempted);
        let per_trial = |n: usize| if trials == 0 { 0.0 } else { n as f64 / trials as f64 };
        Self {
            scenario,
            trials,
            reachable: per_trial(sum(|r| r.reachable)),
            avg_seen: per_trial(sum(|r| r.seen)),
            touched_pct: pct(sum(|r| r.touched), attempted),
            pollinated_pct: pct(sum(|r| r.pollinated), attempted),
            missed_pct: pct(sum(|r| r.missed), attempted),
            detection_pct: pct(sum(|r| r.detected), sum(|r| r.reachable)),
            false_positives: sum(|r| r.false_positives),
            attempted,
        }
    }

    pub fn label(&self) -> String {
        self.scenario.map_or_else(|| "all".to_string(), |s| s.to_string())
    }
}

/// One report per scenario present (ascending) followed by the overall row.
pub fn aggregate(rows: &[TrialSummary]) -> Vec<TrialReport> {
    let mut ids: Vec<usize> = rows.iter().map(|r| r.scenario).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut out: Vec<TrialReport> = ids
        .iter()
        .map(|&id| {
            let group: Vec<TrialSummary> = rows.iter().filter(|r| r.scenario == id).copied().collect();
            TrialReport::from_trials(Some(id), &group)
        })
        .collect();
    out.push(TrialReport::from_trials(None, rows));
    out
}

pub fn report_csv(reports: &[TrialReport]) -> String {
    let mut s = String::from(
        "scenario,trials,reachable,avg_seen,touched_pct,pollinated_pct,missed_pct,detection_pct,false_positives\n",
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{:.2},{:.2},{:.1},{:.1},{:.1},{:.1},{}",
            r.label(),
            r.trials,
            r.reachable,
            r.avg_seen,
            r.touched_pct,
            r.pollinated_pct,
            r.missed_pct,
            r.detection_pct,
            r.false_positives
        );
    }
    s
}

/// Plain-text table with scenarios as columns.
pub fn report_table(reports: &[TrialReport]) -> String {
    let rows: [(&str, Box<dyn Fn(&TrialReport) -> String>); 8] = [
        ("Scenario", Box::new(|r| r.label())),
        ("# Trials", Box::new(|r| r.trials.to_string())),
        ("# Reachable", Box::new(|r| format!("{:.1}", r.reachable))),
        ("# Avg. Seen", Box::new(|r| format!("{:.1}", r.avg_seen))),
        ("% Touched", Box::new(|r| format!("{:.1}", r.touched_pct))),
        ("% Pollinated", Box::new(|r| format!("{:.1}", r.pollinated_pct))),
        ("% Missed", Box::new(|r| format!("{:.1}", r.missed_pct))),
        ("% Detected", Box::new(|r| format!("{:.1}", r.detection_pct))),
    ];
    let mut s = String::new();
    for (name, f) in &rows {
        let _ = write!(s, "{name:<14}");
        for r in reports {
            let _ = write!(s, "{:>8}", f(r));
        }
        s.push('\n');
    }
    let fp: usize = reports.iter().filter(|r| r.scenario.is_some()).map(|r| r.false_positives).sum();
    let _ = writeln!(s, "False positives: {fp}");
    s
}

/// One line of `attempts.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptRow {
    pub scenario: usize,
    pub trial: usize,
    pub attempt: AttemptRecord,
}

fn opt(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(String::new, |v| format!("{:.3}", v * scale))
}

pub fn attempts_csv(rows: &[AttemptRow]) -> String {
    let mut s = String::from(
        "scenario,trial,track,flower,outcome,lateral_mm,tilt_deg,miss_mm,servo_steps,servo_end,class_est,class_true\n",
    );
    for r in rows {
        let a = &r.attempt;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{:?},{}",
            r.scenario,
            r.trial,
            a.track,
            a.flower.map_or_else(String::new, |f| f.to_string()),
            a.outcome.name(),
            opt(a.lateral_error, 1000.0),
            opt(a.tilt, 180.0 / std::f64::consts::PI),
            opt(a.miss_distance, 1000.0),
            a.servo_steps,
            a.servo_end.map_or("none", |p| p.name()),
            a.estimated_class,
            a.true_class.map_or_else(String::new, |c| format!("{c:?}")),
        );
    }
    s
}

/// Everything a campaign produces.
#[derive(Debug, Clone, Default)]
pub struct Bench {
    pub trials: Vec<TrialSummary>,
    pub attempts: Vec<AttemptRow>,
}

impl Bench {
    pub fn reports(&self) -> Vec<TrialReport> {
        aggregate(&self.trials)
    }

    /// Miss distances of attempts on real flowers that made no contact. An
    /// attempt that never reached its vantage has no distance and is
    /// reported as infinite.
    pub fn failure_miss_distances(&self) -> Vec<f64> {
        self.attempts
            .iter()
            .filter(|r| r.attempt.flower.is_some() && r.attempt.outcome == Outcome::Missed)
            .map(|r| r.attempt.miss_distance.unwrap_or(f64::INFINITY))
            .collect()
    }
}

/// Runs `trials[i]` trials of `scenarios[i]`; `progress` sees every result
/// before it is dropped.
pub fn run_trials(
    ctx: &SimContext,
    scenarios: &[usize],
    trials: &[usize],
    seed: u64,
    mut progress: impl FnMut(&TrialResult),
) -> Result<Bench> {
    if scenarios.len() != trials.len() {
        return Err(Error::Config("one trial count per scenario is required".into()));
    }
    let mut bench = Bench::default();
    for (&scenario, &count) in scenarios.iter().zip(trials) {
        if count == 0 {
            return Err(Error::Config(format!("scenario {scenario}: trials must be at least 1")));
        }
        for trial in 0..count {
            let result = run_trial(ctx, scenario, trial, trial_seed(seed, scenario, trial))?;
            progress(&result);
            bench.trials.push(TrialSummary::from(&result));
            bench.attempts.extend(result.attempts.iter().cloned().map(|attempt| AttemptRow {
                scenario,
                trial,
                attempt,
            }));
        }
    }
    Ok(bench)
}

/// The configured campaign: every scenario with its trial count and the
/// configured seed.
pub fn run_bench(ctx: &SimContext, progress: impl FnMut(&TrialResult)) -> Result<Bench> {
    let cfg = &ctx.config;
    let ids: Vec<usize> = cfg.trials.scenarios.iter().map(|t| t.id).collect();
    let counts: Vec<usize> = ids.iter().map(|&id| cfg.trial_count(id)).collect();
    run_trials(ctx, &ids, &counts, cfg.trials.seed, progress)
}
