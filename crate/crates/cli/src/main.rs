use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pollisim::classify::{compute_metrics, PatchClassifier};
use pollisim::segmentation::{build_lut, load_labeled_dir};
use pollisim::servo::telemetry_csv;
use pollisim::sim::perception::{train_from_labeled, train_synthetic, PerceptionModels};
use pollisim::sim::pipeline::{run_mapping_sweep, train_models};
use pollisim::sim::report::{
    aggregate, attempts_csv, parse_trials_csv, report_csv, report_table, run_trial, run_trials, trial_seed,
    trial_seeds, trials_csv, Bench,
};
use pollisim::sim::{generate_scene, sweep_poses, NoiseLevel, SimConfig, SimContext, TrialResult};

#[derive(Parser)]
#[command(name = "pollisim", version, about = "Robotic flower pollination simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Base seed (overrides the configured one).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Noise preset: off, low or default.
    #[arg(long, global = true)]
    noise: Option<NoiseLevel>,
    /// Restrict to one scenario (1-8).
    #[arg(long, global = true)]
    scenario: Option<usize>,
    /// Trials per scenario (overrides the configured counts).
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Directory with trained perception models; trained on the fly if absent.
    #[arg(long, global = true)]
    models: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the color model and patch classifiers and save them.
    Train {
        /// Directory of labeled image pairs; the synthetic generator otherwise.
        #[arg(long)]
        labeled: Option<PathBuf>,
    },
    /// Build the color lookup table and report its statistics.
    Lut,
    /// Run the mapping sweep on one scene and export the octree and flower map.
    Map,
    /// Run a single trial with telemetry.
    Run {
        /// Trial index within the scenario.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Run the full campaign and write the report.
    Bench,
    /// Aggregate an existing trials.csv into a report.
    Report {
        /// Path to trials.csv.
        input: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config,
}

impl Common {
    fn sim_config(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(p) => SimConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => SimConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.trials.seed = s;
        }
        if let Some(n) = self.noise {
            cfg.noise.level = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn context(&self, cfg: SimConfig) -> Result<SimContext> {
        let models = match &self.models {
            Some(dir) if dir.exists() => {
                info!("loading models from {}", dir.display());
                PerceptionModels::load_dir(dir)?
            }
            _ => {
                info!("training perception models on synthetic scenes");
                train_models(&cfg)?
            }
        };
        Ok(SimContext::new(cfg, models)?)
    }

    fn scenarios(&self, cfg: &SimConfig) -> Result<(Vec<usize>, Vec<usize>)> {
        let ids: Vec<usize> = match self.scenario {
            Some(id) => vec![cfg.scenario(id)?.id],
            None => cfg.trials.scenarios.iter().map(|t| t.id).collect(),
        };
        let counts = ids.iter().map(|&id| self.trials.unwrap_or_else(|| cfg.trial_count(id))).collect();
        Ok((ids, counts))
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn train(common: &Common, labeled: Option<&Path>) -> Result<()> {
    let cfg = common.sim_config()?;
    let (synthetic, data) = train_synthetic(
        &cfg.synthetic_training(),
        cfg.sweep_center(),
        &cfg.intrinsics()?,
        &cfg.noise(),
        &cfg.patch_options(),
        cfg.orientation_yaw(),
    )?;
    let models = match labeled {
        Some(dir) => {
            let images = load_labeled_dir(dir)?;
            info!("{} labeled images from {}", images.len(), dir.display());
            train_from_labeled(
                &images,
                &cfg.color_options(),
                &cfg.patch_options(),
                &cfg.classifier_config(),
                synthetic.orientation,
            )?
        }
        None => synthetic,
    };

    let mut summary = String::new();
    let sets: [(&str, &dyn PatchClassifier, &[(Vec<f64>, usize)], &[&str]); 2] = [
        ("flower", &models.flower, &data.flower, &["other", "flower"]),
        ("orientation", &models.orientation, &data.orientation, &["C1", "C2", "C3"]),
    ];
    for (name, clf, samples, names) in sets {
        let preds: Vec<(usize, usize)> = samples.iter().map(|(x, y)| (clf.classify(x).argmax(), *y)).collect();
        let m = compute_metrics(&preds, names.len());
        let _ = writeln!(summary, "{name} classifier on synthetic patches ({} samples)", samples.len());
        summary.push_str(&m.to_table(names));
        summary.push('\n');
    }
    print!("{summary}");

    let dir = common.models.clone().unwrap_or_else(|| common.out.join("models"));
    models.save_dir(&dir)?;
    write(&common.out, "training.txt", &summary)?;
    println!("models saved to {}", dir.display());
    Ok(())
}

fn lut(common: &Common) -> Result<()> {
    let cfg = common.sim_config()?;
    let models = match &common.models {
        Some(dir) if dir.exists() => PerceptionModels::load_dir(dir)?,
        _ => train_models(&cfg)?,
    };
    let t0 = Instant::now();
    let lut = build_lut(&models.color);
    let elapsed = t0.elapsed();
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("lut.bin"), lut.table())?;
    println!("entries: {}", lut.len());
    println!("build time: {:.3} s", elapsed.as_secs_f64());
    println!("flower share of color space: {:.4}%", 100.0 * lut.flower_fraction());
    Ok(())
}

fn map(common: &Common) -> Result<()> {
    let cfg = common.sim_config()?;
    let scenario = common.scenario.unwrap_or(1);
    let seed = trial_seed(cfg.trials.seed, scenario, 0);
    let (scene_seed, noise_seed) = trial_seeds(seed);
    let scene = generate_scene(&cfg.scenario(scenario)?, scene_seed)?;
    let ctx = common.context(cfg)?;
    let poses = sweep_poses(&ctx.config.sweep);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let m = run_mapping_sweep(&ctx, &scene, &poses, &mut rng)?;
    let estimates = m.map.snapshot();
    write(&common.out, "octree.txt", &m.octree.export_text())?;
    write(&common.out, "flower_map.csv", &pollisim::mapping::flower_map_csv(&estimates))?;
    println!(
        "scenario {scenario}: {} detections, {} tracks, {} occupied leaves",
        m.detections,
        estimates.len(),
        m.octree.occupied_leaves().len()
    );
    Ok(())
}

fn run(common: &Common, index: usize) -> Result<()> {
    let cfg = common.sim_config()?;
    let scenario = common.scenario.unwrap_or(1);
    let seed = trial_seed(cfg.trials.seed, scenario, index);
    let ctx = common.context(cfg)?;
    let r = run_trial(&ctx, scenario, index, seed)?;
    export_trial(&common.out, &r)?;
    for e in &r.events {
        let track = e.track.map_or(String::new(), |t| format!(" track {t}"));
        println!("{}{track} {}", e.state, e.note);
    }
    for a in &r.attempts {
        println!(
            "track {}: {} ({} servo steps{})",
            a.track,
            a.outcome.name(),
            a.servo_steps,
            a.lateral_error.map_or(String::new(), |e| format!(", tip error {:.2} mm", e * 1e3))
        );
    }
    Ok(())
}

fn export_trial(dir: &Path, r: &TrialResult) -> Result<()> {
    let mut telemetry = String::new();
    let rows: Vec<_> = r.telemetry.iter().map(|(_, row)| row.clone()).collect();
    for (i, line) in telemetry_csv(&rows).lines().enumerate() {
        let track = if i == 0 { "track".to_string() } else { r.telemetry[i - 1].0.to_string() };
        let _ = writeln!(telemetry, "{track},{line}");
    }
    write(dir, "telemetry.csv", &telemetry)?;
    write(dir, "flower_map.csv", &pollisim::mapping::flower_map_csv(&r.flower_map))?;
    write(dir, "octree.txt", &r.octree.export_text())?;
    if let Some((tour, costs, labels)) = &r.tour {
        write(dir, "tour.csv", &pollisim::planning::tour_csv(tour, costs, labels))?;
    }
    let bench = Bench {
        trials: vec![r.into()],
        attempts: r
            .attempts
            .iter()
            .cloned()
            .map(|attempt| pollisim::sim::report::AttemptRow {
                scenario: r.scenario,
                trial: r.trial,
                attempt,
            })
            .collect(),
    };
    write(dir, "attempts.csv", &attempts_csv(&bench.attempts))?;
    write(dir, "trials.csv", &trials_csv(&bench.trials))
}

fn bench(common: &Common) -> Result<()> {
    let cfg = common.sim_config()?;
    let (ids, counts) = common.scenarios(&cfg)?;
    let seed = cfg.trials.seed;
    let t0 = Instant::now();
    let ctx = common.context(cfg)?;
    let bench = run_trials(&ctx, &ids, &counts, seed, |r| {
        info!(
            "scenario {} trial {}: {} attempted, {} pollinated",
            r.scenario,
            r.trial,
            r.attempted().count(),
            r.count(|o| o == pollisim::sim::Outcome::Pollinated)
        );
    })?;
    let reports = bench.reports();
    write(&common.out, "trials.csv", &trials_csv(&bench.trials))?;
    write(&common.out, "attempts.csv", &attempts_csv(&bench.attempts))?;
    write(&common.out, "report.csv", &report_csv(&reports))?;
    let table = report_table(&reports);
    write(&common.out, "report.txt", &table)?;
    print!("{table}");
    println!("{} trials in {:.1} s", bench.trials.len(), t0.elapsed().as_secs_f64());
    Ok(())
}

fn report(common: &Common, input: &Path) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let rows = parse_trials_csv(&text)?;
    if rows.is_empty() {
        bail!("{} has no trials", input.display());
    }
    let reports = aggregate(&rows);
    write(&common.out, "report.csv", &report_csv(&reports))?;
    let table = report_table(&reports);
    write(&common.out, "report.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match &cli.command {
        Command::Train { labeled } => train(c, labeled.as_deref()),
        Command::Lut => lut(c),
        Command::Map => map(c),
        Command::Run { index } => run(c, *index),
        Command::Bench => bench(c),
        Command::Report { input } => report(c, input),
        Command::Config => c.sim_config().map(|cfg| print!("{}", cfg.to_toml())),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
