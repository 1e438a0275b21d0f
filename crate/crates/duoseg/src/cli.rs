//! Command-line entry: configuration, training, ablation sweeps, the
//! variance study, gradient checking and scene dumps.
//!
//! Every run writes a `manifest.json` beside its outputs carrying the full
//! resolved configuration; re-running a subcommand from its manifest
//! reproduces every CSV byte for byte. Exit codes: 0 success, 1 validation
//! error, 2 numeric abort (non-finite loss).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::losses::{loss_csv_row, LOSS_CSV_HEADER};
use crate::metrics::CONVERGENCE_THRESHOLD;
use crate::pseudo::{variance_csv_row, variance_study, VarianceConfig, VARIANCE_CSV_HEADER};
use crate::synthdata::{generate_scene, write_pgm, write_ppm, WeatherConfig};
use crate::trainer::{
    evaluate, run, run_ablation, TrainConfig, TrainError, TrainState, Variant,
};
use crate::verify::{finite_difference_sweep, sweep_csv_row, SWEEP_CSV_HEADER};

const USAGE: &str = "\
usage: duoseg <command> [flags]

commands:
  train           train one configuration
  eval            metrics of a checkpoint on a held-out scene batch
  ablate          run all five variants across seeds
  variance-study  Monte-Carlo variance-reduction experiment
  gradcheck       finite-difference sweep over every operation
  dump-scenes     write PPM/PGM samples of the synthetic scenes

flags (per command):
  train:          --config PATH --seed INT --out DIR --variant NAME
                  --epochs INT --tau FLOAT --alpha FLOAT
                  --lambda1 FLOAT --lambda2 FLOAT --lambda3 FLOAT
  eval:           --ckpt PATH --config PATH --seed INT --out DIR
  ablate:         --config PATH --seeds INT --out DIR
  variance-study: --rho FLOAT --trials INT --sigma FLOAT --seed INT --out DIR
  gradcheck:      --seed INT --out DIR
  dump-scenes:    --count INT --beta FLOAT --night BOOL --seed INT --out DIR";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(String),
    Io(String),
    NonFinite(String),
    GradcheckFailed(usize),
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Dispatches argv (program name excluded) and maps errors onto the exit
/// code taxonomy.
pub fn run_main(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error[usage]: {msg}");
            eprintln!("{USAGE}");
            1
        }
        Err(CliError::Config(msg)) => {
            eprintln!("error[config]: {msg}");
            1
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error[io]: {msg}");
            1
        }
        Err(CliError::NonFinite(msg)) => {
            eprintln!("error[nonfinite]: {msg}");
            2
        }
        Err(CliError::GradcheckFailed(n)) => {
            eprintln!("error[gradcheck]: {n} case(s) failed the finite-difference sweep");
            1
        }
    }
}

fn dispatch(args: &[String]) -> Result<(), CliError> {
    let command = args
        .first()
        .ok_or_else(|| CliError::Usage("missing command".into()))?;
    let flags = parse_flags(&args[1..], allowed_flags(command)?)?;
    match command.as_str() {
        "train" => cmd_train(&flags),
        "eval" => cmd_eval(&flags),
        "ablate" => cmd_ablate(&flags),
        "variance-study" => cmd_variance(&flags),
        "gradcheck" => cmd_gradcheck(&flags),
        "dump-scenes" => cmd_dump_scenes(&flags),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

fn allowed_flags(command: &str) -> Result<&'static [&'static str], CliError> {
    Ok(match command {
        "train" => &[
            "--config", "--seed", "--out", "--variant", "--epochs", "--tau", "--alpha",
            "--lambda1", "--lambda2", "--lambda3",
        ],
        "eval" => &["--ckpt", "--config", "--seed", "--out"],
        "ablate" => &["--config", "--seeds", "--out"],
        "variance-study" => &["--rho", "--trials", "--sigma", "--seed", "--out"],
        "gradcheck" => &["--seed", "--out"],
        "dump-scenes" => &["--count", "--beta", "--night", "--seed", "--out"],
        other => return Err(CliError::Usage(format!("unknown command {other}"))),
    })
}

fn parse_flags(
    args: &[String],
    allowed: &[&str],
) -> Result<HashMap<String, String>, CliError> {
    let mut flags = HashMap::new();
    let mut i = 0;
    while i < args.len() {
        let key = &args[i];
        if !allowed.contains(&key.as_str()) {
            return Err(CliError::Usage(format!("unknown flag {key}")));
        }
        let value = args
            .get(i + 1)
            .ok_or_else(|| CliError::Usage(format!("flag {key} needs a value")))?;
        flags.insert(key.clone(), value.clone());
        i += 2;
    }
    Ok(flags)
}

fn parse<T: std::str::FromStr>(flags: &HashMap<String, String>, key: &str) -> Result<Option<T>, CliError> {
    match flags.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| CliError::Config(format!("cannot parse {key} value {raw:?}"))),
    }
}

fn out_dir(flags: &HashMap<String, String>, command: &str) -> PathBuf {
    flags
        .get("--out")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("duoseg_out").join(command))
}

/// Loads a train config from `--config`, accepting either a bare config or
/// a manifest that wraps one under `"config"`.
fn load_train_config(flags: &HashMap<String, String>) -> Result<TrainConfig, CliError> {
    match flags.get("--config") {
        None => Ok(TrainConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {path}: {e}")))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{path}: {e}")))?;
            let config_value = value.get("config").cloned().unwrap_or(value);
            serde_json::from_value(config_value)
                .map_err(|e| CliError::Config(format!("{path}: {e}")))
        }
    }
}

fn apply_train_overrides(
    cfg: &mut TrainConfig,
    flags: &HashMap<String, String>,
) -> Result<(), CliError> {
    if let Some(seed) = parse::<u64>(flags, "--seed")? {
        cfg.seed = seed;
    }
    if let Some(name) = flags.get("--variant") {
        cfg.variant = Variant::parse(name).map_err(|e| CliError::Config(e.to_string()))?;
    }
    if let Some(epochs) = parse::<usize>(flags, "--epochs")? {
        cfg.epochs = epochs;
    }
    if let Some(tau) = parse::<f64>(flags, "--tau")? {
        cfg.tau = tau;
    }
    if let Some(alpha) = parse::<f64>(flags, "--alpha")? {
        cfg.ema.alpha = alpha;
    }
    if let Some(v) = parse::<f64>(flags, "--lambda1")? {
        cfg.weights.lambda1 = v;
    }
    if let Some(v) = parse::<f64>(flags, "--lambda2")? {
        cfg.weights.lambda2 = v;
    }
    if let Some(v) = parse::<f64>(flags, "--lambda3")? {
        cfg.weights.lambda3 = v;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: String,
    command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ckpt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seeds: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    variance: Option<VarianceManifest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gradcheck_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scenes: Option<ScenesManifest>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VarianceManifest {
    rho: f64,
    sigma: f64,
    trials: usize,
    classes: usize,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenesManifest {
    count: usize,
    beta: Option<f64>,
    night: bool,
    seed: u64,
}

impl Manifest {
    fn new(command: &str) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: None,
            ckpt: None,
            seeds: None,
            variance: None,
            gradcheck_seed: None,
            scenes: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_train(flags: &HashMap<String, String>) -> Result<(), CliError> {
    let mut cfg = load_train_config(flags)?;
    apply_train_overrides(&mut cfg, flags)?;
    cfg.validate()?;
    let dir = out_dir(flags, "train");
    ensure_dir(&dir)?;
    ensure_dir(&dir.join("checkpoints"))?;

    let mut manifest = Manifest::new("train");
    manifest.config = Some(cfg.clone());
    manifest.write(&dir)?;

    let output = run(cfg)?;

    let mut losses = String::from(LOSS_CSV_HEADER);
    losses.push('\n');
    for (step, breakdown) in &output.step_losses {
        losses.push_str(&loss_csv_row(*step, breakdown));
        losses.push('\n');
    }
    fs::write(dir.join("losses.csv"), losses)?;
    fs::write(dir.join("metrics.csv"), output.history.to_csv())?;
    output
        .state
        .save_checkpoint(&dir.join("checkpoints").join("final.ckpt"))?;

    println!("{}", output.history.pretty_table());
    if let Ok(stats) = output.history.convergence(CONVERGENCE_THRESHOLD) {
        match stats.first_epoch_below {
            Some(epoch) => println!(
                "total loss crossed {CONVERGENCE_THRESHOLD} at epoch {epoch}; terminal {:.4}",
                stats.terminal
            ),
            None => println!(
                "total loss never crossed {CONVERGENCE_THRESHOLD}; terminal {:.4}",
                stats.terminal
            ),
        }
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_eval(flags: &HashMap<String, String>) -> Result<(), CliError> {
    let ckpt = flags
        .get("--ckpt")
        .ok_or_else(|| CliError::Usage("eval needs --ckpt PATH".into()))?;
    let mut cfg = load_train_config(flags)?;
    apply_train_overrides(&mut cfg, flags)?;
    let dir = out_dir(flags, "eval");
    ensure_dir(&dir)?;

    let state = TrainState::load_checkpoint(Path::new(ckpt), cfg.clone())?;
    let pool = state.eval_pool()?;
    let (miou, acc) = evaluate(&state, &pool)?;

    let mut manifest = Manifest::new("eval");
    manifest.config = Some(cfg);
    manifest.ckpt = Some(ckpt.clone());
    manifest.write(&dir)?;

    let csv = format!("step,miou,pixel_acc\n{},{},{}\n", state.step, miou, acc);
    fs::write(dir.join("metrics.csv"), csv)?;
    println!("step {}: mIoU {:.4}, pixel accuracy {:.4}", state.step, miou, acc);
    Ok(())
}

fn cmd_ablate(flags: &HashMap<String, String>) -> Result<(), CliError> {
    let base = match flags.get("--config") {
        Some(_) => load_train_config(flags)?,
        None => TrainConfig::benchmark(Variant::Complete, 0),
    };
    let n_seeds = parse::<u64>(flags, "--seeds")?.unwrap_or(5);
    if n_seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (1..=n_seeds).collect();
    let dir = out_dir(flags, "ablate");
    ensure_dir(&dir)?;

    let mut manifest = Manifest::new("ablate");
    manifest.config = Some(base.clone());
    manifest.seeds = Some(seeds.clone());
    manifest.write(&dir)?;

    let result = run_ablation(&base, &Variant::ALL, &seeds)?;
    fs::write(dir.join("ablation.csv"), result.to_csv())?;

    println!("{:<10} {:>10}", "variant", "mean mIoU");
    for variant in Variant::ALL {
        if let Some(mean) = result.mean_miou(variant) {
            println!("{:<10} {:>10.4}", variant.name(), mean);
        }
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn cmd_variance(flags: &HashMap<String, String>) -> Result<(), CliError> {
    let mut cfg = VarianceConfig::default();
    if let Some(rho) = parse::<f64>(flags, "--rho")? {
        cfg.rho = rho;
    }
    if let Some(trials) = parse::<usize>(flags, "--trials")? {
        cfg.trials = trials;
    }
    if let Some(sigma) = parse::<f64>(flags, "--sigma")? {
        cfg.sigma = sigma;
    }
    if let Some(seed) = parse::<u64>(flags, "--seed")? {
        cfg.seed = seed;
    }
    let dir = out_dir(flags, "variance-study");
    ensure_dir(&dir)?;

    let mut manifest = Manifest::new("variance-study");
    manifest.variance = Some(VarianceManifest {
        rho: cfg.rho,
        sigma: cfg.sigma,
        trials: cfg.trials,
        classes: cfg.classes,
        seed: cfg.seed,
    });
    manifest.write(&dir)?;

    let report = variance_study(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let mut csv = String::from(VARIANCE_CSV_HEADER);
    csv.push('\n');
    csv.push_str(&variance_csv_row(&report));
    csv.push('\n');
    fs::write(dir.join("variance.csv"), csv)?;

    println!(
        "rho={} trials={}: var_single={:.6e} var_avg={:.6e} ratio={:.4} cov={:.6e}",
        report.rho, report.trials, report.var_single, report.var_avg, report.ratio, report.cov
    );
    Ok(())
}

fn cmd_gradcheck(flags: &HashMap<String, String>) -> Result<(), CliError> {
    let seed = parse::<u64>(flags, "--seed")?.unwrap_or(7);
    let dir = out_dir(flags, "gradcheck");
    ensure_dir(&dir)?;

    let mut manifest = Manifest::new("gradcheck");
    manifest.gradcheck_seed = Some(seed);
    manifest.write(&dir)?;

    let entries = finite_difference_sweep(seed)?;
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    let mut failures = 0usize;
    for entry in &entries {
        csv.push_str(&sweep_csv_row(entry));
        csv.push('\n');
        println!(
            "{:<32} {:>4} coords  max rel err {:.3e}  {}",
            entry.name,
            entry.coords,
            entry.max_rel_err,
            if entry.passed { "PASS" } else { "FAIL" }
        );
        if !entry.passed {
            failures += 1;
        }
    }
    fs::write(dir.join("gradcheck.csv"), csv)?;
    if failures > 0 {
        return Err(CliError::GradcheckFailed(failures));
    }
    Ok(())
}

fn cmd_dump_scenes(flags: &HashMap<String, String>) -> Result<(), CliError> {
    let count = parse::<usize>(flags, "--count")?.unwrap_or(8);
    let beta = parse::<f64>(flags, "--beta")?;
    let night = parse::<bool>(flags, "--night")?.unwrap_or(false);
    let seed = parse::<u64>(flags, "--seed")?.unwrap_or(0);
    let dir = out_dir(flags, "dump-scenes");
    ensure_dir(&dir)?;
    let scenes_dir = dir.join("scenes");
    ensure_dir(&scenes_dir)?;

    let mut manifest = Manifest::new("dump-scenes");
    manifest.scenes = Some(ScenesManifest {
        count,
        beta,
        night,
        seed,
    });
    manifest.write(&dir)?;

    let dims = crate::nets::ModelDims::default();
    let presets = [
        WeatherConfig::clean(),
        WeatherConfig::soft(),
        WeatherConfig::medium(),
        WeatherConfig::hard(),
    ];
    for index in 0..count {
        let mut weather = match beta {
            Some(b) => WeatherConfig::from_beta(b),
            None => presets[index % presets.len()],
        };
        if night {
            weather = weather.with_night();
        }
        weather.validate().map_err(|e| CliError::Config(e.to_string()))?;
        let (image, mask) = generate_scene(&dims, &weather, seed.wrapping_add(index as u64));
        write_ppm(&scenes_dir.join(format!("scene_{index:04}.ppm")), &image)?;
        write_pgm(
            &scenes_dir.join(format!("scene_{index:04}.pgm")),
            &mask,
            dims.width,
            dims.classes,
        )?;
    }
    println!("wrote {count} scene pairs to {}", scenes_dir.display());
    Ok(())
}
