use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scoretpp_core::data::{self, Dataset, Normalizer};
use scoretpp_core::hawkes::{self, HawkesParams};
use scoretpp_core::metrics::{self, SamplePack};
use scoretpp_core::sampling::{self, SampleError};
use scoretpp_core::training::{self, TrainError};
use scoretpp_core::{Checkpoint, ConfigError, Error, Model, RunConfig};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Core(e.into())
    }
}

fn core<E: Into<Error>>(e: E) -> CliError {
    CliError::Core(e.into())
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = read(path)?;
    data::parse_sequences(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_hawkes(path: &Path) -> Result<HawkesParams, CliError> {
    let text = read(path)?;
    let params: HawkesParams =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    params.validate().map_err(core)?;
    Ok(params)
}

/// Profile, then config file, then `--set` pairs.
pub fn load_config(profile: Option<&str>, file: Option<&Path>, set: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = match profile {
        Some(name) => RunConfig::profile(name)?,
        None => RunConfig::default(),
    };
    if let Some(path) = file {
        cfg.apply_text(&read(path)?)?;
    }
    for pair in set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

pub fn simulate(params: &Path, t_max: f64, count: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(CliError::Usage(format!("--t-max must be positive, got {t_max}")));
    }
    let params = read_hawkes(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dataset = hawkes::simulate_dataset(&params, t_max, count, &mut rng).map_err(core)?;
    write(out, &dataset.to_jsonl())?;
    match data::dataset_stats(&dataset) {
        Ok(stats) => say!("{stats}"),
        Err(_) => say!("types={} events=0 avg_length=0", dataset.num_types),
    }
    Ok(())
}

pub fn split(path: &Path, ratios: &str, seed: u64, out: &Path) -> Result<(), CliError> {
    let parts: Vec<f64> = ratios
        .split(',')
        .map(|r| r.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("--ratios: {e}")))?;
    let ratios: [f64; 3] = parts
        .try_into()
        .map_err(|_| CliError::Usage("--ratios needs three comma-separated values".into()))?;
    let dataset = read_dataset(path)?;
    let (train, dev, test) = data::split(&dataset, ratios, seed).map_err(core)?;
    fs::create_dir_all(out).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
        write(&out.join(format!("{name}.jsonl")), &part.to_jsonl())?;
        say!("{name}: sequences={} events={}", part.len(), part.num_events());
    }
    Ok(())
}

/// A directory means `<dir>/<name>.jsonl`; a file is used as is, except for
/// the dev split, which then comes from the config.
fn resolve(data: Option<&Path>, name: &str, fallback: Option<&PathBuf>) -> Option<PathBuf> {
    match data {
        Some(p) if p.is_dir() => Some(p.join(format!("{name}.jsonl"))),
        Some(p) if name != "dev" => Some(p.to_path_buf()),
        _ => fallback.cloned(),
    }
}

pub fn train(mut cfg: RunConfig, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let train_path = resolve(data, "train", cfg.data.train.as_ref())
        .ok_or_else(|| CliError::Usage("no training data: pass --data or set data.train".into()))?;
    if !train_path.is_file() {
        return Err(CliError::Usage(format!("training data {} does not exist", train_path.display())));
    }
    let dev_path = resolve(data, "dev", cfg.data.dev.as_ref()).filter(|p| p.is_file());
    cfg.data.train = Some(train_path.clone());
    cfg.data.dev = dev_path.clone();
    cfg.validate()?;
    say!(
        "config: sigma={:?} lr={:?} batch_size={} epochs={} objective={} alpha={:?} normalizer={} seed={}",
        cfg.train.sigma,
        cfg.train.lr,
        cfg.train.batch_size,
        cfg.train.epochs,
        cfg.train.objective,
        cfg.train.alpha,
        cfg.data.normalizer,
        cfg.seed
    );

    let train_set = read_dataset(&train_path)?;
    let dev_set = dev_path.as_deref().map(read_dataset).transpose()?;
    let num_types = if cfg.num_types > 0 {
        cfg.num_types
    } else {
        train_set.num_types.max(dev_set.as_ref().map_or(1, |d| d.num_types))
    };
    cfg.num_types = num_types;
    let normalizer = Normalizer::fit(&train_set, cfg.data.normalizer, cfg.data.scale).map_err(core)?;
    let normalize = |ds: &Dataset| -> Result<Vec<_>, CliError> {
        ds.sequences.iter().map(|s| normalizer.apply(s).map_err(core)).collect()
    };
    let train_norm = normalize(&train_set)?;
    let dev_norm = dev_set.as_ref().map(normalize).transpose()?.unwrap_or_default();
    if cfg.prior_max.is_none() {
        cfg.prior_max = Some(sampling::default_prior_max(&train_norm).map_err(core)?);
    }

    let model = Model::init(cfg.model_config(num_types), cfg.seed).map_err(core)?;
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log");
    let log_path = PathBuf::from(log_path);
    let mut log = fs::File::create(&log_path).map_err(|source| CliError::Io {
        path: log_path.clone(),
        source,
    })?;
    let trainer = training::train(model, &cfg.train, &train_norm, &dev_norm, |summary, _| {
        say!("{summary}");
        writeln!(log, "{summary}").map_err(|e| TrainError::Callback(e.to_string()))
    })
    .map_err(core)?;
    let ckpt = Checkpoint {
        config: cfg,
        normalizer,
        epoch: trainer.epoch,
        model: trainer.model,
        adam: trainer.adam,
    };
    ckpt.save(out).map_err(core)?;
    Ok(())
}

pub fn sample(
    checkpoint: &Path,
    set: &[String],
    data: Option<&Path>,
    algorithm: Option<&str>,
    num_samples: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint).map_err(core)?;
    let mut cfg = ckpt.config.clone();
    for pair in set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(a) = algorithm {
        cfg.set("sample.algorithm", a)?;
    }
    if let Some(u) = num_samples {
        cfg.sample.samples = u;
    }
    let mut sampler = cfg.sample.clone();
    sampler.seed = seed.unwrap_or(cfg.seed);
    sampler.prior_max = cfg
        .prior_max
        .ok_or_else(|| CliError::Usage("checkpoint has no sample.prior_max".into()))?;

    let test_path = resolve(data, "test", cfg.data.test.as_ref())
        .ok_or_else(|| CliError::Usage("no test data: pass --data or set data.test".into()))?;
    let test_set = read_dataset(&test_path)?;
    let num_types = ckpt.model.config().num_types;
    if test_set.num_types > num_types {
        return Err(CliError::Usage(format!(
            "test data declares {} types but the checkpoint was trained with {num_types}",
            test_set.num_types
        )));
    }
    let (records, diag) =
        sampling::sample_dataset(&ckpt.model, &ckpt.normalizer, &test_set, &sampler).map_err(core)?;
    write(out, &sampling::records_to_jsonl(&records))?;
    eprintln!(
        "sampled events={} samples={} clamped={} algorithm={}",
        diag.events, diag.samples, diag.clamped, sampler.algorithm
    );
    Ok(())
}

pub fn oracle(params: &Path, data: &Path, num_samples: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if num_samples == 0 {
        return Err(CliError::Usage("--num-samples must be positive".into()));
    }
    let params = read_hawkes(params)?;
    let path = resolve(Some(data), "test", None).expect("data path given");
    let dataset = read_dataset(&path)?;
    let records = sampling::hawkes_oracle_records(&params, &dataset, num_samples, seed).map_err(core)?;
    write(out, &sampling::records_to_jsonl(&records))?;
    Ok(())
}

pub fn evaluate(samples: &Path, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let records = sampling::parse_records(&read(samples)?)
        .map_err(|e: SampleError| CliError::Usage(format!("{}: {e}", samples.display())))?;
    if records.is_empty() {
        return Err(CliError::Usage(format!("{}: no sample records", samples.display())));
    }
    let gaps: Vec<f64> = records.iter().map(|r| r.time).collect();
    let types: Vec<usize> = records.iter().map(|r| r.event_type).collect();
    let packs: Vec<SamplePack> = records.iter().map(|r| r.pack()).collect();
    let report = metrics::evaluate(&gaps, &types, &packs, &cfg.eval).map_err(core)?;
    let json = report.to_json();
    write(out, &json)?;
    write(&out.with_extension("csv"), &report.curves_csv())?;
    say!("{}", json.trim_end());
    Ok(())
}
