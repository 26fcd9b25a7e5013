//! Run configuration: defaults, flat `key=value` config files with `#`
//! comments, flag overrides, validation at load, and a canonical echo
//! that reproduces the effective configuration byte for byte.

use pga_core::error::Error;
use pga_core::eval::Metric;
use pga_core::model::loss::LossConfig;
use pga_core::model::data::SynthConfig;
use pga_core::model::train::TrainConfig;
use pga_core::model::{GraphKind, ModelConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Everything a command can be told, in one flat bag. Grid `h`/`w`/`c`
/// describe the synthetic input maps (and thus the pixel graph); `mode`
/// picks the graph kind; `channels`/`cprime` size the model; the rest
/// are loss, optimizer, data, and harness knobs.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub mode: GraphKind,
    pub depth: usize,
    pub channels: usize,
    pub cprime: usize,
    pub identities: usize,
    pub per_identity: usize,
    pub noise: f64,
    pub occlusion_prob: f64,
    pub shift_max: usize,
    pub beta: f64,
    pub margin: f64,
    pub smoothing: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    /// Stop training once this train accuracy is reached; 0 disables.
    pub early_stop_acc: f64,
    pub metric: Metric,
    pub sweep_seeds: usize,
    pub literal_softmax: bool,
    pub value_projection: bool,
    pub self_loops: bool,
    /// Accepted for forward compatibility; every command currently runs
    /// single-threaded so results are reproducible.
    pub threads: usize,
    pub bench_repeats: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            h: 16,
            w: 8,
            c: 3,
            mode: GraphKind::Grid(pga_core::graph::NeighborMode::Four),
            depth: 2,
            channels: 16,
            cprime: 8,
            identities: 8,
            per_identity: 20,
            noise: 0.25,
            occlusion_prob: 0.3,
            shift_max: 2,
            beta: 5e-4,
            margin: 0.3,
            smoothing: 0.1,
            lr: 1e-2,
            weight_decay: 5e-4,
            warmup_iters: 500,
            seed: 42,
            epochs: 200,
            batch_p: 4,
            batch_k: 4,
            early_stop_acc: 0.0,
            metric: Metric::Euclidean,
            sweep_seeds: 3,
            literal_softmax: false,
            value_projection: false,
            self_loops: false,
            threads: 1,
            bench_repeats: 10,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T, Error> {
    value.parse().map_err(|_| {
        Error::Config(format!("key `{key}`: cannot parse `{value}` as {expected}"))
    })
}

impl RunConfig {
    /// Applies one `key=value` pair. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        match key {
            "h" => self.h = parse(key, value, "a positive integer")?,
            "w" => self.w = parse(key, value, "a positive integer")?,
            "c" => self.c = parse(key, value, "a positive integer")?,
            "mode" => self.mode = GraphKind::from_str(value)?,
            "depth" => self.depth = parse(key, value, "an integer")?,
            "channels" => self.channels = parse(key, value, "a positive integer")?,
            "cprime" => self.cprime = parse(key, value, "a positive integer")?,
            "identities" => self.identities = parse(key, value, "an integer >= 2")?,
            "per_identity" => self.per_identity = parse(key, value, "an integer >= 4")?,
            "noise" => self.noise = parse(key, value, "a number")?,
            "occlusion_prob" => self.occlusion_prob = parse(key, value, "a number")?,
            "shift_max" => self.shift_max = parse(key, value, "an integer")?,
            "beta" => self.beta = parse(key, value, "a number")?,
            "margin" => self.margin = parse(key, value, "a number")?,
            "smoothing" => self.smoothing = parse(key, value, "a number")?,
            "lr" => self.lr = parse(key, value, "a number")?,
            "weight_decay" => self.weight_decay = parse(key, value, "a number")?,
            "warmup_iters" => self.warmup_iters = parse(key, value, "an integer")?,
            "seed" => self.seed = parse(key, value, "an unsigned integer")?,
            "epochs" => self.epochs = parse(key, value, "an integer")?,
            "batch_p" => self.batch_p = parse(key, value, "an integer >= 2")?,
            "batch_k" => self.batch_k = parse(key, value, "an integer >= 2")?,
            "early_stop_acc" => self.early_stop_acc = parse(key, value, "a number in [0, 1]")?,
            "metric" => self.metric = Metric::from_str(value)?,
            "sweep_seeds" => self.sweep_seeds = parse(key, value, "a positive integer")?,
            "literal_softmax" => self.literal_softmax = parse(key, value, "true or false")?,
            "value_projection" => self.value_projection = parse(key, value, "true or false")?,
            "self_loops" => self.self_loops = parse(key, value, "true or false")?,
            "threads" => self.threads = parse(key, value, "a positive integer")?,
            "bench_repeats" => self.bench_repeats = parse(key, value, "an integer >= 3")?,
            "out" => self.out = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!("unknown configuration key `{other}`")))
            }
        }
        Ok(())
    }

    /// Loads a flat key=value file over the current values. Blank lines
    /// and `#` comment lines are ignored; later keys override earlier
    /// ones.
    pub fn load_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key=value`, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Checks every cross-field constraint by building the downstream
    /// configurations the commands will run with, plus the handful of
    /// harness-only bounds.
    pub fn validate(&self) -> Result<(), Error> {
        self.model_config().validate()?;
        self.synth_config().validate()?;
        self.loss_config().validate()?;
        self.train_config().validate()?;
        if !(0.0..=1.0).contains(&self.early_stop_acc) {
            return Err(Error::Config(format!(
                "early_stop_acc {} must lie in [0, 1] (0 disables)",
                self.early_stop_acc
            )));
        }
        if self.sweep_seeds == 0 {
            return Err(Error::Config("sweep_seeds must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.bench_repeats < 3 {
            return Err(Error::Config(format!(
                "bench_repeats must be at least 3, got {}",
                self.bench_repeats
            )));
        }
        Ok(())
    }

    /// The effective configuration in canonical key order, parseable by
    /// [`RunConfig::load_file`] and stable byte for byte.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "h={}", self.h);
        let _ = writeln!(s, "w={}", self.w);
        let _ = writeln!(s, "c={}", self.c);
        let _ = writeln!(s, "mode={}", self.mode);
        let _ = writeln!(s, "depth={}", self.depth);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "cprime={}", self.cprime);
        let _ = writeln!(s, "identities={}", self.identities);
        let _ = writeln!(s, "per_identity={}", self.per_identity);
        let _ = writeln!(s, "noise={}", self.noise);
        let _ = writeln!(s, "occlusion_prob={}", self.occlusion_prob);
        let _ = writeln!(s, "shift_max={}", self.shift_max);
        let _ = writeln!(s, "beta={}", self.beta);
        let _ = writeln!(s, "margin={}", self.margin);
        let _ = writeln!(s, "smoothing={}", self.smoothing);
        let _ = writeln!(s, "lr={}", self.lr);
        let _ = writeln!(s, "weight_decay={}", self.weight_decay);
        let _ = writeln!(s, "warmup_iters={}", self.warmup_iters);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_p={}", self.batch_p);
        let _ = writeln!(s, "batch_k={}", self.batch_k);
        let _ = writeln!(s, "early_stop_acc={}", self.early_stop_acc);
        let _ = writeln!(s, "metric={}", self.metric);
        let _ = writeln!(s, "sweep_seeds={}", self.sweep_seeds);
        let _ = writeln!(s, "literal_softmax={}", self.literal_softmax);
        let _ = writeln!(s, "value_projection={}", self.value_projection);
        let _ = writeln!(s, "self_loops={}", self.self_loops);
        let _ = writeln!(s, "threads={}", self.threads);
        let _ = writeln!(s, "bench_repeats={}", self.bench_repeats);
        let _ = writeln!(s, "out={}", self.out.display());
        s
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            classes: self.identities,
            per_identity: self.per_identity,
            channels: self.c,
            h: self.h,
            w: self.w,
            noise: self.noise,
            occlusion_prob: self.occlusion_prob,
            shift_max: self.shift_max,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_channels: self.c,
            channels: self.channels,
            cprime: self.cprime,
            h: self.h,
            w: self.w,
            classes: self.identities,
            depth: self.depth,
            graph: self.mode,
            literal_softmax: self.literal_softmax,
            value_projection: self.value_projection,
            self_loops: self.self_loops,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { beta: self.beta, margin: self.margin, smoothing: self.smoothing }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_p: self.batch_p,
            batch_k: self.batch_k,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_iters: self.warmup_iters,
            loss: self.loss_config(),
            seed: self.seed,
            early_stop_acc: if self.early_stop_acc > 0.0 {
                Some(self.early_stop_acc)
            } else {
                None
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_echo_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let echo = cfg.echo();
        let mut reloaded = RunConfig::default();
        for line in echo.lines() {
            let (k, v) = line.split_once('=').unwrap();
            reloaded.set(k, v).unwrap();
        }
        assert_eq!(echo, reloaded.echo());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("learning_rate", "0.1").unwrap_err();
        assert!(err.to_string().contains("unknown configuration key"));
    }

    #[test]
    fn bad_value_names_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("depth", "three").unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
    }

    #[test]
    fn file_loading_handles_comments_and_overrides() {
        let dir = std::env::temp_dir().join(format!("pga-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(&path, "# comment\n\nseed = 7\ndepth=1\nseed=9\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.load_file(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.depth, 1);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn malformed_line_is_a_config_error() {
        let dir = std::env::temp_dir().join(format!("pga-cfg-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.cfg");
        std::fs::write(&path, "seed 9\n").unwrap();
        let mut cfg = RunConfig::default();
        assert!(cfg.load_file(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
