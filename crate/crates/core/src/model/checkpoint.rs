//! Versioned plain-text checkpoints.
//!
//! The format is line-oriented and self-describing:
//!
//! ```text
//! pga-checkpoint v1
//! config key=value key=value ...
//! param <name> <ndims> <d0> <d1> ...
//! <numel space-separated f64 values>
//! bn <name> <channels> <initialized 0|1>
//! <running means>
//! <running variances>
//! end
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save → load → save cycle is byte-identical and the reloaded model is
//! bit-exact.

use super::{GraphKind, ModelConfig, ToyModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use std::str::FromStr;

const HEADER: &str = "pga-checkpoint v1";

/// Serializes the model — config, every parameter, every running
/// statistic — to the text format.
pub fn save_model(model: &mut ToyModel) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    let cfg = model.cfg().clone();
    let _ = writeln!(
        out,
        "config input_channels={} channels={} cprime={} h={} w={} classes={} depth={} \
         graph={} literal_softmax={} value_projection={} self_loops={}",
        cfg.input_channels,
        cfg.channels,
        cfg.cprime,
        cfg.h,
        cfg.w,
        cfg.classes,
        cfg.depth,
        cfg.graph,
        cfg.literal_softmax,
        cfg.value_projection,
        cfg.self_loops,
    );
    for id in model.params().ids().collect::<Vec<_>>() {
        let p = model.params().get(id);
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "param {} {} {}", p.name, p.value.shape().len(), dims.join(" "));
        out.push_str(&join_floats(p.value.data()));
        out.push('\n');
    }
    for bn in model.bn_states_mut() {
        let _ = writeln!(
            out,
            "bn {} {} {}",
            bn.name(),
            bn.channels(),
            if bn.initialized() { 1 } else { 0 }
        );
        out.push_str(&join_floats(bn.running_mean()));
        out.push('\n');
        out.push_str(&join_floats(bn.running_var()));
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

/// Rebuilds a model from checkpoint text. The architecture is
/// reconstructed from the config line; every stored parameter and
/// normalization state must match it exactly.
pub fn load_model(text: &str) -> Result<ToyModel> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
    if header.trim_end() != HEADER {
        return Err(Error::Checkpoint(format!(
            "bad header `{header}` (expected `{HEADER}`)"
        )));
    }
    let (_, config_line) = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("missing config line".into()))?;
    let cfg = parse_config_line(config_line)?;
    // Seed is irrelevant: every parameter gets overwritten below.
    let mut model = ToyModel::new(cfg, 0)?;

    let mut saw_end = false;
    let mut params_seen = 0usize;
    let mut bns_seen = 0usize;
    while let Some((lineno, line)) = lines.next() {
        let line = line.trim_end();
        if line == "end" {
            saw_end = true;
            break;
        }
        let mut fields = line.split_whitespace();
        match fields.next() {
            Some("param") => {
                let name = fields
                    .next()
                    .ok_or_else(|| bad_line(lineno, "param without a name"))?;
                let ndims: usize = parse_field(fields.next(), lineno, "param rank")?;
                let mut shape = Vec::with_capacity(ndims);
                for _ in 0..ndims {
                    shape.push(parse_field(fields.next(), lineno, "param dimension")?);
                }
                let (_, data_line) = lines
                    .next()
                    .ok_or_else(|| bad_line(lineno, "param missing its value line"))?;
                let data = parse_floats(data_line, lineno)?;
                let tensor = Tensor::new(&shape, data).map_err(|e| {
                    Error::Checkpoint(format!("param `{name}` line {}: {e}", lineno + 1))
                })?;
                let id = model.params().find(name).ok_or_else(|| {
                    Error::Checkpoint(format!(
                        "checkpoint parameter `{name}` does not exist in this architecture"
                    ))
                })?;
                if model.params().value(id).shape() != tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                        tensor.shape(),
                        model.params().value(id).shape()
                    )));
                }
                *model.params_mut().value_mut(id) = tensor;
                params_seen += 1;
            }
            Some("bn") => {
                let name = fields
                    .next()
                    .ok_or_else(|| bad_line(lineno, "bn without a name"))?
                    .to_string();
                let channels: usize = parse_field(fields.next(), lineno, "bn channels")?;
                let initialized: usize = parse_field(fields.next(), lineno, "bn flag")?;
                let (_, mean_line) = lines
                    .next()
                    .ok_or_else(|| bad_line(lineno, "bn missing its mean line"))?;
                let (_, var_line) = lines
                    .next()
                    .ok_or_else(|| bad_line(lineno, "bn missing its variance line"))?;
                let mean = parse_floats(mean_line, lineno)?;
                let var = parse_floats(var_line, lineno)?;
                let state = model
                    .bn_states_mut()
                    .into_iter()
                    .find(|s| s.name() == name)
                    .ok_or_else(|| {
                        Error::Checkpoint(format!(
                            "checkpoint normalization `{name}` does not exist in this architecture"
                        ))
                    })?;
                if state.channels() != channels {
                    return Err(Error::Checkpoint(format!(
                        "normalization `{name}` has {channels} channels in the checkpoint but {} in the model",
                        state.channels()
                    )));
                }
                if initialized == 1 {
                    state.seed_running(&mean, &var).map_err(|e| {
                        Error::Checkpoint(format!("normalization `{name}`: {e}"))
                    })?;
                }
                bns_seen += 1;
            }
            Some(other) => {
                return Err(bad_line(lineno, &format!("unknown record `{other}`")));
            }
            None => {} // blank line tolerated
        }
    }
    if !saw_end {
        return Err(Error::Checkpoint("truncated checkpoint: no `end` record".into()));
    }
    let expected_params = model.params().len();
    if params_seen != expected_params {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {params_seen} parameters, architecture needs {expected_params}"
        )));
    }
    let expected_bns = model.bn_states_mut().len();
    if bns_seen != expected_bns {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {bns_seen} normalization states, architecture needs {expected_bns}"
        )));
    }
    Ok(model)
}

fn join_floats(vals: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v}");
    }
    s
}

fn parse_floats(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| bad_line(lineno + 1, &format!("bad float `{tok}`")))
        })
        .collect()
}

fn parse_field<T: FromStr>(field: Option<&str>, lineno: usize, what: &str) -> Result<T> {
    field
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| bad_line(lineno, &format!("missing or invalid {what}")))
}

fn bad_line(lineno: usize, msg: &str) -> Error {
    Error::Checkpoint(format!("line {}: {msg}", lineno + 1))
}

fn parse_config_line(line: &str) -> Result<ModelConfig> {
    let mut fields = line.split_whitespace();
    if fields.next() != Some("config") {
        return Err(Error::Checkpoint(format!("expected a config line, got `{line}`")));
    }
    let mut cfg = ModelConfig {
        input_channels: 0,
        channels: 0,
        cprime: 0,
        h: 0,
        w: 0,
        classes: 0,
        depth: 0,
        graph: GraphKind::FullyConnected,
        literal_softmax: false,
        value_projection: false,
        self_loops: false,
    };
    let mut seen = 0usize;
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config field `{field}`")))?;
        let usize_of = || -> Result<usize> {
            value
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`: `{value}`")))
        };
        match key {
            "input_channels" => cfg.input_channels = usize_of()?,
            "channels" => cfg.channels = usize_of()?,
            "cprime" => cfg.cprime = usize_of()?,
            "h" => cfg.h = usize_of()?,
            "w" => cfg.w = usize_of()?,
            "classes" => cfg.classes = usize_of()?,
            "depth" => cfg.depth = usize_of()?,
            "graph" => cfg.graph = GraphKind::from_str(value)?,
            "literal_softmax" | "value_projection" | "self_loops" => {
                let b = value.parse::<bool>().map_err(|_| {
                    Error::Checkpoint(format!("bad value for `{key}`: `{value}`"))
                })?;
                match key {
                    "literal_softmax" => cfg.literal_softmax = b,
                    "value_projection" => cfg.value_projection = b,
                    _ => cfg.self_loops = b,
                }
            }
            other => {
                return Err(Error::Checkpoint(format!("unknown config key `{other}`")));
            }
        }
        seen += 1;
    }
    if seen != 11 {
        return Err(Error::Checkpoint(format!(
            "config line has {seen} fields, expected 11"
        )));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NeighborMode;
    use crate::model::data::{Dataset, SynthConfig};
    use crate::model::train::{train, TrainConfig};
    use crate::model::loss::LossConfig;
    use crate::tensor::{Mode, Tape};

    fn trained_model() -> ToyModel {
        let mcfg = ModelConfig {
            input_channels: 2,
            channels: 4,
            cprime: 2,
            h: 4,
            w: 3,
            classes: 2,
            depth: 1,
            graph: GraphKind::Grid(NeighborMode::Four),
            literal_softmax: false,
            value_projection: false,
            self_loops: false,
        };
        let dcfg = SynthConfig {
            classes: 2,
            per_identity: 6,
            channels: 2,
            h: 4,
            w: 3,
            noise: 0.05,
            occlusion_prob: 0.0,
            shift_max: 1,
        };
        let mut model = ToyModel::new(mcfg, 3).unwrap();
        let data = Dataset::generate(&dcfg, 4).unwrap();
        let tcfg = TrainConfig {
            epochs: 2,
            batch_p: 2,
            batch_k: 2,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup_iters: 3,
            loss: LossConfig::default(),
            seed: 5,
            early_stop_acc: None,
        };
        train(&mut model, &data, &tcfg).unwrap();
        model
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut model = trained_model();
        let text = save_model(&mut model);
        let mut reloaded = load_model(&text).unwrap();
        let text2 = save_model(&mut reloaded);
        assert_eq!(text, text2);
    }

    #[test]
    fn reloaded_model_forwards_bit_exactly() {
        let mut model = trained_model();
        let text = save_model(&mut model);
        let mut reloaded = load_model(&text).unwrap();
        let x = Tensor::from_fn(&[2, 4, 3], |i| (i as f64 * 0.21).sin());
        let mut t1 = Tape::new();
        let f1 = model.forward_single(&mut t1, &x, Mode::Evaluation).unwrap();
        let mut t2 = Tape::new();
        let f2 = reloaded.forward_single(&mut t2, &x, Mode::Evaluation).unwrap();
        assert_eq!(t1.value(f1.logits).data(), t2.value(f2.logits).data());
        assert_eq!(t1.value(f1.embedding).data(), t2.value(f2.embedding).data());
    }

    #[test]
    fn header_and_structure_are_enforced() {
        let mut model = trained_model();
        let text = save_model(&mut model);
        assert!(text.starts_with("pga-checkpoint v1\nconfig "));
        assert!(text.trim_end().ends_with("end"));

        assert!(load_model("garbage v9\n").is_err());
        // Truncation: drop the final `end`.
        let truncated = text.trim_end().trim_end_matches("end");
        assert!(load_model(truncated).is_err());
        // A tampered parameter name is rejected.
        let tampered = text.replace("param stem.weight", "param stem.weights");
        assert!(load_model(&tampered).is_err());
    }
}
