//! The five commands: generation benchmark, verification suites, toy
//! training, ablation sweeps, and attention dumps. Each writes its
//! artifacts into an already-created run directory whose effective
//! config has been echoed by the caller.

use crate::config::RunConfig;
use crate::AppError;
use pga_core::eval::{evaluate, RankingResult};
use pga_core::graph::{bench_csv, bench_generation, BenchRow, GridSpec, NeighborMode};
use pga_core::model::checkpoint::{load_model, save_model};
use pga_core::model::data::Dataset;
use pga_core::model::train::{train, EpochLog};
use pga_core::model::{extract_embeddings, GraphKind, ToyModel};
use pga_core::tensor::{Mode, Tape};
use pga_core::verify::{run_verification, VerifyOptions};
use std::fmt::Write as _;
use std::path::Path;

fn write_artifact(run_dir: &Path, name: &str, content: &str) -> Result<(), AppError> {
    let path = run_dir.join(name);
    std::fs::write(&path, content)
        .map_err(|e| AppError::runtime(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

// ── bench-graphgen ──────────────────────────────────────────────────────

/// Size ladder of the generation benchmark: spatial sizes double per
/// step and the channel count is tied to the pixel count, so every mode
/// sees the same node-count ladder (128, 512, 2048, 8192). The smallest
/// entry is the 16×8 feature-map size the attention layer is sized for.
fn bench_ladder() -> Vec<GridSpec> {
    [(16usize, 8usize), (32, 16), (64, 32), (128, 64)]
        .into_iter()
        .map(|(h, w)| GridSpec::new(h, w, h * w).expect("ladder specs are valid"))
        .collect()
}

pub fn cmd_bench_graphgen(cfg: &RunConfig, run_dir: &Path) -> Result<(), AppError> {
    let ladder = bench_ladder();
    let mut rows: Vec<BenchRow> = Vec::new();
    for mode in [NeighborMode::Four, NeighborMode::Eight, NeighborMode::TwoChannel] {
        rows.extend(bench_generation(&ladder, mode, cfg.bench_repeats)?);
    }
    println!(
        "{:>6}  {:>12}  {:>14}  {:>14}  {:>10}",
        "n", "mode", "fast_seconds", "oracle_seconds", "ratio"
    );
    for r in &rows {
        println!(
            "{:>6}  {:>12}  {:>14.6}  {:>14.6}  {:>10.1}",
            r.n,
            r.mode.to_string(),
            r.fast_seconds,
            r.oracle_seconds,
            r.ratio
        );
    }
    write_artifact(run_dir, "bench_graphgen.csv", &bench_csv(&rows))
}

// ── verify ──────────────────────────────────────────────────────────────

pub fn cmd_verify(cfg: &RunConfig, run_dir: &Path, inject_fault: bool) -> Result<(), AppError> {
    let report = run_verification(&VerifyOptions { seed: cfg.seed, inject_graph_fault: inject_fault });
    let rendered = report.render();
    print!("{rendered}");
    write_artifact(run_dir, "verify_report.txt", &rendered)?;
    if report.passed() {
        Ok(())
    } else {
        Err(AppError::runtime("verification failed"))
    }
}

// ── train ───────────────────────────────────────────────────────────────

fn training_log_csv(logs: &[EpochLog], depth: usize) -> String {
    let mut s = String::from("epoch,loss,id_loss,triplet_loss,center_loss,train_acc");
    for l in 0..depth {
        let _ = write!(s, ",alpha_{l}");
    }
    s.push('\n');
    for log in logs {
        let _ = write!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            log.epoch, log.loss, log.id_loss, log.triplet_loss, log.center_loss, log.train_acc
        );
        for a in &log.alphas {
            let _ = write!(s, ",{a:.6}");
        }
        s.push('\n');
    }
    s
}

fn retrieval_results(
    model: &mut ToyModel,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<RankingResult, AppError> {
    let queries = extract_embeddings(model, &data.query())?;
    let gallery = extract_embeddings(model, &data.gallery())?;
    Ok(evaluate(&queries, &gallery, cfg.metric)?)
}

pub fn cmd_train(cfg: &RunConfig, run_dir: &Path) -> Result<(), AppError> {
    let data = Dataset::generate(&cfg.synth_config(), cfg.seed)?;
    let mut model = ToyModel::new(cfg.model_config(), cfg.seed)?;
    let logs = train(&mut model, &data, &cfg.train_config())?;

    let stride = if cfg.epochs <= 20 { 1 } else { cfg.epochs / 20 };
    for log in &logs {
        if log.epoch == 1 || log.epoch == logs.len() || log.epoch % stride == 0 {
            println!(
                "epoch {:>4}  loss {:>9.4}  id {:>8.4}  triplet {:>7.4}  center {:>8.4}  acc {:.3}",
                log.epoch, log.loss, log.id_loss, log.triplet_loss, log.center_loss, log.train_acc
            );
        }
    }
    write_artifact(run_dir, "training_log.csv", &training_log_csv(&logs, cfg.depth))?;
    write_artifact(run_dir, "checkpoint.txt", &save_model(&mut model))?;

    if logs.is_empty() {
        println!("no epochs trained; skipping retrieval evaluation (untrained normalization stats)");
        return Ok(());
    }
    let result = retrieval_results(&mut model, &data, cfg)?;
    println!(
        "retrieval: mAP {:.4}  rank-1 {:.4}  ({} of {} queries skipped)",
        result.map,
        result.cmc_at(1),
        result.skipped,
        data.query().len()
    );
    write_artifact(run_dir, "results.csv", &result.results_csv())
}

// ── sweep ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    /// Attention stack depth 0, 1, 2, 3 at the configured graph kind.
    Layers,
    /// Graph kinds four, eight, two-channel, fully-connected at the
    /// configured depth.
    Neighbors,
}

fn sweep_settings(cfg: &RunConfig, axis: SweepAxis) -> Vec<(String, pga_core::model::ModelConfig)> {
    match axis {
        SweepAxis::Layers => (0..=3)
            .map(|depth| {
                let mut m = cfg.model_config();
                m.depth = depth;
                (format!("depth-{depth}"), m)
            })
            .collect(),
        SweepAxis::Neighbors => [
            GraphKind::Grid(NeighborMode::Four),
            GraphKind::Grid(NeighborMode::Eight),
            GraphKind::Grid(NeighborMode::TwoChannel),
            GraphKind::FullyConnected,
        ]
        .into_iter()
        .map(|graph| {
            let mut m = cfg.model_config();
            m.graph = graph;
            (graph.to_string(), m)
        })
        .collect(),
    }
}

pub fn cmd_sweep(cfg: &RunConfig, run_dir: &Path, axis: SweepAxis) -> Result<(), AppError> {
    let settings = sweep_settings(cfg, axis);
    let mut csv = String::from("setting,seed,map,rank1\n");
    let mut means: Vec<(String, f64, f64)> = Vec::new();
    for (label, model_cfg) in &settings {
        let mut map_sum = 0.0;
        let mut rank1_sum = 0.0;
        for i in 0..cfg.sweep_seeds {
            let seed = cfg.seed.wrapping_add(i as u64);
            // The dataset depends only on the seed, so every setting
            // faces identical data at identical seeds.
            let data = Dataset::generate(&cfg.synth_config(), seed)?;
            let mut model = ToyModel::new(model_cfg.clone(), seed)?;
            let mut train_cfg = cfg.train_config();
            train_cfg.seed = seed;
            let logs = train(&mut model, &data, &train_cfg)?;
            if logs.is_empty() {
                return Err(AppError::config(
                    "sweep needs epochs >= 1 to have something to evaluate".into(),
                ));
            }
            let result = retrieval_results(&mut model, &data, cfg)?;
            let rank1 = result.cmc_at(1);
            println!(
                "setting {label:>16}  seed {seed:>4}  mAP {:.4}  rank-1 {rank1:.4}",
                result.map
            );
            let _ = writeln!(csv, "{label},{seed},{:.6},{rank1:.6}", result.map);
            map_sum += result.map;
            rank1_sum += rank1;
        }
        let n = cfg.sweep_seeds as f64;
        means.push((label.clone(), map_sum / n, rank1_sum / n));
    }
    println!("means over {} seed(s):", cfg.sweep_seeds);
    for (label, map, rank1) in &means {
        println!("  {label:>16}  mAP {map:.4}  rank-1 {rank1:.4}");
    }
    write_artifact(run_dir, "sweep.csv", &csv)
}

// ── dump-attention ──────────────────────────────────────────────────────

pub fn cmd_dump_attention(
    cfg: &RunConfig,
    run_dir: &Path,
    checkpoint: &Path,
    sample: usize,
) -> Result<(), AppError> {
    let text = std::fs::read_to_string(checkpoint).map_err(|e| {
        AppError::config(format!("cannot read checkpoint {}: {e}", checkpoint.display()))
    })?;
    let mut model = load_model(&text)?;
    // The checkpoint fixes the architecture; the config supplies the
    // dataset the sample index refers to.
    let data = Dataset::generate(&cfg.synth_config(), cfg.seed)?;
    let n_samples = data.samples().len();
    let s = data.samples().get(sample).ok_or_else(|| {
        AppError::config(format!(
            "sample index {sample} out of range (dataset has {n_samples} samples)"
        ))
    })?;

    let mut tape = Tape::new();
    let fwd = model.forward_single(&mut tape, &s.features, Mode::Evaluation)?;
    if fwd.attentions.is_empty() {
        println!("model has no attention layers (depth 0); nothing to dump");
        return Ok(());
    }
    for (l, &att) in fwd.attentions.iter().enumerate() {
        let t = tape.value(att);
        let n = t.shape()[0];
        let d = t.data();
        let mut csv = String::from("row,col,weight\n");
        let mut nonzero = 0usize;
        for i in 0..n {
            for j in 0..n {
                let w = d[i * n + j];
                if w != 0.0 {
                    let _ = writeln!(csv, "{i},{j},{w:.6}");
                    nonzero += 1;
                }
            }
        }
        println!("layer {l}: {nonzero} nonzero attention entries over {n} nodes");
        write_artifact(run_dir, &format!("attention_layer_{l}.csv"), &csv)?;
    }
    Ok(())
}
