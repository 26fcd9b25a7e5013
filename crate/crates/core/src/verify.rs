//! Built-in verification suites: structural graph checks against the
//! exhaustive oracle, attention-matrix invariants on random instances,
//! and the finite-difference gradient battery covering every operation,
//! whole attention layers, deep stacks, and the full training objective.
//!
//! The same battery backs both the `verify` command and the acceptance
//! tests, so a regression anywhere in the backward pass fails loudly in
//! both places.

use crate::error::Result;
use crate::graph::{
    generate_grid_graph, oracle_adjacency, Adjacency, EdgeList, GridSpec, NeighborMode,
};
use crate::model::loss::{total_loss, LossConfig};
use crate::model::{GraphKind, ModelConfig, ToyModel};
use crate::pga::{NodeLayout, PGALayer, PGAStack, PgaOptions};
use crate::tensor::{
    finite_diff_check, BatchNormState, Mode, ParamSet, Tape, Tensor, ValueId,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::sync::Arc;

/// Settings of a verification run.
#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    /// Seed of the randomized instances and of the gradient battery.
    pub seed: u64,
    /// Deliberately corrupt one graph comparison to prove failures are
    /// detected and reported, not silently swallowed.
    pub inject_graph_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, inject_graph_fault: false }
    }
}

/// Outcome of one named suite.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// All suite outcomes of one run.
#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    /// Human-readable multi-line report.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for suite in &self.suites {
            let verdict = if suite.passed() { "ok" } else { "FAILED" };
            let _ = writeln!(out, "suite {}: {} checks ... {verdict}", suite.name, suite.checks);
            for failure in &suite.failures {
                let _ = writeln!(out, "  failure: {failure}");
            }
        }
        let _ = writeln!(
            out,
            "verification {}",
            if self.passed() { "PASSED" } else { "FAILED" }
        );
        out
    }
}

/// Runs every suite and collects the report.
pub fn run_verification(options: &VerifyOptions) -> VerifyReport {
    VerifyReport {
        suites: vec![
            graph_oracle_suite(options),
            attention_invariant_suite(options.seed),
            gradient_check_report(&[options.seed, options.seed.wrapping_add(1)]),
        ],
    }
}

// ── Suite 1: generated graphs vs the exhaustive oracle ──────────────────

fn graph_oracle_suite(options: &VerifyOptions) -> SuiteResult {
    let mut checks = 0;
    let mut failures = Vec::new();
    let mut compare = |spec: GridSpec, mode: NeighborMode, corrupt: bool| {
        checks += 1;
        let label = format!("{}x{}x{} {mode}", spec.h, spec.w, spec.c);
        match (generate_grid_graph(spec, mode), oracle_adjacency(spec, mode)) {
            (Ok(fast), Ok(oracle)) => {
                // The injected fault swaps in the wrong oracle so the
                // comparison must trip.
                let reference = if corrupt {
                    oracle_adjacency(spec, NeighborMode::Eight).expect("oracle")
                } else {
                    oracle
                };
                if fast != reference {
                    failures.push(format!(
                        "grid {label}: generated adjacency differs from the exhaustive oracle"
                    ));
                }
            }
            (Err(e), _) | (_, Err(e)) => {
                failures.push(format!("grid {label}: construction failed: {e}"));
            }
        }
    };
    for h in 1..=8 {
        for w in 1..=8 {
            let spec = GridSpec::new(h, w, 3).expect("valid spec");
            let corrupt = options.inject_graph_fault && (h, w) == (4, 4);
            compare(spec, NeighborMode::Four, corrupt);
            compare(spec, NeighborMode::Eight, false);
        }
    }
    for c in 1..=16 {
        let spec = GridSpec::new(4, 4, c).expect("valid spec");
        compare(spec, NeighborMode::TwoChannel, false);
    }
    SuiteResult { name: "graph-oracle-equivalence".into(), checks, failures }
}

// ── Suite 2: attention invariants on random graphs ──────────────────────

fn attention_invariant_suite(seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = 0;
    let mut failures = Vec::new();
    for instance in 0..100 {
        let n = rng.gen_range(2..=20);
        let edge_prob: f64 = rng.gen_range(0.0..0.6);
        let mut edges = EdgeList::new();
        for i in 0..n {
            for j in 0..i {
                if rng.gen::<f64>() < edge_prob {
                    edges.push(i, j);
                }
            }
        }
        let adj = Arc::new(Adjacency::from_pairs(&edges, n).expect("valid edges"));
        let mut tape = Tape::new();
        let scores = tape.leaf(Tensor::from_fn(&[n, n], |_| rng.gen_range(-4.0..4.0)));
        let att = match tape.masked_row_softmax(scores, &adj) {
            Ok(a) => a,
            Err(e) => {
                failures.push(format!("instance {instance}: softmax failed: {e}"));
                continue;
            }
        };
        let a = tape.value(att).data();
        checks += 1;
        for i in 0..n {
            let support = adj.neighbors(i);
            let row = &a[i * n..(i + 1) * n];
            if support.is_empty() {
                if row.iter().any(|&v| v != 0.0) {
                    failures.push(format!(
                        "instance {instance}: isolated row {i} is not exactly zero"
                    ));
                }
                continue;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                failures.push(format!(
                    "instance {instance}: row {i} sums to {sum} (off by {:+e})",
                    sum - 1.0
                ));
            }
            for j in 0..n {
                if !adj.contains(i, j) && row[j] != 0.0 {
                    failures.push(format!(
                        "instance {instance}: off-support entry ({i},{j}) = {} is not exactly zero",
                        row[j]
                    ));
                }
            }
        }
    }
    SuiteResult { name: "attention-invariants".into(), checks, failures }
}

// ── Suite 3: the gradient battery ───────────────────────────────────────

/// Result of one gradient check, aggregated over the requested seeds.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// Worst relative error observed across seeds.
    pub max_rel_err: f64,
    /// Tolerance the check is held to.
    pub tol: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

const STEP: f64 = 1e-5;

/// Runs the whole analytic-vs-numeric battery once per seed and reports
/// the worst error per check. Covers every tape operation, a complete
/// attention layer, a depth-3 stack, and the full composite objective.
pub fn gradient_check_suite(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    type CheckFn = fn(u64) -> Result<f64>;
    let checks: &[(&'static str, f64, CheckFn)] = &[
        ("matmul", 1e-6, check_matmul),
        ("transpose-reshape", 1e-6, check_transpose_reshape),
        ("relu", 1e-6, check_relu),
        ("map-node-conversion", 1e-6, check_transf),
        ("conv1x1", 1e-5, check_conv1x1),
        ("row-softmax", 1e-5, check_row_softmax),
        ("masked-softmax", 1e-5, check_masked_softmax),
        ("literal-masked-softmax", 1e-5, check_literal_softmax),
        ("batchnorm-spatial-train", 1e-4, check_bn_spatial),
        ("batchnorm-rows-train", 1e-4, check_bn_rows),
        ("batchnorm-eval", 1e-6, check_bn_eval),
        ("scalar-mix", 1e-6, check_scalar_mix),
        ("pool-and-concat", 1e-6, check_pool_concat),
        ("map-stack-split", 1e-6, check_map_stack_split),
        ("row-block", 1e-6, check_row_block),
        ("id-loss", 1e-5, check_id_loss),
        ("triplet-loss", 1e-4, check_triplet_loss),
        ("center-loss", 1e-6, check_center_loss),
        ("pga-layer", 1e-4, check_pga_layer),
        ("pga-stack-depth3", 1e-4, check_pga_stack),
        ("total-objective", 1e-4, check_total_objective),
        ("inert-conv-bias", 1e-12, check_inert_conv_bias),
    ];
    let mut outcomes = Vec::with_capacity(checks.len());
    for &(name, tol, f) in checks {
        let mut worst = 0.0f64;
        for &seed in seeds {
            worst = worst.max(f(seed)?);
        }
        outcomes.push(CheckOutcome { name, max_rel_err: worst, tol });
    }
    Ok(outcomes)
}

fn gradient_check_report(seeds: &[u64]) -> SuiteResult {
    match gradient_check_suite(seeds) {
        Ok(outcomes) => {
            let checks = outcomes.len();
            let failures = outcomes
                .iter()
                .filter(|o| !o.passed())
                .map(|o| {
                    format!(
                        "{}: max relative error {:.3e} exceeds {:.0e}",
                        o.name, o.max_rel_err, o.tol
                    )
                })
                .collect();
            SuiteResult { name: "gradient-checks".into(), checks, failures }
        }
        Err(e) => SuiteResult {
            name: "gradient-checks".into(),
            checks: 0,
            failures: vec![format!("battery aborted: {e}")],
        },
    }
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt))
}

fn weighted_sum(tape: &mut Tape, x: ValueId, probe: ValueId) -> Result<ValueId> {
    let prod = tape.mul(x, probe)?;
    tape.sum(prod)
}

fn check_matmul(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 1);
    let mut params = ParamSet::new();
    let a = params.register("a", Tensor::randn(&[2, 3], &mut rng))?;
    let b = params.register("b", Tensor::randn(&[3, 4], &mut rng))?;
    let probe = Tensor::from_fn(&[2, 4], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let aid = tape.param(a, p);
        let bid = tape.param(b, p);
        let prod = tape.matmul(aid, bid)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, prod, pr)
    })
}

fn check_transpose_reshape(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 2);
    let mut params = ParamSet::new();
    let a = params.register("a", Tensor::randn(&[3, 5], &mut rng))?;
    let probe = Tensor::from_fn(&[5, 3], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let aid = tape.param(a, p);
        let t = tape.transpose(aid)?;
        let r = tape.reshape(t, &[15])?;
        let r2 = tape.reshape(r, &[5, 3])?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, r2, pr)
    })
}

fn check_relu(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 3);
    let mut params = ParamSet::new();
    // Keep every coordinate a safe distance from the kink at zero.
    let x = Tensor::from_fn(&[8], |_| {
        let v: f64 = rng.gen_range(-1.0..1.0);
        v.signum() * (v.abs() + 0.05)
    });
    let xid = params.register("x", x)?;
    let probe = Tensor::from_fn(&[8], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let id = tape.param(xid, p);
        let r = tape.relu(id)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, r, pr)
    })
}

fn check_transf(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 4);
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[3, 2, 4], &mut rng))?;
    let probe = Tensor::from_fn(&[3, 2, 4], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let id = tape.param(x, p);
        let nodes = tape.transf_to_nodes(id)?;
        let back = tape.transf_to_map(nodes, 2, 4)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, back, pr)
    })
}

fn check_conv1x1(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 5);
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[3, 2, 3], &mut rng))?;
    let w = params.register("w", Tensor::randn(&[2, 3], &mut rng))?;
    let b = params.register("b", Tensor::randn(&[2], &mut rng))?;
    let probe = Tensor::from_fn(&[2, 2, 3], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let xid = tape.param(x, p);
        let wid = tape.param(w, p);
        let bid = tape.param(b, p);
        let y = tape.conv1x1(xid, wid, bid)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, y, pr)
    })
}

fn check_row_softmax(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 6);
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[4, 5], &mut rng))?;
    let probe = Tensor::from_fn(&[4, 5], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let id = tape.param(x, p);
        let s = tape.row_softmax(id)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, s, pr)
    })
}

fn three_by_three_graph() -> Arc<Adjacency> {
    Arc::new(
        generate_grid_graph(GridSpec::new(3, 3, 1).expect("spec"), NeighborMode::Four)
            .expect("grid"),
    )
}

fn check_masked_softmax(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 7);
    let adj = three_by_three_graph();
    let n = adj.n();
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[n, n], &mut rng))?;
    let probe = Tensor::from_fn(&[n, n], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let id = tape.param(x, p);
        let s = tape.masked_row_softmax(id, &adj)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, s, pr)
    })
}

fn check_literal_softmax(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 8);
    let adj = three_by_three_graph();
    let n = adj.n();
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[n, n], &mut rng))?;
    let probe = Tensor::from_fn(&[n, n], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let id = tape.param(x, p);
        let zeroed = tape.mask_mul(id, &adj)?;
        let s = tape.row_softmax(zeroed)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, s, pr)
    })
}

fn check_bn_spatial(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 9);
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[2, 3, 2], &mut rng))?;
    let bn0 = BatchNormState::new(&mut params, "bn", 2)?;
    let probe = Tensor::from_fn(&[2, 3, 2], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let id = tape.param(x, p);
        let mut bn = bn0.clone(); // pristine running stats per evaluation
        let y = tape.batchnorm_spatial(id, &mut bn, p, Mode::Training)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, y, pr)
    })
}

fn check_bn_rows(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 10);
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[5, 3], &mut rng))?;
    let bn0 = BatchNormState::new(&mut params, "bn", 3)?;
    let probe = Tensor::from_fn(&[5, 3], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let id = tape.param(x, p);
        let mut bn = bn0.clone();
        let y = tape.batchnorm_rows(id, &mut bn, p, Mode::Training)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, y, pr)
    })
}

fn check_bn_eval(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 11);
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[2, 2, 3], &mut rng))?;
    let mut bn0 = BatchNormState::new(&mut params, "bn", 2)?;
    bn0.seed_running(&[0.1, -0.2], &[1.5, 0.7])?;
    let probe = Tensor::from_fn(&[2, 2, 3], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let id = tape.param(x, p);
        let mut bn = bn0.clone();
        let y = tape.batchnorm_spatial(id, &mut bn, p, Mode::Evaluation)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, y, pr)
    })
}

fn check_scalar_mix(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 12);
    let mut params = ParamSet::new();
    let a = params.register("a", Tensor::scalar(rng.gen_range(-1.0..1.0)))?;
    let x = params.register("x", Tensor::randn(&[6], &mut rng))?;
    let y = params.register("y", Tensor::randn(&[6], &mut rng))?;
    let probe = Tensor::from_fn(&[6], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let aid = tape.param(a, p);
        let xid = tape.param(x, p);
        let yid = tape.param(y, p);
        let m = tape.scalar_mix(aid, xid, yid)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, m, pr)
    })
}

fn check_pool_concat(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 13);
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[2, 2, 3], &mut rng))?;
    let y = params.register("y", Tensor::randn(&[2, 3, 2], &mut rng))?;
    let probe = Tensor::from_fn(&[2, 2], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let xid = tape.param(x, p);
        let yid = tape.param(y, p);
        let px = tape.global_avg_pool(xid)?;
        let py = tape.global_avg_pool(yid)?;
        let rx = tape.reshape(px, &[1, 2])?;
        let ry = tape.reshape(py, &[1, 2])?;
        let both = tape.concat_rows(&[rx, ry])?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, both, pr)
    })
}

fn check_map_stack_split(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 21);
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[2, 2, 3], &mut rng))?;
    let y = params.register("y", Tensor::randn(&[2, 2, 3], &mut rng))?;
    let probe = Tensor::from_fn(&[2, 2, 3], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let xid = tape.param(x, p);
        let yid = tape.param(y, p);
        let both = tape.concat_maps(&[xid, yid])?;
        let act = tape.relu(both)?;
        // Probe only the second block so its gradient must land in the
        // right slice of the stack.
        let second = tape.map_block(act, 1, 2)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, second, pr)
    })
}

fn check_row_block(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 22);
    let mut params = ParamSet::new();
    let x = params.register("x", Tensor::randn(&[3, 4], &mut rng))?;
    let y = params.register("y", Tensor::randn(&[3, 4], &mut rng))?;
    let probe = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let xid = tape.param(x, p);
        let yid = tape.param(y, p);
        let both = tape.concat_rows(&[xid, yid])?;
        let act = tape.relu(both)?;
        let first = tape.row_block(act, 0, 3)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, first, pr)
    })
}

fn check_id_loss(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 14);
    let mut params = ParamSet::new();
    let logits = params.register("logits", Tensor::randn(&[3, 4], &mut rng))?;
    let labels = [1usize, 0, 3];
    finite_diff_check(&mut params, STEP, |p, tape| {
        let id = tape.param(logits, p);
        tape.id_loss(id, &labels, 0.1)
    })
}

fn check_triplet_loss(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 15);
    let mut params = ParamSet::new();
    let emb = params.register("emb", Tensor::randn(&[6, 4], &mut rng))?;
    let labels = [0usize, 0, 1, 1, 2, 2];
    finite_diff_check(&mut params, STEP, |p, tape| {
        let id = tape.param(emb, p);
        tape.triplet_loss(id, &labels, 0.3)
    })
}

fn check_center_loss(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 16);
    let mut params = ParamSet::new();
    let emb = params.register("emb", Tensor::randn(&[4, 3], &mut rng))?;
    let centers = params.register("centers", Tensor::randn(&[2, 3], &mut rng))?;
    let labels = [0usize, 1, 0, 1];
    finite_diff_check(&mut params, STEP, |p, tape| {
        let eid = tape.param(emb, p);
        let cid = tape.param(centers, p);
        tape.center_loss(eid, cid, &labels)
    })
}

fn check_pga_layer(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 17);
    let mut params = ParamSet::new();
    let x = params.register("input", Tensor::randn(&[4, 2, 3], &mut rng))?;
    let adj = Arc::new(
        generate_grid_graph(GridSpec::new(2, 3, 1).expect("spec"), NeighborMode::Four)
            .expect("grid"),
    );
    let layer0 = PGALayer::new(
        &mut params,
        "pga.0",
        adj,
        NodeLayout::Pixel { h: 2, w: 3 },
        4,
        2,
        PgaOptions::default(),
        &mut rng,
    )?;
    let probe = Tensor::from_fn(&[4, 2, 3], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let xid = tape.param(x, p);
        let mut layer = layer0.clone();
        let (out, _) = layer.residual_forward(tape, p, xid, Mode::Training)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, out, pr)
    })
}

fn check_pga_stack(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 18);
    let mut params = ParamSet::new();
    let x = params.register("input", Tensor::randn(&[3, 2, 2], &mut rng))?;
    let adj = Arc::new(
        generate_grid_graph(GridSpec::new(2, 2, 1).expect("spec"), NeighborMode::Eight)
            .expect("grid"),
    );
    let stack0 = PGAStack::build(
        &mut params,
        "pga",
        3,
        adj,
        NodeLayout::Pixel { h: 2, w: 2 },
        3,
        2,
        PgaOptions::default(),
        &mut rng,
    )?;
    let probe = Tensor::from_fn(&[3, 2, 2], |_| rng.gen_range(-1.0..1.0));
    finite_diff_check(&mut params, STEP, |p, tape| {
        let xid = tape.param(x, p);
        let mut stack = stack0.clone();
        let out = stack.forward(tape, p, xid, Mode::Training)?;
        let pr = tape.leaf(probe.clone());
        weighted_sum(tape, out, pr)
    })
}

fn check_total_objective(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 19);
    let cfg = ModelConfig {
        input_channels: 2,
        channels: 4,
        cprime: 2,
        h: 2,
        w: 3,
        classes: 2,
        depth: 1,
        graph: GraphKind::Grid(NeighborMode::Four),
        literal_softmax: false,
        value_projection: false,
        self_loops: false,
    };
    let model0 = ToyModel::new(cfg, seed)?;
    let inputs: Vec<Tensor> =
        (0..4).map(|_| Tensor::randn(&[2, 2, 3], &mut rng)).collect();
    let labels = [0usize, 0, 1, 1];
    let loss_cfg = LossConfig { beta: 0.01, margin: 0.3, smoothing: 0.1 };
    let mut params = model0.params().clone();
    finite_diff_check(&mut params, STEP, |p, tape| {
        let mut model = model0.clone();
        *model.params_mut() = p.clone();
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let fwd = model.forward_batch(tape, &refs, Mode::Training)?;
        let centers = tape.param(model.centers_id(), model.params());
        let losses =
            total_loss(tape, fwd.logits, fwd.embeddings, centers, &labels, &loss_cfg)?;
        Ok(losses.total)
    })
}

/// Each score-projection convolution bias feeds straight into a
/// training-mode batch norm, whose per-channel mean subtraction absorbs
/// it exactly — so its true gradient is identically zero, something
/// finite differences can only see as noise. This check asserts it on
/// the analytic side: after a full backward pass through a depth-3
/// stack, the largest absolute bias-gradient coordinate must vanish to
/// rounding.
fn check_inert_conv_bias(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed, 18);
    let mut params = ParamSet::new();
    let x = params.register("input", Tensor::randn(&[3, 2, 2], &mut rng))?;
    let adj = Arc::new(
        generate_grid_graph(GridSpec::new(2, 2, 1).expect("spec"), NeighborMode::Eight)
            .expect("grid"),
    );
    let mut stack = PGAStack::build(
        &mut params,
        "pga",
        3,
        adj,
        NodeLayout::Pixel { h: 2, w: 2 },
        3,
        2,
        PgaOptions::default(),
        &mut rng,
    )?;
    let probe = Tensor::from_fn(&[3, 2, 2], |_| rng.gen_range(-1.0..1.0));
    let mut tape = Tape::new();
    let xid = tape.param(x, &params);
    let out = stack.forward(&mut tape, &params, xid, Mode::Training)?;
    let pr = tape.leaf(probe);
    let loss = weighted_sum(&mut tape, out, pr)?;
    tape.backward(loss, &mut params)?;
    let mut worst = 0.0_f64;
    for i in 0..3 {
        for half in ["theta", "phi"] {
            let id = params
                .find(&format!("pga.{i}.{half}.bias"))
                .expect("bias parameter exists");
            for &g in params.grad(id).data() {
                worst = worst.max(g.abs());
            }
        }
    }
    Ok(worst)
}
