//! Verification suites run by `tiermoe verify`.
//!
//! * `gradcheck`: central finite differences of the total loss against the
//!   backward pass for a matrix of toy configurations.
//! * `invariants`: randomized property checks over every module, reported
//!   with per-property pass counts.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tiermoe_core::autodiff::{finite_diff_check, Fault, Graph, Var};
use tiermoe_core::checkpoint::{read_checkpoint, write_checkpoint};
use tiermoe_core::grouping::{
    assign_groups, default_block_positions, GroupingKind, GroupingStrategy, ScopeKind,
};
use tiermoe_core::losses::{balance_loss, compute_advantages, StdKind};
use tiermoe_core::model::{forward_tiers, plain_forward, ForwardCtx, ModelConfig, ModelVars};
use tiermoe_core::moe::{gate_weights, top_k_select, RoutingState};
use tiermoe_core::train::{
    evaluate, frozen_objective, sft_step, train_draw, train_step, TrainState,
};
use tiermoe_core::{Result as CoreResult, Tensor};

use crate::data::{is_held_out, DataConfig, Split, Task, TaskSampler};
use crate::error::LabResult;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// 2 layers, d=16, n=8, K=2.
pub fn gradcheck_model(groups: usize, kind: GroupingKind, scope: ScopeKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 16,
        num_layers: 2,
        heads: 2,
        expert_hidden: 8,
        num_experts: 8,
        top_k: 2,
        max_seq_len: 8,
        layer_scope: scope,
        grouping: GroupingStrategy {
            kind,
            groups,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub groups: usize,
    pub strategy: GroupingKind,
    pub scope: ScopeKind,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
    pub failing_params: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn failures(&self) -> usize {
        self.cases.iter().filter(|c| !c.passed).count()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let _ = write!(
                s,
                "{} C={} {:?} {:?}: {} entries, max rel error {:.2e}",
                if c.passed { "ok  " } else { "FAIL" },
                c.groups,
                c.strategy,
                c.scope,
                c.checked,
                c.max_rel_error
            );
            if !c.passed {
                let _ = write!(s, ", failing: {}", c.failing_params.join(", "));
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "{} of {} configurations passed in {:.1}s",
            self.cases.len() - self.failures(),
            self.cases.len(),
            self.seconds
        );
        s
    }
}

/// One gradient check of the total loss. `fault` corrupts the backward pass
/// of the gate softmax, as a negative control.
pub fn gradcheck_case(cfg: &ModelConfig, fault: bool) -> LabResult<GradcheckCase> {
    let plan = cfg.plan()?;
    let data = DataConfig {
        prompt_len: 3,
        ..Default::default()
    };
    let sampler = TaskSampler::new(Task::Copy, cfg.vocab_size, &data)?;
    let batch = sampler.train_batch(cfg.seed, 0, 2)?;
    let mut params = TrainState::new(cfg)?.params.named();
    let mut inner = frozen_objective(cfg, &plan, &batch, train_draw(cfg.seed, 0), None);
    let objective = |g: &mut Graph<f64>, v: &[Var]| -> CoreResult<Var> {
        if fault {
            g.set_fault(Some(Fault::MaskedSoftmaxBackward));
        }
        inner(g, v)
    };
    let report = finite_diff_check(objective, &mut params, GRAD_EPS, GRAD_TOL)?;
    Ok(GradcheckCase {
        groups: cfg.num_groups(),
        strategy: cfg.grouping.kind,
        scope: cfg.layer_scope.clone(),
        checked: report.checked,
        max_rel_error: report.max_rel_error,
        passed: report.passed(),
        failing_params: report
            .failing_params()
            .into_iter()
            .map(String::from)
            .collect(),
    })
}

/// The full matrix: C ∈ {1,2,3}, uniform and random grouping, scopes full,
/// shallow and layer 2 only.
pub fn gradcheck(fault: bool) -> LabResult<GradcheckReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for groups in 1..=3 {
        for kind in [GroupingKind::Uniform, GroupingKind::Random] {
            for scope in [
                ScopeKind::Full,
                ScopeKind::Shallow,
                ScopeKind::Explicit(vec![2]),
            ] {
                cases.push(gradcheck_case(
                    &gradcheck_model(groups, kind, scope),
                    fault,
                )?);
            }
        }
    }
    Ok(GradcheckReport {
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub module: &'static str,
    pub name: &'static str,
    pub trials: usize,
    pub passed: usize,
    /// Observed value of the first failing trial.
    pub first_failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantReport {
    pub properties: Vec<PropertyResult>,
    pub seconds: f64,
}

impl InvariantReport {
    pub fn failures(&self) -> usize {
        self.properties
            .iter()
            .filter(|p| p.passed < p.trials)
            .count()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for p in &self.properties {
            let _ = write!(
                s,
                "{} {}::{}  {}/{}",
                if p.passed == p.trials { "ok  " } else { "FAIL" },
                p.module,
                p.name,
                p.passed,
                p.trials
            );
            if let Some(f) = &p.first_failure {
                let _ = write!(s, "  ({f})");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "{} of {} properties held in {:.1}s",
            self.properties.len() - self.failures(),
            self.properties.len(),
            self.seconds
        );
        s
    }
}

type Trial = Result<(), String>;

fn property(
    module: &'static str,
    name: &'static str,
    trials: usize,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&mut ChaCha8Rng) -> Trial,
) -> PropertyResult {
    let mut passed = 0;
    let mut first_failure = None;
    for _ in 0..trials {
        match f(rng) {
            Ok(()) => passed += 1,
            Err(e) => {
                first_failure.get_or_insert(e);
            }
        }
    }
    PropertyResult {
        module,
        name,
        trials,
        passed,
        first_failure,
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Trial {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn tiny_model(rng: &mut ChaCha8Rng) -> ModelConfig {
    let n = *[4usize, 6, 8].choose(rng).unwrap();
    let k = rng.gen_range(1..=2);
    let groups = rng.gen_range(1..=n / k).min(3);
    ModelConfig {
        vocab_size: 6,
        d_model: 8,
        num_layers: rng.gen_range(1..=2),
        heads: 2,
        expert_hidden: 4,
        num_experts: n,
        top_k: k,
        max_seq_len: 8,
        seed: rng.gen(),
        grouping: GroupingStrategy {
            groups,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn tiny_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> LabResult<tiermoe_core::train::Batch> {
    let data = DataConfig {
        prompt_len: 2,
        ..Default::default()
    };
    TaskSampler::new(Task::Copy, cfg.vocab_size, &data)?.train_batch(rng.gen(), 0, 2)
}

/// Runs every property with the given base seed.
pub fn invariants(seed: u64) -> InvariantReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut props = Vec::new();

    props.push(property(
        "autodiff",
        "gradient_matches_finite_differences",
        20,
        &mut rng,
        |rng| {
            let rows = rng.gen_range(1..4);
            let cols = rng.gen_range(2..5);
            let mut random = |shape: Vec<usize>| {
                let data = (0..shape.iter().product())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect();
                Tensor::new(shape, data).unwrap()
            };
            let mut params = vec![
                ("x".to_string(), random(vec![rows, cols])),
                ("w".to_string(), random(vec![cols, cols])),
                ("gain".to_string(), random(vec![cols])),
            ];
            let weights: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = |g: &mut Graph<f64>, v: &[Var]| -> CoreResult<Var> {
                let h = g.matmul(v[0], v[1])?;
                let h = g.rms_norm(h, v[2], 1e-6)?;
                let s = g.softmax_rows(h)?;
                let flat = g.reshape(s, &[rows * cols])?;
                g.dot_const(flat, &weights)
            };
            let r = finite_diff_check(f, &mut params, GRAD_EPS, GRAD_TOL).map_err(err)?;
            check(r.passed(), || {
                format!("max rel error {:.2e}", r.max_rel_error)
            })
        },
    ));

    props.push(property(
        "moe",
        "restricted_gates_sum_to_one_on_group",
        2000,
        &mut rng,
        |rng| {
            let n = rng.gen_range(2..12);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let group: Vec<usize> = idx[..rng.gen_range(1..=n)].to_vec();
            let mut g = Graph::<f64>::new();
            let l = g.constant(Tensor::new(vec![1, n], logits).unwrap());
            let w = gate_weights(&mut g, l, std::slice::from_ref(&group)).map_err(err)?;
            let w = g.value(w).data();
            let on: f64 = group.iter().map(|&e| w[e]).sum();
            let off_zero = (0..n).filter(|e| !group.contains(e)).all(|e| w[e] == 0.0);
            check((on - 1.0).abs() <= 1e-12 && off_zero, || {
                format!("group sum {on}, off-group zero {off_zero}")
            })
        },
    ));

    props.push(property(
        "grouping",
        "tiers_disjoint_with_configured_sizes",
        500,
        &mut rng,
        |rng| {
            let k = rng.gen_range(1..4);
            let c = rng.gen_range(1..5);
            let n = c * k + rng.gen_range(0..6);
            let mut ranking: Vec<usize> = (0..n).collect();
            ranking.shuffle(rng);
            let kind = *[
                GroupingKind::Uniform,
                GroupingKind::HighOnly,
                GroupingKind::Random,
            ]
            .choose(rng)
            .unwrap();
            let strategy = GroupingStrategy {
                kind,
                groups: c,
                seed: rng.gen(),
                ..Default::default()
            };
            let a = assign_groups(&ranking, &strategy, k).map_err(err)?;
            let sizes_ok = a.groups.len() == c && a.groups.iter().all(|g| g.len() == k);
            check(a.is_disjoint() && sizes_ok, || {
                format!("{kind:?} n={n} K={k} C={c}: {:?}", a.groups)
            })
        },
    ));

    props.push(property(
        "grouping",
        "uniform_tier1_is_top_k",
        500,
        &mut rng,
        |rng| {
            let k = rng.gen_range(1..4);
            let c = rng.gen_range(1..4);
            let n = c * k + rng.gen_range(0..6);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let state = RoutingState::from_logits(logits).map_err(err)?;
            let strategy = GroupingStrategy {
                groups: c,
                ..Default::default()
            };
            let a = assign_groups(&state.ranking, &strategy, k).map_err(err)?;
            let mut t1 = a.groups[0].clone();
            let mut top = top_k_select(&state, k).map_err(err)?;
            t1.sort_unstable();
            top.sort_unstable();
            check(t1 == top, || format!("tier 1 {t1:?} vs top-K {top:?}"))
        },
    ));

    props.push(property(
        "grouping",
        "block_positions_span_top_to_bottom",
        500,
        &mut rng,
        |rng| {
            let k = rng.gen_range(1..9);
            let c = rng.gen_range(1..6);
            let n = c * k + rng.gen_range(0..40);
            let blocks = default_block_positions(n, k, c).map_err(err)?;
            // all but the last tier sit on block boundaries; the last one is the
            // bottom K ranks
            let upper = &blocks[..c.saturating_sub(1).max(1).min(blocks.len())];
            let aligned = upper.iter().all(|r| r.len() == k && r.start % k == 0);
            let ordered = blocks.windows(2).all(|w| w[0].end <= w[1].start);
            let ends = blocks[0].start == 0 && (c == 1 || blocks[c - 1] == (n - k..n));
            check(blocks.len() == c && aligned && ordered && ends, || {
                format!("n={n} K={k} C={c}: {blocks:?}")
            })
        },
    ));

    props.push(property(
        "losses",
        "advantages_zero_mean_unit_std",
        500,
        &mut rng,
        |rng| {
            let c = rng.gen_range(2..8);
            let mut r: Vec<f64> = (0..c).map(|_| rng.gen_range(-10.0..10.0)).collect();
            r.sort_by(|a, b| b.partial_cmp(a).unwrap());
            r.dedup();
            if r.len() < 2 {
                return Ok(());
            }
            let a = compute_advantages(&r, StdKind::Population).map_err(err)?;
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
            check(mean.abs() <= 1e-12 && (std - 1.0).abs() <= 1e-10, || {
                format!("mean {mean:e}, std {std}")
            })
        },
    ));

    props.push(property(
        "losses",
        "advantages_affine_invariant",
        500,
        &mut rng,
        |rng| {
            let c = rng.gen_range(2..8);
            let r: Vec<f64> = (0..c)
                .map(|i| (c - i) as f64 + rng.gen_range(0.0..0.5))
                .collect();
            let scale = rng.gen_range(0.01..100.0);
            let shift = rng.gen_range(-50.0..50.0);
            let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
            let a = compute_advantages(&r, StdKind::Population).map_err(err)?;
            let b = compute_advantages(&moved, StdKind::Population).map_err(err)?;
            let d = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            check(d <= 1e-10, || format!("max difference {d:e}"))
        },
    ));

    props.push(property(
        "losses",
        "balance_uniform_is_k_over_n",
        200,
        &mut rng,
        |rng| {
            let k = rng.gen_range(1..4);
            let n = k * rng.gen_range(1..5) + rng.gen_range(0..3);
            let tokens = n * rng.gen_range(1..4);
            let sel: Vec<Vec<usize>> = (0..tokens)
                .map(|t| (0..k).map(|j| (t * k + j) % n).collect())
                .collect();
            let uniform = vec![1.0 / n as f64; tokens * n];
            let mut g = Graph::<f64>::new();
            let p = g.constant(Tensor::new(vec![tokens, n], uniform).unwrap());
            let v = balance_loss(&mut g, p, &sel).map_err(err)?;
            let v = g.value(v).data()[0];
            let want = k as f64 / n as f64;
            check((v - want).abs() <= 1e-12, || format!("{v} vs K/n = {want}"))
        },
    ));

    props.push(property(
        "model",
        "tier1_forward_equals_plain_forward",
        10,
        &mut rng,
        |rng| {
            let cfg = tiny_model(rng);
            let plan = cfg.plan().map_err(err)?;
            let batch = tiny_batch(rng, &cfg).map_err(err)?;
            let state = TrainState::new(&cfg).map_err(err)?;
            let mut g = Graph::<f64>::new();
            let vars = ModelVars::bind(&mut g, &state.params, &cfg, false).map_err(err)?;
            let mut ctx = ForwardCtx::live(rng.gen());
            let tiers = forward_tiers(
                &mut g,
                &vars,
                &cfg,
                &plan,
                &batch.inputs,
                batch.batch,
                batch.seq,
                plan.num_groups(),
                &mut ctx,
            )
            .map_err(err)?;
            let plain = plain_forward(&mut g, &vars, &cfg, &batch.inputs, batch.batch, batch.seq)
                .map_err(err)?;
            let same = g.value(tiers.tier_logits[0]).data() == g.value(plain.tier_logits[0]).data();
            check(same, || {
                "tier-1 logits differ from the plain forward".into()
            })
        },
    ));

    props.push(property(
        "model",
        "empty_scope_gives_identical_tiers",
        10,
        &mut rng,
        |rng| {
            let mut cfg = tiny_model(rng);
            cfg.layer_scope = ScopeKind::Explicit(vec![]);
            let plan = cfg.plan().map_err(err)?;
            let batch = tiny_batch(rng, &cfg).map_err(err)?;
            let state = TrainState::new(&cfg).map_err(err)?;
            let mut g = Graph::<f64>::new();
            let vars = ModelVars::bind(&mut g, &state.params, &cfg, false).map_err(err)?;
            let mut ctx = ForwardCtx::live(rng.gen());
            let out = forward_tiers(
                &mut g,
                &vars,
                &cfg,
                &plan,
                &batch.inputs,
                batch.batch,
                batch.seq,
                plan.num_groups(),
                &mut ctx,
            )
            .map_err(err)?;
            let first = g.value(out.tier_logits[0]).data();
            let same = out.tier_logits.iter().all(|&t| g.value(t).data() == first);
            check(same, || "tier logits differ with an empty scope".into())
        },
    ));

    props.push(property(
        "train",
        "single_tier_matches_plain_training",
        5,
        &mut rng,
        |rng| {
            let mut cfg = tiny_model(rng);
            cfg.grouping.groups = 1;
            let mut a = TrainState::new(&cfg).map_err(err)?;
            let mut b = a.clone();
            for _ in 0..5 {
                let batch = tiny_batch(rng, &cfg).map_err(err)?;
                let ra = train_step(&mut a, &cfg, &batch).map_err(err)?;
                let rb = sft_step(&mut b, &cfg, &batch).map_err(err)?;
                if ra.loss.ntp.to_bits() != rb.loss.ntp.to_bits() {
                    return Err(format!("ntp {} vs {}", ra.loss.ntp, rb.loss.ntp));
                }
            }
            check(a.params == b.params, || "parameters diverged".into())
        },
    ));

    props.push(property(
        "train",
        "steps_are_deterministic",
        5,
        &mut rng,
        |rng| {
            let mut cfg = tiny_model(rng);
            cfg.grouping.kind = *[GroupingKind::Uniform, GroupingKind::Random]
                .choose(rng)
                .unwrap();
            let batches: Vec<_> = (0..3)
                .map(|_| tiny_batch(rng, &cfg))
                .collect::<LabResult<_>>()
                .map_err(err)?;
            let run = || -> CoreResult<Vec<_>> {
                let mut st = TrainState::new(&cfg)?;
                batches
                    .iter()
                    .map(|b| train_step(&mut st, &cfg, b).map(|r| r.loss))
                    .collect()
            };
            let (x, y) = (run().map_err(err)?, run().map_err(err)?);
            check(x == y, || "loss streams differ".into())
        },
    ));

    props.push(property(
        "checkpoint",
        "round_trip_preserves_next_step",
        5,
        &mut rng,
        |rng| {
            let cfg = tiny_model(rng);
            let mut st = TrainState::new(&cfg).map_err(err)?;
            let batch = tiny_batch(rng, &cfg).map_err(err)?;
            train_step(&mut st, &cfg, &batch).map_err(err)?;
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &st, &cfg).map_err(err)?;
            let mut back = read_checkpoint(buf.as_slice(), &cfg).map_err(err)?;
            let ra = train_step(&mut st, &cfg, &batch).map_err(err)?;
            let rb = train_step(&mut back, &cfg, &batch).map_err(err)?;
            check(ra.loss == rb.loss, || {
                format!("{:?} vs {:?}", ra.loss, rb.loss)
            })
        },
    ));

    props.push(property(
        "train",
        "expert_load_counts_k_per_token",
        5,
        &mut rng,
        |rng| {
            let cfg = tiny_model(rng);
            let st = TrainState::new(&cfg).map_err(err)?;
            let batch = tiny_batch(rng, &cfg).map_err(err)?;
            let rep = evaluate(&st, &cfg, std::slice::from_ref(&batch)).map_err(err)?;
            let want = (cfg.top_k * batch.batch * batch.seq) as u64;
            let sums: Vec<u64> = rep.expert_load.iter().map(|l| l.iter().sum()).collect();
            check(sums.iter().all(|&s| s == want), || {
                format!("layer sums {sums:?}, expected {want}")
            })
        },
    ));

    props.push(property(
        "data",
        "modadd_targets_and_disjoint_splits",
        50,
        &mut rng,
        |rng| {
            let vocab = rng.gen_range(6..20);
            let data = DataConfig {
                prompt_len: rng.gen_range(3..6),
                ..Default::default()
            };
            let s = TaskSampler::new(Task::Modadd, vocab, &data).map_err(err)?;
            let m = vocab - 2;
            for seq in s.sequences(20, rng.gen(), Split::Train).map_err(err)? {
                let (prompt, rest) = seq.split_at(data.prompt_len);
                let mut acc = 0;
                for &t in prompt {
                    acc = (acc + t) % m;
                }
                if rest != [m, acc] || is_held_out(prompt, data.holdout_every) {
                    return Err(format!("{seq:?}"));
                }
            }
            let eval_ok = s
                .sequences(20, rng.gen(), Split::Eval)
                .map_err(err)?
                .iter()
                .all(|e| is_held_out(&e[..data.prompt_len], data.holdout_every));
            check(eval_ok, || {
                "evaluation prompt outside the held-out split".into()
            })
        },
    ));

    InvariantReport {
        properties: props,
        seconds: start.elapsed().as_secs_f64(),
    }
}
