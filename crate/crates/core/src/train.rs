//! Training step, evaluation and decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::grouping::RoutingStats;
use crate::losses::{
    erl_loss, ntp_from_logprobs, sequence_avg_logprobs, total_loss, LossBreakdown, LossCoefficients,
};
use crate::model::{
    balance_term, forward_tiers, mix_key, plain_forward, ForwardCtx, ForwardOutput, ModelConfig,
    ModelPlan, ModelVars, ParamStore, RolloutMode, RoutingTape,
};
use crate::optim::AdamState;
use crate::real::{Precision, Real};

const TRAIN_TAG: u64 = 0x7472_6169_6e;
const EVAL_TAG: u64 = 0x6576_616c;

/// Random-grouping key of training step `step`.
pub fn train_draw(seed: u64, step: u64) -> u64 {
    mix_key(&[seed, TRAIN_TAG, step])
}

/// Random-grouping key of evaluation batch `index`.
pub fn eval_draw(seed: u64, index: u64) -> u64 {
    mix_key(&[seed, EVAL_TAG, index])
}

/// A block of equal-length sequences prepared for next-token prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    /// Input token ids, `batch×seq` row-major.
    pub inputs: Vec<usize>,
    /// Next-token targets aligned with `inputs`.
    pub targets: Vec<usize>,
    /// True where the target is not scored (prompt positions, padding).
    pub padding: Vec<bool>,
}

impl Batch {
    pub fn new(
        batch: usize,
        seq: usize,
        inputs: Vec<usize>,
        targets: Vec<usize>,
        padding: Vec<bool>,
    ) -> Result<Self> {
        let n = batch * seq;
        if n == 0 || inputs.len() != n || targets.len() != n || padding.len() != n {
            return Err(Error::invalid(format!(
                "batch arrays do not match {batch}×{seq}"
            )));
        }
        if let Some(b) = padding.chunks(seq).position(|c| c.iter().all(|&p| p)) {
            return Err(Error::invalid(format!(
                "sequence {b} has no scored position"
            )));
        }
        Ok(Batch {
            batch,
            seq,
            inputs,
            targets,
            padding,
        })
    }

    /// Splits full sequences into inputs (all but the last token) and
    /// targets (all but the first). Tokens at index `scored_from[b]` and
    /// later in sequence `b` are scored.
    pub fn from_sequences(seqs: &[Vec<usize>], scored_from: &[usize]) -> Result<Self> {
        let len = seqs.first().map_or(0, |s| s.len());
        if len < 2 || seqs.iter().any(|s| s.len() != len) || scored_from.len() != seqs.len() {
            return Err(Error::invalid(
                "sequences must share a length of at least two",
            ));
        }
        let seq = len - 1;
        let mut inputs = Vec::with_capacity(seqs.len() * seq);
        let mut targets = Vec::with_capacity(seqs.len() * seq);
        let mut padding = Vec::with_capacity(seqs.len() * seq);
        for (s, &from) in seqs.iter().zip(scored_from) {
            inputs.extend_from_slice(&s[..seq]);
            targets.extend_from_slice(&s[1..]);
            padding.extend((1..len).map(|i| i < from));
        }
        Batch::new(seqs.len(), seq, inputs, targets, padding)
    }

    pub fn scored(&self) -> usize {
        self.padding.iter().filter(|p| !**p).count()
    }
}

/// Parameters, optimizer moments, step counter and routing history.
/// All randomness is derived from the configuration seed and the step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub optim: AdamState,
    pub step: u64,
    pub stats: RoutingStats,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let params = ParamStore::init(cfg)?;
        let optim = AdamState::new(params.tensors());
        Ok(TrainState {
            params,
            optim,
            step: 0,
            stats: RoutingStats::new(cfg.num_layers, cfg.grouping.static_window),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Batch mean of the per-sequence average target log-probability of
    /// each tier.
    pub tier_avg_logprob: Vec<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// The objective built on one graph.
#[derive(Debug, Clone)]
pub struct Objective {
    pub total: Var,
    pub ntp: Var,
    /// Absent with a single tier or an empty layer scope.
    pub erl: Option<Var>,
    pub balance: Var,
    pub loss: LossBreakdown,
    pub tier_avg_logprob: Vec<f64>,
    pub forward: ForwardOutput,
}

fn batch_mean_logprob<R: Real>(g: &mut Graph<R>, lp: Var, batch: &Batch) -> Result<Var> {
    let per_seq = sequence_avg_logprobs(g, lp, batch.seq, &batch.padding)?;
    let w = vec![R::one() / R::of(batch.batch as f64); batch.batch];
    g.dot_const(per_seq, &w)
}

fn coefficients(cfg: &ModelConfig) -> LossCoefficients {
    LossCoefficients {
        erl: cfg.lambda_erl,
        balance: cfg.lambda_balance,
    }
}

/// Builds `L_total` for one batch. With `rollouts`, tier `j` is scored on
/// `rollouts[j]` instead of the ground truth; the next-token and balance
/// terms always use the ground truth.
#[allow(clippy::too_many_arguments)]
pub fn build_objective<R: Real>(
    g: &mut Graph<R>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    plan: &ModelPlan,
    batch: &Batch,
    ctx: &mut ForwardCtx<'_>,
    rollouts: Option<&[Batch]>,
) -> Result<Objective> {
    let c = plan.num_groups();
    let (b, t) = (batch.batch, batch.seq);
    let (forward, ntp, avgs) = match rollouts {
        None => {
            let fwd = forward_tiers(g, vars, cfg, plan, &batch.inputs, b, t, c, ctx)?;
            let lps = fwd
                .tier_logits
                .iter()
                .map(|&l| g.target_log_probs(l, &batch.targets))
                .collect::<Result<Vec<_>>>()?;
            let ntp = ntp_from_logprobs(g, lps[0], &batch.padding)?;
            let avgs = lps
                .iter()
                .map(|&lp| batch_mean_logprob(g, lp, batch))
                .collect::<Result<Vec<_>>>()?;
            (fwd, ntp, avgs)
        }
        Some(rs) => {
            if rs.len() != c {
                return Err(Error::invalid(format!(
                    "{} rollouts for {c} tiers",
                    rs.len()
                )));
            }
            let fwd = forward_tiers(g, vars, cfg, plan, &batch.inputs, b, t, 1, ctx)?;
            let lp = g.target_log_probs(fwd.tier_logits[0], &batch.targets)?;
            let ntp = ntp_from_logprobs(g, lp, &batch.padding)?;
            let mut avgs = Vec::with_capacity(c);
            for (j, r) in rs.iter().enumerate() {
                let f = forward_tiers(g, vars, cfg, plan, &r.inputs, b, t, j + 1, ctx)?;
                let lp = g.target_log_probs(f.tier_logits[j], &r.targets)?;
                avgs.push(batch_mean_logprob(g, lp, r)?);
            }
            (fwd, ntp, avgs)
        }
    };
    let tier_avg_logprob: Vec<f64> = avgs.iter().map(|&v| g.scalar(v).f64()).collect();
    let erl = match &plan.advantages {
        Some(adv) if plan.has_rank_loss() => {
            let mut parts = avgs.clone();
            if cfg.stop_grad_lower_tiers {
                for p in parts.iter_mut().skip(1) {
                    let v = g.value(*p).clone();
                    *p = g.constant(v);
                }
            }
            let stacked = g.stack(&parts)?;
            Some(erl_loss(g, stacked, adv)?)
        }
        _ => None,
    };
    let balance = balance_term(g, &forward.layers)?;
    let advantages = plan.advantages.clone().unwrap_or_default();
    let (total, loss) = total_loss(g, ntp, erl, balance, coefficients(cfg), advantages)?;
    Ok(Objective {
        total,
        ntp,
        erl,
        balance,
        loss,
        tier_avg_logprob,
        forward,
    })
}

/// Next-token plus balance objective of the plain top-K model.
pub fn plain_objective<R: Real>(
    g: &mut Graph<R>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<Objective> {
    let forward = plain_forward(g, vars, cfg, &batch.inputs, batch.batch, batch.seq)?;
    let lp = g.target_log_probs(forward.tier_logits[0], &batch.targets)?;
    let ntp = ntp_from_logprobs(g, lp, &batch.padding)?;
    let balance = balance_term(g, &forward.layers)?;
    let (total, loss) = total_loss(g, ntp, None, balance, coefficients(cfg), Vec::new())?;
    Ok(Objective {
        total,
        ntp,
        erl: None,
        balance,
        tier_avg_logprob: vec![-loss.ntp],
        loss,
        forward,
    })
}

/// One optimizer step on `batch`: multi-tier forward, total loss,
/// backward pass, AdamW update. Non-finite values abort with a numeric
/// error naming the step and the offending loss term or parameter.
pub fn train_step(state: &mut TrainState, cfg: &ModelConfig, batch: &Batch) -> Result<StepReport> {
    let plan = cfg.plan()?;
    match cfg.precision {
        Precision::F64 => step_with::<f64>(state, cfg, &plan, batch, false),
        Precision::F32 => step_with::<f32>(state, cfg, &plan, batch, false),
    }
}

/// A training step of the plain top-K model with next-token and balance
/// losses only, sharing the optimizer and parameters of [`train_step`].
pub fn sft_step(state: &mut TrainState, cfg: &ModelConfig, batch: &Batch) -> Result<StepReport> {
    let plan = cfg.plan()?;
    match cfg.precision {
        Precision::F64 => step_with::<f64>(state, cfg, &plan, batch, true),
        Precision::F32 => step_with::<f32>(state, cfg, &plan, batch, true),
    }
}

fn step_with<R: Real>(
    state: &mut TrainState,
    cfg: &ModelConfig,
    plan: &ModelPlan,
    batch: &Batch,
    plain: bool,
) -> Result<StepReport> {
    let step = state.step;
    let at_step = |e: Error| match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        other => other,
    };
    let draw_base = train_draw(cfg.seed, step);
    let rollouts = if !plain && cfg.rollout.mode == RolloutMode::Sampled && plan.has_rank_loss() {
        let opts = DecodeOptions {
            tier: 0,
            temperature: cfg.rollout.temperature,
            seed: draw_base,
            draw_base,
        };
        let rs = (0..plan.num_groups())
            .map(|j| {
                let o = DecodeOptions {
                    tier: j,
                    seed: mix_key(&[draw_base, j as u64]),
                    ..opts
                };
                decode::<R>(&state.params, cfg, plan, batch, &o, Some(&state.stats))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(at_step)?;
        Some(rs)
    } else {
        None
    };

    let mut g = Graph::<R>::new();
    let vars = ModelVars::bind(&mut g, &state.params, cfg, true)?;
    let obj = if plain {
        plain_objective(&mut g, &vars, cfg, batch)
    } else {
        let mut ctx = ForwardCtx {
            tape: RoutingTape::live(),
            draw_base,
            stats: Some(&state.stats),
        };
        build_objective(
            &mut g,
            &vars,
            cfg,
            plan,
            batch,
            &mut ctx,
            rollouts.as_deref(),
        )
    }
    .map_err(at_step)?;
    g.backward(obj.total)?;

    let mut grads = Vec::with_capacity(vars.all.len());
    let mut sq = 0.0;
    for ((&v, name), p) in vars
        .all
        .iter()
        .zip(state.params.names())
        .zip(state.params.tensors())
    {
        let gv: Vec<f64> = match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.f64()).collect(),
            None => vec![0.0; p.numel()],
        };
        if gv.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "step {step}: non-finite gradient in {name}"
            )));
        }
        sq += gv.iter().map(|x| x * x).sum::<f64>();
        grads.push(gv);
    }
    let lr = cfg.optim.learning_rate(step);
    state
        .optim
        .update(state.params.tensors_mut(), &grads, lr, &cfg.optim)?;
    if let Some(i) = state.params.tensors().iter().position(|t| !t.is_finite()) {
        return Err(Error::numeric(format!(
            "step {step}: parameter {} became non-finite",
            state.params.names()[i]
        )));
    }
    for (l, rec) in obj.forward.layers.iter().enumerate() {
        state.stats.push(l, rec.mean_probs.clone());
    }
    state.step += 1;
    Ok(StepReport {
        step,
        loss: obj.loss,
        tier_avg_logprob: obj.tier_avg_logprob,
        lr,
        grad_norm: sq.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// 0-based tier whose path generates.
    pub tier: usize,
    /// 0 decodes greedily.
    pub temperature: f64,
    /// Seed of the sampling stream.
    pub seed: u64,
    pub draw_base: u64,
}

fn pick_token<R: Real>(row: &[R], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    if temperature <= 0.0 {
        return best;
    }
    let max = row[best].f64();
    let w: Vec<f64> = row
        .iter()
        .map(|&x| ((x.f64() - max) / temperature).exp())
        .collect();
    let mut u = rng.gen::<f64>() * w.iter().sum::<f64>();
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    best
}

/// Free-running decoding under one tier's path: every scored position is
/// predicted from the model's own earlier predictions, and the prediction
/// is fed back as the next input when that position is scored too.
/// Returns the batch with its scored targets and fed-back inputs replaced.
pub fn decode<R: Real>(
    params: &ParamStore,
    cfg: &ModelConfig,
    plan: &ModelPlan,
    batch: &Batch,
    opts: &DecodeOptions,
    stats: Option<&RoutingStats>,
) -> Result<Batch> {
    let (b, t, v) = (batch.batch, batch.seq, cfg.vocab_size);
    let mut out = batch.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for p in 0..t {
        if (0..b).all(|s| out.padding[s * t + p]) {
            continue;
        }
        let len = p + 1;
        let ids: Vec<usize> = (0..b)
            .flat_map(|s| out.inputs[s * t..s * t + len].iter().copied())
            .collect();
        let mut g = Graph::<R>::new();
        let vars = ModelVars::bind(&mut g, params, cfg, false)?;
        let mut ctx = ForwardCtx {
            tape: RoutingTape::live(),
            draw_base: opts.draw_base,
            stats,
        };
        let fwd = forward_tiers(
            &mut g,
            &vars,
            cfg,
            plan,
            &ids,
            b,
            len,
            opts.tier + 1,
            &mut ctx,
        )?;
        let logits = g.value(fwd.tier_logits[opts.tier]).data();
        for s in 0..b {
            let i = s * t + p;
            if out.padding[i] {
                continue;
            }
            let r = s * len + p;
            let tok = pick_token(&logits[r * v..(r + 1) * v], opts.temperature, &mut rng);
            out.targets[i] = tok;
            if p + 1 < t && !out.padding[i + 1] {
                out.inputs[i + 1] = tok;
            }
        }
    }
    Ok(out)
}

/// Held-out metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub batches: usize,
    pub ntp: f64,
    pub balance: f64,
    /// Mean over batches of each tier's average target log-probability.
    pub tier_avg_logprob: Vec<f64>,
    /// Mean over batches of `L̄_1 − L̄_C`; `None` with a single tier.
    pub separation: Option<f64>,
    /// Fraction of batches whose tier averages strictly decrease with the
    /// tier index; `None` with a single tier.
    pub ordinal_consistency: Option<f64>,
    /// Token accuracy of free-running greedy decoding on the tier-1 path.
    pub accuracy: f64,
    /// Tier-1 expert usage counts per layer; each layer sums to `K`·tokens.
    pub expert_load: Vec<Vec<u64>>,
    /// Entropy of each layer's load distribution divided by `ln n`,
    /// averaged over layers.
    pub load_entropy: f64,
}

/// Evaluates teacher-forced tier likelihoods and tier-1 greedy accuracy
/// without changing the state.
pub fn evaluate(state: &TrainState, cfg: &ModelConfig, batches: &[Batch]) -> Result<EvalReport> {
    let plan = cfg.plan()?;
    match cfg.precision {
        Precision::F64 => evaluate_with::<f64>(state, cfg, &plan, batches),
        Precision::F32 => evaluate_with::<f32>(state, cfg, &plan, batches),
    }
}

fn evaluate_with<R: Real>(
    state: &TrainState,
    cfg: &ModelConfig,
    plan: &ModelPlan,
    batches: &[Batch],
) -> Result<EvalReport> {
    if batches.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let c = plan.num_groups();
    let n = cfg.num_experts;
    let mut ntp = 0.0;
    let mut balance = 0.0;
    let mut tier_sum = vec![0.0; c];
    let mut sep = 0.0;
    let mut consistent = 0usize;
    let mut correct = 0usize;
    let mut scored = 0usize;
    let mut load = vec![vec![0u64; n]; cfg.num_layers];
    for (i, batch) in batches.iter().enumerate() {
        let draw_base = eval_draw(cfg.seed, i as u64);
        let mut g = Graph::<R>::new();
        let vars = ModelVars::bind(&mut g, &state.params, cfg, false)?;
        let mut ctx = ForwardCtx {
            tape: RoutingTape::live(),
            draw_base,
            stats: Some(&state.stats),
        };
        let obj = build_objective(&mut g, &vars, cfg, plan, batch, &mut ctx, None)?;
        ntp += obj.loss.ntp;
        balance += obj.loss.balance;
        let avg = &obj.tier_avg_logprob;
        for (s, a) in tier_sum.iter_mut().zip(avg) {
            *s += a;
        }
        sep += avg[0] - avg[c - 1];
        if avg.windows(2).all(|w| w[0] > w[1]) {
            consistent += 1;
        }
        for (l, rec) in obj.forward.layers.iter().enumerate() {
            for set in &rec.tier1 {
                for &e in set {
                    load[l][e] += 1;
                }
            }
        }
        let opts = DecodeOptions {
            tier: 0,
            temperature: 0.0,
            seed: 0,
            draw_base,
        };
        let decoded = decode::<R>(&state.params, cfg, plan, batch, &opts, Some(&state.stats))?;
        for ((&p, &want), &got) in batch
            .padding
            .iter()
            .zip(&batch.targets)
            .zip(&decoded.targets)
        {
            if !p {
                scored += 1;
                correct += usize::from(want == got);
            }
        }
    }
    let nb = batches.len() as f64;
    let load_entropy = load
        .iter()
        .map(|counts| {
            let total: u64 = counts.iter().sum();
            let h: f64 = counts
                .iter()
                .filter(|&&x| x > 0)
                .map(|&x| {
                    let p = x as f64 / total as f64;
                    -p * p.ln()
                })
                .sum();
            if n > 1 {
                h / (n as f64).ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / load.len() as f64;
    let multi = c > 1;
    Ok(EvalReport {
        batches: batches.len(),
        ntp: ntp / nb,
        balance: balance / nb,
        tier_avg_logprob: tier_sum.iter().map(|s| s / nb).collect(),
        separation: multi.then(|| sep / nb),
        ordinal_consistency: multi.then(|| consistent as f64 / nb),
        accuracy: correct as f64 / scored as f64,
        expert_load: load,
        load_entropy,
    })
}

/// Loss closure for [`crate::autodiff::finite_diff_check`] over the model
/// parameters in canonical order. The routing decisions of the first call
/// are recorded and replayed by every later call. Tiers are scored
/// teacher-forced.
pub fn frozen_objective<'a>(
    cfg: &'a ModelConfig,
    plan: &'a ModelPlan,
    batch: &'a Batch,
    draw_base: u64,
    stats: Option<&'a RoutingStats>,
) -> impl FnMut(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a {
    let mut tape = Some(RoutingTape::recording());
    move |g, vars| {
        let mv = ModelVars::from_vars(cfg, vars)?;
        let mut ctx = ForwardCtx {
            tape: tape.take().unwrap_or_default(),
            draw_base,
            stats,
        };
        let obj = build_objective(g, &mv, cfg, plan, batch, &mut ctx, None);
        tape = Some(ctx.tape.into_replay());
        Ok(obj?.total)
    }
}
