//! Decoder-only transformer with MoE feed-forward blocks.
//!
//! Each layer is pre-norm: `h += Attn(RMSNorm(h))`, then
//! `h += MoE(RMSNorm(h))`. Attention is dense causal multi-head attention;
//! only the feed-forward sublayers are sparse. A final RMSNorm and an
//! untied output projection give next-token logits.
//!
//! [`forward_tiers`] runs one pass per preference tier. Layers inside the
//! layer scope route every tier through the router logits and groups
//! computed in the tier-1 pass; the other layers use standard top-K on
//! their own input. Everything before the first grouped MoE sublayer is
//! identical across tiers and is computed once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::grouping::{
    resolve_layer_scope, GroupAssigner, GroupingMode, GroupingStrategy, LayerScope, RoutingStats,
    ScopeKind,
};
use crate::losses::{balance_loss, RewardSchedule, StdKind};
use crate::moe::{
    gate_weights, moe_forward, rank_experts, route, standard_moe_forward, tier_restricted_forward,
    top_k_select, ExpertParams, RouterParams, Routing, RoutingState,
};
use crate::optim::OptimConfig;
use crate::real::{Precision, Real};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// Every tier is scored on the ground-truth sequence.
    #[default]
    TeacherForced,
    /// Every tier decodes its own continuation and is scored on it.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub mode: RolloutMode,
    /// Sampling temperature of the sampled mode; 0 decodes greedily.
    pub temperature: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            mode: RolloutMode::TeacherForced,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub expert_hidden: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub activation: Activation,
    pub router_bias: bool,
    pub grouping: GroupingStrategy,
    pub layer_scope: ScopeKind,
    /// Per-tier rewards; defaults to evenly spaced values from 1 to 0.
    pub rewards: Option<RewardSchedule>,
    pub advantage_std: StdKind,
    pub lambda_erl: f64,
    pub lambda_balance: f64,
    /// Treat the average log-probabilities of tiers below the first as
    /// constants in the rank loss.
    pub stop_grad_lower_tiers: bool,
    pub seed: u64,
    pub precision: Precision,
    pub max_seq_len: usize,
    pub rollout: RolloutConfig,
    pub optim: OptimConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 12,
            d_model: 64,
            num_layers: 2,
            heads: 4,
            expert_hidden: 32,
            num_experts: 16,
            top_k: 2,
            activation: Activation::Gelu,
            router_bias: true,
            grouping: GroupingStrategy::default(),
            layer_scope: ScopeKind::Full,
            rewards: None,
            advantage_std: StdKind::Population,
            lambda_erl: 1.0,
            lambda_balance: 1.0,
            stop_grad_lower_tiers: false,
            seed: 0,
            precision: Precision::F64,
            max_seq_len: 64,
            rollout: RolloutConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

/// A configuration checked and resolved against its own sizes.
#[derive(Debug, Clone)]
pub struct ModelPlan {
    pub assigner: GroupAssigner,
    pub scope: LayerScope,
    pub rewards: RewardSchedule,
    /// `None` when there is a single tier.
    pub advantages: Option<Vec<f64>>,
}

impl ModelPlan {
    pub fn num_groups(&self) -> usize {
        self.assigner.num_groups()
    }

    /// Whether the rank loss is part of the objective.
    pub fn has_rank_loss(&self) -> bool {
        self.advantages.is_some() && !self.scope.is_empty()
    }
}

impl ModelConfig {
    pub fn num_groups(&self) -> usize {
        self.grouping.groups
    }

    pub fn reward_schedule(&self) -> RewardSchedule {
        self.rewards
            .clone()
            .unwrap_or_else(|| RewardSchedule::linear(self.grouping.groups.max(1)))
    }

    pub fn plan(&self) -> Result<ModelPlan> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_layers", self.num_layers),
            ("heads", self.heads),
            ("expert_hidden", self.expert_hidden),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("max_seq_len", self.max_seq_len),
            ("grouping.groups", self.grouping.groups),
            ("grouping.static_window", self.grouping.static_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model ({}) is not divisible by heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.top_k > self.num_experts {
            return Err(Error::invalid(format!(
                "top_k ({}) exceeds num_experts ({})",
                self.top_k, self.num_experts
            )));
        }
        let assigner = self
            .grouping
            .resolve(self.num_experts, self.top_k)
            .map_err(|e| Error::invalid(format!("grouping: {}", strip(e))))?;
        let scope = resolve_layer_scope(&self.layer_scope, self.num_layers)
            .map_err(|e| Error::invalid(format!("layer_scope: {}", strip(e))))?;
        let rewards = self.reward_schedule();
        if rewards.len() != self.grouping.groups {
            return Err(Error::invalid(format!(
                "rewards: {} values for {} groups",
                rewards.len(),
                self.grouping.groups
            )));
        }
        let advantages = if rewards.len() > 1 {
            Some(rewards.advantages(self.advantage_std)?)
        } else {
            None
        };
        for (name, v) in [
            ("lambda_erl", self.lambda_erl),
            ("lambda_balance", self.lambda_balance),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        if !(self.rollout.temperature >= 0.0 && self.rollout.temperature.is_finite()) {
            return Err(Error::invalid(
                "rollout.temperature must be a non-negative number",
            ));
        }
        self.optim.validate()?;
        Ok(ModelPlan {
            assigner,
            scope,
            rewards,
            advantages,
        })
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("configuration serializes");
        Sha256::digest(&json).into()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}

/// Parameter names and shapes in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, n, h, v) = (
        cfg.d_model,
        cfg.num_experts,
        cfg.expert_hidden,
        cfg.vocab_size,
    );
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push((p("attn_norm"), vec![d]));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((p(w), vec![d, d]));
        }
        out.push((p("moe_norm"), vec![d]));
        out.push((p("router.weight"), vec![n, d]));
        if cfg.router_bias {
            out.push((p("router.bias"), vec![n]));
        }
        for e in 0..n {
            out.push((p(&format!("experts.{e}.w1")), vec![d, h]));
            out.push((p(&format!("experts.{e}.w2")), vec![h, d]));
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("head".to_string(), vec![d, v]));
    out
}

fn init_std(name: &str, shape: &[usize]) -> Option<f64> {
    let last = name.rsplit('.').next().unwrap_or(name);
    match last {
        "attn_norm" | "moe_norm" | "final_norm" => None,
        "bias" => Some(0.0),
        "tok_emb" | "pos_emb" => Some(1.0),
        // fan-in scaling; router weights are n×d so their fan-in is d
        "weight" => Some(1.0 / (shape[1] as f64).sqrt()),
        _ => Some(1.0 / (shape[0] as f64).sqrt()),
    }
}

/// Model parameters in canonical order, always held at 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor<f64>>,
}

impl ParamStore {
    /// Gaussian fan-in initialization seeded by `cfg.seed`; norm gains start
    /// at one and router biases at zero.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_shapes(cfg) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match init_std(&name, &shape) {
                None => vec![1.0; numel],
                Some(s) => (0..numel)
                    .map(|_| {
                        s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                    })
                    .collect(),
            };
            tensors.push(Tensor::new(shape, data)?);
            names.push(name);
        }
        Ok(ParamStore { names, tensors })
    }

    /// Rebuilds a store from named tensors, checking names and shapes
    /// against the configuration.
    pub fn from_named(cfg: &ModelConfig, entries: Vec<(String, Tensor<f64>)>) -> Result<Self> {
        let expected = param_shapes(cfg);
        if expected.len() != entries.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                expected.len(),
                entries.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, shape), (got, t)) in expected.into_iter().zip(entries) {
            if name != got || t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {got} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ParamStore { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn named(&self) -> Vec<(String, Tensor<f64>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.tensors.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub moe_norm: Var,
    pub router: RouterParams,
    pub experts: ExpertParams,
}

/// Parameters bound into one graph.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Var,
    /// Every parameter in canonical order.
    pub all: Vec<Var>,
}

impl ModelVars {
    /// Binds `store` into `g`, as trainable leaves or as constants.
    pub fn bind<R: Real>(
        g: &mut Graph<R>,
        store: &ParamStore,
        cfg: &ModelConfig,
        trainable: bool,
    ) -> Result<Self> {
        let vars: Vec<Var> = store
            .tensors
            .iter()
            .map(|t| {
                let t = t.cast::<R>();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        ModelVars::from_vars(cfg, &vars)
    }

    /// Assembles already bound parameters given in canonical order.
    pub fn from_vars(cfg: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let expected = param_shapes(cfg).len();
        if vars.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameters, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let tok_emb = next();
        let pos_emb = next();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for _ in 0..cfg.num_layers {
            let attn_norm = next();
            let (wq, wk, wv, wo) = (next(), next(), next(), next());
            let moe_norm = next();
            let weight = next();
            let bias = cfg.router_bias.then(&mut next);
            let mut w1 = Vec::with_capacity(cfg.num_experts);
            let mut w2 = Vec::with_capacity(cfg.num_experts);
            for _ in 0..cfg.num_experts {
                w1.push(next());
                w2.push(next());
            }
            layers.push(LayerVars {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                moe_norm,
                router: RouterParams { weight, bias },
                experts: ExpertParams {
                    w1,
                    w2,
                    activation: cfg.activation,
                },
            });
        }
        let final_norm = next();
        let head = next();
        Ok(ModelVars {
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            head,
            all: vars.to_vec(),
        })
    }
}

/// Expert sets chosen at one routing site: `tiers × tokens × experts`.
pub type Selection = Vec<Vec<Vec<usize>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
enum TapeMode {
    #[default]
    Live,
    Record,
    Replay,
}

/// Record of the discrete routing decisions of a forward pass.
///
/// A recorded tape replays the same expert choices on later passes, which
/// makes the loss a smooth function of the parameters for finite
/// differences: only the gates and expert outputs vary.
#[derive(Debug, Clone, Default)]
pub struct RoutingTape {
    mode: TapeMode,
    events: Vec<Selection>,
    cursor: usize,
}

impl RoutingTape {
    pub fn live() -> Self {
        RoutingTape::default()
    }

    pub fn recording() -> Self {
        RoutingTape {
            mode: TapeMode::Record,
            ..Default::default()
        }
    }

    /// Replays the recorded decisions from the start. A live tape stays live.
    pub fn into_replay(self) -> Self {
        match self.mode {
            TapeMode::Live => self,
            _ => RoutingTape {
                mode: TapeMode::Replay,
                events: self.events,
                cursor: 0,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    fn select(&mut self, decide: impl FnOnce() -> Result<Selection>) -> Result<Selection> {
        match self.mode {
            TapeMode::Live => decide(),
            TapeMode::Record => {
                let s = decide()?;
                self.events.push(s.clone());
                Ok(s)
            }
            TapeMode::Replay => {
                let s = self
                    .events
                    .get(self.cursor)
                    .cloned()
                    .ok_or_else(|| Error::invalid("routing tape exhausted"))?;
                self.cursor += 1;
                Ok(s)
            }
        }
    }
}

/// Per-call inputs of a forward pass besides parameters and tokens.
#[derive(Debug, Clone, Default)]
pub struct ForwardCtx<'a> {
    pub tape: RoutingTape,
    /// Key of the random grouping draws (one per training step or
    /// evaluation batch).
    pub draw_base: u64,
    /// Routing history for the static-average grouping mode.
    pub stats: Option<&'a RoutingStats>,
}

impl ForwardCtx<'_> {
    pub fn live(draw_base: u64) -> Self {
        ForwardCtx {
            draw_base,
            ..Default::default()
        }
    }
}

/// Tier-1 routing of one MoE layer.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub grouped: bool,
    /// Router logits (`N×n`).
    pub logits: Var,
    /// Experts used by each token: its tier-1 group inside the scope,
    /// its top-K outside.
    pub tier1: Vec<Vec<usize>>,
    /// Full-softmax routing probabilities averaged over the tokens.
    pub mean_probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Next-token logits (`N×V`) of each computed tier.
    pub tier_logits: Vec<Var>,
    pub layers: Vec<LayerRecord>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash of a sequence of words, used to derive independent random streams.
pub fn mix_key(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &w| splitmix(acc ^ splitmix(w)))
}

fn mean_probs<R: Real>(states: &[RoutingState<R>]) -> Vec<f64> {
    let n = states[0].num_experts();
    let mut out = vec![0.0; n];
    for s in states {
        for (o, p) in out.iter_mut().zip(&s.full_softmax) {
            *o += p.f64();
        }
    }
    let inv = 1.0 / states.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

fn group_selection<R: Real>(
    cfg: &ModelConfig,
    plan: &ModelPlan,
    layer: usize,
    states: &[RoutingState<R>],
    draw_base: u64,
    stats: Option<&RoutingStats>,
) -> Result<Selection> {
    let c = plan.num_groups();
    let per_batch = plan.assigner.is_random() && cfg.grouping.random_per_batch;
    let draw = |token: usize| {
        if per_batch {
            mix_key(&[draw_base, layer as u64])
        } else {
            mix_key(&[draw_base, layer as u64, token as u64])
        }
    };
    let mut sel: Selection = vec![Vec::with_capacity(states.len()); c];
    match cfg.grouping.mode {
        GroupingMode::StaticAverage => {
            let current = mean_probs(states);
            let ranking = match stats {
                Some(s) => s.ranking(layer, &current),
                None => rank_experts(&current),
            };
            let a = plan.assigner.assign(&ranking, draw(0))?;
            for (tier, grp) in sel.iter_mut().zip(a.groups) {
                *tier = vec![grp; states.len()];
            }
        }
        GroupingMode::DynamicPerToken => {
            for (i, s) in states.iter().enumerate() {
                let a = plan.assigner.assign(&s.ranking, draw(i))?;
                for (tier, grp) in sel.iter_mut().zip(a.groups) {
                    tier.push(grp);
                }
            }
        }
    }
    Ok(sel)
}

fn check_tokens(cfg: &ModelConfig, ids: &[usize], batch: usize, seq: usize) -> Result<()> {
    if batch == 0 || seq == 0 || ids.len() != batch * seq {
        return Err(Error::invalid(format!(
            "{} token ids do not form a {batch}×{seq} batch",
            ids.len()
        )));
    }
    if seq > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence length {seq} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "token {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn embed<R: Real>(g: &mut Graph<R>, vars: &ModelVars, ids: &[usize], seq: usize) -> Result<Var> {
    let positions: Vec<usize> = (0..ids.len()).map(|i| i % seq).collect();
    let tok = g.gather_rows(vars.tok_emb, ids)?;
    let pos = g.gather_rows(vars.pos_emb, &positions)?;
    g.add(tok, pos)
}

fn attention_block<R: Real>(
    g: &mut Graph<R>,
    lv: &LayerVars,
    h: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let a = g.rms_norm(h, lv.attn_norm, NORM_EPS)?;
    let q = g.matmul(a, lv.wq)?;
    let k = g.matmul(a, lv.wk)?;
    let v = g.matmul(a, lv.wv)?;
    let att = g.causal_attention(q, k, v, batch, seq, heads)?;
    let o = g.matmul(att, lv.wo)?;
    g.add(h, o)
}

fn standard_layer<R: Real>(
    g: &mut Graph<R>,
    lv: &LayerVars,
    m: Var,
    k: usize,
    tape: &mut RoutingTape,
) -> Result<(Var, LayerRecord)> {
    let routing = route(g, m, &lv.router)?;
    let sel = tape.select(|| {
        let sets = routing
            .states
            .iter()
            .map(|s| top_k_select(s, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(vec![sets])
    })?;
    let sets = sel
        .into_iter()
        .next()
        .ok_or_else(|| Error::invalid("empty routing record"))?;
    let gates = gate_weights(g, routing.logits, &sets)?;
    let out = moe_forward(g, m, gates, &sets, &lv.experts)?;
    let rec = LayerRecord {
        grouped: false,
        logits: routing.logits,
        mean_probs: mean_probs(&routing.states),
        tier1: sets,
    };
    Ok((out, rec))
}

fn output_head<R: Real>(g: &mut Graph<R>, vars: &ModelVars, h: Var) -> Result<Var> {
    let f = g.rms_norm(h, vars.final_norm, NORM_EPS)?;
    g.matmul(f, vars.head)
}

/// Runs the first `tiers` tier passes over a `batch×seq` block of token ids.
#[allow(clippy::too_many_arguments)]
pub fn forward_tiers<R: Real>(
    g: &mut Graph<R>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    plan: &ModelPlan,
    ids: &[usize],
    batch: usize,
    seq: usize,
    tiers: usize,
    ctx: &mut ForwardCtx<'_>,
) -> Result<ForwardOutput> {
    check_tokens(cfg, ids, batch, seq)?;
    let c = plan.num_groups();
    if tiers == 0 || tiers > c {
        return Err(Error::invalid(format!("cannot run {tiers} of {c} tiers")));
    }
    let num_layers = vars.layers.len();
    let first = (0..num_layers).find(|&l| plan.scope.contains(l + 1));
    let mut records: Vec<Option<LayerRecord>> = vec![None; num_layers];

    let mut h = embed(g, vars, ids, seq)?;
    for l in 0..first.unwrap_or(num_layers) {
        let lv = &vars.layers[l];
        h = attention_block(g, lv, h, batch, seq, cfg.heads)?;
        let m = g.rms_norm(h, lv.moe_norm, NORM_EPS)?;
        let (out, rec) = standard_layer(g, lv, m, cfg.top_k, &mut ctx.tape)?;
        records[l] = Some(rec);
        h = g.add(h, out)?;
    }
    let Some(first) = first else {
        let logits = output_head(g, vars, h)?;
        return Ok(ForwardOutput {
            tier_logits: vec![logits; tiers],
            layers: records.into_iter().flatten().collect(),
        });
    };
    let shared = attention_block(g, &vars.layers[first], h, batch, seq, cfg.heads)?;

    let mut cache: Vec<Option<(Routing<R>, Selection)>> = (0..num_layers).map(|_| None).collect();
    let mut tier_logits = Vec::with_capacity(tiers);
    for j in 0..tiers {
        let mut h = shared;
        for l in first..num_layers {
            let lv = &vars.layers[l];
            if l != first {
                h = attention_block(g, lv, h, batch, seq, cfg.heads)?;
            }
            let m = g.rms_norm(h, lv.moe_norm, NORM_EPS)?;
            let out = if plan.scope.contains(l + 1) {
                if j == 0 {
                    let routing = route(g, m, &lv.router)?;
                    let (draw_base, stats) = (ctx.draw_base, ctx.stats);
                    let sel = ctx.tape.select(|| {
                        group_selection(cfg, plan, l, &routing.states, draw_base, stats)
                    })?;
                    if sel.len() != c {
                        return Err(Error::invalid(
                            "routing record has the wrong number of tiers",
                        ));
                    }
                    records[l] = Some(LayerRecord {
                        grouped: true,
                        logits: routing.logits,
                        tier1: sel[0].clone(),
                        mean_probs: mean_probs(&routing.states),
                    });
                    cache[l] = Some((routing, sel));
                }
                let (routing, sel) = cache[l].as_ref().expect("tier 1 fills the cache");
                tier_restricted_forward(g, m, &sel[j], routing, &lv.experts)?
            } else {
                let (out, rec) = standard_layer(g, lv, m, cfg.top_k, &mut ctx.tape)?;
                if j == 0 {
                    records[l] = Some(rec);
                }
                out
            };
            h = g.add(h, out)?;
        }
        tier_logits.push(output_head(g, vars, h)?);
    }
    Ok(ForwardOutput {
        tier_logits,
        layers: records.into_iter().flatten().collect(),
    })
}

/// A plain top-K MoE transformer forward that knows nothing about tiers.
pub fn plain_forward<R: Real>(
    g: &mut Graph<R>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    ids: &[usize],
    batch: usize,
    seq: usize,
) -> Result<ForwardOutput> {
    check_tokens(cfg, ids, batch, seq)?;
    let mut h = embed(g, vars, ids, seq)?;
    let mut layers = Vec::with_capacity(vars.layers.len());
    for lv in &vars.layers {
        h = attention_block(g, lv, h, batch, seq, cfg.heads)?;
        let m = g.rms_norm(h, lv.moe_norm, NORM_EPS)?;
        let moe = standard_moe_forward(g, m, &lv.router, &lv.experts, cfg.top_k)?;
        layers.push(LayerRecord {
            grouped: false,
            logits: moe.routing.logits,
            mean_probs: mean_probs(&moe.routing.states),
            tier1: moe.selected,
        });
        h = g.add(h, moe.output)?;
    }
    let logits = output_head(g, vars, h)?;
    Ok(ForwardOutput {
        tier_logits: vec![logits],
        layers,
    })
}

/// Balance loss of every MoE layer, averaged over layers.
pub fn balance_term<R: Real>(g: &mut Graph<R>, layers: &[LayerRecord]) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::invalid("model has no MoE layer"));
    }
    let mut parts = Vec::with_capacity(layers.len());
    for rec in layers {
        let probs = g.softmax_rows(rec.logits)?;
        parts.push(balance_loss(g, probs, &rec.tier1)?);
    }
    let stacked = g.stack(&parts)?;
    let w = vec![R::one() / R::of(layers.len() as f64); layers.len()];
    g.dot_const(stacked, &w)
}
