//! Sparse mixture-of-experts feed-forward layer.
//!
//! Routing is split in two halves: [`route`] evaluates the router once per
//! token and records a [`RoutingState`] (logits, descending ranking, full
//! softmax); any number of gatings can then be derived from the same state,
//! either the standard top-K ([`top_k_select`]) or a restricted expert tier.
//! Expert selection is a discrete choice and carries no gradient; gradients
//! reach the router only through the gating weights.

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Router parameters bound into a graph: `weight` is `n×d`, `bias` is `n`.
#[derive(Debug, Clone, Copy)]
pub struct RouterParams {
    pub weight: Var,
    pub bias: Option<Var>,
}

/// Per-expert two-layer feed-forward weights bound into a graph
/// (`w1[i]: d×h`, `w2[i]: h×d`).
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub w1: Vec<Var>,
    pub w2: Vec<Var>,
    pub activation: Activation,
}

impl ExpertParams {
    pub fn num_experts(&self) -> usize {
        self.w1.len()
    }
}

/// Router output for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState<R = f64> {
    pub logits: Vec<R>,
    /// Expert indices in descending logit order; ties go to the lower index.
    pub ranking: Vec<usize>,
    /// Softmax over all experts.
    pub full_softmax: Vec<R>,
}

impl<R: Real> RoutingState<R> {
    pub fn from_logits(logits: Vec<R>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::invalid("routing over zero experts"));
        }
        if let Some(bad) = logits.iter().find(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("non-finite router logit {bad}")));
        }
        let ranking = rank_experts(&logits);
        let max = logits[ranking[0]];
        let exps: Vec<R> = logits.iter().map(|&x| (x - max).exp()).collect();
        let z: R = exps.iter().copied().sum();
        let full_softmax = exps.into_iter().map(|e| e / z).collect();
        Ok(RoutingState {
            logits,
            ranking,
            full_softmax,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.logits.len()
    }
}

/// Descending argsort with ties broken by ascending index.
pub fn rank_experts<R: Real>(scores: &[R]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Router logits for a batch of tokens.
#[derive(Debug, Clone)]
pub struct Routing<R = f64> {
    /// `N×n` logits, differentiable.
    pub logits: Var,
    pub states: Vec<RoutingState<R>>,
}

/// Evaluates `ρ = W_r·x + b_r` for every row of `x` (`N×d`).
pub fn route<R: Real>(g: &mut Graph<R>, x: Var, router: &RouterParams) -> Result<Routing<R>> {
    if !g.value(x).is_finite() {
        return Err(Error::numeric("non-finite router input"));
    }
    let mut logits = g.matmul_t(x, router.weight)?;
    if let Some(b) = router.bias {
        logits = g.add_row(logits, b)?;
    }
    let n = g.shape(logits)[1];
    let states = g
        .value(logits)
        .data()
        .chunks(n)
        .map(|row| RoutingState::from_logits(row.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Routing { logits, states })
}

/// The `k` highest-ranked experts, in rank order.
pub fn top_k_select<R: Real>(state: &RoutingState<R>, k: usize) -> Result<Vec<usize>> {
    let n = state.num_experts();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "top-K needs 1 <= K <= {n}, got {k}"
        )));
    }
    Ok(state.ranking[..k].to_vec())
}

fn check_selection(selected: &[Vec<usize>], n: usize) -> Result<()> {
    for (r, set) in selected.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::invalid(format!("empty expert set for token {r}")));
        }
        for (i, &e) in set.iter().enumerate() {
            if e >= n {
                return Err(Error::invalid(format!(
                    "expert {e} out of range for {n} experts"
                )));
            }
            if set[..i].contains(&e) {
                return Err(Error::invalid(format!(
                    "expert {e} selected twice for token {r}"
                )));
            }
        }
    }
    Ok(())
}

/// Softmax of each token's logits restricted to its selected experts;
/// exactly zero elsewhere.
pub fn gate_weights<R: Real>(
    g: &mut Graph<R>,
    logits: Var,
    selected: &[Vec<usize>],
) -> Result<Var> {
    let n = *g
        .shape(logits)
        .last()
        .ok_or_else(|| Error::invalid("gate logits must be a vector or matrix"))?;
    check_selection(selected, n)?;
    g.masked_softmax_rows(logits, selected)
}

/// Evaluates expert `e` on the given rows.
pub fn expert_forward<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    experts: &ExpertParams,
    e: usize,
) -> Result<Var> {
    let h = g.matmul(x, experts.w1[e])?;
    let h = g.activation(h, experts.activation)?;
    g.matmul(h, experts.w2[e])
}

/// `v = Σ_i g_i·E_i(x)` for every token, evaluating each expert only on
/// the tokens that selected it.
pub fn moe_forward<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    gates: Var,
    selected: &[Vec<usize>],
    experts: &ExpertParams,
) -> Result<Var> {
    let (rows, d) = match g.shape(x) {
        [r, d] => (*r, *d),
        s => {
            return Err(Error::Dimension {
                op: "moe_forward",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let n = experts.num_experts();
    if selected.len() != rows || g.shape(gates) != [rows, n] {
        return Err(Error::Dimension {
            op: "moe_forward",
            lhs: vec![rows, d],
            rhs: g.shape(gates).to_vec(),
        });
    }
    check_selection(selected, n)?;
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (r, set) in selected.iter().enumerate() {
        for &e in set {
            assigned[e].push(r);
        }
    }
    let mut parts = Vec::new();
    for (e, tokens) in assigned.into_iter().enumerate() {
        if tokens.is_empty() {
            continue;
        }
        let xe = g.gather_rows(x, &tokens)?;
        let ye = expert_forward(g, xe, experts, e)?;
        let pairs: Vec<(usize, usize)> = tokens.iter().map(|&r| (r, e)).collect();
        let ge = g.gather_elements(gates, &pairs)?;
        let ye = g.scale_rows(ye, ge)?;
        parts.push((ye, tokens));
    }
    g.combine_rows(&parts, rows, d)
}

/// MoE forward with every token restricted to its group; gates renormalize
/// within the group using the shared routing logits.
pub fn tier_restricted_forward<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    groups: &[Vec<usize>],
    routing: &Routing<R>,
    experts: &ExpertParams,
) -> Result<Var> {
    let gates = gate_weights(g, routing.logits, groups)?;
    moe_forward(g, x, gates, groups, experts)
}

/// Output of a standard top-K MoE layer.
#[derive(Debug, Clone)]
pub struct StandardMoe<R = f64> {
    pub output: Var,
    pub routing: Routing<R>,
    pub selected: Vec<Vec<usize>>,
}

/// Router, top-K selection, gating and expert mixture in one call.
pub fn standard_moe_forward<R: Real>(
    g: &mut Graph<R>,
    x: Var,
    router: &RouterParams,
    experts: &ExpertParams,
    k: usize,
) -> Result<StandardMoe<R>> {
    let routing = route(g, x, router)?;
    let selected = routing
        .states
        .iter()
        .map(|s| top_k_select(s, k))
        .collect::<Result<Vec<_>>>()?;
    let gates = gate_weights(g, routing.logits, &selected)?;
    let output = moe_forward(g, x, gates, &selected, experts)?;
    Ok(StandardMoe {
        output,
        routing,
        selected,
    })
}
