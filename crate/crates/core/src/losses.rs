//! Training objective: expert rank loss over preference tiers, next-token
//! prediction on the top tier, and the load-balancing term.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Fixed per-tier rewards, strictly decreasing in tier order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RewardSchedule {
    rewards: Vec<f64>,
}

impl RewardSchedule {
    pub fn new(rewards: Vec<f64>) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::invalid("reward schedule needs at least one tier"));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::invalid(format!("non-finite reward in {rewards:?}")));
        }
        if rewards.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid(format!(
                "rewards must be strictly decreasing, got {rewards:?}"
            )));
        }
        Ok(RewardSchedule { rewards })
    }

    /// The evenly spaced default `[1, …, 0]` for `c` tiers, e.g.
    /// `[1, 0.5, 0]` for three.
    pub fn linear(c: usize) -> Self {
        let rewards = if c == 1 {
            vec![1.0]
        } else {
            (0..c).map(|j| 1.0 - j as f64 / (c - 1) as f64).collect()
        };
        RewardSchedule { rewards }
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn advantages(&self, std: StdKind) -> Result<Vec<f64>> {
        compute_advantages(&self.rewards, std)
    }
}

impl TryFrom<Vec<f64>> for RewardSchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        RewardSchedule::new(v)
    }
}

impl From<RewardSchedule> for Vec<f64> {
    fn from(s: RewardSchedule) -> Self {
        s.rewards
    }
}

/// Standard deviation used for z-scoring the rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    /// Divide by `C`.
    #[default]
    Population,
    /// Divide by `C − 1`.
    Sample,
}

/// Z-scored rewards `(r_j − μ) / σ`.
pub fn compute_advantages(rewards: &[f64], std: StdKind) -> Result<Vec<f64>> {
    let c = rewards.len();
    if c < 2 {
        return Err(Error::invalid(format!(
            "advantages need at least two tiers, got {c}"
        )));
    }
    let mean = rewards.iter().sum::<f64>() / c as f64;
    let ss: f64 = rewards.iter().map(|r| (r - mean) * (r - mean)).sum();
    let denom = match std {
        StdKind::Population => c as f64,
        StdKind::Sample => (c - 1) as f64,
    };
    let sigma = (ss / denom).sqrt();
    if sigma == 0.0 {
        return Err(Error::DegenerateSchedule);
    }
    Ok(rewards.iter().map(|r| (r - mean) / sigma).collect())
}

fn mean_weights<R: Real>(padding: &[bool]) -> Option<Vec<R>> {
    let count = padding.iter().filter(|p| !**p).count();
    if count == 0 {
        return None;
    }
    let w = R::one() / R::of(count as f64);
    Some(
        padding
            .iter()
            .map(|&p| if p { R::zero() } else { w })
            .collect(),
    )
}

/// Mean log-probability over the non-padding positions of one sequence.
/// `padding[t]` is true for positions to ignore.
pub fn avg_token_logprob<R: Real>(
    g: &mut Graph<R>,
    token_logprobs: Var,
    padding: &[bool],
) -> Result<Var> {
    let w = mean_weights::<R>(padding)
        .ok_or_else(|| Error::invalid("sequence consists only of padding"))?;
    g.dot_const(token_logprobs, &w)
}

/// Per-sequence average log-probabilities for `B` sequences of length
/// `seq` stored back to back, giving a length-`B` vector.
pub fn sequence_avg_logprobs<R: Real>(
    g: &mut Graph<R>,
    token_logprobs: Var,
    seq: usize,
    padding: &[bool],
) -> Result<Var> {
    if seq == 0 || padding.len() % seq != 0 {
        return Err(Error::invalid("padding mask does not split into sequences"));
    }
    let mut w = Vec::with_capacity(padding.len());
    for (b, chunk) in padding.chunks(seq).enumerate() {
        let cw = mean_weights::<R>(chunk)
            .ok_or_else(|| Error::invalid(format!("sequence {b} consists only of padding")))?;
        w.extend(cw);
    }
    g.weighted_segments(token_logprobs, seq, &w)
}

/// `L_ERL = −Σ_j A_j · L̄_j`. Advantages are constants.
pub fn erl_loss<R: Real>(g: &mut Graph<R>, avg_logprobs: Var, advantages: &[f64]) -> Result<Var> {
    let c = g.value(avg_logprobs).numel();
    if c != advantages.len() {
        return Err(Error::invalid(format!(
            "{c} tier log-probabilities but {} advantages",
            advantages.len()
        )));
    }
    let w: Vec<R> = advantages.iter().map(|&a| R::of(-a)).collect();
    g.dot_const(avg_logprobs, &w)
}

/// Mean cross-entropy over non-padding positions given the target
/// log-probabilities.
pub fn ntp_from_logprobs<R: Real>(
    g: &mut Graph<R>,
    token_logprobs: Var,
    padding: &[bool],
) -> Result<Var> {
    let w: Vec<R> = mean_weights::<R>(padding)
        .ok_or_else(|| Error::invalid("batch consists only of padding"))?
        .into_iter()
        .map(|x| -x)
        .collect();
    g.dot_const(token_logprobs, &w)
}

/// Mean cross-entropy of the top tier's logits (`T×V`) against the ground
/// truth targets.
pub fn ntp_loss<R: Real>(
    g: &mut Graph<R>,
    tier1_logits: Var,
    targets: &[usize],
    padding: &[bool],
) -> Result<Var> {
    if targets.len() != padding.len() {
        return Err(Error::invalid("targets and padding mask differ in length"));
    }
    let lp = g.target_log_probs(tier1_logits, targets)?;
    ntp_from_logprobs(g, lp, padding)
}

/// `Σ_j p_j·f_j` with `p_j` the mean full-softmax probability of expert `j`
/// and `f_j` the fraction of tokens whose top-tier group contains `j`.
/// Gradients flow through `p` only.
pub fn balance_loss<R: Real>(
    g: &mut Graph<R>,
    full_softmax: Var,
    tier1: &[Vec<usize>],
) -> Result<Var> {
    let (l, n) = match g.shape(full_softmax) {
        [l, n] => (*l, *n),
        s => {
            return Err(Error::Dimension {
                op: "balance_loss",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    if tier1.is_empty() || tier1.len() != l {
        return Err(Error::invalid(format!(
            "balance loss over {} assignments for {l} tokens",
            tier1.len()
        )));
    }
    let mut counts = vec![0usize; n];
    for set in tier1 {
        for &e in set {
            if e >= n {
                return Err(Error::invalid(format!("expert {e} out of range")));
            }
            counts[e] += 1;
        }
    }
    let f: Vec<R> = counts.iter().map(|&c| R::of(c as f64 / l as f64)).collect();
    let p = g.mean_rows(full_softmax)?;
    g.dot_const(p, &f)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCoefficients {
    pub erl: f64,
    pub balance: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        LossCoefficients {
            erl: 1.0,
            balance: 1.0,
        }
    }
}

/// Scalar values of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ntp: f64,
    pub erl: f64,
    pub balance: f64,
    pub total: f64,
    pub advantages: Vec<f64>,
    pub lambda_erl: f64,
    pub lambda_balance: f64,
}

/// `L_total = L_NTP + λ_ERL·L_ERL + λ_balance·L_balance`. With `erl = None`
/// (a single tier, or no grouped layer) the rank term is left out entirely.
pub fn total_loss<R: Real>(
    g: &mut Graph<R>,
    ntp: Var,
    erl: Option<Var>,
    balance: Var,
    coeffs: LossCoefficients,
    advantages: Vec<f64>,
) -> Result<(Var, LossBreakdown)> {
    let check = |name: &str, v: Var| -> Result<f64> {
        let x = g.scalar(v).f64();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::numeric(format!("{name} loss is {x}")))
        }
    };
    let ntp_v = check("ntp", ntp)?;
    let erl_v = match erl {
        Some(e) => check("erl", e)?,
        None => 0.0,
    };
    let bal_v = check("balance", balance)?;
    let mut total = ntp;
    if let Some(e) = erl {
        let scaled = g.scale(e, R::of(coeffs.erl))?;
        total = g.add(total, scaled)?;
    }
    let scaled = g.scale(balance, R::of(coeffs.balance))?;
    total = g.add(total, scaled)?;
    let total_v = g.scalar(total).f64();
    if !total_v.is_finite() {
        return Err(Error::numeric(format!("total loss is {total_v}")));
    }
    Ok((
        total,
        LossBreakdown {
            ntp: ntp_v,
            erl: erl_v,
            balance: bal_v,
            total: total_v,
            advantages,
            lambda_erl: coeffs.erl,
            lambda_balance: coeffs.balance,
        },
    ))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::Tensor;

    const Z: f64 = 1.224744871391589; // sqrt(3/2)

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[1.0, 0.5, 0.0], StdKind::Population).unwrap();
        // μ = 0.5, σ = sqrt(1/6): 0.5 / sqrt(1/6) = sqrt(1.5)
        let sigma = (1.0f64 / 6.0).sqrt();
        let oracle = [0.5 / sigma, 0.0, -0.5 / sigma];
        for (x, y) in a.iter().zip(oracle) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a[0] - 1.22474).abs() < 1e-5);
        let b = compute_advantages(&[2.0, 1.0, 0.0], StdKind::Population).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(
            compute_advantages(&[1.0, 0.0], StdKind::Population).unwrap(),
            vec![1.0, -1.0]
        );
        let s = compute_advantages(&[1.0, 0.0], StdKind::Sample).unwrap();
        assert!((s[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn advantage_errors() {
        assert!(matches!(
            compute_advantages(&[0.3, 0.3, 0.3], StdKind::Population),
            Err(Error::DegenerateSchedule)
        ));
        assert!(matches!(
            compute_advantages(&[1.0], StdKind::Population),
            Err(Error::InvalidArgument(_))
        ));
        assert!(RewardSchedule::new(vec![1.0, 1.0]).is_err());
        assert!(RewardSchedule::new(vec![0.0, 1.0]).is_err());
        assert!(RewardSchedule::new(vec![]).is_err());
        assert_eq!(RewardSchedule::linear(3).rewards(), &[1.0, 0.5, 0.0]);
        let parsed: RewardSchedule = serde_json::from_str("[2.0, 1.0, 0.0]").unwrap();
        assert_eq!(parsed.len(), 3);
        assert!(serde_json::from_str::<RewardSchedule>("[0.0, 1.0]").is_err());
    }

    #[test]
    fn avg_logprob_examples() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::vector(vec![0.0]));
        let v = avg_token_logprob(&mut g, one, &[false]).unwrap();
        assert_eq!(g.scalar(v), 0.0);
        let lp = g.constant(Tensor::vector(vec![-1.0, -2.0, -3.0]));
        let v = avg_token_logprob(&mut g, lp, &[false; 3]).unwrap();
        assert_eq!(g.scalar(v), -2.0);
        let lp = g.constant(Tensor::vector(vec![-1.0, -9.0]));
        let v = avg_token_logprob(&mut g, lp, &[false, true]).unwrap();
        assert_eq!(g.scalar(v), -1.0);
        assert!(matches!(
            avg_token_logprob(&mut g, lp, &[true, true]),
            Err(Error::InvalidArgument(_))
        ));
        let lp = g.constant(Tensor::vector(vec![-1.0, -3.0, -9.0, -4.0]));
        let v = sequence_avg_logprobs(&mut g, lp, 2, &[false, false, true, false]).unwrap();
        assert_eq!(g.value(v).data(), &[-2.0, -4.0]);
        assert!(sequence_avg_logprobs(&mut g, lp, 2, &[false, false, true, true]).is_err());
    }

    #[test]
    fn erl_examples() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::vector(vec![-1.0, -2.0, -3.0]));
        let e = erl_loss(&mut g, l, &[Z, 0.0, -Z]).unwrap();
        // −(Z·(−1) + 0 + (−Z)·(−3)) = −2Z
        assert!((g.scalar(e) - (-2.0 * Z)).abs() < 1e-15);
        assert!((g.scalar(e) + 2.44949).abs() < 1e-5);

        let same = g.constant(Tensor::vector(vec![-1.7; 3]));
        let adv = compute_advantages(&[1.0, 0.5, 0.0], StdKind::Population).unwrap();
        let e = erl_loss(&mut g, same, &adv).unwrap();
        assert!(g.scalar(e).abs() < 1e-15);

        let l = g.constant(Tensor::vector(vec![-1.0, -1.5]));
        let e = erl_loss(&mut g, l, &[1.0, -1.0]).unwrap();
        assert_eq!(g.scalar(e), -0.5);
        assert!(erl_loss(&mut g, l, &[1.0, 0.0, -1.0]).is_err());
    }

    #[test]
    fn erl_gradient_signs() {
        for rewards in [
            vec![1.0, 0.5, 0.0],
            vec![3.0, -1.0],
            vec![0.5, 0.25, 0.1, 0.0],
        ] {
            let adv = compute_advantages(&rewards, StdKind::Population).unwrap();
            let mut g = Graph::<f64>::new();
            let l = g.param(Tensor::vector(vec![-2.0; rewards.len()]));
            let e = erl_loss(&mut g, l, &adv).unwrap();
            g.backward(e).unwrap();
            let grad = g.grad(l).unwrap();
            assert!(grad[0] < 0.0);
            assert!(*grad.last().unwrap() > 0.0);
            for (gr, a) in grad.iter().zip(&adv) {
                assert_eq!(*gr, -a);
            }
        }
    }

    #[test]
    fn ntp_examples() {
        let mut g = Graph::<f64>::new();
        let perfect =
            g.constant(Tensor::matrix(&[vec![50.0, 0.0, 0.0], vec![0.0, 0.0, 50.0]]).unwrap());
        let l = ntp_loss(&mut g, perfect, &[0, 2], &[false, false]).unwrap();
        assert!(g.scalar(l) < 1e-20);
        let uniform = g.constant(Tensor::zeros(&[3, 4]));
        let l = ntp_loss(&mut g, uniform, &[0, 1, 3], &[false; 3]).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-15);
        assert!(ntp_loss(&mut g, uniform, &[0, 1, 3], &[true; 3]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = g.constant(Tensor::new(vec![3, 5], data).unwrap());
        let pad = [false, true, false];
        let l = ntp_loss(&mut g, logits, &[4, 0, 1], &pad).unwrap();
        let lp = g.target_log_probs(logits, &[4, 0, 1]).unwrap();
        let avg = avg_token_logprob(&mut g, lp, &pad).unwrap();
        assert_eq!(g.scalar(l), -g.scalar(avg));
    }

    #[test]
    fn balance_examples() {
        let mut g = Graph::<f64>::new();
        // uniform probabilities, every expert assigned to exactly half the tokens
        let probs = g.constant(Tensor::new(vec![4, 4], vec![0.25; 16]).unwrap());
        let sets = vec![vec![0, 1], vec![2, 3], vec![0, 1], vec![2, 3]];
        let b = balance_loss(&mut g, probs, &sets).unwrap();
        assert_eq!(g.scalar(b), 0.5);

        let mut collapsed = vec![0.0; 16];
        for r in 0..4 {
            collapsed[r * 4] = 1.0;
        }
        let probs = g.constant(Tensor::new(vec![4, 4], collapsed).unwrap());
        let b = balance_loss(&mut g, probs, &vec![vec![0, 1]; 4]).unwrap();
        assert_eq!(g.scalar(b), 1.0);
        assert!(g.scalar(b) > 0.5);

        let probs = g.constant(Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap());
        let b = balance_loss(&mut g, probs, &[vec![0]]).unwrap();
        assert_eq!(g.scalar(b), 0.9);
        assert!(balance_loss(&mut g, probs, &[]).is_err());
    }

    #[test]
    fn total_examples() {
        let mut g = Graph::<f64>::new();
        let ntp = g.constant(Tensor::scalar(1.3863));
        let erl = g.constant(Tensor::scalar(-2.4495));
        let bal = g.constant(Tensor::scalar(0.5));
        let (t, b) = total_loss(
            &mut g,
            ntp,
            Some(erl),
            bal,
            LossCoefficients::default(),
            vec![],
        )
        .unwrap();
        assert!((g.scalar(t) - (-0.5632)).abs() < 1e-12);
        assert_eq!(
            b.total,
            b.ntp + b.lambda_erl * b.erl + b.lambda_balance * b.balance
        );

        let zero = LossCoefficients {
            erl: 0.0,
            balance: 1.0,
        };
        let (_, b) = total_loss(&mut g, ntp, Some(erl), bal, zero, vec![]).unwrap();
        assert_eq!(b.total, 1.3863 + 0.5);
        let (_, b) = total_loss(
            &mut g,
            ntp,
            None,
            bal,
            LossCoefficients {
                erl: 7.0,
                balance: 1.0,
            },
            vec![],
        )
        .unwrap();
        assert_eq!(b.total, 1.3863 + 0.5);
        assert_eq!(b.erl, 0.0);

        let nan = g.constant(Tensor::scalar(f64::NAN));
        match total_loss(
            &mut g,
            ntp,
            Some(erl),
            nan,
            LossCoefficients::default(),
            vec![],
        ) {
            Err(Error::Numeric(m)) => assert!(m.contains("balance")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loss_gradients_over_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let adv = compute_advantages(&[1.0, 0.5, 0.0], StdKind::Population).unwrap();
            let rows = 6;
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..5)).collect();
            let pad: Vec<bool> = (0..rows).map(|i| i == 2).collect();
            let sets: Vec<Vec<usize>> = (0..rows).map(|i| vec![i % 4, (i + 1) % 4]).collect();
            let mut params: Vec<(String, Tensor<f64>)> = (0..3)
                .map(|j| {
                    let d: Vec<f64> = (0..rows * 5).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    (format!("tier{j}"), Tensor::new(vec![rows, 5], d).unwrap())
                })
                .collect();
            let router: Vec<f64> = (0..rows * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            params.push(("router".into(), Tensor::new(vec![rows, 4], router).unwrap()));
            let report = finite_diff_check(
                |g, v| {
                    let mut avgs = Vec::new();
                    let mut ntp = None;
                    for j in 0..3 {
                        let lp = g.target_log_probs(v[j], &targets)?;
                        if j == 0 {
                            ntp = Some(ntp_from_logprobs(g, lp, &pad)?);
                        }
                        let per_seq = sequence_avg_logprobs(g, lp, 3, &pad)?;
                        avgs.push(g.dot_const(per_seq, &[0.5, 0.5])?);
                    }
                    let stacked = g.stack(&avgs)?;
                    let erl = erl_loss(g, stacked, &adv)?;
                    let probs = g.softmax_rows(v[3])?;
                    let bal = balance_loss(g, probs, &sets)?;
                    let (t, _) = total_loss(
                        g,
                        ntp.unwrap(),
                        Some(erl),
                        bal,
                        LossCoefficients::default(),
                        adv.clone(),
                    )?;
                    Ok(t)
                },
                &mut params,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.worst);
        }
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(
            mut rewards in prop::collection::vec(-10.0f64..10.0, 2..8),
            a in 0.01f64..50.0,
            b in -20.0f64..20.0,
        ) {
            rewards.sort_by(|x, y| y.partial_cmp(x).unwrap());
            rewards.dedup();
            prop_assume!(rewards.len() >= 2);
            prop_assume!(rewards.windows(2).all(|w| w[0] - w[1] > 1e-6));
            let adv = compute_advantages(&rewards, StdKind::Population).unwrap();
            let c = adv.len() as f64;
            let mean = adv.iter().sum::<f64>() / c;
            let std = (adv.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c).sqrt();
            prop_assert!(mean.abs() <= 1e-12);
            prop_assert!((std - 1.0).abs() <= 1e-10);
            let moved: Vec<f64> = rewards.iter().map(|r| a * r + b).collect();
            let adv2 = compute_advantages(&moved, StdKind::Population).unwrap();
            for (x, y) in adv.iter().zip(&adv2) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }

        #[test]
        fn erl_vanishes_on_equal_tiers(v in -20.0f64..0.0, c in 2usize..6) {
            let adv = RewardSchedule::linear(c).advantages(StdKind::Population).unwrap();
            let mut g = Graph::<f64>::new();
            let l = g.constant(Tensor::vector(vec![v; c]));
            let e = erl_loss(&mut g, l, &adv).unwrap();
            prop_assert!(g.scalar(e).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }
}
