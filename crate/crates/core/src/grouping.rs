//! Rank-ordered expert tiers and the layers they apply to.
//!
//! A tier is a set of experts picked from a token's descending expert
//! ranking. Tier order is preference order: tier 0 is the most preferred.
//! Rank positions in configuration are 1-based (rank 1 is the highest
//! logit); everything in code is 0-based.

use std::collections::{BTreeSet, VecDeque};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::rank_experts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingKind {
    /// Rank blocks spread evenly from the top block to the bottom block.
    #[default]
    Uniform,
    /// Consecutive blocks from the top of the ranking.
    HighOnly,
    /// Experts shuffled at random before partitioning; ranking ignored.
    Random,
    /// Tiers of differing sizes at configured rank positions.
    Uneven,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    /// Each token is grouped by its own ranking.
    #[default]
    DynamicPerToken,
    /// All tokens share one ranking computed from the mean routing
    /// probabilities over a window of batches.
    StaticAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingStrategy {
    pub kind: GroupingKind,
    /// Number of tiers `C`.
    pub groups: usize,
    /// Tier sizes for `uneven`; the other kinds use `K` for every tier.
    pub sizes: Option<Vec<usize>>,
    /// 1-based starting rank of each tier (`uniform` and `uneven`).
    pub positions: Option<Vec<usize>>,
    /// Seed of the `random` kind.
    pub seed: u64,
    pub mode: GroupingMode,
    /// `random` only: one shuffle per batch instead of one per token.
    pub random_per_batch: bool,
    /// `static_average` only: number of batches in the averaging window,
    /// including the current one.
    pub static_window: usize,
}

impl Default for GroupingStrategy {
    fn default() -> Self {
        GroupingStrategy {
            kind: GroupingKind::Uniform,
            groups: 3,
            sizes: None,
            positions: None,
            seed: 0,
            mode: GroupingMode::DynamicPerToken,
            random_per_batch: false,
            static_window: 1,
        }
    }
}

/// The `C` expert index sets of one token, in preference order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierGroupAssignment {
    pub groups: Vec<Vec<usize>>,
}

impl TierGroupAssignment {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.groups.iter().flatten().all(|e| seen.insert(*e))
    }
}

/// Rank blocks for `C` tiers of `K` experts out of `n`.
///
/// Ranks are cut into `⌊n/K⌋` contiguous blocks. Tier `i < C−1` takes block
/// `⌊i·(B−1)/(C−1)⌋`; the last tier is the bottom `K` ranks. With `C = 1`
/// only the top block is returned.
pub fn default_block_positions(n: usize, k: usize, c: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || c == 0 {
        return Err(Error::invalid(
            "block size and group count must be positive",
        ));
    }
    if c * k > n {
        return Err(Error::invalid(format!("C·K exceeds n: {c}·{k} > {n}")));
    }
    if c == 1 {
        return Ok(vec![0..k]);
    }
    let blocks = n / k;
    let mut out: Vec<Range<usize>> = (0..c - 1)
        .map(|i| {
            let b = i * (blocks - 1) / (c - 1);
            b * k..b * k + k
        })
        .collect();
    out.push(n - k..n);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    Ranked(Vec<Range<usize>>),
    Random(Vec<usize>),
}

/// A strategy resolved against a concrete expert count and top-K.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssigner {
    layout: Layout,
    seed: u64,
    n: usize,
}

fn check_ranges(ranges: &[Range<usize>], n: usize) -> Result<()> {
    for (i, r) in ranges.iter().enumerate() {
        if r.is_empty() || r.end > n {
            return Err(Error::invalid(format!(
                "tier {} covers ranks {}..={} outside 1..={n}",
                i + 1,
                r.start + 1,
                r.end
            )));
        }
        for (j, other) in ranges[..i].iter().enumerate() {
            if r.start < other.end && other.start < r.end {
                return Err(Error::invalid(format!(
                    "tiers {} and {} overlap",
                    j + 1,
                    i + 1
                )));
            }
        }
    }
    Ok(())
}

impl GroupingStrategy {
    /// Tier sizes for top-K `k`.
    pub fn sizes_for(&self, k: usize) -> Vec<usize> {
        match (&self.kind, &self.sizes) {
            (GroupingKind::Uneven, Some(s)) => s.clone(),
            _ => vec![k; self.groups],
        }
    }

    pub fn resolve(&self, n: usize, k: usize) -> Result<GroupAssigner> {
        let c = self.groups;
        if c == 0 {
            return Err(Error::invalid("group count must be at least 1"));
        }
        if k == 0 || k > n {
            return Err(Error::invalid(format!(
                "top-K needs 1 <= K <= {n}, got {k}"
            )));
        }
        let sizes = self.sizes_for(k);
        if sizes.len() != c || sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "need {c} positive tier sizes, got {sizes:?}"
            )));
        }
        let total: usize = sizes.iter().sum();
        if total > n {
            return Err(Error::invalid(format!(
                "tiers need {total} experts but only {n} exist (C·K exceeds n)"
            )));
        }
        let from_positions = |pos: &[usize]| -> Result<Vec<Range<usize>>> {
            if pos.len() != c || pos.contains(&0) {
                return Err(Error::invalid(format!(
                    "need {c} 1-based tier positions, got {pos:?}"
                )));
            }
            Ok(pos
                .iter()
                .zip(&sizes)
                .map(|(&p, &s)| p - 1..p - 1 + s)
                .collect())
        };
        let layout = match self.kind {
            GroupingKind::Uniform => Layout::Ranked(match &self.positions {
                Some(p) => from_positions(p)?,
                None => default_block_positions(n, k, c)?,
            }),
            GroupingKind::HighOnly => Layout::Ranked((0..c).map(|i| i * k..(i + 1) * k).collect()),
            GroupingKind::Uneven => Layout::Ranked(match &self.positions {
                Some(p) => from_positions(p)?,
                // Starts of the uniform blocks sized by the top tier.
                None => {
                    let starts: Vec<usize> = default_block_positions(n, sizes[0], c)?
                        .into_iter()
                        .map(|r| r.start + 1)
                        .collect();
                    from_positions(&starts)?
                }
            }),
            GroupingKind::Random => Layout::Random(sizes),
        };
        if let Layout::Ranked(ranges) = &layout {
            check_ranges(ranges, n)?;
        }
        Ok(GroupAssigner {
            layout,
            seed: self.seed,
            n,
        })
    }
}

fn mix(seed: u64, key: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl GroupAssigner {
    pub fn num_groups(&self) -> usize {
        match &self.layout {
            Layout::Ranked(r) => r.len(),
            Layout::Random(s) => s.len(),
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self.layout, Layout::Random(_))
    }

    /// Rank ranges of the ranked layouts; `None` for random grouping.
    pub fn rank_ranges(&self) -> Option<&[Range<usize>]> {
        match &self.layout {
            Layout::Ranked(r) => Some(r),
            Layout::Random(_) => None,
        }
    }

    /// Groups for one ranking. `draw` selects the random shuffle and is
    /// ignored by ranked layouts.
    pub fn assign(&self, ranking: &[usize], draw: u64) -> Result<TierGroupAssignment> {
        if ranking.len() != self.n {
            return Err(Error::invalid(format!(
                "ranking over {} experts, grouping resolved for {}",
                ranking.len(),
                self.n
            )));
        }
        let groups = match &self.layout {
            Layout::Ranked(ranges) => ranges.iter().map(|r| ranking[r.clone()].to_vec()).collect(),
            Layout::Random(sizes) => {
                let mut order: Vec<usize> = (0..self.n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, draw));
                order.shuffle(&mut rng);
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&s| {
                        let g = order[start..start + s].to_vec();
                        start += s;
                        g
                    })
                    .collect()
            }
        };
        Ok(TierGroupAssignment { groups })
    }
}

/// Groups one ranking under `strategy` with top-K `k`. Random strategies use
/// draw 0, so repeated calls agree.
pub fn assign_groups(
    ranking: &[usize],
    strategy: &GroupingStrategy,
    k: usize,
) -> Result<TierGroupAssignment> {
    strategy.resolve(ranking.len(), k)?.assign(ranking, 0)
}

/// Which layers run tier-restricted routing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    #[default]
    Full,
    /// Layers 1–4.
    Shallow,
    /// The last four layers.
    Deep,
    /// Layers ⌈L/4⌉, 2⌈L/4⌉, 3⌈L/4⌉ and L.
    Even,
    /// A caller-provided set of 1-based layer indices; may be empty.
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerScope {
    pub kind: ScopeKind,
    /// 1-based layer indices.
    pub layers: BTreeSet<usize>,
}

impl LayerScope {
    pub fn contains(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

pub fn resolve_layer_scope(kind: &ScopeKind, num_layers: usize) -> Result<LayerScope> {
    if num_layers == 0 {
        return Err(Error::invalid("model needs at least one layer"));
    }
    let l = num_layers;
    let layers: BTreeSet<usize> = match kind {
        ScopeKind::Full => (1..=l).collect(),
        ScopeKind::Shallow => (1..=l.min(4)).collect(),
        ScopeKind::Deep => (l.saturating_sub(3).max(1)..=l).collect(),
        ScopeKind::Even => {
            let step = l.div_ceil(4);
            [step, 2 * step, 3 * step, l]
                .into_iter()
                .filter(|&x| x <= l)
                .collect()
        }
        ScopeKind::Explicit(set) => {
            if let Some(bad) = set.iter().find(|&&x| x == 0 || x > l) {
                return Err(Error::invalid(format!("layer {bad} outside 1..={l}")));
            }
            set.iter().copied().collect()
        }
    };
    Ok(LayerScope {
        kind: kind.clone(),
        layers,
    })
}

/// Windowed mean routing probabilities per layer, for the
/// `static_average` grouping mode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingStats {
    window: usize,
    history: Vec<VecDeque<Vec<f64>>>,
}

impl RoutingStats {
    pub fn new(num_layers: usize, window: usize) -> Self {
        RoutingStats {
            window: window.max(1),
            history: vec![VecDeque::new(); num_layers],
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn history(&self, layer: usize) -> impl Iterator<Item = &Vec<f64>> {
        self.history[layer].iter()
    }

    /// Mean of the stored batch means plus `current`, over at most
    /// `window` batches.
    pub fn windowed_mean(&self, layer: usize, current: &[f64]) -> Vec<f64> {
        let past: Vec<&Vec<f64>> = self.history[layer]
            .iter()
            .rev()
            .take(self.window - 1)
            .collect();
        let count = (past.len() + 1) as f64;
        let mut mean = current.to_vec();
        for p in past {
            for (m, &x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        mean
    }

    pub fn ranking(&self, layer: usize, current: &[f64]) -> Vec<usize> {
        rank_experts(&self.windowed_mean(layer, current))
    }

    pub fn push(&mut self, layer: usize, batch_mean: Vec<f64>) {
        let h = &mut self.history[layer];
        h.push_back(batch_mean);
        while h.len() > self.window.saturating_sub(1) {
            h.pop_front();
        }
    }

    pub(crate) fn restore(&mut self, layer: usize, entries: Vec<Vec<f64>>) {
        self.history[layer] = entries.into();
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn one_based(r: &[Range<usize>]) -> Vec<(usize, usize)> {
        r.iter().map(|r| (r.start + 1, r.end)).collect()
    }

    #[test]
    fn block_recipes() {
        assert_eq!(
            one_based(&default_block_positions(64, 6, 3).unwrap()),
            vec![(1, 6), (25, 30), (59, 64)]
        );
        assert_eq!(
            one_based(&default_block_positions(256, 8, 3).unwrap()),
            vec![(1, 8), (121, 128), (249, 256)]
        );
        assert_eq!(
            one_based(&default_block_positions(64, 6, 4).unwrap()),
            vec![(1, 6), (19, 24), (37, 42), (59, 64)]
        );
        assert_eq!(
            one_based(&default_block_positions(64, 6, 2).unwrap()),
            vec![(1, 6), (59, 64)]
        );
        assert_eq!(
            one_based(&default_block_positions(64, 6, 1).unwrap()),
            vec![(1, 6)]
        );
        assert_eq!(
            one_based(&default_block_positions(16, 2, 4).unwrap()),
            vec![(1, 2), (5, 6), (9, 10), (15, 16)]
        );
        assert!(matches!(
            default_block_positions(16, 2, 9),
            Err(Error::InvalidArgument(m)) if m.contains("C·K exceeds n")
        ));
    }

    #[test]
    fn uniform_assignment_follows_rank_blocks() {
        // 1-based ranking [5,2,7,1,8,3,6,4]
        let ranking: Vec<usize> = [5, 2, 7, 1, 8, 3, 6, 4].iter().map(|x| x - 1).collect();
        let s = GroupingStrategy::default();
        let a = assign_groups(&ranking, &s, 2).unwrap();
        let one: Vec<Vec<usize>> = a
            .groups
            .iter()
            .map(|g| g.iter().map(|e| e + 1).collect())
            .collect();
        // blocks (1–2), (3–4), (7–8)
        assert_eq!(one, vec![vec![5, 2], vec![7, 1], vec![6, 4]]);
    }

    #[test]
    fn high_only_and_uneven_layouts() {
        let ranking: Vec<usize> = (0..64).collect();
        let s = GroupingStrategy {
            kind: GroupingKind::HighOnly,
            ..Default::default()
        };
        let a = assign_groups(&ranking, &s, 6).unwrap();
        assert_eq!(a.groups[0], (0..6).collect::<Vec<_>>());
        assert_eq!(a.groups[1], (6..12).collect::<Vec<_>>());
        assert_eq!(a.groups[2], (12..18).collect::<Vec<_>>());

        let s = GroupingStrategy {
            kind: GroupingKind::Uneven,
            sizes: Some(vec![6, 3, 3]),
            ..Default::default()
        };
        let ranges = s.resolve(64, 6).unwrap().rank_ranges().unwrap().to_vec();
        assert_eq!(one_based(&ranges), vec![(1, 6), (25, 27), (59, 61)]);
        let s = GroupingStrategy {
            positions: Some(vec![1, 25, 54]),
            ..s
        };
        let ranges = s.resolve(64, 6).unwrap().rank_ranges().unwrap().to_vec();
        assert_eq!(one_based(&ranges), vec![(1, 6), (25, 27), (54, 56)]);
    }

    #[test]
    fn bad_layouts_are_rejected() {
        let s = GroupingStrategy {
            positions: Some(vec![1, 2, 7]),
            ..Default::default()
        };
        assert!(s.resolve(8, 2).is_err());
        let s = GroupingStrategy {
            positions: Some(vec![1, 4, 8]),
            ..Default::default()
        };
        assert!(s.resolve(8, 2).is_err());
        let s = GroupingStrategy {
            groups: 5,
            ..Default::default()
        };
        assert!(s.resolve(8, 2).is_err());
    }

    #[test]
    fn random_is_seeded() {
        let ranking: Vec<usize> = (0..16).collect();
        let s = GroupingStrategy {
            kind: GroupingKind::Random,
            seed: 9,
            ..Default::default()
        };
        let a = assign_groups(&ranking, &s, 2).unwrap();
        assert_eq!(a, assign_groups(&ranking, &s, 2).unwrap());
        assert!(a.is_disjoint());
        let assigner = s.resolve(16, 2).unwrap();
        let distinct: BTreeSet<Vec<Vec<usize>>> = (0..100)
            .map(|d| assigner.assign(&ranking, d).unwrap().groups)
            .collect();
        assert!(distinct.len() >= 2);
        let by_seed: BTreeSet<Vec<Vec<usize>>> = (0..100)
            .map(|seed| {
                let s = GroupingStrategy { seed, ..s.clone() };
                assign_groups(&ranking, &s, 2).unwrap().groups
            })
            .collect();
        assert!(by_seed.len() >= 2);
    }

    #[test]
    fn layer_scopes() {
        let even = resolve_layer_scope(&ScopeKind::Even, 28).unwrap();
        assert_eq!(
            even.layers.into_iter().collect::<Vec<_>>(),
            vec![7, 14, 21, 28]
        );
        let deep = resolve_layer_scope(&ScopeKind::Deep, 28).unwrap();
        assert_eq!(
            deep.layers.into_iter().collect::<Vec<_>>(),
            vec![25, 26, 27, 28]
        );
        let shallow = resolve_layer_scope(&ScopeKind::Shallow, 28).unwrap();
        assert_eq!(
            shallow.layers.into_iter().collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        let full = resolve_layer_scope(&ScopeKind::Full, 4).unwrap();
        assert_eq!(
            full.layers.into_iter().collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        let small = resolve_layer_scope(&ScopeKind::Even, 2).unwrap();
        assert_eq!(small.layers.into_iter().collect::<Vec<_>>(), vec![1, 2]);
        assert!(resolve_layer_scope(&ScopeKind::Explicit(vec![0]), 4).is_err());
        assert!(resolve_layer_scope(&ScopeKind::Explicit(vec![5]), 4).is_err());
        assert!(resolve_layer_scope(&ScopeKind::Explicit(vec![]), 4)
            .unwrap()
            .is_empty());
        assert!(resolve_layer_scope(&ScopeKind::Full, 0).is_err());
    }

    #[test]
    fn routing_stats_window() {
        let mut s = RoutingStats::new(1, 2);
        assert_eq!(s.windowed_mean(0, &[1.0, 0.0]), vec![1.0, 0.0]);
        s.push(0, vec![0.0, 1.0]);
        assert_eq!(s.windowed_mean(0, &[1.0, 0.0]), vec![0.5, 0.5]);
        s.push(0, vec![0.0, 0.8]);
        // only the most recent batch is retained for window 2
        assert_eq!(s.ranking(0, &[0.6, 0.0]), vec![1, 0]);
    }

    fn strategies() -> impl Strategy<Value = (GroupingStrategy, usize, usize)> {
        (
            prop_oneof![
                Just(GroupingKind::Uniform),
                Just(GroupingKind::HighOnly),
                Just(GroupingKind::Random),
                Just(GroupingKind::Uneven),
            ],
            1usize..5,
            1usize..4,
            any::<u64>(),
        )
            .prop_map(|(kind, c, k, seed)| {
                let n = c * k + 3;
                let sizes = (kind == GroupingKind::Uneven).then(|| {
                    (0..c)
                        .map(|i| if i == 0 { k } else { 1.max(k / 2) })
                        .collect()
                });
                (
                    GroupingStrategy {
                        kind,
                        groups: c,
                        sizes,
                        seed,
                        ..Default::default()
                    },
                    n,
                    k,
                )
            })
    }

    proptest! {
        #[test]
        fn groups_are_disjoint_and_sized(
            (s, n, k) in strategies(),
            shuffle_seed in any::<u64>(),
            draw in any::<u64>(),
        ) {
            let mut ranking: Vec<usize> = (0..n).collect();
            ranking.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
            let a = s.resolve(n, k).unwrap().assign(&ranking, draw).unwrap();
            prop_assert!(a.is_disjoint());
            let sizes: Vec<usize> = a.groups.iter().map(Vec::len).collect();
            prop_assert_eq!(sizes, s.sizes_for(k));
            prop_assert!(a.groups.iter().flatten().all(|&e| e < n));
        }

        #[test]
        fn uniform_tiers_are_rank_monotone(
            logits in prop::collection::vec(-3.0f64..3.0, 12),
            c in 1usize..5,
        ) {
            let ranking = rank_experts(&logits);
            let s = GroupingStrategy { groups: c, ..Default::default() };
            let a = assign_groups(&ranking, &s, 2).unwrap();
            prop_assert_eq!(&a.groups[0], &ranking[..2].to_vec());
            for j in 1..c {
                let min_hi = a.groups[j - 1].iter().map(|&e| logits[e]).fold(f64::INFINITY, f64::min);
                let max_lo = a.groups[j].iter().map(|&e| logits[e]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(min_hi >= max_lo);
            }
        }
    }
}
