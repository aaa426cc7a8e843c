//! Component subset selection: top-k by singleton score, exhaustive
//! maximum-fidelity search, Monte-Carlo search, and the (k, eta) existence
//! check. Finding the true size-k optimum is a binary quadratic program, so
//! exhaustive search is budget-guarded and Monte-Carlo sampling provides a
//! lower bound that is often tight at desk scale.

use crate::fidelity::{singleton_scores, subset_fidelity, Csm, FidelityError, SingletonScores};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

/// Subsets an exhaustive search may enumerate before giving up.
pub const DEFAULT_ENUMERATION_BUDGET: usize = 2_000_000;

/// Monte-Carlo draws per subset size; a ten-fold smaller count is the usual
/// compromise for wide layers.
pub const DEFAULT_MONTE_CARLO_SAMPLES: usize = 1000;

#[derive(Debug)]
pub enum SelectionError {
    /// The exhaustive search would enumerate more subsets than allowed;
    /// callers should fall back to Monte-Carlo estimation.
    BudgetExceeded { subsets: u128, budget: usize },
    BadK { k: usize, dim: usize },
    Fidelity(FidelityError),
}

impl std::fmt::Display for SelectionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionError::BudgetExceeded { subsets, budget } => {
                write!(f, "enumeration of {subsets} subsets exceeds budget {budget}")
            }
            SelectionError::BadK { k, dim } => {
                write!(f, "subset size {k} invalid for {dim} components")
            }
            SelectionError::Fidelity(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SelectionError {}

impl From<FidelityError> for SelectionError {
    fn from(e: FidelityError) -> Self {
        SelectionError::Fidelity(e)
    }
}

/// How a component set was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    NaiveTopK,
    Exhaustive,
    MonteCarlo,
}

impl std::fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SelectionMethod::NaiveTopK => write!(f, "naive_top_k"),
            SelectionMethod::Exhaustive => write!(f, "exhaustive"),
            SelectionMethod::MonteCarlo => write!(f, "monte_carlo"),
        }
    }
}

/// A selected high-fidelity component set for one (layer, channel).
#[derive(Debug, Clone)]
pub struct HiFiSet {
    pub layer: usize,
    pub channel: usize,
    /// Sorted component indices, `|indices| = k`.
    pub indices: Vec<usize>,
    pub k: usize,
    pub fidelity: f64,
    pub method: SelectionMethod,
}

/// Indices of the `k` largest singleton fidelities; ties break to the lower
/// index so selection is deterministic.
pub fn naive_topk(scores: &SingletonScores, k: usize) -> Result<Vec<usize>, SelectionError> {
    let dim = scores.fidelity.len();
    if k == 0 || k > dim {
        return Err(SelectionError::BadK { k, dim });
    }
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        scores.fidelity[b]
            .partial_cmp(&scores.fidelity[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Top-k selection evaluated as a [`HiFiSet`] (fidelity of the selected set,
/// not the sum of singleton scores).
pub fn naive_topk_set(csm: &Csm, k: usize, lambda: f64) -> Result<HiFiSet, SelectionError> {
    let scores = singleton_scores(csm);
    let indices = naive_topk(&scores, k)?;
    let fs = subset_fidelity(csm, &indices, lambda)?;
    Ok(HiFiSet {
        layer: csm.layer,
        channel: csm.channel,
        indices,
        k,
        fidelity: fs.fidelity,
        method: SelectionMethod::NaiveTopK,
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut out: u128 = 1;
    for i in 0..k {
        out = out.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    out
}

/// Advances `combo` to the next k-combination of `0..n` in lexicographic
/// order; returns false after the last one.
fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in (i + 1)..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// True size-k maximum-fidelity subset by enumeration. Ties break to the
/// lexicographically smallest subset.
///
/// # Errors
/// `BudgetExceeded` when `C(dim, k)` passes `budget` — callers should switch
/// to [`monte_carlo_mfs`].
pub fn exhaustive_mfs(
    csm: &Csm,
    k: usize,
    lambda: f64,
    budget: usize,
) -> Result<HiFiSet, SelectionError> {
    let dim = csm.dim();
    if k == 0 || k > dim {
        return Err(SelectionError::BadK { k, dim });
    }
    let subsets = binomial(dim, k);
    if subsets > budget as u128 {
        return Err(SelectionError::BudgetExceeded { subsets, budget });
    }
    let mut combo: Vec<usize> = (0..k).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let fs = subset_fidelity(csm, &combo, lambda)?;
        // Strict improvement only: lexicographic enumeration order makes the
        // first of any tied subsets win.
        let better = match &best {
            None => true,
            Some((bf, _)) => fs.fidelity > *bf,
        };
        if better {
            best = Some((fs.fidelity, combo.clone()));
        }
        if !next_combination(&mut combo, dim) {
            break;
        }
    }
    let (fidelity, indices) = best.expect("at least one subset evaluated");
    Ok(HiFiSet {
        layer: csm.layer,
        channel: csm.channel,
        indices,
        k,
        fidelity,
        method: SelectionMethod::Exhaustive,
    })
}

fn random_subset(rng: &mut ChaCha12Rng, dim: usize, k: usize) -> Vec<usize> {
    // Partial Fisher-Yates over the index array.
    let mut idx: Vec<usize> = (0..dim).collect();
    for i in 0..k {
        let j = i + (rand::Rng::gen_range(rng, 0..(dim - i) as u64) as usize);
        idx.swap(i, j);
    }
    let mut picked = idx[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Best subset among `samples` uniform random size-k subsets. Always a lower
/// bound on the exhaustive optimum; deterministic per seed.
pub fn monte_carlo_mfs(
    csm: &Csm,
    k: usize,
    samples: usize,
    seed: u64,
    lambda: f64,
) -> Result<HiFiSet, SelectionError> {
    let dim = csm.dim();
    if k == 0 || k > dim {
        return Err(SelectionError::BadK { k, dim });
    }
    assert!(samples >= 1);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..samples {
        let subset = random_subset(&mut rng, dim, k);
        let fs = subset_fidelity(csm, &subset, lambda)?;
        let better = match &best {
            None => true,
            Some((bf, bs)) => fs.fidelity > *bf || (fs.fidelity == *bf && subset < *bs),
        };
        if better {
            best = Some((fs.fidelity, subset));
        }
    }
    let (fidelity, indices) = best.expect("at least one subset evaluated");
    Ok(HiFiSet {
        layer: csm.layer,
        channel: csm.channel,
        indices,
        k,
        fidelity,
        method: SelectionMethod::MonteCarlo,
    })
}

/// Search configuration for [`hifi_check`] and sweeps.
#[derive(Debug, Clone, Copy)]
pub enum SearchStrategy {
    NaiveTopK,
    Exhaustive { budget: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

/// Finds the strategy's best size-k set and returns it only if its fidelity
/// reaches `eta`; `None` means no (k, eta) set exists under that strategy.
pub fn hifi_check(
    csm: &Csm,
    k: usize,
    eta: f64,
    strategy: SearchStrategy,
    lambda: f64,
) -> Result<Option<HiFiSet>, SelectionError> {
    assert!((0.0..1.0).contains(&eta), "eta must be in (0, 1)");
    let set = match strategy {
        SearchStrategy::NaiveTopK => naive_topk_set(csm, k, lambda)?,
        SearchStrategy::Exhaustive { budget } => exhaustive_mfs(csm, k, lambda, budget)?,
        SearchStrategy::MonteCarlo { samples, seed } => {
            monte_carlo_mfs(csm, k, samples, seed, lambda)?
        }
    };
    Ok(if set.fidelity >= eta { Some(set) } else { None })
}

/// One row of a fidelity-vs-size sweep.
#[derive(Debug, Clone, Serialize)]
pub struct MfsSweepRow {
    pub layer: usize,
    pub channel: usize,
    pub k: usize,
    pub method: SelectionMethod,
    pub fidelity: f64,
    pub indices: Vec<usize>,
}

/// Max fidelity for every k in `1..=k_max` under one strategy.
pub fn mfs_sweep(
    csm: &Csm,
    k_max: usize,
    strategy: SearchStrategy,
    lambda: f64,
) -> Result<Vec<MfsSweepRow>, SelectionError> {
    let mut rows = Vec::with_capacity(k_max);
    for k in 1..=k_max.min(csm.dim()) {
        let set = match strategy {
            SearchStrategy::NaiveTopK => naive_topk_set(csm, k, lambda)?,
            SearchStrategy::Exhaustive { budget } => exhaustive_mfs(csm, k, lambda, budget)?,
            SearchStrategy::MonteCarlo { samples, seed } => {
                // Vary the stream per k but keep it reproducible.
                monte_carlo_mfs(csm, k, samples, seed.wrapping_add(k as u64), lambda)?
            }
        };
        rows.push(MfsSweepRow {
            layer: set.layer,
            channel: set.channel,
            k,
            method: set.method,
            fidelity: set.fidelity,
            indices: set.indices,
        });
    }
    Ok(rows)
}
