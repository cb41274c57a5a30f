//! Scalability arithmetic and resistance-set design: noise-limited
//! resistance steps, channel capacity, level counting for multi-photon
//! resolution, and a branch-and-bound search for sets whose subset sums
//! stay separated after loading by the amplifier input resistance.

use serde::{Deserialize, Serialize};

use crate::circuit::{loaded_resistance, FiringSubset, ReadoutConfig};
use crate::error::{Error, Result};
use crate::waveform::noise_rms;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Comparison slack for separation/budget checks, in ohms. Covers the
/// loaded-domain shrink of knife-edge sets checked at very large input
/// resistances (r_max^2 / R_out) without affecting physical gaps.
pub const GAP_TOLERANCE: f64 = 1e-5;

/// Subset enumeration cap.
const MAX_SUBSETS: u128 = 1 << 24;

/// Node budget for the design search before giving up unproven.
const SEARCH_NODE_BUDGET: u64 = 5_000_000;

/// Resistance steps distinguishable at 1, 2 and 6 sigma of the amplitude
/// spread.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseBudget {
    pub delta_r_th: f64,
    pub delta_r_2sigma: f64,
    pub delta_r_6sigma: f64,
}

impl NoiseBudget {
    pub fn new(delta_r_th: f64, delta_r_2sigma: f64, delta_r_6sigma: f64) -> Result<Self> {
        if !(delta_r_th > 0.0 && delta_r_th <= delta_r_2sigma && delta_r_2sigma <= delta_r_6sigma) {
            return Err(Error::config(
                "noise budget must satisfy 0 < dR_th <= dR_2sigma <= dR_6sigma",
            ));
        }
        Ok(Self {
            delta_r_th,
            delta_r_2sigma,
            delta_r_6sigma,
        })
    }
}

/// Smallest resistance step resolvable against amplifier noise:
/// `v_n / I_B`.
pub fn noise_resistance(noise_volts: f64, bias_current: f64) -> Result<f64> {
    if !(bias_current > 0.0) {
        return Err(Error::config("noise_resistance: bias current must be > 0"));
    }
    Ok(noise_volts / bias_current)
}

/// Channels readable on one coax line: `floor(R_M / dR)`.
pub fn channel_capacity(r_max: f64, delta_r: f64) -> Result<u64> {
    if !(r_max > 0.0) || !(delta_r > 0.0) {
        return Err(Error::config("channel_capacity: inputs must be > 0"));
    }
    Ok((r_max / delta_r).floor() as u64)
}

/// One amplifier configuration for the capacity table. The sigma-step
/// columns are inputs (broadened, published values); thermal quantities are
/// computed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CapacityRow {
    pub r_out: f64,
    pub temperature: f64,
    pub bandwidth: f64,
    pub bias_current: f64,
    pub delta_r_2sigma: f64,
    pub delta_r_6sigma: f64,
    pub r_max: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CapacityFigures {
    pub row: CapacityRow,
    pub noise_volts: f64,
    pub delta_r_th: f64,
    pub ch_6sigma: u64,
    pub ch_2sigma: u64,
}

/// Compute noise voltage, thermal resistance step and channel counts for
/// one amplifier configuration.
pub fn capacity_figures(row: &CapacityRow) -> Result<CapacityFigures> {
    if !(row.r_out > 0.0 && row.temperature > 0.0 && row.bandwidth > 0.0) {
        return Err(Error::config("capacity row: R_out, T and B must be > 0"));
    }
    let v_n = (4.0 * crate::waveform::BOLTZMANN * row.temperature * row.bandwidth * row.r_out).sqrt();
    let delta_r_th = noise_resistance(v_n, row.bias_current)?;
    Ok(CapacityFigures {
        row: *row,
        noise_volts: v_n,
        delta_r_th,
        ch_6sigma: channel_capacity(row.r_max, row.delta_r_6sigma)?,
        ch_2sigma: channel_capacity(row.r_max, row.delta_r_2sigma)?,
    })
}

pub fn capacity_table(rows: &[CapacityRow]) -> Result<Vec<CapacityFigures>> {
    rows.iter().map(capacity_figures).collect()
}

/// The three reference amplifier configurations shipped with the tool: a
/// room-temperature 50 ohm amplifier, the same cooled to 20 K, and a 1 kohm
/// cryogenic front-end.
pub fn reference_amplifiers() -> Vec<CapacityRow> {
    vec![
        CapacityRow {
            r_out: 50.0,
            temperature: 300.0,
            bandwidth: 500e6,
            bias_current: 17e-6,
            delta_r_2sigma: 1.60,
            delta_r_6sigma: 4.70,
            r_max: 50.0,
        },
        CapacityRow {
            r_out: 50.0,
            temperature: 20.0,
            bandwidth: 500e6,
            bias_current: 17e-6,
            delta_r_2sigma: 0.41,
            delta_r_6sigma: 1.20,
            r_max: 50.0,
        },
        CapacityRow {
            r_out: 1000.0,
            temperature: 20.0,
            bandwidth: 500e6,
            bias_current: 17e-6,
            delta_r_2sigma: 1.90,
            delta_r_6sigma: 5.70,
            r_max: 200.0,
        },
    ]
}

/// Round to two significant figures.
fn round_2sf(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let scale = 10f64.powf(x.abs().log10().floor() - 1.0);
    (x / scale).round() * scale
}

/// Broadened sigma steps derived from the thermal step when measured widths
/// are unavailable: the observed room-temperature broadening ratio (4/3 at
/// 2 sigma, x4 at 6 sigma), quoted to two significant figures.
pub fn derived_noise_budget(delta_r_th: f64) -> Result<NoiseBudget> {
    NoiseBudget::new(
        delta_r_th,
        round_2sf(delta_r_th * 4.0 / 3.0),
        round_2sf(delta_r_th * 4.0),
    )
}

/// Number of amplitude levels needed to resolve up to `n` simultaneous
/// firings among `ch` channels: `sum_{j=1..n} C(ch, j)`.
pub fn level_count(channels: u32, photon_order: u32) -> Result<u64> {
    if channels < 1 || photon_order < 1 || photon_order > channels {
        return Err(Error::config(
            "level_count: need 1 <= photon_order <= channels",
        ));
    }
    let mut total: u128 = 0;
    let mut binom: u128 = 1;
    for j in 1..=photon_order as u128 {
        binom = binom
            .checked_mul(channels as u128 + 1 - j)
            .ok_or_else(|| Error::Overflow("level_count: binomial overflow".into()))?
            / j;
        total = total
            .checked_add(binom)
            .ok_or_else(|| Error::Overflow("level_count: sum overflow".into()))?;
    }
    u64::try_from(total).map_err(|_| Error::Overflow("level_count exceeds u64".into()))
}

/// Largest channel count whose equally-spaced level budget fits the
/// resistance headroom: max Ch with `level_count(Ch, n) * delta_r <= r_max`.
pub fn max_channels_multiphoton(delta_r: f64, r_max: f64, photon_order: u32) -> Result<u32> {
    if !(delta_r > 0.0) || !(r_max > 0.0) || photon_order < 1 {
        return Err(Error::config("max_channels_multiphoton: inputs must be positive"));
    }
    let mut best = 0u32;
    for ch in 1..=10_000u32 {
        let order = photon_order.min(ch);
        match level_count(ch, order) {
            Ok(levels) => {
                if levels as f64 * delta_r <= r_max + GAP_TOLERANCE {
                    best = ch;
                } else {
                    break;
                }
            }
            Err(_) => break,
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Set design
// ---------------------------------------------------------------------------

/// Constraints for the resistance-set search. Separation is enforced in the
/// loaded-resistance domain (after the parallel with R_out), which is what
/// the decoder actually discriminates; with R_out -> inf it reduces to raw
/// subset-sum separation.
#[derive(Debug, Clone, Serialize)]
pub struct DesignProblem {
    /// Number of elements to place; 0 means "as many as possible"
    /// (supported for photon_order 1).
    pub n_elements: usize,
    /// Max simultaneous firings whose levels must stay distinct.
    pub photon_order: usize,
    /// Minimum loaded-domain gap between any two subset levels, ohms.
    pub min_separation: f64,
    /// Budget: every subset of size <= photon_order must sum below this.
    pub r_max: f64,
    pub readout: ReadoutConfig,
    /// Search grid step, ohms.
    pub grid_step: f64,
}

impl DesignProblem {
    pub fn validate(&self) -> Result<()> {
        if self.photon_order < 1 {
            return Err(Error::config("design.photon_order: must be >= 1"));
        }
        if !(self.min_separation > 0.0) {
            return Err(Error::config("design.min_separation: must be > 0"));
        }
        if !(self.r_max > 0.0) {
            return Err(Error::config("design.r_max: must be > 0"));
        }
        if !(self.grid_step > 0.0) || self.grid_step > self.min_separation + GAP_TOLERANCE {
            return Err(Error::config(
                "design.grid_step: must be positive and no larger than min_separation",
            ));
        }
        if self.n_elements == 0 && self.photon_order != 1 {
            return Err(Error::config(
                "design.n_elements: 0 (maximize) is supported for photon_order 1 only",
            ));
        }
        Ok(())
    }

    /// Default grid: a quarter of the required separation.
    pub fn default_grid_step(min_separation: f64) -> f64 {
        min_separation / 4.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignSolution {
    pub resistances: Vec<f64>,
    /// Smallest loaded-domain gap over all level pairs.
    pub min_loaded_separation: f64,
    /// Every subset of size <= photon_order with its loaded resistance,
    /// sorted by loaded value.
    pub levels: Vec<(FiringSubset, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub enum DesignOutcome {
    Solution(DesignSolution),
    /// No feasible set found. `max_elements_found` is the deepest partial
    /// set reached; `proven` is false when the node budget ran out first.
    Infeasible {
        max_elements_found: usize,
        proven: bool,
    },
}

/// Verdict of the exhaustive checker.
#[derive(Debug, Clone, Serialize)]
pub enum Verdict {
    Pass {
        min_gap: f64,
    },
    Fail {
        first: FiringSubset,
        second: FiringSubset,
        gap: f64,
    },
    /// A subset blows the resistance budget.
    OverBudget {
        subset: FiringSubset,
        sum: f64,
    },
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass { .. })
    }
}

fn count_subsets(n: usize, k: usize) -> u128 {
    let mut total: u128 = 1; // empty set
    let mut binom: u128 = 1;
    for j in 1..=k.min(n) {
        binom = binom * (n + 1 - j) as u128 / j as u128;
        total += binom;
        if total > MAX_SUBSETS {
            return total;
        }
    }
    total
}

/// Exhaustively enumerate all subsets of size <= `photon_order`, map each
/// through the load, and check every pairwise gap and every budget. This is
/// the brute-force oracle the search must agree with.
pub fn verify_set(resistances: &[f64], problem: &DesignProblem) -> Result<Verdict> {
    problem.validate()?;
    if resistances.is_empty() {
        return Err(Error::config("verify_set: empty resistance list"));
    }
    let n = resistances.len();
    let k = problem.photon_order.min(n);
    if count_subsets(n, k) > MAX_SUBSETS {
        return Err(Error::SizeLimit(format!(
            "verify_set: more than {MAX_SUBSETS} subsets for n={n}, k={k}"
        )));
    }

    // (raw sum, member mask), empty set included as the baseline level.
    let mut sums: Vec<(f64, u32)> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    enumerate_sums(resistances, k, 0, 0.0, 0, &mut stack, &mut sums);

    for (sum, mask) in &sums {
        if *mask != 0 && *sum > problem.r_max + GAP_TOLERANCE {
            return Ok(Verdict::OverBudget {
                subset: mask_to_subset(*mask),
                sum: *sum,
            });
        }
    }

    let mut loaded: Vec<(f64, u32)> = sums
        .iter()
        .map(|(s, m)| (loaded_resistance(*s, &problem.readout), *m))
        .collect();
    #[cfg(feature = "parallel")]
    loaded.par_sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    #[cfg(not(feature = "parallel"))]
    loaded.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    let mut min_gap = f64::INFINITY;
    for w in loaded.windows(2) {
        let gap = w[1].0 - w[0].0;
        if gap < problem.min_separation - GAP_TOLERANCE {
            return Ok(Verdict::Fail {
                first: mask_to_subset(w[0].1),
                second: mask_to_subset(w[1].1),
                gap,
            });
        }
        min_gap = min_gap.min(gap);
    }
    Ok(Verdict::Pass { min_gap })
}

/// Sequential twin of [`verify_set`] (identical apart from the sort).
pub fn verify_set_seq(resistances: &[f64], problem: &DesignProblem) -> Result<Verdict> {
    problem.validate()?;
    if resistances.is_empty() {
        return Err(Error::config("verify_set: empty resistance list"));
    }
    let n = resistances.len();
    let k = problem.photon_order.min(n);
    if count_subsets(n, k) > MAX_SUBSETS {
        return Err(Error::SizeLimit(format!(
            "verify_set: more than {MAX_SUBSETS} subsets for n={n}, k={k}"
        )));
    }
    let mut sums: Vec<(f64, u32)> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    enumerate_sums(resistances, k, 0, 0.0, 0, &mut stack, &mut sums);
    for (sum, mask) in &sums {
        if *mask != 0 && *sum > problem.r_max + GAP_TOLERANCE {
            return Ok(Verdict::OverBudget {
                subset: mask_to_subset(*mask),
                sum: *sum,
            });
        }
    }
    let mut loaded: Vec<(f64, u32)> = sums
        .iter()
        .map(|(s, m)| (loaded_resistance(*s, &problem.readout), *m))
        .collect();
    loaded.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let mut min_gap = f64::INFINITY;
    for w in loaded.windows(2) {
        let gap = w[1].0 - w[0].0;
        if gap < problem.min_separation - GAP_TOLERANCE {
            return Ok(Verdict::Fail {
                first: mask_to_subset(w[0].1),
                second: mask_to_subset(w[1].1),
                gap,
            });
        }
        min_gap = min_gap.min(gap);
    }
    Ok(Verdict::Pass { min_gap })
}

fn enumerate_sums(
    resistances: &[f64],
    k: usize,
    next: usize,
    sum: f64,
    mask: u32,
    stack: &mut Vec<usize>,
    out: &mut Vec<(f64, u32)>,
) {
    out.push((sum, mask));
    if stack.len() == k {
        return;
    }
    for i in next..resistances.len() {
        stack.push(i);
        enumerate_sums(resistances, k, i + 1, sum + resistances[i], mask | (1 << i), stack, out);
        stack.pop();
    }
}

fn mask_to_subset(mask: u32) -> FiringSubset {
    FiringSubset::new((0..32).filter(|i| mask & (1 << i) != 0).map(|i| i as u16))
}

struct SearchState {
    nodes: u64,
    deepest: usize,
}

/// Search for a resistance set meeting the problem constraints.
///
/// Candidates are multiples of the grid step, explored depth-first in
/// ascending order with incremental gap/budget checking and a ladder bound
/// for pruning, so the first complete set found is the lexicographically
/// smallest feasible one. Any returned solution passes [`verify_set`].
pub fn design_set(problem: &DesignProblem) -> Result<DesignOutcome> {
    problem.validate()?;
    if problem.n_elements == 0 {
        return Ok(greedy_maximize(problem));
    }
    let n = problem.n_elements;

    let grid: Vec<f64> = {
        let mut g = Vec::new();
        let mut i = 1u64;
        loop {
            let v = i as f64 * problem.grid_step;
            if v > problem.r_max + GAP_TOLERANCE {
                break;
            }
            g.push(v);
            i += 1;
        }
        g
    };
    if grid.len() < n {
        return Ok(DesignOutcome::Infeasible {
            max_elements_found: 0,
            proven: true,
        });
    }

    // One branch per leading element; within a branch the DFS explores
    // candidates in ascending order, so the smallest branch that completes
    // carries the lexicographically smallest feasible set.
    let base_levels: Vec<(f64, usize)> = vec![(0.0, 0)]; // baseline only
    let budget_per_branch = SEARCH_NODE_BUDGET / grid.len().max(1) as u64;
    let run_branch = |first: usize| -> (Option<Vec<f64>>, usize, bool) {
        let mut state = SearchState { nodes: 1, deepest: 0 };
        let mut chosen: Vec<f64> = Vec::with_capacity(n);
        let mut levels = base_levels.clone();
        let found = match admit(problem, &levels, grid[first]) {
            None => None,
            Some(extended) => {
                chosen.push(grid[first]);
                state.deepest = 1;
                levels = extended;
                if n == 1 {
                    Some(chosen)
                } else if try_extend(
                    problem,
                    &grid,
                    first + 1,
                    &mut chosen,
                    &mut levels,
                    &mut state,
                    budget_per_branch,
                ) {
                    Some(chosen)
                } else {
                    None
                }
            }
        };
        (found, state.deepest, state.nodes < budget_per_branch)
    };

    let results: Vec<(Option<Vec<f64>>, usize, bool)> = {
        #[cfg(feature = "parallel")]
        {
            (0..grid.len()).into_par_iter().map(run_branch).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            (0..grid.len()).map(run_branch).collect()
        }
    };

    let mut deepest = 0;
    let mut proven = true;
    for (found, d, within_budget) in &results {
        deepest = deepest.max(*d);
        proven &= *within_budget;
        if let Some(set) = found {
            return Ok(DesignOutcome::Solution(build_solution(set.clone(), problem)?));
        }
    }
    Ok(DesignOutcome::Infeasible {
        max_elements_found: deepest,
        proven,
    })
}

/// DFS: try grid[idx..] as the next element on top of `chosen`.
fn try_extend(
    problem: &DesignProblem,
    grid: &[f64],
    start_idx: usize,
    chosen: &mut Vec<f64>,
    levels: &mut Vec<(f64, usize)>,
    state: &mut SearchState,
    node_budget: u64,
) -> bool {
    let n = problem.n_elements;
    let k = problem.photon_order;
    for idx in start_idx..grid.len() {
        if state.nodes >= node_budget {
            return false;
        }
        state.nodes += 1;
        let v = grid[idx];

        // Ladder bound: remaining elements must each clear the separation
        // in raw ohms, and the resulting top subset must fit the budget.
        // Larger candidates only get worse, so violation prunes the rest.
        let remaining = n - chosen.len() - 1;
        let top = k.min(remaining + 1);
        let mut ladder_sum = 0.0;
        for j in 0..top {
            ladder_sum += v + (remaining - j) as f64 * problem.min_separation;
        }
        if ladder_sum > problem.r_max + GAP_TOLERANCE {
            return false;
        }

        if let Some(new_levels) = admit(problem, levels, v) {
            chosen.push(v);
            state.deepest = state.deepest.max(chosen.len());
            if chosen.len() == n {
                return true;
            }
            let saved = std::mem::replace(levels, new_levels);
            if try_extend(problem, grid, idx + 1, chosen, levels, state, node_budget) {
                return true;
            }
            *levels = saved;
            chosen.pop();
        }
    }
    false
}

/// Check that appending `v` keeps every subset level separated and within
/// budget; returns the extended (raw sum, size) level list on success.
fn admit(problem: &DesignProblem, levels: &[(f64, usize)], v: f64) -> Option<Vec<(f64, usize)>> {
    let k = problem.photon_order;
    let mut extended = levels.to_vec();
    for (sum, size) in levels {
        if *size < k {
            let new_sum = sum + v;
            if new_sum > problem.r_max + GAP_TOLERANCE {
                return None;
            }
            extended.push((new_sum, size + 1));
        }
    }
    let mut loaded: Vec<f64> = extended
        .iter()
        .map(|(s, _)| loaded_resistance(*s, &problem.readout))
        .collect();
    loaded.sort_unstable_by(f64::total_cmp);
    for w in loaded.windows(2) {
        if w[1] - w[0] < problem.min_separation - GAP_TOLERANCE {
            return None;
        }
    }
    Some(extended)
}

/// photon_order 1, unbounded count: first-fit greedy is exact, and fills
/// the budget with an arithmetic progression when the load is negligible.
fn greedy_maximize(problem: &DesignProblem) -> DesignOutcome {
    let mut chosen: Vec<f64> = Vec::new();
    let mut last_loaded = 0.0f64;
    let mut i = 1u64;
    loop {
        let v = i as f64 * problem.grid_step;
        if v > problem.r_max + GAP_TOLERANCE {
            break;
        }
        let l = loaded_resistance(v, &problem.readout);
        if l - last_loaded >= problem.min_separation - GAP_TOLERANCE {
            chosen.push(v);
            last_loaded = l;
        }
        i += 1;
    }
    if chosen.is_empty() {
        return DesignOutcome::Infeasible {
            max_elements_found: 0,
            proven: true,
        };
    }
    match build_solution(chosen, problem) {
        Ok(sol) => DesignOutcome::Solution(sol),
        Err(_) => DesignOutcome::Infeasible {
            max_elements_found: 0,
            proven: true,
        },
    }
}

fn build_solution(resistances: Vec<f64>, problem: &DesignProblem) -> Result<DesignSolution> {
    let k = problem.photon_order.min(resistances.len());
    let mut sums: Vec<(f64, u32)> = Vec::new();
    let mut stack = Vec::new();
    enumerate_sums(&resistances, k, 0, 0.0, 0, &mut stack, &mut sums);
    let mut levels: Vec<(FiringSubset, f64)> = sums
        .iter()
        .filter(|(_, m)| *m != 0)
        .map(|(s, m)| (mask_to_subset(*m), loaded_resistance(*s, &problem.readout)))
        .collect();
    levels.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut min_gap = f64::INFINITY;
    let mut prev = 0.0; // baseline level
    for (_, l) in &levels {
        min_gap = min_gap.min(l - prev);
        prev = *l;
    }
    Ok(DesignSolution {
        resistances,
        min_loaded_separation: min_gap,
        levels,
    })
}
