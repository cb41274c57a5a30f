//! Recover which detectors fired from amplitude data: histogramming,
//! Gaussian mixture fitting, subset assignment, trigger-level scans and
//! per-detector rate extraction.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::circuit::{ideal_amplitude, ArrayConfig, FiringSubset, ReadoutConfig};
use crate::error::{Error, Result};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Default flatness threshold for plateau detection: a scan segment is flat
/// when |d(rate)/d(level)| stays below this fraction of max-rate/level-span.
pub const DEFAULT_PLATEAU_FLATNESS: f64 = 0.05;

/// Binned pulse-amplitude counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeHistogram {
    edges: Vec<f64>,
    counts: Vec<u64>,
}

impl AmplitudeHistogram {
    pub fn new(edges: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        if edges.len() != counts.len() + 1 || counts.is_empty() {
            return Err(Error::config("histogram needs n+1 edges for n bins"));
        }
        if edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("histogram edges must be strictly increasing"));
        }
        Ok(Self { edges, counts })
    }

    /// Uniform binning over the data range (padded a hair at the top so the
    /// maximum lands inside the last bin).
    pub fn from_values(values: &[f64], n_bins: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("no amplitudes to histogram".into()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if lo == hi {
            lo -= 0.5;
            hi += 0.5;
        }
        hi += (hi - lo) * 1e-9;
        Self::from_values_in_range(values, n_bins, lo, hi)
    }

    pub fn from_values_in_range(values: &[f64], n_bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if n_bins == 0 || !(hi > lo) {
            return Err(Error::config("histogram needs n_bins > 0 and hi > lo"));
        }
        let mut counts = vec![0u64; n_bins];
        for v in values {
            if *v >= lo && *v < hi {
                let b = (((v - lo) / (hi - lo)) * n_bins as f64) as usize;
                counts[b.min(n_bins - 1)] += 1;
            }
        }
        let edges = (0..=n_bins)
            .map(|i| lo + (hi - lo) * i as f64 / n_bins as f64)
            .collect();
        Self::new(edges, counts)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_width(&self) -> f64 {
        (self.edges[self.n_bins()] - self.edges[0]) / self.n_bins() as f64
    }

    pub fn center(&self, bin: usize) -> f64 {
        (self.edges[bin] + self.edges[bin + 1]) / 2.0
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn populated_bins(&self) -> usize {
        self.counts.iter().filter(|c| **c > 0).count()
    }
}

/// One fitted amplitude level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelComponent {
    pub mean_volts: f64,
    pub sigma_volts: f64,
    pub weight: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subset: Option<FiringSubset>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual_volts: Option<f64>,
}

/// Gaussian mixture over pulse amplitudes, components ordered by |mean|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelModel {
    pub components: Vec<LevelComponent>,
}

impl LevelModel {
    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read_json(r: impl std::io::Read) -> Result<Self> {
        serde_json::from_reader(r).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Count rate versus trigger level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerScan {
    levels: Vec<f64>,
    rates: Vec<f64>,
}

impl TriggerScan {
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// `level_volts,rate_hz` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "level_volts,rate_hz")?;
        for (l, r) in self.levels.iter().zip(&self.rates) {
            writeln!(w, "{l},{r}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixture fit
// ---------------------------------------------------------------------------

/// Nonlinear least-squares fit of a k-component Gaussian mixture to the
/// binned histogram, as one would fit a persistence-slice histogram.
/// Components come back sorted by |mean|.
pub fn fit_levels(hist: &AmplitudeHistogram, k: usize) -> Result<LevelModel> {
    if k < 1 {
        return Err(Error::config("fit_levels: k must be >= 1"));
    }
    if hist.populated_bins() < 5 * k {
        return Err(Error::config(format!(
            "fit_levels: {} populated bins, need at least {} for k={k}",
            hist.populated_bins(),
            5 * k
        )));
    }
    let n_bins = hist.n_bins();
    let xs: Vec<f64> = (0..n_bins).map(|b| hist.center(b)).collect();
    let ys: Vec<f64> = hist.counts().iter().map(|c| *c as f64).collect();
    let bin_width = hist.bin_width();

    let mut params = initial_mixture_guess(hist, k)?;
    let sigma_floor = bin_width / 4.0;

    // Levenberg-Marquardt on theta = [a_0, mu_0, s_0, a_1, ...].
    let n_par = 3 * k;
    let eval_cost = |p: &[f64]| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(x, y)| (mixture_value(p, *x) - y).powi(2))
            .sum()
    };
    let mut cost = eval_cost(&params);
    let mut lambda = 1e-3;
    for _ in 0..300 {
        let mut jtj = DMatrix::<f64>::zeros(n_par, n_par);
        let mut jtr = DVector::<f64>::zeros(n_par);
        let mut row = vec![0.0f64; n_par];
        for (x, y) in xs.iter().zip(&ys) {
            let mut model = 0.0;
            for c in 0..k {
                let (a, mu, s) = (params[3 * c], params[3 * c + 1], params[3 * c + 2]);
                let z = (x - mu) / s;
                let e = (-0.5 * z * z).exp();
                model += a * e;
                row[3 * c] = e;
                row[3 * c + 1] = a * e * z / s;
                row[3 * c + 2] = a * e * z * z / s;
            }
            let r = model - y;
            for i in 0..n_par {
                jtr[i] += row[i] * r;
                for j in i..n_par {
                    jtj[(i, j)] += row[i] * row[j];
                }
            }
        }
        for i in 0..n_par {
            for j in 0..i {
                jtj[(i, j)] = jtj[(j, i)];
            }
        }
        let mut improved = false;
        for _ in 0..25 {
            let mut damped = jtj.clone();
            for i in 0..n_par {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-30);
            }
            let Some(delta) = damped.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial: Vec<f64> = params.iter().zip(delta.iter()).map(|(p, d)| p + d).collect();
            let mut ok = true;
            for c in 0..k {
                trial[3 * c + 2] = trial[3 * c + 2].abs();
                if trial[3 * c + 2] < sigma_floor {
                    ok = false;
                    break;
                }
            }
            if ok {
                let trial_cost = eval_cost(&trial);
                if trial_cost < cost {
                    let rel = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                    params = trial;
                    cost = trial_cost;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = true;
                    if rel < 1e-12 {
                        return finish_mixture(&params, k, hist, bin_width);
                    }
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    finish_mixture(&params, k, hist, bin_width)
}

fn mixture_value(params: &[f64], x: f64) -> f64 {
    params
        .chunks_exact(3)
        .map(|c| {
            let z = (x - c[1]) / c[2];
            c[0] * (-0.5 * z * z).exp()
        })
        .sum()
}

fn initial_mixture_guess(hist: &AmplitudeHistogram, k: usize) -> Result<Vec<f64>> {
    let n = hist.n_bins();
    let halfwidth = (n / 64).max(1);
    let mut smooth = vec![0.0f64; n];
    for i in 0..n {
        let lo = i.saturating_sub(halfwidth);
        let hi = (i + halfwidth + 1).min(n);
        smooth[i] = hist.counts()[lo..hi].iter().sum::<u64>() as f64 / (hi - lo) as f64;
    }
    let mut maxima: Vec<usize> = (0..n)
        .filter(|&i| {
            smooth[i] > 0.0
                && (i == 0 || smooth[i] > smooth[i - 1])
                && (i + 1 == n || smooth[i] >= smooth[i + 1])
        })
        .collect();
    maxima.sort_by(|a, b| smooth[*b].total_cmp(&smooth[*a]));
    let min_sep = ((n / (4 * k)).max(2)) as isize;
    let mut picked: Vec<usize> = Vec::new();
    for m in maxima {
        if picked.iter().all(|p| (*p as isize - m as isize).abs() >= min_sep) {
            picked.push(m);
        }
        if picked.len() == k {
            break;
        }
    }
    // Fall back to mass quantiles when the smoothed profile shows fewer
    // maxima than components.
    if picked.len() < k {
        let total = hist.total() as f64;
        let mut cum = 0.0;
        let mut q = picked.len();
        for (i, c) in hist.counts().iter().enumerate() {
            cum += *c as f64;
            if q < k && cum >= total * (q as f64 + 0.5) / k as f64 {
                if picked.iter().all(|p| (*p as isize - i as isize).abs() >= 1) {
                    picked.push(i);
                    q += 1;
                }
            }
        }
    }
    if picked.len() < k {
        return Err(Error::Fit(format!(
            "could not seed {k} mixture components from the histogram"
        )));
    }
    picked.sort_unstable();

    let mut params = Vec::with_capacity(3 * k);
    for &p in &picked {
        let height = smooth[p].max(1.0);
        // Half-max walk for a width seed.
        let mut l = p;
        while l > 0 && smooth[l] > height / 2.0 {
            l -= 1;
        }
        let mut r = p;
        while r + 1 < n && smooth[r] > height / 2.0 {
            r += 1;
        }
        let fwhm_bins = (r - l).max(1) as f64;
        let sigma = (fwhm_bins * hist.bin_width() / 2.355).max(hist.bin_width() / 2.0);
        params.extend_from_slice(&[height, hist.center(p), sigma]);
    }
    Ok(params)
}

fn finish_mixture(params: &[f64], k: usize, hist: &AmplitudeHistogram, bin_width: f64) -> Result<LevelModel> {
    let total = hist.total() as f64;
    let mut components: Vec<LevelComponent> = (0..k)
        .map(|c| {
            let (a, mu, s) = (params[3 * c], params[3 * c + 1], params[3 * c + 2].abs());
            LevelComponent {
                mean_volts: mu,
                sigma_volts: s,
                weight: a * s * (2.0 * std::f64::consts::PI).sqrt() / (bin_width * total),
                subset: None,
                residual_volts: None,
            }
        })
        .collect();
    for c in &components {
        if !c.mean_volts.is_finite() || !(c.sigma_volts > 0.0) || !c.sigma_volts.is_finite() {
            return Err(Error::Fit(format!(
                "mixture fit produced invalid component (mean={}, sigma={})",
                c.mean_volts, c.sigma_volts
            )));
        }
    }
    components.sort_by(|a, b| a.mean_volts.abs().total_cmp(&b.mean_volts.abs()));
    for pair in components.windows(2) {
        let pooled = ((pair[0].sigma_volts.powi(2) + pair[1].sigma_volts.powi(2)) / 2.0).sqrt();
        if (pair[1].mean_volts - pair[0].mean_volts).abs() < pooled {
            return Err(Error::Degenerate(format!(
                "means {} and {} are closer than their pooled sigma {}",
                pair[0].mean_volts, pair[1].mean_volts, pooled
            )));
        }
    }
    Ok(LevelModel { components })
}

// ---------------------------------------------------------------------------
// Subset assignment and classification
// ---------------------------------------------------------------------------

fn enumerate_subsets(n_elements: usize, max_order: usize) -> Vec<FiringSubset> {
    let mut out = Vec::new();
    let mut stack: Vec<u16> = Vec::new();
    fn rec(out: &mut Vec<FiringSubset>, stack: &mut Vec<u16>, next: usize, n: usize, left: usize) {
        if !stack.is_empty() {
            out.push(FiringSubset::new(stack.iter().copied()));
        }
        if left == 0 {
            return;
        }
        for i in next..n {
            stack.push(i as u16);
            rec(out, stack, i + 1, n, left - 1);
            stack.pop();
        }
    }
    rec(&mut out, &mut stack, 0, n_elements, max_order.min(n_elements));
    out
}

/// Match each fitted level to the nearest model amplitude over all firing
/// subsets of size <= `max_order`. Assignment is injective; a residual is
/// attached to every component.
pub fn assign_subsets(
    model: &LevelModel,
    array: &ArrayConfig,
    readout: &ReadoutConfig,
    max_order: usize,
) -> Result<LevelModel> {
    if max_order < 1 {
        return Err(Error::config("assign_subsets: max_order must be >= 1"));
    }
    let subsets = enumerate_subsets(array.len(), max_order);
    let amplitudes: Vec<f64> = subsets
        .iter()
        .map(|s| ideal_amplitude(s, array, readout))
        .collect::<Result<_>>()?;

    // Ambiguity gate first: a level with two candidate subsets inside one
    // sigma cannot be decoded.
    for comp in &model.components {
        let close: Vec<&FiringSubset> = subsets
            .iter()
            .zip(&amplitudes)
            .filter(|(_, a)| (comp.mean_volts - **a).abs() <= comp.sigma_volts)
            .map(|(s, _)| s)
            .collect();
        if close.len() > 1 {
            let names: Vec<String> = close.iter().map(|s| s.to_string()).collect();
            return Err(Error::Ambiguous(format!(
                "level at {} V matches {} subsets within one sigma: {}",
                comp.mean_volts,
                close.len(),
                names.join(", ")
            )));
        }
    }

    // Globally greedy by residual, keeping the assignment injective.
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (ci, comp) in model.components.iter().enumerate() {
        for (si, a) in amplitudes.iter().enumerate() {
            pairs.push((ci, si, (comp.mean_volts - a).abs()));
        }
    }
    pairs.sort_by(|x, y| x.2.total_cmp(&y.2));
    let mut comp_taken = vec![false; model.components.len()];
    let mut subset_taken = vec![false; subsets.len()];
    let mut assigned = model.clone();
    let mut n_assigned = 0;
    for (ci, si, resid) in pairs {
        if comp_taken[ci] || subset_taken[si] {
            continue;
        }
        comp_taken[ci] = true;
        subset_taken[si] = true;
        assigned.components[ci].subset = Some(subsets[si].clone());
        assigned.components[ci].residual_volts = Some(resid);
        n_assigned += 1;
        if n_assigned == model.components.len() {
            break;
        }
    }
    if n_assigned < model.components.len() {
        return Err(Error::Ambiguous(format!(
            "only {} of {} levels could be assigned distinct subsets",
            n_assigned,
            model.components.len()
        )));
    }
    Ok(assigned)
}

/// Classify one pulse height: the subset of the nearest level if the peak
/// falls within `sigma_gate` sigmas of it, otherwise `None` (reject).
pub fn classify_pulse(peak: f64, model: &LevelModel, sigma_gate: f64) -> Result<Option<FiringSubset>> {
    if model.components.is_empty() {
        return Err(Error::config("classify_pulse: empty level model"));
    }
    let mut best: Option<(&LevelComponent, f64)> = None;
    for comp in &model.components {
        let d = (peak - comp.mean_volts).abs();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((comp, d));
        }
    }
    let (comp, d) = best.unwrap();
    let subset = comp
        .subset
        .as_ref()
        .ok_or_else(|| Error::config("classify_pulse: model has no subset assignment"))?;
    Ok((d <= sigma_gate * comp.sigma_volts).then(|| subset.clone()))
}

/// Classify a batch of peaks; pure per event and freely parallel.
pub fn classify_pulses(
    peaks: &[f64],
    model: &LevelModel,
    sigma_gate: f64,
) -> Result<Vec<Option<FiringSubset>>> {
    #[cfg(feature = "parallel")]
    {
        peaks
            .par_iter()
            .map(|p| classify_pulse(*p, model, sigma_gate))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        peaks.iter().map(|p| classify_pulse(*p, model, sigma_gate)).collect()
    }
}

// ---------------------------------------------------------------------------
// Trigger scans and plateaus
// ---------------------------------------------------------------------------

/// Count rate versus trigger level: events with |peak| >= |level|, divided
/// by the observation time.
pub fn trigger_scan(peaks: &[f64], levels: &[f64], observation_seconds: f64) -> Result<TriggerScan> {
    if peaks.is_empty() {
        return Err(Error::EmptyInput("trigger_scan: no events".into()));
    }
    if levels.is_empty() {
        return Err(Error::config("trigger_scan: no levels"));
    }
    if !(observation_seconds > 0.0) {
        return Err(Error::config("trigger_scan: observation time must be > 0"));
    }
    let mut mags: Vec<f64> = peaks.iter().map(|p| p.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let rates = levels
        .iter()
        .map(|l| {
            let idx = mags.partition_point(|m| *m < l.abs());
            (mags.len() - idx) as f64 / observation_seconds
        })
        .collect();
    Ok(TriggerScan {
        levels: levels.to_vec(),
        rates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plateau {
    /// Trigger level where the flat region begins (smallest |level|).
    pub level_from: f64,
    /// Trigger level where it ends.
    pub level_to: f64,
    /// Mean rate over the flat region (Hz).
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauReport {
    /// Plateaus ordered by increasing |level| (decreasing rate).
    pub plateaus: Vec<Plateau>,
    /// Telescoped per-level rates: entry k is the rate of events whose
    /// amplitude sits on level k (P_k - P_{k+1}, last entry P_n).
    pub level_rates: Vec<f64>,
}

/// Locate `n_plateaus` flat regions and telescope their heights into
/// per-level rates, using [`DEFAULT_PLATEAU_FLATNESS`].
pub fn plateau_rates(scan: &TriggerScan, n_plateaus: usize) -> Result<PlateauReport> {
    plateau_rates_with_flatness(scan, n_plateaus, DEFAULT_PLATEAU_FLATNESS)
}

pub fn plateau_rates_with_flatness(
    scan: &TriggerScan,
    n_plateaus: usize,
    flatness: f64,
) -> Result<PlateauReport> {
    if n_plateaus == 0 {
        return Err(Error::config("plateau_rates: n_plateaus must be >= 1"));
    }
    if scan.levels.len() < 2 {
        return Err(Error::config("plateau_rates: need at least 2 scan points"));
    }
    // Work in |level| ascending order.
    let mut order: Vec<usize> = (0..scan.levels.len()).collect();
    order.sort_by(|a, b| scan.levels[*a].abs().total_cmp(&scan.levels[*b].abs()));
    let lv: Vec<f64> = order.iter().map(|i| scan.levels[*i].abs()).collect();
    let rt: Vec<f64> = order.iter().map(|i| scan.rates[*i]).collect();
    let signs: Vec<f64> = order.iter().map(|i| scan.levels[*i].signum()).collect();

    let max_rate = rt.iter().cloned().fold(0.0, f64::max);
    let span = lv[lv.len() - 1] - lv[0];
    if !(span > 0.0) || max_rate == 0.0 {
        return Err(Error::Structure("scan has no level span or no counts".into()));
    }
    let threshold = flatness * max_rate / span;

    let mut plateaus: Vec<Plateau> = Vec::new();
    let mut run_start: Option<usize> = None;
    for i in 0..lv.len() - 1 {
        let dl = lv[i + 1] - lv[i];
        let slope = if dl > 0.0 { (rt[i + 1] - rt[i]).abs() / dl } else { f64::INFINITY };
        if slope < threshold {
            run_start.get_or_insert(i);
        } else if let Some(s) = run_start.take() {
            push_plateau(&mut plateaus, &lv, &rt, &signs, s, i);
        }
    }
    if let Some(s) = run_start {
        push_plateau(&mut plateaus, &lv, &rt, &signs, s, lv.len() - 1);
    }

    if plateaus.len() != n_plateaus {
        return Err(Error::Structure(format!(
            "found {} plateaus, expected {n_plateaus}",
            plateaus.len()
        )));
    }
    // Heights must be ordered; telescope them.
    for w in plateaus.windows(2) {
        if w[1].rate > w[0].rate {
            return Err(Error::Structure("plateau heights are not non-increasing".into()));
        }
    }
    let mut level_rates = Vec::with_capacity(n_plateaus);
    for i in 0..n_plateaus {
        let next = plateaus.get(i + 1).map_or(0.0, |p| p.rate);
        level_rates.push(plateaus[i].rate - next);
    }
    Ok(PlateauReport {
        plateaus,
        level_rates,
    })
}

fn push_plateau(
    plateaus: &mut Vec<Plateau>,
    lv: &[f64],
    rt: &[f64],
    signs: &[f64],
    start: usize,
    end: usize,
) {
    let rate = rt[start..=end].iter().sum::<f64>() / (end - start + 1) as f64;
    if rate > 0.0 {
        plateaus.push(Plateau {
            level_from: lv[start] * signs[start],
            level_to: lv[end] * signs[end],
            rate,
        });
    }
}

/// Pointwise `on - off`, floored at zero. Level grids must match.
pub fn dark_subtract(on: &TriggerScan, off: &TriggerScan) -> Result<TriggerScan> {
    if on.levels.len() != off.levels.len()
        || on
            .levels
            .iter()
            .zip(&off.levels)
            .any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1e-30))
    {
        return Err(Error::GridMismatch("on/off scans use different level grids".into()));
    }
    let rates = on
        .rates
        .iter()
        .zip(&off.rates)
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    Ok(TriggerScan {
        levels: on.levels.clone(),
        rates,
    })
}

/// Invert telescoped level rates into per-detector efficiencies through the
/// coherent-state click model: eta_i = -ln(1 - rate_i/f) / mu.
pub fn ode_estimates(
    level_subsets: &[FiringSubset],
    level_rates: &[f64],
    n_detectors: usize,
    mean_photons: f64,
    repetition_rate: f64,
) -> Result<Vec<f64>> {
    if level_subsets.len() != level_rates.len() {
        return Err(Error::config("ode_estimates: one subset per level rate required"));
    }
    if !(mean_photons > 0.0) || !(repetition_rate > 0.0) {
        return Err(Error::config("ode_estimates: mu and f must be > 0"));
    }
    let mut etas = Vec::with_capacity(n_detectors);
    for det in 0..n_detectors as u16 {
        let rate: f64 = level_subsets
            .iter()
            .zip(level_rates)
            .filter(|(s, _)| s.contains(det))
            .map(|(_, r)| r)
            .sum();
        let p = rate / repetition_rate;
        if p >= 1.0 {
            return Err(Error::config(format!(
                "ode_estimates: detector {det} click probability {p} >= 1"
            )));
        }
        etas.push(-(1.0 - p).ln() / mean_photons);
    }
    Ok(etas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{ArrayConfig, Polarity, ReadoutConfig};
    use crate::rng::stream_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn array() -> ArrayConfig {
        ArrayConfig::new(vec![7.81, 14.98], 92.2e-9, 17e-6, 5_000.0, 50.0).unwrap()
    }

    fn readout() -> ReadoutConfig {
        ReadoutConfig::new(50.0, 300.0, 500e6, 49.0, 2.5e9, Polarity::Negative).unwrap()
    }

    fn gaussian_samples(mean: f64, sigma: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0x77, 0);
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                mean + sigma * z
            })
            .collect()
    }

    #[test]
    fn fit_two_component_round_trip() {
        let mut values = gaussian_samples(-0.030, 0.003, 30_000, 1);
        values.extend(gaussian_samples(-0.055, 0.003, 15_000, 2));
        let hist = AmplitudeHistogram::from_values(&values, 160).unwrap();
        let model = fit_levels(&hist, 2).unwrap();
        let c = &model.components;
        assert_eq!(c.len(), 2);
        // Means within 3 standard errors (sigma / sqrt(n)), sigmas within 5%.
        assert!((c[0].mean_volts - (-0.030)).abs() < 3.0 * 0.003 / (30_000f64).sqrt() + 1e-5);
        assert!((c[1].mean_volts - (-0.055)).abs() < 3.0 * 0.003 / (15_000f64).sqrt() + 1e-5);
        assert!((c[0].sigma_volts / 0.003 - 1.0).abs() < 0.05);
        assert!((c[1].sigma_volts / 0.003 - 1.0).abs() < 0.05);
        assert!((c[0].weight / (2.0 / 3.0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn fit_delta_cluster_k1() {
        let values = vec![-0.0301; 5000];
        let mut padded = values.clone();
        // A sprinkle around the spike so 5 bins are populated.
        padded.extend(gaussian_samples(-0.0301, 2e-5, 200, 3));
        let hist = AmplitudeHistogram::from_values(&padded, 64).unwrap();
        let model = fit_levels(&hist, 1).unwrap();
        let c = &model.components[0];
        assert!((c.mean_volts - (-0.0301)).abs() < hist.bin_width());
        assert!(c.sigma_volts < 2.0 * hist.bin_width());
    }

    #[test]
    fn fit_degenerate_components_rejected() {
        // One Gaussian, asked for two: the fitted means collapse.
        let values = gaussian_samples(-0.040, 0.004, 40_000, 4);
        let hist = AmplitudeHistogram::from_values(&values, 120).unwrap();
        match fit_levels(&hist, 2) {
            Err(Error::Degenerate(_)) | Err(Error::Fit(_)) => {}
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn fit_noiseless_levels_reproduce_ideal_amplitudes() {
        let a = array();
        let r = readout();
        let subsets = [
            FiringSubset::new([0]),
            FiringSubset::new([1]),
            FiringSubset::new([0, 1]),
        ];
        let mut values = Vec::new();
        for (i, s) in subsets.iter().enumerate() {
            let v = ideal_amplitude(s, &a, &r).unwrap();
            values.extend(std::iter::repeat(v).take(4000 - i * 500));
        }
        let hist = AmplitudeHistogram::from_values_in_range(&values, 400, -0.090, -0.010).unwrap();
        let model = fit_levels(&hist, 3).unwrap();
        for (comp, s) in model.components.iter().zip(&subsets) {
            let ideal = ideal_amplitude(s, &a, &r).unwrap();
            assert!(
                (comp.mean_volts - ideal).abs() <= hist.bin_width(),
                "level {} vs ideal {}",
                comp.mean_volts,
                ideal
            );
        }
    }

    #[test]
    fn assign_subsets_two_detector_case() {
        let a = array();
        let r = readout();
        let model = LevelModel {
            components: vec![
                LevelComponent { mean_volts: -0.0318, sigma_volts: 3.7e-3, weight: 0.5, subset: None, residual_volts: None },
                LevelComponent { mean_volts: -0.0537, sigma_volts: 3.7e-3, weight: 0.3, subset: None, residual_volts: None },
                LevelComponent { mean_volts: -0.0846, sigma_volts: 3.7e-3, weight: 0.2, subset: None, residual_volts: None },
            ],
        };
        let assigned = assign_subsets(&model, &a, &r, 2).unwrap();
        assert_eq!(assigned.components[0].subset, Some(FiringSubset::new([0])));
        assert_eq!(assigned.components[1].subset, Some(FiringSubset::new([1])));
        assert_eq!(assigned.components[2].subset, Some(FiringSubset::new([0, 1])));
        assert!(assigned.components.iter().all(|c| c.residual_volts.is_some()));
    }

    #[test]
    fn assign_single_element() {
        let a = ArrayConfig::new(vec![7.81], 92.2e-9, 17e-6, 5_000.0, 50.0).unwrap();
        let r = readout();
        let model = LevelModel {
            components: vec![LevelComponent {
                mean_volts: -0.032,
                sigma_volts: 3e-3,
                weight: 1.0,
                subset: None,
                residual_volts: None,
            }],
        };
        let assigned = assign_subsets(&model, &a, &r, 1).unwrap();
        assert_eq!(assigned.components[0].subset, Some(FiringSubset::new([0])));
    }

    #[test]
    fn assign_detects_ambiguity() {
        // Two nearly equal resistances: both singleton amplitudes fall
        // within one sigma of the same fitted level.
        let a = ArrayConfig::new(vec![10.0, 10.2], 92.2e-9, 17e-6, 5_000.0, 50.0).unwrap();
        let r = readout();
        let model = LevelModel {
            components: vec![LevelComponent {
                mean_volts: -0.041,
                sigma_volts: 5e-3,
                weight: 1.0,
                subset: None,
                residual_volts: None,
            }],
        };
        assert!(matches!(assign_subsets(&model, &a, &r, 1), Err(Error::Ambiguous(_))));
    }

    fn assigned_model(means: &[f64], sigma: f64) -> LevelModel {
        LevelModel {
            components: means
                .iter()
                .enumerate()
                .map(|(i, m)| LevelComponent {
                    mean_volts: *m,
                    sigma_volts: sigma,
                    weight: 1.0 / means.len() as f64,
                    subset: Some(FiringSubset::new([i as u16])),
                    residual_volts: None,
                })
                .collect(),
        }
    }

    #[test]
    fn classify_basics() {
        let model = assigned_model(&[-0.030, -0.060], 3e-3);
        assert_eq!(
            classify_pulse(-0.030, &model, 3.0).unwrap(),
            Some(FiringSubset::new([0]))
        );
        // Midway between means 6 sigma apart, gate 3: outside both gates.
        let model6 = assigned_model(&[-0.030, -0.030 - 6.0 * 3e-3], 3e-3);
        assert_eq!(classify_pulse(-0.030 - 3.0 * 3e-3 - 1e-9, &model6, 3.0 - 1e-9).unwrap(), None);
    }

    #[test]
    fn classify_round_trip_at_6_sigma_spacing() {
        // Levels 6 sigma apart, gate 3 sigma: >= 99% of events come back
        // with the generating subset.
        let sigma = 2e-3;
        let means: Vec<f64> = (0..4).map(|i| -0.020 - 6.0 * sigma * i as f64).collect();
        let model = assigned_model(&means, sigma);
        let mut rng = stream_rng(5, 0x99, 0);
        let n = 100_000;
        let mut correct = 0;
        for _ in 0..n {
            let which = (rng.random::<u64>() % 4) as usize;
            let z: f64 = rng.sample(StandardNormal);
            let peak = means[which] + sigma * z;
            if classify_pulse(peak, &model, 3.0).unwrap() == Some(FiringSubset::new([which as u16])) {
                correct += 1;
            }
        }
        let rate = correct as f64 / n as f64;
        assert!(rate >= 0.99, "round-trip rate {rate}");
    }

    #[test]
    fn trigger_scan_basics() {
        let peaks = vec![-0.030, -0.030, -0.055, -0.080];
        let scan = trigger_scan(&peaks, &[-0.010, -0.040, -0.100], 2.0).unwrap();
        assert_eq!(scan.rates(), &[2.0, 1.0, 0.0]);
        // Trigger at zero catches everything.
        let scan0 = trigger_scan(&peaks, &[0.0], 2.0).unwrap();
        assert_eq!(scan0.rates(), &[2.0]);
        // Monotone non-increasing in |level|.
        let levels: Vec<f64> = (0..50).map(|i| -0.002 * i as f64).collect();
        let scan = trigger_scan(&peaks, &levels, 2.0).unwrap();
        for w in scan.rates().windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(trigger_scan(&[], &[0.0], 1.0).is_err());
    }

    #[test]
    fn plateau_telescoping_two_detectors() {
        // Clean synthetic peaks: known per-level rates, negligible width.
        let (r1, r2, rc) = (3000.0f64, 1500.0, 120.0);
        let t_obs = 1.0;
        let mut peaks = Vec::new();
        peaks.extend(std::iter::repeat(-0.0324).take(r1 as usize));
        peaks.extend(std::iter::repeat(-0.0552).take(r2 as usize));
        peaks.extend(std::iter::repeat(-0.0750).take(rc as usize));
        let levels: Vec<f64> = (1..=100).map(|i| -0.001 * i as f64).collect();
        let scan = trigger_scan(&peaks, &levels, t_obs).unwrap();
        let report = plateau_rates(&scan, 3).unwrap();
        assert_abs_diff_eq!(report.plateaus[0].rate, r1 + r2 + rc, epsilon = 1.0);
        assert_abs_diff_eq!(report.plateaus[1].rate, r2 + rc, epsilon = 1.0);
        assert_abs_diff_eq!(report.plateaus[2].rate, rc, epsilon = 1.0);
        assert_abs_diff_eq!(report.level_rates[0], r1, epsilon = 1.0);
        assert_abs_diff_eq!(report.level_rates[1], r2, epsilon = 1.0);
        assert_abs_diff_eq!(report.level_rates[2], rc, epsilon = 1.0);
        // Telescoping consistency: level rates sum to the lowest-trigger rate.
        let total: f64 = report.level_rates.iter().sum();
        assert_abs_diff_eq!(total, scan.rates()[0], epsilon = 1e-9);
    }

    #[test]
    fn plateau_single_detector() {
        let peaks = vec![-0.030; 500];
        let levels: Vec<f64> = (1..=50).map(|i| -0.001 * i as f64).collect();
        let scan = trigger_scan(&peaks, &levels, 1.0).unwrap();
        let report = plateau_rates(&scan, 1).unwrap();
        assert_abs_diff_eq!(report.plateaus[0].rate, 500.0, epsilon = 1e-9);
        // Asking for two is a structure error.
        assert!(matches!(plateau_rates(&scan, 2), Err(Error::Structure(_))));
    }

    #[test]
    fn dark_subtract_basics() {
        let peaks = vec![-0.030, -0.055];
        let levels: Vec<f64> = (1..=10).map(|i| -0.01 * i as f64).collect();
        let scan = trigger_scan(&peaks, &levels, 1.0).unwrap();
        let zero = dark_subtract(&scan, &scan).unwrap();
        assert!(zero.rates().iter().all(|r| *r == 0.0));
        let off = trigger_scan(&[-1e9], &levels, 1.0).unwrap(); // no counts in range
        let same = dark_subtract(&scan, &off).unwrap();
        assert_eq!(same.rates(), scan.rates());
        let other_levels: Vec<f64> = (1..=10).map(|i| -0.011 * i as f64).collect();
        let off_bad = trigger_scan(&peaks, &other_levels, 1.0).unwrap();
        assert!(matches!(dark_subtract(&scan, &off_bad), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn ode_estimates_inverts_click_model() {
        let f = 1e6;
        let mu = 0.1;
        let eta = [0.304, 0.156];
        let p1 = 1.0 - (-mu * eta[0]).exp();
        let p2 = 1.0 - (-mu * eta[1]).exp();
        let subsets = vec![
            FiringSubset::new([0]),
            FiringSubset::new([1]),
            FiringSubset::new([0, 1]),
        ];
        let rates = vec![
            f * p1 * (1.0 - p2),
            f * p2 * (1.0 - p1),
            f * p1 * p2,
        ];
        let est = ode_estimates(&subsets, &rates, 2, mu, f).unwrap();
        assert_abs_diff_eq!(est[0], eta[0], epsilon = 1e-12);
        assert_abs_diff_eq!(est[1], eta[1], epsilon = 1e-12);
    }

    #[test]
    fn level_model_json_round_trip() {
        let model = assigned_model(&[-0.030, -0.060], 3e-3);
        let mut buf = Vec::new();
        model.write_json(&mut buf).unwrap();
        let back = LevelModel::read_json(&buf[..]).unwrap();
        assert_eq!(model, back);
    }
}
