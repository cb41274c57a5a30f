//! Stochastic front-end: pulsed coherent source, per-detector efficiencies
//! and dark counts turned into a stream of firing subsets per laser slot.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::FiringSubset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, NS_EVENTS};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Pulsed laser parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceConfig {
    mean_photons_per_pulse: f64,
    repetition_rate: f64,
    pulse_width: f64,
}

impl SourceConfig {
    pub fn new(mean_photons_per_pulse: f64, repetition_rate: f64, pulse_width: f64) -> Result<Self> {
        if !(mean_photons_per_pulse >= 0.0) || !mean_photons_per_pulse.is_finite() {
            return Err(Error::config("source.mean_photons_per_pulse: must be >= 0"));
        }
        if !(repetition_rate > 0.0) || !repetition_rate.is_finite() {
            return Err(Error::config("source.repetition_rate: must be > 0"));
        }
        if !(pulse_width >= 0.0) || pulse_width >= 1.0 / repetition_rate {
            return Err(Error::config(
                "source.pulse_width: must be non-negative and shorter than the repetition period",
            ));
        }
        Ok(Self {
            mean_photons_per_pulse,
            repetition_rate,
            pulse_width,
        })
    }

    pub fn mean_photons_per_pulse(&self) -> f64 {
        self.mean_photons_per_pulse
    }

    pub fn repetition_rate(&self) -> f64 {
        self.repetition_rate
    }

    pub fn pulse_width(&self) -> f64 {
        self.pulse_width
    }
}

/// End-to-end optics: detection probability per source photon for each
/// element, plus per-element dark count rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpticalPath {
    efficiencies: Vec<f64>,
    dark_count_rates: Vec<f64>,
}

impl OpticalPath {
    pub fn new(efficiencies: Vec<f64>, dark_count_rates: Vec<f64>) -> Result<Self> {
        if efficiencies.is_empty() {
            return Err(Error::config("optics.efficiencies: at least one element required"));
        }
        if efficiencies.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::config("optics.efficiencies: each value must lie in [0, 1]"));
        }
        let total: f64 = efficiencies.iter().sum();
        if total > 1.0 + 1e-12 {
            return Err(Error::config(format!(
                "optics.efficiencies: sum {total} exceeds 1 for detectors sharing one input"
            )));
        }
        if dark_count_rates.len() != efficiencies.len() {
            return Err(Error::config(
                "optics.dark_count_rates: one value per detector required",
            ));
        }
        if dark_count_rates.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::config("optics.dark_count_rates: must be >= 0"));
        }
        Ok(Self {
            efficiencies,
            dark_count_rates,
        })
    }

    pub fn len(&self) -> usize {
        self.efficiencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.efficiencies.is_empty()
    }

    pub fn efficiencies(&self) -> &[f64] {
        &self.efficiencies
    }

    pub fn dark_count_rates(&self) -> &[f64] {
        &self.dark_count_rates
    }
}

/// Ordered record of which elements fired in which slot. Only non-empty
/// slots are stored; `n_slots` keeps the full observation length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStream {
    n_slots: u64,
    firings: Vec<(u64, FiringSubset)>,
}

impl EventStream {
    pub fn new(n_slots: u64, firings: Vec<(u64, FiringSubset)>) -> Result<Self> {
        let increasing = firings.windows(2).all(|w| w[0].0 < w[1].0);
        if !increasing {
            return Err(Error::config("event stream slot indices must be strictly increasing"));
        }
        if firings.last().is_some_and(|(s, _)| *s >= n_slots) {
            return Err(Error::config("event stream slot index beyond n_slots"));
        }
        Ok(Self { n_slots, firings })
    }

    pub fn n_slots(&self) -> u64 {
        self.n_slots
    }

    /// Non-empty slots, in increasing slot order.
    pub fn firings(&self) -> &[(u64, FiringSubset)] {
        &self.firings
    }

    pub fn n_events(&self) -> usize {
        self.firings.len()
    }

    /// `slot,fired_indices` rows for every slot, indices `;`-separated.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "slot,fired_indices")?;
        let mut next = 0usize;
        for slot in 0..self.n_slots {
            let line = match self.firings.get(next) {
                Some((s, subset)) if *s == slot => {
                    next += 1;
                    let ids: Vec<String> = subset.indices().iter().map(|i| i.to_string()).collect();
                    ids.join(";")
                }
                _ => String::new(),
            };
            writeln!(w, "{slot},{line}")?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut firings = Vec::new();
        let mut n_slots = 0u64;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("slot")) {
                continue;
            }
            let (slot_s, rest) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("line {}: expected slot,fired_indices", lineno + 1)))?;
            let slot: u64 = slot_s
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad slot index '{slot_s}'", lineno + 1)))?;
            n_slots = n_slots.max(slot + 1);
            if rest.trim().is_empty() {
                continue;
            }
            let mut ids = Vec::new();
            for part in rest.split(';') {
                let id: u16 = part
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad element index '{part}'", lineno + 1)))?;
                ids.push(id);
            }
            firings.push((slot, FiringSubset::new(ids)));
        }
        EventStream::new(n_slots, firings)
    }
}

/// Click probability of one detector for a coherent pulse:
/// `1 - exp(-mu * eta)`.
pub fn fire_probability(mean_photons: f64, efficiency: f64) -> f64 {
    1.0 - (-mean_photons * efficiency).exp()
}

/// Number of subsequent slots an element stays insensitive after firing.
///
/// The recovery window is 5 tau (99% bias current restored); a subsequent
/// slot is blocked only if its start falls inside that window, so the count
/// is zero whenever the repetition period exceeds the recovery window.
pub fn dead_time_slots(recovery_time: f64, repetition_rate: f64) -> u32 {
    let x = 5.0 * recovery_time * repetition_rate;
    (x.ceil() as u32).saturating_sub(1)
}

/// Draw the firing subsets for `n_slots` laser slots.
///
/// Element `i` fires in a slot with probability
/// `fire_probability(mu, eta_i)` OR'd with a dark-count Bernoulli of
/// probability `DCR_i / f`, independently across slots and elements.
/// Identical seeds give identical streams regardless of how the slot range
/// is split across threads.
pub fn sample_events(src: &SourceConfig, path: &OpticalPath, n_slots: u64, seed: u64) -> EventStream {
    sample_events_with_dead_time(src, path, &vec![0; path.len()], n_slots, seed)
}

/// Like [`sample_events`], additionally suppressing each element for a
/// fixed number of slots after it fires (see [`dead_time_slots`]).
pub fn sample_events_with_dead_time(
    src: &SourceConfig,
    path: &OpticalPath,
    dead_slots: &[u32],
    n_slots: u64,
    seed: u64,
) -> EventStream {
    assert_eq!(dead_slots.len(), path.len(), "one dead-time entry per detector");
    let raw = raw_firings(src, path, n_slots, seed);
    let firings = apply_dead_time(raw, dead_slots);
    EventStream { n_slots, firings }
}

/// Sequential reference implementation of the raw (pre-dead-time) sampler.
pub fn sample_events_seq(src: &SourceConfig, path: &OpticalPath, n_slots: u64, seed: u64) -> EventStream {
    let firings = sample_range(src, path, 0, n_slots, seed);
    EventStream { n_slots, firings }
}

fn raw_firings(
    src: &SourceConfig,
    path: &OpticalPath,
    n_slots: u64,
    seed: u64,
) -> Vec<(u64, FiringSubset)> {
    #[cfg(feature = "parallel")]
    {
        const CHUNK: u64 = 8192;
        if n_slots > CHUNK {
            let n_chunks = n_slots.div_ceil(CHUNK);
            return (0..n_chunks)
                .into_par_iter()
                .map(|c| {
                    let lo = c * CHUNK;
                    let hi = ((c + 1) * CHUNK).min(n_slots);
                    sample_range(src, path, lo, hi, seed)
                })
                .reduce(Vec::new, |mut acc, mut part| {
                    acc.append(&mut part);
                    acc
                });
        }
    }
    sample_range(src, path, 0, n_slots, seed)
}

fn sample_range(
    src: &SourceConfig,
    path: &OpticalPath,
    lo: u64,
    hi: u64,
    seed: u64,
) -> Vec<(u64, FiringSubset)> {
    let mu = src.mean_photons_per_pulse;
    let f = src.repetition_rate;
    let p_fire: Vec<f64> = path.efficiencies.iter().map(|&eta| fire_probability(mu, eta)).collect();
    let p_dark: Vec<f64> = path.dark_count_rates.iter().map(|&d| (d / f).min(1.0)).collect();
    let mut out = Vec::new();
    for slot in lo..hi {
        let mut rng = stream_rng(seed, NS_EVENTS, slot);
        let mut subset = FiringSubset::empty();
        for i in 0..path.len() {
            // Two draws per element keep the stream layout independent of
            // whether dark counts are enabled.
            let u_photon: f64 = rng.random();
            let u_dark: f64 = rng.random();
            if u_photon < p_fire[i] || u_dark < p_dark[i] {
                subset.push_checked(i as u16);
            }
        }
        if !subset.is_empty() {
            out.push((slot, subset));
        }
    }
    out
}

/// Deterministic post-filter: drop firings that land inside an element's
/// recovery window. A no-op when every entry of `dead_slots` is zero.
fn apply_dead_time(
    mut firings: Vec<(u64, FiringSubset)>,
    dead_slots: &[u32],
) -> Vec<(u64, FiringSubset)> {
    if dead_slots.iter().all(|&d| d == 0) {
        return firings;
    }
    let mut blocked_until: Vec<Option<u64>> = vec![None; dead_slots.len()];
    for (slot, subset) in firings.iter_mut() {
        for i in 0..dead_slots.len() as u16 {
            if !subset.contains(i) {
                continue;
            }
            match blocked_until[i as usize] {
                Some(until) if *slot <= until => subset.remove(i),
                _ => blocked_until[i as usize] = Some(*slot + dead_slots[i as usize] as u64),
            }
        }
    }
    firings.retain(|(_, s)| !s.is_empty());
    firings
}

/// Empirical zero-delay second-order correlation between elements `i` and
/// `j`: `P(i and j) / (P(i) * P(j))` over slots.
pub fn g2_zero(stream: &EventStream, i: u16, j: u16) -> Result<f64> {
    g2_zero_with_error(stream, i, j).map(|(g2, _)| g2)
}

/// [`g2_zero`] plus its delta-method standard error.
pub fn g2_zero_with_error(stream: &EventStream, i: u16, j: u16) -> Result<(f64, f64)> {
    if i == j {
        return Err(Error::config("g2 requires two distinct element indices"));
    }
    let n = stream.n_slots;
    if n == 0 {
        return Err(Error::EmptyInput("g2 over an empty stream".into()));
    }
    let mut n_i = 0u64;
    let mut n_j = 0u64;
    let mut n_ij = 0u64;
    for (_, subset) in &stream.firings {
        let has_i = subset.contains(i);
        let has_j = subset.contains(j);
        n_i += has_i as u64;
        n_j += has_j as u64;
        n_ij += (has_i && has_j) as u64;
    }
    if n_i == 0 || n_j == 0 {
        return Err(Error::UndefinedEstimate(format!(
            "g2({i},{j}): a marginal rate is zero (n_i={n_i}, n_j={n_j})"
        )));
    }
    let nf = n as f64;
    let (p_i, p_j, p_ij) = (n_i as f64 / nf, n_j as f64 / nf, n_ij as f64 / nf);
    let g2 = p_ij / (p_i * p_j);
    // Var(ln g2) for correlated binomial counts; clamped at zero for the
    // perfectly-correlated corner.
    let var_ln = if n_ij == 0 {
        0.0
    } else {
        ((1.0 - p_ij) / (nf * p_ij) - (1.0 - p_i) / (nf * p_i) - (1.0 - p_j) / (nf * p_j)).max(0.0)
    };
    Ok((g2, g2 * var_ln.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn source(mu: f64, f: f64) -> SourceConfig {
        SourceConfig::new(mu, f, 10e-12).unwrap()
    }

    #[test]
    fn fire_probability_examples() {
        assert_eq!(fire_probability(0.0, 0.5), 0.0);
        assert!((fire_probability(1e9, 0.5) - 1.0).abs() < 1e-15);
        // 30.4% detector efficiency behind a 50:50 splitter at mu = 0.1.
        assert_abs_diff_eq!(fire_probability(0.1, 0.304 * 0.5), 0.015085063, epsilon = 1e-9);
    }

    #[test]
    fn fire_probability_monotone() {
        let mut prev = 0.0;
        for k in 1..50 {
            let p = fire_probability(0.05 * k as f64, 0.3);
            assert!(p > prev);
            prev = p;
        }
        let mut prev = 0.0;
        for k in 1..50 {
            let p = fire_probability(0.7, 0.02 * k as f64);
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn no_light_no_darks_means_empty() {
        let src = source(0.0, 1e6);
        let path = OpticalPath::new(vec![0.3, 0.2], vec![0.0, 0.0]).unwrap();
        let ev = sample_events(&src, &path, 10_000, 3);
        assert_eq!(ev.n_events(), 0);
        assert_eq!(ev.n_slots(), 10_000);
    }

    #[test]
    fn empirical_rates_match_click_model() {
        // mu=1, eta=0.5 per detector: rate must sit within 3 sigma binomial
        // of 1 - exp(-0.5).
        let src = source(1.0, 1e6);
        let path = OpticalPath::new(vec![0.5, 0.5], vec![0.0, 0.0]).unwrap();
        let n: u64 = 1_000_000;
        let ev = sample_events(&src, &path, n, 11);
        let p = 1.0 - (-0.5f64).exp();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for det in [0u16, 1] {
            let hits = ev.firings().iter().filter(|(_, s)| s.contains(det)).count();
            let rate = hits as f64 / n as f64;
            assert!(
                (rate - p).abs() < 3.0 * sigma,
                "detector {det}: rate {rate} vs expected {p} (3 sigma = {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn dark_counts_only() {
        // DCR = 10 Hz at f = 1 MHz: firing fraction ~ 1e-5 per slot.
        let src = source(0.0, 1e6);
        let path = OpticalPath::new(vec![0.11], vec![10.0]).unwrap();
        let n: u64 = 10_000_000;
        let ev = sample_events(&src, &path, n, 5);
        let p = 1e-5;
        let sigma = (p / n as f64).sqrt();
        let rate = ev.n_events() as f64 / n as f64;
        assert!((rate - p).abs() < 3.0 * sigma, "rate {rate} vs {p}");
    }

    #[test]
    fn deterministic_and_split_independent() {
        let src = source(0.8, 1e7);
        let path = OpticalPath::new(vec![0.4, 0.3], vec![100.0, 50.0]).unwrap();
        let a = sample_events(&src, &path, 50_000, 99);
        let b = sample_events(&src, &path, 50_000, 99);
        let seq = sample_events_seq(&src, &path, 50_000, 99);
        assert_eq!(a, b);
        assert_eq!(a, seq);
        let other = sample_events(&src, &path, 50_000, 100);
        assert_ne!(a, other);
    }

    #[test]
    fn dead_time_slot_counts() {
        // 5*tau = 59 ns at a 100 ns period: no subsequent slot blocked.
        assert_eq!(dead_time_slots(11.81e-9, 10e6), 0);
        // 5*tau = 59 ns at a 5 ns period: slots 1..=11 start inside the window.
        assert_eq!(dead_time_slots(11.81e-9, 200e6), 11);
        assert_eq!(dead_time_slots(0.0, 10e6), 0);
    }

    #[test]
    fn dead_time_suppresses_consecutive_firings() {
        let src = source(50.0, 1e6); // fire every slot
        let path = OpticalPath::new(vec![0.9], vec![0.0]).unwrap();
        let ev = sample_events_with_dead_time(&src, &path, &[1], 1_000, 7);
        // Every other slot survives.
        for w in ev.firings().windows(2) {
            assert!(w[1].0 - w[0].0 >= 2);
        }
        assert!(ev.n_events() >= 450);
    }

    #[test]
    fn g2_of_independent_detectors_is_one() {
        let src = source(1.0, 1e7);
        let path = OpticalPath::new(vec![0.3, 0.2], vec![0.0, 0.0]).unwrap();
        let ev = sample_events(&src, &path, 1_000_000, 21);
        let (g2, se) = g2_zero_with_error(&ev, 0, 1).unwrap();
        assert!((g2 - 1.0).abs() < 3.0 * se, "g2 {g2} se {se}");
    }

    #[test]
    fn g2_degenerate_cases() {
        // j fires exactly when i fires: g2 = 1 / P(i).
        let firings = vec![
            (0, FiringSubset::new([0, 1])),
            (4, FiringSubset::new([0, 1])),
        ];
        let ev = EventStream::new(8, firings).unwrap();
        let g2 = g2_zero(&ev, 0, 1).unwrap();
        assert_abs_diff_eq!(g2, 4.0, epsilon = 1e-12); // P(i) = 1/4
        // Never co-firing: g2 = 0.
        let ev = EventStream::new(8, vec![(0, FiringSubset::new([0])), (1, FiringSubset::new([1]))]).unwrap();
        assert_eq!(g2_zero(&ev, 0, 1).unwrap(), 0.0);
        // Zero marginal: undefined.
        let ev = EventStream::new(8, vec![(0, FiringSubset::new([0]))]).unwrap();
        assert!(matches!(g2_zero(&ev, 0, 1), Err(Error::UndefinedEstimate(_))));
    }

    #[test]
    fn coincidence_gain_from_raising_mu() {
        // The motivation for running at mu=1: the coincidence rate rises by
        // the factor predicted by the click model relative to mu=0.1.
        let path = OpticalPath::new(vec![0.304, 0.156], vec![0.0, 0.0]).unwrap();
        let n: u64 = 2_000_000;
        let coincidences = |mu: f64| {
            let ev = sample_events(&source(mu, 1e7), &path, n, 31);
            ev.firings().iter().filter(|(_, s)| s.len() == 2).count() as f64
        };
        let c_low = coincidences(0.1);
        let c_high = coincidences(1.0);
        let pred = |mu: f64| fire_probability(mu, 0.304) * fire_probability(mu, 0.156);
        let predicted_ratio = pred(1.0) / pred(0.1);
        let observed_ratio = c_high / c_low;
        // c_low is the scarce count (~700); allow 3 sigma on the ratio.
        let rel_sigma = (1.0 / c_low + 1.0 / c_high).sqrt();
        assert!(
            (observed_ratio / predicted_ratio - 1.0).abs() < 3.0 * rel_sigma,
            "ratio {observed_ratio} vs predicted {predicted_ratio}"
        );
    }

    #[test]
    fn csv_round_trip() {
        let src = source(0.5, 1e6);
        let path = OpticalPath::new(vec![0.3, 0.2], vec![5.0, 0.0]).unwrap();
        let ev = sample_events(&src, &path, 500, 13);
        let mut buf = Vec::new();
        ev.write_csv(&mut buf).unwrap();
        let back = EventStream::read_csv(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(ev, back);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SourceConfig::new(-1.0, 1e6, 10e-12).is_err());
        assert!(SourceConfig::new(1.0, 1e6, 2e-6).is_err());
        assert!(OpticalPath::new(vec![0.7, 0.7], vec![0.0, 0.0]).is_err());
        assert!(OpticalPath::new(vec![0.3], vec![-1.0]).is_err());
        assert!(OpticalPath::new(vec![0.3, 0.1], vec![0.0]).is_err());
    }
}
