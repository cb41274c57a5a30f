//! Time-domain synthesis of the single-coax output: superposed exponential
//! pulses per firing event plus band-limited Johnson-Nyquist noise.
//!
//! Noise is a pure function of (seed, absolute sample index): white samples
//! are generated in fixed blocks keyed by block index, low-pass filtered
//! with a short warm-up pre-roll, and the same values come out no matter
//! which window is synthesized or how blocks are split across threads.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::circuit::{loaded_resistance, subset_resistance, ArrayConfig, ReadoutConfig};
use crate::error::{Error, Result};
use crate::photonics::{EventStream, SourceConfig};
use crate::rng::{stream_rng, NS_NOISE};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub const BOLTZMANN: f64 = 1.380649e-23;

/// White samples are produced in blocks of this many retained samples.
const NOISE_BLOCK: usize = 4096;

/// Pulse tails are dropped beyond this many recovery times; the truncated
/// remainder is below double precision for millivolt pulses.
const TAIL_CUTOFF_TAUS: f64 = 45.0;

/// Hard cap on a single in-memory trace.
const MAX_TRACE_SAMPLES: u64 = 1 << 27;

/// Input-referred Johnson-Nyquist voltage noise of the amplifier input
/// resistance: `sqrt(4 k_B T B R_out)`.
pub fn noise_rms(readout: &ReadoutConfig) -> f64 {
    (4.0 * BOLTZMANN * readout.temperature() * readout.bandwidth() * readout.input_resistance())
        .sqrt()
}

/// Sampled voltage record (post-amplifier volts).
#[derive(Debug, Clone, PartialEq)]
pub struct PulseTrace {
    sample_rate: f64,
    t0: f64,
    samples: Vec<f64>,
}

impl PulseTrace {
    pub fn new(sample_rate: f64, t0: f64, samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::config("trace must contain at least 2 samples"));
        }
        if !(sample_rate > 0.0) {
            return Err(Error::config("trace sample_rate must be > 0"));
        }
        Ok(Self { sample_rate, t0, samples })
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time_at(&self, index: usize) -> f64 {
        self.t0 + index as f64 / self.sample_rate
    }

    pub fn std(&self) -> f64 {
        let n = self.samples.len() as f64;
        let mean = self.samples.iter().sum::<f64>() / n;
        (self.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// `t_seconds,v_volts` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t_seconds,v_volts")?;
        for (i, v) in self.samples.iter().enumerate() {
            writeln!(w, "{},{}", self.time_at(i), v)?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self> {
        let mut times = Vec::new();
        let mut volts = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("t_")) {
                continue;
            }
            let (t, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("line {}: expected t,v", lineno + 1)))?;
            times.push(t.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?);
            volts.push(v.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?);
        }
        if times.len() < 2 {
            return Err(Error::EmptyInput("trace file holds fewer than 2 samples".into()));
        }
        let dt = times[1] - times[0];
        if !(dt > 0.0) {
            return Err(Error::Parse("trace time column must be increasing".into()));
        }
        PulseTrace::new(1.0 / dt, times[0], volts)
    }
}

/// 2-D histogram of many overlaid traces: time bins x voltage bins.
#[derive(Debug, Clone, Serialize)]
pub struct PersistenceMap {
    t_edges: Vec<f64>,
    v_edges: Vec<f64>,
    #[serde(skip)]
    counts: Vec<u64>,
    n_traces: u64,
}

impl PersistenceMap {
    pub fn t_bins(&self) -> usize {
        self.t_edges.len() - 1
    }

    pub fn v_bins(&self) -> usize {
        self.v_edges.len() - 1
    }

    pub fn t_edges(&self) -> &[f64] {
        &self.t_edges
    }

    pub fn v_edges(&self) -> &[f64] {
        &self.v_edges
    }

    pub fn n_traces(&self) -> u64 {
        self.n_traces
    }

    pub fn count(&self, t_bin: usize, v_bin: usize) -> u64 {
        self.counts[t_bin * self.v_bins() + v_bin]
    }

    /// Voltage histogram of the time bin containing `t` (seconds, relative
    /// to the trace start). Returns (bin index, per-voltage-bin counts).
    pub fn voltage_slice(&self, t: f64) -> Result<(usize, Vec<u64>)> {
        let nb = self.t_bins();
        let lo = self.t_edges[0];
        let hi = self.t_edges[nb];
        if !(lo..hi).contains(&t) {
            return Err(Error::config(format!("slice time {t} outside [{lo}, {hi})")));
        }
        let bin = (((t - lo) / (hi - lo) * nb as f64) as usize).min(nb - 1);
        let vb = self.v_bins();
        Ok((bin, self.counts[bin * vb..(bin + 1) * vb].to_vec()))
    }

    /// Sparse `t_bin,v_bin,count` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "t_bin,v_bin,count")?;
        let vb = self.v_bins();
        for (idx, c) in self.counts.iter().enumerate() {
            if *c > 0 {
                writeln!(w, "{},{},{}", idx / vb, idx % vb, c)?;
            }
        }
        Ok(())
    }

    /// Bin-edge header accompanying the CSV.
    pub fn write_json_header(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Find local maxima of a smoothed voltage-slice histogram. Returns the bin
/// indices of maxima whose smoothed height exceeds `floor`.
pub fn voltage_cluster_peaks(counts: &[u64], smooth_halfwidth: usize, floor: f64) -> Vec<usize> {
    let n = counts.len();
    if n == 0 {
        return Vec::new();
    }
    let mut smooth = vec![0.0f64; n];
    for i in 0..n {
        let lo = i.saturating_sub(smooth_halfwidth);
        let hi = (i + smooth_halfwidth + 1).min(n);
        let sum: u64 = counts[lo..hi].iter().sum();
        smooth[i] = sum as f64 / (hi - lo) as f64;
    }
    let mut peaks = Vec::new();
    for i in 0..n {
        if smooth[i] <= floor {
            continue;
        }
        let left_ok = i == 0 || smooth[i] > smooth[i - 1];
        let right_ok = i + 1 == n || smooth[i] >= smooth[i + 1];
        if left_ok && right_ok {
            peaks.push(i);
        }
    }
    peaks
}

// ---------------------------------------------------------------------------
// Band-limited noise
// ---------------------------------------------------------------------------

/// One second-order IIR section (direct form I).
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Biquad {
    fn lowpass(fc_over_fs: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * fc_over_fs;
        let alpha = w0.sin() / (2.0 * q);
        let cosw = w0.cos();
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 - cosw) / 2.0 / a0,
            b1: (1.0 - cosw) / a0,
            b2: (1.0 - cosw) / 2.0 / a0,
            a1: -2.0 * cosw / a0,
            a2: (1.0 - alpha) / a0,
            x1: 0.0,
            x2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.b1 * self.x1 + self.b2 * self.x2 - self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// 4th-order Butterworth low-pass as two cascaded biquads.
fn butterworth4(fc_over_fs: f64) -> [Biquad; 2] {
    // Pole-pair quality factors of the order-4 Butterworth prototype.
    [
        Biquad::lowpass(fc_over_fs, 0.541_196_100_146_197),
        Biquad::lowpass(fc_over_fs, 1.306_562_964_876_377),
    ]
}

#[derive(Debug, Clone, Copy)]
struct NoiseParams {
    /// Std of the generated white samples (post-gain volts).
    white_sigma: f64,
    fc_over_fs: f64,
    warmup: usize,
}

impl NoiseParams {
    fn from_readout(readout: &ReadoutConfig) -> Option<Self> {
        if readout.temperature() == 0.0 {
            return None;
        }
        let fs = readout.sample_rate();
        let b = readout.bandwidth();
        // One-sided white PSD 4kTR over [0, fs/2] carries per-sample
        // variance 2kTR*fs; the low-pass then leaves ~4kTR*B in band.
        let white_sigma = (2.0 * BOLTZMANN * readout.temperature() * readout.input_resistance() * fs)
            .sqrt()
            * readout.gain();
        let warmup = ((5.0 * fs / b).ceil() as usize).max(64);
        Some(NoiseParams {
            white_sigma,
            fc_over_fs: b / fs,
            warmup,
        })
    }

    /// Filtered noise for absolute samples `[block*NOISE_BLOCK, ...)`,
    /// truncated to `len` retained samples.
    fn block(&self, seed: u64, block: u64, len: usize) -> Vec<f64> {
        let mut rng = stream_rng(seed, NS_NOISE, block);
        let mut filt = butterworth4(self.fc_over_fs);
        let mut out = Vec::with_capacity(len);
        for k in 0..self.warmup + len {
            let white: f64 = rng.sample(StandardNormal);
            let mut y = self.white_sigma * white;
            for section in filt.iter_mut() {
                y = section.process(y);
            }
            if k >= self.warmup {
                out.push(y);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Pulse model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Component {
    start: u64,
    amplitude: f64,
    tau_samples: f64,
    span: u64,
}

/// Deterministic pulse shape for an event stream. A slot's firing subset is
/// loaded as a union (series sum through the amplifier parallel), then the
/// peak splits across elements in proportion to R_i so each element decays
/// with its own recovery time.
struct PulseModel {
    components: Vec<Component>,
    max_span: u64,
}

impl PulseModel {
    fn build(
        stream: &EventStream,
        array: &ArrayConfig,
        readout: &ReadoutConfig,
        src: &SourceConfig,
    ) -> Result<Self> {
        let fs = readout.sample_rate();
        let f = src.repetition_rate();
        let sign = readout.polarity().sign();
        let gain = readout.gain();
        let mut components = Vec::new();
        let mut max_span = 0u64;
        for (slot, subset) in stream.firings() {
            let r_union = subset_resistance(subset, array)?;
            if r_union == 0.0 {
                continue;
            }
            let peak = sign * array.bias_current() * loaded_resistance(r_union, readout) * gain;
            let start = slot_start_sample(*slot, fs, f);
            for &i in subset.indices() {
                let r_i = array.resistances()[i as usize];
                let tau_samples = array.kinetic_inductance() / r_i * fs;
                let span = (TAIL_CUTOFF_TAUS * tau_samples).ceil() as u64 + 1;
                max_span = max_span.max(span);
                components.push(Component {
                    start,
                    amplitude: peak * r_i / r_union,
                    tau_samples,
                    span,
                });
            }
        }
        components.sort_by_key(|c| c.start);
        Ok(PulseModel { components, max_span })
    }

    /// Pulse contribution at sample `n`, accumulated onto `base` in
    /// component order so every access path sums identically.
    fn value_at(&self, n: u64, base: f64) -> f64 {
        let hi = self.components.partition_point(|c| c.start <= n);
        let lo = self.components.partition_point(|c| c.start + self.max_span <= n);
        let lo = lo.min(hi);
        let mut v = base;
        for c in &self.components[lo..hi] {
            let dt = (n - c.start) as f64;
            if dt < c.span as f64 {
                v += c.amplitude * (-dt / c.tau_samples).exp();
            }
        }
        v
    }

    /// Add pulse contributions over samples `[lo, lo + out.len())`.
    fn accumulate_range(&self, lo: u64, out: &mut [f64]) {
        let hi = lo + out.len() as u64;
        let first = self
            .components
            .partition_point(|c| c.start + self.max_span <= lo);
        for c in &self.components[first..] {
            if c.start >= hi {
                break;
            }
            let begin = c.start.max(lo);
            let end = (c.start + c.span).min(hi);
            for n in begin..end {
                let dt = (n - c.start) as f64;
                out[(n - lo) as usize] += c.amplitude * (-dt / c.tau_samples).exp();
            }
        }
    }
}

pub(crate) fn slot_start_sample(slot: u64, sample_rate: f64, repetition_rate: f64) -> u64 {
    (slot as f64 * sample_rate / repetition_rate - 1e-9).ceil().max(0.0) as u64
}

pub(crate) fn samples_per_slot(sample_rate: f64, repetition_rate: f64) -> u64 {
    slot_start_sample(1, sample_rate, repetition_rate)
}

// ---------------------------------------------------------------------------
// Synthesis
// ---------------------------------------------------------------------------

/// Synthesize the full stream into one trace. Errors if the stream is too
/// long to hold in memory; use [`synthesize_window`] or [`slot_peaks`] for
/// long runs.
pub fn synthesize(
    stream: &EventStream,
    array: &ArrayConfig,
    readout: &ReadoutConfig,
    src: &SourceConfig,
    seed: u64,
) -> Result<PulseTrace> {
    let n = slot_start_sample(stream.n_slots(), readout.sample_rate(), src.repetition_rate());
    if n > MAX_TRACE_SAMPLES {
        return Err(Error::config(format!(
            "full trace would hold {n} samples (cap {MAX_TRACE_SAMPLES}); synthesize windows instead"
        )));
    }
    synthesize_window(stream, array, readout, src, seed, 0, n as usize)
}

/// Synthesize `n_samples` starting at absolute sample `start`. Windows of
/// the same run are mutually consistent: every absolute sample has one
/// value regardless of the window it is read through.
pub fn synthesize_window(
    stream: &EventStream,
    array: &ArrayConfig,
    readout: &ReadoutConfig,
    src: &SourceConfig,
    seed: u64,
    start: u64,
    n_samples: usize,
) -> Result<PulseTrace> {
    if n_samples < 2 {
        return Err(Error::config("window must span at least 2 samples"));
    }
    if (n_samples as u64) > MAX_TRACE_SAMPLES {
        return Err(Error::config(format!(
            "window of {n_samples} samples exceeds cap {MAX_TRACE_SAMPLES}"
        )));
    }
    let model = PulseModel::build(stream, array, readout, src)?;
    let noise = NoiseParams::from_readout(readout);
    let mut samples = vec![0.0f64; n_samples];
    fill_range(&model, noise.as_ref(), seed, start, &mut samples);
    PulseTrace::new(
        readout.sample_rate(),
        start as f64 / readout.sample_rate(),
        samples,
    )
}

fn fill_range(model: &PulseModel, noise: Option<&NoiseParams>, seed: u64, start: u64, out: &mut [f64]) {
    if let Some(np) = noise {
        let end = start + out.len() as u64;
        #[cfg(feature = "parallel")]
        {
            // Blocks are disjoint in the output; carve aligned chunks.
            let first_block = start / NOISE_BLOCK as u64;
            let last_block = (end - 1) / NOISE_BLOCK as u64;
            let mut slices: Vec<(u64, u64, &mut [f64])> = Vec::new();
            let mut rest: &mut [f64] = out;
            let mut cursor = start;
            for b in first_block..=last_block {
                let hi = ((b + 1) * NOISE_BLOCK as u64).min(end);
                let take = (hi - cursor) as usize;
                let (head, tail) = rest.split_at_mut(take);
                slices.push((b, cursor, head));
                rest = tail;
                cursor = hi;
            }
            slices.into_par_iter().for_each(|(b, lo, chunk)| {
                let block_lo = b * NOISE_BLOCK as u64;
                let hi = lo + chunk.len() as u64;
                let vals = np.block(seed, b, (hi - block_lo) as usize);
                for (k, v) in chunk.iter_mut().enumerate() {
                    *v = vals[(lo - block_lo) as usize + k];
                }
            });
        }
        #[cfg(not(feature = "parallel"))]
        {
            let first_block = start / NOISE_BLOCK as u64;
            let last_block = (end - 1) / NOISE_BLOCK as u64;
            for b in first_block..=last_block {
                let block_lo = b * NOISE_BLOCK as u64;
                let lo = block_lo.max(start);
                let hi = (block_lo + NOISE_BLOCK as u64).min(end);
                let vals = np.block(seed, b, (hi - block_lo) as usize);
                for n in lo..hi {
                    out[(n - start) as usize] = vals[(n - block_lo) as usize];
                }
            }
        }
    }
    model.accumulate_range(start, out);
}

// ---------------------------------------------------------------------------
// Per-slot peak extraction
// ---------------------------------------------------------------------------

/// How the per-slot pulse height is measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PeakMode {
    /// Read the trace at a fixed offset (in samples) from the slot start.
    /// Offset 0 reads the undisturbed pulse peak; this mirrors reading a
    /// fixed-time slice of the persistence map and is free of the upward
    /// bias a max-search acquires from noise.
    SlotSample { offset: u32 },
    /// Largest |v| anywhere inside the slot window.
    WindowMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlotPeak {
    pub slot: u64,
    pub peak_volts: f64,
}

/// Extract one peak per slot whose magnitude exceeds
/// `threshold_rms_multiple x` the post-gain noise rms. Slots below the
/// threshold produce no entry.
pub fn slot_peaks(
    stream: &EventStream,
    array: &ArrayConfig,
    readout: &ReadoutConfig,
    src: &SourceConfig,
    seed: u64,
    mode: PeakMode,
    threshold_rms_multiple: f64,
) -> Result<Vec<SlotPeak>> {
    let threshold = threshold_rms_multiple * noise_rms(readout) * readout.gain();
    match mode {
        PeakMode::SlotSample { offset } => {
            slot_sample_peaks(stream, array, readout, src, seed, offset, threshold)
        }
        PeakMode::WindowMax => window_max_peaks(stream, array, readout, src, seed, threshold),
    }
}

/// Sequential reference implementation of [`slot_peaks`] with
/// [`PeakMode::SlotSample`].
pub fn slot_peaks_seq(
    stream: &EventStream,
    array: &ArrayConfig,
    readout: &ReadoutConfig,
    src: &SourceConfig,
    seed: u64,
    offset: u32,
    threshold_rms_multiple: f64,
) -> Result<Vec<SlotPeak>> {
    let threshold = threshold_rms_multiple * noise_rms(readout) * readout.gain();
    let model = PulseModel::build(stream, array, readout, src)?;
    let noise = NoiseParams::from_readout(readout);
    let fs = readout.sample_rate();
    let f = src.repetition_rate();
    let out = (0..stream.n_slots())
        .filter_map(|slot| {
            let n = slot_start_sample(slot, fs, f) + offset as u64;
            let v = model.value_at(n, noise_value(noise.as_ref(), seed, n));
            (v.abs() > threshold).then_some(SlotPeak { slot, peak_volts: v })
        })
        .collect();
    Ok(out)
}

fn noise_value(noise: Option<&NoiseParams>, seed: u64, n: u64) -> f64 {
    match noise {
        None => 0.0,
        Some(np) => {
            let b = n / NOISE_BLOCK as u64;
            let off = (n - b * NOISE_BLOCK as u64) as usize;
            np.block(seed, b, off + 1)[off]
        }
    }
}

fn slot_sample_peaks(
    stream: &EventStream,
    array: &ArrayConfig,
    readout: &ReadoutConfig,
    src: &SourceConfig,
    seed: u64,
    offset: u32,
    threshold: f64,
) -> Result<Vec<SlotPeak>> {
    let model = PulseModel::build(stream, array, readout, src)?;
    let noise = NoiseParams::from_readout(readout);
    let fs = readout.sample_rate();
    let f = src.repetition_rate();
    let n_slots = stream.n_slots();

    let eval_slots = |range: std::ops::Range<u64>| -> Vec<SlotPeak> {
        let mut out = Vec::new();
        let mut cache: Option<(u64, Vec<f64>)> = None;
        for slot in range {
            let n = slot_start_sample(slot, fs, f) + offset as u64;
            let noise_v = match &noise {
                None => 0.0,
                Some(np) => {
                    let b = n / NOISE_BLOCK as u64;
                    let off = (n - b * NOISE_BLOCK as u64) as usize;
                    let regen = !matches!(&cache, Some((cb, vals)) if *cb == b && vals.len() > off);
                    if regen {
                        cache = Some((b, np.block(seed, b, NOISE_BLOCK)));
                    }
                    cache.as_ref().unwrap().1[off]
                }
            };
            let v = model.value_at(n, noise_v);
            if v.abs() > threshold {
                out.push(SlotPeak { slot, peak_volts: v });
            }
        }
        out
    };

    #[cfg(feature = "parallel")]
    {
        const CHUNK: u64 = 4096;
        if n_slots > CHUNK {
            let n_chunks = n_slots.div_ceil(CHUNK);
            return Ok((0..n_chunks)
                .into_par_iter()
                .map(|c| eval_slots(c * CHUNK..((c + 1) * CHUNK).min(n_slots)))
                .reduce(Vec::new, |mut acc, mut part| {
                    acc.append(&mut part);
                    acc
                }));
        }
    }
    Ok(eval_slots(0..n_slots))
}

fn window_max_peaks(
    stream: &EventStream,
    array: &ArrayConfig,
    readout: &ReadoutConfig,
    src: &SourceConfig,
    seed: u64,
    threshold: f64,
) -> Result<Vec<SlotPeak>> {
    let model = PulseModel::build(stream, array, readout, src)?;
    let noise = NoiseParams::from_readout(readout);
    let fs = readout.sample_rate();
    let f = src.repetition_rate();
    let n_slots = stream.n_slots();

    let scan_slots = |range: std::ops::Range<u64>| -> Vec<SlotPeak> {
        let mut out = Vec::new();
        let lo = slot_start_sample(range.start, fs, f);
        let hi = slot_start_sample(range.end, fs, f);
        let mut buf = vec![0.0f64; (hi - lo) as usize];
        fill_range(&model, noise.as_ref(), seed, lo, &mut buf);
        for slot in range {
            let a = (slot_start_sample(slot, fs, f) - lo) as usize;
            let b = ((slot_start_sample(slot + 1, fs, f) - lo) as usize).min(buf.len());
            let best = buf[a..b]
                .iter()
                .copied()
                .max_by(|x, y| x.abs().total_cmp(&y.abs()))
                .unwrap_or(0.0);
            if best.abs() > threshold {
                out.push(SlotPeak { slot, peak_volts: best });
            }
        }
        out
    };

    #[cfg(feature = "parallel")]
    {
        const CHUNK: u64 = 1024;
        if n_slots > CHUNK {
            let n_chunks = n_slots.div_ceil(CHUNK);
            return Ok((0..n_chunks)
                .into_par_iter()
                .map(|c| scan_slots(c * CHUNK..((c + 1) * CHUNK).min(n_slots)))
                .reduce(Vec::new, |mut acc, mut part| {
                    acc.append(&mut part);
                    acc
                }));
        }
    }
    Ok(scan_slots(0..n_slots))
}

// ---------------------------------------------------------------------------
// Exponential tail fit
// ---------------------------------------------------------------------------

/// Least-squares fit of `A * exp(-t/tau)` over the window `[t_lo, t_hi]`
/// (absolute trace time). Returns the amplitude at the window start and the
/// decay time.
pub fn exp_fit_tail(trace: &PulseTrace, t_lo: f64, t_hi: f64) -> Result<(f64, f64)> {
    let fs = trace.sample_rate();
    let i_lo = ((t_lo - trace.t0()) * fs).ceil().max(0.0) as usize;
    let i_hi = (((t_hi - trace.t0()) * fs).floor() as usize).min(trace.len().saturating_sub(1));
    if i_hi < i_lo || i_hi - i_lo + 1 < 10 {
        return Err(Error::config("fit window must contain at least 10 samples"));
    }
    let ys = &trace.samples()[i_lo..=i_hi];
    let ts: Vec<f64> = (0..ys.len()).map(|k| k as f64 / fs).collect();

    let peak = ys.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
    if peak == 0.0 {
        return Err(Error::Fit("window is identically zero".into()));
    }
    let sign = peak.signum();

    // Log-linear seed over the clearly-resolved part of the decay.
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut m = 0.0;
    for (t, y) in ts.iter().zip(ys) {
        let mag = y * sign;
        if mag > peak.abs() * 0.05 {
            let ly = mag.ln();
            sx += t;
            sy += ly;
            sxx += t * t;
            sxy += t * ly;
            m += 1.0;
        }
    }
    if m < 3.0 {
        return Err(Error::Fit("too few samples above the decay floor".into()));
    }
    let denom = m * sxx - sx * sx;
    if denom == 0.0 {
        return Err(Error::Fit("degenerate time axis".into()));
    }
    let slope = (m * sxy - sx * sy) / denom;
    if slope >= 0.0 {
        return Err(Error::Fit("window does not decay".into()));
    }
    let mut tau = -1.0 / slope;
    let mut amp = sign * ((sy - slope * sx) / m).exp();

    // Damped Gauss-Newton refinement on (A, tau).
    let cost = |a: f64, t_: f64| -> f64 {
        ts.iter()
            .zip(ys)
            .map(|(t, y)| (a * (-t / t_).exp() - y).powi(2))
            .sum()
    };
    let mut c = cost(amp, tau);
    let mut lambda = 1e-3;
    for _ in 0..100 {
        let mut h11 = 0.0;
        let mut h12 = 0.0;
        let mut h22 = 0.0;
        let mut g1 = 0.0;
        let mut g2 = 0.0;
        for (t, y) in ts.iter().zip(ys) {
            let e = (-t / tau).exp();
            let r = amp * e - y;
            let ja = e;
            let jt = amp * e * t / (tau * tau);
            h11 += ja * ja;
            h12 += ja * jt;
            h22 += jt * jt;
            g1 += ja * r;
            g2 += jt * r;
        }
        let mut improved = false;
        for _ in 0..20 {
            let d11 = h11 * (1.0 + lambda);
            let d22 = h22 * (1.0 + lambda);
            let det = d11 * d22 - h12 * h12;
            if det == 0.0 {
                break;
            }
            let da = -(d22 * g1 - h12 * g2) / det;
            let dt = -(d11 * g2 - h12 * g1) / det;
            let (na, nt) = (amp + da, tau + dt);
            if nt > 0.0 {
                let nc = cost(na, nt);
                if nc < c {
                    let rel = (c - nc) / c.max(f64::MIN_POSITIVE);
                    amp = na;
                    tau = nt;
                    c = nc;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = true;
                    if rel < 1e-14 {
                        return finish_fit(amp, tau);
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
    finish_fit(amp, tau)
}

fn finish_fit(amp: f64, tau: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0) || !tau.is_finite() || !amp.is_finite() {
        return Err(Error::Fit(format!("fit did not converge (A={amp}, tau={tau})")));
    }
    Ok((amp, tau))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// 2-D (time, voltage) occurrence histogram of equal-length traces. Time is
/// measured relative to each trace's own start so slot-aligned windows
/// overlay.
pub fn persistence(traces: &[PulseTrace], t_bins: usize, v_bins: usize) -> Result<PersistenceMap> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("persistence needs at least one trace".into()));
    }
    if t_bins == 0 || v_bins == 0 {
        return Err(Error::config("persistence bin counts must be positive"));
    }
    let len = traces[0].len();
    let fs = traces[0].sample_rate();
    for tr in traces {
        if tr.len() != len || tr.sample_rate() != fs {
            return Err(Error::config("all traces must share length and sample rate"));
        }
    }
    if t_bins > len {
        return Err(Error::config("more time bins than samples per trace"));
    }
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    for tr in traces {
        for v in tr.samples() {
            v_min = v_min.min(*v);
            v_max = v_max.max(*v);
        }
    }
    if v_min == v_max {
        v_min -= 0.5;
        v_max += 0.5;
    }
    let pad = (v_max - v_min) * 1e-9;
    v_max += pad;

    let duration = len as f64 / fs;
    let t_edges: Vec<f64> = (0..=t_bins).map(|i| duration * i as f64 / t_bins as f64).collect();
    let v_edges: Vec<f64> = (0..=v_bins)
        .map(|i| v_min + (v_max - v_min) * i as f64 / v_bins as f64)
        .collect();

    let mut counts = vec![0u64; t_bins * v_bins];
    for tr in traces {
        for (k, v) in tr.samples().iter().enumerate() {
            let tb = (k * t_bins / len).min(t_bins - 1);
            let vb = (((v - v_min) / (v_max - v_min) * v_bins as f64) as usize).min(v_bins - 1);
            counts[tb * v_bins + vb] += 1;
        }
    }
    Ok(PersistenceMap {
        t_edges,
        v_edges,
        counts,
        n_traces: traces.len() as u64,
    })
}

/// Slot-aligned windows for the first `max_traces` slots of a run, each one
/// repetition period long.
pub fn slot_aligned_traces(
    stream: &EventStream,
    array: &ArrayConfig,
    readout: &ReadoutConfig,
    src: &SourceConfig,
    seed: u64,
    max_traces: usize,
) -> Result<Vec<PulseTrace>> {
    let fs = readout.sample_rate();
    let f = src.repetition_rate();
    let per_slot = samples_per_slot(fs, f) as usize;
    let n = (stream.n_slots() as usize).min(max_traces);
    if n == 0 {
        return Err(Error::EmptyInput("no slots to synthesize".into()));
    }
    let make = |slot: u64| {
        synthesize_window(stream, array, readout, src, seed, slot_start_sample(slot, fs, f), per_slot)
    };
    #[cfg(feature = "parallel")]
    {
        return (0..n as u64).into_par_iter().map(make).collect();
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n as u64).map(make).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{ArrayConfig, FiringSubset, Polarity, ReadoutConfig};
    use crate::photonics::{EventStream, SourceConfig};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn array() -> ArrayConfig {
        ArrayConfig::new(vec![7.81, 14.98], 92.2e-9, 17e-6, 5_000.0, 50.0).unwrap()
    }

    fn readout(temperature: f64) -> ReadoutConfig {
        ReadoutConfig::new(50.0, temperature, 500e6, 49.0, 2.5e9, Polarity::Negative).unwrap()
    }

    fn source() -> SourceConfig {
        SourceConfig::new(1.0, 10e6, 10e-12).unwrap()
    }

    fn single_firing(subset: FiringSubset, n_slots: u64) -> EventStream {
        EventStream::new(n_slots, vec![(0, subset)]).unwrap()
    }

    #[test]
    fn noise_rms_examples() {
        assert_relative_eq!(noise_rms(&readout(300.0)), 20.3518e-6, max_relative = 1e-4);
        assert_relative_eq!(noise_rms(&readout(20.0)), 5.25481e-6, max_relative = 1e-4);
        assert_eq!(noise_rms(&readout(0.0)), 0.0);
        // Input-referred noise over bias current reproduces the published
        // noise-resistance figures.
        assert_abs_diff_eq!(noise_rms(&readout(300.0)) / 17e-6, 1.20, epsilon = 0.02);
        assert_abs_diff_eq!(noise_rms(&readout(20.0)) / 17e-6, 0.31, epsilon = 0.02);
    }

    #[test]
    fn single_pulse_peak_and_decay() {
        let ev = single_firing(FiringSubset::new([0]), 4);
        let tr = synthesize(&ev, &array(), &readout(0.0), &source(), 1).unwrap();
        // Peak at the slot-start sample.
        assert_relative_eq!(tr.samples()[0], -0.032364356, max_relative = 1e-6);
        let (_, tau) = exp_fit_tail(&tr, 0.0, 60e-9).unwrap();
        assert_relative_eq!(tau, 11.8054e-9, max_relative = 1e-3);
    }

    #[test]
    fn empty_stream_at_zero_kelvin_is_flat() {
        let ev = EventStream::new(4, vec![]).unwrap();
        let tr = synthesize(&ev, &array(), &readout(0.0), &source(), 1).unwrap();
        assert!(tr.samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noise_std_matches_prediction() {
        let ev = EventStream::new(2, vec![]).unwrap();
        let ro = readout(300.0);
        let tr = synthesize_window(&ev, &array(), &ro, &source(), 77, 0, 2_000_000).unwrap();
        let predicted = noise_rms(&ro) * ro.gain();
        let measured = tr.std();
        assert!(
            (measured / predicted - 1.0).abs() < 0.05,
            "std {measured} vs predicted {predicted}"
        );
    }

    #[test]
    fn noise_histogram_is_gaussian() {
        let ev = EventStream::new(2, vec![]).unwrap();
        let ro = readout(300.0);
        let tr = synthesize_window(&ev, &array(), &ro, &source(), 3, 0, 2_000_000).unwrap();
        let n = tr.len() as f64;
        let mean = tr.samples().iter().sum::<f64>() / n;
        let m2 = tr.samples().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let m3 = tr.samples().iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
        let m4 = tr.samples().iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let skew = m3 / m2.powf(1.5);
        let kurt = m4 / (m2 * m2);
        assert!(skew.abs() < 0.05, "skewness {skew}");
        assert!((kurt - 3.0).abs() < 0.1, "kurtosis {kurt}");
    }

    #[test]
    fn windows_are_consistent_with_full_trace() {
        let ev = EventStream::new(
            8,
            vec![(1, FiringSubset::new([0])), (5, FiringSubset::new([0, 1]))],
        )
        .unwrap();
        let full = synthesize(&ev, &array(), &readout(300.0), &source(), 17).unwrap();
        let win = synthesize_window(&ev, &array(), &readout(300.0), &source(), 17, 500, 700).unwrap();
        for k in 0..win.len() {
            assert_eq!(win.samples()[k], full.samples()[500 + k]);
        }
    }

    #[test]
    fn synthesis_is_linear_over_disjoint_slots() {
        let a = array();
        let ro = readout(0.0);
        let src = source();
        let ev1 = EventStream::new(8, vec![(1, FiringSubset::new([0]))]).unwrap();
        let ev2 = EventStream::new(8, vec![(4, FiringSubset::new([1]))]).unwrap();
        let both = EventStream::new(
            8,
            vec![(1, FiringSubset::new([0])), (4, FiringSubset::new([1]))],
        )
        .unwrap();
        let t1 = synthesize(&ev1, &a, &ro, &src, 9).unwrap();
        let t2 = synthesize(&ev2, &a, &ro, &src, 9).unwrap();
        let t12 = synthesize(&both, &a, &ro, &src, 9).unwrap();
        for k in 0..t12.len() {
            assert_abs_diff_eq!(t12.samples()[k], t1.samples()[k] + t2.samples()[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn coincidence_peak_uses_union_loading() {
        let ev = single_firing(FiringSubset::new([0, 1]), 4);
        let tr = synthesize(&ev, &array(), &readout(0.0), &source(), 1).unwrap();
        // Union through the load, not the sum of individually loaded pulses.
        assert_relative_eq!(tr.samples()[0], -0.075005227, max_relative = 1e-6);
    }

    #[test]
    fn noiseless_peak_ordering_follows_circuit_model() {
        let a = array();
        let ro = readout(0.0);
        let src = source();
        let ev = EventStream::new(
            12,
            vec![
                (0, FiringSubset::new([0])),
                (4, FiringSubset::new([1])),
                (8, FiringSubset::new([0, 1])),
            ],
        )
        .unwrap();
        let peaks = slot_peaks(&ev, &a, &ro, &src, 1, PeakMode::SlotSample { offset: 0 }, 4.0).unwrap();
        assert_eq!(peaks.len(), 3);
        assert!(peaks[0].peak_volts.abs() < peaks[1].peak_volts.abs());
        assert!(peaks[1].peak_volts.abs() < peaks[2].peak_volts.abs());
    }

    #[test]
    fn slot_peaks_parallel_matches_seq() {
        let a = array();
        let ro = readout(300.0);
        let src = source();
        let ev = crate::photonics::sample_events(
            &src,
            &crate::photonics::OpticalPath::new(vec![0.304, 0.156], vec![0.0, 0.0]).unwrap(),
            20_000,
            5,
        );
        let par = slot_peaks(&ev, &a, &ro, &src, 5, PeakMode::SlotSample { offset: 0 }, 4.0).unwrap();
        let seq = slot_peaks_seq(&ev, &a, &ro, &src, 5, 0, 4.0).unwrap();
        assert_eq!(par, seq);
    }

    #[test]
    fn exp_fit_recovers_tau_exactly_without_noise() {
        let fs = 2.5e9;
        let tau = 11.81e-9;
        let samples: Vec<f64> = (0..256).map(|k| -0.032 * (-(k as f64) / (tau * fs)).exp()).collect();
        let tr = PulseTrace::new(fs, 0.0, samples).unwrap();
        let (a, t) = exp_fit_tail(&tr, 0.0, 100e-9).unwrap();
        assert_relative_eq!(t, tau, max_relative = 1e-3 * 0.1);
        assert_relative_eq!(a, -0.032, max_relative = 1e-6);
    }

    #[test]
    fn exp_fit_survives_published_noise_level() {
        // sigma = 3.7 mV on a 32 mV pulse; tau recovered within 5% on
        // average over seeds.
        let fs = 2.5e9;
        let tau = 11.81e-9;
        let mut errs = Vec::new();
        for seed in 0..20u64 {
            let mut rng = crate::rng::stream_rng(seed, crate::rng::NS_NOISE, 0);
            let samples: Vec<f64> = (0..64)
                .map(|k| {
                    let clean = -0.032 * (-(k as f64) / (tau * fs)).exp();
                    let w: f64 = rng.sample(StandardNormal);
                    clean + 3.7e-3 * w
                })
                .collect();
            let tr = PulseTrace::new(fs, 0.0, samples).unwrap();
            if let Ok((_, t)) = exp_fit_tail(&tr, 0.0, 16e-9) {
                errs.push((t / tau - 1.0).abs());
            }
        }
        assert!(errs.len() >= 18);
        let mean_err = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean_err < 0.05, "mean tau error {mean_err}");
    }

    #[test]
    fn exp_fit_rejects_flat_window() {
        let tr = PulseTrace::new(2.5e9, 0.0, vec![0.0; 64]).unwrap();
        assert!(matches!(exp_fit_tail(&tr, 0.0, 20e-9), Err(Error::Fit(_))));
    }

    #[test]
    fn persistence_basics() {
        let fs = 1e9;
        let constant = PulseTrace::new(fs, 0.0, vec![0.25; 64]).unwrap();
        let map = persistence(&[constant], 8, 16).unwrap();
        // Single occupied voltage row.
        let occupied: Vec<usize> = (0..16).filter(|vb| (0..8).any(|tb| map.count(tb, *vb) > 0)).collect();
        assert_eq!(occupied.len(), 1);

        // Two-level input: two clusters.
        let lo = PulseTrace::new(fs, 0.0, vec![0.0; 64]).unwrap();
        let hi = PulseTrace::new(fs, 0.0, vec![1.0; 64]).unwrap();
        let map = persistence(&[lo, hi], 8, 16).unwrap();
        let occupied: Vec<usize> = (0..16).filter(|vb| (0..8).any(|tb| map.count(tb, *vb) > 0)).collect();
        assert_eq!(occupied.len(), 2);

        assert!(persistence(&[], 8, 16).is_err());
    }

    #[test]
    fn persistence_marginals_count_traces() {
        // One sample per time bin: each time bin's voltage marginal equals
        // the trace count.
        let fs = 1e9;
        let traces: Vec<PulseTrace> = (0..5)
            .map(|i| PulseTrace::new(fs, 0.0, vec![i as f64 * 0.1, 0.3, -0.2, 0.7]).unwrap())
            .collect();
        let map = persistence(&traces, 4, 10).unwrap();
        for tb in 0..4 {
            let marginal: u64 = (0..10).map(|vb| map.count(tb, vb)).sum();
            assert_eq!(marginal, 5);
        }
    }

    #[test]
    fn cluster_peak_finder() {
        let mut counts = vec![0u64; 60];
        for (center, height) in [(10usize, 100u64), (30, 60), (50, 30)] {
            for d in 0..4 {
                counts[center - d] += height / (d as u64 + 1);
                counts[center + d] += height / (d as u64 + 1);
            }
        }
        let peaks = voltage_cluster_peaks(&counts, 1, 5.0);
        assert_eq!(peaks.len(), 3);
    }
}
