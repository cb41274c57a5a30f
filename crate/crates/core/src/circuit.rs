//! Static electrical model of the series detector chain loaded by the
//! readout amplifier.
//!
//! Each array element is a nanowire with a dedicated parallel resistor
//! `R_i`. While an element is normal its bias current is fully diverted
//! into `R_i`, so a firing subset presents the series sum of its
//! resistances to the output, in parallel with the amplifier input
//! resistance. Everything here is a pure function of immutable configs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output pulse polarity at the amplifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Positive => 1.0,
            Polarity::Negative => -1.0,
        }
    }
}

/// The detector chain: one parallel resistor per element plus the shared
/// electrical parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayConfig {
    resistances: Vec<f64>,
    kinetic_inductance: f64,
    bias_current: f64,
    hotspot_resistance: f64,
    latching_resistance: f64,
}

impl ArrayConfig {
    pub fn new(
        resistances: Vec<f64>,
        kinetic_inductance: f64,
        bias_current: f64,
        hotspot_resistance: f64,
        latching_resistance: f64,
    ) -> Result<Self> {
        if resistances.is_empty() {
            return Err(Error::config("array.resistances: at least one element required"));
        }
        if resistances.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::config(
                "array.resistances: all values must be strictly positive and finite",
            ));
        }
        let max_r = resistances.iter().cloned().fold(f64::MIN, f64::max);
        if hotspot_resistance < 50.0 * max_r {
            return Err(Error::config(format!(
                "array.hotspot_resistance: {hotspot_resistance} ohms is below 50x the largest \
                 parallel resistance ({max_r} ohms); the full-diversion model needs R_n >> R_i"
            )));
        }
        if !(bias_current > 0.0) || !bias_current.is_finite() {
            return Err(Error::config("array.bias_current: must be > 0"));
        }
        if !(kinetic_inductance > 0.0) || !kinetic_inductance.is_finite() {
            return Err(Error::config("array.kinetic_inductance: must be > 0"));
        }
        let total: f64 = resistances.iter().sum();
        if total >= latching_resistance {
            return Err(Error::config(format!(
                "array.latching_resistance: sum of resistances ({total} ohms) must stay below \
                 the latching threshold ({latching_resistance} ohms)"
            )));
        }
        Ok(Self {
            resistances,
            kinetic_inductance,
            bias_current,
            hotspot_resistance,
            latching_resistance,
        })
    }

    pub fn len(&self) -> usize {
        self.resistances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resistances.is_empty()
    }

    pub fn resistances(&self) -> &[f64] {
        &self.resistances
    }

    pub fn kinetic_inductance(&self) -> f64 {
        self.kinetic_inductance
    }

    pub fn bias_current(&self) -> f64 {
        self.bias_current
    }

    pub fn hotspot_resistance(&self) -> f64 {
        self.hotspot_resistance
    }

    pub fn latching_resistance(&self) -> f64 {
        self.latching_resistance
    }
}

/// Amplifier/digitizer parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReadoutConfig {
    input_resistance: f64,
    temperature: f64,
    bandwidth: f64,
    gain_db: f64,
    sample_rate: f64,
    polarity: Polarity,
}

impl ReadoutConfig {
    pub fn new(
        input_resistance: f64,
        temperature: f64,
        bandwidth: f64,
        gain_db: f64,
        sample_rate: f64,
        polarity: Polarity,
    ) -> Result<Self> {
        // input_resistance may be +inf to model an unloaded (linear) chain.
        if !(input_resistance > 0.0) {
            return Err(Error::config("readout.input_resistance: must be > 0"));
        }
        if !(temperature >= 0.0) || !temperature.is_finite() {
            return Err(Error::config("readout.temperature: must be >= 0"));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::config("readout.bandwidth: must be > 0"));
        }
        if !gain_db.is_finite() {
            return Err(Error::config("readout.gain_db: must be finite"));
        }
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(Error::config("readout.sample_rate: must be > 0"));
        }
        if sample_rate < 4.0 * bandwidth {
            return Err(Error::config(format!(
                "readout.sample_rate: {sample_rate} Hz is below 4x the bandwidth ({bandwidth} Hz)"
            )));
        }
        Ok(Self {
            input_resistance,
            temperature,
            bandwidth,
            gain_db,
            sample_rate,
            polarity,
        })
    }

    pub fn input_resistance(&self) -> f64 {
        self.input_resistance
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn gain_db(&self) -> f64 {
        self.gain_db
    }

    /// Linear voltage gain `10^(G/20)`.
    pub fn gain(&self) -> f64 {
        10f64.powf(self.gain_db / 20.0)
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }
}

/// The set of array elements switching in one laser slot. Indices are
/// 0-based, kept sorted and unique; the empty set means "no event".
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FiringSubset(Vec<u16>);

impl FiringSubset {
    pub fn empty() -> Self {
        FiringSubset(Vec::new())
    }

    pub fn new(indices: impl IntoIterator<Item = u16>) -> Self {
        let mut v: Vec<u16> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        FiringSubset(v)
    }

    pub fn indices(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: u16) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub(crate) fn push_checked(&mut self, index: u16) {
        if let Err(pos) = self.0.binary_search(&index) {
            self.0.insert(pos, index);
        }
    }

    pub(crate) fn remove(&mut self, index: u16) {
        if let Ok(pos) = self.0.binary_search(&index) {
            self.0.remove(pos);
        }
    }
}

impl std::fmt::Display for FiringSubset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, "}}")
    }
}

/// Series resistance presented by a firing subset: `sum of R_i`, 0 for the
/// empty set.
pub fn subset_resistance(subset: &FiringSubset, array: &ArrayConfig) -> Result<f64> {
    let mut total = 0.0;
    for &i in subset.indices() {
        let r = array
            .resistances
            .get(i as usize)
            .ok_or_else(|| Error::config(format!("subset index {i} out of range for {}-element array", array.len())))?;
        total += r;
    }
    Ok(total)
}

/// Chain resistance in parallel with the amplifier input:
/// `r_s * R_out / (r_s + R_out)`. Returns `r_s` unchanged for an infinite
/// input resistance.
pub fn loaded_resistance(series_resistance: f64, readout: &ReadoutConfig) -> f64 {
    let r_out = readout.input_resistance;
    if series_resistance == 0.0 {
        return 0.0;
    }
    if r_out.is_infinite() {
        return series_resistance;
    }
    series_resistance * r_out / (series_resistance + r_out)
}

/// Post-amplifier peak voltage for a firing subset:
/// `sign * I_B * loaded(sum R_i) * 10^(G/20)`.
pub fn ideal_amplitude(
    subset: &FiringSubset,
    array: &ArrayConfig,
    readout: &ReadoutConfig,
) -> Result<f64> {
    let r_s = subset_resistance(subset, array)?;
    Ok(readout.polarity.sign() * array.bias_current * loaded_resistance(r_s, readout) * readout.gain())
}

/// Pulse recovery time of one element: `L_k / R_i`.
pub fn recovery_time(index: usize, array: &ArrayConfig) -> Result<f64> {
    let r = array
        .resistances
        .get(index)
        .ok_or_else(|| Error::config(format!("element index {index} out of range for {}-element array", array.len())))?;
    Ok(array.kinetic_inductance / r)
}
