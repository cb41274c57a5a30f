//! Scenario files: one TOML document holding every config a run needs.
//! Keys carry explicit SI units in their names; nothing is inferred.

use std::path::Path;

use serde::Deserialize;

use crate::circuit::{ArrayConfig, Polarity, ReadoutConfig};
use crate::error::{Error, Result};
use crate::photonics::{dead_time_slots, OpticalPath, SourceConfig};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    array: RawArray,
    readout: RawReadout,
    source: RawSource,
    optics: RawOptics,
    run: RawRun,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArray {
    resistances_ohms: Vec<f64>,
    kinetic_inductance_henries: f64,
    bias_current_amps: f64,
    hotspot_resistance_ohms: f64,
    latching_resistance_ohms: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReadout {
    input_resistance_ohms: f64,
    temperature_kelvin: f64,
    bandwidth_hertz: f64,
    gain_db: f64,
    sample_rate_hertz: f64,
    polarity: Polarity,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSource {
    mean_photons_per_pulse: f64,
    repetition_rate_hertz: f64,
    pulse_width_seconds: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptics {
    efficiencies: Vec<f64>,
    dark_count_rates_hertz: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    n_slots: u64,
    seed: u64,
    #[serde(default)]
    outputs: RawOutputs,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutputs {
    #[serde(default = "default_true")]
    events_csv: bool,
    #[serde(default)]
    trace_slots: usize,
    #[serde(default)]
    persistence_t_bins: usize,
    #[serde(default)]
    persistence_v_bins: usize,
    #[serde(default)]
    persistence_traces: usize,
}

fn default_true() -> bool {
    true
}

/// What a simulate run should write.
#[derive(Debug, Clone)]
pub struct OutputOptions {
    pub events_csv: bool,
    /// Write the first N slot windows as individual trace CSVs.
    pub trace_slots: usize,
    /// Build a persistence map over the first `persistence_traces` slot
    /// windows when both bin counts are non-zero.
    pub persistence_t_bins: usize,
    pub persistence_v_bins: usize,
    pub persistence_traces: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub n_slots: u64,
    pub seed: u64,
    pub outputs: OutputOptions,
}

/// A fully validated run description.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub array: ArrayConfig,
    pub readout: ReadoutConfig,
    pub source: SourceConfig,
    pub optics: OpticalPath,
    pub run: RunConfig,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let array = ArrayConfig::new(
            raw.array.resistances_ohms,
            raw.array.kinetic_inductance_henries,
            raw.array.bias_current_amps,
            raw.array.hotspot_resistance_ohms,
            raw.array.latching_resistance_ohms,
        )?;
        let readout = ReadoutConfig::new(
            raw.readout.input_resistance_ohms,
            raw.readout.temperature_kelvin,
            raw.readout.bandwidth_hertz,
            raw.readout.gain_db,
            raw.readout.sample_rate_hertz,
            raw.readout.polarity,
        )?;
        let source = SourceConfig::new(
            raw.source.mean_photons_per_pulse,
            raw.source.repetition_rate_hertz,
            raw.source.pulse_width_seconds,
        )?;
        let optics = OpticalPath::new(raw.optics.efficiencies, raw.optics.dark_count_rates_hertz)?;
        if optics.len() != array.len() {
            return Err(Error::config(format!(
                "optics.efficiencies: {} entries for a {}-element array",
                optics.len(),
                array.len()
            )));
        }
        if raw.run.n_slots == 0 {
            return Err(Error::config("run.n_slots: must be >= 1"));
        }
        Ok(Scenario {
            array,
            readout,
            source,
            optics,
            run: RunConfig {
                n_slots: raw.run.n_slots,
                seed: raw.run.seed,
                outputs: OutputOptions {
                    events_csv: raw.run.outputs.events_csv,
                    trace_slots: raw.run.outputs.trace_slots,
                    persistence_t_bins: raw.run.outputs.persistence_t_bins,
                    persistence_v_bins: raw.run.outputs.persistence_v_bins,
                    persistence_traces: raw.run.outputs.persistence_traces,
                },
            },
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Per-element post-firing insensitive slot counts for this run.
    pub fn dead_slots(&self) -> Vec<u32> {
        (0..self.array.len())
            .map(|i| {
                let tau = self.array.kinetic_inductance() / self.array.resistances()[i];
                dead_time_slots(tau, self.source.repetition_rate())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const EXAMPLE: &str = r#"
[array]
resistances_ohms = [7.81, 14.98]
kinetic_inductance_henries = 92.2e-9
bias_current_amps = 17e-6
hotspot_resistance_ohms = 5000.0
latching_resistance_ohms = 50.0

[readout]
input_resistance_ohms = 50.0
temperature_kelvin = 300.0
bandwidth_hertz = 500e6
gain_db = 49.0
sample_rate_hertz = 2.5e9
polarity = "negative"

[source]
mean_photons_per_pulse = 1.0
repetition_rate_hertz = 10e6
pulse_width_seconds = 10e-12

[optics]
efficiencies = [0.304, 0.156]
dark_count_rates_hertz = [0.0, 0.0]

[run]
n_slots = 1000
seed = 7
"#;

    #[test]
    fn parses_and_validates() {
        let sc = Scenario::from_toml_str(EXAMPLE).unwrap();
        assert_eq!(sc.array.len(), 2);
        assert_eq!(sc.run.n_slots, 1000);
        assert!(sc.run.outputs.events_csv);
        // 5 tau well inside one 100 ns slot: nothing blocked.
        assert_eq!(sc.dead_slots(), vec![0, 0]);
    }

    #[test]
    fn rejects_mismatched_optics() {
        let bad = EXAMPLE.replace("efficiencies = [0.304, 0.156]", "efficiencies = [0.304]").replace(
            "dark_count_rates_hertz = [0.0, 0.0]",
            "dark_count_rates_hertz = [0.0]",
        );
        let err = Scenario::from_toml_str(&bad).unwrap_err();
        assert!(err.to_string().contains("optics.efficiencies"));
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = EXAMPLE.replace("seed = 7", "seed = 7\nbias = 3");
        assert!(Scenario::from_toml_str(&bad).is_err());
    }
}
