//! Power, energy and efficiency arithmetic, and comparison tables.
//!
//! Inference is pipelined at the modulation clock, so one inference costs
//! one clock period of system power: `E = P / f`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MacScope, TomfnModel};
use crate::photonic::CompiledModel;

/// Component-level power model, in watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerModel {
    pub p_per_mzi_heater: f64,
    pub p_per_laser_channel: f64,
    pub p_per_modulator: f64,
    pub p_per_detector: f64,
    pub p_electronic_overhead: f64,
    /// Replaces the component sum when set.
    pub total_override: Option<f64>,
}

impl Default for PowerModel {
    /// Placeholder figures, not calibrated against any device.
    fn default() -> Self {
        PowerModel {
            p_per_mzi_heater: 0.010,
            p_per_laser_channel: 0.100,
            p_per_modulator: 0.025,
            p_per_detector: 0.050,
            p_electronic_overhead: 0.0,
            total_override: None,
        }
    }
}

impl PowerModel {
    pub fn zero() -> Self {
        PowerModel {
            p_per_mzi_heater: 0.0,
            p_per_laser_channel: 0.0,
            p_per_modulator: 0.0,
            p_per_detector: 0.0,
            p_electronic_overhead: 0.0,
            total_override: None,
        }
    }

    pub fn with_override(total: f64) -> Self {
        PowerModel { total_override: Some(total), ..PowerModel::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("p_per_mzi_heater", self.p_per_mzi_heater),
            ("p_per_laser_channel", self.p_per_laser_channel),
            ("p_per_modulator", self.p_per_modulator),
            ("p_per_detector", self.p_per_detector),
            ("p_electronic_overhead", self.p_electronic_overhead),
            ("total_override", self.total_override.unwrap_or(0.0)),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(name, format!("must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Hardware counts the power model is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PowerCounts {
    pub mzis: usize,
    pub wdm_channels: usize,
    pub n_inputs: usize,
    pub n_outputs: usize,
}

pub fn estimate_power(counts: &PowerCounts, pm: &PowerModel) -> f64 {
    if let Some(total) = pm.total_override {
        return total;
    }
    counts.mzis as f64 * pm.p_per_mzi_heater
        + counts.wdm_channels as f64 * pm.p_per_laser_channel
        + counts.n_inputs as f64 * pm.p_per_modulator
        + counts.n_outputs as f64 * pm.p_per_detector
        + pm.p_electronic_overhead
}

pub fn energy_per_inference(power_w: f64, f_hz: f64) -> Result<f64> {
    if !(f_hz > 0.0) {
        return Err(Error::InvalidArgument(format!("frequency must be > 0, got {f_hz}")));
    }
    Ok(power_w / f_hz)
}

pub fn mac_per_joule(macs: u64, power_w: f64, f_hz: f64) -> Result<f64> {
    if !(power_w > 0.0) {
        return Err(Error::InvalidArgument(format!("power must be > 0, got {power_w}")));
    }
    if !(f_hz > 0.0) {
        return Err(Error::InvalidArgument(format!("frequency must be > 0, got {f_hz}")));
    }
    Ok(macs as f64 * f_hz / power_w)
}

/// The counts needed for a comparison row. A full [`CostReport`] also
/// deserializes into this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    #[serde(default)]
    pub label: Option<String>,
    pub params: u64,
    pub mzis: u64,
    #[serde(default)]
    pub stages: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub param_ratio: f64,
    pub mzi_ratio: f64,
    /// One-decimal renderings, e.g. `"92.8×"`.
    pub param_ratio_text: String,
    pub mzi_ratio_text: String,
}

pub fn render_ratio(r: f64) -> String {
    format!("{r:.1}×")
}

/// How many times fewer parameters and MZIs `candidate` needs than `reference`.
pub fn compare(reference: &CountSummary, candidate: &CountSummary) -> Result<Comparison> {
    if candidate.params == 0 || candidate.mzis == 0 {
        return Err(Error::InvalidArgument("candidate params and mzis must be nonzero".into()));
    }
    let param_ratio = reference.params as f64 / candidate.params as f64;
    let mzi_ratio = reference.mzis as f64 / candidate.mzis as f64;
    Ok(Comparison { param_ratio, mzi_ratio, param_ratio_text: render_ratio(param_ratio), mzi_ratio_text: render_ratio(mzi_ratio) })
}

/// A published figure that this implementation reports but does not reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalReference {
    pub quantity: String,
    pub value: String,
    pub status: String,
}

/// External reference values for the tensorized attention model and the
/// dense low-rank-fusion baseline.
pub fn external_references() -> Vec<ExternalReference> {
    let not_desk = "external reference, not reproduced: the emotion dataset is access-gated";
    let undisclosed = "external reference, not reproduced: depends on an undisclosed rank profile and mesh layout";
    let entry = |q: &str, v: &str, s: &str| ExternalReference { quantity: q.into(), value: v.into(), status: s.into() };
    vec![
        entry("F1 happy / sad / angry / neutral", "83.4 / 82.7 / 85.7 / 66.7", not_desk),
        entry("params (tensorized attention model)", "1152", undisclosed),
        entry("MZIs (tensorized attention model)", "1691", undisclosed),
        entry("stages (tensorized attention model)", "166", undisclosed),
        entry("core inventory", "38 of 4x4, 74 of 6x6, 16 of 8x8", undisclosed),
        entry("params / MZIs (dense low-rank fusion baseline)", "106912 / 86802", "external reference, used only as --compare input"),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: Option<String>,
    pub params: u64,
    pub dense_equivalent_params: u64,
    pub mzis: u64,
    pub stages: u64,
    pub wdm_channels: u64,
    /// MAC counts keyed by scope name.
    pub macs: BTreeMap<String, u64>,
    /// Scope used for the efficiency figure.
    pub mac_scope: MacScope,
    pub power_w: f64,
    /// `"override"` or `"component model (uncalibrated)"`.
    pub power_source: String,
    pub frequency_hz: f64,
    pub energy_per_inference_j: f64,
    /// Absent when the power is zero.
    pub mac_per_j: Option<f64>,
    pub core_histogram: BTreeMap<String, usize>,
    pub compression_ratios: BTreeMap<String, f64>,
    pub external_references: Vec<ExternalReference>,
}

fn scope_name(s: MacScope) -> &'static str {
    match s {
        MacScope::SubnetWeightsOnly => "subnet_weights_only",
        MacScope::AllWeights => "all_weights",
        MacScope::FullRuntime => "full_runtime",
    }
}

/// Counts, power and efficiency for a built and compiled model.
pub fn build_report(model: &TomfnModel, compiled: &CompiledModel, pm: &PowerModel, f_hz: f64, scope: MacScope) -> Result<CostReport> {
    pm.validate()?;
    let cfg = model.config();
    let pc = model.param_count();
    let hw = compiled.summary();
    let counts = PowerCounts {
        mzis: hw.mzis,
        wdm_channels: hw.wdm_channels,
        n_inputs: cfg.visual_dims[0] + cfg.audio_dims[0] + cfg.text.d_model,
        n_outputs: 2 * cfg.heads,
    };
    let power_w = estimate_power(&counts, pm);
    let macs: BTreeMap<String, u64> = [MacScope::SubnetWeightsOnly, MacScope::AllWeights, MacScope::FullRuntime]
        .into_iter()
        .map(|s| (scope_name(s).to_string(), model.mac_count(s)))
        .collect();
    let mac = model.mac_count(scope);
    let energy = energy_per_inference(power_w, f_hz)?;
    let mac_per_j = if power_w > 0.0 { Some(mac_per_joule(mac, power_w, f_hz)?) } else { None };
    let mut ratios = BTreeMap::new();
    ratios.insert("dense_params_over_params".to_string(), pc.dense_equivalent_total as f64 / pc.total as f64);
    ratios.insert("subnet_dense_over_subnet".to_string(), pc.subnet_dense_equivalent as f64 / pc.subnet_total as f64);
    Ok(CostReport {
        label: Some("this model".to_string()),
        params: pc.total as u64,
        dense_equivalent_params: pc.dense_equivalent_total as u64,
        mzis: hw.mzis as u64,
        stages: hw.stages as u64,
        wdm_channels: hw.wdm_channels as u64,
        macs,
        mac_scope: scope,
        power_w,
        power_source: if pm.total_override.is_some() { "override".into() } else { "component model (uncalibrated)".into() },
        frequency_hz: f_hz,
        energy_per_inference_j: energy,
        mac_per_j,
        core_histogram: hw.histogram,
        compression_ratios: ratios,
        external_references: external_references(),
    })
}

impl CostReport {
    pub fn summary(&self) -> CountSummary {
        CountSummary { label: self.label.clone(), params: self.params, mzis: self.mzis, stages: Some(self.stages) }
    }
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub params: u64,
    pub mzis: u64,
    pub stages: Option<u64>,
    pub mac_per_j: Option<f64>,
}

impl From<&CountSummary> for TableRow {
    fn from(s: &CountSummary) -> Self {
        TableRow { label: s.label.clone().unwrap_or_else(|| "-".into()), params: s.params, mzis: s.mzis, stages: s.stages, mac_per_j: None }
    }
}

impl From<&CostReport> for TableRow {
    fn from(r: &CostReport) -> Self {
        TableRow {
            label: r.label.clone().unwrap_or_else(|| "-".into()),
            params: r.params,
            mzis: r.mzis,
            stages: Some(r.stages),
            mac_per_j: r.mac_per_j,
        }
    }
}

/// Fixed-width table with `# Param`, `# MZI`, `# stage` and efficiency columns.
pub fn render_table(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>8}  {:>12}", "Model", "# Param", "# MZI", "# stage", "MAC/J");
    let _ = writeln!(out, "{}", "-".repeat(width + 48));
    for r in rows {
        let stages = r.stages.map_or("-".to_string(), |s| s.to_string());
        let eff = r.mac_per_j.map_or("-".to_string(), |e| format!("{e:.3e}"));
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>8}  {:>12}", r.label, r.params, r.mzis, stages, eff);
    }
    out
}

/// Human-readable summary of a report.
pub fn render_report(report: &CostReport) -> String {
    let mut out = render_table(&[TableRow::from(report)]);
    let _ = writeln!(out);
    let _ = writeln!(out, "dense-equivalent params  {}", report.dense_equivalent_params);
    for (scope, v) in &report.macs {
        let _ = writeln!(out, "MACs ({scope}){}  {v}", " ".repeat(20usize.saturating_sub(scope.len())));
    }
    let _ = writeln!(out, "power                    {:.4} W ({})", report.power_w, report.power_source);
    let _ = writeln!(out, "frequency                {:.3e} Hz", report.frequency_hz);
    let _ = writeln!(out, "energy per inference     {:.3} nJ", report.energy_per_inference_j * 1e9);
    match report.mac_per_j {
        Some(e) => {
            let _ = writeln!(out, "efficiency               {e:.3e} MAC/J");
        }
        None => {
            let _ = writeln!(out, "efficiency               undefined at zero power");
        }
    }
    let hist: Vec<String> = report.core_histogram.iter().map(|(k, v)| format!("{v} of {k}")).collect();
    let _ = writeln!(out, "photonic cores           {}", hist.join(", "));
    let _ = writeln!(out, "WDM channels             {}", report.wdm_channels);
    let _ = writeln!(out);
    let _ = writeln!(out, "External reference values (reported, not reproduced):");
    for e in &report.external_references {
        let _ = writeln!(out, "  {}: {} [{}]", e.quantity, e.value, e.status);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_examples() {
        let counts = PowerCounts { mzis: 100, wdm_channels: 3, n_inputs: 10, n_outputs: 4 };
        assert_eq!(estimate_power(&counts, &PowerModel::with_override(79.87)), 79.87);
        assert_eq!(estimate_power(&counts, &PowerModel::zero()), 0.0);
        let heater = PowerModel { p_per_mzi_heater: 0.010, ..PowerModel::zero() };
        let only_mzis = PowerCounts { mzis: 100, ..PowerCounts::default() };
        assert!((estimate_power(&only_mzis, &heater) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_is_monotone() {
        let pm = PowerModel::default();
        let base = PowerCounts { mzis: 10, wdm_channels: 2, n_inputs: 5, n_outputs: 3 };
        let p0 = estimate_power(&base, &pm);
        for bumped in [
            PowerCounts { mzis: 11, ..base },
            PowerCounts { wdm_channels: 3, ..base },
            PowerCounts { n_inputs: 6, ..base },
            PowerCounts { n_outputs: 4, ..base },
        ] {
            assert!(estimate_power(&bumped, &pm) >= p0);
        }
    }

    #[test]
    fn energy_examples() {
        assert!((energy_per_inference(79.87, 1e10).unwrap() - 7.987e-9).abs() < 1e-20);
        assert!((energy_per_inference(10.0, 1e9).unwrap() - 1e-8).abs() < 1e-22);
        assert_eq!(energy_per_inference(0.0, 1e9).unwrap(), 0.0);
        assert!(energy_per_inference(1.0, 0.0).is_err());
    }

    #[test]
    fn efficiency_examples() {
        let e = mac_per_joule(297_008, 79.87, 1e10).unwrap();
        assert!((e - 3.7186e13).abs() / 3.7186e13 < 1e-4);
        assert!((e - 3.7e13).abs() / 3.7e13 < 0.01);
        assert_eq!(mac_per_joule(1, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(mac_per_joule(1000, 2.0, 1e9).unwrap() * 2.0, mac_per_joule(1000, 1.0, 1e9).unwrap());
        assert!(mac_per_joule(1, 0.0, 1.0).is_err());
        let (p, f, macs) = (79.87, 1e10, 297_008u64);
        let prod = energy_per_inference(p, f).unwrap() * mac_per_joule(macs, p, f).unwrap();
        assert!((prod - macs as f64).abs() / (macs as f64) < 1e-9);
    }

    #[test]
    fn compare_examples() {
        let reference = CountSummary { label: None, params: 106_912, mzis: 86_802, stages: None };
        let cand = CountSummary { label: None, params: 1_152, mzis: 1_691, stages: Some(166) };
        let c = compare(&reference, &cand).unwrap();
        assert_eq!(c.param_ratio_text, "92.8×");
        assert_eq!(c.mzi_ratio_text, "51.3×");
        let same = compare(&cand, &cand).unwrap();
        assert_eq!((same.param_ratio_text.as_str(), same.mzi_ratio_text.as_str()), ("1.0×", "1.0×"));
        let back = compare(&cand, &reference).unwrap();
        assert!((back.param_ratio * c.param_ratio - 1.0).abs() < 1e-12);
        let zero = CountSummary { params: 0, ..cand.clone() };
        assert!(compare(&reference, &zero).is_err());
    }

    #[test]
    fn table_has_columns() {
        let t = render_table(&[TableRow { label: "x".into(), params: 5, mzis: 7, stages: None, mac_per_j: Some(3.7e13) }]);
        for col in ["# Param", "# MZI", "# stage", "MAC/J", "3.700e13"] {
            assert!(t.contains(col), "{t}");
        }
    }
}
