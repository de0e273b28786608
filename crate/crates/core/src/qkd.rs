//! Analytical coincidence-window, accidental-rate and QBER model.
//!
//! All times are in picoseconds and all rates in counts per second. Products of
//! a rate pair and a window are divided by 1e12 to land in counts per second.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const PS_PER_S: f64 = 1e12;

fn non_negative(name: &str, x: f64) -> Result<f64> {
    if x >= 0.0 && !x.is_nan() {
        Ok(x)
    } else {
        Err(Error::InvalidArgument(format!(
            "{name} must be non-negative, got {x}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QkdParams {
    pub delta_t0: f64,
    pub w_inl_pp: f64,
    pub sigma_spd: f64,
    pub sigma_other: f64,
    pub sigma_tdc: f64,
    pub s_a_sig: f64,
    pub s_b_sig: f64,
    pub d_a: f64,
    pub d_b: f64,
    pub c_true: f64,
    pub e_base: f64,
}

impl QkdParams {
    pub fn validate(&self) -> Result<()> {
        for (name, x) in [
            ("delta_t0", self.delta_t0),
            ("w_inl_pp", self.w_inl_pp),
            ("sigma_spd", self.sigma_spd),
            ("sigma_other", self.sigma_other),
            ("sigma_tdc", self.sigma_tdc),
            ("s_a_sig", self.s_a_sig),
            ("s_b_sig", self.s_b_sig),
            ("d_a", self.d_a),
            ("d_b", self.d_b),
            ("c_true", self.c_true),
        ] {
            non_negative(name, x)?;
            if x.is_infinite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite")));
            }
        }
        if !(0.0..=0.5).contains(&self.e_base) {
            return Err(Error::InvalidArgument(format!(
                "e_base must lie in [0, 0.5], got {}",
                self.e_base
            )));
        }
        Ok(())
    }

    /// Same link with an ideal TDC (`sigma_tdc = 0`, `w_inl_pp = 0`).
    pub fn without_tdc(&self) -> Self {
        QkdParams {
            sigma_tdc: 0.0,
            w_inl_pp: 0.0,
            ..*self
        }
    }

    pub fn with_tdc(&self, sigma_tdc: f64, w_inl_pp: f64) -> Self {
        QkdParams {
            sigma_tdc,
            w_inl_pp,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QkdPoint {
    pub delta_t_eff: f64,
    pub sigma_sys: f64,
    pub eta_coin: f64,
    pub s_a: f64,
    pub s_b: f64,
    pub c_acc: f64,
    pub c_det: f64,
    pub qber: f64,
    pub delta_qber_tdc: f64,
    pub secret_fraction: f64,
}

/// `delta_t0 + w_inl_pp`. An upper bound: it assumes the full peak-to-peak INL
/// has to be tolerated by the window.
pub fn effective_window(delta_t0: f64, w_inl_pp: f64) -> Result<f64> {
    Ok(non_negative("delta_t0", delta_t0)? + non_negative("w_inl_pp", w_inl_pp)?)
}

pub fn system_jitter(sigma_spd: f64, sigma_other: f64, sigma_tdc: f64) -> Result<f64> {
    let a = non_negative("sigma_spd", sigma_spd)?;
    let b = non_negative("sigma_other", sigma_other)?;
    let c = non_negative("sigma_tdc", sigma_tdc)?;
    Ok((a * a + b * b + c * c).sqrt())
}

/// Fraction of true coincidences inside the window: `erf(dt / (2 sqrt(2) sigma))`.
pub fn capture_fraction(delta_t_eff: f64, sigma_sys: f64) -> Result<f64> {
    let dt = non_negative("delta_t_eff", delta_t_eff)?;
    let s = non_negative("sigma_sys", sigma_sys)?;
    if s == 0.0 {
        return Ok(if dt > 0.0 { 1.0 } else { 0.0 });
    }
    Ok(libm::erf(dt / (2.0 * std::f64::consts::SQRT_2 * s)))
}

pub fn singles(s_sig: f64, dark: f64) -> Result<f64> {
    Ok(non_negative("s_sig", s_sig)? + non_negative("dark", dark)?)
}

/// `S_A * S_B * dt` with `dt` in ps.
pub fn accidental_rate(s_a: f64, s_b: f64, delta_t_eff: f64) -> Result<f64> {
    Ok(non_negative("s_a", s_a)? * non_negative("s_b", s_b)? * non_negative("delta_t_eff", delta_t_eff)?
        / PS_PER_S)
}

fn point_without_delta(p: &QkdParams) -> Result<QkdPoint> {
    p.validate()?;
    let delta_t_eff = effective_window(p.delta_t0, p.w_inl_pp)?;
    let sigma_sys = system_jitter(p.sigma_spd, p.sigma_other, p.sigma_tdc)?;
    let eta_coin = capture_fraction(delta_t_eff, sigma_sys)?;
    let s_a = singles(p.s_a_sig, p.d_a)?;
    let s_b = singles(p.s_b_sig, p.d_b)?;
    let c_acc = accidental_rate(s_a, s_b, delta_t_eff)?;
    let c_sig = eta_coin * p.c_true;
    let c_det = c_sig + c_acc;
    if !(c_det > 0.0) {
        return Err(Error::UnusableOperatingPoint(format!(
            "no detected coincidences (eta*C_true = {c_sig}, C_acc = {c_acc})"
        )));
    }
    let qber = (c_sig * p.e_base + 0.5 * c_acc) / c_det;
    Ok(QkdPoint {
        delta_t_eff,
        sigma_sys,
        eta_coin,
        s_a,
        s_b,
        c_acc,
        c_det,
        qber,
        delta_qber_tdc: 0.0,
        secret_fraction: secret_fraction(qber)?,
    })
}

/// Evaluates the full model, including the TDC-induced QBER increment.
pub fn qber(params: &QkdParams) -> Result<QkdPoint> {
    let mut point = point_without_delta(params)?;
    point.delta_qber_tdc = point.qber - point_without_delta(&params.without_tdc())?.qber;
    Ok(point)
}

/// `qber(params) - qber(params with sigma_tdc = 0 and w_inl_pp = 0)`.
pub fn delta_qber_tdc(params: &QkdParams) -> Result<f64> {
    Ok(qber(params)?.delta_qber_tdc)
}

/// Split of the TDC-induced QBER into single-component contributions. These
/// zero only one TDC term at a time and are diagnostics, not part of the model;
/// the two parts need not add up to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaAttribution {
    pub total: f64,
    /// QBER increase from `sigma_tdc` alone (`w_inl_pp = 0`).
    pub precision_only: f64,
    /// QBER increase from `w_inl_pp` alone (`sigma_tdc = 0`).
    pub window_only: f64,
}

pub fn attribute_delta(params: &QkdParams) -> Result<DeltaAttribution> {
    let base = point_without_delta(&params.without_tdc())?.qber;
    let q = |p: QkdParams| point_without_delta(&p).map(|x| x.qber - base);
    Ok(DeltaAttribution {
        total: q(*params)?,
        precision_only: q(params.with_tdc(params.sigma_tdc, 0.0))?,
        window_only: q(params.with_tdc(0.0, params.w_inl_pp))?,
    })
}

pub fn binary_entropy(q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::OutOfRange(format!("probability {q} outside [0, 1]")));
    }
    if q == 0.0 || q == 1.0 {
        return Ok(0.0);
    }
    Ok(-q * q.log2() - (1.0 - q) * (1.0 - q).log2())
}

/// Asymptotic secret fraction `1 - 2 h2(q)`. Negative values mean no key and
/// are returned unclamped.
pub fn secret_fraction(q: f64) -> Result<f64> {
    Ok(1.0 - 2.0 * binary_entropy(q)?)
}

/// Relative gain `r(q_after) / r(q_before) - 1`.
pub fn secret_fraction_gain(q_before: f64, q_after: f64) -> Result<f64> {
    Ok(secret_fraction(q_after)? / secret_fraction(q_before)? - 1.0)
}

/// Secret fractions of a raw/optimized TDC pair sitting on a shared non-TDC
/// QBER baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecretFractionComparison {
    pub baseline_qber: f64,
    pub qber_before: f64,
    pub qber_after: f64,
    pub r_before: f64,
    pub r_after: f64,
    pub relative_gain: f64,
}

pub fn compare_secret_fraction(
    baseline_qber: f64,
    delta_before: f64,
    delta_after: f64,
) -> Result<SecretFractionComparison> {
    let qber_before = baseline_qber + delta_before;
    let qber_after = baseline_qber + delta_after;
    let r_before = secret_fraction(qber_before)?;
    let r_after = secret_fraction(qber_after)?;
    Ok(SecretFractionComparison {
        baseline_qber,
        qber_before,
        qber_after,
        r_before,
        r_after,
        relative_gain: r_after / r_before - 1.0,
    })
}

/// How the true coincidence rate follows the swept singles rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TrueRateModel {
    /// `C_true` stays at the base parameter value.
    Fixed,
    /// `C_true = eta_pair * min(S_A,sig, S_B,sig)`.
    PairEfficiency { eta_pair: f64 },
}

impl TrueRateModel {
    pub fn c_true(&self, base: &QkdParams, s_a_sig: f64, s_b_sig: f64) -> f64 {
        match *self {
            TrueRateModel::Fixed => base.c_true,
            TrueRateModel::PairEfficiency { eta_pair } => eta_pair * s_a_sig.min(s_b_sig),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub sigma_tdc_ps: f64,
    pub w_inl_pp_ps: f64,
}

impl Variant {
    pub fn new(label: impl Into<String>, sigma_tdc_ps: f64, w_inl_pp_ps: f64) -> Self {
        Variant {
            label: label.into(),
            sigma_tdc_ps,
            w_inl_pp_ps,
        }
    }
}

/// Signal singles per grid point, `(S_A,sig, S_B,sig)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinglesGrid {
    pub points: Vec<(f64, f64)>,
}

impl SinglesGrid {
    pub fn symmetric(rates: &[f64]) -> Self {
        SinglesGrid {
            points: rates.iter().map(|&s| (s, s)).collect(),
        }
    }

    pub fn per_arm(a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::InvalidArgument(format!(
                "per-arm grids differ in length ({} vs {})",
                a.len(),
                b.len()
            )));
        }
        Ok(SinglesGrid {
            points: a.iter().copied().zip(b.iter().copied()).collect(),
        })
    }

    /// `start, start + step, ...` up to and including `stop` (within rounding).
    pub fn linear(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(stop >= start) || !(start >= 0.0) || !stop.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bad grid range start={start} stop={stop} step={step}"
            )));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        let rates: Vec<f64> = (0..n).map(|i| start + i as f64 * step).collect();
        Ok(Self::symmetric(&rates))
    }

    fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::InvalidArgument("singles grid is empty".into()));
        }
        for &(a, b) in &self.points {
            non_negative("grid singles rate", a)?;
            non_negative("grid singles rate", b)?;
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::InvalidArgument("grid rates must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub grid_index: usize,
    pub s_a_sig: f64,
    pub s_b_sig: f64,
    pub variant_label: String,
    pub point: Option<QkdPoint>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantPeak {
    pub label: String,
    pub max_delta_qber: f64,
    pub grid_index: usize,
    pub singles_sig_cps: f64,
    pub qber_at_peak: f64,
}

/// Comparison of two variants over the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub first: String,
    pub second: String,
    /// Largest `delta_qber(first) - delta_qber(second)` over the grid.
    pub max_difference: f64,
    pub grid_index: usize,
    pub singles_sig_cps: f64,
    /// `1 - peak(second) / peak(first)`.
    pub peak_relative_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub base: QkdParams,
    pub true_rate_model: TrueRateModel,
    pub variants: Vec<Variant>,
    pub grid: SinglesGrid,
    /// Grid-major, then variant order.
    pub rows: Vec<SweepRow>,
    pub peaks: Vec<VariantPeak>,
    pub comparisons: Vec<PairComparison>,
}

pub fn sweep(
    base: &QkdParams,
    grid: &SinglesGrid,
    variants: &[Variant],
    true_rate: TrueRateModel,
) -> Result<SweepResult> {
    grid.validate()?;
    if variants.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one variant".into()));
    }
    base.validate()?;
    for v in variants {
        non_negative("variant sigma_tdc", v.sigma_tdc_ps)?;
        non_negative("variant w_inl_pp", v.w_inl_pp_ps)?;
    }

    let rows: Vec<SweepRow> = grid
        .points
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, &(sa, sb))| {
            let at_rate = QkdParams {
                s_a_sig: sa,
                s_b_sig: sb,
                c_true: true_rate.c_true(base, sa, sb),
                ..*base
            };
            variants.iter().map(move |v| {
                let result = qber(&at_rate.with_tdc(v.sigma_tdc_ps, v.w_inl_pp_ps));
                SweepRow {
                    grid_index: i,
                    s_a_sig: sa,
                    s_b_sig: sb,
                    variant_label: v.label.clone(),
                    error: result.as_ref().err().map(|e| e.to_string()),
                    point: result.ok(),
                }
            })
        })
        .collect();

    let nv = variants.len();
    let delta = |i: usize, v: usize| rows[i * nv + v].point.map(|p| p.delta_qber_tdc);

    let peaks = variants
        .iter()
        .enumerate()
        .filter_map(|(v, var)| {
            (0..grid.points.len())
                .filter_map(|i| delta(i, v).map(|d| (i, d)))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                })
                .map(|(i, d)| VariantPeak {
                    label: var.label.clone(),
                    max_delta_qber: d,
                    grid_index: i,
                    singles_sig_cps: grid.points[i].0,
                    qber_at_peak: rows[i * nv + v].point.map_or(f64::NAN, |p| p.qber),
                })
        })
        .collect::<Vec<_>>();

    let mut comparisons = Vec::new();
    for a in 0..nv {
        for b in a + 1..nv {
            let best = (0..grid.points.len())
                .filter_map(|i| Some((i, delta(i, a)? - delta(i, b)?)))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            let peak = |label: &str| {
                peaks
                    .iter()
                    .find(|p| p.label == label)
                    .map_or(f64::NAN, |p| p.max_delta_qber)
            };
            if let Some((i, d)) = best {
                comparisons.push(PairComparison {
                    first: variants[a].label.clone(),
                    second: variants[b].label.clone(),
                    max_difference: d,
                    grid_index: i,
                    singles_sig_cps: grid.points[i].0,
                    peak_relative_reduction: 1.0
                        - peak(&variants[b].label) / peak(&variants[a].label),
                });
            }
        }
    }

    Ok(SweepResult {
        base: *base,
        true_rate_model: true_rate,
        variants: variants.to_vec(),
        grid: grid.clone(),
        rows,
        peaks,
        comparisons,
    })
}

/// One line of the sweep CSV. Unusable operating points carry NaN values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub singles_sig_cps: f64,
    pub variant_label: String,
    pub delta_t_eff_ps: f64,
    pub sigma_sys_ps: f64,
    pub eta_coin: f64,
    pub c_acc_cps: f64,
    pub c_det_cps: f64,
    pub qber: f64,
    pub delta_qber_tdc: f64,
    pub secret_fraction: f64,
}

impl From<&SweepRow> for SweepCsvRow {
    fn from(r: &SweepRow) -> Self {
        let nan = f64::NAN;
        let p = r.point;
        SweepCsvRow {
            singles_sig_cps: r.s_a_sig,
            variant_label: r.variant_label.clone(),
            delta_t_eff_ps: p.map_or(nan, |p| p.delta_t_eff),
            sigma_sys_ps: p.map_or(nan, |p| p.sigma_sys),
            eta_coin: p.map_or(nan, |p| p.eta_coin),
            c_acc_cps: p.map_or(nan, |p| p.c_acc),
            c_det_cps: p.map_or(nan, |p| p.c_det),
            qber: p.map_or(nan, |p| p.qber),
            delta_qber_tdc: p.map_or(nan, |p| p.delta_qber_tdc),
            secret_fraction: p.map_or(nan, |p| p.secret_fraction),
        }
    }
}

impl SweepResult {
    pub fn errors(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }

    pub fn all_unusable(&self) -> bool {
        self.rows.iter().all(|r| r.point.is_none())
    }

    pub fn peak(&self, label: &str) -> Option<&VariantPeak> {
        self.peaks.iter().find(|p| p.label == label)
    }

    pub fn comparison(&self, first: &str, second: &str) -> Option<&PairComparison> {
        self.comparisons
            .iter()
            .find(|c| c.first == first && c.second == second)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(SweepCsvRow::from(row))
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        w.flush()
            .map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is UTF-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.json_value()).expect("sweep serializes")
    }

    /// JSON form: the full result (NaN-free) plus the list of unusable points.
    pub fn json_value(&self) -> serde_json::Value {
        let errors: Vec<_> = self
            .errors()
            .map(|r| {
                serde_json::json!({
                    "grid_index": r.grid_index,
                    "singles_sig_cps": r.s_a_sig,
                    "variant_label": r.variant_label,
                    "error": r.error,
                })
            })
            .collect();
        let mut v = serde_json::to_value(self).expect("sweep serializes");
        v["unusable_points"] = serde_json::Value::Array(errors);
        v
    }
}

pub fn read_sweep_csv(path: impl AsRef<Path>) -> Result<Vec<SweepCsvRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Schema {
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

const LINK_DEFAULT_TOML: &str = include_str!("../config/link_default.toml");

/// Non-TDC link parameters for one detector/TDC scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub delta_t0_ps: f64,
    pub sigma_spd_ps: f64,
    pub dark_cps: f64,
    pub eta_pair: f64,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start_cps: f64,
    pub stop_cps: f64,
    pub step_cps: f64,
}

/// Link configuration shared by the shipped sweep scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub schema_version: u32,
    pub e_base: f64,
    pub sigma_other_ps: f64,
    /// Total QBER of the reference (second) scenario with its raw TDC; anchors
    /// the shared non-TDC baseline used by secret-fraction comparisons.
    pub reference_total_qber: f64,
    pub reference_scenario: String,
    pub grid: GridSpec,
    pub scenarios: Vec<Scenario>,
}

impl LinkConfig {
    pub fn shipped_default() -> Self {
        Self::from_toml(LINK_DEFAULT_TOML).expect("embedded link_default.toml is valid")
    }

    pub fn shipped_default_toml() -> &'static str {
        LINK_DEFAULT_TOML
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: LinkConfig = toml::from_str(text).map_err(|e| Error::Schema {
            line: e.span().map_or(1, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })?;
        if cfg.schema_version != 1 {
            return Err(Error::InvalidArgument(format!(
                "unsupported link config schema_version {}",
                cfg.schema_version
            )));
        }
        cfg.scenario(&cfg.reference_scenario)?;
        Ok(cfg)
    }

    pub fn scenario(&self, name: &str) -> Result<&Scenario> {
        self.scenarios
            .iter()
            .find(|s| s.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown scenario '{name}' (available: {})",
                    self.scenarios
                        .iter()
                        .map(|s| s.name.as_str())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }

    pub fn singles_grid(&self) -> Result<SinglesGrid> {
        SinglesGrid::linear(self.grid.start_cps, self.grid.stop_cps, self.grid.step_cps)
    }

    /// Base parameters of a scenario with an ideal TDC and zero singles; the
    /// sweep fills in rates and variants.
    pub fn base_params(&self, scenario: &Scenario) -> QkdParams {
        QkdParams {
            delta_t0: scenario.delta_t0_ps,
            w_inl_pp: 0.0,
            sigma_spd: scenario.sigma_spd_ps,
            sigma_other: self.sigma_other_ps,
            sigma_tdc: 0.0,
            s_a_sig: 0.0,
            s_b_sig: 0.0,
            d_a: scenario.dark_cps,
            d_b: scenario.dark_cps,
            c_true: 0.0,
            e_base: self.e_base,
        }
    }

    pub fn run(&self, scenario: &Scenario) -> Result<SweepResult> {
        sweep(
            &self.base_params(scenario),
            &self.singles_grid()?,
            &scenario.variants,
            TrueRateModel::PairEfficiency {
                eta_pair: scenario.eta_pair,
            },
        )
    }

    /// Non-TDC QBER shared by all scenarios: the reference total minus the
    /// peak TDC contribution of the reference scenario's first variant.
    pub fn shared_baseline(&self) -> Result<f64> {
        let sc = self.scenario(&self.reference_scenario)?;
        let result = self.run(sc)?;
        let first = sc
            .variants
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("scenario {} has no variants", sc.name)))?;
        let peak = result.peak(&first.label).ok_or_else(|| {
            Error::UnusableOperatingPoint(format!("no usable point for {}", first.label))
        })?;
        Ok(self.reference_total_qber - peak.max_delta_qber)
    }

    /// Secret-fraction comparison of a scenario's first two variants at their
    /// peak TDC contributions on top of the shared baseline.
    pub fn secret_fraction_comparison(&self, scenario: &Scenario) -> Result<SecretFractionComparison> {
        let result = self.run(scenario)?;
        let [a, b] = match scenario.variants.as_slice() {
            [a, b, ..] => [a, b],
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "scenario {} needs two variants",
                    scenario.name
                )))
            }
        };
        let peak = |v: &Variant| {
            result
                .peak(&v.label)
                .map(|p| p.max_delta_qber)
                .ok_or_else(|| Error::UnusableOperatingPoint(format!("no usable point for {}", v.label)))
        };
        compare_secret_fraction(self.shared_baseline()?, peak(a)?, peak(b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base() -> QkdParams {
        QkdParams {
            delta_t0: 500.0,
            w_inl_pp: 0.0,
            sigma_spd: 350.0,
            sigma_other: 0.0,
            sigma_tdc: 14.7,
            s_a_sig: 1.59e6,
            s_b_sig: 1.59e6,
            d_a: 250.0,
            d_b: 250.0,
            c_true: 3e4,
            e_base: 0.03,
        }
    }

    #[test]
    fn window_examples() {
        assert_eq!(effective_window(500.0, 0.0).unwrap(), 500.0);
        assert!((effective_window(500.0, 300.2).unwrap() - 800.2).abs() < 1e-12);
        assert!((effective_window(0.0, 70.8).unwrap() - 70.8).abs() < 1e-12);
        assert!(effective_window(-1.0, 0.0).is_err());
    }

    #[test]
    fn jitter_examples() {
        assert!((system_jitter(350.0, 0.0, 14.7).unwrap() - 350.308_564).abs() < 1e-5);
        assert_eq!(system_jitter(0.0, 0.0, 7.5).unwrap(), 7.5);
        assert_eq!(system_jitter(3.0, 4.0, 0.0).unwrap(), 5.0);
        assert!(system_jitter(1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn capture_examples() {
        assert_eq!(capture_fraction(1e9, 10.0).unwrap(), 1.0);
        let s = 123.0;
        let x = capture_fraction(2.0 * std::f64::consts::SQRT_2 * s, s).unwrap();
        assert!((x - 0.842_700_792_949_714_9).abs() < 1e-12);
        assert_eq!(capture_fraction(0.0, s).unwrap(), 0.0);
        assert_eq!(capture_fraction(5.0, 0.0).unwrap(), 1.0);
        assert_eq!(capture_fraction(0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn singles_and_accidentals() {
        assert_eq!(singles(1.59e6, 250.0).unwrap(), 1.59025e6);
        assert_eq!(singles(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(accidental_rate(1e6, 1e6, 1000.0).unwrap(), 1000.0);
        assert_eq!(accidental_rate(0.0, 1e6, 1000.0).unwrap(), 0.0);
        let s = 1.59e6 + 250.0;
        // 1.59025e6^2 * 800.2e-12
        assert!((accidental_rate(s, s, 800.2).unwrap() - 2023.6).abs() < 0.05);
    }

    #[test]
    fn qber_limits() {
        let p = QkdParams {
            d_a: 0.0,
            d_b: 0.0,
            s_a_sig: 0.0,
            s_b_sig: 0.0,
            ..base()
        };
        assert_eq!(qber(&p).unwrap().qber, p.e_base);
        let p = QkdParams {
            c_true: 0.0,
            ..base()
        };
        assert_eq!(qber(&p).unwrap().qber, 0.5);
        let p = QkdParams {
            e_base: 0.5,
            ..base()
        };
        assert!((qber(&p).unwrap().qber - 0.5).abs() < 1e-15);
        let p = QkdParams {
            c_true: 0.0,
            d_a: 0.0,
            s_a_sig: 0.0,
            ..base()
        };
        assert!(matches!(qber(&p), Err(Error::UnusableOperatingPoint(_))));
        assert!(qber(&QkdParams { e_base: 0.6, ..base() }).is_err());
    }

    #[test]
    fn delta_qber_examples() {
        assert_eq!(delta_qber_tdc(&base().without_tdc()).unwrap(), 0.0);
        assert!(delta_qber_tdc(&base().with_tdc(0.0, 10.0)).unwrap() > 0.0);
        let a = attribute_delta(&base().with_tdc(14.7, 300.2)).unwrap();
        assert!(a.window_only > 0.0);
        assert!((a.total - delta_qber_tdc(&base().with_tdc(14.7, 300.2)).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn point_fields_are_consistent() {
        let p = qber(&base().with_tdc(14.7, 300.2)).unwrap();
        assert!((p.delta_t_eff - 800.2).abs() < 1e-12);
        assert!(p.c_det >= p.c_acc);
        assert!((0.0..=1.0).contains(&p.eta_coin));
        assert_eq!(p.secret_fraction, secret_fraction(p.qber).unwrap());
    }

    #[test]
    fn entropy_and_secret_fraction() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.0677).unwrap() - 0.3573).abs() < 5e-5);
        assert!(binary_entropy(1.5).is_err());
        assert!((secret_fraction(0.0677).unwrap() - 0.285).abs() < 1e-3);
        assert!((secret_fraction(0.0663).unwrap() - 0.296).abs() < 1e-3);
        assert!((secret_fraction_gain(0.0677, 0.0663).unwrap() - 0.037).abs() < 1e-3);
        assert_eq!(secret_fraction(0.0).unwrap(), 1.0);
        assert!(secret_fraction(0.2).unwrap() < 0.0);
    }

    #[test]
    fn sweep_basics() {
        let grid = SinglesGrid::symmetric(&[1e5, 1e6, 1e7]);
        let v = [Variant::new("a", 10.0, 50.0), Variant::new("b", 10.0, 50.0)];
        let r = sweep(&base(), &grid, &v, TrueRateModel::PairEfficiency { eta_pair: 0.02 }).unwrap();
        assert_eq!(r.rows.len(), 6);
        assert_eq!(r.rows[2].grid_index, 1);
        assert_eq!(r.rows[3].variant_label, "b");
        let c = r.comparison("a", "b").unwrap();
        assert_eq!(c.max_difference, 0.0);
        assert_eq!(c.peak_relative_reduction, 0.0);

        let ideal = [Variant::new("ideal", 0.0, 0.0)];
        let r = sweep(&base(), &grid, &ideal, TrueRateModel::Fixed).unwrap();
        assert!(r.rows.iter().all(|row| row.point.unwrap().delta_qber_tdc == 0.0));
    }

    #[test]
    fn sweep_surfaces_unusable_points() {
        let p = QkdParams {
            d_a: 0.0,
            d_b: 0.0,
            c_true: 0.0,
            ..base()
        };
        let grid = SinglesGrid::symmetric(&[0.0, 1e6]);
        let r = sweep(&p, &grid, &[Variant::new("x", 1.0, 1.0)], TrueRateModel::Fixed).unwrap();
        assert!(r.rows[0].error.is_some());
        assert!(r.rows[1].point.is_some());
        assert_eq!(r.errors().count(), 1);
        assert!(r.to_csv().lines().nth(1).unwrap().contains("NaN"));
        assert!(sweep(&p, &SinglesGrid::symmetric(&[]), &[Variant::new("x", 1.0, 1.0)], TrueRateModel::Fixed).is_err());
        assert!(sweep(&p, &SinglesGrid::symmetric(&[-1.0]), &[Variant::new("x", 1.0, 1.0)], TrueRateModel::Fixed).is_err());
    }

    #[test]
    fn linear_grid() {
        let g = SinglesGrid::linear(1e5, 3e7, 1e5).unwrap();
        assert_eq!(g.points.len(), 300);
        assert_eq!(g.points[154].0, 1.55e7);
        assert!(SinglesGrid::linear(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn shipped_link_config_loads() {
        let cfg = LinkConfig::shipped_default();
        assert_eq!(cfg.scenarios.len(), 2);
        for s in &cfg.scenarios {
            assert_eq!(s.variants.len(), 2);
        }
        let b = cfg.shared_baseline().unwrap();
        assert!(b > 0.0 && b < cfg.reference_total_qber);
    }

    #[test]
    fn accidental_units_are_exact() {
        assert_eq!(accidental_rate(1e6, 1e6, 1e3).unwrap(), 1e3);
    }

    proptest! {
        #[test]
        fn qber_bounds_and_monotone_in_window(
            dt0 in 10.0..5000.0f64,
            w1 in 0.0..500.0f64,
            dw in 0.0..500.0f64,
            spd in 0.0..500.0f64,
            tdc in 0.0..50.0f64,
            s in 1.0..1e8f64,
            dark in 1.0..1e4f64,
            ct in 1.0..1e6f64,
            e in 0.0..0.499f64,
        ) {
            let p = QkdParams {
                delta_t0: dt0, w_inl_pp: w1, sigma_spd: spd, sigma_other: 5.0,
                sigma_tdc: tdc, s_a_sig: s, s_b_sig: s, d_a: dark, d_b: dark,
                c_true: ct, e_base: e,
            };
            let q1 = qber(&p).unwrap();
            let q2 = qber(&p.with_tdc(tdc, w1 + dw)).unwrap();
            prop_assert!(q1.qber >= e - 1e-15 && q1.qber <= 0.5 + 1e-15);
            // C_acc grows linearly in the window while erf is concave, so the
            // accidental share can only grow.
            prop_assert!(q2.qber >= q1.qber - 1e-15);
            prop_assert!(q2.c_acc >= q1.c_acc);
        }

        #[test]
        fn delta_is_non_negative(
            dt0 in 10.0..2000.0f64,
            w in 0.0..400.0f64,
            spd in 0.0..500.0f64,
            tdc in 0.0..50.0f64,
            s in 1e3..5e7f64,
            e in 0.0..0.499f64,
        ) {
            let p = QkdParams {
                delta_t0: dt0, w_inl_pp: w, sigma_spd: spd, sigma_other: 10.0,
                sigma_tdc: tdc, s_a_sig: s, s_b_sig: s, d_a: 100.0, d_b: 100.0,
                c_true: 0.02 * s, e_base: e,
            };
            prop_assert!(delta_qber_tdc(&p).unwrap() >= -1e-15);
        }

        #[test]
        fn capture_fraction_is_monotone(dt in 1.0..5000.0f64, d in 1.0..500.0f64, s in 1.0..500.0f64) {
            let a = capture_fraction(dt, s).unwrap();
            prop_assert!(capture_fraction(dt + d, s).unwrap() >= a);
            prop_assert!(capture_fraction(dt, s + d).unwrap() <= a);
        }

        #[test]
        fn secret_fraction_decreases(q in 0.0..0.49f64, d in 1e-6..0.01f64) {
            prop_assert!(secret_fraction(q + d).unwrap() < secret_fraction(q).unwrap());
        }
    }
}
