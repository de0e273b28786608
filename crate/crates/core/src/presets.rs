//! Synthetic TDC-1 / TDC-2 delay lines.
//!
//! The generator parameters live in `config/presets.toml`, embedded at compile
//! time. See that file for the generation procedure.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::tdc_model::{inject_defects, Defect, DefectKind, DelayLine, MitigationPlan};
use crate::{Error, Result};

const PRESETS_TOML: &str = include_str!("../config/presets.toml");

/// Seed used by the documented preset examples and the CLI default.
pub const DEFAULT_PRESET_SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PresetName {
    Tdc1Raw,
    Tdc1Opt,
    Tdc2Raw,
    Tdc2Opt,
}

impl PresetName {
    pub const ALL: [PresetName; 4] = [
        PresetName::Tdc1Raw,
        PresetName::Tdc1Opt,
        PresetName::Tdc2Raw,
        PresetName::Tdc2Opt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::Tdc1Raw => "TDC1_RAW",
            PresetName::Tdc1Opt => "TDC1_OPT",
            PresetName::Tdc2Raw => "TDC2_RAW",
            PresetName::Tdc2Opt => "TDC2_OPT",
        }
    }

    pub fn family(self) -> PresetFamily {
        match self {
            PresetName::Tdc1Raw | PresetName::Tdc1Opt => PresetFamily::Tdc1,
            PresetName::Tdc2Raw | PresetName::Tdc2Opt => PresetFamily::Tdc2,
        }
    }

    fn key(self) -> &'static str {
        match self {
            PresetName::Tdc1Raw => "tdc1_raw",
            PresetName::Tdc1Opt => "tdc1_opt",
            PresetName::Tdc2Raw => "tdc2_raw",
            PresetName::Tdc2Opt => "tdc2_opt",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Accepts `TDC1_RAW`, `tdc1-raw`, `tdc1_raw` and similar spellings.
impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PresetFamily {
    Tdc1,
    Tdc2,
}

impl PresetFamily {
    pub fn raw(self) -> PresetName {
        match self {
            PresetFamily::Tdc1 => PresetName::Tdc1Raw,
            PresetFamily::Tdc2 => PresetName::Tdc2Raw,
        }
    }

    pub fn optimized(self) -> PresetName {
        match self {
            PresetFamily::Tdc1 => PresetName::Tdc1Opt,
            PresetFamily::Tdc2 => PresetName::Tdc2Opt,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PresetFamily::Tdc1 => "tdc1",
            PresetFamily::Tdc2 => "tdc2",
        }
    }
}

impl FromStr for PresetFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "tdc1" => Ok(PresetFamily::Tdc1),
            "tdc2" => Ok(PresetFamily::Tdc2),
            _ => Err(Error::UnknownPreset(s.to_string())),
        }
    }
}

/// Parametric description of one synthetic delay line.
#[derive(Debug, Clone, Deserialize)]
pub struct GeneratorSpec {
    pub label: String,
    pub n_bins: usize,
    pub clock_period_ps: f64,
    pub motifs: BTreeMap<String, Vec<f64>>,
    pub layout: String,
    pub profile: Vec<[f64; 2]>,
    #[serde(default)]
    pub edge_jitter_ps: f64,
    #[serde(default)]
    pub jitter_min_width_ps: f64,
    #[serde(default)]
    pub span_ps: Option<f64>,
    #[serde(default)]
    pub fixed_taps: Vec<(usize, f64)>,
    #[serde(default)]
    pub defects: Vec<Defect>,
}

#[derive(Debug, Deserialize)]
struct PresetCatalog {
    schema_version: u32,
    tdc1_raw: GeneratorSpec,
    tdc1_opt: GeneratorSpec,
    tdc2_raw: GeneratorSpec,
    tdc2_opt: GeneratorSpec,
    plans: BTreeMap<String, MitigationPlan>,
}

fn catalog() -> &'static PresetCatalog {
    static CATALOG: OnceLock<PresetCatalog> = OnceLock::new();
    CATALOG.get_or_init(|| {
        let cat: PresetCatalog =
            toml::from_str(PRESETS_TOML).expect("embedded presets.toml is valid");
        assert_eq!(cat.schema_version, 1, "unsupported presets.toml schema");
        cat
    })
}

pub fn generator_spec(name: PresetName) -> &'static GeneratorSpec {
    let cat = catalog();
    match name.key() {
        "tdc1_raw" => &cat.tdc1_raw,
        "tdc1_opt" => &cat.tdc1_opt,
        "tdc2_raw" => &cat.tdc2_raw,
        _ => &cat.tdc2_opt,
    }
}

/// Shipped mitigation plan for a preset family's raw line.
pub fn calibrated_plan(family: PresetFamily) -> MitigationPlan {
    catalog().plans[family.as_str()].clone()
}

pub fn build_preset(name: PresetName, seed: u64) -> Result<DelayLine> {
    generate(generator_spec(name), seed)
}

/// [`build_preset`] from a user-supplied name.
pub fn build_preset_named(name: &str, seed: u64) -> Result<DelayLine> {
    build_preset(name.parse()?, seed)
}

fn interp(profile: &[[f64; 2]], x: f64) -> f64 {
    match profile {
        [] => 1.0,
        [only] => only[1],
        _ => {
            if x <= profile[0][0] {
                return profile[0][1];
            }
            for pair in profile.windows(2) {
                let ([x0, y0], [x1, y1]) = (pair[0], pair[1]);
                if x <= x1 {
                    let f = if x1 > x0 { (x - x0) / (x1 - x0) } else { 1.0 };
                    return y0 + f * (y1 - y0);
                }
            }
            profile[profile.len() - 1][1]
        }
    }
}

/// Runs the generation procedure described in `config/presets.toml`.
pub fn generate(spec: &GeneratorSpec, seed: u64) -> Result<DelayLine> {
    let n = spec.n_bins;
    if n < 2 || spec.layout.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "preset {} needs n_bins >= 2 and a non-empty layout",
            spec.label
        )));
    }

    let mut nominal = Vec::with_capacity(n);
    for ch in spec.layout.chars().cycle() {
        let motif = spec.motifs.get(&ch.to_string()).ok_or_else(|| {
            Error::InvalidArgument(format!("layout uses undefined motif '{ch}'"))
        })?;
        if motif.is_empty() {
            return Err(Error::InvalidArgument(format!("motif '{ch}' is empty")));
        }
        nominal.extend_from_slice(motif);
        if nominal.len() >= n {
            break;
        }
    }
    nominal.truncate(n);

    let mut taps: Vec<f64> = nominal
        .iter()
        .enumerate()
        .map(|(i, &w)| w * interp(&spec.profile, i as f64 / (n - 1) as f64))
        .collect();

    if spec.edge_jitter_ps > 0.0 {
        let normal = Normal::new(0.0, spec.edge_jitter_ps)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = 0.0;
        for (i, &w) in nominal.iter().enumerate() {
            if w > spec.jitter_min_width_ps {
                let shift: f64 = normal.sample(&mut rng);
                taps[i] = (taps[i] + shift - prev).max(0.0);
                prev = shift;
            }
        }
    }

    let (zero, additive): (Vec<&Defect>, Vec<&Defect>) = spec
        .defects
        .iter()
        .partition(|d| d.kind == DefectKind::ZeroBin);
    let mut free = vec![true; n];
    for d in &zero {
        if d.bin_index < n {
            taps[d.bin_index] = 0.0;
        }
    }
    for &(i, w) in &spec.fixed_taps {
        if i >= n || !(w >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fixed tap ({i}, {w}) is invalid"
            )));
        }
        taps[i] = w;
        free[i] = false;
    }

    if let Some(span) = spec.span_ps {
        let added: f64 = additive.iter().map(|d| d.magnitude).sum();
        let fixed: f64 = taps.iter().zip(&free).filter(|(_, f)| !**f).map(|(w, _)| w).sum();
        let free_sum: f64 = taps.iter().zip(&free).filter(|(_, f)| **f).map(|(w, _)| w).sum();
        let target = span - added - fixed;
        if !(free_sum > 0.0) || !(target > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "preset {} cannot be normalised to span {span} ps",
                spec.label
            )));
        }
        let scale = target / free_sum;
        for (w, _) in taps.iter_mut().zip(&free).filter(|(_, f)| **f) {
            *w *= scale;
        }
    }

    let base = DelayLine::unchecked_span(spec.label.clone(), spec.clock_period_ps, taps, Vec::new())?;
    let additive: Vec<Defect> = additive.into_iter().copied().collect();
    let line = inject_defects(&base, &additive)?;
    line.ensure_spans_period()?;
    Ok(line)
}
