//! Tapped-delay-line model: per-tap delays, defects, mitigation and the
//! time-to-code transfer function.
//!
//! A delay line with taps `w_0 .. w_{N-1}` maps an arrival phase `t` in
//! `[0, T_clk)` to the code `c` whose interval `[e_c, e_{c+1})` contains `t`,
//! where `e_c` is the prefix sum of the first `c` taps. Zero-width taps occupy
//! no interval and are therefore never returned.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Relative slack allowed when checking that a chain spans one clock period.
const SPAN_TOLERANCE: f64 = 1e-9;

/// A clock-region-crossing excursion recorded on a line so that a mitigation
/// plan can later attenuate it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrcTag {
    pub bin: usize,
    pub magnitude_ps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DelayLineDoc {
    label: String,
    clock_period_ps: f64,
    tap_delays_ps: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    crc_steps: Vec<CrcTag>,
}

/// Per-tap propagation delays (ps) of one TDC chain plus its sampling clock period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DelayLineDoc", into = "DelayLineDoc")]
pub struct DelayLine {
    label: String,
    clock_period: f64,
    taps: Vec<f64>,
    crc_steps: Vec<CrcTag>,
    /// `edges[c]` is the prefix sum of the first `c` taps; length N+1.
    edges: Vec<f64>,
}

impl TryFrom<DelayLineDoc> for DelayLine {
    type Error = Error;

    fn try_from(doc: DelayLineDoc) -> Result<Self> {
        let mut line = DelayLine::new(doc.label, doc.clock_period_ps, doc.tap_delays_ps)?;
        for tag in &doc.crc_steps {
            if tag.bin >= line.n_bins() || !(tag.magnitude_ps >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "crc step at bin {} with magnitude {} is invalid",
                    tag.bin, tag.magnitude_ps
                )));
            }
        }
        line.crc_steps = doc.crc_steps;
        Ok(line)
    }
}

impl From<DelayLine> for DelayLineDoc {
    fn from(line: DelayLine) -> Self {
        DelayLineDoc {
            label: line.label,
            clock_period_ps: line.clock_period,
            tap_delays_ps: line.taps,
            crc_steps: line.crc_steps,
        }
    }
}

fn prefix_edges(taps: &[f64]) -> Vec<f64> {
    let mut edges = Vec::with_capacity(taps.len() + 1);
    let mut acc = 0.0;
    edges.push(acc);
    for &w in taps {
        acc += w;
        edges.push(acc);
    }
    edges
}

fn check_taps(clock_period: f64, taps: &[f64]) -> Result<()> {
    if !(clock_period > 0.0) || !clock_period.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "clock period must be positive, got {clock_period}"
        )));
    }
    if taps.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a delay line needs at least 2 taps, got {}",
            taps.len()
        )));
    }
    if let Some((i, w)) = taps
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w >= 0.0) || !w.is_finite())
    {
        return Err(Error::InvalidArgument(format!(
            "tap {i} has invalid delay {w} ps"
        )));
    }
    Ok(())
}

impl DelayLine {
    /// Builds a validated line: N >= 2, finite non-negative taps and a chain
    /// that spans at least one clock period.
    pub fn new(label: impl Into<String>, clock_period: f64, taps: Vec<f64>) -> Result<Self> {
        let line = Self::unchecked_span(label.into(), clock_period, taps, Vec::new())?;
        line.ensure_spans_period()?;
        Ok(line)
    }

    /// Like [`DelayLine::new`] but without the span check. Defect injection can
    /// legitimately shorten a chain; consumers that need full coverage call
    /// [`DelayLine::ensure_spans_period`].
    pub(crate) fn unchecked_span(
        label: String,
        clock_period: f64,
        taps: Vec<f64>,
        crc_steps: Vec<CrcTag>,
    ) -> Result<Self> {
        check_taps(clock_period, &taps)?;
        let edges = prefix_edges(&taps);
        Ok(DelayLine {
            label,
            clock_period,
            taps,
            crc_steps,
            edges,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn clock_period(&self) -> f64 {
        self.clock_period
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn n_bins(&self) -> usize {
        self.taps.len()
    }

    pub fn crc_steps(&self) -> &[CrcTag] {
        &self.crc_steps
    }

    /// Ideal bin width `T_clk / N`.
    pub fn lsb(&self) -> f64 {
        self.clock_period / self.taps.len() as f64
    }

    /// Total chain delay.
    pub fn span(&self) -> f64 {
        self.edges[self.taps.len()]
    }

    /// Prefix sums of the taps (length N+1, starting at 0).
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn spans_period(&self) -> bool {
        self.span() >= self.clock_period * (1.0 - SPAN_TOLERANCE)
    }

    pub fn ensure_spans_period(&self) -> Result<()> {
        if self.spans_period() {
            Ok(())
        } else {
            Err(Error::SpanTooShort {
                span_ps: self.span(),
                clock_period_ps: self.clock_period,
            })
        }
    }

    /// Maps an arrival phase to its code: the smallest `c` with
    /// `prefix_sum(c + 1) > phase`.
    pub fn quantize(&self, phase: f64) -> Result<usize> {
        if !(0.0..self.clock_period).contains(&phase) {
            return Err(Error::OutOfRange(format!(
                "phase {phase} ps outside [0, {})",
                self.clock_period
            )));
        }
        let k = self.edges.partition_point(|&e| e <= phase);
        if k > self.taps.len() {
            // Only reachable inside the span tolerance band or on a short chain.
            if self.spans_period() {
                return Ok(self.last_nonzero_code());
            }
            return Err(Error::OutOfRange(format!(
                "phase {phase} ps beyond the chain span {} ps",
                self.span()
            )));
        }
        Ok(k - 1)
    }

    /// Bin centre of `code`: `prefix_sum(code) + w_code / 2`.
    pub fn code_to_time(&self, code: usize) -> Result<f64> {
        if code >= self.taps.len() {
            return Err(Error::OutOfRange(format!(
                "code {code} outside [0, {})",
                self.taps.len()
            )));
        }
        Ok(self.edges[code] + self.taps[code] / 2.0)
    }

    fn last_nonzero_code(&self) -> usize {
        self.taps.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("delay line serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Schema { line, msg } => Error::io(path, format!("line {line}: {msg}")),
            other => Error::io(path, other),
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Uniform reference line: every tap equals `clock_period / n_bins`.
pub fn build_ideal(n_bins: usize, clock_period: f64) -> Result<DelayLine> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_bins must be at least 2, got {n_bins}"
        )));
    }
    if !(clock_period > 0.0) || !clock_period.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "clock period must be positive, got {clock_period}"
        )));
    }
    let w = clock_period / n_bins as f64;
    let line = DelayLine::unchecked_span(
        format!("ideal-{n_bins}"),
        clock_period,
        vec![w; n_bins],
        Vec::new(),
    )?;
    // n * (T / n) can round a hair below T; the tolerance absorbs it.
    line.ensure_spans_period()?;
    Ok(line)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    UltraWideBin,
    ZeroBin,
    /// Clock-region crossing: one oversized tap whose cumulative effect is a
    /// step in the transfer function.
    CrcStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub kind: DefectKind,
    pub bin_index: usize,
    #[serde(default)]
    pub magnitude: f64,
}

impl Defect {
    pub fn ultra_wide(bin_index: usize, magnitude: f64) -> Self {
        Defect {
            kind: DefectKind::UltraWideBin,
            bin_index,
            magnitude,
        }
    }

    pub fn zero(bin_index: usize) -> Self {
        Defect {
            kind: DefectKind::ZeroBin,
            bin_index,
            magnitude: 0.0,
        }
    }

    pub fn crc_step(bin_index: usize, magnitude: f64) -> Self {
        Defect {
            kind: DefectKind::CrcStep,
            bin_index,
            magnitude,
        }
    }
}

/// Applies defects in order and returns a new line. The result may span less
/// than one clock period (e.g. after zeroing taps of a tight chain).
pub fn inject_defects(line: &DelayLine, defects: &[Defect]) -> Result<DelayLine> {
    let n = line.n_bins();
    let mut taps = line.taps.clone();
    let mut crc = line.crc_steps.clone();
    for d in defects {
        if d.bin_index >= n {
            return Err(Error::OutOfRange(format!(
                "defect bin {} outside [0, {n})",
                d.bin_index
            )));
        }
        if !(d.magnitude >= 0.0) || !d.magnitude.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "defect magnitude must be non-negative, got {}",
                d.magnitude
            )));
        }
        match d.kind {
            DefectKind::UltraWideBin => taps[d.bin_index] += d.magnitude,
            DefectKind::ZeroBin => taps[d.bin_index] = 0.0,
            DefectKind::CrcStep => {
                taps[d.bin_index] += d.magnitude;
                crc.push(CrcTag {
                    bin: d.bin_index,
                    magnitude_ps: d.magnitude,
                });
            }
        }
    }
    DelayLine::unchecked_span(line.label.clone(), line.clock_period, taps, crc)
}

/// Abstract fabric-level mitigation: widen near-zero taps, clip oversized
/// taps and remove part of every recorded clock-region-crossing excursion.
/// Fields left out of a serialized plan take their identity values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationPlan {
    pub widen_zero_bins_to: f64,
    pub clip_wide_bins_at: f64,
    pub crc_step_attenuation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_bins: Option<Vec<usize>>,
}

impl Default for MitigationPlan {
    fn default() -> Self {
        MitigationPlan::identity()
    }
}

impl MitigationPlan {
    /// A plan that leaves every line unchanged.
    pub fn identity() -> Self {
        MitigationPlan {
            widen_zero_bins_to: 0.0,
            clip_wide_bins_at: f64::MAX,
            crc_step_attenuation: 0.0,
            target_bins: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let floor = self.widen_zero_bins_to;
        let cap = self.clip_wide_bins_at;
        let att = self.crc_step_attenuation;
        if !(floor >= 0.0) || !floor.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "widen_zero_bins_to must be >= 0, got {floor}"
            )));
        }
        if !(cap > floor) {
            return Err(Error::InvalidArgument(format!(
                "clip_wide_bins_at ({cap}) must exceed widen_zero_bins_to ({floor})"
            )));
        }
        if !(0.0..=1.0).contains(&att) {
            return Err(Error::InvalidArgument(format!(
                "crc_step_attenuation must lie in [0, 1], got {att}"
            )));
        }
        Ok(())
    }

    fn targets(&self, bin: usize) -> bool {
        self.target_bins
            .as_ref()
            .is_none_or(|bins| bins.contains(&bin))
    }
}

/// Applies `plan` to `line`.
///
/// CRC excursions are attenuated first and, when the attenuation is non-zero,
/// their tags are consumed so a second application leaves the line unchanged.
/// Floor and cap are then applied to every targeted tap. The result must still
/// span one clock period.
pub fn apply_mitigation(line: &DelayLine, plan: &MitigationPlan) -> Result<DelayLine> {
    plan.validate()?;
    if let Some(bins) = &plan.target_bins {
        if let Some(&b) = bins.iter().find(|&&b| b >= line.n_bins()) {
            return Err(Error::OutOfRange(format!(
                "target bin {b} outside [0, {})",
                line.n_bins()
            )));
        }
    }
    let mut taps = line.taps.clone();
    let mut remaining = Vec::new();
    for tag in &line.crc_steps {
        if plan.crc_step_attenuation > 0.0 && plan.targets(tag.bin) {
            let t = &mut taps[tag.bin];
            *t = (*t - plan.crc_step_attenuation * tag.magnitude_ps).max(0.0);
        } else {
            remaining.push(*tag);
        }
    }
    for (i, t) in taps.iter_mut().enumerate() {
        if plan.targets(i) {
            *t = t.clamp(plan.widen_zero_bins_to, plan.clip_wide_bins_at);
        }
    }
    let out = DelayLine::unchecked_span(line.label.clone(), line.clock_period, taps, remaining)?;
    out.ensure_spans_period()?;
    Ok(out)
}

/// Table-accelerated quantizer for hot loops over many phases.
#[derive(Debug, Clone)]
pub struct Quantizer<'a> {
    line: &'a DelayLine,
    lut: Vec<u32>,
    cells_per_ps: f64,
    last: usize,
}

impl<'a> Quantizer<'a> {
    pub fn new(line: &'a DelayLine) -> Result<Self> {
        line.ensure_spans_period()?;
        let cells = (4 * line.n_bins()).max(1024);
        let t = line.clock_period;
        let last = line.last_nonzero_code();
        let lut = (0..cells)
            .map(|k| {
                let phase = k as f64 * t / cells as f64;
                line.quantize(phase).unwrap_or(last) as u32
            })
            .collect();
        Ok(Quantizer {
            line,
            lut,
            cells_per_ps: cells as f64 / t,
            last,
        })
    }

    /// Same contract as [`DelayLine::quantize`] for `phase` in `[0, T_clk)`.
    #[inline]
    pub fn code(&self, phase: f64) -> usize {
        let edges = &self.line.edges;
        let k = ((phase * self.cells_per_ps) as usize).min(self.lut.len() - 1);
        let mut c = self.lut[k] as usize;
        while c > 0 && edges[c] > phase {
            c -= 1;
        }
        while c < self.last && edges[c + 1] <= phase {
            c += 1;
        }
        c
    }

    pub fn line(&self) -> &DelayLine {
        self.line
    }
}
