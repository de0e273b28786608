//! Code-density characterization and nonlinearity metrics.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tdc_model::{DelayLine, Quantizer};
use crate::{Error, Result};

/// Hits per independently seeded sampling chunk. Hit `j` is the `(j % CHUNK)`-th
/// draw of stream `j / CHUNK`, so the histogram does not depend on the number
/// of worker threads.
const CHUNK: u64 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseMode {
    Uniform,
    #[serde(rename = "locked")]
    PhaseLocked,
}

impl PhaseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseMode::Uniform => "uniform",
            PhaseMode::PhaseLocked => "locked",
        }
    }
}

impl fmt::Display for PhaseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhaseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(PhaseMode::Uniform),
            "locked" | "phase_locked" | "phase-locked" | "phaselocked" => {
                Ok(PhaseMode::PhaseLocked)
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown phase mode '{other}' (expected uniform or locked)"
            ))),
        }
    }
}

/// Arrival-phase distribution for phase-locked sources: a Gaussian wrapped
/// onto `[0, T_clk)`. `None` fields take their defaults (mean `T_clk / 2`,
/// standard deviation `5 * LSB`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLockedModel {
    pub mean_ps: Option<f64>,
    pub std_ps: Option<f64>,
}

impl PhaseLockedModel {
    pub fn resolve(&self, line: &DelayLine) -> (f64, f64) {
        (
            self.mean_ps.unwrap_or(line.clock_period() / 2.0),
            self.std_ps.unwrap_or(5.0 * line.lsb()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeHistogram {
    pub counts: Vec<u64>,
    pub total_hits: u64,
    pub clock_period: f64,
    pub phase_mode: PhaseMode,
}

impl CodeHistogram {
    pub fn new(counts: Vec<u64>, clock_period: f64, phase_mode: PhaseMode) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument("histogram has no codes".into()));
        }
        if !(clock_period > 0.0) || !clock_period.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "clock period must be positive, got {clock_period}"
            )));
        }
        let total_hits = counts.iter().sum();
        if total_hits == 0 {
            return Err(Error::InvalidArgument("histogram holds no hits".into()));
        }
        Ok(CodeHistogram {
            counts,
            total_hits,
            clock_period,
            phase_mode,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    /// Number of codes that received at least one hit.
    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "# clock_period_ps={} phase_mode={}",
            self.clock_period, self.phase_mode
        )?;
        for (code, count) in self.counts.iter().enumerate() {
            writeln!(out, "{code},{count}")?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("csv is ASCII")
    }

    pub fn export(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Parses the histogram CSV format. Codes must appear in order starting at 0;
    /// a `code,count` column header line is tolerated.
    pub fn parse_csv(reader: impl BufRead) -> Result<Self> {
        let mut clock_period = None;
        let mut phase_mode = None;
        let mut counts = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::Schema {
                line: lineno,
                msg: e.to_string(),
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let schema = |msg: String| Error::Schema { line: lineno, msg };
            if let Some(rest) = line.strip_prefix('#') {
                for field in rest.split_whitespace() {
                    if let Some(v) = field.strip_prefix("clock_period_ps=") {
                        let t: f64 = v
                            .parse()
                            .map_err(|_| schema(format!("bad clock period '{v}'")))?;
                        clock_period = Some(t);
                    } else if let Some(v) = field.strip_prefix("phase_mode=") {
                        phase_mode = Some(v.parse().map_err(|e: Error| schema(e.to_string()))?);
                    }
                }
                continue;
            }
            if line.eq_ignore_ascii_case("code,count") {
                continue;
            }
            let (code, count) = line
                .split_once(',')
                .ok_or_else(|| schema(format!("expected 'code,count', got '{line}'")))?;
            let code: usize = code
                .trim()
                .parse()
                .map_err(|_| schema(format!("bad code '{}'", code.trim())))?;
            let count = count.trim();
            if count.starts_with('-') || count.starts_with('\u{2212}') {
                return Err(schema(format!("negative count '{count}'")));
            }
            let count: u64 = count
                .parse()
                .map_err(|_| schema(format!("bad count '{count}'")))?;
            if code != counts.len() {
                return Err(schema(format!(
                    "expected code {}, found {code}",
                    counts.len()
                )));
            }
            counts.push(count);
        }
        let clock_period = clock_period.ok_or(Error::Schema {
            line: 1,
            msg: "missing '# clock_period_ps=<float>' header".into(),
        })?;
        let phase_mode = phase_mode.unwrap_or(PhaseMode::Uniform);
        CodeHistogram::new(counts, clock_period, phase_mode).map_err(|e| Error::Schema {
            line: 1,
            msg: e.to_string(),
        })
    }

    pub fn import(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(BufReader::new(file))
    }
}

/// Alias of [`CodeHistogram::import`].
pub fn import_histogram(path: impl AsRef<Path>) -> Result<CodeHistogram> {
    CodeHistogram::import(path)
}

pub fn run_code_density(
    line: &DelayLine,
    n_hits: u64,
    phase_mode: PhaseMode,
    seed: u64,
) -> Result<CodeHistogram> {
    run_code_density_with(line, n_hits, phase_mode, PhaseLockedModel::default(), seed)
}

pub fn run_code_density_with(
    line: &DelayLine,
    n_hits: u64,
    phase_mode: PhaseMode,
    locked: PhaseLockedModel,
    seed: u64,
) -> Result<CodeHistogram> {
    let n = line.n_bins();
    if n_hits == 0 {
        return Err(Error::InvalidArgument("n_hits must be positive".into()));
    }
    if n_hits < n as u64 {
        return Err(Error::InvalidArgument(format!(
            "n_hits = {n_hits} is fewer than the {n} bins"
        )));
    }
    if n_hits < 100 * n as u64 {
        log::warn!(
            "code density with {n_hits} hits over {n} bins: fewer than 100 hits per bin on average"
        );
    }
    let quant = Quantizer::new(line)?;
    let t = line.clock_period();
    let (mean, std) = locked.resolve(line);
    if phase_mode == PhaseMode::PhaseLocked && !(std >= 0.0 && std.is_finite() && mean.is_finite())
    {
        return Err(Error::InvalidArgument(format!(
            "phase-locked model needs finite mean and non-negative std, got ({mean}, {std})"
        )));
    }

    let n_chunks = n_hits.div_ceil(CHUNK);
    let counts = (0..n_chunks)
        .into_par_iter()
        .fold(
            || vec![0u64; n],
            |mut acc, chunk| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(chunk);
                let len = CHUNK.min(n_hits - chunk * CHUNK);
                for _ in 0..len {
                    let phase = match phase_mode {
                        PhaseMode::Uniform => rng.random::<f64>() * t,
                        PhaseMode::PhaseLocked => {
                            let z: f64 = rng.sample(StandardNormal);
                            let p = (mean + std * z).rem_euclid(t);
                            // rem_euclid can round up to exactly t.
                            if p >= t { 0.0 } else { p }
                        }
                    };
                    acc[quant.code(phase)] += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![0u64; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );

    CodeHistogram::new(counts, t, phase_mode)
}

/// Code-density estimate `w_i = counts_i / total * T_clk`.
pub fn estimate_bin_widths(hist: &CodeHistogram) -> Result<Vec<f64>> {
    if hist.phase_mode == PhaseMode::PhaseLocked {
        return Err(Error::PhaseLockedHistogram);
    }
    if hist.total_hits == 0 {
        return Err(Error::InvalidArgument("histogram holds no hits".into()));
    }
    let scale = hist.clock_period / hist.total_hits as f64;
    Ok(hist.counts.iter().map(|&c| c as f64 * scale).collect())
}

/// Effective widths: the measure of each bin inside `[0, T_clk)`.
pub fn exact_widths(line: &DelayLine) -> Vec<f64> {
    let t = line.clock_period();
    line.edges()
        .windows(2)
        .map(|e| (e[1].min(t) - e[0].min(t)).max(0.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearityReport {
    pub bin_widths: Vec<f64>,
    pub dnl: Vec<f64>,
    pub inl: Vec<f64>,
    pub dnl_range: (f64, f64),
    pub inl_range: (f64, f64),
    pub w_inl_pp: f64,
    pub sigma_tdc: f64,
    pub lsb_ideal: f64,
    pub clock_period: f64,
    /// `sum(widths) - clock_period`; zero up to rounding for a chain that
    /// covers exactly one period.
    pub width_sum_residual_ps: f64,
}

impl NonlinearityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

pub fn compute_nonlinearity(widths: &[f64], clock_period: f64) -> Result<NonlinearityReport> {
    if widths.is_empty() {
        return Err(Error::InvalidArgument("empty width list".into()));
    }
    if let Some(w) = widths.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "bin widths must be finite and non-negative, got {w}"
        )));
    }
    if !(clock_period > 0.0) || !clock_period.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "clock period must be positive, got {clock_period}"
        )));
    }
    let lsb = clock_period / widths.len() as f64;
    let dnl: Vec<f64> = widths.iter().map(|w| w - lsb).collect();
    let inl: Vec<f64> = dnl
        .iter()
        .scan(0.0, |acc, d| {
            *acc += d;
            Some(*acc)
        })
        .collect();
    let dnl_range = min_max(&dnl);
    let inl_range = min_max(&inl);
    Ok(NonlinearityReport {
        bin_widths: widths.to_vec(),
        sigma_tdc: estimate_sigma(widths)?,
        w_inl_pp: inl_range.1 - inl_range.0,
        dnl_range,
        inl_range,
        dnl,
        inl,
        lsb_ideal: lsb,
        clock_period,
        width_sum_residual_ps: widths.iter().sum::<f64>() - clock_period,
    })
}

/// Occupancy-weighted RMS quantization error with bin-centre readout under
/// uniform arrivals: `sqrt(sum w^3 / (12 sum w))`.
pub fn estimate_sigma(widths: &[f64]) -> Result<f64> {
    let (s1, s3) = widths
        .iter()
        .fold((0.0, 0.0), |(s1, s3), &w| (s1 + w, s3 + w * w * w));
    if !(s1 > 0.0) {
        return Err(Error::InvalidArgument(
            "at least one bin width must be positive".into(),
        ));
    }
    Ok((s3 / (12.0 * s1)).sqrt())
}

/// Exact characterization of a line from its effective widths.
pub fn characterize_exact(line: &DelayLine) -> Result<NonlinearityReport> {
    compute_nonlinearity(&exact_widths(line), line.clock_period())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdc_model::build_ideal;

    fn line(taps: &[f64], t: f64) -> DelayLine {
        DelayLine::new("t", t, taps.to_vec()).unwrap()
    }

    #[test]
    fn ideal_histogram_is_flat() {
        let l = build_ideal(4, 40.0).unwrap();
        let h = run_code_density(&l, 4_000_000, PhaseMode::Uniform, 1).unwrap();
        assert_eq!(h.total_hits, 4_000_000);
        for &c in &h.counts {
            assert!((c as f64 - 1e6).abs() < 4.0 * 1e3, "{c}");
        }
    }

    #[test]
    fn zero_width_bin_gets_no_hits() {
        let h = run_code_density(&line(&[10.0, 0.0, 10.0, 20.0], 40.0), 100_000, PhaseMode::Uniform, 2)
            .unwrap();
        assert_eq!(h.counts[1], 0);
    }

    #[test]
    fn truncated_last_bin_ratio() {
        // Bin measures inside [0, 40): 10, 15, 10, 5.
        let h = run_code_density(&line(&[10.0, 15.0, 10.0, 10.0], 40.0), 1_000_000, PhaseMode::Uniform, 3)
            .unwrap();
        let expect = [0.25f64, 0.375, 0.25, 0.125];
        for (c, p) in h.counts.iter().zip(expect) {
            let sd = (1e6 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - 1e6 * p).abs() < 5.0 * sd, "{c} vs {p}");
        }
    }

    #[test]
    fn histogram_is_independent_of_thread_count() {
        let l = build_ideal(16, 100.0).unwrap();
        let n = 3 * CHUNK + 17;
        let a = run_code_density(&l, n, PhaseMode::Uniform, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool
            .install(|| run_code_density(&l, n, PhaseMode::Uniform, 9))
            .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, run_code_density(&l, n, PhaseMode::Uniform, 10).unwrap());
    }

    #[test]
    fn code_density_rejects_bad_input() {
        let l = build_ideal(4, 40.0).unwrap();
        assert!(run_code_density(&l, 0, PhaseMode::Uniform, 0).is_err());
        assert!(run_code_density(&l, 3, PhaseMode::Uniform, 0).is_err());
    }

    #[test]
    fn width_estimates() {
        let h = CodeHistogram::new(vec![1, 1, 1, 1], 40.0, PhaseMode::Uniform).unwrap();
        assert_eq!(estimate_bin_widths(&h).unwrap(), vec![10.0; 4]);
        let h = CodeHistogram::new(vec![1, 0, 1, 2], 40.0, PhaseMode::Uniform).unwrap();
        assert_eq!(estimate_bin_widths(&h).unwrap(), vec![10.0, 0.0, 10.0, 20.0]);
        let h = CodeHistogram::new(vec![1, 0, 1, 2], 40.0, PhaseMode::PhaseLocked).unwrap();
        assert_eq!(estimate_bin_widths(&h), Err(Error::PhaseLockedHistogram));
        assert!(CodeHistogram::new(vec![0, 0], 40.0, PhaseMode::Uniform).is_err());
    }

    #[test]
    fn nonlinearity_examples() {
        let r = compute_nonlinearity(&[10.0; 4], 40.0).unwrap();
        assert!(r.dnl.iter().chain(&r.inl).all(|&x| x == 0.0));
        assert_eq!(r.w_inl_pp, 0.0);

        let r = compute_nonlinearity(&[10.0, 15.0, 10.0, 5.0], 40.0).unwrap();
        assert_eq!(r.lsb_ideal, 10.0);
        assert_eq!(r.dnl, vec![0.0, 5.0, 0.0, -5.0]);
        assert_eq!(r.inl, vec![0.0, 5.0, 5.0, 0.0]);
        assert_eq!(r.w_inl_pp, 5.0);
        assert_eq!(r.dnl_range, (-5.0, 5.0));
        assert_eq!(r.inl_range, (0.0, 5.0));
        assert_eq!(r.width_sum_residual_ps, 0.0);
        assert!(compute_nonlinearity(&[], 40.0).is_err());
        assert!(compute_nonlinearity(&[1.0, -1.0], 40.0).is_err());
    }

    #[test]
    fn sigma_examples() {
        let s = estimate_sigma(&[10.04; 7]).unwrap();
        assert!((s - 10.04 / 12f64.sqrt()).abs() < 1e-12);
        assert!((s - 2.90).abs() < 0.005);
        // sqrt((1000 + 3375 + 1000 + 125) / (12 * 40))
        let s = estimate_sigma(&[10.0, 15.0, 10.0, 5.0]).unwrap();
        assert!((s - 3.385_016_0).abs() < 1e-6);
        assert!(estimate_sigma(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn scale_consistency() {
        let w = [3.0, 11.0, 0.0, 9.5, 16.5];
        let a = compute_nonlinearity(&w, 40.0).unwrap();
        let k = 2.5;
        let ws: Vec<f64> = w.iter().map(|x| x * k).collect();
        let b = compute_nonlinearity(&ws, 40.0 * k).unwrap();
        let close = |x: f64, y: f64| (x * k - y).abs() < 1e-9;
        assert!(a.dnl.iter().zip(&b.dnl).all(|(x, y)| close(*x, *y)));
        assert!(a.inl.iter().zip(&b.inl).all(|(x, y)| close(*x, *y)));
        assert!(close(a.sigma_tdc, b.sigma_tdc));
        assert!(close(a.w_inl_pp, b.w_inl_pp));
    }

    #[test]
    fn exact_widths_truncate_at_period() {
        assert_eq!(
            exact_widths(&line(&[10.0, 15.0, 10.0, 10.0], 40.0)),
            vec![10.0, 15.0, 10.0, 5.0]
        );
        assert_eq!(
            exact_widths(&line(&[30.0, 15.0, 10.0], 40.0)),
            vec![30.0, 10.0, 0.0]
        );
    }

    #[test]
    fn phase_locked_hits_a_narrow_subset() {
        let l = build_ideal(200, 2000.0).unwrap();
        let h = run_code_density(&l, 200_000, PhaseMode::PhaseLocked, 4).unwrap();
        let mut sorted = h.counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let k = (10.0 * 5.0f64).ceil() as usize + 1;
        let top: u64 = sorted[..k].iter().sum();
        assert!(top as f64 >= 0.99 * h.total_hits as f64);
        assert!(h.occupied_bins() < 200);
    }

    #[test]
    fn phase_locked_wraps_around_the_period() {
        let l = build_ideal(10, 100.0).unwrap();
        let model = PhaseLockedModel {
            mean_ps: Some(0.0),
            std_ps: Some(5.0),
        };
        let h = run_code_density_with(&l, 10_000, PhaseMode::PhaseLocked, model, 5).unwrap();
        assert!(h.counts[0] > 0 && h.counts[9] > 0);
        assert_eq!(h.counts[5], 0);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let h = CodeHistogram::new(vec![250000; 4], 40.0, PhaseMode::Uniform).unwrap();
        let text = "# clock_period_ps=40 phase_mode=uniform\n0,250000\n1,250000\n2,250000\n3,250000\n";
        assert_eq!(CodeHistogram::parse_csv(text.as_bytes()).unwrap(), h);

        let odd = CodeHistogram::new(vec![0, 7, 3], 1e6 / 260.0, PhaseMode::PhaseLocked).unwrap();
        let back = CodeHistogram::parse_csv(odd.to_csv().as_bytes()).unwrap();
        assert_eq!(back, odd);
        assert_eq!(back.clock_period.to_bits(), odd.clock_period.to_bits());

        let with_header = "# clock_period_ps=40 phase_mode=uniform\ncode,count\n0,1\n1,3\n";
        assert_eq!(CodeHistogram::parse_csv(with_header.as_bytes()).unwrap().counts, vec![1, 3]);

        let neg = "# clock_period_ps=40 phase_mode=uniform\n0,5\n1,-3\n";
        assert!(matches!(
            CodeHistogram::parse_csv(neg.as_bytes()),
            Err(Error::Schema { line: 3, .. })
        ));
        let no_header = "0,5\n1,3\n";
        assert!(matches!(
            CodeHistogram::parse_csv(no_header.as_bytes()),
            Err(Error::Schema { .. })
        ));
        let gap = "# clock_period_ps=40\n0,5\n2,3\n";
        assert!(CodeHistogram::parse_csv(gap.as_bytes()).is_err());
    }

    #[test]
    fn report_json_has_all_fields() {
        let r = compute_nonlinearity(&[10.0, 15.0, 10.0, 5.0], 40.0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in [
            "bin_widths", "dnl", "inl", "dnl_range", "inl_range", "w_inl_pp", "sigma_tdc",
            "lsb_ideal",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
