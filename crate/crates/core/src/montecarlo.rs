//! Event-level photon-pair simulator and coincidence matcher.
//!
//! Pairs are emitted as a Poisson process; each photon survives its arm with a
//! fixed transmission, picks up Gaussian detector jitter and is time-tagged in
//! integer picoseconds. Dark counts are independent Poisson processes per arm.
//! Streams come out time-sorted from an ordered merge, so long runs can be
//! consumed without materialising every event.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characterize::{characterize_exact, PhaseMode};
use crate::qkd::{self, QkdParams};
use crate::tdc_model::{DelayLine, Quantizer};
use crate::{Error, Result};

const PS_PER_S: f64 = 1e12;
/// Jitter draws are clipped at this many standard deviations.
const JITTER_CLIP: f64 = 10.0;

const STREAM_PAIRS: u64 = 0;
const STREAM_DARK_A: u64 = 1;
const STREAM_DARK_B: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Truth {
    Signal,
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeTag {
    pub channel: Channel,
    pub timestamp_ps: u64,
    pub truth: Truth,
    /// Ground-truth pair index; set for signal tags only.
    pub pair_id: Option<u64>,
    /// Key bit carried by the detection.
    pub bit: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCConfig {
    pub duration_s: f64,
    pub pair_rate: f64,
    pub transmission_a: f64,
    pub transmission_b: f64,
    pub sigma_spd_a: f64,
    pub sigma_spd_b: f64,
    pub dark_a: f64,
    pub dark_b: f64,
    pub bit_error_prob: f64,
    #[serde(default)]
    pub tdc_a: Option<DelayLine>,
    #[serde(default)]
    pub tdc_b: Option<DelayLine>,
    pub phase_mode: PhaseMode,
    /// Fixed phase offset added before quantization in phase-locked mode.
    #[serde(default)]
    pub phase_offset_ps: f64,
    /// Matcher half-width: tags match when `|t_a - t_b| <= window_ps`.
    pub window_ps: f64,
    pub seed: u64,
}

impl Default for MCConfig {
    fn default() -> Self {
        MCConfig {
            duration_s: 1.0,
            pair_rate: 1e5,
            transmission_a: 1.0,
            transmission_b: 1.0,
            sigma_spd_a: 0.0,
            sigma_spd_b: 0.0,
            dark_a: 0.0,
            dark_b: 0.0,
            bit_error_prob: 0.0,
            tdc_a: None,
            tdc_b: None,
            phase_mode: PhaseMode::Uniform,
            phase_offset_ps: 0.0,
            window_ps: 1000.0,
            seed: 0,
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg()))
    }
}

impl MCConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.duration_s > 0.0 && self.duration_s.is_finite(), || {
            format!("duration must be positive, got {}", self.duration_s)
        })?;
        for (name, p) in [
            ("transmission_a", self.transmission_a),
            ("transmission_b", self.transmission_b),
            ("bit_error_prob", self.bit_error_prob),
        ] {
            check((0.0..=1.0).contains(&p), || format!("{name} must lie in [0, 1], got {p}"))?;
        }
        for (name, x) in [
            ("pair_rate", self.pair_rate),
            ("sigma_spd_a", self.sigma_spd_a),
            ("sigma_spd_b", self.sigma_spd_b),
            ("dark_a", self.dark_a),
            ("dark_b", self.dark_b),
            ("window_ps", self.window_ps),
        ] {
            check(x >= 0.0 && x.is_finite(), || format!("{name} must be non-negative, got {x}"))?;
        }
        check(self.phase_offset_ps.is_finite(), || "phase offset must be finite".into())?;
        let horizon = self.duration_s * PS_PER_S + 2.0 * self.guard_ps();
        check(horizon < 2f64.powi(62), || {
            format!("duration {} s overflows 64-bit picosecond timestamps", self.duration_s)
        })?;
        for line in [&self.tdc_a, &self.tdc_b].into_iter().flatten() {
            line.ensure_spans_period()?;
        }
        Ok(())
    }

    /// Offset added to every timestamp so that negative jitter never produces a
    /// negative time.
    pub fn guard_ps(&self) -> f64 {
        (JITTER_CLIP * self.sigma_spd_a.max(self.sigma_spd_b)).ceil()
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    tag: TimeTag,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}
impl Pending {
    fn key(&self) -> (u64, Channel, u64) {
        let t = &self.tag;
        // Dark tags sort after signal tags at the same instant.
        (t.timestamp_ps, t.channel, t.pair_id.unwrap_or(u64::MAX))
    }
}

/// Poisson process with rate `rate_per_ps`, yielding arrival times in ps.
struct PoissonClock {
    rng: ChaCha8Rng,
    rate_per_ps: f64,
    next: f64,
    end: f64,
}

impl PoissonClock {
    fn new(seed: u64, stream: u64, rate_cps: f64, end: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let rate_per_ps = rate_cps / PS_PER_S;
        let mut clock = PoissonClock {
            rng,
            rate_per_ps,
            next: 0.0,
            end,
        };
        clock.next = clock.gap();
        clock
    }

    fn gap(&mut self) -> f64 {
        if self.rate_per_ps > 0.0 {
            let e: f64 = self.rng.sample(Exp1);
            e / self.rate_per_ps
        } else {
            f64::INFINITY
        }
    }

    /// Time of the next arrival, or infinity once past the end of the run.
    fn peek(&self) -> f64 {
        if self.next < self.end {
            self.next
        } else {
            f64::INFINITY
        }
    }

    fn advance(&mut self) {
        self.next += self.gap();
    }
}

/// Streaming, time-ordered event source for both channels.
pub struct EventGenerator {
    cfg: MCConfig,
    guard: f64,
    pairs: PoissonClock,
    dark_a: PoissonClock,
    dark_b: PoissonClock,
    next_pair_id: u64,
    heap: BinaryHeap<Reverse<Pending>>,
}

impl EventGenerator {
    pub fn new(cfg: &MCConfig) -> Result<Self> {
        cfg.validate()?;
        let end = cfg.duration_s * PS_PER_S;
        Ok(EventGenerator {
            guard: cfg.guard_ps(),
            pairs: PoissonClock::new(cfg.seed, STREAM_PAIRS, cfg.pair_rate, end),
            dark_a: PoissonClock::new(cfg.seed, STREAM_DARK_A, cfg.dark_a, end),
            dark_b: PoissonClock::new(cfg.seed, STREAM_DARK_B, cfg.dark_b, end),
            cfg: cfg.clone(),
            next_pair_id: 0,
            heap: BinaryHeap::new(),
        })
    }

    fn stamp(t: f64) -> u64 {
        t.round().max(0.0) as u64
    }

    fn emit_pair(&mut self) {
        let t = self.pairs.next + self.guard;
        let id = self.next_pair_id;
        self.next_pair_id += 1;
        let rng = &mut self.pairs.rng;
        let bit: u8 = rng.random_range(0..2);
        let flip = rng.random::<f64>() < self.cfg.bit_error_prob;
        let arms = [
            (Channel::A, self.cfg.transmission_a, self.cfg.sigma_spd_a, bit),
            (Channel::B, self.cfg.transmission_b, self.cfg.sigma_spd_b, bit ^ flip as u8),
        ];
        for (channel, transmission, sigma, bit) in arms {
            let survives = rng.random::<f64>() < transmission;
            let z: f64 = rng.sample(StandardNormal);
            if survives {
                let jitter = (z.clamp(-JITTER_CLIP, JITTER_CLIP)) * sigma;
                self.heap.push(Reverse(Pending {
                    tag: TimeTag {
                        channel,
                        timestamp_ps: Self::stamp(t + jitter),
                        truth: Truth::Signal,
                        pair_id: Some(id),
                        bit,
                    },
                }));
            }
        }
        self.pairs.advance();
    }

    fn emit_dark(&mut self, channel: Channel) {
        let clock = match channel {
            Channel::A => &mut self.dark_a,
            Channel::B => &mut self.dark_b,
        };
        let t = clock.next + self.guard;
        let bit: u8 = clock.rng.random_range(0..2);
        clock.advance();
        self.heap.push(Reverse(Pending {
            tag: TimeTag {
                channel,
                timestamp_ps: Self::stamp(t),
                truth: Truth::Dark,
                pair_id: None,
                bit,
            },
        }));
    }
}

impl Iterator for EventGenerator {
    type Item = TimeTag;

    fn next(&mut self) -> Option<TimeTag> {
        loop {
            // Jittered signal tags land no earlier than their emission time
            // (the guard covers the clipped jitter), so nothing generated later
            // can precede this bound.
            let pair_t = self.pairs.peek();
            let dark_t = self.dark_a.peek().min(self.dark_b.peek()) + self.guard;
            let bound = pair_t.min(dark_t);
            if let Some(Reverse(top)) = self.heap.peek() {
                if (top.tag.timestamp_ps as f64) <= bound.floor() {
                    return self.heap.pop().map(|Reverse(p)| p.tag);
                }
            }
            if bound.is_infinite() {
                return self.heap.pop().map(|Reverse(p)| p.tag);
            }
            if pair_t <= dark_t {
                self.emit_pair();
            } else if self.dark_a.peek() <= self.dark_b.peek() {
                self.emit_dark(Channel::A);
            } else {
                self.emit_dark(Channel::B);
            }
        }
    }
}

/// Generates both time-sorted streams.
pub fn generate_events(cfg: &MCConfig) -> Result<(Vec<TimeTag>, Vec<TimeTag>)> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for tag in EventGenerator::new(cfg)? {
        match tag.channel {
            Channel::A => a.push(tag),
            Channel::B => b.push(tag),
        }
    }
    Ok((a, b))
}

fn ensure_sorted(stream: &[TimeTag], name: &str) -> Result<()> {
    match stream
        .windows(2)
        .position(|w| w[1].timestamp_ps < w[0].timestamp_ps)
    {
        Some(i) => Err(Error::Unsorted(format!(
            "stream {name} decreases at index {}",
            i + 1
        ))),
        None => Ok(()),
    }
}

/// Re-times every tag through `line`: the timestamp is split into a clock
/// epoch and a phase, the phase is quantized and the readout is the epoch
/// start plus the centre of the hit bin. In phase-locked mode the phase is
/// taken after shifting by `phase_offset_ps` (and the shift is undone after
/// quantization). The result is re-sorted, since a bin straddling the period
/// end can move a tag past the first tag of the next epoch.
pub fn apply_tdc(
    stream: &[TimeTag],
    line: &DelayLine,
    phase_mode: PhaseMode,
    phase_offset_ps: f64,
) -> Result<Vec<TimeTag>> {
    ensure_sorted(stream, "input")?;
    if stream.is_empty() {
        return Ok(Vec::new());
    }
    let quant = Quantizer::new(line)?;
    let t_clk = line.clock_period();
    let centres: Vec<f64> = (0..line.n_bins())
        .map(|c| line.code_to_time(c).expect("code in range"))
        .collect();
    let offset = match phase_mode {
        PhaseMode::Uniform => 0.0,
        PhaseMode::PhaseLocked => phase_offset_ps,
    };
    let mut out: Vec<TimeTag> = stream
        .iter()
        .map(|tag| {
            let t = tag.timestamp_ps as f64 + offset;
            let epoch = (t / t_clk).floor();
            let phase = (t - epoch * t_clk).clamp(0.0, t_clk * (1.0 - f64::EPSILON));
            let readout = epoch * t_clk + centres[quant.code(phase)] - offset;
            TimeTag {
                timestamp_ps: readout.round().max(0.0) as u64,
                ..*tag
            }
        })
        .collect();
    out.sort_by_key(|t| t.timestamp_ps);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMetrics {
    pub duration_s: f64,
    pub window_ps: f64,
    pub tags_a: u64,
    pub tags_b: u64,
    pub matched_a: u64,
    pub matched_b: u64,
    /// Pairs with both photons detected (both arms carry the pair id).
    pub detected_pairs: u64,
    pub true_coincidences_captured: u64,
    pub accidental_coincidences: u64,
    pub bit_errors: u64,
    pub eta_hat: f64,
    pub eta_se: f64,
    pub c_acc_hat_cps: f64,
    pub c_acc_se_cps: f64,
    pub qber_hat: f64,
    pub qber_se: f64,
    pub singles_a_cps: f64,
    pub singles_b_cps: f64,
}

impl EmpiricalMetrics {
    pub fn coincidences(&self) -> u64 {
        self.true_coincidences_captured + self.accidental_coincidences
    }
}

fn binomial(k: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let p = k as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

/// Greedy nearest-neighbour coincidence matching with single-use tags.
///
/// All pairs with `|t_a - t_b| <= window_ps` are ranked by `|t_a - t_b|`, then
/// by `t_a + t_b` (which prefers the earlier B tag for a given A tag), then by
/// the stream indices; pairs are taken in that order when both tags are still
/// free. The ranking is symmetric in A and B, so swapping the streams yields
/// the same match set.
pub fn match_pairs(a: &[TimeTag], b: &[TimeTag], window_ps: f64) -> Result<Vec<(usize, usize)>> {
    ensure_sorted(a, "A")?;
    ensure_sorted(b, "B")?;
    if !(window_ps >= 0.0) || !window_ps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "window must be non-negative, got {window_ps}"
        )));
    }
    let w = window_ps.floor() as u64;
    let mut candidates: Vec<(u64, u64, usize, usize, usize, usize)> = Vec::new();
    let mut lo = 0;
    for (i, ta) in a.iter().enumerate() {
        let t = ta.timestamp_ps;
        while lo < b.len() && b[lo].timestamp_ps + w < t {
            lo += 1;
        }
        let mut j = lo;
        while j < b.len() && b[j].timestamp_ps <= t.saturating_add(w) {
            let tb = b[j].timestamp_ps;
            candidates.push((t.abs_diff(tb), t + tb, i.min(j), i.max(j), i, j));
            j += 1;
        }
    }
    candidates.sort_unstable();
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut matches = Vec::new();
    for &(_, _, _, _, i, j) in &candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            matches.push((i, j));
        }
    }
    matches.sort_unstable();
    Ok(matches)
}

/// Matches two streams and measures detection efficiency, accidental rate
/// and QBER over a run of `duration_s` seconds.
pub fn match_coincidences(
    a: &[TimeTag],
    b: &[TimeTag],
    window_ps: f64,
    duration_s: f64,
) -> Result<EmpiricalMetrics> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    let matches = match_pairs(a, b, window_ps)?;
    let mut true_hits = 0u64;
    let mut errors = 0u64;
    for &(i, j) in &matches {
        if a[i].pair_id.is_some() && a[i].pair_id == b[j].pair_id {
            true_hits += 1;
        }
        if a[i].bit != b[j].bit {
            errors += 1;
        }
    }
    let mut ids_a: Vec<u64> = a.iter().filter_map(|t| t.pair_id).collect();
    let mut ids_b: Vec<u64> = b.iter().filter_map(|t| t.pair_id).collect();
    ids_a.sort_unstable();
    ids_b.sort_unstable();
    let detected_pairs = count_common(&ids_a, &ids_b);

    let n = matches.len() as u64;
    let acc = n - true_hits;
    let (eta_hat, eta_se) = binomial(true_hits, detected_pairs);
    let (qber_hat, qber_se) = binomial(errors, n);
    Ok(EmpiricalMetrics {
        duration_s,
        window_ps,
        tags_a: a.len() as u64,
        tags_b: b.len() as u64,
        matched_a: n,
        matched_b: n,
        detected_pairs,
        true_coincidences_captured: true_hits,
        accidental_coincidences: acc,
        bit_errors: errors,
        eta_hat,
        eta_se,
        c_acc_hat_cps: acc as f64 / duration_s,
        c_acc_se_cps: (acc as f64).sqrt() / duration_s,
        qber_hat,
        qber_se,
        singles_a_cps: a.len() as f64 / duration_s,
        singles_b_cps: b.len() as f64 / duration_s,
    })
}

fn count_common(x: &[u64], y: &[u64]) -> u64 {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < x.len() && j < y.len() {
        match x[i].cmp(&y[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Expected accidental rate of [`match_coincidences`] for two independent
/// Poisson streams: all-pairs rate `2 w S_A S_B` minus the leading-order loss
/// from tags that fall within reach of two partners and can only be used once.
pub fn matcher_accidental_rate(s_a: f64, s_b: f64, window_ps: f64) -> f64 {
    let w = window_ps / PS_PER_S;
    2.0 * w * s_a * s_b * (1.0 - w * (s_a + s_b))
}

/// First-order accidental rate of [`match_coincidences`] when the streams also
/// carry `c_true` correlated pairs with Gaussian offset spread `sigma_ps`.
///
/// An uncorrelated candidate at offset `u` survives only if neither tag's own
/// partner sits closer than `|u|`. Cascades from orphaned partners are ignored.
/// Reduces to [`matcher_accidental_rate`] for `c_true = 0`.
pub fn matcher_accidental_rate_paired(
    s_a: f64,
    s_b: f64,
    c_true: f64,
    sigma_ps: f64,
    window_ps: f64,
) -> f64 {
    let frac = |s: f64| if s > 0.0 { (c_true / s).clamp(0.0, 1.0) } else { 0.0 };
    let (fa, fb) = (frac(s_a), frac(s_b));
    let farther = |u: f64| {
        if sigma_ps > 0.0 {
            libm::erfc(u / (std::f64::consts::SQRT_2 * sigma_ps))
        } else if u > 0.0 {
            0.0
        } else {
            1.0
        }
    };
    let g = |u: f64| {
        let q = farther(u);
        (1.0 - fa + fa * q) * (1.0 - fb + fb * q)
    };
    const STEPS: usize = 2048;
    let h = window_ps / STEPS as f64;
    let mut integral = g(0.0) + g(window_ps);
    for k in 1..STEPS {
        integral += if k % 2 == 1 { 4.0 } else { 2.0 } * g(k as f64 * h);
    }
    integral *= h / 3.0;
    let w = window_ps / PS_PER_S;
    2.0 * (integral / PS_PER_S) * s_a * s_b * (1.0 - w * (s_a + s_b))
}

/// Runs generation, optional TDC re-timing and matching for one configuration.
pub fn simulate(cfg: &MCConfig) -> Result<EmpiricalMetrics> {
    let (a, b) = generate_events(cfg)?;
    let retime = |s: Vec<TimeTag>, line: &Option<DelayLine>| match line {
        Some(l) => apply_tdc(&s, l, cfg.phase_mode, cfg.phase_offset_ps),
        None => Ok(s),
    };
    let a = retime(a, &cfg.tdc_a)?;
    let b = retime(b, &cfg.tdc_b)?;
    match_coincidences(&a, &b, cfg.window_ps, cfg.duration_s)
}

/// Independent replicas of `cfg`, one per seed, in seed order.
pub fn simulate_replicas(cfg: &MCConfig, seeds: &[u64]) -> Result<Vec<EmpiricalMetrics>> {
    seeds
        .par_iter()
        .map(|&seed| simulate(&MCConfig { seed, ..cfg.clone() }))
        .collect()
}

/// Window convention used to map the matcher onto the analytical window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowConvention {
    /// The analytical window is the full matcher width, `2 * window_ps`.
    FullWidth,
    /// The analytical window equals the matcher half-width.
    OneSided,
}

impl WindowConvention {
    pub fn nominal_window(self, window_ps: f64) -> f64 {
        match self {
            WindowConvention::FullWidth => 2.0 * window_ps,
            WindowConvention::OneSided => window_ps,
        }
    }
}

/// Analytical parameters describing the same scenario as `cfg`.
///
/// The relative jitter of the two arms enters as `sigma_spd`; TDC precision
/// and INL come from the exact characterization of each arm's line, combined
/// in quadrature for precision and by maximum for the peak-to-peak INL.
pub fn params_from_mc(cfg: &MCConfig, convention: WindowConvention) -> Result<QkdParams> {
    cfg.validate()?;
    let mut sigma_tdc_sq = 0.0;
    let mut w_inl_pp: f64 = 0.0;
    for line in [&cfg.tdc_a, &cfg.tdc_b].into_iter().flatten() {
        let r = characterize_exact(line)?;
        sigma_tdc_sq += r.sigma_tdc * r.sigma_tdc;
        w_inl_pp = w_inl_pp.max(r.w_inl_pp);
    }
    Ok(QkdParams {
        delta_t0: convention.nominal_window(cfg.window_ps),
        w_inl_pp,
        sigma_spd: cfg.sigma_spd_a.hypot(cfg.sigma_spd_b),
        sigma_other: 0.0,
        sigma_tdc: sigma_tdc_sq.sqrt(),
        s_a_sig: cfg.pair_rate * cfg.transmission_a,
        s_b_sig: cfg.pair_rate * cfg.transmission_b,
        d_a: cfg.dark_a,
        d_b: cfg.dark_b,
        c_true: cfg.pair_rate * cfg.transmission_a * cfg.transmission_b,
        e_base: cfg.bit_error_prob.min(0.5),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model: f64,
    pub empirical: f64,
    pub stderr: f64,
    /// `(empirical - model) / stderr`; zero when both agree exactly.
    pub z: f64,
}

impl Comparison {
    fn new(model: f64, empirical: f64, stderr: f64) -> Self {
        let diff = empirical - model;
        let z = if diff == 0.0 {
            0.0
        } else if stderr > 0.0 {
            diff / stderr
        } else {
            diff.signum() * f64::INFINITY
        };
        Comparison {
            model,
            empirical,
            stderr,
            z,
        }
    }
}

/// Model-versus-simulation comparison under one window convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionComparison {
    pub convention: WindowConvention,
    pub params: QkdParams,
    pub delta_t_eff_ps: f64,
    pub eta: Comparison,
    pub c_acc: Comparison,
    pub qber: Comparison,
    /// Model QBER is at least the empirical value minus three standard errors.
    pub conservative: bool,
    /// `delta_t_eff` is at least the matcher's full width.
    pub window_covers_matcher: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub metrics: EmpiricalMetrics,
    /// Expected accidental rate for this matcher from the measured singles.
    pub matcher_closed_form_c_acc: Comparison,
    pub full_width: ConventionComparison,
    pub one_sided: ConventionComparison,
}

impl ValidationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

// Standard errors under the model hypothesis, so that an empty or saturated
// sample still yields a finite z.
fn null_binomial_se(p: f64, n: u64) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

fn null_poisson_se(rate_cps: f64, duration_s: f64) -> f64 {
    (rate_cps * duration_s).sqrt() / duration_s
}

fn compare(
    metrics: &EmpiricalMetrics,
    params: &QkdParams,
    convention: WindowConvention,
    window_ps: f64,
) -> Result<ConventionComparison> {
    let point = qkd::qber(params)?;
    let eta = Comparison::new(
        point.eta_coin,
        metrics.eta_hat,
        null_binomial_se(point.eta_coin, metrics.detected_pairs),
    );
    let c_acc = Comparison::new(
        point.c_acc,
        metrics.c_acc_hat_cps,
        null_poisson_se(point.c_acc, metrics.duration_s),
    );
    let qber = Comparison::new(point.qber, metrics.qber_hat, metrics.qber_se);
    Ok(ConventionComparison {
        convention,
        params: *params,
        delta_t_eff_ps: point.delta_t_eff,
        conservative: point.qber >= metrics.qber_hat - 3.0 * metrics.qber_se,
        window_covers_matcher: point.delta_t_eff >= 2.0 * window_ps,
        eta,
        c_acc,
        qber,
    })
}

/// Simulates `cfg` and compares the measurement with the analytical model.
/// `params` is the full-width description of the scenario (see
/// [`params_from_mc`]); the one-sided reading halves its nominal window.
pub fn validate_against_model(cfg: &MCConfig, params: &QkdParams) -> Result<ValidationReport> {
    params.validate()?;
    let expected = params_from_mc(cfg, WindowConvention::FullWidth)?;
    let consistent = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0);
    if !consistent(params.s_a_sig, expected.s_a_sig)
        || !consistent(params.s_b_sig, expected.s_b_sig)
        || !consistent(params.d_a, expected.d_a)
        || !consistent(params.d_b, expected.d_b)
    {
        return Err(Error::InvalidArgument(
            "model parameters describe different singles rates than the simulation".into(),
        ));
    }
    let metrics = simulate(cfg)?;
    let one_sided = QkdParams {
        delta_t0: params.delta_t0 / 2.0,
        ..*params
    };
    let sigma = qkd::system_jitter(params.sigma_spd, params.sigma_other, params.sigma_tdc)?;
    let closed = matcher_accidental_rate_paired(
        params.s_a_sig + params.d_a,
        params.s_b_sig + params.d_b,
        params.c_true,
        sigma,
        cfg.window_ps,
    );
    Ok(ValidationReport {
        seed: cfg.seed,
        matcher_closed_form_c_acc: Comparison::new(
            closed,
            metrics.c_acc_hat_cps,
            null_poisson_se(closed, metrics.duration_s),
        ),
        full_width: compare(&metrics, params, WindowConvention::FullWidth, cfg.window_ps)?,
        one_sided: compare(&metrics, &one_sided, WindowConvention::OneSided, cfg.window_ps)?,
        metrics,
    })
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::A => "A",
            Channel::B => "B",
        })
    }
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Truth::Signal => "signal",
            Truth::Dark => "dark",
        })
    }
}

/// Writes tags as `channel,timestamp_ps,truth,pair_id,bit` after a comment line
/// echoing the configuration (without delay lines) and seed.
pub fn write_time_tags(out: impl Write, cfg: &MCConfig, tags: &[TimeTag]) -> Result<()> {
    let mut out = std::io::BufWriter::new(out);
    let echo = MCConfig {
        tdc_a: None,
        tdc_b: None,
        ..cfg.clone()
    };
    let io = |e: std::io::Error| Error::InvalidArgument(e.to_string());
    writeln!(
        out,
        "# seed={} config={}",
        cfg.seed,
        serde_json::to_string(&echo).expect("config serializes")
    )
    .map_err(io)?;
    writeln!(out, "channel,timestamp_ps,truth,pair_id,bit").map_err(io)?;
    for t in tags {
        match t.pair_id {
            Some(id) => writeln!(out, "{},{},{},{},{}", t.channel, t.timestamp_ps, t.truth, id, t.bit),
            None => writeln!(out, "{},{},{},,{}", t.channel, t.timestamp_ps, t.truth, t.bit),
        }
        .map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn export_time_tags(path: impl AsRef<Path>, cfg: &MCConfig, tags: &[TimeTag]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_time_tags(file, cfg, tags).map_err(|e| Error::io(path, e))
}

pub fn parse_time_tags(reader: impl BufRead) -> Result<Vec<TimeTag>> {
    let mut tags = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let schema = |msg: String| Error::Schema { line: lineno, msg };
        let line = line.map_err(|e| schema(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("channel,") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(schema(format!("expected 5 fields, got {}", f.len())));
        }
        let channel = match f[0] {
            "A" => Channel::A,
            "B" => Channel::B,
            other => return Err(schema(format!("unknown channel '{other}'"))),
        };
        let timestamp_ps = f[1]
            .parse()
            .map_err(|_| schema(format!("bad timestamp '{}'", f[1])))?;
        let truth = match f[2] {
            "signal" => Truth::Signal,
            "dark" => Truth::Dark,
            other => return Err(schema(format!("unknown truth '{other}'"))),
        };
        let pair_id = match f[3] {
            "" => None,
            s => Some(s.parse().map_err(|_| schema(format!("bad pair id '{s}'")))?),
        };
        if (truth == Truth::Signal) != pair_id.is_some() {
            return Err(schema("signal tags carry a pair id, dark tags do not".into()));
        }
        let bit = match f[4] {
            "0" => 0,
            "1" => 1,
            other => return Err(schema(format!("bad bit '{other}'"))),
        };
        tags.push(TimeTag {
            channel,
            timestamp_ps,
            truth,
            pair_id,
            bit,
        });
    }
    Ok(tags)
}

pub fn import_time_tags(path: impl AsRef<Path>) -> Result<Vec<TimeTag>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_time_tags(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tdc_model::build_ideal;

    fn tag(channel: Channel, t: u64, pair: Option<u64>) -> TimeTag {
        TimeTag {
            channel,
            timestamp_ps: t,
            truth: if pair.is_some() { Truth::Signal } else { Truth::Dark },
            pair_id: pair,
            bit: 0,
        }
    }

    #[test]
    fn dark_counts_are_poisson() {
        let cfg = MCConfig {
            duration_s: 10.0,
            pair_rate: 0.0,
            dark_a: 1000.0,
            dark_b: 300.0,
            seed: 1,
            ..MCConfig::default()
        };
        let (a, b) = generate_events(&cfg).unwrap();
        assert!((a.len() as f64 - 1e4).abs() < 4.0 * 100.0, "{}", a.len());
        assert!((b.len() as f64 - 3e3).abs() < 4.0 * 3e3f64.sqrt(), "{}", b.len());
        assert!(a.iter().all(|t| t.truth == Truth::Dark && t.pair_id.is_none()));
        assert!(a.windows(2).all(|w| w[0].timestamp_ps <= w[1].timestamp_ps));
    }

    #[test]
    fn noiseless_streams_coincide() {
        let cfg = MCConfig {
            pair_rate: 1e4,
            seed: 2,
            ..MCConfig::default()
        };
        let (a, b) = generate_events(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.timestamp_ps, y.timestamp_ps);
            assert_eq!(x.pair_id, y.pair_id);
            assert_eq!(x.bit, y.bit);
        }
        let m = match_coincidences(&a, &b, 10.0, cfg.duration_s).unwrap();
        assert_eq!(m.eta_hat, 1.0);
        assert_eq!(m.accidental_coincidences, 0);
        assert_eq!(m.qber_hat, 0.0);
    }

    #[test]
    fn survivor_pairs_follow_transmissions() {
        let cfg = MCConfig {
            pair_rate: 1e5,
            transmission_a: 0.5,
            transmission_b: 0.4,
            sigma_spd_a: 50.0,
            sigma_spd_b: 50.0,
            seed: 3,
            ..MCConfig::default()
        };
        let (a, b) = generate_events(&cfg).unwrap();
        let m = match_coincidences(&a, &b, 1000.0, 1.0).unwrap();
        // 1e5 * 0.5 * 0.4; sd of a binomial count ~ 126.
        assert!((m.detected_pairs as f64 - 2e4).abs() < 4.0 * 130.0, "{}", m.detected_pairs);
        assert!((a.len() as f64 - 5e4).abs() < 4.0 * 230.0);
    }

    #[test]
    fn streams_are_sorted_and_non_negative_with_large_jitter() {
        let cfg = MCConfig {
            pair_rate: 2e6,
            duration_s: 0.01,
            sigma_spd_a: 5000.0,
            sigma_spd_b: 10.0,
            dark_a: 1e5,
            dark_b: 1e5,
            seed: 4,
            ..MCConfig::default()
        };
        let (a, b) = generate_events(&cfg).unwrap();
        for s in [&a, &b] {
            assert!(s.windows(2).all(|w| w[0].timestamp_ps <= w[1].timestamp_ps));
        }
        assert!(a.iter().any(|t| t.truth == Truth::Dark));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = MCConfig {
            pair_rate: 1e5,
            transmission_a: 0.3,
            sigma_spd_a: 100.0,
            dark_b: 1e4,
            bit_error_prob: 0.1,
            seed: 5,
            ..MCConfig::default()
        };
        assert_eq!(generate_events(&cfg).unwrap(), generate_events(&cfg).unwrap());
        let other = MCConfig { seed: 6, ..cfg.clone() };
        assert_ne!(generate_events(&cfg).unwrap(), generate_events(&other).unwrap());
    }

    #[test]
    fn bit_errors_follow_the_flip_probability() {
        let cfg = MCConfig {
            pair_rate: 1e5,
            bit_error_prob: 0.1,
            seed: 7,
            ..MCConfig::default()
        };
        let (a, b) = generate_events(&cfg).unwrap();
        let m = match_coincidences(&a, &b, 0.0, 1.0).unwrap();
        assert!((m.qber_hat - 0.1).abs() < 4.0 * m.qber_se);
    }

    #[test]
    fn config_validation() {
        assert!(MCConfig { transmission_a: 1.5, ..MCConfig::default() }.validate().is_err());
        assert!(MCConfig { dark_a: -1.0, ..MCConfig::default() }.validate().is_err());
        assert!(MCConfig { duration_s: 0.0, ..MCConfig::default() }.validate().is_err());
        assert!(MCConfig { duration_s: 1e9, ..MCConfig::default() }.validate().is_err());
        assert!(MCConfig::default().validate().is_ok());
    }

    #[test]
    fn tdc_error_is_bounded_by_half_a_bin() {
        let line = build_ideal(100, 1000.0).unwrap();
        let cfg = MCConfig {
            pair_rate: 1e5,
            sigma_spd_a: 300.0,
            seed: 8,
            ..MCConfig::default()
        };
        let (a, _) = generate_events(&cfg).unwrap();
        let out = apply_tdc(&a, &line, PhaseMode::Uniform, 0.0).unwrap();
        let mut orig: Vec<_> = a.iter().map(|t| (t.pair_id, t.timestamp_ps)).collect();
        let mut new: Vec<_> = out.iter().map(|t| (t.pair_id, t.timestamp_ps)).collect();
        orig.sort_unstable();
        new.sort_unstable();
        for (x, y) in orig.iter().zip(&new) {
            assert_eq!(x.0, y.0);
            assert!((x.1 as f64 - y.1 as f64).abs() <= line.lsb() / 2.0 + 0.5);
        }
        assert!(apply_tdc(&[], &line, PhaseMode::Uniform, 0.0).unwrap().is_empty());
    }

    #[test]
    fn wide_bin_gives_large_errors() {
        // One 64.3 ps bin in a 10 ps chain.
        let mut taps = vec![10.0; 100];
        taps[40] = 64.3;
        let line = DelayLine::new("w", 1000.0, taps).unwrap();
        let start = line.edges()[40];
        let tags: Vec<TimeTag> = (0..64)
            .map(|k| tag(Channel::A, (10_000.0 + start).ceil() as u64 + k, None))
            .collect();
        let out = apply_tdc(&tags, &line, PhaseMode::Uniform, 0.0).unwrap();
        let worst = tags
            .iter()
            .zip(&out)
            .map(|(x, y)| x.timestamp_ps.abs_diff(y.timestamp_ps))
            .max()
            .unwrap();
        assert!(worst >= 32);
    }

    #[test]
    fn phase_locked_offset_is_undone() {
        let line = build_ideal(10, 100.0).unwrap();
        let tags = [tag(Channel::A, 1003, None)];
        let plain = apply_tdc(&tags, &line, PhaseMode::Uniform, 0.0).unwrap();
        assert_eq!(plain[0].timestamp_ps, 1005);
        let locked = apply_tdc(&tags, &line, PhaseMode::PhaseLocked, 4.0).unwrap();
        // 1007 lands in the bin centred at 1005, then shifts back by 4.
        assert_eq!(locked[0].timestamp_ps, 1001);
        let ignored = apply_tdc(&tags, &line, PhaseMode::Uniform, 4.0).unwrap();
        assert_eq!(ignored, plain);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let a = [tag(Channel::A, 10, None), tag(Channel::A, 5, None)];
        assert!(matches!(match_pairs(&a, &[], 1.0), Err(Error::Unsorted(_))));
        let line = build_ideal(4, 40.0).unwrap();
        assert!(apply_tdc(&a, &line, PhaseMode::Uniform, 0.0).is_err());
    }

    #[test]
    fn matcher_examples() {
        let a = [tag(Channel::A, 100, None), tag(Channel::A, 200, None)];
        let b = [tag(Channel::B, 100, None), tag(Channel::B, 201, None)];
        assert_eq!(match_pairs(&a, &b, 0.0).unwrap(), vec![(0, 0)]);
        assert_eq!(match_pairs(&a, &b, 1.0).unwrap(), vec![(0, 0), (1, 1)]);

        // Equidistant B tags: the earlier one wins.
        let a = [tag(Channel::A, 100, None)];
        let b = [tag(Channel::B, 90, None), tag(Channel::B, 110, None)];
        assert_eq!(match_pairs(&a, &b, 10.0).unwrap(), vec![(0, 0)]);

        // Nearest neighbour beats first come.
        let a = [tag(Channel::A, 100, None), tag(Channel::A, 108, None)];
        let b = [tag(Channel::B, 107, None)];
        assert_eq!(match_pairs(&a, &b, 10.0).unwrap(), vec![(1, 0)]);
    }

    /// Exhaustive reference: repeatedly take the globally best remaining pair.
    type Rank = (u64, u64, usize, usize);

    fn brute_force(a: &[TimeTag], b: &[TimeTag], w: u64) -> Vec<(usize, usize)> {
        let mut used_a = vec![false; a.len()];
        let mut used_b = vec![false; b.len()];
        let mut out = Vec::new();
        loop {
            let mut best: Option<(Rank, usize, usize)> = None;
            for i in 0..a.len() {
                for j in 0..b.len() {
                    let (x, y) = (a[i].timestamp_ps, b[j].timestamp_ps);
                    if used_a[i] || used_b[j] || x.abs_diff(y) > w {
                        continue;
                    }
                    let key = (x.abs_diff(y), x + y, i.min(j), i.max(j));
                    if best.is_none_or(|(k, _, _)| key < k) {
                        best = Some((key, i, j));
                    }
                }
            }
            match best {
                Some((_, i, j)) => {
                    used_a[i] = true;
                    used_b[j] = true;
                    out.push((i, j));
                }
                None => break,
            }
        }
        out.sort_unstable();
        out
    }

    #[test]
    fn matcher_agrees_with_brute_force_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let mut gen = |c: Channel| {
                let n = rng.random_range(0..25);
                let mut ts: Vec<u64> = (0..n).map(|_| rng.random_range(0..400)).collect();
                ts.sort_unstable();
                ts.into_iter().map(|t| tag(c, t, None)).collect::<Vec<_>>()
            };
            let a = gen(Channel::A);
            let b = gen(Channel::B);
            let w = rng.random_range(0..30u64);
            let m = match_pairs(&a, &b, w as f64).unwrap();
            assert_eq!(m, brute_force(&a, &b, w));
            let mut swapped: Vec<(usize, usize)> =
                match_pairs(&b, &a, w as f64).unwrap().into_iter().map(|(j, i)| (i, j)).collect();
            swapped.sort_unstable();
            assert_eq!(m, swapped);
            let used: std::collections::HashSet<usize> = m.iter().map(|p| p.0).collect();
            assert_eq!(used.len(), m.len());
        }
    }

    #[test]
    fn accidentals_match_the_closed_form() {
        let s = 1e6;
        let cfg = MCConfig {
            duration_s: 1.0,
            pair_rate: 0.0,
            dark_a: s,
            dark_b: s,
            seed: 12,
            ..MCConfig::default()
        };
        let (a, b) = generate_events(&cfg).unwrap();
        let m = match_coincidences(&a, &b, 1000.0, 1.0).unwrap();
        let expect = matcher_accidental_rate(m.singles_a_cps, m.singles_b_cps, 1000.0);
        assert!((m.c_acc_hat_cps - expect).abs() < 3.0 * m.c_acc_se_cps);
        let eq5 = qkd::accidental_rate(s, s, 2000.0).unwrap();
        assert!((m.c_acc_hat_cps / eq5 - 1.0).abs() < 0.15);
    }

    #[test]
    fn paired_closed_form_reduces_and_shrinks_with_pairs() {
        let free = matcher_accidental_rate(1e6, 2e6, 500.0);
        let paired0 = matcher_accidental_rate_paired(1e6, 2e6, 0.0, 100.0, 500.0);
        assert!((paired0 / free - 1.0).abs() < 1e-9);
        let some = matcher_accidental_rate_paired(1e6, 2e6, 5e5, 100.0, 500.0);
        let more = matcher_accidental_rate_paired(1e6, 2e6, 1e6, 100.0, 500.0);
        assert!(more < some && some < free);
        // Sharp partners always win, leaving only the unpaired fractions.
        let sharp = matcher_accidental_rate_paired(1e6, 1e6, 5e5, 0.0, 500.0);
        assert!((sharp / (0.25 * matcher_accidental_rate(1e6, 1e6, 500.0)) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn time_tag_csv_round_trip() {
        let cfg = MCConfig {
            pair_rate: 1e3,
            dark_a: 500.0,
            transmission_b: 0.5,
            bit_error_prob: 0.2,
            seed: 13,
            ..MCConfig::default()
        };
        let (a, b) = generate_events(&cfg).unwrap();
        let all: Vec<TimeTag> = a.into_iter().chain(b).collect();
        let mut buf = Vec::new();
        write_time_tags(&mut buf, &cfg, &all).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# seed=13 config="));
        assert_eq!(parse_time_tags(text.as_bytes()).unwrap(), all);
        assert!(parse_time_tags("A,5,dark,3,0\n".as_bytes()).is_err());
        assert!(parse_time_tags("C,5,dark,,0\n".as_bytes()).is_err());
    }

    #[test]
    fn params_follow_the_configuration() {
        let cfg = MCConfig {
            pair_rate: 1e6,
            transmission_a: 0.5,
            transmission_b: 0.2,
            sigma_spd_a: 30.0,
            sigma_spd_b: 40.0,
            window_ps: 250.0,
            tdc_a: Some(build_ideal(10, 100.0).unwrap()),
            ..MCConfig::default()
        };
        let p = params_from_mc(&cfg, WindowConvention::FullWidth).unwrap();
        assert_eq!(p.delta_t0, 500.0);
        assert_eq!(p.sigma_spd, 50.0);
        assert_eq!(p.c_true, 1e5);
        assert_eq!(p.w_inl_pp, 0.0);
        assert!((p.sigma_tdc - 10.0 / 12f64.sqrt()).abs() < 1e-12);
        assert_eq!(params_from_mc(&cfg, WindowConvention::OneSided).unwrap().delta_t0, 250.0);
    }

    #[test]
    fn validation_rejects_mismatched_scenarios() {
        let cfg = MCConfig::default();
        let mut p = params_from_mc(&cfg, WindowConvention::FullWidth).unwrap();
        p.s_a_sig *= 2.0;
        assert!(validate_against_model(&cfg, &p).is_err());
    }
}
