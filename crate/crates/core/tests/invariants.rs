use proptest::prelude::*;

use tdcqkd::characterize::{
    characterize_exact, compute_nonlinearity, estimate_bin_widths, run_code_density, PhaseMode,
};
use tdcqkd::montecarlo::{
    apply_tdc, generate_events, match_coincidences, match_pairs, parse_time_tags, write_time_tags,
    Channel, MCConfig, TimeTag, Truth,
};
use tdcqkd::presets::{build_preset, calibrated_plan, PresetName};
use tdcqkd::tdc_model::{apply_mitigation, inject_defects, Defect, DelayLine, MitigationPlan};

fn line_strategy() -> impl Strategy<Value = DelayLine> {
    (
        prop::collection::vec(prop_oneof![1 => Just(0.0), 6 => 0.01f64..5.0], 2..120),
        50.0f64..5000.0,
        1.0f64..1.25,
    )
        .prop_filter_map("needs a nonzero tap", |(taps, period, overhang)| {
            let sum: f64 = taps.iter().sum();
            (sum > 0.0).then(|| {
                let k = period * overhang / sum;
                DelayLine::new("p", period, taps.iter().map(|w| w * k).collect()).unwrap()
            })
        })
}

fn plan_strategy() -> impl Strategy<Value = MitigationPlan> {
    (0.0f64..20.0, 5.0f64..200.0, 0.0f64..=1.0).prop_map(|(floor, cap, att)| MitigationPlan {
        widen_zero_bins_to: floor,
        clip_wide_bins_at: cap.max(floor),
        crc_step_attenuation: att,
        target_bins: None,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn code_to_time_is_monotone_and_round_trips(line in line_strategy()) {
        let mut last = f64::NEG_INFINITY;
        for c in 0..line.n_bins() {
            let t = line.code_to_time(c).unwrap();
            prop_assert!(t >= last);
            last = t;
            if line.taps()[c] > 0.0 && t < line.clock_period() {
                prop_assert_eq!(line.quantize(t).unwrap(), c);
            }
        }
    }

    #[test]
    fn mitigation_preserves_shape_and_is_idempotent(line in line_strategy(), plan in plan_strategy()) {
        if let Ok(once) = apply_mitigation(&line, &plan) {
            prop_assert_eq!(once.n_bins(), line.n_bins());
            prop_assert!(once.taps().iter().all(|&w| w >= 0.0));
            let twice = apply_mitigation(&once, &plan).unwrap();
            prop_assert_eq!(once.taps(), twice.taps());
        }
    }

    #[test]
    fn defects_preserve_shape(line in line_strategy(), bin in 0usize..120, mag in 0.0f64..50.0) {
        let bin = bin % line.n_bins();
        for d in [Defect::ultra_wide(bin, mag), Defect::zero(bin), Defect::crc_step(bin, mag)] {
            let out = inject_defects(&line, &[d]).unwrap();
            prop_assert_eq!(out.n_bins(), line.n_bins());
            prop_assert!(out.taps().iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn inl_telescopes(widths in prop::collection::vec(0.0f64..30.0, 1..200)) {
        let period: f64 = widths.iter().sum::<f64>().max(1.0);
        let r = compute_nonlinearity(&widths, period).unwrap();
        let last = *r.inl.last().unwrap();
        prop_assert!((last - (widths.iter().sum::<f64>() - period)).abs() < 1e-6 * period);
    }

    #[test]
    fn matcher_is_symmetric_and_single_use(
        ta in prop::collection::vec(0u64..20_000, 0..60),
        tb in prop::collection::vec(0u64..20_000, 0..60),
        window in 0.0f64..800.0,
    ) {
        let tags = |mut ts: Vec<u64>, channel| {
            ts.sort_unstable();
            ts.into_iter()
                .map(|t| TimeTag { channel, timestamp_ps: t, truth: Truth::Dark, pair_id: None, bit: 0 })
                .collect::<Vec<_>>()
        };
        let a = tags(ta, Channel::A);
        let b = tags(tb, Channel::B);
        let ab = match_pairs(&a, &b, window).unwrap();
        let mut ba: Vec<(usize, usize)> =
            match_pairs(&b, &a, window).unwrap().into_iter().map(|(j, i)| (i, j)).collect();
        let mut ab_sorted = ab.clone();
        ab_sorted.sort_unstable();
        ba.sort_unstable();
        // Equal timestamps make exchange ties ambiguous; the matched set of
        // timestamp pairs must agree regardless.
        let times = |v: &[(usize, usize)]| {
            let mut t: Vec<(u64, u64)> =
                v.iter().map(|&(i, j)| (a[i].timestamp_ps, b[j].timestamp_ps)).collect();
            t.sort_unstable();
            t
        };
        prop_assert_eq!(times(&ab_sorted), times(&ba));
        let mut used_a: Vec<usize> = ab.iter().map(|p| p.0).collect();
        let mut used_b: Vec<usize> = ab.iter().map(|p| p.1).collect();
        used_a.sort_unstable();
        used_a.dedup();
        used_b.sort_unstable();
        used_b.dedup();
        prop_assert_eq!(used_a.len(), ab.len());
        prop_assert_eq!(used_b.len(), ab.len());
        for &(i, j) in &ab {
            prop_assert!((a[i].timestamp_ps as f64 - b[j].timestamp_ps as f64).abs() <= window);
        }
    }
}

#[test]
fn family_plans_never_raise_dnl_spread_on_presets() {
    for seed in [1u64, 7, 42] {
        for name in PresetName::ALL {
            let line = build_preset(name, seed).unwrap();
            let before = characterize_exact(&line).unwrap();
            let plan = calibrated_plan(name.family());
            let once = apply_mitigation(&line, &plan).unwrap();
            let after = characterize_exact(&once).unwrap();
            let pp = |r: &tdcqkd::characterize::NonlinearityReport| r.dnl_range.1 - r.dnl_range.0;
            assert!(pp(&after) <= pp(&before) + 1e-9, "{name} seed {seed}");
            assert_eq!(apply_mitigation(&once, &plan).unwrap().taps(), once.taps());
        }
    }
}

#[test]
fn estimated_widths_sum_to_the_period() {
    for name in PresetName::ALL {
        let line = build_preset(name, 7).unwrap();
        let hist = run_code_density(&line, 1_000_000, PhaseMode::Uniform, 5).unwrap();
        let sum: f64 = estimate_bin_widths(&hist).unwrap().iter().sum();
        assert!((sum - line.clock_period()).abs() < 1e-6, "{name}");
    }
}

#[test]
fn retimed_streams_and_tag_files_are_reproducible() {
    let line = build_preset(PresetName::Tdc2Opt, 7).unwrap();
    let cfg = MCConfig {
        duration_s: 0.05,
        pair_rate: 2e5,
        transmission_a: 0.5,
        sigma_spd_a: 60.0,
        sigma_spd_b: 60.0,
        dark_a: 5e3,
        dark_b: 5e3,
        bit_error_prob: 0.1,
        seed: 21,
        ..MCConfig::default()
    };
    let (a1, b1) = generate_events(&cfg).unwrap();
    let (a2, b2) = generate_events(&cfg).unwrap();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    let ra = apply_tdc(&a1, &line, PhaseMode::Uniform, 0.0).unwrap();
    assert_eq!(ra, apply_tdc(&a2, &line, PhaseMode::Uniform, 0.0).unwrap());

    let mut buf = Vec::new();
    write_time_tags(&mut buf, &cfg, &ra).unwrap();
    let back = parse_time_tags(buf.as_slice()).unwrap();
    assert_eq!(back, ra);

    let m = match_coincidences(&ra, &b1, 400.0, cfg.duration_s).unwrap();
    assert!(m.matched_a <= m.tags_a && m.matched_b <= m.tags_b);
    assert_eq!(m.true_coincidences_captured + m.accidental_coincidences, m.matched_a);
}
