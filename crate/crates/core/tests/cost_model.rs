use proptest::prelude::*;

use splitmixer::cost::{analytic_saving, count_flops, count_params, sweep, Knob, SweepGrid};
use splitmixer::mixing::{Fraction, MixVariant};
use splitmixer::model::{Model, ModelConfig, Variant};

/// Segment widths by the floor rule: `s - 1` segments of `h / s`, the rest in the last.
fn widths(h: u64, s: u64) -> Vec<u64> {
    let d = h / s;
    let mut w = vec![d; s as usize - 1];
    w.push(h - d * (s - 1));
    w
}

/// Channel-mix parameters (weights and biases) held by one block, enumerated by hand.
fn mix_params(variant: MixVariant, h: u64, alpha: Option<Fraction>, s: Option<u64>, block: u64) -> u64 {
    let affine = |w: u64| w * w + w;
    let overlap = || {
        let a = alpha.unwrap();
        h * *a.numer() as u64 / *a.denom() as u64
    };
    match variant {
        MixVariant::I => affine(overlap()),
        MixVariant::V => 2 * affine(overlap()),
        MixVariant::II => {
            let s = s.unwrap();
            affine(widths(h, s)[(block % s) as usize])
        }
        MixVariant::III | MixVariant::Conv3D => affine(h / s.unwrap()),
        MixVariant::IV => widths(h, s.unwrap()).into_iter().map(affine).sum(),
        MixVariant::Full => affine(h),
    }
}

/// Everything outside the channel mixer for the default separable layout.
fn non_mix_params(c: &ModelConfig) -> u64 {
    let (h, k, p, cin, classes) = (c.h as u64, c.k as u64, c.p as u64, c.in_channels as u64, c.classes as u64);
    let norm = 2 * h;
    let patch = cin * p * p * h + h + norm;
    let block = 2 * (h * k + h + norm) + norm;
    patch + c.b as u64 * block + classes * h + classes
}

fn oracle_params(c: &ModelConfig) -> u64 {
    let v = match c.variant {
        Variant::Split(v) => v,
        Variant::ConvMixer => unreachable!(),
    };
    let mix: u64 = (0..c.b as u64)
        .map(|l| mix_params(v, c.h as u64, c.alpha, c.segments.map(|s| s as u64), l))
        .sum();
    non_mix_params(c) + mix
}

fn alphas() -> Vec<Fraction> {
    (2..=6).map(|i| Fraction::new(i, 2 * i - 1)).collect()
}

#[test]
fn built_counted_and_enumerated_agree_over_the_knob_grid() {
    let mut checked = 0;
    for v in MixVariant::ALL.into_iter().filter(|v| *v != MixVariant::Full) {
        let base = ModelConfig::new(Variant::Split(v), 256, 8);
        let configs: Vec<ModelConfig> = if v.uses_alpha() {
            alphas().into_iter().map(|a| ModelConfig { alpha: Some(a), ..base }).collect()
        } else {
            (2..=8)
                .filter(|s| !matches!(v, MixVariant::III | MixVariant::Conv3D) || 256 % s == 0)
                .map(|s| ModelConfig { segments: Some(s), ..base })
                .collect()
        };
        for c in configs {
            let built = Model::<f32>::build(c, 1).unwrap().trainable_params() as u64;
            let counted = count_params(&c).unwrap().trainable_params();
            assert_eq!(built, counted, "{}", c.describe());
            assert_eq!(oracle_params(&c), counted, "{}", c.describe());
            checked += 1;
        }
    }
    assert_eq!(checked, 5 + 7 + 3 + 7 + 5 + 3);
}

#[test]
fn macs_by_hand_for_the_headline_models() {
    // 16 x 16 tokens. Patch: 12 MACs + bias per output; head: 256 + 1 per class.
    let positions = 256u64;
    let patch = positions * 256 * (12 + 1);
    let head = 10 * 257;
    let spatial = 2 * positions * 256 * (5 + 1);
    let split_mix = positions * 170 * 171;
    let conv_mix = positions * 256 * 257;
    let conv_spatial = positions * 256 * 26;
    let split = count_flops(&ModelConfig::parse_name("SplitMixer-I-256/8").unwrap(), (32, 32)).unwrap();
    let conv = count_flops(&ModelConfig::parse_name("ConvMixer-256/8").unwrap(), (32, 32)).unwrap();
    assert_eq!(split.macs(), patch + 8 * (spatial + split_mix) + head);
    assert_eq!(conv.macs(), patch + 8 * (conv_spatial + conv_mix) + head);
}

#[test]
fn alpha_sweep_row_matches_the_parameter_delta() {
    let base = ModelConfig::parse_name("SplitMixer-I-256/8").unwrap();
    let rows = sweep(&base, &SweepGrid::default_alpha(), (32, 32)).unwrap();
    assert_eq!(rows.len(), 5);
    let full_mix = 8 * 256 * 256;
    let two_thirds = &rows[0];
    assert_eq!(two_thirds.knob, "alpha=2/3");
    let kept = count_params(&base).unwrap().mix_weights();
    assert_eq!(kept, 8 * 170 * 170);
    assert!((two_thirds.measured_saving - (1.0 - kept as f64 / full_mix as f64)).abs() < 1e-12);
    assert!((two_thirds.measured_saving - 5.0 / 9.0).abs() < 0.01);
}

#[test]
fn variant_three_costs_like_four_in_macs() {
    let c3 = ModelConfig { segments: Some(4), ..ModelConfig::parse_name("SplitMixer-III-256/8").unwrap() };
    let c4 = ModelConfig { segments: Some(4), ..ModelConfig::parse_name("SplitMixer-IV-256/8").unwrap() };
    let c2 = ModelConfig { segments: Some(4), ..ModelConfig::parse_name("SplitMixer-II-256/8").unwrap() };
    assert_eq!(count_flops(&c3, (32, 32)).unwrap().macs(), count_flops(&c4, (32, 32)).unwrap().macs());
    assert_eq!(count_params(&c3).unwrap().trainable_params(), count_params(&c2).unwrap().trainable_params());
}

fn split_config() -> impl Strategy<Value = ModelConfig> {
    let variant = prop::sample::select(MixVariant::ALL.into_iter().filter(|v| *v != MixVariant::Full).collect::<Vec<_>>());
    (variant, 8usize..48, 1usize..4, 2usize..6, 0usize..5).prop_filter_map("valid knob", |(v, h, b, s, ai)| {
        let mut c = ModelConfig::new(Variant::Split(v), h, b);
        c.k = 3;
        if v.uses_alpha() {
            c.alpha = Some(alphas()[ai]);
        } else {
            c.segments = Some(s);
        }
        c.validate().ok().map(|_| c)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_valid_config_counts_consistently(c in split_config()) {
        let built = Model::<f32>::build(c, 0).unwrap().trainable_params() as u64;
        let report = count_params(&c).unwrap();
        prop_assert_eq!(built, report.trainable_params());
        prop_assert_eq!(oracle_params(&c), built);
        let totals = report.totals();
        prop_assert_eq!(totals.weights, report.rows.iter().map(|r| r.weights).sum::<u64>());
    }

    #[test]
    fn saving_matches_closed_forms(i in 2i64..40, s in 2usize..40) {
        let a = Fraction::new(i, 2 * i - 1);
        let one = Fraction::from_integer(1);
        let inv = Fraction::new(1, s as i64);
        prop_assert_eq!(analytic_saving(MixVariant::I, Knob::Alpha(a)).unwrap(), one - a * a);
        prop_assert_eq!(analytic_saving(MixVariant::V, Knob::Alpha(a)).unwrap(), one - a * a * 2);
        prop_assert_eq!(analytic_saving(MixVariant::II, Knob::Segments(s)).unwrap(), one - inv * inv);
        prop_assert_eq!(analytic_saving(MixVariant::IV, Knob::Segments(s)).unwrap(), one - inv);
        let sv = analytic_saving(MixVariant::II, Knob::Segments(s)).unwrap();
        prop_assert!(sv >= Fraction::from_integer(0) && sv < one);
    }
}
