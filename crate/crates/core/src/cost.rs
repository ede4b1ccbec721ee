//! Closed-form parameter and MAC accounting.
//!
//! Counts are derived from a [`ModelConfig`] alone, without building tensors, so they
//! can be checked against the registry of a built [`crate::model::Model`].
//!
//! One MAC is one multiply-accumulate. Each conv output element also costs one MAC for
//! its bias add. Normalization, activations, pooling and residual adds are not counted.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mixing::{fraction_to_f64, overlap_width, segment_bounds, Fraction, MixVariant};
use crate::model::{ChannelMode, ModelConfig, SpatialMode, Variant};

pub const CSV_HEADER: &str = "name,weights,biases,norm,macs";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub weights: u64,
    pub biases: u64,
    /// Norm affine parameters (gamma and beta).
    pub norm: u64,
    pub macs: u64,
}

impl CostRow {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            weights: 0,
            biases: 0,
            norm: 0,
            macs: 0,
        }
    }

    pub fn trainable(&self) -> u64 {
        self.weights + self.biases + self.norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub config: ModelConfig,
    /// Input height and width when MACs were counted.
    pub input_hw: Option<(usize, usize)>,
    pub rows: Vec<CostRow>,
    /// Norm running mean/variance entries (not trainable).
    pub running_stats: u64,
    /// Per-block channel-mix parameter saving versus a full `h x h` mix, if defined.
    pub analytic_saving: Option<Fraction>,
}

impl CostReport {
    pub fn totals(&self) -> CostRow {
        let mut t = CostRow::new("total");
        for r in &self.rows {
            t.weights += r.weights;
            t.biases += r.biases;
            t.norm += r.norm;
            t.macs += r.macs;
        }
        t
    }

    pub fn trainable_params(&self) -> u64 {
        self.totals().trainable()
    }

    pub fn macs(&self) -> u64 {
        self.totals().macs
    }

    /// Channel-mix weights summed over blocks.
    pub fn mix_weights(&self) -> u64 {
        self.rows.iter().filter(|r| r.name.ends_with(".mix")).map(|r| r.weights).sum()
    }

    /// Saving of the channel-mix weights actually held versus `b` full `h x h` mixes.
    pub fn measured_mix_saving(&self) -> f64 {
        let c = &self.config;
        let full = (c.b * c.h * c.h) as f64;
        1.0 - self.mix_weights() as f64 / full
    }

    /// CSV with a header, one row per layer and a totals row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.totals())) {
            let _ = writeln!(out, "{},{},{},{},{}", r.name, r.weights, r.biases, r.norm, r.macs);
        }
        out
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.config.describe());
        if let Some((h, w)) = self.input_hw {
            let _ = writeln!(
                out,
                "# input {h}x{w}; MACs = multiply-accumulates incl. bias adds (x2 for separate mul+add FLOPs)"
            );
        }
        let _ = writeln!(out, "{:<22} {:>10} {:>8} {:>8} {:>14}", "layer", "weights", "biases", "norm", "macs");
        for r in self.rows.iter().chain(std::iter::once(&self.totals())) {
            let _ = writeln!(
                out,
                "{:<22} {:>10} {:>8} {:>8} {:>14}",
                r.name, r.weights, r.biases, r.norm, r.macs
            );
        }
        let _ = writeln!(out, "trainable parameters: {}", self.trainable_params());
        let _ = writeln!(out, "running statistics:   {}", self.running_stats);
        if let Some(s) = self.analytic_saving {
            let _ = writeln!(out, "channel-mix saving:   {s} = {:.4} (measured {:.4})", fraction_to_f64(s), self.measured_mix_saving());
        }
        out
    }
}

/// Selector for [`analytic_saving`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Knob {
    Alpha(Fraction),
    Segments(usize),
    None,
}

impl Knob {
    pub fn of(config: &ModelConfig) -> Self {
        match (config.alpha, config.segments) {
            (Some(a), _) => Knob::Alpha(a),
            (None, Some(s)) => Knob::Segments(s),
            (None, None) => Knob::None,
        }
    }
}

/// Fraction of per-block channel-mix parameters removed versus a full `h x h` mix.
///
/// Variant V goes negative once `alpha^2 > 1/2`; that value is returned with a logged warning.
pub fn analytic_saving(variant: MixVariant, knob: Knob) -> Result<Fraction> {
    let one = Fraction::from_integer(1);
    let bad = || Error::Config(format!("variant {variant} does not take {knob:?}"));
    let saving = match (variant, knob) {
        (MixVariant::I | MixVariant::V, Knob::Alpha(a)) => {
            if a <= Fraction::new(1, 2) || a >= one {
                return Err(Error::Config(format!("alpha must lie in (1/2, 1), got {a}")));
            }
            if variant == MixVariant::I {
                one - a * a
            } else {
                one - Fraction::from_integer(2) * a * a
            }
        }
        (MixVariant::II | MixVariant::III | MixVariant::IV | MixVariant::Conv3D, Knob::Segments(s)) => {
            if s < 2 {
                return Err(Error::Config(format!("need at least 2 segments, got {s}")));
            }
            let inv = Fraction::new(1, s as i64);
            match variant {
                MixVariant::IV => one - inv,
                _ => one - inv * inv,
            }
        }
        (MixVariant::Full, Knob::None) => Fraction::from_integer(0),
        _ => return Err(bad()),
    };
    if saving < Fraction::from_integer(0) {
        log::warn!("variant {variant} with {knob:?} holds more channel-mix parameters than a full mix (saving {saving})");
    }
    Ok(saving)
}

/// The ConvMixer with the same width, depth, patch, kernel and head.
pub fn baseline_of(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        classes: config.classes,
        in_channels: config.in_channels,
        p: config.p,
        k: config.k,
        ..ModelConfig::new(Variant::ConvMixer, config.h, config.b)
    }
}

/// `(width, times applied)` of each channel-mix parameter set allocated at `block`.
fn mix_sets(config: &ModelConfig, block: usize) -> Result<Vec<(u64, u64)>> {
    let h = config.h;
    let spec = match config.mixer_spec(block) {
        Some(s) => s,
        None => return Ok(Vec::new()),
    };
    let sets = match spec.variant {
        MixVariant::Full => vec![(h, 1)],
        MixVariant::I => {
            let m = overlap_width(h, spec.alpha.expect("validated"));
            vec![(m, 1)]
        }
        MixVariant::V => {
            let m = overlap_width(h, spec.alpha.expect("validated"));
            vec![(m, 1), (m, 1)]
        }
        MixVariant::II => {
            let s = spec.segments.expect("validated");
            vec![(segment_bounds(h, s)?[block % s].len(), 1)]
        }
        MixVariant::IV => {
            let s = spec.segments.expect("validated");
            segment_bounds(h, s)?.iter().map(|r| (r.len(), 1)).collect()
        }
        MixVariant::III | MixVariant::Conv3D => {
            let s = spec.segments.expect("validated");
            vec![(h / s, s)]
        }
    };
    Ok(sets.into_iter().map(|(d, n)| (d as u64, n as u64)).collect())
}

fn build_report(config: &ModelConfig, input_hw: Option<(usize, usize)>) -> Result<CostReport> {
    config.validate()?;
    let positions = match input_hw {
        Some((ih, iw)) => {
            if ih % config.p != 0 || iw % config.p != 0 || ih == 0 || iw == 0 {
                return Err(Error::Config(format!(
                    "input {ih}x{iw} is not divisible by patch size {}",
                    config.p
                )));
            }
            ((ih / config.p) * (iw / config.p)) as u64
        }
        None => 0,
    };
    let h = config.h as u64;
    let k = config.k as u64;
    let mut rows = Vec::new();
    let mut norms = 0u64;
    let mut norm_row = |rows: &mut Vec<CostRow>, name: String| {
        norms += 1;
        rows.push(CostRow {
            norm: 2 * h,
            ..CostRow::new(name)
        });
    };
    // A conv producing `out` channels with `weights_per_out` MACs per output element.
    let conv_row = |name: String, weights: u64, out: u64, weights_per_out: u64, applications: u64| CostRow {
        name,
        weights,
        biases: out,
        norm: 0,
        macs: positions * out * (weights_per_out + 1) * applications,
    };

    let c = config.in_channels as u64;
    let p = config.p as u64;
    rows.push(conv_row("patch".into(), h * c * p * p, h, c * p * p, 1));
    norm_row(&mut rows, "patch.norm".into());
    for l in 0..config.b {
        match config.spatial {
            SpatialMode::Separable1d => {
                rows.push(conv_row(format!("blocks.{l}.dw_w"), h * k, h, k, 1));
                norm_row(&mut rows, format!("blocks.{l}.dw_w.norm"));
                rows.push(conv_row(format!("blocks.{l}.dw_h"), h * k, h, k, 1));
                norm_row(&mut rows, format!("blocks.{l}.dw_h.norm"));
            }
            SpatialMode::Full2d => {
                rows.push(conv_row(format!("blocks.{l}.dw"), h * k * k, h, k * k, 1));
                norm_row(&mut rows, format!("blocks.{l}.dw.norm"));
            }
            SpatialMode::None => {}
        }
        if config.channel != ChannelMode::None {
            let mut row = CostRow::new(format!("blocks.{l}.mix"));
            for (d, times) in mix_sets(config, l)? {
                row.weights += d * d;
                row.biases += d;
                row.macs += positions * d * (d + 1) * times;
            }
            rows.push(row);
            norm_row(&mut rows, format!("blocks.{l}.mix.norm"));
        }
    }
    let classes = config.classes as u64;
    rows.push(CostRow {
        name: "head".into(),
        weights: classes * h,
        biases: classes,
        norm: 0,
        macs: if input_hw.is_some() { classes * (h + 1) } else { 0 },
    });

    let analytic_saving = match (config.variant, config.channel) {
        (_, ChannelMode::None) => None,
        (Variant::Split(v), ChannelMode::Split | ChannelMode::Fixed) => Some(analytic_saving(v, Knob::of(config))?),
        _ => Some(Fraction::from_integer(0)),
    };
    Ok(CostReport {
        config: *config,
        input_hw,
        rows,
        running_stats: norms * 2 * h,
        analytic_saving,
    })
}

/// Exact parameter counts per layer (MAC column zero).
pub fn count_params(config: &ModelConfig) -> Result<CostReport> {
    build_report(config, None)
}

/// Parameter and MAC counts for an `input_hw` image.
pub fn count_flops(config: &ModelConfig, input_hw: (usize, usize)) -> Result<CostReport> {
    build_report(config, Some(input_hw))
}

/// A model's costs next to its ConvMixer baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub model: CostReport,
    pub baseline: CostReport,
}

impl Comparison {
    pub fn new(config: &ModelConfig, input_hw: (usize, usize)) -> Result<Self> {
        Ok(Self {
            model: count_flops(config, input_hw)?,
            baseline: count_flops(&baseline_of(config), input_hw)?,
        })
    }

    pub fn param_ratio(&self) -> f64 {
        self.model.trainable_params() as f64 / self.baseline.trainable_params() as f64
    }

    pub fn mac_ratio(&self) -> f64 {
        self.model.macs() as f64 / self.baseline.macs() as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} params, {} MACs | {}: {} params, {} MACs | ratio params {:.4}, MACs {:.4}",
            self.model.config.name(),
            self.model.trainable_params(),
            self.model.macs(),
            self.baseline.config.name(),
            self.baseline.trainable_params(),
            self.baseline.macs(),
            self.param_ratio(),
            self.mac_ratio()
        )
    }
}

/// Values for a sweep over the variant's knob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SweepGrid {
    Alpha(Vec<Fraction>),
    Segments(Vec<usize>),
}

impl SweepGrid {
    /// `alpha = i / (2i - 1)` for `i = 2..=6`.
    pub fn default_alpha() -> Self {
        SweepGrid::Alpha((2..=6).map(|i| Fraction::new(i, 2 * i - 1)).collect())
    }

    /// `s = 2..=8`.
    pub fn default_segments() -> Self {
        SweepGrid::Segments((2..=8).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub knob: String,
    pub params: u64,
    pub macs: u64,
    pub saving: Fraction,
    pub measured_saving: f64,
}

pub const SWEEP_CSV_HEADER: &str = "knob,params,macs,saving,measured_saving";

/// Cost of `base` at each grid value.
pub fn sweep(base: &ModelConfig, grid: &SweepGrid, input_hw: (usize, usize)) -> Result<Vec<SweepRow>> {
    let variant = match base.variant {
        Variant::Split(v) => v,
        Variant::ConvMixer => return Err(Error::Config("ConvMixer has no knob to sweep".into())),
    };
    let configs: Vec<(String, ModelConfig)> = match grid {
        SweepGrid::Alpha(values) if variant.uses_alpha() => values
            .iter()
            .map(|&a| (format!("alpha={a}"), ModelConfig { alpha: Some(a), ..*base }))
            .collect(),
        SweepGrid::Segments(values) if variant.uses_segments() => values
            .iter()
            .map(|&s| (format!("s={s}"), ModelConfig { segments: Some(s), ..*base }))
            .collect(),
        _ => return Err(Error::Config(format!("grid {grid:?} does not apply to variant {variant}"))),
    };
    configs
        .into_iter()
        .map(|(knob, config)| {
            let report = count_flops(&config, input_hw)?;
            Ok(SweepRow {
                knob,
                params: report.trainable_params(),
                macs: report.macs(),
                saving: analytic_saving(variant, Knob::of(&config))?,
                measured_saving: report.measured_mix_saving(),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.6}", r.knob, r.params, r.macs, r.saving, r.measured_saving);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(name: &str) -> ModelConfig {
        ModelConfig::parse_name(name).unwrap()
    }

    #[test]
    fn headline_counts() {
        let r = count_params(&cfg("SplitMixer-I-256/8")).unwrap();
        assert_eq!(r.trainable_params(), 275_834);
        let mix = r.rows.iter().find(|r| r.name == "blocks.0.mix").unwrap();
        assert_eq!(mix.weights, 28_900);
        let spatial: u64 = r.rows.iter().filter(|r| r.name.starts_with("blocks.0.dw_")).map(|r| r.weights).sum();
        assert_eq!(spatial, 2_560);
        assert_eq!(count_params(&cfg("ConvMixer-256/8")).unwrap().trainable_params(), 594_186);
    }

    #[test]
    fn headline_macs() {
        // 256 positions; per block dw_w + dw_h + mix (bias adds included); patch; head
        let per_block = 256 * (2 * (5 * 256 + 256) + 170 * 171);
        let expected = 256 * 256 * 13 + 8 * per_block + 10 * 257;
        assert_eq!(count_flops(&cfg("SplitMixer-I-256/8"), (32, 32)).unwrap().macs(), expected);
    }

    #[test]
    fn totals_are_row_sums_and_csv_has_totals() {
        let r = count_flops(&cfg("SplitMixer-IV-64/2"), (32, 32)).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), r.rows.len() + 2);
        assert!(lines.last().unwrap().starts_with("total,"));
    }

    #[test]
    fn saving_formulas() {
        let a = |n, d| Knob::Alpha(Fraction::new(n, d));
        assert_eq!(analytic_saving(MixVariant::I, a(2, 3)).unwrap(), Fraction::new(5, 9));
        assert_eq!(analytic_saving(MixVariant::II, Knob::Segments(2)).unwrap(), Fraction::new(3, 4));
        assert_eq!(analytic_saving(MixVariant::IV, Knob::Segments(3)).unwrap(), Fraction::new(2, 3));
        assert_eq!(analytic_saving(MixVariant::V, a(2, 3)).unwrap(), Fraction::new(1, 9));
        assert!(analytic_saving(MixVariant::V, a(3, 4)).unwrap() < Fraction::from_integer(0));
        assert!(analytic_saving(MixVariant::II, a(2, 3)).is_err());
        assert!(analytic_saving(MixVariant::II, Knob::Segments(1)).is_err());
    }

    #[test]
    fn variant_three_macs_like_four_params_like_two() {
        let mut iii = cfg("SplitMixer-III-256/8");
        iii.segments = Some(4);
        let mut iv = cfg("SplitMixer-IV-256/8");
        iv.segments = Some(4);
        let mut ii = cfg("SplitMixer-II-256/8");
        ii.segments = Some(4);
        let f = |c: &ModelConfig| count_flops(c, (32, 32)).unwrap();
        assert_eq!(f(&iii).macs(), f(&iv).macs());
        assert_eq!(f(&iii).trainable_params(), f(&ii).trainable_params());
    }

    #[test]
    fn spatial_ratios() {
        let sep = count_params(&cfg("SplitMixer-I-256/8")).unwrap();
        let full = count_params(&cfg("ConvMixer-256/8")).unwrap();
        let w = |r: &CostReport, name: &str| r.rows.iter().find(|x| x.name == name).unwrap().weights;
        let separable = w(&sep, "blocks.0.dw_w") + w(&sep, "blocks.0.dw_h");
        assert_eq!(Fraction::new(w(&full, "blocks.0.dw") as i64, separable as i64), Fraction::new(5, 2));
        assert_eq!(Fraction::new(w(&full, "blocks.0.dw") as i64, w(&full, "blocks.0.mix") as i64), Fraction::new(25, 256));
    }

    #[test]
    fn sweeps_are_monotone() {
        let rows = sweep(&cfg("SplitMixer-I-256/8"), &SweepGrid::default_alpha(), (32, 32)).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.windows(2).all(|w| w[1].saving > w[0].saving && w[1].params < w[0].params));
        let rows = sweep(&cfg("SplitMixer-II-256/8"), &SweepGrid::default_segments(), (32, 32)).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.windows(2).all(|w| w[1].saving > w[0].saving));
        assert!(sweep(&cfg("SplitMixer-I-256/8"), &SweepGrid::default_segments(), (32, 32)).is_err());
    }

    #[test]
    fn bad_input_size() {
        assert!(count_flops(&cfg("SplitMixer-I-256/8"), (31, 32)).is_err());
    }
}
