//! Channel mixing over segments of the hidden dimension.
//!
//! Variants:
//!
//! | variant | segments                      | params shared | updated per block      |
//! |---------|-------------------------------|---------------|------------------------|
//! | I       | two overlapping, width `m`    | no            | one (alternating)      |
//! | II      | `s` disjoint                  | no            | one (`block mod s`)    |
//! | III     | `s` disjoint, equal width     | yes           | all                    |
//! | IV      | `s` disjoint                  | no            | all                    |
//! | V       | two overlapping, width `m`    | no            | both, left then right  |
//! | 3D      | as III, via strided 3D conv   | yes           | all (interleaved out)  |
//! | Full    | whole channel range           | -             | all                    |
//!
//! with `m = floor(alpha * h)`. For I, even block indices update `[0, m)` and
//! odd ones `[h - m, h)`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use num_rational::Ratio;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, ConvParams};
use crate::tensor::Element;

/// Exact rational used for split ratios and saving fractions.
pub type Fraction = Ratio<i64>;

/// Parses `"2/3"`, `"0.6"` or `"1"` into an exact fraction.
pub fn parse_fraction(text: &str) -> Result<Fraction> {
    let t = text.trim();
    let bad = || Error::Parse(format!("cannot read '{text}' as a fraction (use a/b or a decimal)"));
    if let Some((a, b)) = t.split_once('/') {
        let num: i64 = a.trim().parse().map_err(|_| bad())?;
        let den: i64 = b.trim().parse().map_err(|_| bad())?;
        if den == 0 {
            return Err(bad());
        }
        return Ok(Fraction::new(num, den));
    }
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    if frac.len() > 12 || !frac.chars().all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let den = 10i64.pow(frac.len() as u32);
    let int_part: i64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
    let frac_part: i64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    Ok(Fraction::new(int_part * den + frac_part, den))
}

pub fn fraction_to_f64(f: Fraction) -> f64 {
    *f.numer() as f64 / *f.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MixVariant {
    I,
    II,
    III,
    IV,
    V,
    Conv3D,
    Full,
}

impl MixVariant {
    pub const ALL: [MixVariant; 7] = [
        MixVariant::I,
        MixVariant::II,
        MixVariant::III,
        MixVariant::IV,
        MixVariant::V,
        MixVariant::Conv3D,
        MixVariant::Full,
    ];

    pub fn uses_alpha(self) -> bool {
        matches!(self, MixVariant::I | MixVariant::V)
    }

    pub fn uses_segments(self) -> bool {
        matches!(self, MixVariant::II | MixVariant::III | MixVariant::IV | MixVariant::Conv3D)
    }

    pub fn token(self) -> &'static str {
        match self {
            MixVariant::I => "I",
            MixVariant::II => "II",
            MixVariant::III => "III",
            MixVariant::IV => "IV",
            MixVariant::V => "V",
            MixVariant::Conv3D => "3D",
            MixVariant::Full => "Full",
        }
    }
}

impl fmt::Display for MixVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for MixVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => MixVariant::I,
            "II" | "2" => MixVariant::II,
            "III" | "3" => MixVariant::III,
            "IV" | "4" => MixVariant::IV,
            "V" | "5" => MixVariant::V,
            "3D" | "CONV3D" => MixVariant::Conv3D,
            "FULL" => MixVariant::Full,
            other => {
                return Err(Error::Parse(format!(
                    "unknown mixer variant '{other}' (expected I, II, III, IV, V, 3D or Full)"
                )))
            }
        })
    }
}

/// Channel ranges of `s` disjoint segments; the last one absorbs the remainder.
pub fn segment_bounds(h: usize, s: usize) -> Result<Vec<Range<usize>>> {
    if s < 2 {
        return Err(Error::Config(format!("need at least 2 segments, got {s}")));
    }
    if s > h {
        return Err(Error::Config(format!("{s} segments exceed {h} channels")));
    }
    let width = h / s;
    Ok((0..s)
        .map(|i| {
            let end = if i + 1 == s { h } else { (i + 1) * width };
            i * width..end
        })
        .collect())
}

/// `m = floor(alpha * h)`.
pub fn overlap_width(h: usize, alpha: Fraction) -> usize {
    let num = *alpha.numer() as i128 * h as i128;
    (num / *alpha.denom() as i128).max(0) as usize
}

/// One block's channel mixer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixerSpec {
    pub variant: MixVariant,
    pub h: usize,
    pub alpha: Option<Fraction>,
    pub segments: Option<usize>,
    pub block_index: usize,
}

impl MixerSpec {
    pub fn validate(&self) -> Result<()> {
        let h = self.h;
        if h == 0 {
            return Err(Error::Config("hidden dimension must be >= 1".into()));
        }
        if self.variant.uses_alpha() {
            let alpha = self
                .alpha
                .ok_or_else(|| Error::Config(format!("variant {} needs a split ratio alpha", self.variant)))?;
            if alpha <= Fraction::new(1, 2) || alpha >= Fraction::from_integer(1) {
                return Err(Error::Config(format!("alpha must lie in (1/2, 1), got {alpha}")));
            }
            let m = overlap_width(h, alpha);
            if 2 * m <= h {
                return Err(Error::Config(format!(
                    "floor(alpha*h) = {m} does not exceed h/2 = {}; segments would not overlap",
                    h as f64 / 2.0
                )));
            }
        } else if self.alpha.is_some() {
            return Err(Error::Config(format!("variant {} takes no alpha", self.variant)));
        }
        if self.variant.uses_segments() {
            let s = self
                .segments
                .ok_or_else(|| Error::Config(format!("variant {} needs a segment count", self.variant)))?;
            segment_bounds(h, s)?;
            if matches!(self.variant, MixVariant::III | MixVariant::Conv3D) && !h.is_multiple_of(s) {
                return Err(Error::Config(format!(
                    "variant {} needs h divisible by s (h={h}, s={s})",
                    self.variant
                )));
            }
        } else if self.segments.is_some() {
            return Err(Error::Config(format!("variant {} takes no segment count", self.variant)));
        }
        Ok(())
    }

    /// Channel ranges, their parameter-set ids and which ranges this block updates.
    pub fn plan(&self) -> Result<SegmentPlan> {
        self.validate()?;
        let h = self.h;
        let plan = match self.variant {
            MixVariant::I | MixVariant::V => {
                let m = overlap_width(h, self.alpha.expect("validated"));
                let active = if self.variant == MixVariant::V {
                    vec![0, 1]
                } else {
                    vec![self.block_index % 2]
                };
                SegmentPlan {
                    ranges: vec![0..m, h - m..h],
                    param_set: vec![0, 1],
                    active,
                }
            }
            MixVariant::II | MixVariant::IV => {
                let s = self.segments.expect("validated");
                let ranges = segment_bounds(h, s)?;
                let active = if self.variant == MixVariant::II {
                    vec![self.block_index % s]
                } else {
                    (0..s).collect()
                };
                SegmentPlan {
                    param_set: (0..s).collect(),
                    ranges,
                    active,
                }
            }
            MixVariant::III | MixVariant::Conv3D => {
                let s = self.segments.expect("validated");
                SegmentPlan {
                    ranges: segment_bounds(h, s)?,
                    param_set: vec![0; s],
                    active: (0..s).collect(),
                }
            }
            MixVariant::Full => SegmentPlan {
                ranges: vec![0..h],
                param_set: vec![0],
                active: vec![0],
            },
        };
        Ok(plan)
    }
}

/// Segment layout of a mixer at a given block index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub ranges: Vec<Range<usize>>,
    /// Parameter set used by each range (equal ids mean shared weights).
    pub param_set: Vec<usize>,
    /// Ranges updated at this block, in application order.
    pub active: Vec<usize>,
}

impl SegmentPlan {
    pub fn set_count(&self) -> usize {
        self.param_set.iter().max().map_or(0, |m| m + 1)
    }

    /// Width of the channel range served by parameter set `set`.
    pub fn set_width(&self, set: usize) -> Option<usize> {
        self.param_set
            .iter()
            .position(|&p| p == set)
            .map(|i| self.ranges[i].len())
    }

    /// Parameter sets this block actually reads.
    pub fn active_sets(&self) -> Vec<usize> {
        let mut sets: Vec<usize> = self.active.iter().map(|&r| self.param_set[r]).collect();
        sets.sort_unstable();
        sets.dedup();
        sets
    }
}

/// Which parameter sets to allocate when registering a mixer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    /// Only sets this block reads (what a built model holds).
    ActiveOnly,
    /// Every set of the plan.
    All,
}

/// A channel mixer bound to parameters in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMixer {
    pub spec: MixerSpec,
    pub plan: SegmentPlan,
    pub sets: Vec<Option<ConvParams>>,
}

impl ChannelMixer {
    pub fn register<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: MixerSpec,
        allocation: Allocation,
        seed: u64,
    ) -> Result<Self> {
        let plan = spec.plan()?;
        let wanted = match allocation {
            Allocation::ActiveOnly => plan.active_sets(),
            Allocation::All => (0..plan.set_count()).collect(),
        };
        let mut sets = vec![None; plan.set_count()];
        for set in wanted {
            let d = plan.set_width(set).expect("set has a range");
            let set_seed = seed.wrapping_add(set as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            sets[set] = Some(ConvParams::register(store, &format!("{prefix}.{set}"), [d, d, 1, 1], d, set_seed)?);
        }
        Ok(Self { spec, plan, sets })
    }

    fn set(&self, set: usize) -> Result<ConvParams> {
        self.sets
            .get(set)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Config(format!("mixer parameter set {set} was not allocated for block {}", self.spec.block_index)))
    }

    /// Trainable scalars held by this mixer.
    pub fn param_count<T: Element>(&self, store: &ParamStore<T>) -> usize {
        self.sets
            .iter()
            .flatten()
            .map(|p| store.value(p.weight).len() + store.value(p.bias).len())
            .sum()
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.c != self.spec.h {
            return Err(crate::error::Error::Shape(format!(
                "mixer built for {} channels got {}",
                self.spec.h, xs.c
            )));
        }
        if self.spec.variant == MixVariant::Conv3D {
            let p = self.set(0)?;
            let (w, b) = p.vars(tape, store);
            return nn::strided_channel_conv(tape, x, w, b);
        }
        let mut cur = x;
        for &r in &self.plan.active {
            let p = self.set(self.plan.param_set[r])?;
            let (w, b) = p.vars(tape, store);
            cur = nn::pointwise_slice(tape, cur, w, b, self.plan.ranges[r].clone())?;
        }
        Ok(cur)
    }
}

/// Permutation relating segment-major and kernel-major channel order.
///
/// With `d = h / s`, returns `perm` such that `perm[j*s + i] = i*d + j`: feeding a
/// segment-major tensor through [`nn::permute_channels`] with it yields the
/// interleaved order a channel-strided 3D convolution produces.
pub fn interleave_permutation(h: usize, s: usize) -> Result<Vec<usize>> {
    if s == 0 || !h.is_multiple_of(s) {
        return Err(Error::Config(format!("h={h} not divisible by s={s}")));
    }
    let d = h / s;
    let mut perm = vec![0; h];
    for i in 0..s {
        for j in 0..d {
            perm[j * s + i] = i * d + j;
        }
    }
    Ok(perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, Tensor4};

    fn spec(variant: MixVariant, h: usize, alpha: Option<&str>, segments: Option<usize>, block: usize) -> MixerSpec {
        MixerSpec {
            variant,
            h,
            alpha: alpha.map(|a| parse_fraction(a).unwrap()),
            segments,
            block_index: block,
        }
    }

    fn set_identity(store: &mut ParamStore<f64>, mixer: &ChannelMixer) {
        for p in mixer.sets.iter().flatten() {
            let w = store.value_mut(p.weight);
            let d = w.shape().n;
            w.data_mut().fill(0.0);
            for i in 0..d {
                w.data_mut()[i * d + i] = 1.0;
            }
        }
    }

    fn random_input(h: usize, seed: u64) -> Tensor4<f64> {
        Tensor4::alloc_dims([2, h, 3, 3], Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    fn run(store: &ParamStore<f64>, mixer: &ChannelMixer, x: &Tensor4<f64>) -> Tensor4<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let y = mixer.forward(&mut tape, store, v).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn segment_bounds_examples() {
        assert_eq!(segment_bounds(256, 3).unwrap(), vec![0..85, 85..170, 170..256]);
        assert_eq!(segment_bounds(256, 2).unwrap(), vec![0..128, 128..256]);
        assert_eq!(segment_bounds(7, 3).unwrap(), vec![0..2, 2..4, 4..7]);
        assert!(matches!(segment_bounds(3, 4), Err(Error::Config(_))));
        assert!(segment_bounds(8, 1).is_err());
    }

    #[test]
    fn fraction_parsing() {
        assert_eq!(parse_fraction("2/3").unwrap(), Fraction::new(2, 3));
        assert_eq!(parse_fraction("0.6").unwrap(), Fraction::new(3, 5));
        assert!(parse_fraction("x/3").is_err());
        assert!(parse_fraction("1/0").is_err());
    }

    #[test]
    fn variant_one_ranges_at_h256() {
        let s0 = spec(MixVariant::I, 256, Some("2/3"), None, 0).plan().unwrap();
        assert_eq!(s0.ranges, vec![0..170, 86..256]);
        assert_eq!(s0.active, vec![0]);
        let s1 = spec(MixVariant::I, 256, Some("2/3"), None, 1).plan().unwrap();
        assert_eq!(s1.active, vec![1]);
    }

    #[test]
    fn alpha_must_force_overlap() {
        assert!(spec(MixVariant::I, 8, Some("1/2"), None, 0).validate().is_err());
        assert!(spec(MixVariant::V, 8, Some("0.4"), None, 0).validate().is_err());
        // floor(0.55 * 8) = 4, not > 4
        assert!(spec(MixVariant::I, 8, Some("0.55"), None, 0).validate().is_err());
        assert!(spec(MixVariant::III, 10, None, Some(3), 0).validate().is_err());
        assert!(spec(MixVariant::II, 8, None, Some(1), 0).validate().is_err());
    }

    #[test]
    fn identity_weights_give_identity_for_every_variant() {
        let cases = [
            spec(MixVariant::I, 4, Some("3/4"), None, 0),
            spec(MixVariant::I, 4, Some("3/4"), None, 1),
            spec(MixVariant::II, 9, None, Some(3), 4),
            spec(MixVariant::III, 8, None, Some(2), 0),
            spec(MixVariant::IV, 10, None, Some(3), 0),
            spec(MixVariant::V, 4, Some("3/4"), None, 0),
            spec(MixVariant::Full, 5, None, None, 0),
        ];
        for sp in cases {
            let mut store = ParamStore::new();
            let mixer = ChannelMixer::register(&mut store, "mix", sp, Allocation::All, 3).unwrap();
            set_identity(&mut store, &mixer);
            let x = random_input(sp.h, 11);
            assert_eq!(run(&store, &mixer, &x), x, "{sp:?}");
        }
    }

    #[test]
    fn variant_two_block_four_of_three_segments_uses_middle() {
        let plan = spec(MixVariant::II, 256, None, Some(3), 4).plan().unwrap();
        assert_eq!(plan.active, vec![1]);
        assert_eq!(plan.ranges[1], 85..170);
    }

    #[test]
    fn inactive_segment_parameters_are_never_read() {
        let sp = spec(MixVariant::I, 6, Some("2/3"), None, 0);
        let mut full = ParamStore::new();
        let both = ChannelMixer::register(&mut full, "mix", sp, Allocation::All, 5).unwrap();
        let right = both.sets[1].unwrap();
        full.value_mut(right.weight).data_mut().fill(0.0);
        let mut lean = ParamStore::new();
        let only_left = ChannelMixer::register(&mut lean, "mix", sp, Allocation::ActiveOnly, 5).unwrap();
        assert!(only_left.sets[1].is_none());
        let x = random_input(6, 2);
        assert_eq!(run(&full, &both, &x), run(&lean, &only_left, &x));
    }

    #[test]
    fn pass_through_is_exact_for_one_segment_variants() {
        for sp in [
            spec(MixVariant::I, 9, Some("2/3"), None, 0),
            spec(MixVariant::I, 9, Some("2/3"), None, 1),
            spec(MixVariant::II, 9, None, Some(3), 2),
        ] {
            let mut store = ParamStore::new();
            let mixer = ChannelMixer::register(&mut store, "mix", sp, Allocation::ActiveOnly, 8).unwrap();
            let x = random_input(9, 21);
            let y = run(&store, &mixer, &x);
            let active = &mixer.plan.ranges[mixer.plan.active[0]];
            for n in 0..2 {
                for c in (0..9).filter(|c| !active.contains(c)) {
                    assert_eq!(y.plane(n, c), x.plane(n, c));
                }
            }
        }
    }

    #[test]
    fn coverage_over_a_cycle() {
        let h = 12;
        for s in 2..=4 {
            for start in 0..5 {
                let mut covered = vec![false; h];
                for b in start..start + s {
                    let plan = spec(MixVariant::II, h, None, Some(s), b).plan().unwrap();
                    for c in plan.ranges[plan.active[0]].clone() {
                        covered[c] = true;
                    }
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
        for start in 0..4 {
            let mut hits = vec![0; h];
            for b in start..start + 2 {
                let plan = spec(MixVariant::I, h, Some("2/3"), None, b).plan().unwrap();
                for c in plan.ranges[plan.active[0]].clone() {
                    hits[c] += 1;
                }
            }
            assert!(hits.iter().all(|&c| c >= 1));
            assert_eq!(hits[h / 2], 2);
        }
    }

    #[test]
    fn variant_three_is_equivariant_to_segment_swaps() {
        let sp = spec(MixVariant::III, 8, None, Some(2), 0);
        let mut store = ParamStore::new();
        let mixer = ChannelMixer::register(&mut store, "mix", sp, Allocation::All, 13).unwrap();
        let x = random_input(8, 4);
        let swap: Vec<usize> = (4..8).chain(0..4).collect();
        let swapped = crate::nn::apply_permutation(&x, &swap);
        let a = crate::nn::apply_permutation(&run(&store, &mixer, &x), &swap);
        let b = run(&store, &mixer, &swapped);
        assert_eq!(a, b);
    }

    #[test]
    fn variant_four_parameter_count_at_h256() {
        let sp = spec(MixVariant::IV, 256, None, Some(3), 0);
        let mut store = ParamStore::<f32>::new();
        let mixer = ChannelMixer::register(&mut store, "mix", sp, Allocation::ActiveOnly, 1).unwrap();
        assert_eq!(mixer.param_count(&store), 22_102);
    }

    #[test]
    fn variant_four_segment_isolation() {
        let sp = spec(MixVariant::IV, 9, None, Some(3), 0);
        let mut store = ParamStore::new();
        let mixer = ChannelMixer::register(&mut store, "mix", sp, Allocation::All, 17).unwrap();
        let last = mixer.sets[2].unwrap();
        store.value_mut(last.weight).data_mut().fill(0.0);
        store.value_mut(last.bias).data_mut().fill(0.0);
        let x = random_input(9, 6);
        let y = run(&store, &mixer, &x);
        for n in 0..2 {
            for c in 0..9 {
                let zero = y.plane(n, c).iter().all(|&v| v == 0.0);
                assert_eq!(zero, c >= 6, "channel {c}");
            }
        }
    }

    #[test]
    fn variant_five_composes_two_slice_maps() {
        // h=4, alpha=3/4 => m=3, left [0,3), right [1,4)
        let sp = spec(MixVariant::V, 4, Some("3/4"), None, 0);
        let mut store = ParamStore::new();
        let mixer = ChannelMixer::register(&mut store, "mix", sp, Allocation::All, 1).unwrap();
        let left = mixer.sets[0].unwrap();
        let right = mixer.sets[1].unwrap();
        // left: each output = sum of the three inputs; right: cyclic shift of its three inputs
        store.value_mut(left.weight).data_mut().copy_from_slice(&[1.0; 9]);
        store.value_mut(right.weight).data_mut().copy_from_slice(&[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let x = Tensor4::from_dims([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = run(&store, &mixer, &x);
        // after left: (6,6,6,4); right sees (6,6,4) -> (6,4,6)
        assert_eq!(y.data(), &[6.0, 6.0, 4.0, 6.0]);
    }

    #[test]
    fn variant_five_with_identity_right_matches_variant_one_even_block() {
        let v = spec(MixVariant::V, 6, Some("2/3"), None, 0);
        let one = spec(MixVariant::I, 6, Some("2/3"), None, 0);
        let mut sv = ParamStore::new();
        let mv = ChannelMixer::register(&mut sv, "mix", v, Allocation::All, 3).unwrap();
        let right = mv.sets[1].unwrap();
        let w = sv.value_mut(right.weight);
        w.data_mut().fill(0.0);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        let mut s1 = ParamStore::new();
        let m1 = ChannelMixer::register(&mut s1, "mix", one, Allocation::All, 3).unwrap();
        let x = random_input(6, 8);
        assert_eq!(run(&sv, &mv, &x), run(&s1, &m1, &x));
    }

    #[test]
    fn interleave_permutation_small_case() {
        // h=4, s=2, d=2: 3D order (k0s0, k0s1, k1s0, k1s1) <- III order (s0k0, s0k1, s1k0, s1k1)
        assert_eq!(interleave_permutation(4, 2).unwrap(), vec![0, 2, 1, 3]);
        assert!(interleave_permutation(6, 4).is_err());
    }

    #[test]
    fn constant_input_gives_constant_3d_maps() {
        let sp = spec(MixVariant::Conv3D, 8, None, Some(4), 0);
        let mut store = ParamStore::new();
        let mixer = ChannelMixer::register(&mut store, "mix", sp, Allocation::All, 2).unwrap();
        let x = Tensor4::alloc_dims([1, 8, 3, 3], Fill::Constant(0.7)).unwrap();
        let y = run(&store, &mixer, &x);
        for c in 0..8 {
            let p = y.plane(0, c);
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }
}
