//! Adaptive frame selection.
//!
//! Consecutive-frame dissimilarities are read as a density over the frame axis:
//! the score of pair `(t, t+1)` is spread uniformly over the segment `[t, t+1]`.
//! The resulting piecewise-linear CDF is inverted at the uniform quantiles
//! `k/N` and the positions rounded to frame indices, so frames are picked
//! densely where the content changes and sparsely where it does not.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::video::VideoClip;
use crate::{Error, Result, Scalar};

/// Frame-distance used to build the dissimilarity profile.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    /// Mean absolute pixel difference.
    #[default]
    #[serde(rename = "mad")]
    Mad,
    /// L2 distance between per-frame descriptors of 4×4 patch means.
    #[serde(rename = "patch")]
    PatchFeature,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mad" => Ok(Metric::Mad),
            "patch" | "patch_feature" => Ok(Metric::PatchFeature),
            other => Err(Error::Config(format!(
                "unknown dissimilarity metric {other:?}"
            ))),
        }
    }
}

/// `d[t]` = dissimilarity of frames `t` and `t+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DissimilarityProfile<T> {
    d: Vec<T>,
    frames: usize,
}

impl<T: Scalar> DissimilarityProfile<T> {
    pub fn new(d: Vec<T>) -> Result<Self> {
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        if d.iter().any(|&x| x < T::zero()) {
            return Err(Error::NegativeDissimilarity);
        }
        let frames = d.len() + 1;
        Ok(Self { d, frames })
    }

    pub fn values(&self) -> &[T] {
        &self.d
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn scaled(&self, c: T) -> Result<Self> {
        Self::new(self.d.iter().map(|&x| x * c).collect())
    }
}

const PATCH: usize = 4;

fn patch_descriptor(clip: &VideoClip, t: usize) -> Vec<f64> {
    let ph = clip.height.div_ceil(PATCH);
    let pw = clip.width.div_ceil(PATCH);
    let mut out = Vec::with_capacity(ph * pw * clip.channels);
    for py in 0..ph {
        for px in 0..pw {
            let ys = py * PATCH..((py + 1) * PATCH).min(clip.height);
            let xs = px * PATCH..((px + 1) * PATCH).min(clip.width);
            let count = (ys.len() * xs.len()) as f64;
            for c in 0..clip.channels {
                let mut s = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        s += clip.at(t, y, x, c) as f64;
                    }
                }
                out.push(s / count);
            }
        }
    }
    out
}

/// Dissimilarity of every consecutive frame pair.
pub fn frame_dissimilarity<T: Scalar>(
    clip: &VideoClip,
    metric: Metric,
) -> Result<DissimilarityProfile<T>> {
    if clip.frames == 0 {
        return Err(Error::EmptyVideo);
    }
    let n = clip.frame_len();
    let d = match metric {
        Metric::Mad => (0..clip.frames - 1)
            .map(|t| {
                let s: f64 = clip
                    .frame(t)
                    .iter()
                    .zip(clip.frame(t + 1))
                    .map(|(&a, &b)| (a as f64 - b as f64).abs())
                    .sum();
                T::lit(if n == 0 { 0.0 } else { s / n as f64 })
            })
            .collect(),
        Metric::PatchFeature => {
            let desc: Vec<Vec<f64>> = (0..clip.frames)
                .map(|t| patch_descriptor(clip, t))
                .collect();
            desc.windows(2)
                .map(|w| {
                    T::lit(
                        w[0].iter()
                            .zip(&w[1])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt(),
                    )
                })
                .collect()
        }
    };
    DissimilarityProfile::new(d)
}

/// Piecewise-linear CDF over the frame axis `[0, M-1]`.
///
/// Cumulative mass is kept unnormalized (`cumulative[t]` = mass left of
/// breakpoint `t`) so inversion at rational quantiles can be decided with
/// products instead of divisions.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCdf<T> {
    mass: Vec<T>,
    cumulative: Vec<T>,
    uniform_fallback: bool,
}

/// Normalizes a profile into a CDF; all-zero profiles (and single frames) fall
/// back to the uniform CDF `F(x) = x/(M-1)`.
pub fn build_cdf<T: Scalar>(profile: &DissimilarityProfile<T>) -> Result<FrameCdf<T>> {
    if profile.d.iter().any(|&x| x < T::zero()) {
        return Err(Error::NegativeDissimilarity);
    }
    let total: T = profile.d.iter().copied().sum();
    let uniform_fallback = total == T::zero();
    let mass: Vec<T> = if uniform_fallback {
        vec![T::one(); profile.d.len()]
    } else {
        profile.d.clone()
    };
    let mut cumulative = Vec::with_capacity(mass.len() + 1);
    let mut acc = T::zero();
    cumulative.push(acc);
    for &m in &mass {
        acc = acc + m;
        cumulative.push(acc);
    }
    Ok(FrameCdf {
        mass,
        cumulative,
        uniform_fallback,
    })
}

impl<T: Scalar> FrameCdf<T> {
    pub fn frames(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_uniform_fallback(&self) -> bool {
        self.uniform_fallback
    }

    fn total(&self) -> T {
        *self.cumulative.last().expect("at least one breakpoint")
    }

    /// `F(t)` at every integer breakpoint.
    pub fn values(&self) -> Vec<T> {
        let total = self.total();
        if total == T::zero() {
            return vec![T::zero(); self.cumulative.len()];
        }
        let mut v: Vec<T> = self.cumulative.iter().map(|&c| c / total).collect();
        *v.last_mut().unwrap() = T::one();
        v
    }

    /// Normalized density on each unit segment.
    pub fn pdf(&self) -> Vec<T> {
        let total = self.total();
        self.mass.iter().map(|&m| m / total).collect()
    }

    /// `F(x)` for real `x`, linear between breakpoints.
    pub fn eval(&self, x: T) -> T {
        let m = self.frames();
        if m == 1 || x <= T::zero() {
            return if m == 1 && x >= T::zero() {
                T::one()
            } else {
                T::zero()
            };
        }
        let last = T::from_usize_lossy(m - 1);
        if x >= last {
            return T::one();
        }
        let t = x.floor().to_usize().unwrap_or(0).min(m - 2);
        let frac = x - T::from_usize_lossy(t);
        (self.cumulative[t] + frac * self.mass[t]) / self.total()
    }

    /// Absolute slack for comparisons against the running mass, so that
    /// rounding noise in the prefix sums cannot move a quantile that sits
    /// exactly on a breakpoint or a half-frame.
    fn slack(&self, scale: T) -> T {
        T::epsilon() * T::from_usize_lossy(64 * self.frames()) * scale * self.total()
    }

    /// First segment `t` whose right breakpoint reaches mass `target`
    /// (compared as `scale·cumulative[t+1] + slack >= target`).
    fn segment_reaching(&self, scale: T, target: T) -> usize {
        let slack = self.slack(scale);
        let idx = self.cumulative[1..].partition_point(|&c| scale * c + slack < target);
        idx.min(self.mass.len() - 1)
    }

    /// Generalized inverse `min{x : F(x) >= q}`.
    pub fn inverse(&self, q: T) -> Result<T> {
        if !(q >= T::zero() && q <= T::one()) {
            return Err(Error::QuantileOutOfRange(q.as_f64()));
        }
        if q == T::zero() || self.frames() == 1 {
            return Ok(T::zero());
        }
        let target = q * self.total();
        let t = self.segment_reaching(T::one(), target);
        let frac = ((target - self.cumulative[t]) / self.mass[t])
            .max(T::zero())
            .min(T::one());
        Ok(T::from_usize_lossy(t) + frac)
    }

    /// Inverse at the rational quantile `k/n`, returned as the segment and the
    /// numerator/denominator of the in-segment offset, so that rounding can be
    /// decided without dividing.
    fn inverse_ratio(&self, k: usize, n: usize) -> Option<(usize, T, T)> {
        if k == 0 || self.frames() == 1 {
            return None;
        }
        let nt = T::from_usize_lossy(n);
        let target = T::from_usize_lossy(k) * self.total();
        let t = self.segment_reaching(nt, target);
        let num = target - nt * self.cumulative[t];
        let den = nt * self.mass[t];
        Some((t, num, den))
    }
}

/// Generalized inverse of `cdf` at `q`.
pub fn inverse_cdf<T: Scalar>(cdf: &FrameCdf<T>, q: T) -> Result<T> {
    cdf.inverse(q)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameSelection {
    pub indices: Vec<usize>,
    /// Pre-rounding positions `F⁻¹(k/N)`.
    pub positions: Vec<f64>,
    pub quantiles: Vec<f64>,
    pub dedupe: bool,
}

/// Picks `n` frames at the uniform quantiles `{0, 1/n, …, (n-1)/n}`.
///
/// Positions are rounded half away from zero. Without `dedupe` repeated
/// indices are kept. With `dedupe`, repeats are swapped for the unselected
/// frames carrying the most adjacent mass (ties to the lower index); once all
/// frames are used the last index is repeated.
pub fn select_frames<T: Scalar>(
    cdf: &FrameCdf<T>,
    n: usize,
    dedupe: bool,
) -> Result<FrameSelection> {
    if n < 1 {
        return Err(Error::Config("frame count N must be at least 1".into()));
    }
    let mut indices = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    for k in 0..n {
        match cdf.inverse_ratio(k, n) {
            None => {
                indices.push(0);
                positions.push(0.0);
            }
            Some((t, num, den)) => {
                let up = num + num + cdf.slack(T::from_usize_lossy(n)) >= den;
                indices.push(t + usize::from(up));
                positions.push(t as f64 + (num / den).min(T::one()).as_f64());
            }
        }
    }
    if dedupe {
        indices = dedupe_indices(cdf, &indices, n);
    }
    Ok(FrameSelection {
        indices,
        positions,
        quantiles: (0..n).map(|k| k as f64 / n as f64).collect(),
        dedupe,
    })
}

fn dedupe_indices<T: Scalar>(cdf: &FrameCdf<T>, raw: &[usize], n: usize) -> Vec<usize> {
    let m = cdf.frames();
    let mut chosen: Vec<usize> = raw.to_vec();
    chosen.dedup();
    if chosen.len() < n {
        // mass adjacent to frame i: half of each neighbouring segment
        let half = T::lit(0.5);
        let weight = |i: usize| {
            let left = if i > 0 { cdf.mass[i - 1] } else { T::zero() };
            let right = if i + 1 < m { cdf.mass[i] } else { T::zero() };
            half * (left + right)
        };
        let mut candidates: Vec<usize> = (0..m).filter(|i| !chosen.contains(i)).collect();
        candidates.sort_by(|&a, &b| weight(b).partial_cmp(&weight(a)).unwrap().then(a.cmp(&b)));
        let need = n - chosen.len();
        chosen.extend(candidates.into_iter().take(need));
        chosen.sort_unstable();
    }
    while chosen.len() < n {
        let last = *chosen.last().expect("non-empty selection");
        chosen.push(last);
    }
    chosen
}

/// Copies the selected frames, in selection order.
pub fn apply_selection(clip: &VideoClip, sel: &FrameSelection) -> Result<VideoClip> {
    let mut data = Vec::with_capacity(sel.indices.len() * clip.frame_len());
    for &i in &sel.indices {
        if i >= clip.frames {
            return Err(Error::FrameOutOfRange {
                index: i,
                frames: clip.frames,
            });
        }
        data.extend_from_slice(clip.frame(i));
    }
    VideoClip::new(
        sel.indices.len(),
        clip.height,
        clip.width,
        clip.channels,
        data,
    )
}

/// Indices `round(k·(M-1)/N)` of plain uniform sampling.
pub fn uniform_indices(frames: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|k| (2 * k * (frames.saturating_sub(1)) + n) / (2 * n))
        .collect()
}

/// Selection document written by the `afs` command.
#[derive(Clone, Debug, Serialize)]
pub struct SelectionReport {
    pub m: usize,
    pub n: usize,
    pub indices: Vec<usize>,
    pub pdf: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl SelectionReport {
    pub fn new<T: Scalar>(cdf: &FrameCdf<T>, sel: &FrameSelection) -> Self {
        Self {
            m: cdf.frames(),
            n: sel.indices.len(),
            indices: sel.indices.clone(),
            pdf: cdf.pdf().into_iter().map(Scalar::as_f64).collect(),
            cdf: cdf.values().into_iter().map(Scalar::as_f64).collect(),
        }
    }
}

/// Full pipeline: dissimilarity, CDF, selection and frame copy.
pub fn adaptive_sample(
    clip: &VideoClip,
    n: usize,
    metric: Metric,
    dedupe: bool,
) -> Result<(VideoClip, FrameSelection)> {
    let profile = frame_dissimilarity::<f64>(clip, metric)?;
    let cdf = build_cdf(&profile)?;
    let sel = select_frames(&cdf, n, dedupe)?;
    Ok((apply_selection(clip, &sel)?, sel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cdf(d: &[f64]) -> FrameCdf<f64> {
        build_cdf(&DissimilarityProfile::new(d.to_vec()).unwrap()).unwrap()
    }

    /// `min{x on grid : F(x) >= q}` on a grid of ~10^5 points containing all
    /// half-integers.
    fn grid_inverse(c: &FrameCdf<f64>, q: f64) -> f64 {
        let m = c.frames();
        if m == 1 {
            return 0.0;
        }
        let per_half = (100_000 / (2 * (m - 1))).max(1);
        let steps = 2 * (m - 1) * per_half;
        for j in 0..=steps {
            let x = j as f64 / (2 * per_half) as f64;
            if c.eval(x) >= q {
                return x;
            }
        }
        (m - 1) as f64
    }

    #[test]
    fn identical_frames_have_zero_distance() {
        let clip = VideoClip::new(2, 1, 2, 1, vec![0.3, 0.7, 0.3, 0.7]).unwrap();
        let p = frame_dissimilarity::<f64>(&clip, Metric::Mad).unwrap();
        assert_eq!(p.values(), &[0.0]);
        let p = frame_dissimilarity::<f64>(&clip, Metric::PatchFeature).unwrap();
        assert_eq!(p.values(), &[0.0]);
    }

    #[test]
    fn black_to_white_is_unit_mad() {
        let clip =
            VideoClip::new(2, 2, 2, 1, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let p = frame_dissimilarity::<f64>(&clip, Metric::Mad).unwrap();
        assert_eq!(p.values(), &[1.0]);
    }

    #[test]
    fn mad_matches_pixel_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (t, h, w, c) = (3, 5, 6, 3);
        let data: Vec<f32> = (0..t * h * w * c).map(|_| rng.random()).collect();
        let clip = VideoClip::new(t, h, w, c, data).unwrap();
        let p = frame_dissimilarity::<f64>(&clip, Metric::Mad).unwrap();
        for f in 0..t - 1 {
            let mut s = 0.0f64;
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        s += (clip.at(f, y, x, ch) as f64 - clip.at(f + 1, y, x, ch) as f64).abs();
                    }
                }
            }
            assert_eq!(p.values()[f], s / (h * w * c) as f64);
        }
    }

    #[test]
    fn empty_video_is_error() {
        let clip = VideoClip::zeros(0, 4, 4, 1);
        assert!(matches!(
            frame_dissimilarity::<f64>(&clip, Metric::Mad),
            Err(Error::EmptyVideo)
        ));
    }

    #[test]
    fn cdf_examples() {
        let c = cdf(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(c.values(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let c = cdf(&[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(c.values()[2], 0.0);
        assert_eq!(c.values()[3], 1.0);
        let c = cdf(&[1.0, 3.0]);
        assert_eq!(c.values(), vec![0.0, 0.25, 1.0]);
        let c = cdf(&[0.0, 0.0]);
        assert!(c.is_uniform_fallback());
        assert_eq!(c.values(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn negative_dissimilarity_rejected() {
        assert!(matches!(
            DissimilarityProfile::new(vec![0.5, -0.1]),
            Err(Error::NegativeDissimilarity)
        ));
    }

    #[test]
    fn inverse_examples() {
        let uniform = cdf(&[1.0; 8]);
        assert_eq!(uniform.inverse(0.5).unwrap(), 4.0);
        let spike = cdf(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(spike.inverse(0.5).unwrap(), 3.5);
        assert_eq!(grid_inverse(&spike, 0.5), 3.5);
        assert_eq!(spike.inverse(0.0).unwrap(), 0.0);
        assert_eq!(cdf(&[2.0, 0.5]).inverse(0.0).unwrap(), 0.0);
        assert!(matches!(
            uniform.inverse(1.5),
            Err(Error::QuantileOutOfRange(_))
        ));
        assert!(uniform.inverse(-0.1).is_err());
    }

    #[test]
    fn inverse_takes_left_edge_of_plateau() {
        let c = cdf(&[1.0, 0.0, 1.0]);
        assert_eq!(c.inverse(0.5).unwrap(), 1.0);
        assert_eq!(c.inverse(1.0).unwrap(), 3.0);
    }

    #[test]
    fn selection_examples() {
        let uniform = cdf(&[1.0; 8]);
        assert_eq!(
            select_frames(&uniform, 4, false).unwrap().indices,
            vec![0, 2, 4, 6]
        );

        let spike = cdf(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let sel = select_frames(&spike, 4, false).unwrap();
        assert_eq!(sel.positions, vec![0.0, 3.25, 3.5, 3.75]);
        assert_eq!(sel.indices, vec![0, 3, 4, 4]);
        let oracle: Vec<f64> = (0..4)
            .map(|k| grid_inverse(&spike, k as f64 / 4.0))
            .collect();
        assert_eq!(oracle, vec![0.0, 3.25, 3.5, 3.75]);

        let single = cdf(&[]);
        assert_eq!(
            select_frames(&single, 3, false).unwrap().indices,
            vec![0, 0, 0]
        );
        assert!(select_frames(&uniform, 0, false).is_err());
    }

    #[test]
    fn dedupe_fills_with_heaviest_unselected_frames() {
        let spike = cdf(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let sel = select_frames(&spike, 4, true).unwrap();
        // raw [0,3,4,4]; frames 3 and 4 both carry half the spike but are taken,
        // all others weigh 0 -> lowest unselected index 1
        assert_eq!(sel.indices, vec![0, 1, 3, 4]);

        let small = cdf(&[1.0, 1.0]);
        assert_eq!(
            select_frames(&small, 5, true).unwrap().indices,
            vec![0, 1, 2, 2, 2]
        );
    }

    #[test]
    fn apply_selection_copies_frames() {
        let data: Vec<f32> = (0..3 * 4).map(|x| x as f32 / 12.0).collect();
        let clip = VideoClip::new(3, 2, 2, 1, data).unwrap();
        let all = FrameSelection {
            indices: vec![0, 1, 2],
            positions: vec![],
            quantiles: vec![],
            dedupe: false,
        };
        assert_eq!(apply_selection(&clip, &all).unwrap(), clip);
        let twice = FrameSelection {
            indices: vec![0, 0],
            ..all.clone()
        };
        let out = apply_selection(&clip, &twice).unwrap();
        assert_eq!(out.frames, 2);
        assert_eq!(out.frame(0), clip.frame(0));
        assert_eq!(out.frame(1), clip.frame(0));
        let perm = FrameSelection {
            indices: vec![2, 0, 1],
            ..all.clone()
        };
        let out = apply_selection(&clip, &perm).unwrap();
        for (k, &i) in perm.indices.iter().enumerate() {
            assert_eq!(out.frame(k), clip.frame(i));
        }
        let bad = FrameSelection {
            indices: vec![3],
            ..all
        };
        assert!(matches!(
            apply_selection(&clip, &bad),
            Err(Error::FrameOutOfRange { .. })
        ));
    }

    #[test]
    fn uniform_indices_formula() {
        assert_eq!(uniform_indices(9, 4), vec![0, 2, 4, 6]);
        assert_eq!(uniform_indices(4, 8), vec![0, 0, 1, 1, 2, 2, 2, 3]);
    }
}
