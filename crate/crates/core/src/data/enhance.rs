//! Intensity enhancement: global and tiled histogram equalization, percentile
//! contrast stretch, and multi-scale retinex with chromaticity preservation.
//!
//! Every method computes a new intensity per pixel. Gray images take it
//! directly; colour images scale all channels by `I'/I` (capped so no
//! channel saturates), keeping the channel ratios intact.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ImageBuf;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnhanceMethod {
    He,
    Ahe,
    Cet,
    Msrcp,
}

impl EnhanceMethod {
    pub const ALL: [EnhanceMethod; 4] = [EnhanceMethod::He, EnhanceMethod::Ahe, EnhanceMethod::Cet, EnhanceMethod::Msrcp];

    pub fn name(self) -> &'static str {
        match self {
            EnhanceMethod::He => "he",
            EnhanceMethod::Ahe => "ahe",
            EnhanceMethod::Cet => "cet",
            EnhanceMethod::Msrcp => "msrcp",
        }
    }
}

impl FromStr for EnhanceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnhanceMethod::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParam(format!("unknown enhancement method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceParams {
    /// Tiled equalization clip limit, in multiples of the mean bin height.
    pub clip_limit: f64,
    /// Tile grid `(columns, rows)`.
    pub tiles: (usize, usize),
    pub low_percentile: f64,
    pub high_percentile: f64,
    /// Gaussian sigmas of the retinex surround.
    pub scales: Vec<f64>,
}

impl Default for EnhanceParams {
    fn default() -> Self {
        EnhanceParams {
            clip_limit: 2.0,
            tiles: (8, 8),
            low_percentile: 2.0,
            high_percentile: 98.0,
            scales: vec![15.0, 80.0, 250.0],
        }
    }
}

impl EnhanceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.clip_limit.is_finite() && self.clip_limit > 0.0) {
            return bad(format!("clip limit {} must be positive", self.clip_limit));
        }
        if self.tiles.0 == 0 || self.tiles.1 == 0 {
            return bad(format!("tile grid {:?} must be at least 1×1", self.tiles));
        }
        let (lo, hi) = (self.low_percentile, self.high_percentile);
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return bad(format!("percentiles ({lo}, {hi}) must satisfy 0 ≤ low < high ≤ 100"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad(format!("retinex scales {:?} must be a non-empty list of positive sigmas", self.scales));
        }
        Ok(())
    }
}

pub fn enhance(img: &ImageBuf, method: EnhanceMethod, params: &EnhanceParams) -> Result<ImageBuf> {
    params.validate()?;
    let intensity = img.intensity();
    let mapped = match method {
        EnhanceMethod::He => {
            let map = he_map(&histogram(intensity.iter().map(|&v| level(v))));
            intensity.iter().map(|&v| map[level(v) as usize] as f64).collect()
        }
        EnhanceMethod::Ahe => ahe(&intensity, img.width, img.height, params),
        EnhanceMethod::Cet => {
            let map = cet_map(&intensity, params.low_percentile, params.high_percentile);
            intensity.iter().map(|&v| map[level(v) as usize] as f64).collect()
        }
        EnhanceMethod::Msrcp => msrcp_intensity(&intensity, img.width, img.height, &params.scales),
    };
    Ok(apply_intensity(img, &intensity, &mapped))
}

fn level(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn histogram(levels: impl IntoIterator<Item = u8>) -> [u64; 256] {
    let mut h = [0u64; 256];
    for v in levels {
        h[v as usize] += 1;
    }
    h
}

/// Global equalization map `v ↦ round(255 · cdf(v) / N)`.
pub fn he_map(hist: &[u64; 256]) -> [u8; 256] {
    let total: u64 = hist.iter().sum();
    let mut map = [0u8; 256];
    if total == 0 {
        return map;
    }
    let mut cdf = 0u64;
    for (v, &count) in hist.iter().enumerate() {
        cdf += count;
        map[v] = (255.0 * cdf as f64 / total as f64).round() as u8;
    }
    map
}

/// Equalization map of a histogram clipped at `clip · mean bin height`,
/// the excess redistributed uniformly over all bins.
fn clipped_map(hist: &[u64; 256], clip: f64) -> [f64; 256] {
    let total: u64 = hist.iter().sum();
    let mut map = [0.0; 256];
    if total == 0 {
        return map;
    }
    let limit = (clip * total as f64 / 256.0).max(1.0);
    let mut h: Vec<f64> = hist.iter().map(|&c| c as f64).collect();
    let excess: f64 = h.iter().map(|&c| (c - limit).max(0.0)).sum();
    for c in h.iter_mut() {
        *c = c.min(limit) + excess / 256.0;
    }
    let mut cdf = 0.0;
    for (v, c) in h.iter().enumerate() {
        cdf += c;
        map[v] = 255.0 * cdf / total as f64;
    }
    map
}

/// Clip-limited tiled equalization with bilinear blending between the maps
/// of the four nearest tile centres.
fn ahe(intensity: &[f64], width: usize, height: usize, params: &EnhanceParams) -> Vec<f64> {
    let tx = params.tiles.0.min(width);
    let ty = params.tiles.1.min(height);
    let bounds = |n: usize, t: usize, i: usize| (i * n / t, (i + 1) * n / t);
    let mut maps = Vec::with_capacity(tx * ty);
    for j in 0..ty {
        let (y0, y1) = bounds(height, ty, j);
        for i in 0..tx {
            let (x0, x1) = bounds(width, tx, i);
            let hist = histogram((y0..y1).flat_map(|y| (x0..x1).map(move |x| level(intensity[y * width + x]))));
            maps.push(clipped_map(&hist, params.clip_limit));
        }
    }
    let centre = |n: usize, t: usize, i: usize| {
        let (a, b) = bounds(n, t, i);
        (a + b) as f64 / 2.0
    };
    // Tile index below a coordinate and the blend weight toward the next one.
    let locate = |p: f64, n: usize, t: usize| -> (usize, usize, f64) {
        if t == 1 || p <= centre(n, t, 0) {
            return (0, 0, 0.0);
        }
        if p >= centre(n, t, t - 1) {
            return (t - 1, t - 1, 0.0);
        }
        let mut i = 0;
        while centre(n, t, i + 1) < p {
            i += 1;
        }
        let (c0, c1) = (centre(n, t, i), centre(n, t, i + 1));
        (i, i + 1, (p - c0) / (c1 - c0))
    };
    let mut out = vec![0.0; intensity.len()];
    for y in 0..height {
        let (j0, j1, ay) = locate(y as f64 + 0.5, height, ty);
        for x in 0..width {
            let (i0, i1, ax) = locate(x as f64 + 0.5, width, tx);
            let v = level(intensity[y * width + x]) as usize;
            let m = |i: usize, j: usize| maps[j * tx + i][v];
            let top = m(i0, j0) * (1.0 - ax) + m(i1, j0) * ax;
            let bottom = m(i0, j1) * (1.0 - ax) + m(i1, j1) * ax;
            out[y * width + x] = top * (1.0 - ay) + bottom * ay;
        }
    }
    out
}

/// Linearly interpolated percentile of `values` (`p` in [0, 100]).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Contrast stretch sending the low percentile to 0 and the high one to
/// 255. Identity when the two coincide.
pub fn cet_map(intensity: &[f64], low: f64, high: f64) -> [u8; 256] {
    let lo = percentile(intensity, low);
    let hi = percentile(intensity, high);
    let mut map = [0u8; 256];
    for (v, m) in map.iter_mut().enumerate() {
        *m = if hi > lo { level((v as f64 - lo) / (hi - lo) * 255.0) } else { v as u8 };
    }
    map
}

/// Box blur of radius `r` with edge renormalization (only in-image taps).
fn box_blur_1d(src: &[f64], dst: &mut [f64], n: usize, stride: usize, count: usize, outer: usize, r: usize) {
    let mut prefix = vec![0.0; n + 1];
    for o in 0..count {
        let base = o * outer;
        for i in 0..n {
            prefix[i + 1] = prefix[i] + src[base + i * stride];
        }
        for i in 0..n {
            let a = i.saturating_sub(r);
            let b = (i + r + 1).min(n);
            dst[base + i * stride] = (prefix[b] - prefix[a]) / (b - a) as f64;
        }
    }
}

/// Gaussian blur approximated by three successive box blurs whose combined
/// variance matches `sigma²`.
pub fn gaussian_blur(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    // Three boxes of width 2r+1 give variance 3·((2r+1)² − 1)/12 = r(r+1).
    let r = ((0.25 + sigma * sigma).sqrt() - 0.5).round().max(0.0) as usize;
    let mut a = values.to_vec();
    let mut b = vec![0.0; a.len()];
    for _ in 0..3 {
        box_blur_1d(&a, &mut b, width, 1, height, width, r);
        box_blur_1d(&b, &mut a, height, width, width, 1, r);
    }
    a
}

/// Multi-scale retinex on intensity, min-max rescaled to [0, 255].
fn msrcp_intensity(intensity: &[f64], width: usize, height: usize, scales: &[f64]) -> Vec<f64> {
    let log_i: Vec<f64> = intensity.iter().map(|&v| (v + 1.0).ln()).collect();
    let mut r = vec![0.0; intensity.len()];
    for &sigma in scales {
        let blurred = gaussian_blur(intensity, width, height, sigma);
        for ((acc, li), bl) in r.iter_mut().zip(&log_i).zip(&blurred) {
            *acc += (li - (bl + 1.0).ln()) / scales.len() as f64;
        }
    }
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return intensity.to_vec();
    }
    r.iter().map(|v| (v - lo) / (hi - lo) * 255.0).collect()
}

fn apply_intensity(img: &ImageBuf, old: &[f64], new: &[f64]) -> ImageBuf {
    let ch = img.channels;
    let mut out = img.clone();
    for (p, (px, (&i0, &i1))) in out.data.chunks_mut(ch).zip(old.iter().zip(new)).enumerate() {
        if ch == 1 {
            px[0] = level(i1);
            continue;
        }
        if i0 <= 0.0 {
            px.fill(level(i1));
            continue;
        }
        let src = &img.data[p * ch..(p + 1) * ch];
        let peak = src.iter().copied().max().unwrap_or(0) as f64;
        let gain = (i1 / i0).min(255.0 / peak);
        for (o, &s) in px.iter_mut().zip(src) {
            *o = level(s as f64 * gain);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> ImageBuf {
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        ImageBuf::new(w, h, 1, data).unwrap()
    }

    #[test]
    fn he_constant_image() {
        let img = gray(5, 4, |_, _| 90);
        let out = enhance(&img, EnhanceMethod::He, &EnhanceParams::default()).unwrap();
        let first = out.data[0];
        assert!(out.data.iter().all(|&v| v == first));
    }

    #[test]
    fn he_two_levels() {
        let img = gray(4, 4, |x, _| if x < 2 { 0 } else { 100 });
        let out = enhance(&img, EnhanceMethod::He, &EnhanceParams::default()).unwrap();
        // cdf is 1/2 then 1: 255/2 rounds half away from zero to 128.
        assert_eq!(out.get(0, 0, 0), 128);
        assert_eq!(out.get(3, 0, 0), 255);
    }

    #[test]
    fn cet_stretches_to_full_range() {
        let img = gray(16, 16, |x, y| (40 + (x + 16 * y) * 150 / 255) as u8);
        let out = enhance(&img, EnhanceMethod::Cet, &EnhanceParams::default()).unwrap();
        assert_eq!(*out.data.iter().min().unwrap(), 0);
        assert_eq!(*out.data.iter().max().unwrap(), 255);
        let flat = gray(3, 3, |_, _| 7);
        assert_eq!(enhance(&flat, EnhanceMethod::Cet, &EnhanceParams::default()).unwrap(), flat);
    }

    #[test]
    fn ahe_single_tile_close_to_clipped_he() {
        let img = gray(16, 16, |x, y| ((x * 7 + y * 3) % 64) as u8);
        let p = EnhanceParams { tiles: (1, 1), clip_limit: 1e6, ..EnhanceParams::default() };
        let ahe = enhance(&img, EnhanceMethod::Ahe, &p).unwrap();
        let he = enhance(&img, EnhanceMethod::He, &p).unwrap();
        for (a, b) in ahe.data.iter().zip(&he.data) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
        let out = enhance(&img, EnhanceMethod::Ahe, &EnhanceParams::default()).unwrap();
        assert_eq!(out.data.len(), img.data.len());
    }

    #[test]
    fn msrcp_preserves_chromaticity() {
        let data: Vec<u8> = (0..12 * 10)
            .flat_map(|i| {
                let base = 20 + (i % 12) as u8 * 8;
                [base, base / 2, base / 4]
            })
            .collect();
        let img = ImageBuf::new(12, 10, 3, data).unwrap();
        let p = EnhanceParams { scales: vec![1.0, 3.0], ..EnhanceParams::default() };
        let out = enhance(&img, EnhanceMethod::Msrcp, &p).unwrap();
        for (src, dst) in img.data.chunks(3).zip(out.data.chunks(3)) {
            if dst[0] > 40 {
                let ratio_src = src[1] as f64 / src[0] as f64;
                let ratio_dst = dst[1] as f64 / dst[0] as f64;
                assert!((ratio_src - ratio_dst).abs() < 0.03, "{src:?} {dst:?}");
            }
        }
        assert!(out.data.iter().any(|&v| v == 255));
    }

    #[test]
    fn gaussian_blur_preserves_constants_and_mass_centre() {
        let flat = vec![3.0; 20 * 7];
        assert!(gaussian_blur(&flat, 20, 7, 4.0).iter().all(|v| (v - 3.0).abs() < 1e-12));
        let mut spike = vec![0.0; 41];
        spike[20] = 1.0;
        let b = gaussian_blur(&spike, 41, 1, 3.0);
        let var: f64 = b.iter().enumerate().map(|(i, v)| v * (i as f64 - 20.0).powi(2)).sum();
        assert!((var - 12.0).abs() < 1e-9, "box passes have variance r(r+1) = 12, got {var}");
    }

    #[test]
    fn parameter_validation() {
        let img = gray(2, 2, |_, _| 1);
        let bad = [
            EnhanceParams { tiles: (0, 4), ..EnhanceParams::default() },
            EnhanceParams { scales: vec![], ..EnhanceParams::default() },
            EnhanceParams { low_percentile: 60.0, high_percentile: 40.0, ..EnhanceParams::default() },
            EnhanceParams { clip_limit: 0.0, ..EnhanceParams::default() },
        ];
        for p in bad {
            assert!(matches!(enhance(&img, EnhanceMethod::Ahe, &p), Err(Error::InvalidParam(_))));
        }
        assert_eq!("MSRCP".parse::<EnhanceMethod>().unwrap(), EnhanceMethod::Msrcp);
        assert!("clahe".parse::<EnhanceMethod>().is_err());
    }

    proptest! {
        #[test]
        fn he_map_is_monotone(counts in proptest::collection::vec(0u64..50, 256)) {
            let hist: [u64; 256] = counts.try_into().unwrap();
            let map = he_map(&hist);
            prop_assert!(map.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn cet_map_is_monotone(values in proptest::collection::vec(0u8..=255, 1..200), lo in 0.0f64..50.0, span in 1.0f64..50.0) {
            let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
            let map = cet_map(&v, lo, lo + span);
            prop_assert!(map.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn enhanced_pixels_preserve_intensity_order_under_he(values in proptest::collection::vec(0u8..=255, 16)) {
            let img = ImageBuf::new(4, 4, 1, values.clone()).unwrap();
            let out = enhance(&img, EnhanceMethod::He, &EnhanceParams::default()).unwrap();
            for i in 0..16 {
                for j in 0..16 {
                    if values[i] <= values[j] {
                        prop_assert!(out.data[i] <= out.data[j]);
                    }
                }
            }
        }
    }
}
