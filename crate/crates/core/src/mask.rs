//! Sampling-pattern generators and the discrete protocol label.
//!
//! The phase-encode direction is the W axis; Cartesian families sample whole
//! columns. Radial masks are supercover rasterizations of lines through the
//! grid center.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::{Float, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Uniform,
    Gaussian,
    Radial,
    KtUniform,
    KtGaussian,
    KtRadial,
}

impl Pattern {
    pub const ALL: [Pattern; 6] =
        [Pattern::Uniform, Pattern::Gaussian, Pattern::Radial, Pattern::KtUniform, Pattern::KtGaussian, Pattern::KtRadial];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Uniform => "uniform",
            Pattern::Gaussian => "gaussian",
            Pattern::Radial => "radial",
            Pattern::KtUniform => "kt_uniform",
            Pattern::KtGaussian => "kt_gaussian",
            Pattern::KtRadial => "kt_radial",
        }
    }

    /// The static family a kt pattern draws each frame from.
    pub fn base(self) -> Pattern {
        match self {
            Pattern::KtUniform => Pattern::Uniform,
            Pattern::KtGaussian => Pattern::Gaussian,
            Pattern::KtRadial => Pattern::Radial,
            p => p,
        }
    }

    pub fn is_kt(self) -> bool {
        self != self.base()
    }

    pub fn kt(self) -> Pattern {
        match self.base() {
            Pattern::Uniform => Pattern::KtUniform,
            Pattern::Gaussian => Pattern::KtGaussian,
            _ => Pattern::KtRadial,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let l = s.to_ascii_lowercase().replace('-', "_");
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == l)
            .ok_or_else(|| invalid!("unknown pattern `{s}`; expected one of {}", Pattern::ALL.map(|p| p.name()).join(", ")))
    }
}

/// Fully sampled central rectangle, half-open row and column ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acs {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Acs {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() || self.cols.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows.contains(&i) && self.cols.contains(&j)
    }
}

/// Binary sampling grid, `frames x h x w` bytes in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub grid: Vec<u8>,
    pub pattern: Pattern,
    pub acs: Acs,
    pub nominal_accel: f64,
}

impl SamplingMask {
    pub fn frame(&self, f: usize) -> &[u8] {
        let p = self.h * self.w;
        &self.grid[f * p..(f + 1) * p]
    }

    pub fn sampled(&self) -> usize {
        self.grid.iter().filter(|&&v| v != 0).count()
    }

    /// Frame `f` as a real `[H, W]` grid.
    pub fn frame_tensor<T: Float>(&self, f: usize) -> Tensor<T> {
        Tensor::from_vec(&[self.h, self.w], self.frame(f).iter().map(|&v| T::c(v as f64)).collect()).expect("sized")
    }

    /// Checks binary entries, a fully sampled ACS and a nonempty pattern.
    pub fn validate(&self) -> Result<()> {
        if self.grid.len() != self.frames * self.h * self.w || self.frames == 0 {
            return Err(invalid!("mask grid has {} entries for {}x{}x{}", self.grid.len(), self.frames, self.h, self.w));
        }
        if self.grid.iter().any(|&v| v > 1) {
            return Err(invalid!("mask entries must be 0 or 1"));
        }
        if self.acs.rows.end > self.h || self.acs.cols.end > self.w {
            return Err(invalid!("ACS {:?} outside {}x{}", self.acs, self.h, self.w));
        }
        for f in 0..self.frames {
            let m = self.frame(f);
            for i in self.acs.rows.clone() {
                if self.acs.cols.clone().any(|j| m[i * self.w + j] == 0) {
                    return Err(invalid!("ACS region not fully sampled in frame {f}"));
                }
            }
        }
        if self.sampled() == 0 {
            return Err(invalid!("mask samples nothing"));
        }
        Ok(())
    }
}

fn centered(n: usize, len: usize) -> Range<usize> {
    let start = (n / 2).saturating_sub(len / 2);
    start..(start + len).min(n)
}

fn columns_mask(h: usize, w: usize, cols: &[bool]) -> Vec<u8> {
    let mut grid = vec![0u8; h * w];
    for i in 0..h {
        for (j, &on) in cols.iter().enumerate() {
            grid[i * w + j] = on as u8;
        }
    }
    grid
}

fn uniform_columns(w: usize, r: usize, offset: usize, acs: &Range<usize>) -> Vec<bool> {
    (0..w).map(|j| j % r == offset % r || acs.contains(&j)).collect()
}

/// Every `r`-th column from column 0 plus `acs_lines` centered columns.
pub fn make_uniform_mask(h: usize, w: usize, r: usize, acs_lines: usize) -> Result<SamplingMask> {
    uniform_with_offset(h, w, r, acs_lines, 0)
}

fn uniform_with_offset(h: usize, w: usize, r: usize, acs_lines: usize, offset: usize) -> Result<SamplingMask> {
    if r == 0 || h == 0 || w == 0 {
        return Err(invalid!("uniform mask needs R >= 1 and a nonempty grid, got R={r}, {h}x{w}"));
    }
    if acs_lines > w {
        return Err(invalid!("{acs_lines} ACS lines exceed width {w}"));
    }
    let cols = centered(w, acs_lines);
    let grid = columns_mask(h, w, &uniform_columns(w, r, offset, &cols));
    let mask = SamplingMask {
        frames: 1,
        h,
        w,
        grid,
        pattern: Pattern::Uniform,
        acs: Acs { rows: 0..if acs_lines > 0 { h } else { 0 }, cols },
        nominal_accel: r as f64,
    };
    mask.validate()?;
    Ok(mask)
}

/// Column budget `round(W / R)` (ACS included) drawn from a centered Gaussian
/// density with standard deviation `W / 6`.
pub fn make_gaussian_mask(h: usize, w: usize, r: usize, acs_lines: usize, seed: u64) -> Result<SamplingMask> {
    if r == 0 || h == 0 || w == 0 {
        return Err(invalid!("gaussian mask needs R >= 1 and a nonempty grid, got R={r}, {h}x{w}"));
    }
    if acs_lines > w {
        return Err(invalid!("{acs_lines} ACS lines exceed width {w}"));
    }
    let budget = ((w as f64 / r as f64).round() as usize).max(1);
    if budget < acs_lines {
        return Err(invalid!("column budget {budget} (W={w}, R={r}) is smaller than {acs_lines} ACS lines"));
    }
    let acs_cols = centered(w, acs_lines);
    let mut on = vec![false; w];
    acs_cols.clone().for_each(|j| on[j] = true);
    on[w / 2] = true;
    let mut count = on.iter().filter(|&&b| b).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(w as f64 / 2.0, w as f64 / 6.0).expect("positive std");
    let mut draws = 0usize;
    while count < budget && draws < 1_000_000 {
        draws += 1;
        let j = normal.sample(&mut rng).round();
        if j < 0.0 || j >= w as f64 {
            continue;
        }
        let j = j as usize;
        if !on[j] {
            on[j] = true;
            count += 1;
        }
    }
    // the density tails can starve tiny budgets near W; fill outward from the center
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by_key(|&j| (j as isize - (w / 2) as isize).unsigned_abs());
    for j in order {
        if count >= budget {
            break;
        }
        if !on[j] {
            on[j] = true;
            count += 1;
        }
    }
    let mask = SamplingMask {
        frames: 1,
        h,
        w,
        grid: columns_mask(h, w, &on),
        pattern: Pattern::Gaussian,
        acs: Acs { rows: 0..if acs_lines > 0 { h } else { 0 }, cols: acs_cols },
        nominal_accel: r as f64,
    };
    mask.validate()?;
    Ok(mask)
}

/// Marks every pixel touched by the ray from `(r0, c0)` along `(dr, dc)`
/// until it leaves the grid. Pixel `(i, j)` covers `[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)`.
fn supercover_ray(grid: &mut [u8], h: usize, w: usize, r0: f64, c0: f64, dr: f64, dc: f64) {
    let inside = |i: i64, j: i64| i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w;
    let mut mark = |i: i64, j: i64| {
        if inside(i, j) {
            grid[i as usize * w + j as usize] = 1;
        }
    };
    let (mut i, mut j) = ((r0 + 0.5).floor() as i64, (c0 + 0.5).floor() as i64);
    let axis = |p0: f64, d: f64, cell: i64| -> (i64, f64, f64) {
        if d > 1e-12 {
            (1, (cell as f64 + 0.5 - p0) / d, 1.0 / d)
        } else if d < -1e-12 {
            (-1, (cell as f64 - 0.5 - p0) / d, -1.0 / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (si, mut ti, di) = axis(r0, dr, i);
    let (sj, mut tj, dj) = axis(c0, dc, j);
    while inside(i, j) {
        mark(i, j);
        if (ti - tj).abs() < 1e-12 {
            // passes exactly through a corner: cover both neighbours
            mark(i + si, j);
            mark(i, j + sj);
            i += si;
            j += sj;
            ti += di;
            tj += dj;
        } else if ti < tj {
            i += si;
            ti += di;
        } else {
            j += sj;
            tj += dj;
        }
    }
}

fn largest_centered_square(grids: &[&[u8]], h: usize, w: usize) -> Acs {
    let (ci, cj) = (h / 2, w / 2);
    let full = |k: usize| -> bool {
        if k > ci || k > cj || ci + k >= h || cj + k >= w {
            return false;
        }
        grids.iter().all(|g| (ci - k..=ci + k).all(|i| (cj - k..=cj + k).all(|j| g[i * w + j] == 1)))
    };
    if !full(0) {
        return Acs { rows: 0..0, cols: 0..0 };
    }
    let mut k = 0;
    while full(k + 1) {
        k += 1;
    }
    Acs { rows: ci - k..ci + k + 1, cols: cj - k..cj + k + 1 }
}

fn radial_grid(h: usize, w: usize, spokes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = std::f64::consts::PI / spokes as f64;
    let offset = rng.random_range(0.0..step);
    let mut grid = vec![0u8; h * w];
    let (r0, c0) = ((h / 2) as f64, (w / 2) as f64);
    for k in 0..spokes {
        let a = offset + k as f64 * step;
        let (dr, dc) = (a.sin(), a.cos());
        supercover_ray(&mut grid, h, w, r0, c0, dr, dc);
        supercover_ray(&mut grid, h, w, r0, c0, -dr, -dc);
    }
    grid
}

/// `spokes` equiangular lines through the center pixel with a seeded global
/// rotation. The ACS is the largest fully sampled centered square.
pub fn make_radial_mask(h: usize, w: usize, spokes: usize, seed: u64) -> Result<SamplingMask> {
    if spokes == 0 || h == 0 || w == 0 {
        return Err(invalid!("radial mask needs at least one spoke and a nonempty grid"));
    }
    let grid = radial_grid(h, w, spokes, seed);
    let acs = largest_centered_square(&[&grid], h, w);
    let mut mask = SamplingMask { frames: 1, h, w, grid, pattern: Pattern::Radial, acs, nominal_accel: 0.0 };
    mask.nominal_accel = (h * w) as f64 / mask.sampled() as f64;
    mask.validate()?;
    Ok(mask)
}

/// Spoke count giving roughly acceleration `r`: `ceil(pi * max(H, W) / (2 r))`.
pub fn spokes_for_accel(h: usize, w: usize, r: f64) -> usize {
    ((std::f64::consts::PI * h.max(w) as f64) / (2.0 * r)).ceil().max(1.0) as usize
}

/// Single-frame mask of family `pattern` at nominal acceleration `r`.
pub fn make_mask(pattern: Pattern, h: usize, w: usize, r: usize, acs_lines: usize, seed: u64) -> Result<SamplingMask> {
    match pattern {
        Pattern::Uniform => make_uniform_mask(h, w, r, acs_lines),
        Pattern::Gaussian => make_gaussian_mask(h, w, r, acs_lines, seed),
        Pattern::Radial => {
            let mut m = make_radial_mask(h, w, spokes_for_accel(h, w, r as f64), seed)?;
            m.nominal_accel = r as f64;
            Ok(m)
        }
        kt => make_kt_mask(1, h, w, kt, r, acs_lines, seed),
    }
}

/// Per-frame masks: uniform frames shift their start column by `frame mod R`,
/// gaussian and radial frames use seed `seed + frame`.
pub fn make_kt_mask(
    frames: usize,
    h: usize,
    w: usize,
    pattern: Pattern,
    r: usize,
    acs_lines: usize,
    seed: u64,
) -> Result<SamplingMask> {
    if frames == 0 {
        return Err(invalid!("kt mask needs at least one frame"));
    }
    let per_frame: Vec<SamplingMask> = (0..frames)
        .map(|f| match pattern.base() {
            Pattern::Uniform => uniform_with_offset(h, w, r, acs_lines, f % r.max(1)),
            Pattern::Gaussian => make_gaussian_mask(h, w, r, acs_lines, seed.wrapping_add(f as u64)),
            _ => make_radial_mask(h, w, spokes_for_accel(h, w, r as f64), seed.wrapping_add(f as u64)),
        })
        .collect::<Result<_>>()?;
    let acs = if pattern.base() == Pattern::Radial {
        let grids: Vec<&[u8]> = per_frame.iter().map(|m| m.grid.as_slice()).collect();
        largest_centered_square(&grids, h, w)
    } else {
        per_frame[0].acs.clone()
    };
    let mask = SamplingMask {
        frames,
        h,
        w,
        grid: per_frame.iter().flat_map(|m| m.grid.iter().copied()).collect(),
        pattern: pattern.kt(),
        acs,
        nominal_accel: r as f64,
    };
    mask.validate()?;
    Ok(mask)
}

/// Total grid points over sampled points.
pub fn effective_acceleration(mask: &SamplingMask) -> Result<f64> {
    match mask.sampled() {
        0 => Err(invalid!("mask samples nothing")),
        n => Ok(mask.grid.len() as f64 / n as f64),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Cine,
    Aorta,
    Mapping,
    Tagging,
    Flow2d,
    BlackBlood,
    Lge,
    Perfusion,
    T1rho,
    T1w,
    T2w,
    AxT1,
    AxT2,
    AxFlair,
    AxT1Post,
    Other,
}

impl Modality {
    pub const ALL: [Modality; 16] = [
        Modality::Cine,
        Modality::Aorta,
        Modality::Mapping,
        Modality::Tagging,
        Modality::Flow2d,
        Modality::BlackBlood,
        Modality::Lge,
        Modality::Perfusion,
        Modality::T1rho,
        Modality::T1w,
        Modality::T2w,
        Modality::AxT1,
        Modality::AxT2,
        Modality::AxFlair,
        Modality::AxT1Post,
        Modality::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Cine => "Cine",
            Modality::Aorta => "Aorta",
            Modality::Mapping => "Mapping",
            Modality::Tagging => "Tagging",
            Modality::Flow2d => "Flow2d",
            Modality::BlackBlood => "BlackBlood",
            Modality::Lge => "LGE",
            Modality::Perfusion => "Perfusion",
            Modality::T1rho => "T1rho",
            Modality::T1w => "T1w",
            Modality::T2w => "T2w",
            Modality::AxT1 => "AXT1",
            Modality::AxT2 => "AXT2",
            Modality::AxFlair => "AXFLAIR",
            Modality::AxT1Post => "AXT1POST",
            Modality::Other => "Other",
        }
    }
}

impl FromStr for Modality {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            invalid!("unknown modality `{s}`; expected one of {}", Modality::ALL.map(|m| m.name()).join(", "))
        })
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Acceleration bin: `< 6 -> 0`, `[6, 9) -> 1`, `[9, 11) -> 2`, `[11, 14) -> 3`,
/// `[14, 20) -> 4`, `>= 20 -> 5`. The nominal points 4, 8, 10, 12, 16 and 20
/// fall in bins 0 to 5.
pub fn accel_bin(accel: f64) -> Result<usize> {
    if !(accel.is_finite() && accel >= 1.0) {
        return Err(invalid!("acceleration must be finite and >= 1, got {accel}"));
    }
    const EDGES: [f64; 5] = [6.0, 9.0, 11.0, 14.0, 20.0];
    Ok(EDGES.iter().take_while(|&&e| accel >= e).count())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolLabel {
    pub mask_type: Pattern,
    pub accel_bin: usize,
    pub modality: Modality,
    pub code: usize,
}

impl ProtocolLabel {
    pub const COUNT: usize = 6 * 6 * 16;

    pub fn new(mask_type: Pattern, accel_bin: usize, modality: Modality) -> Result<Self> {
        if accel_bin >= 6 {
            return Err(invalid!("acceleration bin {accel_bin} outside [0, 6)"));
        }
        let code = mask_type.index() * 96 + accel_bin * 16 + modality as usize;
        Ok(Self { mask_type, accel_bin, modality, code })
    }

    pub fn decode(code: usize) -> Result<Self> {
        if code >= Self::COUNT {
            return Err(invalid!("protocol code {code} outside [0, {})", Self::COUNT));
        }
        Self::new(Pattern::ALL[code / 96], (code / 16) % 6, Modality::ALL[code % 16])
    }
}

pub fn encode_protocol(mask_type: Pattern, accel: f64, modality: Modality) -> Result<ProtocolLabel> {
    ProtocolLabel::new(mask_type, accel_bin(accel)?, modality)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn columns(m: &SamplingMask) -> Vec<usize> {
        (0..m.w).filter(|&j| m.grid[j] == 1).collect()
    }

    #[test]
    fn uniform_worked_example() {
        let m = make_uniform_mask(8, 16, 4, 4).unwrap();
        assert_eq!(columns(&m), [0, 4, 6, 7, 8, 9, 12]);
        assert!((effective_acceleration(&m).unwrap() - 16.0 / 7.0).abs() < 1e-12);
        assert!(make_uniform_mask(8, 16, 1, 0).unwrap().grid.iter().all(|&v| v == 1));
        assert!(make_uniform_mask(8, 16, 4, 17).is_err());
    }

    #[test]
    fn gaussian_budget_and_determinism() {
        for seed in 0..20 {
            let m = make_gaussian_mask(4, 64, 4, 8, seed).unwrap();
            assert_eq!(columns(&m).len(), 16);
            assert_eq!(m.grid[32], 1);
            assert_eq!(m, make_gaussian_mask(4, 64, 4, 8, seed).unwrap());
        }
        let distinct: std::collections::HashSet<Vec<u8>> =
            (0..20).map(|s| make_gaussian_mask(4, 64, 4, 8, s).unwrap().grid).collect();
        assert!(distinct.len() > 15);
        assert!(make_gaussian_mask(4, 64, 8, 10, 0).is_err());
    }

    #[test]
    fn radial_center_and_monotone_density() {
        let mut last = 0;
        for spokes in [4, 8, 16, 32] {
            let m = make_radial_mask(64, 64, spokes, 11).unwrap();
            assert_eq!(m.grid[32 * 64 + 32], 1);
            assert!(m.sampled() >= last);
            last = m.sampled();
        }
        let dense = make_radial_mask(64, 64, spokes_for_accel(64, 64, 1.0), 2).unwrap();
        assert!(dense.sampled() as f64 / 4096.0 > 0.9);
    }

    #[test]
    fn supercover_has_no_diagonal_gaps() {
        let m = make_radial_mask(32, 32, 1, 5).unwrap();
        // every marked pixel except the ends has a 4-connected marked neighbour
        let g = &m.grid;
        let on = |i: i64, j: i64| i >= 0 && j >= 0 && i < 32 && j < 32 && g[(i * 32 + j) as usize] == 1;
        let isolated = (0..32i64)
            .flat_map(|i| (0..32i64).map(move |j| (i, j)))
            .filter(|&(i, j)| on(i, j) && !(on(i - 1, j) || on(i + 1, j) || on(i, j - 1) || on(i, j + 1)))
            .count();
        assert_eq!(isolated, 0);
    }

    #[test]
    fn kt_uniform_tiles_columns() {
        let m = make_kt_mask(4, 8, 16, Pattern::KtUniform, 4, 2, 0).unwrap();
        let mut union = [0u8; 16];
        for f in 0..4 {
            for j in 0..16 {
                union[j] |= m.frame(f)[j];
            }
        }
        assert!(union.iter().all(|&v| v == 1));
        let single = make_kt_mask(1, 8, 16, Pattern::KtGaussian, 4, 2, 9).unwrap();
        assert_eq!(single.grid, make_gaussian_mask(8, 16, 4, 2, 9).unwrap().grid);
    }

    #[test]
    fn protocol_codes_round_trip() {
        let l = encode_protocol(Pattern::Gaussian, 8.0, Modality::Mapping).unwrap();
        assert_eq!(l.code, 114);
        assert_eq!(encode_protocol(Pattern::Uniform, 4.0, Modality::Cine).unwrap().code, 0);
        let bins: Vec<usize> = [4.0, 8.0, 10.0, 12.0, 16.0, 24.0].iter().map(|&a| accel_bin(a).unwrap()).collect();
        assert_eq!(bins, [0, 1, 2, 3, 4, 5]);
        let mut seen = vec![false; ProtocolLabel::COUNT];
        for p in Pattern::ALL {
            for b in 0..6 {
                for m in Modality::ALL {
                    let l = ProtocolLabel::new(p, b, m).unwrap();
                    assert!(!seen[l.code]);
                    seen[l.code] = true;
                    assert_eq!(ProtocolLabel::decode(l.code).unwrap(), l);
                }
            }
        }
        let err = "flair".parse::<Modality>().unwrap_err().to_string();
        assert!(err.contains("AXFLAIR") && err.contains("Cine"));
        assert_eq!("axflair".parse::<Modality>().unwrap(), Modality::AxFlair);
    }
}
