//! Trimap-like guidance built from a binary mask: a three-way region
//! partition (foreground / background / edge band) and the attention
//! weights derived from it.
//!
//! The edge band is defined by chessboard distance: a cell is EDGE iff some
//! cell of opposite mask value lies within `band_radius` (ties at the exact
//! radius are EDGE). This makes the edge set symmetric under mask
//! complement.

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, Tensor};

/// Default edge-band radius at encoder (half) resolution.
pub const ENCODER_BAND_RADIUS: usize = 2;
/// Default edge-band radius at decoder (quarter) resolution.
pub const DECODER_BAND_RADIUS: usize = 1;

pub const WEIGHT_EDGE: f64 = 1.0;
pub const WEIGHT_FOREGROUND: f64 = 2.0;
pub const WEIGHT_BACKGROUND: f64 = 0.5;

/// Strictly binary mask grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuidanceMask {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl GuidanceMask {
    pub fn new(h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape("empty mask grid".to_string()));
        }
        if bits.len() != h * w {
            return Err(Error::shape(format!(
                "mask {h}x{w} expects {} cells, got {}",
                h * w,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::domain("mask values must be 0 or 1".to_string()));
        }
        Ok(Self { h, w, bits })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.w + j]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// View as a 0/1 float grid.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.h, self.w],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLabel {
    Background,
    Foreground,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    h: usize,
    w: usize,
    labels: Vec<RegionLabel>,
}

impl RegionMap {
    pub fn new(h: usize, w: usize, labels: Vec<RegionLabel>) -> Result<Self> {
        if h == 0 || w == 0 || labels.len() != h * w {
            return Err(Error::shape("bad region map dims".to_string()));
        }
        Ok(Self { h, w, labels })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, i: usize, j: usize) -> RegionLabel {
        self.labels[i * self.w + j]
    }

    pub fn labels(&self) -> &[RegionLabel] {
        &self.labels
    }
}

/// Per-cell attention weights in {0.5, 1.0, 2.0}.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionWeights {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl RegionWeights {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Partition a binary mask into foreground / background / edge band.
///
/// A cell is EDGE iff its chessboard distance to the nearest cell of the
/// opposite mask value is <= band_radius.
pub fn build_region_map(mask: &GuidanceMask, band_radius: usize) -> Result<RegionMap> {
    if band_radius == 0 {
        return Err(Error::domain("band_radius must be >= 1".to_string()));
    }
    let (h, w) = (mask.height(), mask.width());
    let r = band_radius as isize;
    let mut labels = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let own = mask.get(i, j);
            let mut edge = false;
            'scan: for di in -r..=r {
                let y = i as isize + di;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dj in -r..=r {
                    let x = j as isize + dj;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    if mask.get(y as usize, x as usize) != own {
                        edge = true;
                        break 'scan;
                    }
                }
            }
            labels.push(if edge {
                RegionLabel::Edge
            } else if own == 1 {
                RegionLabel::Foreground
            } else {
                RegionLabel::Background
            });
        }
    }
    RegionMap::new(h, w, labels)
}

/// Elementwise label-to-weight substitution: EDGE -> 1, FOREGROUND -> 2,
/// BACKGROUND -> 0.5.
pub fn region_weights(map: &RegionMap) -> RegionWeights {
    RegionWeights {
        h: map.height(),
        w: map.width(),
        values: map
            .labels()
            .iter()
            .map(|l| match l {
                RegionLabel::Edge => WEIGHT_EDGE,
                RegionLabel::Foreground => WEIGHT_FOREGROUND,
                RegionLabel::Background => WEIGHT_BACKGROUND,
            })
            .collect(),
    }
}

/// Shrink a binary mask by an integer factor: bilinear-resize the 0/1 field,
/// then threshold at >= 0.5.
pub fn downsample_mask(mask: &GuidanceMask, factor: usize) -> Result<GuidanceMask> {
    if factor < 2 {
        return Err(Error::domain("downsample factor must be >= 2".to_string()));
    }
    let (h, w) = (mask.height(), mask.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "mask {h}x{w} not divisible by factor {factor}"
        )));
    }
    let resized = bilinear_resize(&mask.to_tensor(), h / factor, w / factor)?;
    let bits = resized
        .data()
        .iter()
        .map(|&v| if v >= 0.5 { 1u8 } else { 0u8 })
        .collect();
    GuidanceMask::new(h / factor, w / factor, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_of(rows: &[&[u8]]) -> GuidanceMask {
        let h = rows.len();
        let w = rows[0].len();
        GuidanceMask::new(h, w, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    /// Brute-force chessboard distance to the nearest opposite-valued cell.
    fn min_opposite_distance(mask: &GuidanceMask, i: usize, j: usize) -> Option<usize> {
        let mut best = None;
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(y, x) != mask.get(i, j) {
                    let d = (y as isize - i as isize)
                        .abs()
                        .max((x as isize - j as isize).abs()) as usize;
                    best = Some(best.map_or(d, |b: usize| b.min(d)));
                }
            }
        }
        best
    }

    #[test]
    fn uniform_masks_have_no_edge() {
        let ones = GuidanceMask::new(4, 4, vec![1; 16]).unwrap();
        let map = build_region_map(&ones, 3).unwrap();
        assert!(map.labels().iter().all(|&l| l == RegionLabel::Foreground));

        let zeros = GuidanceMask::new(4, 4, vec![0; 16]).unwrap();
        let map = build_region_map(&zeros, 1).unwrap();
        assert!(map.labels().iter().all(|&l| l == RegionLabel::Background));
    }

    #[test]
    fn vertical_split_band_matches_distance_oracle() {
        // left two columns 1, radius 1: columns 1,2 are EDGE, 0 FG, 3 BG
        let mask = mask_of(&[
            &[1, 1, 0, 0],
            &[1, 1, 0, 0],
            &[1, 1, 0, 0],
            &[1, 1, 0, 0],
        ]);
        let map = build_region_map(&mask, 1).unwrap();
        for i in 0..4 {
            assert_eq!(map.get(i, 0), RegionLabel::Foreground);
            assert_eq!(map.get(i, 1), RegionLabel::Edge);
            assert_eq!(map.get(i, 2), RegionLabel::Edge);
            assert_eq!(map.get(i, 3), RegionLabel::Background);
        }
        // cross-check against the brute-force distance transform
        for i in 0..4 {
            for j in 0..4 {
                let expect_edge = min_opposite_distance(&mask, i, j).map_or(false, |d| d <= 1);
                assert_eq!(map.get(i, j) == RegionLabel::Edge, expect_edge);
            }
        }
    }

    #[test]
    fn rejects_empty_and_nonbinary() {
        assert!(GuidanceMask::new(0, 4, vec![]).is_err());
        assert!(GuidanceMask::new(1, 2, vec![0, 2]).is_err());
        let m = GuidanceMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert!(build_region_map(&m, 0).is_err());
    }

    #[test]
    fn weights_substitution() {
        let map = RegionMap::new(
            2,
            2,
            vec![
                RegionLabel::Foreground,
                RegionLabel::Background,
                RegionLabel::Edge,
                RegionLabel::Foreground,
            ],
        )
        .unwrap();
        let w = region_weights(&map);
        assert_eq!(w.values(), &[2.0, 0.5, 1.0, 2.0]);

        let all_edge = RegionMap::new(1, 3, vec![RegionLabel::Edge; 3]).unwrap();
        assert_eq!(region_weights(&all_edge).values(), &[1.0, 1.0, 1.0]);
        let all_fg = RegionMap::new(1, 3, vec![RegionLabel::Foreground; 3]).unwrap();
        assert_eq!(region_weights(&all_fg).values(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn downsample_uniform_and_checkerboard() {
        let ones = GuidanceMask::new(8, 8, vec![1; 64]).unwrap();
        let small = downsample_mask(&ones, 2).unwrap();
        assert!(small.bits().iter().all(|&b| b == 1));

        let zeros = GuidanceMask::new(8, 8, vec![0; 64]).unwrap();
        assert!(downsample_mask(&zeros, 2).unwrap().bits().iter().all(|&b| b == 0));

        // checkerboard averages to 0.5 which thresholds up
        let mut bits = vec![0u8; 16];
        for i in 0..4 {
            for j in 0..4 {
                bits[i * 4 + j] = ((i + j) % 2) as u8;
            }
        }
        let cb = GuidanceMask::new(4, 4, bits).unwrap();
        let out = downsample_mask(&cb, 2).unwrap();
        assert!(out.bits().iter().all(|&b| b == 1));
    }

    #[test]
    fn downsample_requires_divisible_dims() {
        let m = GuidanceMask::new(6, 6, vec![0; 36]).unwrap();
        assert!(downsample_mask(&m, 4).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_complement_symmetry(
            bits in proptest::collection::vec(0u8..=1, 36),
            radius in 1usize..=3,
        ) {
            let mask = GuidanceMask::new(6, 6, bits.clone()).unwrap();
            let map = build_region_map(&mask, radius).unwrap();

            // complementing the mask leaves the EDGE set unchanged
            let flipped = GuidanceMask::new(6, 6, bits.iter().map(|b| 1 - b).collect()).unwrap();
            let flipped_map = build_region_map(&flipped, radius).unwrap();
            for (a, b) in map.labels().iter().zip(flipped_map.labels()) {
                prop_assert_eq!((*a == RegionLabel::Edge), (*b == RegionLabel::Edge));
            }

            // weights carry only the three permitted values
            let w = region_weights(&map);
            for v in w.values() {
                prop_assert!(*v == 0.5 || *v == 1.0 || *v == 2.0);
            }

            // every EDGE call matches the brute-force distance rule
            for i in 0..6 {
                for j in 0..6 {
                    let expect = min_opposite_distance(&mask, i, j).map_or(false, |d| d <= radius);
                    prop_assert_eq!(map.get(i, j) == RegionLabel::Edge, expect);
                }
            }
        }
    }
}
