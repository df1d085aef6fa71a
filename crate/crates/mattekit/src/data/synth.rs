//! Synthetic compositing dataset: feathered ellipse unions over smooth
//! color gradients, with a corrupted binary mask standing in for an
//! imperfect segmentation. Fully determined by the seed; sample i draws
//! from an independent stream seeded with seed xor i.

use std::path::Path;

use crate::decoder::{AlphaGrid, Res};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};
use crate::regions::GuidanceMask;

use super::pnm;

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub alpha: AlphaGrid,
    pub mask: GuidanceMask,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_phi: f64,
    sin_phi: f64,
    feather: f64,
}

impl Ellipse {
    /// Approximate signed distance in pixels (negative inside).
    fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos_phi + dy * self.sin_phi) / self.a;
        let v = (-dx * self.sin_phi + dy * self.cos_phi) / self.b;
        ((u * u + v * v).sqrt() - 1.0) * self.a.min(self.b)
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth per-channel gradient field plus low-amplitude pixel noise.
fn gradient_layer(size: usize, rng: &mut SeededRng) -> Tensor {
    let mut data = vec![0.0; 3 * size * size];
    for c in 0..3 {
        let base = rng.uniform(0.1, 0.9);
        let gx = rng.uniform(-0.4, 0.4);
        let gy = rng.uniform(-0.4, 0.4);
        for i in 0..size {
            for j in 0..size {
                let v = base
                    + gx * (j as f64 / size as f64 - 0.5)
                    + gy * (i as f64 / size as f64 - 0.5)
                    + rng.uniform(-0.02, 0.02);
                data[(c * size + i) * size + j] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], data)
}

fn chessboard_morph(bits: &[u8], size: usize, radius: usize, dilate: bool) -> Vec<u8> {
    if radius == 0 {
        return bits.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![0u8; size * size];
    for i in 0..size as isize {
        for j in 0..size as isize {
            let mut acc = if dilate { 0u8 } else { 1u8 };
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i + di, j + dj);
                    if y < 0 || y >= size as isize || x < 0 || x >= size as isize {
                        continue;
                    }
                    let v = bits[(y * size as isize + x) as usize];
                    if dilate {
                        acc = acc.max(v);
                    } else {
                        acc = acc.min(v);
                    }
                }
            }
            out[(i * size as isize + j) as usize] = acc;
        }
    }
    out
}

fn boundary_pixels(bits: &[u8], size: usize) -> Vec<bool> {
    let mut out = vec![false; size * size];
    for i in 0..size as isize {
        for j in 0..size as isize {
            let own = bits[(i * size as isize + j) as usize];
            'scan: for di in -1..=1 {
                for dj in -1..=1 {
                    let (y, x) = (i + di, j + dj);
                    if y < 0 || y >= size as isize || x < 0 || x >= size as isize {
                        continue;
                    }
                    if bits[(y * size as isize + x) as usize] != own {
                        out[(i * size as isize + j) as usize] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    out
}

/// Generate one sample plus its foreground/background layers (the layers
/// let tests re-check the compositing identity).
pub(crate) fn generate_one_with_layers(
    size: usize,
    id: String,
    rng: &mut SeededRng,
) -> (Sample, Tensor, Tensor) {
    let s = size as f64;
    let n_ellipses = 1 + rng.below(3);
    let ellipses: Vec<Ellipse> = (0..n_ellipses)
        .map(|_| {
            let cx = rng.uniform(0.25, 0.75) * s;
            let cy = rng.uniform(0.25, 0.75) * s;
            let a = rng.uniform(0.10, 0.28) * s;
            let b = rng.uniform(0.10, 0.28) * s;
            let phi = rng.uniform(0.0, std::f64::consts::PI);
            Ellipse {
                cx,
                cy,
                a,
                b,
                cos_phi: phi.cos(),
                sin_phi: phi.sin(),
                feather: rng.uniform(1.0, 4.0),
            }
        })
        .collect();

    let mut alpha = vec![0.0f64; size * size];
    for i in 0..size {
        for j in 0..size {
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let mut best = 0.0f64;
            for e in &ellipses {
                let d = e.signed_distance(x, y);
                let v = smoothstep(0.5 - d / e.feather);
                best = best.max(v);
            }
            alpha[i * size + j] = best;
        }
    }

    let fg = gradient_layer(size, rng);
    let bg = gradient_layer(size, rng);
    let mut image = vec![0.0f64; 3 * size * size];
    for c in 0..3 {
        for px in 0..size * size {
            let a = alpha[px];
            image[c * size * size + px] =
                a * fg.data()[c * size * size + px] + (1.0 - a) * bg.data()[c * size * size + px];
        }
    }

    // segmentation-style corruption of the thresholded alpha
    let bits: Vec<u8> = alpha.iter().map(|&a| u8::from(a >= 0.5)).collect();
    let dilate = rng.below(2) == 0;
    let radius = rng.below(4);
    let mut mask_bits = chessboard_morph(&bits, size, radius, dilate);
    let boundary = boundary_pixels(&mask_bits, size);
    for (idx, is_boundary) in boundary.iter().enumerate() {
        if *is_boundary && rng.bernoulli(0.1) {
            mask_bits[idx] = 1 - mask_bits[idx];
        }
    }

    let sample = Sample {
        id,
        image: Tensor::from_parts(vec![3, size, size], image),
        alpha: AlphaGrid::new(size, size, alpha, Res::Full).expect("alpha in range"),
        mask: GuidanceMask::new(size, size, mask_bits).expect("binary mask"),
    };
    (sample, fg, bg)
}

/// Generate `count` samples of `size` x `size`, fully determined by `seed`.
pub fn generate(count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::domain("count must be >= 1".to_string()));
    }
    if size % 8 != 0 || size == 0 {
        return Err(Error::domain(format!("size {size} must be divisible by 8")));
    }
    let base = SeededRng::new(seed);
    Ok((0..count)
        .map(|i| {
            let mut rng = base.derive(i as u64);
            generate_one_with_layers(size, format!("s{i:04}"), &mut rng).0
        })
        .collect())
}

/// Write samples as `<id>_img.ppm`, `<id>_alpha.pgm`, `<id>_mask.pgm` plus a
/// `manifest.txt` of ids.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for s in samples {
        pnm::pnm_write(&dir.join(format!("{}_img.ppm", s.id)), &s.image)?;
        pnm::pnm_write(&dir.join(format!("{}_alpha.pgm", s.id)), &s.alpha.to_tensor())?;
        pnm::pnm_write(&dir.join(format!("{}_mask.pgm", s.id)), &s.mask.to_tensor())?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Generate and persist in one call; returns the in-memory samples.
pub fn synth_generate(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    let samples = generate(count, size, seed)?;
    write_dataset(dir, &samples)?;
    Ok(samples)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// Load one sample back from disk (alpha arrives 8-bit quantized).
pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let image = pnm::pnm_read(&dir.join(format!("{id}_img.ppm")))?;
    let alpha_t = pnm::pnm_read(&dir.join(format!("{id}_alpha.pgm")))?;
    let mask_t = pnm::pnm_read(&dir.join(format!("{id}_mask.pgm")))?;
    let alpha = AlphaGrid::from_tensor_clamped(&alpha_t, Res::Full)?;
    let bits = mask_t.data().iter().map(|&v| u8::from(v >= 0.5)).collect();
    let mask = GuidanceMask::new(mask_t.dims()[0], mask_t.dims()[1], bits)?;
    Ok(Sample {
        id: id.to_string(),
        image,
        alpha,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(3, 32, 99).unwrap();
        let b = generate(3, 32, 99).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert!(x.image.bit_eq(&y.image));
            assert!(x.alpha.bit_eq(&y.alpha));
            assert_eq!(x.mask.bits(), y.mask.bits());
        }
        let c = generate(3, 32, 100).unwrap();
        assert!(!a[0].image.bit_eq(&c[0].image));
    }

    #[test]
    fn written_files_are_bitwise_reproducible() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        synth_generate(dir1.path(), 2, 32, 5).unwrap();
        synth_generate(dir2.path(), 2, 32, 5).unwrap();
        for name in [
            "manifest.txt",
            "s0000_img.ppm",
            "s0000_alpha.pgm",
            "s0000_mask.pgm",
            "s0001_img.ppm",
        ] {
            let a = std::fs::read(dir1.path().join(name)).unwrap();
            let b = std::fs::read(dir2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }

    #[test]
    fn compositing_identity_holds() {
        let mut rng = SeededRng::new(17);
        let (sample, fg, _) = generate_one_with_layers(32, "t".into(), &mut rng);
        let n = 32 * 32;
        let mut saw_opaque = false;
        for c in 0..3 {
            for px in 0..n {
                let a = sample.alpha.data()[px];
                if a == 1.0 {
                    saw_opaque = true;
                    assert_eq!(sample.image.data()[c * n + px], fg.data()[c * n + px]);
                }
            }
        }
        assert!(saw_opaque);
        assert!(sample
            .image
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn every_sample_has_opaque_and_transparent_pixels() {
        for s in generate(20, 32, 7).unwrap() {
            assert!(s.alpha.data().iter().any(|&a| a == 1.0), "{}", s.id);
            assert!(s.alpha.data().iter().any(|&a| a == 0.0), "{}", s.id);
        }
    }

    #[test]
    fn mean_alpha_is_plausible_over_many_samples() {
        let samples = generate(100, 32, 11).unwrap();
        let mean: f64 = samples
            .iter()
            .map(|s| s.alpha.data().iter().sum::<f64>() / (32.0 * 32.0))
            .sum::<f64>()
            / 100.0;
        assert!(mean > 0.05 && mean < 0.7, "mean alpha {mean}");
    }

    #[test]
    fn mask_corruption_stays_near_level_set() {
        for s in generate(12, 32, 23).unwrap() {
            let reference: Vec<u8> = s
                .alpha
                .data()
                .iter()
                .map(|&a| u8::from(a >= 0.5))
                .collect();
            // level-set pixels: any pixel with an 8-neighbor of opposite value
            let level = boundary_pixels(&reference, 32);
            for i in 0..32usize {
                for j in 0..32usize {
                    if s.mask.get(i, j) != reference[i * 32 + j] {
                        // chessboard distance to the nearest level-set pixel
                        let mut best = usize::MAX;
                        for y in 0..32usize {
                            for x in 0..32usize {
                                if level[y * 32 + x] {
                                    let d = (y as isize - i as isize)
                                        .abs()
                                        .max((x as isize - j as isize).abs())
                                        as usize;
                                    best = best.min(d);
                                }
                            }
                        }
                        assert!(best <= 4, "changed pixel ({i},{j}) at distance {best}");
                    }
                }
            }
        }
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_generate(dir.path(), 2, 32, 3).unwrap();
        let ids = read_manifest(dir.path()).unwrap();
        assert_eq!(ids, vec!["s0000", "s0001"]);
        let loaded = load_sample(dir.path(), "s0000").unwrap();
        assert_eq!(loaded.image.dims(), &[3, 32, 32]);
        assert_eq!(loaded.mask.bits(), samples[0].mask.bits());
        for (a, b) in loaded.alpha.data().iter().zip(samples[0].alpha.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn size_must_divide_by_eight() {
        assert!(generate(1, 30, 0).is_err());
        assert!(generate(0, 32, 0).is_err());
    }
}
