//! End-to-end wiring: model construction, the training loop (decoder SGD
//! followed by a short refiner-fitting phase), and full-resolution
//! refinement combining iterative decoding with sparse detail recovery.

use crate::data::Sample;
use crate::decoder::{self, AlphaGrid, Res, TrainSample};
use crate::encoder;
use crate::error::Result;
use crate::numerics::{bilinear_resize, ParamSet, SeededRng};
use crate::scheduler::TransitionSchedule;
use crate::sparse::{self, build_sparsity_map};

/// All parameters of encoder, decoder and refiner for a given pipeline size.
pub fn init_model_params(size: usize, seed: u64) -> Result<ParamSet> {
    let mut rng = SeededRng::new(seed);
    let mut ps = ParamSet::new();
    encoder::init_encoder_params(&mut ps, size, &mut rng)?;
    decoder::init_decoder_params(&mut ps, &mut rng)?;
    sparse::init_sparse_params(&mut ps, &mut rng)?;
    Ok(ps)
}

/// Pipeline size implied by a parameter set (from the position-embedding
/// token count).
pub fn model_size(ps: &ParamSet) -> Result<usize> {
    let rows = ps.value("enc.pos").dims()[0];
    let tokens = rows - 1;
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens {
        return Err(crate::error::Error::shape(format!(
            "non-square token count {tokens}"
        )));
    }
    Ok(side * 4)
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub lambda_c: f64,
    /// Refiner-fitting steps after the decoder phase (0 disables).
    pub sparse_steps: usize,
    pub sparse_lr: f64,
    /// Threshold used to derive refiner training maps.
    pub tau: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: decoder::DEFAULT_LR,
            lambda_c: decoder::DEFAULT_LAMBDA_C,
            sparse_steps: 100,
            sparse_lr: 0.05,
            tau: sparse::DEFAULT_TAU,
        }
    }
}

/// Train the decoder path over the samples (round-robin), then fit the
/// sparse refiner against full-resolution ground truth on cached inference
/// outputs. `log` receives (phase, step, loss) lines.
pub fn train_model(
    samples: &[Sample],
    ps: &mut ParamSet,
    schedule: &TransitionSchedule,
    opts: &TrainOptions,
    rng: &mut SeededRng,
    mut log: impl FnMut(&str, usize, f64),
) -> Result<()> {
    for step in 0..opts.steps {
        let sample = &samples[step % samples.len()];
        let loss = decoder::train_step(
            &TrainSample {
                image: &sample.image,
                alpha_gt: &sample.alpha,
                coarse_mask: &sample.mask,
            },
            schedule,
            ps,
            rng,
            opts.lr,
            opts.lambda_c,
        )?;
        log("train", step, loss);
    }

    if opts.sparse_steps == 0 {
        return Ok(());
    }
    // the decoder is frozen now, so one inference per sample provides the
    // refiner's inputs for the entire phase
    let mut cached = Vec::with_capacity(samples.len());
    for sample in samples {
        let outcome = decoder::infer(&sample.image, &sample.mask, schedule, ps)?;
        let (h, w) = (sample.image.dims()[1], sample.image.dims()[2]);
        let err_full = bilinear_resize(&outcome.error.to_tensor(), h, w)?;
        let err_full = AlphaGrid::from_tensor_clamped(&err_full, Res::Full)?;
        let map = build_sparsity_map(&err_full, opts.tau)?;
        cached.push((outcome.m0, map));
    }
    for step in 0..opts.sparse_steps {
        let i = step % samples.len();
        let sample = &samples[i];
        let (m0, map) = &cached[i];
        let loss = sparse::sparse_train_step(
            m0,
            &sample.image,
            map,
            &sample.alpha,
            ps,
            opts.sparse_lr,
        )?;
        log("sparse", step, loss);
    }
    Ok(())
}

pub struct RefineResult {
    /// Final full-resolution matte.
    pub alpha: AlphaGrid,
    /// Quarter-resolution refined matte m_0.
    pub m0: AlphaGrid,
    /// Predicted-error map upsampled to full resolution.
    pub error_full: AlphaGrid,
    pub decode_calls: usize,
}

/// Full pipeline: iterative decoding, then either sparse detail recovery or
/// a plain bilinear upsample of the quarter-resolution matte.
pub fn refine(
    image: &crate::numerics::Tensor,
    mask: &crate::regions::GuidanceMask,
    ps: &ParamSet,
    schedule: &TransitionSchedule,
    tau: f64,
    use_sparse: bool,
) -> Result<RefineResult> {
    let outcome = decoder::infer(image, mask, schedule, ps)?;
    let (h, w) = (image.dims()[1], image.dims()[2]);
    let err_t = bilinear_resize(&outcome.error.to_tensor(), h, w)?;
    let error_full = AlphaGrid::from_tensor_clamped(&err_t, Res::Full)?;
    let alpha = if use_sparse {
        let map = build_sparsity_map(&error_full, tau)?;
        sparse::sparse_refine(&outcome.m0, image, &map, ps)?
    } else {
        let up = bilinear_resize(&outcome.m0.to_tensor(), h, w)?;
        AlphaGrid::from_tensor_clamped(&up, Res::Full)?
    };
    Ok(RefineResult {
        alpha,
        m0: outcome.m0,
        error_full,
        decode_calls: outcome.decode_calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;
    use crate::scheduler::make_schedule;

    #[test]
    fn model_size_roundtrips() {
        for size in [16, 32, 64] {
            let ps = init_model_params(size, 1).unwrap();
            assert_eq!(model_size(&ps).unwrap(), size);
        }
    }

    #[test]
    fn short_training_run_descends_and_refines() {
        let samples = generate(2, 16, 42).unwrap();
        let mut ps = init_model_params(16, 7).unwrap();
        let schedule = make_schedule(3).unwrap();
        let mut rng = SeededRng::new(8);
        let mut first = None;
        let mut last = 0.0;
        train_model(
            &samples,
            &mut ps,
            &schedule,
            &TrainOptions {
                steps: 60,
                sparse_steps: 10,
                ..TrainOptions::default()
            },
            &mut rng,
            |phase, _, loss| {
                if phase == "train" {
                    first.get_or_insert(loss);
                    last = loss;
                }
            },
        )
        .unwrap();
        assert!(last < first.unwrap());

        let out = refine(
            &samples[0].image,
            &samples[0].mask,
            &ps,
            &schedule,
            0.05,
            true,
        )
        .unwrap();
        assert_eq!(out.alpha.height(), 16);
        assert_eq!(out.decode_calls, 3);

        // no-sparse variant is the plain upsample of m0
        let plain = refine(
            &samples[0].image,
            &samples[0].mask,
            &ps,
            &schedule,
            0.05,
            false,
        )
        .unwrap();
        let up = bilinear_resize(&plain.m0.to_tensor(), 16, 16).unwrap();
        for (a, b) in plain.alpha.data().iter().zip(up.data()) {
            assert_eq!(*a, b.clamp(0.0, 1.0));
        }
    }
}
