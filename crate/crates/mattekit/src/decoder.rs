//! Iterative alpha/confidence prediction: the quarter-resolution decode
//! network, its losses, single-sample SGD training steps, and the reverse
//! refinement loop that walks a coarse mask to a fine matte.

use crate::encoder::{self, FeaturePyramid, EMBED_DIM, STEM_CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParamSet, SeededRng, Tape, Tensor};
use crate::regions::{build_region_map, downsample_mask, GuidanceMask, ENCODER_BAND_RADIUS};
use crate::scheduler::{
    compose_mask, forward_marginal_sample, inference_transfer, reverse_flip_counts, StateField,
    TransitionSchedule,
};

pub const TIME_CHANNELS: usize = 8;
pub const TRUNK_WIDTH: usize = 32;
pub const IN_CHANNELS: usize = EMBED_DIM + STEM_CHANNELS + 1 + TIME_CHANNELS;
pub const DEFAULT_LAMBDA_C: f64 = 0.25;
pub const DEFAULT_LR: f64 = 1e-2;
pub const DEFAULT_STEPS: usize = 6;

/// Resolution tag for alpha grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Res {
    Full,
    Quarter,
}

/// 2D field of opacity values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaGrid {
    h: usize,
    w: usize,
    data: Vec<f64>,
    res: Res,
}

impl AlphaGrid {
    pub fn new(h: usize, w: usize, data: Vec<f64>, res: Res) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return Err(Error::shape(format!(
                "alpha grid {h}x{w} expects {} values, got {}",
                h * w,
                data.len()
            )));
        }
        if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("alpha values must lie in [0,1]".to_string()));
        }
        Ok(Self { h, w, data, res })
    }

    pub fn constant(h: usize, w: usize, v: f64, res: Res) -> Self {
        assert!((0.0..=1.0).contains(&v));
        Self {
            h,
            w,
            data: vec![v; h * w],
            res,
        }
    }

    /// Build from a rank-2 or 1xHxW tensor, clamping stray values into [0,1].
    pub fn from_tensor_clamped(t: &Tensor, res: Res) -> Result<Self> {
        let (h, w) = match t.dims() {
            [h, w] => (*h, *w),
            [1, h, w] => (*h, *w),
            d => {
                return Err(Error::shape(format!(
                    "alpha grid needs HxW or 1xHxW tensor, got {d:?}"
                )))
            }
        };
        let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        AlphaGrid::new(h, w, data, res)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn res(&self) -> Res {
        self.res
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.w + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.h, self.w], self.data.clone())
    }

    pub fn to_channel_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.h, self.w], self.data.clone())
    }

    pub fn bit_eq(&self, other: &AlphaGrid) -> bool {
        self.h == other.h
            && self.w == other.w
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Alpha and predicted-error maps at decoder resolution.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub alpha_pred: AlphaGrid,
    pub error_pred: AlphaGrid,
}

/// Register the decode-network parameters.
pub fn init_decoder_params(ps: &mut ParamSet, rng: &mut SeededRng) -> Result<()> {
    ps.add(
        "dec.proj.k",
        rng.normal_tensor(
            &[TRUNK_WIDTH, IN_CHANNELS, 1, 1],
            (2.0 / IN_CHANNELS as f64).sqrt(),
        ),
    )?;
    ps.add("dec.proj.b", Tensor::zeros(&[TRUNK_WIDTH]))?;
    let conv_std = (2.0 / (TRUNK_WIDTH as f64 * 9.0)).sqrt();
    for i in 0..3 {
        ps.add(
            format!("dec.c{i}.k"),
            rng.normal_tensor(&[TRUNK_WIDTH, TRUNK_WIDTH, 3, 3], conv_std),
        )?;
        ps.add(format!("dec.c{i}.b"), Tensor::zeros(&[TRUNK_WIDTH]))?;
    }
    for head in ["alpha", "conf"] {
        ps.add(
            format!("dec.{head}.k"),
            rng.normal_tensor(&[1, TRUNK_WIDTH, 1, 1], 0.2),
        )?;
        ps.add(format!("dec.{head}.b"), Tensor::zeros(&[1]))?;
    }
    Ok(())
}

/// The step scalar t/T encoded as 8 sinusoidal channels:
/// sin(s*2^k), cos(s*2^k) for k = 0..4. Injective over {0..T}/T.
pub fn time_embedding(t: usize, t_max: usize) -> [f64; TIME_CHANNELS] {
    let s = t as f64 / t_max as f64;
    let mut out = [0.0; TIME_CHANNELS];
    for k in 0..4 {
        let angle = s * (1u32 << k) as f64;
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    out
}

/// Decode network forward on an existing tape. `half` and `quarter` are
/// feature nodes (leaves at inference, encoder outputs during training).
pub(crate) fn decode_on_tape(
    tape: &mut Tape,
    ps: &ParamSet,
    half: NodeId,
    quarter: NodeId,
    m_t: &AlphaGrid,
    t: usize,
    t_max: usize,
) -> Result<(NodeId, NodeId)> {
    if t_max == 0 || t > t_max {
        return Err(Error::domain(format!("step {t} outside 0..={t_max}")));
    }
    let (h4, w4) = {
        let d = tape.value(quarter).dims();
        (d[1], d[2])
    };
    if m_t.height() != h4 || m_t.width() != w4 {
        return Err(Error::shape(format!(
            "mask {}x{} does not match decoder resolution {h4}x{w4}",
            m_t.height(),
            m_t.width()
        )));
    }

    let pooled = tape.avg_pool2(half);
    let mask = tape.leaf(m_t.to_channel_tensor());
    let emb = time_embedding(t, t_max);
    let mut time_data = Vec::with_capacity(TIME_CHANNELS * h4 * w4);
    for v in emb {
        time_data.extend(std::iter::repeat(v).take(h4 * w4));
    }
    let time = tape.leaf(Tensor::from_parts(vec![TIME_CHANNELS, h4, w4], time_data));

    let stack = tape.concat_channels(&[quarter, pooled, mask, time]);
    let pk = tape.param(ps, "dec.proj.k");
    let pb = tape.param(ps, "dec.proj.b");
    let projected = tape.conv2d(stack, pk, pb);
    let mut x = tape.gelu(projected);
    for i in 0..3 {
        let k = tape.param(ps, &format!("dec.c{i}.k"));
        let b = tape.param(ps, &format!("dec.c{i}.b"));
        let c = tape.conv2d(x, k, b);
        let a = tape.gelu(c);
        x = tape.add(x, a);
    }
    let ak = tape.param(ps, "dec.alpha.k");
    let ab = tape.param(ps, "dec.alpha.b");
    let alpha_logit = tape.conv2d(x, ak, ab);
    let alpha = tape.sigmoid(alpha_logit);
    let ck = tape.param(ps, "dec.conf.k");
    let cb = tape.param(ps, "dec.conf.b");
    let conf_logit = tape.conv2d(x, ck, cb);
    let conf = tape.sigmoid(conf_logit);
    Ok((alpha, conf))
}

/// One deterministic decode of (alpha, predicted error) from features, the
/// current mask and the step index.
pub fn decode_step(
    features: &FeaturePyramid,
    m_t: &AlphaGrid,
    t: usize,
    t_max: usize,
    ps: &ParamSet,
) -> Result<DecodeOutput> {
    let qd = features.quarter_res.dims();
    let hd = features.half_res.dims();
    if qd.len() != 3 || hd.len() != 3 || hd[1] != 2 * qd[1] || hd[2] != 2 * qd[2] {
        return Err(Error::shape(format!(
            "inconsistent pyramid: half {hd:?} vs quarter {qd:?}"
        )));
    }
    let mut tape = Tape::new();
    let half = tape.leaf(features.half_res.clone());
    let quarter = tape.leaf(features.quarter_res.clone());
    let (alpha, conf) = decode_on_tape(&mut tape, ps, half, quarter, m_t, t, t_max)?;
    Ok(DecodeOutput {
        alpha_pred: AlphaGrid::from_tensor_clamped(tape.value(alpha), Res::Quarter)?,
        error_pred: AlphaGrid::from_tensor_clamped(tape.value(conf), Res::Quarter)?,
    })
}

/// Mean absolute difference between prediction and ground truth.
pub fn alpha_loss(alpha_pred: &AlphaGrid, alpha_gt: &AlphaGrid) -> Result<f64> {
    if alpha_pred.height() != alpha_gt.height() || alpha_pred.width() != alpha_gt.width() {
        return Err(Error::shape("alpha_loss dims differ".to_string()));
    }
    let n = alpha_pred.data().len() as f64;
    Ok(alpha_pred
        .data()
        .iter()
        .zip(alpha_gt.data())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n)
}

/// Mean |c - |alpha_pred - alpha_gt||: trains the error head toward the
/// actual per-pixel alpha error.
pub fn confidence_loss(
    error_pred: &AlphaGrid,
    alpha_pred: &AlphaGrid,
    alpha_gt: &AlphaGrid,
) -> Result<f64> {
    let same = |a: &AlphaGrid, b: &AlphaGrid| a.height() == b.height() && a.width() == b.width();
    if !same(error_pred, alpha_pred) || !same(alpha_pred, alpha_gt) {
        return Err(Error::shape("confidence_loss dims differ".to_string()));
    }
    let n = error_pred.data().len() as f64;
    Ok(error_pred
        .data()
        .iter()
        .zip(alpha_pred.data().iter().zip(alpha_gt.data()))
        .map(|(c, (p, g))| (c - (p - g).abs()).abs())
        .sum::<f64>()
        / n)
}

/// One training example at full resolution.
pub struct TrainSample<'a> {
    pub image: &'a Tensor,
    pub alpha_gt: &'a AlphaGrid,
    pub coarse_mask: &'a GuidanceMask,
}

pub(crate) struct PreppedSample {
    pub image_half: Tensor,
    pub key_weights: Vec<f64>,
    pub m_fine: AlphaGrid,
    pub m_coarse: AlphaGrid,
}

pub(crate) fn prep_sample(
    image: &Tensor,
    alpha_gt: Option<&AlphaGrid>,
    mask: &GuidanceMask,
) -> Result<PreppedSample> {
    if image.rank() != 3 || image.dims()[0] != 3 {
        return Err(Error::shape(format!("image must be 3xHxW, got {:?}", image.dims())));
    }
    let (h, w) = (image.dims()[1], image.dims()[2]);
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::shape(format!("image {h}x{w} must be divisible by 8")));
    }
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape("mask does not match image".to_string()));
    }
    if let Some(a) = alpha_gt {
        if a.height() != h || a.width() != w {
            return Err(Error::shape("alpha_gt does not match image".to_string()));
        }
    }
    let image_half = crate::numerics::bilinear_resize(image, h / 2, w / 2)?;
    let mask_half = downsample_mask(mask, 2)?;
    let region = build_region_map(&mask_half, ENCODER_BAND_RADIUS)?;
    let key_weights = encoder::patch_key_weights(&region)?;
    let m_fine = match alpha_gt {
        Some(a) => {
            let resized = crate::numerics::bilinear_resize(&a.to_tensor(), h / 4, w / 4)?;
            AlphaGrid::from_tensor_clamped(&resized, Res::Quarter)?
        }
        // placeholder; inference never reads it
        None => AlphaGrid::constant(h / 4, w / 4, 0.0, Res::Quarter),
    };
    let mask_quarter = downsample_mask(mask, 4)?;
    let m_coarse = AlphaGrid::new(
        h / 4,
        w / 4,
        mask_quarter.bits().iter().map(|&b| b as f64).collect(),
        Res::Quarter,
    )?;
    Ok(PreppedSample {
        image_half,
        key_weights,
        m_fine,
        m_coarse,
    })
}

/// One SGD step per the training procedure: sample t uniformly, corrupt the
/// fine target toward the coarse mask with the forward process, predict,
/// and descend on alpha L1 plus weighted confidence loss. Returns the
/// pre-update loss. On a non-finite loss the parameters are left unchanged.
pub fn train_step(
    sample: &TrainSample,
    schedule: &TransitionSchedule,
    ps: &mut ParamSet,
    rng: &mut SeededRng,
    learning_rate: f64,
    lambda_c: f64,
) -> Result<f64> {
    if learning_rate < 0.0 {
        return Err(Error::domain("learning rate must be >= 0".to_string()));
    }
    let prepped = prep_sample(sample.image, Some(sample.alpha_gt), sample.coarse_mask)?;
    let (h4, w4) = (prepped.m_fine.height(), prepped.m_fine.width());

    let t = 1 + rng.below(schedule.steps());
    let states = forward_marginal_sample(t, schedule, rng, h4, w4)?;
    let m_t = compose_mask(&states, &prepped.m_fine, &prepped.m_coarse)?;

    let mut tape = Tape::new();
    let (half, quarter) =
        encoder::encode_on_tape(&mut tape, ps, &prepped.image_half, Some(&prepped.key_weights))?;
    let (alpha, conf) =
        decode_on_tape(&mut tape, ps, half, quarter, &m_t, t, schedule.steps())?;

    let target = tape.leaf(prepped.m_fine.to_channel_tensor());
    let diff = tape.sub(alpha, target);
    let abs_diff = tape.abs(diff);
    let l_alpha = tape.mean_all(abs_diff);
    let conf_err = tape.sub(conf, abs_diff);
    let abs_conf_err = tape.abs(conf_err);
    let l_conf = tape.mean_all(abs_conf_err);
    let weighted = tape.scale(l_conf, lambda_c);
    let total = tape.add(l_alpha, weighted);

    let loss = tape.value(total).data()[0];
    if !loss.is_finite() {
        return Err(Error::invalid(format!("non-finite training loss {loss}")));
    }
    ps.zero_grads();
    let grads = tape.backward(total)?;
    tape.accumulate_param_grads(&grads, ps);
    if learning_rate > 0.0 {
        ps.sgd_step(learning_rate);
    }
    Ok(loss)
}

/// Result of a reverse refinement run.
pub struct InferOutcome {
    /// Refined quarter-resolution matte m_0.
    pub m0: AlphaGrid,
    /// Predicted-error map from the final decode.
    pub error: AlphaGrid,
    pub decode_calls: usize,
    /// State field after every transfer, for invariant inspection.
    pub states_trace: Vec<StateField>,
}

/// Reverse refinement driven by an arbitrary decode function; the engine for
/// `infer` and for oracle-decoder tests. Starts all-COARSE at m_T = coarse,
/// flips a fixed budget of the most confident COARSE pixels per step, and
/// refreshes FINE pixels from the current prediction.
pub fn infer_with<F>(
    mut decode: F,
    m_coarse: &AlphaGrid,
    schedule: &TransitionSchedule,
) -> Result<InferOutcome>
where
    F: FnMut(&AlphaGrid, usize) -> Result<DecodeOutput>,
{
    let (h4, w4) = (m_coarse.height(), m_coarse.width());
    let n = h4 * w4;
    let budgets = reverse_flip_counts(n, schedule);
    let mut states = StateField::all_coarse(h4, w4);
    let mut m_t = m_coarse.clone();
    let mut last_error = AlphaGrid::constant(h4, w4, 0.0, Res::Quarter);
    let mut trace = Vec::with_capacity(schedule.steps() + 1);
    trace.push(states.clone());
    let mut calls = 0;
    for (i, t) in (1..=schedule.steps()).rev().enumerate() {
        let out = decode(&m_t, t)?;
        calls += 1;
        states = inference_transfer(&states, &out.error_pred, budgets[i])?;
        m_t = compose_mask(&states, &out.alpha_pred, m_coarse)?;
        last_error = out.error_pred;
        trace.push(states.clone());
    }
    Ok(InferOutcome {
        m0: m_t,
        error: last_error,
        decode_calls: calls,
        states_trace: trace,
    })
}

/// Full reverse refinement with the trained model: encode once, decode T
/// times. Deterministic given the checkpoint and inputs.
pub fn infer(
    image: &Tensor,
    coarse_mask: &GuidanceMask,
    schedule: &TransitionSchedule,
    ps: &ParamSet,
) -> Result<InferOutcome> {
    let prepped = prep_sample(image, None, coarse_mask)?;
    let mut tape = Tape::new();
    let (half, quarter) =
        encoder::encode_on_tape(&mut tape, ps, &prepped.image_half, Some(&prepped.key_weights))?;
    let features = FeaturePyramid {
        half_res: tape.value(half).clone(),
        quarter_res: tape.value(quarter).clone(),
    };
    infer_with(
        |m_t, t| decode_step(&features, m_t, t, schedule.steps(), ps),
        &prepped.m_coarse,
        schedule,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::make_schedule;

    fn model(size: usize, seed: u64) -> ParamSet {
        let mut rng = SeededRng::new(seed);
        let mut ps = ParamSet::new();
        encoder::init_encoder_params(&mut ps, size, &mut rng).unwrap();
        init_decoder_params(&mut ps, &mut rng).unwrap();
        ps
    }

    fn toy_sample(size: usize, seed: u64) -> (Tensor, AlphaGrid, GuidanceMask) {
        let mut rng = SeededRng::new(seed);
        let image = Tensor::from_parts(
            vec![3, size, size],
            (0..3 * size * size).map(|_| rng.next_f64()).collect(),
        );
        // soft centered blob as ground truth
        let mut alpha = vec![0.0; size * size];
        let c = size as f64 / 2.0;
        for i in 0..size {
            for j in 0..size {
                let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
                alpha[i * size + j] = (1.0 - (d / (size as f64 * 0.4))).clamp(0.0, 1.0);
            }
        }
        let gt = AlphaGrid::new(size, size, alpha.clone(), Res::Full).unwrap();
        let bits = alpha.iter().map(|&a| u8::from(a >= 0.5)).collect();
        let mask = GuidanceMask::new(size, size, bits).unwrap();
        (image, gt, mask)
    }

    fn features_for(size: usize, ps: &ParamSet, seed: u64) -> FeaturePyramid {
        let mut rng = SeededRng::new(seed);
        let image_half = rng.normal_tensor(&[3, size / 2, size / 2], 0.5);
        encoder::encode_plain(&image_half, ps).unwrap()
    }

    #[test]
    fn time_embedding_is_injective_over_steps() {
        let t_max = 20;
        let embs: Vec<_> = (0..=t_max).map(|t| time_embedding(t, t_max)).collect();
        for a in 0..embs.len() {
            for b in a + 1..embs.len() {
                assert_ne!(embs[a], embs[b], "steps {a} and {b} collide");
            }
        }
    }

    #[test]
    fn decode_shapes_bounds_and_determinism() {
        let ps = model(64, 1);
        let features = features_for(64, &ps, 2);
        let m_t = AlphaGrid::constant(16, 16, 0.5, Res::Quarter);
        let out = decode_step(&features, &m_t, 3, 6, &ps).unwrap();
        assert_eq!(out.alpha_pred.height(), 16);
        assert_eq!(out.alpha_pred.width(), 16);
        assert_eq!(out.error_pred.height(), 16);
        assert!(out
            .alpha_pred
            .data()
            .iter()
            .chain(out.error_pred.data())
            .all(|&v| v > 0.0 && v < 1.0));

        let again = decode_step(&features, &m_t, 3, 6, &ps).unwrap();
        assert!(out.alpha_pred.bit_eq(&again.alpha_pred));
        assert!(out.error_pred.bit_eq(&again.error_pred));
    }

    #[test]
    fn decode_depends_on_step_index() {
        let ps = model(16, 3);
        let features = features_for(16, &ps, 4);
        let m_t = AlphaGrid::constant(4, 4, 0.5, Res::Quarter);
        let at0 = decode_step(&features, &m_t, 0, 6, &ps).unwrap();
        let at_t = decode_step(&features, &m_t, 6, 6, &ps).unwrap();
        assert!(!at0.alpha_pred.bit_eq(&at_t.alpha_pred));
    }

    #[test]
    fn decode_rejects_mismatched_mask() {
        let ps = model(16, 5);
        let features = features_for(16, &ps, 6);
        let bad = AlphaGrid::constant(8, 8, 0.5, Res::Quarter);
        assert!(decode_step(&features, &bad, 1, 6, &ps).is_err());
    }

    #[test]
    fn loss_substitution_cases() {
        let g = |v: f64| AlphaGrid::constant(4, 4, v, Res::Quarter);
        // confidence loss: exact-representable cases are exact
        assert_eq!(
            confidence_loss(&g(0.0), &g(0.75), &g(0.75)).unwrap(),
            0.0
        );
        assert_eq!(confidence_loss(&g(0.5), &g(1.0), &g(0.0)).unwrap(), 0.5);
        // 0.3/0.8 are not binary-representable; substitution differs from 0
        // only by representation error
        let v = confidence_loss(&g(0.3), &g(0.8), &g(0.5)).unwrap();
        assert!(v.abs() < 1e-15, "got {v}");

        assert_eq!(alpha_loss(&g(0.25), &g(0.25)).unwrap(), 0.0);
        assert_eq!(alpha_loss(&g(1.0), &g(0.0)).unwrap(), 1.0);
        // half the pixels off by 0.4
        let mut data = vec![0.0; 16];
        for v in data.iter_mut().take(8) {
            *v = 0.4;
        }
        let pred = AlphaGrid::new(4, 4, data, Res::Quarter).unwrap();
        let l = alpha_loss(&pred, &g(0.0)).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
    }

    #[test]
    fn train_step_lr_zero_leaves_params_unchanged() {
        let mut ps = model(16, 7);
        let before = ps.clone();
        let (image, gt, mask) = toy_sample(16, 8);
        let schedule = make_schedule(4).unwrap();
        let mut rng = SeededRng::new(9);
        let loss = train_step(
            &TrainSample {
                image: &image,
                alpha_gt: &gt,
                coarse_mask: &mask,
            },
            &schedule,
            &mut ps,
            &mut rng,
            0.0,
            DEFAULT_LAMBDA_C,
        )
        .unwrap();
        assert!(loss.is_finite());
        assert!(ps.values_bit_eq(&before));
    }

    #[test]
    fn repeated_steps_descend_on_fixed_sample() {
        // T = 1 pins t = 1, so the stochastic step choice is fixed
        let mut ps = model(16, 10);
        let (image, gt, mask) = toy_sample(16, 11);
        let schedule = make_schedule(1).unwrap();
        let mut rng = SeededRng::new(12);
        let sample = TrainSample {
            image: &image,
            alpha_gt: &gt,
            coarse_mask: &mask,
        };
        let first = train_step(&sample, &schedule, &mut ps, &mut rng, 1e-2, DEFAULT_LAMBDA_C)
            .unwrap();
        let mut last = first;
        for _ in 0..199 {
            last = train_step(&sample, &schedule, &mut ps, &mut rng, 1e-2, DEFAULT_LAMBDA_C)
                .unwrap();
        }
        assert!(
            last < first,
            "loss failed to descend: first {first}, last {last}"
        );
    }

    #[test]
    fn zeroed_heads_give_flat_half_prediction() {
        let mut ps = model(16, 13);
        for name in ["dec.alpha.k", "dec.alpha.b", "dec.conf.k", "dec.conf.b"] {
            ps.get_mut(name).unwrap().value.data_mut().fill(0.0);
        }
        // alpha_pred is exactly 0.5 everywhere
        let features = features_for(16, &ps, 14);
        let m_t = AlphaGrid::constant(4, 4, 0.3, Res::Quarter);
        let out = decode_step(&features, &m_t, 1, 4, &ps).unwrap();
        assert!(out.alpha_pred.data().iter().all(|&v| v == 0.5));

        // with gt = 0.5 the alpha term vanishes and the loss is exactly
        // lambda_c * 0.5
        let (image, _, mask) = toy_sample(16, 15);
        let gt = AlphaGrid::constant(16, 16, 0.5, Res::Full);
        let schedule = make_schedule(4).unwrap();
        let mut rng = SeededRng::new(16);
        let loss = train_step(
            &TrainSample {
                image: &image,
                alpha_gt: &gt,
                coarse_mask: &mask,
            },
            &schedule,
            &mut ps,
            &mut rng,
            0.0,
            DEFAULT_LAMBDA_C,
        )
        .unwrap();
        assert_eq!(loss, DEFAULT_LAMBDA_C * 0.5);
    }

    #[test]
    fn oracle_decoder_recovers_fine_target_exactly() {
        let m_fine = {
            let mut rng = SeededRng::new(17);
            let data = (0..16).map(|_| rng.next_f64()).collect();
            AlphaGrid::new(4, 4, data, Res::Quarter).unwrap()
        };
        let coarse = AlphaGrid::constant(4, 4, 0.0, Res::Quarter);
        for t_max in [1, 2, 3, 5, 8] {
            let schedule = make_schedule(t_max).unwrap();
            let outcome = infer_with(
                |_, _| {
                    Ok(DecodeOutput {
                        alpha_pred: m_fine.clone(),
                        error_pred: AlphaGrid::constant(4, 4, 0.0, Res::Quarter),
                    })
                },
                &coarse,
                &schedule,
            )
            .unwrap();
            assert_eq!(outcome.decode_calls, t_max);
            assert!(outcome.m0.bit_eq(&m_fine), "T = {t_max}");
            // all pixels FINE at the end
            assert_eq!(outcome.states_trace.last().unwrap().count_coarse(), 0);
        }
    }

    #[test]
    fn inference_fine_set_grows_monotonically() {
        let ps = model(16, 18);
        let (image, _, mask) = toy_sample(16, 19);
        let schedule = make_schedule(5).unwrap();
        let outcome = infer(&image, &mask, &schedule, &ps).unwrap();
        assert_eq!(outcome.decode_calls, 5);
        for pair in outcome.states_trace.windows(2) {
            assert!(pair[0].fine_subset_of(&pair[1]));
        }
        assert_eq!(outcome.states_trace.last().unwrap().count_coarse(), 0);
    }

    #[test]
    fn single_step_inference_adopts_prediction_wholesale() {
        let ps = model(16, 20);
        let (image, _, mask) = toy_sample(16, 21);
        let schedule = make_schedule(1).unwrap();
        let outcome = infer(&image, &mask, &schedule, &ps).unwrap();
        assert_eq!(outcome.decode_calls, 1);
        // k_1 = N so m_0 equals the single decode's alpha everywhere
        let prepped = prep_sample(&image, None, &mask).unwrap();
        let mut tape = Tape::new();
        let (half, quarter) =
            encoder::encode_on_tape(&mut tape, &ps, &prepped.image_half, Some(&prepped.key_weights))
                .unwrap();
        let features = FeaturePyramid {
            half_res: tape.value(half).clone(),
            quarter_res: tape.value(quarter).clone(),
        };
        let direct = decode_step(&features, &prepped.m_coarse, 1, 1, &ps).unwrap();
        assert!(outcome.m0.bit_eq(&direct.alpha_pred));
    }

    #[test]
    fn infer_is_bitwise_reproducible() {
        let ps = model(16, 22);
        let (image, _, mask) = toy_sample(16, 23);
        let schedule = make_schedule(4).unwrap();
        let a = infer(&image, &mask, &schedule, &ps).unwrap();
        let b = infer(&image, &mask, &schedule, &ps).unwrap();
        assert!(a.m0.bit_eq(&b.m0));
        assert!(a.error.bit_eq(&b.error));
    }
}
