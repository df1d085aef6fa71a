//! Mask-guided transformer image encoder.
//!
//! A small 4-block ViT over 2x2 patches of the half-resolution image. The
//! first three blocks use standard multi-head attention; the final block
//! modulates attention logits with per-key region weights: for a non-class
//! key j with weight w_j the logit L becomes L * (1 + beta*w_j + r), which
//! is (S + L) for S = (beta*M + r) (.) L with the class-token column left
//! untouched. With beta = r = 0 the whole encoder reduces bit-exactly to a
//! plain transformer.

use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParamSet, SeededRng, Tape, Tensor};
use crate::regions::{RegionLabel, RegionMap};

pub const EMBED_DIM: usize = 32;
pub const NUM_HEADS: usize = 4;
pub const HEAD_DIM: usize = EMBED_DIM / NUM_HEADS;
pub const NUM_BLOCKS: usize = 4;
/// Channels produced by the conv stem (the half-resolution feature level).
pub const STEM_CHANNELS: usize = 8;
pub const MLP_HIDDEN: usize = 64;

/// Two-level feature pyramid: stem features at H/2 and de-tokenized
/// transformer features at H/4.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub half_res: Tensor,
    pub quarter_res: Tensor,
}

/// Register all encoder parameters for a `size` x `size` pipeline.
pub fn init_encoder_params(ps: &mut ParamSet, size: usize, rng: &mut SeededRng) -> Result<()> {
    if size % 8 != 0 || size == 0 {
        return Err(Error::domain(format!("pipeline size {size} must be divisible by 8")));
    }
    let tokens = (size / 4) * (size / 4);
    let d = EMBED_DIM;

    let stem_std = (2.0f64 / (3.0 * 9.0)).sqrt();
    ps.add("enc.stem.k", rng.normal_tensor(&[STEM_CHANNELS, 3, 3, 3], stem_std))?;
    ps.add("enc.stem.b", Tensor::zeros(&[STEM_CHANNELS]))?;

    let patch_in = 4 * STEM_CHANNELS;
    ps.add(
        "enc.patch.w",
        rng.normal_tensor(&[patch_in, d], (2.0 / patch_in as f64).sqrt()),
    )?;
    ps.add("enc.patch.b", Tensor::zeros(&[1, d]))?;

    ps.add("enc.cls", rng.normal_tensor(&[1, d], 0.02))?;
    ps.add("enc.pos", rng.normal_tensor(&[tokens + 1, d], 0.02))?;

    let qkv_std = 1.0 / (d as f64).sqrt();
    let out_std = (2.0 / (HEAD_DIM + d) as f64).sqrt();
    for b in 0..NUM_BLOCKS {
        ps.add(format!("enc.b{b}.ln1.g"), Tensor::full(&[1, d], 1.0))?;
        ps.add(format!("enc.b{b}.ln1.b"), Tensor::zeros(&[1, d]))?;
        for h in 0..NUM_HEADS {
            for proj in ["q", "k", "v"] {
                ps.add(
                    format!("enc.b{b}.h{h}.w{proj}"),
                    rng.normal_tensor(&[d, HEAD_DIM], qkv_std),
                )?;
                ps.add(format!("enc.b{b}.h{h}.b{proj}"), Tensor::zeros(&[1, HEAD_DIM]))?;
            }
            ps.add(
                format!("enc.b{b}.h{h}.wo"),
                rng.normal_tensor(&[HEAD_DIM, d], out_std),
            )?;
        }
        ps.add(format!("enc.b{b}.attn.bo"), Tensor::zeros(&[1, d]))?;
        ps.add(format!("enc.b{b}.ln2.g"), Tensor::full(&[1, d], 1.0))?;
        ps.add(format!("enc.b{b}.ln2.b"), Tensor::zeros(&[1, d]))?;
        ps.add(
            format!("enc.b{b}.mlp.w1"),
            rng.normal_tensor(&[d, MLP_HIDDEN], (2.0 / d as f64).sqrt()),
        )?;
        ps.add(format!("enc.b{b}.mlp.b1"), Tensor::zeros(&[1, MLP_HIDDEN]))?;
        ps.add(
            format!("enc.b{b}.mlp.w2"),
            rng.normal_tensor(&[MLP_HIDDEN, d], (2.0 / MLP_HIDDEN as f64).sqrt()),
        )?;
        ps.add(format!("enc.b{b}.mlp.b2"), Tensor::zeros(&[1, d]))?;
    }

    // region modulation starts disabled so training begins from standard attention
    ps.add("enc.beta", Tensor::zeros(&[1]))?;
    ps.add("enc.r", Tensor::zeros(&[1]))?;
    Ok(())
}

/// Attention with optional per-key region modulation, shared by the public
/// ops and the encoder blocks. `q`, `k`, `v` are (N+1)xC nodes with the
/// class token at row 0.
fn attention_on_tape(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    modulation: Option<(&[f64], NodeId, NodeId)>,
) -> NodeId {
    let c = tape.value(q).dims()[1] as f64;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt);
    let adjusted = match modulation {
        None => logits,
        Some((weights, beta, r)) => {
            let rows = tape.value(logits).dims()[0];
            let n = weights.len();
            debug_assert_eq!(rows, n + 1);
            // row-constant matrices: column 0 (class token) carries no modulation
            let mut wrow = vec![0.0; n + 1];
            wrow[1..].copy_from_slice(weights);
            let mut mrow = vec![0.0; n + 1];
            mrow[1..].fill(1.0);
            let wmat = tape.leaf(Tensor::from_parts(
                vec![rows, n + 1],
                wrow.iter().cycle().take(rows * (n + 1)).copied().collect(),
            ));
            let mmat = tape.leaf(Tensor::from_parts(
                vec![rows, n + 1],
                mrow.iter().cycle().take(rows * (n + 1)).copied().collect(),
            ));
            let bw = tape.scalar_mul(beta, wmat);
            let rm = tape.scalar_mul(r, mmat);
            let gain0 = tape.offset(bw, 1.0);
            let gain = tape.add(gain0, rm);
            tape.mul(logits, gain)
        }
    };
    let scaled = tape.scale(adjusted, 1.0 / c.sqrt());
    let attn = tape.softmax_rows(scaled);
    tape.matmul(attn, v)
}

/// Region-modulated attention: logits L = q k^T, S[i,j] = (beta*w_j + r) *
/// L[i,j] for non-class keys and 0 for the class column, output =
/// softmax((S + L)/sqrt(C)) v. Token 0 is the class token; `key_weights`
/// aligns with tokens 1..=N.
pub fn mgfsm_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    key_weights: &[f64],
    beta: f64,
    r: f64,
) -> Result<Tensor> {
    check_attention_inputs(q, k, v)?;
    if key_weights.len() + 1 != q.dims()[0] {
        return Err(Error::shape(format!(
            "key_weights length {} != token count {}",
            key_weights.len(),
            q.dims()[0] - 1
        )));
    }
    let mut tape = Tape::new();
    let (qn, kn, vn) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let beta_n = tape.leaf(Tensor::scalar(beta));
    let r_n = tape.leaf(Tensor::scalar(r));
    let out = attention_on_tape(&mut tape, qn, kn, vn, Some((key_weights, beta_n, r_n)));
    Ok(tape.value(out).clone())
}

/// Plain scaled-dot-product attention over the same layout.
pub fn standard_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_attention_inputs(q, k, v)?;
    let mut tape = Tape::new();
    let (qn, kn, vn) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let out = attention_on_tape(&mut tape, qn, kn, vn, None);
    Ok(tape.value(out).clone())
}

fn check_attention_inputs(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if q.rank() != 2 || k.dims() != q.dims() || v.dims() != q.dims() {
        return Err(Error::shape(format!(
            "attention expects equal rank-2 q/k/v, got {:?}/{:?}/{:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    Ok(())
}

/// Per-token key weights: the region weight of the majority label over each
/// token's 2x2 patch, ties resolved EDGE > FOREGROUND > BACKGROUND.
pub fn patch_key_weights(region: &RegionMap) -> Result<Vec<f64>> {
    let (h, w) = (region.height(), region.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("region map {h}x{w} not patchable by 2")));
    }
    let mut out = Vec::with_capacity((h / 2) * (w / 2));
    for pi in 0..h / 2 {
        for pj in 0..w / 2 {
            let mut counts = [0usize; 3]; // bg, fg, edge
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = match region.get(2 * pi + dy, 2 * pj + dx) {
                        RegionLabel::Background => 0,
                        RegionLabel::Foreground => 1,
                        RegionLabel::Edge => 2,
                    };
                    counts[idx] += 1;
                }
            }
            // priority on ties: edge (2) > foreground (1) > background (0)
            let winner = (0..3).max_by_key(|&i| (counts[i], i)).unwrap();
            out.push(match winner {
                0 => crate::regions::WEIGHT_BACKGROUND,
                1 => crate::regions::WEIGHT_FOREGROUND,
                _ => crate::regions::WEIGHT_EDGE,
            });
        }
    }
    Ok(out)
}

/// Full encoder forward on an existing tape, returning (half, quarter)
/// feature nodes. `key_weights` enables region modulation in the final
/// block; `None` runs every block as standard attention.
pub(crate) fn encode_on_tape(
    tape: &mut Tape,
    ps: &ParamSet,
    image_half: &Tensor,
    key_weights: Option<&[f64]>,
) -> Result<(NodeId, NodeId)> {
    if image_half.rank() != 3 || image_half.dims()[0] != 3 {
        return Err(Error::shape(format!(
            "encoder expects a 3xHxW half-resolution image, got {:?}",
            image_half.dims()
        )));
    }
    let (h2, w2) = (image_half.dims()[1], image_half.dims()[2]);
    if h2 % 4 != 0 || w2 % 4 != 0 {
        return Err(Error::shape(format!(
            "half resolution {h2}x{w2} must be divisible by 4 (full size by 8)"
        )));
    }
    let (h4, w4) = (h2 / 2, w2 / 2);
    let n_tokens = h4 * w4;
    let pos_rows = ps.value("enc.pos").dims()[0];
    if pos_rows != n_tokens + 1 {
        return Err(Error::shape(format!(
            "model was built for {} tokens, image yields {n_tokens}",
            pos_rows - 1
        )));
    }
    if let Some(w) = key_weights {
        if w.len() != n_tokens {
            return Err(Error::shape(format!(
                "key weights {} != token count {n_tokens}",
                w.len()
            )));
        }
    }

    let img = tape.leaf(image_half.clone());
    let stem_k = tape.param(ps, "enc.stem.k");
    let stem_b = tape.param(ps, "enc.stem.b");
    let stem = tape.conv2d(img, stem_k, stem_b);
    let half = tape.gelu(stem);

    let patches = tape.extract_patches2(half);
    let pw = tape.param(ps, "enc.patch.w");
    let pb = tape.param(ps, "enc.patch.b");
    let proj = tape.matmul(patches, pw);
    let tokens = tape.add_row_broadcast(proj, pb);

    let cls = tape.param(ps, "enc.cls");
    let with_cls = tape.concat_rows(cls, tokens);
    let pos = tape.param(ps, "enc.pos");
    let mut x = tape.add(with_cls, pos);

    let beta = tape.param(ps, "enc.beta");
    let r = tape.param(ps, "enc.r");

    for b in 0..NUM_BLOCKS {
        let ln1g = tape.param(ps, &format!("enc.b{b}.ln1.g"));
        let ln1b = tape.param(ps, &format!("enc.b{b}.ln1.b"));
        let normed = tape.layer_norm_rows(x, ln1g, ln1b);

        let modulated = b == NUM_BLOCKS - 1;
        let mut attn_sum: Option<NodeId> = None;
        for h in 0..NUM_HEADS {
            let proj_of = |tape: &mut Tape, name: &str| {
                let w = tape.param(ps, &format!("enc.b{b}.h{h}.w{name}"));
                let bias = tape.param(ps, &format!("enc.b{b}.h{h}.b{name}"));
                let p = tape.matmul(normed, w);
                tape.add_row_broadcast(p, bias)
            };
            let q = proj_of(tape, "q");
            let k = proj_of(tape, "k");
            let v = proj_of(tape, "v");
            let head = match (modulated, key_weights) {
                (true, Some(weights)) => {
                    attention_on_tape(tape, q, k, v, Some((weights, beta, r)))
                }
                _ => attention_on_tape(tape, q, k, v, None),
            };
            let wo = tape.param(ps, &format!("enc.b{b}.h{h}.wo"));
            let contrib = tape.matmul(head, wo);
            attn_sum = Some(match attn_sum {
                None => contrib,
                Some(acc) => tape.add(acc, contrib),
            });
        }
        let bo = tape.param(ps, &format!("enc.b{b}.attn.bo"));
        let attn = tape.add_row_broadcast(attn_sum.unwrap(), bo);
        x = tape.add(x, attn);

        let ln2g = tape.param(ps, &format!("enc.b{b}.ln2.g"));
        let ln2b = tape.param(ps, &format!("enc.b{b}.ln2.b"));
        let normed2 = tape.layer_norm_rows(x, ln2g, ln2b);
        let w1 = tape.param(ps, &format!("enc.b{b}.mlp.w1"));
        let b1 = tape.param(ps, &format!("enc.b{b}.mlp.b1"));
        let w2 = tape.param(ps, &format!("enc.b{b}.mlp.w2"));
        let b2 = tape.param(ps, &format!("enc.b{b}.mlp.b2"));
        let m = tape.matmul(normed2, w1);
        let m = tape.add_row_broadcast(m, b1);
        let m = tape.gelu(m);
        let m = tape.matmul(m, w2);
        let m = tape.add_row_broadcast(m, b2);
        x = tape.add(x, m);
    }

    let spatial = tape.slice_rows(x, 1, n_tokens); // class token dropped
    let quarter = tape.tokens_to_grid(spatial, h4, w4);
    Ok((half, quarter))
}

/// Encode a half-resolution image with region guidance in the final block.
pub fn encode(
    image_half: &Tensor,
    region: &RegionMap,
    ps: &ParamSet,
) -> Result<FeaturePyramid> {
    if region.height() != image_half.dims()[1] || region.width() != image_half.dims()[2] {
        return Err(Error::shape(format!(
            "region map {}x{} does not match image {}x{}",
            region.height(),
            region.width(),
            image_half.dims()[1],
            image_half.dims()[2]
        )));
    }
    let weights = patch_key_weights(region)?;
    let mut tape = Tape::new();
    let (half, quarter) = encode_on_tape(&mut tape, ps, image_half, Some(&weights))?;
    Ok(FeaturePyramid {
        half_res: tape.value(half).clone(),
        quarter_res: tape.value(quarter).clone(),
    })
}

/// Baseline encoder with standard attention in every block (the beta = r = 0
/// reference, also used for ablations).
pub fn encode_plain(image_half: &Tensor, ps: &ParamSet) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let (half, quarter) = encode_on_tape(&mut tape, ps, image_half, None)?;
    Ok(FeaturePyramid {
        half_res: tape.value(half).clone(),
        quarter_res: tape.value(quarter).clone(),
    })
}
