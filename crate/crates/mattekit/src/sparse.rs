//! Confidence-gated sparse detail recovery at full resolution.
//!
//! A sparsity map selects the pixels whose predicted error exceeds tau; a
//! small residual network evaluates only at those sites with submanifold
//! semantics (inactive activations are zero, outputs exist only at active
//! sites) and predicts a bounded correction added to the upsampled
//! low-resolution matte. A dense-zeroed oracle evaluates the identical
//! network densely for equivalence checks, and mac_count exposes the
//! compute saving.

use crate::decoder::{AlphaGrid, Res};
use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, ParamSet, SeededRng, Tape, Tensor};

pub const REFINER_WIDTH: usize = 16;
pub const REFINER_IN_CHANNELS: usize = 4; // RGB + upsampled alpha
/// Chessboard radius of the refiner's receptive field (entry 3x3 plus two
/// residual blocks of two 3x3 convs each).
pub const RECEPTIVE_RADIUS: usize = 5;
pub const DEFAULT_TAU: f64 = 0.05;

/// Active-coordinate set at full resolution with a binary grid view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityMap {
    h: usize,
    w: usize,
    active: Vec<(usize, usize)>,
    grid: Vec<bool>,
}

impl SparsityMap {
    /// Build from explicit coordinates (deduplicated, stored row-major).
    pub fn from_coords(h: usize, w: usize, coords: &[(usize, usize)]) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape("empty sparsity map".to_string()));
        }
        let mut grid = vec![false; h * w];
        for &(i, j) in coords {
            if i >= h || j >= w {
                return Err(Error::shape(format!("coordinate ({i},{j}) out of {h}x{w}")));
            }
            grid[i * w + j] = true;
        }
        let active = grid_coords(&grid, h, w);
        Ok(Self { h, w, active, grid })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn active(&self) -> &[(usize, usize)] {
        &self.active
    }

    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.grid[i * self.w + j]
    }

    pub fn occupancy(&self) -> f64 {
        self.active.len() as f64 / (self.h * self.w) as f64
    }

    /// 0/1 channel tensor view (1xHxW).
    pub fn to_channel_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, self.h, self.w],
            self.grid.iter().map(|&b| f64::from(u8::from(b))).collect(),
        )
    }
}

fn grid_coords(grid: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if grid[i * w + j] {
                out.push((i, j));
            }
        }
    }
    out
}

/// Activate exactly the pixels whose error strictly exceeds tau.
pub fn build_sparsity_map(error_full: &AlphaGrid, tau: f64) -> Result<SparsityMap> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::domain(format!("tau {tau} outside [0,1]")));
    }
    let (h, w) = (error_full.height(), error_full.width());
    let grid: Vec<bool> = error_full.data().iter().map(|&v| v > tau).collect();
    let active = grid_coords(&grid, h, w);
    Ok(SparsityMap { h, w, active, grid })
}

/// Register refiner parameters. The delta head starts at zero so the module
/// is an exact identity on the upsampled matte until trained.
pub fn init_sparse_params(ps: &mut ParamSet, rng: &mut SeededRng) -> Result<()> {
    let entry_std = (2.0 / (REFINER_IN_CHANNELS as f64 * 9.0)).sqrt();
    ps.add(
        "sp.entry.k",
        rng.normal_tensor(&[REFINER_WIDTH, REFINER_IN_CHANNELS, 3, 3], entry_std),
    )?;
    ps.add("sp.entry.b", Tensor::zeros(&[REFINER_WIDTH]))?;
    let conv_std = (2.0 / (REFINER_WIDTH as f64 * 9.0)).sqrt();
    for b in 0..2 {
        for c in 0..2 {
            ps.add(
                format!("sp.rb{b}.c{c}.k"),
                rng.normal_tensor(&[REFINER_WIDTH, REFINER_WIDTH, 3, 3], conv_std),
            )?;
            ps.add(format!("sp.rb{b}.c{c}.b"), Tensor::zeros(&[REFINER_WIDTH]))?;
        }
    }
    ps.add("sp.head.k", Tensor::zeros(&[1, REFINER_WIDTH, 1, 1]))?;
    ps.add("sp.head.b", Tensor::zeros(&[1]))?;
    Ok(())
}

fn check_kernel(kernel: &Tensor, input_c: usize) -> Result<(usize, usize)> {
    if kernel.rank() != 4 || kernel.dims()[1] != input_c {
        return Err(Error::shape(format!(
            "kernel {:?} does not match input channels {input_c}",
            kernel.dims()
        )));
    }
    let k = kernel.dims()[2];
    if kernel.dims()[3] != k || (k != 1 && k != 3) {
        return Err(Error::shape(format!("kernel must be 1x1 or 3x3, got {:?}", kernel.dims())));
    }
    Ok((kernel.dims()[0], k))
}

/// Submanifold convolution: outputs only at active coordinates, with input
/// values at inactive coordinates treated as zero during accumulation.
/// Inactive outputs are zero.
pub fn submanifold_conv(
    input: &Tensor,
    active: &SparsityMap,
    kernel: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::shape("submanifold_conv expects CxHxW input".to_string()));
    }
    let (c_in, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    if active.height() != h || active.width() != w {
        return Err(Error::shape("sparsity map does not match input".to_string()));
    }
    let (o_ch, k) = check_kernel(kernel, c_in)?;
    if bias.rank() != 1 || bias.dims()[0] != o_ch {
        return Err(Error::shape("bias does not match output channels".to_string()));
    }
    Ok(submanifold_conv_raw(input, active, kernel, bias, o_ch, k))
}

/// Accumulation mirrors the dense kernel's (c, ky, kx) order exactly so the
/// sparse path and the dense-zeroed oracle agree bit for bit.
fn submanifold_conv_raw(
    input: &Tensor,
    active: &SparsityMap,
    kernel: &Tensor,
    bias: &Tensor,
    o_ch: usize,
    k: usize,
) -> Tensor {
    let (c_in, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let r = (k - 1) / 2;
    let mut out = vec![0.0; o_ch * h * w];
    for o in 0..o_ch {
        let kbase = o * c_in * k * k;
        for &(y, x) in active.active() {
            let mut acc = bias.data()[o];
            for c in 0..c_in {
                let ibase = c * h * w;
                for ky in 0..k {
                    let iy = y as isize + ky as isize - r as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = ibase + iy as usize * w;
                    let krow = kbase + (c * k + ky) * k;
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - r as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        if !active.is_active(iy as usize, ix as usize) {
                            continue;
                        }
                        acc += kernel.data()[krow + kx] * input.data()[irow + ix as usize];
                    }
                }
            }
            out[(o * h + y) * w + x] = acc;
        }
    }
    Tensor::from_parts(vec![o_ch, h, w], out)
}

struct RefinerStack<'a> {
    entry_k: &'a Tensor,
    entry_b: &'a Tensor,
    blocks: [[(&'a Tensor, &'a Tensor); 2]; 2],
    head_k: &'a Tensor,
    head_b: &'a Tensor,
}

fn stack_of(ps: &ParamSet) -> RefinerStack<'_> {
    RefinerStack {
        entry_k: ps.value("sp.entry.k"),
        entry_b: ps.value("sp.entry.b"),
        blocks: [
            [
                (ps.value("sp.rb0.c0.k"), ps.value("sp.rb0.c0.b")),
                (ps.value("sp.rb0.c1.k"), ps.value("sp.rb0.c1.b")),
            ],
            [
                (ps.value("sp.rb1.c0.k"), ps.value("sp.rb1.c0.b")),
                (ps.value("sp.rb1.c1.k"), ps.value("sp.rb1.c1.b")),
            ],
        ],
        head_k: ps.value("sp.head.k"),
        head_b: ps.value("sp.head.b"),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

fn apply_active(t: &mut Tensor, map: &SparsityMap, f: impl Fn(f64) -> f64) {
    let (c_ch, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    debug_assert!(h == map.height() && w == map.width());
    for c in 0..c_ch {
        for &(i, j) in map.active() {
            let idx = (c * h + i) * w + j;
            t.data_mut()[idx] = f(t.data_mut()[idx]);
        }
    }
}

fn add_active(a: &mut Tensor, b: &Tensor, map: &SparsityMap) {
    let (c_ch, h, w) = (a.dims()[0], a.dims()[1], a.dims()[2]);
    for c in 0..c_ch {
        for &(i, j) in map.active() {
            let idx = (c * h + i) * w + j;
            a.data_mut()[idx] += b.data()[idx];
        }
    }
}

/// Delta prediction via the sparse engine: values only at active sites.
fn refine_delta_sparse(input4: &Tensor, map: &SparsityMap, ps: &ParamSet) -> Tensor {
    let stack = stack_of(ps);
    let mut h = submanifold_conv_raw(input4, map, stack.entry_k, stack.entry_b, REFINER_WIDTH, 3);
    apply_active(&mut h, map, gelu);
    for block in &stack.blocks {
        let mut t1 =
            submanifold_conv_raw(&h, map, block[0].0, block[0].1, REFINER_WIDTH, 3);
        apply_active(&mut t1, map, gelu);
        let t2 = submanifold_conv_raw(&t1, map, block[1].0, block[1].1, REFINER_WIDTH, 3);
        add_active(&mut h, &t2, map);
    }
    let mut delta = submanifold_conv_raw(&h, map, stack.head_k, stack.head_b, 1, 1);
    apply_active(&mut delta, map, f64::tanh);
    delta
}

fn zero_inactive(t: &mut Tensor, map: &SparsityMap) {
    let (c_ch, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    for c in 0..c_ch {
        for i in 0..h {
            for j in 0..w {
                if !map.is_active(i, j) {
                    t.data_mut()[(c * h + i) * w + j] = 0.0;
                }
            }
        }
    }
}

/// Delta prediction via the dense reference: the identical network evaluated
/// densely with the input and every post-convolution activation forced to
/// zero at inactive coordinates.
fn refine_delta_dense(input4: &Tensor, map: &SparsityMap, ps: &ParamSet) -> Tensor {
    let stack = stack_of(ps);
    let mut x = input4.clone();
    zero_inactive(&mut x, map);
    let mut h = crate::numerics::conv2d(&x, stack.entry_k, stack.entry_b).unwrap();
    zero_inactive(&mut h, map);
    let mut h = h.map(gelu);
    for block in &stack.blocks {
        let mut t1 = crate::numerics::conv2d(&h, block[0].0, block[0].1).unwrap();
        zero_inactive(&mut t1, map);
        let t1 = t1.map(gelu);
        let mut t2 = crate::numerics::conv2d(&t1, block[1].0, block[1].1).unwrap();
        zero_inactive(&mut t2, map);
        for (a, b) in h.data_mut().iter_mut().zip(t2.data()) {
            *a += b;
        }
    }
    let mut head = crate::numerics::conv2d(&h, stack.head_k, stack.head_b).unwrap();
    zero_inactive(&mut head, map);
    head.map(f64::tanh)
}

fn refine_inputs(
    a_l: &AlphaGrid,
    image: &Tensor,
    map: &SparsityMap,
) -> Result<(Tensor, Tensor)> {
    if image.rank() != 3 || image.dims()[0] != 3 {
        return Err(Error::shape("refiner expects a 3xHxW image".to_string()));
    }
    let (h, w) = (image.dims()[1], image.dims()[2]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!("full resolution {h}x{w} must be divisible by 4")));
    }
    if map.height() != h || map.width() != w {
        return Err(Error::shape("sparsity map does not match image".to_string()));
    }
    if a_l.height() != h / 4 || a_l.width() != w / 4 {
        return Err(Error::shape(format!(
            "low-res matte {}x{} is not quarter of {h}x{w}",
            a_l.height(),
            a_l.width()
        )));
    }
    let upsampled = bilinear_resize(&a_l.to_tensor(), h, w)?;
    let u = upsampled.map(|v| v.clamp(0.0, 1.0));
    let mut data = Vec::with_capacity(4 * h * w);
    data.extend_from_slice(image.data());
    data.extend_from_slice(u.data());
    Ok((Tensor::from_parts(vec![4, h, w], data), u))
}

fn compose(u: &Tensor, delta: &Tensor, map: &SparsityMap) -> Result<AlphaGrid> {
    let (h, w) = (map.height(), map.width());
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let base = u.data()[i * w + j];
            let v = if map.is_active(i, j) {
                (base + delta.data()[i * w + j]).clamp(0.0, 1.0)
            } else {
                base
            };
            out.push(v);
        }
    }
    AlphaGrid::new(h, w, out, Res::Full)
}

/// Detail recovery: upsample the low-res matte, predict a bounded residual
/// at active sites with the sparse engine, and leave inactive pixels
/// carrying the upsampled value unchanged.
pub fn sparse_refine(
    a_l: &AlphaGrid,
    image: &Tensor,
    map: &SparsityMap,
    ps: &ParamSet,
) -> Result<AlphaGrid> {
    let (input4, u) = refine_inputs(a_l, image, map)?;
    let delta = refine_delta_sparse(&input4, map, ps);
    compose(&u, &delta, map)
}

/// Equivalence reference: the same refinement computed densely with
/// activations zeroed at inactive coordinates after every convolution.
pub fn dense_zeroed_oracle(
    a_l: &AlphaGrid,
    image: &Tensor,
    map: &SparsityMap,
    ps: &ParamSet,
) -> Result<AlphaGrid> {
    let (input4, u) = refine_inputs(a_l, image, map)?;
    let delta = refine_delta_dense(&input4, map, ps);
    compose(&u, &delta, map)
}

/// Multiply-accumulate counts of the refiner: sparse counts only
/// accumulations targeting active output sites from active (in-bounds)
/// input sites; dense counts every in-bounds accumulation over HxW.
pub fn mac_count(map: &SparsityMap, ps: &ParamSet) -> (u64, u64) {
    let (h, w) = (map.height(), map.width());
    let stack = stack_of(ps);
    let mut layers: Vec<(&Tensor, usize, usize)> = vec![];
    for k in [stack.entry_k, stack.blocks[0][0].0, stack.blocks[0][1].0, stack.blocks[1][0].0, stack.blocks[1][1].0, stack.head_k] {
        layers.push((k, k.dims()[1], k.dims()[0]));
    }

    // in-bounds tap counts for a 3x3 window, dense and active-to-active
    let mut dense_taps3 = 0u64;
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (iy, ix) = (y + dy, x + dx);
                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        dense_taps3 += 1;
                    }
                }
            }
        }
    }
    let mut sparse_taps3 = 0u64;
    for &(y, x) in map.active() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (iy, ix) = (y as isize + dy, x as isize + dx);
                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                    && map.is_active(iy as usize, ix as usize)
                {
                    sparse_taps3 += 1;
                }
            }
        }
    }

    let mut dense = 0u64;
    let mut sparse = 0u64;
    for (kernel, c_in, c_out) in layers {
        let channel_macs = (c_in * c_out) as u64;
        if kernel.dims()[2] == 3 {
            dense += dense_taps3 * channel_macs;
            sparse += sparse_taps3 * channel_macs;
        } else {
            dense += (h * w) as u64 * channel_macs;
            sparse += map.active().len() as u64 * channel_macs;
        }
    }
    (sparse, dense)
}

/// One SGD step on the refiner alone: active-masked L1 between the
/// (unclamped) refined matte and the full-resolution ground truth, run
/// through the dense-zeroed route so gradients match the sparse engine's
/// semantics exactly. Returns the pre-update loss (0 for an empty map).
pub fn sparse_train_step(
    a_l: &AlphaGrid,
    image: &Tensor,
    map: &SparsityMap,
    alpha_gt: &AlphaGrid,
    ps: &mut ParamSet,
    lr: f64,
) -> Result<f64> {
    if map.active().is_empty() {
        return Ok(0.0);
    }
    let (input4, u) = refine_inputs(a_l, image, map)?;
    let (h, w) = (map.height(), map.width());
    if alpha_gt.height() != h || alpha_gt.width() != w {
        return Err(Error::shape("ground truth does not match image".to_string()));
    }

    let mask1 = map.to_channel_tensor();
    let tile = |c: usize| {
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            data.extend_from_slice(mask1.data());
        }
        Tensor::from_parts(vec![c, h, w], data)
    };

    let mut tape = Tape::new();
    let mask_in = tape.leaf(tile(REFINER_IN_CHANNELS));
    let mask_mid = tape.leaf(tile(REFINER_WIDTH));
    let mask_out = tape.leaf(mask1.clone());

    let raw_in = tape.leaf(input4);
    let x = tape.mul(raw_in, mask_in);
    let ek = tape.param(ps, "sp.entry.k");
    let eb = tape.param(ps, "sp.entry.b");
    let e = tape.conv2d(x, ek, eb);
    let e = tape.mul(e, mask_mid);
    let mut hid = tape.gelu(e);
    for b in 0..2 {
        let k1 = tape.param(ps, &format!("sp.rb{b}.c0.k"));
        let b1 = tape.param(ps, &format!("sp.rb{b}.c0.b"));
        let t1 = tape.conv2d(hid, k1, b1);
        let t1 = tape.mul(t1, mask_mid);
        let t1 = tape.gelu(t1);
        let k2 = tape.param(ps, &format!("sp.rb{b}.c1.k"));
        let b2 = tape.param(ps, &format!("sp.rb{b}.c1.b"));
        let t2 = tape.conv2d(t1, k2, b2);
        let t2 = tape.mul(t2, mask_mid);
        hid = tape.add(hid, t2);
    }
    let hk = tape.param(ps, "sp.head.k");
    let hb = tape.param(ps, "sp.head.b");
    let head = tape.conv2d(hid, hk, hb);
    let head = tape.mul(head, mask_out);
    let delta = tape.tanh(head);

    let u_leaf = tape.leaf(Tensor::from_parts(vec![1, h, w], u.data().to_vec()));
    let pred = tape.add(u_leaf, delta);
    let gt = tape.leaf(alpha_gt.to_channel_tensor());
    let diff = tape.sub(pred, gt);
    let l1 = tape.abs(diff);
    let masked = tape.mul(l1, mask_out);
    let mean = tape.mean_all(masked);
    // rescale the full-grid mean to a mean over active pixels
    let loss = tape.scale(mean, (h * w) as f64 / map.active().len() as f64);

    let loss_val = tape.value(loss).data()[0];
    if !loss_val.is_finite() {
        return Err(Error::invalid("non-finite refiner loss".to_string()));
    }
    ps.zero_grads();
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, ps);
    if lr > 0.0 {
        ps.sgd_step(lr);
    }
    Ok(loss_val)
}
