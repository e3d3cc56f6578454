//! The finite-difference suite behind `featsplat gradcheck`: every
//! differentiable op, checked in f64 against central differences.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode::{positional_encode_var, DecoderHeads, DEFAULT_BANDS};
use crate::diffcore::gradcheck::{check_gradients, FdOptions, GradCheck};
use crate::diffcore::{concat_cols, Activation, Bound, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::featpipe::{FeatureEncoder, Fusion, MultiViewFeatures};
use crate::interact::{knn, AttentionBlock};
use crate::optim::losses::SsimOp;
use crate::optim::{loss_color, loss_depth, loss_smooth, loss_total, LossWeights};
use crate::raster::{RasterConfig, RenderOp};
use crate::scene::{assemble_covariance_var, normalize3, Camera, ShColorOp, FEATURE_DIM};

/// Tolerance for smooth ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the rasterizer, whose compositing is badly conditioned.
pub const RASTER_TOLERANCE: f64 = 1e-2;
/// Coordinates probed per rasterizer input.
pub const RASTER_SAMPLES: usize = 20;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn params(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.ids().iter().map(|&i| store.get(i).clone()).collect()
}

fn all(n: usize) -> Vec<bool> {
    vec![true; n]
}

fn core_ops(out: &mut Vec<GradCheck>, rng: &mut ChaCha8Rng) -> Result<()> {
    let opts = FdOptions::default();
    let a = uniform(&[2, 3], -1.5, 1.5, rng)?;
    let b = uniform(&[3, 2], -1.5, 1.5, rng)?;
    out.push(check_gradients("matmul", &[a.clone(), b], &[true, true], |_, v| v[0].matmul(v[1]), opts)?);

    let c = uniform(&[2, 3], 0.5, 2.0, rng)?;
    let row = uniform(&[3], -1.0, 1.0, rng)?;
    out.push(check_gradients(
        "add/sub/mul/div with broadcasting",
        &[a.clone(), c, row],
        &[true, true, true],
        |_, v| v[0].add(v[2])?.mul(v[1])?.sub(v[2])?.div(v[1])?.mul(0.7)?.add(0.1),
        opts,
    )?);

    let x = Tensor::from_f64(&[6], &[-1.3, -0.4, 0.2, 0.7, 1.9, 3.1])?;
    for kind in [
        Activation::Relu,
        Activation::Sigmoid,
        Activation::Softplus,
        Activation::Exp,
        Activation::NegExpHalf,
        Activation::Abs,
        Activation::Sin,
        Activation::Cos,
        Activation::Square,
    ] {
        let name = format!("activation {kind:?}").to_lowercase();
        out.push(check_gradients(&name, std::slice::from_ref(&x), &[true], move |_, v| v[0].activation(kind), opts)?);
    }
    for axis in [0isize, 1] {
        out.push(check_gradients(&format!("softmax axis {axis}"), std::slice::from_ref(&a), &[true], move |_, v| v[0].softmax(axis), opts)?);
    }

    let m = uniform(&[3, 4], -1.0, 1.0, rng)?;
    let n = uniform(&[3, 2], -1.0, 1.0, rng)?;
    let idx = Rc::new(vec![2usize, 0, 2, 1]);
    out.push(check_gradients(
        "slice/concat/gather/reshape/reductions",
        &[m, n],
        &[true, true],
        move |_, v| {
            let s = v[0].slice_cols(1, 2)?;
            let c = concat_cols(&[s, v[1]])?;
            let g = c.gather_rows(idx.clone())?;
            let r = g.reshape(&[2, 2, 4])?.sum_axis(1)?;
            r.mul(r)?.mean()?.add(g.sum()?)
        },
        opts,
    )?);
    Ok(())
}

fn scene_ops(out: &mut Vec<GradCheck>, rng: &mut ChaCha8Rng) -> Result<()> {
    let opts = FdOptions::default();
    let s = uniform(&[3, 3], -1.5, 1.0, rng)?;
    let q = uniform(&[3, 4], -1.0, 1.0, rng)?;
    out.push(check_gradients(
        "covariance from scale and rotation",
        &[s, q],
        &[true, true],
        |tape, v| assemble_covariance_var(tape, v[0], v[1]),
        opts,
    )?);
    let dirs = vec![normalize3([0.1, 0.2, 0.9])?, normalize3([-0.5, 0.1, 0.3])?];
    let coeffs = uniform(&[2, 48], -0.05, 0.05, rng)?;
    out.push(check_gradients(
        "spherical harmonics color",
        &[coeffs],
        &[true],
        move |tape, v| tape.custom(Rc::new(ShColorOp::new(3, dirs.clone())?), &[v[0]]),
        opts,
    )?);
    Ok(())
}

fn feature_ops(out: &mut Vec<GradCheck>, rng: &mut ChaCha8Rng) -> Result<()> {
    let opts = FdOptions::default();
    let mut store = ParamStore::new();
    let enc = FeatureEncoder::new(&mut store, rng);
    let img = uniform(&[8, 8, 3], 0.0, 1.0, rng)?;
    let mut inputs = params(&store);
    let n = inputs.len();
    inputs.push(img);
    out.push(check_gradients(
        "feature encoder",
        &inputs,
        &all(n + 1),
        |_, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let maps = enc.forward(&p, v[n])?;
            maps[0].square()?.mean()?.add(maps[1].mean()?)?.add(maps[2].square()?.mean()?)
        },
        opts,
    )?);

    let cams = vec![
        Camera::look_at(0, [0.3, 0.0, -2.0], [0.0; 3], (8, 8), 8.0)?,
        Camera::look_at(1, [-0.3, 0.1, -2.0], [0.0; 3], (8, 8), 8.0)?,
    ];
    let imgs = vec![uniform(&[8, 8, 3], 0.0, 1.0, rng)?, uniform(&[8, 8, 3], 0.0, 1.0, rng)?];
    let pts = [[0.05, 0.02, 0.0], [-0.1, 0.07, 0.1], [0.12, -0.08, -0.05]];
    for (fusion, name) in [(Fusion::Variance, "multi-view variance fusion"), (Fusion::Mean, "multi-view mean fusion")] {
        let mut mv = MultiViewFeatures::new(enc.clone(), imgs.clone(), cams.clone(), fusion, 0.01)?;
        mv.set_points(&pts)?;
        let inputs = params(&store);
        out.push(check_gradients(
            name,
            &inputs,
            &all(inputs.len()),
            |_, v| {
                let p = Bound::from_vars(v.to_vec());
                mv.forward(v[0].tape(), &p)?.sum()
            },
            opts,
        )?);
    }
    Ok(())
}

fn interaction_ops(out: &mut Vec<GradCheck>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let blk = AttentionBlock::new(&mut store, rng);
    // nudge the zero biases off the ReLU kink at the self offset
    for pm in store.iter_mut() {
        for v in pm.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let pts: Vec<[f64; 3]> = (0..5).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
    let g = knn(&pts, 2);
    let mut inputs = params(&store);
    let n = inputs.len();
    inputs.push(uniform(&[5, FEATURE_DIM], -1.0, 1.0, rng)?);
    inputs.push(Tensor::new(&[5, 3], pts.iter().flatten().copied().collect())?);
    out.push(check_gradients(
        "neighbor attention",
        &inputs,
        &all(n + 2),
        |_, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            blk.forward(&p, v[n], v[n + 1], &g)?.square()?.mean()
        },
        FdOptions::default(),
    )?);
    Ok(())
}

fn decode_ops(out: &mut Vec<GradCheck>, rng: &mut ChaCha8Rng) -> Result<()> {
    let opts = FdOptions::default();
    let x = uniform(&[4, 3], -1.0, 1.0, rng)?;
    out.push(check_gradients(
        "positional encoding",
        &[x],
        &[true],
        |_, v| positional_encode_var(v[0], DEFAULT_BANDS)?.square()?.sum(),
        opts,
    )?);

    let mut store = ParamStore::new();
    let heads = DecoderHeads::new(&mut store, DEFAULT_BANDS, 0.05, rng)?;
    let mut inputs = params(&store);
    let n = inputs.len();
    inputs.push(uniform(&[3, 3], -0.8, 0.8, rng)?);
    let dirs: Vec<f64> = (0..3)
        .flat_map(|_| normalize3([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0]).unwrap())
        .collect();
    inputs.push(Tensor::new(&[3, 3], dirs)?);
    inputs.push(uniform(&[3, FEATURE_DIM], -1.0, 1.0, rng)?);
    out.push(check_gradients(
        "appearance decoder",
        &inputs,
        &all(n + 3),
        |_, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let (rgb, o) = heads.decode_appearance(&p, v[n], v[n + 1], v[n + 2])?;
            rgb.square()?.sum()?.add(o.sum()?)
        },
        opts,
    )?);
    out.push(check_gradients(
        "geometry decoder",
        &inputs,
        &all(n + 3),
        |tape, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let (s, q) = heads.decode_geometry(&p, v[n], v[n + 1], v[n + 2])?;
            let cov = tape.custom(Rc::new(crate::scene::CovarianceOp), &[s, q])?;
            cov.mul(100.0)?.square()?.sum()
        },
        opts,
    )?);
    Ok(())
}

fn loss_ops(out: &mut Vec<GradCheck>, rng: &mut ChaCha8Rng) -> Result<()> {
    let opts = FdOptions::default();
    let dense = FdOptions { samples_per_input: 40, ..opts };
    let w = LossWeights::default();
    let gt = uniform(&[8, 8, 3], 0.0, 1.0, rng)?;
    let render = uniform(&[8, 8, 3], 0.0, 1.0, rng)?;
    out.push(check_gradients("l1 + ssim color loss", std::slice::from_ref(&render), &[true], |_, v| Ok(loss_color(v[0], &gt, &w)?.0), opts)?);
    let reference = Rc::new(gt.clone());
    out.push(check_gradients(
        "ssim",
        &[render],
        &[true],
        |t, v| t.custom(Rc::new(SsimOp { reference: reference.clone() }), &[v[0]]),
        dense,
    )?);

    let prior = uniform(&[8, 8, 1], 0.0, 1.0, rng)?;
    let depth = uniform(&[8, 8, 1], 0.0, 1.0, rng)?;
    let weight = uniform(&[8, 8, 1], 0.0, 1.0, rng)?;
    out.push(check_gradients("depth loss", std::slice::from_ref(&depth), &[true], |_, v| loss_depth(v[0], &prior, &weight), opts)?);
    out.push(check_gradients("edge-aware smoothness loss", &[depth], &[true], |_, v| loss_smooth(v[0], &gt, &w), dense)?);

    let mut layout = uniform(&[8, 8, 5], 0.0, 1.0, rng)?;
    // keep the weight channel away from the mask threshold
    for p in layout.data_mut().chunks_mut(5) {
        p[4] = if p[4] > 0.5 { 0.9 } else { 0.1 };
    }
    out.push(check_gradients("total loss", &[layout], &[true], |_, v| Ok(loss_total(v[0], &gt, &prior, &w)?.0), dense)?);
    Ok(())
}

fn raster_ops(out: &mut Vec<GradCheck>, seed: u64) -> Result<()> {
    let cam = Camera::look_at(0, [0.2, -0.1, -2.5], [0.0; 3], (24, 20), 24.0)?;
    for k in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100 + k));
        let n = 8;
        let inputs = vec![
            uniform(&[n, 3], -0.4, 0.4, &mut rng)?,
            uniform(&[n, 3], -2.5, -1.2, &mut rng)?,
            uniform(&[n, 4], -1.0, 1.0, &mut rng)?,
            uniform(&[n, 3], 0.0, 1.0, &mut rng)?,
            uniform(&[n, 1], 0.3, 0.9, &mut rng)?,
        ];
        let target = uniform(&[20, 24, 5], -0.5, 1.5, &mut rng)?;
        let opts = FdOptions {
            samples_per_input: RASTER_SAMPLES,
            tolerance: RASTER_TOLERANCE,
            seed: seed.wrapping_add(k),
            ..Default::default()
        };
        let cam = cam.clone();
        out.push(check_gradients(
            &format!("rasterizer scene {k}"),
            &inputs,
            &[true; 5],
            move |tape: &Tape<f64>, v: &[Var<f64>]| {
                let cov = assemble_covariance_var(tape, v[1], v[2])?;
                let op = Rc::new(RenderOp::<f64>::new(cam.clone(), RasterConfig::default()));
                let img = tape.custom(op, &[v[0], cov, v[3], v[4]])?;
                img.sub(tape.constant(target.clone()))?.abs()?.mean()
            },
            opts,
        )?);
    }
    Ok(())
}

/// Run every check. Failures are reported in the results, not as errors.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    core_ops(&mut out, &mut rng)?;
    scene_ops(&mut out, &mut rng)?;
    feature_ops(&mut out, &mut rng)?;
    interaction_ops(&mut out, &mut rng)?;
    decode_ops(&mut out, &mut rng)?;
    loss_ops(&mut out, &mut rng)?;
    raster_ops(&mut out, seed)?;
    Ok(out)
}
