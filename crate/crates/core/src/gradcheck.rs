//! Central finite-difference checks of the autodiff engine, the loss terms,
//! the gate and the full detector, all in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::assignment::assign;
use crate::attention::{build_attention_targets, exp_gate, GateMode, LevelMask};
use crate::error::Result;
use crate::geometry::{generate_anchors, AnchorSpec, BBox};
use crate::losses::{attention_loss, focal_loss, ClsNormalizer, smooth_l1, total_loss, LevelVars, LossConfig};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Graph, Tensor, Var};

pub const OP_TOL: f64 = 1e-5;
pub const LOSS_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
/// Gradients below this magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-7;
/// Step of the five-point central stencil (error O(h^4)).
pub const STEP: f64 = 1e-3;
pub const GRADCHECK_INIT_SIGMA: f64 = 0.1;
/// Step for the full detector, where ReLU kinks are dense.
pub const MODEL_STEP: f64 = 1e-5;

/// `(8 (f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h`, differences first so equal
/// values give exactly zero.
pub fn central_difference(h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (m2, m1, p1, p2) = (f(-2.0 * h)?, f(-h)?, f(h)?, f(2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub checked: usize,
    /// Coordinates sitting on a ReLU kink at every step size tried.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Where the largest error occurred.
    pub worst: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<28} coords={:<5} max_rel_err={:.3e} tol={:.0e}", self.name, self.checked, self.max_rel_err, self.tol)?;
        if self.skipped > 0 {
            write!(f, " skipped={}", self.skipped)?;
        }
        Ok(())
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Root of a graph built by `f`: the output itself if scalar, otherwise its
/// inner product with fixed random weights.
fn build_root(f: &Builder, inputs: &[Tensor<f64>], proj_seed: u64) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let root = if g.value(out).numel() == 1 {
        out
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
        let shape = g.shape(out).to_vec();
        let w = g.constant(Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
        let p = g.mul(out, w)?;
        g.sum(p)
    };
    Ok((g, vars, root))
}

/// Checks every coordinate of every input.
pub fn check_fn(name: &str, inputs: &[Tensor<f64>], f: &Builder, tol: f64) -> Result<Check> {
    let (g, vars, root) = build_root(f, inputs, 17)?;
    let grads = g.backward(root);
    let mut max_err: f64 = 0.0;
    let mut worst = String::new();
    let mut checked = 0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for k in 0..t.numel() {
            let numeric = central_difference(STEP, |delta| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[k] += delta;
                let (g, _, r) = build_root(f, &moved, 17)?;
                Ok(g.value(r).item())
            })?;
            let e = rel_err(analytic[k], numeric);
            if e > max_err {
                max_err = e;
                worst = format!("input {i} [{k}]: analytic {:.6e} numeric {:.6e}", analytic[k], numeric);
            }
            checked += 1;
        }
    }
    Ok(Check { name: name.into(), checked, skipped: 0, max_rel_err: max_err, tol, worst })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| n.sample(rng))
}

/// Random values at least `margin` away from zero (kink of ReLU).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(margin..1.5);
        if rng.random_bool(0.5) { v } else { -v }
    })
}

/// Every primitive op of the graph on small random shapes.
pub fn op_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let x = random(&mut rng, &[2, 6, 6]);
    let w3 = random(&mut rng, &[3, 2, 3, 3]);
    let b3 = random(&mut rng, &[3]);
    for (name, stride, pad) in [("conv2d 3x3 s1 p1", 1, 1), ("conv2d 3x3 s2 p1", 2, 1), ("conv2d 3x3 s1 p0", 1, 0)] {
        let f = move |g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], Some(v[2]), stride, pad);
        out.push(check_fn(name, &[x.clone(), w3.clone(), b3.clone()], &f, OP_TOL)?);
    }
    let w1 = random(&mut rng, &[4, 2, 1, 1]);
    let f = |g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], None, 1, 0);
    out.push(check_fn("conv2d 1x1", &[x.clone(), w1], &f, OP_TOL)?);

    let xr = away_from_zero(&mut rng, &[4, 8, 8], 0.01);
    out.push(check_fn("relu", &[xr], &|g, v| Ok(g.relu(v[0])), OP_TOL)?);
    let xs = random(&mut rng, &[4, 8, 8]);
    out.push(check_fn("sigmoid", &[xs.clone()], &|g, v| Ok(g.sigmoid(v[0])), OP_TOL)?);
    out.push(check_fn("exp", &[xs.clone()], &|g, v| Ok(g.exp(v[0])), OP_TOL)?);
    out.push(check_fn("scale", &[xs.clone()], &|g, v| Ok(g.scale(v[0], -1.7)), OP_TOL)?);
    let ys = random(&mut rng, &[4, 8, 8]);
    out.push(check_fn("add", &[xs.clone(), ys.clone()], &|g, v| g.add(v[0], v[1]), OP_TOL)?);
    out.push(check_fn("mul", &[xs.clone(), ys], &|g, v| g.mul(v[0], v[1]), OP_TOL)?);
    let gate = random(&mut rng, &[1, 8, 8]);
    out.push(check_fn("mul_channels", &[xs.clone(), gate.clone()], &|g, v| g.mul_channels(v[0], v[1]), OP_TOL)?);
    let small = random(&mut rng, &[3, 4, 4]);
    out.push(check_fn("upsample2", &[small], &|g, v| g.upsample2(v[0]), OP_TOL)?);
    out.push(check_fn("reshape", &[xs.clone()], &|g, v| g.reshape(v[0], &[16, 16]), OP_TOL)?);
    out.push(check_fn("chw_to_hwc", &[xs.clone()], &|g, v| g.chw_to_hwc(v[0]), OP_TOL)?);
    out.push(check_fn("sum", &[xs.clone()], &|g, v| Ok(g.sum(v[0])), OP_TOL)?);
    out.push(check_fn("mean", &[xs.clone()], &|g, v| Ok(g.mean(v[0])), OP_TOL)?);
    for (name, mode) in [("exp_gate sigmoid", GateMode::Sigmoid), ("exp_gate raw", GateMode::Raw)] {
        let f = move |g: &mut Graph<f64>, v: &[Var]| exp_gate(g, v[0], v[1], mode);
        out.push(check_fn(name, &[xs.clone(), gate.clone()], &f, OP_TOL)?);
    }
    Ok(out)
}

/// The three loss terms on random inputs.
pub fn loss_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let n = 60;
    let logits = Tensor::from_fn(&[n], |_| rng.random_range(-6.0..6.0));
    let labels: Vec<i8> = (0..n).map(|_| rng.random_range(-1..=1)).collect();
    let normalizer = labels.iter().filter(|&&l| l >= 0).count();
    for (name, cfg) in [
        ("focal_loss", LossConfig::default()),
        ("focal_loss gamma=0", LossConfig { focal_gamma: 0.0, focal_alpha: 0.5, ..Default::default() }),
        ("focal_loss gamma=1.5", LossConfig { focal_gamma: 1.5, ..Default::default() }),
    ] {
        let labels = labels.clone();
        let f = move |g: &mut Graph<f64>, v: &[Var]| focal_loss(g, v[0], &labels, &cfg, normalizer);
        out.push(check_fn(name, &[logits.clone()], &f, LOSS_TOL)?);
    }

    // deltas stay clear of the |d| = beta kink
    let beta = 1.0;
    let pred = Tensor::from_fn(&[40], |_| rng.random_range(-2.0..2.0));
    let targets: Vec<(usize, [f64; 4])> = (0..6)
        .map(|k| {
            let mut t = [0.0; 4];
            for (c, tc) in t.iter_mut().enumerate() {
                let p = pred.data()[4 * k + c];
                let d: f64 = rng.random_range(0.05..0.9) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let d = if rng.random_bool(0.5) { d } else { d.signum() * (beta + 0.05 + d.abs()) };
                *tc = p - d;
            }
            (k, t)
        })
        .collect();
    let f = move |g: &mut Graph<f64>, v: &[Var]| smooth_l1(g, v[0], &targets, beta, 6);
    out.push(check_fn("smooth_l1", &[pred], &f, LOSS_TOL)?);

    let att = random(&mut rng, &[1, 6, 7]);
    let mask = LevelMask { height: 6, width: 7, data: (0..42).map(|_| u8::from(rng.random_bool(0.3))).collect() };
    let f = move |g: &mut Graph<f64>, v: &[Var]| attention_loss(g, v[0], &mask);
    out.push(check_fn("attention_loss", &[att], &f, LOSS_TOL)?);
    Ok(out)
}

/// `total_loss` against every prediction tensor of a two-level grid.
pub fn total_loss_check(seed: u64, normalizer: ClsNormalizer) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = AnchorSpec {
        levels: vec![3, 4],
        base_sides: vec![16.0, 32.0],
        scale_multipliers: vec![1.0, 2f64.powf(0.5)],
        aspect_ratios: vec![1.0],
    };
    let grid = generate_anchors(32, 32, &spec)?;
    let gt = vec![BBox::new(3.0, 4.0, 20.0, 22.0)?, BBox::new(14.0, 10.0, 31.0, 30.0)?];
    let assignment = assign(&grid, &gt, 0.5, 0.4);
    let targets = build_attention_targets(&gt, &assignment, &grid);
    let a = grid.anchors_per_location;
    let mut inputs = Vec::new();
    for l in &grid.levels {
        inputs.push(Tensor::from_fn(&[a, l.height, l.width], |_| rng.random_range(-3.0..3.0)));
        inputs.push(Tensor::from_fn(&[4 * a, l.height, l.width], |_| rng.random_range(-0.5..0.5)));
        inputs.push(random(&mut rng, &[1, l.height, l.width]));
    }
    let cfg = LossConfig { lambda1: 1.3, lambda2: 0.7, cls_normalizer: normalizer, ..Default::default() };
    let f = move |g: &mut Graph<f64>, v: &[Var]| {
        let levels: Vec<LevelVars> = v.chunks(3).map(|c| LevelVars { cls: c[0], reg: c[1], att: Some(c[2]) }).collect();
        Ok(total_loss(g, &levels, &grid, &assignment, &targets, &cfg)?.0)
    };
    let name = match normalizer {
        ClsNormalizer::Participating => "total_loss two-level Nc",
        ClsNormalizer::Positive => "total_loss two-level Npos",
    };
    check_fn(name, &inputs, &f, END_TO_END_TOL)
}

/// Full detector loss on a `side × side` image against a random `fraction`
/// of all parameter coordinates.
pub fn model_check(seed: u64, side: usize, fraction: f64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // wider init keeps head activations and gradients well above the
    // finite-difference noise floor
    let mut model = Model::<f64>::new(ModelConfig { init_sigma: GRADCHECK_INIT_SIGMA, init_reference_width: 0, ..Default::default() }, seed)?;
    let image = Tensor::from_fn(&[3, side, side], |_| rng.random_range(-2.0..2.0));
    let grid = generate_anchors(side, side, &model.config.anchors)?;
    let s = side as f64;
    let gt = vec![BBox::new(0.1 * s, 0.15 * s, 0.45 * s, 0.5 * s)?, BBox::new(0.55 * s, 0.5 * s, 0.7 * s, 0.68 * s)?];
    let assignment = assign(&grid, &gt, 0.5, 0.4);
    let targets = build_attention_targets(&gt, &assignment, &grid);
    let cfg = LossConfig::default();
    let loss_of = |m: &Model<f64>| -> Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let levels = m.forward(&mut g, x)?;
        let (root, _) = total_loss(&mut g, &levels, &grid, &assignment, &targets, &cfg)?;
        Ok((g, root))
    };
    let (g, root) = loss_of(&model)?;
    let base_pattern = g.relu_pattern();
    let mut grads: Vec<Vec<f64>> = model.params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
    g.backward(root).accumulate_params(&g, &mut grads);
    drop(g);

    let ids: Vec<_> = model.params.ids().collect();
    let mut max_err: f64 = 0.0;
    let mut worst = String::new();
    let (mut checked, mut skipped) = (0, 0);
    for id in ids {
        let n = model.params.get(id).numel();
        for k in 0..n {
            if !rng.random_bool(fraction) {
                continue;
            }
            let orig = model.params.get(id).data()[k];
            // shrink the step until no stencil point leaves the base linear region
            let mut h = MODEL_STEP;
            let numeric = loop {
                let mut crossed = false;
                let d = central_difference(h, |delta| {
                    model.params.get_mut(id).data_mut()[k] = orig + delta;
                    let (g, r) = loss_of(&model)?;
                    crossed |= g.relu_pattern() != base_pattern;
                    Ok(g.value(r).item())
                })?;
                if !crossed {
                    break Some(d);
                }
                if h < MODEL_STEP * 1e-3 {
                    break None;
                }
                h *= 0.1;
            };
            model.params.get_mut(id).data_mut()[k] = orig;
            // not differentiable here
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            let e = rel_err(grads[id.0][k], numeric);
            if e > max_err {
                max_err = e;
                worst = format!("{}[{k}]: analytic {:.6e} numeric {:.6e}", model.params.name(id), grads[id.0][k], numeric);
            }
            checked += 1;
        }
    }
    Ok(Check { name: format!("model end-to-end {side}x{side}"), checked, skipped, max_rel_err: max_err, tol: END_TO_END_TOL, worst })
}

/// Ops, losses, gate, two-level total loss and the 1% end-to-end check.
pub fn run_suite(seed: u64) -> Result<Vec<Check>> {
    let mut out = op_checks(seed)?;
    out.extend(loss_checks(seed.wrapping_add(1))?);
    for normalizer in [ClsNormalizer::Participating, ClsNormalizer::Positive] {
        out.push(total_loss_check(seed.wrapping_add(2), normalizer)?);
    }
    out.push(model_check(seed.wrapping_add(3), 128, 0.01)?);
    Ok(out)
}
