//! Finite-difference gradient checking.
//!
//! Central differences are evaluated with forward passes only, so they do not
//! share any code with the reverse-mode pass they verify. A coordinate whose
//! perturbation flips a ReLU or L1 branch (detected with
//! [`Graph::kink_signature`]) sits on a non-differentiable seam and is
//! reported as skipped rather than compared.

use std::collections::HashMap;

use crate::error::Result;
use crate::layers::{
    residual_block, residual_down_block, residual_up_projection, sparse_conv, ConvParams, DownBlockParams,
    ObservationMask, ResidualBlockParams, SparseConvParams, UpProjectionParams, SPARSE_CONV_EPS,
};
use crate::model::{self, Bindings, Group, Model, ModelConfig, Variant};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms. Central
/// differences at a 1e-5 step carry roughly 1e-10 of rounding noise, so
/// smaller gradients cannot be resolved to the relative tolerance.
pub const ABS_FLOOR: f64 = 1e-4;
/// Largest tolerated share of coordinates skipped at kinks.
pub const MAX_KINK_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub kinks_skipped: usize,
    /// (input index, coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        let total = (self.checked + self.kinks_skipped).max(1) as f64;
        self.checked > 0 && self.max_rel_err < REL_TOL && (self.kinks_skipped as f64) / total <= MAX_KINK_FRACTION
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok((g.value(out).item(), g.kink_signature()))
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences. Inputs larger than `max_coords` are checked on a seeded
/// sample of coordinates that always includes the largest-gradient one.
pub fn check_gradients<F>(name: &str, inputs: &[Tensor], max_coords: usize, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base_sig = g.kink_signature();
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut rng = SplitMix64::new(seed);
    let mut report = GradCheck {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        kinks_skipped: 0,
        worst: None,
    };
    let mut work = inputs.to_vec();
    for (i, grad) in grads.iter().enumerate() {
        let n = grad.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let top = (0..n)
                .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                .unwrap_or(0);
            let mut c = vec![top];
            while c.len() < max_coords {
                let k = rng.below(n as u64) as usize;
                if !c.contains(&k) {
                    c.push(k);
                }
            }
            c
        };
        for k in coords {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + FD_STEP;
            let (fp, sp) = eval(&work, &f)?;
            work[i].data_mut()[k] = orig - FD_STEP;
            let (fm, sm) = eval(&work, &f)?;
            work[i].data_mut()[k] = orig;
            if sp != base_sig || sm != base_sig {
                report.kinks_skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = relative_error(grad[k], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, k));
            }
        }
    }
    Ok(report)
}

fn rand_tensor(shape: &[usize], rng: &mut SplitMix64, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.normal()).collect()).expect("shape")
}

fn conv_params(weight: Var, bias: Var) -> ConvParams {
    ConvParams { weight, bias }
}

fn random_mask(h: usize, w: usize, n: usize, rng: &mut SplitMix64) -> ObservationMask {
    let mut idx: Vec<usize> = (0..h * w).collect();
    rng.shuffle(&mut idx);
    let mut bits = vec![false; h * w];
    for &i in &idx[..n] {
        bits[i] = true;
    }
    ObservationMask::from_bools(1, h, w, &bits).expect("binary")
}

/// Elementary ops on random tensors of at most 4x4 spatial size.
pub fn tensor_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::new();
    let proj4 = rand_tensor(&[2, 3, 4, 4], &mut rng, 1.0);

    for (stride, pad, k, name) in [
        (1, 1, 3, "conv2d s1 k3"),
        (2, 1, 3, "conv2d s2 k3"),
        (1, 2, 5, "conv2d k5"),
    ] {
        let x = rand_tensor(&[2, 2, 4, 4], &mut rng, 1.0);
        let w = rand_tensor(&[3, 2, k, k], &mut rng, 0.5);
        let b = rand_tensor(&[3], &mut rng, 0.5);
        let oh = (4 + 2 * pad - k) / stride + 1;
        let c = rand_tensor(&[2, 3, oh, oh], &mut rng, 1.0);
        out.push(check_gradients(name, &[x, w, b], usize::MAX, seed, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            g.dot_const(y, &c)
        })?);
    }

    let x = rand_tensor(&[2, 3, 4, 4], &mut rng, 1.0);
    out.push(check_gradients("relu", &[x], usize::MAX, seed, |g, v| {
        let y = g.relu(v[0])?;
        g.dot_const(y, &proj4)
    })?);

    let a = rand_tensor(&[2, 1, 4, 4], &mut rng, 1.0);
    let b = rand_tensor(&[2, 2, 4, 4], &mut rng, 1.0);
    out.push(check_gradients(
        "concat_channels",
        &[a, b],
        usize::MAX,
        seed,
        |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            g.dot_const(y, &proj4)
        },
    )?);

    let x = rand_tensor(&[1, 2, 2, 2], &mut rng, 1.0);
    let c = rand_tensor(&[1, 2, 4, 4], &mut rng, 1.0);
    out.push(check_gradients(
        "nearest_upsample2x",
        &[x],
        usize::MAX,
        seed,
        |g, v| {
            let y = g.upsample2x(v[0])?;
            g.dot_const(y, &c)
        },
    )?);

    let a = rand_tensor(&[2, 3, 4, 4], &mut rng, 1.0);
    let b = rand_tensor(&[2, 3, 4, 4], &mut rng, 1.0);
    out.push(check_gradients("add", &[a, b], usize::MAX, seed, |g, v| {
        let y = g.add(v[0], v[1])?;
        g.dot_const(y, &proj4)
    })?);

    let x = rand_tensor(&[2, 3, 4, 4], &mut rng, 1.0);
    let bias = rand_tensor(&[3], &mut rng, 1.0);
    let plane = rand_tensor(&[2, 1, 4, 4], &mut rng, 1.0);
    out.push(check_gradients(
        "add_bias mul_plane",
        &[x, bias],
        usize::MAX,
        seed,
        |g, v| {
            let y = g.mul_plane(v[0], &plane)?;
            let y = g.add_bias(y, v[1])?;
            g.dot_const(y, &proj4)
        },
    )?);

    for window in [0, 2] {
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng, 1.0);
        let m1 = random_mask(4, 4, 5, &mut rng);
        let m2 = random_mask(4, 4, 9, &mut rng);
        let mask = Tensor::new(&[2, 1, 4, 4], [m1.data(), m2.data()].concat())?;
        let name = if window == 0 {
            "masked_avg_pool global"
        } else {
            "masked_avg_pool 2x2"
        };
        out.push(check_gradients(name, &[x], usize::MAX, seed, |g, v| {
            let y = g.masked_avg_pool(v[0], &mask, window)?;
            g.dot_const(y, &proj4)
        })?);
    }

    let pred = rand_tensor(&[1, 1, 4, 4], &mut rng, 1.0);
    let target = rand_tensor(&[1, 1, 4, 4], &mut rng, 1.0);
    let valid = random_mask(4, 4, 10, &mut rng);
    out.push(check_gradients("l1_loss", &[pred], usize::MAX, seed, |g, v| {
        g.l1_loss(v[0], &target, valid.tensor())
    })?);
    Ok(out)
}

/// Sparse convolution, residual, downsampling and up-projection blocks.
pub fn layers_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = SplitMix64::new(seed ^ 0x51);
    let mut out = Vec::new();

    for (k, stride) in [(3, 1), (3, 2)] {
        let mask = random_mask(4, 4, 6, &mut rng);
        let x = rand_tensor(&[1, 2, 4, 4], &mut rng, 1.0);
        let w = rand_tensor(&[3, 2, k, k], &mut rng, 0.5);
        let b = rand_tensor(&[3], &mut rng, 0.5);
        let oh = (4 + 2 * (k / 2) - k) / stride + 1;
        let c = rand_tensor(&[1, 3, oh, oh], &mut rng, 1.0);
        let name = if stride == 1 { "sparse_conv" } else { "sparse_conv s2" };
        out.push(check_gradients(name, &[x, w, b], usize::MAX, seed, |g, v| {
            let p = SparseConvParams {
                weight: v[1],
                bias: v[2],
                epsilon: SPARSE_CONV_EPS,
            };
            let (y, _) = sparse_conv(g, v[0], &mask, &p, stride, k / 2)?;
            g.dot_const(y, &c)
        })?);
    }

    let x = rand_tensor(&[1, 3, 4, 4], &mut rng, 1.0);
    let ws: Vec<Tensor> = (0..2)
        .flat_map(|_| {
            [
                rand_tensor(&[3, 3, 3, 3], &mut rng, 0.3),
                rand_tensor(&[3], &mut rng, 0.3),
            ]
        })
        .collect();
    let c = rand_tensor(&[1, 3, 4, 4], &mut rng, 1.0);
    let mut inputs = vec![x];
    inputs.extend(ws);
    out.push(check_gradients("residual_block", &inputs, usize::MAX, seed, |g, v| {
        let p = ResidualBlockParams {
            conv1: conv_params(v[1], v[2]),
            conv2: conv_params(v[3], v[4]),
        };
        let y = residual_block(g, v[0], &p)?;
        g.dot_const(y, &c)
    })?);

    let inputs = vec![
        rand_tensor(&[1, 2, 4, 4], &mut rng, 1.0),
        rand_tensor(&[4, 2, 3, 3], &mut rng, 0.4),
        rand_tensor(&[4], &mut rng, 0.3),
        rand_tensor(&[4, 4, 3, 3], &mut rng, 0.3),
        rand_tensor(&[4], &mut rng, 0.3),
        rand_tensor(&[4, 2, 1, 1], &mut rng, 0.5),
        rand_tensor(&[4], &mut rng, 0.3),
    ];
    let c = rand_tensor(&[1, 4, 2, 2], &mut rng, 1.0);
    out.push(check_gradients(
        "residual_down_block",
        &inputs,
        usize::MAX,
        seed,
        |g, v| {
            let p = DownBlockParams {
                conv1: conv_params(v[1], v[2]),
                conv2: conv_params(v[3], v[4]),
                shortcut: conv_params(v[5], v[6]),
            };
            let y = residual_down_block(g, v[0], &p)?;
            g.dot_const(y, &c)
        },
    )?);

    let inputs = vec![
        rand_tensor(&[1, 4, 2, 2], &mut rng, 1.0),
        rand_tensor(&[2, 4, 5, 5], &mut rng, 0.2),
        rand_tensor(&[2], &mut rng, 0.3),
        rand_tensor(&[2, 2, 3, 3], &mut rng, 0.3),
        rand_tensor(&[2], &mut rng, 0.3),
        rand_tensor(&[2, 4, 5, 5], &mut rng, 0.2),
        rand_tensor(&[2], &mut rng, 0.3),
    ];
    let c = rand_tensor(&[1, 2, 4, 4], &mut rng, 1.0);
    out.push(check_gradients(
        "residual_up_projection",
        &inputs,
        usize::MAX,
        seed,
        |g, v| {
            let p = UpProjectionParams {
                main1: conv_params(v[1], v[2]),
                main2: conv_params(v[3], v[4]),
                projection: conv_params(v[5], v[6]),
            };
            let y = residual_up_projection(g, v[0], &p)?;
            g.dot_const(y, &c)
        },
    )?);
    Ok(out)
}

/// Parameters of a model flattened in a fixed order, for use as check inputs.
fn model_inputs(m: &Model) -> (Vec<String>, Vec<Tensor>) {
    m.named_params().map(|(n, p)| (n, p.value.clone())).unzip()
}

fn bindings_for(names: &[String], vars: &[Var]) -> Bindings {
    let map: HashMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
    Bindings::new(map, Group::ALL.to_vec())
}

/// Context encoder, depth encoder, demonstration, prediction and the full
/// forward pass of each variant, differentiated with respect to every
/// parameter tensor.
pub fn fusion_suite(seed: u64, coords_per_tensor: usize) -> Result<Vec<GradCheck>> {
    let mut rng = SplitMix64::new(seed ^ 0xf0);
    let mut out = Vec::new();

    // Context encoder, end to end on 16x16.
    let cfg = ModelConfig::tiny(Variant::Inductive);
    let m = Model::new(cfg.clone(), seed)?;
    let (names, params) = model_inputs(&m);
    let rgb = rand_tensor(&[1, 3, 16, 16], &mut rng, 0.5);
    let c = rand_tensor(&[1, cfg.context_channels, 16, 16], &mut rng, 1.0);
    let mut inputs = params.clone();
    inputs.push(rgb.clone());
    out.push(check_gradients(
        "context_encoder 16x16",
        &inputs,
        coords_per_tensor,
        seed,
        |g, v| {
            let b = bindings_for(&names, &v[..names.len()]);
            let x = model::context_encoder(g, &b, &cfg, v[names.len()])?;
            g.dot_const(x, &c)
        },
    )?);

    // Depth encoder, 3 and 5 layers, gradient w.r.t. parameters and sparse depth values.
    for layers in [3, 5] {
        let cfg = ModelConfig {
            depth_layers: layers,
            ..ModelConfig::tiny(Variant::Inductive)
        };
        let m = Model::new(cfg.clone(), seed + layers as u64)?;
        let (names, params) = model_inputs(&m);
        let mask = random_mask(8, 8, 6, &mut rng);
        let depth = Tensor::new(
            &[1, 1, 8, 8],
            mask.data().iter().map(|&b| b * rng.uniform(1.0, 4.0)).collect(),
        )?;
        let c = rand_tensor(&[1, cfg.depth_channels, 8, 8], &mut rng, 1.0);
        let mut inputs = params;
        inputs.push(depth);
        let name = format!("depth_encoder {layers}-layer");
        out.push(check_gradients(&name, &inputs, coords_per_tensor, seed, |g, v| {
            let b = bindings_for(&names, &v[..names.len()]);
            let dv = g.mul_plane(v[names.len()], mask.tensor())?;
            let (y, _) = model::depth_encoder(g, &b, &cfg, dv, &mask)?;
            g.dot_const(y, &c)
        })?);
    }

    // Demonstration and prediction on random feature maps.
    let cfg = ModelConfig::tiny(Variant::Inductive);
    let m = Model::new(cfg.clone(), seed + 11)?;
    let (names, params) = model_inputs(&m);
    let mask = random_mask(8, 8, 4, &mut rng);
    let x = rand_tensor(&[1, cfg.context_channels, 8, 8], &mut rng, 1.0);
    let y = rand_tensor(&[1, cfg.depth_channels, 8, 8], &mut rng, 1.0);
    let c = rand_tensor(&[1, cfg.demo_channels, 8, 8], &mut rng, 1.0);
    let mut inputs = params.clone();
    inputs.extend([x.clone(), y]);
    out.push(check_gradients(
        "demonstrate",
        &inputs,
        coords_per_tensor,
        seed,
        |g, v| {
            let b = bindings_for(&names, &v[..names.len()]);
            let r = model::demonstrate(g, &b, v[names.len()], v[names.len() + 1], &mask)?;
            g.dot_const(r, &c)
        },
    )?);

    let r = rand_tensor(&[1, cfg.demo_channels, 8, 8], &mut rng, 1.0);
    let c = rand_tensor(&[1, 1, 8, 8], &mut rng, 1.0);
    let mut inputs = params;
    inputs.extend([x, r]);
    out.push(check_gradients("predict", &inputs, coords_per_tensor, seed, |g, v| {
        let b = bindings_for(&names, &v[..names.len()]);
        let p = model::predict(g, &b, v[names.len()], v[names.len() + 1])?;
        g.dot_const(p, &c)
    })?);

    // Full models on 8x8 with 4 observed pixels, trained loss (masked L1).
    for variant in Variant::ALL {
        let cfg = ModelConfig::tiny(variant);
        let m = Model::new(cfg.clone(), seed + 21)?;
        let (names, params) = model_inputs(&m);
        let mask = random_mask(8, 8, 4, &mut rng);
        let gt: Vec<f64> = (0..64).map(|_| rng.uniform(2.0, 6.0)).collect();
        let sparse = Tensor::new(&[1, 1, 8, 8], gt.iter().zip(mask.data()).map(|(d, m)| d * m).collect())?;
        let target = Tensor::new(&[1, 1, 8, 8], gt)?;
        let valid = Tensor::ones(&[1, 1, 8, 8]);
        let rgb = rand_tensor(&[1, 3, 8, 8], &mut rng, 0.5);
        let name = format!("end-to-end {variant} 8x8");
        out.push(check_gradients(&name, &params, coords_per_tensor, seed, |g, v| {
            let b = bindings_for(&names, v);
            let rv = g.constant(rgb.clone());
            let dv = g.constant(sparse.clone());
            let p = model::forward_phase(g, &b, &cfg, model::Phase::Joint, rv, dv, &mask)?;
            g.l1_loss(p, &target, &valid)
        })?);
    }
    Ok(out)
}

pub const SUITES: [&str; 3] = ["tensor", "layers", "fusion"];

/// Runs the named suite, or all of them when `module` is `None`.
pub fn run_suite(module: Option<&str>, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for name in SUITES {
        if module.is_some_and(|m| m != name) {
            continue;
        }
        match name {
            "tensor" => out.extend(tensor_suite(seed)?),
            "layers" => out.extend(layers_suite(seed)?),
            _ => out.extend(fusion_suite(seed, usize::MAX)?),
        }
    }
    Ok(out)
}
