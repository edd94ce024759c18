use super::{Bindings, ModelConfig, Variant, DEMONSTRATION_BLOCKS, PREDICTION_BLOCKS, VANILLA_FUSION_BLOCKS};
use crate::error::{Error, Result};
use crate::layers::{
    masked_avg_pool, residual_block, residual_down_block, residual_up_projection, sparse_conv, ObservationMask,
};
use crate::tensor::{Graph, Tensor, Var};

/// Stage of the pretrain-then-fuse schedule a forward pass belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Context encoder and prediction head with the depth pathway zeroed.
    ContextPretrain,
    /// Depth encoder with its auxiliary 1x1 regression head.
    DepthPretrain,
    /// The whole network.
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::ContextPretrain => "context",
            Phase::DepthPretrain => "depth",
            Phase::Joint => "joint",
        }
    }
}

/// RGB (B x 3 x H x W, H and W divisible by 8) to per-pixel context features
/// (B x C_x x H x W): three residual stride-2 stages, three residual
/// up-projections, each decoder stage concatenated with the encoder output
/// of matching resolution.
pub fn context_encoder(g: &mut Graph, b: &Bindings, cfg: &ModelConfig, rgb: Var) -> Result<Var> {
    let (_, c, h, w) = g.value(rgb).expect_rank4("context_encoder")?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            op: "context_encoder",
            dim: "channels",
            expected: 3,
            got: c,
        });
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(Error::InvalidArgument {
            op: "context_encoder",
            msg: format!("image size {h}x{w} is not divisible by 8"),
        });
    }
    let _ = cfg;
    let stem = b.conv("context_encoder.stem")?.same(g, rgb)?;
    let stem = g.relu(stem)?;
    let e1 = residual_down_block(g, stem, &b.down("context_encoder.down1")?)?;
    let e2 = residual_down_block(g, e1, &b.down("context_encoder.down2")?)?;
    let e3 = residual_down_block(g, e2, &b.down("context_encoder.down3")?)?;
    let d1 = residual_up_projection(g, e3, &b.up("context_encoder.up1")?)?;
    let d1 = g.concat_channels(d1, e2)?;
    let d2 = residual_up_projection(g, d1, &b.up("context_encoder.up2")?)?;
    let d2 = g.concat_channels(d2, e1)?;
    let d3 = residual_up_projection(g, d2, &b.up("context_encoder.up3")?)?;
    let d3 = g.concat_channels(d3, stem)?;
    b.conv("context_encoder.head")?.same(g, d3)
}

fn check_depth_mask(sparse: &Tensor, mask: &ObservationMask) -> Result<()> {
    mask.check_aligned("depth_encoder", sparse)?;
    for (index, (&d, &m)) in sparse.data().iter().zip(mask.data()).enumerate() {
        if m == 0.0 && d != 0.0 {
            return Err(Error::DepthMaskDisagreement { index, value: d });
        }
    }
    Ok(())
}

/// Sparse depth (B x 1 x H x W, zero where unobserved) to depth features
/// (B x C_d x H x W) through 3 or 5 same-padded sparse convolutions with ReLU.
/// Returns the features and the propagated mask.
pub fn depth_encoder(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    sparse_depth: Var,
    mask: &ObservationMask,
) -> Result<(Var, ObservationMask)> {
    check_depth_mask(g.value(sparse_depth), mask)?;
    let (bsz, _, h, w) = g.value(sparse_depth).expect_rank4("depth_encoder")?;
    let mut x = g.mul_plane(sparse_depth, &Tensor::full(&[bsz, 1, h, w], cfg.depth_input_scale))?;
    let mut m = mask.clone();
    for (i, &k) in super::DEPTH_KERNELS[..cfg.depth_layers].iter().enumerate() {
        let p = b.sparse_conv(&format!("depth_encoder.scn{i}"), cfg.sparse_eps)?;
        let (y, next) = sparse_conv(g, x, &m, &p, 1, k / 2)?;
        x = g.relu(y)?;
        m = next;
    }
    Ok((x, m))
}

/// Sparse depth with unobserved pixels forced to zero, so that whole-model
/// forwards ignore whatever values sit outside the mask.
fn observed_depth(g: &mut Graph, sparse_depth: Var, mask: &ObservationMask) -> Result<Var> {
    mask.check_aligned("observed_depth", g.value(sparse_depth))?;
    g.mul_plane(sparse_depth, mask.tensor())
}

/// Depth encoder plus its linear 1x1 pretraining head.
pub fn depth_pretrain_head(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    sparse_depth: Var,
    mask: &ObservationMask,
) -> Result<Var> {
    let sparse_depth = observed_depth(g, sparse_depth, mask)?;
    let (y, _) = depth_encoder(g, b, cfg, sparse_depth, mask)?;
    b.conv("depth_encoder.head")?.same(g, y)
}

fn residual_stack(g: &mut Graph, b: &Bindings, prefix: &str, x: Var, blocks: usize) -> Result<Var> {
    let mut h = x;
    for i in 0..blocks {
        h = residual_block(g, h, &b.residual(&format!("{prefix}.rb{i}"))?)?;
    }
    Ok(h)
}

/// Demonstrations r_i: concat(x, y), 1x1 fusion conv to C_r, four residual
/// blocks. Computed at every pixel; only observed pixels are aggregated.
pub fn demonstrate(g: &mut Graph, b: &Bindings, x: Var, y: Var, mask: &ObservationMask) -> Result<Var> {
    mask.check_aligned("demonstrate", g.value(x))?;
    let xy = g.concat_channels(x, y)?;
    let h = b.conv("demonstration.input")?.same(g, xy)?;
    let h = g.relu(h)?;
    residual_stack(g, b, "demonstration", h, DEMONSTRATION_BLOCKS)
}

/// Permutation-invariant mean of the demonstrations over observed pixels of
/// each aggregation window.
pub fn aggregate(g: &mut Graph, r: Var, mask: &ObservationMask, window: usize) -> Result<Var> {
    masked_avg_pool(g, r, mask, window)
}

fn prediction_tail(g: &mut Graph, b: &Bindings, input: Var, blocks: usize) -> Result<Var> {
    let h = b.conv("prediction.input")?.same(g, input)?;
    let h = g.relu(h)?;
    let h = residual_stack(g, b, "prediction", h, blocks)?;
    let out = b.conv("prediction.head")?.same(g, h)?;
    g.relu(out)
}

/// Depth from context features and the aggregate: concat, 1x1 conv, five
/// residual blocks, 1x1 head, ReLU.
pub fn predict(g: &mut Graph, b: &Bindings, x: Var, r_agg: Var) -> Result<Var> {
    let xr = g.concat_channels(x, r_agg)?;
    prediction_tail(g, b, xr, PREDICTION_BLOCKS)
}

/// The inductive late-fusion network.
pub fn forward(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    rgb: Var,
    sparse_depth: Var,
    mask: &ObservationMask,
) -> Result<Var> {
    let sparse_depth = observed_depth(g, sparse_depth, mask)?;
    let x = context_encoder(g, b, cfg, rgb)?;
    let (y, _) = depth_encoder(g, b, cfg, sparse_depth, mask)?;
    let r = demonstrate(g, b, x, y, mask)?;
    let r_agg = aggregate(g, r, mask, cfg.aggregation_window)?;
    predict(g, b, x, r_agg)
}

/// Plain late fusion: concat(x, y) followed by nine residual blocks.
pub fn forward_vanilla_baseline(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    rgb: Var,
    sparse_depth: Var,
    mask: &ObservationMask,
) -> Result<Var> {
    let sparse_depth = observed_depth(g, sparse_depth, mask)?;
    let x = context_encoder(g, b, cfg, rgb)?;
    let (y, _) = depth_encoder(g, b, cfg, sparse_depth, mask)?;
    let xy = g.concat_channels(x, y)?;
    prediction_tail(g, b, xy, VANILLA_FUSION_BLOCKS)
}

/// Monocular baseline: context encoder and prediction head only.
pub fn forward_context_only(g: &mut Graph, b: &Bindings, cfg: &ModelConfig, rgb: Var) -> Result<Var> {
    let x = context_encoder(g, b, cfg, rgb)?;
    prediction_tail(g, b, x, PREDICTION_BLOCKS)
}

fn zeros_like_features(g: &mut Graph, like: Var, channels: usize) -> Result<Var> {
    let (bsz, _, h, w) = g.value(like).expect_rank4("zeros_like_features")?;
    Ok(g.constant(Tensor::zeros(&[bsz, channels, h, w])))
}

/// Forward pass for one phase of the training schedule.
pub fn forward_phase(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    phase: Phase,
    rgb: Var,
    sparse_depth: Var,
    mask: &ObservationMask,
) -> Result<Var> {
    match (cfg.variant, phase) {
        (Variant::ContextOnly, _) => forward_context_only(g, b, cfg, rgb),
        (_, Phase::DepthPretrain) => depth_pretrain_head(g, b, cfg, sparse_depth, mask),
        (Variant::Inductive, Phase::ContextPretrain) => {
            let x = context_encoder(g, b, cfg, rgb)?;
            let zero = zeros_like_features(g, x, cfg.demo_channels)?;
            predict(g, b, x, zero)
        }
        (Variant::Vanilla, Phase::ContextPretrain) => {
            let x = context_encoder(g, b, cfg, rgb)?;
            let zero = zeros_like_features(g, x, cfg.depth_channels)?;
            let xy = g.concat_channels(x, zero)?;
            prediction_tail(g, b, xy, VANILLA_FUSION_BLOCKS)
        }
        (Variant::Inductive, Phase::Joint) => forward(g, b, cfg, rgb, sparse_depth, mask),
        (Variant::Vanilla, Phase::Joint) => forward_vanilla_baseline(g, b, cfg, rgb, sparse_depth, mask),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Group, Model};
    use super::*;
    use crate::rng::SplitMix64;

    fn random(shape: &[usize], rng: &mut SplitMix64, scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| scale * rng.next_f64()).collect()).unwrap()
    }

    fn sparse_inputs(h: usize, w: usize, n: usize, seed: u64) -> (Tensor, ObservationMask) {
        let mut rng = SplitMix64::new(seed);
        let mut idx: Vec<usize> = (0..h * w).collect();
        rng.shuffle(&mut idx);
        let mut bits = vec![false; h * w];
        let mut d = vec![0.0; h * w];
        for &i in &idx[..n] {
            bits[i] = true;
            d[i] = rng.uniform(1.0, 5.0);
        }
        (
            Tensor::new(&[1, 1, h, w], d).unwrap(),
            ObservationMask::from_bools(1, h, w, &bits).unwrap(),
        )
    }

    #[test]
    fn depth_encoder_shapes_for_both_depths() {
        for layers in [3, 5] {
            let cfg = ModelConfig {
                depth_layers: layers,
                ..ModelConfig::tiny(Variant::Inductive)
            };
            let m = Model::new(cfg.clone(), 1).unwrap();
            let mut g = Graph::new();
            let b = m.bind(&mut g, &[]);
            let (d, mask) = sparse_inputs(16, 16, 5, 2);
            let dv = g.constant(d);
            let (y, out_mask) = depth_encoder(&mut g, &b, &cfg, dv, &mask).unwrap();
            assert_eq!(g.shape(y), &[1, cfg.depth_channels, 16, 16]);
            assert_eq!(out_mask.dims(), (1, 16, 16));
        }
    }

    #[test]
    fn depth_encoder_empty_mask_gives_bias_features() {
        let cfg = ModelConfig::tiny(Variant::Inductive);
        let mut m = Model::new(cfg.clone(), 1).unwrap();
        let last = format!("scn{}.bias", cfg.depth_layers - 1);
        m.depth_encoder
            .get_mut(&last)
            .unwrap()
            .value
            .data_mut()
            .copy_from_slice(&[0.3, -0.2]);
        let mut g = Graph::new();
        let b = m.bind(&mut g, &[]);
        let dv = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let (y, out_mask) = depth_encoder(&mut g, &b, &cfg, dv, &ObservationMask::zeros(1, 8, 8)).unwrap();
        let d = g.value(y).data();
        assert!(d[..64].iter().all(|&v| v == 0.3));
        assert!(d[64..].iter().all(|&v| v == 0.0));
        assert_eq!(out_mask.count(), 0);
    }

    #[test]
    fn depth_encoder_rejects_depth_outside_mask() {
        let cfg = ModelConfig::tiny(Variant::Inductive);
        let m = Model::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, &[]);
        let mut d = vec![0.0; 64];
        d[3] = 2.0;
        let dv = g.constant(Tensor::new(&[1, 1, 8, 8], d).unwrap());
        let err = depth_encoder(&mut g, &b, &cfg, dv, &ObservationMask::zeros(1, 8, 8)).unwrap_err();
        assert_eq!(err, Error::DepthMaskDisagreement { index: 3, value: 2.0 });
    }

    #[test]
    fn context_encoder_shape_and_divisibility() {
        let cfg = ModelConfig::tiny(Variant::Inductive);
        let m = Model::new(cfg.clone(), 4).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, &[]);
        let mut rng = SplitMix64::new(0);
        let rgb = g.constant(random(&[1, 3, 16, 24], &mut rng, 1.0));
        let x = context_encoder(&mut g, &b, &cfg, rgb).unwrap();
        assert_eq!(g.shape(x), &[1, cfg.context_channels, 16, 24]);
        let odd = g.constant(Tensor::zeros(&[1, 3, 12, 16]));
        assert!(context_encoder(&mut g, &b, &cfg, odd).is_err());
    }

    #[test]
    fn demonstrate_zero_weights_aggregate_to_zero() {
        let cfg = ModelConfig::tiny(Variant::Inductive);
        let mut m = Model::new(cfg.clone(), 4).unwrap();
        for (_, p) in m.demonstration.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let b = m.bind(&mut g, &[]);
        let mut rng = SplitMix64::new(1);
        let x = g.constant(random(&[1, cfg.context_channels, 8, 8], &mut rng, 1.0));
        let y = g.constant(random(&[1, cfg.depth_channels, 8, 8], &mut rng, 1.0));
        let mask = ObservationMask::ones(1, 8, 8);
        let r = demonstrate(&mut g, &b, x, y, &mask).unwrap();
        assert_eq!(g.shape(r), &[1, cfg.demo_channels, 8, 8]);
        let agg = aggregate(&mut g, r, &mask, 0).unwrap();
        assert!(g.value(agg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_is_nonnegative_single_channel() {
        let cfg = ModelConfig::tiny(Variant::Inductive);
        let m = Model::new(cfg.clone(), 5).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, &[]);
        let mut rng = SplitMix64::new(2);
        let x = g.constant(random(&[1, cfg.context_channels, 8, 8], &mut rng, 4.0));
        let r = g.constant(random(&[1, cfg.demo_channels, 8, 8], &mut rng, 4.0));
        let out = predict(&mut g, &b, x, r).unwrap();
        assert_eq!(g.shape(out), &[1, 1, 8, 8]);
        assert!(g.value(out).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn forward_variants_share_shape_contract() {
        let (d, mask) = sparse_inputs(16, 16, 6, 3);
        let mut rng = SplitMix64::new(3);
        let rgb = random(&[1, 3, 16, 16], &mut rng, 1.0);
        for v in Variant::ALL {
            let m = Model::new(ModelConfig::tiny(v), 7).unwrap();
            let out = m.predict_depth(&rgb, &d, &mask).unwrap();
            assert_eq!(out.shape(), &[1, 1, 16, 16], "{v}");
            assert!(out.all_finite());
        }
    }

    #[test]
    fn context_only_ignores_depth() {
        let m = Model::new(ModelConfig::tiny(Variant::ContextOnly), 7).unwrap();
        let mut rng = SplitMix64::new(3);
        let rgb = random(&[1, 3, 8, 8], &mut rng, 1.0);
        let (d1, m1) = sparse_inputs(8, 8, 3, 1);
        let (d2, m2) = sparse_inputs(8, 8, 40, 2);
        let a = m.predict_depth(&rgb, &d1, &m1).unwrap();
        let b = m.predict_depth(&rgb, &d2, &m2).unwrap();
        let c = m
            .predict_depth(&rgb, &Tensor::zeros(&[1, 1, 8, 8]), &ObservationMask::zeros(1, 8, 8))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn forward_is_deterministic_and_finite_on_empty_mask() {
        let m = Model::new(ModelConfig::tiny(Variant::Inductive), 8).unwrap();
        let mut rng = SplitMix64::new(4);
        let rgb = random(&[1, 3, 8, 8], &mut rng, 1.0);
        let (d, mask) = sparse_inputs(8, 8, 4, 5);
        let a = m.predict_depth(&rgb, &d, &mask).unwrap();
        let b = m.predict_depth(&rgb, &d, &mask).unwrap();
        assert_eq!(a.data(), b.data());
        let e = m
            .predict_depth(&rgb, &Tensor::zeros(&[1, 1, 8, 8]), &ObservationMask::zeros(1, 8, 8))
            .unwrap();
        assert!(e.all_finite());
    }

    #[test]
    fn phases_train_the_right_groups() {
        let cfg = ModelConfig::tiny(Variant::Inductive);
        let mut m = Model::new(cfg.clone(), 8).unwrap();
        let mut rng = SplitMix64::new(4);
        let rgb = random(&[1, 3, 8, 8], &mut rng, 1.0);
        let (d, mask) = sparse_inputs(8, 8, 4, 5);
        let mut g = Graph::new();
        let b = m.bind(&mut g, &[Group::DepthEncoder]);
        let rv = g.constant(rgb);
        let dv = g.constant(d);
        let out = forward_phase(&mut g, &b, &cfg, Phase::DepthPretrain, rv, dv, &mask).unwrap();
        let loss = g.sum(out).unwrap();
        g.backward(loss).unwrap();
        m.collect_grads(&g, &b).unwrap();
        assert!(m.depth_encoder.iter().all(|(_, p)| p.value.grad().is_some()));
        assert!(m.context_encoder.iter().all(|(_, p)| p.value.grad().is_none()));
    }
}
