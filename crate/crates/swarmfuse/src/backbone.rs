//! Split convolutional backbone: a spatial feature encoder per agent, the
//! cross-agent exchange stage in the middle, and a task decoder.
//!
//! One parameter set serves every agent; deployment is N copies of the same
//! network, never N networks.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{he_conv_init_into, Graph, ParamSet, Tensor, Var};

/// What the decoder emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskHead {
    /// Per-pixel class logits, `[1, num_classes, h, w]`.
    Segmentation,
    /// RGB values clamped to [0, 1], `[1, 3, h, w]`.
    Reconstruction,
}

/// Geometry and widths of the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    /// Total downsampling factor at the exchange point; must equal
    /// `2^encoder_widths.len()`.
    pub stride: usize,
    /// Channel width of the exchanged feature map.
    pub feature_dim: usize,
    /// Channel width per encoder downsampling block.
    pub encoder_widths: Vec<usize>,
    /// Channel width per decoder stage (first stage runs at feature
    /// resolution, each later one after an upsample).
    pub decoder_widths: Vec<usize>,
    pub task: TaskHead,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            height: 32,
            width: 32,
            stride: 4,
            feature_dim: 16,
            encoder_widths: vec![16, 32],
            decoder_widths: vec![32, 16],
            task: TaskHead::Segmentation,
            num_classes: 5,
        }
    }
}

impl BackboneConfig {
    pub fn feature_height(&self) -> usize {
        self.height / self.stride
    }

    pub fn feature_width(&self) -> usize {
        self.width / self.stride
    }

    pub fn cells(&self) -> usize {
        self.feature_height() * self.feature_width()
    }

    pub fn out_channels(&self) -> usize {
        match self.task {
            TaskHead::Segmentation => self.num_classes,
            TaskHead::Reconstruction => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.encoder_widths.len();
        if blocks == 0 || self.stride != 1 << blocks {
            return Err(Error::Config(format!(
                "stride {} must be 2^{} for {} downsampling blocks",
                self.stride, blocks, blocks
            )));
        }
        if self.decoder_widths.len() != blocks {
            return Err(Error::Config(format!(
                "decoder has {} stages for {} encoder blocks",
                self.decoder_widths.len(),
                blocks
            )));
        }
        if self.height % self.stride != 0 || self.width % self.stride != 0 {
            return Err(Error::Config(format!(
                "stride {} must divide image extent {}x{}",
                self.stride, self.height, self.width
            )));
        }
        if self.feature_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config("feature_dim and num_classes must be positive".into()));
        }
        Ok(())
    }
}

/// The exchanged value: one agent's spatial feature grid at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub agent_id: usize,
    pub frame_id: u64,
    /// Feature grid `[k, h_s, w_s]`.
    pub data: Tensor,
}

impl FeatureMap {
    /// Wire size of the payload: one f32 per feature value.
    pub fn payload_bytes(&self) -> usize {
        self.data.numel() * 4
    }
}

// ── Parameters ────────────────────────────────────────────────────────────

/// Create encoder parameters taking `in_channels` image planes.
pub fn init_encoder(
    params: &mut ParamSet,
    cfg: &BackboneConfig,
    in_channels: usize,
    rng: &mut ChaCha8Rng,
) {
    let mut prev = in_channels;
    for (i, &width) in cfg.encoder_widths.iter().enumerate() {
        he_conv_init_into(params, &format!("enc.b{i}.w"), &[width, prev, 3, 3], rng);
        params.insert(&format!("enc.b{i}.b"), Tensor::zeros(&[width]));
        prev = width;
    }
    he_conv_init_into(params, "enc.proj.w", &[cfg.feature_dim, prev, 3, 3], rng);
    params.insert("enc.proj.b", Tensor::zeros(&[cfg.feature_dim]));
}

/// Create decoder parameters taking `in_features` channels at the feature
/// resolution.
pub fn init_decoder(
    params: &mut ParamSet,
    cfg: &BackboneConfig,
    in_features: usize,
    rng: &mut ChaCha8Rng,
) {
    let mut prev = in_features;
    for (i, &width) in cfg.decoder_widths.iter().enumerate() {
        he_conv_init_into(params, &format!("dec.b{i}.w"), &[width, prev, 3, 3], rng);
        params.insert(&format!("dec.b{i}.b"), Tensor::zeros(&[width]));
        prev = width;
    }
    he_conv_init_into(params, "dec.out.w", &[cfg.out_channels(), prev, 3, 3], rng);
    params.insert("dec.out.b", Tensor::zeros(&[cfg.out_channels()]));
}

// ── Forward passes ────────────────────────────────────────────────────────

fn conv_block(g: &mut Graph, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = params.bind(g, &format!("{name}.w"))?;
    let b = params.bind(g, &format!("{name}.b"))?;
    g.conv2d(x, w, b, 1, 1)
}

/// Encode an image `[1, c_in, h, w]` into a feature grid `[1, k, h/s, w/s]`:
/// conv-relu-maxpool per block, then a linear projection conv.
pub fn encode(g: &mut Graph, params: &ParamSet, cfg: &BackboneConfig, image: Var) -> Result<Var> {
    let shape = g.value(image).shape().to_vec();
    let expect_c = params
        .get("enc.b0.w")
        .ok_or_else(|| Error::Config("missing encoder parameters".into()))?
        .shape()[1];
    if shape.len() != 4 || shape[0] != 1 || shape[1] != expect_c || shape[2] != cfg.height || shape[3] != cfg.width {
        return Err(Error::shapes(
            "encode input",
            &shape,
            &[1, expect_c, cfg.height, cfg.width],
        ));
    }
    let mut x = image;
    for i in 0..cfg.encoder_widths.len() {
        x = conv_block(g, params, &format!("enc.b{i}"), x)?;
        x = g.relu(x);
        x = g.maxpool2x(x)?;
    }
    conv_block(g, params, "enc.proj", x)
}

/// Decode a feature grid `[1, c, h/s, w/s]` into the task output at full
/// resolution.
pub fn decode(g: &mut Graph, params: &ParamSet, cfg: &BackboneConfig, features: Var) -> Result<Var> {
    let shape = g.value(features).shape().to_vec();
    let expect_c = params
        .get("dec.b0.w")
        .ok_or_else(|| Error::Config("missing decoder parameters".into()))?
        .shape()[1];
    if shape.len() != 4
        || shape[0] != 1
        || shape[1] != expect_c
        || shape[2] != cfg.feature_height()
        || shape[3] != cfg.feature_width()
    {
        return Err(Error::shapes(
            "decode input",
            &shape,
            &[1, expect_c, cfg.feature_height(), cfg.feature_width()],
        ));
    }
    let mut x = features;
    for i in 0..cfg.decoder_widths.len() {
        x = conv_block(g, params, &format!("dec.b{i}"), x)?;
        x = g.relu(x);
        if i + 1 < cfg.decoder_widths.len() {
            x = g.upsample2x(x)?;
        }
    }
    x = g.upsample2x(x)?;
    let out = conv_block(g, params, "dec.out", x)?;
    Ok(match cfg.task {
        TaskHead::Segmentation => out,
        TaskHead::Reconstruction => g.clamp01(out),
    })
}

/// Drop the leading batch-of-one axis: `[1, k, h, w]` -> `[k, h, w]`.
pub fn squeeze_batch(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::Dimension(format!("expected [1, c, h, w], got {shape:?}")));
    }
    g.reshape(x, &shape[1..])
}

/// Inverse of [`squeeze_batch`].
pub fn unsqueeze_batch(g: &mut Graph, x: Var) -> Result<Var> {
    let mut shape = vec![1usize];
    shape.extend_from_slice(g.value(x).shape());
    g.reshape(x, &shape)
}

/// Build the image constant for one agent: `[1, 3, h, w]`.
pub fn image_input(g: &mut Graph, image: &[f32], height: usize, width: usize) -> Result<Var> {
    let t = Tensor::from_vec(&[1, 3, height, width], image.to_vec())?;
    Ok(g.constant(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            height: 16,
            width: 16,
            stride: 4,
            feature_dim: 4,
            encoder_widths: vec![4, 8],
            decoder_widths: vec![8, 4],
            task: TaskHead::Segmentation,
            num_classes: 3,
        }
    }

    fn init_all(cfg: &BackboneConfig, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_encoder(&mut params, cfg, 3, &mut rng);
        init_decoder(&mut params, cfg, cfg.feature_dim, &mut rng);
        params
    }

    #[test]
    fn encode_produces_expected_grid() {
        let cfg = BackboneConfig::default();
        let params = init_all(&cfg, 1);
        let mut g = Graph::new();
        let img = image_input(&mut g, &vec![0.5; 3 * 32 * 32], 32, 32).unwrap();
        let f = encode(&mut g, &params, &cfg, img).unwrap();
        assert_eq!(g.value(f).shape(), &[1, 16, 8, 8]);
    }

    #[test]
    fn paper_scale_input_is_supported() {
        // 128x128 at stride 4 gives a 32x32 feature grid.
        let cfg = BackboneConfig { height: 128, width: 128, ..BackboneConfig::default() };
        let params = init_all(&cfg, 2);
        let mut g = Graph::new();
        let img = image_input(&mut g, &vec![0.25; 3 * 128 * 128], 128, 128).unwrap();
        let f = encode(&mut g, &params, &cfg, img).unwrap();
        assert_eq!(g.value(f).shape(), &[1, 16, 32, 32]);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny_cfg();
        let params = init_all(&cfg, 3);
        let run = || {
            let mut g = Graph::new();
            let data: Vec<f32> = (0..3 * 16 * 16).map(|i| (i as f32 * 0.37).sin().abs()).collect();
            let img = image_input(&mut g, &data, 16, 16).unwrap();
            let f = encode(&mut g, &params, &cfg, img).unwrap();
            g.value(f).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decode_output_shapes_follow_task() {
        let cfg = tiny_cfg();
        let params = init_all(&cfg, 4);
        let mut g = Graph::new();
        let f = g.constant(Tensor::filled(&[1, 4, 4, 4], 0.3));
        let out = decode(&mut g, &params, &cfg, f).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 3, 16, 16]);

        let rcfg = BackboneConfig { task: TaskHead::Reconstruction, ..tiny_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut rparams = ParamSet::new();
        init_encoder(&mut rparams, &rcfg, 3, &mut rng);
        init_decoder(&mut rparams, &rcfg, rcfg.feature_dim, &mut rng);
        let mut g = Graph::new();
        let f = g.constant(gradcheck::random_tensor(&[1, 4, 4, 4], -3.0, 3.0, 7));
        let out = decode(&mut g, &rparams, &rcfg, f).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 3, 16, 16]);
        assert!(g.value(out).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encode_rejects_wrong_shape_with_both_shapes() {
        let cfg = tiny_cfg();
        let params = init_all(&cfg, 6);
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let err = encode(&mut g, &params, &cfg, img).unwrap_err();
        assert!(err.to_string().contains("[1, 3, 8, 8]"), "{err}");
    }

    #[test]
    fn encode_decode_gradient_checks_end_to_end() {
        // Finite differences on the first-layer weights through the full
        // encoder-decoder stack against a probe loss.
        let cfg = BackboneConfig {
            height: 8,
            width: 8,
            stride: 4,
            feature_dim: 3,
            encoder_widths: vec![3, 4],
            decoder_widths: vec![4, 3],
            task: TaskHead::Segmentation,
            num_classes: 3,
        };
        let params = init_all(&cfg, 8);
        let image = gradcheck::random_tensor(&[1, 3, 8, 8], 0.05, 1.0, 9);
        let w0 = params.get("enc.b0.w").unwrap().clone();
        let report = gradcheck::check_gradients(&[w0], 1e-3, 10, |g, vars| {
            let mut p = params.clone();
            p.insert("enc.b0.w", g.value(vars[0]).clone());
            // Rebind every other parameter as constants so only the probed
            // weight is a leaf; the probed leaf itself is spliced back in.
            let img = g.constant(image.clone());
            let f = encode_with_override(g, &p, &cfg, img, vars[0]);
            decode(g, &p, &cfg, f).unwrap()
        });
        assert!(report.max_rel_err < 1e-3, "max rel err {}", report.max_rel_err);
    }

    // Encoder forward wired so the probed first-layer weight is the given
    // graph leaf rather than a fresh constant.
    fn encode_with_override(
        g: &mut Graph,
        params: &ParamSet,
        cfg: &BackboneConfig,
        image: Var,
        w0: Var,
    ) -> Var {
        let b0 = g.constant(params.get("enc.b0.b").unwrap().clone());
        let mut x = g.conv2d(image, w0, b0, 1, 1).unwrap();
        x = g.relu(x);
        x = g.maxpool2x(x).unwrap();
        for i in 1..cfg.encoder_widths.len() {
            let w = g.constant(params.get(&format!("enc.b{i}.w")).unwrap().clone());
            let b = g.constant(params.get(&format!("enc.b{i}.b")).unwrap().clone());
            x = g.conv2d(x, w, b, 1, 1).unwrap();
            x = g.relu(x);
            x = g.maxpool2x(x).unwrap();
        }
        let w = g.constant(params.get("enc.proj.w").unwrap().clone());
        let b = g.constant(params.get("enc.proj.b").unwrap().clone());
        g.conv2d(x, w, b, 1, 1).unwrap()
    }

    #[test]
    fn translation_by_stride_shifts_features_one_cell() {
        // A periodic texture shifted by one stride produces features shifted
        // by one cell, away from the zero-padded borders.
        let cfg = BackboneConfig { height: 64, width: 64, ..BackboneConfig::default() };
        let params = init_all(&cfg, 11);
        let (h, w, s) = (cfg.height, cfg.width, cfg.stride);
        let tex = |y: usize, x: usize, c: usize| -> f32 {
            let (fy, fx) = (y % h, x % w);
            (((fy * 31 + fx * 17 + c * 7) % 101) as f32) / 101.0
        };
        let mut base = vec![0.0f32; 3 * h * w];
        let mut shifted = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    base[(c * h + y) * w + x] = tex(y, x, c);
                    shifted[(c * h + y) * w + x] = tex(y, x + s, c);
                }
            }
        }
        let mut g = Graph::new();
        let a = image_input(&mut g, &base, h, w).unwrap();
        let b = image_input(&mut g, &shifted, h, w).unwrap();
        let fa = encode(&mut g, &params, &cfg, a).unwrap();
        let fb = encode(&mut g, &params, &cfg, b).unwrap();
        let (hs, ws) = (cfg.feature_height(), cfg.feature_width());
        // Receptive field at stride 4 spans ~18 px, so stay 3 cells inside.
        let margin = 3;
        let va = g.value(fa);
        let vb = g.value(fb);
        for k in 0..cfg.feature_dim {
            for cy in margin..hs - margin {
                for cx in margin..ws - margin - 1 {
                    let x_b = vb.at(&[0, k, cy, cx]);
                    let x_a = va.at(&[0, k, cy, cx + 1]);
                    assert_eq!(x_a.to_bits(), x_b.to_bits(), "cell ({cy},{cx}) ch {k}");
                }
            }
        }
    }

    #[test]
    fn parameter_count_is_shared_across_agents() {
        // One parameter set serves any number of deployments: encoding two
        // different images binds the same named parameters, adding none.
        let cfg = tiny_cfg();
        let params = init_all(&cfg, 12);
        let count = params.scalar_count();
        let mut g = Graph::new();
        for seed in 0..3u64 {
            let img = g.constant(gradcheck::random_tensor(&[1, 3, 16, 16], 0.0, 1.0, seed));
            encode(&mut g, &params, &cfg, img).unwrap();
        }
        assert_eq!(params.scalar_count(), count);
    }
}
