//! Context-based smoothing of similarity volumes.
//!
//! Single-cell matching is noisy: a degraded or ambiguous cell produces a
//! flat or wrong fiber. The smoothing network sees the whole volume as an
//! image over A's cell grid (channels = match distribution), so it can use
//! neighboring fibers' confidence to repair a cell's distribution before
//! anything downstream commits to an argmax.

use rand_chacha::ChaCha8Rng;

use crate::correspond::{SimilarityVolume, VolumeKind};
use crate::error::{Error, Result};
use crate::tensor::{he_conv_init_into, Graph, ParamSet, Tensor};

/// Hidden width of the smoothing encoder-decoder.
pub const SMOOTH_WIDTH: usize = 64;

/// Parameters for the smoothing network over `channels`-deep volumes.
///
/// The channel count is tied to the B-grid size, so one smoothing network
/// serves exactly one feature resolution.
pub fn init_smoothing(params: &mut ParamSet, channels: usize, rng: &mut ChaCha8Rng) {
    he_conv_init_into(params, "smooth.c1.w", &[SMOOTH_WIDTH, channels, 3, 3], rng);
    params.insert("smooth.c1.b", Tensor::zeros(&[SMOOTH_WIDTH]));
    he_conv_init_into(params, "smooth.c2.w", &[SMOOTH_WIDTH, SMOOTH_WIDTH, 3, 3], rng);
    params.insert("smooth.c2.b", Tensor::zeros(&[SMOOTH_WIDTH]));
    he_conv_init_into(params, "smooth.c3.w", &[SMOOTH_WIDTH, SMOOTH_WIDTH, 3, 3], rng);
    params.insert("smooth.c3.b", Tensor::zeros(&[SMOOTH_WIDTH]));
    he_conv_init_into(params, "smooth.c4.w", &[channels, SMOOTH_WIDTH, 3, 3], rng);
    params.insert("smooth.c4.b", Tensor::zeros(&[channels]));
}

/// Run the smoothing encoder-decoder over a normalized volume and
/// re-normalize each fiber.
///
/// Architecture: two conv-relu-maxpool blocks over the A grid, then two
/// upsample-conv stages back to full cell resolution, then a per-fiber
/// softmax. Needs the A grid divisible by 4.
pub fn smooth_volume(g: &mut Graph, params: &ParamSet, vol: &SimilarityVolume) -> Result<SimilarityVolume> {
    if vol.kind != VolumeKind::Normalized {
        return Err(Error::Config(format!(
            "smoothing expects a normalized volume, got {:?}",
            vol.kind
        )));
    }
    if vol.h_a % 4 != 0 || vol.w_a % 4 != 0 {
        return Err(Error::Dimension(format!(
            "smoothing needs the cell grid divisible by 4, got {}x{}",
            vol.h_a, vol.w_a
        )));
    }
    let channels = vol.channels();
    let w1 = params.get("smooth.c1.w").ok_or_else(|| Error::Config("missing smoothing parameters".into()))?;
    if w1.shape()[1] != channels {
        return Err(Error::shapes("smoothing channel width", w1.shape(), &[SMOOTH_WIDTH, channels, 3, 3]));
    }

    // Fibers [cells, ch] -> image [1, ch, h_a, w_a].
    let spatial = g.reshape(vol.var, &[vol.h_a, vol.w_a, channels])?;
    let chw = g.permute(spatial, &[2, 0, 1])?;
    let mut x = g.reshape(chw, &[1, channels, vol.h_a, vol.w_a])?;

    for i in [1, 2] {
        let w = params.bind(g, &format!("smooth.c{i}.w"))?;
        let b = params.bind(g, &format!("smooth.c{i}.b"))?;
        x = g.conv2d(x, w, b, 1, 1)?;
        x = g.relu(x);
        x = g.maxpool2x(x)?;
    }
    for i in [3, 4] {
        x = g.upsample2x(x)?;
        let w = params.bind(g, &format!("smooth.c{i}.w"))?;
        let b = params.bind(g, &format!("smooth.c{i}.b"))?;
        x = g.conv2d(x, w, b, 1, 1)?;
        if i == 3 {
            x = g.relu(x);
        }
    }

    // Image back to fibers and re-normalize.
    let flat = g.reshape(x, &[channels, vol.cells_a()])?;
    let fibers = g.permute(flat, &[1, 0])?;
    let probs = g.softmax(fibers, 1)?;
    Ok(SimilarityVolume { var: probs, kind: VolumeKind::Smoothed, ..*vol })
}

/// Collapse every fiber to a one-hot at its argmax (ties to the lowest
/// channel). The result is a constant: no gradient flows through it.
pub fn one_hot_collapse(g: &mut Graph, vol: &SimilarityVolume) -> Result<SimilarityVolume> {
    if vol.kind != VolumeKind::Normalized {
        return Err(Error::Config(format!(
            "one-hot collapse expects a normalized volume, got {:?}",
            vol.kind
        )));
    }
    let channels = vol.channels();
    let winners = g.argmax_along(vol.var, 1);
    let mut data = vec![0.0f32; vol.cells_a() * channels];
    for (cell, &c) in winners.iter().enumerate() {
        data[cell * channels + c] = 1.0;
    }
    let t = Tensor::from_vec(&[vol.cells_a(), channels], data)?;
    let var = g.constant(t);
    Ok(SimilarityVolume { var, kind: VolumeKind::Normalized, ..*vol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspond::build_normalized_volume;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;

    fn normalized_volume(g: &mut Graph, seed: u64) -> SimilarityVolume {
        let a = g.constant(gradcheck::random_tensor(&[8, 8, 8], -1.0, 1.0, seed));
        let b = g.constant(gradcheck::random_tensor(&[8, 8, 8], -1.0, 1.0, seed + 1));
        build_normalized_volume(g, a, b, 1.0, (0, 1)).unwrap()
    }

    fn smoothing_params(channels: usize, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_smoothing(&mut params, channels, &mut rng);
        params
    }

    #[test]
    fn smoothed_fibers_are_distributions_of_same_shape() {
        let mut g = Graph::new();
        let vol = normalized_volume(&mut g, 10);
        let params = smoothing_params(vol.channels(), 1);
        let out = smooth_volume(&mut g, &params, &vol).unwrap();
        assert_eq!(out.kind, VolumeKind::Smoothed);
        let v = g.value(out.var);
        assert_eq!(v.shape(), &[64, 65]);
        for cell in 0..64 {
            let fiber = &v.data()[cell * 65..(cell + 1) * 65];
            assert!(fiber.iter().all(|&p| p >= 0.0));
            let s: f32 = fiber.iter().sum();
            assert!((s - 1.0).abs() <= 1e-5, "fiber {cell} sums to {s}");
        }
    }

    #[test]
    fn smoothing_rejects_unnormalized_input() {
        let mut g = Graph::new();
        let mut vol = normalized_volume(&mut g, 11);
        vol.kind = VolumeKind::RawDistance;
        let params = smoothing_params(vol.channels(), 2);
        assert!(smooth_volume(&mut g, &params, &vol).is_err());
    }

    #[test]
    fn one_hot_examples() {
        let mut g = Graph::new();
        let t = Tensor::from_vec(&[2, 3], vec![0.1, 0.7, 0.2, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let var = g.constant(t);
        let vol = SimilarityVolume {
            var,
            kind: VolumeKind::Normalized,
            h_a: 2,
            w_a: 1,
            h_b: 1,
            w_b: 2,
            pair: (0, 1),
        };
        let once = one_hot_collapse(&mut g, &vol).unwrap();
        let v = g.value(once.var).data().to_vec();
        assert_eq!(v, vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]); // ties to channel 0

        let twice = one_hot_collapse(&mut g, &once).unwrap();
        assert_eq!(g.value(twice.var).data(), &v[..]);

        // Zero entropy per fiber.
        for cell in 0..2 {
            let fiber = &v[cell * 3..(cell + 1) * 3];
            let entropy: f32 = fiber
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            assert_eq!(entropy, 0.0);
        }
    }

    #[test]
    fn smoothing_gradient_reaches_its_parameters() {
        let mut g = Graph::new();
        let vol = normalized_volume(&mut g, 12);
        let params = smoothing_params(vol.channels(), 3);
        let out = smooth_volume(&mut g, &params, &vol).unwrap();
        let labels: Vec<u32> = (0..64u32).map(|c| c % 65).collect();
        let (loss, _) = g.cross_entropy(out.var, &labels, true, None).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<(&str, f32)> = g
            .param_grads()
            .map(|(n, gr)| (n, gr.iter().map(|v| v.abs()).sum::<f32>()))
            .collect();
        assert!(!grads.is_empty());
        for (name, total) in grads {
            assert!(total > 0.0, "no gradient reached {name}");
        }
    }
}
