//! Qualitative image dumps: inputs, masks, predictions, warped-feature
//! magnitudes and fusion sources for one sample, written as PNGs.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::error::Result;
use crate::fuse::SourceLabel;
use crate::metrics;
use crate::scenegen::{class_color, SceneSample};
use crate::tensor::Graph;
use crate::train::{forward_method, predict_labels, Model};

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_rgb_planes(path: &Path, planes: &[f32], h: usize, w: usize) -> Result<()> {
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                to_u8(planes[y * w + x]),
                to_u8(planes[(h + y) * w + x]),
                to_u8(planes[(2 * h + y) * w + x]),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| crate::error::Error::Config(format!("png write failed: {e}")))?;
    Ok(())
}

fn save_class_map(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let c = class_color(labels[y * w + x]);
            img.put_pixel(x as u32, y as u32, image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]));
        }
    }
    img.save(path).map_err(|e| crate::error::Error::Config(format!("png write failed: {e}")))?;
    Ok(())
}

fn save_gray(path: &Path, values: &[f32], h: usize, w: usize, scale: usize) -> Result<()> {
    let mut img = GrayImage::new((w * scale) as u32, (h * scale) as u32);
    for y in 0..h * scale {
        for x in 0..w * scale {
            img.put_pixel(x as u32, y as u32, image::Luma([to_u8(values[(y / scale) * w + x / scale])]));
        }
    }
    img.save(path).map_err(|e| crate::error::Error::Config(format!("png write failed: {e}")))?;
    Ok(())
}

/// Render one sample through a model and write the qualitative set.
/// Returns the written paths.
pub fn dump_sample(model: &Model, sample: &SceneSample, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = &model.config.backbone;
    let (h, w) = (cfg.height, cfg.width);
    let (hs, ws) = (cfg.feature_height(), cfg.feature_width());
    let mut written = Vec::new();

    for (i, img) in sample.images.iter().enumerate() {
        let path = out_dir.join(format!("agent{i}_input.png"));
        save_rgb_planes(&path, img, h, w)?;
        written.push(path);
    }
    let mask_f: Vec<f32> = sample.degradation.iter().map(|&m| m as f32).collect();
    let path = out_dir.join("degradation_mask.png");
    save_gray(&path, &mask_f, h, w, 1)?;
    written.push(path);

    let path = out_dir.join("labels_gt.png");
    save_class_map(&path, &sample.labels[0], h, w)?;
    written.push(path);

    let mut g = Graph::new();
    let artifacts = forward_method(&mut g, model, sample)?;
    let pred = predict_labels(&g, artifacts.logits);
    let path = out_dir.join("prediction.png");
    save_class_map(&path, &pred, h, w)?;
    written.push(path);

    if let Some(fused) = &artifacts.fused {
        for pair in &fused.pairs {
            // Per-cell L2 magnitude of the warped features, max-normalized.
            let data = g.value(pair.warped).data();
            let k = g.value(pair.warped).shape()[0];
            let cells = hs * ws;
            let mut norms = vec![0.0f32; cells];
            for (cell, n) in norms.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for kk in 0..k {
                    let v = data[kk * cells + cell];
                    acc += v * v;
                }
                *n = acc.sqrt();
            }
            let peak = norms.iter().fold(0.0f32, |a, &b| a.max(b)).max(1e-6);
            norms.iter_mut().for_each(|v| *v /= peak);
            let path = out_dir.join(format!("pair{}_warped_norm.png", pair.aux_agent));
            save_gray(&path, &norms, hs, ws, cfg.stride)?;
            written.push(path);
        }

        // Fusion sources: own cells keep the background color, foreign
        // cells take the sending agent's class-palette color.
        let mut src_img = RgbImage::new((ws * cfg.stride) as u32, (hs * cfg.stride) as u32);
        for cy in 0..hs {
            for cx in 0..ws {
                let color = match fused.sources[cy * ws + cx] {
                    SourceLabel::Own => [40u8, 40, 40],
                    SourceLabel::Agent(a) => {
                        let c = class_color((a % 5) as u8 + 1);
                        [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]
                    }
                };
                for dy in 0..cfg.stride {
                    for dx in 0..cfg.stride {
                        src_img.put_pixel(
                            (cx * cfg.stride + dx) as u32,
                            (cy * cfg.stride + dy) as u32,
                            image::Rgb(color),
                        );
                    }
                }
            }
        }
        let path = out_dir.join("fusion_sources.png");
        src_img
            .save(&path)
            .map_err(|e| crate::error::Error::Config(format!("png write failed: {e}")))?;
        written.push(path);
    }

    // Per-sample metric line for quick inspection.
    let conf = metrics::confusion(&pred, &sample.labels[0], &sample.degradation, cfg.num_classes)?;
    let scores = metrics::iou_per_class(&conf);
    let path = out_dir.join("metrics.txt");
    std::fs::write(
        &path,
        format!(
            "mean_accuracy = {:.4}\nmean_iou = {:.4}\n",
            scores.mean_accuracy, scores.mean_iou
        ),
    )?;
    written.push(path);
    Ok(written)
}
