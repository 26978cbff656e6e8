//! Train the exchange architecture (or any baseline) on a small synthetic
//! split and watch the dual loss and validation metrics.
//!
//! ```bash
//! cargo run --release -p swarmfuse --example train_method [METHOD] [EPOCHS]
//! ```

use swarmfuse::scenegen::{generate_dataset, GenConfig, Preset};
use swarmfuse::train::{evaluate, fit, Hyperparams, Method, ModelConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let method: Method = args.get(1).map(String::as_str).unwrap_or("MAIN").parse().unwrap();
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(6);

    let train_ds = generate_dataset(&GenConfig::preset_defaults(Preset::Sequence, 5, 300, 2)).unwrap();
    let val_ds = generate_dataset(&GenConfig::preset_defaults(Preset::Sequence, 6, 60, 2)).unwrap();
    println!("training {method} for {epochs} epochs on 300 samples");

    let hyper = Hyperparams { epochs, ..Hyperparams::default() };
    let result = fit(&train_ds, &val_ds, method, &ModelConfig::default(), &hyper, 9).unwrap();
    for row in &result.log {
        println!(
            "epoch {:>2}: seg loss {:.4}, corr loss {}, val mIoU {:.4}",
            row.epoch,
            row.seg_loss,
            row.corr_loss.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            row.val_miou
        );
    }
    println!("best epoch: {}", result.best_epoch);

    let report = evaluate(&result.model, &val_ds).unwrap();
    println!(
        "validation: mean accuracy {:.2}, mean IoU {:.2} (occluded region)",
        100.0 * report.scores.mean_accuracy,
        100.0 * report.scores.mean_iou
    );
    if let Some(acc) = report.corr_accuracy {
        println!("correspondence accuracy {:.3}", acc);
    }
}
