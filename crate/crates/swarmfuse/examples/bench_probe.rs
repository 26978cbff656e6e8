// scratch: full acceptance-scale ordering experiment
use std::time::Instant;
use swarmfuse::scenegen::{generate_dataset, GenConfig, Preset};
use swarmfuse::train::{evaluate, fit, Hyperparams, Method, ModelConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let t0 = Instant::now();
    let train_ds = generate_dataset(&GenConfig::preset_defaults(Preset::Sequence, 100, 2000, 2)).unwrap();
    let val_ds = generate_dataset(&GenConfig::preset_defaults(Preset::Sequence, 200, 400, 2)).unwrap();
    println!("datasets: {:?}", t0.elapsed());

    for method in Method::ALL {
        let t = Instant::now();
        let hyper = Hyperparams { epochs, ..Hyperparams::default() };
        let res = fit(&train_ds, &val_ds, method, &ModelConfig::default(), &hyper, 42).unwrap();
        let report = evaluate(&res.model, &val_ds).unwrap();
        println!(
            "{:>12}: mIoU {:.2}  mAcc {:.2}  corr_raw {:?}  corr {:?}  best_ep {}  [{:?}]",
            method.name(),
            100.0 * report.scores.mean_iou,
            100.0 * report.scores.mean_accuracy,
            report.corr_raw_accuracy.map(|v| (v * 1000.0).round() / 10.0),
            report.corr_accuracy.map(|v| (v * 1000.0).round() / 10.0),
            res.best_epoch,
            t.elapsed()
        );
        for l in res.log.iter() {
            println!("    ep {:>2}: seg {:.3} corr {:?} val_miou {:.3}", l.epoch, l.seg_loss, l.corr_loss.map(|v| (v*100.0).round()/100.0), l.val_miou);
        }
    }
    println!("total: {:?}", t0.elapsed());
}
