//! Distributed deployment: six agents exchange feature grids over a chosen
//! topology with per-message drops, then fuse and decode locally.
//!
//! ```bash
//! cargo run --release -p swarmfuse --example swarm_round
//! ```

use swarmfuse::fuse::SourceLabel;
use swarmfuse::scenegen::{generate_dataset, GenConfig, Preset};
use swarmfuse::swarm::{bandwidth_report, run_round, SwarmConfig, Topology};
use swarmfuse::train::{init_model, Method, ModelConfig};

fn main() {
    let n = 6;
    let ds = generate_dataset(&GenConfig::preset_defaults(Preset::Cross, 31, 4, n)).unwrap();
    let model = init_model(Method::Main, &ModelConfig::default(), n, 1).unwrap();

    for topology in [Topology::FullyConnected, Topology::Ring, Topology::Star] {
        let cfg = SwarmConfig { n_agents: n, topology, drop_prob: 0.0, seed: 7 };
        let out = run_round(&ds.samples[0], &model, &cfg).unwrap();
        println!(
            "{topology:?}: {} messages, {} bytes total",
            out.stats.sent(),
            out.stats.bytes_sent()
        );
    }

    // Lossy fully-connected rounds with bandwidth accounting.
    let cfg = SwarmConfig { n_agents: n, topology: Topology::FullyConnected, drop_prob: 0.3, seed: 7 };
    let mut stats = Vec::new();
    for sample in &ds.samples {
        let out = run_round(sample, &model, &cfg).unwrap();
        let foreign: usize = out.sources[0]
            .iter()
            .filter(|s| matches!(s, SourceLabel::Agent(_)))
            .count();
        println!(
            "frame {}: {}/{} delivered; agent 0 fused {} of {} cells from neighbors",
            sample.frame_id,
            out.stats.delivered(),
            out.stats.sent(),
            foreign,
            out.sources[0].len()
        );
        stats.push(out.stats);
    }
    print!("{}", bandwidth_report(&stats));
}
