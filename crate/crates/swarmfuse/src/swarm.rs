//! Simulated distributed deployment.
//!
//! Each round runs in three phases with barriers between them: every agent
//! encodes its own image locally, every agent sends its feature grid to its
//! topology neighbors (each message independently dropped with the
//! configured probability), and every agent then matches, warps, fuses and
//! decodes whatever arrived. An agent's output depends only on its own
//! image and the payloads actually delivered to it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, FeatureMap};
use crate::error::{Error, Result};
use crate::fuse::{exchange_and_fuse, ExchangeOptions, SourceLabel};
use crate::scenegen::SceneSample;
use crate::tensor::{Graph, Tensor};
use crate::train::Model;

/// Who talks to whom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    FullyConnected,
    Ring,
    Star,
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Topology> {
        match s {
            "full" | "fully_connected" => Ok(Topology::FullyConnected),
            "ring" => Ok(Topology::Ring),
            "star" => Ok(Topology::Star),
            other => Err(Error::Config(format!(
                "unknown topology `{other}` (fully_connected|ring|star)"
            ))),
        }
    }
}

impl Topology {
    /// Directed receiver list for one sender.
    pub fn receivers(&self, sender: usize, n_agents: usize) -> Vec<usize> {
        if n_agents <= 1 {
            return Vec::new();
        }
        match self {
            Topology::FullyConnected => (0..n_agents).filter(|&r| r != sender).collect(),
            Topology::Ring => {
                let prev = (sender + n_agents - 1) % n_agents;
                let next = (sender + 1) % n_agents;
                let mut out = vec![next];
                if prev != next {
                    out.push(prev);
                }
                out.sort_unstable();
                out
            }
            Topology::Star => {
                if sender == 0 {
                    (1..n_agents).collect()
                } else {
                    vec![0]
                }
            }
        }
    }
}

/// Swarm deployment settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwarmConfig {
    pub n_agents: usize,
    pub topology: Topology,
    pub drop_prob: f64,
    pub seed: u64,
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents < 1 {
            return Err(Error::Config("n_agents must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!("drop_prob {} outside [0, 1]", self.drop_prob)));
        }
        Ok(())
    }
}

/// One feature-grid transfer between two agents.
#[derive(Debug, Clone)]
pub struct AgentMessage {
    pub sender: usize,
    pub receiver: usize,
    pub frame_id: u64,
    pub payload: FeatureMap,
    pub payload_bytes: usize,
}

/// Ledger entry for one attempted message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageRecord {
    pub frame_id: u64,
    pub sender: usize,
    pub receiver: usize,
    pub delivered: bool,
    pub bytes: usize,
}

/// Accounting for one round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundStats {
    pub records: Vec<MessageRecord>,
    pub n_agents: usize,
    /// Bytes of one raw RGB image at this round's resolution, for
    /// comparison against feature exchange.
    pub raw_image_bytes: usize,
}

impl RoundStats {
    pub fn sent(&self) -> usize {
        self.records.len()
    }

    pub fn delivered(&self) -> usize {
        self.records.iter().filter(|r| r.delivered).count()
    }

    pub fn dropped(&self) -> usize {
        self.sent() - self.delivered()
    }

    pub fn bytes_sent(&self) -> usize {
        self.records.iter().map(|r| r.bytes).sum()
    }

    pub fn bytes_delivered(&self) -> usize {
        self.records.iter().filter(|r| r.delivered).map(|r| r.bytes).sum()
    }

    /// Comma-separated rows: frame_id, sender, receiver, delivered, bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame_id,sender,receiver,delivered,bytes\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.frame_id, r.sender, r.receiver, r.delivered as u8, r.bytes
            ));
        }
        out
    }
}

/// Per-agent results of one round.
pub struct RoundOutput {
    /// Task output per agent, `[1, c_out, h, w]`.
    pub outputs: Vec<Tensor>,
    /// Per-cell fusion source labels per agent.
    pub sources: Vec<Vec<SourceLabel>>,
    pub stats: RoundStats,
}

fn drop_roll(seed: u64, frame_id: u64, sender: usize, receiver: usize) -> f64 {
    // One independent stream per directed edge per frame, so a message's
    // fate never depends on iteration order and delivery is pointwise
    // monotone in drop_prob under a fixed seed.
    let mut mix = seed;
    for v in [frame_id, sender as u64 + 1, receiver as u64 + 1] {
        mix ^= v.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        mix = (mix ^ (mix >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        mix ^= mix >> 27;
    }
    ChaCha8Rng::seed_from_u64(mix).gen_range(0.0..1.0)
}

/// Run one synchronized round: encode, exchange, fuse and decode.
pub fn run_round(sample: &SceneSample, model: &Model, config: &SwarmConfig) -> Result<RoundOutput> {
    config.validate()?;
    if sample.n_agents() != config.n_agents {
        return Err(Error::Config(format!(
            "sample has {} agents, config wants {}",
            sample.n_agents(),
            config.n_agents
        )));
    }
    if config.n_agents > 1 && !model.method.uses_similarity() {
        return Err(Error::Config(format!(
            "method {} has no distributed multi-agent deployment",
            model.method
        )));
    }
    let cfg = &model.config.backbone;

    // Phase 1: local encoding. Each agent's features become a plain value,
    // exactly what the wire would carry.
    let mut feature_maps = Vec::with_capacity(config.n_agents);
    for agent in 0..config.n_agents {
        let mut g = Graph::new();
        let img = backbone::image_input(&mut g, &sample.images[agent], cfg.height, cfg.width)?;
        let f = backbone::encode(&mut g, &model.params, cfg, img)?;
        let squeezed = backbone::squeeze_batch(&mut g, f)?;
        feature_maps.push(FeatureMap {
            agent_id: agent,
            frame_id: sample.frame_id,
            data: g.value(squeezed).clone(),
        });
    }

    // Phase 2: exchange with per-message drops.
    let mut inboxes: Vec<Vec<AgentMessage>> = vec![Vec::new(); config.n_agents];
    let mut records = Vec::new();
    for sender in 0..config.n_agents {
        for receiver in config.topology.receivers(sender, config.n_agents) {
            let payload = &feature_maps[sender];
            let bytes = payload.payload_bytes();
            let delivered = drop_roll(config.seed, sample.frame_id, sender, receiver) >= config.drop_prob;
            records.push(MessageRecord { frame_id: sample.frame_id, sender, receiver, delivered, bytes });
            if delivered {
                inboxes[receiver].push(AgentMessage {
                    sender,
                    receiver,
                    frame_id: sample.frame_id,
                    payload: payload.clone(),
                    payload_bytes: bytes,
                });
            }
        }
    }

    // Phase 3: per-agent fusion and decoding from own image + deliveries.
    let mode = model
        .method
        .smoothing_mode()
        .unwrap_or(crate::fuse::SmoothingMode::Learned);
    let opts = ExchangeOptions { tau: model.config.tau, mode };
    let mut outputs = Vec::with_capacity(config.n_agents);
    let mut sources = Vec::with_capacity(config.n_agents);
    for agent in 0..config.n_agents {
        let mut g = Graph::new();
        let img = backbone::image_input(&mut g, &sample.images[agent], cfg.height, cfg.width)?;
        let f = backbone::encode(&mut g, &model.params, cfg, img)?;
        let own = backbone::squeeze_batch(&mut g, f)?;
        let mut aux = Vec::with_capacity(inboxes[agent].len());
        for msg in &inboxes[agent] {
            let v = g.constant(msg.payload.data.clone());
            aux.push((msg.sender, v));
        }
        let fused = exchange_and_fuse(&mut g, &model.params, agent, own, &aux, opts)?;
        let fused4 = backbone::unsqueeze_batch(&mut g, fused.fused)?;
        let out = backbone::decode(&mut g, &model.params, cfg, fused4)?;
        outputs.push(g.value(out).clone());
        sources.push(fused.sources);
    }

    Ok(RoundOutput {
        outputs,
        sources,
        stats: RoundStats {
            records,
            n_agents: config.n_agents,
            raw_image_bytes: cfg.height * cfg.width * 3 * 4,
        },
    })
}

/// Aggregate table over many rounds: message and byte totals, per-agent
/// per-round averages, and the feature-vs-raw-image exchange ratio.
pub fn bandwidth_report(stats: &[RoundStats]) -> String {
    let mut out = String::new();
    let rounds = stats.len();
    out.push_str(&format!("{:>8}  {:>8}  {:>10}  {:>12}  {:>14}\n", "rounds", "sent", "delivered", "bytes_sent", "bytes_delivered"));
    let sent: usize = stats.iter().map(RoundStats::sent).sum();
    let delivered: usize = stats.iter().map(RoundStats::delivered).sum();
    let bytes_sent: usize = stats.iter().map(RoundStats::bytes_sent).sum();
    let bytes_delivered: usize = stats.iter().map(RoundStats::bytes_delivered).sum();
    out.push_str(&format!(
        "{rounds:>8}  {sent:>8}  {delivered:>10}  {bytes_sent:>12}  {bytes_delivered:>14}\n"
    ));
    if rounds == 0 {
        return out;
    }
    let n_agents = stats[0].n_agents.max(1);
    let per_agent_round = bytes_sent as f64 / (rounds * n_agents) as f64;
    out.push_str(&format!("bytes per agent per round: {per_agent_round:.1}\n"));
    if let Some(first) = stats[0].records.first() {
        let raw = stats[0].raw_image_bytes;
        out.push_str(&format!(
            "feature payload {} bytes vs raw image {} bytes (ratio {:.4})\n",
            first.bytes,
            raw,
            first.bytes as f64 / raw as f64
        ));
    }
    out
}
