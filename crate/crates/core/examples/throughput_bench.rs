//! Single-stage full-resolution sampling against a three-stage cascade on the
//! same randomly initialised network.

use ladderdiff::cli::commands::bench_net;
use ladderdiff::cli::config::RunConfig;
use ladderdiff::network::UnifiedNet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ladderdiff::Result<()> {
    let cfg = RunConfig::parse(
        "ladder = 16, 8, 4
base_channels = 16
channel_mults = 1, 1, 1
blocks_per_level = 1
embed_dim = 32
steps_stage1 = 9
steps_stage2 = 15
steps_stage3 = 19
",
    )?;
    let net = UnifiedNet::<f32>::build(cfg.net.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let batch = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let out = bench_net(&net, &cfg, batch, 1, 3)?;
    for r in [&out.single, &out.cascade] {
        println!("{:<8} {:>8.3}s per batch  {:>7.1} img/s", r.label, r.latency_s, r.throughput_img_per_s);
        for s in &r.stages {
            println!("         stage {} ({}x{}): {} calls, {:.2} ms/call", s.stage, s.resolution, s.resolution, s.nfe, 1e3 * s.latency_s);
        }
    }
    println!("speedup {:+.1}%  ({})", 100.0 * out.speedup, out.single.hardware);
    Ok(())
}
