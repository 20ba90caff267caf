//! Parameter sharing across the ladder: per-stage active sets and the cost of
//! multi-resolution support over a single-resolution network.

use ladderdiff::network::{NetConfig, ResolutionLadder, UnifiedNet};
use ladderdiff::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ladderdiff::Result<()> {
    let ladder = ResolutionLadder::halving(32, 3)?;
    let cfg = NetConfig::new(ladder.clone(), 3);
    let net = UnifiedNet::<f32>::build(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("ladder {ladder}: {} parameters", net.param_count());
    println!("multi-resolution overhead: {} parameters", net.multires_overhead()?);
    for stage in 1..=ladder.len() {
        let active = net.active_params(stage)?;
        let numel: usize = active.names.iter().map(|n| net.params().get(n).map_or(0, Tensor::numel)).sum();
        println!(
            "stage {stage} ({}x{}): {} tensors, {numel} parameters, {} trunk tensors",
            ladder.resolution(stage)?,
            ladder.resolution(stage)?,
            active.names.len(),
            active.trunk().len()
        );
    }

    let r = ladder.resolution(2)?;
    let x = Tensor::<f32>::zeros(&[1, 3, r, r]);
    let cond = Tensor::<f32>::zeros(&[1, 3, r, r]);
    let d = net.forward(&x, Some(&cond), 1.0, 2, None)?;
    println!("stage 2 denoiser output shape {:?}", d.shape());
    Ok(())
}
