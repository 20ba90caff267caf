//! Short per-stage training run on procedural shapes; prints smoothed losses.

use ladderdiff::cascade::{CascadeConfig, LossMode, TrainConfig, TrainState};
use ladderdiff::cli::shapes::gen_shapes;
use ladderdiff::network::{NetConfig, ResolutionLadder, UnifiedNet};
use ladderdiff::numerics::{AdamConfig, Tensor};
use ladderdiff::schedule::LossWeightConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ladderdiff::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let ladder = ResolutionLadder::new(vec![16, 8])?;
    let mut cfg = NetConfig::new(ladder.clone(), 1);
    cfg.base_channels = 16;
    cfg.channel_mults = vec![1, 2];
    cfg.blocks_per_level = 1;
    cfg.embed_dim = 32;
    let net = UnifiedNet::<f32>::build(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("{} parameters, ladder {}", net.param_count(), ladder);

    let mut state = TrainState::new(
        net,
        TrainConfig {
            cascade: CascadeConfig::with_defaults(ladder, &[17, 18])?,
            loss: LossWeightConfig::default(),
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            mode: LossMode::PerStage,
            seed: 0,
        },
    )?;
    let data = gen_shapes(0, 1024, 16, &[vec![0.9], vec![-0.2], vec![0.4]])?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut window = vec![0.0; 2];
    for step in 1..=steps {
        let items = (0..32)
            .map(|_| data.images.batch_item(rng.random_range(0..1024)))
            .collect::<ladderdiff::Result<Vec<_>>>()?;
        let losses = state.train_step(&Tensor::concat_batch(&items)?, None)?;
        for (w, l) in window.iter_mut().zip(&losses) {
            *w += l / 10.0;
        }
        if step % 10 == 0 {
            println!("step {step:>4}  16x16 {:.4}  8x8 {:.4}", window[0], window[1]);
            window = vec![0.0; 2];
        }
    }
    Ok(())
}
