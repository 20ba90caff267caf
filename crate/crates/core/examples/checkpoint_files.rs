//! Writes a checkpoint and a tensor file, reads them back and shows that a
//! damaged file is rejected.

use ladderdiff::cli::files::{encode_tensor, load_tensor, save_tensor, Checkpoint};
use ladderdiff::network::{NetConfig, ResolutionLadder, UnifiedNet};
use ladderdiff::numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ladderdiff::Result<()> {
    let dir = std::env::temp_dir().join("ladderdiff-checkpoint-example");
    let mut cfg = NetConfig::new(ResolutionLadder::new(vec![16, 8])?, 1);
    cfg.base_channels = 8;
    cfg.channel_mults = vec![1, 2];
    let net = UnifiedNet::<f32>::build(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;

    let path = dir.join("init.ldif");
    Checkpoint::new(&cfg, 0, net.params().clone()).save(&path)?;
    let back = Checkpoint::<f32>::load(&path)?;
    back.check_config(&cfg, false)?;
    println!("{}: {} tensors, identical = {}", path.display(), back.params.len(), back.params == *net.params());

    let t = Tensor::<f64>::randn(&[4, 1, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let tpath = dir.join("noise.ldtn");
    save_tensor(&tpath, &t)?;
    println!("{}: {} bytes, identical = {}", tpath.display(), encode_tensor(&t).len(), load_tensor::<f64>(&tpath)? == t);

    let mut bytes = std::fs::read(&tpath).expect("just written");
    bytes.truncate(bytes.len() - 5);
    std::fs::write(&tpath, bytes).expect("writable");
    match load_tensor::<f64>(&tpath) {
        Ok(_) => println!("truncated file accepted"),
        Err(e) => println!("truncated file rejected: {e}"),
    }
    Ok(())
}
