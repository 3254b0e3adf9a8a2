//! Times training steps of the default digits ConvNet on random data.
//!
//! cargo run --release -p ncdg --example step_timing -- [steps] [first|second]

use ncdg::coverage::NeuronActMap;
use ncdg::data::{intensity_reverse, make_batch, ImageDataset};
use ncdg::nn::build_digits_convnet;
use ncdg::training::{ncdg_step, OptimizerState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ncdg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let second_order = args.get(2).is_none_or(|s| s != "first");
    let cfg = TrainConfig {
        second_order,
        ..TrainConfig::default()
    };
    let (spec, mut params) = build_digits_convnet(10, 3, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pixels: Vec<u8> = (0..32 * 32 * 32 * 3).map(|_| rng.random()).collect();
    let ds = ImageDataset::new("noise", (32, 32, 3), pixels, (0..32).map(|i| i % 10).collect(), 10)?;
    let raw = make_batch(&ds, &(0..32).collect::<Vec<_>>())?;
    let aug = intensity_reverse(&raw);
    let mut map = NeuronActMap::new(&spec);
    let mut opt = OptimizerState::new(cfg.optimizer, &params);
    for i in 0..steps {
        let (next, rec) = ncdg_step(&spec, &params, &raw, Some(&aug), &mut map, &cfg, &mut opt, (i, 0))?;
        params = next;
        println!(
            "step {i}: {:.0} ms, total {:.5}, sim {:.5}",
            rec.wall_ms, rec.total, rec.sim
        );
    }
    Ok(())
}
