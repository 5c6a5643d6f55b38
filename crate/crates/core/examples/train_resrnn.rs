//! Train a reduced circular ResRNN on small phantoms and report held-out error.
//!
//! `cargo run --release --example train_resrnn -- [iterations]`

use resrnn::eval;
use resrnn::model::{ConvSpec, ResRnnConfig, Variant};
use resrnn::nn::CircleConfig;
use resrnn::phantom::{self, PhantomRanges};
use resrnn::train::{self, TrainConfig};

/// 32-pixel phantoms with six frames, cropped to 28.
pub fn small_setup() -> resrnn::Result<(PhantomRanges, ResRnnConfig)> {
    let ranges = PhantomRanges {
        image_size: 32,
        frames: 6,
        inner_radius: phantom::Range::new(5.0, 7.0),
        base_thickness: phantom::Range::new(3.0, 5.0),
        amplitude: phantom::Range::new(0.5, 1.5),
        ..PhantomRanges::default()
    };
    let model = ResRnnConfig {
        frames: 6,
        input_size: 28,
        conv: [ConvSpec::new(4, 3, 1, 1), ConvSpec::new(6, 3, 1, 1), ConvSpec::new(8, 3, 1, 1)],
        embed_dim: 16,
        temporal_depth: CircleConfig::new(6)?,
        spatial_depth: CircleConfig::new(6)?,
        variant: Variant::ResRnnCircle,
        ..ResRnnConfig::default()
    };
    Ok((ranges, model))
}

fn main() -> resrnn::Result<()> {
    let iters: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    let (ranges, model) = small_setup()?;
    let data = phantom::generate_dataset(12, 3, &ranges)?;
    let (train_set, test_set) = data.split_at(9);

    let tc = TrainConfig {
        max_iters: iters,
        step_size: (iters / 3).max(1),
        log_every: (iters / 10).max(1),
        ..TrainConfig::default()
    };
    let out = train::train(train_set, &model, &tc, None)?;
    for (it, loss) in out.loss_curve.iter().step_by(out.loss_curve.len().div_ceil(10).max(1)) {
        println!("iter {it:>5}  loss {loss:.6}");
    }
    let report = eval::evaluate(&out.params, test_set, &model, Some(1.8))?;
    print!("{}", report.table_tsv());
    Ok(())
}
