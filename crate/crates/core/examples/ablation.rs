//! Five-fold comparison of the CNN baseline against the circular ResRNN on a
//! tiny cohort, printed as one table.
//!
//! `cargo run --release --example ablation -- [iterations]`

use resrnn::eval;
use resrnn::model::{ConvSpec, ResRnnConfig, Variant};
use resrnn::nn::CircleConfig;
use resrnn::phantom::{self, PhantomRanges, Range};
use resrnn::train::TrainConfig;

fn main() -> resrnn::Result<()> {
    let iters: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let ranges = PhantomRanges {
        image_size: 24,
        frames: 5,
        inner_radius: Range::new(4.0, 5.0),
        base_thickness: Range::new(2.5, 4.0),
        amplitude: Range::new(0.5, 1.0),
        ..PhantomRanges::default()
    };
    let base = ResRnnConfig {
        frames: 5,
        input_size: 20,
        conv: [ConvSpec::new(4, 3, 1, 1), ConvSpec::new(4, 3, 1, 1), ConvSpec::new(6, 3, 1, 1)],
        embed_dim: 12,
        temporal_depth: CircleConfig::new(5)?,
        spatial_depth: CircleConfig::new(6)?,
        ..ResRnnConfig::default()
    };
    let data = phantom::generate_dataset(10, 11, &ranges)?;
    let splits = eval::five_fold(&data, 0)?;
    let cfgs: Vec<ResRnnConfig> = [Variant::Cnn, Variant::ResRnnCircle]
        .into_iter()
        .map(|v| base.clone().with_variant(v))
        .collect();
    let tc = TrainConfig {
        max_iters: iters,
        step_size: (iters / 2).max(1),
        batch_subjects: 2,
        log_every: iters.max(1),
        ..TrainConfig::default()
    };
    let results = eval::run_cv(&data, &splits, &cfgs, &tc, None)?;
    print!("{}", eval::comparison_tsv(&results));
    Ok(())
}
