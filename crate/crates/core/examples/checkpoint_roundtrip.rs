//! Save freshly initialized parameters, reload them and confirm the reloaded
//! model predicts bit-identically.

use resrnn::model::{self, checkpoint, ResRnnConfig, ResRnnParams};
use resrnn::nn::InitScheme;
use resrnn::phantom::{self, PhantomRanges};
use resrnn::train;

fn main() -> resrnn::Result<()> {
    let cfg = ResRnnConfig::default();
    let params = ResRnnParams::init(&cfg, 9, InitScheme::UniformFanIn)?;
    let path = std::env::temp_dir().join("resrnn-example.rwtc");
    checkpoint::save(&path, &cfg, &params)?;
    let (cfg2, params2) = checkpoint::load(&path)?;
    println!(
        "{}: {} parameters, {} bytes",
        path.display(),
        params2.count(),
        std::fs::metadata(&path)?.len()
    );

    let subject = phantom::generate_dataset(1, 5, &PhantomRanges::default())?.remove(0);
    let x = train::center_stack(&subject, cfg.input_size)?;
    let a = model::forward(&params, &x, &cfg)?;
    let b = model::forward(&params2, &x, &cfg2)?;
    assert_eq!(a, b);
    println!("frame 0 estimate: {:?}", &a.values()[..cfg.regions]);
    Ok(())
}
