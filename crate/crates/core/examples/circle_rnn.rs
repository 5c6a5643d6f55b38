//! Compare the plain and circular LSTM runners on one random cell.
//!
//! The circular runner feeds the sequence `depth` times and keeps the last
//! pass, so its first output already "remembers" the end of the sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resrnn::nn::{self, bind_lstm, CircleConfig, InitScheme};
use resrnn::tensor::{Tape, Tensor};

fn main() -> resrnn::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cell = nn::init_lstm(3, 2, InitScheme::UniformFanIn, &mut rng);
    let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();

    let mut tape = Tape::new();
    let bound = bind_lstm(&mut tape, &cell, false)?;
    let inputs = xs
        .iter()
        .map(|x| Ok(tape.constant(Tensor::row(x.clone())?)))
        .collect::<resrnn::Result<Vec<_>>>()?;

    let plain = nn::rnn_run_plain(&mut tape, &bound, &inputs)?;
    println!("step  plain            depth 2          depth 4");
    let c2 = nn::rnn_run_circle(&mut tape, &bound, &inputs, CircleConfig::new(2)?)?;
    let c4 = nn::rnn_run_circle(&mut tape, &bound, &inputs, CircleConfig::new(4)?)?;
    for t in 0..inputs.len() {
        let fmt = |v: &[f64]| format!("[{:+.4} {:+.4}]", v[0], v[1]);
        println!(
            "{t:>4}  {}  {}  {}",
            fmt(tape.value(plain[t]).data()),
            fmt(tape.value(c2[t]).data()),
            fmt(tape.value(c4[t]).data())
        );
    }
    Ok(())
}
