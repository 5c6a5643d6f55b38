//! Generate a small synthetic cohort, save it, reload it and compare the
//! ray-cast wall thickness of a clean rendering with the analytic labels.
//!
//! `cargo run --release --example generate_phantoms -- [subjects] [out.rwtd]`

use resrnn::phantom::{self, io, measure_thickness, PhantomRanges, REGION_COUNT};

fn main() -> resrnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(6);
    let out = args
        .next()
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("phantoms.rwtd"));

    let data = phantom::generate_dataset(n, 42, &PhantomRanges::default())?;
    io::save_dataset(&out, &data)?;
    let back = io::load_dataset(&out)?;
    assert_eq!(back.len(), data.len());
    println!("wrote {} subjects to {}", data.len(), out.display());
    print!("{}", io::manifest(&back));

    let spec = &back[0].spec;
    println!("\nsubject 0, frame-by-frame thickness in pixels (label / ray-cast)");
    for f in (0..spec.frames).step_by(4) {
        let measured = measure_thickness(&spec.render_clean(f), spec.image_size, spec.center, &spec.levels);
        let cells: Vec<String> = (0..REGION_COUNT)
            .map(|r| format!("{:5.2}/{:5.2}", spec.thickness(r, f), measured[r]))
            .collect();
        println!("frame {f:>2}: {}", cells.join("  "));
    }
    Ok(())
}
