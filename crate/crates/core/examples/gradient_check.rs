//! Finite-difference check of every model variant on the toy configuration.

use resrnn::model::{ResRnnConfig, Variant};
use resrnn::train::model_grad_check;

fn main() -> resrnn::Result<()> {
    for v in Variant::ALL {
        let report = model_grad_check(&ResRnnConfig::toy().with_variant(v), 0, 1e-5)?;
        println!("{:<16} {:>3} tensors  max relative error {:.2e}", v.name(), report.per_param.len(), report.max_error());
    }
    Ok(())
}
