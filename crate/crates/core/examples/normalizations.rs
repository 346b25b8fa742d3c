//! The five ways of turning raw pathway weights into loss weights.
//!
//!     cargo run --example normalizations

use distpro::losses::{normalize_alpha, AlphaState, Normalization};

fn main() -> distpro::Result<()> {
    let raw = [1.5, 1.0, 0.2, -0.4];
    for n in Normalization::ALL {
        let w = normalize_alpha(&raw, n, 1.0)?;
        let sum: f64 = w.iter().sum();
        println!("{:<15} {:?}  sum {sum:.4}", n.to_string(), w.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    }
    // the bias entry of the biased softmax absorbs the remaining mass
    let s = AlphaState::new(vec![0.0, 0.0], Normalization::BiasedSoftmax, 1.0)?;
    println!("raw [0, 0], bias 1: weights {:?}, bias mass {:.6}", s.normalized, s.bias_mass());
    Ok(())
}
