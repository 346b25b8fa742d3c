//! Checking reverse-mode gradients of a small program against central
//! differences.
//!
//!     cargo run --example gradcheck

use distpro::autodiff::{grad_check, GradCheck, Tensor};

fn main() -> distpro::Result<()> {
    let x = Tensor::new(&[2, 1, 5, 5], (0..50).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let k = Tensor::new(&[3, 1, 3, 3], (0..27).map(|i| (i as f64 * 0.61).cos() * 0.5).collect())?;
    let b = Tensor::from_vec(vec![0.1, -0.2, 0.05]);
    let report = grad_check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let y = g.sigmoid(y)?;
            let p = g.global_avg_pool(y)?;
            let p = g.reshape(p, &[2, 3])?;
            g.cross_entropy(p, &[2, 0])
        },
        &[x, k, b],
        GradCheck::default(),
    )?;
    println!("{report}");
    Ok(())
}
