//! Wall time of one training step (forward, loss, backward) per variant
//! at the desk-scale architecture.
//!
//! Usage: `step_timing [batch] [f32|f64]`

use std::time::Instant;

use dmem::network::{build_network, ArchConfig, Variant};
use dmem::{Graph, Scalar, Shape, Tensor};

fn run<T: Scalar>(batch: usize) -> dmem::Result<()> {
    let base = ArchConfig::default();
    let (h, w) = base.input_size;
    let x = Tensor::<T>::from_fn(Shape::new(batch, 3, h, w), |n, c, y, x| {
        T::from_f64_lossy(((n * 7 + c * 3 + y * 5 + x) as f64 * 0.37).sin())
    });
    let target: Vec<u8> = (0..batch * h * w).map(|i| (i % 4) as u8).collect();
    let weights = [T::one(); 4];
    for variant in Variant::ALL {
        let model = build_network::<T>(&base.with_variant(variant), 1)?;
        for rep in 0..2 {
            let t0 = Instant::now();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let logits = model.forward(&mut g, &p, xv)?;
            let t1 = Instant::now();
            let loss = g.cross_entropy(logits, &target, &weights)?;
            g.backward(loss)?;
            let t2 = Instant::now();
            println!(
                "{variant:>16} rep {rep}: params {} forward {:.3}s backward {:.3}s per-sample {:.3}s",
                model.parameter_count(),
                (t1 - t0).as_secs_f64(),
                (t2 - t1).as_secs_f64(),
                (t2 - t0).as_secs_f64() / batch as f64,
            );
        }
    }
    Ok(())
}

fn main() -> dmem::Result<()> {
    let mut args = std::env::args().skip(1);
    let batch = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    match args.next().as_deref() {
        Some("f32") => run::<f32>(batch),
        _ => run::<f64>(batch),
    }
}
