//! Measures training throughput of the LeNet configuration.

use std::time::Instant;

use rewc::nn::{adam_step, build_network, Activations, AdamState, ArchSpec};

fn main() -> rewc::Result<()> {
    let spec: ArchSpec = "lenet".parse()?;
    let mut net = build_network(&spec, 1)?;
    let mut state = AdamState::new(&net);
    let n = 64;
    let x = Activations::new(
        n,
        net.input_shape(),
        (0..n * 1024)
            .map(|i| ((i * 7919) % 255) as f64 / 255.0)
            .collect(),
    )?;
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let steps = 50;
    let start = Instant::now();
    for _ in 0..steps {
        let cache = net.forward(&x)?;
        let (_, grads) = net.backward(&cache, &labels)?;
        adam_step(&mut net, &grads, &mut state, 1e-3)?;
    }
    let per_sample = start.elapsed().as_secs_f64() / (steps * n) as f64;
    println!(
        "{:.3} ms/sample, {:.1} s per 30k-sample epoch",
        per_sample * 1e3,
        per_sample * 30_000.0
    );
    Ok(())
}
