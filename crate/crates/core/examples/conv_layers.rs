//! Per-layer convolution timings for the default 32x80 geometry.
//!
//! `cargo run --release --example conv_layers -- [base_width]`

use std::time::Instant;

use lowshot::kernels::{conv2d_backward, conv2d_forward, ConvGeom};

fn main() {
    let base: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(16);
    let n = 16;
    let layers = [
        (1, base, 3, 1, 32, 80),
        (base, base, 3, 1, 32, 80),
        (base, 2 * base, 3, 2, 32, 80),
        (2 * base, 2 * base, 3, 1, 16, 40),
        (2 * base, 4 * base, 3, 2, 16, 40),
        (4 * base, 4 * base, 3, 1, 8, 20),
        (4 * base, 8 * base, 3, 2, 8, 20),
        (8 * base, 8 * base, 3, 1, 4, 10),
    ];
    let (mut tf, mut tb) = (0.0, 0.0);
    for (ci, co, k, s, h, w) in layers {
        let g = ConvGeom::new(ci, co, (k, k), s, 1, (h, w)).unwrap();
        let x: Vec<f32> = (0..n * g.in_len()).map(|i| (i % 13) as f32 * 0.1).collect();
        let wt: Vec<f32> = (0..co * g.patch_len()).map(|i| (i % 7) as f32 * 0.01).collect();
        let t0 = Instant::now();
        let out = conv2d_forward(n, &g, &x, &wt, None).unwrap();
        let f = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        conv2d_backward(n, &g, &x, &wt, &out, (true, true, true));
        let b = t0.elapsed().as_secs_f64();
        let macs = (n * g.out_len() * g.patch_len()) as f64;
        println!(
            "{ci:>3}->{co:<3} s{s} {h}x{w}: fwd {:6.2} ms ({:5.1} GMAC/s)  bwd {:6.2} ms ({:5.1} GMAC/s)",
            f * 1e3,
            macs / f / 1e9,
            b * 1e3,
            2.0 * macs / b / 1e9
        );
        tf += f;
        tb += b;
    }
    println!("total fwd {:.1} ms, bwd {:.1} ms", tf * 1e3, tb * 1e3);
}
