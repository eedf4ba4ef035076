//! Rough convolution-throughput check:
//!
//!   cargo run --release --example bench_conv
//!
//! Prints GMAC/s for forward and backward kernels at training-like shapes.

use std::time::Instant;

use sepgconv::ops::{conv2d_batched, Padding};
use sepgconv::Tensor;

fn bench(name: &str, b: usize, c_in: usize, c_out: usize, h: usize, k: usize, reps: usize) {
    let x = Tensor::<f32>::from_fn(&[b, c_in, h, h], |i| ((i[2] * 7 + i[3]) % 13) as f32 * 0.1 - 0.6);
    let f = Tensor::<f32>::from_fn(&[c_out, c_in, k, k], |i| ((i[0] + i[1] * 3) % 11) as f32 * 0.05 - 0.25);
    let h_out = h - k + 1;
    let macs = (b * c_in * c_out * k * k * h_out * h_out) as f64;
    // warm up
    let y = conv2d_batched(&x, &f, Padding::Valid).unwrap();
    let t0 = Instant::now();
    let mut sink = y.data()[0];
    for _ in 0..reps {
        let y = conv2d_batched(&x, &f, Padding::Valid).unwrap();
        sink += y.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{name:28} {:>8.2} GMAC/s  ({:.1} ms/call, sink={sink:.3})", macs / dt / 1e9, dt * 1e3);
}

fn main() {
    // P4CNN middle layer: C=10, G=4 flattened channels, 26 -> 24
    bench("p4 3x3 b32 c40->40 s26", 32, 40, 40, 26, 3, 20);
    // gc pointwise stage: 1x1 over 120 channels
    bench("gc 1x1 b32 c120->120 s24", 32, 120, 120, 24, 1, 20);
    // lifting layer: 1 -> 40 channels on 28x28
    bench("lift 3x3 b32 c1->40 s28", 32, 1, 40, 28, 3, 50);
    // late small-spatial layer
    bench("p4 3x3 b32 c40->40 s8", 32, 40, 40, 8, 3, 100);
    // f64 verification path
    let x = Tensor::<f64>::from_fn(&[4, 40, 26, 26], |i| (i[3] % 5) as f64);
    let f = Tensor::<f64>::from_fn(&[40, 40, 3, 3], |i| (i[0] % 3) as f64 * 0.1);
    let t0 = Instant::now();
    for _ in 0..10 {
        conv2d_batched(&x, &f, Padding::Valid).unwrap();
    }
    let macs = (4 * 40 * 40 * 9 * 24 * 24) as f64;
    println!("{:28} {:>8.2} GMAC/s (f64)", "p4 3x3 b4 f64", macs / (t0.elapsed().as_secs_f64() / 10.0) / 1e9);
}
