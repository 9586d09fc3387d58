//! Rough forward/backward throughput of the MNIST network on this machine.
use std::time::Instant;

use rand::Rng;
use spatrob::nn::build_mnist_net;
use spatrob::ImageTensor;

fn main() {
    let net = build_mnist_net::<f32>(0);
    let mut r = spatrob::rng::seeded(0);
    let imgs: Vec<_> = (0..775)
        .map(|_| ImageTensor::from_fn(1, 28, 28, |_, _, _| r.gen::<f64>()))
        .collect();
    let t = Instant::now();
    let _ = net.forward_batch(&imgs).unwrap();
    let dt = t.elapsed().as_secs_f64();
    println!("forward: {:.0} images/s", imgs.len() as f64 / dt);

    let labels = vec![3usize; 64];
    let t = Instant::now();
    for _ in 0..5 {
        let _ = net.grad_batch(&imgs[..64], &labels, true, false).unwrap();
    }
    println!("train grad: {:.0} images/s", 320.0 / t.elapsed().as_secs_f64());
    let t = Instant::now();
    for _ in 0..5 {
        let _ = net.grad_batch(&imgs[..64], &labels, false, true).unwrap();
    }
    println!("input grad: {:.0} images/s", 320.0 / t.elapsed().as_secs_f64());
}
