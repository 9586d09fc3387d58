//! Shared oracles and fixture classifiers for the integration tests.
#![allow(dead_code)]

use spatrob::attacks::{Classifier, InputGrad};
use spatrob::nn::{argmax, cross_entropy};
use spatrob::{ImageTensor, Result, TransformParams};

/// Brute-force warp written from the definition in a y-up frame: content turns
/// counter-clockwise by theta, then moves by (du, +column) and (dv, +row).
pub fn reference_warp(img: &ImageTensor, p: &TransformParams) -> ImageTensor {
    let (c, h, w) = img.shape();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let t = p.theta.to_radians();
    let (s, co) = if p.theta.rem_euclid(90.0) == 0.0 {
        let q = (p.theta / 90.0).rem_euclid(4.0) as i32;
        [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)][q as usize]
    } else {
        t.sin_cos()
    };
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                // output point relative to the center, y up, minus the translation
                let xu = j as f64 - cx - p.du;
                let yu = (cy - i as f64) + p.dv;
                // inverse rotation R(-theta)
                let sx = co * xu + s * yu;
                let sy = -s * xu + co * yu;
                let col = sx + cx;
                let row = cy - sy;
                let mut v = 0.0;
                for rn in [row.floor(), row.floor() + 1.0] {
                    for cn in [col.floor(), col.floor() + 1.0] {
                        let wgt = (1.0 - (row - rn).abs()) * (1.0 - (col - cn).abs());
                        if rn >= 0.0 && cn >= 0.0 && (rn as usize) < h && (cn as usize) < w {
                            v += wgt * img.get(ch, rn as usize, cn as usize);
                        }
                    }
                }
                out.set(ch, i, j, v);
            }
        }
    }
    out
}

/// Smooth random-ish blob image, deterministic in `k`.
pub fn blob(k: u64, h: usize, w: usize) -> ImageTensor {
    let f = |m: u64| ((k.wrapping_mul(2654435761).wrapping_add(m * 40503) % 1000) as f64) / 1000.0;
    let (cy, cx) = (h as f64 * (0.3 + 0.4 * f(1)), w as f64 * (0.3 + 0.4 * f(2)));
    let (sy, sx) = (2.0 + 4.0 * f(3), 2.0 + 4.0 * f(4));
    ImageTensor::from_fn(1, h, w, |_, i, j| {
        let (y, x) = ((i as f64 - cy) / sy, (j as f64 - cx) / sx);
        (-(x * x + y * y) / 2.0).exp()
    })
}

fn scored(logits: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    Ok(logits)
}

/// Always predicts `class` with the same logits.
pub struct Constant {
    pub class: usize,
    pub classes: usize,
}

impl Classifier for Constant {
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn logits(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        scored(
            images
                .iter()
                .map(|_| (0..self.classes).map(|k| if k == self.class { 3.0 } else { 0.0 }).collect())
                .collect(),
        )
    }
    fn loss_input_grads(&self, images: &[ImageTensor], labels: &[usize]) -> Result<Vec<InputGrad>> {
        let z = self.logits(&images[..1])?.remove(0);
        Ok(images
            .iter()
            .zip(labels)
            .map(|(im, &y)| {
                let (c, h, w) = im.shape();
                InputGrad {
                    loss: cross_entropy(&z, y).unwrap(),
                    logits: z.clone(),
                    grad: ImageTensor::zeros(c, h, w),
                }
            })
            .collect())
    }
}

/// Two classes: predicts 1 iff the top-left pixel of channel 0 is exactly zero.
pub struct TopLeftZero;

impl Classifier for TopLeftZero {
    fn num_classes(&self) -> usize {
        2
    }
    fn logits(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|im| if im.get(0, 0, 0) == 0.0 { vec![0.0, 1.0] } else { vec![1.0, 0.0] })
            .collect())
    }
}

/// Reads the label from the image's peak intensity `(label + 1) / 20`; see [`oracle_image`].
pub struct Oracle;

pub fn oracle_image(label: usize, h: usize, w: usize) -> ImageTensor {
    ImageTensor::filled(1, h, w, (label + 1) as f64 / 20.0)
}

impl Classifier for Oracle {
    fn num_classes(&self) -> usize {
        10
    }
    fn logits(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|im| {
                let y = ((im.max_value() * 20.0).round() as usize).clamp(1, 10) - 1;
                (0..10).map(|k| if k == y { 5.0 } else { 0.0 }).collect()
            })
            .collect())
    }
    fn loss_input_grads(&self, images: &[ImageTensor], labels: &[usize]) -> Result<Vec<InputGrad>> {
        let logits = self.logits(images)?;
        Ok(images
            .iter()
            .zip(labels)
            .zip(logits)
            .map(|((im, &y), z)| {
                let (c, h, w) = im.shape();
                InputGrad {
                    loss: cross_entropy(&z, y).unwrap(),
                    logits: z,
                    grad: ImageTensor::zeros(c, h, w),
                }
            })
            .collect())
    }
}

/// Orientation in degrees (counter-clockwise on screen) of an image's principal axis.
pub fn orientation_deg(im: &ImageTensor) -> f64 {
    let (_, h, w) = im.shape();
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let v = im.get(0, i, j);
            m += v;
            sx += v * j as f64;
            sy += v * i as f64;
        }
    }
    let (mx, my) = (sx / m, sy / m);
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            let v = im.get(0, i, j);
            let (x, y) = (j as f64 - mx, my - i as f64);
            xx += v * x * x;
            yy += v * y * y;
            xy += v * x * y;
        }
    }
    0.5 * (2.0 * xy).atan2(xx - yy).to_degrees()
}

/// Elongated horizontal Gaussian bar centered in the raster.
pub fn bar(h: usize, w: usize) -> ImageTensor {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    ImageTensor::from_fn(1, h, w, |_, i, j| {
        let (x, y) = ((j as f64 - cx) / 5.0, (i as f64 - cy) / 1.5);
        (-(x * x + y * y) / 2.0).exp()
    })
}

/// Two classes: predicts 1 iff the principal-axis orientation magnitude exceeds `threshold`
/// (or reaches it, when `inclusive`).
pub struct BarAngle {
    pub threshold: f64,
    pub inclusive: bool,
}

impl Classifier for BarAngle {
    fn num_classes(&self) -> usize {
        2
    }
    fn logits(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|im| {
                let a = orientation_deg(im).abs();
                let tilted = if self.inclusive { a >= self.threshold } else { a > self.threshold };
                if tilted { vec![0.0, 1.0] } else { vec![1.0, 0.0] }
            })
            .collect())
    }
}

/// `logits = W x + b` with analytic input gradients.
pub struct Linear {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl Classifier for Linear {
    fn num_classes(&self) -> usize {
        self.weights.len()
    }
    fn logits(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|im| {
                self.weights
                    .iter()
                    .zip(&self.bias)
                    .map(|(w, b)| w.iter().zip(im.data()).map(|(a, x)| a * x).sum::<f64>() + b)
                    .collect()
            })
            .collect())
    }
    fn loss_input_grads(&self, images: &[ImageTensor], labels: &[usize]) -> Result<Vec<InputGrad>> {
        let logits = self.logits(images)?;
        Ok(images
            .iter()
            .zip(labels)
            .zip(logits)
            .map(|((im, &y), z)| {
                let g = spatrob::nn::cross_entropy_grad(&z, y);
                let (c, h, w) = im.shape();
                let grad = ImageTensor::from_fn(c, h, w, |ch, i, j| {
                    let k = (ch * h + i) * w + j;
                    self.weights.iter().zip(&g).map(|(wr, gk)| wr[k] * gk).sum()
                });
                InputGrad {
                    loss: cross_entropy(&z, y).unwrap(),
                    logits: z,
                    grad,
                }
            })
            .collect())
    }
}

pub fn predict<C: Classifier>(m: &C, im: &ImageTensor) -> usize {
    argmax(&m.logits(std::slice::from_ref(im)).unwrap()[0])
}
