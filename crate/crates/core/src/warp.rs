//! Differentiable rotation + translation warp.
//!
//! Coordinates are centered on `((h-1)/2, (w-1)/2)`; `u` runs along columns and
//! `v` along rows (downward). A source pixel at centered `(u, v)` lands at
//! `R(θ)·(u, v) + (du, dv)`, where `R(θ)` turns content counter-clockwise on
//! screen. The warp is computed by inverse sampling: every output pixel pulls
//! the bilinear sample at `R(-θ)·((u', v') - (du, dv))`, and samples outside
//! the raster read as zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// A point in the attack's latent space. Translations in pixels, rotation in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformParams {
    pub du: f64,
    pub dv: f64,
    pub theta: f64,
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        du: 0.0,
        dv: 0.0,
        theta: 0.0,
    };

    pub fn new(du: f64, dv: f64, theta: f64) -> Self {
        TransformParams { du, dv, theta }
    }

    pub fn is_finite(&self) -> bool {
        self.du.is_finite() && self.dv.is_finite() && self.theta.is_finite()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.du, self.dv, self.theta]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        TransformParams::new(a[0], a[1], a[2])
    }
}

/// The admissible parameter box `[-max_trans, max_trans]² × [-max_rot, max_rot]`
/// and its grid discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpace {
    max_trans: f64,
    max_rot: f64,
    trans_grid_points: usize,
    rot_grid_points: usize,
}

impl AttackSpace {
    pub fn new(
        max_trans: f64,
        max_rot: f64,
        trans_grid_points: usize,
        rot_grid_points: usize,
    ) -> Result<Self> {
        if !(max_trans.is_finite() && max_trans >= 0.0) {
            return Err(Error::invalid(format!("max_trans must be finite and >= 0, got {max_trans}")));
        }
        if !(max_rot.is_finite() && max_rot >= 0.0) {
            return Err(Error::invalid(format!("max_rot must be finite and >= 0, got {max_rot}")));
        }
        for (name, n) in [("trans_grid_points", trans_grid_points), ("rot_grid_points", rot_grid_points)] {
            if n == 0 || n % 2 == 0 {
                return Err(Error::invalid(format!("{name} must be odd and >= 1, got {n}")));
            }
        }
        Ok(AttackSpace {
            max_trans,
            max_rot,
            trans_grid_points,
            rot_grid_points,
        })
    }

    /// ±3 px, ±30°, 5 × 5 × 31 grid.
    pub fn mnist() -> Self {
        AttackSpace::new(3.0, 30.0, 5, 31).expect("static space is valid")
    }

    /// A space that never moves the image.
    pub fn degenerate() -> Self {
        AttackSpace::new(0.0, 0.0, 1, 1).expect("static space is valid")
    }

    pub fn max_trans(&self) -> f64 {
        self.max_trans
    }

    pub fn max_rot(&self) -> f64 {
        self.max_rot
    }

    pub fn trans_grid_points(&self) -> usize {
        self.trans_grid_points
    }

    pub fn rot_grid_points(&self) -> usize {
        self.rot_grid_points
    }

    /// Same space with rotation zeroed out.
    pub fn translation_only(&self) -> Self {
        AttackSpace {
            max_rot: 0.0,
            rot_grid_points: 1,
            ..*self
        }
    }

    /// Same space with translation zeroed out.
    pub fn rotation_only(&self) -> Self {
        AttackSpace {
            max_trans: 0.0,
            trans_grid_points: 1,
            ..*self
        }
    }

    pub fn trans_values(&self) -> Vec<f64> {
        grid_values(self.max_trans, self.trans_grid_points)
    }

    pub fn rot_values(&self) -> Vec<f64> {
        grid_values(self.max_rot, self.rot_grid_points)
    }

    pub fn grid_size(&self) -> usize {
        self.trans_grid_points * self.trans_grid_points * self.rot_grid_points
    }

    /// All grid points in scan order: rotation-major, then `dv`, then `du`.
    pub fn grid_points(&self) -> Vec<TransformParams> {
        let trans = self.trans_values();
        let mut out = Vec::with_capacity(self.grid_size());
        for &theta in &self.rot_values() {
            for &dv in &trans {
                for &du in &trans {
                    out.push(TransformParams { du, dv, theta });
                }
            }
        }
        out
    }

    /// Per-coordinate width of the box, `(2·max_trans, 2·max_trans, 2·max_rot)`.
    pub fn ranges(&self) -> [f64; 3] {
        [2.0 * self.max_trans, 2.0 * self.max_trans, 2.0 * self.max_rot]
    }

    fn bounds(&self) -> [f64; 3] {
        [self.max_trans, self.max_trans, self.max_rot]
    }

    /// Uniform sample from the continuous box. Draws `du`, `dv`, `theta` in that order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TransformParams {
        let b = self.bounds();
        let mut draw = |m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let du = draw(b[0]);
        let dv = draw(b[1]);
        let theta = draw(b[2]);
        TransformParams { du, dv, theta }
    }

    pub fn clip(&self, p: TransformParams) -> TransformParams {
        let b = self.bounds();
        let a = p.as_array();
        TransformParams::from_array([0, 1, 2].map(|i| a[i].clamp(-b[i], b[i])))
    }

    pub fn contains(&self, p: &TransformParams) -> bool {
        let b = self.bounds();
        p.as_array().iter().zip(b).all(|(v, m)| v.abs() <= m)
    }
}

impl Default for AttackSpace {
    fn default() -> Self {
        AttackSpace::mnist()
    }
}

/// `n` equally spaced values over `[-max, max]`; the middle one is exactly zero for odd `n`.
pub fn grid_values(max: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0];
    }
    let span = (n - 1) as f64;
    (0..n)
        .map(|k| max * ((2.0 * k as f64 - span) / span))
        .collect()
}

/// `(sin θ, cos θ)` for θ in degrees, exact at multiples of 90°.
pub fn sin_cos_deg(theta: f64) -> (f64, f64) {
    let r = theta.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        theta.to_radians().sin_cos()
    }
}

/// Source sampling coordinate of one output pixel, in raster units.
struct Footprint {
    x: f64,
    y: f64,
}

struct Sampler {
    h: usize,
    w: usize,
    cx: f64,
    cy: f64,
    sin: f64,
    cos: f64,
    du: f64,
    dv: f64,
}

impl Sampler {
    fn new(h: usize, w: usize, p: &TransformParams) -> Self {
        let (sin, cos) = sin_cos_deg(p.theta);
        Sampler {
            h,
            w,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            sin,
            cos,
            du: p.du,
            dv: p.dv,
        }
    }

    /// Offset of output pixel `(i, j)` from the translation, in centered coordinates.
    #[inline]
    fn shifted(&self, i: usize, j: usize) -> (f64, f64) {
        ((j as f64 - self.cx) - self.du, (i as f64 - self.cy) - self.dv)
    }

    #[inline]
    fn source(&self, i: usize, j: usize) -> Footprint {
        let (a, b) = self.shifted(i, j);
        Footprint {
            x: self.cx + (self.cos * a - self.sin * b),
            y: self.cy + (self.sin * a + self.cos * b),
        }
    }

    /// Neighbor flat offsets (within one channel) and weights; out-of-raster neighbors are `None`.
    #[inline]
    fn taps(&self, f: &Footprint) -> ([Option<usize>; 4], [f64; 4], f64, f64) {
        let x0 = f.x.floor();
        let y0 = f.y.floor();
        let fx = f.x - x0;
        let fy = f.y - y0;
        let (xi, yi) = (x0 as i64, y0 as i64);
        let at = |r: i64, c: i64| -> Option<usize> {
            if r >= 0 && c >= 0 && (r as usize) < self.h && (c as usize) < self.w {
                Some(r as usize * self.w + c as usize)
            } else {
                None
            }
        };
        (
            [at(yi, xi), at(yi, xi + 1), at(yi + 1, xi), at(yi + 1, xi + 1)],
            [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
            fx,
            fy,
        )
    }
}

fn check_params(p: &TransformParams) -> Result<()> {
    if p.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("transform parameters must be finite, got {p:?}")))
    }
}

/// Rotates `image` by `theta` degrees about its center, then shifts it by `(du, dv)` pixels.
pub fn apply_transform(image: &ImageTensor, params: &TransformParams) -> Result<ImageTensor> {
    check_params(params)?;
    if image.is_empty() {
        return Err(Error::invalid("cannot warp an empty image"));
    }
    image.check_finite()?;
    Ok(warp_unchecked(image, params))
}

pub(crate) fn warp_unchecked(image: &ImageTensor, params: &TransformParams) -> ImageTensor {
    let (c, h, w) = image.shape();
    let s = Sampler::new(h, w, params);
    let src = image.data();
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for i in 0..h {
        for j in 0..w {
            let (idx, wt, _, _) = s.taps(&s.source(i, j));
            for ch in 0..c {
                let base = ch * plane;
                let mut v = 0.0;
                for k in 0..4 {
                    if let Some(o) = idx[k] {
                        v += wt[k] * src[base + o];
                    }
                }
                out[base + i * w + j] = v;
            }
        }
    }
    ImageTensor::new(c, h, w, out).expect("warp of a finite image is finite")
}

/// Warps one image at many parameter points.
pub fn warp_many(image: &ImageTensor, params: &[TransformParams]) -> Result<Vec<ImageTensor>> {
    if image.is_empty() {
        return Err(Error::invalid("cannot warp an empty image"));
    }
    image.check_finite()?;
    params
        .iter()
        .map(|p| {
            check_params(p)?;
            Ok(warp_unchecked(image, p))
        })
        .collect()
}

/// Vector-Jacobian product of [`apply_transform`].
#[derive(Debug, Clone)]
pub struct TransformGrad {
    pub du: f64,
    pub dv: f64,
    /// Per degree.
    pub theta: f64,
    pub image: ImageTensor,
}

impl TransformGrad {
    pub fn params(&self) -> [f64; 3] {
        [self.du, self.dv, self.theta]
    }
}

/// Pulls `upstream` (shaped like the output) back through the warp to the
/// transform parameters and the input image.
///
/// At bilinear kinks (integer sample coordinates) the right-limit weights are used.
pub fn transform_vjp(
    image: &ImageTensor,
    params: &TransformParams,
    upstream: &ImageTensor,
) -> Result<TransformGrad> {
    check_params(params)?;
    if !image.same_shape(upstream) {
        return Err(Error::invalid(format!(
            "upstream shape {:?} does not match image shape {:?}",
            upstream.shape(),
            image.shape()
        )));
    }
    image.check_finite()?;
    upstream.check_finite()?;

    let (c, h, w) = image.shape();
    let s = Sampler::new(h, w, params);
    let src = image.data();
    let up = upstream.data();
    let plane = h * w;
    let mut grad_img = vec![0.0; c * plane];

    // source coordinate derivatives; theta in radians, converted at the end
    let (dx_ddu, dy_ddu) = (-s.cos, -s.sin);
    let (dx_ddv, dy_ddv) = (s.sin, -s.cos);
    let (mut g_du, mut g_dv, mut g_th) = (0.0, 0.0, 0.0);

    for i in 0..h {
        for j in 0..w {
            let (a, b) = s.shifted(i, j);
            let dx_dth = -s.sin * a - s.cos * b;
            let dy_dth = s.cos * a - s.sin * b;
            let (idx, wt, fx, fy) = s.taps(&s.source(i, j));
            for ch in 0..c {
                let base = ch * plane;
                let g = up[base + i * w + j];
                if g == 0.0 {
                    continue;
                }
                let p = idx.map(|o| o.map_or(0.0, |o| src[base + o]));
                let dval_dx = (1.0 - fy) * (p[1] - p[0]) + fy * (p[3] - p[2]);
                let dval_dy = (1.0 - fx) * (p[2] - p[0]) + fx * (p[3] - p[1]);
                g_du += g * (dval_dx * dx_ddu + dval_dy * dy_ddu);
                g_dv += g * (dval_dx * dx_ddv + dval_dy * dy_ddv);
                g_th += g * (dval_dx * dx_dth + dval_dy * dy_dth);
                for k in 0..4 {
                    if let Some(o) = idx[k] {
                        grad_img[base + o] += g * wt[k];
                    }
                }
            }
        }
    }

    Ok(TransformGrad {
        du: g_du,
        dv: g_dv,
        theta: g_th * std::f64::consts::PI / 180.0,
        image: ImageTensor::new(c, h, w, grad_img)?,
    })
}

/// Zero-pads every side by `pad` pixels, keeping the original centered.
pub fn black_canvas_pad(image: &ImageTensor, pad: usize) -> Result<ImageTensor> {
    image.check_finite()?;
    let (c, h, w) = image.shape();
    if pad == 0 {
        return Ok(image.clone());
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    Ok(ImageTensor::from_fn(c, ph, pw, |ch, i, j| {
        if i >= pad && i < pad + h && j >= pad && j < pad + w {
            image.get(ch, i - pad, j - pad)
        } else {
            0.0
        }
    }))
}

/// Smallest padding for which no in-space transform pushes original content off the canvas:
/// `ceil((√2 − 1)/2 · max(h, w)) + ceil(max_trans)`.
pub fn sufficient_canvas_pad(height: usize, width: usize, space: &AttackSpace) -> usize {
    let side = height.max(width) as f64;
    ((std::f64::consts::SQRT_2 - 1.0) / 2.0 * side).ceil() as usize + space.max_trans().ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(1, h, w, |_, i, j| (i * w + j) as f64 / (h * w) as f64)
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = ImageTensor::from_fn(2, 7, 6, |c, i, j| ((c + 3 * i + 7 * j) % 11) as f64 * 0.173);
        assert_eq!(apply_transform(&img, &TransformParams::IDENTITY).unwrap(), img);
    }

    #[test]
    fn integer_shift_is_raster_shift() {
        let img = ramp(6, 5);
        let out = apply_transform(&img, &TransformParams::new(2.0, -1.0, 0.0)).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                let (si, sj) = (i as i64 + 1, j as i64 - 2);
                let want = if (0..6).contains(&si) && (0..5).contains(&sj) {
                    img.get(0, si as usize, sj as usize)
                } else {
                    0.0
                };
                assert_eq!(out.get(0, i, j), want, "pixel ({i},{j})");
            }
        }
    }

    #[test]
    fn positive_theta_turns_content_counter_clockwise() {
        // marker right of center should end up above center
        let mut img = ImageTensor::zeros(1, 5, 5);
        img.set(0, 2, 4, 1.0);
        let out = apply_transform(&img, &TransformParams::new(0.0, 0.0, 90.0)).unwrap();
        assert_eq!(out.get(0, 0, 2), 1.0);
        assert_eq!(out.sum(), 1.0);
    }

    #[test]
    fn rejects_non_finite_params() {
        let img = ramp(3, 3);
        let err = apply_transform(&img, &TransformParams::new(f64::NAN, 0.0, 0.0));
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        let err = apply_transform(&img, &TransformParams::new(0.0, 0.0, f64::INFINITY));
        assert!(err.is_err());
    }

    #[test]
    fn vjp_rejects_shape_mismatch() {
        let img = ramp(3, 3);
        let up = ImageTensor::zeros(1, 3, 4);
        assert!(matches!(
            transform_vjp(&img, &TransformParams::IDENTITY, &up),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let img = ramp(8, 8);
        let g = transform_vjp(&img, &TransformParams::IDENTITY, &ImageTensor::zeros(1, 8, 8)).unwrap();
        assert_eq!(g.params(), [0.0; 3]);
        assert!(g.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_interior_field_has_zero_param_gradient() {
        // constant 20x20 field; upstream only on the central 6x6 block, whose samples stay interior
        let img = ImageTensor::filled(1, 20, 20, 0.7);
        let up = ImageTensor::from_fn(1, 20, 20, |_, i, j| {
            if (7..13).contains(&i) && (7..13).contains(&j) {
                1.0
            } else {
                0.0
            }
        });
        let g = transform_vjp(&img, &TransformParams::new(1.3, -0.6, 17.0), &up).unwrap();
        for v in g.params() {
            assert!(v.abs() <= 1e-6, "{v}");
        }
    }

    #[test]
    fn grid_contains_identity_and_has_expected_size() {
        let s = AttackSpace::mnist();
        let pts = s.grid_points();
        assert_eq!(pts.len(), 775);
        assert!(pts.contains(&TransformParams::IDENTITY));
        assert_eq!(s.trans_values(), vec![-3.0, -1.5, 0.0, 1.5, 3.0]);
        let rots = s.rot_values();
        assert_eq!(rots.len(), 31);
        assert_eq!(rots[15], 0.0);
        assert_eq!(rots[0], -30.0);
        assert_eq!(rots[1], -28.0);
        // rotation-major scan, du fastest
        assert_eq!(pts[0], TransformParams::new(-3.0, -3.0, -30.0));
        assert_eq!(pts[1], TransformParams::new(-1.5, -3.0, -30.0));
        assert_eq!(pts[5], TransformParams::new(-3.0, -1.5, -30.0));
        assert_eq!(pts[25], TransformParams::new(-3.0, -3.0, -28.0));
    }

    #[test]
    fn space_rejects_even_or_zero_grid_counts() {
        assert!(AttackSpace::new(3.0, 30.0, 4, 31).is_err());
        assert!(AttackSpace::new(3.0, 30.0, 5, 0).is_err());
        assert!(AttackSpace::new(-1.0, 30.0, 5, 31).is_err());
    }

    #[test]
    fn restricted_spaces_are_subgrids() {
        let s = AttackSpace::mnist();
        let full = s.grid_points();
        for sub in [s.rotation_only(), s.translation_only()] {
            for p in sub.grid_points() {
                assert!(full.contains(&p));
            }
        }
        assert_eq!(s.rotation_only().grid_size(), 31);
        assert_eq!(s.translation_only().grid_size(), 25);
    }

    #[test]
    fn pad_zero_is_identity_and_padding_keeps_mass() {
        let img = ramp(28, 28);
        assert_eq!(black_canvas_pad(&img, 0).unwrap(), img);
        let p = black_canvas_pad(&img, 10).unwrap();
        assert_eq!(p.shape(), (1, 48, 48));
        assert_eq!(p.sum(), img.sum());
    }

    #[test]
    fn sufficient_pad_for_mnist_space() {
        assert_eq!(sufficient_canvas_pad(28, 28, &AttackSpace::mnist()), 9);
    }
}
