//! Convolutional building blocks with hand-written backward passes.
//!
//! Layers operate on single images in CHW layout. Convolutions are lowered to
//! matrix products through im2col/col2im so the heavy lifting happens inside
//! ndarray's gemm. A transposed convolution is the adjoint of a strided
//! convolution, so both directions share the same two primitives.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Unfolds `x` into a `[C*k*k, OH*OW]` patch matrix (zero padding).
pub fn im2col(x: &Array3<f32>, k: usize, stride: usize, pad: usize) -> (Array2<f32>, usize, usize) {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                for ohi in 0..oh {
                    let ih = (ohi * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for owi in 0..ow {
                        let iw = (owi * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[[row, ohi * ow + owi]] = x[[ci, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back onto a CHW grid.
pub fn col2im(
    cols: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f32> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                for ohi in 0..oh {
                    let ih = (ohi * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for owi in 0..ow {
                        let iw = (owi * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        x[[ci, ih as usize, iw as usize]] += cols[[row, ohi * ow + owi]];
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NonLinearity {
    Relu,
    LeakyRelu,
}

impl NonLinearity {
    pub fn apply(&self, x: &mut Array3<f32>) {
        match self {
            NonLinearity::Relu => x.mapv_inplace(|v| v.max(0.0)),
            NonLinearity::LeakyRelu => x.mapv_inplace(|v| if v > 0.0 { v } else { 0.2 * v }),
        }
    }

    /// Backward through the activation given its *output*. Valid because both
    /// variants preserve sign, so `out > 0` iff the pre-activation was.
    pub fn backward(&self, out: &Array3<f32>, grad: &mut Array3<f32>) {
        match self {
            NonLinearity::Relu => {
                ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            NonLinearity::LeakyRelu => {
                ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
                    if o <= 0.0 {
                        *g *= 0.2;
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
}

/// Strided 2-D convolution, weight layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrad {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
}

impl Conv2d {
    pub fn init(
        out_ch: usize,
        in_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / (in_ch * k * k) as f32).sqrt();
        let w = Array4::from_shape_fn((out_ch, in_ch, k, k), |_| sample_gaussian(rng) * std);
        Self { w, b: Array1::zeros(out_ch), stride, pad }
    }

    pub fn out_shape(&self, in_shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let (_, h, w) = in_shape;
        let k = self.w.dim().2;
        (
            self.w.dim().0,
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn w2(&self) -> Array2<f32> {
        let (o, c, kh, kw) = self.w.dim();
        self.w.view().into_shape_with_order((o, c * kh * kw)).unwrap().to_owned()
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        self.forward_cached(x).0
    }

    /// Forward pass returning the patch matrix needed by [`Self::backward`].
    pub fn forward_cached(&self, x: &Array3<f32>) -> (Array3<f32>, Array2<f32>) {
        let k = self.w.dim().2;
        let (cols, oh, ow) = im2col(x, k, self.stride, self.pad);
        let mut y2 = self.w2().dot(&cols);
        for (o, mut row) in y2.outer_iter_mut().enumerate() {
            row += self.b[o];
        }
        let o = self.w.dim().0;
        (y2.into_shape_with_order((o, oh, ow)).unwrap(), cols)
    }

    /// Accumulates parameter gradients and optionally returns the input
    /// gradient (skipped for the first layer of a network).
    pub fn backward(
        &self,
        cols: &Array2<f32>,
        dy: &Array3<f32>,
        grad: &mut Conv2dGrad,
        in_shape: (usize, usize, usize),
        want_dx: bool,
    ) -> Option<Array3<f32>> {
        let (o, ohh, oww) = dy.dim();
        let dy2 = dy.view().into_shape_with_order((o, ohh * oww)).unwrap().to_owned();
        let dw2 = dy2.dot(&cols.t());
        let (go, gc, gkh, gkw) = grad.w.dim();
        grad.w += &dw2.into_shape_with_order((go, gc, gkh, gkw)).unwrap();
        for (i, row) in dy2.outer_iter().enumerate() {
            grad.b[i] += row.sum();
        }
        if want_dx {
            let dcols = self.w2().t().dot(&dy2);
            let (c, h, w) = in_shape;
            let k = self.w.dim().2;
            Some(col2im(&dcols, c, h, w, k, self.stride, self.pad))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) -> Conv2dGrad {
        Conv2dGrad { w: Array4::zeros(self.w.dim()), b: Array1::zeros(self.b.dim()) }
    }
}

/// Transposed convolution, stride 2, exact x2 upsampling (output padding 1).
/// Weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2dGrad {
    pub w: Array4<f32>,
    pub b: Array1<f32>,
}

const TKERN: usize = 3;
const TSTRIDE: usize = 2;
const TPAD: usize = 1;

impl ConvTranspose2d {
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_ch * TKERN * TKERN) as f32).sqrt();
        let w = Array4::from_shape_fn((in_ch, out_ch, TKERN, TKERN), |_| sample_gaussian(rng) * std);
        Self { w, b: Array1::zeros(out_ch) }
    }

    fn w2(&self) -> Array2<f32> {
        let (i, o, kh, kw) = self.w.dim();
        self.w.view().into_shape_with_order((i, o * kh * kw)).unwrap().to_owned()
    }

    pub fn forward(&self, u: &Array3<f32>) -> Array3<f32> {
        self.forward_cached(u).0
    }

    /// Returns the output plus the flattened input kept for backward.
    pub fn forward_cached(&self, u: &Array3<f32>) -> (Array3<f32>, Array2<f32>) {
        let (ci, h, w) = u.dim();
        let co = self.w.dim().1;
        let u2 = u.view().into_shape_with_order((ci, h * w)).unwrap().to_owned();
        let contrib = self.w2().t().dot(&u2);
        let mut y = col2im(&contrib, co, 2 * h, 2 * w, TKERN, TSTRIDE, TPAD);
        for (o, mut plane) in y.outer_iter_mut().enumerate() {
            plane += self.b[o];
        }
        (y, u2)
    }

    pub fn backward(
        &self,
        u2: &Array2<f32>,
        dy: &Array3<f32>,
        grad: &mut ConvTranspose2dGrad,
        want_dx: bool,
    ) -> Option<Array3<f32>> {
        let (ci, _, _, _) = self.w.dim();
        let (cols_dy, uh, uw) = im2col(dy, TKERN, TSTRIDE, TPAD);
        let dw2 = u2.dot(&cols_dy.t());
        let (gi, go, gkh, gkw) = grad.w.dim();
        grad.w += &dw2.into_shape_with_order((gi, go, gkh, gkw)).unwrap();
        for (o, plane) in dy.outer_iter().enumerate() {
            grad.b[o] += plane.sum();
        }
        if want_dx {
            let du2 = self.w2().dot(&cols_dy);
            Some(du2.into_shape_with_order((ci, uh, uw)).unwrap())
        } else {
            None
        }
    }

    pub fn zero_grad(&self) -> ConvTranspose2dGrad {
        ConvTranspose2dGrad { w: Array4::zeros(self.w.dim()), b: Array1::zeros(self.b.dim()) }
    }
}

/// Box-Muller standard normal. Kept local so parameter init does not depend
/// on distribution-crate internals staying stable across versions.
pub fn sample_gaussian(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// RMSProp with fixed learning rate. Per-slot running mean of squared
/// gradients; no momentum term.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f32,
    decay: f32,
    eps: f32,
    state: Vec<Vec<f32>>,
}

impl RmsProp {
    pub fn new(lr: f32) -> Self {
        Self { lr, decay: 0.9, eps: 1e-8, state: Vec::new() }
    }

    /// Applies one update. `params`, `grads` and `trainable` must stay in the
    /// same order across calls; state slots for frozen tensors are untouched.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]], trainable: &[bool]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), trainable.len());
        if self.state.is_empty() {
            self.state = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), (&t, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(trainable.iter().zip(self.state.iter_mut()))
        {
            if !t {
                continue;
            }
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                v[i] = self.decay * v[i] + (1.0 - self.decay) * g[i] * g[i];
                p[i] -= self.lr * g[i] / (v[i].sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn randn3(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| sample_gaussian(&mut rng))
    }

    fn dot3(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
        a.iter().zip(b.iter()).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), C> == <x, col2im(C)> for random x and C.
        let x = randn3(2, 8, 8, 1);
        let (cols, oh, ow) = im2col(&x, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Array2::from_shape_fn((2 * 9, oh * ow), |_| sample_gaussian(&mut rng));
        let lhs: f64 = cols.iter().zip(c.iter()).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        let back = col2im(&c, 2, 8, 8, 3, 2, 1);
        let rhs = dot3(&x, &back);
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::init(3, 2, 3, 2, 1, &mut rng);
        let x = randn3(2, 8, 8, 4);
        let dy = randn3(3, 4, 4, 5);
        let loss = |c: &Conv2d, x: &Array3<f32>| -> f64 { dot3(&c.forward(x), &dy) };

        let (_, cols) = conv.forward_cached(&x);
        let mut grad = conv.zero_grad();
        let dx = conv.backward(&cols, &dy, &mut grad, x.dim(), true).unwrap();

        let h = 1e-2f32;
        // Probe a few weight entries.
        for &idx in &[(0, 0, 0, 0), (1, 1, 2, 1), (2, 0, 1, 2)] {
            let mut cp = conv.clone();
            cp.w[idx] += h;
            let lp = loss(&cp, &x);
            cp.w[idx] -= 2.0 * h;
            let lm = loss(&cp, &x);
            let fd = (lp - lm) / (2.0 * f64::from(h));
            let an = f64::from(grad.w[idx]);
            assert!((fd - an).abs() < 2e-2 * an.abs().max(1.0), "w{idx:?}: fd {fd} an {an}");
        }
        // Probe bias and input entries.
        {
            let mut cp = conv.clone();
            cp.b[1] += h;
            let lp = loss(&cp, &x);
            cp.b[1] -= 2.0 * h;
            let lm = loss(&cp, &x);
            let fd = (lp - lm) / (2.0 * f64::from(h));
            assert!((fd - f64::from(grad.b[1])).abs() < 2e-2 * fd.abs().max(1.0));
        }
        for &idx in &[(0, 3, 3), (1, 7, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let lp = loss(&conv, &xp);
            xp[idx] -= 2.0 * h;
            let lm = loss(&conv, &xp);
            let fd = (lp - lm) / (2.0 * f64::from(h));
            let an = f64::from(dx[idx]);
            assert!((fd - an).abs() < 2e-2 * an.abs().max(1.0), "x{idx:?}: fd {fd} an {an}");
        }
    }

    #[test]
    fn convtranspose_doubles_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = ConvTranspose2d::init(4, 2, &mut rng);
        let u = randn3(4, 4, 4, 7);
        assert_eq!(t.forward(&u).dim(), (2, 8, 8));
    }

    #[test]
    fn convtranspose_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = ConvTranspose2d::init(2, 3, &mut rng);
        let u = randn3(2, 4, 4, 9);
        let dy = randn3(3, 8, 8, 10);
        let loss = |t: &ConvTranspose2d, u: &Array3<f32>| -> f64 { dot3(&t.forward(u), &dy) };

        let (_, u2) = t.forward_cached(&u);
        let mut grad = t.zero_grad();
        let du = t.backward(&u2, &dy, &mut grad, true).unwrap();

        let h = 1e-2f32;
        for &idx in &[(0, 0, 0, 0), (1, 2, 1, 1), (0, 1, 2, 2)] {
            let mut tp = t.clone();
            tp.w[idx] += h;
            let lp = loss(&tp, &u);
            tp.w[idx] -= 2.0 * h;
            let lm = loss(&tp, &u);
            let fd = (lp - lm) / (2.0 * f64::from(h));
            let an = f64::from(grad.w[idx]);
            assert!((fd - an).abs() < 2e-2 * an.abs().max(1.0), "w{idx:?}: fd {fd} an {an}");
        }
        for &idx in &[(0, 0, 0), (1, 3, 2)] {
            let mut up = u.clone();
            up[idx] += h;
            let lp = loss(&t, &up);
            up[idx] -= 2.0 * h;
            let lm = loss(&t, &up);
            let fd = (lp - lm) / (2.0 * f64::from(h));
            let an = f64::from(du[idx]);
            assert!((fd - an).abs() < 2e-2 * an.abs().max(1.0), "u{idx:?}: fd {fd} an {an}");
        }
    }

    #[test]
    fn relu_backward_masks_by_output() {
        let mut x = Array3::from_shape_vec((1, 1, 4), vec![-1.0, 2.0, -0.5, 3.0]).unwrap();
        NonLinearity::Relu.apply(&mut x);
        let mut g = Array3::from_elem((1, 1, 4), 1.0);
        NonLinearity::Relu.backward(&x, &mut g);
        assert_eq!(g.as_slice().unwrap(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn rmsprop_decreases_quadratic() {
        // Minimize f(p) = (p - 3)^2 from p = 0.
        let mut p = vec![0.0f32];
        let mut opt = RmsProp::new(0.05);
        for _ in 0..500 {
            let g = vec![2.0 * (p[0] - 3.0)];
            let mut refs: Vec<&mut [f32]> = vec![&mut p];
            opt.step(&mut refs, &[&g], &[true]);
        }
        assert!((p[0] - 3.0).abs() < 0.05, "p = {}", p[0]);
    }

    #[test]
    fn rmsprop_skips_frozen_slots() {
        let mut p = vec![1.0f32, 1.0];
        let g = vec![1.0f32, 1.0];
        let mut opt = RmsProp::new(0.1);
        let (left, right) = p.split_at_mut(1);
        let mut refs: Vec<&mut [f32]> = vec![left, right];
        opt.step(&mut refs, &[&g[..1], &g[1..]], &[false, true]);
        assert_eq!(p[0], 1.0);
        assert_ne!(p[1], 1.0);
    }
}
