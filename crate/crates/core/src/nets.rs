//! Pointwise segmentation networks with a shared trunk and two heads.
//!
//! Both modalities use the same shape of network: two rectified affine layers
//! followed by a classifier head and a mimicry head. Inputs pass through a
//! fixed per-feature standardization that is stored with the parameters but
//! never trained.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::PixelIndex;
use crate::real::Real;

pub const PATCH_FEATURES: usize = 27;
pub const POINT_FEATURES: usize = 7;

fn patch_at(image: &ArrayView3<'_, f32>, row: usize, col: usize, out: &mut [f32]) {
    let (h, w, _) = image.dim();
    let mut k = 0;
    for dr in -1i64..=1 {
        let r = (row as i64 + dr).clamp(0, h as i64 - 1) as usize;
        for dc in -1i64..=1 {
            let c = (col as i64 + dc).clamp(0, w as i64 - 1) as usize;
            for ch in 0..3 {
                out[k] = image[[r, c, ch]];
                k += 1;
            }
        }
    }
}

/// Flattened 3x3 RGB neighbourhood per pixel, edges replicated.
pub fn features_2d(image: ArrayView3<'_, f32>) -> Array3<f32> {
    let (h, w, _) = image.dim();
    let mut out = Array3::zeros((h, w, PATCH_FEATURES));
    for r in 0..h {
        for c in 0..w {
            let mut lane = out.slice_mut(s![r, c, ..]);
            patch_at(&image, r, c, lane.as_slice_mut().expect("contiguous lane"));
        }
    }
    out
}

/// Patch features for selected pixels only, one row per pixel.
pub fn features_2d_at<T: Real>(image: ArrayView3<'_, f32>, pixels: &[PixelIndex]) -> Result<Array2<T>> {
    let (h, w, ch) = image.dim();
    if ch != 3 {
        return Err(Error::Contract(format!("image has {ch} channels, expected 3")));
    }
    let mut out = Array2::zeros((pixels.len(), PATCH_FEATURES));
    let mut buf = [0f32; PATCH_FEATURES];
    for (i, px) in pixels.iter().enumerate() {
        if px.row >= h || px.col >= w {
            return Err(Error::Index {
                point: i,
                row: px.row,
                col: px.col,
                height: h,
                width: w,
            });
        }
        patch_at(&image, px.row, px.col, &mut buf);
        for (d, &v) in out.row_mut(i).iter_mut().zip(&buf) {
            *d = T::of(v as f64);
        }
    }
    Ok(out)
}

/// `(x, y, z, range, x/range, y/range, z/range)` per point.
pub fn features_3d<T: Real>(points: &[[f32; 3]]) -> Result<Array2<T>> {
    let mut out = Array2::zeros((points.len(), POINT_FEATURES));
    for (i, p) in points.iter().enumerate() {
        let [x, y, z] = p.map(|v| v as f64);
        let range = (x * x + y * y + z * z).sqrt();
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::Numeric(format!("point {i} has range {range}")));
        }
        let feats = [x, y, z, range, x / range, y / range, z / range];
        for (d, v) in out.row_mut(i).iter_mut().zip(feats) {
            *d = T::of(v);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    /// `in x out`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Affine<T> {
    fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Affine {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| T::of(rng.random_range(-limit..=limit))),
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Affine {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    fn shape(&self) -> (usize, usize) {
        self.weight.dim()
    }
}

/// Network parameters. Used for both modalities and for gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet<T> {
    /// Subtracted from each input feature.
    pub input_shift: Array1<T>,
    /// Multiplies each shifted input feature.
    pub input_scale: Array1<T>,
    pub hidden1: Affine<T>,
    pub hidden2: Affine<T>,
    pub head_cls: Affine<T>,
    pub head_mim: Affine<T>,
}

pub type Net2DParams<T> = SegNet<T>;
pub type Net3DParams<T> = SegNet<T>;

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    input: Array2<T>,
    hidden1: Array2<T>,
    hidden2: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub cls: Array2<T>,
    pub mim: Array2<T>,
    pub cache: ForwardCache<T>,
}

#[derive(Clone, Debug)]
pub struct BackwardOutput<T> {
    /// Same layout as the parameters; the input standardization entries are zero.
    pub params: SegNet<T>,
    pub input: Array2<T>,
}

fn relu<T: Real>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

fn check_finite<T: Real>(x: &Array2<T>, stage: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activation after {stage}")))
    }
}

impl<T: Real> SegNet<T> {
    pub fn new<R: Rng>(inputs: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        SegNet {
            input_shift: Array1::zeros(inputs),
            input_scale: Array1::ones(inputs),
            hidden1: Affine::glorot(inputs, hidden, rng),
            hidden2: Affine::glorot(hidden, hidden, rng),
            head_cls: Affine::glorot(hidden, classes, rng),
            head_mim: Affine::glorot(hidden, classes, rng),
        }
    }

    pub fn zeros(inputs: usize, hidden: usize, classes: usize) -> Self {
        SegNet {
            input_shift: Array1::zeros(inputs),
            input_scale: Array1::zeros(inputs),
            hidden1: Affine::zeros(inputs, hidden),
            hidden2: Affine::zeros(hidden, hidden),
            head_cls: Affine::zeros(hidden, classes),
            head_mim: Affine::zeros(hidden, classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (i, h, c) = self.dims();
        Self::zeros(i, h, c)
    }

    /// `(inputs, hidden, classes)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.hidden1.shape().0, self.hidden1.shape().1, self.head_cls.shape().1)
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h, c) = self.dims();
        let ok = self.input_shift.len() == i
            && self.input_scale.len() == i
            && self.hidden2.shape() == (h, h)
            && self.head_cls.shape() == (h, c)
            && self.head_mim.shape() == (h, c)
            && self.hidden1.bias.len() == h
            && self.hidden2.bias.len() == h
            && self.head_cls.bias.len() == c
            && self.head_mim.bias.len() == c;
        if !ok {
            return Err(Error::Contract("inconsistent network shapes".into()));
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite network parameter".into()));
        }
        Ok(())
    }

    /// Sets the input standardization from the column statistics of `features`.
    pub fn fit_input_standardization(&mut self, features: ArrayView2<'_, T>) {
        let n = features.nrows().max(1) as f64;
        for j in 0..features.ncols() {
            let col = features.column(j);
            let mean = col.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = col.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
            self.input_shift[j] = T::of(mean);
            self.input_scale[j] = T::of(if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 });
        }
    }

    fn standardize(&self, features: ArrayView2<'_, T>) -> Array2<T> {
        (&features - &self.input_shift) * &self.input_scale
    }

    pub fn forward(&self, features: ArrayView2<'_, T>) -> Result<ForwardOutput<T>> {
        let (inputs, _, _) = self.dims();
        if features.ncols() != inputs {
            return Err(Error::Contract(format!("expected {inputs} input features, got {}", features.ncols())));
        }
        let input = self.standardize(features);
        check_finite(&input, "input")?;
        let mut hidden1 = self.hidden1.apply(input.view());
        check_finite(&hidden1, "first layer")?;
        relu(&mut hidden1);
        let mut hidden2 = self.hidden2.apply(hidden1.view());
        check_finite(&hidden2, "second layer")?;
        relu(&mut hidden2);
        let cls = self.head_cls.apply(hidden2.view());
        let mim = self.head_mim.apply(hidden2.view());
        check_finite(&cls, "classifier head")?;
        check_finite(&mim, "mimicry head")?;
        Ok(ForwardOutput {
            cls,
            mim,
            cache: ForwardCache { input, hidden1, hidden2 },
        })
    }

    /// Classifier logits without keeping a cache.
    pub fn predict(&self, features: ArrayView2<'_, T>) -> Result<Array2<T>> {
        Ok(self.forward(features)?.cls)
    }

    /// Gradients of `sum(grad_cls * cls) + sum(grad_mim * mim)`.
    ///
    /// A missing `grad_mim` is treated as zero and skips the mimicry head.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_cls: ArrayView2<'_, T>,
        grad_mim: Option<ArrayView2<'_, T>>,
    ) -> Result<BackwardOutput<T>> {
        let (params, input) = self.backward_impl(cache, grad_cls, grad_mim, true)?;
        Ok(BackwardOutput {
            params,
            input: input.expect("input gradient requested"),
        })
    }

    /// As [`SegNet::backward`] without the input-feature gradient.
    pub fn param_gradients(
        &self,
        cache: &ForwardCache<T>,
        grad_cls: ArrayView2<'_, T>,
        grad_mim: Option<ArrayView2<'_, T>>,
    ) -> Result<SegNet<T>> {
        Ok(self.backward_impl(cache, grad_cls, grad_mim, false)?.0)
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache<T>,
        grad_cls: ArrayView2<'_, T>,
        grad_mim: Option<ArrayView2<'_, T>>,
        want_input: bool,
    ) -> Result<(SegNet<T>, Option<Array2<T>>)> {
        let (_, hidden, classes) = self.dims();
        let m = cache.input.nrows();
        if grad_cls.dim() != (m, classes) || grad_mim.is_some_and(|g| g.dim() != (m, classes)) {
            return Err(Error::Contract(format!(
                "upstream gradient shape {:?} does not match {m}x{classes}",
                grad_cls.dim()
            )));
        }
        if cache.hidden2.dim() != (m, hidden) {
            return Err(Error::Contract("forward cache does not match this network".into()));
        }
        let mut grads = self.zeros_like();
        grads.head_cls.weight = cache.hidden2.t().dot(&grad_cls);
        grads.head_cls.bias = grad_cls.sum_axis(Axis(0));
        let mut d_h2 = grad_cls.dot(&self.head_cls.weight.t());
        if let Some(gm) = grad_mim {
            grads.head_mim.weight = cache.hidden2.t().dot(&gm);
            grads.head_mim.bias = gm.sum_axis(Axis(0));
            d_h2 += &gm.dot(&self.head_mim.weight.t());
        }
        Zip::from(&mut d_h2).and(&cache.hidden2).for_each(|d, &a| {
            if a <= T::zero() {
                *d = T::zero();
            }
        });
        grads.hidden2.weight = cache.hidden1.t().dot(&d_h2);
        grads.hidden2.bias = d_h2.sum_axis(Axis(0));
        let mut d_h1 = d_h2.dot(&self.hidden2.weight.t());
        Zip::from(&mut d_h1).and(&cache.hidden1).for_each(|d, &a| {
            if a <= T::zero() {
                *d = T::zero();
            }
        });
        grads.hidden1.weight = cache.input.t().dot(&d_h1);
        grads.hidden1.bias = d_h1.sum_axis(Axis(0));
        let input = want_input.then(|| d_h1.dot(&self.hidden1.weight.t()) * &self.input_scale);
        Ok((grads, input))
    }

    /// Trainable tensors in a fixed order.
    pub fn tensors(&self) -> [&[T]; 8] {
        [
            self.hidden1.weight.as_slice().expect("standard layout"),
            self.hidden1.bias.as_slice().expect("standard layout"),
            self.hidden2.weight.as_slice().expect("standard layout"),
            self.hidden2.bias.as_slice().expect("standard layout"),
            self.head_cls.weight.as_slice().expect("standard layout"),
            self.head_cls.bias.as_slice().expect("standard layout"),
            self.head_mim.weight.as_slice().expect("standard layout"),
            self.head_mim.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 8] {
        [
            self.hidden1.weight.as_slice_mut().expect("standard layout"),
            self.hidden1.bias.as_slice_mut().expect("standard layout"),
            self.hidden2.weight.as_slice_mut().expect("standard layout"),
            self.hidden2.bias.as_slice_mut().expect("standard layout"),
            self.head_cls.weight.as_slice_mut().expect("standard layout"),
            self.head_cls.bias.as_slice_mut().expect("standard layout"),
            self.head_mim.weight.as_slice_mut().expect("standard layout"),
            self.head_mim.bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Element type conversion, e.g. for `f64` gradient checks of an `f32` model.
    pub fn cast<U: Real>(&self) -> SegNet<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::of(v.as_f64()));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::of(v.as_f64()));
        let ca = |a: &Affine<T>| Affine {
            weight: c2(&a.weight),
            bias: c1(&a.bias),
        };
        SegNet {
            input_shift: c1(&self.input_shift),
            input_scale: c1(&self.input_scale),
            hidden1: ca(&self.hidden1),
            hidden2: ca(&self.hidden2),
            head_cls: ca(&self.head_cls),
            head_mim: ca(&self.head_mim),
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.input_shift.len() == other.input_shift.len()
    }
}

/// Slowly moving copy of the 3D student.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState<T> {
    pub params: SegNet<T>,
    pub decay: f64,
}

impl<T: Real> TeacherState<T> {
    /// Starts as an exact copy of the student.
    pub fn new(student: &SegNet<T>, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("EMA decay must lie in (0, 1), got {decay}")));
        }
        Ok(TeacherState {
            params: student.clone(),
            decay,
        })
    }

    /// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
    pub fn ema_update(&mut self, student: &SegNet<T>) -> Result<()> {
        if !self.params.same_shape(student) {
            return Err(Error::Contract("teacher and student shapes differ".into()));
        }
        let keep = T::of(self.decay);
        let take = T::of(1.0 - self.decay);
        for (t, s) in self.params.tensors_mut().into_iter().zip(student.tensors()) {
            for (a, &b) in t.iter_mut().zip(s) {
                *a = keep * *a + take * b;
            }
        }
        self.params.input_shift.assign(&student.input_shift);
        self.params.input_scale.assign(&student.input_scale);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = crate::seed::stream(seed, &[]);
        Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0f32..1.0))
    }

    #[test]
    fn patch_features() {
        let img = Array3::from_shape_fn((4, 5, 3), |(_, _, c)| [0.1f32, 0.5, 0.9][c]);
        let f = features_2d(img.view());
        for v in f.slice(s![2, 3, ..]).exact_chunks(3) {
            assert_eq!(v.to_vec(), vec![0.1, 0.5, 0.9]);
        }
        let img = random_image(5, 6, 1);
        let f = features_2d(img.view());
        // Corner (0, 0) with replicated edges.
        let mut oracle = Vec::new();
        for r in [0usize, 0, 1] {
            for c in [0usize, 0, 1] {
                oracle.extend((0..3).map(|ch| img[[r, c, ch]]));
            }
        }
        assert_eq!(f.slice(s![0, 0, ..]).to_vec(), oracle);
        let mut interior = Vec::new();
        for r in 1..4 {
            for c in 2..5 {
                interior.extend((0..3).map(|ch| img[[r, c, ch]]));
            }
        }
        assert_eq!(f.slice(s![2, 3, ..]).to_vec(), interior);
        let at = features_2d_at::<f32>(img.view(), &[PixelIndex::new(2, 3), PixelIndex::new(0, 0)]).unwrap();
        assert_eq!(at.row(0).to_vec(), interior);
        assert_eq!(at.row(1).to_vec(), oracle);
        assert!(features_2d_at::<f32>(img.view(), &[PixelIndex::new(5, 0)]).is_err());
    }

    #[test]
    fn point_features() {
        let f = features_3d::<f64>(&[[0.0, 0.0, 5.0], [3.0, 4.0, 0.0], [6.0, 8.0, 0.0]]).unwrap();
        assert_eq!(f.row(0).to_vec(), vec![0.0, 0.0, 5.0, 5.0, 0.0, 0.0, 1.0]);
        assert!((f[[1, 3]] - 5.0).abs() < 1e-12);
        assert!((f[[1, 4]] - 0.6).abs() < 1e-7 && (f[[1, 5]] - 0.8).abs() < 1e-7);
        assert_eq!(f.slice(s![1, 4..]), f.slice(s![2, 4..]));
        assert!(matches!(features_3d::<f64>(&[[0.0; 3]]), Err(Error::Numeric(_))));
    }

    fn tiny(seed: u64, i: usize, h: usize, c: usize) -> SegNet<f64> {
        let mut rng = crate::seed::stream(seed, &[]);
        let mut net = SegNet::new(i, h, c, &mut rng);
        for t in net.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        net.input_shift = Array1::from_shape_fn(i, |_| rng.random_range(-0.5..0.5));
        net.input_scale = Array1::from_shape_fn(i, |_| rng.random_range(0.5..2.0));
        net
    }

    #[test]
    fn forward_examples() {
        let mut net = SegNet::<f64>::zeros(3, 4, 2);
        net.input_scale.fill(1.0);
        net.head_cls.bias = arr1(&[0.25, -1.0]);
        let out = net.forward(arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).view()).unwrap();
        for row in out.cls.rows() {
            assert_eq!(row.to_vec(), vec![0.25, -1.0]);
        }

        // Hand-sized net: F = H = C = 2.
        let mut net = SegNet::<f64>::zeros(2, 2, 2);
        net.input_scale.fill(1.0);
        net.hidden1 = Affine { weight: arr2(&[[1.0, -1.0], [2.0, 0.5]]), bias: arr1(&[0.0, 0.1]) };
        net.hidden2 = Affine { weight: arr2(&[[1.0, 0.0], [-1.0, 1.0]]), bias: arr1(&[0.5, 0.0]) };
        net.head_cls = Affine { weight: arr2(&[[1.0, 2.0], [3.0, -1.0]]), bias: arr1(&[0.0, 1.0]) };
        net.head_mim = net.head_cls.clone();
        let out = net.forward(arr2(&[[1.0, 1.0]]).view()).unwrap();
        // h1 = relu(1 + 2, -1 + 0.5 + 0.1) = (3, 0)
        // h2 = relu(3 + 0.5, 0) = (3.5, 0)
        // cls = (3.5, 7 + 1)
        assert_eq!(out.cls, arr2(&[[3.5, 8.0]]));
        assert_eq!(out.mim, out.cls);

        let mut bad = net.clone();
        bad.hidden1.weight[[0, 0]] = f64::NAN;
        assert!(matches!(bad.forward(arr2(&[[1.0, 1.0]]).view()), Err(Error::Numeric(_))));
        assert!(matches!(net.forward(arr2(&[[1.0, 1.0, 1.0]]).view()), Err(Error::Contract(_))));
    }

    fn objective(net: &SegNet<f64>, x: &Array2<f64>, wc: &Array2<f64>, wm: &Array2<f64>) -> f64 {
        let out = net.forward(x.view()).unwrap();
        (&out.cls * wc).sum() + (&out.mim * wm).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..4u64 {
            let (i, h, c, m) = (3 + (seed as usize % 2), 4, 3 + (seed as usize % 2), 8);
            let net = tiny(seed, i, h, c);
            let mut rng = crate::seed::stream(seed, &[99]);
            let x = Array2::from_shape_fn((m, i), |_| rng.random_range(-1.0..1.0));
            let wc = Array2::from_shape_fn((m, c), |_| rng.random_range(-1.0..1.0));
            let wm = Array2::from_shape_fn((m, c), |_| rng.random_range(-1.0..1.0));
            let out = net.forward(x.view()).unwrap();
            let back = net.backward(&out.cache, wc.view(), Some(wm.view())).unwrap();
            let eps = 1e-5;
            let analytic: Vec<Vec<f64>> = back.params.tensors().iter().map(|t| t.to_vec()).collect();
            for (ti, grads) in analytic.iter().enumerate() {
                for (k, &g) in grads.iter().enumerate() {
                    let mut plus = net.clone();
                    plus.tensors_mut()[ti][k] += eps;
                    let mut minus = net.clone();
                    minus.tensors_mut()[ti][k] -= eps;
                    let fd = (objective(&plus, &x, &wc, &wm) - objective(&minus, &x, &wc, &wm)) / (2.0 * eps);
                    let scale = g.abs().max(fd.abs());
                    assert!(
                        (g - fd).abs() <= 1e-4 * scale || (g - fd).abs() < 1e-8,
                        "seed {seed} tensor {ti} entry {k}: {g} vs {fd}"
                    );
                }
            }
            for r in 0..m {
                for j in 0..i {
                    let mut plus = x.clone();
                    plus[[r, j]] += eps;
                    let mut minus = x.clone();
                    minus[[r, j]] -= eps;
                    let fd = (objective(&net, &plus, &wc, &wm) - objective(&net, &minus, &wc, &wm)) / (2.0 * eps);
                    let g = back.input[[r, j]];
                    assert!((g - fd).abs() <= 1e-4 * g.abs().max(fd.abs()) || (g - fd).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn head_separation_and_zero_upstream() {
        let net = tiny(5, 3, 4, 3);
        let x = Array2::from_shape_fn((5, 3), |(r, c)| (r as f64 - c as f64) * 0.3);
        let out = net.forward(x.view()).unwrap();
        let zero = Array2::zeros((5, 3));
        let back = net.backward(&out.cache, zero.view(), Some(zero.view())).unwrap();
        assert!(back.params.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        let ones = Array2::ones((5, 3));
        let back = net.backward(&out.cache, ones.view(), None).unwrap();
        assert!(back.params.head_mim.weight.iter().all(|&v| v == 0.0));
        assert!(back.params.head_cls.weight.iter().any(|&v| v != 0.0));
        let back = net.backward(&out.cache, zero.view(), Some(ones.view())).unwrap();
        assert!(back.params.head_cls.weight.iter().all(|&v| v == 0.0));
        assert!(back.params.head_mim.weight.iter().any(|&v| v != 0.0));
        assert!(matches!(net.backward(&out.cache, Array2::zeros((4, 3)).view(), None), Err(Error::Contract(_))));
    }

    #[test]
    fn initialization_bounds() {
        let mut rng = crate::seed::stream(0, &[]);
        let net = SegNet::<f32>::new(27, 64, 6, &mut rng);
        let limit = (6.0f32 / 91.0).sqrt();
        assert!(net.hidden1.weight.iter().all(|v| v.abs() <= limit));
        assert!(net.hidden1.bias.iter().all(|&v| v == 0.0));
        assert!(net.validate().is_ok());
        assert_eq!(net.dims(), (27, 64, 6));
    }

    #[test]
    fn ema_examples() {
        let mut student = SegNet::<f64>::zeros(2, 2, 2);
        let mut teacher = TeacherState::new(&student, 0.99).unwrap();
        for t in teacher.params.tensors_mut() {
            t.fill(1.0);
        }
        teacher.ema_update(&student).unwrap();
        assert!(teacher.params.tensors().iter().all(|t| t.iter().all(|&v| (v - 0.99).abs() < 1e-15)));

        let fixed = teacher.clone();
        let mut same = TeacherState::new(&fixed.params, 0.99).unwrap();
        same.ema_update(&fixed.params).unwrap();
        assert_eq!(same.params, fixed.params);

        for t in student.tensors_mut() {
            t.fill(-2.0);
        }
        let mut teacher = TeacherState::new(&SegNet::<f64>::zeros(2, 2, 2), 0.99).unwrap();
        for t in teacher.params.tensors_mut() {
            t.fill(3.0);
        }
        for _ in 0..50 {
            teacher.ema_update(&student).unwrap();
        }
        let expected = 0.99f64.powi(50) * 5.0;
        for t in teacher.params.tensors() {
            for &v in t {
                assert!(((v + 2.0) - expected).abs() < 1e-9);
            }
        }
        assert!(teacher.ema_update(&SegNet::zeros(3, 2, 2)).is_err());
        assert!(TeacherState::new(&student, 1.0).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let net = tiny(7, 3, 4, 2);
        let back: SegNet<f64> = net.cast::<f32>().cast();
        for (a, b) in net.tensors().iter().zip(back.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn rows_are_processed_independently(seed in any::<u64>(), m in 1usize..12) {
            let net = tiny(seed, 3, 4, 3);
            let mut rng = crate::seed::stream(seed, &[1]);
            let x = Array2::from_shape_fn((m, 3), |_| rng.random_range(-2.0..2.0));
            let mut perm: Vec<usize> = (0..m).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let xp = x.select(Axis(0), &perm);
            let a = net.predict(x.view()).unwrap();
            let b = net.predict(xp.view()).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                for k in 0..3 {
                    prop_assert!((b[[i, k]] - a[[p, k]]).abs() <= 1e-12);
                }
            }
        }
    }
}
