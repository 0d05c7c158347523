//! Pinhole projection and the point-to-pixel sampling operator.
//!
//! LiDAR points live in the camera frame (x right, y down, z forward), so the
//! projection needs intrinsics only.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use num_traits::Zero;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, cx: f64, cy: f64, height: usize, width: usize) -> Result<Self> {
        let camera = CameraIntrinsics {
            focal,
            cx,
            cy,
            height,
            width,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::Config(format!("focal length must be positive, got {}", self.focal)));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be non-zero".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::Config(format!("cx = {} outside [0, {})", self.cx, self.width)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::Config(format!("cy = {} outside [0, {})", self.cy, self.height)));
        }
        Ok(())
    }

    /// Unnormalized direction of the ray through the center of pixel `(row, col)`.
    pub fn pixel_ray(&self, row: usize, col: usize) -> [f64; 3] {
        [
            (col as f64 - self.cx) / self.focal,
            (row as f64 - self.cy) / self.focal,
            1.0,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelIndex {
    pub row: usize,
    pub col: usize,
}

impl PixelIndex {
    pub fn new(row: usize, col: usize) -> Self {
        PixelIndex { row, col }
    }
}

/// Projects a camera-frame point to its nearest pixel.
///
/// Returns `None` when the point is behind the camera or its projection falls
/// more than half a pixel outside the image.
pub fn project_point(point: [f64; 3], camera: &CameraIntrinsics) -> Option<PixelIndex> {
    let [x, y, z] = point;
    if !(z > 0.0) || !x.is_finite() || !y.is_finite() || !z.is_finite() {
        return None;
    }
    let u = camera.focal * x / z + camera.cx;
    let v = camera.focal * y / z + camera.cy;
    let col = snap(u, camera.width)?;
    let row = snap(v, camera.height)?;
    Some(PixelIndex { row, col })
}

fn snap(coord: f64, extent: usize) -> Option<usize> {
    if coord < -0.5 || coord >= extent as f64 - 0.5 {
        return None;
    }
    Some((coord.round().max(0.0) as usize).min(extent - 1))
}

fn check_index(point: usize, pixel: PixelIndex, height: usize, width: usize) -> Result<()> {
    if pixel.row >= height || pixel.col >= width {
        return Err(Error::Index {
            point,
            row: pixel.row,
            col: pixel.col,
            height,
            width,
        });
    }
    Ok(())
}

/// Gathers the per-pixel vectors of an `H x W x K` map at each point's pixel.
pub fn sample_at_points<T: Copy + Zero>(
    map: ArrayView3<'_, T>,
    pixel_of_point: &[PixelIndex],
) -> Result<Array2<T>> {
    let (height, width, channels) = map.dim();
    let mut out = Array2::zeros((pixel_of_point.len(), channels));
    for (i, (&pixel, mut row)) in pixel_of_point.iter().zip(out.rows_mut()).enumerate() {
        check_index(i, pixel, height, width)?;
        row.assign(&map.slice(ndarray::s![pixel.row, pixel.col, ..]));
    }
    Ok(out)
}

/// Gathers a single-channel `H x W` map (labels, masks) at each point's pixel.
pub fn sample_plane_at_points<T: Copy>(
    plane: ArrayView2<'_, T>,
    pixel_of_point: &[PixelIndex],
) -> Result<Vec<T>> {
    let (height, width) = plane.dim();
    pixel_of_point
        .iter()
        .enumerate()
        .map(|(i, &pixel)| {
            check_index(i, pixel, height, width)?;
            Ok(plane[[pixel.row, pixel.col]])
        })
        .collect()
}

/// Adjoint of [`sample_at_points`]: accumulates per-point rows into their pixels.
pub fn scatter_gradient<T: Copy + Zero + std::ops::AddAssign>(
    point_grads: ArrayView2<'_, T>,
    pixel_of_point: &[PixelIndex],
    height: usize,
    width: usize,
) -> Result<Array3<T>> {
    if point_grads.nrows() != pixel_of_point.len() {
        return Err(Error::Contract(format!(
            "{} gradient rows for {} points",
            point_grads.nrows(),
            pixel_of_point.len()
        )));
    }
    let channels = point_grads.ncols();
    let mut map = Array3::zeros((height, width, channels));
    for (i, (&pixel, grad)) in pixel_of_point.iter().zip(point_grads.rows()).enumerate() {
        check_index(i, pixel, height, width)?;
        for (k, &g) in grad.iter().enumerate() {
            map[[pixel.row, pixel.col, k]] += g;
        }
    }
    Ok(map)
}
