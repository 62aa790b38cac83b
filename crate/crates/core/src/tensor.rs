//! Dense row-major tensors and the hyper-volume partition they are cut into.
//!
//! Rank-3 tensors are indexed `[height, width, channels]` with channels
//! fastest. A [`VolumeGrid`] splits such a tensor into `n_h * n_w * n_c`
//! non-overlapping volumes of extent `v_h * v_w * v_c`; the grid must divide
//! the tensor exactly, there is no padding and no overlap.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type for all numeric kernels. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(value: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(value: f64) -> Self {
        value as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(value: f64) -> Self {
        value
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Tensor shape: a non-empty list of positive extents.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    /// Builds a shape, rejecting empty dimension lists and zero extents.
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("shape must have at least one dimension".into()));
        }
        if let Some(&bad) = dims.iter().find(|&&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "shape extents must be positive, got {bad} in {dims:?}"
            )));
        }
        Ok(Shape(dims.to_vec()))
    }

    /// Rank-3 shape `[height, width, channels]`. Panics on zero extents;
    /// intended for literal shapes, use [`Shape::new`] for untrusted input.
    pub fn d3(height: usize, width: usize, channels: usize) -> Self {
        Shape::new(&[height, width, channels]).expect("d3 extents must be positive")
    }

    /// Rank-1 shape of the given length.
    pub fn d1(len: usize) -> Self {
        Shape::new(&[len]).expect("d1 length must be positive")
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// The three extents of a rank-3 shape.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(Error::ShapeMismatch(format!("expected rank 3, got {self}")));
        }
        Ok((self.0[0], self.0[1], self.0[2]))
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(&dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(shape: Shape) -> Self {
        shape.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rendered: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", rendered.join("x"))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Shape({self})")
    }
}

/// Dense row-major tensor. Public constructors reject non-finite elements,
/// so a `Tensor` obtained from safe inputs never holds NaN or Inf.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Wraps a data buffer, checking length and finiteness.
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        let tensor = Tensor { shape, data };
        tensor.check_finite("tensor construction")?;
        Ok(tensor)
    }

    pub fn zeros(shape: Shape) -> Self {
        let numel = shape.numel();
        Tensor { shape, data: vec![T::zero(); numel] }
    }

    /// Constant-filled tensor. The fill value must be finite.
    pub fn filled(shape: Shape, value: T) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("fill value {value}")));
        }
        let numel = shape.numel();
        Ok(Tensor { shape, data: vec![value; numel] })
    }

    /// Builds a tensor by evaluating `f` at each flat index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let numel = shape.numel();
        let data: Vec<T> = (0..numel).map(&mut f).collect();
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable element access for builder-style initialization. Callers are
    /// responsible for keeping elements finite; every layer operation checks
    /// its own output.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Element of a rank-3 tensor at `[y, x, c]`.
    pub fn at3(&self, y: usize, x: usize, c: usize) -> T {
        let (h, w, ch) = self.shape.dims3().expect("at3 requires a rank-3 tensor");
        assert!(y < h && x < w && c < ch, "index ({y},{x},{c}) out of bounds for {h}x{w}x{ch}");
        self.data[(y * w + x) * ch + c]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} ({} elements) to {shape} ({} elements)",
                self.shape,
                self.shape.numel(),
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add requires equal shapes, got {} and {}",
                self.shape, other.shape
            )));
        }
        let data: Vec<T> =
            self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        let out = Tensor { shape: self.shape.clone(), data };
        out.check_finite("add")?;
        Ok(out)
    }

    /// Multiplies every element by a finite scalar.
    pub fn scale(&self, factor: T) -> Result<Self> {
        if !factor.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {factor}")));
        }
        let data: Vec<T> = self.data.iter().map(|&a| a * factor).collect();
        let out = Tensor { shape: self.shape.clone(), data };
        out.check_finite("scale")?;
        Ok(out)
    }

    /// Sum of all elements.
    pub fn reduce_sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Flat index of the maximum element; ties resolve to the first.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (idx, &value) in self.data.iter().enumerate() {
            if value > self.data[best] {
                best = idx;
            }
        }
        best
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(idx) => Err(Error::NonFinite(format!(
                "{context} produced {} at flat index {idx}",
                self.data[idx]
            ))),
            None => Ok(()),
        }
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>({})", std::any::type_name::<T>(), self.shape)
    }
}

/// Partition of a rank-3 tensor into non-overlapping hyper-volumes.
///
/// `n_*` counts volumes along each axis, `v_*` gives the per-volume extent,
/// so the tensor being partitioned has shape
/// `[n_h * v_h, n_w * v_w, n_c * v_c]`. Volumes are ordered row-major by
/// `(i, j, k)` over `(n_h, n_w, n_c)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub n_h: usize,
    pub n_w: usize,
    pub n_c: usize,
    pub v_h: usize,
    pub v_w: usize,
    pub v_c: usize,
}

impl VolumeGrid {
    /// Builds a grid from volume counts and volume extents.
    pub fn new(counts: (usize, usize, usize), volume: (usize, usize, usize)) -> Result<Self> {
        let grid = VolumeGrid {
            n_h: counts.0,
            n_w: counts.1,
            n_c: counts.2,
            v_h: volume.0,
            v_w: volume.1,
            v_c: volume.2,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Derives volume counts for `input` from the volume extents alone.
    /// Fails unless every extent divides the matching input dimension.
    pub fn for_input(input: &Shape, volume: (usize, usize, usize)) -> Result<Self> {
        let (h, w, c) = input.dims3()?;
        let (v_h, v_w, v_c) = volume;
        if v_h == 0 || v_w == 0 || v_c == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume extents must be positive, got {v_h}x{v_w}x{v_c}"
            )));
        }
        if h % v_h != 0 || w % v_w != 0 || c % v_c != 0 {
            return Err(Error::ShapeMismatch(format!(
                "volume {v_h}x{v_w}x{v_c} does not divide input {input}"
            )));
        }
        VolumeGrid::new((h / v_h, w / v_w, c / v_c), volume)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.n_h, self.n_w, self.n_c, self.v_h, self.v_w, self.v_c];
        if fields.iter().any(|&v| v == 0) {
            return Err(Error::InvalidArgument(format!(
                "volume grid fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Shape of the tensor this grid partitions.
    pub fn input_shape(&self) -> Shape {
        Shape::d3(self.n_h * self.v_h, self.n_w * self.v_w, self.n_c * self.v_c)
    }

    /// Shape of one volume.
    pub fn volume_shape(&self) -> Shape {
        Shape::d3(self.v_h, self.v_w, self.v_c)
    }

    /// Number of volumes, `n_h * n_w * n_c`.
    pub fn volume_count(&self) -> usize {
        self.n_h * self.n_w * self.n_c
    }

    /// Elements per volume, `v_h * v_w * v_c`.
    pub fn volume_numel(&self) -> usize {
        self.v_h * self.v_w * self.v_c
    }

    /// Row-major index of volume `(i, j, k)`.
    pub fn volume_index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.n_h && j < self.n_w && k < self.n_c);
        (i * self.n_w + j) * self.n_c + k
    }

    /// Checks that `shape` is exactly the tensor shape this grid partitions.
    pub fn check_input(&self, shape: &Shape) -> Result<()> {
        let expected = self.input_shape();
        if *shape != expected {
            return Err(Error::ShapeMismatch(format!(
                "grid expects input {expected}, got {shape}"
            )));
        }
        Ok(())
    }

    /// Copies volume `(i, j, k)` of `input` into `out` (row-major within the
    /// volume, channels fastest). `out` must have length `volume_numel`.
    pub(crate) fn copy_volume<T: Scalar>(
        &self,
        input: &Tensor<T>,
        i: usize,
        j: usize,
        k: usize,
        out: &mut [T],
    ) {
        let width = self.n_w * self.v_w;
        let channels = self.n_c * self.v_c;
        let data = input.data();
        let mut cursor = 0;
        for dy in 0..self.v_h {
            let y = i * self.v_h + dy;
            for dx in 0..self.v_w {
                let x = j * self.v_w + dx;
                let src = (y * width + x) * channels + k * self.v_c;
                out[cursor..cursor + self.v_c].copy_from_slice(&data[src..src + self.v_c]);
                cursor += self.v_c;
            }
        }
    }

    /// Writes a volume-shaped buffer back into volume `(i, j, k)` of `dest`.
    pub(crate) fn write_volume<T: Scalar>(
        &self,
        dest: &mut Tensor<T>,
        i: usize,
        j: usize,
        k: usize,
        values: &[T],
    ) {
        let width = self.n_w * self.v_w;
        let channels = self.n_c * self.v_c;
        let data = dest.data_mut();
        let mut cursor = 0;
        for dy in 0..self.v_h {
            let y = i * self.v_h + dy;
            for dx in 0..self.v_w {
                let x = j * self.v_w + dx;
                let dst = (y * width + x) * channels + k * self.v_c;
                data[dst..dst + self.v_c].copy_from_slice(&values[cursor..cursor + self.v_c]);
                cursor += self.v_c;
            }
        }
    }
}

/// Cuts `input` into the grid's volumes, ordered row-major by `(i, j, k)`.
pub fn partition<T: Scalar>(input: &Tensor<T>, grid: &VolumeGrid) -> Result<Vec<Tensor<T>>> {
    grid.check_input(input.shape())?;
    let mut volumes = Vec::with_capacity(grid.volume_count());
    let mut buffer = vec![T::zero(); grid.volume_numel()];
    for i in 0..grid.n_h {
        for j in 0..grid.n_w {
            for k in 0..grid.n_c {
                grid.copy_volume(input, i, j, k, &mut buffer);
                volumes.push(Tensor::from_raw(grid.volume_shape(), buffer.clone()));
            }
        }
    }
    Ok(volumes)
}

/// Inverse of [`partition`]: stitches volumes back into the full tensor.
pub fn reassemble<T: Scalar>(grid: &VolumeGrid, volumes: &[Tensor<T>]) -> Result<Tensor<T>> {
    if volumes.len() != grid.volume_count() {
        return Err(Error::ShapeMismatch(format!(
            "grid has {} volumes, got {}",
            grid.volume_count(),
            volumes.len()
        )));
    }
    let volume_shape = grid.volume_shape();
    let mut output = Tensor::zeros(grid.input_shape());
    for i in 0..grid.n_h {
        for j in 0..grid.n_w {
            for k in 0..grid.n_c {
                let volume = &volumes[grid.volume_index(i, j, k)];
                if *volume.shape() != volume_shape {
                    return Err(Error::ShapeMismatch(format!(
                        "volume ({i},{j},{k}) has shape {}, expected {volume_shape}",
                        volume.shape()
                    )));
                }
                grid.write_volume(&mut output, i, j, k, volume.data());
            }
        }
    }
    Ok(output)
}

/// Dot product of two tensors of identical shape.
pub fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dot requires equal shapes, got {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut acc = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        acc += x * y;
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite(format!("dot produced {acc}")));
    }
    Ok(acc)
}
