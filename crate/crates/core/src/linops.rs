//! Matrix-free linear operators over grids.
//!
//! Every operator acts on flat `f64` slices and knows the [`Space`] of its
//! domain and range. Convolutions are circular so that the adjoint is exact.

use std::fmt;

use crate::error::{invalid, shape_err, Result};
use crate::grid::{dot, Grid, Shape};
use crate::rng::{self, Tag};

/// Square convolution stencil with an odd side length.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    size: usize,
    taps: Vec<f64>,
}

impl ConvKernel {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return invalid(format!("kernel size must be odd and positive, got {size}"));
        }
        if taps.len() != size * size {
            return shape_err(format!(
                "kernel of size {size} needs {} taps, got {}",
                size * size,
                taps.len()
            ));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return invalid("kernel taps must be finite");
        }
        Ok(Self { size, taps })
    }

    /// A kernel whose only nonzero tap is the center one.
    pub fn delta(size: usize, weight: f64) -> Result<Self> {
        let mut taps = vec![0.0; size * size];
        if size % 2 == 1 {
            taps[(size / 2) * size + size / 2] = weight;
        }
        Self::new(size, taps)
    }

    /// Normalized isotropic Gaussian blur.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return invalid(format!("gaussian sigma must be positive, got {sigma}"));
        }
        let h = (size / 2) as f64;
        let mut taps = Vec::with_capacity(size * size);
        for u in 0..size {
            for v in 0..size {
                let (du, dv) = (u as f64 - h, v as f64 - h);
                taps.push((-(du * du + dv * dv) / (2.0 * sigma * sigma)).exp());
            }
        }
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= total);
        Self::new(size, taps)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// The point-reflected kernel; convolving with it is the adjoint.
    pub fn reflected(&self) -> Self {
        Self {
            size: self.size,
            taps: self.taps.iter().rev().copied().collect(),
        }
    }
}

/// Strictly increasing list of linear grid indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RestrictionMask {
    indices: Vec<usize>,
}

impl RestrictionMask {
    pub fn new(indices: Vec<usize>, grid_len: usize) -> Result<Self> {
        if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
            return invalid(format!(
                "mask indices must be strictly increasing, found {} then {}",
                w[0], w[1]
            ));
        }
        if let Some(&last) = indices.last() {
            if last >= grid_len {
                return invalid(format!("mask index {last} out of range for {grid_len} cells"));
            }
        }
        Ok(Self { indices })
    }

    pub fn full(grid_len: usize) -> Self {
        Self {
            indices: (0..grid_len).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Source index offset for tap `u` of a `k`-stencil: output `r` reads
/// `(r + offset) mod n`.
fn wrap_offset(n: usize, k: usize, u: usize, sign: isize) -> usize {
    let h = (k / 2) as isize;
    (-sign * (u as isize - h)).rem_euclid(n as isize) as usize
}

/// `out += taps ⊛ x` with circular boundary.
pub(crate) fn conv_accumulate(taps: &[f64], k: usize, x: &[f64], shape: Shape, out: &mut [f64]) {
    stencil_accumulate(taps, k, x, shape, out, 1);
}

/// `out += taps ⋆ y`, the adjoint of [`conv_accumulate`].
pub(crate) fn corr_accumulate(taps: &[f64], k: usize, y: &[f64], shape: Shape, out: &mut [f64]) {
    stencil_accumulate(taps, k, y, shape, out, -1);
}

fn stencil_accumulate(taps: &[f64], k: usize, src: &[f64], shape: Shape, out: &mut [f64], sign: isize) {
    let (rows, cols) = (shape.rows, shape.cols);
    for u in 0..k {
        let roff = wrap_offset(rows, k, u, sign);
        for v in 0..k {
            let t = taps[u * k + v];
            if t == 0.0 {
                continue;
            }
            let coff = wrap_offset(cols, k, v, sign);
            let split = cols - coff;
            for r in 0..rows {
                let sr = (r + roff) % rows;
                let src_row = &src[sr * cols..(sr + 1) * cols];
                let (head, tail) = out[r * cols..(r + 1) * cols].split_at_mut(split);
                for (d, s) in head.iter_mut().zip(&src_row[coff..]) {
                    *d += t * s;
                }
                for (d, s) in tail.iter_mut().zip(&src_row[..coff]) {
                    *d += t * s;
                }
            }
        }
    }
}

/// Gradient of `<g, taps ⊛ x>` with respect to the taps, accumulated into
/// `grad`: `grad[u,v] += Σ g[r,c] x[(r-u+h), (c-v+h)]`.
pub(crate) fn conv_kernel_grad(g: &[f64], x: &[f64], k: usize, shape: Shape, grad: &mut [f64]) {
    let (rows, cols) = (shape.rows, shape.cols);
    for u in 0..k {
        let roff = wrap_offset(rows, k, u, 1);
        for v in 0..k {
            let coff = wrap_offset(cols, k, v, 1);
            let split = cols - coff;
            let mut acc = 0.0;
            for r in 0..rows {
                let sr = (r + roff) % rows;
                let src_row = &x[sr * cols..(sr + 1) * cols];
                let (gh, gt) = g[r * cols..(r + 1) * cols].split_at(split);
                for (a, b) in gh.iter().zip(&src_row[coff..]) {
                    acc += a * b;
                }
                for (a, b) in gt.iter().zip(&src_row[..coff]) {
                    acc += a * b;
                }
            }
            grad[u * k + v] += acc;
        }
    }
}

fn check_nonempty(x: &Grid) -> Result<()> {
    if x.is_empty() {
        return shape_err("convolution input is empty");
    }
    Ok(())
}

/// Circular 2-D convolution:
/// `out[r,c] = Σ_{u,v} taps[u,v] · x[(r−u+k/2) mod rows, (c−v+k/2) mod cols]`.
pub fn conv2d_apply(kernel: &ConvKernel, x: &Grid) -> Result<Grid> {
    check_nonempty(x)?;
    let mut out = vec![0.0; x.len()];
    conv_accumulate(kernel.taps(), kernel.size(), x.as_slice(), x.shape(), &mut out);
    Ok(Grid::from_raw(x.shape(), out))
}

/// Exact adjoint of [`conv2d_apply`] (circular correlation).
pub fn conv2d_adjoint(kernel: &ConvKernel, y: &Grid) -> Result<Grid> {
    check_nonempty(y)?;
    let mut out = vec![0.0; y.len()];
    corr_accumulate(kernel.taps(), kernel.size(), y.as_slice(), y.shape(), &mut out);
    Ok(Grid::from_raw(y.shape(), out))
}

pub fn restriction_apply(mask: &RestrictionMask, x: &Grid) -> Result<Vec<f64>> {
    if let Some(&last) = mask.indices().last() {
        if last >= x.len() {
            return invalid(format!("mask index {last} out of range for {} grid", x.shape()));
        }
    }
    Ok(mask.indices().iter().map(|&i| x.as_slice()[i]).collect())
}

pub fn restriction_adjoint(mask: &RestrictionMask, v: &[f64], shape: Shape) -> Result<Grid> {
    if v.len() != mask.len() {
        return shape_err(format!(
            "restriction adjoint expects {} values, got {}",
            mask.len(),
            v.len()
        ));
    }
    if let Some(&last) = mask.indices().last() {
        if last >= shape.len() {
            return invalid(format!("mask index {last} out of range for {shape} grid"));
        }
    }
    let mut out = vec![0.0; shape.len()];
    for (&i, &val) in mask.indices().iter().zip(v) {
        out[i] = val;
    }
    Ok(Grid::from_raw(shape, out))
}

/// Domain or range of an operator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Grid(Shape),
    Vector(usize),
}

impl Space {
    pub fn len(&self) -> usize {
        match self {
            Space::Grid(s) => s.len(),
            Space::Vector(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Space::Grid(s) => write!(f, "grid {s}"),
            Space::Vector(n) => write!(f, "vector[{n}]"),
        }
    }
}

/// Anything with a forward map and its adjoint.
pub trait LinearOperator: Send + Sync {
    fn domain(&self) -> Space;
    fn range(&self) -> Space;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub enum LinearOp {
    Identity(Space),
    Scale { factor: f64, space: Space },
    Conv { kernel: ConvKernel, shape: Shape },
    Restrict { mask: RestrictionMask, shape: Shape },
    Compose { outer: Box<LinearOp>, inner: Box<LinearOp> },
}

impl LinearOp {
    pub fn identity(shape: Shape) -> Self {
        LinearOp::Identity(Space::Grid(shape))
    }

    pub fn scale(factor: f64, shape: Shape) -> Self {
        LinearOp::Scale {
            factor,
            space: Space::Grid(shape),
        }
    }

    pub fn conv(kernel: ConvKernel, shape: Shape) -> Self {
        LinearOp::Conv { kernel, shape }
    }

    pub fn restrict(mask: RestrictionMask, shape: Shape) -> Result<Self> {
        if let Some(&last) = mask.indices().last() {
            if last >= shape.len() {
                return invalid(format!("mask index {last} out of range for {shape} grid"));
            }
        }
        Ok(LinearOp::Restrict { mask, shape })
    }

    /// Operator whose apply is `outer ∘ inner`.
    pub fn compose(outer: LinearOp, inner: LinearOp) -> Result<Self> {
        if inner.range() != outer.domain() {
            return shape_err(format!(
                "cannot compose: inner range is {} but outer domain is {}",
                inner.range(),
                outer.domain()
            ));
        }
        Ok(LinearOp::Compose {
            outer: Box::new(outer),
            inner: Box::new(inner),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LinearOp::Identity(_) => "identity",
            LinearOp::Scale { .. } => "scale",
            LinearOp::Conv { .. } => "conv",
            LinearOp::Restrict { .. } => "restrict",
            LinearOp::Compose { .. } => "compose",
        }
    }

    /// Applies the operator to a grid; the domain must be a grid space.
    pub fn apply_grid(&self, x: &Grid) -> Result<Vec<f64>> {
        match self.domain() {
            Space::Grid(s) if s == x.shape() => self.apply(x.as_slice()),
            d => shape_err(format!("operator domain is {d}, input is grid {}", x.shape())),
        }
    }

    /// Adjoint into a grid; the domain must be a grid space.
    pub fn adjoint_grid(&self, y: &[f64]) -> Result<Grid> {
        match self.domain() {
            Space::Grid(s) => Ok(Grid::from_raw(s, self.adjoint(y)?)),
            d => shape_err(format!("operator domain {d} is not a grid")),
        }
    }
}

fn expect_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return shape_err(format!("{what}: expected {want} values, got {got}"));
    }
    Ok(())
}

impl LinearOperator for LinearOp {
    fn domain(&self) -> Space {
        match self {
            LinearOp::Identity(s) => *s,
            LinearOp::Scale { space, .. } => *space,
            LinearOp::Conv { shape, .. } | LinearOp::Restrict { shape, .. } => Space::Grid(*shape),
            LinearOp::Compose { inner, .. } => inner.domain(),
        }
    }

    fn range(&self) -> Space {
        match self {
            LinearOp::Identity(s) => *s,
            LinearOp::Scale { space, .. } => *space,
            LinearOp::Conv { shape, .. } => Space::Grid(*shape),
            LinearOp::Restrict { mask, .. } => Space::Vector(mask.len()),
            LinearOp::Compose { outer, .. } => outer.range(),
        }
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        expect_len(self.kind(), x.len(), self.domain().len())?;
        match self {
            LinearOp::Identity(_) => Ok(x.to_vec()),
            LinearOp::Scale { factor, .. } => Ok(x.iter().map(|v| factor * v).collect()),
            LinearOp::Conv { kernel, shape } => {
                let mut out = vec![0.0; shape.len()];
                conv_accumulate(kernel.taps(), kernel.size(), x, *shape, &mut out);
                Ok(out)
            }
            LinearOp::Restrict { mask, .. } => Ok(mask.indices().iter().map(|&i| x[i]).collect()),
            LinearOp::Compose { outer, inner } => outer.apply(&inner.apply(x)?),
        }
    }

    fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        expect_len(self.kind(), y.len(), self.range().len())?;
        match self {
            LinearOp::Identity(_) => Ok(y.to_vec()),
            LinearOp::Scale { factor, .. } => Ok(y.iter().map(|v| factor * v).collect()),
            LinearOp::Conv { kernel, shape } => {
                let mut out = vec![0.0; shape.len()];
                corr_accumulate(kernel.taps(), kernel.size(), y, *shape, &mut out);
                Ok(out)
            }
            LinearOp::Restrict { mask, shape } => {
                let mut out = vec![0.0; shape.len()];
                for (&i, &v) in mask.indices().iter().zip(y) {
                    out[i] = v;
                }
                Ok(out)
            }
            LinearOp::Compose { outer, inner } => inner.adjoint(&outer.adjoint(y)?),
        }
    }
}

/// Largest relative discrepancy `|<Ax,y> − <x,Aᵀy>| / (|<Ax,y>| + tiny)` over
/// `trials` seeded Gaussian pairs.
pub fn dot_test(op: &dyn LinearOperator, seed: u64, trials: usize) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = rng::stream(seed, Tag::DotTest, &[trial as u64]);
        let x = rng::normal_vec(&mut rng, op.domain().len());
        let y = rng::normal_vec(&mut rng, op.range().len());
        let lhs = dot(&op.apply(&x)?, &y);
        let rhs = dot(&x, &op.adjoint(&y)?);
        let rel = (lhs - rhs).abs() / (lhs.abs() + TINY);
        if !rel.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_grid(rows: usize, cols: usize, seed: u64) -> Grid {
        let mut rng = rng::stream(seed, Tag::DotTest, &[999]);
        Grid::from_raw(Shape::new(rows, cols), rng::normal_vec(&mut rng, rows * cols))
    }

    /// Direct evaluation of the defining sum, one output cell at a time.
    fn brute_conv(kernel: &ConvKernel, x: &Grid) -> Grid {
        let k = kernel.size() as isize;
        let h = k / 2;
        let (rows, cols) = (x.rows() as isize, x.cols() as isize);
        Grid::from_fn(x.rows(), x.cols(), |r, c| {
            let mut acc = 0.0;
            for u in 0..k {
                for v in 0..k {
                    let rr = (r as isize - u + h).rem_euclid(rows) as usize;
                    let cc = (c as isize - v + h).rem_euclid(cols) as usize;
                    acc += kernel.taps()[(u * k + v) as usize] * x.get(rr, cc);
                }
            }
            acc
        })
    }

    #[test]
    fn identity_and_scaling_kernels() {
        let x = random_grid(5, 4, 1);
        let id = ConvKernel::delta(3, 1.0).unwrap();
        assert_eq!(conv2d_apply(&id, &x).unwrap(), x);
        assert_eq!(conv2d_adjoint(&id, &x).unwrap(), x);
        let two = ConvKernel::delta(3, 2.0).unwrap();
        assert_eq!(conv2d_apply(&two, &x).unwrap(), x.scaled(2.0));
    }

    #[test]
    fn off_center_tap_is_circular_shift() {
        // tap at (u, v) = (0, 2): out[r,c] = x[r+1, c-1]
        let mut taps = vec![0.0; 9];
        taps[2] = 1.0;
        let kernel = ConvKernel::new(3, taps).unwrap();
        let x = Grid::from_fn(4, 4, |r, c| (4 * r + c) as f64);
        let out = conv2d_apply(&kernel, &x).unwrap();
        assert_eq!(out, brute_conv(&kernel, &x));
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(out.get(r, c), x.get((r + 1) % 4, (c + 3) % 4));
            }
        }
    }

    #[test]
    fn random_kernel_matches_brute_force() {
        let mut rng = rng::stream(3, Tag::DotTest, &[]);
        let kernel = ConvKernel::new(5, rng::normal_vec(&mut rng, 25)).unwrap();
        let x = random_grid(6, 7, 4);
        let fast = conv2d_apply(&kernel, &x).unwrap();
        assert!(fast.max_abs_diff(&brute_conv(&kernel, &x)) < 1e-12);
    }

    #[test]
    fn symmetric_kernel_is_self_adjoint() {
        let kernel = ConvKernel::gaussian(5, 1.2).unwrap();
        let x = random_grid(6, 6, 5);
        let a = conv2d_apply(&kernel, &x).unwrap();
        let b = conv2d_adjoint(&kernel, &x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn conv_adjoint_dot_test_5x5() {
        let mut rng = rng::stream(11, Tag::DotTest, &[]);
        let kernel = ConvKernel::new(3, rng::normal_vec(&mut rng, 9)).unwrap();
        for seed in 0..10 {
            let x = random_grid(5, 5, 100 + seed);
            let y = random_grid(5, 5, 200 + seed);
            let lhs = conv2d_apply(&kernel, &x).unwrap().dot(&y);
            let rhs = x.dot(&conv2d_adjoint(&kernel, &y).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1e-300));
        }
    }

    #[test]
    fn adjoint_is_reflected_convolution() {
        let mut rng = rng::stream(12, Tag::DotTest, &[]);
        let kernel = ConvKernel::new(3, rng::normal_vec(&mut rng, 9)).unwrap();
        let y = random_grid(5, 6, 13);
        let a = conv2d_adjoint(&kernel, &y).unwrap();
        let b = conv2d_apply(&kernel.reflected(), &y).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn restriction_reads_and_scatters() {
        let x = Grid::from_fn(3, 3, |r, c| (3 * r + c) as f64);
        let mask = RestrictionMask::new(vec![0, 5], 9).unwrap();
        assert_eq!(restriction_apply(&mask, &x).unwrap(), vec![0.0, 5.0]);

        let full = RestrictionMask::full(9);
        assert_eq!(restriction_apply(&full, &x).unwrap(), x.as_slice());
        let back = restriction_adjoint(&full, x.as_slice(), x.shape()).unwrap();
        assert_eq!(back, x);

        let empty = RestrictionMask::new(vec![], 9).unwrap();
        assert!(restriction_apply(&empty, &x).unwrap().is_empty());
        assert_eq!(restriction_adjoint(&empty, &[], x.shape()).unwrap(), Grid::zeros(3, 3));

        let scattered = restriction_adjoint(&mask, &[7.0, 8.0], x.shape()).unwrap();
        assert_eq!(scattered.as_slice(), &[7.0, 0.0, 0.0, 0.0, 0.0, 8.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn restriction_rejects_bad_masks() {
        assert!(RestrictionMask::new(vec![3, 3], 9).is_err());
        assert!(RestrictionMask::new(vec![4, 2], 9).is_err());
        assert!(RestrictionMask::new(vec![9], 9).is_err());
        let mask = RestrictionMask::new(vec![0, 8], 9).unwrap();
        assert!(restriction_apply(&mask, &Grid::zeros(2, 2)).is_err());
        assert!(restriction_adjoint(&mask, &[1.0], Shape::new(3, 3)).is_err());
    }

    #[test]
    fn restriction_dot_test() {
        let shape = Shape::new(4, 5);
        let mask = RestrictionMask::new(vec![1, 2, 7, 11, 19], 20).unwrap();
        let op = LinearOp::restrict(mask, shape).unwrap();
        assert!(dot_test(&op, 1, 20).unwrap() <= 1e-12);
    }

    #[test]
    fn composition_semantics() {
        let shape = Shape::new(3, 3);
        let x = random_grid(3, 3, 21);
        let p = LinearOp::conv(ConvKernel::gaussian(3, 0.8).unwrap(), shape);
        let ip = LinearOp::compose(LinearOp::identity(shape), p.clone()).unwrap();
        assert_eq!(ip.apply(x.as_slice()).unwrap(), p.apply(x.as_slice()).unwrap());
        assert_eq!(ip.adjoint(x.as_slice()).unwrap(), p.adjoint(x.as_slice()).unwrap());

        let s6 = LinearOp::compose(LinearOp::scale(2.0, shape), LinearOp::scale(3.0, shape)).unwrap();
        let direct = LinearOp::scale(6.0, shape).apply(x.as_slice()).unwrap();
        let composed = s6.apply(x.as_slice()).unwrap();
        for (a, b) in direct.iter().zip(&composed) {
            assert!((a - b).abs() <= 1e-15 * a.abs());
        }
    }

    #[test]
    fn compose_rejects_mismatched_shapes() {
        let a = LinearOp::identity(Shape::new(3, 3));
        let b = LinearOp::identity(Shape::new(2, 2));
        assert!(LinearOp::compose(a, b).is_err());
        let mask = RestrictionMask::new(vec![0, 1], 9).unwrap();
        let r = LinearOp::restrict(mask, Shape::new(3, 3)).unwrap();
        // vector range cannot feed a grid convolution
        let conv = LinearOp::conv(ConvKernel::delta(1, 1.0).unwrap(), Shape::new(3, 3));
        assert!(LinearOp::compose(conv, r).is_err());
    }

    #[test]
    fn restrict_after_conv_dot_test_6x6() {
        let shape = Shape::new(6, 6);
        for seed in 0..5u64 {
            let mut rng = rng::stream(seed, Tag::Bank, &[]);
            let kernel = ConvKernel::new(3, rng::normal_vec(&mut rng, 9)).unwrap();
            let mut idx: Vec<usize> = (0..36).filter(|_| rng.random_bool(0.5)).collect();
            idx.dedup();
            let mask = RestrictionMask::new(idx, 36).unwrap();
            let op = LinearOp::compose(
                LinearOp::restrict(mask, shape).unwrap(),
                LinearOp::conv(kernel, shape),
            )
            .unwrap();
            assert!(dot_test(&op, seed, 20).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn dot_test_of_trivial_operators() {
        let shape = Shape::new(4, 4);
        assert_eq!(dot_test(&LinearOp::identity(shape), 0, 20).unwrap(), 0.0);
        assert!(dot_test(&LinearOp::scale(-3.5, shape), 0, 20).unwrap() <= 1e-15);
    }

    #[test]
    fn apply_rejects_wrong_length() {
        let op = LinearOp::identity(Shape::new(2, 2));
        assert!(op.apply(&[1.0; 3]).is_err());
        assert!(op.adjoint(&[1.0; 5]).is_err());
    }
}
