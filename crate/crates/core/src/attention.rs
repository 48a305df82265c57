//! Dense multi-head softmax attention over explicit boolean masks.
//!
//! This is the reference path: every sparse or block-structured computation in
//! the crate is checked against `mha` evaluated under the equivalent dense mask.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::Range;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (default) and `f64`
/// (reference mode).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every supported float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish_non_exhaustive()
    }
}

impl<T: Real> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn view(&self) -> MatrixView<'_, T> {
        MatrixView {
            rows: self.rows,
            cols: self.cols,
            data: &self.data,
        }
    }

    /// Borrowed view over a contiguous row range.
    pub fn row_view(&self, range: Range<usize>) -> MatrixView<'_, T> {
        assert!(range.start <= range.end && range.end <= self.rows);
        MatrixView {
            rows: range.len(),
            cols: self.cols,
            data: &self.data[range.start * self.cols..range.end * self.cols],
        }
    }

    /// Owned copy of a contiguous row range.
    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        self.row_view(range).to_owned()
    }

    /// Owned copy of a contiguous column range.
    pub fn slice_cols(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.cols);
        let width = range.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[range.clone()]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Writes `block` into this matrix starting at column `col`.
    pub fn write_cols(&mut self, col: usize, block: &Matrix<T>) {
        assert_eq!(block.rows, self.rows);
        assert!(col + block.cols <= self.cols);
        for r in 0..self.rows {
            self.row_mut(r)[col..col + block.cols].copy_from_slice(block.row(r));
        }
    }

    /// Overwrites rows starting at `row` with the rows of `block`.
    pub fn write_rows(&mut self, row: usize, block: MatrixView<'_, T>) {
        assert_eq!(block.cols, self.cols);
        assert!(row + block.rows <= self.rows);
        let start = row * self.cols;
        self.data[start..start + block.data.len()].copy_from_slice(block.data);
    }

    /// Appends the rows of `other`.
    pub fn push_rows(&mut self, other: MatrixView<'_, T>) -> Result<()> {
        if other.rows > 0 && self.rows > 0 && other.cols != self.cols {
            return Err(Error::Shape(format!(
                "cannot append {} columns to {} columns",
                other.cols, self.cols
            )));
        }
        if self.rows == 0 {
            self.cols = other.cols;
        }
        self.data.extend_from_slice(other.data);
        self.rows += other.rows;
        Ok(())
    }

    pub fn vstack(parts: &[MatrixView<'_, T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut out = Self::zeros(0, cols);
        for p in parts {
            out.push_rows(*p)?;
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    /// Largest absolute elementwise difference, evaluated in f64.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn bitwise_eq(&self, other: &Matrix<T>) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Borrowed row-major matrix view.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a, T> {
    rows: usize,
    cols: usize,
    data: &'a [T],
}

impl<'a, T: Real> MatrixView<'a, T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &'a [T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_owned(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.to_vec(),
        }
    }
}

/// Dense boolean attention mask, `rows` queries by `cols` keys.
#[derive(Clone, PartialEq, Eq)]
pub struct MaskSpec {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Debug for MaskSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "MaskSpec {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows.min(64) {
            let line: String = self
                .row(r)
                .iter()
                .take(128)
                .map(|&a| if a { '#' } else { '.' })
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl MaskSpec {
    /// All pairs disallowed.
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![false; rows * cols],
        }
    }

    /// All pairs allowed.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    /// Lower-triangular (including the diagonal) mask over `n` tokens.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |q, k| k <= q)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(rows, cols);
        for q in 0..rows {
            for k in 0..cols {
                m.allowed[q * cols + k] = f(q, k);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        self.allowed[q * self.cols + k] = value;
    }

    /// Allows every key in `keys` for query `q`.
    pub fn allow_range(&mut self, q: usize, keys: Range<usize>) {
        let base = q * self.cols;
        self.allowed[base + keys.start..base + keys.end].fill(true);
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.cols..(q + 1) * self.cols]
    }

    pub fn count_allowed(&self) -> u64 {
        self.allowed.iter().filter(|&&a| a).count() as u64
    }

    /// True when every pair allowed here is also allowed by `other`.
    pub fn is_subset_of(&self, other: &MaskSpec) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .allowed
                .iter()
                .zip(&other.allowed)
                .all(|(&a, &b)| !a || b)
    }

    /// Square mask extended by one token that attends every key including
    /// itself; existing rows do not see the new key.
    pub fn with_appended_token(&self) -> MaskSpec {
        assert_eq!(self.rows, self.cols, "appending requires a square mask");
        let n = self.rows;
        MaskSpec::from_fn(n + 1, n + 1, |q, k| {
            if q == n {
                true
            } else {
                k < n && self.allowed(q, k)
            }
        })
    }

    /// First query row that allows no key, if any.
    pub fn first_unattended_row(&self) -> Option<usize> {
        (0..self.rows).find(|&q| !self.row(q).contains(&true))
    }
}

/// Head split of the hidden dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    num_heads: usize,
    head_dim: usize,
}

impl HeadLayout {
    pub fn new(num_heads: usize, head_dim: usize) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::Shape(format!(
                "head layout needs at least one head of nonzero width, got {num_heads}x{head_dim}"
            )));
        }
        Ok(Self {
            num_heads,
            head_dim,
        })
    }

    /// Splits `hidden` into `num_heads` equal heads.
    pub fn from_hidden(hidden: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || hidden == 0 || !hidden.is_multiple_of(num_heads) {
            return Err(Error::HeadSplit {
                hidden,
                heads: num_heads,
            });
        }
        Self::new(num_heads, hidden / num_heads)
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn hidden(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn head_cols(&self, head: usize) -> Range<usize> {
        head * self.head_dim..(head + 1) * self.head_dim
    }
}

pub(crate) fn check_temperature<T: Real>(temperature: T) -> Result<()> {
    if temperature > T::zero() && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(temperature.as_f64()))
    }
}

/// In-place softmax of already-finite logits. The caller guarantees a
/// non-empty slice and a positive temperature.
pub(crate) fn softmax_in_place<T: Real>(values: &mut [T], temperature: T) {
    let max = values.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in values.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum = sum + *v;
    }
    for v in values.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax with max subtraction and a temperature applied to the logits.
pub fn stable_softmax<T: Real>(logits: &[T], temperature: T) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(Error::EmptySoftmaxRow);
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax logits"));
    }
    check_temperature(temperature)?;
    let mut out = logits.to_vec();
    softmax_in_place(&mut out, temperature);
    Ok(out)
}

/// Single-head scaled dot-product attention. Masked keys are dropped from the
/// softmax rather than assigned a large negative logit.
pub fn sdpa<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &MaskSpec,
    temperature: T,
) -> Result<Matrix<T>> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d {
        return Err(Error::Shape(format!(
            "q has {d} columns, k has {}, v has {}",
            k.cols(),
            v.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "k has {} rows, v has {}",
            k.rows(),
            v.rows()
        )));
    }
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(Error::Shape(format!(
            "mask is {}x{} for {} queries and {} keys",
            mask.rows(),
            mask.cols(),
            q.rows(),
            k.rows()
        )));
    }
    check_temperature(temperature)?;

    let scale = T::from_usize(d).expect("head dim fits the float type").sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut keys = Vec::new();
    let mut logits = Vec::new();
    for i in 0..q.rows() {
        keys.clear();
        keys.extend((0..k.rows()).filter(|&j| mask.allowed(i, j)));
        if keys.is_empty() {
            return Err(Error::UnattendedQuery { row: i });
        }
        let qi = q.row(i);
        logits.clear();
        logits.extend(keys.iter().map(|&j| dot(qi, k.row(j)) / scale));
        let weights = stable_softmax(&logits, temperature)?;
        let row = out.row_mut(i);
        for (&j, &w) in keys.iter().zip(&weights) {
            for (o, &x) in row.iter_mut().zip(v.row(j)) {
                *o = *o + w * x;
            }
        }
    }
    Ok(out)
}

/// Multi-head attention: columns are split into contiguous head slices, `sdpa`
/// runs per head and the slices are concatenated back. No projections.
pub fn mha<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: HeadLayout,
    mask: &MaskSpec,
    temperature: T,
) -> Result<Matrix<T>> {
    let hidden = layout.hidden();
    for (name, m) in [("q", q), ("k", k), ("v", v)] {
        if m.cols() != hidden {
            return Err(Error::Shape(format!(
                "{name} has {} columns, head layout expects {hidden}",
                m.cols()
            )));
        }
    }
    let mut out = Matrix::zeros(q.rows(), hidden);
    for h in 0..layout.num_heads() {
        let cols = layout.head_cols(h);
        let head = sdpa(
            &q.slice_cols(cols.clone()),
            &k.slice_cols(cols.clone()),
            &v.slice_cols(cols.clone()),
            mask,
            temperature,
        )?;
        out.write_cols(cols.start, &head);
    }
    Ok(out)
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
