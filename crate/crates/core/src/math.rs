//! Dense numeric kernels shared by the model, trainer and decoder.
//!
//! Everything is row-major `f64`. Every reduction runs in a fixed
//! left-to-right order, so two runs over the same inputs agree bit for bit.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense array with a shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting length mismatches, zero dimensions and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor data")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of the trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        ensure_finite(&self.data, what)
    }
}

pub fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!("{what}: element {i} is {}", values[i]))),
        None => Ok(()),
    }
}

/// Standard matrix product of an `m×k` and a `k×n` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(&a.data, &b.data, m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` with `a: m×k`, `b: m×n`, `out: k×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`, `out: m×n`.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `ln Σ exp(vᵢ)`, computed around the maximum so large inputs do not overflow.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Argument("logsumexp of an empty vector".into()));
    }
    ensure_finite(v, "logsumexp input")?;
    Ok(logsumexp_unchecked(v))
}

pub(crate) fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut out = logits.to_vec();
    log_softmax_in_place(&mut out)?;
    Ok(out)
}

pub fn log_softmax_in_place(v: &mut [f64]) -> Result<()> {
    let z = logsumexp(v)?;
    for x in v.iter_mut() {
        *x -= z;
    }
    Ok(())
}

/// Softmax in place; the caller guarantees finite, nonempty input.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn value(&mut self, params: &[f64]) -> Result<f64>;
    fn gradient(&mut self, params: &[f64]) -> Result<Vec<f64>>;
}

/// Adapts a pair of closures into an [`Objective`].
pub struct FnObjective<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: FnMut(&[f64]) -> Result<f64>,
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    fn value(&mut self, params: &[f64]) -> Result<f64> {
        (self.value)(params)
    }

    fn gradient(&mut self, params: &[f64]) -> Result<Vec<f64>> {
        (self.gradient)(params)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Above this many parameters only a seeded random subset is checked.
    pub exhaustive_limit: usize,
    pub subset_size: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-4,
            exhaustive_limit: 10_000,
            subset_size: 2_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index of the parameter with the largest error.
    pub worst_parameter: usize,
    pub checked: usize,
}

/// Compares the analytic gradient against fourth-order central finite
/// differences, `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
///
/// The per-parameter error is `|g_a − g_fd| / max(|g_a|, |g_fd|, 1e-8)`.
pub fn grad_check<O: Objective>(objective: &mut O, params: &[f64], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::Argument(format!(
            "epsilon {} outside [1e-7, 1e-3]",
            opts.epsilon
        )));
    }
    let base = objective.value(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is {base}")));
    }
    let analytic = objective.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    ensure_finite(&analytic, "analytic gradient")?;

    let indices: Vec<usize> = if params.len() > opts.exhaustive_limit {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = index::sample(&mut rng, params.len(), opts.subset_size.min(params.len())).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..params.len()).collect()
    };

    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: indices.first().copied().unwrap_or(0),
        checked: indices.len(),
    };
    for &i in &indices {
        let orig = probe[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe[i] = orig + offset;
            let v = objective.value(&probe)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Numeric(format!(
                    "loss became non-finite while perturbing parameter {i}"
                )))
            }
        };
        let h = opts.epsilon;
        let fd = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
        probe[i] = orig;
        let ga = analytic[i];
        let err = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-8);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_parameter = i;
        }
    }
    Ok(report)
}
