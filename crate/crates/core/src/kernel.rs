//! Gaussian multi-kernel MMD and the pseudo-label weighted MMD.
//!
//! All estimators are V-statistics (diagonal terms included), so
//! `MMD²(X, X)` is exactly zero and every value is a squared RKHS norm up to
//! rounding.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Bandwidth multipliers applied to the median-heuristic width: σ·2⁻²..σ·2².
pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Target column mass below which a class counts as absent.
pub const COMMON_CLASS_EPS: f64 = 1e-6;

/// Equal-weight sum of Gaussian kernels `exp(-‖x-y‖² / 2σ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    bandwidths: Vec<f64>,
}

impl KernelConfig {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::param("kernel needs at least one bandwidth"));
        }
        if let Some(b) = bandwidths.iter().find(|b| !(**b > 0.0) || !b.is_finite()) {
            return Err(Error::param(format!(
                "bandwidth must be positive and finite, got {b}"
            )));
        }
        Ok(Self { bandwidths })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma])
    }

    /// `sigma` scaled by each multiplier.
    pub fn around(sigma: f64, multipliers: &[f64]) -> Result<Self> {
        Self::new(multipliers.iter().map(|m| sigma * m).collect())
    }

    /// Median-heuristic width of the pooled sample, then [`around`](Self::around).
    pub fn from_median(x: &Tensor, y: &Tensor, multipliers: &[f64]) -> Result<Self> {
        Self::around(median_heuristic(x, y)?, multipliers)
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }
}

/// Width σ with `2σ² = median` of the nonzero pairwise squared distances of
/// the pooled rows of `x` and `y`. Falls back to 1 when every distance is 0.
pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, d) = x.dims2("median_heuristic")?;
    let (m, d2) = y.dims2("median_heuristic")?;
    if d != d2 {
        return Err(Error::shape(
            "median_heuristic",
            format!("feature dimensions {d} vs {d2}"),
        ));
    }
    if n + m < 2 {
        return Err(Error::param("median heuristic needs at least two points"));
    }
    let rows: Vec<&[f64]> = (0..n)
        .map(|i| x.row(i))
        .chain((0..m).map(|j| y.row(j)))
        .collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let median = if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    };
    Ok((median / 2.0).sqrt())
}

/// `K[i, j] = Σ_σ exp(-‖x_i - y_j‖² / 2σ²)`, differentiable in both inputs.
pub fn gaussian_gram(tape: &mut Tape, x: Var, y: Var, cfg: &KernelConfig) -> Result<Var> {
    let d = tape.sq_dist(x, y)?;
    let mut total: Option<Var> = None;
    for &sigma in &cfg.bandwidths {
        let scaled = tape.scale(d, -1.0 / (2.0 * sigma * sigma))?;
        let k = tape.exp(scaled)?;
        total = Some(match total {
            None => k,
            Some(t) => tape.add(t, k)?,
        });
    }
    Ok(total.expect("at least one bandwidth"))
}

/// Biased squared MMD between the rows of `x` and `y`.
pub fn mmd2_biased(tape: &mut Tape, x: Var, y: Var, cfg: &KernelConfig) -> Result<Var> {
    if tape.value(x).rows() == 0 || tape.value(y).rows() == 0 {
        return Err(Error::param("MMD needs at least one sample per set"));
    }
    let kxx = gaussian_gram(tape, x, x, cfg)?;
    let kxy = gaussian_gram(tape, x, y, cfg)?;
    let kyy = gaussian_gram(tape, y, y, cfg)?;
    let mxx = tape.mean(kxx)?;
    let mxy = tape.mean(kxy)?;
    let myy = tape.mean(kyy)?;
    let cross = tape.scale(mxy, -2.0)?;
    let a = tape.add(mxx, cross)?;
    tape.add(a, myy)
}

/// The three pairwise weight matrices of the pseudo-label MMD.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTriple {
    /// `n_s × n_s`
    pub xx: Tensor,
    /// `n_s × n_t`
    pub xy: Tensor,
    /// `n_t × n_t`
    pub yy: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlmmdWeights {
    pub weights: WeightTriple,
    /// Classes present on both sides, ascending.
    pub common_classes: Vec<usize>,
}

impl PlmmdWeights {
    /// No class is shared: all weights are zero and the loss contributes 0.
    pub fn is_degenerate(&self) -> bool {
        self.common_classes.is_empty()
    }
}

/// Builds the class-conditional weights from source label rows and target
/// probability rows.
///
/// For every class with source mass and target mass above
/// [`COMMON_CLASS_EPS`], the class column is scaled to sum to one on each
/// side (`a_c`, `b_c`) and the outer products `a_c a_cᵀ`, `a_c b_cᵀ`,
/// `b_c b_cᵀ` are accumulated; the sums are divided by the number of such
/// classes. The result is plain data: no gradient flows through it.
pub fn plmmd_weights(source_onehot: &Tensor, target_probs: &Tensor) -> Result<PlmmdWeights> {
    let (ns, k) = source_onehot.dims2("plmmd_weights")?;
    let (nt, k2) = target_probs.dims2("plmmd_weights")?;
    if k != k2 {
        return Err(Error::shape(
            "plmmd_weights",
            format!("class counts {k} vs {k2}"),
        ));
    }
    if source_onehot.data().iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::domain(
            "plmmd_weights",
            "source label rows must be non-negative",
        ));
    }
    for i in 0..nt {
        let row = target_probs.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::domain(
                "plmmd_weights",
                format!("target row {i} is not a probability vector"),
            ));
        }
    }

    let mut xx = vec![0.0; ns * ns];
    let mut xy = vec![0.0; ns * nt];
    let mut yy = vec![0.0; nt * nt];
    let mut common = Vec::new();
    for c in 0..k {
        let src_mass: f64 = (0..ns).map(|i| source_onehot.get2(i, c)).sum();
        let tgt_mass: f64 = (0..nt).map(|j| target_probs.get2(j, c)).sum();
        if !(src_mass > 0.0 && tgt_mass > COMMON_CLASS_EPS) {
            continue;
        }
        common.push(c);
        let a: Vec<f64> = (0..ns)
            .map(|i| source_onehot.get2(i, c) / src_mass)
            .collect();
        let b: Vec<f64> = (0..nt)
            .map(|j| target_probs.get2(j, c) / tgt_mass)
            .collect();
        for i in 0..ns {
            for j in 0..ns {
                xx[i * ns + j] += a[i] * a[j];
            }
            for j in 0..nt {
                xy[i * nt + j] += a[i] * b[j];
            }
        }
        for i in 0..nt {
            for j in 0..nt {
                yy[i * nt + j] += b[i] * b[j];
            }
        }
    }
    if !common.is_empty() {
        let inv = 1.0 / common.len() as f64;
        for w in xx.iter_mut().chain(xy.iter_mut()).chain(yy.iter_mut()) {
            *w *= inv;
        }
    }
    Ok(PlmmdWeights {
        weights: WeightTriple {
            xx: Tensor::new(vec![ns, ns], xx)?,
            xy: Tensor::new(vec![ns, nt], xy)?,
            yy: Tensor::new(vec![nt, nt], yy)?,
        },
        common_classes: common,
    })
}

/// Weighted MMD: `Σ w_xx∘k(X,X) - 2 Σ w_xy∘k(X,Y) + Σ w_yy∘k(Y,Y)`.
pub fn plmmd(tape: &mut Tape, x: Var, y: Var, w: &WeightTriple, cfg: &KernelConfig) -> Result<Var> {
    let (ns, nt) = (tape.value(x).rows(), tape.value(y).rows());
    let want = [
        (&w.xx, [ns, ns], "w_xx"),
        (&w.xy, [ns, nt], "w_xy"),
        (&w.yy, [nt, nt], "w_yy"),
    ];
    for (t, shape, name) in want {
        if t.shape() != shape {
            return Err(Error::shape(
                "plmmd",
                format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
    }
    let term = |tape: &mut Tape, a: Var, b: Var, weights: &Tensor| -> Result<Var> {
        let k = gaussian_gram(tape, a, b, cfg)?;
        let wv = tape.constant(weights.clone())?;
        let p = tape.mul(k, wv)?;
        tape.sum(p)
    };
    let sxx = term(tape, x, x, &w.xx)?;
    let sxy = term(tape, x, y, &w.xy)?;
    let syy = term(tape, y, y, &w.yy)?;
    let cross = tape.scale(sxy, -2.0)?;
    let a = tape.add(sxx, cross)?;
    tape.add(a, syy)
}
