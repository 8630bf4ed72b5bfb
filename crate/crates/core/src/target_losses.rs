//! Regularizers on unlabeled target predictions: minimum class confusion
//! and information maximization.

use crate::autodiff::{Tape, Tensor, Var, LOG_EPS};
use crate::error::{Error, Result};

/// Default softmax temperature for the class-confusion loss.
pub const DEFAULT_MCC_TEMPERATURE: f64 = 2.5;

/// Denominator floor when row-normalizing the confusion matrix.
const ROW_NORM_EPS: f64 = 1e-12;

fn check_prob_rows(op: &'static str, p: &Tensor) -> Result<()> {
    let (n, _) = p.dims2(op)?;
    for i in 0..n {
        let row = p.row(i);
        let s: f64 = row.iter().sum();
        if row.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::domain(
                op,
                format!("row {i} is not a probability vector (sum {s})"),
            ));
        }
    }
    Ok(())
}

/// Per-row Shannon entropy `-Σ_j p_ij log max(ε, p_ij)`, as an `n × 1` column.
pub fn entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    check_prob_rows("entropy", tape.value(probs))?;
    let logp = tape.log_clamped(probs, LOG_EPS)?;
    let plogp = tape.mul(probs, logp)?;
    let s = tape.row_sum(plogp)?;
    tape.neg(s)
}

/// Diagonal of the sample-weighting matrix:
/// `W_ii = n (1 + e^{-H_i}) / Σ_i' (1 + e^{-H_i'})` with `H_i` the entropy of
/// `softmax(logits_i / T)`. Returned as an `n × 1` column summing to `n`.
pub fn uncertainty_weights(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    let probs = tape.softmax(logits, temperature)?;
    weights_from_probs(tape, probs)
}

fn weights_from_probs(tape: &mut Tape, probs: Var) -> Result<Var> {
    let n = tape.value(probs).rows();
    if n == 0 {
        return Err(Error::param("uncertainty weights need at least one sample"));
    }
    let h = entropy(tape, probs)?;
    let neg_h = tape.neg(h)?;
    let e = tape.exp(neg_h)?;
    let u = tape.add_scalar(e, 1.0)?;
    // Every entry of ones(n×n)·u is Σu.
    let ones = tape.constant(Tensor::full(&[n, n], 1.0))?;
    let total = tape.matmul(ones, u)?;
    let nu = tape.scale(u, n as f64)?;
    tape.div_col(nu, total)
}

/// Minimum class confusion on target logits.
///
/// `Ŷ = softmax(Z / T)`, `C = Ŷᵀ W Ŷ` with `W` from
/// [`uncertainty_weights`], rows of `C` rescaled to sum to one, and the loss
/// is the off-diagonal mass divided by the class count. Lies in
/// `[0, (K-1)/K]`.
pub fn mcc_loss(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    let (n, k) = tape.value(logits).dims2("mcc_loss")?;
    if k < 2 {
        return Err(Error::param(format!(
            "class confusion needs at least two classes, got {k}"
        )));
    }
    if n == 0 {
        return Err(Error::param("class confusion needs at least one sample"));
    }
    let probs = tape.softmax(logits, temperature)?;
    let w = weights_from_probs(tape, probs)?;
    let weighted = tape.mul_col(probs, w)?;
    let pt = tape.transpose(probs)?;
    let confusion = tape.matmul(pt, weighted)?;
    let row_mass = tape.row_sum(confusion)?;
    let denom = tape.clamp_min(row_mass, ROW_NORM_EPS)?;
    let normalized = tape.div_col(confusion, denom)?;
    let mut mask = Tensor::full(&[k, k], 1.0);
    for j in 0..k {
        mask.data_mut()[j * k + j] = 0.0;
    }
    let mask = tape.constant(mask)?;
    let off = tape.mul(normalized, mask)?;
    let total = tape.sum(off)?;
    tape.scale(total, 1.0 / k as f64)
}

/// Negative mutual information between inputs and predicted labels:
/// `mean_i H(p_i) - H(mean_i p_i)`. Minimized by confident, class-balanced
/// predictions.
pub fn im_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    check_prob_rows("im_loss", tape.value(probs))?;
    if tape.value(probs).rows() == 0 {
        return Err(Error::param(
            "information maximization needs at least one sample",
        ));
    }
    let h = entropy(tape, probs)?;
    let mean_h = tape.mean(h)?;
    let marginal = tape.col_mean(probs)?;
    let h_marginal = entropy(tape, marginal)?;
    let h_marginal = tape.sum(h_marginal)?;
    tape.sub(mean_h, h_marginal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::rng::Stream;

    fn eval<F: Fn(&mut Tape, Var) -> Result<Var>>(x: &Tensor, f: F) -> Tensor {
        let mut t = Tape::new();
        let v = t.constant(x.clone()).unwrap();
        let out = f(&mut t, v).unwrap();
        t.value(out).clone()
    }

    fn rows<R: AsRef<[f64]>>(r: &[R]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn rand_logits(s: &mut Stream, n: usize, k: usize, scale: f64) -> Tensor {
        Tensor::new(vec![n, k], (0..n * k).map(|_| scale * s.normal()).collect()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let e2 = 2f64.exp();
        let p = e2 / (1.0 + e2);
        let h = eval(&rows(&[[0.5, 0.5], [1.0, 0.0], [p, 1.0 - p]]), entropy);
        assert!((h.data()[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(h.data()[1], 0.0);
        // -(p ln p + q ln q) at p = e²/(1+e²), evaluated by hand.
        assert!((h.data()[2] - 0.365334).abs() < 5e-6, "{}", h.data()[2]);
        let mut t = Tape::new();
        let bad = t.constant(rows(&[&[0.5, 0.6]])).unwrap();
        assert!(matches!(entropy(&mut t, bad), Err(Error::Domain { .. })));
    }

    #[test]
    fn uncertainty_weight_examples() {
        let w = eval(
            &rows(&[&[1.0, -1.0], &[1.0, -1.0], &[1.0, -1.0]]),
            |t, v| uncertainty_weights(t, v, 2.5),
        );
        assert!(w.data().iter().all(|x| (x - 1.0).abs() < 1e-12));

        let w = eval(&rows(&[&[5.0, 0.0], &[0.5, 0.0]]), |t, v| {
            uncertainty_weights(t, v, 1.0)
        });
        assert!(w.data()[0] > w.data()[1]);

        let w = eval(&rows(&[&[9.0, 0.0, 0.0]; 4]), |t, v| {
            uncertainty_weights(t, v, 1.0)
        });
        assert!(w.data().iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn uncertainty_weights_sum_to_n() {
        let mut s = Stream::new(8);
        for _ in 0..100 {
            let n = 1 + s.below(16) as usize;
            let k = 2 + s.below(5) as usize;
            let z = rand_logits(&mut s, n, k, 3.0);
            let w = eval(&z, |t, v| uncertainty_weights(t, v, 1.7));
            let total: f64 = w.data().iter().sum();
            assert!((total - n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn mcc_examples() {
        // Softmax underflows to exact zeros: rows 1 and 2 of C vanish and the
        // floor keeps them at zero confusion.
        let saturated = rows(&[[800.0, 0.0, 0.0]; 5]);
        let l = eval(&saturated, |t, v| mcc_loss(t, v, 1.0)).item();
        assert_eq!(l, 0.0);

        // With logits [10, 0, 0] the minority rows are tiny but not zero, so
        // row normalization blows them up to confusion ≈ 1 each: (0+1+1)/3.
        let confident = rows(&[[10.0, 0.0, 0.0]; 5]);
        let l = eval(&confident, |t, v| mcc_loss(t, v, 1.0)).item();
        assert!((l - 2.0 / 3.0).abs() < 1e-3, "{l}");

        for n in [1, 3, 8] {
            let uniform = Tensor::zeros(&[n, 2]);
            let l = eval(&uniform, |t, v| mcc_loss(t, v, 1.0)).item();
            assert!((l - 0.5).abs() < 1e-12);
        }

        let mut t = Tape::new();
        let one = t.constant(Tensor::zeros(&[3, 1])).unwrap();
        assert!(matches!(
            mcc_loss(&mut t, one, 1.0),
            Err(Error::Parameter(_))
        ));
        let z = t.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(mcc_loss(&mut t, z, 0.0).is_err());
    }

    #[test]
    fn mcc_properties() {
        let mut s = Stream::new(9);
        for _ in 0..200 {
            let n = 1 + s.below(16) as usize;
            let k = 2 + s.below(5) as usize;
            let z = rand_logits(&mut s, n, k, 4.0);
            let temp = s.uniform_in(0.3, 4.0);
            let l = eval(&z, |t, v| mcc_loss(t, v, temp)).item();
            assert!(l >= 0.0 && l <= (k as f64 - 1.0) / k as f64 + 1e-9, "{l}");

            // Z at T equals Z/T at 1.
            let scaled = Tensor::new(
                z.shape().to_vec(),
                z.data().iter().map(|v| v / temp).collect(),
            )
            .unwrap();
            let l1 = eval(&scaled, |t, v| mcc_loss(t, v, 1.0)).item();
            assert!((l - l1).abs() < 1e-12);

            // Reverse the class columns.
            let mut perm = Vec::with_capacity(n * k);
            for i in 0..n {
                perm.extend(z.row(i).iter().rev());
            }
            let zp = Tensor::new(vec![n, k], perm).unwrap();
            let lp = eval(&zp, |t, v| mcc_loss(t, v, temp)).item();
            assert!((l - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn im_examples() {
        let same = rows(&[&[0.2, 0.3, 0.5]; 4]);
        assert!(eval(&same, im_loss).item().abs() < 1e-15);

        for k in 2..6 {
            let balanced = Tensor::one_hot(&(0..k).collect::<Vec<_>>(), k).unwrap();
            let l = eval(&balanced, im_loss).item();
            assert!((l + (k as f64).ln()).abs() < 1e-9);
        }

        let collapsed = Tensor::one_hot(&[1, 1, 1], 3).unwrap();
        assert!(eval(&collapsed, im_loss).item().abs() < 1e-15);
    }

    #[test]
    fn im_decreases_when_sharpening_balanced_rows() {
        let mut last = f64::INFINITY;
        for q in [0.5, 0.6, 0.75, 0.9, 0.99, 1.0] {
            let p = rows(&[&[q, 1.0 - q], &[1.0 - q, q]]);
            let l = eval(&p, im_loss).item();
            assert!(l < last || q == 0.5, "q={q}: {l} !< {last}");
            last = l;
        }
    }

    #[test]
    fn losses_pass_gradcheck() {
        // n = 1 makes the class-confusion loss constant ((K-1)/K), where the
        // relative-error metric only sees finite-difference noise.
        let mut s = Stream::new(10);
        for _ in 0..30 {
            let n = 2 + s.below(15) as usize;
            let k = 2 + s.below(5) as usize;
            let z = rand_logits(&mut s, n, k, 1.5);
            let err = gradcheck(|t, v| mcc_loss(t, v, 2.5), &z, 1e-5).unwrap();
            assert!(err < 1e-4, "mcc {err}");
            let err = gradcheck(
                |t, v| {
                    let p = t.softmax(v, 1.0)?;
                    im_loss(t, p)
                },
                &z,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "im {err}");
        }
    }
}
