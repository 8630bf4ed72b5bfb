//! Verification helpers shared by the command line and the test suites: the
//! loss zoo on externally supplied arrays, its naive-loop oracle, and the
//! gradient-check suite.

mod gradsuite;
mod oracle;

use serde::{Deserialize, Serialize};

pub use gradsuite::{
    check_loss, run_gradsuite, SuiteLoss, SuiteRow, GRADSUITE_STEP, GRADSUITE_TOLERANCE,
};
pub use oracle::oracle_losses;

use crate::adversarial::domain_disc_loss;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::kernel::{mmd2_biased, plmmd, plmmd_weights};
use crate::rng::Stream;
use crate::target_losses::{im_loss, mcc_loss, DEFAULT_MCC_TEMPERATURE};
use crate::trainer::KernelSettings;

/// Arrays for one evaluation of the loss zoo.
#[derive(Clone, Debug)]
pub struct LossInputs {
    pub source_features: Tensor,
    pub source_labels: Vec<usize>,
    pub target_features: Tensor,
    pub target_logits: Tensor,
    /// Discriminator outputs on source and target rows.
    pub discriminator: Option<(Tensor, Tensor)>,
    pub temperature: f64,
    pub kernel: KernelSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub mmd: f64,
    pub plmmd: f64,
    pub mcc: f64,
    pub im: f64,
    pub dis: Option<f64>,
}

impl LossValues {
    /// Largest absolute difference over the terms present in both.
    pub fn max_deviation(&self, other: &Self) -> f64 {
        let mut d = [
            self.mmd - other.mmd,
            self.plmmd - other.plmmd,
            self.mcc - other.mcc,
            self.im - other.im,
        ]
        .iter()
        .fold(0.0f64, |a, b| a.max(b.abs()));
        if let (Some(a), Some(b)) = (self.dis, other.dis) {
            d = d.max((a - b).abs());
        }
        d
    }
}

impl LossInputs {
    pub fn validate(&self) -> Result<()> {
        let (ns, d) = self.source_features.dims2("losses")?;
        let (nt, d2) = self.target_features.dims2("losses")?;
        let (nz, k) = self.target_logits.dims2("losses")?;
        if d != d2 {
            return Err(Error::shape(
                "losses",
                format!("source has {d} feature columns, target {d2}"),
            ));
        }
        if nz != nt {
            return Err(Error::shape(
                "losses",
                format!("{nz} logit rows for {nt} target rows"),
            ));
        }
        if self.source_labels.len() != ns {
            return Err(Error::shape(
                "losses",
                format!("{} labels for {ns} source rows", self.source_labels.len()),
            ));
        }
        if ns == 0 || nt == 0 || k < 2 {
            return Err(Error::param(
                "losses need non-empty domains and at least two classes",
            ));
        }
        if let Some(y) = self.source_labels.iter().find(|y| **y >= k) {
            return Err(Error::domain(
                "losses",
                format!("source label {y} outside [0, {k})"),
            ));
        }
        Ok(())
    }
}

/// The loss zoo through the library operations.
pub fn library_losses(inputs: &LossInputs) -> Result<LossValues> {
    inputs.validate()?;
    let mut t = Tape::new();
    let fs = t.constant(inputs.source_features.clone())?;
    let ft = t.constant(inputs.target_features.clone())?;
    let zt = t.constant(inputs.target_logits.clone())?;
    let kernel = inputs
        .kernel
        .resolve(&inputs.source_features, &inputs.target_features)?;
    let k = inputs.target_logits.cols();

    let mmd = mmd2_biased(&mut t, fs, ft, &kernel)?;
    let pt = t.softmax(zt, 1.0)?;
    let w = plmmd_weights(&Tensor::one_hot(&inputs.source_labels, k)?, t.value(pt))?;
    let pl = plmmd(&mut t, fs, ft, &w.weights, &kernel)?;
    let mcc = mcc_loss(&mut t, zt, inputs.temperature)?;
    let im = im_loss(&mut t, pt)?;
    let dis = match &inputs.discriminator {
        Some((s, tg)) => {
            let (sv, tv) = (t.constant(s.clone())?, t.constant(tg.clone())?);
            let l = domain_disc_loss(&mut t, sv, tv)?;
            Some(t.value(l).item())
        }
        None => None,
    };
    Ok(LossValues {
        mmd: t.value(mmd).item(),
        plmmd: t.value(pl).item(),
        mcc: t.value(mcc).item(),
        im: t.value(im).item(),
        dis,
    })
}

/// A random fixture with `n ≤ 32`, `d ≤ 16`, `K ≤ 6`, drawn from `seed`.
pub fn random_fixture(seed: u64) -> LossInputs {
    let mut s = Stream::new(seed);
    let ns = 1 + s.below(32) as usize;
    let nt = 1 + s.below(32) as usize;
    let d = 1 + s.below(16) as usize;
    let k = 2 + s.below(5) as usize;
    let mat = |s: &mut Stream, n: usize, m: usize, scale: f64| {
        Tensor::new(vec![n, m], (0..n * m).map(|_| scale * s.normal()).collect()).expect("sized")
    };
    let source_features = mat(&mut s, ns, d, 1.0);
    let target_features = mat(&mut s, nt, d, 1.5);
    let target_logits = mat(&mut s, nt, k, 2.0);
    let source_labels = (0..ns).map(|_| s.below(k as u64) as usize).collect();
    let ds = Tensor::new(vec![ns, 1], (0..ns).map(|_| s.uniform()).collect()).expect("sized");
    let dt = Tensor::new(vec![nt, 1], (0..nt).map(|_| s.uniform()).collect()).expect("sized");
    LossInputs {
        source_features,
        source_labels,
        target_features,
        target_logits,
        discriminator: Some((ds, dt)),
        temperature: DEFAULT_MCC_TEMPERATURE,
        kernel: KernelSettings::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_matches_oracle_on_random_fixtures() {
        for seed in 0..50 {
            let f = random_fixture(seed);
            let lib = library_losses(&f).unwrap();
            let ora = oracle_losses(&f);
            assert!(
                lib.max_deviation(&ora) < 1e-9,
                "seed {seed}: {lib:?} vs {ora:?}"
            );
        }
    }

    #[test]
    fn closed_form_fixture_values() {
        let mut f = random_fixture(1);
        f.target_features = f.source_features.clone();
        f.target_logits = Tensor::zeros(&[f.source_features.rows(), 2]);
        f.source_labels = vec![0; f.source_features.rows()];
        f.discriminator = None;
        let v = library_losses(&f).unwrap();
        assert!(v.mmd.abs() < 1e-12);
        assert!((v.mcc - 0.5).abs() < 1e-12);
        assert!(v.im.abs() < 1e-12);
        assert_eq!(v.dis, None);
    }

    #[test]
    fn inputs_are_validated() {
        let mut f = random_fixture(2);
        f.source_labels.pop();
        assert!(matches!(library_losses(&f), Err(Error::Shape { .. })));
        let mut f = random_fixture(2);
        f.source_labels[0] = 99;
        assert!(matches!(library_losses(&f), Err(Error::Domain { .. })));
    }
}
