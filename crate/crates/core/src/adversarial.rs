//! Conditional adversarial alignment.
//!
//! The discriminator sees `T(f, g)`, a multilinear (or randomized
//! multilinear) combination of features and detached class predictions.
//! Features pass through a gradient-reversal node first, so one backward pass
//! descends the discriminator and ascends the feature extractor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::BoundModel;
use crate::rng::Stream;

/// Largest `d_f · K` handled by the exact multilinear map.
pub const DEFAULT_MULTILINEAR_THRESHOLD: usize = 4096;
/// Output width of the randomized map above the threshold.
pub const DEFAULT_RANDOM_DIM: usize = 1024;
/// Clamp applied to discriminator outputs inside the logs.
pub const DISC_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    ExactMultilinear,
    RandomizedMultilinear,
    Concatenation,
}

/// How `(f, g)` is fed to the discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningMap {
    mode: ConditioningMode,
    feature_dim: usize,
    class_count: usize,
    output_dim: usize,
    /// `d_f × d_r`, randomized mode only.
    r_f: Option<Tensor>,
    /// `K × d_r`, randomized mode only.
    r_g: Option<Tensor>,
}

impl ConditioningMap {
    pub fn exact(feature_dim: usize, class_count: usize) -> Self {
        Self {
            mode: ConditioningMode::ExactMultilinear,
            feature_dim,
            class_count,
            output_dim: feature_dim * class_count,
            r_f: None,
            r_g: None,
        }
    }

    pub fn concatenation(feature_dim: usize, class_count: usize) -> Self {
        Self {
            mode: ConditioningMode::Concatenation,
            feature_dim,
            class_count,
            output_dim: feature_dim + class_count,
            r_f: None,
            r_g: None,
        }
    }

    /// Random projections with i.i.d. standard-normal entries, `R_f` drawn
    /// before `R_g` from one stream seeded with `seed`.
    pub fn randomized(
        feature_dim: usize,
        class_count: usize,
        random_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if random_dim == 0 {
            return Err(Error::param(
                "randomized conditioning needs a positive output width",
            ));
        }
        let mut s = Stream::new(seed);
        let r_f = Tensor::new(
            vec![feature_dim, random_dim],
            (0..feature_dim * random_dim).map(|_| s.normal()).collect(),
        )?;
        let r_g = Tensor::new(
            vec![class_count, random_dim],
            (0..class_count * random_dim).map(|_| s.normal()).collect(),
        )?;
        Ok(Self {
            mode: ConditioningMode::RandomizedMultilinear,
            feature_dim,
            class_count,
            output_dim: random_dim,
            r_f: Some(r_f),
            r_g: Some(r_g),
        })
    }

    /// Exact map when `d_f · K <= threshold`, randomized otherwise.
    pub fn select(
        feature_dim: usize,
        class_count: usize,
        threshold: usize,
        random_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim * class_count <= threshold {
            Ok(Self::exact(feature_dim, class_count))
        } else {
            Self::randomized(feature_dim, class_count, random_dim, seed)
        }
    }

    pub fn mode(&self) -> ConditioningMode {
        self.mode
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn apply(&self, tape: &mut Tape, f: Var, g: Var) -> Result<Var> {
        let (_, df) = tape.value(f).dims2("conditioning")?;
        let (_, k) = tape.value(g).dims2("conditioning")?;
        if df != self.feature_dim || k != self.class_count {
            return Err(Error::shape(
                "conditioning",
                format!(
                    "inputs {df}/{k} wide, map built for {}/{}",
                    self.feature_dim, self.class_count
                ),
            ));
        }
        match self.mode {
            ConditioningMode::ExactMultilinear => multilinear_map(tape, f, g),
            ConditioningMode::RandomizedMultilinear => randomized_multilinear(tape, f, g, self),
            ConditioningMode::Concatenation => tape.concat_cols(&[f, g]),
        }
    }
}

/// Row `i` is `flatten(f_i g_iᵀ)`.
pub fn multilinear_map(tape: &mut Tape, f: Var, g: Var) -> Result<Var> {
    tape.outer_rows(f, g)
}

/// Row `i` is `(R_fᵀ f_i) ⊙ (R_gᵀ g_i) / √d_r`.
pub fn randomized_multilinear(
    tape: &mut Tape,
    f: Var,
    g: Var,
    map: &ConditioningMap,
) -> Result<Var> {
    let (Some(r_f), Some(r_g)) = (&map.r_f, &map.r_g) else {
        return Err(Error::param(format!(
            "conditioning map is {:?}, not randomized",
            map.mode
        )));
    };
    let rf = tape.constant(r_f.clone())?;
    let rg = tape.constant(r_g.clone())?;
    let pf = tape.matmul(f, rf)?;
    let pg = tape.matmul(g, rg)?;
    let prod = tape.mul(pf, pg)?;
    tape.scale(prod, 1.0 / (map.output_dim as f64).sqrt())
}

fn check_unit_interval(op: &'static str, t: &Tensor) -> Result<()> {
    if let Some(bad) = t.data().iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::domain(
            op,
            format!("discriminator output {bad} outside [0, 1]"),
        ));
    }
    Ok(())
}

/// Binary cross-entropy of the domain discriminator with source labeled 1
/// and target labeled 0: `-mean log d_s - mean log(1 - d_t)`.
pub fn domain_disc_loss(tape: &mut Tape, d_source: Var, d_target: Var) -> Result<Var> {
    check_unit_interval("domain_disc_loss", tape.value(d_source))?;
    check_unit_interval("domain_disc_loss", tape.value(d_target))?;
    let ls = tape.log_clamped(d_source, DISC_EPS)?;
    let ls = tape.mean(ls)?;
    let neg_t = tape.neg(d_target)?;
    let one_minus = tape.add_scalar(neg_t, 1.0)?;
    let lt = tape.log_clamped(one_minus, DISC_EPS)?;
    let lt = tape.mean(lt)?;
    let total = tape.add(ls, lt)?;
    tape.neg(total)
}

/// Discriminator loss on conditioned features, with the feature pathway
/// reversed by `grl_scale`.
///
/// `g_s` and `g_t` are detached here, so the classifier head receives no
/// adversarial gradient through the conditioning.
#[allow(clippy::too_many_arguments)]
pub fn cdan_adversarial_loss(
    tape: &mut Tape,
    f_s: Var,
    g_s: Var,
    f_t: Var,
    g_t: Var,
    discriminator: &BoundModel<'_>,
    map: &ConditioningMap,
    grl_scale: f64,
) -> Result<Var> {
    let g_s = tape.detach(g_s)?;
    let g_t = tape.detach(g_t)?;
    let rf_s = tape.grad_reverse(f_s, grl_scale)?;
    let rf_t = tape.grad_reverse(f_t, grl_scale)?;
    let h_s = map.apply(tape, rf_s, g_s)?;
    let h_t = map.apply(tape, rf_t, g_t)?;
    let d_s = discriminator.forward(tape, h_s)?;
    let d_t = discriminator.forward(tape, h_t)?;
    domain_disc_loss(tape, d_s, d_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck_many;
    use crate::models::{FinalActivation, MlpSpec, Model};

    fn rows<R: AsRef<[f64]>>(r: &[R]) -> Tensor {
        Tensor::from_rows(r).unwrap()
    }

    fn rand_mat(s: &mut Stream, n: usize, d: usize) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| s.normal()).collect()).unwrap()
    }

    fn eval2(a: &Tensor, b: &Tensor, f: impl Fn(&mut Tape, Var, Var) -> Result<Var>) -> Tensor {
        let mut t = Tape::new();
        let (av, bv) = (
            t.constant(a.clone()).unwrap(),
            t.constant(b.clone()).unwrap(),
        );
        let out = f(&mut t, av, bv).unwrap();
        t.value(out).clone()
    }

    #[test]
    fn multilinear_examples() {
        let out = eval2(&rows(&[[1.0, 2.0]]), &rows(&[[3.0, 4.0]]), multilinear_map);
        assert_eq!(out.data(), &[3.0, 4.0, 6.0, 8.0]);

        let f = rows(&[[1.5, -2.0, 0.25]]);
        let g = Tensor::one_hot(&[1], 3).unwrap();
        let out = eval2(&f, &g, multilinear_map);
        // Entry p·K + q: class block 1 holds f, the rest are zero.
        let mut expect = vec![0.0; 9];
        for p in 0..3 {
            expect[p * 3 + 1] = f.data()[p];
        }
        assert_eq!(out.data(), expect.as_slice());

        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(matches!(
            multilinear_map(&mut t, a, b),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn multilinear_norm_identity() {
        let mut s = Stream::new(12);
        for _ in 0..100 {
            let df = 1 + s.below(6) as usize;
            let k = 1 + s.below(5) as usize;
            let f = rand_mat(&mut s, 1, df);
            let g = rand_mat(&mut s, 1, k);
            let out = eval2(&f, &g, multilinear_map);
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm(out.data()) - norm(f.data()) * norm(g.data())).abs() < 1e-12);
        }
    }

    #[test]
    fn multilinear_gradcheck() {
        let mut s = Stream::new(13);
        let f = rand_mat(&mut s, 4, 3);
        let g = rand_mat(&mut s, 4, 2);
        let w = rand_mat(&mut s, 4, 6);
        let err = gradcheck_many(
            |t, v| {
                let m = multilinear_map(t, v[0], v[1])?;
                let wv = t.constant(w.clone())?;
                let p = t.mul(m, wv)?;
                t.sum(p)
            },
            &[f, g],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    fn inner(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn randomized_map_preserves_inner_products_in_expectation() {
        let f = rows(&[[0.8, -0.3, 0.5], [0.6, 0.4, 0.9]]);
        let g = rows(&[[0.7, 0.2, 0.1], [0.5, 0.3, 0.2]]);
        let target = inner(f.row(0), f.row(1)) * inner(g.row(0), g.row(1));
        let draws = 10_000;
        let mut acc = 0.0;
        for seed in 0..draws {
            let map = ConditioningMap::randomized(3, 3, 8, seed).unwrap();
            let out = eval2(&f, &g, |t, a, b| randomized_multilinear(t, a, b, &map));
            acc += inner(out.row(0), out.row(1));
        }
        let mean = acc / draws as f64;
        assert!(
            ((mean - target) / target).abs() < 0.05,
            "{mean} vs {target}"
        );

        // Disjoint one-hot predictions: expectation is exactly zero.
        let g = Tensor::one_hot(&[0, 2], 3).unwrap();
        let mut acc = 0.0;
        for seed in 0..draws {
            let map = ConditioningMap::randomized(3, 3, 8, seed).unwrap();
            let out = eval2(&f, &g, |t, a, b| randomized_multilinear(t, a, b, &map));
            acc += inner(out.row(0), out.row(1));
        }
        let scale = inner(f.row(0), f.row(0)).sqrt() * inner(f.row(1), f.row(1)).sqrt();
        assert!((acc / draws as f64).abs() < 0.05 * scale);
    }

    #[test]
    fn randomized_map_is_deterministic_and_checks_mode() {
        let mut s = Stream::new(14);
        let f = rand_mat(&mut s, 5, 4);
        let g = rand_mat(&mut s, 5, 3);
        let m1 = ConditioningMap::randomized(4, 3, 16, 99).unwrap();
        let m2 = ConditioningMap::randomized(4, 3, 16, 99).unwrap();
        let a = eval2(&f, &g, |t, x, y| randomized_multilinear(t, x, y, &m1));
        let b = eval2(&f, &g, |t, x, y| randomized_multilinear(t, x, y, &m2));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[5, 16]);

        let exact = ConditioningMap::exact(4, 3);
        let mut t = Tape::new();
        let (fv, gv) = (t.constant(f).unwrap(), t.constant(g).unwrap());
        assert!(matches!(
            randomized_multilinear(&mut t, fv, gv, &exact),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn selection_follows_threshold() {
        let m = ConditioningMap::select(64, 64, 4096, 1024, 0).unwrap();
        assert_eq!(
            (m.mode(), m.output_dim()),
            (ConditioningMode::ExactMultilinear, 4096)
        );
        let m = ConditioningMap::select(65, 64, 4096, 1024, 0).unwrap();
        assert_eq!(
            (m.mode(), m.output_dim()),
            (ConditioningMode::RandomizedMultilinear, 1024)
        );
        assert_eq!(ConditioningMap::concatenation(5, 2).output_dim(), 7);
    }

    fn disc_value(ds: &[f64], dt: &[f64]) -> f64 {
        let out = eval2(
            &Tensor::vector(ds.to_vec()),
            &Tensor::vector(dt.to_vec()),
            domain_disc_loss,
        );
        out.item()
    }

    #[test]
    fn disc_loss_examples() {
        assert!((disc_value(&[0.5; 4], &[0.5; 3]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(disc_value(&[1.0, 1.0], &[0.0]) < 1e-12);
        let bound = -2.0 * DISC_EPS.ln();
        assert!(disc_value(&[0.0], &[1.0]) <= bound + 1e-9);

        let mut s = Stream::new(15);
        for _ in 0..100 {
            let ds: Vec<f64> = (0..1 + s.below(5)).map(|_| s.uniform()).collect();
            let dt: Vec<f64> = (0..1 + s.below(5)).map(|_| s.uniform()).collect();
            let swapped_s: Vec<f64> = dt.iter().map(|v| 1.0 - v).collect();
            let swapped_t: Vec<f64> = ds.iter().map(|v| 1.0 - v).collect();
            assert!((disc_value(&ds, &dt) - disc_value(&swapped_s, &swapped_t)).abs() < 1e-12);
        }

        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.2])).unwrap();
        let b = t.constant(Tensor::vector(vec![0.5])).unwrap();
        assert!(matches!(
            domain_disc_loss(&mut t, a, b),
            Err(Error::Domain { .. })
        ));
    }

    struct Setup {
        feat: Model,
        disc: Model,
        map: ConditioningMap,
        xs: Tensor,
        xt: Tensor,
        gs: Tensor,
        gt: Tensor,
    }

    fn setup(seed: u64) -> Setup {
        let mut s = Stream::new(seed);
        let feat = Model::init(
            MlpSpec::new(vec![2, 8, 4], FinalActivation::None).unwrap(),
            seed + 1,
        )
        .unwrap();
        let map = ConditioningMap::exact(4, 2);
        let disc = Model::init(
            MlpSpec::new(vec![8, 6, 1], FinalActivation::Sigmoid).unwrap(),
            seed + 2,
        )
        .unwrap();
        let probs = |s: &mut Stream, n: usize| {
            let data: Vec<f64> = (0..n)
                .flat_map(|_| {
                    let p = s.uniform();
                    [p, 1.0 - p]
                })
                .collect();
            Tensor::new(vec![n, 2], data).unwrap()
        };
        Setup {
            xs: rand_mat(&mut s, 6, 2),
            xt: rand_mat(&mut s, 5, 2),
            gs: probs(&mut s, 6),
            gt: probs(&mut s, 5),
            feat,
            disc,
            map,
        }
    }

    /// Gradients of the feature and discriminator parameters.
    fn grads(st: &Setup, grl: Option<f64>) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut t = Tape::new();
        let fb = st.feat.bind(&mut t).unwrap();
        let db = st.disc.bind(&mut t).unwrap();
        let xs = t.constant(st.xs.clone()).unwrap();
        let xt = t.constant(st.xt.clone()).unwrap();
        let fs = fb.forward(&mut t, xs).unwrap();
        let ft = fb.forward(&mut t, xt).unwrap();
        let gs = t.constant(st.gs.clone()).unwrap();
        let gt = t.constant(st.gt.clone()).unwrap();
        let loss = match grl {
            Some(scale) => {
                cdan_adversarial_loss(&mut t, fs, gs, ft, gt, &db, &st.map, scale).unwrap()
            }
            None => {
                let hs = st.map.apply(&mut t, fs, gs).unwrap();
                let ht = st.map.apply(&mut t, ft, gt).unwrap();
                let ds = db.forward(&mut t, hs).unwrap();
                let dt = db.forward(&mut t, ht).unwrap();
                domain_disc_loss(&mut t, ds, dt).unwrap()
            }
        };
        let g = t.backward(loss).unwrap();
        let collect = |vars: &[Var], m: &Model| -> Vec<Tensor> {
            vars.iter()
                .zip(&m.params)
                .map(|(v, p)| g.get_or_zeros(*v, p.shape()))
                .collect()
        };
        (collect(fb.vars(), &st.feat), collect(db.vars(), &st.disc))
    }

    #[test]
    fn reversal_gradient_contract() {
        for seed in 0..5 {
            let st = setup(seed);
            let (f_plain, d_plain) = grads(&st, None);
            for scale in [0.0, 0.3, 1.0] {
                let (f_rev, d_rev) = grads(&st, Some(scale));
                for (a, b) in d_rev.iter().zip(&d_plain) {
                    assert_eq!(a, b);
                }
                for (a, b) in f_rev.iter().zip(&f_plain) {
                    for (x, y) in a.data().iter().zip(b.data()) {
                        assert!((x + scale * y).abs() <= 1e-15 * (1.0 + y.abs()));
                    }
                }
                if scale == 0.0 {
                    assert!(f_rev.iter().flat_map(|t| t.data()).all(|v| v.abs() < 1e-15));
                }
            }
        }
    }

    #[test]
    fn untrained_discriminator_gives_near_log4() {
        let st = setup(0);
        let mut t = Tape::new();
        let fb = st.feat.bind(&mut t).unwrap();
        let db = st.disc.bind(&mut t).unwrap();
        let xs = t.constant(st.xs.clone()).unwrap();
        let xt = t.constant(st.xt.clone()).unwrap();
        let fs = fb.forward(&mut t, xs).unwrap();
        let ft = fb.forward(&mut t, xt).unwrap();
        let gs = t.constant(st.gs.clone()).unwrap();
        let gt = t.constant(st.gt.clone()).unwrap();
        let loss = cdan_adversarial_loss(&mut t, fs, gs, ft, gt, &db, &st.map, 1.0).unwrap();
        let v = t.value(loss).item();
        assert!((v - 4f64.ln()).abs() < 0.15, "{v}");
    }

    #[test]
    fn randomized_conditioning_shapes() {
        let mut s = Stream::new(16);
        let f = rand_mat(&mut s, 3, 10);
        let g = rand_mat(&mut s, 3, 4);
        let exact = ConditioningMap::exact(10, 4);
        let rand = ConditioningMap::randomized(10, 4, 40, 1).unwrap();
        assert_eq!(
            eval2(&f, &g, |t, a, b| exact.apply(t, a, b)).shape(),
            &[3, 40]
        );
        assert_eq!(
            eval2(&f, &g, |t, a, b| rand.apply(t, a, b)).shape(),
            &[3, 40]
        );
        let cat = ConditioningMap::concatenation(10, 4);
        assert_eq!(
            eval2(&f, &g, |t, a, b| cat.apply(t, a, b)).shape(),
            &[3, 14]
        );
    }
}
