//! Scalar reimplementations of the loss zoo: nested loops over rows and
//! classes, no tape and no shared helpers with the library code.

use crate::kernel::COMMON_CLASS_EPS;

use super::{LossInputs, LossValues};

type Rows = Vec<Vec<f64>>;

fn to_rows(t: &crate::autodiff::Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * v.max(1e-12).ln()).sum::<f64>()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s
}

fn median_width(x: &Rows, y: &Rows) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in 0..i {
            let v = sq(pooled[i], pooled[j]);
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        (d[d.len() / 2 - 1] + d[d.len() / 2]) / 2.0
    };
    (m / 2.0).sqrt()
}

fn kernel(a: &[f64], b: &[f64], sigmas: &[f64]) -> f64 {
    let d = sq(a, b);
    sigmas.iter().map(|s| (-d / (2.0 * s * s)).exp()).sum()
}

fn mmd(x: &Rows, y: &Rows, sigmas: &[f64]) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
    for a in x {
        for b in x {
            xx += kernel(a, b, sigmas);
        }
        for b in y {
            xy += kernel(a, b, sigmas);
        }
    }
    for a in y {
        for b in y {
            yy += kernel(a, b, sigmas);
        }
    }
    xx / (n * n) - 2.0 * xy / (n * m) + yy / (m * m)
}

fn plmmd(x: &Rows, labels: &[usize], y: &Rows, probs: &Rows, sigmas: &[f64]) -> f64 {
    let k = probs[0].len();
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..k {
        let src: f64 = labels.iter().filter(|&&l| l == c).count() as f64;
        let tgt: f64 = probs.iter().map(|p| p[c]).sum();
        if !(src > 0.0 && tgt > COMMON_CLASS_EPS) {
            continue;
        }
        classes += 1;
        let a = |i: usize| if labels[i] == c { 1.0 / src } else { 0.0 };
        let b = |j: usize| probs[j][c] / tgt;
        for i in 0..x.len() {
            for j in 0..x.len() {
                total += a(i) * a(j) * kernel(&x[i], &x[j], sigmas);
            }
            for j in 0..y.len() {
                total -= 2.0 * a(i) * b(j) * kernel(&x[i], &y[j], sigmas);
            }
        }
        for i in 0..y.len() {
            for j in 0..y.len() {
                total += b(i) * b(j) * kernel(&y[i], &y[j], sigmas);
            }
        }
    }
    if classes == 0 {
        0.0
    } else {
        total / classes as f64
    }
}

fn mcc(logits: &Rows, temperature: f64) -> f64 {
    let p: Rows = logits.iter().map(|z| softmax(z, temperature)).collect();
    let n = p.len();
    let k = p[0].len();
    let u: Vec<f64> = p.iter().map(|r| 1.0 + (-entropy(r)).exp()).collect();
    let su: f64 = u.iter().sum();
    let w: Vec<f64> = u.iter().map(|v| n as f64 * v / su).collect();
    let mut loss = 0.0;
    for a in 0..k {
        let mut row = vec![0.0; k];
        for b in 0..k {
            for i in 0..n {
                row[b] += p[i][a] * w[i] * p[i][b];
            }
        }
        let mass: f64 = row.iter().sum();
        for b in 0..k {
            if a != b {
                loss += row[b] / mass.max(1e-12);
            }
        }
    }
    loss / k as f64
}

fn im(logits: &Rows) -> f64 {
    let p: Rows = logits.iter().map(|z| softmax(z, 1.0)).collect();
    let n = p.len() as f64;
    let k = p[0].len();
    let mean_h = p.iter().map(|r| entropy(r)).sum::<f64>() / n;
    let marginal: Vec<f64> = (0..k)
        .map(|c| p.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect();
    mean_h - entropy(&marginal)
}

fn dis(ds: &[f64], dt: &[f64]) -> f64 {
    let ls = ds.iter().map(|v| v.max(1e-7).ln()).sum::<f64>() / ds.len() as f64;
    let lt = dt.iter().map(|v| (1.0 - v).max(1e-7).ln()).sum::<f64>() / dt.len() as f64;
    -(ls + lt)
}

/// Every loss of `inputs`, computed without the library.
pub fn oracle_losses(inputs: &LossInputs) -> LossValues {
    let x = to_rows(&inputs.source_features);
    let y = to_rows(&inputs.target_features);
    let z = to_rows(&inputs.target_logits);
    let base = inputs
        .kernel
        .fixed_bandwidth
        .unwrap_or_else(|| median_width(&x, &y));
    let sigmas: Vec<f64> = inputs.kernel.multipliers.iter().map(|m| base * m).collect();
    let probs: Rows = z.iter().map(|r| softmax(r, 1.0)).collect();
    LossValues {
        mmd: mmd(&x, &y, &sigmas),
        plmmd: plmmd(&x, &inputs.source_labels, &y, &probs, &sigmas),
        mcc: mcc(&z, inputs.temperature),
        im: im(&z),
        dis: inputs
            .discriminator
            .as_ref()
            .map(|(s, t)| dis(s.data(), t.data())),
    }
}
