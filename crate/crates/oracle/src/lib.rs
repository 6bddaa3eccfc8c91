//! Brute-force reference computations used to cross-check `faet-core`.
//!
//! Nothing here shares code with the library it checks: every quantity is
//! recomputed from its textbook definition with plain loops over `f64`.

use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Tallies `(prediction, label)` pairs with 1 as the positive class.
pub fn recount_confusion(pairs: &[(u8, u8)]) -> Counts {
    let mut c = Counts::default();
    for &(p, l) in pairs {
        if p == 1 && l == 1 {
            c.tp += 1;
        } else if p == 1 {
            c.fp += 1;
        } else if l == 1 {
            c.fn_ += 1;
        } else {
            c.tn += 1;
        }
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositiveClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f1: f64,
}

/// Precision, recall, accuracy and F1 of the positive class; 0 where a
/// denominator vanishes.
pub fn metrics_from_counts(c: Counts) -> PositiveClassMetrics {
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = div(c.tp, c.tp + c.fp);
    let recall = div(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PositiveClassMetrics {
        precision,
        recall,
        accuracy: div(c.tp + c.tn, c.tp + c.fp + c.fn_ + c.tn),
        f1,
    }
}

/// Softmax by explicit exponentiation and summation, without max-shifting.
pub fn softmax_direct(xs: &[f64]) -> Vec<f64> {
    let mut total = 0.0;
    for &x in xs {
        total += x.exp();
    }
    xs.iter().map(|&x| x.exp() / total).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `u[i][j] = w . [e_j ; t_i ; e_j * t_i]`.
pub fn interaction_direct(t: &[Vec<f64>], e: &[Vec<f64>], w: &[f64]) -> Vec<Vec<f64>> {
    let k = t.first().map_or(0, Vec::len);
    let mut u = vec![vec![0.0; e.len()]; t.len()];
    for i in 0..t.len() {
        for j in 0..e.len() {
            let mut s = 0.0;
            for c in 0..k {
                s += w[c] * e[j][c] + w[k + c] * t[i][c] + w[2 * k + c] * e[j][c] * t[i][c];
            }
            u[i][j] = s;
        }
    }
    u
}

/// Emoji weights (softmax of column maxima) and text weights (softmax of row maxima).
pub fn fine_weights_direct(u: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = u.first().map_or(0, Vec::len);
    let col_max: Vec<f64> = (0..m)
        .map(|j| u.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let row_max: Vec<f64> = u.iter().map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
    (softmax_direct(&col_max), softmax_direct(&row_max))
}

/// `-sum_{i<o} sigmoid(w . [t_i ; t_o]) * |beta_i - beta_o|^2`.
pub fn alignment_direct(beta: &[Vec<f64>], t: &[Vec<f64>], w: &[f64]) -> f64 {
    let mut loss = 0.0;
    for i in 0..beta.len() {
        for o in (i + 1)..beta.len() {
            let pair: Vec<f64> = t[i].iter().chain(t[o].iter()).cloned().collect();
            let mut spread = 0.0;
            for k in 0..beta[i].len() {
                spread += (beta[i][k] - beta[o][k]) * (beta[i][k] - beta[o][k]);
            }
            loss -= sigmoid(dot(&pair, w)) * spread;
        }
    }
    loss
}

/// Deviation of a computed quantity from its oracle value.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub name: String,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn compare(name: &str, got: &[f64], expected: &[f64], tolerance: f64) -> Self {
        let mut worst = if got.len() == expected.len() { 0.0 } else { f64::INFINITY };
        for (a, b) in got.iter().zip(expected) {
            let d = (a - b).abs();
            if d.is_nan() || d > worst {
                worst = if d.is_nan() { f64::INFINITY } else { d };
            }
        }
        OracleReport {
            name: name.to_string(),
            max_abs_deviation: worst,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_abs_deviation <= self.tolerance
    }
}

/// Bag-of-unigrams logistic regression, trained by full-batch gradient
/// descent until the loss stops improving.
pub struct LinearBaseline {
    index: BTreeMap<String, usize>,
    weights: Vec<f64>,
    bias: f64,
}

impl LinearBaseline {
    pub fn fit(train: &[(Vec<String>, u8)]) -> Self {
        let mut index = BTreeMap::new();
        for (tokens, _) in train {
            for t in tokens {
                let next = index.len();
                index.entry(t.clone()).or_insert(next);
            }
        }
        let features: Vec<Vec<usize>> = train.iter().map(|(t, _)| Self::active(&index, t)).collect();
        let mut weights = vec![0.0; index.len()];
        let mut bias = 0.0;
        let n = train.len().max(1) as f64;
        let (rate, l2) = (0.5, 1e-4);
        let mut previous = f64::INFINITY;
        for _ in 0..20_000 {
            let mut gw = vec![0.0; weights.len()];
            let mut gb = 0.0;
            let mut loss = 0.0;
            for (f, (_, y)) in features.iter().zip(train) {
                let z = bias + f.iter().map(|&k| weights[k]).sum::<f64>();
                let p = sigmoid(z);
                let y = f64::from(*y);
                loss -= y * p.max(1e-15).ln() + (1.0 - y) * (1.0 - p).max(1e-15).ln();
                let r = p - y;
                gb += r;
                for &k in f {
                    gw[k] += r;
                }
            }
            for (w, g) in weights.iter_mut().zip(&gw) {
                *w -= rate * (g / n + l2 * *w);
            }
            bias -= rate * gb / n;
            let loss = loss / n;
            if (previous - loss).abs() < 1e-10 {
                break;
            }
            previous = loss;
        }
        LinearBaseline { index, weights, bias }
    }

    fn active(index: &BTreeMap<String, usize>, tokens: &[String]) -> Vec<usize> {
        let mut seen: Vec<usize> = tokens.iter().filter_map(|t| index.get(t).copied()).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    pub fn predict(&self, tokens: &[String]) -> u8 {
        let z = self.bias + Self::active(&self.index, tokens).iter().map(|&k| self.weights[k]).sum::<f64>();
        u8::from(z > 0.0)
    }
}

/// Test accuracy of [`LinearBaseline`] trained on `train`.
pub fn linear_baseline(train: &[(Vec<String>, u8)], test: &[(Vec<String>, u8)]) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let model = LinearBaseline::fit(train);
    let correct = test.iter().filter(|(t, y)| model.predict(t) == *y).count();
    correct as f64 / test.len() as f64
}
