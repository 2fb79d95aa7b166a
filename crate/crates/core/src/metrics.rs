//! SRCC, KRCC, PLCC and RMSE, plus model evaluation over a split.

use std::io::Write;

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasetio::VideoSample;
use crate::error::{Error, Result};
use crate::model::QualityModel;

pub const REPORT_SCHEMA: &str = "vqa-report/1";

fn check_pair(pred: &[f64], mos: &[f64]) -> Result<()> {
    if pred.len() != mos.len() {
        return Err(Error::Data(format!(
            "prediction and MOS lengths differ: {} vs {}",
            pred.len(),
            mos.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 samples, got {}",
            pred.len()
        )));
    }
    if let Some(i) = pred.iter().chain(mos).position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value at position {i}")));
    }
    Ok(())
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Mid-ranks (1-based); tied values share the average of their ranks.
pub fn rank(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        // Positions i..j hold ranks i+1..=j.
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

pub fn plcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    if is_constant(pred) || is_constant(mos) {
        return Err(Error::UndefinedCorrelation("PLCC of a constant vector".into()));
    }
    Ok(pearson(pred, mos))
}

pub fn srcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    if is_constant(pred) || is_constant(mos) {
        return Err(Error::UndefinedCorrelation("SRCC of a constant vector".into()));
    }
    Ok(pearson(&rank(pred), &rank(mos)))
}

pub fn rmse(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    let sq = pred.iter().zip(mos).map(|(p, m)| (p - m) * (p - m)).sum::<f64>();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Pair counts behind tau-b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KendallCounts {
    /// n(n-1)/2
    pub pairs: i64,
    /// Pairs tied in the first argument.
    pub ties_x: i64,
    /// Pairs tied in the second argument.
    pub ties_y: i64,
    /// Concordant minus discordant pairs.
    pub score: i64,
}

impl KendallCounts {
    pub fn tau_b(&self) -> Result<f64> {
        let dx = self.pairs - self.ties_x;
        let dy = self.pairs - self.ties_y;
        if dx == 0 || dy == 0 {
            return Err(Error::UndefinedCorrelation("KRCC of a constant vector".into()));
        }
        Ok(self.score as f64 / ((dx as f64) * (dy as f64)).sqrt())
    }
}

fn tie_pairs(sorted: &[f64]) -> i64 {
    let mut total = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as i64;
        total += t * (t - 1) / 2;
        i = j;
    }
    total
}

/// Knight's O(n log n) pair counting.
pub fn kendall_counts(x: &[f64], y: &[f64]) -> KendallCounts {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();

    let ties_x = tie_pairs(&xs);
    // Pairs tied in both x and y.
    let mut ties_xy = 0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && xs[j] == xs[i] && ys[j] == ys[i] {
            j += 1;
        }
        let t = (j - i) as i64;
        ties_xy += t * (t - 1) / 2;
        i = j;
    }
    let swaps = merge_count(&mut ys);
    let ties_y = tie_pairs(&ys);
    let pairs = (n as i64) * (n as i64 - 1) / 2;
    KendallCounts {
        pairs,
        ties_x,
        ties_y,
        score: pairs - ties_x - ties_y + ties_xy - 2 * swaps,
    }
}

/// Stable merge sort returning the number of inversions.
fn merge_count(v: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as i64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

pub fn krcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    kendall_counts(pred, mos).tau_b()
}

/// Four-parameter logistic `b2 + (b1 - b2) / (1 + exp(-(x - b3) / |b4|))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
}

impl Logistic {
    pub fn eval(&self, x: f64) -> f64 {
        self.b2 + (self.b1 - self.b2) / (1.0 + (-(x - self.b3) / self.b4.abs()).exp())
    }

    fn from_vec(v: &Vector4<f64>) -> Self {
        Logistic {
            b1: v[0],
            b2: v[1],
            b3: v[2],
            b4: v[3],
        }
    }

    fn jacobian_row(&self, x: f64) -> Vector4<f64> {
        let s = self.b4.abs();
        let z = (x - self.b3) / s;
        let g = 1.0 / (1.0 + (-z).exp());
        let dg = g * (1.0 - g);
        let d = self.b1 - self.b2;
        Vector4::new(g, 1.0 - g, -d * dg / s, -d * dg * z / s * self.b4.signum())
    }
}

/// Levenberg-Marquardt least-squares fit of [`Logistic`] mapping `pred` onto `mos`.
pub fn fit_logistic(pred: &[f64], mos: &[f64]) -> Result<Logistic> {
    check_pair(pred, mos)?;
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let std = (pred.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = mos.iter().fold((f64::MAX, f64::MIN), |(a, b), &m| (a.min(m), b.max(m)));
    let mut beta = Vector4::new(hi, lo, mean, if std > 0.0 { std } else { 1.0 });
    let sse = |b: &Vector4<f64>| {
        let f = Logistic::from_vec(b);
        pred.iter().zip(mos).map(|(&x, &y)| (f.eval(x) - y).powi(2)).sum::<f64>()
    };
    let mut cost = sse(&beta);
    let mut lambda = 1e-3;
    for _ in 0..500 {
        let f = Logistic::from_vec(&beta);
        let mut jtj = Matrix4::zeros();
        let mut jtr = Vector4::zeros();
        for (&x, &y) in pred.iter().zip(mos) {
            let j = f.jacobian_row(x);
            jtj += j * j.transpose();
            jtr += j * (f.eval(x) - y);
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = beta + step;
            let c = sse(&candidate);
            if c.is_finite() && c < cost && candidate[3] != 0.0 {
                let rel = (cost - c) / cost.max(1e-300);
                beta = candidate;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-14;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if !beta.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("logistic fit diverged".into()));
    }
    Ok(Logistic::from_vec(&beta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub n: usize,
    pub srcc: Option<f64>,
    pub krcc: Option<f64>,
    pub plcc: Option<f64>,
    pub rmse: Option<f64>,
    /// Why a metric is null, when one is.
    pub reason: Option<String>,
    /// Present when PLCC and RMSE were computed after a logistic remap.
    pub logistic: Option<Logistic>,
}

impl MetricsReport {
    /// Computes all four metrics. Undefined correlations become nulls with a
    /// reason instead of failing the whole report.
    pub fn compute(pred: &[f64], mos: &[f64], logistic: bool) -> Result<Self> {
        check_pair(pred, mos)?;
        let mut reasons = Vec::new();
        let mut keep = |r: Result<f64>| match r {
            Ok(v) => Some(v),
            Err(Error::UndefinedCorrelation(m)) => {
                if !reasons.contains(&m) {
                    reasons.push(m);
                }
                None
            }
            Err(_) => None,
        };
        let srcc = keep(srcc(pred, mos));
        let krcc = keep(krcc(pred, mos));
        let (mapped, fit) = if logistic {
            let fit = fit_logistic(pred, mos)?;
            (pred.iter().map(|&p| fit.eval(p)).collect(), Some(fit))
        } else {
            (pred.to_vec(), None)
        };
        let plcc = keep(plcc(&mapped, mos));
        let rmse = Some(rmse(&mapped, mos)?);
        Ok(MetricsReport {
            schema: REPORT_SCHEMA.into(),
            n: pred.len(),
            srcc,
            krcc,
            plcc,
            rmse,
            reason: (!reasons.is_empty()).then(|| reasons.join("; ")),
            logistic: fit,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video: String,
    pub prediction: f64,
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
}

/// Scores every sample (in parallel, results kept in input order) and
/// compares against MOS.
pub fn evaluate(model: &QualityModel, samples: &[VideoSample], head: Option<&str>, logistic: bool) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Data("no videos to evaluate".into()));
    }
    let predictions = samples
        .par_iter()
        .map(|s| {
            let score = model.score_clip(&s.dist, s.reference.as_deref(), head)?;
            Ok(Prediction {
                video: s.id.clone(),
                prediction: score.video_score,
                mos: s.mos,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluation_from(predictions, logistic)
}

pub fn evaluation_from(predictions: Vec<Prediction>, logistic: bool) -> Result<Evaluation> {
    let pred: Vec<f64> = predictions.iter().map(|p| p.prediction).collect();
    let mos: Vec<f64> = predictions.iter().map(|p| p.mos).collect();
    Ok(Evaluation {
        report: MetricsReport::compute(&pred, &mos, logistic)?,
        predictions,
    })
}

pub fn write_predictions_csv<W: Write>(writer: W, predictions: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in predictions {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io("<prediction csv>", e))
}

pub fn read_predictions_csv<R: std::io::Read>(reader: R) -> Result<Vec<Prediction>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
