//! Model checks for count fits: randomized quantile residuals with a
//! Kolmogorov–Smirnov check, rootograms and observed-vs-predicted summaries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{nb_cdf, nb_logpmf};
use crate::error::{Error, Result};
use crate::simulator::substream;
use crate::special::{norm_cdf, norm_quantile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub residuals: Vec<f64>,
    pub seed: u64,
    pub draw: u64,
}

/// `rᵢ = Φ⁻¹(uᵢ)` with `uᵢ ~ U(F(yᵢ − 1), F(yᵢ))` under `NB(μ̂ᵢ, φ̂)`.
/// Each draw index uses its own random stream.
pub fn rq_residuals(y: &[f64], mu: &[f64], phi: f64, seed: u64, draw: u64) -> Result<ResidualSet> {
    if y.len() != mu.len() {
        return Err(Error::invalid("responses and fitted means differ in length"));
    }
    let mut rng = substream(seed, 2000 + draw);
    let residuals = y
        .iter()
        .zip(mu)
        .map(|(&yi, &mi)| {
            let (lo, hi) = cdf_interval(yi, mi, phi);
            let u = lo + (hi - lo) * rng.random::<f64>();
            norm_quantile(u)
        })
        .collect();
    Ok(ResidualSet { residuals, seed, draw })
}

/// `(F(y − 1), F(y))`.
pub fn cdf_interval(y: f64, mu: f64, phi: f64) -> (f64, f64) {
    let hi = nb_cdf(y, mu, phi);
    let lo = if y >= 1.0 { nb_cdf(y - 1.0, mu, phi).min(hi) } else { 0.0 };
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov–Smirnov test against `N(0, 1)` with the asymptotic
/// Kolmogorov distribution (Stephens' small-sample correction).
pub fn ks_normal(x: &[f64]) -> Result<KsTest> {
    if x.is_empty() {
        return Err(Error::invalid("KS test needs at least one value"));
    }
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in s.iter().enumerate() {
        let f = norm_cdf(v);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    Ok(KsTest {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

/// `Q(λ) = 2 Σ (−1)^{j−1} exp(−2 j² λ²)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=200 {
        let term = (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqPoint {
    pub theoretical: f64,
    pub sample: f64,
    pub outlier: bool,
}

/// Sorted residuals against normal plotting positions `(i − ½)/n`; points
/// further than 1 from the diagonal are flagged.
pub fn qq_points(residuals: &[f64]) -> Vec<QqPoint> {
    let mut s = residuals.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let q = norm_quantile((i as f64 + 0.5) / n);
            QqPoint {
                theoretical: q,
                sample: v,
                outlier: (v - q).abs() > 1.0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootogramBin {
    pub count: u64,
    pub observed: f64,
    pub expected: f64,
    pub sqrt_observed: f64,
    pub sqrt_expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rootogram {
    pub bins: Vec<RootogramBin>,
    /// Observations above the largest count shown.
    pub observed_beyond: f64,
    /// Expected frequency above the largest count shown.
    pub expected_beyond: f64,
    pub nobs: usize,
}

/// Observed and expected frequencies of the counts `0..=max_count`.
pub fn rootogram(y: &[f64], mu: &[f64], phi: f64, max_count: u64) -> Result<Rootogram> {
    if y.len() != mu.len() {
        return Err(Error::invalid("responses and fitted means differ in length"));
    }
    let m = max_count as usize + 1;
    let mut observed = vec![0.0; m];
    let mut expected = vec![0.0; m];
    let mut observed_beyond = 0.0;
    for (&yi, &mi) in y.iter().zip(mu) {
        if yi >= 0.0 && (yi as usize) < m {
            observed[yi as usize] += 1.0;
        } else {
            observed_beyond += 1.0;
        }
        for (v, e) in expected.iter_mut().enumerate() {
            *e += nb_logpmf(v as f64, mi, phi).exp();
        }
    }
    let shown: f64 = expected.iter().sum();
    let bins = (0..m)
        .map(|v| RootogramBin {
            count: v as u64,
            observed: observed[v],
            expected: expected[v],
            sqrt_observed: observed[v].sqrt(),
            sqrt_expected: expected[v].sqrt(),
        })
        .collect();
    Ok(Rootogram {
        bins,
        observed_beyond,
        expected_beyond: (y.len() as f64 - shown).max(0.0),
        nobs: y.len(),
    })
}

/// Elementwise mean of rootograms with equal count ranges.
pub fn average_rootograms(items: &[Rootogram]) -> Result<Rootogram> {
    let first = items.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    if items.iter().any(|r| r.bins.len() != first.bins.len()) {
        return Err(Error::invalid("rootograms cover different count ranges"));
    }
    let k = items.len() as f64;
    let bins = (0..first.bins.len())
        .map(|v| {
            let observed = items.iter().map(|r| r.bins[v].observed).sum::<f64>() / k;
            let expected = items.iter().map(|r| r.bins[v].expected).sum::<f64>() / k;
            RootogramBin {
                count: v as u64,
                observed,
                expected,
                sqrt_observed: items.iter().map(|r| r.bins[v].sqrt_observed).sum::<f64>() / k,
                sqrt_expected: items.iter().map(|r| r.bins[v].sqrt_expected).sum::<f64>() / k,
            }
        })
        .collect();
    Ok(Rootogram {
        bins,
        observed_beyond: items.iter().map(|r| r.observed_beyond).sum::<f64>() / k,
        expected_beyond: items.iter().map(|r| r.expected_beyond).sum::<f64>() / k,
        nobs: first.nobs,
    })
}

/// Elementwise mean of sorted residual sets (averaged QQ curve).
pub fn average_sorted_residuals(sets: &[ResidualSet]) -> Result<Vec<f64>> {
    let first = sets.first().ok_or_else(|| Error::invalid("nothing to average"))?;
    let n = first.residuals.len();
    if sets.iter().any(|s| s.residuals.len() != n) {
        return Err(Error::invalid("residual sets differ in length"));
    }
    let mut acc = vec![0.0; n];
    for s in sets {
        let mut r = s.residuals.clone();
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / sets.len() as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedObserved {
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
    pub log_observed: Vec<f64>,
    pub log_predicted: Vec<f64>,
    /// Pearson correlation on the `log(· + 1)` scale.
    pub correlation: f64,
}

pub fn predicted_vs_observed(y: &[f64], mu: &[f64]) -> Result<PredictedObserved> {
    if y.len() != mu.len() || y.is_empty() {
        return Err(Error::invalid("need equally long, non-empty observed and fitted series"));
    }
    let ly: Vec<f64> = y.iter().map(|v| v.ln_1p()).collect();
    let lm: Vec<f64> = mu.iter().map(|v| v.ln_1p()).collect();
    Ok(PredictedObserved {
        observed: y.to_vec(),
        predicted: mu.to_vec(),
        correlation: pearson(&ly, &lm),
        log_observed: ly,
        log_predicted: lm,
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::sample_nb;

    #[test]
    fn residuals_lie_in_their_cdf_interval() {
        let y = [0.0, 1.0, 4.0, 12.0, 90.0];
        let mu = [0.5, 2.0, 3.0, 10.0, 70.0];
        let r = rq_residuals(&y, &mu, 3.0, 7, 0).unwrap();
        for ((yi, mi), ri) in y.iter().zip(&mu).zip(&r.residuals) {
            let (lo, hi) = cdf_interval(*yi, *mi, 3.0);
            let u = norm_cdf(*ri);
            assert!(u >= lo - 1e-12 && u <= hi + 1e-12);
        }
        assert_eq!(r, rq_residuals(&y, &mu, 3.0, 7, 0).unwrap());
    }

    #[test]
    fn ks_accepts_model_data_and_rejects_shifted() {
        let mut rng = substream(3, 0);
        let mu: Vec<f64> = (0..3000).map(|i| 1.0 + (i % 17) as f64).collect();
        let y: Vec<f64> = mu.iter().map(|&m| sample_nb(&mut rng, m, 4.0) as f64).collect();
        let r = rq_residuals(&y, &mu, 4.0, 1, 0).unwrap();
        assert!(ks_normal(&r.residuals).unwrap().p_value > 0.001);
        let shifted: Vec<f64> = r.residuals.iter().map(|v| v + 0.3).collect();
        assert!(ks_normal(&shifted).unwrap().p_value < 1e-6);
    }

    #[test]
    fn kolmogorov_tail_reference() {
        // Q(1.3581) ≈ 0.05
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn rootogram_totals() {
        let y = [0.0, 0.0, 1.0, 3.0, 50.0];
        let mu = [0.4, 1.0, 1.5, 2.5, 30.0];
        let r = rootogram(&y, &mu, 2.0, 10).unwrap();
        let obs: f64 = r.bins.iter().map(|b| b.observed).sum::<f64>() + r.observed_beyond;
        assert_eq!(obs, 5.0);
        let exp: f64 = r.bins.iter().map(|b| b.expected).sum();
        assert!((exp + r.expected_beyond - 5.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_correlates_fully() {
        let y = [0.0, 3.0, 7.0, 20.0];
        let p = predicted_vs_observed(&y, &y).unwrap();
        assert!((p.correlation - 1.0).abs() < 1e-12);
        assert_eq!(p.log_observed[0], 0.0);
    }
}
