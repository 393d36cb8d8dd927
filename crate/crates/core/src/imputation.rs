//! Location-scale negative-binomial model for the onset-to-report delay and
//! multiple imputation of missing onset dates.

use chrono::{Duration, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{absorb_sum_to_zero, difference_penalty, BasisBlock, PSplineBasis, SmoothKind};
use crate::engine::{
    nb_logpmf, optimize_smoothing, NbScale, NegBin, OuterFamily, PenalizedProblem, PenaltyTerm, QuasiPoisson,
    SmoothingOptions, SmoothingResult,
};
use crate::error::{Error, Result};
use crate::linalg::Design;
use crate::panel::{aggregate_panel, compute_rates, CaseRecord, DistrictRegistry, PopulationTable, SurveillancePanel, WeekCalendar};
use crate::simulator::{sample_nb, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayModelOptions {
    /// Upper bound on the report-date spline basis size.
    pub spline_k: usize,
    pub max_cycles: usize,
    /// Relative change in the joint log-likelihood that ends backfitting.
    pub tol: f64,
    pub smoothing: SmoothingOptions,
}

impl Default for DelayModelOptions {
    fn default() -> Self {
        DelayModelOptions {
            spline_k: 20,
            max_cycles: 100,
            tol: 1e-6,
            smoothing: SmoothingOptions {
                starts: 1,
                ..SmoothingOptions::default()
            },
        }
    }
}

/// Shared covariate layout of both predictors.
#[derive(Debug, Clone, PartialEq)]
struct DelayLayout {
    states: Vec<String>,
    districts: Vec<String>,
    day0: NaiveDate,
    spline: Option<(PSplineBasis, DMatrix<f64>)>,
    names: Vec<String>,
    spline_start: usize,
    district_start: usize,
}

impl DelayLayout {
    fn build(cases: &[&CaseRecord], max_k: usize) -> Result<Self> {
        let mut states: Vec<String> = cases.iter().map(|c| c.state_id.clone()).collect();
        states.sort();
        states.dedup();
        let mut districts: Vec<String> = cases.iter().map(|c| c.district_id.clone()).collect();
        districts.sort();
        districts.dedup();
        let day0 = cases.iter().map(|c| c.report_date).min().expect("non-empty");
        let days: Vec<f64> = cases.iter().map(|c| (c.report_date - day0).num_days() as f64).collect();
        let mut distinct = days.clone();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let k = max_k.min(distinct.len());

        let mut names: Vec<String> = ["(intercept)", "male", "age36_59", "age36_59:male", "weekend"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend(states.iter().skip(1).map(|s| format!("state[{s}]")));
        let spline_start = names.len();
        let spline = if k >= 5 {
            let basis = PSplineBasis::fit(&days, k, 3)?;
            let block = BasisBlock {
                label: "s(report)".into(),
                kind: SmoothKind::Pspline,
                design: basis.design(&days)?,
                penalty: difference_penalty(k, 2),
                null_space_dim: 2,
                constraint: None,
            };
            let z = absorb_sum_to_zero(&block)?.constraint.expect("absorbed");
            names.extend((1..z.ncols() + 1).map(|j| format!("s(report).{j}")));
            Some((basis, z))
        } else {
            None
        };
        let district_start = names.len();
        names.extend(districts.iter().map(|d| format!("district[{d}]")));
        Ok(DelayLayout {
            states,
            districts,
            day0,
            spline,
            names,
            spline_start,
            district_start,
        })
    }

    /// Sparse row of one case; the flag is false when the district has no
    /// training level.
    fn row(&self, case: &CaseRecord) -> Result<(Vec<(usize, f64)>, bool)> {
        let male = if case.group.is_male() { 1.0 } else { 0.0 };
        let older = if case.group.is_older() { 1.0 } else { 0.0 };
        let mut row = vec![(0, 1.0), (1, male), (2, older), (3, male * older)];
        if case.weekend_flag {
            row.push((4, 1.0));
        }
        if let Some(pos) = self.states.iter().position(|s| *s == case.state_id) {
            if pos > 0 {
                row.push((4 + pos, 1.0));
            }
        } else {
            log::warn!("state '{}' has no delay training cases; using the reference level", case.state_id);
        }
        if let Some((basis, z)) = &self.spline {
            let day = (case.report_date - self.day0).num_days() as f64;
            let b = basis.design(&[day])? * z;
            row.extend(b.iter().enumerate().map(|(j, &v)| (self.spline_start + j, v)));
        }
        let known = match self.districts.binary_search(&case.district_id) {
            Ok(pos) => {
                row.push((self.district_start + pos, 1.0));
                true
            }
            Err(_) => false,
        };
        Ok((row, known))
    }

    fn design(&self, cases: &[&CaseRecord]) -> Result<Design> {
        let rows = cases
            .iter()
            .map(|c| self.row(c).map(|(r, _)| r))
            .collect::<Result<Vec<_>>>()?;
        Design::from_rows(self.names.len(), rows)
    }

    fn terms(&self) -> Result<Vec<PenaltyTerm>> {
        let mut terms = Vec::new();
        if let Some((_, z)) = &self.spline {
            let s = z.transpose() * difference_penalty(z.nrows(), 2) * z;
            terms.push(PenaltyTerm::new("s(report)", self.spline_start, (&s + s.transpose()) * 0.5)?);
        }
        let nd = self.districts.len();
        terms.push(PenaltyTerm::new("district", self.district_start, DMatrix::identity(nd, nd))?);
        Ok(terms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayCoefficient {
    pub name: String,
    pub mu: f64,
    pub mu_se: f64,
    pub sigma: f64,
    pub sigma_se: f64,
}

/// Fitted delay model: `D ~ NB(μ, σ)` with `E D = μ`, `Var D = μ + σμ²`,
/// log links for both `μ` and `σ`.
#[derive(Debug, Clone)]
pub struct DelayModel {
    layout: DelayLayout,
    pub theta_mu: DVector<f64>,
    pub theta_sigma: DVector<f64>,
    pub cov_mu: DMatrix<f64>,
    pub cov_sigma: DMatrix<f64>,
    pub lambda_mu: Vec<f64>,
    pub lambda_sigma: Vec<f64>,
    pub loglik: f64,
    pub cycles: usize,
    pub nobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayModelSummary {
    pub coefficients: Vec<DelayCoefficient>,
    pub lambda_mu: Vec<f64>,
    pub lambda_sigma: Vec<f64>,
    pub loglik: f64,
    pub cycles: usize,
    pub nobs: usize,
}

impl DelayModel {
    pub fn names(&self) -> &[String] {
        &self.layout.names
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.layout.names.iter().position(|n| n == name)
    }

    /// `(μ̂, σ̂)` for a case; districts unseen in training get a zero effect
    /// with a warning.
    pub fn predict(&self, case: &CaseRecord) -> Result<(f64, f64)> {
        let (row, known) = self.layout.row(case)?;
        if !known {
            log::warn!(
                "district '{}' has no delay training cases; using a zero district effect",
                case.district_id
            );
        }
        let eta_mu: f64 = row.iter().map(|&(j, v)| v * self.theta_mu[j]).sum();
        let eta_sigma: f64 = row.iter().map(|&(j, v)| v * self.theta_sigma[j]).sum();
        Ok((eta_mu.exp(), eta_sigma.exp()))
    }

    /// Unpenalized coefficients of both predictors with standard errors.
    pub fn summary(&self) -> DelayModelSummary {
        let coefficients = (0..self.layout.spline_start)
            .map(|j| DelayCoefficient {
                name: self.layout.names[j].clone(),
                mu: self.theta_mu[j],
                mu_se: self.cov_mu[(j, j)].max(0.0).sqrt(),
                sigma: self.theta_sigma[j],
                sigma_se: self.cov_sigma[(j, j)].max(0.0).sqrt(),
            })
            .collect();
        DelayModelSummary {
            coefficients,
            lambda_mu: self.lambda_mu.clone(),
            lambda_sigma: self.lambda_sigma.clone(),
            loglik: self.loglik,
            cycles: self.cycles,
            nobs: self.nobs,
        }
    }
}

fn inverse_hessian(sm: &SmoothingResult) -> DMatrix<f64> {
    let p = sm.fit.theta.len();
    sm.fit.chol.solve(&DMatrix::identity(p, p))
}

/// Backfits the μ- and σ-predictors on cases with known onset.
pub fn fit_delay_model(cases: &[CaseRecord], opts: &DelayModelOptions) -> Result<DelayModel> {
    let complete: Vec<&CaseRecord> = cases.iter().filter(|c| c.onset_date.is_some()).collect();
    if complete.len() < 50 {
        return Err(Error::invalid(format!(
            "delay model needs at least 50 complete cases, found {}",
            complete.len()
        )));
    }
    let first = complete[0].report_date;
    if complete.iter().all(|c| c.report_date == first) {
        return Err(Error::invalid("delay model needs complete cases on at least two report dates"));
    }
    let layout = DelayLayout::build(&complete, opts.spline_k)?;
    let x = layout.design(&complete)?;
    let y: Vec<f64> = complete.iter().map(|c| c.delay().unwrap() as f64).collect();
    let n = y.len();
    let problem = PenalizedProblem::new(x, y.clone(), vec![0.0; n], layout.names.clone(), layout.terms()?)?;

    let poisson = QuasiPoisson { phi: 1.0 };
    let pilot = optimize_smoothing(&problem, OuterFamily::Fixed(&poisson), &opts.smoothing)?;
    let mut mu: Vec<f64> = pilot.fit.eta.iter().map(|e| e.exp()).collect();
    let num: f64 = y.iter().zip(&mu).map(|(d, m)| (d - m).powi(2) - m).sum();
    let den: f64 = mu.iter().map(|m| m * m).sum();
    let mut sigma = vec![(num / den).clamp(1e-3, 1e3); n];
    let mut rho_mu = pilot.rho.clone();
    let mut rho_sigma: Option<Vec<f64>> = None;

    let joint = |mu: &[f64], sigma: &[f64]| -> f64 {
        y.iter().zip(mu).zip(sigma).map(|((&d, &m), &s)| nb_logpmf(d, m, 1.0 / s)).sum()
    };
    let mut last = joint(&mu, &sigma);
    for cycle in 1..=opts.max_cycles {
        let lik = NegBin::PerObs(sigma.iter().map(|s| 1.0 / s).collect());
        let sm_mu = optimize_smoothing(
            &problem,
            OuterFamily::Fixed(&lik),
            &SmoothingOptions {
                initial: Some(rho_mu.clone()),
                ..opts.smoothing.clone()
            },
        )?;
        mu = sm_mu.fit.eta.iter().map(|e| e.exp()).collect();
        let scale_lik = NbScale { mu: mu.clone() };
        let sm_sigma = optimize_smoothing(
            &problem,
            OuterFamily::Fixed(&scale_lik),
            &SmoothingOptions {
                initial: rho_sigma.clone(),
                ..opts.smoothing.clone()
            },
        )?;
        sigma = sm_sigma.fit.eta.iter().map(|e| e.exp()).collect();
        rho_mu = sm_mu.rho.clone();
        rho_sigma = Some(sm_sigma.rho.clone());
        let ll = joint(&mu, &sigma);
        let change = (ll - last).abs() / (1.0 + ll.abs());
        log::debug!("delay backfitting cycle {cycle}: loglik {ll:.6} change {change:.3e}");
        last = ll;
        if change < opts.tol {
            return Ok(DelayModel {
                layout,
                theta_mu: sm_mu.fit.theta.clone(),
                theta_sigma: sm_sigma.fit.theta.clone(),
                cov_mu: inverse_hessian(&sm_mu),
                cov_sigma: inverse_hessian(&sm_sigma),
                lambda_mu: sm_mu.lambda.clone(),
                lambda_sigma: sm_sigma.lambda.clone(),
                loglik: ll,
                cycles: cycle,
                nobs: n,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_cycles,
        gradient: last,
    })
}

/// Onset dates for the given cases: observed onsets are kept, missing ones
/// are `report − d` with `d ~ NB(μ̂, σ̂)`.
pub fn sample_delays<R: Rng + ?Sized>(model: &DelayModel, cases: &[CaseRecord], rng: &mut R) -> Result<Vec<NaiveDate>> {
    cases
        .iter()
        .map(|c| match c.onset_date {
            Some(onset) => Ok(onset),
            None => {
                let (mu, sigma) = model.predict(c)?;
                let d = sample_nb(rng, mu, 1.0 / sigma);
                Ok(c.report_date - Duration::days(d as i64))
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ImputedDataset {
    /// Imputation index, starting at 1.
    pub k: usize,
    pub cases: Vec<CaseRecord>,
    pub panel: SurveillancePanel,
}

/// Random stream of imputation `k` (1-based) under `seed`.
pub fn imputation_stream(seed: u64, k: usize) -> rand_chacha::ChaCha8Rng {
    substream(seed, 1000 + k as u64)
}

/// `K` completed line lists and their panels (rates filled), one random
/// substream per imputation.
pub fn build_imputations(
    cases: &[CaseRecord],
    model: &DelayModel,
    k: usize,
    seed: u64,
    registry: &DistrictRegistry,
    calendar: WeekCalendar,
    population: &PopulationTable,
) -> Result<Vec<ImputedDataset>> {
    if k < 2 {
        return Err(Error::invalid("at least two imputations are required"));
    }
    (1..=k)
        .into_par_iter()
        .map(|idx| {
            let mut rng = imputation_stream(seed, idx);
            let onsets = sample_delays(model, cases, &mut rng)?;
            let filled: Vec<CaseRecord> = cases
                .iter()
                .zip(onsets)
                .map(|(c, onset)| CaseRecord {
                    onset_date: Some(onset),
                    ..c.clone()
                })
                .collect();
            let panel = compute_rates(aggregate_panel(&filled, registry, calendar)?, population)?;
            Ok(ImputedDataset {
                k: idx,
                cases: filled,
                panel,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{AgeBand, Gender, GroupKey};

    fn case(id: usize, district: &str, report: NaiveDate, onset: Option<NaiveDate>) -> CaseRecord {
        let group = GroupKey {
            age_band: if id % 2 == 0 { AgeBand::Young } else { AgeBand::Middle },
            gender: if id % 3 == 0 { Gender::Male } else { Gender::Female },
        };
        CaseRecord::new(format!("c{id}"), district, "S1", group, report, onset).unwrap()
    }

    fn toy_cases(n: usize, seed: u64) -> Vec<CaseRecord> {
        let mut rng = substream(seed, 9);
        let start = NaiveDate::from_ymd_opt(2020, 3, 2).unwrap();
        (0..n)
            .map(|i| {
                let report = start + Duration::days(rng.random_range(0..40));
                let d = sample_nb(&mut rng, 5.0, 4.0) as i64;
                let district = ["A", "B", "C"][i % 3];
                case(i, district, report, Some(report - Duration::days(d)))
            })
            .collect()
    }

    #[test]
    fn rejects_small_training_sets() {
        let cases = toy_cases(30, 1);
        assert!(fit_delay_model(&cases, &DelayModelOptions::default()).is_err());
    }

    #[test]
    fn sampled_onsets_never_follow_report() {
        let mut cases = toy_cases(300, 2);
        let model = fit_delay_model(&cases, &DelayModelOptions::default()).unwrap();
        for c in cases.iter_mut().step_by(3) {
            c.onset_date = None;
        }
        let mut rng = substream(5, 0);
        let onsets = sample_delays(&model, &cases, &mut rng).unwrap();
        for (c, o) in cases.iter().zip(&onsets) {
            assert!(*o <= c.report_date);
            if let Some(obs) = c.onset_date {
                assert_eq!(obs, *o);
            }
        }
    }

    #[test]
    fn unknown_district_predicts_with_zero_effect() {
        let cases = toy_cases(200, 3);
        let model = fit_delay_model(&cases, &DelayModelOptions::default()).unwrap();
        let mut c = cases[0].clone();
        c.district_id = "Z".into();
        let (mu, _) = model.predict(&c).unwrap();
        assert!(mu.is_finite() && mu > 0.0);
    }
}
