//! Generative simulator for the infection model and its raw inputs.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::embedding::{embed_connectedness, ConnectednessMatrix};
use crate::error::{Error, Result};
use crate::features::{gini_series, weekly_average, CoLocationMatrix, DailyValue, FeatureKind, FeatureSet};
use crate::panel::{
    compute_rates, CaseRecord, District, DistrictRegistry, GroupKey, PopulationTable, SurveillancePanel, WeekCalendar,
};

/// Reporting-delay generator: `D ~ NB(μ, σ)` with `Var = μ + σμ²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayTruth {
    pub intercept: f64,
    pub male: f64,
    pub older: f64,
    pub state_sd: f64,
    pub log_sigma: f64,
    pub sigma_older: f64,
    /// Extra days added to every delay (misspecification experiments).
    pub shift: i64,
}

impl Default for DelayTruth {
    fn default() -> Self {
        DelayTruth {
            intercept: 1.6,
            male: 0.05,
            older: -0.1,
            state_sd: 0.15,
            log_sigma: (0.3f64).ln(),
            sigma_older: 0.2,
            shift: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub districts: usize,
    pub weeks: usize,
    pub states: usize,
    pub seed: u64,
    pub anchor: NaiveDate,
    pub week_base: f64,
    pub week_amplitude: f64,
    pub theta_gen: f64,
    pub theta_age: f64,
    pub theta_age_gen: f64,
    pub gini_effect: f64,
    pub staying_put_effect: f64,
    pub theta_ar: f64,
    pub c: f64,
    pub tau_a: f64,
    pub tau_b: f64,
    pub phi: f64,
    /// Log-uniform range of group populations.
    pub population_range: (f64, f64),
    pub coord_amplitude: f64,
    pub social_amplitude: f64,
    /// Typical co-location decay length (coordinate units).
    pub colocation_scale: f64,
    pub colocation_walk_sd: f64,
    pub staying_put_base: f64,
    pub staying_put_walk_sd: f64,
    /// Spread of latent friendship positions around the centroids.
    pub friendship_noise: f64,
    pub delay: DelayTruth,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            districts: 50,
            weeks: 16,
            states: 4,
            seed: 1,
            anchor: NaiveDate::from_ymd_opt(2020, 3, 3).unwrap(),
            week_base: -8.8,
            week_amplitude: 0.3,
            theta_gen: -0.03,
            theta_age: -0.031,
            theta_age_gen: -0.071,
            gini_effect: -0.15,
            staying_put_effect: 0.1,
            theta_ar: 0.62,
            c: 0.5,
            tau_a: 0.2,
            tau_b: 0.585,
            phi: 25.0,
            population_range: (3_000.0, 40_000.0),
            coord_amplitude: 0.3,
            social_amplitude: 0.2,
            colocation_scale: 1.5,
            colocation_walk_sd: 0.15,
            staying_put_base: 25.0,
            staying_put_walk_sd: 0.8,
            friendship_noise: 1.0,
            delay: DelayTruth::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::invalid("true c must lie in (0, 1]"));
        }
        if self.districts < 3 || self.weeks < 2 || self.states == 0 {
            return Err(Error::invalid("need at least 3 districts, 2 weeks and 1 state"));
        }
        let (lo, hi) = self.population_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::invalid("population range must be positive and ordered"));
        }
        if !(self.phi > 0.0) || self.tau_a < 0.0 || self.tau_b < 0.0 {
            return Err(Error::invalid("dispersion must be positive and random-effect SDs non-negative"));
        }
        Ok(())
    }

    pub fn calendar(&self) -> Result<WeekCalendar> {
        WeekCalendar::new(self.anchor, self.weeks)
    }

    pub fn week_effect(&self, week: usize) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * (week as f64 - 1.0) / self.weeks as f64;
        self.week_base + self.week_amplitude * phase.sin()
    }
}

/// Known parameters and realized latent quantities of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub features: FeatureSet,
    /// Aligned social-embedding coordinates the social surface is defined on.
    pub social: Vec<[f64; 2]>,
    pub f_coord: Vec<f64>,
    pub f_social: Vec<f64>,
    pub week_effects: Vec<f64>,
    /// Endemic and epidemic predictors per cell, indexed `(i·4 + g)·T + t − 1`;
    /// the endemic part includes the log population.
    pub nu_end: Vec<f64>,
    pub nu_epi: Vec<f64>,
    /// True values under the model-frame column names.
    pub coefficients: Vec<(String, f64)>,
    pub state_delay_effects: Vec<f64>,
}

impl SyntheticTruth {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Everything a simulation produces: raw inputs, the aggregated panel and the truth.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub registry: DistrictRegistry,
    pub population: PopulationTable,
    pub calendar: WeekCalendar,
    pub colocation: Vec<CoLocationMatrix>,
    pub staying_put: Vec<DailyValue>,
    pub connectedness: ConnectednessMatrix,
    pub panel: SurveillancePanel,
    pub truth: SyntheticTruth,
}

pub(crate) fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws from `NB(mu, size)` as a gamma–Poisson mixture.
pub fn sample_nb<R: Rng + ?Sized>(rng: &mut R, mu: f64, size: f64) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    let lambda = Gamma::new(size, mu / size).expect("positive gamma parameters").sample(rng);
    if lambda <= 1e-300 {
        return 0;
    }
    Poisson::new(lambda).expect("positive Poisson mean").sample(rng) as u64
}

fn center(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Simulated panel and its truth.
pub fn simulate_panel(config: &SimulationConfig) -> Result<(SurveillancePanel, SyntheticTruth)> {
    let data = simulate(config)?;
    Ok((data.panel, data.truth))
}

/// Full simulation: geography, populations, mobility, connectedness, random
/// effects and counts generated week by week.
pub fn simulate(config: &SimulationConfig) -> Result<SimulatedData> {
    config.validate()?;
    let n = config.districts;
    let weeks = config.weeks;
    let calendar = config.calendar()?;

    let mut geo_rng = substream(config.seed, 0);
    let mut coords = Vec::with_capacity(n);
    let mut districts = Vec::with_capacity(n);
    for i in 0..n {
        let lon = geo_rng.random_range(6.0..15.0);
        let lat = geo_rng.random_range(47.5..55.0);
        let state = (((lon - 6.0) / 9.0 * config.states as f64) as usize).min(config.states - 1);
        coords.push([lon, lat]);
        districts.push(District {
            district_id: format!("D{:03}", i + 1),
            state_id: format!("S{:02}", state + 1),
            lon,
            lat,
        });
    }
    let registry = DistrictRegistry::new(districts)?;
    let (plo, phi_) = config.population_range;
    let mut pops = Vec::new();
    for d in registry.districts() {
        for g in GroupKey::ALL {
            let u: f64 = geo_rng.random();
            let pop = (plo.ln() + u * (phi_.ln() - plo.ln())).exp().round().max(1.0);
            pops.push((d.district_id.clone(), g, pop));
        }
    }
    let population = PopulationTable::from_entries(&registry, pops)?;

    // mobility
    let mut feat_rng = substream(config.seed, 1);
    let walk = Normal::new(0.0, config.colocation_walk_sd.max(1e-12)).unwrap();
    let mut log_scale: Vec<f64> = (0..n).map(|_| walk.sample(&mut feat_rng) * 2.0).collect();
    let mut colocation = Vec::with_capacity(weeks);
    for w in 1..=weeks {
        let p = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                (-dist(coords[i], coords[j]) / (config.colocation_scale * log_scale[i].exp())).exp()
            }
        });
        let sums: Vec<f64> = (0..n).map(|i| p.row(i).sum()).collect();
        let p = DMatrix::from_fn(n, n, |i, j| p[(i, j)] / sums[i]);
        colocation.push(CoLocationMatrix::new(w, p)?);
        for s in log_scale.iter_mut() {
            *s += walk.sample(&mut feat_rng);
        }
    }
    let sp_step = Normal::new(0.0, config.staying_put_walk_sd.max(1e-12)).unwrap();
    let mut staying_put = Vec::with_capacity(n * 7 * weeks);
    for i in 0..n {
        let mut level = config.staying_put_base + 3.0 * sp_step.sample(&mut feat_rng);
        for day in 0..(7 * weeks) as i64 {
            level += sp_step.sample(&mut feat_rng);
            staying_put.push(DailyValue {
                district: i,
                date: calendar.anchor + chrono::Duration::days(day),
                value: level,
            });
        }
    }
    let ids = registry.ids();
    let gini = gini_series(&colocation, &ids)?;
    let sp = weekly_average(&staying_put, &ids, &calendar, weeks, FeatureKind::StayingPut)?;
    let features = FeatureSet::from_raw(gini, sp)?;

    // connectedness from latent friendship positions
    let friend_noise = Normal::new(0.0, config.friendship_noise.max(1e-12)).unwrap();
    let latent: Vec<[f64; 2]> = coords
        .iter()
        .map(|p| [p[0] + friend_noise.sample(&mut feat_rng), p[1] + friend_noise.sample(&mut feat_rng)])
        .collect();
    let sci = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            1.0 / (dist(latent[i], latent[j]) + 0.05)
        }
    });
    let connectedness = ConnectednessMatrix::new(sci)?;
    let social = embed_connectedness(&connectedness, &coords, 2)?.aligned;

    // latent effects
    let mut re_rng = substream(config.seed, 2);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut a: Vec<f64> = (0..n).map(|_| config.tau_a * std.sample(&mut re_rng)).collect();
    let mut b: Vec<f64> = (0..n).map(|_| config.tau_b * std.sample(&mut re_rng)).collect();
    center(&mut a);
    center(&mut b);
    let mut f_coord: Vec<f64> = coords
        .iter()
        .map(|p| config.coord_amplitude * (0.6 * (p[0] - 10.5)).sin() * (0.8 * (p[1] - 51.2)).cos())
        .collect();
    let mut f_social: Vec<f64> = social
        .iter()
        .map(|p| config.social_amplitude * (0.5 * (p[0] - 10.5) + 0.3 * (p[1] - 51.2)).cos())
        .collect();
    center(&mut f_coord);
    center(&mut f_social);
    let week_effects: Vec<f64> = (1..=weeks).map(|t| config.week_effect(t)).collect();

    // counts
    let mut count_rng = substream(config.seed, 3);
    let mut panel = SurveillancePanel::zeros(ids.clone(), calendar);
    let cells = n * GroupKey::COUNT * weeks;
    let mut nu_end = vec![0.0; cells];
    let mut nu_epi = vec![0.0; cells];
    for t in 1..=weeks {
        for i in 0..n {
            for g in GroupKey::ALL {
                let pop = population.get(i, g);
                let male = g.is_male() as u8 as f64;
                let older = g.is_older() as u8 as f64;
                let mut end = week_effects[t - 1]
                    + config.theta_gen * male
                    + config.theta_age * older
                    + config.theta_age_gen * male * older
                    + f_coord[i]
                    + f_social[i]
                    + a[i]
                    + pop.ln();
                let mut epi = 0.0;
                if t >= 2 {
                    end += config.gini_effect * features.gini_std.get(i, t - 1)
                        + config.staying_put_effect * features.staying_put_std.get(i, t - 1);
                    if t == weeks {
                        end += b[i];
                    }
                    let prev = 10_000.0 * panel.count(i, g, t - 1) as f64 / pop;
                    epi = config.theta_ar * (prev + config.c).ln();
                }
                let mu = (end + epi).exp();
                if !(mu <= 1e9) {
                    return Err(Error::invalid(format!(
                        "simulated mean {mu:.3e} exceeds 1e9; use smaller coefficients"
                    )));
                }
                let k = (i * GroupKey::COUNT + g.index()) * weeks + t - 1;
                nu_end[k] = end;
                nu_epi[k] = epi;
                panel.set_count(i, g, t, sample_nb(&mut count_rng, mu, config.phi));
            }
        }
    }
    let panel = compute_rates(panel, &population)?;

    let mut coefficients = Vec::new();
    for t in 2..=weeks {
        coefficients.push((format!("week_{t}"), week_effects[t - 1]));
    }
    coefficients.push(("male".into(), config.theta_gen));
    coefficients.push(("age36_59".into(), config.theta_age));
    coefficients.push(("age36_59:male".into(), config.theta_age_gen));
    for t in 2..=weeks {
        coefficients.push((format!("gini:week_{t}"), config.gini_effect));
    }
    for t in 2..=weeks {
        coefficients.push((format!("staying_put:week_{t}"), config.staying_put_effect));
    }
    coefficients.push(("ar".into(), config.theta_ar));

    let state_delay_effects: Vec<f64> = (0..registry.states().len())
        .map(|_| config.delay.state_sd * std.sample(&mut re_rng))
        .collect();

    Ok(SimulatedData {
        registry,
        population,
        calendar,
        colocation,
        staying_put,
        connectedness,
        panel,
        truth: SyntheticTruth {
            a,
            b,
            features,
            social,
            f_coord,
            f_social,
            week_effects,
            nu_end,
            nu_epi,
            coefficients,
            state_delay_effects,
        },
    })
}

/// Delay mean and overdispersion for a case under the simulation truth.
pub fn delay_parameters(config: &SimulationConfig, truth: &SyntheticTruth, state: usize, group: GroupKey) -> (f64, f64) {
    let d = &config.delay;
    let male = g_flag(group.is_male());
    let older = g_flag(group.is_older());
    let mu = (d.intercept + d.male * male + d.older * older + truth.state_delay_effects[state]).exp();
    let sigma = (d.log_sigma + d.sigma_older * older).exp();
    (mu, sigma)
}

fn g_flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Expands the panel into a line list: onsets uniform within the onset week,
/// report date = onset + NB delay (+ shift). All onsets are present.
pub fn simulate_line_list(data: &SimulatedData, config: &SimulationConfig) -> Result<Vec<CaseRecord>> {
    let mut rng = substream(config.seed, 4);
    let states = data.registry.states();
    let mut out = Vec::with_capacity(data.panel.total() as usize);
    for (i, g, t, count) in data.panel.cells() {
        let d = &data.registry.districts()[i];
        let s = states.iter().position(|x| *x == d.state_id).expect("registry state");
        let (mu, sigma) = delay_parameters(config, &data.truth, s, g);
        for _ in 0..count {
            let onset = data.calendar.start(t) + chrono::Duration::days(rng.random_range(0..7));
            let delay = sample_nb(&mut rng, mu, 1.0 / sigma) as i64 + config.delay.shift.max(0);
            let report = onset + chrono::Duration::days(delay);
            out.push(CaseRecord::new(
                format!("C{:07}", out.len() + 1),
                d.district_id.clone(),
                d.state_id.clone(),
                g,
                report,
                Some(onset),
            )?);
        }
    }
    Ok(out)
}

/// Blanks onset dates independently. With `mar_strength = 0` every case is
/// blanked with probability `fraction`; otherwise the log-odds are shifted by
/// `±mar_strength/2` for the older/younger age band.
pub fn apply_missingness(records: &[CaseRecord], fraction: f64, mar_strength: f64, seed: u64) -> Result<Vec<CaseRecord>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid("missing fraction must lie in [0, 1)"));
    }
    let mut rng = substream(seed, 5);
    let base = if fraction > 0.0 { (fraction / (1.0 - fraction)).ln() } else { f64::NEG_INFINITY };
    Ok(records
        .iter()
        .map(|r| {
            let shift = if r.group.is_older() { 0.5 } else { -0.5 } * mar_strength;
            let p = if fraction > 0.0 { 1.0 / (1.0 + (-(base + shift)).exp()) } else { 0.0 };
            let u: f64 = rng.random();
            let mut out = r.clone();
            if u < p {
                out.onset_date = None;
            }
            out
        })
        .collect())
}
