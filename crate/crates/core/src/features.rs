//! Co-location Gini index and weekly feature series.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::io::parse_date;
use crate::panel::{DistrictRegistry, WeekCalendar};

/// Co-location probabilities for one week; `p[(i, j)]` is the probability
/// that a person from district `i` meets a person from district `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoLocationMatrix {
    pub week: usize,
    pub p: DMatrix<f64>,
}

impl CoLocationMatrix {
    pub fn new(week: usize, p: DMatrix<f64>) -> Result<Self> {
        if !p.is_square() {
            return Err(Error::invalid("co-location matrix must be square"));
        }
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!(
                "co-location matrix for week {week} has negative or non-finite entries"
            )));
        }
        Ok(CoLocationMatrix { week, p })
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Gini,
    StayingPut,
}

/// District × week feature values; `values[i][t - 1]` is district `i` in week `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pub district_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub kind: FeatureKind,
    pub standardized: bool,
}

impl FeatureSeries {
    pub fn weeks(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn get(&self, district: usize, week: usize) -> f64 {
        self.values[district][week - 1]
    }

    fn week_column(&self, week: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[week - 1]).collect()
    }
}

/// Gini concentration of district `i`'s co-location row over the other
/// districts. Sums run over ordered pairs `(m, l)` with `m, l ≠ i`; the
/// diagonal entry is ignored. The value lies in `[0, (n−2)/(n−1)]`.
pub fn gini_index(p: &CoLocationMatrix, i: usize) -> Result<f64> {
    let n = p.n();
    if i >= n {
        return Err(Error::invalid(format!("district index {i} out of range")));
    }
    let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| p.p[(i, j)]).collect();
    let total: f64 = others.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateRow(i));
    }
    // Σ_{m,l} |x_m − x_l| = 2 Σ_k (2k − m + 1) x_(k) over the sorted values
    others.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = others.len() as f64;
    let pair_sum: f64 = others
        .iter()
        .enumerate()
        .map(|(k, &x)| (2.0 * k as f64 - m + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok(pair_sum / (2.0 * (n as f64 - 1.0) * total))
}

/// Gini series over all weeks for every district.
pub fn gini_series(matrices: &[CoLocationMatrix], district_ids: &[String]) -> Result<FeatureSeries> {
    let n = district_ids.len();
    let mut values = vec![Vec::with_capacity(matrices.len()); n];
    for (w, m) in matrices.iter().enumerate() {
        if m.week != w + 1 {
            return Err(Error::invalid(format!(
                "co-location weeks must be consecutive from 1, found week {} at position {}",
                m.week,
                w + 1
            )));
        }
        if m.n() != n {
            return Err(Error::invalid(format!(
                "co-location matrix for week {} has {} districts, registry has {n}",
                m.week,
                m.n()
            )));
        }
        for (i, row) in values.iter_mut().enumerate() {
            row.push(gini_index(m, i)?);
        }
    }
    Ok(FeatureSeries {
        district_ids: district_ids.to_vec(),
        values,
        kind: FeatureKind::Gini,
        standardized: false,
    })
}

/// Per-week centering and scaling by the cross-district sample mean and
/// standard deviation (divisor n−1). Weeks with zero spread map to zeros.
pub fn weekly_standardize(series: &FeatureSeries) -> Result<FeatureSeries> {
    if series.standardized {
        return Err(Error::invalid("series is already standardized"));
    }
    let n = series.values.len();
    if n < 2 {
        return Err(Error::invalid("standardization needs at least two districts"));
    }
    let mut out = series.clone();
    for week in 1..=series.weeks() {
        let col = series.week_column(week);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite feature value in week {week}")));
        }
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sd = var.sqrt();
        let degenerate = sd <= 1e-14 * mean.abs().max(1.0);
        for (i, v) in col.iter().enumerate() {
            out.values[i][week - 1] = if degenerate { 0.0 } else { (v - mean) / sd };
        }
    }
    out.standardized = true;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DailyValue {
    pub district: usize,
    pub date: NaiveDate,
    pub value: f64,
}

/// Arithmetic mean of the available daily values per district and week for
/// weeks `1..=weeks`. Days outside those weeks are ignored.
pub fn weekly_average(
    daily: &[DailyValue],
    district_ids: &[String],
    calendar: &WeekCalendar,
    weeks: usize,
    kind: FeatureKind,
) -> Result<FeatureSeries> {
    let n = district_ids.len();
    let mut sums = vec![vec![0.0; weeks]; n];
    let mut counts = vec![vec![0usize; weeks]; n];
    for d in daily {
        if d.district >= n {
            return Err(Error::invalid(format!("district index {} out of range", d.district)));
        }
        let days = (d.date - calendar.anchor).num_days();
        if days < 0 {
            continue;
        }
        let week = (days / 7) as usize + 1;
        if week > weeks {
            continue;
        }
        sums[d.district][week - 1] += d.value;
        counts[d.district][week - 1] += 1;
    }
    let mut values = vec![vec![0.0; weeks]; n];
    for i in 0..n {
        for w in 0..weeks {
            if counts[i][w] == 0 {
                return Err(Error::MissingFeature {
                    district: district_ids[i].clone(),
                    week: w + 1,
                });
            }
            values[i][w] = sums[i][w] / counts[i][w] as f64;
        }
    }
    Ok(FeatureSeries {
        district_ids: district_ids.to_vec(),
        values,
        kind,
        standardized: false,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CoLocationRow {
    week: usize,
    src_district: String,
    dst_district: String,
    probability: f64,
}

/// Reads `week,src_district,dst_district,probability`; absent pairs are zero.
pub fn parse_colocation<R: Read>(reader: R, registry: &DistrictRegistry) -> Result<Vec<CoLocationMatrix>> {
    let n = registry.len();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut by_week: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
    for (k, row) in rdr.deserialize::<CoLocationRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: k + 2,
            message: e.to_string(),
        })?;
        let i = registry
            .position(&row.src_district)
            .ok_or_else(|| Error::UnknownDistrict(row.src_district.clone()))?;
        let j = registry
            .position(&row.dst_district)
            .ok_or_else(|| Error::UnknownDistrict(row.dst_district.clone()))?;
        by_week
            .entry(row.week)
            .or_insert_with(|| DMatrix::zeros(n, n))[(i, j)] = row.probability;
    }
    by_week
        .into_iter()
        .map(|(week, p)| CoLocationMatrix::new(week, p))
        .collect()
}

pub fn write_colocation<W: Write>(
    writer: W,
    registry: &DistrictRegistry,
    matrices: &[CoLocationMatrix],
) -> Result<()> {
    let ids = registry.ids();
    let mut wtr = csv::Writer::from_writer(writer);
    for m in matrices {
        for i in 0..m.n() {
            for j in 0..m.n() {
                if i != j && m.p[(i, j)] != 0.0 {
                    wtr.serialize(CoLocationRow {
                        week: m.week,
                        src_district: ids[i].clone(),
                        dst_district: ids[j].clone(),
                        probability: m.p[(i, j)],
                    })?;
                }
            }
        }
    }
    wtr.flush().map_err(|e| Error::io("co-location", e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct StayingPutRow {
    date: String,
    district_id: String,
    fraction: f64,
}

pub fn parse_staying_put<R: Read>(reader: R, registry: &DistrictRegistry) -> Result<Vec<DailyValue>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (k, row) in rdr.deserialize::<StayingPutRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: k + 2,
            message: e.to_string(),
        })?;
        let date = parse_date(&row.date).map_err(|message| Error::Parse { line: k + 2, message })?;
        let district = registry
            .position(&row.district_id)
            .ok_or_else(|| Error::UnknownDistrict(row.district_id.clone()))?;
        out.push(DailyValue {
            district,
            date,
            value: row.fraction,
        });
    }
    Ok(out)
}

pub fn write_staying_put<W: Write>(writer: W, registry: &DistrictRegistry, daily: &[DailyValue]) -> Result<()> {
    let ids = registry.ids();
    let mut wtr = csv::Writer::from_writer(writer);
    for d in daily {
        wtr.serialize(StayingPutRow {
            date: d.date.to_string(),
            district_id: ids[d.district].clone(),
            fraction: d.value,
        })?;
    }
    wtr.flush().map_err(|e| Error::io("staying put", e))?;
    Ok(())
}

/// Weekly feature table as written by the `features` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub district_id: String,
    pub week: usize,
    pub gini: f64,
    pub gini_std: f64,
    pub staying_put: f64,
    pub staying_put_std: f64,
}

/// Raw and standardized Gini and staying-put series for the model frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub gini: FeatureSeries,
    pub gini_std: FeatureSeries,
    pub staying_put: FeatureSeries,
    pub staying_put_std: FeatureSeries,
}

impl FeatureSet {
    pub fn from_raw(gini: FeatureSeries, staying_put: FeatureSeries) -> Result<Self> {
        if gini.weeks() != staying_put.weeks() || gini.district_ids != staying_put.district_ids {
            return Err(Error::invalid("gini and staying-put series do not align"));
        }
        Ok(FeatureSet {
            gini_std: weekly_standardize(&gini)?,
            staying_put_std: weekly_standardize(&staying_put)?,
            gini,
            staying_put,
        })
    }

    pub fn rows(&self) -> Vec<FeatureRow> {
        let mut out = Vec::new();
        for (i, id) in self.gini.district_ids.iter().enumerate() {
            for w in 1..=self.gini.weeks() {
                out.push(FeatureRow {
                    district_id: id.clone(),
                    week: w,
                    gini: self.gini.get(i, w),
                    gini_std: self.gini_std.get(i, w),
                    staying_put: self.staying_put.get(i, w),
                    staying_put_std: self.staying_put_std.get(i, w),
                });
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for r in self.rows() {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io("features", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, registry: &DistrictRegistry) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let rows: Vec<FeatureRow> = rdr
            .deserialize()
            .enumerate()
            .map(|(k, r)| {
                r.map_err(|e: csv::Error| Error::Parse {
                    line: k + 2,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        let weeks = rows.iter().map(|r| r.week).max().unwrap_or(0);
        let n = registry.len();
        let mut grid = vec![vec![[f64::NAN; 4]; weeks]; n];
        for r in &rows {
            let i = registry
                .position(&r.district_id)
                .ok_or_else(|| Error::UnknownDistrict(r.district_id.clone()))?;
            if r.week == 0 {
                return Err(Error::invalid("feature weeks are 1-based"));
            }
            grid[i][r.week - 1] = [r.gini, r.gini_std, r.staying_put, r.staying_put_std];
        }
        let ids = registry.ids();
        let series = |slot: usize, kind: FeatureKind, standardized: bool| FeatureSeries {
            district_ids: ids.clone(),
            values: grid
                .iter()
                .map(|row| row.iter().map(|v| v[slot]).collect())
                .collect(),
            kind,
            standardized,
        };
        Ok(FeatureSet {
            gini: series(0, FeatureKind::Gini, false),
            gini_std: series(1, FeatureKind::Gini, true),
            staying_put: series(2, FeatureKind::StayingPut, false),
            staying_put_std: series(3, FeatureKind::StayingPut, true),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row_matrix(row: &[f64]) -> CoLocationMatrix {
        // district 0 carries `row` on its off-diagonal
        let n = row.len() + 1;
        let mut p = DMatrix::zeros(n, n);
        for (k, &v) in row.iter().enumerate() {
            p[(0, k + 1)] = v;
        }
        p[(0, 0)] = 0.9;
        CoLocationMatrix::new(1, p).unwrap()
    }

    fn gini_oracle(row: &[f64], n: usize) -> f64 {
        let mut num = 0.0;
        for &a in row {
            for &b in row {
                num += (a - b).abs();
            }
        }
        num / (2.0 * (n as f64 - 1.0) * row.iter().sum::<f64>())
    }

    #[test]
    fn gini_small_cases() {
        assert_eq!(gini_index(&row_matrix(&[0.5, 0.5]), 0).unwrap(), 0.0);
        assert!((gini_index(&row_matrix(&[1.0, 0.0]), 0).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            gini_index(&row_matrix(&[0.0, 0.0]), 0),
            Err(Error::DegenerateRow(0))
        ));
    }

    #[test]
    fn gini_matches_double_loop_n6() {
        let row = [0.11, 0.02, 0.4, 0.07, 0.3];
        let g = gini_index(&row_matrix(&row), 0).unwrap();
        assert!((g - gini_oracle(&row, 6)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn gini_scale_invariant(row in prop::collection::vec(0.0f64..1.0, 2..10), alpha in 0.01f64..100.0) {
            prop_assume!(row.iter().sum::<f64>() > 1e-6);
            let scaled: Vec<f64> = row.iter().map(|v| v * alpha).collect();
            let a = gini_index(&row_matrix(&row), 0).unwrap();
            let b = gini_index(&row_matrix(&scaled), 0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            let n = row.len() + 1;
            prop_assert!(a >= -1e-15 && a <= (n as f64 - 2.0) / (n as f64 - 1.0) + 1e-12);
        }

        #[test]
        fn standardization_ignores_shifts(vals in prop::collection::vec(-5.0f64..5.0, 3..12), shift in -10.0f64..10.0) {
            let mk = |v: Vec<f64>| FeatureSeries {
                district_ids: (0..v.len()).map(|i| i.to_string()).collect(),
                values: v.into_iter().map(|x| vec![x]).collect(),
                kind: FeatureKind::Gini,
                standardized: false,
            };
            let a = weekly_standardize(&mk(vals.clone())).unwrap();
            let b = weekly_standardize(&mk(vals.iter().map(|v| v + shift).collect())).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x[0] - y[0]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gini_extremes() {
        let uniform = row_matrix(&[0.2; 7]);
        assert!(gini_index(&uniform, 0).unwrap().abs() < 1e-15);
        let mut single = [0.0; 7];
        single[3] = 0.4;
        let g = gini_index(&row_matrix(&single), 0).unwrap();
        assert!((g - 6.0 / 7.0).abs() < 1e-15);
    }

    fn series(values: Vec<Vec<f64>>) -> FeatureSeries {
        FeatureSeries {
            district_ids: (0..values.len()).map(|i| format!("d{i}")).collect(),
            values,
            kind: FeatureKind::Gini,
            standardized: false,
        }
    }

    #[test]
    fn standardize_examples() {
        let s = series(vec![vec![1.0, 4.0], vec![2.0, 4.0], vec![3.0, 4.0]]);
        let z = weekly_standardize(&s).unwrap();
        assert_eq!(z.values, vec![vec![-1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert!(weekly_standardize(&z).is_err());
        assert!(weekly_standardize(&series(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn standardize_is_idempotent_and_moments_exact() {
        let s = series(vec![vec![0.3], vec![0.9], vec![0.1], vec![0.55], vec![0.42]]);
        let z = weekly_standardize(&s).unwrap();
        let col: Vec<f64> = z.values.iter().map(|r| r[0]).collect();
        let mean = col.iter().sum::<f64>() / 5.0;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
        let mut again = z.clone();
        again.standardized = false;
        let zz = weekly_standardize(&again).unwrap();
        for (a, b) in z.values.iter().zip(&zz.values) {
            assert!((a[0] - b[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn weekly_average_examples() {
        let anchor = NaiveDate::from_ymd_opt(2020, 3, 3).unwrap();
        let cal = WeekCalendar::new(anchor, 2).unwrap();
        let ids = vec!["a".to_string()];
        let day = |k: i64, v: f64| DailyValue {
            district: 0,
            date: anchor + chrono::Duration::days(k),
            value: v,
        };
        let constant: Vec<_> = (0..7).map(|k| day(k, 0.25)).collect();
        let s = weekly_average(&constant, &ids, &cal, 1, FeatureKind::StayingPut).unwrap();
        assert_eq!(s.values[0][0], 0.25);
        let two = vec![day(8, 20.0), day(10, 10.0), day(0, 1.0)];
        let s = weekly_average(&two, &ids, &cal, 2, FeatureKind::StayingPut).unwrap();
        assert_eq!(s.values[0][1], 15.0);
        let reversed: Vec<_> = two.iter().rev().cloned().collect();
        assert_eq!(weekly_average(&reversed, &ids, &cal, 2, FeatureKind::StayingPut).unwrap(), s);
        match weekly_average(&two[..1], &ids, &cal, 2, FeatureKind::StayingPut) {
            Err(Error::MissingFeature { district, week }) => assert_eq!((district.as_str(), week), ("a", 1)),
            other => panic!("{other:?}"),
        }
    }
}
