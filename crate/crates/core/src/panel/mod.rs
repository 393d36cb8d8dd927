//! Case line lists, district registry and the weekly district × group panel.

mod frame;
pub mod io;

use std::collections::HashMap;
use std::fmt;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use frame::{assemble_model_frame, ColumnBlock, FrameSpec, FrameTerms, ModelFrame, RowKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeBand {
    #[serde(rename = "15-35")]
    Young,
    #[serde(rename = "36-59")]
    Middle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    #[serde(rename = "female")]
    Female,
    #[serde(rename = "male")]
    Male,
}

/// Age/gender stratum. `GroupKey::ALL[0]` (15–35, female) is the reference level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub age_band: AgeBand,
    pub gender: Gender,
}

impl GroupKey {
    pub const COUNT: usize = 4;

    pub const ALL: [GroupKey; 4] = [
        GroupKey::new(AgeBand::Young, Gender::Female),
        GroupKey::new(AgeBand::Young, Gender::Male),
        GroupKey::new(AgeBand::Middle, Gender::Female),
        GroupKey::new(AgeBand::Middle, Gender::Male),
    ];

    pub const fn new(age_band: AgeBand, gender: Gender) -> Self {
        GroupKey { age_band, gender }
    }

    pub fn index(self) -> usize {
        match (self.age_band, self.gender) {
            (AgeBand::Young, Gender::Female) => 0,
            (AgeBand::Young, Gender::Male) => 1,
            (AgeBand::Middle, Gender::Female) => 2,
            (AgeBand::Middle, Gender::Male) => 3,
        }
    }

    pub fn is_male(self) -> bool {
        self.gender == Gender::Male
    }

    pub fn is_older(self) -> bool {
        self.age_band == AgeBand::Middle
    }

    pub fn parse(age_band: &str, gender: &str) -> Result<Self> {
        let age_band = match age_band.trim() {
            "15-35" | "15–35" | "A15-A35" => AgeBand::Young,
            "36-59" | "36–59" | "A35-A59" => AgeBand::Middle,
            other => return Err(Error::invalid(format!("unknown age band '{other}'"))),
        };
        let gender = match gender.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Gender::Female,
            "male" | "m" => Gender::Male,
            other => return Err(Error::invalid(format!("unknown gender '{other}'"))),
        };
        Ok(GroupKey::new(age_band, gender))
    }

    pub fn age_label(self) -> &'static str {
        match self.age_band {
            AgeBand::Young => "15-35",
            AgeBand::Middle => "36-59",
        }
    }

    pub fn gender_label(self) -> &'static str {
        match self.gender {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.age_label(), self.gender_label())
    }
}

pub fn is_weekend(date: NaiveDate) -> bool {
    matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub district_id: String,
    pub state_id: String,
    pub group: GroupKey,
    pub report_date: NaiveDate,
    pub onset_date: Option<NaiveDate>,
    pub weekend_flag: bool,
}

impl CaseRecord {
    pub fn new(
        case_id: impl Into<String>,
        district_id: impl Into<String>,
        state_id: impl Into<String>,
        group: GroupKey,
        report_date: NaiveDate,
        onset_date: Option<NaiveDate>,
    ) -> Result<Self> {
        if let Some(onset) = onset_date {
            if onset > report_date {
                return Err(Error::invalid(format!(
                    "onset {onset} after report date {report_date}"
                )));
            }
        }
        Ok(CaseRecord {
            case_id: case_id.into(),
            district_id: district_id.into(),
            state_id: state_id.into(),
            group,
            report_date,
            onset_date,
            weekend_flag: is_weekend(report_date),
        })
    }

    /// Days between onset and report, when the onset is known.
    pub fn delay(&self) -> Option<i64> {
        self.onset_date
            .map(|onset| (self.report_date - onset).num_days())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct District {
    pub district_id: String,
    pub state_id: String,
    pub lon: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistrictRegistry {
    districts: Vec<District>,
    index: HashMap<String, usize>,
    states: Vec<String>,
}

impl DistrictRegistry {
    pub fn new(districts: Vec<District>) -> Result<Self> {
        if districts.len() <= 2 {
            return Err(Error::invalid("registry needs more than two districts"));
        }
        let mut index = HashMap::with_capacity(districts.len());
        for (i, d) in districts.iter().enumerate() {
            if index.insert(d.district_id.clone(), i).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate district id '{}'",
                    d.district_id
                )));
            }
            if !(d.lon.is_finite() && d.lat.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite centroid for district '{}'",
                    d.district_id
                )));
            }
        }
        let mut states: Vec<String> = districts.iter().map(|d| d.state_id.clone()).collect();
        states.sort();
        states.dedup();
        Ok(DistrictRegistry {
            districts,
            index,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.districts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.districts.is_empty()
    }

    pub fn districts(&self) -> &[District] {
        &self.districts
    }

    pub fn position(&self, district_id: &str) -> Option<usize> {
        self.index.get(district_id).copied()
    }

    pub fn ids(&self) -> Vec<String> {
        self.districts.iter().map(|d| d.district_id.clone()).collect()
    }

    /// Sorted distinct state ids.
    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn coordinates(&self) -> Vec<[f64; 2]> {
        self.districts.iter().map(|d| [d.lon, d.lat]).collect()
    }
}

/// Population per district (registry order) and group (`GroupKey::index`).
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTable {
    values: Vec<[f64; GroupKey::COUNT]>,
}

impl PopulationTable {
    pub fn from_entries(
        registry: &DistrictRegistry,
        entries: impl IntoIterator<Item = (String, GroupKey, f64)>,
    ) -> Result<Self> {
        let mut values = vec![[f64::NAN; GroupKey::COUNT]; registry.len()];
        for (id, group, pop) in entries {
            let i = registry
                .position(&id)
                .ok_or_else(|| Error::UnknownDistrict(id.clone()))?;
            if !(pop > 0.0) || !pop.is_finite() {
                return Err(Error::invalid(format!(
                    "population for {id} {group} must be positive, got {pop}"
                )));
            }
            values[i][group.index()] = pop;
        }
        for (i, row) in values.iter().enumerate() {
            for (g, v) in row.iter().enumerate() {
                if v.is_nan() {
                    return Err(Error::invalid(format!(
                        "population missing for district '{}' group {}",
                        registry.districts()[i].district_id,
                        GroupKey::ALL[g]
                    )));
                }
            }
        }
        Ok(PopulationTable { values })
    }

    pub fn get(&self, district: usize, group: GroupKey) -> f64 {
        self.values[district][group.index()]
    }

    pub fn districts(&self) -> usize {
        self.values.len()
    }
}

/// Fixed seven-day weeks starting at `anchor`; week 1 covers `anchor..anchor+7`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeekCalendar {
    pub anchor: NaiveDate,
    pub weeks: usize,
}

impl WeekCalendar {
    pub fn new(anchor: NaiveDate, weeks: usize) -> Result<Self> {
        if weeks < 2 {
            return Err(Error::invalid("week calendar needs at least two weeks"));
        }
        Ok(WeekCalendar { anchor, weeks })
    }

    /// 1-based week index of `date`, or `None` outside the calendar.
    pub fn week_of(&self, date: NaiveDate) -> Option<usize> {
        let days = (date - self.anchor).num_days();
        if days < 0 {
            return None;
        }
        let week = (days / 7) as usize + 1;
        (week <= self.weeks).then_some(week)
    }

    pub fn start(&self, week: usize) -> NaiveDate {
        self.anchor + chrono::Duration::days(7 * (week as i64 - 1))
    }

    pub fn end(&self) -> NaiveDate {
        self.start(self.weeks) + chrono::Duration::days(6)
    }
}

/// Weekly counts (and optionally rates per 10,000) per district × group.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveillancePanel {
    district_ids: Vec<String>,
    calendar: WeekCalendar,
    counts: Vec<u64>,
    rates: Option<Vec<f64>>,
    /// Records dropped during aggregation because their onset fell outside the calendar.
    pub dropped: usize,
}

impl SurveillancePanel {
    pub fn zeros(district_ids: Vec<String>, calendar: WeekCalendar) -> Self {
        let len = district_ids.len() * GroupKey::COUNT * calendar.weeks;
        SurveillancePanel {
            district_ids,
            calendar,
            counts: vec![0; len],
            rates: None,
            dropped: 0,
        }
    }

    fn idx(&self, district: usize, group: GroupKey, week: usize) -> usize {
        debug_assert!(week >= 1 && week <= self.calendar.weeks);
        (district * GroupKey::COUNT + group.index()) * self.calendar.weeks + (week - 1)
    }

    pub fn districts(&self) -> usize {
        self.district_ids.len()
    }

    pub fn district_ids(&self) -> &[String] {
        &self.district_ids
    }

    pub fn weeks(&self) -> usize {
        self.calendar.weeks
    }

    pub fn calendar(&self) -> WeekCalendar {
        self.calendar
    }

    pub fn count(&self, district: usize, group: GroupKey, week: usize) -> u64 {
        self.counts[self.idx(district, group, week)]
    }

    pub fn set_count(&mut self, district: usize, group: GroupKey, week: usize, value: u64) {
        let i = self.idx(district, group, week);
        self.counts[i] = value;
        self.rates = None;
    }

    pub fn rate(&self, district: usize, group: GroupKey, week: usize) -> Option<f64> {
        self.rates
            .as_ref()
            .map(|r| r[self.idx(district, group, week)])
    }

    pub fn has_rates(&self) -> bool {
        self.rates.is_some()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Iterates `(district, group, week, count)` over every cell.
    pub fn cells(&self) -> impl Iterator<Item = (usize, GroupKey, usize, u64)> + '_ {
        (0..self.districts()).flat_map(move |i| {
            GroupKey::ALL.into_iter().flat_map(move |g| {
                (1..=self.weeks()).map(move |t| (i, g, t, self.count(i, g, t)))
            })
        })
    }
}

/// Counts records per (district, group, onset week). Records whose onset lies
/// outside the calendar are dropped and tallied in `dropped`.
pub fn aggregate_panel(
    records: &[CaseRecord],
    registry: &DistrictRegistry,
    calendar: WeekCalendar,
) -> Result<SurveillancePanel> {
    let mut panel = SurveillancePanel::zeros(registry.ids(), calendar);
    let mut dropped = 0;
    for r in records {
        let onset = r.onset_date.ok_or_else(|| {
            Error::invalid(format!("case '{}' has no onset date", r.case_id))
        })?;
        let district = registry
            .position(&r.district_id)
            .ok_or_else(|| Error::UnknownDistrict(r.district_id.clone()))?;
        match calendar.week_of(onset) {
            Some(week) => {
                let i = panel.idx(district, r.group, week);
                panel.counts[i] += 1;
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::info!("aggregation dropped {dropped} case(s) with onset outside the study window");
    }
    panel.dropped = dropped;
    Ok(panel)
}

/// Fills rates per 10,000 inhabitants: `10_000 · count / population`.
pub fn compute_rates(
    mut panel: SurveillancePanel,
    population: &PopulationTable,
) -> Result<SurveillancePanel> {
    if population.districts() != panel.districts() {
        return Err(Error::invalid("population table does not match the panel"));
    }
    let mut rates = vec![0.0; panel.counts.len()];
    for i in 0..panel.districts() {
        for g in GroupKey::ALL {
            let pop = population.get(i, g);
            if !(pop > 0.0) {
                return Err(Error::invalid(format!(
                    "non-positive population for district {} group {g}",
                    panel.district_ids[i]
                )));
            }
            for t in 1..=panel.weeks() {
                let k = panel.idx(i, g, t);
                rates[k] = 10_000.0 * panel.counts[k] as f64 / pop;
            }
        }
    }
    panel.rates = Some(rates);
    Ok(panel)
}
