//! CSV readers and writers for line lists, registries and population tables.

use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{CaseRecord, District, DistrictRegistry, GroupKey, PopulationTable};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct LineListRow {
    case_id: String,
    district_id: String,
    state_id: String,
    age_band: String,
    gender: String,
    report_date: String,
    onset_date: String,
}

#[derive(Debug, Serialize)]
struct LineListOut<'a> {
    case_id: &'a str,
    district_id: &'a str,
    state_id: &'a str,
    age_band: &'a str,
    gender: &'a str,
    report_date: String,
    onset_date: String,
}

#[derive(Debug, Serialize)]
struct ImputedOut<'a> {
    case_id: &'a str,
    district_id: &'a str,
    state_id: &'a str,
    age_band: &'a str,
    gender: &'a str,
    report_date: String,
    onset_date: String,
    k: usize,
}

pub fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| format!("bad date '{s}': {e}"))
}

/// Line number of a csv record (header is line 1).
fn line_of(pos: Option<&csv::Position>, fallback: usize) -> usize {
    pos.map(|p| p.line() as usize).unwrap_or(fallback)
}

/// Parses a line list. Every district must resolve in `registry`; unknown
/// ids are collected and reported together.
pub fn parse_line_list<R: Read>(reader: R, registry: &DistrictRegistry) -> Result<Vec<CaseRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    let mut unknown: Vec<String> = Vec::new();
    for (k, row) in rdr.deserialize::<LineListRow>().enumerate() {
        let fallback = k + 2;
        let row = row.map_err(|e| Error::Parse {
            line: line_of(e.position(), fallback),
            message: e.to_string(),
        })?;
        let parse = |s: &str| parse_date(s).map_err(|message| Error::Parse { line: fallback, message });
        let report = parse(&row.report_date)?;
        let onset = if row.onset_date.is_empty() {
            None
        } else {
            Some(parse(&row.onset_date)?)
        };
        let group = GroupKey::parse(&row.age_band, &row.gender).map_err(|e| Error::Parse {
            line: fallback,
            message: e.to_string(),
        })?;
        if registry.position(&row.district_id).is_none() {
            if !unknown.contains(&row.district_id) {
                unknown.push(row.district_id.clone());
            }
            continue;
        }
        let record = CaseRecord::new(row.case_id, row.district_id, row.state_id, group, report, onset)
            .map_err(|e| Error::Parse {
                line: fallback,
                message: e.to_string(),
            })?;
        out.push(record);
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownDistrict(unknown.join(", ")));
    }
    Ok(out)
}

/// Writes a line list; with `k` set, an imputation index column is appended.
pub fn write_line_list<W: Write>(writer: W, records: &[CaseRecord], k: Option<usize>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for r in records {
        let onset = r.onset_date.map(|d| d.to_string()).unwrap_or_default();
        match k {
            None => wtr.serialize(LineListOut {
                case_id: &r.case_id,
                district_id: &r.district_id,
                state_id: &r.state_id,
                age_band: r.group.age_label(),
                gender: r.group.gender_label(),
                report_date: r.report_date.to_string(),
                onset_date: onset,
            })?,
            Some(k) => wtr.serialize(ImputedOut {
                case_id: &r.case_id,
                district_id: &r.district_id,
                state_id: &r.state_id,
                age_band: r.group.age_label(),
                gender: r.group.gender_label(),
                report_date: r.report_date.to_string(),
                onset_date: onset,
                k,
            })?,
        }
    }
    if records.is_empty() {
        let header: &[&str] = if k.is_some() {
            &["case_id", "district_id", "state_id", "age_band", "gender", "report_date", "onset_date", "k"]
        } else {
            &["case_id", "district_id", "state_id", "age_band", "gender", "report_date", "onset_date"]
        };
        wtr.write_record(header)?;
    }
    wtr.flush().map_err(|e| Error::io("line list", e))?;
    Ok(())
}

pub fn parse_registry<R: Read>(reader: R) -> Result<DistrictRegistry> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut districts = Vec::new();
    for (k, row) in rdr.deserialize::<District>().enumerate() {
        districts.push(row.map_err(|e| Error::Parse {
            line: line_of(e.position(), k + 2),
            message: e.to_string(),
        })?);
    }
    DistrictRegistry::new(districts)
}

pub fn write_registry<W: Write>(writer: W, registry: &DistrictRegistry) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for d in registry.districts() {
        wtr.serialize(d)?;
    }
    wtr.flush().map_err(|e| Error::io("registry", e))?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct PopulationRow {
    district_id: String,
    age_band: String,
    gender: String,
    population: f64,
}

pub fn parse_population<R: Read>(reader: R, registry: &DistrictRegistry) -> Result<PopulationTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut entries = Vec::new();
    for (k, row) in rdr.deserialize::<PopulationRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: line_of(e.position(), k + 2),
            message: e.to_string(),
        })?;
        let group = GroupKey::parse(&row.age_band, &row.gender).map_err(|e| Error::Parse {
            line: k + 2,
            message: e.to_string(),
        })?;
        entries.push((row.district_id, group, row.population));
    }
    PopulationTable::from_entries(registry, entries)
}

pub fn write_population<W: Write>(
    writer: W,
    registry: &DistrictRegistry,
    population: &PopulationTable,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (i, d) in registry.districts().iter().enumerate() {
        for g in GroupKey::ALL {
            wtr.serialize(PopulationRow {
                district_id: d.district_id.clone(),
                age_band: g.age_label().to_string(),
                gender: g.gender_label().to_string(),
                population: population.get(i, g),
            })?;
        }
    }
    wtr.flush().map_err(|e| Error::io("population", e))?;
    Ok(())
}
