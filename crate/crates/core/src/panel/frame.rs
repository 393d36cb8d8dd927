use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{DistrictRegistry, GroupKey, PopulationTable, SurveillancePanel};
use crate::basis::{ridge_block, thinplate_block, SmoothSpec, ThinPlateBasis};
use crate::engine::{PenalizedProblem, PenaltyTerm};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::linalg::{Design, GroupedBlock};

/// Which terms enter the infection model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameTerms {
    pub groups: bool,
    pub gini: bool,
    pub staying_put: bool,
    pub autoregressive: bool,
    pub coord: bool,
    pub social: bool,
    pub random_a: bool,
    pub random_b: bool,
}

impl Default for FrameTerms {
    fn default() -> Self {
        FrameTerms {
            groups: true,
            gini: true,
            staying_put: true,
            autoregressive: true,
            coord: true,
            social: true,
            random_a: true,
            random_b: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameSpec {
    pub coord: SmoothSpec,
    pub social: SmoothSpec,
    pub terms: FrameTerms,
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec {
            coord: SmoothSpec::thinplate(30),
            social: SmoothSpec::thinplate(30),
            terms: FrameTerms::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowKey {
    pub district: usize,
    pub group: GroupKey,
    pub week: usize,
}

/// Column block of the design.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnBlock {
    pub label: String,
    pub columns: Range<usize>,
}

/// Lagged design for weeks `2..=T`: one row per district × group × week.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    problem: PenalizedProblem,
    /// `ỹ_{i,g,t−1}` per row.
    pub lagged_rate: Vec<f64>,
    pub ar_column: Option<usize>,
    pub rows: Vec<RowKey>,
    pub blocks: Vec<ColumnBlock>,
    pub districts: usize,
    pub weeks: usize,
    pub coord_basis: Option<ThinPlateBasis>,
    pub social_basis: Option<ThinPlateBasis>,
    /// District-level designs of the constrained surfaces (`n × (k−1)`).
    pub coord_design: Option<nalgebra::DMatrix<f64>>,
    pub social_design: Option<nalgebra::DMatrix<f64>>,
}

impl ModelFrame {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.problem.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.problem.names
    }

    pub fn response(&self) -> &[f64] {
        &self.problem.y
    }

    pub fn offset(&self) -> &[f64] {
        &self.problem.offset
    }

    pub fn design(&self) -> &Design {
        &self.problem.x
    }

    pub fn block(&self, label: &str) -> Option<&ColumnBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }

    /// The estimation problem with the epidemic column `log(ỹ_{t−1} + c)`.
    pub fn problem_at(&self, c: f64) -> Result<PenalizedProblem> {
        let mut p = self.problem.clone();
        if let Some(j) = self.ar_column {
            if !(c > 0.0) {
                return Err(Error::invalid("offset constant must be positive"));
            }
            let col: Vec<f64> = self.lagged_rate.iter().map(|r| (r + c).ln()).collect();
            p.x.set_column(j, &col)?;
        }
        Ok(p)
    }
}

fn week_names(prefix: &str, weeks: usize) -> Vec<String> {
    (2..=weeks).map(|t| format!("{prefix}week_{t}")).collect()
}

/// Builds the lagged design. Week-`t` rows use features and rates from week
/// `t−1`; `b_i` enters only on rows of the final week.
pub fn assemble_model_frame(
    panel: &SurveillancePanel,
    features: &FeatureSet,
    social: Option<&[[f64; 2]]>,
    registry: &DistrictRegistry,
    population: &PopulationTable,
    spec: &FrameSpec,
) -> Result<ModelFrame> {
    let n = registry.len();
    let weeks = panel.weeks();
    let terms = spec.terms;
    if panel.districts() != n || population.districts() != n {
        return Err(Error::invalid("panel, population and registry sizes differ"));
    }
    if !panel.has_rates() {
        return Err(Error::invalid("panel rates must be computed before assembling the frame"));
    }
    if panel.district_ids() != registry.ids().as_slice() {
        return Err(Error::invalid("panel districts are not in registry order"));
    }
    for (label, series, used) in [
        ("gini", &features.gini_std, terms.gini),
        ("staying_put", &features.staying_put_std, terms.staying_put),
    ] {
        if !used {
            continue;
        }
        if series.district_ids != registry.ids() {
            return Err(Error::invalid(format!("{label} features are not aligned with the registry")));
        }
        for (i, id) in registry.ids().iter().enumerate() {
            for t in 1..weeks {
                let ok = series.values[i].get(t - 1).is_some_and(|v| v.is_finite());
                if !ok {
                    return Err(Error::MissingFeature {
                        district: id.clone(),
                        week: t,
                    });
                }
            }
        }
    }

    let mut names: Vec<String> = Vec::new();
    let mut blocks = Vec::new();
    let mut push_block = |names: &mut Vec<String>, label: &str, cols: Vec<String>| -> usize {
        let start = names.len();
        names.extend(cols);
        blocks.push(ColumnBlock {
            label: label.to_string(),
            columns: start..names.len(),
        });
        start
    };
    let week0 = push_block(&mut names, "week", week_names("", weeks));
    let group0 = terms.groups.then(|| {
        push_block(
            &mut names,
            "group",
            vec!["male".into(), "age36_59".into(), "age36_59:male".into()],
        )
    });
    let gini0 = terms.gini.then(|| push_block(&mut names, "gini", week_names("gini:", weeks)));
    let sp0 = terms
        .staying_put
        .then(|| push_block(&mut names, "staying_put", week_names("staying_put:", weeks)));
    let ar = terms.autoregressive.then(|| push_block(&mut names, "ar", vec!["ar".into()]));

    let mut penalties = Vec::new();
    let coords = registry.coordinates();
    let surface = |points: &[[f64; 2]], s: &SmoothSpec, label: &str| {
        let s = SmoothSpec { k: s.k.min(n), ..*s };
        thinplate_block(points, &s, label)
    };
    let (coord0, coord_basis, coord_design) = if terms.coord {
        let (b, basis) = surface(&coords, &spec.coord, "s(coord)")?;
        let start = push_block(
            &mut names,
            "s(coord)",
            (1..=b.ncols()).map(|j| format!("s(coord).{j}")).collect(),
        );
        penalties.push(PenaltyTerm::new("s(coord)", start, b.penalty.clone())?);
        (Some(start), Some(basis), Some(b.design))
    } else {
        (None, None, None)
    };
    let (social0, social_basis, social_design) = if terms.social {
        let pts = social.ok_or_else(|| Error::invalid("social embedding required for the s(social) term"))?;
        if pts.len() != n {
            return Err(Error::invalid("social embedding does not cover every district"));
        }
        let (b, basis) = surface(pts, &spec.social, "s(social)")?;
        let start = push_block(
            &mut names,
            "s(social)",
            (1..=b.ncols()).map(|j| format!("s(social).{j}")).collect(),
        );
        penalties.push(PenaltyTerm::new("s(social)", start, b.penalty.clone())?);
        (Some(start), Some(basis), Some(b.design))
    } else {
        (None, None, None)
    };
    let ids = registry.ids();
    let a0 = if terms.random_a {
        let b = ridge_block(&(0..n).collect::<Vec<_>>(), n, "a")?;
        let start = push_block(&mut names, "a", ids.iter().map(|id| format!("a[{id}]")).collect());
        penalties.push(PenaltyTerm::new("a", start, b.penalty)?);
        Some(start)
    } else {
        None
    };
    let b0 = if terms.random_b {
        let start = push_block(&mut names, "b", ids.iter().map(|id| format!("b[{id}]")).collect());
        penalties.push(PenaltyTerm::new("b", start, nalgebra::DMatrix::identity(n, n))?);
        Some(start)
    } else {
        None
    };

    let nrows = n * GroupKey::COUNT * (weeks - 1);
    let mut rows = Vec::with_capacity(nrows);
    let mut keys = Vec::with_capacity(nrows);
    let mut y = Vec::with_capacity(nrows);
    let mut offset = Vec::with_capacity(nrows);
    let mut lagged = Vec::with_capacity(nrows);
    for i in 0..n {
        for g in GroupKey::ALL {
            let pop = population.get(i, g);
            for t in 2..=weeks {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(16);
                row.push((week0 + t - 2, 1.0));
                if let Some(s) = group0 {
                    if g.is_male() {
                        row.push((s, 1.0));
                    }
                    if g.is_older() {
                        row.push((s + 1, 1.0));
                    }
                    if g.is_male() && g.is_older() {
                        row.push((s + 2, 1.0));
                    }
                }
                if let Some(s) = gini0 {
                    row.push((s + t - 2, features.gini_std.get(i, t - 1)));
                }
                if let Some(s) = sp0 {
                    row.push((s + t - 2, features.staying_put_std.get(i, t - 1)));
                }
                let rate = panel.rate(i, g, t - 1).expect("rates checked above");
                if let Some(s) = ar {
                    row.push((s, (rate + 1.0).ln()));
                }
                if let Some(s) = a0 {
                    row.push((s + i, 1.0));
                }
                if let Some(s) = b0 {
                    if t == weeks {
                        row.push((s + i, 1.0));
                    }
                }
                rows.push(row);
                keys.push(RowKey {
                    district: i,
                    group: g,
                    week: t,
                });
                y.push(panel.count(i, g, t) as f64);
                offset.push(pop.ln());
                lagged.push(rate);
            }
        }
    }
    let mut x = Design::from_rows(names.len(), rows)?;
    // the district-level surfaces are adjacent columns shared by every row of a district
    let surfaces: Vec<(usize, &nalgebra::DMatrix<f64>)> = [(coord0, &coord_design), (social0, &social_design)]
        .into_iter()
        .filter_map(|(s, d)| Some((s?, d.as_ref()?)))
        .collect();
    if let Some(&(start, _)) = surfaces.first() {
        let width: usize = surfaces.iter().map(|(_, d)| d.ncols()).sum();
        let mut values = nalgebra::DMatrix::zeros(n, width);
        let mut at = 0;
        for (_, d) in &surfaces {
            values.view_mut((0, at), (n, d.ncols())).copy_from(*d);
            at += d.ncols();
        }
        x = x.with_grouped_block(GroupedBlock {
            start,
            groups: keys.iter().map(|k| k.district).collect(),
            values,
        })?;
    }
    let problem = PenalizedProblem::new(x, y, offset, names, penalties)?;
    Ok(ModelFrame {
        problem,
        lagged_rate: lagged,
        ar_column: ar,
        rows: keys,
        blocks,
        districts: n,
        weeks,
        coord_basis,
        social_basis,
        coord_design,
        social_design,
    })
}
