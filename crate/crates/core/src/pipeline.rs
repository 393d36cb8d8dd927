//! Stage runners behind the command-line interface. Every stage reads its
//! inputs from the configuration or earlier stage outputs, writes artifacts
//! under the output directory and records a manifest with input/output
//! digests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::basis::SmoothSpec;
use crate::config::PipelineConfig;
use crate::diagnostics::{
    average_rootograms, average_sorted_residuals, ks_normal, predicted_vs_observed, qq_points, rootogram,
    rq_residuals, QqPoint, ResidualSet, Rootogram,
};
use crate::embedding::{embed_connectedness, parse_connectedness, read_coordinates, write_connectedness, write_coordinates};
use crate::engine::{fit_model, FitResult};
use crate::error::{Error, Result};
use crate::features::{
    gini_series, parse_colocation, parse_staying_put, weekly_average, write_colocation, write_staying_put, FeatureKind,
    FeatureSet,
};
use crate::imputation::{build_imputations, fit_delay_model};
use crate::panel::io::{parse_line_list, parse_population, parse_registry, write_line_list, write_population, write_registry};
use crate::panel::{
    aggregate_panel, assemble_model_frame, compute_rates, CaseRecord, DistrictRegistry, FrameSpec, PopulationTable,
    WeekCalendar,
};
use crate::pooling::{pool_fits, PooledEstimate};
use crate::simulator::{apply_missingness, simulate, simulate_line_list};
use crate::svg::{render_svg, MapEffectRow, PlotKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Features,
    Embed,
    Impute,
    Fit,
    Pool,
    Diagnose,
    Plot,
    Simulate,
    Pipeline,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Features => "features",
            Stage::Embed => "embed",
            Stage::Impute => "impute",
            Stage::Fit => "fit",
            Stage::Pool => "pool",
            Stage::Diagnose => "diagnose",
            Stage::Plot => "plot",
            Stage::Simulate => "simulate",
            Stage::Pipeline => "pipeline",
        }
    }

    /// Stages chained by `pipeline`, in order.
    pub const CHAIN: [Stage; 7] = [
        Stage::Features,
        Stage::Embed,
        Stage::Impute,
        Stage::Fit,
        Stage::Pool,
        Stage::Diagnose,
        Stage::Plot,
    ];
}

/// Output-relative artifact locations.
pub mod paths {
    pub const FEATURES: &str = "features.csv";
    pub const COORDINATES: &str = "coordinates.csv";
    pub const EMBEDDING: &str = "embedding.json";
    pub const DELAY_MODEL: &str = "delay_model.json";
    pub const IMPUTATIONS: &str = "imputations";
    pub const FITS: &str = "fits";
    pub const POOLED: &str = "pooled.json";
    pub const POOLED_CSV: &str = "pooled.csv";
    pub const MAP_EFFECTS: &str = "map_effects.csv";
    pub const RESIDUALS: &str = "residuals.csv";
    pub const QQ: &str = "qq.csv";
    pub const ROOTOGRAM: &str = "rootogram.csv";
    pub const DIAGNOSTICS: &str = "diagnostics.json";
    pub const PLOTS: &str = "plots";
    pub const MANIFESTS: &str = "manifests";
}

pub struct Context {
    pub config: PipelineConfig,
    pub out: PathBuf,
    /// Worker threads for concurrent fits; 0 lets the runtime decide.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub outputs: Vec<PathBuf>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(create(path)?);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn with_file<T>(path: &Path, f: impl FnOnce(BufWriter<File>) -> Result<T>) -> Result<T> {
    f(create(path)?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Context {
    pub fn new(config: PipelineConfig, out: PathBuf, workers: usize) -> Self {
        Context { config, out, workers }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn label(&self, p: &Path) -> String {
        p.strip_prefix(&self.out)
            .map(|r| r.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| p.to_string_lossy().into_owned())
    }

    fn registry(&self) -> Result<(PathBuf, DistrictRegistry)> {
        let p = self.config.input("registry")?;
        let r = parse_registry(open(&p)?).map_err(|e| with_path(e, &p))?;
        Ok((p, r))
    }

    fn population(&self, registry: &DistrictRegistry) -> Result<(PathBuf, PopulationTable)> {
        let p = self.config.input("population")?;
        let t = parse_population(open(&p)?, registry).map_err(|e| with_path(e, &p))?;
        Ok((p, t))
    }

    fn calendar(&self) -> Result<WeekCalendar> {
        WeekCalendar::new(self.config.calendar.anchor, self.config.calendar.weeks)
    }

    fn manifest(&self, stage: Stage, parameters: serde_json::Value, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<PathBuf> {
        let digest = |p: &PathBuf| -> Result<FileDigest> {
            Ok(FileDigest {
                path: self.label(p),
                sha256: sha256_file(p)?,
            })
        };
        let manifest = Manifest {
            stage: stage.name().to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            parameters,
            inputs: inputs.iter().map(digest).collect::<Result<_>>()?,
            outputs: outputs.iter().map(digest).collect::<Result<_>>()?,
        };
        let path = self.at(&format!("{}/{}.json", paths::MANIFESTS, stage.name()));
        write_json(&path, &manifest)?;
        Ok(path)
    }

    fn pool_install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        if self.workers == 0 {
            return Ok(f());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }

    fn imputation_files(&self) -> Result<Vec<PathBuf>> {
        numbered_files(&self.at(paths::IMPUTATIONS), "line_list_k", ".csv")
    }

    fn fit_files(&self) -> Result<Vec<PathBuf>> {
        numbered_files(&self.at(paths::FITS), "fit_k", ".json")
    }
}

/// Attaches the offending file to parse errors.
fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { .. } => e,
        other => Error::InvalidInput(format!("{}: {other}", path.display())),
    }
}

fn numbered_files(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(k) = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_suffix(suffix))
            .and_then(|k| k.parse::<usize>().ok())
        {
            found.push((k, entry.path()));
        }
    }
    if found.is_empty() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, format!("no {prefix}*{suffix} files"))));
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

pub fn run(stage: Stage, ctx: &Context) -> Result<StageReport> {
    match stage {
        Stage::Features => features(ctx),
        Stage::Embed => embed(ctx),
        Stage::Impute => impute(ctx),
        Stage::Fit => fit(ctx),
        Stage::Pool => pool(ctx),
        Stage::Diagnose => diagnose(ctx),
        Stage::Plot => plot(ctx),
        Stage::Simulate => simulate_stage(ctx),
        Stage::Pipeline => {
            let mut outputs = Vec::new();
            for s in Stage::CHAIN {
                log::info!("stage {}", s.name());
                outputs.extend(run(s, ctx)?.outputs);
            }
            Ok(StageReport {
                stage: Stage::Pipeline,
                outputs,
            })
        }
    }
}

fn features(ctx: &Context) -> Result<StageReport> {
    let (reg_path, registry) = ctx.registry()?;
    let colo_path = ctx.config.input("colocation")?;
    let sp_path = ctx.config.input("staying_put")?;
    let matrices = parse_colocation(open(&colo_path)?, &registry).map_err(|e| with_path(e, &colo_path))?;
    let ids = registry.ids();
    let gini = gini_series(&matrices, &ids)?;
    let daily = parse_staying_put(open(&sp_path)?, &registry).map_err(|e| with_path(e, &sp_path))?;
    let staying_put = weekly_average(&daily, &ids, &ctx.calendar()?, gini.weeks(), FeatureKind::StayingPut)?;
    let set = FeatureSet::from_raw(gini, staying_put)?;
    let out = ctx.at(paths::FEATURES);
    with_file(&out, |w| set.write_csv(w))?;
    let outputs = vec![out];
    let m = ctx.manifest(
        Stage::Features,
        serde_json::json!({ "calendar": ctx.config.calendar }),
        &[reg_path, colo_path, sp_path],
        &outputs,
    )?;
    Ok(StageReport {
        stage: Stage::Features,
        outputs: [outputs, vec![m]].concat(),
    })
}

fn embed(ctx: &Context) -> Result<StageReport> {
    let (reg_path, registry) = ctx.registry()?;
    let sci_path = ctx.config.input("connectedness")?;
    let sci = parse_connectedness(open(&sci_path)?, &registry).map_err(|e| with_path(e, &sci_path))?;
    let emb = embed_connectedness(&sci, &registry.coordinates(), 2)?;
    let coords = ctx.at(paths::COORDINATES);
    with_file(&coords, |w| write_coordinates(w, &registry.ids(), &emb.aligned))?;
    let summary = ctx.at(paths::EMBEDDING);
    write_json(&summary, &emb)?;
    let outputs = vec![coords, summary];
    let m = ctx.manifest(Stage::Embed, serde_json::json!({ "dimensions": 2 }), &[reg_path, sci_path], &outputs)?;
    Ok(StageReport {
        stage: Stage::Embed,
        outputs: [outputs, vec![m]].concat(),
    })
}

fn impute(ctx: &Context) -> Result<StageReport> {
    let (reg_path, registry) = ctx.registry()?;
    let (pop_path, population) = ctx.population(&registry)?;
    let ll_path = ctx.config.input("line_list")?;
    let cases = parse_line_list(open(&ll_path)?, &registry).map_err(|e| with_path(e, &ll_path))?;
    let icfg = &ctx.config.imputation;
    let model = fit_delay_model(&cases, &icfg.delay)?;
    let datasets = ctx.pool_install(|| {
        build_imputations(&cases, &model, icfg.k, icfg.seed, &registry, ctx.calendar()?, &population)
    })??;
    let dir = ctx.at(paths::IMPUTATIONS);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut outputs = vec![ctx.at(paths::DELAY_MODEL)];
    write_json(&outputs[0], &model.summary())?;
    for d in &datasets {
        let p = dir.join(format!("line_list_k{:02}.csv", d.k));
        with_file(&p, |w| write_line_list(w, &d.cases, Some(d.k)))?;
        outputs.push(p);
    }
    let m = ctx.manifest(Stage::Impute, serde_json::to_value(icfg)?, &[reg_path, pop_path, ll_path], &outputs)?;
    outputs.push(m);
    Ok(StageReport {
        stage: Stage::Impute,
        outputs,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct FittedRow {
    district_id: String,
    age_band: String,
    gender: String,
    week: usize,
    observed: f64,
    fitted: f64,
}

fn frame_spec(ctx: &Context) -> FrameSpec {
    let m = &ctx.config.model;
    FrameSpec {
        coord: SmoothSpec::thinplate(m.coord_k),
        social: SmoothSpec::thinplate(m.social_k),
        terms: m.terms,
    }
}

/// Fits one completed line list; returns the fit and its fitted-value rows.
fn fit_one(
    ctx: &Context,
    cases: &[CaseRecord],
    registry: &DistrictRegistry,
    population: &PopulationTable,
    features: &FeatureSet,
    social: &[[f64; 2]],
) -> Result<(FitResult, Vec<FittedRow>)> {
    let panel = compute_rates(aggregate_panel(cases, registry, ctx.calendar()?)?, population)?;
    let frame = assemble_model_frame(&panel, features, Some(social), registry, population, &frame_spec(ctx))?;
    let builder = |c: f64| frame.problem_at(c);
    let fit = fit_model(&builder, ctx.config.model.family, &ctx.config.model.fit)?;
    let ids = registry.ids();
    let y = frame.response();
    let rows = frame
        .rows
        .iter()
        .enumerate()
        .map(|(i, key)| FittedRow {
            district_id: ids[key.district].clone(),
            age_band: key.group.age_label().to_string(),
            gender: key.group.gender_label().to_string(),
            week: key.week,
            observed: y[i],
            fitted: fit.fitted[i],
        })
        .collect();
    Ok((fit, rows))
}

fn fit(ctx: &Context) -> Result<StageReport> {
    let (reg_path, registry) = ctx.registry()?;
    let (pop_path, population) = ctx.population(&registry)?;
    let feat_path = ctx.at(paths::FEATURES);
    let features = FeatureSet::read_csv(open(&feat_path)?, &registry).map_err(|e| with_path(e, &feat_path))?;
    let coord_path = ctx.at(paths::COORDINATES);
    let social = read_coordinates(open(&coord_path)?, &registry).map_err(|e| with_path(e, &coord_path))?;
    let files = ctx.imputation_files()?;
    let results = ctx.pool_install(|| {
        files
            .par_iter()
            .enumerate()
            .map(|(idx, p)| -> Result<(usize, FitResult, Vec<FittedRow>)> {
                let cases = parse_line_list(open(p)?, &registry).map_err(|e| with_path(e, p))?;
                let (fit, rows) = fit_one(ctx, &cases, &registry, &population, &features, &social)?;
                Ok((idx + 1, fit, rows))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let dir = ctx.at(paths::FITS);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut outputs = Vec::new();
    for (k, fit, rows) in &results {
        let fp = dir.join(format!("fit_k{k:02}.json"));
        write_json(&fp, fit)?;
        let rp = dir.join(format!("fitted_k{k:02}.csv"));
        write_rows(&rp, rows)?;
        outputs.push(fp);
        outputs.push(rp);
    }
    let mut inputs = vec![reg_path, pop_path, feat_path, coord_path];
    inputs.extend(files);
    let m = ctx.manifest(Stage::Fit, serde_json::to_value(&ctx.config.model)?, &inputs, &outputs)?;
    outputs.push(m);
    Ok(StageReport {
        stage: Stage::Fit,
        outputs,
    })
}

fn pool(ctx: &Context) -> Result<StageReport> {
    let (reg_path, registry) = ctx.registry()?;
    let files = ctx.fit_files()?;
    let fits: Vec<FitResult> = files.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let pooled = pool_fits(&fits, ctx.config.model.c_pooling)?;
    let json = ctx.at(paths::POOLED);
    write_json(&json, &pooled)?;
    let csv_path = ctx.at(paths::POOLED_CSV);
    write_rows(&csv_path, &pooled.rows)?;

    // district effects averaged over imputations
    let k = fits.len() as f64;
    let map: Vec<MapEffectRow> = registry
        .districts()
        .iter()
        .map(|d| {
            let mut effect = 0.0;
            for f in &fits {
                for prefix in ["a", "b"] {
                    if let Some(c) = f.coefficient(&format!("{prefix}[{}]", d.district_id)) {
                        effect += c.estimate / k;
                    }
                }
            }
            MapEffectRow {
                district_id: d.district_id.clone(),
                lon: d.lon,
                lat: d.lat,
                effect,
            }
        })
        .collect();
    let map_path = ctx.at(paths::MAP_EFFECTS);
    write_rows(&map_path, &map)?;
    let outputs = vec![json, csv_path, map_path];
    let mut inputs = vec![reg_path];
    inputs.extend(files);
    let m = ctx.manifest(
        Stage::Pool,
        serde_json::json!({ "c_pooling": ctx.config.model.c_pooling }),
        &inputs,
        &outputs,
    )?;
    Ok(StageReport {
        stage: Stage::Pool,
        outputs: [outputs, vec![m]].concat(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationDiagnostics {
    pub k: usize,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub correlation: f64,
    pub outliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub per_imputation: Vec<ImputationDiagnostics>,
    pub mean_ks_p_value: f64,
    pub mean_correlation: f64,
    pub mean_outliers: f64,
}

#[derive(Debug, Serialize)]
struct ResidualRow {
    k: usize,
    draw: u64,
    index: usize,
    residual: f64,
}

fn diagnose(ctx: &Context) -> Result<StageReport> {
    let dcfg = &ctx.config.diagnostics;
    let fit_paths = ctx.fit_files()?;
    let mut inputs = Vec::new();
    let mut per = Vec::new();
    let mut first_draws: Vec<ResidualSet> = Vec::new();
    let mut roots: Vec<Rootogram> = Vec::new();
    let mut residual_rows = Vec::new();
    for (idx, fp) in fit_paths.iter().enumerate() {
        let k = idx + 1;
        let fit: FitResult = read_json(fp)?;
        let rp = fp.with_file_name(format!("fitted_k{k:02}.csv"));
        let rows: Vec<FittedRow> = csv::Reader::from_reader(open(&rp)?)
            .deserialize()
            .collect::<std::result::Result<_, _>>()?;
        inputs.push(fp.clone());
        inputs.push(rp);
        let y: Vec<f64> = rows.iter().map(|r| r.observed).collect();
        let mu: Vec<f64> = rows.iter().map(|r| r.fitted).collect();
        let mut ks = None;
        for draw in 0..dcfg.draws.max(1) {
            let set = rq_residuals(&y, &mu, fit.phi, dcfg.seed.wrapping_add(k as u64), draw)?;
            residual_rows.extend(set.residuals.iter().enumerate().map(|(i, &r)| ResidualRow {
                k,
                draw,
                index: i,
                residual: r,
            }));
            if draw == 0 {
                ks = Some(ks_normal(&set.residuals)?);
                first_draws.push(set);
            }
        }
        let ks = ks.expect("at least one draw");
        let pvo = predicted_vs_observed(&y, &mu)?;
        roots.push(rootogram(&y, &mu, fit.phi, dcfg.max_count)?);
        per.push(ImputationDiagnostics {
            k,
            ks_statistic: ks.statistic,
            ks_p_value: ks.p_value,
            correlation: pvo.correlation,
            outliers: qq_points(&first_draws.last().unwrap().residuals).iter().filter(|q| q.outlier).count(),
        });
    }
    let n = per.len() as f64;
    let summary = DiagnosticsSummary {
        mean_ks_p_value: per.iter().map(|d| d.ks_p_value).sum::<f64>() / n,
        mean_correlation: per.iter().map(|d| d.correlation).sum::<f64>() / n,
        mean_outliers: per.iter().map(|d| d.outliers as f64).sum::<f64>() / n,
        per_imputation: per,
    };
    let averaged = average_sorted_residuals(&first_draws)?;
    let qq: Vec<QqPoint> = qq_points(&averaged);
    let root = average_rootograms(&roots)?;

    let res_path = ctx.at(paths::RESIDUALS);
    write_rows(&res_path, &residual_rows)?;
    let qq_path = ctx.at(paths::QQ);
    write_rows(&qq_path, &qq)?;
    let root_path = ctx.at(paths::ROOTOGRAM);
    write_rows(&root_path, &root.bins)?;
    let sum_path = ctx.at(paths::DIAGNOSTICS);
    write_json(&sum_path, &summary)?;
    let outputs = vec![res_path, qq_path, root_path, sum_path];
    let m = ctx.manifest(Stage::Diagnose, serde_json::to_value(dcfg)?, &inputs, &outputs)?;
    Ok(StageReport {
        stage: Stage::Diagnose,
        outputs: [outputs, vec![m]].concat(),
    })
}

/// Artifact rendered for each plot kind.
pub fn plot_source(kind: PlotKind) -> &'static str {
    match kind {
        PlotKind::CoefficientPath => paths::POOLED,
        PlotKind::ResidualQq => paths::QQ,
        PlotKind::Rootogram => paths::ROOTOGRAM,
        PlotKind::MapEffect => paths::MAP_EFFECTS,
        PlotKind::EmbeddingScatter => paths::COORDINATES,
    }
}

/// Renders one artifact to an SVG file.
pub fn render_to(artifact: &Path, kind: PlotKind, out: &Path) -> Result<()> {
    let svg = render_svg(artifact, kind)?;
    let mut w = create(out)?;
    w.write_all(svg.as_bytes()).map_err(|e| Error::io(out, e))?;
    w.flush().map_err(|e| Error::io(out, e))
}

fn plot(ctx: &Context) -> Result<StageReport> {
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for kind in PlotKind::ALL {
        let src = ctx.at(plot_source(kind));
        let dst = ctx.at(&format!("{}/{}.svg", paths::PLOTS, kind.name()));
        render_to(&src, kind, &dst)?;
        inputs.push(src);
        outputs.push(dst);
    }
    let m = ctx.manifest(Stage::Plot, serde_json::Value::Null, &inputs, &outputs)?;
    outputs.push(m);
    Ok(StageReport {
        stage: Stage::Plot,
        outputs,
    })
}

#[derive(Debug, Serialize)]
struct TruthSummary {
    coefficients: Vec<(String, f64)>,
    c: f64,
    phi: f64,
    tau_a: f64,
    tau_b: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    state_delay_effects: Vec<f64>,
}

/// Writes a synthetic data set in the ingestion formats plus a ready-to-run
/// configuration pointing at it.
fn simulate_stage(ctx: &Context) -> Result<StageReport> {
    let scfg = &ctx.config.simulate;
    let data = simulate(&scfg.model)?;
    let complete = simulate_line_list(&data, &scfg.model)?;
    let cases = apply_missingness(&complete, scfg.missing_fraction, scfg.mar_strength, scfg.model.seed)?;
    let file = |name: &str| ctx.at(name);
    let mut outputs = Vec::new();
    let p = file("registry.csv");
    with_file(&p, |w| write_registry(w, &data.registry))?;
    outputs.push(p);
    let p = file("population.csv");
    with_file(&p, |w| write_population(w, &data.registry, &data.population))?;
    outputs.push(p);
    let p = file("line_list.csv");
    with_file(&p, |w| write_line_list(w, &cases, None))?;
    outputs.push(p);
    let p = file("colocation.csv");
    with_file(&p, |w| write_colocation(w, &data.registry, &data.colocation))?;
    outputs.push(p);
    let p = file("staying_put.csv");
    with_file(&p, |w| write_staying_put(w, &data.registry, &data.staying_put))?;
    outputs.push(p);
    let p = file("connectedness.csv");
    with_file(&p, |w| write_connectedness(w, &data.registry, &data.connectedness))?;
    outputs.push(p);
    let m = &scfg.model;
    let truth = TruthSummary {
        coefficients: data.truth.coefficients.clone(),
        c: m.c,
        phi: m.phi,
        tau_a: m.tau_a,
        tau_b: m.tau_b,
        a: data.truth.a.clone(),
        b: data.truth.b.clone(),
        state_delay_effects: data.truth.state_delay_effects.clone(),
    };
    let p = file("truth.json");
    write_json(&p, &truth)?;
    outputs.push(p);

    let mut next = ctx.config.clone();
    next.output_dir = None;
    next.inputs = crate::config::InputPaths {
        registry: Some("registry.csv".into()),
        population: Some("population.csv".into()),
        line_list: Some("line_list.csv".into()),
        colocation: Some("colocation.csv".into()),
        staying_put: Some("staying_put.csv".into()),
        connectedness: Some("connectedness.csv".into()),
    };
    next.calendar = crate::config::CalendarConfig {
        anchor: m.anchor,
        weeks: m.weeks,
    };
    let p = file("config.toml");
    let text = next.to_toml()?;
    with_file(&p, |mut w| {
        w.write_all(text.as_bytes()).map_err(|e| Error::io("config.toml", e))?;
        w.flush().map_err(|e| Error::io("config.toml", e))
    })?;
    outputs.push(p);
    let man = ctx.manifest(Stage::Simulate, serde_json::to_value(scfg)?, &[], &outputs)?;
    outputs.push(man);
    Ok(StageReport {
        stage: Stage::Simulate,
        outputs,
    })
}

/// Pooled table of a finished run.
pub fn load_pooled(out: &Path) -> Result<PooledEstimate> {
    read_json(&out.join(paths::POOLED))
}
