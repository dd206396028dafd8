//! End-to-end audits: per-subject metrics for a prediction source against a
//! cohort manifest, group summaries, cross-group AUC, and the simulated
//! random/systematic/downsampling comparison.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::errorsim::{calibrate_dichotomy, perturb, subject_seed, ErrorKind, ErrorModel};
use crate::metrics::{
    self, dsc, freedman_diaconis_edges, group_auc, group_bias, histogram, median, quantile_sorted,
    volume_bias, GroupSummary, Histogram, SubjectMetrics,
};
use crate::phantom::{generate_cohort, CohortSpec, Group, Manifest, PhantomSpec, SplitFractions, STRUCTURE_LABEL};
use crate::resample::{resample_labels_majority, ScaleFactor};
use crate::volume::{self, LabelMap};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FIG1_RECORDS_FILE: &str = "fig1_records.csv";
pub const FIG1_HISTOGRAMS_FILE: &str = "fig1_histograms.csv";
pub const FIG1_SUMMARY_FILE: &str = "fig1_summary.json";

/// Where DSC is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricSpace {
    /// Predictions must already share the reference geometry.
    Native,
    /// Predictions on another grid are majority-voted onto the reference
    /// grid before DSC. Volumes stay native.
    #[default]
    ResampleToReference,
}

/// Prediction files found by substituting `{id}` in `pattern`, relative to
/// `dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSource {
    pub dir: PathBuf,
    pub pattern: String,
}

impl PredictionSource {
    pub fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(self.pattern.replace("{id}", id))
    }
}

fn default_labels() -> Vec<u32> {
    vec![STRUCTURE_LABEL]
}

fn default_positive() -> Group {
    Group::L
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub manifest: PathBuf,
    /// When absent, the manifest's own `prediction` entries are used.
    #[serde(default)]
    pub predictions: Option<PredictionSource>,
    #[serde(default = "default_labels")]
    pub labels: Vec<u32>,
    /// `[high_mm, low_mm]`: when set, group H predictions must have voxel
    /// size `high_mm` and group L predictions `low_mm`.
    #[serde(default)]
    pub resolution_pair: Option<[f64; 2]>,
    #[serde(default)]
    pub metric_space: MetricSpace,
    /// Not part of the provenance record.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_positive")]
    pub positive_group: Group,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl AuditConfig {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        AuditConfig {
            manifest: manifest.into(),
            predictions: None,
            labels: default_labels(),
            resolution_pair: None,
            metric_space: MetricSpace::default(),
            output_dir: None,
            seed: 0,
            positive_group: default_positive(),
            base_dir: PathBuf::new(),
        }
    }

    /// Reads a JSON config. Relative paths inside it are taken relative to
    /// the config file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: AuditConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::InvalidConfig("labels must be non-empty".into()));
        }
        if self.labels.contains(&volume::BACKGROUND) {
            return Err(Error::InvalidConfig("label 0 is background".into()));
        }
        if let Some([high, low]) = self.resolution_pair {
            if !(high.is_finite() && low.is_finite() && high > 0.0 && high <= low) {
                return Err(Error::InvalidResolutionPair(format!(
                    "[{high}, {low}]: need 0 < high <= low"
                )));
            }
        }
        if let Some(p) = &self.predictions {
            if !p.pattern.contains("{id}") {
                return Err(Error::InvalidConfig(format!(
                    "prediction pattern {:?} lacks {{id}}",
                    p.pattern
                )));
            }
        }
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// SHA-256 of the compact JSON form with sorted keys, all defaults
    /// included.
    pub fn hash(&self) -> Result<String> {
        canonical_hash(self)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let value = serde_json::to_value(value)?;
    Ok(sha256_hex(&serde_json::to_vec(&value)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub toolkit_version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: serde_json::Value,
}

impl Provenance {
    fn of<T: Serialize>(config: &T, seed: u64) -> Result<Self> {
        Ok(Provenance {
            toolkit_version: TOOLKIT_VERSION.to_string(),
            seed,
            config_sha256: canonical_hash(config)?,
            config: serde_json::to_value(config)?,
        })
    }
}

/// Group separability of one label's volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelAuc {
    pub label: u32,
    pub positive_group: Group,
    pub predicted: f64,
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub metric_space: MetricSpace,
    pub groups: Vec<GroupSummary>,
    /// One entry per label, only when both groups have records.
    pub auc: Vec<LabelAuc>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub records: Vec<SubjectMetrics>,
    pub summary: AuditSummary,
}

impl AuditReport {
    /// Writes `metrics.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(METRICS_FILE);
        let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        metrics::write_records_csv(&self.records, file)?;
        write_json(&dir.join(SUMMARY_FILE), &self.summary)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Group summaries and AUCs from a record table. Records are assumed to be
/// sorted; the result depends only on their content.
pub fn summarize(records: &[SubjectMetrics], labels: &[u32], positive: Group) -> Result<(Vec<GroupSummary>, Vec<LabelAuc>)> {
    let mut groups = Vec::new();
    let mut aucs = Vec::new();
    for &label in labels {
        let present: Vec<Group> = [Group::H, Group::L]
            .into_iter()
            .filter(|g| records.iter().any(|r| r.label == label && r.group == *g))
            .collect();
        for &g in &present {
            groups.push(group_bias(records, g, label)?);
        }
        if present.len() == 2 {
            aucs.push(LabelAuc {
                label,
                positive_group: positive,
                predicted: group_auc(records, label, positive, true)?,
                reference: group_auc(records, label, positive, false)?,
            });
        }
    }
    Ok((groups, aucs))
}

fn check_resolution(pred: &LabelMap, expected: f64, id: &str) -> Result<()> {
    if pred.geometry().voxel_size().iter().any(|&v| (v - expected).abs() > 1e-6) {
        return Err(Error::GeometryMismatch(format!(
            "{id}: prediction voxel size {:?}, resolution pair requires {expected} mm",
            pred.geometry().voxel_size()
        )));
    }
    Ok(())
}

/// Scores every manifest subject's prediction and aggregates by group.
/// Subjects without a prediction file abort the run with the full list.
pub fn run_audit(config: &AuditConfig) -> Result<AuditReport> {
    config.validate()?;
    let manifest_path = config.resolve(&config.manifest);
    let manifest = Manifest::read(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut missing = Vec::new();
    let mut jobs = Vec::new();
    for e in &manifest.subjects {
        let pred = match &config.predictions {
            Some(src) => Some(config.resolve(&src.path_for(&e.id))),
            None => e.prediction.as_ref().map(|p| base.join(p)),
        };
        match pred {
            Some(p) if p.is_file() => jobs.push((e, p)),
            _ => missing.push(e.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }

    let per_subject = jobs
        .par_iter()
        .map(|(e, pred_path)| -> Result<Vec<SubjectMetrics>> {
            let reference = volume::load_labels(base.join(&e.reference))?;
            let pred = volume::load_labels(pred_path)?;
            if let Some([high, low]) = config.resolution_pair {
                let mm = match e.group {
                    Group::H => high,
                    Group::L => low,
                };
                check_resolution(&pred, mm, &e.id)?;
            }
            let same = pred.geometry().same_as(reference.geometry());
            let on_ref = match (config.metric_space, same) {
                (_, true) => pred.clone(),
                (MetricSpace::Native, false) => {
                    return Err(Error::GeometryMismatch(format!(
                        "{}: prediction grid differs from reference and metric space is native",
                        e.id
                    )))
                }
                (MetricSpace::ResampleToReference, false) => {
                    resample_labels_majority(&pred, reference.geometry().clone())?
                }
            };
            metrics::subject_metrics(&e.id, e.group, &on_ref, &pred, &reference, &config.labels)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records: Vec<SubjectMetrics> = per_subject.into_iter().flatten().collect();
    records.sort_by(|a, b| a.subject_id.cmp(&b.subject_id).then(a.label.cmp(&b.label)));

    let (groups, auc) = summarize(&records, &config.labels, config.positive_group)?;
    Ok(AuditReport {
        records,
        summary: AuditSummary {
            metric_space: config.metric_space,
            groups,
            auc,
            provenance: Provenance::of(config, config.seed)?,
        },
    })
}

/// One simulated segmentation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Fig1Model {
    /// Random-balanced boundary errors, strength matched on mean DSC to the
    /// systematic model.
    Random,
    /// Dilation calibrated to the configured median bias.
    Systematic,
    /// Majority-vote downsampling to an isotropic voxel size.
    Downsampled { voxel_mm: f64 },
}

impl Fig1Model {
    pub fn name(&self) -> String {
        match self {
            Fig1Model::Random => "random".into(),
            Fig1Model::Systematic => "systematic".into(),
            Fig1Model::Downsampled { voxel_mm } => format!("downsampled-{voxel_mm}mm"),
        }
    }
}

fn default_models() -> Vec<Fig1Model> {
    vec![
        Fig1Model::Random,
        Fig1Model::Systematic,
        Fig1Model::Downsampled { voxel_mm: 2.0 },
        Fig1Model::Downsampled { voxel_mm: 3.0 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fig1Config {
    #[serde(default = "PhantomSpec::default_ribbon")]
    pub phantom: PhantomSpec,
    #[serde(default = "Fig1Config::default_n_per_group")]
    pub n_per_group: usize,
    #[serde(default = "Fig1Config::default_effect_ratio")]
    pub effect_ratio: f64,
    #[serde(default = "Fig1Config::default_jitter")]
    pub jitter_sigma: f64,
    /// Median volume bias the systematic model is calibrated to.
    #[serde(default = "Fig1Config::default_target_bias")]
    pub target_bias: f64,
    #[serde(default = "default_models")]
    pub models: Vec<Fig1Model>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Fig1Config {
            phantom: PhantomSpec::default_ribbon(),
            n_per_group: Self::default_n_per_group(),
            effect_ratio: Self::default_effect_ratio(),
            jitter_sigma: Self::default_jitter(),
            target_bias: Self::default_target_bias(),
            models: default_models(),
            seed: 0,
        }
    }
}

impl Fig1Config {
    fn default_n_per_group() -> usize {
        10
    }
    fn default_effect_ratio() -> f64 {
        1.0
    }
    fn default_jitter() -> f64 {
        0.05
    }
    fn default_target_bias() -> f64 {
        0.2
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::InvalidConfig("no models configured".into()));
        }
        let mut names: Vec<String> = self.models.iter().map(Fig1Model::name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.models.len() {
            return Err(Error::InvalidConfig("duplicate model".into()));
        }
        if !(self.target_bias.is_finite() && self.target_bias > 0.0) {
            return Err(Error::InvalidConfig(format!("target bias {}", self.target_bias)));
        }
        for m in &self.models {
            if let Fig1Model::Downsampled { voxel_mm } = m {
                if !(voxel_mm.is_finite() && *voxel_mm > 0.0) {
                    return Err(Error::InvalidResolutions(format!("{voxel_mm} mm")));
                }
            }
        }
        self.phantom.validate()
    }

    fn cohort_spec(&self) -> CohortSpec {
        CohortSpec {
            n_per_group: self.n_per_group,
            effect_ratio: self.effect_ratio,
            jitter_sigma: self.jitter_sigma,
            split: SplitFractions::default(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Record {
    pub model: String,
    pub subject_id: String,
    pub group: Group,
    pub dsc: f64,
    pub volume_pred_mm3: f64,
    pub volume_ref_mm3: f64,
    pub volume_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1ModelSummary {
    pub model: String,
    /// Error-model strength; absent for downsampling.
    pub strength: Option<f64>,
    pub n: usize,
    pub dsc_mean: f64,
    pub dsc_sd: f64,
    pub median_volume_bias: f64,
    pub bias_q1: f64,
    pub bias_q3: f64,
    pub median_volume_mm3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Summary {
    pub models: Vec<Fig1ModelSummary>,
    /// DSC and bias gaps between the random and systematic models, when
    /// both are configured.
    pub dsc_gap: Option<f64>,
    pub bias_gap: Option<f64>,
    pub provenance: Provenance,
}

/// Histogram rows for plotting, with bins shared across models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub model: String,
    pub quantity: String,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig1Report {
    pub records: Vec<Fig1Record>,
    pub histograms: Vec<HistogramRow>,
    pub summary: Fig1Summary,
}

impl Fig1Report {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join(FIG1_RECORDS_FILE), &self.records)?;
        write_csv(&dir.join(FIG1_HISTOGRAMS_FILE), &self.histograms)?;
        write_json(&dir.join(FIG1_SUMMARY_FILE), &self.summary)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn model_records(
    model: &Fig1Model,
    refs: &[(&str, Group, &LabelMap)],
    strength: Option<f64>,
    error_seed: u64,
) -> Result<Vec<Fig1Record>> {
    let label = STRUCTURE_LABEL;
    refs.par_iter()
        .enumerate()
        .map(|(i, (id, group, reference))| {
            let (native, on_ref) = match model {
                Fig1Model::Random | Fig1Model::Systematic => {
                    let kind = match model {
                        Fig1Model::Random => ErrorKind::RandomBalanced,
                        _ => ErrorKind::SystematicDilate,
                    };
                    let p = strength.expect("calibrated strength");
                    let pred = perturb(reference, &ErrorModel::new(kind, p, subject_seed(error_seed, i))?)?;
                    (pred.clone(), pred)
                }
                Fig1Model::Downsampled { voxel_mm } => {
                    let size = reference.geometry().voxel_size();
                    let factor = ScaleFactor::between(size, &vec![*voxel_mm; size.len()])?;
                    let low = resample_labels_majority(reference, factor)?;
                    let back = resample_labels_majority(&low, reference.geometry().clone())?;
                    (low, back)
                }
            };
            let v = |m: &LabelMap| m.count(label) as f64 * m.geometry().voxel_volume();
            Ok(Fig1Record {
                model: model.name(),
                subject_id: id.to_string(),
                group: *group,
                dsc: dsc(&on_ref, reference, label)?,
                volume_pred_mm3: v(&native),
                volume_ref_mm3: v(reference),
                volume_bias: volume_bias(&native, reference, label)?,
            })
        })
        .collect()
}

fn model_summary(name: &str, strength: Option<f64>, rows: &[&Fig1Record]) -> Fig1ModelSummary {
    let n = rows.len();
    let dscs: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
    let dsc_mean = dscs.iter().sum::<f64>() / n as f64;
    let dsc_sd = if n > 1 {
        (dscs.iter().map(|d| (d - dsc_mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut biases: Vec<f64> = rows.iter().map(|r| r.volume_bias).collect();
    biases.sort_by(f64::total_cmp);
    let volumes: Vec<f64> = rows.iter().map(|r| r.volume_pred_mm3).collect();
    Fig1ModelSummary {
        model: name.to_string(),
        strength,
        n,
        dsc_mean,
        dsc_sd,
        median_volume_bias: median(&biases).expect("non-empty"),
        bias_q1: quantile_sorted(&biases, 0.25),
        bias_q3: quantile_sorted(&biases, 0.75),
        median_volume_mm3: median(&volumes).expect("non-empty"),
    }
}

fn histogram_rows(records: &[Fig1Record], models: &[String]) -> Vec<HistogramRow> {
    let quantities: [(&str, fn(&Fig1Record) -> f64); 3] = [
        ("volume_mm3", |r| r.volume_pred_mm3),
        ("dsc", |r| r.dsc),
        ("volume_bias", |r| r.volume_bias),
    ];
    let mut rows = Vec::new();
    for (quantity, f) in quantities {
        let pooled: Vec<f64> = records.iter().map(f).collect();
        let edges = freedman_diaconis_edges(&pooled);
        for model in models {
            let values: Vec<f64> = records.iter().filter(|r| &r.model == model).map(f).collect();
            let Histogram { edges, counts } = histogram(&values, &edges);
            rows.extend(counts.iter().enumerate().map(|(bin, &count)| HistogramRow {
                model: model.clone(),
                quantity: quantity.to_string(),
                bin,
                lower: edges[bin],
                upper: edges[bin + 1],
                count,
            }));
        }
    }
    rows
}

/// Simulates the configured models on a phantom cohort. Error strengths
/// come from [`calibrate_dichotomy`]; downsampled predictions are voted
/// back onto the reference grid for DSC, and their volumes are taken on the
/// coarse grid.
pub fn run_fig1_experiment(config: &Fig1Config) -> Result<Fig1Report> {
    config.validate()?;
    let cohort = generate_cohort(&config.phantom, &config.cohort_spec())?;
    let refs: Vec<(&str, Group, &LabelMap)> = cohort
        .subjects
        .iter()
        .map(|s| (s.id.as_str(), s.group, &s.reference))
        .collect();
    let error_seed = derive_seed(config.seed, 1);
    let needs_errors = config
        .models
        .iter()
        .any(|m| matches!(m, Fig1Model::Random | Fig1Model::Systematic));
    let calibration = if needs_errors {
        let maps: Vec<LabelMap> = refs.iter().map(|r| r.2.clone()).collect();
        Some(calibrate_dichotomy(&maps, STRUCTURE_LABEL, config.target_bias, error_seed)?)
    } else {
        None
    };

    let mut records = Vec::new();
    let mut strengths = BTreeMap::new();
    for model in &config.models {
        let strength = match (model, &calibration) {
            (Fig1Model::Random, Some(c)) => Some(c.random.strength),
            (Fig1Model::Systematic, Some(c)) => Some(c.dilate.strength),
            _ => None,
        };
        strengths.insert(model.name(), strength);
        records.extend(model_records(model, &refs, strength, error_seed)?);
    }

    let names: Vec<String> = config.models.iter().map(Fig1Model::name).collect();
    let models = names
        .iter()
        .map(|name| {
            let rows: Vec<&Fig1Record> = records.iter().filter(|r| &r.model == name).collect();
            model_summary(name, strengths[name], &rows)
        })
        .collect::<Vec<_>>();
    let find = |name: &str| models.iter().find(|m| m.model == name);
    let (dsc_gap, bias_gap) = match (find("random"), find("systematic")) {
        (Some(r), Some(s)) => (
            Some((r.dsc_mean - s.dsc_mean).abs()),
            Some((r.median_volume_bias - s.median_volume_bias).abs()),
        ),
        _ => (None, None),
    };
    let histograms = histogram_rows(&records, &names);
    Ok(Fig1Report {
        records,
        histograms,
        summary: Fig1Summary {
            models,
            dsc_gap,
            bias_gap,
            provenance: Provenance::of(config, config.seed)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{write_cohort, Cohort};
    use crate::volume::{Format, VoxelGeometry};

    fn small_cohort() -> Cohort {
        let mut spec = PhantomSpec::default_ellipsoid();
        spec.structure = crate::phantom::Structure::CompactEllipsoid {
            radii_mm: [4.0, 3.0, 3.0],
        };
        spec.geometry = VoxelGeometry::isotropic(&[16, 16, 16], 1.0).unwrap();
        let cs = CohortSpec {
            n_per_group: 3,
            seed: 5,
            ..Default::default()
        };
        generate_cohort(&spec, &cs).unwrap()
    }

    fn with_identity_predictions(mut c: Cohort) -> Cohort {
        for s in &mut c.subjects {
            s.prediction = Some(s.reference.clone());
            s.image = None;
        }
        c
    }

    #[test]
    fn identity_predictions_are_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = with_identity_predictions(small_cohort());
        let manifest = write_cohort(&cohort, dir.path(), Format::SimpleVol).unwrap();
        let report = run_audit(&AuditConfig::new(&manifest)).unwrap();
        assert_eq!(report.records.len(), 6);
        assert!(report.records.iter().all(|r| r.dsc == 1.0 && r.volume_bias == 0.0));
        let auc = report.summary.auc[0];
        assert_eq!(auc.predicted, auc.reference);
    }

    #[test]
    fn missing_predictions_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cohort = with_identity_predictions(small_cohort());
        cohort.subjects[1].prediction = None;
        cohort.subjects[4].prediction = None;
        let manifest = write_cohort(&cohort, dir.path(), Format::SimpleVol).unwrap();
        match run_audit(&AuditConfig::new(&manifest)) {
            Err(Error::MissingPredictions(ids)) => {
                assert_eq!(ids, vec![cohort.subjects[1].id.clone(), cohort.subjects[4].id.clone()])
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn native_space_rejects_other_grids() {
        let dir = tempfile::tempdir().unwrap();
        let mut cohort = with_identity_predictions(small_cohort());
        let s = &mut cohort.subjects[0];
        let f = ScaleFactor::isotropic(0.5, 3).unwrap();
        s.prediction = Some(resample_labels_majority(&s.reference, f).unwrap());
        let manifest = write_cohort(&cohort, dir.path(), Format::SimpleVol).unwrap();
        let mut config = AuditConfig::new(&manifest);
        config.metric_space = MetricSpace::Native;
        assert!(matches!(run_audit(&config), Err(Error::GeometryMismatch(_))));
        config.metric_space = MetricSpace::ResampleToReference;
        let report = run_audit(&config).unwrap();
        let r = &report.records.iter().find(|r| r.subject_id == cohort.subjects[0].id).unwrap();
        assert!(r.dsc < 1.0);
    }

    #[test]
    fn resolution_pair_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = with_identity_predictions(small_cohort());
        let manifest = write_cohort(&cohort, dir.path(), Format::SimpleVol).unwrap();
        let mut config = AuditConfig::new(&manifest);
        config.resolution_pair = Some([1.0, 2.0]);
        assert!(matches!(run_audit(&config), Err(Error::GeometryMismatch(_))));
        config.resolution_pair = Some([1.0, 1.0]);
        assert!(run_audit(&config).is_ok());
    }

    #[test]
    fn config_defaults_are_materialized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"manifest": "cohort.json"}"#).unwrap();
        let c = AuditConfig::from_file(&path).unwrap();
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["labels"], serde_json::json!([1]));
        assert_eq!(v["metric_space"], "resample-to-reference");
        assert_eq!(v["positive_group"], "L");
        assert_eq!(c.hash().unwrap().len(), 64);
        fs::write(&path, r#"{"manifest": "x", "labels": []}"#).unwrap();
        assert!(matches!(AuditConfig::from_file(&path), Err(Error::InvalidConfig(_))));
        fs::write(&path, r#"{"manifest": "x", "bogus": 1}"#).unwrap();
        assert!(matches!(AuditConfig::from_file(&path), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn fig1_without_error_models_skips_calibration() {
        let config = Fig1Config {
            n_per_group: 2,
            models: vec![Fig1Model::Downsampled { voxel_mm: 2.0 }],
            ..Default::default()
        };
        let report = run_fig1_experiment(&config).unwrap();
        assert_eq!(report.records.len(), 4);
        assert!(report.records.iter().all(|r| r.model == "downsampled-2mm" && r.volume_bias < 0.0));
        assert_eq!(report.summary.dsc_gap, None);
    }
}
