//! Overlap, volume-bias, and group-level measures.
//!
//! Volume bias is the normalized signed volume error
//! `(V(pred) − V(ref)) / V(ref)`; a group's expected bias is estimated by
//! the median over its subjects. Group separability is measured by the
//! threshold-free ROC AUC of structure volume.

use std::io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Group;
use crate::volume::LabelMap;

/// Dice similarity `2|A∩B| / (|A|+|B|)` for one label; 1.0 when both sets
/// are empty. Both maps must share a geometry.
pub fn dsc(pred: &LabelMap, reference: &LabelMap, label: u32) -> Result<f64> {
    pred.geometry().ensure_same(reference.geometry())?;
    if !reference.contains_label(label) && !pred.contains_label(label) {
        return Err(Error::UnknownLabel(label));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.labels().iter().zip(reference.labels()) {
        let (ip, ir) = (p == label, r == label);
        a += ip as usize;
        b += ir as usize;
        both += (ip && ir) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

fn physical_volume(map: &LabelMap, label: u32) -> f64 {
    map.count(label) as f64 * map.geometry().voxel_volume()
}

/// Normalized volume bias of one label. The maps may live on different
/// grids; physical volumes are compared.
pub fn volume_bias(pred: &LabelMap, reference: &LabelMap, label: u32) -> Result<f64> {
    if !reference.contains_label(label) {
        return Err(Error::UnknownLabel(label));
    }
    let v_ref = physical_volume(reference, label);
    if v_ref <= 0.0 {
        return Err(Error::EmptyReference(label));
    }
    Ok((physical_volume(pred, label) - v_ref) / v_ref)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Median; the mean of the two central values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let v = sorted(values);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Linearly interpolated quantile of an ascending sample (Hyndman-Fan type 7).
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Unscaled median absolute deviation from the median.
pub fn mad(values: &[f64]) -> Option<f64> {
    let m = median(values)?;
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    median(&dev)
}

/// Mann–Whitney form of the ROC AUC: the probability that a random positive
/// scores above a random negative, ties counting one half.
pub fn roc_auc(values: &[(f64, bool)]) -> Result<f64> {
    let n_pos = values.iter().filter(|v| v.1).count();
    let n_neg = values.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    if let Some((v, _)) = values.iter().find(|v| v.0.is_nan()) {
        return Err(Error::InsufficientData(format!("score {v} is not comparable")));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].0.total_cmp(&values[b].0));

    // Sum of mid-ranks of the positives (ranks counted from 1).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]].0 == values[order[i]].0 {
            j += 1;
        }
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let positives = order[i..=j].iter().filter(|&&k| values[k].1).count();
        rank_sum += mid_rank * positives as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// One row of the per-subject record table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub group: Group,
    pub label: u32,
    pub dsc: f64,
    pub volume_pred_mm3: f64,
    pub volume_ref_mm3: f64,
    pub volume_bias: f64,
}

/// CSV column order of [`SubjectMetrics`] records.
pub const RECORD_COLUMNS: [&str; 7] = [
    "subject_id",
    "group",
    "label",
    "dsc",
    "volume_pred_mm3",
    "volume_ref_mm3",
    "volume_bias",
];

/// Computes one record per label. `dsc_pred` is the prediction already
/// brought onto the reference grid; `volume_pred` is the prediction in the
/// space whose physical volume is compared (usually its native grid).
pub fn subject_metrics(
    subject_id: &str,
    group: Group,
    dsc_pred: &LabelMap,
    volume_pred: &LabelMap,
    reference: &LabelMap,
    labels: &[u32],
) -> Result<Vec<SubjectMetrics>> {
    labels
        .iter()
        .map(|&label| {
            Ok(SubjectMetrics {
                subject_id: subject_id.to_string(),
                group,
                label,
                dsc: dsc(dsc_pred, reference, label)?,
                volume_pred_mm3: physical_volume(volume_pred, label),
                volume_ref_mm3: physical_volume(reference, label),
                volume_bias: volume_bias(volume_pred, reference, label)?,
            })
        })
        .collect()
}

pub fn write_records_csv<W: io::Write>(records: &[SubjectMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_COLUMNS)?;
    for r in records {
        w.write_record([
            r.subject_id.clone(),
            r.group.to_string(),
            r.label.to_string(),
            r.dsc.to_string(),
            r.volume_pred_mm3.to_string(),
            r.volume_ref_mm3.to_string(),
            r.volume_bias.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_records_csv<R: io::Read>(input: R) -> Result<Vec<SubjectMetrics>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RECORD_COLUMNS {
        return Err(Error::InvalidConfig(format!(
            "record CSV header {header:?}, expected {RECORD_COLUMNS:?}"
        )));
    }
    rdr.deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Reads `(value, group == positive)` pairs from a CSV that has a `group`
/// column and the value column `column`. With `label` set, rows whose
/// `label` column holds another id are skipped.
pub fn read_group_values<R: io::Read>(
    input: R,
    column: &str,
    positive: Group,
    label: Option<u32>,
) -> Result<Vec<(f64, bool)>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidConfig(format!("CSV has no {name:?} column")))
    };
    let (group_col, value_col) = (find("group")?, find(column)?);
    let label_col = label.map(|_| find("label")).transpose()?;
    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        if let (Some(i), Some(want)) = (label_col, label) {
            if field(i).parse::<u32>().ok() != Some(want) {
                continue;
            }
        }
        let group: Group = field(group_col)
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("row {}: bad group {:?}", row + 1, field(group_col))))?;
        let value: f64 = field(value_col)
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("row {}: bad value {:?}", row + 1, field(value_col))))?;
        out.push((value, group == positive));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

const MAX_BINS: usize = 256;

/// Freedman–Diaconis bin edges (width `2·IQR·n^(-1/3)`) for the pooled
/// sample, capped at 256 bins. Degenerate spreads get a single bin.
pub fn freedman_diaconis_edges(pooled: &[f64]) -> Vec<f64> {
    let v = sorted(pooled);
    let (lo, hi) = (v[0], v[v.len() - 1]);
    let range = hi - lo;
    let iqr = quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25);
    let width = 2.0 * iqr / (v.len() as f64).cbrt();
    let bins = if range > 0.0 && width > 0.0 {
        ((range / width).ceil() as usize).clamp(1, MAX_BINS)
    } else {
        1
    };
    (0..=bins)
        .map(|i| if i == bins { hi } else { lo + range * i as f64 / bins as f64 })
        .collect()
}

/// Counts `values` into the bins delimited by `edges`; values outside the
/// range land in the end bins.
pub fn histogram(values: &[f64], edges: &[f64]) -> Histogram {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = if hi > lo {
            (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    Histogram {
        edges: edges.to_vec(),
        counts,
    }
}

/// Distance between group medians in units of pooled MAD. When both MADs
/// are zero, distinct medians are flagged as maximal separation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModeSeparation {
    Finite { score: f64 },
    Maximal,
}

impl ModeSeparation {
    /// Numeric view, with `Maximal` mapped to infinity.
    pub fn value(&self) -> f64 {
        match self {
            ModeSeparation::Finite { score } => *score,
            ModeSeparation::Maximal => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub median: f64,
    pub mad: f64,
    pub histogram: Histogram,
    pub separation: ModeSeparation,
}

/// Pooled MAD is the root mean square of the two groups' MADs.
pub fn distribution_summary(volumes: &[f64], other: &[f64]) -> Result<DistributionSummary> {
    if volumes.len() < 2 || other.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need >= 2 volumes per group, got {} and {}",
            volumes.len(),
            other.len()
        )));
    }
    if volumes.iter().chain(other).any(|v| !v.is_finite()) {
        return Err(Error::InsufficientData("non-finite volume".into()));
    }
    let (m_a, m_b) = (median(volumes).unwrap(), median(other).unwrap());
    let (mad_a, mad_b) = (mad(volumes).unwrap(), mad(other).unwrap());
    let pooled = ((mad_a * mad_a + mad_b * mad_b) / 2.0).sqrt();
    let gap = (m_a - m_b).abs();
    let separation = if pooled > 0.0 {
        ModeSeparation::Finite { score: gap / pooled }
    } else if gap == 0.0 {
        ModeSeparation::Finite { score: 0.0 }
    } else {
        ModeSeparation::Maximal
    };
    let pooled_sample: Vec<f64> = volumes.iter().chain(other).copied().collect();
    let edges = freedman_diaconis_edges(&pooled_sample);
    Ok(DistributionSummary {
        median: m_a,
        mad: mad_a,
        histogram: histogram(volumes, &edges),
        separation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: Group,
    pub label: u32,
    pub n: usize,
    pub median_volume_bias: f64,
    pub bias_q1: f64,
    pub bias_q3: f64,
    pub dsc_mean: f64,
    /// Sample standard deviation; 0 for a single record.
    pub dsc_sd: f64,
    /// Predicted volumes against the other groups' predicted volumes;
    /// absent when either side has fewer than two records.
    pub predicted_volumes: Option<DistributionSummary>,
    pub reference_volumes: Option<DistributionSummary>,
}

/// Aggregates one group's records for one label. Records of other groups
/// (same label) provide the comparison side of the distribution summaries.
pub fn group_bias(records: &[SubjectMetrics], group: Group, label: u32) -> Result<GroupSummary> {
    let (mine, others): (Vec<&SubjectMetrics>, Vec<&SubjectMetrics>) = records
        .iter()
        .filter(|r| r.label == label)
        .partition(|r| r.group == group);
    if mine.is_empty() {
        return Err(Error::EmptyGroup(format!("{group} (label {label})")));
    }
    let biases = sorted(&mine.iter().map(|r| r.volume_bias).collect::<Vec<_>>());
    let dscs: Vec<f64> = mine.iter().map(|r| r.dsc).collect();
    let n = mine.len();
    let dsc_mean = dscs.iter().sum::<f64>() / n as f64;
    let dsc_sd = if n > 1 {
        (dscs.iter().map(|d| (d - dsc_mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let distribution = |f: fn(&SubjectMetrics) -> f64| {
        let a: Vec<f64> = mine.iter().map(|r| f(r)).collect();
        let b: Vec<f64> = others.iter().map(|r| f(r)).collect();
        (a.len() >= 2 && b.len() >= 2)
            .then(|| distribution_summary(&a, &b))
            .transpose()
    };
    Ok(GroupSummary {
        group,
        label,
        n,
        median_volume_bias: median(&biases).unwrap(),
        bias_q1: quantile_sorted(&biases, 0.25),
        bias_q3: quantile_sorted(&biases, 0.75),
        dsc_mean,
        dsc_sd,
        predicted_volumes: distribution(|r| r.volume_pred_mm3)?,
        reference_volumes: distribution(|r| r.volume_ref_mm3)?,
    })
}

/// AUC of one label's volume for separating `positive` from the other
/// group, on predicted or reference volumes.
pub fn group_auc(records: &[SubjectMetrics], label: u32, positive: Group, predicted: bool) -> Result<f64> {
    let values: Vec<(f64, bool)> = records
        .iter()
        .filter(|r| r.label == label)
        .map(|r| {
            let v = if predicted { r.volume_pred_mm3 } else { r.volume_ref_mm3 };
            (v, r.group == positive)
        })
        .collect();
    roc_auc(&values)
}
