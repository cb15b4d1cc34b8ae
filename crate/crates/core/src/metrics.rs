//! Classification and localization metrics, group aggregation and reports.
//!
//! Metric functions work on fractions in `[0, 1]`; report rows carry
//! percentages. Undefined metrics (a single class present) are `None`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{AttributeVocabulary, BBox, GroupMap, RegionVocabulary};
use crate::error::{Error, Result};
use crate::geometry::iou;

/// How the decision threshold for BMAC (and zero-shot F1) is picked.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ThresholdPolicy {
    /// Maximize `TPR + TNR - 1` over observed scores; ties go to the lowest
    /// threshold.
    #[default]
    Youden,
    Fixed(f64),
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Youden => write!(f, "youden"),
            ThresholdPolicy::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("youden") {
            return Ok(ThresholdPolicy::Youden);
        }
        if let Some(t) = s.strip_prefix("fixed:") {
            let t: f64 = t
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad fixed threshold `{t}`")))?;
            if !t.is_finite() {
                return Err(Error::Config("fixed threshold must be finite".into()));
            }
            return Ok(ThresholdPolicy::Fixed(t));
        }
        Err(Error::Config(format!("unknown policy `{s}`; expected `youden` or `fixed:<t>`")))
    }
}

impl Serialize for ThresholdPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ThresholdPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y != 0).count();
    (pos, labels.len() - pos)
}

fn check_aligned(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    Ok(())
}

/// Indices sorted by score ascending.
fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    idx
}

/// ROC AUC via the Mann-Whitney statistic with midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_aligned(scores, labels)?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Ok(None);
    }
    let idx = order_by_score(scores);
    // Twice the rank sum keeps every midrank an integer.
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let mid_x2 = (i + j + 2) as u64;
        let tied_pos = idx[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u64;
        rank_sum_x2 += mid_x2 * tied_pos;
        i = j + 1;
    }
    let p64 = p as u64;
    let u_x2 = rank_sum_x2 - p64 * (p64 + 1);
    Ok(Some(u_x2 as f64 / 2.0 / (p * n) as f64))
}

/// Pairwise reference: `(wins + ties / 2) / (P N)`.
pub fn auc_brute_force(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_aligned(scores, labels)?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Ok(None);
    }
    let mut twice = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            if si > sj {
                twice += 2;
            } else if si == sj {
                twice += 1;
            }
        }
    }
    Ok(Some(twice as f64 / 2.0 / (p * n) as f64))
}

/// Threshold maximizing Youden's J with predictions `score >= t`; only
/// observed scores are candidates and ties keep the lowest one.
pub fn youden_threshold(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_aligned(scores, labels)?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Ok(None);
    }
    let idx = order_by_score(scores);
    // Sweep from the highest score down; after consuming a tie block at
    // score s, (tp, fp) are the counts for threshold s.
    let (p64, n64) = (p as u64, n as u64);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best: Option<(u64, f64)> = None;
    let mut i = idx.len();
    while i > 0 {
        let s = scores[idx[i - 1]];
        while i > 0 && scores[idx[i - 1]] == s {
            if labels[idx[i - 1]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i -= 1;
        }
        // J * P * N + P * N = tp * N + tn * P, compared exactly.
        let score = tp * n64 + (n64 - fp) * p64;
        if best.is_none_or(|(b, _)| score >= b) {
            best = Some((score, s));
        }
    }
    Ok(best.map(|(_, t)| t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_aligned(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Resolves the policy to a concrete threshold for this data.
pub fn resolve_threshold(scores: &[f64], labels: &[u8], policy: ThresholdPolicy) -> Result<Option<f64>> {
    match policy {
        ThresholdPolicy::Fixed(t) => Ok(Some(t)),
        ThresholdPolicy::Youden => youden_threshold(scores, labels),
    }
}

/// Balanced accuracy `(TPR + TNR) / 2` at the policy's threshold.
pub fn bmac(scores: &[f64], labels: &[u8], policy: ThresholdPolicy) -> Result<Option<f64>> {
    check_aligned(scores, labels)?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Ok(None);
    }
    let Some(t) = resolve_threshold(scores, labels, policy)? else {
        return Ok(None);
    };
    let c = confusion(scores, labels, t)?;
    Ok(Some((c.tp as f64 / p as f64 + c.tn as f64 / n as f64) / 2.0))
}

/// F1 of `score >= threshold`; zero when there are no true positives.
pub fn f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    let c = confusion(scores, labels, threshold)?;
    if c.tp == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64)
}

/// IoU thresholds `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Mean over `thresholds` of the fraction of valid regions whose predicted
/// box reaches that IoU. `None` when no region is valid.
pub fn localization_map(pred: &[BBox], target: &[Option<BBox>], thresholds: &[f64]) -> Result<Option<f64>> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("{} predicted boxes but {} targets", pred.len(), target.len())));
    }
    if thresholds.is_empty() {
        return Err(Error::EmptyInput("no IoU thresholds".into()));
    }
    let ious: Vec<f64> = pred
        .iter()
        .zip(target)
        .filter_map(|(p, t)| t.as_ref().map(|t| iou(p, t)))
        .collect();
    if ious.is_empty() {
        return Ok(None);
    }
    let hits: usize = thresholds
        .iter()
        .map(|&th| ious.iter().filter(|&&v| v >= th).count())
        .sum();
    Ok(Some(hits as f64 / (ious.len() * thresholds.len()) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Attribute,
    Group,
    Region,
    AverageByGroup,
    AverageByAttribute,
    AverageByRegion,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Attribute => "attribute",
            Scope::Group => "group",
            Scope::Region => "region",
            Scope::AverageByGroup => "average_by_group",
            Scope::AverageByAttribute => "average_by_attribute",
            Scope::AverageByRegion => "average_by_region",
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attribute" => Scope::Attribute,
            "group" => Scope::Group,
            "region" => Scope::Region,
            "average_by_group" => Scope::AverageByGroup,
            "average_by_attribute" => Scope::AverageByAttribute,
            "average_by_region" => Scope::AverageByRegion,
            other => return Err(Error::Config(format!("unknown scope `{other}`"))),
        })
    }
}

/// One report row; metric values are percentages, unrounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scope: Scope,
    pub name: String,
    pub bmac: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
}

impl MetricRow {
    pub fn new(scope: Scope, name: impl Into<String>, bmac: Option<f64>, auc: Option<f64>, f1: Option<f64>) -> Self {
        Self {
            scope,
            name: name.into(),
            bmac,
            auc,
            f1,
        }
    }

    fn values(&self) -> [Option<f64>; 3] {
        [self.bmac, self.auc, self.f1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Ties to the even last digit.
    #[default]
    HalfEven,
    /// Ties away from zero.
    HalfUp,
}

impl FromStr for Rounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half_even" | "half-even" => Ok(Rounding::HalfEven),
            "half_up" | "half-up" => Ok(Rounding::HalfUp),
            other => Err(Error::Config(format!("unknown rounding `{other}`"))),
        }
    }
}

/// Rounds to one decimal. Values within `1e-9` of a half step count as ties
/// so that decimal means such as `2.25` round the same way as when done by hand.
pub fn round1(x: f64, mode: Rounding) -> f64 {
    let scaled = x * 10.0;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let r = if (frac - 0.5).abs() < 1e-9 {
        match mode {
            Rounding::HalfUp => {
                if x >= 0.0 {
                    floor + 1.0
                } else {
                    floor
                }
            }
            Rounding::HalfEven => {
                if floor.rem_euclid(2.0) == 0.0 {
                    floor
                } else {
                    floor + 1.0
                }
            }
        }
    } else {
        scaled.round()
    };
    r / 10.0
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, count) = values.flatten().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

fn mean_row(scope: Scope, name: &str, rows: &[&MetricRow]) -> MetricRow {
    let col = |k: usize| mean(rows.iter().map(|r| r.values()[k]));
    MetricRow::new(scope, name, col(0), col(1), col(2))
}

/// Group rows (unrounded macro means of member attributes) followed by the
/// average over groups and the average over attributes.
///
/// `attribute_rows` may list attributes in any order; every vocabulary
/// attribute must be present.
pub fn aggregate_groups(
    attribute_rows: &[MetricRow],
    groups: &GroupMap,
    vocab: &AttributeVocabulary,
) -> Result<Vec<MetricRow>> {
    let mut by_index: Vec<Option<&MetricRow>> = vec![None; vocab.len()];
    for row in attribute_rows.iter().filter(|r| r.scope == Scope::Attribute) {
        let i = vocab
            .index_of(&row.name)
            .ok_or_else(|| Error::UnknownAttribute(row.name.clone()))?;
        by_index[i] = Some(row);
    }
    let rows: Vec<&MetricRow> = by_index
        .iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::MissingRow(vocab.name(i).to_string())))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(groups.groups().len() + 2);
    for g in groups.groups() {
        let members: Vec<&MetricRow> = g
            .members
            .iter()
            .map(|m| {
                vocab
                    .index_of(m)
                    .map(|i| rows[i])
                    .ok_or_else(|| Error::UnknownAttribute(m.clone()))
            })
            .collect::<Result<_>>()?;
        out.push(mean_row(Scope::Group, &g.name, &members));
    }
    let group_refs: Vec<&MetricRow> = out.iter().collect();
    let by_group = mean_row(Scope::AverageByGroup, "Average", &group_refs);
    let by_attribute = mean_row(Scope::AverageByAttribute, "Average", &rows);
    out.push(by_group);
    out.push(by_attribute);
    Ok(out)
}

/// Metric percentages for one score column.
pub fn score_row(
    scope: Scope,
    name: &str,
    scores: &[f64],
    labels: &[u8],
    policy: ThresholdPolicy,
) -> Result<MetricRow> {
    let pct = |v: Option<f64>| v.map(|x| 100.0 * x);
    let auc_v = auc(scores, labels)?;
    let bmac_v = bmac(scores, labels, policy)?;
    let f1_v = match resolve_threshold(scores, labels, policy)? {
        Some(t) if auc_v.is_some() => Some(f1(scores, labels, t)?),
        _ => None,
    };
    Ok(MetricRow::new(scope, name, pct(bmac_v), pct(auc_v), pct(f1_v)))
}

/// Per-attribute rows from an `N x C` score matrix and labels.
pub fn attribute_rows(
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    vocab: &AttributeVocabulary,
    policy: ThresholdPolicy,
) -> Result<Vec<MetricRow>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} score rows but {} label rows", scores.len(), labels.len())));
    }
    if scores.iter().any(|r| r.len() != vocab.len())
        || labels.iter().any(|r| r.len() != vocab.len())
    {
        return Err(Error::Shape(format!("rows must have {} attribute columns", vocab.len())));
    }
    (0..vocab.len())
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let y: Vec<u8> = labels.iter().map(|r| r[c]).collect();
            score_row(Scope::Attribute, vocab.name(c), &s, &y, policy)
        })
        .collect()
}

/// Scores and labels gathered for one region across a corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionSamples {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// One row per region plus their average. Regions whose labels are single
/// class get missing metrics and are left out of the average.
pub fn regionwise_eval(
    samples: &[RegionSamples],
    regions: &RegionVocabulary,
    policy: ThresholdPolicy,
) -> Result<Vec<MetricRow>> {
    if samples.len() != regions.len() {
        return Err(Error::Shape(format!(
            "{} region sample sets for {} regions",
            samples.len(),
            regions.len()
        )));
    }
    let mut rows = Vec::with_capacity(samples.len() + 1);
    for (r, s) in samples.iter().enumerate() {
        rows.push(score_row(Scope::Region, regions.name(r), &s.scores, &s.labels, policy)?);
    }
    let refs: Vec<&MetricRow> = rows.iter().collect();
    let avg = mean_row(Scope::AverageByRegion, "Average", &refs);
    rows.push(avg);
    Ok(rows)
}

/// Settings recorded at the top of every report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyHeader {
    pub bmac: ThresholdPolicy,
    pub f1_threshold: ThresholdPolicy,
    pub rounding: Rounding,
}

impl PolicyHeader {
    pub fn new(policy: ThresholdPolicy, rounding: Rounding) -> Self {
        Self {
            bmac: policy,
            f1_threshold: policy,
            rounding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub policy: PolicyHeader,
    pub rows: Vec<MetricRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detection_map: Option<f64>,
}

fn fmt_cell(v: Option<f64>, rounding: Rounding) -> String {
    match v {
        Some(x) => format!("{:.1}", round1(x, rounding)),
        None => String::new(),
    }
}

/// Writes `[model,]scope,name,bmac,auc,f1`, one decimal, empty for missing.
pub fn write_rows_csv<W: Write>(
    out: W,
    rows: &[(Option<&str>, &MetricRow)],
    rounding: Rounding,
) -> Result<()> {
    let with_model = rows.iter().any(|(m, _)| m.is_some());
    let mut w = csv::WriterBuilder::new().from_writer(out);
    let mut header = vec!["scope", "name", "bmac", "auc", "f1"];
    if with_model {
        header.insert(0, "model");
    }
    w.write_record(&header).map_err(csv_err)?;
    for (model, row) in rows {
        let mut rec = vec![
            row.scope.as_str().to_string(),
            row.name.clone(),
            fmt_cell(row.bmac, rounding),
            fmt_cell(row.auc, rounding),
            fmt_cell(row.f1, rounding),
        ];
        if with_model {
            rec.insert(0, model.unwrap_or_default().to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv output>", e))?;
    Ok(())
}

impl MetricReport {
    pub fn to_csv(&self) -> Result<String> {
        let rows: Vec<(Option<&str>, &MetricRow)> = self.rows.iter().map(|r| (None, r)).collect();
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &rows, self.policy.rounding)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    /// JSON mirror of the CSV with the policy header and rounded values.
    pub fn to_json(&self) -> serde_json::Value {
        let r = self.policy.rounding;
        let cell = |v: Option<f64>| v.map(|x| round1(x, r));
        serde_json::json!({
            "policy": self.policy,
            "detection_map": self.detection_map,
            "rows": self.rows.iter().map(|row| serde_json::json!({
                "scope": row.scope,
                "name": row.name,
                "bmac": cell(row.bmac),
                "auc": cell(row.auc),
                "f1": cell(row.f1),
            })).collect::<Vec<_>>(),
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Record {
        line,
        field: "csv".into(),
        message: e.to_string(),
    }
}

/// A per-attribute table, optionally carrying several models' columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    /// `(model, row)` in file order; `model` is `None` without a model column.
    pub rows: Vec<(Option<String>, MetricRow)>,
}

impl AttributeTable {
    /// Distinct models in first-appearance order.
    pub fn models(&self) -> Vec<Option<String>> {
        let mut out: Vec<Option<String>> = Vec::new();
        for (m, _) in &self.rows {
            if !out.contains(m) {
                out.push(m.clone());
            }
        }
        out
    }

    pub fn rows_for(&self, model: &Option<String>) -> Vec<MetricRow> {
        self.rows
            .iter()
            .filter(|(m, _)| m == model)
            .map(|(_, r)| r.clone())
            .collect()
    }
}

/// Reads `[model,]<name>,bmac,auc,f1` where the name column is called
/// `attribute`, `name`, `group` or `region`. Blank cells are missing values.
pub fn read_attribute_table<R: Read>(input: R) -> Result<AttributeTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let find = |names: &[&str]| headers.iter().position(|h| names.contains(&h.to_ascii_lowercase().as_str()));
    let name_col = find(&["attribute", "name", "group", "region"]).ok_or_else(|| Error::Record {
        line: 1,
        field: "header".into(),
        message: "expected an `attribute` column".into(),
    })?;
    let model_col = find(&["model"]);
    let scope_col = find(&["scope"]);
    let metric_col = |m: &str| {
        find(&[m]).ok_or_else(|| Error::Record {
            line: 1,
            field: "header".into(),
            message: format!("missing `{m}` column"),
        })
    };
    let (bc, ac, fc) = (metric_col("bmac")?, metric_col("auc")?, metric_col("f1")?);
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = k + 2;
        let cell = |col: usize, field: &str| -> Result<Option<f64>> {
            let s = rec.get(col).unwrap_or("");
            if s.is_empty() {
                return Ok(None);
            }
            let v: f64 = s.parse().map_err(|_| Error::Record {
                line,
                field: field.into(),
                message: format!("not a number: `{s}`"),
            })?;
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Record {
                    line,
                    field: field.into(),
                    message: format!("percentage out of range: {v}"),
                });
            }
            Ok(Some(v))
        };
        let scope = match scope_col {
            Some(c) => rec.get(c).unwrap_or("").parse().map_err(|e: Error| Error::Record {
                line,
                field: "scope".into(),
                message: e.to_string(),
            })?,
            None => Scope::Attribute,
        };
        let row = MetricRow::new(
            scope,
            rec.get(name_col).unwrap_or("").to_string(),
            cell(bc, "bmac")?,
            cell(ac, "auc")?,
            cell(fc, "f1")?,
        );
        let model = model_col.map(|c| rec.get(c).unwrap_or("").to_string());
        rows.push((model, row));
    }
    Ok(AttributeTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_basic_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.5; 4], &[1, 0, 1, 0]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]).unwrap(), None);
    }

    #[test]
    fn bmac_examples() {
        let s = [0.9, 0.8, 0.4, 0.1];
        let fixed = ThresholdPolicy::Fixed(0.5);
        assert_eq!(bmac(&s, &[1, 1, 0, 0], fixed).unwrap(), Some(1.0));
        assert_eq!(bmac(&s, &[1, 0, 1, 0], fixed).unwrap(), Some(0.5));
        assert_eq!(bmac(&s, &[1, 1, 0, 0], ThresholdPolicy::Youden).unwrap(), Some(1.0));
        assert_eq!(bmac(&[0.3; 4], &[1, 0, 1, 0], ThresholdPolicy::Youden).unwrap(), Some(0.5));
    }

    #[test]
    fn youden_ties_pick_lowest() {
        // Thresholds 0.8 and 0.2 both give J = 0.5.
        let t = youden_threshold(&[0.8, 0.5, 0.2, 0.1], &[1, 0, 1, 0]).unwrap();
        assert_eq!(t, Some(0.2));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[0.9, 0.9, 0.1], &[1, 1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(f1(&[0.1, 0.1], &[1, 1], 0.5).unwrap(), 0.0);
        let v = f1(&[0.9, 0.9, 0.9, 0.1, 0.1], &[1, 1, 0, 1, 0], 0.5).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn localization_examples() {
        let t = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let th = iou_thresholds();
        assert_eq!(localization_map(&[t], &[Some(t)], &th).unwrap(), Some(1.0));
        let far = BBox::new(0.0, 0.0, 0.1, 0.1).unwrap();
        let other = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(localization_map(&[far], &[Some(other)], &th).unwrap(), Some(0.0));
        let p = BBox::new(0.0, 0.0, 0.6, 1.0).unwrap();
        assert_eq!(iou(&p, &t), 0.6);
        assert_eq!(localization_map(&[p], &[Some(t)], &th).unwrap(), Some(0.3));
        assert_eq!(localization_map(&[p], &[None], &th).unwrap(), None);
    }

    #[test]
    fn rounding_modes() {
        assert_eq!(round1(2.25, Rounding::HalfEven), 2.2);
        assert_eq!(round1(2.25, Rounding::HalfUp), 2.3);
        assert_eq!(round1(2.35, Rounding::HalfEven), 2.4);
        assert_eq!(round1(52.0, Rounding::HalfEven), 52.0);
        assert_eq!(round1((51.5 + 49.0 + 58.2 + 50.9 + 50.4) / 5.0, Rounding::HalfUp), 52.0);
        assert_eq!(round1((27.2 + 3.9 + 3.5) / 3.0, Rounding::HalfEven), 11.5);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("youden".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Youden);
        assert_eq!("fixed:0.25".parse::<ThresholdPolicy>().unwrap(), ThresholdPolicy::Fixed(0.25));
        assert!("median".parse::<ThresholdPolicy>().is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let rows = vec![
            MetricRow::new(Scope::Attribute, "Lung Opacity", Some(51.25), Some(60.0), None),
            MetricRow::new(Scope::Attribute, "Mass, other", Some(10.0), Some(20.0), Some(30.04)),
        ];
        let report = MetricReport {
            policy: PolicyHeader::new(ThresholdPolicy::Youden, Rounding::HalfEven),
            rows,
            detection_map: None,
        };
        let text = report.to_csv().unwrap();
        assert!(text.starts_with("scope,name,bmac,auc,f1\n"));
        assert!(text.contains("attribute,Lung Opacity,51.2,60.0,\n"));
        let back = read_attribute_table(text.as_bytes()).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[1].1.name, "Mass, other");
        assert_eq!(back.rows[0].1.f1, None);
    }
}
