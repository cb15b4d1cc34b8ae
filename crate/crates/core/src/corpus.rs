//! Corpus data model: vocabularies, group map, boxes, studies, and the JSONL
//! corpus format.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// The 20 disease attributes reported per study, in canonical order.
pub const DEFAULT_ATTRIBUTES: [&str; 20] = [
    "Atelectasis",
    "Consolidation",
    "Costophrenic Angle Blunting",
    "Elevated Hemidiaphragm",
    "Enlarged Cardiac Silhouette",
    "Enlarged Hilum",
    "Hyperaeration",
    "Linear/Patchy Atelectasis",
    "Lobar/Segmental Collapse",
    "Lung Lesion",
    "Lung Opacity",
    "Mass/Nodule (Not Otherwise Specified)",
    "Pleural Effusion",
    "Pleural/Parenchymal Scarring",
    "Pulmonary Edema/Hazy Opacity",
    "Scoliosis",
    "Spinal Degenerative Changes",
    "Tortuous Aorta",
    "Vascular Calcification",
    "Vascular Congestion",
];

/// The 29 standardized anatomical regions, in canonical order.
pub const DEFAULT_REGIONS: [&str; 29] = [
    "Right lung",
    "Right upper lung zone",
    "Right mid lung zone",
    "Right lower lung zone",
    "Right hilar structures",
    "Right apical zone",
    "Right costophrenic angle",
    "Right hemidiaphragm",
    "Left lung",
    "Left upper lung zone",
    "Left mid lung zone",
    "Left lower lung zone",
    "Left hilar structures",
    "Left apical zone",
    "Left costophrenic angle",
    "Left hemidiaphragm",
    "Trachea",
    "Spine",
    "Right clavicle",
    "Left clavicle",
    "Aortic arch",
    "Mediastinum",
    "Upper mediastinum",
    "SVC",
    "Cardiac silhouette",
    "Cavoatrial junction",
    "Right atrium",
    "Carina",
    "Abdomen",
];

/// Attribute groups as (group name, members).
pub const DEFAULT_GROUPS: [(&str, &[&str]); 7] = [
    (
        "Lung parenchyma & air-space disease",
        &[
            "Consolidation",
            "Lung Opacity",
            "Pulmonary Edema/Hazy Opacity",
            "Lung Lesion",
            "Mass/Nodule (Not Otherwise Specified)",
        ],
    ),
    (
        "Atelectasis & collapse",
        &["Atelectasis", "Linear/Patchy Atelectasis", "Lobar/Segmental Collapse"],
    ),
    (
        "Pleural space & pleura",
        &[
            "Pleural Effusion",
            "Costophrenic Angle Blunting",
            "Pleural/Parenchymal Scarring",
        ],
    ),
    ("Inflation & airway mechanics", &["Hyperaeration"]),
    ("Diaphragm & sub-diaphragmatic", &["Elevated Hemidiaphragm"]),
    (
        "Cardiomediastinal & hilar structures",
        &[
            "Enlarged Cardiac Silhouette",
            "Enlarged Hilum",
            "Vascular Congestion",
            "Tortuous Aorta",
            "Vascular Calcification",
        ],
    ),
    (
        "Musculoskeletal & thoracic cage",
        &["Scoliosis", "Spinal Degenerative Changes"],
    ),
];

fn normalize_key(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Lowercased attribute name with any parenthetical qualifier removed,
/// e.g. `"Mass/Nodule (Not Otherwise Specified)"` becomes `"mass/nodule"`.
pub fn attribute_phrase(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut depth = 0usize;
    for ch in name.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            _ if depth == 0 => out.push(ch),
            _ => {}
        }
    }
    out.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn build_index(names: &[String], kind: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if name.trim().is_empty() {
            return Err(Error::Vocabulary(format!("empty {kind} name at position {i}")));
        }
        if index.insert(normalize_key(name), i).is_some() {
            return Err(Error::Vocabulary(format!("duplicate {kind} name `{name}`")));
        }
    }
    Ok(index)
}

fn load_name_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Ordered disease attributes with case-insensitive lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVocabulary {
    names: Vec<String>,
    phrases: Vec<String>,
    index: HashMap<String, usize>,
}

impl AttributeVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Vocabulary("attribute vocabulary is empty".into()));
        }
        let index = build_index(&names, "attribute")?;
        let phrases = names.iter().map(|n| attribute_phrase(n)).collect();
        Ok(Self {
            names,
            phrases,
            index,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(load_name_list(path)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    /// Matching phrase used for text search (see [`attribute_phrase`]).
    pub fn phrase(&self, i: usize) -> &str {
        &self.phrases[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(&normalize_key(name)).copied()
    }

    /// Attributes whose phrase occurs as a lowercase substring of `text`,
    /// in vocabulary order.
    pub fn match_text(&self, text: &str) -> Vec<usize> {
        let lower = text.to_lowercase();
        (0..self.phrases.len())
            .filter(|&i| lower.contains(self.phrases[i].as_str()))
            .collect()
    }
}

impl Default for AttributeVocabulary {
    fn default() -> Self {
        Self::new(DEFAULT_ATTRIBUTES.iter().map(|s| s.to_string()).collect())
            .expect("default attribute vocabulary is valid")
    }
}

/// Ordered anatomical region names with case-insensitive, trimmed lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl RegionVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Vocabulary("region vocabulary is empty".into()));
        }
        let index = build_index(&names, "region")?;
        Ok(Self { names, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(load_name_list(path)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(&normalize_key(name)).copied()
    }
}

impl Default for RegionVocabulary {
    fn default() -> Self {
        Self::new(DEFAULT_REGIONS.iter().map(|s| s.to_string()).collect())
            .expect("default region vocabulary is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub members: Vec<String>,
}

/// Partition of the attribute vocabulary into named groups.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMap {
    groups: Vec<Group>,
    /// Attribute index -> group index.
    membership: Vec<usize>,
}

#[derive(Deserialize)]
struct GroupFile {
    groups: Vec<Group>,
}

impl GroupMap {
    /// Validates that `groups` partitions `vocab`. Member names are
    /// canonicalized to the vocabulary spelling.
    pub fn new(groups: Vec<Group>, vocab: &AttributeVocabulary) -> Result<Self> {
        let mut owner: Vec<Option<usize>> = vec![None; vocab.len()];
        let mut canonical = Vec::with_capacity(groups.len());
        for (g, group) in groups.iter().enumerate() {
            let mut members = Vec::with_capacity(group.members.len());
            for member in &group.members {
                let a = vocab
                    .index_of(member)
                    .ok_or_else(|| Error::UnknownAttribute(member.clone()))?;
                if let Some(prev) = owner[a] {
                    return Err(Error::DuplicateMembership {
                        attribute: vocab.name(a).to_string(),
                        first: groups[prev].name.clone(),
                        second: group.name.clone(),
                    });
                }
                owner[a] = Some(g);
                members.push(vocab.name(a).to_string());
            }
            canonical.push(Group {
                name: group.name.clone(),
                members,
            });
        }
        let membership = owner
            .iter()
            .enumerate()
            .map(|(a, g)| g.ok_or_else(|| Error::UncoveredAttribute(vocab.name(a).to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            groups: canonical,
            membership,
        })
    }

    pub fn from_json(text: &str, vocab: &AttributeVocabulary) -> Result<Self> {
        let file: GroupFile = serde_json::from_str(text)?;
        Self::new(file.groups, vocab)
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn group_of(&self, attribute: usize) -> usize {
        self.membership[attribute]
    }

    pub fn to_json(&self) -> Value {
        json!({ "groups": self.groups })
    }
}

impl GroupMap {
    pub fn default_for(vocab: &AttributeVocabulary) -> Result<Self> {
        let groups = DEFAULT_GROUPS
            .iter()
            .map(|(name, members)| Group {
                name: name.to_string(),
                members: members.iter().map(|m| m.to_string()).collect(),
            })
            .collect();
        Self::new(groups, vocab)
    }
}

pub fn load_group_map(path: &Path, vocab: &AttributeVocabulary) -> Result<GroupMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GroupMap::from_json(&text, vocab)
}

/// Axis-aligned box in normalized corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Validated constructor for stored boxes.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let coords = [x1, y1, x2, y2];
        let in_range = coords.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c));
        if !in_range || x1 >= x2 || y1 >= y2 {
            return Err(Error::DegenerateBox(coords));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Unvalidated constructor, used for predictions that may leave [0,1].
    pub const fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// G x G x F feature grid, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(size: usize, channels: usize) -> Self {
        Self {
            size,
            channels,
            data: vec![0.0; size * size * channels],
        }
    }

    #[inline]
    pub fn offset(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.size + col) * self.channels + channel
    }

    pub fn at(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.offset(row, col, channel)]
    }

    /// Center of cell (row, col) in normalized image coordinates.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let g = self.size as f64;
        ((col as f64 + 0.5) / g, (row as f64 + 0.5) / g)
    }
}

/// One image: feature grid, region boxes, per-region findings and labels.
///
/// `regions`, `findings` are indexed by [`RegionVocabulary`] position and
/// `labels` by [`AttributeVocabulary`] position.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub grid: Grid,
    pub regions: Vec<Option<BBox>>,
    pub findings: Vec<Vec<String>>,
    pub labels: Vec<u8>,
}

impl Study {
    pub fn validate(&self, attributes: &AttributeVocabulary, regions: &RegionVocabulary) -> Result<()> {
        let field_err = |field: &str, message: String| Error::Record {
            line: 0,
            field: field.to_string(),
            message,
        };
        if self.labels.len() != attributes.len() {
            return Err(field_err("labels", format!("expected {} entries", attributes.len())));
        }
        if self.labels.iter().any(|&y| y > 1) {
            return Err(field_err("labels", "entries must be 0 or 1".into()));
        }
        if self.regions.len() != regions.len() || self.findings.len() != regions.len() {
            return Err(field_err("regions", format!("expected {} region slots", regions.len())));
        }
        for (r, sentences) in self.findings.iter().enumerate() {
            if !sentences.is_empty() && self.regions[r].is_none() {
                return Err(field_err(
                    "findings",
                    format!("region `{}` has findings but no box", regions.name(r)),
                ));
            }
        }
        if self.grid.data.len() != self.grid.size * self.grid.size * self.grid.channels {
            return Err(field_err("grid.data", "length does not match size*size*channels".into()));
        }
        if self.grid.data.iter().any(|v| !v.is_finite()) {
            return Err(field_err("grid.data", "non-finite value".into()));
        }
        Ok(())
    }

    pub fn to_json(&self, attributes: &AttributeVocabulary, regions: &RegionVocabulary) -> Value {
        let region_list: Vec<Value> = self
            .regions
            .iter()
            .enumerate()
            .filter_map(|(r, b)| {
                b.map(|b| json!({ "name": regions.name(r), "box": b.to_array() }))
            })
            .collect();
        let mut findings = Map::new();
        for (r, sentences) in self.findings.iter().enumerate() {
            if !sentences.is_empty() {
                findings.insert(regions.name(r).to_string(), json!(sentences));
            }
        }
        let mut labels = Map::new();
        for (a, &y) in self.labels.iter().enumerate() {
            labels.insert(attributes.name(a).to_string(), json!(y));
        }
        json!({
            "study_id": self.study_id,
            "grid": {
                "size": self.grid.size,
                "channels": self.grid.channels,
                "data": self.grid.data,
            },
            "regions": region_list,
            "findings": findings,
            "labels": labels,
        })
    }
}

struct RecordParser<'a> {
    line: usize,
    attributes: &'a AttributeVocabulary,
    regions: &'a RegionVocabulary,
}

impl RecordParser<'_> {
    fn err(&self, field: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Record {
            line: self.line,
            field: field.into(),
            message: message.into(),
        }
    }

    fn get<'v>(&self, obj: &'v Map<String, Value>, field: &str) -> Result<&'v Value> {
        obj.get(field).ok_or_else(|| self.err(field, "missing"))
    }

    fn usize_field(&self, obj: &Map<String, Value>, field: &str, path: &str) -> Result<usize> {
        self.get(obj, field)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| self.err(path, "expected a non-negative integer"))
    }

    fn parse(&self, text: &str) -> Result<Study> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| self.err("record", e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| self.err("record", "expected a JSON object"))?;

        let study_id = self
            .get(obj, "study_id")?
            .as_str()
            .ok_or_else(|| self.err("study_id", "expected a string"))?
            .to_string();

        let grid_obj = self
            .get(obj, "grid")?
            .as_object()
            .ok_or_else(|| self.err("grid", "expected an object"))?;
        let size = self.usize_field(grid_obj, "size", "grid.size")?;
        let channels = self.usize_field(grid_obj, "channels", "grid.channels")?;
        let raw = grid_obj
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| self.err("grid.data", "expected an array"))?;
        if raw.len() != size * size * channels {
            return Err(self.err(
                "grid.data",
                format!("expected {} values, found {}", size * size * channels, raw.len()),
            ));
        }
        let mut data = Vec::with_capacity(raw.len());
        for (i, v) in raw.iter().enumerate() {
            let x = v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| self.err(format!("grid.data[{i}]"), "expected a finite number"))?;
            data.push(x);
        }

        let m = self.regions.len();
        let mut boxes: Vec<Option<BBox>> = vec![None; m];
        let region_list = self
            .get(obj, "regions")?
            .as_array()
            .ok_or_else(|| self.err("regions", "expected an array"))?;
        for (i, entry) in region_list.iter().enumerate() {
            let name = entry
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| self.err(format!("regions[{i}].name"), "expected a string"))?;
            let r = self
                .regions
                .index_of(name)
                .ok_or_else(|| Error::UnknownRegion(name.to_string()))?;
            let coords = entry
                .get("box")
                .and_then(Value::as_array)
                .filter(|a| a.len() == 4)
                .ok_or_else(|| self.err(format!("regions[{i}].box"), "expected 4 numbers"))?;
            let mut c = [0.0; 4];
            for (k, v) in coords.iter().enumerate() {
                c[k] = v
                    .as_f64()
                    .ok_or_else(|| self.err(format!("regions[{i}].box[{k}]"), "expected a number"))?;
            }
            if boxes[r].is_some() {
                return Err(self.err(format!("regions[{i}].name"), format!("duplicate region `{name}`")));
            }
            boxes[r] = Some(BBox::from_array(c)?);
        }

        let mut findings: Vec<Vec<String>> = vec![Vec::new(); m];
        if let Some(f) = obj.get("findings") {
            let f = f
                .as_object()
                .ok_or_else(|| self.err("findings", "expected an object"))?;
            for (name, sentences) in f {
                let r = self
                    .regions
                    .index_of(name)
                    .ok_or_else(|| Error::UnknownRegion(name.clone()))?;
                if boxes[r].is_none() {
                    return Err(self.err(
                        format!("findings.{name}"),
                        "region has findings but no box entry",
                    ));
                }
                let list = sentences
                    .as_array()
                    .ok_or_else(|| self.err(format!("findings.{name}"), "expected an array"))?;
                for s in list {
                    let s = s.as_str().ok_or_else(|| {
                        self.err(format!("findings.{name}"), "expected an array of strings")
                    })?;
                    findings[r].push(s.to_string());
                }
            }
        }

        let mut labels = vec![0u8; self.attributes.len()];
        let label_obj = self
            .get(obj, "labels")?
            .as_object()
            .ok_or_else(|| self.err("labels", "expected an object"))?;
        for (name, v) in label_obj {
            let a = self
                .attributes
                .index_of(name)
                .ok_or_else(|| Error::UnknownAttribute(name.clone()))?;
            labels[a] = match v.as_u64() {
                Some(y @ (0 | 1)) => y as u8,
                _ => return Err(self.err(format!("labels.{name}"), "expected 0 or 1")),
            };
        }

        Ok(Study {
            study_id,
            grid: Grid {
                size,
                channels,
                data,
            },
            regions: boxes,
            findings,
            labels,
        })
    }
}

/// Parses JSONL corpus text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus(
    text: &str,
    attributes: &AttributeVocabulary,
    regions: &RegionVocabulary,
) -> Result<Vec<Study>> {
    let mut studies = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parser = RecordParser {
            line: i + 1,
            attributes,
            regions,
        };
        studies.push(parser.parse(line)?);
    }
    Ok(studies)
}

pub fn load_corpus(
    path: &Path,
    attributes: &AttributeVocabulary,
    regions: &RegionVocabulary,
) -> Result<Vec<Study>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, attributes, regions)
}

pub fn corpus_to_string(
    studies: &[Study],
    attributes: &AttributeVocabulary,
    regions: &RegionVocabulary,
) -> String {
    let mut out = String::new();
    for s in studies {
        out.push_str(&s.to_json(attributes, regions).to_string());
        out.push('\n');
    }
    out
}

pub fn write_corpus(
    path: &Path,
    studies: &[Study],
    attributes: &AttributeVocabulary,
    regions: &RegionVocabulary,
) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(corpus_to_string(studies, attributes, regions).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Label counts over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub num_studies: usize,
    /// Positive count per attribute.
    pub attribute_positives: Vec<usize>,
    /// `region_attribute[r][a]`: studies where a finding of region `r`
    /// mentions attribute `a`.
    pub region_attribute: Vec<Vec<usize>>,
}

pub fn corpus_stats(
    studies: &[Study],
    attributes: &AttributeVocabulary,
    regions: &RegionVocabulary,
) -> Result<CorpusStats> {
    if studies.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut positives = vec![0usize; attributes.len()];
    let mut co = vec![vec![0usize; attributes.len()]; regions.len()];
    for s in studies {
        for (a, &y) in s.labels.iter().enumerate() {
            positives[a] += y as usize;
        }
        for (r, sentences) in s.findings.iter().enumerate() {
            let mut seen = vec![false; attributes.len()];
            for sentence in sentences {
                for a in attributes.match_text(sentence) {
                    seen[a] = true;
                }
            }
            for (a, hit) in seen.into_iter().enumerate() {
                co[r][a] += hit as usize;
            }
        }
    }
    Ok(CorpusStats {
        num_studies: studies.len(),
        attribute_positives: positives,
        region_attribute: co,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocabs() -> (AttributeVocabulary, RegionVocabulary) {
        (AttributeVocabulary::default(), RegionVocabulary::default())
    }

    fn record(box_: &str) -> String {
        format!(
            r#"{{"study_id":"s1","grid":{{"size":1,"channels":2,"data":[0.5,-1.0]}},"regions":[{{"name":"right LUNG ","box":{box_}}}],"findings":{{"Right lung":["low lung volumes. no consolidation"]}},"labels":{{"Atelectasis":1}}}}"#
        )
    }

    #[test]
    fn default_vocabularies() {
        let (a, r) = vocabs();
        assert_eq!(a.len(), 20);
        assert_eq!(a.name(0), "Atelectasis");
        assert_eq!(a.name(19), "Vascular Congestion");
        assert_eq!(r.len(), 29);
        assert_eq!(r.name(0), "Right lung");
        assert_eq!(r.name(28), "Abdomen");
    }

    #[test]
    fn default_groups_partition() {
        let (a, _) = vocabs();
        let gm = GroupMap::default_for(&a).unwrap();
        let counts: Vec<usize> = gm.groups().iter().map(|g| g.members.len()).collect();
        assert_eq!(counts, vec![5, 3, 3, 1, 1, 5, 2]);
    }

    #[test]
    fn empty_text_is_empty_corpus() {
        let (a, r) = vocabs();
        assert!(parse_corpus("", &a, &r).unwrap().is_empty());
    }

    #[test]
    fn parses_one_record() {
        let (a, r) = vocabs();
        let studies = parse_corpus(&record("[0.1,0.2,0.5,0.6]"), &a, &r).unwrap();
        assert_eq!(studies.len(), 1);
        let s = &studies[0];
        assert_eq!(s.regions[0], Some(BBox::new(0.1, 0.2, 0.5, 0.6).unwrap()));
        assert_eq!(s.findings[0], vec!["low lung volumes. no consolidation"]);
        assert_eq!(s.labels[0], 1);
        assert_eq!(s.labels.iter().map(|&y| y as usize).sum::<usize>(), 1);
    }

    #[test]
    fn rejects_degenerate_box() {
        let (a, r) = vocabs();
        let err = parse_corpus(&record("[0.3,0.2,0.3,0.6]"), &a, &r).unwrap_err();
        assert!(err.to_string().contains("degenerate box"), "{err}");
    }

    #[test]
    fn rejects_unknown_names() {
        let (a, r) = vocabs();
        let text = record("[0.1,0.2,0.5,0.6]").replace("right LUNG ", "left kidney");
        assert!(matches!(parse_corpus(&text, &a, &r), Err(Error::UnknownRegion(n)) if n == "left kidney"));
        let text = record("[0.1,0.2,0.5,0.6]").replace("\"Atelectasis\"", "\"Pneumothorax\"");
        assert!(matches!(parse_corpus(&text, &a, &r), Err(Error::UnknownAttribute(n)) if n == "Pneumothorax"));
    }

    #[test]
    fn malformed_record_reports_line_and_field() {
        let (a, r) = vocabs();
        let good = record("[0.1,0.2,0.5,0.6]");
        let bad = good.replace("\"size\":1", "\"size\":\"one\"");
        let text = format!("{good}\n{bad}\n");
        match parse_corpus(&text, &a, &r) {
            Err(Error::Record { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "grid.size");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn group_map_errors() {
        let (a, _) = vocabs();
        let mut groups: Vec<Group> = DEFAULT_GROUPS
            .iter()
            .map(|(n, m)| Group {
                name: n.to_string(),
                members: m.iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        let mut missing = groups.clone();
        missing[6].members.retain(|m| m != "Scoliosis");
        let err = GroupMap::new(missing, &a).unwrap_err();
        assert!(err.to_string().contains("uncovered attribute"), "{err}");

        groups[0].members.push("Atelectasis".into());
        let err = GroupMap::new(groups, &a).unwrap_err();
        assert!(err.to_string().contains("duplicate membership"), "{err}");
    }

    #[test]
    fn attribute_phrase_strips_qualifiers() {
        assert_eq!(attribute_phrase("Mass/Nodule (Not Otherwise Specified)"), "mass/nodule");
        assert_eq!(attribute_phrase("Pleural Effusion"), "pleural effusion");
        let a = AttributeVocabulary::default();
        let hits = a.match_text("Small right PLEURAL EFFUSION");
        assert_eq!(hits, vec![a.index_of("pleural effusion").unwrap()]);
    }

    #[test]
    fn stats_count_positives() {
        let (a, r) = vocabs();
        let mut s = parse_corpus(&record("[0.1,0.2,0.5,0.6]"), &a, &r).unwrap().remove(0);
        let stats = corpus_stats(std::slice::from_ref(&s), &a, &r).unwrap();
        assert_eq!(stats.attribute_positives[0], 1);
        assert_eq!(stats.attribute_positives.iter().sum::<usize>(), 1);

        s.labels.iter_mut().for_each(|y| *y = 0);
        let stats = corpus_stats(&[s.clone(), s], &a, &r).unwrap();
        assert!(stats.attribute_positives.iter().all(|&c| c == 0));
        assert!(matches!(corpus_stats(&[], &a, &r), Err(Error::EmptyCorpus)));
    }
}
