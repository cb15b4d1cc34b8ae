//! Seeded synthetic corpora with a planted region -> attribute signal.
//!
//! For every study each attribute is drawn present with its prevalence. A
//! present attribute is planted in one region drawn from the attribute's
//! candidate regions, and with probability `second_region_probability` in a
//! second one. Planting raises channel `fnv1a64(attribute phrase) % F` by
//! `signal` in every grid cell whose center lies in the region box, adds a
//! template sentence to that region's findings, and sets the label.
//!
//! Randomness comes from named per-study substreams (`boxes`, `attributes`,
//! `noise`), so each study is a pure function of `(seed, index)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttributeVocabulary, BBox, Grid, RegionVocabulary, Study};
use crate::error::{Error, Result};
use crate::rng;
use crate::textembed::fnv1a64;

/// Canonical region boxes (x1, y1, x2, y2). The patient's right side is on the
/// image's left.
const LAYOUT: [(&str, [f64; 4]); 29] = [
    ("Right lung", [0.10, 0.15, 0.48, 0.80]),
    ("Right upper lung zone", [0.12, 0.18, 0.46, 0.38]),
    ("Right mid lung zone", [0.11, 0.38, 0.47, 0.58]),
    ("Right lower lung zone", [0.10, 0.58, 0.48, 0.80]),
    ("Right hilar structures", [0.30, 0.35, 0.46, 0.52]),
    ("Right apical zone", [0.15, 0.12, 0.40, 0.24]),
    ("Right costophrenic angle", [0.08, 0.72, 0.22, 0.86]),
    ("Right hemidiaphragm", [0.10, 0.74, 0.46, 0.86]),
    ("Left lung", [0.52, 0.15, 0.90, 0.80]),
    ("Left upper lung zone", [0.54, 0.18, 0.88, 0.38]),
    ("Left mid lung zone", [0.53, 0.38, 0.89, 0.58]),
    ("Left lower lung zone", [0.52, 0.58, 0.90, 0.80]),
    ("Left hilar structures", [0.54, 0.35, 0.70, 0.52]),
    ("Left apical zone", [0.60, 0.12, 0.85, 0.24]),
    ("Left costophrenic angle", [0.78, 0.72, 0.92, 0.86]),
    ("Left hemidiaphragm", [0.54, 0.74, 0.90, 0.86]),
    ("Trachea", [0.45, 0.05, 0.55, 0.35]),
    ("Spine", [0.44, 0.05, 0.56, 0.95]),
    ("Right clavicle", [0.12, 0.10, 0.46, 0.20]),
    ("Left clavicle", [0.54, 0.10, 0.88, 0.20]),
    ("Aortic arch", [0.50, 0.22, 0.62, 0.34]),
    ("Mediastinum", [0.38, 0.15, 0.62, 0.75]),
    ("Upper mediastinum", [0.40, 0.10, 0.60, 0.35]),
    ("SVC", [0.40, 0.25, 0.48, 0.42]),
    ("Cardiac silhouette", [0.38, 0.45, 0.75, 0.78]),
    ("Cavoatrial junction", [0.40, 0.42, 0.48, 0.50]),
    ("Right atrium", [0.36, 0.48, 0.50, 0.72]),
    ("Carina", [0.46, 0.30, 0.54, 0.38]),
    ("Abdomen", [0.10, 0.82, 0.90, 0.98]),
];

/// Attribute -> (prevalence, candidate regions).
const ATTRIBUTE_PRIORS: [(&str, f64, &[&str]); 20] = [
    ("Atelectasis", 0.20, &["Right lower lung zone", "Left lower lung zone", "Right mid lung zone", "Left mid lung zone"]),
    ("Consolidation", 0.10, &["Right lower lung zone", "Left lower lung zone", "Right upper lung zone", "Left upper lung zone"]),
    ("Costophrenic Angle Blunting", 0.08, &["Right costophrenic angle", "Left costophrenic angle"]),
    ("Elevated Hemidiaphragm", 0.05, &["Right hemidiaphragm", "Left hemidiaphragm"]),
    ("Enlarged Cardiac Silhouette", 0.18, &["Cardiac silhouette"]),
    ("Enlarged Hilum", 0.05, &["Right hilar structures", "Left hilar structures"]),
    ("Hyperaeration", 0.05, &["Right lung", "Left lung"]),
    ("Linear/Patchy Atelectasis", 0.08, &["Right lower lung zone", "Left lower lung zone"]),
    ("Lobar/Segmental Collapse", 0.04, &["Right upper lung zone", "Left upper lung zone", "Left lower lung zone"]),
    ("Lung Lesion", 0.04, &["Right upper lung zone", "Left upper lung zone", "Right mid lung zone", "Left mid lung zone"]),
    ("Lung Opacity", 0.30, &["Right lung", "Left lung", "Right lower lung zone", "Left lower lung zone"]),
    ("Mass/Nodule (Not Otherwise Specified)", 0.04, &["Right upper lung zone", "Left upper lung zone", "Right hilar structures", "Left hilar structures"]),
    ("Pleural Effusion", 0.22, &["Right costophrenic angle", "Left costophrenic angle", "Right lower lung zone", "Left lower lung zone"]),
    ("Pleural/Parenchymal Scarring", 0.05, &["Right apical zone", "Left apical zone"]),
    ("Pulmonary Edema/Hazy Opacity", 0.12, &["Right lung", "Left lung", "Right hilar structures", "Left hilar structures"]),
    ("Scoliosis", 0.04, &["Spine"]),
    ("Spinal Degenerative Changes", 0.05, &["Spine"]),
    ("Tortuous Aorta", 0.06, &["Aortic arch"]),
    ("Vascular Calcification", 0.04, &["Aortic arch"]),
    ("Vascular Congestion", 0.08, &["Right hilar structures", "Left hilar structures", "Upper mediastinum"]),
];

const TEMPLATES: [&str; 4] = ["{}", "there is {}", "mild {}", "findings consistent with {}"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub name: String,
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeProfile {
    pub name: String,
    pub prevalence: f64,
    /// Regions the attribute may be planted in.
    pub regions: Vec<String>,
    /// Positive phrasings; `{}` is replaced by the attribute phrase.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_studies: usize,
    pub grid_size: usize,
    pub channels: usize,
    pub signal: f64,
    pub noise_sigma: f64,
    /// Maximum per-study translation applied to the whole layout.
    pub jitter: f64,
    pub second_region_probability: f64,
    pub layout: Vec<RegionLayout>,
    pub attributes: Vec<AttributeProfile>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_studies: 256,
            grid_size: 8,
            channels: 16,
            signal: 1.0,
            noise_sigma: 0.1,
            jitter: 0.0,
            second_region_probability: 0.3,
            layout: LAYOUT
                .iter()
                .map(|(name, b)| RegionLayout {
                    name: name.to_string(),
                    bbox: *b,
                })
                .collect(),
            attributes: ATTRIBUTE_PRIORS
                .iter()
                .map(|(name, p, regions)| AttributeProfile {
                    name: name.to_string(),
                    prevalence: *p,
                    regions: regions.iter().map(|r| r.to_string()).collect(),
                    templates: TEMPLATES.iter().map(|t| t.to_string()).collect(),
                })
                .collect(),
        }
    }
}

impl SynthConfig {
    pub fn attribute_vocabulary(&self) -> Result<AttributeVocabulary> {
        AttributeVocabulary::new(self.attributes.iter().map(|a| a.name.clone()).collect())
    }

    pub fn region_vocabulary(&self) -> Result<RegionVocabulary> {
        RegionVocabulary::new(self.layout.iter().map(|r| r.name.clone()).collect())
    }

    /// Sets every prevalence to `p`.
    pub fn with_uniform_prevalence(mut self, p: f64) -> Self {
        self.attributes.iter_mut().for_each(|a| a.prevalence = p);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.channels == 0 {
            return Err(Error::Config("grid_size and channels must be positive".into()));
        }
        if !self.signal.is_finite() || self.signal < 0.0 {
            return Err(Error::Config(format!("signal must be finite and >= 0, got {}", self.signal)));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter must lie in [0, 0.5), got {}", self.jitter)));
        }
        if !(0.0..=1.0).contains(&self.second_region_probability) {
            return Err(Error::Config("second_region_probability must lie in [0,1]".into()));
        }
        let regions = self.region_vocabulary()?;
        self.attribute_vocabulary()?;
        for r in &self.layout {
            BBox::from_array(r.bbox)?;
        }
        for a in &self.attributes {
            if !(0.0..=1.0).contains(&a.prevalence) {
                return Err(Error::Config(format!("prevalence of `{}` must lie in [0,1]", a.name)));
            }
            if a.templates.is_empty() {
                return Err(Error::Config(format!("attribute `{}` has no templates", a.name)));
            }
            if a.regions.is_empty() {
                return Err(Error::Config(format!("attribute `{}` has no candidate regions", a.name)));
            }
            for r in &a.regions {
                regions.index_of(r).ok_or_else(|| Error::UnknownRegion(r.clone()))?;
            }
        }
        Ok(())
    }
}

/// Grid channel carrying an attribute's signal.
pub fn signal_channel(attribute_name: &str, channels: usize) -> usize {
    let phrase = crate::corpus::attribute_phrase(attribute_name);
    (fnv1a64(phrase.as_bytes()) % channels as u64) as usize
}

/// Which regions each attribute was planted in, per study.
#[derive(Debug, Clone, PartialEq)]
pub struct Planting {
    /// `(region, attribute)` pairs in planting order.
    pub pairs: Vec<(usize, usize)>,
}

pub fn generate(config: &SynthConfig) -> Result<Vec<Study>> {
    Ok(generate_with_plantings(config)?.into_iter().map(|(s, _)| s).collect())
}

pub fn generate_with_plantings(config: &SynthConfig) -> Result<Vec<(Study, Planting)>> {
    config.validate()?;
    let regions = config.region_vocabulary()?;
    let candidates: Vec<Vec<usize>> = config
        .attributes
        .iter()
        .map(|a| a.regions.iter().map(|r| regions.index_of(r).unwrap()).collect())
        .collect();
    let channels: Vec<usize> = config
        .attributes
        .iter()
        .map(|a| signal_channel(&a.name, config.channels))
        .collect();
    (0..config.num_studies)
        .into_par_iter()
        .map(|i| generate_one(config, i as u64, &candidates, &channels))
        .collect()
}

fn generate_one(
    config: &SynthConfig,
    index: u64,
    candidates: &[Vec<usize>],
    channels: &[usize],
) -> Result<(Study, Planting)> {
    let mut box_rng = rng::stream(config.seed, "synth/boxes", &[index]);
    let mut attr_rng = rng::stream(config.seed, "synth/attributes", &[index]);
    let mut noise_rng = rng::stream(config.seed, "synth/noise", &[index]);

    let dx = if config.jitter > 0.0 { box_rng.random_range(-config.jitter..config.jitter) } else { 0.0 };
    let dy = if config.jitter > 0.0 { box_rng.random_range(-config.jitter..config.jitter) } else { 0.0 };
    let boxes: Vec<BBox> = config
        .layout
        .iter()
        .map(|r| {
            let [x1, y1, x2, y2] = r.bbox;
            // Clamp after the shift so boxes stay inside the image.
            let c = |v: f64| v.clamp(0.0, 1.0);
            BBox::new(c(x1 + dx), c(y1 + dy), c(x2 + dx), c(y2 + dy))
        })
        .collect::<Result<_>>()?;

    let g = config.grid_size;
    let f = config.channels;
    let mut grid = Grid::zeros(g, f);
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in grid.data.iter_mut() {
            *v = normal.sample(&mut noise_rng);
        }
    }

    let m = config.layout.len();
    let mut findings: Vec<Vec<String>> = vec![Vec::new(); m];
    let mut labels = vec![0u8; config.attributes.len()];
    let mut pairs = Vec::new();
    for (a, spec) in config.attributes.iter().enumerate() {
        if attr_rng.random::<f64>() >= spec.prevalence {
            continue;
        }
        let cands = &candidates[a];
        let first = cands[attr_rng.random_range(0..cands.len())];
        let mut chosen = vec![first];
        if cands.len() > 1 && attr_rng.random::<f64>() < config.second_region_probability {
            let mut second = cands[attr_rng.random_range(0..cands.len() - 1)];
            if second == first {
                second = cands[cands.len() - 1];
            }
            chosen.push(second);
        }
        let phrase = crate::corpus::attribute_phrase(&spec.name);
        for r in chosen {
            let template = &spec.templates[attr_rng.random_range(0..spec.templates.len())];
            findings[r].push(template.replace("{}", &phrase));
            pairs.push((r, a));
            let b = &boxes[r];
            for row in 0..g {
                for col in 0..g {
                    let (x, y) = grid.cell_center(row, col);
                    if b.contains_point(x, y) {
                        let o = grid.offset(row, col, channels[a]);
                        grid.data[o] += config.signal;
                    }
                }
            }
        }
        labels[a] = 1;
    }

    let study = Study {
        study_id: format!("synth-{:016x}-{:06}", config.seed, index),
        grid,
        regions: boxes.into_iter().map(Some).collect(),
        findings,
        labels,
    };
    Ok((study, Planting { pairs }))
}

/// Manifest written next to a generated corpus.
#[derive(Debug, Clone, Serialize)]
pub struct SynthManifest<'a> {
    pub config: &'a SynthConfig,
    pub num_studies: usize,
    pub signal_channels: BTreeMap<String, usize>,
}

impl<'a> SynthManifest<'a> {
    pub fn new(config: &'a SynthConfig) -> Self {
        Self {
            config,
            num_studies: config.num_studies,
            signal_channels: config
                .attributes
                .iter()
                .map(|a| (a.name.clone(), signal_channel(&a.name, config.channels)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corpus_to_string, DEFAULT_ATTRIBUTES, DEFAULT_REGIONS};

    #[test]
    fn default_config_matches_default_vocabularies() {
        let c = SynthConfig::default();
        c.validate().unwrap();
        let names: Vec<&str> = c.attributes.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, DEFAULT_ATTRIBUTES);
        let regions: Vec<&str> = c.layout.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(regions, DEFAULT_REGIONS);
    }

    #[test]
    fn deterministic() {
        let c = SynthConfig {
            num_studies: 20,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        let (av, rv) = (c.attribute_vocabulary().unwrap(), c.region_vocabulary().unwrap());
        assert_eq!(corpus_to_string(&a, &av, &rv), corpus_to_string(&b, &av, &rv));
    }

    #[test]
    fn zero_prevalence_gives_empty_studies() {
        let c = SynthConfig {
            num_studies: 30,
            ..SynthConfig::default()
        }
        .with_uniform_prevalence(0.0);
        for s in generate(&c).unwrap() {
            assert!(s.findings.iter().all(Vec::is_empty));
            assert!(s.labels.iter().all(|&y| y == 0));
        }
    }

    #[test]
    fn labels_match_plantings() {
        let c = SynthConfig {
            num_studies: 50,
            seed: 3,
            ..SynthConfig::default()
        };
        for (s, p) in generate_with_plantings(&c).unwrap() {
            for a in 0..c.attributes.len() {
                let planted = p.pairs.iter().any(|&(_, pa)| pa == a);
                assert_eq!(s.labels[a] == 1, planted);
            }
            s.validate(&c.attribute_vocabulary().unwrap(), &c.region_vocabulary().unwrap()).unwrap();
        }
    }

    #[test]
    fn rejects_invalid_config() {
        let mut c = SynthConfig::default();
        c.attributes[0].prevalence = 1.5;
        assert!(generate(&c).is_err());
        let mut c = SynthConfig::default();
        c.attributes[1].templates.clear();
        assert!(generate(&c).is_err());
        let c = SynthConfig {
            signal: f64::NAN,
            ..SynthConfig::default()
        };
        assert!(generate(&c).is_err());
    }
}
