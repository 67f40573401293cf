//! The two synthetic image corpora: an attribute schema with Z-ordered
//! render layers, rejection sampling under a plausibility filter, optional
//! per-attribute sampling bias for content-distribution shift, corpus
//! export/import with sidecar attribute metadata, and a loader for
//! user-supplied image directories.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XganError};
use crate::model::ImageBatch;
use crate::pngio;
use crate::render;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttrKind {
    #[serde(rename = "categorical")]
    Categorical,
    #[serde(rename = "color")]
    Color,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub kind: AttrKind,
    pub options: Vec<String>,
}

/// All conditions must hold for the combination to be rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForbiddenCombo {
    pub conditions: Vec<(String, String)>,
}

/// Artwork for `layer` is selected by the current option of `depends_on`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRule {
    pub layer: String,
    pub depends_on: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub attributes: Vec<Attribute>,
    /// Render layers, back to front.
    pub layers: Vec<String>,
    /// Single options that are never plausible, as (attribute, option).
    #[serde(default)]
    pub forbidden_options: Vec<(String, String)>,
    #[serde(default)]
    pub forbidden_combos: Vec<ForbiddenCombo>,
    #[serde(default)]
    pub interaction_rules: Vec<InteractionRule>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub values: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StyleId {
    #[serde(rename = "a")]
    StyleA,
    #[serde(rename = "b")]
    StyleB,
}

impl std::fmt::Display for StyleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StyleId::StyleA => write!(f, "a"),
            StyleId::StyleB => write!(f, "b"),
        }
    }
}

/// One synthetic corpus: how many accepted samples, which renderer, its own
/// seed (the two domains use independent seeds, so the corpora are unpaired
/// by construction), and an optional per-attribute sampling bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub style: StyleId,
    pub seed: u64,
    /// attribute name -> relative option weights
    #[serde(default)]
    pub bias: BTreeMap<String, Vec<f64>>,
    pub image_size: usize,
}

impl AttributeSchema {
    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(XganError::Schema("schema needs at least one attribute".into()));
        }
        for a in &self.attributes {
            if a.options.len() < 2 {
                return Err(XganError::Schema(format!(
                    "attribute '{}' needs at least 2 options",
                    a.name
                )));
            }
        }
        if self.layers.is_empty() {
            return Err(XganError::Schema("schema needs at least one layer".into()));
        }
        for (attr, opt) in &self.forbidden_options {
            self.option_index(attr, opt)?;
        }
        for combo in &self.forbidden_combos {
            for (attr, opt) in &combo.conditions {
                self.option_index(attr, opt)?;
            }
        }
        for rule in &self.interaction_rules {
            if !self.layers.contains(&rule.layer) {
                return Err(XganError::Schema(format!(
                    "interaction rule targets unknown layer '{}'",
                    rule.layer
                )));
            }
            self.attr_index(&rule.depends_on)?;
        }
        Ok(())
    }

    pub fn attr_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| XganError::Schema(format!("unknown attribute '{name}'")))
    }

    pub fn option_index(&self, attr: &str, option: &str) -> Result<(usize, usize)> {
        let ai = self.attr_index(attr)?;
        let oi = self.attributes[ai]
            .options
            .iter()
            .position(|o| o == option)
            .ok_or_else(|| XganError::Schema(format!("attribute '{attr}' has no option '{option}'")))?;
        Ok((ai, oi))
    }

    pub fn check_attrs(&self, attrs: &AttributeVector) -> Result<()> {
        if attrs.values.len() != self.attributes.len() {
            return Err(XganError::Schema(format!(
                "attribute vector has {} values, schema has {} attributes",
                attrs.values.len(),
                self.attributes.len()
            )));
        }
        for (a, &v) in self.attributes.iter().zip(attrs.values.iter()) {
            if v >= a.options.len() {
                return Err(XganError::Schema(format!(
                    "attribute '{}' option index {v} out of range",
                    a.name
                )));
            }
        }
        Ok(())
    }

    pub fn option_counts(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.options.len()).collect()
    }
}

/// The default six-attribute schema over the eight-layer Z-order.
pub fn default_schema() -> AttributeSchema {
    let cat = |name: &str, options: &[&str]| Attribute {
        name: name.into(),
        kind: AttrKind::Categorical,
        options: options.iter().map(|s| s.to_string()).collect(),
    };
    let col = |name: &str, options: &[&str]| Attribute {
        name: name.into(),
        kind: AttrKind::Color,
        options: options.iter().map(|s| s.to_string()).collect(),
    };
    AttributeSchema {
        attributes: vec![
            cat("face_shape", &["round", "square", "tall"]),
            cat("hair_style", &["buzz", "long", "short", "spiky"]),
            col("hair_color", &["black", "brown", "blonde", "red"]),
            cat("eye_type", &["dot", "ring", "wide"]),
            cat("glasses", &["none", "round"]),
            col("skin_tone", &["light", "tan", "deep"]),
        ],
        layers: [
            "hair_back",
            "face",
            "hair_front",
            "eyes",
            "eyebrows",
            "mouth",
            "facial_hair",
            "glasses",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        forbidden_options: vec![],
        // spiky artwork misaligns on the tall face, so the combination is
        // filtered out of every corpus
        forbidden_combos: vec![ForbiddenCombo {
            conditions: vec![
                ("hair_style".into(), "spiky".into()),
                ("face_shape".into(), "tall".into()),
            ],
        }],
        interaction_rules: vec![InteractionRule {
            layer: "mouth".into(),
            depends_on: "face_shape".into(),
        }],
    }
}

/// One independent draw per attribute, uniform unless a bias is given.
pub fn sample_attributes(
    schema: &AttributeSchema,
    rng: &mut Rng,
    bias: &BTreeMap<String, Vec<f64>>,
) -> Result<AttributeVector> {
    for (name, weights) in bias {
        let ai = schema.attr_index(name)?;
        let n = schema.attributes[ai].options.len();
        if weights.len() != n {
            return Err(XganError::Config(format!(
                "bias for '{name}' has {} weights, attribute has {n} options",
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
            return Err(XganError::Config(format!(
                "bias for '{name}' must be nonnegative and not all zero"
            )));
        }
    }
    let mut values = Vec::with_capacity(schema.attributes.len());
    for a in &schema.attributes {
        let v = match bias.get(&a.name) {
            Some(w) => rng.weighted(w),
            None => rng.below(a.options.len()),
        };
        values.push(v);
    }
    Ok(AttributeVector { values })
}

/// Deterministic plausibility predicate from the schema's declared forbidden
/// options and combinations.
pub fn plausibility_filter(schema: &AttributeSchema, attrs: &AttributeVector) -> bool {
    for (attr, opt) in &schema.forbidden_options {
        if let Ok((ai, oi)) = schema.option_index(attr, opt) {
            if attrs.values[ai] == oi {
                return false;
            }
        }
    }
    'combos: for combo in &schema.forbidden_combos {
        for (attr, opt) in &combo.conditions {
            match schema.option_index(attr, opt) {
                Ok((ai, oi)) if attrs.values[ai] == oi => {}
                _ => continue 'combos,
            }
        }
        return false;
    }
    true
}

/// Composites one sprite (N = 1 batch).
pub fn render(
    schema: &AttributeSchema,
    attrs: &AttributeVector,
    style: StyleId,
    image_size: usize,
) -> Result<ImageBatch<f32>> {
    let px = render::render_sprite(schema, attrs, style, image_size)?;
    ImageBatch::from_tensor(Tensor::from_vec(&[1, 3, image_size, image_size], px))
}

/// Rejection-samples `n_samples` plausible sprites with their ground-truth
/// attributes. Aborts if the filter accepts less than 1% of draws.
pub fn build_corpus(schema: &AttributeSchema, spec: &CorpusSpec) -> Result<(ImageBatch<f32>, Vec<AttributeVector>)> {
    schema.validate()?;
    if spec.n_samples == 0 {
        return Err(XganError::Config("n_samples: must be >= 1".into()));
    }
    let mut rng = Rng::seed_from(spec.seed);
    let mut attrs_list = Vec::with_capacity(spec.n_samples);
    let mut attempts = 0usize;
    while attrs_list.len() < spec.n_samples {
        attempts += 1;
        if attempts >= 1000 && attrs_list.len() * 100 < attempts {
            return Err(XganError::Data(format!(
                "degenerate schema: plausibility filter accepted {} of {attempts} draws",
                attrs_list.len()
            )));
        }
        let attrs = sample_attributes(schema, &mut rng, &spec.bias)?;
        if plausibility_filter(schema, &attrs) {
            attrs_list.push(attrs);
        }
    }

    let plane = 3 * spec.image_size * spec.image_size;
    let mut data = vec![0.0f32; spec.n_samples * plane];
    render_all(schema, &attrs_list, spec.style, spec.image_size, &mut data)?;
    let images = ImageBatch::from_tensor(Tensor::from_vec(
        &[spec.n_samples, 3, spec.image_size, spec.image_size],
        data,
    ))?;
    Ok((images, attrs_list))
}

/// Renders samples into `out`, one plane per attribute vector. Sample order
/// matches the input order regardless of thread count.
fn render_all(
    schema: &AttributeSchema,
    attrs: &[AttributeVector],
    style: StyleId,
    image_size: usize,
    out: &mut [f32],
) -> Result<()> {
    let plane = 3 * image_size * image_size;
    debug_assert_eq!(out.len(), attrs.len() * plane);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        return out
            .par_chunks_mut(plane)
            .zip(attrs.par_iter())
            .try_for_each(|(slot, a)| {
                let px = render::render_sprite(schema, a, style, image_size)?;
                slot.copy_from_slice(&px);
                Ok(())
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (slot, a) in out.chunks_mut(plane).zip(attrs.iter()) {
            let px = render::render_sprite(schema, a, style, image_size)?;
            slot.copy_from_slice(&px);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Corpus export / import and split manifests.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    id: usize,
    file: String,
    values: Vec<usize>,
}

fn image_to_rgb8(images: &ImageBatch<f32>, i: usize) -> Vec<u8> {
    let (h, w) = (images.h(), images.w());
    let plane = h * w;
    let s = images.sample(i);
    let mut px = vec![0u8; plane * 3];
    for p in 0..plane {
        for c in 0..3 {
            px[p * 3 + c] = pngio::unit_to_u8(s[c * plane + p]);
        }
    }
    px
}

/// Writes one PNG per sample plus `metadata.jsonl` mapping ids to attribute
/// indices.
pub fn export_corpus(dir: &Path, images: &ImageBatch<f32>, attrs: &[AttributeVector]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| XganError::io(dir, e))?;
    let meta_path = dir.join("metadata.jsonl");
    let mut meta = std::io::BufWriter::new(
        std::fs::File::create(&meta_path).map_err(|e| XganError::io(&meta_path, e))?,
    );
    for i in 0..images.n() {
        let file = format!("img_{i:05}.png");
        let px = image_to_rgb8(images, i);
        pngio::write_rgb8(&dir.join(&file), images.w() as u32, images.h() as u32, &px)?;
        let record = MetaRecord {
            id: i,
            file,
            values: attrs[i].values.clone(),
        };
        let line = serde_json::to_string(&record).map_err(|e| XganError::Data(e.to_string()))?;
        writeln!(meta, "{line}").map_err(|e| XganError::io(&meta_path, e))?;
    }
    Ok(())
}

/// Reads a corpus directory produced by [export_corpus].
pub fn load_corpus_with_attrs(dir: &Path, image_size: usize) -> Result<(ImageBatch<f32>, Vec<AttributeVector>)> {
    let meta_path = dir.join("metadata.jsonl");
    let file = std::fs::File::open(&meta_path).map_err(|e| XganError::io(&meta_path, e))?;
    let mut files = Vec::new();
    let mut attrs = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| XganError::io(&meta_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetaRecord =
            serde_json::from_str(&line).map_err(|e| XganError::Data(format!("{}: {e}", meta_path.display())))?;
        files.push(record.file);
        attrs.push(AttributeVector { values: record.values });
    }
    if files.is_empty() {
        return Err(XganError::Data(format!("{}: empty corpus", dir.display())));
    }
    let images = load_images(dir, &files, image_size)?;
    Ok((images, attrs))
}

/// Exact 80/20 split over shuffled indices; returns (train, test).
pub fn split_indices(n: usize, test_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let test = order.split_off(n - n_test);
    (order, test)
}

/// Writes `train.txt` / `test.txt` manifests, one file name per line.
pub fn write_split_manifests(dir: &Path, n: usize, test_fraction: f64, seed: u64) -> Result<(usize, usize)> {
    let mut rng = Rng::seed_from(seed);
    let (train, test) = split_indices(n, test_fraction, &mut rng);
    for (name, idx) in [("train.txt", &train), ("test.txt", &test)] {
        let path = dir.join(name);
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| XganError::io(&path, e))?);
        for &i in idx.iter() {
            writeln!(f, "img_{i:05}.png").map_err(|e| XganError::io(&path, e))?;
        }
    }
    Ok((train.len(), test.len()))
}

/// Reads a manifest written by [write_split_manifests] and returns the
/// sample indices it names.
pub fn read_manifest_indices(path: &Path) -> Result<Vec<usize>> {
    let file = std::fs::File::open(path).map_err(|e| XganError::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| XganError::io(path, e))?;
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        let digits: String = name.chars().filter(|c| c.is_ascii_digit()).collect();
        let idx: usize = digits
            .parse()
            .map_err(|_| XganError::Data(format!("{}: bad manifest line '{name}'", path.display())))?;
        out.push(idx);
    }
    Ok(out)
}

fn load_images(dir: &Path, files: &[String], image_size: usize) -> Result<ImageBatch<f32>> {
    let plane = 3 * image_size * image_size;
    let mut data = vec![0.0f32; files.len() * plane];
    for (slot, file) in data.chunks_mut(plane).zip(files.iter()) {
        let path = dir.join(file);
        let (w, h, rgb) = pngio::read_rgb8(&path)?;
        let rgb = pngio::resize_rgb8(&rgb, w as usize, h as usize, image_size, image_size);
        for p in 0..image_size * image_size {
            for c in 0..3 {
                slot[c * image_size * image_size + p] = pngio::u8_to_unit(rgb[p * 3 + c]);
            }
        }
    }
    ImageBatch::from_tensor(Tensor::from_vec(&[files.len(), 3, image_size, image_size], data))
}

/// Loads every PNG in a directory (sorted by file name), resized to
/// `image_size` and rescaled to [-1, 1]. Unreadable files are skipped with a
/// per-file warning; an empty result is an error.
pub fn load_image_dir(dir: &Path, image_size: usize) -> Result<(ImageBatch<f32>, Vec<String>)> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| XganError::io(dir, e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let name = entry.file_name().to_string_lossy().into_owned();
            name.to_ascii_lowercase().ends_with(".png").then_some(name)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(XganError::Data(format!(
            "{}: no png images found (empty corpus)",
            dir.display()
        )));
    }
    let plane = 3 * image_size * image_size;
    let mut data = Vec::new();
    let mut warnings = Vec::new();
    for name in &names {
        let path = dir.join(name);
        match pngio::read_rgb8(&path) {
            Ok((w, h, rgb)) => {
                let rgb = pngio::resize_rgb8(&rgb, w as usize, h as usize, image_size, image_size);
                let base = data.len();
                data.resize(base + plane, 0.0);
                for p in 0..image_size * image_size {
                    for c in 0..3 {
                        data[base + c * image_size * image_size + p] = pngio::u8_to_unit(rgb[p * 3 + c]);
                    }
                }
            }
            Err(e) => warnings.push(format!("{name}: {e}")),
        }
    }
    let n = data.len() / plane;
    if n == 0 {
        return Err(XganError::Data(format!(
            "{}: no decodable images ({} failures)",
            dir.display(),
            warnings.len()
        )));
    }
    let images = ImageBatch::from_tensor(Tensor::from_vec(&[n, 3, image_size, image_size], data))?;
    Ok((images, warnings))
}
