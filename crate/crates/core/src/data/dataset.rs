use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::fields::{sample_smooth_field, FieldFamily};
use super::pairs::{augment_pair, make_pair, AugmentMode, Provenance, SamplePair, DEFAULT_FRACTIONS};
use super::phantom::{gen_phantom, PhantomSpec};
use crate::netcore::{derive_seed, seeded_rng};
use crate::volume::mvol::{read_field, read_labels, read_volume, write_field, write_labels, write_volume, Dtype};
use crate::volume::{Dims, LabelVolume3, Volume3};
use crate::{Error, Result};

const FORMAT: &str = "regnet-dataset-1";
const MANIFEST_FILE: &str = "manifest.txt";

const TAG_PHANTOM: u64 = 1;
const TAG_FIELD: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_SPLIT: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub dims: Dims,
    pub n_rois: usize,
    pub phantom_noise: f64,
    pub blur_sigma: f64,
    pub max_magnitude: f64,
    pub smoothness: f64,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub fractions: Vec<f64>,
    pub augment: AugmentMode,
    /// Max norm of the smooth perturbation added to training targets.
    pub supervision_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            dims: [96; 3],
            n_rois: 8,
            phantom_noise: 0.02,
            blur_sigma: 2.0,
            max_magnitude: 5.0,
            smoothness: 6.0,
            train_pairs: 10,
            val_pairs: 3,
            fractions: DEFAULT_FRACTIONS.to_vec(),
            augment: AugmentMode::Exact,
            supervision_noise: 0.0,
            seed: 0,
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Manifest(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_pairs == 0 {
            return Err(Error::InvalidInput("at least one training pair is required".into()));
        }
        if let Some(c) = self.fractions.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::InvalidInput(format!("fraction {c} outside [0, 1]")));
        }
        if self.supervision_noise < 0.0 || self.max_magnitude < 0.0 || self.smoothness <= 0.0 {
            return Err(Error::InvalidInput("magnitudes must be non-negative and smoothness positive".into()));
        }
        Ok(())
    }

    pub fn family(pair: usize) -> FieldFamily {
        if pair % 2 == 0 {
            FieldFamily::A
        } else {
            FieldFamily::B
        }
    }

    pub fn field_seed(&self, pair: usize) -> u64 {
        derive_seed(self.seed, TAG_FIELD, pair as u64)
    }

    pub fn phantom(&self) -> PhantomSpec {
        let mut spec = PhantomSpec::random(self.dims, self.n_rois, derive_seed(self.seed, TAG_PHANTOM, 0));
        spec.noise = self.phantom_noise;
        spec.blur_sigma = self.blur_sigma;
        spec
    }

    fn header(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dims", join(&self.dims)),
            ("n_rois", self.n_rois.to_string()),
            ("phantom_noise", self.phantom_noise.to_string()),
            ("blur_sigma", self.blur_sigma.to_string()),
            ("max_magnitude", self.max_magnitude.to_string()),
            ("smoothness", self.smoothness.to_string()),
            ("train_pairs", self.train_pairs.to_string()),
            ("val_pairs", self.val_pairs.to_string()),
            ("fractions", join(&self.fractions)),
            ("augment", self.augment.name().to_string()),
            ("supervision_noise", self.supervision_noise.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn from_header(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| map.get(k).map(String::as_str).ok_or_else(|| Error::Manifest(format!("missing `{k}`")));
        let dims: Vec<usize> = parse_list("dims", get("dims")?)?;
        let dims: Dims = dims.try_into().map_err(|_| Error::Manifest("`dims` needs three values".into()))?;
        Ok(Self {
            dims,
            n_rois: parse_num("n_rois", get("n_rois")?)?,
            phantom_noise: parse_num("phantom_noise", get("phantom_noise")?)?,
            blur_sigma: parse_num("blur_sigma", get("blur_sigma")?)?,
            max_magnitude: parse_num("max_magnitude", get("max_magnitude")?)?,
            smoothness: parse_num("smoothness", get("smoothness")?)?,
            train_pairs: parse_num("train_pairs", get("train_pairs")?)?,
            val_pairs: parse_num("val_pairs", get("val_pairs")?)?,
            fractions: parse_list("fractions", get("fractions")?)?,
            augment: AugmentMode::parse(get("augment")?).map_err(|e| Error::Manifest(e.to_string()))?,
            supervision_noise: parse_num("supervision_noise", get("supervision_noise")?)?,
            seed: parse_num("seed", get("seed")?)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Validation,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Validation => "validation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Role::Train),
            "validation" => Ok(Role::Validation),
            _ => Err(Error::Manifest(format!("unknown role `{s}`"))),
        }
    }
}

/// Seeded disjoint assignment of pair indices to training and validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Split {
    pub fn role(&self, pair: usize) -> Option<Role> {
        if self.train.contains(&pair) {
            Some(Role::Train)
        } else if self.validation.contains(&pair) {
            Some(Role::Validation)
        } else {
            None
        }
    }
}

pub fn split_manifest(pairs: usize, train_count: usize, val_count: usize, seed: u64) -> Result<Split> {
    if train_count + val_count > pairs {
        return Err(Error::InvalidInput(format!(
            "cannot take {train_count} training and {val_count} validation pairs from {pairs}"
        )));
    }
    let mut ids: Vec<usize> = (0..pairs).collect();
    ids.shuffle(&mut seeded_rng(seed));
    let mut train = ids[..train_count].to_vec();
    let mut validation = ids[train_count..train_count + val_count].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    Ok(Split { train, validation })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEntry {
    pub id: String,
    pub role: Role,
    pub pair: usize,
    pub subject: String,
    pub subject_labels: String,
    /// Exact deformation from subject to template.
    pub field: String,
    /// Perturbed supervision, when it differs from `field`.
    pub target: Option<String>,
    pub seed: u64,
    pub family: FieldFamily,
    pub fraction: Option<f64>,
    pub warp_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub template: String,
    pub template_labels: String,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn entries(&self, role: Role) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.role == role)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("format={FORMAT}\n");
        for (k, v) in self.spec.header() {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "template={}", self.template);
        let _ = writeln!(s, "template_labels={}", self.template_labels);
        for e in &self.samples {
            let _ = writeln!(
                s,
                "sample id={} role={} pair={} subject={} subject_labels={} field={} target={} seed={} family={} fraction={} warp_error={}",
                e.id,
                e.role.name(),
                e.pair,
                e.subject,
                e.subject_labels,
                e.field,
                e.target.as_deref().unwrap_or("-"),
                e.seed,
                e.family.name(),
                e.fraction.map_or("-".to_string(), |c| c.to_string()),
                e.warp_error,
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::Manifest(format!("line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix("sample ") {
                let mut kv = BTreeMap::new();
                for tok in rest.split_whitespace() {
                    let (k, v) = tok.split_once('=').ok_or_else(|| at(format!("expected key=value, got `{tok}`")))?;
                    kv.insert(k, v);
                }
                let get = |k: &str| kv.get(k).copied().ok_or_else(|| at(format!("missing `{k}`")));
                let opt = |v: &str| (v != "-").then(|| v.to_string());
                samples.push(SampleEntry {
                    id: get("id")?.to_string(),
                    role: Role::parse(get("role")?)?,
                    pair: parse_num("pair", get("pair")?)?,
                    subject: get("subject")?.to_string(),
                    subject_labels: get("subject_labels")?.to_string(),
                    field: get("field")?.to_string(),
                    target: opt(get("target")?),
                    seed: parse_num("seed", get("seed")?)?,
                    family: FieldFamily::parse(get("family")?).map_err(|e| at(e.to_string()))?,
                    fraction: opt(get("fraction")?).map(|v| parse_num("fraction", &v)).transpose()?,
                    warp_error: parse_num("warp_error", get("warp_error")?)?,
                });
            } else {
                let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected key=value, got `{line}`")))?;
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        match header.get("format").map(String::as_str) {
            Some(FORMAT) => {}
            other => return Err(Error::Manifest(format!("unsupported format {other:?}"))),
        }
        let take = |k: &str| header.get(k).cloned().ok_or_else(|| Error::Manifest(format!("missing `{k}`")));
        let manifest = Self {
            spec: DatasetSpec::from_header(&header)?,
            template: take("template")?,
            template_labels: take("template_labels")?,
            samples,
        };
        manifest.check_split()?;
        Ok(manifest)
    }

    fn check_split(&self) -> Result<()> {
        let mut roles: BTreeMap<usize, Role> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for e in &self.samples {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id `{}`", e.id)));
            }
            if *roles.entry(e.pair).or_insert(e.role) != e.role {
                return Err(Error::Manifest(format!("pair {} appears in both splits", e.pair)));
            }
            if e.role == Role::Validation && e.fraction.is_some() {
                return Err(Error::Manifest(format!("validation sample `{}` is augmented", e.id)));
            }
        }
        Ok(())
    }

    /// Every file the manifest references must exist under `root`.
    pub fn check_files(&self, root: &Path) -> Result<()> {
        let mut files = vec![&self.template, &self.template_labels];
        for e in &self.samples {
            files.extend([&e.subject, &e.subject_labels, &e.field]);
            files.extend(e.target.as_ref());
        }
        for f in files {
            if !root.join(f).is_file() {
                return Err(Error::Manifest(format!("referenced file `{f}` is missing")));
            }
        }
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let m = Self::parse(&fs::read_to_string(&path).map_err(crate::error::at(&path))?)?;
        m.check_files(root)?;
        Ok(m)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, self.to_text())?;
        fs::rename(tmp, root.join(MANIFEST_FILE))?;
        Ok(())
    }
}

fn sample_id(pair: usize, fraction: Option<f64>) -> String {
    match fraction {
        None => format!("p{pair:03}"),
        Some(c) => format!("p{pair:03}_c{:03}", (c * 100.0).round() as u32),
    }
}

fn write_sample(root: &Path, role: Role, pair: usize, seed: u64, s: &SamplePair) -> Result<SampleEntry> {
    let id = sample_id(pair, s.provenance.fraction);
    let entry = SampleEntry {
        subject: format!("{id}_subject.mvol"),
        subject_labels: format!("{id}_labels.mvol"),
        field: format!("{id}_field.mvol"),
        target: s.target.as_ref().map(|_| format!("{id}_target.mvol")),
        id,
        role,
        pair,
        seed,
        family: s.provenance.family,
        fraction: s.provenance.fraction,
        warp_error: s.provenance.warp_error,
    };
    write_volume(root.join(&entry.subject), &s.subject, Dtype::F32)?;
    write_labels(root.join(&entry.subject_labels), &s.subject_labels)?;
    write_field(root.join(&entry.field), &s.gt_field, Dtype::F32)?;
    if let (Some(name), Some(t)) = (&entry.target, &s.target) {
        write_field(root.join(name), t, Dtype::F32)?;
    }
    Ok(entry)
}

/// Generate a dataset under `root`: one template, `train_pairs + val_pairs` pairs,
/// and augmented copies of the training pairs. Pairs are produced and written one
/// at a time so memory stays bounded.
pub fn write_dataset(spec: &DatasetSpec, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(root)?;
    let (template, labels) = gen_phantom(&spec.phantom())?;
    let mut manifest = Manifest {
        spec: spec.clone(),
        template: "template.mvol".into(),
        template_labels: "template_labels.mvol".into(),
        samples: Vec::new(),
    };
    write_volume(root.join(&manifest.template), &template, Dtype::F32)?;
    write_labels(root.join(&manifest.template_labels), &labels)?;
    // round-trip through f32 so in-memory and on-disk pairs agree
    let template = Arc::new(read_volume(root.join(&manifest.template))?);
    let labels = Arc::new(labels);

    let total = spec.train_pairs + spec.val_pairs;
    let split = split_manifest(total, spec.train_pairs, spec.val_pairs, derive_seed(spec.seed, TAG_SPLIT, 0))?;
    for pair in 0..total {
        let role = split.role(pair).expect("split is exhaustive");
        let family = DatasetSpec::family(pair);
        let seed = spec.field_seed(pair);
        let phi = sample_smooth_field(spec.dims, spec.max_magnitude, spec.smoothness, family, seed)?;
        let mut sample = make_pair(template.clone(), labels.clone(), phi, family)?;
        if role == Role::Validation {
            manifest.samples.push(write_sample(root, role, pair, seed, &sample)?);
            continue;
        }
        if spec.supervision_noise > 0.0 {
            let nseed = derive_seed(spec.seed, TAG_NOISE, pair as u64);
            let eta = sample_smooth_field(spec.dims, spec.supervision_noise, spec.smoothness, family, nseed)?;
            sample = sample.with_supervision_noise(&eta)?;
        }
        for s in augment_pair(&sample, &spec.fractions, spec.augment)? {
            manifest.samples.push(write_sample(root, role, pair, seed, &s)?);
        }
    }
    manifest.write(root)?;
    Ok(manifest)
}

/// A dataset on disk with its template loaded; samples are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub template: Arc<Volume3>,
    pub template_labels: Arc<LabelVolume3>,
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref().to_path_buf();
    let manifest = Manifest::read(&root)?;
    let template = Arc::new(read_volume(root.join(&manifest.template))?);
    let template_labels = Arc::new(read_labels(root.join(&manifest.template_labels))?);
    if template.dims() != manifest.spec.dims || template_labels.dims() != manifest.spec.dims {
        return Err(Error::Manifest(format!("template dims differ from declared {:?}", manifest.spec.dims)));
    }
    Ok(Dataset { root, manifest, template, template_labels })
}

impl Dataset {
    pub fn entries(&self, role: Role) -> Vec<&SampleEntry> {
        self.manifest.entries(role).collect()
    }

    pub fn load(&self, entry: &SampleEntry) -> Result<SamplePair> {
        let gt_field = read_field(self.root.join(&entry.field))?;
        let target = entry.target.as_ref().map(|t| read_field(self.root.join(t))).transpose()?;
        let supervision_noise = match &target {
            Some(t) => t.max_abs_diff(&gt_field)?,
            None => 0.0,
        };
        let pair = SamplePair {
            template: self.template.clone(),
            template_labels: self.template_labels.clone(),
            subject: read_volume(self.root.join(&entry.subject))?,
            subject_labels: read_labels(self.root.join(&entry.subject_labels))?,
            gt_field,
            target,
            provenance: Provenance {
                family: entry.family,
                fraction: entry.fraction,
                supervision_noise,
                warp_error: entry.warp_error,
            },
        };
        if pair.subject.dims() != self.manifest.spec.dims || pair.gt_field.dims() != self.manifest.spec.dims {
            return Err(Error::Manifest(format!("sample `{}` has the wrong dimensions", entry.id)));
        }
        Ok(pair)
    }
}
