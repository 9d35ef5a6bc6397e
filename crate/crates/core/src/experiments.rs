//! Declarative experiment configs, presets, the sweep runner and its CSV and
//! plot outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustics::RirCache;
use crate::conditions::{Condition, ConceptValue, Gender, Language};
use crate::corpus::{
    count_mismatches, materialize_audio, split_speakers, synth_toy_corpus, DomainName, DomainSpec, Manifest, ManifestSet,
    Partition, SourceRecord, ToyCorpusSpec, DEFAULT_CLIP_SECS,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_conditional, evaluate_pit_oracle, EvalReport, Pool, Provenance};
use crate::mixgen::{DomainEntry, GenerationConfig, MixtureGenerator, MixtureSample, SpatialPairing,
    read_eval_set, write_eval_set};
use crate::model::{Checkpoint, ModelConfig, SeparationModel};
use crate::training::{train, TrainConfig, ValidationConfig, FINAL_CHECKPOINT};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "HETSEP_OUTPUT_ROOT";
pub const PRESETS: [&str; 4] = ["tiny", "tiny-degenerate-sweep", "paper-wsj", "paper-slib-svox"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPaths {
    pub domain: DomainName,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyData {
    #[serde(flatten)]
    pub spec: ToyCorpusSpec,
    /// Speaker ratio for train/val/test.
    pub split: [u32; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyData>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub manifests: Vec<ManifestPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rir_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub concepts: Vec<ConceptValue>,
    pub size: usize,
    pub seed: u64,
    pub split: Partition,
    /// Also build all-degenerate sets for every non-energy concept.
    pub degenerate_pools: bool,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Dotted path into the config, e.g. `train.generation.degenerate_ratio.GENDER`.
    pub parameter: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a config file; relative manifest and cache paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for m in &mut cfg.data.manifests {
            resolve(&mut m.train);
            resolve(&mut m.val);
            resolve(&mut m.test);
        }
        if let Some(c) = &mut cfg.data.rir_cache {
            resolve(c);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("experiment name {:?} must be a plain non-empty name", self.name)));
        }
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if self.data.toy.is_none() && self.data.manifests.is_empty() {
            return Err(Error::Config("data needs a toy corpus or manifests".into()));
        }
        for entry in &self.train.generation.domains {
            let name = entry.spec.name;
            let provided =
                (name == DomainName::Toy && self.data.toy.is_some()) || self.data.manifests.iter().any(|m| m.domain == name);
            if !provided {
                return Err(Error::Config(format!("no data source for domain {}", name.as_str())));
            }
        }
        if self.eval.concepts.is_empty() || self.eval.size == 0 {
            return Err(Error::Config("eval needs at least one concept and a positive size".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep grid is empty".into()));
            }
            for v in &s.values {
                self.with_parameter(&s.parameter, *v)?;
            }
        }
        Ok(())
    }

    /// Short content hash recorded next to every output.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    /// Copy of the config with one numeric field replaced.
    pub fn with_parameter(&self, path: &str, value: f64) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        let mut node = &mut tree;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let last = i + 1 == parts.len();
            node = match node {
                serde_json::Value::Object(map) => {
                    if last {
                        map.insert(part.to_string(), serde_json::json!(value));
                        break;
                    }
                    map.get_mut(*part)
                }
                serde_json::Value::Array(items) => {
                    let idx: usize = part.parse().map_err(|_| Error::Config(format!("{path}: '{part}' is not an index")))?;
                    if last {
                        let slot = items.get_mut(idx).ok_or_else(|| Error::Config(format!("{path}: index {idx} out of range")))?;
                        *slot = serde_json::json!(value);
                        break;
                    }
                    items.get_mut(idx)
                }
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("{path}: no field '{part}'")))?;
        }
        let mut cfg: ExperimentConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("{path} = {value}: {e}")))?;
        // unknown keys are dropped by deserialization, so check the value landed
        let pointer = format!("/{}", parts.join("/"));
        let landed = serde_json::to_value(&cfg)?.pointer(&pointer).and_then(|v| v.as_f64());
        if landed != Some(value) {
            return Err(Error::Config(format!("{path}: not a numeric config field")));
        }
        cfg.sweep = None;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Output root from the environment, defaulting to `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn toy_data(n_speakers: usize) -> ToyData {
    ToyData { spec: ToyCorpusSpec { n_speakers, records_per_speaker: 4, ..ToyCorpusSpec::default() }, split: [8, 1, 1] }
}

fn priors(pairs: &[(ConceptValue, f64)]) -> BTreeMap<ConceptValue, f64> {
    pairs.iter().copied().collect()
}

/// Split a condition's share evenly over its values.
fn condition_share(c: Condition, share: f64) -> Vec<(ConceptValue, f64)> {
    let vals = c.concepts();
    vals.iter().map(|&v| (v, share / vals.len() as f64)).collect()
}

fn paper_manifests(names: &[DomainName]) -> Vec<ManifestPaths> {
    names
        .iter()
        .map(|d| {
            let dir = PathBuf::from("manifests").join(d.as_str().to_lowercase());
            ManifestPaths { domain: *d, train: dir.join("train.jsonl"), val: dir.join("val.jsonl"), test: dir.join("test.jsonl") }
        })
        .collect()
}

/// Built-in configurations.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let tiny_generation = GenerationConfig { clip_samples: 4000, ..GenerationConfig::single(DomainSpec::toy()) };
    let cfg = match name {
        "tiny" => ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            name: "tiny".into(),
            data: DataConfig { toy: Some(toy_data(40)), ..DataConfig::default() },
            model: ModelConfig::tiny(),
            train: TrainConfig {
                batch_size: 4,
                epochs: 4,
                epoch_size: 2000,
                generation: tiny_generation,
                validation: Some(ValidationConfig {
                    concepts: vec![ConceptValue::EHigh, ConceptValue::GFemale],
                    size: 20,
                    seed: 17,
                }),
                ..TrainConfig::default()
            },
            eval: EvalConfig {
                concepts: vec![ConceptValue::EHigh, ConceptValue::ELow, ConceptValue::GFemale, ConceptValue::GMale],
                size: 100,
                seed: 2024,
                split: Partition::Test,
                degenerate_pools: false,
                workers: 1,
            },
            sweep: None,
        },
        "tiny-degenerate-sweep" => {
            let mut generation = tiny_generation;
            generation.domains[0].condition_priors = priors(&condition_share(Condition::Gender, 1.0));
            ExperimentConfig {
                schema_version: CONFIG_SCHEMA_VERSION,
                name: "tiny-degenerate-sweep".into(),
                data: DataConfig { toy: Some(toy_data(40)), ..DataConfig::default() },
                model: ModelConfig::tiny(),
                train: TrainConfig { batch_size: 4, epochs: 3, epoch_size: 4000, seed: 3, generation, ..TrainConfig::default() },
                eval: EvalConfig {
                    concepts: vec![ConceptValue::GFemale, ConceptValue::GMale],
                    size: 25,
                    seed: 99,
                    split: Partition::Test,
                    degenerate_pools: true,
                    workers: 1,
                },
                sweep: Some(SweepConfig {
                    parameter: "train.generation.degenerate_ratio.GENDER".into(),
                    values: vec![0.0, 0.01, 0.05],
                }),
            }
        }
        "paper-wsj" => {
            // gender + energy on WSJ, energy-only on SLIB as the bridge
            let mut wsj = DomainEntry::new(DomainSpec::wsj(), 0.5);
            wsj.condition_priors = priors(&[
                condition_share(Condition::Gender, 0.5),
                condition_share(Condition::Energy, 0.5),
            ]
            .concat());
            let mut slib = DomainEntry::new(DomainSpec::slib(), 0.5);
            slib.condition_priors = priors(&condition_share(Condition::Energy, 1.0));
            slib.snr_range = wsj.snr_range;
            slib.spatial_pairing = SpatialPairing::AlwaysNearFar;
            paper_config("paper-wsj", vec![wsj, slib], &[DomainName::Wsj, DomainName::Slib], vec![
                ConceptValue::GFemale,
                ConceptValue::GMale,
                ConceptValue::EHigh,
                ConceptValue::ELow,
            ])
        }
        "paper-slib-svox" => {
            let mut slib = DomainEntry::new(DomainSpec::slib(), 0.5);
            slib.condition_priors = priors(&[
                condition_share(Condition::Gender, 0.5),
                condition_share(Condition::Spatial, 0.5),
            ]
            .concat());
            slib.spatial_pairing = SpatialPairing::UniformOverPairs;
            let mut svox = DomainEntry::new(DomainSpec::svox(), 0.5);
            svox.condition_priors = priors(&[
                condition_share(Condition::Language, 0.5),
                condition_share(Condition::Spatial, 0.5),
            ]
            .concat());
            paper_config("paper-slib-svox", vec![slib, svox], &[DomainName::Slib, DomainName::Svox], vec![
                ConceptValue::GFemale,
                ConceptValue::GMale,
                ConceptValue::SNear,
                ConceptValue::SFar,
                ConceptValue::LEn,
                ConceptValue::LFr,
                ConceptValue::LDe,
                ConceptValue::LEs,
            ])
        }
        other => return Err(Error::Config(format!("unknown preset '{other}' (known: {})", PRESETS.join(", ")))),
    };
    Ok(cfg)
}

fn paper_config(name: &str, domains: Vec<DomainEntry>, data: &[DomainName], concepts: Vec<ConceptValue>) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        name: name.into(),
        data: DataConfig { manifests: paper_manifests(data), rir_cache: Some("rir_cache".into()), ..DataConfig::default() },
        model: ModelConfig::default(),
        train: TrainConfig {
            generation: GenerationConfig { domains, ..GenerationConfig::default() },
            validation: Some(ValidationConfig { concepts: concepts.clone(), size: 100, seed: 1 }),
            ..TrainConfig::default()
        },
        eval: EvalConfig { concepts, size: 3000, seed: 0, split: Partition::Test, degenerate_pools: false, workers: 4 },
        sweep: None,
    }
}

/// All partitions of every configured collection.
pub fn build_manifests(cfg: &ExperimentConfig) -> Result<Vec<Manifest>> {
    let mut out = Vec::new();
    if let Some(toy) = &cfg.data.toy {
        let all = synth_toy_corpus(&toy.spec)?;
        let set = split_speakers(&all.domain, &all.records, toy.split, toy.spec.seed)?;
        out.extend([set.train, set.val, set.test]);
    }
    let min_duration = cfg.train.generation.clip_samples as f64 / cfg.train.generation.sample_rate as f64;
    for m in &cfg.data.manifests {
        let set = ManifestSet::load(&m.train, &m.val, &m.test, min_duration)?;
        for part in [set.train, set.val, set.test] {
            if part.domain.name != m.domain {
                return Err(Error::Manifest(format!(
                    "manifest declares {} but is configured as {}",
                    part.domain.name.as_str(),
                    m.domain.as_str()
                )));
            }
            out.push(part);
        }
    }
    Ok(out)
}

fn generator_for(cfg: &ExperimentConfig, generation: GenerationConfig, manifests: &[Manifest]) -> Result<MixtureGenerator> {
    let mut g = MixtureGenerator::new(generation, manifests.to_vec())?;
    if let Some(dir) = &cfg.data.rir_cache {
        g = g.with_rir_cache(RirCache::new(dir)?);
    }
    Ok(g)
}

pub fn build_generator(cfg: &ExperimentConfig, manifests: &[Manifest]) -> Result<MixtureGenerator> {
    generator_for(cfg, cfg.train.generation.clone(), manifests)
}

/// Fixed evaluation sets: a discriminative set per concept, plus an
/// all-degenerate set per non-energy concept when requested.
pub fn build_eval_sets(cfg: &ExperimentConfig, manifests: &[Manifest], concepts: &[ConceptValue]) -> Result<Vec<MixtureSample>> {
    let mut out = Vec::new();
    for &v in concepts {
        let cond = v.condition();
        let mut ratios = vec![0.0];
        if cfg.eval.degenerate_pools && cond != Condition::Energy {
            ratios.push(1.0);
        }
        for rho in ratios {
            let mut gen_cfg = cfg.train.generation.clone();
            gen_cfg.degenerate_ratio.insert(cond, rho);
            let g = generator_for(cfg, gen_cfg, manifests)?;
            let seed = cfg.eval.seed.wrapping_add(if rho > 0.0 { 1 } else { 0 });
            out.extend(g.make_eval_set(v, cfg.eval.size, seed, cfg.eval.split, cfg.eval.workers)?);
        }
    }
    Ok(out)
}

/// Synthesize the toy corpus, write its audio under `out_dir/audio` and the
/// speaker-split manifests next to it.
pub fn synth_corpus(toy: &ToyData, out_dir: &Path) -> Result<ManifestSet> {
    let all = synth_toy_corpus(&toy.spec)?;
    let all = materialize_audio(&all, &out_dir.join("audio"))?;
    let set = split_speakers(&all.domain, &all.records, toy.split, toy.spec.seed)?;
    // manifests on disk point at audio relative to themselves
    let mut portable = set.clone();
    for m in [&mut portable.train, &mut portable.val, &mut portable.test] {
        for rec in &mut m.records {
            if let Ok(rel) = Path::new(&rec.audio_ref).strip_prefix(out_dir) {
                rec.audio_ref = rel.to_string_lossy().into_owned();
            }
        }
    }
    portable.write(out_dir)?;
    Ok(set)
}

#[derive(Debug, Deserialize)]
struct ListingRow {
    record_id: String,
    audio_path: PathBuf,
    speaker_id: String,
    #[serde(default)]
    gender: Option<Gender>,
    #[serde(default)]
    language: Option<Language>,
}

/// Build speaker-disjoint manifests for a real collection from a CSV listing
/// with columns `record_id,audio_path,speaker_id,gender,language`. Durations
/// come from the WAV headers; relative paths resolve against the listing.
pub fn prepare_manifest(domain: DomainName, listing: &Path, split: [u32; 3], seed: u64, out_dir: &Path) -> Result<ManifestSet> {
    let base = listing.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_path(listing).map_err(|e| Error::Manifest(format!("{}: {e}", listing.display())))?;
    let mut records = Vec::new();
    for row in reader.deserialize::<ListingRow>() {
        let row = row.map_err(|e| Error::Manifest(format!("{}: {e}", listing.display())))?;
        let path = if row.audio_path.is_relative() { base.join(&row.audio_path) } else { row.audio_path };
        let wav = hound::WavReader::open(&path).map_err(|e| Error::Audio { path: path.clone(), reason: e.to_string() })?;
        let duration = wav.duration() as f64 / wav.spec().sample_rate as f64;
        records.push(SourceRecord {
            record_id: row.record_id,
            audio_ref: path.to_string_lossy().into_owned(),
            speaker_id: row.speaker_id,
            gender: row.gender,
            language: row.language,
            duration,
        });
    }
    let spec = DomainSpec::by_name(domain);
    let set = split_speakers(&spec, &records, split, seed)?;
    for p in Partition::ALL {
        let m = set.get(p);
        m.validate(DEFAULT_CLIP_SECS)?;
        for warning in count_mismatches(m) {
            log::warn!("{warning}");
        }
    }
    set.write(out_dir)?;
    Ok(set)
}

/// Where evaluation mixtures come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalSource {
    OnTheFly,
    /// Generate, then also write the set to this directory.
    Materialize(PathBuf),
    /// Read a previously materialized set.
    Load(PathBuf),
}

pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes))[..16].to_string())
}

pub fn experiment_dir(cfg: &ExperimentConfig, root: &Path) -> PathBuf {
    root.join(&cfg.name)
}

/// Train the configured model into `out_dir`; returns the final checkpoint path.
pub fn run_train(cfg: &ExperimentConfig, out_dir: &Path, resume: bool) -> Result<PathBuf> {
    let manifests = build_manifests(cfg)?;
    let generator = build_generator(cfg, &manifests)?;
    let model = SeparationModel::new(cfg.model, cfg.train.seed)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    fs::write(out_dir.join("config_hash.txt"), format!("{}\n", cfg.hash()))?;
    train(model, &cfg.train, &generator, out_dir, resume)?;
    Ok(out_dir.join(FINAL_CHECKPOINT))
}

/// Evaluate a checkpoint and write `report.json` and `report.txt` into `out_dir`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    concepts: Option<&[ConceptValue]>,
    source: &EvalSource,
    out_dir: &Path,
) -> Result<EvalReport> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let concepts = concepts.unwrap_or(&cfg.eval.concepts);
    let samples = match source {
        EvalSource::Load(dir) => {
            let all = read_eval_set(dir)?;
            all.into_iter().filter(|s| concepts.contains(&s.meta.concept)).collect()
        }
        _ => build_eval_sets(cfg, &build_manifests(cfg)?, concepts)?,
    };
    if samples.is_empty() {
        return Err(Error::Empty("no evaluation mixtures for the requested concepts".into()));
    }
    // score what was written so a later --eval-set run reproduces the report
    let samples = match source {
        EvalSource::Materialize(dir) => {
            write_eval_set(&samples, dir)?;
            read_eval_set(dir)?
        }
        _ => samples,
    };
    let mut report = match model.config.conditioned {
        true => evaluate_conditional(&model, &samples)?,
        false => evaluate_pit_oracle(&model, &samples)?,
    };
    report.provenance = Provenance { checkpoint_id: checkpoint_id(checkpoint)?, eval_seed: cfg.eval.seed, config_hash: cfg.hash() };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), report.to_json()?)?;
    let label = if model.config.conditioned { cfg.name.clone() } else { format!("{} (PIT oracle)", cfg.name) };
    fs::write(out_dir.join("report.txt"), report.to_table(&label))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub concept: ConceptValue,
    pub pool: Pool,
    pub median_si_sdr: Option<f64>,
    pub count: usize,
    pub status: String,
    pub config_hash: String,
}

pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<Option<EvalReport>>,
    pub csv: PathBuf,
    pub plot: PathBuf,
}

/// The (concept, pool) columns a sweep reports for an eval config.
pub fn sweep_pools(eval: &EvalConfig) -> Vec<(ConceptValue, Pool)> {
    let mut out = Vec::new();
    for &v in &eval.concepts {
        out.push((v, Pool::Discriminative));
        if eval.degenerate_pools && v.condition() != Condition::Energy {
            out.push((v, Pool::TargetIsMixture));
            out.push((v, Pool::TargetIsZero));
        }
    }
    out
}

/// Train and evaluate one model per grid value. A failing point is recorded
/// in the CSV and the sweep moves on.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path) -> Result<SweepOutcome> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| Error::Config("config has no sweep section".into()))?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
    let hash = cfg.hash();
    let pools = sweep_pools(&cfg.eval);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (i, &value) in sweep.values.iter().enumerate() {
        let point_dir = out_dir.join(format!("point_{i:02}"));
        let result = cfg.with_parameter(&sweep.parameter, value).and_then(|point| {
            let ckpt = run_train(&point, &point_dir, true)?;
            run_eval(&point, &ckpt, None, &EvalSource::OnTheFly, &point_dir)
        });
        match result {
            Ok(report) => {
                for &(v, p) in &pools {
                    let stats = report.concept(v).and_then(|c| c.pool(p));
                    rows.push(SweepRow {
                        value,
                        concept: v,
                        pool: p,
                        median_si_sdr: stats.and_then(|s| s.median),
                        count: stats.map(|s| s.count).unwrap_or(0),
                        status: "ok".into(),
                        config_hash: hash.clone(),
                    });
                }
                reports.push(Some(report));
            }
            Err(e) => {
                log::error!("sweep point {} = {value} failed: {e}", sweep.parameter);
                for &(v, p) in &pools {
                    rows.push(SweepRow {
                        value,
                        concept: v,
                        pool: p,
                        median_si_sdr: None,
                        count: 0,
                        status: format!("error[{}]: {e}", e.category()),
                        config_hash: hash.clone(),
                    });
                }
                reports.push(None);
            }
        }
    }
    let csv = out_dir.join("summary.csv");
    write_sweep_csv(&rows, &csv)?;
    let plot = out_dir.join("summary.svg");
    render_sweep_plot(&rows, &sweep.parameter, &plot)?;
    Ok(SweepOutcome { rows, reports, csv, plot })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    value: f64,
    concept: ConceptValue,
    pool: Pool,
    median_si_sdr: String,
    count: usize,
    status: String,
    config_hash: String,
}

fn db_text(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) if x == f64::NEG_INFINITY => "-inf".into(),
        Some(x) => format!("{x}"),
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(CsvRow {
            value: r.value,
            concept: r.concept,
            pool: r.pool,
            median_si_sdr: db_text(r.median_si_sdr),
            count: r.count,
            status: r.status.clone(),
            config_hash: r.config_hash.clone(),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            let median = match row.median_si_sdr.as_str() {
                "" => None,
                text => Some(text.parse::<f64>().map_err(|e| Error::Config(format!("csv median {text:?}: {e}")))?),
            };
            Ok(SweepRow {
                value: row.value,
                concept: row.concept,
                pool: row.pool,
                median_si_sdr: median,
                count: row.count,
                status: row.status,
                config_hash: row.config_hash,
            })
        })
        .collect()
}

/// Two panels: discriminative pools on the left, degenerate pools on the
/// right; one line per concept and pool, grid points evenly spaced.
pub fn render_sweep_plot(rows: &[SweepRow], parameter: &str, path: &Path) -> Result<()> {
    use plotters::prelude::*;

    let plot_err = |e: &dyn std::fmt::Display| Error::Config(format!("plot: {e}"));
    let mut grid: Vec<f64> = Vec::new();
    for r in rows {
        if !grid.contains(&r.value) {
            grid.push(r.value);
        }
    }
    let position = |v: f64| grid.iter().position(|g| *g == v).unwrap_or(0) as f64;
    let mut series: BTreeMap<(bool, ConceptValue, Pool), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let degenerate = r.pool != Pool::Discriminative;
        let entry = series.entry((degenerate, r.concept, r.pool)).or_default();
        if let Some(m) = r.median_si_sdr.filter(|m| m.is_finite()) {
            entry.push((position(r.value), m));
        }
    }
    let finite: Vec<f64> = series.values().flatten().map(|p| p.1).collect();
    let (lo, hi) = finite.iter().fold((0.0f64, 1.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
    let pad = 0.1 * (hi - lo).max(1.0);
    let hash = rows.first().map(|r| r.config_hash.as_str()).unwrap_or("");

    let root = SVGBackend::new(path, (1000, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let panels = root.split_evenly((1, 2));
    let n = grid.len().max(1) as f64;
    for (k, panel) in panels.iter().enumerate() {
        let degenerate = k == 1;
        let title = if degenerate { "degenerate queries" } else { "discriminative queries" };
        let mut chart = ChartBuilder::on(panel)
            .caption(format!("{title} [{hash}]"), ("sans-serif", 16))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(-0.5..n - 0.5, (lo - pad)..(hi + pad))
            .map_err(|e| plot_err(&e))?;
        chart
            .configure_mesh()
            .x_labels(grid.len().max(1))
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < grid.len() {
                    format!("{}", grid[i as usize])
                } else {
                    String::new()
                }
            })
            .x_desc(parameter)
            .y_desc("median SI-SDR (dB)")
            .draw()
            .map_err(|e| plot_err(&e))?;
        for (j, ((_, concept, pool), points)) in series.iter().filter(|((d, _, _), _)| *d == degenerate).enumerate() {
            let color = Palette99::pick(j).to_rgba();
            let label = if degenerate { format!("{concept} {}", pool.as_str()) } else { concept.to_string() };
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| plot_err(&e))?
                .label(label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(points.iter().map(|p| Circle::new(*p, 3, color.filled()))).map_err(|e| plot_err(&e))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(&e))?;
    }
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}
