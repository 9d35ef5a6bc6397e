//! On-the-fly conditional mixture sampling.
//!
//! Every sample is a pure function of the generator configuration, the source
//! manifests and the key `(base_seed, split, index)`, so any worker can build
//! any index.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::{
    self, place_source, FieldClass, IsmOptions, RirCache, RoomSpec, SourcePlacement,
};
use crate::conditions::{
    assign_energy_concepts, encode_concept, target_submix, Condition, ConceptValue, ConditionVector,
    Degeneracy, SourceConceptProfile, DEFAULT_ENERGY_EPSILON_DB,
};
use crate::corpus::{get_clip_at, DomainName, DomainSpec, Manifest, Partition, SourceRecord};
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};
use crate::signal::{energy, snr_gain, Waveform};
use crate::wav;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialPairing {
    AlwaysNearFar,
    UniformOverPairs,
}

/// One collection the generator may draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub spec: DomainSpec,
    pub prior: f64,
    /// P(v | domain); empty means uniform over conditions, then over values.
    #[serde(default)]
    pub condition_priors: BTreeMap<ConceptValue, f64>,
    pub snr_range: (f64, f64),
    pub spatial_pairing: SpatialPairing,
}

impl DomainEntry {
    pub fn new(spec: DomainSpec, prior: f64) -> Self {
        let snr_range = match spec.name {
            DomainName::Wsj | DomainName::Toy => (0.0, 5.0),
            DomainName::Svox | DomainName::Slib => (0.0, 2.5),
        };
        let spatial_pairing = match spec.name {
            DomainName::Svox => SpatialPairing::UniformOverPairs,
            _ => SpatialPairing::AlwaysNearFar,
        };
        Self { spec, prior, condition_priors: BTreeMap::new(), snr_range, spatial_pairing }
    }

    /// The configured concept prior, or the default one.
    pub fn concept_prior(&self) -> Vec<(ConceptValue, f64)> {
        if !self.condition_priors.is_empty() {
            return self.condition_priors.iter().map(|(&v, &p)| (v, p)).collect();
        }
        let n_cond = self.spec.conditions.len() as f64;
        Condition::ALL
            .iter()
            .filter(|c| self.spec.has(**c))
            .flat_map(|c| {
                let vals = c.concepts();
                vals.iter().map(move |&v| (v, 1.0 / (n_cond * vals.len() as f64)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub domains: Vec<DomainEntry>,
    /// Probability of a non-discriminative pair, per condition (absent = 0).
    #[serde(default)]
    pub degenerate_ratio: BTreeMap<Condition, f64>,
    /// Given a degenerate draw, probability that the target is the full mixture.
    pub degenerate_all_match_fraction: f64,
    pub snr_range_energy_conditioned: (f64, f64),
    pub energy_ambiguity_exclusion: bool,
    pub energy_epsilon_db: f64,
    pub overlap_range: (f64, f64),
    pub clip_samples: usize,
    pub sample_rate: u32,
    pub max_retries: usize,
    pub ism_max_order: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            domains: Vec::new(),
            degenerate_ratio: BTreeMap::new(),
            degenerate_all_match_fraction: 0.5,
            snr_range_energy_conditioned: (1.0, 5.0),
            energy_ambiguity_exclusion: true,
            energy_epsilon_db: DEFAULT_ENERGY_EPSILON_DB,
            overlap_range: (0.75, 1.0),
            clip_samples: crate::DEFAULT_CLIP_SAMPLES,
            sample_rate: crate::SAMPLE_RATE,
            max_retries: 1000,
            ism_max_order: acoustics::DEFAULT_MAX_ORDER,
        }
    }
}

impl GenerationConfig {
    pub fn single(spec: DomainSpec) -> Self {
        Self { domains: vec![DomainEntry::new(spec, 1.0)], ..Self::default() }
    }

    pub fn rho(&self, c: Condition) -> f64 {
        self.degenerate_ratio.get(&c).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("no domains configured".into()));
        }
        let total: f64 = self.domains.iter().map(|d| d.prior).sum();
        if self.domains.iter().any(|d| d.prior < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("domain priors must be non-negative and sum to 1, got {total}")));
        }
        for d in &self.domains {
            d.spec.validate()?;
            let name = d.spec.name.as_str();
            let prior = d.concept_prior();
            let sum: f64 = prior.iter().map(|(_, p)| p).sum();
            if prior.iter().any(|(_, p)| *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("{name} concept priors must be non-negative and sum to 1, got {sum}")));
            }
            if let Some((v, _)) = prior.iter().find(|(v, _)| !d.spec.has(v.condition())) {
                return Err(Error::Config(format!("{v} is not a valid concept for {name}")));
            }
            check_range("snr_range", d.snr_range)?;
        }
        for (c, r) in &self.degenerate_ratio {
            if !(0.0..=1.0).contains(r) {
                return Err(Error::Config(format!("degenerate ratio for {} must lie in [0, 1], got {r}", c.name())));
            }
            if *c == Condition::Energy && *r > 0.0 {
                return Err(Error::Config(
                    "a two-source mixture always has exactly one louder source; energy cannot be degenerate".into(),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.degenerate_all_match_fraction) {
            return Err(Error::Config("degenerate direction split must lie in [0, 1]".into()));
        }
        check_range("snr_range_energy_conditioned", self.snr_range_energy_conditioned)?;
        let (lo, hi) = self.overlap_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("overlap range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if self.clip_samples == 0 || self.sample_rate == 0 || self.max_retries == 0 {
            return Err(Error::Config("clip length, sample rate and retries must be positive".into()));
        }
        Ok(())
    }
}

fn check_range(what: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Config(format!("{what} ({lo}, {hi}) is not an ordered finite range")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTuple {
    pub base_seed: u64,
    pub split: Partition,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub record_id: String,
    pub speaker_id: String,
    pub profile: SourceConceptProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<SourcePlacement>,
}

/// Everything about a sample except the audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMeta {
    pub concept: ConceptValue,
    pub c: ConditionVector,
    pub degeneracy: Degeneracy,
    pub domain: DomainName,
    pub sources: Vec<SourceInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<RoomSpec>,
    /// Level of the first source over the second, in dB.
    pub snr_db: f64,
    pub overlap_fraction: f64,
    /// Onset delay of the second source, in samples.
    pub onset_delay: usize,
    pub seed: SeedTuple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub x: Waveform,
    pub s_t: Waveform,
    pub s_o: Waveform,
    /// The two scaled, rendered sources in metadata order.
    pub sources: [Waveform; 2],
    pub meta: MixtureMeta,
}

/// Draws mixtures from a fixed set of manifests.
pub struct MixtureGenerator {
    pub config: GenerationConfig,
    manifests: BTreeMap<(DomainName, Partition), Manifest>,
    rir_cache: Option<RirCache>,
}

impl MixtureGenerator {
    pub fn new(config: GenerationConfig, manifests: Vec<Manifest>) -> Result<Self> {
        config.validate()?;
        let mut map = BTreeMap::new();
        for m in manifests {
            map.insert((m.domain.name, m.partition), m);
        }
        Ok(Self { config, manifests: map, rir_cache: None })
    }

    pub fn with_rir_cache(mut self, cache: RirCache) -> Self {
        self.rir_cache = Some(cache);
        self
    }

    fn manifest(&self, domain: DomainName, split: Partition) -> Result<&Manifest> {
        self.manifests.get(&(domain, split)).ok_or_else(|| {
            Error::Config(format!("no {} manifest for domain {}", split.as_str(), domain.as_str()))
        })
    }

    /// Build the mixture for `(base_seed, split, index)`.
    pub fn sample_mixture(&self, split: Partition, index: u64, base_seed: u64) -> Result<MixtureSample> {
        let mut rng = rng_for(&[base_seed, split.code(), index]);
        let weights: Vec<f64> = self.config.domains.iter().map(|d| d.prior).collect();
        let entry = &self.config.domains[weighted(&weights, &mut rng)?];
        let prior = entry.concept_prior();
        let w: Vec<f64> = prior.iter().map(|(_, p)| *p).collect();
        let concept = prior[weighted(&w, &mut rng)?].0;
        self.build(entry, concept, SeedTuple { base_seed, split, index }, &mut rng)
    }

    /// Build a sample with the concept fixed; the domain is drawn among those
    /// for which the concept is valid.
    pub fn sample_conditioned(
        &self,
        concept: ConceptValue,
        split: Partition,
        index: u64,
        base_seed: u64,
    ) -> Result<MixtureSample> {
        let mut rng = rng_for(&[base_seed, split.code(), index, tag(concept.name())]);
        let valid: Vec<&DomainEntry> =
            self.config.domains.iter().filter(|d| d.spec.has(concept.condition())).collect();
        if valid.is_empty() {
            return Err(Error::Unsatisfiable(format!("no configured domain defines {concept}")));
        }
        let weights: Vec<f64> = valid.iter().map(|d| d.prior.max(1e-12)).collect();
        let entry = valid[weighted(&weights, &mut rng)?];
        self.build(entry, concept, SeedTuple { base_seed, split, index }, &mut rng)
    }

    fn build(&self, entry: &DomainEntry, concept: ConceptValue, seed: SeedTuple, rng: &mut impl Rng) -> Result<MixtureSample> {
        let cfg = &self.config;
        let spec = &entry.spec;
        let cond = concept.condition();
        let records = &self.manifest(spec.name, seed.split)?.records;
        let degeneracy = if rng.gen_bool(cfg.rho(cond)) {
            if rng.gen_bool(cfg.degenerate_all_match_fraction) {
                Degeneracy::AllMatch
            } else {
                Degeneracy::NoneMatch
            }
        } else {
            Degeneracy::None
        };
        // Which side of the concept each drawn source sits on.
        let (a_match, b_match) = match degeneracy {
            Degeneracy::None => (true, false),
            Degeneracy::AllMatch => (true, true),
            Degeneracy::NoneMatch => (false, false),
        };
        let label = |r: &SourceRecord| record_value(r, cond);
        let fits = |r: &SourceRecord, want: bool| match cond {
            Condition::Gender | Condition::Language => label(r).map(|v| (v == concept) == want).unwrap_or(false),
            Condition::Energy | Condition::Spatial => true,
        };
        let pool_a: Vec<&SourceRecord> = records.iter().filter(|r| fits(r, a_match)).collect();
        if pool_a.is_empty() {
            return Err(unsatisfiable(spec.name, seed.split, concept, a_match));
        }
        let energy_cond = cond == Condition::Energy;
        let snr_range = if energy_cond && cfg.energy_ambiguity_exclusion {
            cfg.snr_range_energy_conditioned
        } else {
            entry.snr_range
        };
        let t = cfg.clip_samples;
        let fs = cfg.sample_rate;

        let mut last_err = None;
        for _ in 0..cfg.max_retries {
            let rec_a = *pool_a.choose(rng).expect("non-empty");
            let pool_b: Vec<&SourceRecord> =
                records.iter().filter(|r| r.speaker_id != rec_a.speaker_id && fits(r, b_match)).collect();
            let Some(&rec_b) = pool_b.choose(rng) else {
                last_err = Some(unsatisfiable(spec.name, seed.split, concept, b_match));
                continue;
            };
            let mut recs = [rec_a, rec_b];
            let mut fields = [None, None];
            let mut room = None;
            if spec.reverberant {
                let ranges = spec.ranges.as_ref().expect("validated");
                let r = ranges.sample_room(rng);
                let classes = if cond == Condition::Spatial {
                    let own = field_of(concept);
                    let other = field_of(concept.complement().expect("binary"));
                    [if a_match { own } else { other }, if b_match { own } else { other }]
                } else {
                    pair_classes(entry.spatial_pairing, rng)
                };
                let mut placed = [None, None];
                for (slot, class) in placed.iter_mut().zip(classes) {
                    *slot = Some(place_source(&r, class, ranges, rng)?);
                }
                fields = placed;
                room = Some(r);
            }
            // Random order so that neither the target role nor the delayed
            // slot correlates with level.
            if rng.gen_bool(0.5) {
                recs.swap(0, 1);
                fields.swap(0, 1);
            }
            let overlap = acoustics::uniform(rng, cfg.overlap_range);
            let delay = ((1.0 - overlap) * t as f64).round() as usize;
            let mut clips = Vec::with_capacity(2);
            let mut clip_failed = None;
            for (i, rec) in recs.iter().enumerate() {
                let clip = match get_clip_at(rec, t, fs, rng) {
                    Ok(c) => c,
                    Err(e) => {
                        clip_failed = Some(e);
                        break;
                    }
                };
                let clip = match (&room, &fields[i]) {
                    (Some(r), Some(p)) => {
                        let opts = IsmOptions { max_order: cfg.ism_max_order, ..IsmOptions::default() };
                        let rir = match &self.rir_cache {
                            Some(cache) => cache.get_or_compute(r, &p.position, fs, &opts)?,
                            None => acoustics::image_source_rir_with(r, &p.position, fs, &opts)?,
                        };
                        acoustics::spatialize(&clip, &rir)?
                    }
                    _ => clip,
                };
                clips.push(if i == 1 { delayed(&clip, delay) } else { clip });
            }
            if let Some(e) = clip_failed {
                last_err = Some(e);
                continue;
            }
            if clips.iter().any(|c| energy(c) <= 0.0) {
                last_err = Some(Error::ZeroEnergy("silent source after cropping".into()));
                continue;
            }
            // Draw an SNR; for energy conditioning, redraw on ambiguous labels.
            let mut chosen = None;
            for _ in 0..cfg.max_retries {
                let snr = acoustics::uniform(rng, snr_range);
                let gain = snr_gain(&clips[0], &clips[1], snr)?;
                let scaled = [clips[0].clone(), clips[1].scaled(gain)];
                let assignment = assign_energy_concepts(&scaled, cfg.energy_epsilon_db);
                if energy_cond && assignment.ambiguous {
                    continue;
                }
                chosen = Some((snr, scaled, assignment.concepts));
                break;
            }
            let Some((snr, scaled, energies)) = chosen else {
                last_err = Some(Error::Unsatisfiable(format!(
                    "energy labels stayed ambiguous for SNR range {snr_range:?}"
                )));
                continue;
            };
            let mut profiles = [SourceConceptProfile::default(); 2];
            for i in 0..2 {
                let p = &mut profiles[i];
                if spec.has(Condition::Energy) {
                    p.set(energies[i]);
                }
                for c in [Condition::Gender, Condition::Language] {
                    if spec.has(c) {
                        if let Some(v) = record_value(recs[i], c) {
                            p.set(v);
                        }
                    }
                }
                if spec.has(Condition::Spatial) {
                    if let Some(pl) = &fields[i] {
                        p.set(match pl.field_class {
                            FieldClass::Near => ConceptValue::SNear,
                            FieldClass::Far => ConceptValue::SFar,
                        });
                    }
                }
            }
            let split = target_submix(&scaled, &profiles, concept)?;
            debug_assert_eq!(split.degeneracy, degeneracy);
            let sources = recs
                .iter()
                .zip(profiles)
                .zip(fields)
                .map(|((r, profile), placement)| SourceInfo {
                    record_id: r.record_id.clone(),
                    speaker_id: r.speaker_id.clone(),
                    profile,
                    placement,
                })
                .collect();
            let [s1, s2] = scaled;
            return Ok(MixtureSample {
                x: split.mixture,
                s_t: split.target,
                s_o: split.other,
                sources: [s1, s2],
                meta: MixtureMeta {
                    concept,
                    c: encode_concept(concept),
                    degeneracy,
                    domain: spec.name,
                    sources,
                    room,
                    snr_db: snr,
                    overlap_fraction: overlap,
                    onset_delay: delay,
                    seed,
                },
            });
        }
        Err(last_err.unwrap_or_else(|| Error::Unsatisfiable("retries exhausted".into())))
    }

    /// `n` fresh samples for one training epoch, produced lazily.
    pub fn make_epoch(
        &self,
        n: u64,
        base_seed: u64,
        epoch: u64,
    ) -> impl Iterator<Item = Result<MixtureSample>> + '_ {
        (epoch * n..epoch * n + n).map(move |i| self.sample_mixture(Partition::Train, i, base_seed))
    }

    /// A fixed evaluation set conditioned on one concept.
    pub fn make_eval_set(
        &self,
        concept: ConceptValue,
        n: usize,
        seed: u64,
        split: Partition,
        workers: usize,
    ) -> Result<Vec<MixtureSample>> {
        produce(workers, n as u64, |i| self.sample_conditioned(concept, split, i, seed))
    }

    /// Samples `0..n` of a split, in index order.
    pub fn make_indexed(&self, split: Partition, n: u64, base_seed: u64, workers: usize) -> Result<Vec<MixtureSample>> {
        produce(workers, n, |i| self.sample_mixture(split, i, base_seed))
    }
}

/// Evaluate `f` on `0..n` with a dedicated pool of `workers` threads.
pub fn produce<T, F>(workers: usize, n: u64, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    if workers <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

fn weighted(weights: &[f64], rng: &mut impl Rng) -> Result<usize> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("prior weights: {e}")))?;
    Ok(dist.sample(rng))
}

fn record_value(r: &SourceRecord, c: Condition) -> Option<ConceptValue> {
    match c {
        Condition::Gender => r.gender.map(|g| g.concept()),
        Condition::Language => r.language.map(|l| l.concept()),
        _ => None,
    }
}

fn field_of(v: ConceptValue) -> FieldClass {
    if v == ConceptValue::SNear {
        FieldClass::Near
    } else {
        FieldClass::Far
    }
}

fn pair_classes(policy: SpatialPairing, rng: &mut impl Rng) -> [FieldClass; 2] {
    use FieldClass::*;
    match policy {
        SpatialPairing::AlwaysNearFar => [Near, Far],
        SpatialPairing::UniformOverPairs => [[Near, Near], [Far, Far], [Near, Far]][rng.gen_range(0..3)],
    }
}

fn unsatisfiable(domain: DomainName, split: Partition, v: ConceptValue, matching: bool) -> Error {
    let relation = if matching { "=" } else { "!=" };
    Error::Unsatisfiable(format!(
        "no usable {} {} record with {} {relation} {v}",
        domain.as_str(),
        split.as_str(),
        v.condition().name()
    ))
}

/// Shift `w` right by `delay` samples inside its own frame.
fn delayed(w: &Waveform, delay: usize) -> Waveform {
    let n = w.len();
    let mut out = vec![0.0; n];
    if delay < n {
        out[delay..].copy_from_slice(&w.samples[..n - delay]);
    }
    Waveform::new(out, w.sample_rate)
}

pub const EVAL_METADATA_FILE: &str = "metadata.jsonl";

/// Write samples as `NNNNN_{x,target,other}.wav` plus a JSON-lines metadata file.
pub fn write_eval_set(samples: &[MixtureSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = fs::File::create(dir.join(EVAL_METADATA_FILE))?;
    for (i, s) in samples.iter().enumerate() {
        for (suffix, w) in [("x", &s.x), ("target", &s.s_t), ("other", &s.s_o)] {
            wav::write_wav_f32(&dir.join(format!("{i:05}_{suffix}.wav")), w)?;
        }
        writeln!(meta, "{}", serde_json::to_string(&s.meta)?)?;
    }
    Ok(())
}

/// Read back a materialized set. Individual sources are not stored, so the
/// returned `sources` hold the target and remainder.
pub fn read_eval_set(dir: &Path) -> Result<Vec<MixtureSample>> {
    let file = fs::File::open(dir.join(EVAL_METADATA_FILE))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: MixtureMeta = serde_json::from_str(&line)?;
        let load = |suffix: &str| wav::read_wav(&dir.join(format!("{i:05}_{suffix}.wav")));
        let (x, s_t, s_o) = (load("x")?, load("target")?, load("other")?);
        out.push(MixtureSample { sources: [s_t.clone(), s_o.clone()], x, s_t, s_o, meta });
    }
    Ok(out)
}
