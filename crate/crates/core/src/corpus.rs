//! Source corpora: JSON-lines manifests for real collections, speaker-disjoint
//! splits, and a deterministic synthetic toy corpus whose concept labels are
//! ground truth by construction.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustics::DomainRanges;
use crate::conditions::{Condition, Gender, Language};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, tag};
use crate::signal::Waveform;
use crate::wav;
use crate::SAMPLE_RATE;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_CLIP_SECS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DomainName {
    Wsj,
    Slib,
    Svox,
    Toy,
}

impl DomainName {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainName::Wsj => "WSJ",
            DomainName::Slib => "SLIB",
            DomainName::Svox => "SVOX",
            DomainName::Toy => "TOY",
        }
    }
}

/// Collection-level description: which conditions are labelled and how
/// sources are rendered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: DomainName,
    pub conditions: Vec<Condition>,
    pub reverberant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<DomainRanges>,
    /// Language proportions in en/fr/de/es order.
    #[serde(default = "default_language_mix")]
    pub language_mix: [f64; 4],
}

fn default_language_mix() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

pub const SVOX_LANGUAGE_MIX: [f64; 4] = [0.53, 0.15, 0.16, 0.16];

impl DomainSpec {
    pub fn wsj() -> Self {
        Self {
            name: DomainName::Wsj,
            conditions: vec![Condition::Energy, Condition::Gender],
            reverberant: false,
            ranges: None,
            language_mix: default_language_mix(),
        }
    }

    pub fn slib() -> Self {
        Self {
            name: DomainName::Slib,
            conditions: vec![Condition::Energy, Condition::Gender, Condition::Spatial],
            reverberant: true,
            ranges: Some(DomainRanges::SLIB),
            language_mix: default_language_mix(),
        }
    }

    pub fn svox() -> Self {
        Self {
            name: DomainName::Svox,
            conditions: vec![Condition::Energy, Condition::Language, Condition::Spatial],
            reverberant: true,
            ranges: Some(DomainRanges::SVOX),
            language_mix: SVOX_LANGUAGE_MIX,
        }
    }

    /// Anechoic toy domain labelled for energy, gender and language.
    pub fn toy() -> Self {
        Self {
            name: DomainName::Toy,
            conditions: vec![Condition::Energy, Condition::Gender, Condition::Language],
            reverberant: false,
            ranges: None,
            language_mix: SVOX_LANGUAGE_MIX,
        }
    }

    pub fn by_name(name: DomainName) -> Self {
        match name {
            DomainName::Wsj => Self::wsj(),
            DomainName::Slib => Self::slib(),
            DomainName::Svox => Self::svox(),
            DomainName::Toy => Self::toy(),
        }
    }

    pub fn has(&self, c: Condition) -> bool {
        self.conditions.contains(&c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reverberant && self.ranges.is_none() {
            return Err(Error::Config(format!("{} is reverberant but has no room ranges", self.name.as_str())));
        }
        if self.has(Condition::Spatial) && !self.reverberant {
            return Err(Error::Config(format!(
                "{} lists the spatial condition but is anechoic",
                self.name.as_str()
            )));
        }
        let sum: f64 = self.language_mix.iter().sum();
        if self.language_mix.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("language mix {:?} must be non-negative and sum to 1", self.language_mix)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn code(self) -> u64 {
        self as u64
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

/// One clean single-speaker clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub record_id: String,
    /// A file path, or `toy:<seed>` for synthesized audio.
    pub audio_ref: String,
    pub speaker_id: String,
    pub gender: Option<Gender>,
    pub language: Option<Language>,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
    domain: DomainName,
    partition: Partition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub domain: DomainSpec,
    pub partition: Partition,
    pub records: Vec<SourceRecord>,
}

impl Manifest {
    pub fn speakers(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.speaker_id.as_str()).collect()
    }

    /// Check required metadata, unique ids and minimum duration.
    pub fn validate(&self, min_duration: f64) -> Result<()> {
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.record_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate record_id '{}'", r.record_id)));
            }
            if self.domain.has(Condition::Gender) && r.gender.is_none() {
                return Err(Error::Manifest(format!("record '{}' is missing gender", r.record_id)));
            }
            if self.domain.has(Condition::Language) && r.language.is_none() {
                return Err(Error::Manifest(format!("record '{}' is missing language", r.record_id)));
            }
            if !(r.duration + 1e-9 >= min_duration) {
                return Err(Error::Manifest(format!(
                    "record '{}' lasts {:.3} s, shorter than {:.3} s",
                    r.record_id, r.duration, min_duration
                )));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header = ManifestHeader { schema_version: SCHEMA_VERSION, domain: self.domain.name, partition: self.partition };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }
}

/// Read and validate a JSON-lines manifest.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    load_manifest_with(path, DEFAULT_CLIP_SECS)
}

pub fn load_manifest_with(path: &Path, min_duration: f64) -> Result<Manifest> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Manifest(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines().enumerate().filter(|(_, l)| {
        l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true)
    });
    let (_, first) = lines.next().ok_or_else(|| Error::Manifest(format!("{} is empty", path.display())))?;
    let header: ManifestHeader = serde_json::from_str(&first?)
        .map_err(|e| Error::Manifest(format!("{}: bad header: {e}", path.display())))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Manifest(format!(
            "{}: schema version {} unsupported (expected {SCHEMA_VERSION})",
            path.display(),
            header.schema_version
        )));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines {
        let line = line?;
        let rec: SourceRecord = serde_json::from_str(&line).map_err(|e| {
            let id = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("record_id").and_then(|s| s.as_str()).map(String::from))
                .unwrap_or_else(|| format!("line {}", lineno + 1));
            Error::Manifest(format!("{}: record '{id}': {e}", path.display()))
        })?;
        records.push(rec);
    }
    // relative audio paths are relative to the manifest file
    let base = path.parent().unwrap_or(Path::new("."));
    for rec in &mut records {
        if toy_ref_seed(&rec.audio_ref).is_none() && Path::new(&rec.audio_ref).is_relative() {
            rec.audio_ref = base.join(&rec.audio_ref).to_string_lossy().into_owned();
        }
    }
    let manifest = Manifest { domain: DomainSpec::by_name(header.domain), partition: header.partition, records };
    manifest.validate(min_duration)?;
    Ok(manifest)
}

/// Error when any speaker appears in more than one partition.
pub fn check_speaker_disjoint(manifests: &[&Manifest]) -> Result<()> {
    let mut owner: BTreeMap<&str, Partition> = BTreeMap::new();
    for m in manifests {
        for s in m.speakers() {
            if let Some(prev) = owner.insert(s, m.partition) {
                if prev != m.partition {
                    return Err(Error::Manifest(format!(
                        "speaker '{s}' appears in both {} and {}",
                        prev.as_str(),
                        m.partition.as_str()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Train/val/test manifests of one collection.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestSet {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

impl ManifestSet {
    pub fn get(&self, p: Partition) -> &Manifest {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn load(train: &Path, val: &Path, test: &Path, min_duration: f64) -> Result<Self> {
        let set = Self {
            train: load_manifest_with(train, min_duration)?,
            val: load_manifest_with(val, min_duration)?,
            test: load_manifest_with(test, min_duration)?,
        };
        check_speaker_disjoint(&[&set.train, &set.val, &set.test])?;
        Ok(set)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for p in Partition::ALL {
            self.get(p).write(&dir.join(format!("{}.jsonl", p.as_str())))?;
        }
        Ok(())
    }
}

/// Split records into speaker-disjoint partitions with speaker counts in the
/// given ratio (rounded to nearest, every partition non-empty).
pub fn split_speakers(
    domain: &DomainSpec,
    records: &[SourceRecord],
    ratios: [u32; 3],
    seed: u64,
) -> Result<ManifestSet> {
    let mut speakers: Vec<&str> = records.iter().map(|r| r.speaker_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let n = speakers.len();
    if n < 3 {
        return Err(Error::Manifest(format!("need at least 3 speakers to split, found {n}")));
    }
    let total: u32 = ratios.iter().sum();
    if total == 0 {
        return Err(Error::Config("split ratios sum to zero".into()));
    }
    let share = |r: u32| ((n as f64 * r as f64 / total as f64).round() as usize).max(1);
    let n_val = share(ratios[1]);
    let n_test = share(ratios[2]);
    if n_val + n_test >= n {
        return Err(Error::Manifest(format!("{n} speakers cannot fill a {ratios:?} split")));
    }
    let mut rng = rng_for(&[seed, tag("split_speakers")]);
    speakers.shuffle(&mut rng);
    let mut part_of: BTreeMap<&str, Partition> = BTreeMap::new();
    for (i, s) in speakers.iter().enumerate() {
        let p = if i < n_val {
            Partition::Val
        } else if i < n_val + n_test {
            Partition::Test
        } else {
            Partition::Train
        };
        part_of.insert(s, p);
    }
    let make = |p: Partition| Manifest {
        domain: domain.clone(),
        partition: p,
        records: records.iter().filter(|r| part_of[r.speaker_id.as_str()] == p).cloned().collect(),
    };
    Ok(ManifestSet { train: make(Partition::Train), val: make(Partition::Val), test: make(Partition::Test) })
}

/// Published recording/speaker counts for the real collections, compared
/// only when those manifests are supplied.
pub fn expected_counts(domain: DomainName, partition: Partition) -> Option<(usize, usize)> {
    use DomainName::*;
    use Partition::*;
    match (domain, partition) {
        (Wsj, Train) => Some((8_769, 101)),
        (Wsj, Val) => Some((3_557, 101)),
        (Wsj, Test) => Some((1_770, 18)),
        (Slib, Train) => Some((132_553, 1_172)),
        (Slib, Val) => Some((2_703, 40)),
        (Slib, Test) => Some((2_620, 40)),
        (Svox, Train) => Some((124_937, 2_347)),
        (Svox, Val) => Some((10_244, 279)),
        (Svox, Test) => Some((11_083, 294)),
        (Toy, _) => None,
    }
}

/// Human-readable mismatches against [`expected_counts`].
pub fn count_mismatches(m: &Manifest) -> Vec<String> {
    let Some((recs, spk)) = expected_counts(m.domain.name, m.partition) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    if m.records.len() != recs {
        out.push(format!("{} {}: {} recordings, expected {recs}", m.domain.name.as_str(), m.partition.as_str(), m.records.len()));
    }
    let n = m.speakers().len();
    if n != spk {
        out.push(format!("{} {}: {n} speakers, expected {spk}", m.domain.name.as_str(), m.partition.as_str()));
    }
    out
}

// ---------------------------------------------------------------------------
// Toy corpus

pub const FEMALE_F0: (f64, f64) = (165.0, 255.0);
pub const MALE_F0: (f64, f64) = (85.0, 155.0);
pub const SYLLABLE_RATE: (f64, f64) = (2.0, 8.0);
const TOY_RMS: f64 = 0.1;
const VIBRATO_DEPTH: f64 = 0.03;
const NOISE_LEVEL: f64 = 0.05;

/// Formant centers (Hz) and bandwidths of each language's spectral envelope.
/// Centroids increase from English to Spanish so the classes separate.
fn language_formants(lang: Language) -> &'static [(f64, f64, f64)] {
    match lang {
        Language::En => &[(450.0, 180.0, 1.0), (1100.0, 250.0, 0.35)],
        Language::Fr => &[(800.0, 200.0, 1.0), (1600.0, 300.0, 0.45)],
        Language::De => &[(1300.0, 250.0, 1.0), (2300.0, 350.0, 0.5)],
        Language::Es => &[(1900.0, 300.0, 1.0), (3000.0, 350.0, 0.6)],
    }
}

fn envelope_gain(lang: Language, freq: f64) -> f64 {
    language_formants(lang)
        .iter()
        .map(|(c, bw, g)| g * (-0.5 * ((freq - c) / bw).powi(2)).exp())
        .sum::<f64>()
        + 0.02
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub n_speakers: usize,
    pub records_per_speaker: usize,
    pub language_mix: [f64; 4],
    pub female_fraction: f64,
    pub duration: f64,
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 40,
            records_per_speaker: 10,
            language_mix: SVOX_LANGUAGE_MIX,
            female_fraction: 0.5,
            duration: 6.0,
            seed: 0,
        }
    }
}

/// Parameters of one synthesized clip, all derivable from its record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyVoice {
    pub f0: f64,
    pub vibrato_rate: f64,
    pub vibrato_phase: f64,
    pub syllable_rate: f64,
    pub syllable_phase: f64,
    pub language: Language,
    pub seed: u64,
}

impl ToyVoice {
    /// Voice for a record: speaker-level pitch, record-level prosody.
    pub fn for_record(rec: &SourceRecord, seed: u64) -> Result<Self> {
        let gender = rec.gender.ok_or_else(|| Error::Manifest(format!("toy record '{}' has no gender", rec.record_id)))?;
        let language = rec.language.unwrap_or(Language::En);
        let mut spk = rng_for(&[tag(&rec.speaker_id), tag("toy-speaker")]);
        let range = match gender {
            Gender::Female => FEMALE_F0,
            Gender::Male => MALE_F0,
        };
        let f0 = spk.gen_range(range.0..range.1);
        let mut r = rng_for(&[seed, tag("toy-record")]);
        Ok(Self {
            f0,
            vibrato_rate: r.gen_range(0.3..1.0),
            vibrato_phase: r.gen_range(0.0..2.0 * PI),
            syllable_rate: r.gen_range(SYLLABLE_RATE.0..SYLLABLE_RATE.1),
            syllable_phase: r.gen_range(0.0..2.0 * PI),
            language,
            seed,
        })
    }

    /// Render samples `[start, start + len)` of the clip at `fs`.
    pub fn render(&self, start: usize, len: usize, fs: u32) -> Vec<f64> {
        let fs = fs as f64;
        let nyquist = 0.475 * fs;
        let n_harm = ((nyquist / (self.f0 * (1.0 + VIBRATO_DEPTH))).floor() as usize).max(1);
        let gains: Vec<f64> = (1..=n_harm).map(|k| envelope_gain(self.language, k as f64 * self.f0) / (k as f64).sqrt()).collect();
        let vib_w = 2.0 * PI * self.vibrato_rate;
        let mut out = Vec::with_capacity(len);
        for n in start..start + len {
            let t = n as f64 / fs;
            // phase of f0 (1 + d sin(w t + p)), integrated analytically
            let phase = 2.0 * PI * self.f0
                * (t - VIBRATO_DEPTH / vib_w * ((vib_w * t + self.vibrato_phase).cos() - self.vibrato_phase.cos()));
            let (s1, c1) = phase.sin_cos();
            let (mut prev, mut cur) = (0.0, s1);
            let mut voiced = 0.0;
            for g in &gains {
                voiced += g * cur;
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
            }
            let syl = 0.5 * (1.0 - (2.0 * PI * self.syllable_rate * t + self.syllable_phase).cos());
            let env = syl.powf(1.5);
            let noise = hash_noise(self.seed, n as u64);
            out.push(env * (voiced + NOISE_LEVEL * noise * gains[0]));
        }
        out
    }

    /// RMS normalization gain, fixed per clip so any window shares the level.
    fn level(&self, fs: u32) -> f64 {
        let probe = self.render(0, fs as usize, fs);
        let rms = (probe.iter().map(|v| v * v).sum::<f64>() / probe.len() as f64).sqrt();
        if rms > 0.0 { TOY_RMS / rms } else { 1.0 }
    }
}

fn hash_noise(seed: u64, n: u64) -> f64 {
    let h = derive_seed(&[seed, n]);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn toy_ref_seed(audio_ref: &str) -> Option<u64> {
    audio_ref.strip_prefix("toy:").and_then(|s| s.parse().ok())
}

/// Deterministic pseudo-speech corpus (all records, one manifest per split
/// is obtained with [`split_speakers`]).
pub fn synth_toy_corpus(spec: &ToyCorpusSpec) -> Result<Manifest> {
    if spec.n_speakers < 2 {
        return Err(Error::Config(format!("toy corpus needs at least 2 speakers, got {}", spec.n_speakers)));
    }
    let sum: f64 = spec.language_mix.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || spec.language_mix.iter().any(|p| *p < 0.0) {
        return Err(Error::Config(format!("language mix {:?} must sum to 1", spec.language_mix)));
    }
    let mut rng = rng_for(&[spec.seed, tag("toy-corpus")]);
    let n_female = (spec.n_speakers as f64 * spec.female_fraction).round() as usize;
    // deterministic quota assignment keeps language proportions close to the mix
    let languages = apportion(&spec.language_mix, spec.n_speakers);
    let mut genders: Vec<Gender> = (0..spec.n_speakers).map(|i| if i < n_female { Gender::Female } else { Gender::Male }).collect();
    genders.shuffle(&mut rng);
    let mut records = Vec::with_capacity(spec.n_speakers * spec.records_per_speaker);
    for (s, (gender, language)) in genders.into_iter().zip(languages).enumerate() {
        let speaker_id = format!("toy{:03}-spk{:04}", spec.seed % 1000, s);
        for r in 0..spec.records_per_speaker {
            let seed = derive_seed(&[spec.seed, s as u64, r as u64]);
            records.push(SourceRecord {
                record_id: format!("{speaker_id}-{r:03}"),
                audio_ref: format!("toy:{seed}"),
                speaker_id: speaker_id.clone(),
                gender: Some(gender),
                language: Some(language),
                duration: spec.duration,
            });
        }
    }
    let mut domain = DomainSpec::toy();
    domain.language_mix = spec.language_mix;
    Ok(Manifest { domain, partition: Partition::Train, records })
}

/// Largest-remainder allocation of `n` items to categories, interleaved so
/// any prefix is roughly proportional.
fn apportion(mix: &[f64; 4], n: usize) -> Vec<Language> {
    let quotas: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = quotas.iter().enumerate().map(|(i, q)| (i, q - q.floor())).collect();
    rem.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let assigned: usize = counts.iter().sum();
    for (i, _) in rem.into_iter().take(n - assigned) {
        counts[i] += 1;
    }
    let mut out = Vec::with_capacity(n);
    let mut given = [0usize; 4];
    for k in 0..n {
        // pick the language furthest behind its share
        let target = (k + 1) as f64;
        let i = (0..4)
            .filter(|&i| given[i] < counts[i])
            .max_by(|&a, &b| {
                let da = mix[a] * target - given[a] as f64;
                let db = mix[b] * target - given[b] as f64;
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("counts cover n");
        given[i] += 1;
        out.push(Language::ALL[i]);
    }
    out
}

/// Write every toy record as an 8 kHz float WAV and point the
/// manifest at the files.
pub fn materialize_audio(manifest: &Manifest, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut out = manifest.clone();
    for rec in &mut out.records {
        if toy_ref_seed(&rec.audio_ref).is_none() {
            continue;
        }
        let full = load_full(rec, SAMPLE_RATE)?;
        let path = dir.join(format!("{}.wav", rec.record_id));
        wav::write_wav_f32(&path, &full)?;
        rec.audio_ref = path.to_string_lossy().into_owned();
    }
    Ok(out)
}

fn load_full(rec: &SourceRecord, fs: u32) -> Result<Waveform> {
    if let Some(seed) = toy_ref_seed(&rec.audio_ref) {
        let voice = ToyVoice::for_record(rec, seed)?;
        let len = (rec.duration * fs as f64).round() as usize;
        let gain = voice.level(fs);
        let samples = voice.render(0, len, fs).into_iter().map(|v| v * gain).collect();
        return Ok(Waveform::new(samples, fs));
    }
    let w = wav::read_wav(&PathBuf::from(&rec.audio_ref))?;
    Ok(if w.sample_rate == fs { w } else { resample(&w, fs) })
}

/// Crop a `target_len`-sample window (uniform random start) at 8 kHz.
pub fn get_clip<R: Rng + ?Sized>(rec: &SourceRecord, target_len: usize, rng: &mut R) -> Result<Waveform> {
    get_clip_at(rec, target_len, SAMPLE_RATE, rng)
}

pub fn get_clip_at<R: Rng + ?Sized>(rec: &SourceRecord, target_len: usize, fs: u32, rng: &mut R) -> Result<Waveform> {
    if let Some(seed) = toy_ref_seed(&rec.audio_ref) {
        // toy audio is a closed-form function of time: render only the window
        let voice = ToyVoice::for_record(rec, seed)?;
        let total = (rec.duration * fs as f64).round() as usize;
        let start = crop_start(total, target_len, &rec.record_id, rng)?;
        let gain = voice.level(fs);
        let samples = voice.render(start, target_len, fs).into_iter().map(|v| v * gain).collect();
        return Ok(Waveform::new(samples, fs));
    }
    let full = load_full(rec, fs)?;
    let start = crop_start(full.len(), target_len, &rec.record_id, rng)?;
    Ok(Waveform::new(full.samples[start..start + target_len].to_vec(), fs))
}

fn crop_start<R: Rng + ?Sized>(total: usize, want: usize, id: &str, rng: &mut R) -> Result<usize> {
    if total < want {
        return Err(Error::Audio {
            path: PathBuf::from(id),
            reason: format!("{total} samples available, {want} required"),
        });
    }
    Ok(if total > want { rng.gen_range(0..=total - want) } else { 0 })
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(w: &Waveform, fs: u32) -> Waveform {
    if w.sample_rate == fs || w.is_empty() {
        return Waveform::new(w.samples.clone(), fs);
    }
    let ratio = fs as f64 / w.sample_rate as f64;
    let cutoff = ratio.min(1.0);
    let half_width = 16.0 / cutoff;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let center = m as f64 / ratio;
        let lo = (center - half_width).ceil().max(0.0) as usize;
        let hi = ((center + half_width).floor() as usize).min(w.len() - 1);
        let mut acc = 0.0;
        for n in lo..=hi {
            let x = n as f64 - center;
            let window = 0.5 * (1.0 + (PI * x / half_width).cos());
            let arg = PI * cutoff * x;
            let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
            acc += w.samples[n] * cutoff * sinc * window;
        }
        out.push(acc);
    }
    Waveform::new(out, fs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, spk: &str, g: Option<Gender>, l: Option<Language>) -> SourceRecord {
        SourceRecord {
            record_id: id.into(),
            audio_ref: format!("/data/{id}.wav"),
            speaker_id: spk.into(),
            gender: g,
            language: l,
            duration: 5.0,
        }
    }

    fn write_lines(dir: &Path, name: &str, lines: &[String]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn load_well_formed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            domain: DomainSpec::wsj(),
            partition: Partition::Train,
            records: vec![
                rec("a", "s1", Some(Gender::Male), None),
                rec("b", "s1", Some(Gender::Male), None),
                rec("c", "s2", Some(Gender::Female), None),
            ],
        };
        let p = dir.path().join("wsj.jsonl");
        m.write(&p).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back.records.len(), 3);
        assert_eq!(back, m);
    }

    #[test]
    fn svox_record_without_language_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let header = r#"{"schema_version":1,"domain":"SVOX","partition":"train"}"#.to_string();
        let r = serde_json::to_string(&rec("x1", "s", None, None)).unwrap();
        let p = write_lines(dir.path(), "svox.jsonl", &[header, r]);
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("x1"), "{err}");
        assert!(err.to_string().contains("language"));
    }

    #[test]
    fn duplicate_ids_and_bad_schema_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let header = r#"{"schema_version":1,"domain":"WSJ","partition":"test"}"#.to_string();
        let r = serde_json::to_string(&rec("dup", "s", Some(Gender::Female), None)).unwrap();
        let p = write_lines(dir.path(), "d.jsonl", &[header.clone(), r.clone(), r]);
        assert!(load_manifest(&p).unwrap_err().to_string().contains("duplicate"));

        let p = write_lines(dir.path(), "b.jsonl", &[header, r#"{"record_id":"broken","speaker_id":3}"#.into()]);
        let err = load_manifest(&p).unwrap_err();
        assert_eq!(err.category(), "manifest");
        assert!(err.to_string().contains("broken"));
    }

    #[test]
    fn overlapping_speakers_across_partitions_error() {
        let mk = |p, ids: &[&str]| Manifest {
            domain: DomainSpec::wsj(),
            partition: p,
            records: ids.iter().map(|s| rec(&format!("{s}-{p:?}"), s, Some(Gender::Male), None)).collect(),
        };
        let a = mk(Partition::Train, &["s1", "s2"]);
        let b = mk(Partition::Test, &["s2"]);
        assert!(check_speaker_disjoint(&[&a, &b]).is_err());
        let c = mk(Partition::Test, &["s3"]);
        assert!(check_speaker_disjoint(&[&a, &c]).is_ok());
    }

    fn speakers(n: usize) -> Vec<SourceRecord> {
        (0..n).flat_map(|s| (0..2).map(move |r| rec(&format!("r{s}-{r}"), &format!("s{s}"), Some(Gender::Female), None))).collect()
    }

    #[test]
    fn split_ratios() {
        for (n, want) in [(10, [8, 1, 1]), (100, [80, 10, 10]), (3, [1, 1, 1])] {
            let set = split_speakers(&DomainSpec::wsj(), &speakers(n), [8, 1, 1], 7).unwrap();
            let got = [set.train.speakers().len(), set.val.speakers().len(), set.test.speakers().len()];
            assert_eq!(got, want, "n = {n}");
            check_speaker_disjoint(&[&set.train, &set.val, &set.test]).unwrap();
        }
        let a = split_speakers(&DomainSpec::wsj(), &speakers(30), [8, 1, 1], 3).unwrap();
        let b = split_speakers(&DomainSpec::wsj(), &speakers(30), [8, 1, 1], 3).unwrap();
        assert_eq!(a, b);
        assert!(split_speakers(&DomainSpec::wsj(), &speakers(2), [8, 1, 1], 0).is_err());
    }

    #[test]
    fn toy_corpus_is_deterministic_and_follows_mix() {
        let spec = ToyCorpusSpec { n_speakers: 100, records_per_speaker: 2, ..ToyCorpusSpec::default() };
        let a = synth_toy_corpus(&spec).unwrap();
        let b = synth_toy_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let en = a.records.iter().filter(|r| r.language == Some(Language::En)).count();
        assert_eq!(en, 106);
        let clip_a = get_clip(&a.records[3], 800, &mut rng_for(&[1])).unwrap();
        let clip_b = get_clip(&b.records[3], 800, &mut rng_for(&[1])).unwrap();
        assert_eq!(clip_a, clip_b);
        assert!(synth_toy_corpus(&ToyCorpusSpec { n_speakers: 1, ..spec }).is_err());
    }

    #[test]
    fn toy_window_matches_full_render() {
        let m = synth_toy_corpus(&ToyCorpusSpec { n_speakers: 2, records_per_speaker: 1, ..ToyCorpusSpec::default() }).unwrap();
        let r = &m.records[0];
        let full = load_full(r, SAMPLE_RATE).unwrap();
        let mut rng = rng_for(&[5]);
        let clip = get_clip(r, 32_000, &mut rng).unwrap();
        let start = full.samples.windows(4).position(|w| w == &clip.samples[..4]).unwrap();
        for (a, b) in clip.samples.iter().zip(&full.samples[start..]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_cropping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wav");
        let w = Waveform::from_samples((0..48_000).map(|i| ((i % 200) as f64 / 200.0) - 0.5).collect());
        wav::write_wav_f32(&path, &w).unwrap();
        let mut r = rec("c", "s", Some(Gender::Male), None);
        r.audio_ref = path.to_string_lossy().into_owned();
        r.duration = 6.0;
        let clip = get_clip(&r, 32_000, &mut rng_for(&[2])).unwrap();
        assert_eq!(clip.len(), 32_000);
        let again = get_clip(&r, 32_000, &mut rng_for(&[2])).unwrap();
        assert_eq!(clip, again);
        let whole = get_clip(&r, 48_000, &mut rng_for(&[2])).unwrap();
        assert_eq!(whole.samples.len(), 48_000);
        assert!(get_clip(&r, 48_001, &mut rng_for(&[2])).is_err());
        r.audio_ref = "/missing.wav".into();
        assert_eq!(get_clip(&r, 100, &mut rng_for(&[2])).unwrap_err().category(), "audio");
    }

    #[test]
    fn resampling_preserves_a_low_tone() {
        let tone = |fs: u32, n: usize| {
            Waveform::new((0..n).map(|i| (2.0 * PI * 200.0 * i as f64 / fs as f64).sin()).collect(), fs)
        };
        let src = tone(16_000, 16_000);
        let out = resample(&src, 8000);
        assert_eq!(out.len(), 8000);
        let want = tone(8000, 8000);
        for i in 100..7900 {
            assert!((out.samples[i] - want.samples[i]).abs() < 1e-2, "{i}");
        }
    }
}
