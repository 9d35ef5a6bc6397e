//! Median SI-SDR evaluation of conditional and permutation-invariant models.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conditions::{ConceptValue, Degeneracy, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::mixgen::MixtureSample;
use crate::model::SeparationModel;
use crate::signal::{si_sdr, Waveform};

/// JSON has no infinities; scores serialize them as the strings "+inf"/"-inf".
mod db_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v == f64::INFINITY {
            Repr::Text("+inf".into())
        } else if v == f64::NEG_INFINITY {
            Repr::Text("-inf".into())
        } else {
            Repr::Num(v)
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "+inf" => Ok(f64::INFINITY),
            Repr::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Text(t) => Err(E::custom(format!("bad score {t:?}"))),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.map(to_repr).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(from_repr).transpose()
        }
    }
}

/// Median with the report conventions: an even-length list whose middle pair
/// holds one infinity resolves to that infinity; a `-inf`/`+inf` middle pair
/// has no midpoint and is an error.
pub fn aggregate_median(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("median of an empty score list".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        return Ok(v[n / 2]);
    }
    let (a, b) = (v[n / 2 - 1], v[n / 2]);
    match (a.is_infinite(), b.is_infinite()) {
        (true, true) if a != b => Err(Error::NonFinite("median straddles -inf and +inf".into())),
        (true, _) => Ok(a),
        (_, true) => Ok(b),
        _ => Ok(0.5 * (a + b)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Discriminative,
    TargetIsMixture,
    TargetIsZero,
}

impl Pool {
    pub const ALL: [Pool; 3] = [Pool::Discriminative, Pool::TargetIsMixture, Pool::TargetIsZero];

    pub fn of(d: Degeneracy) -> Pool {
        match d {
            Degeneracy::None => Pool::Discriminative,
            Degeneracy::AllMatch => Pool::TargetIsMixture,
            Degeneracy::NoneMatch => Pool::TargetIsZero,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Discriminative => "discriminative",
            Pool::TargetIsMixture => "target_is_mixture",
            Pool::TargetIsZero => "target_is_zero",
        }
    }
}

/// Score of one sample and the score of the unprocessed mixture on the same
/// reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub index: usize,
    pub concept: ConceptValue,
    pub pool: Pool,
    #[serde(with = "db_serde")]
    pub si_sdr: f64,
    #[serde(with = "db_serde")]
    pub mixture_si_sdr: f64,
}

impl SampleScore {
    pub fn improvement(&self) -> f64 {
        self.si_sdr - self.mixture_si_sdr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub count: usize,
    #[serde(with = "db_serde::option")]
    pub median: Option<f64>,
    #[serde(with = "db_serde::option")]
    pub median_improvement: Option<f64>,
    pub infinities: usize,
    /// Debug only; headline numbers are medians.
    pub mean: Option<f64>,
}

impl PoolStats {
    pub fn from_scores(scores: &[SampleScore]) -> Result<Self> {
        let vals: Vec<f64> = scores.iter().map(|s| s.si_sdr).collect();
        // Improvement is undefined where the mixture itself is a perfect estimate.
        let imps: Vec<f64> = if scores.iter().all(|s| s.mixture_si_sdr.is_finite()) {
            scores.iter().map(SampleScore::improvement).collect()
        } else {
            Vec::new()
        };
        let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        Ok(Self {
            count: vals.len(),
            median: if vals.is_empty() { None } else { Some(aggregate_median(&vals)?) },
            median_improvement: if imps.is_empty() { None } else { Some(aggregate_median(&imps)?) },
            infinities: vals.iter().filter(|v| v.is_infinite()).count(),
            mean: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub concept: ConceptValue,
    pub pools: BTreeMap<Pool, PoolStats>,
    /// Samples left out of every pool, such as degenerate ones under PIT.
    pub excluded: usize,
}

impl ConceptReport {
    pub fn pool(&self, p: Pool) -> Option<&PoolStats> {
        self.pools.get(&p)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub eval_seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Conditional,
    PitOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub concepts: Vec<ConceptReport>,
    pub provenance: Provenance,
    pub samples: Vec<SampleScore>,
}

impl EvalReport {
    pub fn from_scores(mode: EvalMode, samples: Vec<SampleScore>, excluded: &BTreeMap<ConceptValue, usize>) -> Result<Self> {
        let mut by_concept: BTreeMap<ConceptValue, Vec<SampleScore>> = BTreeMap::new();
        for s in &samples {
            by_concept.entry(s.concept).or_default().push(*s);
        }
        for c in excluded.keys() {
            by_concept.entry(*c).or_default();
        }
        let mut concepts = Vec::new();
        for (concept, scores) in by_concept {
            let mut pools = BTreeMap::new();
            for p in Pool::ALL {
                let sub: Vec<SampleScore> = scores.iter().filter(|s| s.pool == p).copied().collect();
                if !sub.is_empty() {
                    pools.insert(p, PoolStats::from_scores(&sub)?);
                }
            }
            concepts.push(ConceptReport { concept, pools, excluded: excluded.get(&concept).copied().unwrap_or(0) });
        }
        Ok(Self { mode, concepts, provenance: Provenance::default(), samples })
    }

    pub fn concept(&self, v: ConceptValue) -> Option<&ConceptReport> {
        self.concepts.iter().find(|c| c.concept == v)
    }

    pub fn median(&self, v: ConceptValue, p: Pool) -> Option<f64> {
        self.concept(v)?.pool(p)?.median
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self, label: &str) -> String {
        render_table(&[(label.to_string(), self)])
    }
}

fn fmt_db(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => if x > 0.0 { "+inf" } else { "-inf" }.to_string(),
        Some(x) => format!("{x:.2}"),
        None => "-".to_string(),
    }
}

/// Aligned text table: one row per report, one column per concept and pool.
pub fn render_table(rows: &[(String, &EvalReport)]) -> String {
    let mut columns: Vec<(ConceptValue, Pool)> = Vec::new();
    for (_, r) in rows {
        for c in &r.concepts {
            for p in c.pools.keys() {
                if !columns.contains(&(c.concept, *p)) {
                    columns.push((c.concept, *p));
                }
            }
        }
    }
    columns.sort();
    let header: Vec<String> = columns
        .iter()
        .map(|(c, p)| match p {
            Pool::Discriminative => c.name().to_string(),
            _ => format!("{}[{}]", c.name(), p.as_str()),
        })
        .collect();
    let cells: Vec<Vec<String>> =
        rows.iter().map(|(_, r)| columns.iter().map(|(c, p)| fmt_db(r.median(*c, *p))).collect()).collect();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("model".len());
    let widths: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(j, h)| cells.iter().map(|r| r[j].len()).max().unwrap_or(0).max(h.len()))
        .collect();
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "model");
    for (h, w) in header.iter().zip(&widths) {
        let _ = write!(out, "  {h:>w$}");
    }
    out.push('\n');
    for ((label, _), row) in rows.iter().zip(&cells) {
        let _ = write!(out, "{label:<label_w$}");
        for (v, w) in row.iter().zip(&widths) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    out
}

/// Score a conditional estimate pair against a sample, routing degenerate
/// cases to their own pools.
pub fn score_conditional(index: usize, est_t: &Waveform, est_o: &Waveform, sample: &MixtureSample) -> Result<SampleScore> {
    let pool = Pool::of(sample.meta.degeneracy);
    let (est, reference) = match pool {
        Pool::Discriminative => (est_t, &sample.s_t),
        Pool::TargetIsMixture => (est_t, &sample.x),
        Pool::TargetIsZero => (est_o, &sample.x),
    };
    Ok(SampleScore {
        index,
        concept: sample.meta.concept,
        pool,
        si_sdr: si_sdr(est, reference)?,
        mixture_si_sdr: si_sdr(&sample.x, reference)?,
    })
}

/// Best SI-SDR of either estimate against the target.
pub fn oracle_score(estimates: [&Waveform; 2], target: &Waveform) -> Result<f64> {
    Ok(si_sdr(estimates[0], target)?.max(si_sdr(estimates[1], target)?))
}

pub fn evaluate_conditional(model: &SeparationModel, samples: &[MixtureSample]) -> Result<EvalReport> {
    if !model.config.conditioned {
        return Err(Error::Config("conditional evaluation needs a conditioned model".into()));
    }
    if model.config.vocab_size != VOCAB_SIZE {
        return Err(Error::Config(format!("model vocabulary has {} entries", model.config.vocab_size)));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.meta.c.decode()? != s.meta.concept {
            return Err(Error::InvalidCondition(format!("sample {i}: condition vector disagrees with its concept")));
        }
        let (t, o) = model.forward(&s.x, &s.meta.c)?;
        scores.push(score_conditional(i, &t, &o, s)?);
    }
    EvalReport::from_scores(EvalMode::Conditional, scores, &BTreeMap::new())
}

pub fn evaluate_pit_oracle(model: &SeparationModel, samples: &[MixtureSample]) -> Result<EvalReport> {
    if model.config.conditioned {
        return Err(Error::Config("oracle-assignment evaluation needs an unconditional model".into()));
    }
    let mut scores = Vec::with_capacity(samples.len());
    let mut excluded: BTreeMap<ConceptValue, usize> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        if s.meta.degeneracy != Degeneracy::None {
            *excluded.entry(s.meta.concept).or_default() += 1;
            continue;
        }
        let (a, b) = model.forward_unconditional(&s.x)?;
        scores.push(SampleScore {
            index: i,
            concept: s.meta.concept,
            pool: Pool::Discriminative,
            si_sdr: oracle_score([&a, &b], &s.s_t)?,
            mixture_si_sdr: si_sdr(&s.x, &s.s_t)?,
        });
    }
    if !excluded.is_empty() {
        log::info!("oracle evaluation skipped degenerate samples: {excluded:?}");
    }
    EvalReport::from_scores(EvalMode::PitOracle, scores, &excluded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditions::{encode_concept, SourceConceptProfile};
    use crate::corpus::{DomainName, Partition};
    use crate::mixgen::{MixtureMeta, SeedTuple, SourceInfo};

    #[test]
    fn median_examples() {
        assert_eq!(aggregate_median(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(aggregate_median(&[-5.0, -1.0, 100.0]).unwrap(), -1.0);
        assert_eq!(aggregate_median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert_eq!(aggregate_median(&[0.0, f64::INFINITY]).unwrap(), f64::INFINITY);
        assert_eq!(aggregate_median(&[f64::INFINITY, f64::INFINITY]).unwrap(), f64::INFINITY);
        assert!(aggregate_median(&[f64::NEG_INFINITY, f64::INFINITY]).is_err());
        assert!(aggregate_median(&[]).is_err());
    }

    fn sample(s1: Vec<f64>, s2: Vec<f64>, degeneracy: Degeneracy) -> MixtureSample {
        let a = Waveform::from_samples(s1);
        let b = Waveform::from_samples(s2);
        let x = a.add(&b).unwrap();
        let (s_t, s_o) = match degeneracy {
            Degeneracy::None => (a.clone(), b.clone()),
            Degeneracy::AllMatch => (x.clone(), Waveform::zeros(x.len(), x.sample_rate)),
            Degeneracy::NoneMatch => (Waveform::zeros(x.len(), x.sample_rate), x.clone()),
        };
        let info = SourceInfo {
            record_id: "r".into(),
            speaker_id: "s".into(),
            profile: SourceConceptProfile::default(),
            placement: None,
        };
        MixtureSample {
            x,
            s_t,
            s_o,
            sources: [a, b],
            meta: MixtureMeta {
                concept: ConceptValue::GFemale,
                c: encode_concept(ConceptValue::GFemale),
                degeneracy,
                domain: DomainName::Toy,
                sources: vec![info.clone(), info],
                room: None,
                snr_db: 0.0,
                overlap_fraction: 1.0,
                onset_delay: 0,
                seed: SeedTuple { base_seed: 0, split: Partition::Test, index: 0 },
            },
        }
    }

    #[test]
    fn half_mixture_on_equal_power_orthogonal_sources_scores_zero_db() {
        let s = sample(vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0], Degeneracy::None);
        let half = s.x.scaled(0.5);
        let sc = score_conditional(0, &half, &half, &s).unwrap();
        assert!(sc.si_sdr.abs() < 1e-12);
        assert!(sc.improvement().abs() < 1e-12);
    }

    #[test]
    fn routing_rules() {
        let s = sample(vec![1.0, 2.0, 0.5], vec![0.3, -1.0, 2.0], Degeneracy::NoneMatch);
        let zero = Waveform::zeros(3, s.x.sample_rate);
        let sc = score_conditional(0, &zero, &s.x, &s).unwrap();
        assert_eq!(sc.pool, Pool::TargetIsZero);
        assert_eq!(sc.si_sdr, f64::INFINITY);
        let s = sample(vec![1.0, 2.0, 0.5], vec![0.3, -1.0, 2.0], Degeneracy::AllMatch);
        let sc = score_conditional(0, &s.x, &zero, &s).unwrap();
        assert_eq!(sc.pool, Pool::TargetIsMixture);
    }

    #[test]
    fn oracle_dominates_fixed_assignments() {
        let s = sample(vec![1.0, 2.0, 0.5, -1.0], vec![0.3, -1.0, 2.0, 0.1], Degeneracy::None);
        let (a, b) = (s.sources[0].clone(), s.sources[1].clone());
        assert_eq!(oracle_score([&b, &a], &s.s_t).unwrap(), f64::INFINITY);
        let est = [Waveform::from_samples(vec![0.9, 1.0, 1.0, 0.0]), Waveform::from_samples(vec![0.2, 0.1, 1.0, 1.0])];
        let best = oracle_score([&est[0], &est[1]], &s.s_t).unwrap();
        for e in &est {
            assert!(best >= si_sdr(e, &s.s_t).unwrap());
        }
    }

    #[test]
    fn report_pools_and_table() {
        let scores = vec![
            SampleScore { index: 0, concept: ConceptValue::GMale, pool: Pool::Discriminative, si_sdr: 5.0, mixture_si_sdr: 1.0 },
            SampleScore { index: 1, concept: ConceptValue::GMale, pool: Pool::Discriminative, si_sdr: 7.0, mixture_si_sdr: 1.0 },
            SampleScore { index: 2, concept: ConceptValue::GMale, pool: Pool::TargetIsZero, si_sdr: f64::INFINITY, mixture_si_sdr: 0.0 },
        ];
        let r = EvalReport::from_scores(EvalMode::Conditional, scores, &BTreeMap::new()).unwrap();
        assert_eq!(r.median(ConceptValue::GMale, Pool::Discriminative), Some(6.0));
        assert_eq!(r.concept(ConceptValue::GMale).unwrap().pool(Pool::Discriminative).unwrap().median_improvement, Some(5.0));
        assert_eq!(r.median(ConceptValue::GMale, Pool::TargetIsZero), Some(f64::INFINITY));
        let table = r.to_table("toy");
        assert!(table.contains("G_MALE"));
        assert!(table.contains("+inf"));
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].len(), lines[1].len());
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
