//! Synthetic compositional datasets. Every atomic motion is an enveloped
//! sum of sinusoids; a record concatenates the primitives of its class in
//! order, with seeded duration/amplitude jitter and white noise.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{write_samples, DataError, DatasetManifest, ManifestRecord, Modality};
use crate::eval::EvalSplit;
use crate::lexicon::{ActivityClass, AtomicMotion, Lexicon, LexiconError};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("motion {motion}: {frequency} Hz is not below the Nyquist limit {nyquist} Hz")]
    Nyquist { motion: String, frequency: f64, nyquist: f64 },
    #[error("class {class} uses unknown motion {motion}")]
    UnknownMotion { class: String, motion: String },
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error("no feasible split with {m_test} test classes; motions that cannot be covered: {}", .uncovered.join(", "))]
    NoFeasibleSplit { m_test: usize, uncovered: Vec<String> },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub channel: usize,
    pub frequency_hz: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub motion_id: String,
    pub phrase: String,
    pub waves: Vec<Wave>,
    /// Fraction of the duration spent ramping up.
    pub attack: f64,
    /// Fraction of the duration spent ramping down.
    pub decay: f64,
    pub duration_seconds: f64,
}

impl MotionPrimitive {
    /// Envelope at relative position `u` in `[0, 1)`.
    pub fn envelope(&self, u: f64) -> f64 {
        if self.attack > 0.0 && u < self.attack {
            u / self.attack
        } else if self.decay > 0.0 && u > 1.0 - self.decay {
            (1.0 - u) / self.decay
        } else {
            1.0
        }
    }

    /// Adds `n` rows of this primitive, scaled by `gain`, into `out`
    /// (`[n, channels]`, row-major). The envelope spans the `n` rows; the
    /// carrier runs on record time, so row `k` sits at `(start + k) / rate_hz`.
    pub fn render(&self, n: usize, start: usize, rate_hz: f64, gain: f64, channels: usize, out: &mut [f64]) {
        for k in 0..n {
            let t = (start + k) as f64 / rate_hz;
            let env = gain * self.envelope(k as f64 / n as f64);
            for w in &self.waves {
                out[k * channels + w.channel] += env * w.amplitude * (2.0 * PI * w.frequency_hz * t + w.phase).sin();
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub id: String,
    pub label: String,
    pub motions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub rate_hz: f64,
    pub channels: usize,
    pub noise_std: f64,
    /// Relative duration and amplitude jitter; 0.1 draws factors from
    /// `[0.9, 1.1]`.
    pub jitter: f64,
    pub records_per_class: usize,
    pub seed: u64,
    pub primitives: Vec<MotionPrimitive>,
    pub classes: Vec<SynthClass>,
}

const MOTIONS: [(&str, &str); 6] = [
    ("raise", "arm raise"),
    ("swing", "arm swing"),
    ("twist", "torso twist"),
    ("squat", "squat"),
    ("step", "forward step"),
    ("jump", "jump"),
];

impl SynthSpec {
    /// Six motions, each with its own frequency on a primary and a
    /// secondary channel. Classes pair each of three lead motions with
    /// each of three finishing motions, plus two lead-lead pairs.
    pub fn default_spec(seed: u64) -> Self {
        let channels = 6;
        let primitives = MOTIONS
            .iter()
            .enumerate()
            .map(|(i, (id, phrase))| MotionPrimitive {
                motion_id: id.to_string(),
                phrase: phrase.to_string(),
                waves: vec![
                    Wave {
                        channel: i,
                        frequency_hz: 1.0 + 0.5 * i as f64,
                        amplitude: 1.0,
                        phase: 0.0,
                    },
                    Wave {
                        channel: (i + 1) % channels,
                        frequency_hz: 1.0 + 0.5 * i as f64,
                        amplitude: 0.5,
                        phase: PI / 2.0,
                    },
                ],
                attack: 0.1,
                decay: 0.1,
                duration_seconds: 2.0,
            })
            .collect();
        let lead = &MOTIONS[..3];
        let finish = &MOTIONS[3..];
        let mut pairs: Vec<(&str, &str)> = lead
            .iter()
            .flat_map(|(a, _)| finish.iter().map(move |(b, _)| (*a, *b)))
            .collect();
        pairs.push((lead[1].0, lead[0].0));
        pairs.push((lead[2].0, lead[0].0));
        let classes = pairs
            .into_iter()
            .map(|(a, b)| SynthClass {
                id: format!("{a}-{b}"),
                label: format!("{a} then {b}"),
                motions: vec![a.to_string(), b.to_string()],
            })
            .collect();
        Self {
            name: "synthetic".into(),
            rate_hz: 20.0,
            channels,
            noise_std: 0.05,
            jitter: 0.1,
            records_per_class: 10,
            seed,
            primitives,
            classes,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.rate_hz > 0.0) || !self.rate_hz.is_finite() {
            return Err(SynthError::Spec(format!("rate_hz must be positive, got {}", self.rate_hz)));
        }
        if self.channels == 0 || self.records_per_class == 0 {
            return Err(SynthError::Spec("channels and records_per_class must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0) || !(0.0..1.0).contains(&self.jitter) {
            return Err(SynthError::Spec("noise_std must be >= 0 and jitter in [0, 1)".into()));
        }
        let nyquist = self.rate_hz / 2.0;
        for p in &self.primitives {
            if !(p.duration_seconds > 0.0) {
                return Err(SynthError::Spec(format!("motion {}: duration must be positive", p.motion_id)));
            }
            if !(0.0..=1.0).contains(&p.attack) || !(0.0..=1.0).contains(&p.decay) || p.attack + p.decay > 1.0 {
                return Err(SynthError::Spec(format!("motion {}: bad envelope fractions", p.motion_id)));
            }
            for w in &p.waves {
                if w.channel >= self.channels {
                    return Err(SynthError::Spec(format!(
                        "motion {}: channel {} out of range",
                        p.motion_id, w.channel
                    )));
                }
                if !(w.frequency_hz.abs() < nyquist) {
                    return Err(SynthError::Nyquist {
                        motion: p.motion_id.clone(),
                        frequency: w.frequency_hz,
                        nyquist,
                    });
                }
            }
        }
        let known: BTreeSet<&str> = self.primitives.iter().map(|p| p.motion_id.as_str()).collect();
        for c in &self.classes {
            if c.motions.is_empty() {
                return Err(SynthError::Spec(format!("class {} has no motions", c.id)));
            }
            if let Some(m) = c.motions.iter().find(|m| !known.contains(m.as_str())) {
                return Err(SynthError::UnknownMotion {
                    class: c.id.clone(),
                    motion: m.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Lexicon {
        Lexicon {
            motions: self
                .primitives
                .iter()
                .map(|p| AtomicMotion {
                    id: p.motion_id.clone(),
                    phrase: p.phrase.clone(),
                })
                .collect(),
            classes: self
                .classes
                .iter()
                .map(|c| ActivityClass {
                    id: c.id.clone(),
                    label: c.label.clone(),
                    motions: c.motions.clone(),
                })
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| SynthError::Spec(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SynthError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("spec serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn record_rng(seed: u64, index: usize) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Renders one record of `class`. Deterministic in `(spec.seed, index)`.
pub fn render_record(spec: &SynthSpec, class: &SynthClass, index: usize) -> Tensor {
    let prims: HashMap<&str, &MotionPrimitive> =
        spec.primitives.iter().map(|p| (p.motion_id.as_str(), p)).collect();
    let mut rng = record_rng(spec.seed, index);
    let factor = |rng: &mut Xoshiro256PlusPlus| {
        if spec.jitter > 0.0 {
            rng.gen_range(1.0 - spec.jitter..=1.0 + spec.jitter)
        } else {
            1.0
        }
    };
    let parts: Vec<(&MotionPrimitive, usize, f64)> = class
        .motions
        .iter()
        .map(|m| {
            let p = prims[m.as_str()];
            let n = ((p.duration_seconds * factor(&mut rng) * spec.rate_hz).round() as usize).max(1);
            (p, n, factor(&mut rng))
        })
        .collect();
    let total: usize = parts.iter().map(|(_, n, _)| n).sum();
    let c = spec.channels;
    let mut data = vec![0.0; total * c];
    let mut offset = 0;
    for (p, n, gain) in parts {
        p.render(n, offset, spec.rate_hz, gain, c, &mut data[offset * c..(offset + n) * c]);
        offset += n;
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated noise");
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }
    Tensor::from_vec(&[total, c], data).expect("non-empty record")
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub manifest_path: PathBuf,
    pub lexicon_path: PathBuf,
    pub manifest: DatasetManifest,
    pub lexicon: Lexicon,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LEXICON_FILE: &str = "lexicon.json";

/// Writes `manifest.json`, `lexicon.json` and one `.f32` file per record
/// under `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: impl AsRef<Path>, exec: Exec) -> Result<GeneratedDataset, SynthError> {
    spec.validate()?;
    let lexicon = spec.lexicon();
    lexicon.validate()?;
    let out_dir = out_dir.as_ref();
    let data_dir = out_dir.join("data");
    std::fs::create_dir_all(&data_dir).map_err(|source| SynthError::Io {
        path: data_dir.clone(),
        source,
    })?;
    let jobs: Vec<(usize, &SynthClass, usize)> = spec
        .classes
        .iter()
        .flat_map(|c| (0..spec.records_per_class).map(move |k| (c, k)))
        .enumerate()
        .map(|(i, (c, k))| (i, c, k))
        .collect();
    let records = par::map(exec, &jobs, |&(index, class, k)| -> Result<ManifestRecord, SynthError> {
        let samples = render_record(spec, class, index);
        let id = format!("{}-{k:03}", class.id);
        let rel = PathBuf::from("data").join(format!("{id}.f32"));
        write_samples(out_dir.join(&rel), &samples)?;
        Ok(ManifestRecord {
            id,
            class_id: Some(class.id.clone()),
            path: rel,
            length: samples.shape()[0],
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        modality: Modality::Imu,
        rate_hz: spec.rate_hz,
        channels: spec.channels,
        normalization: None,
        records,
        base_dir: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let lexicon_path = out_dir.join(LEXICON_FILE);
    manifest.save(&manifest_path)?;
    lexicon.save(&lexicon_path)?;
    Ok(GeneratedDataset {
        manifest_path,
        lexicon_path,
        manifest,
        lexicon,
    })
}

/// Motions of `test` not covered by the classes outside it.
fn uncovered(classes: &[SynthClass], test: &[usize]) -> BTreeSet<String> {
    let seen: BTreeSet<&String> = classes
        .iter()
        .enumerate()
        .filter(|(i, _)| !test.contains(i))
        .flat_map(|(_, c)| &c.motions)
        .collect();
    test.iter()
        .flat_map(|&i| &classes[i].motions)
        .filter(|m| !seen.contains(m))
        .cloned()
        .collect()
}

const SPLIT_DRAWS: usize = 10_000;

fn combinations(n: usize, k: usize, mut visit: impl FnMut(&[usize]) -> bool) {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize]) -> bool) -> bool {
        if cur.len() == k {
            return visit(cur);
        }
        for i in start..n {
            cur.push(i);
            if go(i + 1, n, k, cur, visit) {
                return true;
            }
            cur.pop();
        }
        false
    }
    go(0, n, k, &mut Vec::with_capacity(k), &mut visit);
}

/// Draws `m_test` held-out classes at random until every test motion is
/// covered by the remaining classes. If sampling never succeeds, all
/// subsets are tried before giving up.
pub fn make_open_vocab_split(classes: &[SynthClass], m_test: usize, seed: u64) -> Result<EvalSplit, SynthError> {
    let n = classes.len();
    if m_test == 0 || m_test >= n {
        return Err(SynthError::Spec(format!("m_test must lie in [1, {}), got {m_test}", n)));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut chosen = None;
    for _ in 0..SPLIT_DRAWS {
        let mut pick = sample(&mut rng, n, m_test).into_vec();
        pick.sort_unstable();
        if uncovered(classes, &pick).is_empty() {
            chosen = Some(pick);
            break;
        }
    }
    if chosen.is_none() {
        combinations(n, m_test, |c| {
            if uncovered(classes, c).is_empty() {
                chosen = Some(c.to_vec());
                true
            } else {
                false
            }
        });
    }
    let Some(test) = chosen else {
        let uncovered: BTreeSet<String> = (0..n).flat_map(|i| uncovered(classes, &[i])).collect();
        return Err(SynthError::NoFeasibleSplit {
            m_test,
            uncovered: uncovered.into_iter().collect(),
        });
    };
    Ok(EvalSplit {
        train_class_ids: (0..n).filter(|i| !test.contains(i)).map(|i| classes[i].id.clone()).collect(),
        test_class_ids: test.iter().map(|&i| classes[i].id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(id: &str) -> SynthClass {
        SynthClass {
            id: id.into(),
            label: id.into(),
            motions: id.chars().map(String::from).collect(),
        }
    }

    #[test]
    fn default_spec_is_valid() {
        let spec = SynthSpec::default_spec(0);
        spec.validate().unwrap();
        assert_eq!(spec.classes.len(), 11);
        assert_eq!(spec.primitives.len(), 6);
        spec.lexicon().validate().unwrap();
    }

    #[test]
    fn nyquist_violation_rejected() {
        let mut spec = SynthSpec::default_spec(0);
        spec.primitives[2].waves[0].frequency_hz = 10.0;
        assert!(matches!(spec.validate(), Err(SynthError::Nyquist { .. })));
    }

    #[test]
    fn unknown_motion_rejected() {
        let mut spec = SynthSpec::default_spec(0);
        spec.classes[0].motions.push("cartwheel".into());
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("cartwheel"));
    }

    #[test]
    fn superset_class_is_always_feasible() {
        let classes: Vec<SynthClass> = ["AB", "BC", "CA", "ABC"].into_iter().map(class).collect();
        assert!(uncovered(&classes, &[3]).is_empty());
        let mut held = BTreeSet::new();
        for seed in 0..40 {
            let split = make_open_vocab_split(&classes, 1, seed).unwrap();
            let i = classes.iter().position(|c| c.id == split.test_class_ids[0]).unwrap();
            assert!(uncovered(&classes, &[i]).is_empty());
            held.insert(split.test_class_ids[0].clone());
        }
        assert!(held.contains("ABC"));
    }

    #[test]
    fn disjoint_pairs_have_no_split() {
        let classes: Vec<SynthClass> = ["AB", "CD"].into_iter().map(class).collect();
        let err = make_open_vocab_split(&classes, 1, 0).unwrap_err();
        match &err {
            SynthError::NoFeasibleSplit { uncovered, .. } => assert_eq!(uncovered, &["A", "B", "C", "D"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn records_are_deterministic() {
        let spec = SynthSpec::default_spec(5);
        let a = render_record(&spec, &spec.classes[3], 7);
        let b = render_record(&spec, &spec.classes[3], 7);
        assert_eq!(a, b);
        assert_ne!(a, render_record(&spec, &spec.classes[3], 8));
    }
}
