//! Synthetic paired corpora.
//!
//! Each token is one or two onset frames followed by one to three steady
//! frames, optionally preceded by a silence frame. The dysarthric variant of an
//! utterance is the normal one stretched in time, with some token
//! occurrences pushed off their canonical sound and heavier noise.
//!
//! Reconstruction targets live in a separate feature space. A frame's target
//! class combines a coarse token group with a prosody mark that depends on
//! what follows: whether the utterance is about to end, otherwise the next
//! token's parity, or for pauses the parity of the final token. Predicting a
//! code well therefore needs look-ahead, mostly short and sometimes long,
//! which is what the wait-k views trade off.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{ParamSet, Tensor};
use crate::quantizer::{fit_codebook, Codebook, QuantizerConfig};
use crate::transducer::BLANK;
use crate::{Error, Result};

/// Number of target classes: four token groups times four prosody marks.
pub const TARGET_CLASSES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Label vocabulary including the blank.
    pub vocab: usize,
    pub feature_dim: usize,
    pub target_dim: usize,
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Frame range of normal utterances.
    pub min_frames: usize,
    pub max_frames: usize,
    pub silence_prob: f64,
    pub noise: f64,
    pub stretch_min: f64,
    pub stretch_max: f64,
    /// Chance that a token occurrence is pushed off its canonical sound.
    pub substitution_prob: f64,
    pub substitution_scale: f64,
    /// Extra frame noise on the dysarthric variant.
    pub dys_noise: f64,
    pub target_noise: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab: 12,
            feature_dim: 12,
            target_dim: 8,
            train_utterances: 8000,
            test_utterances: 200,
            min_tokens: 3,
            max_tokens: 6,
            min_frames: 6,
            max_frames: 24,
            silence_prob: 0.2,
            noise: 0.05,
            stretch_min: 1.2,
            stretch_max: 1.6,
            substitution_prob: 0.3,
            substitution_scale: 0.8,
            dys_noise: 0.15,
            target_noise: 0.02,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.vocab < 2 {
            return bad("vocab must include the blank and at least one token");
        }
        if self.feature_dim == 0 || self.target_dim == 0 {
            return bad("feature dimensions must be positive");
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("token range is empty");
        }
        if self.min_frames > self.max_frames || self.max_frames < 2 * self.min_tokens {
            return bad("frame range is empty");
        }
        if !(self.stretch_min >= 1.0 && self.stretch_min <= self.stretch_max) {
            return bad("stretch range must satisfy 1 <= min <= max");
        }
        for p in [self.silence_prob, self.substitution_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if [self.noise, self.dys_noise, self.target_noise, self.substitution_scale]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("noise scales must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Normal,
    Dys,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Index shared by the normal and dysarthric variants.
    pub pair: usize,
    pub variant: Variant,
    pub split: Split,
    /// `[T, feature_dim]`.
    pub x: Tensor,
    pub tokens: Vec<usize>,
    /// `[T, target_dim]`.
    pub target: Tensor,
    /// One code per frame.
    pub codes: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.x.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub pair: usize,
    pub variant: Variant,
    pub split: Split,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "U")]
    pub labels: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: CorpusSpec,
    pub codes: usize,
    pub utterances: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub codebook: Codebook,
    pub utterances: Vec<Utterance>,
}

/// Canonical sounds and target prototypes shared by every utterance.
struct World {
    onset: Vec<Vec<f64>>,
    steady: Vec<Vec<f64>>,
    silence: Vec<f64>,
    shift: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

fn randn_vec<R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<f64> {
    Tensor::randn(&[n], std, rng).into_data()
}

impl World {
    fn new(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Self {
        let f = spec.feature_dim;
        let table = |rng: &mut ChaCha8Rng, std: f64| (0..spec.vocab).map(|_| randn_vec(f, std, rng)).collect();
        let onset = table(rng, 1.0);
        let steady = table(rng, 1.0);
        let silence = randn_vec(f, 1.0, rng);
        let shift = table(rng, spec.substitution_scale);
        let targets = (0..TARGET_CLASSES).map(|_| randn_vec(spec.target_dim, 1.0, rng)).collect();
        Self {
            onset,
            steady,
            silence,
            shift,
            targets,
        }
    }
}

/// Target class of a frame owned by token position `i` of `tokens`.
pub fn target_class(tokens: &[usize], i: usize, silence: bool) -> usize {
    let n = tokens.len();
    let prosody = if i + 1 == n {
        3
    } else if i + 2 == n {
        2
    } else if silence {
        // pauses carry the sentence type, set by the final token
        tokens[n - 1] % 2
    } else {
        tokens[i + 1] % 2
    };
    let group = if silence { 0 } else { 1 + (tokens[i] - 1) % 3 };
    group * 4 + prosody
}

/// Normal frame index behind dysarthric frame `j`.
pub fn stretch_map(normal: usize, stretched: usize, j: usize) -> usize {
    j * normal / stretched
}

/// Length of an utterance of `normal` frames stretched by `s`.
pub fn stretched_len(normal: usize, s: f64) -> usize {
    ((normal as f64 * s).round() as usize).max(normal)
}

struct Draft {
    tokens: Vec<usize>,
    /// Per frame: owning token position and which part of it the frame is.
    owner: Vec<(usize, Part)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Silence,
    Onset,
    Steady,
}

fn draft(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<Draft> {
    for _ in 0..10_000 {
        let n = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let tokens: Vec<usize> = (0..n).map(|_| rng.random_range(1..spec.vocab)).collect();
        let mut owner = Vec::new();
        for i in 0..n {
            if rng.random::<f64>() < spec.silence_prob {
                owner.push((i, Part::Silence));
            }
            let onset = rng.random_range(1..=2);
            let steady = rng.random_range(1..=3);
            owner.extend(std::iter::repeat_n((i, Part::Onset), onset));
            owner.extend(std::iter::repeat_n((i, Part::Steady), steady));
        }
        if (spec.min_frames..=spec.max_frames).contains(&owner.len()) {
            return Ok(Draft { tokens, owner });
        }
    }
    Err(Error::Config("frame range is unreachable with the token range".into()))
}

fn noisy(base: &[f64], std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if std == 0.0 {
        return base.to_vec();
    }
    base.iter().zip(randn_vec(base.len(), std, rng)).map(|(b, n)| b + n).collect()
}

/// Normal and dysarthric variants of pair `pair`, codes still unset.
fn make_pair(spec: &CorpusSpec, world: &World, seed: u64, pair: usize, split: Split) -> Result<[Utterance; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(pair as u64 + 1);
    let Draft { tokens, owner } = draft(spec, &mut rng)?;

    let mut x = Vec::with_capacity(owner.len());
    let mut target = Vec::with_capacity(owner.len());
    for &(i, part) in &owner {
        let canonical = match part {
            Part::Silence => &world.silence,
            Part::Onset => &world.onset[tokens[i]],
            Part::Steady => &world.steady[tokens[i]],
        };
        x.push(noisy(canonical, spec.noise, &mut rng));
        let class = target_class(&tokens, i, part == Part::Silence);
        target.push(noisy(&world.targets[class], spec.target_noise, &mut rng));
    }

    let t = owner.len();
    let s = rng.random_range(spec.stretch_min..=spec.stretch_max);
    let td = stretched_len(t, s);
    let substituted: Vec<bool> = tokens
        .iter()
        .map(|_| rng.random::<f64>() < spec.substitution_prob)
        .collect();
    let mut xd = Vec::with_capacity(td);
    let mut target_d = Vec::with_capacity(td);
    for j in 0..td {
        let src = stretch_map(t, td, j);
        let (i, part) = owner[src];
        let mut frame = x[src].clone();
        if substituted[i] && part != Part::Silence {
            for (v, d) in frame.iter_mut().zip(&world.shift[tokens[i]]) {
                *v += d;
            }
        }
        xd.push(noisy(&frame, spec.dys_noise, &mut rng));
        target_d.push(target[src].clone());
    }

    let make = |variant: Variant, x: Vec<Vec<f64>>, target: Vec<Vec<f64>>| -> Result<Utterance> {
        let tag = match variant {
            Variant::Normal => "normal",
            Variant::Dys => "dys",
        };
        Ok(Utterance {
            id: format!("utt{pair:05}-{tag}"),
            pair,
            variant,
            split,
            x: Tensor::from_rows(&x)?,
            tokens: tokens.clone(),
            target: Tensor::from_rows(&target)?,
            codes: Vec::new(),
        })
    };
    Ok([make(Variant::Normal, x, target)?, make(Variant::Dys, xd, target_d)?])
}

/// Generate both variants of every utterance, fit the codebook on the
/// normal training targets and quantize every target track.
pub fn gen_corpus(spec: &CorpusSpec, quantizer: &QuantizerConfig, hop: f64, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = World::new(spec, &mut rng);
    let total = spec.train_utterances + spec.test_utterances;
    let mut utterances = Vec::with_capacity(2 * total);
    for pair in 0..total {
        let split = if pair < spec.train_utterances { Split::Train } else { Split::Test };
        utterances.extend(make_pair(spec, &world, seed, pair, split)?);
    }

    let fit_rows: Vec<Vec<f64>> = utterances
        .iter()
        .filter(|u| u.variant == Variant::Normal && u.split == Split::Train)
        .flat_map(|u| (0..u.frames()).map(|i| u.target.row(i).to_vec()).collect::<Vec<_>>())
        .collect();
    if fit_rows.is_empty() {
        return Err(Error::Config("corpus has no normal training frames".into()));
    }
    let codebook = fit_codebook(&Tensor::from_rows(&fit_rows)?, quantizer, hop, seed)?;
    for u in utterances.iter_mut().filter(|u| u.variant == Variant::Normal) {
        u.codes = codebook.quantize_rows(&u.target)?;
    }
    // dysarthric tracks reuse the codes of the normal frames they stretch
    for pair in 0..total {
        let (normal, dys) = utterances[2 * pair..2 * pair + 2].split_at_mut(1);
        let (t, td) = (normal[0].frames(), dys[0].frames());
        dys[0].codes = (0..td).map(|j| normal[0].codes[stretch_map(t, td, j)]).collect();
    }
    Ok(Corpus {
        spec: spec.clone(),
        seed,
        codebook,
        utterances,
    })
}

const MANIFEST: &str = "manifest.json";
const CODEBOOK: &str = "codebook.bin";

fn to_record(u: &Utterance) -> Result<ParamSet> {
    let as_f64 = |v: &[usize]| Tensor::vector(v.iter().map(|&c| c as f64).collect());
    let mut set = ParamSet::new();
    set.insert("x", u.x.clone())?;
    set.insert("tokens", as_f64(&u.tokens))?;
    set.insert("target", u.target.clone())?;
    set.insert("codes", as_f64(&u.codes))?;
    Ok(set)
}

fn from_record(set: &ParamSet, entry: &ManifestEntry, path: &Path) -> Result<Utterance> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let get = |name: &str| set.by_name(name).ok_or_else(|| bad(format!("missing tensor {name}")));
    let ids = |name: &str| -> Result<Vec<usize>> {
        get(name)?
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(bad(format!("{name} holds non-integer {v}")))
                }
            })
            .collect()
    };
    let u = Utterance {
        id: entry.id.clone(),
        pair: entry.pair,
        variant: entry.variant,
        split: entry.split,
        x: get("x")?.clone(),
        tokens: ids("tokens")?,
        target: get("target")?.clone(),
        codes: ids("codes")?,
    };
    if u.frames() != entry.frames || u.tokens.len() != entry.labels || u.codes.len() != u.frames() {
        return Err(bad("record disagrees with the manifest".into()));
    }
    Ok(u)
}

impl Corpus {
    pub fn iter(&self, variant: Variant, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances
            .iter()
            .filter(move |u| u.variant == variant && u.split == split)
    }

    /// `(normal, dys)` of pair `pair`.
    pub fn pair(&self, pair: usize) -> Result<(&Utterance, &Utterance)> {
        match self.utterances.get(2 * pair..2 * pair + 2) {
            Some([n, d]) => Ok((n, d)),
            _ => Err(Error::Index {
                what: "utterance pair",
                index: pair,
                len: self.utterances.len() / 2,
            }),
        }
    }

    pub fn pairs(&self, split: Split) -> Vec<usize> {
        self.iter(Variant::Normal, split).map(|u| u.pair).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            seed: self.seed,
            spec: self.spec.clone(),
            codes: self.codebook.codes(),
            utterances: self
                .utterances
                .iter()
                .map(|u| ManifestEntry {
                    id: u.id.clone(),
                    pair: u.pair,
                    variant: u.variant,
                    split: u.split,
                    frames: u.frames(),
                    labels: u.tokens.len(),
                    file: format!("utts/{}.bin", u.id),
                })
                .collect(),
        }
    }

    /// Write `manifest.json`, `codebook.bin` and one record per utterance.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("utts"))?;
        let manifest = self.manifest();
        for (u, entry) in self.utterances.iter().zip(&manifest.utterances) {
            to_record(u)?.save(&dir.join(&entry.file))?;
        }
        let mut cb = ParamSet::new();
        self.codebook.write_into(&mut cb)?;
        cb.save(&dir.join(CODEBOOK))?;
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(dir.join(MANIFEST), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
        let codebook = Codebook::read_from(&ParamSet::load(&dir.join(CODEBOOK))?)?;
        let mut utterances = Vec::with_capacity(manifest.utterances.len());
        for entry in &manifest.utterances {
            let path: PathBuf = dir.join(&entry.file);
            utterances.push(from_record(&ParamSet::load(&path)?, entry, &path)?);
        }
        let corpus = Self {
            spec: manifest.spec,
            seed: manifest.seed,
            codebook,
            utterances,
        };
        for (i, pair) in corpus.utterances.chunks(2).enumerate() {
            let ok = matches!(pair, [n, d] if n.variant == Variant::Normal && d.variant == Variant::Dys
                && n.pair == i && d.pair == i && n.tokens == d.tokens);
            if !ok {
                return Err(Error::Format {
                    path: dir.join(MANIFEST),
                    detail: format!("utterances are not in normal/dys pairs at pair {i}"),
                });
            }
        }
        Ok(corpus)
    }
}

/// Tokens of an utterance never include the blank.
pub fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&y| y == BLANK || y >= vocab) {
        Some(&y) => Err(Error::Index {
            what: "token",
            index: y,
            len: vocab,
        }),
        None => Ok(()),
    }
}
