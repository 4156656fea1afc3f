//! Dataset ingestion, transforms, content-word filtering, two-stage
//! standardization with participant averaging, split generation, and the
//! synthetic-data generator.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::signals::{Signal, SignalKind};

pub const TABLE_FORMAT_TAG: &str = "wordsig-table/1";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate key (sentence {sentence}, word {word}, participant {participant})")]
    DuplicateKey { sentence: usize, word: usize, participant: String },
    #[error("unknown signal column: {0}")]
    UnknownSignal(String),
    #[error("missing part-of-speech tag for token {0:?}")]
    MissingPosTag(String),
    #[error("non-positive values for log transform: {0:?}")]
    NonPositive(Vec<String>),
    #[error("need at least 10 sentences to split, got {0}")]
    TooFewSentences(usize),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("unsupported table format {0:?} (expected {TABLE_FORMAT_TAG:?})")]
    BadFormat(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Part-of-speech classes; the content-word rule covers exactly seven of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Adj,
    Adv,
    Aux,
    Noun,
    Pron,
    Propn,
    Verb,
    Det,
    Adp,
    Conj,
    Num,
    Part,
    Intj,
    Punct,
    Other,
}

impl PosTag {
    pub fn name(self) -> &'static str {
        match self {
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
            PosTag::Aux => "AUX",
            PosTag::Noun => "NOUN",
            PosTag::Pron => "PRON",
            PosTag::Propn => "PROPN",
            PosTag::Verb => "VERB",
            PosTag::Det => "DET",
            PosTag::Adp => "ADP",
            PosTag::Conj => "CONJ",
            PosTag::Num => "NUM",
            PosTag::Part => "PART",
            PosTag::Intj => "INTJ",
            PosTag::Punct => "PUNCT",
            PosTag::Other => "OTHER",
        }
    }
}

impl FromStr for PosTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let up = s.to_ascii_uppercase();
        let tag = match up.as_str() {
            "ADJ" => PosTag::Adj,
            "ADV" => PosTag::Adv,
            "AUX" => PosTag::Aux,
            "NOUN" => PosTag::Noun,
            "PRON" => PosTag::Pron,
            "PROPN" => PosTag::Propn,
            "VERB" => PosTag::Verb,
            "DET" => PosTag::Det,
            "ADP" => PosTag::Adp,
            "CONJ" | "CCONJ" | "SCONJ" => PosTag::Conj,
            "NUM" => PosTag::Num,
            "PART" => PosTag::Part,
            "INTJ" => PosTag::Intj,
            "PUNCT" => PosTag::Punct,
            "OTHER" | "X" | "SYM" => PosTag::Other,
            _ => return Err(format!("unknown POS tag {s:?}")),
        };
        Ok(tag)
    }
}

/// Content words are adjectives, adverbs, auxiliary verbs, nouns, pronouns,
/// proper nouns, and verbs (to-be verbs count as verbs). Everything else is a
/// function word.
pub fn classify_content(tag: PosTag) -> bool {
    matches!(
        tag,
        PosTag::Adj | PosTag::Adv | PosTag::Aux | PosTag::Noun | PosTag::Pron | PosTag::Propn | PosTag::Verb
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub text: String,
    pub pos: PosTag,
    /// Filled from the forward LM head before task training.
    pub log_prob: Option<f64>,
}

impl Token {
    pub fn new(text: &str, pos: PosTag) -> Self {
        Token { text: text.to_string(), pos, log_prob: None }
    }

    pub fn is_content(&self) -> bool {
        classify_content(self.pos)
    }

    pub fn word_length(&self) -> usize {
        self.text.chars().count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub id: usize,
    pub tokens: Vec<Token>,
}

/// One measurement: (sentence, word, participant, signal) -> value.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalFrame {
    pub sentence: usize,
    pub word: usize,
    pub participant: usize,
    pub signal: Signal,
    pub value: f64,
}

/// Immutable word-level dataset: sentences plus per-participant signal values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub participants: Vec<String>,
    pub signals: Vec<Signal>,
    frames: BTreeMap<(usize, usize, usize, Signal), f64>,
}

impl Dataset {
    pub fn new(sentences: Vec<Sentence>, participants: Vec<String>, signals: Vec<Signal>) -> Self {
        Dataset { sentences, participants, signals, frames: BTreeMap::new() }
    }

    pub fn insert_frame(&mut self, frame: SignalFrame) -> Result<()> {
        let key = (frame.sentence, frame.word, frame.participant, frame.signal);
        if self.frames.insert(key, frame.value).is_some() {
            return Err(DataError::DuplicateKey {
                sentence: frame.sentence,
                word: frame.word,
                participant: self.participants[frame.participant].clone(),
            });
        }
        Ok(())
    }

    pub fn value(&self, sentence: usize, word: usize, participant: usize, signal: Signal) -> Option<f64> {
        self.frames.get(&(sentence, word, participant, signal)).copied()
    }

    pub fn frames(&self) -> impl Iterator<Item = SignalFrame> + '_ {
        self.frames.iter().map(|(&(s, w, p, sig), &v)| SignalFrame {
            sentence: s,
            word: w,
            participant: p,
            signal: sig,
            value: v,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn sentence_ids(&self) -> Vec<usize> {
        self.sentences.iter().map(|s| s.id).collect()
    }

    pub fn sentence(&self, id: usize) -> Option<&Sentence> {
        self.sentences.iter().find(|s| s.id == id)
    }
}

/// Natural log, elementwise; durations must be strictly positive. Applied
/// before any standardization.
pub fn log_transform(values: &[(String, f64)]) -> Result<Vec<f64>> {
    let offenders: Vec<String> = values
        .iter()
        .filter(|(_, v)| *v <= 0.0)
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    if !offenders.is_empty() {
        return Err(DataError::NonPositive(offenders));
    }
    Ok(values.iter().map(|(_, v)| v.ln()).collect())
}

/// Sign-preserving power transform used to normalize ERP value
/// distributions: sign(x)((|x|+1)^lambda - 1)/lambda, with the log limit at
/// lambda = 0.
pub fn modulus_transform(x: f64, lambda: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let a = x.abs() + 1.0;
    if lambda == 0.0 {
        sign * a.ln()
    } else {
        sign * (a.powf(lambda) - 1.0) / lambda
    }
}

/// Deterministic train/test partition of sentences for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub run_index: usize,
    pub master_seed: u64,
    pub test_sentences: BTreeSet<usize>,
    pub train_sentences: Vec<usize>,
}

impl SplitSpec {
    pub fn is_test(&self, sentence: usize) -> bool {
        self.test_sentences.contains(&sentence)
    }

    /// Stable digest of the test set; identical across all training
    /// variations for a fixed (master seed, run index).
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for id in &self.test_sentences {
            hasher.update(id.to_le_bytes());
        }
        crate::checkpoint::hex_string(&hasher.finalize())
    }
}

/// Seed bytes derived from a labeled context, so every consumer of
/// randomness draws from an independent, reproducible stream.
pub fn derive_seed(master_seed: u64, label: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.finalize().into()
}

pub fn derive_rng(master_seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(master_seed, label))
}

/// Pseudo-random 10% test selection (floor), a pure function of
/// (master seed, run index); the sentence order of the input is irrelevant.
pub fn make_split(master_seed: u64, run_index: usize, sentence_ids: &[usize]) -> Result<SplitSpec> {
    if sentence_ids.len() < 10 {
        return Err(DataError::TooFewSentences(sentence_ids.len()));
    }
    let mut ids: Vec<usize> = sentence_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = derive_rng(master_seed, &format!("split:{run_index}"));
    ids.shuffle(&mut rng);
    let n_test = ids.len() / 10;
    let test_sentences: BTreeSet<usize> = ids[..n_test].iter().copied().collect();
    let mut train_sentences: Vec<usize> = ids[n_test..].to_vec();
    train_sentences.sort_unstable();
    Ok(SplitSpec { run_index, master_seed, test_sentences, train_sentences })
}

/// Per-(participant, signal) training statistics plus the post-average stage.
#[derive(Clone, Debug, Default)]
pub struct StandardizationStats {
    /// (participant index, signal) -> (mean, std) on training data.
    pub participant: BTreeMap<(usize, Signal), (f64, f64)>,
    /// signal -> (mean, std) of the participant average on training data.
    pub post_average: BTreeMap<Signal, (f64, f64)>,
    /// Participants dropped for a signal (fewer than 2 training observations).
    pub excluded: Vec<(usize, Signal)>,
}

/// Participant-averaged, twice-standardized per-word series.
#[derive(Clone, Debug, Default)]
pub struct AveragedSignals {
    values: BTreeMap<(usize, usize, Signal), f64>,
}

impl AveragedSignals {
    pub fn get(&self, sentence: usize, word: usize, signal: Signal) -> Option<f64> {
        self.values.get(&(sentence, word, signal)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize, Signal), f64)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }
}

fn population_mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn guarded_std(std: f64, what: &str) -> f64 {
    if std > 0.0 {
        std
    } else {
        log::warn!("degenerate std for {what}; substituting 1");
        1.0
    }
}

/// The two-stage pipeline: per-participant z-scoring on training statistics,
/// missing-aware participant averaging, then a second z-scoring of the
/// average, again on training statistics. Test values are transformed with
/// training statistics at both stages. Duration signals are log-transformed
/// first.
pub fn standardize_and_average(
    dataset: &Dataset,
    split: &SplitSpec,
) -> Result<(AveragedSignals, StandardizationStats)> {
    let mut stats = StandardizationStats::default();
    let mut out = AveragedSignals::default();

    for &signal in &dataset.signals {
        let log_it = signal.kind() != SignalKind::Erp;
        // raw (possibly log-transformed) values per (sent, word, participant)
        let mut values: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        for frame in dataset.frames().filter(|f| f.signal == signal) {
            let v = if log_it {
                if frame.value <= 0.0 {
                    return Err(DataError::NonPositive(vec![format!(
                        "{signal} sentence {} word {} participant {} = {}",
                        frame.sentence, frame.word, dataset.participants[frame.participant], frame.value
                    )]));
                }
                frame.value.ln()
            } else {
                frame.value
            };
            values.insert((frame.sentence, frame.word, frame.participant), v);
        }

        // stage 1: per-participant training stats
        let mut included: BTreeSet<usize> = BTreeSet::new();
        for p in 0..dataset.participants.len() {
            let train: Vec<f64> = values
                .iter()
                .filter(|(&(s, _, vp), _)| vp == p && !split.is_test(s))
                .map(|(_, &v)| v)
                .collect();
            if train.len() < 2 {
                log::warn!(
                    "participant {} has {} training observations for {signal}; excluded",
                    dataset.participants[p],
                    train.len()
                );
                stats.excluded.push((p, signal));
                continue;
            }
            let (mean, std) = population_mean_std(&train);
            let std = guarded_std(std, &format!("participant {p} {signal}"));
            stats.participant.insert((p, signal), (mean, std));
            included.insert(p);
        }

        // z-score and average across participants, missing-aware
        let mut averaged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut word_keys: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(s, w, _) in values.keys() {
            word_keys.insert((s, w));
        }
        for &(s, w) in &word_keys {
            let mut acc = 0.0;
            let mut n = 0usize;
            for &p in &included {
                if let Some(&v) = values.get(&(s, w, p)) {
                    let (mean, std) = stats.participant[&(p, signal)];
                    acc += (v - mean) / std;
                    n += 1;
                }
            }
            if n > 0 {
                averaged.insert((s, w), acc / n as f64);
            }
        }

        // stage 2: standardize the average on training statistics
        let train_avg: Vec<f64> = averaged
            .iter()
            .filter(|(&(s, _), _)| !split.is_test(s))
            .map(|(_, &v)| v)
            .collect();
        if train_avg.is_empty() {
            continue;
        }
        let (mean2, std2) = population_mean_std(&train_avg);
        let std2 = guarded_std(std2, &format!("post-average {signal}"));
        stats.post_average.insert(signal, (mean2, std2));
        for ((s, w), v) in averaged {
            out.values.insert((s, w, signal), (v - mean2) / std2);
        }
    }
    Ok((out, stats))
}

// ---------------------------------------------------------------------------
// Synthetic data generation
// ---------------------------------------------------------------------------

/// One generated signal: its loading onto the latent pair feature and its
/// per-observation noise.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSignal {
    pub signal: Signal,
    /// Loading vector over the latent dimensions (the cross-signal sharing
    /// matrix row); signals sharing support share information.
    pub loading: Vec<f64>,
    pub noise_std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub vocab_size: usize,
    pub n_sentences: usize,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    pub n_participants: usize,
    pub latent_dim: usize,
    pub participant_offset_std: f64,
    /// Fraction of vocabulary words assigned content POS tags.
    pub content_fraction: f64,
    /// Fraction of values dropped to exercise missing-data handling.
    pub missing_rate: f64,
    pub signals: Vec<SyntheticSignal>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            vocab_size: 30,
            n_sentences: 120,
            sentence_len_min: 6,
            sentence_len_max: 10,
            n_participants: 8,
            latent_dim: 3,
            participant_offset_std: 0.5,
            content_fraction: 0.8,
            missing_rate: 0.0,
            signals: vec![
                SyntheticSignal { signal: Signal::N400, loading: vec![1.0, 0.0, 0.0], noise_std: 0.5 },
                SyntheticSignal { signal: Signal::P600, loading: vec![0.0, 1.0, 0.0], noise_std: 0.5 },
            ],
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.n_sentences == 0 || self.n_participants == 0 {
            return Err(DataError::InvalidConfig("vocab, sentences, participants must be positive".into()));
        }
        if self.sentence_len_min < 2 || self.sentence_len_max < self.sentence_len_min {
            return Err(DataError::InvalidConfig("sentence length range invalid (min >= 2)".into()));
        }
        if self.signals.is_empty() {
            return Err(DataError::InvalidConfig("no signals configured".into()));
        }
        for s in &self.signals {
            if s.loading.len() != self.latent_dim {
                return Err(DataError::InvalidConfig(format!(
                    "loading for {} has {} dims, expected {}",
                    s.signal,
                    s.loading.len(),
                    self.latent_dim
                )));
            }
            if s.noise_std < 0.0 {
                return Err(DataError::InvalidConfig("negative noise std".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.missing_rate) || !(0.0..=1.0).contains(&self.content_fraction) {
            return Err(DataError::InvalidConfig("rates must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// What the generator knows: the noiseless signal values and the implied
/// POVE ceiling per signal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    /// signal -> explained / (explained + noise) variance ratio over content
    /// words. An upper bound on validation POVE up to participant averaging.
    pub pove_ceiling: BTreeMap<Signal, f64>,
    /// signal -> variance of the noiseless component over content words.
    pub signal_variance: BTreeMap<Signal, f64>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate a corpus plus signal frames with known linear ground truth: each
/// signal value is a loading applied to a latent word-pair feature, plus a
/// participant offset and Gaussian noise. Duration signals are written as
/// exp(value) so the loader's log transform recovers the linear scale.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<(Dataset, GroundTruth)> {
    config.validate()?;
    let mut rng = derive_rng(seed, "synthetic");

    // vocabulary with latent vectors and POS tags
    let n_content = ((config.vocab_size as f64) * config.content_fraction).round() as usize;
    let words: Vec<(String, PosTag, Vec<f64>)> = (0..config.vocab_size)
        .map(|i| {
            let tag = if i < n_content { PosTag::Noun } else { PosTag::Det };
            let z: Vec<f64> = (0..config.latent_dim).map(|_| gauss(&mut rng)).collect();
            (format!("w{i:03}"), tag, z)
        })
        .collect();

    // sentences
    let mut sentences = Vec::with_capacity(config.n_sentences);
    for sid in 0..config.n_sentences {
        let len = rng.gen_range(config.sentence_len_min..=config.sentence_len_max);
        let tokens: Vec<Token> = (0..len)
            .map(|_| {
                let w = rng.gen_range(0..config.vocab_size);
                Token::new(&words[w].0, words[w].1)
            })
            .collect();
        sentences.push(Sentence { id: sid, tokens });
    }

    let participants: Vec<String> = (0..config.n_participants).map(|p| format!("p{p:02}")).collect();
    let signals: Vec<Signal> = config.signals.iter().map(|s| s.signal).collect();
    let mut dataset = Dataset::new(sentences, participants, signals);

    // participant offsets
    let offsets: Vec<Vec<f64>> = (0..config.n_participants)
        .map(|_| {
            config
                .signals
                .iter()
                .map(|_| gauss(&mut rng) * config.participant_offset_std)
                .collect()
        })
        .collect();

    // noiseless cores per (sentence, word, signal); content-word cores feed
    // the ceiling computation
    let mut content_cores: Vec<Vec<f64>> = vec![Vec::new(); config.signals.len()];
    let word_index: BTreeMap<&str, usize> = words.iter().enumerate().map(|(i, w)| (w.0.as_str(), i)).collect();

    let sentences_snapshot = dataset.sentences.clone();
    for sent in &sentences_snapshot {
        let mut prev_z: Vec<f64> = vec![0.0; config.latent_dim];
        for (w_idx, token) in sent.tokens.iter().enumerate() {
            let z = &words[word_index[token.text.as_str()]].2;
            let pair: Vec<f64> = prev_z.iter().zip(z).map(|(a, b)| 0.5 * (a + b)).collect();
            for (s_idx, sig) in config.signals.iter().enumerate() {
                let core: f64 = sig.loading.iter().zip(&pair).map(|(l, u)| l * u).sum();
                if token.is_content() {
                    content_cores[s_idx].push(core);
                }
                for p in 0..config.n_participants {
                    if config.missing_rate > 0.0 && rng.gen::<f64>() < config.missing_rate {
                        continue;
                    }
                    let noise = gauss(&mut rng) * sig.noise_std;
                    let mut value = core + offsets[p][s_idx] + noise;
                    if sig.signal.kind() != SignalKind::Erp {
                        value = value.exp(); // stored as a duration; loader logs it
                    }
                    dataset.insert_frame(SignalFrame {
                        sentence: sent.id,
                        word: w_idx,
                        participant: p,
                        signal: sig.signal,
                        value,
                    })?;
                }
            }
            prev_z = z.clone();
        }
    }

    let mut pove_ceiling = BTreeMap::new();
    let mut signal_variance = BTreeMap::new();
    for (s_idx, sig) in config.signals.iter().enumerate() {
        let cores = &content_cores[s_idx];
        let (_, std) = population_mean_std(cores);
        let var = std * std;
        let noise_var = sig.noise_std * sig.noise_std;
        let ceiling = if var + noise_var > 0.0 { var / (var + noise_var) } else { 1.0 };
        pove_ceiling.insert(sig.signal, ceiling);
        signal_variance.insert(sig.signal, var);
    }

    Ok((dataset, GroundTruth { pove_ceiling, signal_variance }))
}

// ---------------------------------------------------------------------------
// Table i/o
// ---------------------------------------------------------------------------

/// Write a dataset as a tab-separated word-level table: one row per
/// (sentence, word, participant), one column per signal, blanks for missing.
pub fn save_word_signals(path: &Path, dataset: &Dataset) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# {TABLE_FORMAT_TAG}")?;
    let mut header = vec!["sentence".to_string(), "word".into(), "text".into(), "pos".into(), "participant".into()];
    header.extend(dataset.signals.iter().map(|s| s.to_string()));
    writeln!(file, "{}", header.join("\t"))?;
    for sent in &dataset.sentences {
        for (w_idx, token) in sent.tokens.iter().enumerate() {
            for (p_idx, participant) in dataset.participants.iter().enumerate() {
                let mut row = vec![
                    sent.id.to_string(),
                    w_idx.to_string(),
                    token.text.clone(),
                    token.pos.name().to_string(),
                    participant.clone(),
                ];
                let mut any = false;
                for &sig in &dataset.signals {
                    match dataset.value(sent.id, w_idx, p_idx, sig) {
                        Some(v) => {
                            any = true;
                            row.push(format!("{v:.17e}"));
                        }
                        None => row.push(String::new()),
                    }
                }
                if any || p_idx == 0 {
                    // participant 0 rows always written so the token stream survives
                    writeln!(file, "{}", row.join("\t"))?;
                }
            }
        }
    }
    Ok(())
}

/// Load a word-level signal table; validates the format tag, key uniqueness,
/// and signal names, and reports parse errors with their line number.
pub fn load_word_signals(path: &Path) -> Result<Dataset> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();

    let (_, first) = match lines.next() {
        Some(l) => l,
        None => {
            log::warn!("empty dataset file {}", path.display());
            return Ok(Dataset::default());
        }
    };
    let tag = first.trim_start_matches('#').trim();
    if tag != TABLE_FORMAT_TAG {
        return Err(DataError::BadFormat(tag.to_string()));
    }
    let (_, header) = lines.next().ok_or(DataError::Parse { line: 2, msg: "missing header".into() })?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 5 || cols[..5] != ["sentence", "word", "text", "pos", "participant"] {
        return Err(DataError::Parse { line: 2, msg: format!("bad header {header:?}") });
    }
    let mut signals = Vec::new();
    for c in &cols[5..] {
        signals.push(Signal::from_str(c).map_err(|_| DataError::UnknownSignal(c.to_string()))?);
    }

    let mut sentences: BTreeMap<usize, BTreeMap<usize, Token>> = BTreeMap::new();
    let mut participants: Vec<String> = Vec::new();
    let mut rows: Vec<(usize, usize, usize, Vec<Option<f64>>)> = Vec::new();

    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("expected {} fields, got {}", cols.len(), fields.len()),
            });
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| DataError::Parse {
                line: line_no,
                msg: format!("bad {what} {s:?}"),
            })
        };
        let sent_id = parse_usize(fields[0], "sentence id")?;
        let word_idx = parse_usize(fields[1], "word index")?;
        let text = fields[2];
        let pos = PosTag::from_str(fields[3]).map_err(|e| {
            if fields[3].trim().is_empty() {
                DataError::MissingPosTag(text.to_string())
            } else {
                DataError::Parse { line: line_no, msg: e }
            }
        })?;
        let participant = fields[4].to_string();
        let p_idx = match participants.iter().position(|p| *p == participant) {
            Some(i) => i,
            None => {
                participants.push(participant);
                participants.len() - 1
            }
        };
        sentences
            .entry(sent_id)
            .or_default()
            .entry(word_idx)
            .or_insert_with(|| Token::new(text, pos));
        let mut vals = Vec::with_capacity(signals.len());
        for (f, _) in fields[5..].iter().zip(&signals) {
            if f.is_empty() {
                vals.push(None);
            } else {
                let v: f64 = f.parse().map_err(|_| DataError::Parse {
                    line: line_no,
                    msg: format!("bad value {f:?}"),
                })?;
                vals.push(Some(v));
            }
        }
        rows.push((sent_id, word_idx, p_idx, vals));
    }

    let sentence_vec: Vec<Sentence> = sentences
        .into_iter()
        .map(|(id, words)| Sentence { id, tokens: words.into_values().collect() })
        .collect();
    let mut dataset = Dataset::new(sentence_vec, participants, signals.clone());
    for (s, w, p, vals) in rows {
        for (i, v) in vals.into_iter().enumerate() {
            if let Some(value) = v {
                dataset.insert_frame(SignalFrame { sentence: s, word: w, participant: p, signal: signals[i], value })?;
            }
        }
    }
    log::info!(
        "loaded {}: {} sentences, {} participants, {} frames",
        path.display(),
        dataset.sentences.len(),
        dataset.participants.len(),
        dataset.frame_count()
    );
    Ok(dataset)
}
