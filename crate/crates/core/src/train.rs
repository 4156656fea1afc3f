//! Multitask loss combination, Adam with staged unfreezing, the paired
//! 100-run split protocol, and the variation sweeps.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{self, AveragedSignals, Dataset};
use crate::decoder::{self, DecoderConfig, SideInputStats};
use crate::encoder::{self, Direction, EncoderConfig, EncoderCtx, Variant, Vocabulary};
use crate::signals::Signal;
use crate::tape::{NodeId, ParameterSet, Tape, TapeError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("batch contains no content tokens")]
    NoContentTokens,
    #[error("non-finite gradient for parameter {0}; aborting run")]
    NonFiniteGradient(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid variation: {0}")]
    InvalidVariation(String),
    #[error("invalid optimizer hyperparameters: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Decoder(#[from] decoder::DecoderError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Variations
// ---------------------------------------------------------------------------

/// The subset of signals entering the loss, plus the signal under evaluation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrainingVariation {
    pub included: Vec<Signal>,
    pub target: Signal,
}

impl TrainingVariation {
    pub fn new(mut included: Vec<Signal>, target: Signal) -> Result<Self> {
        included.sort();
        included.dedup();
        if included.is_empty() {
            return Err(TrainError::InvalidVariation("empty signal set".into()));
        }
        if !included.contains(&target) {
            return Err(TrainError::InvalidVariation(format!("target {target} not in included set")));
        }
        Ok(TrainingVariation { included, target })
    }

    pub fn singleton(signal: Signal) -> Self {
        TrainingVariation { included: vec![signal], target: signal }
    }

    /// Stable directory-safe label for the included set.
    pub fn label(&self) -> String {
        self.included
            .iter()
            .map(|s| s.name())
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// All 63 non-empty subsets of the six ERP components, canonically ordered
/// by subset size then composition. Target defaults to the first component.
pub fn sweep_erp_combinations() -> Vec<TrainingVariation> {
    let mut subsets: Vec<Vec<Signal>> = (1u32..64)
        .map(|mask| {
            Signal::ERP
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &s)| s)
                .collect()
        })
        .collect();
    subsets.sort_by_key(|s: &Vec<Signal>| (s.len(), s.clone()));
    subsets
        .into_iter()
        .map(|set| {
            let target = set[0];
            TrainingVariation { included: set, target }
        })
        .collect()
}

/// Behavioral-augmentation sweep for one target ERP: the target alone, the
/// best ERP combination, self-paced reading, all four eye-tracking measures,
/// and the combined forms.
pub fn sweep_behavioral_augmentations(target: Signal, best_erp_combo: &[Signal]) -> Result<Vec<TrainingVariation>> {
    let mut base = vec![target];
    base.extend(best_erp_combo.iter().copied().filter(|&s| s != target));
    let mut out = vec![
        TrainingVariation::singleton(target),
        TrainingVariation::new(base.clone(), target)?,
        TrainingVariation::new(vec![target, Signal::Read], target)?,
        TrainingVariation::new(
            std::iter::once(target).chain(Signal::EYE.iter().copied()).collect(),
            target,
        )?,
        TrainingVariation::new(base.iter().copied().chain([Signal::Read]).collect(), target)?,
        TrainingVariation::new(base.iter().copied().chain(Signal::EYE).collect(), target)?,
    ];
    out.dedup();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoder learning rate.
    pub learning_rate: f64,
    /// Smaller rate for unfrozen (pretrained) encoder parameters.
    pub encoder_learning_rate: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            beta1: 0.95,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate: 1e-3,
            encoder_learning_rate: 1e-4,
        }
    }
}

impl OptimizerHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::InvalidHyper(format!(
                "betas must lie in (0,1): {}, {}",
                self.beta1, self.beta2
            )));
        }
        if self.learning_rate <= 0.0 || self.encoder_learning_rate <= 0.0 || self.epsilon <= 0.0 {
            return Err(TrainError::InvalidHyper("rates and epsilon must be positive".into()));
        }
        Ok(())
    }

    fn rate_for(&self, name: &str) -> f64 {
        if name.starts_with("enc.") {
            self.encoder_learning_rate
        } else {
            self.learning_rate
        }
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<S: Scalar> {
    moment1: BTreeMap<String, Tensor<S>>,
    moment2: BTreeMap<String, Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState { moment1: BTreeMap::new(), moment2: BTreeMap::new(), step: 0 }
    }
}

/// One Adam update with bias correction. Only parameters present in `grads`
/// (the trainable set) are touched; frozen parameters stay bit-identical.
pub fn adam_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &BTreeMap<String, Tensor<S>>,
    hyper: &OptimizerHyper,
    state: &mut AdamState<S>,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for (name, grad) in grads {
        if !grad.is_all_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
        let lr = S::from_f64(hyper.rate_for(name));
        let b1 = S::from_f64(hyper.beta1);
        let b2 = S::from_f64(hyper.beta2);
        let one_m_b1 = S::from_f64(1.0 - hyper.beta1);
        let one_m_b2 = S::from_f64(1.0 - hyper.beta2);
        let eps = S::from_f64(hyper.epsilon);
        let ibc1 = S::from_f64(1.0 / bc1);
        let ibc2 = S::from_f64(1.0 / bc2);

        let m = state
            .moment1
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        let v = state
            .moment2
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape().to_vec()));
        let p = params
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
        for ((pv, mv), (vv, gv)) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut().iter_mut().zip(grad.data()))
        {
            *mv = b1 * *mv + one_m_b1 * *gv;
            *vv = b2 * *vv + one_m_b2 * *gv * *gv;
            let mhat = *mv * ibc1;
            let vhat = *vv * ibc2;
            *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainableSet {
    DecoderOnly,
    DecoderPlusFinalEncoderLayer,
    All,
}

impl TrainableSet {
    /// Whether a named parameter is trainable under this set. For the
    /// embeddings-only variant the "final encoder layer" is the embedding
    /// matrix itself.
    pub fn allows(self, name: &str, config: &EncoderConfig) -> bool {
        match self {
            TrainableSet::All => true,
            TrainableSet::DecoderOnly => name.starts_with("dec."),
            TrainableSet::DecoderPlusFinalEncoderLayer => {
                if name.starts_with("dec.") {
                    return true;
                }
                match config.variant {
                    Variant::EmbeddingsOnly => name == "enc.emb",
                    _ => {
                        let last = config.layers - 1;
                        name.starts_with(&format!("enc.fwd.l{last}."))
                            || name.starts_with(&format!("enc.bwd.l{last}."))
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub epochs: Range<usize>,
    pub trainable: TrainableSet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub stages: Vec<Stage>,
}

impl Schedule {
    /// 20 epochs decoder-only, then 15 with the final encoder layer unfrozen.
    pub fn default_two_stage() -> Self {
        Schedule {
            stages: vec![
                Stage { epochs: 0..20, trainable: TrainableSet::DecoderOnly },
                Stage { epochs: 20..35, trainable: TrainableSet::DecoderPlusFinalEncoderLayer },
            ],
        }
    }

    /// 60-epoch analysis schedule: 20 decoder-only, 20 with the final
    /// encoder layer, 20 with everything unfrozen.
    pub fn extended_three_stage() -> Self {
        Schedule {
            stages: vec![
                Stage { epochs: 0..20, trainable: TrainableSet::DecoderOnly },
                Stage { epochs: 20..40, trainable: TrainableSet::DecoderPlusFinalEncoderLayer },
                Stage { epochs: 40..60, trainable: TrainableSet::All },
            ],
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default_two_stage()),
            "extended" => Some(Self::extended_three_stage()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(TrainError::InvalidSchedule("no stages".into()));
        }
        let mut next = 0;
        for stage in &self.stages {
            if stage.epochs.start != next || stage.epochs.end <= stage.epochs.start {
                return Err(TrainError::InvalidSchedule(format!(
                    "stages must be contiguous from 0; got {:?} at {next}",
                    stage.epochs
                )));
            }
            next = stage.epochs.end;
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.last().map_or(0, |s| s.epochs.end)
    }

    pub fn stage_at(&self, epoch: usize) -> &Stage {
        self.stages
            .iter()
            .find(|s| s.epochs.contains(&epoch))
            .expect("epoch outside schedule")
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Per-sentence inputs to the loss: prediction node (T x signals), target
/// values and inclusion mask of the same shape, and the content-token count.
pub struct SentenceLossInput {
    pub predictions: NodeId,
    pub targets: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub content_tokens: usize,
}

/// The multitask loss: squared errors summed over content tokens and the
/// variation's signals, normalized by the batch's total content-token count.
pub fn build_loss<S: Scalar>(tape: &mut Tape<S>, sentences: &[SentenceLossInput]) -> Result<NodeId> {
    let total: usize = sentences.iter().map(|s| s.content_tokens).sum();
    if total == 0 {
        return Err(TrainError::NoContentTokens);
    }
    let mut acc: Option<NodeId> = None;
    for sent in sentences {
        let target = tape.input(sent.targets.cast::<S>())?;
        let mask = tape.input(sent.mask.cast::<S>())?;
        let sq = tape.squared_error(sent.predictions, target)?;
        let masked = tape.mul(sq, mask)?;
        let summed = tape.sum(masked)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, summed)?,
            None => summed,
        });
    }
    let acc = acc.expect("non-empty batch");
    Ok(tape.scale(acc, S::from_f64(1.0 / total as f64))?)
}

// ---------------------------------------------------------------------------
// Run protocol
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: BTreeMap<Signal, f64>,
    pub val_mse: BTreeMap<Signal, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunResult {
    pub run_index: usize,
    pub variation: TrainingVariation,
    pub split_hash: String,
    pub epochs: Vec<EpochMetrics>,
    /// POVE on the held-out sentences at the final epoch.
    pub final_pove: BTreeMap<Signal, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainOptions {
    pub master_seed: u64,
    pub run_index: usize,
    pub schedule: Schedule,
    pub hyper: OptimizerHyper,
    /// Whole sentences per batch.
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            master_seed: 0,
            run_index: 0,
            schedule: Schedule::default_two_stage(),
            hyper: OptimizerHyper::default(),
            batch_size: 32,
        }
    }
}

/// A sentence prepared for training: token ids, side inputs, per-signal
/// targets from the averaged pipeline, and the content mask.
struct PreparedSentence {
    id: usize,
    token_ids: Vec<usize>,
    word_lengths: Vec<f64>,
    log_probs: Vec<f64>,
    /// (T, signals) targets, zero where missing.
    targets: Tensor<f64>,
    /// (T, signals) inclusion mask: content token and target present.
    mask: Tensor<f64>,
    content_tokens: usize,
}

fn prepare_sentences(
    dataset: &Dataset,
    vocab: &Vocabulary,
    averaged: &AveragedSignals,
    signals: &[Signal],
    encoder_cfg: &EncoderConfig,
    encoder_params: &ParameterSet<f32>,
) -> Result<Vec<PreparedSentence>> {
    let mut prepared = Vec::with_capacity(dataset.sentences.len());
    for sent in &dataset.sentences {
        let texts: Vec<String> = sent.tokens.iter().map(|t| t.text.clone()).collect();
        let token_ids = vocab.ids(&texts);
        let log_probs =
            encoder::word_log_probs(encoder_params, encoder_cfg, &token_ids, vocab.boundary_id())?;
        let t_len = sent.tokens.len();
        let mut targets = Tensor::zeros(vec![t_len, signals.len()]);
        let mut mask = Tensor::zeros(vec![t_len, signals.len()]);
        let mut content_tokens = 0usize;
        for (w, token) in sent.tokens.iter().enumerate() {
            if !token.is_content() {
                continue;
            }
            content_tokens += 1;
            for (s_idx, &sig) in signals.iter().enumerate() {
                if let Some(v) = averaged.get(sent.id, w, sig) {
                    targets.data_mut()[w * signals.len() + s_idx] = v;
                    mask.data_mut()[w * signals.len() + s_idx] = 1.0;
                }
            }
        }
        prepared.push(PreparedSentence {
            id: sent.id,
            token_ids,
            word_lengths: sent.tokens.iter().map(|t| t.word_length() as f64).collect(),
            log_probs,
            targets,
            mask,
            content_tokens,
        });
    }
    Ok(prepared)
}

fn eval_mse(
    sentences: &[&PreparedSentence],
    params: &ParameterSet<f32>,
    encoder_cfg: &EncoderConfig,
    decoder_cfg: &DecoderConfig,
    side_stats: &SideInputStats,
) -> Result<BTreeMap<Signal, f64>> {
    let mut sq_sum: BTreeMap<Signal, f64> = BTreeMap::new();
    let mut counts: BTreeMap<Signal, usize> = BTreeMap::new();
    let mut rng = data::derive_rng(0, "eval");
    for sent in sentences {
        let mut tape: Tape<f32> = Tape::new();
        let mut ctx = EncoderCtx::eval(&mut rng);
        let context = encoder::context_embeddings(&mut tape, params, encoder_cfg, &sent.token_ids, &mut ctx)?;
        let preds = decoder::predict_all(
            &mut tape,
            params,
            decoder_cfg,
            context,
            &sent.word_lengths,
            &sent.log_probs,
            side_stats,
        )?;
        let pred_vals = tape.value(preds);
        let n_sig = decoder_cfg.signals.len();
        for w in 0..sent.token_ids.len() {
            for (s_idx, &sig) in decoder_cfg.signals.iter().enumerate() {
                if sent.mask.data()[w * n_sig + s_idx] > 0.0 {
                    let err = pred_vals.at(w, s_idx) as f64 - sent.targets.data()[w * n_sig + s_idx];
                    *sq_sum.entry(sig).or_default() += err * err;
                    *counts.entry(sig).or_default() += 1;
                }
            }
        }
    }
    Ok(sq_sum
        .into_iter()
        .map(|(sig, s)| (sig, s / counts[&sig].max(1) as f64))
        .collect())
}

/// One training run: deterministic given (master seed, run index, variation).
/// The split is shared across variations for a fixed run index; decoder
/// initialization varies per run.
pub fn train_run(
    dataset: &Dataset,
    vocab: &Vocabulary,
    encoder_cfg: &EncoderConfig,
    encoder_params: &ParameterSet<f32>,
    variation: &TrainingVariation,
    opts: &TrainOptions,
) -> Result<(RunResult, ParameterSet<f32>)> {
    train_run_observed(dataset, vocab, encoder_cfg, encoder_params, variation, opts, |_, _| {})
}

/// `train_run` with an observer invoked after every epoch's updates, for
/// inspecting parameter evolution (e.g. verifying frozen stages).
pub fn train_run_observed(
    dataset: &Dataset,
    vocab: &Vocabulary,
    encoder_cfg: &EncoderConfig,
    encoder_params: &ParameterSet<f32>,
    variation: &TrainingVariation,
    opts: &TrainOptions,
    mut observe: impl FnMut(usize, &ParameterSet<f32>),
) -> Result<(RunResult, ParameterSet<f32>)> {
    opts.hyper.validate()?;
    opts.schedule.validate()?;
    let split = data::make_split(opts.master_seed, opts.run_index, &dataset.sentence_ids())?;
    let (averaged, _) = data::standardize_and_average(dataset, &split)?;

    let prepared = prepare_sentences(dataset, vocab, &averaged, &variation.included, encoder_cfg, encoder_params)?;

    let train_sents: Vec<&PreparedSentence> = prepared
        .iter()
        .filter(|s| !split.is_test(s.id) && s.content_tokens > 0)
        .collect();
    let val_sents: Vec<&PreparedSentence> = prepared
        .iter()
        .filter(|s| split.is_test(s.id) && s.content_tokens > 0)
        .collect();
    if train_sents.is_empty() {
        return Err(TrainError::NoContentTokens);
    }

    // side-input statistics from the training portion
    let mut lengths = Vec::new();
    let mut logps = Vec::new();
    for s in &train_sents {
        for (w, &len) in s.word_lengths.iter().enumerate() {
            let _ = w;
            lengths.push(len);
        }
        logps.extend_from_slice(&s.log_probs);
    }
    let side_stats = SideInputStats::fit(&lengths, &logps);

    let decoder_cfg = DecoderConfig::new(encoder_cfg.context_width(), variation.included.clone());
    decoder_cfg.validate()?;
    let mut rng = data::derive_rng(
        opts.master_seed,
        &format!("train:{}:{}:{}", opts.run_index, variation.label(), variation.target),
    );
    let mut params = encoder_params.clone();
    params.merge(decoder::init_decoder_params::<f32>(&decoder_cfg, &mut rng));

    let mut adam: AdamState<f32> = AdamState::new();
    let mut epochs_out = Vec::with_capacity(opts.schedule.total_epochs());
    let mut order: Vec<usize> = (0..train_sents.len()).collect();

    for epoch in 0..opts.schedule.total_epochs() {
        let stage = opts.schedule.stage_at(epoch).clone();
        params.set_trainable(|name| stage.trainable.allows(name, encoder_cfg));
        let encoder_frozen = stage.trainable == TrainableSet::DecoderOnly;

        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let mut tape: Tape<f32> = Tape::new();
            let mut inputs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sent = train_sents[i];
                let context = if encoder_frozen {
                    // dropout still regularizes, but no gradient flows into
                    // the encoder; compute it off-tape and feed the value
                    let mut side_tape: Tape<f32> = Tape::new();
                    let mut ctx = EncoderCtx::train(&mut rng);
                    let c = encoder::context_embeddings(&mut side_tape, &params, encoder_cfg, &sent.token_ids, &mut ctx)?;
                    tape.input(side_tape.value(c).clone())?
                } else {
                    let mut ctx = EncoderCtx::train(&mut rng);
                    encoder::context_embeddings(&mut tape, &params, encoder_cfg, &sent.token_ids, &mut ctx)?
                };
                let preds = decoder::predict_all(
                    &mut tape,
                    &params,
                    &decoder_cfg,
                    context,
                    &sent.word_lengths,
                    &sent.log_probs,
                    &side_stats,
                )?;
                inputs.push(SentenceLossInput {
                    predictions: preds,
                    targets: sent.targets.clone(),
                    mask: sent.mask.clone(),
                    content_tokens: sent.content_tokens,
                });
            }
            let loss = build_loss(&mut tape, &inputs)?;
            let grads = tape.param_grads(loss, None, &params)?;
            adam_step(&mut params, &grads, &opts.hyper, &mut adam)?;
        }

        observe(epoch, &params);
        let train_mse = eval_mse(&train_sents, &params, encoder_cfg, &decoder_cfg, &side_stats)?;
        let val_mse = eval_mse(&val_sents, &params, encoder_cfg, &decoder_cfg, &side_stats)?;
        epochs_out.push(EpochMetrics { epoch, train_mse, val_mse });
    }

    // final POVE per signal on the held-out sentences
    let mut final_pove = BTreeMap::new();
    let last = epochs_out.last().expect("schedule has epochs");
    for &sig in &variation.included {
        let mut vals = Vec::new();
        for s in &val_sents {
            let n_sig = variation.included.len();
            let s_idx = variation.included.iter().position(|&x| x == sig).unwrap();
            for w in 0..s.token_ids.len() {
                if s.mask.data()[w * n_sig + s_idx] > 0.0 {
                    vals.push(s.targets.data()[w * n_sig + s_idx]);
                }
            }
        }
        if vals.len() < 2 {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        if let Some(&mse) = last.val_mse.get(&sig) {
            final_pove.insert(sig, crate::stats::pove(mse, var)?);
        }
    }

    Ok((
        RunResult {
            run_index: opts.run_index,
            variation: variation.clone(),
            split_hash: split.hash(),
            epochs: epochs_out,
            final_pove,
        },
        params,
    ))
}

// ---------------------------------------------------------------------------
// Language-model pretraining
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LmHistory {
    /// Mean training NLL per epoch, forward and backward combined.
    pub nll: Vec<f64>,
}

/// Train both encoder directions (next-word and previous-word objectives) on
/// a corpus; returns parameters and the NLL history.
pub fn lm_train(
    corpus: &[Vec<usize>],
    vocab: &Vocabulary,
    config: &EncoderConfig,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    hyper: &OptimizerHyper,
) -> Result<(ParameterSet<f32>, LmHistory)> {
    if corpus.is_empty() {
        return Err(TrainError::Encoder(encoder::EncoderError::EmptyBatch));
    }
    let mut rng = data::derive_rng(seed, "lm-train");
    let mut params: ParameterSet<f32> = encoder::init_encoder_params(config, vocab.len(), &mut rng);
    params.set_trainable(|_| true);
    let mut adam: AdamState<f32> = AdamState::new();
    let mut history = LmHistory { nll: Vec::with_capacity(epochs) };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    // LM pretraining uses the decoder-stage learning rate
    let lm_hyper = OptimizerHyper { encoder_learning_rate: hyper.learning_rate, ..hyper.clone() };

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let mut tape: Tape<f32> = Tape::new();
            let mut ctx = EncoderCtx::train(&mut rng);
            let fwd = encoder::lm_loss(&mut tape, &params, config, &batch, vocab.boundary_id(), Direction::Forward, &mut ctx)?;
            let bwd = encoder::lm_loss(&mut tape, &params, config, &batch, vocab.boundary_id(), Direction::Backward, &mut ctx)?;
            let sum = tape.add(fwd, bwd)?;
            let loss = tape.scale(sum, 0.5)?;
            epoch_nll += tape.value(loss).item() as f64;
            batches += 1;
            let grads = tape.param_grads(loss, None, &params)?;
            adam_step(&mut params, &grads, &lm_hyper, &mut adam)?;
        }
        history.nll.push(epoch_nll / batches.max(1) as f64);
    }
    Ok((params, history))
}

/// Mean NLL of a corpus in eval mode (both directions averaged).
pub fn lm_eval_nll(
    corpus: &[Vec<usize>],
    vocab: &Vocabulary,
    config: &EncoderConfig,
    params: &ParameterSet<f32>,
) -> Result<f64> {
    let mut rng = data::derive_rng(0, "lm-eval");
    let mut tape: Tape<f32> = Tape::new();
    let mut ctx = EncoderCtx::eval(&mut rng);
    let fwd = encoder::lm_loss(&mut tape, params, config, corpus, vocab.boundary_id(), Direction::Forward, &mut ctx)?;
    let bwd = encoder::lm_loss(&mut tape, params, config, corpus, vocab.boundary_id(), Direction::Backward, &mut ctx)?;
    Ok((tape.value(fwd).item() as f64 + tape.value(bwd).item() as f64) / 2.0)
}
