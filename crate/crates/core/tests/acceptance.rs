//! Acceptance suite: one test per criterion, each printing a pass line on
//! success. Run with `cargo test --test acceptance -- --nocapture` to see
//! the per-criterion lines and timings.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use wordsig::checkpoint;
use wordsig::data::{
    self, generate_synthetic, make_split, Dataset, SignalFrame, SyntheticConfig, SyntheticSignal,
};
use wordsig::decoder::{self, DecoderConfig, SideInputStats};
use wordsig::encoder::{self, EncoderConfig, EncoderCtx, Variant, Vocabulary};
use wordsig::report::{self, RunStore};
use wordsig::signals::Signal;
use wordsig::stats::{self, PairedOutcome, PairedSample, Tail};
use wordsig::tape::{grad_check, NodeId, ParameterSet, Tape};
use wordsig::tensor::Tensor;
use wordsig::train::{
    self, sweep_erp_combinations, train_run, train_run_observed, OptimizerHyper, Schedule,
    SentenceLossInput, Stage, TrainableSet, TrainOptions, TrainingVariation,
};

fn pass(criterion: u32, name: &str, started: Instant) {
    println!(
        "criterion {criterion} ({name}): pass [{:.1}s]",
        started.elapsed().as_secs_f64()
    );
}

fn dataset_vocab(dataset: &Dataset) -> Vocabulary {
    let sents: Vec<Vec<String>> = dataset
        .sentences
        .iter()
        .map(|s| s.tokens.iter().map(|t| t.text.clone()).collect())
        .collect();
    Vocabulary::build(sents.iter().map(|s| s.as_slice()))
}

fn dataset_corpus(dataset: &Dataset, vocab: &Vocabulary) -> Vec<Vec<usize>> {
    dataset
        .sentences
        .iter()
        .map(|s| vocab.ids(&s.tokens.iter().map(|t| t.text.clone()).collect::<Vec<_>>()))
        .filter(|ids| ids.len() >= 2)
        .collect()
}

fn micro_encoder(variant: Variant) -> EncoderConfig {
    EncoderConfig {
        embedding_dim: 4,
        hidden_dim: 6,
        output_dim: 4,
        layers: 2,
        variant,
        ..EncoderConfig::default()
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity
// ---------------------------------------------------------------------------

struct CompositeCase {
    enc: EncoderConfig,
    dec: DecoderConfig,
    tokens: Vec<usize>,
    lengths: Vec<f64>,
    logps: Vec<f64>,
    side: SideInputStats,
    targets: Tensor<f64>,
    mask: Tensor<f64>,
}

fn composite_loss(case: &CompositeCase, params: &ParameterSet<f64>) -> f64 {
    let (tape, loss) = composite_tape(case, params);
    tape.value(loss).item()
}

fn composite_tape(case: &CompositeCase, params: &ParameterSet<f64>) -> (Tape<f64>, NodeId) {
    let mut rng = data::derive_rng(0, "composite");
    let mut tape = Tape::new();
    let mut ctx = EncoderCtx::eval(&mut rng);
    let context =
        encoder::context_embeddings(&mut tape, params, &case.enc, &case.tokens, &mut ctx).unwrap();
    let preds = decoder::predict_all(
        &mut tape,
        params,
        &case.dec,
        context,
        &case.lengths,
        &case.logps,
        &case.side,
    )
    .unwrap();
    let input = SentenceLossInput {
        predictions: preds,
        targets: case.targets.clone(),
        mask: case.mask.clone(),
        content_tokens: case.tokens.len(),
    };
    let loss = train::build_loss(&mut tape, &[input]).unwrap();
    (tape, loss)
}

#[test]
fn criterion_01_gradient_fidelity() {
    let started = Instant::now();
    let step = 1e-5;
    let tol = 1e-4;

    // every primitive through the finite-difference harness
    let p3 = Tensor::new(vec![3], vec![0.4, -1.1, 2.3]);
    let p23 = Tensor::new(vec![2, 3], vec![0.5, -0.3, 1.2, 0.8, -1.5, 0.1]);
    let checks: Vec<(&str, f64)> = vec![
        ("matmul", {
            grad_check(
                |t, x| {
                    let w = t.input(Tensor::new(vec![3, 2], vec![0.2, -0.4, 1.0, 0.3, -0.7, 0.5]))?;
                    let y = t.matmul(x, w)?;
                    t.sum(y)
                },
                &p23,
                step,
            )
        }),
        ("add", {
            grad_check(
                |t, x| {
                    let c = t.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]))?;
                    let y = t.add(x, c)?;
                    t.sum(y)
                },
                &p3,
                step,
            )
        }),
        ("sub", {
            grad_check(
                |t, x| {
                    let c = t.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]))?;
                    let y = t.sub(c, x)?;
                    t.sum(y)
                },
                &p3,
                step,
            )
        }),
        ("multiply", {
            grad_check(
                |t, x| {
                    let y = t.mul(x, x)?;
                    t.sum(y)
                },
                &p3,
                step,
            )
        }),
        ("squared-error", {
            grad_check(
                |t, x| {
                    let c = t.input(Tensor::new(vec![3], vec![0.1, 0.1, 0.1]))?;
                    let y = t.squared_error(x, c)?;
                    t.sum(y)
                },
                &p3,
                step,
            )
        }),
        ("add-bias", {
            grad_check(
                |t, x| {
                    let m = t.input(Tensor::new(vec![2, 3], vec![0.3; 6]))?;
                    let y = t.add_bias(m, x)?;
                    let s = t.sigmoid(y)?;
                    t.sum(s)
                },
                &p3,
                step,
            )
        }),
        ("scale", {
            grad_check(
                |t, x| {
                    let y = t.scale(x, -2.5)?;
                    t.sum(y)
                },
                &p3,
                step,
            )
        }),
        ("concat", {
            grad_check(
                |t, x| {
                    let c = t.input(Tensor::new(vec![2, 3], vec![0.9; 6]))?;
                    let y = t.concat(&[x, c], 0)?;
                    let z = t.tanh(y)?;
                    t.sum(z)
                },
                &p23,
                step,
            )
        }),
        ("slice", {
            grad_check(
                |t, x| {
                    let y = t.slice(x, 0, 2, 1, 3)?;
                    let z = t.sigmoid(y)?;
                    t.sum(z)
                },
                &p23,
                step,
            )
        }),
        ("gather", {
            grad_check(
                |t, x| {
                    let y = t.gather(x, &[1, 0, 1])?;
                    let z = t.tanh(y)?;
                    t.sum(z)
                },
                &p23,
                step,
            )
        }),
        ("sigmoid", grad_check(|t, x| {
            let y = t.sigmoid(x)?;
            t.sum(y)
        }, &p3, step)),
        ("tanh", grad_check(|t, x| {
            let y = t.tanh(x)?;
            t.sum(y)
        }, &p3, step)),
        ("relu", grad_check(|t, x| {
            let y = t.relu(x)?;
            t.sum(y)
        }, &p3, step)),
        ("dropout", {
            let mask = Tensor::new(vec![3], vec![2.0, 0.0, 2.0]);
            grad_check(
                move |t, x| {
                    let y = t.dropout(x, mask.clone())?;
                    t.sum(y)
                },
                &p3,
                step,
            )
        }),
        ("causal-conv2-x", {
            grad_check(
                |t, x| {
                    let w = t.input(Tensor::new(vec![6, 2], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()))?;
                    let b = t.input(Tensor::new(vec![2], vec![0.1, -0.2]))?;
                    let y = t.causal_conv2(x, w, b)?;
                    let z = t.tanh(y)?;
                    t.sum(z)
                },
                &p23,
                step,
            )
        }),
        ("causal-conv2-w", {
            let pw = Tensor::new(vec![4, 2], vec![0.3, -0.1, 0.2, 0.4, -0.6, 0.5, 0.0, 0.7]);
            grad_check(
                |t, w| {
                    let x = t.input(Tensor::new(vec![3, 2], vec![0.5, 1.0, -0.4, 0.2, 0.8, -0.9]))?;
                    let b = t.input(Tensor::new(vec![2], vec![0.0, 0.1]))?;
                    let y = t.causal_conv2(x, w, b)?;
                    let z = t.sigmoid(y)?;
                    t.sum(z)
                },
                &pw,
                step,
            )
        }),
        ("mean", grad_check(|t, x| t.mean(x), &p23, step)),
        ("sum", grad_check(|t, x| t.sum(x), &p23, step)),
        ("cross-entropy", {
            grad_check(|t, x| t.cross_entropy_rows(x, &[2, 0]), &p23, step)
        }),
    ];
    for (name, err) in &checks {
        assert!(*err < tol, "primitive {name}: max relative error {err}");
    }

    // full encoder-decoder composite against central differences per entry
    let enc = micro_encoder(Variant::Bidirectional);
    let mut rng = data::derive_rng(3, "composite-params");
    let mut params: ParameterSet<f64> = encoder::init_encoder_params(&enc, 7, &mut rng);
    let dec = DecoderConfig::new(enc.context_width(), vec![Signal::N400, Signal::P600]);
    params.merge(decoder::init_decoder_params(&dec, &mut rng));
    let case = CompositeCase {
        dec,
        tokens: vec![2, 5, 3],
        lengths: vec![3.0, 5.0, 4.0],
        logps: vec![-1.2, -0.7, -2.4],
        side: SideInputStats::fit(&[3.0, 5.0, 4.0], &[-1.2, -0.7, -2.4]),
        targets: Tensor::new(vec![3, 2], vec![0.4, -0.6, 1.1, 0.2, -0.9, 0.5]),
        mask: Tensor::new(vec![3, 2], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]),
        enc,
    };
    let (tape, loss) = composite_tape(&case, &params);
    let grads = tape.param_grads(loss, None, &params).unwrap();
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut max_rel = 0.0f64;
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            params.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let fp = composite_loss(&case, &params);
            params.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let fm = composite_loss(&case, &params);
            params.get_mut(name).unwrap().data_mut()[i] = orig;
            let central = (fp - fm) / (2.0 * step);
            let analytic = grads[name].data()[i];
            // floor the scale: below ~1e-6 the central difference is pure
            // cancellation noise, so compare absolutely there
            let rel = (analytic - central).abs() / central.abs().max(1e-6);
            assert!(
                rel < tol,
                "composite {name}[{i}]: analytic {analytic} vs central {central} (rel {rel})"
            );
            max_rel = max_rel.max(rel);
        }
    }
    assert!(started.elapsed().as_secs() < 120, "gradient suite exceeded 2 minutes");
    println!("composite max relative error {max_rel:.2e}");
    pass(1, "gradient fidelity", started);
}

// ---------------------------------------------------------------------------
// 2. Loss oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_loss_oracle() {
    let started = Instant::now();
    let mut rng = data::derive_rng(0, "loss-oracle");
    for case in 0..100 {
        let n_sent = rng.gen_range(1..=4);
        let n_sig = rng.gen_range(1..=4usize);
        let mut tape: Tape<f64> = Tape::new();
        let mut inputs = Vec::new();
        let mut naive_num = 0.0;
        let mut naive_den = 0usize;
        for _ in 0..n_sent {
            let t_len = rng.gen_range(1..=6);
            let preds: Vec<f64> = (0..t_len * n_sig).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let targets: Vec<f64> = (0..t_len * n_sig).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut mask = vec![0.0; t_len * n_sig];
            let mut content = 0usize;
            for w in 0..t_len {
                if rng.gen::<f64>() < 0.7 {
                    content += 1;
                    for s in 0..n_sig {
                        if rng.gen::<f64>() < 0.8 {
                            mask[w * n_sig + s] = 1.0;
                        }
                    }
                }
            }
            for w in 0..t_len {
                for s in 0..n_sig {
                    let d = preds[w * n_sig + s] - targets[w * n_sig + s];
                    naive_num += mask[w * n_sig + s] * d * d;
                }
            }
            naive_den += content;
            let preds = tape.input(Tensor::new(vec![t_len, n_sig], preds)).unwrap();
            inputs.push(SentenceLossInput {
                predictions: preds,
                targets: Tensor::new(vec![t_len, n_sig], targets),
                mask: Tensor::new(vec![t_len, n_sig], mask),
                content_tokens: content,
            });
        }
        if naive_den == 0 {
            continue;
        }
        let loss = train::build_loss(&mut tape, &inputs).unwrap();
        let naive = naive_num / naive_den as f64;
        let got = tape.value(loss).item();
        assert!(
            (got - naive).abs() < 1e-12,
            "case {case}: build_loss {got} vs naive {naive}"
        );
    }
    pass(2, "loss oracle", started);
}

// ---------------------------------------------------------------------------
// 3. Sweep structure and split pairing
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_sweep_structure() {
    let started = Instant::now();
    let sweep = sweep_erp_combinations();
    assert_eq!(sweep.len(), 63);
    let unique: std::collections::BTreeSet<Vec<Signal>> =
        sweep.iter().map(|v| v.included.clone()).collect();
    assert_eq!(unique.len(), 63, "variations are not unique");

    // the split is a pure function of (seed, run); every variation therefore
    // pairs on the identical sentence partition
    let master = 17u64;
    let ids: Vec<usize> = (0..40).collect();
    for run in 0..100 {
        let hash = make_split(master, run, &ids).unwrap().hash();
        for _ in 0..3 {
            assert_eq!(make_split(master, run, &ids).unwrap().hash(), hash);
        }
    }

    // end-to-end: actual runs report the same split hash across variations
    let cfg = SyntheticConfig { n_sentences: 30, n_participants: 3, ..SyntheticConfig::default() };
    let (dataset, _) = generate_synthetic(&cfg, 17).unwrap();
    let vocab = dataset_vocab(&dataset);
    let enc = micro_encoder(Variant::EmbeddingsOnly);
    let mut rng = data::derive_rng(17, "enc-init");
    let enc_params: ParameterSet<f32> = encoder::init_encoder_params(&enc, vocab.len(), &mut rng);
    let quick = Schedule { stages: vec![Stage { epochs: 0..1, trainable: TrainableSet::DecoderOnly }] };
    let variations = [
        TrainingVariation::singleton(Signal::N400),
        TrainingVariation::singleton(Signal::P600),
        TrainingVariation::new(vec![Signal::N400, Signal::P600], Signal::N400).unwrap(),
    ];
    for run in 0..3 {
        let expected = make_split(17, run, &dataset.sentence_ids()).unwrap().hash();
        for variation in &variations {
            let opts = TrainOptions { master_seed: 17, run_index: run, schedule: quick.clone(), ..TrainOptions::default() };
            let (result, _) = train_run(&dataset, &vocab, &enc, &enc_params, variation, &opts).unwrap();
            assert_eq!(result.split_hash, expected, "run {run} variation {}", variation.label());
        }
    }
    pass(3, "sweep structure and split pairing", started);
}

// ---------------------------------------------------------------------------
// 4. BHY exactness
// ---------------------------------------------------------------------------

fn bhy_oracle(pvalues: &[f64], q: f64) -> Vec<bool> {
    let m = pvalues.len();
    let c: f64 = (1..=m).map(|i| 1.0 / i as f64).sum();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].partial_cmp(&pvalues[b]).unwrap());
    let mut k_star = 0;
    for (rank, &idx) in order.iter().enumerate() {
        let k = rank + 1;
        if pvalues[idx] <= k as f64 * q / (m as f64 * c) {
            k_star = k;
        }
    }
    let mut out = vec![false; m];
    for &idx in order.iter().take(k_star) {
        out[idx] = true;
    }
    out
}

#[test]
fn criterion_04_bhy_exactness() {
    let started = Instant::now();
    let mut rng = data::derive_rng(0, "bhy");
    for case in 0..1000 {
        let m = rng.gen_range(1..=10);
        let pvalues: Vec<f64> = (0..m)
            .map(|_| {
                // mix tiny and large p-values to exercise the threshold
                if rng.gen::<f64>() < 0.4 {
                    rng.gen::<f64>() * 0.02
                } else {
                    rng.gen::<f64>()
                }
            })
            .collect();
        for q in [0.01, 0.05] {
            let got = stats::bhy_adjust(&pvalues, q).unwrap();
            let want = bhy_oracle(&pvalues, q);
            assert_eq!(got, want, "case {case} q {q} pvalues {pvalues:?}");
        }
    }
    pass(4, "BHY exactness", started);
}

// ---------------------------------------------------------------------------
// 5. Standardization pipeline
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_standardization() {
    let started = Instant::now();
    let cfg = SyntheticConfig {
        missing_rate: 0.15,
        signals: vec![
            SyntheticSignal { signal: Signal::N400, loading: vec![1.0, 0.0, 0.0], noise_std: 0.5 },
            SyntheticSignal { signal: Signal::Read, loading: vec![0.0, 1.0, 0.0], noise_std: 0.5 },
        ],
        ..SyntheticConfig::default()
    };
    let (dataset, _) = generate_synthetic(&cfg, 23).unwrap();
    let split = make_split(23, 0, &dataset.sentence_ids()).unwrap();
    let (averaged, stats_a) = data::standardize_and_average(&dataset, &split).unwrap();

    for &signal in &dataset.signals {
        let train: Vec<f64> = averaged
            .iter()
            .filter(|((s, _, sig), _)| *sig == signal && !split.is_test(*s))
            .map(|(_, v)| v)
            .collect();
        assert!(train.len() > 50);
        let mean = train.iter().sum::<f64>() / train.len() as f64;
        let var = train.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / train.len() as f64;
        assert!(mean.abs() < 1e-9, "{signal} train mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-9, "{signal} train std {}", var.sqrt());
    }

    // perturbing test-sentence values must not move any training statistic
    // and must leave every training-sentence output unchanged
    let mut perturbed = Dataset::new(
        dataset.sentences.clone(),
        dataset.participants.clone(),
        dataset.signals.clone(),
    );
    for frame in dataset.frames() {
        let value = if split.is_test(frame.sentence) { frame.value * 3.0 + 0.1 } else { frame.value };
        perturbed
            .insert_frame(SignalFrame { value, ..frame })
            .unwrap();
    }
    let (averaged_p, stats_b) = data::standardize_and_average(&perturbed, &split).unwrap();
    assert_eq!(stats_a.participant, stats_b.participant);
    assert_eq!(stats_a.post_average, stats_b.post_average);
    for ((s, w, sig), v) in averaged.iter() {
        if !split.is_test(s) {
            assert_eq!(averaged_p.get(s, w, sig), Some(v), "train value moved at ({s},{w},{sig})");
        }
    }
    pass(5, "standardization", started);
}

// ---------------------------------------------------------------------------
// 6. Synthetic recoverability
// ---------------------------------------------------------------------------

fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        embedding_dim: 32,
        hidden_dim: 64,
        output_dim: 32,
        variant: Variant::EmbeddingsOnly,
        ..EncoderConfig::default()
    }
}

fn toy_hyper() -> OptimizerHyper {
    OptimizerHyper {
        learning_rate: 3e-3,
        encoder_learning_rate: 1e-3,
        ..OptimizerHyper::default()
    }
}

#[test]
fn criterion_06_synthetic_recoverability() {
    let started = Instant::now();
    let seed = 11u64;
    let cfg = SyntheticConfig::default();
    let (dataset, truth) = generate_synthetic(&cfg, seed).unwrap();
    let vocab = dataset_vocab(&dataset);
    let enc = toy_encoder();
    let corpus = dataset_corpus(&dataset, &vocab);
    let (enc_params, _) =
        train::lm_train(&corpus, &vocab, &enc, seed, 3, 16, &toy_hyper()).unwrap();

    let variation =
        TrainingVariation::new(vec![Signal::N400, Signal::P600], Signal::N400).unwrap();
    let results: Vec<_> = (0..10usize)
        .into_par_iter()
        .map(|run| {
            let opts = TrainOptions {
                master_seed: seed,
                run_index: run,
                schedule: Schedule::default_two_stage(),
                hyper: toy_hyper(),
                batch_size: 4,
            };
            train_run(&dataset, &vocab, &enc, &enc_params, &variation, &opts)
                .unwrap()
                .0
        })
        .collect();

    for &signal in &variation.included {
        let poves: Vec<f64> = results.iter().map(|r| r.final_pove[&signal]).collect();
        let mean = poves.iter().sum::<f64>() / poves.len() as f64;
        let ceiling = truth.pove_ceiling[&signal];
        println!("{signal}: mean POVE {mean:.4} over 10 runs, ceiling {ceiling:.4}");
        assert!(
            mean >= 0.8 * ceiling,
            "{signal}: mean POVE {mean:.4} below 0.8 x ceiling {:.4}",
            0.8 * ceiling
        );
    }
    assert!(started.elapsed().as_secs() < 1800, "recoverability exceeded 30 minutes");
    pass(6, "synthetic recoverability", started);
}

// ---------------------------------------------------------------------------
// 7. Multitask-benefit structure
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_multitask_benefit() {
    let started = Instant::now();
    let seed = 29u64;
    // EPNP and PNP load the same latent factor under heavy noise; N400 is
    // independent and nearly noiseless, leaving no room for a joint benefit
    let cfg = SyntheticConfig {
        signals: vec![
            SyntheticSignal { signal: Signal::Epnp, loading: vec![1.0, 0.0, 0.0], noise_std: 2.5 },
            SyntheticSignal { signal: Signal::Pnp, loading: vec![1.0, 0.0, 0.0], noise_std: 2.5 },
            SyntheticSignal { signal: Signal::N400, loading: vec![0.0, 0.0, 1.0], noise_std: 0.5 },
        ],
        ..SyntheticConfig::default()
    };
    let (dataset, _) = generate_synthetic(&cfg, seed).unwrap();
    let vocab = dataset_vocab(&dataset);
    let enc = toy_encoder();
    let corpus = dataset_corpus(&dataset, &vocab);
    let (enc_params, _) =
        train::lm_train(&corpus, &vocab, &enc, seed, 3, 16, &toy_hyper()).unwrap();

    let shared = [Signal::Epnp, Signal::Pnp];
    let independent = Signal::N400;
    let joint = TrainingVariation::new(
        vec![Signal::Epnp, Signal::Pnp, Signal::N400],
        Signal::Epnp,
    )
    .unwrap();
    let mut variations = vec![joint.clone()];
    for s in [Signal::Epnp, Signal::Pnp, Signal::N400] {
        variations.push(TrainingVariation::singleton(s));
    }

    let runs = 20usize;
    let jobs: Vec<(usize, TrainingVariation)> = variations
        .iter()
        .flat_map(|v| (0..runs).map(move |r| (r, v.clone())))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(run, variation)| {
            let opts = TrainOptions {
                master_seed: seed,
                run_index: *run,
                schedule: Schedule::default_two_stage(),
                hyper: toy_hyper(),
                batch_size: 4,
            };
            train_run(&dataset, &vocab, &enc, &enc_params, variation, &opts)
                .unwrap()
                .0
        })
        .collect();

    let final_val = |variation: &TrainingVariation, signal: Signal| -> Vec<f64> {
        let mut by_run = BTreeMap::new();
        for r in results.iter().filter(|r| &r.variation == variation) {
            by_run.insert(r.run_index, r.epochs.last().unwrap().val_mse[&signal]);
        }
        by_run.into_values().collect()
    };

    let mut pvalues = Vec::new();
    let mut labels = Vec::new();
    for &signal in shared.iter().chain([&independent]) {
        let single = final_val(&TrainingVariation::singleton(signal), signal);
        let joint_mse = final_val(&joint, signal);
        assert_eq!(single.len(), runs);
        assert_eq!(joint_mse.len(), runs);
        // one-sided: joint MSE below independent MSE
        let sample = PairedSample::new(single, joint_mse).unwrap();
        match stats::paired_ttest_tailed(&sample, Tail::Greater).unwrap() {
            PairedOutcome::Test { t, p } => {
                println!("{signal}: paired t {t:.3}, one-sided p {p:.5}");
                pvalues.push(p);
                labels.push(signal);
            }
            PairedOutcome::DeterministicallyDifferent { mean_diff } => {
                println!("{signal}: deterministic difference {mean_diff:.5}");
                pvalues.push(if mean_diff > 0.0 { 0.0 } else { 1.0 });
                labels.push(signal);
            }
        }
    }
    let rejected = stats::bhy_adjust(&pvalues, 0.01).unwrap();
    for (label, rej) in labels.iter().zip(&rejected) {
        let expect = shared.contains(label);
        assert_eq!(
            *rej, expect,
            "{label}: significance {rej}, expected {expect} (p-values {pvalues:?})"
        );
    }
    pass(7, "multitask-benefit structure", started);
}

// ---------------------------------------------------------------------------
// 8. Schedule contract
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_schedule_contract() {
    let started = Instant::now();
    let cfg = SyntheticConfig { n_sentences: 30, n_participants: 3, ..SyntheticConfig::default() };
    let (dataset, _) = generate_synthetic(&cfg, 31).unwrap();
    let vocab = dataset_vocab(&dataset);
    let enc = micro_encoder(Variant::Bidirectional);
    let mut rng = data::derive_rng(31, "enc-init");
    let enc_params: ParameterSet<f32> = encoder::init_encoder_params(&enc, vocab.len(), &mut rng);
    let schedule = Schedule::extended_three_stage();
    let variation = TrainingVariation::new(vec![Signal::N400, Signal::P600], Signal::N400).unwrap();
    let opts = TrainOptions {
        master_seed: 31,
        run_index: 0,
        schedule: schedule.clone(),
        hyper: OptimizerHyper::default(),
        batch_size: 8,
    };
    let mut snapshots: Vec<BTreeMap<String, Vec<f32>>> = Vec::new();
    train_run_observed(&dataset, &vocab, &enc, &enc_params, &variation, &opts, |_, params| {
        snapshots.push(
            params
                .iter()
                .map(|(n, t, _)| (n.to_string(), t.data().to_vec()))
                .collect(),
        );
    })
    .unwrap();
    assert_eq!(snapshots.len(), 60);

    let last_layer = enc.layers - 1;
    let is_final_enc = |name: &str| {
        name.starts_with(&format!("enc.fwd.l{last_layer}.")) || name.starts_with(&format!("enc.bwd.l{last_layer}."))
    };
    // stage 1 (epochs 0..20): every encoder parameter bit-identical to init
    for (epoch, snap) in snapshots[..20].iter().enumerate() {
        for (name, init, _) in enc_params.iter() {
            assert_eq!(
                snap[name],
                init.data(),
                "epoch {epoch}: frozen {name} moved in stage 1"
            );
        }
    }
    // stage 2 (20..40): everything except the final encoder layer stays at
    // its stage-1 value; the final layer must actually move
    let stage1_end = &snapshots[19];
    for (epoch, snap) in snapshots[20..40].iter().enumerate() {
        for name in enc_params.names() {
            if !is_final_enc(name) {
                assert_eq!(
                    snap[name], stage1_end[name],
                    "epoch {}: frozen {name} moved in stage 2",
                    epoch + 20
                );
            }
        }
    }
    assert!(
        enc_params
            .names()
            .filter(|n| is_final_enc(n) && !n.contains(".lm."))
            .any(|n| snapshots[39][n] != stage1_end[n]),
        "final encoder layer never moved in stage 2"
    );
    // stage 3 (40..60): embeddings unfreeze and move
    assert_ne!(
        snapshots[59]["enc.emb"], snapshots[39]["enc.emb"],
        "embeddings never moved in stage 3"
    );

    // curve files: independent and joint series plus their difference
    let store_dir = tempfile::tempdir().unwrap();
    let store = RunStore::new(store_dir.path());
    let variations = [
        TrainingVariation::singleton(Signal::N400),
        TrainingVariation::singleton(Signal::P600),
        variation.clone(),
    ];
    let jobs: Vec<(usize, TrainingVariation)> = variations
        .iter()
        .flat_map(|v| (0..2usize).map(move |r| (r, v.clone())))
        .collect();
    let outputs: Vec<_> = jobs
        .par_iter()
        .map(|(run, v)| {
            let opts = TrainOptions { run_index: *run, ..opts.clone() };
            train_run(&dataset, &vocab, &enc, &enc_params, v, &opts).unwrap()
        })
        .collect();
    for (result, params) in &outputs {
        store.save_run(result, params, 31, "acceptance-hash").unwrap();
    }
    let records = store.load_all().unwrap();
    let curve_dir = store_dir.path().join("curves");
    let files = report::write_curves(&curve_dir, &records, &variation).unwrap();
    let mut names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut expected: Vec<String> = ["N400", "P600"]
        .iter()
        .flat_map(|s| {
            ["independent", "joint", "difference"]
                .iter()
                .map(move |k| format!("{s}_{k}.tsv"))
        })
        .collect();
    expected.sort();
    assert_eq!(names, expected, "curve file set mismatch");
    for sig in ["N400", "P600"] {
        let read = |kind: &str| -> Vec<Vec<f64>> {
            let raw = std::fs::read_to_string(curve_dir.join(format!("{sig}_{kind}.tsv"))).unwrap();
            raw.lines()
                .skip(1)
                .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
                .collect()
        };
        let (ind, joint_c, diff) = (read("independent"), read("joint"), read("difference"));
        assert_eq!(ind.len(), 60);
        assert_eq!(joint_c.len(), 60);
        assert_eq!(diff.len(), 60);
        for e in 0..60 {
            assert!((diff[e][1] - (joint_c[e][1] - ind[e][1])).abs() < 1e-9);
            assert!((diff[e][2] - (joint_c[e][2] - ind[e][2])).abs() < 1e-9);
        }
    }
    pass(8, "schedule contract", started);
}

// ---------------------------------------------------------------------------
// 9. Statistics oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_statistics_oracles() {
    let started = Instant::now();
    // tabulated two-sided critical values: P(|T_df| > t) = p
    let table = [
        (1.0, 12.7062, 0.05),
        (2.0, 4.3027, 0.05),
        (5.0, 2.5706, 0.05),
        (10.0, 2.2281, 0.05),
        (20.0, 2.0860, 0.05),
        (30.0, 2.0423, 0.05),
        (1.0, 63.6567, 0.01),
        (5.0, 4.0321, 0.01),
        (10.0, 3.1693, 0.01),
        (30.0, 2.7500, 0.01),
        (5.0, 2.0150, 0.10),
        (10.0, 1.8125, 0.10),
    ];
    for (df, t, p) in table {
        let got = stats::student_t_pvalue(t, df, Tail::TwoSided);
        assert!(
            (got - p).abs() < 5e-5,
            "df {df}, t {t}: p {got:.6} vs tabulated {p}"
        );
    }

    // pearson closed forms
    let x = vec![1.0, 2.0, 3.0, 4.0];
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    assert!((stats::pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    let y: Vec<f64> = x.iter().map(|v| -3.0 * v + 2.0).collect();
    assert!((stats::pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
    let a = vec![1.0, -1.0, 1.0, -1.0];
    let b = vec![1.0, 1.0, -1.0, -1.0];
    assert!(stats::pearson(&a, &b).unwrap().abs() < 1e-12);
    // x=[1,2,3], y=[1,2,4]: r = 3/sqrt(2 * 14/3)
    let r = stats::pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
    let want = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
    assert!((r - want).abs() < 1e-12, "r {r} vs {want}");
    pass(9, "statistics oracles", started);
}

// ---------------------------------------------------------------------------
// 10. Determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_determinism() {
    let started = Instant::now();
    let cfg = SyntheticConfig { n_sentences: 30, n_participants: 3, ..SyntheticConfig::default() };
    let (dataset, _) = generate_synthetic(&cfg, 41).unwrap();
    let vocab = dataset_vocab(&dataset);
    let enc = micro_encoder(Variant::Bidirectional);
    let mut rng = data::derive_rng(41, "enc-init");
    let enc_params: ParameterSet<f32> = encoder::init_encoder_params(&enc, vocab.len(), &mut rng);
    let variation = TrainingVariation::new(vec![Signal::N400, Signal::P600], Signal::P600).unwrap();
    let opts = TrainOptions {
        master_seed: 41,
        run_index: 2,
        schedule: Schedule {
            stages: vec![
                Stage { epochs: 0..2, trainable: TrainableSet::DecoderOnly },
                Stage { epochs: 2..4, trainable: TrainableSet::DecoderPlusFinalEncoderLayer },
            ],
        },
        hyper: OptimizerHyper::default(),
        batch_size: 8,
    };
    let (r1, p1) = train_run(&dataset, &vocab, &enc, &enc_params, &variation, &opts).unwrap();
    let (r2, p2) = train_run(&dataset, &vocab, &enc, &enc_params, &variation, &opts).unwrap();
    assert_eq!(r1, r2, "metrics differ between identical executions");

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    checkpoint::save(&a, "{}", &p1).unwrap();
    checkpoint::save(&b, "{}", &p2).unwrap();
    assert_eq!(
        checkpoint::file_sha256(&a).unwrap(),
        checkpoint::file_sha256(&b).unwrap(),
        "checkpoint hashes differ"
    );
    pass(10, "determinism", started);
}
