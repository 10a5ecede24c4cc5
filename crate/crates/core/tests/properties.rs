mod common;

use std::collections::BTreeSet;

use common::{reference_beam, tiny_corpus, tiny_model, tiny_model_config, tiny_task};
use cress_core::analysis::{
    corpus_bleu, gap_curve, gap_records, modality_gap, paired_bootstrap, Smoothing, Strategy as GapStrategy,
};
use cress_core::data::{
    build_vocab, generate_synthetic_corpus, make_batches, read_features, write_features, SynthTask,
    BOS, EOS, NUM_SPECIALS, PAD, UNK,
};
use cress_core::decoding::{beam_decode, default_max_len, greedy_decode, rescore, BeamConfig};
use cress_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelInput, Role};
use cress_core::tensor::{cosine_similarity, kl_bidirectional, log_softmax, softmax};
use cress_core::training::{
    cress_loss, decay_probability, token_weights, Mode, ScheduleState, TrainConfig,
};
use cress_core::{SpeechFeatures, Tape, Tensor, TokenSeq, TranslationModel};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-30.0..30.0f64, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

fn nonzero_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, len).prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn sentences() -> impl Strategy<Value = Vec<Vec<u8>>> {
    prop::collection::vec(prop::collection::vec(0u8..6, 0..12), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_normalizes_and_log_softmax_agrees(x in matrix(6, 9), axis in 0usize..2) {
        let s = softmax(&x, axis).unwrap();
        let ls = log_softmax(&x, axis).unwrap();
        let (r, c) = x.dims2();
        let (outer, inner) = if axis == 1 { (r, c) } else { (c, r) };
        for o in 0..outer {
            let total: f64 = (0..inner)
                .map(|i| if axis == 1 { s.get2(o, i) } else { s.get2(i, o) })
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
        for (a, b) in s.data().iter().zip(ls.data()) {
            if *a > 0.0 {
                prop_assert!((a.ln() - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bidirectional_kl_is_symmetric_and_non_negative(
        (a, b) in (2usize..10).prop_flat_map(|n| (prop::collection::vec(-4.0..4.0f64, n), prop::collection::vec(-4.0..4.0f64, n)))
    ) {
        let la = log_softmax(&Tensor::vector(a), 0).unwrap();
        let lb = log_softmax(&Tensor::vector(b), 0).unwrap();
        let ab = kl_bidirectional(la.data(), lb.data());
        prop_assert_eq!(ab, kl_bidirectional(lb.data(), la.data()));
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(kl_bidirectional(la.data(), la.data()), 0.0);
    }

    #[test]
    fn cosine_is_bounded((a, b) in (1usize..16).prop_flat_map(|n| (nonzero_vec(n), nonzero_vec(n)))) {
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn modality_gap_is_bounded_and_symmetric((a, b) in (1usize..16).prop_flat_map(|n| (nonzero_vec(n), nonzero_vec(n)))) {
        let g = modality_gap(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&g));
        prop_assert_eq!(g, modality_gap(&b, &a).unwrap());
    }

    #[test]
    fn repeated_backward_is_identical(x in matrix(5, 5)) {
        let grads = || {
            let tape = Tape::new();
            let v = tape.var(x.clone());
            let loss = v.softmax(1).unwrap().mul(v).unwrap().layer_norm(
                tape.constant(Tensor::full(&[x.cols()], 1.5)),
                tape.constant(Tensor::zeros(&[x.cols()])),
                1e-5,
            ).unwrap().relu().sum();
            tape.backward(loss).unwrap().get(v).unwrap()
        };
        prop_assert_eq!(grads(), grads());
    }

    #[test]
    fn decay_is_strictly_decreasing(e in 1usize..400, mu in 0.5..100.0f64) {
        prop_assert!(decay_probability(e + 1, mu) < decay_probability(e, mu));
    }

    #[test]
    fn token_weights_stay_in_range(
        gaps in prop::collection::vec(0.0..=2.0f64, 1..40),
        base in 0.1..2.0f64,
        scale in 0.0..1.0f64,
    ) {
        for w in token_weights(&gaps, base, scale).unwrap() {
            prop_assert!(w >= base && w <= base + 2.0 * scale);
        }
    }

    #[test]
    fn corpus_bleu_ignores_example_order(
        pairs in prop::collection::vec((prop::collection::vec(0u8..6, 0..12), prop::collection::vec(0u8..6, 1..12)), 1..12),
        rotation in 0usize..12,
    ) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let k = rotation % hyps.len();
        let mut h2 = hyps.clone();
        let mut r2 = refs.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        h2.reverse();
        r2.reverse();
        let a = corpus_bleu(&hyps, &refs, Smoothing::Exp).unwrap();
        let b = corpus_bleu(&h2, &r2, Smoothing::Exp).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_against_itself_is_never_significant(hyps in sentences(), seed in any::<u64>()) {
        let refs: Vec<Vec<u8>> = hyps.iter().map(|h| h.iter().rev().cloned().chain([1]).collect()).collect();
        prop_assert!(paired_bootstrap(&hyps, &hyps, &refs, 100, seed).unwrap() >= 0.5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn batches_partition_the_corpus(
        n in 1usize..60,
        max_tokens in 8usize..200,
        max_frames in 40usize..600,
        seed in any::<u64>(),
    ) {
        let (_, examples) = tiny_corpus(n, seed);
        let batches = make_batches(&examples, max_tokens, max_frames, seed).unwrap();
        let mut seen = BTreeSet::new();
        for b in &batches {
            let n = b.indices.len();
            prop_assert!(n >= 1);
            prop_assert!(n * (b.tgt_width.max(b.src_width) + 1) <= max_tokens);
            prop_assert!(n * b.frames.shape()[1] <= max_frames);
            for (k, &i) in b.indices.iter().enumerate() {
                prop_assert!(seen.insert(i), "example {} repeated", i);
                let width = b.tgt_width;
                let real = examples[i].y.len();
                for p in 0..width {
                    prop_assert_eq!(b.tgt_mask[k * width + p], p < real);
                    prop_assert_eq!(b.tgt[k * width + p] == PAD, p >= real);
                }
            }
        }
        prop_assert_eq!(seen.len(), examples.len());
    }

    #[test]
    fn corpus_generation_is_reproducible_and_follows_the_mapping(n in 1usize..20, seed in any::<u64>()) {
        let cfg = tiny_task();
        let a = generate_synthetic_corpus(&cfg, n, seed).unwrap();
        prop_assert_eq!(&a, &generate_synthetic_corpus(&cfg, n, seed).unwrap());
        let task = SynthTask::new(cfg).unwrap();
        let vocab = build_vocab(&a).unwrap();
        for t in &a {
            prop_assert!(!t.x.is_empty() && !t.y.is_empty() && t.s.frames.rows() > 0);
            let x: Vec<usize> = t.x.iter().map(|w| w[1..].parse().unwrap()).collect();
            let y: Vec<String> = task.translate(&x).iter().map(|w| format!("w{w:02}")).collect();
            prop_assert_eq!(&t.y, &y);
            prop_assert_eq!(vocab.decode(&vocab.encode(&t.y)), t.y.clone());
        }
        for (i, special) in [PAD, BOS, EOS, UNK].into_iter().enumerate() {
            prop_assert_eq!(special, i);
        }
        for id in NUM_SPECIALS..vocab.len() {
            prop_assert_eq!(vocab.id(vocab.token(id).unwrap()), id);
        }
    }

    #[test]
    fn features_round_trip_at_stored_precision(rows in 1usize..20, cols in 1usize..8, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 ^ seed) % 1000) as f64 / 7.0 - 50.0).collect();
        let s = SpeechFeatures::new(Tensor::matrix(rows, cols, data.clone()).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_features(&path, &s).unwrap();
        let back = read_features(&path).unwrap();
        for (a, b) in back.frames.data().iter().zip(&data) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>()) {
        let model = TranslationModel::init(tiny_model_config(9, 4, 0.1), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &Checkpoint::model_only(model.clone())).unwrap();
        let back = load_checkpoint(&path).unwrap().model;
        for (a, b) in model.params().iter().zip(back.params()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(model.names(), back.names());
    }

    #[test]
    fn decoder_is_causal(seed in any::<u64>(), j in 1usize..6) {
        let (vocab, examples) = tiny_corpus(6, seed);
        prop_assume!(vocab.len() >= NUM_SPECIALS + 2);
        let model = tiny_model(&vocab, &examples, 0.0, seed);
        let memory = model.encode(examples[0].speech()).unwrap();
        let regular = vocab.len() - NUM_SPECIALS;
        let prefix: Vec<usize> = (0..7).map(|i| if i == 0 { BOS } else { NUM_SPECIALS + (i * 3 + seed as usize) % regular }).collect();
        let mut changed = prefix.clone();
        changed[j] = NUM_SPECIALS + (changed[j] - NUM_SPECIALS + 1) % regular;
        let a = model.decode_parallel(&memory, &prefix).unwrap();
        let b = model.decode_parallel(&memory, &changed).unwrap();
        for p in 0..j {
            prop_assert_eq!(a.reps.row(p), b.reps.row(p));
            prop_assert_eq!(a.log_probs.row(p), b.log_probs.row(p));
        }
        prop_assert!(a.reps.row(j) != b.reps.row(j));
    }

    #[test]
    fn speech_length_follows_the_subsampling_formula(frames in 1usize..=512, seed in any::<u64>()) {
        let model = TranslationModel::init(tiny_model_config(9, 3, 0.0), seed).unwrap();
        let data: Vec<f64> = (0..frames * 3).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let s = SpeechFeatures::new(Tensor::matrix(frames, 3, data).unwrap()).unwrap();
        let mem = model.encode(ModelInput::Speech(&s)).unwrap();
        let conv = model.config().conv.clone();
        let once = |l: usize| (l + 2 * conv.padding - conv.kernel) / conv.stride + 1;
        prop_assert_eq!(mem.rows(), once(once(frames)));
    }

    #[test]
    fn forward_without_dropout_is_deterministic(seed in any::<u64>()) {
        let (vocab, examples) = tiny_corpus(1, seed);
        let model = tiny_model(&vocab, &examples, 0.3, seed);
        let ex = &examples[0];
        let src = ex.x.encoder_input();
        for input in [ModelInput::Speech(&ex.s), ModelInput::Text(&src)] {
            let m1 = model.encode(input).unwrap();
            let m2 = model.encode(input).unwrap();
            prop_assert_eq!(&m1, &m2);
            let prefix = ex.y.decoder_prefix();
            prop_assert_eq!(
                model.decode_parallel(&m1, &prefix.ids).unwrap(),
                model.decode_parallel(&m2, &prefix.ids).unwrap()
            );
        }
    }

    #[test]
    fn unit_beam_without_penalty_is_greedy(seed in any::<u64>()) {
        let (vocab, examples) = tiny_corpus(2, seed);
        let model = tiny_model(&vocab, &examples, 0.0, seed);
        let beam = BeamConfig { beam: 1, length_penalty: 0.0, max_len: None };
        for ex in &examples {
            let g = greedy_decode(&model, ex.speech(), None).unwrap();
            let b = beam_decode(&model, ex.speech(), &beam).unwrap();
            prop_assert_eq!(&g.tokens, &b.best().tokens);
        }
    }

    #[test]
    fn beam_scores_match_teacher_forced_rescoring(seed in any::<u64>(), width in 1usize..6) {
        let (vocab, examples) = tiny_corpus(1, seed);
        let model = tiny_model(&vocab, &examples, 0.0, seed);
        let beam = BeamConfig { beam: width, ..BeamConfig::default() };
        let r = beam_decode(&model, examples[0].speech(), &beam).unwrap();
        for h in &r.hyps {
            let tf = rescore(&model, examples[0].speech(), &h.tokens).unwrap();
            prop_assert!((h.score - tf).abs() <= 1e-9, "{} vs {}", h.score, tf);
            prop_assert!((h.score - h.step_log_probs.iter().sum::<f64>()).abs() <= 1e-9);
        }
        prop_assert_eq!(r, beam_decode(&model, examples[0].speech(), &beam).unwrap());
    }

    #[test]
    fn teacher_forced_gaps_are_repeatable(seed in any::<u64>()) {
        let (vocab, examples) = tiny_corpus(3, seed);
        let model = tiny_model(&vocab, &examples, 0.0, seed);
        let run = || gap_curve(&gap_records(&model, &examples, GapStrategy::TeacherForcing, &BeamConfig::default(), usize::MAX).unwrap());
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn regularizer_is_non_negative(seed in any::<u64>(), epoch in 1usize..30) {
        let (vocab, examples) = tiny_corpus(4, seed);
        let model = tiny_model(&vocab, &examples, 0.1, seed);
        let cfg = TrainConfig { mode: Mode::Cress, adaptive_start_epoch: 2, ..TrainConfig::default() };
        let batch = make_batches(&examples, usize::MAX, usize::MAX, seed).unwrap().remove(0);
        let out = cress_loss(&model, &batch, &ScheduleState::at(epoch, cfg.mu), &cfg, seed).unwrap();
        prop_assert!(out.loss.reg >= 0.0);
        for w in &out.loss.weights {
            if cfg.adaptive_active(epoch) {
                prop_assert!(*w >= cfg.weight_base && *w <= cfg.weight_base + 2.0 * cfg.weight_scale);
            } else {
                prop_assert_eq!(*w, 1.0);
            }
        }
        let again = cress_loss(&model, &batch, &ScheduleState::at(epoch, cfg.mu), &cfg, seed).unwrap();
        prop_assert_eq!(out.grads, again.grads);
    }
}

#[test]
fn regularizer_vanishes_when_branches_agree() {
    let (vocab, examples) = tiny_corpus(1, 3);
    let model = tiny_model(&vocab, &examples, 0.0, 3);
    let ex = &examples[0];
    let src = ex.x.encoder_input();
    let prefix = ex.y.decoder_prefix();
    let mem = model.encode(ModelInput::Text(&src)).unwrap();
    let t = model.decode_parallel(&mem, &prefix.ids).unwrap();
    for r in 0..t.len() {
        assert_eq!(kl_bidirectional(t.log_probs.row(r), t.log_probs.row(r)), 0.0);
    }
    let ms = model.encode(ModelInput::Speech(&ex.s)).unwrap();
    let s = model.decode_parallel(&ms, &prefix.ids).unwrap();
    assert!((0..t.len()).any(|r| kl_bidirectional(t.log_probs.row(r), s.log_probs.row(r)) > 0.0));
}

/// A wider beam can prune the prefix a narrower one follows to a better
/// finish, so the top score is not monotone in the width. Every such case
/// must reproduce under the uncached reference search at both widths.
#[test]
fn width_regressions_come_from_pruning_alone() {
    let mut regressions = 0;
    let mut checked = 0;
    for seed in 0..40u64 {
        let (vocab, examples) = tiny_corpus(2, seed);
        let model = tiny_model(&vocab, &examples, 0.0, seed);
        for ex in &examples {
            let max_len = default_max_len(model.encode(ex.speech()).unwrap().rows());
            let mut prev: Option<(usize, f64)> = None;
            for width in [1, 2, 4, 8] {
                let cfg = BeamConfig { beam: width, ..BeamConfig::default() };
                let best = beam_decode(&model, ex.speech(), &cfg).unwrap().best().clone();
                let top = best.penalized(cfg.length_penalty);
                checked += 1;
                if let Some((narrow, prev_top)) = prev.filter(|(_, p)| top < p - 1e-12) {
                    regressions += 1;
                    for w in [narrow, width] {
                        let cached = beam_decode(&model, ex.speech(), &BeamConfig { beam: w, ..cfg.clone() }).unwrap();
                        let reference = reference_beam(&model, ex.speech(), w, cfg.length_penalty, max_len);
                        assert_eq!(cached.best().tokens, reference[0].0, "seed {seed} width {w}");
                        assert!((cached.best().score - reference[0].1).abs() < 1e-9);
                    }
                    assert!(prev_top > top);
                }
                if prev.is_none_or(|(_, p)| top > p) {
                    prev = Some((width, top));
                }
            }
        }
    }
    eprintln!("{regressions} width regressions over {checked} searches");
    assert!(regressions * 10 < checked);
}

#[test]
fn token_seq_roles_place_markers() {
    let t = TokenSeq::new(vec![7, 8], Role::Translation);
    assert_eq!(t.decoder_prefix().ids, vec![BOS, 7, 8]);
    assert_eq!(t.decoder_targets(), vec![7, 8, EOS]);
}
