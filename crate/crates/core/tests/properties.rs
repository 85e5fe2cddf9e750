use proptest::collection::vec;
use proptest::prelude::*;

use qfvae::checkpoint::{Checkpoint, Stage};
use qfvae::corpus::{decode_corpus, encode_corpus, generate_corpus, CorpusSpec};
use qfvae::metrics::{
    diversity_stats, ffe, mcd, AudioConfig, PitchFrame, PitchTrack, ProsodyMeasurements, TokenProsody,
};
use qfvae::model::{attention_pool, kl_standard, PosteriorSequence};
use qfvae::numerics::{log_softmax, sample_categorical, softmax, RngStream};
use qfvae::priors::kl_gaussians;
use qfvae::records::{MetricSet, SampleRecord, SampleSet, SetKind};
use qfvae::tape::{Mat, Tape};
use qfvae::vq::{quantize_on_tape, vq_loss, Codebook};

fn mat(rows: usize, cols: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = Mat> {
    vec(range, rows * cols).prop_map(move |d| Mat::from_vec(rows, cols, d))
}

fn codebook_and_latents() -> impl Strategy<Value = (Mat, Mat)> {
    (1usize..24, 1usize..6, 1usize..8).prop_flat_map(|(k, d, n)| (mat(k, d, -2.0..2.0), mat(n, d, -2.0..2.0)))
}

fn brute_force(cb: &Mat, z: &[f64]) -> usize {
    let dist = |k: usize| -> f64 { cb.row(k).iter().zip(z).map(|(e, x)| (e - x) * (e - x)).sum() };
    (1..cb.rows).fold(0, |best, k| if dist(k) < dist(best) { k } else { best })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rng_streams_replay(seed in any::<u64>()) {
        let mut a = RngStream::new(seed);
        let mut b = RngStream::new(seed);
        for _ in 0..10_000 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_state_round_trip(seed in any::<u64>(), skip in 0usize..100) {
        let mut a = RngStream::new(seed);
        for _ in 0..skip {
            a.uniform();
        }
        let mut b = RngStream::from_state(a.state());
        for _ in 0..100 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn log_softmax_shift_invariant(x in vec(-50.0..50.0f64, 1..12), c in -1e3..1e3f64) {
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        for (a, b) in log_softmax(&x).iter().zip(log_softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        let total: f64 = softmax(&x).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_mass_categorical(k in 1usize..10, hot in 0usize..10, seed in any::<u64>()) {
        let hot = hot % k;
        let mut p = vec![0.0; k];
        p[hot] = 1.0;
        let mut rng = RngStream::new(seed);
        for _ in 0..20 {
            prop_assert_eq!(sample_categorical(&mut rng, &p).unwrap(), hot);
        }
    }

    #[test]
    fn kl_gaussians_non_negative(
        params in (1usize..6).prop_flat_map(|d| (
            vec(-3.0..3.0f64, d), vec(0.1..3.0f64, d), vec(-3.0..3.0f64, d), vec(0.1..3.0f64, d)
        ))
    ) {
        let (mq, sq, mp, sp) = params;
        prop_assert!(kl_gaussians(&mq, &sq, &mp, &sp).unwrap() >= 0.0);
        prop_assert!(kl_gaussians(&mq, &sq, &mq, &sq).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn kl_standard_non_negative(mu in mat(3, 4, -3.0..3.0), sigma in mat(3, 4, 0.05..4.0)) {
        let kl = kl_standard(&PosteriorSequence { mu, sigma }).unwrap();
        prop_assert!(kl.iter().all(|v| *v >= 0.0));
        let unit = PosteriorSequence { mu: Mat::zeros(2, 4), sigma: Mat::filled(2, 4, 1.0) };
        prop_assert!(kl_standard(&unit).unwrap().iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn quantize_is_brute_force_argmin((cb, z) in codebook_and_latents()) {
        let book = Codebook::new(cb.clone()).unwrap();
        let assigned = book.assign(&z).unwrap();
        for (n, got) in assigned.iter().enumerate() {
            let expected = brute_force(&cb, z.row(n));
            prop_assert_eq!(*got, expected);
            prop_assert_eq!(book.quantize(z.row(n)).unwrap().index, expected);
        }
    }

    #[test]
    fn duplicate_codewords_pick_smallest_index((cb, z) in codebook_and_latents(), dup in any::<prop::sample::Index>()) {
        let k = cb.rows;
        let mut doubled = Mat::zeros(2 * k, cb.cols);
        for r in 0..k {
            doubled.row_mut(r).copy_from_slice(cb.row(r));
            doubled.row_mut(k + r).copy_from_slice(cb.row(dup.index(k)));
        }
        let book = Codebook::new(doubled).unwrap();
        for n in 0..z.rows {
            prop_assert!(book.quantize(z.row(n)).unwrap().index < k);
        }
    }

    #[test]
    fn codebook_step_moves_toward_latent((cb, z) in codebook_and_latents(), lr in 1e-3..0.2f64) {
        let book = Codebook::new(cb.clone()).unwrap();
        let assign = book.assign(&z).unwrap();
        for (n, &k) in assign.iter().enumerate() {
            let single = Mat::row_vector(z.row(n).to_vec());
            let loss = vq_loss(&book, &single, &[k], 0.25).unwrap();
            let residual: Vec<f64> = z.row(n).iter().zip(cb.row(k)).map(|(a, b)| a - b).collect();
            if residual.iter().all(|r| *r == 0.0) {
                continue;
            }
            let step: Vec<f64> = loss.codebook_grad.row(k).iter().map(|g| -lr * g).collect();
            let dot: f64 = step.iter().zip(&residual).map(|(s, r)| s * r).sum();
            prop_assert!(dot > 0.0, "step {step:?} residual {residual:?}");
        }
        // With several latents on one codeword the step heads for their centroid.
        let loss = vq_loss(&book, &z, &assign, 0.25).unwrap();
        for k in 0..cb.rows {
            let members: Vec<usize> = (0..z.rows).filter(|n| assign[*n] == k).collect();
            if members.is_empty() {
                continue;
            }
            let toward: Vec<f64> = (0..cb.cols)
                .map(|d| members.iter().map(|n| z.at(*n, d)).sum::<f64>() / members.len() as f64 - cb.at(k, d))
                .collect();
            let dot: f64 = loss.codebook_grad.row(k).iter().zip(&toward).map(|(g, t)| -g * t).sum();
            prop_assert!(dot >= 0.0);
        }
    }

    #[test]
    fn stop_gradients_are_exact((cb, z) in codebook_and_latents()) {
        let tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let cv = tape.leaf(cb.clone());
        let q = quantize_on_tape(&tape, zv, cv, 0.25);
        let dq = tape.backward(q.quantization_loss).wrt_or_zeros(zv, z.rows, z.cols);
        let dc = tape.backward(q.commitment_loss).wrt_or_zeros(cv, cb.rows, cb.cols);
        prop_assert!(dq.data.iter().chain(&dc.data).all(|v| *v == 0.0));
    }

    #[test]
    fn attention_rows_are_distributions(logits in mat(5, 4, -30.0..30.0), values in mat(4, 3, -1.0..1.0)) {
        let (weights, pooled) = attention_pool(&logits, &values).unwrap();
        for r in 0..weights.rows {
            let s: f64 = weights.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        prop_assert_eq!(pooled.shape(), (5, 3));
    }

    #[test]
    fn checkpoint_round_trip(blocks in vec((1usize..4, 1usize..5), 0..5), seed in any::<u64>(), step in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let mut ck = Checkpoint::new(Stage::PriorContinuous, "seed = 1\n");
        ck.set_meta("step", step);
        for (i, (r, c)) in blocks.iter().enumerate() {
            let m = Mat::from_vec(*r, *c, (0..r * c).map(|_| rng.standard_normal()).collect());
            ck.push_block(format!("block{i}"), m);
        }
        let back = Checkpoint::decode(&ck.encode()).unwrap();
        prop_assert_eq!(&back.blocks, &ck.blocks);
        prop_assert_eq!(back.meta("step"), Some(step));
        prop_assert_eq!(back.blocks_digest(), ck.blocks_digest());
    }

    #[test]
    fn sample_set_round_trip(frames in mat(4, 3, 0.0..2.0), latents in mat(2, 3, -2.0..2.0), quantized in any::<bool>()) {
        let set = SampleSet {
            kind: SetKind::Samples,
            model: "qfvae-k8".into(),
            codebook_size: 8,
            prior: "ar-discrete".into(),
            scale: 0.2,
            temperature: 0.7,
            config_digest: "abc".into(),
            records: vec![SampleRecord {
                utterance: "utt0".into(),
                sample: 3,
                frames: frames.clone(),
                attention: Mat::filled(4, 2, 0.5),
                latents,
                indices: quantized.then(|| vec![1, 7]),
            }],
        };
        prop_assert_eq!(SampleSet::decode(&set.encode()).unwrap(), set);
    }

    #[test]
    fn metric_records_round_trip(vals in vec((0.0..1.0f64, 0.0..90.0f64), 1..6)) {
        let mut m = MetricSet::new(&[("kind", "reconstruction".into()), ("model", "baseline".into())]);
        for (i, (f, c)) in vals.iter().enumerate() {
            m.push(vec![("utt".into(), format!("u{i}")), ("ffe".into(), format!("{f:.6}")), ("mcd".into(), format!("{c:.6}"))]);
        }
        let text = m.render();
        prop_assert_eq!(MetricSet::parse(&text).unwrap().render(), text);
    }

    #[test]
    fn ffe_mcd_identity_and_positivity(c in mat(6, 13, -5.0..5.0), bump in 0.01..3.0f64, f0 in vec(0.0..300.0f64, 6)) {
        prop_assert_eq!(mcd(&c, &c, false).unwrap(), 0.0);
        let mut d = c.clone();
        d.set(2, 5, c.at(2, 5) + bump);
        prop_assert!(mcd(&c, &d, false).unwrap() > 0.0);
        let track = PitchTrack {
            frames: f0.iter().map(|f| PitchFrame { f0: *f, voiced: *f > 100.0 }).collect(),
        };
        prop_assert_eq!(ffe(&track, &track).unwrap(), 0.0);
    }

    #[test]
    fn diversity_ignores_sample_order(
        samples in vec(vec((0.1..2.0f64, 100.0..300.0f64, 1usize..20), 3), 2..6),
        rotate in 0usize..6,
    ) {
        let measured: Vec<ProsodyMeasurements> = samples
            .iter()
            .map(|toks| ProsodyMeasurements {
                tokens: toks
                    .iter()
                    .map(|(e, f, n)| TokenProsody {
                        energy: *e,
                        f0: *f,
                        duration_ms: *n as f64 * 12.5,
                        frames: *n,
                        voiced_frames: *n,
                    })
                    .collect(),
            })
            .collect();
        let mut rotated = measured.clone();
        rotated.rotate_left(rotate % measured.len());
        let a = diversity_stats(&measured).unwrap();
        let b = diversity_stats(&rotated).unwrap();
        prop_assert!((a.energy - b.energy).abs() < 1e-12);
        prop_assert!((a.f0 - b.f0).abs() < 1e-9);
        prop_assert!((a.duration_ms - b.duration_ms).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn corpus_round_trip_and_spans(seed in any::<u64>()) {
        let spec = CorpusSpec { count: 3, seed, min_tokens: 3, max_tokens: 5, ..CorpusSpec::default() };
        let utts = generate_corpus(&spec, "p").unwrap();
        for u in &utts {
            let spans = u.token_spans();
            prop_assert_eq!(spans.first().unwrap().0, 0);
            prop_assert_eq!(spans.last().unwrap().1, u.num_frames());
            prop_assert!(spans.windows(2).all(|w| w[0].1 == w[1].0 && w[0].0 < w[0].1));
        }
        let bytes = encode_corpus(&utts, &AudioConfig::default());
        let (audio, back) = decode_corpus(&bytes).unwrap();
        prop_assert_eq!(audio, AudioConfig::default());
        prop_assert_eq!(encode_corpus(&back, &audio), bytes);
        prop_assert_eq!(back, utts);
    }
}
