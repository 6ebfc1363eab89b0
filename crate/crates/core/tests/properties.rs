mod common;

use msvq::associate;
use msvq::metrics;
use msvq::mhvq::{self, MultiHeadCodebook, TrainOptions};
use msvq::msmc::{self, Msmcr, StageConfig, StageSpec};
use msvq::pipeline::format;
use msvq::{FeatureKind, FeatureSequence, LinearPredictor, Rows};
use proptest::prelude::*;

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

/// (heads, codewords, head_dim, codebook data)
fn codebook(max_h: usize, max_k: usize) -> impl Strategy<Value = MultiHeadCodebook> {
    (1..=max_h, 1..=max_k, 1usize..=4).prop_flat_map(|(h, k, d)| {
        vals(h * k * d).prop_map(move |data| MultiHeadCodebook::new(h, k, d, data).unwrap())
    })
}

fn book_and_point() -> impl Strategy<Value = (MultiHeadCodebook, Vec<f64>)> {
    codebook(2, 16).prop_flat_map(|cb| {
        let n = cb.total_dim();
        (Just(cb), vals(n))
    })
}

fn seq(data: Vec<f64>, dim: usize, shift: f64) -> FeatureSequence {
    FeatureSequence::new(data, dim, shift, FeatureKind::Upstream).unwrap()
}

fn two_stage() -> StageConfig {
    StageConfig::new(vec![
        StageSpec { rate: 1, heads: 2, codewords: 4, head_dim: 2 },
        StageSpec { rate: 2, heads: 1, codewords: 8, head_dim: 4 },
    ])
    .unwrap()
}

/// Random books for `two_stage` plus a random input sequence, encoded.
fn encoded() -> impl Strategy<Value = (Vec<MultiHeadCodebook>, FeatureSequence, Msmcr)> {
    (vals(2 * 4 * 2), vals(8 * 4), 1usize..30)
        .prop_flat_map(|(b1, b2, t)| (Just(b1), Just(b2), vals(t * 4)))
        .prop_map(|(b1, b2, x)| {
            let books = vec![MultiHeadCodebook::new(2, 4, 2, b1).unwrap(), MultiHeadCodebook::new(1, 8, 4, b2).unwrap()];
            let x = seq(x, 4, 12.5);
            let m = msmc::encode(&x, &two_stage(), &books).unwrap();
            (books, x, m)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_matches_brute_force((cb, x) in book_and_point()) {
        let r = mhvq::quantize(&x, &cb).unwrap();
        prop_assert_eq!(&r.indices, &common::brute_force_indices(&x, &cb));
        prop_assert_eq!(mhvq::dequantize(&r.indices, &cb).unwrap(), r.quantized.clone());
    }

    #[test]
    fn per_head_errors_sum_to_total((cb, x) in book_and_point()) {
        let r = mhvq::quantize(&x, &cb).unwrap();
        let total: f64 = x.iter().zip(&r.quantized).map(|(a, b)| (a - b) * (a - b)).sum();
        let sum: f64 = r.head_sq_errors.iter().sum();
        prop_assert!((total - sum).abs() <= 1e-12 * total.max(1.0));
    }

    #[test]
    fn indices_are_translation_invariant((cb, x) in book_and_point(), shift in -2.0f64..2.0) {
        // Shift the codebook and the point by the same (exactly representable) offset.
        let shift = (shift * 8.0).round() / 8.0;
        let moved = MultiHeadCodebook::new(
            cb.heads(), cb.codewords(), cb.head_dim(),
            cb.as_slice().iter().map(|v| v + shift).collect(),
        ).unwrap();
        let y: Vec<f64> = x.iter().map(|v| v + shift).collect();
        // Distances change by rounding only, so compare against exact ties conservatively.
        let a = mhvq::quantize(&x, &cb).unwrap();
        let b = mhvq::quantize(&y, &moved).unwrap();
        for (h, (&i, &j)) in a.indices.iter().zip(&b.indices).enumerate() {
            if i != j {
                let d = cb.head_dim();
                let dist = |k: usize| -> f64 {
                    cb.codeword(h, k).iter().zip(&x[h * d..(h + 1) * d]).map(|(c, v)| (c - v) * (c - v)).sum()
                };
                prop_assert!((dist(i) - dist(j)).abs() < 1e-9, "head {} picked {} vs {}", h, i, j);
            }
        }
    }

    #[test]
    fn ema_update_preserves_shapes(cb in codebook(3, 8), n in 1usize..20, seed in any::<u64>()) {
        let data: Vec<f64> = (0..n * cb.total_dim()).map(|i| ((i as u64 ^ seed) % 97) as f64 / 50.0 - 1.0).collect();
        let st = mhvq::EmaState::new(&cb, 0.99, 1e-5).unwrap();
        let (next, st2) = mhvq::ema_update(&cb, &st, Rows::new(&data, cb.total_dim()).unwrap()).unwrap();
        prop_assert_eq!((next.heads(), next.codewords(), next.head_dim()), (cb.heads(), cb.codewords(), cb.head_dim()));
        prop_assert!(next.as_slice().iter().all(|v| v.is_finite()));
        for h in 0..cb.heads() {
            prop_assert_eq!(st2.counts(h).len(), cb.codewords());
        }
    }

    #[test]
    fn downsample_inverts_upsample(x in (1usize..12).prop_flat_map(|t| vals(t * 3)), r in 1usize..5) {
        let s = seq(x, 3, 50.0);
        let up = msmc::upsample_repeat(&s, r, s.len() * r).unwrap();
        let back = msmc::downsample_avg(&up, r).unwrap();
        prop_assert_eq!(back.len(), s.len());
        for (a, b) in back.as_slice().iter().zip(s.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert_eq!(back.frame_shift_ms(), s.frame_shift_ms());
    }

    #[test]
    fn smoothing_projection_is_idempotent(x in (1usize..20).prop_flat_map(|t| vals(t * 2)), r in 1usize..5) {
        let s = seq(x, 2, 12.5);
        let project = |q: &FeatureSequence| msmc::upsample_repeat(&msmc::downsample_avg(q, r).unwrap(), r, q.len()).unwrap();
        let once = project(&s);
        let twice = project(&once);
        prop_assert_eq!(once.len(), s.len());
        // The padded tail block is constant after one pass, so it is fixed too.
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn token_requantization_is_identity((books, _x, m) in encoded()) {
        for (st, cb) in m.stages.iter().zip(&books) {
            let (tokens, _) = mhvq::quantize_sequence(&st.quantized, cb).unwrap();
            for (row, again) in st.tokens.rows().zip(tokens.rows()) {
                // Duplicate codewords may legitimately map to a lower index with the same vector.
                for (h, (&a, &b)) in row.iter().zip(again).enumerate() {
                    prop_assert_eq!(cb.codeword(h, a as usize), cb.codeword(h, b as usize));
                }
            }
        }
    }

    #[test]
    fn stage_losses_ignore_a_shared_frame_permutation(x in (1usize..12).prop_flat_map(|t| vals(t * 4)), y in vals(48), rot in 0usize..12) {
        // Single stage at rate 1 so a frame permutation of the input permutes every stage.
        let cfg = StageConfig::new(vec![StageSpec { rate: 1, heads: 2, codewords: 4, head_dim: 2 }]).unwrap();
        let books = vec![MultiHeadCodebook::new(2, 4, 2, y[..16].to_vec()).unwrap()];
        let t = x.len() / 4;
        let mut xp = x.clone();
        xp.rotate_left((rot % t) * 4);
        let (a, b) = (seq(x, 4, 12.5), seq(xp, 4, 12.5));
        let (ma, mb) = (msmc::encode(&a, &cfg, &books).unwrap(), msmc::encode(&b, &cfg, &books).unwrap());
        let (la, lb) = (msmc::vq_loss(&[a], &ma).unwrap(), msmc::vq_loss(&[b], &mb).unwrap());
        prop_assert!((la - lb).abs() <= 1e-12 * la.max(1.0));

        let two = two_stage();
        let books2 = vec![MultiHeadCodebook::new(2, 4, 2, y[..16].to_vec()).unwrap(), MultiHeadCodebook::new(1, 8, 4, y[16..48].to_vec()).unwrap()];
        let m = msmc::encode(&seq(y[..t * 4].to_vec(), 4, 12.5), &two, &books2).unwrap();
        let pred = seq(y[48 - t * 4..].to_vec(), 4, 12.5);
        let base = msmc::ms_loss(std::slice::from_ref(&pred), &m).unwrap().value;
        // Permuting both the prediction and the stage-1 target frames leaves the mean unchanged.
        let k = rot % t;
        let mut p2 = pred.as_slice().to_vec();
        p2.rotate_left(k * 4);
        let mut q2 = m.stages[0].quantized.as_slice().to_vec();
        q2.rotate_left(k * 4);
        let direct: f64 = p2.iter().zip(&q2).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t as f64;
        prop_assert!((base - direct).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn stage_lengths_follow_rates((_books, x, m) in encoded()) {
        prop_assert_eq!(m.stages[0].tokens.len(), x.len());
        prop_assert_eq!(m.stages[1].tokens.len(), x.len().div_ceil(2));
        prop_assert_eq!(m.base_len(), x.len());
        prop_assert_eq!(m.bits(), (x.len() * 2 * 2 + x.len().div_ceil(2) * 3) as f64);
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_at_the_target((_books, x, m) in encoded()) {
        let pre = msmc::stage_inputs(&x, &two_stage()).unwrap();
        prop_assert!(msmc::vq_loss(&pre, &m).unwrap() >= 0.0);
        let post: Vec<_> = m.stages.iter().map(|s| s.quantized.clone()).collect();
        prop_assert_eq!(msmc::vq_loss(&post, &m).unwrap(), 0.0);
        let exact = vec![m.stages[0].quantized.clone()];
        prop_assert_eq!(msmc::ms_loss(&exact, &m).unwrap().value, 0.0);
        let zero = vec![seq(vec![0.0; x.len() * 4], 4, 12.5)];
        prop_assert!(msmc::ms_loss(&zero, &m).unwrap().value >= 0.0);
    }

    #[test]
    fn msmcr_token_file_round_trip((books, _x, m) in encoded()) {
        let fp = msmc::books_fingerprint(&books);
        let bytes = format::encode_msmcr(&m, &fp).unwrap();
        let back = format::decode_msmcr(&bytes).unwrap().resolve(&two_stage(), &books).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn aligned_stage_one_slice_is_stage_one((_books, _x, m) in encoded()) {
        let a = associate::align_concat(&m).unwrap();
        prop_assert_eq!(a.dim(), 8);
        prop_assert_eq!(a.len(), m.base_len());
        for (t, row) in a.frames().enumerate() {
            prop_assert_eq!(&row[..4], m.stages[0].quantized.frame(t));
        }
    }

    #[test]
    fn global_embedding_ignores_frame_order(b in vals(2 * 4 * 2), x in (2usize..20).prop_flat_map(|t| vals(t * 4)), rot in 1usize..19) {
        let cfg = StageConfig::new(vec![StageSpec { rate: 1, heads: 2, codewords: 4, head_dim: 2 }]).unwrap();
        let books = vec![MultiHeadCodebook::new(2, 4, 2, b).unwrap()];
        let t = x.len() / 4;
        let mut rotated = x.clone();
        rotated.rotate_left((rot % t) * 4);
        let e1 = associate::global_embedding(&msmc::encode(&seq(x, 4, 12.5), &cfg, &books).unwrap()).unwrap();
        let e2 = associate::global_embedding(&msmc::encode(&seq(rotated, 4, 12.5), &cfg, &books).unwrap()).unwrap();
        for (a, b) in e1.iter().zip(&e2) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn edit_distance_is_symmetric(a in "[a-d]{0,10}", b in "[a-d]{0,10}") {
        let (a, b): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        let ab = metrics::edit_distance(&a, &b);
        let ba = metrics::edit_distance(&b, &a);
        prop_assert_eq!(ab.total(), ba.total());
        prop_assert_eq!(ab.total(), common::levenshtein(&a, &b));
        // Tied alignments may trade substitutions for indel pairs, but every alignment
        // has to account for the length difference.
        for (ops, r, h) in [(&ab, &a, &b), (&ba, &b, &a)] {
            prop_assert_eq!(ops.deletions as i64 - ops.insertions as i64, r.len() as i64 - h.len() as i64);
        }
    }

    #[test]
    fn frechet_self_distance_is_zero(x in (3usize..40).prop_flat_map(|n| vals(n * 3))) {
        let s = metrics::gaussian_stats(Rows::new(&x, 3).unwrap()).unwrap();
        prop_assert!(metrics::frechet_distance(&s, &s, 1.0).unwrap() < 1e-6);
    }

    #[test]
    fn feature_file_round_trip(t in 0usize..30, d in 1usize..10, shift in 1.0f64..50.0, raw in vals(300)) {
        // Payloads are f32 on disk, so start from f32-representable values.
        let data: Vec<f64> = raw.iter().take(t * d).map(|v| f64::from(*v as f32)).collect();
        let t = data.len() / d;
        let s = FeatureSequence::new(data[..t * d].to_vec(), d, shift, FeatureKind::Mel).unwrap();
        let back = format::decode_features(&format::encode_features(&s).unwrap()).unwrap();
        prop_assert_eq!(back.as_slice(), s.as_slice());
        prop_assert_eq!((back.len(), back.dim(), back.kind()), (s.len(), s.dim(), s.kind()));
        prop_assert!((back.frame_shift_ms() - shift).abs() <= 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn training_is_deterministic(x in vals(60 * 4), seed in any::<u64>()) {
        let opts = TrainOptions { heads: 2, codewords: 4, epochs: 3, seed, ..TrainOptions::default() };
        let rows = Rows::new(&x, 4).unwrap();
        let (a, ra) = mhvq::train_codebook(rows, &opts).unwrap();
        let (b, rb) = mhvq::train_codebook(rows, &opts).unwrap();
        prop_assert_eq!(a.as_slice(), b.as_slice());
        prop_assert_eq!(ra.final_error, rb.final_error);
        prop_assert!(ra.final_error <= ra.initial_error);
    }

    #[test]
    fn ridge_fit_matches_normal_equations(x in vals(200 * 4), w in vals(4 * 2), noise in vals(200 * 2)) {
        let y: Vec<f64> = x
            .chunks(4)
            .zip(noise.chunks(2))
            .flat_map(|(r, n)| (0..2).map(|o| (0..4).map(|i| w[o * 4 + i] * r[i]).sum::<f64>() + 0.5 + 0.1 * n[o]).collect::<Vec<_>>())
            .collect();
        let (xr, yr) = (Rows::new(&x, 4).unwrap(), Rows::new(&y, 2).unwrap());
        let p = LinearPredictor::fit(xr, yr, 0.0).unwrap();
        let ours = p.residual(xr, yr) / 200.0;
        let oracle = common::normal_equations_residual(&x, &y, 4, 2);
        prop_assert!((ours - oracle).abs() <= 1e-8 * oracle.max(1.0), "{} vs {}", ours, oracle);
    }
}
