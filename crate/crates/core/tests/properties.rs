//! Property tests over randomized inputs.

use latentlab::latent::prune_top_k;
use latentlab::num::{kl_divergence, softmax_with_temperature, ProbVector};
use latentlab::segmask::{build_ltim, build_ltsum, encoder_layout, segment_fixed, stage1_decoder_layout};
use proptest::prelude::*;

fn simplex(n: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(1e-6..1.0f64, n).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        ProbVector::new(raw.into_iter().map(|x| x / s).collect()).unwrap()
    })
}

proptest! {
    #[test]
    fn softmax_lands_on_simplex(
        logits in prop::collection::vec(-50.0..50.0f64, 1..32),
        temp in 0.01..10.0f64,
    ) {
        let p = softmax_with_temperature(&logits, temp).unwrap();
        prop_assert!(p.as_slice().iter().all(|&x| x >= 0.0));
        prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_nonnegative_zero_on_diagonal(
        (p, q) in (2usize..12).prop_flat_map(|n| (simplex(n), simplex(n))),
    ) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-9);
    }

    #[test]
    fn top_k_full_width_is_identity(p in (2usize..16).prop_flat_map(simplex)) {
        let full = prune_top_k(&p, p.len()).unwrap();
        prop_assert_eq!(full.as_slice(), p.as_slice());
    }

    #[test]
    fn segmentation_reassembles(
        chain in prop::collection::vec(0u32..64, 1..64),
        r in 1usize..9,
    ) {
        let segs = segment_fixed(&chain, r).unwrap();
        prop_assert_eq!(segs.concat(), chain.clone());
        prop_assert_eq!(segs.len(), chain.len().div_ceil(r));
        for (i, s) in segs.iter().enumerate() {
            if i + 1 < segs.len() {
                prop_assert_eq!(s.len(), r);
            } else {
                prop_assert!(!s.is_empty() && s.len() <= r);
            }
        }
    }

    #[test]
    fn constructed_masks_hold_invariants(
        q_len in 1usize..4,
        seg_lens in prop::collection::vec(1usize..4, 1..5),
        ans_len in 1usize..3,
    ) {
        let enc = encoder_layout(q_len, &seg_lens);
        let dec = stage1_decoder_layout(q_len, &seg_lens, ans_len);
        let n = seg_lens.len();
        let mut masks = vec![build_ltim(&enc).unwrap()];
        for i in 1..=n {
            masks.push(build_ltsum(&dec, i).unwrap());
        }
        for m in masks {
            for i in 0..m.len() {
                prop_assert!(m.allows(i, i));
                for j in (i + 1)..m.len() {
                    prop_assert!(!m.allows(i, j));
                }
            }
        }
    }
}
