use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use proptest::prelude::*;
use wsi_pipeline::aggregate::{aggregate_slide, group_scores, verdict, GroupedClass4};
use wsi_pipeline::{ClassScores, SlideVerdict, TissueClass6};

fn normalized(raw: [f64; 6]) -> ClassScores {
    let s: f64 = raw.iter().sum();
    ClassScores::new(raw.map(|v| v / s)).unwrap()
}

fn scores_strategy() -> impl Strategy<Value = Vec<ClassScores>> {
    prop::collection::vec(prop::array::uniform6(0.001f64..1.0).prop_map(normalized), 1..60)
}

/// Scores whose entries are multiples of 1/64 summing to exactly one.
fn dyadic_scores() -> impl Strategy<Value = ClassScores> {
    prop::array::uniform5(0u32..=64).prop_map(|cuts| {
        let mut c = cuts.to_vec();
        c.sort_unstable();
        let mut edges = vec![0];
        edges.extend(c);
        edges.push(64);
        let mut p = [0.0; 6];
        for k in 0..6 {
            p[k] = (edges[k + 1] - edges[k]) as f64 / 64.0;
        }
        ClassScores::new(p).unwrap()
    })
}

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap()
}

proptest! {
    #[test]
    fn verdict_is_permutation_invariant(scores in scores_strategy(), seed in any::<u64>()) {
        let mut shuffled = scores.clone();
        // Deterministic Fisher-Yates driven by the proptest seed.
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = SlideVerdict::from_scores("s", &scores).unwrap();
        let b = SlideVerdict::from_scores("s", &shuffled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn grouping_commutes_with_averaging(scores in scores_strategy()) {
        let grouped_mean = group_scores(&aggregate_slide(&scores).unwrap());
        let n = scores.len() as f64;
        let mut mean_grouped = [0.0; 4];
        for s in &scores {
            for (m, g) in mean_grouped.iter_mut().zip(group_scores(s.probs())) {
                *m += g / n;
            }
        }
        for k in 0..4 {
            prop_assert!((grouped_mean[k] - mean_grouped[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn mean_matches_exact_rational_mean(scores in scores_strategy()) {
        let mean = aggregate_slide(&scores).unwrap();
        let n = BigRational::from_integer(BigInt::from(scores.len()));
        let mut mass = BigRational::zero();
        for k in 0..6 {
            let sum = scores.iter().fold(BigRational::zero(), |acc, s| acc + exact(s.probs()[k]));
            let truth = (sum / &n).to_f64().unwrap();
            prop_assert!((mean[k] - truth).abs() <= 2.0 * f64::EPSILON * truth.max(f64::MIN_POSITIVE));
            mass += exact(mean[k]);
        }
        let input_mass = scores.iter().fold(BigRational::zero(), |acc, s| {
            acc + s.probs().iter().fold(BigRational::zero(), |a, &p| a + exact(p))
        }) / &n;
        prop_assert!(((mass - input_mass).to_f64().unwrap()).abs() <= 1e-14);
    }

    #[test]
    fn dyadic_mass_is_conserved_exactly(scores in prop::collection::vec(dyadic_scores(), 1..5), log_n in 0u32..5) {
        // Power-of-two patch counts keep every division exact.
        let n = 1usize << log_n;
        let batch: Vec<ClassScores> = scores.iter().cycle().take(n).copied().collect();
        let mean = aggregate_slide(&batch).unwrap();
        let six = mean.iter().fold(BigRational::zero(), |a, &m| a + exact(m));
        let four = group_scores(&mean).iter().fold(BigRational::zero(), |a, &m| a + exact(m));
        prop_assert_eq!(&six, &BigRational::one());
        prop_assert_eq!(&four, &BigRational::one());
    }
}

#[test]
fn one_hot_slides_vote_their_group() {
    for class in TissueClass6::ALL {
        let v = SlideVerdict::from_scores("s", &[ClassScores::one_hot(class); 3]).unwrap();
        assert_eq!(v.predicted, GroupedClass4::from(class));
    }
}

#[test]
fn adenoma_subclasses_pool_before_the_vote() {
    // No single six-class entry wins for HG, but TA.HG + TVA.HG does.
    let s = ClassScores::new([0.3, 0.0, 0.2, 0.0, 0.2, 0.3]).unwrap();
    let v = SlideVerdict::from_scores("s", &[s]).unwrap();
    assert_eq!(v.grouped_scores4, [0.3, 0.0, 0.4, 0.3]);
    assert_eq!(v.predicted, GroupedClass4::Hg);
    assert_eq!(verdict(&[0.3, 0.0, 0.3, 0.3]), GroupedClass4::Hp);
}
