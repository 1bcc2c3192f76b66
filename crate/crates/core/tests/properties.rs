use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssmd_core::likelihood::{
    brute_force_likelihood, exact_bound, rejection_count_posterior, sequence_likelihood,
};
use ssmd_core::logspace::log_sum_exp;
use ssmd_core::models::{DraftMode, DraftTargetModel, TabularModel};
use ssmd_core::rng::RngStream;
use ssmd_core::sampler::{accept_step, sample_one, Family, NfeMeter, SamplerConfig};
use ssmd_core::schedule::{NoiseSchedule, TimeGrid, WindowSpec};
use ssmd_core::types::{Ordering, Outcome, ProbRow, SequenceSpec, TokenSequence};

fn weights(s: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.01f64..1.0], s)
        .prop_filter("some mass", |w| w.iter().sum::<f64>() > 0.0)
}

fn row_pair() -> impl Strategy<Value = (ProbRow, ProbRow)> {
    (2usize..=6).prop_flat_map(|s| (weights(s), weights(s))).prop_map(|(a, b)| {
        (ProbRow::from_weights(a).unwrap(), ProbRow::from_weights(b).unwrap())
    })
}

/// A small random tabular model, a random ordering and a seed.
fn tabular() -> impl Strategy<Value = (TabularModel, Ordering, u64)> {
    (2usize..=3, 1usize..=4, any::<u64>(), 0.05f64..0.6).prop_map(|(s, d, seed, eps)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = SequenceSpec::new(s, d).unwrap();
        let m = TabularModel::random(spec, &mut rng, 1.5, DraftMode::Perturbed { epsilon: eps }).unwrap();
        let ordering = ssmd_core::types::sample_ordering(&mut rng, d);
        (m, ordering, seed)
    })
}

fn sequences(m: &TabularModel) -> Vec<TokenSequence> {
    let spec = m.spec();
    (0..m.num_sequences())
        .map(|k| TokenSequence::new_complete(&spec, m.sequence_at(k)).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accepted_or_resampled_tokens_have_target_mass((draft, target) in row_pair(), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        for _ in 0..50 {
            let x = draft.sample(&mut rng);
            let (outcome, y) = accept_step(&draft, &target, x, &mut rng).unwrap();
            prop_assert!(target.prob(y) > 0.0);
            if outcome == Outcome::Accept {
                prop_assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn likelihood_normalizes_and_matches_brute_force((m, o, _) in tabular()) {
        let mut total = 0.0;
        for x in sequences(&m) {
            let dp = sequence_likelihood(&m, &x, &o).unwrap();
            let bf = brute_force_likelihood(&m, &x, &o).unwrap();
            prop_assert!((dp.exp() - bf.exp()).abs() < 1e-12);
            total += dp.exp();
        }
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejection_posterior_is_a_distribution((m, o, _) in tabular()) {
        let d = m.spec().len() as f64;
        for x in sequences(&m) {
            let p = rejection_count_posterior(&m, &x, &o).unwrap();
            prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.probs.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            prop_assert!((0.0..=d + 1e-9).contains(&p.mean()));
            let outer = p.expected_outer_loops();
            prop_assert!(outer >= 1.0 - 1e-9 && outer <= d + 1e-9);
            prop_assert!((p.log_likelihood - sequence_likelihood(&m, &x, &o).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn ordering_average_never_exceeds_marginal((m, _, _) in tabular()) {
        for x in sequences(&m) {
            let b = exact_bound(&m, &x).unwrap();
            prop_assert!(b.elbo <= b.log_marginal + 1e-12);
        }
    }

    #[test]
    fn samplers_emit_complete_valid_sequences((m, o, seed) in tabular(), dtau in 0.01f64..1.0, n in 1usize..4, t in 1usize..8) {
        let spec = m.spec();
        let families = [
            Family::SpecBasic,
            Family::Spec(SamplerConfig::new(WindowSpec::cosine(dtau).unwrap(), n).unwrap()),
            Family::Mdm { schedule: NoiseSchedule::Cosine, grid: TimeGrid::new(t).unwrap() },
        ];
        for f in &families {
            let ordering = if matches!(f, Family::Mdm { .. }) { None } else { Some(&o) };
            let r = sample_one(&m, f, seed, ordering).unwrap();
            prop_assert_eq!(r.sequence.len(), spec.len());
            for (p, &tok) in r.sequence.tokens().iter().enumerate() {
                prop_assert!(spec.check_token(tok, p).is_ok());
            }
            prop_assert!(r.trace.rejections() <= spec.len());
            prop_assert!(r.meter.nc_passes >= 1 && r.meter.nc_passes <= spec.len());
            prop_assert!(r.nfe > 0.0);
            let again = sample_one(&m, f, seed, ordering).unwrap();
            prop_assert_eq!(r.sequence, again.sequence);
        }
    }

    #[test]
    fn windows_stay_in_range(len in 1usize..300, frac in 0.0f64..1.0, dtau in 1e-4f64..=1.0, cap in 1usize..400) {
        let i = ((len as f64 * frac) as usize).min(len - 1);
        for w in [WindowSpec::cosine(dtau).unwrap(), WindowSpec::Linear, WindowSpec::constant(cap).unwrap()] {
            let size = w.window_size(i, len).unwrap();
            prop_assert!(size >= 1 && size <= len - i);
        }
    }

    #[test]
    fn nfe_is_block_weighted(l_nc in 1usize..24, l_c in 0usize..8, nc in 0usize..50, c in 0usize..50, nc2 in 0usize..50, c2 in 0usize..50) {
        let mut a = NfeMeter { nc_passes: nc, c_passes: c, l_nc, l_c };
        let b = NfeMeter { nc_passes: nc2, c_passes: c2, l_nc, l_c };
        let expected = a.nfe() + b.nfe();
        a.merge(&b);
        prop_assert!((a.nfe() - expected).abs() < 1e-9);
        prop_assert!(a.nfe() >= a.nc_passes as f64 * l_nc as f64 / (l_nc + l_c) as f64 - 1e-12);
    }

    #[test]
    fn log_sum_exp_matches_direct_sum(xs in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!((log_sum_exp(&xs) - direct).abs() < 1e-12 * direct.abs().max(1.0));
    }
}
