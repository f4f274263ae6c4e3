use super::*;
use crate::attack::{attack, AttackConfig};
use crate::graph::motif;
use crate::harness::default_watermark_layer;
use crate::recovery::{recover, ProbeConfig, RecoveryConfig};
use crate::rng::Rng;
use crate::watermark::{embed, keygen};

fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(
        vec![rows.len(), rows[0].len()],
        rows.iter().flatten().copied().collect(),
    )
    .unwrap()
}

fn random_rows(rng: &mut Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect()
}

fn certify(
    rec: &[Vec<f64>],
    reference: &[Vec<f64>],
    cfg: &CertificateConfig,
) -> LayerCertificate {
    certify_layer(
        &rows_tensor(rec),
        None,
        &rows_tensor(reference),
        None,
        NodeId(0),
        cfg,
    )
    .unwrap()
}

#[test]
fn identical_layers_certify_exactly() {
    let mut rng = Rng::new(1);
    let rows = random_rows(&mut rng, 6, 10);
    let cert = certify(&rows, &rows, &CertificateConfig::default());
    // The eta stabilizer in the optimal-scale formula leaves a residual of
    // order eta; still far below the tightest paper tolerance.
    assert!(cert.max_rel_err.unwrap() <= 1e-9, "{:?}", cert.max_rel_err);
    assert_eq!(cert.match_frac, 1.0);
    assert!(cert.pass);
    assert_eq!(cert.pi, (0..6).collect::<Vec<_>>());

    // Without the scaling allowance the residual is exactly zero.
    let strict = certify(
        &rows,
        &rows,
        &CertificateConfig {
            allow_scaling: false,
            ..CertificateConfig::default()
        },
    );
    assert_eq!(strict.max_rel_err, Some(0.0));
}

#[test]
fn row_permutation_certifies_with_zero_residual() {
    let mut rng = Rng::new(2);
    let rows = random_rows(&mut rng, 5, 8);
    let perm = [3, 0, 4, 1, 2];
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let cert = certify(
        &permuted,
        &rows,
        &CertificateConfig {
            allow_scaling: false,
            ..CertificateConfig::default()
        },
    );
    assert_eq!(cert.max_rel_err, Some(0.0));
    assert!(cert.pass);
    for (i, &j) in cert.pi.iter().enumerate() {
        assert_eq!(j, perm[i]);
    }
}

#[test]
fn exhaustive_permutations_up_to_six_channels() {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q: Vec<usize> = p.iter().map(|&x| x + 1).collect();
                q.insert(pos, 0);
                out.push(q);
            }
        }
        out
    }
    let mut rng = Rng::new(3);
    for n in 2..=6 {
        let rows = random_rows(&mut rng, n, 7);
        for perm in permutations(n) {
            let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let cert = certify(&permuted, &rows, &CertificateConfig::default());
            assert!(cert.pass, "n={n} perm={perm:?}");
            assert!(cert.max_rel_err.unwrap() <= 1e-9);
        }
    }
}

#[test]
fn scaling_allowance_contract() {
    let mut rng = Rng::new(4);
    let rows = random_rows(&mut rng, 4, 9);
    let scaled: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().map(|v| 1.3 * v).collect())
        .collect();

    let with = certify(&scaled, &rows, &CertificateConfig::default());
    assert!(with.max_rel_err.unwrap() <= 1e-12, "{:?}", with.max_rel_err);
    assert!(with.pass);

    let without = certify(
        &scaled,
        &rows,
        &CertificateConfig {
            allow_scaling: false,
            perm_tol: 0.1,
            ..CertificateConfig::default()
        },
    );
    // Residual is |1.3 - 1| * ||w|| / (||w|| + eta), roughly 0.3.
    let err = without.max_rel_err.unwrap();
    assert!((err - 0.3).abs() < 1e-6, "err {err}");
    assert!(!without.pass);
}

#[test]
fn random_positive_diagonal_scaling_certifies() {
    let mut rng = Rng::new(5);
    let rows = random_rows(&mut rng, 6, 11);
    let scaled: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let s = rng.uniform(0.6, 1.4);
            r.iter().map(|v| s * v).collect()
        })
        .collect();
    let cert = certify(&scaled, &rows, &CertificateConfig::default());
    assert!(cert.max_rel_err.unwrap() <= 1e-12);

    let strict = certify(
        &scaled,
        &rows,
        &CertificateConfig {
            allow_scaling: false,
            ..CertificateConfig::default()
        },
    );
    assert!(strict.max_rel_err.unwrap() > 0.0);
}

#[test]
fn negative_scale_clamps_to_zero_and_fails() {
    let rows = vec![vec![1.0, 2.0, 3.0]];
    let negated = vec![vec![-1.0, -2.0, -3.0]];
    let cert = certify(&negated, &rows, &CertificateConfig::default());
    // s* = max(0, -1) = 0, so the residual is ||w|| / (||w|| + eta) ~ 1.
    assert!(cert.max_rel_err.unwrap() > 0.99);
    assert!(!cert.pass);
}

#[test]
fn width_mismatch_fails_immediately() {
    let mut rng = Rng::new(6);
    let rows = random_rows(&mut rng, 4, 6);
    let wider = random_rows(&mut rng, 6, 6);
    let cert = certify(&wider, &rows, &CertificateConfig::default());
    assert_eq!(cert.match_frac, 0.0);
    assert_eq!(cert.max_rel_err, None);
    assert!(!cert.pass);
    assert!(cert.pi.is_empty());
}

#[test]
fn empty_layer_is_an_error() {
    let w = Tensor::zeros(vec![0, 4]);
    let r = Tensor::zeros(vec![0, 4]);
    assert!(matches!(
        certify_layer(&w, None, &r, None, NodeId(3), &CertificateConfig::default()),
        Err(VerifierError::EmptyLayer(_))
    ));
}

#[test]
fn tolerance_monotonicity_sweep() {
    let mut rng = Rng::new(7);
    let rows = random_rows(&mut rng, 5, 8);
    // Perturb one row by a mid-scale amount so some tolerances fail.
    let mut bent = rows.clone();
    for v in bent[2].iter_mut() {
        *v *= 1.004;
    }
    let mut prev_pass = false;
    for tol in [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1] {
        let cert = certify(
            &bent,
            &rows,
            &CertificateConfig {
                perm_tol: tol,
                allow_scaling: false,
                ..CertificateConfig::default()
            },
        );
        // Pass at a tolerance implies pass at every larger tolerance.
        assert!(!prev_pass || cert.pass, "monotonicity broken at {tol}");
        prev_pass = cert.pass;
    }
    assert!(prev_pass, "largest tolerance must pass");
}

#[test]
fn hungarian_flag_matches_greedy_on_permutations() {
    let mut rng = Rng::new(8);
    let rows = random_rows(&mut rng, 6, 9);
    let perm = [5, 3, 0, 1, 4, 2];
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
    let hungarian = certify(
        &permuted,
        &rows,
        &CertificateConfig {
            use_hungarian: true,
            ..CertificateConfig::default()
        },
    );
    assert!(hungarian.pass);
    assert!(hungarian.max_rel_err.unwrap() <= 1e-9);
    for (i, &j) in hungarian.pi.iter().enumerate() {
        assert_eq!(j, perm[i]);
    }
}

#[test]
fn tier2_worked_examples() {
    let cfg = Tier2Config::default();
    // Half the similarity lost, fully recovered.
    assert!(tier2_pass(
        &SimilarityTriplet {
            clean: 1.0,
            attacked: 0.5,
            recovered: 1.0,
        },
        &cfg
    ));
    // No drop: pass iff r >= a - delta.
    assert!(tier2_pass(
        &SimilarityTriplet {
            clean: 0.8,
            attacked: 0.8,
            recovered: 0.79,
        },
        &cfg
    ));
    assert!(!tier2_pass(
        &SimilarityTriplet {
            clean: 0.8,
            attacked: 0.8,
            recovered: 0.7,
        },
        &cfg
    ));
    // Paper-style riga21 row: 0.5547 -> 0.9688 with clean 0.9688.
    assert!(tier2_pass(
        &SimilarityTriplet {
            clean: 0.9688,
            attacked: 0.5547,
            recovered: 0.9688,
        },
        &cfg
    ));
    // Insufficient recovery fails.
    assert!(!tier2_pass(
        &SimilarityTriplet {
            clean: 1.0,
            attacked: 0.5,
            recovered: 0.6,
        },
        &cfg
    ));
}

#[test]
fn verify_round_trip_and_sabotage() {
    let g = motif("mlp", 51).unwrap();
    let layer = default_watermark_layer(&g).unwrap();
    let key = keygen(&g, layer, 64, 5).unwrap();
    let clean = embed(&g, &key, 2000, 0.05).unwrap();
    let (attacked, _) = attack(
        &clean,
        &AttackConfig {
            ratio: 0.2,
            seed: 4,
            ..AttackConfig::default()
        },
    )
    .unwrap();
    let (recovered, _) =
        recover(&attacked, &RecoveryConfig::default(), &ProbeConfig::default()).unwrap();

    let verdict = verify(
        &clean,
        &attacked,
        &recovered,
        &key,
        &CertificateConfig::default(),
        &Tier2Config::default(),
    )
    .unwrap();
    assert!(verdict.pass);
    assert_eq!(verdict.verdict, "tier1-pass");
    assert_eq!(verdict.sim_recovered_effective, verdict.sim_clean);
    assert!(verdict.attacked_degraded);

    // Sabotage: hand the attacked graph off as the recovery. Tier-1 must
    // fail on the width mismatch and Tier-2 gets evaluated.
    let sabotaged = verify(
        &clean,
        &attacked,
        &attacked,
        &key,
        &CertificateConfig::default(),
        &Tier2Config::default(),
    )
    .unwrap();
    assert!(!sabotaged.tier1.pass);
    assert!(sabotaged.tier2_evaluated);
    assert!(!sabotaged.pass);
}

#[test]
fn verify_trivial_identity_passes() {
    let g = motif("mlp", 53).unwrap();
    let layer = default_watermark_layer(&g).unwrap();
    let key = keygen(&g, layer, 32, 6).unwrap();
    let clean = embed(&g, &key, 2000, 0.05).unwrap();
    let verdict = verify(
        &clean,
        &clean,
        &clean,
        &key,
        &CertificateConfig::default(),
        &Tier2Config::default(),
    )
    .unwrap();
    assert!(verdict.pass);
    assert_eq!(verdict.sim_clean, 1.0);
    assert_eq!(verdict.sim_recovered_raw, 1.0);
}

#[test]
fn verify_validates_tier2_config() {
    let g = motif("mlp", 54).unwrap();
    let layer = default_watermark_layer(&g).unwrap();
    let key = keygen(&g, layer, 8, 6).unwrap();
    let bad = Tier2Config {
        lambda: 0.0,
        delta: 0.02,
    };
    assert!(matches!(
        verify(&g, &g, &g, &key, &CertificateConfig::default(), &bad),
        Err(VerifierError::BadConfig(_))
    ));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// Tier-2 is monotone nondecreasing in r and nonincreasing in lambda.
        #[test]
        fn tier2_monotonicity(
            c in 0.0f64..=1.0,
            a in 0.0f64..=1.0,
            r1 in 0.0f64..=1.0,
            r2 in 0.0f64..=1.0,
            l1 in 0.01f64..=1.0,
            l2 in 0.01f64..=1.0,
            delta in 0.0f64..=0.1,
        ) {
            let (r_lo, r_hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let (l_lo, l_hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let cfg = Tier2Config { lambda: l_hi, delta };
            let lo = tier2_pass(&SimilarityTriplet { clean: c, attacked: a, recovered: r_lo }, &cfg);
            let hi = tier2_pass(&SimilarityTriplet { clean: c, attacked: a, recovered: r_hi }, &cfg);
            prop_assert!(!lo || hi, "raising r broke a pass");

            let strict = tier2_pass(&SimilarityTriplet { clean: c, attacked: a, recovered: r_hi }, &Tier2Config { lambda: l_hi, delta });
            let lax = tier2_pass(&SimilarityTriplet { clean: c, attacked: a, recovered: r_hi }, &Tier2Config { lambda: l_lo, delta });
            prop_assert!(!strict || lax, "lowering lambda broke a pass");
        }
    }
}
