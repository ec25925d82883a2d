use proptest::prelude::*;
use ramp_core::geometry::{lp_norm, project, project_ball_box, project_l1, project_l2, project_linf};
use ramp_core::{AttackNorm, Bounds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Projection onto the ℓ1 ball by enumerating every orthant and every
/// support inside it: on a fixed support S and sign pattern s the nearest
/// point of the face `Σ s_i y_i = eps` is `y_S = v_S − θ s_S` with a common
/// shift θ, so the minimizer over all feasible candidates is the projection.
fn l1_oracle(v: &[f64], eps: f64) -> Vec<f64> {
    if v.iter().map(|x| x.abs()).sum::<f64>() <= eps {
        return v.to_vec();
    }
    let d = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for signs in 0u32..(1 << d) {
        let s: Vec<f64> = (0..d).map(|i| if signs >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
        for support in 1u32..(1 << d) {
            let idx: Vec<usize> = (0..d).filter(|&i| support >> i & 1 == 1).collect();
            let theta = (idx.iter().map(|&i| s[i] * v[i]).sum::<f64>() - eps) / idx.len() as f64;
            let mut y = vec![0.0; d];
            for &i in &idx {
                y[i] = v[i] - theta * s[i];
            }
            if idx.iter().any(|&i| s[i] * y[i] < -1e-12) {
                continue;
            }
            let dist = sq_dist(&y, v);
            if best.as_ref().is_none_or(|(b, _)| dist < *b) {
                best = Some((dist, y));
            }
        }
    }
    best.expect("some face is feasible").1
}

fn l2_oracle(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let r = n.min(eps);
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n * r).collect()
}

fn linf_oracle(v: &[f64], eps: f64) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            if x > eps {
                eps
            } else if x < -eps {
                -eps
            } else {
                x
            }
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn thousand_random_cases_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let d = rng.random_range(1..=5);
        let scale = [0.1, 1.0, 10.0][case % 3];
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-scale..scale)).collect();
        let eps = rng.random_range(0.01..2.0);
        let cases = [
            (project_l1(&v, eps), l1_oracle(&v, eps)),
            (project_l2(&v, eps), l2_oracle(&v, eps)),
            (project_linf(&v, eps), linf_oracle(&v, eps)),
        ];
        for (got, want) in cases {
            assert!(
                max_abs_diff(&got, &want) <= 1e-9,
                "case {case}: {v:?} eps {eps}: {got:?} vs {want:?}"
            );
        }
    }
}

#[test]
fn l1_oracle_agrees_on_two_dimensional_grid() {
    for i in 0..72 {
        let t = i as f64 * std::f64::consts::TAU / 72.0;
        for r in [0.5, 1.0, 3.0] {
            let v = [r * t.cos(), r * t.sin()];
            assert!(max_abs_diff(&project_l1(&v, 1.0), &l1_oracle(&v, 1.0)) <= 1e-12);
        }
    }
}

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..12)
}

proptest! {
    #[test]
    fn projections_are_idempotent(v in vector(), eps in 0.01f64..3.0) {
        for norm in AttackNorm::ALL {
            let p = project(&v, norm, eps);
            prop_assert_eq!(project(&p, norm, eps), p.clone());
        }
    }

    #[test]
    fn projections_are_feasible(v in vector(), eps in 0.01f64..3.0) {
        for norm in AttackNorm::ALL {
            let p = project(&v, norm, eps);
            prop_assert!(lp_norm(&p, norm) <= eps * (1.0 + 1e-12));
        }
    }

    #[test]
    fn projections_are_nonexpansive(pair in (1usize..10).prop_flat_map(|d| {
        (prop::collection::vec(-5.0f64..5.0, d), prop::collection::vec(-5.0f64..5.0, d))
    }), eps in 0.01f64..3.0) {
        let (a, b) = pair;
        for norm in AttackNorm::ALL {
            let (pa, pb) = (project(&a, norm, eps), project(&b, norm, eps));
            prop_assert!(sq_dist(&pa, &pb).sqrt() <= sq_dist(&a, &b).sqrt() + 1e-12);
        }
    }

    #[test]
    fn ball_box_output_is_feasible(
        pts in (1usize..10).prop_flat_map(|d| {
            (prop::collection::vec(0.0f64..1.0, d), prop::collection::vec(-1.0f64..2.0, d))
        }),
        eps in 0.01f64..2.0,
    ) {
        let (center, x) = pts;
        for norm in AttackNorm::ALL {
            let y = project_ball_box(&x, &center, norm, eps, Bounds::UNIT);
            let delta: Vec<f64> = y.iter().zip(&center).map(|(a, c)| a - c).collect();
            prop_assert!(lp_norm(&delta, norm) <= eps * (1.0 + 1e-9));
            prop_assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
