use conffilter_core::qr::{basis_interpolator, pinball_loss, solve_pinball_qr, FeatureMatrix, LevelVector};
use proptest::prelude::*;

fn objective(rows: &[Vec<f64>], scores: &[f64], levels: &[f64], beta: &[f64]) -> f64 {
    rows.iter()
        .zip(scores)
        .zip(levels)
        .map(|((r, s), a)| {
            let fit: f64 = r.iter().zip(beta).map(|(x, b)| x * b).sum();
            pinball_loss(s - fit, *a)
        })
        .sum()
}

fn subsets(n: usize, d: usize) -> Vec<Vec<usize>> {
    if d == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for mut rest in subsets(n, d - 1) {
            if rest.iter().all(|&r| r > first) {
                rest.insert(0, first);
                out.push(rest);
            }
        }
    }
    out
}

/// Best interpolating vertex over every `d`-subset of observations.
fn vertex_enumeration(rows: &[Vec<f64>], scores: &[f64], levels: &[f64]) -> f64 {
    let d = rows[0].len();
    subsets(rows.len(), d)
        .into_iter()
        .filter_map(|b| {
            let fb: Vec<Vec<f64>> = b.iter().map(|&i| rows[i].clone()).collect();
            let sb: Vec<f64> = b.iter().map(|&i| scores[i]).collect();
            basis_interpolator(&fb, &sb).ok()
        })
        .map(|beta| objective(rows, scores, levels, &beta))
        .fold(f64::INFINITY, f64::min)
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    (1usize..=3, 4usize..=9).prop_flat_map(|(d, n)| {
        let n = n.max(d + 1);
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d - 1), n),
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(0.05f64..0.95, n),
        )
            .prop_map(|(xs, s, a)| {
                let rows = xs
                    .into_iter()
                    .map(|mut r| {
                        r.insert(0, 1.0);
                        r
                    })
                    .collect();
                (rows, s, a)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn objective_matches_vertex_enumeration((rows, scores, levels) in instance()) {
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let lv = LevelVector::new(levels.clone()).unwrap();
        let sol = solve_pinball_qr(&f, &scores, &lv).unwrap();
        let best = vertex_enumeration(&rows, &scores, &levels);
        prop_assert!((sol.objective - best).abs() <= 1e-9 * (1.0 + best.abs()),
            "solver {} vs enumeration {}", sol.objective, best);
    }

    #[test]
    fn dual_certificate_holds((rows, scores, levels) in instance()) {
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let lv = LevelVector::new(levels.clone()).unwrap();
        let sol = solve_pinball_qr(&f, &scores, &lv).unwrap();
        let d = rows[0].len();
        // stationarity Φᵀη = 0
        for c in 0..d {
            let s: f64 = rows.iter().zip(&sol.duals).map(|(r, e)| r[c] * e).sum();
            prop_assert!(s.abs() <= 1e-9, "column {c}: {s}");
        }
        for (i, ((r, s), a)) in rows.iter().zip(&scores).zip(&levels).enumerate() {
            let e = sol.duals[i];
            prop_assert!(e >= -a - 1e-12 && e <= 1.0 - a + 1e-12);
            let fit: f64 = r.iter().zip(&sol.beta).map(|(x, b)| x * b).sum();
            let res = s - fit;
            if res > 1e-9 { prop_assert!((e - (1.0 - a)).abs() <= 1e-12); }
            if res < -1e-9 { prop_assert!((e + a).abs() <= 1e-12); }
        }
        // strong duality
        let dual_obj: f64 = sol.duals.iter().zip(&scores).map(|(e, s)| e * s).sum();
        prop_assert!((dual_obj - sol.objective).abs() <= 1e-9 * (1.0 + sol.objective.abs()));
        // basis rows are interpolated
        for &i in &sol.basis {
            let fit: f64 = rows[i].iter().zip(&sol.beta).map(|(x, b)| x * b).sum();
            prop_assert!((fit - scores[i]).abs() <= 1e-9 * (1.0 + scores[i].abs()));
        }
    }

    #[test]
    fn affine_equivariance((rows, scores, levels) in instance(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let f = FeatureMatrix::from_rows(&rows).unwrap();
        let lv = LevelVector::new(levels).unwrap();
        let base = solve_pinball_qr(&f, &scores, &lv).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let sol = solve_pinball_qr(&f, &moved, &lv).unwrap();
        prop_assert!((sol.objective - a * base.objective).abs() <= 1e-8 * (1.0 + a * base.objective));
    }
}

#[test]
fn larger_problem_is_fast_and_optimal() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let n = 2000;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![1.0, rng.gen_range(0.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    let scores: Vec<f64> = rows
        .iter()
        .map(|r| 2.0 * r[1] - r[2] + rng.gen_range(-1.0..1.0))
        .collect();
    let f = FeatureMatrix::from_rows(&rows).unwrap();
    let lv = LevelVector::constant(0.1, n).unwrap();
    let t = std::time::Instant::now();
    let sol = solve_pinball_qr(&f, &scores, &lv).unwrap();
    assert!(t.elapsed().as_secs_f64() < 5.0);
    // no coordinate move improves the objective
    for c in 0..3 {
        for h in [1e-4, -1e-4] {
            let mut beta = sol.beta.clone();
            beta[c] += h;
            assert!(objective(&rows, &scores, lv.as_slice(), &beta) >= sol.objective - 1e-9);
        }
    }
}
