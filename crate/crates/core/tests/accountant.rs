mod common;

use privseq::accountant::*;
use privseq::sampling::lots_per_epoch;
use rand::Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct OracleRow {
    q: f64,
    sigma: f64,
    order: u32,
    rdp: String,
}

fn oracle_rows() -> Vec<OracleRow> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/oracles/rdp_values.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn matches_high_precision_oracle() {
    let rows = oracle_rows();
    assert_eq!(rows.len(), 9 * default_orders().len());
    let mut worst: f64 = 0.0;
    for row in &rows {
        let got = rdp_single_step(row.q, row.sigma, &[row.order]).unwrap().values[0];
        let want: f64 = row.rdp.parse().unwrap();
        let rel = ((got - want) / want).abs();
        worst = worst.max(rel);
        assert!(rel < 1e-6, "q={} sigma={} order={}: {got} vs {want}", row.q, row.sigma, row.order);
    }
    assert!(worst < 1e-9, "worst relative error {worst}");
}

#[test]
fn spot_value_at_order_32() {
    let row = oracle_rows()
        .into_iter()
        .find(|r| r.q == 0.01 && r.sigma == 4.0 && r.order == 32)
        .unwrap();
    let got = rdp_single_step(0.01, 4.0, &[32]).unwrap().values[0];
    let want: f64 = row.rdp.parse().unwrap();
    assert!(((got - want) / want).abs() < 1e-10);
}

#[test]
fn full_rate_is_the_gaussian_mechanism() {
    let orders = default_orders();
    for sigma in [0.5, 1.0, 3.7, 10.0] {
        let c = rdp_single_step(1.0, sigma, &orders).unwrap();
        for (&a, &v) in orders.iter().zip(&c.values) {
            let want = a as f64 / (2.0 * sigma * sigma);
            assert!(((v - want) / want).abs() <= 1e-12);
        }
    }
}

#[test]
fn closed_form_conversion() {
    let orders = default_orders();
    let (eps, alpha) = to_epsilon(&rdp_single_step(1.0, 5.0, &orders).unwrap(), 1e-5).unwrap();
    let (want, want_alpha) = orders
        .iter()
        .map(|&a| (a as f64 / 50.0 + (1e5f64).ln() / (a as f64 - 1.0), a))
        .fold((f64::INFINITY, 0), |b, c| if c.0 < b.0 { c } else { b });
    assert_eq!(alpha, want_alpha);
    assert!((eps - want).abs() < 1e-12);
}

fn random_point(rng: &mut impl Rng) -> (f64, f64, u64, f64) {
    let q = 10f64.powf(rng.random_range(-3.5..0.0));
    let sigma = rng.random_range(0.4..8.0);
    let t = rng.random_range(1..5000);
    let delta = 10f64.powf(rng.random_range(-10.0..-3.0));
    (q, sigma, t, delta)
}

#[test]
fn epsilon_is_monotone() {
    let orders = default_orders();
    let mut rng = common::rng(77);
    let eps = |q: f64, s: f64, t: u64, d: f64| epsilon_for(q, s, t, d, &orders).unwrap();
    for _ in 0..100 {
        let (q, s, t, d) = random_point(&mut rng);
        let base = eps(q, s, t, d);
        assert!(eps(q, s, t + 1 + t / 3, d) >= base, "T at {q} {s} {t} {d}");
        assert!(eps((q * 1.3).min(1.0), s, t, d) >= base, "q at {q} {s} {t} {d}");
        assert!(eps(q, s * 1.2, t, d) <= base, "sigma at {q} {s} {t} {d}");
        assert!(eps(q, s, t, d * 5.0) <= base, "delta at {q} {s} {t} {d}");
    }
}

#[test]
fn sigma_strictly_lowers_epsilon() {
    let orders = default_orders();
    let a = epsilon_for(0.01, 1.0, 1000, 1e-8, &orders).unwrap();
    let b = epsilon_for(0.01, 1.5, 1000, 1e-8, &orders).unwrap();
    assert!(b < a);
}

#[test]
fn calibration_round_trip() {
    let orders = default_orders();
    // (target, q, T) where the target binds inside the search bracket.
    let cases = [
        (1.0, 0.01, 1000),
        (1.0, 0.064, 240),
        (5.0, 0.05, 500),
        (5.0, 0.128, 390),
        (1000.0, 1.0, 150),
        (1000.0, 0.5, 2000),
    ];
    for (target, q, t) in cases {
        let sigma = calibrate_sigma(target, 1e-8, q, t, &orders).unwrap();
        assert!(sigma > SIGMA_BRACKET.0, "target {target} does not bind at q={q}, T={t}");
        let eps = epsilon_for(q, sigma, t, 1e-8, &orders).unwrap();
        assert!(eps <= target && eps >= 0.99 * target, "target {target}: epsilon {eps} at sigma {sigma}");
    }
}

#[test]
fn loose_target_returns_the_bracket_floor() {
    let sigma = calibrate_sigma(1000.0, 1e-8, 0.01, 100, &default_orders()).unwrap();
    assert_eq!(sigma, SIGMA_BRACKET.0);
}

#[test]
fn more_steps_need_more_noise() {
    let orders = default_orders();
    let mut last = 0.0;
    for t in [10, 100, 1000, 10_000] {
        let s = calibrate_sigma(5.0, 1e-8, 0.01, t, &orders).unwrap();
        assert!(s >= last);
        last = s;
    }
}

#[test]
fn budget_scale_calibration_is_confirmed_forward() {
    let n = 2000;
    let lot = 1;
    let q = lot as f64 / n as f64;
    let t = 25 * lots_per_epoch(n, lot) as u64;
    let orders = default_orders();
    let sigma = calibrate_sigma(5.0, 1e-8, q, t, &orders).unwrap();
    let forward = epsilon_for(q, sigma, t, 1e-8, &orders).unwrap();
    assert!(forward <= 5.0 && forward >= 0.99 * 5.0);
}

#[test]
fn accountant_matches_composition() {
    let orders = default_orders();
    let mut acc = Accountant::new(0.02, 1.3, 1e-8, &orders).unwrap();
    for _ in 0..250 {
        acc.record_step();
    }
    let single = rdp_single_step(0.02, 1.3, &orders).unwrap();
    assert_eq!(acc.epsilon(), to_epsilon(&compose(&single, 250), 1e-8).unwrap());
}
