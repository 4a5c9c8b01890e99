//! The log-space convolution DP against an independent fixed-point
//! big-integer convolution of the b = 4 weights, which are rational:
//! W(k) = 18 / ((k+1)(k+2)(k+3)(k+4)).

use num_bigint::BigUint;
use zrp_core::exact::CanonicalTable;
use zrp_core::ModelParams;

const BITS: u64 = 640;

fn to_ln(x: &BigUint) -> f64 {
    // ln(x / 2^BITS) using the top 64 bits of x
    let len = x.bits();
    let shift = len.saturating_sub(64);
    let top = (x >> shift).iter_u64_digits().next().unwrap_or(0) as f64;
    top.ln() + (shift as f64 - BITS as f64) * std::f64::consts::LN_2
}

fn oracle_rows(l: usize, n: usize) -> Vec<Vec<f64>> {
    let one = BigUint::from(1u8) << BITS;
    let w: Vec<BigUint> = (0..=n as u64)
        .map(|k| (&one * 18u32) / BigUint::from((k + 1) * (k + 2) * (k + 3) * (k + 4)))
        .collect();
    let mut row = w.clone();
    let mut out = vec![row.iter().map(to_ln).collect::<Vec<f64>>()];
    for _ in 1..l {
        let next: Vec<BigUint> = (0..=n)
            .map(|m| (0..=m).map(|k| &w[k] * &row[m - k]).sum::<BigUint>() >> BITS)
            .collect();
        row = next;
        out.push(row.iter().map(to_ln).collect());
    }
    out
}

#[test]
fn dp_rows_match_big_integer_convolution() {
    let p = ModelParams::power_law(4.0).unwrap();
    for (l, n) in [(50, 50), (100, 100), (120, 240)] {
        let t = CanonicalTable::build(p, l, n).unwrap();
        let oracle = oracle_rows(l, n);
        let mut worst = 0.0f64;
        for (i, row) in oracle.iter().enumerate() {
            for (m, &x) in row.iter().enumerate() {
                worst = worst.max((t.log_q(i + 1, m) - x).abs());
            }
        }
        assert!(worst < 1e-12, "L={l} N={n}: max |ln Q_dp - ln Q_oracle| = {worst:e}");
    }
}
