use std::f64::consts::PI;

use approx::assert_abs_diff_eq;
use chebtaylor::cheb::{cauchy_conv, clenshaw, convolve, convolve_with, endpoint_sum};
use chebtaylor::{ChebSeries, ConvKernel, Mesh, PeriodicPiecewise, Side};
use proptest::prelude::*;

/// `a_k = (1/pi) int_0^pi f(cos th) cos(k th) dth` by the composite trapezoid rule,
/// which is spectrally accurate for this periodic integrand.
fn quadrature_coeffs(f: impl Fn(f64) -> f64, m: usize) -> Vec<f64> {
    let n = 400;
    (0..m)
        .map(|k| {
            let mut s = 0.0;
            for q in 0..=n {
                let th = PI * q as f64 / n as f64;
                let w = if q == 0 || q == n { 0.5 } else { 1.0 };
                s += w * f(th.cos()) * (k as f64 * th).cos();
            }
            s / n as f64
        })
        .collect()
}

/// Direct enumeration of the two-sided index sums behind the Cauchy product.
fn brute_cauchy(towers: &[Vec<Vec<f64>>], alpha: usize, k: i64) -> f64 {
    fn rec(towers: &[Vec<Vec<f64>>], alpha_left: usize, k_left: i64, acc: f64) -> f64 {
        let Some((first, rest)) = towers.split_first() else {
            return if alpha_left == 0 && k_left == 0 { acc } else { 0.0 };
        };
        let mut s = 0.0;
        for (a, series) in first.iter().enumerate().take(alpha_left + 1) {
            let len = series.len() as i64;
            for kk in -(len - 1)..len {
                let v = series[kk.unsigned_abs() as usize];
                if v != 0.0 {
                    s += rec(rest, alpha_left - a, k_left - kk, acc * v);
                }
            }
        }
        s
    }
    rec(towers, alpha, k, 1.0)
}

#[test]
fn eval_constant_and_t2() {
    assert_eq!(ChebSeries::new(vec![1.0, 0.0, 0.0]).eval(0.7).unwrap(), 1.0);
    let th = PI / 5.0;
    let v = ChebSeries::new(vec![0.0, 0.0, 0.5]).eval(th.cos()).unwrap();
    assert_abs_diff_eq!(v, (2.0 * th).cos(), epsilon = 1e-15);
}

#[test]
fn eval_rejects_extrapolation() {
    assert!(ChebSeries::new(vec![1.0, 2.0]).eval(1.0 + 1e-9).is_err());
    assert!(ChebSeries::new(vec![1.0, 2.0]).eval(f64::NAN).is_err());
}

#[test]
fn exp_series_from_quadrature() {
    let a = quadrature_coeffs(f64::exp, 20);
    let s = ChebSeries::new(a.clone());
    assert_abs_diff_eq!(s.eval(0.5).unwrap(), 0.5f64.exp(), epsilon = 1e-12);
    assert_abs_diff_eq!(endpoint_sum(&a, Side::Right), 1f64.exp(), epsilon = 1e-12);
    // Lobatto interpolation converges to the same coefficients.
    let b = ChebSeries::interpolate(f64::exp, 20);
    for (x, y) in a.iter().zip(&b.coeffs) {
        assert_abs_diff_eq!(x, y, epsilon = 1e-13);
    }
}

#[test]
fn endpoint_examples() {
    assert_eq!(endpoint_sum(&[1.0, 0.0, 0.0], Side::Right), 1.0);
    assert_eq!(endpoint_sum(&[0.0, 0.5], Side::Left), -1.0);
}

#[test]
fn convolve_examples() {
    let b = [0.3, -1.2, 0.7, 0.05];
    let p = convolve(&[2.0], &b, 4);
    for (x, y) in p.iter().zip(&b) {
        assert_abs_diff_eq!(*x, 2.0 * y, epsilon = 1e-15);
    }
    assert_eq!(convolve(&[0.0, 0.5], &[0.0, 0.5], 3), vec![0.5, 0.0, 0.25]);
}

#[test]
fn cauchy_single_factor_and_order_zero() {
    let t1: Vec<Vec<f64>> = vec![vec![1.0, 0.2], vec![0.3, -0.1, 0.4]];
    assert_eq!(cauchy_conv(&[&t1], 1, 3).unwrap(), vec![0.3, -0.1, 0.4]);
    let t2: Vec<Vec<f64>> = vec![vec![0.5, 0.25, -0.5]];
    let c = cauchy_conv(&[&t1, &t2], 0, 4).unwrap();
    assert_eq!(c, convolve(&t1[0], &t2[0], 4));
    assert!(cauchy_conv(&[], 0, 3).is_err());
}

#[test]
fn cauchy_constants_at_order_two_vanish() {
    let c: Vec<Vec<f64>> = vec![vec![1.7]];
    let out = cauchy_conv(&[&c, &c, &c], 2, 4).unwrap();
    let towers = vec![c.clone(), c.clone(), c];
    for (k, v) in out.iter().enumerate() {
        assert_eq!(*v, brute_cauchy(&towers, 2, k as i64));
        assert_eq!(*v, 0.0);
    }
}

#[test]
fn uniform_mesh_proportions_are_exact() {
    for d in [1, 3, 7, 50] {
        let mesh = Mesh::uniform(d, 2.0).unwrap();
        assert!(mesh.proportions().iter().all(|&p| p == 1.0 / d as f64));
    }
    assert!(Mesh::new(vec![0.5, 0.4], 1.0).is_err());
}

#[test]
fn tail_norm_examples() {
    let mesh = Mesh::uniform(2, 1.0).unwrap();
    let mut p = PeriodicPiecewise::zeros(mesh, 3, 4);
    assert_eq!(p.tail_norm(1), 0.0);
    p.piece_mut(1, 2)[3] = 2.5;
    assert_eq!(p.tail_norm(1), 2.5);
    assert_eq!(p.tail_norm(0), 0.0);
}

fn series(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn product_matches_pointwise(a in series(12), b in series(9), ts in prop::collection::vec(-1.0f64..1.0, 50)) {
        let p = convolve(&a, &b, a.len() + b.len() - 1);
        for t in ts {
            prop_assert!((clenshaw(&p, t) - clenshaw(&a, t) * clenshaw(&b, t)).abs() <= 1e-10);
        }
    }

    #[test]
    fn direct_and_transform_products_agree(a in series(32), b in series(32)) {
        let d = convolve_with(&a, &b, 63, ConvKernel::Direct);
        let f = convolve_with(&a, &b, 63, ConvKernel::Fft);
        for (x, y) in d.iter().zip(&f) {
            prop_assert!((x - y).abs() <= 1e-13);
        }
    }

    #[test]
    fn endpoint_sum_is_eval_at_ends(a in series(15)) {
        prop_assert!((endpoint_sum(&a, Side::Right) - clenshaw(&a, 1.0)).abs() <= 1e-13);
        prop_assert!((endpoint_sum(&a, Side::Left) - clenshaw(&a, -1.0)).abs() <= 1e-13);
    }

    #[test]
    fn cauchy_matches_enumeration(
        x in prop::collection::vec(series(4), 3),
        y in prop::collection::vec(series(3), 3),
        z in prop::collection::vec(series(4), 3),
        alpha in 0usize..3,
    ) {
        let towers = vec![x, y, z];
        let refs: Vec<&[Vec<f64>]> = towers.iter().map(|t| t.as_slice()).collect();
        let out = cauchy_conv(&refs, alpha, 6).unwrap();
        for (k, v) in out.iter().enumerate() {
            prop_assert!((v - brute_cauchy(&towers, alpha, k as i64)).abs() <= 1e-12);
        }
    }

    #[test]
    fn cauchy_is_symmetric(
        x in prop::collection::vec(series(5), 3),
        y in prop::collection::vec(series(5), 3),
        z in prop::collection::vec(series(5), 3),
        alpha in 0usize..3,
    ) {
        let a = cauchy_conv(&[&x, &y, &z], alpha, 8).unwrap();
        let b = cauchy_conv(&[&z, &x, &y], alpha, 8).unwrap();
        let c = cauchy_conv(&[&y, &z, &x], alpha, 8).unwrap();
        for k in 0..8 {
            prop_assert!((a[k] - b[k]).abs() <= 1e-13 && (a[k] - c[k]).abs() <= 1e-13);
        }
    }
}
