//! Quadrature rules on a delay window `[a, b]`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuadratureKind {
    /// Left-endpoint rectangles.
    Rectangles,
    /// Composite trapezoid on a uniform grid including both endpoints.
    Trapezoid,
    /// Chebyshev-Lobatto nodes with Clenshaw-Curtis weights.
    ClenshawCurtis,
}

impl QuadratureKind {
    pub const ALL: [QuadratureKind; 3] = [
        QuadratureKind::Rectangles,
        QuadratureKind::Trapezoid,
        QuadratureKind::ClenshawCurtis,
    ];

    pub fn min_nodes(self) -> usize {
        match self {
            QuadratureKind::Rectangles => 1,
            QuadratureKind::Trapezoid | QuadratureKind::ClenshawCurtis => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuadratureKind::Rectangles => "rectangles",
            QuadratureKind::Trapezoid => "trapezoid",
            QuadratureKind::ClenshawCurtis => "clenshaw-curtis",
        }
    }
}

impl fmt::Display for QuadratureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuadratureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangles" => Ok(QuadratureKind::Rectangles),
            "trapezoid" => Ok(QuadratureKind::Trapezoid),
            "clenshaw-curtis" => Ok(QuadratureKind::ClenshawCurtis),
            other => Err(Error::InvalidRule(format!(
                "unknown quadrature `{other}` (expected rectangles|trapezoid|clenshaw-curtis)"
            ))),
        }
    }
}

/// Nodes (ascending) and weights approximating `∫_a^b f(σ) dσ ≈ Σ w_k f(σ_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    kind: QuadratureKind,
    a: f64,
    b: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(kind: QuadratureKind, k: usize, a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::InvalidRule(format!("window [{a}, {b}] must satisfy a < b")));
        }
        if k < kind.min_nodes() {
            return Err(Error::InvalidRule(format!(
                "{kind} needs at least {} nodes, got {k}",
                kind.min_nodes()
            )));
        }
        let (nodes, weights) = match kind {
            QuadratureKind::Rectangles => {
                let h = (b - a) / k as f64;
                ((0..k).map(|i| a + i as f64 * h).collect(), vec![h; k])
            }
            QuadratureKind::Trapezoid => {
                let h = (b - a) / (k - 1) as f64;
                let nodes = (0..k)
                    .map(|i| if i == k - 1 { b } else { a + i as f64 * h })
                    .collect();
                let mut weights = vec![h; k];
                weights[0] = 0.5 * h;
                weights[k - 1] = 0.5 * h;
                (nodes, weights)
            }
            QuadratureKind::ClenshawCurtis => clenshaw_curtis(k, a, b),
        };
        Ok(Self { kind, a, b, nodes, weights })
    }

    pub fn kind(&self) -> QuadratureKind {
        self.kind
    }

    pub fn lower(&self) -> f64 {
        self.a
    }

    pub fn upper(&self) -> f64 {
        self.b
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, samples: &[f64]) -> Result<f64> {
        if samples.len() != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: samples.len() });
        }
        Ok(self.weights.iter().zip(samples).map(|(w, s)| w * s).sum())
    }

    /// Column-wise integration of a `K × c` sample matrix.
    pub fn integrate_columns(&self, samples: &DMatrix<f64>) -> Result<DVector<f64>> {
        if samples.nrows() != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: samples.nrows() });
        }
        Ok(samples.transpose() * DVector::from_column_slice(&self.weights))
    }

    /// Applies the rule to a function evaluated at the nodes.
    pub fn apply(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&s, w)| w * f(s)).sum()
    }
}

/// Direct O(K²) evaluation of the cosine-series weights.
fn clenshaw_curtis(k: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let n = k - 1;
    let nf = n as f64;
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut nodes = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    // Native ordering runs from cos(0)=1 down to cos(π)=-1; walk it backwards.
    for j in (0..=n).rev() {
        let theta = j as f64 * PI / nf;
        let mut s = 1.0;
        for m in 1..=n / 2 {
            let bm = if 2 * m == n { 1.0 } else { 2.0 };
            s -= bm / (4.0 * (m * m) as f64 - 1.0) * (2.0 * m as f64 * theta).cos();
        }
        let c = if j == 0 || j == n { 1.0 } else { 2.0 };
        let x = if 2 * j == n { 0.0 } else { theta.cos() };
        nodes.push(mid + half * x);
        weights.push(half * c * s / nf);
    }
    nodes[0] = a;
    nodes[n] = b;
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn trapezoid_three_nodes() {
        let r = QuadratureRule::new(QuadratureKind::Trapezoid, 3, 0.0, 1.0).unwrap();
        assert_eq!(r.nodes(), &[0.0, 0.5, 1.0]);
        assert_eq!(r.weights(), &[0.25, 0.5, 0.25]);
    }

    #[test]
    fn left_rectangles() {
        let r = QuadratureRule::new(QuadratureKind::Rectangles, 2, -3.0, -1.0).unwrap();
        assert_eq!(r.nodes(), &[-3.0, -2.0]);
        assert_eq!(r.weights(), &[1.0, 1.0]);
    }

    /// Weights obtained by solving Σw = 2, Σwσ = 0, Σwσ² = 2/3 on nodes (−1, 0, 1).
    #[test]
    fn clenshaw_curtis_three_nodes() {
        let r = QuadratureRule::new(QuadratureKind::ClenshawCurtis, 3, -1.0, 1.0).unwrap();
        assert_eq!(r.nodes(), &[-1.0, 0.0, 1.0]);
        for (w, e) in r.weights().iter().zip([1.0 / 3.0, 4.0 / 3.0, 1.0 / 3.0]) {
            assert_relative_eq!(*w, e, epsilon = 1e-15);
        }
    }

    #[test]
    fn integrate_affine_and_quartic() {
        let r = QuadratureRule::new(QuadratureKind::Trapezoid, 3, 0.0, 1.0).unwrap();
        assert_eq!(r.integrate(&[0.0, 0.5, 1.0]).unwrap(), 0.5);
        let cc = QuadratureRule::new(QuadratureKind::ClenshawCurtis, 5, -1.0, 1.0).unwrap();
        assert_relative_eq!(cc.apply(|s| s.powi(4)), 0.4, epsilon = 1e-14);
    }

    #[test]
    fn integrate_rejects_length_mismatch() {
        let r = QuadratureRule::new(QuadratureKind::Trapezoid, 3, 0.0, 1.0).unwrap();
        assert!(matches!(r.integrate(&[1.0, 2.0]), Err(Error::LengthMismatch { expected: 3, got: 2 })));
    }

    #[test]
    fn integrate_columns_matches_scalar() {
        let r = QuadratureRule::new(QuadratureKind::ClenshawCurtis, 4, -2.0, 0.5).unwrap();
        let samples = DMatrix::from_fn(4, 2, |i, j| r.nodes()[i].powi(j as i32 + 1));
        let cols = r.integrate_columns(&samples).unwrap();
        assert_relative_eq!(cols[0], r.apply(|s| s), epsilon = 1e-14);
        assert_relative_eq!(cols[1], r.apply(|s| s * s), epsilon = 1e-14);
    }

    #[test]
    fn invalid_rules() {
        assert!(QuadratureRule::new(QuadratureKind::Trapezoid, 1, 0.0, 1.0).is_err());
        assert!(QuadratureRule::new(QuadratureKind::ClenshawCurtis, 1, 0.0, 1.0).is_err());
        assert!(QuadratureRule::new(QuadratureKind::Rectangles, 0, 0.0, 1.0).is_err());
        assert!(QuadratureRule::new(QuadratureKind::Rectangles, 3, 1.0, 1.0).is_err());
        assert!(QuadratureRule::new(QuadratureKind::Rectangles, 3, 2.0, 1.0).is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in QuadratureKind::ALL {
            assert_eq!(kind.as_str().parse::<QuadratureKind>().unwrap(), kind);
        }
        assert!("gauss".parse::<QuadratureKind>().is_err());
    }

    fn monomial_integral(p: i32, a: f64, b: f64) -> f64 {
        (b.powi(p + 1) - a.powi(p + 1)) / (p + 1) as f64
    }

    #[test]
    fn convergence_on_exponential() {
        let exact = (-1.0f64).exp() - (-3.0f64).exp();
        for kind in [QuadratureKind::Trapezoid, QuadratureKind::ClenshawCurtis] {
            let mut prev = f64::INFINITY;
            for k in [4, 8, 16, 32, 64, 128] {
                let r = QuadratureRule::new(kind, k, -3.0, -1.0).unwrap();
                let err = (r.apply(f64::exp) - exact).abs();
                assert!(err < prev || err < 1e-15, "{kind} K={k}: {err} !< {prev}");
                prev = err;
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn kind() -> impl Strategy<Value = QuadratureKind> {
            prop::sample::select(QuadratureKind::ALL.to_vec())
        }

        proptest! {
            #[test]
            fn weights_sum_to_length(kind in kind(), k in 2usize..80, a in -20.0f64..0.0, len in 0.1f64..15.0) {
                let b = a + len;
                let r = QuadratureRule::new(kind, k, a, b).unwrap();
                let sum: f64 = r.weights().iter().sum();
                prop_assert!((sum - len).abs() <= 1e-12 * len.max(1.0));
                prop_assert_eq!(r.nodes()[0], a);
                prop_assert!(r.nodes().windows(2).all(|w| w[0] < w[1]));
                prop_assert!(*r.nodes().last().unwrap() <= b);
            }

            #[test]
            fn polynomial_exactness(k in 2usize..24, a in -10.0f64..-1.0, len in 0.2f64..1.0) {
                let b = a + len;
                let rect = QuadratureRule::new(QuadratureKind::Rectangles, k, a, b).unwrap();
                prop_assert!((rect.apply(|_| 1.0) - len).abs() <= 1e-10 * len);
                let trap = QuadratureRule::new(QuadratureKind::Trapezoid, k, a, b).unwrap();
                for p in 0..=1 {
                    let exact = monomial_integral(p, a, b);
                    prop_assert!((trap.apply(|s| s.powi(p)) - exact).abs() <= 1e-10 * exact.abs().max(1.0));
                }
                let cc = QuadratureRule::new(QuadratureKind::ClenshawCurtis, k, a, b).unwrap();
                for p in 0..k as i32 {
                    let exact = monomial_integral(p, a, b);
                    let got = cc.apply(|s| s.powi(p));
                    prop_assert!((got - exact).abs() <= 1e-10 * exact.abs().max(1.0), "p={} got={} exact={}", p, got, exact);
                }
            }

            #[test]
            fn affine_map_covariance(kind in kind(), k in 2usize..40, a in -10.0f64..0.0, len in 0.2f64..6.0) {
                let b = a + len;
                let f = |s: f64| (0.3 * s).sin() + s * s;
                let on_ab = QuadratureRule::new(kind, k, a, b).unwrap().apply(f);
                let ref_rule = QuadratureRule::new(kind, k, -1.0, 1.0).unwrap();
                let mapped = ref_rule.apply(|u| f(0.5 * (a + b) + 0.5 * len * u));
                prop_assert!((on_ab - 0.5 * len * mapped).abs() <= 1e-10 * on_ab.abs().max(1.0));
            }
        }
    }
}
