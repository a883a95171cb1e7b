//! Panel quadrature helpers.
//!
//! All momentum-space integrals in the crate share the same pattern: smooth
//! integrands with a near-singularity at the origin controlled by a small
//! parameter. They are computed with fixed-order Gauss-Legendre rules on
//! dyadically refined panels, and verified by mesh halving.

/// Nodes and weights of the n-point Gauss-Legendre rule on (-1, 1).
///
/// Computed by Newton iteration on the Legendre polynomial; accurate to
/// machine precision for the orders used here (n <= 64).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1 && n <= 64, "rule order out of supported range");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // evaluate P_n and P_n' by the three-term recurrence
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let dpn = if n == 1 {
                1.0
            } else {
                n as f64 * (x * p1 - p0) / (x * x - 1.0)
            };
            let dx = pn / dpn;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=n {
            let kf = k as f64;
            let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
            p0 = p1;
            p1 = p2;
        }
        let dpn = if n == 1 { 1.0 } else { n as f64 * (x * p1 - p0) / (x * x - 1.0) };
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dpn * dpn);
    }
    // Newton starts from decreasing cosines; flip to ascending order.
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

/// Reusable fixed-order rule.
#[derive(Debug, Clone)]
pub struct GaussRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussRule {
    pub fn new(order: usize) -> Self {
        let (nodes, weights) = gauss_legendre(order);
        GaussRule { nodes, weights }
    }

    /// Integral of `f` over the single panel [a, b].
    pub fn panel<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }

    /// Integral over the union of consecutive panels given by `edges`
    /// (ascending).
    pub fn panels<F: FnMut(f64) -> f64>(&self, edges: &[f64], mut f: F) -> f64 {
        let mut acc = 0.0;
        for w in edges.windows(2) {
            acc += self.panel(w[0], w[1], &mut f);
        }
        acc
    }
}

/// Ascending panel edges on [0, upper], halving from `upper` down to `floor`
/// and closing with a final panel [0, last].
///
/// Resolves integrands whose curvature concentrates at 0 on the scale
/// `floor`.
pub fn dyadic_edges(upper: f64, floor: f64) -> Vec<f64> {
    assert!(upper > 0.0 && floor > 0.0 && floor < upper);
    let mut rev = vec![upper];
    let mut e = upper;
    while e > floor {
        e *= 0.5;
        rev.push(e);
    }
    rev.push(0.0);
    rev.reverse();
    rev
}

/// Integrates over `edges`, then again with every panel halved, and returns
/// `(refined_value, |refined - coarse|)`. The discrepancy is the mesh
/// convergence estimate callers assert on.
pub fn integrate_checked<F: FnMut(f64) -> f64>(
    rule: &GaussRule,
    edges: &[f64],
    mut f: F,
) -> (f64, f64) {
    let coarse = rule.panels(edges, &mut f);
    let mut fine_edges = Vec::with_capacity(edges.len() * 2);
    for w in edges.windows(2) {
        fine_edges.push(w[0]);
        fine_edges.push(0.5 * (w[0] + w[1]));
    }
    fine_edges.push(*edges.last().unwrap());
    let fine = rule.panels(&fine_edges, &mut f);
    (fine, (fine - coarse).abs())
}
