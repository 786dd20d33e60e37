//! Gauss-Legendre rules and bilinear shape functions on the parent square.

/// Node `(xi, eta)` coordinates of the four element corners, counter-clockwise
/// from the lower-left.
pub const NODE_COORDS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];

/// Gauss-Legendre points and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> Vec<(f64, f64)> {
    assert!(order >= 1, "quadrature order must be positive");
    let n = order;
    let mut rule = Vec::with_capacity(n);
    for k in 0..n {
        // Chebyshev-like starting guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.push((x, w));
    }
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule
}

/// `(P_n(x), P_n'(x))` via the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Shape function values at `(xi, eta)`.
pub fn shape(xi: f64, eta: f64) -> [f64; 4] {
    NODE_COORDS.map(|(a, b)| 0.25 * (1.0 + a * xi) * (1.0 + b * eta))
}

/// `(dN/dxi, dN/deta)` at `(xi, eta)`.
pub fn shape_derivatives(xi: f64, eta: f64) -> ([f64; 4], [f64; 4]) {
    let dxi = NODE_COORDS.map(|(a, b)| 0.25 * a * (1.0 + b * eta));
    let deta = NODE_COORDS.map(|(a, b)| 0.25 * b * (1.0 + a * xi));
    (dxi, deta)
}

/// Tensor-product rule on the parent square: `(xi, eta, weight)`.
pub fn square_rule(order: usize) -> Vec<(f64, f64, f64)> {
    let line = gauss_legendre(order);
    let mut out = Vec::with_capacity(order * order);
    for &(x, wx) in &line {
        for &(y, wy) in &line {
            out.push((x, y, wx * wy));
        }
    }
    out
}
