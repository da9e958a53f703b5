use super::{IngestError, Result};

pub const TARGET_HZ: f64 = 500.0;

/// Interpolating cubic spline with not-a-knot end conditions, so any cubic
/// polynomial is reproduced exactly.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    // second derivatives at the knots
    curvature: Vec<f64>,
}

impl CubicSpline {
    /// `knots` must be strictly increasing with at least 4 entries.
    pub fn new(knots: &[f64], values: &[f64]) -> Result<Self> {
        let n = knots.len();
        if n != values.len() {
            return Err(IngestError::Invalid("spline knots and values differ in length".into()));
        }
        if n < 4 {
            return Err(IngestError::InsufficientData(format!(
                "cubic interpolation needs at least 4 samples, got {n}"
            )));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(IngestError::Invalid("spline knots must be strictly increasing".into()));
        }
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let d: Vec<f64> = values.windows(2).zip(&h).map(|(w, hi)| (w[1] - w[0]) / hi).collect();

        // Unknowns M_1..M_{n-2}; M_0 and M_{n-1} are eliminated through the
        // not-a-knot conditions (continuous third derivative at the second
        // and second-to-last knots).
        let m = n - 2;
        let mut sub = vec![0.0; m];
        let mut diag = vec![0.0; m];
        let mut sup = vec![0.0; m];
        let mut rhs = vec![0.0; m];
        for r in 0..m {
            let i = r + 1;
            sub[r] = h[i - 1];
            diag[r] = 2.0 * (h[i - 1] + h[i]);
            sup[r] = h[i];
            rhs[r] = 6.0 * (d[i] - d[i - 1]);
        }
        // M_0 = ((h0 + h1) M_1 - h0 M_2) / h1
        diag[0] += h[0] * (h[0] + h[1]) / h[1];
        sup[0] -= h[0] * h[0] / h[1];
        // M_{n-1} = ((h_{n-3} + h_{n-2}) M_{n-2} - h_{n-2} M_{n-3}) / h_{n-3}
        let (a, b) = (h[n - 3], h[n - 2]);
        diag[m - 1] += b * (a + b) / a;
        sub[m - 1] -= b * b / a;

        let inner = solve_tridiagonal(&sub, &diag, &sup, &rhs);

        let mut curvature = vec![0.0; n];
        curvature[1..n - 1].copy_from_slice(&inner);
        curvature[0] = ((h[0] + h[1]) * curvature[1] - h[0] * curvature[2]) / h[1];
        curvature[n - 1] = ((a + b) * curvature[n - 2] - b * curvature[n - 3]) / a;
        Ok(Self {
            knots: knots.to_vec(),
            values: values.to_vec(),
            curvature,
        })
    }

    /// Evaluates the spline; outside the knot range the end pieces are
    /// extended.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        let seg = match self.knots.partition_point(|k| *k <= x) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        let (x0, x1) = (self.knots[seg], self.knots[seg + 1]);
        let (y0, y1) = (self.values[seg], self.values[seg + 1]);
        let (m0, m1) = (self.curvature[seg], self.curvature[seg + 1]);
        let h = x1 - x0;
        let a = (x1 - x) / h;
        let b = (x - x0) / h;
        a * y0 + b * y1 + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
    }
}

fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i] * c[i - 1];
        c[i] = sup[i] / denom;
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Brings positions sampled at `sampling_hz` onto a uniform 2 ms grid.
///
/// 500 Hz is passed through, integer multiples of 500 Hz are decimated by
/// keeping every k-th sample, anything else is cubic-spline interpolated
/// against timestamps. The interpolated output has `floor(L * 500 / hz)`
/// samples; the last one may extend past the final input timestamp by less
/// than one input period.
pub fn resample_to_500hz(positions: &[(f64, f64)], sampling_hz: f64) -> Result<Vec<(f64, f64)>> {
    if !(sampling_hz > 0.0 && sampling_hz.is_finite()) {
        return Err(IngestError::Invalid(format!("sampling rate must be positive, got {sampling_hz}")));
    }
    if (sampling_hz - TARGET_HZ).abs() < 1e-9 {
        return Ok(positions.to_vec());
    }
    let ratio = sampling_hz / TARGET_HZ;
    if ratio > 1.0 && (ratio - ratio.round()).abs() < 1e-9 {
        let step = ratio.round() as usize;
        return Ok(positions.iter().step_by(step).copied().collect());
    }
    let len = positions.len();
    if len < 4 {
        return Err(IngestError::InsufficientData(format!(
            "resampling {sampling_hz} Hz needs at least 4 samples, got {len}"
        )));
    }
    let knots: Vec<f64> = (0..len).map(|i| i as f64 / sampling_hz).collect();
    let xs: Vec<f64> = positions.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = positions.iter().map(|p| p.1).collect();
    let sx = CubicSpline::new(&knots, &xs)?;
    let sy = CubicSpline::new(&knots, &ys)?;
    let out_len = ((len as f64 * TARGET_HZ / sampling_hz).floor() as usize).max(1);
    Ok((0..out_len)
        .map(|k| {
            let t = k as f64 / TARGET_HZ;
            (sx.eval(t), sy.eval(t))
        })
        .collect())
}
