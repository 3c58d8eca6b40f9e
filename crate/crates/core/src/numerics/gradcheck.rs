use crate::error::Result;
use crate::numerics::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the gradient returned by `f` at `x` against
/// `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` on every coordinate.
///
/// `f` returns the value and its analytic gradient (same shape as `x`).
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, eps, &all)
}

/// As [`finite_diff_check`], restricted to the listed flat coordinates.
pub fn finite_diff_check_at<F>(mut f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    assert!(eps > 0.0, "eps must be positive");
    let (_, grad) = f(x)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grad.data()[i];
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Derivative estimate with its extrapolation error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Derivative {
    pub value: f64,
    pub error: f64,
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_TABLE: usize = 10;

/// Ridders' extrapolation of central differences for every output of `f`.
///
/// Central differences at steps `h, h/1.4, h/1.4², …` are extrapolated to
/// zero step; each output keeps the tableau entry with the smallest error
/// estimate. Stops once every output's estimate has stopped improving.
pub fn ridders<F>(mut f: F, x: f64, h: f64) -> Result<Vec<Derivative>>
where
    F: FnMut(f64) -> Result<Vec<f64>>,
{
    assert!(h > 0.0, "step must be positive");
    let mut central = |hh: f64| -> Result<Vec<f64>> {
        let plus = f(x + hh)?;
        let minus = f(x - hh)?;
        Ok(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * hh)).collect())
    };
    let first = central(h)?;
    let n = first.len();
    let mut best: Vec<Derivative> = first.iter().map(|&v| Derivative { value: v, error: f64::MAX }).collect();
    let mut done = vec![false; n];
    // prev[k][j]: j-th extrapolation of output k at the previous step.
    let mut prev: Vec<Vec<f64>> = first.iter().map(|&v| vec![v]).collect();
    let mut hh = h;
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    for i in 1..RIDDERS_TABLE {
        hh /= RIDDERS_SHRINK;
        let d = central(hh)?;
        for k in 0..n {
            let mut cur = Vec::with_capacity(i + 1);
            cur.push(d[k]);
            let mut fac = c2;
            for j in 1..=i {
                let v = (cur[j - 1] * fac - prev[k][j - 1]) / (fac - 1.0);
                fac *= c2;
                let err = (v - cur[j - 1]).abs().max((v - prev[k][j - 1]).abs());
                if !done[k] && err <= best[k].error {
                    best[k] = Derivative { value: v, error: err };
                }
                cur.push(v);
            }
            if (cur[i] - prev[k][i - 1]).abs() >= 2.0 * best[k].error {
                done[k] = true;
            }
            prev[k] = cur;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(best)
}
