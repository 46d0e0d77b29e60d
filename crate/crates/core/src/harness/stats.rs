//! Least-squares line fits.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = intercept + slope * x`. Needs at least two
/// distinct x values.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit {
        intercept,
        slope,
        r_squared,
    })
}

/// Weighted least squares with weights `1 / y^2`, i.e. minimising relative
/// rather than absolute residuals. Suited to sweeps over sizes spanning
/// several orders of magnitude, where timing noise scales with the value.
/// `r_squared` is the weighted coefficient of determination. All `ys` must
/// be positive.
pub fn relative_linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    if xs.len() < 2 || xs.len() != ys.len() || ys.iter().any(|y| *y <= 0.0) {
        return None;
    }
    let ws: Vec<f64> = ys.iter().map(|y| 1.0 / (y * y)).collect();
    let sw: f64 = ws.iter().sum();
    let mx = ws.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>() / sw;
    let my = ws.iter().zip(ys).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = ws.iter().zip(xs).map(|(w, x)| w * (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = ws.iter().zip(xs.iter().zip(ys)).map(|(w, (x, y))| w * (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ws.iter().zip(ys).map(|(w, y)| w * (y - my) * (y - my)).sum();
    let ss_res: f64 = ws
        .iter()
        .zip(xs.iter().zip(ys))
        .map(|(w, (x, y))| {
            let e = y - (intercept + slope * x);
            w * e * e
        })
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit {
        intercept,
        slope,
        r_squared,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}
