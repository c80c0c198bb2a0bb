use crate::error::{domain_err, shape_err, Result};
use crate::gradcore::{Tape, Tensor, Var};

pub const KDE_GRID_POINTS: usize = 64;
/// Added to every density value before normalizing, so KL terms stay finite.
pub const KDE_FLOOR: f64 = 1e-8;
const GRID_HALF_WIDTH: f64 = 1.05;
const MIN_BANDWIDTH: f64 = 1e-3;

/// Evaluation grid for index densities: 64 points spanning `[-1.05, 1.05]`.
pub fn kde_grid() -> Vec<f64> {
    let n = KDE_GRID_POINTS;
    (0..n)
        .map(|i| -GRID_HALF_WIDTH + 2.0 * GRID_HALF_WIDTH * i as f64 / (n - 1) as f64)
        .collect()
}

/// Silverman's rule of thumb, floored at `1e-3`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return MIN_BANDWIDTH;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (1.06 * var.sqrt() * (n as f64).powf(-0.2)).max(MIN_BANDWIDTH)
}

/// Gaussian KDE of `samples` (`[N]`) on `grid`, floored and normalized to
/// sum to one. Returns a `[G]` vector.
pub fn kde(tape: &mut Tape, samples: Var, grid: &[f64], bandwidth: f64) -> Result<Var> {
    let n = match tape.shape(samples) {
        [n] if *n > 0 => *n,
        s => return Err(shape_err!("kde expects a non-empty vector, got {s:?}")),
    };
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(domain_err!("kde bandwidth must be positive, got {bandwidth}"));
    }
    let g = grid.len();
    if g == 0 {
        return Err(domain_err!("kde grid is empty"));
    }
    let grid_mat = tape.constant(Tensor::from_fn(&[g, n], |k| grid[k / n]));
    let rows = tape.expand_rows(samples, g)?;
    let diff = tape.sub(grid_mat, rows)?;
    let sq = tape.square(diff)?;
    let z = tape.scale(sq, -0.5 / (bandwidth * bandwidth))?;
    let e = tape.exp(z)?;
    let dens = tape.sum_inner(e)?;
    let floored = tape.add_scalar(dens, KDE_FLOOR)?;
    let total = tape.sum(floored)?;
    let total = tape.reshape(total, &[1])?;
    let total = tape.expand_rows(total, g)?;
    let total = tape.reshape(total, &[g])?;
    tape.div(floored, total)
}

/// `sum p (log p - log q)` for two strictly positive distributions.
pub fn kl_divergence(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    if tape.shape(p) != tape.shape(q) || tape.shape(p).len() != 1 {
        return Err(shape_err!("kl needs equal-length vectors, got {:?} and {:?}", tape.shape(p), tape.shape(q)));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let t = tape.value(v);
        if t.data().iter().any(|x| !(*x > 0.0)) {
            return Err(domain_err!("{name} has non-positive entries"));
        }
        if (t.sum() - 1.0).abs() > 1e-6 {
            return Err(domain_err!("{name} sums to {}, not 1", t.sum()));
        }
    }
    let lp = tape.log(p)?;
    let lq = tape.log(q)?;
    let d = tape.sub(lp, lq)?;
    let w = tape.mul(p, d)?;
    tape.sum(w)
}
