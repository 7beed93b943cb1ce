//! Brute-force continual-learning statistics written straight from their
//! definitions with 1-based indices. Shares no code with the library.

/// `r[i][j]`, 1-based, from a 0-based square grid.
fn at(r: &[Vec<f64>], i: usize, j: usize) -> f64 {
    r[i - 1][j - 1]
}

pub fn aa(r: &[Vec<f64>]) -> f64 {
    let t = r.len();
    let mut total = 0.0;
    for j in 1..=t {
        total += at(r, t, j);
    }
    total / t as f64
}

pub fn bwt(r: &[Vec<f64>]) -> f64 {
    let t = r.len();
    let mut total = 0.0;
    for j in 1..t {
        total += at(r, t, j) - at(r, j, j);
    }
    total / (t - 1) as f64
}

pub fn fwt(r: &[Vec<f64>], b: &[f64]) -> f64 {
    let t = r.len();
    let mut total = 0.0;
    for j in 2..=t {
        total += at(r, j - 1, j) - b[j - 1];
    }
    total / (t - 1) as f64
}

pub fn forgetting(r: &[Vec<f64>]) -> f64 {
    let t = r.len();
    let mut total = 0.0;
    for j in 1..t {
        let mut peak = at(r, j, j);
        for i in j..t {
            if at(r, i, j) > peak {
                peak = at(r, i, j);
            }
        }
        total += peak - at(r, t, j);
    }
    total / (t - 1) as f64
}

pub fn aulc(r: &[Vec<f64>]) -> f64 {
    let t = r.len();
    let mut total = 0.0;
    for i in 1..=t {
        let mut seen = 0.0;
        for j in 1..=i {
            seen += at(r, i, j);
        }
        total += seen / i as f64;
    }
    total / t as f64
}
