//! Dense loops shared by the tape and the inference paths. All reductions run
//! left to right so results are reproducible bit for bit.

use alloc::vec;
use alloc::vec::Vec;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `a: [m, k] · b: [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a: [m, k] · b: [n, k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a: [k, m]ᵀ · b: [k, n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn sum(a: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in a {
        acc += x;
    }
    acc
}

pub fn max(a: &[f64]) -> f64 {
    a.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn log_sum_exp(a: &[f64]) -> f64 {
    let m = max(a);
    if !m.is_finite() {
        return m;
    }
    let mut s = 0.0;
    for x in a {
        s += libm::exp(x - m);
    }
    m + libm::log(s)
}

/// Max-shifted softmax over a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = max(row);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - m);
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Mean and `1 / sqrt(var + eps)` of a row (population variance).
pub fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = sum(row) / n;
    let mut var = 0.0;
    for x in row {
        let d = x - mean;
        var += d * d;
    }
    var /= n;
    (mean, 1.0 / libm::sqrt(var + eps))
}

/// GELU (tanh form) value and derivative.
pub fn gelu(x: f64) -> (f64, f64) {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(inner);
    let value = 0.5 * x * (1.0 + t);
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}
