//! Dense kernels shared by the tape ops. Each has a dispatching entry point
//! (parallel when the `parallel` feature is on) and an always-sequential
//! variant used as the fallback body and by the benches. Parallelism is only
//! over independent output rows; the reduction order for every output element
//! is identical in both modes.

use crate::par;

#[inline]
fn matmul_row(row: &mut [f64], i: usize, a: &[f64], b: &[f64], k: usize, n: usize) {
    row.fill(0.0);
    for p in 0..k {
        let av = a[i * k + p];
        if av == 0.0 {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (c, bv) in row.iter_mut().zip(brow) {
            *c += av * bv;
        }
    }
}

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut c, n, |i, row| matmul_row(row, i, a, b, k, n));
    c
}

/// Sequential [`matmul`], for the fallback path and benches.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    par::for_each_chunk_mut_seq(&mut c, n, |i, row| matmul_row(row, i, a, b, k, n));
    c
}

/// C[m,n] = A[m,k] @ B[n,k]^T  (dot products of rows)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            *cv = s;
        }
    });
    c
}

/// C[m,n] = A[k,m]^T @ B[k,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut c, n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// y[cout, t_out] = conv1d(x[cin, t], w[cout, cin, k]) + b[cout]
/// t_out = (t + 2*pad - k) / stride + 1
pub fn conv1d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    t: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let t_out = conv1d_out_len(t, k, stride, pad);
    let mut y = vec![0.0; cout * t_out];
    par::for_each_chunk_mut(&mut y, t_out, |co, row| {
        conv1d_row(row, co, x, w, b, cin, t, k, stride, pad);
    });
    y
}

/// Sequential [`conv1d`], for the fallback path and benches.
pub fn conv1d_seq(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    t: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let t_out = conv1d_out_len(t, k, stride, pad);
    let mut y = vec![0.0; cout * t_out];
    par::for_each_chunk_mut_seq(&mut y, t_out, |co, row| {
        conv1d_row(row, co, x, w, b, cin, t, k, stride, pad);
    });
    y
}

#[inline]
fn conv1d_row(
    row: &mut [f64],
    co: usize,
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    t: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    for (to, out) in row.iter_mut().enumerate() {
        let mut s = b[co];
        let origin = (to * stride) as isize - pad as isize;
        for ci in 0..cin {
            let wbase = (co * cin + ci) * k;
            let xbase = ci * t;
            for kk in 0..k {
                let ti = origin + kk as isize;
                if ti >= 0 && (ti as usize) < t {
                    s += w[wbase + kk] * x[xbase + ti as usize];
                }
            }
        }
        *out = s;
    }
}

pub fn conv1d_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad - k) / stride + 1
}

/// Gradients of [`conv1d`] w.r.t. input, weight and bias.
pub fn conv1d_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    cin: usize,
    t: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t_out = conv1d_out_len(t, k, stride, pad);
    // dx: parallel over input channels (each writes its own row).
    let mut dx = vec![0.0; cin * t];
    par::for_each_chunk_mut(&mut dx, t, |ci, dxrow| {
        for co in 0..cout {
            let wbase = (co * cin + ci) * k;
            let grow = &g[co * t_out..(co + 1) * t_out];
            for (to, gv) in grow.iter().enumerate() {
                if *gv == 0.0 {
                    continue;
                }
                let origin = (to * stride) as isize - pad as isize;
                for kk in 0..k {
                    let ti = origin + kk as isize;
                    if ti >= 0 && (ti as usize) < t {
                        dxrow[ti as usize] += gv * w[wbase + kk];
                    }
                }
            }
        }
    });
    // dw: parallel over output channels.
    let mut dw = vec![0.0; cout * cin * k];
    par::for_each_chunk_mut(&mut dw, cin * k, |co, dwslab| {
        let grow = &g[co * t_out..(co + 1) * t_out];
        for ci in 0..cin {
            let xbase = ci * t;
            for kk in 0..k {
                let mut s = 0.0;
                for (to, gv) in grow.iter().enumerate() {
                    let ti = (to * stride) as isize - pad as isize + kk as isize;
                    if ti >= 0 && (ti as usize) < t {
                        s += gv * x[xbase + ti as usize];
                    }
                }
                dwslab[ci * k + kk] = s;
            }
        }
    });
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        db[co] = g[co * t_out..(co + 1) * t_out].iter().sum();
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul_seq(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let m = 5;
        let k = 7;
        let n = 3;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        // A @ B == A @ (B^T)^T via matmul_nt with b transposed
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let c_nt = matmul_nt(&a, &bt, m, k, n);
        // and via matmul_tn with a transposed
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let c_tn = matmul_tn(&at, &b, m, k, n);
        for i in 0..m * n {
            assert!((c[i] - c_nt[i]).abs() < 1e-12);
            assert!((c[i] - c_tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_known_values() {
        // cin=1, t=4, cout=1, k=3, stride=1, pad=1, identity-ish kernel
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let w = vec![0.0, 1.0, 0.0];
        let b = vec![0.5];
        let y = conv1d(&x, &w, &b, 1, 4, 1, 3, 1, 1);
        assert_eq!(y, vec![1.5, 2.5, 3.5, 4.5]);
        // stride 2 with k=3 pad=1 gives ceil(t/2) outputs
        let y2 = conv1d(&x, &w, &b, 1, 4, 1, 3, 2, 1);
        assert_eq!(y2.len(), 2);
    }

    #[test]
    fn conv_out_len_ceil_behaviour() {
        // k=3, stride=2, pad=1 downsamples t -> ceil(t/2) for any t
        for t in 1..50 {
            assert_eq!(conv1d_out_len(t, 3, 2, 1), t.div_ceil(2));
        }
    }
}
