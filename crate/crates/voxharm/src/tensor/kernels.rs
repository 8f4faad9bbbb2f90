//! Raw forward/backward loops behind the tape operations.
//!
//! Convolution is written as 27 shifted-row AXPY passes so the inner loops
//! run over contiguous slices. All reductions accumulate in f64 and results
//! are deterministic: every output element is produced by one sequential
//! loop with a fixed iteration order.

use super::Dim5;

/// Valid destination range along one axis for a kernel shift `delta`:
/// destination index `i` needs `i + delta` inside `0..extent`.
#[inline]
fn shift_range(extent: usize, delta: isize) -> (usize, usize) {
    let lo = (-delta).max(0) as usize;
    let hi = ((extent as isize - delta).min(extent as isize)).max(0) as usize;
    (lo, hi)
}

pub(crate) fn conv3d_forward(x: &[f32], d: Dim5, w: &[f32], bias: &[f32], c_out: usize) -> Vec<f32> {
    let plane = d.h * d.w;
    let vol = d.d * plane;
    let mut out = vec![0.0f32; d.b * c_out * vol];
    for b in 0..d.b {
        for co in 0..c_out {
            let out_base = (b * c_out + co) * vol;
            out[out_base..out_base + vol].fill(bias[co]);
            for ci in 0..d.c {
                let in_base = (b * d.c + ci) * vol;
                let w_base = (co * d.c + ci) * 27;
                for kz in 0..3usize {
                    let dz = kz as isize - 1;
                    let (z0, z1) = shift_range(d.d, dz);
                    for ky in 0..3usize {
                        let dy = ky as isize - 1;
                        let (y0, y1) = shift_range(d.h, dy);
                        for kx in 0..3usize {
                            let dx = kx as isize - 1;
                            let (x0, x1) = shift_range(d.w, dx);
                            if x0 >= x1 || y0 >= y1 || z0 >= z1 {
                                continue;
                            }
                            let wv = w[w_base + (kz * 3 + ky) * 3 + kx];
                            for z in z0..z1 {
                                let sz = (z as isize + dz) as usize;
                                for y in y0..y1 {
                                    let sy = (y as isize + dy) as usize;
                                    let o_row = out_base + z * plane + y * d.w;
                                    let i_row = in_base + sz * plane + sy * d.w;
                                    let sx = (x0 as isize + dx) as usize;
                                    let dst = &mut out[o_row + x0..o_row + x1];
                                    let src = &x[i_row + sx..i_row + sx + (x1 - x0)];
                                    for (o, i) in dst.iter_mut().zip(src) {
                                        *o += wv * i;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    g: &[f32],
    x: &[f32],
    d: Dim5,
    w: &[f32],
    c_out: usize,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let plane = d.h * d.w;
    let vol = d.d * plane;

    let db = want_db.then(|| {
        let mut db = vec![0.0f32; c_out];
        for (co, slot) in db.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for b in 0..d.b {
                let base = (b * c_out + co) * vol;
                for &v in &g[base..base + vol] {
                    acc += v as f64;
                }
            }
            *slot = acc as f32;
        }
        db
    });

    // dx[z,y,x] += w[kz,ky,kx] * g[z - dz, y - dy, x - dx]: the forward pass
    // with every shift negated.
    let dx = want_dx.then(|| {
        let mut dx = vec![0.0f32; d.numel()];
        for b in 0..d.b {
            for ci in 0..d.c {
                let dx_base = (b * d.c + ci) * vol;
                for co in 0..c_out {
                    let g_base = (b * c_out + co) * vol;
                    let w_base = (co * d.c + ci) * 27;
                    for kz in 0..3usize {
                        let dz = 1 - kz as isize;
                        let (z0, z1) = shift_range(d.d, dz);
                        for ky in 0..3usize {
                            let dy = 1 - ky as isize;
                            let (y0, y1) = shift_range(d.h, dy);
                            for kx in 0..3usize {
                                let dxs = 1 - kx as isize;
                                let (x0, x1) = shift_range(d.w, dxs);
                                if x0 >= x1 || y0 >= y1 || z0 >= z1 {
                                    continue;
                                }
                                let wv = w[w_base + (kz * 3 + ky) * 3 + kx];
                                for z in z0..z1 {
                                    let sz = (z as isize + dz) as usize;
                                    for y in y0..y1 {
                                        let sy = (y as isize + dy) as usize;
                                        let d_row = dx_base + z * plane + y * d.w;
                                        let g_row = g_base + sz * plane + sy * d.w;
                                        let sx = (x0 as isize + dxs) as usize;
                                        let dst = &mut dx[d_row + x0..d_row + x1];
                                        let src = &g[g_row + sx..g_row + sx + (x1 - x0)];
                                        for (o, i) in dst.iter_mut().zip(src) {
                                            *o += wv * i;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    });

    // dw[co,ci,k] = sum over batch and valid voxels of g[out] * x[out + k - 1].
    let dw = want_dw.then(|| {
        let mut dw = vec![0.0f32; c_out * d.c * 27];
        for co in 0..c_out {
            for ci in 0..d.c {
                let w_base = (co * d.c + ci) * 27;
                for kz in 0..3usize {
                    let dz = kz as isize - 1;
                    let (z0, z1) = shift_range(d.d, dz);
                    for ky in 0..3usize {
                        let dy = ky as isize - 1;
                        let (y0, y1) = shift_range(d.h, dy);
                        for kx in 0..3usize {
                            let dxs = kx as isize - 1;
                            let (x0, x1) = shift_range(d.w, dxs);
                            if x0 >= x1 || y0 >= y1 || z0 >= z1 {
                                continue;
                            }
                            let mut acc = 0.0f64;
                            for b in 0..d.b {
                                let g_base = (b * c_out + co) * vol;
                                let x_base = (b * d.c + ci) * vol;
                                for z in z0..z1 {
                                    let sz = (z as isize + dz) as usize;
                                    for y in y0..y1 {
                                        let sy = (y as isize + dy) as usize;
                                        let g_row = g_base + z * plane + y * d.w;
                                        let x_row = x_base + sz * plane + sy * d.w;
                                        let sx = (x0 as isize + dxs) as usize;
                                        let gs = &g[g_row + x0..g_row + x1];
                                        let xs = &x[x_row + sx..x_row + sx + (x1 - x0)];
                                        let mut row = 0.0f32;
                                        for (gv, xv) in gs.iter().zip(xs) {
                                            row += gv * xv;
                                        }
                                        acc += row as f64;
                                    }
                                }
                            }
                            dw[w_base + (kz * 3 + ky) * 3 + kx] = acc as f32;
                        }
                    }
                }
            }
        }
        dw
    });

    (dx, dw, db)
}

pub(crate) fn maxpool3d_forward(x: &[f32], d: Dim5) -> (Vec<f32>, Vec<u32>) {
    debug_assert!(d.numel() < u32::MAX as usize);
    let plane = d.h * d.w;
    let vol = d.d * plane;
    let (od, oh, ow) = (d.d / 2, d.h / 2, d.w / 2);
    let out_vol = od * oh * ow;
    let mut out = vec![0.0f32; d.b * d.c * out_vol];
    let mut argmax = vec![0u32; out.len()];
    for bc in 0..d.b * d.c {
        let in_base = bc * vol;
        let out_base = bc * out_vol;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dxs in 0..2 {
                                let idx = in_base
                                    + (2 * z + dz) * plane
                                    + (2 * y + dy) * d.w
                                    + (2 * xo + dxs);
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = out_base + (z * oh + y) * ow + xo;
                    out[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn upsample_forward(x: &[f32], d: Dim5) -> Vec<f32> {
    let (od, oh, ow) = (d.d * 2, d.h * 2, d.w * 2);
    let in_plane = d.h * d.w;
    let in_vol = d.d * in_plane;
    let out_vol = od * oh * ow;
    let mut out = vec![0.0f32; d.b * d.c * out_vol];
    for bc in 0..d.b * d.c {
        let in_base = bc * in_vol;
        let out_base = bc * out_vol;
        for z in 0..od {
            for y in 0..oh {
                let i_row = in_base + (z / 2) * in_plane + (y / 2) * d.w;
                let o_row = out_base + (z * oh + y) * ow;
                for xo in 0..ow {
                    out[o_row + xo] = x[i_row + xo / 2];
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(g: &[f32], d: Dim5) -> Vec<f32> {
    let (od, oh, ow) = (d.d * 2, d.h * 2, d.w * 2);
    let in_plane = d.h * d.w;
    let in_vol = d.d * in_plane;
    let out_vol = od * oh * ow;
    let mut dx = vec![0.0f32; d.numel()];
    for bc in 0..d.b * d.c {
        let in_base = bc * in_vol;
        let out_base = bc * out_vol;
        for z in 0..od {
            for y in 0..oh {
                let i_row = in_base + (z / 2) * in_plane + (y / 2) * d.w;
                let g_row = out_base + (z * oh + y) * ow;
                for xo in 0..ow {
                    dx[i_row + xo / 2] += g[g_row + xo];
                }
            }
        }
    }
    dx
}

pub(crate) fn channel_mean(x: &[f32], d: Dim5) -> Vec<f32> {
    let n = d.spatial();
    (0..d.b * d.c)
        .map(|bc| {
            let base = bc * n;
            let sum: f64 = x[base..base + n].iter().map(|&v| v as f64).sum();
            (sum / n as f64) as f32
        })
        .collect()
}

pub(crate) fn channel_mean_std(x: &[f32], d: Dim5, epsilon: f32) -> (Vec<f32>, Vec<f32>) {
    let n = d.spatial();
    let mut means = Vec::with_capacity(d.b * d.c);
    let mut stds = Vec::with_capacity(d.b * d.c);
    for bc in 0..d.b * d.c {
        let base = bc * n;
        let slice = &x[base..base + n];
        let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = slice
            .iter()
            .map(|&v| {
                let diff = v as f64 - mean;
                diff * diff
            })
            .sum::<f64>()
            / n as f64;
        means.push(mean as f32);
        stds.push((var + epsilon as f64).sqrt() as f32);
    }
    (means, stds)
}

pub(crate) fn channel_mean_backward(g: &[f32], d: Dim5) -> Vec<f32> {
    let n = d.spatial();
    let inv = 1.0 / n as f32;
    let mut dx = vec![0.0f32; d.numel()];
    for bc in 0..d.b * d.c {
        let gv = g[bc] * inv;
        for slot in &mut dx[bc * n..(bc + 1) * n] {
            *slot = gv;
        }
    }
    dx
}

/// d std / d x_i = (x_i - mean) / (n * std).
pub(crate) fn channel_std_backward(
    g: &[f32],
    x: &[f32],
    d: Dim5,
    means: &[f32],
    stds: &[f32],
) -> Vec<f32> {
    let n = d.spatial();
    let mut dx = vec![0.0f32; d.numel()];
    for bc in 0..d.b * d.c {
        let scale = g[bc] / (n as f32 * stds[bc]);
        let mean = means[bc];
        let base = bc * n;
        for i in 0..n {
            dx[base + i] = scale * (x[base + i] - mean);
        }
    }
    dx
}

pub(crate) fn channel_broadcast(
    x: &[f32],
    per_channel: &[f32],
    d: Dim5,
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    let n = d.spatial();
    let mut out = Vec::with_capacity(d.numel());
    for bc in 0..d.b * d.c {
        let v = per_channel[bc];
        for &xv in &x[bc * n..(bc + 1) * n] {
            out.push(f(xv, v));
        }
    }
    out
}

/// Sums each (batch, channel) slice → `[b * c]`.
pub(crate) fn channel_reduce(x: &[f32], d: Dim5) -> Vec<f32> {
    let n = d.spatial();
    (0..d.b * d.c)
        .map(|bc| {
            let sum: f64 = x[bc * n..(bc + 1) * n].iter().map(|&v| v as f64).sum();
            sum as f32
        })
        .collect()
}

/// Separable valid-padding mean filter: window sums along x, then y, then z,
/// scaled by 1 / window³ at the end.
pub(crate) fn boxfilter_forward(x: &[f32], d: Dim5, k: usize) -> Vec<f32> {
    let (od, oh, ow) = (d.d - k + 1, d.h - k + 1, d.w - k + 1);
    let scale = 1.0f32 / (k * k * k) as f32;
    let mut out = Vec::with_capacity(d.b * d.c * od * oh * ow);
    let vol = d.d * d.h * d.w;
    let mut tmp_x = vec![0.0f32; d.d * d.h * ow];
    let mut tmp_y = vec![0.0f32; d.d * oh * ow];
    for bc in 0..d.b * d.c {
        let base = bc * vol;
        // x pass
        for z in 0..d.d {
            for y in 0..d.h {
                let row = base + (z * d.h + y) * d.w;
                let trow = (z * d.h + y) * ow;
                for xo in 0..ow {
                    let mut s = 0.0f32;
                    for j in 0..k {
                        s += x[row + xo + j];
                    }
                    tmp_x[trow + xo] = s;
                }
            }
        }
        // y pass
        for z in 0..d.d {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0f32;
                    for j in 0..k {
                        s += tmp_x[(z * d.h + yo + j) * ow + xo];
                    }
                    tmp_y[(z * oh + yo) * ow + xo] = s;
                }
            }
        }
        // z pass
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut s = 0.0f32;
                    for j in 0..k {
                        s += tmp_y[((zo + j) * oh + yo) * ow + xo];
                    }
                    out.push(s * scale);
                }
            }
        }
    }
    out
}

/// Transpose of the mean filter: spreads `g / window³` back over each
/// contributing voxel, one separable pass per axis in reverse order.
pub(crate) fn boxfilter_backward(g: &[f32], d: Dim5, k: usize) -> Vec<f32> {
    let (od, oh, ow) = (d.d - k + 1, d.h - k + 1, d.w - k + 1);
    let scale = 1.0f32 / (k * k * k) as f32;
    let out_vol = od * oh * ow;
    let mut dx = vec![0.0f32; d.numel()];
    let mut tmp_z = vec![0.0f32; d.d * oh * ow];
    let mut tmp_y = vec![0.0f32; d.d * d.h * ow];
    for bc in 0..d.b * d.c {
        let g_base = bc * out_vol;
        // spread along z
        tmp_z.fill(0.0);
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let gv = g[g_base + (zo * oh + yo) * ow + xo] * scale;
                    for j in 0..k {
                        tmp_z[((zo + j) * oh + yo) * ow + xo] += gv;
                    }
                }
            }
        }
        // spread along y
        tmp_y.fill(0.0);
        for z in 0..d.d {
            for yo in 0..oh {
                for xo in 0..ow {
                    let gv = tmp_z[(z * oh + yo) * ow + xo];
                    for j in 0..k {
                        tmp_y[(z * d.h + yo + j) * ow + xo] += gv;
                    }
                }
            }
        }
        // spread along x
        let base = bc * d.d * d.h * d.w;
        for z in 0..d.d {
            for y in 0..d.h {
                for xo in 0..ow {
                    let gv = tmp_y[(z * d.h + y) * ow + xo];
                    let row = base + (z * d.h + y) * d.w;
                    for j in 0..k {
                        dx[row + xo + j] += gv;
                    }
                }
            }
        }
    }
    dx
}
