//! Pure numeric kernels behind the tape ops.
//!
//! Convolutions lower to im2col + a small GEMM so the hot loops run over
//! contiguous rows. All accumulation is f32 in a fixed order; kernels are
//! branch-identical for identical inputs, which is what makes whole-pipeline
//! reruns bit-identical.

/// `out += a * b` with `a: m x kk`, `b: kk x n`, `out: m x n`, all row-major.
pub fn gemm(m: usize, kk: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * kk);
    debug_assert_eq!(b.len(), kk * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * kk..][..kk];
        let orow = &mut out[i * n..][..n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..][..n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out += a * b^T` with `a: m x kk`, `b: n x kk`, `out: m x n`.
pub fn gemm_nt(m: usize, n: usize, kk: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * kk);
    debug_assert_eq!(b.len(), n * kk);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * kk..][..kk];
        let orow = &mut out[i * n..][..n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * kk..][..kk];
            let mut acc = 0.0f32;
            for p in 0..kk {
                acc += arow[p] * brow[p];
            }
            *o += acc;
        }
    }
}

/// `out += a^T * b` with `a: kk x m`, `b: kk x n`, `out: m x n`.
pub fn gemm_tn(m: usize, n: usize, kk: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), kk * m);
    debug_assert_eq!(b.len(), kk * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..kk {
        let arow = &a[p * m..][..m];
        let brow = &b[p * n..][..n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..][..n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Geometry of one convolution: per-axis kernel and padding, one stride.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub k: [usize; 3],
    pub pad: [usize; 3],
    pub stride: usize,
}

impl ConvGeom {
    /// Output spatial dims, or None when the kernel overhangs the padded input.
    pub fn odims(&self, idims: [usize; 3]) -> Option<[usize; 3]> {
        let mut o = [0usize; 3];
        for ax in 0..3 {
            let padded = idims[ax] + 2 * self.pad[ax];
            if padded < self.k[ax] {
                return None;
            }
            o[ax] = (padded - self.k[ax]) / self.stride + 1;
        }
        Some(o)
    }
}

/// Valid output range along one axis for kernel offset `j`:
/// `i = o*stride + j - pad` must land in `[0, n)`.
fn axis_range(n: usize, o_len: usize, j: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > j { (pad - j + stride - 1) / stride } else { 0 };
    let hi = ((n + pad - j) + stride - 1) / stride;
    (lo.min(o_len), hi.min(o_len))
}

/// Unfold `x` (`cin` channels over `idims`) into a `[cin*K, prod(odims)]` matrix.
pub fn im2col(
    x: &[f32],
    cin: usize,
    idims: [usize; 3],
    geom: ConvGeom,
    odims: [usize; 3],
) -> Vec<f32> {
    let [a, b, g] = idims;
    let [ka, kb, kg] = geom.k;
    let [oa, ob, og] = odims;
    let os = oa * ob * og;
    let s = geom.stride;
    let mut col = vec![0.0f32; cin * ka * kb * kg * os];
    for ci in 0..cin {
        let xc = &x[ci * a * b * g..][..a * b * g];
        for ja in 0..ka {
            let (alo, ahi) = axis_range(a, oa, ja, geom.pad[0], s);
            for jb in 0..kb {
                let (blo, bhi) = axis_range(b, ob, jb, geom.pad[1], s);
                for jg in 0..kg {
                    let (glo, ghi) = axis_range(g, og, jg, geom.pad[2], s);
                    if glo >= ghi {
                        continue;
                    }
                    let row = ((((ci * ka + ja) * kb + jb) * kg + jg) * os) as usize;
                    for ao in alo..ahi {
                        let ai = ao * s + ja - geom.pad[0];
                        for bo in blo..bhi {
                            let bi = bo * s + jb - geom.pad[1];
                            let xbase = (ai * b + bi) * g;
                            let cbase = row + (ao * ob + bo) * og;
                            if s == 1 {
                                let gi0 = glo + jg - geom.pad[2];
                                col[cbase + glo..cbase + ghi]
                                    .copy_from_slice(&xc[xbase + gi0..xbase + gi0 + (ghi - glo)]);
                            } else {
                                for go in glo..ghi {
                                    col[cbase + go] = xc[xbase + go * s + jg - geom.pad[2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the inverse of [`im2col`]: fold `col` back onto an image.
pub fn col2im(
    col: &[f32],
    cin: usize,
    idims: [usize; 3],
    geom: ConvGeom,
    odims: [usize; 3],
) -> Vec<f32> {
    let [a, b, g] = idims;
    let [ka, kb, kg] = geom.k;
    let [oa, ob, og] = odims;
    let os = oa * ob * og;
    let s = geom.stride;
    let mut x = vec![0.0f32; cin * a * b * g];
    for ci in 0..cin {
        let xc = &mut x[ci * a * b * g..][..a * b * g];
        for ja in 0..ka {
            let (alo, ahi) = axis_range(a, oa, ja, geom.pad[0], s);
            for jb in 0..kb {
                let (blo, bhi) = axis_range(b, ob, jb, geom.pad[1], s);
                for jg in 0..kg {
                    let (glo, ghi) = axis_range(g, og, jg, geom.pad[2], s);
                    if glo >= ghi {
                        continue;
                    }
                    let row = (((ci * ka + ja) * kb + jb) * kg + jg) * os;
                    for ao in alo..ahi {
                        let ai = ao * s + ja - geom.pad[0];
                        for bo in blo..bhi {
                            let bi = bo * s + jb - geom.pad[1];
                            let xbase = (ai * b + bi) * g;
                            let cbase = row + (ao * ob + bo) * og;
                            for go in glo..ghi {
                                xc[xbase + go * s + jg - geom.pad[2]] += col[cbase + go];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution: `w` is `[cout, cin, kA, kB, kG]`, bias `[cout]`.
pub fn conv3d_fwd(
    x: &[f32],
    w: &[f32],
    bias: &[f32],
    cin: usize,
    cout: usize,
    idims: [usize; 3],
    geom: ConvGeom,
    odims: [usize; 3],
) -> Vec<f32> {
    let os = odims[0] * odims[1] * odims[2];
    let ksz = cin * geom.k[0] * geom.k[1] * geom.k[2];
    let col = im2col(x, cin, idims, geom, odims);
    let mut y = vec![0.0f32; cout * os];
    gemm(cout, ksz, os, w, &col, &mut y);
    for co in 0..cout {
        let bv = bias[co];
        for v in &mut y[co * os..][..os] {
            *v += bv;
        }
    }
    y
}

/// Gradients of [`conv3d_fwd`] w.r.t. (input, weight, bias); each is
/// computed only when the matching `needs` flag is set.
pub fn conv3d_bwd(
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    cin: usize,
    cout: usize,
    idims: [usize; 3],
    geom: ConvGeom,
    odims: [usize; 3],
    needs: [bool; 3],
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let os = odims[0] * odims[1] * odims[2];
    let ksz = cin * geom.k[0] * geom.k[1] * geom.k[2];
    let gw = needs[1].then(|| {
        let col = im2col(x, cin, idims, geom, odims);
        let mut gw = vec![0.0f32; cout * ksz];
        gemm_nt(cout, ksz, os, gy, &col, &mut gw);
        gw
    });
    let gb = needs[2].then(|| {
        let mut gb = vec![0.0f32; cout];
        for co in 0..cout {
            let mut acc = 0.0f32;
            for &v in &gy[co * os..][..os] {
                acc += v;
            }
            gb[co] = acc;
        }
        gb
    });
    let gx = needs[0].then(|| {
        let mut gcol = vec![0.0f32; ksz * os];
        gemm_tn(ksz, os, cout, w, gy, &mut gcol);
        col2im(&gcol, cin, idims, geom, odims)
    });
    (gx, gw, gb)
}

/// Transposed convolution, upsampling by `stride` with kernel size == stride
/// (disjoint tiles). `w` is `[cin, cout, k, k, k]`, output dims `idims * stride`.
pub fn tconv3d_fwd(
    x: &[f32],
    w: &[f32],
    bias: &[f32],
    cin: usize,
    cout: usize,
    idims: [usize; 3],
    k: usize,
    stride: usize,
) -> Vec<f32> {
    let geom = tconv_geom(k, stride);
    let big = [idims[0] * stride, idims[1] * stride, idims[2] * stride];
    let is = idims[0] * idims[1] * idims[2];
    let ksz = cout * k * k * k;
    let mut gcol = vec![0.0f32; ksz * is];
    gemm_tn(ksz, is, cin, w, x, &mut gcol);
    let mut y = col2im(&gcol, cout, big, geom, idims);
    let bs = big[0] * big[1] * big[2];
    for co in 0..cout {
        let bv = bias[co];
        for v in &mut y[co * bs..][..bs] {
            *v += bv;
        }
    }
    y
}

/// Geometry of the ordinary convolution whose adjoint is this transposed
/// conv: `pad = (k - stride) / 2` makes the output exactly `stride *`
/// input dims for kernel extents `stride` (disjoint tiles) and
/// `2 * stride` (half-overlapping windows).
fn tconv_geom(k: usize, stride: usize) -> ConvGeom {
    ConvGeom { k: [k; 3], pad: [(k - stride) / 2; 3], stride }
}

/// Gradients of [`tconv3d_fwd`] w.r.t. (input, weight, bias), gated by
/// `needs` like [`conv3d_bwd`].
pub fn tconv3d_bwd(
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    cin: usize,
    cout: usize,
    idims: [usize; 3],
    k: usize,
    stride: usize,
    needs: [bool; 3],
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let geom = tconv_geom(k, stride);
    let big = [idims[0] * stride, idims[1] * stride, idims[2] * stride];
    let is = idims[0] * idims[1] * idims[2];
    let bs = big[0] * big[1] * big[2];
    let ksz = cout * k * k * k;
    let colgy = (needs[0] || needs[1]).then(|| im2col(gy, cout, big, geom, idims));
    let gx = needs[0].then(|| {
        let mut gx = vec![0.0f32; cin * is];
        gemm(cin, ksz, is, w, colgy.as_ref().expect("colgy computed"), &mut gx);
        gx
    });
    let gw = needs[1].then(|| {
        let mut gw = vec![0.0f32; cin * ksz];
        gemm_nt(cin, ksz, is, x, colgy.as_ref().expect("colgy computed"), &mut gw);
        gw
    });
    let gb = needs[2].then(|| {
        let mut gb = vec![0.0f32; cout];
        for co in 0..cout {
            let mut acc = 0.0f32;
            for &v in &gy[co * bs..][..bs] {
                acc += v;
            }
            gb[co] = acc;
        }
        gb
    });
    (gx, gw, gb)
}

/// 2x2x2 average pool, stride 2, trailing odd voxels dropped.
pub fn avgpool3d_fwd(x: &[f32], c: usize, idims: [usize; 3]) -> (Vec<f32>, [usize; 3]) {
    let [a, b, g] = idims;
    let o = [a / 2, b / 2, g / 2];
    let os = o[0] * o[1] * o[2];
    let mut y = vec![0.0f32; c * os];
    for ci in 0..c {
        let xc = &x[ci * a * b * g..][..a * b * g];
        let yc = &mut y[ci * os..][..os];
        for ao in 0..o[0] {
            for bo in 0..o[1] {
                for go in 0..o[2] {
                    let mut acc = 0.0f32;
                    for da in 0..2 {
                        for db in 0..2 {
                            for dg in 0..2 {
                                acc += xc[((2 * ao + da) * b + 2 * bo + db) * g + 2 * go + dg];
                            }
                        }
                    }
                    yc[(ao * o[1] + bo) * o[2] + go] = acc * 0.125;
                }
            }
        }
    }
    (y, o)
}

pub fn avgpool3d_bwd(gy: &[f32], c: usize, idims: [usize; 3]) -> Vec<f32> {
    let [a, b, g] = idims;
    let o = [a / 2, b / 2, g / 2];
    let os = o[0] * o[1] * o[2];
    let mut gx = vec![0.0f32; c * a * b * g];
    for ci in 0..c {
        let gc = &gy[ci * os..][..os];
        let xc = &mut gx[ci * a * b * g..][..a * b * g];
        for ao in 0..o[0] {
            for bo in 0..o[1] {
                for go in 0..o[2] {
                    let v = gc[(ao * o[1] + bo) * o[2] + go] * 0.125;
                    for da in 0..2 {
                        for db in 0..2 {
                            for dg in 0..2 {
                                xc[((2 * ao + da) * b + 2 * bo + db) * g + 2 * go + dg] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Bilinear upsampling of a single 2D map (half-pixel centers, edges clamped).
pub fn bilinear_upsample_2d(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    assert_eq!(src.len(), sh * sw, "bilinear_upsample_2d: source length mismatch");
    let mut dst = vec![0.0f32; dh * dw];
    let fy = sh as f32 / dh as f32;
    let fx = sw as f32 / dw as f32;
    for y in 0..dh {
        let sy = ((y as f32 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = sy - y0 as f32;
        for x in 0..dw {
            let sx = ((x as f32 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = sx - x0 as f32;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bot = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            dst[y * dw + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    dst
}
