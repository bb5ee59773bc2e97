//! Tape operations. Each constructor computes the forward value eagerly and
//! registers a closure producing per-parent gradient buffers.

use super::linalg::{self, ConvGeom};
use super::Tensor;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "add");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "sub");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_, g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|v| -v).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "mul");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|node, g| {
                let a = node.parent_data(0);
                let b = node.parent_data(1);
                vec![
                    Some(g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    Some(g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }),
        )
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_, g| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|node, g| {
                let x = node.parent_data(0);
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn leaky_relu(&self, alpha: f32) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|v| if *v > 0.0 { *v } else { alpha * v })
            .collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |node, g| {
                let x = node.parent_data(0);
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { alpha * g })
                        .collect(),
                )]
            }),
        )
    }

    /// ln(1 + e^x), numerically stable; gradient is sigmoid(x).
    pub fn softplus(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|node, g| {
                let x = node.parent_data(0);
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| g / (1.0 + (-x).exp()))
                        .collect(),
                )]
            }),
        )
    }

    /// Elementwise min(x, cap); gradient passes only where x < cap.
    pub fn clamp_max(&self, cap: f32) -> Tensor {
        let data = self.data().iter().map(|v| v.min(cap)).collect();
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |node, g| {
                let x = node.parent_data(0);
                vec![Some(
                    g.iter()
                        .zip(x)
                        .map(|(g, x)| if *x < cap { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "reshape: element count mismatch"
        );
        Tensor::op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }

    /// a[m,k] * b[k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        linalg::sgemm(m, k, n, self.data(), other.data(), &mut out);
        Tensor::op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |node, g| {
                let a = node.parent_data(0);
                let b = node.parent_data(1);
                let mut da = vec![0.0; m * k];
                linalg::sgemm_a_bt(m, n, k, g, b, &mut da);
                let mut db = vec![0.0; k * n];
                linalg::sgemm_at_b(k, m, n, a, g, &mut db);
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Broadcast-add `bias` (length C) over the last dimension.
    pub fn bias_add(&self, bias: &Tensor) -> Tensor {
        let c = *self.shape().last().expect("bias_add on scalar");
        assert_eq!(bias.shape(), [c], "bias_add: bias length");
        let mut data = self.data().to_vec();
        let bv = bias.data();
        for row in data.chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(bv) {
                *x += b;
            }
        }
        Tensor::op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |_, g| {
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                vec![Some(g.to_vec()), Some(db)]
            }),
        )
    }

    /// NHWC convolution; weight layout is [KH, KW, Cin, Cout], flattening to
    /// the (K x Cout) matrix the im2col gemm consumes.
    pub fn conv2d(&self, weight: &Tensor, geom: ConvGeom) -> Tensor {
        let dims = self.shape();
        assert_eq!(dims.len(), 4, "conv2d: input must be NHWC");
        let batch = dims[0];
        assert_eq!(
            (dims[1], dims[2], dims[3]),
            (geom.in_h, geom.in_w, geom.c_in),
            "conv2d: input {:?} does not match geometry {:?}",
            dims,
            geom
        );
        assert_eq!(
            weight.shape(),
            [geom.k_h, geom.k_w, geom.c_in, geom.c_out],
            "conv2d: weight shape"
        );
        let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.k());
        let m = batch * oh * ow;
        let mut col = Vec::new();
        linalg::im2col(self.data(), batch, &geom, &mut col);
        let mut out = vec![0.0; m * geom.c_out];
        linalg::sgemm(m, k, geom.c_out, &col, weight.data(), &mut out);
        Tensor::op(
            vec![batch, oh, ow, geom.c_out],
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |node, g| {
                let x = node.parent_data(0);
                let w = node.parent_data(1);
                // im2col is recomputed rather than kept alive on the tape.
                let mut col = Vec::new();
                linalg::im2col(x, batch, &geom, &mut col);
                let mut dw = vec![0.0; k * geom.c_out];
                linalg::sgemm_at_b(k, m, geom.c_out, &col, g, &mut dw);
                let mut dcol = vec![0.0; m * k];
                linalg::sgemm_a_bt(m, geom.c_out, k, g, w, &mut dcol);
                let mut dx = vec![0.0; x.len()];
                linalg::col2im(&dcol, batch, &geom, &mut dx);
                vec![Some(dx), Some(dw)]
            }),
        )
    }

    /// Nearest-neighbour 2x spatial upsample of an NHWC map.
    pub fn upsample2x(&self) -> Tensor {
        let [b, h, w, c] = four(self.shape());
        let mut out = vec![0.0; b * 4 * h * w * c];
        let x = self.data();
        for bi in 0..b {
            for y in 0..h {
                for xw in 0..w {
                    let src = ((bi * h + y) * w + xw) * c;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let dst = ((bi * 2 * h + 2 * y + dy) * 2 * w + 2 * xw + dx) * c;
                            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
        Tensor::op(
            vec![b, 2 * h, 2 * w, c],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for y in 0..h {
                        for xw in 0..w {
                            let dst = ((bi * h + y) * w + xw) * c;
                            for dy in 0..2 {
                                for dx2 in 0..2 {
                                    let src =
                                        ((bi * 2 * h + 2 * y + dy) * 2 * w + 2 * xw + dx2) * c;
                                    for ci in 0..c {
                                        dx[dst + ci] += g[src + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// 2x2 average pooling with stride 2 (dims must be even).
    pub fn avg_pool2x(&self) -> Tensor {
        let [b, h, w, c] = four(self.shape());
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x: odd spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; b * oh * ow * c];
        let x = self.data();
        for bi in 0..b {
            for y in 0..oh {
                for xw in 0..ow {
                    let dst = ((bi * oh + y) * ow + xw) * c;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let src = ((bi * h + 2 * y + dy) * w + 2 * xw + dx) * c;
                            for ci in 0..c {
                                out[dst + ci] += 0.25 * x[src + ci];
                            }
                        }
                    }
                }
            }
        }
        Tensor::op(
            vec![b, oh, ow, c],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for y in 0..oh {
                        for xw in 0..ow {
                            let src = ((bi * oh + y) * ow + xw) * c;
                            for dy in 0..2 {
                                for dx2 in 0..2 {
                                    let dst = ((bi * h + 2 * y + dy) * w + 2 * xw + dx2) * c;
                                    for ci in 0..c {
                                        dx[dst + ci] += 0.25 * g[src + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Per-(sample, channel) standardization over the spatial extent:
    /// (x - mean) / (sigma + eps) with population sigma.
    pub fn instance_norm(&self, eps: f32) -> Tensor {
        let [b, h, w, c] = four(self.shape());
        let hw = h * w;
        let x = self.data();
        let mut mean = vec![0.0f32; b * c];
        let mut sigma = vec![0.0f32; b * c];
        for bi in 0..b {
            let stats = &mut mean[bi * c..(bi + 1) * c];
            for pos in 0..hw {
                let row = &x[(bi * hw + pos) * c..(bi * hw + pos + 1) * c];
                for (s, v) in stats.iter_mut().zip(row) {
                    *s += v;
                }
            }
            for s in stats.iter_mut() {
                *s /= hw as f32;
            }
            let m = &mean[bi * c..(bi + 1) * c];
            let var = &mut sigma[bi * c..(bi + 1) * c];
            for pos in 0..hw {
                let row = &x[(bi * hw + pos) * c..(bi * hw + pos + 1) * c];
                for ((v, xv), mv) in var.iter_mut().zip(row).zip(m) {
                    let d = xv - mv;
                    *v += d * d;
                }
            }
            for v in var.iter_mut() {
                *v = (*v / hw as f32).sqrt();
            }
        }
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            let m = &mean[bi * c..(bi + 1) * c];
            let s = &sigma[bi * c..(bi + 1) * c];
            for pos in 0..hw {
                let base = (bi * hw + pos) * c;
                for ci in 0..c {
                    out[base + ci] = (x[base + ci] - m[ci]) / (s[ci] + eps);
                }
            }
        }
        Tensor::op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |node, g| {
                let y = node.out_data();
                // d x_i = (g_i - mean(g)) / (sigma+eps) - y_i * mean(g*y) / sigma
                let mut gm = vec![0.0f32; b * c];
                let mut gym = vec![0.0f32; b * c];
                for bi in 0..b {
                    let a = &mut gm[bi * c..(bi + 1) * c];
                    let bacc = &mut gym[bi * c..(bi + 1) * c];
                    for pos in 0..hw {
                        let base = (bi * hw + pos) * c;
                        for ci in 0..c {
                            a[ci] += g[base + ci];
                            bacc[ci] += g[base + ci] * y[base + ci];
                        }
                    }
                    for v in a.iter_mut() {
                        *v /= hw as f32;
                    }
                    for v in bacc.iter_mut() {
                        *v /= hw as f32;
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for bi in 0..b {
                    let m = &gm[bi * c..(bi + 1) * c];
                    let my = &gym[bi * c..(bi + 1) * c];
                    let s = &sigma[bi * c..(bi + 1) * c];
                    for pos in 0..hw {
                        let base = (bi * hw + pos) * c;
                        for ci in 0..c {
                            let inv_d = 1.0 / (s[ci] + eps);
                            let term2 = if s[ci] > 0.0 {
                                y[base + ci] * my[ci] / s[ci]
                            } else {
                                0.0
                            };
                            dx[base + ci] = (g[base + ci] - m[ci]) * inv_d - term2;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// y = x * gamma[c] + beta[c]; the learned affine after plain instance norm.
    pub fn channel_affine(&self, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let c = *self.shape().last().expect("channel_affine on scalar");
        assert_eq!(gamma.shape(), [c]);
        assert_eq!(beta.shape(), [c]);
        let gv = gamma.data();
        let bv = beta.data();
        let mut out = self.data().to_vec();
        for row in out.chunks_mut(c) {
            for ((x, g), b) in row.iter_mut().zip(gv).zip(bv) {
                *x = *x * g + b;
            }
        }
        Tensor::op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |node, g| {
                let x = node.parent_data(0);
                let gv = node.parent_data(1);
                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (row, (xr, gr)) in x.chunks(c).zip(g.chunks(c)).enumerate() {
                    let _ = row;
                    let dr = &mut dx[row * c..(row + 1) * c];
                    for ci in 0..c {
                        dr[ci] = gr[ci] * gv[ci];
                        dgamma[ci] += gr[ci] * xr[ci];
                        dbeta[ci] += gr[ci];
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        )
    }

    /// y[b,:,:,c] = x[b,:,:,c] * scale[b,c] + shift[b,c]; the AdaIN re-statistics.
    pub fn scale_shift(&self, scale: &Tensor, shift: &Tensor) -> Tensor {
        let [b, h, w, c] = four(self.shape());
        assert_eq!(scale.shape(), [b, c], "scale_shift: scale shape");
        assert_eq!(shift.shape(), [b, c], "scale_shift: shift shape");
        let hw = h * w;
        let x = self.data();
        let sv = scale.data();
        let tv = shift.data();
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            let s = &sv[bi * c..(bi + 1) * c];
            let t = &tv[bi * c..(bi + 1) * c];
            for pos in 0..hw {
                let base = (bi * hw + pos) * c;
                for ci in 0..c {
                    out[base + ci] = x[base + ci] * s[ci] + t[ci];
                }
            }
        }
        Tensor::op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), scale.clone(), shift.clone()],
            Box::new(move |node, g| {
                let x = node.parent_data(0);
                let sv = node.parent_data(1);
                let mut dx = vec![0.0; x.len()];
                let mut ds = vec![0.0; b * c];
                let mut dt = vec![0.0; b * c];
                for bi in 0..b {
                    let s = &sv[bi * c..(bi + 1) * c];
                    let dsb = &mut ds[bi * c..(bi + 1) * c];
                    let dtb = &mut dt[bi * c..(bi + 1) * c];
                    for pos in 0..hw {
                        let base = (bi * hw + pos) * c;
                        for ci in 0..c {
                            dx[base + ci] = g[base + ci] * s[ci];
                            dsb[ci] += g[base + ci] * x[base + ci];
                            dtb[ci] += g[base + ci];
                        }
                    }
                }
                vec![Some(dx), Some(ds), Some(dt)]
            }),
        )
    }

    /// Concatenate along the last (channel) dimension.
    pub fn concat_last(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(
                    &p.shape()[..p.shape().len() - 1],
                    lead,
                    "concat_last: leading dims differ"
                );
                *p.shape().last().unwrap()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, wd) in parts.iter().zip(&widths) {
            let src = p.data();
            for r in 0..rows {
                out[r * total + off..r * total + off + wd]
                    .copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            off += wd;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::op(
            shape,
            out,
            parts.to_vec(),
            Box::new(move |_, g| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut off = 0;
                for wd in &widths {
                    let mut d = vec![0.0; rows * wd];
                    for r in 0..rows {
                        d[r * wd..(r + 1) * wd]
                            .copy_from_slice(&g[r * total + off..r * total + off + wd]);
                    }
                    grads.push(Some(d));
                    off += wd;
                }
                grads
            }),
        )
    }

    /// [B,H,W,C] -> [B,C] spatial mean.
    pub fn global_avg_pool(&self) -> Tensor {
        let [b, h, w, c] = four(self.shape());
        let hw = h * w;
        let x = self.data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let acc = &mut out[bi * c..(bi + 1) * c];
            for pos in 0..hw {
                let row = &x[(bi * hw + pos) * c..(bi * hw + pos + 1) * c];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= hw as f32;
            }
        }
        Tensor::op(
            vec![b, c],
            out,
            vec![self.clone()],
            Box::new(move |_, g| {
                let mut dx = vec![0.0; b * hw * c];
                for bi in 0..b {
                    let gr = &g[bi * c..(bi + 1) * c];
                    for pos in 0..hw {
                        let base = (bi * hw + pos) * c;
                        for ci in 0..c {
                            dx[base + ci] = gr[ci] / hw as f32;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean over all elements -> scalar.
    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f32;
        let m = self.data().iter().sum::<f32>() / n;
        Tensor::op(
            vec![],
            vec![m],
            vec![self.clone()],
            Box::new(move |node, g| {
                let v = g[0] / n;
                vec![Some(vec![v; node.parent_data(0).len()])]
            }),
        )
    }

    /// Mean elementwise L1 distance -> scalar.
    pub fn l1_mean(&self, other: &Tensor) -> Tensor {
        same_shape(self, other, "l1_mean");
        let n = self.len() as f32;
        let v = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / n;
        Tensor::op(
            vec![],
            vec![v],
            vec![self.clone(), other.clone()],
            Box::new(move |node, g| {
                let a = node.parent_data(0);
                let b = node.parent_data(1);
                let s = g[0] / n;
                let da: Vec<f32> = a
                    .iter()
                    .zip(b)
                    .map(|(a, b)| {
                        if a > b {
                            s
                        } else if a < b {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let db: Vec<f32> = da.iter().map(|v| -v).collect();
                vec![Some(da), Some(db)]
            }),
        )
    }

    /// Mean softmax cross-entropy of logits [B,K] against integer labels.
    pub fn softmax_ce(&self, labels: &[usize]) -> Tensor {
        let (b, k) = (self.shape()[0], self.shape()[1]);
        assert_eq!(labels.len(), b, "softmax_ce: label count");
        for &l in labels {
            assert!(l < k, "softmax_ce: label {l} outside 0..{k}");
        }
        let x = self.data();
        let mut loss = 0.0f64;
        for (bi, &lab) in labels.iter().enumerate() {
            let row = &x[bi * k..(bi + 1) * k];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f32>().ln();
            loss += (lse - row[lab]) as f64;
        }
        let labels_owned = labels.to_vec();
        Tensor::op(
            vec![],
            vec![(loss / b as f64) as f32],
            vec![self.clone()],
            Box::new(move |node, g| {
                let x = node.parent_data(0);
                let mut dx = vec![0.0; x.len()];
                let s = g[0] / b as f32;
                for (bi, &lab) in labels_owned.iter().enumerate() {
                    let row = &x[bi * k..(bi + 1) * k];
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let denom: f32 = row.iter().map(|v| (v - mx).exp()).sum();
                    let dr = &mut dx[bi * k..(bi + 1) * k];
                    for ci in 0..k {
                        let p = (row[ci] - mx).exp() / denom;
                        dr[ci] = s * (p - if ci == lab { 1.0 } else { 0.0 });
                    }
                }
                vec![Some(dx)]
            }),
        )
    }
}

fn four(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected NHWC tensor, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

#[cfg(test)]
mod tests {
    use super::super::{backward, Init, ParamSet, Tensor};
    use super::ConvGeom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(param) for a scalar-valued graph.
    fn finite_diff_check(
        build: impl Fn(&super::super::Param) -> Tensor,
        param: &super::super::Param,
        tol: f32,
    ) {
        let loss = build(param);
        let grads = backward(&loss);
        let analytic = grads.get(param).expect("param got no grad").to_vec();
        let base = param.value();
        let n = base.len();
        // probe a handful of coordinates
        let probes: Vec<usize> = (0..n).step_by((n / 7).max(1)).take(7).collect();
        for &i in &probes {
            let h = (base[i].abs() * 1e-2).max(1e-3);
            let mut up = base.clone();
            up[i] += h;
            param.set_value(up);
            let lp = build(param).item();
            let mut dn = base.clone();
            dn[i] -= h;
            param.set_value(dn);
            let lm = build(param).item();
            param.set_value(base.clone());
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-3);
            assert!(
                (fd - analytic[i]).abs() / denom < tol,
                "coord {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv2d_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let geom = ConvGeom {
            in_h: 5,
            in_w: 6,
            c_in: 3,
            c_out: 4,
            k_h: 3,
            k_w: 4,
            stride_h: 2,
            stride_w: 2,
            pad: (1, 1, 1, 2),
        };
        let w = ps.param("w", &[3, 4, 3, 4], Init::HeNormal { fan_in: 36 }, &mut rng);
        let xdata: Vec<f32> = (0..2 * 5 * 6 * 3).map(|i| ((i as f32) * 0.17).sin()).collect();
        let x = Tensor::constant(xdata, &[2, 5, 6, 3]);
        finite_diff_check(|w| x.conv2d(&w.leaf(), geom).mul(&x.conv2d(&w.leaf(), geom)).mean_all(), &w, 2e-2);

        // gradient w.r.t. input through a parameterized input leaf
        let xin = ps.param("x", &[2, 5, 6, 3], Init::Normal { std: 1.0 }, &mut rng);
        let wconst = Tensor::constant(w.value(), &[3, 4, 3, 4]);
        finite_diff_check(
            |xp| {
                let y = xp.leaf().conv2d(&wconst, geom);
                y.softplus().mean_all()
            },
            &xin,
            2e-2,
        );
    }

    #[test]
    fn instance_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let x = ps.param("x", &[2, 3, 4, 5], Init::Normal { std: 1.0 }, &mut rng);
        finite_diff_check(
            |xp| {
                let t = Tensor::constant(
                    (0..xp.len()).map(|i| 0.1 + 0.01 * i as f32).collect(),
                    &[2, 3, 4, 5],
                );
                xp.leaf().instance_norm(1e-5).mul(&t).mean_all()
            },
            &x,
            2e-2,
        );
    }

    #[test]
    fn misc_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let x = ps.param("x", &[4, 6], Init::Normal { std: 1.0 }, &mut rng);
        let w = ps.param("w", &[6, 3], Init::Normal { std: 0.5 }, &mut rng);
        let bias = ps.param("b", &[3], Init::Normal { std: 0.5 }, &mut rng);

        finite_diff_check(
            |w| {
                let y = x.leaf().matmul(&w.leaf()).bias_add(&bias.leaf());
                y.leaky_relu(0.2).softplus().mean_all()
            },
            &w,
            2e-2,
        );
        finite_diff_check(
            |b| x.leaf().matmul(&w.leaf()).bias_add(&b.leaf()).relu().mean_all(),
            &bias,
            2e-2,
        );
        finite_diff_check(
            |x| {
                let l = x.leaf().matmul(&w.leaf());
                l.softmax_ce(&[0, 2, 1, 0])
            },
            &x,
            2e-2,
        );
    }

    #[test]
    fn spatial_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let x = ps.param("x", &[2, 4, 6, 3], Init::Normal { std: 1.0 }, &mut rng);
        let gamma = ps.param("g", &[3], Init::Ones, &mut rng);
        let beta = ps.param("be", &[3], Init::Zeros, &mut rng);
        let target = Tensor::constant(vec![0.3; 2 * 8 * 12 * 3], &[2, 8, 12, 3]);

        finite_diff_check(
            |x| x.leaf().upsample2x().l1_mean(&target),
            &x,
            2e-2,
        );
        finite_diff_check(
            |x| {
                let p = x.leaf().avg_pool2x().global_avg_pool();
                p.mul(&p).mean_all()
            },
            &x,
            2e-2,
        );
        finite_diff_check(
            |gm| {
                let y = x.leaf().channel_affine(&gm.leaf(), &beta.leaf());
                y.softplus().mean_all()
            },
            &gamma,
            2e-2,
        );

        let scale = ps.param("sc", &[2, 3], Init::Normal { std: 0.5 }, &mut rng);
        let shift = ps.param("sh", &[2, 3], Init::Normal { std: 0.5 }, &mut rng);
        finite_diff_check(
            |s| {
                let y = x.leaf().scale_shift(&s.leaf(), &shift.leaf());
                y.softplus().mean_all()
            },
            &scale,
            2e-2,
        );
        finite_diff_check(
            |x| {
                let y = x.leaf().scale_shift(&scale.leaf(), &shift.leaf());
                y.clamp_max(0.4).mean_all()
            },
            &x,
            2e-2,
        );
        finite_diff_check(
            |x| {
                let parts = [x.leaf().instance_norm(1e-5), x.leaf().scale(0.5)];
                Tensor::concat_last(&parts).softplus().mean_all()
            },
            &x,
            2e-2,
        );
    }

    #[test]
    fn accumulates_grads_across_reuse() {
        // y = <x, x> : dy/dx = 2x exactly
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let x = ps.param("x", &[5], Init::Normal { std: 1.0 }, &mut rng);
        let leaf = x.leaf();
        let y = leaf.mul(&leaf).mean_all();
        let g = backward(&y);
        let got = g.get(&x).unwrap();
        for (gi, xi) in got.iter().zip(x.value()) {
            assert!((gi - 2.0 * xi / 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn no_grad_skips_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamSet::new();
        let x = ps.param("x", &[4], Init::Normal { std: 1.0 }, &mut rng);
        let y = super::super::no_grad(|| x.leaf().relu().mean_all());
        assert!(!y.requires_grad());
    }
}
