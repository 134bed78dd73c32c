//! The three attention mechanisms the model composes: multi-head
//! self-attention over token rows, deformable cross-attention that samples a
//! feature map at query-predicted offsets around a reference point, and part
//! attention, which samples part features at query-predicted locations but
//! derives its attention weights from the sampled features alone.
//!
//! All layers are post-norm: sublayer output is residual-added to the input
//! and layer-normalized. Feature maps are [C, H, W]; normalized coordinates
//! map to pixels as x_px = x * (W - 1), so 0 and 1 land on the border pixel
//! centers.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{bilinear_sample, concat_cols, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Sampling points per head (deformable) or part locations (part attention).
    pub n_points: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize, n_points: usize) -> Result<Self> {
        if n_heads == 0 || d_model == 0 || d_model % n_heads != 0 {
            return Err(Error::invalid(
                "attention_config",
                format!("n_heads {n_heads} must divide d_model {d_model}"),
            ));
        }
        if n_points == 0 {
            return Err(Error::invalid("attention_config", "n_points must be >= 1"));
        }
        Ok(AttentionConfig { d_model, n_heads, n_points })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Where a query looks in a feature map: normalized center plus an optional
/// normalized box extent that scales the query's predicted offsets.
#[derive(Debug, Clone, Copy)]
pub struct ReferencePoint {
    pub x: f64,
    pub y: f64,
    pub box_scale: Option<(f64, f64)>,
}

impl ReferencePoint {
    pub fn new(x: f64, y: f64) -> Self {
        ReferencePoint { x: x.clamp(0.0, 1.0), y: y.clamp(0.0, 1.0), box_scale: None }
    }

    pub fn with_box(x: f64, y: f64, w: f64, h: f64) -> Self {
        ReferencePoint {
            x: x.clamp(0.0, 1.0),
            y: y.clamp(0.0, 1.0),
            box_scale: Some((w.clamp(0.0, 1.0), h.clamp(0.0, 1.0))),
        }
    }
}

fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.range(-bound, bound)).collect();
    Tensor::param(&[rows, cols], v).expect("finite init")
}

fn zeros_param(n: usize) -> Tensor {
    Tensor::param(&[n], vec![0.0; n]).expect("finite init")
}

fn ones_param(n: usize) -> Tensor {
    Tensor::param(&[n], vec![1.0; n]).expect("finite init")
}

/// [C, H, W] -> [H*W, C] token rows.
pub fn map_to_rows(map: &Tensor) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 3 {
        return Err(Error::shape("map_to_rows", format!("expected [C,H,W], got {s:?}")));
    }
    map.reshape(&[s[0], s[1] * s[2]])?.transpose()
}

/// [H*W, C] token rows -> [C, H, W].
pub fn rows_to_map(rows: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = rows.rows_cols();
    if n != h * w {
        return Err(Error::shape(
            "rows_to_map",
            format!("{n} rows cannot form {h}x{w} map"),
        ));
    }
    rows.transpose()?.reshape(&[c, h, w])
}

/// Deformable-detector style ring of initial offsets: head h points along
/// angle 2*pi*h/H, point k sits k+1 steps out along it.
fn ring_offset_bias(n_heads: usize, n_points: usize) -> Vec<f64> {
    let mut bias = Vec::with_capacity(2 * n_heads * n_points);
    for h in 0..n_heads {
        let theta = 2.0 * std::f64::consts::PI * h as f64 / n_heads as f64;
        let (dx, dy) = (theta.cos(), theta.sin());
        let m = dx.abs().max(dy.abs()).max(1e-12);
        for k in 0..n_points {
            bias.push(dx / m * (k + 1) as f64);
            bias.push(dy / m * (k + 1) as f64);
        }
    }
    bias
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

pub struct MhsaParams {
    pub q_w: Tensor,
    pub q_b: Tensor,
    pub k_w: Tensor,
    pub k_b: Tensor,
    pub v_w: Tensor,
    pub v_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub n_heads: usize,
}

/// Attention weights per head, plus the pre-residual projected output.
pub struct MhsaTrace {
    /// [head][row] -> weight vector over rows.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub pre_residual: Vec<f64>,
}

impl MhsaParams {
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        MhsaParams {
            q_w: xavier(rng, d, d),
            q_b: zeros_param(d),
            k_w: xavier(rng, d, d),
            k_b: zeros_param(d),
            v_w: xavier(rng, d, d),
            v_b: zeros_param(d),
            out_w: xavier(rng, d, d),
            out_b: zeros_param(d),
            ln_gamma: ones_param(d),
            ln_beta: zeros_param(d),
            n_heads: cfg.n_heads,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.q_w, &self.q_b, &self.k_w, &self.k_b, &self.v_w, &self.v_b,
            &self.out_w, &self.out_b, &self.ln_gamma, &self.ln_beta,
        ]
    }

    pub fn param_count(d: usize) -> usize {
        4 * (d * d + d) + 2 * d
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.q_w"), &mut self.q_w));
        out.push((format!("{prefix}.q_b"), &mut self.q_b));
        out.push((format!("{prefix}.k_w"), &mut self.k_w));
        out.push((format!("{prefix}.k_b"), &mut self.k_b));
        out.push((format!("{prefix}.v_w"), &mut self.v_w));
        out.push((format!("{prefix}.v_b"), &mut self.v_b));
        out.push((format!("{prefix}.out_w"), &mut self.out_w));
        out.push((format!("{prefix}.out_b"), &mut self.out_b));
        out.push((format!("{prefix}.ln_gamma"), &mut self.ln_gamma));
        out.push((format!("{prefix}.ln_beta"), &mut self.ln_beta));
    }

    /// Read parameters from consecutive slices of a flat tensor, for
    /// whole-layer gradient checks.
    pub fn unpack(x: &Tensor, off: &mut usize, d: usize, n_heads: usize) -> Result<Self> {
        let mat = |rows: usize, cols: usize, off: &mut usize| -> Result<Tensor> {
            let t = x.slice_cols(*off, *off + rows * cols)?.reshape(&[rows, cols])?;
            *off += rows * cols;
            Ok(t)
        };
        let q_w = mat(d, d, off)?;
        let q_b = mat(1, d, off)?.reshape(&[d])?;
        let k_w = mat(d, d, off)?;
        let k_b = mat(1, d, off)?.reshape(&[d])?;
        let v_w = mat(d, d, off)?;
        let v_b = mat(1, d, off)?.reshape(&[d])?;
        let out_w = mat(d, d, off)?;
        let out_b = mat(1, d, off)?.reshape(&[d])?;
        let ln_gamma = mat(1, d, off)?.reshape(&[d])?;
        let ln_beta = mat(1, d, off)?.reshape(&[d])?;
        Ok(MhsaParams {
            q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b, ln_gamma, ln_beta, n_heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, None, false)?.0)
    }

    /// Self-attention with a per-row position embedding mixed into the
    /// queries and keys only; values and the residual stay content-only, so
    /// rows remain distinguishable however similar their content becomes.
    pub fn forward_pos(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, Some(pos), false)?.0)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, MhsaTrace)> {
        let (out, trace) = self.run(x, None, true)?;
        Ok((out, trace.expect("trace requested")))
    }

    fn run(&self, x: &Tensor, pos: Option<&Tensor>, traced: bool) -> Result<(Tensor, Option<MhsaTrace>)> {
        let (n, d) = x.rows_cols();
        let (dw, _) = self.q_w.rows_cols();
        if d != dw {
            return Err(Error::shape(
                "multi_head_self_attention",
                format!("input width {d} does not match parameters {dw}"),
            ));
        }
        let heads = self.n_heads;
        let dh = d / heads;
        let qk_in = match pos {
            Some(p) => x.add(p)?,
            None => x.clone(),
        };
        let q = qk_in.linear(&self.q_w, &self.q_b)?;
        let k = qk_in.linear(&self.k_w, &self.k_b)?;
        let v = x.linear(&self.v_w, &self.v_b)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(heads);
        let mut trace_weights = Vec::new();
        for h in 0..heads {
            let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
            let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
            let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
            let logits = qh.matmul_nt(&kh)?.mul_scalar(scale)?;
            let weights = logits.softmax_rows()?;
            if traced {
                let wv = weights.values();
                trace_weights.push(
                    (0..n).map(|i| wv[i * n..(i + 1) * n].to_vec()).collect::<Vec<_>>(),
                );
            }
            head_outs.push(weights.matmul(&vh)?);
        }
        let merged = concat_cols(&head_outs)?;
        let projected = merged.linear(&self.out_w, &self.out_b)?;
        let out = x.add(&projected)?.layer_norm(&self.ln_gamma, &self.ln_beta, LN_EPS)?;
        let trace = traced.then(|| MhsaTrace {
            weights: trace_weights,
            pre_residual: projected.values().to_vec(),
        });
        Ok((out, trace))
    }
}

// ---------------------------------------------------------------------------
// Deformable cross-attention
// ---------------------------------------------------------------------------

pub struct DeformableAttention {
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub offset_w: Tensor,
    pub offset_b: Tensor,
    pub weight_w: Tensor,
    pub weight_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub n_heads: usize,
    pub n_points: usize,
}

/// Per-head sampling record for one query.
pub struct SampleTrace {
    /// [head][point] attention weights.
    pub weights: Vec<Vec<f64>>,
    /// [head][point][d_head] sampled value slices.
    pub samples: Vec<Vec<Vec<f64>>>,
    /// [head][d_head] weighted combinations.
    pub head_outputs: Vec<Vec<f64>>,
    /// [d_model] after the output projection, before residual and norm.
    pub pre_residual: Vec<f64>,
}

impl DeformableAttention {
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let hk = cfg.n_heads * cfg.n_points;
        DeformableAttention {
            value_w: xavier(rng, d, d),
            value_b: zeros_param(d),
            // Zero offset weights with a ring bias: at initialization every
            // query looks at a fixed star of points around its reference.
            offset_w: Tensor::param(&[2 * hk, d], vec![0.0; 2 * hk * d]).expect("zeros"),
            offset_b: Tensor::param(&[2 * hk], ring_offset_bias(cfg.n_heads, cfg.n_points))
                .expect("finite"),
            weight_w: Tensor::param(&[hk, d], vec![0.0; hk * d]).expect("zeros"),
            weight_b: zeros_param(hk),
            out_w: xavier(rng, d, d),
            out_b: zeros_param(d),
            ln_gamma: ones_param(d),
            ln_beta: zeros_param(d),
            n_heads: cfg.n_heads,
            n_points: cfg.n_points,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.value_w, &self.value_b, &self.offset_w, &self.offset_b,
            &self.weight_w, &self.weight_b, &self.out_w, &self.out_b,
            &self.ln_gamma, &self.ln_beta,
        ]
    }

    pub fn param_count(d: usize, n_heads: usize, n_points: usize) -> usize {
        let hk = n_heads * n_points;
        // value + out projections, offset head, weight head, layer norm
        2 * (d * d + d) + (2 * hk * d + 2 * hk) + (hk * d + hk) + 2 * d
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.value_w"), &mut self.value_w));
        out.push((format!("{prefix}.value_b"), &mut self.value_b));
        out.push((format!("{prefix}.offset_w"), &mut self.offset_w));
        out.push((format!("{prefix}.offset_b"), &mut self.offset_b));
        out.push((format!("{prefix}.weight_w"), &mut self.weight_w));
        out.push((format!("{prefix}.weight_b"), &mut self.weight_b));
        out.push((format!("{prefix}.out_w"), &mut self.out_w));
        out.push((format!("{prefix}.out_b"), &mut self.out_b));
        out.push((format!("{prefix}.ln_gamma"), &mut self.ln_gamma));
        out.push((format!("{prefix}.ln_beta"), &mut self.ln_beta));
    }

    pub fn unpack(
        x: &Tensor,
        off: &mut usize,
        d: usize,
        n_heads: usize,
        n_points: usize,
    ) -> Result<Self> {
        let hk = n_heads * n_points;
        let take = |rows: usize, cols: usize, off: &mut usize| -> Result<Tensor> {
            let t = x.slice_cols(*off, *off + rows * cols)?;
            *off += rows * cols;
            if rows == 1 {
                t.reshape(&[cols])
            } else {
                t.reshape(&[rows, cols])
            }
        };
        Ok(DeformableAttention {
            value_w: take(d, d, off)?,
            value_b: take(1, d, off)?,
            offset_w: take(2 * hk, d, off)?,
            offset_b: take(1, 2 * hk, off)?,
            weight_w: take(hk, d, off)?,
            weight_b: take(1, hk, off)?,
            out_w: take(d, d, off)?,
            out_b: take(1, d, off)?,
            ln_gamma: take(1, d, off)?,
            ln_beta: take(1, d, off)?,
            n_heads,
            n_points,
        })
    }

    /// Value-project a [C, H, W] map once; the result is shared by every
    /// query that attends to it.
    pub fn project_map(&self, map: &Tensor) -> Result<Tensor> {
        let s = map.shape();
        let rows = map_to_rows(map)?;
        let projected = rows.linear(&self.value_w, &self.value_b)?;
        rows_to_map(&projected, s[1], s[2])
    }

    /// Attend every query row to the projected map and return the
    /// residual-normalized output rows.
    pub fn forward(
        &self,
        queries: &Tensor,
        refs: &[ReferencePoint],
        projected_map: &Tensor,
    ) -> Result<Tensor> {
        let (out, _) = self.run(queries, None, refs, projected_map, false)?;
        Ok(out)
    }

    /// Cross-attention with a per-query position embedding mixed into the
    /// offset and weight predictions; the sampled values stay content-only.
    pub fn forward_pos(
        &self,
        queries: &Tensor,
        pos: &Tensor,
        refs: &[ReferencePoint],
        projected_map: &Tensor,
    ) -> Result<Tensor> {
        let (out, _) = self.run(queries, Some(pos), refs, projected_map, false)?;
        Ok(out)
    }

    pub fn forward_traced(
        &self,
        queries: &Tensor,
        refs: &[ReferencePoint],
        projected_map: &Tensor,
    ) -> Result<(Tensor, Vec<SampleTrace>)> {
        let (out, traces) = self.run(queries, None, refs, projected_map, true)?;
        Ok((out, traces))
    }

    fn run(
        &self,
        queries: &Tensor,
        pos: Option<&Tensor>,
        refs: &[ReferencePoint],
        vmap: &Tensor,
        traced: bool,
    ) -> Result<(Tensor, Vec<SampleTrace>)> {
        let (n, d) = queries.rows_cols();
        if refs.len() != n {
            return Err(Error::invalid(
                "deformable_cross_attention",
                format!("{n} queries but {} reference points", refs.len()),
            ));
        }
        let ms = vmap.shape();
        if ms.len() != 3 || ms[0] != d {
            return Err(Error::shape(
                "deformable_cross_attention",
                format!("map {ms:?} does not match d_model {d}"),
            ));
        }
        let (h_px, w_px) = (ms[1], ms[2]);
        let heads = self.n_heads;
        let k = self.n_points;
        let hk = heads * k;
        let dh = d / heads;

        let steer = match pos {
            Some(p) => queries.add(p)?,
            None => queries.clone(),
        };
        let offsets = steer.linear(&self.offset_w, &self.offset_b)?; // [n, 2hk]
        let logits = steer.linear(&self.weight_w, &self.weight_b)?; // [n, hk]

        let mut out_rows = Vec::with_capacity(n);
        let mut traces = Vec::new();
        for (qi, rp) in refs.iter().enumerate() {
            // Locations in map pixels: reference plus scaled offsets. With a
            // box, offsets are fractions of half the box per point count;
            // without one they are raw pixel displacements.
            let (sx, sy) = match rp.box_scale {
                Some((bw, bh)) => (
                    bw * (w_px.max(2) - 1) as f64 / (2.0 * k as f64),
                    bh * (h_px.max(2) - 1) as f64 / (2.0 * k as f64),
                ),
                None => (1.0, 1.0),
            };
            let ref_px = (rp.x * (w_px - 1) as f64, rp.y * (h_px - 1) as f64);
            let mut scale_v = Vec::with_capacity(2 * hk);
            let mut shift_v = Vec::with_capacity(2 * hk);
            for _ in 0..hk {
                scale_v.push(sx);
                scale_v.push(sy);
                shift_v.push(ref_px.0);
                shift_v.push(ref_px.1);
            }
            let scale_t = Tensor::new(&[hk, 2], scale_v)?;
            let shift_t = Tensor::new(&[hk, 2], shift_v)?;
            let locs = offsets
                .row(qi)?
                .reshape(&[hk, 2])?
                .mul(&scale_t)?
                .add(&shift_t)?;
            let sampled = bilinear_sample(vmap, &locs)?; // [hk, d]
            let weights = logits.row(qi)?.reshape(&[heads, k])?.softmax_rows()?;

            let mut head_outs = Vec::with_capacity(heads);
            let mut tr_weights = Vec::new();
            let mut tr_samples = Vec::new();
            let mut tr_heads = Vec::new();
            for h in 0..heads {
                let rows: Vec<usize> = (h * k..(h + 1) * k).collect();
                let vals = sampled.gather_rows(&rows)?.slice_cols(h * dh, (h + 1) * dh)?;
                let w_h = weights.row(h)?.reshape(&[1, k])?;
                let head = w_h.matmul(&vals)?; // [1, dh]
                if traced {
                    tr_weights.push(weights.values()[h * k..(h + 1) * k].to_vec());
                    let vv = vals.values();
                    tr_samples.push((0..k).map(|i| vv[i * dh..(i + 1) * dh].to_vec()).collect());
                    tr_heads.push(head.values().to_vec());
                }
                head_outs.push(head);
            }
            let merged = concat_cols(&head_outs)?; // [1, d]
            let projected = merged.linear(&self.out_w, &self.out_b)?;
            if traced {
                traces.push(SampleTrace {
                    weights: tr_weights,
                    samples: tr_samples,
                    head_outputs: tr_heads,
                    pre_residual: projected.values().to_vec(),
                });
            }
            out_rows.push(projected);
        }
        let all = crate::tensor::concat_rows(&out_rows)?; // [n, d]
        let out = queries
            .add(&all)?
            .layer_norm(&self.ln_gamma, &self.ln_beta, LN_EPS)?;
        Ok((out, traces))
    }
}

// ---------------------------------------------------------------------------
// Part attention
// ---------------------------------------------------------------------------

pub struct PartAttentionLayer {
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub offset_w: Tensor,
    pub offset_b: Tensor,
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub n_heads: usize,
    pub n_points: usize,
}

impl PartAttentionLayer {
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let k = cfg.n_points;
        // Single ring of part locations shared by all heads: heads differ in
        // how they weight parts, not where the parts are.
        let mut ring = Vec::with_capacity(2 * k);
        for i in 0..k {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            let (dx, dy) = (theta.cos(), theta.sin());
            let m = dx.abs().max(dy.abs()).max(1e-12);
            ring.push(dx / m);
            ring.push(dy / m);
        }
        PartAttentionLayer {
            value_w: xavier(rng, d, d),
            value_b: zeros_param(d),
            offset_w: Tensor::param(&[2 * k, d], vec![0.0; 2 * k * d]).expect("zeros"),
            offset_b: Tensor::param(&[2 * k], ring).expect("finite"),
            key_w: xavier(rng, d, d),
            key_b: zeros_param(d),
            out_w: xavier(rng, d, d),
            out_b: zeros_param(d),
            ln_gamma: ones_param(d),
            ln_beta: zeros_param(d),
            n_heads: cfg.n_heads,
            n_points: cfg.n_points,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.value_w, &self.value_b, &self.offset_w, &self.offset_b,
            &self.key_w, &self.key_b, &self.out_w, &self.out_b,
            &self.ln_gamma, &self.ln_beta,
        ]
    }

    pub fn param_count(d: usize, n_points: usize) -> usize {
        3 * (d * d + d) + 2 * n_points * d + 2 * n_points + 2 * d
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.value_w"), &mut self.value_w));
        out.push((format!("{prefix}.value_b"), &mut self.value_b));
        out.push((format!("{prefix}.offset_w"), &mut self.offset_w));
        out.push((format!("{prefix}.offset_b"), &mut self.offset_b));
        out.push((format!("{prefix}.key_w"), &mut self.key_w));
        out.push((format!("{prefix}.key_b"), &mut self.key_b));
        out.push((format!("{prefix}.out_w"), &mut self.out_w));
        out.push((format!("{prefix}.out_b"), &mut self.out_b));
        out.push((format!("{prefix}.ln_gamma"), &mut self.ln_gamma));
        out.push((format!("{prefix}.ln_beta"), &mut self.ln_beta));
    }

    pub fn unpack(
        x: &Tensor,
        off: &mut usize,
        d: usize,
        n_heads: usize,
        n_points: usize,
    ) -> Result<Self> {
        let k = n_points;
        let take = |rows: usize, cols: usize, off: &mut usize| -> Result<Tensor> {
            let t = x.slice_cols(*off, *off + rows * cols)?;
            *off += rows * cols;
            if rows == 1 {
                t.reshape(&[cols])
            } else {
                t.reshape(&[rows, cols])
            }
        };
        Ok(PartAttentionLayer {
            value_w: take(d, d, off)?,
            value_b: take(1, d, off)?,
            offset_w: take(2 * k, d, off)?,
            offset_b: take(1, 2 * k, off)?,
            key_w: take(d, d, off)?,
            key_b: take(1, d, off)?,
            out_w: take(d, d, off)?,
            out_b: take(1, d, off)?,
            ln_gamma: take(1, d, off)?,
            ln_beta: take(1, d, off)?,
            n_heads,
            n_points,
        })
    }

    pub fn project_map(&self, map: &Tensor) -> Result<Tensor> {
        let s = map.shape();
        let rows = map_to_rows(map)?;
        let projected = rows.linear(&self.value_w, &self.value_b)?;
        rows_to_map(&projected, s[1], s[2])
    }

    /// Part locations in map pixels for one query row: reference plus the
    /// query's predicted offsets, scaled by the box when present.
    fn locations(
        &self,
        query: &Tensor,
        rp: &ReferencePoint,
        h_px: usize,
        w_px: usize,
    ) -> Result<Tensor> {
        let k = self.n_points;
        let (sx, sy) = match rp.box_scale {
            Some((bw, bh)) => (
                bw * (w_px.max(2) - 1) as f64 / (2.0 * k as f64),
                bh * (h_px.max(2) - 1) as f64 / (2.0 * k as f64),
            ),
            None => (1.0, 1.0),
        };
        let ref_px = (rp.x * (w_px - 1) as f64, rp.y * (h_px - 1) as f64);
        let mut scale_v = Vec::with_capacity(2 * k);
        let mut shift_v = Vec::with_capacity(2 * k);
        for _ in 0..k {
            scale_v.push(sx);
            scale_v.push(sy);
            shift_v.push(ref_px.0);
            shift_v.push(ref_px.1);
        }
        let scale_t = Tensor::new(&[k, 2], scale_v)?;
        let shift_t = Tensor::new(&[k, 2], shift_v)?;
        query
            .linear(&self.offset_w, &self.offset_b)?
            .reshape(&[k, 2])?
            .mul(&scale_t)?
            .add(&shift_t)
    }

    /// One query row against one projected map.
    pub fn forward(
        &self,
        query: &Tensor,
        rp: &ReferencePoint,
        projected_map: &Tensor,
    ) -> Result<Tensor> {
        let ms = projected_map.shape();
        let locs = self.locations(query, rp, ms[1], ms[2])?;
        Ok(self.attend(query, &locs, projected_map, false)?.0)
    }

    pub fn forward_traced(
        &self,
        query: &Tensor,
        rp: &ReferencePoint,
        projected_map: &Tensor,
    ) -> Result<(Tensor, SampleTrace)> {
        let ms = projected_map.shape();
        let locs = self.locations(query, rp, ms[1], ms[2])?;
        let (out, trace) = self.attend(query, &locs, projected_map, true)?;
        Ok((out, trace.expect("trace requested")))
    }

    /// Same computation with the sampling locations supplied directly,
    /// bypassing the query's offset head.
    pub fn forward_with_locations(
        &self,
        query: &Tensor,
        locations: &Tensor,
        projected_map: &Tensor,
    ) -> Result<(Tensor, SampleTrace)> {
        let (out, trace) = self.attend(query, locations, projected_map, true)?;
        Ok((out, trace.expect("trace requested")))
    }

    /// The defining property of part attention: the query chooses only
    /// where to sample; the attention weights come from the sampled
    /// features themselves, via their mean acting as the attention query.
    fn attend(
        &self,
        query: &Tensor,
        locations: &Tensor,
        vmap: &Tensor,
        traced: bool,
    ) -> Result<(Tensor, Option<SampleTrace>)> {
        let d = query.numel();
        let ms = vmap.shape();
        if ms.len() != 3 || ms[0] != d {
            return Err(Error::shape(
                "part_attention",
                format!("map {ms:?} does not match d_model {d}"),
            ));
        }
        let k = self.n_points;
        let heads = self.n_heads;
        let dh = d / heads;

        let parts = bilinear_sample(vmap, locations)?; // [k, d]
        let vbar = parts.mean_rows()?.reshape(&[1, d])?;
        let keys = parts.linear(&self.key_w, &self.key_b)?; // [k, d]
        let scale = 1.0 / (dh as f64).sqrt();

        let mut head_outs = Vec::with_capacity(heads);
        let mut tr_weights = Vec::new();
        let mut tr_samples = Vec::new();
        let mut tr_heads = Vec::new();
        for h in 0..heads {
            let vbar_h = vbar.slice_cols(h * dh, (h + 1) * dh)?;
            let keys_h = keys.slice_cols(h * dh, (h + 1) * dh)?;
            let vals_h = parts.slice_cols(h * dh, (h + 1) * dh)?;
            let weights = vbar_h.matmul_nt(&keys_h)?.mul_scalar(scale)?.softmax_rows()?;
            let head = weights.matmul(&vals_h)?; // [1, dh]
            if traced {
                tr_weights.push(weights.values().to_vec());
                let vv = vals_h.values();
                tr_samples.push((0..k).map(|i| vv[i * dh..(i + 1) * dh].to_vec()).collect());
                tr_heads.push(head.values().to_vec());
            }
            head_outs.push(head);
        }
        let merged = concat_cols(&head_outs)?;
        let projected = merged.linear(&self.out_w, &self.out_b)?;
        let out = query
            .reshape(&[1, d])?
            .add(&projected)?
            .layer_norm(&self.ln_gamma, &self.ln_beta, LN_EPS)?
            .reshape(&[d])?;
        let trace = traced.then(|| SampleTrace {
            weights: tr_weights,
            samples: tr_samples,
            head_outputs: tr_heads,
            pre_residual: projected.values().to_vec(),
        });
        Ok((out, trace))
    }
}

/// Two part attention layers applied in sequence with independent
/// parameters, against the same reference and map.
pub struct PartAttentionBlock {
    pub layer1: PartAttentionLayer,
    pub layer2: PartAttentionLayer,
}

impl PartAttentionBlock {
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng) -> Self {
        PartAttentionBlock {
            layer1: PartAttentionLayer::init(cfg, rng),
            layer2: PartAttentionLayer::init(cfg, rng),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.layer1.params();
        p.extend(self.layer2.params());
        p
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.layer1.visit(&format!("{prefix}.layer1"), out);
        self.layer2.visit(&format!("{prefix}.layer2"), out);
    }

    /// Forward against raw map features: each layer value-projects the map
    /// with its own parameters.
    pub fn forward(&self, query: &Tensor, rp: &ReferencePoint, map: &Tensor) -> Result<Tensor> {
        let v1 = self.layer1.project_map(map)?;
        let mid = self.layer1.forward(query, rp, &v1)?;
        let v2 = self.layer2.project_map(map)?;
        self.layer2.forward(&mid, rp, &v2)
    }

    /// Forward with both layers' projected maps precomputed, the batch path.
    pub fn forward_projected(
        &self,
        query: &Tensor,
        rp: &ReferencePoint,
        vmap1: &Tensor,
        vmap2: &Tensor,
    ) -> Result<Tensor> {
        let mid = self.layer1.forward(query, rp, vmap1)?;
        self.layer2.forward(&mid, rp, vmap2)
    }
}

// ---------------------------------------------------------------------------
// Feed-forward sublayer shared by encoder, decoder, and re-id layers
// ---------------------------------------------------------------------------

pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl FeedForward {
    pub fn init(d_model: usize, d_hidden: usize, rng: &mut Rng) -> Self {
        FeedForward {
            w1: xavier(rng, d_hidden, d_model),
            b1: zeros_param(d_hidden),
            w2: xavier(rng, d_model, d_hidden),
            b2: zeros_param(d_model),
            ln_gamma: ones_param(d_model),
            ln_beta: zeros_param(d_model),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.ln_gamma, &self.ln_beta]
    }

    pub fn param_count(d_model: usize, d_hidden: usize) -> usize {
        d_hidden * d_model + d_hidden + d_model * d_hidden + d_model + 2 * d_model
    }

    pub fn visit<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w1"), &mut self.w1));
        out.push((format!("{prefix}.b1"), &mut self.b1));
        out.push((format!("{prefix}.w2"), &mut self.w2));
        out.push((format!("{prefix}.b2"), &mut self.b2));
        out.push((format!("{prefix}.ln_gamma"), &mut self.ln_gamma));
        out.push((format!("{prefix}.ln_beta"), &mut self.ln_beta));
    }

    pub fn unpack(x: &Tensor, off: &mut usize, d_model: usize, d_hidden: usize) -> Result<Self> {
        let take = |rows: usize, cols: usize, off: &mut usize| -> Result<Tensor> {
            let t = x.slice_cols(*off, *off + rows * cols)?;
            *off += rows * cols;
            if rows == 1 {
                t.reshape(&[cols])
            } else {
                t.reshape(&[rows, cols])
            }
        };
        Ok(FeedForward {
            w1: take(d_hidden, d_model, off)?,
            b1: take(1, d_hidden, off)?,
            w2: take(d_model, d_hidden, off)?,
            b2: take(1, d_model, off)?,
            ln_gamma: take(1, d_model, off)?,
            ln_beta: take(1, d_model, off)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = x.linear(&self.w1, &self.b1)?.relu()?;
        let out = hidden.linear(&self.w2, &self.b2)?;
        x.add(&out)?.layer_norm(&self.ln_gamma, &self.ln_beta, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::gradcheck::{check_case, REL_TOL};
    use approx::assert_relative_eq;

    fn cfg(d: usize, heads: usize, points: usize) -> AttentionConfig {
        AttentionConfig::new(d, heads, points).unwrap()
    }

    fn rand_map(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
        let v: Vec<f64> = (0..c * h * w).map(|_| rng.range(-1.0, 1.0)).collect();
        Tensor::new(&[c, h, w], v).unwrap()
    }

    #[test]
    fn config_rejects_bad_head_split() {
        assert!(AttentionConfig::new(10, 3, 4).is_err());
        assert!(AttentionConfig::new(8, 2, 0).is_err());
        assert!(AttentionConfig::new(8, 2, 4).is_ok());
    }

    #[test]
    fn reference_point_clamps_to_unit_square() {
        let r = ReferencePoint::new(-0.5, 1.5);
        assert_eq!((r.x, r.y), (0.0, 1.0));
        let b = ReferencePoint::with_box(0.5, 0.5, 2.0, -1.0);
        assert_eq!(b.box_scale, Some((1.0, 0.0)));
    }

    #[test]
    fn mhsa_single_token_reduces_to_projection() {
        let mut rng = Rng::new(5).fork_named("mhsa-single");
        let c = cfg(8, 2, 4);
        let p = MhsaParams::init(&c, &mut rng);
        let x = Tensor::new(&[1, 8], (0..8).map(|i| 0.1 * i as f64).collect()).unwrap();
        let got = p.forward(&x).unwrap();
        // With one token every attention weight is 1, so the sublayer is
        // out_proj(value_proj(x)).
        let manual = x
            .linear(&p.v_w, &p.v_b)
            .unwrap()
            .linear(&p.out_w, &p.out_b)
            .unwrap();
        let want = x
            .add(&manual)
            .unwrap()
            .layer_norm(&p.ln_gamma, &p.ln_beta, LN_EPS)
            .unwrap();
        for (a, b) in got.values().iter().zip(want.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn mhsa_identical_rows_give_identical_outputs() {
        let mut rng = Rng::new(6).fork_named("mhsa-dup");
        let c = cfg(8, 4, 4);
        let p = MhsaParams::init(&c, &mut rng);
        let row: Vec<f64> = (0..8).map(|_| rng.range(-1.0, 1.0)).collect();
        let mut two = row.clone();
        two.extend(&row);
        let x = Tensor::new(&[2, 8], two).unwrap();
        let y = p.forward(&x).unwrap();
        assert_eq!(&y.values()[0..8], &y.values()[8..16]);
    }

    #[test]
    fn mhsa_weights_are_row_stochastic() {
        let mut rng = Rng::new(7).fork_named("mhsa-weights");
        let c = cfg(8, 2, 4);
        let p = MhsaParams::init(&c, &mut rng);
        let v: Vec<f64> = (0..24).map(|_| rng.range(-1.0, 1.0)).collect();
        let x = Tensor::new(&[3, 8], v).unwrap();
        let (_, trace) = p.forward_traced(&x).unwrap();
        assert_eq!(trace.weights.len(), 2);
        for head in &trace.weights {
            for row in head {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn mhsa_is_permutation_equivariant() {
        let mut rng = Rng::new(8).fork_named("mhsa-perm");
        let c = cfg(8, 2, 4);
        let p = MhsaParams::init(&c, &mut rng);
        let v: Vec<f64> = (0..32).map(|_| rng.range(-1.0, 1.0)).collect();
        let x = Tensor::new(&[4, 8], v).unwrap();
        let y = p.forward(&x).unwrap();
        let perm = [2usize, 0, 3, 1];
        let xp = x.gather_rows(&perm).unwrap();
        let yp = p.forward(&xp).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            let a = &yp.values()[i * 8..(i + 1) * 8];
            let b = &y.values()[src * 8..(src + 1) * 8];
            for (x1, x2) in a.iter().zip(b) {
                assert_relative_eq!(x1, x2, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn deformable_constant_map_gives_projected_constant() {
        let mut rng = Rng::new(9).fork_named("dca-const");
        let c = cfg(6, 2, 3);
        let att = DeformableAttention::init(&c, &mut rng);
        // Raw map constant per channel; project it like the layer does.
        let constant: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.5).collect();
        let mut mv = Vec::new();
        for ch in constant.iter() {
            mv.extend(std::iter::repeat_n(*ch, 81));
        }
        // 9x9 so the init ring (up to 3 px out) stays inside the map and
        // zero padding never dilutes the constant.
        let map = Tensor::new(&[6, 9, 9], mv).unwrap();
        let vmap = att.project_map(&map).unwrap();
        let q = Tensor::new(&[1, 6], (0..6).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let refs = [ReferencePoint::new(0.5, 0.5)];
        let (_, traces) = att.forward_traced(&q, &refs, &vmap).unwrap();
        let projected_const = Tensor::new(&[1, 6], constant.clone())
            .unwrap()
            .linear(&att.value_w, &att.value_b)
            .unwrap()
            .linear(&att.out_w, &att.out_b)
            .unwrap();
        for (a, b) in traces[0].pre_residual.iter().zip(projected_const.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn deformable_k1_head_output_is_the_single_sample() {
        let mut rng = Rng::new(10).fork_named("dca-k1");
        let c = cfg(8, 2, 1);
        let att = DeformableAttention::init(&c, &mut rng);
        let map = rand_map(&mut rng, 8, 4, 4);
        let vmap = att.project_map(&map).unwrap();
        let q = Tensor::new(&[1, 8], (0..8).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let refs = [ReferencePoint::new(0.4, 0.6)];
        let (_, traces) = att.forward_traced(&q, &refs, &vmap).unwrap();
        for h in 0..2 {
            assert_relative_eq!(traces[0].weights[h][0], 1.0, epsilon = 1e-12);
            for (a, b) in traces[0].head_outputs[h].iter().zip(&traces[0].samples[h][0]) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn deformable_hand_case_on_2x2_map() {
        // 1 head, K = 2, d = 2, identity projections, hand-fixed offsets
        // and logits; every number below is worked out by hand.
        let ident = Tensor::param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero2 = Tensor::param(&[2], vec![0.0, 0.0]).unwrap();
        let att = DeformableAttention {
            value_w: ident.clone(),
            value_b: zero2.clone(),
            offset_w: Tensor::param(&[4, 2], vec![0.0; 8]).unwrap(),
            offset_b: Tensor::param(&[4], vec![0.3, 0.0, -0.2, 0.1]).unwrap(),
            weight_w: Tensor::param(&[2, 2], vec![0.0; 4]).unwrap(),
            weight_b: Tensor::param(&[2], vec![2f64.ln(), 0.0]).unwrap(),
            out_w: ident.clone(),
            out_b: zero2.clone(),
            ln_gamma: Tensor::param(&[2], vec![1.0, 1.0]).unwrap(),
            ln_beta: zero2.clone(),
            n_heads: 1,
            n_points: 2,
        };
        // Channel 0: [[1,2],[3,4]], channel 1: [[5,6],[7,8]].
        let map = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let vmap = att.project_map(&map).unwrap();
        assert_eq!(vmap.values(), map.values()); // identity projection
        let q = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        // ref (0.25, 0.5) -> px (0.25, 0.5); raw offsets give sample points
        // (0.55, 0.5) and (0.05, 0.6); softmax([ln 2, 0]) = [2/3, 1/3].
        let refs = [ReferencePoint::new(0.25, 0.5)];
        let (_, traces) = att.forward_traced(&q, &refs, &vmap).unwrap();
        let t = &traces[0];
        assert_relative_eq!(t.weights[0][0], 2.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(t.samples[0][0][0], 2.55, epsilon = 1e-12);
        assert_relative_eq!(t.samples[0][0][1], 6.55, epsilon = 1e-12);
        assert_relative_eq!(t.samples[0][1][0], 2.25, epsilon = 1e-12);
        assert_relative_eq!(t.samples[0][1][1], 6.25, epsilon = 1e-12);
        assert_relative_eq!(t.pre_residual[0], 2.45, epsilon = 1e-12);
        assert_relative_eq!(t.pre_residual[1], 6.45, epsilon = 1e-12);
    }

    #[test]
    fn deformable_head_outputs_stay_in_sample_hull() {
        let mut rng = Rng::new(12).fork_named("dca-hull");
        for case in 0..20 {
            let c = cfg(8, 2, 4);
            let mut att = DeformableAttention::init(&c, &mut rng);
            // Random weight head so the attention is not uniform.
            att.weight_w =
                Tensor::param(&[8, 8], (0..64).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
            let map = rand_map(&mut rng, 8, 5, 5);
            let vmap = att.project_map(&map).unwrap();
            let q =
                Tensor::new(&[1, 8], (0..8).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
            let refs = [ReferencePoint::with_box(
                rng.range(0.3, 0.7),
                rng.range(0.3, 0.7),
                rng.range(0.2, 0.5),
                rng.range(0.2, 0.5),
            )];
            let (_, traces) = att.forward_traced(&q, &refs, &vmap).unwrap();
            for h in 0..2 {
                let samples = &traces[0].samples[h];
                for (j, out) in traces[0].head_outputs[h].iter().enumerate() {
                    let lo = samples.iter().map(|s| s[j]).fold(f64::INFINITY, f64::min);
                    let hi = samples.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max);
                    assert!(
                        *out >= lo - 1e-9 && *out <= hi + 1e-9,
                        "case {case}: head {h} coord {j}: {out} outside [{lo}, {hi}]"
                    );
                }
            }
        }
    }

    #[test]
    fn part_attention_k1_formula() {
        let mut rng = Rng::new(13).fork_named("part-k1");
        let c = cfg(8, 2, 1);
        let layer = PartAttentionLayer::init(&c, &mut rng);
        let map = rand_map(&mut rng, 8, 4, 4);
        let vmap = layer.project_map(&map).unwrap();
        let q = Tensor::new(&[8], (0..8).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let rp = ReferencePoint::with_box(0.5, 0.5, 0.4, 0.4);
        let (out, trace) = layer.forward_traced(&q, &rp, &vmap).unwrap();
        for h in 0..2 {
            assert_relative_eq!(trace.weights[h][0], 1.0, epsilon = 1e-12);
        }
        // Single part: output = layer_norm(q + out_proj(v_1)).
        let v1 = Tensor::new(&[1, 8], trace.samples.concat().concat()).unwrap();
        let want = q
            .reshape(&[1, 8])
            .unwrap()
            .add(&v1.linear(&layer.out_w, &layer.out_b).unwrap())
            .unwrap()
            .layer_norm(&layer.ln_gamma, &layer.ln_beta, LN_EPS)
            .unwrap();
        for (a, b) in out.values().iter().zip(want.values()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn part_attention_uniform_weights_on_constant_map() {
        let mut rng = Rng::new(14).fork_named("part-const");
        let c = cfg(6, 2, 4);
        let layer = PartAttentionLayer::init(&c, &mut rng);
        let mut mv = Vec::new();
        for ch in 0..6 {
            mv.extend(std::iter::repeat_n(0.2 * ch as f64 - 0.5, 25));
        }
        let map = Tensor::new(&[6, 5, 5], mv).unwrap();
        let vmap = layer.project_map(&map).unwrap();
        let q = Tensor::new(&[6], (0..6).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let rp = ReferencePoint::with_box(0.5, 0.5, 0.3, 0.3);
        let (_, trace) = layer.forward_traced(&q, &rp, &vmap).unwrap();
        for h in 0..2 {
            for &w in &trace.weights[h] {
                assert_relative_eq!(w, 0.25, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn part_attention_weights_ignore_the_query() {
        // With locations injected as constants, attention weights must be a
        // function of the sampled features only.
        let mut rng = Rng::new(15).fork_named("part-struct");
        let c = cfg(8, 2, 3);
        let layer = PartAttentionLayer::init(&c, &mut rng);
        let map = rand_map(&mut rng, 8, 5, 5);
        let vmap = layer.project_map(&map).unwrap();
        let locs = Tensor::new(&[3, 2], vec![1.3, 1.7, 2.4, 2.1, 3.2, 1.4]).unwrap();
        let q1 = Tensor::new(&[8], (0..8).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let q2 = Tensor::new(&[8], (0..8).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let (_, t1) = layer.forward_with_locations(&q1, &locs, &vmap).unwrap();
        let (_, t2) = layer.forward_with_locations(&q2, &locs, &vmap).unwrap();
        assert_eq!(t1.weights, t2.weights, "weights must not depend on q");
    }

    #[test]
    fn part_attention_weights_sum_to_one_and_hull_holds() {
        let mut rng = Rng::new(16).fork_named("part-hull");
        for _ in 0..20 {
            let c = cfg(8, 4, 4);
            let layer = PartAttentionLayer::init(&c, &mut rng);
            let map = rand_map(&mut rng, 8, 5, 5);
            let vmap = layer.project_map(&map).unwrap();
            let q = Tensor::new(&[8], (0..8).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
            let rp = ReferencePoint::with_box(
                rng.range(0.3, 0.7),
                rng.range(0.3, 0.7),
                rng.range(0.2, 0.6),
                rng.range(0.2, 0.6),
            );
            let (_, trace) = layer.forward_traced(&q, &rp, &vmap).unwrap();
            for h in 0..4 {
                let s: f64 = trace.weights[h].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(trace.weights[h].iter().all(|&w| w >= 0.0));
                for (j, out) in trace.head_outputs[h].iter().enumerate() {
                    let lo = trace.samples[h].iter().map(|v| v[j]).fold(f64::INFINITY, f64::min);
                    let hi = trace.samples[h]
                        .iter()
                        .map(|v| v[j])
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert!(*out >= lo - 1e-9 && *out <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn part_block_equals_two_sequential_layers() {
        let mut rng = Rng::new(18).fork_named("part-block");
        let c = cfg(8, 2, 3);
        let block = PartAttentionBlock::init(&c, &mut rng);
        let map = rand_map(&mut rng, 8, 4, 4);
        let q = Tensor::new(&[8], (0..8).map(|_| rng.range(-1.0, 1.0)).collect()).unwrap();
        let rp = ReferencePoint::with_box(0.5, 0.4, 0.4, 0.5);
        let got = block.forward(&q, &rp, &map).unwrap();
        let v1 = block.layer1.project_map(&map).unwrap();
        let mid = block.layer1.forward(&q, &rp, &v1).unwrap();
        let v2 = block.layer2.project_map(&map).unwrap();
        let want = block.layer2.forward(&mid, &rp, &v2).unwrap();
        assert_eq!(got.values(), want.values());
    }

    // Whole-layer gradient checks: parameters and inputs all live in the
    // flat vector, so the check covers every weight, bias, and input path.

    #[test]
    fn mhsa_matches_finite_differences() {
        let mut rng = Rng::new(21).fork_named("gc-mhsa");
        let (d, heads, n) = (4usize, 2usize, 3usize);
        for _ in 0..5 {
            let total = MhsaParams::param_count(d) + n * d;
            let x0: Vec<f64> = (0..total).map(|_| rng.range(-0.8, 0.8)).collect();
            let err = check_case(&x0, &mut rng, |x| {
                let mut off = 0;
                let p = MhsaParams::unpack(x, &mut off, d, heads)?;
                let inp = x.slice_cols(off, off + n * d)?.reshape(&[n, d])?;
                p.forward(&inp)
            })
            .unwrap();
            assert!(err <= REL_TOL, "mhsa rel err {err}");
        }
    }

    #[test]
    fn deformable_matches_finite_differences() {
        let mut rng = Rng::new(22).fork_named("gc-dca");
        let (d, heads, k) = (4usize, 2usize, 2usize);
        let (mh, mw) = (4usize, 4usize);
        let pcount = DeformableAttention::param_count(d, heads, k);
        for case in 0..5 {
            let n = 1 + case % 2;
            let refs: Vec<ReferencePoint> = (0..n)
                .map(|_| {
                    ReferencePoint::with_box(
                        rng.range(0.35, 0.65),
                        rng.range(0.35, 0.65),
                        rng.range(0.2, 0.4),
                        rng.range(0.2, 0.4),
                    )
                })
                .collect();
            let total = pcount + n * d + d * mh * mw;
            let x0: Vec<f64> = (0..total).map(|_| rng.range(-0.6, 0.6)).collect();
            let err = check_case(&x0, &mut rng, |x| {
                let mut off = 0;
                let att = DeformableAttention::unpack(x, &mut off, d, heads, k)?;
                let inp = x.slice_cols(off, off + n * d)?.reshape(&[n, d])?;
                off += n * d;
                let map = x.slice_cols(off, off + d * mh * mw)?.reshape(&[d, mh, mw])?;
                let vmap = att.project_map(&map)?;
                att.forward(&inp, &refs, &vmap)
            })
            .unwrap();
            assert!(err <= REL_TOL, "deformable rel err {err}");
        }
    }

    #[test]
    fn part_block_matches_finite_differences() {
        let mut rng = Rng::new(23).fork_named("gc-part");
        let (d, heads, k) = (4usize, 2usize, 2usize);
        let (mh, mw) = (4usize, 4usize);
        let pcount = PartAttentionLayer::param_count(d, k);
        for _ in 0..5 {
            let rp = ReferencePoint::with_box(
                rng.range(0.35, 0.65),
                rng.range(0.35, 0.65),
                rng.range(0.2, 0.4),
                rng.range(0.2, 0.4),
            );
            let total = 2 * pcount + d + d * mh * mw;
            let x0: Vec<f64> = (0..total).map(|_| rng.range(-0.6, 0.6)).collect();
            let err = check_case(&x0, &mut rng, |x| {
                let mut off = 0;
                let l1 = PartAttentionLayer::unpack(x, &mut off, d, heads, k)?;
                let l2 = PartAttentionLayer::unpack(x, &mut off, d, heads, k)?;
                let q = x.slice_cols(off, off + d)?.reshape(&[d])?;
                off += d;
                let map = x.slice_cols(off, off + d * mh * mw)?.reshape(&[d, mh, mw])?;
                let block = PartAttentionBlock { layer1: l1, layer2: l2 };
                block.forward(&q, &rp, &map)
            })
            .unwrap();
            assert!(err <= REL_TOL, "part block rel err {err}");
        }
    }

    #[test]
    fn feed_forward_matches_finite_differences() {
        let mut rng = Rng::new(24).fork_named("gc-ffn");
        let (d, dh, n) = (4usize, 8usize, 2usize);
        for _ in 0..5 {
            let total = FeedForward::param_count(d, dh) + n * d;
            let x0: Vec<f64> = (0..total).map(|_| rng.range(-0.8, 0.8)).collect();
            let err = check_case(&x0, &mut rng, |x| {
                let mut off = 0;
                let ff = FeedForward::unpack(x, &mut off, d, dh)?;
                let inp = x.slice_cols(off, off + n * d)?.reshape(&[n, d])?;
                ff.forward(&inp)
            })
            .unwrap();
            assert!(err <= REL_TOL, "ffn rel err {err}");
        }
    }
}
