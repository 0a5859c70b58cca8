//! Transformer building blocks shared by the reader and the retriever, plus
//! the optimizer, learning-rate schedule, finite-difference checker and the
//! tensor file format used by checkpoints and embedding dumps.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let b = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-b..b))
}

/// Sinusoidal position table for positions `0..n`.
pub fn sinusoid(n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |pos, i| {
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 * rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: ps.add(format!("{name}.gain"), Matrix::from_fn(1, d, |_, _| 1.0)),
            bias: ps.add(format!("{name}.bias"), Matrix::zeros(1, d)),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        let mut w = |s: &str| ps.add(format!("{name}.{s}"), fan_in_uniform(rng, d, d, d));
        AttentionParams {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
            heads,
        }
    }

    /// Key and value projections of a memory, reusable across queries.
    pub fn keys_values(&self, g: &mut Graph, mem: Var) -> (Var, Var) {
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        (g.matmul(mem, wk), g.matmul(mem, wv))
    }

    pub fn attend(&self, g: &mut Graph, x: Var, keys: Var, values: Var, causal: bool) -> Var {
        let wq = g.param(self.wq);
        let q = g.matmul(x, wq);
        let d = g.value(q).cols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(keys, h * dh, dh);
            let vh = g.slice_cols(values, h * dh, dh);
            let s = g.matmul_bt(qh, kh);
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s, causal);
            outs.push(g.matmul(p, vh));
        }
        let o = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let wo = g.param(self.wo);
        g.matmul(o, wo)
    }

    pub fn self_attend(&self, g: &mut Graph, x: Var, causal: bool) -> Var {
        let (k, v) = self.keys_values(g, x);
        self.attend(g, x, k, v, causal)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, d: usize, ff: usize) -> Self {
        FeedForwardParams {
            w1: ps.add(format!("{name}.w1"), fan_in_uniform(rng, d, ff, d)),
            b1: ps.add(format!("{name}.b1"), Matrix::zeros(1, ff)),
            w2: ps.add(format!("{name}.w2"), fan_in_uniform(rng, ff, d, ff)),
            b2: ps.add(format!("{name}.b2"), Matrix::zeros(1, d)),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w1 = g.param(self.w1);
        let b1 = g.param(self.b1);
        let w2 = g.param(self.w2);
        let b2 = g.param(self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let h = g.matmul(h, w2);
        g.add_row(h, b2)
    }
}

/// Pre-norm encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    ln1: LayerNormParams,
    attn: AttentionParams,
    ln2: LayerNormParams,
    ffn: FeedForwardParams,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, d: usize, heads: usize, ff: usize) -> Self {
        EncoderLayer {
            ln1: LayerNormParams::new(ps, &format!("{name}.ln1"), d),
            attn: AttentionParams::new(ps, rng, &format!("{name}.attn"), d, heads),
            ln2: LayerNormParams::new(ps, &format!("{name}.ln2"), d),
            ffn: FeedForwardParams::new(ps, rng, &format!("{name}.ffn"), d, ff),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.ln1.apply(g, x);
        let a = self.attn.self_attend(g, h, false);
        let x = g.add(x, a);
        let h = self.ln2.apply(g, x);
        let f = self.ffn.apply(g, h);
        g.add(x, f)
    }
}

/// Pre-norm decoder layer with causal self-attention and cross-attention.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    ln1: LayerNormParams,
    self_attn: AttentionParams,
    ln2: LayerNormParams,
    pub cross_attn: AttentionParams,
    ln3: LayerNormParams,
    ffn: FeedForwardParams,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, d: usize, heads: usize, ff: usize) -> Self {
        DecoderLayer {
            ln1: LayerNormParams::new(ps, &format!("{name}.ln1"), d),
            self_attn: AttentionParams::new(ps, rng, &format!("{name}.self_attn"), d, heads),
            ln2: LayerNormParams::new(ps, &format!("{name}.ln2"), d),
            cross_attn: AttentionParams::new(ps, rng, &format!("{name}.cross_attn"), d, heads),
            ln3: LayerNormParams::new(ps, &format!("{name}.ln3"), d),
            ffn: FeedForwardParams::new(ps, rng, &format!("{name}.ffn"), d, ff),
        }
    }

    /// `mem_kv` are the cross-attention keys and values of the encoder
    /// memory, see [`AttentionParams::keys_values`].
    pub fn apply(&self, g: &mut Graph, y: Var, mem_kv: (Var, Var)) -> Var {
        let h = self.ln1.apply(g, y);
        let a = self.self_attn.self_attend(g, h, true);
        let y = g.add(y, a);
        let h = self.ln2.apply(g, y);
        let c = self.cross_attn.attend(g, h, mem_kv.0, mem_kv.1, false);
        let y = g.add(y, c);
        let h = self.ln3.apply(g, y);
        let f = self.ffn.apply(g, h);
        g.add(y, f)
    }
}

/// Token embedding, sinusoidal positions from 0, a stack of encoder layers
/// and a final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub embed: ParamId,
    layers: Vec<EncoderLayer>,
    ln_f: LayerNormParams,
}

impl EncoderStack {
    /// `embed` may be shared with a decoder.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        embed: ParamId,
        d: usize,
        heads: usize,
        ff: usize,
        layers: usize,
    ) -> Self {
        EncoderStack {
            embed,
            layers: (0..layers)
                .map(|i| EncoderLayer::new(ps, rng, &format!("{name}.layer{i}"), d, heads, ff))
                .collect(),
            ln_f: LayerNormParams::new(ps, &format!("{name}.ln_f"), d),
        }
    }

    pub fn apply(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let table = g.param(self.embed);
        let x = g.embed(table, ids);
        let d = g.value(x).cols();
        let pos = g.constant(sinusoid(ids.len(), d));
        let mut x = g.add(x, pos);
        for l in &self.layers {
            x = l.apply(g, x);
        }
        self.ln_f.apply(g, x)
    }
}

/// Embedding table initialisation: uniform in `±1`.
pub fn embedding_table(rng: &mut impl Rng, vocab: usize, d: usize) -> Matrix {
    Matrix::from_fn(vocab, d, |_, _| rng.gen_range(-1.0..1.0))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, _, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in params.ids().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Linear warm-up from 0 to `peak` followed by linear decay back to 0.
///
/// `step` counts from 1 to `total`. With `w = max(1, ceil(warmup * total))`
/// warm-up steps, step `s ≤ w` uses `peak · s / w` and later steps use
/// `peak · (total − s) / (total − w)`, so the last step runs at 0.
pub fn linear_schedule(step: usize, total: usize, peak: f64, warmup: f64) -> f64 {
    let w = warmup_steps(total, warmup);
    if step <= w {
        peak * (step as f64 / w as f64)
    } else {
        peak * ((total - step.min(total)) as f64 / (total - w) as f64)
    }
}

pub fn warmup_steps(total: usize, warmup: f64) -> usize {
    ((warmup * total as f64).ceil() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is (numerically) zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `grads` with central differences `(f(θ+ε) − f(θ−ε)) / 2ε` on up
/// to `per_param` randomly chosen coordinates of every parameter tensor.
pub fn finite_difference_check(
    params: &ParamSet,
    grads: &Gradients,
    loss: impl Fn(&ParamSet) -> f64,
    eps: f64,
    per_param: usize,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };
    let mut work = params.clone();
    for id in params.ids() {
        let n = params.get(id).len();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(rng, n, per_param).into_vec()
        };
        for k in coords {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let up = loss(&work);
            work.get_mut(id).data_mut()[k] = orig - eps;
            let down = loss(&work);
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(grads.get(id).data()[k], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{k}]", params.name(id));
            }
        }
    }
    report
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    count: usize,
    dim: usize,
}

/// JSON header line `{"count":rows,"dim":cols}` followed by little-endian
/// `f32` values, row-major.
pub fn write_matrix(w: &mut impl Write, m: &Matrix) -> std::io::Result<()> {
    let header = serde_json::to_string(&TensorHeader {
        count: m.rows(),
        dim: m.cols(),
    })
    .expect("header serializes");
    writeln!(w, "{header}")?;
    let mut buf = Vec::with_capacity(m.len() * 4);
    for &v in m.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_matrix(r: &mut impl BufRead) -> Result<Matrix> {
    let mut header = String::new();
    r.read_line(&mut header)
        .map_err(|e| Error::Checkpoint(format!("reading tensor header: {e}")))?;
    let h: TensorHeader = serde_json::from_str(header.trim())
        .map_err(|e| Error::Checkpoint(format!("bad tensor header {header:?}: {e}")))?;
    let mut bytes = vec![0u8; h.count * h.dim * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated tensor body: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Matrix::from_vec(h.count, h.dim, data))
}

pub fn save_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_matrix(&mut f, m).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<Matrix> {
    let mut f = BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    read_matrix(&mut f)
}

/// Writes one `<name>.bin` file per parameter into `dir`.
pub fn save_params(dir: &Path, params: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (_, name, t) in params.iter() {
        save_matrix(&dir.join(format!("{name}.bin")), t)?;
    }
    Ok(())
}

/// Loads every parameter of `params` from `dir`, checking shapes.
pub fn load_params(dir: &Path, params: &mut ParamSet) -> Result<()> {
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        let m = load_matrix(&dir.join(format!("{name}.bin")))?;
        let want = params.get(id).shape();
        if m.shape() != want {
            return Err(Error::Checkpoint(format!(
                "{name}: expected shape {want:?}, found {:?}",
                m.shape()
            )));
        }
        *params.get_mut(id) = m;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_ten_steps() {
        // w = ceil(0.01 * 10) = 1: full rate at step 1, then (10 - s) / 9
        let got: Vec<f64> = (1..=10).map(|s| linear_schedule(s, 10, 1e-4, 0.01)).collect();
        let want = [
            1e-4,
            1e-4 * (8.0 / 9.0),
            1e-4 * (7.0 / 9.0),
            1e-4 * (6.0 / 9.0),
            1e-4 * (5.0 / 9.0),
            1e-4 * (4.0 / 9.0),
            1e-4 * (3.0 / 9.0),
            1e-4 * (2.0 / 9.0),
            1e-4 * (1.0 / 9.0),
            0.0,
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn schedule_warms_up_from_zero() {
        // 200 steps: 2 warm-up steps
        assert_eq!(warmup_steps(200, 0.01), 2);
        assert_eq!(linear_schedule(1, 200, 1.0, 0.01), 0.5);
        assert_eq!(linear_schedule(2, 200, 1.0, 0.01), 1.0);
        assert_eq!(linear_schedule(200, 200, 1.0, 0.01), 0.0);
        assert_eq!(linear_schedule(1, 1, 1.0, 0.01), 1.0);
        let peak = (1..=200)
            .map(|s| linear_schedule(s, 200, 1.0, 0.01))
            .fold(0.0, f64::max);
        assert_eq!(peak, 1.0);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut g = Graph::new(&ps);
        let x = g.param(id);
        let l = g.cross_entropy(x, &[1]);
        let grads = g.backward(l);
        let mut adam = Adam::new(&ps);
        adam.step(&mut ps, &grads, 0.1);
        // first Adam step moves each coordinate by ~lr in the descent direction
        assert!((ps.get(id).data()[0] - 0.9).abs() < 1e-6);
        assert!((ps.get(id).data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn tensor_file_round_trip() {
        let m = Matrix::from_fn(3, 5, |r, c| (r * 5 + c) as f64 * 0.5);
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        assert!(buf.starts_with(b"{\"count\":3,\"dim\":5}\n"));
        let back = read_matrix(&mut &buf[..]).unwrap();
        assert_eq!(back, m);
        assert!(read_matrix(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn sinusoid_starts_at_zero_phase() {
        let s = sinusoid(3, 4);
        assert_eq!(s.row(0), [0.0, 1.0, 0.0, 1.0]);
    }
}
