//! Style-transfer network: two domain-specific attention encoders, a
//! three-layer fusion decoder, and a two-layer CNN refiner producing
//! stylized C×B samples.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{glorot_uniform, ones, zeros, ParamId, ParamStore, ParamVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dimensions of the transfer network.
#[derive(Debug, Clone)]
pub struct TransferConfig {
    pub channels: usize,
    pub bands: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub decoder_layers: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            channels: 62,
            bands: 5,
            model_dim: 50,
            heads: 10,
            ffn_dim: 256,
            decoder_layers: 3,
        }
    }
}

impl TransferConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("bands", self.bands),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("decoder_layers", self.decoder_layers),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Weights of one domain encoder (source or target).
#[derive(Debug, Clone, Copy)]
pub struct DomainEncoderParams {
    pub attn: AttentionParams,
    pub ffn: FfnParams,
    pub ln_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

/// Weights of one decoder layer: self-attention over the content stream,
/// cross-attention pulling style from the target encoding, and an FFN,
/// each with its own layer norm.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub ffn: FfnParams,
    pub ln_self: LayerNormParams,
    pub ln_cross: LayerNormParams,
    pub ln_ffn: LayerNormParams,
}

/// CNN refiner: two electrode-axis convolutions taking the C×m decoder
/// output through channel widths m -> 2B -> B.
#[derive(Debug, Clone, Copy)]
pub struct RefinerParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct TransferParams {
    pub source_encoder: DomainEncoderParams,
    pub target_encoder: DomainEncoderParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub refiner: RefinerParams,
}

fn init_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    in_dim: usize,
    m: usize,
) -> AttentionParams {
    AttentionParams {
        wq: store.add(
            format!("{prefix}.wq"),
            glorot_uniform(rng, &[in_dim, m], in_dim, m),
        ),
        wk: store.add(
            format!("{prefix}.wk"),
            glorot_uniform(rng, &[in_dim, m], in_dim, m),
        ),
        wv: store.add(
            format!("{prefix}.wv"),
            glorot_uniform(rng, &[in_dim, m], in_dim, m),
        ),
        wo: store.add(
            format!("{prefix}.wo"),
            glorot_uniform(rng, &[m, m], m, m),
        ),
    }
}

fn init_ffn<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    m: usize,
    ffn: usize,
) -> FfnParams {
    FfnParams {
        w1: store.add(
            format!("{prefix}.w1"),
            glorot_uniform(rng, &[m, ffn], m, ffn),
        ),
        b1: store.add(format!("{prefix}.b1"), zeros(&[ffn])),
        w2: store.add(
            format!("{prefix}.w2"),
            glorot_uniform(rng, &[ffn, m], ffn, m),
        ),
        b2: store.add(format!("{prefix}.b2"), zeros(&[m])),
    }
}

fn init_ln<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, m: usize) -> LayerNormParams {
    LayerNormParams {
        gain: store.add(format!("{prefix}.gain"), ones(&[m])),
        bias: store.add(format!("{prefix}.bias"), zeros(&[m])),
    }
}

fn init_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &TransferConfig,
) -> DomainEncoderParams {
    DomainEncoderParams {
        attn: init_attention(store, rng, &format!("{prefix}.attn"), cfg.bands, cfg.model_dim),
        ffn: init_ffn(store, rng, &format!("{prefix}.ffn"), cfg.model_dim, cfg.ffn_dim),
        ln_attn: init_ln(store, &format!("{prefix}.ln_attn"), cfg.model_dim),
        ln_ffn: init_ln(store, &format!("{prefix}.ln_ffn"), cfg.model_dim),
    }
}

impl TransferParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &TransferConfig,
    ) -> Self {
        let m = cfg.model_dim;
        let source_encoder = init_encoder(store, rng, "encoder.source", cfg);
        let target_encoder = init_encoder(store, rng, "encoder.target", cfg);
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            let p = format!("decoder.{l}");
            decoder.push(DecoderLayerParams {
                self_attn: init_attention(store, rng, &format!("{p}.self"), m, m),
                cross_attn: init_attention(store, rng, &format!("{p}.cross"), m, m),
                ffn: init_ffn(store, rng, &format!("{p}.ffn"), m, cfg.ffn_dim),
                ln_self: init_ln(store, &format!("{p}.ln_self"), m),
                ln_cross: init_ln(store, &format!("{p}.ln_cross"), m),
                ln_ffn: init_ln(store, &format!("{p}.ln_ffn"), m),
            });
        }
        let hidden = 2 * cfg.bands;
        let refiner = RefinerParams {
            w1: store.add(
                "refiner.w1",
                glorot_uniform(rng, &[hidden, m, 3], m * 3, hidden * 3),
            ),
            b1: store.add("refiner.b1", zeros(&[hidden])),
            w2: store.add(
                "refiner.w2",
                glorot_uniform(rng, &[cfg.bands, hidden, 3], hidden * 3, cfg.bands * 3),
            ),
            b2: store.add("refiner.b2", zeros(&[cfg.bands])),
        };
        TransferParams {
            source_encoder,
            target_encoder,
            decoder,
            refiner,
        }
    }
}

/// Q = X·Wq, K = X·Wk, V = X·Wv.
pub fn project_qkv<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    attn: &AttentionParams,
    x: Var,
) -> (Var, Var, Var) {
    let q = g.matmul(x, pv.var(attn.wq));
    let k = g.matmul(x, pv.var(attn.wk));
    let v = g.matmul(x, pv.var(attn.wv));
    (q, k, v)
}

/// Scaled dot-product multi-head attention followed by the output
/// projection. Each head operates on a p = m/h column slice.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    wo: Var,
    heads: usize,
) -> Var {
    let m = g.value(q).cols();
    assert_eq!(m % heads, 0, "model dim not divisible by heads");
    let p = m / heads;
    let scale = T::from_f64(1.0 / (p as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.cols_slice(q, h * p, p);
        let kh = g.cols_slice(k, h * p, p);
        let vh = g.cols_slice(v, h * p, p);
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt);
        let scaled = g.scale(logits, scale);
        let probs = g.softmax_rows(scaled);
        outs.push(g.matmul(probs, vh));
    }
    let cat = g.concat_cols(&outs);
    g.matmul(cat, wo)
}

/// LN with learned gain/bias applied per feature column.
fn layer_norm<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, ln: &LayerNormParams, x: Var) -> Var {
    let n = g.layer_norm_rows(x);
    let scaled = g.mul_row_vec(n, pv.var(ln.gain));
    g.add_row_vec(scaled, pv.var(ln.bias))
}

/// FFN(x) = max(0, x·W1 + b1)·W2 + b2.
fn ffn_forward<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, ffn: &FfnParams, x: Var) -> Var {
    let h = g.matmul(x, pv.var(ffn.w1));
    let h = g.add_row_vec(h, pv.var(ffn.b1));
    let h = g.relu(h);
    let h = g.matmul(h, pv.var(ffn.w2));
    g.add_row_vec(h, pv.var(ffn.b2))
}

/// One attention block with the Q-residual: LN(MSA(Q,K,V) + Q).
fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    attn: &AttentionParams,
    ln: &LayerNormParams,
    heads: usize,
    q_src: Var,
    kv_src: Var,
) -> Var {
    let q = g.matmul(q_src, pv.var(attn.wq));
    let k = g.matmul(kv_src, pv.var(attn.wk));
    let v = g.matmul(kv_src, pv.var(attn.wv));
    let msa = multi_head_attention(g, q, k, v, pv.var(attn.wo), heads);
    let res = g.add(msa, q);
    layer_norm(g, pv, ln, res)
}

/// Domain encoder: H' = LN(MSA + Q), H = LN(FFN(H') + H').
pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    enc: &DomainEncoderParams,
    cfg: &TransferConfig,
    x: Var,
) -> Var {
    let (q, k, v) = project_qkv(g, pv, &enc.attn, x);
    let msa = multi_head_attention(g, q, k, v, pv.var(enc.attn.wo), cfg.heads);
    let res = g.add(msa, q);
    let h1 = layer_norm(g, pv, &enc.ln_attn, res);
    let f = ffn_forward(g, pv, &enc.ffn, h1);
    let res2 = g.add(f, h1);
    layer_norm(g, pv, &enc.ln_ffn, res2)
}

/// Fusion decoder: the content stream starts from the source encoding,
/// each layer applies self-attention, cross-attention with K/V from the
/// target encoding, and an FFN, each with residual + LN.
pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    layers: &[DecoderLayerParams],
    cfg: &TransferConfig,
    h_source: Var,
    h_target: Var,
) -> Var {
    let mut stream = h_source;
    for layer in layers {
        let a = attention_block(g, pv, &layer.self_attn, &layer.ln_self, cfg.heads, stream, stream);
        let b = attention_block(g, pv, &layer.cross_attn, &layer.ln_cross, cfg.heads, a, h_target);
        let f = ffn_forward(g, pv, &layer.ffn, b);
        let res = g.add(f, b);
        stream = layer_norm(g, pv, &layer.ln_ffn, res);
    }
    stream
}

/// Two electrode-axis convolutions (kernel 3, zero padding) restoring the
/// feature width m -> 2B -> B, ReLU between them, linear output.
pub fn cnn_refine<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    refiner: &RefinerParams,
    h: Var,
) -> Var {
    let c1 = g.conv_electrodes(h, pv.var(refiner.w1), pv.var(refiner.b1));
    let r = g.relu(c1);
    g.conv_electrodes(r, pv.var(refiner.w2), pv.var(refiner.b2))
}

/// Full transfer: encode both domains, fuse, refine. Output is C×B and
/// carries the source sample's label downstream.
pub fn stylize_vars<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    params: &TransferParams,
    cfg: &TransferConfig,
    x_source: Var,
    x_target: Var,
) -> Var {
    let hs = encoder_forward(g, pv, &params.source_encoder, cfg, x_source);
    let ht = encoder_forward(g, pv, &params.target_encoder, cfg, x_target);
    let hd = decoder_forward(g, pv, &params.decoder, cfg, hs, ht);
    cnn_refine(g, pv, &params.refiner, hd)
}

pub fn check_sample_shape<T: Scalar>(cfg: &TransferConfig, x: &Tensor<T>) -> Result<()> {
    if x.shape() != [cfg.channels, cfg.bands] {
        return Err(Error::dimension(format!(
            "sample shape {:?} does not match configured {}x{}",
            x.shape(),
            cfg.channels,
            cfg.bands
        )));
    }
    if !x.all_finite() {
        return Err(Error::numeric("non-finite sample"));
    }
    Ok(())
}

/// Pure-forward stylize on tensors (fresh tape per call).
pub fn stylize<T: Scalar>(
    store: &ParamStore<T>,
    params: &TransferParams,
    cfg: &TransferConfig,
    x_source: &Tensor<T>,
    x_target: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_sample_shape(cfg, x_source)?;
    check_sample_shape(cfg, x_target)?;
    let mut g = Graph::new();
    let pv = store.leaves(&mut g);
    let xs = g.leaf(x_source.clone());
    let xt = g.leaf(x_target.clone());
    let out = stylize_vars(&mut g, &pv, params, cfg, xs, xt);
    let t = g.value(out).clone();
    if !t.all_finite() {
        return Err(Error::numeric("stylize produced non-finite output"));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> TransferConfig {
        TransferConfig {
            channels: 4,
            bands: 3,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            decoder_layers: 3,
        }
    }

    fn build<T: Scalar>(cfg: &TransferConfig, seed: u64) -> (ParamStore<T>, TransferParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = TransferParams::init(&mut store, &mut rng, cfg);
        (store, params)
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(
            &[r, c],
            (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    fn identity(n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.set2(i, i, 1.0);
        }
        t
    }

    #[test]
    fn projection_is_linear_and_shaped() {
        let cfg = TransferConfig::default();
        let (store, params) = build::<f64>(&cfg, 1);
        let mut g = Graph::new();
        let pv = store.leaves(&mut g);
        let zero = g.leaf(Tensor::zeros(&[62, 5]));
        let (q, k, v) = project_qkv(&mut g, &pv, &params.source_encoder.attn, zero);
        assert_eq!(g.value(q).shape(), &[62, 50]);
        assert!(g.value(q).data().iter().all(|&x| x == 0.0));
        assert!(g.value(k).data().iter().all(|&x| x == 0.0));
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn equal_projections_give_equal_qkv() {
        let cfg = small_cfg();
        let (mut store, params) = build::<f64>(&cfg, 2);
        let shared = store.get(params.source_encoder.attn.wq).clone();
        *store.get_mut(params.source_encoder.attn.wk) = shared.clone();
        *store.get_mut(params.source_encoder.attn.wv) = shared;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, cfg.channels, cfg.bands);
        let mut g = Graph::new();
        let pv = store.leaves(&mut g);
        let xv = g.leaf(x);
        let (q, k, v) = project_qkv(&mut g, &pv, &params.source_encoder.attn, xv);
        assert_eq!(g.value(q), g.value(k));
        assert_eq!(g.value(q), g.value(v));
    }

    /// Direct dense attention with a single head, independent of the tape.
    fn dense_attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
        let (c, m) = (q.rows(), q.cols());
        let scale = 1.0 / (m as f64).sqrt();
        let mut out = Tensor::zeros(&[c, v.cols()]);
        for i in 0..c {
            let mut logits = vec![0.0; c];
            for j in 0..c {
                let mut dot = 0.0;
                for l in 0..m {
                    dot += q.at2(i, l) * k.at2(j, l);
                }
                logits[j] = dot * scale;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for col in 0..v.cols() {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += exps[j] / sum * v.at2(j, col);
                }
                out.set2(i, col, acc);
            }
        }
        out
    }

    #[test]
    fn single_head_attention_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let q = rand_matrix(&mut rng, 3, 4);
            let k = rand_matrix(&mut rng, 3, 4);
            let v = rand_matrix(&mut rng, 3, 4);
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.leaf(q.clone()), g.leaf(k.clone()), g.leaf(v.clone()));
            let wo = g.leaf(identity(4));
            let out = multi_head_attention(&mut g, qv, kv, vv, wo, 1);
            let oracle = dense_attention_oracle(&q, &k, &v);
            for (a, b) in g.value(out).data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn identical_keys_give_column_mean_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_matrix(&mut rng, 4, 6);
        let key_row: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = Tensor::from_vec(
            &[4, 6],
            (0..4).flat_map(|_| key_row.clone()).collect(),
        );
        let v = rand_matrix(&mut rng, 4, 6);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.leaf(q), g.leaf(k), g.leaf(v.clone()));
        let wo = g.leaf(identity(6));
        let out = multi_head_attention(&mut g, qv, kv, vv, wo, 2);
        for i in 0..4 {
            for j in 0..6 {
                let mean = (0..4).map(|r| v.at2(r, j)).sum::<f64>() / 4.0;
                assert!((g.value(out).at2(i, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_attention_selects_matching_value_row() {
        // One query aligned with key 0 at logit gap >= 30 over the others.
        let m = 4;
        let mut q = Tensor::zeros(&[2, m]);
        q.set2(0, 0, 70.0); // scaled by 1/sqrt(4): logit 35 vs 0
        let mut k = Tensor::zeros(&[3, m]);
        k.set2(0, 0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = rand_matrix(&mut rng, 3, m);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.leaf(q), g.leaf(k), g.leaf(v.clone()));
        let wo = g.leaf(identity(m));
        let out = multi_head_attention(&mut g, qv, kv, vv, wo, 1);
        for j in 0..m {
            assert!(
                (g.value(out).at2(0, j) - v.at2(0, j)).abs() < 1e-9,
                "row not saturated to V[0]"
            );
        }
    }

    #[test]
    fn encoder_rows_are_normalized_with_default_gain() {
        let cfg = small_cfg();
        let (store, params) = build::<f64>(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_matrix(&mut rng, cfg.channels, cfg.bands);
        let mut g = Graph::new();
        let pv = store.leaves(&mut g);
        let xv = g.leaf(x);
        let h = encoder_forward(&mut g, &pv, &params.source_encoder, &cfg, xv);
        let out = g.value(h);
        assert_eq!(out.shape(), &[cfg.channels, cfg.model_dim]);
        // gain=1, bias=0 at init: each row has mean ~0 and variance ~1.
        let m = cfg.model_dim as f64;
        for r in 0..cfg.channels {
            let mean: f64 = (0..cfg.model_dim).map(|c| out.at2(r, c)).sum::<f64>() / m;
            let var: f64 = (0..cfg.model_dim)
                .map(|c| (out.at2(r, c) - mean).powi(2))
                .sum::<f64>()
                / m;
            assert!(mean.abs() < 1e-5, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "row {r} var {var}");
        }
    }

    #[test]
    fn encoder_is_pure() {
        let cfg = small_cfg();
        let (store, params) = build::<f64>(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_matrix(&mut rng, cfg.channels, cfg.bands);
        let run = || {
            let mut g = Graph::new();
            let pv = store.leaves(&mut g);
            let xv = g.leaf(x.clone());
            let h = encoder_forward(&mut g, &pv, &params.source_encoder, &cfg, xv);
            g.value(h).clone()
        };
        assert_eq!(run(), run());
    }

    /// With Wq = I, Wo = 0, FFN W2 = 0 the residual path alone survives and
    /// every decoder layer reduces to row normalization of its stream.
    #[test]
    fn zeroed_blocks_leave_normalized_stream() {
        let cfg = small_cfg();
        let (mut store, params) = build::<f64>(&cfg, 11);
        let m = cfg.model_dim;
        for layer in &params.decoder {
            *store.get_mut(layer.self_attn.wq) = identity(m);
            *store.get_mut(layer.cross_attn.wq) = identity(m);
            *store.get_mut(layer.self_attn.wo) = Tensor::zeros(&[m, m]);
            *store.get_mut(layer.cross_attn.wo) = Tensor::zeros(&[m, m]);
            *store.get_mut(layer.ffn.w2) = Tensor::zeros(&[cfg.ffn_dim, m]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let hs = rand_matrix(&mut rng, cfg.channels, m);

        let mut g = Graph::new();
        let pv = store.leaves(&mut g);
        let hsv = g.leaf(hs.clone());
        let htv = g.leaf(hs.clone());
        let out = decoder_forward(&mut g, &pv, &params.decoder, &cfg, hsv, htv);

        let mut expect_g = Graph::new();
        let e_in = expect_g.leaf(hs);
        let e_out = expect_g.layer_norm_rows(e_in);
        for (a, b) in g.value(out).data().iter().zip(expect_g.value(e_out).data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    /// Forcing uniform cross-attention (zero cross Wq) makes the decoder
    /// output invariant to permuting the target encoding's rows.
    #[test]
    fn uniform_cross_attention_ignores_target_row_order() {
        let mut cfg = small_cfg();
        cfg.heads = 1;
        let (mut store, params) = build::<f64>(&cfg, 13);
        let m = cfg.model_dim;
        for layer in &params.decoder {
            *store.get_mut(layer.cross_attn.wq) = Tensor::zeros(&[m, m]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let hs = rand_matrix(&mut rng, cfg.channels, m);
        let ht = rand_matrix(&mut rng, cfg.channels, m);
        let mut ht_perm = Tensor::zeros(&[cfg.channels, m]);
        let perm = [2usize, 0, 3, 1];
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..m {
                ht_perm.set2(dst, c, ht.at2(src, c));
            }
        }
        let run = |target: &Tensor<f64>| {
            let mut g = Graph::new();
            let pv = store.leaves(&mut g);
            let hsv = g.leaf(hs.clone());
            let htv = g.leaf(target.clone());
            let out = decoder_forward(&mut g, &pv, &params.decoder, &cfg, hsv, htv);
            g.value(out).clone()
        };
        let a = run(&ht);
        let b = run(&ht_perm);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn refiner_maps_zero_to_zero_and_scales_quadratically() {
        let cfg = small_cfg();
        let (mut store, params) = build::<f64>(&cfg, 15);
        let m = cfg.model_dim;

        let run = |store: &ParamStore<f64>, x: &Tensor<f64>| {
            let mut g = Graph::new();
            let pv = store.leaves(&mut g);
            let xv = g.leaf(x.clone());
            let out = cnn_refine(&mut g, &pv, &params.refiner, xv);
            g.value(out).clone()
        };

        let zero_out = run(&store, &Tensor::zeros(&[cfg.channels, m]));
        assert!(zero_out.data().iter().all(|&v| v == 0.0));
        assert_eq!(zero_out.shape(), &[cfg.channels, cfg.bands]);

        // Make all first-stage pre-activations positive so ReLU is linear,
        // then doubling both kernels must quadruple the output.
        let w1 = store.get(params.refiner.w1).map(|v| v.abs() + 0.05);
        *store.get_mut(params.refiner.w1) = w1;
        let x = Tensor::from_vec(
            &[cfg.channels, m],
            (0..cfg.channels * m).map(|i| 0.1 + (i as f64) * 0.01).collect(),
        );
        let base = run(&store, &x);
        let mut doubled = ParamStore::new();
        for (_, name, t) in store.iter() {
            let t2 = if name.starts_with("refiner.w") {
                t.map(|v| 2.0 * v)
            } else {
                t.clone()
            };
            doubled.add(name, t2);
        }
        let quad = run(&doubled, &x);
        for (a, b) in base.data().iter().zip(quad.data()) {
            assert!((4.0 * a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} {b}");
        }
    }

    #[test]
    fn default_dims_produce_62x5_stylized_output() {
        let cfg = TransferConfig::default();
        let (store, params) = build::<f32>(&cfg, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xs = Tensor::from_vec(
            &[62, 5],
            (0..310).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        );
        let xt = Tensor::from_vec(
            &[62, 5],
            (0..310).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        );
        let out = stylize(&store, &params, &cfg, &xs, &xt).unwrap();
        assert_eq!(out.shape(), &[62, 5]);
        let again = stylize(&store, &params, &cfg, &xs, &xt).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn wrong_shape_is_a_dimension_error() {
        let cfg = small_cfg();
        let (store, params) = build::<f64>(&cfg, 18);
        let bad = Tensor::zeros(&[cfg.channels + 1, cfg.bands]);
        let ok = Tensor::zeros(&[cfg.channels, cfg.bands]);
        assert!(matches!(
            stylize(&store, &params, &cfg, &bad, &ok),
            Err(Error::Dimension(_))
        ));
    }
}
