//! Composite differentiable blocks shared by both streams: the residual
//! refine block, scaled-dot attention, and the transformer encoder.

use crate::error::{Error, Result};
use crate::ops::{self, Mode};
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tensor::DenseTensor;

/// Parameters of the residual refine block
/// `Norm(Dropout(W2 gelu(W1 x + b1) + b2) + W3 x)`.
pub struct RefineBlockParams<S: Scalar> {
    pub w1: DenseTensor<S>,
    pub b1: DenseTensor<S>,
    pub w2: DenseTensor<S>,
    pub b2: DenseTensor<S>,
    pub w3: DenseTensor<S>,
}

impl<S: Scalar> RefineBlockParams<S> {
    pub fn register(
        store: &mut ParameterStore<S>,
        prefix: &str,
        concat_dim: usize,
        hidden: usize,
        d_emb: usize,
    ) -> Result<Self> {
        Ok(RefineBlockParams {
            w1: store.init_weight(&format!("{prefix}.w1"), vec![hidden, concat_dim])?,
            b1: store.init_bias(&format!("{prefix}.b1"), vec![hidden])?,
            w2: store.init_weight(&format!("{prefix}.w2"), vec![d_emb, hidden])?,
            b2: store.init_bias(&format!("{prefix}.b2"), vec![d_emb])?,
            w3: store.init_weight(&format!("{prefix}.w3"), vec![d_emb, concat_dim])?,
        })
    }

    pub fn concat_dim(&self) -> usize {
        self.w1.dims()[1]
    }

    pub fn d_emb(&self) -> usize {
        self.w2.dims()[0]
    }
}

/// Refines concatenated per-frame features into the embedding width.
pub fn refine_block<S: Scalar>(
    concat_features: &DenseTensor<S>,
    params: &RefineBlockParams<S>,
    mode: Mode,
    keep_prob: f64,
    store: &ParameterStore<S>,
) -> Result<DenseTensor<S>> {
    if concat_features.last_dim() != params.concat_dim() {
        return Err(Error::dimension(
            "refine_block",
            format!(
                "input width {} does not match block concat dim {}",
                concat_features.last_dim(),
                params.concat_dim()
            ),
        ));
    }
    let hidden = ops::gelu(&ops::matmul_linear(concat_features, &params.w1, Some(&params.b1))?)?;
    let refined = ops::matmul_linear(&hidden, &params.w2, Some(&params.b2))?;
    let dropped = ops::dropout(&refined, mode, keep_prob, store)?;
    let residual = ops::matmul_linear(concat_features, &params.w3, None)?;
    ops::layer_norm_lastdim(&ops::add(&dropped, &residual)?)
}

/// Projection matrices for a single attention site; per Eq.-style usage the
/// projections carry no bias.
pub struct AttentionProjections<S: Scalar> {
    pub wq: DenseTensor<S>,
    pub wk: DenseTensor<S>,
    pub wv: DenseTensor<S>,
}

impl<S: Scalar> AttentionProjections<S> {
    pub fn register(
        store: &mut ParameterStore<S>,
        prefix: &str,
        d_in: usize,
        d_key: usize,
        d_value: usize,
    ) -> Result<Self> {
        Ok(AttentionProjections {
            wq: store.init_weight(&format!("{prefix}.wq"), vec![d_key, d_in])?,
            wk: store.init_weight(&format!("{prefix}.wk"), vec![d_key, d_in])?,
            wv: store.init_weight(&format!("{prefix}.wv"), vec![d_value, d_in])?,
        })
    }

    pub fn d_key(&self) -> usize {
        self.wk.dims()[0]
    }
}

/// Attention over already-projected queries/keys/values:
/// `softmax(Q K^T / sqrt(d_key)) V`. Returns (output, weights).
pub fn scaled_dot_attention<S: Scalar>(
    q: &DenseTensor<S>,
    k: &DenseTensor<S>,
    v: &DenseTensor<S>,
) -> Result<(DenseTensor<S>, DenseTensor<S>)> {
    let d_key = q.last_dim();
    if k.last_dim() != d_key {
        return Err(Error::dimension(
            "attention",
            format!("query width {d_key} vs key width {}", k.last_dim()),
        ));
    }
    if k.dims()[0] != v.dims()[0] {
        return Err(Error::dimension(
            "attention",
            format!("{} keys vs {} values", k.dims()[0], v.dims()[0]),
        ));
    }
    let logits = ops::scale(&ops::matmul_linear(q, k, None)?, 1.0 / (d_key as f64).sqrt())?;
    let weights = ops::softmax_lastdim(&logits)?;
    let out = ops::matmul(&weights, v)?;
    Ok((out, weights))
}

/// Projecting attention: queries and keys/values enter in their raw widths
/// and are mapped through the site's projections first.
pub fn self_attention<S: Scalar>(
    queries: &DenseTensor<S>,
    keys_values: &DenseTensor<S>,
    params: &AttentionProjections<S>,
) -> Result<(DenseTensor<S>, DenseTensor<S>)> {
    let q = ops::matmul_linear(queries, &params.wq, None)?;
    let k = ops::matmul_linear(keys_values, &params.wk, None)?;
    let v = ops::matmul_linear(keys_values, &params.wv, None)?;
    scaled_dot_attention(&q, &k, &v)
}

pub struct EncoderLayerParams<S: Scalar> {
    pub wq: DenseTensor<S>,
    pub wk: DenseTensor<S>,
    pub wv: DenseTensor<S>,
    pub wo: DenseTensor<S>,
    pub bo: DenseTensor<S>,
    pub ff_w1: DenseTensor<S>,
    pub ff_b1: DenseTensor<S>,
    pub ff_w2: DenseTensor<S>,
    pub ff_b2: DenseTensor<S>,
}

/// Transformer encoder parameters. Position table and CLS vector are
/// optional: the temporal encoder carries both, the region encoder neither.
pub struct TransformerParams<S: Scalar> {
    pub layers: Vec<EncoderLayerParams<S>>,
    pub heads: usize,
    pub d_model: usize,
    /// Rows pos_0 .. pos_max; required when encoding with positions.
    pub positions: Option<DenseTensor<S>>,
    pub cls: Option<DenseTensor<S>>,
}

impl<S: Scalar> TransformerParams<S> {
    pub fn register(
        store: &mut ParameterStore<S>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        n_layers: usize,
        ff_hidden: usize,
        max_positions: Option<usize>,
        with_cls: bool,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be divisible by heads {heads}"
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let p = format!("{prefix}.layer{l}");
            layers.push(EncoderLayerParams {
                wq: store.init_weight(&format!("{p}.wq"), vec![d_model, d_model])?,
                wk: store.init_weight(&format!("{p}.wk"), vec![d_model, d_model])?,
                wv: store.init_weight(&format!("{p}.wv"), vec![d_model, d_model])?,
                wo: store.init_weight(&format!("{p}.wo"), vec![d_model, d_model])?,
                bo: store.init_bias(&format!("{p}.bo"), vec![d_model])?,
                ff_w1: store.init_weight(&format!("{p}.ff_w1"), vec![ff_hidden, d_model])?,
                ff_b1: store.init_bias(&format!("{p}.ff_b1"), vec![ff_hidden])?,
                ff_w2: store.init_weight(&format!("{p}.ff_w2"), vec![d_model, ff_hidden])?,
                ff_b2: store.init_bias(&format!("{p}.ff_b2"), vec![d_model])?,
            });
        }
        let positions = match max_positions {
            Some(n) => Some(store.init_weight(&format!("{prefix}.pos"), vec![n, d_model])?),
            None => None,
        };
        let cls = if with_cls {
            Some(store.init_weight(&format!("{prefix}.cls"), vec![d_model])?)
        } else {
            None
        };
        Ok(TransformerParams {
            layers,
            heads,
            d_model,
            positions,
            cls,
        })
    }
}

fn multi_head_attention<S: Scalar>(
    x: &DenseTensor<S>,
    layer: &EncoderLayerParams<S>,
    heads: usize,
) -> Result<DenseTensor<S>> {
    let d_model = x.last_dim();
    let head_dim = d_model / heads;
    let q = ops::matmul_linear(x, &layer.wq, None)?;
    let k = ops::matmul_linear(x, &layer.wk, None)?;
    let v = ops::matmul_linear(x, &layer.wv, None)?;
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ops::slice_lastdim(&q, h * head_dim, head_dim)?;
        let kh = ops::slice_lastdim(&k, h * head_dim, head_dim)?;
        let vh = ops::slice_lastdim(&v, h * head_dim, head_dim)?;
        let (out, _) = scaled_dot_attention(&qh, &kh, &vh)?;
        head_outputs.push(out);
    }
    let refs: Vec<&DenseTensor<S>> = head_outputs.iter().collect();
    let concat = ops::concat_lastdim(&refs)?;
    ops::matmul_linear(&concat, &layer.wo, Some(&layer.bo))
}

/// Encodes a `n x d_model` sequence of row tokens. With `use_positions` the
/// position table rows 0..n are added before the layers (so the map is
/// order-aware); without it the encoder is permutation-equivariant.
pub fn transformer_encode<S: Scalar>(
    sequence: &DenseTensor<S>,
    params: &TransformerParams<S>,
    use_positions: bool,
    mode: Mode,
    keep_prob: f64,
    store: &ParameterStore<S>,
) -> Result<DenseTensor<S>> {
    if sequence.rank() != 2 || sequence.last_dim() != params.d_model {
        return Err(Error::dimension(
            "transformer_encode",
            format!(
                "expected n x {} sequence, got {:?}",
                params.d_model,
                sequence.dims()
            ),
        ));
    }
    let n = sequence.dims()[0];
    let mut x = if use_positions {
        let table = params.positions.as_ref().ok_or_else(|| {
            Error::Config("positions requested but encoder has no position table".into())
        })?;
        if table.dims()[0] < n {
            return Err(Error::Config(format!(
                "sequence length {n} exceeds position table of {}",
                table.dims()[0]
            )));
        }
        ops::add(sequence, &ops::slice_rows(table, 0, n)?)?
    } else {
        sequence.clone()
    };
    for layer in &params.layers {
        let attn = multi_head_attention(&x, layer, params.heads)?;
        let attn = ops::dropout(&attn, mode, keep_prob, store)?;
        x = ops::layer_norm_lastdim(&ops::add(&attn, &x)?)?;
        let ff = ops::matmul_linear(
            &ops::gelu(&ops::matmul_linear(&x, &layer.ff_w1, Some(&layer.ff_b1))?)?,
            &layer.ff_w2,
            Some(&layer.ff_b2),
        )?;
        let ff = ops::dropout(&ff, mode, keep_prob, store)?;
        x = ops::layer_norm_lastdim(&ops::add(&ff, &x)?)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;

    fn identity_matrix(n: usize) -> DenseTensor<f64> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        DenseTensor::new(vec![n, n], data).unwrap()
    }

    #[test]
    fn refine_block_collapses_to_layer_norm() {
        // W1 = W2 = 0, b2 = 0, W3 = identity: output is Norm(x).
        let mut store = ParameterStore::<f64>::new(0);
        let params = RefineBlockParams {
            w1: DenseTensor::zeros(vec![2, 2]).unwrap(),
            b1: DenseTensor::zeros(vec![2]).unwrap(),
            w2: DenseTensor::zeros(vec![2, 2]).unwrap(),
            b2: DenseTensor::zeros(vec![2]).unwrap(),
            w3: identity_matrix(2),
        };
        store.init_bias("unused", vec![1]).unwrap();
        let x = DenseTensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let y = refine_block(&x, &params, Mode::Eval, 0.5, &store).unwrap();
        let v = y.to_vec();
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4, "{v:?}");
    }

    #[test]
    fn refine_block_output_width() {
        let mut store = ParameterStore::<f64>::new(1);
        // d2D=4, d3D=3, dtext=5 concat to 12; d_emb=6.
        let params = RefineBlockParams::register(&mut store, "r", 12, 6, 6).unwrap();
        let x = DenseTensor::new(vec![2, 12], vec![0.1; 24]).unwrap();
        let y = refine_block(&x, &params, Mode::Eval, 0.5, &store).unwrap();
        assert_eq!(y.dims(), &[2, 6]);
    }

    #[test]
    fn single_key_attention_is_identity_weight() {
        let q = DenseTensor::new(vec![1, 4], vec![0.3, -1.0, 0.7, 0.2]).unwrap();
        let k = DenseTensor::new(vec![1, 4], vec![1.0, 0.0, 2.0, -1.0]).unwrap();
        let v = DenseTensor::new(vec![1, 3], vec![5.0, 6.0, 7.0]).unwrap();
        let (out, w) = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(w.to_vec(), vec![1.0]);
        assert_eq!(out.to_vec(), vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn identical_keys_give_uniform_weights_and_mean_value() {
        let q = DenseTensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let k = DenseTensor::new(vec![4, 2], vec![0.5f64, 1.0].repeat(4)).unwrap();
        let v = DenseTensor::new(vec![4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let (out, w) = scaled_dot_attention(&q, &k, &v).unwrap();
        for &wi in w.data().iter() {
            assert!((wi - 0.25).abs() < 1e-12);
        }
        let o = out.to_vec();
        assert!((o[0] - 4.0).abs() < 1e-12 && (o[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attention_weight_rows_sum_to_one() {
        let mut store = ParameterStore::<f64>::new(5);
        let proj = AttentionProjections::register(&mut store, "a", 6, 4, 6).unwrap();
        let q = DenseTensor::from_f64_slice(vec![3, 6], &(0..18).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
        let kv = DenseTensor::from_f64_slice(vec![4, 6], &(0..24).map(|i| (i as f64).cos()).collect::<Vec<_>>()).unwrap();
        let (_, w) = self_attention(&q, &kv, &proj).unwrap();
        for row in w.data().chunks_exact(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_layer_encoder_is_identity_without_positions() {
        let store = ParameterStore::<f64>::new(0);
        let params = TransformerParams {
            layers: vec![],
            heads: 2,
            d_model: 4,
            positions: None,
            cls: None,
        };
        let x = DenseTensor::new(vec![3, 4], (0..12).map(|i| i as f64).collect()).unwrap();
        let y = transformer_encode(&x, &params, false, Mode::Eval, 0.5, &store).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn encoder_is_permutation_equivariant_without_positions() {
        let mut store = ParameterStore::<f64>::new(11);
        let params =
            TransformerParams::register(&mut store, "enc", 8, 2, 2, 16, None, false).unwrap();
        let data: Vec<f64> = (0..40).map(|i| ((i * 37 % 17) as f64) * 0.21 - 1.0).collect();
        let x = DenseTensor::new(vec![5, 8], data.clone()).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&r| data[r * 8..(r + 1) * 8].to_vec())
            .collect();
        let xp = DenseTensor::new(vec![5, 8], permuted).unwrap();
        let (y, yp) = no_grad(|| {
            (
                transformer_encode(&x, &params, false, Mode::Eval, 0.5, &store).unwrap(),
                transformer_encode(&xp, &params, false, Mode::Eval, 0.5, &store).unwrap(),
            )
        });
        let yv = y.to_vec();
        let ypv = yp.to_vec();
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!(
                    (ypv[i * 8 + c] - yv[r * 8 + c]).abs() <= 1e-9,
                    "row {i} col {c}"
                );
            }
        }
    }

    #[test]
    fn sequence_longer_than_position_table_is_config_error() {
        let mut store = ParameterStore::<f64>::new(2);
        let params =
            TransformerParams::register(&mut store, "enc", 4, 2, 1, 8, Some(3), true).unwrap();
        let x = DenseTensor::new(vec![5, 4], vec![0.0; 20]).unwrap();
        assert!(matches!(
            transformer_encode(&x, &params, true, Mode::Eval, 0.5, &store),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn thirteen_token_sequence_keeps_length_and_width() {
        let mut store = ParameterStore::<f64>::new(3);
        let params =
            TransformerParams::register(&mut store, "enc", 16, 4, 2, 32, Some(13), true).unwrap();
        let x = DenseTensor::new(vec![13, 16], vec![0.05; 13 * 16]).unwrap();
        let y = transformer_encode(&x, &params, true, Mode::Eval, 0.5, &store).unwrap();
        assert_eq!(y.dims(), &[13, 16]);
    }
}
