//! Forward and reverse-mode passes of the forecaster.
//!
//! The forward pass records every activation the backward pass needs (a
//! [`Cache`]), so gradients are exact derivatives of the computation that
//! produced the loss — including the dropout masks, which are drawn once per
//! pass from a seeded generator and replayed from the cache. With dropout
//! disabled the pass is deterministic and seed-independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{
    apply_mask, dropout_mask, gelu_slice, gelu_slice_bwd, layernorm_bwd, layernorm_fwd,
    linear_bwd, linear_fwd, softmax_rows, softmax_rows_bwd,
};
use super::{loss, Layout, TstError, TstModel, INPUT_CHANNELS};
use crate::tst::windows::WindowBatch;

/// Result of one paired forward/backward evaluation.
#[derive(Debug, Clone)]
pub struct BackwardOut {
    /// Predictions of the forward pass that produced the gradient, B×H.
    pub pred: Vec<f64>,
    /// Mean-squared-error loss against the batch targets.
    pub loss: f64,
    /// Gradient of the loss, laid out like the flat parameter vector.
    pub grad: Vec<f64>,
}

/// Per-encoder-layer activations retained for the backward pass.
struct LayerCache {
    /// Normalized pre-attention activations and their statistics.
    xhat1: Vec<f64>,
    inv_std1: Vec<f64>,
    /// LN₁ output — the input of the Q/K/V projections.
    x1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention probabilities, B×h×N×N.
    probs: Vec<f64>,
    /// Concatenated per-head context vectors — input of the output projection.
    ctx: Vec<f64>,
    mask_attn: Vec<f64>,
    xhat2: Vec<f64>,
    inv_std2: Vec<f64>,
    /// LN₂ output — the input of the FFN.
    x2: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
    mask_ffn: Vec<f64>,
}

/// Everything the backward pass needs from a forward evaluation.
struct Cache {
    patches: Vec<f64>,
    mask_embed: Vec<f64>,
    layers: Vec<LayerCache>,
    xhat_f: Vec<f64>,
    inv_std_f: Vec<f64>,
    fut_pre: Vec<f64>,
    mask_fut: Vec<f64>,
    /// [r_ctx ; r_fut] — input of the fusion layer, B×2d.
    fuse_in: Vec<f64>,
    fuse_pre: Vec<f64>,
    mask_fuse: Vec<f64>,
    /// Fused representation after dropout — input of the head, B×d.
    head_in: Vec<f64>,
}

/// Reshape a two-channel context (B×L each) into B·N patch rows of length 2P:
/// within a patch the voltage samples come first, then the current samples.
pub fn patchify(context_v: &[f64], context_i: &[f64], b: usize, l: usize, p: usize) -> Vec<f64> {
    assert_eq!(context_v.len(), b * l);
    assert_eq!(context_i.len(), b * l);
    assert_eq!(l % p, 0, "patch length must divide context length");
    let n = l / p;
    let mut out = vec![0.0; b * n * INPUT_CHANNELS * p];
    for bi in 0..b {
        for pi in 0..n {
            let row = (bi * n + pi) * INPUT_CHANNELS * p;
            let src = bi * l + pi * p;
            out[row..row + p].copy_from_slice(&context_v[src..src + p]);
            out[row + p..row + 2 * p].copy_from_slice(&context_i[src..src + p]);
        }
    }
    out
}

/// Inverse of [`patchify`]; returns the (voltage, current) channels.
pub fn unpatchify(patches: &[f64], b: usize, l: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let n = l / p;
    assert_eq!(patches.len(), b * n * INPUT_CHANNELS * p);
    let mut v = vec![0.0; b * l];
    let mut i = vec![0.0; b * l];
    for bi in 0..b {
        for pi in 0..n {
            let row = (bi * n + pi) * INPUT_CHANNELS * p;
            let dst = bi * l + pi * p;
            v[dst..dst + p].copy_from_slice(&patches[row..row + p]);
            i[dst..dst + p].copy_from_slice(&patches[row + p..row + 2 * p]);
        }
    }
    (v, i)
}

fn ensure_finite(stage: &str, values: &[f64]) -> Result<(), TstError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TstError::NonFinite {
            stage: stage.to_string(),
        })
    }
}

fn check_batch(model: &TstModel, batch: &WindowBatch) -> Result<(), TstError> {
    let cfg = &model.cfg;
    if batch.l != cfg.context_len || batch.h != cfg.horizon {
        return Err(TstError::ShapeMismatch {
            reason: format!(
                "batch has context {} / horizon {}, model expects {} / {}",
                batch.l, batch.h, cfg.context_len, cfg.horizon
            ),
        });
    }
    if batch.context_v.len() != batch.b * batch.l
        || batch.context_i.len() != batch.b * batch.l
        || batch.future_i.len() != batch.b * batch.h
        || batch.target.len() != batch.b * batch.h
    {
        return Err(TstError::ShapeMismatch {
            reason: "batch buffers inconsistent with declared dimensions".into(),
        });
    }
    if batch.b == 0 {
        return Err(TstError::NoWindows);
    }
    Ok(())
}

/// H-step predictions for a batch, flattened B×H. With `training` set,
/// dropout masks are drawn from `seed`; otherwise the pass is deterministic
/// and the seed is ignored.
pub fn forward(
    model: &TstModel,
    batch: &WindowBatch,
    training: bool,
    seed: u64,
) -> Result<Vec<f64>, TstError> {
    forward_cached(model, batch, training, seed).map(|(pred, _)| pred)
}

fn forward_cached(
    model: &TstModel,
    batch: &WindowBatch,
    training: bool,
    seed: u64,
) -> Result<(Vec<f64>, Cache), TstError> {
    check_batch(model, batch)?;
    let cfg = &model.cfg;
    let (b, d, f, h_len) = (batch.b, cfg.d_model, cfg.d_ff, cfg.horizon);
    let n = cfg.num_patches();
    let heads = cfg.heads;
    let dk = d / heads;
    let rows = b * n;
    let patch_in = INPUT_CHANNELS * cfg.patch_len;
    let p_drop = if training { cfg.dropout } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Patch embedding + positional tags + dropout.
    let patches = patchify(
        &batch.context_v,
        &batch.context_i,
        b,
        cfg.context_len,
        cfg.patch_len,
    );
    let mut tokens = vec![0.0; rows * d];
    linear_fwd(
        &patches,
        model.tensor("embed.w"),
        model.tensor("embed.b"),
        rows,
        patch_in,
        d,
        &mut tokens,
    );
    let pos = model.tensor("pos");
    for r in 0..rows {
        let p_idx = r % n;
        for j in 0..d {
            tokens[r * d + j] += pos[p_idx * d + j];
        }
    }
    let mask_embed = dropout_mask(&mut rng, rows * d, p_drop);
    apply_mask(&mut tokens, &mask_embed);
    ensure_finite("patch embedding", &tokens)?;

    // Pre-norm encoder blocks.
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let t = |suffix: &str| model.tensor(&format!("layer{l}.{suffix}"));

        let mut x1 = vec![0.0; rows * d];
        let mut xhat1 = vec![0.0; rows * d];
        let mut inv_std1 = vec![0.0; rows];
        layernorm_fwd(
            &tokens,
            t("ln1.g"),
            t("ln1.b"),
            rows,
            d,
            &mut x1,
            &mut xhat1,
            &mut inv_std1,
        );

        let mut q = vec![0.0; rows * d];
        let mut k = vec![0.0; rows * d];
        let mut v = vec![0.0; rows * d];
        linear_fwd(&x1, t("attn.wq"), t("attn.bq"), rows, d, d, &mut q);
        linear_fwd(&x1, t("attn.wk"), t("attn.bk"), rows, d, d, &mut k);
        linear_fwd(&x1, t("attn.wv"), t("attn.bv"), rows, d, d, &mut v);

        // Scaled dot-product attention, full (non-causal) over the N patches.
        let mut probs = vec![0.0; b * heads * n * n];
        let mut ctx = vec![0.0; rows * d];
        for bi in 0..b {
            for hd in 0..heads {
                let hoff = hd * dk;
                for p_q in 0..n {
                    let qrow = &q[(bi * n + p_q) * d + hoff..][..dk];
                    let prow =
                        &mut probs[((bi * heads + hd) * n + p_q) * n..][..n];
                    for (p_k, slot) in prow.iter_mut().enumerate() {
                        let krow = &k[(bi * n + p_k) * d + hoff..][..dk];
                        *slot = qrow
                            .iter()
                            .zip(krow)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            * inv_sqrt_dk;
                    }
                    softmax_rows(prow, 1, n);
                    let crow = &mut ctx[(bi * n + p_q) * d + hoff..][..dk];
                    for (p_k, &w) in prow.iter().enumerate() {
                        let vrow = &v[(bi * n + p_k) * d + hoff..][..dk];
                        for (c, &vv) in crow.iter_mut().zip(vrow) {
                            *c += w * vv;
                        }
                    }
                }
            }
        }

        let mut attn_out = vec![0.0; rows * d];
        linear_fwd(&ctx, t("attn.wo"), t("attn.bo"), rows, d, d, &mut attn_out);
        let mask_attn = dropout_mask(&mut rng, rows * d, p_drop);
        apply_mask(&mut attn_out, &mask_attn);
        for (tok, a) in tokens.iter_mut().zip(&attn_out) {
            *tok += a;
        }

        let mut x2 = vec![0.0; rows * d];
        let mut xhat2 = vec![0.0; rows * d];
        let mut inv_std2 = vec![0.0; rows];
        layernorm_fwd(
            &tokens,
            t("ln2.g"),
            t("ln2.b"),
            rows,
            d,
            &mut x2,
            &mut xhat2,
            &mut inv_std2,
        );
        let mut ffn_pre = vec![0.0; rows * f];
        linear_fwd(&x2, t("ffn.w1"), t("ffn.b1"), rows, d, f, &mut ffn_pre);
        let mut ffn_act = vec![0.0; rows * f];
        gelu_slice(&ffn_pre, &mut ffn_act);
        let mut ffn_out = vec![0.0; rows * d];
        linear_fwd(&ffn_act, t("ffn.w2"), t("ffn.b2"), rows, f, d, &mut ffn_out);
        let mask_ffn = dropout_mask(&mut rng, rows * d, p_drop);
        apply_mask(&mut ffn_out, &mask_ffn);
        for (tok, a) in tokens.iter_mut().zip(&ffn_out) {
            *tok += a;
        }
        ensure_finite(&format!("encoder layer {l}"), &tokens)?;

        layers.push(LayerCache {
            xhat1,
            inv_std1,
            x1,
            q,
            k,
            v,
            probs,
            ctx,
            mask_attn,
            xhat2,
            inv_std2,
            x2,
            ffn_pre,
            ffn_act,
            mask_ffn,
        });
    }

    // Final LayerNorm; keep only the last patch token per sample.
    let mut y = vec![0.0; rows * d];
    let mut xhat_f = vec![0.0; rows * d];
    let mut inv_std_f = vec![0.0; rows];
    layernorm_fwd(
        &tokens,
        model.tensor("final_ln.g"),
        model.tensor("final_ln.b"),
        rows,
        d,
        &mut y,
        &mut xhat_f,
        &mut inv_std_f,
    );
    ensure_finite("final layer norm", &y)?;

    // Future-current projection.
    let mut fut_pre = vec![0.0; b * d];
    linear_fwd(
        &batch.future_i,
        model.tensor("fut.w"),
        model.tensor("fut.b"),
        b,
        h_len,
        d,
        &mut fut_pre,
    );
    let mut r_fut = vec![0.0; b * d];
    gelu_slice(&fut_pre, &mut r_fut);
    let mask_fut = dropout_mask(&mut rng, b * d, p_drop);
    apply_mask(&mut r_fut, &mask_fut);
    ensure_finite("future-current projection", &r_fut)?;

    // Fuse last-patch context with the future representation.
    let mut fuse_in = vec![0.0; b * 2 * d];
    for bi in 0..b {
        let last = (bi * n + (n - 1)) * d;
        fuse_in[bi * 2 * d..bi * 2 * d + d].copy_from_slice(&y[last..last + d]);
        fuse_in[bi * 2 * d + d..(bi + 1) * 2 * d].copy_from_slice(&r_fut[bi * d..(bi + 1) * d]);
    }
    let mut fuse_pre = vec![0.0; b * d];
    linear_fwd(
        &fuse_in,
        model.tensor("fuse.w"),
        model.tensor("fuse.b"),
        b,
        2 * d,
        d,
        &mut fuse_pre,
    );
    let mut head_in = vec![0.0; b * d];
    gelu_slice(&fuse_pre, &mut head_in);
    let mask_fuse = dropout_mask(&mut rng, b * d, p_drop);
    apply_mask(&mut head_in, &mask_fuse);
    ensure_finite("fusion", &head_in)?;

    let mut pred = vec![0.0; b * h_len];
    linear_fwd(
        &head_in,
        model.tensor("head.w"),
        model.tensor("head.b"),
        b,
        d,
        h_len,
        &mut pred,
    );
    ensure_finite("forecast head", &pred)?;

    Ok((
        pred,
        Cache {
            patches,
            mask_embed,
            layers,
            xhat_f,
            inv_std_f,
            fut_pre,
            mask_fut,
            fuse_in,
            fuse_pre,
            mask_fuse,
            head_in,
        },
    ))
}

/// Mutable weight/bias gradient spans for a linear layer. Relies on the
/// layout placing each bias directly after its weight.
fn wb_mut<'a>(
    grad: &'a mut [f64],
    layout: &Layout,
    w: &str,
    b: &str,
) -> (&'a mut [f64], &'a mut [f64]) {
    let (wo, wl, _) = layout.entry(w).expect("weight tensor");
    let (bo, bl, _) = layout.entry(b).expect("bias tensor");
    debug_assert_eq!(wo + wl, bo, "bias must directly follow its weight");
    grad[wo..bo + bl].split_at_mut(wl)
}

/// Gradient of the mean-squared-error loss with respect to every parameter,
/// via reverse-mode differentiation of the same computation as [`forward`]
/// in training mode (dropout masks drawn from `seed`).
pub fn backward(
    model: &TstModel,
    batch: &WindowBatch,
    seed: u64,
) -> Result<BackwardOut, TstError> {
    let (pred, cache) = forward_cached(model, batch, true, seed)?;
    let loss_val = loss(&pred, &batch.target);

    let cfg = &model.cfg;
    let layout = model.layout();
    let (b, d, f, h_len) = (batch.b, cfg.d_model, cfg.d_ff, cfg.horizon);
    let n = cfg.num_patches();
    let heads = cfg.heads;
    let dk = d / heads;
    let rows = b * n;
    let patch_in = INPUT_CHANNELS * cfg.patch_len;
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();
    let mut grad = vec![0.0; layout.total()];

    // d(MSE)/d(pred).
    let scale = 2.0 / (b * h_len) as f64;
    let dpred: Vec<f64> = pred
        .iter()
        .zip(&batch.target)
        .map(|(p, t)| scale * (p - t))
        .collect();

    // Head.
    let mut dhead_in = vec![0.0; b * d];
    {
        let (dw, db) = wb_mut(&mut grad, layout, "head.w", "head.b");
        linear_bwd(
            &cache.head_in,
            model.tensor("head.w"),
            &dpred,
            b,
            d,
            h_len,
            &mut dhead_in,
            dw,
            db,
        );
    }

    // Fusion: dropout → GELU → linear.
    apply_mask(&mut dhead_in, &cache.mask_fuse);
    let mut dfuse_pre = vec![0.0; b * d];
    gelu_slice_bwd(&cache.fuse_pre, &dhead_in, &mut dfuse_pre);
    let mut dfuse_in = vec![0.0; b * 2 * d];
    {
        let (dw, db) = wb_mut(&mut grad, layout, "fuse.w", "fuse.b");
        linear_bwd(
            &cache.fuse_in,
            model.tensor("fuse.w"),
            &dfuse_pre,
            b,
            2 * d,
            d,
            &mut dfuse_in,
            dw,
            db,
        );
    }

    // Split the fusion gradient into context and future halves.
    let mut dy = vec![0.0; rows * d];
    let mut dr_fut = vec![0.0; b * d];
    for bi in 0..b {
        let last = (bi * n + (n - 1)) * d;
        dy[last..last + d].copy_from_slice(&dfuse_in[bi * 2 * d..bi * 2 * d + d]);
        dr_fut[bi * d..(bi + 1) * d]
            .copy_from_slice(&dfuse_in[bi * 2 * d + d..(bi + 1) * 2 * d]);
    }

    // Future projection: dropout → GELU → linear (input gradient discarded —
    // the future current is data, not a parameter).
    apply_mask(&mut dr_fut, &cache.mask_fut);
    let mut dfut_pre = vec![0.0; b * d];
    gelu_slice_bwd(&cache.fut_pre, &dr_fut, &mut dfut_pre);
    let mut dfut_in = vec![0.0; b * h_len];
    {
        let (dw, db) = wb_mut(&mut grad, layout, "fut.w", "fut.b");
        linear_bwd(
            &batch.future_i,
            model.tensor("fut.w"),
            &dfut_pre,
            b,
            h_len,
            d,
            &mut dfut_in,
            dw,
            db,
        );
    }

    // Final LayerNorm.
    let mut dresid = vec![0.0; rows * d];
    {
        let (dg, db) = wb_mut(&mut grad, layout, "final_ln.g", "final_ln.b");
        layernorm_bwd(
            &cache.xhat_f,
            &cache.inv_std_f,
            model.tensor("final_ln.g"),
            &dy,
            rows,
            d,
            &mut dresid,
            dg,
            db,
        );
    }

    // Encoder blocks, reversed.
    for l in (0..cfg.layers).rev() {
        let lc = &cache.layers[l];
        let t = |suffix: &str| model.tensor(&format!("layer{l}.{suffix}"));
        let name = |suffix: &str| format!("layer{l}.{suffix}");

        // FFN branch: residual add means dresid flows both straight through
        // and into the dropout-masked FFN output.
        let mut dffn_out = dresid.clone();
        apply_mask(&mut dffn_out, &lc.mask_ffn);
        let mut dffn_act = vec![0.0; rows * f];
        {
            let (dw, db) = wb_mut(&mut grad, layout, &name("ffn.w2"), &name("ffn.b2"));
            linear_bwd(
                &lc.ffn_act,
                t("ffn.w2"),
                &dffn_out,
                rows,
                f,
                d,
                &mut dffn_act,
                dw,
                db,
            );
        }
        let mut dffn_pre = vec![0.0; rows * f];
        gelu_slice_bwd(&lc.ffn_pre, &dffn_act, &mut dffn_pre);
        let mut dx2 = vec![0.0; rows * d];
        {
            let (dw, db) = wb_mut(&mut grad, layout, &name("ffn.w1"), &name("ffn.b1"));
            linear_bwd(&lc.x2, t("ffn.w1"), &dffn_pre, rows, d, f, &mut dx2, dw, db);
        }
        let mut dresid_mid = vec![0.0; rows * d];
        {
            let (dg, db) = wb_mut(&mut grad, layout, &name("ln2.g"), &name("ln2.b"));
            layernorm_bwd(
                &lc.xhat2,
                &lc.inv_std2,
                t("ln2.g"),
                &dx2,
                rows,
                d,
                &mut dresid_mid,
                dg,
                db,
            );
        }
        for (m, r) in dresid_mid.iter_mut().zip(&dresid) {
            *m += r;
        }

        // Attention branch.
        let mut dattn_out = dresid_mid.clone();
        apply_mask(&mut dattn_out, &lc.mask_attn);
        let mut dctx = vec![0.0; rows * d];
        {
            let (dw, db) = wb_mut(&mut grad, layout, &name("attn.wo"), &name("attn.bo"));
            linear_bwd(
                &lc.ctx,
                t("attn.wo"),
                &dattn_out,
                rows,
                d,
                d,
                &mut dctx,
                dw,
                db,
            );
        }

        // Scaled dot-product attention backward.
        let mut dq = vec![0.0; rows * d];
        let mut dk_ = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dprobs_row = vec![0.0; n];
        let mut dscores_row = vec![0.0; n];
        for bi in 0..b {
            for hd in 0..heads {
                let hoff = hd * dk;
                for p_q in 0..n {
                    let prow = &lc.probs[((bi * heads + hd) * n + p_q) * n..][..n];
                    let dctx_row = &dctx[(bi * n + p_q) * d + hoff..][..dk];
                    for p_k in 0..n {
                        let vrow = &lc.v[(bi * n + p_k) * d + hoff..][..dk];
                        dprobs_row[p_k] = dctx_row
                            .iter()
                            .zip(vrow)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                        let dvrow = &mut dv[(bi * n + p_k) * d + hoff..][..dk];
                        for (dvv, &c) in dvrow.iter_mut().zip(dctx_row) {
                            *dvv += prow[p_k] * c;
                        }
                    }
                    softmax_rows_bwd(prow, &dprobs_row, 1, n, &mut dscores_row);
                    let qrow: Vec<f64> = lc.q[(bi * n + p_q) * d + hoff..][..dk].to_vec();
                    let dqrow = &mut dq[(bi * n + p_q) * d + hoff..][..dk];
                    for p_k in 0..n {
                        let ds = dscores_row[p_k] * inv_sqrt_dk;
                        let krow = &lc.k[(bi * n + p_k) * d + hoff..][..dk];
                        for (dqv, &kv) in dqrow.iter_mut().zip(krow) {
                            *dqv += ds * kv;
                        }
                        let dkrow = &mut dk_[(bi * n + p_k) * d + hoff..][..dk];
                        for (dkv, &qv) in dkrow.iter_mut().zip(&qrow) {
                            *dkv += ds * qv;
                        }
                    }
                }
            }
        }

        // Q/K/V projections share the LN₁ output as input.
        let mut dx1 = vec![0.0; rows * d];
        let mut dx1_part = vec![0.0; rows * d];
        for (proj, bias, dout) in [
            ("attn.wq", "attn.bq", &dq),
            ("attn.wk", "attn.bk", &dk_),
            ("attn.wv", "attn.bv", &dv),
        ] {
            let (dw, db) = wb_mut(&mut grad, layout, &name(proj), &name(bias));
            linear_bwd(&lc.x1, t(proj), dout, rows, d, d, &mut dx1_part, dw, db);
            for (acc, p) in dx1.iter_mut().zip(&dx1_part) {
                *acc += p;
            }
        }

        let mut dresid_in = vec![0.0; rows * d];
        {
            let (dg, db) = wb_mut(&mut grad, layout, &name("ln1.g"), &name("ln1.b"));
            layernorm_bwd(
                &lc.xhat1,
                &lc.inv_std1,
                t("ln1.g"),
                &dx1,
                rows,
                d,
                &mut dresid_in,
                dg,
                db,
            );
        }
        for (i_, m) in dresid_in.iter_mut().zip(&dresid_mid) {
            *i_ += m;
        }
        dresid = dresid_in;
    }

    // Embedding: dropout → positional (pure add) → linear.
    apply_mask(&mut dresid, &cache.mask_embed);
    {
        let (pos_off, pos_len, _) = layout.entry("pos").expect("pos tensor");
        let dpos = &mut grad[pos_off..pos_off + pos_len];
        for r in 0..rows {
            let p_idx = r % n;
            for j in 0..d {
                dpos[p_idx * d + j] += dresid[r * d + j];
            }
        }
    }
    let mut dpatches = vec![0.0; rows * patch_in];
    {
        let (dw, db) = wb_mut(&mut grad, layout, "embed.w", "embed.b");
        linear_bwd(
            &cache.patches,
            model.tensor("embed.w"),
            &dresid,
            rows,
            patch_in,
            d,
            &mut dpatches,
            dw,
            db,
        );
    }

    ensure_finite("parameter gradients", &grad)?;
    Ok(BackwardOut {
        pred,
        loss: loss_val,
        grad,
    })
}
