//! Trainable segmentation decoder.
//!
//! The decoder projects every tapped latent to a common width, sums them
//! into a residual conv block (`x`), expands channels, runs two upsample
//! layers (USL: bilinear 2x + two 3x3 convs with a residual to the upsampled
//! input), aligns everything with the image embedding at the largest scale,
//! and fuses the concatenation down to per-pixel class logits.
//!
//! Forward passes record a trace so the backward pass — written by hand,
//! kernel by kernel — can produce analytic gradients for every `decoder.*`
//! parameter. The encoder side of the graph is frozen, so gradients stop at
//! the latent projections and the image embedding.

use ndarray::{concatenate, s, Array3, Array4, Axis};

use crate::config::ModelConfig;
use crate::encoder::{tokens_to_map, EncoderOutput};
use crate::error::{Result, RodError};
use crate::params::TensorMap;
use crate::tensor::ops::{
    channel_norm, channel_norm_backward, conv2d, conv2d_backward, relu, relu_backward,
    resize_bilinear, resize_bilinear_backward,
};
use crate::tensor::{Elem, ImageTensor, SegLogits, TokenGrid};

/// Named intermediate feature maps of one decoder pass.
#[derive(Debug, Clone)]
pub struct DecoderFeatures<T> {
    /// Summed and residually refined latents, `(b, decoder_width, g, g)`.
    pub x: ImageTensor<T>,
    /// Channel-expanded features at grid scale, `(b, fusion_width, g, g)`.
    pub feats0: ImageTensor<T>,
    /// After the first upsample layer, `(b, fusion_width, 2g, 2g)`.
    pub feats1: ImageTensor<T>,
    /// After the second upsample layer, `(b, fusion_width, 4g, 4g)`.
    pub feats2: ImageTensor<T>,
    /// Fused map after concat + 1x1 reduction, `(b, fusion_width, 4g, 4g)`.
    pub fuse: ImageTensor<T>,
}

// ---------------------------------------------------------------------------
// conv block: 3x3 conv (+ optional channel norm) + ReLU, with recorded trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvBlockTrace<T> {
    input: Array4<T>,
    conv_out: Array4<T>,
    norm_stats: Option<(Array3<T>, Array3<T>)>,
    pre_relu: Array4<T>,
}

#[derive(Debug, Clone)]
struct ConvBlockGrads<T> {
    conv_w: Array4<T>,
    conv_b: ndarray::Array1<T>,
    norm: Option<(ndarray::Array1<T>, ndarray::Array1<T>)>,
}

fn conv_block_forward<T: Elem>(
    x: &Array4<T>,
    params: &TensorMap<T>,
    prefix: &str,
    idx: usize,
    cfg: &ModelConfig,
) -> Result<(Array4<T>, ConvBlockTrace<T>)> {
    let w = params.view4(&format!("{prefix}.conv{idx}.weight"))?;
    let b = params.view1(&format!("{prefix}.conv{idx}.bias"))?;
    let conv_out = conv2d(x, &w, Some(&b), 1, 1);
    let (pre_relu, norm_stats) = if cfg.conv_block_norm {
        let g = params.view1(&format!("{prefix}.norm{idx}.weight"))?;
        let beta = params.view1(&format!("{prefix}.norm{idx}.bias"))?;
        let (normed, mean, rstd) = channel_norm(&conv_out, &g, &beta, cfg.norm_eps);
        (normed, Some((mean, rstd)))
    } else {
        (conv_out.clone(), None)
    };
    let out = relu(&pre_relu);
    Ok((
        out,
        ConvBlockTrace {
            input: x.clone(),
            conv_out,
            norm_stats,
            pre_relu,
        },
    ))
}

fn conv_block_backward<T: Elem>(
    trace: &ConvBlockTrace<T>,
    params: &TensorMap<T>,
    prefix: &str,
    idx: usize,
    cfg: &ModelConfig,
    grad_out: &Array4<T>,
) -> Result<(Array4<T>, ConvBlockGrads<T>)> {
    let grad_pre_relu = relu_backward(&trace.pre_relu, grad_out);
    let (grad_conv_out, norm_grads) = match (&trace.norm_stats, cfg.conv_block_norm) {
        (Some((mean, rstd)), true) => {
            let g = params.view1(&format!("{prefix}.norm{idx}.weight"))?;
            let (gx, gg, gb) = channel_norm_backward(&trace.conv_out, &g, mean, rstd, &grad_pre_relu);
            (gx, Some((gg, gb)))
        }
        _ => (grad_pre_relu, None),
    };
    let w = params.view4(&format!("{prefix}.conv{idx}.weight"))?;
    let (gx, gw, gb) = conv2d_backward(&trace.input, &w, &grad_conv_out, 1, 1, true);
    Ok((
        gx.expect("input grad requested"),
        ConvBlockGrads {
            conv_w: gw,
            conv_b: gb,
            norm: norm_grads,
        },
    ))
}

fn insert_conv_block_grads<T: Elem>(
    grads: &mut TensorMap<T>,
    prefix: &str,
    idx: usize,
    g: ConvBlockGrads<T>,
) {
    grads.insert(format!("{prefix}.conv{idx}.weight"), g.conv_w.into_dyn());
    grads.insert(format!("{prefix}.conv{idx}.bias"), g.conv_b.into_dyn());
    if let Some((gg, gb)) = g.norm {
        grads.insert(format!("{prefix}.norm{idx}.weight"), gg.into_dyn());
        grads.insert(format!("{prefix}.norm{idx}.bias"), gb.into_dyn());
    }
}

// ---------------------------------------------------------------------------
// spec operations
// ---------------------------------------------------------------------------

/// Name of the projection applied to latent `layer_index`.
fn projection_prefix(cfg: &ModelConfig, layer_index: usize) -> String {
    if cfg.shared_latent_projection {
        "decoder.project.shared".to_string()
    } else {
        format!("decoder.project.{layer_index}")
    }
}

/// Projects latent `layer_index` from the embedding width down to the
/// decoder width with a learned 1x1 convolution (per-layer by default).
pub fn project_latent<T: Elem>(
    latent: &TokenGrid<T>,
    layer_index: usize,
    cfg: &ModelConfig,
    params: &TensorMap<T>,
) -> Result<ImageTensor<T>> {
    if layer_index >= cfg.depth {
        return Err(RodError::Config(format!(
            "latent index {layer_index} out of range (depth {})",
            cfg.depth
        )));
    }
    let prefix = projection_prefix(cfg, layer_index);
    let w = params.view4(&format!("{prefix}.weight"))?;
    let b = params.view1(&format!("{prefix}.bias"))?;
    let map = tokens_to_map(latent);
    Ok(conv2d(&map, &w, Some(&b), 1, 0))
}

struct FuseTrace<T> {
    cb1: ConvBlockTrace<T>,
    cb2: ConvBlockTrace<T>,
}

fn fuse_latents_traced<T: Elem>(
    projected: &[ImageTensor<T>],
    cfg: &ModelConfig,
    params: &TensorMap<T>,
) -> Result<(ImageTensor<T>, FuseTrace<T>)> {
    let first = projected
        .first()
        .ok_or_else(|| RodError::Config("fuse_latents requires at least one projected latent".into()))?;
    let mut s = first.clone();
    for (i, p) in projected.iter().enumerate().skip(1) {
        if p.dim() != first.dim() {
            return Err(RodError::shape(
                format!("fuse_latents input {i}"),
                format!("{:?}", first.dim()),
                format!("{:?}", p.dim()),
            ));
        }
        s += p;
    }
    let (c1, cb1) = conv_block_forward(&s, params, "decoder.fuse", 1, cfg)?;
    let (c2, cb2) = conv_block_forward(&c1, params, "decoder.fuse", 2, cfg)?;
    let x = c2 + &s;
    Ok((x, FuseTrace { cb1, cb2 }))
}

/// Sums the projected latents and refines the sum with two 3x3 convolutions
/// plus a residual connection back to the sum.
pub fn fuse_latents<T: Elem>(
    projected: &[ImageTensor<T>],
    cfg: &ModelConfig,
    params: &TensorMap<T>,
) -> Result<ImageTensor<T>> {
    fuse_latents_traced(projected, cfg, params).map(|(x, _)| x)
}

/// 1x1 convolution taking the fused map from decoder width to fusion width.
pub fn channel_expand<T: Elem>(
    x: &ImageTensor<T>,
    cfg: &ModelConfig,
    params: &TensorMap<T>,
) -> Result<ImageTensor<T>> {
    if x.dim().1 != cfg.decoder_width {
        return Err(RodError::Config(format!(
            "channel_expand expects {} input channels, got {}",
            cfg.decoder_width,
            x.dim().1
        )));
    }
    let w = params.view4("decoder.expand.weight")?;
    let b = params.view1("decoder.expand.bias")?;
    Ok(conv2d(x, &w, Some(&b), 1, 0))
}

/// Bilinear upsampling by an integer factor, half-pixel centers.
pub fn bilinear_upsample<T: Elem>(x: &ImageTensor<T>, factor: usize) -> ImageTensor<T> {
    let (_, _, h, w) = x.dim();
    resize_bilinear(x, h * factor, w * factor)
}

struct UslTrace<T> {
    upsampled: Array4<T>,
    cb1: ConvBlockTrace<T>,
    cb2: ConvBlockTrace<T>,
}

fn usl_traced<T: Elem>(
    x: &ImageTensor<T>,
    cfg: &ModelConfig,
    params: &TensorMap<T>,
    prefix: &str,
) -> Result<(ImageTensor<T>, UslTrace<T>)> {
    let upsampled = bilinear_upsample(x, 2);
    let (c1, cb1) = conv_block_forward(&upsampled, params, prefix, 1, cfg)?;
    let (c2, cb2) = conv_block_forward(&c1, params, prefix, 2, cfg)?;
    let out = c2 + &upsampled;
    Ok((
        out,
        UslTrace {
            upsampled,
            cb1,
            cb2,
        },
    ))
}

fn usl_backward<T: Elem>(
    trace: &UslTrace<T>,
    cfg: &ModelConfig,
    params: &TensorMap<T>,
    prefix: &str,
    grad_out: &Array4<T>,
    grads: &mut TensorMap<T>,
) -> Result<Array4<T>> {
    let (g_c1, g2) = conv_block_backward(&trace.cb2, params, prefix, 2, cfg, grad_out)?;
    let (g_up_conv, g1) = conv_block_backward(&trace.cb1, params, prefix, 1, cfg, &g_c1)?;
    insert_conv_block_grads(grads, prefix, 2, g2);
    insert_conv_block_grads(grads, prefix, 1, g1);
    let g_up = g_up_conv + grad_out; // conv path + residual path
    let (_, _, uh, uw) = trace.upsampled.dim();
    Ok(resize_bilinear_backward(&g_up, uh / 2, uw / 2))
}

/// Upsample layer: bilinear 2x followed by two 3x3 conv blocks and a
/// residual connection to the upsampled input.
pub fn usl<T: Elem>(
    x: &ImageTensor<T>,
    cfg: &ModelConfig,
    params: &TensorMap<T>,
    prefix: &str,
) -> Result<ImageTensor<T>> {
    usl_traced(x, cfg, params, prefix).map(|(y, _)| y)
}

/// Bilinearly resizes the image embedding and the three feature maps to the
/// spatial side of `feats2`; `feats2` passes through untouched.
pub fn align_features<T: Elem>(
    eb: &ImageTensor<T>,
    feats0: &ImageTensor<T>,
    feats1: &ImageTensor<T>,
    feats2: &ImageTensor<T>,
) -> Result<[ImageTensor<T>; 4]> {
    let c = feats2.dim().1;
    for (name, m) in [("image embedding", eb), ("feats0", feats0), ("feats1", feats1)] {
        if m.dim().1 != c {
            return Err(RodError::Config(format!(
                "align_features: {name} has {} channels, expected {c}",
                m.dim().1
            )));
        }
    }
    let (_, _, th, tw) = feats2.dim();
    Ok([
        resize_bilinear(eb, th, tw),
        resize_bilinear(feats0, th, tw),
        resize_bilinear(feats1, th, tw),
        feats2.clone(),
    ])
}

/// Concatenates the four aligned maps, reduces channels with a 1x1
/// convolution, applies the per-pixel linear head and resizes the logits to
/// `out_size` (height, width).
pub fn fuse_and_predict<T: Elem>(
    aligned: &[ImageTensor<T>; 4],
    cfg: &ModelConfig,
    params: &TensorMap<T>,
    out_size: (usize, usize),
) -> Result<SegLogits<T>> {
    if aligned[0].dim().1 != cfg.fusion_width {
        return Err(RodError::Config(format!(
            "fuse_and_predict expects {} channels per map, got {}",
            cfg.fusion_width,
            aligned[0].dim().1
        )));
    }
    let (logits, _, _) = fuse_and_predict_traced(aligned, params, out_size)?;
    Ok(logits)
}

fn fuse_and_predict_traced<T: Elem>(
    aligned: &[ImageTensor<T>; 4],
    params: &TensorMap<T>,
    out_size: (usize, usize),
) -> Result<(SegLogits<T>, Array4<T>, Array4<T>)> {
    let d0 = aligned[0].dim();
    for (i, m) in aligned.iter().enumerate() {
        if m.dim() != d0 {
            return Err(RodError::shape(
                format!("fuse_and_predict input {i}"),
                format!("{d0:?}"),
                format!("{:?}", m.dim()),
            ));
        }
    }
    let views: Vec<_> = aligned.iter().map(|m| m.view()).collect();
    let cat = concatenate(Axis(1), &views)
        .map_err(|e| RodError::Config(format!("fuse_and_predict concat: {e}")))?;
    let w = params.view4("decoder.fusion.weight")?;
    let b = params.view1("decoder.fusion.bias")?;
    let fused = conv2d(&cat, &w, Some(&b), 1, 0);
    let hw = params.view4("decoder.head.weight")?;
    let hb = params.view1("decoder.head.bias")?;
    let logits_pre = conv2d(&fused, &hw, Some(&hb), 1, 0);
    let logits = resize_bilinear(&logits_pre, out_size.0, out_size.1);
    Ok((logits, cat, fused))
}

// ---------------------------------------------------------------------------
// full decoder
// ---------------------------------------------------------------------------

/// Everything recorded during a traced decoder pass, enough to run the
/// backward pass without recomputation.
pub struct DecoderTrace<T> {
    latent_maps: Vec<ImageTensor<T>>,
    fuse: FuseTrace<T>,
    x: ImageTensor<T>,
    feats0: ImageTensor<T>,
    usl1: UslTrace<T>,
    feats1: ImageTensor<T>,
    usl2: UslTrace<T>,
    feats2: ImageTensor<T>,
    cat: Array4<T>,
    fuse_map: ImageTensor<T>,
    out_size: (usize, usize),
}

impl<T: Elem> DecoderTrace<T> {
    /// The spec-level intermediate features of this pass.
    pub fn features(&self) -> DecoderFeatures<T> {
        DecoderFeatures {
            x: self.x.clone(),
            feats0: self.feats0.clone(),
            feats1: self.feats1.clone(),
            feats2: self.feats2.clone(),
            fuse: self.fuse_map.clone(),
        }
    }
}

/// Full decoder pass returning logits plus the backward trace.
pub fn decoder_forward_traced<T: Elem>(
    enc: &EncoderOutput<T>,
    cfg: &ModelConfig,
    params: &TensorMap<T>,
    out_size: (usize, usize),
) -> Result<(SegLogits<T>, DecoderTrace<T>)> {
    if enc.latents.len() != cfg.depth {
        return Err(RodError::Config(format!(
            "decoder expects {} latents, got {}",
            cfg.depth,
            enc.latents.len()
        )));
    }
    let mut latent_maps = Vec::with_capacity(cfg.depth);
    let mut projected = Vec::with_capacity(cfg.depth);
    for (i, latent) in enc.latents.iter().enumerate() {
        let map = tokens_to_map(latent);
        let prefix = projection_prefix(cfg, i);
        let w = params.view4(&format!("{prefix}.weight"))?;
        let b = params.view1(&format!("{prefix}.bias"))?;
        projected.push(conv2d(&map, &w, Some(&b), 1, 0));
        latent_maps.push(map);
    }
    let (x, fuse_trace) = fuse_latents_traced(&projected, cfg, params)
        .map_err(|e| stage_err("fuse_latents", e))?;
    let feats0 = channel_expand(&x, cfg, params).map_err(|e| stage_err("channel_expand", e))?;
    let (feats1, usl1) =
        usl_traced(&feats0, cfg, params, "decoder.usl1").map_err(|e| stage_err("usl1", e))?;
    let (feats2, usl2) =
        usl_traced(&feats1, cfg, params, "decoder.usl2").map_err(|e| stage_err("usl2", e))?;
    let aligned = align_features(&enc.image_embedding, &feats0, &feats1, &feats2)
        .map_err(|e| stage_err("align_features", e))?;
    let (logits, cat, fuse_map) = fuse_and_predict_traced(&aligned, params, out_size)
        .map_err(|e| stage_err("fuse_and_predict", e))?;
    Ok((
        logits,
        DecoderTrace {
            latent_maps,
            fuse: fuse_trace,
            x,
            feats0,
            usl1,
            feats1,
            usl2,
            feats2,
            cat,
            fuse_map,
            out_size,
        },
    ))
}

fn stage_err(stage: &str, e: RodError) -> RodError {
    match e {
        RodError::Shape {
            context,
            expected,
            actual,
        } => RodError::Shape {
            context: format!("{stage}/{context}"),
            expected,
            actual,
        },
        other => RodError::Config(format!("{stage}: {other}")),
    }
}

/// Full decoder pass: projections, fusion, channel expansion, two upsample
/// layers, feature alignment and the prediction head.
pub fn decoder_forward<T: Elem>(
    enc: &EncoderOutput<T>,
    cfg: &ModelConfig,
    params: &TensorMap<T>,
    out_size: (usize, usize),
) -> Result<SegLogits<T>> {
    decoder_forward_traced(enc, cfg, params, out_size).map(|(l, _)| l)
}

/// Analytic gradients of every `decoder.*` parameter given the gradient of
/// the loss with respect to the logits.
pub fn decoder_backward<T: Elem>(
    trace: &DecoderTrace<T>,
    cfg: &ModelConfig,
    params: &TensorMap<T>,
    grad_logits: &SegLogits<T>,
) -> Result<TensorMap<T>> {
    let mut grads = TensorMap::<T>::new();
    let (_, _, ph, pw) = trace.fuse_map.dim();
    let g_out = grad_logits.dim();
    if (g_out.2, g_out.3) != trace.out_size {
        return Err(RodError::shape(
            "decoder_backward grad_logits",
            format!("{:?}", trace.out_size),
            format!("{:?}", (g_out.2, g_out.3)),
        ));
    }
    let g_logits_pre = resize_bilinear_backward(grad_logits, ph, pw);

    // head
    let head_w = params.view4("decoder.head.weight")?;
    let (g_fuse, g_hw, g_hb) = conv2d_backward(&trace.fuse_map, &head_w, &g_logits_pre, 1, 0, true);
    grads.insert("decoder.head.weight", g_hw.into_dyn());
    grads.insert("decoder.head.bias", g_hb.into_dyn());

    // fusion 1x1 over the concatenation
    let fusion_w = params.view4("decoder.fusion.weight")?;
    let (g_cat, g_fw, g_fb) =
        conv2d_backward(&trace.cat, &fusion_w, &g_fuse.expect("fuse grad"), 1, 0, true);
    grads.insert("decoder.fusion.weight", g_fw.into_dyn());
    grads.insert("decoder.fusion.bias", g_fb.into_dyn());
    let g_cat = g_cat.expect("cat grad");

    // split the concat gradient; the image-embedding slice dies at the
    // frozen encoder
    let fw_ch = cfg.fusion_width;
    let g_f0_al = g_cat.slice(s![.., fw_ch..2 * fw_ch, .., ..]).to_owned();
    let g_f1_al = g_cat.slice(s![.., 2 * fw_ch..3 * fw_ch, .., ..]).to_owned();
    let g_f2_al = g_cat.slice(s![.., 3 * fw_ch..4 * fw_ch, .., ..]).to_owned();

    let (_, _, h0, w0) = trace.feats0.dim();
    let (_, _, h1, w1) = trace.feats1.dim();
    let mut g_f1 = resize_bilinear_backward(&g_f1_al, h1, w1);
    let mut g_f0 = resize_bilinear_backward(&g_f0_al, h0, w0);

    // usl2: feats1 -> feats2
    g_f1 += &usl_backward(&trace.usl2, cfg, params, "decoder.usl2", &g_f2_al, &mut grads)?;
    // usl1: feats0 -> feats1
    g_f0 += &usl_backward(&trace.usl1, cfg, params, "decoder.usl1", &g_f1, &mut grads)?;

    // channel expansion
    let exp_w = params.view4("decoder.expand.weight")?;
    let (g_x, g_ew, g_eb) = conv2d_backward(&trace.x, &exp_w, &g_f0, 1, 0, true);
    grads.insert("decoder.expand.weight", g_ew.into_dyn());
    grads.insert("decoder.expand.bias", g_eb.into_dyn());
    let g_x = g_x.expect("x grad");

    // fuse block: x = cb2(cb1(s)) + s
    let (g_c1, g2) = conv_block_backward(&trace.fuse.cb2, params, "decoder.fuse", 2, cfg, &g_x)?;
    let (g_s_conv, g1) = conv_block_backward(&trace.fuse.cb1, params, "decoder.fuse", 1, cfg, &g_c1)?;
    insert_conv_block_grads(&mut grads, "decoder.fuse", 2, g2);
    insert_conv_block_grads(&mut grads, "decoder.fuse", 1, g1);
    let g_s = g_s_conv + &g_x;

    // latent projections: the sum broadcasts the gradient to every branch
    for (i, map) in trace.latent_maps.iter().enumerate() {
        let prefix = projection_prefix(cfg, i);
        let w = params.view4(&format!("{prefix}.weight"))?;
        let (_, g_pw, g_pb) = conv2d_backward(map, &w, &g_s, 1, 0, false);
        let mut partial = TensorMap::<T>::new();
        partial.insert(format!("{prefix}.weight"), g_pw.into_dyn());
        partial.insert(format!("{prefix}.bias"), g_pb.into_dyn());
        grads.accumulate(partial);
    }

    Ok(grads)
}
