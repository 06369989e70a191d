//! Hierarchical ConvNeXt-style encoders for the RGB and THR branches, plus
//! spatial alignment of THR features onto the RGB feature grids.
//!
//! Each branch: a 4x4 stride-4 stem, then four stages of inverted-bottleneck
//! blocks (depthwise 7x7 -> channel layer norm -> 1x1 expand x4 -> gelu ->
//! 1x1 project -> residual) separated by 2x2 stride-2 downsample convs.
//! The stage-2 output (1/8 resolution) is the low-level feature, the stage-4
//! output (1/32) the high-level feature; the stage-1 output (1/4) feeds the
//! decoder skip path.

use crate::error::{Error, Result};
use crate::params::{ParamStore, ScopedParams, LN_EPS};
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Architecture of one encoder branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_widths: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stem_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            stage_widths: [16, 32, 64, 128],
            stage_depths: [1, 1, 1, 1],
            stem_stride: 4,
        }
    }
}

impl EncoderConfig {
    pub fn rgb() -> Self {
        Self::default()
    }

    pub fn thr() -> Self {
        EncoderConfig {
            in_channels: 1,
            ..Self::default()
        }
    }

    /// Input spatial dims must be divisible by this (stem then three
    /// stride-2 downsamples).
    pub fn required_multiple(&self) -> usize {
        self.stem_stride * 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidArgument("encoder in_channels must be >= 1".into()));
        }
        if self.stem_stride != 4 {
            return Err(Error::InvalidArgument(format!(
                "encoder stem_stride must be 4, got {}",
                self.stem_stride
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("encoder stage widths must be >= 1".into()));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("encoder stage depths must be >= 1".into()));
        }
        Ok(())
    }

    /// Low-level feature width (stage-2 output).
    pub fn low_width(&self) -> usize {
        self.stage_widths[1]
    }

    /// High-level feature width (stage-4 output).
    pub fn high_width(&self) -> usize {
        self.stage_widths[3]
    }
}

/// Low- (1/8) and high-level (1/32) features of one modality.
#[derive(Clone)]
pub struct FeaturePair<E: Scalar = f32> {
    pub low: Tensor<E>,
    pub high: Tensor<E>,
}

/// All encoder outputs retained by the model; the 1/4-scale stage-1 feature
/// feeds the decoder skip connection.
#[derive(Clone)]
pub struct EncoderFeatures<E: Scalar = f32> {
    pub quarter: Tensor<E>,
    pub low: Tensor<E>,
    pub high: Tensor<E>,
}

impl<E: Scalar> EncoderFeatures<E> {
    pub fn pair(&self) -> FeaturePair<E> {
        FeaturePair {
            low: self.low.clone(),
            high: self.high.clone(),
        }
    }
}

/// Register all parameters of one encoder branch under `prefix.`.
pub fn register_encoder<E: Scalar>(
    store: &mut ParamStore<E>,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    cfg.validate()?;
    store.add_conv(
        &format!("{prefix}.stem"),
        cfg.stage_widths[0],
        cfg.in_channels,
        cfg.stem_stride,
        cfg.stem_stride,
        rng,
    )?;
    for (i, (&width, &depth)) in cfg.stage_widths.iter().zip(&cfg.stage_depths).enumerate() {
        for b in 0..depth {
            let base = format!("{prefix}.stage{i}.block{b}");
            store.add_conv(&format!("{base}.dw"), width, 1, 7, 7, rng)?;
            store.add_norm(&format!("{base}.norm"), width)?;
            store.add_conv(&format!("{base}.pw1"), width * 4, width, 1, 1, rng)?;
            store.add_conv(&format!("{base}.pw2"), width, width * 4, 1, 1, rng)?;
        }
        if i < 3 {
            store.add_conv(
                &format!("{prefix}.down{i}"),
                cfg.stage_widths[i + 1],
                width,
                2,
                2,
                rng,
            )?;
        }
    }
    Ok(())
}

/// Closed-form parameter count of one encoder branch; must agree with the
/// registered store.
pub fn encoder_param_count(cfg: &EncoderConfig) -> usize {
    let w = cfg.stage_widths;
    let mut total = w[0] * cfg.in_channels * cfg.stem_stride * cfg.stem_stride + w[0];
    for (i, (&c, &depth)) in w.iter().zip(&cfg.stage_depths).enumerate() {
        // dw + bias, norm affine, pw1 + bias, pw2 + bias
        let block = c * 49 + c + 2 * c + (4 * c * c + 4 * c) + (c * 4 * c + c);
        total += depth * block;
        if i < 3 {
            total += w[i + 1] * c * 4 + w[i + 1];
        }
    }
    total
}

fn block<E: Scalar>(x: &Tensor<E>, scope: &ScopedParams<'_, E>, width: usize) -> Result<Tensor<E>> {
    let y = scope.conv("dw", x, 1, 3, width)?;
    let y = scope.norm("norm", &y, E::from_f64(LN_EPS))?;
    let y = scope.conv("pw1", &y, 1, 0, 1)?;
    let y = y.gelu();
    let y = scope.conv("pw2", &y, 1, 0, 1)?;
    x.add(&y)
}

/// Run one encoder branch. Input spatial dims must be divisible by 32.
pub fn encode<E: Scalar>(
    x: &Tensor<E>,
    params: &ScopedParams<'_, E>,
    cfg: &EncoderConfig,
) -> Result<EncoderFeatures<E>> {
    let shape = x.shape();
    if shape.c != cfg.in_channels {
        return Err(Error::shape(
            "encode",
            format!(
                "channel dimension: expected {} input channels, got {}",
                cfg.in_channels, shape.c
            ),
        ));
    }
    let multiple = cfg.required_multiple();
    if shape.h % multiple != 0 || shape.w % multiple != 0 {
        return Err(Error::shape(
            "encode",
            format!(
                "spatial dimensions ({}, {}) must be divisible by {}",
                shape.h, shape.w, multiple
            ),
        ));
    }

    let mut cur = params.conv("stem", x, cfg.stem_stride, 0, 1)?;
    let mut quarter = None;
    let mut low = None;
    for i in 0..4 {
        let width = cfg.stage_widths[i];
        for b in 0..cfg.stage_depths[i] {
            cur = block(&cur, &params.scope(&format!("stage{i}.block{b}")), width)?;
        }
        match i {
            0 => quarter = Some(cur.clone()),
            1 => low = Some(cur.clone()),
            _ => {}
        }
        if i < 3 {
            cur = params.conv(&format!("down{i}"), &cur, 2, 0, 1)?;
        }
    }

    Ok(EncoderFeatures {
        quarter: quarter.expect("stage 0 always runs"),
        low: low.expect("stage 1 always runs"),
        high: cur,
    })
}

/// Bilinearly resize THR features to the exact spatial sizes of the RGB
/// feature maps.
pub fn align_thr<E: Scalar>(thr: &FeaturePair<E>, rgb: &FeaturePair<E>) -> Result<FeaturePair<E>> {
    Ok(FeaturePair {
        low: thr.low.bilinear_interp(rgb.low.shape().h, rgb.low.shape().w)?,
        high: thr
            .high
            .bilinear_interp(rgb.high.shape().h, rgb.high.shape().w)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;

    fn store_for(cfg: &EncoderConfig, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        register_encoder(&mut store, "enc", cfg, &mut rng).unwrap();
        store
    }

    #[test]
    fn shape_ladder_64() {
        let cfg = EncoderConfig::rgb();
        let store = store_for(&cfg, 0);
        let x = Tensor::zeros(Shape::new(2, 3, 64, 64));
        let feats = encode(&x, &store.scope("enc"), &cfg).unwrap();
        assert_eq!(feats.quarter.shape().dims(), [2, 16, 16, 16]);
        assert_eq!(feats.low.shape().dims(), [2, 32, 8, 8]);
        assert_eq!(feats.high.shape().dims(), [2, 128, 2, 2]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = EncoderConfig::rgb();
        let store = store_for(&cfg, 0);
        let x = Tensor::zeros(Shape::new(1, 3, 48, 64));
        let err = encode(&x, &store.scope("enc"), &cfg).unwrap_err();
        assert!(err.to_string().contains("divisible by 32"), "{err}");
    }

    #[test]
    fn zero_input_stays_finite() {
        let cfg = EncoderConfig::thr();
        let store = store_for(&cfg, 1);
        let x = Tensor::zeros(Shape::new(1, 1, 32, 32));
        let feats = encode(&x, &store.scope("enc"), &cfg).unwrap();
        assert!(feats.low.all_finite());
        assert!(feats.high.all_finite());
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [
            EncoderConfig::rgb(),
            EncoderConfig::thr(),
            EncoderConfig {
                stage_widths: [8, 12, 24, 40],
                stage_depths: [2, 1, 3, 1],
                ..EncoderConfig::rgb()
            },
        ] {
            let store = store_for(&cfg, 2);
            assert_eq!(store.total_params(), encoder_param_count(&cfg));
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let cfg = EncoderConfig::rgb();
        let x = Tensor::from_vec(
            Shape::new(1, 3, 32, 32),
            (0..3 * 32 * 32).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let run = || {
            let store = store_for(&cfg, 7);
            let f = encode(&x, &store.scope("enc"), &cfg).unwrap();
            (f.low.to_vec(), f.high.to_vec())
        };
        let (l1, h1) = run();
        let (l2, h2) = run();
        assert_eq!(l1, l2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn zeroed_blocks_reduce_to_downsamplers() {
        let cfg = EncoderConfig::rgb();
        let mut store = store_for(&cfg, 3);
        // zero every block weight, keep norm affine at identity
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            if name.contains(".block") && !name.contains(".norm") {
                let numel = store.get(&name).unwrap().numel();
                store.set_data(&name, vec![0.0; numel]).unwrap();
            }
        }
        let x = Tensor::from_vec(
            Shape::new(1, 3, 32, 32),
            (0..3 * 32 * 32).map(|i| (i as f32 * 0.11).cos()).collect(),
        )
        .unwrap();
        let scope = store.scope("enc");
        let feats = encode(&x, &scope, &cfg).unwrap();

        // expected: stem then downsample convs only
        let stem = scope.conv("stem", &x, 4, 0, 1).unwrap();
        let d0 = scope.conv("down0", &stem, 2, 0, 1).unwrap();
        let d1 = scope.conv("down1", &d0, 2, 0, 1).unwrap();
        let d2 = scope.conv("down2", &d1, 2, 0, 1).unwrap();
        assert_eq!(feats.quarter.to_vec(), stem.to_vec());
        assert_eq!(feats.low.to_vec(), d0.to_vec());
        assert_eq!(feats.high.to_vec(), d2.to_vec());
        let _ = d1;
    }

    #[test]
    fn branches_never_share_parameters() {
        // perturbing an RGB weight leaves THR activations bit-identical
        let rgb_cfg = EncoderConfig::rgb();
        let thr_cfg = EncoderConfig::thr();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        register_encoder(&mut store, "rgb", &rgb_cfg, &mut rng).unwrap();
        register_encoder(&mut store, "thr", &thr_cfg, &mut rng).unwrap();

        let thr_x = Tensor::from_vec(
            Shape::new(1, 1, 32, 32),
            (0..1024).map(|i| (i as f32 * 0.05).sin()).collect(),
        )
        .unwrap();
        let before = encode(&thr_x, &store.scope("thr"), &thr_cfg).unwrap();

        let mut w = store.get("rgb.stem.weight").unwrap().to_vec();
        w[0] += 1.0;
        store.set_data("rgb.stem.weight", w).unwrap();
        let after = encode(&thr_x, &store.scope("thr"), &thr_cfg).unwrap();

        assert_eq!(before.low.to_vec(), after.low.to_vec());
        assert_eq!(before.high.to_vec(), after.high.to_vec());
    }

    #[test]
    fn align_matches_interp_oracle() {
        let thr_low = Tensor::from_vec(
            Shape::new(1, 2, 2, 2),
            vec![0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0, 7.0],
        )
        .unwrap();
        let thr = FeaturePair {
            low: thr_low.clone(),
            high: thr_low.clone(),
        };
        let rgb = FeaturePair {
            low: Tensor::zeros(Shape::new(1, 2, 4, 4)),
            high: Tensor::zeros(Shape::new(1, 2, 2, 2)),
        };
        let aligned = align_thr(&thr, &rgb).unwrap();
        assert_eq!(aligned.low.shape().dims(), [1, 2, 4, 4]);
        // equal-resolution case passes through exactly
        assert_eq!(aligned.high.to_vec(), thr_low.to_vec());
        // interpolated values agree with the interp primitive applied directly
        let direct = thr_low.bilinear_interp(4, 4).unwrap();
        assert_eq!(aligned.low.to_vec(), direct.to_vec());
    }
}
