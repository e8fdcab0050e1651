use candle_core::{DType, Device, Tensor};
use echoguide_core::lvef::VideoClip;
use echoguide_core::Frame;
use echoguide_nn::landmark::{LandmarkDetector, LandmarkModelConfig};
use echoguide_nn::video::{estimate_lvef, ConstantLvef, LvefModel, LvefModelConfig};
use proptest::prelude::*;

fn textured(w: usize, h: usize, seed: u64) -> Frame {
    Frame::from_fn(w, h, |x, y| ((x as u64 * 7 + y as u64 * 13 + seed) % 17) as f32 / 16.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn constant_clip_estimate_ignores_temporal_shift(
        seed in 0u64..1000,
        len in 26usize..60,
        shift in 1usize..30,
        first in 0usize..500,
    ) {
        let model = LvefModel::new(LvefModelConfig::tiny(16, 16, 8), seed, &Device::Cpu).unwrap();
        let frame = textured(16, 16, seed);
        let a = VideoClip::new(vec![frame.clone(); len], 30.0).unwrap();
        let b = VideoClip::new(vec![frame; len + shift], 30.0).unwrap();
        let ea = estimate_lvef(&model, &a, "a", first).unwrap();
        let eb = estimate_lvef(&model, &b, "b", first + shift).unwrap();
        prop_assert_eq!(ea.value, eb.value);
        prop_assert!((0.0..=100.0).contains(&ea.value));
    }

    #[test]
    fn estimate_is_a_percentage_for_any_finite_output(raw in -1e12f64..1e12) {
        let clip = VideoClip::new(vec![Frame::zeros(8, 8); 30], 30.0).unwrap();
        let e = estimate_lvef(&ConstantLvef(raw), &clip, "c", 0).unwrap();
        prop_assert!((0.0..=100.0).contains(&e.value));
    }

    #[test]
    fn heatmaps_match_input_resolution(h in 8usize..80, w in 8usize..80) {
        let det = LandmarkDetector::new(LandmarkModelConfig::new(18, 0.0625, h, w), 0, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 1, h, w), DType::F32, &Device::Cpu).unwrap();
        let y = det.model.forward_t(&x, false).unwrap();
        prop_assert_eq!(y.dims(), &[1, 47, h, w]);
    }
}
