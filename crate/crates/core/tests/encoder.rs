use image::{GrayImage, Luma, Rgb, RgbImage};
use lkaguard::encoder::{EncoderConfig, FrozenEncoder, Provenance};
use lkaguard::media::MaskPair;
use lkaguard::text::Vocab;
use proptest::prelude::*;

const CAN: &str = "speed=25.0 ; steer_deg=-1.5 ; torque=0.20 ; lka=1 ; offset_m=0.10";
const SWAPPED: &str = "offset_m=0.10 ; steer_deg=-1.5 ; torque=0.20 ; lka=1 ; speed=25.0";

fn inputs(seed: u8) -> (RgbImage, MaskPair) {
    let img = RgbImage::from_fn(64, 64, |x, y| Rgb([(x as u8).wrapping_mul(seed), y as u8, 40]));
    let bin = GrayImage::from_fn(64, 64, |x, _| Luma([if x == 20 { 255 } else { 0 }]));
    let ins = GrayImage::from_fn(64, 64, |x, _| Luma([u8::from(x == 20)]));
    (img, MaskPair::new(bin, ins).unwrap())
}

fn can_rows(positions: bool, text: &str) -> Vec<Vec<u64>> {
    let v = Vocab::build([CAN]);
    let cfg = EncoderConfig {
        position_embeddings: positions,
        ..EncoderConfig::new(v.len())
    };
    let enc = FrozenEncoder::init_frozen(cfg, 5).unwrap();
    let (img, masks) = inputs(3);
    let x = enc.encode(&v, &img, &masks, text, true).unwrap();
    x.tokens
        .rows()
        .into_iter()
        .zip(&x.provenance)
        .filter(|(_, p)| **p == Provenance::Can)
        .map(|(r, _)| r.iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn can_order_is_visible_only_through_position_embeddings() {
    let mut a = can_rows(false, CAN);
    let mut b = can_rows(false, SWAPPED);
    assert_ne!(a, b);
    a.sort();
    b.sort();
    assert_eq!(a, b);

    let mut a = can_rows(true, CAN);
    let mut b = can_rows(true, SWAPPED);
    a.sort();
    b.sort();
    assert_ne!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn encoding_is_finite_and_shaped(seed in 0u8..=255, guided in any::<bool>()) {
        let v = Vocab::build([CAN]);
        let enc = FrozenEncoder::init_frozen(EncoderConfig::new(v.len()), 1).unwrap();
        let (img, masks) = inputs(seed);
        let x = enc.encode(&v, &img, &masks, CAN, guided).unwrap();
        prop_assert_eq!(x.tokens.nrows(), if guided { 72 } else { 40 });
        prop_assert_eq!(x.provenance.len(), x.tokens.nrows());
        prop_assert!(x.tokens.iter().all(|v| v.is_finite()));
    }
}
