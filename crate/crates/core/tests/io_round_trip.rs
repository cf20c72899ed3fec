use keygate_core::io::ppm::{decode_ppm, encode_ppm, quantized};
use keygate_core::io::{load_image, save_image, Checkpoint};
use keygate_core::ImageF32;
use keygate_tensor::{ParamStore, Tensor};
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = ImageF32> {
    (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
        prop::collection::vec(-0.2f32..1.2, h * w * 3).prop_map(move |d| ImageF32::new(h, w, 3, d).unwrap())
    })
}

proptest! {
    #[test]
    fn ppm_round_trip_is_quantization(img in image_strategy()) {
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        prop_assert_eq!(&back, &quantized(&img));
        prop_assert_eq!(decode_ppm(&encode_ppm(&back).unwrap()).unwrap(), back);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        values in prop::collection::vec(any::<f32>(), 1..40),
        frozen in any::<bool>(),
    ) {
        let mut store = ParamStore::new();
        store.insert("a.weight", Tensor::new(vec![values.len()], values.clone()).unwrap(), frozen);
        store.insert("b.bias", Tensor::new(vec![1, 1], vec![values[0]]).unwrap(), !frozen);
        let ckpt = Checkpoint::from_params(&store, serde_json::json!({"steps": values.len()}));
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        prop_assert!(back.bit_eq(&ckpt));
        let params = back.to_params();
        prop_assert_eq!(params.get("a.weight").unwrap().frozen, frozen);
        prop_assert!(params.tensor("a.weight").unwrap().bit_eq(store.tensor("a.weight").unwrap()));
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = ImageF32::new(2, 3, 3, (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
    let path = dir.path().join("x.ppm");
    save_image(&path, &img).unwrap();
    assert_eq!(load_image(&path).unwrap(), quantized(&img));

    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![2], vec![1.5f32, -0.0]).unwrap(), true);
    let ckpt = Checkpoint::from_params(&store, serde_json::json!({"note": "x"}));
    let cpath = dir.path().join("m.ckpt");
    ckpt.save(&cpath).unwrap();
    assert!(Checkpoint::load(&cpath).unwrap().bit_eq(&ckpt));
}

#[test]
fn truncated_checkpoint_rejected() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![4], vec![1.0f32; 4]).unwrap(), false);
    let bytes = Checkpoint::from_params(&store, serde_json::json!({})).to_bytes().unwrap();
    for cut in [0, 3, 10, bytes.len() / 2] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
    }
}
