use proptest::prelude::*;

use suap_core::config::parse_ini;
use suap_core::report::parse_report;
use suap_core::scene::{generate_scene, SceneSpec};
use suap_core::tensor::{decode, encode, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_scenes_never_panic(h in 0usize..70, w in 0usize..70, c in 0usize..4, b in 0usize..10, n in 0usize..4, seed in any::<u64>()) {
        if let Ok(spec) = SceneSpec::random(h, w, c, b, n, seed) {
            prop_assert!(spec.validate().is_ok());
            prop_assert_eq!(spec.objects.len(), n);
        }
    }

    #[test]
    fn tensor_round_trip(dims in proptest::collection::vec(0usize..5, 0..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|k| ((k as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6).collect();
        let t = Tensor::new(dims, data).unwrap();
        prop_assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn tensor_decode_total(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = decode(&bytes);
        let mut framed = b"UAPT\x01\x01".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = decode(&framed);
    }

    #[test]
    fn ini_display_round_trips(text in "([\\[\\]a-z_=#;0-9 .,\n-]|\\PC){0,120}") {
        if let Ok(ini) = parse_ini(&text) {
            prop_assert_eq!(parse_ini(&ini.to_string()).unwrap(), ini);
        }
    }

    #[test]
    fn report_parse_total(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = parse_report(&bytes);
    }
}

#[test]
fn random_scene_has_moving_objects_in_frame() {
    let scene = generate_scene(&SceneSpec::random(64, 64, 3, 8, 2, 1000).unwrap()).unwrap();
    assert_eq!(scene.truth.boxes.len(), 8);
    assert!(scene.truth.boxes.iter().all(|f| f.len() == 2));
    assert_ne!(scene.truth.boxes[0], scene.truth.boxes[7]);
}
