use std::path::Path;

use proptest::prelude::*;

use super::*;
use crate::networks::{Backbone, Norm};
use crate::tensor::Tensor;

#[test]
fn pvol_header_arithmetic() {
    let v = Volume::cube(2, vec![1.0; 8]).unwrap();
    let bytes = encode_pvol(&v);
    assert_eq!(bytes.len(), 6 + 16 + 32);
    assert_eq!(&bytes[..6], b"PVOL1\0");
    assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
    assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
}

#[test]
fn pvol_header_order_is_x_y_z_c() {
    let v = Volume::new(2, [3, 4, 5], vec![0.0; 120]).unwrap();
    let b = encode_pvol(&v);
    let u = |i: usize| u32::from_le_bytes(b[6 + 4 * i..10 + 4 * i].try_into().unwrap());
    assert_eq!([u(0), u(1), u(2), u(3)], [5, 4, 3, 2]);
}

#[test]
fn corrupt_files_report_offsets() {
    let v = Volume::cube(2, vec![1.0; 8]).unwrap();
    let mut b = encode_pvol(&v);
    b.truncate(40);
    match decode_pvol(&b) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 22),
        other => panic!("{other:?}"),
    }
    let mut b = encode_pvol(&v);
    b[0] = b'X';
    assert!(matches!(decode_pvol(&b), Err(Error::Format { offset: 0, .. })));
    let mut b = encode_pvol(&v);
    b.push(0);
    assert!(decode_pvol(&b).is_err());
}

#[test]
fn non_binary_mask_byte_is_rejected() {
    let m = Mask::new(1, [2, 2, 2], vec![0, 1, 0, 1, 1, 0, 0, 1]).unwrap();
    let mut b = encode_pmsk(&m);
    b[22 + 3] = 2;
    match decode_pmsk(&b) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 25),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_unknown_version() {
    let mut b = Checkpoint::default().encode();
    b[6] = 9;
    assert!(matches!(Checkpoint::decode(&b), Err(Error::Format { offset: 6, .. })));
}

#[test]
fn config_defaults_apply() {
    let c = Config::parse("seed = 3\n[loss]\nlambda2 = 0.5\n", Path::new("t.toml")).unwrap();
    assert_eq!(c.loss.lambda1, 100.0);
    assert_eq!(c.loss.lambda2, 0.5);
    assert_eq!(c.seed, 3);
    let c = Config::parse("[loss]\nlambda1 = 100\n", Path::new("t.toml")).unwrap();
    assert_eq!(c.loss.lambda1, 100.0);
}

#[test]
fn config_unknown_key_names_line() {
    let text = "seed = 1\n\n[loss]\nlamda1 = 5\n";
    match Config::parse(text, Path::new("run.toml")) {
        Err(Error::ConfigParse { line, msg, .. }) => {
            assert_eq!(line, 4);
            assert!(msg.contains("lamda1"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_validation() {
    let err = Config::parse("[phantom]\nsize = 24\n", Path::new("c")).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(Config::parse("[train]\nscale = 0\n", Path::new("c")).is_err());
}

#[test]
fn reference_is_the_default() {
    let c = Config::parse(&Config::reference(), Path::new("ref")).unwrap();
    assert_eq!(c, Config::default());
}

#[test]
fn scaled_schedule() {
    let mut c = Config::default();
    assert_eq!(c.scaled_phases(), vec![1200, 100, 300, 100]);
    c.train.scale = 20;
    assert_eq!(c.scaled_phases(), vec![60, 5, 15, 5]);
}

fn volume_strategy() -> impl Strategy<Value = Volume> {
    (1usize..3, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(c, z, y, x)| {
        proptest::collection::vec(any::<f32>(), c * z * y * x)
            .prop_map(move |data| Volume::new(c, [z, y, x], data).unwrap())
    })
}

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (1usize..5, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(c, z, y, x)| {
        proptest::collection::vec(0u8..2, c * z * y * x)
            .prop_map(move |data| Mask::new(c, [z, y, x], data).unwrap())
    })
}

fn tensor_strategy() -> impl Strategy<Value = Tensor<f32>> {
    proptest::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        proptest::collection::vec(any::<f32>(), n).prop_map(move |d| Tensor::from_vec(&shape, d).unwrap())
    })
}

fn checkpoint_strategy() -> impl Strategy<Value = Checkpoint> {
    let params = proptest::collection::vec(("[a-z.]{1,12}", tensor_strategy()), 0..5);
    let group = (
        "[a-z]{1,3}",
        any::<f32>(),
        any::<f32>(),
        any::<f32>(),
        proptest::collection::vec(proptest::collection::vec(any::<f32>(), 0..6), 0..4),
    )
        .prop_map(|(name, alpha, rho, floor, state)| OptimizerGroup {
            name,
            alpha,
            rho,
            floor,
            state,
        });
    (
        params,
        proptest::collection::vec(group, 0..3),
        any::<(u32, u32, u64)>(),
        "\\PC{0,40}",
    )
        .prop_map(|(params, optimizers, (phase, epoch, seed), config)| Checkpoint {
            params,
            optimizers,
            schedule: ScheduleState { phase, epoch, seed },
            config,
        })
}

fn config_strategy() -> impl Strategy<Value = Config> {
    (
        0..=i64::MAX as u64,
        (1usize..5).prop_map(|k| 16 * k),
        1u32..10,
        0.0f64..1000.0,
        0.0f64..10.0,
        proptest::collection::vec(1u32..2000, 1..6),
        1u32..50,
        prop_oneof![Just(Norm::None), Just(Norm::Instance), Just(Norm::AdaIn)],
        prop_oneof![Just(Backbone::Dcitn), Just(Backbone::Unet)],
        any::<bool>(),
    )
        .prop_map(|(seed, size, drf, l1, l2, phases, scale, norm, backbone, sg)| {
            let mut c = Config::default();
            c.seed = seed;
            c.phantom.size = size;
            c.phantom.drf = drf;
            c.loss.lambda1 = l1;
            c.loss.lambda2 = l2;
            c.train.phases = phases;
            c.train.scale = scale;
            c.model.norm = norm;
            c.model.backbone = backbone;
            c.model.sg = sg;
            c
        })
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pvol_round_trip(v in volume_strategy()) {
        let back = decode_pvol(&encode_pvol(&v)).unwrap();
        prop_assert_eq!(back.dims, v.dims);
        prop_assert_eq!(back.channels, v.channels);
        prop_assert_eq!(bits(&back.data), bits(&v.data));
    }

    #[test]
    fn pmsk_round_trip(m in mask_strategy()) {
        prop_assert_eq!(decode_pmsk(&encode_pmsk(&m)).unwrap(), m);
    }

    #[test]
    fn checkpoint_round_trip(c in checkpoint_strategy()) {
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        prop_assert_eq!(back.schedule, c.schedule);
        prop_assert_eq!(back.config, c.config);
    }

    #[test]
    fn config_round_trip(c in config_strategy()) {
        let text = c.to_toml();
        let back = Config::parse(&text, Path::new("rt")).unwrap();
        prop_assert_eq!(back.to_toml(), text);
        prop_assert_eq!(back, c);
    }
}
