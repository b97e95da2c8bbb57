use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn volume(n: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let len = n * d * d * d;
    Tensor::from_vec(&[n, 1, d, d, d], (0..len).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

fn cfg(backbone: Backbone, norm: Norm, noise: bool) -> GeneratorConfig {
    GeneratorConfig {
        size: 16,
        backbone,
        norm,
        noise,
        ..GeneratorConfig::default()
    }
}

#[test]
fn dcitn_backbone_count() {
    let g = Generator::new(GeneratorConfig::default(), &mut rng(0)).unwrap();
    // stem 1->16, dense inputs 16/24/32/40 -> 8, projection 49 -> 1
    let expected = (27 * 16 + 16) + (16 + 24 + 32 + 40) * 8 * 27 + 4 * 8 + (49 * 27 + 1);
    assert_eq!(g.backbone_count(), expected);
}

#[test]
fn dense_inputs_grow_by_k() {
    let g = Generator::new(GeneratorConfig::default(), &mut rng(0)).unwrap();
    for j in 0..4 {
        let w = g.params.by_name(&format!("g.backbone.dense{j}.w")).unwrap();
        assert_eq!(w.shape()[1], 16 + j * 8);
    }
}

#[test]
fn generator_preserves_shape_all_variants() {
    let x = volume(2, 16, 1);
    for backbone in [Backbone::Dcitn, Backbone::Unet] {
        for (norm, noise) in [(Norm::None, false), (Norm::Instance, true), (Norm::AdaIn, true)] {
            let g = Generator::new(cfg(backbone, norm, noise), &mut rng(2)).unwrap();
            let y = g.translate(&x).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.all_finite());
            assert_eq!(g.translate(&x).unwrap().data(), y.data());
        }
    }
}

#[test]
fn fresh_generator_passes_input_through() {
    let x = volume(1, 16, 15);
    for backbone in [Backbone::Dcitn, Backbone::Unet] {
        for (norm, noise) in [(Norm::None, false), (Norm::Instance, true), (Norm::AdaIn, true)] {
            let g = Generator::new(cfg(backbone, norm, noise), &mut rng(16)).unwrap();
            assert_eq!(g.translate(&x).unwrap().data(), x.data(), "{backbone:?} {norm:?}");
        }
    }
}

#[test]
fn generator_rejects_indivisible_size() {
    let c = GeneratorConfig {
        size: 24,
        ..GeneratorConfig::default()
    };
    assert!(matches!(Generator::new(c, &mut rng(0)), Err(Error::Config(_))));
}

#[test]
fn neutral_style_reduces_to_instance_norm() {
    for backbone in [Backbone::Dcitn, Backbone::Unet] {
        let mut styled = Generator::new(cfg(backbone, Norm::AdaIn, true), &mut rng(3)).unwrap();
        let mut plain = Generator::new(cfg(backbone, Norm::Instance, false), &mut rng(4)).unwrap();
        plain.params.load_matching(&styled.params).unwrap();
        for (name, t) in styled.params.iter_mut() {
            if name.ends_with(".noise") || name.ends_with(".style.a") {
                t.data_mut().fill(0.0);
            }
        }
        let x = volume(1, 16, 5);
        let mut r = rng(6);
        let mut run = |gen: &Generator| {
            let mut g = Graph::<f32>::new();
            let p = gen.params.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let mut pass = Pass {
                mode: Mode::Train,
                sigma_z: 0.01,
                rng: &mut r,
            };
            let y = gen.forward(&mut g, &p, xv, &mut pass).unwrap();
            g.value(y).clone()
        };
        let a = run(&styled);
        let b = run(&plain);
        let diff = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "{backbone:?}: max diff {diff}");
    }
}

#[test]
fn train_mode_noise_changes_output() {
    let mut gen = Generator::new(cfg(Backbone::Dcitn, Norm::AdaIn, true), &mut rng(7)).unwrap();
    for (name, t) in gen.params.iter_mut() {
        if name == "g.backbone.proj.w" {
            t.data_mut().fill(0.05);
        }
    }
    let x = volume(1, 16, 8);
    let mut r = rng(9);
    let mut g = Graph::<f32>::new();
    let p = gen.params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let mut pass = Pass {
        mode: Mode::Train,
        sigma_z: 0.01,
        rng: &mut r,
    };
    let y = gen.forward(&mut g, &p, xv, &mut pass).unwrap();
    assert_ne!(g.value(y).data(), gen.translate(&x).unwrap().data());
}

#[test]
fn critic_shapes_and_zero_network() {
    let mut critic = Critic::new(&CriticConfig::default(), &mut rng(10)).unwrap();
    let v = volume(2, 64, 11);
    let mut g = Graph::<f32>::new();
    let p = critic.params.bind(&mut g, false);
    let x = g.constant(v.clone());
    let map = critic.patch_map(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(map), &[2, 1, 4, 4, 4]);
    for (_, t) in critic.params.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let mut g = Graph::<f32>::new();
    let p = critic.params.bind(&mut g, false);
    let x = g.constant(volume(2, 16, 12));
    let s = critic.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.value(s).data(), &[0.0, 0.0]);
}

#[test]
fn critic_scores_are_not_squashed() {
    let critic = Critic::new(&CriticConfig::default(), &mut rng(13)).unwrap();
    let mut g = Graph::<f32>::new();
    let p = critic.params.bind(&mut g, false);
    let v = volume(4, 16, 14).map(|a| a * 200.0 - 100.0);
    let x = g.constant(v);
    let s = critic.forward(&mut g, &p, x).unwrap();
    assert!(g.value(s).data().iter().any(|&a| !(0.0..=1.0).contains(&a)));
}

#[test]
fn clipping_bounds_every_parameter() {
    let mut critic = Critic::new(&CriticConfig::default(), &mut rng(15)).unwrap();
    critic.clip(0.01);
    for (_, t) in critic.params.iter() {
        assert!(t.max_abs() <= 0.01);
    }
}

#[test]
fn segnet_outputs_probabilities() {
    let seg = SegNet::new(SegNetConfig::default(), "s", &mut rng(16)).unwrap();
    let s = seg.predict(&volume(2, 16, 17)).unwrap();
    assert_eq!(s.shape(), &[2, 4, 16, 16, 16]);
    assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn segnet_zero_logits_give_half() {
    let mut seg = SegNet::new(SegNetConfig::default(), "s", &mut rng(18)).unwrap();
    for (name, t) in seg.params.iter_mut() {
        if name.starts_with("s.head") {
            t.data_mut().fill(0.0);
        }
    }
    let s = seg.predict(&volume(1, 16, 19)).unwrap();
    assert!(s.data().iter().all(|&v| v == 0.5));
}
