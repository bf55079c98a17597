use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lpips_core::attack::{attack_2afc_triplet, opt_attack, pgd_attack, AttackSpec, AttackTarget, GraphObjective};
use lpips_core::backbone::{Backbone, BackboneConfig};
use lpips_core::datasets::{make_triplet, synth_base_images, synth_generate, Category, DistortionKind, SynthOptions};
use lpips_core::graph::{Graph, Var};
use lpips_core::metric::{calibration_forward, MetricModel};
use lpips_core::perceptual::{
    lpa_attack, lpa_objective, lpips_project, margin_and_grad, margin_loss, metric_jvp, metric_vjp, ppgd_attack,
    ppgd_step, robust_accuracy, Classifier, Linearization, PerceptualAttackKind, PerceptualAttackSpec,
};
use lpips_core::tensor::Tensor;
use lpips_core::trainer::{tune_metric_clean, TrainConfig};
use lpips_core::{Image, Result};

fn tiny(seed: u64) -> MetricModel {
    MetricModel::new(Backbone::random(BackboneConfig::tiny_net(seed), seed).unwrap(), seed)
}

fn identity_metric(channels: usize) -> MetricModel {
    MetricModel::new(Backbone::random(BackboneConfig::identity(channels), 0).unwrap(), 0)
}

fn interior_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random_range(0.2..0.8)).collect()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// `f(x) = W vec(x) + b`.
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn random(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Self {
        Self {
            w: Tensor::new(vec![classes, dim], (0..classes * dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            b: Tensor::from_vec((0..classes).map(|_| rng.random_range(-0.1..0.1)).collect()),
        }
    }

    fn logits_of(&self, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        (0..self.b.len())
            .map(|r| self.b.data()[r] + self.w.data()[r * dim..(r + 1) * dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

impl Classifier for Linear {
    fn num_classes(&self) -> usize {
        self.b.len()
    }

    fn logits_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.value(x).len();
        let flat = g.reshape(x, vec![n]);
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        Ok(g.linear(flat, w, b))
    }
}

#[test]
fn separable_objective_pushes_every_free_pixel_to_the_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = interior_image(&mut rng, 4, 4, 3);
    let x_ref = x.clone();
    let objective = GraphObjective(move |g: &mut Graph, leaves: &[Var]| {
        let c = g.constant(x_ref.tensor().clone());
        let d = g.sub(leaves[0], c);
        Ok(g.sum_squares(d))
    });
    let r = pgd_attack(&objective, std::slice::from_ref(&x), &AttackSpec::linf(0.05).with_seed(3)).unwrap();
    for v in r.adversarial[0].diff(&x).data() {
        assert!((v.abs() - 0.05).abs() <= 1e-12, "{v}");
    }
    assert!((r.objective - 0.05 * 0.05 * x.len() as f64).abs() <= 1e-12);
}

#[test]
fn zero_radius_returns_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = tiny(2);
    let x = interior_image(&mut rng, 16, 16, 3);
    for spec in [AttackSpec::linf(0.0), AttackSpec::l2(0.0)] {
        let r = opt_attack(&m, &x, &spec).unwrap();
        assert_eq!(r.adversarial[0], x);
        assert_eq!(r.norm, 0.0);
        assert_eq!(m.distance(&x, &r.adversarial[0]).unwrap(), 0.0);
    }
}

#[test]
fn opt_beats_random_perturbations_of_the_same_size() {
    let bases = synth_base_images(16, 16, 3, 10);
    let data = synth_generate(&bases, 300, &SynthOptions { seed: 11, ..Default::default() }).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 1e-2,
        seed: 12,
        holdout_fraction: 0.0,
        ..Default::default()
    };
    let (natural, _) = tune_metric_clean(&tiny(13), &data, &cfg).unwrap();
    let images = synth_base_images(100, 16, 3, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut wins = 0;
    for (i, x) in images.iter().enumerate() {
        let r = opt_attack(&natural, x, &AttackSpec::linf(0.05).with_steps(100).with_seed(i as u64)).unwrap();
        let d_adv = natural.distance(x, &r.adversarial[0]).unwrap();
        let beaten = (0..10).all(|_| {
            let delta = Tensor::from_vec((0..x.len()).map(|_| if rng.random::<bool>() { 0.05 } else { -0.05 }).collect());
            natural.distance(x, &x.perturbed(&delta)).unwrap() < d_adv
        });
        if beaten {
            wins += 1;
        }
    }
    assert!(wins >= 95, "{wins}/100");
}

#[test]
fn attacking_x0_raises_its_distance() {
    let bases = synth_base_images(8, 16, 3, 20);
    // An untuned head has no reason to prefer the closer side.
    let data = synth_generate(&bases, 100, &SynthOptions { seed: 22, ..Default::default() }).unwrap();
    let cfg = TrainConfig { epochs: 5, learning_rate: 1e-2, seed: 23, holdout_fraction: 0.0, ..Default::default() };
    let (m, _) = tune_metric_clean(&tiny(21), &data, &cfg).unwrap();
    let t = make_triplet(&bases[0], DistortionKind::GaussianBlur, 0.1, 0.9, [1, 2], Category::Traditional).unwrap();
    let t = lpips_core::datasets::TwoAFCTriplet { h: 0.0, ..t };
    let d0 = m.distance(&t.x, &t.x0).unwrap();
    let d1 = m.distance(&t.x, &t.x1).unwrap();
    assert!(d0 < d1);
    assert!(calibration_forward(&m.head, d0 * 1.1, d1) > calibration_forward(&m.head, d0, d1));
    let (adv, r) = attack_2afc_triplet(&m, &t, AttackTarget::X0, &AttackSpec::linf(8.0 / 255.0).with_seed(4)).unwrap();
    assert!(m.distance(&adv.x, &adv.x0).unwrap() > d0);
    assert_eq!(adv.x1, t.x1);
    assert_eq!(adv.x, t.x);
    assert!(r.best_so_far().windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(r.objective, *r.best_so_far().last().unwrap());
}

#[test]
fn zero_radius_leaves_the_triplet_alone() {
    let bases = synth_base_images(1, 8, 3, 30);
    let t = make_triplet(&bases[0], DistortionKind::AdditiveNoise, 0.2, 0.7, [5, 6], Category::Cnn).unwrap();
    let (adv, _) = attack_2afc_triplet(&tiny(31), &t, AttackTarget::Both, &AttackSpec::linf(0.0)).unwrap();
    assert_eq!(adv, t);
}

#[test]
fn margin_examples() {
    assert_eq!(margin_loss(&[2.0, 5.0], 0).unwrap(), 3.0);
    assert_eq!(margin_loss(&[5.0, 2.0], 0).unwrap(), -3.0);
    assert_eq!(margin_loss(&[0.4; 6], 4).unwrap(), 0.0);
}

#[test]
fn jacobian_products_vanish_on_zero_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let m = tiny(40);
    let x = interior_image(&mut rng, 8, 8, 3);
    let lin = Linearization::at(&m, &x).unwrap();
    assert!(metric_jvp(&m, &x, &Tensor::zeros(vec![x.len()])).unwrap().data().iter().all(|v| *v == 0.0));
    assert!(metric_vjp(&m, &x, &Tensor::zeros(vec![lin.phi().len()])).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn jvp_and_vjp_are_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let m = tiny(41);
    let x = interior_image(&mut rng, 8, 8, 3);
    let lin = Linearization::at(&m, &x).unwrap();
    for _ in 0..20 {
        let v = random_tensor(&mut rng, x.len());
        let u = random_tensor(&mut rng, lin.phi().len());
        let lhs = lin.jvp(&v).dot(&u);
        let rhs = v.dot(&lin.vjp(&u));
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(rhs.abs()).max(1e-12), "{lhs} {rhs}");
    }
}

#[test]
fn identity_backbone_jvp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let m = identity_metric(3);
    let x = interior_image(&mut rng, 2, 2, 3);
    let lin = Linearization::at(&m, &x).unwrap();
    let h = 1e-6;
    for _ in 0..10 {
        let v = random_tensor(&mut rng, x.len());
        let jv = lin.jvp(&v);
        let mut vp = v.clone();
        vp.scale(h);
        let mut vm = v.clone();
        vm.scale(-h);
        let pp = Linearization::at(&m, &x.perturbed(&vp)).unwrap().phi().clone();
        let pm = Linearization::at(&m, &x.perturbed(&vm)).unwrap().phi().clone();
        let fd: Vec<f64> = pp.data().iter().zip(pm.data()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let err: f64 = jv.data().iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err <= 1e-3 * scale, "{err} vs {scale}");
    }
}

#[test]
fn ppgd_step_gains_at_least_as_much_as_a_gradient_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let m = identity_metric(3);
    let eta = 1e-3;
    for _ in 0..20 {
        let x = interior_image(&mut rng, 3, 3, 3);
        let f = Linear::random(&mut rng, 4, x.len());
        let y = rng.random_range(0..4);
        let (m0, grad) = margin_and_grad(&f, &x, y).unwrap();
        let lin = Linearization::at(&m, &x).unwrap();
        let (p_step, _) = ppgd_step(&lin, &grad, eta, 1e-6, 5);
        let mut g_step = grad.clone();
        g_step.scale(eta / lin.jvp(&grad).norm_l2());
        let moved = |step: &Tensor| {
            let x1: Vec<f64> = x.data().iter().zip(step.data()).map(|(a, b)| a + b).collect();
            margin_loss(&f.logits_of(&x1), y).unwrap()
        };
        let (mp, mg) = (moved(&p_step), moved(&g_step));
        assert!((lin.jvp(&p_step).norm_l2() - eta).abs() <= 1e-9);
        assert!(mp - m0 >= (mg - m0) * (1.0 - 1e-6), "ppgd gain {} < gradient gain {}", mp - m0, mg - m0);
    }
}

#[test]
fn projection_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let m = tiny(60);
    for _ in 0..5 {
        let x = interior_image(&mut rng, 8, 8, 3);
        assert_eq!(lpips_project(&m, &x, &x, 0.1).unwrap(), x);
        let noise = random_tensor(&mut rng, x.len());
        let far = x.perturbed(&noise);
        let d_far = m.distance(&x, &far).unwrap();
        let mut small = noise.clone();
        small.scale(1e-3);
        let near = x.perturbed(&small);
        let d_near = m.distance(&x, &near).unwrap();
        assert_eq!(lpips_project(&m, &x, &near, d_near * 1.01).unwrap(), near);
        let eps = 0.3 * d_far;
        let p = lpips_project(&m, &x, &far, eps).unwrap();
        let d = m.distance(&x, &p).unwrap();
        assert!(d <= eps, "{d} vs {eps}");
        // Bisection resolution is 2^-20 of the segment, and its upper end lies outside the ball.
        let dir = far.diff(&x);
        let t = p.diff(&x).norm_l2() / dir.norm_l2();
        let mut beyond = dir.clone();
        beyond.scale(t + 1.0 / (1u64 << 20) as f64);
        assert!(m.distance(&x, &x.perturbed(&beyond)).unwrap() > eps);
    }
}

#[test]
fn perceptual_attacks_with_zero_bound_return_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let m = tiny(70);
    let x = interior_image(&mut rng, 8, 8, 3);
    let f = Linear::random(&mut rng, 3, x.len());
    let spec = PerceptualAttackSpec::default().with_epsilon(0.0);
    assert_eq!(ppgd_attack(&f, &m, &x, 0, &spec).unwrap().adversarial[0], x);
    assert_eq!(lpa_attack(&f, &m, &x, 0, &spec).unwrap().adversarial[0], x);
}

#[test]
fn lpa_penalty_is_inactive_inside_the_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let m = tiny(80);
    let x = interior_image(&mut rng, 8, 8, 3);
    let f = Linear::random(&mut rng, 3, x.len());
    let clean_phi = Linearization::at(&m, &x).unwrap().phi().clone();
    let mut small = random_tensor(&mut rng, x.len());
    small.scale(1e-3);
    let candidate = x.perturbed(&small);
    let d = m.distance(&x, &candidate).unwrap();
    let lin = Linearization::at(&m, &candidate).unwrap();
    let inside = lpa_objective(&f, &lin, &clean_phi, &candidate, 1, 1e6, 2.0 * d).unwrap();
    let (margin, grad) = margin_and_grad(&f, &candidate, 1).unwrap();
    assert_eq!(inside.grad, grad);
    assert_eq!(inside.value, margin);
    let outside = lpa_objective(&f, &lin, &clean_phi, &candidate, 1, 10.0, 0.5 * d).unwrap();
    assert!(outside.value < margin);
    assert_ne!(outside.grad, grad);
}

#[test]
fn perceptual_attacks_respect_the_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let m = tiny(90);
    for i in 0..6 {
        let x = interior_image(&mut rng, 8, 8, 3);
        let f = Linear::random(&mut rng, 3, x.len());
        let eps = [0.01, 0.1, 0.5][i % 3];
        let spec = PerceptualAttackSpec {
            steps: 4,
            outer_iters: 2,
            inner_iters: 4,
            seed: i as u64,
            ..PerceptualAttackSpec::default().with_epsilon(eps)
        };
        for kind in [PerceptualAttackKind::Ppgd, PerceptualAttackKind::Lpa] {
            let r = kind.run(&f, &m, &x, 0, &spec).unwrap();
            assert!(m.distance(&x, &r.adversarial[0]).unwrap() <= eps + 1e-4);
            assert!(r.objective >= r.trace[0]);
        }
    }
}

#[test]
fn zero_bound_robust_accuracy_equals_clean_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let m = tiny(100);
    let data: Vec<(Image, usize)> = (0..12).map(|i| (interior_image(&mut rng, 8, 8, 3), i % 3)).collect();
    let f = Linear::random(&mut rng, 3, 192);
    let clean = lpips_core::perceptual::clean_accuracy(&f, &data).unwrap();
    for kind in [PerceptualAttackKind::Ppgd, PerceptualAttackKind::Lpa] {
        let r = robust_accuracy(&f, &m, &data, kind, &PerceptualAttackSpec::default().with_epsilon(0.0)).unwrap();
        assert_eq!(r.accuracy, clean);
        assert_eq!(r.evaluated, 12);
    }
}
