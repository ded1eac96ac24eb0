use mngac::attacks::{default_pgd, pgd_attack, sample_attack, PerturbationSet};
use mngac::io::data::{blobs, BlobsParams, Dataset};
use mngac::losses::{ac_loss_node, cls_loss_node};
use mngac::models::{generate_augmented, normal_tensor, Arch, Classifier, Generator};
use mngac::tensor::{Graph, Tensor};
use mngac::trainer::{avg_step, max_step, meta_gradient, mng_ac_step, nat_step, sat_step, LrSchedule, Method, StepOptions, TrainState, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: [usize; 3] = [3, 8, 8];

fn data(n: usize, seed: u64) -> Dataset {
    blobs(n, SHAPE, 4, &BlobsParams::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn state(seed: u64) -> TrainState {
    let theta = Classifier::new(Arch::SmallCnn, SHAPE, 4, 4, seed).unwrap();
    let phi = Generator::new(3, 8, 0.01, seed + 1).unwrap();
    TrainState::new(theta, phi, 0.9, 5e-4, 0.0, ChaCha8Rng::seed_from_u64(seed + 2), ChaCha8Rng::seed_from_u64(seed + 3))
}

fn pset(names: &[&str]) -> PerturbationSet {
    let attacks = names.iter().map(|n| default_pgd(n, 192, false).unwrap()).collect();
    PerturbationSet::new(attacks, ChaCha8Rng::seed_from_u64(11)).unwrap()
}

const THREE: [&str; 3] = ["pgd-linf", "pgd-l2", "pgd-l1"];

fn trainer(method: Method) -> Trainer {
    let set = pset(if method == Method::AdvSingle { &THREE[..1] } else { &THREE });
    let sched = LrSchedule { max_lr: 0.05, epochs: 2 };
    Trainer::new(method, StepOptions::default(), sched, 16, 5, state(0), set, data(80, 1)).unwrap()
}

#[test]
fn ten_step_trajectories_are_bit_identical() {
    for method in [Method::Nat, Method::AdvSingle, Method::AdvAvg, Method::AdvMax, Method::Sat, Method::MngAc] {
        let (mut a, mut b) = (trainer(method), trainer(method));
        for _ in 0..10 {
            let ra = a.step().unwrap();
            let rb = b.step().unwrap();
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(a.state.theta.params.hash(), b.state.theta.params.hash());
            assert_eq!(a.state.phi.params.hash(), b.state.phi.params.hash());
        }
        assert_eq!(a.state.step, 10);
    }
}

#[test]
fn attack_calls_per_step() {
    for (method, calls) in [(Method::Nat, 0), (Method::Sat, 1), (Method::MngAc, 1), (Method::AdvAvg, 3), (Method::AdvMax, 3)] {
        let mut t = trainer(method);
        for _ in 0..2 {
            assert_eq!(t.step().unwrap().attack_calls, calls, "{method:?}");
        }
    }
}

#[test]
fn adv_single_rejects_larger_sets() {
    let sched = LrSchedule { max_lr: 0.05, epochs: 1 };
    let r = Trainer::new(Method::AdvSingle, StepOptions::default(), sched, 16, 0, state(0), pset(&THREE), data(32, 0));
    assert!(r.is_err());
}

#[test]
fn max_loss_dominates_avg_loss() {
    let d = data(32, 2);
    let (x, y) = d.batch(&(0..32).collect::<Vec<_>>());
    let set = pset(&THREE);
    let (mut a, mut b) = (state(4), state(4));
    let la = avg_step(&mut a, &x, &y, &set, 0.01).unwrap().loss;
    let lm = max_step(&mut b, &x, &y, &set, 0.01).unwrap().loss;
    assert!(lm >= la, "max {lm} < avg {la}");
}

#[test]
fn singleton_set_reduces_every_strategy_to_one_attack() {
    let d = data(16, 3);
    let (x, y) = d.batch(&(0..16).collect::<Vec<_>>());
    let set = pset(&["pgd-l2"]);
    let mut reference = state(6);
    sat_step(&mut reference, &x, &y, &mut set.clone(), 0.02).unwrap();
    let want = reference.theta.params.flat();
    let mut s = state(6);
    avg_step(&mut s, &x, &y, &set, 0.02).unwrap();
    assert_eq!(s.theta.params.flat(), want);
    let mut s = state(6);
    max_step(&mut s, &x, &y, &set, 0.02).unwrap();
    assert_eq!(s.theta.params.flat(), want);
}

#[test]
fn zero_lr_leaves_nat_parameters_unchanged() {
    let d = data(16, 4);
    let (x, y) = d.batch(&(0..16).collect::<Vec<_>>());
    let mut s = state(7);
    let before = s.theta.params.flat();
    nat_step(&mut s, &x, &y, 0.0).unwrap();
    assert_eq!(before, s.theta.params.flat());
}

#[test]
fn nat_converges_on_separable_toy_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 64;
    let mut xs = Vec::with_capacity(n * 4);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let centre = if c == 0 { 0.25 } else { 0.75 };
        xs.extend((0..4).map(|_| centre + rng.random_range(-0.1..0.1)));
        ys.push(c);
    }
    let x = Tensor::from_vec(&[n, 1, 2, 2], xs);
    let theta = Classifier::new(Arch::Linear, [1, 2, 2], 2, 0, 0).unwrap();
    let phi = Generator::new(1, 1, 0.01, 0).unwrap();
    let mut s = TrainState::new(theta, phi, 0.9, 5e-4, 0.0, ChaCha8Rng::seed_from_u64(0), ChaCha8Rng::seed_from_u64(1));
    let mut last = f64::INFINITY;
    for _ in 0..100 {
        last = nat_step(&mut s, &x, &ys, 0.1).unwrap().loss;
    }
    assert!(last < 0.1, "final loss {last}");
}

#[test]
fn classifier_update_replays_from_snapshot() {
    let d = data(16, 5);
    let (x, y) = d.batch(&(0..16).collect::<Vec<_>>());
    let (lr, beta) = (0.03, 12.0);
    let mut s = state(8);
    let mut set = pset(&THREE);
    let snapshot = (s.clone(), set.clone());
    mng_ac_step(&mut s, &x, &y, &mut set, &StepOptions::default(), lr).unwrap();

    let (mut r, mut rset) = snapshot;
    let spec = sample_attack(&mut rset);
    let adv = pgd_attack(&r.theta, &x, &y, &spec, &mut r.attack_rng).unwrap();
    let z = normal_tensor(x.shape(), &mut r.noise_rng);
    let mg = meta_gradient(&r.theta, &r.phi, &x, &y, &adv, &z, spec.ball, lr).unwrap();
    r.opt_phi.step(&mut r.phi.params, &mg, lr);
    let aug = generate_augmented(&r.phi, &x, spec.ball, &mut r.noise_rng).unwrap();

    let mut g = Graph::new();
    let p = r.theta.params.leaves(&mut g, true);
    let (xi, ai, gi) = (g.constant(x.clone()), g.constant(adv), g.constant(aug));
    let (lc, la, lg) =
        (r.theta.forward_node(&mut g, &p, xi).unwrap(), r.theta.forward_node(&mut g, &p, ai).unwrap(), r.theta.forward_node(&mut g, &p, gi).unwrap());
    let ce = cls_loss_node(&mut g, la, &y).unwrap();
    let js = ac_loss_node(&mut g, lc, la, lg).unwrap();
    let js = g.scale(js, beta);
    let total = g.add(ce, js);
    let grads = g.backward(total);
    let gp = r.theta.params.collect_grads(&g, &grads, &p);
    r.opt_theta.step(&mut r.theta.params, &gp, lr);

    for (a, b) in s.theta.params.flat().iter().zip(r.theta.params.flat()) {
        assert!((a - b).abs() <= 1e-7);
    }
    assert_eq!(s.phi.params.flat(), r.phi.params.flat());
}
