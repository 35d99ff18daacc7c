use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regadapt::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use regadapt::field::{compose, ndv, scale_field, warp, DisplacementField};
use regadapt::losses::{diffusion_reg, gate_lncc, lncc, modality_gate, GateParams};
use regadapt::metrics::{dice, hd95, tre, warp_labels};
use regadapt::refine::{init_cascade, CascadeConfig, UNet3DConfig, UNetParams, UpdateMode};
use regadapt::synth::smooth_random_field;
use regadapt::vol_io::{load_field, load_labels, load_volume, save_field, save_labels, save_volume};
use regadapt::volume::{LabelMap, LandmarkSet, Volume};

fn dims() -> impl Strategy<Value = [usize; 3]> {
    (2usize..7, 2usize..7, 2usize..7).prop_map(|(a, b, c)| [a, b, c])
}

fn volume(lo: f32, hi: f32) -> impl Strategy<Value = Volume<f32>> {
    dims().prop_flat_map(move |d| {
        prop::collection::vec(lo..hi, d[0] * d[1] * d[2]).prop_map(move |v| Volume::new(d, [1.0, 1.0, 1.0], v).unwrap())
    })
}

fn labels_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    dims().prop_flat_map(|d| {
        let n = d[0] * d[1] * d[2];
        (prop::collection::vec(0i32..3, n), prop::collection::vec(0i32..3, n)).prop_map(move |(a, b)| {
            (LabelMap::new(d, [1.0; 3], a).unwrap(), LabelMap::new(d, [1.0; 3], b).unwrap())
        })
    })
}

fn smooth_pair(seed: u64) -> (Volume<f64>, Volume<f64>) {
    let d = [10, 10, 10];
    let f = smooth_random_field(d, 1.5, 10.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let g = smooth_random_field(d, 1.5, 10.0, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
    let a = Volume::new(d, [1.0; 3], f.component(0).to_vec()).unwrap();
    let b = Volume::new(d, [1.0; 3], (0..1000).map(|i| f.component(0)[i] + 0.5 * g.component(1)[i]).collect()).unwrap();
    (a, b)
}

fn file_bytes(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn volume_files_round_trip(v in volume(-5.0, 5.0)) {
        let dir = tempfile::tempdir().unwrap();
        let (p, q) = (dir.path().join("a.vol"), dir.path().join("b.vol"));
        save_volume(&v, &p).unwrap();
        let back: Volume<f32> = load_volume(&p).unwrap();
        prop_assert_eq!(&back, &v);
        save_volume(&back, &q).unwrap();
        prop_assert_eq!(file_bytes(&p), file_bytes(&q));
    }

    #[test]
    fn label_and_field_files_round_trip((a, _) in labels_pair(), seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.vol");
        save_labels(&a, &p).unwrap();
        prop_assert_eq!(&load_labels(&p).unwrap(), &a);
        let u = smooth_random_field(a.dims(), 1.0, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let u = DisplacementField::new(u.dims(), u.spacing(), u.data().iter().map(|&x| x as f32).collect()).unwrap();
        let f = dir.path().join("u.vol");
        save_field(&u, &f).unwrap();
        let back: DisplacementField<f32> = load_field(&f).unwrap();
        prop_assert_eq!(&back, &u);
    }

    #[test]
    fn zero_warp_is_identity(v in volume(-10.0, 10.0)) {
        let out = warp(&v, &DisplacementField::zeros(v.dims())).unwrap();
        prop_assert_eq!(out.data(), v.data());
    }

    #[test]
    fn compose_of_constants_adds(d in dims(), a in prop::array::uniform3(-3.0f64..3.0), b in prop::array::uniform3(-3.0f64..3.0)) {
        let c = compose(&DisplacementField::constant(d, a), &DisplacementField::constant(d, b)).unwrap();
        for k in 0..3 {
            prop_assert!(c.component(k).iter().all(|&x| x == a[k] + b[k]));
        }
    }

    #[test]
    fn scale_field_composes(seed in 0u64..1000, s1 in -3.0f32..3.0, s2 in -3.0f32..3.0) {
        let u = smooth_random_field([5, 4, 6], 1.0, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let u = DisplacementField::new(u.dims(), u.spacing(), u.data().iter().map(|&x| x as f32).collect()).unwrap();
        let once = scale_field(&u, s1 * s2);
        let twice = scale_field(&scale_field(&u, s1), s2);
        for (x, y) in once.data().iter().zip(twice.data()) {
            let ulp = f32::EPSILON * x.abs().max(y.abs());
            prop_assert!((x - y).abs() <= 2.0 * ulp, "{} vs {}", x, y);
        }
    }

    #[test]
    fn lncc_symmetric_and_bounded(seed in 0u64..500, w in prop::sample::select(vec![3usize, 5, 9])) {
        let (a, b) = smooth_pair(seed);
        let ab = lncc(&a, &b, w).unwrap();
        let ba = lncc(&b, &a, w).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6);
        prop_assert!(ab.abs() <= 1.0 + 1e-6);
    }

    #[test]
    fn lncc_affine_invariant(seed in 0u64..500, scale in 0.2f64..5.0, shift in -3.0f64..3.0) {
        let (a, b) = smooth_pair(seed);
        let base = lncc(&a, &b, 9).unwrap();
        let b2 = b.map(|v| v * scale + shift);
        prop_assert!((lncc(&a, &b2, 9).unwrap() - base).abs() <= 1e-4);
        let a2 = a.map(|v| v * scale + shift);
        prop_assert!((lncc(&a2, &b, 9).unwrap() - base).abs() <= 1e-4);
    }

    #[test]
    fn diffusion_reg_zero_only_on_constants(d in dims(), c in prop::array::uniform3(-2.0f64..2.0), seed in 0u64..1000) {
        prop_assert_eq!(diffusion_reg(&DisplacementField::constant(d, c)), 0.0);
        let u = smooth_random_field([6, 6, 6], 1.0, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(diffusion_reg(&u) > 0.0);
    }

    #[test]
    fn gate_flips_exactly_at_its_value(seed in 0u64..200) {
        let (a, b) = smooth_pair(seed);
        let a = Volume::from_fn([16, 16, 16], [1.0; 3], |d, h, w| a.get(d % 10, h % 10, w % 10));
        let b = Volume::from_fn([16, 16, 16], [1.0; 3], |d, h, w| b.get(d % 10, h % 10, w % 10));
        let p = GateParams { window: 3, down: 2, ..Default::default() };
        let v = gate_lncc(&a, &b, &p).unwrap();
        let at = GateParams { tau: v, ..p.clone() };
        let above = GateParams { tau: v + 1e-9, ..p };
        prop_assert!(!modality_gate(&a, &b, &at).unwrap());
        prop_assert!(modality_gate(&a, &b, &above).unwrap());
    }

    #[test]
    fn dice_symmetric_and_bounded((a, b) in labels_pair()) {
        let ab = dice(&a, &b, &[1, 2]).unwrap();
        let ba = dice(&b, &a, &[1, 2]).unwrap();
        prop_assert_eq!(&ab, &ba);
        for s in &ab.per_class {
            if let Some(v) = s.value {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        let same = warp_labels(&a, &DisplacementField::<f32>::zeros(a.dims())).unwrap();
        prop_assert_eq!(dice(&same, &b, &[1, 2]).unwrap(), ab);
    }

    #[test]
    fn hd95_zero_on_self_and_symmetric((a, b) in labels_pair(), sp in prop::array::uniform3(0.5f64..2.0)) {
        let (ma, mb) = (a.mask(1), b.mask(1));
        prop_assume!(ma.iter().any(|&x| x) && mb.iter().any(|&x| x));
        prop_assert_eq!(hd95(&ma, &ma, a.dims(), sp).unwrap(), 0.0);
        let ab = hd95(&ma, &mb, a.dims(), sp).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, hd95(&mb, &ma, a.dims(), sp).unwrap());
    }

    #[test]
    fn tre_with_zero_field_is_raw_distance(
        pts in prop::collection::vec((prop::array::uniform3(0.0f64..5.0), prop::array::uniform3(0.0f64..5.0)), 1..10),
        sp in prop::array::uniform3(0.5f64..2.0),
    ) {
        let moving: Vec<[f64; 3]> = pts.iter().map(|(p, _)| [p[0] * sp[0], p[1] * sp[1], p[2] * sp[2]]).collect();
        let fixed: Vec<[f64; 3]> = pts.iter().map(|(_, q)| [q[0] * sp[0], q[1] * sp[1], q[2] * sp[2]]).collect();
        let raw: Vec<f64> = moving.iter().zip(&fixed).map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>().sqrt()).collect();
        let set = LandmarkSet::new(moving, fixed).unwrap();
        let r = tre(&set, &DisplacementField::<f32>::zeros([6, 6, 6]), sp).unwrap();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        prop_assert!((r.mean - mean).abs() <= 1e-9 * (1.0 + mean));
        prop_assert!(r.median >= 0.0);
    }

    #[test]
    fn adam_update_bounded_by_lr(g in prop::collection::vec(-100.0f64..100.0, 1..6), lr in 1e-5f64..1e-1) {
        let shape = [1, 1, 1, 1, g.len()];
        let grad = Tensor::new(shape, g.clone()).unwrap();
        let mut params = vec![Tensor::zeros(shape)];
        let mut state = AdamState::new([shape], AdamConfig::default());
        let mut prev = params[0].clone();
        for _ in 0..50 {
            state.step(&mut params, std::slice::from_ref(&grad), lr, 0).unwrap();
            for ((p, q), gi) in params[0].data().iter().zip(prev.data()).zip(&g) {
                let step = p - q;
                prop_assert!(step.abs() <= lr * (1.0 + 1e-6));
                if gi.abs() > 1e-3 {
                    prop_assert!(step * gi < 0.0);
                }
            }
            prev = params[0].clone();
        }
    }

    #[test]
    fn unet_forward_and_gradients_finite(seed in 0u64..1000) {
        let config = UNet3DConfig { base_channels: 2, depth: 2, zero_init_final: false, ..Default::default() };
        let params = UNetParams::<f32>::seeded(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn([1, 2, 6, 5, 7], |_| rand::Rng::gen_range(&mut rng, -10.0f32..10.0));
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let xv = tape.param(x);
        let out = params.forward(&mut tape, &vars, xv).unwrap();
        prop_assert!(tape.value(out).is_finite());
        let sq = tape.square(out);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss).unwrap();
        prop_assert!(grads.get(xv).unwrap().is_finite());
        for v in vars {
            prop_assert!(grads.get(v).is_none_or(Tensor::is_finite));
        }
    }
}

#[test]
fn shared_node_gradients_add() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new([1, 1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap());
    let a = tape.square(x);
    let b = tape.scale(x, 3.0);
    let s = tape.add(a, b).unwrap();
    let loss = tape.sum(s);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[5.0, -1.0, 4.0]);
}

#[test]
fn synth_fields_preserve_topology() {
    for seed in 0..100 {
        let u = smooth_random_field([16, 16, 16], 4.0, 0.39, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(ndv(&u).unwrap(), 0.0, "seed {seed}");
    }
}

#[test]
fn gradients_reach_every_stage() {
    let unet = UNet3DConfig { base_channels: 2, depth: 1, zero_init_final: false, ..Default::default() };
    for update_mode in [UpdateMode::Compose, UpdateMode::Add] {
        let cascade = init_cascade::<f64>(&CascadeConfig { unet: unet.clone(), update_mode, ..Default::default() }, 1).unwrap();
        let (m, f) = smooth_pair(4);
        let mut tape = Tape::new();
        let params = cascade.bind(&mut tape);
        let phi0 = tape.constant(DisplacementField::<f64>::zeros(m.dims()).to_tensor());
        let mv = tape.constant(m.to_tensor());
        let fv = tape.constant(f.to_tensor());
        let out = cascade.forward(&mut tape, &params, phi0, mv, fv).unwrap();
        let nodes = tape.total_loss(&out.warps, fv, *out.fields.last().unwrap(), 0.1, 9).unwrap();
        let grads = tape.backward(nodes.total).unwrap();
        for (t, vars) in params.iter().enumerate() {
            let nonzero = vars.iter().any(|&v| grads.get(v).is_some_and(|g| g.max_abs() > 0.0));
            assert!(nonzero, "stage {t} got no gradient");
        }
    }
}
