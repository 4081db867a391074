use super::*;
use rand::Rng;

fn tiny(levels: usize, base: usize, in_channels: usize, side: usize) -> ModelConfig {
    ModelConfig { in_channels, levels, base_channels: base, rows: side, cols: side, seed: 17, ..Default::default() }
}

fn random_tensor(shape: &[usize], seed: u64, lo: Real, hi: Real) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[test]
fn single_level_has_two_convs_and_head() {
    let m = UNet3d::build(&tiny(1, 4, 1, 8)).unwrap();
    let names: Vec<&str> = m.params.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["enc0.conv1.weight", "enc0.conv1.bias", "enc0.conv2.weight", "enc0.conv2.bias", "head.weight", "head.bias"]);
    assert_eq!(m.param("head.weight").unwrap().value.shape(), &[18, 4, 4, 1, 1]);
}

#[test]
fn eth_channel_doubles_first_fan_in_only() {
    let a = UNet3d::build(&tiny(3, 4, 1, 16)).unwrap();
    let b = UNet3d::build(&tiny(3, 4, 2, 16)).unwrap();
    for (pa, pb) in a.params.iter().zip(&b.params) {
        if pa.name == "enc0.conv1.weight" {
            assert_eq!(pa.value.shape()[1] * 2, pb.value.shape()[1]);
        } else {
            assert_eq!(pa.value.shape(), pb.value.shape(), "{}", pa.name);
        }
    }
}

#[test]
fn initialisation_is_seeded() {
    let cfg = tiny(2, 4, 2, 8);
    assert_eq!(UNet3d::build(&cfg).unwrap(), UNet3d::build(&cfg).unwrap());
    let other = ModelConfig { seed: 18, ..cfg.clone() };
    assert_ne!(UNet3d::build(&cfg).unwrap().params, UNet3d::build(&other).unwrap().params);
}

#[test]
fn indivisible_grid_is_config_error() {
    assert!(matches!(UNet3d::build(&tiny(3, 4, 1, 10)), Err(Error::Config(_))));
}

#[test]
fn zero_input_gives_finite_output() {
    let m = UNet3d::build(&tiny(2, 4, 2, 8)).unwrap();
    let y = m.forward(&Tensor::zeros(&[2, 2, 4, 8, 8])).unwrap();
    assert_eq!(y.shape(), &[2, 18, 8, 8]);
    assert!(y.first_non_finite().is_none());
    assert!(m.forward(&Tensor::zeros(&[1, 1, 4, 8, 8])).is_err());
}

#[test]
fn batch_members_are_independent() {
    let m = UNet3d::build(&tiny(2, 4, 1, 8)).unwrap();
    let one = random_tensor(&[1, 1, 4, 8, 8], 3, 0.0, 5.0);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let y = m.forward(&Tensor::from_vec(&[2, 1, 4, 8, 8], two).unwrap()).unwrap();
    let half = y.len() / 2;
    assert_eq!(y.data()[..half], y.data()[half..]);
    assert_eq!(&y.data()[..half], m.forward(&one).unwrap().data());
}

/// Straight-line re-composition of the two-level topology with naive loops.
mod reference {
    use super::*;

    pub struct Vol {
        pub c: usize,
        pub t: usize,
        pub h: usize,
        pub w: usize,
        pub v: Vec<f64>,
    }

    impl Vol {
        fn at(&self, c: usize, t: isize, h: isize, w: isize) -> f64 {
            if t < 0 || h < 0 || w < 0 || t >= self.t as isize || h >= self.h as isize || w >= self.w as isize {
                0.0
            } else {
                self.v[((c * self.t + t as usize) * self.h + h as usize) * self.w + w as usize]
            }
        }
    }

    pub fn conv(x: &Vol, p: &[Parameter], name: &str, pad: [isize; 3]) -> Vol {
        let w = &p.iter().find(|q| q.name == format!("{name}.weight")).unwrap().value;
        let b = &p.iter().find(|q| q.name == format!("{name}.bias")).unwrap().value;
        let s = w.shape();
        let (co, kt, kh, kw) = (s[0], s[2], s[3], s[4]);
        let to = (x.t as isize + 2 * pad[0] - kt as isize + 1) as usize;
        let mut out = Vol { c: co, t: to, h: x.h, w: x.w, v: Vec::new() };
        for o in 0..co {
            for t in 0..to {
                for h in 0..x.h {
                    for ww in 0..x.w {
                        let mut acc = b.data()[o] as f64;
                        for c in 0..x.c {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let wv = w.data()[(((o * x.c + c) * kt + dt) * kh + dh) * kw + dw] as f64;
                                        acc += wv
                                            * x.at(
                                                c,
                                                t as isize + dt as isize - pad[0],
                                                h as isize + dh as isize - pad[1],
                                                ww as isize + dw as isize - pad[2],
                                            );
                                    }
                                }
                            }
                        }
                        out.v.push(acc.max(0.0));
                    }
                }
            }
        }
        out
    }

    pub fn pool(x: &Vol) -> Vol {
        let mut v = Vec::new();
        for c in 0..x.c {
            for t in 0..x.t {
                for h in 0..x.h / 2 {
                    for w in 0..x.w / 2 {
                        let mut m = f64::NEG_INFINITY;
                        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            m = m.max(x.at(c, t as isize, (2 * h + a) as isize, (2 * w + b) as isize));
                        }
                        v.push(m);
                    }
                }
            }
        }
        Vol { c: x.c, t: x.t, h: x.h / 2, w: x.w / 2, v }
    }

    pub fn up_concat(low: &Vol, skip: &Vol) -> Vol {
        let mut v = Vec::new();
        for c in 0..low.c {
            for t in 0..low.t {
                for h in 0..2 * low.h {
                    for w in 0..2 * low.w {
                        v.push(low.at(c, t as isize, (h / 2) as isize, (w / 2) as isize));
                    }
                }
            }
        }
        v.extend_from_slice(&skip.v);
        Vol { c: low.c + skip.c, t: skip.t, h: skip.h, w: skip.w, v }
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    use reference::*;
    let cfg = tiny(2, 3, 2, 8);
    let m = UNet3d::build(&cfg).unwrap();
    let mut m2 = m.clone();
    // non-zero biases so their placement is checked too
    for (i, p) in m2.params.iter_mut().enumerate() {
        if p.name.ends_with("bias") {
            p.value = random_tensor(p.value.shape(), 100 + i as u64, -0.1, 0.1);
        }
    }
    let x = random_tensor(&[1, 2, 4, 8, 8], 5, 0.0, 3.0);
    let y = m2.forward(&x).unwrap();
    let p = &m2.params;
    let x0 = Vol { c: 2, t: 4, h: 8, w: 8, v: x.data().iter().map(|&v| v as f64).collect() };
    let e0 = conv(&conv(&x0, p, "enc0.conv1", [1, 1, 1]), p, "enc0.conv2", [1, 1, 1]);
    let e1 = conv(&conv(&pool(&e0), p, "enc1.conv1", [1, 1, 1]), p, "enc1.conv2", [1, 1, 1]);
    let d0 = conv(&conv(&up_concat(&e1, &e0), p, "dec0.conv1", [1, 1, 1]), p, "dec0.conv2", [1, 1, 1]);
    let head = conv(&d0, p, "head", [0, 0, 0]);
    assert_eq!(head.t, 1);
    assert_eq!(head.v.len(), y.len());
    for (a, b) in y.data().iter().zip(&head.v) {
        assert!((*a as f64 - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[cfg(not(feature = "f32"))]
#[test]
fn small_model_gradients_pass_gradcheck() {
    let rep = gradcheck_model(&tiny(2, 2, 2, 4), 21, 1e-4).unwrap();
    assert!(rep.passed(), "{rep:?}");
    assert!(rep.checked > 500);
}

fn toy_samples(n: usize, cfg: &ModelConfig, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let input = random_tensor(&[1, cfg.in_channels, 4, cfg.rows, cfg.cols], seed + i as u64, 0.0, 2.0);
            // target: the last input rain frame repeated
            let plane = cfg.rows * cfg.cols;
            let last = &input.data()[3 * plane..4 * plane];
            let target: Vec<Real> = (0..18).flat_map(|_| last.iter().copied()).collect();
            Sample { start_timestamp: i as i64, target: Tensor::from_vec(&[1, 18, cfg.rows, cfg.cols], target).unwrap(), input }
        })
        .collect()
}

#[test]
fn overfitting_one_sequence_reduces_loss() {
    let cfg = tiny(2, 4, 1, 8);
    let data = toy_samples(1, &cfg, 40);
    let hyper = TrainHyper { max_epochs: 30, patience_early: 100, batch: 1, lr: 3e-3, ..Default::default() };
    let out = train_on_samples(UNet3d::build(&cfg).unwrap(), &data, &data, &hyper).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|r| r.train_mse).collect();
    assert!(losses[10..].windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses.last().unwrap() < &(losses[0] * 0.5));
    assert!(out.log.iter().all(|r| out.best_val_mse <= r.val_mse));
}

#[test]
fn zero_patience_stops_after_first_bad_round() {
    let cfg = tiny(1, 2, 1, 4);
    let train_set = toy_samples(4, &cfg, 1);
    let val_set = toy_samples(2, &cfg, 50);
    let hyper = TrainHyper { patience_early: 0, max_epochs: 200, lr: 0.5, ..Default::default() };
    let out = train_on_samples(UNet3d::build(&cfg).unwrap(), &train_set, &val_set, &hyper).unwrap();
    let log = &out.log;
    assert!(log.len() < 200);
    let last = log.last().unwrap();
    let best_before = log[..log.len() - 1].iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min);
    assert!(last.val_mse >= best_before);
    // every earlier round improved on its predecessors
    for i in 1..log.len() - 1 {
        assert!(log[i].val_mse < log[..i].iter().map(|r| r.val_mse).fold(f64::INFINITY, f64::min));
    }
}

#[test]
fn plateau_reduces_learning_rate() {
    let cfg = tiny(1, 2, 1, 4);
    let train_set = toy_samples(4, &cfg, 1);
    let val_set = toy_samples(2, &cfg, 50);
    let hyper = TrainHyper { patience_early: 50, plateau_patience: 1, max_epochs: 40, lr: 0.3, ..Default::default() };
    let out = train_on_samples(UNet3d::build(&cfg).unwrap(), &train_set, &val_set, &hyper).unwrap();
    for w in out.log.windows(2) {
        assert!(w[1].lr <= w[0].lr);
        if w[0].lr > w[1].lr {
            assert!((w[1].lr - w[0].lr * 0.5).abs() < 1e-15);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny(2, 2, 2, 8);
    let train_set = toy_samples(5, &cfg, 1);
    let val_set = toy_samples(2, &cfg, 9);
    let hyper = TrainHyper { max_epochs: 4, ..Default::default() };
    let a = train_on_samples(UNet3d::build(&cfg).unwrap(), &train_set, &val_set, &hyper).unwrap();
    let b = train_on_samples(UNet3d::build(&cfg).unwrap(), &train_set, &val_set, &hyper).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let cfg = tiny(2, 3, 2, 8);
    let ck = Checkpoint::from_model(&UNet3d::build(&cfg).unwrap(), 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.unck");
    write_checkpoint(&ck, &path).unwrap();
    let loaded = read_checkpoint(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.steps, 12);
    let rain: Vec<GridFrame> = (0..4)
        .map(|k| {
            let t = random_tensor(&[64], 70 + k, 0.0, 4.0);
            GridFrame::new(Variable::RainMmh, 1000 + 300 * k as i64, 8, 8, t.data().iter().map(|&v| v as f32).collect()).unwrap()
        })
        .collect();
    let eth: Vec<GridFrame> = rain.iter().map(|f| GridFrame { variable: Variable::EthKm, ..f.clone() }).collect();
    let a = ck.to_model().unwrap().predict_frames(&rain, Some(&eth)).unwrap();
    let b = loaded.to_model().unwrap().predict_frames(&rain, Some(&eth)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 18);
    assert_eq!(a[0].timestamp, 1900 + 300);
    assert_eq!(a[17].timestamp, 1900 + 18 * 300);
    assert!(a.iter().all(|f| f.values.iter().all(|&v| v >= 0.0)));

    let rain_only = Checkpoint::from_model(&UNet3d::build(&tiny(2, 3, 1, 8)).unwrap(), 0);
    assert!(matches!(rain_only.to_model().unwrap().predict_frames(&rain, Some(&eth)), Err(Error::Argument(_))));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ck = Checkpoint::from_model(&UNet3d::build(&tiny(1, 2, 1, 4)).unwrap(), 0);
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut dup = ck.clone();
    dup.params[2].name = dup.params[0].name.clone();
    assert!(dup.to_model().is_err());
}

#[test]
fn config_text_round_trip() {
    let cfg = ModelConfig { rain_transform: RainTransform::Log1p, eth_scale: 12.5, seed: u64::MAX, ..Default::default() };
    assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
}

#[test]
fn log1p_model_outputs_rain_rates() {
    let cfg = ModelConfig { rain_transform: RainTransform::Log1p, ..tiny(1, 2, 1, 4) };
    let m = UNet3d::build(&cfg).unwrap();
    let x = random_tensor(&[1, 1, 4, 4, 4], 2, 0.0, 1.0);
    let (raw, _) = m.forward_cached(&x).unwrap();
    let y = m.forward(&x).unwrap();
    for (a, b) in raw.data().iter().zip(y.data()) {
        assert_eq!(a.exp_m1(), *b);
    }
}
