#![allow(dead_code)]

pub mod oracles;

use cinetext::contrastive::{combined_loss, flood, infonce_t2v, infonce_v2t, ContrastiveConfig};
use cinetext::diffcore::{grad_check, init, Binder, GradCheckOptions, ParamSet, Tensor, Var};
use cinetext::encoders::{text_forward, video_forward, EncoderConfig, StageConfig, TextConfig, VideoConfig};
use cinetext::encoders::{init_model, project as project_head, TEXT_PROJ, VIDEO_PROJ};
use cinetext::milhead::{huber_loss, init_head, mil_forward, weighted_bce, HeadConfig};
use cinetext::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type LossFn = Box<dyn for<'t, 'p> Fn(&Binder<'t, 'p>) -> Result<Var<'t>>>;

/// One differentiable function with parameters drawn from a seed.
pub struct Case {
    pub name: &'static str,
    pub params: ParamSet,
    pub f: LossFn,
    /// Elements probed per parameter; `None` checks all of them.
    pub probe: Option<usize>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    init::normal(r, shape, 1.0)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn weights(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(r, n, -1.0, 1.0)).unwrap()
}

/// `sum(x * c)` for a fixed random `c`, so every output element matters.
fn project<'t>(x: Var<'t>, c: &Tensor) -> Var<'t> {
    let c = x.tape().constant(c.clone());
    x.mul(c).sum()
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        video: VideoConfig {
            in_channels: 1,
            frames: 4,
            height: 8,
            width: 8,
            cube: [2, 4, 4],
            stride: [2, 2, 2],
            padding: [0, 1, 1],
            stages: vec![
                StageConfig {
                    width: 8,
                    heads: 2,
                    layers: 1,
                    stride: [1, 2, 2],
                },
                StageConfig {
                    width: 12,
                    heads: 2,
                    layers: 1,
                    stride: [1, 2, 2],
                },
            ],
            mlp_ratio: 2,
        },
        text: TextConfig {
            vocab_size: 12,
            max_tokens: 6,
            layers: 2,
            heads: 2,
            hidden: 8,
            mlp_ratio: 2,
            frozen_layers: 0,
        },
        joint_dim: 6,
    }
}

pub fn elementwise(seed: u64) -> Case {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.insert("x", normal(&mut r, &[3, 4])).unwrap();
    ps.insert("y", normal(&mut r, &[3, 4])).unwrap();
    let c = weights(&mut r, &[3, 4]);
    Case {
        name: "elementwise",
        params: ps,
        probe: None,
        f: Box::new(move |b| {
            let (x, y) = (b.p("x"), b.p("y"));
            let a = x.tanh().mul(y.sigmoid()).add(x.gelu()).sub(y.scale(0.3).exp());
            let l = x.mul(x).add_scalar(1.0).ln().add(y.softplus()).add(x.sub(y).abs().neg());
            Ok(project(a.add(l).add_scalar(0.5), &c))
        }),
    }
}

pub fn linear_algebra(seed: u64) -> Case {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.insert("a", normal(&mut r, &[3, 4])).unwrap();
    ps.insert("b", normal(&mut r, &[4, 5])).unwrap();
    ps.insert("c", normal(&mut r, &[2, 5])).unwrap();
    ps.insert("w", normal(&mut r, &[5, 4])).unwrap();
    ps.insert("bias", normal(&mut r, &[5])).unwrap();
    ps.insert("g", normal(&mut r, &[2])).unwrap();
    let c = weights(&mut r, &[2, 5]);
    Case {
        name: "linear_algebra",
        params: ps,
        probe: None,
        f: Box::new(move |b| {
            let ab = b.p("a").matmul(b.p("b"));
            let lin = b.p("a").linear(b.p("w"), Some(b.p("bias")));
            let m = ab.add(lin).add_row(b.p("bias"));
            let k = b.p("c").matmul_nt(m).transpose().mul_row(b.p("g"));
            let back = k.transpose().matmul(m.slice_cols(0, 5));
            Ok(project(back, &c))
        }),
    }
}

pub fn normalizers(seed: u64) -> Case {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.insert("x", normal(&mut r, &[4, 5])).unwrap();
    ps.insert("s", normal(&mut r, &[5, 5])).unwrap();
    let c = weights(&mut r, &[4, 5]);
    Case {
        name: "normalizers",
        params: ps,
        probe: None,
        f: Box::new(move |b| {
            let x = b.p("x");
            let sm = x.softmax_rows();
            let lsm = x.scale(2.0).log_softmax_rows();
            let ln = x.layernorm_rows(1e-5);
            let l2 = x.l2_normalize_rows()?;
            let d = b.p("s").diag().mean();
            let all = sm.add(lsm.scale(0.1)).add(ln).add(l2);
            Ok(project(all, &c).add(d))
        }),
    }
}

pub fn reshaping(seed: u64) -> Case {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.insert("table", normal(&mut r, &[6, 3])).unwrap();
    ps.insert("x", normal(&mut r, &[2, 6])).unwrap();
    let ids: Vec<usize> = (0..5).map(|_| r.random_range(0..6)).collect();
    let c = weights(&mut r, &[5, 3]);
    Case {
        name: "reshaping",
        params: ps,
        probe: None,
        f: Box::new(move |b| {
            let e = b.p("table").embedding(&ids);
            let x = b.p("x").reshape(&[4, 3]);
            let rows = Var::concat_rows(&[e.slice_rows(0, 3), x.slice_rows(1, 3)]);
            let cols = Var::concat_cols(&[rows.slice_cols(0, 1), rows.slice_cols(1, 3)]);
            Ok(project(cols, &c))
        }),
    }
}

pub fn grid_ops(seed: u64) -> Case {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.insert("v", normal(&mut r, &[2, 4, 5, 5])).unwrap();
    ps.insert("tok", normal(&mut r, &[1 + 2 * 4 * 4, 3])).unwrap();
    // im2col [2,4,5,5], kernel (2,3,3), stride (2,2,2), pad (0,1,1): grid (2,3,3), K = 36
    let c1 = weights(&mut r, &[18, 36]);
    // pool (2,4,4) by (1,2,2) with class token: 1 + 2*2*2 rows
    let c2 = weights(&mut r, &[9, 3]);
    let c3 = weights(&mut r, &[8, 3]);
    Case {
        name: "grid_ops",
        params: ps,
        probe: None,
        f: Box::new(move |b| {
            let cols = b.p("v").im2col3d([2, 3, 3], [2, 2, 2], [0, 1, 1]);
            let pooled = b.p("tok").pool_grid([2, 4, 4], [1, 2, 2], true);
            let plain = b.p("tok").slice_rows(1, 33).pool_grid([2, 4, 4], [1, 2, 2], false);
            Ok(project(cols, &c1).add(project(pooled, &c2)).add(project(plain, &c3)))
        }),
    }
}

pub fn huber(seed: u64) -> Case {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.insert("p", normal(&mut r, &[12])).unwrap();
    let target = uniform(&mut r, 12, -1.5, 1.5);
    let delta = r.random_range(0.3..1.5);
    Case {
        name: "huber",
        params: ps,
        probe: None,
        f: Box::new(move |b| Ok(huber_loss(b.p("p"), &target, delta))),
    }
}

pub fn bce(seed: u64) -> Case {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.insert("z", normal(&mut r, &[10, 1])).unwrap();
    let labels: Vec<f64> = (0..10).map(|_| f64::from(r.random_bool(0.4) as u8)).collect();
    let w = r.random_range(0.5..4.0);
    Case {
        name: "weighted_bce",
        params: ps,
        probe: None,
        f: Box::new(move |b| Ok(weighted_bce(b.p("z"), &labels, w))),
    }
}

fn unit_rows<'t>(x: Var<'t>) -> Result<Var<'t>> {
    x.l2_normalize_rows()
}

pub fn infonce(seed: u64) -> Case {
    let mut r = rng(seed);
    let n = r.random_range(2..7);
    let mut ps = ParamSet::new();
    ps.insert("v", normal(&mut r, &[n, 5])).unwrap();
    ps.insert("u", normal(&mut r, &[n, 5])).unwrap();
    let cfg = ContrastiveConfig {
        temperature: r.random_range(0.1..1.0),
        lambda: r.random_range(0.0..1.0),
        ..ContrastiveConfig::default()
    };
    Case {
        name: "infonce",
        params: ps,
        probe: None,
        f: Box::new(move |b| {
            let v = unit_rows(b.p("v"))?;
            let u = unit_rows(b.p("u"))?;
            let a = infonce_v2t(v, u, cfg.temperature)?;
            let t = infonce_t2v(v, u, cfg.temperature)?;
            let c = combined_loss(v, u, &cfg)?;
            Ok(a.scale(0.3).add(t.scale(0.2)).add(c))
        }),
    }
}

/// Flooded InfoNCE with the level placed on either side of the raw loss.
pub fn flooded(seed: u64) -> Case {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    ps.insert("v", normal(&mut r, &[4, 3])).unwrap();
    ps.insert("u", normal(&mut r, &[4, 3])).unwrap();
    let cfg = ContrastiveConfig {
        temperature: 0.5,
        ..ContrastiveConfig::default()
    };
    let raw = {
        let tape = cinetext::Tape::inference();
        let b = Binder::new(&tape, &ps);
        let v = unit_rows(b.p("v")).unwrap();
        let u = unit_rows(b.p("u")).unwrap();
        combined_loss(v, u, &cfg).unwrap().item()
    };
    let level = if seed % 2 == 0 { raw * 0.5 } else { raw * 1.5 };
    Case {
        name: "flooded_infonce",
        params: ps,
        probe: None,
        f: Box::new(move |b| {
            let v = unit_rows(b.p("v"))?;
            let u = unit_rows(b.p("u"))?;
            Ok(flood(combined_loss(v, u, &cfg)?, level))
        }),
    }
}

pub fn mil(seed: u64) -> Case {
    let mut r = rng(seed);
    let k = r.random_range(1..6);
    let d = 6;
    let classification = seed % 2 == 1;
    let cfg = if classification {
        HeadConfig {
            hidden: 4,
            ..HeadConfig::classification(d, 2.0)
        }
    } else {
        HeadConfig {
            hidden: 4,
            ..HeadConfig::regression(d)
        }
    };
    let mut ps = ParamSet::new();
    init_head(&mut ps, &cfg, d, &mut r).unwrap();
    if cfg.layernorm_pre {
        ps.set_value("head.norm.g", normal(&mut r, &[d])).unwrap();
        ps.set_value("head.norm.b", normal(&mut r, &[d])).unwrap();
    }
    // half-scale instances keep the tanh gate out of saturation
    ps.insert("h", init::normal(&mut r, &[k, d], 0.5)).unwrap();
    let target = r.random_range(-1.0..1.0);
    let label = f64::from(r.random_bool(0.5) as u8);
    Case {
        name: "gated_attention_mil",
        params: ps,
        probe: None,
        f: Box::new(move |b| {
            let out = mil_forward(b, b.p("h"), &cfg)?;
            Ok(if classification {
                weighted_bce(out.output, &[label], cfg.pos_weight)
            } else {
                huber_loss(out.output.reshape(&[1]), &[target], 2.0)
            })
        }),
    }
}

fn jitter(ps: &mut ParamSet, r: &mut ChaCha8Rng) {
    let names: Vec<String> = ps.names().cloned().collect();
    for n in names {
        let t = ps.tensor(&n).unwrap().clone();
        let noisy: Vec<f64> = t.data().iter().map(|v| v + 0.1 * r.random_range(-1.0..1.0)).collect();
        ps.set_value(&n, Tensor::new(t.shape().to_vec(), noisy).unwrap()).unwrap();
    }
}

pub fn video_encoder(seed: u64) -> Case {
    let cfg = tiny_encoder();
    let mut r = rng(seed);
    let mut full = init_model(&cfg, seed).unwrap();
    jitter(&mut full, &mut r);
    let ps = full.with_prefix("video.");
    let v = &cfg.video;
    let clip = Tensor::new(
        vec![v.in_channels, v.frames, v.height, v.width],
        uniform(&mut r, v.in_channels * v.frames * v.height * v.width, 0.0, 1.0),
    )
    .unwrap();
    let c = weights(&mut r, &[1, cfg.final_width()]);
    Case {
        name: "video_encoder",
        params: ps,
        probe: Some(3),
        f: Box::new(move |b| Ok(project(video_forward(b, &cfg, &clip, None)?, &c))),
    }
}

pub fn text_encoder(seed: u64) -> Case {
    let cfg = tiny_encoder();
    let mut r = rng(seed);
    let mut full = init_model(&cfg, seed).unwrap();
    jitter(&mut full, &mut r);
    let ps = full.with_prefix("text.");
    let n = r.random_range(1..6);
    let ids: Vec<usize> = (0..n).map(|_| r.random_range(3..cfg.text.vocab_size)).collect();
    let c = weights(&mut r, &[1, cfg.text.hidden]);
    Case {
        name: "text_encoder",
        params: ps,
        probe: Some(3),
        f: Box::new(move |b| Ok(project(text_forward(b, &cfg, &ids)?, &c))),
    }
}

/// Both encoders, both projections and the combined loss on a batch of two pairs.
pub fn joint_model(seed: u64) -> Case {
    let cfg = tiny_encoder();
    let mut r = rng(seed);
    let mut ps = init_model(&cfg, seed).unwrap();
    jitter(&mut ps, &mut r);
    let v = &cfg.video;
    let n = v.in_channels * v.frames * v.height * v.width;
    let clips: Vec<Tensor> = (0..2)
        .map(|_| Tensor::new(vec![v.in_channels, v.frames, v.height, v.width], uniform(&mut r, n, 0.0, 1.0)).unwrap())
        .collect();
    let ids: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..4).map(|_| r.random_range(3..cfg.text.vocab_size)).collect())
        .collect();
    let loss_cfg = ContrastiveConfig {
        temperature: 0.5,
        ..ContrastiveConfig::default()
    };
    Case {
        name: "joint_model",
        params: ps,
        probe: Some(2),
        f: Box::new(move |b| {
            let vids = clips
                .iter()
                .map(|c| video_forward(b, &cfg, c, None))
                .collect::<Result<Vec<_>>>()?;
            let txts = ids.iter().map(|t| text_forward(b, &cfg, t)).collect::<Result<Vec<_>>>()?;
            let ve = project_head(b, VIDEO_PROJ, Var::concat_rows(&vids))?;
            let te = project_head(b, TEXT_PROJ, Var::concat_rows(&txts))?;
            combined_loss(ve, te, &loss_cfg)
        }),
    }
}

/// Three dense layers with tanh, GELU and a squared-error output.
pub fn toy_network(seed: u64) -> Case {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    for (i, (o, n)) in [(6, 4), (5, 6), (1, 5)].into_iter().enumerate() {
        ps.insert(format!("l{i}.w"), init::xavier(&mut r, o, n)).unwrap();
        ps.insert(format!("l{i}.b"), normal(&mut r, &[o])).unwrap();
    }
    let x = normal(&mut r, &[3, 4]);
    let y = normal(&mut r, &[3, 1]);
    Case {
        name: "toy_network",
        params: ps,
        probe: None,
        f: Box::new(move |b| {
            let t = b.tape();
            let h = t.constant(x.clone()).linear(b.p("l0.w"), Some(b.p("l0.b"))).tanh();
            let h = h.linear(b.p("l1.w"), Some(b.p("l1.b"))).gelu();
            let e = h.linear(b.p("l2.w"), Some(b.p("l2.b"))).sub(t.constant(y.clone()));
            Ok(e.mul(e).mean())
        }),
    }
}

pub const CASES: &[fn(u64) -> Case] = &[
    elementwise,
    linear_algebra,
    normalizers,
    reshaping,
    grid_ops,
    huber,
    bce,
    infonce,
    flooded,
    mil,
    video_encoder,
    text_encoder,
    joint_model,
    toy_network,
];

/// Worst relative error of one case at one seed.
pub fn check_case(case: &Case, seed: u64) -> Result<(f64, String)> {
    let opts = GradCheckOptions {
        h: 1e-5,
        tol: 1e-4,
        max_elems_per_param: case.probe,
        seed,
    };
    let f = &case.f;
    let rep = grad_check(|b| f(b), &case.params, opts)?;
    let worst = rep
        .worst()
        .map(|w| format!("{}[{}] analytic {:e} numeric {:e}", w.name, w.worst_index, w.analytic, w.numeric))
        .unwrap_or_default();
    Ok((rep.max_rel_err(), worst))
}

/// Run `make` over `seeds` and return the worst error with its location.
pub fn sweep_case(make: fn(u64) -> Case, seeds: std::ops::Range<u64>) -> (&'static str, f64, String) {
    let mut name = "";
    let mut worst = (0.0, String::new());
    for s in seeds {
        let case = make(s);
        name = case.name;
        let (e, w) = check_case(&case, s).unwrap_or_else(|e| panic!("{name} seed {s}: {e}"));
        if e > worst.0 {
            worst = (e, format!("seed {s}: {w}"));
        }
    }
    (name, worst.0, worst.1)
}
