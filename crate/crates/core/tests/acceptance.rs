//! Acceptance run: every criterion prints one PASS/FAIL line; the process
//! fails if any criterion does.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;

use cim_adapt::autograd::{Graph, Var, BN_EPS};
use cim_adapt::data::SyntheticConfig;
use cim_adapt::mapper::{segment_layer, segment_ranges, used_bitlines};
use cim_adapt::model::{load_checkpoint, resnet, toy_cnn, ArchSpec, ConvSpec, Layer, LayerKind, ModelGraph, Precision, Source};
use cim_adapt::morph::{find_expansion_ratio, MorphReport, WidthProfile};
use cim_adapt::pipeline::{read_summary, Phase2Summary, Pipeline, PipelineConfig, Stage, StageSummary, INTEGER_MODEL_FILE};
use cim_adapt::qat::{
    attach_act_quant, calibrate_adc_step, export_integer_model, layer_codes, load_integer_model, phase1_train,
    phase2_train, quantized, PsumParams,
};
use cim_adapt::sim::simulate_inference;
use cim_adapt::train::{evaluate, predict, train, TrainConfig};
use cim_adapt::{channels_per_bitline, clip_bounds, rng, MacroConfig, Rng, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("load-latency exactness", load_latency),
        ("capacity constant", capacity),
        ("bit-exact simulator", bit_exact),
        ("mapping oracles", mapping_oracles),
        ("gradient suite", gradients),
        ("morphing efficacy", morph_efficacy),
        ("QAT efficacy", qat_efficacy),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("criterion {}: PASS  {name} ({secs:.1}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({secs:.1}s) {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}

fn load_latency() -> Outcome {
    let cfg = MacroConfig::default();
    // (used BLs, load weight latency) for three networks at five budgets each
    let pairs = [
        (38592, 38656),
        (8186, 8192),
        (3907, 4096),
        (1024, 1024),
        (511, 512),
        (61440, 61440),
        (8148, 8192),
        (3963, 4096),
        (1021, 1024),
        (510, 512),
        (46400, 46592),
        (8188, 8192),
        (4088, 4096),
        (997, 1024),
        (512, 512),
    ];
    let t = Instant::now();
    let got: Vec<usize> = pairs
        .iter()
        .map(|&(bl, _)| cim_adapt::mapper::load_weight_latency(bl, &cfg))
        .collect();
    let elapsed = t.elapsed();
    for (&(bl, want), g) in pairs.iter().zip(&got) {
        ensure!(*g == want, "{bl} BLs -> {g}, expected {want}");
    }
    ensure!(elapsed < Duration::from_millis(1), "took {elapsed:?}");
    Ok(format!("{} pairs", pairs.len()))
}

fn capacity() -> Outcome {
    let cfg = MacroConfig::default();
    let cpb = channels_per_bitline(&cfg, 3).map_err(|e| e.to_string())?;
    ensure!(cpb == 28, "channels per bitline {cpb}");
    let segs = segment_ranges(56, cpb).len();
    ensure!(segs == 2, "56 channels -> {segs} segments");
    Ok("cpb 28, 56 channels -> 2 segments".into())
}

/// Toy CNN taken through short seed, Phase-1 and Phase-2 runs.
fn phase2_toy() -> (ModelGraph, MacroConfig) {
    let cfg = MacroConfig::default();
    let (data, _) = SyntheticConfig {
        per_class: 64,
        ..SyntheticConfig::default()
    }
    .generate()
    .unwrap();
    let mut r = rng(31);
    let mut m = toy_cnn(3, data.resolution, 2, &mut r).unwrap();
    let (x, _) = data.batch(&(0..64).collect::<Vec<_>>());
    attach_act_quant(&mut m, &cfg, &x).unwrap();
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let fwd = cim_adapt::model::ForwardOptions {
        train_bn: true,
        act_quant: true,
        macro_cfg: Some(&cfg),
        ..Default::default()
    };
    train(&mut m, &data, &tc, &fwd, &mut r, None).unwrap();
    phase1_train(&mut m, &data, &cfg, &tc, &mut r).unwrap();
    calibrate_adc_step(&mut m, &cfg, &x, 99.9).unwrap();
    phase2_train(&mut m, &data, &cfg, &tc, &mut r).unwrap();
    (m, cfg)
}

fn bit_exact() -> Outcome {
    let (m, cfg) = phase2_toy();
    let im = export_integer_model(&m, &cfg, false).map_err(|e| e.to_string())?;
    let mut r = rng(77);
    let n = 100;
    let shape = [n, 3, im.input_resolution, im.input_resolution];
    let x = Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| r.random_range(-1.0..2.0)).collect())
        .unwrap();
    let t = Instant::now();
    let train_codes = layer_codes(&m, &cfg, &x).map_err(|e| e.to_string())?;
    let logits = predict(&m, x.clone(), &quantized(&cfg, Precision::PsumQuant)).map_err(|e| e.to_string())?;
    let per = x.numel() / n;
    let k = im.num_classes;
    let mut mismatched = 0usize;
    let mut compared = 0usize;
    let mut worst = 0.0f64;
    for b in 0..n {
        let img = Tensor::new(shape[1..].to_vec(), x.data()[b * per..(b + 1) * per].to_vec()).unwrap();
        let out = simulate_inference(&im, &img).map_err(|e| e.to_string())?;
        for (ci, tc) in &train_codes {
            let sc = &out.codes[&m.layers[*ci].name];
            for (s, seg) in tc.codes.iter().enumerate() {
                let len = seg.len() / n;
                for (a, e) in sc.codes[s].iter().zip(&seg[b * len..(b + 1) * len]) {
                    compared += 1;
                    mismatched += usize::from(*a as f64 != *e);
                }
            }
        }
        for (a, e) in out.logits.iter().zip(&logits.data()[b * k..(b + 1) * k]) {
            worst = worst.max((a - e).abs());
        }
    }
    let elapsed = t.elapsed();
    ensure!(compared > 0, "no codes compared");
    ensure!(mismatched == 0, "{mismatched} of {compared} ADC codes differ");
    ensure!(worst <= 1e-9, "logit difference {worst:e}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{compared} codes, max logit diff {worst:.1e}"))
}

fn round_half_away(v: f64) -> usize {
    let f = v.floor();
    if v - f >= 0.5 - 1e-9 * v.max(1.0) {
        f as usize + 1
    } else {
        f as usize
    }
}

/// Bitlines by walking every filter's input channels wordline by wordline.
fn enumerate_bitlines(convs: &[(usize, usize, usize)], wordlines: usize) -> usize {
    let mut cols = 0;
    for &(cin, cout, k) in convs {
        for _filter in 0..cout {
            let mut rows = 0;
            let mut open = false;
            for _c in 0..cin {
                if !open || rows + k * k > wordlines {
                    cols += 1;
                    rows = 0;
                    open = true;
                }
                rows += k * k;
            }
        }
    }
    cols
}

/// `(cin, cout, k)` of every conv after scaling non-image widths by `r`.
fn scaled_convs(m: &ModelGraph, r: f64) -> Vec<(usize, usize, usize)> {
    m.conv_indices()
        .into_iter()
        .map(|ci| {
            let s = m.conv_spec(ci).unwrap();
            let reads_image = m.sources(ci) == vec![Source::Input];
            let cin = if reads_image {
                s.in_channels
            } else {
                round_half_away(s.in_channels as f64 * r).max(1)
            };
            (cin, round_half_away(s.out_channels as f64 * r).max(1), s.kernel_size)
        })
        .collect()
}

fn random_architecture(r: &mut Rng, i: usize) -> ModelGraph {
    if i % 5 == 4 {
        let stages = r.random_range(1..4);
        let widths: Vec<usize> = (0..stages).map(|_| r.random_range(1..80)).collect();
        let blocks: Vec<usize> = (0..stages).map(|_| r.random_range(1..3)).collect();
        return resnet("r", &widths, &blocks, 3, 8, 2, r).unwrap();
    }
    let n = r.random_range(1..7);
    let mut layers = Vec::new();
    let mut cin = 3;
    for j in 0..n {
        let w = r.random_range(1..200);
        let k = [1, 3, 5][r.random_range(0..3)];
        layers.push(Layer::new(format!("c{j}"), LayerKind::Conv(ConvSpec::new(cin, w, k))));
        layers.push(Layer::new(format!("c{j}_bn"), LayerKind::BatchNorm { channels: w }));
        layers.push(Layer::new(format!("c{j}_relu"), LayerKind::Relu));
        cin = w;
    }
    layers.push(Layer::new("pool", LayerKind::AvgPool));
    layers.push(Layer::new(
        "fc",
        LayerKind::Linear {
            in_features: cin,
            out_features: 2,
        },
    ));
    ArchSpec::Layers { layers }.build(3, 6, 2, r).unwrap()
}

fn mapping_oracles() -> Outcome {
    let cfg = MacroConfig::default();
    let wl = cfg.wordlines();
    let (step, cap) = (0.001, 6.0);
    let mut r = rng(2024);
    for i in 0..50 {
        let m = random_architecture(&mut r, i);
        let enumerated = enumerate_bitlines(&scaled_convs(&m, 1.0), wl);
        let segmented: usize = m
            .conv_indices()
            .into_iter()
            .map(|ci| segment_layer(&m.layers[ci], &cfg).unwrap().columns())
            .sum();
        let profile = WidthProfile::from_model(&m).map_err(|e| e.to_string())?;
        let closed = profile.bitlines_at(1.0, &cfg).map_err(|e| e.to_string())?;
        let mapped = used_bitlines(&m, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            enumerated == closed && segmented == closed && mapped == closed,
            "architecture {i}: enumerated {enumerated}, segmented {segmented}, mapper {mapped}, closed form {closed}"
        );

        let target = closed + r.random_range(0..4 * closed.max(64));
        let search = find_expansion_ratio(&profile, &cfg, target, step, cap).map_err(|e| e.to_string())?;
        let n = ((cap - 1.0) / step).round() as usize;
        let mut oracle = 1.0;
        for k in 1..=n {
            let ratio = 1.0 + k as f64 * step;
            if enumerate_bitlines(&scaled_convs(&m, ratio), wl) > target {
                break;
            }
            oracle = ratio;
        }
        ensure!(
            (search.ratio - oracle).abs() < 1e-12,
            "architecture {i}: search {} vs grid scan {oracle} (target {target})",
            search.ratio
        );
    }
    Ok("50 architectures".into())
}

fn rand_tensor(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn probe_sum(g: &mut Graph, x: Var, w: &Tensor) -> Var {
    let v: f64 = g.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let w = g.constant(w.clone());
    g.custom(
        &[x, w],
        Tensor::scalar(v),
        Box::new(|gr, ins, _| Ok(vec![Some(ins[1].map(|v| v * gr.item())), None])),
    )
}

/// Largest relative error between analytic gradients of `op` and central
/// differences of `reference` (defaults to `op` itself), over all inputs.
fn fd_error(
    inputs: &[Tensor],
    op: &dyn Fn(&mut Graph, &[Var]) -> Var,
    reference: Option<&dyn Fn(&mut Graph, &[Var]) -> Var>,
    skip: &dyn Fn(usize, usize) -> bool,
) -> f64 {
    let reference = reference.unwrap_or(op);
    let mut r = rng(5);
    let probe = {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vs);
        rand_tensor(&mut r, g.value(out).shape())
    };
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = reference(&mut g, &vs);
        g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = op(&mut g, &vs);
    let loss = probe_sum(&mut g, out, &probe);
    let grads = g.gradients(loss).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, v) in vs.iter().enumerate() {
        let an = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            if skip(k, i) {
                continue;
            }
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = an.data()[i];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
        }
    }
    worst
}

fn gradients() -> Outcome {
    let mut r = rng(9);
    let tol = 1e-4;
    let none = &|_: usize, _: usize| false;
    let mut checks: Vec<(&str, f64)> = Vec::new();
    let x = rand_tensor(&mut r, &[2, 3, 5, 5]);
    let w = rand_tensor(&mut r, &[4, 3, 3, 3]);
    checks.push(("conv2d", fd_error(&[x.clone(), w.clone()], &|g, v| g.conv2d(v[0], v[1], 1, 1).unwrap(), None, none)));
    checks.push(("conv2d stride 2", fd_error(&[x.clone(), w], &|g, v| g.conv2d(v[0], v[1], 2, 1).unwrap(), None, none)));
    let (gm, bt) = (rand_tensor(&mut r, &[3]), rand_tensor(&mut r, &[3]));
    checks.push((
        "batchnorm (batch stats)",
        fd_error(&[x.clone(), gm.clone(), bt.clone()], &|g, v| g.batch_norm_train(v[0], v[1], v[2], BN_EPS).unwrap().0, None, none),
    ));
    checks.push((
        "batchnorm (running stats)",
        fd_error(
            &[x.clone(), gm, bt],
            &|g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 2.0, 1.1], BN_EPS).unwrap(),
            None,
            none,
        ),
    ));
    let x4 = rand_tensor(&mut r, &[2, 3, 4, 4]);
    checks.push(("relu", fd_error(&[x4.clone()], &|g, v| g.relu(v[0]), None, none)));
    checks.push(("max pool", fd_error(&[x4.clone()], &|g, v| g.max_pool2d(v[0], 2, 2).unwrap(), None, none)));
    checks.push(("global avg pool", fd_error(&[x4.clone()], &|g, v| g.global_avg_pool(v[0]).unwrap(), None, none)));
    let b = rand_tensor(&mut r, &[3]);
    checks.push(("channel bias", fd_error(&[x4.clone(), b], &|g, v| g.add_channel_bias(v[0], v[1]).unwrap(), None, none)));
    let y4 = rand_tensor(&mut r, &[2, 3, 4, 4]);
    checks.push(("residual add", fd_error(&[x4.clone(), y4], &|g, v| g.add(v[0], v[1]).unwrap(), None, none)));
    checks.push((
        "channel mask",
        fd_error(&[x4.clone()], &|g, v| g.channel_mask(v[0], &[1.0, 0.0, 0.5]).unwrap(), None, none),
    ));
    let (lw, lb) = (rand_tensor(&mut r, &[5, 48]), rand_tensor(&mut r, &[5]));
    checks.push(("linear", fd_error(&[x4, lw, lb], &|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(), None, none)));
    let logits = rand_tensor(&mut r, &[4, 3]);
    checks.push(("cross entropy", fd_error(&[logits], &|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap(), None, none)));
    let (a, c) = (rand_tensor(&mut r, &[6]), rand_tensor(&mut r, &[4]));
    checks.push((
        "abs sum, scale, scalar sum",
        fd_error(
            &[a, c],
            &|g, v| {
                let p = g.abs_sum_scaled(v[0], 0.7);
                let q = g.abs_sum_scaled(v[1], 1.3);
                let q = g.scale(q, -2.0);
                g.add_scalars(&[p, q]).unwrap()
            },
            None,
            none,
        ),
    ));
    let fw = rand_tensor(&mut r, &[3, 2, 3, 3]);
    let fb = rand_tensor(&mut r, &[3]);
    let fg = rand_tensor(&mut r, &[3]);
    let fbeta = rand_tensor(&mut r, &[3]);
    let fold = |g: &mut Graph, v: &[Var]| {
        let (w, b) = g.fold_conv_bn(v[0], Some(v[1]), v[2], v[3], &[0.2, -0.1, 0.4], &[0.7, 1.5, 0.3]).unwrap();
        let sw = g.abs_sum_scaled(w, 1.0);
        let sb = g.abs_sum_scaled(b, 1.0);
        g.add_scalars(&[sw, sb]).unwrap()
    };
    checks.push(("conv-batchnorm fold", fd_error(&[fw, fb, fg, fbeta], &fold, None, none)));

    // learned-step quantizer: straight-through inside the clip range
    let bounds = clip_bounds(4).unwrap();
    let step = 0.1;
    let xq = Tensor::from_vec((0..40).map(|_| r.random_range(-1.2..1.2)).collect());
    let inside: Vec<bool> = xq.data().iter().map(|v| bounds.contains(v / step)).collect();
    let lsq = |g: &mut Graph, v: &[Var]| {
        let s = g.constant(Tensor::scalar(step));
        g.lsq_quantize(v[0], s, bounds, 1.0).unwrap()
    };
    let clip = |g: &mut Graph, v: &[Var]| {
        let t = g.value(v[0]).map(|x| x.clamp(bounds.lo() * step, bounds.hi() * step));
        g.constant(t)
    };
    let skip_out = |_: usize, i: usize| !inside[i];
    checks.push(("weight quantizer in range", fd_error(&[xq.clone()], &lsq, Some(&clip), &skip_out)));
    let mut g = Graph::new();
    let xv = g.variable(xq.clone());
    let sv = g.constant(Tensor::scalar(step));
    let q = g.lsq_quantize(xv, sv, bounds, 1.0).unwrap();
    let l = g.abs_sum_scaled(q, 1.0);
    let gr = g.gradients(l).unwrap();
    let gx = gr.get(xv).unwrap();
    let clipped = inside.iter().filter(|k| !**k).count();
    ensure!(clipped > 0, "weight quantizer sample has no clipped element");
    ensure!(
        inside.iter().zip(gx.data()).all(|(k, d)| *k || *d == 0.0),
        "clipped weight elements have a nonzero gradient"
    );

    // ADC quantizer: in-range partial sums follow the unquantized conv
    let (s_a, s_w) = (0.1, 0.05);
    let qa = Tensor::new(vec![1, 6, 4, 4], (0..96).map(|_| r.random_range(0..16) as f64).collect()).unwrap();
    let qw = Tensor::new(vec![2, 6, 3, 3], (0..108).map(|_| r.random_range(-7..8) as f64).collect()).unwrap();
    let wide = PsumParams {
        act_step: s_a,
        weight_step: s_w,
        adc_step: s_a,
        stride: 1,
        pad: 1,
        segments: vec![0..3, 3..6],
        adc: clip_bounds(16).unwrap(),
    };
    let (xh, wh) = (qa.map(|v| v * s_a), qw.map(|v| v * s_w));
    let psum = |g: &mut Graph, v: &[Var]| g.psum_conv(v[0], v[1], &wide).unwrap();
    let conv = |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], 1, 1).unwrap();
    checks.push(("ADC quantizer in range", fd_error(&[xh.clone(), wh.clone()], &psum, Some(&conv), none)));
    ensure!(adc_clipped_grad_zero(), "clipped partial sums pass a nonzero gradient");

    let worst = checks.iter().cloned().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    for (name, err) in &checks {
        ensure!(*err < tol, "{name}: relative error {err:e}");
    }
    Ok(format!("{} checks, worst {} {:.1e}", checks.len(), worst.0, worst.1))
}

/// One-wordline conv whose partial sum, 15 · 7 = 105, is ten ADC steps
/// against a 3-bit range topping out at 3.
fn adc_clipped_grad_zero() -> bool {
    let p = PsumParams {
        act_step: 0.1,
        weight_step: 0.05,
        adc_step: 1.05,
        stride: 1,
        pad: 0,
        segments: vec![0..1],
        adc: clip_bounds(3).unwrap(),
    };
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(vec![1, 1, 1, 1], vec![1.5]).unwrap());
    let w = g.variable(Tensor::new(vec![1, 1, 1, 1], vec![0.35]).unwrap());
    let y = g.psum_conv(x, w, &p).unwrap();
    let l = g.abs_sum_scaled(y, 1.0);
    let gr = g.gradients(l).unwrap();
    gr.get(x).unwrap().data() == [0.0] && gr.get(w).unwrap().data() == [0.0]
}

/// The default pipeline on the default synthetic task, run once and shared
/// by the efficacy criteria.
struct FullRun {
    dir: tempfile::TempDir,
    seed_secs: f64,
    morph_secs: f64,
    qat_secs: f64,
    error: Option<String>,
}

fn full_run() -> &'static FullRun {
    static RUN: OnceLock<FullRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut run = FullRun {
            dir,
            seed_secs: 0.0,
            morph_secs: 0.0,
            qat_secs: 0.0,
            error: None,
        };
        let p = match Pipeline::new(PipelineConfig::default(), 1, run.dir.path()) {
            Ok(p) => p,
            Err(e) => {
                run.error = Some(e.to_string());
                return run;
            }
        };
        let res = (|| -> cim_adapt::Result<()> {
            let t = Instant::now();
            p.train_seed()?;
            run.seed_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            p.morph()?;
            run.morph_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            p.phase1()?;
            p.phase2(false)?;
            run.qat_secs = t.elapsed().as_secs_f64();
            Ok(())
        })();
        run.error = res.err().map(|e| e.to_string());
        run
    })
}

fn morph_efficacy() -> Outcome {
    let run = full_run();
    let out = run.dir.path();
    let seed: StageSummary = read_summary(out, Stage::TrainSeed).map_err(|e| format!("{e} ({:?})", run.error))?;
    let report: MorphReport = read_summary(out, Stage::Morph).map_err(|e| format!("{e} ({:?})", run.error))?;
    let base = report.seed.used_bls;
    let fin = report.final_snapshot();
    let usage = fin.macro_usage.unwrap_or(0.0);
    let drop = (seed.accuracy - fin.accuracy) * 100.0;
    let secs = run.seed_secs + run.morph_secs;
    let detail = format!(
        "{base} -> {} BLs (target {}), usage {usage:.3}, accuracy {:.3} vs seed {:.3}, {secs:.0}s",
        fin.used_bls, report.target_bl, fin.accuracy, seed.accuracy
    );
    ensure!(report.target_bl == base / 2, "target {} is not half of {base}", report.target_bl);
    ensure!(fin.used_bls <= report.target_bl, "over budget: {detail}");
    ensure!(usage >= 0.6, "macro usage below 0.6: {detail}");
    ensure!(drop <= 2.0, "accuracy fell {drop:.2} points: {detail}");
    ensure!(secs < 900.0, "too slow: {detail}");
    Ok(detail)
}

fn qat_efficacy() -> Outcome {
    let run = full_run();
    let out = run.dir.path();
    let p2: Phase2Summary = read_summary(out, Stage::QatPhase2).map_err(|e| format!("{e} ({:?})", run.error))?;
    let drop = p2.phase1_accuracy - p2.psum_ptq_accuracy;
    let recovered = p2.accuracy - p2.psum_ptq_accuracy;

    // the same Phase-1 model behind a 10-bit ADC
    let t = Instant::now();
    let cfg10 = MacroConfig::default().with_adc_bits(10).map_err(|e| e.to_string())?;
    let mut m = load_checkpoint(out.join(Stage::QatPhase1.checkpoint())).map_err(|e| e.to_string())?;
    let pcfg = PipelineConfig::default();
    let (train_set, test_set) = pcfg.data.load().map_err(|e| e.to_string())?;
    let n = pcfg.calibration.batch.min(train_set.len());
    let (batch, _) = train_set.batch(&(0..n).collect::<Vec<_>>());
    calibrate_adc_step(&mut m, &cfg10, &batch, pcfg.calibration.percentile).map_err(|e| e.to_string())?;
    let acc10 = evaluate(&m, &test_set, &quantized(&cfg10, Precision::PsumQuant)).map_err(|e| e.to_string())?;
    let drop10 = (p2.phase1_accuracy - acc10) * 100.0;
    let secs = run.qat_secs + t.elapsed().as_secs_f64();

    let detail = format!(
        "phase 1 {:.3}, 5-bit PTQ {:.3}, phase 2 {:.3}, 10-bit PTQ {acc10:.3}, {secs:.0}s",
        p2.phase1_accuracy, p2.psum_ptq_accuracy, p2.accuracy
    );
    // phase 2 must close at least half the gap opened by post-training quantization
    ensure!(
        recovered >= 0.5 * drop,
        "phase 2 gained {:.2} points on a {:.2}-point drop: {detail}",
        100.0 * recovered,
        100.0 * drop
    );
    ensure!(drop10 < 0.5, "10-bit ADC drop {drop10:.2} points: {detail}");
    ensure!(secs < 900.0, "too slow: {detail}");
    Ok(format!("PTQ drop {:.2} points, phase 2 {:+.2}; {detail}", 100.0 * drop, 100.0 * recovered))
}

fn small_config() -> PipelineConfig {
    PipelineConfig::from_json(
        r#"{
            "data": {"source": "synthetic", "per_class": 32, "test_per_class": 16, "resolution": 8},
            "seed": {"epochs": 2},
            "morph": {"lambda_max": 1e-4, "ramp_epochs": 1, "iterations": 2,
                      "shrink": {"epochs": 2, "lr": 0.05}, "finetune": {"epochs": 1}},
            "phase1": {"epochs": 1, "lr": 0.001},
            "phase2": {"epochs": 1},
            "calibration": {"batch": 32}
        }"#,
    )
    .unwrap()
}

fn run_small(dir: &Path) -> cim_adapt::Result<Vec<cim_adapt::sim::SimOutput>> {
    let p = Pipeline::new(small_config(), 42, dir)?;
    p.run_all(true)?;
    let im = load_integer_model(dir.join(INTEGER_MODEL_FILE))?;
    (0..4)
        .map(|i| {
            let img = Tensor::new(
                vec![im.input_channels, im.input_resolution, im.input_resolution],
                p.test.image(i).to_vec(),
            )?;
            simulate_inference(&im, &img)
        })
        .collect()
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = run_small(a.path()).map_err(|e| e.to_string())?;
    let sb = run_small(b.path()).map_err(|e| e.to_string())?;
    let mut files: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    files.sort();
    ensure!(files.len() >= 12, "only {} artifacts", files.len());
    for f in &files {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{f:?}: {e}"))?;
        ensure!(x == y, "{f:?} differs between runs");
    }
    ensure!(sa == sb, "simulator outputs differ between runs");
    let cycles: usize = sa.iter().map(|o| o.trace.cycles()).sum();
    Ok(format!("{} artifacts and {} traces identical ({cycles} cycles)", files.len(), sa.len()))
}
