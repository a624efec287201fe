//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! The desk-scale training criterion trains six small models and dominates
//! the runtime (roughly half an hour on one core).

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use crackscreen::arch::ArchConfig;
use crackscreen::augment::{apply_pipeline, DegradationSpec, ImageBuffer, Normalization};
use crackscreen::cbam::Cbam;
use crackscreen::data::{generate_synthetic, stratified_split, Fractions, SyntheticSample, SyntheticSpec};
use crackscreen::gradcam::{concentration, grad_cam_images};
use crackscreen::inspect::plan_tiles;
use crackscreen::loss::{cross_entropy, focal_loss, weighted_ce, LossConfig, CRACK};
use crackscreen::metrics::{paired_t_test, reconstruct_confusion, wilcoxon_signed_rank_exact, ConfusionMatrix};
use crackscreen::model::Model;
use crackscreen::nn::{global_avg_pool, max_pool, BatchNorm, Conv2d, Linear, Mode, Pass, ResidualBlock};
use crackscreen::tensor::{finite_diff_check, Graph, Tensor, Var};
use crackscreen::train::{decode_checkpoint, encode_checkpoint, evaluate, load_checkpoint, save_checkpoint, train, Degraded, MemorySource, Subset, TrainConfig};
use crackscreen::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

type Check = std::result::Result<String, String>;

/// Writes past the test harness's output capture so the verdicts show up
/// in a plain `cargo test` run.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crackscreen"))
}

fn run_bin(args: &[&str]) -> std::result::Result<(), String> {
    let out = bin().args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

// ---------------------------------------------------------------- 1

fn parameter_and_mac_counts(dir: &Path) -> Check {
    let out = dir.join("stats");
    run_bin(&["-q", "arch-stats", "resnet18-cbam", "--out", out.to_str().unwrap()])?;
    let text = std::fs::read_to_string(out.join("arch-stats-resnet18-cbam.json")).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let params = v["params"]["total"].as_u64().unwrap_or(0);
    let attention = v["params"]["attention"].as_u64().unwrap_or(0);
    let macs = v["macs"]["total"].as_u64().unwrap_or(0) as f64;
    let attention_macs = v["macs"]["attention"].as_u64().unwrap_or(0) as f64;
    let plain = crackscreen::arch::count_params(&ArchConfig::resnet18()).total;
    let share = 100.0 * attention_macs / macs;
    let detail = format!("params {params} ({:.2}M), cbam {attention}, MACs {:.3}G, cbam MAC share {share:.3}%", params as f64 / 1e6, macs / 1e9);
    ensure(
        params == 11_210_405
            && format!("{:.2}", params as f64 / 1e6) == "11.21"
            && attention == 32_867
            && params - plain == 32_867
            && (macs / 1.82e9 - 1.0).abs() <= 0.02
            && share < 0.6,
        detail,
    )
}

// ---------------------------------------------------------------- 2

const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

/// `Σ target · y` keeps every output element in the gradient.
fn project(g: &mut Graph<f64>, y: Var, target: &Tensor<f64>) -> Result<Var> {
    let t = g.constant(target);
    let p = g.mul(y, t)?;
    g.sum_all(p)
}

fn worst_over_seeds(mut per_seed: impl FnMut(u64) -> Result<f64>) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        worst = worst.max(per_seed(seed)?);
    }
    Ok(worst)
}

fn grad_conv() -> Result<f64> {
    worst_over_seeds(|seed| {
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true);
        conv.weight = rand_tensor(&[3, 2, 3, 3], seed + 1).trainable();
        conv.bias = Some(rand_tensor(&[3], seed + 2).trainable());
        let x = rand_tensor(&[2, 2, 5, 5], seed);
        let target = rand_tensor(&[2, 3, 3, 3], seed + 3);
        let run = |g: &mut Graph<f64>, xv: Var, bind: Option<(&Tensor<f64>, Var)>| {
            let mut pass = Pass::train(g, 0);
            if let Some((t, v)) = bind {
                pass.bind(t, v);
            }
            let y = conv.forward(&mut pass, xv)?;
            project(pass.graph, y, &target)
        };
        let mut e = finite_diff_check(|g, v| run(g, v, None), &x, EPS)?;
        for t in [&conv.weight, conv.bias.as_ref().unwrap()] {
            e = e.max(finite_diff_check(
                |g, v| {
                    let xv = g.constant(&x);
                    run(g, xv, Some((t, v)))
                },
                t,
                EPS,
            )?);
        }
        Ok(e)
    })
}

fn grad_batchnorm() -> Result<f64> {
    worst_over_seeds(|seed| {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = rand_tensor(&[2], seed + 1).trainable();
        bn.beta = rand_tensor(&[2], seed + 2).trainable();
        let x = rand_tensor(&[3, 2, 3, 3], seed);
        let target = rand_tensor(&[3, 2, 3, 3], seed + 3);
        let mut e = 0.0f64;
        for mode in [Mode::Train, Mode::Eval] {
            let run = |g: &mut Graph<f64>, xv: Var, bind: Option<(&Tensor<f64>, Var)>| {
                let mut pass = Pass::new(g, mode, 0);
                if let Some((t, v)) = bind {
                    pass.bind(t, v);
                }
                let y = bn.forward(&mut pass, xv)?;
                // a nonlinear read-out so the batch statistics matter
                let t = pass.graph.constant(&target);
                let p = pass.graph.mul(y, t)?;
                let ex = pass.graph.exp(p)?;
                pass.graph.sum_all(ex)
            };
            e = e.max(finite_diff_check(|g, v| run(g, v, None), &x, EPS)?);
            for t in [&bn.gamma, &bn.beta] {
                e = e.max(finite_diff_check(
                    |g, v| {
                        let xv = g.constant(&x);
                        run(g, xv, Some((t, v)))
                    },
                    t,
                    EPS,
                )?);
            }
        }
        Ok(e)
    })
}

fn grad_pooling() -> Result<f64> {
    worst_over_seeds(|seed| {
        let x = rand_tensor(&[2, 2, 5, 5], seed);
        let max = finite_diff_check(
            |g, v| {
                let p = max_pool(g, v, 3, 2, 1)?;
                let sq = g.mul(p, p)?;
                g.sum_all(sq)
            },
            &x,
            1e-6,
        )?;
        let target = rand_tensor(&[2, 2], seed + 1);
        let avg = finite_diff_check(
            |g, v| {
                let p = global_avg_pool(g, v)?;
                project(g, p, &target)
            },
            &x,
            EPS,
        )?;
        Ok(max.max(avg))
    })
}

fn grad_linear() -> Result<f64> {
    worst_over_seeds(|seed| {
        let mut lin = Linear::<f64>::zeros(4, 3);
        lin.init_uniform(&mut ChaCha8Rng::seed_from_u64(seed));
        lin.bias = rand_tensor(&[3], seed + 1).trainable();
        let x = rand_tensor(&[5, 4], seed + 2);
        let target = rand_tensor(&[5, 3], seed + 3);
        let run = |g: &mut Graph<f64>, xv: Var, bind: Option<(&Tensor<f64>, Var)>| {
            let mut pass = Pass::train(g, 0);
            if let Some((t, v)) = bind {
                pass.bind(t, v);
            }
            let y = lin.forward(&mut pass, xv)?;
            let sq = pass.graph.mul(y, y)?;
            project(pass.graph, sq, &target)
        };
        let mut e = finite_diff_check(|g, v| run(g, v, None), &x, EPS)?;
        for t in [&lin.weight, &lin.bias] {
            e = e.max(finite_diff_check(
                |g, v| {
                    let xv = g.constant(&x);
                    run(g, xv, Some((t, v)))
                },
                t,
                EPS,
            )?);
        }
        Ok(e)
    })
}

fn grad_residual() -> Result<f64> {
    worst_over_seeds(|seed| {
        let mut block = ResidualBlock::<f64>::new(2, 3, 2);
        block.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let x = rand_tensor(&[2, 2, 5, 5], seed + 10);
        let target = rand_tensor(&[2, 3, 3, 3], seed + 20);
        let run = |g: &mut Graph<f64>, xv: Var, bind: Option<(&Tensor<f64>, Var)>| {
            let mut pass = Pass::train(g, 0);
            if let Some((t, v)) = bind {
                pass.bind(t, v);
            }
            let y = block.forward(&mut pass, xv)?;
            project(pass.graph, y, &target)
        };
        let mut e = finite_diff_check(|g, v| run(g, v, None), &x, EPS)?;
        for t in [&block.conv1.weight, &block.conv2.weight] {
            e = e.max(finite_diff_check(
                |g, v| {
                    let xv = g.constant(&x);
                    run(g, xv, Some((t, v)))
                },
                t,
                EPS,
            )?);
        }
        Ok(e)
    })
}

fn grad_cbam() -> Result<f64> {
    worst_over_seeds(|seed| {
        let mut cbam = Cbam::<f64>::new(8, 4, 7)?;
        cbam.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let x = rand_tensor(&[1, 8, 4, 4], seed + 100);
        let target = rand_tensor(&[1, 8, 4, 4], seed + 200);
        let run = |g: &mut Graph<f64>, xv: Var, bind: Option<(&Tensor<f64>, Var)>| {
            let mut pass = Pass::train(g, 0);
            if let Some((t, v)) = bind {
                pass.bind(t, v);
            }
            let y = cbam.forward(&mut pass, xv)?;
            project(pass.graph, y, &target)
        };
        let mut e = finite_diff_check(|g, v| run(g, v, None), &x, EPS)?;
        for t in [&cbam.channel.w1, &cbam.channel.w2, &cbam.spatial.conv.weight] {
            e = e.max(finite_diff_check(
                |g, v| {
                    let xv = g.constant(&x);
                    run(g, xv, Some((t, v)))
                },
                t,
                EPS,
            )?);
        }
        Ok(e)
    })
}

fn grad_losses() -> Result<[f64; 3]> {
    let mut worst = [0.0f64; 3];
    for seed in 0..10u64 {
        let logits = rand_tensor(&[6, 2], seed);
        let targets = [1, 0, 0, 1, 0, 0];
        worst[0] = worst[0].max(finite_diff_check(|g, v| cross_entropy(g, v, &targets), &logits, EPS)?);
        worst[1] = worst[1].max(finite_diff_check(|g, v| weighted_ce(g, v, &targets, &[0.6, 3.4]), &logits, EPS)?);
        worst[2] = worst[2].max(finite_diff_check(|g, v| focal_loss(g, v, &targets, 0.75, 2.0), &logits, EPS)?);
    }
    Ok(worst)
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let run = || -> Result<Vec<(&'static str, f64)>> {
        let losses = grad_losses()?;
        Ok(vec![
            ("conv", grad_conv()?),
            ("batchnorm", grad_batchnorm()?),
            ("pooling", grad_pooling()?),
            ("linear", grad_linear()?),
            ("residual", grad_residual()?),
            ("cbam", grad_cbam()?),
            ("ce", losses[0]),
            ("weighted-ce", losses[1]),
            ("focal", losses[2]),
        ])
    };
    let errs = run().map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let failing: Vec<_> = errs.iter().filter(|e| !(e.1 < GRAD_TOL)).map(|e| e.0).collect();
    ensure(
        failing.is_empty() && secs < 60.0,
        format!("{} checks x 10 seeds, worst rel err {worst:.2e}, {secs:.1}s, failing {failing:?}", errs.len()),
    )
}

// ---------------------------------------------------------------- 3

fn focal_identities() -> Check {
    let scalar = |f: &dyn Fn(&mut Graph<f64>, Var) -> Result<Var>, logits: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(logits);
        let l = f(&mut g, x)?;
        Ok(g.value(l)[0])
    };
    let mut gap = 0.0f64;
    for seed in 0..10 {
        let logits = rand_tensor(&[8, 2], seed);
        let targets = [1, 0, 0, 0, 1, 0, 0, 0];
        let fl = scalar(&|g, x| focal_loss(g, x, &targets, 0.5, 0.0), &logits).map_err(|e| e.to_string())?;
        let ce = scalar(&|g, x| cross_entropy(g, x, &targets), &logits).map_err(|e| e.to_string())?;
        gap = gap.max((fl - 0.5 * ce).abs());
    }
    // logits (0, ln 9) put 0.9 on the crack class
    let logits = Tensor::new(&[1, 2], vec![0.0, 9f64.ln()]).unwrap();
    let worked = scalar(&|g, x| focal_loss(g, x, &[CRACK], 0.75, 2.0), &logits).map_err(|e| e.to_string())?;
    let oracle = -0.75 * 0.1f64.powi(2) * 0.9f64.ln();
    ensure(
        gap <= 1e-12 && (worked - 7.902e-4).abs() <= 1e-7 && (worked - oracle).abs() < 1e-15,
        format!("|FL(γ=0, α=0.5) − CE/2| ≤ {gap:.1e}, FL(p=0.9; 0.75, 2) = {worked:.4e}"),
    )
}

// ---------------------------------------------------------------- 4

fn four(v: Option<f64>) -> String {
    format!("{:.4}", v.unwrap_or(f64::NAN))
}

fn table_reconstruction() -> Check {
    let rows = [
        ("final", ConfusionMatrix::new(207, 41, 97, 1698), ["0.9325", "0.8347", "0.6809", "0.7500"]),
        ("baseline", ConfusionMatrix::new(195, 39, 109, 1700), ["0.9276", "0.8333", "0.6414", "0.7249"]),
    ];
    let mut notes = Vec::new();
    for (name, cm, expect) in rows {
        let m = cm.metrics();
        let got = [four(m.accuracy), four(m.precision), four(m.recall), four(m.f1)];
        if got != expect {
            return Err(format!("{name}: {got:?} != {expect:?}"));
        }
        let candidates = reconstruct_confusion(expect[1].parse().unwrap(), expect[2].parse().unwrap(), 304, 1739, 4);
        if !candidates.contains(&cm) {
            return Err(format!("{name}: {cm:?} not among {} reconstructions", candidates.len()));
        }
        notes.push(format!("{name} {}/{}/{}/{}", cm.tp, cm.fp, cm.fn_, cm.tn));
    }
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------- 5

fn paired_statistics() -> Check {
    let treated = [0.71, 0.69, 0.74, 0.70, 0.72];
    let base = [0.70, 0.67, 0.71, 0.66, 0.67];
    let w = wilcoxon_signed_rank_exact(&treated, &base).map_err(|e| e.to_string())?;
    let t = paired_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).map_err(|e| e.to_string())?;
    ensure(
        w.p == 0.0625 && (t.t - 4.2426).abs() <= 1e-3 && (t.p - 0.0132).abs() <= 1e-3,
        format!("wilcoxon p = {}, t = {:.4}, p = {:.4}", w.p, t.t, t.p),
    )
}

// ---------------------------------------------------------------- 6

struct Desk {
    samples: Vec<SyntheticSample>,
    test_ids: Vec<usize>,
    /// Best RA+FL model of seed 0.
    model: Option<Model<f32>>,
}

fn desk_config(seed: u64, robust: bool) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs: 15,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    };
    if !robust {
        cfg.augmentation = None;
        cfg.loss = LossConfig::ce();
    }
    cfg
}

fn desk_training(desk: &mut Desk) -> Check {
    let norm = Normalization::default();
    let arch = ArchConfig::preset("tiny").map_err(|e| e.to_string())?;
    let start = Instant::now();
    let samples = generate_synthetic(&SyntheticSpec::default(), 2000, 42).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let split = stratified_split(&labels, &Fractions::default(), 42).map_err(|e| e.to_string())?;
    let source = MemorySource::new(samples.iter().map(|s| s.image.clone()).collect(), labels.clone()).map_err(|e| e.to_string())?;
    let (tr, va, te) = (
        Subset::new(&source, split.train.clone()),
        Subset::new(&source, split.val.clone()),
        Subset::new(&source, split.test.clone()),
    );
    let degraded = Degraded::new(&te, DegradationSpec::default(), 9001).map_err(|e| e.to_string())?;
    let run = |seed: u64, robust: bool| -> Result<(Model<f32>, f64, f64)> {
        let out = train(&arch, &desk_config(seed, robust), &tr, &va, &norm, None)?;
        let clean = evaluate(&out.best, &te, 64, &norm)?;
        let deg = evaluate(&out.best, &degraded, 64, &norm)?;
        Ok((out.best, clean.metrics.f1_or_zero(), deg.metrics.recall_or_zero()))
    };

    let (model, f1, first_recall) = run(0, true).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let crack = labels.iter().filter(|&&l| l == CRACK).count();
    say!("      desk run: {crack} crack / {} images, test F1 {f1:.4} in {secs:.1}s", samples.len());

    let mut robust = vec![first_recall];
    let mut plain = Vec::new();
    for seed in 0..3 {
        if seed > 0 {
            robust.push(run(seed, true).map_err(|e| e.to_string())?.2);
        }
        plain.push(run(seed, false).map_err(|e| e.to_string())?.2);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let gain = mean(&robust) - mean(&plain);
    say!("      degraded recall RA+FL {robust:.4?} vs CE {plain:.4?}");

    desk.test_ids = split.test.clone();
    desk.samples = samples;
    desk.model = Some(model);
    ensure(
        f1 >= 0.90 && secs < 300.0 && gain >= 0.02,
        format!("F1 {f1:.4} in {secs:.1}s; degraded recall gain {:+.2} points", 100.0 * gain),
    )
}

// ---------------------------------------------------------------- 7

fn determinism(dir: &Path) -> Check {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = dir.join("det-data");
    let scene = ImageBuffer::from_fn(160, 192, |y, x, _| 0.4 + 0.2 * (((x / 16 + y / 16) % 2) as f32)).unwrap();
    scene.save_png(&dir.join("scene.png")).map_err(|e| e.to_string())?;
    run_bin(&["-q", "synth", "--n", "240", "--out", &s(&data)])?;
    let mut runs = Vec::new();
    for workers in ["1", "2"] {
        let out = dir.join(format!("det-w{workers}"));
        run_bin(&[
            "-q", "--workers", workers, "train", "--preset", "tiny", "--data", &s(&data), "--out", &s(&out),
            "--seed", "5", "--set", "train.epochs=2", "--set", "train.warmup_epochs=1",
        ])?;
        run_bin(&[
            "-q", "--workers", workers, "infer", "--checkpoint", &s(&out.join("best.ckpt")), "--patch", "64", "--stride", "32",
            "--threshold", "0.3", "--out", &s(&out.join("infer")), &s(&dir.join("scene.png")),
        ])?;
        runs.push(out);
    }
    let mut compared = 0;
    for name in ["history.jsonl", "summary.json", "split.json", "best.ckpt", "last.ckpt"] {
        let a = std::fs::read(runs[0].join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = std::fs::read(runs[1].join(name)).map_err(|e| format!("{name}: {e}"))?;
        if a != b {
            return Err(format!("{name} differs across worker counts"));
        }
        compared += 1;
    }
    // the checkpoint path and wall time in the header legitimately differ
    let body = |p: &Path| -> std::result::Result<Vec<String>, String> {
        let text = std::fs::read_to_string(p.join("infer/report.jsonl")).map_err(|e| e.to_string())?;
        Ok(text.lines().skip(1).map(str::to_string).collect())
    };
    let (a, b) = (body(&runs[0])?, body(&runs[1])?);
    ensure(a == b, format!("{compared} training artifacts and a {}-candidate report byte-identical across --workers 1/2", a.len()))
}

// ---------------------------------------------------------------- 8

fn augmentation_rates() -> Check {
    const N: usize = 10_000;
    let spec = DegradationSpec::default();
    let img = ImageBuffer::from_fn(16, 16, |y, x, c| ((y * 16 + x) * 3 + c) as f32 / 768.0).unwrap();
    let mut hits = vec![0usize; spec.entries.len()];
    for i in 0..N {
        let out = apply_pipeline(&img, &spec, 77, i as u64).map_err(|e| e.to_string())?;
        for (k, e) in spec.entries.iter().enumerate() {
            hits[k] += out.applied.contains(&e.kind) as usize;
        }
    }
    let mut outside = Vec::new();
    let mut rates = Vec::new();
    for (e, &h) in spec.entries.iter().zip(&hits) {
        let p = e.probability;
        let half = 2.576 * (p * (1.0 - p) / N as f64).sqrt();
        let rate = h as f64 / N as f64;
        rates.push(format!("{} {rate:.4}", e.kind.name()));
        if (rate - p).abs() > half {
            outside.push(format!("{} {rate:.4} outside {p}±{half:.4}", e.kind.name()));
        }
    }
    let disabled = DegradationSpec::disabled();
    let mut identity = true;
    for i in 0..200 {
        let out = apply_pipeline(&img, &disabled, 77, i).map_err(|e| e.to_string())?;
        identity &= out.applied.is_empty() && out.image.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    ensure(
        outside.is_empty() && identity,
        if outside.is_empty() {
            format!("{}; disabled spec bitwise identity: {identity}", rates.join(", "))
        } else {
            outside.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 9

fn tiling() -> Check {
    let grid = plan_tiles(500, 500, 224, 224).map_err(|e| e.to_string())?;
    let starts = [0, 224, 276];
    let expect: Vec<(usize, usize)> = starts.iter().flat_map(|&y| starts.iter().map(move |&x| (x, y))).collect();
    if grid.tiles != expect {
        return Err(format!("500x500 plan {:?}", grid.tiles));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..1000 {
        let patch = rng.random_range(1..=64usize);
        let (w, h) = (rng.random_range(patch..=patch * 5), rng.random_range(patch..=patch * 5));
        let stride = rng.random_range(1..=patch);
        let grid = plan_tiles(w, h, patch, stride).map_err(|e| e.to_string())?;
        let mut covered = vec![false; w * h];
        for &(x, y) in &grid.tiles {
            if x + patch > w || y + patch > h || (x % stride != 0 && x != w - patch) || (y % stride != 0 && y != h - patch) {
                return Err(format!("case {case}: tile ({x},{y}) of {w}x{h}/{patch}/{stride}"));
            }
            for yy in y..y + patch {
                covered[yy * w + x..yy * w + x + patch].iter_mut().for_each(|c| *c = true);
            }
        }
        // the tile index is recoverable from its corner
        let unique: std::collections::BTreeSet<_> = grid.tiles.iter().collect();
        if !covered.iter().all(|&c| c) || unique.len() != grid.tiles.len() {
            return Err(format!("case {case}: {w}x{h}/{patch}/{stride} not covered exactly once per corner"));
        }
    }
    Ok("500x500/224/224 -> {0,224,276}^2; 1000 random plans cover every pixel".into())
}

// ---------------------------------------------------------------- 10

fn grad_cam_checks(desk: &Desk, dir: &Path) -> Check {
    let norm = Normalization::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (k, name) in ["tiny", "tiny-cbam"].iter().enumerate() {
        let model = Model::new(&ArchConfig::preset(name).unwrap(), k as u64).map_err(|e| e.to_string())?;
        let images: Vec<ImageBuffer> = (0..6)
            .map(|_| {
                let (h, w) = (rng.random_range(20..100), rng.random_range(20..100));
                let mut r = ChaCha8Rng::seed_from_u64(rng.random());
                ImageBuffer::from_fn(h, w, |_, _, _| r.random()).unwrap()
            })
            .collect();
        for target in [0, 1] {
            for cam in grad_cam_images(&model, &images, &norm, target).map_err(|e| e.to_string())? {
                let hw = model.config.input_hw;
                let peak = cam.upsampled.iter().copied().fold(0.0f32, f32::max);
                let ok = cam.height == hw
                    && cam.width == hw
                    && cam.upsampled.len() == hw * hw
                    && cam.heatmap.iter().chain(&cam.upsampled).all(|&v| v >= 0.0 && v.is_finite())
                    && (if cam.is_zero { peak == 0.0 } else { (peak - 1.0).abs() < 1e-6 });
                if !ok {
                    return Err(format!("{name}: invariant violated for target {target}"));
                }
            }
        }
    }

    let model = desk.model.as_ref().ok_or("no desk-trained checkpoint")?;
    let path = dir.join("desk.ckpt");
    save_checkpoint(&path, model, 0, 0, None).map_err(|e| e.to_string())?;
    let (model, _) = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let cracks: Vec<&SyntheticSample> = desk.test_ids.iter().map(|&i| &desk.samples[i]).filter(|s| s.label == CRACK).collect();
    let images: Vec<ImageBuffer> = cracks.iter().map(|s| s.image.clone()).collect();
    let cams = grad_cam_images(&model, &images, &norm, CRACK).map_err(|e| e.to_string())?;
    let (mut hot, mut total) = (0, 0);
    for (cam, s) in cams.iter().zip(&cracks) {
        let hw = (s.image.height(), s.image.width());
        if let Some(c) = concentration(cam, &s.mask, hw).map_err(|e| e.to_string())? {
            total += 1;
            hot += c.is_concentrated() as usize;
        }
    }
    let share = hot as f64 / total.max(1) as f64;
    ensure(
        total > 0 && share >= 0.80,
        format!("invariants hold on random inputs; crack heat above background on {hot}/{total} ({:.1}%)", 100.0 * share),
    )
}

// ---------------------------------------------------------------- 11

fn checkpoint_round_trip(dir: &Path) -> Check {
    let model = Model::<f32>::new(&ArchConfig::preset("tiny-cbam").unwrap(), 11).map_err(|e| e.to_string())?;
    let path = dir.join("rt.ckpt");
    save_checkpoint(&path, &model, 3, 11, None).map_err(|e| e.to_string())?;
    let (back, meta) = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let x = Tensor::from_fn(&model.input_shape(2), |i| ((i * 31) % 97) as f32 / 48.0 - 1.0);
    let (a, b) = (model.predict_logits(&x).map_err(|e| e.to_string())?, back.predict_logits(&x).map_err(|e| e.to_string())?);
    let bitwise = a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()) && meta.epoch == 3;

    let bytes = encode_checkpoint(&model, 3, 11, None).map_err(|e| e.to_string())?;
    let mut corrupt = vec![bytes[..bytes.len() - 5].to_vec(), bytes[..12].to_vec(), Vec::new()];
    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    corrupt.push(magic);
    let mut header = bytes.clone();
    header[20] = b'#';
    corrupt.push(header);
    let mut extra = bytes.clone();
    extra.push(0);
    corrupt.push(extra);
    let rejected = corrupt.iter().filter(|c| decode_checkpoint(c).is_err()).count();
    ensure(
        bitwise && rejected == corrupt.len(),
        format!("forward bitwise identical: {bitwise}; {rejected}/{} corrupted files rejected", corrupt.len()),
    )
}

// ----------------------------------------------------------------

fn panorama_note() {
    // a large scene screened with the default patch, for information only
    let scene = ImageBuffer::from_fn(500, 500, |y, x, _| 0.5 + 0.1 * (((x / 25 + y / 25) % 2) as f32)).unwrap();
    let model = Model::<f32>::new(&ArchConfig::preset("tiny").unwrap(), 0).unwrap();
    let grid = plan_tiles(500, 500, 224, 224).unwrap();
    let t = Instant::now();
    let regions = crackscreen::inspect::classify_tiles(&model, "scene", &scene, &grid, 32, 0.5, &Normalization::default());
    say!(
        "INFO panorama: {} tiles screened in {:.0} ms ({} candidates)",
        grid.tiles.len(),
        t.elapsed().as_secs_f64() * 1000.0,
        regions.map(|r| r.len()).unwrap_or(0)
    );
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let mut desk = Desk {
        samples: Vec::new(),
        test_ids: Vec::new(),
        model: None,
    };
    // the timed training criterion runs before anything else competes for the CPU
    let mut results: Vec<(usize, Check)> = vec![(6, desk_training(&mut desk))];
    panorama_note();
    results.push((1, parameter_and_mac_counts(dir)));
    results.push((2, gradient_suite()));
    results.push((3, focal_identities()));
    results.push((4, table_reconstruction()));
    results.push((5, paired_statistics()));
    results.push((7, determinism(dir)));
    results.push((8, augmentation_rates()));
    results.push((9, tiling()));
    results.push((10, grad_cam_checks(&desk, dir)));
    results.push((11, checkpoint_round_trip(dir)));
    results.sort_by_key(|r| r.0);

    let mut failed = Vec::new();
    for (n, r) in &results {
        match r {
            Ok(d) => say!("PASS criterion {n:>2}: {d}"),
            Err(d) => {
                say!("FAIL criterion {n:>2}: {d}");
                failed.push(*n);
            }
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
