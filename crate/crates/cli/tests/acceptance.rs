//! Acceptance suite. Runs every primary criterion and prints one PASS/FAIL
//! line per criterion; exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yldcvt::data::*;
use yldcvt::model::*;
use yldcvt::tensor::{conv_output_extent, grad_check, Conv2dSpec, GradCheckOptions};
use yldcvt::train::*;
use yldcvt::{Graph, Tensor, Var};

const BIN: &str = env!("CARGO_BIN_EXE_yldcvt");

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn yldcvt(args: &[&str], dir: &Path) -> Result<(i32, String), String> {
    let out = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| format!("spawning yldcvt: {e}"))?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let code = out.status.code().unwrap_or(-1);
    if code != 0 && code != 1 {
        return Err(format!(
            "yldcvt {} exited with {code}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok((code, stdout))
}

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Gradient correctness

fn full_model_gradcheck() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (code, out) = yldcvt(&["gradcheck", "--model", "tiny", "--seed", "0"], dir.path())?;
    let elapsed = start.elapsed();
    let max = out
        .lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .and_then(|l| l.split_whitespace().next())
        .and_then(|v| v.parse::<f64>().ok())
        .ok_or_else(|| format!("no error summary in output:\n{out}"))?;
    ensure(code == 0, || format!("exit {code}, max relative error {max:e}\n{out}"))?;
    ensure(max < 1e-4, || format!("max relative error {max:e}"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!("max relative error {max:.2e}, {:.0} s", elapsed.as_secs_f64()))
}

/// Contracts an op's output with fixed random weights.
fn project(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> yldcvt::Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpCase = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> yldcvt::Result<Var> + Sync>;

/// One randomized instance of an op family: inputs plus the scalar function.
fn op_case(op: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, OpCase) {
    let mut vals = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut r = |lo: usize, hi: usize| rng.gen_range(lo..hi);
    match op {
        "matmul" => {
            let (b, m, k, n) = (r(1, 3), r(1, 5), r(1, 5), r(1, 5));
            let w = tensor(&mut vals, vec![b, m, n]);
            let inputs = vec![tensor(&mut vals, vec![b, m, k]), tensor(&mut vals, vec![k, n])];
            (inputs, Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, &w)
            }))
        }
        "linear" => {
            let (n, din, dout) = (r(1, 4), r(1, 6), r(1, 6));
            let w = tensor(&mut vals, vec![n, dout]);
            let inputs = vec![tensor(&mut vals, vec![n, din]), tensor(&mut vals, vec![din, dout]), tensor(&mut vals, vec![dout])];
            (inputs, Box::new(move |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y, &w)
            }))
        }
        "conv2d" => loop {
            let (n, groups, cg, og) = (r(1, 3), r(1, 3), r(1, 3), r(1, 3));
            let (h, wd, k, stride, pad) = (r(3, 7), r(3, 7), r(1, 4), r(1, 3), r(0, 2));
            let (Some(ho), Some(wo)) = (conv_output_extent(h, k, stride, pad), conv_output_extent(wd, k, stride, pad)) else {
                continue;
            };
            let w = tensor(&mut vals, vec![n, groups * og, ho, wo]);
            let inputs = vec![
                tensor(&mut vals, vec![n, groups * cg, h, wd]),
                tensor(&mut vals, vec![groups * og, cg, k, k]),
                tensor(&mut vals, vec![groups * og]),
            ];
            let spec = Conv2dSpec::new(stride, pad, groups);
            break (inputs, Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
                project(g, y, &w)
            }));
        },
        "layer_norm" | "batch_norm" => {
            // Normalizing over two entries maps them to ±gamma whatever the input,
            // leaving input gradients of order eps that differences cannot resolve.
            let (rows, d) = (r(3, 6), r(3, 7));
            let w = tensor(&mut vals, vec![rows, d]);
            let inputs = vec![tensor(&mut vals, vec![rows, d]), tensor(&mut vals, vec![d]), tensor(&mut vals, vec![d])];
            let layer = op == "layer_norm";
            (inputs, Box::new(move |g, v| {
                let y = if layer {
                    g.layer_norm(v[0], v[1], Some(v[2]), 1e-5)?
                } else {
                    g.batch_norm(v[0], v[1], Some(v[2]), 1e-5)?
                };
                project(g, y, &w)
            }))
        }
        "softmax" => {
            let (rows, d) = (r(1, 5), r(1, 8));
            let w = tensor(&mut vals, vec![rows, d]);
            (vec![tensor(&mut vals, vec![rows, d])], Box::new(move |g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, &w)
            }))
        }
        "gelu" => {
            let n = r(1, 16);
            let w = tensor(&mut vals, vec![n]);
            let mut x = tensor(&mut vals, vec![n]);
            x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
            (vec![x], Box::new(move |g, v| {
                let y = g.gelu(v[0])?;
                project(g, y, &w)
            }))
        }
        "elementwise" => {
            let (a, b) = (r(1, 4), r(1, 5));
            let w = tensor(&mut vals, vec![a, b]);
            let inputs = vec![tensor(&mut vals, vec![a, b]), tensor(&mut vals, vec![a, b]), tensor(&mut vals, vec![b])];
            (inputs, Box::new(move |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(s, v[1])?;
                let m = g.mul(d, v[1])?;
                let c = g.scale(m, -1.3)?;
                let y = g.add_bias(c, v[2])?;
                project(g, y, &w)
            }))
        }
        "layout" => {
            let (a, b, c) = (r(1, 4), r(1, 4), r(1, 4));
            let w = tensor(&mut vals, vec![a, b, c]);
            let inputs = vec![tensor(&mut vals, vec![a, b, c]), tensor(&mut vals, vec![a, 1, c]), tensor(&mut vals, vec![1, b, c])];
            (inputs, Box::new(move |g, v| {
                let p = g.permute(v[0], &[2, 0, 1])?;
                let flat = g.reshape(p, vec![c, a * b])?;
                let back = g.reshape(flat, vec![c, a, b])?;
                let q = g.permute(back, &[1, 2, 0])?;
                let cat = g.concat(&[v[1], q], 1)?;
                let mid = g.narrow(cat, 1, 1, b)?;
                let bc = g.broadcast_batch(v[2], a)?;
                let y = g.mul(mid, bc)?;
                project(g, y, &w)
            }))
        }
        "reduction_and_loss" => {
            let n = r(1, 8);
            let inputs = vec![tensor(&mut vals, vec![n, 1]), tensor(&mut vals, vec![n, 1])];
            (inputs, Box::new(|g, v| {
                let l = g.mse_loss(v[0], v[1])?;
                let m = g.mean(v[0])?;
                let s = g.add(l, m)?;
                let sq = g.mul(s, s)?;
                g.sum(sq)
            }))
        }
        _ => unreachable!("unknown op family {op}"),
    }
}

fn per_op_gradients() -> Check {
    const OPS: [&str; 10] = [
        "matmul", "linear", "conv2d", "layer_norm", "batch_norm", "softmax", "gelu", "elementwise", "layout",
        "reduction_and_loss",
    ];
    const SHAPES: usize = 24;
    let opts = GradCheckOptions {
        eps: 1e-6,
        tolerance: 1e-4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for op in OPS {
        for case in 0..SHAPES {
            let (inputs, f) = op_case(op, &mut rng);
            let rep = grad_check(f, &inputs, &opts).map_err(|e| format!("{op} case {case}: {e}"))?;
            ensure(rep.passed(), || format!("{op} case {case}: relative error {:e}", rep.max_relative_error))?;
            worst = worst.max(rep.max_relative_error);
        }
    }
    Ok(format!("{} op families x {SHAPES} shapes, max relative error {worst:.2e}", OPS.len()))
}

// ---------------------------------------------------------------------------
// Architecture

fn key_tokens(preset: ModelPreset, width: usize) -> (usize, usize) {
    let mut cfg = ModelConfig::preset(preset, 34);
    cfg.input_width = width;
    let store = init_params::<f64>(&cfg, 0).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let mut layers = Layers::new(&cfg, &store, &p, Mode::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(width as u64);
    let x = g.constant(tensor(&mut rng, vec![1, cfg.input_channels, cfg.input_height, width]));
    let t = layers.conv_token_embedding(&mut g, x, 0, &cfg.stages[0]).unwrap();
    let k = layers.conv_projection(&mut g, t, "stage1.block0", ProjectionRole::Key, 2).unwrap();
    let v = layers.conv_projection(&mut g, t, "stage1.block0", ProjectionRole::Value, 2).unwrap();
    assert_eq!(g.shape(k), g.shape(v));
    (t.len(), g.shape(k)[1])
}

fn factor_four() -> Check {
    let mut seen = Vec::new();
    for preset in [ModelPreset::Cvt13, ModelPreset::Tiny] {
        // 34 intervals, and the 19-interval in-year grid zero-padded to 24.
        for width in [34, 24] {
            let (l, lk) = key_tokens(preset, width);
            ensure(l % 4 == 0 && lk * 4 == l, || format!("{preset} width {width}: {l} tokens -> {lk} keys"))?;
            seen.push(format!("{l}->{lk}"));
        }
    }
    Ok(format!("stage-1 key/value tokens {}", seen.join(", ")))
}

fn stage_maps(width: usize) -> (Vec<(usize, usize, bool)>, Vec<usize>) {
    let cfg = ModelConfig::preset(ModelPreset::Cvt13, width);
    let store = init_params::<f64>(&cfg, 1).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = g.constant(tensor(&mut rng, vec![1, 11, 32, width]));
    let out = forward(&mut g, x, &cfg, &store, &p, Mode::Eval).unwrap();
    let maps = out.stages.iter().map(|s| (s.height, s.width, s.has_cls)).collect();
    (maps, g.shape(out.prediction).to_vec())
}

fn shape_contract() -> Check {
    let (maps, out) = stage_maps(34);
    let want = vec![(8, 8, false), (4, 4, false), (2, 2, true)];
    ensure(maps == want && out == [1, 1], || format!("1x11x32x34 gave {maps:?} -> {out:?}"))?;
    let (maps, out) = stage_maps(19);
    ensure(maps[0].0 == 8 && maps[0].1 == 5 && out == [1, 1], || format!("1x11x32x19 gave {maps:?} -> {out:?}"))?;
    Ok("CvT-13: 8x8 -> 4x4 -> 2x2+cls -> [1,1]; in-year stage 1 8x5".into())
}

// ---------------------------------------------------------------------------
// Training

fn learnability() -> Check {
    const TEST_YEAR: i32 = 2012;
    let start = Instant::now();
    let model = ModelConfig::preset(ModelPreset::Tiny, FULL_SEASON_INTERVALS);
    let mut lines = Vec::new();
    for seed in [1u64, 2, 3] {
        let params = GeneratorParams::default();
        let ds = generate_synthetic(2000, seed, &params).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            runs: 1,
            seed,
            ..TrainConfig::for_preset(ModelPreset::Tiny)
        };
        ensure(cfg.learning_rate == 0.00025 && cfg.val_fraction == 0.10, || "unexpected protocol defaults".into())?;
        let rep = run_experiment("tiny", &model, &cfg, &ds, &[TEST_YEAR], |_| Ok(())).map_err(|e| e.to_string())?;
        let y = &rep.years[0];
        lines.push(format!("seed {seed}: R² {:.3} vs {:.3}, RMSE {:.2} vs {:.2}", y.r2, y.baseline_r2, y.rmse, y.baseline_rmse));
        ensure(y.r2 >= 0.5 && y.r2 > y.baseline_r2 && y.rmse < y.baseline_rmse, || lines.join("; "))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(15 * 60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} ({:.0} s)", lines.join("; "), elapsed.as_secs_f64()))
}

fn overfit() -> Check {
    let ds = generate_synthetic(16, 5, &GeneratorParams::default()).map_err(|e| e.to_string())?;
    let model = ModelConfig::preset(ModelPreset::Tiny, FULL_SEASON_INTERVALS);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 4,
        ..TrainConfig::for_preset(ModelPreset::Tiny)
    };
    let out = train(&model, &cfg, &ds, &ds, 1).map_err(|e| e.to_string())?;
    let last = evaluate(&out.last, &model, &ds, &out.scaler).map_err(|e| e.to_string())?;
    let ratio = last.mse / out.history.initial_train_mse;
    ensure(ratio < 0.01, || format!("train MSE {} -> {} ({ratio:.4})", out.history.initial_train_mse, last.mse))?;
    Ok(format!("train MSE {:.2} -> {:.2e} after 200 epochs", out.history.initial_train_mse, last.mse))
}

fn brute_force(p: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let mut ybar = 0.0;
    for v in y.iter().rev() {
        ybar += v / n;
    }
    let (mut res, mut tot) = (0.0, 0.0);
    for i in (0..y.len()).rev() {
        res += (y[i] - p[i]) * (y[i] - p[i]);
        tot += (y[i] - ybar) * (y[i] - ybar);
    }
    (res / n, (res / n).sqrt(), 1.0 - res / tot)
}

fn metric_oracle() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * b.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let n = rng.gen_range(2..400);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..90.0)).collect();
        let p: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-20.0..20.0)).collect();
        let m = Metrics::from_predictions(&p, &y).map_err(|e| e.to_string())?;
        let (mse, rmse, r2) = brute_force(&p, &y);
        ensure(close(m.mse, mse) && close(m.rmse, rmse) && close(m.r2, r2), || format!("case {case}: {m:?} vs {mse} {rmse} {r2}"))?;
    }
    // `evaluate` goes through the model; compare with its own predictions.
    let ds = generate_synthetic(40, 4, &GeneratorParams::default()).map_err(|e| e.to_string())?;
    let model = ModelConfig::preset(ModelPreset::Tiny, FULL_SEASON_INTERVALS);
    let params = init_params::<f64>(&model, 4).map_err(|e| e.to_string())?;
    let scaler = TargetScaler::fit(&ds.targets()).map_err(|e| e.to_string())?;
    let m = evaluate(&params, &model, &ds, &scaler).map_err(|e| e.to_string())?;
    let preds = predict_dataset(&params, &model, &ds, &scaler).map_err(|e| e.to_string())?;
    let (mse, rmse, r2) = brute_force(&preds, &ds.targets());
    ensure(close(m.mse, mse) && close(m.rmse, rmse) && close(m.r2, r2), || format!("evaluate {m:?} vs {mse} {rmse} {r2}"))?;
    let hand = Metrics::from_predictions(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    ensure(hand.mse == 1.0 / 3.0 && hand.r2 == 0.5, || format!("hand example gave {hand:?}"))?;
    Ok("100 random sets and evaluate() within 1e-10; hand example exact".into())
}

fn protocol_fidelity() -> Check {
    let ds = generate_synthetic(2000, 11, &GeneratorParams::default()).map_err(|e| e.to_string())?;
    let years = ds.years();
    let key = |s: &HistogramSample| (s.county_id, s.year);
    let mut splits = 0;
    for &year in &years[1..] {
        for seed in 0..5 {
            let split = split_by_year(&ds, &SplitSpec::new(year, seed)).map_err(|e| e.to_string())?;
            let pool: Vec<_> = ds.samples.iter().filter(|s| s.year < year).map(key).collect();
            let test: Vec<_> = ds.samples.iter().filter(|s| s.year == year).map(key).collect();
            ensure(split.test.samples.iter().map(key).collect::<Vec<_>>() == test, || format!("{year}: test set differs"))?;
            ensure(
                split.train.samples.iter().chain(&split.val.samples).all(|s| s.year < year),
                || format!("{year}: test-year or later sample in train/val"),
            )?;
            let mut got: Vec<_> = split.train.samples.iter().chain(&split.val.samples).map(key).collect();
            ensure(got.len() == pool.len(), || format!("{year}: {} train+val for a pool of {}", got.len(), pool.len()))?;
            got.sort();
            got.dedup();
            let mut want = pool.clone();
            want.sort();
            ensure(got == want, || format!("{year}: train/val is not a partition of the pool"))?;
            let expect = (pool.len() as f64 * 0.10).floor() as usize;
            ensure(split.val.len() == expect, || format!("{year}: |val| {} for pool {}", split.val.len(), pool.len()))?;
            splits += 1;
        }
    }
    Ok(format!("{splits} splits over {} test years checked exhaustively", years.len() - 1))
}

// ---------------------------------------------------------------------------
// Artifacts

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    yldcvt(&["synth", "--out", "data.yldh", "--n", "240", "--seed", "5", "--years", "2016-2019"], d)?;
    let train = [
        "train", "--data", "data.yldh", "--model", "tiny", "--test-year", "2018", "--test-year", "2019", "--runs", "2",
        "--epochs", "2", "--seed", "9",
    ];
    let (code, _) = yldcvt(&[&train[..], &["--out-dir", "a"]].concat(), d)?;
    ensure(code == 0, || "initial train failed".into())?;
    let mut reports = Vec::new();
    for out in ["b", "c"] {
        let (code, _) = yldcvt(&["train", "--manifest", "a/manifest.json", "--out-dir", out], d)?;
        ensure(code == 0, || format!("replay into {out} failed"))?;
        reports.push(std::fs::read(d.join(out).join("report.csv")).map_err(|e| e.to_string())?);
    }
    let first = std::fs::read(d.join("a/report.csv")).map_err(|e| e.to_string())?;
    ensure(reports.iter().all(|r| *r == first), || "report.csv differs between executions".into())?;
    Ok(format!("3 executions, identical {}-byte report.csv", first.len()))
}

fn random_dataset(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
    let (bands, bins, t) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..5));
    let samples = (0..n)
        .map(|i| HistogramSample {
            county_id: i as i32 * 3 - 40,
            year: rng.gen_range(1990..2030),
            yield_bu_ac: rng.gen_range(-1e3f32..1e3),
            grid: Tensor::new(vec![bands, bins, t], (0..bands * bins * t).map(|_| rng.gen::<f32>()).collect()).unwrap(),
        })
        .collect();
    let provenance = if rng.gen_bool(0.5) { Provenance::Synthetic } else { Provenance::External };
    Dataset::new(provenance, bands, bins, t, samples).unwrap()
}

fn format_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for i in 0..50 {
        let n = match i {
            0 => 0,
            1 => 1,
            _ => rng.gen_range(2..40),
        };
        let ds = random_dataset(&mut rng, n);
        let path = dir.path().join(format!("{i}.yldh"));
        write_dataset(&ds, &path).map_err(|e| e.to_string())?;
        let back = read_dataset(&path).map_err(|e| e.to_string())?;
        let bits = |d: &Dataset| -> Vec<u32> {
            d.samples
                .iter()
                .flat_map(|s| {
                    [s.county_id as u32, s.year as u32, s.yield_bu_ac.to_bits()]
                        .into_iter()
                        .chain(s.grid.data().iter().map(|v| v.to_bits()))
                })
                .collect()
        };
        ensure(
            back.provenance == ds.provenance
                && (back.bands, back.bins, back.intervals) == (ds.bands, ds.bins, ds.intervals)
                && back.len() == ds.len()
                && bits(&back) == bits(&ds),
            || format!("dataset {i} ({n} samples) changed on round trip"),
        )?;
    }
    Ok("50 datasets (including empty and single-sample) bit-exact".into())
}

fn configuration_fidelity() -> Check {
    for (preset, epochs) in [(ModelPreset::Cvt13, 150), (ModelPreset::Cvt21, 200), (ModelPreset::CvtW24, 250)] {
        let cfg = TrainConfig::for_preset(preset);
        ensure(cfg.epochs == epochs && cfg.learning_rate == 0.00025, || {
            format!("{preset}: epochs {} lr {}", cfg.epochs, cfg.learning_rate)
        })?;
        let model = ModelConfig::preset(preset, FULL_SEASON_INTERVALS);
        ensure(model.stages.len() == 3 && model.validate().is_ok(), || format!("{preset}: invalid stages"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    yldcvt(&["synth", "--out", "data.yldh", "--n", "200", "--seed", "3", "--years", "2016-2019"], d)?;
    let mut manifests = Vec::new();
    for stride in ["1", "2"] {
        let out = format!("kv{stride}");
        let (code, _) = yldcvt(
            &[
                "train", "--data", "data.yldh", "--model", "tiny", "--test-year", "2019", "--runs", "1", "--epochs", "1",
                "--kv-stride", stride, "--out-dir", &out,
            ],
            d,
        )?;
        ensure(code == 0, || format!("kv stride {stride} run failed"))?;
        let text = std::fs::read_to_string(d.join(&out).join("manifest.json")).map_err(|e| e.to_string())?;
        let mut m: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        m.as_object_mut().unwrap().remove("duration_secs");
        manifests.push(m);
    }
    let strides = |m: &serde_json::Value| -> Vec<u64> {
        m["model"]["stages"].as_array().unwrap().iter().map(|s| s["kv_stride"].as_u64().unwrap()).collect()
    };
    ensure(strides(&manifests[0]) == [1, 1, 1] && strides(&manifests[1]) == [2, 2, 2], || "kv_stride not recorded".into())?;
    let mut a = manifests[0].clone();
    let b = &manifests[1];
    for (i, s) in a["model"]["stages"].as_array_mut().unwrap().iter_mut().enumerate() {
        s["kv_stride"] = b["model"]["stages"][i]["kv_stride"].clone();
    }
    a["param_count"] = b["param_count"].clone();
    ensure(a == *b, || "manifests differ beyond kv_stride and parameter count".into())?;
    Ok("epochs 150/200/250, lr 0.00025; kv stride 1 and 2 runs complete".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("gradient correctness (full model)", full_model_gradcheck),
        ("gradient correctness (per-op suites)", per_op_gradients),
        ("factor-4 token reduction", factor_four),
        ("shape contract", shape_contract),
        ("learnability", learnability),
        ("overfit check", overfit),
        ("metric oracle", metric_oracle),
        ("protocol fidelity", protocol_fidelity),
        ("determinism", determinism),
        ("format round-trip", format_round_trip),
        ("configuration fidelity", configuration_fidelity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
