//! Acceptance suite: one PASS / FAIL / SKIP line per criterion.
//!
//! The full-scale criteria need MVTec data under `GTRANS_DATA_ROOT` and
//! ResNet-34 weights under `GTRANS_WEIGHT_CACHE`; without them they report SKIP.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use common::*;
use gtrans::backbones::{BackboneConfig, Family, FeaturePyramid, Source};
use gtrans::config::{RunConfig, ENV_DATA_ROOT, ENV_WEIGHT_CACHE};
use gtrans::mapper::{LayerMapper, MapperConfig, TokenSource};
use gtrans::metrics;
use gtrans::model::{GTrans, ModelConfig};
use gtrans::nn::Linear;
use gtrans::params::ParamStore;
use gtrans::runner;
use gtrans::scoring::{self, CombinationMode, LayerWeights, ScoreConfig};
use gtrans::tfm::{self, BlockParams, Tfm, TfmConfig};
use gtrans::tokenizer::{LayerTokenizer, TokenizerConfig};
use gtrans::training;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-5;
const LOSS_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-3;
const SOFTMAX_TOL: f64 = 1e-6;
const AUROC_TOL: f64 = 1e-9;
const AUPRO_TOL: f64 = 1e-6;
const E2E_IMAGE_AUROC: f64 = 0.90;
const E2E_PIXEL_AUROC: f64 = 0.85;
const E2E_MAX_EPOCHS: usize = 30;
const E2E_BUDGET_S: f64 = 600.0;
const BOTTLE_DETECTION: f64 = 0.980;
const BOTTLE_LOCALIZATION: f64 = 0.965;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn tiny_config(groups: usize, dim: usize, blocks: usize, token_source: TokenSource) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { family: Family::TinyTest, critical_layers: vec![1, 2, 3], pretrained: true },
        tokenizer: TokenizerConfig { groups, dim },
        tfm: TfmConfig { blocks, use_decoder: true },
        mapper: MapperConfig { token_source, ..MapperConfig::default() },
    }
}

fn equation_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new(5, DType::F64);
    let mut worst = Vec::new();

    let p = BlockParams::new(&mut store, "enc", 4).unwrap();
    let x = randn(&[2, 4, 6], &mut rng);
    let y = tfm::encoder_block(&x, &p).unwrap();
    let e = (0..2).map(|b| max_abs_diff(&item_mat(&y, b), &encoder_block(&block(&p), &item_mat(&x, b)))).fold(0.0, f64::max);
    worst.push(("encoder_block", e, ORACLE_TOL));

    let p = BlockParams::new(&mut store, "dec", 4).unwrap();
    let mem = randn(&[2, 4, 6], &mut rng);
    let y = tfm::decoder_block(&x, &mem, &p).unwrap();
    let e = (0..2)
        .map(|b| max_abs_diff(&item_mat(&y, b), &decoder_block(&block(&p), &item_mat(&x, b), &item_mat(&mem, b))))
        .fold(0.0, f64::max);
    worst.push(("decoder_block", e, ORACLE_TOL));

    let mut m = LayerMapper::new(&mut store, "map", 8, 5).unwrap();
    m.value = Linear::new(&mut store, "map.value_random", 5, 8).unwrap();
    let ft = randn(&[1, 8, 4, 4], &mut rng);
    let fg = randn(&[1, 8, 4, 4], &mut rng);
    let tokens = randn(&[1, 5, 3], &mut rng);
    let out = m.forward(&ft, &fg, &tokens).unwrap();
    let flat = |t: &Tensor| item_mat(&t.reshape((1, 8, 16)).unwrap(), 0);
    let (expected, _) = map_layer(&affine(&m.query), &affine(&m.key), &affine(&m.value), &flat(&ft), &flat(&fg), &item_mat(&tokens, 0));
    worst.push(("map_layer", max_abs_diff(&flat(&out), &expected), ORACLE_TOL));

    let tok = LayerTokenizer::new(&mut store, "tok", 8, &TokenizerConfig { groups: 3, dim: 5 }).unwrap();
    let (expected, _) = tokenize(&affine(&tok.group_proj), &affine(&tok.value_proj), &flat(&fg));
    worst.push(("tokenizer", max_abs_diff(&item_mat(&tok.forward(&fg).unwrap(), 0), &expected), ORACLE_TOL));

    let g = randn(&[1, 5, 3, 4], &mut rng);
    let mm = randn(&[1, 5, 3, 4], &mut rng);
    let p = training::pixel_loss(&g, &mm).unwrap();
    worst.push(("pixel_loss", max_abs_diff(&item_mat(&p, 0), &pixel_loss(&layer_of(&g), &layer_of(&mm))), LOSS_TOL));

    let shapes = [[1, 3, 8, 8], [1, 4, 4, 4], [1, 6, 2, 2]];
    let gl: Vec<Tensor> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
    let ml: Vec<Tensor> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
    let pyr = |layers: Vec<Tensor>| FeaturePyramid { layers, stages: vec![1, 2, 3], source: Source::Guide };
    let loss = to_vec(&training::total_loss(&pyr(gl.clone()), &pyr(ml.clone())).unwrap())[0];
    let gls: Vec<Layer> = gl.iter().map(layer_of).collect();
    let mls: Vec<Layer> = ml.iter().map(layer_of).collect();
    worst.push(("total_loss", (loss - total_loss(&gls, &mls)).abs(), LOSS_TOL));

    let mut e_map: f64 = 0.0;
    let mut e_mse: f64 = 0.0;
    let mut e_cos: f64 = 0.0;
    let mut e_w: f64 = 0.0;
    for (k, (a, b)) in gl.iter().zip(&ml).enumerate() {
        let lm = scoring::layer_loss_map(a, b, k + 1).unwrap();
        let rows: Mat = lm.values.outer_iter().map(|r| r.to_vec()).collect();
        e_map = e_map.max(max_abs_diff(&rows, &layer_loss_map(&gls[k], &mls[k])));
        let mse = scoring::alpha_mse(a, b).unwrap();
        let cos = scoring::alpha_cos(a, b).unwrap().value;
        e_mse = e_mse.max((mse - alpha_mse(&gls[k], &mls[k])).abs());
        e_cos = e_cos.max((cos - alpha_cos(&gls[k], &mls[k])).abs());
        for lambda in [0.1, 1.0, 7.5] {
            e_w = e_w.max((scoring::layer_weight(mse, cos, lambda).unwrap() - layer_weight(mse, cos, lambda)).abs());
        }
    }
    worst.push(("layer_loss_map", e_map, LOSS_TOL));
    worst.push(("alpha_mse", e_mse, ORACLE_TOL));
    worst.push(("alpha_cos", e_cos, ORACLE_TOL));
    worst.push(("layer_weight", e_w, ORACLE_TOL));

    let ok = worst.iter().all(|(_, e, tol)| e <= tol);
    let detail = worst.iter().map(|(n, e, _)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(ok, detail)
}

/// Worst per-tensor relative error between autodiff and central differences.
fn gradient_check(token_source: TokenSource) -> (f64, usize) {
    let cfg = tiny_config(2, 4, 1, token_source);
    let model = GTrans::with_dtype(&cfg, 3, None, DType::F64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // Zero-initialized value projections would hide the mapper's query/key gradients.
    for (name, var) in model.store().params() {
        if name.contains(".value.") {
            var.set(&randn(var.dims(), &mut rng)).unwrap();
        }
    }
    let batch = randn(&[1, 3, 32, 32], &mut rng);
    let loss = |m: &GTrans| {
        let out = m.forward(&batch, false).unwrap();
        training::total_loss(&out.guide, out.mapped()).unwrap()
    };
    let grads = loss(&model).backward().unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, var) in model.store().params() {
        if name.starts_with("student.") {
            continue;
        }
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => to_vec(g),
            None => vec![0.0; var.elem_count()],
        };
        let base = to_vec(var.as_tensor());
        let picks: Vec<usize> = (0..3.min(base.len())).map(|_| rng.random_range(0..base.len())).collect();
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &picks {
            let probe = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                to_vec(&loss(&model))[0]
            };
            let numeric = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
            var.set(&Tensor::from_vec(base.clone(), var.dims(), &Device::Cpu).unwrap()).unwrap();
            diff += (analytic[i] - numeric).powi(2);
            na += analytic[i].powi(2);
            nn += numeric.powi(2);
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff.sqrt() / scale);
            checked += 1;
        }
    }
    (worst, checked)
}

fn gradients() -> Outcome {
    let (enc, n_enc) = gradient_check(TokenSource::Encoder);
    let (dec, n_dec) = gradient_check(TokenSource::Decoder);
    verdict(
        enc.max(dec) <= GRAD_TOL,
        format!("max rel err {:.1e} over {} tensors (encoder tokens), {:.1e} over {} (decoder tokens)", enc, n_enc, dec, n_dec),
    )
}

fn toy_model_and_batch(dtype: DType) -> (GTrans, Tensor, Vec<gtrans::datasets::ImageSample>) {
    let cfg = RunConfig::toy();
    let data = runner::load_data(&cfg).unwrap();
    let model = GTrans::with_dtype(&cfg.model(), cfg.seed, None, dtype).unwrap();
    let samples: Vec<_> = data.test[8..12].to_vec();
    let refs: Vec<_> = samples.iter().collect();
    let batch = model.batch_tensor(&refs).unwrap();
    (model, batch, samples)
}

fn identity_collapse() -> Outcome {
    let (model, batch, samples) = toy_model_and_batch(DType::F32);
    let guide = model.forward(&batch, false).unwrap().guide;
    let loss = to_vec(&training::total_loss(&guide, &guide).unwrap())[0];
    let mut max_p: f64 = 0.0;
    let mut max_alpha: f64 = 0.0;
    let mut max_map: f32 = 0.0;
    let mut max_score: f32 = 0.0;
    for i in 0..samples.len() {
        let g = guide.item(i).unwrap();
        for (k, layer) in g.layers.iter().enumerate() {
            let p = scoring::layer_loss_map(layer, layer, g.stages[k]).unwrap();
            max_p = max_p.max(p.values.iter().fold(0.0, |a, v| a.max(v.abs())));
            for lambda in [1.0, 3.7] {
                max_alpha = max_alpha.max(LayerWeights::compute(layer, layer, lambda).unwrap().alpha.abs());
            }
        }
        for mode in CombinationMode::TABLE {
            let config = ScoreConfig { mode, ..ScoreConfig::default() };
            let map = scoring::anomaly_map(&g, &g, &[1.0, 2.0, 3.0], &config, samples[i].size()).unwrap();
            max_map = max_map.max(map.values.iter().fold(0.0, |a, v| a.max(v.abs())));
            max_score = max_score.max(map.image_score.abs());
        }
    }
    verdict(
        loss == 0.0 && max_p == 0.0 && max_alpha == 0.0 && max_map == 0.0 && max_score == 0.0,
        format!("loss {loss}, max |P| {max_p}, max alpha {max_alpha}, max |map| {max_map}, max score {max_score} over P1-P6"),
    )
}

fn column_sum_error(weights: &Tensor, dim: usize) -> f64 {
    let sums = to_vec(&weights.to_dtype(DType::F64).unwrap().sum(dim).unwrap());
    let negative = to_vec(weights).iter().any(|&w| w < 0.0);
    let err = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    if negative {
        f64::INFINITY
    } else {
        err
    }
}

fn normalizations() -> Outcome {
    let mut rows = Vec::new();
    for dtype in [DType::F32, DType::F64] {
        let (model, batch, _) = toy_model_and_batch(dtype);
        let out = model.forward(&batch, false).unwrap();
        let head = &model.head;
        let mut tok = 0.0f64;
        for (k, t) in head.guide_tokenizer.layers.iter().zip(&head.student_tokenizer.layers).enumerate() {
            tok = tok.max(column_sum_error(&t.0.attention(&out.guide.layers[k]).unwrap(), 1));
            tok = tok.max(column_sum_error(&t.1.attention(&out.student.layers[k]).unwrap(), 1));
        }
        let mut enc = 0.0f64;
        let mut e = out.head.guide_tokens.tokens.clone();
        for b in &head.tfm.encoders {
            enc = enc.max(column_sum_error(&b.attention_weights(&e, &e).unwrap(), 1));
            e = tfm::encoder_block(&e, b).unwrap();
        }
        let mut dec = 0.0f64;
        let mut d = out.head.student_tokens.tokens.clone();
        for b in &head.tfm.decoders {
            dec = dec.max(column_sum_error(&b.attention_weights(&d, &e).unwrap(), 1));
            d = tfm::decoder_block(&d, &e, b).unwrap();
        }
        let mut map = 0.0f64;
        let g = out.head.guide_tokens.groups;
        for (k, m) in head.mapper.layers.iter().enumerate() {
            let block = e.narrow(2, k * g, g).unwrap();
            map = map.max(column_sum_error(&m.attention(&out.guide.layers[k], &block).unwrap(), 2));
        }
        rows.push((format!("{dtype:?}"), tok, enc, dec, map));
    }
    let ok = rows.iter().all(|r| r.1.max(r.2).max(r.3).max(r.4) <= SOFTMAX_TOL);
    let detail = rows
        .iter()
        .map(|(t, a, b, c, d)| format!("{t}: tokenizer {a:.1e}, encoder {b:.1e}, decoder {c:.1e}, mapper {d:.1e}"))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(ok, detail)
}

fn schedule() -> Outcome {
    let total = 1000;
    let lr0 = training::lr_at(0, total, 1e-3, 0.9).unwrap();
    let lr_half = training::lr_at(total / 2, total, 1e-3, 0.9).unwrap();
    let lr_end = training::lr_at(total, total, 1e-3, 0.9).unwrap();
    let ok = lr0 == 1e-3 && (lr_half - 1e-3 * 0.9f64.sqrt()).abs() <= 1e-18 && (lr_end - 9e-4).abs() <= 1e-18;
    verdict(ok, format!("lr(0) {lr0:e}, lr(S/2) {lr_half:e}, lr(S) {lr_end:e}"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut e_auc: f64 = 0.0;
    for trial in 0..20 {
        let mut labels: Vec<bool> = (0..100).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..100)
            .map(|_| {
                let s: f64 = rng.random();
                // Every other trial carries many ties.
                if trial % 2 == 0 { s } else { (s * 8.0).floor() }
            })
            .collect();
        e_auc = e_auc.max((metrics::auroc(&scores, &labels).unwrap() - auroc_pairs(&scores, &labels)).abs());
    }
    let mut e_pro: f64 = 0.0;
    for trial in 0..20 {
        let n = 1 + trial % 3;
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..n {
            let mut mask = ndarray::Array2::<u8>::zeros((8, 8));
            for _ in 0..rng.random_range(1..=3) {
                let (y, x) = (rng.random_range(0..7), rng.random_range(0..7));
                let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
                for yy in y..(y + h).min(8) {
                    for xx in x..(x + w).min(8) {
                        mask[[yy, xx]] = 1;
                    }
                }
            }
            let map = ndarray::Array2::from_shape_fn((8, 8), |(y, x)| {
                let noise: f32 = rng.random();
                let v = noise + if mask[[y, x]] == 1 { 0.5 } else { 0.0 };
                if trial % 2 == 0 { v } else { (v * 4.0).floor() }
            });
            maps.push(map);
            masks.push(mask);
        }
        let maps_v: Vec<_> = maps.iter().map(|m| m.view()).collect();
        let masks_v: Vec<_> = masks.iter().map(|m| m.view()).collect();
        let as_mat = |a: &ndarray::Array2<f32>| -> Mat { a.outer_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect() };
        let mask_mat = |a: &ndarray::Array2<u8>| -> Mat { a.outer_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect() };
        let om: Vec<Mat> = maps.iter().map(as_mat).collect();
        let ok: Vec<Mat> = masks.iter().map(mask_mat).collect();
        for cap in [0.05, 0.3, 1.0] {
            let got = metrics::aupro(&maps_v, &masks_v, cap).unwrap();
            e_pro = e_pro.max((got - aupro_exhaustive(&om, &ok, cap)).abs());
        }
    }
    verdict(e_auc <= AUROC_TOL && e_pro <= AUPRO_TOL, format!("AUROC max err {e_auc:.1e} (20x100), AUPRO max err {e_pro:.1e} (20 cases, 8x8)"))
}

fn permutation_equivariance() -> Outcome {
    let mut store = ParamStore::new(29, DType::F64);
    let t = Tfm::new(&mut store, "tfm", 6, &TfmConfig { blocks: 2, use_decoder: true }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let e = randn(&[2, 6, 12], &mut rng);
    let d = randn(&[2, 6, 12], &mut rng);
    let mut perm: Vec<u32> = (0..12).collect();
    perm.shuffle(&mut rng);
    let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
    let permute = |x: &Tensor| x.index_select(&idx, 2).unwrap();
    let base = t.forward(&e, &d).unwrap();
    let moved = t.forward(&permute(&e), &permute(&d)).unwrap();
    let diff = |a: &Tensor, b: &Tensor| to_vec(&(a - b).unwrap().abs().unwrap()).into_iter().fold(0.0, f64::max);
    let de = diff(&permute(&base.encoder), &moved.encoder);
    let dd = diff(&permute(base.decoder.as_ref().unwrap()), moved.decoder.as_ref().unwrap());
    verdict(de.max(dd) <= 1e-10, format!("encoder {de:.1e}, decoder {dd:.1e} (12 tokens, S=2)"))
}

struct DeskRun {
    outcome: Outcome,
    guide: Outcome,
}

fn desk_end_to_end() -> DeskRun {
    let cfg = RunConfig::toy();
    let clock = Instant::now();
    let data = runner::load_data(&cfg).unwrap();
    let model = GTrans::new(&cfg.model(), cfg.seed, None).unwrap();
    let before = model.guide_checksum().unwrap();
    let outcome = training::train(&model, &data, &cfg.training, cfg.seed, |_| {}).unwrap();
    let after = model.guide_checksum().unwrap();
    let cal = scoring::calibrate_lambda(&model, &data.val, cfg.training.batch_size).unwrap();
    let (report, _) = runner::score_and_report(&model, &cfg, &data, &cal.lambdas).unwrap();
    let elapsed = clock.elapsed().as_secs_f64();
    let losses = outcome.log.train_losses();
    let decreasing = losses.len() >= 5 && losses[..5].windows(2).all(|w| w[1] < w[0]);
    let n_train = data.train.len();
    let n_test = data.test.len();
    let ok = cfg.training.epochs <= E2E_MAX_EPOCHS
        && n_train == 40
        && n_test == 20
        && report.image_auroc >= E2E_IMAGE_AUROC
        && report.pixel_auroc >= E2E_PIXEL_AUROC
        && decreasing
        && elapsed < E2E_BUDGET_S;
    let detail = format!(
        "image AUROC {:.4}, pixel AUROC {:.4}, AUPRO {:.4}; first losses {:?}; {} epochs on {n_train} normals, {n_test} test images, {elapsed:.0}s",
        report.image_auroc,
        report.pixel_auroc,
        report.aupro,
        losses.iter().take(5).map(|l| format!("{l:.3}")).collect::<Vec<_>>(),
        cfg.training.epochs
    );
    DeskRun {
        outcome: verdict(ok, detail),
        guide: verdict(before == after, format!("checksum {}... over {} optimizer steps", &before[..16], outcome.steps)),
    }
}

fn mvtec_inputs() -> Option<(PathBuf, PathBuf)> {
    let root = PathBuf::from(std::env::var_os(ENV_DATA_ROOT)?);
    let cache = PathBuf::from(std::env::var_os(ENV_WEIGHT_CACHE)?);
    (root.join("bottle").is_dir() && cache.join("resnet34.safetensors").is_file()).then_some((root, cache))
}

fn mvtec_config(root: PathBuf, cache: PathBuf) -> RunConfig {
    let mut cfg = RunConfig::full();
    cfg.data.root = Some(root);
    cfg.paths.weight_cache = Some(cache);
    cfg
}

fn bottle_reproduction() -> Outcome {
    let Some((root, cache)) = mvtec_inputs() else {
        return Outcome::Skip(format!("needs {ENV_DATA_ROOT}/bottle and {ENV_WEIGHT_CACHE}/resnet34.safetensors"));
    };
    let cfg = mvtec_config(root, cache);
    let data = runner::load_data(&cfg).unwrap();
    let (model, _, cal) = runner::train_model(&cfg, &data).unwrap();
    let (r, _) = runner::score_and_report(&model, &cfg, &data, &cal.lambdas).unwrap();
    verdict(
        r.image_auroc >= BOTTLE_DETECTION && r.pixel_auroc >= BOTTLE_LOCALIZATION,
        format!("detection {:.1}, localization {:.1}", 100.0 * r.image_auroc, 100.0 * r.pixel_auroc),
    )
}

fn ablation_directions() -> Outcome {
    let Some((root, cache)) = mvtec_inputs() else {
        return Outcome::Skip(format!("needs {ENV_DATA_ROOT}/bottle and {ENV_WEIGHT_CACHE}/resnet34.safetensors"));
    };
    let cfg = mvtec_config(root, cache);
    let dir = tempfile::tempdir().unwrap();
    let (dec, _) = runner::cmd_ablate(&cfg, runner::AblationAxis::Decoder, None, dir.path()).unwrap();
    let (modes, _) = runner::cmd_ablate(&cfg, runner::AblationAxis::Modes, None, dir.path()).unwrap();
    let pure = dec[0].image_auroc;
    let added = dec[1].image_auroc;
    let p4 = modes[3].image_auroc;
    let p6 = modes[5].image_auroc;
    verdict(
        added >= pure && p6 >= p4,
        format!("added decoder {added:.4} vs pure encoder {pure:.4}; P6 {p6:.4} vs P4 {p4:.4}"),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let desk = catch_unwind(desk_end_to_end).unwrap_or_else(|_| DeskRun {
        outcome: Outcome::Fail("desk run panicked".into()),
        guide: Outcome::Fail("desk run panicked".into()),
    });
    let results = vec![
        ("equation oracles", guarded(equation_oracles)),
        ("gradient check", guarded(gradients)),
        ("identity collapse", guarded(identity_collapse)),
        ("softmax normalizations", guarded(normalizations)),
        ("learning-rate schedule", guarded(schedule)),
        ("metric oracles", guarded(metric_oracles)),
        ("frozen guide", desk.guide),
        ("TFM permutation equivariance", guarded(permutation_equivariance)),
        ("desk-scale end to end", desk.outcome),
        ("MVTec bottle, ResNet-34", guarded(bottle_reproduction)),
        ("ablation directions on bottle", guarded(ablation_directions)),
    ];
    let mut failed = Vec::new();
    for (name, outcome) in &results {
        match outcome {
            Outcome::Pass(d) => println!("PASS  {name}: {d}"),
            Outcome::Fail(d) => {
                println!("FAIL  {name}: {d}");
                failed.push(*name);
            }
            Outcome::Skip(d) => println!("SKIP  {name}: {d}"),
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
