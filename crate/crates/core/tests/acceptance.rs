//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits non-zero when a mandatory criterion fails; soft criteria only warn.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hiif::checkpoint::Checkpoint;
use hiif::config::{Preset, RunConfig};
use hiif::coords::{ensemble_weights, local_normalized_coord, nearest_latents, Cell, Coord, HierDigits, QueryBatch, LOCAL_EPS};
use hiif::decoder::{Decoder, DecoderConfig, QueryGeometry, Variant};
use hiif::eval::{eval_bicubic, evaluate_with, BenchReport, Dataset};
use hiif::gradcheck::{self, GradcheckOptions};
use hiif::image::{bicubic_resize, bilinear_upsample, Image, PsnrConvention};
use hiif::model::{scaled_len, Model, DEFAULT_TILE};
use hiif::nn::ParamStore;
use hiif::run;
use hiif::synth::{toy_image, toy_set};
use hiif::tensor::{Graph, Tensor};
use hiif::train::TrainReport;

// tolerances and anchors
const SET5_X2_BICUBIC: f64 = 32.30;
const DIV2K_BICUBIC: [(f64, f64); 3] = [(2.0, 31.01), (3.0, 28.22), (4.0, 26.66)];
const ANCHOR_TOL_DB: f64 = 0.3;
const PAPER_DECODER_PARAMS: f64 = 1.33e6;
const PARAM_TOL: f64 = 0.15;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 10;
const HIER_LEVELS: usize = 6;
const HIER_BASE: u32 = 2;
const HIER_SAMPLES: usize = 1000;
const BILINEAR_SCALES: [f64; 4] = [1.0, 2.0, 2.7, 6.0];
const WEIGHT_QUERIES: usize = 10_000;
const LIIF_TOL: f64 = 1e-12;
const TOY_MARGIN_DB: f64 = 0.2;
const TOY_SEEDS: [u64; 3] = [0, 1, 2];
const TOY_TRAIN: usize = 16;
const TOY_VAL: usize = 8;
const TOY_SIZE: usize = 96;
const TILE_TOL: f64 = 1e-6;

struct Line {
    id: u32,
    title: &'static str,
    pass: bool,
    required: bool,
    detail: String,
    secs: f64,
}

struct Suite {
    lines: Vec<Line>,
}

impl Suite {
    fn record(&mut self, id: u32, title: &'static str, required: bool, start: Instant, pass: bool, detail: String) {
        let l = Line {
            id,
            title,
            pass,
            required,
            detail,
            secs: start.elapsed().as_secs_f64(),
        };
        let tag = match (l.pass, l.required) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        println!("[{tag}] {:>2}. {} — {} ({:.1} s)", l.id, l.title, l.detail, l.secs);
        self.lines.push(l);
    }
}

fn workspace() -> PathBuf {
    let core = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    core.parent().and_then(|p| p.parent()).unwrap_or(core).to_path_buf()
}

fn data_dir(var: &str, default: &str) -> PathBuf {
    std::env::var_os(var).map(PathBuf::from).unwrap_or_else(|| workspace().join("data").join(default))
}

fn bicubic_anchors(s: &mut Suite) {
    let t = Instant::now();
    let set5 = data_dir("HIIF_SET5", "Set5");
    let mut notes = Vec::new();
    let mut pass = match Dataset::load(&set5) {
        Ok(ds) => match eval_bicubic(&ds, &[2.0]) {
            Ok(r) => {
                let p = r.rows[0].psnr_db;
                notes.push(format!("Set5 ×2 {p:.2} dB vs {SET5_X2_BICUBIC} (n={})", r.rows[0].n_images));
                (p - SET5_X2_BICUBIC).abs() <= ANCHOR_TOL_DB
            }
            Err(e) => {
                notes.push(format!("Set5 evaluation failed: {e}"));
                false
            }
        },
        Err(e) => {
            notes.push(format!("Set5 unavailable ({e}); set HIIF_SET5"));
            false
        }
    };
    let div2k = data_dir("HIIF_DIV2K", "DIV2K_valid_HR");
    match Dataset::load(&div2k) {
        Ok(ds) if ds.images.len() >= 20 => {
            // the full 100-image validation set is binding; smaller subsets only report
            let binding = ds.images.len() >= 100;
            let scales: Vec<f64> = DIV2K_BICUBIC.iter().map(|a| a.0).collect();
            match eval_bicubic(&ds, &scales) {
                Ok(r) => {
                    for (row, &(scale, want)) in r.rows.iter().zip(&DIV2K_BICUBIC) {
                        let ok = (row.psnr_db - want).abs() <= ANCHOR_TOL_DB;
                        notes.push(format!(
                            "DIV2K ×{scale} {:.2} vs {want}{}",
                            row.psnr_db,
                            if binding { "" } else { " (report-only)" }
                        ));
                        pass &= ok || !binding;
                    }
                }
                Err(e) => notes.push(format!("DIV2K evaluation failed: {e}")),
            }
        }
        Ok(ds) => notes.push(format!("DIV2K subset too small ({} images), not scored", ds.images.len())),
        Err(_) => notes.push("DIV2K not present, not scored".into()),
    }
    s.record(1, "bicubic anchors", true, t, pass, notes.join("; "));
}

fn param_count(s: &mut Suite) {
    let t = Instant::now();
    let cfg = DecoderConfig {
        width: 256,
        levels: 6,
        base: 2,
        blocks: 2,
        heads: 16,
        ..DecoderConfig::default()
    };
    let n = Decoder::new(cfg, 256).expect("paper decoder").param_count() as f64;
    let rel = (n - PAPER_DECODER_PARAMS).abs() / PAPER_DECODER_PARAMS;
    s.record(
        2,
        "decoder parameter count",
        true,
        t,
        rel <= PARAM_TOL,
        format!("{:.3} M vs 1.33 M (off by {:.1}%, limit {:.0}%)", n / 1e6, 100.0 * rel, 100.0 * PARAM_TOL),
    );
}

fn gradient_suite(s: &mut Suite) {
    let t = Instant::now();
    let cfg = RunConfig::preset(Preset::Desk);
    let mut opts = GradcheckOptions::new(cfg.model(), 2024);
    opts.instances = GRAD_INSTANCES;
    let report = gradcheck::run_suite(&opts);
    let worst = report.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let enough = report.checks.iter().all(|c| c.instances >= GRAD_INSTANCES);
    let pass = report.passed() && enough && worst < GRAD_TOL;
    if !pass {
        print!("{}", report.to_text());
    }
    s.record(
        3,
        "finite-difference gradient suite",
        true,
        t,
        pass,
        format!(
            "{} checks × {} instances, {} op kinds, worst rel err {:.2e} (limit {GRAD_TOL:e})",
            report.checks.len(),
            GRAD_INSTANCES,
            report.ops.len(),
            worst
        ),
    );
}

fn hierarchical_reconstruction(s: &mut Suite) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bound = (HIER_BASE as f64).powi(-(HIER_LEVELS as i32));
    let mut worst: f64 = 0.0;
    for _ in 0..HIER_SAMPLES {
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let q = Coord::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let star = nearest_latents(q, h, w)[0].center;
        let (x, y) = local_normalized_coord(q, star, h, w);
        let (rx, ry) = HierDigits::new(x, y, HIER_LEVELS, HIER_BASE).expect("base").reconstruct();
        let clamp = |v: f64| v.clamp(0.0, 1.0 - LOCAL_EPS);
        worst = worst.max((rx - clamp(x)).abs()).max((ry - clamp(y)).abs());
    }
    s.record(
        4,
        "hierarchical encoding reconstruction",
        true,
        t,
        worst < bound,
        format!("{HIER_SAMPLES} coords, max error {worst:.6e} < S^-L = {bound:.6e}"),
    );
}

fn zero_residual_identity(s: &mut Suite) {
    let t = Instant::now();
    let run = RunConfig::preset(Preset::Desk);
    let model = Model::<f32>::new(run.model(), 5).expect("desk model");
    let lr = toy_image(55, 13, 17);
    let mut detail = Vec::new();
    let mut pass = true;
    for r in BILINEAR_SCALES {
        let (h, w) = (scaled_len(lr.height(), r), scaled_len(lr.width(), r));
        let got = model.upsample(&lr, h, w, run.eval.tile).expect("upsample");
        let want = bilinear_upsample(&lr, h, w);
        let same = got.pixels().iter().zip(want.pixels()).all(|(a, b)| a.to_bits() == b.to_bits());
        pass &= same;
        detail.push(format!("×{r}: {}", if same { "identical" } else { "differs" }));
    }
    s.record(5, "zero residual equals bilinear", true, t, pass, detail.join(", "));
}

fn liif_algebra(s: &mut Suite) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..WEIGHT_QUERIES {
        let (h, w) = (rng.gen_range(1..64), rng.gen_range(1..64));
        let q = Coord::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let c = nearest_latents(q, h, w).map(|l| l.center);
        let wts = ensemble_weights(q, &c);
        worst_sum = worst_sum.max((wts.iter().sum::<f64>() - 1.0).abs());
    }

    let cfg = DecoderConfig {
        levels: 3,
        width: 16,
        variant: Variant::Liif,
        heads: 2,
        zero_init_final: false,
        ..DecoderConfig::default()
    };
    let dec = Decoder::new(cfg, 6).expect("liif decoder");
    let store = ParamStore::<f64>::init(&dec.param_specs(), &mut rng);
    let (h, w, tq) = (5, 7, 256);
    let latent = Tensor::new(&[h * w, 6], (0..h * w * 6).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape");
    let coords: Vec<Coord> = (0..tq).map(|_| Coord::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    let geo = QueryGeometry::new(&coords, Cell { h: 0.04, w: 0.03 }, h, w, 3, 2);
    let mut g = Graph::<f64>::new();
    let lv = g.constant(latent);
    let blended = dec.liif_decode(&mut g, &store, lv, &geo).expect("blend");
    let cell = g.constant(Tensor::new(&[tq, 2], geo.cell.repeat(tq)).expect("shape"));
    let corners: Vec<Vec<f64>> = (0..4)
        .map(|k| {
            let v = dec.liif_corner(&mut g, &store, lv, &geo, k, cell).expect("corner");
            g.value(v).to_f64_vec()
        })
        .collect();
    let out = g.value(blended).data();
    let mut worst_blend: f64 = 0.0;
    for i in 0..tq {
        for c in 0..3 {
            let want: f64 = (0..4).map(|k| geo.weights[i][k] * corners[k][3 * i + c]).sum();
            worst_blend = worst_blend.max((out[3 * i + c] - want).abs());
        }
    }
    s.record(
        6,
        "local-ensemble algebra",
        true,
        t,
        worst_sum <= LIIF_TOL && worst_blend <= LIIF_TOL,
        format!("weight-sum error {worst_sum:.1e} over {WEIGHT_QUERIES} queries, blend error {worst_blend:.1e} (limit {LIIF_TOL:e})"),
    );
}

struct ToyRun {
    model: Model<f32>,
    report: TrainReport,
    bench: BenchReport,
    ckpt: Vec<u8>,
}

fn toy_run(run: &RunConfig, train: &[(String, Image)], val: &Dataset) -> ToyRun {
    let mut log = Vec::new();
    let (model, report) = run::train_model(run, train, &mut log).expect("toy training");
    let method = run.decoder.variant.to_string();
    let bench = run::evaluate_model(&model, &method, val, run).expect("toy evaluation");
    let ckpt = Checkpoint::from_model(&model, run, &[]).to_bytes().expect("checkpoint");
    ToyRun { model, report, bench, ckpt }
}

fn toy_config(seed: u64, variant: Variant) -> RunConfig {
    let mut run = RunConfig::preset(Preset::Desk);
    run.train.seed = seed;
    run.decoder.variant = variant;
    run.eval.scales = vec![2.0];
    run
}

fn psnr_x2(r: &ToyRun) -> f64 {
    r.bench.rows.iter().find(|row| row.scale == 2.0).map_or(f64::NAN, |row| row.psnr_db)
}

fn main() -> ExitCode {
    // `cargo test -- <filter>` passes arguments; this harness runs everything
    let mut s = Suite { lines: Vec::new() };
    bicubic_anchors(&mut s);
    param_count(&mut s);
    gradient_suite(&mut s);
    hierarchical_reconstruction(&mut s);
    zero_residual_identity(&mut s);
    liif_algebra(&mut s);

    let train = toy_set(0, TOY_TRAIN, TOY_SIZE);
    let val = Dataset {
        name: "toy".into(),
        images: toy_set(100, TOY_VAL, TOY_SIZE),
    };
    let bicubic = eval_bicubic(&val, &[2.0]).expect("bicubic").rows[0].psnr_db;

    let t = Instant::now();
    let full: Vec<ToyRun> = TOY_SEEDS.iter().map(|&seed| toy_run(&toy_config(seed, Variant::Full), &train, &val)).collect();
    let per_seed: Vec<String> = full.iter().map(|r| format!("{:.2}", psnr_x2(r))).collect();
    let beats = full.iter().all(|r| psnr_x2(r) >= bicubic + TOY_MARGIN_DB);
    s.record(
        7,
        "toy training beats bicubic",
        true,
        t,
        beats,
        format!("×2 PSNR per seed [{}] vs bicubic {bicubic:.2} + {TOY_MARGIN_DB}", per_seed.join(", ")),
    );
    let smoke: Vec<bool> = full
        .iter()
        .map(|r| r.report.epochs.len() >= 20 && r.report.epochs[19].loss < r.report.epochs[0].loss)
        .collect();
    // luma scores for reference; isoluminant toy edges make them unrepresentative
    let luma: Vec<String> = full
        .iter()
        .map(|r| {
            let m = evaluate_with(&val, &[2.0], "full", PsnrConvention::YChannel, |lr, h, w| {
                Ok(r.model.upsample(lr, h, w, DEFAULT_TILE)?)
            })
            .expect("luma evaluation");
            format!("{:.2}", m.rows[0].psnr_db)
        })
        .collect();
    let luma_bicubic = evaluate_with(&val, &[2.0], "bicubic", PsnrConvention::YChannel, |lr, h, w| Ok(bicubic_resize(lr, h, w)))
        .expect("luma bicubic")
        .rows[0]
        .psnr_db;
    println!("       luma ×2 PSNR per seed [{}] vs bicubic {luma_bicubic:.2}", luma.join(", "));
    println!("       training smoke check: epoch-20 loss below epoch-1 loss per seed {smoke:?}");

    tiled_exactness(&mut s);

    let t = Instant::now();
    let mut notes = Vec::new();
    let mut all_ok = true;
    for variant in [Variant::NoHier, Variant::NoMultiScale, Variant::NoAttention] {
        let mut wins = 0;
        let mut vals = Vec::new();
        for (i, &seed) in TOY_SEEDS.iter().enumerate() {
            let r = toy_run(&toy_config(seed, variant), &train, &val);
            let (f, v) = (psnr_x2(&full[i]), psnr_x2(&r));
            wins += usize::from(f >= v);
            vals.push(format!("{v:.2}"));
        }
        all_ok &= wins >= 2;
        notes.push(format!("{variant} [{}] full≥variant in {wins}/3", vals.join(", ")));
    }
    s.record(9, "ablation ordering (soft)", false, t, all_ok, notes.join("; "));

    let t = Instant::now();
    let again = toy_run(&toy_config(TOY_SEEDS[0], Variant::Full), &train, &val);
    let same_ckpt = again.ckpt == full[0].ckpt;
    let same_report = again.bench.to_tsv() == full[0].bench.to_tsv();
    s.record(
        10,
        "determinism",
        true,
        t,
        same_ckpt && same_report,
        format!(
            "checkpoint {} ({} bytes), report {}",
            if same_ckpt { "bit-identical" } else { "differs" },
            again.ckpt.len(),
            if same_report { "bit-identical" } else { "differs" }
        ),
    );

    s.lines.sort_by_key(|l| l.id);
    let failed: Vec<u32> = s.lines.iter().filter(|l| l.required && !l.pass).map(|l| l.id).collect();
    let passed = s.lines.iter().filter(|l| l.pass).count();
    println!("acceptance: {passed}/{} criteria passed", s.lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: mandatory criteria failed: {failed:?}");
        ExitCode::FAILURE
    }
}

fn tiled_exactness(s: &mut Suite) {
    let t = Instant::now();
    let mut run = RunConfig::preset(Preset::Desk);
    // a nonzero residual, so the comparison is not vacuous
    run.decoder.zero_init_final = false;
    let model = Model::<f32>::new(run.model(), 8).expect("desk model");
    let lr = toy_image(88, 32, 32);
    let (h, w) = (128, 128);
    let q = QueryBatch::full_grid(h, w);
    let mut g = Graph::<f32>::new();
    let one_shot = model.forward(&mut g, &lr, &q.coords, q.cell).expect("one-shot forward");
    let one_shot = g.value(one_shot).to_f64_vec();
    let mut worst: f64 = 0.0;
    for tile in [1000, 4096] {
        let tiled = model.residuals(&lr, &q, tile).expect("tiled");
        let d = tiled.iter().zip(&one_shot).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    s.record(
        8,
        "tiled inference exactness",
        true,
        t,
        worst < TILE_TOL,
        format!("32×32 ×4, tiles of 1000 and 4096 vs one shot: max |Δ| {worst:.2e} (limit {TILE_TOL:e})"),
    );
}
