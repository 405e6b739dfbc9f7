//! Acceptance suite: one PASS/FAIL line per criterion, each with its time
//! budget. Runs without the libtest harness so the lines come out in order.
//! `VIDSEQ_ACCEPTANCE=2,3` runs a subset.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::gradcheck;
use common::oracles::{
    ap_by_walking, dtw_exhaustive, path_cost, random_ranks, random_sequence, subsequence_exhaustive,
};
use vidseq::dtw::{bidtw, dtw, subsequence_dtw, BidtwMode, DtwConfig, Scope};
use vidseq::eval::{average_precision, evaluate, CropSpec, Protocol, Reversal};
use vidseq::model::{Autoencoder, ClipTensor, ModelConfig, ModelVariant, TransformerConfig};
use vidseq::pipeline::{build_index, make_queries, training_clips, DatasetVideo};
use vidseq::store::{index_read, index_write, Index, Standardizer, VideoRecord};
use vidseq::synth::{generate, SynthSpec};
use vidseq::tensor::{Checkpoint, Tensor};
use vidseq::train::{hard_count, mine_challenging, sample_triplets, train_schedule, triplet_losses, Stage, TrainConfig};
use vidseq::Error;

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: Error) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1

fn gradient_integrity() -> Verdict {
    const SEEDS: u64 = 20;
    let cases = gradcheck::cases();
    let mut worst = (0.0, String::new());
    for case in &cases {
        for seed in 0..SEEDS {
            let out = gradcheck::check(case, seed).map_err(|e| format!("{} seed {seed}: {e}", case.name))?;
            if out.worst > worst.0 {
                worst = (out.worst, format!("{} seed {seed} at {}", case.name, out.at));
            }
            ensure(out.worst < gradcheck::TOLERANCE, || {
                format!("{} seed {seed}: relative error {:.3e} at {}", case.name, out.worst, out.at)
            })?;
        }
    }
    Ok(format!("{} ops/blocks x {SEEDS} seeds, worst relative error {:.2e} ({})", cases.len(), worst.0, worst.1))
}

// ---------------------------------------------------------------------------
// 2, 3

fn dtw_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs = 250;
    let mut worst: f64 = 0.0;
    for k in 0..pairs {
        let dim = rng.gen_range(1..=3);
        let (n, m) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let a = random_sequence(&mut rng, "a", n, dim);
        let b = random_sequence(&mut rng, "b", m, dim);

        let full = dtw(&a, &b).map_err(e2s)?;
        let want = dtw_exhaustive(&a, &b);
        worst = worst.max((full.cost - want).abs());
        ensure((full.cost - want).abs() <= 1e-9, || format!("pair {k}: dtw {} vs oracle {want}", full.cost))?;
        let on_path = path_cost(&a, &b, &full.path, false).ok_or(format!("pair {k}: invalid dtw path"))?;
        ensure((on_path - full.cost).abs() <= 1e-9, || format!("pair {k}: dtw path sums to {on_path}"))?;

        let sub = subsequence_dtw(&a, &b).map_err(e2s)?;
        let want = subsequence_exhaustive(&a, &b);
        worst = worst.max((sub.cost - want).abs());
        ensure((sub.cost - want).abs() <= 1e-9, || format!("pair {k}: subsequence {} vs oracle {want}", sub.cost))?;
        let on_path = path_cost(&a, &b, &sub.path, true).ok_or(format!("pair {k}: invalid subsequence path"))?;
        ensure((on_path - sub.cost).abs() <= 1e-9, || format!("pair {k}: subsequence path sums to {on_path}"))?;
    }
    Ok(format!("{pairs} pairs, max |error| {worst:.1e}"))
}

fn reversal_invariance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs = 200;
    let mut worst: f64 = 0.0;
    for k in 0..pairs {
        let dim = rng.gen_range(1..=4);
        let (n, m) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let a = random_sequence(&mut rng, "a", n, dim);
        let b = random_sequence(&mut rng, "b", m, dim);
        let both = bidtw(&a, &b, BidtwMode::BothReversed, Scope::Full).map_err(e2s)?;
        let plain = dtw(&a, &b).map_err(e2s)?.cost;
        let reversed_only = dtw(&a.reversed(), &b.reversed()).map_err(e2s)?.cost;
        worst = worst.max((both - plain).abs()).max((reversed_only - plain).abs());
        ensure((both - plain).abs() <= 1e-9 && (reversed_only - plain).abs() <= 1e-9, || {
            format!("pair {k}: both-reversed {both}, reversed pair {reversed_only}, forward {plain}")
        })?;
    }
    Ok(format!("{pairs} pairs, max |error| {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4

fn ap_oracle() -> Verdict {
    let worked = [(vec![1, 3], 2, 0.8333), (vec![1, 2], 3, 0.6667)];
    for (ranks, n, want) in worked {
        let ap = average_precision(&ranks, n).map_err(e2s)?;
        ensure((ap - want).abs() < 5e-5, || format!("ranks {ranks:?} of {n}: {ap} vs {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sets = 1000;
    for k in 0..sets {
        let n = rng.gen_range(1..=12);
        let count = rng.gen_range(1..=n);
        let max = rng.gen_range(count..=40);
        let ranks = random_ranks(&mut rng, count, max);
        let ap = average_precision(&ranks, n).map_err(e2s)?;
        let want = ap_by_walking(&ranks, n);
        ensure(ap == want, || format!("set {k} {ranks:?} of {n}: {ap} vs oracle {want}"))?;
    }
    Ok(format!("worked values 0.8333 and 0.6667, {sets} random sets bit-exact"))
}

// ---------------------------------------------------------------------------
// 5, 6, 7

/// Desk-scale runs feed raw pixel values to the model.
fn identity() -> Standardizer {
    Standardizer::identity(3)
}

const CLIP: usize = 4;
const QUERY_SEED: u64 = 99;

fn by_class_map(model: &Autoencoder, videos: &[DatasetVideo], crop: &CropSpec, n: usize, modes: &[BidtwMode]) -> Result<Vec<f64>, String> {
    let st = identity();
    let index = build_index(model, &st, videos, CLIP, CLIP).map_err(e2s)?;
    let queries = make_queries(model, &st, videos, crop, n, CLIP, QUERY_SEED).map_err(e2s)?;
    modes
        .iter()
        .map(|&mode| {
            let cfg = DtwConfig { mode, scope: Scope::Subsequence };
            Ok(evaluate(&queries, &index, Protocol::ByClass, cfg).map_err(e2s)?.map())
        })
        .collect()
}

fn plain_crop() -> CropSpec {
    CropSpec { runs: 2, run_frames: 8, max_gap: 4, reversal: Reversal::None, reverse_fraction: 0.0 }
}

struct TrendRun {
    untrained: f64,
    ae_only: f64,
    ae_triplet: f64,
    full: f64,
}

fn trend_run() -> Result<TrendRun, String> {
    let data = generate(&SynthSpec::default_set(7)).map_err(e2s)?;
    let videos = DatasetVideo::from_synth(&data);
    let (unlabeled, labeled) = training_clips(&videos, &identity(), CLIP, CLIP).map_err(e2s)?;
    let mut model = Autoencoder::new(ModelConfig::desk(ModelVariant::M1), 1).map_err(e2s)?;
    let score = |m: &Autoencoder| -> Result<f64, String> {
        Ok(by_class_map(m, &videos, &plain_crop(), 30, &[BidtwMode::Forward])?[0])
    };
    let untrained = score(&model)?;
    // lr 3e-4: at the default 1e-3 the triplet stage collapses on this set.
    let cfg = TrainConfig {
        lr: 3e-4,
        pretrain_epochs: 5,
        triplet_epochs: 15,
        finetune_epochs: 5,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut snapshots = Vec::new();
    train_schedule(&mut model, &unlabeled, &labeled, &cfg, &mut |stage, m| {
        snapshots.push((stage, m.clone()));
        Ok(())
    })
    .map_err(e2s)?;
    let at = |stage| snapshots.iter().find(|(s, _)| *s == stage).map(|(_, m)| m).ok_or(format!("no {stage} snapshot"));
    Ok(TrendRun {
        untrained,
        ae_only: score(at(Stage::Pretrain)?)?,
        ae_triplet: score(at(Stage::Triplet)?)?,
        full: score(&model)?,
    })
}

fn end_to_end(run: &Result<TrendRun, String>) -> Verdict {
    let r = run.as_ref().map_err(|e| e.clone())?;
    let line = format!("full schedule {:.3}, untrained {:.3}, gain {:.3}", r.full, r.untrained, r.full - r.untrained);
    ensure(r.full >= 0.80 && r.full - r.untrained >= 0.20, || line.clone())?;
    Ok(line)
}

fn triplet_ablation(run: &Result<TrendRun, String>) -> Verdict {
    let r = run.as_ref().map_err(|e| e.clone())?;
    let line = format!("AE-only {:.3} < AE+triplet {:.3}", r.ae_only, r.ae_triplet);
    ensure(r.ae_only < r.ae_triplet, || line.clone())?;
    Ok(line)
}

fn bidtw_ablation() -> Verdict {
    let data = generate(&SynthSpec::reversal_set(8)).map_err(e2s)?;
    let videos = DatasetVideo::from_synth(&data);
    let (unlabeled, labeled) = training_clips(&videos, &identity(), CLIP, CLIP).map_err(e2s)?;
    let mut model = Autoencoder::new(ModelConfig::desk(ModelVariant::M1), 1).map_err(e2s)?;
    let cfg = TrainConfig { pretrain_epochs: 8, triplet: false, challenging: false, seed: 3, ..TrainConfig::default() };
    train_schedule(&mut model, &unlabeled, &labeled, &cfg, &mut |_, _| Ok(())).map_err(e2s)?;
    let crop = CropSpec { reversal: Reversal::ClipOrder, reverse_fraction: 1.0, ..plain_crop() };
    let maps = by_class_map(&model, &videos, &crop, 90, &[BidtwMode::Forward, BidtwMode::OneReversed])?;
    let line = format!("forward {:.3}, one-reversed {:.3}, margin {:.3}", maps[0], maps[1], maps[1] - maps[0]);
    ensure(maps[1] - maps[0] >= 0.05, || line.clone())?;
    Ok(line)
}

// ---------------------------------------------------------------------------
// 8

fn tiny_config(variant: ModelVariant, rng: &mut impl Rng) -> ModelConfig {
    let mut cfg = ModelConfig::desk(variant);
    if variant.is_3d() && rng.gen_bool(0.5) {
        cfg.spatial_rank = 3;
    }
    cfg.frame_size = 8;
    cfg.clip_len = rng.gen_range(1..=3);
    cfg.hidden = (0..3).map(|_| rng.gen_range(1..=3)).collect();
    cfg.proj_channels = rng.gen_range(1..=3);
    cfg.embedding_dim = rng.gen_range(2..=8);
    if cfg.transformer.is_some() {
        cfg.transformer = Some(TransformerConfig { layers: rng.gen_range(1..=2), heads: 2, hidden: 4, intermediate: 6 });
    }
    cfg
}

fn random_clip(cfg: &ModelConfig, rng: &mut impl Rng) -> ClipTensor {
    let shape = cfg.clip_shape();
    let n = shape.iter().product();
    ClipTensor::new(Tensor::new(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()).unwrap()
}

fn mining_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rounds = 50;
    let mut sizes = Vec::new();
    for k in 0..rounds {
        let mut cfg = tiny_config(ModelVariant::M1, &mut rng);
        cfg.clip_len = 2;
        let model = Autoencoder::encoder_only(cfg.clone(), rng.gen()).map_err(e2s)?;
        let classes = rng.gen_range(2..=4);
        let n_clips = rng.gen_range(classes * 2..=14);
        let labels: Vec<usize> = (0..n_clips).map(|i| if i < classes * 2 { i % classes } else { rng.gen_range(0..classes) }).collect();
        let clips: Vec<ClipTensor> = (0..n_clips).map(|_| random_clip(&cfg, &mut rng)).collect();
        let triplets = sample_triplets(&labels, rng.gen_range(1..=3), rng.gen()).map_err(e2s)?;
        let losses = triplet_losses(&model, &clips, &triplets, rng.gen_range(0.1..2.0)).map_err(e2s)?;
        let (hard, rest) = mine_challenging(&triplets, &losses, 0.2).map_err(e2s)?;

        let n = triplets.len();
        let want = (n + 4) / 5;
        sizes.push(n);
        ensure(hard.len() == want && hard_count(n, 0.2) == want, || format!("round {k}: {} hard of {n}, want {want}", hard.len()))?;
        ensure(hard.len() + rest.len() == n, || format!("round {k}: {} + {} != {n}", hard.len(), rest.len()))?;
        let loss_of = |t: &vidseq::train::Triplet| losses[triplets.iter().position(|x| x == t).unwrap()];
        let min_hard = hard.iter().map(loss_of).fold(f64::INFINITY, f64::min);
        let max_rest = rest.iter().map(loss_of).fold(f64::NEG_INFINITY, f64::max);
        ensure(min_hard >= max_rest, || format!("round {k}: min hard {min_hard} < max rest {max_rest}"))?;

        let mut sorted = losses.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut got: Vec<f64> = hard.iter().map(loss_of).collect();
        got.sort_by(|a, b| b.total_cmp(a));
        ensure(got == sorted[..want], || format!("round {k}: hard losses {got:?} vs top {:?}", &sorted[..want]))?;
        let mut all: Vec<_> = hard.iter().chain(&rest).map(|t| (t.anchor, t.positive, t.negative)).collect();
        let mut orig: Vec<_> = triplets.iter().map(|t| (t.anchor, t.positive, t.negative)).collect();
        all.sort_unstable();
        orig.sort_unstable();
        ensure(all == orig, || format!("round {k}: hard and rest do not partition the input"))?;
    }
    Ok(format!("{rounds} models, {}..={} triplets each", sizes.iter().min().unwrap(), sizes.iter().max().unwrap()))
}

// ---------------------------------------------------------------------------
// 9

fn random_index(rng: &mut impl Rng) -> Index {
    let dim = rng.gen_range(1..=8);
    let records = (0..rng.gen_range(0..=6))
        .map(|i| {
            let len = rng.gen_range(1..=5);
            let id = format!("video-{i}-{}", rng.gen_range(0..1000));
            VideoRecord {
                class_label: rng.gen_bool(0.7).then(|| format!("class{}", rng.gen_range(0..3))),
                embeddings: random_sequence(rng, &id, len, dim),
            }
        })
        .collect();
    Index::new(dim, records).unwrap()
}

fn error_kind<T>(r: vidseq::Result<T>) -> String {
    match r {
        Ok(_) => "ok".into(),
        Err(e) => format!("{e:?}").split([' ', '(', '{']).next().unwrap_or_default().to_string(),
    }
}

fn persistence() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let instances = 100;
    for k in 0..instances {
        let index = random_index(&mut rng);
        let (p1, p2) = (dir.path().join("a.vseq"), dir.path().join("b.vseq"));
        index_write(&p1, &index).map_err(e2s)?;
        index_write(&p2, &index_read(&p1).map_err(e2s)?).map_err(e2s)?;
        let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        ensure(b1 == b2, || format!("index {k}: second write differs"))?;
        ensure(index.is_empty() == (b1.len() == vidseq::store::index::HEADER_LEN), || format!("index {k}: header length"))?;

        let variant = ModelVariant::ALL[rng.gen_range(0..ModelVariant::ALL.len())];
        let cfg = tiny_config(variant, &mut rng);
        let model = Autoencoder::new(cfg, rng.gen()).map_err(e2s)?;
        let meta: Vec<(String, String)> = (0..rng.gen_range(0..3)).map(|i| (format!("key{i}"), format!("{}", rng.gen::<f64>()))).collect();
        let (c1, c2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        model.save(&c1, &meta).map_err(e2s)?;
        let (back, meta_back) = Autoencoder::load(&c1, true).map_err(e2s)?;
        ensure(meta_back == meta, || format!("checkpoint {k}: meta {meta_back:?} vs {meta:?}"))?;
        back.save(&c2, &meta_back).map_err(e2s)?;
        ensure(std::fs::read(&c1).unwrap() == std::fs::read(&c2).unwrap(), || format!("checkpoint {k}: second write differs"))?;
    }

    // Corrupt files, each with its own error kind.
    let mut index = random_index(&mut rng);
    while index.is_empty() {
        index = random_index(&mut rng);
    }
    let bytes = index.to_bytes().map_err(e2s)?;
    let model = Autoencoder::new(tiny_config(ModelVariant::M2, &mut rng), 1).map_err(e2s)?;
    let ckpt = model.to_checkpoint(&[]).to_bytes().map_err(e2s)?;
    let mut failures = Vec::new();
    let mut expect = |what: &str, got: String, want: &str| {
        if got != want {
            failures.push(format!("{what}: {got}, want {want}"));
        }
    };
    for (name, good, magic_len) in [("index", &bytes, 5usize), ("checkpoint", &ckpt, 6)] {
        let parse = |b: &[u8]| -> String {
            if name == "index" { error_kind(Index::from_bytes(b)) } else { error_kind(Checkpoint::from_bytes(b)) }
        };
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        expect(&format!("{name} magic"), parse(&bad), "BadMagic");
        let mut bad = good.clone();
        bad[magic_len..magic_len + 4].copy_from_slice(&7u32.to_le_bytes());
        expect(&format!("{name} version"), parse(&bad), "UnsupportedVersion");
        for cut in 0..good.len() {
            let got = parse(&good[..cut]);
            if got != "Truncated" {
                expect(&format!("{name} cut at {cut}"), got, "Truncated");
                break;
            }
        }
    }
    // Dimension mismatches: mixed record widths, and a checkpoint whose
    // tensors do not fit the model its header describes.
    let mixed = vec![
        VideoRecord { class_label: None, embeddings: random_sequence(&mut rng, "a", 2, 3) },
        VideoRecord { class_label: None, embeddings: random_sequence(&mut rng, "b", 2, 4) },
    ];
    expect("mixed index dims", error_kind(Index::new(3, mixed)), "DimensionMismatch");
    let mut ck = model.to_checkpoint(&[]);
    let (_, t) = &mut ck.params[0];
    let mut shape = t.shape().to_vec();
    shape[0] += 1;
    *t = Tensor::zeros(&shape);
    let kind = match Autoencoder::from_checkpoint(&ck, true) {
        Ok(_) => "ok".into(),
        Err(e) => e.kind().to_string(),
    };
    expect("checkpoint tensor shape", kind, "dimension-mismatch");
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!("{instances} indexes and {instances} checkpoints byte-identical; magic, version, truncation and dimension errors distinct"))
}

// ---------------------------------------------------------------------------
// 10

fn full_scale_shapes() -> Verdict {
    let cfg = ModelConfig::full(ModelVariant::M3);
    let model = Autoencoder::encoder_only(cfg.clone(), 0).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    ensure(cfg.clip_shape() == [3, 256, 256, 3], || format!("clip shape {:?}", cfg.clip_shape()))?;
    let clip = random_clip(&cfg, &mut rng);
    let (emb, trace) = model.encode_traced(&clip).map_err(e2s)?;
    let want: Vec<(&str, Vec<usize>)> = vec![
        ("block1.residual", vec![256, 256, 96]),
        ("block1.pooled", vec![128, 128, 16]),
        ("block2.residual", vec![128, 128, 96]),
        ("block2.pooled", vec![64, 64, 16]),
        ("block3.residual", vec![64, 64, 96]),
        ("block3.pooled", vec![32, 32, 16]),
        ("embedding", vec![4000]),
    ];
    for (name, shape) in &want {
        let got = trace.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());
        ensure(got.as_ref() == Some(shape), || format!("{name}: {got:?}, want {shape:?}"))?;
    }
    ensure(emb.len() == 4000, || format!("embedding length {}", emb.len()))?;
    let chain: Vec<String> = want.iter().map(|(_, s)| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")).collect();
    Ok(chain.join(" -> "))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let only: Option<Vec<usize>> =
        std::env::var("VIDSEQ_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let mut failed = 0;
    let mut report = |n: usize, name: &str, budget: Duration, elapsed: Duration, verdict: Verdict| {
        let (ok, detail) = match verdict {
            Ok(d) if elapsed <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} #{n} {name} [{:.1}s / {}s]: {detail}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    };
    let timed = |f: &dyn Fn() -> Verdict| {
        let t = Instant::now();
        let v = f();
        (t.elapsed(), v)
    };
    let secs = Duration::from_secs;

    if wanted(1) {
        let (t, v) = timed(&gradient_integrity);
        report(1, "gradient integrity", secs(120), t, v);
    }
    if wanted(2) {
        let (t, v) = timed(&dtw_oracle);
        report(2, "DTW oracle equivalence", secs(30), t, v);
    }
    if wanted(3) {
        let (t, v) = timed(&reversal_invariance);
        report(3, "reversal invariance of full alignment", secs(10), t, v);
    }
    if wanted(4) {
        let (t, v) = timed(&ap_oracle);
        report(4, "AP oracle", secs(5), t, v);
    }
    if wanted(5) || wanted(6) {
        let start = Instant::now();
        let run = trend_run();
        let t = start.elapsed();
        // Both criteria share one training run and one ten-minute budget.
        if wanted(5) {
            report(5, "end-to-end trend", secs(600), t, end_to_end(&run));
        }
        if wanted(6) {
            report(6, "triplet-loss ablation", secs(600), t, triplet_ablation(&run));
        }
    }
    if wanted(7) {
        let (t, v) = timed(&bidtw_ablation);
        report(7, "Bi-DTW ablation", secs(180), t, v);
    }
    if wanted(8) {
        let (t, v) = timed(&mining_contract);
        report(8, "mining contract", secs(30), t, v);
    }
    if wanted(9) {
        let (t, v) = timed(&persistence);
        report(9, "persistence", secs(10), t, v);
    }
    if wanted(10) {
        let (t, v) = timed(&full_scale_shapes);
        report(10, "full-scale shape conformance", secs(60), t, v);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    }
}
