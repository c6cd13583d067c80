//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the verdict lines are always printed. The
//! process fails when a gating criterion fails. The synthetic efficacy
//! criterion only gates when `SHIPREID_STRICT_EFFICACY=1` is set.

mod common;

use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use shipreid::backbone::{Model, ModelConfig};
use shipreid::data::{generate_synthetic, plan_batches, write_dataset, SynthConfig};
use shipreid::dfl::{FusionMode, HeadConfig};
use shipreid::data::{Manifest, Modality, Role, SampleRecord, Split};
use shipreid::eval::{average_precision, cross_modal_map, evaluate_protocol, EmbeddingSet, Protocol, ProtocolReport};
use shipreid::trainer::{evaluate, run_training, Checkpoint, TrainConfig, TrainData};

struct Verdict {
    name: &'static str,
    pass: bool,
    gating: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(name: &'static str, gating: bool, f: impl FnOnce() -> Result<String, String>) -> Verdict {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed();
    let (pass, detail) = match result {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let v = Verdict {
        name,
        pass,
        gating,
        detail,
        elapsed,
    };
    println!(
        "{} {:<22} ({:.1}s) {}",
        if v.pass { "PASS" } else { "FAIL" },
        v.name,
        v.elapsed.as_secs_f64(),
        v.detail
    );
    v
}

fn gradient_suite() -> Result<String, String> {
    let start = Instant::now();
    let cfg = two_layer_desk(2);
    let mut worst = [0.0f64; 5];
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..20 {
        for (slot, which) in Component::ALL.into_iter().enumerate() {
            let g = gradient_check(which, &cfg, 1000 + seed, 2);
            worst[slot] = worst[slot].max(g.worst);
            checked += g.checked;
            skipped += g.skipped;
        }
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "max rel err struct {:.1e} orth {:.1e} ce {:.1e} triplet {:.1e} joint {:.1e}; {checked} coordinates, {skipped} skipped at kinks; {secs:.0}s",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    if max < 1e-3 && secs < 300.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scl_suite() -> Result<String, String> {
    for seed in 0..1000 {
        scl_trial(50_000 + seed)?;
    }
    Ok("1000 trials: shift, normalisation, affine and zero-loss invariants hold".into())
}

fn metric_oracle() -> Result<String, String> {
    let mut instances = 0;
    for seed in 0..100 {
        instances += compare_with_oracle(7_000 + seed)?;
    }
    let ap = average_precision(&[true, false, true], 2).unwrap();
    if (ap - 0.83333).abs() > 1e-5 {
        return Err(format!("AP([1,0,1], G=2) = {ap}"));
    }
    // Query 0 ranks its match second (AP 1/2), query 1 ranks both first (AP 1).
    let rec = |n: usize, id: usize, role: Role| SampleRecord {
        image_ref: format!("img{n}"),
        identity: id,
        modality: Modality::Optical,
        split: Split::Test,
        role,
    };
    let manifest = Manifest::new(vec![
        rec(0, 0, Role::Query),
        rec(1, 1, Role::Query),
        rec(2, 1, Role::Gallery),
        rec(3, 1, Role::Gallery),
        rec(4, 0, Role::Gallery),
    ]);
    let emb = EmbeddingSet::from_rows(2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.8, 0.6, 1.0, 0.0]).unwrap();
    let rep = evaluate_protocol(&emb, &manifest, &Protocol::All.spec()).map_err(|e| e.to_string())?;
    let aps: Vec<f64> = rep.per_query.iter().map(|p| p.1).collect();
    if aps != [0.5, 1.0] || (rep.map - 0.75).abs() > 1e-12 {
        return Err(format!("mAP averaging gave {} from {aps:?}", rep.map));
    }
    Ok(format!(
        "100 random instances ({instances} protocol evaluations) within 1e-9; AP([1,0,1],2) = {ap:.5}"
    ))
}

fn protocol_fidelity() -> Result<String, String> {
    let got = stub_counts();
    let want = [
        (Protocol::All, 176, 593),
        (Protocol::Opt2Sar, 65, 190),
        (Protocol::Sar2Opt, 67, 403),
    ];
    let detail = got
        .iter()
        .map(|(p, q, g)| format!("{p} {q}/{g}"))
        .collect::<Vec<_>>()
        .join(", ");
    if got == want {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sampler_property(synth: &shipreid::data::SyntheticDataset) -> Result<String, String> {
    let mut r = rng(11);
    let mut batches = 0;
    for epoch in 0..50 {
        let plan = plan_batches(&synth.manifest, 4, 4, &mut r).map_err(|e| e.to_string())?;
        check_batches(&synth.manifest, &plan.batches, 4, 4).map_err(|e| format!("epoch {epoch}: {e}"))?;
        batches += plan.batches.len();
    }
    Ok(format!("50 epochs, {batches} batches, 0 violations"))
}

struct Run {
    reports: Vec<ProtocolReport>,
    checkpoint: Vec<u8>,
    first_loss: f64,
    last_loss: f64,
}

fn train_eval(cfg: &TrainConfig, data: &TrainData) -> Result<Run, String> {
    let out = run_training(cfg, data, None).map_err(|e| e.to_string())?;
    let reports = evaluate(&out.model, data, &Protocol::ALL).map_err(|e| e.to_string())?;
    Ok(Run {
        reports,
        checkpoint: out.checkpoint.to_bytes(),
        first_loss: out.epoch_loss[0],
        last_loss: *out.epoch_loss.last().unwrap(),
    })
}

fn efficacy(data: &TrainData, full_seed0: &mut Option<Run>) -> Result<String, String> {
    let start = Instant::now();
    let base = TrainConfig::default();
    let variant = |scl_on, dfl_on, fusion| TrainConfig {
        scl_on,
        dfl_on,
        fusion,
        ..base.clone()
    };
    let mut full = Vec::new();
    let mut baseline = Vec::new();
    let mut shared = Vec::new();
    let mut descended = true;
    for seed in 0..3u64 {
        let with_seed = |c: TrainConfig| TrainConfig { seed, ..c };
        let f = train_eval(&with_seed(variant(true, true, FusionMode::Additive)), data)?;
        let b = train_eval(&with_seed(variant(false, false, FusionMode::Additive)), data)?;
        let s = train_eval(&with_seed(variant(true, true, FusionMode::SharedOnly)), data)?;
        for run in [&f, &b, &s] {
            descended &= run.last_loss < run.first_loss;
        }
        full.push(cross_modal_map(&f.reports).unwrap());
        baseline.push(cross_modal_map(&b.reports).unwrap());
        shared.push(cross_modal_map(&s.reports).unwrap());
        if seed == 0 {
            *full_seed0 = Some(f);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let gains = (0..3).filter(|&i| full[i] - baseline[i] >= 0.02).count();
    let fusion_wins = (0..3).filter(|&i| full[i] >= shared[i]).count();
    let pct = |v: &[f64]| v.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join("/");
    let detail = format!(
        "cross-modal mAP full {} baseline {} shared_only {}; +2pt gain in {gains}/3, additive >= shared_only in {fusion_wins}/3; loss descended: {descended}; {:.0}s",
        pct(&full),
        pct(&baseline),
        pct(&shared),
        secs
    );
    if gains >= 2 && fusion_wins >= 2 && descended && secs < 45.0 * 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism(data: &TrainData, reference: Option<&Run>) -> Result<String, String> {
    let cfg = TrainConfig::default();
    let a = match reference {
        Some(r) => r,
        None => &train_eval(&cfg, data)?,
    };
    let b = train_eval(&cfg, data)?;
    if a.checkpoint != b.checkpoint {
        return Err("checkpoints differ".into());
    }
    if a.reports != b.reports {
        return Err("metrics differ".into());
    }
    Ok(format!("two 30-epoch runs: {} checkpoint bytes identical, metrics identical", a.checkpoint.len()))
}

fn plumbing(synth: &shipreid::data::SyntheticDataset, data: &TrainData) -> Result<String, String> {
    let err = |e: shipreid::Error| e.to_string();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        ..TrainConfig::default()
    };
    let out = run_training(&cfg, data, None).map_err(err)?;
    let path = dir.path().join("ck.srck");
    out.checkpoint.save(&path).map_err(err)?;
    let loaded = Checkpoint::load(&path).map_err(err)?;
    let resaved = dir.path().join("again.srck");
    loaded.save(&resaved).map_err(err)?;
    if std::fs::read(&path).ok() != std::fs::read(&resaved).ok() {
        return Err("checkpoint changed across save/load".into());
    }

    // CLI metrics against library metrics on the same checkpoint and data.
    let data_dir = dir.path().join("data");
    std::fs::create_dir_all(&data_dir).map_err(|e| e.to_string())?;
    write_dataset(&data_dir, synth).map_err(err)?;
    let eval_dir = dir.path().join("eval");
    let status = Command::new(env!("CARGO_BIN_EXE_shipreid"))
        .args(["eval", "--checkpoint"])
        .arg(&path)
        .arg("--data")
        .arg(&data_dir)
        .arg("--out")
        .arg(&eval_dir)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("eval failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let disk = TrainData::load(&data_dir, 64, 32).map_err(err)?;
    let api = evaluate(&loaded.model().map_err(err)?, &disk, &Protocol::ALL).map_err(err)?;
    let mut parity = 0.0f64;
    for r in &api {
        let m = &metrics[r.protocol.to_string()];
        for (key, v) in [("mAP", r.map), ("rank1", r.rank1), ("rank5", r.rank5), ("rank10", r.rank10)] {
            let cli = m[key].as_f64().ok_or(format!("missing {key}"))?;
            parity = parity.max((cli - v).abs());
        }
    }
    if parity > 1e-12 {
        return Err(format!("CLI/API metric gap {parity:e}"));
    }

    // Fusion is parameter-free: only the two projection heads are added.
    let desk = ModelConfig::desk();
    let count = |dfl_on, fusion| {
        Model::<f32>::new(desk.clone(), HeadConfig { dfl_on, fusion }, 0)
            .map(|m| m.params.numel())
            .map_err(err)
    };
    let without = count(false, FusionMode::Additive)?;
    let with = count(true, FusionMode::Additive)?;
    let d = desk.dim;
    if with - without != 2 * (d * d + d) || with != closed_form_count(&desk, true, d) {
        return Err(format!("parameter counts {without} -> {with}"));
    }
    Ok(format!(
        "checkpoint round trip identical; CLI/API gap {parity:.0e}; parameters {without} -> {with} (+{} for two heads)",
        with - without
    ))
}

fn main() {
    // `cargo test -- <filter>` passes arguments; this binary runs everything
    // unless asked to list tests.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let synth = generate_synthetic(&SynthConfig::default()).expect("synthetic data");
    let data = TrainData::from_synthetic(&synth);
    let strict = std::env::var("SHIPREID_STRICT_EFFICACY").is_ok_and(|v| v == "1");
    let mut full_seed0 = None;
    let verdicts = [timed("gradient suite", true, gradient_suite),
        timed("scl invariance", true, scl_suite),
        timed("metric oracle", true, metric_oracle),
        timed("protocol fidelity", true, protocol_fidelity),
        timed("sampler property", true, || sampler_property(&synth)),
        timed("synthetic efficacy", strict, || efficacy(&data, &mut full_seed0)),
        timed("determinism", true, || determinism(&data, full_seed0.as_ref())),
        timed("plumbing", true, || plumbing(&synth, &data))];
    let failed: Vec<&Verdict> = verdicts.iter().filter(|v| !v.pass).collect();
    let gating: Vec<&&Verdict> = failed.iter().filter(|v| v.gating).collect();
    println!(
        "acceptance: {} of {} criteria pass",
        verdicts.len() - failed.len(),
        verdicts.len()
    );
    for v in failed.iter().filter(|v| !v.gating) {
        println!("note: `{}` failed but does not gate this run", v.name);
    }
    if !gating.is_empty() {
        std::process::exit(1);
    }
}
