//! Shared oracles for the integration suites.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shipreid::backbone::{Model, ModelConfig};
use shipreid::data::{Manifest, Modality, Role, SampleRecord, Split};
use shipreid::dfl::{orth_loss, HeadConfig};
use shipreid::eval::{evaluate_protocol, EmbeddingSet, Protocol};
use shipreid::losses::{smoothed_cross_entropy, weighted_triplet, LossWeights};
use shipreid::scl::{build_prototypes, describe, struct_loss};
use shipreid::tensor::{BoundParams, Tape, Tensor, Var};
use shipreid::trainer::joint_objective;

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` at the given coordinates.
pub fn central_diff(x: &[f64], coords: &[usize], h: f64, f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            buf[i] = x[i] + h;
            let plus = f(&buf);
            buf[i] = x[i] - h;
            let minus = f(&buf);
            buf[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Relative error with a small absolute floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

pub fn uniform(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Desk geometry with only two blocks and the probe after the first.
pub fn two_layer_desk(num_identities: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        struct_layer: 1,
        num_identities,
        ..ModelConfig::desk()
    }
}

pub fn tiny_config(num_identities: usize) -> ModelConfig {
    ModelConfig {
        image_h: 24,
        image_w: 12,
        in_channels: 3,
        patch: 4,
        layers: 2,
        dim: 8,
        heads: 2,
        mlp_ratio: 2.0,
        struct_layer: 1,
        num_identities,
    }
}

pub fn random_images(cfg: &ModelConfig, b: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = b * cfg.in_channels * cfg.image_h * cfg.image_w;
    Tensor::new(&[b, cfg.in_channels, cfg.image_h, cfg.image_w], uniform(n, -1.0, 1.0, rng)).unwrap()
}

/// Two identities, each with one optical and one SAR sample.
pub fn micro_batch() -> (Vec<usize>, Vec<Modality>) {
    (
        vec![0, 0, 1, 1],
        vec![Modality::Optical, Modality::Sar, Modality::Optical, Modality::Sar],
    )
}

/// Picks up to `per_tensor` random coordinates of every parameter.
pub fn sample_coords<T: shipreid::tensor::Scalar>(model: &Model<T>, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (slot, p) in model.params.iter().enumerate() {
        let n = p.tensor.numel();
        if n <= per_tensor {
            out.extend((0..n).map(|i| (slot, i)));
        } else {
            for _ in 0..per_tensor {
                out.push((slot, rng.random_range(0..n)));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Gradient checks through the backbone.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Struct,
    Orth,
    CrossEntropy,
    Triplet,
    Joint,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Struct,
        Component::Orth,
        Component::CrossEntropy,
        Component::Triplet,
        Component::Joint,
    ];
}

pub fn component_loss<'t>(
    which: Component,
    model: &Model<f64>,
    p: &BoundParams<'t, f64>,
    images: Var<'t, f64>,
    labels: &[usize],
    modality: &[Modality],
) -> Var<'t, f64> {
    if which == Component::Joint {
        let w = LossWeights::default();
        return joint_objective(model, p, images, labels, modality, &w, true).unwrap().0;
    }
    let out = model.forward(p, images, modality).unwrap();
    match which {
        Component::Struct => {
            let desc = describe(out.grid).unwrap();
            let pairs = build_prototypes(desc.f_hat, labels, modality).unwrap();
            struct_loss(images.tape(), &pairs).unwrap()
        }
        Component::Orth => orth_loss(out.shared.unwrap(), out.specific.unwrap()).unwrap(),
        Component::CrossEntropy => {
            let logits = model.logits(p, out.feature).unwrap();
            smoothed_cross_entropy(logits, labels, 0.1).unwrap()
        }
        Component::Triplet => weighted_triplet(out.feature, labels).unwrap(),
        Component::Joint => unreachable!(),
    }
}

fn component_value(which: Component, model: &Model<f64>, images: &Tensor<f64>, labels: &[usize], modality: &[Modality]) -> f64 {
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    component_loss(which, model, &p, tape.constant(images), labels, modality).item()
}

/// Signs of every `|.|` argument on the path of the loss: the spatial
/// gradients of the structure grid and the shared/specific cosines.
fn kink_signs(model: &Model<f64>, images: &Tensor<f64>, modality: &[Modality]) -> Vec<bool> {
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let out = model.forward(&p, tape.constant(images), modality).unwrap();
    let (gx, gy) = shipreid::scl::spatial_gradients(out.grid).unwrap();
    let mut signs: Vec<bool> = gx.value().iter().chain(gy.value().iter()).map(|v| *v > 0.0).collect();
    if let (Some(sh), Some(sp)) = (out.shared, out.specific) {
        let cos = shipreid::dfl::l2_normalize(sh)
            .unwrap()
            .mul(shipreid::dfl::l2_normalize(sp).unwrap())
            .unwrap()
            .sum_axis(1, false)
            .unwrap();
        signs.extend(cos.value().iter().map(|v| *v > 0.0));
    }
    signs
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates whose stencil straddles a kink of `|.|`.
    pub skipped: usize,
}

/// Compares backprop with central differences (h = 1e-5) at `per_tensor`
/// random coordinates of every parameter.
///
/// The relative error uses `max(|a|, |n|, 1e-6 * max(1, |loss|))` as its
/// denominator, so coordinates with an exactly zero gradient are judged
/// against the rounding noise of the loss. A coordinate is skipped when
/// the +h and -h evaluations see a different sign pattern inside an
/// absolute value, since the loss is not differentiable across that point.
pub fn gradient_check(which: Component, cfg: &ModelConfig, seed: u64, per_tensor: usize) -> GradCheck {
    const H: f64 = 1e-5;
    let mut r = rng(seed);
    let model = Model::<f64>::new(cfg.clone(), HeadConfig::default(), seed).unwrap();
    let images = random_images(cfg, 4, &mut r);
    let (labels, modality) = micro_batch();
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let loss = component_loss(which, &model, &p, tape.constant(&images), &labels, &modality);
    let floor = 1e-6 * loss.item().abs().max(1.0);
    let grads = tape.backward(loss).unwrap();
    let mut probe = model.clone();
    let mut out = GradCheck::default();
    for (slot, i) in sample_coords(&model, per_tensor, &mut r) {
        let analytic = grads.wrt(p.get(slot)).map_or(0.0, |g| g[i]);
        let x = model.params.get(slot).tensor.data().to_vec();
        let mut shifted = |delta: f64| {
            let mut v = x.clone();
            v[i] += delta;
            probe.params.get_mut(slot).tensor.data_mut().copy_from_slice(&v);
            let signs = kink_signs(&probe, &images, &modality);
            (component_value(which, &probe, &images, &labels, &modality), signs)
        };
        let (plus, s_plus) = shifted(H);
        let (minus, s_minus) = shifted(-H);
        probe.params.get_mut(slot).tensor.data_mut().copy_from_slice(&x);
        if s_plus != s_minus {
            out.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * H);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        out.worst = out.worst.max(err);
        out.checked += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Structural-descriptor invariants.

/// Values on a dyadic grid so sums and differences are exact in f64.
pub fn dyadic(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-4096i32..=4096) as f64 / 64.0).collect()
}

fn grads_of(shape: &[usize], values: Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::<f64>::new();
    let g = tape.constant_from(shape, values).unwrap();
    let (gx, gy) = shipreid::scl::spatial_gradients(g).unwrap();
    (gx.value().to_vec(), gy.value().to_vec())
}

fn in_rows(c: usize, values: Vec<f64>) -> Vec<f64> {
    let tape = Tape::<f64>::new();
    let b = values.len() / c;
    let f = tape.constant_from(&[b, c], values).unwrap();
    shipreid::scl::instance_normalize(f, shipreid::scl::IN_EPS).unwrap().value().to_vec()
}

/// One randomised trial of the four descriptor invariants; `Err` describes
/// the first violation.
pub fn scl_trial(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    // Gradients ignore a per-channel constant offset.
    let (b, c) = (r.random_range(1..4usize), r.random_range(2..9usize));
    let (h, w) = (r.random_range(3..9usize), r.random_range(3..9usize));
    let base = dyadic(b * c * h * w, &mut r);
    let offsets = dyadic(b * c, &mut r);
    let shifted: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, v)| v + offsets[i / (h * w)])
        .collect();
    let shape = [b, c, h, w];
    if grads_of(&shape, base) != grads_of(&shape, shifted) {
        return Err(format!("seed {seed}: gradients changed under a constant shift"));
    }

    // Normalised rows have zero mean and unit variance.
    let scale = 10f64.powf(r.random_range(-1.0..2.0));
    let rows: Vec<f64> = (0..b * c).map(|_| r.random_range(-1.0..1.0) * scale).collect();
    let out = in_rows(c, rows.clone());
    for (row_in, row) in rows.chunks(c).zip(out.chunks(c)) {
        let m_in = row_in.iter().sum::<f64>() / c as f64;
        let var_in = row_in.iter().map(|v| (v - m_in).powi(2)).sum::<f64>() / c as f64;
        if var_in < 1e-2 {
            continue;
        }
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        if mean.abs() >= 1e-5 || !(0.95..=1.05).contains(&var) {
            return Err(format!("seed {seed}: normalised row has mean {mean:e}, variance {var}"));
        }
    }

    // Positive affine maps of a row leave the normalised row unchanged.
    // Rows are drawn with variance >= 4 so the epsilon stays negligible at a = 0.1.
    let mut rows = Vec::with_capacity(b * c);
    while rows.len() < b * c {
        let row: Vec<f64> = (0..c).map(|_| r.random_range(-10.0..10.0)).collect();
        let m = row.iter().sum::<f64>() / c as f64;
        if row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64 >= 4.0 {
            rows.extend(row);
        }
    }
    let reference = in_rows(c, rows.clone());
    for a in [0.1, 1.0, 10.0, 100.0] {
        let shift = r.random_range(-50.0..50.0);
        let mapped = in_rows(c, rows.iter().map(|v| a * v + shift).collect());
        let worst = mapped.iter().zip(&reference).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if worst >= 1e-3 {
            return Err(format!("seed {seed}: affine a={a} moved the normalised row by {worst:e}"));
        }
    }

    // Identical optical and SAR descriptors give an exactly zero loss.
    let ids = r.random_range(1..5usize);
    let per = r.random_range(1..4usize);
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut modality = Vec::new();
    for id in 0..ids {
        let desc: Vec<Vec<f64>> = (0..per)
            .map(|_| (0..c).map(|_| r.random_range(-3.0..3.0)).collect())
            .collect();
        for m in [Modality::Optical, Modality::Sar] {
            for d in &desc {
                values.extend_from_slice(d);
                labels.push(id);
                modality.push(m);
            }
        }
    }
    let tape = Tape::<f64>::new();
    let f = tape.constant_from(&[labels.len(), c], values).unwrap();
    let pairs = build_prototypes(f, &labels, &modality).unwrap();
    let loss = struct_loss(&tape, &pairs).unwrap().item();
    if loss != 0.0 {
        return Err(format!("seed {seed}: identical prototypes give loss {loss:e}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Brute-force retrieval oracle.

/// `(mAP, [R1, R5, R10], scored queries)` computed directly from the raw
/// embeddings: cosine similarity, stable descending sort, and AP as the mean
/// of `hits / position` over the relevant positions.
pub fn brute_force_metrics(
    emb: &[Vec<f64>],
    ids: &[usize],
    queries: &[usize],
    gallery: &[usize],
) -> (f64, [f64; 3], usize) {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        dot / na / nb
    };
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let mut aps = Vec::new();
    let mut hits = [0usize; 3];
    for &q in queries {
        let cand: Vec<usize> = gallery.iter().copied().filter(|&g| g != q).collect();
        let qv = unit(&emb[q]);
        let mut scored: Vec<(f64, usize)> = cand.iter().map(|&g| (cos(&qv, &unit(&emb[g])), g)).collect();
        // Insertion sort keeps the earlier gallery entry ahead on ties.
        for i in 1..scored.len() {
            let mut j = i;
            while j > 0 && scored[j].0 > scored[j - 1].0 {
                scored.swap(j, j - 1);
                j -= 1;
            }
        }
        let rel: Vec<bool> = scored.iter().map(|&(_, g)| ids[g] == ids[q]).collect();
        let total = rel.iter().filter(|&&x| x).count();
        if total == 0 {
            continue;
        }
        let mut found = 0;
        let mut precisions = Vec::new();
        for (pos, &is_rel) in rel.iter().enumerate() {
            if is_rel {
                found += 1;
                precisions.push(found as f64 / (pos + 1) as f64);
            }
        }
        aps.push(precisions.iter().sum::<f64>() / total as f64);
        let first = rel.iter().position(|&x| x).unwrap() + 1;
        for (slot, k) in [1, 5, 10].into_iter().enumerate() {
            if first <= k {
                hits[slot] += 1;
            }
        }
    }
    let n = aps.len();
    let frac = |h: usize| h as f64 / n.max(1) as f64;
    (
        aps.iter().sum::<f64>() / n.max(1) as f64,
        [frac(hits[0]), frac(hits[1]), frac(hits[2])],
        n,
    )
}

// ---------------------------------------------------------------------------
// HOSS-style test-set stub.

/// File names of a query/gallery tree with the published test-set sizes:
/// 88 optical and 88 SAR queries, 403 optical and 190 SAR gallery images.
/// 65 optical queries have a SAR match, 67 SAR queries have an optical
/// match, and every query has some match in the combined gallery.
pub fn hoss_stub_files() -> Vec<String> {
    let mut files = Vec::new();
    let mut next = 1000;
    let mut fresh = || {
        next += 1;
        next
    };
    let mut opt_gallery = Vec::new();
    let mut sar_gallery = Vec::new();
    for i in 0..88 {
        let id = fresh();
        files.push(format!("query/{id}_rgb_q{i}.png"));
        if i < 65 {
            sar_gallery.push(id);
        } else {
            opt_gallery.push(id);
        }
    }
    for i in 0..88 {
        let id = fresh();
        files.push(format!("query/{id}_sar_q{i}.png"));
        if i < 67 {
            opt_gallery.push(id);
        } else {
            sar_gallery.push(id);
        }
    }
    while opt_gallery.len() < 403 {
        opt_gallery.push(fresh());
    }
    while sar_gallery.len() < 190 {
        sar_gallery.push(fresh());
    }
    for (j, id) in opt_gallery.iter().enumerate() {
        files.push(format!("gallery/{id}_rgb_g{j}.png"));
    }
    for (j, id) in sar_gallery.iter().enumerate() {
        files.push(format!("gallery/{id}_sar_g{j}.png"));
    }
    files
}

// ---------------------------------------------------------------------------
// Batch layout oracle.

/// Checks one epoch of batches against the P x K, K/2-per-modality layout
/// without using the library's own validator.
pub fn check_batches(manifest: &Manifest, batches: &[Vec<usize>], p: usize, k: usize) -> Result<(), String> {
    use std::collections::BTreeMap;
    for (n, batch) in batches.iter().enumerate() {
        if batch.len() != p * k {
            return Err(format!("batch {n} has {} samples", batch.len()));
        }
        let mut per_id: BTreeMap<usize, [usize; 2]> = BTreeMap::new();
        for &i in batch {
            let r = &manifest.records[i];
            if r.split != Split::Train {
                return Err(format!("batch {n} holds non-train record {i}"));
            }
            per_id.entry(r.identity).or_default()[u8::from(r.modality) as usize] += 1;
        }
        if per_id.len() != p {
            return Err(format!("batch {n} has {} identities", per_id.len()));
        }
        if let Some((id, c)) = per_id.iter().find(|(_, c)| **c != [k / 2, k / 2]) {
            return Err(format!("batch {n}: identity {id} has {c:?} optical/SAR samples"));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Retrieval instances compared against the oracle.

/// A random test manifest whose embeddings repeat rows from a small palette,
/// so exact similarity ties occur.
pub fn random_instance(seed: u64) -> (Manifest, Vec<Vec<f64>>) {
    let mut r = rng(seed);
    let ids = r.random_range(2..8usize);
    let n = r.random_range(4..40usize);
    let dim = r.random_range(1..5usize);
    let palette: Vec<Vec<f64>> = (0..6).map(|_| uniform(dim, -1.0, 1.0, &mut r)).collect();
    let mut records = Vec::new();
    let mut emb = Vec::new();
    for i in 0..n {
        records.push(SampleRecord {
            image_ref: format!("img{i}"),
            identity: r.random_range(0..ids),
            modality: if r.random_bool(0.5) { Modality::Optical } else { Modality::Sar },
            split: Split::Test,
            role: if r.random_bool(0.4) { Role::Query } else { Role::Gallery },
        });
        emb.push(palette[r.random_range(0..palette.len())].clone());
    }
    (Manifest::new(records), emb)
}

pub fn compare_with_oracle(seed: u64) -> Result<usize, String> {
    let (manifest, emb) = random_instance(seed);
    let dim = emb[0].len();
    let set = EmbeddingSet::from_rows(dim, emb.concat()).unwrap();
    let ids: Vec<usize> = manifest.records.iter().map(|r| r.identity).collect();
    let mut checked = 0;
    for protocol in Protocol::ALL {
        let spec = protocol.spec();
        let (q, g) = spec.select(&manifest);
        let (map, ranks, scored) = brute_force_metrics(&emb, &ids, &q, &g);
        match evaluate_protocol(&set, &manifest, &spec) {
            Ok(rep) => {
                let got = [rep.map, rep.rank1, rep.rank5, rep.rank10];
                let want = [map, ranks[0], ranks[1], ranks[2]];
                if rep.num_query != scored || got.iter().zip(&want).any(|(a, b)| (a - b).abs() > 1e-9) {
                    return Err(format!("seed {seed} {protocol}: got {got:?} want {want:?}"));
                }
                checked += 1;
            }
            Err(_) if scored == 0 => {}
            Err(e) => return Err(format!("seed {seed} {protocol}: {e}")),
        }
    }
    Ok(checked)
}

/// `(protocol, scored queries, gallery size)` for the stub tree.
pub fn stub_counts() -> Vec<(Protocol, usize, usize)> {
    let dir = tempfile::tempdir().unwrap();
    for f in hoss_stub_files() {
        let path = dir.path().join(f);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(path, b"").unwrap();
    }
    let manifest = shipreid::data::convert_hoss_tree(dir.path()).unwrap();
    let emb = EmbeddingSet::from_rows(1, vec![1.0; manifest.len()]).unwrap();
    Protocol::ALL
        .iter()
        .map(|p| {
            let r = evaluate_protocol(&emb, &manifest, &p.spec()).unwrap();
            (*p, r.num_query, r.num_gallery)
        })
        .collect()
}

/// Parameter count of a model built from `cfg`, derived from the layer shapes.
pub fn closed_form_count(cfg: &ModelConfig, dfl: bool, feature: usize) -> usize {
    let (c, hid, k) = (cfg.dim, cfg.mlp_hidden(), cfg.num_identities);
    let tokenizer = 2 * (cfg.patch_dim() * c + c);
    let tokens = c + cfg.seq_len() * c;
    let block = 4 * c + (3 * c * c + 3 * c) + (c * c + c) + (c * hid + hid) + (hid * c + c);
    let heads = if dfl { 2 * (c * c + c) } else { 0 };
    tokenizer + tokens + cfg.layers * block + 2 * c + heads + feature + feature * k
}
