//! Retrieval evaluation: cosine ranking, AP/mAP and CMC under the
//! all / optical-to-SAR / SAR-to-optical protocols.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::Serialize;
use serde_json::{json, Value};

use crate::backbone::Model;
use crate::data::{ImageCache, Manifest, Modality, Role};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-major `[n, dim]` l2-normalised embeddings aligned with a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl EmbeddingSet {
    /// Normalises each row to unit length (rows of zero norm stay zero).
    pub fn from_rows(dim: usize, mut rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || !rows.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} values do not form rows of width {dim}",
                rows.len()
            )));
        }
        for row in rows.chunks_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self { dim, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Sub-set of rows, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            dim: self.dim,
            rows: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }
}

/// Embeds every record of `manifest` (whose images sit in `cache`, same order).
pub fn embed_all<T: Scalar>(
    model: &Model<T>,
    manifest: &Manifest,
    cache: &ImageCache,
    batch_size: usize,
) -> Result<EmbeddingSet> {
    let cfg = &model.config;
    if cache.len() != manifest.len() {
        return Err(Error::Dimension(format!(
            "{} cached images for {} records",
            cache.len(),
            manifest.len()
        )));
    }
    if (cache.height, cache.width) != (cfg.image_h, cfg.image_w) {
        return Err(Error::Dimension(format!(
            "images are {}x{} but the model expects {}x{}",
            cache.height, cache.width, cfg.image_h, cfg.image_w
        )));
    }
    let per = cfg.in_channels * cfg.image_h * cfg.image_w;
    let mut rows = Vec::with_capacity(manifest.len() * model.feature_dim());
    let indices: Vec<usize> = (0..manifest.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut pixels = Vec::with_capacity(chunk.len() * per);
        for &i in chunk {
            let img = cache.get(i);
            if img.len() != per {
                return Err(Error::Dimension(format!(
                    "record {} ({}) has {} values, expected {per}",
                    i,
                    manifest.records[i].image_ref,
                    img.len()
                )));
            }
            pixels.extend(img.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let modality: Vec<Modality> = chunk.iter().map(|&i| manifest.records[i].modality).collect();
        let images = Tensor::new(&[chunk.len(), cfg.in_channels, cfg.image_h, cfg.image_w], pixels)?;
        let feats = model.embed(&images, &modality)?;
        rows.extend(feats.data().iter().map(|v| v.to_f64_lossy()));
    }
    EmbeddingSet::from_rows(model.feature_dim(), rows)
}

/// Gallery indices by descending cosine similarity, ties to the lower index.
pub fn rank_gallery(query: &[f64], gallery: &EmbeddingSet) -> Vec<usize> {
    let sims: Vec<f64> = (0..gallery.len())
        .map(|j| gallery.row(j).iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// `sum_n P(n) rel(n) / G`; `None` when `G == 0`.
pub fn average_precision(relevance: &[bool], num_relevant: usize) -> Option<f64> {
    if num_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (n, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (n + 1) as f64;
        }
    }
    Some(sum / num_relevant as f64)
}

/// Fraction of queries whose first correct match (1-based rank) is within each `k`.
pub fn cmc(first_hit_ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    ks.iter()
        .map(|&k| {
            if first_hit_ranks.is_empty() {
                0.0
            } else {
                first_hit_ranks.iter().filter(|&&r| r <= k).count() as f64 / first_hit_ranks.len() as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    All,
    Opt2Sar,
    Sar2Opt,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::All, Protocol::Opt2Sar, Protocol::Sar2Opt];

    pub fn spec(self) -> ProtocolSpec {
        let (query, gallery) = match self {
            Protocol::All => (None, None),
            Protocol::Opt2Sar => (Some(Modality::Optical), Some(Modality::Sar)),
            Protocol::Sar2Opt => (Some(Modality::Sar), Some(Modality::Optical)),
        };
        ProtocolSpec {
            protocol: self,
            query_modality: query,
            gallery_modality: gallery,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::All => "all",
            Protocol::Opt2Sar => "opt2sar",
            Protocol::Sar2Opt => "sar2opt",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Protocol::All),
            "opt2sar" => Ok(Protocol::Opt2Sar),
            "sar2opt" => Ok(Protocol::Sar2Opt),
            other => Err(Error::Usage(format!(
                "unknown protocol `{other}` (expected all, opt2sar or sar2opt)"
            ))),
        }
    }
}

/// Query and gallery filters: role plus an optional modality restriction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolSpec {
    pub protocol: Protocol,
    pub query_modality: Option<Modality>,
    pub gallery_modality: Option<Modality>,
}

impl ProtocolSpec {
    /// Record indices of the query and gallery sets.
    pub fn select(&self, manifest: &Manifest) -> (Vec<usize>, Vec<usize>) {
        let pick = |role: Role, m: Option<Modality>| -> Vec<usize> {
            manifest
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.role == role && m.is_none_or(|m| r.modality == m))
                .map(|(i, _)| i)
                .collect()
        };
        (
            pick(Role::Query, self.query_modality),
            pick(Role::Gallery, self.gallery_modality),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    /// Queries that were scored (those with at least one true match).
    pub num_query: usize,
    pub num_gallery: usize,
    /// Query records skipped because the gallery holds no match for them.
    #[serde(skip)]
    pub skipped: Vec<usize>,
    /// `(record index, AP)` of every scored query.
    #[serde(skip)]
    pub per_query: Vec<(usize, f64)>,
}

/// Ranks every query of the protocol against its gallery.
pub fn evaluate_protocol(emb: &EmbeddingSet, manifest: &Manifest, spec: &ProtocolSpec) -> Result<ProtocolReport> {
    if emb.len() != manifest.len() {
        return Err(Error::Dimension(format!(
            "{} embeddings for {} records",
            emb.len(),
            manifest.len()
        )));
    }
    let (queries, gallery) = spec.select(manifest);
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Protocol(format!(
            "protocol {} has {} queries and {} gallery records",
            spec.protocol,
            queries.len(),
            gallery.len()
        )));
    }
    let mut per_query = Vec::with_capacity(queries.len());
    let mut first_hits = Vec::with_capacity(queries.len());
    let mut skipped = Vec::new();
    for &q in &queries {
        // A record is never its own candidate.
        let cand: Vec<usize> = gallery.iter().copied().filter(|&g| g != q).collect();
        let id = manifest.records[q].identity;
        let num_relevant = cand.iter().filter(|&&g| manifest.records[g].identity == id).count();
        let order = rank_gallery(emb.row(q), &emb.select(&cand));
        let relevance: Vec<bool> = order
            .iter()
            .map(|&j| manifest.records[cand[j]].identity == id)
            .collect();
        match average_precision(&relevance, num_relevant) {
            Some(ap) => {
                per_query.push((q, ap));
                first_hits.push(relevance.iter().position(|&r| r).expect("has a match") + 1);
            }
            None => skipped.push(q),
        }
    }
    if !skipped.is_empty() {
        warn!(
            "protocol {}: {} queries have no true match in the gallery and are skipped",
            spec.protocol,
            skipped.len()
        );
    }
    if per_query.is_empty() {
        return Err(Error::Protocol(format!(
            "protocol {}: no query has a match in the gallery",
            spec.protocol
        )));
    }
    let map = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    let ranks = cmc(&first_hits, &[1, 5, 10]);
    Ok(ProtocolReport {
        protocol: spec.protocol,
        map,
        rank1: ranks[0],
        rank5: ranks[1],
        rank10: ranks[2],
        num_query: per_query.len(),
        num_gallery: gallery.len(),
        skipped,
        per_query,
    })
}

/// `{protocol: {mAP, rank1, rank5, rank10, num_query, num_gallery}}`.
pub fn metrics_json(reports: &[ProtocolReport]) -> Value {
    let mut obj = serde_json::Map::new();
    for r in reports {
        obj.insert(
            r.protocol.to_string(),
            json!({
                "mAP": r.map,
                "rank1": r.rank1,
                "rank5": r.rank5,
                "rank10": r.rank10,
                "num_query": r.num_query,
                "num_gallery": r.num_gallery,
            }),
        );
    }
    Value::Object(obj)
}

/// CSV of per-query APs: `protocol,record,image_ref,identity,ap`.
pub fn per_query_csv(reports: &[ProtocolReport], manifest: &Manifest) -> String {
    let mut out = String::from("protocol,record,image_ref,identity,ap\n");
    for r in reports {
        for &(q, ap) in &r.per_query {
            let rec = &manifest.records[q];
            out.push_str(&format!(
                "{},{q},{},{},{ap:.17}\n",
                r.protocol, rec.image_ref, rec.identity
            ));
        }
    }
    out
}

/// Mean of the two cross-modal mAPs.
pub fn cross_modal_map(reports: &[ProtocolReport]) -> Option<f64> {
    let get = |p: Protocol| reports.iter().find(|r| r.protocol == p).map(|r| r.map);
    Some((get(Protocol::Opt2Sar)? + get(Protocol::Sar2Opt)?) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SampleRecord, Split};

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false, true], 1), Some(0.5));
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - 0.8333333333333334).abs() < 1e-12);
        assert_eq!(average_precision(&[false], 0), None);
    }

    #[test]
    fn cmc_examples() {
        assert_eq!(cmc(&[1, 1, 1], &[1]), vec![1.0]);
        assert_eq!(cmc(&[1, 3], &[1, 5]), vec![0.5, 1.0]);
        let r = cmc(&[4, 2, 9, 11, 1], &[1, 2, 5, 10, 20]);
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ranking_examples() {
        let g = EmbeddingSet::from_rows(2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        assert_eq!(rank_gallery(&[0.0, 1.0], &g), vec![1, 3, 2, 0, 4]);
        assert_eq!(rank_gallery(g.row(2), &g)[0], 2);
    }

    fn rec(id: usize, m: Modality, role: Role) -> SampleRecord {
        SampleRecord {
            image_ref: format!("{id}_{m}_{role:?}"),
            identity: id,
            modality: m,
            split: Split::Test,
            role,
        }
    }

    #[test]
    fn duplicate_gallery_is_perfect() {
        let mut records = Vec::new();
        let mut rows = Vec::new();
        for id in 0..3 {
            for role in [Role::Query, Role::Gallery] {
                records.push(rec(id, Modality::Optical, role));
                rows.extend([id as f64, 1.0, (id * id) as f64]);
            }
        }
        let m = Manifest::new(records);
        let e = EmbeddingSet::from_rows(3, rows).unwrap();
        let r = evaluate_protocol(&e, &m, &Protocol::All.spec()).unwrap();
        assert_eq!((r.map, r.rank1), (1.0, 1.0));
        assert!(matches!(
            evaluate_protocol(&e, &m, &Protocol::Opt2Sar.spec()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn map_averages_query_aps() {
        // Query 0 finds its match first; query 1 finds it second.
        let records = vec![
            rec(0, Modality::Optical, Role::Query),
            rec(1, Modality::Optical, Role::Query),
            rec(0, Modality::Sar, Role::Gallery),
            rec(1, Modality::Sar, Role::Gallery),
        ];
        let rows = vec![1.0, 0.0, 1.0, 0.1, 1.0, 0.0, 0.0, 1.0];
        let e = EmbeddingSet::from_rows(2, rows).unwrap();
        let r = evaluate_protocol(&e, &Manifest::new(records), &Protocol::Opt2Sar.spec()).unwrap();
        assert_eq!(r.per_query.iter().map(|p| p.1).collect::<Vec<_>>(), vec![1.0, 0.5]);
        assert!((r.map - 0.75).abs() < 1e-15);
        assert_eq!(r.rank1, 0.5);
        let js = metrics_json(&[r]);
        assert!(js["opt2sar"]["mAP"].is_number());
    }
}
