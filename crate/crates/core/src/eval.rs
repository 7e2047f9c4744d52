//! Query/gallery retrieval: junk filtering, AP, mAP and CMC.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::Split;
use crate::model::Model;
use crate::tensor::dot;

/// Concatenated normalized part features of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub sample_id: String,
    pub identity: String,
    pub camera: String,
    pub vector: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(Metric::Cosine),
            "euclidean" => Some(Metric::Euclidean),
            _ => None,
        }
    }

    /// Larger is more similar.
    pub fn similarity(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na < 1e-12 || nb < 1e-12 {
                    0.0
                } else {
                    dot(a, b) / (na * nb)
                }
            }
            Metric::Euclidean => -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query_id: String,
    /// Gallery ids after junk removal, best first.
    pub ranked: Vec<String>,
    pub scores: Vec<f64>,
    pub matches: Vec<bool>,
    pub num_ground_truth: usize,
}

impl RankingResult {
    /// 1-based rank of the first match.
    pub fn first_match(&self) -> Option<usize> {
        self.matches.iter().position(|&m| m).map(|i| i + 1)
    }
}

pub fn embed(model: &Model, dataset: &Dataset, rows: &[usize]) -> Result<Vec<Descriptor>> {
    rows.iter()
        .map(|&i| {
            let r = &dataset.records[i];
            let set = model.part_features(&r.sample_id, &dataset.inputs[i])?;
            let vector = set.concatenated();
            if vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite descriptor for `{}`", r.sample_id)));
            }
            Ok(Descriptor {
                sample_id: r.sample_id.clone(),
                identity: r.identity.clone(),
                camera: r.camera.clone(),
                vector,
            })
        })
        .collect()
}

fn is_junk(query: &Descriptor, item: &Descriptor) -> bool {
    item.sample_id == query.sample_id
        || (item.identity == query.identity && item.camera == query.camera)
}

pub fn rank(query: &Descriptor, gallery: &[Descriptor], metric: Metric) -> Result<RankingResult> {
    if gallery.is_empty() {
        return Err(Error::Data("empty gallery".into()));
    }
    let mut kept: Vec<(&Descriptor, f64)> = Vec::with_capacity(gallery.len());
    for g in gallery {
        if g.vector.len() != query.vector.len() {
            return Err(Error::shape("rank", &[&[query.vector.len()], &[g.vector.len()]]));
        }
        if !is_junk(query, g) {
            kept.push((g, metric.similarity(&query.vector, &g.vector)));
        }
    }
    kept.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.sample_id.cmp(&b.0.sample_id))
    });
    let matches: Vec<bool> = kept.iter().map(|(g, _)| g.identity == query.identity).collect();
    Ok(RankingResult {
        query_id: query.sample_id.clone(),
        num_ground_truth: matches.iter().filter(|&&m| m).count(),
        ranked: kept.iter().map(|(g, _)| g.sample_id.clone()).collect(),
        scores: kept.iter().map(|(_, s)| *s).collect(),
        matches,
    })
}

/// `sum_k P(k) rel(k) / N_gt`; `None` without ground truth.
pub fn average_precision(result: &RankingResult) -> Option<f64> {
    ap_of_mask(&result.matches)
}

fn ap_of_mask(matches: &[bool]) -> Option<f64> {
    let n_gt = matches.iter().filter(|&&m| m).count();
    if n_gt == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, _) in matches.iter().enumerate().filter(|(_, &m)| m) {
        hits += 1;
        sum += hits as f64 / (k + 1) as f64;
    }
    Some(sum / n_gt as f64)
}

/// Mean AP over queries with defined AP.
pub fn mean_ap(results: &[RankingResult]) -> Result<f64> {
    let aps: Vec<f64> = results.iter().filter_map(average_precision).collect();
    if aps.is_empty() {
        return Err(Error::Data("no query has a ground-truth match".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// `CMC(k)` for `k = 1..=max_k` over queries with at least one match.
pub fn cmc(results: &[RankingResult], max_k: usize) -> Result<Vec<f64>> {
    if max_k == 0 {
        return Err(Error::Config("max_k must be at least 1".into()));
    }
    let firsts: Vec<usize> = results.iter().filter_map(RankingResult::first_match).collect();
    if firsts.is_empty() {
        return Ok(vec![0.0; max_k]);
    }
    let n = firsts.len() as f64;
    Ok((1..=max_k)
        .map(|k| firsts.iter().filter(|&&r| r <= k).count() as f64 / n)
        .collect())
}

/// Metrics of one protocol run, serialized as the summary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: String,
    pub metric: Metric,
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub trials: usize,
    pub queries: usize,
    pub undefined_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub random_baseline_map: Option<f64>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("metrics summary: {e}")))
    }
}

/// Ranking of every query plus its summary.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub results: Vec<RankingResult>,
    pub summary: Summary,
}

fn summarize(protocol: &str, metric: Metric, results: &[RankingResult], trials: usize) -> Result<Summary> {
    let curve = cmc(results, 10)?;
    let undefined = results.iter().filter(|r| r.num_ground_truth == 0).count();
    if undefined > 0 {
        log::warn!("{undefined} queries have no ground truth and are left out of mAP");
    }
    Ok(Summary {
        protocol: protocol.to_string(),
        metric,
        map: mean_ap(results)?,
        cmc1: curve[0],
        cmc5: curve[4],
        cmc10: curve[9],
        trials,
        queries: results.len(),
        undefined_queries: undefined,
        random_baseline_map: None,
    })
}

/// Every query against the whole gallery.
pub fn evaluate(queries: &[Descriptor], gallery: &[Descriptor], metric: Metric) -> Result<Evaluation> {
    if queries.is_empty() {
        return Err(Error::Data("no queries".into()));
    }
    let results = queries
        .iter()
        .map(|q| rank(q, gallery, metric))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize("standard", metric, &results, 1)?;
    Ok(Evaluation { results, summary })
}

/// One randomly chosen gallery image per identity, repeated over `trials`
/// seeded draws; metrics are averaged across trials and the reported
/// rankings come from the first trial.
pub fn evaluate_single_gallery(
    queries: &[Descriptor],
    gallery: &[Descriptor],
    metric: Metric,
    trials: usize,
    seed: u64,
) -> Result<Evaluation> {
    if trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    if queries.is_empty() {
        return Err(Error::Data("no queries".into()));
    }
    let mut by_identity: BTreeMap<&str, Vec<&Descriptor>> = BTreeMap::new();
    for g in gallery {
        by_identity.entry(g.identity.as_str()).or_default().push(g);
    }
    let mut first = None;
    let (mut map, mut c1, mut c5, mut c10) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let picked: Vec<Descriptor> = by_identity
            .values()
            .map(|items| (*items.choose(&mut rng).expect("non-empty group")).clone())
            .collect();
        let results = queries
            .iter()
            .map(|q| rank(q, &picked, metric))
            .collect::<Result<Vec<_>>>()?;
        let s = summarize("single-gallery", metric, &results, trials)?;
        map += s.map;
        c1 += s.cmc1;
        c5 += s.cmc5;
        c10 += s.cmc10;
        if first.is_none() {
            first = Some((results, s));
        }
    }
    let n = trials as f64;
    let (results, mut summary) = first.expect("trials >= 1");
    summary.map = map / n;
    summary.cmc1 = c1 / n;
    summary.cmc5 = c5 / n;
    summary.cmc10 = c10 / n;
    Ok(Evaluation { results, summary })
}

/// Expected mAP of a random ranking of the same filtered galleries,
/// estimated by shuffling each ranking `shuffles` times.
pub fn random_baseline(results: &[RankingResult], shuffles: usize, seed: u64) -> Result<f64> {
    if shuffles == 0 {
        return Err(Error::Config("at least one shuffle is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for r in results.iter().filter(|r| r.num_ground_truth > 0) {
        let mut mask = r.matches.clone();
        let mut sum = 0.0;
        for _ in 0..shuffles {
            mask.shuffle(&mut rng);
            sum += ap_of_mask(&mask).expect("has ground truth");
        }
        total += sum / shuffles as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("no query has a ground-truth match".into()));
    }
    Ok(total / count as f64)
}

/// One CSV row per query: id, AP, first-match rank, top-10 ids.
pub fn write_rankings(path: &Path, results: &[RankingResult]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["query_id", "ap", "first_match_rank", "top10"]).map_err(fail)?;
    for r in results {
        let ap = average_precision(r).map_or_else(String::new, |v| v.to_string());
        let first = r.first_match().map_or_else(String::new, |v| v.to_string());
        let top: Vec<&str> = r.ranked.iter().take(10).map(String::as_str).collect();
        w.write_record([r.query_id.as_str(), &ap, &first, &top.join(" ")])
            .map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Query and gallery descriptors of a dataset.
pub fn split_descriptors(model: &Model, dataset: &Dataset) -> Result<(Vec<Descriptor>, Vec<Descriptor>)> {
    let queries = embed(model, dataset, &dataset.rows(Split::Query))?;
    let gallery = embed(model, dataset, &dataset.rows(Split::Gallery))?;
    if queries.is_empty() || gallery.is_empty() {
        return Err(Error::Data("manifest needs query and gallery samples".into()));
    }
    Ok((queries, gallery))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(id: &str, identity: &str, camera: &str, v: &[f64]) -> Descriptor {
        Descriptor {
            sample_id: id.into(),
            identity: identity.into(),
            camera: camera.into(),
            vector: v.to_vec(),
        }
    }

    fn mask_result(matches: &[bool]) -> RankingResult {
        RankingResult {
            query_id: "q".into(),
            ranked: (0..matches.len()).map(|i| format!("g{i}")).collect(),
            scores: vec![0.0; matches.len()],
            matches: matches.to_vec(),
            num_ground_truth: matches.iter().filter(|&&m| m).count(),
        }
    }

    #[test]
    fn singleton_match() {
        let q = d("q", "a", "c1", &[1.0, 0.0]);
        let r = rank(&q, &[d("g", "a", "c2", &[0.5, 0.5])], Metric::Cosine).unwrap();
        assert_eq!(r.first_match(), Some(1));
        assert_eq!(average_precision(&r), Some(1.0));
    }

    #[test]
    fn hand_cases() {
        let ap = average_precision(&mask_result(&[true, false, true])).unwrap();
        assert_eq!(ap, (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(average_precision(&mask_result(&[false, true])), Some(0.5));
        assert_eq!(average_precision(&mask_result(&[false, false, false, true])), Some(0.25));
        assert_eq!(average_precision(&mask_result(&[true, true, false])), Some(1.0));
        assert_eq!(average_precision(&mask_result(&[false, false])), None);
    }

    #[test]
    fn junk_is_removed() {
        let q = d("q", "a", "c1", &[1.0, 0.0]);
        let g = vec![
            d("j", "a", "c1", &[1.0, 0.0]),
            d("q", "a", "c2", &[1.0, 0.0]),
            d("n", "b", "c1", &[0.0, 1.0]),
            d("m", "a", "c2", &[0.0, 1.0]),
        ];
        let r = rank(&q, &g, Metric::Cosine).unwrap();
        assert_eq!(r.ranked, vec!["m", "n"]);
        assert_eq!(r.num_ground_truth, 1);
        // ties on score resolve by id: "m" < "n"
        assert_eq!(average_precision(&r), Some(1.0));
    }

    #[test]
    fn empty_gallery_rejected() {
        let q = d("q", "a", "c1", &[1.0]);
        assert!(rank(&q, &[], Metric::Cosine).is_err());
    }

    #[test]
    fn means_and_curves() {
        let rs = vec![mask_result(&[true]), mask_result(&[false, true])];
        assert_eq!(mean_ap(&rs).unwrap(), 0.75);
        assert_eq!(mean_ap(&rs[..1]).unwrap(), 1.0);
        assert!(mean_ap(&[mask_result(&[false])]).is_err());

        let rs = vec![mask_result(&[true, false, false]), mask_result(&[false, false, true])];
        assert_eq!(cmc(&rs, 4).unwrap(), vec![0.5, 0.5, 1.0, 1.0]);
        assert!(cmc(&rs, 0).is_err());
    }

    #[test]
    fn euclidean_prefers_close_points() {
        let q = d("q", "a", "c1", &[1.0, 0.0]);
        let g = vec![d("far", "b", "c2", &[3.0, 0.0]), d("near", "a", "c2", &[2.0, 0.0])];
        assert_eq!(rank(&q, &g, Metric::Euclidean).unwrap().ranked[0], "near");
        // both lie on the same ray, so cosine ties and falls back to ids
        assert_eq!(rank(&q, &g, Metric::Cosine).unwrap().ranked[0], "far");
    }

    #[test]
    fn baseline_of_single_match() {
        // one match among n items: E[AP] = H_n / n
        let r = mask_result(&[true, false, false, false]);
        let exact = (1.0 + 0.5 + 1.0 / 3.0 + 0.25) / 4.0;
        let est = random_baseline(&[r], 20000, 3).unwrap();
        assert!((est - exact).abs() < 0.01, "{est} vs {exact}");
    }

    #[test]
    fn single_gallery_trials_average() {
        let queries = vec![d("q1", "a", "c1", &[1.0, 0.0]), d("q2", "b", "c1", &[0.0, 1.0])];
        let gallery = vec![
            d("a1", "a", "c2", &[1.0, 0.1]),
            d("a2", "a", "c3", &[0.9, 0.2]),
            d("b1", "b", "c2", &[0.1, 1.0]),
            d("b2", "b", "c3", &[0.0, 1.0]),
        ];
        let e = evaluate_single_gallery(&queries, &gallery, Metric::Cosine, 10, 7).unwrap();
        assert_eq!(e.summary.trials, 10);
        assert_eq!(e.summary.map, 1.0);
        assert!(e.results.iter().all(|r| r.ranked.len() == 2));
    }

    #[test]
    fn summary_json_round_trip() {
        let s = Summary {
            protocol: "standard".into(),
            metric: Metric::Cosine,
            map: 0.5,
            cmc1: 0.25,
            cmc5: 1.0,
            cmc10: 1.0,
            trials: 1,
            queries: 4,
            undefined_queries: 0,
            random_baseline_map: Some(0.1),
        };
        assert_eq!(Summary::from_json(&s.to_json()).unwrap(), s);
    }
}
