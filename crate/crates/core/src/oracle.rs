//! Brute-force average precision, written independently of [`crate::eval`]
//! so the two can check each other.

use crate::eval::Descriptor;

/// AP of `query` against `gallery` under cosine similarity, or `None` when
/// no non-junk gallery item shares the query's identity.
pub fn brute_force_ap(query: &Descriptor, gallery: &[Descriptor]) -> Option<f64> {
    let qn = query.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    // (similarity, id, relevant) for every non-junk item
    let mut table: Vec<(f64, &str, bool)> = Vec::new();
    for g in gallery {
        let same_id = g.identity == query.identity;
        if g.sample_id == query.sample_id || (same_id && g.camera == query.camera) {
            continue;
        }
        let gn = g.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut s = 0.0;
        for i in 0..g.vector.len() {
            s += query.vector[i] * g.vector[i];
        }
        let sim = if qn < 1e-12 || gn < 1e-12 { 0.0 } else { s / (qn * gn) };
        table.push((sim, g.sample_id.as_str(), same_id));
    }
    // insertion sort: higher similarity first, then smaller id
    for i in 1..table.len() {
        let mut j = i;
        while j > 0 {
            let (a, b) = (&table[j - 1], &table[j]);
            let swap = b.0 > a.0 || (b.0 == a.0 && b.1 < a.1);
            if !swap {
                break;
            }
            table.swap(j - 1, j);
            j -= 1;
        }
    }
    let n_gt = table.iter().filter(|t| t.2).count();
    if n_gt == 0 {
        return None;
    }
    let mut total = 0.0;
    for k in 0..table.len() {
        if table[k].2 {
            let relevant_so_far = table[..=k].iter().filter(|t| t.2).count();
            total += relevant_so_far as f64 / (k + 1) as f64;
        }
    }
    Some(total / n_gt as f64)
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

    #[test]
    fn singleton_gallery() {
        let q = d("q", "a", "c1", &[1.0, 0.0]);
        assert_eq!(brute_force_ap(&q, &[d("g", "a", "c2", &[0.0, 1.0])]), Some(1.0));
        assert_eq!(brute_force_ap(&q, &[d("g", "a", "c1", &[0.0, 1.0])]), None);
        assert_eq!(brute_force_ap(&q, &[d("g", "b", "c2", &[0.0, 1.0])]), None);
    }

    #[test]
    fn ranks_one_and_three() {
        let q = d("q", "a", "c1", &[1.0, 0.0]);
        let g = [
            d("g1", "a", "c2", &[1.0, 0.0]),
            d("g2", "b", "c2", &[1.0, 0.5]),
            d("g3", "a", "c3", &[1.0, 1.0]),
        ];
        assert_eq!(brute_force_ap(&q, &g), Some((1.0 + 2.0 / 3.0) / 2.0));
    }
}
