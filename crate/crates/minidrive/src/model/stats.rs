//! Cross-modal attention statistics: for each transformer and head, how
//! often one modality's queries rank the other modality's keys among their
//! strongest attention targets.

use std::ops::Range;

use minigrad::{Graph, Tensor};

use crate::model::net::{Model, Obs};

pub const TOP_K: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadStats {
    /// Percent of image-token queries with a birds-eye key in their top-k.
    pub image_pct: f64,
    /// Percent of birds-eye queries with an image key in their top-k.
    pub bev_pct: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("top-{k} requested over {n} keys")]
    KTooLarge { k: usize, n: usize },
    #[error("token range is empty")]
    EmptyRange,
    #[error("model variant records no attention")]
    NoAttention,
}

/// Top-k key indices of one weight row, ties broken toward the lower token
/// index. The stable sort makes saturated rows (many exactly-equal weights)
/// deterministic.
fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    idx
}

pub fn cross_modal_stats(
    weights: &Tensor<f32>,
    img: &Range<usize>,
    bev: &Range<usize>,
    k: usize,
) -> Result<HeadStats, StatsError> {
    let (rows, cols) = weights.dims2();
    if k > cols {
        return Err(StatsError::KTooLarge { k, n: cols });
    }
    if img.is_empty() || bev.is_empty() || img.end > rows || bev.end > rows {
        return Err(StatsError::EmptyRange);
    }
    let count = |queries: &Range<usize>, keys: &Range<usize>| {
        let hits = queries
            .clone()
            .filter(|&r| {
                top_k(&weights.data[r * cols..(r + 1) * cols], k)
                    .iter()
                    .any(|i| keys.contains(i))
            })
            .count();
        100.0 * hits as f64 / queries.len() as f64
    };
    Ok(HeadStats { image_pct: count(img, bev), bev_pct: count(bev, img) })
}

/// Run the model over `frames` and average the per-head statistics of each
/// fused transformer's final attention layer. Rows are TSV:
/// `transformer  head  image_pct  bev_pct`, transformers shallow to deep.
pub fn attention_report(model: &Model, frames: &[Obs], k: usize) -> Result<String, StatsError> {
    let mut acc: Vec<Vec<HeadStats>> = Vec::new();
    for obs in frames {
        let mut g = Graph::<f32>::new();
        let bound = model.bind(&mut g);
        let fo = model.forward(&mut g, &bound, obs);
        if fo.attention.is_empty() {
            return Err(StatsError::NoAttention);
        }
        if acc.is_empty() {
            acc = vec![
                vec![HeadStats { image_pct: 0.0, bev_pct: 0.0 }; model.cfg.heads];
                fo.attention.len()
            ];
        }
        for (t, heads) in fo.attention.iter().enumerate() {
            let (img, bev) = &fo.attn_ranges[t];
            for (h, &w) in heads.iter().enumerate() {
                let wt = g.val(w);
                let wt = Tensor::new(wt.shape.clone(), wt.data.clone());
                let s = cross_modal_stats(&wt, img, bev, k)?;
                acc[t][h].image_pct += s.image_pct;
                acc[t][h].bev_pct += s.bev_pct;
            }
        }
    }
    if acc.is_empty() {
        return Err(StatsError::NoAttention);
    }
    let n = frames.len() as f64;
    let mut out = String::from("transformer\thead\timage_pct\tbev_pct\n");
    for (t, heads) in acc.iter().enumerate() {
        for (h, s) in heads.iter().enumerate() {
            out.push_str(&format!("{t}\t{h}\t{:.1}\t{:.1}\n", s.image_pct / n, s.bev_pct / n));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Tensor<f32> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor::new(vec![rows, cols], data)
    }

    #[test]
    fn uniform_attention_scores_zero_image_side() {
        // 16 image + 16 birds-eye tokens, all weights equal: the top-5 of
        // every row resolves to tokens 0..4 by the index tie-break, so no
        // image query reaches a birds-eye key, while every birds-eye query
        // sees image keys.
        let w = mat(32, 32, |_, _| 1.0 / 32.0);
        let s = cross_modal_stats(&w, &(0..16), &(16..32), 5).unwrap();
        assert_eq!(s.image_pct, 0.0);
        assert_eq!(s.bev_pct, 100.0);
    }

    #[test]
    fn single_hot_column_saturates_both_sides() {
        // All mass on birds-eye token 20: it tops every row, and the
        // remaining four slots fall to image tokens 0..3 by the tie-break.
        let w = mat(32, 32, |_, c| if c == 20 { 1.0 } else { 0.0 });
        let s = cross_modal_stats(&w, &(0..16), &(16..32), 5).unwrap();
        assert_eq!(s.image_pct, 100.0);
        assert_eq!(s.bev_pct, 100.0);
    }

    #[test]
    fn k_larger_than_keys_is_an_error() {
        let w = mat(4, 4, |_, _| 0.25);
        assert_eq!(
            cross_modal_stats(&w, &(0..2), &(2..4), 5),
            Err(StatsError::KTooLarge { k: 5, n: 4 })
        );
    }

    #[test]
    fn block_diagonal_attention_counts_cross_rows_only() {
        // Image rows attend to image keys, birds-eye rows to birds-eye keys,
        // except row 0 which puts its mass on a birds-eye key.
        let w = mat(8, 8, |r, c| {
            let same_side = (r < 4) == (c < 4);
            if r == 0 {
                if c == 6 { 1.0 } else { 0.0 }
            } else if same_side {
                0.25
            } else {
                0.0
            }
        });
        let s = cross_modal_stats(&w, &(0..4), &(4..8), 2).unwrap();
        assert_eq!(s.image_pct, 25.0);
        assert_eq!(s.bev_pct, 0.0);
    }
}
