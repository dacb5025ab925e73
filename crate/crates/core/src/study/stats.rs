//! Correlation and ranking statistics over per-mixture scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("pearson over {} and {} values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Unweighted mean of per-domain perplexities over `domains`.
pub fn macro_avg_eval(per_domain: &BTreeMap<String, f64>, domains: &[String]) -> Result<f64> {
    if domains.is_empty() {
        return Err(Error::invalid("macro average over no domains"));
    }
    let mut sum = 0.0;
    for d in domains {
        sum += per_domain.get(d).ok_or_else(|| Error::Missing { kind: "domain", name: d.clone() })?;
    }
    Ok(sum / domains.len() as f64)
}

/// 1-based ranks by ascending score, ties broken by key.
pub fn ranks(scores: &BTreeMap<String, f64>) -> BTreeMap<String, usize> {
    let mut order: Vec<(&String, f64)> = scores.iter().map(|(k, v)| (k, *v)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    order.into_iter().enumerate().map(|(i, (k, _))| (k.clone(), i + 1)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAgreement {
    /// True rank of the mixture the proxy ranks first.
    pub true_rank_of_proxy_top1: usize,
    /// Median true rank of the proxy's `top_k` best mixtures.
    pub median_true_rank_of_topk: f64,
    pub top_k: usize,
    /// Pearson correlation of the two rank vectors.
    pub spearman: f64,
}

pub fn rank_agreement(proxy: &BTreeMap<String, f64>, truth: &BTreeMap<String, f64>, top_k: usize) -> Result<RankAgreement> {
    if proxy.len() < 2 || top_k == 0 {
        return Err(Error::invalid("rank agreement needs at least two mixtures and top_k >= 1"));
    }
    if !proxy.keys().eq(truth.keys()) {
        return Err(Error::invalid("proxy and truth cover different mixtures"));
    }
    let pr = ranks(proxy);
    let tr = ranks(truth);
    let mut by_proxy: Vec<(&String, usize)> = pr.iter().map(|(k, r)| (k, *r)).collect();
    by_proxy.sort_by_key(|(_, r)| *r);
    let top_k = top_k.min(by_proxy.len());
    let mut top: Vec<usize> = by_proxy[..top_k].iter().map(|(k, _)| tr[*k]).collect();
    top.sort_unstable();
    let median = if top_k % 2 == 1 {
        top[top_k / 2] as f64
    } else {
        (top[top_k / 2 - 1] + top[top_k / 2]) as f64 / 2.0
    };
    let xs: Vec<f64> = pr.values().map(|r| *r as f64).collect();
    let ys: Vec<f64> = tr.values().map(|r| *r as f64).collect();
    Ok(RankAgreement {
        true_rank_of_proxy_top1: tr[by_proxy[0].0],
        median_true_rank_of_topk: median,
        top_k,
        spearman: pearson(&xs, &ys)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(vals: &[(&str, f64)]) -> BTreeMap<String, f64> {
        vals.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let lin: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson(&xs, &lin).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
        // Σdxdy = 5.5, Σdx² = 5, Σdy² = 8.75
        let r = pearson(&xs, &[1.0, 3.0, 2.0, 5.0]).unwrap();
        assert!((r - 5.5 / (5.0f64 * 8.75).sqrt()).abs() < 1e-15);
        assert!((r - 0.8315).abs() < 1e-4);
        assert_eq!(pearson(&xs, &[1.0; 4]).unwrap_err().to_string(), "undefined correlation: zero variance");
    }

    #[test]
    fn macro_average() {
        let m = map(&[("a", 2.0), ("b", 4.0)]);
        let doms = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(macro_avg_eval(&m, &doms(&["a", "b"])).unwrap(), 3.0);
        assert_eq!(macro_avg_eval(&m, &doms(&["b"])).unwrap(), 4.0);
        assert!(macro_avg_eval(&m, &doms(&["c"])).is_err());
        let nine: BTreeMap<String, f64> = (1..=9).map(|i| (format!("d{i}"), i as f64 * 1.5)).collect();
        let all: Vec<String> = nine.keys().cloned().collect();
        assert_eq!(macro_avg_eval(&nine, &all).unwrap(), 7.5);
    }

    #[test]
    fn identical_and_reversed_rankings() {
        let truth = map(&[("a", 1.0), ("b", 2.0), ("c", 3.0), ("d", 4.0)]);
        let same = rank_agreement(&truth, &truth, 3).unwrap();
        assert_eq!((same.true_rank_of_proxy_top1, same.median_true_rank_of_topk, same.spearman), (1, 2.0, 1.0));
        let rev = map(&[("a", 4.0), ("b", 3.0), ("c", 2.0), ("d", 1.0)]);
        let r = rank_agreement(&rev, &truth, 1).unwrap();
        assert_eq!(r.true_rank_of_proxy_top1, 4);
        assert_eq!(r.spearman, -1.0);
    }

    #[test]
    fn one_swap_fixture() {
        let truth = map(&[("m1", 10.0), ("m2", 11.0), ("m3", 12.0), ("m4", 13.0), ("m5", 14.0)]);
        let proxy = map(&[("m1", 5.1), ("m2", 5.0), ("m3", 5.2), ("m4", 5.3), ("m5", 5.4)]);
        let r = rank_agreement(&proxy, &truth, 2).unwrap();
        assert_eq!(r.true_rank_of_proxy_top1, 2);
        assert_eq!(r.median_true_rank_of_topk, 1.5);
        // d = (1, -1, 0, 0, 0): ρ = 1 − 6·2/(5·24)
        assert!((r.spearman - 0.9).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_id() {
        let r = ranks(&map(&[("b", 1.0), ("a", 1.0), ("c", 0.5)]));
        assert_eq!(r["c"], 1);
        assert_eq!(r["a"], 2);
        assert_eq!(r["b"], 3);
    }
}
