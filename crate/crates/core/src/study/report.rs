//! Study outputs: CSV tables and the cost ledger.

use std::path::{Path, PathBuf};

use super::{ProxyKind, StudyOutcome, AVG_MACRO};
use crate::error::{Error, Result};

pub const REPORT_FILES: [&str; 5] = ["mixtures.csv", "correlations.csv", "scatter.csv", "ranks.csv", "ledger.toml"];

fn num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

/// Writes every report file into `dir`, returning their paths.
pub fn write_reports(outcome: &StudyOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report = &outcome.report;
    let proxies = ProxyKind::ALL.map(|k| k.as_str());

    let mut w = writer(&dir.join(REPORT_FILES[0]))?;
    w.write_record(["mixture_id", "domain", "seq", "merged", "macro", "micro", "mean_ind", "ind_id"])?;
    for r in &report.rows {
        w.write_record([
            r.mixture_id.clone(),
            r.domain.clone(),
            num(r.seq),
            num(Some(r.merged)),
            num(Some(r.macro_merged)),
            num(Some(r.micro_merged)),
            num(Some(r.mean_ind)),
            num(r.ind_id),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mut w = writer(&dir.join(REPORT_FILES[1]))?;
    w.write_record(std::iter::once("domain").chain(proxies))?;
    for c in &report.correlations {
        w.write_record(std::iter::once(c.domain.clone()).chain(ProxyKind::ALL.iter().map(|k| num(c.pearson[k]))))?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mut w = writer(&dir.join(REPORT_FILES[2]))?;
    w.write_record(["domain", "mixture_id", "proxy", "proxy_value", "seq"])?;
    let mut domains = report.domains.clone();
    if domains.len() > 1 {
        domains.push(AVG_MACRO.to_string());
    }
    for d in &domains {
        let truth = report.series(d, |r| r.seq);
        for kind in ProxyKind::ALL {
            for (m, v) in report.series(d, |r| kind.of(r)) {
                w.write_record([d.clone(), m.clone(), kind.as_str().to_string(), num(Some(v)), num(truth.get(&m).copied())])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let mut w = writer(&dir.join(REPORT_FILES[3]))?;
    w.write_record(["domain", "proxy", "true_rank_of_proxy_top1", "median_true_rank_of_topk", "top_k", "spearman"])?;
    for r in &report.ranks {
        let a = r.agreement.as_ref();
        w.write_record([
            r.domain.clone(),
            r.proxy.as_str().to_string(),
            a.map_or_else(String::new, |a| a.true_rank_of_proxy_top1.to_string()),
            num(a.map(|a| a.median_true_rank_of_topk)),
            a.map_or_else(String::new, |a| a.top_k.to_string()),
            num(a.map(|a| a.spearman)),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;

    let ledger = toml::to_string(&outcome.cost).map_err(|e| Error::invalid(e.to_string()))?;
    let path = dir.join(REPORT_FILES[4]);
    std::fs::write(&path, ledger).map_err(|e| Error::io(&path, e))?;

    Ok(REPORT_FILES.iter().map(|f| dir.join(f)).collect())
}
