//! Comparison tables over one or more metrics sets.

use super::run::Metrics;
use super::Strategy;

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub strategy: Strategy,
    pub requests: usize,
    pub ttft_p50_s: f64,
    pub ttft_p95_s: f64,
    pub ttft_mean_s: f64,
    /// Over requests with more than one output token.
    pub tbt_mean_s: f64,
    /// Restored history tokens per second of restoration; infinite when
    /// history came back for free, zero with no history at all.
    pub restore_tokens_per_s: f64,
    pub storage_bytes_per_token: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl Summary {
    pub fn of(m: &Metrics) -> Self {
        let mut ttft: Vec<f64> = m.requests.iter().map(|r| r.ttft_s).collect();
        ttft.sort_by(f64::total_cmp);
        let hist: usize = m.requests.iter().map(|r| r.history_tokens).sum();
        let rest: f64 = m.requests.iter().filter(|r| r.history_tokens > 0).map(|r| r.restore_s).sum();
        let restore_tokens_per_s = match (hist, rest > 0.0) {
            (0, _) => 0.0,
            (_, false) => f64::INFINITY,
            (h, true) => h as f64 / rest,
        };
        Self {
            strategy: m.strategy,
            requests: m.requests.len(),
            ttft_p50_s: percentile(&ttft, 0.5),
            ttft_p95_s: percentile(&ttft, 0.95),
            ttft_mean_s: mean(ttft.iter().copied()),
            tbt_mean_s: mean(m.requests.iter().filter(|r| r.output_budget > 1).map(|r| r.tbt_s)),
            restore_tokens_per_s,
            storage_bytes_per_token: m.storage_bytes_per_token,
        }
    }
}

fn ratio_columns(sums: &[Summary]) -> Vec<Strategy> {
    if sums.len() < 2 {
        return Vec::new();
    }
    sums.iter().map(|s| s.strategy).collect()
}

fn header(ratios: &[Strategy]) -> Vec<String> {
    let mut h: Vec<String> = [
        "strategy",
        "requests",
        "ttft_p50_s",
        "ttft_p95_s",
        "ttft_mean_s",
        "tbt_mean_s",
        "restore_tok_per_s",
        "bytes_per_token",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(ratios.iter().map(|b| format!("ttft_{b}_over_this")));
    h
}

fn rows(sets: &[Metrics]) -> (Vec<String>, Vec<Vec<String>>) {
    let sums: Vec<Summary> = sets.iter().map(Summary::of).collect();
    let ratios = ratio_columns(&sums);
    let body = sums
        .iter()
        .map(|s| {
            let mut r = vec![
                s.strategy.to_string(),
                s.requests.to_string(),
                format!("{:.6}", s.ttft_p50_s),
                format!("{:.6}", s.ttft_p95_s),
                format!("{:.6}", s.ttft_mean_s),
                format!("{:.6}", s.tbt_mean_s),
                format!("{:.1}", s.restore_tokens_per_s),
                format!("{:.1}", s.storage_bytes_per_token),
            ];
            for b in &ratios {
                let other = sums.iter().find(|o| o.strategy == *b).expect("listed");
                r.push(format!("{:.3}", other.ttft_mean_s / s.ttft_mean_s));
            }
            r
        })
        .collect();
    (header(&ratios), body)
}

/// Aligned text table. Ratio columns appear only with two or more sets.
pub fn report_table(sets: &[Metrics]) -> String {
    let (head, body) = rows(sets);
    let mut widths: Vec<usize> = head.iter().map(String::len).collect();
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ") + "\n"
    };
    let mut out = line(&head);
    for r in &body {
        out.push_str(&line(r));
    }
    out
}

pub fn report_csv(sets: &[Metrics]) -> String {
    let (head, body) = rows(sets);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&head).expect("in-memory write");
    for r in &body {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::serving::run::RequestMetrics;

    fn metrics(strategy: Strategy, ttfts: &[f64]) -> Metrics {
        Metrics {
            strategy,
            plan: None,
            storage_bytes_per_token: 8.0,
            snapshot_stalls: 0,
            stall_s: 0.0,
            requests: ttfts
                .iter()
                .enumerate()
                .map(|(i, &t)| RequestMetrics {
                    session_id: format!("s{i}"),
                    round: 0,
                    history_tokens: 100,
                    new_prompt_tokens: 10,
                    output_budget: 3,
                    arrival_s: 0.0,
                    queue_s: 0.0,
                    restore_s: t / 2.0,
                    prefill_s: t / 2.0,
                    ttft_s: t,
                    tbt_s: 0.01,
                    finish_s: t + 0.02,
                    output_tokens: "1 2 3".into(),
                })
                .collect(),
        }
    }

    #[test]
    fn single_set_has_no_ratio_columns() {
        let csv = report_csv(&[metrics(Strategy::HCache, &[1.0, 2.0])]);
        assert!(!csv.contains("over_this"));
        assert_eq!(report_table(&[metrics(Strategy::HCache, &[1.0])]).lines().count(), 2);
    }

    #[test]
    fn ratio_is_baseline_over_row() {
        let sets = [metrics(Strategy::HCache, &[1.0, 3.0]), metrics(Strategy::KvOffload, &[4.0, 4.0])];
        let csv = report_csv(&sets);
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        let head = rd.headers().unwrap().clone();
        let col = head.iter().position(|h| h == "ttft_kv_offload_over_this").unwrap();
        let first = rd.records().next().unwrap().unwrap();
        assert_eq!(&first[0], "hidden");
        assert_eq!(first[col].parse::<f64>().unwrap(), 2.0);
    }

    #[test]
    fn percentiles_and_throughput() {
        let s = Summary::of(&metrics(Strategy::HCache, &[4.0, 1.0, 3.0, 2.0]));
        assert_eq!(s.ttft_p50_s, 2.0);
        assert_eq!(s.ttft_p95_s, 4.0);
        assert_eq!(s.ttft_mean_s, 2.5);
        // 400 tokens over 5 s of restoration
        assert_eq!(s.restore_tokens_per_s, 80.0);
    }
}
