use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use updp_tensor::Tensor;

use crate::error::Result;
use crate::graph::{count_params, init_params, Model};

/// Renders rows under a header; columns after the first are right-aligned.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let mut s = String::new();
        for (i, (cell, &w)) in cells.iter().zip(&width).enumerate() {
            let pad = w - cell.chars().count();
            if i > 0 {
                s.push_str("  ");
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            } else {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(width.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

/// `1234567` as `1.23M`.
pub fn human(n: u64) -> String {
    let v = n as f64;
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        n.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub segment: String,
    pub kind: String,
    pub macs: u64,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsTable {
    pub model: String,
    pub rows: Vec<FlopsRow>,
    pub total_macs: u64,
    pub total_params: usize,
}

pub fn flops_table(model: &Model) -> Result<FlopsTable> {
    let flops = model.count_flops()?;
    let mut rows = vec![FlopsRow {
        segment: "stem".into(),
        kind: "stem".into(),
        macs: flops.stem,
        params: count_params([&model.stem]),
    }];
    for (b, &macs) in model.blocks.iter().zip(&flops.blocks) {
        rows.push(FlopsRow {
            segment: b.name.clone(),
            kind: format!("{:?}{}", b.kind, if b.pruned { " (pruned)" } else { "" }),
            macs,
            params: count_params([&b.body]),
        });
    }
    rows.push(FlopsRow {
        segment: "head".into(),
        kind: "head".into(),
        macs: flops.head,
        params: count_params([&model.head]),
    });
    Ok(FlopsTable {
        model: model.name.clone(),
        rows,
        total_macs: flops.total(),
        total_params: model.count_params(),
    })
}

impl FlopsTable {
    pub fn render(&self) -> String {
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.segment.clone(), r.kind.clone(), r.macs.to_string(), r.params.to_string()])
            .collect();
        rows.push(vec![
            "total".into(),
            String::new(),
            format!("{} ({})", self.total_macs, human(self.total_macs)),
            format!("{} ({})", self.total_params, human(self.total_params as u64)),
        ]);
        format!("{}\n{}", self.model, render_table(&["segment", "kind", "MACs", "params"], &rows))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub macs: u64,
    pub params: usize,
    /// Median wall-clock time of one batched forward pass.
    pub forward_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch: usize,
    pub baseline: BenchRow,
    pub merged: BenchRow,
    pub mac_reduction_pct: f64,
    pub param_reduction_pct: f64,
    pub speedup: f64,
}

fn bench_row(model: &Model, batch: usize, reps: usize) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = init_params::<f32, _>(model.segments(), &mut rng)?;
    let mut shape = vec![batch];
    shape.extend_from_slice(&model.input);
    let x = Tensor::<f32>::randn(shape, 1.0, &mut rng);
    model.forward(&params, &x)?;
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            model.forward(&params, &x).map(|_| t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    Ok(BenchRow {
        model: model.name.clone(),
        macs: model.count_flops()?.total(),
        params: model.count_params(),
        forward_ms: times[times.len() / 2],
    })
}

/// Cost and forward-time comparison on the reference engine. Timing uses
/// freshly initialized weights; only the graphs matter.
pub fn bench_report(baseline: &Model, merged: &Model, batch: usize, reps: usize) -> Result<BenchReport> {
    let b = bench_row(baseline, batch, reps)?;
    let m = bench_row(merged, batch, reps)?;
    let pct = |before: f64, after: f64| if before > 0.0 { 100.0 * (1.0 - after / before) } else { 0.0 };
    Ok(BenchReport {
        batch,
        mac_reduction_pct: pct(b.macs as f64, m.macs as f64),
        param_reduction_pct: pct(b.params as f64, m.params as f64),
        speedup: if m.forward_ms > 0.0 { b.forward_ms / m.forward_ms } else { f64::INFINITY },
        baseline: b,
        merged: m,
    })
}

impl BenchReport {
    pub fn render(&self) -> String {
        let row = |r: &BenchRow| vec![r.model.clone(), human(r.macs), human(r.params as u64), format!("{:.2}", r.forward_ms)];
        let mut text = render_table(&["model", "MACs", "params", "forward ms"], &[row(&self.baseline), row(&self.merged)]);
        text.push_str(&format!(
            "MACs -{:.1}%  params -{:.1}%  speedup {:.2}x (batch {})\n",
            self.mac_reduction_pct, self.param_reduction_pct, self.speedup, self.batch
        ));
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_align() {
        let t = render_table(&["a", "n"], &[vec!["long name".into(), "1".into()], vec!["x".into(), "12345".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[2].ends_with("    1"));
        assert_eq!(lines[2].len(), lines[3].len());
    }

    #[test]
    fn human_units() {
        assert_eq!(human(3_670_000_000), "3.67G");
        assert_eq!(human(5_400_000), "5.40M");
        assert_eq!(human(12), "12");
    }
}
