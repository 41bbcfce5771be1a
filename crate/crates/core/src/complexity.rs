//! FLOPs / BOPs / OPs accounting.
//!
//! One multiply-accumulate counts as one operation. Binary layers contribute
//! to BOPs, full-precision layers to FLOPs, and `OPs = BOPs / 64 + FLOPs`.
//! Elementwise work (normalization, activations, shortcuts, pooling) is free.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::{LayerKind, LayerSpec, ModelSpec};
use crate::error::Result;
use crate::kernels::{representation_ability, RepAbilityReport};

/// BOPs per full-precision operation.
pub const BOPS_PER_OP: u64 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub name: String,
    pub kind: String,
    pub binary: bool,
    pub macs: u64,
    pub rep_ability: Option<RepAbilityReport>,
}

impl ComplexityRow {
    pub fn flops(&self) -> u64 {
        if self.binary {
            0
        } else {
            self.macs
        }
    }

    pub fn bops(&self) -> u64 {
        if self.binary {
            self.macs
        } else {
            0
        }
    }

    pub fn ops(&self) -> f64 {
        ops_of(self.bops(), self.flops())
    }
}

/// `bops / 64 + flops`.
pub fn ops_of(bops: u64, flops: u64) -> f64 {
    bops as f64 / BOPS_PER_OP as f64 + flops as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub model: String,
    pub input: (usize, usize),
    pub rows: Vec<ComplexityRow>,
    pub flops: u64,
    pub bops: u64,
    pub ops: f64,
}

fn kind_label(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv { .. } => "conv",
        LayerKind::ChannelFc { .. } => "channel-fc",
        LayerKind::LocalFc { .. } => "local-fc",
        LayerKind::SpatialFc { .. } => "spatial-fc",
        LayerKind::MaxPool { .. } => "maxpool",
    }
}

/// Report for an explicit layer list.
pub fn analyze_layers(model: &str, input: (usize, usize), layers: &[LayerSpec]) -> Result<ComplexityReport> {
    let mut rows = Vec::with_capacity(layers.len());
    for l in layers {
        let rep_ability = if l.binary && l.reduction_len().is_some() {
            Some(representation_ability(l)?)
        } else {
            None
        };
        rows.push(ComplexityRow {
            name: l.name.clone(),
            kind: kind_label(&l.kind).to_string(),
            binary: l.binary,
            macs: l.macs(),
            rep_ability,
        });
    }
    let flops = rows.iter().map(ComplexityRow::flops).sum();
    let bops = rows.iter().map(ComplexityRow::bops).sum();
    Ok(ComplexityReport {
        model: model.to_string(),
        input,
        rows,
        flops,
        bops,
        ops: ops_of(bops, flops),
    })
}

/// Report for a model on an `h×w` input.
pub fn analyze(spec: &ModelSpec, h: usize, w: usize) -> Result<ComplexityReport> {
    analyze_layers(&spec.name, (h, w), &spec.layers(h, w)?)
}

fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

impl ComplexityReport {
    /// Aligned, human-readable table.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "model {} @ {}x{}", self.model, self.input.0, self.input.1);
        let _ = writeln!(
            s,
            "{:<width$}  {:<10}  {:>6}  {:>14}  {:>12}  {:>7}",
            "layer", "kind", "binary", "macs", "ops", "N"
        );
        for r in &self.rows {
            let n = r.rep_ability.map_or("-".to_string(), |a| a.n.to_string());
            let _ = writeln!(
                s,
                "{:<width$}  {:<10}  {:>6}  {:>14}  {:>12}  {:>7}",
                r.name,
                r.kind,
                if r.binary { "yes" } else { "no" },
                r.macs,
                sci(r.ops()),
                n
            );
        }
        let _ = writeln!(s, "FLOPs {}  BOPs {}  OPs {}", sci(self.flops as f64), sci(self.bops as f64), sci(self.ops));
        s
    }

    /// One header line, one line per layer, one `total` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,binary,macs,flops,bops,ops,rep_ability_n\n");
        for r in &self.rows {
            let n = r.rep_ability.map_or(String::new(), |a| a.n.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.name,
                r.kind,
                r.binary,
                r.macs,
                r.flops(),
                r.bops(),
                r.ops(),
                n
            );
        }
        let macs: u64 = self.rows.iter().map(|r| r.macs).sum();
        let _ = writeln!(s, "total,,,{macs},{},{},{},", self.flops, self.bops, self.ops);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub name: String,
    pub ops_a: f64,
    pub ops_b: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    pub rows: Vec<DeltaRow>,
    pub ops_a: f64,
    pub ops_b: f64,
    pub flops_delta: i128,
    pub bops_delta: i128,
    /// `ops_b − ops_a`.
    pub ops_delta: f64,
    /// `(ops_b − ops_a) / ops_a`, zero when `ops_a` is zero.
    pub relative: f64,
}

impl Comparison {
    /// Fractional OPs saving of `a` relative to `b`: `1 − ops_a / ops_b`.
    pub fn reduction_of_a(&self) -> f64 {
        if self.ops_b == 0.0 {
            0.0
        } else {
            1.0 - self.ops_a / self.ops_b
        }
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "a = {}  b = {}", self.model_a, self.model_b);
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>12}  {:>12}", "layer", "ops a", "ops b", "b - a");
        for r in &self.rows {
            if r.delta != 0.0 {
                let _ = writeln!(s, "{:<width$}  {:>12}  {:>12}  {:>12}", r.name, sci(r.ops_a), sci(r.ops_b), sci(r.delta));
            }
        }
        let _ = writeln!(
            s,
            "total OPs a {}  b {}  delta {} ({:+.1}%)  a saves {:.1}% vs b",
            sci(self.ops_a),
            sci(self.ops_b),
            sci(self.ops_delta),
            100.0 * self.relative,
            100.0 * self.reduction_of_a()
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,ops_a,ops_b,delta\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.name, r.ops_a, r.ops_b, r.delta);
        }
        let _ = writeln!(s, "total,{},{},{}", self.ops_a, self.ops_b, self.ops_delta);
        s
    }
}

/// Per-layer and total deltas from `a` to `b`. Layers are matched by name;
/// a layer present on one side only compares against zero.
pub fn compare(a: &ComplexityReport, b: &ComplexityReport) -> Comparison {
    let mut rows: Vec<DeltaRow> = a
        .rows
        .iter()
        .map(|ra| {
            let ops_b = b.rows.iter().find(|rb| rb.name == ra.name).map_or(0.0, ComplexityRow::ops);
            DeltaRow {
                name: ra.name.clone(),
                ops_a: ra.ops(),
                ops_b,
                delta: ops_b - ra.ops(),
            }
        })
        .collect();
    for rb in &b.rows {
        if !a.rows.iter().any(|ra| ra.name == rb.name) {
            rows.push(DeltaRow {
                name: rb.name.clone(),
                ops_a: 0.0,
                ops_b: rb.ops(),
                delta: rb.ops(),
            });
        }
    }
    let ops_delta = b.ops - a.ops;
    Comparison {
        model_a: a.model.clone(),
        model_b: b.model.clone(),
        rows,
        ops_a: a.ops,
        ops_b: b.ops,
        flops_delta: b.flops as i128 - a.flops as i128,
        bops_delta: b.bops as i128 - a.bops as i128,
        ops_delta,
        relative: if a.ops == 0.0 { 0.0 } else { ops_delta / a.ops },
    }
}

/// A point for an OPs-versus-accuracy chart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub model: String,
    pub ops: f64,
    pub top1: Option<f64>,
}

pub fn plot_data_csv(points: &[PlotPoint]) -> String {
    let mut s = String::from("model,ops,top1\n");
    for p in points {
        let acc = p.top1.map_or(String::new(), |a| format!("{a:.4}"));
        let _ = writeln!(s, "{},{},{}", p.model, p.ops, acc);
    }
    s
}
