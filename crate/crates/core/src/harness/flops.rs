//! Operation counts for the base network and its instrumentation.
//!
//! One multiply-add counts as one FLOP. Base layers count their
//! multiply-adds only (biases, activations and pooling are free). A degree
//! `n` detector costs `n` Horner steps plus one comparison per value; a guard
//! costs the channel average, the `C×C` projection, the key scaling and the
//! elementwise product.

use std::fmt::Write as _;

use crate::model::{ArchDescriptor, BlockShape, Traced};

pub const CONVENTION: &str = "# flops: one multiply-add = 1; base layers count multiply-adds only";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    /// Position in the descriptor's layer list.
    pub index: usize,
    pub kind: &'static str,
    /// `CxHxW` for convolutions, `in->out` for linear layers.
    pub shape: String,
    pub original: u64,
    pub detector: u64,
    pub guard: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub model: String,
    pub degree: usize,
    pub layers: Vec<LayerFlops>,
    pub original: u64,
    pub detector: u64,
    pub guard: u64,
    pub total: u64,
    pub overhead_percent: f64,
}

pub fn detector_flops(block: BlockShape, degree: usize) -> u64 {
    (degree as u64 + 1) * block.volume()
}

pub fn guard_flops(block: BlockShape) -> u64 {
    let c = block.channels as u64;
    block.volume() + c * c + c + block.volume()
}

/// Totals and overhead from per-part counts.
pub fn aggregate(model: &str, degree: usize, original: u64, detector: u64, guard: u64) -> FlopReport {
    FlopReport {
        model: model.to_string(),
        degree,
        layers: Vec::new(),
        original,
        detector,
        guard,
        total: original + detector + guard,
        overhead_percent: if original == 0 {
            0.0
        } else {
            100.0 * (detector + guard) as f64 / original as f64
        },
    }
}

pub fn flop_count(desc: &ArchDescriptor, degree: usize) -> FlopReport {
    let mut layers = Vec::new();
    for (index, t) in desc.trace().into_iter().enumerate() {
        match t {
            Traced::Conv { in_channels, kernel, out } => layers.push(LayerFlops {
                index,
                kind: "conv",
                shape: format!("{}x{}x{}", out.channels, out.height, out.width),
                original: out.volume() * (in_channels * kernel * kernel) as u64,
                detector: detector_flops(out, degree),
                guard: guard_flops(out),
            }),
            Traced::Linear { input, output } => layers.push(LayerFlops {
                index,
                kind: "linear",
                shape: format!("{input}->{output}"),
                original: (input * output) as u64,
                detector: 0,
                guard: 0,
            }),
            Traced::Other => {}
        }
    }
    let sum = |f: fn(&LayerFlops) -> u64| layers.iter().map(f).sum::<u64>();
    let mut report = aggregate(&desc.name, degree, sum(|l| l.original), sum(|l| l.detector), sum(|l| l.guard));
    report.layers = layers;
    report
}

impl FlopReport {
    /// Convention comment, header, one line per layer and a total line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CONVENTION}; detector degree = {}", self.degree).unwrap();
        s.push_str("layer,kind,shape,original,detector,guard,total,overhead_percent\n");
        for l in &self.layers {
            let total = l.original + l.detector + l.guard;
            writeln!(s, "{},{},{},{},{},{},{},", l.index, l.kind, l.shape, l.original, l.detector, l.guard, total).unwrap();
        }
        writeln!(
            s,
            "total,{},,{},{},{},{},{:.4}",
            self.model, self.original, self.detector, self.guard, self.total, self.overhead_percent
        )
        .unwrap();
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| model | original | detector | guard | total | overhead |\n|---|---|---|---|---|---|\n");
        writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.2}% |",
            self.model, self.original, self.detector, self.guard, self.total, self.overhead_percent
        )
        .unwrap();
        s
    }
}
