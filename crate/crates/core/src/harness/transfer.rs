//! Source-to-target transfer rows.

use std::io::{Read, Write};

use crate::attacks::{distortion_norms, run_attack, AdversarialBatch, AttackConfig};
use crate::checkpoint::Checkpoint;
use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::model::InstrumentedModel;
use crate::train::evaluate;

/// Default evaluation subset per row: ten batches of 128.
pub const DEFAULT_SUBSET: usize = 1280;

pub const CSV_HEADER: [&str; 8] = ["attack", "params", "s_acc", "t_acc", "delta_acc", "t_det", "l2", "linf"];

/// One line of a transfer table. Percentages are in `[0, 100]`; the norms
/// are blank for the clean row.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    pub attack: String,
    pub params: String,
    pub s_acc: f64,
    pub t_acc: f64,
    pub delta_acc: f64,
    pub t_det: f64,
    pub l2: Option<f64>,
    pub linf: Option<f64>,
}

impl TransferRow {
    pub fn new(attack: &str, params: &str, s_acc: f64, t_acc: f64, t_det: f64, norms: Option<(f64, f64)>) -> Self {
        Self {
            attack: attack.to_string(),
            params: params.to_string(),
            s_acc,
            t_acc,
            delta_acc: t_acc - s_acc,
            t_det,
            l2: norms.map(|n| n.0),
            linf: norms.map(|n| n.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Validation(format!("{} {}: {why}", self.attack, self.params)));
        for (name, v) in [("s_acc", self.s_acc), ("t_acc", self.t_acc), ("t_det", self.t_det)] {
            if !(0.0..=100.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 100]"));
            }
        }
        if self.delta_acc != self.t_acc - self.s_acc {
            return bad(format!(
                "delta_acc = {} but t_acc - s_acc = {}",
                self.delta_acc,
                self.t_acc - self.s_acc
            ));
        }
        for v in [self.l2, self.linf].into_iter().flatten() {
            if !(v >= 0.0) {
                return bad(format!("negative or NaN norm {v}"));
            }
        }
        Ok(())
    }

    fn record(&self) -> [String; 8] {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        [
            self.attack.clone(),
            self.params.clone(),
            self.s_acc.to_string(),
            self.t_acc.to_string(),
            self.delta_acc.to_string(),
            self.t_det.to_string(),
            opt(self.l2),
            opt(self.linf),
        ]
    }
}

fn percent(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

/// Scores an existing batch: source accuracy on it, target accuracy and
/// target alarms on it, and the batch distortion.
pub fn transfer_row(source: &InstrumentedModel, target: &InstrumentedModel, batch: &AdversarialBatch) -> Result<TransferRow> {
    let n = batch.len();
    let hits = |preds: Vec<usize>| preds.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    let s = hits(source.logits(&batch.perturbed)?.argmax_rows());
    let inf = target.infer(&batch.perturbed)?;
    let t = hits(inf.predictions());
    let det = inf.flagged.iter().filter(|&&f| f).count();
    let label = batch.config.label();
    let (attack, params) = label.split_once(' ').unwrap_or((label.as_str(), ""));
    Ok(TransferRow::new(
        attack,
        params,
        percent(s, n),
        percent(t, n),
        percent(det, n),
        Some(distortion_norms(batch)),
    ))
}

/// Clean accuracies of both models and the target's clean alarm rate.
pub fn clean_row(source: &InstrumentedModel, target: &InstrumentedModel, data: &DatasetSplit) -> Result<TransferRow> {
    let s = evaluate(source, data)?;
    let t = evaluate(target, data)?;
    Ok(TransferRow::new("clean", "", 100.0 * s.accuracy, 100.0 * t.accuracy, 100.0 * t.clean_fpr, None))
}

fn check_pair(source: &Checkpoint, target: &Checkpoint, data: &DatasetSplit) -> Result<()> {
    let (s, t) = (source.model.descriptor(), target.model.descriptor());
    if s != t {
        return Err(Error::Mismatch(format!(
            "source is `{}` but target is `{}`",
            s.render(),
            t.render()
        )));
    }
    let dims = &data.images.shape()[1..];
    if dims != s.input {
        return Err(Error::Mismatch(format!("data samples are {dims:?}, models expect {:?}", s.input)));
    }
    Ok(())
}

/// The first `subset` samples of `data`.
pub fn eval_subset(data: &DatasetSplit, subset: usize) -> DatasetSplit {
    data.range(0, subset.min(data.len()))
}

/// Crafts the batch on the source and scores it on the target.
pub fn run_transfer(
    source: &Checkpoint,
    target: &Checkpoint,
    attack: &AttackConfig,
    data: &DatasetSplit,
    subset: usize,
) -> Result<(TransferRow, AdversarialBatch)> {
    check_pair(source, target, data)?;
    attack.validate()?;
    let eval = eval_subset(data, subset);
    let batch = run_attack(&source.model, &eval.images, &eval.labels, attack)?;
    let row = transfer_row(&source.model, &target.model, &batch)?;
    Ok((row, batch))
}

/// Clean row followed by one row per attack, on a shared subset.
pub fn transfer_table(
    source: &Checkpoint,
    target: &Checkpoint,
    attacks: &[AttackConfig],
    data: &DatasetSplit,
    subset: usize,
) -> Result<Vec<TransferRow>> {
    check_pair(source, target, data)?;
    let eval = eval_subset(data, subset);
    let mut rows = vec![clean_row(&source.model, &target.model, &eval)?];
    for a in attacks {
        rows.push(run_transfer(source, target, a, &eval, subset)?.0);
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[TransferRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("writing CSV: {e}"));
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in rows {
        r.validate()?;
        w.write_record(r.record()).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing CSV: {e}")))?;
    Ok(())
}

pub fn to_csv(rows: &[TransferRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
}

/// Parses and validates rows; `Δ_Acc = T_Acc − S_Acc` is re-checked.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<TransferRow>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |why: String| Error::Validation(why);
    let header = r.headers().map_err(|e| bad(format!("CSV header: {e}")))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(bad(format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(format!("row {}: {e}", line + 1)))?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| bad(format!("row {}: `{}` is not a number in column {}", line + 1, &rec[i], CSV_HEADER[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let row = TransferRow {
            attack: rec[0].to_string(),
            params: rec[1].to_string(),
            s_acc: num(2)?,
            t_acc: num(3)?,
            delta_acc: num(4)?,
            t_det: num(5)?,
            l2: opt(6)?,
            linf: opt(7)?,
        };
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::TrainingMeta;
    use crate::model::build_model;
    use crate::tensor::Tensor;

    fn ckpt(seed: u64) -> Checkpoint {
        let key = crate::Key::parse("2x^2+3x+5<6").unwrap();
        Checkpoint::new(build_model("lenet5", Some(key), seed).unwrap(), TrainingMeta::default())
    }

    fn data(n: usize) -> DatasetSplit {
        let x = Tensor::from_fn(&[n, 1, 28, 28], |i| ((i * 13) % 29) as f32 / 29.0);
        DatasetSplit::new("t", x, (0..n).map(|i| i % 10).collect()).unwrap()
    }

    #[test]
    fn delta_is_recomputed_exactly_after_round_trip() {
        let rows = vec![
            TransferRow::new("clean", "", 99.13, 99.25, 0.6, None),
            TransferRow::new("cw", "lr=0.5 i=20 conf=0.999", 0.1, 12.7, 24.07, Some((1.93, 0.41))),
        ];
        let text = to_csv(&rows).unwrap();
        assert!(text.starts_with("attack,params,s_acc,t_acc,delta_acc,t_det,l2,linf\n"));
        assert!(text.contains("clean,,99.13,99.25,"));
        assert!(text.lines().nth(1).unwrap().ends_with(",,"));
        let back = read_csv(text.as_bytes()).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[1].delta_acc, back[1].t_acc - back[1].s_acc);
    }

    #[test]
    fn tampered_rows_fail_validation() {
        let text = "attack,params,s_acc,t_acc,delta_acc,t_det,l2,linf\nfgsm,eps=0.1,10,20,11,0,0.1,0.1\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::Validation(_))));
        let text = "attack,params,s_acc,t_acc,delta_acc,t_det,l2,linf\nfgsm,eps=0.1,10,120,110,0,,\n";
        assert!(read_csv(text.as_bytes()).is_err());
        assert!(read_csv("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn identity_attack_on_same_model_matches_clean_statistics() {
        let c = ckpt(1);
        let d = data(24);
        let (row, batch) = run_transfer(&c, &c, &AttackConfig::fgsm(0.0), &d, 16).unwrap();
        assert_eq!(batch.len(), 16);
        assert_eq!(row.delta_acc, 0.0);
        let clean = evaluate(&c.model, &d.range(0, 16)).unwrap();
        assert_eq!(row.t_det, 100.0 * clean.clean_fpr);
        assert_eq!(row.l2, Some(0.0));
    }

    #[test]
    fn mismatched_architectures_are_rejected() {
        let a = ckpt(0);
        let b = Checkpoint::new(build_model("smallcnn", None, 0).unwrap(), TrainingMeta::default());
        let err = run_transfer(&a, &b, &AttackConfig::fgsm(0.1), &data(4), 4).unwrap_err();
        assert!(matches!(err, Error::Mismatch(_)));
    }
}
