//! Markdown rendering of transfer rows.

use super::transfer::TransferRow;
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 8] = ["attack", "params", "S_Acc", "T_Acc", "Δ_Acc", "T_Det", "l2", "l∞"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "markdown" | "md" => Ok(Format::Markdown),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// Percentages to two decimals, norms to four; blank norms stay blank.
pub fn render_markdown(rows: &[TransferRow]) -> Result<String> {
    let mut s = format!("| {} |\n|{}\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
    for r in rows {
        r.validate()?;
        let norm = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {} | {} |\n",
            r.attack,
            r.params,
            r.s_acc,
            r.t_acc,
            r.delta_acc,
            r.t_det,
            norm(r.l2),
            norm(r.linf)
        ));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_layout_and_blank_norms() {
        let rows = [
            TransferRow::new("clean", "", 99.13, 99.25, 0.5, None),
            TransferRow::new("fgsm", "eps=0.02", 97.0, 98.5, 0.0, Some((0.55, 0.02))),
        ];
        let md = render_markdown(&rows).unwrap();
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| attack | params | S_Acc | T_Acc | Δ_Acc | T_Det | l2 | l∞ |");
        assert_eq!(lines[2], "| clean |  | 99.13 | 99.25 | 0.12 | 0.50 |  |  |");
        assert_eq!(lines[3], "| fgsm | eps=0.02 | 97.00 | 98.50 | 1.50 | 0.00 | 0.5500 | 0.0200 |");
    }

    #[test]
    fn invalid_rows_are_not_rendered() {
        let mut r = TransferRow::new("fgsm", "eps=0.1", 10.0, 20.0, 0.0, None);
        r.delta_acc = 11.0;
        assert!(render_markdown(&[r]).is_err());
    }
}
