use std::io::{BufRead, Write};

use super::TrainError;

/// One validation checkpoint of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: u64,
    pub val_acc: f64,
    pub ci95: f64,
    /// Mean `alpha_m` over the validation episodes, per epoch.
    pub alpha: Vec<f64>,
    pub v: Vec<f64>,
    /// Mean episode test loss of the meta-batches since the previous row.
    pub train_loss: f64,
}

fn header(epochs: usize) -> String {
    let mut cols = vec!["iteration".to_string(), "val_acc".into(), "ci95".into()];
    cols.extend((1..=epochs).map(|m| format!("alpha_{m}")));
    cols.extend((1..=epochs).map(|m| format!("v_{m}")));
    cols.push("train_loss".into());
    cols.join(",")
}

/// `iteration,val_acc,ci95,alpha_1..alpha_M,v_1..v_M,train_loss`, full precision.
pub fn write_history<W: Write>(mut out: W, epochs: usize, rows: &[HistoryRow]) -> std::io::Result<()> {
    writeln!(out, "{}", header(epochs))?;
    for r in rows {
        let mut line = format!("{},{:.16e},{:.16e}", r.iteration, r.val_acc, r.ci95);
        for x in r.alpha.iter().chain(&r.v).chain([&r.train_loss]) {
            line.push_str(&format!(",{x:.16e}"));
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parses a history file; the epoch count comes from the header.
pub fn read_history<R: BufRead>(input: R) -> Result<(usize, Vec<HistoryRow>), TrainError> {
    let mut lines = input.lines();
    let head = match lines.next() {
        Some(h) => h.map_err(|e| TrainError::History(e.to_string()))?,
        None => return Err(TrainError::History("empty file".into())),
    };
    let cols = head.trim_end().split(',').count();
    if cols < 6 || (cols - 4) % 2 != 0 {
        return Err(TrainError::History(format!("line 1: unexpected header `{head}`")));
    }
    let epochs = (cols - 4) / 2;
    if head.trim_end() != header(epochs) {
        return Err(TrainError::History(format!("line 1: unexpected header `{head}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(|e| TrainError::History(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != cols {
            return Err(TrainError::History(format!("line {n}: expected {cols} fields, got {}", fields.len())));
        }
        let iteration = fields[0]
            .parse()
            .map_err(|_| TrainError::History(format!("line {n}: bad iteration `{}`", fields[0])))?;
        let nums = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| TrainError::History(format!("line {n}: bad number `{f}`"))))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(HistoryRow {
            iteration,
            val_acc: nums[0],
            ci95: nums[1],
            alpha: nums[2..2 + epochs].to_vec(),
            v: nums[2 + epochs..2 + 2 * epochs].to_vec(),
            train_loss: nums[2 + 2 * epochs],
        });
    }
    Ok((epochs, rows))
}
