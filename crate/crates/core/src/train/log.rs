use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::sig9;

pub const CSV_HEADER: &str = "epoch,train_loss,val_loss,lr,miou,pa,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub miou: f64,
    pub pa: f64,
    pub seconds: f64,
}

/// One row per completed epoch, epochs strictly increasing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(Error::Contract(format!(
                    "log epoch {} does not follow {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row with the smallest validation loss; the earliest wins ties.
    pub fn best(&self) -> Option<&LogRow> {
        self.rows.iter().fold(None, |best: Option<&LogRow>, r| match best {
            Some(b) if b.val_loss <= r.val_loss => Some(b),
            _ => Some(r),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                sig9(r.train_loss),
                sig9(r.val_loss),
                sig9(r.lr),
                sig9(r.miou),
                sig9(r.pa),
                sig9(r.seconds)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<TrainLog> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Data(format!("training log must start with `{CSV_HEADER}`")));
        }
        let mut log = TrainLog::default();
        for (i, line) in lines.enumerate() {
            let bad = || Error::Data(format!("training log line {}: `{line}`", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            log.push(LogRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                val_loss: num(2)?,
                lr: num(3)?,
                miou: num(4)?,
                pa: num(5)?,
                seconds: num(6)?,
            })?;
        }
        Ok(log)
    }

    /// Two-line loss chart (train and validation) over epochs.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const LEFT: f64 = 64.0;
        const RIGHT: f64 = 24.0;
        const TOP: f64 = 32.0;
        const BOTTOM: f64 = 48.0;
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);

        let e0 = self.rows.first().map_or(0, |r| r.epoch) as f64;
        let e1 = self.rows.last().map_or(1, |r| r.epoch) as f64;
        let espan = (e1 - e0).max(1.0);
        let ymax = self
            .rows
            .iter()
            .flat_map(|r| [r.train_loss, r.val_loss])
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max)
            .max(1e-12)
            * 1.05;
        let x = |e: usize| LEFT + (e as f64 - e0) / espan * pw;
        let y = |v: f64| TOP + ph - v.clamp(0.0, ymax) / ymax * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{LEFT} {TOP}V{:.2}H{:.2}" fill="none" stroke="black"/>"#,
            TOP + ph,
            LEFT + pw
        );
        for i in 0..=4 {
            let v = ymax * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
                LEFT - 6.0,
                y(v) + 4.0
            );
        }
        for r in [self.rows.first(), self.rows.last()].into_iter().flatten() {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                x(r.epoch),
                TOP + ph + 18.0,
                r.epoch
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#,
            LEFT + pw / 2.0,
            H - 8.0
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">loss</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0
        );
        let series: [(&str, &str, fn(&LogRow) -> f64); 2] = [
            ("train", "#1f77b4", |r| r.train_loss),
            ("val", "#ff7f0e", |r| r.val_loss),
        ];
        for (i, (label, color, get)) in series.iter().enumerate() {
            let points: Vec<String> = self
                .rows
                .iter()
                .map(|r| format!("{:.2},{:.2}", x(r.epoch), y(get(r))))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                points.join(" ")
            );
            let ly = TOP + 8.0 + 18.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
                W - RIGHT - 90.0,
                W - RIGHT - 66.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}">{label}</text>"#,
                W - RIGHT - 60.0,
                ly + 4.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Trailing mean over up to `window` rows ending at `epoch`.
pub fn moving_average(log: &TrainLog, epoch: usize, window: usize, get: fn(&LogRow) -> f64) -> Option<f64> {
    let end = log.rows.iter().position(|r| r.epoch == epoch)?;
    let start = (end + 1).saturating_sub(window);
    let vals = &log.rows[start..=end];
    Some(vals.iter().map(get).sum::<f64>() / vals.len() as f64)
}
